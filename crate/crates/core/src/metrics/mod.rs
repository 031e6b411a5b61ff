//! Overlap, centreline and boundary-distance metrics on binary masks.

mod distance;
mod skeleton;

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridField, GridShape, Real};

pub use distance::{boundary, hd95, percentile, squared_distance_transform};
pub use skeleton::skeletonize;

/// Binary mask on a grid; every entry is 0 or 1.
#[derive(Clone, Debug, PartialEq)]
pub struct BinaryMask {
    shape: GridShape,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn new(shape: GridShape, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != shape.len() {
            return Err(Error::Domain(format!(
                "mask has {} entries, grid has {}",
                bits.len(),
                shape.len()
            )));
        }
        if let Some(i) = bits.iter().position(|&b| b > 1) {
            return Err(Error::Domain(format!(
                "mask value {} at location {:?} is not binary",
                bits[i],
                shape.coords(i)
            )));
        }
        Ok(Self { shape, bits })
    }

    pub fn empty(shape: GridShape) -> Self {
        let bits = vec![0; shape.len()];
        Self { shape, bits }
    }

    pub fn from_fn(shape: GridShape, mut f: impl FnMut(usize) -> bool) -> Self {
        let bits = (0..shape.len()).map(|p| f(p) as u8).collect();
        Self { shape, bits }
    }

    /// Cells with value strictly above `threshold`.
    pub fn threshold<T: Real>(field: &GridField<T>, threshold: f64) -> Result<Self> {
        if field.channels() != 1 {
            return Err(Error::Domain(format!(
                "thresholding needs one channel, got {}",
                field.channels()
            )));
        }
        let t = T::lit(threshold);
        Ok(Self::from_fn(field.shape().clone(), |p| field.data()[p] > t))
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<u8> {
        self.bits
    }

    #[inline]
    pub fn is_set(&self, p: usize) -> bool {
        self.bits[p] != 0
    }

    #[inline]
    pub fn value(&self, p: usize) -> f64 {
        self.bits[p] as f64
    }

    pub fn set(&mut self, p: usize, on: bool) {
        self.bits[p] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b != 0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn with_spacing(mut self, spacing: &[f64]) -> Result<Self> {
        self.shape = self.shape.respaced(spacing)?;
        Ok(self)
    }

    /// `self ⊆ other`.
    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| a <= b)
    }

    pub fn to_field(&self) -> GridField<f64> {
        GridField::from_raw(self.shape.clone(), 1, self.bits.iter().map(|&b| b as f64).collect())
    }
}

/// Foreground probability thresholded at 0.5, the fixed binarisation rule.
pub fn threshold_probs<T: Real>(pi_fg: &GridField<T>) -> Result<BinaryMask> {
    BinaryMask::threshold(pi_fg, 0.5)
}

fn check_same(a: &BinaryMask, b: &BinaryMask) -> Result<()> {
    if a.shape.extents() != b.shape.extents() {
        return Err(Error::Domain(format!(
            "mask extents differ: {:?} vs {:?}",
            a.shape.extents(),
            b.shape.extents()
        )));
    }
    Ok(())
}

fn overlap(a: &BinaryMask, b: &BinaryMask) -> usize {
    a.bits.iter().zip(&b.bits).filter(|(&x, &y)| x & y != 0).count()
}

/// `2|P∩G| / (|P| + |G|)`; two empty masks score 1.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same(pred, gt)?;
    let (np, ng) = (pred.count(), gt.count());
    if np + ng == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap(pred, gt) as f64 / (np + ng) as f64)
}

/// Centreline Dice from the skeletons of both masks.
pub fn cl_dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    check_same(pred, gt)?;
    if pred.is_empty() && gt.is_empty() {
        return Ok(1.0);
    }
    let sp = skeletonize(pred);
    let sg = skeletonize(gt);
    let (cp, cg) = (sp.count(), sg.count());
    if cp == 0 || cg == 0 {
        return Ok(0.0);
    }
    let tprec = overlap(&sp, gt) as f64 / cp as f64;
    let tsens = overlap(&sg, pred) as f64 / cg as f64;
    if tprec + tsens == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * tprec * tsens / (tprec + tsens))
}

/// Adjacency used for component labelling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    /// Shared faces: 4 neighbours in 2D, 6 in 3D.
    #[default]
    Face,
    /// Faces, edges and corners: 8 in 2D, 26 in 3D.
    Full,
}

/// Offsets of the full (8/26) neighbourhood, excluding the centre.
pub(crate) fn full_offsets(dim: usize) -> Vec<Vec<isize>> {
    let mut out = Vec::new();
    let mut cur = vec![-1isize; dim];
    loop {
        if cur.iter().any(|&c| c != 0) {
            out.push(cur.clone());
        }
        let mut axis = dim;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            if cur[axis] < 1 {
                cur[axis] += 1;
                break;
            }
            cur[axis] = -1;
        }
    }
}

/// Visits in-bounds neighbours of `p` under the given offsets.
pub(crate) fn for_each_offset(
    shape: &GridShape,
    p: usize,
    offsets: &[Vec<isize>],
    mut f: impl FnMut(usize),
) {
    let c = shape.coords(p);
    let ext = shape.extents();
    let strides = shape.strides();
    'next: for off in offsets {
        let mut q = 0usize;
        for a in 0..c.len() {
            let v = c[a] as isize + off[a];
            if v < 0 || v >= ext[a] as isize {
                continue 'next;
            }
            q += v as usize * strides[a];
        }
        f(q);
    }
}

/// Per-cell component labels (0 = background, components numbered from 1 in raster order).
pub fn label_components(mask: &BinaryMask, connectivity: Connectivity) -> (Vec<u32>, usize) {
    let shape = &mask.shape;
    let offsets = full_offsets(shape.dim());
    let mut labels = vec![0u32; shape.len()];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..shape.len() {
        if !mask.is_set(start) || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back(start);
        while let Some(p) = queue.pop_front() {
            let mut visit = |q: usize| {
                if mask.is_set(q) && labels[q] == 0 {
                    labels[q] = count;
                    queue.push_back(q);
                }
            };
            match connectivity {
                Connectivity::Face => shape.for_each_neighbor(p, &mut visit),
                Connectivity::Full => for_each_offset(shape, p, &offsets, &mut visit),
            }
        }
    }
    (labels, count as usize)
}

/// Number of connected foreground components.
pub fn count_components(mask: &BinaryMask, connectivity: Connectivity) -> usize {
    label_components(mask, connectivity).1
}

/// Per-case evaluation row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub id: String,
    pub dsc: f64,
    pub cldice: f64,
    /// `None` when either mask is empty.
    pub hd95: Option<f64>,
    pub components_pred: usize,
    pub components_gt: usize,
}

impl MetricReport {
    /// `|components(pred) − components(gt)|`.
    pub fn component_error(&self) -> usize {
        self.components_pred.abs_diff(self.components_gt)
    }
}

/// All metrics of one case; HD95 uses the spacing carried by `gt`.
pub fn evaluate(id: impl Into<String>, pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricReport> {
    let hd = match hd95(pred, gt) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric { .. }) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricReport {
        id: id.into(),
        dsc: dice(pred, gt)?,
        cldice: cl_dice(pred, gt)?,
        hd95: hd,
        components_pred: count_components(pred, Connectivity::Face),
        components_gt: count_components(gt, Connectivity::Face),
    })
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self { mean, std: var.sqrt(), n }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dsc: MeanStd,
    pub cldice: MeanStd,
    /// Over cases where HD95 is defined.
    pub hd95: MeanStd,
    pub hd95_undefined: usize,
    pub component_error: MeanStd,
}

pub fn summarize(reports: &[MetricReport]) -> MetricSummary {
    let col = |f: fn(&MetricReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    let hd: Vec<f64> = reports.iter().filter_map(|r| r.hd95).collect();
    MetricSummary {
        dsc: MeanStd::of(&col(|r| r.dsc)),
        cldice: MeanStd::of(&col(|r| r.cldice)),
        hd95: MeanStd::of(&hd),
        hd95_undefined: reports.len() - hd.len(),
        component_error: MeanStd::of(&col(|r| r.component_error() as f64)),
    }
}

/// Median with linear interpolation between the two central values.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    percentile(&v, 0.5)
}

/// CSV with one row per case; undefined HD95 is written as `nan`.
pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("id,dsc,cldice,hd95,components_pred,components_gt\n");
    for r in reports {
        let hd = r.hd95.map_or_else(|| "nan".to_string(), |v| v.to_string());
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.id, r.dsc, r.cldice, hd, r.components_pred, r.components_gt
        ));
    }
    out
}
