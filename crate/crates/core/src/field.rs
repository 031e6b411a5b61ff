//! Grid domain, multi-channel fields and the axis-aligned neighbourhood.
//!
//! Fields are stored location-major: the `C` channel values of one location
//! are contiguous, and locations follow row-major order (last axis fastest).
//! Neighbours outside the domain are dropped, which gives a zero-flux
//! boundary for every stencil built on top of this module.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type of a [`GridField`].
///
/// `f64` is used everywhere gradients are computed; `f32` is accepted on the
/// inference and benchmark paths only.
pub trait Real: Float + Sum + Default + Debug + Send + Sync + 'static {
    /// Whether logits are clamped to `[-LOGIT_CLAMP, LOGIT_CLAMP]` after each
    /// propagation step.
    const CLAMP_LOGITS: bool;

    fn lit(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const CLAMP_LOGITS: bool = false;

    #[inline]
    fn lit(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const CLAMP_LOGITS: bool = true;

    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Bound applied to logits in 32-bit mode.
pub const LOGIT_CLAMP: f64 = 60.0;

/// Extents and physical spacing of a 2D or 3D grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridShape {
    extents: Vec<usize>,
    spacing: Vec<f64>,
}

impl GridShape {
    /// Unit-spacing grid.
    pub fn new(extents: &[usize]) -> Result<Self> {
        Self::with_spacing(extents, &vec![1.0; extents.len()])
    }

    pub fn with_spacing(extents: &[usize], spacing: &[f64]) -> Result<Self> {
        if extents.len() != 2 && extents.len() != 3 {
            return Err(Error::Domain(format!(
                "grid dimension must be 2 or 3, got {}",
                extents.len()
            )));
        }
        if spacing.len() != extents.len() {
            return Err(Error::Domain(format!(
                "spacing has {} entries for a {}-D grid",
                spacing.len(),
                extents.len()
            )));
        }
        if extents.iter().any(|&e| e == 0) {
            return Err(Error::Domain(format!("zero extent in {extents:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Domain(format!("spacing must be positive, got {spacing:?}")));
        }
        extents
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .ok_or_else(|| Error::Domain(format!("extents {extents:?} overflow")))?;
        Ok(Self {
            extents: extents.to_vec(),
            spacing: spacing.to_vec(),
        })
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn extents(&self) -> &[usize] {
        &self.extents
    }

    pub fn spacing(&self) -> &[f64] {
        &self.spacing
    }

    /// Number of locations |Ω|.
    pub fn len(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Same extents, different spacing.
    pub fn respaced(&self, spacing: &[f64]) -> Result<Self> {
        Self::with_spacing(&self.extents, spacing)
    }

    /// Row-major strides of the location index.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.dim()];
        for a in (0..self.dim() - 1).rev() {
            strides[a] = strides[a + 1] * self.extents[a + 1];
        }
        strides
    }

    pub fn contains(&self, p: &[usize]) -> bool {
        p.len() == self.dim() && p.iter().zip(&self.extents).all(|(&x, &e)| x < e)
    }

    /// Flat index of a location.
    pub fn index(&self, p: &[usize]) -> Result<usize> {
        if !self.contains(p) {
            return Err(Error::Domain(format!(
                "location {p:?} outside grid {:?}",
                self.extents
            )));
        }
        Ok(p.iter().zip(&self.extents).fold(0, |acc, (&x, &e)| acc * e + x))
    }

    /// Coordinates of a flat index.
    pub fn coords(&self, mut flat: usize) -> Vec<usize> {
        let mut p = vec![0; self.dim()];
        for a in (0..self.dim()).rev() {
            p[a] = flat % self.extents[a];
            flat /= self.extents[a];
        }
        p
    }

    /// Visits the in-domain face neighbours of `flat` in the canonical order
    /// (axis 0 −/+, axis 1 −/+, ...).
    #[inline]
    pub fn for_each_neighbor(&self, flat: usize, mut visit: impl FnMut(usize)) {
        let dim = self.extents.len();
        let mut rem = flat;
        let mut coord = [0usize; 3];
        let mut stride = [0usize; 3];
        let mut s = 1;
        for a in (0..dim).rev() {
            coord[a] = rem % self.extents[a];
            rem /= self.extents[a];
            stride[a] = s;
            s *= self.extents[a];
        }
        for a in 0..dim {
            if coord[a] > 0 {
                visit(flat - stride[a]);
            }
            if coord[a] + 1 < self.extents[a] {
                visit(flat + stride[a]);
            }
        }
    }

    /// In-domain face neighbours of `p`, in canonical order.
    pub fn neighbors(&self, p: &[usize]) -> Result<Vec<Vec<usize>>> {
        let flat = self.index(p)?;
        let mut out = Vec::with_capacity(2 * self.dim());
        self.for_each_neighbor(flat, |q| out.push(self.coords(q)));
        Ok(out)
    }

    pub fn neighbor_count(&self, flat: usize) -> usize {
        let mut n = 0;
        self.for_each_neighbor(flat, |_| n += 1);
        n
    }
}

/// The unit offsets of the 4-neighbourhood (2D) or 6-neighbourhood (3D).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborList {
    offsets: Vec<Vec<isize>>,
}

impl NeighborList {
    pub fn for_dim(dim: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::Domain(format!("unsupported dimension {dim}")));
        }
        let mut offsets = Vec::with_capacity(2 * dim);
        for a in 0..dim {
            for step in [-1isize, 1] {
                let mut o = vec![0; dim];
                o[a] = step;
                offsets.push(o);
            }
        }
        Ok(Self { offsets })
    }

    pub fn offsets(&self) -> &[Vec<isize>] {
        &self.offsets
    }

    pub fn count(&self) -> usize {
        self.offsets.len()
    }
}

/// A `C`-channel real field over a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GridField<T = f64> {
    shape: GridShape,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> GridField<T> {
    /// Wraps `data` (location-major). Rejects length mismatches and non-finite values.
    pub fn new(shape: GridShape, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Domain("field needs at least one channel".into()));
        }
        let expected = shape.len() * channels;
        if data.len() != expected {
            return Err(Error::Domain(format!(
                "field data has {} values, expected {expected} ({} locations x {channels} channels)",
                data.len(),
                shape.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Domain(format!(
                "non-finite value {:?} at location {:?}, channel {}",
                data[i],
                shape.coords(i / channels),
                i % channels
            )));
        }
        Ok(Self {
            shape,
            channels,
            data,
        })
    }

    pub fn zeros(shape: GridShape, channels: usize) -> Self {
        Self::filled(shape, channels, T::zero())
    }

    pub fn filled(shape: GridShape, channels: usize, value: T) -> Self {
        assert!(channels > 0 && value.is_finite());
        let n = shape.len() * channels;
        Self {
            shape,
            channels,
            data: vec![value; n],
        }
    }

    /// Builds a field from `value(location, channel)`.
    pub fn from_fn(
        shape: GridShape,
        channels: usize,
        mut value: impl FnMut(usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.len() * channels);
        for p in 0..shape.len() {
            for c in 0..channels {
                data.push(value(p, c));
            }
        }
        Self::new(shape, channels, data)
    }

    pub(crate) fn from_raw(shape: GridShape, channels: usize, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), shape.len() * channels);
        Self {
            shape,
            channels,
            data,
        }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn locations(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    /// Mutable access for the single owner. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Channel vector at flat location `p`.
    #[inline]
    pub fn at(&self, p: usize) -> &[T] {
        &self.data[p * self.channels..(p + 1) * self.channels]
    }

    #[inline]
    pub fn at_mut(&mut self, p: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[p * c..(p + 1) * c]
    }

    #[inline]
    pub fn get(&self, p: usize, c: usize) -> T {
        self.data[p * self.channels + c]
    }

    /// Single-channel copy of channel `c`.
    pub fn channel(&self, c: usize) -> Result<GridField<T>> {
        if c >= self.channels {
            return Err(Error::Domain(format!(
                "channel {c} out of range for a {}-channel field",
                self.channels
            )));
        }
        let data = (0..self.locations()).map(|p| self.get(p, c)).collect();
        Ok(GridField::from_raw(self.shape.clone(), 1, data))
    }

    /// Same values with a different spacing attached.
    pub fn with_spacing(mut self, spacing: &[f64]) -> Result<Self> {
        self.shape = self.shape.respaced(spacing)?;
        Ok(self)
    }

    /// Element type conversion.
    pub fn cast<U: Real>(&self) -> GridField<U> {
        GridField::from_raw(
            self.shape.clone(),
            self.channels,
            self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        )
    }

    pub fn same_grid(&self, other: &GridField<impl Real>) -> bool {
        self.shape.extents() == other.shape.extents()
    }
}

/// Aggregate statistics of a field.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
    pub finite_count: usize,
}

/// Min, max and compensated mean over every entry of the field.
pub fn field_stats<T: Real>(field: &GridField<T>) -> FieldStats {
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut finite_count = 0;
    // Neumaier summation
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in field.data().iter().map(|v| v.as_f64()) {
        if v.is_finite() {
            finite_count += 1;
        }
        min = min.min(v);
        max = max.max(v);
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    FieldStats {
        min,
        max,
        mean: (sum + comp) / field.data().len() as f64,
        finite_count,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn interior_corner_and_3d_neighbor_counts() {
        let s2 = GridShape::new(&[5, 5]).unwrap();
        assert_eq!(s2.neighbors(&[2, 2]).unwrap().len(), 4);
        assert_eq!(s2.neighbors(&[0, 0]).unwrap().len(), 2);
        let s3 = GridShape::new(&[4, 4, 4]).unwrap();
        assert_eq!(s3.neighbors(&[1, 2, 1]).unwrap().len(), 6);
    }

    #[test]
    fn neighbor_order_is_axis_minus_then_plus() {
        let s = GridShape::new(&[5, 5]).unwrap();
        let n = s.neighbors(&[2, 2]).unwrap();
        assert_eq!(n, vec![vec![1, 2], vec![3, 2], vec![2, 1], vec![2, 3]]);
    }

    #[test]
    fn out_of_domain_location_is_rejected() {
        let s = GridShape::new(&[5, 5]).unwrap();
        assert!(matches!(s.neighbors(&[5, 0]), Err(Error::Domain(_))));
        assert!(matches!(s.neighbors(&[1, 1, 1]), Err(Error::Domain(_))));
    }

    #[test]
    fn neighbor_list_has_only_unit_axis_steps() {
        for dim in [2, 3] {
            let list = NeighborList::for_dim(dim).unwrap();
            assert_eq!(list.count(), 2 * dim);
            for o in list.offsets() {
                assert_eq!(o.iter().map(|x| x.abs()).sum::<isize>(), 1);
            }
        }
    }

    #[test]
    fn neighbor_relation_is_symmetric_up_to_8_cubed() {
        for extents in [vec![8, 8], vec![1, 7], vec![8, 8, 8], vec![3, 1, 5]] {
            let s = GridShape::new(&extents).unwrap();
            let mut adj = vec![Vec::new(); s.len()];
            for p in 0..s.len() {
                s.for_each_neighbor(p, |q| adj[p].push(q));
            }
            for p in 0..s.len() {
                for &q in &adj[p] {
                    assert!(adj[q].contains(&p), "{extents:?}: {p} -> {q} not symmetric");
                }
                let c = s.coords(p);
                let faces = c
                    .iter()
                    .zip(s.extents())
                    .map(|(&x, &e)| (x == 0) as usize + (x + 1 == e) as usize)
                    .sum::<usize>();
                assert_eq!(adj[p].len(), 2 * s.dim() - faces);
            }
        }
    }

    #[test]
    fn field_rejects_bad_length_and_zero_channels() {
        let s = GridShape::new(&[2, 2]).unwrap();
        assert!(GridField::<f64>::new(s.clone(), 2, vec![0.0; 7]).is_err());
        assert!(GridField::<f64>::new(s, 0, vec![]).is_err());
    }

    #[test]
    fn stats_of_constant_and_single_spike() {
        let s = GridShape::new(&[4, 5]).unwrap();
        let z = GridField::<f64>::zeros(s.clone(), 1);
        let st = field_stats(&z);
        assert_eq!((st.min, st.max, st.mean, st.finite_count), (0.0, 0.0, 0.0, 20));

        let mut spike = z.clone();
        spike.data_mut()[7] = 1.0;
        let st = field_stats(&spike);
        assert_eq!(st.mean, 1.0 / 20.0);
        assert_eq!(st.max, 1.0);
    }

    #[test]
    fn stats_match_naive_second_pass() {
        use crate::rng::Rng;
        let mut rng = Rng::seed(91);
        let s = GridShape::new(&[13, 17]).unwrap();
        let f = GridField::<f64>::from_fn(s, 3, |_, _| rng.uniform(-5.0, 5.0)).unwrap();
        let st = field_stats(&f);
        let naive_sum: f64 = f.data().iter().sum();
        let naive_min = f.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let naive_max = f.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!((st.mean - naive_sum / f.data().len() as f64).abs() < 1e-13);
        assert_eq!(st.min, naive_min);
        assert_eq!(st.max, naive_max);
    }

    proptest! {
        #[test]
        fn construction_rejects_injected_nan(
            w in 1usize..6, h in 1usize..6, c in 1usize..3, at in 0usize..1000, inf in any::<bool>()
        ) {
            let s = GridShape::new(&[w, h]).unwrap();
            let n = w * h * c;
            let mut data = vec![0.5f64; n];
            data[at % n] = if inf { f64::INFINITY } else { f64::NAN };
            prop_assert!(GridField::new(s, c, data).is_err());
        }

        #[test]
        fn index_and_coords_are_inverse(a in 1usize..7, b in 1usize..7, c in 1usize..7, seed in any::<usize>()) {
            let s = GridShape::new(&[a, b, c]).unwrap();
            let flat = seed % s.len();
            prop_assert_eq!(s.index(&s.coords(flat)).unwrap(), flat);
        }
    }
}
