//! Synthetic vessel trees with controlled degradations, and the feature
//! fields that stand in for a backbone's output.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridField, GridShape};
use crate::metrics::BinaryMask;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub extents: Vec<usize>,
    /// Side branches added to the trunk.
    pub n_branches: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    /// Maximum branch angle relative to the parent, radians.
    pub angle_spread: f64,
    pub gap_count: usize,
    /// Gap length along the vessel axis, cells.
    pub gap_length: f64,
    pub noise_sigma: f64,
    pub contrast: f64,
    /// Box blur radius applied to the ground truth before noise.
    pub blur_radius: usize,
    /// Box blur radius of the smoothed feature channel.
    pub feature_blur_radius: usize,
    pub feature_channels: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::defaults_2d()
    }
}

impl PhantomConfig {
    pub fn defaults_2d() -> Self {
        Self {
            extents: vec![64, 64],
            n_branches: 5,
            radius_min: 1.0,
            radius_max: 4.0,
            angle_spread: 1.2,
            gap_count: 2,
            gap_length: 8.0,
            noise_sigma: 0.15,
            contrast: 0.8,
            blur_radius: 1,
            feature_blur_radius: 2,
            feature_channels: 4,
            seed: 0,
        }
    }

    pub fn defaults_3d() -> Self {
        Self {
            extents: vec![48, 48, 48],
            radius_max: 3.0,
            gap_length: 6.0,
            ..Self::defaults_2d()
        }
    }

    pub fn dim(&self) -> usize {
        self.extents.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=3).contains(&self.extents.len()) {
            return fail(format!("phantoms are 2D or 3D, got extents {:?}", self.extents));
        }
        let need = (2.0 * self.radius_max + 4.0).ceil() as usize;
        if self.extents.iter().any(|&e| e < need.max(8)) {
            return fail(format!(
                "extents {:?} too small for radius {} (need at least {})",
                self.extents,
                self.radius_max,
                need.max(8)
            ));
        }
        if !(self.radius_min >= 1.0 && self.radius_max >= self.radius_min) {
            return fail(format!(
                "radius range [{}, {}] must satisfy 1 <= min <= max",
                self.radius_min, self.radius_max
            ));
        }
        if self.gap_count > 0 && self.gap_length < 1.0 {
            return fail(format!("gap_length must be >= 1, got {}", self.gap_length));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        if !(self.contrast > 0.0 && self.contrast <= 1.0) {
            return fail(format!("contrast must lie in (0, 1], got {}", self.contrast));
        }
        if self.feature_channels < 2 {
            return fail(format!("need at least 2 feature channels, got {}", self.feature_channels));
        }
        if !(self.angle_spread >= 0.0 && self.angle_spread.is_finite()) {
            return fail("angle_spread must be finite and >= 0".into());
        }
        Ok(())
    }
}

/// Straight tube between two points, in cell coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub start: Vec<f64>,
    pub end: Vec<f64>,
    pub radius: f64,
}

impl Segment {
    fn length(&self) -> f64 {
        dist(&self.start, &self.end)
    }

    fn direction(&self) -> Vec<f64> {
        let l = self.length().max(1e-12);
        self.start.iter().zip(&self.end).map(|(a, b)| (b - a) / l).collect()
    }

    fn point_at(&self, t: f64) -> Vec<f64> {
        self.start.iter().zip(&self.end).map(|(a, b)| a + t * (b - a)).collect()
    }

    /// Axial coordinate (cells from `start`) and distance from the axis line.
    fn project(&self, x: &[f64]) -> (f64, f64) {
        let d = self.direction();
        let rel: Vec<f64> = x.iter().zip(&self.start).map(|(a, b)| a - b).collect();
        let along: f64 = rel.iter().zip(&d).map(|(a, b)| a * b).sum();
        let perp2: f64 = rel.iter().map(|v| v * v).sum::<f64>() - along * along;
        (along, perp2.max(0.0).sqrt())
    }

    /// Distance from `x` to the closed segment.
    fn distance(&self, x: &[f64]) -> f64 {
        let len = self.length();
        let (along, perp) = self.project(x);
        if along < 0.0 {
            dist(x, &self.start)
        } else if along > len {
            dist(x, &self.end)
        } else {
            perp
        }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Ground-truth tree before any degradation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tree {
    pub gt: BinaryMask,
    pub centerline: BinaryMask,
    pub segments: Vec<Segment>,
}

/// Unit vector at angle `a` from `d`, turned towards a random perpendicular direction.
fn turn(d: &[f64], a: f64, rng: &mut Rng) -> Vec<f64> {
    let perp: Vec<f64> = if d.len() == 2 {
        let s = if rng.unit() < 0.5 { -1.0 } else { 1.0 };
        vec![-d[1] * s, d[0] * s]
    } else {
        loop {
            let v: Vec<f64> = (0..3).map(|_| rng.normal()).collect();
            let along: f64 = v.iter().zip(d).map(|(a, b)| a * b).sum();
            let p: Vec<f64> = v.iter().zip(d).map(|(a, b)| a - along * b).collect();
            let n = p.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 1e-6 {
                break p.into_iter().map(|x| x / n).collect();
            }
        }
    };
    d.iter().zip(&perp).map(|(x, p)| a.cos() * x + a.sin() * p).collect()
}

/// Shortens `start + len·dir` so the end stays inside `[margin, e − 1 − margin]` on every axis.
fn clip_end(start: &[f64], dir: &[f64], len: f64, extents: &[usize], margin: f64) -> Vec<f64> {
    let mut t = len;
    for a in 0..start.len() {
        let hi = extents[a] as f64 - 1.0 - margin;
        if dir[a] > 1e-12 {
            t = t.min((hi - start[a]) / dir[a]);
        } else if dir[a] < -1e-12 {
            t = t.min((margin - start[a]) / dir[a]);
        }
    }
    let t = t.max(0.0);
    start.iter().zip(dir).map(|(s, d)| s + t * d).collect()
}

fn rasterize(shape: &GridShape, segments: &[Segment]) -> (BinaryMask, BinaryMask) {
    let ext = shape.extents();
    let strides = shape.strides();
    let mut gt = BinaryMask::empty(shape.clone());
    let mut centerline = BinaryMask::empty(shape.clone());
    for seg in segments {
        let lo: Vec<usize> = (0..ext.len())
            .map(|a| (seg.start[a].min(seg.end[a]) - seg.radius).floor().max(0.0) as usize)
            .collect();
        let hi: Vec<usize> = (0..ext.len())
            .map(|a| ((seg.start[a].max(seg.end[a]) + seg.radius).ceil() as usize).min(ext[a] - 1))
            .collect();
        let mut c = lo.clone();
        'cells: loop {
            let x: Vec<f64> = c.iter().map(|&v| v as f64).collect();
            if seg.distance(&x) <= seg.radius {
                gt.set(c.iter().zip(&strides).map(|(a, b)| a * b).sum(), true);
            }
            let mut axis = c.len();
            loop {
                if axis == 0 {
                    break 'cells;
                }
                axis -= 1;
                if c[axis] < hi[axis] {
                    c[axis] += 1;
                    break;
                }
                c[axis] = lo[axis];
            }
        }
        let n = (seg.length() * 4.0).ceil() as usize;
        for i in 0..=n {
            let p = seg.point_at(i as f64 / n.max(1) as f64);
            let flat: usize = p
                .iter()
                .zip(&strides)
                .zip(ext)
                .map(|((v, s), &e)| (v.round().max(0.0) as usize).min(e - 1) * s)
                .sum();
            centerline.set(flat, true);
        }
    }
    (gt, centerline)
}

/// Random branching tree of tubes; deterministic in `cfg.seed`.
pub fn generate_tree(cfg: &PhantomConfig) -> Result<Tree> {
    cfg.validate()?;
    let mut rng = Rng::seed(cfg.seed);
    let dim = cfg.dim();
    let ext = &cfg.extents;
    let shape = GridShape::new(ext)?;
    let main = dim - 1;

    let r0 = rng.uniform(cfg.radius_min.max(0.5 * (cfg.radius_min + cfg.radius_max)), cfg.radius_max);
    let margin0 = r0 + 1.0;
    let mut start = vec![0.0; dim];
    for a in 0..dim {
        start[a] = if a == main {
            margin0
        } else {
            rng.uniform(0.3, 0.7) * (ext[a] - 1) as f64
        };
    }
    let mut axis = vec![0.0; dim];
    axis[main] = 1.0;
    let dir0 = turn(&axis, rng.uniform(-0.5, 0.5) * cfg.angle_spread, &mut rng);
    let len0 = rng.uniform(0.6, 0.9) * ext[main] as f64;
    let mut segments = vec![Segment {
        end: clip_end(&start, &dir0, len0, ext, margin0),
        start,
        radius: r0,
    }];

    let min_ext = *ext.iter().min().unwrap() as f64;
    for _ in 0..cfg.n_branches {
        let parent = segments[rng.int_in(0, segments.len() - 1)].clone();
        let from = parent.point_at(rng.uniform(0.2, 0.8));
        let angle = rng.uniform(0.4, 1.0) * cfg.angle_spread;
        let dir = turn(&parent.direction(), angle, &mut rng);
        let radius = rng.uniform(cfg.radius_min, parent.radius.min(cfg.radius_max));
        let len = rng.uniform(0.25, 0.5) * min_ext;
        let end = clip_end(&from, &dir, len, ext, radius + 1.0);
        segments.push(Segment { start: from, end, radius });
    }

    let (gt, centerline) = rasterize(&shape, &segments);
    Ok(Tree { gt, centerline, segments })
}

/// Separable box blur with in-domain normalisation; channel count 1.
pub fn box_blur(values: &[f64], shape: &GridShape, radius: usize) -> Vec<f64> {
    if radius == 0 {
        return values.to_vec();
    }
    let ext = shape.extents();
    let strides = shape.strides();
    let mut cur = values.to_vec();
    for a in 0..ext.len() {
        let n = ext[a];
        let stride = strides[a];
        let mut next = vec![0.0; cur.len()];
        for p in 0..cur.len() {
            let i = (p / stride) % n;
            let lo = i.saturating_sub(radius);
            let hi = (i + radius).min(n - 1);
            let base = p - i * stride;
            let mut acc = 0.0;
            for j in lo..=hi {
                acc += cur[base + j * stride];
            }
            next[p] = acc / (hi - lo + 1) as f64;
        }
        cur = next;
    }
    cur
}

/// Degraded soft observation of a tree: blur, contrast, noise, then gaps.
pub fn corrupt(tree: &Tree, cfg: &PhantomConfig) -> Result<GridField<f64>> {
    cfg.validate()?;
    let shape = tree.gt.shape().clone();
    let mut rng = Rng::seed(cfg.seed ^ 0xC0_22_0B7);
    let gt: Vec<f64> = tree.gt.bits().iter().map(|&b| b as f64).collect();
    let mut obs: Vec<f64> = box_blur(&gt, &shape, cfg.blur_radius)
        .into_iter()
        .map(|v| cfg.contrast * v)
        .collect();
    if cfg.noise_sigma > 0.0 {
        for v in obs.iter_mut() {
            *v += cfg.noise_sigma * rng.normal();
        }
    }
    let segs = &tree.segments;
    for _ in 0..cfg.gap_count {
        let candidates: Vec<usize> = (0..segs.len())
            .filter(|&i| segs[i].length() >= cfg.gap_length + 2.0 * segs[i].radius + 2.0)
            .collect();
        if candidates.is_empty() {
            break;
        }
        // prefer gap positions away from every other tube
        let mut chosen = None;
        for _attempt in 0..24 {
            let i = candidates[rng.int_in(0, candidates.len() - 1)];
            let s = &segs[i];
            let lo = s.radius + 1.0;
            let hi = s.length() - cfg.gap_length - s.radius - 1.0;
            let a = rng.uniform(lo, hi.max(lo));
            let mid = s.point_at((a + 0.5 * cfg.gap_length) / s.length());
            let clear = segs.iter().enumerate().all(|(j, o)| {
                j == i || o.distance(&mid) > o.radius + s.radius + 0.5 * cfg.gap_length + 2.0
            });
            chosen = Some((i, a));
            if clear {
                break;
            }
        }
        let (i, a) = chosen.expect("at least one attempt");
        let s = &segs[i];
        let reach = s.radius + cfg.blur_radius as f64 + 1.5;
        for (p, v) in obs.iter_mut().enumerate() {
            let x: Vec<f64> = shape.coords(p).iter().map(|&c| c as f64).collect();
            let (along, perp) = s.project(&x);
            if along >= a && along < a + cfg.gap_length && perp <= reach {
                *v = 0.0;
            }
        }
    }
    for v in obs.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    GridField::new(shape, 1, obs)
}

/// Central-difference gradient magnitude with replicated borders.
pub fn gradient_magnitude(values: &[f64], shape: &GridShape) -> Vec<f64> {
    let ext = shape.extents();
    let strides = shape.strides();
    (0..values.len())
        .map(|p| {
            let mut acc = 0.0;
            for a in 0..ext.len() {
                let i = (p / strides[a]) % ext[a];
                let base = p - i * strides[a];
                let up = values[base + (i + 1).min(ext[a] - 1) * strides[a]];
                let down = values[base + i.saturating_sub(1) * strides[a]];
                let g = 0.5 * (up - down);
                acc += g * g;
            }
            acc.sqrt()
        })
        .collect()
}

/// Feature field `h`: observation, blurred observation, gradient magnitude,
/// constant one; extra channels are progressively wider blurs.
pub fn synth_features(observation: &GridField<f64>, cfg: &PhantomConfig) -> Result<GridField<f64>> {
    if observation.channels() != 1 {
        return Err(Error::Domain("observation must have one channel".into()));
    }
    if cfg.feature_channels < 2 {
        return Err(Error::Config(format!(
            "need at least 2 feature channels, got {}",
            cfg.feature_channels
        )));
    }
    let shape = observation.shape();
    let obs = observation.data();
    let r = cfg.feature_blur_radius;
    let mut channels: Vec<Vec<f64>> = vec![
        obs.to_vec(),
        box_blur(obs, shape, r),
        gradient_magnitude(obs, shape),
        vec![1.0; obs.len()],
    ];
    let mut k = 2;
    while channels.len() < cfg.feature_channels {
        channels.push(box_blur(obs, shape, r.max(1) * k));
        k += 1;
    }
    channels.truncate(cfg.feature_channels);
    let c = channels.len();
    GridField::from_fn(shape.clone(), c, |p, ch| channels[ch][p])
}

/// One generated case.
#[derive(Clone, Debug, PartialEq)]
pub struct PhantomSample {
    pub gt: BinaryMask,
    pub centerline: BinaryMask,
    pub observation: GridField<f64>,
    pub h: GridField<f64>,
    pub seed: u64,
}

pub fn make_sample(cfg: &PhantomConfig) -> Result<PhantomSample> {
    let tree = generate_tree(cfg)?;
    let observation = corrupt(&tree, cfg)?;
    let h = synth_features(&observation, cfg)?;
    Ok(PhantomSample {
        gt: tree.gt,
        centerline: tree.centerline,
        observation,
        h,
        seed: cfg.seed,
    })
}

/// `n` samples with seeds `cfg.seed + i`, generated in parallel.
pub fn make_dataset(n: usize, cfg: &PhantomConfig) -> Result<Vec<PhantomSample>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    (0..n as u64)
        .into_par_iter()
        .map(|i| {
            make_sample(&PhantomConfig {
                seed: cfg.seed.wrapping_add(i),
                ..cfg.clone()
            })
        })
        .collect()
}
