//! Overlapping-window refinement with logit blending.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::UgcpConfig;
use crate::error::{Error, Result};
use crate::evidence::{alpha_from_logits, expected_prob, uncertainty, UncertaintyField};
use crate::field::{GridField, GridShape, Real};
use crate::heads::UgcpParams;
use crate::propagation::refine_features;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub extents: Vec<usize>,
    pub patch: Vec<usize>,
    pub stride: Vec<usize>,
    /// Window origins in row-major order of the per-axis origin lists.
    pub origins: Vec<Vec<usize>>,
}

/// Origins along one axis: multiples of the stride, the last clamped to `extent − patch`.
pub fn axis_origins(extent: usize, patch: usize, stride: usize) -> Vec<usize> {
    let last = extent - patch;
    let mut out = Vec::new();
    let mut o = 0;
    loop {
        let v = o.min(last);
        if out.last() != Some(&v) {
            out.push(v);
        }
        if o + patch >= extent {
            break;
        }
        o += stride;
    }
    out
}

pub fn plan_windows(extents: &[usize], patch: &[usize], overlap: f64) -> Result<WindowPlan> {
    if extents.len() != patch.len() {
        return Err(Error::Config(format!(
            "patch {patch:?} and extents {extents:?} differ in dimension"
        )));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap must lie in [0, 1), got {overlap}")));
    }
    let mut stride = Vec::with_capacity(extents.len());
    let mut per_axis = Vec::with_capacity(extents.len());
    for (&e, &p) in extents.iter().zip(patch) {
        if p == 0 || p > e {
            return Err(Error::Config(format!("patch {patch:?} does not fit extents {extents:?}")));
        }
        let s = ((p as f64) * (1.0 - overlap)).floor() as usize;
        let s = s.max(1);
        stride.push(s);
        per_axis.push(axis_origins(e, p, s));
    }
    let mut origins = vec![Vec::new()];
    for axis in &per_axis {
        origins = origins
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&o| {
                    let mut v = prefix.clone();
                    v.push(o);
                    v
                })
            })
            .collect();
    }
    Ok(WindowPlan {
        extents: extents.to_vec(),
        patch: patch.to_vec(),
        stride,
        origins,
    })
}

impl WindowPlan {
    /// Number of windows covering each location.
    pub fn coverage(&self) -> Vec<u32> {
        let shape = GridShape::new(&self.extents).expect("validated extents");
        let mut cov = vec![0u32; shape.len()];
        for o in &self.origins {
            for_each_in_window(&shape, o, &self.patch, |_, p| cov[p] += 1);
        }
        cov
    }
}

/// Calls `f(local_index, global_index)` for every cell of the window.
fn for_each_in_window(shape: &GridShape, origin: &[usize], patch: &[usize], mut f: impl FnMut(usize, usize)) {
    let strides = shape.strides();
    let mut c = vec![0usize; patch.len()];
    let mut local = 0;
    loop {
        let global: usize = c.iter().zip(origin).zip(&strides).map(|((a, o), s)| (a + o) * s).sum();
        f(local, global);
        local += 1;
        let mut axis = patch.len();
        loop {
            if axis == 0 {
                return;
            }
            axis -= 1;
            c[axis] += 1;
            if c[axis] < patch[axis] {
                break;
            }
            c[axis] = 0;
        }
    }
}

/// Copies the window at `origin` out of `field`.
pub fn extract_window<T: Real>(field: &GridField<T>, origin: &[usize], patch: &[usize]) -> Result<GridField<T>> {
    let c = field.channels();
    let mut data = vec![T::zero(); patch.iter().product::<usize>() * c];
    for_each_in_window(field.shape(), origin, patch, |l, g| {
        data[l * c..(l + 1) * c].copy_from_slice(field.at(g));
    });
    let shape = GridShape::with_spacing(patch, field.shape().spacing())?;
    GridField::new(shape, c, data)
}

#[derive(Clone, Debug)]
pub struct SlidingOutput<T = f64> {
    /// Coverage-averaged final logits.
    pub logits: GridField<T>,
    pub probs: GridField<T>,
    pub uncertainty: UncertaintyField<T>,
    pub coverage: Vec<u32>,
}

impl<T: Real> SlidingOutput<T> {
    pub fn foreground(&self) -> GridField<T> {
        self.probs.channel(1).expect("at least two classes")
    }
}

/// Refines every window independently, averages the final logits over the
/// windows covering each location (window index order), then maps the blend
/// to probabilities once.
pub fn sliding_refine<T: Real>(
    h: &GridField<T>,
    params: &UgcpParams,
    cfg: &UgcpConfig,
    patch: &[usize],
    overlap: f64,
) -> Result<SlidingOutput<T>> {
    let plan = plan_windows(h.shape().extents(), patch, overlap)?;
    let windows: Vec<GridField<T>> = plan
        .origins
        .par_iter()
        .map(|o| {
            let sub = extract_window(h, o, patch)?;
            Ok(refine_features(&sub, params, cfg)?.logits)
        })
        .collect::<Result<_>>()?;
    let k = cfg.classes;
    let mut acc = vec![T::zero(); h.locations() * k];
    let mut cov = vec![0u32; h.locations()];
    for (o, w) in plan.origins.iter().zip(&windows) {
        for_each_in_window(h.shape(), o, patch, |l, g| {
            for (a, &v) in acc[g * k..(g + 1) * k].iter_mut().zip(w.at(l)) {
                *a = *a + v;
            }
            cov[g] += 1;
        });
    }
    for (p, &c) in cov.iter().enumerate() {
        let n = T::lit(c as f64);
        for a in &mut acc[p * k..(p + 1) * k] {
            *a = *a / n;
        }
    }
    let logits = GridField::new(h.shape().clone(), k, acc)?;
    let alpha = alpha_from_logits(&logits)?;
    let eps = T::lit(cfg.eps);
    Ok(SlidingOutput {
        probs: expected_prob(&alpha, eps),
        uncertainty: uncertainty(&alpha, eps),
        logits,
        coverage: cov,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::heads::init_params;
    use crate::rng::Rng;

    #[test]
    fn origin_examples() {
        assert_eq!(plan_windows(&[128], &[96], 0.5).unwrap().origins, vec![vec![0], vec![32]]);
        assert_eq!(plan_windows(&[128], &[96], 0.5).unwrap().stride, vec![48]);
        assert_eq!(plan_windows(&[96], &[96], 0.5).unwrap().origins, vec![vec![0]]);
        assert_eq!(
            plan_windows(&[192], &[96], 0.5).unwrap().origins,
            vec![vec![0], vec![48], vec![96]]
        );
        assert!(matches!(plan_windows(&[64], &[96], 0.5), Err(Error::Config(_))));
    }

    #[test]
    fn plans_cover_every_location() {
        for patch in [3usize, 4, 7] {
            for e in patch..=3 * patch {
                for overlap in [0.0, 0.25, 0.5, 0.75] {
                    let plan = plan_windows(&[e, patch + 1], &[patch, patch], overlap).unwrap();
                    assert!(plan.coverage().iter().all(|&c| c >= 1), "e={e} patch={patch} overlap={overlap}");
                    for o in &plan.origins {
                        assert!(o[0] + patch <= e);
                    }
                }
            }
        }
    }

    #[test]
    fn single_window_is_plain_refine() {
        let cfg = UgcpConfig::defaults_2d();
        let mut rng = Rng::seed(3);
        let h = GridField::from_fn(GridShape::new(&[12, 10]).unwrap(), 4, |_, _| rng.uniform(-1.0, 1.0)).unwrap();
        let params = init_params(4, 4, 8, 2).unwrap();
        let whole = refine_features(&h, &params, &cfg).unwrap();
        let win = sliding_refine(&h, &params, &cfg, &[12, 10], 0.5).unwrap();
        assert_eq!(win.probs, whole.probs);
        assert_eq!(win.logits, whole.logits);
    }

    #[test]
    fn uniform_field_blends_to_single_window_output() {
        let cfg = UgcpConfig::defaults_2d();
        let shape = GridShape::new(&[8, 32]).unwrap();
        let h = GridField::from_fn(shape, 4, |_, c| 0.2 * c as f64 - 0.3).unwrap();
        let params = init_params(5, 4, 8, 2).unwrap();
        let out = sliding_refine(&h, &params, &cfg, &[8, 16], 0.5).unwrap();
        let single = refine_features(&extract_window(&h, &[0, 0], &[8, 16]).unwrap(), &params, &cfg).unwrap();
        // columns 10..14 are shared by the windows at 0 and 8 and lie at least
        // T cells away from both windows' edges
        for y in 0..8 {
            for x in 10..14 {
                for k in 0..2 {
                    let a = out.probs.get(y * 32 + x, k);
                    let b = single.probs.get(y * 16 + x, k);
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
        assert!(out.coverage.iter().all(|&c| c >= 1));
    }
}
