//! Finite-difference verification of the reverse-mode gradients.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::backward;
use super::loss::{total_loss, LabelField};
use crate::config::UgcpConfig;
use crate::error::Result;
use crate::field::{GridField, GridShape};
use crate::heads::{init_params, UgcpParams};
use crate::metrics::BinaryMask;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub dims: Vec<usize>,
    pub steps: Vec<usize>,
    pub seed: u64,
    pub tolerance: f64,
    /// Relative perturbation; the step for entry `i` is `max(1, |θ_i|)·rel_step`.
    pub rel_step: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dims: vec![2, 3],
            steps: vec![0, 1, 2, 3],
            seed: 0,
            tolerance: 1e-5,
            rel_step: 1e-5,
            floor: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub dim: usize,
    pub steps: usize,
    pub gamma: bool,
    pub phi: bool,
    pub source: bool,
    pub worst_rel_error: f64,
    /// Tensor and index of the worst entry.
    pub worst_param: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub worst_rel_error: f64,
    pub passed: bool,
}

/// Relative error with the denominator bounded below by `floor`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Seeded problem instance for one grid: features, labels and perturbed-bias parameters.
pub fn gradcheck_problem(
    seed: u64,
    extents: &[usize],
    cfg: &UgcpConfig,
) -> Result<(GridField<f64>, LabelField, UgcpParams)> {
    let mut rng = Rng::seed(seed);
    let shape = GridShape::new(extents)?;
    let h = GridField::from_fn(shape.clone(), cfg.feature_channels, |_, _| rng.uniform(-1.0, 1.0))?;
    let bits = (0..shape.len()).map(|_| (rng.unit() < 0.4) as u8).collect();
    let y = BinaryMask::new(shape, bits)?;
    let mut params = init_params(seed ^ 0x9E37, cfg.feature_channels, cfg.edge_channels, cfg.classes)?;
    for v in params.logit_bias.iter_mut().chain(params.feature_bias.iter_mut()) {
        *v = rng.uniform(-0.5, 0.5);
    }
    Ok((h, y, params))
}

/// Compares every parameter gradient entry with central differences.
pub fn check_one(
    h: &GridField<f64>,
    y: &LabelField,
    params: &UgcpParams,
    cfg: &UgcpConfig,
    gc: &GradcheckConfig,
) -> Result<(f64, usize, f64, f64)> {
    let analytic = backward(h, y, params, cfg)?.params.to_flat();
    let base = params.to_flat();
    let numeric: Vec<f64> = (0..base.len())
        .into_par_iter()
        .map(|i| {
            let step = base[i].abs().max(1.0) * gc.rel_step;
            let eval = |delta: f64| -> Result<f64> {
                let mut flat = base.clone();
                flat[i] += delta;
                let mut p = params.clone();
                p.set_flat(&flat);
                Ok(total_loss(h, y, &p, cfg)?.total)
            };
            Ok((eval(step)? - eval(-step)?) / (2.0 * step))
        })
        .collect::<Result<_>>()?;
    let mut worst = (0.0, 0, 0.0, 0.0);
    for i in 0..base.len() {
        let e = relative_error(analytic[i], numeric[i], gc.floor);
        if e > worst.0 || i == 0 {
            worst = (e, i, analytic[i], numeric[i]);
        }
    }
    Ok(worst)
}

/// Sweeps dimension × steps × all eight ablation combinations on 6×6 / 4×4×4 grids.
pub fn gradcheck(gc: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut entries = Vec::new();
    for &dim in &gc.dims {
        let extents: Vec<usize> = if dim == 3 { vec![4, 4, 4] } else { vec![6, 6] };
        for &steps in &gc.steps {
            for flags in 0..8u8 {
                let (gamma, phi, source) = (flags & 1 != 0, flags & 2 != 0, flags & 4 != 0);
                let cfg = UgcpConfig {
                    steps,
                    ..UgcpConfig::defaults_for_dim(dim).with_ablation(gamma, phi, source)
                };
                let seed = gc.seed.wrapping_add((dim * 100 + steps * 10 + flags as usize) as u64);
                let (h, y, params) = gradcheck_problem(seed, &extents, &cfg)?;
                let (err, idx, analytic, numeric) = check_one(&h, &y, &params, &cfg, gc)?;
                let (name, at) = params.describe(idx);
                entries.push(GradcheckEntry {
                    dim,
                    steps,
                    gamma,
                    phi,
                    source,
                    worst_rel_error: err,
                    worst_param: format!("{name}[{at}]"),
                    analytic,
                    numeric,
                    passed: err <= gc.tolerance,
                });
            }
        }
    }
    let worst = entries.iter().map(|e| e.worst_rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        passed: entries.iter().all(|e| e.passed),
        worst_rel_error: worst,
        entries,
    })
}
