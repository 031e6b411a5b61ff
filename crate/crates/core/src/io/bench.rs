//! Wall-clock timing of the refinement for a list of shapes and thread counts.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::UgcpConfig;
use crate::error::{Error, Result};
use crate::field::{GridField, GridShape};
use crate::heads::init_params;
use crate::metrics::median;
use crate::propagation::refine_features;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub shapes: Vec<Vec<usize>>,
    pub steps: Vec<usize>,
    pub repetitions: usize,
    pub threads: Vec<usize>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            shapes: vec![vec![128, 128], vec![128, 256], vec![256, 256], vec![256, 512]],
            steps: vec![0, 2],
            repetitions: 7,
            threads: vec![1],
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub shape: Vec<usize>,
    pub locations: usize,
    pub steps: usize,
    pub threads: usize,
    pub median_secs: f64,
    pub times: Vec<f64>,
}

/// `time(larger) / time(smaller)` for consecutive shapes at fixed steps and threads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearityRatio {
    pub steps: usize,
    pub threads: usize,
    pub from_locations: usize,
    pub to_locations: usize,
    pub size_ratio: f64,
    pub time_ratio: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: Vec<BenchEntry>,
    pub linearity: Vec<LinearityRatio>,
}

/// Median wall time of `reps` refine calls after one warm-up call.
pub fn time_refine(shape: &[usize], cfg: &UgcpConfig, reps: usize, seed: u64) -> Result<Vec<f64>> {
    let mut rng = Rng::seed(seed);
    let grid = GridShape::new(shape)?;
    let h = GridField::from_fn(grid, cfg.feature_channels, |_, _| rng.uniform(-1.0, 1.0))?;
    let params = init_params(seed, cfg.feature_channels, cfg.edge_channels, cfg.classes)?;
    refine_features(&h, &params, cfg)?;
    (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            let out = refine_features(&h, &params, cfg)?;
            let dt = t.elapsed().as_secs_f64();
            std::hint::black_box(out);
            Ok(dt)
        })
        .collect()
}

pub fn bench(bc: &BenchConfig, base: &UgcpConfig) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &threads in &bc.threads {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("cannot build a {threads}-thread pool: {e}")))?;
        for &steps in &bc.steps {
            let cfg = UgcpConfig { steps, ..base.clone() };
            let mut row = Vec::new();
            for shape in &bc.shapes {
                let times = pool.install(|| time_refine(shape, &cfg, bc.repetitions, bc.seed))?;
                let entry = BenchEntry {
                    shape: shape.clone(),
                    locations: shape.iter().product(),
                    steps,
                    threads,
                    median_secs: median(&times),
                    times,
                };
                row.push(entry);
            }
            for pair in row.windows(2) {
                report.linearity.push(LinearityRatio {
                    steps,
                    threads,
                    from_locations: pair[0].locations,
                    to_locations: pair[1].locations,
                    size_ratio: pair[1].locations as f64 / pair[0].locations as f64,
                    time_ratio: pair[1].median_secs / pair[0].median_secs,
                });
            }
            report.entries.extend(row);
        }
    }
    Ok(report)
}
