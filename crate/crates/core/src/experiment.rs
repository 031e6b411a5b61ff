//! Phantom protocol: train per mode on seeded phantoms, compare on held-out cases.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::UgcpConfig;
use crate::error::{Error, Result};
use crate::heads::UgcpParams;
use crate::metrics::{evaluate, median, summarize, threshold_probs, MetricReport, MetricSummary};
use crate::phantom::{make_dataset, PhantomConfig, PhantomSample};
use crate::propagation::refine_features;
use crate::training::{train, LossBreakdown, TrainConfig, TrainMode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub phantom: PhantomConfig,
    pub n_train: usize,
    pub n_test: usize,
    /// Held-out seeds start at `phantom.seed + test_seed_offset`.
    pub test_seed_offset: u64,
    pub ugcp: UgcpConfig,
    pub train: TrainConfig,
    /// Also train the four ablation rows.
    pub ablation: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            // gaps the two-step operator can reach from both ends
            phantom: PhantomConfig { gap_length: 4.0, ..PhantomConfig::defaults_2d() },
            n_train: 32,
            n_test: 20,
            test_seed_offset: 100_000,
            ugcp: UgcpConfig::defaults_2d(),
            train: TrainConfig {
                epochs: 300,
                lr: 0.03,
                batch_size: 8,
                ..TrainConfig::default()
            },
            ablation: true,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.ugcp.validate()?;
        self.train.validate()?;
        if self.n_train == 0 || self.n_test == 0 {
            return Err(Error::Config("n_train and n_test must be >= 1".into()));
        }
        if self.test_seed_offset < self.n_train as u64 {
            return Err(Error::Config(format!(
                "test_seed_offset {} overlaps the {} training seeds",
                self.test_seed_offset, self.n_train
            )));
        }
        Ok(())
    }

    pub fn datasets(&self) -> Result<(Vec<PhantomSample>, Vec<PhantomSample>)> {
        let train = make_dataset(self.n_train, &self.phantom)?;
        let test_cfg = PhantomConfig {
            seed: self.phantom.seed.wrapping_add(self.test_seed_offset),
            ..self.phantom.clone()
        };
        let test = make_dataset(self.n_test, &test_cfg)?;
        Ok((train, test))
    }
}

/// Trained model of one mode plus its held-out scores.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModeResult {
    pub label: String,
    pub config: UgcpConfig,
    pub params: UgcpParams,
    pub final_loss: LossBreakdown,
    pub reports: Vec<MetricReport>,
    pub summary: MetricSummary,
    pub median_dsc: f64,
    pub median_cldice: f64,
    /// Undefined cases count as `+∞`.
    pub median_hd95: f64,
    pub median_component_error: f64,
}

/// Scores `params` on each sample; thresholded foreground vs ground truth.
pub fn evaluate_model(samples: &[PhantomSample], params: &UgcpParams, cfg: &UgcpConfig) -> Result<Vec<MetricReport>> {
    samples
        .par_iter()
        .map(|s| {
            let out = refine_features(&s.h, params, cfg)?;
            let pred = threshold_probs(&out.foreground())?;
            evaluate(format!("seed{}", s.seed), &pred, &s.gt)
        })
        .collect()
}

fn hd_or_inf(r: &MetricReport) -> f64 {
    r.hd95.unwrap_or(f64::INFINITY)
}

pub fn run_mode(
    label: impl Into<String>,
    train_set: &[PhantomSample],
    test_set: &[PhantomSample],
    cfg: &UgcpConfig,
    opt: &TrainConfig,
) -> Result<ModeResult> {
    let outcome = train(train_set, cfg, opt)?;
    let reports = evaluate_model(test_set, &outcome.params, cfg)?;
    let col = |f: &dyn Fn(&MetricReport) -> f64| reports.iter().map(f).collect::<Vec<_>>();
    Ok(ModeResult {
        label: label.into(),
        config: cfg.clone(),
        final_loss: outcome.curve.last().copied().unwrap_or_default(),
        params: outcome.params,
        summary: summarize(&reports),
        median_dsc: median(&col(&|r| r.dsc)),
        median_cldice: median(&col(&|r| r.cldice)),
        median_hd95: median(&col(&hd_or_inf)),
        median_component_error: median(&col(&|r| r.component_error() as f64)),
        reports,
    })
}

/// Per-case differences `refined − baseline`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairedDeltas {
    pub cldice: Vec<f64>,
    /// `0` when both are undefined; `±∞` when only one is.
    pub hd95: Vec<f64>,
    /// Change in `|components(pred) − components(gt)|`.
    pub component_error: Vec<f64>,
    pub median_cldice: f64,
    pub median_hd95: f64,
    pub median_component_error: f64,
}

pub fn paired_deltas(refined: &[MetricReport], baseline: &[MetricReport]) -> Result<PairedDeltas> {
    if refined.len() != baseline.len() || refined.iter().zip(baseline).any(|(a, b)| a.id != b.id) {
        return Err(Error::Domain("paired reports must cover the same cases in the same order".into()));
    }
    let mut d = PairedDeltas::default();
    for (a, b) in refined.iter().zip(baseline) {
        d.cldice.push(a.cldice - b.cldice);
        d.hd95.push(match (a.hd95, b.hd95) {
            (Some(x), Some(y)) => x - y,
            (None, None) => 0.0,
            (None, Some(_)) => f64::INFINITY,
            (Some(_), None) => f64::NEG_INFINITY,
        });
        d.component_error.push(a.component_error() as f64 - b.component_error() as f64);
    }
    d.median_cldice = median(&d.cldice);
    d.median_hd95 = median(&d.hd95);
    d.median_component_error = median(&d.component_error);
    Ok(d)
}

/// `(γ, φ, R)` rows of the component analysis, from none to all.
pub const ABLATION_ROWS: [(bool, bool, bool); 4] = [
    (false, false, false),
    (true, false, false),
    (true, true, false),
    (true, true, true),
];

pub fn ablation_label(gamma: bool, phi: bool, source: bool) -> String {
    let mark = |b: bool, n: &str| if b { n.to_string() } else { "-".to_string() };
    format!("{}{}{}", mark(gamma, "g"), mark(phi, "p"), mark(source, "r"))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub baseline: ModeResult,
    pub refined: ModeResult,
    pub deltas: PairedDeltas,
    /// Ablation rows in [`ABLATION_ROWS`] order; the last is `refined`.
    pub ablation: Vec<ModeResult>,
}

impl ExperimentReport {
    /// Markdown-ish table of the ablation rows.
    pub fn ablation_table(&self) -> String {
        let mut out = String::from("gamma phi source | dsc    cldice hd95    comp_err\n");
        for (row, m) in ABLATION_ROWS.iter().zip(&self.ablation) {
            let mark = |b: bool| if b { "x" } else { "-" };
            out.push_str(&format!(
                "{:>5} {:>3} {:>6} | {:.4} {:.4} {:7.3} {:.1}\n",
                mark(row.0),
                mark(row.1),
                mark(row.2),
                m.median_dsc,
                m.median_cldice,
                m.median_hd95,
                m.median_component_error
            ));
        }
        out
    }
}

/// Trains the `T = 0` baseline and the `T = cfg.ugcp.steps` model with the
/// same loss, then the ablation rows when requested.
pub fn run_experiment(ec: &ExperimentConfig) -> Result<ExperimentReport> {
    ec.validate()?;
    let (train_set, test_set) = ec.datasets()?;
    let base_cfg = UgcpConfig { steps: 0, ..ec.ugcp.clone() };
    let baseline = run_mode("T0", &train_set, &test_set, &base_cfg, &ec.train)?;
    let refined = run_mode(format!("T{}", ec.ugcp.steps), &train_set, &test_set, &ec.ugcp, &ec.train)?;
    let deltas = paired_deltas(&refined.reports, &baseline.reports)?;
    let mut ablation = Vec::new();
    if ec.ablation {
        for &(g, p, r) in &ABLATION_ROWS {
            let cfg = ec.ugcp.with_ablation(g, p, r);
            if cfg == ec.ugcp {
                ablation.push(ModeResult { label: ablation_label(g, p, r), ..refined.clone() });
            } else {
                ablation.push(run_mode(ablation_label(g, p, r), &train_set, &test_set, &cfg, &ec.train)?);
            }
        }
    }
    Ok(ExperimentReport { baseline, refined, deltas, ablation })
}

/// The {base, UGCP loss} × {T = 0, T = steps} matrix.
pub fn run_loss_matrix(ec: &ExperimentConfig) -> Result<Vec<ModeResult>> {
    ec.validate()?;
    let (train_set, test_set) = ec.datasets()?;
    TrainMode::matrix(ec.ugcp.steps)
        .iter()
        .map(|m| run_mode(m.label(), &train_set, &test_set, &m.apply(&ec.ugcp), &ec.train))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(id: &str, cldice: f64, hd: Option<f64>, pred: usize, gt: usize) -> MetricReport {
        MetricReport {
            id: id.into(),
            dsc: 0.5,
            cldice,
            hd95: hd,
            components_pred: pred,
            components_gt: gt,
        }
    }

    #[test]
    fn deltas_pair_by_case() {
        let a = [report("a", 0.9, Some(2.0), 1, 1), report("b", 0.7, None, 3, 1)];
        let b = [report("a", 0.8, Some(3.0), 2, 1), report("b", 0.7, Some(1.0), 1, 1)];
        let d = paired_deltas(&a, &b).unwrap();
        assert!((d.cldice[0] - 0.1).abs() < 1e-12);
        assert_eq!(d.hd95, vec![-1.0, f64::INFINITY]);
        assert_eq!(d.component_error, vec![-1.0, 2.0]);
        let c = [report("x", 0.9, None, 1, 1), report("b", 0.7, None, 1, 1)];
        assert!(paired_deltas(&a, &c).is_err());
    }

    #[test]
    fn labels() {
        assert_eq!(ablation_label(true, false, true), "g-r");
        assert_eq!(ablation_label(false, false, false), "---");
    }

    #[test]
    fn tiny_protocol_runs() {
        let ec = ExperimentConfig {
            phantom: PhantomConfig { extents: vec![16, 16], ..PhantomConfig::defaults_2d() },
            n_train: 3,
            n_test: 2,
            train: TrainConfig { epochs: 2, ..TrainConfig::default() },
            ..ExperimentConfig::default()
        };
        let r = run_experiment(&ec).unwrap();
        assert_eq!(r.ablation.len(), 4);
        assert_eq!(r.deltas.cldice.len(), 2);
        assert_eq!(r.ablation[3].params, r.refined.params);
        assert_eq!(r.ablation_table().lines().count(), 5);
        assert_eq!(run_loss_matrix(&ExperimentConfig { ablation: false, ..ec }).unwrap().len(), 4);
    }
}
