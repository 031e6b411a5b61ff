//! Adam training loop over phantom samples.

use serde::{Deserialize, Serialize};

use super::backward::{batch_loss_and_grad, GradientSet};
use super::loss::{LabelField, LossBreakdown};
use crate::config::UgcpConfig;
use crate::error::{Error, Result};
use crate::field::GridField;
use crate::heads::{init_params, UgcpParams};
use crate::phantom::PhantomSample;
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// L2 penalty added to the gradient before the moment updates.
    pub weight_decay: f64,
    /// Samples per update; `0` means full batch.
    pub batch_size: usize,
    /// Cosine decay of the learning rate to zero over `epochs`.
    pub cosine: bool,
    /// Seeds parameter initialisation and the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            batch_size: 4,
            cosine: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.adam_eps > 0.0
            && self.weight_decay >= 0.0;
        if !ok {
            return Err(Error::Config(format!("invalid optimiser settings: {self:?}")));
        }
        Ok(())
    }

    fn lr_at(&self, epoch: usize) -> f64 {
        if self.cosine && self.epochs > 0 {
            let t = epoch as f64 / self.epochs as f64;
            0.5 * self.lr * (1.0 + (std::f64::consts::PI * t).cos())
        } else {
            self.lr
        }
    }
}

/// Adam with coupled L2 weight decay.
#[derive(Clone, Debug)]
pub struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i] + cfg.weight_decay * params[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: UgcpParams,
    /// Mean training loss per epoch, measured before each update.
    pub curve: Vec<LossBreakdown>,
}

/// Trains from seeded Glorot initialisation.
pub fn train(dataset: &[PhantomSample], cfg: &UgcpConfig, opt: &TrainConfig) -> Result<TrainOutcome> {
    let init = init_params(opt.seed, cfg.feature_channels, cfg.edge_channels, cfg.classes)?;
    train_from(init, dataset, cfg, opt)
}

/// Trains starting from the given parameters.
pub fn train_from(
    params: UgcpParams,
    dataset: &[PhantomSample],
    cfg: &UgcpConfig,
    opt: &TrainConfig,
) -> Result<TrainOutcome> {
    let pairs: Vec<(&GridField<f64>, &LabelField)> = dataset.iter().map(|s| (&s.h, &s.gt)).collect();
    train_pairs(params, &pairs, cfg, opt)
}

pub fn train_pairs(
    mut params: UgcpParams,
    data: &[(&GridField<f64>, &LabelField)],
    cfg: &UgcpConfig,
    opt: &TrainConfig,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    cfg.validate()?;
    opt.validate()?;
    params.check_shapes()?;
    let mut adam = Adam::new(params.len());
    let mut rng = Rng::seed(opt.seed ^ 0x5EED_0F_5A4D_u64);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let batch = if opt.batch_size == 0 { data.len() } else { opt.batch_size.min(data.len()) };
    let mut curve = Vec::with_capacity(opt.epochs);
    for epoch in 0..opt.epochs {
        rng.shuffle(&mut order);
        let lr = opt.lr_at(epoch);
        let mut epoch_losses = Vec::new();
        for chunk in order.chunks(batch) {
            let items: Vec<_> = chunk.iter().map(|&i| data[i]).collect();
            let (loss, grad): (LossBreakdown, GradientSet) = batch_loss_and_grad(&items, &params, cfg)
                .map_err(|e| Error::Training { epoch, reason: e.to_string() })?;
            if !loss.total.is_finite() {
                return Err(Error::Training { epoch, reason: format!("loss diverged to {}", loss.total) });
            }
            let mut flat = params.to_flat();
            adam.step(&mut flat, &grad.params.to_flat(), lr, opt);
            params.set_flat(&flat);
            epoch_losses.push(loss);
        }
        curve.push(LossBreakdown::mean(&epoch_losses));
    }
    if params.to_flat().iter().any(|v| !v.is_finite()) {
        return Err(Error::Training {
            epoch: opt.epochs.saturating_sub(1),
            reason: "non-finite parameters".into(),
        });
    }
    Ok(TrainOutcome { params, curve })
}

/// Loss used while training: plain segmentation loss or the full objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Base,
    Ugcp,
}

/// One cell of the {loss} × {steps} training matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMode {
    pub loss: LossMode,
    pub steps: usize,
}

impl TrainMode {
    /// Four-row matrix: {base, UGCP} loss × {T = 0, T = `steps`}.
    pub fn matrix(steps: usize) -> Vec<TrainMode> {
        let mut out = Vec::new();
        for loss in [LossMode::Base, LossMode::Ugcp] {
            for t in [0, steps] {
                out.push(TrainMode { loss, steps: t });
            }
        }
        out
    }

    pub fn label(&self) -> String {
        let loss = match self.loss {
            LossMode::Base => "base",
            LossMode::Ugcp => "ugcp",
        };
        format!("{loss}_T{}", self.steps)
    }

    pub fn apply(&self, cfg: &UgcpConfig) -> UgcpConfig {
        UgcpConfig {
            steps: self.steps,
            lambda_uq: match self.loss {
                LossMode::Base => 0.0,
                LossMode::Ugcp => cfg.lambda_uq,
            },
            ..cfg.clone()
        }
    }
}

/// Per-epoch loss curve as CSV.
pub fn curve_csv(curve: &[LossBreakdown]) -> String {
    let mut out = String::from("epoch,dice,bce,uq,total\n");
    for (e, l) in curve.iter().enumerate() {
        out.push_str(&format!("{e},{},{},{},{}\n", l.dice, l.bce, l.uq, l.total));
    }
    out
}
