//! Reverse-mode gradients of the total loss through the unrolled refinement.
//!
//! The adjoint of one Jacobi step is written as a gather: every location
//! collects the contributions of its own edges and of the edges that point
//! at it, so the reverse sweep parallelises over locations exactly like the
//! forward one and stays bit-stable across thread counts.

use rayon::prelude::*;

use super::loss::{losses_from_logits, one_hot, LabelField, LossBreakdown, BCE_CLAMP, DICE_SMOOTH};
use super::special::{psi, psi1};
use crate::config::UgcpConfig;
use crate::error::{Error, Result};
use crate::evidence::{alpha, sigmoid};
use crate::field::GridField;
use crate::heads::UgcpParams;
use crate::propagation::{refine_state, sigmoid_pair, StepState, TraceOptions};

/// Gradients shaped like the parameters, plus the optional input gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub params: UgcpParams,
    pub h: Option<GridField<f64>>,
}

impl GradientSet {
    pub fn zeros_like(params: &UgcpParams) -> Self {
        Self {
            params: UgcpParams::zeros(params.feature_channels, params.edge_channels, params.classes),
            h: None,
        }
    }

    /// `self += other`, tensor by tensor in canonical order.
    pub fn accumulate(&mut self, other: &GradientSet) {
        for (dst, (_, src)) in self.params.tensors_mut().into_iter().zip(other.params.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.params.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.params.to_flat().iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

fn check_finite(values: &[f64], step: usize, term: &str) -> Result<()> {
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient in {term} at step {step}, entry {i}"
        )));
    }
    Ok(())
}

/// `∂L/∂s_T` for the final logits.
fn final_state_adjoint(
    s: &GridField<f64>,
    y: &LabelField,
    cfg: &UgcpConfig,
) -> Vec<f64> {
    let k = s.channels();
    let n = s.locations();
    let nf = n as f64;
    let eps = cfg.eps;

    // first pass: the Dice sums
    let mut pi_fg = vec![0.0; n];
    let (mut inter, mut sum_pi, mut sum_y) = (0.0, 0.0, 0.0);
    for p in 0..n {
        let sp = s.at(p);
        let total: f64 = sp.iter().fold(0.0, |acc, &v| acc + alpha(v));
        pi_fg[p] = alpha(sp[1]) / (total + eps);
        let yp = y.value(p);
        inter += pi_fg[p] * yp;
        sum_pi += pi_fg[p];
        sum_y += yp;
    }
    let dice_den = sum_pi + sum_y + DICE_SMOOTH;
    let dice_num = 2.0 * inter + DICE_SMOOTH;

    let mut out = vec![0.0; s.data().len()];
    out.par_chunks_mut(k).enumerate().for_each(|(p, g)| {
        let sp = s.at(p);
        let al: Vec<f64> = sp.iter().map(|&v| alpha(v)).collect();
        let total: f64 = al.iter().sum();
        let den = total + eps;
        let yp = y.value(p);

        let d_dice = -(2.0 * yp * dice_den - dice_num) / (dice_den * dice_den);
        let pi = pi_fg[p];
        let d_bce = if pi > BCE_CLAMP && pi < 1.0 - BCE_CLAMP {
            -(yp / pi - (1.0 - yp) / (1.0 - pi)) / nf
        } else {
            0.0
        };
        let d_pi = d_dice + d_bce;

        let mut d_alpha: Vec<f64> = (0..k)
            .map(|c| {
                let dpi_da = if c == 1 { 1.0 / den } else { 0.0 } - al[1] / (den * den);
                d_pi * dpi_da
            })
            .collect();

        if cfg.lambda_uq != 0.0 {
            let scale = cfg.lambda_uq / nf;
            let onehot: Vec<f64> = (0..k).map(|c| one_hot(y, p, c)).collect();
            let y_total: f64 = onehot.iter().sum();
            let adj: Vec<f64> = (0..k).map(|c| onehot[c] + (1.0 - onehot[c]) * al[c]).collect();
            let adj_total: f64 = adj.iter().sum();
            let psi1_total = psi1(total);
            let psi_adj_total = psi(adj_total);
            let psi1_adj_total = psi1(adj_total);
            let weight_sum: f64 = adj.iter().map(|a| a - 1.0).sum();
            for c in 0..k {
                let d1 = y_total * psi1_total - onehot[c] * psi1(al[c]);
                let d2 = (psi(adj[c]) - psi_adj_total) + (adj[c] - 1.0) * psi1(adj[c])
                    - weight_sum * psi1_adj_total;
                d_alpha[c] += scale * (d1 + (1.0 - onehot[c]) * d2);
            }
        }

        for c in 0..k {
            g[c] = d_alpha[c] * sigmoid(sp[c]);
        }
    });
    out
}

/// Adjoints flowing out of one reverse step.
struct StepAdjoint {
    state: Vec<f64>,
    anchor: Vec<f64>,
    potential: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

/// Pulls `G = ∂L/∂s⁽ᵗ⁺¹⁾` back through `s⁽ᵗ⁺¹⁾ = s⁽ᵗ⁾ + θ U(s⁽ᵗ⁾)`.
fn step_adjoint(
    s: &GridField<f64>,
    u: &[f64],
    anchor: &GridField<f64>,
    potential: &[f64],
    grad: &[f64],
    cfg: &UgcpConfig,
) -> StepAdjoint {
    let k = s.channels();
    let n = s.locations();
    let kf = k as f64;
    let tpe = cfg.tau + cfg.eps;
    let shape = s.shape();
    let d: Vec<f64> = grad.iter().map(|g| cfg.theta * g).collect();
    let d_at = |p: usize| &d[p * k..(p + 1) * k];

    // gate pair and modulation for the directed edge p ← q
    let edge = |p: usize, q: usize| -> (f64, f64, f64) {
        let (g_in, g_out) = if cfg.enable_gamma {
            sigmoid_pair((u[p] - u[q]) / tpe)
        } else {
            (0.5, 0.5)
        };
        let phi = if cfg.enable_phi {
            (potential[p] - potential[q]).tanh()
        } else {
            1.0
        };
        (g_in, g_out, phi)
    };

    let per_location: Vec<(Vec<f64>, Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|p| {
            let mut gs: Vec<f64> = grad[p * k..(p + 1) * k].to_vec();
            let mut g_anchor = vec![0.0; k];
            let mut du = 0.0;
            let mut dg = 0.0;
            let sp = s.at(p);
            let dp = d_at(p);
            if cfg.enable_flux {
                shape.for_each_neighbor(p, |q| {
                    let sq = s.at(q);
                    let dq = d_at(q);
                    // p's own update: + g_in φ s_q − g_out s_p
                    let (g_in, g_out, phi) = edge(p, q);
                    for c in 0..k {
                        gs[c] -= g_out * dp[c];
                    }
                    let dot_pq = dot(dp, sq);
                    let dot_pp = dot(dp, sp);
                    if cfg.enable_gamma {
                        du += g_in * g_out * (phi * dot_pq + dot_pp) / tpe;
                    }
                    if cfg.enable_phi {
                        dg += g_in * dot_pq * (1.0 - phi * phi);
                    }
                    // q's update, where p is the incoming neighbour
                    let (h_in, h_out, psi_qp) = edge(q, p);
                    for c in 0..k {
                        gs[c] += h_in * psi_qp * dq[c];
                    }
                    let dot_qp = dot(dq, sp);
                    let dot_qq = dot(dq, sq);
                    if cfg.enable_gamma {
                        du -= h_in * h_out * (psi_qp * dot_qp + dot_qq) / tpe;
                    }
                    if cfg.enable_phi {
                        dg -= h_in * dot_qp * (1.0 - psi_qp * psi_qp);
                    }
                });
            }
            if cfg.enable_source {
                let r = sigmoid((cfg.u0 - u[p]) / tpe);
                let a = anchor.at(p);
                let mut dr = 0.0;
                for c in 0..k {
                    gs[c] -= r * dp[c];
                    g_anchor[c] = r * dp[c];
                    dr += dp[c] * (a[c] - sp[c]);
                }
                du -= dr * r * (1.0 - r) / tpe;
            }
            if du != 0.0 {
                // u_p = K / (Σ α + ε)
                let total: f64 = sp.iter().fold(0.0, |acc, &v| acc + alpha(v));
                let den = total + cfg.eps;
                let du_dalpha = -kf / (den * den);
                for c in 0..k {
                    gs[c] += du * du_dalpha * sigmoid(sp[c]);
                }
            }
            (gs, g_anchor, dg)
        })
        .collect();

    let mut out = StepAdjoint {
        state: Vec::with_capacity(n * k),
        anchor: Vec::with_capacity(n * k),
        potential: Vec::with_capacity(n),
    };
    for (gs, ga, dg) in per_location {
        out.state.extend(gs);
        out.anchor.extend(ga);
        out.potential.push(dg);
    }
    out
}

/// Loss and exact gradients with respect to every parameter (and `h` when
/// `with_input` is set).
pub fn loss_and_grad(
    h: &GridField<f64>,
    y: &LabelField,
    params: &UgcpParams,
    cfg: &UgcpConfig,
    with_input: bool,
) -> Result<(LossBreakdown, GradientSet)> {
    params.check_shapes()?;
    let state = StepState::from_features(h, params, cfg)?;
    let features = state.features().clone();
    let anchor = state.anchor().clone();
    let potential = state.potential().to_vec();
    let out = refine_state(state, cfg, TraceOptions { snapshots: true })?;
    let loss = losses_from_logits(&out.logits, y, cfg)?;

    let steps = cfg.steps;
    let mut grad = final_state_adjoint(&out.logits, y, cfg);
    check_finite(&grad, steps, "loss adjoint")?;
    let mut g_anchor = vec![0.0; grad.len()];
    let mut g_potential = vec![0.0; h.locations()];
    for t in (0..steps).rev() {
        let adj = step_adjoint(
            &out.trace.snapshots[t],
            &out.trace.uncertainty_snapshots[t],
            &anchor,
            &potential,
            &grad,
            cfg,
        );
        check_finite(&adj.state, t, "state adjoint")?;
        check_finite(&adj.potential, t, "edge potential adjoint")?;
        for (a, b) in g_anchor.iter_mut().zip(&adj.anchor) {
            *a += b;
        }
        for (a, b) in g_potential.iter_mut().zip(&adj.potential) {
            *a += b;
        }
        grad = adj.state;
    }
    // s⁽⁰⁾ is both the initial state and the source anchor
    for (a, b) in grad.iter_mut().zip(&g_anchor) {
        *a += b;
    }

    let (ch, cf, k) = (params.feature_channels, params.edge_channels, params.classes);
    let n = h.locations();
    let mut g = GradientSet::zeros_like(params);
    let mut g_features = vec![0.0; n * cf];
    for p in 0..n {
        let hp = h.at(p);
        let gs = &grad[p * k..(p + 1) * k];
        for (i, &x) in hp.iter().enumerate() {
            for c in 0..k {
                g.params.logit_weight[i * k + c] += x * gs[c];
            }
        }
        for c in 0..k {
            g.params.logit_bias[c] += gs[c];
        }
        let dg = g_potential[p];
        if dg != 0.0 {
            let fp = features.at(p);
            let gf = &mut g_features[p * cf..(p + 1) * cf];
            for j in 0..cf {
                g.params.edge_weight[j] += dg * fp[j];
                gf[j] = dg * params.edge_weight[j];
                g.params.feature_bias[j] += gf[j];
            }
            for (i, &x) in hp.iter().enumerate() {
                for j in 0..cf {
                    g.params.feature_weight[i * cf + j] += x * gf[j];
                }
            }
        }
    }
    if with_input {
        let data = (0..n)
            .flat_map(|p| {
                let gs = &grad[p * k..(p + 1) * k];
                let gf = &g_features[p * cf..(p + 1) * cf];
                (0..ch).map(move |i| {
                    let a = (0..k).fold(0.0, |acc, c| acc + params.logit_weight[i * k + c] * gs[c]);
                    (0..cf).fold(a, |acc, j| acc + params.feature_weight[i * cf + j] * gf[j])
                })
            })
            .collect();
        g.h = Some(GridField::new(h.shape().clone(), ch, data)?);
    }
    check_finite(&g.params.to_flat(), 0, "parameter gradient")?;
    Ok((loss, g))
}

/// Exact gradients of the total loss.
pub fn backward(
    h: &GridField<f64>,
    y: &LabelField,
    params: &UgcpParams,
    cfg: &UgcpConfig,
) -> Result<GradientSet> {
    loss_and_grad(h, y, params, cfg, false).map(|(_, g)| g)
}

/// Mean loss and mean gradient over a set of samples. Samples are processed
/// in parallel and reduced in index order.
pub fn batch_loss_and_grad(
    samples: &[(&GridField<f64>, &LabelField)],
    params: &UgcpParams,
    cfg: &UgcpConfig,
) -> Result<(LossBreakdown, GradientSet)> {
    if samples.is_empty() {
        return Err(Error::Domain("empty batch".into()));
    }
    let results: Vec<Result<(LossBreakdown, GradientSet)>> = samples
        .par_iter()
        .map(|(h, y)| loss_and_grad(h, y, params, cfg, false))
        .collect();
    let mut losses = Vec::with_capacity(samples.len());
    let mut total = GradientSet::zeros_like(params);
    for r in results {
        let (l, g) = r?;
        losses.push(l);
        total.accumulate(&g);
    }
    total.scale(1.0 / samples.len() as f64);
    Ok((LossBreakdown::mean(&losses), total))
}
