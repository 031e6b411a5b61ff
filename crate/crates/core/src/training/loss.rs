//! Segmentation and evidential losses evaluated on the final state.

use serde::{Deserialize, Serialize};

use super::special::psi;
use crate::config::UgcpConfig;
use crate::error::{Error, Result};
use crate::evidence::{alpha_from_logits, AlphaField};
use crate::field::GridField;
use crate::heads::UgcpParams;
use crate::metrics::BinaryMask;
use crate::propagation::refine_features;

/// Binary ground truth; channel 1 of the one-hot expansion is foreground.
pub type LabelField = BinaryMask;

/// Smoothing constant of the soft Dice loss.
pub const DICE_SMOOTH: f64 = 1e-6;
/// Probability clamp applied before the BCE logarithms.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub dice: f64,
    pub bce: f64,
    pub uq: f64,
    pub lambda_uq: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(dice: f64, bce: f64, uq: f64, lambda_uq: f64) -> Self {
        Self {
            dice,
            bce,
            uq,
            lambda_uq,
            total: dice + bce + lambda_uq * uq,
        }
    }

    /// Component-wise mean; the total is recomposed from the means.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let n = items.len() as f64;
        let avg = |f: fn(&LossBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::new(
            avg(|l| l.dice),
            avg(|l| l.bce),
            avg(|l| l.uq),
            items.first().map_or(0.0, |l| l.lambda_uq),
        )
    }
}

fn check_pair(pi: &GridField<f64>, y: &LabelField) -> Result<()> {
    if pi.channels() != 1 {
        return Err(Error::Domain(format!(
            "expected a single-channel probability field, got {} channels",
            pi.channels()
        )));
    }
    if pi.shape().extents() != y.shape().extents() {
        return Err(Error::Domain(format!(
            "probability extents {:?} differ from label extents {:?}",
            pi.shape().extents(),
            y.shape().extents()
        )));
    }
    Ok(())
}

/// `1 − (2Σπy + δ)/(Σπ + Σy + δ)`.
pub fn soft_dice_loss(pi_fg: &GridField<f64>, y: &LabelField) -> Result<f64> {
    check_pair(pi_fg, y)?;
    let (mut inter, mut sum_pi, mut sum_y) = (0.0, 0.0, 0.0);
    for (p, &pi) in pi_fg.data().iter().enumerate() {
        let yp = y.value(p);
        inter += pi * yp;
        sum_pi += pi;
        sum_y += yp;
    }
    Ok(1.0 - (2.0 * inter + DICE_SMOOTH) / (sum_pi + sum_y + DICE_SMOOTH))
}

/// Mean binary cross-entropy of the foreground probability.
pub fn bce_loss(pi_fg: &GridField<f64>, y: &LabelField) -> Result<f64> {
    check_pair(pi_fg, y)?;
    let mut acc = 0.0;
    for (p, &pi) in pi_fg.data().iter().enumerate() {
        let pc = pi.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
        acc -= if y.is_set(p) { pc.ln() } else { (1.0 - pc).ln() };
    }
    Ok(acc / pi_fg.locations() as f64)
}

/// One-hot label of class `k` at location `p` (channel 1 = foreground, 0 = background).
#[inline]
pub(crate) fn one_hot(y: &LabelField, p: usize, k: usize) -> f64 {
    match (k, y.is_set(p)) {
        (1, true) | (0, false) => 1.0,
        _ => 0.0,
    }
}

/// Per-location evidential loss: the Dirichlet expected negative log-likelihood
/// plus the penalty on evidence assigned to the wrong classes.
pub fn evidential_term(alpha: &[f64], onehot: impl Fn(usize) -> f64) -> f64 {
    let total: f64 = alpha.iter().sum();
    let psi_total = psi(total);
    let mut nll = 0.0;
    let mut adjusted_total = 0.0;
    for (k, &a) in alpha.iter().enumerate() {
        let yk = onehot(k);
        nll += yk * (psi_total - psi(a));
        adjusted_total += yk + (1.0 - yk) * a;
    }
    let psi_adj_total = psi(adjusted_total);
    let mut reg = 0.0;
    for (k, &a) in alpha.iter().enumerate() {
        let yk = onehot(k);
        let adj = yk + (1.0 - yk) * a;
        reg += (adj - 1.0) * (psi(adj) - psi_adj_total);
    }
    nll + reg
}

/// Mean over Ω of the per-location evidential loss.
pub fn evidential_loss(alpha: &AlphaField<f64>, y: &LabelField) -> Result<f64> {
    let a = alpha.field();
    if a.shape().extents() != y.shape().extents() {
        return Err(Error::Domain("concentration and label extents differ".into()));
    }
    if a.channels() < 2 {
        return Err(Error::Domain("evidential loss needs K >= 2".into()));
    }
    let mut acc = 0.0;
    for p in 0..a.locations() {
        let ap = a.at(p);
        if let Some(bad) = ap.iter().find(|&&v| !(v >= 1.0 && v.is_finite())) {
            return Err(Error::Numeric(format!(
                "concentration {bad} < 1 at location {:?}",
                a.shape().coords(p)
            )));
        }
        acc += evidential_term(ap, |k| one_hot(y, p, k));
    }
    Ok(acc / a.locations() as f64)
}

/// Losses on an already computed final logit state.
pub fn losses_from_logits(
    logits: &GridField<f64>,
    y: &LabelField,
    cfg: &UgcpConfig,
) -> Result<LossBreakdown> {
    let alpha = alpha_from_logits(logits)?;
    let pi = crate::evidence::expected_prob(&alpha, cfg.eps).channel(1)?;
    Ok(LossBreakdown::new(
        soft_dice_loss(&pi, y)?,
        bce_loss(&pi, y)?,
        evidential_loss(&alpha, y)?,
        cfg.lambda_uq,
    ))
}

/// Refines `h` and evaluates `Dice + BCE + λ_uq · UQ` on the final state.
pub fn total_loss(
    h: &GridField<f64>,
    y: &LabelField,
    params: &UgcpParams,
    cfg: &UgcpConfig,
) -> Result<LossBreakdown> {
    let out = refine_features(h, params, cfg)?;
    losses_from_logits(&out.logits, y, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridShape;

    fn label(bits: &[u8], extents: &[usize]) -> LabelField {
        BinaryMask::new(GridShape::new(extents).unwrap(), bits.to_vec()).unwrap()
    }

    fn prob(values: &[f64], extents: &[usize]) -> GridField<f64> {
        GridField::new(GridShape::new(extents).unwrap(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let bits: Vec<u8> = (0..16).map(|i| (i < 8) as u8).collect();
        let y = label(&bits, &[4, 4]);
        let same: Vec<f64> = bits.iter().map(|&b| b as f64).collect();
        assert!(soft_dice_loss(&prob(&same, &[4, 4]), &y).unwrap().abs() < 1e-5);
        let inv: Vec<f64> = same.iter().map(|v| 1.0 - v).collect();
        assert!((soft_dice_loss(&prob(&inv, &[4, 4]), &y).unwrap() - 1.0).abs() < 1e-5);
        let half = soft_dice_loss(&prob(&[0.5; 16], &[4, 4]), &y).unwrap();
        let want = 1.0 - (8.0 + DICE_SMOOTH) / (16.0 + DICE_SMOOTH);
        assert_eq!(half, want);
        assert!((half - 0.5).abs() < 1e-7);
    }

    #[test]
    fn dice_handles_empty_masks() {
        let y = label(&[0; 4], &[2, 2]);
        assert_eq!(soft_dice_loss(&prob(&[0.0; 4], &[2, 2]), &y).unwrap(), 0.0);
    }

    #[test]
    fn bce_examples() {
        let y = label(&[1, 0, 1, 0], &[2, 2]);
        let l = bce_loss(&prob(&[0.5; 4], &[2, 2]), &y).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        let exact = bce_loss(&prob(&[1.0, 0.0, 1.0, 0.0], &[2, 2]), &y).unwrap();
        assert!(exact <= 1e-11);
        let y = label(&[1, 0], &[1, 2]);
        let l = bce_loss(&prob(&[0.9, 0.1], &[1, 2]), &y).unwrap();
        assert!((l - 0.10536051565782628).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_domain_error() {
        let y = label(&[1, 0, 1, 0], &[2, 2]);
        assert!(matches!(soft_dice_loss(&prob(&[0.5; 6], &[2, 3]), &y), Err(Error::Domain(_))));
    }

    #[test]
    fn evidential_anchor_value() {
        let l = evidential_term(&[1.0, 1.0], |k| if k == 1 { 1.0 } else { 0.0 });
        assert!((l - 1.0).abs() < 1e-10, "{l}");
        let l = evidential_term(&[1.0, 1.0], |k| if k == 0 { 1.0 } else { 0.0 });
        assert!((l - 1.0).abs() < 1e-10, "{l}");
    }

    #[test]
    fn evidential_vanishes_with_overwhelming_correct_evidence() {
        // foreground channel 1 carries the evidence
        let l = evidential_term(&[1.0, 1e6], |k| if k == 1 { 1.0 } else { 0.0 });
        assert!(l.abs() < 2e-6, "{l}");
    }

    #[test]
    fn evidential_matches_scalar_recomputation() {
        // background label; α = (2, 3): term1 = ψ(5) − ψ(2), ᾱ = (1, 3), term2 = 2[ψ(3) − ψ(4)]
        let dig = |x: f64| {
            // ψ(n) = −γ + H_{n−1} for integer n
            let mut h = -0.5772156649015329;
            for i in 1..(x as usize) {
                h += 1.0 / i as f64;
            }
            h
        };
        let want = (dig(5.0) - dig(2.0)) + 2.0 * (dig(3.0) - dig(4.0));
        let got = evidential_term(&[2.0, 3.0], |k| if k == 0 { 1.0 } else { 0.0 });
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        assert!((want - (1.0 / 2.0 + 1.0 / 3.0 + 1.0 / 4.0 - 2.0 / 3.0)).abs() < 1e-15);
    }

    #[test]
    fn evidential_sign_is_monitored_not_assumed() {
        // K = 2, foreground label: the second sum reduces to −(α₀ − 1)/α₀ ≤ 0,
        // so strong evidence on both classes drives the total below zero
        let fg = |k: usize| if k == 1 { 1.0 } else { 0.0 };
        for a0 in [1usize, 2, 4, 20] {
            let a = a0 as f64;
            // ψ(a + 100) − ψ(100) by the recurrence
            let nll: f64 = (0..a0).map(|i| 1.0 / (100.0 + i as f64)).sum();
            let want = nll - (a - 1.0) / a;
            let l = evidential_term(&[a, 100.0], fg);
            assert!((l - want).abs() < 1e-12, "{a0}: {l} vs {want}");
        }
        assert!(evidential_term(&[20.0, 100.0], fg) < 0.0);
        assert!(evidential_term(&[1.0, 100.0], fg) > 0.0);
    }

    #[test]
    fn breakdown_total_is_exact() {
        let l = LossBreakdown::new(0.31, 0.52, 1.7, 0.1);
        assert_eq!(l.total, 0.31 + 0.52 + 0.1 * 1.7);
    }
}
