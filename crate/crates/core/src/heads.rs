//! Per-location linear heads: the logit head that produces the initial state
//! and the feature head that feeds edge modulation.

use rayon::prelude::*;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{GridField, Real};
use crate::rng::Rng;

/// Learnable parameters. Matrices are row-major `[input][output]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UgcpParams {
    pub feature_channels: usize,
    pub edge_channels: usize,
    pub classes: usize,
    /// Logit head weights, `C_h × K`.
    pub logit_weight: Vec<f64>,
    pub logit_bias: Vec<f64>,
    /// Feature head weights, `C_h × C_f`.
    pub feature_weight: Vec<f64>,
    pub feature_bias: Vec<f64>,
    /// Edge projection vector `w`, length `C_f`.
    pub edge_weight: Vec<f64>,
}

impl UgcpParams {
    pub fn zeros(feature_channels: usize, edge_channels: usize, classes: usize) -> Self {
        Self {
            feature_channels,
            edge_channels,
            classes,
            logit_weight: vec![0.0; feature_channels * classes],
            logit_bias: vec![0.0; classes],
            feature_weight: vec![0.0; feature_channels * edge_channels],
            feature_bias: vec![0.0; edge_channels],
            edge_weight: vec![0.0; edge_channels],
        }
    }

    /// Total number of scalar parameters.
    pub fn len(&self) -> usize {
        self.logit_weight.len()
            + self.logit_bias.len()
            + self.feature_weight.len()
            + self.feature_bias.len()
            + self.edge_weight.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameter tensors in canonical order, with their names.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 5] {
        [
            ("logit_weight", &self.logit_weight),
            ("logit_bias", &self.logit_bias),
            ("feature_weight", &self.feature_weight),
            ("feature_bias", &self.feature_bias),
            ("edge_weight", &self.edge_weight),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.logit_weight,
            &mut self.logit_bias,
            &mut self.feature_weight,
            &mut self.feature_bias,
            &mut self.edge_weight,
        ]
    }

    /// Flat view in canonical tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|(_, t)| t.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.len());
        let mut it = flat.iter();
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *it.next().unwrap();
            }
        }
    }

    /// Name and index within its tensor of a flat parameter position.
    pub fn describe(&self, mut flat: usize) -> (&'static str, usize) {
        for (name, t) in self.tensors() {
            if flat < t.len() {
                return (name, flat);
            }
            flat -= t.len();
        }
        ("out_of_range", flat)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let (ch, cf, k) = (self.feature_channels, self.edge_channels, self.classes);
        let ok = self.logit_weight.len() == ch * k
            && self.logit_bias.len() == k
            && self.feature_weight.len() == ch * cf
            && self.feature_bias.len() == cf
            && self.edge_weight.len() == cf;
        if !ok {
            return Err(Error::Domain(format!(
                "parameter tensors inconsistent with C_h={ch}, C_f={cf}, K={k}"
            )));
        }
        if self.to_flat().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases; deterministic in `seed`.
///
/// Draw order: logit weights, feature weights, then `w` (fan-in `C_f`, fan-out 1).
pub fn init_params(
    seed: u64,
    feature_channels: usize,
    edge_channels: usize,
    classes: usize,
) -> Result<UgcpParams> {
    if feature_channels == 0 || edge_channels == 0 || classes == 0 {
        return Err(Error::Config(format!(
            "parameter dimensions must be positive (C_h={feature_channels}, C_f={edge_channels}, K={classes})"
        )));
    }
    let mut rng = Rng::seed(seed);
    let mut glorot = |fan_in: usize, fan_out: usize, n: usize| -> Vec<f64> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        (0..n).map(|_| rng.uniform(-a, a)).collect()
    };
    let mut p = UgcpParams::zeros(feature_channels, edge_channels, classes);
    p.logit_weight = glorot(feature_channels, classes, feature_channels * classes);
    p.feature_weight = glorot(feature_channels, edge_channels, feature_channels * edge_channels);
    p.edge_weight = glorot(edge_channels, 1, edge_channels);
    Ok(p)
}

fn project<T: Real>(
    h: &GridField<T>,
    weight: &[f64],
    bias: &[f64],
    inputs: usize,
    outputs: usize,
) -> Result<GridField<T>> {
    if h.channels() != inputs {
        return Err(Error::Domain(format!(
            "feature field has {} channels, head expects {inputs}",
            h.channels()
        )));
    }
    let weight: Vec<T> = weight.iter().map(|&v| T::lit(v)).collect();
    let bias: Vec<T> = bias.iter().map(|&v| T::lit(v)).collect();
    let mut out = vec![T::zero(); h.locations() * outputs];
    out.par_chunks_mut(outputs)
        .zip(h.data().par_chunks(inputs))
        .for_each(|(o, hp)| {
            for (j, oj) in o.iter_mut().enumerate() {
                let mut acc = T::zero();
                for (i, &x) in hp.iter().enumerate() {
                    acc = acc + x * weight[i * outputs + j];
                }
                *oj = acc + bias[j];
            }
        });
    Ok(GridField::from_raw(h.shape().clone(), outputs, out))
}

/// Initial logit state `s⁽⁰⁾_p = W_sᵀ h_p + b_s`.
pub fn project_logits<T: Real>(h: &GridField<T>, params: &UgcpParams) -> Result<GridField<T>> {
    project(
        h,
        &params.logit_weight,
        &params.logit_bias,
        params.feature_channels,
        params.classes,
    )
}

/// Edge features `f_p = W_fᵀ h_p + b_f`.
pub fn project_features<T: Real>(h: &GridField<T>, params: &UgcpParams) -> Result<GridField<T>> {
    project(
        h,
        &params.feature_weight,
        &params.feature_bias,
        params.feature_channels,
        params.edge_channels,
    )
}

/// Scalar edge potential `g_p = wᵀ f_p`, so that `φ_{p,q} = tanh(g_p − g_q)`.
pub fn edge_potential<T: Real>(f: &GridField<T>, w: &[f64]) -> Result<Vec<T>> {
    if f.channels() != w.len() {
        return Err(Error::Domain(format!(
            "edge feature field has {} channels, w has {}",
            f.channels(),
            w.len()
        )));
    }
    let w: Vec<T> = w.iter().map(|&v| T::lit(v)).collect();
    Ok(f.data()
        .par_chunks(w.len())
        .map(|fp| fp.iter().zip(&w).fold(T::zero(), |acc, (&a, &b)| acc + a * b))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridShape;
    use proptest::prelude::*;

    fn random_h(seed: u64, extents: &[usize], c: usize) -> GridField<f64> {
        let mut rng = crate::rng::Rng::seed(seed);
        GridField::from_fn(GridShape::new(extents).unwrap(), c, |_, _| rng.uniform(-1.0, 1.0))
            .unwrap()
    }

    #[test]
    fn init_is_deterministic_with_zero_biases_and_bounded_entries() {
        let a = init_params(7, 4, 8, 2).unwrap();
        let b = init_params(7, 4, 8, 2).unwrap();
        assert_eq!(a.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   b.to_flat().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert!(a.logit_bias.iter().chain(&a.feature_bias).all(|&v| v == 0.0));
        let bound_s = (6.0f64 / 6.0).sqrt();
        assert!(a.logit_weight.iter().all(|v| v.abs() <= bound_s));
        let bound_f = (6.0f64 / 12.0).sqrt();
        assert!(a.feature_weight.iter().all(|v| v.abs() <= bound_f));
        let bound_w = (6.0f64 / 9.0).sqrt();
        assert!(a.edge_weight.iter().all(|v| v.abs() <= bound_w));
        assert_ne!(a, init_params(8, 4, 8, 2).unwrap());
    }

    #[test]
    fn zero_dims_are_config_errors() {
        assert!(matches!(init_params(0, 0, 8, 2), Err(Error::Config(_))));
    }

    #[test]
    fn zero_weights_give_bias_field() {
        let mut p = UgcpParams::zeros(3, 2, 2);
        p.logit_bias = vec![1.0, -1.0];
        let s = project_logits(&random_h(1, &[4, 5], 3), &p).unwrap();
        for q in 0..s.locations() {
            assert_eq!(s.at(q), &[1.0, -1.0]);
        }
        let f = project_features(&random_h(1, &[4, 5], 3), &p).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_head() {
        let mut p = UgcpParams::zeros(2, 1, 2);
        p.logit_weight = vec![1.0, 0.0, 0.0, 1.0];
        let h = GridField::new(GridShape::new(&[1, 1]).unwrap(), 2, vec![0.3, 0.7]).unwrap();
        assert_eq!(project_logits(&h, &p).unwrap().at(0), &[0.3, 0.7]);
    }

    #[test]
    fn uniform_input_gives_uniform_features() {
        let p = init_params(2, 4, 8, 2).unwrap();
        let h = GridField::from_fn(GridShape::new(&[3, 3, 3]).unwrap(), 4, |_, c| c as f64 * 0.25)
            .unwrap();
        let f = project_features(&h, &p).unwrap();
        for q in 1..f.locations() {
            assert_eq!(f.at(q), f.at(0));
        }
    }

    #[test]
    fn projections_match_scalar_loop_oracle() {
        let mut p = init_params(11, 4, 8, 2).unwrap();
        let mut rng = crate::rng::Rng::seed(12);
        for v in p.logit_bias.iter_mut().chain(p.feature_bias.iter_mut()) {
            *v = rng.uniform(-1.0, 1.0);
        }
        let h = random_h(13, &[5, 6], 4);
        let s = project_logits(&h, &p).unwrap();
        let f = project_features(&h, &p).unwrap();
        for q in 0..h.locations() {
            for k in 0..2 {
                let mut want = p.logit_bias[k];
                for i in 0..4 {
                    want += h.get(q, i) * p.logit_weight[i * 2 + k];
                }
                assert!((s.get(q, k) - want).abs() < 1e-14);
            }
            for j in 0..8 {
                let mut want = p.feature_bias[j];
                for i in 0..4 {
                    want += h.get(q, i) * p.feature_weight[i * 8 + j];
                }
                assert!((f.get(q, j) - want).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_domain_error() {
        let p = init_params(1, 4, 8, 2).unwrap();
        assert!(matches!(project_logits(&random_h(1, &[2, 2], 3), &p), Err(Error::Domain(_))));
    }

    #[test]
    fn projections_commute_with_location_permutation() {
        let p = init_params(3, 4, 8, 2).unwrap();
        let h = random_h(4, &[4, 4], 4);
        let perm: Vec<usize> = (0..16).rev().collect();
        let hp = GridField::from_fn(h.shape().clone(), 4, |q, c| h.get(perm[q], c)).unwrap();
        let s = project_logits(&h, &p).unwrap();
        let sp = project_logits(&hp, &p).unwrap();
        for q in 0..16 {
            assert_eq!(sp.at(q), s.at(perm[q]));
        }
    }

    proptest! {
        #[test]
        fn bias_free_projection_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
            let p = init_params(seed, 4, 8, 2).unwrap();
            let h1 = random_h(seed + 1, &[3, 4], 4);
            let h2 = random_h(seed + 2, &[3, 4], 4);
            let mix = GridField::from_fn(h1.shape().clone(), 4, |q, c| a * h1.get(q, c) + b * h2.get(q, c)).unwrap();
            let (s1, s2, sm) = (project_logits(&h1, &p).unwrap(), project_logits(&h2, &p).unwrap(), project_logits(&mix, &p).unwrap());
            for i in 0..sm.data().len() {
                prop_assert!((sm.data()[i] - (a * s1.data()[i] + b * s2.data()[i])).abs() < 1e-12);
            }
        }
    }
}
