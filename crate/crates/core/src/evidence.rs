//! Dirichlet evidence: concentration, expected probability and the scalar
//! uncertainty field derived from a logit state.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::{GridField, Real};

/// Stabiliser added to every evidence denominator and to the gate temperature.
pub const EPSILON: f64 = 1e-8;

/// `ln(1 + e^x)` in the overflow-safe form `max(x, 0) + ln1p(e^-|x|)`.
#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `α = softplus(s) + 1`.
#[inline]
pub fn alpha<T: Real>(s: T) -> T {
    softplus(s) + T::one()
}

/// Total evidence `S = Σ_k α_k` of one location, summed in channel order.
#[inline]
pub fn evidence_total<T: Real>(alphas: impl Iterator<Item = T>) -> T {
    alphas.fold(T::zero(), |acc, a| acc + a)
}

/// `u = K / (S + ε)` for one location's logits.
#[inline]
pub fn location_uncertainty<T: Real>(logits: &[T], eps: T) -> T {
    let k = T::lit(logits.len() as f64);
    k / (evidence_total(logits.iter().map(|&s| alpha(s))) + eps)
}

/// Dirichlet concentration field, every entry ≥ 1.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaField<T = f64>(GridField<T>);

impl<T: Real> AlphaField<T> {
    /// Validates an externally supplied concentration field.
    pub fn new(field: GridField<T>) -> Result<Self> {
        if let Some(i) = field.data().iter().position(|&a| a < T::one()) {
            return Err(Error::Numeric(format!(
                "concentration {:?} < 1 at flat entry {i}",
                field.data()[i]
            )));
        }
        Ok(Self(field))
    }

    pub fn field(&self) -> &GridField<T> {
        &self.0
    }

    pub fn into_field(self) -> GridField<T> {
        self.0
    }

    pub fn classes(&self) -> usize {
        self.0.channels()
    }
}

/// Single-channel uncertainty field.
#[derive(Clone, Debug, PartialEq)]
pub struct UncertaintyField<T = f64>(GridField<T>);

impl<T: Real> UncertaintyField<T> {
    pub fn field(&self) -> &GridField<T> {
        &self.0
    }

    pub fn into_field(self) -> GridField<T> {
        self.0
    }

    pub fn values(&self) -> &[T] {
        self.0.data()
    }
}

pub fn alpha_from_logits<T: Real>(s: &GridField<T>) -> Result<AlphaField<T>> {
    if let Some(i) = s.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Domain(format!(
            "non-finite logit at location {:?}",
            s.shape().coords(i / s.channels())
        )));
    }
    let data = s.data().par_iter().map(|&x| alpha(x)).collect();
    Ok(AlphaField(GridField::from_raw(
        s.shape().clone(),
        s.channels(),
        data,
    )))
}

/// `π_k = α_k / (Σ_j α_j + ε)` per location.
pub fn expected_prob<T: Real>(alpha: &AlphaField<T>, eps: T) -> GridField<T> {
    let a = alpha.field();
    let k = a.channels();
    let mut out = vec![T::zero(); a.data().len()];
    out.par_chunks_mut(k)
        .zip(a.data().par_chunks(k))
        .for_each(|(pi, al)| {
            let denom = evidence_total(al.iter().copied()) + eps;
            for (p, &x) in pi.iter_mut().zip(al) {
                *p = x / denom;
            }
        });
    GridField::from_raw(a.shape().clone(), k, out)
}

/// `u = K / (Σ_j α_j + ε)` per location.
pub fn uncertainty<T: Real>(alpha: &AlphaField<T>, eps: T) -> UncertaintyField<T> {
    let a = alpha.field();
    let k = a.channels();
    let kk = T::lit(k as f64);
    let data = a
        .data()
        .par_chunks(k)
        .map(|al| kk / (evidence_total(al.iter().copied()) + eps))
        .collect();
    UncertaintyField(GridField::from_raw(a.shape().clone(), 1, data))
}

/// Uncertainty straight from logits; bit-identical to
/// `uncertainty(alpha_from_logits(s))`.
pub fn uncertainty_of_logits<T: Real>(s: &GridField<T>, eps: T) -> Vec<T> {
    s.data()
        .par_chunks(s.channels())
        .map(|sp| location_uncertainty(sp, eps))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::GridShape;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn logits(values: &[f64], k: usize) -> GridField<f64> {
        let n = values.len() / k;
        GridField::new(GridShape::new(&[1, n]).unwrap(), k, values.to_vec()).unwrap()
    }

    #[test]
    fn alpha_examples() {
        let a = alpha_from_logits(&logits(&[0.0, 10.0, -40.0, 0.0], 2)).unwrap();
        let d = a.field().data();
        assert!((d[0] - (1.0 + std::f64::consts::LN_2)).abs() < 1e-15);
        assert!((d[0] - 1.693147).abs() < 1e-6);
        assert!((d[1] - (11.0 + (-10.0f64).exp().ln_1p())).abs() < 1e-14);
        assert!((d[1] - 11.0000454).abs() < 1e-7);
        // softplus(-40) ≈ 4e-18 is below half an ulp of 1
        assert_eq!(d[2], 1.0);
    }

    #[test]
    fn softplus_never_overflows_in_f32() {
        for x in [-1e30f32, -100.0, 0.0, 88.0, 100.0, 1e30] {
            assert!(softplus(x).is_finite());
        }
        assert!(sigmoid(-1e30f32) >= 0.0 && sigmoid(1e30f32) <= 1.0);
    }

    #[test]
    fn expected_prob_examples() {
        let a = AlphaField::new(
            GridField::new(GridShape::new(&[1, 2]).unwrap(), 2, vec![1.6931, 1.6931, 3.0, 1.0])
                .unwrap(),
        )
        .unwrap();
        let pi = expected_prob(&a, EPSILON);
        assert!((pi.get(0, 0) - 0.5).abs() < 1e-8);
        assert!((pi.get(0, 1) - 0.5).abs() < 1e-8);
        assert!((pi.get(1, 0) - 0.75).abs() < 1e-8);
        assert!((pi.get(1, 1) - 0.25).abs() < 1e-8);
    }

    #[test]
    fn expected_prob_matches_per_location_oracle() {
        let mut rng = Rng::seed(3);
        let shape = GridShape::new(&[7, 9]).unwrap();
        let f = GridField::from_fn(shape, 3, |_, _| 1.0 + rng.uniform(0.0, 20.0)).unwrap();
        let a = AlphaField::new(f.clone()).unwrap();
        let pi = expected_prob(&a, EPSILON);
        for p in 0..f.locations() {
            let row = f.at(p);
            let s = row[0] + row[1] + row[2];
            for k in 0..3 {
                assert!((pi.get(p, k) - row[k] / (s + EPSILON)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn uncertainty_examples() {
        let a = AlphaField::new(
            GridField::new(GridShape::new(&[1, 2]).unwrap(), 2, vec![1.0, 1.0, 3.0, 1.0]).unwrap(),
        )
        .unwrap();
        let u = uncertainty(&a, EPSILON);
        assert!((u.values()[0] - 2.0 / (2.0 + EPSILON)).abs() < 1e-15);
        assert!((u.values()[1] - 0.5).abs() < 1e-8);

        let s = logits(&[0.0; 8], 2);
        let u = uncertainty(&alpha_from_logits(&s).unwrap(), EPSILON);
        for &v in u.values() {
            assert!((v - 1.0 / (1.0 + std::f64::consts::LN_2)).abs() < 1e-8);
            assert!((v - 0.59061).abs() < 1e-5);
        }
    }

    #[test]
    fn non_finite_logits_are_a_domain_error() {
        let mut s = logits(&[0.0, 0.0], 2);
        s.data_mut()[1] = f64::NAN;
        assert!(matches!(alpha_from_logits(&s), Err(Error::Domain(_))));
    }

    #[test]
    fn alpha_below_one_is_rejected() {
        let f = GridField::new(GridShape::new(&[1, 1]).unwrap(), 2, vec![0.5, 2.0]).unwrap();
        assert!(AlphaField::new(f).is_err());
    }

    #[test]
    fn logit_path_is_bit_identical_to_alpha_path() {
        let mut rng = Rng::seed(4);
        let s = GridField::from_fn(GridShape::new(&[6, 6]).unwrap(), 2, |_, _| {
            rng.uniform(-8.0, 8.0)
        })
        .unwrap();
        let a = uncertainty(&alpha_from_logits(&s).unwrap(), EPSILON);
        let b = uncertainty_of_logits(&s, EPSILON);
        for (x, y) in a.values().iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    proptest! {
        #[test]
        fn raising_a_logit_lowers_uncertainty(
            s0 in -20.0f64..20.0, s1 in -20.0f64..20.0, bump in 0.01f64..5.0, which in 0usize..2
        ) {
            let mut raised = [s0, s1];
            raised[which] += bump;
            let before = location_uncertainty(&[s0, s1], EPSILON);
            let after = location_uncertainty(&raised, EPSILON);
            prop_assert!(after < before);
            prop_assert!(after > 0.0 && before < 1.0);
        }

        #[test]
        fn uncertainty_ignores_channel_order(a in -30.0f64..30.0, b in -30.0f64..30.0, c in -30.0f64..30.0) {
            let u1 = location_uncertainty(&[a, b, c], EPSILON);
            let u2 = location_uncertainty(&[c, a, b], EPSILON);
            prop_assert!((u1 - u2).abs() <= 1e-15 * u1);
        }

        #[test]
        fn alpha_is_increasing_and_at_least_one(x in -50.0f64..50.0, dx in 1e-3f64..10.0) {
            prop_assert!(alpha(x) >= 1.0);
            prop_assert!(alpha(x + dx) >= alpha(x));
            // strict while softplus(x) is still resolvable next to 1
            if x > -30.0 {
                prop_assert!(alpha(x + dx) > alpha(x));
            }
        }

        #[test]
        fn probability_mass_is_just_below_one(a in 1.0f64..1e4, b in 1.0f64..1e4) {
            let f = GridField::new(GridShape::new(&[1, 1]).unwrap(), 2, vec![a, b]).unwrap();
            let pi = expected_prob(&AlphaField::new(f).unwrap(), EPSILON);
            let total = pi.get(0, 0) + pi.get(0, 1);
            prop_assert!(total < 1.0 + 1e-15 && total > 1.0 - 1e-6);
        }
    }
}
