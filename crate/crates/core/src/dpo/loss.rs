//! Pairwise logistic preference loss.
//!
//! ```text
//! margin = (log π(chosen) - log π_ref(chosen)) - (log π(rejected) - log π_ref(rejected))
//! loss   = -log σ(β · margin)
//! ```

use serde::{Deserialize, Serialize};

use super::DpoError;

/// Sequence log-probabilities of one preference pair under the trainable
/// policy and the frozen reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyLogProbs {
    pub chosen_policy: f64,
    pub rejected_policy: f64,
    pub chosen_reference: f64,
    pub rejected_reference: f64,
}

impl PolicyLogProbs {
    /// Implicit-reward margin.
    pub fn margin(&self) -> f64 {
        (self.chosen_policy - self.chosen_reference) - (self.rejected_policy - self.rejected_reference)
    }

    /// The same pair with chosen and rejected exchanged.
    pub fn swapped(&self) -> Self {
        PolicyLogProbs {
            chosen_policy: self.rejected_policy,
            rejected_policy: self.chosen_policy,
            chosen_reference: self.rejected_reference,
            rejected_reference: self.chosen_reference,
        }
    }

    fn check(&self, beta: f64) -> Result<(), DpoError> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(DpoError::InvalidConfig(format!("beta must be positive, got {beta}")));
        }
        let all = [
            self.chosen_policy,
            self.rejected_policy,
            self.chosen_reference,
            self.rejected_reference,
        ];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(DpoError::NonFiniteInput);
        }
        Ok(())
    }
}

/// Gradient of the loss. Reference terms are frozen and always zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoGrad {
    pub chosen_policy: f64,
    pub rejected_policy: f64,
    pub chosen_reference: f64,
    pub rejected_reference: f64,
}

/// `-log σ(z)` without overflow for large |z|.
pub fn neg_log_sigmoid(z: f64) -> f64 {
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_loss(lp: &PolicyLogProbs, beta: f64) -> Result<f64, DpoError> {
    lp.check(beta)?;
    Ok(neg_log_sigmoid(beta * lp.margin()))
}

pub fn dpo_grad(lp: &PolicyLogProbs, beta: f64) -> Result<DpoGrad, DpoError> {
    lp.check(beta)?;
    let weight = beta * sigmoid(-beta * lp.margin());
    Ok(DpoGrad {
        chosen_policy: -weight,
        rejected_policy: weight,
        chosen_reference: 0.0,
        rejected_reference: 0.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::LN_2;

    fn lp(cp: f64, rp: f64, cr: f64, rr: f64) -> PolicyLogProbs {
        PolicyLogProbs {
            chosen_policy: cp,
            rejected_policy: rp,
            chosen_reference: cr,
            rejected_reference: rr,
        }
    }

    #[test]
    fn zero_margin_is_ln2() {
        let l = dpo_loss(&lp(-3.0, -5.0, -3.0, -5.0), 0.1).unwrap();
        assert!((l - LN_2).abs() < 1e-15);
        let g = dpo_grad(&lp(-3.0, -5.0, -3.0, -5.0), 0.1).unwrap();
        assert!((g.chosen_policy + 0.05).abs() < 1e-15);
        assert!((g.rejected_policy - 0.05).abs() < 1e-15);
        assert_eq!(g.chosen_reference, 0.0);
        assert_eq!(g.rejected_reference, 0.0);
    }

    #[test]
    fn unit_scaled_margin() {
        // β·m = 1: ln(1 + e^-1), value from a 40-digit evaluation.
        let l = dpo_loss(&lp(-2.0, -12.0, -4.0, -4.0), 0.1).unwrap();
        assert!((l - 0.313_261_687_518_222_8).abs() < 1e-15, "{l}");
    }

    #[test]
    fn tails() {
        let big = dpo_loss(&lp(0.0, -1e6, 0.0, 0.0), 0.1).unwrap();
        assert!(big >= 0.0 && big < 1e-300);
        let huge = dpo_loss(&lp(-1e6, 0.0, 0.0, 0.0), 0.1).unwrap();
        assert!((huge - 1e5).abs() < 1e-6);
        assert!(huge.is_finite());
    }

    #[test]
    fn errors() {
        assert!(matches!(dpo_loss(&lp(f64::NAN, 0.0, 0.0, 0.0), 0.1), Err(DpoError::NonFiniteInput)));
        assert!(matches!(dpo_grad(&lp(0.0, f64::NEG_INFINITY, 0.0, 0.0), 0.1), Err(DpoError::NonFiniteInput)));
        assert!(matches!(dpo_loss(&lp(0.0, 0.0, 0.0, 0.0), 0.0), Err(DpoError::InvalidConfig(_))));
        assert!(matches!(dpo_loss(&lp(0.0, 0.0, 0.0, 0.0), -0.1), Err(DpoError::InvalidConfig(_))));
    }

    proptest! {
        #[test]
        fn strictly_decreasing_in_margin(m1 in -50.0f64..50.0, dm in 1e-3f64..10.0) {
            let a = dpo_loss(&lp(m1, 0.0, 0.0, 0.0), 0.1).unwrap();
            let b = dpo_loss(&lp(m1 + dm, 0.0, 0.0, 0.0), 0.1).unwrap();
            prop_assert!(b < a);
            prop_assert!(b > 0.0);
        }

        #[test]
        fn antisymmetry(cp in -30.0f64..0.0, rp in -30.0f64..0.0, cr in -30.0f64..0.0, rr in -30.0f64..0.0) {
            let x = lp(cp, rp, cr, rr);
            let beta = 0.1;
            let l = dpo_loss(&x, beta).unwrap();
            let ls = dpo_loss(&x.swapped(), beta).unwrap();
            prop_assert!((x.swapped().margin() + x.margin()).abs() < 1e-12);
            prop_assert!((ls - neg_log_sigmoid(-beta * x.margin())).abs() < 1e-12);
            prop_assert!(l + ls >= 2.0 * std::f64::consts::LN_2 - 1e-15);
        }

        #[test]
        fn shift_invariance(cp in -30.0f64..0.0, rp in -30.0f64..0.0, cr in -30.0f64..0.0, rr in -30.0f64..0.0, c in -100.0f64..100.0) {
            let a = dpo_loss(&lp(cp, rp, cr, rr), 0.1).unwrap();
            let b = dpo_loss(&lp(cp + c, rp + c, cr + c, rr + c), 0.1).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
