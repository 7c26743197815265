//! Tabular softmax policies.
//!
//! Logits and policies are both `|S| x |A|` matrices; row `s` holds the
//! action distribution at state `s`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::mdp::{discounted_visitation, TabularMdp};

/// Row-stochastic `|S| x |A|` matrix of action probabilities.
pub type PolicyTable = DMatrix<f64>;

/// Per state-action logits.
pub type Logits = DMatrix<f64>;

/// Softmax policy `π_θ(a|s) = exp θ(s,a) / Σ_b exp θ(s,b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    theta: Logits,
    pi: PolicyTable,
}

impl SoftmaxPolicy {
    pub fn new(theta: Logits) -> Result<Self> {
        let pi = softmax(&theta)?;
        Ok(Self { theta, pi })
    }

    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        let theta = Logits::zeros(num_states, num_actions);
        let pi = PolicyTable::from_element(num_states, num_actions, 1.0 / num_actions as f64);
        Self { theta, pi }
    }

    pub fn theta(&self) -> &Logits {
        &self.theta
    }

    pub fn pi(&self) -> &PolicyTable {
        &self.pi
    }

    pub fn into_parts(self) -> (Logits, PolicyTable) {
        (self.theta, self.pi)
    }
}

/// Row-wise softmax with max subtraction. Rejects non-finite logits.
pub fn softmax(theta: &Logits) -> Result<PolicyTable> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax logits".into()));
    }
    let mut pi = theta.clone();
    for s in 0..theta.nrows() {
        softmax_row_in_place(&mut pi, s);
    }
    Ok(pi)
}

fn softmax_row_in_place(m: &mut DMatrix<f64>, s: usize) {
    let ncols = m.ncols();
    let max = (0..ncols).map(|a| m[(s, a)]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for a in 0..ncols {
        let e = (m[(s, a)] - max).exp();
        m[(s, a)] = e;
        total += e;
    }
    for a in 0..ncols {
        m[(s, a)] /= total;
    }
}

/// Action distribution at a single state, computed from that row of logits only.
pub fn softmax_row(theta: &Logits, s: usize, out: &mut [f64]) {
    let ncols = theta.ncols();
    debug_assert_eq!(out.len(), ncols);
    let max = (0..ncols).map(|a| theta[(s, a)]).fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (a, o) in out.iter_mut().enumerate() {
        *o = (theta[(s, a)] - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `∇_θ log π_θ(a|s)`: nonzero only in row `s`, where entry `a'` is `1[a = a'] - π(a'|s)`.
pub fn log_policy_grad(pi: &PolicyTable, s: usize, a: usize) -> Result<DMatrix<f64>> {
    if s >= pi.nrows() || a >= pi.ncols() {
        return Err(Error::InvalidArgument(format!(
            "state-action ({s}, {a}) out of range for {}x{} policy",
            pi.nrows(),
            pi.ncols()
        )));
    }
    let mut g = DMatrix::zeros(pi.nrows(), pi.ncols());
    for b in 0..pi.ncols() {
        g[(s, b)] = if a == b { 1.0 } else { 0.0 } - pi[(s, b)];
    }
    Ok(g)
}

/// Entropy `E(π, s) = -Σ_a π(a|s) log π(a|s)` with `0 log 0 = 0`.
pub fn entropy(pi: &PolicyTable, s: usize) -> f64 {
    entropy_of(pi.row(s).iter().copied())
}

pub(crate) fn entropy_of(probs: impl Iterator<Item = f64>) -> f64 {
    -probs.filter(|&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Per-state entropies as a vector.
pub fn entropies(pi: &PolicyTable) -> DVector<f64> {
    DVector::from_fn(pi.nrows(), |s, _| entropy(pi, s))
}

/// `E_{s ~ d_ρ^π}[E(π, s)]`.
pub fn weighted_entropy(mdp: &TabularMdp, pi: &PolicyTable) -> Result<f64> {
    let d = discounted_visitation(mdp, pi)?;
    Ok(d.dot(&entropies(pi)))
}

/// Gradient of `E(π_θ, s)` with respect to the logits: row `s` holds
/// `-π(a|s) (log π(a|s) + E(π, s))`, every other row is zero.
pub fn entropy_grad(pi: &PolicyTable, s: usize) -> DMatrix<f64> {
    let mut g = DMatrix::zeros(pi.nrows(), pi.ncols());
    let e = entropy(pi, s);
    for a in 0..pi.ncols() {
        let p = pi[(s, a)];
        if p > 0.0 {
            g[(s, a)] = -p * (p.ln() + e);
        }
    }
    g
}

/// Pulls a gradient with respect to the policy table back to the logits
/// through the softmax Jacobian: `∂/∂θ(s,a) = π(a|s) (g(s,a) - Σ_b π(b|s) g(s,b))`.
pub fn softmax_pullback(pi: &PolicyTable, grad_pi: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(pi.nrows(), pi.ncols());
    for s in 0..pi.nrows() {
        let mean: f64 = (0..pi.ncols()).map(|b| pi[(s, b)] * grad_pi[(s, b)]).sum();
        for a in 0..pi.ncols() {
            out[(s, a)] = pi[(s, a)] * (grad_pi[(s, a)] - mean);
        }
    }
    out
}

/// Subtracts the per-state mean from every row. Leaves the policy unchanged.
pub fn recenter(theta: &mut Logits) {
    for s in 0..theta.nrows() {
        let mean = theta.row(s).mean();
        for a in 0..theta.ncols() {
            theta[(s, a)] -= mean;
        }
    }
}

/// Logits that encode `pi` exactly (`θ = log π`). Zero probabilities are rejected.
pub fn logits_of(pi: &PolicyTable) -> Result<Logits> {
    if pi.iter().any(|&p| p <= 0.0 || !p.is_finite()) {
        return Err(Error::InvalidArgument("policy must be strictly positive to take logits".into()));
    }
    Ok(pi.map(f64::ln))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_logits_give_uniform() {
        let pi = softmax(&Logits::zeros(3, 4)).unwrap();
        assert!(pi.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn constant_row_is_uniform() {
        let theta = Logits::from_row_slice(1, 4, &[7.5; 4]);
        let pi = softmax(&theta).unwrap();
        assert!(pi.iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn log_weights_normalize() {
        let theta = Logits::from_row_slice(1, 4, &[1f64.ln(), 2f64.ln(), 3f64.ln(), 4f64.ln()]);
        let pi = softmax(&theta).unwrap();
        for (a, want) in [0.1, 0.2, 0.3, 0.4].iter().enumerate() {
            assert!((pi[(0, a)] - want).abs() < 1e-15);
        }
    }

    #[test]
    fn non_finite_logits_rejected() {
        let theta = Logits::from_row_slice(1, 2, &[0.0, f64::NAN]);
        assert!(matches!(softmax(&theta), Err(Error::NonFinite(_))));
        let theta = Logits::from_row_slice(1, 2, &[0.0, f64::INFINITY]);
        assert!(softmax(&theta).is_err());
    }

    #[test]
    fn huge_logits_do_not_overflow() {
        let theta = Logits::from_row_slice(1, 3, &[1000.0, 999.0, -1000.0]);
        let pi = softmax(&theta).unwrap();
        assert!((pi.row(0).sum() - 1.0).abs() < 1e-15);
        assert!((pi[(0, 0)] / pi[(0, 1)] - 1f64.exp()).abs() < 1e-10);
    }

    #[test]
    fn uniform_log_grad_entries() {
        let pi = PolicyTable::from_element(3, 4, 0.25);
        let g = log_policy_grad(&pi, 1, 2).unwrap();
        for s in 0..3 {
            for a in 0..4 {
                let want = match (s, a) {
                    (1, 2) => 0.75,
                    (1, _) => -0.25,
                    _ => 0.0,
                };
                assert_eq!(g[(s, a)], want);
            }
        }
    }

    #[test]
    fn saturated_log_grad_vanishes() {
        let theta = Logits::from_row_slice(1, 3, &[40.0, 0.0, 0.0]);
        let pi = softmax(&theta).unwrap();
        let g = log_policy_grad(&pi, 0, 0).unwrap();
        assert!(g.norm() < 1e-15);
    }

    #[test]
    fn log_grad_index_out_of_range() {
        let pi = PolicyTable::from_element(2, 2, 0.5);
        assert!(log_policy_grad(&pi, 2, 0).is_err());
        assert!(log_policy_grad(&pi, 0, 5).is_err());
    }

    #[test]
    fn entropy_values() {
        let pi = PolicyTable::from_element(1, 4, 0.25);
        assert!((entropy(&pi, 0) - 4f64.ln()).abs() < 1e-15);
        let det = PolicyTable::from_row_slice(1, 3, &[0.0, 1.0, 0.0]);
        assert_eq!(entropy(&det, 0), 0.0);
        let row = PolicyTable::from_row_slice(1, 4, &[0.1, 0.2, 0.3, 0.4]);
        let want = -(0.1 * 0.1f64.ln() + 0.2 * 0.2f64.ln() + 0.3 * 0.3f64.ln() + 0.4 * 0.4f64.ln());
        assert!((entropy(&row, 0) - want).abs() < 1e-15);
        assert!((want - 1.279854225833).abs() < 1e-9);
    }

    #[test]
    fn recenter_keeps_policy() {
        let mut theta = Logits::from_row_slice(2, 3, &[5.0, 6.0, 9.0, -2.0, 0.5, 1.0]);
        let before = softmax(&theta).unwrap();
        recenter(&mut theta);
        let after = softmax(&theta).unwrap();
        assert!((before - after).amax() < 1e-15);
        assert!(theta.row(0).sum().abs() < 1e-12);
    }

    fn logits(nrows: usize, ncols: usize) -> impl Strategy<Value = Logits> {
        proptest::collection::vec(-6.0f64..6.0, nrows * ncols)
            .prop_map(move |v| Logits::from_row_slice(nrows, ncols, &v))
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(theta in logits(4, 3), shift in -50.0f64..50.0) {
            let pi = softmax(&theta).unwrap();
            for s in 0..4 {
                prop_assert!((pi.row(s).sum() - 1.0).abs() < 1e-12);
                prop_assert!(pi.row(s).iter().all(|&p| p > 0.0));
            }
            let shifted = theta.map(|v| v + shift);
            prop_assert!((softmax(&shifted).unwrap() - &pi).amax() < 1e-12);
        }

        #[test]
        fn log_grad_is_bounded_and_row_local(theta in logits(3, 4), s in 0usize..3, a in 0usize..4) {
            let pi = softmax(&theta).unwrap();
            let g = log_policy_grad(&pi, s, a).unwrap();
            let l1: f64 = g.iter().map(|v| v.abs()).sum();
            prop_assert!(l1 <= 2.0 + 1e-12);
            prop_assert!(g.row(s).sum().abs() < 1e-12);
            for other in (0..3).filter(|&o| o != s) {
                prop_assert!(g.row(other).iter().all(|&v| v == 0.0));
            }
        }

        #[test]
        fn entropy_grad_matches_finite_differences(theta in logits(2, 3), s in 0usize..2) {
            let pi = softmax(&theta).unwrap();
            let g = entropy_grad(&pi, s);
            let h = 1e-6;
            for a in 0..3 {
                let mut plus = theta.clone();
                plus[(s, a)] += h;
                let mut minus = theta.clone();
                minus[(s, a)] -= h;
                let fd = (entropy(&softmax(&plus).unwrap(), s) - entropy(&softmax(&minus).unwrap(), s)) / (2.0 * h);
                prop_assert!((fd - g[(s, a)]).abs() < 1e-8);
            }
        }
    }
}
