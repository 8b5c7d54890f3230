use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) const BCE_EPS: f64 = 1e-12;

/// Mean BCE of probabilities against 0/1 targets, clamped at `1e-12`.
pub fn bce_value(p: &[f64], targets: &[f64]) -> f64 {
    crate::tensor::bce_value(p, targets, BCE_EPS)
}

/// Pushes selection probabilities of the top-k tokens towards one and the
/// rest towards zero.
pub fn aux_loss(tape: &mut Tape, probs: Var, selected: &[bool]) -> Result<Var> {
    let targets: Vec<f64> = selected.iter().map(|&s| f64::from(u8::from(s))).collect();
    tape.bce(probs, &targets, BCE_EPS)
}

/// BCE of an auxiliary head against the main router's top-k targets. The
/// auxiliary head must have been fed detached inputs, so no gradient can
/// reach the main router through this term.
pub fn aux_router_loss(tape: &mut Tape, aux_probs: Var, selected: &[bool]) -> Result<Var> {
    aux_loss(tape, aux_probs, selected)
}

/// `α Σ_i f_i P_i` with `f_i = (N_r/T)·#{t → i}` and `P_i = mean_t g_t^i`.
/// `assignments` are zero-based expert indices.
pub fn balancing_loss(tape: &mut Tape, probs: Var, assignments: &[usize], alpha: f64) -> Result<Var> {
    let (t, n) = (tape.value(probs).rows(), tape.value(probs).cols());
    if assignments.len() != t || t == 0 {
        return Err(Error::shape("balancing_loss", format!("{t} rows vs {} assignments", assignments.len())));
    }
    let f = load_fractions(assignments, n)?;
    let w = Tensor::from_fn(&[t, n], |i| alpha * f[i % n] / t as f64);
    let w = tape.constant(w);
    let prod = tape.mul(probs, w)?;
    tape.sum(prod)
}

pub fn balancing_loss_value(probs: &[f64], n_experts: usize, assignments: &[usize], alpha: f64) -> Result<f64> {
    let t = assignments.len();
    let f = load_fractions(assignments, n_experts)?;
    let p: Vec<f64> = (0..n_experts)
        .map(|i| probs.chunks(n_experts).map(|row| row[i]).sum::<f64>() / t as f64)
        .collect();
    Ok(alpha * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>())
}

fn load_fractions(assignments: &[usize], n: usize) -> Result<Vec<f64>> {
    let t = assignments.len() as f64;
    let mut f = vec![0.0; n];
    for &a in assignments {
        if a >= n {
            return Err(Error::Index {
                what: "expert assignment",
                index: a,
                limit: n,
            });
        }
        f[a] += n as f64 / t;
    }
    Ok(f)
}

/// `(1/B) Σ (log Σ_j e^{x_j})²` over rows of router logits.
pub fn z_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    let lse = tape.log_sum_exp_rows(logits)?;
    let sq = tape.mul(lse, lse)?;
    tape.mean(sq)
}

pub fn z_loss_value(logits: &[f64], width: usize) -> f64 {
    let rows = logits.len() / width;
    logits
        .chunks(width)
        .map(|r| {
            let m = r.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            lse * lse
        })
        .sum::<f64>()
        / rows as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn balancing_hand_values() {
        let uniform = vec![1.0 / 3.0; 9];
        let v = balancing_loss_value(&uniform, 3, &[0, 1, 2], 0.1).unwrap();
        assert!((v - 0.1).abs() < 1e-15);
        let onehot = [1.0, 0.0, 0.0].repeat(4);
        let v = balancing_loss_value(&onehot, 3, &[0; 4], 0.1).unwrap();
        assert!((v - 0.3).abs() < 1e-15);
        assert_eq!(balancing_loss_value(&onehot, 3, &[0; 4], 0.0).unwrap(), 0.0);
    }

    #[test]
    fn z_loss_hand_values() {
        assert!((z_loss_value(&[0.0; 3], 3) - 3f64.ln().powi(2)).abs() < 1e-15);
        assert_eq!(z_loss_value(&[0.0], 1), 0.0);
    }

    #[test]
    fn aux_loss_limits() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![3, 1], vec![1.0, 0.0, 1.0]).unwrap());
        let l = aux_loss(&mut tape, p, &[true, false, true]).unwrap();
        assert!(tape.value(l).item() < 1e-11);
        let half = tape.constant(Tensor::full(&[4, 1], 0.5));
        let l = aux_loss(&mut tape, half, &[true, false, true, true]).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-15);
    }
}
