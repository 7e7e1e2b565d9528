use alloc::vec::Vec;

use crate::error::{contract, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Symmetrized NT-Xent over two views `z1`, `z2` (`B x d` each).
///
/// The `2B` rows are L2-normalized; each row's positive is the same node in
/// the other view and its denominator runs over the other `2B - 1` rows. The
/// loss is the mean over all `2B` anchors.
pub fn nt_xent_loss(tape: &mut Tape<'_>, z1: Var, z2: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(contract("temperature must be positive"));
    }
    let (s1, s2) = (tape.value(z1).shape().to_vec(), tape.value(z2).shape().to_vec());
    if s1 != s2 || s1.len() != 2 || s1[0] == 0 {
        return Err(crate::Error::Shape {
            op: "nt_xent",
            lhs: s1,
            rhs: s2,
        });
    }
    let b = s1[0];
    for v in [z1, z2] {
        let t = tape.value(v);
        if (0..t.rows()).any(|i| t.row(i).iter().all(|&x| x == 0.0)) {
            return Err(contract("zero-norm embedding: cosine similarity undefined"));
        }
    }
    let z = tape.concat_rows(&[z1, z2])?;
    let sq = tape.mul(z, z)?;
    let norms = tape.sum_cols(sq)?;
    let inv = tape.powf(norms, -0.5);
    let zn = tape.mul(z, inv)?;
    let znt = tape.transpose(zn)?;
    let sim = tape.matmul(zn, znt)?;
    let logits = tape.scale(sim, 1.0 / tau);
    let mut self_mask = Tensor::zeros(&[2 * b, 2 * b]);
    for i in 0..2 * b {
        self_mask.set(i, i, f64::NEG_INFINITY);
    }
    let self_mask = tape.constant(self_mask);
    let logits = tape.add(logits, self_mask)?;
    let log_probs = tape.log_softmax(logits)?;
    let positives: Vec<usize> = (0..2 * b).map(|i| if i < b { i + b } else { i - b }).collect();
    let picked = tape.pick_per_row(log_probs, &positives)?;
    let mean = tape.mean(picked);
    Ok(tape.scale(mean, -1.0))
}

/// Mean over rows of `-sum_c t_c log p_c` with the smoothed target
/// `t = (1 - s) * one_hot(label) + s / C`.
pub fn label_smoothed_ce(tape: &mut Tape<'_>, probs: Var, labels: &[usize], smoothing: f64) -> Result<Var> {
    if !(0.0..1.0).contains(&smoothing) {
        return Err(contract("label smoothing must lie in [0, 1)"));
    }
    let (n, c) = (tape.value(probs).rows(), tape.value(probs).cols());
    if labels.len() != n || n == 0 {
        return Err(contract(alloc::format!("{} labels for {n} probability rows", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(contract(alloc::format!("label {bad} outside {c} classes")));
    }
    let logp = tape.log(probs);
    let picked = tape.pick_per_row(logp, labels)?;
    let mut per_row = tape.scale(picked, 1.0 - smoothing);
    // Skipping the uniform term at s = 0 keeps log(0) of other classes out.
    if smoothing > 0.0 {
        let all = tape.sum_cols(logp)?;
        let uniform = tape.scale(all, smoothing / c as f64);
        per_row = tape.add(per_row, uniform)?;
    }
    let mean = tape.mean(per_row);
    Ok(tape.scale(mean, -1.0))
}
