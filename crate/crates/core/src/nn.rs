//! Small reusable layers built on the tape.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `x W + b` with `W: d_in x d_out`, Xavier-uniform initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(
            alloc::format!("{name}.weight"),
            group,
            xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
        );
        let bias = bias.then(|| store.add(alloc::format!("{name}.bias"), group, Tensor::zeros(&[1, d_out])));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(b);
                tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Per-row normalization with learnable `1 x d` scale and shift.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, d: usize, eps: f64) -> Self {
        let gamma = store.add(alloc::format!("{name}.gamma"), group, Tensor::full(&[1, d], 1.0));
        let beta = store.add(alloc::format!("{name}.beta"), group, Tensor::zeros(&[1, d]));
        Self { gamma, beta, eps }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gamma);
        let b = tape.param(self.beta);
        tape.layer_norm(x, g, b, self.eps)
    }
}

/// Inverted dropout: in training mode multiplies by a Bernoulli keep-mask
/// scaled by `1 / keep_prob`; the identity otherwise.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    x: Var,
    keep_prob: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    if !(keep_prob > 0.0 && keep_prob <= 1.0) {
        return Err(contract("dropout keep probability must lie in (0, 1]"));
    }
    let Some(rng) = rng else {
        return Ok(x);
    };
    if keep_prob == 1.0 {
        return Ok(x);
    }
    let shape = tape.value(x).shape().to_vec();
    let mut mask = Tensor::zeros(&shape);
    for m in mask.data_mut() {
        if rng.random::<f64>() < keep_prob {
            *m = 1.0 / keep_prob;
        }
    }
    let m = tape.constant(mask);
    tape.mul(x, m)
}

/// Splits `x` into `heads` equal column blocks.
pub fn split_heads(tape: &mut Tape<'_>, x: Var, heads: usize) -> Result<Vec<Var>> {
    let d = tape.value(x).cols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(contract(alloc::format!("width {d} is not divisible by {heads} heads")));
    }
    let dk = d / heads;
    (0..heads).map(|h| tape.slice_cols(x, h * dk, (h + 1) * dk)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_computes_affine_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", ParamGroup::Other, 2, 2, true, &mut rng);
        *store.value_mut(lin.weight) = Tensor::matrix(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]);
        *store.value_mut(lin.bias.unwrap()) = Tensor::matrix(1, 2, alloc::vec![0.5, -0.5]);
        let mut t = Tape::with_params(&store);
        let x = t.constant(Tensor::matrix(1, 2, alloc::vec![1.0, 1.0]));
        let y = lin.forward(&mut t, x).unwrap();
        assert_eq!(t.value(y).data(), &[4.5, 5.5]);
        assert!(store.find("l.weight").is_some() && store.find("l.bias").is_some());
    }

    #[test]
    fn dropout_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let x = t.leaf(Tensor::full(&[50, 40], 1.0));
        let eval = dropout::<ChaCha8Rng>(&mut t, x, 0.8, None).unwrap();
        assert_eq!(eval, x);
        let same = dropout(&mut t, x, 1.0, Some(&mut rng)).unwrap();
        assert_eq!(same, x);
        let y = dropout(&mut t, x, 0.8, Some(&mut rng)).unwrap();
        let v = t.value(y);
        assert!(v.data().iter().all(|&a| a == 0.0 || a == 1.25));
        let kept = v.data().iter().filter(|&&a| a > 0.0).count() as f64 / 2000.0;
        assert!((kept - 0.8).abs() < 0.05, "{kept}");
        assert!(dropout(&mut t, x, 0.0, Some(&mut rng)).is_err());
    }

    #[test]
    fn split_heads_partitions_columns() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::matrix(1, 4, alloc::vec![1.0, 2.0, 3.0, 4.0]));
        let hs = split_heads(&mut t, x, 2).unwrap();
        assert_eq!(t.value(hs[1]).data(), &[3.0, 4.0]);
        assert!(split_heads(&mut t, x, 3).is_err());
    }
}
