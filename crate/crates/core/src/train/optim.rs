use alloc::vec::Vec;

use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tape::ParamGrads;
use crate::tensor::Tensor;

/// Learning rate and decoupled weight decay of one parameter group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupHyper {
    pub lr: f64,
    pub weight_decay: f64,
}

/// AdamW with bias correction and per-group hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Hyperparameters for the graph, text, and other groups.
    pub groups: [GroupHyper; 3],
    pub step_count: u64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
}

impl AdamW {
    pub fn new(groups: [GroupHyper; 3]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            groups,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Every group shares one learning rate and weight decay.
    pub fn uniform(lr: f64, weight_decay: f64) -> Self {
        Self::new([GroupHyper { lr, weight_decay }; 3])
    }

    pub fn hyper(&self, group: ParamGroup) -> GroupHyper {
        match group {
            ParamGroup::Graph => self.groups[0],
            ParamGroup::Text => self.groups[1],
            ParamGroup::Other => self.groups[2],
        }
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.first.get(id.index()).and_then(Option::as_ref)
    }

    /// One update of every parameter that has a gradient. Learning rates
    /// are multiplied by `lr_scale`:
    /// `p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, lr_scale: f64) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - libm::pow(self.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(self.beta2, f64::from(t));
        for (id, g) in grads.iter() {
            let hyper = self.hyper(store.get(id).group);
            let lr = hyper.lr * lr_scale;
            let m = self.first[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second[id.index()].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let p = store.value_mut(id);
            for k in 0..g.numel() {
                let gk = g.data()[k];
                let mk = self.beta1 * m.data()[k] + (1.0 - self.beta1) * gk;
                let vk = self.beta2 * v.data()[k] + (1.0 - self.beta2) * gk * gk;
                m.data_mut()[k] = mk;
                v.data_mut()[k] = vk;
                let m_hat = mk / bc1;
                let v_hat = vk / bc2;
                let pk = p.data()[k];
                p.data_mut()[k] = pk - lr * (m_hat / (libm::sqrt(v_hat) + self.eps) + hyper.weight_decay * pk);
            }
        }
    }
}

/// Rescales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamGrads, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.scale_in_place(scale);
        }
    }
    norm
}
