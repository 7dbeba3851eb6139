use crate::params::{Gradients, ParamStore};
use crate::{NdError, Tensor};

/// Adam with bias correction, decoupled weight decay, and global-norm
/// gradient clipping over the optimizer's parameter set.
pub struct AdamOpt {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl AdamOpt {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        let v = store.ids().map(|id| Tensor::zeros(store.get(id).shape().to_vec())).collect();
        AdamOpt {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-5,
            weight_decay: 1e-6,
            clip_norm: 100.0,
            m,
            v,
            step: 0,
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn with_clip_norm(mut self, clip: f64) -> Self {
        self.clip_norm = clip;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    /// Apply one update to every trainable parameter of `store`. Parameters
    /// without a gradient entry (detached from the loss) receive a zero
    /// gradient; frozen parameters are skipped entirely.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NdError> {
        // NaN scan and global norm, trainable parameters only.
        let mut sq_norm = 0.0;
        for id in store.ids() {
            if !store.trainable(id) {
                continue;
            }
            if let Some(g) = grads.get(store, id) {
                for &x in g.data() {
                    if x.is_nan() {
                        return Err(NdError::NanGradient(store.name(id).to_string()));
                    }
                    sq_norm += x * x;
                }
            }
        }
        let norm = sq_norm.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);

        for id in store.ids() {
            if !store.trainable(id) {
                continue;
            }
            let grad = grads.get(store, id).map(|t| t.data().to_vec());
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.get_mut(id).data_mut();
            for j in 0..p.len() {
                let g = scale * grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                p[j] -= self.lr * (mhat / (vhat.sqrt() + self.eps) + self.weight_decay * p[j]);
            }
        }
        Ok(())
    }

    /// Optimizer state for checkpointing: (first moments, second moments, step).
    pub fn state(&self) -> (Vec<Tensor>, Vec<Tensor>, u64) {
        (self.m.clone(), self.v.clone(), self.step)
    }

    pub fn restore(&mut self, m: Vec<Tensor>, v: Vec<Tensor>, step: u64) {
        assert_eq!(m.len(), self.m.len(), "adam restore: moment count mismatch");
        assert_eq!(v.len(), self.v.len(), "adam restore: moment count mismatch");
        self.m = m;
        self.v = v;
        self.step = step;
    }
}
