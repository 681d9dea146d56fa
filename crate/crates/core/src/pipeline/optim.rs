use crate::autodiff::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// AdamW with decoupled weight decay, bound to one parameter store. The
/// gradient it consumes is the sum of both channels. Decay applies to
/// matrices only, not to gains, biases or other vectors.
#[derive(Clone, Debug)]
pub struct AdamW<S> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    moments: Vec<(Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, lr: f64) {
        for (_, p) in store.iter().skip(self.moments.len()) {
            let shape = p.value.shape();
            self.moments
                .push((Tensor::zeros(shape), Tensor::zeros(shape)));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((_, p), (m, v)) in store.iter_mut().zip(self.moments.iter_mut()) {
            if !p.trainable {
                continue;
            }
            let decay = if p.value.shape().len() == 2 {
                lr * self.weight_decay
            } else {
                0.0
            };
            let ce = p.grad_ce.data();
            let aux = p.grad_aux.data();
            for i in 0..p.value.len() {
                let g = ce[i].as_f64() + aux[i].as_f64();
                let mi = b1 * m.data()[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v.data()[i].as_f64() + (1.0 - b2) * g * g;
                m.data_mut()[i] = S::of(mi);
                v.data_mut()[i] = S::of(vi);
                let update = (mi / c1) / ((vi / c2).sqrt() + eps);
                let w = p.value.data()[i].as_f64();
                p.value.data_mut()[i] = S::of(w - lr * update - decay * w);
            }
        }
    }
}

/// Linear warm-up over the first 10% of training, then linear decay to 0.
pub fn lr_schedule(t: f64, peak: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    if t <= 0.1 {
        peak * t / 0.1
    } else {
        peak * (1.0 - t) / 0.9
    }
}
