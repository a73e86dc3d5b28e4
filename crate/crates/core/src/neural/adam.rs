use super::{Gradients, MlpNet};
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 3e-4;

/// Adam with bias correction (Kingma & Ba).
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub first_moment: Gradients,
    pub second_moment: Gradients,
}

impl AdamState {
    pub fn new(net: &MlpNet, lr: f64) -> Self {
        Self {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            first_moment: Gradients::zeros_like(net),
            second_moment: Gradients::zeros_like(net),
        }
    }
}

/// One Adam update of `net` in place. Rejects non-finite gradients before
/// touching any state.
pub fn adam_step(state: &mut AdamState, net: &mut MlpNet, grads: &Gradients) -> Result<()> {
    if grads.layers.len() != net.layers().len() {
        return Err(Error::ShapeMismatch("gradient layer count differs from net".into()));
    }
    for (i, (g, l)) in grads.layers.iter().zip(net.layers()).enumerate() {
        if g.weight.shape() != l.weight.shape() || g.bias.len() != l.bias.len() {
            return Err(Error::ShapeMismatch(format!("gradient layer {i} shape differs")));
        }
        if !g.weight.is_finite() || g.bias.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { layer: i });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let (lr, eps) = (state.lr, state.eps);

    let params = net.tensors_mut();
    let moments = state
        .first_moment
        .tensors_mut()
        .zip(state.second_moment.tensors_mut());
    for ((p, g), (m, v)) in params.zip(grads.tensors()).zip(moments) {
        for i in 0..p.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
