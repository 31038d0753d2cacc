use super::tensor::Tensor;

/// First/second moment buffers for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Moments {
    pub fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update in place. The per-parameter step counter lives in the
/// moments so parameters updated on different schedules stay correct.
pub fn adam_step(
    param: &mut Tensor,
    grad: &Tensor,
    moments: &mut Moments,
    lr: f64,
    cfg: &AdamConfig,
) {
    assert_eq!(param.data.len(), grad.data.len());
    assert_eq!(param.data.len(), moments.m.len());
    moments.t += 1;
    let t = moments.t as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    for i in 0..param.data.len() {
        let g = grad.data[i];
        moments.m[i] = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        moments.v[i] = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = moments.m[i] / bc1;
        let v_hat = moments.v[i] / bc2;
        param.data[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
}
