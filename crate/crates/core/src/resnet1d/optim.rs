use serde::{Deserialize, Serialize};

use super::TrainConfig;

fn log_softmax(z: &[f64; 2]) -> [f64; 2] {
    let m = z[0].max(z[1]);
    let lse = m + ((z[0] - m).exp() + (z[1] - m).exp()).ln();
    [z[0] - lse, z[1] - lse]
}

/// Probability of the warning class.
pub fn softmax_pos(z: &[f64; 2]) -> f64 {
    1.0 / (1.0 + (z[0] - z[1]).exp())
}

/// Mean over the batch of `w_i * -log softmax(z_i)[y_i]`, `w_i = lambda_pos` for positives.
pub fn weighted_ce(logits: &[[f64; 2]], labels: &[u8], lambda_pos: f64) -> f64 {
    weighted_ce_grad(logits, labels, lambda_pos).0
}

pub(super) fn weighted_ce_grad(logits: &[[f64; 2]], labels: &[u8], lambda_pos: f64) -> (f64, Vec<[f64; 2]>) {
    let n = logits.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (z, &y) in logits.iter().zip(labels) {
        let w = if y == 1 { lambda_pos } else { 1.0 };
        let ls = log_softmax(z);
        loss += w * -ls[y as usize];
        let p = [ls[0].exp(), ls[1].exp()];
        let onehot = [(y == 0) as u8 as f64, (y == 1) as u8 as f64];
        grad.push([w / n * (p[0] - onehot[0]), w / n * (p[1] - onehot[1])]);
    }
    (loss / n, grad)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One Adam step with decoupled weight decay on the `decay`-flagged entries.
pub fn adam_step(params: &mut [f64], grads: &[f64], decay: &[bool], state: &mut AdamState, cfg: &TrainConfig) {
    state.t += 1;
    let bc1 = 1.0 - BETA1.powi(state.t as i32);
    let bc2 = 1.0 - BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        if decay[i] {
            params[i] -= cfg.lr * cfg.weight_decay * params[i];
        }
        let g = grads[i];
        state.m[i] = BETA1 * state.m[i] + (1.0 - BETA1) * g;
        state.v[i] = BETA2 * state.v[i] + (1.0 - BETA2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + ADAM_EPS);
    }
}
