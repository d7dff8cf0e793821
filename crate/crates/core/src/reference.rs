//! Naive nested-loop reference arithmetic for tests. Nothing here touches
//! the graph or the kernels.

use crate::numerics::{ParamStore, Tensor};
use crate::numerics::ParamId;

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>) -> Mat {
    t.rows().map(|r| r.to_vec()).collect()
}

pub fn vec_of(store: &ParamStore<f64>, id: ParamId) -> Vec<f64> {
    store.value(id).data().to_vec()
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-6).sqrt();
    x.iter().zip(gamma).zip(beta).map(|((v, g), b)| (v - mean) * r * g + b).collect()
}

pub fn affine(x: &[f64], w: &Tensor<f64>, b: &[f64]) -> Vec<f64> {
    let (fi, fo) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), fi);
    (0..fo).map(|j| b[j] + (0..fi).map(|i| x[i] * w.at(&[i, j])).sum::<f64>()).collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// Multi-head attention of already-projected queries over keys/values;
/// returns head-concatenated outputs and weights `[head][query][key]`.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> (Mat, Vec<Mat>) {
    let c = q[0].len();
    let d = c / heads;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![vec![0.0; c]; q.len()];
    let mut weights = vec![vec![vec![]; q.len()]; heads];
    for h in 0..heads {
        let r = h * d..(h + 1) * d;
        for (i, qi) in q.iter().enumerate() {
            let logits: Vec<f64> = k.iter().map(|kj| dot(&qi[r.clone()], &kj[r.clone()]) * scale).collect();
            let w = softmax(&logits);
            for (j, vj) in v.iter().enumerate() {
                for t in r.clone() {
                    out[i][t] += w[j] * vj[t];
                }
            }
            weights[h][i] = w;
        }
    }
    (out, weights)
}
