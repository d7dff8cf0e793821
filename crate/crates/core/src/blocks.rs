//! Transformer building blocks recorded on a [`Graph`].

use crate::numerics::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::rng::{truncated_normal, Prng};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Multi-head attention projections. `heads · head_dim == dim`.
#[derive(Clone, Copy, Debug)]
pub struct MhsaParams {
    pub q: LinearParams,
    pub k: LinearParams,
    pub v: LinearParams,
    pub out: LinearParams,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerScaleParams {
    pub gamma: ParamId,
}

/// Pre-LN transformer block with LayerScale on both residual branches.
#[derive(Clone, Copy, Debug)]
pub struct ViTBlockParams {
    pub ln1: LayerNormParams,
    pub attn: MhsaParams,
    pub ls1: LayerScaleParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
    pub ls2: LayerScaleParams,
}

/// Registers freshly initialized parameters: truncated-normal weights,
/// zero biases, unit LayerNorm gains and a fixed LayerScale value.
pub struct Init<'a, S: Scalar> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut Prng,
    pub layer_scale: f64,
}

impl<S: Scalar> Init<'_, S> {
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape.to_vec(), |_| S::of(truncated_normal(rng, INIT_STD)));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape.to_vec(), S::of(value)))
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<LinearParams> {
        Ok(LinearParams {
            w: self.weight(&format!("{name}.w"), &[fan_in, fan_out])?,
            b: self.constant(&format!("{name}.b"), &[fan_out], 0.0)?,
            fan_in,
            fan_out,
        })
    }

    pub fn layer_norm(&mut self, name: &str, dim: usize) -> Result<LayerNormParams> {
        Ok(LayerNormParams {
            gamma: self.constant(&format!("{name}.gamma"), &[dim], 1.0)?,
            beta: self.constant(&format!("{name}.beta"), &[dim], 0.0)?,
        })
    }

    pub fn layer_scale(&mut self, name: &str, dim: usize) -> Result<LayerScaleParams> {
        let v = self.layer_scale;
        Ok(LayerScaleParams { gamma: self.constant(&format!("{name}.gamma"), &[dim], v)? })
    }

    pub fn mhsa(&mut self, name: &str, dim: usize, heads: usize) -> Result<MhsaParams> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("{name}: {heads} heads do not divide channel dim {dim}")));
        }
        Ok(MhsaParams {
            q: self.linear(&format!("{name}.q"), dim, dim)?,
            k: self.linear(&format!("{name}.k"), dim, dim)?,
            v: self.linear(&format!("{name}.v"), dim, dim)?,
            out: self.linear(&format!("{name}.out"), dim, dim)?,
            heads,
            head_dim: dim / heads,
        })
    }

    pub fn ffn(&mut self, name: &str, dim: usize, hidden: usize) -> Result<FfnParams> {
        Ok(FfnParams {
            fc1: self.linear(&format!("{name}.fc1"), dim, hidden)?,
            fc2: self.linear(&format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn vit_block(&mut self, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Result<ViTBlockParams> {
        Ok(ViTBlockParams {
            ln1: self.layer_norm(&format!("{name}.ln1"), dim)?,
            attn: self.mhsa(&format!("{name}.attn"), dim, heads)?,
            ls1: self.layer_scale(&format!("{name}.ls1"), dim)?,
            ln2: self.layer_norm(&format!("{name}.ln2"), dim)?,
            ffn: self.ffn(&format!("{name}.mlp"), dim, dim * mlp_ratio)?,
            ls2: self.layer_scale(&format!("{name}.ls2"), dim)?,
        })
    }
}

/// Element counts, for cross-checking a model's parameter total.
pub fn linear_numel(p: &LinearParams) -> usize {
    p.fan_in * p.fan_out + p.fan_out
}

pub fn mhsa_numel(p: &MhsaParams) -> usize {
    linear_numel(&p.q) + linear_numel(&p.k) + linear_numel(&p.v) + linear_numel(&p.out)
}

pub fn ffn_numel(p: &FfnParams) -> usize {
    linear_numel(&p.fc1) + linear_numel(&p.fc2)
}

pub fn vit_block_numel(p: &ViTBlockParams) -> usize {
    let c = p.attn.heads * p.attn.head_dim;
    4 * c + mhsa_numel(&p.attn) + 2 * c + ffn_numel(&p.ffn)
}

/// Affine map `x·W + b` applied along the last axis of `x`.
pub fn linear<S: Scalar>(g: &mut Graph<S>, x: Var, p: &LinearParams) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let c = *shape.last().unwrap_or(&1);
    if c != p.fan_in {
        return Err(Error::shape("linear", &shape, &[p.fan_in, p.fan_out]));
    }
    let flat = if shape.len() == 2 { x } else { g.reshape(x, &[shape.iter().product::<usize>() / c, c])? };
    let (w, b) = (g.param(p.w), g.param(p.b));
    let y = g.matmul(flat, w)?;
    let y = g.add_row(y, b)?;
    if shape.len() == 2 {
        Ok(y)
    } else {
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = p.fan_out;
        g.reshape(y, &out_shape)
    }
}

pub fn layer_norm<S: Scalar>(g: &mut Graph<S>, x: Var, p: &LayerNormParams) -> Result<Var> {
    let (gamma, beta) = (g.param(p.gamma), g.param(p.beta));
    g.layer_norm(x, gamma, beta, S::of(LN_EPS))
}

/// `[n × h·d] → [h × n × d]`
fn split_heads<S: Scalar>(g: &mut Graph<S>, x: Var, heads: usize) -> Result<Var> {
    let (n, c) = (g.shape(x)[0], g.shape(x)[1]);
    let r = g.reshape(x, &[n, heads, c / heads])?;
    g.permute(r, &[1, 0, 2])
}

/// Multi-head cross-attention of `q_tokens` over `kv_tokens`.
///
/// Returns the projected output `[n_q × c]` and the attention weights
/// `[heads × n_q × n_kv]`, each (head, query) row a softmax of the scaled
/// dot products `q·k / √d`.
pub fn cross_attention<S: Scalar>(g: &mut Graph<S>, q_tokens: Var, kv_tokens: Var, p: &MhsaParams) -> Result<(Var, Var)> {
    let c = p.heads * p.head_dim;
    let (qs, ks) = (g.shape(q_tokens).to_vec(), g.shape(kv_tokens).to_vec());
    if qs.len() != 2 || ks.len() != 2 || qs[1] != c || ks[1] != c {
        return Err(Error::shape("cross_attention", &qs, &ks));
    }
    if ks[0] == 0 {
        return Err(Error::Invalid("cross_attention needs at least one key token".into()));
    }
    let q = linear(g, q_tokens, &p.q)?;
    let k = linear(g, kv_tokens, &p.k)?;
    let v = linear(g, kv_tokens, &p.v)?;
    let (q, k, v) = (split_heads(g, q, p.heads)?, split_heads(g, k, p.heads)?, split_heads(g, v, p.heads)?);
    let logits = g.matmul_t(q, false, k, true)?;
    let logits = g.scale(logits, S::of(1.0 / (p.head_dim as f64).sqrt()))?;
    let weights = g.softmax(logits, 2)?;
    let o = g.matmul(weights, v)?;
    let o = g.permute(o, &[1, 0, 2])?;
    let o = g.reshape(o, &[qs[0], c])?;
    let out = linear(g, o, &p.out)?;
    Ok((out, weights))
}

pub fn mhsa<S: Scalar>(g: &mut Graph<S>, x: Var, p: &MhsaParams) -> Result<Var> {
    Ok(cross_attention(g, x, x, p)?.0)
}

pub fn ffn<S: Scalar>(g: &mut Graph<S>, x: Var, p: &FfnParams) -> Result<Var> {
    let h = linear(g, x, &p.fc1)?;
    let h = g.gelu(h)?;
    linear(g, h, &p.fc2)
}

pub fn layer_scale<S: Scalar>(g: &mut Graph<S>, x: Var, p: &LayerScaleParams) -> Result<Var> {
    let gamma = g.param(p.gamma);
    g.mul_row(x, gamma)
}

/// `x' = x + γ₁·MHSA(LN(x))`, then `x' + γ₂·MLP(LN(x'))`.
pub fn vit_block<S: Scalar>(g: &mut Graph<S>, x: Var, p: &ViTBlockParams) -> Result<Var> {
    let n = layer_norm(g, x, &p.ln1)?;
    let a = mhsa(g, n, &p.attn)?;
    let a = layer_scale(g, a, &p.ls1)?;
    let x = g.add(x, a)?;
    let n = layer_norm(g, x, &p.ln2)?;
    let m = ffn(g, n, &p.ffn)?;
    let m = layer_scale(g, m, &p.ls2)?;
    g.add(x, m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{gradcheck_params, kernels};
    use crate::rng::{seeded, unit};

    fn rand(rng: &mut Prng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| unit(rng) * 2.0 - 1.0)
    }

    fn store_with<F, T>(build: F) -> (ParamStore<f64>, T)
    where
        F: FnOnce(&mut Init<'_, f64>) -> Result<T>,
    {
        let mut store = ParamStore::new();
        let mut rng = seeded(42);
        let p = {
            let mut init = Init { store: &mut store, rng: &mut rng, layer_scale: 1e-4 };
            build(&mut init).unwrap()
        };
        (store, p)
    }

    /// Overwrites every parameter with uniform noise of the given amplitude.
    fn randomize(store: &mut ParamStore<f64>, seed: u64, amp: f64) {
        let mut rng = seeded(seed);
        for p in store.iter_mut() {
            for v in p.value.data_mut() {
                *v = (unit(&mut rng) * 2.0 - 1.0) * amp;
            }
        }
    }

    fn eval<T>(store: &ParamStore<f64>, f: impl FnOnce(&mut Graph<f64>) -> Result<T>) -> (Graph<f64>, T) {
        let mut g = Graph::with_params(store);
        let r = f(&mut g).unwrap();
        (g, r)
    }

    #[test]
    fn linear_examples() {
        let (mut store, p) = store_with(|i| i.linear("l", 3, 3));
        store.set(p.w, Tensor::eye(3)).unwrap();
        let mut rng = seeded(1);
        let x = rand(&mut rng, &[4, 3]);
        let (g, y) = eval(&store, |g| { let xv = g.constant(x.clone()); linear(g, xv, &p) });
        assert_eq!(g.value(y), &x);

        let (mut store, p) = store_with(|i| i.linear("l", 3, 2));
        let b = Tensor::from_f64([2], &[0.5, -2.0]).unwrap();
        store.set(p.b, b.clone()).unwrap();
        let (g, y) = eval(&store, |g| { let xv = g.constant(Tensor::zeros([5, 3])); linear(g, xv, &p) });
        assert!(g.value(y).rows().all(|r| r == b.data()));

        randomize(&mut store, 3, 1.0);
        let x = rand(&mut rng, &[2, 4, 3]);
        let (g, y) = eval(&store, |g| { let xv = g.constant(x.clone()); linear(g, xv, &p) });
        let flat = x.clone().reshape([8, 3]).unwrap();
        let mut want = flat.matmul(store.value(p.w)).unwrap();
        for row in want.data_mut().chunks_exact_mut(2) {
            for (o, &bv) in row.iter_mut().zip(store.value(p.b).data()) {
                *o += bv;
            }
        }
        assert_eq!(g.shape(y), &[2, 4, 2]);
        assert!(g.value(y).clone().reshape([8, 2]).unwrap().max_abs_diff(&want) <= 1e-12);

        let mut g = Graph::with_params(&store);
        let bad = g.constant(Tensor::zeros([2, 5]));
        assert!(matches!(linear(&mut g, bad, &p), Err(Error::Shape { .. })));
    }

    #[test]
    fn cross_attention_single_key_is_value_path() {
        let (mut store, p) = store_with(|i| i.mhsa("a", 4, 2));
        randomize(&mut store, 5, 0.5);
        let mut rng = seeded(2);
        let q = rand(&mut rng, &[3, 4]);
        let kv = rand(&mut rng, &[1, 4]);
        let (g, (out, w)) = eval(&store, |g| {
            let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
            cross_attention(g, qv, kvv, &p)
        });
        assert!(g.value(w).data().iter().all(|&x| x == 1.0));
        let v = {
            let (g, y) = eval(&store, |g| {
                let kvv = g.constant(kv.clone());
                let v = linear(g, kvv, &p.v)?;
                linear(g, v, &p.out)
            });
            g.value(y).clone()
        };
        for row in g.value(out).rows() {
            for (a, b) in row.iter().zip(v.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn zero_query_key_projections_give_uniform_weights() {
        let (mut store, p) = store_with(|i| i.mhsa("a", 6, 3));
        randomize(&mut store, 6, 0.5);
        for id in [p.q.w, p.q.b, p.k.w] {
            let shape = store.value(id).shape().to_vec();
            store.set(id, Tensor::zeros(shape)).unwrap();
        }
        let mut rng = seeded(3);
        let x = rand(&mut rng, &[5, 6]);
        let (g, (out, w)) = eval(&store, |g| { let xv = g.constant(x.clone()); cross_attention(g, xv, xv, &p) });
        assert!(g.value(w).data().iter().all(|&v| (v - 0.2).abs() <= 1e-15));
        // mean pooling of projected values
        let (g2, pooled) = eval(&store, |g| {
            let xv = g.constant(x.clone());
            let v = linear(g, xv, &p.v)?;
            let m = g.constant(Tensor::full([1, 5], 0.2));
            let mean = g.matmul(m, v)?;
            linear(g, mean, &p.out)
        });
        for row in g.value(out).rows() {
            for (a, b) in row.iter().zip(g2.value(pooled).data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_hand_set_logits() {
        let (mut store, p) = store_with(|i| i.mhsa("a", 1, 1));
        for id in [p.q.w, p.k.w, p.v.w, p.out.w] {
            store.set(id, Tensor::ones([1, 1])).unwrap();
        }
        let (g, (out, w)) = eval(&store, |g| {
            let q = g.constant(Tensor::ones([1, 1]));
            let kv = g.constant(Tensor::from_f64([2, 1], &[0.0, 2f64.ln()])?);
            cross_attention(g, q, kv, &p)
        });
        let w = g.value(w).data();
        assert!((w[0] - 1.0 / 3.0).abs() <= 1e-15 && (w[1] - 2.0 / 3.0).abs() <= 1e-15);
        let want = 2.0 / 3.0 * 2f64.ln();
        assert!((g.value(out).item() - want).abs() <= 1e-15);
    }

    #[test]
    fn empty_key_set_is_rejected() {
        assert!(Tensor::<f64>::new([0, 4], vec![]).is_err());
    }

    #[test]
    fn mhsa_examples() {
        let (mut store, p) = store_with(|i| i.mhsa("a", 4, 2));
        randomize(&mut store, 7, 0.7);
        let mut rng = seeded(4);
        let x = rand(&mut rng, &[5, 4]);
        let (g, (y, (ca, _))) = eval(&store, |g| {
            let xv = g.constant(x.clone());
            let y = mhsa(g, xv, &p)?;
            Ok((y, cross_attention(g, xv, xv, &p)?))
        });
        assert!(g.value(y).max_abs_diff(g.value(ca)) <= 1e-12);

        let one = rand(&mut rng, &[1, 4]);
        let (g, (y, vpath)) = eval(&store, |g| {
            let xv = g.constant(one.clone());
            let y = mhsa(g, xv, &p)?;
            let v = linear(g, xv, &p.v)?;
            Ok((y, linear(g, v, &p.out)?))
        });
        assert!(g.value(y).max_abs_diff(g.value(vpath)) <= 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one_and_commute_with_key_permutation() {
        let (mut store, p) = store_with(|i| i.mhsa("a", 6, 2));
        randomize(&mut store, 8, 1.0);
        let mut rng = seeded(5);
        let q = rand(&mut rng, &[3, 6]);
        let kv = rand(&mut rng, &[4, 6]);
        let perm = [2usize, 0, 3, 1];
        let kv_perm = Tensor::from_fn([4, 6], |i| kv.at(&[perm[i / 6], i % 6]));
        let run = |kv: &Tensor<f64>| {
            let (g, (o, w)) = eval(&store, |g| {
                let (qv, kvv) = (g.constant(q.clone()), g.constant(kv.clone()));
                cross_attention(g, qv, kvv, &p)
            });
            (g.value(o).clone(), g.value(w).clone())
        };
        let (o1, w1) = run(&kv);
        let (o2, w2) = run(&kv_perm);
        for row in w1.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        assert!(o1.max_abs_diff(&o2) <= 1e-12);
        for h in 0..2 {
            for i in 0..3 {
                for (j, &pj) in perm.iter().enumerate() {
                    assert!((w2.at(&[h, i, j]) - w1.at(&[h, i, pj])).abs() <= 1e-15);
                }
            }
        }
    }

    #[test]
    fn ffn_examples() {
        let (mut store, p) = store_with(|i| i.ffn("f", 3, 5));
        let b2 = Tensor::from_f64([3], &[1.0, -1.0, 0.25]).unwrap();
        store.set(p.fc1.w, Tensor::zeros([3, 5])).unwrap();
        store.set(p.fc1.b, Tensor::full([5], 0.5)).unwrap();
        store.set(p.fc2.w, Tensor::zeros([5, 3])).unwrap();
        store.set(p.fc2.b, b2.clone()).unwrap();
        let mut rng = seeded(6);
        let x = rand(&mut rng, &[4, 3]);
        let (g, y) = eval(&store, |g| { let xv = g.constant(x.clone()); ffn(g, xv, &p) });
        assert!(g.value(y).rows().all(|r| r == b2.data()));

        // one hidden unit passing x₀ through, read back out on channel 2
        let (mut store, p) = store_with(|i| i.ffn("f", 3, 1));
        store.set(p.fc1.w, Tensor::from_f64([3, 1], &[1.0, 0.0, 0.0]).unwrap()).unwrap();
        store.set(p.fc2.w, Tensor::from_f64([1, 3], &[0.0, 0.0, 2.0]).unwrap()).unwrap();
        let (g, y) = eval(&store, |g| { let xv = g.constant(Tensor::from_f64([1, 3], &[0.8, 9.0, 9.0])?); ffn(g, xv, &p) });
        let gelu = 0.5 * 0.8 * (1.0 + (0.797_884_560_802_865_4f64 * (0.8 + 0.044715 * 0.512)).tanh());
        assert_eq!(g.value(y).data()[..2], [0.0, 0.0]);
        assert!((g.value(y).data()[2] - 2.0 * gelu).abs() <= 1e-15);

        let (mut store, p) = store_with(|i| i.ffn("f", 3, 4));
        randomize(&mut store, 9, 0.8);
        let x = rand(&mut rng, &[3, 3]);
        let r = gradcheck_params(&store, |g| { let xv = g.constant(x.clone()); let y = ffn(g, xv, &p)?; let s = g.mul(y, y)?; g.sum(s) }, 1e-5, None).unwrap();
        assert!(r.max_rel_err <= 1e-4, "{r:?}");
    }

    #[test]
    fn vit_block_with_zero_layer_scale_is_identity() {
        let (mut store, p) = store_with(|i| i.vit_block("b", 6, 3, 2));
        randomize(&mut store, 10, 0.5);
        store.set(p.ls1.gamma, Tensor::zeros([6])).unwrap();
        store.set(p.ls2.gamma, Tensor::zeros([6])).unwrap();
        let mut rng = seeded(7);
        let x = rand(&mut rng, &[5, 6]);
        let (g, y) = eval(&store, |g| { let xv = g.constant(x.clone()); vit_block(g, xv, &p) });
        assert!(g.value(y).data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn vit_block_single_token_hand_evaluation() {
        let (mut store, p) = store_with(|i| i.vit_block("b", 2, 1, 1));
        let set = |s: &mut ParamStore<f64>, id, shape: &[usize], v: &[f64]| s.set(id, Tensor::from_f64(shape.to_vec(), v).unwrap()).unwrap();
        set(&mut store, p.attn.v.w, &[2, 2], &[0.5, 0.1, -0.2, 0.3]);
        set(&mut store, p.attn.v.b, &[2], &[0.05, -0.05]);
        set(&mut store, p.attn.out.w, &[2, 2], &[1.0, 0.0, 0.5, 2.0]);
        set(&mut store, p.ls1.gamma, &[2], &[0.1, 0.2]);
        set(&mut store, p.ls2.gamma, &[2], &[0.3, 0.4]);
        set(&mut store, p.ffn.fc1.w, &[2, 2], &[0.7, -0.4, 0.2, 0.9]);
        set(&mut store, p.ffn.fc2.w, &[2, 2], &[0.6, 0.1, -0.3, 0.8]);
        let x = [0.4, -1.2];
        let (g, y) = eval(&store, |g| { let xv = g.constant(Tensor::from_f64([1, 2], &x)?); vit_block(g, xv, &p) });

        // by hand: LN of a 2-vector [a,b] is ±(a−b)/2 / sqrt(((a−b)/2)² + eps)
        let ln = |a: f64, b: f64| {
            let d = (a - b) / 2.0;
            let r = 1.0 / (d * d + 1e-6).sqrt();
            [d * r, -d * r]
        };
        let n = ln(x[0], x[1]);
        let v = [n[0] * 0.5 + n[1] * -0.2 + 0.05, n[0] * 0.1 + n[1] * 0.3 - 0.05];
        let a = [v[0] * 1.0 + v[1] * 0.5, v[0] * 0.0 + v[1] * 2.0];
        let x1 = [x[0] + 0.1 * a[0], x[1] + 0.2 * a[1]];
        let n2 = ln(x1[0], x1[1]);
        let h = [n2[0] * 0.7 + n2[1] * 0.2, n2[0] * -0.4 + n2[1] * 0.9].map(kernels::gelu);
        let m = [h[0] * 0.6 + h[1] * -0.3, h[0] * 0.1 + h[1] * 0.8];
        let want = [x1[0] + 0.3 * m[0], x1[1] + 0.4 * m[1]];
        for (got, want) in g.value(y).data().iter().zip(want) {
            assert!((got - want).abs() <= 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn vit_block_gradcheck() {
        let (mut store, p) = store_with(|i| i.vit_block("b", 4, 2, 2));
        randomize(&mut store, 11, 0.6);
        let mut rng = seeded(8);
        let x = rand(&mut rng, &[3, 4]);
        let t = rand(&mut rng, &[3, 4]);
        let r = gradcheck_params(
            &store,
            |g| {
                let xv = g.constant(x.clone());
                let y = vit_block(g, xv, &p)?;
                let tv = g.constant(t.clone());
                let m = g.mul(y, tv)?;
                g.sum(m)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
        // input gradient: bind x as an extra parameter
        let mut with_x = store.clone();
        let xid = with_x.add("x", x).unwrap();
        let r = gradcheck_params(
            &with_x,
            |g| {
                let y = vit_block(g, g.param(xid), &p)?;
                let tv = g.constant(t.clone());
                let m = g.mul(y, tv)?;
                g.sum(m)
            },
            1e-5,
            None,
        )
        .unwrap();
        assert!(r.max_rel_err <= 1e-3, "{r:?}");
    }

    #[test]
    fn bad_head_count_is_a_config_error() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = seeded(0);
        let mut init = Init { store: &mut store, rng: &mut rng, layer_scale: 1e-4 };
        assert!(matches!(init.mhsa("a", 64, 6), Err(Error::Config(_))));
    }
}
