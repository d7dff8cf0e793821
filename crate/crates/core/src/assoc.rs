//! Association matrices between hierarchy levels, and upsampling through
//! them: `O_S = A_{g→p}·O_G`, then `O_I = A_{p→i}·O_S`.

use crate::hierarchy::CandidateMap;
use crate::numerics::{kernels, Graph, Scalar, Tensor, Var};
use crate::{Error, Result};

/// Sparse row-stochastic pixel-to-superpixel weights. `weights[e]` belongs to
/// pair `e` of the candidate map, so each pixel's weights are laid out in its
/// candidate order.
#[derive(Clone, Debug, PartialEq)]
pub struct AssocPixSp<S> {
    cmap: CandidateMap,
    weights: Tensor<S>,
}

/// Dense row-stochastic superpixel-to-group weights `[s_n × g_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssocSpGroup<S> {
    weights: Tensor<S>,
}

impl<S: Scalar> AssocPixSp<S> {
    /// Wraps externally supplied weights, checking non-negativity and that
    /// each pixel's weights sum to one within `1e-9`.
    pub fn from_weights(cmap: CandidateMap, weights: Tensor<S>) -> Result<Self> {
        if weights.len() != cmap.pairs().len() {
            return Err(Error::shape("AssocPixSp", weights.shape(), &[cmap.pairs().len()]));
        }
        let weights = weights.reshape([cmap.pairs().len()])?;
        for pix in 0..cmap.pixel_count() {
            let row = cmap.pixel_pairs(pix);
            let total: f64 = row.iter().map(|&e| weights.data()[e as usize].as_f64()).sum();
            if row.iter().any(|&e| weights.data()[e as usize] < S::zero()) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("pixel {pix} weights are not a distribution (sum {total})")));
            }
        }
        Ok(AssocPixSp { cmap, weights })
    }

    pub fn cmap(&self) -> &CandidateMap {
        &self.cmap
    }

    /// Per-pair weights, in candidate-map pair order.
    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    /// `(superpixel, weight)` entries of one pixel's row, in candidate order.
    pub fn row(&self, pixel: usize) -> impl Iterator<Item = (usize, S)> + '_ {
        let left = self.cmap.pairs().left();
        self.cmap
            .pixel_pairs(pixel)
            .iter()
            .map(move |&e| (left[e as usize] as usize, self.weights.data()[e as usize]))
    }

    /// The full `[i_n × s_n]` matrix.
    pub fn dense(&self) -> Tensor<S> {
        let (n, m) = (self.cmap.pixel_count(), self.cmap.superpixel_count());
        let mut out = Tensor::zeros([n, m]);
        for pix in 0..n {
            for (sp, w) in self.row(pix) {
                out.set(&[pix, sp], w);
            }
        }
        out
    }
}

impl<S: Scalar> AssocSpGroup<S> {
    pub fn from_weights(weights: Tensor<S>) -> Result<Self> {
        if weights.rank() != 2 {
            return Err(Error::Invalid(format!("AssocSpGroup must be a matrix, got {:?}", weights.shape())));
        }
        for (i, row) in weights.rows().enumerate() {
            let total: f64 = row.iter().map(|v| v.as_f64()).sum();
            if row.iter().any(|&v| v < S::zero()) || (total - 1.0).abs() > 1e-9 {
                return Err(Error::Invalid(format!("superpixel {i} weights are not a distribution (sum {total})")));
            }
        }
        Ok(AssocSpGroup { weights })
    }

    pub fn weights(&self) -> &Tensor<S> {
        &self.weights
    }

    pub fn superpixels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn groups(&self) -> usize {
        self.weights.shape()[1]
    }
}

fn check_logits<S: Scalar>(logits: &Tensor<S>, cmap: &CandidateMap) -> Result<()> {
    if logits.rank() != 2 || logits.shape()[1] != cmap.pairs().len() {
        return Err(Error::shape("pix_sp_assoc", logits.shape(), &[0, cmap.pairs().len()]));
    }
    if let Some(pix) = (0..cmap.pixel_count()).find(|&p| cmap.pixel_pairs(p).is_empty()) {
        return Err(Error::Geometry(format!("pixel {pix} has no candidate superpixels")));
    }
    Ok(())
}

/// Head-averaged SCA logits `[heads × pairs]`, normalized per pixel over its
/// candidates.
pub fn pix_sp_assoc<S: Scalar>(logits: &Tensor<S>, cmap: &CandidateMap) -> Result<AssocPixSp<S>> {
    check_logits(logits, cmap)?;
    let heads = logits.shape()[0];
    let e = cmap.pairs().len();
    let inv = S::one() / S::of(heads as f64);
    let mean = Tensor::from_fn([e], |i| (0..heads).map(|h| logits.data()[h * e + i]).sum::<S>() * inv);
    let weights = kernels::segment_softmax(&mean, cmap.pairs().by_right())?;
    Ok(AssocPixSp { cmap: cmap.clone(), weights })
}

/// Mean of the per-head G2S attention weights `[heads × s_n × g_n]`.
pub fn sp_group_assoc<S: Scalar>(g2s: &Tensor<S>) -> Result<AssocSpGroup<S>> {
    let (heads, s_n, g_n) = match g2s.shape() {
        &[h, s, g] => (h, s, g),
        s => return Err(Error::Invalid(format!("G2S weights must be heads×superpixels×groups, got {s:?}"))),
    };
    let inv = S::one() / S::of(heads as f64);
    let inner = s_n * g_n;
    let weights = Tensor::from_fn([s_n, g_n], |i| (0..heads).map(|h| g2s.data()[h * inner + i]).sum::<S>() * inv);
    Ok(AssocSpGroup { weights })
}

/// `O_S = A_{g→p}·O_G`, reshaped onto the `s_h × s_w` superpixel grid.
pub fn upsample_group_to_sp<S: Scalar>(o_g: &Tensor<S>, a: &AssocSpGroup<S>, sp_dims: (usize, usize)) -> Result<Tensor<S>> {
    if o_g.rank() != 2 || o_g.shape()[0] != a.groups() || sp_dims.0 * sp_dims.1 != a.superpixels() {
        return Err(Error::shape("upsample_group_to_sp", o_g.shape(), a.weights.shape()));
    }
    kernels::bmm(&a.weights, false, o_g, false)?.reshape([sp_dims.0, sp_dims.1, o_g.shape()[1]])
}

/// `O_I = A_{p→i}·O_S` with the sparse pixel weights.
pub fn upsample_sp_to_pix<S: Scalar>(o_s: &Tensor<S>, a: &AssocPixSp<S>) -> Result<Tensor<S>> {
    let (s_h, s_w) = a.cmap.superpixel_dims();
    if o_s.rank() != 3 || o_s.shape()[..2] != [s_h, s_w] {
        return Err(Error::shape("upsample_sp_to_pix", o_s.shape(), &[s_h, s_w]));
    }
    let c = o_s.shape()[2];
    let tokens = o_s.clone().reshape([s_h * s_w, c])?;
    let (i_h, i_w) = a.cmap.pixel_dims();
    kernels::pair_spread(&a.weights, &tokens, a.cmap.pairs())?.reshape([i_h, i_w, c])
}

/// Align-corners-false bilinear resize of an `h × w × c` map.
pub fn bilinear_resize<S: Scalar>(x: &Tensor<S>, out_h: usize, out_w: usize) -> Result<Tensor<S>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::Invalid(format!("bilinear target {out_h}×{out_w} must be positive")));
    }
    kernels::bilinear_resize(x, out_h, out_w)
}

/// Differentiable `A_{p→i}` from SCA logits: per-pair weights `[pairs]`.
pub fn graph_pix_sp_weights<S: Scalar>(g: &mut Graph<S>, logits: Var, cmap: &CandidateMap) -> Result<Var> {
    check_logits(g.value(logits), cmap)?;
    let mean = g.mean_axis0(logits)?;
    g.segment_softmax(mean, cmap.pairs().by_right())
}

/// Differentiable `A_{g→p}·O_G`: tokens `[s_n × c]`.
pub fn graph_group_to_sp<S: Scalar>(g: &mut Graph<S>, o_g: Var, g2s: Var) -> Result<Var> {
    let a = g.mean_axis0(g2s)?;
    g.matmul(a, o_g)
}

/// Differentiable `A_{p→i}·O_S` from superpixel tokens to a pixel map
/// `[i_h × i_w × c]`.
pub fn graph_sp_to_pix<S: Scalar>(g: &mut Graph<S>, o_s: Var, weights: Var, cmap: &CandidateMap) -> Result<Var> {
    let c = g.value(o_s).last_dim();
    let out = g.pair_spread(weights, o_s, cmap.pairs())?;
    let (i_h, i_w) = cmap.pixel_dims();
    g.reshape(out, &[i_h, i_w, c])
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::hierarchy::build_candidate_map;
    use crate::rng::{seeded, unit, Prng};

    fn rand(rng: &mut Prng, shape: &[usize], amp: f64) -> Tensor<f64> {
        Tensor::from_fn(shape.to_vec(), |_| (unit(rng) * 2.0 - 1.0) * amp)
    }

    fn random_g2s(rng: &mut Prng, heads: usize, s_n: usize, g_n: usize) -> Tensor<f64> {
        let logits = rand(rng, &[heads, s_n, g_n], 3.0);
        kernels::softmax(&logits, 2).unwrap()
    }

    /// Assoc that puts all weight on the candidate chosen by `pick`.
    fn one_hot_pix(cmap: &CandidateMap, pick: impl Fn(usize, &[usize]) -> usize) -> AssocPixSp<f64> {
        let mut w = Tensor::zeros([cmap.pairs().len()]);
        for pix in 0..cmap.pixel_count() {
            let cands: Vec<usize> = cmap.candidates(pix).collect();
            let k = pick(pix, &cands);
            w.data_mut()[cmap.pixel_pairs(pix)[k] as usize] = 1.0;
        }
        AssocPixSp::from_weights(cmap.clone(), w).unwrap()
    }

    #[test]
    fn pix_sp_assoc_examples() {
        let cmap = build_candidate_map(16, 16).unwrap();
        let e = cmap.pairs().len();
        let a = pix_sp_assoc(&Tensor::<f64>::full([2, e], 0.3), &cmap).unwrap();
        let interior = 5 * 16 + 6;
        assert!(a.row(interior).all(|(_, w)| (w - 1.0 / 9.0).abs() <= 1e-15));

        let mut logits = Tensor::zeros([1, e]);
        let hot = cmap.pixel_pairs(interior)[4] as usize;
        logits.data_mut()[hot] = 50.0;
        let a = pix_sp_assoc(&logits, &cmap).unwrap();
        assert!(a.weights().data()[hot] >= 1.0 - 1e-15);

        let mut logits = Tensor::zeros([2, e]);
        for (k, &p) in cmap.pixel_pairs(0).iter().enumerate() {
            let v = if k >= 2 { 2f64.ln() } else { 0.0 };
            logits.data_mut()[p as usize] = v;
            logits.data_mut()[e + p as usize] = v;
        }
        let a = pix_sp_assoc(&logits, &cmap).unwrap();
        let row: Vec<f64> = a.row(0).map(|(_, w)| w).collect();
        for (got, want) in row.iter().zip([1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0, 1.0 / 3.0]) {
            assert!((got - want).abs() <= 1e-15);
        }
        assert!(pix_sp_assoc(&Tensor::<f64>::zeros([2, e - 1]), &cmap).is_err());
    }

    #[test]
    fn sp_group_assoc_examples() {
        let a = sp_group_assoc(&Tensor::<f64>::ones([3, 5, 1])).unwrap();
        assert!(a.weights().data().iter().all(|&v| v == 1.0));

        let mut rng = seeded(1);
        let w = random_g2s(&mut rng, 1, 4, 3);
        let mut twice = w.data().to_vec();
        twice.extend_from_slice(w.data());
        let a = sp_group_assoc(&Tensor::new([2, 4, 3], twice).unwrap()).unwrap();
        assert!(a.weights().max_abs_diff(&w.reshape([4, 3]).unwrap()) <= 1e-16);

        let a = sp_group_assoc(&Tensor::<f64>::from_f64([2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(a.weights().data(), &[0.5, 0.5]);
    }

    #[test]
    fn group_to_sp_examples() {
        let mut rng = seeded(2);
        let o_g = rand(&mut rng, &[4, 3], 1.0);
        let pick = [2usize, 0, 3, 3, 1, 0];
        let onehot = Tensor::from_fn([6, 4], |i| if pick[i / 4] == i % 4 { 1.0 } else { 0.0 });
        let a = AssocSpGroup::from_weights(onehot).unwrap();
        let o_s = upsample_group_to_sp(&o_g, &a, (2, 3)).unwrap();
        for (s, &gi) in pick.iter().enumerate() {
            for c in 0..3 {
                assert_eq!(o_s.at(&[s / 3, s % 3, c]), o_g.at(&[gi, c]));
            }
        }

        let a = AssocSpGroup::from_weights(Tensor::full([6, 4], 0.25)).unwrap();
        let o_s = upsample_group_to_sp(&o_g, &a, (2, 3)).unwrap();
        for c in 0..3 {
            let mean = (0..4).map(|g| o_g.at(&[g, c])).sum::<f64>() / 4.0;
            assert!((0..6).all(|s| (o_s.at(&[s / 3, s % 3, c]) - mean).abs() <= 1e-15));
        }

        let a = sp_group_assoc(&random_g2s(&mut rng, 3, 6, 4)).unwrap();
        let o_s = upsample_group_to_sp(&o_g, &a, (2, 3)).unwrap();
        for s in 0..6 {
            for c in 0..3 {
                let want: f64 = (0..4).map(|g| a.weights().at(&[s, g]) * o_g.at(&[g, c])).sum();
                assert!((o_s.at(&[s / 3, s % 3, c]) - want).abs() <= 1e-12);
            }
        }
        assert!(upsample_group_to_sp(&rand(&mut rng, &[5, 3], 1.0), &a, (2, 3)).is_err());
        assert!(upsample_group_to_sp(&o_g, &a, (3, 3)).is_err());
    }

    #[test]
    fn sp_to_pix_examples() {
        let cmap = build_candidate_map(16, 12).unwrap();
        let mut rng = seeded(3);
        let o_s = rand(&mut rng, &[4, 3, 2], 1.0);

        // nearest cell: the candidate that is the pixel's own cell
        let own = |pix: usize| (pix / 12 / 4) * 3 + (pix % 12) / 4;
        let a = one_hot_pix(&cmap, |pix, c| c.iter().position(|&s| s == own(pix)).unwrap());
        let o_i = upsample_sp_to_pix(&o_s, &a).unwrap();
        for pix in 0..192 {
            let s = own(pix);
            for c in 0..2 {
                assert_eq!(o_i.at(&[pix / 12, pix % 12, c]), o_s.at(&[s / 3, s % 3, c]));
            }
        }

        let logits = rand(&mut rng, &[2, cmap.pairs().len()], 4.0);
        let a = pix_sp_assoc(&logits, &cmap).unwrap();
        let flat = upsample_sp_to_pix(&Tensor::full([4, 3, 2], -0.7), &a).unwrap();
        assert!(flat.data().iter().all(|&v| (v + 0.7).abs() <= 1e-15));

        // dense materialization oracle, triple loop
        let dense = a.dense();
        let o_i = upsample_sp_to_pix(&o_s, &a).unwrap();
        let src = o_s.clone().reshape([12, 2]).unwrap();
        for pix in 0..192 {
            for c in 0..2 {
                let want: f64 = (0..12).map(|s| dense.at(&[pix, s]) * src.at(&[s, c])).sum();
                assert!((o_i.at(&[pix / 12, pix % 12, c]) - want).abs() <= 1e-12);
            }
        }
        assert!(upsample_sp_to_pix(&rand(&mut rng, &[3, 3, 2], 1.0), &a).is_err());
    }

    #[test]
    fn bilinear_examples() {
        let mut rng = seeded(4);
        let x = rand(&mut rng, &[3, 5, 2], 1.0);
        assert_eq!(bilinear_resize(&x, 3, 5).unwrap(), x);
        let one = Tensor::<f64>::from_f64([1, 1, 2], &[0.4, -1.5]).unwrap();
        let out = bilinear_resize(&one, 4, 3).unwrap();
        assert!(out.rows().all(|r| r == [0.4, -1.5]));

        // 2×2 → 4×4: source coordinate (i + 0.5)/2 − 0.5 ∈ {−.25 → 0, .25, .75, 1.25 → 1}
        let x = Tensor::<f64>::from_f64([2, 2, 1], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = bilinear_resize(&x, 4, 4).unwrap();
        let taps = [(0, 0, 0.0), (0, 1, 0.25), (0, 1, 0.75), (1, 1, 0.0)];
        for (oy, &(y0, y1, fy)) in taps.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in taps.iter().enumerate() {
                let v = |y: usize, xx: usize| x.at(&[y, xx, 0]);
                let want = (1.0 - fy) * ((1.0 - fx) * v(y0, x0) + fx * v(y0, x1)) + fy * ((1.0 - fx) * v(y1, x0) + fx * v(y1, x1));
                assert!((out.at(&[oy, ox, 0]) - want).abs() <= 1e-15);
            }
        }
        assert!(bilinear_resize(&x, 0, 4).is_err());
    }

    #[test]
    fn argmax_transport_under_one_hot() {
        let cmap = build_candidate_map(8, 8).unwrap();
        let mut rng = seeded(5);
        let o_g = rand(&mut rng, &[3, 5], 1.0);
        let pick_g = [1usize, 0, 2, 2];
        let a_g = AssocSpGroup::from_weights(Tensor::from_fn([4, 3], |i| if pick_g[i / 3] == i % 3 { 1.0 } else { 0.0 })).unwrap();
        let a_p = one_hot_pix(&cmap, |pix, c| pix % c.len());
        let o_s = upsample_group_to_sp(&o_g, &a_g, (2, 2)).unwrap();
        let o_i = upsample_sp_to_pix(&o_s, &a_p).unwrap();
        let argmax = |row: &[f64]| row.iter().enumerate().fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
        for pix in 0..64 {
            let sp = a_p.row(pix).find(|&(_, w)| w == 1.0).unwrap().0;
            let src = o_g.rows().nth(pick_g[sp]).unwrap();
            let got = &o_i.data()[pix * 5..(pix + 1) * 5];
            assert_eq!(got, src);
            assert_eq!(argmax(got), argmax(src));
        }
    }

    #[test]
    fn from_weights_rejects_non_distributions() {
        let cmap = build_candidate_map(4, 4).unwrap();
        assert!(AssocPixSp::from_weights(cmap.clone(), Tensor::<f64>::full([16], 0.5)).is_err());
        assert!(AssocPixSp::from_weights(cmap, Tensor::<f64>::ones([16])).is_ok());
        assert!(AssocSpGroup::from_weights(Tensor::<f64>::from_f64([1, 2], &[1.5, -0.5]).unwrap()).is_err());
    }

    #[test]
    fn graph_versions_match_value_versions() {
        let cmap = build_candidate_map(8, 12).unwrap();
        let mut rng = seeded(6);
        let logits = rand(&mut rng, &[2, cmap.pairs().len()], 3.0);
        let g2s = random_g2s(&mut rng, 3, 6, 2);
        let o_g = rand(&mut rng, &[2, 4], 1.0);
        let mut g = Graph::<f64>::new();
        let (lv, gv, ov) = (g.constant(logits.clone()), g.constant(g2s.clone()), g.constant(o_g.clone()));
        let w = graph_pix_sp_weights(&mut g, lv, &cmap).unwrap();
        let o_s = graph_group_to_sp(&mut g, ov, gv).unwrap();
        let o_i = graph_sp_to_pix(&mut g, o_s, w, &cmap).unwrap();

        let a_p = pix_sp_assoc(&logits, &cmap).unwrap();
        let a_g = sp_group_assoc(&g2s).unwrap();
        let want_s = upsample_group_to_sp(&o_g, &a_g, (2, 3)).unwrap();
        let want_i = upsample_sp_to_pix(&want_s, &a_p).unwrap();
        assert!(g.value(w).max_abs_diff(a_p.weights()) <= 1e-15);
        assert!(g.value(o_i).max_abs_diff(&want_i) <= 1e-14);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn associations_are_stochastic_and_upsampling_is_convex(seed in any::<u64>(), heads in 1usize..4, amp in 0.1f64..20.0) {
            let cmap = build_candidate_map(8, 16).unwrap();
            let mut rng = seeded(seed);
            let a_p = pix_sp_assoc(&rand(&mut rng, &[heads, cmap.pairs().len()], amp), &cmap).unwrap();
            let a_g = sp_group_assoc(&random_g2s(&mut rng, heads, 8, 3)).unwrap();
            for pix in 0..cmap.pixel_count() {
                let total: f64 = a_p.row(pix).map(|(_, w)| w).sum();
                prop_assert!((total - 1.0).abs() <= 1e-9);
                prop_assert!(a_p.row(pix).all(|(_, w)| w >= 0.0));
            }
            for row in a_g.weights().rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(row.iter().all(|&w| w >= 0.0));
            }
            let o_g = rand(&mut rng, &[3, 2], 5.0);
            let o_s = upsample_group_to_sp(&o_g, &a_g, (2, 4)).unwrap();
            let o_i = upsample_sp_to_pix(&o_s, &a_p).unwrap();
            prop_assert_eq!(o_i.shape(), &[8, 16, 2]);
            for c in 0..2 {
                let col = |t: &Tensor<f64>| t.data().iter().skip(c).step_by(2).copied().collect::<Vec<_>>();
                let (lo, hi) = col(&o_g).iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                prop_assert!(col(&o_s).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
                let (lo, hi) = col(&o_s).iter().fold((f64::MAX, f64::MIN), |(l, h), &v| (l.min(v), h.max(v)));
                prop_assert!(col(&o_i).iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
            }
        }
    }
}
