//! Attention primitives over spatial token stacks.
//!
//! Shapes follow one convention: queries are `B x D x H x W` with `D` split
//! into `A` head slices, token keys/values are `B x T x D x H x W`, and
//! per-head logits/weights are `B x A x T x H x W`. Every spatial position
//! attends independently over the same `T` tokens.

use super::element::Element;
use super::graph::{pair_mut, Graph, Node, Op, TensorId};
use super::softmax::fiber_dims;
use super::{dims4, dims5, shape_error, TensorError};

/// Top-k sparse softmax of one logit vector: the `min(k, len)` largest
/// entries (ties toward the lower index) get softmax weights, everything
/// else is exactly zero.
pub fn topk_softmax_slice<E: Element>(logits: &[E], k: usize) -> Result<Vec<E>, TensorError> {
    if k == 0 {
        return Err(TensorError::TopKZero);
    }
    let keep = k.min(logits.len());
    let mut selected = vec![0u32; keep];
    let mut weights = vec![E::zero(); logits.len()];
    let mut scratch = Vec::with_capacity(keep);
    topk_select(logits, keep, &mut selected, &mut scratch);
    softmax_over_selected(logits, &selected, &mut weights);
    Ok(weights)
}

/// Pick the `keep` largest values, output indices in descending-value order
/// (equal values rank by ascending index). `scratch` is reusable storage.
/// NaN ranks below every other value (as negative infinity), so a diverging
/// forward pass degrades to NaN weights downstream instead of breaking the
/// selection order here.
fn topk_select<E: Element>(
    vals: &[E],
    keep: usize,
    out: &mut [u32],
    scratch: &mut Vec<(u32, E)>,
) {
    scratch.clear();
    for (t, &v) in vals.iter().enumerate() {
        let v = if v.is_nan() { E::neg_infinity() } else { v };
        let full = scratch.len() == keep;
        if full && v <= scratch[keep - 1].1 {
            continue;
        }
        // Insert after every entry that ranks at or above v; scanning in
        // ascending t keeps equal values ordered by lower index.
        let pos = scratch
            .iter()
            .position(|&(_, sv)| sv < v)
            .unwrap_or(scratch.len());
        if full {
            scratch.pop();
        }
        scratch.insert(pos, (t as u32, v));
    }
    for (slot, &(t, _)) in out.iter_mut().zip(scratch.iter()) {
        *slot = t;
    }
}

/// Softmax over the given indices of `logits`, written into `weights`
/// (which must arrive zeroed at those positions' fiber).
fn softmax_over_selected<E: Element>(logits: &[E], selected: &[u32], weights: &mut [E]) {
    let max = logits[selected[0] as usize];
    let mut total = E::zero();
    for &t in selected {
        let e = (logits[t as usize] - max).exp();
        weights[t as usize] = e;
        total = total + e;
    }
    let inv = E::one() / total;
    for &t in selected {
        weights[t as usize] = weights[t as usize] * inv;
    }
}

impl<E: Element> Graph<E> {
    /// Scaled dot-product logits between a query map and a token stack,
    /// per head: `B x D x H x W` against `B x T x D x H x W` gives
    /// `B x A x T x H x W`, each dot product divided by `scale`.
    pub fn attention_logits(
        &mut self,
        query: TensorId,
        keys: TensorId,
        heads: usize,
        scale: E,
    ) -> Result<TensorId, TensorError> {
        let (b, d, h, w) = dims4("attention_logits", self.shape(query))?;
        let (kb, t, kd, kh, kw) = dims5("attention_logits", self.shape(keys))?;
        if (kb, kd, kh, kw) != (b, d, h, w) {
            return Err(shape_error(
                "attention_logits",
                format!(
                    "keys {:?} do not align with query {:?}",
                    self.shape(keys),
                    self.shape(query)
                ),
            ));
        }
        if heads == 0 || d % heads != 0 {
            return Err(shape_error(
                "attention_logits",
                format!("{d} channels do not split into {heads} heads"),
            ));
        }
        let dk = d / heads;
        let p = h * w;
        let q = self.data(query);
        let kdata = self.data(keys);
        let mut data = vec![E::zero(); b * heads * t * p];
        for bi in 0..b {
            for ti in 0..t {
                for a in 0..heads {
                    let out_base = ((bi * heads + a) * t + ti) * p;
                    for j in 0..dk {
                        let ch = a * dk + j;
                        let q_row = &q[(bi * d + ch) * p..(bi * d + ch + 1) * p];
                        let k_row =
                            &kdata[((bi * t + ti) * d + ch) * p..((bi * t + ti) * d + ch + 1) * p];
                        let out_row = &mut data[out_base..out_base + p];
                        for ((o, &qv), &kv) in out_row.iter_mut().zip(q_row).zip(k_row) {
                            *o = *o + qv * kv;
                        }
                    }
                }
            }
        }
        let inv = E::one() / scale;
        for v in &mut data {
            *v = *v * inv;
        }
        let rg = self.any_requires_grad(&[query, keys]);
        Ok(self.push(
            data,
            vec![b, heads, t, h, w],
            rg,
            Op::AttentionLogits {
                query,
                keys,
                heads,
                scale,
            },
        ))
    }

    /// Top-k sparse softmax along `axis`: the kept indices are recorded on
    /// the node and readable via [`Graph::topk_selected`].
    pub fn topk_softmax(
        &mut self,
        input: TensorId,
        axis: usize,
        k: usize,
    ) -> Result<TensorId, TensorError> {
        if k == 0 {
            return Err(TensorError::TopKZero);
        }
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(shape_error(
                "topk_softmax",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = fiber_dims(&shape, axis);
        let keep = k.min(n);
        let src = self.data(input);
        let mut data = vec![E::zero(); src.len()];
        let mut selected = vec![0u32; outer * inner * keep];
        let mut fiber = vec![E::zero(); n];
        let mut weights = vec![E::zero(); n];
        let mut scratch = Vec::with_capacity(keep);
        let mut fiber_idx = 0;
        for o in 0..outer {
            for r in 0..inner {
                let base = o * n * inner + r;
                for i in 0..n {
                    fiber[i] = src[base + i * inner];
                }
                weights.iter_mut().for_each(|v| *v = E::zero());
                let sel = &mut selected[fiber_idx * keep..(fiber_idx + 1) * keep];
                topk_select(&fiber, keep, sel, &mut scratch);
                softmax_over_selected(&fiber, sel, &mut weights);
                for i in 0..n {
                    data[base + i * inner] = weights[i];
                }
                fiber_idx += 1;
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            data,
            shape,
            rg,
            Op::TopkSoftmax {
                input,
                axis,
                keep,
                selected,
            },
        ))
    }

    /// Weighted token mixing per head: weights `B x A x T x H x W` against
    /// values `B x T x D x H x W` (with `D = A * d_v`) gives the
    /// concatenated head outputs `B x D x H x W`.
    pub fn attention_mix(
        &mut self,
        weights: TensorId,
        values: TensorId,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let (b, a, t, h, w) = dims5("attention_mix", self.shape(weights))?;
        let (vb, vt, d, vh, vw) = dims5("attention_mix", self.shape(values))?;
        if a != heads {
            return Err(shape_error(
                "attention_mix",
                format!("weights carry {a} heads, expected {heads}"),
            ));
        }
        if (vb, vt, vh, vw) != (b, t, h, w) {
            return Err(shape_error(
                "attention_mix",
                format!(
                    "values {:?} do not align with weights {:?}",
                    self.shape(values),
                    self.shape(weights)
                ),
            ));
        }
        if d % heads != 0 {
            return Err(shape_error(
                "attention_mix",
                format!("{d} value channels do not split into {heads} heads"),
            ));
        }
        let dv = d / heads;
        let p = h * w;
        let wdata = self.data(weights);
        let vdata = self.data(values);
        let mut data = vec![E::zero(); b * d * p];
        for bi in 0..b {
            for ti in 0..t {
                for ai in 0..heads {
                    let w_base = ((bi * heads + ai) * t + ti) * p;
                    let w_row = &wdata[w_base..w_base + p];
                    for j in 0..dv {
                        let ch = ai * dv + j;
                        let v_row =
                            &vdata[((bi * t + ti) * d + ch) * p..((bi * t + ti) * d + ch + 1) * p];
                        let out_row = &mut data[(bi * d + ch) * p..(bi * d + ch + 1) * p];
                        for ((o, &wv), &vv) in out_row.iter_mut().zip(w_row).zip(v_row) {
                            *o = *o + wv * vv;
                        }
                    }
                }
            }
        }
        let rg = self.any_requires_grad(&[weights, values]);
        Ok(self.push(
            data,
            vec![b, d, h, w],
            rg,
            Op::AttentionMix {
                weights,
                values,
                heads,
            },
        ))
    }
}

pub(crate) fn backward_attention_logits<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    query: TensorId,
    keys: TensorId,
    heads: usize,
    scale: E,
) {
    let dy = out.grad.as_deref().unwrap();
    let (b, t) = (out.shape[0], out.shape[2]);
    let p = out.shape[3] * out.shape[4];
    let d = ins[query.index()].shape[1];
    let dk = d / heads;
    let inv = E::one() / scale;

    if ins[query.index()].requires_grad {
        let (qn, kn) = pair_mut(ins, query.index(), keys.index());
        let kdata = &kn.data;
        let dq = qn.grad_make();
        for bi in 0..b {
            for ti in 0..t {
                for a in 0..heads {
                    let dy_base = ((bi * heads + a) * t + ti) * p;
                    let dy_row = &dy[dy_base..dy_base + p];
                    for j in 0..dk {
                        let ch = a * dk + j;
                        let k_row =
                            &kdata[((bi * t + ti) * d + ch) * p..((bi * t + ti) * d + ch + 1) * p];
                        let dq_row = &mut dq[(bi * d + ch) * p..(bi * d + ch + 1) * p];
                        for ((g, &dv), &kv) in dq_row.iter_mut().zip(dy_row).zip(k_row) {
                            *g = *g + inv * dv * kv;
                        }
                    }
                }
            }
        }
    }
    if ins[keys.index()].requires_grad {
        let (qn, kn) = pair_mut(ins, query.index(), keys.index());
        let qdata = &qn.data;
        let dkg = kn.grad_make();
        for bi in 0..b {
            for ti in 0..t {
                for a in 0..heads {
                    let dy_base = ((bi * heads + a) * t + ti) * p;
                    let dy_row = &dy[dy_base..dy_base + p];
                    for j in 0..dk {
                        let ch = a * dk + j;
                        let q_row = &qdata[(bi * d + ch) * p..(bi * d + ch + 1) * p];
                        let dk_row = &mut dkg
                            [((bi * t + ti) * d + ch) * p..((bi * t + ti) * d + ch + 1) * p];
                        for ((g, &dv), &qv) in dk_row.iter_mut().zip(dy_row).zip(q_row) {
                            *g = *g + inv * dv * qv;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_topk_softmax<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    axis: usize,
    keep: usize,
    selected: &[u32],
) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let y = &out.data;
    let (outer, n, inner) = fiber_dims(&out.shape, axis);
    let dx = node.grad_make();
    let mut fiber_idx = 0;
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            let sel = &selected[fiber_idx * keep..(fiber_idx + 1) * keep];
            let mut dot = E::zero();
            for &t in sel {
                let idx = base + t as usize * inner;
                dot = dot + dy[idx] * y[idx];
            }
            for &t in sel {
                let idx = base + t as usize * inner;
                dx[idx] = dx[idx] + y[idx] * (dy[idx] - dot);
            }
            fiber_idx += 1;
        }
    }
}

pub(crate) fn backward_attention_mix<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    weights: TensorId,
    values: TensorId,
    heads: usize,
) {
    let dy = out.grad.as_deref().unwrap();
    let (b, d) = (out.shape[0], out.shape[1]);
    let p = out.shape[2] * out.shape[3];
    let t = ins[weights.index()].shape[2];
    let dv = d / heads;

    if ins[weights.index()].requires_grad {
        let (wn, vn) = pair_mut(ins, weights.index(), values.index());
        let vdata = &vn.data;
        let dw = wn.grad_make();
        for bi in 0..b {
            for ti in 0..t {
                for ai in 0..heads {
                    let w_base = ((bi * heads + ai) * t + ti) * p;
                    let dw_row = &mut dw[w_base..w_base + p];
                    for j in 0..dv {
                        let ch = ai * dv + j;
                        let v_row =
                            &vdata[((bi * t + ti) * d + ch) * p..((bi * t + ti) * d + ch + 1) * p];
                        let dy_row = &dy[(bi * d + ch) * p..(bi * d + ch + 1) * p];
                        for ((g, &dvv), &vv) in dw_row.iter_mut().zip(dy_row).zip(v_row) {
                            *g = *g + dvv * vv;
                        }
                    }
                }
            }
        }
    }
    if ins[values.index()].requires_grad {
        let (wn, vn) = pair_mut(ins, weights.index(), values.index());
        let wdata = &wn.data;
        let dvg = vn.grad_make();
        for bi in 0..b {
            for ti in 0..t {
                for ai in 0..heads {
                    let w_base = ((bi * heads + ai) * t + ti) * p;
                    let w_row = &wdata[w_base..w_base + p];
                    for j in 0..dv {
                        let ch = ai * dv + j;
                        let dv_row = &mut dvg
                            [((bi * t + ti) * d + ch) * p..((bi * t + ti) * d + ch + 1) * p];
                        let dy_row = &dy[(bi * d + ch) * p..(bi * d + ch + 1) * p];
                        for ((g, &wv), &dvv) in dv_row.iter_mut().zip(w_row).zip(dy_row) {
                            *g = *g + wv * dvv;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn topk_keeps_largest_two_and_softmaxes_them() {
        let w = topk_softmax_slice(&[1.0_f64, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[1], 0.0);
        assert!((w[2] - 0.2689).abs() < 5e-5);
        assert!((w[3] - 0.7311).abs() < 5e-5);
    }

    #[test]
    fn non_finite_logits_never_panic_and_nan_ranks_last() {
        // NaN loses to every finite value, so selection stays meaningful
        // while a fully diverged batch degrades to NaN weights downstream.
        let w = topk_softmax_slice(&[f64::NAN, 2.0, f64::NAN, 1.0, 0.5], 2).unwrap();
        assert_eq!(w[0], 0.0);
        assert_eq!(w[2], 0.0);
        assert!((w[1] + w[3] - 1.0).abs() < 1e-12);
        // Stress: every arrangement of NaN/inf runs to completion.
        let pool = [f64::NAN, f64::INFINITY, f64::NEG_INFINITY, 1.0, -1.0, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2_000 {
            let logits: Vec<f64> = (0..7).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            let w = topk_softmax_slice(&logits, 3).unwrap();
            assert_eq!(w.len(), logits.len());
        }
        // All-NaN input yields NaN weights (downstream divergence detection
        // owns this case), never a panic.
        let w = topk_softmax_slice(&[f64::NAN, f64::NAN], 1).unwrap();
        assert!(w.iter().all(|v| v.is_nan() || *v == 0.0));
    }

    #[test]
    fn topk_with_k_at_least_len_is_dense_softmax() {
        let logits = vec![0.3_f64, -1.2, 2.0, 0.0, 0.7];
        let sparse = topk_softmax_slice(&logits, 10).unwrap();
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(logits, &[5], false).unwrap();
        let y = g.softmax_axis(x, 0).unwrap();
        for (a, b) in sparse.iter().zip(g.data(y)) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn topk_ties_break_toward_lower_index() {
        let w = topk_softmax_slice(&[0.0_f64, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0, 0.0]);
        // A later equal value does not displace an earlier one...
        let w = topk_softmax_slice(&[5.0_f64, 5.0, 5.0], 2).unwrap();
        assert_eq!(w, vec![0.5, 0.5, 0.0]);
        // ...but equal values beat strictly smaller ones regardless of order.
        let w = topk_softmax_slice(&[1.0_f64, 5.0, 5.0], 2).unwrap();
        assert_eq!(w, vec![0.0, 0.5, 0.5]);
    }

    #[test]
    fn topk_rejects_zero_k() {
        assert!(matches!(
            topk_softmax_slice(&[1.0_f64], 0),
            Err(TensorError::TopKZero)
        ));
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[2], false).unwrap();
        assert!(matches!(
            g.topk_softmax(x, 0, 0),
            Err(TensorError::TopKZero)
        ));
    }

    #[test]
    fn topk_weight_properties_hold_for_random_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let t = rng.gen_range(1..12);
            let k = rng.gen_range(1..8);
            let logits: Vec<f64> = (0..t).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let w = topk_softmax_slice(&logits, k).unwrap();
            let positives = w.iter().filter(|&&v| v > 0.0).count();
            assert_eq!(positives, k.min(t));
            let total: f64 = w.iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
            assert!(w.iter().all(|&v| v >= 0.0));
            // Every kept logit is >= every dropped logit.
            let kept_min = logits
                .iter()
                .zip(&w)
                .filter(|(_, &wv)| wv > 0.0)
                .map(|(&l, _)| l)
                .fold(f64::INFINITY, f64::min);
            let dropped_max = logits
                .iter()
                .zip(&w)
                .filter(|(_, &wv)| wv == 0.0)
                .map(|(&l, _)| l)
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(kept_min >= dropped_max);
        }
    }

    #[test]
    fn graph_topk_matches_slice_kernel_per_fiber() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let (b, a, t, p) = (2, 2, 7, 3);
        let data: Vec<f64> = (0..b * a * t * p).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data.clone(), &[b, a, t, 1, p], false).unwrap();
        let y = g.topk_softmax(x, 2, 3).unwrap();
        for o in 0..b * a {
            for r in 0..p {
                let fiber: Vec<f64> = (0..t).map(|i| data[(o * t + i) * p + r]).collect();
                let want = topk_softmax_slice(&fiber, 3).unwrap();
                for i in 0..t {
                    let got = g.data(y)[(o * t + i) * p + r];
                    assert!((got - want[i]).abs() < 1e-12);
                }
            }
        }
        let (sel, keep) = g.topk_selected(y).unwrap();
        assert_eq!(keep, 3);
        assert_eq!(sel.len(), b * a * p * 3);
    }

    #[test]
    fn topk_backward_matches_finite_differences_away_from_boundaries() {
        // Logits well separated so the selected set is stable under eps.
        let data = vec![4.0_f64, -2.0, 1.5, 0.2, 3.0, -1.0];
        let weights = vec![0.9, -0.3, 0.7, 0.1, -0.5, 0.4];
        let eval = |inp: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(inp.to_vec(), &[1, 1, 6, 1, 1], false).unwrap();
            let y = g.topk_softmax(x, 2, 3).unwrap();
            g.data(y).iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data.clone(), &[1, 1, 6, 1, 1], true).unwrap();
        let y = g.topk_softmax(x, 2, 3).unwrap();
        let flat = g.reshape(y, &[1, 6]).unwrap();
        let wmat = g.leaf(weights.clone(), &[6, 1], false).unwrap();
        let bias = g.leaf(vec![0.0], &[1], false).unwrap();
        let lin = g.linear(flat, wmat, bias).unwrap();
        let s = g.sum(lin);
        g.backward(s).unwrap();
        let dx = g.grad(x).unwrap();
        let eps = 1e-6;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += eps;
            let mut minus = data.clone();
            minus[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            assert!((dx[i] - numeric).abs() < 1e-7, "dx[{i}]={} vs {numeric}", dx[i]);
        }
    }

    #[test]
    fn logits_match_hand_dot_products() {
        let mut g: Graph<f64> = Graph::new();
        // B=1, D=2 (one head), P=1; two tokens.
        let q = g.leaf(vec![1.0, 2.0], &[1, 2, 1, 1], false).unwrap();
        let keys = g
            .leaf(vec![3.0, 4.0, -1.0, 0.0], &[1, 2, 2, 1, 1], false)
            .unwrap();
        let s = 2.0_f64.sqrt();
        let y = g.attention_logits(q, keys, 1, s).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 1, 1]);
        assert!((g.data(y)[0] - 11.0 / s).abs() < 1e-12);
        assert!((g.data(y)[1] - -1.0 / s).abs() < 1e-12);
    }

    #[test]
    fn logits_split_channels_into_heads() {
        let mut g: Graph<f64> = Graph::new();
        // D=2, A=2 -> d_k=1; each head dots one channel.
        let q = g.leaf(vec![2.0, 5.0], &[1, 2, 1, 1], false).unwrap();
        let keys = g.leaf(vec![10.0, 100.0], &[1, 1, 2, 1, 1], false).unwrap();
        let y = g.attention_logits(q, keys, 2, 1.0).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 1, 1, 1]);
        assert_eq!(g.data(y), &[20.0, 500.0]);
    }

    #[test]
    fn mix_blends_values_with_weights_per_head() {
        let mut g: Graph<f64> = Graph::new();
        // A=1, d_v=2, T=2, P=1; w = [0.25, 0.75].
        let w = g.leaf(vec![0.25, 0.75], &[1, 1, 2, 1, 1], false).unwrap();
        let v = g
            .leaf(vec![4.0, 8.0, 8.0, 16.0], &[1, 2, 2, 1, 1], false)
            .unwrap();
        let y = g.attention_mix(w, v, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 1, 1]);
        assert_eq!(g.data(y), &[0.25 * 4.0 + 0.75 * 8.0, 0.25 * 8.0 + 0.75 * 16.0]);
    }

    #[test]
    fn logits_and_mix_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (b, a, dk, dv, t, h, w) = (1, 2, 2, 2, 3, 1, 2);
        let d = a * dk;
        let dval = a * dv;
        let q0: Vec<f64> = (0..b * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let k0: Vec<f64> = (0..b * t * d * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let v0: Vec<f64> = (0..b * t * dval * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let build = |g: &mut Graph<f64>, q: Vec<f64>, k: Vec<f64>, v: Vec<f64>, rg: bool| {
            let qid = g.leaf(q, &[b, d, h, w], rg).unwrap();
            let kid = g.leaf(k, &[b, t, d, h, w], rg).unwrap();
            let vid = g.leaf(v, &[b, t, dval, h, w], rg).unwrap();
            let logits = g.attention_logits(qid, kid, a, (dk as f64).sqrt()).unwrap();
            let weights = g.softmax_axis(logits, 2).unwrap();
            let mixed = g.attention_mix(weights, vid, a).unwrap();
            let s = g.sum(mixed);
            (qid, kid, vid, s)
        };

        let mut g: Graph<f64> = Graph::new();
        let (qid, kid, vid, s) = build(&mut g, q0.clone(), k0.clone(), v0.clone(), true);
        g.backward(s).unwrap();

        let eval = |q: &[f64], k: &[f64], v: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let (_, _, _, s) = build(&mut g, q.to_vec(), k.to_vec(), v.to_vec(), false);
            g.data(s)[0]
        };

        let eps = 1e-6;
        let checks: Vec<(&[f64], TensorId)> = vec![(&q0, qid), (&k0, kid), (&v0, vid)];
        for (vals, id) in checks {
            let dx = g.grad(id).unwrap();
            for i in 0..vals.len() {
                let mut plus = vals.to_vec();
                plus[i] += eps;
                let mut minus = vals.to_vec();
                minus[i] -= eps;
                let (numeric, analytic) = match id {
                    _ if id == qid => (
                        (eval(&plus, &k0, &v0) - eval(&minus, &k0, &v0)) / (2.0 * eps),
                        dx[i],
                    ),
                    _ if id == kid => (
                        (eval(&q0, &plus, &v0) - eval(&q0, &minus, &v0)) / (2.0 * eps),
                        dx[i],
                    ),
                    _ => (
                        (eval(&q0, &k0, &plus) - eval(&q0, &k0, &minus)) / (2.0 * eps),
                        dx[i],
                    ),
                };
                assert!(
                    (analytic - numeric).abs() < 1e-6,
                    "grad[{i}] = {analytic} vs numeric {numeric}"
                );
            }
        }
    }
}
