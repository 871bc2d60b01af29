//! Softmax along an arbitrary axis and the fused sigmoid cross-entropy loss.

use super::element::Element;
use super::graph::{pair_mut, Graph, Node, Op, TensorId};
use super::{shape_error, TensorError};

/// Decompose a shape around `axis` into (outer, n, inner) so that element
/// `(o, i, r)` lives at `(o * n + i) * inner + r`.
pub(crate) fn fiber_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, n, inner)
}

impl<E: Element> Graph<E> {
    /// Softmax along `axis`, computed with max-subtraction.
    pub fn softmax_axis(&mut self, input: TensorId, axis: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(shape_error(
                "softmax_axis",
                format!("axis {axis} out of range for shape {shape:?}"),
            ));
        }
        let (outer, n, inner) = fiber_dims(&shape, axis);
        let src = self.data(input);
        let mut data = vec![E::zero(); src.len()];
        for o in 0..outer {
            for r in 0..inner {
                let base = o * n * inner + r;
                let mut max = src[base];
                for i in 1..n {
                    let v = src[base + i * inner];
                    if v > max {
                        max = v;
                    }
                }
                let mut total = E::zero();
                for i in 0..n {
                    let e = (src[base + i * inner] - max).exp();
                    data[base + i * inner] = e;
                    total = total + e;
                }
                let inv = E::one() / total;
                for i in 0..n {
                    data[base + i * inner] = data[base + i * inner] * inv;
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(data, shape, rg, Op::SoftmaxAxis { input, axis }))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and 0/1 targets,
    /// in the fused stable form `max(z,0) - z*t + ln(1 + exp(-|z|))`.
    ///
    /// Targets must be exactly 0 or 1; see
    /// [`Graph::sigmoid_bce_loss_soft`] for probabilistic targets.
    pub fn sigmoid_bce_loss(
        &mut self,
        logits: TensorId,
        targets: TensorId,
    ) -> Result<TensorId, TensorError> {
        for &t in self.data(targets) {
            if t != E::zero() && t != E::one() {
                return Err(TensorError::TargetNotBinary { value: t.to_f64() });
            }
        }
        self.sigmoid_bce_common(logits, targets)
    }

    /// [`Graph::sigmoid_bce_loss`] with targets allowed anywhere in `[0, 1]`,
    /// for mixed/soft labels.
    pub fn sigmoid_bce_loss_soft(
        &mut self,
        logits: TensorId,
        targets: TensorId,
    ) -> Result<TensorId, TensorError> {
        for &t in self.data(targets) {
            if t < E::zero() || t > E::one() || !t.is_finite() {
                return Err(TensorError::TargetOutOfRange { value: t.to_f64() });
            }
        }
        self.sigmoid_bce_common(logits, targets)
    }

    fn sigmoid_bce_common(
        &mut self,
        logits: TensorId,
        targets: TensorId,
    ) -> Result<TensorId, TensorError> {
        if self.shape(logits) != self.shape(targets) {
            return Err(shape_error(
                "sigmoid_bce_loss",
                format!(
                    "logits {:?} vs targets {:?}",
                    self.shape(logits),
                    self.shape(targets)
                ),
            ));
        }
        let z = self.data(logits);
        let t = self.data(targets);
        let mut total = E::zero();
        for (&zi, &ti) in z.iter().zip(t) {
            let pos = if zi > E::zero() { zi } else { E::zero() };
            total = total + pos - zi * ti + (E::one() + (-zi.abs()).exp()).ln();
        }
        let loss = total * E::from_f64(1.0 / z.len() as f64);
        let rg = self.any_requires_grad(&[logits, targets]);
        Ok(self.push(vec![loss], vec![1], rg, Op::SigmoidBce { logits, targets }))
    }
}

pub(crate) fn backward_softmax_axis<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    axis: usize,
) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let y = &out.data;
    let (outer, n, inner) = fiber_dims(&out.shape, axis);
    let dx = node.grad_make();
    for o in 0..outer {
        for r in 0..inner {
            let base = o * n * inner + r;
            let mut dot = E::zero();
            for i in 0..n {
                let idx = base + i * inner;
                dot = dot + dy[idx] * y[idx];
            }
            for i in 0..n {
                let idx = base + i * inner;
                dx[idx] = dx[idx] + y[idx] * (dy[idx] - dot);
            }
        }
    }
}

pub(crate) fn backward_sigmoid_bce<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    logits: TensorId,
    targets: TensorId,
) {
    let d = out.grad.as_deref().unwrap()[0];
    let numel = ins[logits.index()].data.len();
    let scale = d * E::from_f64(1.0 / numel as f64);
    if ins[logits.index()].requires_grad {
        let (lg, tg) = pair_mut(ins, logits.index(), targets.index());
        let targets_data = &tg.data;
        lg.grad_make();
        let Node { data, grad, .. } = lg;
        let dz = grad.as_deref_mut().unwrap();
        for ((g, &z), &t) in dz.iter_mut().zip(data.iter()).zip(targets_data) {
            // d/dz of the stable form is sigmoid(z) - t.
            let sig = E::one() / (E::one() + (-z).exp());
            *g = *g + scale * (sig - t);
        }
    }
    if ins[targets.index()].requires_grad {
        let (lg, tg) = pair_mut(ins, logits.index(), targets.index());
        let logits_data = &lg.data;
        let dt = tg.grad_make();
        for (g, &z) in dt.iter_mut().zip(logits_data) {
            *g = *g - scale * z;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_uniform_weights() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        let y = g.softmax_axis(x, 0).unwrap();
        assert_eq!(g.data(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, -0.5], &[3], false).unwrap();
        let y = g.softmax_axis(x, 0).unwrap();
        let x2 = g.leaf(vec![101.0, 102.0, 99.5], &[3], false).unwrap();
        let y2 = g.softmax_axis(x2, 0).unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(y2)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_logit_case_matches_closed_form() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![3.0, 4.0], &[2], false).unwrap();
        let y = g.softmax_axis(x, 0).unwrap();
        let e = std::f64::consts::E;
        assert!((g.data(y)[0] - 1.0 / (1.0 + e)).abs() < 1e-4);
        assert!((g.data(y)[1] - e / (1.0 + e)).abs() < 1e-4);
        assert!((g.data(y)[0] - 0.2689).abs() < 5e-5);
        assert!((g.data(y)[1] - 0.7311).abs() < 5e-5);
    }

    #[test]
    fn softmax_rows_sum_to_one_for_arbitrary_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (a, n, b) = (3, 7, 4);
        let data: Vec<f64> = (0..a * n * b).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data, &[a, n, b], false).unwrap();
        let y = g.softmax_axis(x, 1).unwrap();
        for o in 0..a {
            for r in 0..b {
                let mut total = 0.0;
                for i in 0..n {
                    let v = g.data(y)[(o * n + i) * b + r];
                    assert!(v >= 0.0);
                    total += v;
                }
                assert!((total - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let data: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let weights: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();

        // Scalarize with a fixed linear functional so dL/dy is non-uniform.
        let eval = |inp: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(inp.to_vec(), &[2, 3], false).unwrap();
            let y = g.softmax_axis(x, 1).unwrap();
            g.data(y)
                .iter()
                .zip(&weights)
                .map(|(a, b)| a * b)
                .sum()
        };

        // L = softmax(x) · weights, built with the linear op.
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data.clone(), &[2, 3], true).unwrap();
        let y = g.softmax_axis(x, 1).unwrap();
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
    fn zero_logits_cost_ln_two_per_element() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(vec![0.0; 4], &[2, 2], false).unwrap();
        let t = g.leaf(vec![0.0, 1.0, 1.0, 0.0], &[2, 2], false).unwrap();
        let loss = g.sigmoid_bce_loss(z, t).unwrap();
        assert!((g.data(loss)[0] - (2.0_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_cost_nearly_nothing() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(vec![30.0, -30.0], &[1, 2], false).unwrap();
        let t = g.leaf(vec![1.0, 0.0], &[1, 2], false).unwrap();
        let loss = g.sigmoid_bce_loss(z, t).unwrap();
        assert!(g.data(loss)[0] < 1e-12);
    }

    #[test]
    fn fused_loss_matches_naive_two_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let logits: Vec<f64> = (0..20).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let targets: Vec<f64> = (0..20).map(|_| f64::from(rng.gen_range(0..2))).collect();
        let naive: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(&z, &t)| {
                let p = 1.0 / (1.0 + (-z).exp());
                -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
            })
            .sum::<f64>()
            / 20.0;
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(logits, &[2, 10], false).unwrap();
        let t = g.leaf(targets, &[2, 10], false).unwrap();
        let loss = g.sigmoid_bce_loss(z, t).unwrap();
        assert!((g.data(loss)[0] - naive).abs() < 1e-5);
    }

    #[test]
    fn strict_loss_rejects_soft_targets_but_soft_variant_accepts() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(vec![0.0], &[1, 1], false).unwrap();
        let t_soft = g.leaf(vec![0.3], &[1, 1], false).unwrap();
        assert!(matches!(
            g.sigmoid_bce_loss(z, t_soft),
            Err(TensorError::TargetNotBinary { .. })
        ));
        assert!(g.sigmoid_bce_loss_soft(z, t_soft).is_ok());
        let t_bad = g.leaf(vec![1.2], &[1, 1], false).unwrap();
        assert!(matches!(
            g.sigmoid_bce_loss_soft(z, t_bad),
            Err(TensorError::TargetOutOfRange { .. })
        ));
    }

    #[test]
    fn bce_gradient_is_sigmoid_minus_target_over_count() {
        let mut g: Graph<f64> = Graph::new();
        let z = g.leaf(vec![0.5, -1.0], &[1, 2], true).unwrap();
        let t = g.leaf(vec![1.0, 0.0], &[1, 2], false).unwrap();
        let loss = g.sigmoid_bce_loss(z, t).unwrap();
        g.backward(loss).unwrap();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let dz = g.grad(z).unwrap();
        assert!((dz[0] - (sig(0.5) - 1.0) / 2.0).abs() < 1e-12);
        assert!((dz[1] - (sig(-1.0) - 0.0) / 2.0).abs() < 1e-12);
    }
}
