//! Batch normalization over the channel axis of `B x C x H x W` maps.

use super::element::Element;
use super::graph::{Graph, Node, Op, TensorId};
use super::{dims4, shape_error, TensorError};

/// Running statistics for one batchnorm layer. Lives outside the graph:
/// updated by training-mode forward passes, read by eval-mode passes, and
/// serialized with checkpoints.
#[derive(Clone, Debug)]
pub struct BatchNormState<E> {
    pub running_mean: Vec<E>,
    pub running_var: Vec<E>,
    pub momentum: E,
    pub eps: E,
}

impl<E: Element> BatchNormState<E> {
    /// Fresh statistics: mean 0, variance 1, momentum 0.1, eps 1e-5.
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![E::zero(); channels],
            running_var: vec![E::one(); channels],
            momentum: E::from_f64(0.1),
            eps: E::from_f64(1e-5),
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

impl<E: Element> Graph<E> {
    /// Normalize each channel over `(B, H, W)`, then scale by `gamma` and
    /// shift by `beta` (both length `C`).
    ///
    /// Training mode computes batch statistics (biased variance for the
    /// normalization), and folds them into `state` with its momentum, storing
    /// the unbiased variance. Eval mode normalizes with the running
    /// statistics and touches nothing.
    pub fn batchnorm2d(
        &mut self,
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        state: &mut BatchNormState<E>,
        training: bool,
    ) -> Result<TensorId, TensorError> {
        let (b, c, h, w) = dims4("batchnorm2d", self.shape(input))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_error(
                "batchnorm2d",
                format!(
                    "gamma {:?} / beta {:?} must both have shape [{c}]",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if state.channels() != c {
            return Err(shape_error(
                "batchnorm2d",
                format!(
                    "running stats track {} channels but input has {c}",
                    state.channels()
                ),
            ));
        }
        let n = b * h * w;
        let hw = h * w;
        let src = self.data(input);

        let (mean, inv_std) = if training {
            if n < 2 {
                return Err(TensorError::DegenerateBatch { count: n });
            }
            let inv_n = E::from_f64(1.0 / n as f64);
            let mut mean = vec![E::zero(); c];
            let mut var = vec![E::zero(); c];
            for ci in 0..c {
                let mut acc = E::zero();
                for bi in 0..b {
                    let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for &x in plane {
                        acc = acc + x;
                    }
                }
                mean[ci] = acc * inv_n;
            }
            for ci in 0..c {
                let m = mean[ci];
                let mut acc = E::zero();
                for bi in 0..b {
                    let plane = &src[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    for &x in plane {
                        let d = x - m;
                        acc = acc + d * d;
                    }
                }
                var[ci] = acc * inv_n;
            }
            // Fold into the running estimates; the stored variance is the
            // unbiased one, matching what eval mode expects to consume.
            let unbias = E::from_f64(n as f64 / (n as f64 - 1.0));
            let mom = state.momentum;
            let keep = E::one() - mom;
            for ci in 0..c {
                state.running_mean[ci] = keep * state.running_mean[ci] + mom * mean[ci];
                state.running_var[ci] = keep * state.running_var[ci] + mom * var[ci] * unbias;
            }
            let inv_std: Vec<E> = var
                .iter()
                .map(|&v| E::one() / (v + state.eps).sqrt())
                .collect();
            (mean, inv_std)
        } else {
            let mean = state.running_mean.clone();
            let inv_std: Vec<E> = state
                .running_var
                .iter()
                .map(|&v| E::one() / (v + state.eps).sqrt())
                .collect();
            (mean, inv_std)
        };

        let gamma_data = self.data(gamma);
        let beta_data = self.data(beta);
        let mut data = vec![E::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let scale = gamma_data[ci] * inv_std[ci];
                let shift = beta_data[ci] - mean[ci] * scale;
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    data[base + i] = src[base + i] * scale + shift;
                }
            }
        }
        let rg = self.any_requires_grad(&[input, gamma, beta]);
        Ok(self.push(
            data,
            vec![b, c, h, w],
            rg,
            Op::BatchNorm2d {
                input,
                gamma,
                beta,
                mean,
                inv_std,
                training,
            },
        ))
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_batchnorm2d<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    gamma: TensorId,
    beta: TensorId,
    mean: &[E],
    inv_std: &[E],
    training: bool,
) {
    let dy = out.grad.as_deref().unwrap();
    let (b, c, h, w) = (out.shape[0], out.shape[1], out.shape[2], out.shape[3]);
    let hw = h * w;
    let n = b * hw;

    // Per-channel reductions shared by all three gradients:
    //   sum_dy[c]    = Σ dy
    //   sum_dy_xh[c] = Σ dy * x_hat
    let input_data = &ins[input.index()].data;
    let mut sum_dy = vec![E::zero(); c];
    let mut sum_dy_xh = vec![E::zero(); c];
    for ci in 0..c {
        let m = mean[ci];
        let istd = inv_std[ci];
        let mut s = E::zero();
        let mut sx = E::zero();
        for bi in 0..b {
            let base = (bi * c + ci) * hw;
            for i in 0..hw {
                let d = dy[base + i];
                s = s + d;
                sx = sx + d * (input_data[base + i] - m) * istd;
            }
        }
        sum_dy[ci] = s;
        sum_dy_xh[ci] = sx;
    }

    let beta_node = &mut ins[beta.index()];
    if beta_node.requires_grad {
        let db = beta_node.grad_make();
        for ci in 0..c {
            db[ci] = db[ci] + sum_dy[ci];
        }
    }
    let gamma_node = &mut ins[gamma.index()];
    if gamma_node.requires_grad {
        let dg = gamma_node.grad_make();
        for ci in 0..c {
            dg[ci] = dg[ci] + sum_dy_xh[ci];
        }
    }

    if !ins[input.index()].requires_grad {
        return;
    }
    let gamma_data = ins[gamma.index()].data.clone();
    let inv_n = E::from_f64(1.0 / n as f64);
    let inp = &mut ins[input.index()];
    inp.grad_make();
    let input_data = &inp.data;
    let dx = inp.grad.as_deref_mut().unwrap();
    for ci in 0..c {
        let m = mean[ci];
        let istd = inv_std[ci];
        let g = gamma_data[ci];
        if training {
            // dx = (g * istd / n) * (n*dy - Σdy - x_hat * Σ(dy*x_hat))
            let k = g * istd * inv_n;
            let nf = E::from_f64(n as f64);
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    let xh = (input_data[base + i] - m) * istd;
                    let d = dy[base + i];
                    dx[base + i] =
                        dx[base + i] + k * (nf * d - sum_dy[ci] - xh * sum_dy_xh[ci]);
                }
            }
        } else {
            // Running stats are constants in eval mode.
            let k = g * istd;
            for bi in 0..b {
                let base = (bi * c + ci) * hw;
                for i in 0..hw {
                    dx[base + i] = dx[base + i] + k * dy[base + i];
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
    fn constant_channel_maps_to_beta() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![5.0; 8], &[2, 1, 2, 2], false).unwrap();
        let gamma = g.leaf(vec![3.0], &[1], false).unwrap();
        let beta = g.leaf(vec![-1.5], &[1], false).unwrap();
        let mut state = BatchNormState::new(1);
        let y = g.batchnorm2d(x, gamma, beta, &mut state, true).unwrap();
        for &v in g.data(y) {
            assert!((v - -1.5).abs() < 1e-12, "zero-variance channel -> beta, got {v}");
        }
    }

    #[test]
    fn unit_gaussian_input_passes_through() {
        // Zero-mean, unit-population-variance input with gamma=1, beta=0.
        let vals = vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0, -1.0, 1.0];
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vals.clone(), &[2, 1, 2, 2], false).unwrap();
        let gamma = g.leaf(vec![1.0], &[1], false).unwrap();
        let beta = g.leaf(vec![0.0], &[1], false).unwrap();
        let mut state = BatchNormState::new(1);
        let y = g.batchnorm2d(x, gamma, beta, &mut state, true).unwrap();
        for (a, e) in g.data(y).iter().zip(&vals) {
            assert!((a - e).abs() < 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn normalized_moments_match_gamma_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (b, c, h, w) = (4, 3, 5, 5);
        let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-3.0..5.0)).collect();
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data, &[b, c, h, w], false).unwrap();
        let gamma = g.leaf(vec![2.0, 0.5, 1.0], &[3], false).unwrap();
        let beta = g.leaf(vec![0.0, 1.0, -2.0], &[3], false).unwrap();
        let mut state = BatchNormState::new(3);
        let y = g.batchnorm2d(x, gamma, beta, &mut state, true).unwrap();

        let n = (b * h * w) as f64;
        let hw = h * w;
        for ci in 0..c {
            let mut mean = 0.0;
            let mut var = 0.0;
            for bi in 0..b {
                for i in 0..hw {
                    mean += g.data(y)[(bi * c + ci) * hw + i];
                }
            }
            mean /= n;
            for bi in 0..b {
                for i in 0..hw {
                    let d = g.data(y)[(bi * c + ci) * hw + i] - mean;
                    var += d * d;
                }
            }
            var /= n;
            let want_beta = g.data(beta)[ci];
            let want_gamma = g.data(gamma)[ci];
            assert!((mean - want_beta).abs() < 1e-4, "channel {ci} mean {mean}");
            assert!(
                (var.sqrt() - want_gamma).abs() < 1e-4,
                "channel {ci} std {}",
                var.sqrt()
            );
        }
    }

    #[test]
    fn running_stats_fold_with_momentum() {
        let mut g: Graph<f64> = Graph::new();
        // Channel values {0, 2}: mean 1, biased var 1, unbiased var 2.
        let x = g.leaf(vec![0.0, 2.0], &[2, 1, 1, 1], false).unwrap();
        let gamma = g.leaf(vec![1.0], &[1], false).unwrap();
        let beta = g.leaf(vec![0.0], &[1], false).unwrap();
        let mut state = BatchNormState::new(1);
        g.batchnorm2d(x, gamma, beta, &mut state, true).unwrap();
        assert!((state.running_mean[0] - 0.1).abs() < 1e-12);
        assert!((state.running_var[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_mode_uses_running_stats_and_leaves_them_alone() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 3.0], &[2, 1, 1, 1], false).unwrap();
        let gamma = g.leaf(vec![1.0], &[1], false).unwrap();
        let beta = g.leaf(vec![0.0], &[1], false).unwrap();
        let mut state = BatchNormState::new(1);
        state.running_mean[0] = 2.0;
        state.running_var[0] = 4.0;
        let y = g.batchnorm2d(x, gamma, beta, &mut state, false).unwrap();
        let istd = 1.0 / (4.0_f64 + 1e-5).sqrt();
        assert!((g.data(y)[0] - (1.0 - 2.0) * istd).abs() < 1e-12);
        assert!((g.data(y)[1] - (3.0 - 2.0) * istd).abs() < 1e-12);
        assert_eq!(state.running_mean[0], 2.0);
        assert_eq!(state.running_var[0], 4.0);
    }

    #[test]
    fn single_element_batch_is_degenerate_in_train_mode() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0], &[1, 1, 1, 1], false).unwrap();
        let gamma = g.leaf(vec![1.0], &[1], false).unwrap();
        let beta = g.leaf(vec![0.0], &[1], false).unwrap();
        let mut state = BatchNormState::new(1);
        assert!(matches!(
            g.batchnorm2d(x, gamma, beta, &mut state, true),
            Err(TensorError::DegenerateBatch { count: 1 })
        ));
        // Eval mode has no such restriction.
        assert!(g.batchnorm2d(x, gamma, beta, &mut state, false).is_ok());
    }

    #[test]
    fn train_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (b, c, h, w) = (2, 2, 2, 2);
        let data: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gvals = vec![1.3, 0.7];
        let bvals = vec![0.2, -0.4];

        let eval = |inp: &[f64]| -> f64 {
            let mut g: Graph<f64> = Graph::new();
            let x = g.leaf(inp.to_vec(), &[b, c, h, w], false).unwrap();
            let gamma = g.leaf(gvals.clone(), &[c], false).unwrap();
            let beta = g.leaf(bvals.clone(), &[c], false).unwrap();
            let mut state = BatchNormState::new(c);
            let y = g.batchnorm2d(x, gamma, beta, &mut state, true).unwrap();
            // Relu makes dL/dy non-uniform, exercising the reduction terms.
            let y2 = g.relu(y);
            let s = g.sum(y2);
            g.data(s)[0]
        };

        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(data.clone(), &[b, c, h, w], true).unwrap();
        let gamma = g.leaf(gvals.clone(), &[c], true).unwrap();
        let beta = g.leaf(bvals.clone(), &[c], true).unwrap();
        let mut state = BatchNormState::new(c);
        let y = g.batchnorm2d(x, gamma, beta, &mut state, true).unwrap();
        let y2 = g.relu(y);
        let s = g.sum(y2);
        g.backward(s).unwrap();
        let dx = g.grad(x).unwrap();

        let eps = 1e-6;
        for i in 0..data.len() {
            let mut plus = data.clone();
            plus[i] += eps;
            let mut minus = data.clone();
            minus[i] -= eps;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            assert!(
                (dx[i] - numeric).abs() < 1e-5,
                "dInput[{i}] = {} vs numeric {numeric}",
                dx[i]
            );
        }
    }
}
