//! Dense projections: fully-connected layers and per-position channel maps.

use super::element::{gemm, Element};
use super::graph::{pair_mut, Graph, Node, Op, TensorId};
use super::{dims4, dims5, shape_error, TensorError};

impl<E: Element> Graph<E> {
    /// Fully-connected layer: `B x Din` times `Din x Dout` plus a `Dout` bias.
    pub fn linear(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (b, din) = match self.shape(input) {
            [b, d] => (*b, *d),
            other => {
                return Err(shape_error(
                    "linear",
                    format!("input must be rank 2, got {other:?}"),
                ))
            }
        };
        let (wd, dout) = match self.shape(weight) {
            [i, o] => (*i, *o),
            other => {
                return Err(shape_error(
                    "linear",
                    format!("weight must be rank 2, got {other:?}"),
                ))
            }
        };
        if wd != din {
            return Err(shape_error(
                "linear",
                format!("input feature size {din} does not match weight rows {wd}"),
            ));
        }
        if self.shape(bias) != [dout] {
            return Err(shape_error(
                "linear",
                format!(
                    "bias shape {:?} does not match output size {dout}",
                    self.shape(bias)
                ),
            ));
        }
        let mut data = vec![E::zero(); b * dout];
        gemm(
            &mut data,
            self.data(input),
            self.data(weight),
            b,
            din,
            dout,
            false,
            false,
            E::one(),
            E::zero(),
        );
        let bias_data = self.data(bias);
        for row in data.chunks_exact_mut(dout) {
            for (y, &bv) in row.iter_mut().zip(bias_data) {
                *y = *y + bv;
            }
        }
        let rg = self.any_requires_grad(&[input, weight, bias]);
        Ok(self.push(
            data,
            vec![b, dout],
            rg,
            Op::Linear {
                input,
                weight,
                bias,
            },
        ))
    }

    /// Per-position channel projection: `B x C x H x W` through a `C x D`
    /// weight to `B x D x H x W`. No bias; every spatial position shares the
    /// same map.
    pub fn channel_project(
        &mut self,
        input: TensorId,
        weight: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (b, c, h, w) = dims4("channel_project", self.shape(input))?;
        let d = check_project_weight("channel_project", self.shape(weight), c)?;
        let data = project_slices(self.data(weight), self.data(input), b, c, d, h * w);
        let rg = self.any_requires_grad(&[input, weight]);
        Ok(self.push(
            data,
            vec![b, d, h, w],
            rg,
            Op::ChannelProject { input, weight },
        ))
    }

    /// Channel projection applied to every token of a `B x M x C x H x W`
    /// stack, producing `B x M x D x H x W`.
    pub fn token_project(
        &mut self,
        input: TensorId,
        weight: TensorId,
    ) -> Result<TensorId, TensorError> {
        let (b, m, c, h, w) = dims5("token_project", self.shape(input))?;
        let d = check_project_weight("token_project", self.shape(weight), c)?;
        let data = project_slices(self.data(weight), self.data(input), b * m, c, d, h * w);
        let rg = self.any_requires_grad(&[input, weight]);
        Ok(self.push(
            data,
            vec![b, m, d, h, w],
            rg,
            Op::TokenProject { input, weight },
        ))
    }
}

/// Gather `slices` row-major `R x P` matrices into one `R x slices*P`
/// matrix, so a per-slice product becomes a single wide GEMM.
fn gather_slices<E: Element>(src: &[E], slices: usize, r: usize, p: usize) -> Vec<E> {
    let sp = slices * p;
    let mut all = vec![E::zero(); r * sp];
    for s in 0..slices {
        for ri in 0..r {
            all[ri * sp + s * p..ri * sp + (s + 1) * p]
                .copy_from_slice(&src[(s * r + ri) * p..(s * r + ri + 1) * p]);
        }
    }
    all
}

/// Apply the shared `C x D` weight to `slices` independent `C x P` matrices
/// (`out_s = W^T * in_s`), batching them into one GEMM.
fn project_slices<E: Element>(
    weight: &[E],
    input: &[E],
    slices: usize,
    c: usize,
    d: usize,
    p: usize,
) -> Vec<E> {
    let sp = slices * p;
    let x_all = gather_slices(input, slices, c, p);
    let mut out_all = vec![E::zero(); d * sp];
    gemm(&mut out_all, weight, &x_all, d, c, sp, true, false, E::one(), E::zero());
    let mut data = vec![E::zero(); slices * d * p];
    for s in 0..slices {
        for di in 0..d {
            data[(s * d + di) * p..(s * d + di + 1) * p]
                .copy_from_slice(&out_all[di * sp + s * p..di * sp + (s + 1) * p]);
        }
    }
    data
}

fn check_project_weight(
    op: &'static str,
    shape: &[usize],
    channels: usize,
) -> Result<usize, TensorError> {
    match shape {
        [c, d] if *c == channels => Ok(*d),
        other => Err(shape_error(
            op,
            format!("weight shape {other:?} does not project {channels} channels"),
        )),
    }
}

pub(crate) fn backward_linear<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    weight: TensorId,
    bias: TensorId,
) {
    let dy = out.grad.as_deref().unwrap();
    let (b, dout) = (out.shape[0], out.shape[1]);
    let din = ins[weight.index()].shape[0];

    if ins[input.index()].requires_grad {
        let (inp, w) = pair_mut(ins, input.index(), weight.index());
        // dIn (B x Din) += dY (B x Dout) * W^T (Dout x Din)
        gemm(
            inp.grad_make(),
            dy,
            &w.data,
            b,
            dout,
            din,
            false,
            true,
            E::one(),
            E::one(),
        );
    }
    if ins[weight.index()].requires_grad {
        let (inp, w) = pair_mut(ins, input.index(), weight.index());
        // dW (Din x Dout) += In^T (Din x B) * dY (B x Dout)
        gemm(
            w.grad_make(),
            &inp.data,
            dy,
            din,
            b,
            dout,
            true,
            false,
            E::one(),
            E::one(),
        );
    }
    let bias_node = &mut ins[bias.index()];
    if bias_node.requires_grad {
        let db = bias_node.grad_make();
        for row in dy.chunks_exact(dout) {
            for (g, &d) in db.iter_mut().zip(row) {
                *g = *g + d;
            }
        }
    }
}

pub(crate) fn backward_channel_project<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    weight: TensorId,
) {
    let dy = out.grad.as_deref().unwrap();
    let d = out.shape[1];
    let p = out.shape[2] * out.shape[3];
    let b = out.shape[0];
    let c = ins[input.index()].shape[1];
    backward_project_slices(ins, dy, input, weight, b, c, d, p);
}

pub(crate) fn backward_token_project<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    weight: TensorId,
) {
    let dy = out.grad.as_deref().unwrap();
    let (b, m, d, h, w) = (
        out.shape[0],
        out.shape[1],
        out.shape[2],
        out.shape[3],
        out.shape[4],
    );
    let c = ins[input.index()].shape[2];
    backward_project_slices(ins, dy, input, weight, b * m, c, d, h * w);
}

/// Shared backward for the projection ops: the input is viewed as `slices`
/// independent `C x P` matrices, each mapped by the same `C x D` weight.
/// Both gradient products run as one batch-wide GEMM over the gathered
/// `R x slices*P` layout.
#[allow(clippy::too_many_arguments)]
fn backward_project_slices<E: Element>(
    ins: &mut [Node<E>],
    dy: &[E],
    input: TensorId,
    weight: TensorId,
    slices: usize,
    c: usize,
    d: usize,
    p: usize,
) {
    let sp = slices * p;
    let needs_dx = ins[input.index()].requires_grad;
    let needs_dw = ins[weight.index()].requires_grad;
    if !needs_dx && !needs_dw {
        return;
    }
    let dy_all = gather_slices(dy, slices, d, p);
    if needs_dx {
        let (inp, w) = pair_mut(ins, input.index(), weight.index());
        // dIn_all (C x S*P) = W (C x D) * dY_all (D x S*P)
        let mut dx_all = vec![E::zero(); c * sp];
        gemm(
            &mut dx_all,
            &w.data,
            &dy_all,
            c,
            d,
            sp,
            false,
            false,
            E::one(),
            E::zero(),
        );
        let dx = inp.grad_make();
        for s in 0..slices {
            for ci in 0..c {
                let src = &dx_all[ci * sp + s * p..ci * sp + (s + 1) * p];
                let dst = &mut dx[(s * c + ci) * p..(s * c + ci + 1) * p];
                for (g, &v) in dst.iter_mut().zip(src) {
                    *g = *g + v;
                }
            }
        }
    }
    if needs_dw {
        let (inp, w) = pair_mut(ins, input.index(), weight.index());
        let x_all = gather_slices(&inp.data, slices, c, p);
        // dW (C x D) += In_all (C x S*P) * dY_all^T (S*P x D)
        gemm(
            w.grad_make(),
            &x_all,
            &dy_all,
            c,
            sp,
            d,
            false,
            true,
            E::one(),
            E::one(),
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_matches_by_hand_result() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[2, 2], true).unwrap();
        let w = g.leaf(vec![1.0, 0.0, 0.5, -1.0], &[2, 2], true).unwrap();
        let b = g.leaf(vec![10.0, 20.0], &[2], true).unwrap();
        let y = g.linear(x, w, b).unwrap();
        // Row 0: [1*1 + 2*0.5, 1*0 + 2*(-1)] + bias = [2, -2] + [10, 20]
        assert_eq!(g.data(y), &[12.0, 18.0, 15.0, 16.0]);
    }

    #[test]
    fn linear_backward_matches_by_hand_result() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[1, 2], true).unwrap();
        let w = g.leaf(vec![3.0, 4.0, 5.0, 6.0], &[2, 2], true).unwrap();
        let b = g.leaf(vec![0.0, 0.0], &[2], true).unwrap();
        let y = g.linear(x, w, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        // dY = [1, 1]; dX = dY * W^T = [3+4, 5+6]
        assert_eq!(g.grad(x).unwrap(), &[7.0, 11.0]);
        // dW = X^T * dY
        assert_eq!(g.grad(w).unwrap(), &[1.0, 1.0, 2.0, 2.0]);
        assert_eq!(g.grad(b).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn linear_rejects_mismatched_shapes() {
        let mut g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0], &[1, 2], false).unwrap();
        let w = g.leaf(vec![1.0; 6], &[3, 2], false).unwrap();
        let b = g.leaf(vec![0.0, 0.0], &[2], false).unwrap();
        assert!(g.linear(x, w, b).is_err());
    }

    #[test]
    fn channel_project_applies_same_map_everywhere() {
        let mut g: Graph<f64> = Graph::new();
        // 1 x 2 x 1 x 2: channel 0 = [1, 2], channel 1 = [3, 4]
        let x = g.leaf(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 1, 2], true).unwrap();
        // C=2 -> D=1 with weights [10, 100]
        let w = g.leaf(vec![10.0, 100.0], &[2, 1], true).unwrap();
        let y = g.channel_project(x, w).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 2]);
        assert_eq!(g.data(y), &[310.0, 420.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[10.0, 10.0, 100.0, 100.0]);
        assert_eq!(g.grad(w).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn token_project_maps_each_token_independently() {
        let mut g: Graph<f64> = Graph::new();
        // 1 x 2 tokens x 1 channel x 1 x 1
        let x = g.leaf(vec![2.0, 5.0], &[1, 2, 1, 1, 1], true).unwrap();
        let w = g.leaf(vec![3.0, -1.0], &[1, 2], true).unwrap();
        let y = g.token_project(x, w).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2, 1, 1]);
        assert_eq!(g.data(y), &[6.0, -2.0, 15.0, -5.0]);
    }
}
