//! 2-D convolution (cross-correlation) via im2col + GEMM.

use super::element::{gemm, Element};
use super::graph::{pair_mut, Graph, Node, Op, TensorId};
use super::{dims4, shape_error, TensorError};

/// Output extent along one axis: `floor((size + 2*pad - k) / stride) + 1`.
fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

impl<E: Element> Graph<E> {
    /// Cross-correlation of `B x Cin x H x W` with `Cout x Cin x k x k`
    /// filters (odd k), zero padding, square stride.
    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId, TensorError> {
        let (b, cin, h, w) = dims4("conv2d", self.shape(input))?;
        let (cout, wcin, kh, kw) = dims4("conv2d", self.shape(weight))?;
        if kh != kw {
            return Err(shape_error(
                "conv2d",
                format!("kernel must be square, got {kh}x{kw}"),
            ));
        }
        let k = kh;
        if k % 2 == 0 {
            return Err(shape_error("conv2d", format!("kernel size {k} must be odd")));
        }
        if wcin != cin {
            return Err(shape_error(
                "conv2d",
                format!("input has {cin} channels but weight expects {wcin}"),
            ));
        }
        if self.shape(bias) != [cout] {
            return Err(shape_error(
                "conv2d",
                format!(
                    "bias shape {:?} does not match {cout} output channels",
                    self.shape(bias)
                ),
            ));
        }
        if stride == 0 {
            return Err(shape_error("conv2d", "stride must be >= 1"));
        }
        let (oh, ow) = match (
            out_extent(h, k, stride, pad),
            out_extent(w, k, stride, pad),
        ) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => {
                return Err(shape_error(
                    "conv2d",
                    format!("input {h}x{w} too small for kernel {k} with padding {pad}"),
                ))
            }
        };

        let ck = cin * k * k;
        let ohw = oh * ow;
        let bohw = b * ohw;
        // All samples share one column matrix so the whole batch is a single
        // GEMM per layer: column (bi*ohw + o) holds sample bi's receptive
        // field at output position o.
        let mut cols = vec![E::zero(); ck * bohw];
        for bi in 0..b {
            let sample = &self.data(input)[bi * cin * h * w..(bi + 1) * cin * h * w];
            im2col(
                sample,
                &mut cols[bi * ohw..],
                bohw,
                cin,
                h,
                w,
                k,
                stride,
                pad,
                oh,
                ow,
            );
        }
        // out_all (Cout x B*OHW) = weight (Cout x CK) * cols (CK x B*OHW)
        let mut out_all = vec![E::zero(); cout * bohw];
        gemm(
            &mut out_all,
            self.data(weight),
            &cols,
            cout,
            ck,
            bohw,
            false,
            false,
            E::one(),
            E::zero(),
        );
        let bias_data = self.data(bias);
        let mut data = vec![E::zero(); b * cout * ohw];
        for bi in 0..b {
            for c in 0..cout {
                let src = &out_all[c * bohw + bi * ohw..c * bohw + (bi + 1) * ohw];
                let dst = &mut data[(bi * cout + c) * ohw..(bi * cout + c + 1) * ohw];
                let bv = bias_data[c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bv;
                }
            }
        }
        let rg = self.any_requires_grad(&[input, weight, bias]);
        Ok(self.push(
            data,
            vec![b, cout, oh, ow],
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
            },
        ))
    }
}

/// Gather the receptive field of every output position into `Cin*k*k` rows
/// of a column matrix whose rows are `row_len` wide; `cols` starts at this
/// sample's first column. Out-of-bounds taps are zero.
#[allow(clippy::too_many_arguments)]
fn im2col<E: Element>(
    sample: &[E],
    cols: &mut [E],
    row_len: usize,
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for c in 0..cin {
        let plane = &sample[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * row_len;
                for oy in 0..oh {
                    let dst = &mut cols[row + oy * ow..row + (oy + 1) * ow];
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, slot) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *slot = if ix < 0 || ix >= w as isize {
                            E::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add one sample's columns back onto an input-shaped gradient: the
/// exact adjoint of [`im2col`], reading the same `row_len`-wide layout.
#[allow(clippy::too_many_arguments)]
fn col2im_add<E: Element>(
    cols: &[E],
    row_len: usize,
    dst: &mut [E],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) {
    for c in 0..cin {
        let plane = &mut dst[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((c * k + ky) * k + kx) * row_len;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &cols[row + oy * ow..row + (oy + 1) * ow];
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst_row[ix as usize] = dst_row[ix as usize] + v;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_conv2d<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    weight: TensorId,
    bias: TensorId,
    stride: usize,
    pad: usize,
) {
    let dy = out.grad.as_deref().unwrap();
    let (b, cout, oh, ow) = (out.shape[0], out.shape[1], out.shape[2], out.shape[3]);
    let ohw = oh * ow;
    let in_shape = ins[input.index()].shape.clone();
    let (cin, h, w) = (in_shape[1], in_shape[2], in_shape[3]);
    let k = ins[weight.index()].shape[2];
    let ck = cin * k * k;

    let bias_node = &mut ins[bias.index()];
    if bias_node.requires_grad {
        let db = bias_node.grad_make();
        for sample in dy.chunks_exact(cout * ohw) {
            for (c, plane) in sample.chunks_exact(ohw).enumerate() {
                let mut acc = E::zero();
                for &d in plane {
                    acc = acc + d;
                }
                db[c] = db[c] + acc;
            }
        }
    }

    let needs_dw = ins[weight.index()].requires_grad;
    let needs_dx = ins[input.index()].requires_grad;
    if !needs_dw && !needs_dx {
        return;
    }
    let bohw = b * ohw;
    // dY regrouped as (Cout x B*OHW) to match the batched column layout.
    let mut dy_all = vec![E::zero(); cout * bohw];
    for bi in 0..b {
        for c in 0..cout {
            dy_all[c * bohw + bi * ohw..c * bohw + (bi + 1) * ohw]
                .copy_from_slice(&dy[(bi * cout + c) * ohw..(bi * cout + c + 1) * ohw]);
        }
    }
    let mut cols = vec![E::zero(); ck * bohw];
    if needs_dw {
        let (inp, wnode) = pair_mut(ins, input.index(), weight.index());
        for bi in 0..b {
            let sample = &inp.data[bi * cin * h * w..(bi + 1) * cin * h * w];
            im2col(
                sample,
                &mut cols[bi * ohw..],
                bohw,
                cin,
                h,
                w,
                k,
                stride,
                pad,
                oh,
                ow,
            );
        }
        // dW (Cout x CK) += dY_all (Cout x B*OHW) * cols^T (B*OHW x CK)
        gemm(
            wnode.grad_make(),
            &dy_all,
            &cols,
            cout,
            bohw,
            ck,
            false,
            true,
            E::one(),
            E::one(),
        );
    }
    if needs_dx {
        let (inp, wnode) = pair_mut(ins, input.index(), weight.index());
        // dcols (CK x B*OHW) = W^T (CK x Cout) * dY_all (Cout x B*OHW)
        gemm(
            &mut cols,
            &wnode.data,
            &dy_all,
            ck,
            cout,
            bohw,
            true,
            false,
            E::one(),
            E::zero(),
        );
        let dx = inp.grad_make();
        for bi in 0..b {
            col2im_add(
                &cols[bi * ohw..],
                bohw,
                &mut dx[bi * cin * h * w..(bi + 1) * cin * h * w],
                cin,
                h,
                w,
                k,
                stride,
                pad,
                oh,
                ow,
            );
        }
    }
}
