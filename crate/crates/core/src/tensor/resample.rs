//! Spatial rescaling and token-stack assembly.
//!
//! Maps are `B x C x H x W`; token stacks are `B x M x C x H x W` with the
//! token axis second, so one `(b, token)` slab is contiguous.

use super::element::Element;
use super::graph::{Graph, Node, Op, TensorId};
use super::{dims4, dims5, shape_error, TensorError};

impl<E: Element> Graph<E> {
    /// Replicate each pixel into an `r x r` block: `B x C x H x W` to
    /// `B x C x rH x rW`.
    pub fn nearest_upsample(
        &mut self,
        input: TensorId,
        factor: usize,
    ) -> Result<TensorId, TensorError> {
        if factor < 1 {
            return Err(TensorError::BadUpsampleFactor);
        }
        let (b, c, h, w) = dims4("nearest_upsample", self.shape(input))?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.data(input);
        let mut data = vec![E::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let sy = oy / factor;
                for ox in 0..ow {
                    dp[oy * ow + ox] = sp[sy * w + ox / factor];
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            data,
            vec![b, c, oh, ow],
            rg,
            Op::NearestUpsample { input, factor },
        ))
    }

    /// Keep the top-left element of each `r x r` window: `B x C x H x W` to
    /// `B x C x H/r x W/r`. The ratio must divide both spatial extents.
    pub fn nearest_downsample(
        &mut self,
        input: TensorId,
        factor: usize,
    ) -> Result<TensorId, TensorError> {
        if factor < 1 {
            return Err(TensorError::BadUpsampleFactor);
        }
        let (b, c, h, w) = dims4("nearest_downsample", self.shape(input))?;
        check_divides("nearest_downsample", factor, h)?;
        check_divides("nearest_downsample", factor, w)?;
        let (oh, ow) = (h / factor, w / factor);
        let src = self.data(input);
        let mut data = vec![E::zero(); b * c * oh * ow];
        for plane in 0..b * c {
            let sp = &src[plane * h * w..(plane + 1) * h * w];
            let dp = &mut data[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    dp[oy * ow + ox] = sp[oy * factor * w + ox * factor];
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            data,
            vec![b, c, oh, ow],
            rg,
            Op::NearestDownsample { input, factor },
        ))
    }

    /// Rearrange an `B x C x H x W` map into `r*r` tokens of shape
    /// `C x H/r x W/r`: token `t = u*r + v` holds element `(c, y, x)` taken
    /// from map position `(c, y*r + u, x*r + v)`. A bijection.
    pub fn space_to_depth_tokens(
        &mut self,
        input: TensorId,
        ratio: usize,
    ) -> Result<TensorId, TensorError> {
        if ratio < 1 {
            return Err(TensorError::BadUpsampleFactor);
        }
        let (b, c, h, w) = dims4("space_to_depth_tokens", self.shape(input))?;
        check_divides("space_to_depth_tokens", ratio, h)?;
        check_divides("space_to_depth_tokens", ratio, w)?;
        let (oh, ow) = (h / ratio, w / ratio);
        let m = ratio * ratio;
        let src = self.data(input);
        let mut data = vec![E::zero(); src.len()];
        for bi in 0..b {
            for t in 0..m {
                let (u, v) = (t / ratio, t % ratio);
                for ci in 0..c {
                    let sp = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    let dst_base = ((bi * m + t) * c + ci) * oh * ow;
                    for y in 0..oh {
                        for x in 0..ow {
                            data[dst_base + y * ow + x] = sp[(y * ratio + u) * w + x * ratio + v];
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            data,
            vec![b, m, c, oh, ow],
            rg,
            Op::SpaceToDepth { input, ratio },
        ))
    }

    /// Inverse of [`Graph::space_to_depth_tokens`]: `B x r*r x C x h x w`
    /// back to the `B x C x h*r x w*r` map, elementwise exact.
    pub fn depth_to_space_map(
        &mut self,
        input: TensorId,
        ratio: usize,
    ) -> Result<TensorId, TensorError> {
        if ratio < 1 {
            return Err(TensorError::BadUpsampleFactor);
        }
        let (b, m, c, h, w) = dims5("depth_to_space_map", self.shape(input))?;
        if m != ratio * ratio {
            return Err(shape_error(
                "depth_to_space_map",
                format!("{m} tokens cannot form an {ratio}x{ratio} grid"),
            ));
        }
        let (oh, ow) = (h * ratio, w * ratio);
        let src = self.data(input);
        let mut data = vec![E::zero(); src.len()];
        for bi in 0..b {
            for t in 0..m {
                let (u, v) = (t / ratio, t % ratio);
                for ci in 0..c {
                    let src_base = ((bi * m + t) * c + ci) * h * w;
                    let dp = &mut data[(bi * c + ci) * oh * ow..(bi * c + ci + 1) * oh * ow];
                    for y in 0..h {
                        for x in 0..w {
                            dp[(y * ratio + u) * ow + x * ratio + v] = src[src_base + y * w + x];
                        }
                    }
                }
            }
        }
        let rg = self.requires_grad(input);
        Ok(self.push(
            data,
            vec![b, c, oh, ow],
            rg,
            Op::DepthToSpace { input, ratio },
        ))
    }

    /// Stack token arrays along the token axis. Every input is
    /// `B x M_i x D x H x W` with identical `B`, `D`, `H`, `W`.
    pub fn concat_tokens(&mut self, inputs: &[TensorId]) -> Result<TensorId, TensorError> {
        let first = *inputs.first().ok_or_else(|| {
            shape_error("concat_tokens", "needs at least one input")
        })?;
        let (b, _, d, h, w) = dims5("concat_tokens", self.shape(first))?;
        let mut m_total = 0;
        for &id in inputs {
            let (bi, mi, di, hi, wi) = dims5("concat_tokens", self.shape(id))?;
            if (bi, di, hi, wi) != (b, d, h, w) {
                return Err(shape_error(
                    "concat_tokens",
                    format!(
                        "token stack {:?} does not align with {:?}",
                        self.shape(id),
                        self.shape(first)
                    ),
                ));
            }
            m_total += mi;
        }
        let slab = d * h * w;
        let mut data = vec![E::zero(); b * m_total * slab];
        for bi in 0..b {
            let mut cursor = bi * m_total * slab;
            for &id in inputs {
                let mi = self.shape(id)[1];
                let src = &self.data(id)[bi * mi * slab..(bi + 1) * mi * slab];
                data[cursor..cursor + mi * slab].copy_from_slice(src);
                cursor += mi * slab;
            }
        }
        let rg = self.any_requires_grad(inputs);
        Ok(self.push(
            data,
            vec![b, m_total, d, h, w],
            rg,
            Op::ConcatTokens {
                inputs: inputs.to_vec(),
            },
        ))
    }
}

fn check_divides(op: &'static str, ratio: usize, size: usize) -> Result<(), TensorError> {
    if size % ratio != 0 {
        Err(TensorError::RatioMismatch { op, ratio, size })
    } else {
        Ok(())
    }
}

pub(crate) fn backward_nearest_upsample<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    factor: usize,
) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let (h, w) = (node.shape[2], node.shape[3]);
    let (oh, ow) = (out.shape[2], out.shape[3]);
    let planes = node.shape[0] * node.shape[1];
    let dx = node.grad_make();
    for plane in 0..planes {
        let dpo = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dpi = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            let sy = oy / factor;
            for ox in 0..ow {
                dpi[sy * w + ox / factor] = dpi[sy * w + ox / factor] + dpo[oy * ow + ox];
            }
        }
    }
}

pub(crate) fn backward_nearest_downsample<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    factor: usize,
) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let (h, w) = (node.shape[2], node.shape[3]);
    let (oh, ow) = (out.shape[2], out.shape[3]);
    let planes = node.shape[0] * node.shape[1];
    let dx = node.grad_make();
    for plane in 0..planes {
        let dpo = &dy[plane * oh * ow..(plane + 1) * oh * ow];
        let dpi = &mut dx[plane * h * w..(plane + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let idx = oy * factor * w + ox * factor;
                dpi[idx] = dpi[idx] + dpo[oy * ow + ox];
            }
        }
    }
}

pub(crate) fn backward_space_to_depth<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    ratio: usize,
) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let (b, c, h, w) = (node.shape[0], node.shape[1], node.shape[2], node.shape[3]);
    let (oh, ow) = (h / ratio, w / ratio);
    let m = ratio * ratio;
    let dx = node.grad_make();
    for bi in 0..b {
        for t in 0..m {
            let (u, v) = (t / ratio, t % ratio);
            for ci in 0..c {
                let src_base = ((bi * m + t) * c + ci) * oh * ow;
                let dp = &mut dx[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                for y in 0..oh {
                    for x in 0..ow {
                        let idx = (y * ratio + u) * w + x * ratio + v;
                        dp[idx] = dp[idx] + dy[src_base + y * ow + x];
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_depth_to_space<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    input: TensorId,
    ratio: usize,
) {
    let node = &mut ins[input.index()];
    if !node.requires_grad {
        return;
    }
    let dy = out.grad.as_deref().unwrap();
    let (b, m, c, h, w) = (
        node.shape[0],
        node.shape[1],
        node.shape[2],
        node.shape[3],
        node.shape[4],
    );
    let ow = w * ratio;
    let dx = node.grad_make();
    for bi in 0..b {
        for t in 0..m {
            let (u, v) = (t / ratio, t % ratio);
            for ci in 0..c {
                let dst_base = ((bi * m + t) * c + ci) * h * w;
                let dpo = &dy[(bi * c + ci) * h * ratio * ow..(bi * c + ci + 1) * h * ratio * ow];
                for y in 0..h {
                    for x in 0..w {
                        let idx = dst_base + y * w + x;
                        dx[idx] = dx[idx] + dpo[(y * ratio + u) * ow + x * ratio + v];
                    }
                }
            }
        }
    }
}

pub(crate) fn backward_concat_tokens<E: Element>(
    ins: &mut [Node<E>],
    out: &Node<E>,
    inputs: &[TensorId],
) {
    let dy = out.grad.as_deref().unwrap();
    let (b, m_total) = (out.shape[0], out.shape[1]);
    let slab = out.shape[2] * out.shape[3] * out.shape[4];
    let mut offset = 0;
    for &id in inputs {
        let node = &mut ins[id.index()];
        let mi = node.shape[1];
        if node.requires_grad {
            let dx = node.grad_make();
            for bi in 0..b {
                let src = &dy[(bi * m_total + offset) * slab..(bi * m_total + offset + mi) * slab];
                let dst = &mut dx[bi * mi * slab..(bi + 1) * mi * slab];
                for (g, &d) in dst.iter_mut().zip(src) {
                    *g = *g + d;
                }
            }
        }
        offset += mi;
    }
}
