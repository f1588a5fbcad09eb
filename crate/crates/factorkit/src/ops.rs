//! Numeric layer kernels: forward and backward passes for conv, max-pool,
//! relu and channel concat.
//!
//! The convolution fast path lowers to im2col plus a matrix multiply with
//! 64-bit accumulation; [`conv2d_oracle`] is the independent brute-force
//! reference with identical semantics (seven plain nested loops, also
//! accumulating in f64). Backward passes flow gradients as f64 end to end
//! and round to f32 only when parameter gradients are emitted.

use crate::graph::{LayerKind, LayerSpec};
use crate::params::ConvParams;
use crate::tensor::Tensor;
use ndarray::Array2;
use std::sync::atomic::{AtomicU64, Ordering};

/// Process-wide count of multiply-accumulates actually performed by the
/// convolution forward paths. Lets tests check that the sequential and
/// parallel executors do identical work. Lane threads increment it
/// concurrently; read it only from quiescent code.
static MAC_COUNTER: AtomicU64 = AtomicU64::new(0);

pub fn macs_executed() -> u64 {
    MAC_COUNTER.load(Ordering::Relaxed)
}

pub fn reset_mac_counter() {
    MAC_COUNTER.store(0, Ordering::Relaxed);
}

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("layer '{layer}': {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("layer '{layer}': kernel {kh}x{kw} larger than padded input {h}x{w}")]
    KernelTooLarge { layer: String, kh: usize, kw: usize, h: usize, w: usize },
    #[error("layer '{layer}': pooling window contains no valid input element")]
    EmptyPoolWindow { layer: String },
    #[error("layer '{layer}': missing parameters")]
    MissingParams { layer: String },
    #[error("layer '{layer}': expected kind {expected}, got {got}")]
    WrongKind { layer: String, expected: &'static str, got: &'static str },
    #[error("expected {expected} output gradient(s), got {got}")]
    GradArity { expected: usize, got: usize },
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("parallel and sequential outputs of '{graph}' differ; data race suspected")]
    ParallelMismatch { graph: String },
    #[error("factor '{factor}' cancelled after a sibling factor failed")]
    Cancelled { factor: String },
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Cost(#[from] crate::cost::CostError),
}

/// Gradient-side tensor: same (b, c, h, w) layout as [`Tensor`] but f64.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Grad {
    pub dims: [usize; 4],
    pub data: Vec<f64>,
}

impl Grad {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Grad { dims, data: vec![0.0; dims.iter().product()] }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        Grad { dims: t.dims(), data: t.iter().map(|&v| v as f64).collect() }
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.dims, self.data.iter().map(|&v| v as f32).collect())
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, h: usize, w: usize) -> usize {
        ((b * self.dims[1] + c) * self.dims[2] + h) * self.dims[3] + w
    }

    pub fn add_assign(&mut self, other: &Grad) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

pub(crate) struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_channels: usize,
}

pub(crate) fn conv_geometry(spec: &LayerSpec) -> Result<ConvGeometry, EngineError> {
    match &spec.kind {
        LayerKind::Conv { kernel, stride, padding, out_channels, .. } => Ok(ConvGeometry {
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
            out_channels: *out_channels,
        }),
        other => Err(EngineError::WrongKind {
            layer: spec.name.clone(),
            expected: "conv",
            got: other.kind_name(),
        }),
    }
}

fn conv_out_dims(
    spec: &LayerSpec,
    input: &Tensor,
    geo: &ConvGeometry,
) -> Result<(usize, usize), EngineError> {
    let (kh, kw) = geo.kernel;
    let (ph, pw) = geo.padding;
    if input.height() + 2 * ph < kh || input.width() + 2 * pw < kw {
        return Err(EngineError::KernelTooLarge {
            layer: spec.name.clone(),
            kh,
            kw,
            h: input.height(),
            w: input.width(),
        });
    }
    Ok((
        (input.height() + 2 * ph - kh) / geo.stride.0 + 1,
        (input.width() + 2 * pw - kw) / geo.stride.1 + 1,
    ))
}

fn check_conv_params(
    spec: &LayerSpec,
    input: &Tensor,
    params: &ConvParams,
    geo: &ConvGeometry,
) -> Result<(), EngineError> {
    let wd = params.weight.dims();
    let expected = [geo.out_channels, input.channels(), geo.kernel.0, geo.kernel.1];
    if wd != expected {
        return Err(EngineError::ShapeMismatch {
            layer: spec.name.clone(),
            detail: format!("weight dims {:?} do not match expected {:?}", wd, expected),
        });
    }
    if let Some(b) = &params.bias {
        if b.len() != geo.out_channels {
            return Err(EngineError::ShapeMismatch {
                layer: spec.name.clone(),
                detail: format!("bias length {} does not match out_channels {}", b.len(), geo.out_channels),
            });
        }
    }
    Ok(())
}

/// Zero-padded 2-D convolution via im2col and an f64 matrix multiply.
///
/// `spec` must be a conv layer; its kernel/stride/padding drive the
/// geometry and `params` carries the (Cout, Cin, kh, kw) weights plus the
/// optional bias.
pub fn conv2d_forward(
    input: &Tensor,
    params: &ConvParams,
    spec: &LayerSpec,
) -> Result<Tensor, EngineError> {
    let geo = conv_geometry(spec)?;
    check_conv_params(spec, input, params, &geo)?;
    let (oh, ow) = conv_out_dims(spec, input, &geo)?;
    let (kh, kw) = geo.kernel;
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let (cin, h, w) = (input.channels(), input.height(), input.width());
    let cout = geo.out_channels;
    let k = cin * kh * kw;
    let n_px = oh * ow;

    // Weight matrix (Cout x K); the (i, ky, kx) row-major flattening of the
    // weight tensor matches the im2col row order.
    let w_mat = Array2::from_shape_vec(
        (cout, k),
        params.weight.iter().map(|&v| v as f64).collect(),
    )
    .expect("weight dims verified above");
    let bias: Option<Vec<f64>> =
        params.bias.as_ref().map(|b| b.iter().map(|&v| v as f64).collect());

    // Bound the im2col buffer to ~32 MiB of f64 per chunk.
    let chunk = (4_194_304 / k.max(1)).clamp(1, n_px.max(1));
    let mut out = Tensor::zeros([input.batch(), cout, oh, ow]);
    let mut col = vec![0.0f64; k * chunk];

    for b in 0..input.batch() {
        let in_base = b * cin * h * w;
        let in_data = &input.as_slice()[in_base..in_base + cin * h * w];
        let mut px0 = 0;
        while px0 < n_px {
            let cols = chunk.min(n_px - px0);
            // im2col: row r = (c*kh + ky)*kw + kx, one column per output px.
            for c in 0..cin {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let r = (c * kh + ky) * kw + kx;
                        let row = &mut col[r * cols..(r + 1) * cols];
                        for (j, slot) in row.iter_mut().enumerate() {
                            let px = px0 + j;
                            let oy = px / ow;
                            let ox = px % ow;
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            *slot = if iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < w
                            {
                                in_data[(c * h + iy as usize) * w + ix as usize] as f64
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
            let col_mat = ndarray::ArrayView2::from_shape((k, cols), &col[..k * cols])
                .expect("im2col buffer sized to k*cols");
            let prod = w_mat.dot(&col_mat); // (Cout x cols), f64 accumulation
            let out_data = out.as_mut_slice();
            for oc in 0..cout {
                let bias_v = bias.as_ref().map_or(0.0, |b| b[oc]);
                let dst_base = ((b * cout + oc) * oh * ow) + px0;
                for j in 0..cols {
                    out_data[dst_base + j] = (prod[(oc, j)] + bias_v) as f32;
                }
            }
            px0 += cols;
        }
    }
    MAC_COUNTER.fetch_add(
        (input.batch() * cout * k * n_px) as u64,
        Ordering::Relaxed,
    );
    Ok(out)
}

/// Brute-force reference convolution: plain nested loops over batch, output
/// channel, output position, input channel and kernel position, with f64
/// accumulation. Same contract as [`conv2d_forward`]; intentionally slow.
pub fn conv2d_oracle(
    input: &Tensor,
    params: &ConvParams,
    spec: &LayerSpec,
) -> Result<Tensor, EngineError> {
    let geo = conv_geometry(spec)?;
    check_conv_params(spec, input, params, &geo)?;
    let (oh, ow) = conv_out_dims(spec, input, &geo)?;
    let (kh, kw) = geo.kernel;
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let (cin, h, w) = (input.channels(), input.height(), input.width());
    let cout = geo.out_channels;

    let mut out = Tensor::zeros([input.batch(), cout, oh, ow]);
    for b in 0..input.batch() {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || iy as usize >= h || ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                acc += input.at(b, ic, iy as usize, ix as usize) as f64
                                    * params.weight.at(oc, ic, ky, kx) as f64;
                            }
                        }
                    }
                    if let Some(bias) = &params.bias {
                        acc += bias[oc] as f64;
                    }
                    *out.at_mut(b, oc, oy, ox) = acc as f32;
                }
            }
        }
    }
    MAC_COUNTER.fetch_add(
        (input.batch() * cout * cin * kh * kw * oh * ow) as u64,
        Ordering::Relaxed,
    );
    Ok(out)
}

/// (input gradient, weight gradient, optional bias gradient)
pub(crate) type ConvBackward = (Grad, Vec<f64>, Option<Vec<f64>>);

/// Conv backward: gradients with respect to input, weights and bias, all
/// accumulated in f64.
pub(crate) fn conv2d_backward(
    input: &Tensor,
    params: &ConvParams,
    spec: &LayerSpec,
    grad_out: &Grad,
) -> Result<ConvBackward, EngineError> {
    let geo = conv_geometry(spec)?;
    let (kh, kw) = geo.kernel;
    let (sh, sw) = geo.stride;
    let (ph, pw) = geo.padding;
    let (cin, h, w) = (input.channels(), input.height(), input.width());
    let cout = geo.out_channels;
    let [gb, gc, goh, gow] = grad_out.dims;
    let (oh, ow) = conv_out_dims(spec, input, &geo)?;
    if gb != input.batch() || gc != cout || goh != oh || gow != ow {
        return Err(EngineError::ShapeMismatch {
            layer: spec.name.clone(),
            detail: format!(
                "output gradient dims {:?} do not match conv output [{}, {}, {}, {}]",
                grad_out.dims,
                input.batch(),
                cout,
                oh,
                ow
            ),
        });
    }

    let mut grad_in = Grad::zeros(input.dims());
    let mut grad_w = vec![0.0f64; cout * cin * kh * kw];
    let mut grad_b = params.bias.as_ref().map(|_| vec![0.0f64; cout]);

    for b in 0..gb {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out.data[grad_out.index(b, oc, oy, ox)];
                    if let Some(gbias) = grad_b.as_mut() {
                        gbias[oc] += g;
                    }
                    for ic in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * sh + ky) as isize - ph as isize;
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if iy < 0 || iy as usize >= h || ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                let (iy, ix) = (iy as usize, ix as usize);
                                let widx = ((oc * cin + ic) * kh + ky) * kw + kx;
                                grad_w[widx] += g * input.at(b, ic, iy, ix) as f64;
                                let iidx = grad_in.index(b, ic, iy, ix);
                                grad_in.data[iidx] += g * params.weight.at(oc, ic, ky, kx) as f64;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_w, grad_b))
}

/// Per-window maximum with padding treated as minus infinity. Returns the
/// pooled tensor plus, per output element, the flat input index of the
/// selected maximum (ties go to the first element in (h, w) scan order).
pub fn maxpool_forward(input: &Tensor, spec: &LayerSpec) -> Result<(Tensor, Vec<usize>), EngineError> {
    let (kernel, stride, padding) = match &spec.kind {
        LayerKind::MaxPool { kernel, stride, padding } => (*kernel, *stride, *padding),
        other => {
            return Err(EngineError::WrongKind {
                layer: spec.name.clone(),
                expected: "maxpool",
                got: other.kind_name(),
            })
        }
    };
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let (c, h, w) = (input.channels(), input.height(), input.width());
    if h + 2 * ph < kh || w + 2 * pw < kw {
        return Err(EngineError::KernelTooLarge { layer: spec.name.clone(), kh, kw, h, w });
    }
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;

    let mut out = Tensor::zeros([input.batch(), c, oh, ow]);
    let mut argmax = vec![0usize; input.batch() * c * oh * ow];
    let mut j = 0usize;
    for b in 0..input.batch() {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_idx: Option<usize> = None;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if iy < 0 || iy as usize >= h || ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = input.index(b, ch, iy as usize, ix as usize);
                            let v = input.as_slice()[idx];
                            if best_idx.is_none() || v > best {
                                best = v;
                                best_idx = Some(idx);
                            }
                        }
                    }
                    let Some(best_idx) = best_idx else {
                        return Err(EngineError::EmptyPoolWindow { layer: spec.name.clone() });
                    };
                    *out.at_mut(b, ch, oy, ox) = best;
                    argmax[j] = best_idx;
                    j += 1;
                }
            }
        }
    }
    Ok((out, argmax))
}

/// Routes each output gradient to the input position that won its window.
pub(crate) fn maxpool_backward(argmax: &[usize], grad_out: &Grad, input_dims: [usize; 4]) -> Grad {
    let mut grad_in = Grad::zeros(input_dims);
    for (j, &idx) in argmax.iter().enumerate() {
        grad_in.data[idx] += grad_out.data[j];
    }
    grad_in
}

/// Elementwise max(x, 0).
pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(input.dims(), data)
}

/// Gradient mask from the cached pre-activation: positions with
/// pre-activation > 0 pass the gradient through, all others block it.
pub(crate) fn relu_backward(pre_activation: &Tensor, grad_out: &Grad) -> Grad {
    let data = pre_activation
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Grad { dims: grad_out.dims, data }
}

/// Channel-axis concatenation in input order. All inputs must agree on
/// batch and spatial dimensions.
pub fn concat_forward(inputs: &[&Tensor], layer_name: &str) -> Result<Tensor, EngineError> {
    let first = inputs.first().ok_or_else(|| EngineError::ShapeMismatch {
        layer: layer_name.to_string(),
        detail: "concat has no inputs".to_string(),
    })?;
    let (b, h, w) = (first.batch(), first.height(), first.width());
    for t in inputs {
        if t.batch() != b || t.height() != h || t.width() != w {
            return Err(EngineError::ShapeMismatch {
                layer: layer_name.to_string(),
                detail: format!(
                    "concat inputs disagree: {:?} vs {:?}",
                    first.dims(),
                    t.dims()
                ),
            });
        }
    }
    let c_total: usize = inputs.iter().map(|t| t.channels()).sum();
    let mut out = Tensor::zeros([b, c_total, h, w]);
    let plane = h * w;
    for bi in 0..b {
        let mut c_off = 0usize;
        for t in inputs {
            let block = t.channels() * plane;
            let src = &t.as_slice()[bi * block..(bi + 1) * block];
            let dst_base = (bi * c_total + c_off) * plane;
            out.as_mut_slice()[dst_base..dst_base + block].copy_from_slice(src);
            c_off += t.channels();
        }
    }
    Ok(out)
}

/// Extracts channels [c0, c0+c_len) from a tensor; used to split concat
/// gradients and to verify that concat is invertible.
pub fn channel_slice(t: &Tensor, c0: usize, c_len: usize) -> Tensor {
    assert!(c0 + c_len <= t.channels());
    let (b, h, w) = (t.batch(), t.height(), t.width());
    let plane = h * w;
    let mut out = Tensor::zeros([b, c_len, h, w]);
    for bi in 0..b {
        let src_base = (bi * t.channels() + c0) * plane;
        let dst_base = bi * c_len * plane;
        out.as_mut_slice()[dst_base..dst_base + c_len * plane]
            .copy_from_slice(&t.as_slice()[src_base..src_base + c_len * plane]);
    }
    out
}

/// f64 twin of [`channel_slice`] for gradient splitting.
pub(crate) fn channel_slice_grad(g: &Grad, c0: usize, c_len: usize) -> Grad {
    let [b, c, h, w] = g.dims;
    assert!(c0 + c_len <= c);
    let plane = h * w;
    let mut out = Grad::zeros([b, c_len, h, w]);
    for bi in 0..b {
        let src_base = (bi * c + c0) * plane;
        let dst_base = bi * c_len * plane;
        out.data[dst_base..dst_base + c_len * plane]
            .copy_from_slice(&g.data[src_base..src_base + c_len * plane]);
    }
    out
}
