//! Finite-difference verification of the analytic backward pass.
//!
//! The analytic side is the production f32 [`crate::exec::backward`]. The
//! numeric side evaluates the network in f64 with independent direct-loop
//! kernels and central differences, so the comparison isolates backward-pass
//! bugs instead of float noise. The loss is the sum of all output elements.
//!
//! ReLU kinks and max-pool ties make the loss non-differentiable at isolated
//! points; a parameter whose +eps and -eps evaluations disagree on any
//! activation decision (relu sign pattern or pool argmax) is flagged and
//! excluded rather than failed.

use crate::exec::{backward, forward_cached};
use crate::graph::{topo_order, GraphSpec, LayerKind, LayerSpec};
use crate::ops::{EngineError, Grad};
use crate::params::Parameters;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fmt::Write as _;

/// Desk-scale guard: finite differences run two forward passes per
/// parameter, so graphs above this size are rejected.
pub const MAX_PARAMS: usize = 10_000;

const REL_ERR_FLOOR: f64 = 1e-8;

/// Per-layer outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradCheck {
    pub layer: String,
    pub checked: usize,
    pub excluded: usize,
    pub max_rel_err: f64,
}

/// Outcome of [`grad_check`]: the maximum relative error between analytic
/// and central-difference gradients over all non-excluded parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub epsilon: f64,
    pub threshold: f64,
    pub per_layer: Vec<LayerGradCheck>,
    pub checked_total: usize,
    pub excluded_total: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,params_checked,params_excluded,max_rel_err\n");
        for row in &self.per_layer {
            let _ = writeln!(out, "{},{},{},{:.3e}", row.layer, row.checked, row.excluded, row.max_rel_err);
        }
        out
    }
}

/// relative error |a - n| / max(|a|, |n|, 1e-8)
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the analytic gradient of every parameter against central
/// differences with the given epsilon. Parameters sitting on an activation
/// kink are excluded (counted, not failed).
pub fn grad_check(
    graph: &GraphSpec,
    params: &Parameters,
    input: &Tensor,
    epsilon: f64,
    threshold: f64,
) -> Result<GradCheckReport, EngineError> {
    let total = params.total_param_count();
    if total > MAX_PARAMS {
        return Err(EngineError::ShapeMismatch {
            layer: graph.name.clone(),
            detail: format!("{} parameters exceed the gradient-check budget of {}", total, MAX_PARAMS),
        });
    }

    // Analytic gradients from the production backward pass.
    let cache = forward_cached(graph, params, input)?;
    let ones: Vec<Tensor> = cache.outputs().iter().map(|t| Tensor::filled(t.dims(), 1.0)).collect();
    let analytic = backward(graph, params, &cache, &ones)?;

    let mut shadow = ShadowNet::new(graph, params, input)?;

    let order = topo_order(graph)?;
    let by_name: HashMap<&str, &LayerSpec> = graph.layers().map(|l| (l.name.as_str(), l)).collect();

    let mut per_layer = Vec::new();
    let mut max_rel_err = 0.0f64;
    let mut checked_total = 0usize;
    let mut excluded_total = 0usize;

    for name in &order {
        let layer = by_name[name.as_str()];
        if !matches!(layer.kind, LayerKind::Conv { .. }) {
            continue;
        }
        let p = params
            .get(name)
            .ok_or_else(|| EngineError::MissingParams { layer: name.clone() })?;
        let a = &analytic.by_layer[name.as_str()];
        let mut row = LayerGradCheck { layer: name.clone(), checked: 0, excluded: 0, max_rel_err: 0.0 };

        for i in 0..p.weight.len() {
            match shadow.central_difference(name, false, i, epsilon)? {
                Some(fd) => {
                    row.checked += 1;
                    row.max_rel_err = row.max_rel_err.max(rel_err(a.weight.as_slice()[i] as f64, fd));
                }
                None => row.excluded += 1,
            }
        }
        if p.bias.is_some() {
            let ab = a.bias.as_ref().expect("backward emits bias grads for biased convs");
            for (i, &analytic_bias) in ab.iter().enumerate() {
                match shadow.central_difference(name, true, i, epsilon)? {
                    Some(fd) => {
                        row.checked += 1;
                        row.max_rel_err = row.max_rel_err.max(rel_err(analytic_bias as f64, fd));
                    }
                    None => row.excluded += 1,
                }
            }
        }
        checked_total += row.checked;
        excluded_total += row.excluded;
        max_rel_err = max_rel_err.max(row.max_rel_err);
        per_layer.push(row);
    }

    Ok(GradCheckReport {
        epsilon,
        threshold,
        per_layer,
        checked_total,
        excluded_total,
        max_rel_err,
        passed: max_rel_err <= threshold,
    })
}

/// f64 re-implementation of the forward pass with direct loops, independent
/// of the production im2col path. Tracks a hash of every activation
/// decision so kink crossings can be detected.
struct ShadowNet<'g> {
    graph: &'g GraphSpec,
    order: Vec<String>,
    weights: HashMap<String, (usize, [usize; 4], Vec<f64>)>, // layer -> (cin, weight dims, data)
    biases: HashMap<String, Vec<f64>>,
    input: Grad,
}

impl<'g> ShadowNet<'g> {
    fn new(graph: &'g GraphSpec, params: &Parameters, input: &Tensor) -> Result<Self, EngineError> {
        let order = topo_order(graph)?;
        let mut weights = HashMap::new();
        let mut biases = HashMap::new();
        for layer in graph.layers() {
            if matches!(layer.kind, LayerKind::Conv { .. }) {
                let p = params
                    .get(&layer.name)
                    .ok_or_else(|| EngineError::MissingParams { layer: layer.name.clone() })?;
                let d = p.weight.dims();
                weights.insert(
                    layer.name.clone(),
                    (d[1], d, p.weight.iter().map(|&v| v as f64).collect()),
                );
                if let Some(b) = &p.bias {
                    biases.insert(layer.name.clone(), b.iter().map(|&v| v as f64).collect());
                }
            }
        }
        Ok(ShadowNet { graph, order, weights, biases, input: Grad::from_tensor(input) })
    }

    /// Central difference for one parameter, or `None` when the two
    /// evaluations disagree on an activation decision (kink crossing).
    fn central_difference(
        &mut self,
        layer: &str,
        bias: bool,
        index: usize,
        epsilon: f64,
    ) -> Result<Option<f64>, EngineError> {
        let (loss_plus, sig_plus) = {
            self.nudge(layer, bias, index, epsilon);
            let r = self.eval();
            self.nudge(layer, bias, index, -epsilon);
            r?
        };
        let (loss_minus, sig_minus) = {
            self.nudge(layer, bias, index, -epsilon);
            let r = self.eval();
            self.nudge(layer, bias, index, epsilon);
            r?
        };
        if sig_plus != sig_minus {
            return Ok(None);
        }
        Ok(Some((loss_plus - loss_minus) / (2.0 * epsilon)))
    }

    fn nudge(&mut self, layer: &str, bias: bool, index: usize, delta: f64) {
        if bias {
            self.biases.get_mut(layer).expect("biased layer")[index] += delta;
        } else {
            self.weights.get_mut(layer).expect("conv layer").2[index] += delta;
        }
    }

    /// Evaluates loss (sum of all graph outputs) plus the activation
    /// signature of the whole pass.
    fn eval(&self) -> Result<(f64, u64), EngineError> {
        let by_name: HashMap<&str, &LayerSpec> =
            self.graph.layers().map(|l| (l.name.as_str(), l)).collect();
        let mut env: HashMap<&str, Grad> = HashMap::with_capacity(self.order.len());
        let mut sig = Fnv64::new();

        for name in &self.order {
            let layer = by_name[name.as_str()];
            let out = match &layer.kind {
                LayerKind::Conv { kernel, stride, padding, out_channels, .. } => {
                    let x = self.resolve(&env, &layer.inputs[0]);
                    conv64(
                        x,
                        &self.weights[name.as_str()].2,
                        self.biases.get(name.as_str()).map(|b| b.as_slice()),
                        *kernel,
                        *stride,
                        *padding,
                        *out_channels,
                    )
                }
                LayerKind::MaxPool { kernel, stride, padding } => {
                    let x = self.resolve(&env, &layer.inputs[0]);
                    let (out, argmax) = pool64(x, *kernel, *stride, *padding, name)?;
                    for &i in &argmax {
                        sig.write_usize(i);
                    }
                    out
                }
                LayerKind::Relu => {
                    let x = self.resolve(&env, &layer.inputs[0]);
                    let mut out = Grad::zeros(x.dims);
                    for (o, &v) in out.data.iter_mut().zip(&x.data) {
                        let on = v > 0.0;
                        sig.write_bool(on);
                        *o = if on { v } else { 0.0 };
                    }
                    out
                }
                LayerKind::ConcatChannels => {
                    let xs: Vec<&Grad> =
                        layer.inputs.iter().map(|i| self.resolve(&env, i)).collect();
                    concat64(&xs)
                }
            };
            env.insert(name.as_str(), out);
        }

        let mut loss = 0.0f64;
        for out_name in self.graph.output_layers() {
            loss += env[out_name].data.iter().sum::<f64>();
        }
        Ok((loss, sig.finish()))
    }

    fn resolve<'e>(&'e self, env: &'e HashMap<&str, Grad>, input: &crate::graph::LayerInput) -> &'e Grad {
        match input.as_layer_name() {
            Some(n) => &env[n],
            None => &self.input,
        }
    }
}

fn conv64(
    x: &Grad,
    weight: &[f64],
    bias: Option<&[f64]>,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    cout: usize,
) -> Grad {
    let [b, cin, h, w] = x.dims;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = Grad::zeros([b, cout, oh, ow]);
    for bi in 0..b {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.map_or(0.0, |bb| bb[oc]);
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * sh + ky) as isize - ph as isize;
                            if iy < 0 || iy as usize >= h {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * sw + kx) as isize - pw as isize;
                                if ix < 0 || ix as usize >= w {
                                    continue;
                                }
                                acc += x.data[x.index(bi, ic, iy as usize, ix as usize)]
                                    * weight[((oc * cin + ic) * kh + ky) * kw + kx];
                            }
                        }
                    }
                    let idx = out.index(bi, oc, oy, ox);
                    out.data[idx] = acc;
                }
            }
        }
    }
    out
}

fn pool64(
    x: &Grad,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    layer: &str,
) -> Result<(Grad, Vec<usize>), EngineError> {
    let [b, c, h, w] = x.dims;
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    let oh = (h + 2 * ph - kh) / sh + 1;
    let ow = (w + 2 * pw - kw) / sw + 1;
    let mut out = Grad::zeros([b, c, oh, ow]);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for bi in 0..b {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx: Option<usize> = None;
                    for ky in 0..kh {
                        let iy = (oy * sh + ky) as isize - ph as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * sw + kx) as isize - pw as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let idx = x.index(bi, ch, iy as usize, ix as usize);
                            let v = x.data[idx];
                            if best_idx.is_none() || v > best {
                                best = v;
                                best_idx = Some(idx);
                            }
                        }
                    }
                    let Some(best_idx) = best_idx else {
                        return Err(EngineError::EmptyPoolWindow { layer: layer.to_string() });
                    };
                    let oidx = out.index(bi, ch, oy, ox);
                    out.data[oidx] = best;
                    argmax.push(best_idx);
                }
            }
        }
    }
    Ok((out, argmax))
}

fn concat64(xs: &[&Grad]) -> Grad {
    let [b, _, h, w] = xs[0].dims;
    let c_total: usize = xs.iter().map(|x| x.dims[1]).sum();
    let plane = h * w;
    let mut out = Grad::zeros([b, c_total, h, w]);
    for bi in 0..b {
        let mut c_off = 0usize;
        for x in xs {
            let block = x.dims[1] * plane;
            let src = &x.data[bi * block..(bi + 1) * block];
            let dst = (bi * c_total + c_off) * plane;
            out.data[dst..dst + block].copy_from_slice(src);
            c_off += x.dims[1];
        }
    }
    out
}

struct Fnv64(u64);

impl Fnv64 {
    fn new() -> Self {
        Fnv64(0xcbf29ce484222325)
    }

    #[inline]
    fn write_byte(&mut self, b: u8) {
        self.0 ^= b as u64;
        self.0 = self.0.wrapping_mul(0x100000001b3);
    }

    #[inline]
    fn write_bool(&mut self, v: bool) {
        self.write_byte(v as u8);
    }

    #[inline]
    fn write_usize(&mut self, v: usize) {
        for b in (v as u64).to_le_bytes() {
            self.write_byte(b);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Factor, LayerInput, Shape};
    use crate::params::{init_params, ConvParams};
    use rand::{Rng, SeedableRng};

    #[test]
    fn linear_conv_only_graph_is_near_exact() {
        let g = GraphSpec {
            name: "linear".into(),
            input_shape: Shape::new(2, 6, 6),
            stem: vec![
                LayerSpec::conv("c1", LayerInput::GraphInput, (3, 3), (1, 1), (1, 1), 3, true),
                LayerSpec::conv("c2", LayerInput::layer("c1"), (3, 3), (2, 2), (1, 1), 4, true),
            ],
            factors: vec![],
            trailing: None,
        };
        let p = init_params(&g, 11).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let input = Tensor::from_vec([1, 2, 6, 6], (0..72).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let report = grad_check(&g, &p, &input, 1e-3, 1e-4).unwrap();
        assert_eq!(report.excluded_total, 0);
        assert!(report.passed, "max rel err {} above 1e-4", report.max_rel_err);
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn mixed_graph_with_factors_passes_at_1e_3() {
        let g = GraphSpec {
            name: "mixed".into(),
            input_shape: Shape::new(2, 8, 8),
            stem: vec![
                LayerSpec::conv("s1", LayerInput::GraphInput, (3, 3), (1, 1), (1, 1), 3, true),
                LayerSpec::relu("s1r", LayerInput::layer("s1")),
            ],
            factors: vec![
                Factor {
                    name: "f1".into(),
                    body: vec![
                        LayerSpec::maxpool("f1p", LayerInput::layer("s1r"), (2, 2), (2, 2), (0, 0)),
                        LayerSpec::conv("f1c", LayerInput::layer("f1p"), (3, 3), (1, 1), (1, 1), 2, true),
                        LayerSpec::relu("f1r", LayerInput::layer("f1c")),
                    ],
                    entry: "f1p".into(),
                    exit: "f1r".into(),
                },
                Factor {
                    name: "f2".into(),
                    body: vec![
                        LayerSpec::conv("f2c", LayerInput::layer("s1r"), (5, 5), (2, 2), (2, 2), 2, false),
                        LayerSpec::relu("f2r", LayerInput::layer("f2c")),
                    ],
                    entry: "f2c".into(),
                    exit: "f2r".into(),
                },
            ],
            trailing: None,
        };
        let p = init_params(&g, 21).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let input =
            Tensor::from_vec([1, 2, 8, 8], (0..128).map(|_| rng.gen_range(0.0..1.0)).collect());
        let report = grad_check(&g, &p, &input, 1e-3, 1e-3).unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn relu_kink_is_flagged_and_excluded_not_failed() {
        // 1x2 kernel with weights (1, -1) on a constant row: pre-activation
        // is exactly 0, so +eps/-eps flip the relu mask.
        let g = GraphSpec {
            name: "kink".into(),
            input_shape: Shape::new(1, 1, 2),
            stem: vec![
                LayerSpec::conv("c", LayerInput::GraphInput, (1, 2), (1, 1), (0, 0), 1, false),
                LayerSpec::relu("r", LayerInput::layer("c")),
            ],
            factors: vec![],
            trailing: None,
        };
        let mut p = Parameters::new();
        p.insert("c", ConvParams { weight: Tensor::from_vec([1, 1, 1, 2], vec![1.0, -1.0]), bias: None });
        let input = Tensor::from_vec([1, 1, 1, 2], vec![2.0, 2.0]);
        let report = grad_check(&g, &p, &input, 1e-3, 1e-3).unwrap();
        assert_eq!(report.excluded_total, 2, "both weights straddle the kink");
        assert!(report.passed, "kink must be excluded, not failed");
    }

    #[test]
    fn param_budget_is_enforced() {
        let g = GraphSpec {
            name: "big".into(),
            input_shape: Shape::new(8, 8, 8),
            stem: vec![LayerSpec::conv("c", LayerInput::GraphInput, (5, 5), (1, 1), (2, 2), 64, true)],
            factors: vec![],
            trailing: None,
        };
        let p = init_params(&g, 1).unwrap();
        assert!(p.total_param_count() > MAX_PARAMS);
        let input = Tensor::zeros([1, 8, 8, 8]);
        assert!(grad_check(&g, &p, &input, 1e-3, 1e-3).is_err());
    }
}
