//! Graph-level execution: forward passes over a whole [`GraphSpec`] with
//! cached intermediates, and exact reverse-mode backward passes.
//!
//! Execution follows [`topo_order`], so results are deterministic. Layers
//! are pure functions of their inputs; any execution order that respects
//! the edges produces bitwise-identical tensors, which is what makes the
//! parallel factor executor equivalent to this sequential one.

use crate::graph::{topo_order, GraphSpec, LayerKind, LayerSpec};
use crate::ops::{self, EngineError, Grad};
use crate::params::Parameters;
use crate::tensor::Tensor;
use std::collections::HashMap;

/// Evaluates one layer given its resolved input tensors. Returns the output
/// plus the argmax table for max-pool layers (needed by backward).
pub(crate) fn eval_layer(
    layer: &LayerSpec,
    inputs: &[&Tensor],
    params: &Parameters,
) -> Result<(Tensor, Option<Vec<usize>>), EngineError> {
    match &layer.kind {
        LayerKind::Conv { .. } => {
            let p = params
                .get(&layer.name)
                .ok_or_else(|| EngineError::MissingParams { layer: layer.name.clone() })?;
            Ok((ops::conv2d_forward(inputs[0], p, layer)?, None))
        }
        LayerKind::MaxPool { .. } => {
            let (out, argmax) = ops::maxpool_forward(inputs[0], layer)?;
            Ok((out, Some(argmax)))
        }
        LayerKind::Relu => Ok((ops::relu_forward(inputs[0]), None)),
        LayerKind::ConcatChannels => Ok((ops::concat_forward(inputs, &layer.name)?, None)),
    }
}

/// Static dry-run of a forward pass: walks the graph in topological order
/// checking shapes, parameter presence and pooling windows, and fails with
/// exactly the error the executor would hit first. Lets the parallel
/// executor report failures deterministically before spawning threads.
pub(crate) fn preflight(
    graph: &GraphSpec,
    params: &Parameters,
    input: &Tensor,
) -> Result<(), EngineError> {
    use crate::graph::Shape;
    if input.shape() != graph.input_shape {
        return Err(EngineError::ShapeMismatch {
            layer: format!("@input of '{}'", graph.name),
            detail: format!("input tensor is {}, graph expects {}", input.shape(), graph.input_shape),
        });
    }
    let order = topo_order(graph)?;
    let by_name: HashMap<&str, &LayerSpec> = graph.layers().map(|l| (l.name.as_str(), l)).collect();
    let mut shapes: HashMap<&str, Shape> = HashMap::new();
    for name in &order {
        let layer = by_name[name.as_str()];
        let ins: Vec<Shape> = layer
            .inputs
            .iter()
            .map(|i| match i.as_layer_name() {
                Some(n) => shapes[n],
                None => graph.input_shape,
            })
            .collect();
        let out = match &layer.kind {
            LayerKind::Conv { kernel, stride, padding, out_channels, has_bias } => {
                let p = params
                    .get(name)
                    .ok_or_else(|| EngineError::MissingParams { layer: name.clone() })?;
                let expected = [*out_channels, ins[0].channels, kernel.0, kernel.1];
                if p.weight.dims() != expected {
                    return Err(EngineError::ShapeMismatch {
                        layer: name.clone(),
                        detail: format!(
                            "weight dims {:?} do not match expected {:?}",
                            p.weight.dims(),
                            expected
                        ),
                    });
                }
                if *has_bias != p.bias.is_some()
                    || p.bias.as_ref().is_some_and(|b| b.len() != *out_channels)
                {
                    return Err(EngineError::ShapeMismatch {
                        layer: name.clone(),
                        detail: "bias does not match layer spec".to_string(),
                    });
                }
                windowed(name, ins[0], *kernel, *stride, *padding, *out_channels)?
            }
            LayerKind::MaxPool { kernel, stride, padding } => {
                let out = windowed(name, ins[0], *kernel, *stride, *padding, ins[0].channels)?;
                // A window lying entirely in padding has no valid element:
                // either the first window ends before the input starts or
                // the last window starts after it ends.
                let last_h = (out.height - 1) * stride.0;
                let last_w = (out.width - 1) * stride.1;
                if padding.0 >= kernel.0
                    || padding.1 >= kernel.1
                    || last_h >= ins[0].height + padding.0
                    || last_w >= ins[0].width + padding.1
                {
                    return Err(EngineError::EmptyPoolWindow { layer: name.clone() });
                }
                out
            }
            LayerKind::Relu => ins[0],
            LayerKind::ConcatChannels => {
                let first = ins[0];
                for s in &ins[1..] {
                    if s.height != first.height || s.width != first.width {
                        return Err(EngineError::ShapeMismatch {
                            layer: name.clone(),
                            detail: format!("concat inputs disagree: {} vs {}", first, s),
                        });
                    }
                }
                Shape::new(ins.iter().map(|s| s.channels).sum(), first.height, first.width)
            }
        };
        shapes.insert(layer.name.as_str(), out);
    }
    Ok(())
}

fn windowed(
    name: &str,
    input: crate::graph::Shape,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
    out_channels: usize,
) -> Result<crate::graph::Shape, EngineError> {
    let (kh, kw) = kernel;
    let (ph, pw) = padding;
    if input.height + 2 * ph < kh || input.width + 2 * pw < kw {
        return Err(EngineError::KernelTooLarge {
            layer: name.to_string(),
            kh,
            kw,
            h: input.height,
            w: input.width,
        });
    }
    Ok(crate::graph::Shape::new(
        out_channels,
        (input.height + 2 * ph - kh) / stride.0 + 1,
        (input.width + 2 * pw - kw) / stride.1 + 1,
    ))
}

/// Forward pass state: every layer's output tensor plus max-pool argmax
/// tables, retained for [`backward`].
pub struct ForwardCache {
    pub(crate) input: Tensor,
    pub(crate) by_layer: HashMap<String, Tensor>,
    pub(crate) argmax: HashMap<String, Vec<usize>>,
    output_names: Vec<String>,
}

impl ForwardCache {
    /// Graph output tensors in declaration order (factor exits for
    /// factorized graphs, sinks for monolithic ones).
    pub fn outputs(&self) -> Vec<&Tensor> {
        self.output_names.iter().map(|n| &self.by_layer[n]).collect()
    }

    pub fn into_outputs(mut self) -> Vec<Tensor> {
        self.output_names
            .iter()
            .map(|n| self.by_layer.remove(n).expect("output cached"))
            .collect()
    }

    pub fn output_names(&self) -> &[String] {
        &self.output_names
    }

    pub fn layer_output(&self, name: &str) -> Option<&Tensor> {
        self.by_layer.get(name)
    }
}

/// Runs the graph in topological order, caching every intermediate.
pub fn forward_cached(
    graph: &GraphSpec,
    params: &Parameters,
    input: &Tensor,
) -> Result<ForwardCache, EngineError> {
    if input.shape() != graph.input_shape {
        return Err(EngineError::ShapeMismatch {
            layer: format!("@input of '{}'", graph.name),
            detail: format!("input tensor is {}, graph expects {}", input.shape(), graph.input_shape),
        });
    }
    let order = topo_order(graph)?;
    let by_name: HashMap<&str, &LayerSpec> = graph.layers().map(|l| (l.name.as_str(), l)).collect();
    let mut cache = ForwardCache {
        input: input.clone(),
        by_layer: HashMap::with_capacity(order.len()),
        argmax: HashMap::new(),
        output_names: graph.output_layers().iter().map(|s| s.to_string()).collect(),
    };
    for name in &order {
        let layer = by_name[name.as_str()];
        let inputs: Vec<&Tensor> = layer
            .inputs
            .iter()
            .map(|i| match i.as_layer_name() {
                Some(n) => &cache.by_layer[n],
                None => &cache.input,
            })
            .collect();
        let (out, argmax) = eval_layer(layer, &inputs, params)?;
        if let Some(a) = argmax {
            cache.argmax.insert(layer.name.clone(), a);
        }
        cache.by_layer.insert(layer.name.clone(), out);
    }
    Ok(cache)
}

/// Forward pass returning only the graph outputs, one tensor per factor
/// exit (or per sink for monolithic graphs).
pub fn forward(
    graph: &GraphSpec,
    params: &Parameters,
    input: &Tensor,
) -> Result<Vec<Tensor>, EngineError> {
    Ok(forward_cached(graph, params, input)?.into_outputs())
}

/// Gradients of one conv layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

/// Result of a backward pass: parameter gradients per conv layer plus the
/// gradient with respect to the graph input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub by_layer: HashMap<String, ConvGrads>,
    pub input_grad: Tensor,
}

/// Exact reverse-mode backward pass. `output_grads` supplies one gradient
/// tensor per graph output, in output order. Gradients flow as f64
/// internally and are rounded to f32 on emission.
pub fn backward(
    graph: &GraphSpec,
    params: &Parameters,
    cache: &ForwardCache,
    output_grads: &[Tensor],
) -> Result<Gradients, EngineError> {
    let order = topo_order(graph)?;
    let by_name: HashMap<&str, &LayerSpec> = graph.layers().map(|l| (l.name.as_str(), l)).collect();

    if output_grads.len() != cache.output_names.len() {
        return Err(EngineError::GradArity {
            expected: cache.output_names.len(),
            got: output_grads.len(),
        });
    }

    // Seed every layer with a zero gradient, then add the output gradients.
    let mut grads: HashMap<&str, Grad> = HashMap::with_capacity(order.len());
    for name in &order {
        grads.insert(name.as_str(), Grad::zeros(cache.by_layer[name.as_str()].dims()));
    }
    for (name, g) in cache.output_names.iter().zip(output_grads) {
        let expected = cache.by_layer[name.as_str()].dims();
        if g.dims() != expected {
            return Err(EngineError::ShapeMismatch {
                layer: name.clone(),
                detail: format!(
                    "output gradient dims {:?} do not match output dims {:?}",
                    g.dims(),
                    expected
                ),
            });
        }
        grads.get_mut(name.as_str()).expect("seeded above").add_assign(&Grad::from_tensor(g));
    }

    let mut by_layer: HashMap<String, ConvGrads> = HashMap::new();
    let mut input_grad = Grad::zeros(cache.input.dims());

    for name in order.iter().rev() {
        let layer = by_name[name.as_str()];
        let g = grads.remove(name.as_str()).expect("seeded above");
        let push_to = |target: &crate::graph::LayerInput, piece: &Grad, grads: &mut HashMap<&str, Grad>, input_grad: &mut Grad| {
            match target.as_layer_name() {
                Some(n) => grads.get_mut(n).expect("upstream seeded").add_assign(piece),
                None => input_grad.add_assign(piece),
            }
        };
        match &layer.kind {
            LayerKind::Conv { .. } => {
                let p = params
                    .get(&layer.name)
                    .ok_or_else(|| EngineError::MissingParams { layer: layer.name.clone() })?;
                let conv_in = resolve_input(cache, &layer.inputs[0]);
                let (grad_in, gw, gb) = ops::conv2d_backward(conv_in, p, layer, &g)?;
                by_layer.insert(
                    layer.name.clone(),
                    ConvGrads {
                        weight: Tensor::from_vec(
                            p.weight.dims(),
                            gw.iter().map(|&v| v as f32).collect(),
                        ),
                        bias: gb.map(|b| b.iter().map(|&v| v as f32).collect()),
                    },
                );
                push_to(&layer.inputs[0], &grad_in, &mut grads, &mut input_grad);
            }
            LayerKind::MaxPool { .. } => {
                let pool_in = resolve_input(cache, &layer.inputs[0]);
                let grad_in = ops::maxpool_backward(&cache.argmax[&layer.name], &g, pool_in.dims());
                push_to(&layer.inputs[0], &grad_in, &mut grads, &mut input_grad);
            }
            LayerKind::Relu => {
                let pre = resolve_input(cache, &layer.inputs[0]);
                let grad_in = ops::relu_backward(pre, &g);
                push_to(&layer.inputs[0], &grad_in, &mut grads, &mut input_grad);
            }
            LayerKind::ConcatChannels => {
                let mut c0 = 0usize;
                for input in &layer.inputs {
                    let t = resolve_input(cache, input);
                    let piece = ops::channel_slice_grad(&g, c0, t.channels());
                    push_to(input, &piece, &mut grads, &mut input_grad);
                    c0 += t.channels();
                }
            }
        }
    }

    Ok(Gradients { by_layer, input_grad: input_grad.to_tensor() })
}

fn resolve_input<'c>(cache: &'c ForwardCache, input: &crate::graph::LayerInput) -> &'c Tensor {
    match input.as_layer_name() {
        Some(n) => &cache.by_layer[n],
        None => &cache.input,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Factor, LayerInput, Shape};
    use crate::params::{ConvParams, Parameters};

    fn relu_only() -> GraphSpec {
        GraphSpec {
            name: "relu-only".into(),
            input_shape: Shape::new(1, 2, 2),
            stem: vec![LayerSpec::relu("r", LayerInput::GraphInput)],
            factors: vec![],
            trailing: None,
        }
    }

    #[test]
    fn single_relu_graph_clamps_negatives() {
        let g = relu_only();
        let input = Tensor::from_vec([1, 1, 2, 2], vec![-1.0, 2.0, -3.0, 4.0]);
        let outs = forward(&g, &Parameters::new(), &input).unwrap();
        assert_eq!(outs.len(), 1);
        assert_eq!(outs[0].as_slice(), &[0.0, 2.0, 0.0, 4.0]);
    }

    #[test]
    fn input_shape_mismatch_is_rejected() {
        let g = relu_only();
        let input = Tensor::zeros([1, 2, 2, 2]);
        assert!(matches!(
            forward(&g, &Parameters::new(), &input),
            Err(EngineError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn missing_params_error_names_the_layer() {
        let g = GraphSpec {
            name: "conv".into(),
            input_shape: Shape::new(1, 2, 2),
            stem: vec![LayerSpec::conv("c9", LayerInput::GraphInput, (1, 1), (1, 1), (0, 0), 1, false)],
            factors: vec![],
            trailing: None,
        };
        match forward(&g, &Parameters::new(), &Tensor::zeros([1, 1, 2, 2])) {
            Err(EngineError::MissingParams { layer }) => assert_eq!(layer, "c9"),
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn two_factor_graph_yields_two_outputs_in_declaration_order() {
        let g = GraphSpec {
            name: "two".into(),
            input_shape: Shape::new(1, 2, 2),
            stem: vec![],
            factors: vec![
                Factor {
                    name: "f1".into(),
                    body: vec![LayerSpec::relu("a", LayerInput::GraphInput)],
                    entry: "a".into(),
                    exit: "a".into(),
                },
                Factor {
                    name: "f2".into(),
                    body: vec![LayerSpec::maxpool(
                        "b",
                        LayerInput::GraphInput,
                        (2, 2),
                        (1, 1),
                        (0, 0),
                    )],
                    entry: "b".into(),
                    exit: "b".into(),
                },
            ],
            trailing: None,
        };
        let input = Tensor::from_vec([1, 1, 2, 2], vec![1.0, -2.0, 3.0, -4.0]);
        let outs = forward(&g, &Parameters::new(), &input).unwrap();
        assert_eq!(outs.len(), 2);
        assert_eq!(outs[0].as_slice(), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(outs[1].as_slice(), &[3.0]);
    }

    fn scalar_conv_graph(bias: bool) -> (GraphSpec, Parameters) {
        let g = GraphSpec {
            name: "scalar".into(),
            input_shape: Shape::new(1, 1, 1),
            stem: vec![LayerSpec::conv("c", LayerInput::GraphInput, (1, 1), (1, 1), (0, 0), 1, bias)],
            factors: vec![],
            trailing: None,
        };
        let mut p = Parameters::new();
        p.insert(
            "c",
            ConvParams {
                weight: Tensor::from_vec([1, 1, 1, 1], vec![2.5]),
                bias: bias.then(|| vec![0.25]),
            },
        );
        (g, p)
    }

    #[test]
    fn scalar_conv_gradients_follow_product_rule() {
        let (g, p) = scalar_conv_graph(true);
        let input = Tensor::from_vec([1, 1, 1, 1], vec![3.0]);
        let cache = forward_cached(&g, &p, &input).unwrap();
        let grad = Tensor::from_vec([1, 1, 1, 1], vec![1.5]);
        let grads = backward(&g, &p, &cache, &[grad]).unwrap();
        let cg = &grads.by_layer["c"];
        // dL/dw = x * g, dL/db = g, dL/dx = w * g
        assert_eq!(cg.weight.as_slice(), &[3.0 * 1.5]);
        assert_eq!(cg.bias.as_ref().unwrap().as_slice(), &[1.5]);
        assert_eq!(grads.input_grad.as_slice(), &[2.5 * 1.5]);
    }

    #[test]
    fn zero_output_grads_give_zero_param_grads() {
        let (g, p) = scalar_conv_graph(true);
        let input = Tensor::from_vec([1, 1, 1, 1], vec![3.0]);
        let cache = forward_cached(&g, &p, &input).unwrap();
        let grads = backward(&g, &p, &cache, &[Tensor::zeros([1, 1, 1, 1])]).unwrap();
        let cg = &grads.by_layer["c"];
        assert!(cg.weight.iter().all(|&v| v == 0.0));
        assert!(cg.bias.as_ref().unwrap().iter().all(|&v| v == 0.0));
        assert!(grads.input_grad.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        // input -> relu a; a feeds two 1x1 convs (weights 1 and 2), both
        // graph outputs. dL/dinput = (1 + 2) on positive inputs.
        let g = GraphSpec {
            name: "fanout".into(),
            input_shape: Shape::new(1, 1, 2),
            stem: vec![
                LayerSpec::relu("a", LayerInput::GraphInput),
                LayerSpec::conv("c1", LayerInput::layer("a"), (1, 1), (1, 1), (0, 0), 1, false),
                LayerSpec::conv("c2", LayerInput::layer("a"), (1, 1), (1, 1), (0, 0), 1, false),
            ],
            factors: vec![],
            trailing: None,
        };
        let mut p = Parameters::new();
        p.insert("c1", ConvParams { weight: Tensor::from_vec([1, 1, 1, 1], vec![1.0]), bias: None });
        p.insert("c2", ConvParams { weight: Tensor::from_vec([1, 1, 1, 1], vec![2.0]), bias: None });
        let input = Tensor::from_vec([1, 1, 1, 2], vec![5.0, -5.0]);
        let cache = forward_cached(&g, &p, &input).unwrap();
        let ones = Tensor::filled([1, 1, 1, 2], 1.0);
        let grads = backward(&g, &p, &cache, &[ones.clone(), ones]).unwrap();
        assert_eq!(grads.input_grad.as_slice(), &[3.0, 0.0]);
    }

    #[test]
    fn concat_backward_splits_by_channel() {
        let g = GraphSpec {
            name: "cat".into(),
            input_shape: Shape::new(2, 1, 1),
            stem: vec![
                LayerSpec::conv("a", LayerInput::GraphInput, (1, 1), (1, 1), (0, 0), 1, false),
                LayerSpec::conv("b", LayerInput::GraphInput, (1, 1), (1, 1), (0, 0), 1, false),
                LayerSpec::concat("j", vec![LayerInput::layer("a"), LayerInput::layer("b")]),
            ],
            factors: vec![],
            trailing: None,
        };
        let mut p = Parameters::new();
        p.insert("a", ConvParams { weight: Tensor::from_vec([1, 2, 1, 1], vec![1.0, 0.0]), bias: None });
        p.insert("b", ConvParams { weight: Tensor::from_vec([1, 2, 1, 1], vec![0.0, 1.0]), bias: None });
        let input = Tensor::from_vec([1, 2, 1, 1], vec![10.0, 20.0]);
        let cache = forward_cached(&g, &p, &input).unwrap();
        let grad = Tensor::from_vec([1, 2, 1, 1], vec![7.0, 11.0]);
        let grads = backward(&g, &p, &cache, &[grad]).unwrap();
        // channel 0 grad (7) flows through conv a, channel 1 grad (11) through b
        assert_eq!(grads.by_layer["a"].weight.as_slice(), &[70.0, 140.0]);
        assert_eq!(grads.by_layer["b"].weight.as_slice(), &[110.0, 220.0]);
        assert_eq!(grads.input_grad.as_slice(), &[7.0, 11.0]);
    }

    #[test]
    fn wrong_grad_arity_is_rejected() {
        let g = relu_only();
        let input = Tensor::zeros([1, 1, 2, 2]);
        let cache = forward_cached(&g, &Parameters::new(), &input).unwrap();
        assert!(matches!(
            backward(&g, &Parameters::new(), &cache, &[]),
            Err(EngineError::GradArity { .. })
        ));
    }
}
