//! Shape inference and exact static cost accounting.
//!
//! Weight counts, multiply-accumulate (MAC) counts and output feature counts
//! are computed per layer and per graph as exact integers. Spatial
//! arithmetic uses floor division:
//! `H' = floor((H + 2*ph - kh)/sh) + 1`, likewise for width. MAC accounting
//! covers convolution multiplies only; bias adds, pooling comparisons and
//! concat copies are reported separately in a non-MAC ops column.

use crate::graph::{topo_order, GraphError, GraphSpec, LayerKind, LayerSpec, Shape};
use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
pub enum CostError {
    #[error("layer '{layer}': kernel {kh}x{kw} larger than padded input {h}x{w} (+2*{ph}x{pw})")]
    KernelTooLarge { layer: String, kh: usize, kw: usize, h: usize, w: usize, ph: usize, pw: usize },
    #[error("layer '{layer}': concat inputs disagree on spatial dims: {a} vs {b}")]
    ConcatSpatialMismatch { layer: String, a: Shape, b: Shape },
    #[error("layer '{layer}': expected {expected} input shape(s), got {got}")]
    InputArity { layer: String, expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("compare: graph '{graph}' has input shape {got}, baseline uses {expected}")]
    InputShapeMismatch { graph: String, expected: Shape, got: Shape },
    #[error("compare: baseline '{0}' is not among the analyzed graphs")]
    UnknownBaseline(String),
}

/// Output shape of one layer given its input shape(s). Concat takes all
/// input shapes in declaration order; every other kind takes exactly one.
pub fn infer_shape(layer: &LayerSpec, inputs: &[Shape]) -> Result<Shape, CostError> {
    let one = |inputs: &[Shape]| -> Result<Shape, CostError> {
        if inputs.len() != 1 {
            return Err(CostError::InputArity {
                layer: layer.name.clone(),
                expected: 1,
                got: inputs.len(),
            });
        }
        Ok(inputs[0])
    };
    match &layer.kind {
        LayerKind::Conv { kernel, stride, padding, out_channels, .. } => {
            let input = one(inputs)?;
            let (h, w) = windowed_dims(layer, input, *kernel, *stride, *padding)?;
            Ok(Shape::new(*out_channels, h, w))
        }
        LayerKind::MaxPool { kernel, stride, padding } => {
            let input = one(inputs)?;
            let (h, w) = windowed_dims(layer, input, *kernel, *stride, *padding)?;
            Ok(Shape::new(input.channels, h, w))
        }
        LayerKind::Relu => one(inputs),
        LayerKind::ConcatChannels => {
            if inputs.len() < 2 {
                return Err(CostError::InputArity {
                    layer: layer.name.clone(),
                    expected: 2,
                    got: inputs.len(),
                });
            }
            let first = inputs[0];
            for s in &inputs[1..] {
                if s.height != first.height || s.width != first.width {
                    return Err(CostError::ConcatSpatialMismatch {
                        layer: layer.name.clone(),
                        a: first,
                        b: *s,
                    });
                }
            }
            let channels = inputs.iter().map(|s| s.channels).sum();
            Ok(Shape::new(channels, first.height, first.width))
        }
    }
}

fn windowed_dims(
    layer: &LayerSpec,
    input: Shape,
    kernel: (usize, usize),
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<(usize, usize), CostError> {
    let (kh, kw) = kernel;
    let (sh, sw) = stride;
    let (ph, pw) = padding;
    if input.height + 2 * ph < kh || input.width + 2 * pw < kw {
        return Err(CostError::KernelTooLarge {
            layer: layer.name.clone(),
            kh,
            kw,
            h: input.height,
            w: input.width,
            ph,
            pw,
        });
    }
    Ok(((input.height + 2 * ph - kh) / sh + 1, (input.width + 2 * pw - kw) / sw + 1))
}

/// Parameter count of one layer. Only convolutions carry weights:
/// `kh*kw*Cin*Cout`, plus `Cout` when biased.
pub fn count_weights(layer: &LayerSpec, input_channels: usize) -> u64 {
    match &layer.kind {
        LayerKind::Conv { kernel, out_channels, has_bias, .. } => {
            let w = kernel.0 as u64 * kernel.1 as u64 * input_channels as u64 * *out_channels as u64;
            w + if *has_bias { *out_channels as u64 } else { 0 }
        }
        _ => 0,
    }
}

/// Forward-pass multiply-accumulate count of one layer. Convolution:
/// `kh*kw*Cin*Cout*H'*W'`; every other kind performs no MACs.
pub fn count_macs(layer: &LayerSpec, inputs: &[Shape]) -> Result<u64, CostError> {
    match &layer.kind {
        LayerKind::Conv { kernel, out_channels, .. } => {
            let out = infer_shape(layer, inputs)?;
            Ok(kernel.0 as u64
                * kernel.1 as u64
                * inputs[0].channels as u64
                * *out_channels as u64
                * out.height as u64
                * out.width as u64)
        }
        _ => Ok(0),
    }
}

/// Comparisons, bias adds and copies that are not MACs, reported in the
/// notes column of the cost report.
fn non_mac_ops(layer: &LayerSpec, inputs: &[Shape], output: Shape) -> (u64, &'static str) {
    match &layer.kind {
        LayerKind::Conv { has_bias, .. } => {
            if *has_bias {
                (output.elements(), "bias adds")
            } else {
                (0, "")
            }
        }
        LayerKind::MaxPool { kernel, .. } => {
            ((kernel.0 as u64 * kernel.1 as u64 - 1) * output.elements(), "comparisons")
        }
        LayerKind::Relu => (output.elements(), "comparisons"),
        LayerKind::ConcatChannels => {
            (inputs.iter().map(|s| s.elements()).sum::<u64>(), "copies")
        }
    }
}

/// Cost row for a single layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub output: Shape,
    pub weights: u64,
    pub macs: u64,
    pub non_mac_ops: u64,
    pub note: &'static str,
}

/// Per-layer and total static costs for one graph. Rows follow
/// [`topo_order`]. `total_features` sums C*H*W over the graph outputs;
/// `total_output_channels` is the channel-only secondary figure.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    pub input_shape: Shape,
    pub per_layer: Vec<LayerCost>,
    pub outputs: Vec<(String, Shape)>,
    pub total_weights: u64,
    pub total_macs: u64,
    pub total_features: u64,
    pub total_output_channels: u64,
}

impl CostReport {
    pub fn layer(&self, name: &str) -> Option<&LayerCost> {
        self.per_layer.iter().find(|l| l.name == name)
    }

    /// UTF-8 CSV, one row per layer, integers unformatted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,kind,out_channels,out_height,out_width,weights,macs,non_mac_ops,note\n");
        for row in &self.per_layer {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{}",
                row.name,
                row.kind,
                row.output.channels,
                row.output.height,
                row.output.width,
                row.weights,
                row.macs,
                row.non_mac_ops,
                row.note
            );
        }
        out
    }
}

/// Walks the graph in topological order, inferring shapes and accumulating
/// exact costs. Shape errors name the offending layer.
pub fn analyze(graph: &GraphSpec) -> Result<CostReport, CostError> {
    let order = topo_order(graph)?;
    let by_name: HashMap<&str, &LayerSpec> = graph.layers().map(|l| (l.name.as_str(), l)).collect();
    let mut shapes: HashMap<&str, Shape> = HashMap::new();
    let mut per_layer = Vec::with_capacity(order.len());
    let mut total_weights = 0u64;
    let mut total_macs = 0u64;

    for name in &order {
        let layer = by_name[name.as_str()];
        let inputs: Vec<Shape> = layer
            .inputs
            .iter()
            .map(|i| match i.as_layer_name() {
                Some(n) => shapes[n],
                None => graph.input_shape,
            })
            .collect();
        let output = infer_shape(layer, &inputs)?;
        let weights = count_weights(layer, inputs[0].channels);
        let macs = count_macs(layer, &inputs)?;
        let (nm, note) = non_mac_ops(layer, &inputs, output);
        total_weights += weights;
        total_macs += macs;
        per_layer.push(LayerCost {
            name: layer.name.clone(),
            kind: layer.kind.kind_name(),
            output,
            weights,
            macs,
            non_mac_ops: nm,
            note,
        });
        shapes.insert(layer.name.as_str(), output);
    }

    let outputs: Vec<(String, Shape)> = graph
        .output_layers()
        .iter()
        .map(|n| (n.to_string(), shapes[*n]))
        .collect();
    let total_features = outputs.iter().map(|(_, s)| s.elements()).sum();
    let total_output_channels = outputs.iter().map(|(_, s)| s.channels as u64).sum();

    Ok(CostReport {
        model: graph.name.clone(),
        input_shape: graph.input_shape,
        per_layer,
        outputs,
        total_weights,
        total_macs,
        total_features,
        total_output_channels,
    })
}

/// One row of a [`ComparisonReport`].
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub total_weights: u64,
    pub total_macs: u64,
    pub total_features: u64,
    /// baseline weights / this model's weights (higher = lighter model).
    pub weight_ratio: f64,
    /// baseline MACs / this model's MACs.
    pub mac_ratio: f64,
    /// this model's features / baseline features (higher = richer output).
    pub feature_ratio: f64,
}

/// Pairwise cost ratios of several graphs against a named baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonReport {
    pub baseline: String,
    pub input_shape: Shape,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonReport {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    pub fn to_csv(&self) -> String {
        let mut out =
            String::from("model,weights,macs,features,weight_ratio,mac_ratio,feature_ratio\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{:.6},{:.6},{:.6}",
                r.model, r.total_weights, r.total_macs, r.total_features, r.weight_ratio, r.mac_ratio, r.feature_ratio
            );
        }
        out
    }
}

/// Analyzes every graph and reports ratios against the baseline. All graphs
/// must share the baseline's input shape.
pub fn compare(graphs: &[&GraphSpec], baseline: &str) -> Result<ComparisonReport, CostError> {
    let base = graphs
        .iter()
        .find(|g| g.name == baseline)
        .ok_or_else(|| CostError::UnknownBaseline(baseline.to_string()))?;
    for g in graphs {
        if g.input_shape != base.input_shape {
            return Err(CostError::InputShapeMismatch {
                graph: g.name.clone(),
                expected: base.input_shape,
                got: g.input_shape,
            });
        }
    }
    let base_report = analyze(base)?;
    let mut rows = Vec::with_capacity(graphs.len());
    for g in graphs {
        let r = analyze(g)?;
        rows.push(ComparisonRow {
            model: r.model.clone(),
            total_weights: r.total_weights,
            total_macs: r.total_macs,
            total_features: r.total_features,
            weight_ratio: base_report.total_weights as f64 / r.total_weights as f64,
            mac_ratio: base_report.total_macs as f64 / r.total_macs as f64,
            feature_ratio: r.total_features as f64 / base_report.total_features as f64,
        });
    }
    Ok(ComparisonReport { baseline: baseline.to_string(), input_shape: base.input_shape, rows })
}
