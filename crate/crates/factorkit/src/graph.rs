//! Architecture data model: layers, factors, DAG wiring, and validation.
//!
//! A [`GraphSpec`] is a named DAG of layers with an optional shared stem and
//! zero or more [`Factor`]s. Factors are disjoint sub-DAGs that all consume
//! the stem output (or the graph input when the stem is empty) and exchange
//! no intermediate data with each other, so they can be executed
//! independently. All types are immutable after construction and safe to
//! share across threads.

use std::collections::{HashMap, HashSet};
use std::fmt;

/// Channels-height-width extent of one activation tensor. The batch
/// dimension is carried separately by the execution engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        assert!(
            channels >= 1 && height >= 1 && width >= 1,
            "shape dimensions must be >= 1, got {}x{}x{}",
            channels,
            height,
            width
        );
        Shape { channels, height, width }
    }

    /// Number of scalar elements (C*H*W).
    pub fn elements(&self) -> u64 {
        self.channels as u64 * self.height as u64 * self.width as u64
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Where a layer reads its data from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum LayerInput {
    /// The graph's single input tensor (`@input` in the text format).
    GraphInput,
    /// Output of a named layer.
    Layer(String),
}

impl LayerInput {
    pub fn layer(name: impl Into<String>) -> Self {
        LayerInput::Layer(name.into())
    }

    pub fn as_layer_name(&self) -> Option<&str> {
        match self {
            LayerInput::GraphInput => None,
            LayerInput::Layer(n) => Some(n),
        }
    }
}

impl fmt::Display for LayerInput {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerInput::GraphInput => write!(f, "@input"),
            LayerInput::Layer(n) => write!(f, "{}", n),
        }
    }
}

/// The layer vocabulary. Kernel/stride/padding are (h, w) pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerKind {
    Conv {
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        out_channels: usize,
        has_bias: bool,
    },
    MaxPool {
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    },
    Relu,
    /// Channel-axis concatenation of two or more inputs with equal spatial
    /// dimensions.
    ConcatChannels,
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::MaxPool { .. } => "maxpool",
            LayerKind::Relu => "relu",
            LayerKind::ConcatChannels => "concat",
        }
    }
}

/// One named layer plus the names of the layers it consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<LayerInput>,
}

impl LayerSpec {
    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        name: impl Into<String>,
        input: LayerInput,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
        out_channels: usize,
        has_bias: bool,
    ) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv { kernel, stride, padding, out_channels, has_bias },
            inputs: vec![input],
        }
    }

    pub fn maxpool(
        name: impl Into<String>,
        input: LayerInput,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Self {
        LayerSpec {
            name: name.into(),
            kind: LayerKind::MaxPool { kernel, stride, padding },
            inputs: vec![input],
        }
    }

    pub fn relu(name: impl Into<String>, input: LayerInput) -> Self {
        LayerSpec { name: name.into(), kind: LayerKind::Relu, inputs: vec![input] }
    }

    pub fn concat(name: impl Into<String>, inputs: Vec<LayerInput>) -> Self {
        LayerSpec { name: name.into(), kind: LayerKind::ConcatChannels, inputs }
    }
}

/// An independent sub-DAG sharing the graph input (or stem output) with its
/// sibling factors. `entry` receives the factor's input; `exit` produces the
/// factor's output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Factor {
    pub name: String,
    pub body: Vec<LayerSpec>,
    pub entry: String,
    pub exit: String,
}

/// A full architecture: shared stem, independent factors, and an optional
/// trailing concat merging the factor exits (used only by concatenating
/// baselines, never by factorized nets).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphSpec {
    pub name: String,
    pub input_shape: Shape,
    pub stem: Vec<LayerSpec>,
    pub factors: Vec<Factor>,
    pub trailing: Option<LayerSpec>,
}

/// A single invariant violation found by [`validate`]. Violations are data,
/// not failures: a validator run never errors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    /// Layer name declared more than once.
    DuplicateName { layer: String },
    /// Layer consumes a name that no layer declares.
    DanglingInput { layer: String, input: String },
    /// Layer participates in a dependency cycle.
    CycleAt { layer: String },
    /// Same layer name appears in two factor bodies.
    FactorOverlap { layer: String, first_factor: String, second_factor: String },
    /// Edge from one factor's body into another's.
    CrossFactorEdge { from: String, to: String, from_factor: String, to_factor: String },
    /// A non-entry factor layer consumes a layer outside its own body.
    EdgeIntoFactor { factor: String, layer: String, input: String },
    /// A stem layer consumes a factor-body layer.
    StemConsumesFactor { stem_layer: String, factor_layer: String },
    /// Factor entry does not consume exactly the stem output / graph input.
    EntryMismatch { factor: String, entry: String, expected: String },
    /// Factor entry or exit name is not part of the body.
    FactorBoundary { factor: String, layer: String },
    /// A body layer is not reachable from the factor entry.
    UnreachableInFactor { factor: String, layer: String },
    /// Wrong input arity for the layer kind (concat needs >= 2, others 1).
    BadArity { layer: String, expected: &'static str, got: usize },
    /// A kernel or stride component is zero.
    ZeroHyperparam { layer: String, field: &'static str },
    /// Trailing concat consumes something other than factor exits.
    TrailingInput { layer: String, input: String },
    /// Factors are declared but the stem has no unique output for them.
    AmbiguousStemOutput { candidates: Vec<String> },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateName { layer } => write!(f, "duplicate layer name '{}'", layer),
            Violation::DanglingInput { layer, input } => {
                write!(f, "layer '{}' consumes undeclared layer '{}'", layer, input)
            }
            Violation::CycleAt { layer } => write!(f, "dependency cycle through layer '{}'", layer),
            Violation::FactorOverlap { layer, first_factor, second_factor } => write!(
                f,
                "layer '{}' belongs to both factor '{}' and factor '{}'",
                layer, first_factor, second_factor
            ),
            Violation::CrossFactorEdge { from, to, from_factor, to_factor } => write!(
                f,
                "edge from '{}' (factor '{}') into '{}' (factor '{}')",
                from, from_factor, to, to_factor
            ),
            Violation::EdgeIntoFactor { factor, layer, input } => write!(
                f,
                "layer '{}' in factor '{}' consumes '{}' from outside the factor body",
                layer, factor, input
            ),
            Violation::StemConsumesFactor { stem_layer, factor_layer } => write!(
                f,
                "stem layer '{}' consumes factor layer '{}'",
                stem_layer, factor_layer
            ),
            Violation::EntryMismatch { factor, entry, expected } => write!(
                f,
                "entry '{}' of factor '{}' must consume exactly [{}]",
                entry, factor, expected
            ),
            Violation::FactorBoundary { factor, layer } => {
                write!(f, "factor '{}' names '{}' as entry/exit but it is not in the body", factor, layer)
            }
            Violation::UnreachableInFactor { factor, layer } => {
                write!(f, "layer '{}' in factor '{}' is not reachable from the entry", layer, factor)
            }
            Violation::BadArity { layer, expected, got } => {
                write!(f, "layer '{}' expects {} input(s), got {}", layer, expected, got)
            }
            Violation::ZeroHyperparam { layer, field } => {
                write!(f, "layer '{}' has zero {}", layer, field)
            }
            Violation::TrailingInput { layer, input } => write!(
                f,
                "trailing concat '{}' consumes '{}', which is not a factor exit",
                layer, input
            ),
            Violation::AmbiguousStemOutput { candidates } => write!(
                f,
                "stem has no unique output for factors to consume (sinks: {})",
                candidates.join(", ")
            ),
        }
    }
}

/// Error returned by operations that require a well-formed graph.
#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("graph '{name}' is not well-formed: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid { name: String, violations: Vec<Violation> },
}

impl GraphSpec {
    /// All layers in declaration order: stem, then each factor body in
    /// factor order, then the trailing concat if present.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.stem
            .iter()
            .chain(self.factors.iter().flat_map(|f| f.body.iter()))
            .chain(self.trailing.iter())
    }

    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers().find(|l| l.name == name)
    }

    /// Name of the layer whose output the factors consume, or `None` when
    /// the stem is empty (factors consume the graph input directly).
    ///
    /// Returns the unique stem sink; ambiguity is reported by [`validate`].
    pub fn stem_output(&self) -> Option<&str> {
        if self.stem.is_empty() {
            return None;
        }
        let consumed: HashSet<&str> = self
            .stem
            .iter()
            .flat_map(|l| l.inputs.iter().filter_map(|i| i.as_layer_name()))
            .collect();
        let mut sinks = self.stem.iter().filter(|l| !consumed.contains(l.name.as_str()));
        let first = sinks.next().map(|l| l.name.as_str());
        if sinks.next().is_some() {
            None // ambiguous; validate() reports it
        } else {
            first
        }
    }

    /// Names of the layers whose tensors the graph emits, in declaration
    /// order: the trailing concat if present, else the factor exits, else
    /// the stem sinks (monolithic graph).
    pub fn output_layers(&self) -> Vec<&str> {
        if let Some(t) = &self.trailing {
            return vec![t.name.as_str()];
        }
        if !self.factors.is_empty() {
            return self.factors.iter().map(|f| f.exit.as_str()).collect();
        }
        let consumed: HashSet<&str> = self
            .stem
            .iter()
            .flat_map(|l| l.inputs.iter().filter_map(|i| i.as_layer_name()))
            .collect();
        self.stem
            .iter()
            .filter(|l| !consumed.contains(l.name.as_str()))
            .map(|l| l.name.as_str())
            .collect()
    }

    pub fn layer_count(&self) -> usize {
        self.layers().count()
    }
}

/// Checks every structural invariant and returns all violations found.
/// An empty list means the graph is well-formed.
pub fn validate(graph: &GraphSpec) -> Vec<Violation> {
    let mut violations = Vec::new();

    // Name -> owning factor index; stem/trailing layers are absent.
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut declared: HashSet<&str> = HashSet::new();

    for (fi, layer) in layer_owners(graph) {
        if !declared.insert(layer.name.as_str()) {
            // Same name in two factor bodies is the factor-overlap case.
            let prev = owner.get(layer.name.as_str()).copied();
            match (prev, fi) {
                (Some(a), Some(b)) if a != b => violations.push(Violation::FactorOverlap {
                    layer: layer.name.clone(),
                    first_factor: graph.factors[a].name.clone(),
                    second_factor: graph.factors[b].name.clone(),
                }),
                _ => violations.push(Violation::DuplicateName { layer: layer.name.clone() }),
            }
        } else if let Some(fi) = fi {
            owner.insert(layer.name.as_str(), fi);
        }
    }

    // Per-layer arity and hyperparameter checks.
    for layer in graph.layers() {
        match &layer.kind {
            LayerKind::ConcatChannels => {
                if layer.inputs.len() < 2 {
                    violations.push(Violation::BadArity {
                        layer: layer.name.clone(),
                        expected: ">= 2",
                        got: layer.inputs.len(),
                    });
                }
            }
            kind => {
                if layer.inputs.len() != 1 {
                    violations.push(Violation::BadArity {
                        layer: layer.name.clone(),
                        expected: "exactly 1",
                        got: layer.inputs.len(),
                    });
                }
                let ks = match kind {
                    LayerKind::Conv { kernel, stride, out_channels, .. } => {
                        if *out_channels == 0 {
                            violations.push(Violation::ZeroHyperparam {
                                layer: layer.name.clone(),
                                field: "out_channels",
                            });
                        }
                        Some((*kernel, *stride))
                    }
                    LayerKind::MaxPool { kernel, stride, .. } => Some((*kernel, *stride)),
                    _ => None,
                };
                if let Some((kernel, stride)) = ks {
                    if kernel.0 == 0 || kernel.1 == 0 {
                        violations.push(Violation::ZeroHyperparam {
                            layer: layer.name.clone(),
                            field: "kernel",
                        });
                    }
                    if stride.0 == 0 || stride.1 == 0 {
                        violations.push(Violation::ZeroHyperparam {
                            layer: layer.name.clone(),
                            field: "stride",
                        });
                    }
                }
            }
        }
    }

    // Dangling inputs.
    for layer in graph.layers() {
        for input in &layer.inputs {
            if let Some(name) = input.as_layer_name() {
                if !declared.contains(name) {
                    violations.push(Violation::DanglingInput {
                        layer: layer.name.clone(),
                        input: name.to_string(),
                    });
                }
            }
        }
    }

    // Cycle detection: Kahn's algorithm over resolvable edges; every layer
    // left with unsatisfied inputs afterwards sits on (or behind) a cycle.
    {
        let order: Vec<&LayerSpec> = graph.layers().collect();
        let index: HashMap<&str, usize> =
            order.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
        let mut indegree: Vec<usize> = vec![0; order.len()];
        let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
        for (i, layer) in order.iter().enumerate() {
            for input in &layer.inputs {
                if let Some(name) = input.as_layer_name() {
                    if let Some(&j) = index.get(name) {
                        indegree[i] += 1;
                        consumers[j].push(i);
                    }
                }
            }
        }
        let mut ready: Vec<usize> = (0..order.len()).filter(|&i| indegree[i] == 0).collect();
        let mut done = 0usize;
        while let Some(i) = ready.pop() {
            done += 1;
            for &c in &consumers[i] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.push(c);
                }
            }
        }
        if done < order.len() {
            for (i, layer) in order.iter().enumerate() {
                if indegree[i] > 0 {
                    violations.push(Violation::CycleAt { layer: layer.name.clone() });
                }
            }
        }
    }

    // Factor wiring: cross edges, entry/exit membership, entry source,
    // reachability within each body.
    let expected_entry_input = match graph.stem_output() {
        Some(name) => LayerInput::Layer(name.to_string()),
        None => LayerInput::GraphInput,
    };
    if !graph.factors.is_empty() && !graph.stem.is_empty() && graph.stem_output().is_none() {
        let consumed: HashSet<&str> = graph
            .stem
            .iter()
            .flat_map(|l| l.inputs.iter().filter_map(|i| i.as_layer_name()))
            .collect();
        violations.push(Violation::AmbiguousStemOutput {
            candidates: graph
                .stem
                .iter()
                .filter(|l| !consumed.contains(l.name.as_str()))
                .map(|l| l.name.clone())
                .collect(),
        });
    }

    for (fi, factor) in graph.factors.iter().enumerate() {
        let body: HashSet<&str> = factor.body.iter().map(|l| l.name.as_str()).collect();
        for boundary in [&factor.entry, &factor.exit] {
            if !body.contains(boundary.as_str()) {
                violations.push(Violation::FactorBoundary {
                    factor: factor.name.clone(),
                    layer: boundary.clone(),
                });
            }
        }
        for layer in &factor.body {
            for input in &layer.inputs {
                let Some(src) = input.as_layer_name() else {
                    if layer.name != factor.entry {
                        violations.push(Violation::EdgeIntoFactor {
                            factor: factor.name.clone(),
                            layer: layer.name.clone(),
                            input: "@input".to_string(),
                        });
                    }
                    continue;
                };
                if body.contains(src) {
                    continue;
                }
                match owner.get(src) {
                    Some(&other) if other != fi => {
                        violations.push(Violation::CrossFactorEdge {
                            from: src.to_string(),
                            to: layer.name.clone(),
                            from_factor: graph.factors[other].name.clone(),
                            to_factor: factor.name.clone(),
                        });
                    }
                    _ if layer.name != factor.entry => {
                        violations.push(Violation::EdgeIntoFactor {
                            factor: factor.name.clone(),
                            layer: layer.name.clone(),
                            input: src.to_string(),
                        });
                    }
                    _ => {}
                }
            }
        }
        // Entry consumes exactly the stem output / graph input.
        if body.contains(factor.entry.as_str()) {
            if let Some(entry) = factor.body.iter().find(|l| l.name == factor.entry) {
                let ok = entry.inputs.len() == 1 && entry.inputs[0] == expected_entry_input;
                if !ok {
                    violations.push(Violation::EntryMismatch {
                        factor: factor.name.clone(),
                        entry: factor.entry.clone(),
                        expected: expected_entry_input.to_string(),
                    });
                }
            }
        }
        // Reachability from the entry through intra-body edges.
        if body.contains(factor.entry.as_str()) {
            let mut reached: HashSet<&str> = HashSet::new();
            reached.insert(factor.entry.as_str());
            let mut changed = true;
            while changed {
                changed = false;
                for layer in &factor.body {
                    if reached.contains(layer.name.as_str()) {
                        continue;
                    }
                    let all_in = !layer.inputs.is_empty()
                        && layer.inputs.iter().all(|i| {
                            i.as_layer_name()
                                .is_some_and(|n| reached.contains(n) || !body.contains(n))
                        });
                    // A layer is reachable once at least one of its inputs is
                    // reached and the rest resolve inside the reached set too.
                    let any_reached = layer
                        .inputs
                        .iter()
                        .any(|i| i.as_layer_name().is_some_and(|n| reached.contains(n)));
                    if all_in && any_reached {
                        reached.insert(layer.name.as_str());
                        changed = true;
                    }
                }
            }
            for layer in &factor.body {
                if !reached.contains(layer.name.as_str()) {
                    violations.push(Violation::UnreachableInFactor {
                        factor: factor.name.clone(),
                        layer: layer.name.clone(),
                    });
                }
            }
        }
    }

    // Stem layers must not consume factor layers.
    for layer in &graph.stem {
        for input in &layer.inputs {
            if let Some(src) = input.as_layer_name() {
                if owner.contains_key(src) {
                    violations.push(Violation::StemConsumesFactor {
                        stem_layer: layer.name.clone(),
                        factor_layer: src.to_string(),
                    });
                }
            }
        }
    }

    // Trailing concat may only merge factor exits.
    if let Some(trailing) = &graph.trailing {
        let exits: HashSet<&str> = graph.factors.iter().map(|f| f.exit.as_str()).collect();
        for input in &trailing.inputs {
            match input.as_layer_name() {
                Some(src) if exits.contains(src) => {}
                Some(src) => violations.push(Violation::TrailingInput {
                    layer: trailing.name.clone(),
                    input: src.to_string(),
                }),
                None => violations.push(Violation::TrailingInput {
                    layer: trailing.name.clone(),
                    input: "@input".to_string(),
                }),
            }
        }
    }

    violations
}

fn layer_owners(graph: &GraphSpec) -> impl Iterator<Item = (Option<usize>, &LayerSpec)> {
    graph
        .stem
        .iter()
        .map(|l| (None, l))
        .chain(
            graph
                .factors
                .iter()
                .enumerate()
                .flat_map(|(fi, f)| f.body.iter().map(move |l| (Some(fi), l))),
        )
        .chain(graph.trailing.iter().map(|l| (None, l)))
}

/// Topological order over all layer names. Deterministic: among ready
/// layers, the one declared first is emitted first.
///
/// Rejects graphs with a non-empty [`validate`] result.
pub fn topo_order(graph: &GraphSpec) -> Result<Vec<String>, GraphError> {
    let violations = validate(graph);
    if !violations.is_empty() {
        return Err(GraphError::Invalid { name: graph.name.clone(), violations });
    }

    let order: Vec<&LayerSpec> = graph.layers().collect();
    let index: HashMap<&str, usize> =
        order.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect();
    let mut indegree: Vec<usize> = vec![0; order.len()];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); order.len()];
    for (i, layer) in order.iter().enumerate() {
        for input in &layer.inputs {
            if let Some(name) = input.as_layer_name() {
                let j = index[name];
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
    }

    let mut ready = std::collections::BinaryHeap::new();
    for (i, &d) in indegree.iter().enumerate() {
        if d == 0 {
            ready.push(std::cmp::Reverse(i));
        }
    }
    let mut out = Vec::with_capacity(order.len());
    while let Some(std::cmp::Reverse(i)) = ready.pop() {
        out.push(order[i].name.clone());
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push(std::cmp::Reverse(c));
            }
        }
    }
    debug_assert_eq!(out.len(), order.len());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain_graph() -> GraphSpec {
        GraphSpec {
            name: "chain".into(),
            input_shape: Shape::new(3, 8, 8),
            stem: vec![
                LayerSpec::conv("a", LayerInput::GraphInput, (3, 3), (1, 1), (1, 1), 4, true),
                LayerSpec::relu("b", LayerInput::layer("a")),
                LayerSpec::maxpool("c", LayerInput::layer("b"), (2, 2), (2, 2), (0, 0)),
            ],
            factors: vec![],
            trailing: None,
        }
    }

    #[test]
    fn valid_chain_has_no_violations() {
        assert!(validate(&chain_graph()).is_empty());
    }

    #[test]
    fn chain_topo_order_is_declaration_order() {
        assert_eq!(topo_order(&chain_graph()).unwrap(), vec!["a", "b", "c"]);
    }

    #[test]
    fn self_loop_reports_cycle() {
        let g = GraphSpec {
            name: "loop".into(),
            input_shape: Shape::new(1, 4, 4),
            stem: vec![LayerSpec::relu("x", LayerInput::layer("x"))],
            factors: vec![],
            trailing: None,
        };
        let vs = validate(&g);
        assert!(
            vs.iter().any(|v| matches!(v, Violation::CycleAt { layer } if layer == "x")),
            "expected CycleAt(x), got {:?}",
            vs
        );
        assert!(topo_order(&g).is_err());
    }

    #[test]
    fn two_factors_sharing_a_layer_report_overlap() {
        let conv = LayerSpec::conv("shared", LayerInput::GraphInput, (3, 3), (1, 1), (1, 1), 2, true);
        let g = GraphSpec {
            name: "overlap".into(),
            input_shape: Shape::new(1, 8, 8),
            stem: vec![],
            factors: vec![
                Factor { name: "f1".into(), body: vec![conv.clone()], entry: "shared".into(), exit: "shared".into() },
                Factor { name: "f2".into(), body: vec![conv], entry: "shared".into(), exit: "shared".into() },
            ],
            trailing: None,
        };
        let vs = validate(&g);
        assert!(vs.iter().any(|v| matches!(v, Violation::FactorOverlap { .. })), "{:?}", vs);
    }

    #[test]
    fn cross_factor_edge_is_reported() {
        let g = GraphSpec {
            name: "cross".into(),
            input_shape: Shape::new(1, 8, 8),
            stem: vec![],
            factors: vec![
                Factor {
                    name: "f1".into(),
                    body: vec![LayerSpec::relu("a1", LayerInput::GraphInput)],
                    entry: "a1".into(),
                    exit: "a1".into(),
                },
                Factor {
                    name: "f2".into(),
                    body: vec![
                        LayerSpec::relu("b1", LayerInput::GraphInput),
                        LayerSpec::relu("b2", LayerInput::layer("a1")),
                    ],
                    entry: "b1".into(),
                    exit: "b2".into(),
                },
            ],
            trailing: None,
        };
        let vs = validate(&g);
        assert!(vs.iter().any(|v| matches!(v, Violation::CrossFactorEdge { .. })), "{:?}", vs);
    }

    #[test]
    fn dangling_input_is_reported() {
        let g = GraphSpec {
            name: "dangling".into(),
            input_shape: Shape::new(1, 4, 4),
            stem: vec![LayerSpec::relu("x", LayerInput::layer("ghost"))],
            factors: vec![],
            trailing: None,
        };
        let vs = validate(&g);
        assert!(
            vs.iter().any(|v| matches!(v, Violation::DanglingInput { layer, input } if layer == "x" && input == "ghost")),
            "{:?}",
            vs
        );
    }

    #[test]
    fn diamond_ties_break_by_declaration_order() {
        let g = GraphSpec {
            name: "diamond".into(),
            input_shape: Shape::new(2, 4, 4),
            stem: vec![
                LayerSpec::relu("a", LayerInput::GraphInput),
                LayerSpec::relu("b", LayerInput::layer("a")),
                LayerSpec::relu("c", LayerInput::layer("a")),
                LayerSpec::concat("d", vec![LayerInput::layer("b"), LayerInput::layer("c")]),
            ],
            factors: vec![],
            trailing: None,
        };
        assert_eq!(topo_order(&g).unwrap(), vec!["a", "b", "c", "d"]);
    }

    #[test]
    fn entry_must_consume_stem_output() {
        let g = GraphSpec {
            name: "bad-entry".into(),
            input_shape: Shape::new(1, 8, 8),
            stem: vec![LayerSpec::relu("s", LayerInput::GraphInput)],
            factors: vec![Factor {
                name: "f1".into(),
                body: vec![LayerSpec::relu("e", LayerInput::GraphInput)],
                entry: "e".into(),
                exit: "e".into(),
            }],
            trailing: None,
        };
        let vs = validate(&g);
        assert!(vs.iter().any(|v| matches!(v, Violation::EntryMismatch { .. })), "{:?}", vs);
    }

    #[test]
    fn concat_requires_two_inputs() {
        let g = GraphSpec {
            name: "arity".into(),
            input_shape: Shape::new(1, 4, 4),
            stem: vec![
                LayerSpec::relu("a", LayerInput::GraphInput),
                LayerSpec::concat("c", vec![LayerInput::layer("a")]),
            ],
            factors: vec![],
            trailing: None,
        };
        let vs = validate(&g);
        assert!(vs.iter().any(|v| matches!(v, Violation::BadArity { .. })), "{:?}", vs);
    }

    #[test]
    fn monolithic_outputs_are_stem_sinks() {
        let g = chain_graph();
        assert_eq!(g.output_layers(), vec!["c"]);
    }
}
