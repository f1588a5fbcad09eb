//! Concurrent factor execution with bitwise equivalence to the sequential
//! engine, plus a wall-clock benchmark of the two executors.
//!
//! Factors share nothing: each one reads the stem output (or graph input)
//! and writes only its own intermediates, so no floating-point operation is
//! reordered relative to sequential execution and results must match bit
//! for bit. Any deviation indicates a data race, which is why [`bench()`]
//! verifies equivalence before timing.

use crate::cost::analyze;
use crate::exec::{eval_layer, forward};
use crate::graph::{topo_order, GraphSpec, LayerSpec, Shape};
use crate::ops::EngineError;
use crate::params::Parameters;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

/// Dedicated worker pool for lane execution, built once. Spawning OS
/// threads per call costs around a millisecond in sandboxed environments,
/// which would swamp the factor-level gains being measured.
fn lane_pool() -> &'static rayon::ThreadPool {
    static POOL: OnceLock<rayon::ThreadPool> = OnceLock::new();
    POOL.get_or_init(|| {
        rayon::ThreadPoolBuilder::new()
            .thread_name(|i| format!("factorkit-lane-{}", i))
            .build()
            .expect("lane pool")
    })
}

/// Static factor-to-lane schedule: factors sorted largest-MAC-first and
/// dealt round-robin onto lanes; each lane then runs its factors in that
/// order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExecPlan {
    pub lanes: usize,
    /// Factor indices per lane.
    pub assignments: Vec<Vec<usize>>,
}

pub fn plan(graph: &GraphSpec, lanes: usize) -> Result<ExecPlan, EngineError> {
    if lanes == 0 {
        return Err(EngineError::InvalidArg("lane count must be >= 1".to_string()));
    }
    let report = analyze(graph)?;
    let macs_by_layer: HashMap<&str, u64> =
        report.per_layer.iter().map(|l| (l.name.as_str(), l.macs)).collect();
    let mut factor_macs: Vec<(usize, u64)> = graph
        .factors
        .iter()
        .enumerate()
        .map(|(i, f)| (i, f.body.iter().map(|l| macs_by_layer[l.name.as_str()]).sum()))
        .collect();
    factor_macs.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let lanes_used = lanes.min(graph.factors.len()).max(1);
    let mut assignments = vec![Vec::new(); lanes_used];
    for (rank, (idx, _)) in factor_macs.iter().enumerate() {
        assignments[rank % lanes_used].push(*idx);
    }
    Ok(ExecPlan { lanes: lanes_used, assignments })
}

/// Runs the stem sequentially, then the factors concurrently on `lanes`
/// worker threads. Outputs follow factor declaration order and are
/// bitwise-identical to [`forward`]. A failing factor cancels its siblings;
/// the error of the lowest-index failing factor is reported.
pub fn run_parallel(
    graph: &GraphSpec,
    params: &Parameters,
    input: &Tensor,
    lanes: usize,
) -> Result<Vec<Tensor>, EngineError> {
    if lanes == 0 {
        return Err(EngineError::InvalidArg("lane count must be >= 1".to_string()));
    }
    if graph.factors.is_empty() {
        // Monolithic graph: zero factors means nothing to parallelize.
        return forward(graph, params, input);
    }
    // All engine failure modes are statically detectable; checking them up
    // front in topological order makes the reported error independent of
    // lane scheduling.
    crate::exec::preflight(graph, params, input)?;
    let order = topo_order(graph)?;
    let by_name: HashMap<&str, &LayerSpec> = graph.layers().map(|l| (l.name.as_str(), l)).collect();
    let exec_plan = plan(graph, lanes)?;

    // Stem runs once, sequentially.
    let stem_names: std::collections::HashSet<&str> =
        graph.stem.iter().map(|l| l.name.as_str()).collect();
    let mut stem_env: HashMap<&str, Tensor> = HashMap::new();
    for name in order.iter().filter(|n| stem_names.contains(n.as_str())) {
        let layer = by_name[name.as_str()];
        let inputs: Vec<&Tensor> = layer
            .inputs
            .iter()
            .map(|i| match i.as_layer_name() {
                Some(n) => &stem_env[n],
                None => input,
            })
            .collect();
        let (out, _) = eval_layer(layer, &inputs, params)?;
        stem_env.insert(layer.name.as_str(), out);
    }
    let factor_input: &Tensor = match graph.stem_output() {
        Some(name) => &stem_env[name],
        None => input,
    };

    // Factors run on lanes; the scope is the joining barrier.
    let cancel = AtomicBool::new(false);
    let result_slots: Mutex<Vec<Option<Result<Tensor, EngineError>>>> =
        Mutex::new((0..graph.factors.len()).map(|_| None).collect());
    lane_pool().scope(|scope| {
        for lane in &exec_plan.assignments {
            let cancel = &cancel;
            let by_name = &by_name;
            let order = &order;
            let result_slots = &result_slots;
            scope.spawn(move |_| {
                for &fi in lane {
                    if cancel.load(Ordering::Relaxed) {
                        break;
                    }
                    let r = run_factor(graph, params, factor_input, fi, by_name, order, cancel);
                    if r.is_err() {
                        cancel.store(true, Ordering::Relaxed);
                    }
                    result_slots.lock().expect("result mutex")[fi] = Some(r);
                }
            });
        }
    });
    let results = result_slots.into_inner().expect("result mutex");

    // Preflight rules out runtime failures, but report deterministically
    // anyway: first real error by factor index, ignoring cancellations.
    let mut outputs = Vec::with_capacity(graph.factors.len());
    let mut first_error: Option<EngineError> = None;
    let mut first_cancel: Option<EngineError> = None;
    for (fi, slot) in results.into_iter().enumerate() {
        match slot {
            Some(Ok(t)) => outputs.push(t),
            Some(Err(e)) => {
                if matches!(e, EngineError::Cancelled { .. }) {
                    first_cancel.get_or_insert(e);
                } else {
                    first_error.get_or_insert(e);
                }
            }
            None => {
                first_cancel.get_or_insert(EngineError::Cancelled {
                    factor: graph.factors[fi].name.clone(),
                });
            }
        }
    }
    if let Some(e) = first_error.or(first_cancel) {
        return Err(e);
    }

    if let Some(trailing) = &graph.trailing {
        let exits: HashMap<&str, &Tensor> = graph
            .factors
            .iter()
            .zip(&outputs)
            .map(|(f, t)| (f.exit.as_str(), t))
            .collect();
        let inputs: Vec<&Tensor> = trailing
            .inputs
            .iter()
            .map(|i| exits[i.as_layer_name().expect("validated trailing inputs")])
            .collect();
        let (out, _) = eval_layer(trailing, &inputs, params)?;
        return Ok(vec![out]);
    }
    Ok(outputs)
}

fn run_factor(
    graph: &GraphSpec,
    params: &Parameters,
    factor_input: &Tensor,
    fi: usize,
    by_name: &HashMap<&str, &LayerSpec>,
    order: &[String],
    cancel: &AtomicBool,
) -> Result<Tensor, EngineError> {
    let factor = &graph.factors[fi];
    let body_names: std::collections::HashSet<&str> =
        factor.body.iter().map(|l| l.name.as_str()).collect();
    let mut env: HashMap<&str, Tensor> = HashMap::with_capacity(factor.body.len());
    for name in order.iter().filter(|n| body_names.contains(n.as_str())) {
        if cancel.load(Ordering::Relaxed) {
            // A sibling failed; stop early and drop the partial result.
            return Err(EngineError::Cancelled { factor: factor.name.clone() });
        }
        let layer = by_name[name.as_str()];
        let inputs: Vec<&Tensor> = layer
            .inputs
            .iter()
            .map(|i| match i.as_layer_name() {
                Some(n) if body_names.contains(n) => &env[n],
                _ => factor_input,
            })
            .collect();
        let (out, _) = eval_layer(layer, &inputs, params)?;
        env.insert(layer.name.as_str(), out);
    }
    Ok(env.remove(factor.exit.as_str()).expect("exit evaluated"))
}

/// Wall-clock comparison of sequential and parallel execution.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub model: String,
    pub input_shape: Shape,
    pub lanes: usize,
    pub repeats: usize,
    pub seq_ms: f64,
    pub par_ms: f64,
    pub speedup: f64,
}

impl BenchResult {
    pub fn csv_header() -> &'static str {
        "model,lanes,seq_ms,par_ms,speedup\n"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{:.3},{:.3},{:.4}\n",
            self.model, self.lanes, self.seq_ms, self.par_ms, self.speedup
        )
    }
}

/// Times `repeats` runs of each executor (median, warm-up excluded) after
/// verifying that the two produce bitwise-identical outputs.
pub fn bench(
    graph: &GraphSpec,
    params: &Parameters,
    input: &Tensor,
    lanes: usize,
    repeats: usize,
) -> Result<BenchResult, EngineError> {
    if repeats < 5 {
        return Err(EngineError::InvalidArg(format!("repeats must be >= 5, got {}", repeats)));
    }
    let seq_out = forward(graph, params, input)?;
    let par_out = run_parallel(graph, params, input, lanes)?;
    if seq_out != par_out {
        return Err(EngineError::ParallelMismatch { graph: graph.name.clone() });
    }
    drop((seq_out, par_out)); // warm-up doubles as the equivalence check

    let mut seq_times = Vec::with_capacity(repeats);
    let mut par_times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t0 = Instant::now();
        let out = forward(graph, params, input)?;
        seq_times.push(t0.elapsed().as_secs_f64() * 1e3);
        drop(out);

        let t1 = Instant::now();
        let out = run_parallel(graph, params, input, lanes)?;
        par_times.push(t1.elapsed().as_secs_f64() * 1e3);
        drop(out);
    }
    let seq_ms = median(&mut seq_times);
    let par_ms = median(&mut par_times);
    Ok(BenchResult {
        model: graph.name.clone(),
        input_shape: graph.input_shape,
        lanes,
        repeats,
        seq_ms,
        par_ms,
        speedup: seq_ms / par_ms,
    })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Factor, LayerInput};
    use crate::params::init_params;
    use rand::{Rng, SeedableRng};

    fn factor_graph() -> GraphSpec {
        GraphSpec {
            name: "fg".into(),
            input_shape: Shape::new(3, 16, 16),
            stem: vec![
                LayerSpec::conv("s1", LayerInput::GraphInput, (3, 3), (1, 1), (1, 1), 4, true),
                LayerSpec::relu("s1r", LayerInput::layer("s1")),
            ],
            factors: vec![
                Factor {
                    name: "f1".into(),
                    body: vec![
                        LayerSpec::maxpool("f1p", LayerInput::layer("s1r"), (3, 3), (2, 2), (1, 1)),
                        LayerSpec::relu("f1r", LayerInput::layer("f1p")),
                    ],
                    entry: "f1p".into(),
                    exit: "f1r".into(),
                },
                Factor {
                    name: "f2".into(),
                    body: vec![
                        LayerSpec::conv("f2c", LayerInput::layer("s1r"), (3, 3), (2, 2), (1, 1), 6, true),
                        LayerSpec::relu("f2r", LayerInput::layer("f2c")),
                    ],
                    entry: "f2c".into(),
                    exit: "f2r".into(),
                },
                Factor {
                    name: "f3".into(),
                    body: vec![
                        LayerSpec::conv("f3c", LayerInput::layer("s1r"), (5, 5), (2, 2), (2, 2), 2, false),
                        LayerSpec::relu("f3r", LayerInput::layer("f3c")),
                    ],
                    entry: "f3c".into(),
                    exit: "f3r".into(),
                },
            ],
            trailing: None,
        }
    }

    fn random_input(shape: Shape, seed: u64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.elements() as usize;
        Tensor::from_vec([1, shape.channels, shape.height, shape.width],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn plan_assigns_every_factor_exactly_once() {
        let g = factor_graph();
        for lanes in 1..=8 {
            let p = plan(&g, lanes).unwrap();
            let mut seen: Vec<usize> = p.assignments.iter().flatten().copied().collect();
            seen.sort_unstable();
            assert_eq!(seen, vec![0, 1, 2], "lanes={}", lanes);
        }
    }

    #[test]
    fn lanes_1_matches_forward_bitwise() {
        let g = factor_graph();
        let p = init_params(&g, 5).unwrap();
        let input = random_input(g.input_shape, 0);
        let seq = forward(&g, &p, &input).unwrap();
        let par = run_parallel(&g, &p, &input, 1).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn many_lane_counts_match_forward_bitwise() {
        let g = factor_graph();
        let p = init_params(&g, 6).unwrap();
        let input = random_input(g.input_shape, 1);
        let seq = forward(&g, &p, &input).unwrap();
        for lanes in [2, 3, 4, 8] {
            let par = run_parallel(&g, &p, &input, lanes).unwrap();
            assert_eq!(seq, par, "lanes={}", lanes);
        }
    }

    #[test]
    fn monolithic_graph_runs_sequentially_under_any_lane_count() {
        let g = GraphSpec {
            name: "mono".into(),
            input_shape: Shape::new(2, 8, 8),
            stem: vec![LayerSpec::relu("r", LayerInput::GraphInput)],
            factors: vec![],
            trailing: None,
        };
        let input = random_input(g.input_shape, 2);
        let seq = forward(&g, &Parameters::new(), &input).unwrap();
        let par = run_parallel(&g, &Parameters::new(), &input, 4).unwrap();
        assert_eq!(seq, par);
    }

    #[test]
    fn zero_lanes_is_rejected() {
        let g = factor_graph();
        let p = init_params(&g, 7).unwrap();
        let input = random_input(g.input_shape, 3);
        assert!(matches!(
            run_parallel(&g, &p, &input, 0),
            Err(EngineError::InvalidArg(_))
        ));
    }

    #[test]
    fn missing_params_in_two_factors_reports_lowest_index() {
        let g = factor_graph();
        // Parameters for the stem only; both conv factors (f2, f3) fail.
        let mut p = Parameters::new();
        let full = init_params(&g, 8).unwrap();
        p.insert("s1", full.get("s1").unwrap().clone());
        let input = random_input(g.input_shape, 4);
        for lanes in [1, 2, 4] {
            match run_parallel(&g, &p, &input, lanes) {
                Err(EngineError::MissingParams { layer }) => assert_eq!(layer, "f2c"),
                other => panic!("expected MissingParams(f2c), got {:?}", other.map(|_| ())),
            }
        }
    }

    #[test]
    fn trailing_concat_merges_factor_exits() {
        let mut g = factor_graph();
        // Make exits spatially equal (they already are: all stride-2 from the stem).
        g.trailing = Some(LayerSpec::concat(
            "join",
            vec![LayerInput::layer("f1r"), LayerInput::layer("f2r"), LayerInput::layer("f3r")],
        ));
        let p = init_params(&g, 9).unwrap();
        let input = random_input(g.input_shape, 5);
        let seq = forward(&g, &p, &input).unwrap();
        let par = run_parallel(&g, &p, &input, 2).unwrap();
        assert_eq!(seq.len(), 1);
        assert_eq!(seq[0].channels(), 4 + 6 + 2);
        assert_eq!(seq, par);
    }

    #[test]
    fn bench_rejects_fewer_than_five_repeats_and_reports_consistent_fields() {
        // The lane-1 speedup window (~1.0) is asserted in the acceptance
        // suite, which times on an otherwise idle process; here other unit
        // tests share the cores and would make a window assert flaky.
        let g = factor_graph();
        let p = init_params(&g, 10).unwrap();
        let input = random_input(g.input_shape, 6);
        assert!(matches!(
            bench(&g, &p, &input, 1, 4),
            Err(EngineError::InvalidArg(_))
        ));
        let result = bench(&g, &p, &input, 1, 5).unwrap();
        assert!(result.seq_ms > 0.0 && result.par_ms > 0.0);
        assert_eq!(result.lanes, 1);
        assert!((result.speedup - result.seq_ms / result.par_ms).abs() < 1e-12);
        let csv = result.to_csv_row();
        assert!(csv.starts_with("fg,1,"));
    }
}
