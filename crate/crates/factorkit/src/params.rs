//! Learnable parameters: per-conv-layer weight tensors plus optional biases,
//! deterministic seeded initialization, and flat binary serialization.
//!
//! File format (`FKT1`): magic bytes `FKT1`, then a little-endian u32 record
//! count, then one record per tensor: u32 name length, UTF-8 name, u32 rank,
//! rank u32 dims, and the row-major payload as little-endian f32. Parameter
//! files hold one 4-dim record per conv layer (out, in, kh, kw) in
//! topological order, each followed by a 1-dim `<layer>.bias` record when
//! the layer is biased. Tensor files reuse the same record layout with a
//! single 4-dim (batch, channels, height, width) record.

use crate::cost::{analyze, CostError};
use crate::graph::{GraphSpec, LayerKind, Shape};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"FKT1";

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad parameter file: {0}")]
    Format(String),
}

/// Weights and optional bias of one convolution layer. Weight dims are
/// (out_channels, in_channels, kh, kw).
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Option<Vec<f32>>,
}

impl ConvParams {
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// All parameters of a graph, keyed by conv layer name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Parameters {
    by_layer: HashMap<String, ConvParams>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters::default()
    }

    pub fn insert(&mut self, layer: impl Into<String>, params: ConvParams) {
        self.by_layer.insert(layer.into(), params);
    }

    pub fn get(&self, layer: &str) -> Option<&ConvParams> {
        self.by_layer.get(layer)
    }

    pub fn get_mut(&mut self, layer: &str) -> Option<&mut ConvParams> {
        self.by_layer.get_mut(layer)
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.by_layer.keys().map(|s| s.as_str())
    }

    pub fn total_param_count(&self) -> usize {
        self.by_layer.values().map(|p| p.param_count()).sum()
    }

    /// Serializes in topological order of `graph` (FKT1 format).
    pub fn save(&self, graph: &GraphSpec, path: &Path) -> Result<(), ParamError> {
        let order = crate::graph::topo_order(graph).map_err(CostError::from)?;
        let mut records: Vec<(String, Vec<u32>, &[f32])> = Vec::new();
        for name in &order {
            if let Some(p) = self.by_layer.get(name) {
                let d = p.weight.dims();
                records.push((
                    name.clone(),
                    vec![d[0] as u32, d[1] as u32, d[2] as u32, d[3] as u32],
                    p.weight.as_slice(),
                ));
                if let Some(b) = &p.bias {
                    records.push((format!("{}.bias", name), vec![b.len() as u32], b));
                }
            }
        }
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(MAGIC)?;
        f.write_all(&(records.len() as u32).to_le_bytes())?;
        for (name, dims, payload) in records {
            write_record(&mut f, &name, &dims, payload)?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ParamError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let records = read_records(&mut f)?;
        let mut params = Parameters::new();
        for (name, dims, payload) in &records {
            if name.ends_with(".bias") {
                continue;
            }
            if dims.len() != 4 {
                return Err(ParamError::Format(format!(
                    "weight record '{}' has rank {}, expected 4",
                    name,
                    dims.len()
                )));
            }
            let weight = Tensor::from_vec(
                [dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize],
                payload.clone(),
            );
            params.insert(name.clone(), ConvParams { weight, bias: None });
        }
        for (name, dims, payload) in records {
            if let Some(layer) = name.strip_suffix(".bias") {
                if dims.len() != 1 {
                    return Err(ParamError::Format(format!(
                        "bias record '{}' has rank {}, expected 1",
                        name,
                        dims.len()
                    )));
                }
                let entry = params.by_layer.get_mut(layer).ok_or_else(|| {
                    ParamError::Format(format!("bias record '{}' has no weight record", name))
                })?;
                entry.bias = Some(payload);
            }
        }
        Ok(params)
    }
}

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[u32], payload: &[f32]) -> Result<(), ParamError> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in payload {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

type Record = (String, Vec<u32>, Vec<f32>);

fn read_records<R: Read>(r: &mut R) -> Result<Vec<Record>, ParamError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(ParamError::Format(format!("bad magic {:?}, expected FKT1", magic)));
    }
    let count = read_u32(r)? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(ParamError::Format(format!("record name length {} too large", name_len)));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| ParamError::Format("record name is not UTF-8".to_string()))?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(ParamError::Format(format!("record '{}' rank {} too large", name, rank)));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(r)?);
        }
        let len: usize = dims.iter().map(|&d| d as usize).product();
        let mut payload = vec![0.0f32; len];
        let mut buf = [0u8; 4];
        for v in payload.iter_mut() {
            r.read_exact(&mut buf)?;
            *v = f32::from_le_bytes(buf);
        }
        records.push((name, dims, payload));
    }
    Ok(records)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ParamError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Writes a single activation tensor using the FKT1 record layout.
pub fn save_tensor(t: &Tensor, name: &str, path: &Path) -> Result<(), ParamError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(MAGIC)?;
    f.write_all(&1u32.to_le_bytes())?;
    let d = t.dims();
    write_record(&mut f, name, &[d[0] as u32, d[1] as u32, d[2] as u32, d[3] as u32], t.as_slice())?;
    f.flush()?;
    Ok(())
}

/// Reads a single-tensor FKT1 file back.
pub fn load_tensor(path: &Path) -> Result<(String, Tensor), ParamError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = read_records(&mut f)?;
    if records.len() != 1 {
        return Err(ParamError::Format(format!("expected 1 record, found {}", records.len())));
    }
    let (name, dims, payload) = records.pop().expect("length checked");
    if dims.len() != 4 {
        return Err(ParamError::Format(format!("tensor record has rank {}, expected 4", dims.len())));
    }
    Ok((
        name,
        Tensor::from_vec(
            [dims[0] as usize, dims[1] as usize, dims[2] as usize, dims[3] as usize],
            payload,
        ),
    ))
}

/// Deterministic fan-in-scaled uniform initialization: weights drawn from
/// U(-sqrt(6/fan_in), +sqrt(6/fan_in)) with fan_in = kh*kw*Cin, biases zero.
/// Layers are initialized in topological order, so a given (graph, seed)
/// pair always produces bitwise-identical parameters.
pub fn init_params(graph: &GraphSpec, seed: u64) -> Result<Parameters, ParamError> {
    let report = analyze(graph)?;
    let shapes: HashMap<&str, Shape> =
        report.per_layer.iter().map(|l| (l.name.as_str(), l.output)).collect();
    let by_name: HashMap<&str, &crate::graph::LayerSpec> =
        graph.layers().map(|l| (l.name.as_str(), l)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Parameters::new();
    for row in &report.per_layer {
        let layer = by_name[row.name.as_str()];
        let LayerKind::Conv { kernel, out_channels, has_bias, .. } = &layer.kind else {
            continue;
        };
        let cin = match layer.inputs[0].as_layer_name() {
            Some(n) => shapes[n].channels,
            None => graph.input_shape.channels,
        };
        let (kh, kw) = *kernel;
        let fan_in = (kh * kw * cin) as f64;
        let bound = (6.0 / fan_in).sqrt() as f32;
        let n = out_channels * cin * kh * kw;
        let weight = Tensor::from_vec(
            [*out_channels, cin, kh, kw],
            (0..n).map(|_| rng.gen_range(-bound..=bound)).collect(),
        );
        let bias = has_bias.then(|| vec![0.0f32; *out_channels]);
        params.insert(layer.name.clone(), ConvParams { weight, bias });
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphSpec, LayerInput, LayerSpec};

    fn small_graph() -> GraphSpec {
        GraphSpec {
            name: "g".into(),
            input_shape: Shape::new(3, 8, 8),
            stem: vec![
                LayerSpec::conv("c1", LayerInput::GraphInput, (3, 3), (1, 1), (1, 1), 4, true),
                LayerSpec::relu("r1", LayerInput::layer("c1")),
                LayerSpec::conv("c2", LayerInput::layer("r1"), (1, 1), (1, 1), (0, 0), 2, false),
            ],
            factors: vec![],
            trailing: None,
        }
    }

    #[test]
    fn same_seed_gives_bitwise_identical_params() {
        let g = small_graph();
        let a = init_params(&g, 42).unwrap();
        let b = init_params(&g, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let g = small_graph();
        let a = init_params(&g, 1).unwrap();
        let b = init_params(&g, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn weights_respect_fan_in_bound_and_biases_are_zero() {
        let g = small_graph();
        let p = init_params(&g, 9).unwrap();
        let c1 = p.get("c1").unwrap();
        let bound = (6.0f64 / (3.0 * 3.0 * 3.0)).sqrt() as f32;
        assert!(c1.weight.iter().all(|&v| v.abs() <= bound));
        assert!(c1.bias.as_ref().unwrap().iter().all(|&v| v == 0.0));
        assert!(p.get("c2").unwrap().bias.is_none());
    }

    #[test]
    fn save_load_roundtrip_is_bitwise() {
        let g = small_graph();
        let p = init_params(&g, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.fkt");
        p.save(&g, &path).unwrap();
        let loaded = Parameters::load(&path).unwrap();
        assert_eq!(p, loaded);
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.fkt");
        std::fs::write(&path, b"NOPE\x00\x00\x00\x00").unwrap();
        assert!(matches!(Parameters::load(&path), Err(ParamError::Format(_))));
    }

    #[test]
    fn tensor_record_roundtrip() {
        let t = Tensor::from_vec([1, 2, 1, 2], vec![1.0, -2.5, 3.25, 0.0]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fkt");
        save_tensor(&t, "out0", &path).unwrap();
        let (name, back) = load_tensor(&path).unwrap();
        assert_eq!(name, "out0");
        assert_eq!(back, t);
    }
}
