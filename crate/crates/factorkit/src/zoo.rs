//! Programmatic builders for the three reference architectures, each
//! parameterized by a width multiplier for desk-scale shrinking.
//!
//! * `googlenet4e` - monolithic inception baseline up to the 4e stage:
//!   7x7/2 conv stem, two 3x3/2 pools, inceptions 3a-3b, a 3x3/2 pool,
//!   then inceptions 4a-4e (832 output channels at full width).
//! * `factornet_v1` - shares the baseline's first two conv stages as a
//!   stem, then four independent factors: a 3x3 max-pool chain and three
//!   conv factors with growing kernels (3x3, 5x5, 7x7).
//! * `factornet_v2` - fully factorized: the same four factor families run
//!   from the raw input to the final layer; no shared stem, no concat.
//!
//! Every factor applies a cumulative stride of 16 from the graph input, so
//! all exits share the baseline 4e grid (67x120 for FHD input). Down-
//! sampling layers use "same" padding (k-1)/2 except the third stage,
//! which drops padding by one; under floor arithmetic this reproduces the
//! baseline's 1080x1920 -> 67x120 grid exactly.
//!
//! The concrete channel widths are this crate's canonical configuration,
//! frozen here and asserted in tests. At full width they give, against the
//! baseline at FHD: 7.5x / 7.0x fewer weights (V1 / V2), 2.7x / 3.8x fewer
//! MACs, and 0.81x / 2.0x the output features.

use crate::graph::{Factor, GraphSpec, LayerInput, LayerSpec, Shape};

#[derive(Debug, thiserror::Error)]
pub enum ZooError {
    #[error("invalid width multiplier '{0}': expected a rational p/q with 0 < p/q <= 1")]
    BadMultiplier(String),
    #[error("unknown zoo model '{0}' (expected googlenet4e, factornet_v1 or factornet_v2)")]
    UnknownModel(String),
}

/// Exact rational width multiplier in (0, 1]. Channel counts scale as
/// `max(1, round(C * num/den))` with half-up rounding, all in integers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Multiplier {
    num: u32,
    den: u32,
}

impl Multiplier {
    pub const ONE: Multiplier = Multiplier { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self, ZooError> {
        if num == 0 || den == 0 || num > den {
            return Err(ZooError::BadMultiplier(format!("{}/{}", num, den)));
        }
        let g = gcd(num, den);
        Ok(Multiplier { num: num / g, den: den / g })
    }

    /// Accepts `p/q` or a bare integer (`1`).
    pub fn parse(s: &str) -> Result<Self, ZooError> {
        let parse_u32 =
            |t: &str| t.parse::<u32>().map_err(|_| ZooError::BadMultiplier(s.to_string()));
        match s.split_once('/') {
            Some((p, q)) => Multiplier::new(parse_u32(p)?, parse_u32(q)?),
            None => Multiplier::new(parse_u32(s)?, 1),
        }
    }

    /// Scales a channel count, rounding half up and clamping to >= 1.
    pub fn scale(&self, channels: usize) -> usize {
        let n = channels as u64 * self.num as u64;
        let d = self.den as u64;
        (((2 * n + d) / (2 * d)) as usize).max(1)
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }
}

impl std::fmt::Display for Multiplier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(a: u32, b: u32) -> u32 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ZooModel {
    GoogleNet4e,
    FactorNetV1,
    FactorNetV2,
}

impl ZooModel {
    pub const ALL: [ZooModel; 3] = [ZooModel::GoogleNet4e, ZooModel::FactorNetV1, ZooModel::FactorNetV2];

    pub fn from_name(name: &str) -> Result<Self, ZooError> {
        match name {
            "googlenet4e" => Ok(ZooModel::GoogleNet4e),
            "factornet_v1" => Ok(ZooModel::FactorNetV1),
            "factornet_v2" => Ok(ZooModel::FactorNetV2),
            other => Err(ZooError::UnknownModel(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ZooModel::GoogleNet4e => "googlenet4e",
            ZooModel::FactorNetV1 => "factornet_v1",
            ZooModel::FactorNetV2 => "factornet_v2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ZooConfig {
    pub model: ZooModel,
    pub width_multiplier: Multiplier,
    pub input_shape: Shape,
}

impl ZooConfig {
    pub fn new(model: ZooModel, width_multiplier: Multiplier, input_shape: Shape) -> Self {
        ZooConfig { model, width_multiplier, input_shape }
    }

    pub fn full(model: ZooModel, input_shape: Shape) -> Self {
        ZooConfig { model, width_multiplier: Multiplier::ONE, input_shape }
    }
}

pub fn build(cfg: &ZooConfig) -> GraphSpec {
    match cfg.model {
        ZooModel::GoogleNet4e => build_googlenet4e(cfg),
        ZooModel::FactorNetV1 => build_factornet_v1(cfg),
        ZooModel::FactorNetV2 => build_factornet_v2(cfg),
    }
}

/// Small builder helper: tracks the previous layer and appends conv+relu
/// pairs or pools.
struct Body {
    layers: Vec<LayerSpec>,
    last: LayerInput,
}

impl Body {
    fn from(last: LayerInput) -> Self {
        Body { layers: Vec::new(), last }
    }

    fn conv(&mut self, name: &str, k: usize, s: usize, p: usize, out: usize) -> &mut Self {
        self.layers.push(LayerSpec::conv(
            name,
            self.last.clone(),
            (k, k),
            (s, s),
            (p, p),
            out,
            true,
        ));
        self.last = LayerInput::layer(name);
        self
    }

    fn relu(&mut self, name: &str) -> &mut Self {
        self.layers.push(LayerSpec::relu(name, self.last.clone()));
        self.last = LayerInput::layer(name);
        self
    }

    fn pool(&mut self, name: &str, k: usize, s: usize, p: usize) -> &mut Self {
        self.layers.push(LayerSpec::maxpool(name, self.last.clone(), (k, k), (s, s), (p, p)));
        self.last = LayerInput::layer(name);
        self
    }
}

/// Shared first two conv stages (the FactorNet V1 stem and the baseline's
/// opening): conv 7x7/2, pool, conv 1x1, conv 3x3, pool. Stride 8 total.
fn part_a(m: Multiplier) -> Vec<LayerSpec> {
    let mut b = Body::from(LayerInput::GraphInput);
    b.conv("conv1", 7, 2, 3, m.scale(64))
        .relu("conv1_relu")
        .pool("pool1", 3, 2, 0)
        .conv("conv2", 1, 1, 0, m.scale(64))
        .relu("conv2_relu")
        .conv("conv3", 3, 1, 1, m.scale(192))
        .relu("conv3_relu")
        .pool("pool2", 3, 2, 0);
    b.layers
}

/// One inception block: 1x1, 1x1->3x3, 1x1->5x5 and pool->1x1 branches
/// joined by channel concat. Branch widths follow the published baseline.
#[allow(clippy::too_many_arguments)]
fn inception(
    layers: &mut Vec<LayerSpec>,
    input: &str,
    name: &str,
    c1: usize,
    r3: usize,
    c3: usize,
    r5: usize,
    c5: usize,
    pool_proj: usize,
    m: Multiplier,
) -> String {
    let src = LayerInput::layer(input);
    let conv_relu = |layers: &mut Vec<LayerSpec>, lname: String, inp: LayerInput, k: usize, p: usize, out: usize| {
        layers.push(LayerSpec::conv(&lname, inp, (k, k), (1, 1), (p, p), m.scale(out), true));
        let rname = format!("{}_relu", lname);
        layers.push(LayerSpec::relu(&rname, LayerInput::layer(&lname)));
        rname
    };

    let b1 = conv_relu(layers, format!("{}_b1", name), src.clone(), 1, 0, c1);
    let b2r = conv_relu(layers, format!("{}_b2_reduce", name), src.clone(), 1, 0, r3);
    let b2 = conv_relu(layers, format!("{}_b2", name), LayerInput::layer(b2r), 3, 1, c3);
    let b3r = conv_relu(layers, format!("{}_b3_reduce", name), src.clone(), 1, 0, r5);
    let b3 = conv_relu(layers, format!("{}_b3", name), LayerInput::layer(b3r), 5, 2, c5);
    let pname = format!("{}_pool", name);
    layers.push(LayerSpec::maxpool(&pname, src, (3, 3), (1, 1), (1, 1)));
    let b4 = conv_relu(layers, format!("{}_b4", name), LayerInput::layer(&pname), 1, 0, pool_proj);

    let cname = format!("{}_concat", name);
    layers.push(LayerSpec::concat(
        &cname,
        vec![
            LayerInput::layer(b1),
            LayerInput::layer(b2),
            LayerInput::layer(b3),
            LayerInput::layer(b4),
        ],
    ));
    cname
}

/// Inception baseline up to 4e: monolithic (no factors), 832 output
/// channels at full width, output grid 67x120 for 3x1080x1920 input.
pub fn build_googlenet4e(cfg: &ZooConfig) -> GraphSpec {
    let m = cfg.width_multiplier;
    let mut layers = part_a(m);
    let mut last = "pool2".to_string();
    last = inception(&mut layers, &last, "3a", 64, 96, 128, 16, 32, 32, m);
    last = inception(&mut layers, &last, "3b", 128, 128, 192, 32, 96, 64, m);
    layers.push(LayerSpec::maxpool("pool3", LayerInput::layer(last), (3, 3), (2, 2), (1, 1)));
    let mut last = "pool3".to_string();
    last = inception(&mut layers, &last, "4a", 192, 96, 208, 16, 48, 64, m);
    last = inception(&mut layers, &last, "4b", 160, 112, 224, 24, 64, 64, m);
    last = inception(&mut layers, &last, "4c", 128, 128, 256, 24, 64, 64, m);
    last = inception(&mut layers, &last, "4d", 112, 144, 288, 32, 64, 64, m);
    inception(&mut layers, &last, "4e", 256, 160, 320, 32, 128, 128, m);

    GraphSpec {
        name: "googlenet4e".into(),
        input_shape: cfg.input_shape,
        stem: layers,
        factors: vec![],
        trailing: None,
    }
}

/// Conv-factor widths: (a, a, b, b, c, exit) for the six-conv chain
/// s2, s1, s2, s1, s2 (reduced padding), s2.
struct ConvFactorCfg {
    name: &'static str,
    kernel: usize,
    widths: [usize; 6],
}

fn conv_factor(cfg: &ConvFactorCfg, input: LayerInput, m: Multiplier) -> Factor {
    let k = cfg.kernel;
    let same = (k - 1) / 2;
    let reduced = same - 1;
    // stride and padding per conv in the chain
    let plan: [(usize, usize); 6] =
        [(2, same), (1, same), (2, same), (1, same), (2, reduced), (2, same)];
    let mut b = Body::from(input);
    for (i, ((stride, pad), width)) in plan.iter().zip(cfg.widths).enumerate() {
        let cname = format!("{}_conv{}", cfg.name, i + 1);
        b.conv(&cname, k, *stride, *pad, m.scale(width));
        b.relu(&format!("{}_relu{}", cfg.name, i + 1));
    }
    let entry = format!("{}_conv1", cfg.name);
    let exit = format!("{}_relu6", cfg.name);
    Factor { name: cfg.name.to_string(), body: b.layers, entry, exit }
}

const V2_F2: ConvFactorCfg = ConvFactorCfg { name: "f2", kernel: 3, widths: [24, 24, 32, 32, 24, 768] };
const V2_F3: ConvFactorCfg = ConvFactorCfg { name: "f3", kernel: 5, widths: [12, 12, 16, 16, 12, 512] };
const V2_F4: ConvFactorCfg = ConvFactorCfg { name: "f4", kernel: 7, widths: [8, 8, 8, 8, 6, 384] };

/// FactorNet V1: the baseline's first two conv stages as a shared stem,
/// then four factors (3x3 pool chain; 3x3, 5x5 and 7x7 conv pairs), each
/// adding one stride-2 stage so exits sit on the 4e grid.
pub fn build_factornet_v1(cfg: &ZooConfig) -> GraphSpec {
    let m = cfg.width_multiplier;
    let stem = part_a(m);
    let stem_out = LayerInput::layer("pool2");

    let mut f1 = Body::from(stem_out.clone());
    f1.pool("f1_pool1", 3, 2, 1).pool("f1_pool2", 3, 1, 1);
    let f1 = Factor {
        name: "f1".into(),
        body: f1.layers,
        entry: "f1_pool1".into(),
        exit: "f1_pool2".into(),
    };

    let conv_pair = |name: &str, k: usize, c_mid: usize, c_out: usize| -> Factor {
        let same = (k - 1) / 2;
        let mut b = Body::from(stem_out.clone());
        b.conv(&format!("{}_conv1", name), k, 2, same, m.scale(c_mid))
            .relu(&format!("{}_relu1", name))
            .conv(&format!("{}_conv2", name), k, 1, same, m.scale(c_out))
            .relu(&format!("{}_relu2", name));
        Factor {
            name: name.to_string(),
            body: b.layers,
            entry: format!("{}_conv1", name),
            exit: format!("{}_relu2", name),
        }
    };

    GraphSpec {
        name: "factornet_v1".into(),
        input_shape: cfg.input_shape,
        stem,
        factors: vec![
            f1,
            conv_pair("f2", 3, 32, 224),
            conv_pair("f3", 5, 12, 160),
            conv_pair("f4", 7, 8, 96),
        ],
        trailing: None,
    }
}

/// FactorNet V2: no stem; the pool factor and three six-conv factors run
/// from the raw input, each with cumulative stride 16.
pub fn build_factornet_v2(cfg: &ZooConfig) -> GraphSpec {
    let m = cfg.width_multiplier;
    let mut f1 = Body::from(LayerInput::GraphInput);
    f1.pool("f1_pool1", 3, 2, 1)
        .pool("f1_pool2", 3, 2, 1)
        .pool("f1_pool3", 3, 2, 0)
        .pool("f1_pool4", 3, 2, 1);
    let f1 = Factor {
        name: "f1".into(),
        body: f1.layers,
        entry: "f1_pool1".into(),
        exit: "f1_pool4".into(),
    };

    GraphSpec {
        name: "factornet_v2".into(),
        input_shape: cfg.input_shape,
        stem: vec![],
        factors: vec![
            f1,
            conv_factor(&V2_F2, LayerInput::GraphInput, m),
            conv_factor(&V2_F3, LayerInput::GraphInput, m),
            conv_factor(&V2_F4, LayerInput::GraphInput, m),
        ],
        trailing: None,
    }
}
