//! Plain-text model-spec format: line-oriented, one layer per line.
//!
//! ```text
//! # comments run to end of line; blank lines are ignored
//! input 3x1080x1920                # channels x height x width, first
//! conv c1 in=@input k=7x7 s=2x2 p=3x3 out=64 bias=1
//! relu r1 in=c1
//! maxpool p1 in=r1 k=3x3 s=2x2 p=0x0
//! factor f1 {
//!   maxpool f1p in=p1 k=3x3 s=2x2 p=1x1
//! }
//! concat join in=f1p,f2x          # optional trailing merge of factor exits
//! ```
//!
//! Layer lines before the first `factor` block form the stem; each `factor
//! <name> { ... }` block declares one factor body (entry and exit are
//! inferred: the unique layer reading from outside the body, and the unique
//! layer nothing in the body consumes). After factor blocks, only a single
//! trailing `concat` is allowed. Unknown or duplicate keys are rejected.
//! The parser checks syntax and structure only; semantic problems (cycles,
//! dangling inputs, overlaps) are reported by [`crate::graph::validate`].

use crate::graph::{Factor, GraphSpec, LayerInput, LayerKind, LayerSpec, Shape};
use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, msg: msg.into() })
}

/// Parses the text format into a graph named `name`.
pub fn parse(text: &str, name: impl Into<String>) -> Result<GraphSpec, ParseError> {
    let mut input_shape: Option<Shape> = None;
    let mut stem: Vec<LayerSpec> = Vec::new();
    let mut factors: Vec<Factor> = Vec::new();
    let mut trailing: Option<LayerSpec> = None;
    let mut open_factor: Option<(String, Vec<LayerSpec>, usize)> = None;
    let mut seen_factor = false;

    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }

        if line == "}" {
            let Some((fname, body, decl_line)) = open_factor.take() else {
                return err(line_no, "unmatched '}'");
            };
            let factor = close_factor(fname, body, decl_line)?;
            factors.push(factor);
            continue;
        }

        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens[0] {
            "input" => {
                if input_shape.is_some() {
                    return err(line_no, "duplicate 'input' header");
                }
                if !stem.is_empty() || seen_factor || open_factor.is_some() {
                    return err(line_no, "'input' header must come before any layer");
                }
                if tokens.len() != 2 {
                    return err(line_no, "expected 'input CxHxW'");
                }
                let dims = parse_dims::<3>(tokens[1], line_no)?;
                if dims.contains(&0) {
                    return err(line_no, "input dimensions must be >= 1");
                }
                input_shape = Some(Shape::new(dims[0], dims[1], dims[2]));
            }
            "factor" => {
                if open_factor.is_some() {
                    return err(line_no, "factor blocks cannot nest");
                }
                if trailing.is_some() {
                    return err(line_no, "factor block after the trailing concat");
                }
                if tokens.len() != 3 || tokens[2] != "{" {
                    return err(line_no, "expected 'factor <name> {'");
                }
                check_name(tokens[1], line_no)?;
                seen_factor = true;
                open_factor = Some((tokens[1].to_string(), Vec::new(), line_no));
            }
            "conv" | "maxpool" | "relu" | "concat" => {
                if input_shape.is_none() {
                    return err(line_no, "layer declared before the 'input' header");
                }
                let layer = parse_layer(&tokens, line_no)?;
                if let Some((_, body, _)) = open_factor.as_mut() {
                    body.push(layer);
                } else if seen_factor {
                    // After factor blocks only one trailing concat may follow.
                    if !matches!(layer.kind, LayerKind::ConcatChannels) {
                        return err(
                            line_no,
                            "only a single trailing concat may follow factor blocks",
                        );
                    }
                    if trailing.is_some() {
                        return err(line_no, "duplicate trailing concat");
                    }
                    trailing = Some(layer);
                } else {
                    stem.push(layer);
                }
            }
            other => return err(line_no, format!("unknown directive '{}'", other)),
        }
    }

    if let Some((fname, _, decl_line)) = open_factor {
        return err(decl_line, format!("factor '{}' is never closed", fname));
    }
    let Some(input_shape) = input_shape else {
        return err(1, "missing 'input CxHxW' header");
    };
    Ok(GraphSpec { name: name.into(), input_shape, stem, factors, trailing })
}

fn close_factor(name: String, body: Vec<LayerSpec>, decl_line: usize) -> Result<Factor, ParseError> {
    if body.is_empty() {
        return err(decl_line, format!("factor '{}' has an empty body", name));
    }
    let names: HashSet<&str> = body.iter().map(|l| l.name.as_str()).collect();
    let entries: Vec<&str> = body
        .iter()
        .filter(|l| {
            l.inputs
                .iter()
                .any(|i| i.as_layer_name().is_none_or(|n| !names.contains(n)))
        })
        .map(|l| l.name.as_str())
        .collect();
    let consumed: HashSet<&str> = body
        .iter()
        .flat_map(|l| l.inputs.iter().filter_map(|i| i.as_layer_name()))
        .filter(|n| names.contains(n))
        .collect();
    let exits: Vec<&str> =
        body.iter().filter(|l| !consumed.contains(l.name.as_str())).map(|l| l.name.as_str()).collect();
    if entries.len() != 1 {
        return err(
            decl_line,
            format!(
                "factor '{}' must have exactly one entry layer reading from outside, found {:?}",
                name, entries
            ),
        );
    }
    if exits.len() != 1 {
        return err(
            decl_line,
            format!("factor '{}' must have exactly one exit layer, found {:?}", name, exits),
        );
    }
    let entry = entries[0].to_string();
    let exit = exits[0].to_string();
    Ok(Factor { name, body, entry, exit })
}

fn parse_layer(tokens: &[&str], line_no: usize) -> Result<LayerSpec, ParseError> {
    if tokens.len() < 2 {
        return err(line_no, format!("'{}' needs a layer name", tokens[0]));
    }
    let name = tokens[1];
    check_name(name, line_no)?;
    let mut kv: HashMap<&str, &str> = HashMap::new();
    for tok in &tokens[2..] {
        let Some((k, v)) = tok.split_once('=') else {
            return err(line_no, format!("expected key=value, got '{}'", tok));
        };
        if kv.insert(k, v).is_some() {
            return err(line_no, format!("duplicate key '{}'", k));
        }
    }
    let allowed: &[&str] = match tokens[0] {
        "conv" => &["in", "k", "s", "p", "out", "bias"],
        "maxpool" => &["in", "k", "s", "p"],
        _ => &["in"],
    };
    for k in kv.keys() {
        if !allowed.contains(k) {
            return err(line_no, format!("unknown key '{}' for {}", k, tokens[0]));
        }
    }
    let take = |key: &str, kv: &HashMap<&str, &str>| -> Result<String, ParseError> {
        kv.get(key)
            .map(|v| v.to_string())
            .ok_or(ParseError { line: line_no, msg: format!("missing key '{}'", key) })
    };

    let in_raw = take("in", &kv)?;
    let kind = match tokens[0] {
        "conv" => {
            let k = parse_dims::<2>(&take("k", &kv)?, line_no)?;
            let s = parse_dims::<2>(&take("s", &kv)?, line_no)?;
            let p = parse_dims::<2>(&take("p", &kv)?, line_no)?;
            let out: usize = parse_int(&take("out", &kv)?, line_no)?;
            let bias = match take("bias", &kv)?.as_str() {
                "0" => false,
                "1" => true,
                other => return err(line_no, format!("bias must be 0 or 1, got '{}'", other)),
            };
            LayerKind::Conv {
                kernel: (k[0], k[1]),
                stride: (s[0], s[1]),
                padding: (p[0], p[1]),
                out_channels: out,
                has_bias: bias,
            }
        }
        "maxpool" => {
            let k = parse_dims::<2>(&take("k", &kv)?, line_no)?;
            let s = parse_dims::<2>(&take("s", &kv)?, line_no)?;
            let p = parse_dims::<2>(&take("p", &kv)?, line_no)?;
            LayerKind::MaxPool { kernel: (k[0], k[1]), stride: (s[0], s[1]), padding: (p[0], p[1]) }
        }
        "relu" => LayerKind::Relu,
        "concat" => LayerKind::ConcatChannels,
        _ => unreachable!("caller matched the keyword"),
    };

    let inputs: Vec<LayerInput> = if matches!(kind, LayerKind::ConcatChannels) {
        in_raw.split(',').map(|s| parse_input(s, line_no)).collect::<Result<_, _>>()?
    } else {
        if in_raw.contains(',') {
            return err(line_no, format!("'{}' takes a single input", tokens[0]));
        }
        vec![parse_input(&in_raw, line_no)?]
    };
    Ok(LayerSpec { name: name.to_string(), kind, inputs })
}

fn parse_input(s: &str, line_no: usize) -> Result<LayerInput, ParseError> {
    if s == "@input" {
        return Ok(LayerInput::GraphInput);
    }
    check_name(s, line_no)?;
    Ok(LayerInput::Layer(s.to_string()))
}

fn check_name(s: &str, line_no: usize) -> Result<(), ParseError> {
    if s.is_empty() {
        return err(line_no, "empty name");
    }
    if !s.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')) {
        return err(line_no, format!("invalid name '{}' (use [A-Za-z0-9_.-])", s));
    }
    Ok(())
}

fn parse_int(s: &str, line_no: usize) -> Result<usize, ParseError> {
    s.parse().map_err(|_| ParseError { line: line_no, msg: format!("invalid integer '{}'", s) })
}

fn parse_dims<const N: usize>(s: &str, line_no: usize) -> Result<[usize; N], ParseError> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != N {
        return err(line_no, format!("expected {} 'x'-separated integers, got '{}'", N, s));
    }
    let mut out = [0usize; N];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = parse_int(part, line_no)?;
    }
    Ok(out)
}

/// Canonical text form; [`parse`] of the result reproduces the graph
/// structurally.
pub fn export(graph: &GraphSpec) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "input {}x{}x{}",
        graph.input_shape.channels, graph.input_shape.height, graph.input_shape.width
    );
    for layer in &graph.stem {
        let _ = writeln!(out, "{}", layer_line(layer));
    }
    for factor in &graph.factors {
        let _ = writeln!(out, "factor {} {{", factor.name);
        for layer in &factor.body {
            let _ = writeln!(out, "  {}", layer_line(layer));
        }
        let _ = writeln!(out, "}}");
    }
    if let Some(trailing) = &graph.trailing {
        let _ = writeln!(out, "{}", layer_line(trailing));
    }
    out
}

fn layer_line(layer: &LayerSpec) -> String {
    let ins =
        layer.inputs.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(",");
    match &layer.kind {
        LayerKind::Conv { kernel, stride, padding, out_channels, has_bias } => format!(
            "conv {} in={} k={}x{} s={}x{} p={}x{} out={} bias={}",
            layer.name,
            ins,
            kernel.0,
            kernel.1,
            stride.0,
            stride.1,
            padding.0,
            padding.1,
            out_channels,
            *has_bias as u8
        ),
        LayerKind::MaxPool { kernel, stride, padding } => format!(
            "maxpool {} in={} k={}x{} s={}x{} p={}x{}",
            layer.name, ins, kernel.0, kernel.1, stride.0, stride.1, padding.0, padding.1
        ),
        LayerKind::Relu => format!("relu {} in={}", layer.name, ins),
        LayerKind::ConcatChannels => format!("concat {} in={}", layer.name, ins),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::validate;

    const SAMPLE: &str = "\
# a small factorized net
input 3x32x32
conv s1 in=@input k=3x3 s=1x1 p=1x1 out=8 bias=1
relu s1r in=s1

factor f1 {
  maxpool f1p in=s1r k=3x3 s=2x2 p=1x1
}
factor f2 {
  conv f2c in=s1r k=5x5 s=2x2 p=2x2 out=4 bias=0
  relu f2r in=f2c
}
";

    #[test]
    fn parses_stem_and_factors() {
        let g = parse(SAMPLE, "sample").unwrap();
        assert_eq!(g.input_shape, Shape::new(3, 32, 32));
        assert_eq!(g.stem.len(), 2);
        assert_eq!(g.factors.len(), 2);
        assert_eq!(g.factors[0].entry, "f1p");
        assert_eq!(g.factors[0].exit, "f1p");
        assert_eq!(g.factors[1].entry, "f2c");
        assert_eq!(g.factors[1].exit, "f2r");
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn roundtrips_through_export() {
        let g = parse(SAMPLE, "sample").unwrap();
        let text = export(&g);
        let g2 = parse(&text, "sample").unwrap();
        assert_eq!(g, g2);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let text = "input 1x4x4\nconv c in=@input k=1x1 s=1x1 p=0x0 out=1 bias=0 frob=2\n";
        let e = parse(text, "t").unwrap_err();
        assert!(e.msg.contains("unknown key 'frob'"), "{}", e);
    }

    #[test]
    fn duplicate_key_is_rejected() {
        let text = "input 1x4x4\nrelu r in=@input in=@input\n";
        assert!(parse(text, "t").unwrap_err().msg.contains("duplicate key"));
    }

    #[test]
    fn missing_key_is_rejected() {
        let text = "input 1x4x4\nconv c in=@input k=1x1 s=1x1 p=0x0 out=1\n";
        assert!(parse(text, "t").unwrap_err().msg.contains("missing key 'bias'"));
    }

    #[test]
    fn missing_input_header_is_rejected() {
        assert!(parse("relu r in=@input\n", "t").unwrap_err().msg.contains("before the 'input'"));
    }

    #[test]
    fn unknown_directive_is_rejected() {
        let text = "input 1x4x4\navgpool p in=@input\n";
        assert!(parse(text, "t").unwrap_err().msg.contains("unknown directive"));
    }

    #[test]
    fn unclosed_factor_is_rejected() {
        let text = "input 1x4x4\nfactor f {\nrelu r in=@input\n";
        assert!(parse(text, "t").unwrap_err().msg.contains("never closed"));
    }

    #[test]
    fn stem_layer_after_factor_block_is_rejected() {
        let text = "input 1x4x4\nfactor f {\nrelu r in=@input\n}\nrelu late in=r\n";
        assert!(parse(text, "t").unwrap_err().msg.contains("trailing concat"));
    }

    #[test]
    fn trailing_concat_is_accepted() {
        let text = "\
input 1x4x4
factor f1 {
  relu a in=@input
}
factor f2 {
  relu b in=@input
}
concat j in=a,b
";
        let g = parse(text, "t").unwrap();
        assert!(g.trailing.is_some());
        assert!(validate(&g).is_empty());
        assert_eq!(parse(&export(&g), "t").unwrap(), g);
    }

    #[test]
    fn cycle_parses_but_fails_validation() {
        let text = "input 1x4x4\nrelu a in=b\nrelu b in=a\n";
        let g = parse(text, "t").unwrap();
        assert!(!validate(&g).is_empty());
    }
}
