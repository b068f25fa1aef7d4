//! Canonical JSON reports.
//!
//! Keys are sorted, floats are written with 9 significant digits in
//! exponent form, and infinities become the strings `"+inf"` / `"-inf"`.
//! Identical payloads always produce identical bytes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde_json::{Map, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    FormatTable,
    Coverage,
    SearchResult,
    Assignment,
    Eval,
}

impl ReportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ReportKind::FormatTable => "format_table",
            ReportKind::Coverage => "coverage",
            ReportKind::SearchResult => "search_result",
            ReportKind::Assignment => "assignment",
            ReportKind::Eval => "eval",
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("{kind} report: {problem}")]
pub struct SchemaViolation {
    pub kind: &'static str,
    pub problem: String,
}

/// JSON number for `v`, or a string marker when `v` is not finite.
pub fn num(v: f64) -> Value {
    if v.is_nan() {
        Value::String("nan".into())
    } else if v == f64::INFINITY {
        Value::String("+inf".into())
    } else if v == f64::NEG_INFINITY {
        Value::String("-inf".into())
    } else {
        serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn require(kind: ReportKind, obj: &Map<String, Value>, keys: &[&str], ctx: &str) -> Result<(), SchemaViolation> {
    for k in keys {
        if !obj.contains_key(*k) {
            return Err(SchemaViolation {
                kind: kind.as_str(),
                problem: format!("{ctx} lacks key {k:?}"),
            });
        }
    }
    Ok(())
}

fn as_object<'a>(kind: ReportKind, v: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>, SchemaViolation> {
    v.as_object().ok_or_else(|| SchemaViolation {
        kind: kind.as_str(),
        problem: format!("{ctx} is not an object"),
    })
}

fn as_array<'a>(kind: ReportKind, v: &'a Value, ctx: &str) -> Result<&'a Vec<Value>, SchemaViolation> {
    v.as_array().ok_or_else(|| SchemaViolation {
        kind: kind.as_str(),
        problem: format!("{ctx} is not an array"),
    })
}

const FORMAT_KEYS: &[&str] = &["x", "y", "z", "b", "n"];
const COVERAGE_KEYS: &[&str] = &["below_window_frac", "in_denorm_frac", "in_norm_frac", "above_window_frac"];

/// Checks the fixed keys of each report kind.
pub fn check_schema(kind: ReportKind, body: &Value) -> Result<(), SchemaViolation> {
    match kind {
        ReportKind::FormatTable => {
            let o = as_object(kind, body, "body")?;
            require(kind, o, &["format", "window", "distinct_values"], "body")?;
            require(kind, as_object(kind, &o["format"], "format")?, FORMAT_KEYS, "format")?;
            require(kind, as_object(kind, &o["window"], "window")?, &["min_subnormal", "min_normal", "max"], "window")
        }
        ReportKind::Coverage | ReportKind::SearchResult => {
            let o = as_object(kind, body, "body")?;
            require(kind, o, &["tensors"], "body")?;
            for t in as_array(kind, &o["tensors"], "tensors")? {
                let t = as_object(kind, t, "tensor entry")?;
                require(kind, t, &["name", "role"], "tensor entry")?;
                if kind == ReportKind::SearchResult {
                    require(kind, t, &["format", "sqnr_db"], "tensor entry")?;
                }
                if let Some(c) = t.get("coverage") {
                    require(kind, as_object(kind, c, "coverage")?, COVERAGE_KEYS, "coverage")?;
                }
            }
            Ok(())
        }
        ReportKind::Assignment => {
            for row in as_array(kind, body, "body")? {
                require(kind, as_object(kind, row, "row")?, &["layer", "role", "x", "y", "z", "b"], "row")?;
            }
            Ok(())
        }
        ReportKind::Eval => {
            let o = as_object(kind, body, "body")?;
            require(kind, o, &["accuracy", "mode", "validation_samples"], "body")
        }
    }
}

/// Serializes a validated report: kind, tool version, input digests and body.
pub fn emit_report(kind: ReportKind, body: Value, inputs: &BTreeMap<String, String>) -> Result<Vec<u8>, SchemaViolation> {
    check_schema(kind, &body)?;
    let mut top = Map::new();
    top.insert("kind".into(), Value::String(kind.as_str().into()));
    top.insert("tool_version".into(), Value::String(TOOL_VERSION.into()));
    top.insert(
        "inputs".into(),
        Value::Object(
            inputs
                .iter()
                .map(|(k, v)| (k.clone(), Value::String(format!("sha256:{v}"))))
                .collect(),
        ),
    );
    top.insert("body".into(), body);
    let mut out = String::new();
    write_value(&mut out, &Value::Object(top), 0);
    out.push('\n');
    Ok(out.into_bytes())
}

fn write_number(out: &mut String, n: &serde_json::Number) {
    if let Some(i) = n.as_i64() {
        let _ = write!(out, "{i}");
    } else if let Some(u) = n.as_u64() {
        let _ = write!(out, "{u}");
    } else {
        let f = n.as_f64().unwrap_or(0.0);
        let _ = write!(out, "{f:.8e}");
    }
}

fn indent(out: &mut String, level: usize) {
    out.push('\n');
    out.push_str(&"  ".repeat(level));
}

fn write_value(out: &mut String, v: &Value, level: usize) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(out, n),
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                indent(out, level + 1);
                write_value(out, item, level + 1);
            }
            indent(out, level);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                indent(out, level + 1);
                out.push_str(&Value::String(k.clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[k], level + 1);
            }
            indent(out, level);
            out.push('}');
        }
    }
}
