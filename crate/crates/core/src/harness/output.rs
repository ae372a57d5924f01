use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::harness::experiment::ComparisonResult;
use crate::math::pca_project;
use crate::model::ForwardTrace;

/// Fixed six-decimal rendering; negative zero prints as zero.
pub fn fixed6(v: f64) -> String {
    let s = format!("{v:.6}");
    if s.trim_start_matches('-')
        .bytes()
        .all(|b| b == b'0' || b == b'.')
    {
        s.trim_start_matches('-').to_string()
    } else {
        s
    }
}

fn write_value(v: &Value, indent: usize, out: &mut String) {
    let pad = |n: usize| "  ".repeat(n);
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => write!(out, "{u}").expect("string write"),
            (None, Some(i)) => write!(out, "{i}").expect("string write"),
            _ => out.push_str(&fixed6(n.as_f64().expect("finite json number"))),
        },
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) if items.is_empty() => out.push_str("[]"),
        Value::Array(items) => {
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                write_value(item, indent + 1, out);
                out.push_str(if i + 1 < items.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push(']');
        }
        Value::Object(map) if map.is_empty() => out.push_str("{}"),
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push_str("{\n");
            for (i, k) in keys.iter().enumerate() {
                out.push_str(&pad(indent + 1));
                out.push_str(&Value::String((*k).clone()).to_string());
                out.push_str(": ");
                write_value(&map[*k], indent + 1, out);
                out.push_str(if i + 1 < keys.len() { ",\n" } else { "\n" });
            }
            out.push_str(&pad(indent));
            out.push('}');
        }
    }
}

/// Pretty JSON with lexicographically sorted keys and every float at six decimals, so
/// re-emitting a parsed document reproduces it byte for byte.
pub fn canonical_json(v: &Value) -> String {
    let mut out = String::new();
    write_value(v, 0, &mut out);
    out.push('\n');
    out
}

pub fn to_canonical_json<T: Serialize>(v: &T) -> Result<String> {
    let value = serde_json::to_value(v).map_err(|e| Error::Format(e.to_string()))?;
    Ok(canonical_json(&value))
}

/// One table line: a layer or category, both measurements, and the relative change.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TableRow {
    pub key: String,
    pub baseline: f64,
    pub hfu: f64,
    pub change_pct: f64,
}

/// Rows for the given pairs; pairs with a zero baseline are dropped and reported.
fn rows(
    table: &str,
    pairs: impl IntoIterator<Item = (String, f64, f64)>,
    warnings: &mut Vec<String>,
) -> Vec<TableRow> {
    let mut out = Vec::new();
    for (key, baseline, hfu) in pairs {
        if baseline == 0.0 || !baseline.is_finite() || !hfu.is_finite() {
            warnings.push(format!(
                "{table}: row '{key}' omitted (baseline {baseline})"
            ));
            continue;
        }
        out.push(TableRow {
            key,
            baseline,
            hfu,
            change_pct: 100.0 * (hfu - baseline) / baseline,
        });
    }
    out
}

/// A named table: file stem, title and rows.
pub type NamedTable = (&'static str, &'static str, Vec<TableRow>);

/// Every comparison table keyed by file stem, plus the warnings raised while building them.
pub fn comparison_tables(r: &ComparisonResult) -> (Vec<NamedTable>, Vec<String>) {
    let mut warnings = Vec::new();
    let per_layer = |b: &[f64], f: &[f64]| -> Vec<(String, f64, f64)> {
        b.iter()
            .zip(f)
            .enumerate()
            .map(|(l, (&x, &y))| (l.to_string(), x, y))
            .collect()
    };
    let per_category = |b: &std::collections::BTreeMap<String, f64>,
                        f: &std::collections::BTreeMap<String, f64>| {
        b.iter()
            .filter_map(|(k, &x)| f.get(k).map(|&y| (k.clone(), x, y)))
            .collect::<Vec<_>>()
    };
    let (bl, fl) = (&r.baseline.layers, &r.folding.layers);
    let tables = vec![
        (
            "variance",
            "layer",
            rows(
                "variance",
                per_layer(&bl.variance, &fl.variance),
                &mut warnings,
            ),
        ),
        (
            "heads",
            "layer",
            rows(
                "heads",
                per_layer(&bl.head_utilization, &fl.head_utilization),
                &mut warnings,
            ),
        ),
        (
            "reorder",
            "category",
            rows(
                "reorder",
                per_category(&r.baseline.reordering, &r.folding.reordering),
                &mut warnings,
            ),
        ),
        (
            "sparsity",
            "layer",
            rows(
                "sparsity",
                per_layer(&bl.sparsity, &fl.sparsity),
                &mut warnings,
            ),
        ),
        (
            "perplexity",
            "category",
            rows(
                "perplexity",
                per_category(&r.baseline.perplexity, &r.folding.perplexity),
                &mut warnings,
            ),
        ),
    ];
    (tables, warnings)
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn table_csv(key_column: &str, rows: &[TableRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(e.to_string());
    w.write_record([key_column, "baseline", "hfu", "change_pct"])
        .map_err(fail)?;
    for r in rows {
        w.write_record([
            r.key.clone(),
            fixed6(r.baseline),
            fixed6(r.hfu),
            fixed6(r.change_pct),
        ])
        .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

/// The `metrics.json` document: both reports, the comparison tables and every cross-check.
/// Wall-clock timings are left out so reruns are byte-identical.
pub fn metrics_document(r: &ComparisonResult) -> Result<Value> {
    let (tables, warnings) = comparison_tables(r);
    let mut doc = serde_json::to_value(r).map_err(|e| Error::Format(e.to_string()))?;
    let deltas: serde_json::Map<String, Value> = tables
        .iter()
        .map(|(name, _, rows)| {
            (
                name.to_string(),
                serde_json::to_value(rows).expect("rows serialize"),
            )
        })
        .collect();
    let obj = doc.as_object_mut().expect("struct serializes to an object");
    obj.insert("deltas".into(), Value::Object(deltas));
    obj.insert("warnings".into(), json!(warnings));
    obj.insert(
        "schema_version".into(),
        json!(crate::harness::config::SCHEMA_VERSION),
    );
    Ok(doc)
}

/// Writes `variance.csv`, `heads.csv`, `reorder.csv`, `sparsity.csv`, `perplexity.csv`,
/// `metrics.json` and `timing.json` into `dir`. Returns the paths written.
pub fn emit_tables(r: &ComparisonResult, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    let (tables, _) = comparison_tables(r);
    for (name, key, rows) in &tables {
        let path = dir.join(format!("{name}.csv"));
        write_file(&path, &table_csv(key, rows)?)?;
        written.push(path);
    }
    let path = dir.join("metrics.json");
    write_file(&path, canonical_json(&metrics_document(r)?).as_bytes())?;
    written.push(path);

    let overhead = r.overhead_pct().ok();
    let timing = json!({
        "baseline_epoch_seconds": r.baseline.epoch_seconds,
        "folding_epoch_seconds": r.folding.epoch_seconds,
        "overhead_pct": overhead,
    });
    let path = dir.join("timing.json");
    write_file(&path, canonical_json(&timing).as_bytes())?;
    written.push(path);
    Ok(written)
}

/// PCA-2D coordinates of one layer's residual activations, one row per token.
pub fn projection_csv(trace: &ForwardTrace, layer: usize, tokens: &[usize]) -> Result<Vec<u8>> {
    let x = trace.residual.get(layer).ok_or_else(|| {
        Error::Config(format!(
            "layer {layer} outside trace with {} layers",
            trace.residual.len()
        ))
    })?;
    if x.rows() != tokens.len() {
        return Err(Error::shape(
            "export_projection",
            format!("{} activation rows for {} tokens", x.rows(), tokens.len()),
        ));
    }
    let p = pca_project(x, 2)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["token", "x", "y"]).map_err(fail)?;
    for (i, &t) in tokens.iter().enumerate() {
        w.write_record([t.to_string(), fixed6(p.get(i, 0)), fixed6(p.get(i, 1))])
            .map_err(fail)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

pub fn export_projection(
    trace: &ForwardTrace,
    layer: usize,
    tokens: &[usize],
    path: &Path,
) -> Result<()> {
    write_file(path, &projection_csv(trace, layer, tokens)?)
}

/// Reads back a table CSV written by [`emit_tables`], checking its header.
pub fn read_table(path: &Path) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    let cols: Vec<&str> = header.iter().collect();
    if cols.len() != 4 || cols[1..] != ["baseline", "hfu", "change_pct"] {
        return Err(Error::Format(format!(
            "{}: unexpected header {cols:?}",
            path.display()
        )));
    }
    let num = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| Error::Format(format!("{}: bad number '{s}': {e}", path.display())))
    };
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            Ok(TableRow {
                key: rec[0].to_string(),
                baseline: num(&rec[1])?,
                hfu: num(&rec[2])?,
                change_pct: num(&rec[3])?,
            })
        })
        .collect()
}

/// Reads a JSON output and confirms it is already in canonical form.
pub fn read_canonical_json(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if canonical_json(&v) != text {
        return Err(Error::Format(format!(
            "{} is not in canonical form",
            path.display()
        )));
    }
    Ok(v)
}

/// Reads a projection CSV back as `(token, x, y)` triples.
pub fn read_projection(path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let header = r
        .headers()
        .map_err(|e| Error::Format(e.to_string()))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["token", "x", "y"] {
        return Err(Error::Format(format!(
            "{}: unexpected header",
            path.display()
        )));
    }
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let bad = |e: String| Error::Format(format!("{}: {e}", path.display()));
            Ok((
                rec[0]
                    .parse()
                    .map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                rec[1]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
                rec[2]
                    .parse()
                    .map_err(|e: std::num::ParseFloatError| bad(e.to_string()))?,
            ))
        })
        .collect()
}
