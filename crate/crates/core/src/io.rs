//! File formats: EMB1 binary and CSV matrices, JSONL pair datasets, and
//! JSON analysis reports.
//!
//! EMB1 layout (all little-endian):
//!
//! ```text
//! offset 0   b"EMB1"
//! offset 4   u32 rows
//! offset 8   u32 cols
//! offset 12  rows * cols f64 values, row-major
//! ```

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::PairDataset;
use crate::matrix::EmbeddingMatrix;

pub const EMB1_MAGIC: &[u8; 4] = b"EMB1";
pub const EMB1_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixFormat {
    Csv,
    Emb1,
}

impl MatrixFormat {
    /// `.emb`/`.emb1`/`.bin` are EMB1; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("emb" | "emb1" | "bin") => MatrixFormat::Emb1,
            _ => MatrixFormat::Csv,
        }
    }
}

pub fn decode_emb1(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < 4 || &bytes[..4] != EMB1_MAGIC {
        return Err(Error::BadMagic {
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < EMB1_HEADER_LEN {
        return Err(Error::Truncated {
            offset: bytes.len(),
            expected: EMB1_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = (rows as u64)
        .checked_mul(cols as u64)
        .and_then(|n| n.checked_mul(8))
        .and_then(|n| usize::try_from(n).ok())
        .and_then(|n| n.checked_add(EMB1_HEADER_LEN))
        .ok_or(Error::DimensionOverflow {
            rows: rows as u64,
            cols: cols as u64,
        })?;
    if bytes.len() < payload {
        // offset of the first value that is not fully present
        let whole = (bytes.len() - EMB1_HEADER_LEN) / 8;
        return Err(Error::Truncated {
            offset: EMB1_HEADER_LEN + whole * 8,
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(Error::TrailingData {
            offset: payload,
            extra: bytes.len() - payload,
        });
    }
    let mut values = Vec::with_capacity((rows as usize) * (cols as usize));
    for (i, chunk) in bytes[EMB1_HEADER_LEN..].chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(Error::NonFiniteValue {
                location: format!("byte offset {}", EMB1_HEADER_LEN + 8 * i),
                value: v,
            });
        }
        values.push(v);
    }
    EmbeddingMatrix::from_shape_vec(rows as usize, cols as usize, values)
}

pub fn encode_emb1(x: ndarray::ArrayView2<'_, f64>) -> Result<Vec<u8>> {
    let (rows, cols) = x.dim();
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidShape(format!(
            "refusing to write an empty {rows}x{cols} matrix"
        )));
    }
    let (r32, c32) = match (u32::try_from(rows), u32::try_from(cols)) {
        (Ok(r), Ok(c)) => (r, c),
        _ => {
            return Err(Error::DimensionOverflow {
                rows: rows as u64,
                cols: cols as u64,
            })
        }
    };
    let mut out = Vec::with_capacity(EMB1_HEADER_LEN + rows * cols * 8);
    out.extend_from_slice(EMB1_MAGIC);
    out.extend_from_slice(&r32.to_le_bytes());
    out.extend_from_slice(&c32.to_le_bytes());
    for ((i, j), v) in x.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite { row: i, col: j });
        }
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Parses CSV text; a first line whose leading field is not a number is
/// treated as a header.
pub fn parse_csv(text: &str) -> Result<EmbeddingMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (idx, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            location: e.position().map_or_else(
                || format!("record {}", idx + 1),
                |p| format!("line {}", p.line()),
            ),
            message: e.to_string(),
        })?;
        let line = rec.position().map_or(idx as u64 + 1, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        if idx == 0 && rec.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
            continue;
        }
        let mut row = Vec::with_capacity(rec.len());
        for (col, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| Error::Parse {
                location: format!("line {line}, column {}", col + 1),
                message: format!("not a number: {field:?}"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFiniteValue {
                    location: format!("line {line}, column {}", col + 1),
                    value: v,
                });
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    location: format!("line {line}"),
                    message: format!("{} fields, expected {}", row.len(), first.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::InvalidShape("CSV contains no data rows".into()));
    }
    EmbeddingMatrix::from_rows(&rows)
}

pub fn format_csv(x: ndarray::ArrayView2<'_, f64>) -> Result<String> {
    if x.nrows() == 0 || x.ncols() == 0 {
        return Err(Error::InvalidShape(
            "refusing to write an empty matrix".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in x.rows() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| Error::Parse {
                location: "csv output".into(),
                message: e.to_string(),
            })?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Parse {
        location: "csv output".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn read_matrix(path: &Path, format: MatrixFormat) -> Result<EmbeddingMatrix> {
    match format {
        MatrixFormat::Emb1 => decode_emb1(&fs::read(path).map_err(|e| Error::io(path, e))?),
        MatrixFormat::Csv => parse_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?),
    }
}

pub fn write_matrix(x: &EmbeddingMatrix, path: &Path, format: MatrixFormat) -> Result<()> {
    let bytes = match format {
        MatrixFormat::Emb1 => encode_emb1(x.view())?,
        MatrixFormat::Csv => format_csv(x.view())?.into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub emb_a: Vec<f64>,
    pub emb_b: Vec<f64>,
    pub score: f64,
}

/// Parses JSONL pairs. Blank lines are skipped; errors name the 1-based line.
pub fn parse_pairs(reader: impl BufRead, name: &str) -> Result<PairDataset> {
    let mut ids = Vec::new();
    let mut pairs = Vec::new();
    let mut gold = Vec::new();
    let mut dim: Option<usize> = None;
    for (idx, line) in reader.lines().enumerate() {
        let n = idx + 1;
        let line = line.map_err(|e| Error::Parse {
            location: format!("line {n}"),
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: PairRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            location: format!("line {n}"),
            message: e.to_string(),
        })?;
        let d = *dim.get_or_insert(rec.emb_a.len());
        if rec.emb_a.len() != d || rec.emb_b.len() != d {
            return Err(Error::Parse {
                location: format!("line {n}"),
                message: format!(
                    "embedding dimensions {} and {}, expected {d}",
                    rec.emb_a.len(),
                    rec.emb_b.len()
                ),
            });
        }
        if !rec.score.is_finite() {
            return Err(Error::NonFiniteValue {
                location: format!("line {n}, field \"score\""),
                value: rec.score,
            });
        }
        ids.push(rec.id);
        pairs.push((rec.emb_a, rec.emb_b));
        gold.push(rec.score);
    }
    if pairs.is_empty() {
        return Err(Error::Parse {
            location: "line 1".into(),
            message: "no pair records".into(),
        });
    }
    PairDataset::new(name, ids, pairs, gold)
}

pub fn read_pairs(path: &Path) -> Result<PairDataset> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_pairs(BufReader::new(file), &name)
}

pub fn format_pairs(d: &PairDataset) -> Result<String> {
    let mut out = String::new();
    for ((id, (a, b)), score) in d.ids.iter().zip(&d.pairs).zip(&d.gold) {
        let rec = PairRecord {
            id: id.clone(),
            emb_a: a.clone(),
            emb_b: b.clone(),
            score: *score,
        };
        out.push_str(&serde_json::to_string(&rec).expect("pair record serialises"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_pairs(d: &PairDataset, path: &Path) -> Result<()> {
    fs::write(path, format_pairs(d)?).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMeta {
    pub tool: String,
    pub version: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub command: String,
    pub params: Value,
}

impl ReportMeta {
    pub fn new(command: &str, seed: Option<u64>, params: Value) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            seed,
            command: command.into(),
            params,
        }
    }
}

/// Top-level report document. Only `meta` is always present.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportFile {
    pub meta: ReportMeta,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uniformity: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub transform: Option<Value>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cone_bound: Option<Value>,
}

impl ReportFile {
    pub fn new(meta: ReportMeta) -> Self {
        Self {
            meta,
            spectrum: None,
            uniformity: None,
            eval: None,
            trace: None,
            transform: None,
            cone_bound: None,
        }
    }
}

/// Serialises any report section to a JSON value.
pub fn section<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("report sections serialise")
}

/// Pretty JSON with sorted object keys and shortest round-trip floats.
///
/// Optional fields are omitted rather than written as `null`, so any `null`
/// in the output can only come from a non-finite float and is rejected.
pub fn render_report(r: &ReportFile) -> Result<String> {
    let v = serde_json::to_value(r).map_err(|e| Error::Parse {
        location: "report".into(),
        message: e.to_string(),
    })?;
    if let Some(path) = find_null(&v, String::new()) {
        return Err(Error::NonFiniteValue {
            location: format!("report field {path}"),
            value: f64::NAN,
        });
    }
    let mut s = serde_json::to_string_pretty(&v).expect("value serialises");
    s.push('\n');
    Ok(s)
}

fn find_null(v: &Value, path: String) -> Option<String> {
    match v {
        Value::Null => Some(if path.is_empty() { "/".into() } else { path }),
        Value::Array(a) => a
            .iter()
            .enumerate()
            .find_map(|(i, x)| find_null(x, format!("{path}/{i}"))),
        Value::Object(m) => m
            .iter()
            .find_map(|(k, x)| find_null(x, format!("{path}/{k}"))),
        _ => None,
    }
}

pub fn write_report(r: &ReportFile, path: &Path) -> Result<()> {
    fs::write(path, render_report(r)?).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use serde_json::json;

    fn emb1(rows: u32, cols: u32, vals: &[f64]) -> Vec<u8> {
        let mut b = b"EMB1".to_vec();
        b.extend_from_slice(&rows.to_le_bytes());
        b.extend_from_slice(&cols.to_le_bytes());
        for v in vals {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn emb1_decodes_row_major() {
        let x = decode_emb1(&emb1(2, 2, &[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(x.as_array(), &array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn emb1_errors() {
        assert!(matches!(
            decode_emb1(b"EMB2\0\0\0\0"),
            Err(Error::BadMagic { .. })
        ));
        assert!(matches!(decode_emb1(b""), Err(Error::BadMagic { .. })));
        assert!(matches!(
            decode_emb1(b"EMB1\x01\0"),
            Err(Error::Truncated { offset: 6, .. })
        ));
        match decode_emb1(&emb1(2, 2, &[1.0, 2.0, 3.0])) {
            Err(Error::Truncated {
                offset,
                expected,
                found,
            }) => {
                assert_eq!(offset, 36);
                assert_eq!(expected, 44);
                assert_eq!(found, 36);
            }
            other => panic!("{other:?}"),
        }
        let mut partial = emb1(1, 2, &[1.0]);
        partial.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(
            decode_emb1(&partial),
            Err(Error::Truncated { offset: 20, .. })
        ));
        assert!(matches!(
            decode_emb1(&emb1(1, 1, &[1.0, 2.0])),
            Err(Error::TrailingData {
                offset: 20,
                extra: 8
            })
        ));
        match decode_emb1(&emb1(1, 2, &[1.0, f64::INFINITY])) {
            Err(Error::NonFiniteValue { location, .. }) => assert_eq!(location, "byte offset 20"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_emb1(&emb1(0, 3, &[])),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn emb1_dimension_overflow() {
        assert!(matches!(
            decode_emb1(&emb1(u32::MAX, u32::MAX, &[])),
            Err(Error::DimensionOverflow { .. })
        ));
    }

    #[test]
    fn encode_rejects_empty() {
        let empty = ndarray::Array2::<f64>::zeros((0, 4));
        assert!(matches!(
            encode_emb1(empty.view()),
            Err(Error::InvalidShape(_))
        ));
    }

    #[test]
    fn csv_parsing() {
        let x = parse_csv("1.0,2.0\n3.0,4.0").unwrap();
        assert_eq!(x.as_array(), &array![[1.0, 2.0], [3.0, 4.0]]);
        let h = parse_csv("f0,f1\n1.0,2.0\n3.0,4.0\n").unwrap();
        assert_eq!(h, x);
        match parse_csv("1,2\n3,x\n") {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2, column 2"),
            other => panic!("{other:?}"),
        }
        match parse_csv("1,2\n3,NaN\n") {
            Err(Error::NonFiniteValue { location, .. }) => assert_eq!(location, "line 2, column 2"),
            other => panic!("{other:?}"),
        }
        assert!(parse_csv("1,2\n3\n").is_err());
        assert!(parse_csv("a,b\n").is_err());
    }

    #[test]
    fn pairs_parsing() {
        let ok = r#"{"id":"p1","emb_a":[1.0,0.0],"emb_b":[0.5,0.5],"score":4.2}
{"id":"p2","emb_a":[0.0,1.0],"emb_b":[1.0,0.5],"score":1.0}
"#;
        let d = parse_pairs(ok.as_bytes(), "ok").unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.ids, vec!["p1", "p2"]);
        assert_eq!(d.gold, vec![4.2, 1.0]);

        let bad = r#"{"id":"p1","emb_a":[1.0,0.0],"emb_b":[0.5,0.5],"score":4.2}
{"id":"p2","emb_a":[0.0,1.0,2.0],"emb_b":[1.0,0.5,1.0],"score":1.0}
"#;
        match parse_pairs(bad.as_bytes(), "bad") {
            Err(Error::Parse { location, .. }) => assert_eq!(location, "line 2"),
            other => panic!("{other:?}"),
        }
        let missing = r#"{"id":"p1","emb_a":[1.0],"score":4.2}"#;
        match parse_pairs(missing.as_bytes(), "m") {
            Err(Error::Parse { location, message }) => {
                assert_eq!(location, "line 1");
                assert!(message.contains("emb_b"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_pairs("".as_bytes(), "empty").is_err());
        let huge = r#"{"id":"p1","emb_a":[1.0],"emb_b":[1.0],"score":1e999}"#;
        assert!(parse_pairs(huge.as_bytes(), "h").is_err());
    }

    #[test]
    fn report_rendering() {
        let mut r = ReportFile::new(ReportMeta::new("analyze", Some(7), json!({"b": 1, "a": 2})));
        r.spectrum = Some(json!({"cdf": [[0.5, 0.5], [1.0, 1.0]], "max": 3.0}));
        let s = render_report(&r).unwrap();
        assert_eq!(s, render_report(&r).unwrap());
        let v: Value = serde_json::from_str(&s).unwrap();
        assert_eq!(v["meta"]["seed"], 7);
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
        assert!(s.find("\"meta\"").unwrap() < s.find("\"spectrum\"").unwrap());
        assert!(!s.contains("trace"));

        r.uniformity = Some(section(&f64::NAN));
        match render_report(&r) {
            Err(Error::NonFiniteValue { location, .. }) => {
                assert_eq!(location, "report field /uniformity")
            }
            other => panic!("{other:?}"),
        }
    }
}
