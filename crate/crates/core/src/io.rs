//! Reading and writing curve sets and fit results.
//!
//! Curves are read from comma-separated files in one of two layouts:
//!
//! * wide: a first line `x,x_1,...,x_m`, then one line `curve_id,y_1,...,y_m`
//!   per curve; all curves share the grid;
//! * long: a header naming `curve_id`, `x` and `y` (and optionally `label`),
//!   then one line per observation in any order.
//!
//! Floating point values are written with 17 significant digits.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSpec;
use crate::error::{Error, Result};
use crate::model::{CurveSet, Engine, FitResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    Wide,
    #[default]
    Long,
}

/// Formats a float so that parsing it back yields the same bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Non-empty records with their one-based line numbers.
fn records(text: &str, path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn number(cell: &str, path: &Path, line: u64, what: &str) -> Result<f64> {
    let v: f64 = cell
        .parse()
        .map_err(|_| parse_err(path, line, format!("{what} {cell:?} is not a number")))?;
    if !v.is_finite() {
        return Err(parse_err(
            path,
            line,
            format!("{what} {cell:?} is not finite"),
        ));
    }
    Ok(v)
}

fn label(cell: &str, path: &Path, line: u64) -> Result<usize> {
    cell.parse().map_err(|_| {
        parse_err(
            path,
            line,
            format!("label {cell:?} is not a non-negative integer"),
        )
    })
}

/// Reads a curve set, detecting the layout from the first line.
pub fn ingest_curves(path: impl AsRef<Path>) -> Result<CurveSet> {
    let path = path.as_ref();
    parse_curves(&read_text(path)?, path)
}

/// Parses curve data held in memory; `path` is only used in error messages.
pub fn parse_curves(text: &str, path: &Path) -> Result<CurveSet> {
    let rows = records(text, path)?;
    let Some((line, first)) = rows.first() else {
        return Err(parse_err(path, 1, "file is empty"));
    };
    if first[0].eq_ignore_ascii_case("x") {
        parse_wide(&rows, path)
    } else if first.iter().any(|c| c == "curve_id") {
        parse_long(&rows, path)
    } else {
        Err(parse_err(
            path,
            *line,
            "expected a wide header starting with `x` or a long header with `curve_id,x,y`",
        ))
    }
}

fn parse_wide(rows: &[(u64, Vec<String>)], path: &Path) -> Result<CurveSet> {
    let (line, header) = &rows[0];
    let grid = header[1..]
        .iter()
        .map(|c| number(c, path, *line, "grid value"))
        .collect::<Result<Vec<f64>>>()?;
    let m = grid.len();
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut seen = HashMap::new();
    for (line, row) in &rows[1..] {
        if row.len() != m + 1 {
            return Err(parse_err(
                path,
                *line,
                format!("expected {} fields, found {}", m + 1, row.len()),
            ));
        }
        if let Some(prev) = seen.insert(row[0].clone(), *line) {
            return Err(parse_err(
                path,
                *line,
                format!("curve {:?} already defined on line {prev}", row[0]),
            ));
        }
        ids.push(row[0].clone());
        for cell in &row[1..] {
            values.push(number(cell, path, *line, "response")?);
        }
    }
    if ids.is_empty() {
        return Err(parse_err(path, *line, "no curves after the grid line"));
    }
    let n = ids.len();
    let y = DMatrix::from_row_slice(n, m, &values);
    let x = DMatrix::from_fn(n, m, |_, j| grid[j]);
    CurveSet::with_ids(x, y, ids, None)
}

struct LongCurve {
    first_line: u64,
    points: Vec<(f64, f64, u64)>,
    label: Option<(usize, u64)>,
}

fn parse_long(rows: &[(u64, Vec<String>)], path: &Path) -> Result<CurveSet> {
    let (hline, header) = &rows[0];
    let col = |name: &str| header.iter().position(|c| c == name);
    let (id_col, x_col, y_col) = match (col("curve_id"), col("x"), col("y")) {
        (Some(i), Some(x), Some(y)) => (i, x, y),
        _ => {
            return Err(parse_err(
                path,
                *hline,
                "header must contain curve_id, x and y",
            ))
        }
    };
    let label_col = col("label");

    let mut curves: BTreeMap<String, LongCurve> = BTreeMap::new();
    for (line, row) in &rows[1..] {
        if row.len() != header.len() {
            return Err(parse_err(
                path,
                *line,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        let x = number(&row[x_col], path, *line, "x")?;
        let y = number(&row[y_col], path, *line, "y")?;
        let curve = curves.entry(row[id_col].clone()).or_insert(LongCurve {
            first_line: *line,
            points: Vec::new(),
            label: None,
        });
        if let Some(c) = label_col {
            let l = label(&row[c], path, *line)?;
            match curve.label {
                None => curve.label = Some((l, *line)),
                Some((prev, at)) if prev != l => {
                    return Err(parse_err(
                        path,
                        *line,
                        format!(
                            "curve {:?} has label {l} here but {prev} on line {at}",
                            row[id_col]
                        ),
                    ))
                }
                _ => {}
            }
        }
        curve.points.push((x, y, *line));
    }
    if curves.is_empty() {
        return Err(parse_err(path, *hline, "no observations after the header"));
    }

    let mut order: Vec<String> = curves.keys().cloned().collect();
    let numeric: Option<Vec<f64>> = order.iter().map(|id| id.parse().ok()).collect();
    if let Some(keys) = numeric {
        let mut paired: Vec<(f64, String)> = keys.into_iter().zip(order).collect();
        paired.sort_by(|a, b| a.0.total_cmp(&b.0));
        order = paired.into_iter().map(|p| p.1).collect();
    }

    let m = curves[&order[0]].points.len();
    let n = order.len();
    let mut x = DMatrix::zeros(n, m);
    let mut y = DMatrix::zeros(n, m);
    let mut labels = Vec::with_capacity(n);
    for (i, id) in order.iter().enumerate() {
        let curve = curves.get_mut(id).expect("id taken from the map");
        curve
            .points
            .sort_by(|a, b| a.0.total_cmp(&b.0).then(a.2.cmp(&b.2)));
        for w in curve.points.windows(2) {
            if w[0].0 == w[1].0 {
                return Err(parse_err(
                    path,
                    w[0].2.max(w[1].2),
                    format!("duplicate x = {} for curve {id:?}", w[0].0),
                ));
            }
        }
        if curve.points.len() != m {
            return Err(parse_err(
                path,
                curve.first_line,
                format!(
                    "curve {id:?} has {} observations but curve {:?} has {m}",
                    curve.points.len(),
                    order[0]
                ),
            ));
        }
        for (j, &(xv, yv, _)) in curve.points.iter().enumerate() {
            x[(i, j)] = xv;
            y[(i, j)] = yv;
        }
        if let Some((l, _)) = curve.label {
            labels.push(l);
        }
    }
    let labels = label_col.map(|_| labels);
    CurveSet::with_ids(x, y, order, labels)
}

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("not a file path")))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    result.map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn csv_bytes(header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let to_err = |e: csv::Error| Error::io(Path::new("<buffer>"), std::io::Error::other(e));
    w.write_record(header).map_err(to_err)?;
    for row in rows {
        w.write_record(&row).map_err(to_err)?;
    }
    w.into_inner()
        .map_err(|e| Error::io(Path::new("<buffer>"), std::io::Error::other(e.to_string())))
}

/// Writes a curve set. The long layout keeps true labels when present; the
/// wide layout requires a shared grid and drops labels.
pub fn emit_curves(set: &CurveSet, path: impl AsRef<Path>, layout: Layout) -> Result<()> {
    let path = path.as_ref();
    let bytes = match layout {
        Layout::Wide => {
            let grid = set
                .shared_grid()
                .ok_or_else(|| Error::input("wide layout needs all curves on one grid"))?;
            let header = std::iter::once("x".to_string())
                .chain(grid.iter().map(|&v| fmt_f64(v)))
                .collect::<Vec<_>>();
            let rows = (0..set.n()).map(|i| {
                std::iter::once(set.ids()[i].clone())
                    .chain(set.y().row(i).iter().map(|&v| fmt_f64(v)))
                    .collect()
            });
            csv_bytes(&header, rows)?
        }
        Layout::Long => {
            let labels = set.true_labels();
            let mut header = vec!["curve_id".to_string(), "x".into(), "y".into()];
            if labels.is_some() {
                header.push("label".into());
            }
            let mut rows = Vec::with_capacity(set.n() * set.m());
            for i in 0..set.n() {
                for j in 0..set.m() {
                    let mut row = vec![
                        set.ids()[i].clone(),
                        fmt_f64(set.x()[(i, j)]),
                        fmt_f64(set.y()[(i, j)]),
                    ];
                    if let Some(l) = labels {
                        row.push(l[i].to_string());
                    }
                    rows.push(row);
                }
            }
            csv_bytes(&header, rows)?
        }
    };
    write_atomic(path, &bytes)
}

/// Paths of the files written by [`emit_results`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResultBundle {
    pub labels: PathBuf,
    pub params: PathBuf,
    pub trace: PathBuf,
    pub means: PathBuf,
}

/// Contents of `params.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub engine: Engine,
    #[serde(rename = "K")]
    pub k: usize,
    pub pi: Vec<f64>,
    pub beta: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub basis: BasisSpec,
    pub converged: bool,
    pub iterations: usize,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl ParamsFile {
    pub fn from_result(result: &FitResult) -> Self {
        Self {
            engine: result.engine,
            k: result.k(),
            pi: result.params.pi.clone(),
            beta: result
                .params
                .beta
                .iter()
                .map(|b| b.iter().copied().collect())
                .collect(),
            sigma2: result.params.sigma2.clone(),
            basis: result.basis.clone(),
            converged: result.converged,
            iterations: result.iterations,
            warnings: result.trace.warnings.clone(),
        }
    }
}

/// Sorted, de-duplicated union of all curve inputs.
pub fn union_grid(set: &CurveSet) -> Vec<f64> {
    let mut xs: Vec<f64> = set.x().iter().copied().collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    xs
}

/// Writes `labels.csv`, `params.json`, `trace.csv` and `means.csv` into `dir`.
pub fn emit_results(
    result: &FitResult,
    data: &CurveSet,
    dir: impl AsRef<Path>,
) -> Result<ResultBundle> {
    let dir = dir.as_ref();
    if result.labels.len() != data.n() || result.posterior.n() != data.n() {
        return Err(Error::input(
            "fit result and curve set disagree on the number of curves",
        ));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bundle = ResultBundle {
        labels: dir.join("labels.csv"),
        params: dir.join("params.json"),
        trace: dir.join("trace.csv"),
        means: dir.join("means.csv"),
    };

    let tau = result.posterior.tau();
    let rows = (0..data.n()).map(|i| {
        let k = result.labels[i];
        vec![
            data.ids()[i].clone(),
            (k + 1).to_string(),
            fmt_f64(tau[(i, k)]),
        ]
    });
    let header = ["curve_id", "cluster", "max_posterior"].map(String::from);
    write_atomic(&bundle.labels, &csv_bytes(&header, rows)?)?;

    let json = serde_json::to_vec_pretty(&ParamsFile::from_result(result))?;
    write_atomic(&bundle.params, &json)?;

    let header = ["iter", "K", "lambda", "loglik", "penalized_loglik"].map(String::from);
    let rows = result.trace.records.iter().map(|r| {
        vec![
            r.iter.to_string(),
            r.k.to_string(),
            fmt_f64(r.lambda),
            fmt_f64(r.loglik),
            fmt_f64(r.penalized_loglik),
        ]
    });
    write_atomic(&bundle.trace, &csv_bytes(&header, rows)?)?;

    let grid = union_grid(data);
    let design = result.basis.design(&grid)?;
    let curves: Vec<_> = result.params.beta.iter().map(|b| design.apply(b)).collect();
    let header = std::iter::once("x".to_string())
        .chain((1..=result.k()).map(|k| format!("cluster_{k}")))
        .collect::<Vec<_>>();
    let rows = grid.iter().enumerate().map(|(j, &x)| {
        std::iter::once(fmt_f64(x))
            .chain(curves.iter().map(|c| fmt_f64(c[j])))
            .collect()
    });
    write_atomic(&bundle.means, &csv_bytes(&header, rows)?)?;

    Ok(bundle)
}

/// Reads `(curve_id, label)` pairs from a CSV with a `curve_id` column and a
/// `label` or `cluster` column, in order of first appearance.
///
/// Files with several rows per curve (long curve data) are accepted as long as
/// each curve carries a single label.
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<(String, usize)>> {
    let path = path.as_ref();
    let rows = records(&read_text(path)?, path)?;
    let Some((hline, header)) = rows.first() else {
        return Err(parse_err(path, 1, "file is empty"));
    };
    let col = |name: &str| header.iter().position(|c| c == name);
    let id_col =
        col("curve_id").ok_or_else(|| parse_err(path, *hline, "header has no curve_id column"))?;
    let label_col = col("label")
        .or_else(|| col("cluster"))
        .ok_or_else(|| parse_err(path, *hline, "header has no label or cluster column"))?;
    let mut out = Vec::new();
    let mut seen: HashMap<String, (usize, u64)> = HashMap::new();
    for (line, row) in &rows[1..] {
        if row.len() != header.len() {
            return Err(parse_err(
                path,
                *line,
                format!("expected {} fields, found {}", header.len(), row.len()),
            ));
        }
        let id = &row[id_col];
        let l = label(&row[label_col], path, *line)?;
        match seen.get(id) {
            Some(&(prev, at)) if prev != l => {
                return Err(parse_err(
                    path,
                    *line,
                    format!("curve {id:?} has label {l} here but {prev} on line {at}"),
                ))
            }
            Some(_) => {}
            None => {
                seen.insert(id.clone(), (l, *line));
                out.push((id.clone(), l));
            }
        }
    }
    Ok(out)
}
