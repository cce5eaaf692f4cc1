//! File formats: the long-format dataset CSV, adjacency files, fit records
//! and the CSV tables written by the command-line tool.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{CorrelationDiagnostic, ModelComparison, PatternDecomposition};
use crate::error::{Error, Result};
use crate::model::{expected_counts, BlockLabel, Dataset};
use crate::pql::FitResult;
use crate::simulate::StudyReport;
use crate::structures::SpatialGraph;

/// A dataset together with the area and period labels found in the file,
/// in the order used for indexing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadedDataset {
    pub data: Dataset,
    pub area_ids: Vec<String>,
    pub time_ids: Vec<String>,
}

/// Sorts numerically when every label is an integer, lexically otherwise.
fn sorted_labels(labels: BTreeSet<String>) -> Vec<String> {
    let mut out: Vec<String> = labels.into_iter().collect();
    if out.iter().all(|l| l.parse::<i64>().is_ok()) {
        out.sort_by_key(|l| l.parse::<i64>().unwrap());
    }
    out
}

fn parse_number(value: &str, column: &str, row: usize) -> Result<f64> {
    value.trim().parse::<f64>().map_err(|_| {
        Error::InvalidData(format!("row {row}: column '{column}' has non-numeric value '{value}'"))
    })
}

/// Reads `area,time,observed,expected[,population],x1,…` (header required).
///
/// `expected` may be replaced by `population`, in which case expected counts
/// come from internal standardization. Every other column is a covariate.
/// Rows may come in any order; the (area, time) grid must be complete.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<LoadedDataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file)
}

pub fn read_dataset(reader: impl std::io::Read) -> Result<LoadedDataset> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let area_col = find("area").ok_or_else(|| Error::InvalidData("missing 'area' column".into()))?;
    let time_col = find("time").ok_or_else(|| Error::InvalidData("missing 'time' column".into()))?;
    let obs_col =
        find("observed").ok_or_else(|| Error::InvalidData("missing 'observed' column".into()))?;
    let exp_col = find("expected");
    let pop_col = find("population");
    if exp_col.is_none() && pop_col.is_none() {
        return Err(Error::InvalidData("need an 'expected' or a 'population' column".into()));
    }
    let reserved = [Some(area_col), Some(time_col), Some(obs_col), exp_col, pop_col];
    let cov_cols: Vec<usize> = (0..headers.len()).filter(|c| !reserved.contains(&Some(*c))).collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].clone()).collect();

    struct Row {
        area: String,
        time: String,
        observed: f64,
        expected: Option<f64>,
        population: Option<f64>,
        x: Vec<f64>,
    }
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let observed = parse_number(get(obs_col), "observed", line)?;
        if !(observed >= 0.0 && observed.fract() == 0.0) {
            return Err(Error::InvalidData(format!(
                "row {line}: observed count '{}' is not a non-negative integer",
                get(obs_col)
            )));
        }
        rows.push(Row {
            area: get(area_col).to_string(),
            time: get(time_col).to_string(),
            observed,
            expected: exp_col.map(|c| parse_number(get(c), "expected", line)).transpose()?,
            population: pop_col.map(|c| parse_number(get(c), "population", line)).transpose()?,
            x: cov_cols
                .iter()
                .map(|&c| parse_number(get(c), &headers[c], line))
                .collect::<Result<_>>()?,
        });
    }
    if rows.is_empty() {
        return Err(Error::InvalidData("dataset has no rows".into()));
    }

    let area_ids = sorted_labels(rows.iter().map(|r| r.area.clone()).collect());
    let time_ids = sorted_labels(rows.iter().map(|r| r.time.clone()).collect());
    let area_idx: HashMap<&str, usize> = area_ids.iter().enumerate().map(|(i, a)| (a.as_str(), i)).collect();
    let time_idx: HashMap<&str, usize> = time_ids.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    let (s, t) = (area_ids.len(), time_ids.len());
    let n = s * t;

    let mut slot: Vec<Option<usize>> = vec![None; n];
    for (k, r) in rows.iter().enumerate() {
        let cell = time_idx[r.time.as_str()] * s + area_idx[r.area.as_str()];
        if slot[cell].is_some() {
            return Err(Error::InvalidData(format!(
                "duplicate row for area {}, time {}",
                r.area, r.time
            )));
        }
        slot[cell] = Some(k);
    }
    let gaps: Vec<String> = (0..n)
        .filter(|&c| slot[c].is_none())
        .map(|c| format!("(area {}, time {})", area_ids[c % s], time_ids[c / s]))
        .collect();
    if !gaps.is_empty() {
        let shown = gaps.iter().take(20).cloned().collect::<Vec<_>>().join(", ");
        let more = if gaps.len() > 20 { format!(" and {} more", gaps.len() - 20) } else { String::new() };
        return Err(Error::InvalidData(format!(
            "incomplete area × time grid: {} missing cell(s): {shown}{more}",
            gaps.len()
        )));
    }

    let ordered = |f: &dyn Fn(&Row) -> f64| DVector::from_fn(n, |c, _| f(&rows[slot[c].unwrap()]));
    let observed = ordered(&|r| r.observed);
    let population = pop_col.map(|_| ordered(&|r| r.population.unwrap()));
    let expected = match exp_col {
        Some(_) => ordered(&|r| r.expected.unwrap()),
        None => expected_counts(&observed, population.as_ref().unwrap())?,
    };
    let covariates = DMatrix::from_fn(n, cov_cols.len(), |c, j| rows[slot[c].unwrap()].x[j]);
    let mut data = Dataset::new(s, t, observed, expected, covariates, covariate_names)?;
    data.population = population;
    Ok(LoadedDataset {
        data,
        area_ids,
        time_ids,
    })
}

pub fn save_dataset(path: impl AsRef<Path>, loaded: &LoadedDataset) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_error(path, e))?;
    let d = &loaded.data;
    let mut header = vec!["area".to_string(), "time".into(), "observed".into(), "expected".into()];
    if d.population.is_some() {
        header.push("population".into());
    }
    header.extend(d.covariate_names.iter().cloned());
    w.write_record(&header)?;
    for tt in 0..d.n_periods {
        for i in 0..d.n_areas {
            let c = d.index(i, tt);
            let mut rec = vec![
                loaded.area_ids[i].clone(),
                loaded.time_ids[tt].clone(),
                format!("{}", d.observed[c]),
                format!("{}", d.expected[c]),
            ];
            if let Some(p) = &d.population {
                rec.push(format!("{}", p[c]));
            }
            rec.extend((0..d.n_covariates()).map(|j| format!("{}", d.covariates[(c, j)])));
            w.write_record(&rec)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_path_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse(format!("{}: {other:?}", path.display())),
    }
}

/// Reads an adjacency file: either an edge list of 1-based `i j` pairs or a
/// square 0/1 matrix, `#` starting a comment. Both orientations of an edge
/// may be listed. `n_areas` fixes the graph size (isolated trailing areas);
/// otherwise it is the largest index seen.
pub fn load_adjacency(path: impl AsRef<Path>, n_areas: Option<usize>) -> Result<SpatialGraph> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_adjacency(&text, n_areas)
}

pub fn parse_adjacency(text: &str, n_areas: Option<usize>) -> Result<SpatialGraph> {
    let lines: Vec<(usize, Vec<&str>)> = text
        .lines()
        .enumerate()
        .map(|(k, l)| {
            let body = l.split('#').next().unwrap_or("");
            (k + 1, body.split([' ', '\t', ',']).filter(|t| !t.is_empty()).collect::<Vec<_>>())
        })
        .filter(|(_, t)| !t.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::InvalidGraph("adjacency file is empty".into()));
    }
    // 1-based edge lists never contain 0; a matrix always does (its diagonal)
    let is_matrix = lines[0].1.len() > 2 || lines.iter().any(|(_, t)| t.contains(&"0"));
    if is_matrix {
        let n = lines.len();
        let mut m = DMatrix::zeros(n, n);
        for (i, (lineno, toks)) in lines.iter().enumerate() {
            if toks.len() != n {
                return Err(Error::InvalidGraph(format!(
                    "line {lineno}: adjacency matrix row has {} entries, expected {n}",
                    toks.len()
                )));
            }
            for (j, t) in toks.iter().enumerate() {
                m[(i, j)] = t.parse::<f64>().map_err(|_| {
                    Error::InvalidGraph(format!("line {lineno}: '{t}' is not a number"))
                })?;
            }
        }
        if let Some(s) = n_areas {
            if s != n {
                return Err(Error::InvalidGraph(format!("adjacency matrix is {n}×{n} but data has {s} areas")));
            }
        }
        return SpatialGraph::from_adjacency_matrix(&m);
    }
    let mut edges = BTreeSet::new();
    let mut max_idx = 0;
    for (lineno, toks) in &lines {
        if toks.len() != 2 {
            return Err(Error::InvalidGraph(format!("line {lineno}: expected two area indices")));
        }
        let parse = |t: &str| -> Result<usize> {
            match t.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v),
                _ => Err(Error::InvalidGraph(format!("line {lineno}: '{t}' is not a 1-based area index"))),
            }
        };
        let (a, b) = (parse(toks[0])?, parse(toks[1])?);
        if a == b {
            return Err(Error::InvalidGraph(format!("line {lineno}: self-loop on area {a}")));
        }
        max_idx = max_idx.max(a).max(b);
        edges.insert((a.min(b) - 1, a.max(b) - 1));
    }
    let n = n_areas.unwrap_or(max_idx);
    if max_idx > n {
        return Err(Error::InvalidGraph(format!(
            "adjacency refers to area {max_idx} but data has {n} areas"
        )));
    }
    SpatialGraph::new(n, edges)
}

/// Writes the graph as a 1-based edge list.
pub fn save_adjacency(path: impl AsRef<Path>, graph: &SpatialGraph) -> Result<()> {
    let mut text = format!("# {} areas, {} edges\n", graph.n_areas(), graph.edges().len());
    for (a, b) in graph.edges() {
        text.push_str(&format!("{} {}\n", a + 1, b + 1));
    }
    fs::write(path.as_ref(), text).map_err(|e| Error::io(path.as_ref(), e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub q_025: f64,
    pub q_975: f64,
}

/// Estimate, SE and 95% Wald interval per coefficient.
pub fn coefficient_table(fit: &FitResult) -> Vec<CoefficientRow> {
    let se = fit.beta_se();
    fit.wald_intervals()
        .into_iter()
        .enumerate()
        .map(|(j, (lo, hi))| CoefficientRow {
            name: fit.coefficient_names.get(j).cloned().unwrap_or_else(|| format!("b{j}")),
            estimate: fit.beta[j],
            se: se[j],
            q_025: lo,
            q_975: hi,
        })
        .collect()
}

/// Structured fit record: a readable summary plus the complete result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRecord {
    pub software: String,
    pub version: String,
    pub model: String,
    pub coefficients: Vec<CoefficientRow>,
    /// Wald SEs for β are conditional on the estimated variance components.
    pub se_note: String,
    pub area_ids: Vec<String>,
    pub time_ids: Vec<String>,
    pub fit: FitResult,
}

impl FitRecord {
    pub fn new(fit: &FitResult, area_ids: &[String], time_ids: &[String]) -> Self {
        Self {
            software: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            model: fit.variant.name().into(),
            coefficients: coefficient_table(fit),
            se_note: "GLS standard errors from (X'V^-1X)^-1, conditional on estimated variance components".into(),
            area_ids: area_ids.to_vec(),
            time_ids: time_ids.to_vec(),
            fit: fit.clone(),
        }
    }
}

pub fn default_ids(n: usize) -> Vec<String> {
    (1..=n).map(|i| i.to_string()).collect()
}

/// Writes `fit.json`, `coefficients.csv`, `random_effects.csv` and
/// `risks.csv` into `dir` (created if needed).
pub fn serialize_fit(
    fit: &FitResult,
    dir: impl AsRef<Path>,
    area_ids: &[String],
    time_ids: &[String],
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let record = FitRecord::new(fit, area_ids, time_ids);
    let json = serde_json::to_string_pretty(&record)?;
    let fit_path = dir.join("fit.json");
    fs::write(&fit_path, json).map_err(|e| Error::io(&fit_path, e))?;

    let path = dir.join("coefficients.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_path_error(&path, e))?;
    w.write_record(["coefficient", "estimate", "se", "q_0.025", "q_0.975"])?;
    for row in &record.coefficients {
        w.write_record([
            row.name.clone(),
            fmt(row.estimate),
            fmt(row.se),
            fmt(row.q_025),
            fmt(row.q_975),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("random_effects.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_path_error(&path, e))?;
    w.write_record(["block", "area", "time", "value"])?;
    let (s, t) = (fit.n_areas, fit.n_periods);
    for (label, v) in &fit.random_effects {
        for k in 0..v.len() {
            let (area, time) = match label {
                BlockLabel::Spatial => (area_ids[k].clone(), String::new()),
                BlockLabel::Temporal => (String::new(), time_ids[k].clone()),
                BlockLabel::Interaction => (area_ids[k % s].clone(), time_ids[k / s].clone()),
            };
            w.write_record([label.name().to_string(), area, time, fmt(v[k])])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;

    let path = dir.join("risks.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| csv_path_error(&path, e))?;
    w.write_record(["area", "time", "risk", "fitted", "linear_predictor"])?;
    for tt in 0..t {
        for i in 0..s {
            let c = tt * s + i;
            w.write_record([
                area_ids[i].clone(),
                time_ids[tt].clone(),
                fmt(fit.linear_predictor[c].exp()),
                fmt(fit.fitted_mu[c]),
                fmt(fit.linear_predictor[c]),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

/// Shortest representation that parses back to the same value.
fn fmt(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-4 || v.abs() >= 1e15) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

/// Reads a record written by [`serialize_fit`] (path to `fit.json` or its
/// directory).
pub fn load_fit(path: impl AsRef<Path>) -> Result<FitRecord> {
    let mut path = path.as_ref().to_path_buf();
    if path.is_dir() {
        path = path.join("fit.json");
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_comparison(path: impl AsRef<Path>, cmp: &ModelComparison) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_error(path, e))?;
    w.write_record(["model", "deviance", "effective_df", "aic", "wall_time_seconds"])?;
    for r in &cmp.records {
        w.write_record([
            r.label.clone(),
            fmt(r.deviance),
            fmt(r.effective_df),
            fmt(r.aic),
            fmt(r.wall_time_seconds),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Long format: one row per (covariate, direction, slice); undefined
/// correlations are written as `NA`.
pub fn write_correlations(
    path: impl AsRef<Path>,
    diag: &CorrelationDiagnostic,
    area_ids: &[String],
    time_ids: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_error(path, e))?;
    w.write_record(["covariate", "kind", "slice", "correlation"])?;
    let cell = |v: &Option<f64>| v.map(fmt).unwrap_or_else(|| "NA".into());
    for (j, name) in diag.covariate_names.iter().enumerate() {
        for (tt, v) in diag.spatial[j].iter().enumerate() {
            w.write_record([name.clone(), "spatial".into(), time_ids[tt].clone(), cell(v)])?;
        }
        if let Some(row) = diag.temporal.get(j) {
            for (i, v) in row.iter().enumerate() {
                w.write_record([name.clone(), "temporal".into(), area_ids[i].clone(), cell(v)])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row per (area, time) with every available component.
pub fn write_patterns(
    path: impl AsRef<Path>,
    pat: &PatternDecomposition,
    area_ids: &[String],
    time_ids: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_error(path, e))?;
    w.write_record(["area", "time", "spatial", "temporal", "interaction", "risk"])?;
    let s = pat.n_areas;
    let cell = |p: &Option<crate::diagnostics::Pattern>, i: usize, tt: usize| {
        p.as_ref().map(|p| fmt(p.at(i, tt, s))).unwrap_or_default()
    };
    for tt in 0..pat.n_periods {
        for i in 0..s {
            w.write_record([
                area_ids[i].clone(),
                time_ids[tt].clone(),
                cell(&pat.spatial, i, tt),
                cell(&pat.temporal, i, tt),
                cell(&pat.interaction, i, tt),
                fmt(pat.risks[tt * s + i]),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_study(path: impl AsRef<Path>, report: &StudyReport) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_path_error(path, e))?;
    w.write_record([
        "model",
        "coefficient",
        "truth",
        "mean_estimate",
        "mean_abs_estimate",
        "empirical_sd",
        "mc_se",
        "mean_se",
        "coverage",
        "n_used",
        "n_excluded",
    ])?;
    for s in &report.summaries {
        w.write_record([
            s.model.clone(),
            s.coefficient.clone(),
            fmt(s.truth),
            fmt(s.mean_estimate),
            fmt(s.mean_abs_estimate),
            fmt(s.empirical_sd),
            fmt(s.mc_se()),
            fmt(s.mean_se),
            fmt(s.coverage),
            s.n_used.to_string(),
            report.excluded.get(&s.model).copied().unwrap_or(0).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
