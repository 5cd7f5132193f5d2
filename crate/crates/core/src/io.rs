//! CSV ingestion, fit artifacts and plain-text reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{FitConfig, FitDiagnostics, FitResult};
use crate::inference::{classify_map, factor_scores, BootstrapReport};
use crate::model::{Loadings, MixtureParams, ModelParams, ModelSpec, PatternTable};
use crate::quadrature::tensor_grid;
use crate::selection::{
    bivariate_residuals, pattern_fit_tests, BivariateResidualReport, PatternFitTests,
    SelectionResult, SelectionTrace,
};
use crate::simulation::StudySummary;

pub const FORMAT_VERSION: u32 = 1;

/// A loaded data file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedData {
    pub table: PatternTable,
    pub item_names: Vec<String>,
    /// Items answered identically by every respondent.
    pub constant_items: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Reads a header row of item names followed by rows of `0`/`1` cells and
/// collapses the rows to distinct patterns.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LoadedData> {
    let path = path.as_ref();
    let parse_err = |row: usize, column: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        row,
        column,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            other => Error::Data {
                path: path.to_path_buf(),
                message: format!("{other:?}"),
            },
        })?;
    let headers = reader
        .headers()
        .map_err(|e| parse_err(1, 0, e.to_string()))?
        .clone();
    let item_names: Vec<String> = headers.iter().map(|h| h.trim().to_string()).collect();
    let p = item_names.len();
    if p == 0 || (p == 1 && item_names[0].is_empty()) {
        return Err(parse_err(1, 1, "missing header row".into()));
    }

    let mut rows: Vec<Vec<u8>> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |pos| pos.line() as usize);
            parse_err(line, 0, e.to_string())
        })?;
        let line = record.position().map_or(rows.len() + 2, |pos| pos.line() as usize);
        if record.len() != p {
            return Err(parse_err(
                line,
                record.len().min(p) + 1,
                format!("expected {p} cells, found {}", record.len()),
            ));
        }
        let mut row = Vec::with_capacity(p);
        for (c, cell) in record.iter().enumerate() {
            let v = match cell.trim() {
                "0" => 0,
                "1" => 1,
                "" => return Err(parse_err(line, c + 1, "missing value".into())),
                other => return Err(parse_err(line, c + 1, format!("non-binary value '{other}'"))),
            };
            row.push(v);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(parse_err(2, 1, "no data rows".into()));
    }
    let table = PatternTable::from_rows(p, &rows)?;
    let constant_items = table.constant_items();
    let warnings = constant_items
        .iter()
        .map(|&j| format!("item '{}' has the same response in every row", item_names[j]))
        .collect();
    Ok(LoadedData {
        table,
        item_names,
        constant_items,
        warnings,
    })
}

/// Writes one row per observation under a header of item names.
pub fn write_csv(path: impl AsRef<Path>, item_names: &[String], table: &PatternTable) -> Result<()> {
    let mut out = String::new();
    out.push_str(&item_names.join(","));
    out.push('\n');
    for row in table.expand_rows() {
        let cells: Vec<&str> = row.iter().map(|&v| if v == 1 { "1" } else { "0" }).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn default_item_names(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("y{j}")).collect()
}

/// Parameters in plain nested vectors (matrices row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsRecord {
    pub intercepts: Vec<f64>,
    pub loadings: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rows_matrix(rows: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Artifact(format!("expected a {nrows}x{ncols} matrix")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

impl ParamsRecord {
    pub fn from_params(params: &ModelParams) -> Self {
        let mix = &params.mixture;
        Self {
            intercepts: params.loadings.intercepts.iter().copied().collect(),
            loadings: matrix_rows(&params.loadings.matrix),
            weights: mix.weights.iter().copied().collect(),
            means: mix.means.iter().map(|m| m.iter().copied().collect()).collect(),
            covariances: mix.covariances.iter().map(matrix_rows).collect(),
        }
    }

    pub fn to_params(&self, spec: &ModelSpec) -> Result<ModelParams> {
        let ModelSpec { p, q, k } = *spec;
        let spec = ModelSpec::unbounded(p, q, k).map_err(|e| Error::Artifact(e.to_string()))?;
        if self.intercepts.len() != p || self.weights.len() != k || self.means.len() != k {
            return Err(Error::Artifact("parameter lengths do not match the spec".into()));
        }
        if self.covariances.len() != k || self.means.iter().any(|m| m.len() != q) {
            return Err(Error::Artifact("mixture dimensions do not match the spec".into()));
        }
        let loadings = Loadings::new(
            DVector::from_column_slice(&self.intercepts),
            rows_matrix(&self.loadings, p, q)?,
        )
        .map_err(|e| Error::Artifact(e.to_string()))?;
        let mixture = MixtureParams::new(
            DVector::from_column_slice(&self.weights),
            self.means.iter().map(|m| DVector::from_column_slice(m)).collect(),
            self.covariances
                .iter()
                .map(|c| rows_matrix(c, q, q))
                .collect::<Result<_>>()?,
        )
        .map_err(|e| Error::Artifact(e.to_string()))?;
        ModelParams::new(spec, loadings, mixture).map_err(|e| Error::Artifact(e.to_string()))
    }
}

/// Data the fit was computed from: patterns as `0`/`1` strings with counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataRecord {
    pub item_names: Vec<String>,
    pub patterns: Vec<String>,
    pub counts: Vec<usize>,
}

pub fn pattern_string(y: &[u8]) -> String {
    y.iter().map(|&v| if v == 1 { '1' } else { '0' }).collect()
}

impl DataRecord {
    pub fn from_table(item_names: &[String], table: &PatternTable) -> Self {
        Self {
            item_names: item_names.to_vec(),
            patterns: table.patterns().iter().map(|y| pattern_string(y)).collect(),
            counts: table.counts().to_vec(),
        }
    }

    pub fn to_table(&self) -> Result<PatternTable> {
        let p = self.item_names.len();
        let patterns = self
            .patterns
            .iter()
            .map(|s| {
                s.chars()
                    .map(|c| match c {
                        '0' => Ok(0u8),
                        '1' => Ok(1u8),
                        _ => Err(Error::Artifact(format!("bad pattern '{s}'"))),
                    })
                    .collect::<Result<Vec<u8>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        PatternTable::new(p, patterns, self.counts.clone()).map_err(|e| Error::Artifact(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitArtifact {
    pub format_version: u32,
    /// Seconds since the Unix epoch; absent unless requested.
    pub created_unix: Option<u64>,
    pub seed: u64,
    pub spec: ModelSpec,
    pub config: FitConfig,
    pub data: DataRecord,
    pub params: ParamsRecord,
    pub loglik: f64,
    pub loglik_trace: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub n_par: usize,
    pub aic: f64,
    pub bic: f64,
    pub pattern_tests: PatternFitTests,
    /// Per distinct pattern, in the order of `data.patterns`.
    pub posteriors: Vec<Vec<f64>>,
    pub map_labels: Vec<usize>,
    pub factor_scores: Vec<Vec<f64>>,
    pub residuals: BivariateResidualReport,
    pub diagnostics: FitDiagnostics,
}

impl FitArtifact {
    /// Assembles the artifact, computing scores, residuals and pattern tests.
    pub fn from_fit(fit: &FitResult, data: &PatternTable, item_names: &[String]) -> Result<Self> {
        let grid = tensor_grid(fit.params.spec.q, fit.config.quad_points)?;
        let scores = factor_scores(&fit.params, data, &grid)?;
        let residuals = bivariate_residuals(&fit.params, data, &grid)?;
        let pattern_tests = pattern_fit_tests(&fit.params, data, &grid)?;
        Ok(Self {
            format_version: FORMAT_VERSION,
            created_unix: None,
            seed: fit.config.seed,
            spec: fit.params.spec,
            config: fit.config,
            data: DataRecord::from_table(item_names, data),
            params: ParamsRecord::from_params(&fit.params),
            loglik: fit.loglik(),
            loglik_trace: fit.loglik_trace.clone(),
            converged: fit.converged,
            n_iter: fit.n_iter,
            n_par: fit.params.spec.n_free_parameters(),
            aic: fit.criteria.aic,
            bic: fit.criteria.bic,
            pattern_tests,
            posteriors: matrix_rows(&fit.posteriors),
            map_labels: classify_map(&fit.posteriors),
            factor_scores: scores.iter().map(|s| s.iter().copied().collect()).collect(),
            residuals,
            diagnostics: fit.diagnostics.clone(),
        })
    }

    pub fn model_params(&self) -> Result<ModelParams> {
        self.params.to_params(&self.spec)
    }

    pub fn table(&self) -> Result<PatternTable> {
        self.data.to_table()
    }
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Artifact(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

pub fn write_fit(artifact: &FitArtifact, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(artifact)?)?;
    Ok(())
}

pub fn parse_fit(text: &str) -> Result<FitArtifact> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::Artifact(e.to_string()))?;
    let found = value
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Artifact("missing format_version".into()))?;
    if found != FORMAT_VERSION as u64 {
        return Err(Error::Version {
            found: found.min(u32::MAX as u64) as u32,
            expected: FORMAT_VERSION,
        });
    }
    let artifact: FitArtifact =
        serde_json::from_value(value).map_err(|e| Error::Artifact(e.to_string()))?;
    artifact.model_params()?;
    artifact.table()?;
    Ok(artifact)
}

pub fn read_fit(path: impl AsRef<Path>) -> Result<FitArtifact> {
    parse_fit(&fs::read_to_string(path)?)
}

/// `%g`-style rendering with 6 significant digits.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

fn opt6(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), fmt6)
}

/// Right-aligned plain-text table.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| -> String {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}

pub fn render_parameters(params: &ModelParams, item_names: &[String]) -> String {
    let q = params.spec.q;
    let mut header = vec!["item".to_string(), "intercept".to_string()];
    header.extend((1..=q).map(|r| format!("loading{r}")));
    let rows: Vec<Vec<String>> = (0..params.spec.p)
        .map(|j| {
            let mut r = vec![item_names[j].clone(), fmt6(params.loadings.intercepts[j])];
            r.extend((0..q).map(|c| fmt6(params.loadings.matrix[(j, c)])));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = render_table(&h, &rows);

    let mix = &params.mixture;
    let mut header = vec!["component".to_string(), "weight".to_string()];
    header.extend((1..=q).map(|r| format!("mean{r}")));
    for a in 1..=q {
        for b in 1..=a {
            header.push(format!("cov{a}{b}"));
        }
    }
    let rows: Vec<Vec<String>> = (0..mix.k())
        .map(|i| {
            let mut r = vec![(i + 1).to_string(), fmt6(mix.weights[i])];
            r.extend(mix.means[i].iter().map(|&v| fmt6(v)));
            for a in 0..q {
                for b in 0..=a {
                    r.push(fmt6(mix.covariances[i][(a, b)]));
                }
            }
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    out.push('\n');
    out.push_str(&render_table(&h, &rows));
    out
}

pub fn render_fit_report(a: &FitArtifact) -> Result<String> {
    let params = a.model_params()?;
    let mut out = String::new();
    let ModelSpec { p, q, k } = a.spec;
    let _ = writeln!(out, "model: p = {p}, q = {q}, k = {k}");
    let _ = writeln!(
        out,
        "observations: {}, distinct patterns: {}",
        a.data.counts.iter().sum::<usize>(),
        a.data.patterns.len()
    );
    let _ = writeln!(
        out,
        "converged: {} after {} iterations (seed {})",
        a.converged, a.n_iter, a.seed
    );
    let _ = writeln!(out, "log-likelihood: {}", fmt6(a.loglik));
    let _ = writeln!(out, "free parameters: {}", a.n_par);
    let _ = writeln!(out, "AIC: {}", fmt6(a.aic));
    let _ = writeln!(out, "BIC: {}", fmt6(a.bic));
    let t = &a.pattern_tests;
    let _ = writeln!(out, "GF: {}", fmt6(t.gf));
    let _ = writeln!(out, "LR: {}", fmt6(t.lr));
    let _ = writeln!(out, "df: {} ({})", t.df, t.df_convention);
    let _ = writeln!(
        out,
        "max bivariate residual: {} (threshold {})",
        fmt6(a.residuals.max_residual),
        fmt6(a.residuals.threshold)
    );
    out.push('\n');
    out.push_str(&render_parameters(&params, &a.data.item_names));
    Ok(out)
}

pub fn render_selection(trace: &SelectionTrace, chosen: Option<(usize, usize)>) -> String {
    let rows: Vec<Vec<String>> = trace
        .records
        .iter()
        .map(|r| {
            let mark = if chosen == Some((r.q, r.k)) { "*" } else { "" };
            vec![
                r.q.to_string(),
                r.k.to_string(),
                opt6(r.loglik),
                r.n_par.to_string(),
                opt6(r.aic),
                opt6(r.bic),
                opt6(r.max_residual),
                mark.to_string(),
            ]
        })
        .collect();
    let mut out = render_table(
        &["q", "k", "loglik", "#par", "AIC", "BIC", "max_resid", "chosen"],
        &rows,
    );
    for r in trace.records.iter().filter(|r| r.error.is_some()) {
        let _ = writeln!(out, "q = {}, k = {} failed: {}", r.q, r.k, r.error.as_deref().unwrap_or(""));
    }
    let _ = writeln!(
        out,
        "criterion: {}, residual threshold: {}",
        trace.criterion,
        fmt6(trace.threshold)
    );
    out
}

pub fn render_selection_result(result: &SelectionResult) -> String {
    let mut out = render_selection(&result.trace, Some((result.chosen_q, result.chosen_k)));
    let _ = writeln!(out, "chosen: q = {}, k = {}", result.chosen_q, result.chosen_k);
    out
}

pub fn render_residuals(report: &BivariateResidualReport, item_names: &[String]) -> String {
    let rows: Vec<Vec<String>> = report
        .entries
        .iter()
        .map(|c| {
            vec![
                item_names[c.j].clone(),
                item_names[c.l].clone(),
                format!("{}{}", c.a, c.b),
                fmt6(c.observed),
                fmt6(c.expected),
                c.residual.map_or_else(|| "unstable".into(), fmt6),
            ]
        })
        .collect();
    let mut out = render_table(&["item_a", "item_b", "cell", "observed", "expected", "residual"], &rows);
    let _ = writeln!(
        out,
        "max bivariate residual: {} (threshold {}, {} unstable cells)",
        fmt6(report.max_residual),
        fmt6(report.threshold),
        report.n_unstable
    );
    out
}

pub fn render_scores(
    patterns: &[String],
    counts: &[usize],
    scores: &[Vec<f64>],
    posteriors: &[Vec<f64>],
    labels: &[usize],
) -> String {
    let q = scores.first().map_or(0, Vec::len);
    let k = posteriors.first().map_or(0, Vec::len);
    let mut header = vec!["pattern".to_string(), "count".to_string()];
    header.extend((1..=q).map(|r| format!("score{r}")));
    header.extend((1..=k).map(|i| format!("post{i}")));
    header.push("cluster".into());
    let rows: Vec<Vec<String>> = (0..patterns.len())
        .map(|h| {
            let mut r = vec![patterns[h].clone(), counts[h].to_string()];
            r.extend(scores[h].iter().map(|&v| fmt6(v)));
            r.extend(posteriors[h].iter().map(|&v| fmt6(v)));
            r.push((labels[h] + 1).to_string());
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    render_table(&h, &rows)
}

pub fn render_bootstrap(report: &BootstrapReport, item_names: &[String]) -> String {
    let q = report.se_loadings.first().map_or(0, Vec::len);
    let mut header = vec!["item".to_string(), "se_intercept".to_string()];
    header.extend((1..=q).map(|r| format!("se_loading{r}")));
    let rows: Vec<Vec<String>> = report
        .se_intercepts
        .iter()
        .enumerate()
        .map(|(j, &s)| {
            let mut r = vec![item_names[j].clone(), fmt6(s)];
            r.extend(report.se_loadings[j].iter().map(|&v| fmt6(v)));
            r
        })
        .collect();
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut out = render_table(&h, &rows);
    let rows: Vec<Vec<String>> = report
        .se_weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let mut r = vec![(i + 1).to_string(), fmt6(w)];
            r.extend(report.se_means[i].iter().map(|&v| fmt6(v)));
            r
        })
        .collect();
    let mut header = vec!["component".to_string(), "se_weight".to_string()];
    header.extend((1..=q).map(|r| format!("se_mean{r}")));
    let h: Vec<&str> = header.iter().map(String::as_str).collect();
    out.push('\n');
    out.push_str(&render_table(&h, &rows));
    let _ = writeln!(out, "replicates: {}, failed refits: {}", report.b, report.n_failed);
    out
}

pub fn render_study(s: &StudySummary) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "replicates: {} ({} succeeded, {} failed)",
        s.n_reps, s.n_succeeded, s.n_failed
    );
    let rows: Vec<Vec<String>> = s
        .q_selection_rates
        .iter()
        .enumerate()
        .map(|(i, &r)| vec![(i + 1).to_string(), fmt6(r)])
        .collect();
    out.push_str(&render_table(&["q", "screen_pass_rate"], &rows));
    let rows: Vec<Vec<String>> = (0..s.k_max)
        .map(|i| {
            vec![
                (i + 1).to_string(),
                fmt6(s.k_selection_rates.bic[i]),
                fmt6(s.k_selection_rates.aic[i]),
            ]
        })
        .collect();
    out.push('\n');
    out.push_str(&render_table(&["k", "BIC", "AIC"], &rows));
    if let (Some(m), Some(r)) = (&s.param_means, &s.param_rmse) {
        let q = m.loadings.first().map_or(0, Vec::len);
        let mut header = vec!["item".to_string(), "mean_intercept".to_string()];
        header.extend((1..=q).map(|c| format!("mean_loading{c}")));
        header.push("rmse_intercept".into());
        header.extend((1..=q).map(|c| format!("rmse_loading{c}")));
        let rows: Vec<Vec<String>> = (0..m.intercepts.len())
            .map(|j| {
                let mut row = vec![(j + 1).to_string(), fmt6(m.intercepts[j])];
                row.extend(m.loadings[j].iter().map(|&v| fmt6(v)));
                row.push(fmt6(r.intercepts[j]));
                row.extend(r.loadings[j].iter().map(|&v| fmt6(v)));
                row
            })
            .collect();
        let h: Vec<&str> = header.iter().map(String::as_str).collect();
        out.push('\n');
        out.push_str(&render_table(&h, &rows));
    }
    let _ = writeln!(
        out,
        "misclassification: mean {}, se {}",
        opt6(s.misclass_mean),
        opt6(s.misclass_se)
    );
    for f in &s.failures {
        let _ = writeln!(out, "{f}");
    }
    out
}
