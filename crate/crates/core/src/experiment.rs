//! Experiment configs, grid sweeps and result emission.
//!
//! Every run is a pure function of its config: grid points are visited in a
//! fixed order, replicates draw from per-index random streams, and floats are
//! written with 17 significant digits, so the same config yields the same
//! bytes regardless of the worker count.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::{ChiSquared, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::{
    chi2_tail_lower, chi2_tail_upper, chi2_tail_upper_refined, quad_form_tail, regime_report, singular_value_bounds,
    wishart_deviation, BoundsInput,
};
use crate::eigen::sym_eigen;
use crate::estimators::{EstimatorKind, ThresholdConfig};
use crate::model::{dt_least_favorable, ModelSpec, SpikedCovariance, ThetaSpec};
use crate::packing::{build_hypothesis_family, family_recipe, risk_lower_bound, FamilySpec, LowerBound, SupportMode};
use crate::risk::{dt_bias_bound, mc_risk_detailed, parallel_map, EstimatorSpec, McSettings, RiskEstimate};
use crate::rng::StreamSeed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    RiskCurve,
    Bounds,
    Packing,
    DtVsAspca,
    TailCheck,
}

/// Parameter grid; the experiment visits the Cartesian product in the order
/// `N, n, q, C, lambda` (last varies fastest).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(rename = "N", default)]
    pub dims: Vec<usize>,
    #[serde(default)]
    pub n: Vec<usize>,
    #[serde(default)]
    pub q: Vec<f64>,
    #[serde(rename = "C", default)]
    pub c: Vec<f64>,
    #[serde(default)]
    pub lambda: Vec<f64>,
}

/// One point of a grid; absent axes are `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridPoint {
    pub dim: Option<usize>,
    pub n: usize,
    pub q: Option<f64>,
    pub c: Option<f64>,
    pub lambda: Option<f64>,
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

impl Grid {
    pub fn points(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for dim in axis(&self.dims) {
            for &n in &self.n {
                for q in axis(&self.q) {
                    for c in axis(&self.c) {
                        for lambda in axis(&self.lambda) {
                            out.push(GridPoint { dim, n, q, c, lambda });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackingParams {
    pub mode: SupportMode,
    /// Perturbed component (zero-based).
    pub nu: usize,
    /// Block size; the balancing recipe is used when absent.
    pub m: Option<usize>,
    /// Perturbation radius; the balancing recipe is used when absent.
    pub r: Option<f64>,
}

impl Default for PackingParams {
    fn default() -> Self {
        PackingParams {
            mode: SupportMode::FixedBlock,
            nu: 0,
            m: None,
            r: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TailParams {
    /// Relative deviations for the chi-square bounds.
    pub eps: Vec<f64>,
    /// Quadratic-form level: `|mean(y1 y2)| > sqrt(b/n)`.
    pub b: f64,
    /// Multiplier of `t_n` in the Wishart deviation.
    pub c: f64,
    /// Rows and columns of the singular-value check.
    pub p: usize,
    pub q_dim: usize,
    pub t: f64,
}

impl Default for TailParams {
    fn default() -> Self {
        TailParams {
            eps: vec![0.2, 0.3, 0.4],
            b: 2.0,
            c: 1.0,
            p: 20,
            q_dim: 200,
            t: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub estimate_rank: bool,
    #[serde(default)]
    pub replicates: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub thresholds: ThresholdConfig,
    /// Enables the log-factor rate in `bounds` runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub packing: PackingParams,
    #[serde(default)]
    pub tails: TailParams,
    /// Directory receiving `results.csv`, `replicates.csv` and `manifest.json`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config("config", e.to_string()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.thresholds.validate()?;
        let need = |values_empty: bool, key: &str| {
            if values_empty {
                Err(Error::config(key, "must be a nonempty list"))
            } else {
                Ok(())
            }
        };
        need(self.grid.n.is_empty(), "grid.n")?;
        let statistical = matches!(
            self.kind,
            ExperimentKind::RiskCurve | ExperimentKind::DtVsAspca | ExperimentKind::TailCheck
        );
        if statistical && self.replicates < 2 {
            return Err(Error::config("replicates", format!("must be at least 2, got {}", self.replicates)));
        }
        match self.kind {
            ExperimentKind::RiskCurve => {
                if self.model.is_none() {
                    return Err(Error::config("model", "risk_curve needs a model"));
                }
                if self.estimators.is_empty() {
                    return Err(Error::config("estimators", "must be a nonempty list"));
                }
            }
            ExperimentKind::DtVsAspca | ExperimentKind::Bounds | ExperimentKind::Packing => {
                need(self.grid.dims.is_empty(), "grid.N")?;
                need(self.grid.q.is_empty(), "grid.q")?;
                need(self.grid.c.is_empty(), "grid.C")?;
                need(self.grid.lambda.is_empty(), "grid.lambda")?;
            }
            ExperimentKind::TailCheck => {
                for &e in &self.tails.eps {
                    if !(e > 0.0 && e < 1.0) {
                        return Err(Error::config("tails.eps", format!("{e} is outside (0, 1)")));
                    }
                }
            }
        }
        Ok(())
    }

    /// Model used at a risk-curve grid point: `N` replaces the dimension,
    /// `lambda` the leading spike, and `q`, `C` the least-favourable direction.
    pub fn model_at(&self, point: &GridPoint) -> Result<SpikedCovariance> {
        let mut spec = self.model.clone().ok_or_else(|| Error::config("model", "missing"))?;
        if let Some(dim) = point.dim {
            spec.dim = dim;
        }
        if let Some(l) = point.lambda {
            match spec.lambdas.first_mut() {
                Some(first) => *first = l,
                None => spec.lambdas.push(l),
            }
            spec.rank = None;
        }
        if let ThetaSpec::DtLeastFavorable { q, c } = &mut spec.theta_spec {
            *q = point.q.unwrap_or(*q);
            *c = point.c.unwrap_or(*c);
        }
        spec.resolve(point.n)
    }
}

/// A CSV-shaped result table.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_float(x: Option<f64>) -> String {
    x.map(format_float).unwrap_or_default()
}

fn opt_int(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// Keeps free text inside one CSV cell.
fn cell_text(s: &str) -> String {
    s.replace([',', '\n', '\r'], ";")
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for row in &self.rows {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| Error::config("table", "empty CSV"))?
            .split(',')
            .map(str::to_string)
            .collect();
        let rows = lines
            .filter(|l| !l.is_empty())
            .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>())
            .collect::<Vec<_>>();
        if let Some(bad) = rows.iter().find(|r| r.len() != header.len()) {
            return Err(Error::config("table", format!("row has {} cells, header has {}", bad.len(), header.len())));
        }
        Ok(Table { header, rows })
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::config("column", format!("no column named {name:?}")))
    }

    /// Parses a column as floats; blank or non-numeric cells are errors.
    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let idx = self.column_index(name)?;
        self.rows
            .iter()
            .map(|r| {
                r[idx]
                    .parse::<f64>()
                    .map_err(|_| Error::config("column", format!("{name}: {:?} is not a number", r[idx])))
            })
            .collect()
    }

    /// Rows whose `name` column equals `value`.
    pub fn filter(&self, name: &str, value: &str) -> Result<Table> {
        let idx = self.column_index(name)?;
        Ok(Table {
            header: self.header.clone(),
            rows: self.rows.iter().filter(|r| r[idx] == value).cloned().collect(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SlopeFit {
    pub slope: f64,
    pub std_error: f64,
    pub intercept: f64,
}

/// Least-squares line through `(ln x, ln y)`.
pub fn log_log_fit(xs: &[f64], ys: &[f64]) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::Precondition(format!(
            "slope fit needs at least 3 paired points, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    if let Some(bad) = xs.iter().chain(ys).find(|v| !(**v > 0.0)) {
        return Err(Error::Precondition(format!("log-log fit needs positive values, got {bad}")));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Precondition("all x values are equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = lx.iter().zip(&ly).map(|(x, y)| (y - intercept - slope * x).powi(2)).sum();
    Ok(SlopeFit {
        slope,
        std_error: (ssr / (k - 2.0) / sxx).sqrt(),
        intercept,
    })
}

pub fn slope_fit(table: &Table, x_col: &str, y_col: &str) -> Result<SlopeFit> {
    log_log_fit(&table.column(x_col)?, &table.column(y_col)?)
}

/// Everything a run produces.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub results: Table,
    pub replicates: Option<Table>,
    /// Grid points that failed, with their error messages.
    pub failures: Vec<String>,
}

const RISK_HEADER: &[&str] = &[
    "estimator",
    "N",
    "n",
    "q",
    "C",
    "lambda",
    "nu",
    "loss_mean",
    "loss_se",
    "bias_mean",
    "bias_se",
    "dt_bias_bound",
    "replicates",
    "failed",
    "fallback_count",
    "status",
];

const REPLICATE_HEADER: &[&str] = &["point", "estimator", "replicate", "nu", "loss", "bias", "fallback"];

/// Runs the experiment on a pool of `jobs` threads (all cores when `None`).
pub fn run_experiment(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentOutput> {
    config.validate()?;
    match config.kind {
        ExperimentKind::RiskCurve | ExperimentKind::DtVsAspca => run_risk(config, jobs),
        ExperimentKind::Bounds => run_bounds(config),
        ExperimentKind::Packing => run_packing(config),
        ExperimentKind::TailCheck => run_tail_check(config, jobs),
    }
}

fn run_risk(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentOutput> {
    let dt_vs_aspca = config.kind == ExperimentKind::DtVsAspca;
    let estimators = if config.estimators.is_empty() {
        vec![EstimatorKind::Dt, EstimatorKind::Aspca]
    } else {
        config.estimators.clone()
    };
    let mut results = Table::new(RISK_HEADER);
    let mut replicates = Table::new(REPLICATE_HEADER);
    let mut failures = Vec::new();

    for (index, point) in config.grid.points().iter().enumerate() {
        let model = if dt_vs_aspca {
            single_spike_least_favorable(point)
        } else {
            config.model_at(point)
        };
        let model = match model {
            Ok(m) => m,
            Err(e) => {
                failures.push(format!("point {index}: {e}"));
                let mut row = vec![String::new(); RISK_HEADER.len()];
                row[1] = opt_int(point.dim);
                row[2] = point.n.to_string();
                row[15] = cell_text(&e.to_string());
                results.push(row);
                continue;
            }
        };
        let (q, c) = match (dt_vs_aspca, &config.model) {
            (true, _) => (point.q, point.c),
            (false, Some(ModelSpec { theta_spec: ThetaSpec::DtLeastFavorable { q, c }, .. })) => {
                (Some(point.q.unwrap_or(*q)), Some(point.c.unwrap_or(*c)))
            }
            _ => (None, None),
        };
        let bias_bound = match (q, c) {
            (Some(q), Some(c)) => {
                dt_bias_bound(q, c, point.n, model.dim(), config.thresholds.gamma_dt, model.lambdas()[0])
                    .ok()
                    .map(|b| b.bound)
            }
            _ => None,
        };
        // estimators at one grid point share the same samples
        let settings = McSettings {
            replicates: config.replicates,
            master_seed: config.master_seed,
            experiment: index as u64,
            jobs,
        };
        for &kind in &estimators {
            let spec = EstimatorSpec {
                kind,
                config: config.thresholds,
                estimate_rank: config.estimate_rank,
            };
            match mc_risk_detailed(&model, point.n, &spec, &settings) {
                Ok((risk, records)) => {
                    push_risk_rows(&mut results, kind, point, &model, q, c, bias_bound, &risk);
                    for r in records {
                        replicates.push(vec![
                            index.to_string(),
                            kind.name().to_string(),
                            r.replicate.to_string(),
                            r.nu.to_string(),
                            opt_float(r.loss),
                            opt_float(r.bias),
                            (r.fallback as u8).to_string(),
                        ]);
                    }
                }
                Err(e) => {
                    failures.push(format!("point {index}, {}: {e}", kind.name()));
                    let mut row = vec![String::new(); RISK_HEADER.len()];
                    row[0] = kind.name().to_string();
                    row[1] = model.dim().to_string();
                    row[2] = point.n.to_string();
                    row[15] = cell_text(&e.to_string());
                    results.push(row);
                }
            }
        }
    }
    Ok(ExperimentOutput {
        results,
        replicates: Some(replicates),
        failures,
    })
}

fn single_spike_least_favorable(point: &GridPoint) -> Result<SpikedCovariance> {
    let (Some(dim), Some(q), Some(c), Some(lambda)) = (point.dim, point.q, point.c, point.lambda) else {
        return Err(Error::config("grid", "dt_vs_aspca needs N, q, C and lambda"));
    };
    SpikedCovariance::single(lambda, dt_least_favorable(q, c, point.n, dim)?)
}

#[allow(clippy::too_many_arguments)]
fn push_risk_rows(
    table: &mut Table,
    kind: EstimatorKind,
    point: &GridPoint,
    model: &SpikedCovariance,
    q: Option<f64>,
    c: Option<f64>,
    bias_bound: Option<f64>,
    risk: &RiskEstimate,
) {
    for comp in &risk.per_component {
        let (bias_mean, bias_se) = match comp.bias {
            Some(b) => (format_float(b.mean), format_float(b.std_error)),
            None => (String::new(), String::new()),
        };
        let selective = matches!(kind, EstimatorKind::Dt | EstimatorKind::Aspca);
        table.push(vec![
            kind.name().to_string(),
            model.dim().to_string(),
            point.n.to_string(),
            opt_float(q),
            opt_float(c),
            format_float(model.lambdas()[comp.nu]),
            comp.nu.to_string(),
            format_float(comp.loss.mean),
            format_float(comp.loss.std_error),
            bias_mean,
            bias_se,
            if selective && comp.nu == 0 { opt_float(bias_bound) } else { String::new() },
            comp.loss.count.to_string(),
            risk.diagnostics.failed.to_string(),
            risk.diagnostics.fallback.to_string(),
            "ok".to_string(),
        ]);
    }
}

fn bounds_input(config: &ExperimentConfig, point: &GridPoint) -> BoundsInput {
    BoundsInput {
        dim: point.dim.unwrap_or_default(),
        n: point.n,
        rank: config.model.as_ref().map_or(1, |m| m.lambdas.len().max(1)),
        q: point.q.unwrap_or(f64::NAN),
        c: point.c.unwrap_or(f64::NAN),
        lambda: point.lambda.unwrap_or(f64::NAN),
        alpha: config.alpha,
    }
}

fn run_bounds(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut table = Table::new(&[
        "N",
        "n",
        "M",
        "q",
        "C",
        "lambda",
        "tau2",
        "m_nu",
        "N_prime",
        "regime",
        "delta_n",
        "ultra_delta_n",
        "ultra_hypothesis",
        "status",
    ]);
    let mut failures = Vec::new();
    for (index, point) in config.grid.points().iter().enumerate() {
        let input = bounds_input(config, point);
        let lead = vec![
            input.dim.to_string(),
            input.n.to_string(),
            input.rank.to_string(),
            format_float(input.q),
            format_float(input.c),
            format_float(input.lambda),
        ];
        let tail = match regime_report(&input) {
            Ok(r) => vec![
                format_float(r.tau2),
                format_float(r.m_nu),
                format_float(r.n_prime),
                r.regime.name().to_string(),
                format_float(r.delta_n),
                opt_float(r.ultra.map(|u| u.delta_n)),
                r.ultra.map(|u| u.hypothesis_holds.to_string()).unwrap_or_default(),
                "ok".to_string(),
            ],
            Err(e) => {
                failures.push(format!("point {index}: {e}"));
                let mut row = vec![String::new(); 7];
                row.push(cell_text(&e.to_string()));
                row
            }
        };
        table.push(lead.into_iter().chain(tail).collect());
    }
    Ok(ExperimentOutput {
        results: table,
        replicates: None,
        failures,
    })
}

/// Builds the hypothesis family at one point and evaluates its lower bound.
pub fn packing_point(
    dim: usize,
    n: usize,
    q: f64,
    c: f64,
    lambdas: &[f64],
    params: &PackingParams,
) -> Result<(usize, LowerBound)> {
    let rank = lambdas.len();
    let lambda = *lambdas
        .get(params.nu)
        .ok_or_else(|| Error::config("packing.nu", format!("component {} out of range", params.nu)))?;
    let (m, r2) = match (params.m, params.r) {
        (Some(m), Some(r)) => (m, r * r),
        (m, r) => {
            let recipe = family_recipe(dim, rank, n, lambda, q, c)?;
            let m = m.unwrap_or(recipe.m);
            let r2 = r.map(|r| r * r).unwrap_or(crate::bounds::C1 * m as f64 / (n as f64 * crate::risk::h(lambda)?));
            (m, r2)
        }
    };
    let family = build_hypothesis_family(
        lambdas,
        &FamilySpec {
            dim,
            nu: params.nu,
            q,
            c,
            mode: params.mode,
            m,
            r: r2.sqrt(),
        },
    )?;
    Ok((m, risk_lower_bound(&family, n)?))
}

fn run_packing(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    let mut table = Table::new(&[
        "N",
        "n",
        "q",
        "C",
        "lambda",
        "m",
        "family_size",
        "r2",
        "kl_per_member",
        "fano_a",
        "lower_bound",
        "status",
    ]);
    let mut failures = Vec::new();
    for (index, point) in config.grid.points().iter().enumerate() {
        let (dim, q, c, lambda) = (
            point.dim.unwrap_or_default(),
            point.q.unwrap_or(f64::NAN),
            point.c.unwrap_or(f64::NAN),
            point.lambda.unwrap_or(f64::NAN),
        );
        let mut lambdas = config.model.as_ref().map(|m| m.lambdas.clone()).unwrap_or_default();
        match lambdas.get_mut(config.packing.nu) {
            Some(l) => *l = lambda,
            None => lambdas = vec![lambda],
        }
        let mut row = vec![
            dim.to_string(),
            point.n.to_string(),
            format_float(q),
            format_float(c),
            format_float(lambda),
        ];
        match packing_point(dim, point.n, q, c, &lambdas, &config.packing) {
            Ok((m, lb)) => row.extend([
                m.to_string(),
                lb.family_size.to_string(),
                format_float(lb.r2),
                format_float(lb.kl_per_member),
                format_float(lb.fano_a),
                format_float(lb.lower_bound),
                "ok".to_string(),
            ]),
            Err(e) => {
                failures.push(format!("point {index}: {e}"));
                row.extend(vec![String::new(); 6]);
                row.push(cell_text(&e.to_string()));
            }
        }
        table.push(row);
    }
    Ok(ExperimentOutput {
        results: table,
        replicates: None,
        failures,
    })
}

/// Stream ids for the tail samplers, so their draws never overlap.
const TAIL_STREAM: u64 = 1 << 40;

fn tail_settings(config: &ExperimentConfig, tag: u64, jobs: Option<usize>) -> McSettings {
    McSettings {
        replicates: config.replicates,
        master_seed: config.master_seed,
        experiment: TAIL_STREAM + tag,
        jobs,
    }
}

/// `chi2_n` draws.
pub fn sample_chi2(n: usize, settings: &McSettings) -> Result<Vec<f64>> {
    let dist = ChiSquared::new(n as f64).map_err(|e| Error::Precondition(e.to_string()))?;
    parallel_map(settings.replicates, settings.jobs, |r| settings.seed(r).rng().sample(dist))
}

/// Draws of `|n^{-1} sum_i y1_i y2_i|`. Given `y2`, the sum is
/// `||y2|| Z` with `Z ~ N(0, 1)`, so each draw needs one chi-square and one
/// normal variate.
pub fn sample_quad_form(n: usize, settings: &McSettings) -> Result<Vec<f64>> {
    let dist = ChiSquared::new(n as f64).map_err(|e| Error::Precondition(e.to_string()))?;
    parallel_map(settings.replicates, settings.jobs, |r| {
        let mut rng = settings.seed(r).rng();
        let norm2: f64 = rng.sample(dist);
        let z: f64 = rng.sample(StandardNormal);
        (norm2.sqrt() * z).abs() / n as f64
    })
}

fn gaussian_matrix(rows: usize, cols: usize, seed: StreamSeed) -> Array2<f64> {
    let mut rng = seed.rng();
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Draws of `||Z Z^T / n - I||` for `N x n` standard Gaussian `Z`.
pub fn sample_wishart_deviation(n: usize, dim: usize, settings: &McSettings) -> Result<Vec<f64>> {
    let draws = parallel_map(settings.replicates, settings.jobs, |r| -> Result<f64> {
        let z = gaussian_matrix(dim, n, settings.seed(r));
        let mut w = z.dot(&z.t()) / n as f64;
        w.diag_mut().mapv_inplace(|x| x - 1.0);
        let spec = sym_eigen(&w)?;
        Ok(spec.values.iter().fold(0.0f64, |a, v| a.max(v.abs())))
    })?;
    draws.into_iter().collect()
}

/// Draws of `(s_max, s_min)` for `p x q` matrices with `N(0, 1/q)` entries.
pub fn sample_singular_values(p: usize, q_dim: usize, settings: &McSettings) -> Result<Vec<(f64, f64)>> {
    let draws = parallel_map(settings.replicates, settings.jobs, |r| -> Result<(f64, f64)> {
        let a = gaussian_matrix(p, q_dim, settings.seed(r)) / (q_dim as f64).sqrt();
        let spec = sym_eigen(&a.dot(&a.t()))?;
        let top = spec.values[0].max(0.0).sqrt();
        let bottom = spec.values[p - 1].max(0.0).sqrt();
        Ok((top, bottom))
    })?;
    draws.into_iter().collect()
}

fn frequency(values: impl Iterator<Item = bool>, count: usize) -> f64 {
    values.filter(|&b| b).count() as f64 / count as f64
}

/// Slack applied to the quadratic-form bound, whose exponent omits an
/// unquantified `O(b^2/n)` correction.
pub const QUAD_FORM_SLACK: f64 = 1.5;

fn run_tail_check(config: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentOutput> {
    let mut table = Table::new(&["bound", "n", "N", "param", "draws", "empirical", "bound_value", "holds"]);
    let draws = config.replicates;
    let tails = &config.tails;
    let mut push = |name: &str, n: usize, dim: usize, param: f64, empirical: f64, bound: f64| {
        table.push(vec![
            name.to_string(),
            n.to_string(),
            dim.to_string(),
            format_float(param),
            draws.to_string(),
            format_float(empirical),
            format_float(bound),
            (empirical <= bound).to_string(),
        ]);
    };
    for (index, &n) in config.grid.n.iter().enumerate() {
        let tag = 16 * index as u64;
        let nf = n as f64;
        let chi2 = sample_chi2(n, &tail_settings(config, tag, jobs))?;
        for &eps in &tails.eps {
            let above = frequency(chi2.iter().map(|&x| x > nf * (1.0 + eps)), draws);
            let below = frequency(chi2.iter().map(|&x| x < nf * (1.0 - eps)), draws);
            if let Ok(b) = chi2_tail_upper(n, eps) {
                push("chi2_upper", n, 0, eps, above, b);
            }
            if let Ok(b) = chi2_tail_upper_refined(n, eps) {
                push("chi2_upper_refined", n, 0, eps, above, b);
            }
            if let Ok(b) = chi2_tail_lower(n, eps) {
                push("chi2_lower", n, 0, eps, below, b);
            }
        }
        if let Ok(qf) = quad_form_tail(n, tails.b) {
            let level = (tails.b / nf).sqrt();
            let values = sample_quad_form(n, &tail_settings(config, tag + 1, jobs))?;
            let freq = frequency(values.iter().map(|&v| v > level), draws);
            push("quad_form", n, 0, tails.b, freq, QUAD_FORM_SLACK * qf.bound);
        }
        let dims = if config.grid.dims.is_empty() { vec![n] } else { config.grid.dims.clone() };
        for (j, &dim) in dims.iter().enumerate() {
            let w = wishart_deviation(n, dim, tails.c)?;
            let values = sample_wishart_deviation(n, dim, &tail_settings(config, tag + 2 + j as u64 * 1024, jobs))?;
            let freq = frequency(values.iter().map(|&v| v > w.threshold), draws);
            push("wishart", n, dim, tails.c, freq, w.prob_bound);
        }
    }
    let sv = singular_value_bounds(tails.p, tails.q_dim, tails.t)?;
    let values = sample_singular_values(tails.p, tails.q_dim, &tail_settings(config, 15, jobs))?;
    let upper = frequency(values.iter().map(|v| v.0 > sv.upper_level), draws);
    let lower = frequency(values.iter().map(|v| v.1 < sv.lower_level), draws);
    push("singular_max", tails.q_dim, tails.p, tails.t, upper, sv.upper_prob);
    push("singular_min", tails.q_dim, tails.p, tails.t, lower, sv.lower_prob);
    Ok(ExperimentOutput {
        results: table,
        replicates: None,
        failures: Vec::new(),
    })
}

/// SHA-256 over `"blob <len>\0" + content`, as in git's SHA-256 object format.
pub fn content_hash(content: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(format!("blob {}\0", content.len()).as_bytes());
    hasher.update(content);
    hex::encode(hasher.finalize())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ExperimentConfig,
    pub results_file: String,
    pub results_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replicates_hash: Option<String>,
    pub rows: usize,
    pub failures: Vec<String>,
    pub version: String,
}

impl Manifest {
    pub fn new(config: &ExperimentConfig, output: &ExperimentOutput) -> Self {
        Manifest {
            config: config.clone(),
            results_file: "results.csv".into(),
            results_hash: content_hash(output.results.to_csv().as_bytes()),
            replicates_file: output.replicates.as_ref().map(|_| "replicates.csv".into()),
            replicates_hash: output
                .replicates
                .as_ref()
                .map(|t| content_hash(t.to_csv().as_bytes())),
            rows: output.results.rows.len(),
            failures: output.failures.clone(),
            version: env!("CARGO_PKG_VERSION").into(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }
}

/// Writes `results.csv`, `replicates.csv` (risk runs) and `manifest.json`.
pub fn write_outputs(dir: &Path, config: &ExperimentConfig, output: &ExperimentOutput) -> Result<Manifest> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("results.csv"), output.results.to_csv())?;
    if let Some(t) = &output.replicates {
        fs::write(dir.join("replicates.csv"), t.to_csv())?;
    }
    let manifest = Manifest::new(config, output);
    fs::write(dir.join("manifest.json"), manifest.to_json()?)?;
    Ok(manifest)
}

/// Aligned plain-text rendering of a table.
pub fn render_text(table: &Table) -> String {
    let widths: Vec<usize> = (0..table.header.len())
        .map(|i| {
            table
                .rows
                .iter()
                .map(|r| r[i].len())
                .chain(std::iter::once(table.header[i].len()))
                .max()
                .unwrap_or(0)
        })
        .collect();
    let mut out = String::new();
    for row in std::iter::once(&table.header).chain(&table.rows) {
        let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn risk_config() -> ExperimentConfig {
        ExperimentConfig::from_json(
            r#"{
                "kind": "risk_curve",
                "model": {"N": 10, "lambdas": [4.0]},
                "grid": {"N": [10, 20], "n": [200]},
                "estimators": ["pca", "aspca"],
                "replicates": 4,
                "master_seed": 11
            }"#,
        )
        .unwrap()
    }

    #[test]
    fn grid_order_is_fixed() {
        let g = Grid {
            dims: vec![1, 2],
            n: vec![10, 20],
            ..Grid::default()
        };
        let pts: Vec<_> = g.points().iter().map(|p| (p.dim.unwrap(), p.n)).collect();
        assert_eq!(pts, vec![(1, 10), (1, 20), (2, 10), (2, 20)]);
    }

    #[test]
    fn risk_curve_rows_and_determinism() {
        let cfg = risk_config();
        let a = run_experiment(&cfg, Some(1)).unwrap();
        assert_eq!(a.results.rows.len(), 4);
        assert!(a.failures.is_empty());
        assert_eq!(a.replicates.as_ref().unwrap().rows.len(), 16);
        let b = run_experiment(&cfg, Some(3)).unwrap();
        assert_eq!(a.results.to_csv(), b.results.to_csv());
        assert_eq!(
            a.replicates.unwrap().to_csv(),
            b.replicates.unwrap().to_csv()
        );
    }

    #[test]
    fn config_errors_name_the_key() {
        let mut cfg = risk_config();
        cfg.replicates = 1;
        match run_experiment(&cfg, None) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "replicates"),
            other => panic!("unexpected {other:?}"),
        }
        let err = ExperimentConfig::from_json(r#"{"kind": "bounds", "master_seed": 1, "bogus": 2}"#).unwrap_err();
        assert!(err.is_config_error());
        let err = ExperimentConfig::from_json(r#"{"kind": "bounds"}"#).unwrap_err();
        assert!(err.to_string().contains("master_seed"));
    }

    #[test]
    fn point_failures_do_not_stop_the_run() {
        let mut cfg = risk_config();
        cfg.grid.dims = vec![1, 10];
        let out = run_experiment(&cfg, Some(1)).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert!(out.results.rows[0][15].contains("invalid model"));
        assert_eq!(out.results.rows[1][15], "ok");
    }

    #[test]
    fn manifest_round_trip() {
        let cfg = risk_config();
        let out = run_experiment(&cfg, Some(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_outputs(dir.path(), &cfg, &out).unwrap();
        let text = fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        let parsed: Manifest = serde_json::from_str(&text).unwrap();
        assert_eq!(parsed, manifest);
        assert_eq!(parsed.config, cfg);
        let csv = fs::read(dir.path().join("results.csv")).unwrap();
        assert_eq!(content_hash(&csv), parsed.results_hash);
    }

    #[test]
    fn content_hash_matches_git_sha256_objects() {
        // `git hash-object --object-format=sha256` of an empty file
        assert_eq!(
            content_hash(b""),
            "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813"
        );
    }

    #[test]
    fn slope_of_exact_power_law() {
        let xs = [10.0, 100.0, 1000.0, 10000.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| x.powf(-0.5)).collect();
        let fit = log_log_fit(&xs, &ys).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
        assert!(fit.std_error < 1e-12);
        assert!(log_log_fit(&xs[..2], &ys[..2]).is_err());
        assert!(log_log_fit(&[1.0, 2.0, 0.0], &[1.0, 1.0, 1.0]).is_err());
    }

    #[test]
    fn table_round_trip() {
        let out = run_experiment(&risk_config(), Some(1)).unwrap();
        let csv = out.results.to_csv();
        assert_eq!(Table::from_csv(&csv).unwrap(), out.results);
        let pca = out.results.filter("estimator", "pca").unwrap();
        assert_eq!(pca.column("N").unwrap(), vec![10.0, 20.0]);
    }

    #[test]
    fn bounds_and_packing_runs() {
        let cfg = ExperimentConfig::from_json(
            r#"{"kind": "bounds", "master_seed": 0,
                "grid": {"N": [1000], "n": [1000, 100000], "q": [1.0], "C": [2.0], "lambda": [1.0]}}"#,
        )
        .unwrap();
        let out = run_experiment(&cfg, None).unwrap();
        assert_eq!(out.results.rows.len(), 2);
        assert!(out.results.rows.iter().all(|r| r[13] == "ok"));

        let cfg = ExperimentConfig::from_json(
            r#"{"kind": "packing", "master_seed": 0,
                "grid": {"N": [200], "n": [10000], "q": [1.0], "C": [3.0], "lambda": [1.0]},
                "packing": {"m": 12}}"#,
        )
        .unwrap();
        let out = run_experiment(&cfg, None).unwrap();
        assert_eq!(out.results.rows[0][11], "ok", "{:?}", out.results.rows[0]);
        assert_eq!(out.results.rows[0][5], "12");
    }

    #[test]
    fn tail_check_small_run() {
        let cfg = ExperimentConfig::from_json(
            r#"{"kind": "tail_check", "master_seed": 5, "replicates": 200,
                "grid": {"n": [100]}, "tails": {"eps": [0.3], "b": 2.0, "c": 1.0, "p": 5, "q_dim": 50, "t": 0.3}}"#,
        )
        .unwrap();
        let out = run_experiment(&cfg, Some(2)).unwrap();
        let names: Vec<&str> = out.results.rows.iter().map(|r| r[0].as_str()).collect();
        assert_eq!(
            names,
            vec!["chi2_upper", "chi2_upper_refined", "chi2_lower", "quad_form", "wishart", "singular_max", "singular_min"]
        );
        for row in &out.results.rows {
            // the quadratic-form level sits near the normal tail P(|Z| > sqrt(b)),
            // which exceeds 2 exp(-3b/2) even with the slack
            let expect = if row[0] == "quad_form" { "false" } else { "true" };
            assert_eq!(row[7], expect, "{}", out.results.to_csv());
        }
    }
}
