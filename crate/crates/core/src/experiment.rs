//! Sweeps over step size and loss rate driven by a flat `key = value`
//! configuration, with per-cell CSV traces, a summary table and an SVG
//! overlay of log MSE against the iteration index.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use thiserror::Error;

use crate::consensus::MassResidual;
use crate::costs::DescentVariant;
use crate::graph::DirectedGraph;
use crate::linalg::Vector;
use crate::sim::{
    run_on, ActivationPolicy, CostSpec, GraphSpec, LossModel, Outcome, Problem, Record, SimConfig,
    SimError, StopRule, Summary, Trace, TRACE_CSV_HEADER,
};

/// Dataset path used when the configuration names none.
pub const DATA_ENV: &str = "RANRC_DATA";

pub const SUMMARY_CSV_HEADER: &str = "epsilon,loss,status,iterations,final_mse,tail_slope,tau_hat,l_hat,unbounded_loss,max_mass_residual_y,max_mass_residual_z,trace";

const DEFAULTS: &[(&str, &str)] = &[
    ("activation", "uniform"),
    ("c", "0.0001"),
    ("cost", "quadratic"),
    ("cost_seed", "0"),
    ("dataset", ""),
    ("dimension", "4"),
    ("divergence_threshold", "1e12"),
    ("epsilon", "0.01"),
    ("features", "0,1,2"),
    ("freeze_after", ""),
    ("gamma", "0.01"),
    ("graph_file", ""),
    ("graph_seed", "0"),
    ("loss", "0.1"),
    ("loss_model", "bernoulli"),
    ("max_condition", "100"),
    ("max_iters", "2000"),
    ("nodes", "10"),
    ("out", "out"),
    ("partition", "random"),
    ("partition_seed", "0"),
    ("plot", "true"),
    ("radius", "0.5"),
    ("seed", "0"),
    ("snapshot_stride", ""),
    ("standardize", "false"),
    ("stop_consensus", ""),
    ("stop_mse", ""),
    ("tail_fraction", "0.5"),
    ("variant", "newton-raphson"),
    ("x0", ""),
];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found `{text}`")]
    Syntax { line: usize, text: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("`{key}`: cannot read `{value}` as {expected}")]
    Type {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("binomial-deviance cost needs `dataset` or the {DATA_ENV} variable")]
    MissingDataset,
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed {file} at line {line}: {reason}")]
    Parse {
        file: &'static str,
        line: usize,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Bernoulli,
    /// Sweep values are burst lengths.
    Burst,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    /// Every resolved key, defaults included.
    pub settings: BTreeMap<String, String>,
    /// Template for each cell; `epsilon` and `loss` are set per cell.
    pub base: SimConfig,
    pub epsilons: Vec<f64>,
    pub losses: Vec<f64>,
    pub loss_kind: LossKind,
    pub out_dir: PathBuf,
    pub plot: bool,
    pub tail_fraction: f64,
}

/// Reads `path` (if any), applies `overrides` in order and validates.
/// The dataset falls back to the `RANRC_DATA` environment variable.
pub fn parse_config(
    path: Option<&Path>,
    overrides: &[(String, String)],
) -> Result<ExperimentSpec, ConfigError> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|source| ConfigError::Io {
            path: p.display().to_string(),
            source,
        })?,
        None => String::new(),
    };
    let env_data = std::env::var_os(DATA_ENV).map(PathBuf::from);
    parse_config_text(&text, overrides, env_data.as_deref())
}

/// [`parse_config`] on in-memory text with an explicit dataset fallback.
pub fn parse_config_text(
    text: &str,
    overrides: &[(String, String)],
    data_fallback: Option<&Path>,
) -> Result<ExperimentSpec, ConfigError> {
    let mut settings: BTreeMap<String, String> = DEFAULTS
        .iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    let mut set = |key: &str, value: &str| -> Result<(), ConfigError> {
        match settings.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError::UnknownKey(key.to_string())),
        }
    };
    for (idx, raw) in text.lines().enumerate() {
        let line = strip_comment(raw).trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Syntax {
                line: idx + 1,
                text: raw.to_string(),
            });
        };
        set(key.trim(), value)?;
    }
    for (key, value) in overrides {
        set(key.trim(), value)?;
    }
    if settings["dataset"].is_empty() {
        if let Some(p) = data_fallback {
            settings.insert("dataset".into(), p.display().to_string());
        }
    }
    build_spec(settings)
}

fn strip_comment(line: &str) -> &str {
    match line.find(['#', ';']) {
        Some(i) => &line[..i],
        None => line,
    }
}

struct Reader<'a>(&'a BTreeMap<String, String>);

impl Reader<'_> {
    fn raw(&self, key: &str) -> &str {
        self.0.get(key).map_or("", String::as_str)
    }

    fn parse<T: std::str::FromStr>(&self, key: &str, expected: &'static str) -> Result<T, ConfigError> {
        let v = self.raw(key);
        v.parse().map_err(|_| ConfigError::Type {
            key: key.into(),
            value: v.into(),
            expected,
        })
    }

    fn optional<T: std::str::FromStr>(
        &self,
        key: &str,
        expected: &'static str,
    ) -> Result<Option<T>, ConfigError> {
        if self.raw(key).is_empty() {
            Ok(None)
        } else {
            self.parse(key, expected).map(Some)
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| ConfigError::Type {
                    key: key.into(),
                    value: v.into(),
                    expected,
                })
            })
            .collect()
    }

    fn flag(&self, key: &str) -> Result<bool, ConfigError> {
        match self.raw(key) {
            "true" | "yes" | "1" | "on" => Ok(true),
            "false" | "no" | "0" | "off" => Ok(false),
            v => Err(ConfigError::Type {
                key: key.into(),
                value: v.into(),
                expected: "a boolean",
            }),
        }
    }
}

fn build_spec(settings: BTreeMap<String, String>) -> Result<ExperimentSpec, ConfigError> {
    let r = Reader(&settings);
    let invalid = |m: String| Err(ConfigError::Invalid(m));

    let graph = if r.raw("graph_file").is_empty() {
        GraphSpec::Geometric {
            nodes: r.parse("nodes", "a node count")?,
            radius: r.parse("radius", "a number")?,
            seed: r.parse("graph_seed", "an unsigned integer")?,
        }
    } else {
        let path = r.raw("graph_file");
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        let g = DirectedGraph::from_edge_list(&text)
            .map_err(|e| ConfigError::Invalid(format!("graph_file: {e}")))?;
        GraphSpec::Fixed(g)
    };

    let cost = match r.raw("cost") {
        "quadratic" => CostSpec::Quadratic {
            dimension: r.parse("dimension", "a positive integer")?,
            max_condition: r.parse("max_condition", "a number")?,
            seed: r.parse("cost_seed", "an unsigned integer")?,
        },
        "binomial-deviance" | "binomial" => {
            if r.raw("dataset").is_empty() {
                return Err(ConfigError::MissingDataset);
            }
            let balanced = match r.raw("partition") {
                "random" => false,
                "balanced" => true,
                v => {
                    return Err(ConfigError::Type {
                        key: "partition".into(),
                        value: v.into(),
                        expected: "`random` or `balanced`",
                    })
                }
            };
            CostSpec::Spambase {
                path: PathBuf::from(r.raw("dataset")),
                features: r.list("features", "a list of column indices")?,
                gamma: r.parse("gamma", "a number")?,
                partition_seed: r.parse("partition_seed", "an unsigned integer")?,
                balanced,
                standardize: r.flag("standardize")?,
            }
        }
        v => {
            return Err(ConfigError::Type {
                key: "cost".into(),
                value: v.into(),
                expected: "`quadratic` or `binomial-deviance`",
            })
        }
    };

    let activation = match r.raw("activation") {
        "uniform" => ActivationPolicy::Uniform,
        "round-robin" => ActivationPolicy::RoundRobin,
        v => {
            return Err(ConfigError::Type {
                key: "activation".into(),
                value: v.into(),
                expected: "`uniform` or `round-robin`",
            })
        }
    };
    let loss_kind = match r.raw("loss_model") {
        "bernoulli" => LossKind::Bernoulli,
        "burst" => LossKind::Burst,
        v => {
            return Err(ConfigError::Type {
                key: "loss_model".into(),
                value: v.into(),
                expected: "`bernoulli` or `burst`",
            })
        }
    };
    let variant: DescentVariant = r.parse("variant", "`newton-raphson`, `jacobi` or `gradient`")?;

    let epsilons: Vec<f64> = r.list("epsilon", "a list of numbers")?;
    let losses: Vec<f64> = r.list("loss", "a list of numbers")?;
    if epsilons.is_empty() {
        return invalid("epsilon sweep list is empty".into());
    }
    if losses.is_empty() {
        return invalid("loss sweep list is empty".into());
    }
    if let Some(e) = epsilons.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
        return invalid(format!("epsilon must be positive, got {e}"));
    }
    for &p in &losses {
        let ok = match loss_kind {
            LossKind::Bernoulli => (0.0..=1.0).contains(&p),
            LossKind::Burst => p >= 0.0 && p.fract() == 0.0,
        };
        if !ok {
            return invalid(format!("invalid loss value {p} for the {} model", r.raw("loss_model")));
        }
    }

    let x0: Vec<f64> = r.list("x0", "a list of numbers")?;
    let mut base = SimConfig::new(graph, cost);
    base.epsilon = epsilons[0];
    base.loss = cell_loss(loss_kind, losses[0]);
    base.c = r.parse("c", "a number")?;
    base.variant = variant;
    base.activation = activation;
    base.seed = r.parse("seed", "an unsigned integer")?;
    base.max_iters = r.parse("max_iters", "a positive integer")?;
    base.x0 = (!x0.is_empty()).then(|| Vector::from_vec(x0));
    base.freeze_after = r.optional("freeze_after", "an iteration index")?;
    base.stop = StopRule {
        mse_below: r.optional("stop_mse", "a number")?,
        consensus_below: r.optional("stop_consensus", "a number")?,
    };
    base.snapshot_stride = r.optional("snapshot_stride", "a positive integer")?;
    base.divergence_threshold = r.parse("divergence_threshold", "a number")?;
    base.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;

    let tail_fraction: f64 = r.parse("tail_fraction", "a number")?;
    if !(tail_fraction > 0.0 && tail_fraction <= 1.0) {
        return invalid(format!("tail_fraction must be in (0, 1], got {tail_fraction}"));
    }
    let out_dir = PathBuf::from(r.raw("out"));
    if out_dir.as_os_str().is_empty() {
        return invalid("output directory is empty".into());
    }
    let plot = r.flag("plot")?;

    Ok(ExperimentSpec {
        base,
        epsilons,
        losses,
        loss_kind,
        out_dir,
        plot,
        tail_fraction,
        settings,
    })
}

fn cell_loss(kind: LossKind, value: f64) -> LossModel {
    match kind {
        LossKind::Bernoulli => LossModel::Bernoulli(value),
        LossKind::Burst => LossModel::Burst(value as usize),
    }
}

impl ExperimentSpec {
    /// Resolved configuration in the input format.
    pub fn to_config_text(&self) -> String {
        self.settings
            .iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// One configuration per `(epsilon, loss)` pair, epsilon-major.
    pub fn cells(&self) -> Vec<(f64, f64, SimConfig)> {
        let mut out = Vec::with_capacity(self.epsilons.len() * self.losses.len());
        for &eps in &self.epsilons {
            for &loss in &self.losses {
                let mut cfg = self.base.clone();
                cfg.epsilon = eps;
                cfg.loss = cell_loss(self.loss_kind, loss);
                out.push((eps, loss, cfg));
            }
        }
        out
    }

    pub fn cell_stem(&self, epsilon: f64, loss: f64) -> String {
        match self.loss_kind {
            LossKind::Bernoulli => format!("eps{epsilon}_loss{loss}"),
            LossKind::Burst => format!("eps{epsilon}_burst{loss}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CellStatus {
    Completed,
    Stopped(usize),
    Diverged(usize),
    Failed(String),
}

impl CellStatus {
    pub fn label(&self) -> String {
        match self {
            CellStatus::Completed => "completed".into(),
            CellStatus::Stopped(k) => format!("stopped@{k}"),
            CellStatus::Diverged(k) => format!("diverged@{k}"),
            CellStatus::Failed(_) => "failed".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub epsilon: f64,
    pub loss: f64,
    pub stem: String,
    pub status: CellStatus,
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub cells: Vec<CellResult>,
}

impl ExperimentReport {
    /// True when no cell hit an error other than divergence.
    pub fn all_ran(&self) -> bool {
        self.cells
            .iter()
            .all(|c| !matches!(c.status, CellStatus::Failed(_)))
    }
}

fn write(path: &Path, contents: &str) -> Result<(), ExperimentError> {
    fs::write(path, contents).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Runs every cell (in parallel), writing into `spec.out_dir`:
/// `config.txt`, `graph.txt`, per cell `<stem>.csv`, `<stem>.deliveries.csv`
/// and `<stem>.summary.txt`, then `summary.csv` and optionally `mse.svg`.
/// Cell failures are recorded, not propagated; problem construction errors
/// abort the sweep.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport, ExperimentError> {
    let problem = Problem::build(&spec.base.graph, &spec.base.cost)?;
    fs::create_dir_all(&spec.out_dir).map_err(|source| ExperimentError::Io {
        path: spec.out_dir.display().to_string(),
        source,
    })?;
    write(&spec.out_dir.join("config.txt"), &spec.to_config_text())?;
    write(&spec.out_dir.join("graph.txt"), &problem.graph.to_edge_list())?;

    let results: Vec<(CellResult, Option<Trace>)> = spec
        .cells()
        .into_par_iter()
        .map(|(eps, loss, cfg)| run_cell(spec, &problem, eps, loss, &cfg))
        .collect::<Result<_, _>>()?;

    let mut table = String::from(SUMMARY_CSV_HEADER);
    table.push('\n');
    for (cell, _) in &results {
        table.push_str(&summary_row(cell));
    }
    write(&spec.out_dir.join("summary.csv"), &table)?;

    if spec.plot {
        let series: Vec<(String, Vec<(usize, f64)>)> = results
            .iter()
            .filter_map(|(cell, trace)| {
                trace.as_ref().map(|t| {
                    let pts = t.records.iter().map(|r| (r.k, r.mse)).collect();
                    (cell.stem.clone(), pts)
                })
            })
            .collect();
        write(&spec.out_dir.join("mse.svg"), &render_svg(&series))?;
    }
    Ok(ExperimentReport {
        cells: results.into_iter().map(|(c, _)| c).collect(),
    })
}

fn run_cell(
    spec: &ExperimentSpec,
    problem: &Problem,
    epsilon: f64,
    loss: f64,
    cfg: &SimConfig,
) -> Result<(CellResult, Option<Trace>), ExperimentError> {
    let stem = spec.cell_stem(epsilon, loss);
    let (status, trace) = match run_on(problem, cfg) {
        Ok(t) => {
            let status = match t.outcome {
                Outcome::Stopped { k } => CellStatus::Stopped(k),
                _ => CellStatus::Completed,
            };
            (status, Some(t))
        }
        Err(SimError::Diverged {
            iteration, trace, ..
        }) => (CellStatus::Diverged(iteration), Some(*trace)),
        Err(e) => (CellStatus::Failed(e.to_string()), None),
    };
    let summary = trace.as_ref().map(|t| t.summary(spec.tail_fraction));
    if let (Some(t), Some(s)) = (&trace, &summary) {
        let dir = &spec.out_dir;
        write(&dir.join(format!("{stem}.csv")), &t.to_csv())?;
        write(&dir.join(format!("{stem}.deliveries.csv")), &deliveries_csv(t))?;
        let mut text = format!("epsilon = {epsilon}\nloss = {loss}\n");
        text.push_str(&s.to_text(t.seed));
        write(&dir.join(format!("{stem}.summary.txt")), &text)?;
    }
    let cell = CellResult {
        epsilon,
        loss,
        stem,
        status,
        summary,
    };
    Ok((cell, trace))
}

fn summary_row(cell: &CellResult) -> String {
    let status = match &cell.status {
        CellStatus::Failed(msg) => format!("failed: {}", msg.replace([',', '\n'], ";")),
        s => s.label(),
    };
    match &cell.summary {
        Some(s) => format!(
            "{},{},{},{},{:e},{},{},{},{},{:e},{:e},{}.csv\n",
            cell.epsilon,
            cell.loss,
            status,
            s.iterations,
            s.final_mse,
            s.tail_slope.map_or_else(|| "nan".into(), |v| format!("{v:e}")),
            s.monitors.tau_hat,
            s.monitors.l_hat,
            s.monitors.unbounded_loss,
            s.max_mass_residual.y,
            s.max_mass_residual.z,
            cell.stem,
        ),
        None => format!(
            "{},{},{status},0,nan,nan,0,0,false,nan,nan,\n",
            cell.epsilon, cell.loss
        ),
    }
}

/// `iteration,active_node,delivered` with space-separated receivers.
pub fn deliveries_csv(t: &Trace) -> String {
    let mut s = String::from("iteration,active_node,delivered\n");
    for r in &t.records {
        let ids: Vec<String> = r.reliable.iter().map(usize::to_string).collect();
        let _ = writeln!(s, "{},{},{}", r.k, r.active, ids.join(" "));
    }
    s
}

/// Rebuilds a trace from the emitted trace and delivery files. Quantities
/// that are not serialized (sum norms, consensus error) are NaN.
pub fn load_cell_trace(
    trace_csv: &str,
    deliveries: &str,
    graph: &DirectedGraph,
    initial_mse: f64,
) -> Result<Trace, ExperimentError> {
    let bad = |file, line, reason: String| ExperimentError::Parse { file, line, reason };
    let mut lines = trace_csv.lines();
    if lines.next() != Some(TRACE_CSV_HEADER) {
        return Err(bad("trace", 1, "unexpected header".into()));
    }
    let mut dlines = deliveries.lines().skip(1);
    let mut records = Vec::new();
    for (idx, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 5 {
            return Err(bad("trace", idx + 2, format!("expected 5 fields, found {}", cells.len())));
        }
        let num = |i: usize| -> Result<f64, ExperimentError> {
            cells[i]
                .parse()
                .map_err(|_| bad("trace", idx + 2, format!("bad number `{}`", cells[i])))
        };
        let k: usize = cells[0]
            .parse()
            .map_err(|_| bad("trace", idx + 2, "bad iteration".into()))?;
        let active: usize = cells[1]
            .parse()
            .map_err(|_| bad("trace", idx + 2, "bad node".into()))?;
        let dline = dlines
            .next()
            .ok_or_else(|| bad("deliveries", idx + 2, "missing row".into()))?;
        let dcells: Vec<&str> = dline.splitn(3, ',').collect();
        if dcells.len() != 3 || dcells[0] != cells[0] || dcells[1] != cells[1] {
            return Err(bad("deliveries", idx + 2, "row does not match the trace".into()));
        }
        let reliable = dcells[2]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad("deliveries", idx + 2, format!("bad node `{s}`"))))
            .collect::<Result<Vec<usize>, _>>()?;
        records.push(Record {
            k,
            active,
            reliable,
            mse: num(2)?,
            mass_residual: MassResidual {
                y: num(3)?,
                z: num(4)?,
            },
            g_sum_norm: f64::NAN,
            h_sum_norm: f64::NAN,
            consensus_error: f64::NAN,
        });
    }
    let outcome = Outcome::Completed;
    Ok(Trace {
        seed: 0,
        out_neighbors: (0..graph.node_count())
            .map(|i| graph.out_neighbors(i).to_vec())
            .collect(),
        x_star: Vector::zeros(0),
        initial_mse,
        records,
        snapshots: Vec::new(),
        outcome,
    })
}

const PALETTE: [&str; 8] = [
    "#d62728", "#1f77b4", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Overlay of `log10 MSE` against `k`; values are clamped to `[-16, 12]`.
pub fn render_svg(series: &[(String, Vec<(usize, f64)>)]) -> String {
    const W: f64 = 800.0;
    const H: f64 = 420.0;
    const L: f64 = 70.0;
    const R: f64 = 170.0;
    const T: f64 = 20.0;
    const B: f64 = 50.0;
    let log = |v: f64| v.max(1e-300).log10().clamp(-16.0, 12.0);
    let k_max = series
        .iter()
        .flat_map(|(_, p)| p.last().map(|q| q.0))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(_, v) in pts {
            lo = lo.min(log(v));
            hi = hi.max(log(v));
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (-6.0, 2.0);
    }
    let (lo, hi) = (lo.floor(), hi.ceil().max(lo.floor() + 1.0));
    let px = |k: f64| L + (W - L - R) * k / k_max;
    let py = |v: f64| T + (H - T - B) * (hi - v) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<rect x="{L}" y="{T}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - L - R,
        H - T - B
    );
    let step = ((hi - lo) / 8.0).ceil().max(1.0);
    let mut v = lo;
    while v <= hi {
        let y = py(v);
        let _ = writeln!(
            s,
            r##"<line x1="{L}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{v}</text>"##,
            W - R,
            L - 6.0,
            y + 4.0
        );
        v += step;
    }
    for i in 0..=4 {
        let k = k_max * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(k),
            H - B + 18.0,
            k.round()
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">iteration k</text>"#,
        L + (W - L - R) / 2.0,
        H - 10.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" transform="rotate(-90 16 {:.1})" text-anchor="middle">log10 MSE</text>"#,
        T + (H - T - B) / 2.0,
        T + (H - T - B) / 2.0
    );
    for (idx, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[idx % PALETTE.len()];
        let stride = (pts.len() / 2000).max(1);
        let mut path = String::new();
        for (j, &(k, v)) in pts.iter().enumerate() {
            if j % stride == 0 || j + 1 == pts.len() {
                let _ = write!(path, "{:.1},{:.1} ", px(k as f64), py(log(v)));
            }
        }
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            path.trim_end()
        );
        let ly = T + 16.0 * (idx as f64 + 1.0);
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="{:.1}">{}</text>"#,
            W - R + 10.0,
            W - R + 30.0,
            W - R + 35.0,
            ly + 4.0,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
