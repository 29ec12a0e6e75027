//! The `tileheat` command line.
//!
//! Every subcommand computes its whole result before touching the file
//! system; artifacts are then written through temporary files and renamed
//! into place, so a failed run leaves nothing behind.

use std::ffi::OsString;
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{
    beta2, core_sources, eta_stable, gaussian_check, transition_report, ultra_csv, ultracontractive_check,
    BoundsReport, CheckRecord, GaussianReport, ReportConstants, POSITIVITY_FLOOR, ULTRA_ALLOWANCE,
};
use crate::check::ROUNDING_SLACK;
use crate::constants::NASH1_LIFT_CONSTANT;
use crate::functions::{Conductivity, FormSpec, Mesh};
use crate::geometry::{load_tiling, make_regular_tiling, Rect, Tiling, TilingKind};
use crate::semigroup::{assemble, heat_kernel_column, AssemblyOptions, DiscreteLaplacian, Scheme, Truncation};
use crate::skeleton::{build_skeleton, GraphPoint, MetricGraph};
use crate::suites::{extension_suite_on, nash_centers, nash_sample_function, nash_suite_for, NashSuiteOptions};
use crate::Error;

pub const RUN_SCHEMA_VERSION: u32 = 1;

/// Environment variable fixing the worker thread count.
pub const THREADS_ENV: &str = "TILEHEAT_THREADS";

pub const EXIT_OK: u8 = 0;
pub const EXIT_CHECK_FAILED: u8 = 1;
pub const EXIT_ERROR: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "tileheat", version, about = "Heat kernels and Nash inequalities on tiling skeletons")]
pub struct Cli {
    /// Print the full JSON result on stdout instead of a table.
    #[arg(long, global = true)]
    pub json: bool,
    /// Replay a run from a saved config (or from the JSON output of an
    /// earlier run).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Option<RunConfig>,
}

/// One fully specified run. Serialized into every JSON output, so that a
/// run can be replayed with `--config`.
#[derive(Subcommand, Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "subcommand", rename_all = "snake_case")]
pub enum RunConfig {
    /// Generate a regular tiling, or validate a tiling document.
    Tile(TileArgs),
    /// Build the metric graph of a tiling.
    Skeleton(SkeletonArgs),
    /// Random test functions through both Nash inequalities and the lift.
    Nash(NashArgs),
    /// One heat kernel column.
    Heat(HeatArgs),
    /// Fit the Gaussian kernel bound.
    Gauss(GaussArgs),
    /// Full bounds report.
    Report(ReportArgs),
}

impl RunConfig {
    pub fn name(&self) -> &'static str {
        match self {
            RunConfig::Tile(_) => "tile",
            RunConfig::Skeleton(_) => "skeleton",
            RunConfig::Nash(_) => "nash",
            RunConfig::Heat(_) => "heat",
            RunConfig::Gauss(_) => "gauss",
            RunConfig::Report(_) => "report",
        }
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TilingArgs {
    /// Tiling document to load instead of generating a regular tiling.
    #[arg(long = "tiling", visible_alias = "in", value_name = "FILE")]
    pub file: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TilingKind::Square)]
    pub kind: TilingKind,
    /// Side length of the regular tiles.
    #[arg(long, default_value_t = 1.0)]
    pub side: f64,
    /// `N` for the square `[0,N]²`, or `x0,y0,x1,y1`.
    #[arg(long, value_parser = parse_window, default_value = "12")]
    pub window: Rect,
}

fn parse_window(s: &str) -> Result<Rect, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("`{p}`: {e}")))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok(Rect::square(n)),
        [x0, y0, x1, y1] => Ok(Rect::new(x0, y0, x1, y1)),
        _ => Err(format!("expected `N` or `x0,y0,x1,y1`, got {} numbers", parts.len())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    /// Crank–Nicolson.
    Cn,
    /// Lanczos exponential.
    Krylov,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeArgs {
    #[arg(long, value_enum, default_value_t = SchemeKind::Krylov)]
    pub scheme: SchemeKind,
    /// Fixed Crank–Nicolson step; adaptive halving when omitted.
    #[arg(long)]
    pub dt: Option<f64>,
    #[arg(long, default_value_t = 40)]
    pub krylov_dim: usize,
    #[arg(long, default_value_t = 1e-12)]
    pub krylov_tol: f64,
    #[arg(long, value_enum, default_value_t = Truncation::Reflecting)]
    pub truncation: Truncation,
}

impl SchemeArgs {
    fn scheme(&self) -> Scheme {
        match self.scheme {
            SchemeKind::Cn => Scheme::CrankNicolson { dt: self.dt },
            SchemeKind::Krylov => Scheme::Krylov {
                dimension: self.krylov_dim,
                tolerance: self.krylov_tol,
            },
        }
    }

    fn validate(&self, field: &str) -> Result<(), Error> {
        if let Some(dt) = self.dt {
            positive(&format!("{field}.dt"), dt)?;
        }
        if self.krylov_dim < 2 {
            return Err(config(format!("{field}.krylov_dim"), "must be at least 2"));
        }
        positive(&format!("{field}.krylov_tol"), self.krylov_tol)
    }
}

#[derive(Args, Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FormArgs {
    /// Uniform Robin weight `b` at every vertex.
    #[arg(long)]
    pub robin: Option<f64>,
    /// Uniform conductivity `α` on every edge.
    #[arg(long)]
    pub alpha: Option<f64>,
}

impl FormArgs {
    fn form(&self, g: &MetricGraph) -> FormSpec {
        let mut form = FormSpec::plain();
        if let Some(b) = self.robin {
            form = form.with_robin(vec![b; g.vertex_count()]);
        }
        if let Some(a) = self.alpha {
            form = form.with_alpha(Conductivity::Uniform(a));
        }
        form
    }

    fn validate(&self, field: &str) -> Result<(), Error> {
        if let Some(b) = self.robin {
            if !(b >= 0.0 && b.is_finite()) {
                return Err(config(format!("{field}.robin"), format!("weight must be finite and ≥ 0, got {b}")));
            }
        }
        if let Some(a) = self.alpha {
            positive(&format!("{field}.alpha"), a)?;
        }
        Ok(())
    }
}

/// A point on the graph: `vertex:17` or `edge:3:0.25` (edge id and
/// arclength offset from the edge's first end).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum SourceSpec {
    Vertex(usize),
    Edge(usize, f64),
}

impl SourceSpec {
    pub fn resolve(&self, g: &MetricGraph) -> Result<GraphPoint, Error> {
        let p = match *self {
            SourceSpec::Vertex(v) => g.vertex_point(v)?,
            SourceSpec::Edge(e, offset) => GraphPoint::new(e, offset),
        };
        g.check_point(p)?;
        Ok(p)
    }
}

impl FromStr for SourceSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let id = |p: &str| p.parse::<usize>().map_err(|e| format!("`{p}`: {e}"));
        match parts[..] {
            ["vertex", v] => Ok(SourceSpec::Vertex(id(v)?)),
            ["edge", e, offset] => Ok(SourceSpec::Edge(
                id(e)?,
                offset.parse().map_err(|e| format!("`{offset}`: {e}"))?,
            )),
            _ => Err(format!("expected `vertex:ID` or `edge:ID:OFFSET`, got `{s}`")),
        }
    }
}

impl fmt::Display for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSpec::Vertex(v) => write!(f, "vertex:{v}"),
            SourceSpec::Edge(e, offset) => write!(f, "edge:{e}:{offset}"),
        }
    }
}

impl TryFrom<String> for SourceSpec {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<SourceSpec> for String {
    fn from(s: SourceSpec) -> String {
        s.to_string()
    }
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileArgs {
    #[command(flatten)]
    pub tiling: TilingArgs,
    /// Where to write the tiling document.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkeletonArgs {
    /// Tiling document.
    #[arg(long = "in", value_name = "FILE")]
    pub input: PathBuf,
    /// Where to write the graph document.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NashArgs {
    #[command(flatten)]
    pub tiling: TilingArgs,
    /// Mesh size; `l_min/16` when omitted.
    #[arg(long)]
    pub mesh: Option<f64>,
    /// Number of random test functions.
    #[arg(long = "n", default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest support radius in multiples of the shortest edge.
    #[arg(long, default_value_t = 3.0)]
    pub max_radius: f64,
    #[command(flatten)]
    pub form: FormArgs,
    /// Skip the Euler-tour lift.
    #[arg(long)]
    pub no_lift: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Write the first test function as CSV.
    #[arg(long, value_name = "FILE")]
    pub dump_function: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatArgs {
    /// Graph document; the tiling options are used when omitted.
    #[arg(long, value_name = "FILE")]
    pub graph: Option<PathBuf>,
    #[command(flatten)]
    pub tiling: TilingArgs,
    #[arg(long = "t")]
    pub t: f64,
    #[arg(long)]
    pub source: SourceSpec,
    #[arg(long)]
    pub mesh: Option<f64>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[command(flatten)]
    pub form: FormArgs,
    /// Where to write the kernel column as CSV.
    #[arg(long, visible_alias = "dump-function")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussArgs {
    #[command(flatten)]
    pub tiling: TilingArgs,
    #[arg(long)]
    pub mesh: Option<f64>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 0.5, 1.0])]
    pub times: Vec<f64>,
    /// Kernel sources; three points near the window centre when omitted.
    #[arg(long, value_delimiter = ',')]
    pub sources: Vec<SourceSpec>,
    /// Refit on a twice finer mesh and on a 1.5 times larger window.
    #[arg(long)]
    pub stability: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write the samples as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub tiling: TilingArgs,
    #[arg(long)]
    pub mesh: Option<f64>,
    #[command(flatten)]
    pub scheme: SchemeArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Random functions for the Nash checks.
    #[arg(long = "n", default_value_t = 100)]
    pub samples: usize,
    /// Random boundary loops for the extension checks.
    #[arg(long, default_value_t = 100)]
    pub extension_samples: usize,
    /// Times for the ultracontractive check.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.1, 1.0])]
    pub times: Vec<f64>,
    /// Times for the Gaussian fit.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.1, 1.0])]
    pub gauss_times: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values_t = vec![1.0, 2.0, 3.0])]
    pub dilations: Vec<f64>,
    #[command(flatten)]
    pub form: FormArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Where to write `t,bound,estimate,regime` rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Everything a run produces, before anything is written.
#[derive(Debug, Default)]
pub struct Outcome {
    pub result: Value,
    pub text: String,
    pub artifacts: Vec<(PathBuf, Vec<u8>)>,
    /// Names of failed checks.
    pub failures: Vec<String>,
    pub warnings: Vec<String>,
}

fn config(field: impl Into<String>, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn positive(field: &str, value: f64) -> Result<(), Error> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(config(field, format!("must be positive and finite, got {value}")))
    }
}

fn check_times(field: &str, times: &[f64]) -> Result<(), Error> {
    if times.is_empty() {
        return Err(config(field, "needs at least one time"));
    }
    for (i, &t) in times.iter().enumerate() {
        positive(&format!("{field}[{i}]"), t)?;
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(config(field, "times must be nondecreasing"));
    }
    Ok(())
}

fn read(path: &Path) -> Result<String, Error> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl TilingArgs {
    fn validate(&self, field: &str) -> Result<(), Error> {
        if self.file.is_none() {
            positive(&format!("{field}.side"), self.side)?;
            let w = self.window;
            if w.is_empty() || ![w.x0, w.y0, w.x1, w.y1].iter().all(|x| x.is_finite()) {
                return Err(config(format!("{field}.window"), "window must be a nonempty finite rectangle"));
            }
        }
        Ok(())
    }

    fn load(&self) -> Result<Tiling, Error> {
        match &self.file {
            Some(path) => Ok(load_tiling(&read(path)?)?),
            None => Ok(make_regular_tiling(self.kind, self.side, self.window)?),
        }
    }

    /// The same tiling on a window scaled by `factor` about its centre.
    fn grown(&self, factor: f64) -> Option<TilingArgs> {
        if self.file.is_some() {
            return None;
        }
        let w = self.window;
        let c = w.center();
        let (hw, hh) = (0.5 * factor * w.width(), 0.5 * factor * w.height());
        Some(TilingArgs {
            window: Rect::new(c.x - hw, c.y - hh, c.x + hw, c.y + hh),
            ..self.clone()
        })
    }
}

fn mesh_for(g: Arc<MetricGraph>, size: Option<f64>) -> Result<Arc<Mesh>, Error> {
    Ok(match size {
        Some(h) => Mesh::new(g, h)?,
        None => Mesh::with_default_size(g)?,
    })
}

fn validate_mesh(field: &str, size: Option<f64>) -> Result<(), Error> {
    size.map_or(Ok(()), |h| positive(field, h))
}

impl RunConfig {
    /// Checks every field, naming the first offending one.
    pub fn validate(&self) -> Result<(), Error> {
        let name = self.name();
        match self {
            RunConfig::Tile(a) => a.tiling.validate(name),
            RunConfig::Skeleton(_) => Ok(()),
            RunConfig::Nash(a) => {
                a.tiling.validate(name)?;
                validate_mesh("nash.mesh", a.mesh)?;
                if a.samples == 0 {
                    return Err(config("nash.n", "must be at least 1"));
                }
                if !(a.max_radius > 0.6 && a.max_radius.is_finite()) {
                    return Err(config("nash.max_radius", format!("must exceed 0.6, got {}", a.max_radius)));
                }
                a.form.validate(name)
            }
            RunConfig::Heat(a) => {
                if a.graph.is_none() {
                    a.tiling.validate(name)?;
                }
                positive("heat.t", a.t)?;
                validate_mesh("heat.mesh", a.mesh)?;
                a.scheme.validate(name)?;
                a.form.validate(name)
            }
            RunConfig::Gauss(a) => {
                a.tiling.validate(name)?;
                validate_mesh("gauss.mesh", a.mesh)?;
                check_times("gauss.times", &a.times)?;
                a.scheme.validate(name)
            }
            RunConfig::Report(a) => {
                a.tiling.validate(name)?;
                validate_mesh("report.mesh", a.mesh)?;
                check_times("report.times", &a.times)?;
                check_times("report.gauss_times", &a.gauss_times)?;
                for (i, &l) in a.dilations.iter().enumerate() {
                    positive(&format!("report.dilations[{i}]"), l)?;
                }
                if a.samples == 0 {
                    return Err(config("report.n", "must be at least 1"));
                }
                a.scheme.validate(name)?;
                a.form.validate(name)
            }
        }
    }

    /// Runs the subcommand without writing anything.
    pub fn execute(&self) -> Result<Outcome, Error> {
        self.validate()?;
        match self {
            RunConfig::Tile(a) => run_tile(a),
            RunConfig::Skeleton(a) => run_skeleton(a),
            RunConfig::Nash(a) => run_nash(a),
            RunConfig::Heat(a) => run_heat(a),
            RunConfig::Gauss(a) => run_gauss(a),
            RunConfig::Report(a) => run_report(a),
        }
    }
}

/// The JSON document written for a run.
pub fn envelope(config: &RunConfig, result: &Value) -> String {
    let doc = json!({
        "schema_version": RUN_SCHEMA_VERSION,
        "tool": "tileheat",
        "version": env!("CARGO_PKG_VERSION"),
        "config": config,
        "result": result,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("values serialize");
    s.push('\n');
    s
}

fn constants_json(t: &Tiling) -> Value {
    json!({
        "name": t.name,
        "window": t.window,
        "polygons": t.polygons.len(),
        "constants": ReportConstants::new(&t.constants),
    })
}

fn constants_text(t: &Tiling) -> String {
    let c = ReportConstants::new(&t.constants);
    format!(
        "tiling {} ({} polygons)\nh = {:.6}  H = {:.6}  M = {:.6}  l_min = {:.6}\nbeta2 = {:.6} (sharp {:.6})  t* = {:.6}\n",
        t.name,
        t.polygons.len(),
        c.h,
        c.big_h,
        c.m,
        c.l_min,
        c.beta2,
        c.beta2_sharp,
        c.t_star
    )
}

fn run_tile(a: &TileArgs) -> Result<Outcome, Error> {
    let tiling = a.tiling.load()?;
    let mut out = Outcome {
        result: constants_json(&tiling),
        text: constants_text(&tiling),
        ..Default::default()
    };
    if let Some(path) = &a.out {
        out.artifacts.push((path.clone(), (tiling.to_json() + "\n").into_bytes()));
    }
    Ok(out)
}

fn graph_summary(g: &MetricGraph) -> Value {
    json!({
        "vertices": g.vertex_count(),
        "edges": g.edge_count(),
        "boundary_vertices": g.boundary_vertices().count(),
        "max_degree": g.max_degree(),
        "total_length": g.total_length(),
        "min_edge_length": g.min_edge_length(),
        "cell_diameter": g.cell_diameter(),
    })
}

fn run_skeleton(a: &SkeletonArgs) -> Result<Outcome, Error> {
    let tiling = load_tiling(&read(&a.input)?)?;
    let g = build_skeleton(&tiling)?;
    let text = format!(
        "{} vertices ({} on the rim), {} edges, total length {:.6}, max degree {}\n",
        g.vertex_count(),
        g.boundary_vertices().count(),
        g.edge_count(),
        g.total_length(),
        g.max_degree()
    );
    let mut out = Outcome {
        result: graph_summary(&g),
        text,
        ..Default::default()
    };
    if let Some(path) = &a.out {
        out.artifacts.push((path.clone(), (g.to_json() + "\n").into_bytes()));
    }
    Ok(out)
}

fn csv_bytes(f: &crate::functions::GraphFunction) -> Vec<u8> {
    let mut buf = Vec::new();
    f.write_csv(&mut buf).expect("writing to memory");
    buf
}

fn run_nash(a: &NashArgs) -> Result<Outcome, Error> {
    let tiling = a.tiling.load()?;
    let g = Arc::new(build_skeleton(&tiling)?);
    let mesh = mesh_for(Arc::clone(&g), a.mesh)?;
    let options = NashSuiteOptions {
        samples: a.samples,
        seed: a.seed,
        max_radius: a.max_radius,
        form: a.form.form(&g),
        lift: !a.no_lift,
        keep_records: true,
    };
    let summary = nash_suite_for(&mesh, &tiling.constants, &options)?;
    let mut out = Outcome::default();
    for s in summary.records.iter().filter(|s| !s.pass) {
        out.failures.push(format!("nash sample {}", s.index));
    }
    let max_lift = summary.records.iter().filter_map(|s| s.lift_ratio).fold(0.0, f64::max);
    let _ = write!(out.text, "{}", constants_text(&tiling));
    let _ = writeln!(
        out.text,
        "{} samples, {} passed, {} degenerate\nmax 1D ratio {:.6e} (beta1 = {})\nmax 2D ratio {:.6e} (beta2 = {:.6})",
        summary.samples, summary.passed, summary.degenerate, summary.max_ratio1, summary.beta1, summary.max_ratio2, summary.beta2
    );
    if options.lift {
        let _ = writeln!(out.text, "max lifted ratio {max_lift:.6e} (bound {NASH1_LIFT_CONSTANT})");
    }
    if let Some(path) = &a.dump_function {
        let centers = nash_centers(&g, &options);
        let (_, _, f) = nash_sample_function(&mesh, &centers, &options, 0)?;
        out.artifacts.push((path.clone(), csv_bytes(&f)));
    }
    out.result = json!({
        "tiling": constants_json(&tiling),
        "mesh_size": mesh.mesh_size(),
        "summary": summary,
    });
    Ok(out)
}

fn laplacian(mesh: &Arc<Mesh>, form: &FormArgs, scheme: &SchemeArgs) -> Result<DiscreteLaplacian, Error> {
    let options = AssemblyOptions {
        truncation: scheme.truncation,
        ..AssemblyOptions::reflecting()
    }
    .with_form(form.form(mesh.graph()));
    Ok(assemble(mesh, &options)?)
}

fn run_heat(a: &HeatArgs) -> Result<Outcome, Error> {
    let g = match &a.graph {
        Some(path) => MetricGraph::from_json(&read(path)?)?,
        None => build_skeleton(&a.tiling.load()?)?,
    };
    let g = Arc::new(g);
    let source = a.source.resolve(&g).map_err(|e| config("heat.source", e.to_string()))?;
    let mesh = mesh_for(Arc::clone(&g), a.mesh)?;
    let l = laplacian(&mesh, &a.form, &a.scheme)?;
    let column = heat_kernel_column(&l, source, a.t, &a.scheme.scheme())?;
    let f = &column.state.function;
    let mass = l.mass_of(f.values());
    let mut out = Outcome {
        warnings: column.warnings.clone(),
        ..Default::default()
    };
    let _ = writeln!(
        out.text,
        "k(t, x, x) = {:.9e} at t = {} from {}\nmass {:.12}  max {:.6e}  min {:.6e}\n{} steps with {}",
        column.diagonal(),
        a.t,
        a.source,
        mass,
        f.max(),
        f.min(),
        column.state.provenance.steps,
        column.state.provenance.scheme.name()
    );
    out.result = json!({
        "t": a.t,
        "source": source,
        "source_dof": column.source_dof,
        "diagonal": column.diagonal(),
        "mass": mass,
        "max": f.max(),
        "min": f.min(),
        "mesh_size": mesh.mesh_size(),
        "provenance": column.state.provenance,
        "error_estimate": column.state.error_estimate,
        "warnings": column.warnings,
    });
    if let Some(path) = &a.out {
        out.artifacts.push((path.clone(), csv_bytes(f)));
    }
    Ok(out)
}

struct GaussRun {
    graph: Arc<MetricGraph>,
    mesh_size: f64,
    report: GaussianReport,
}

fn gauss_run(
    tiling: &Tiling,
    mesh: Option<f64>,
    scheme: &SchemeArgs,
    form: &FormArgs,
    sources: &[crate::geometry::Point],
    times: &[f64],
) -> Result<GaussRun, Error> {
    let g = Arc::new(build_skeleton(tiling)?);
    let mesh = mesh_for(Arc::clone(&g), mesh)?;
    let l = laplacian(&mesh, form, scheme)?;
    let points: Vec<GraphPoint> = sources.iter().map(|&p| g.locate(p)).collect::<Result<_, _>>()?;
    let report = gaussian_check(&l, &points, None, times, &scheme.scheme())?;
    Ok(GaussRun {
        mesh_size: mesh.mesh_size(),
        graph: g,
        report,
    })
}

fn gauss_sources(tiling: &Tiling, g: &MetricGraph, given: &[SourceSpec], field: &str) -> Result<Vec<crate::geometry::Point>, Error> {
    let points = if given.is_empty() {
        core_sources(g, tiling.window.center())
    } else {
        given
            .iter()
            .enumerate()
            .map(|(i, s)| s.resolve(g).map_err(|e| config(format!("{field}[{i}]"), e.to_string())))
            .collect::<Result<_, _>>()?
    };
    Ok(points.into_iter().map(|p| g.position(p)).collect())
}

fn gauss_csv(report: &GaussianReport) -> Vec<u8> {
    let mut s = String::from("source_edge,source_offset,target_edge,target_offset,t,distance,kernel,shape,eta\n");
    for x in &report.samples {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            x.source.edge, x.source.offset, x.target.edge, x.target.offset, x.t, x.distance, x.kernel, x.shape, x.eta
        );
    }
    s.into_bytes()
}

fn run_gauss(a: &GaussArgs) -> Result<Outcome, Error> {
    let tiling = a.tiling.load()?;
    let g = build_skeleton(&tiling)?;
    let sources = gauss_sources(&tiling, &g, &a.sources, "gauss.sources")?;
    let base = gauss_run(&tiling, a.mesh, &a.scheme, &FormArgs::default(), &sources, &a.times)?;
    let mut checks = vec![
        CheckRecord::with_tolerance("gauss_positivity", -base.report.min_relative_kernel, POSITIVITY_FLOOR, 0.0),
    ];
    let mut stability = json!(null);
    if a.stability {
        let refined = gauss_run(&tiling, Some(0.5 * base.mesh_size), &a.scheme, &FormArgs::default(), &sources, &a.times)?;
        checks.push(stability_record("gauss_eta_refine", base.report.eta, refined.report.eta));
        let mut grown_eta = None;
        if let Some(args) = a.tiling.grown(1.5) {
            let grown = gauss_run(&args.load()?, Some(base.mesh_size), &a.scheme, &FormArgs::default(), &sources, &a.times)?;
            checks.push(stability_record("gauss_eta_window", base.report.eta, grown.report.eta));
            grown_eta = Some(grown.report.eta);
        }
        stability = json!({ "refined_eta": refined.report.eta, "grown_eta": grown_eta });
    }
    let mut out = Outcome {
        warnings: base.report.warnings.clone(),
        ..Default::default()
    };
    out.failures = checks.iter().filter(|c| !c.pass).map(|c| c.name.clone()).collect();
    let _ = writeln!(
        out.text,
        "eta = {:.6} over {} samples ({} source/time pairs excluded)\nmin k / max k = {:.3e}",
        base.report.eta,
        base.report.samples.len(),
        base.report.excluded.len(),
        base.report.min_relative_kernel
    );
    for c in &checks {
        let _ = writeln!(out.text, "{}: {}", c.name, if c.pass { "pass" } else { "FAIL" });
    }
    if let Some(path) = &a.csv {
        out.artifacts.push((path.clone(), gauss_csv(&base.report)));
    }
    out.result = json!({
        "tiling": constants_json(&tiling),
        "graph": graph_summary(&base.graph),
        "mesh_size": base.mesh_size,
        "eta": base.report.eta,
        "checks": checks,
        "stability": stability,
        "report": base.report,
    });
    Ok(out)
}

fn stability_record(name: &str, base: f64, other: f64) -> CheckRecord {
    let mut r = CheckRecord::with_tolerance(name, (other / base - 1.0).abs(), 0.1, 0.0);
    r.pass = eta_stable(base, other);
    r.metadata = json!({ "base_eta": base, "eta": other });
    r
}

/// The full bounds report for one tiling.
pub fn build_report(a: &ReportArgs) -> Result<(BoundsReport, String, Vec<String>), Error> {
    let tiling = a.tiling.load()?;
    let g = Arc::new(build_skeleton(&tiling)?);
    let mesh = mesh_for(Arc::clone(&g), a.mesh)?;
    let form = a.form.form(&g);
    let mut report = BoundsReport::new(&tiling.name, &tiling.constants);
    let mut warnings = Vec::new();

    let nash = nash_suite_for(
        &mesh,
        &tiling.constants,
        &NashSuiteOptions {
            samples: a.samples,
            seed: a.seed,
            form: form.clone(),
            keep_records: true,
            ..Default::default()
        },
    )?;
    let meta = json!({ "samples": nash.samples, "degenerate": nash.degenerate, "failures": nash.failures });
    let nash1_failed = nash.records.iter().any(|s| !s.ratio1.passes());
    let nash2_failed = nash.records.iter().any(|s| !s.ratio2.passes());
    let mut r1 = CheckRecord::with_tolerance("nash1", nash.max_ratio1, 1.0, 0.0).with_metadata(meta.clone());
    r1.pass &= !nash1_failed;
    let mut r2 = CheckRecord::with_tolerance("nash2", nash.max_ratio2, 1.0, 0.0).with_metadata(meta);
    r2.pass &= !nash2_failed;
    report.push(r1);
    report.push(r2);
    let max_lift = nash.records.iter().filter_map(|s| s.lift_ratio).fold(0.0, f64::max);
    let mut lift = CheckRecord::with_tolerance("nash1_lift", max_lift, NASH1_LIFT_CONSTANT, 0.0);
    lift.pass &= nash.records.iter().all(|s| s.lift_pass);
    report.push(lift);

    let ext = extension_suite_on(&tiling.name, &tiling.polygons, a.extension_samples, a.seed)?;
    let meta = json!({ "samples": ext.samples, "degenerate": ext.degenerate, "failures": ext.failures });
    for (i, name) in ["extension_ineq1", "extension_ineq2", "extension_ineq3"].iter().enumerate() {
        let mut r =
            CheckRecord::with_tolerance(*name, ext.max_ratios[i], 1.0, ROUNDING_SLACK).with_metadata(meta.clone());
        r.pass &= ext.pass();
        report.push(r);
    }
    report.push(CheckRecord::with_tolerance("extension_l1_identity", ext.max_l1_identity_error, 1e-10, 0.0));

    let l = assemble(&mesh, &AssemblyOptions::reflecting().with_form(form))?;
    let scheme = a.scheme.scheme();
    let sources = core_sources(&g, tiling.window.center());
    let beta = beta2(&tiling.constants).value;
    let ultra = ultracontractive_check(&l, &a.times, &sources, beta, &scheme)?;
    for r in &ultra.records {
        warnings.extend(r.warnings.iter().cloned());
        if r.truncation_limited {
            report.notes.push(format!("t = {}: truncation-limited, the window is too small for this time", r.t));
            continue;
        }
        let rec = CheckRecord::with_tolerance(format!("ultra_t={}", r.t), r.estimate, r.bound, ULTRA_ALLOWANCE)
            .with_metadata(json!({ "regime": r.regime, "argmax": r.argmax, "sources_used": r.sources_used }));
        report.push(rec);
    }
    report
        .notes
        .push(format!("regime boundary t* = beta^2/3 = {}", ultra.t_star));
    match ultra.observed_crossover {
        Some(t) => report.notes.push(format!("observed crossover of the decay rates near t = {t:.6}")),
        None => report.notes.push("no crossover observed over the sampled times".to_string()),
    }
    report.notes.push(ultra.reduction.clone());

    match gaussian_check(&l, &sources, None, &a.gauss_times, &scheme) {
        Ok(gauss) => {
            warnings.extend(gauss.warnings.iter().cloned());
            report.eta = Some(gauss.eta);
            report.push(
                CheckRecord::with_tolerance("gauss_positivity", -gauss.min_relative_kernel, POSITIVITY_FLOOR, 0.0)
                    .with_metadata(json!({ "samples": gauss.samples.len(), "excluded": gauss.excluded.len() })),
            );
        }
        Err(crate::bounds::BoundsError::NoGaussianSamples) => {
            report.notes.push("Gaussian fit skipped: no source clears the window rim at the requested times".into());
        }
        Err(e) => return Err(e.into()),
    }

    for row in transition_report(&tiling, &a.dilations) {
        let mut r = CheckRecord::with_tolerance(format!("transition_lambda={}", row.lambda), row.ratio, row.lambda * row.lambda, 1e-12);
        r.pass = row.pass;
        r.metadata = json!({ "beta2": row.beta2, "t_star": row.t_star });
        report.push(r);
    }
    warnings.dedup();
    Ok((report, ultra_csv(&ultra), warnings))
}

fn run_report(a: &ReportArgs) -> Result<Outcome, Error> {
    let (report, csv, warnings) = build_report(a)?;
    let mut out = Outcome {
        text: report.to_table(),
        failures: report.failures().map(|c| c.name.clone()).collect(),
        warnings,
        result: serde_json::to_value(&report).expect("report serializes"),
        ..Default::default()
    };
    if let Some(path) = &a.csv {
        out.artifacts.push((path.clone(), csv.into_bytes()));
    }
    Ok(out)
}

/// Writes every artifact through a temporary file in its target
/// directory; nothing is renamed into place unless all were staged.
pub fn write_artifacts(artifacts: &[(PathBuf, Vec<u8>)]) -> Result<(), Error> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| Error::Io { path, source }
    };
    let mut staged = Vec::with_capacity(artifacts.len());
    for (path, bytes) in artifacts {
        let dir = match path.parent() {
            Some(d) if !d.as_os_str().is_empty() => d,
            _ => Path::new("."),
        };
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io(path))?;
        tmp.write_all(bytes).map_err(io(path))?;
        tmp.flush().map_err(io(path))?;
        staged.push((tmp, path));
    }
    for (tmp, path) in staged {
        tmp.persist(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e.error,
        })?;
    }
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig, Error> {
    let doc: Value = serde_json::from_str(&read(path)?).map_err(|e| config("config", e.to_string()))?;
    let inner = doc.get("config").cloned().unwrap_or(doc);
    serde_json::from_value(inner).map_err(|e| config("config", e.to_string()))
}

/// Parses `args`, runs the command and reports on the given streams.
/// Returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_ERROR } else { EXIT_OK };
            let rendered = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(rendered.as_bytes())
            } else {
                stdout.write_all(rendered.as_bytes())
            };
            return code;
        }
    };
    match run_cli(&cli, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            EXIT_ERROR
        }
    }
}

fn run_cli(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<u8, Error> {
    let config = match (&cli.config, &cli.command) {
        (Some(path), None) => load_config(path)?,
        (None, Some(c)) => c.clone(),
        (Some(_), Some(_)) => return Err(self::config("config", "give either --config or a subcommand, not both")),
        (None, None) => return Err(self::config("subcommand", "missing; see --help")),
    };
    let mut outcome = config.execute()?;
    let doc = envelope(&config, &outcome.result);
    let json_out = match &config {
        RunConfig::Nash(a) => a.out.clone(),
        RunConfig::Gauss(a) => a.out.clone(),
        RunConfig::Report(a) => a.out.clone(),
        _ => None,
    };
    if let Some(path) = json_out {
        outcome.artifacts.push((path, doc.clone().into_bytes()));
    }
    write_artifacts(&outcome.artifacts)?;
    let io = |source| Error::Io {
        path: PathBuf::from("<stdout>"),
        source,
    };
    if cli.json {
        stdout.write_all(doc.as_bytes()).map_err(io)?;
    } else {
        stdout.write_all(outcome.text.as_bytes()).map_err(io)?;
    }
    for w in &outcome.warnings {
        let _ = writeln!(stderr, "warning: {w}");
    }
    if outcome.failures.is_empty() {
        Ok(EXIT_OK)
    } else {
        let _ = writeln!(stderr, "failed checks: {}", outcome.failures.join(", "));
        Ok(EXIT_CHECK_FAILED)
    }
}

/// Sizes the global thread pool from [`THREADS_ENV`] when set.
pub fn init_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| config(THREADS_ENV, format!("expected a positive integer, got `{value}`")))?;
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}
