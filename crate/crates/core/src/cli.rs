//! Command line front end: geometry configs, commands, CSV output and run manifests.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bgg::{
    bgg_residual_k1, bgg_residual_k2, bgg_residual_skew, normality_check, prolong_k1, prolong_k2, DensitySolution,
    TractorFamily, WeightedOneForm,
};
use crate::cone::{cone_geodesic, ConePoint, ConeTangent};
use crate::curves::{Circle, Segment, SmoothPath};
use crate::error::{Error, Result};
use crate::expr::{parse, ScalarFieldExpr};
use crate::geometry::{registry, ChartGeometry, Domain};
use crate::model::{census, g_type, ModelFamily, ModelTensor};
use crate::normal_frame::{build_normal_frame, standard_basis, ConstantFrameField, NormalFrameData};
use crate::strat::{completeness_profile, scale_geometry_check, stratify, Grid, ProfileOptions, StratInput, StratOptions};
use crate::tractor::{tractor_transport, TractorField, TractorValue};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub n: usize,
    #[serde(default)]
    pub domain: Option<DomainConfig>,
    pub connection: ConnectionConfig,
    #[serde(default)]
    pub tractors: Vec<TractorConfig>,
    #[serde(default)]
    pub model: Option<ModelConfig>,
    #[serde(default)]
    pub frame: Option<FrameConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    #[serde(default, rename = "box")]
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub ball: Option<BallConfig>,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BallConfig {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ConnectionConfig {
    Registry { name: String },
    Christoffel { entries: BTreeMap<String, String> },
    Metric { entries: BTreeMap<String, String> },
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TractorConfig {
    #[serde(default)]
    pub name: Option<String>,
    pub family: String,
    pub source: String,
    pub payload: Value,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub family: String,
    pub components: Vec<f64>,
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FrameConfig {
    #[serde(default)]
    pub base: Option<Vec<f64>>,
    #[serde(default)]
    pub basis: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub rho0: Option<f64>,
}

/// A named parallel tractor (or pair) built from a config block.
pub struct TractorSpec {
    pub name: String,
    pub family: ModelFamily,
    pub sigma: Option<Vec<String>>,
    pub input: StratInput,
}

pub struct Loaded {
    pub config: GeometryConfig,
    pub geom: Arc<ChartGeometry>,
    pub tractors: Vec<TractorSpec>,
    pub model: Option<ModelTensor>,
}

fn parse_indices(key: &str, count: usize, n: usize, path: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = key.split(',').map(str::trim).collect();
    if parts.len() != count {
        return Err(Error::Validation(format!("{path}[\"{key}\"]: expected {count} comma-separated indices")));
    }
    parts
        .iter()
        .map(|p| match p.parse::<usize>() {
            Ok(i) if (1..=n).contains(&i) => Ok(i - 1),
            _ => Err(Error::Validation(format!("{path}[\"{key}\"]: index '{p}' must be in 1..={n}"))),
        })
        .collect()
}

fn parse_entry(text: &str, n: usize, path: &str, key: &str) -> Result<ScalarFieldExpr> {
    parse(text, n).map_err(|e| Error::Validation(format!("{path}[\"{key}\"]: {e}")))
}

/// Fills symmetric partners of `(…, a, b)` entries; conflicts are left for the
/// geometry constructors to reject.
fn symmetric_fill(
    entries: &BTreeMap<String, String>,
    n: usize,
    count: usize,
    path: &str,
) -> Result<Vec<ScalarFieldExpr>> {
    let size = n.pow(count as u32);
    let mut out: Vec<Option<ScalarFieldExpr>> = vec![None; size];
    let flat = |idx: &[usize]| idx.iter().fold(0, |acc, i| acc * n + i);
    for (key, text) in entries {
        let idx = parse_indices(key, count, n, path)?;
        let expr = parse_entry(text, n, path, key)?;
        let mut swapped = idx.clone();
        swapped.swap(count - 2, count - 1);
        let (i, j) = (flat(&idx), flat(&swapped));
        out[i] = Some(expr.clone());
        if out[j].is_none() && !entries.keys().any(|k| parse_indices(k, count, n, path).ok().as_deref() == Some(&swapped[..])) {
            out[j] = Some(expr);
        }
    }
    Ok(out.into_iter().map(|e| e.unwrap_or_else(|| ScalarFieldExpr::constant(0.0, n))).collect())
}

fn expect_str(v: &Value, path: &str) -> Result<String> {
    v.as_str().map(str::to_string).ok_or_else(|| Error::Validation(format!("{path}: expected a string")))
}

fn expect_numbers(v: &Value, path: &str) -> Result<Vec<f64>> {
    v.as_array()
        .ok_or_else(|| Error::Validation(format!("{path}: expected an array of numbers")))?
        .iter()
        .enumerate()
        .map(|(i, x)| x.as_f64().ok_or_else(|| Error::Validation(format!("{path}[{i}]: expected a number"))))
        .collect()
}

pub fn load_geometry(text: &str) -> Result<GeometryConfig> {
    serde_json::from_str(text).map_err(|e| Error::Validation(format!("config: {e}")))
}

fn build_domain(cfg: &GeometryConfig, default: Domain) -> Result<Domain> {
    let n = cfg.n;
    match &cfg.domain {
        None => Ok(default),
        Some(DomainConfig { bounds: Some(b), ball: None }) => {
            if b.len() != n || b.iter().any(|[lo, hi]| lo >= hi) {
                return Err(Error::Validation(format!("domain.box: expected {n} intervals [lo, hi] with lo < hi")));
            }
            Ok(Domain::Box { lo: b.iter().map(|p| p[0]).collect(), hi: b.iter().map(|p| p[1]).collect() })
        }
        Some(DomainConfig { bounds: None, ball: Some(ball) }) => {
            if ball.center.len() != n || ball.radius <= 0.0 {
                return Err(Error::Validation(format!("domain.ball: expected a center in R^{n} and a positive radius")));
            }
            Ok(Domain::Ball { center: ball.center.clone(), radius: ball.radius })
        }
        _ => Err(Error::Validation("domain: give exactly one of 'box' or 'ball'".into())),
    }
}

pub fn build_geometry(cfg: &GeometryConfig) -> Result<ChartGeometry> {
    let n = cfg.n;
    if n < 2 {
        return Err(Error::Validation("n: chart dimension must be at least 2".into()));
    }
    match &cfg.connection {
        ConnectionConfig::Registry { name } => {
            let mut g = registry(name, n)?;
            g.domain = build_domain(cfg, g.domain.clone())?;
            Ok(g)
        }
        ConnectionConfig::Christoffel { entries } => {
            let gamma = symmetric_fill(entries, n, 3, "connection.entries")?;
            ChartGeometry::explicit("config", n, build_domain(cfg, Domain::cube(n, 1.0))?, gamma)
        }
        ConnectionConfig::Metric { entries } => {
            let g = symmetric_fill(entries, n, 2, "connection.entries")?;
            ChartGeometry::levi_civita("config", n, build_domain(cfg, Domain::cube(n, 1.0))?, g)
        }
    }
}

fn tractor_family(family: &str, path: &str) -> Result<ModelFamily> {
    let f = ModelFamily::parse(family).map_err(|e| Error::Validation(format!("{path}.family: {e}")))?;
    match f {
        ModelFamily::SymK(_) => Err(Error::UnsupportedFamily(format!("{path}.family: {family} has no tractor source"))),
        _ => Ok(f),
    }
}

fn single(f: ModelFamily) -> TractorFamily {
    match f {
        ModelFamily::Covector => TractorFamily::Covector,
        ModelFamily::Sym2 => TractorFamily::Sym2,
        _ => TractorFamily::Skew2,
    }
}

/// Builds the configured tractors; the normal frame is built only when a block
/// gives constant components.
pub fn build_tractors(
    cfg: &GeometryConfig,
    geom: &Arc<ChartGeometry>,
    frame: &mut dyn FnMut() -> Result<Arc<NormalFrameData>>,
) -> Result<Vec<TractorSpec>> {
    let n = cfg.n;
    let mut out = Vec::new();
    for (i, t) in cfg.tractors.iter().enumerate() {
        let path = format!("tractors[{i}]");
        let family = tractor_family(&t.family, &path)?;
        let name = t.name.clone().unwrap_or_else(|| format!("t{i}"));
        let payload = |key: &str| t.payload.get(key).ok_or_else(|| Error::Validation(format!("{path}.payload.{key}: missing")));
        let (input, sigma) = match (t.source.as_str(), family) {
            ("prolong-k1", ModelFamily::Covector) => {
                let s = expect_str(payload("sigma")?, &format!("{path}.payload.sigma"))?;
                let f = prolong_k1(geom, DensitySolution::parse(&s, n, 1.0)?)?;
                (StratInput::Single(Arc::new(f), TractorFamily::Covector), vec![s])
            }
            ("prolong-k1", ModelFamily::PairCovectors) => {
                let arr = payload("sigma")?
                    .as_array()
                    .filter(|a| a.len() == 2)
                    .ok_or_else(|| Error::Validation(format!("{path}.payload.sigma: expected two expressions")))?;
                let s1 = expect_str(&arr[0], &format!("{path}.payload.sigma[0]"))?;
                let s2 = expect_str(&arr[1], &format!("{path}.payload.sigma[1]"))?;
                let f1 = prolong_k1(geom, DensitySolution::parse(&s1, n, 1.0)?)?;
                let f2 = prolong_k1(geom, DensitySolution::parse(&s2, n, 1.0)?)?;
                (StratInput::Pair(Arc::new(f1), Arc::new(f2)), vec![s1, s2])
            }
            ("prolong-k2", ModelFamily::Sym2) => {
                let s = expect_str(payload("sigma")?, &format!("{path}.payload.sigma"))?;
                let f = prolong_k2(geom, DensitySolution::parse(&s, n, 2.0)?)?;
                (StratInput::Single(Arc::new(f), TractorFamily::Sym2), vec![s])
            }
            ("constants", fam) => {
                let comps = expect_numbers(payload("components")?, &format!("{path}.payload.components"))?;
                let m = n + 1;
                let nf = frame()?;
                let (proj, defect) = ModelTensor::projected(fam, m, comps)?;
                if defect != 0.0 {
                    return Err(Error::Validation(format!("{path}.payload.components: violates the {} symmetry", t.family)));
                }
                let input = match fam {
                    ModelFamily::PairCovectors => StratInput::Pair(
                        Arc::new(ConstantFrameField::new(nf.clone(), 1, proj.comp[..m].to_vec())?),
                        Arc::new(ConstantFrameField::new(nf, 1, proj.comp[m..].to_vec())?),
                    ),
                    ModelFamily::Covector => StratInput::Single(Arc::new(ConstantFrameField::new(nf, 1, proj.comp)?), TractorFamily::Covector),
                    f => StratInput::Single(Arc::new(ConstantFrameField::new(nf, 2, proj.comp)?), single(f)),
                };
                (input, Vec::new())
            }
            (src, _) => {
                return Err(Error::Validation(format!("{path}.source: '{src}' does not apply to family '{}'", t.family)));
            }
        };
        out.push(TractorSpec { name, family, sigma: if sigma.is_empty() { None } else { Some(sigma) }, input });
    }
    Ok(out)
}

pub fn build_model(cfg: &GeometryConfig) -> Result<Option<ModelTensor>> {
    match &cfg.model {
        None => Ok(None),
        Some(m) => {
            let fam = ModelFamily::parse(&m.family)?;
            Ok(Some(ModelTensor::new(fam, cfg.n + 1, m.components.clone()).map_err(|e| Error::Validation(format!("model: {e}")))?))
        }
    }
}

pub fn frame_builder(cfg: &GeometryConfig, geom: &Arc<ChartGeometry>, h: f64) -> impl FnMut() -> Result<Arc<NormalFrameData>> {
    let fc = cfg.frame.clone().unwrap_or_default();
    let geom = geom.clone();
    let mut cached: Option<Arc<NormalFrameData>> = None;
    move || {
        if let Some(nf) = &cached {
            return Ok(nf.clone());
        }
        let n = geom.n;
        let base = fc.base.clone().unwrap_or_else(|| geom.domain.center());
        let basis = fc.basis.clone().unwrap_or_else(|| standard_basis(n));
        let nf = Arc::new(build_normal_frame(geom.clone(), &base, &basis, fc.rho0.unwrap_or(1.0), h)?);
        cached = Some(nf.clone());
        Ok(nf)
    }
}

pub fn load(text: &str, h: f64) -> Result<Loaded> {
    let config = load_geometry(text)?;
    let geom = Arc::new(build_geometry(&config)?);
    let mut frame = frame_builder(&config, &geom, h);
    let tractors = build_tractors(&config, &geom, &mut frame)?;
    let model = build_model(&config)?;
    Ok(Loaded { config, geom, tractors, model })
}

#[derive(Parser, Debug)]
#[command(name = "projtractor", version, about = "Projective tractor calculus on coordinate charts")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Geometry config (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// RK4 step.
    #[arg(long, global = true, default_value_t = 1e-3)]
    pub step: f64,
    /// Zero band.
    #[arg(long, global = true, default_value_t = 1e-9)]
    pub band: f64,
    /// Normality tolerance.
    #[arg(long, global = true, default_value_t = 1e-6)]
    pub tol: f64,
    /// Seed for random probe points.
    #[arg(long, global = true, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, global = true, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Subcommand, Debug, Clone)]
pub enum Command {
    /// Riemann, Ricci, Schouten and ∇P at points.
    Curvature(PointArgs),
    /// Affine geodesic of the chart connection.
    Geodesic {
        #[arg(long)]
        at: String,
        #[arg(long)]
        dir: String,
        #[arg(long, default_value_t = 1.0)]
        span: f64,
    },
    /// Parallel transport of a cotractor along a segment.
    Transport {
        #[arg(long)]
        at: String,
        #[arg(long)]
        to: String,
        /// Components of a rank-1 cotractor.
        #[arg(long)]
        tractor: String,
        #[arg(long, default_value_t = 10)]
        samples: usize,
    },
    /// Geodesic of the cone connection.
    ConeGeodesic {
        #[arg(long)]
        at: String,
        #[arg(long, default_value_t = 1.0)]
        rho: f64,
        #[arg(long)]
        dir: String,
        #[arg(long, default_value_t = 0.0)]
        vdir: f64,
        #[arg(long, default_value_t = 1.0)]
        span: f64,
    },
    /// Generalised homogeneous coordinates from the normal frame.
    HomCoords(PointArgs),
    /// Residuals of the first BGG operators.
    Bgg {
        /// Only `check` is available.
        action: String,
        #[arg(long)]
        op: String,
        #[arg(long)]
        sigma: Option<String>,
        /// One-form components separated by ';'.
        #[arg(long)]
        k: Option<String>,
        #[command(flatten)]
        points: PointArgs,
    },
    /// Prolongation to a tractor with its parallelism certificate.
    Prolong {
        #[arg(long)]
        op: String,
        #[arg(long)]
        sigma: String,
        #[command(flatten)]
        points: PointArgs,
    },
    /// Classification of the constant model tensor.
    Model {
        /// Only `classify` is available.
        action: String,
        #[arg(long, default_value_t = 10000)]
        samples: usize,
    },
    /// Stratification by the labels of a parallel tractor.
    Stratify {
        #[arg(long)]
        tractor: Option<String>,
        /// `N` or `N:lo:hi` (square grid).
        #[arg(long, default_value = "41")]
        grid: String,
    },
    /// Schouten tensor of a scale and the Einstein comparison.
    EinsteinCheck {
        #[arg(long)]
        sigma: String,
        #[arg(long, default_value_t = 2.0)]
        weight: f64,
        #[command(flatten)]
        points: PointArgs,
    },
    /// Affine parameter of the scale connection along a geodesic.
    Complete {
        #[arg(long)]
        sigma: String,
        #[arg(long, default_value_t = 2.0)]
        weight: f64,
        #[arg(long)]
        at: String,
        #[arg(long)]
        dir: String,
        #[arg(long, default_value_t = 10.0)]
        s_max: f64,
        /// Parameter values to land on, comma separated.
        #[arg(long)]
        targets: Option<String>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct PointArgs {
    /// Evaluation point, comma separated; random points are drawn otherwise.
    #[arg(long)]
    pub at: Option<String>,
    #[arg(long, default_value_t = 5)]
    pub samples: usize,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Curvature(_) => "curvature",
            Command::Geodesic { .. } => "geodesic",
            Command::Transport { .. } => "transport",
            Command::ConeGeodesic { .. } => "cone-geodesic",
            Command::HomCoords(_) => "hom-coords",
            Command::Bgg { .. } => "bgg",
            Command::Prolong { .. } => "prolong",
            Command::Model { .. } => "model",
            Command::Stratify { .. } => "stratify",
            Command::EinsteinCheck { .. } => "einstein-check",
            Command::Complete { .. } => "complete",
        }
    }
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub arguments: Vec<String>,
    pub config_hash: String,
    pub tool_version: String,
    pub tolerances: BTreeMap<String, f64>,
    pub seed: u64,
    pub outputs: Vec<String>,
}

pub fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

fn row(vals: &[f64]) -> String {
    vals.iter().map(|v| fmt_f(*v)).collect::<Vec<_>>().join(",")
}

fn parse_vec(s: &str, n: usize, what: &str) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Validation(format!("--{what}: '{p}' is not a number"))))
        .collect::<Result<_>>()?;
    if n > 0 && v.len() != n {
        return Err(Error::Validation(format!("--{what}: expected {n} numbers, got {}", v.len())));
    }
    Ok(v)
}

fn coord_header(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

struct Output {
    dir: PathBuf,
    files: Vec<String>,
}

impl Output {
    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        std::fs::create_dir_all(&self.dir).map_err(|e| Error::Validation(format!("--out-dir: {e}")))?;
        std::fs::write(self.dir.join(name), content).map_err(|e| Error::Validation(format!("{name}: {e}")))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn csv(&mut self, name: &str, header: &[String], rows: &[String]) -> Result<()> {
        let mut s = header.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        self.write(name, &s)
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> Result<()> {
        let mut s = serde_json::to_string_pretty(v).map_err(|e| Error::Numerical(e.to_string()))?;
        s.push('\n');
        self.write(name, &s)
    }
}

fn points(geom: &ChartGeometry, p: &PointArgs, seed: u64) -> Result<Vec<Vec<f64>>> {
    match &p.at {
        Some(s) => Ok(vec![parse_vec(s, geom.n, "at")?]),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = geom.domain.shrunk(0.8);
            Ok((0..p.samples).map(|_| d.sample(&mut rng)).collect())
        }
    }
}

fn idx_names(prefix: &str, n: usize, k: usize, base: usize) -> Vec<String> {
    (0..n.pow(k as u32))
        .map(|mut i| {
            let mut d = vec![0; k];
            for s in (0..k).rev() {
                d[s] = i % n + base;
                i /= n;
            }
            format!("{prefix}_{}", d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("_"))
        })
        .collect()
}

fn default_curves(geom: &ChartGeometry) -> Vec<Box<dyn SmoothPath>> {
    let n = geom.n;
    let c = geom.domain.center();
    let r = 0.25 * geom.domain.diameter() / (n as f64).sqrt().max(1.0);
    let a: Vec<f64> = c.iter().map(|v| v - r).collect();
    let b: Vec<f64> = c.iter().map(|v| v + r).collect();
    vec![Box::new(Segment::new(&a, &b)), Box::new(Circle { center: c, radius: r, axes: (0, 1) })]
}

fn select_tractor<'a>(loaded: &'a Loaded, name: &Option<String>) -> Result<&'a TractorSpec> {
    match name {
        Some(nm) => loaded
            .tractors
            .iter()
            .find(|t| &t.name == nm)
            .ok_or_else(|| Error::Validation(format!("--tractor: no tractor named '{nm}' in the config"))),
        None => loaded.tractors.first().ok_or_else(|| Error::Validation("tractors: the config defines no tractor".into())),
    }
}

fn parse_grid(spec: &str, geom: &ChartGeometry) -> Result<Grid> {
    let n = geom.n;
    let parts: Vec<&str> = spec.split(':').collect();
    let count: usize = parts[0].trim().parse().map_err(|_| Error::Validation(format!("--grid: bad count '{}'", parts[0])))?;
    if count == 0 {
        return Err(Error::Validation("--grid: count must be positive".into()));
    }
    match parts.len() {
        1 => {
            let (lo, hi) = match &geom.domain {
                Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
                Domain::Ball { center, radius } => {
                    (center.iter().map(|c| c - radius).collect(), center.iter().map(|c| c + radius).collect())
                }
            };
            Ok(Grid { lo, hi, counts: vec![count; n] })
        }
        3 => {
            let lo: f64 = parts[1].trim().parse().map_err(|_| Error::Validation("--grid: bad lower bound".into()))?;
            let hi: f64 = parts[2].trim().parse().map_err(|_| Error::Validation("--grid: bad upper bound".into()))?;
            if lo >= hi {
                return Err(Error::Validation("--grid: lower bound must be below the upper bound".into()));
            }
            Ok(Grid { lo: vec![lo; n], hi: vec![hi; n], counts: vec![count; n] })
        }
        _ => Err(Error::Validation("--grid: expected N or N:lo:hi".into())),
    }
}

/// Runs one command and returns the written file names (manifest last) plus a summary.
/// `arguments` is recorded in the manifest.
pub fn run_with(cli: &Cli, arguments: &[String]) -> Result<(Vec<String>, String)> {
    let common = &cli.common;
    if !(common.step > 0.0) {
        return Err(Error::Validation("--step must be positive".into()));
    }
    let config_path = common.config.as_ref().ok_or_else(|| Error::Validation("--config is required".into()))?;
    let text = std::fs::read_to_string(config_path)
        .map_err(|e| Error::Validation(format!("--config {}: {e}", config_path.display())))?;
    let loaded = load(&text, common.step)?;
    let geom = loaded.geom.clone();
    let n = geom.n;
    let h = common.step;
    let mut out = Output { dir: common.out_dir.clone(), files: Vec::new() };
    let mut summary = String::new();
    let name = cli.command.name();

    match &cli.command {
        Command::Curvature(p) => {
            let mut header = coord_header("x", n);
            header.extend(idx_names("R", n, 4, 1));
            header.extend(idx_names("Ric", n, 2, 1));
            header.extend(idx_names("P", n, 2, 1));
            header.extend(idx_names("dP", n, 3, 1));
            let mut rows = Vec::new();
            for x in points(&geom, p, common.seed)? {
                let cd = geom.curvature(&x)?;
                let mut v = x.clone();
                v.extend(&cd.r);
                v.extend(&cd.ric);
                v.extend(&cd.p);
                v.extend(&cd.dp);
                rows.push(row(&v));
            }
            out.csv("curvature.csv", &header, &rows)?;
            let _ = writeln!(summary, "curvature: {} point(s)", rows.len());
        }
        Command::Geodesic { at, dir, span } => {
            let c = geom.geodesic(&parse_vec(at, n, "at")?, &parse_vec(dir, n, "dir")?, *span, h);
            let mut header = vec!["t".to_string()];
            header.extend(coord_header("x", n));
            header.extend(coord_header("v", n));
            let rows: Vec<String> = (0..c.t.len())
                .map(|i| {
                    let mut v = vec![c.t[i]];
                    v.extend(&c.x[i]);
                    v.extend(&c.v[i]);
                    row(&v)
                })
                .collect();
            out.csv("geodesic.csv", &header, &rows)?;
            let _ = writeln!(summary, "geodesic: {} samples{}", rows.len(), if c.exited { ", left the domain" } else { "" });
        }
        Command::Transport { at, to, tractor, samples } => {
            let a = parse_vec(at, n, "at")?;
            let b = parse_vec(to, n, "to")?;
            let v0 = TractorValue::new(n, 1, 0.0, parse_vec(tractor, n + 1, "tractor")?);
            let k = (*samples).max(1);
            let mut header = vec!["s".to_string()];
            header.extend(coord_header("x", n));
            header.extend((0..=n).map(|i| format!("V{i}")));
            let mut v = v0;
            let mut rows = Vec::new();
            let pt = |s: f64| a.iter().zip(&b).map(|(p, q)| p + s * (q - p)).collect::<Vec<f64>>();
            for i in 0..=k {
                let s = i as f64 / k as f64;
                if i > 0 {
                    let seg = Segment::new(&pt((i - 1) as f64 / k as f64), &pt(s));
                    v = tractor_transport(&geom, &seg, &v, h)?;
                }
                let mut r = vec![s];
                r.extend(pt(s));
                r.extend(&v.comp);
                rows.push(row(&r));
            }
            out.csv("transport.csv", &header, &rows)?;
            let _ = writeln!(summary, "transport: {} samples", rows.len());
        }
        Command::ConeGeodesic { at, rho, dir, vdir, span } => {
            let p0 = ConePoint::new(&parse_vec(at, n, "at")?, *rho);
            let t0 = ConeTangent::new(&parse_vec(dir, n, "dir")?, *vdir);
            let c = cone_geodesic(&geom, &p0, &t0, *span, h);
            let mut header = vec!["t".to_string()];
            header.extend(coord_header("x", n));
            header.push("rho".into());
            let rows: Vec<String> = (0..c.t.len())
                .map(|i| {
                    let mut v = vec![c.t[i]];
                    v.extend(&c.x[i]);
                    row(&v)
                })
                .collect();
            out.csv("cone_geodesic.csv", &header, &rows)?;
            let _ = writeln!(summary, "cone-geodesic: {} samples", rows.len());
        }
        Command::HomCoords(p) => {
            let nf = frame_builder(&loaded.config, &geom, h)()?;
            let mut header = coord_header("x", n);
            header.extend((0..=n).map(|i| format!("X{i}")));
            header.push("s".into());
            let mut rows = Vec::new();
            for x in points(&geom, p, common.seed)? {
                let fp = nf.frame_at(&x)?;
                let mut v = x.clone();
                v.extend(&fp.hom);
                v.push(fp.r);
                rows.push(row(&v));
            }
            out.csv("hom_coords.csv", &header, &rows)?;
            let _ = writeln!(summary, "hom-coords: {} point(s), validity radius {}", rows.len(), fmt_f(nf.w));
        }
        Command::Bgg { action, op, sigma, k, points: p } => {
            if action != "check" {
                return Err(Error::Validation(format!("bgg: unknown action '{action}' (expected 'check')")));
            }
            let pts = points(&geom, p, common.seed)?;
            let mut header = coord_header("x", n);
            header.push("residual".into());
            let mut rows = Vec::new();
            let mut worst: f64 = 0.0;
            let mut skew: f64 = 0.0;
            let need_sigma = || sigma.clone().ok_or_else(|| Error::Validation("--sigma is required for this operator".into()));
            for x in &pts {
                let r = match op.as_str() {
                    "k1" => {
                        let res = bgg_residual_k1(&geom, &DensitySolution::parse(&need_sigma()?, n, 1.0)?, x)?;
                        skew = skew.max(res.skew);
                        res.max_abs()
                    }
                    "k2" => bgg_residual_k2(&geom, &DensitySolution::parse(&need_sigma()?, n, 2.0)?, x)?
                        .iter()
                        .fold(0.0_f64, |m, v| m.max(v.abs())),
                    "skew" => {
                        let ks = k.clone().ok_or_else(|| Error::Validation("--k is required for the skew operator".into()))?;
                        let parts: Vec<&str> = ks.split(';').collect();
                        bgg_residual_skew(&geom, &WeightedOneForm::parse(&parts, n)?, x)?.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
                    }
                    other => return Err(Error::Validation(format!("--op: unknown operator '{other}' (k1, k2, skew)"))),
                };
                worst = worst.max(r);
                let mut v = x.clone();
                v.push(r);
                rows.push(row(&v));
            }
            out.csv("bgg.csv", &header, &rows)?;
            let mut report = BTreeMap::new();
            report.insert("max_residual", fmt_f(worst));
            report.insert("operator", op.clone());
            if op == "k1" {
                report.insert("max_skew_part", fmt_f(skew));
            }
            out.json("bgg_report.json", &report)?;
            let _ = writeln!(summary, "bgg {op}: max residual {}", fmt_f(worst));
        }
        Command::Prolong { op, sigma, points: p } => {
            let field: Box<dyn TractorField> = match op.as_str() {
                "k1" => Box::new(prolong_k1(&geom, DensitySolution::parse(sigma, n, 1.0)?)?),
                "k2" => Box::new(prolong_k2(&geom, DensitySolution::parse(sigma, n, 2.0)?)?),
                other => return Err(Error::Validation(format!("--op: unknown prolongation '{other}' (k1, k2)"))),
            };
            let mut header = coord_header("x", n);
            header.extend(idx_names("I", n + 1, field.valence(), 0));
            let mut rows = Vec::new();
            for x in points(&geom, p, common.seed)? {
                let mut v = x.clone();
                v.extend(field.eval(&x)?.comp);
                rows.push(row(&v));
            }
            out.csv("prolong.csv", &header, &rows)?;
            let curves = default_curves(&geom);
            let refs: Vec<&dyn SmoothPath> = curves.iter().map(|c| c.as_ref()).collect();
            let cert = normality_check(&geom, field.as_ref(), &refs, 12, 1e-3)?;
            let mut report = BTreeMap::new();
            report.insert("normality", fmt_f(cert));
            report.insert("parallel", (cert < common.tol).to_string());
            out.json("prolong_report.json", &report)?;
            let _ = writeln!(summary, "prolong {op}: normality {}", fmt_f(cert));
        }
        Command::Model { action, samples } => {
            if action != "classify" {
                return Err(Error::Validation(format!("model: unknown action '{action}' (expected 'classify')")));
            }
            let m = loaded.model.as_ref().ok_or_else(|| Error::Validation("model: the config has no 'model' block".into()))?;
            let gt = g_type(m);
            let c = census(m, *samples, common.seed)?;
            let header = vec!["label".to_string(), "count".to_string()];
            let rows: Vec<String> = c.counts.iter().map(|(l, k)| format!("{l},{k}")).collect();
            out.csv("model_census.csv", &header, &rows)?;
            let mut header = coord_header("X", n + 1);
            header.push("smooth".into());
            let rows: Vec<String> = c.zero_rays.iter().map(|(x, s)| format!("{},{}", row(x), s)).collect();
            out.csv("model_zero_rays.csv", &header, &rows)?;
            #[derive(Serialize)]
            struct Report {
                family: String,
                g_type: String,
                census: BTreeMap<String, usize>,
                singular_rays: Vec<Vec<String>>,
            }
            let rep = Report {
                family: format!("{:?}", m.family),
                g_type: gt.to_string(),
                census: c.counts.clone(),
                singular_rays: c.singular().iter().map(|x| x.iter().map(|v| fmt_f(*v)).collect()).collect(),
            };
            out.json("model_report.json", &rep)?;
            let _ = writeln!(summary, "model: {gt}; {} singular ray(s)", rep.singular_rays.len());
        }
        Command::Stratify { tractor, grid } => {
            let spec = select_tractor(&loaded, tractor)?;
            let grid = parse_grid(grid, &geom)?;
            let opts = StratOptions { band: common.band, normality_tol: common.tol, h, ..Default::default() };
            let rep = stratify(&geom, &spec.input, &grid, &opts)?;
            let mut header = coord_header("x", n);
            header.push("label".into());
            let width = rep.values.iter().map(|v| v.len()).max().unwrap_or(0);
            header.extend((0..width).map(|i| format!("q{i}")));
            let rows: Vec<String> = (0..rep.points.len())
                .map(|i| {
                    let mut s = row(&rep.points[i]);
                    s.push(',');
                    s.push_str(&rep.labels[i]);
                    for v in &rep.values[i] {
                        s.push(',');
                        s.push_str(&fmt_f(*v));
                    }
                    for _ in rep.values[i].len()..width {
                        s.push(',');
                    }
                    s
                })
                .collect();
            out.csv("stratify.csv", &header, &rows)?;
            let mut zh = coord_header("x", n);
            zh.extend(["label", "smooth", "grad_norm", "boundary_signature"].map(String::from));
            let zrows: Vec<String> = rep
                .zero_points
                .iter()
                .map(|z| {
                    let sig = z.boundary_signature.map(|(p, q, k)| format!("({p} {q} {k})")).unwrap_or_default();
                    format!("{},{},{},{},{}", row(&z.x), z.label, z.smooth, fmt_f(z.grad_norm), sig)
                })
                .collect();
            out.csv("stratify_zero_locus.csv", &zh, &zrows)?;
            #[derive(Serialize)]
            struct Report<'a> {
                tractor: &'a str,
                family: String,
                grid: &'a Grid,
                counts: &'a BTreeMap<String, usize>,
                strata: &'a [String],
                zero_points: usize,
                singular_points: usize,
                normality: String,
                model_components: Vec<String>,
                g_type: String,
                frame_checked: usize,
                outside_validity: usize,
                route_disagreements: usize,
                max_route_dev: String,
                side_signatures: &'a BTreeMap<String, (usize, usize, usize)>,
            }
            let r = Report {
                tractor: &spec.name,
                family: format!("{:?}", spec.family),
                grid: &rep.grid,
                counts: &rep.counts,
                strata: &rep.strata,
                zero_points: rep.zero_points.len(),
                singular_points: rep.singular_points().len(),
                normality: fmt_f(rep.normality),
                model_components: rep.model.comp.iter().map(|v| fmt_f(*v)).collect(),
                g_type: rep.g_type.to_string(),
                frame_checked: rep.frame_checked,
                outside_validity: rep.outside_validity,
                route_disagreements: rep.route_disagreements,
                max_route_dev: fmt_f(rep.max_route_dev),
                side_signatures: &rep.side_signatures,
            };
            out.json("stratify_report.json", &r)?;
            let _ = writeln!(
                summary,
                "stratify: strata {:?}, {} zero point(s), {} singular",
                rep.strata,
                rep.zero_points.len(),
                rep.singular_points().len()
            );
        }
        Command::EinsteinCheck { sigma, weight, points: p } => {
            let s = DensitySolution::parse(sigma, n, *weight)?;
            let pts = points(&geom, p, common.seed)?;
            let rep = scale_geometry_check(&geom, &s, &pts, None, common.band)?;
            let mut header = coord_header("x", n);
            header.extend(idx_names("Phat", n, 2, 1));
            let rows: Vec<String> = pts
                .iter()
                .zip(&rep.p_hat)
                .map(|(x, p)| {
                    let mut v = x.clone();
                    v.extend(p);
                    row(&v)
                })
                .collect();
            out.csv("einstein.csv", &header, &rows)?;
            let mut report: BTreeMap<String, String> = BTreeMap::new();
            report.insert("p_hat_sup".into(), fmt_f(rep.p_hat_sup));
            report.insert("nabla_p_hat_sup".into(), fmt_f(rep.nabla_p_hat_sup));
            for fit in &rep.einstein {
                let side = if fit.side > 0 { "positive" } else { "negative" };
                report.insert(format!("sigma_{side}.points"), fit.count.to_string());
                report.insert(format!("sigma_{side}.einstein_constant"), fmt_f(fit.c));
                report.insert(format!("sigma_{side}.einstein_spread"), fmt_f(fit.spread));
            }
            for (x, sig) in pts.iter().zip(&rep.metric_signatures) {
                let side = if s.f.eval(x)? > 0.0 { "positive" } else { "negative" };
                report.insert(format!("sigma_{side}.metric_signature"), format!("({} {} {})", sig.0, sig.1, sig.2));
            }
            out.json("einstein_report.json", &report)?;
            let _ = writeln!(summary, "einstein-check: |nabla P| {}", fmt_f(rep.nabla_p_hat_sup));
        }
        Command::Complete { sigma, weight, at, dir, s_max, targets } => {
            let s = DensitySolution::parse(sigma, n, *weight)?;
            let targets = match targets {
                Some(t) => parse_vec(t, 0, "targets")?,
                None => Vec::new(),
            };
            let opts = ProfileOptions { h, band: common.band, s_max: *s_max, targets };
            let prof = completeness_profile(&geom, &s, &parse_vec(at, n, "at")?, &parse_vec(dir, n, "dir")?, &opts)?;
            let header = vec!["s".to_string(), "t".to_string(), "sigma".to_string()];
            let rows: Vec<String> = (0..prof.s.len()).map(|i| row(&[prof.s[i], prof.t[i], prof.sigma[i]])).collect();
            out.csv("complete.csv", &header, &rows)?;
            let mut report: BTreeMap<String, String> = BTreeMap::new();
            report.insert("reached_band".into(), prof.reached_band.to_string());
            report.insert("exited".into(), prof.exited.to_string());
            report.insert("final_t".into(), fmt_f(*prof.t.last().unwrap()));
            for (a, t) in &prof.targets {
                report.insert(format!("t_at_{}", fmt_f(*a)), t.map(fmt_f).unwrap_or_else(|| "unreached".into()));
            }
            out.json("complete_report.json", &report)?;
            let _ = writeln!(summary, "complete: t reaches {} over {} steps", fmt_f(*prof.t.last().unwrap()), prof.s.len());
        }
    }

    let mut tolerances = BTreeMap::new();
    tolerances.insert("step".to_string(), h);
    tolerances.insert("band".to_string(), common.band);
    tolerances.insert("normality".to_string(), common.tol);
    let mut outputs = out.files.clone();
    outputs.push("manifest.json".into());
    let manifest = RunManifest {
        command: name.to_string(),
        arguments: arguments.to_vec(),
        config_hash: hex::encode(Sha256::digest(text.as_bytes())),
        tool_version: TOOL_VERSION.to_string(),
        tolerances,
        seed: common.seed,
        outputs: outputs.clone(),
    };
    out.json("manifest.json", &manifest)?;
    Ok((out.files, summary))
}

pub fn run(cli: &Cli) -> Result<(Vec<String>, String)> {
    run_with(cli, &[])
}

/// Command line arguments without the program name and the output directory,
/// so manifests do not depend on where they are written.
fn recorded_arguments(args: &[OsString]) -> Vec<String> {
    let mut out = Vec::new();
    let mut it = args.iter().skip(1).map(|a| a.to_string_lossy().into_owned());
    while let Some(a) = it.next() {
        if a == "--out-dir" {
            it.next();
        } else if !a.starts_with("--out-dir=") {
            out.push(a);
        }
    }
    out
}

/// Parses arguments, runs, prints a summary or the error, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_with(&cli, &recorded_arguments(&args)) {
        Ok((files, summary)) => {
            print!("{summary}");
            for f in files {
                println!("wrote {}", Path::new(&cli.common.out_dir).join(f).display());
            }
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
