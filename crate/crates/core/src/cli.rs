//! Command-line front end.
//!
//! Every subcommand reads a TOML [`RunConfig`], writes its artifacts into
//! the output directory and prints a `key=value` summary on stdout. Exit
//! codes: 0 success, 2 invalid input, 3 a numerical check failed.
//!
//! Global flags can also be set through the environment: `BRT_CONFIG`,
//! `BRT_SEED`, `BRT_THREADS` and `BRT_OUT`.

use std::fmt::Display;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

use crate::billiards::{trace_broken_ray, TraceParams};
use crate::checks;
use crate::geometry::presets::*;
use crate::geometry::{vec_from_slice, BoundaryJet, ConvexDomain, DomainConfig, FacetLabel, Vec3};
use crate::normal_ops::{ballistic_symbol, normal_pointwise, normal_split, DirectionQuadrature, LinearOp, RayModel};
use crate::phantoms_io::{load_field, load_sinogram, render, save_field, save_sinogram, PhantomSpec, SupportBox};
use crate::reconstruction::{
    box_mask, c2_bump, perturbation_probe, rel_error_on, solve_field, stability_probe, Method, Perturbation, ProbeNorm,
    SolveError, SolveStatus, SolverConfig,
};
use crate::transport::{
    Attenuation, BrokenRayOperator, Bump, CutoffMode, CutoffSpec, GridSpec, Interp, Modulation, OperatorSpec, Sampling,
    SamplingSpec, ScalarGridField, Sinogram,
};
use crate::unfolding::line_coincidence_defect;
use crate::visibility::{
    check_condition_e, covector_grid, covector_visible, visible_set_map, ConditionParams, SearchSpec,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "brokenray", version, about = "Attenuated broken ray transform on convex polytopes")]
pub struct Cli {
    /// Run configuration (TOML). Built-in defaults are used when absent.
    #[arg(long, env = "BRT_CONFIG", global = true)]
    pub config: Option<PathBuf>,
    /// RNG seed; overrides the config.
    #[arg(long, env = "BRT_SEED", global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: available parallelism).
    #[arg(long, env = "BRT_THREADS", global = true)]
    pub threads: Option<usize>,
    /// Output directory; overrides the config.
    #[arg(long, env = "BRT_OUT", global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Trace one broken ray, or every ray of the sampling.
    Trace {
        /// Start point on the boundary, comma separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        start: Option<Vec<f64>>,
        /// Initial direction, comma separated (normalized).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        dir: Option<Vec<f64>>,
    },
    /// Forward-project the phantom; with --start/--dir, a single ray.
    Forward {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        start: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        dir: Option<Vec<f64>>,
        /// Write the sinogram as CSV instead of binary.
        #[arg(long)]
        csv: bool,
    },
    /// Dot-product test of the discrete adjoint.
    AdjointCheck {
        #[arg(long, default_value_t = 20)]
        pairs: usize,
    },
    /// Apply the normal operator and split it into ballistic and reflect parts.
    Normal {
        /// Also evaluate the split by angular quadrature at every cell.
        #[arg(long)]
        pointwise: bool,
    },
    /// Ballistic principal symbol at a point, or over the grid for one covector.
    Symbol {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        point: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        covector: Vec<f64>,
    },
    /// Visible-set map and the geometric condition on E.
    Visibility,
    /// Reconstruct from a sinogram file, or from simulated data of the phantom.
    Reconstruct {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Lower stability constant of the normal operator on the support.
    Stability,
    /// How the normal operator moves under perturbed attenuation or cutoff.
    Perturb,
    /// Run the named numerical checks.
    Invariants {
        /// Comma-separated ids or names; all when absent.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
    },
}

#[derive(Debug)]
pub enum CliError {
    Invalid(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Invalid(_) => EXIT_INVALID,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

impl Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Invalid(m) => write!(f, "invalid input: {m}"),
            CliError::Numerical(m) => write!(f, "numerical check failed: {m}"),
        }
    }
}

/// Tags an error with the config section it came from.
fn at<E: Display>(section: &'static str) -> impl Fn(E) -> CliError {
    move |e| invalid(section, e)
}

fn invalid(section: &str, e: impl Display) -> CliError {
    CliError::Invalid(format!("[{section}] {e}"))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DomainSource {
    Square {
        #[serde(default = "default_square_e")]
        measure: Vec<usize>,
    },
    Hexagon {
        measure: Vec<usize>,
    },
    Cube {
        measure: Vec<usize>,
    },
    CubeSlab {
        eps: f64,
    },
    CubeCap {
        radius: f64,
    },
    /// A domain TOML file, relative to the config file.
    File {
        path: PathBuf,
    },
    Custom(DomainConfig),
}

fn default_square_e() -> Vec<usize> {
    vec![LEFT, BOTTOM, TOP]
}

impl Default for DomainSource {
    fn default() -> Self {
        DomainSource::Square { measure: default_square_e() }
    }
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    /// Cells per axis; the grid covers the domain's bounding box.
    pub dims: Option<Vec<usize>>,
    #[serde(default)]
    pub interp: Interp,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum AttenuationConfig {
    #[default]
    Zero,
    Constant {
        value: f64,
    },
    /// A field file written by this tool, relative to the config file.
    Field {
        path: PathBuf,
    },
    /// `background + amplitude * bump` with the `C^2` bump of `c2_bump`.
    Bump {
        center: Vec<f64>,
        radius: f64,
        amplitude: f64,
        #[serde(default)]
        background: f64,
    },
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BumpConfig {
    pub x0: Vec<f64>,
    pub theta0: Vec<f64>,
    pub radius_x: f64,
    pub radius_theta: f64,
    #[serde(default = "default_transition")]
    pub transition: f64,
}

fn default_transition() -> f64 {
    0.5
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CutoffConfig {
    /// Taper width near the regularity thresholds; binary cutoff when absent.
    pub taper: Option<f64>,
    pub order: Option<u32>,
    pub bump: Option<BumpConfig>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    #[serde(default = "default_n_max")]
    pub n_max: usize,
    pub delta_e: Option<f64>,
    pub delta_edge: Option<f64>,
}

fn default_n_max() -> usize {
    4
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { n_max: default_n_max(), delta_e: None, delta_edge: None }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default = "default_iters")]
    pub max_iters: usize,
    #[serde(default = "default_rel_tol")]
    pub rel_tol: f64,
    pub step: Option<f64>,
    /// Unknowns outside this box are held at zero.
    pub support: Option<SupportBox>,
    /// Standard deviation of Gaussian noise added to simulated data,
    /// relative to the data's root mean square.
    #[serde(default)]
    pub noise: f64,
}

fn default_method() -> Method {
    Method::Cgls
}

fn default_iters() -> usize {
    200
}

fn default_rel_tol() -> f64 {
    1e-6
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            method: default_method(),
            max_iters: default_iters(),
            rel_tol: default_rel_tol(),
            step: None,
            support: None,
            noise: 0.0,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisibilitySection {
    /// Grid of test points; 32 per axis in 2D, 12 in 3D by default.
    pub dims: Option<Vec<usize>>,
    pub covectors: Option<usize>,
    #[serde(default = "default_n_circle")]
    pub n_circle: usize,
    #[serde(default)]
    pub angular_tol: f64,
    #[serde(default = "default_refine")]
    pub refine: usize,
    #[serde(default = "default_depth")]
    pub condition_depth: usize,
}

fn default_n_circle() -> usize {
    128
}

fn default_refine() -> usize {
    4
}

fn default_depth() -> usize {
    3
}

impl Default for VisibilitySection {
    fn default() -> Self {
        VisibilitySection {
            dims: None,
            covectors: None,
            n_circle: default_n_circle(),
            angular_tol: 0.0,
            refine: default_refine(),
            condition_depth: default_depth(),
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilitySection {
    #[serde(default = "default_modes")]
    pub modes: usize,
    #[serde(default = "default_n_probe")]
    pub n_probe: usize,
    #[serde(default = "default_norm")]
    pub norm: ProbeNorm,
    pub support: Option<SupportBox>,
}

fn default_modes() -> usize {
    6
}

fn default_n_probe() -> usize {
    64
}

fn default_norm() -> ProbeNorm {
    ProbeNorm::H1
}

impl Default for StabilitySection {
    fn default() -> Self {
        StabilitySection { modes: default_modes(), n_probe: default_n_probe(), norm: default_norm(), support: None }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbKind {
    #[default]
    Sigma,
    Alpha,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbSection {
    #[serde(default)]
    pub kind: PerturbKind,
    #[serde(default = "default_deltas")]
    pub deltas: Vec<f64>,
    /// Centre and radius of the `C^2` bump added to sigma; for `alpha` the
    /// factor is `1 - delta * bump` evaluated at the start point.
    pub center: Option<Vec<f64>>,
    #[serde(default = "default_perturb_radius")]
    pub radius: f64,
}

fn default_deltas() -> Vec<f64> {
    vec![1e-3, 1e-2, 1e-1]
}

fn default_perturb_radius() -> f64 {
    0.35
}

impl Default for PerturbSection {
    fn default() -> Self {
        PerturbSection {
            kind: PerturbKind::Sigma,
            deltas: default_deltas(),
            center: None,
            radius: default_perturb_radius(),
        }
    }
}

/// Everything a run needs. All sections are optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub domain: DomainSource,
    #[serde(default)]
    pub grid: GridConfig,
    pub sampling: Option<SamplingSpec>,
    #[serde(default)]
    pub attenuation: AttenuationConfig,
    #[serde(default)]
    pub cutoff: CutoffConfig,
    #[serde(default)]
    pub trace: TraceConfig,
    pub phantom: Option<PhantomSpec>,
    /// Phantom TOML file, relative to the config file.
    pub phantom_file: Option<PathBuf>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub visibility: VisibilitySection,
    #[serde(default)]
    pub stability: StabilitySection,
    #[serde(default)]
    pub perturb: PerturbSection,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    /// Directory that relative paths are resolved against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl RunConfig {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Invalid(format!("config: {e}")))?;
        cfg.base = base.to_path_buf();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text =
            fs::read_to_string(path).map_err(|e| CliError::Invalid(format!("config {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_toml(&text, &base)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Referenced files must exist.
    fn validate(&self) -> Result<(), CliError> {
        let mut files: Vec<(&'static str, &Path)> = Vec::new();
        if let DomainSource::File { path } = &self.domain {
            files.push(("domain", path));
        }
        if let AttenuationConfig::Field { path } = &self.attenuation {
            files.push(("attenuation", path));
        }
        if let Some(p) = &self.phantom_file {
            files.push(("phantom_file", p));
        }
        for (section, p) in files {
            if !self.resolve(p).is_file() {
                return Err(CliError::Invalid(format!(
                    "[{section}] file {} does not exist",
                    self.resolve(p).display()
                )));
            }
        }
        if self.phantom.is_some() && self.phantom_file.is_some() {
            return Err(CliError::Invalid("give either [phantom] or phantom_file, not both".into()));
        }
        Ok(())
    }

    pub fn domain(&self) -> Result<ConvexDomain, CliError> {
        match &self.domain {
            DomainSource::Square { measure } => Ok(unit_square(&check_facets(measure, 4)?)),
            DomainSource::Hexagon { measure } => Ok(hexagon(&check_facets(measure, 6)?)),
            DomainSource::Cube { measure } => Ok(unit_cube(&check_facets(measure, 6)?)),
            DomainSource::CubeSlab { eps } if *eps > 0.0 && *eps < 1.0 => Ok(cube_slab(*eps)),
            DomainSource::CubeSlab { .. } => Err(invalid("domain", "eps must lie in (0, 1)")),
            DomainSource::CubeCap { radius } if *radius > 0.0 => Ok(cube_cap(*radius)),
            DomainSource::CubeCap { .. } => Err(invalid("domain", "radius must be positive")),
            DomainSource::File { path } => {
                let text = fs::read_to_string(self.resolve(path)).map_err(|x| invalid("domain", x))?;
                DomainConfig::from_toml(&text)
                    .map_err(|x| invalid("domain", x))?
                    .build()
                    .map_err(|x| invalid("domain", x))
            }
            DomainSource::Custom(c) => c.build().map_err(|x| invalid("domain", x)),
        }
    }

    pub fn grid(&self, d: &ConvexDomain) -> Result<GridSpec, CliError> {
        let n = if d.dim == 2 { 64 } else { 32 };
        let dims = self.grid.dims.clone().unwrap_or_else(|| vec![n; d.dim]);
        GridSpec::covering(&d.bounding_box(), d.dim, &dims).map_err(at("grid"))
    }

    pub fn sampling_spec(&self, d: &ConvexDomain) -> SamplingSpec {
        self.sampling.unwrap_or_else(|| checks::default_sampling(d))
    }

    pub fn sampling(&self, d: &ConvexDomain) -> Result<Arc<Sampling>, CliError> {
        Ok(Arc::new(Sampling::build(d, &self.sampling_spec(d)).map_err(at("sampling"))?))
    }

    pub fn trace_params(&self, d: &ConvexDomain) -> TraceParams {
        let mut p = TraceParams::for_domain(d, self.trace.n_max);
        if let Some(v) = self.trace.delta_e {
            p.delta_e = v;
        }
        if let Some(v) = self.trace.delta_edge {
            p.delta_edge = v;
        }
        p
    }

    pub fn cutoff(&self, d: &ConvexDomain) -> Result<CutoffSpec, CliError> {
        let c = &self.cutoff;
        let mode = match (c.taper, c.bump.is_some(), c.order) {
            (None, false, None) => CutoffMode::Binary,
            (_, _, order) => CutoffMode::Mollified { order: order.unwrap_or(3) },
        };
        let bump = match &c.bump {
            None => None,
            Some(b) => {
                let theta0 = vec_from_slice(d.dim, &b.theta0).map_err(|x| invalid("cutoff", x))?;
                if theta0.norm() == 0.0 || !(b.radius_x > 0.0) || !(b.radius_theta > 0.0) {
                    return Err(invalid("cutoff", "bump needs a nonzero direction and positive radii"));
                }
                Some(Bump {
                    x0: vec_from_slice(d.dim, &b.x0).map_err(|x| invalid("cutoff", x))?,
                    theta0: theta0.normalize(),
                    radius_x: b.radius_x,
                    radius_theta: b.radius_theta,
                    transition: b.transition,
                })
            }
        };
        Ok(CutoffSpec { bump, mode, taper: c.taper })
    }

    pub fn attenuation(&self, d: &ConvexDomain, grid: &GridSpec) -> Result<Attenuation, CliError> {
        Ok(match &self.attenuation {
            AttenuationConfig::Zero => Attenuation::Zero,
            AttenuationConfig::Constant { value } if *value >= 0.0 => Attenuation::Constant(*value),
            AttenuationConfig::Constant { .. } => {
                return Err(invalid("attenuation", "attenuation must be nonnegative"))
            }
            AttenuationConfig::Field { path } => {
                let f = load_field(&self.resolve(path)).map_err(|x| invalid("attenuation", x))?;
                if f.values.iter().any(|v| !(*v >= 0.0)) {
                    return Err(invalid("attenuation", "attenuation field has negative or NaN values"));
                }
                Attenuation::Grid(f)
            }
            AttenuationConfig::Bump { center, radius, amplitude, background } => {
                let c = vec_from_slice(d.dim, center).map_err(|x| invalid("attenuation", x))?;
                if !(*radius > 0.0) || *background < 0.0 || background + amplitude.min(0.0) < 0.0 {
                    return Err(invalid("attenuation", "bump attenuation must be nonnegative with positive radius"));
                }
                Attenuation::Grid(ScalarGridField::from_fn(*grid, |x| background + amplitude * c2_bump(x, &c, *radius)))
            }
        })
    }

    pub fn operator_spec(&self, d: &ConvexDomain) -> Result<OperatorSpec, CliError> {
        let mut spec = OperatorSpec::new(self.trace_params(d)).with_cutoff(self.cutoff(d)?);
        spec.interp = self.grid.interp;
        Ok(spec)
    }

    pub fn phantom(&self, d: &ConvexDomain) -> Result<PhantomSpec, CliError> {
        if let Some(p) = &self.phantom {
            return Ok(p.clone());
        }
        if let Some(path) = &self.phantom_file {
            let text = fs::read_to_string(self.resolve(path)).map_err(at("phantom_file"))?;
            return PhantomSpec::from_toml(&text).map_err(at("phantom_file"));
        }
        Ok(default_phantom(d.dim))
    }

    pub fn seed(&self, flag: Option<u64>) -> u64 {
        flag.or(self.seed).unwrap_or(20240611)
    }
}

fn check_facets(measure: &[usize], n: usize) -> Result<Vec<usize>, CliError> {
    match measure.iter().find(|k| **k >= n) {
        Some(k) => Err(CliError::Invalid(format!("[domain] facet {k} does not exist (domain has {n})"))),
        None => Ok(measure.to_vec()),
    }
}

/// A smooth bump plus an ellipsoid inside the central box `[0.25, 0.75]^n`.
pub fn default_phantom(dim: usize) -> PhantomSpec {
    use crate::phantoms_io::Primitive;
    let v = |x: f64| vec![x; dim];
    let mut c = v(0.45);
    c[0] = 0.55;
    PhantomSpec {
        primitives: vec![
            Primitive::Bump { center: v(0.5), radius: 0.22, amplitude: 1.0, smoothness: 1.0 },
            Primitive::Ellipsoid { center: c, radii: v(0.08), amplitude: 0.5 },
        ],
        background: 0.0,
        support: Some(SupportBox { lo: [0.25; 3], hi: [0.75; 3] }),
    }
}

/// Ordered `key=value` lines for stdout.
#[derive(Default)]
pub struct Summary(Vec<(String, String)>);

impl Summary {
    pub fn put(&mut self, key: &str, value: impl Display) {
        self.0.push((key.to_string(), value.to_string()));
    }

    pub fn render(&self) -> String {
        self.0.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }
}

/// Context shared by the subcommands.
struct Run {
    cfg: RunConfig,
    seed: u64,
    out: PathBuf,
}

impl Run {
    fn artifact(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Invalid(format!("output directory {}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }

    fn write_text(&self, name: &str, text: &str, s: &mut Summary) -> Result<(), CliError> {
        let p = self.artifact(name)?;
        fs::write(&p, text).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
        s.put(&format!("artifact.{name}"), p.display());
        Ok(())
    }

    fn write_field(&self, name: &str, f: &ScalarGridField, s: &mut Summary) -> Result<(), CliError> {
        let p = self.artifact(name)?;
        save_field(&p, f).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
        s.put(&format!("artifact.{name}"), p.display());
        Ok(())
    }

    fn operator(
        &self,
        d: &ConvexDomain,
        grid: GridSpec,
        sampling: Arc<Sampling>,
    ) -> Result<BrokenRayOperator, CliError> {
        let att = self.cfg.attenuation(d, &grid)?;
        BrokenRayOperator::build(d, grid, sampling, &att, &self.cfg.operator_spec(d)?).map_err(at("operator"))
    }
}

/// Parses arguments, runs the command and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    let mut summary = Summary::default();
    let result = execute(&cli, &mut summary);
    print!("{}", summary.render());
    let _ = std::io::stdout().flush();
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            println!("status=error");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli, s: &mut Summary) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Invalid("--threads must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let seed = cfg.seed(cli.seed);
    let out =
        cli.out.clone().or_else(|| cfg.output.as_ref().map(|p| cfg.resolve(p))).unwrap_or_else(|| PathBuf::from("out"));
    let run = Run { cfg, seed, out };
    s.put("command", command_name(&cli.command));
    s.put("seed", seed);
    match &cli.command {
        Command::Trace { start, dir } => cmd_trace(&run, start.as_deref(), dir.as_deref(), s),
        Command::Forward { start, dir, csv } => cmd_forward(&run, start.as_deref(), dir.as_deref(), *csv, s),
        Command::AdjointCheck { pairs } => cmd_adjoint_check(&run, *pairs, s),
        Command::Normal { pointwise } => cmd_normal(&run, *pointwise, s),
        Command::Symbol { point, covector } => cmd_symbol(&run, point.as_deref(), covector, s),
        Command::Visibility => cmd_visibility(&run, s),
        Command::Reconstruct { data } => cmd_reconstruct(&run, data.as_deref(), s),
        Command::Stability => cmd_stability(&run, s),
        Command::Perturb => cmd_perturb(&run, s),
        Command::Invariants { only } => cmd_invariants(&run, only.as_deref(), s),
    }?;
    s.put("status", "ok");
    Ok(())
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Trace { .. } => "trace",
        Command::Forward { .. } => "forward",
        Command::AdjointCheck { .. } => "adjoint-check",
        Command::Normal { .. } => "normal",
        Command::Symbol { .. } => "symbol",
        Command::Visibility => "visibility",
        Command::Reconstruct { .. } => "reconstruct",
        Command::Stability => "stability",
        Command::Perturb => "perturb",
        Command::Invariants { .. } => "invariants",
    }
}

/// The jet at `start` pointing along `dir`, on whichever facet contains `start`.
fn jet_from_args(d: &ConvexDomain, start: &[f64], dir: &[f64]) -> Result<BoundaryJet, CliError> {
    let x = vec_from_slice(d.dim, start).map_err(at("--start"))?;
    let theta = vec_from_slice(d.dim, dir).map_err(at("--dir"))?;
    if theta.norm() == 0.0 {
        return Err(CliError::Invalid("[--dir] direction must be nonzero".into()));
    }
    let mut last = None;
    for k in 0..d.facets.len() {
        match BoundaryJet::new(d, x, theta, k) {
            Ok(j) => return Ok(j),
            Err(e) => last = Some(e),
        }
    }
    Err(CliError::Invalid(format!(
        "[--start] no facet has an inward jet at {start:?}: {}",
        last.map(|e| e.to_string()).unwrap_or_default()
    )))
}

fn fmt_vec(dim: usize, v: &Vec3) -> String {
    (0..dim).map(|i| format!("{:.17e}", v[i])).collect::<Vec<_>>().join(",")
}

fn cmd_trace(run: &Run, start: Option<&[f64]>, dir: Option<&[f64]>, s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let params = run.cfg.trace_params(&d);
    match (start, dir) {
        (Some(start), Some(dir)) => {
            let jet = jet_from_args(&d, start, dir)?;
            let ray = trace_broken_ray(&d, &jet, &params).map_err(at("trace"))?;
            let mut csv = String::from("segment,facet_hit,length,start,dir\n");
            for (j, seg) in ray.segments.iter().enumerate() {
                let hit = seg.end_facet;
                csv.push_str(&format!(
                    "{j},{hit},{:.17e},\"{}\",\"{}\"\n",
                    seg.length,
                    fmt_vec(d.dim, &seg.start),
                    fmt_vec(d.dim, &seg.dir)
                ));
            }
            run.write_text("trace.csv", &csv, s)?;
            s.put("ray_status", ray.status);
            s.put("segments", ray.segments.len());
            s.put("length", format!("{:.17e}", ray.total_length()));
            if ray.is_regular() {
                let defect = line_coincidence_defect(&d, &ray).map_err(at("trace"))?;
                s.put("collinearity_defect", format!("{defect:.3e}"));
            }
        }
        (None, None) => {
            let sampling = run.cfg.sampling(&d)?;
            let mut counts = std::collections::BTreeMap::new();
            let mut csv = String::from("sample,facet,status,segments,length\n");
            for (i, smp) in sampling.samples.iter().enumerate() {
                let ray = trace_broken_ray(&d, &smp.jet, &params).map_err(at("trace"))?;
                *counts.entry(ray.status.as_str()).or_insert(0usize) += 1;
                csv.push_str(&format!(
                    "{i},{},{},{},{:.17e}\n",
                    smp.jet.facet,
                    ray.status,
                    ray.segments.len(),
                    ray.total_length()
                ));
            }
            run.write_text("rays.csv", &csv, s)?;
            s.put("rays", sampling.len());
            for (k, v) in counts {
                s.put(&format!("status.{k}"), v);
            }
        }
        _ => return Err(CliError::Invalid("give both --start and --dir, or neither".into())),
    }
    Ok(())
}

fn cmd_forward(
    run: &Run,
    start: Option<&[f64]>,
    dir: Option<&[f64]>,
    csv: bool,
    s: &mut Summary,
) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let grid = run.cfg.grid(&d)?;
    let f = render(&run.cfg.phantom(&d)?, &grid).map_err(at("phantom"))?.with_interp(run.cfg.grid.interp);
    run.write_field("phantom.brf", &f, s)?;
    let sampling = match (start, dir) {
        (Some(start), Some(dir)) => {
            let jet = jet_from_args(&d, start, dir)?;
            Arc::new(Sampling::explicit(&d, &[jet], &[1.0]).map_err(at("--start"))?)
        }
        (None, None) => run.cfg.sampling(&d)?,
        _ => return Err(CliError::Invalid("give both --start and --dir, or neither".into())),
    };
    let op = run.operator(&d, grid, sampling)?;
    let g = op.forward(&f).map_err(at("operator"))?;
    if start.is_some() {
        s.put("value", format!("{:.17e}", g.values[0]));
        s.put("ray_status", op.rows[0].status.map_or("NOT_TRACED", |r| r.as_str()));
    }
    let name = if csv { "sinogram.csv" } else { "sinogram.brs" };
    let p = run.artifact(name)?;
    save_sinogram(&p, &g).map_err(|e| CliError::Invalid(format!("{}: {e}", p.display())))?;
    s.put(&format!("artifact.{name}"), p.display());
    s.put("rows", op.n_rows());
    s.put("nnz", op.nnz());
    s.put("data_norm", format!("{:.17e}", g.norm()));
    Ok(())
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn cmd_adjoint_check(run: &Run, pairs: usize, s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let grid = run.cfg.grid(&d)?;
    let op = run.operator(&d, grid, run.cfg.sampling(&d)?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut worst: f64 = 0.0;
    for _ in 0..pairs.max(1) {
        let f = random_vec(&mut rng, op.n_in());
        let g = random_vec(&mut rng, op.n_out());
        let mut af = vec![0.0; op.n_out()];
        let mut atg = vec![0.0; op.n_in()];
        op.apply(&f, &mut af);
        op.apply_adjoint(&g, &mut atg);
        let scale = op.out_dot(&af, &af).sqrt() * op.out_dot(&g, &g).sqrt();
        if scale > 0.0 {
            worst = worst.max((op.out_dot(&af, &g) - op.in_dot(&f, &atg)).abs() / scale);
        }
    }
    s.put("pairs", pairs.max(1));
    s.put("rel_discrepancy", format!("{worst:.3e}"));
    if worst < 1e-10 {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("adjoint discrepancy {worst:.3e} exceeds 1e-10")))
    }
}

fn cmd_normal(run: &Run, pointwise: bool, s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let grid = run.cfg.grid(&d)?;
    let f = render(&run.cfg.phantom(&d)?, &grid).map_err(at("phantom"))?;
    let op = run.operator(&d, grid, run.cfg.sampling(&d)?)?;
    let split = normal_split(&op, &f).map_err(at("normal"))?;
    let full = op.normal_apply(&f.values);
    let total = split.total();
    let rel = l2_diff(&total.values, &full) / l2(&full);
    run.write_field("normal.brf", &ScalarGridField::from_values(grid, full.clone()).map_err(at("normal"))?, s)?;
    run.write_field("ballistic.brf", &split.ballistic, s)?;
    run.write_field("reflect.brf", &split.reflect, s)?;
    s.put("ballistic_norm", format!("{:.17e}", split.ballistic.norm_l2()));
    s.put("reflect_norm", format!("{:.17e}", split.reflect.norm_l2()));
    s.put("split_rel_error", format!("{rel:.3e}"));
    if pointwise {
        let att = run.cfg.attenuation(&d, &grid)?;
        let spec = run.cfg.operator_spec(&d)?;
        let model = RayModel { domain: &d, attenuation: &att, cutoff: spec.cutoff, trace: spec.trace };
        let pw = normal_pointwise(&model, &f, &DirectionQuadrature::default_for(d.dim));
        run.write_field("ballistic_pointwise.brf", &pw.ballistic, s)?;
        run.write_field("reflect_pointwise.brf", &pw.reflect, s)?;
        s.put("pointwise_rel_gap", format!("{:.3e}", l2_diff(&pw.total().values, &full) / l2(&full)));
    }
    Ok(())
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn l2_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn cmd_symbol(run: &Run, point: Option<&[f64]>, covector: &[f64], s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let grid = run.cfg.grid(&d)?;
    let xi = vec_from_slice(d.dim, covector).map_err(at("--covector"))?;
    if xi.norm() == 0.0 {
        return Err(CliError::Invalid("[--covector] must be nonzero".into()));
    }
    let xi = xi.normalize();
    let att = run.cfg.attenuation(&d, &grid)?;
    let spec = run.cfg.operator_spec(&d)?;
    let model = RayModel { domain: &d, attenuation: &att, cutoff: spec.cutoff, trace: spec.trace };
    let n_circle = run.cfg.visibility.n_circle;
    match point {
        Some(p) => {
            let x = vec_from_slice(d.dim, p).map_err(at("--point"))?;
            if !d.contains(&x) {
                return Err(CliError::Invalid("[--point] lies outside the domain".into()));
            }
            let a0 = ballistic_symbol(&model, &x, &xi, n_circle);
            s.put("a0", format!("{a0:.17e}"));
            s.put("elliptic", a0 > 0.0);
        }
        None => {
            let mut positive = 0;
            let values: Vec<f64> = (0..grid.len())
                .map(|i| {
                    let x = grid.center(i);
                    if d.contains(&x) {
                        ballistic_symbol(&model, &x, &xi, n_circle)
                    } else {
                        0.0
                    }
                })
                .inspect(|v| positive += usize::from(*v > 0.0))
                .collect();
            run.write_field("symbol.brf", &ScalarGridField::from_values(grid, values).map_err(at("grid"))?, s)?;
            s.put("elliptic_fraction", format!("{:.6}", positive as f64 / grid.len() as f64));
        }
    }
    Ok(())
}

fn cmd_visibility(run: &Run, s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let v = &run.cfg.visibility;
    let n = if d.dim == 2 { 32 } else { 12 };
    let dims = v.dims.clone().unwrap_or_else(|| vec![n; d.dim]);
    let grid = GridSpec::covering(&d.bounding_box(), d.dim, &dims).map_err(at("visibility"))?;
    let att = run.cfg.attenuation(&d, &run.cfg.grid(&d)?)?;
    let spec = run.cfg.operator_spec(&d)?;
    let model = RayModel { domain: &d, attenuation: &att, cutoff: spec.cutoff, trace: spec.trace };
    let covectors = match v.covectors {
        Some(n) => covector_grid(d.dim, n),
        None => crate::visibility::default_covectors(d.dim),
    };
    let search = SearchSpec { n_circle: v.n_circle, angular_tol: v.angular_tol, refine: v.refine };
    let map = visible_set_map(&model, grid, &covectors, &search);
    run.write_field("visible_fraction.brf", &map.fraction_field(), s)?;
    let invisible = map.invisible();
    let mut csv = String::from("x,xi\n");
    for (x, xi) in &invisible {
        csv.push_str(&format!("\"{}\",\"{}\"\n", fmt_vec(d.dim, x), fmt_vec(d.dim, xi)));
    }
    run.write_text("invisible.csv", &csv, s)?;
    let in_set = (0..map.cells.len()).filter(|p| map.in_visible_set(*p)).count();
    s.put("points", map.cells.len());
    s.put("covectors", covectors.len());
    s.put("invisible_covectors", invisible.len());
    s.put("visible_point_fraction", format!("{:.6}", in_set as f64 / map.cells.len().max(1) as f64));
    let samples: Vec<(Vec3, Vec3)> = (0..map.cells.len())
        .flat_map(|p| covectors.iter().map(move |xi| (p, *xi)))
        .map(|(p, xi)| (map.point(p), xi))
        .collect();
    let has_e = d.facets.iter().any(|f| f.label == FacetLabel::Measure);
    if has_e {
        let params = ConditionParams { depth: v.condition_depth, per_chord: 64, tol: spec.trace.delta_e };
        let report = check_condition_e(&d, &samples, &params);
        s.put("condition_checked", report.checked);
        s.put("condition_violations", report.violations.len());
    }
    // spot-check a witness so the summary says how visibility was decided
    if let Some((p, xi)) = samples.iter().find(|(x, xi)| covector_visible(&model, x, xi, &search).is_some()) {
        s.put("example_visible", format!("{}|{}", fmt_vec(d.dim, p), fmt_vec(d.dim, xi)));
    }
    Ok(())
}

fn cmd_reconstruct(run: &Run, data: Option<&Path>, s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let grid = run.cfg.grid(&d)?;
    let sampling = run.cfg.sampling(&d)?;
    let op = run.operator(&d, grid, sampling.clone())?;
    let phantom = run.cfg.phantom(&d)?;
    let (g, truth) = match data {
        Some(path) => {
            let raw = load_sinogram(path).map_err(|e| CliError::Invalid(format!("[--data] {}: {e}", e.code())))?;
            let g =
                raw.attach(sampling, 1e-12).map_err(|e| CliError::Invalid(format!("[--data] {}: {e}", e.code())))?;
            (g, None)
        }
        None => {
            let truth = render(&phantom, &grid).map_err(at("phantom"))?;
            let mut g = op.forward(&truth).map_err(at("operator"))?;
            add_noise(&mut g, run.cfg.solver.noise, run.seed)?;
            (g, Some(truth))
        }
    };
    let support = run.cfg.solver.support.or(phantom.support);
    let mask = support.map(|b| box_mask(&grid, &Vec3::from(b.lo), &Vec3::from(b.hi)));
    let cfg = SolverConfig {
        method: run.cfg.solver.method,
        max_iters: run.cfg.solver.max_iters,
        rel_tol: run.cfg.solver.rel_tol,
        step: run.cfg.solver.step,
        mask: mask.clone(),
    };
    let (rec, sol) = solve_field(&op, &g, &cfg).map_err(solver_error)?;
    run.write_field("reconstruction.brf", &rec, s)?;
    let mut log = String::from("iter,residual,normal_residual\n");
    for r in &sol.log {
        log.push_str(&format!("{},{:.17e},{:.17e}\n", r.iter, r.residual, r.normal_residual));
    }
    run.write_text("residuals.csv", &log, s)?;
    s.put("iterations", sol.iterations());
    s.put("solver_status", if sol.status == SolveStatus::Converged { "converged" } else { "max_iters" });
    if let Some(last) = sol.log.last() {
        s.put("residual", format!("{:.6e}", last.residual));
    }
    if let Some(truth) = truth {
        let all = vec![true; grid.len()];
        let m = mask.as_deref().unwrap_or(&all);
        s.put("rel_error", format!("{:.6e}", rel_error_on(&rec, &truth, m)));
    }
    Ok(())
}

fn solver_error(e: SolveError) -> CliError {
    match e {
        SolveError::Diverged { iter, residual } => {
            CliError::Numerical(format!("solver diverged at iteration {iter} (residual {residual:.3e})"))
        }
        e => invalid("solver", e),
    }
}

fn add_noise(g: &mut Sinogram, level: f64, seed: u64) -> Result<(), CliError> {
    if level == 0.0 {
        return Ok(());
    }
    if !(level > 0.0) {
        return Err(CliError::Invalid("[solver] noise must be nonnegative".into()));
    }
    let rms = (g.values.iter().map(|v| v * v).sum::<f64>() / g.values.len().max(1) as f64).sqrt();
    let normal = Normal::new(0.0, level * rms).map_err(at("solver"))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    g.values.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    Ok(())
}

fn cmd_stability(run: &Run, s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let grid = run.cfg.grid(&d)?;
    let op = run.operator(&d, grid, run.cfg.sampling(&d)?)?;
    let st = &run.cfg.stability;
    let support = st.support.or(run.cfg.phantom(&d)?.support).unwrap_or(SupportBox { lo: [0.25; 3], hi: [0.75; 3] });
    let mask = box_mask(&grid, &Vec3::from(support.lo), &Vec3::from(support.hi));
    let normal = |v: &[f64]| op.normal_apply(v);
    let rep = stability_probe(&normal, &grid, &mask, st.modes, st.n_probe, st.norm);
    let mut csv = String::from("index,ritz\n");
    for (i, r) in rep.ritz.iter().enumerate() {
        csv.push_str(&format!("{i},{r:.17e}\n"));
    }
    run.write_text("ritz.csv", &csv, s)?;
    s.put("basis_dim", rep.basis_dim);
    s.put("c_lower", format!("{:.6e}", rep.c_lower));
    Ok(())
}

fn cmd_perturb(run: &Run, s: &mut Summary) -> Result<(), CliError> {
    let d = run.cfg.domain()?;
    let grid = run.cfg.grid(&d)?;
    let p = &run.cfg.perturb;
    if p.deltas.is_empty() || p.deltas.iter().any(|x| !(*x > 0.0)) || !(p.radius > 0.0) {
        return Err(CliError::Invalid("[perturb] deltas and radius must be positive".into()));
    }
    let center = match &p.center {
        Some(c) => vec_from_slice(d.dim, c).map_err(at("perturb"))?,
        None => d.interior_point(),
    };
    let sigma0 = match run.cfg.attenuation(&d, &grid)? {
        Attenuation::Zero => ScalarGridField::zeros(grid),
        Attenuation::Constant(c) => ScalarGridField::from_fn(grid, |_| c),
        Attenuation::Grid(f) if f.grid == grid => f,
        _ => return Err(CliError::Invalid("[attenuation] perturbation needs a field on the run grid".into())),
    };
    let radius = p.radius;
    let pert = match p.kind {
        PerturbKind::Sigma => Perturbation::Sigma(ScalarGridField::from_fn(grid, |x| c2_bump(x, &center, radius))),
        PerturbKind::Alpha => {
            let m: Modulation = Arc::new(move |j: &BoundaryJet| c2_bump(&j.x, &center, radius.max(1.0)) + 0.5);
            Perturbation::Alpha(m)
        }
    };
    let f = render(&run.cfg.phantom(&d)?, &grid).map_err(at("phantom"))?;
    let table = perturbation_probe(
        &d,
        grid,
        run.cfg.sampling(&d)?,
        &sigma0,
        &run.cfg.operator_spec(&d)?,
        &pert,
        &p.deltas,
        &[f],
    )
    .map_err(at("perturb"))?;
    let mut csv = String::from("delta,ratio\n");
    for r in &table.rows {
        csv.push_str(&format!("{:.17e},{:.17e}\n", r.delta, r.ratio));
    }
    run.write_text("perturbation.csv", &csv, s)?;
    s.put("slope", format!("{:.6}", table.slope));
    Ok(())
}

fn cmd_invariants(run: &Run, only: Option<&[String]>, s: &mut Summary) -> Result<(), CliError> {
    let selected: Vec<&checks::Check> = match only {
        None => checks::CHECKS.iter().collect(),
        Some(keys) => keys
            .iter()
            .map(|k| checks::find(k.trim()).ok_or_else(|| CliError::Invalid(format!("[--only] unknown check '{k}'"))))
            .collect::<Result<_, _>>()?,
    };
    let mut report = String::new();
    let mut failed = Vec::new();
    for c in selected {
        let out = c.run(run.seed);
        eprintln!("{}", out.line());
        report.push_str(&out.line());
        report.push('\n');
        s.put(&format!("check.{}", out.name), if out.passed { "pass" } else { "fail" });
        if !out.passed {
            failed.push(out.name);
        }
    }
    run.write_text("invariants.txt", &report, s)?;
    s.put("failed", failed.len());
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("failed checks: {}", failed.join(","))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_full_config() {
        let text = r#"
seed = 7
domain = { kind = "square", measure = [0, 2] }
grid = { dims = [16, 16], interp = "multilinear" }
sampling = { density = 16.0, directions = 8 }
attenuation = { kind = "constant", value = 0.5 }
cutoff = { taper = 0.02 }
trace = { n_max = 3 }
[solver]
method = "landweber"
max_iters = 10
[phantom]
background = 0.0
[[phantom.primitives]]
kind = "bump"
center = [0.5, 0.5]
radius = 0.2
amplitude = 1.0
"#;
        let cfg = RunConfig::from_toml(text, Path::new(".")).unwrap();
        let d = cfg.domain().unwrap();
        assert_eq!(d.facets.iter().filter(|f| f.label == FacetLabel::Measure).count(), 2);
        assert_eq!(cfg.grid(&d).unwrap().dims, [16, 16, 1]);
        assert_eq!(cfg.solver.method, Method::Landweber);
        assert_eq!(cfg.cutoff(&d).unwrap().taper, Some(0.02));
        assert_eq!(cfg.seed(None), 7);
        assert_eq!(cfg.seed(Some(3)), 3);
    }

    #[test]
    fn rejects_unknown_keys_and_missing_files() {
        assert!(RunConfig::from_toml("bogus = 1", Path::new(".")).is_err());
        let err = RunConfig::from_toml("phantom_file = \"missing.toml\"", Path::new("/nonexistent")).unwrap_err();
        assert_eq!(err.exit_code(), EXIT_INVALID);
        let cfg = RunConfig::from_toml("domain = { kind = \"square\", measure = [7] }", Path::new(".")).unwrap();
        assert!(cfg.domain().unwrap_err().to_string().contains("[domain]"));
    }

    #[test]
    fn default_phantom_fits_support() {
        for dim in [2, 3] {
            let d = if dim == 2 { unit_square(&[]) } else { unit_cube(&[]) };
            let n = if dim == 2 { 32 } else { 12 };
            let grid = GridSpec::covering(&d.bounding_box(), dim, &vec![n; dim]).unwrap();
            assert!(render(&default_phantom(dim), &grid).is_ok());
        }
    }

    #[test]
    fn divergence_is_a_numerical_failure() {
        let e = solver_error(SolveError::Diverged { iter: 4, residual: 1e3 });
        assert_eq!(e.exit_code(), EXIT_NUMERICAL);
        assert_eq!(solver_error(SolveError::InvalidConfig("x".into())).exit_code(), EXIT_INVALID);
    }

    #[test]
    fn summary_is_key_value() {
        let mut s = Summary::default();
        s.put("a", 1);
        s.put("b", "x");
        assert_eq!(s.render(), "a=1\nb=x\n");
    }
}
