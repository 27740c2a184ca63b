//! Experiment runner behind the `hieranderson` binary: TOML configs in,
//! deterministic CSV records and a JSON summary out.
//!
//! CSV content depends only on the config and the master seed, never on
//! thread count or wall-clock time; timestamps appear in the JSON summary
//! only.

use crate::analysis::{
    bracketing_check, continuity_grid, covariance_check, exponent_fit, exponent_fit_ln,
    mc_ids, tail_lower_analytic, tail_mc, tail_upper_pipeline, FitTransform, KappaRule,
    TailUpperParams,
};
use crate::error::{Error, Result};
use crate::hierarchy::HierarchicalStructure;
use crate::logdomain::LogProb;
use crate::operators::{exact_free_spectrum, ids_free, Boundary, FiniteVolumeHamiltonian};
use crate::randomness::{birkhoff_average, sample_potential, SingleSiteDistribution};
use crate::spectra::eigenvalues_dense;
use crate::weights::{spectral_dimension, TailRule, WeightSequence};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

fn default_master_seed() -> u64 {
    1
}
fn default_replicas() -> usize {
    100
}
fn default_threads() -> usize {
    1
}
fn default_dense_cap() -> usize {
    4096
}
fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}
fn default_grid_points() -> usize {
    20
}
fn default_psi_count() -> usize {
    8
}
fn default_rho() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Homogeneous branching degree; mutually exclusive with `factors`.
    pub n: Option<u32>,
    /// Explicit branching factors `n_1, n_2, ...`; ranks beyond the list
    /// reuse the last factor.
    pub factors: Option<Vec<u32>>,
    #[serde(default = "default_rho")]
    pub rho: f64,
    pub max_rank: usize,
    /// Explicit coupling weights `p_1, p_2, ...` overriding the geometric
    /// sequence; the tail continues geometrically with `rho`.
    pub weights: Option<Vec<f64>>,
}

impl ModelConfig {
    pub fn structure(&self) -> Result<HierarchicalStructure> {
        match (&self.n, &self.factors) {
            (Some(n), None) => HierarchicalStructure::homogeneous(*n, self.max_rank),
            (None, Some(f)) => {
                let ext = *f.last().ok_or_else(|| {
                    Error::Config("model.factors must be non-empty".into())
                })?;
                HierarchicalStructure::explicit(f, ext, self.max_rank)
            }
            (Some(_), Some(_)) => Err(Error::Config(
                "model.n and model.factors are mutually exclusive".into(),
            )),
            (None, None) => Err(Error::Config(
                "one of model.n or model.factors is required".into(),
            )),
        }
    }

    pub fn weight_sequence(&self) -> Result<WeightSequence> {
        match &self.weights {
            None => WeightSequence::geometric(self.rho),
            Some(p) => WeightSequence::explicit(
                p.clone(),
                TailRule::GeometricContinuation { rho: self.rho },
            ),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default = "default_master_seed")]
    pub master_seed: u64,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default = "default_dense_cap")]
    pub dense_cap: usize,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub emit_plot_data: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            master_seed: default_master_seed(),
            replicas: default_replicas(),
            threads: default_threads(),
            dense_cap: default_dense_cap(),
            out_dir: default_out_dir(),
            emit_plot_data: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumConfig {
    pub kappa: usize,
    pub boundary: Boundary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IdsConfig {
    pub kappa: usize,
    pub boundary: Boundary,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    /// Explicit energy grid; when absent a continuity grid is generated.
    pub energies: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BracketingConfig {
    pub kappa: usize,
    pub ranks: Vec<usize>,
    pub samples: usize,
    #[serde(default = "default_psi_count")]
    pub psi_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankRule {
    KOfE,
    BigK,
    Fixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailConfig {
    pub energies: Vec<f64>,
    pub rule: RankRule,
    /// Free parameter of the `k(E)` rule.
    pub alpha: Option<f64>,
    /// Rank for `rule = "fixed"`.
    pub kappa: Option<usize>,
    #[serde(default)]
    pub analytic: bool,
    #[serde(default)]
    pub temple: bool,
    pub temple_energy: Option<f64>,
    pub temple_alpha: Option<f64>,
    pub temple_kappa: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExponentConfig {
    pub transform: FitTransform,
    /// "free" fits the closed-form free tail; "analytic" fits the analytic
    /// lower bound carried in the log domain.
    pub source: String,
    pub m_min: i32,
    pub m_max: i32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErgodicConfig {
    /// Averaging rank of the Birkhoff sums.
    pub r: usize,
    pub window_rank: usize,
    pub seeds: u64,
    pub covariance_kappa: usize,
    pub covariance_rank: usize,
    pub covariance_samples: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub potential: SingleSiteDistribution,
    #[serde(default)]
    pub run: RunConfig,
    pub spectrum: Option<SpectrumConfig>,
    pub ids: Option<IdsConfig>,
    pub bracketing: Option<BracketingConfig>,
    pub tail: Option<TailConfig>,
    pub exponent: Option<ExponentConfig>,
    pub ergodic: Option<ErgodicConfig>,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.structure()?;
        self.model.weight_sequence()?;
        if self.run.replicas == 0 {
            return Err(Error::Config("run.replicas must be >= 1".into()));
        }
        if self.run.threads == 0 {
            return Err(Error::Config("run.threads must be >= 1".into()));
        }
        Ok(())
    }
}

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub replicas: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub dense_cap: Option<usize>,
    pub emit_plot_data: bool,
}

impl CliOverrides {
    fn apply(&self, run: &mut RunConfig) {
        if let Some(s) = self.seed {
            run.master_seed = s;
        }
        if let Some(r) = self.replicas {
            run.replicas = r;
        }
        if let Some(d) = &self.out_dir {
            run.out_dir = d.clone();
        }
        if let Some(t) = self.threads {
            run.threads = t;
        }
        if let Some(c) = self.dense_cap {
            run.dense_cap = c;
        }
        if self.emit_plot_data {
            run.emit_plot_data = true;
        }
    }
}

/// One CSV row. `value` is the quantity in linear scale (zero when it
/// underflows `f64`); `log10_value` carries tiny values exactly.
#[derive(Debug, Clone)]
pub struct ResultRecord {
    pub experiment: String,
    pub e: f64,
    pub value: f64,
    pub log10_value: Option<f64>,
    pub stderr: Option<f64>,
    pub method: String,
    pub kappa: usize,
    pub replicas: usize,
}

impl ResultRecord {
    fn plain(
        experiment: &str,
        e: f64,
        value: f64,
        stderr: Option<f64>,
        method: &str,
        kappa: usize,
        replicas: usize,
    ) -> Self {
        Self {
            experiment: experiment.into(),
            e,
            value,
            log10_value: None,
            stderr,
            method: method.into(),
            kappa,
            replicas,
        }
    }

    fn logged(
        experiment: &str,
        e: f64,
        value: LogProb,
        stderr: Option<f64>,
        method: &str,
        kappa: usize,
        replicas: usize,
    ) -> Self {
        let log10 = value.log10();
        Self {
            experiment: experiment.into(),
            e,
            value: value.value(),
            log10_value: if log10.is_finite() { Some(log10) } else { None },
            stderr,
            method: method.into(),
            kappa,
            replicas,
        }
    }
}

pub const CSV_HEADER: &str =
    "experiment,param_hash,E,value,stderr,method,kappa,replicas,log10_value";

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

/// Render records to CSV text (17 significant digits throughout).
pub fn render_csv(records: &[ResultRecord], param_hash: &str) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in records {
        s.push_str(&format!(
            "{},{},{:.16e},{:.16e},{},{},{},{},{}\n",
            r.experiment,
            param_hash,
            r.e,
            r.value,
            fmt_opt(r.stderr),
            r.method,
            r.kappa,
            r.replicas,
            fmt_opt(r.log10_value),
        ));
    }
    s
}

/// Short hash identifying the experiment parameters. Excludes thread
/// count, output directory, and plot flags so reruns that only change
/// execution details keep the same hash.
pub fn param_hash(cfg: &ExperimentConfig, experiment: &str) -> String {
    #[derive(Serialize)]
    struct Hashed<'a> {
        experiment: &'a str,
        model: &'a ModelConfig,
        potential: &'a SingleSiteDistribution,
        master_seed: u64,
        replicas: usize,
        dense_cap: usize,
        spectrum: &'a Option<SpectrumConfig>,
        ids: &'a Option<IdsConfig>,
        bracketing: &'a Option<BracketingConfig>,
        tail: &'a Option<TailConfig>,
        exponent: &'a Option<ExponentConfig>,
        ergodic: &'a Option<ErgodicConfig>,
    }
    let h = Hashed {
        experiment,
        model: &cfg.model,
        potential: &cfg.potential,
        master_seed: cfg.run.master_seed,
        replicas: cfg.run.replicas,
        dense_cap: cfg.run.dense_cap,
        spectrum: &cfg.spectrum,
        ids: &cfg.ids,
        bracketing: &cfg.bracketing,
        tail: &cfg.tail,
        exponent: &cfg.exponent,
        ergodic: &cfg.ergodic,
    };
    let json = serde_json::to_string(&h).expect("config serialization");
    let digest = Sha256::digest(json.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    hex[..12].to_string()
}

/// Outcome of one runner invocation.
#[derive(Debug)]
pub struct RunOutcome {
    pub experiment: String,
    pub records: usize,
    pub invariants: BTreeMap<String, bool>,
    pub csv_path: PathBuf,
    pub json_path: PathBuf,
}

impl RunOutcome {
    pub fn violations(&self) -> usize {
        self.invariants.values().filter(|ok| !**ok).count()
    }
}

struct Ctx {
    structure: HierarchicalStructure,
    weights: WeightSequence,
    dist: SingleSiteDistribution,
    run: RunConfig,
}

const NUMERIC_TOL: f64 = 1e-10;

fn section<'a, T>(opt: &'a Option<T>, name: &str) -> Result<&'a T> {
    opt.as_ref()
        .ok_or_else(|| Error::Config(format!("config is missing the [{name}] section")))
}

type ExperimentOutput = (Vec<ResultRecord>, BTreeMap<String, bool>);

fn run_spectrum(ctx: &Ctx, cfg: &SpectrumConfig) -> Result<ExperimentOutput> {
    let spec = exact_free_spectrum(&ctx.structure, &ctx.weights, cfg.kappa, cfg.boundary)?;
    let mut records = Vec::new();
    for &(e, mult) in &spec.pairs {
        records.push(ResultRecord::plain(
            "spectrum", e, mult as f64, None, "exact-free", cfg.kappa, 0,
        ));
    }
    let free = FiniteVolumeHamiltonian::free(
        ctx.structure.clone(),
        ctx.weights.clone(),
        cfg.kappa,
        cfg.boundary,
    )?;
    let dense = eigenvalues_dense(&free.dense_matrix(ctx.run.dense_cap)?)?;
    let expanded = spec.expand();
    let max_dev = dense
        .iter()
        .zip(&expanded)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let mut invariants = BTreeMap::new();
    invariants.insert("exact_spectrum_matches_dense".into(), max_dev <= NUMERIC_TOL);
    invariants.insert(
        "multiplicities_sum_to_volume".into(),
        spec.total_multiplicity() == ctx.structure.volume(cfg.kappa),
    );

    let omega = sample_potential(
        &ctx.dist,
        free.dim(),
        ctx.run.master_seed,
        0,
    )?
    .omega;
    let sampled = FiniteVolumeHamiltonian::new(
        ctx.structure.clone(),
        ctx.weights.clone(),
        cfg.kappa,
        cfg.boundary,
        Some(omega),
    )?;
    for e in eigenvalues_dense(&sampled.dense_matrix(ctx.run.dense_cap)?)? {
        records.push(ResultRecord::plain(
            "spectrum", e, 1.0, None, "sampled-replica0", cfg.kappa, 1,
        ));
    }
    Ok((records, invariants))
}

fn run_ids(ctx: &Ctx, cfg: &IdsConfig) -> Result<ExperimentOutput> {
    let energies = match &cfg.energies {
        Some(e) => e.clone(),
        None => continuity_grid(&ctx.weights, &ctx.dist, cfg.grid_points),
    };
    let mut records = Vec::new();
    let mut estimates = Vec::new();
    for boundary in [Boundary::Neumann, Boundary::Dirichlet] {
        let est = mc_ids(
            &ctx.structure,
            &ctx.weights,
            &ctx.dist,
            boundary,
            cfg.kappa,
            &energies,
            ctx.run.replicas,
            ctx.run.master_seed,
            ctx.run.dense_cap,
        )?;
        let method = match boundary {
            Boundary::Neumann => "mc-neumann",
            Boundary::Dirichlet => "mc-dirichlet",
        };
        for i in 0..energies.len() {
            records.push(ResultRecord::plain(
                "ids",
                energies[i],
                est.mean[i],
                Some(est.std_err[i]),
                method,
                cfg.kappa,
                ctx.run.replicas,
            ));
        }
        estimates.push(est);
    }
    if ctx.run.emit_plot_data {
        for &e in &energies {
            let shift = 0.5 * (ctx.dist.support().0 + ctx.dist.support().1);
            let v = ids_free(&ctx.structure, &ctx.weights, e - shift)?;
            records.push(ResultRecord::plain(
                "ids", e, v, None, "reference-free-shifted", 0, 0,
            ));
        }
    }
    let (n, d) = (&estimates[0], &estimates[1]);
    let ordered = (0..energies.len()).all(|i| {
        let se = (n.std_err[i].powi(2) + d.std_err[i].powi(2)).sqrt();
        d.mean[i] <= n.mean[i] + 3.0 * se + NUMERIC_TOL
    });
    let mut invariants = BTreeMap::new();
    invariants.insert("dirichlet_below_neumann_3sigma".into(), ordered);
    Ok((records, invariants))
}

fn run_bracketing(ctx: &Ctx, cfg: &BracketingConfig) -> Result<ExperimentOutput> {
    let dim = ctx.structure.volume(cfg.kappa) as usize;
    let mut records = Vec::new();
    let mut invariants = BTreeMap::new();
    for &r in &cfg.ranks {
        let mut worst: f64 = 0.0;
        let mut worst_gap: f64 = 0.0;
        for sample in 0..cfg.samples as u64 {
            let omega =
                sample_potential(&ctx.dist, dim, ctx.run.master_seed, sample)?.omega;
            let rep = bracketing_check(
                &ctx.structure,
                &ctx.weights,
                cfg.kappa,
                r,
                &omega,
                cfg.psi_count,
                ctx.run.master_seed.wrapping_add(sample),
                ctx.run.dense_cap,
            )?;
            worst = worst.max(rep.max_violation());
            worst_gap = worst_gap.max(rep.gap_deviation);
        }
        records.push(ResultRecord::plain(
            "bracketing",
            r as f64,
            worst,
            None,
            "max-violation",
            cfg.kappa,
            cfg.samples,
        ));
        records.push(ResultRecord::plain(
            "bracketing",
            r as f64,
            worst_gap,
            None,
            "max-gap-deviation",
            cfg.kappa,
            cfg.samples,
        ));
        invariants.insert(format!("bracketing_r{r}"), worst <= NUMERIC_TOL);
        invariants.insert(format!("gap_identity_r{r}"), worst_gap <= NUMERIC_TOL);
    }
    Ok((records, invariants))
}

fn run_tail(ctx: &Ctx, cfg: &TailConfig) -> Result<ExperimentOutput> {
    let mut records = Vec::new();
    let mut invariants = BTreeMap::new();
    let rule = match cfg.rule {
        RankRule::BigK => KappaRule::BigK,
        RankRule::KOfE => {
            let n = ctx.structure.homogeneous_degree().ok_or_else(|| {
                Error::Config("rule = \"k_of_e\" needs a homogeneous model".into())
            })?;
            KappaRule::KOfE {
                dim: spectral_dimension(n, ctx.weights.rho().ok_or_else(|| {
                    Error::Config("rule = \"k_of_e\" needs geometric weights".into())
                })?)?,
                alpha: cfg
                    .alpha
                    .ok_or_else(|| Error::Config("rule = \"k_of_e\" needs alpha".into()))?,
            }
        }
        RankRule::Fixed => KappaRule::Fixed(cfg.kappa.ok_or_else(|| {
            Error::Config("rule = \"fixed\" needs tail.kappa".into())
        })?),
    };
    let rows = tail_mc(
        &ctx.structure,
        &ctx.weights,
        &ctx.dist,
        &cfg.energies,
        &rule,
        ctx.run.replicas,
        ctx.run.master_seed,
        ctx.run.dense_cap,
    )?;
    for row in &rows {
        for est in [&row.neumann_lower, &row.dirichlet_upper] {
            records.push(ResultRecord::logged(
                "tail",
                est.energy,
                est.value,
                est.std_err,
                &est.method.to_string(),
                est.kappa,
                est.replicas,
            ));
        }
        records.push(ResultRecord::plain(
            "tail",
            row.energy,
            row.emax_exceed_freq,
            None,
            "emax-exceed-freq",
            row.kappa,
            ctx.run.replicas,
        ));
        records.push(ResultRecord::plain(
            "tail",
            row.energy,
            row.trial_bound_violation,
            None,
            "trial-bound-violation",
            row.kappa,
            ctx.run.replicas,
        ));
        let se = (row.neumann_lower.std_err.unwrap_or(0.0).powi(2)
            + row.dirichlet_upper.std_err.unwrap_or(0.0).powi(2))
        .sqrt();
        invariants.insert(
            format!("tail_ordering_E{}", row.energy),
            row.neumann_lower.value.value()
                <= row.dirichlet_upper.value.value() + 3.0 * se + NUMERIC_TOL,
        );
        invariants.insert(
            format!("trial_bound_E{}", row.energy),
            row.trial_bound_violation <= NUMERIC_TOL,
        );
        if cfg.analytic {
            let est =
                tail_lower_analytic(&ctx.structure, &ctx.weights, &ctx.dist, row.energy)?;
            records.push(ResultRecord::logged(
                "tail",
                est.energy,
                est.value,
                None,
                &est.method.to_string(),
                est.kappa,
                0,
            ));
        }
    }
    if cfg.temple {
        let n = ctx.structure.homogeneous_degree().ok_or_else(|| {
            Error::Config("tail.temple needs a homogeneous model".into())
        })?;
        let rho = ctx
            .weights
            .rho()
            .ok_or_else(|| Error::Config("tail.temple needs geometric weights".into()))?;
        let dim = spectral_dimension(n, rho)?;
        let params = TailUpperParams {
            energy: cfg
                .temple_energy
                .ok_or_else(|| Error::Config("tail.temple_energy required".into()))?,
            alpha: cfg
                .temple_alpha
                .ok_or_else(|| Error::Config("tail.temple_alpha required".into()))?,
            replicas: ctx.run.replicas,
            master_seed: ctx.run.master_seed,
            dense_cap: ctx.run.dense_cap,
            kappa_override: cfg.temple_kappa,
        };
        let rep = tail_upper_pipeline(&ctx.structure, &ctx.weights, &dim, &ctx.dist, &params)?;
        let est = &rep.estimate;
        records.push(ResultRecord::logged(
            "tail",
            est.energy,
            est.value,
            est.std_err,
            &est.method.to_string(),
            est.kappa,
            est.replicas,
        ));
        for (name, v) in [
            ("diag-q", rep.diagnostics.q),
            ("diag-z", rep.diagnostics.z),
            ("diag-fmax", rep.diagnostics.f_max),
            ("diag-rate-bound", rep.diagnostics.rate_bound.unwrap_or(f64::NAN)),
        ] {
            records.push(ResultRecord::plain(
                "tail", est.energy, v, None, name, rep.kappa, 0,
            ));
        }
        invariants.insert(
            "temple_precondition_all".into(),
            rep.precondition_passes == rep.replicas,
        );
        invariants.insert(
            "temple_chain".into(),
            rep.simplified_bound_violation <= NUMERIC_TOL
                && rep.temple_violation <= NUMERIC_TOL
                && rep.tilde_ordering_violation <= NUMERIC_TOL,
        );
    }
    Ok((records, invariants))
}

fn run_exponent(ctx: &Ctx, cfg: &ExponentConfig) -> Result<ExperimentOutput> {
    if cfg.m_min >= cfg.m_max {
        return Err(Error::Config("exponent.m_min must be < m_max".into()));
    }
    let energies: Vec<f64> = (cfg.m_min..=cfg.m_max).map(|m| 2f64.powi(-m)).collect();
    let mut records = Vec::new();
    let fit = match cfg.source.as_str() {
        "free" => {
            let points: Vec<(f64, f64)> = energies
                .iter()
                .map(|&e| {
                    ids_free(&ctx.structure, &ctx.weights, 1.0 - e).map(|v| (e, 1.0 - v))
                })
                .collect::<Result<_>>()?;
            for &(e, v) in &points {
                records.push(ResultRecord::plain(
                    "exponent", e, v, None, "free-tail", 0, 0,
                ));
            }
            exponent_fit(&points, cfg.transform)?
        }
        "analytic" => {
            let points: Vec<(f64, LogProb)> = energies
                .iter()
                .map(|&e| {
                    tail_lower_analytic(&ctx.structure, &ctx.weights, &ctx.dist, e)
                        .map(|t| (e, t.value))
                })
                .collect::<Result<_>>()?;
            for &(e, v) in &points {
                records.push(ResultRecord::logged(
                    "exponent", e, v, None, "analytic-lower", 0, 0,
                ));
            }
            exponent_fit_ln(&points, cfg.transform)?
        }
        other => {
            return Err(Error::Config(format!(
                "exponent.source must be \"free\" or \"analytic\", got {other:?}"
            )))
        }
    };
    records.push(ResultRecord::plain(
        "exponent",
        0.5 * (fit.window.0 + fit.window.1),
        fit.slope,
        Some(fit.residual),
        "fit-slope",
        0,
        fit.points,
    ));
    let mut invariants = BTreeMap::new();
    invariants.insert("fit_slope_finite".into(), fit.slope.is_finite());
    Ok((records, invariants))
}

fn run_ergodic(ctx: &Ctx, cfg: &ErgodicConfig) -> Result<ExperimentOutput> {
    let max = ctx.structure.max_rank();
    for (name, r) in [
        ("ergodic.r", cfg.r),
        ("ergodic.window_rank", cfg.window_rank),
        ("ergodic.covariance_kappa", cfg.covariance_kappa),
        ("ergodic.covariance_rank", cfg.covariance_rank),
    ] {
        if r > max {
            return Err(Error::Config(format!(
                "{name} = {r} exceeds model.max_rank = {max}"
            )));
        }
    }
    if cfg.window_rank > cfg.r || cfg.covariance_kappa > cfg.covariance_rank {
        return Err(Error::Config(
            "window/inner ranks must not exceed their enclosing ranks".into(),
        ));
    }
    let vol = ctx.structure.volume(cfg.r) as usize;
    let mut records = Vec::new();
    let mut invariants = BTreeMap::new();

    // Birkhoff averages of the site observable against the ensemble mean
    let (mean, sd) = match ctx.dist {
        SingleSiteDistribution::Uniform { a, b } => {
            ((a + b) / 2.0, (b - a) / 12f64.sqrt())
        }
        SingleSiteDistribution::TwoPoint { v_minus, v_plus, q } => {
            let m = q * v_plus + (1.0 - q) * v_minus;
            (m, ((v_plus - v_minus).powi(2) * q * (1.0 - q)).sqrt())
        }
        SingleSiteDistribution::PowerTail { v_minus, mu } => {
            let m = v_minus * mu / (mu + 1.0);
            let m2 = v_minus * v_minus * mu / (mu + 2.0);
            (m, (m2 - m * m).max(0.0).sqrt())
        }
    };
    let sigma = sd / (vol as f64).sqrt();
    let mut within = 0u64;
    for seed_off in 0..cfg.seeds {
        let omega = sample_potential(
            &ctx.dist,
            vol,
            ctx.run.master_seed.wrapping_add(seed_off),
            0,
        )?
        .omega;
        let avg = birkhoff_average(&ctx.structure, &omega, cfg.r, cfg.window_rank, |w| {
            w[0]
        })?;
        let dev_sigmas = if sigma > 0.0 { (avg - mean).abs() / sigma } else { 0.0 };
        if dev_sigmas <= 4.0 {
            within += 1;
        }
        records.push(ResultRecord::plain(
            "ergodic",
            seed_off as f64,
            avg,
            Some(sigma),
            "birkhoff-site-mean",
            cfg.r,
            1,
        ));
    }
    records.push(ResultRecord::plain(
        "ergodic",
        mean,
        within as f64 / cfg.seeds as f64,
        None,
        "birkhoff-within-4sigma",
        cfg.r,
        cfg.seeds as usize,
    ));
    // allow one 4-sigma outlier per 20 seeds
    let allowed_misses = cfg.seeds / 20 + 1;
    invariants.insert(
        "birkhoff_concentration".into(),
        cfg.seeds - within <= allowed_misses,
    );

    // covariance of the truncated operator under every shift of Q_R
    let big_vol = ctx.structure.volume(cfg.covariance_rank) as usize;
    let mut worst: f64 = 0.0;
    for sample in 0..cfg.covariance_samples {
        let omega =
            sample_potential(&ctx.dist, big_vol, ctx.run.master_seed, sample)?.omega;
        for k in 0..big_vol as u64 {
            let x = ctx.structure.index_to_point(k)?;
            let dev = covariance_check(
                &ctx.structure,
                &ctx.weights,
                cfg.covariance_kappa,
                cfg.covariance_rank,
                &omega,
                &x,
            )?;
            worst = worst.max(dev);
        }
    }
    records.push(ResultRecord::plain(
        "ergodic",
        0.0,
        worst,
        None,
        "covariance-max-deviation",
        cfg.covariance_kappa,
        cfg.covariance_samples as usize,
    ));
    invariants.insert("covariance_identity".into(), worst <= 1e-14);
    Ok((records, invariants))
}

fn run_selfcheck(ctx: &Ctx) -> Result<ExperimentOutput> {
    let mut records = Vec::new();
    let mut invariants = BTreeMap::new();
    let kappa = ctx.structure.max_rank().min(3);

    // exact free spectra against dense diagonalization, both boundaries
    for boundary in [Boundary::Neumann, Boundary::Dirichlet] {
        let spec = exact_free_spectrum(&ctx.structure, &ctx.weights, kappa, boundary)?;
        let free = FiniteVolumeHamiltonian::free(
            ctx.structure.clone(),
            ctx.weights.clone(),
            kappa,
            boundary,
        )?;
        let dense = eigenvalues_dense(&free.dense_matrix(ctx.run.dense_cap)?)?;
        let dev = dense
            .iter()
            .zip(spec.expand())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        invariants.insert(format!("spectrum_{boundary}"), dev <= NUMERIC_TOL);
        records.push(ResultRecord::plain(
            "selfcheck", 0.0, dev, None, &format!("spectrum-dev-{boundary}"), kappa, 0,
        ));
    }

    // fast apply against the dense matrix on a random sample
    let dim = ctx.structure.volume(kappa) as usize;
    let omega = sample_potential(&ctx.dist, dim, ctx.run.master_seed, 0)?.omega;
    let h = FiniteVolumeHamiltonian::new(
        ctx.structure.clone(),
        ctx.weights.clone(),
        kappa,
        Boundary::Neumann,
        Some(omega.clone()),
    )?;
    let m = h.dense_matrix(ctx.run.dense_cap)?;
    let psi: Vec<f64> = (0..dim).map(|i| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5).collect();
    let fast = h.apply(&psi)?;
    let mut dev: f64 = 0.0;
    for i in 0..dim {
        let slow: f64 = (0..dim).map(|j| m[(i, j)] * psi[j]).sum();
        dev = dev.max((fast[i] - slow).abs());
    }
    invariants.insert("fast_apply_matches_dense".into(), dev <= 1e-12);
    records.push(ResultRecord::plain(
        "selfcheck", 0.0, dev, None, "apply-dev", kappa, 0,
    ));

    // Dirichlet-Neumann gap is exactly the tail
    let hn = FiniteVolumeHamiltonian::new(
        ctx.structure.clone(),
        ctx.weights.clone(),
        kappa,
        Boundary::Neumann,
        Some(omega.clone()),
    )?;
    let hd = FiniteVolumeHamiltonian::new(
        ctx.structure.clone(),
        ctx.weights.clone(),
        kappa,
        Boundary::Dirichlet,
        Some(omega),
    )?;
    let en = eigenvalues_dense(&hn.dense_matrix(ctx.run.dense_cap)?)?;
    let ed = eigenvalues_dense(&hd.dense_matrix(ctx.run.dense_cap)?)?;
    let tail = ctx.weights.tail(kappa);
    let gap_dev = en
        .iter()
        .zip(&ed)
        .map(|(n, d)| (d - n - tail).abs())
        .fold(0.0f64, f64::max);
    invariants.insert("boundary_gap_identity".into(), gap_dev <= NUMERIC_TOL);
    records.push(ResultRecord::plain(
        "selfcheck", 0.0, gap_dev, None, "gap-dev", kappa, 0,
    ));

    // reproducibility: identical seeds give identical draws
    let s1 = sample_potential(&ctx.dist, dim, ctx.run.master_seed, 7)?.omega;
    let s2 = sample_potential(&ctx.dist, dim, ctx.run.master_seed, 7)?.omega;
    invariants.insert("sampling_reproducible".into(), s1 == s2);

    // group structure: translations permute cluster members
    let mut group_ok = true;
    'outer: for xi in 0..dim as u64 {
        let x = ctx.structure.index_to_point(xi)?;
        for yi in 0..dim as u64 {
            let y = ctx.structure.index_to_point(yi)?;
            let sum = ctx.structure.group_add(&x, &y)?;
            let back = ctx.structure.group_add(&ctx.structure.group_neg(&x)?, &sum)?;
            if ctx.structure.point_to_index(&back)? != yi {
                group_ok = false;
                break 'outer;
            }
        }
    }
    invariants.insert("group_inverse_identity".into(), group_ok);

    // covariance identity for a handful of shifts
    if kappa >= 1 {
        let inner = kappa - 1;
        let omega = sample_potential(&ctx.dist, dim, ctx.run.master_seed, 1)?.omega;
        let mut worst: f64 = 0.0;
        for k in 0..dim.min(8) as u64 {
            let x = ctx.structure.index_to_point(k)?;
            worst = worst.max(covariance_check(
                &ctx.structure,
                &ctx.weights,
                inner,
                kappa,
                &omega,
                &x,
            )?);
        }
        invariants.insert("covariance_identity".into(), worst <= 1e-14);
        records.push(ResultRecord::plain(
            "selfcheck", 0.0, worst, None, "covariance-dev", inner, 0,
        ));
    }
    Ok((records, invariants))
}

/// Run one experiment end to end: load config, apply overrides, execute
/// in a dedicated thread pool, write CSV and JSON summary.
pub fn run(experiment: &str, config_path: &Path, overrides: &CliOverrides) -> Result<RunOutcome> {
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    overrides.apply(&mut cfg.run);
    let ctx = Ctx {
        structure: cfg.model.structure()?,
        weights: cfg.model.weight_sequence()?,
        dist: cfg.potential,
        run: cfg.run.clone(),
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.run.threads)
        .build()
        .map_err(|e| Error::Resource(format!("thread pool: {e}")))?;
    let (records, invariants) = pool.install(|| -> Result<ExperimentOutput> {
        match experiment {
            "spectrum" => run_spectrum(&ctx, section(&cfg.spectrum, "spectrum")?),
            "ids" => run_ids(&ctx, section(&cfg.ids, "ids")?),
            "bracketing" => run_bracketing(&ctx, section(&cfg.bracketing, "bracketing")?),
            "tail" => run_tail(&ctx, section(&cfg.tail, "tail")?),
            "exponent" => run_exponent(&ctx, section(&cfg.exponent, "exponent")?),
            "ergodic" => run_ergodic(&ctx, section(&cfg.ergodic, "ergodic")?),
            "selfcheck" => run_selfcheck(&ctx),
            other => Err(Error::Config(format!("unknown experiment {other:?}"))),
        }
    })?;

    std::fs::create_dir_all(&ctx.run.out_dir)?;
    let hash = param_hash(&cfg, experiment);
    let csv_path = ctx.run.out_dir.join(format!("{experiment}_{hash}.csv"));
    let json_path = ctx.run.out_dir.join(format!("{experiment}_{hash}.json"));
    let mut f = std::fs::File::create(&csv_path)?;
    f.write_all(render_csv(&records, &hash).as_bytes())?;

    let summary = serde_json::json!({
        "experiment": experiment,
        "param_hash": hash,
        "config": {
            "model": cfg.model,
            "potential": cfg.potential,
            "run": cfg.run,
        },
        "master_seed": ctx.run.master_seed,
        "records": records.len(),
        "invariants": invariants,
        "violations": invariants.values().filter(|ok| !**ok).count(),
        "finished_unix_ms": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0),
    });
    std::fs::write(&json_path, serde_json::to_string_pretty(&summary)? + "\n")?;

    Ok(RunOutcome {
        experiment: experiment.into(),
        records: records.len(),
        invariants,
        csv_path,
        json_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"
[model]
n = 2
rho = 2.0
max_rank = 6

[potential]
kind = "uniform"
a = -1.0
b = 0.0

[run]
master_seed = 7
replicas = 20
threads = 1
dense_cap = 256

[spectrum]
kappa = 3
boundary = "neumann"

[ids]
kappa = 3
grid_points = 10
boundary = "neumann"

[bracketing]
kappa = 3
ranks = [1, 2]
samples = 5

[tail]
energies = [0.5]
rule = "big_k"
analytic = true

[exponent]
transform = "van_hove"
source = "free"
m_min = 4
m_max = 10

[ergodic]
r = 6
window_rank = 1
seeds = 5
covariance_kappa = 1
covariance_rank = 2
covariance_samples = 2
"#;

    fn write_cfg(dir: &Path) -> PathBuf {
        let p = dir.join("cfg.toml");
        std::fs::write(&p, BASE).unwrap();
        p
    }

    #[test]
    fn all_experiments_run_clean() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_cfg(tmp.path());
        let overrides = CliOverrides {
            out_dir: Some(tmp.path().join("out")),
            ..Default::default()
        };
        for exp in [
            "spectrum", "ids", "bracketing", "tail", "exponent", "ergodic", "selfcheck",
        ] {
            let outcome = run(exp, &cfg, &overrides).unwrap();
            assert_eq!(outcome.violations(), 0, "{exp}: {:?}", outcome.invariants);
            assert!(outcome.csv_path.exists());
            assert!(outcome.json_path.exists());
            let text = std::fs::read_to_string(&outcome.csv_path).unwrap();
            assert!(text.starts_with(CSV_HEADER));
        }
    }

    #[test]
    fn csv_identical_across_thread_counts() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = write_cfg(tmp.path());
        let mut bytes = Vec::new();
        for threads in [1usize, 4] {
            let overrides = CliOverrides {
                threads: Some(threads),
                out_dir: Some(tmp.path().join(format!("out{threads}"))),
                ..Default::default()
            };
            let outcome = run("ids", &cfg, &overrides).unwrap();
            bytes.push(std::fs::read(&outcome.csv_path).unwrap());
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn overrides_change_hash_inputs() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg_path = write_cfg(tmp.path());
        let cfg = ExperimentConfig::from_path(&cfg_path).unwrap();
        let h1 = param_hash(&cfg, "ids");
        let mut cfg2 = cfg.clone();
        cfg2.run.master_seed = 8;
        let h2 = param_hash(&cfg2, "ids");
        assert_ne!(h1, h2);
        // thread count does not enter the hash
        let mut cfg3 = cfg.clone();
        cfg3.run.threads = 16;
        assert_eq!(param_hash(&cfg3, "ids"), h1);
    }

    #[test]
    fn missing_section_is_a_config_error() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("min.toml");
        std::fs::write(
            &p,
            "[model]\nn = 2\nrho = 2.0\nmax_rank = 2\n\n[potential]\nkind = \"uniform\"\na = -1.0\nb = 0.0\n",
        )
        .unwrap();
        let overrides = CliOverrides {
            out_dir: Some(tmp.path().join("out")),
            ..Default::default()
        };
        assert!(matches!(run("ids", &p, &overrides), Err(Error::Config(_))));
        // selfcheck needs no section
        assert_eq!(run("selfcheck", &p, &overrides).unwrap().violations(), 0);
    }
}
