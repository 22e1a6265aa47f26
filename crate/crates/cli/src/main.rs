use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use tbs_core::baselines::{cv_select, default_grid, lasso_fit, quantile_lasso_fit, CvMethod, CvResult};
use tbs_core::consistency::{
    bound_study, consistency_curve, lemma_fuzz, write_bound_csv, write_curve_csv, ConsistencyCurve,
    CurveConfig, FuzzReport, LemmaConstant, LemmaRule,
};
use tbs_core::io::{ingest_csv, write_chain_jsonl, write_json, FitSummary, SUMMARY_VERSION};
use tbs_core::metrics::{ppl, quantile_curve_table, residual_table, write_qq_csv, write_quantile_csv, ResidualKind};
use tbs_core::rng::{derive_seed, stream};
use tbs_core::samplers::{run_chain, select_support, McmcConfig};
use tbs_core::simlab::{generate, preset, run_study, Method, Scenario, StudyConfig};
use tbs_core::{Dataset, Error, ModelSpec, PriorHyper};

#[derive(Parser)]
#[command(name = "tbs", version, about = "Transform-both-sides Bayesian variable selection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model to a CSV file or to data simulated from a preset.
    Fit(Common),
    /// Run a replicated simulation study and write its report.
    Simulate(Common),
    /// Support-posterior curves, bound checks and inequality fuzzing on the contrast design.
    Consistency(Common),
    /// Cross-validated LASSO or quantile LASSO fit.
    Baseline(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// tbs, tbso, tbst, tbss or tbscn.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    replications: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct InputConfig {
    path: Option<PathBuf>,
    response: Option<String>,
    standardize: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BoundConfig {
    etas: Vec<f64>,
    n: usize,
    replications: usize,
    beta01: f64,
    sigma0: f64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        BoundConfig { etas: vec![0.8, 1.2, 1.8], n: 20, replications: 100, beta01: 3.0, sigma0: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct LemmaConfig {
    instances: usize,
    ks: Vec<usize>,
}

impl Default for LemmaConfig {
    fn default() -> Self {
        LemmaConfig { instances: 100_000, ks: vec![2, 3, 5] }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ConsistencySection {
    curve: CurveConfig,
    bounds: BoundConfig,
    lemma: LemmaConfig,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum BaselineKind {
    #[default]
    Lasso,
    Quantile,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct BaselineSection {
    method: BaselineKind,
    tau: f64,
    folds: usize,
    grid_size: usize,
    grid_ratio: f64,
}

impl Default for BaselineSection {
    fn default() -> Self {
        BaselineSection { method: BaselineKind::Lasso, tau: 0.5, folds: 5, grid_size: 50, grid_ratio: 1e-3 }
    }
}

/// Everything a command needs. Loaded from `--config`, then overridden by flags.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    model: Option<String>,
    preset: Option<String>,
    scenario: Option<Scenario>,
    replications: Option<usize>,
    input: InputConfig,
    hyper: PriorHyper,
    mcmc: McmcConfig,
    threshold: f64,
    alphas: Vec<f64>,
    methods: Vec<Method>,
    study: StudyConfig,
    consistency: ConsistencySection,
    baseline: BaselineSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: None,
            out: None,
            model: None,
            preset: None,
            scenario: None,
            replications: None,
            input: InputConfig::default(),
            hyper: PriorHyper::default(),
            mcmc: McmcConfig::default(),
            threshold: 0.5,
            alphas: vec![0.05, 0.25, 0.75, 0.95],
            methods: Method::ALL.to_vec(),
            study: StudyConfig::default(),
            consistency: ConsistencySection::default(),
            baseline: BaselineSection::default(),
        }
    }
}

impl RunConfig {
    fn load(flags: &Common) -> Result<Self> {
        let mut cfg = match &flags.config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
            }
            None => RunConfig::default(),
        };
        if flags.seed.is_some() {
            cfg.seed = flags.seed;
        }
        if flags.out.is_some() {
            cfg.out = flags.out.clone();
        }
        if flags.model.is_some() {
            cfg.model = flags.model.clone();
        }
        if flags.preset.is_some() {
            cfg.preset = flags.preset.clone();
            cfg.scenario = None;
        }
        if flags.replications.is_some() {
            cfg.replications = flags.replications;
        }
        Ok(cfg)
    }

    fn seed(&self) -> Result<u64> {
        self.seed.ok_or_else(|| anyhow!("a seed is required (--seed or \"seed\" in the config)"))
    }

    fn out_dir(&self) -> Result<PathBuf> {
        let dir = self.out.clone().unwrap_or_else(|| PathBuf::from("."));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(dir)
    }

    fn model(&self) -> Result<Option<ModelSpec>> {
        self.model.as_deref().map(|m| m.parse::<ModelSpec>()).transpose().map_err(Into::into)
    }

    fn scenario(&self, seed: u64) -> Result<Option<Scenario>> {
        let sc = match (&self.scenario, &self.preset) {
            (Some(sc), _) => Some(sc.clone()),
            (None, Some(id)) => Some(preset(id)?),
            (None, None) => None,
        };
        Ok(sc.map(|mut sc| {
            sc.seed = seed;
            sc
        }))
    }

    /// The CSV input if one is configured, otherwise one dataset drawn from the scenario.
    fn dataset(&self, seed: u64) -> Result<Dataset> {
        if let Some(path) = &self.input.path {
            let response = self.input.response.as_deref().ok_or_else(|| anyhow!("input.response is required"))?;
            let ing = ingest_csv(path, response, &self.input.standardize)?;
            if !ing.dropped_rows.is_empty() {
                eprintln!("dropped {} rows with missing values", ing.dropped_rows.len());
            }
            return Ok(ing.data);
        }
        let sc = self.scenario(seed)?.ok_or_else(|| anyhow!("need input.path, --preset or a scenario"))?;
        let (data, _) = generate(&sc, &mut stream(seed, &[0]))?;
        Ok(data)
    }
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let path = dir.join(name);
    let f = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

#[derive(Serialize)]
struct Diagnostic {
    error: String,
    iteration: Option<usize>,
    block: Option<String>,
}

enum Outcome {
    Done,
    Diverged,
}

fn fit(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.seed()?;
    let dir = cfg.out_dir()?;
    let spec = cfg.model()?.unwrap_or(ModelSpec::TbsSg);
    let data = cfg.dataset(seed)?;
    let mcmc = McmcConfig { seed: derive_seed(seed, &[1]), ..cfg.mcmc.clone() };
    let chain = match run_chain(&data, spec, &cfg.hyper, &mcmc) {
        Ok(c) => c,
        Err(e @ Error::Divergence { .. }) => {
            let (iteration, block) = match &e {
                Error::Divergence { iteration, block } => (Some(*iteration), Some(block.clone())),
                _ => (None, None),
            };
            write_json(&Diagnostic { error: e.to_string(), iteration, block }, create(&dir, "diagnostic.json")?)?;
            eprintln!("{e}; diagnostic written to {}", dir.join("diagnostic.json").display());
            return Ok(Outcome::Diverged);
        }
        Err(e) => return Err(e.into()),
    };
    write_chain_jsonl(&chain, create(&dir, "chain.jsonl")?)?;
    let support = select_support(&chain, cfg.threshold)?;
    let summary = FitSummary {
        version: SUMMARY_VERSION,
        model: spec,
        n: data.n(),
        p: data.p(),
        covariate_names: data.covariate_names.clone(),
        draws: chain.draws.len(),
        seed,
        ppl: ppl(&chain, &data, false)?,
        acceptance: chain.acceptance.clone(),
        support,
    };
    write_json(&summary, create(&dir, "summary.json")?)?;
    let fitted = summary.support.fitted_model(spec);
    let gamma = summary.support.shifts.as_ref().map(|s| s.gamma_hat.as_slice());
    for (kind, name) in [(ResidualKind::Raw, "residuals_raw.csv"), (ResidualKind::Transformed, "residuals_transformed.csv")] {
        write_qq_csv(&residual_table(&fitted, &data, kind, gamma), create(&dir, name)?)?;
    }
    write_quantile_csv(&quantile_curve_table(&fitted, &data, &cfg.alphas)?, create(&dir, "quantiles.csv")?)?;
    println!("selected {:?}", summary.support.selected);
    Ok(Outcome::Done)
}

fn simulate(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.seed()?;
    let dir = cfg.out_dir()?;
    let sc = cfg.scenario(seed)?.ok_or_else(|| anyhow!("simulate needs --preset or a scenario"))?;
    let methods = match cfg.model()? {
        Some(spec) => vec![Method::ALL.into_iter().find(|m| m.model() == Some(spec)).expect("every model is a method")],
        None => cfg.methods.clone(),
    };
    if methods.is_empty() {
        bail!("no methods to run");
    }
    let study = StudyConfig { mcmc: cfg.mcmc.clone(), hyper: cfg.hyper.clone(), ..cfg.study.clone() };
    let report = run_study(&sc, &methods, cfg.replications.unwrap_or(50), &study)?;
    report.write_csv(create(&dir, "study.csv")?)?;
    write_json(&report, create(&dir, "study.json")?)?;
    for r in &report.rows {
        println!(
            "{:<16} k {:.2}  M {:.1}%  S {:.1}%  JD {:.0}%",
            r.method,
            r.metrics.n_selected,
            100.0 * r.metrics.masking,
            100.0 * r.metrics.swamping,
            100.0 * r.metrics.joint_detection
        );
    }
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct ConsistencyReport {
    curve: ConsistencyCurve,
    bound_checks: usize,
    bounds_vacuous: usize,
    bound_violations: usize,
    lemma: Vec<FuzzReport>,
}

fn consistency(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.seed()?;
    let dir = cfg.out_dir()?;
    if cfg.model.is_some() {
        bail!("--model does not apply to the consistency command");
    }
    let sec = &cfg.consistency;
    let curve_cfg = CurveConfig {
        seed: derive_seed(seed, &[0]),
        replications: cfg.replications.unwrap_or(sec.curve.replications),
        ..sec.curve.clone()
    };
    let curve = consistency_curve(&curve_cfg)?;
    write_curve_csv(&curve, create(&dir, "curve.csv")?)?;

    let b = &sec.bounds;
    let bounds = bound_study(
        &b.etas,
        b.n,
        b.replications,
        b.beta01,
        b.sigma0,
        &curve_cfg.prior,
        &curve_cfg.quad,
        derive_seed(seed, &[1]),
    )?;
    write_bound_csv(&bounds, create(&dir, "bounds.csv")?)?;

    let mut lemma = Vec::new();
    for (i, rule) in [LemmaRule::MaxMagnitude, LemmaRule::TwoCoefficientCases].into_iter().enumerate() {
        lemma.push(lemma_fuzz(sec.lemma.instances, &sec.lemma.ks, rule, LemmaConstant::General, derive_seed(seed, &[2, i as u64]))?);
        lemma.push(lemma_fuzz(sec.lemma.instances, &[2], rule, LemmaConstant::TwoCoefficient, derive_seed(seed, &[3, i as u64]))?);
    }
    let report = ConsistencyReport {
        bound_checks: bounds.len(),
        bounds_vacuous: bounds.iter().filter(|r| r.check.vacuous).count(),
        bound_violations: bounds.iter().filter(|r| !r.check.holds).count(),
        curve,
        lemma,
    };
    write_json(&report, create(&dir, "consistency.json")?)?;
    for r in &report.curve.rows {
        println!("n {:>4}  p {:>4}  mean P(S0|D) {:.4}", r.n, r.p, r.mean_posterior);
    }
    println!("non-decreasing: {}", report.curve.non_decreasing);
    Ok(Outcome::Done)
}

#[derive(Serialize)]
struct BaselineReport {
    method: BaselineKind,
    tau: Option<f64>,
    cv: CvResult,
    intercept: f64,
    beta: Vec<f64>,
    selected: Vec<usize>,
}

fn baseline(cfg: &RunConfig) -> Result<Outcome> {
    let seed = cfg.seed()?;
    let dir = cfg.out_dir()?;
    if cfg.model.is_some() {
        bail!("--model does not apply to the baseline command");
    }
    let data = cfg.dataset(seed)?;
    let b = &cfg.baseline;
    let method = match b.method {
        BaselineKind::Lasso => CvMethod::Lasso,
        BaselineKind::Quantile => CvMethod::Quantile { tau: b.tau },
    };
    let grid = default_grid(&data, method, b.grid_size, b.grid_ratio);
    let cv = cv_select(&data, method, b.folds, &grid, derive_seed(seed, &[1]))?;
    let (intercept, beta) = match method {
        CvMethod::Lasso => {
            let f = lasso_fit(&data, cv.lambda)?;
            (f.intercept, f.beta)
        }
        CvMethod::Quantile { tau } => {
            let f = quantile_lasso_fit(&data, tau, cv.lambda)?;
            (f.intercept, f.beta)
        }
    };
    let selected = (0..beta.len()).filter(|&j| beta[j] != 0.0).collect::<Vec<_>>();
    println!("lambda {:e}, selected {selected:?}", cv.lambda);
    let report = BaselineReport {
        method: b.method,
        tau: (b.method == BaselineKind::Quantile).then_some(b.tau),
        cv,
        intercept,
        beta,
        selected,
    };
    write_json(&report, create(&dir, "baseline.json")?)?;
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (flags, run): (&Common, fn(&RunConfig) -> Result<Outcome>) = match &cli.command {
        Command::Fit(c) => (c, fit),
        Command::Simulate(c) => (c, simulate),
        Command::Consistency(c) => (c, consistency),
        Command::Baseline(c) => (c, baseline),
    };
    match RunConfig::load(flags).and_then(|cfg| run(&cfg)) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Diverged) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
