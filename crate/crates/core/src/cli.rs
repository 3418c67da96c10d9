//! The `phmm` command line.

use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use serde::Serialize;
use serde_json::{json, Value};

use crate::data::{compute_cutpoints, SurvivalDataset};
use crate::error::{Error, Result};
use crate::io::{read_dataset_path, write_dataset};
use crate::mcecm::{fit_problem, FitConfig, FitResult, Problem};
use crate::penalty::{PenaltyConfig, PenaltyKind};
use crate::sampler::SamplerConfig;
use crate::selection::{
    estimate_r, growth_ratio_from_eigenvalues, growth_ratio_r, lambda_grid, two_stage_search, GrowthRatio,
};
use crate::sim::{run_replicates, simulate_dataset, write_report_csv, BenchConfig, CovariancePreset, SimConfig};

#[derive(Debug, Parser)]
#[command(name = "phmm", version, about = "Penalized piecewise constant hazard mixed models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model at given penalties.
    Fit(FitArgs),
    /// Two-stage penalty search with BIC-ICQ.
    Select(SelectArgs),
    /// Growth Ratio estimate of the number of latent factors.
    EstimateR(EstimateRArgs),
    /// Write a simulated dataset as CSV.
    Simulate(SimulateArgs),
    /// Replicate simulation study.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelArgs {
    /// Number of baseline hazard intervals.
    #[arg(short = 'J', long = "intervals", default_value_t = 8)]
    pub intervals: usize,
    #[arg(long, default_value = "mcp")]
    pub penalty: String,
    /// Concavity; defaults to 3 (MCP) or 3.7 (SCAD).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Mixing between the concave penalty (1) and ridge (towards 0).
    #[arg(long, default_value_t = 1.0)]
    pub pi: f64,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
    #[arg(long, default_value_t = 25)]
    pub max_em: usize,
    #[arg(long, default_value_t = 50)]
    pub max_mstep: usize,
    #[arg(long, default_value_t = 250)]
    pub burnin: usize,
    /// Leave the random-intercept loading row unpenalized.
    #[arg(long)]
    pub exempt_intercept: bool,
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    /// Criterion ranking the penalty path: icq or marginal.
    #[arg(long, default_value = "icq")]
    pub criterion: String,
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

impl ModelArgs {
    fn penalty(&self) -> Result<PenaltyConfig> {
        let kind: PenaltyKind = self.penalty.parse()?;
        PenaltyConfig::new(kind, self.gamma.unwrap_or_else(|| kind.default_gamma()), self.pi)
    }

    pub fn fit_config(&self) -> Result<FitConfig> {
        if !(2..=50).contains(&self.intervals) {
            return Err(Error::InvalidParameter(format!("J must lie in [2, 50], got {}", self.intervals)));
        }
        if !(5..=10).contains(&self.intervals) {
            eprintln!("warning: {} intervals; 5 to 10 is the usual range", self.intervals);
        }
        let cfg = FitConfig {
            n_intervals: self.intervals,
            max_em: self.max_em,
            max_mstep: self.max_mstep,
            sampler: SamplerConfig { burnin: self.burnin, ..SamplerConfig::default() },
            penalty: self.penalty()?,
            penalize_intercept_row: !self.exempt_intercept,
            seed: self.seed,
            criterion: self.criterion.parse()?,
            ..FitConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub lambda0: f64,
    #[arg(long)]
    pub lambda1: f64,
    /// Latent factor count, or `auto` for the Growth Ratio.
    #[arg(long, default_value = "auto")]
    pub r: String,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SelectArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value = "auto")]
    pub r: String,
    #[arg(long, default_value_t = 10)]
    pub n_lambda: usize,
    /// `λ_min / λ_max`.
    #[arg(long, default_value_t = 0.05)]
    pub lambda_ratio: f64,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EstimateRArgs {
    /// Dataset CSV.
    #[arg(long, conflicts_with_all = ["matrix", "eigenvalues"])]
    pub input: Option<PathBuf>,
    /// Header-less CSV holding a `q × K` pseudo random effects matrix.
    #[arg(long, conflicts_with = "eigenvalues")]
    pub matrix: Option<PathBuf>,
    /// Comma-separated eigenvalues.
    #[arg(long, value_delimiter = ',')]
    pub eigenvalues: Option<Vec<f64>>,
    /// Largest factor count considered.
    #[arg(long)]
    pub u: Option<usize>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct StudyArgs {
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 25)]
    pub p: usize,
    /// True value of the first five coefficients.
    #[arg(long, default_value_t = 1.0)]
    pub beta: f64,
    #[arg(long, default_value = "moderate")]
    pub preset: String,
}

impl StudyArgs {
    fn sim_config(&self, seed: u64) -> Result<SimConfig> {
        SimConfig::paper(self.n, self.k, self.p, self.beta, self.preset.parse::<CovariancePreset>()?, seed)
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(flatten)]
    pub study: StudyArgs,
    #[arg(long, default_value_t = 2024)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BenchArgs {
    /// JSON report path; a CSV table is written next to it.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    pub replicates: usize,
    #[arg(long, default_value = "auto")]
    pub r: String,
    #[arg(long, default_value_t = 10)]
    pub n_lambda: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lambda_ratio: f64,
    #[command(flatten)]
    pub study: StudyArgs,
    #[command(flatten)]
    pub model: ModelArgs,
}

fn parse_r(r: &str) -> Result<Option<usize>> {
    if r.eq_ignore_ascii_case("auto") {
        return Ok(None);
    }
    match r.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(Some(v)),
        _ => Err(Error::InvalidParameter(format!("r must be 'auto' or a positive integer, got '{r}'"))),
    }
}

fn emit(output: Option<&PathBuf>, value: &Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match output {
        Some(path) => std::fs::write(path, text + "\n")?,
        None => {
            let mut out = std::io::stdout().lock();
            writeln!(out, "{text}")?;
        }
    }
    Ok(())
}

fn load_problem(input: &PathBuf, cfg: &FitConfig) -> Result<(SurvivalDataset, Problem)> {
    let data = read_dataset_path(input)?.standardized()?;
    let grid = compute_cutpoints(data.times(), data.status(), cfg.n_intervals)?;
    let problem = Problem::new(&data, &grid)?;
    Ok((data, problem))
}

fn resolve_r(r: &str, problem: &Problem, cfg: &FitConfig) -> Result<(usize, Option<GrowthRatio>)> {
    match parse_r(r)? {
        Some(v) => Ok((v, None)),
        None => {
            let (_, gr) = estimate_r(problem, cfg)?;
            Ok((gr.r_hat, Some(gr)))
        }
    }
}

/// Model summary with coefficients on both covariate scales.
fn model_json(data: &SurvivalDataset, problem: &Problem, fit: &FitResult) -> Value {
    let params = &fit.params;
    let std = data.standardization().expect("standardized data");
    let beta_orig = std.coefficients_to_original(params.beta.view());
    let mut psi_orig = params.psi_tilde.clone();
    psi_orig[0] += std.intercept_shift(params.beta.view());
    let names = data.covariate_names();
    let ranef_names: Vec<String> = std::iter::once("(Intercept)".to_string())
        .chain(problem.ranef_columns.iter().map(|&c| names[c].clone()))
        .collect();
    let rows = |m: &Array2<f64>| -> Vec<Vec<f64>> { m.rows().into_iter().map(|r| r.to_vec()).collect() };
    json!({
        "covariates": names,
        "random_effects": ranef_names,
        "cutpoints": problem.grid.cutpoints(),
        "psi_tilde": params.psi_tilde.to_vec(),
        "psi_tilde_original_scale": psi_orig.to_vec(),
        "beta_standardized": params.beta.to_vec(),
        "beta_original_scale": beta_orig.to_vec(),
        "hazard_ratios_original_scale": beta_orig.iter().map(|b| b.exp()).collect::<Vec<_>>(),
        "B": rows(&params.loadings),
        "Sigma": rows(&fit.sigma_hat),
        "selected_fixed": fit.selected_fixed.iter().map(|&l| names[l].clone()).collect::<Vec<_>>(),
        "selected_random": fit.selected_random.iter().map(|&t| ranef_names[t].clone()).collect::<Vec<_>>(),
        "lambda0": fit.lambda0,
        "lambda1": fit.lambda1,
        "q1": fit.q1_at_solution,
        "em_iterations": fit.em_iterations,
        "converged": fit.converged,
    })
}

fn gr_json(gr: &GrowthRatio) -> Value {
    json!({ "eigenvalues": gr.eigenvalues, "growth_ratios": gr.ratios, "u": gr.u, "r_hat": gr.r_hat })
}

fn run_fit(args: &FitArgs) -> Result<()> {
    let cfg = args.model.fit_config()?;
    let (data, problem) = load_problem(&args.input, &cfg)?;
    let (r, gr) = resolve_r(&args.r, &problem, &cfg)?;
    let fit = fit_problem(&problem, args.lambda0, args.lambda1, r, &cfg, None)?;
    let mut model = model_json(&data, &problem, &fit);
    model["r"] = json!(r);
    model["growth_ratio"] = gr.as_ref().map_or(Value::Null, gr_json);
    emit(args.output.as_ref(), &json!({ "command": "fit", "config": args, "fit_config": cfg, "model": model }))
}

fn run_select(args: &SelectArgs) -> Result<()> {
    let cfg = args.model.fit_config()?;
    let (data, problem) = load_problem(&args.input, &cfg)?;
    let (r, gr) = resolve_r(&args.r, &problem, &cfg)?;
    let grid = lambda_grid(&problem, r, &cfg, args.n_lambda, args.lambda_ratio)?;
    let path = two_stage_search(&problem, r, &cfg, &grid)?;
    let best = path.best();
    let mut model = model_json(&data, &problem, &best.fit);
    model["bic_icq"] = json!(best.bic_icq);
    model["bic_marginal"] = json!(best.bic_marginal);
    model["r"] = json!(r);
    let entries: Vec<Value> = path
        .stage1
        .iter()
        .chain(&path.stage2)
        .map(|e| {
            json!({
                "stage": e.stage,
                "lambda0": e.lambda0,
                "lambda1": e.lambda1,
                "bic_icq": e.bic_icq,
                "bic_marginal": e.bic_marginal,
                "dimension": e.dimension,
                "selected_fixed": e.fit.selected_fixed,
                "selected_random": e.fit.selected_random,
                "em_iterations": e.fit.em_iterations,
                "converged": e.fit.converged,
            })
        })
        .collect();
    emit(
        args.output.as_ref(),
        &json!({
            "command": "select",
            "config": args,
            "fit_config": cfg,
            "growth_ratio": gr.as_ref().map_or(Value::Null, gr_json),
            "lambda0_grid": grid.lambda0,
            "lambda1_grid": grid.lambda1,
            "lambda1_opt": path.lambda1_opt,
            "best_index": path.best_index,
            "model": model,
            "path": entries,
        }),
    )
}

fn read_matrix(path: &PathBuf) -> Result<Array2<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::InvalidData(format!("non-numeric matrix entry '{f}'"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    let k = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || k == 0 || rows.iter().any(|r| r.len() != k) {
        return Err(Error::DataSchema("matrix rows must be nonempty and of equal length".into()));
    }
    Ok(Array2::from_shape_fn((rows.len(), k), |(i, j)| rows[i][j]))
}

fn run_estimate_r(args: &EstimateRArgs) -> Result<()> {
    let gr = if let Some(eig) = &args.eigenvalues {
        let mut eig = eig.clone();
        eig.sort_by(|a, b| b.total_cmp(a));
        let u = args.u.unwrap_or_else(|| eig.len().saturating_sub(2).min(10));
        growth_ratio_from_eigenvalues(&eig, u)?
    } else if let Some(path) = &args.matrix {
        growth_ratio_r(&read_matrix(path)?, args.u)?
    } else if let Some(input) = &args.input {
        let cfg = args.model.fit_config()?;
        let (_, problem) = load_problem(input, &cfg)?;
        let (pseudo, _) = estimate_r(&problem, &cfg)?;
        growth_ratio_r(&pseudo.g, args.u)?
    } else {
        return Err(Error::InvalidParameter("give one of --input, --matrix or --eigenvalues".into()));
    };
    emit(args.output.as_ref(), &json!({ "command": "estimate-r", "config": args, "result": gr_json(&gr) }))
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let sim = args.study.sim_config(args.seed)?;
    let data = simulate_dataset(&sim)?;
    match &args.output {
        Some(path) => write_dataset(&data, std::fs::File::create(path)?),
        None => write_dataset(&data, std::io::stdout().lock()),
    }
}

fn run_bench(args: &BenchArgs) -> Result<()> {
    let fit = args.model.fit_config()?;
    let sim = args.study.sim_config(args.model.seed)?;
    let bench = BenchConfig {
        fit,
        r: parse_r(&args.r)?,
        n_lambda: args.n_lambda,
        lambda_ratio: args.lambda_ratio,
        threads: args.model.threads,
    };
    let report = run_replicates(&sim, &bench, args.replicates)?;
    if let Some(path) = &args.output {
        write_report_csv(&report, std::fs::File::create(path.with_extension("csv"))?)?;
    }
    emit(args.output.as_ref(), &json!({ "command": "bench", "config": args, "report": report }))
}

impl Cli {
    pub fn threads(&self) -> usize {
        match &self.command {
            Command::Fit(a) => a.model.threads,
            Command::Select(a) => a.model.threads,
            Command::EstimateR(a) => a.model.threads,
            Command::Simulate(_) => 1,
            Command::Bench(a) => a.model.threads,
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Select(a) => run_select(a),
        Command::EstimateR(a) => run_estimate_r(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Bench(a) => run_bench(a),
    }
}

/// Error report written to stderr on failure.
pub fn error_json(err: &Error) -> String {
    json!({ "code": err.code(), "message": err.to_string() }).to_string()
}
