//! Command line front end.
//!
//! One TOML file configures everything, in four sections: `[dgp]`, `[run]`,
//! `[io]` and `[verify]`. Unknown keys are rejected. Flags given on the
//! command line override the file.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::datagen::{generate, DgpConfig, DGP_KEYS};
use crate::error::{Error, Result};
use crate::estimators::{CovariateSet, EstimatorKind, EstimatorOptions};
use crate::inference::{estimate_with_bootstrap, monte_carlo, reports_csv, reports_table, BootstrapConfig, McConfig};
use crate::oracle::{verify_identification, PopulationModel};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_ESTIMATION: i32 = 3;
pub const EXIT_VERIFICATION: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    #[default]
    Table,
    Csv,
    Json,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n: usize,
    pub replicates: usize,
    /// Bootstrap resamples; 0 disables the bootstrap.
    pub bootstrap: usize,
    pub folds: usize,
    pub tau: f64,
    /// Master seed for replicates, resamples and folds.
    pub seed: u64,
    pub estimators: Vec<String>,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub fixed_nuisance: bool,
    pub aipcw_covariates: CovariateSet,
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            n: 1500,
            replicates: 1000,
            bootstrap: 200,
            folds: 5,
            tau: 0.5,
            seed: 20_230_501,
            estimators: vec!["pee".into(), "pce".into(), "pmdre".into()],
            threads: 0,
            fixed_nuisance: false,
            aipcw_covariates: CovariateSet::ProxiesAsCovariates,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub format: OutputFormat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    pub grid_step: f64,
    pub panels: usize,
    pub order: usize,
    pub mc_draws: usize,
    pub mc_seed: u64,
    pub perturbation: f64,
}

impl Default for VerifySection {
    fn default() -> Self {
        let m = PopulationModel::default();
        VerifySection {
            grid_step: m.grid_step,
            panels: m.panels,
            order: m.order,
            mc_draws: m.mc_draws,
            mc_seed: m.mc_seed,
            perturbation: m.perturbation,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dgp: DgpConfig,
    pub run: RunSection,
    pub io: IoSection,
    pub verify: VerifySection,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.dgp.validate()?;
        let r = &self.run;
        if !(r.tau > 0.0) || !r.tau.is_finite() {
            return Err(Error::Config(format!("run.tau must be > 0, got {}", r.tau)));
        }
        if r.n == 0 {
            return Err(Error::Config("run.n must be at least 1".into()));
        }
        if r.estimators.is_empty() {
            return Err(Error::Config("run.estimators must not be empty".into()));
        }
        self.estimators()?;
        if r.bootstrap == 1 {
            return Err(Error::Config("run.bootstrap must be 0 or at least 2".into()));
        }
        if r.folds < 2 {
            return Err(Error::Config(format!("run.folds must be at least 2, got {}", r.folds)));
        }
        Ok(())
    }

    pub fn estimators(&self) -> Result<Vec<EstimatorKind>> {
        self.run.estimators.iter().map(|s| s.parse()).collect()
    }

    pub fn estimator_options(&self) -> EstimatorOptions {
        EstimatorOptions {
            tau: self.run.tau,
            folds: self.run.folds,
            fold_seed: self.run.seed,
            aipcw_covariates: self.run.aipcw_covariates,
        }
    }

    pub fn bootstrap(&self) -> Option<BootstrapConfig> {
        (self.run.bootstrap > 0).then(|| BootstrapConfig {
            resamples: self.run.bootstrap,
            seed: self.run.seed,
            fixed_nuisance: self.run.fixed_nuisance,
            ..BootstrapConfig::default()
        })
    }

    pub fn mc_config(&self) -> Result<McConfig> {
        Ok(McConfig {
            replicates: self.run.replicates,
            n: self.run.n,
            master_seed: self.run.seed,
            estimators: self.estimators()?,
            options: self.estimator_options(),
            bootstrap: self.bootstrap(),
            theta0: None,
        })
    }

    pub fn population_model(&self) -> PopulationModel {
        let v = &self.verify;
        PopulationModel {
            dgp: self.dgp.clone(),
            grid_step: v.grid_step,
            panels: v.panels,
            order: v.order,
            mc_draws: v.mc_draws,
            mc_seed: v.mc_seed,
            perturbation: v.perturbation,
            ..PopulationModel::default()
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "proxsurv", version, about = "Proximal survival estimation under dependent censoring")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// TOML configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides run.seed and dgp.seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides run.threads
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output directory (overrides io.output)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Output format (overrides io.format)
    #[arg(long, global = true, value_enum)]
    pub format: Option<OutputFormat>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a dataset from the configured design and write it as CSV
    Simulate,
    /// Estimate P(T > tau) from a CSV dataset
    Estimate {
        /// Input CSV (overrides io.input)
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Repeated simulation study with bootstrap standard errors
    McStudy,
    /// Check the identification identities at the population level
    Verify,
}

fn config_keys_help() -> String {
    let mut s = String::from("Configuration keys and defaults:\n  [dgp]\n");
    for (k, v) in DGP_KEYS {
        s.push_str(&format!("    {k} = {v}\n"));
    }
    let r = RunSection::default();
    s.push_str("  [run]\n");
    s.push_str(&format!("    n = {}\n    replicates = {}\n", r.n, r.replicates));
    s.push_str(&format!("    bootstrap = {}   (0 disables)\n    folds = {}\n", r.bootstrap, r.folds));
    s.push_str(&format!("    tau = {}\n    seed = {}\n", r.tau, r.seed));
    s.push_str("    estimators = [\"pee\", \"pce\", \"pmdre\"]   (any of pee, pce, pmdre, prdre, km, aipcw)\n");
    s.push_str("    threads = 0   (0 uses all cores)\n    fixed_nuisance = false\n");
    s.push_str("    aipcw_covariates = \"proxies-as-covariates\"   (or \"x-only\")\n");
    s.push_str("  [io]\n    input = (none)\n    output = (none: stdout only)\n    format = \"table\"   (table, csv, json)\n");
    let v = VerifySection::default();
    s.push_str(&format!(
        "  [verify]\n    grid_step = {}\n    panels = {}\n    order = {}\n    mc_draws = {}\n    mc_seed = {}\n    perturbation = {}\n",
        v.grid_step, v.panels, v.order, v.mc_draws, v.mc_seed, v.perturbation
    ));
    s.push_str("\nExit codes: 0 success, 2 configuration or input error, 3 estimation failure, 4 verification failure.");
    s
}

pub fn command() -> clap::Command {
    Cli::command().after_help(config_keys_help())
}

/// Resolved configuration: file contents with command line overrides.
pub fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
        cfg.dgp.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.run.threads = t;
    }
    if let Some(o) = &cli.out {
        cfg.io.output = Some(o.clone());
    }
    if let Some(f) = cli.format {
        cfg.io.format = f;
    }
    if let Command::Estimate { input: Some(p) } = &cli.command {
        cfg.io.input = Some(p.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_artifact(dir: &Option<PathBuf>, name: &str, bytes: &[u8]) -> Result<()> {
    if let Some(d) = dir {
        fs::create_dir_all(d)?;
        fs::write(d.join(name), bytes)?;
    }
    Ok(())
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Estimation(e.to_string()))
}

/// Executes the subcommand, writing the primary report to `stdout`.
/// Returns the exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = resolve(cli)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.run.threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let (code, buf) = pool.install(|| -> Result<(i32, Vec<u8>)> {
        let mut buf = Vec::new();
        let code = execute(&cli.command, &cfg, &mut buf)?;
        Ok((code, buf))
    })?;
    stdout.write_all(&buf)?;
    Ok(code)
}

fn execute(command: &Command, cfg: &RunConfig, stdout: &mut Vec<u8>) -> Result<i32> {
    let out_dir = &cfg.io.output;
    match command {
        Command::Simulate => {
            let ds = generate(&cfg.dgp, cfg.run.n)?;
            let mut buf = Vec::new();
            ds.write_csv(&mut buf)?;
            write_artifact(out_dir, "data.csv", &buf)?;
            if out_dir.is_none() {
                stdout.write_all(&buf)?;
            } else {
                writeln!(
                    stdout,
                    "wrote {} subjects ({:.1}% censored) to data.csv",
                    ds.len(),
                    100.0 * ds.censoring_fraction()
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::Estimate { .. } => {
            let input = cfg
                .io
                .input
                .as_ref()
                .ok_or_else(|| Error::Config("estimate needs an input CSV (--input or io.input)".into()))?;
            let ds = Dataset::read_csv(input)?;
            let data = ds.observed();
            let kinds = cfg.estimators()?;
            let reports = estimate_with_bootstrap(&data, &kinds, &cfg.estimator_options(), cfg.bootstrap().as_ref())?;
            let mut csv_buf = Vec::new();
            reports_csv(&reports, &mut csv_buf)?;
            let json_text = json(&reports)?;
            let table = reports_table(&reports);
            write_artifact(out_dir, "estimates.csv", &csv_buf)?;
            write_artifact(out_dir, "estimates.json", json_text.as_bytes())?;
            write_artifact(out_dir, "estimates.txt", table.as_bytes())?;
            match cfg.io.format {
                OutputFormat::Table => stdout.write_all(table.as_bytes())?,
                OutputFormat::Csv => stdout.write_all(&csv_buf)?,
                OutputFormat::Json => writeln!(stdout, "{json_text}")?,
            }
            Ok(EXIT_OK)
        }
        Command::McStudy => {
            let study = monte_carlo(&cfg.dgp, &cfg.mc_config()?)?;
            let table = study.table();
            let summary = study.summary_json()?;
            let mut records = Vec::new();
            study.write_records_csv(&mut records)?;
            write_artifact(out_dir, "summary.txt", table.as_bytes())?;
            write_artifact(out_dir, "summary.json", summary.as_bytes())?;
            write_artifact(out_dir, "replicates.csv", &records)?;
            match cfg.io.format {
                OutputFormat::Table => stdout.write_all(table.as_bytes())?,
                OutputFormat::Csv => stdout.write_all(&records)?,
                OutputFormat::Json => writeln!(stdout, "{summary}")?,
            }
            let failed: usize = study.summaries.iter().map(|s| s.failed).sum();
            Ok(if failed > 0 { EXIT_ESTIMATION } else { EXIT_OK })
        }
        Command::Verify => {
            let report = verify_identification(&cfg.population_model(), cfg.run.tau)?;
            let table = report.table();
            let text = report.to_json()?;
            write_artifact(out_dir, "verify.txt", table.as_bytes())?;
            write_artifact(out_dir, "verify.json", text.as_bytes())?;
            match cfg.io.format {
                OutputFormat::Json => writeln!(stdout, "{text}")?,
                _ => stdout.write_all(table.as_bytes())?,
            }
            Ok(if report.passed() { EXIT_OK } else { EXIT_VERIFICATION })
        }
    }
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Input(_) | Error::Csv(_) => EXIT_CONFIG,
        Error::Estimation(_) => EXIT_ESTIMATION,
        Error::Verification(_) => EXIT_VERIFICATION,
        Error::Io(_) => EXIT_OTHER,
    }
}

/// Parses `args`, runs, and reports errors on stderr. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return EXIT_CONFIG;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(&cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
