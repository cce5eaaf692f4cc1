//! Command-line surface: `fit`, `simulate`, `diagnose` and `compare`.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 a fit did not
//! converge (results are still written), 4 I/O failure, 5 numerical failure.

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::diagnostics::{confounding_correlations, decompose_patterns, ModelComparison};
use crate::error::{Error, Result};
use crate::io::{
    default_ids, load_adjacency, load_dataset, load_fit, save_adjacency, save_dataset, serialize_fit,
    write_comparison, write_correlations, write_json, write_patterns, write_study, LoadedDataset,
};
use crate::model::{build_design, parse_blocks, ModelSpec, Variant};
use crate::pql::{fit_model, FitOptions, FitResult, VarianceComponents};
use crate::simulate::{generate, replicate_study, Scenario};
use crate::structures::Structures;

pub const EXIT_OK: i32 = 0;
pub const EXIT_NOT_CONVERGED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "stconfound", version, about = "Poisson spatio-temporal models with confounding adjustment, fitted by PQL")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit one model and write its estimates.
    Fit(FitArgs),
    /// Generate a synthetic dataset, or run a replicate study.
    Simulate(SimulateArgs),
    /// Confounding correlations, and pattern decomposition of a saved fit.
    Diagnose(DiagnoseArgs),
    /// Fit several models and tabulate deviance, effective df and AIC.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct DataArgs {
    /// Long-format CSV: area,time,observed,expected|population,covariates…
    #[arg(long)]
    pub data: PathBuf,
    /// Edge list (1-based `i j`) or 0/1 adjacency matrix.
    #[arg(long)]
    pub adjacency: PathBuf,
    /// Use covariates as given instead of standardizing them.
    #[arg(long)]
    pub raw_covariates: bool,
}

#[derive(Debug, Clone, Args)]
pub struct FitControl {
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 100)]
    pub max_outer: usize,
    #[arg(long, default_value_t = 50)]
    pub max_inner: usize,
    /// Blocks to restrict in ST3 (comma separated).
    #[arg(long, default_value = "spatial,temporal,interaction")]
    pub restrict: String,
}

impl FitControl {
    fn options(&self) -> FitOptions {
        FitOptions {
            tol: self.tol,
            max_outer: self.max_outer,
            max_inner: self.max_inner,
            ..FitOptions::default()
        }
    }

    fn spec(&self, variant: Variant) -> Result<ModelSpec> {
        let mut spec = ModelSpec::new(variant);
        if variant == Variant::St3 {
            spec.restrict_blocks = parse_blocks(&self.restrict)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// st1, st2, st3 or st4.
    #[arg(long)]
    pub model: Variant,
    #[command(flatten)]
    pub control: FitControl,
    /// Saved fit whose σ² start this fit; for ST3/ST4 an ST2 fit also
    /// supplies the frozen weights.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// `key = value` scenario file; defaults to the desk scenario.
    #[arg(long)]
    pub scenario: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run a replicate study with this many replicates instead of writing one dataset.
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Models for the replicate study.
    #[arg(long, default_value = "st1,st2,st3,st4")]
    pub models: String,
    #[command(flatten)]
    pub control: FitControl,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub input: DataArgs,
    /// Saved fit to decompose into spatial/temporal/interaction patterns.
    #[arg(long)]
    pub fit: Option<PathBuf>,
    /// Blocks that were restricted when the saved ST3 fit was made.
    #[arg(long, default_value = "spatial,temporal,interaction")]
    pub restrict: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub input: DataArgs,
    #[arg(long, default_value = "st1,st2,st3,st4")]
    pub models: String,
    #[command(flatten)]
    pub control: FitControl,
    #[arg(long)]
    pub out: PathBuf,
}

/// What a successful command produced.
#[derive(Debug, Clone, Default)]
pub struct RunOutcome {
    pub fits: Vec<FitResult>,
    pub comparison: Option<ModelComparison>,
    pub messages: Vec<String>,
}

impl RunOutcome {
    pub fn all_converged(&self) -> bool {
        self.fits.iter().all(|f| f.converged)
    }

    pub fn exit_code(&self) -> i32 {
        if self.all_converged() {
            EXIT_OK
        } else {
            EXIT_NOT_CONVERGED
        }
    }
}

pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    let mut out: Vec<Variant> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    out.sort();
    out.dedup();
    if out.is_empty() {
        return Err(Error::Config("no models requested".into()));
    }
    Ok(out)
}

struct Prepared {
    loaded: LoadedDataset,
    structures: Structures,
    standardization: Option<crate::model::Standardization>,
}

fn prepare(input: &DataArgs) -> Result<Prepared> {
    let mut loaded = load_dataset(&input.data)?;
    let graph = load_adjacency(&input.adjacency, Some(loaded.data.n_areas))?;
    let structures = Structures::new(&graph, loaded.data.n_periods)?;
    let standardization = if input.raw_covariates || loaded.data.n_covariates() == 0 {
        None
    } else {
        let (std, record) = loaded.data.standardized()?;
        loaded.data = std;
        Some(record)
    };
    Ok(Prepared {
        loaded,
        structures,
        standardization,
    })
}

fn finish(mut fit: FitResult, prep: &Prepared, dir: &Path) -> Result<FitResult> {
    fit.standardization = prep.standardization.clone();
    serialize_fit(&fit, dir, &prep.loaded.area_ids, &prep.loaded.time_ids)?;
    Ok(fit)
}

fn describe(fit: &FitResult) -> String {
    let status = if fit.converged { "converged" } else { "NOT converged" };
    format!(
        "{}: {status} after {} iterations, deviance {:.2}, df {:.2}, AIC {:.2}",
        fit.variant,
        fit.iterations,
        fit.deviance,
        fit.effective_df,
        fit.aic()
    )
}

pub fn run_fit(args: &FitArgs) -> Result<RunOutcome> {
    let prep = prepare(&args.input)?;
    let data = &prep.loaded.data;
    let spec = args.control.spec(args.model)?;
    let mut opts = args.control.options();
    let mut outcome = RunOutcome::default();

    let warm = args.warm_start.as_ref().map(load_fit).transpose()?;
    let reference: Option<FitResult> = if spec.variant.needs_weights() {
        match &warm {
            Some(rec) if rec.fit.variant == Variant::St2 => Some(rec.fit.clone()),
            _ => {
                let (_, st2) = fit_model(&ModelSpec::new(Variant::St2), data, &prep.structures, &opts, None)
                    .map_err(|e| upstream(spec.variant, e))?;
                outcome.messages.push(describe(&st2));
                if !st2.converged {
                    return Err(upstream(
                        spec.variant,
                        Error::Config("the ST2 fit supplying weights did not converge".into()),
                    ));
                }
                Some(st2)
            }
        }
    } else {
        None
    };
    if let Some(rec) = &warm {
        let labels = build_design(&spec, data, &prep.structures, reference.as_ref().map(|r| &r.working_weights))?
            .labels();
        let values = rec.fit.variance_components.ordered(&labels)?;
        opts.warm_start = Some(VarianceComponents::from_values(labels.into_iter().zip(values)));
    }
    let (_, fit) = fit_model(&spec, data, &prep.structures, &opts, reference.as_ref())?;
    outcome.messages.push(describe(&fit));
    let fit = finish(fit, &prep, &args.out)?;
    outcome.fits.push(fit);
    Ok(outcome)
}

fn upstream(model: Variant, source: Error) -> Error {
    Error::Upstream {
        model: model.name().into(),
        prerequisite: "ST2".into(),
        source: Box::new(source),
    }
}

pub fn run_simulate(args: &SimulateArgs) -> Result<RunOutcome> {
    let mut scenario = match &args.scenario {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?.parse()?,
        None => Scenario::desk(),
    };
    if let Some(seed) = args.seed {
        scenario.seed = seed;
    }
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut outcome = RunOutcome::default();
    match args.replicates {
        None => {
            let (data, truth) = generate(&scenario)?;
            let graph = scenario.grid.graph()?;
            let loaded = LoadedDataset {
                area_ids: default_ids(data.n_areas),
                time_ids: default_ids(data.n_periods),
                data,
            };
            save_dataset(args.out.join("data.csv"), &loaded)?;
            save_adjacency(args.out.join("adjacency.txt"), &graph)?;
            write_json(args.out.join("truth.json"), &truth)?;
            outcome.messages.push(format!(
                "wrote {} cells ({} areas × {} periods) to {}",
                loaded.data.n_cells(),
                loaded.data.n_areas,
                loaded.data.n_periods,
                args.out.display()
            ));
        }
        Some(n) => {
            let models = parse_variants(&args.models)?
                .into_iter()
                .map(|v| args.control.spec(v))
                .collect::<Result<Vec<_>>>()?;
            let report = replicate_study(&scenario, n, &models, &args.control.options())?;
            write_study(args.out.join("study.csv"), &report)?;
            write_json(args.out.join("study.json"), &report)?;
            outcome.messages.push(format!("{n} replicates written to {}", args.out.display()));
        }
    }
    Ok(outcome)
}

pub fn run_diagnose(args: &DiagnoseArgs) -> Result<RunOutcome> {
    let prep = prepare(&args.input)?;
    let data = &prep.loaded.data;
    let (areas, times) = (&prep.loaded.area_ids, &prep.loaded.time_ids);
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let corr = confounding_correlations(data, &prep.structures.spatial, prep.structures.temporal.as_ref())?;
    write_correlations(args.out.join("correlations.csv"), &corr, areas, times)?;
    let mut outcome = RunOutcome::default();
    outcome.messages.push(format!("correlations for {} covariate(s)", corr.covariate_names.len()));
    if let Some(path) = &args.fit {
        let record = load_fit(path)?;
        let fit = record.fit;
        let mut spec = ModelSpec::new(fit.variant);
        if fit.variant == Variant::St3 {
            spec.restrict_blocks = parse_blocks(&args.restrict)?;
        }
        let weights = fit.variant.needs_weights().then_some(&fit.working_weights);
        let bundle = build_design(&spec, data, &prep.structures, weights)?;
        let patterns = decompose_patterns(&fit, &bundle)?;
        write_patterns(args.out.join("patterns.csv"), &patterns, areas, times)?;
        outcome.messages.push(format!("patterns for the {} fit", fit.variant));
    }
    Ok(outcome)
}

/// Fits ST1 → ST2 → (ST3 ∥ ST4). ST3/ST4 reuse ST2's weights and σ², and
/// their reported wall time includes the ST2 fit.
pub fn run_compare(args: &CompareArgs) -> Result<RunOutcome> {
    let prep = prepare(&args.input)?;
    let data = &prep.loaded.data;
    let variants = parse_variants(&args.models)?;
    let opts = args.control.options();
    let st = &prep.structures;
    let mut outcome = RunOutcome::default();
    let mut timed: Vec<(FitResult, f64)> = Vec::new();

    let timed_fit = |variant: Variant, reference: Option<&FitResult>| -> Result<(FitResult, f64)> {
        let t0 = Instant::now();
        let (_, fit) = fit_model(&args.control.spec(variant)?, data, st, &opts, reference)?;
        Ok((fit, t0.elapsed().as_secs_f64()))
    };

    if variants.contains(&Variant::St1) {
        timed.push(timed_fit(Variant::St1, None)?);
    }
    let dependents: Vec<Variant> = variants.iter().copied().filter(|v| v.needs_weights()).collect();
    let st2 = if variants.contains(&Variant::St2) || !dependents.is_empty() {
        let r = timed_fit(Variant::St2, None);
        let r = match r {
            Ok(v) => v,
            Err(e) if !variants.contains(&Variant::St2) => return Err(upstream(dependents[0], e)),
            Err(e) => return Err(e),
        };
        if !r.0.converged && !dependents.is_empty() {
            return Err(upstream(
                dependents[0],
                Error::Config("the ST2 fit supplying weights did not converge".into()),
            ));
        }
        Some(r)
    } else {
        None
    };

    let fit_dependent = |v: Variant| -> Option<Result<(FitResult, f64)>> {
        if !dependents.contains(&v) {
            return None;
        }
        let (st2_fit, st2_time) = st2.as_ref().expect("fitted above");
        Some(timed_fit(v, Some(st2_fit)).map(|(f, t)| (f, t + st2_time)))
    };
    let (r3, r4) = rayon::join(|| fit_dependent(Variant::St3), || fit_dependent(Variant::St4));
    if let Some((fit, t)) = &st2 {
        if variants.contains(&Variant::St2) {
            timed.push((fit.clone(), *t));
        }
    }
    for r in [r3, r4].into_iter().flatten() {
        timed.push(r?);
    }
    timed.sort_by_key(|(f, _)| f.variant);

    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let mut cmp = ModelComparison::default();
    for (fit, t) in timed {
        let dir = args.out.join(fit.variant.name().to_ascii_lowercase());
        let fit = finish(fit, &prep, &dir)?;
        cmp.push(fit.variant.name(), &fit, t);
        outcome.messages.push(describe(&fit));
        outcome.fits.push(fit);
    }
    write_comparison(args.out.join("comparison.csv"), &cmp)?;
    outcome.comparison = Some(cmp);
    Ok(outcome)
}

pub fn run(cli: &Cli) -> Result<RunOutcome> {
    match &cli.command {
        Command::Fit(a) => run_fit(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Diagnose(a) => run_diagnose(a),
        Command::Compare(a) => run_compare(a),
    }
}

/// Parses arguments, runs, reports and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
