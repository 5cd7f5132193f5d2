//! Command-line front end.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use fmab::estimation::{fit, FitConfig};
use fmab::inference::{bootstrap_standard_errors, classify_map, factor_scores};
use fmab::io::{
    default_item_names, load_csv, pattern_string, read_fit, render_bootstrap,
    render_fit_report, render_residuals, render_scores, render_selection,
    render_selection_result, render_study, to_json, write_csv, write_fit, FitArtifact,
    LoadedData,
};
use fmab::model::{ModelSpec, PatternTable};
use fmab::par;
use fmab::quadrature::tensor_grid;
use fmab::selection::{
    bivariate_residuals_with_threshold, forward_select_with, SelectionCriterion,
    SelectionOptions, DEFAULT_RESIDUAL_THRESHOLD,
};
use fmab::simulation::{generate_design_with, run_study_with, sample_responses, DesignOptions, StudyOptions};
use fmab::Error;

#[derive(Parser)]
#[command(name = "fmab", version, about = "Factor mixture analysis for binary data")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct FitOpts {
    /// Quadrature points per dimension.
    #[arg(long, default_value_t = 8)]
    quad_points: usize,
    #[arg(long, default_value_t = 1e-5)]
    epsilon: f64,
    #[arg(long, default_value_t = 500)]
    max_iter: usize,
    /// Newton steps per item per iteration.
    #[arg(long, default_value_t = 5)]
    newton_max: usize,
    /// Seeded restarts.
    #[arg(long, default_value_t = 1)]
    starts: usize,
    #[arg(long, default_value_t = 1e-6)]
    ridge: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl FitOpts {
    fn config(&self) -> FitConfig {
        FitConfig {
            quad_points: self.quad_points,
            epsilon: self.epsilon,
            max_iter: self.max_iter,
            newton_max: self.newton_max,
            n_starts: self.starts,
            ridge: self.ridge,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum CriterionArg {
    Aic,
    Bic,
}

impl From<CriterionArg> for SelectionCriterion {
    fn from(c: CriterionArg) -> Self {
        match c {
            CriterionArg::Aic => SelectionCriterion::Aic,
            CriterionArg::Bic => SelectionCriterion::Bic,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Fit one model and write a fit artifact.
    Fit {
        data: PathBuf,
        #[arg(long)]
        q: usize,
        #[arg(long)]
        k: usize,
        #[command(flatten)]
        opts: FitOpts,
        /// Artifact output path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record the creation time in the artifact.
        #[arg(long)]
        stamp: bool,
    },
    /// Forward selection of q, then k.
    Select {
        data: PathBuf,
        #[arg(long, default_value_t = 2)]
        q_max: usize,
        #[arg(long, default_value_t = 4)]
        k_max: usize,
        #[arg(long, value_enum, default_value_t = CriterionArg::Aic)]
        criterion: CriterionArg,
        #[arg(long, default_value_t = DEFAULT_RESIDUAL_THRESHOLD)]
        residual_threshold: f64,
        #[command(flatten)]
        opts: FitOpts,
        /// Report output path (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte-Carlo replication of a design.
    Simulate {
        /// Design as `q,k`.
        #[arg(long, value_parser = parse_design)]
        design: (usize, usize),
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 10)]
        p: usize,
        #[arg(long, default_value_t = 4)]
        k_max: usize,
        #[command(flatten)]
        opts: FitOpts,
        /// Write one simulated dataset as CSV.
        #[arg(long)]
        data_out: Option<PathBuf>,
        /// Summary output path (JSON).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bootstrap standard errors for a fitted model.
    Bootstrap {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long, default_value_t = 100)]
        b: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Data to resample (defaults to the data stored in the artifact).
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Factor scores and MAP clusters for each response pattern.
    Score {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Bivariate residual table.
    Residuals {
        #[arg(long)]
        fit: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_RESIDUAL_THRESHOLD)]
        residual_threshold: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_design(s: &str) -> Result<(usize, usize), String> {
    let (q, k) = s.split_once(',').ok_or("expected q,k")?;
    let q = q.trim().parse().map_err(|_| format!("bad q in '{s}'"))?;
    let k = k.trim().parse().map_err(|_| format!("bad k in '{s}'"))?;
    Ok((q, k))
}

enum Failure {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CliResult = Result<(), Failure>;

fn emit(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => fs::write(path, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load(path: &Path) -> Result<LoadedData, Error> {
    let data = load_csv(path)?;
    for w in &data.warnings {
        eprintln!("warning: {w}");
    }
    Ok(data)
}

/// Data file checked against the item count of a fitted model.
fn load_for(path: &Path, p: usize) -> Result<LoadedData, Error> {
    let data = load(path)?;
    if data.table.p() != p {
        return Err(Error::Data {
            path: path.to_path_buf(),
            message: format!("{} items, but the fitted model has {p}", data.table.p()),
        });
    }
    Ok(data)
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Fit {
            data,
            q,
            k,
            opts,
            out,
            stamp,
        } => {
            let loaded = load(&data)?;
            let spec = ModelSpec::new(loaded.table.p(), q, k)?;
            let result = fit(&loaded.table, &spec, &opts.config())?;
            let mut artifact = FitArtifact::from_fit(&result, &loaded.table, &loaded.item_names)?;
            if stamp {
                artifact.created_unix = SystemTime::now()
                    .duration_since(UNIX_EPOCH)
                    .ok()
                    .map(|d| d.as_secs());
            }
            if let Some(path) = &out {
                write_fit(&artifact, path)?;
            }
            print!("{}", render_fit_report(&artifact)?);
            Ok(())
        }
        Command::Select {
            data,
            q_max,
            k_max,
            criterion,
            residual_threshold,
            opts,
            out,
        } => {
            let loaded = load(&data)?;
            let sel = SelectionOptions {
                criterion: criterion.into(),
                threshold: residual_threshold,
            };
            match forward_select_with(&loaded.table, q_max, k_max, &opts.config(), &sel) {
                Ok(result) => {
                    emit(&render_selection_result(&result), out.as_deref())?;
                    Ok(())
                }
                Err(Error::SelectionFailed(trace)) => {
                    emit(&render_selection(&trace, None), out.as_deref())?;
                    Err(Error::SelectionFailed(trace).into())
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Simulate {
            design,
            n,
            reps,
            p,
            k_max,
            opts,
            data_out,
            out,
        } => {
            let (q, k) = design;
            let dopts = DesignOptions {
                p,
                n,
                n_reps: reps,
                ..DesignOptions::default()
            };
            let d = generate_design_with(q, k, opts.seed, &dopts)?;
            if let Some(path) = &data_out {
                let sample = sample_responses(&d.true_params, n, opts.seed)?;
                write_csv(path, &default_item_names(p), &sample.table)?;
            }
            let sopts = StudyOptions {
                k_max,
                ..StudyOptions::default()
            };
            let summary = run_study_with(&d, &opts.config(), &sopts)?;
            if let Some(path) = &out {
                fs::write(path, to_json(&summary)?).map_err(Error::from)?;
            }
            print!("{}", render_study(&summary));
            Ok(())
        }
        Command::Bootstrap {
            fit: fit_path,
            b,
            seed,
            data,
            out,
        } => {
            let artifact = read_fit(&fit_path)?;
            let params = artifact.model_params()?;
            let (table, names): (PatternTable, Vec<String>) = match &data {
                Some(path) => {
                    let l = load_for(path, artifact.spec.p)?;
                    (l.table, l.item_names)
                }
                None => (artifact.table()?, artifact.data.item_names.clone()),
            };
            let cfg = FitConfig {
                seed,
                ..artifact.config
            };
            let report = bootstrap_standard_errors(&table, &artifact.spec, &cfg, b, &params)?;
            if let Some(path) = &out {
                fs::write(path, to_json(&report)?).map_err(Error::from)?;
            }
            print!("{}", render_bootstrap(&report, &names));
            Ok(())
        }
        Command::Score { fit: fit_path, data, out } => {
            let artifact = read_fit(&fit_path)?;
            let params = artifact.model_params()?;
            let loaded = load_for(&data, artifact.spec.p)?;
            let grid = tensor_grid(artifact.spec.q, artifact.config.quad_points)?;
            let scores = factor_scores(&params, &loaded.table, &grid)?;
            let es = fmab::estimation::e_step(&params, &loaded.table, &grid)?;
            let labels = classify_map(&es.responsibilities);
            let patterns: Vec<String> = loaded.table.patterns().iter().map(|y| pattern_string(y)).collect();
            let posteriors: Vec<Vec<f64>> = es
                .responsibilities
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect();
            let scores: Vec<Vec<f64>> = scores.iter().map(|s| s.iter().copied().collect()).collect();
            let text = render_scores(&patterns, loaded.table.counts(), &scores, &posteriors, &labels);
            emit(&text, out.as_deref())?;
            Ok(())
        }
        Command::Residuals {
            fit: fit_path,
            data,
            residual_threshold,
            out,
        } => {
            let artifact = read_fit(&fit_path)?;
            let params = artifact.model_params()?;
            let loaded = load_for(&data, artifact.spec.p)?;
            let grid = tensor_grid(artifact.spec.q, artifact.config.quad_points)?;
            let report =
                bivariate_residuals_with_threshold(&params, &loaded.table, &grid, residual_threshold)?;
            emit(&render_residuals(&report, &loaded.item_names), out.as_deref())?;
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::SelectionFailed(_) => 4,
        Error::Parse { .. } | Error::Data { .. } | Error::Io(_) | Error::Version { .. } | Error::Artifact(_) => 2,
        Error::InvalidArgument(_) | Error::ResourceLimit(_) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let threads = cli.threads;
    let outcome = if threads == Some(0) {
        Err(Failure::Usage("--threads must be positive".into()))
    } else {
        par::with_threads(threads, || run(cli.command))
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
