//! `qspec` command-line frontend.
//!
//! Exit status: 0 on success, 1 on any error, and 2 from `qspec test` when
//! the null is rejected at the smallest requested level.

mod report;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use qspec::bootstrap::{run_bootstrap, BootstrapConfig, BootstrapResult};
use qspec::decompose::{mm_decompose, residualize_on_dummies, MmConfig, MmResult};
use qspec::mcstudy::{named_spec, run_mc, DgpSpec, McConfig, McResult};
use qspec::qreg::{FitConfig, TauGrid};
use qspec::stats::{default_flexible_spec, StatisticKind};
use qspec::{parse_spec, Dataset, Parallelism, PiecewiseSpec, Table};
use serde::Serialize;

use report::{config_hash, emit, manifest, sha256_hex, write_table};

#[derive(Parser)]
#[command(name = "qspec", version, about = "Specification tests for quantile regression models")]
struct Cli {
    /// Worker threads (defaults to the machine's parallelism).
    #[arg(long, global = true, env = "QSPEC_THREADS")]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Bootstrap specification test of a quantile regression model.
    Test(TestArgs),
    /// Monte Carlo size or power study on a built-in process.
    Mc(McArgs),
    /// Counterfactual decomposition of a between-group gap.
    Decompose(DecomposeArgs),
}

/// Paths are left out of the config hash; the parsed specifications and
/// the data hash stand in for them.
#[derive(Args, Serialize)]
struct TestArgs {
    /// CSV file with a header row.
    #[arg(long)]
    #[serde(skip)]
    data: PathBuf,
    /// Null specification (TOML).
    #[arg(long)]
    #[serde(skip)]
    spec: PathBuf,
    /// cm, cms, cmstar or ks.
    #[arg(long, default_value = "cm")]
    statistic: String,
    /// Flexible comparison model for cmstar (TOML).
    #[arg(long, conflicts_with = "default_flexible")]
    #[serde(skip)]
    flexible_spec: Option<PathBuf>,
    /// Use a quadratic P-spline with sqrt(n) knots in every covariate as the
    /// cmstar comparison model.
    #[arg(long)]
    default_flexible: bool,
    /// `from:to:step` or a comma-separated list.
    #[arg(long, default_value = "0.01:0.99:0.01")]
    tau_grid: String,
    #[arg(long, default_value_t = 500)]
    bootstrap: usize,
    #[arg(long, env = "QSPEC_SEED", default_value_t = 0)]
    seed: u64,
    /// Significance levels, comma-separated.
    #[arg(long, default_value = "0.01,0.05,0.1", value_delimiter = ',')]
    levels: Vec<f64>,
    /// JSON report path (stdout when omitted).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// CSV of the fitted null coefficients per level.
    #[arg(long)]
    #[serde(skip)]
    coefficients: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct McArgs {
    #[arg(long)]
    dgp: u8,
    /// Heteroscedasticity parameter of process 9.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// A built-in specification name or a TOML file.
    #[arg(long)]
    null_spec: String,
    #[arg(long, default_value = "cmstar")]
    statistic: String,
    #[arg(long, default_value_t = 300)]
    n: usize,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    bootstrap: Option<usize>,
    /// 701 repetitions and 500 bootstrap replicates unless overridden.
    #[arg(long)]
    full_scale: bool,
    #[arg(long, default_value = "0.05", value_delimiter = ',')]
    levels: Vec<f64>,
    /// Overrides the statistic's default grid.
    #[arg(long)]
    tau_grid: Option<String>,
    #[arg(long, env = "QSPEC_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// CSV results table.
    #[arg(long)]
    #[serde(skip)]
    table: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct DecomposeArgs {
    #[arg(long)]
    #[serde(skip)]
    data: PathBuf,
    /// Binary column; rows with 1 form group A, rows with 0 group B.
    #[arg(long)]
    group: String,
    #[arg(long)]
    #[serde(skip)]
    spec: PathBuf,
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9", value_delimiter = ',')]
    taus: Vec<f64>,
    /// Covariate draws per group.
    #[arg(long, default_value_t = 1000)]
    draws: usize,
    #[arg(long, env = "QSPEC_SEED", default_value_t = 0)]
    seed: u64,
    /// Dummy columns whose effect is removed from the response first.
    #[arg(long, value_delimiter = ',')]
    absorb: Vec<String>,
    /// Report gaps in percent of the B-group level in the table.
    #[arg(long)]
    percent_of_baseline: bool,
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    table: Option<PathBuf>,
}

fn read_table(path: &Path) -> Result<(Table, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let table = Table::read_csv(bytes.as_slice()).with_context(|| format!("in {}", path.display()))?;
    Ok((table, sha256_hex(&bytes)))
}

fn read_spec(path: &Path, header: &[String]) -> Result<PiecewiseSpec> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_spec(&text, header).with_context(|| format!("in {}", path.display()))
}

fn spec_dataset(table: &Table, spec: &PiecewiseSpec) -> Result<Dataset> {
    Ok(table.dataset(&spec.response, &spec.covariates())?)
}

#[derive(Serialize)]
struct TestSettings<'a> {
    args: &'a TestArgs,
    null: &'a PiecewiseSpec,
    flexible: Option<&'a PiecewiseSpec>,
    grid: &'a TauGrid,
    fit: &'a FitConfig,
}

#[derive(Serialize)]
struct TestOutput<'a> {
    statistic: StatisticKind,
    n: usize,
    grid: &'a [f64],
    columns: &'a [String],
    bootstrap: &'a BootstrapResult,
}

fn cmd_test(args: &TestArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let kind: StatisticKind = args.statistic.parse()?;
    let grid: TauGrid = args.tau_grid.parse()?;
    if args.levels.is_empty() {
        bail!("at least one significance level is needed");
    }
    let (table, data_hash) = read_table(&args.data)?;
    let null = read_spec(&args.spec, table.names())?;
    // The dataset carries every covariate either model uses.
    let mut flexible = match &args.flexible_spec {
        Some(p) => Some(read_spec(p, table.names())?),
        None => None,
    };
    let mut covariates = null.covariates();
    if let Some(f) = &flexible {
        for c in f.covariates() {
            if !covariates.contains(&c) {
                covariates.push(c);
            }
        }
    }
    let data = table.dataset(&null.response, &covariates)?;
    let mut warnings = Vec::new();
    if kind == StatisticKind::CmStar && flexible.is_none() {
        if !args.default_flexible {
            bail!("cmstar needs --flexible-spec or --default-flexible");
        }
        flexible = Some(default_flexible_spec(&data));
    }
    if kind != StatisticKind::CmStar && flexible.is_some() {
        warnings.push(format!("the flexible specification is ignored by {}", kind.name()));
    }
    if kind == StatisticKind::Ks {
        warnings.push("ks is bootstrapped like cm; treat it as a diagnostic".to_string());
    }
    let fit = FitConfig::default();
    let hash = config_hash(&TestSettings {
        args,
        null: &null,
        flexible: flexible.as_ref(),
        grid: &grid,
        fit: &fit,
    })?;
    let bcfg = BootstrapConfig {
        replicates: args.bootstrap,
        seed: args.seed,
        levels: args.levels.clone(),
        parallelism: Parallelism::Parallel,
    };
    let result = run_bootstrap(&data, &null, kind, flexible.as_ref(), &grid, &fit, &bcfg)?;
    if result.failed > 0 {
        warnings.push(format!("{} bootstrap replicates failed and were skipped", result.failed));
    }

    let builder = qspec::DesignBuilder::new(&null, &data)?;
    if let Some(path) = &args.coefficients {
        let process = qspec::qreg::fit_process(&data, std::sync::Arc::new(builder.clone()), &grid, &fit)?;
        let header = std::iter::once("tau".to_string())
            .chain(builder.column_names().iter().map(|c| format!("\"{c}\"")))
            .collect::<Vec<_>>()
            .join(",");
        let rows: Vec<String> = grid
            .levels()
            .iter()
            .enumerate()
            .map(|(j, t)| {
                std::iter::once(t.to_string())
                    .chain(process.coef(j).iter().map(f64::to_string))
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect();
        write_table(path, &header, &rows)?;
    }

    let mut m = manifest("test", hash, Some(data_hash), args.seed);
    m.warnings = warnings;
    m.wall_time_secs = start.elapsed().as_secs_f64();
    let output = TestOutput {
        statistic: kind,
        n: data.n(),
        grid: grid.levels(),
        columns: builder.column_names(),
        bootstrap: &result,
    };
    emit(&m, &output, args.out.as_deref())?;

    let smallest = args.levels.iter().copied().fold(f64::INFINITY, f64::min);
    let rejected = result.rejects_at(smallest).unwrap_or(false);
    eprintln!(
        "{} = {:.6}, p-value {:.4}{}",
        kind.name(),
        result.observed(),
        result.p_value,
        if rejected { format!(", rejected at {smallest}") } else { String::new() }
    );
    Ok(if rejected { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn resolve_null(name_or_path: &str, dgp: &DgpSpec) -> Result<PiecewiseSpec> {
    let path = Path::new(name_or_path);
    if path.is_file() {
        let mut header = vec!["y".to_string()];
        header.extend(dgp.covariate_names());
        return read_spec(path, &header);
    }
    Ok(named_spec(name_or_path, &dgp.covariate_names())?)
}

fn cmd_mc(args: &McArgs) -> Result<ExitCode> {
    let kind: StatisticKind = args.statistic.parse()?;
    let dgp = DgpSpec::new(args.dgp, args.n)?.with_gamma(args.gamma);
    let mut cfg = McConfig::desk(dgp, "linear", kind, args.seed)?;
    cfg.spec_name = args.null_spec.clone();
    cfg.null = resolve_null(&args.null_spec, &dgp)?;
    if args.full_scale {
        cfg = cfg.full_scale();
    }
    if let Some(r) = args.reps {
        cfg.reps = r;
    }
    if let Some(b) = args.bootstrap {
        cfg.bootstrap = b;
    }
    cfg.levels = args.levels.clone();
    if let Some(g) = &args.tau_grid {
        cfg.grid = g.parse()?;
    }
    let hash = config_hash(&cfg)?;
    let result: McResult = run_mc(&cfg)?;
    let mut m = manifest("mc", hash, None, args.seed);
    if result.failed > 0 {
        m.warnings.push(format!("{} repetitions failed and were skipped", result.failed));
    }
    m.wall_time_secs = result.wall_time_secs;
    if let Some(path) = &args.table {
        write_table(path, McResult::CSV_HEADER, &result.csv_rows())?;
    }
    for row in result.csv_rows() {
        eprintln!("{row}");
    }
    emit(&m, &result, args.out.as_deref())?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct DecomposeSettings<'a> {
    args: &'a DecomposeArgs,
    spec: &'a PiecewiseSpec,
    fit: &'a FitConfig,
}

#[derive(Serialize)]
struct DecomposeOutput<'a> {
    n_a: usize,
    n_b: usize,
    #[serde(flatten)]
    result: &'a MmResult,
}

fn cmd_decompose(args: &DecomposeArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let (table, data_hash) = read_table(&args.data)?;
    let spec = read_spec(&args.spec, table.names())?;
    let group = table
        .column(&args.group)
        .with_context(|| format!("no column named {:?}", args.group))?;
    if let Some(v) = group.iter().find(|v| **v != 0.0 && **v != 1.0) {
        bail!("group column {:?} must hold only 0 and 1, found {v}", args.group);
    }
    let ones = group.iter().filter(|v| **v == 1.0).count();
    if ones == 0 || ones == group.len() {
        bail!("both groups need at least one row (A has {ones}, B has {})", group.len() - ones);
    }
    if spec.response == args.group || spec.covariates().contains(&args.group) {
        bail!("the group column {:?} cannot appear in the specification", args.group);
    }
    let mut table = table;
    if !args.absorb.is_empty() {
        let dummies = args
            .absorb
            .iter()
            .map(|c| table.column(c).map(<[f64]>::to_vec).with_context(|| format!("no column named {c:?}")))
            .collect::<Result<Vec<_>>>()?;
        let y = table
            .column(&spec.response)
            .with_context(|| format!("no column named {:?}", spec.response))?;
        let adjusted = residualize_on_dummies(y, &dummies)?;
        table = table.with_column(&spec.response, adjusted)?;
    }
    let a = spec_dataset(&table.filter_rows(&args.group, |v| v == 1.0)?, &spec)?;
    let b = spec_dataset(&table.filter_rows(&args.group, |v| v == 0.0)?, &spec)?;
    let mut config = MmConfig::new(args.taus.clone(), args.draws, args.seed);
    config.fit = FitConfig::default();
    let hash = config_hash(&DecomposeSettings {
        args,
        spec: &spec,
        fit: &config.fit,
    })?;
    let result = mm_decompose(&a, &b, &spec, &config)?;
    if let Some(path) = &args.table {
        write_table(path, MmResult::CSV_HEADER, &result.csv_rows(args.percent_of_baseline))?;
    }
    let mut m = manifest("decompose", hash, Some(data_hash), args.seed);
    if result.rows.iter().any(|r| r.mm_gap == 0.0) {
        m.warnings.push("zero modelled gap at some levels; percentages are undefined there".into());
    }
    m.wall_time_secs = start.elapsed().as_secs_f64();
    emit(
        &m,
        &DecomposeOutput {
            n_a: a.n(),
            n_b: b.n(),
            result: &result,
        },
        args.out.as_deref(),
    )?;
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli) -> Result<ExitCode> {
    match &cli.command {
        Command::Test(a) => cmd_test(a),
        Command::Mc(a) => cmd_mc(a),
        Command::Decompose(a) => cmd_decompose(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.threads {
        Some(0) => Err(anyhow::anyhow!("--threads must be positive")),
        Some(t) => qspec::par::with_threads(t, || run(&cli)),
        None => run(&cli),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
