//! Command-line front end for the covariance forecasting pipeline.

use std::path::{Path, PathBuf};

use clap::{ArgAction, Args, Parser, Subcommand};
use nalgebra::DMatrix;

use covcast::config::{RunConfig, RunManifest};
use covcast::diagnostics::{
    gph_estimate, local_whittle_estimate, omitted_factor_scan, LongMemoryEstimate,
};
use covcast::error::{Error, Result};
use covcast::evaluate::{
    error_ratio, save_score_summary_csv, save_scores_csv, save_selection_csv, score,
    selection_stats, ScoreSeries, ScoreSummaryRow,
};
use covcast::factor::{
    decompose, load_factor_spec_csv, load_sectors_csv, save_factor_spec_csv, save_sectors_csv,
    significance_pattern,
};
use covcast::forecast::{load_fits_csv, rolling_forecast, save_fits_csv, ModelConfig, ModelKind};
use covcast::panel::{
    clean_panel, load_cov_panel, load_returns_panel, save_cov_binary, save_returns_binary, CovPanel,
};
use covcast::portfolio::{
    backtest, save_backtest_report_csv, save_weights_csv, BacktestConfig, ConstraintKind,
    ConstraintSet,
};
use covcast::synth::{generate_synthetic, SynthConfig};

#[derive(Parser)]
#[command(
    name = "covcast",
    about = "Daily covariance matrix forecasting with a factor / sector-block model",
    version,
    disable_help_subcommand = true
)]
struct Cli {
    /// TOML file overriding the built-in defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (synthetic generation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (0 = one per core).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic covariance and returns panel with known
    /// structure.
    Generate(GenerateArgs),
    /// Flag and replace data-error days in a covariance panel.
    Clean(CleanArgs),
    /// Split each day's matrix into factor and residual parts.
    Decompose(DecomposeArgs),
    /// Fit a forecaster and write rolling one-day-ahead forecasts.
    FitForecast(FitForecastArgs),
    /// Score forecast files against realized matrices.
    Evaluate(EvaluateArgs),
    /// Run a constrained minimum-variance backtest on forecasts.
    Backtest(BacktestArgs),
    /// Long-memory estimates and a leftover-factor scan.
    Diagnose(DiagnoseArgs),
}

fn parse_factor_count(s: &str) -> std::result::Result<usize, String> {
    let k: usize = s.parse().map_err(|_| format!("'{s}' is not a number"))?;
    if matches!(k, 1 | 3 | 5 | 7) {
        Ok(k)
    } else {
        Err(format!("factor count must be 1, 3, 5, or 7, got {k}"))
    }
}

fn parse_on_off(s: &str) -> std::result::Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected 'on' or 'off', got '{other}'")),
    }
}

#[derive(Args)]
struct GenerateArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    assets: Option<usize>,
    #[arg(long, value_parser = parse_factor_count)]
    factors: Option<usize>,
    #[arg(long)]
    sectors: Option<usize>,
    #[arg(long)]
    days: Option<usize>,
    #[arg(long)]
    noise_scale: Option<f64>,
    #[arg(long)]
    block_strength: Option<f64>,
    #[arg(long)]
    beta_d: Option<f64>,
}

#[derive(Args)]
struct CleanArgs {
    /// Covariance panel (CSV or binary).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sd_threshold: Option<f64>,
    #[arg(long)]
    flag_fraction: Option<f64>,
    #[arg(long)]
    replace_count: Option<usize>,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Covariance panel (CSV or binary).
    #[arg(long)]
    input: PathBuf,
    /// Factor weight spec CSV.
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_factor_count)]
    factors: Option<usize>,
    /// Off-diagonal correlation magnitude counted as material.
    #[arg(long, default_value_t = 0.15)]
    sig_threshold: f64,
    /// Fraction of days a correlation must clear the threshold on.
    #[arg(long, default_value_t = 1.0 / 3.0)]
    sig_fraction: f64,
}

#[derive(Args)]
struct FitForecastArgs {
    /// Covariance panel (CSV or binary).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Forecaster: factor, rw, block-rw, or ewma.
    #[arg(long)]
    model: String,
    /// Returns panel (required by the ewma model).
    #[arg(long)]
    returns: Option<PathBuf>,
    /// Factor weight spec CSV (factor and block-rw models).
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Sector label CSV (factor model).
    #[arg(long)]
    sectors: Option<PathBuf>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long, value_parser = parse_factor_count)]
    factors: Option<usize>,
    /// lasso, adalasso, or ols.
    #[arg(long)]
    estimator: Option<String>,
    /// Model the matrix logarithm of the factor covariance: on or off.
    #[arg(long, value_parser = parse_on_off)]
    log_matrix: Option<bool>,
    /// Skip writing the per-equation fit records.
    #[arg(long, action = ArgAction::SetTrue)]
    no_fits: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Realized covariance panel.
    #[arg(long)]
    realized: PathBuf,
    /// Forecast panels as label=path; repeatable.
    #[arg(long = "forecast", required = true)]
    forecasts: Vec<String>,
    /// Label of the baseline for the error ratio.
    #[arg(long, default_value = "rw")]
    baseline: String,
    /// Fit-record files as label=path; repeatable.
    #[arg(long = "fits")]
    fits: Vec<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BacktestArgs {
    /// Forecast panel from fit-forecast.
    #[arg(long)]
    forecasts: PathBuf,
    /// Realized covariance panel.
    #[arg(long)]
    realized: PathBuf,
    /// Returns panel.
    #[arg(long)]
    returns: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// global, restricted, or long-only.
    #[arg(long)]
    constraints: Option<String>,
    #[arg(long)]
    rebalance_fraction: Option<f64>,
    /// Tag used in output file names.
    #[arg(long, default_value = "model")]
    label: String,
}

#[derive(Args)]
struct DiagnoseArgs {
    /// Covariance panel (CSV or binary).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Factor weight spec CSV: also diagnose factor-variance series.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Returns panel: adds the leftover-factor scan on factor-regression
    /// residuals (needs --weights).
    #[arg(long)]
    returns: Option<PathBuf>,
    #[arg(long)]
    k_max: Option<usize>,
    /// Frequencies used by the long-memory estimators (0 = sqrt(T)).
    #[arg(long)]
    bandwidth: Option<usize>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                std::process::exit(0);
            }
            let _ = e.print();
            std::process::exit(1);
        }
    };
    match run(cli) {
        Ok(()) => {}
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_toml_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = cli.threads {
        cfg.threads = threads;
    }
    if cfg.threads > 0 {
        // A failure here means a pool already exists, which is fine.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    match cli.command {
        Command::Generate(args) => cmd_generate(cfg, args),
        Command::Clean(args) => cmd_clean(cfg, args),
        Command::Decompose(args) => cmd_decompose(cfg, args),
        Command::FitForecast(args) => cmd_fit_forecast(cfg, args),
        Command::Evaluate(args) => cmd_evaluate(cfg, args),
        Command::Backtest(args) => cmd_backtest(cfg, args),
        Command::Diagnose(args) => cmd_diagnose(cfg, args),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn cmd_generate(mut cfg: RunConfig, args: GenerateArgs) -> Result<()> {
    if let Some(v) = args.assets {
        cfg.n_assets = v;
    }
    if let Some(v) = args.factors {
        cfg.n_factors = v;
    }
    if let Some(v) = args.sectors {
        cfg.n_sectors = v;
    }
    if let Some(v) = args.days {
        cfg.n_days = v;
    }
    if let Some(v) = args.noise_scale {
        cfg.noise_scale = v;
    }
    if let Some(v) = args.block_strength {
        cfg.block_strength = v;
    }
    if let Some(v) = args.beta_d {
        cfg.beta_d = v;
    }
    ensure_dir(&args.out)?;
    let synth_cfg = SynthConfig {
        n_assets: cfg.n_assets,
        n_factors: cfg.n_factors,
        n_sectors: cfg.n_sectors,
        n_days: cfg.n_days,
        persistence: cfg.persistence(),
        beta_d: cfg.beta_d,
        block_strength: cfg.block_strength,
        noise_scale: cfg.noise_scale,
        sector_sizes: None,
        seed: cfg.seed,
    };
    let data = generate_synthetic(&synth_cfg)?;

    let cov_path = args.out.join("covariances.bin");
    let ret_path = args.out.join("returns.bin");
    let truth_path = args.out.join("truth.bin");
    let weights_path = args.out.join("factor_weights.csv");
    let sectors_path = args.out.join("sectors.csv");
    save_cov_binary(&data.covariances, &cov_path)?;
    save_returns_binary(&data.returns, &ret_path)?;
    save_cov_binary(&data.truth.noiseless, &truth_path)?;
    save_factor_spec_csv(&data.factor_spec, &weights_path)?;
    save_sectors_csv(&data.sectors, &sectors_path)?;

    let mut manifest = RunManifest::new("generate", &cfg);
    manifest
        .output(&cov_path)
        .output(&ret_path)
        .output(&truth_path)
        .output(&weights_path)
        .output(&sectors_path)
        .count("days", cfg.n_days as i64)
        .count("assets", cfg.n_assets as i64)
        .count("factors", cfg.n_factors as i64)
        .count("sectors", cfg.n_sectors as i64);
    manifest.save(&args.out.join("generate.manifest.json"))?;
    println!(
        "generated {} days x {} assets into {}",
        cfg.n_days,
        cfg.n_assets,
        args.out.display()
    );
    Ok(())
}

fn cmd_clean(mut cfg: RunConfig, args: CleanArgs) -> Result<()> {
    if let Some(v) = args.sd_threshold {
        cfg.sd_threshold = v;
    }
    if let Some(v) = args.flag_fraction {
        cfg.flag_fraction = v;
    }
    if let Some(v) = args.replace_count {
        cfg.replace_count = v;
    }
    ensure_dir(&args.out)?;
    let panel = load_cov_panel(&args.input)?;
    let (cleaned, report) = clean_panel(
        &panel,
        cfg.sd_threshold,
        cfg.flag_fraction,
        cfg.replace_count,
    )?;

    let out_path = args.out.join("cleaned.bin");
    save_cov_binary(&cleaned, &out_path)?;
    let report_path = args.out.join("clean_report.csv");
    {
        use std::io::Write;
        let file = std::fs::File::create(&report_path)
            .map_err(|e| Error::io(report_path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::io(report_path.display().to_string(), e);
        writeln!(w, "date,flagged,fraction_extreme").map_err(io_err)?;
        for (t, date) in cleaned.dates.iter().enumerate() {
            writeln!(
                w,
                "{},{},{:.16e}",
                date.format("%Y-%m-%d"),
                u8::from(report.flagged_days.contains(&t)),
                report.fraction_extreme[t]
            )
            .map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }

    let mut manifest = RunManifest::new("clean", &cfg);
    manifest
        .input(&args.input)
        .output(&out_path)
        .output(&report_path)
        .count("days", cleaned.n_days() as i64)
        .count("flagged_days", report.flagged_days.len() as i64);
    manifest.save(&args.out.join("clean.manifest.json"))?;
    println!(
        "cleaned {} of {} days into {}",
        report.flagged_days.len(),
        cleaned.n_days(),
        args.out.display()
    );
    Ok(())
}

fn cmd_decompose(mut cfg: RunConfig, args: DecomposeArgs) -> Result<()> {
    if let Some(v) = args.factors {
        cfg.n_factors = v;
    }
    ensure_dir(&args.out)?;
    let panel = load_cov_panel(&args.input)?;
    let spec = load_factor_spec_csv(&args.weights)?
        .aligned_to(&panel.assets)?
        .truncated(cfg.n_factors)?;

    let mut sigma_f_days = Vec::with_capacity(panel.n_days());
    let mut residuals = Vec::with_capacity(panel.n_days());
    for t in 0..panel.n_days() {
        let dec = decompose(&panel.mat(t), &spec)?;
        sigma_f_days.push(dec.sigma_f);
        residuals.push(dec.sigma_eps);
    }
    let factor_panel = CovPanel::from_matrices(
        panel.dates.clone(),
        spec.factor_names.clone(),
        &sigma_f_days,
    )?;
    let fc_path = args.out.join("factor_cov.bin");
    save_cov_binary(&factor_panel, &fc_path)?;

    // Which residual correlations stay material across the sample.
    let residual_panel =
        CovPanel::from_matrices(panel.dates.clone(), panel.assets.clone(), &residuals)?;
    let pattern = significance_pattern(&residual_panel, args.sig_threshold, args.sig_fraction)?;
    let sig_path = args.out.join("residual_significance.csv");
    {
        use std::io::Write;
        let file = std::fs::File::create(&sig_path)
            .map_err(|e| Error::io(sig_path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::io(sig_path.display().to_string(), e);
        writeln!(w, "asset,{}", panel.assets.join(",")).map_err(io_err)?;
        let n = panel.n_assets();
        for i in 0..n {
            let mut line = panel.assets[i].clone();
            for j in 0..n {
                line.push(',');
                line.push(if pattern[(i, j)] { '1' } else { '0' });
            }
            writeln!(w, "{line}").map_err(io_err)?;
        }
        w.flush().map_err(io_err)?;
    }
    let material: usize = {
        let n = panel.n_assets();
        let mut c = 0;
        for i in 0..n {
            for j in 0..i {
                if pattern[(i, j)] {
                    c += 1;
                }
            }
        }
        c
    };

    let mut manifest = RunManifest::new("decompose", &cfg);
    manifest
        .input(&args.input)
        .input(&args.weights)
        .output(&fc_path)
        .output(&sig_path)
        .count("days", panel.n_days() as i64)
        .count("factors", spec.n_factors() as i64)
        .count("material_residual_pairs", material as i64);
    manifest.save(&args.out.join("decompose.manifest.json"))?;
    println!(
        "decomposed {} days with {} factors; {} residual pairs stay material",
        panel.n_days(),
        spec.n_factors(),
        material
    );
    Ok(())
}

fn cmd_fit_forecast(mut cfg: RunConfig, args: FitForecastArgs) -> Result<()> {
    if let Some(v) = args.window {
        cfg.window = v;
    }
    if let Some(v) = args.factors {
        cfg.n_factors = v;
    }
    if let Some(v) = &args.estimator {
        cfg.estimator = v.clone();
    }
    if let Some(v) = args.log_matrix {
        cfg.log_matrix = v;
    }
    ensure_dir(&args.out)?;
    let panel = load_cov_panel(&args.input)?;
    let returns = match &args.returns {
        Some(p) => Some(load_returns_panel(p)?),
        None => None,
    };
    let spec = match &args.weights {
        Some(p) => Some(load_factor_spec_csv(p)?),
        None => None,
    };
    let sectors = match &args.sectors {
        Some(p) => Some(load_sectors_csv(p)?),
        None => None,
    };

    let kind = match args.model.as_str() {
        "factor" => ModelKind::Factor(ModelConfig {
            n_factors: cfg.n_factors,
            use_log_matrix: cfg.log_matrix,
            estimator: cfg.fit_method()?,
            har_spans: cfg.har_spans(),
            psd_floor_scale: cfg.psd_floor_scale,
            keep_fits: !args.no_fits,
        }),
        "rw" => ModelKind::RandomWalk,
        "block-rw" => ModelKind::BlockRandomWalk {
            n_factors: cfg.n_factors,
        },
        "ewma" => ModelKind::Ewma {
            lambda: cfg.ewma_lambda,
        },
        other => {
            return Err(Error::Validation(format!(
                "unknown model '{other}' (expected factor, rw, block-rw, or ewma)"
            )))
        }
    };

    let set = rolling_forecast(
        &panel,
        returns.as_ref(),
        spec.as_ref(),
        sectors.as_ref(),
        &kind,
        cfg.window,
    )?;

    let label = set.model.clone();
    let fc_path = args.out.join(format!("forecasts_{label}.bin"));
    save_cov_binary(&set.to_panel()?, &fc_path)?;
    let mut manifest = RunManifest::new("fit-forecast", &cfg);
    manifest.input(&args.input);
    if let Some(p) = &args.returns {
        manifest.input(p);
    }
    if let Some(p) = &args.weights {
        manifest.input(p);
    }
    if let Some(p) = &args.sectors {
        manifest.input(p);
    }
    manifest
        .output(&fc_path)
        .count("forecast_days", set.dates.len() as i64)
        .count("assets", set.assets.len() as i64)
        .count("spd_repairs", set.repairs as i64)
        .count("loading_fallbacks", set.beta_fallbacks as i64);
    if !set.fits.is_empty() {
        let fits_path = args.out.join(format!("fits_{label}.csv"));
        save_fits_csv(&fits_path, &set.fits)?;
        manifest
            .output(&fits_path)
            .count("fit_records", set.fits.len() as i64);
    }
    manifest.save(&args.out.join("fit-forecast.manifest.json"))?;
    println!(
        "{} forecasts from model {} into {}",
        set.dates.len(),
        label,
        args.out.display()
    );
    Ok(())
}

fn split_label(raw: &str) -> Result<(String, PathBuf)> {
    match raw.split_once('=') {
        Some((label, path)) if !label.is_empty() && !path.is_empty() => {
            Ok((label.to_string(), PathBuf::from(path)))
        }
        _ => Err(Error::Validation(format!(
            "expected label=path, got '{raw}'"
        ))),
    }
}

fn cmd_evaluate(cfg: RunConfig, args: EvaluateArgs) -> Result<()> {
    ensure_dir(&args.out)?;
    let realized = load_cov_panel(&args.realized)?;
    let mut series: Vec<(String, ScoreSeries)> = Vec::new();
    let mut manifest = RunManifest::new("evaluate", &cfg);
    manifest.input(&args.realized);
    for raw in &args.forecasts {
        let (label, path) = split_label(raw)?;
        let fc = load_cov_panel(&path)?;
        manifest.input(&path);
        if fc.assets != realized.assets {
            return Err(Error::Validation(format!(
                "forecast '{label}' covers different assets than the realized panel"
            )));
        }
        let mut realized_mats = Vec::with_capacity(fc.n_days());
        for date in &fc.dates {
            let t = realized.date_index(*date).ok_or_else(|| {
                Error::Validation(format!(
                    "forecast '{label}' includes {date} which the realized panel lacks"
                ))
            })?;
            realized_mats.push(realized.mat(t));
        }
        let forecast_mats: Vec<DMatrix<f64>> = (0..fc.n_days()).map(|t| fc.mat(t)).collect();
        let s = score(&fc.dates, &forecast_mats, &realized_mats)?;
        series.push((label, s));
    }
    let baseline = series
        .iter()
        .find(|(l, _)| *l == args.baseline)
        .map(|(_, s)| s.clone())
        .ok_or_else(|| {
            Error::Validation(format!(
                "baseline '{}' is not among the forecast labels",
                args.baseline
            ))
        })?;

    let scores_path = args.out.join("scores.csv");
    save_scores_csv(&scores_path, &series)?;
    let mut rows = Vec::new();
    for (label, s) in &series {
        rows.push(ScoreSummaryRow {
            model: label.clone(),
            mean_error: s.mean_error,
            ratio_vs_baseline: error_ratio(s, &baseline)?,
        });
    }
    let summary_path = args.out.join("summary.csv");
    save_score_summary_csv(&summary_path, &rows)?;
    manifest.output(&scores_path).output(&summary_path);

    for raw in &args.fits {
        let (label, path) = split_label(raw)?;
        let records = load_fits_csv(&path)?;
        let stats = selection_stats(&records);
        let sel_path = args.out.join(format!("selection_{label}.csv"));
        save_selection_csv(&sel_path, &stats)?;
        manifest.input(&path).output(&sel_path);
    }
    manifest.count("models", series.len() as i64);
    manifest.save(&args.out.join("evaluate.manifest.json"))?;
    for row in &rows {
        println!(
            "{}: mean error {:.6e}, ratio vs {} {:.4}",
            row.model, row.mean_error, args.baseline, row.ratio_vs_baseline
        );
    }
    Ok(())
}

fn cmd_backtest(mut cfg: RunConfig, args: BacktestArgs) -> Result<()> {
    if let Some(v) = &args.constraints {
        cfg.constraints = v.clone();
    }
    if let Some(v) = args.rebalance_fraction {
        cfg.rebalance_fraction = v;
    }
    ensure_dir(&args.out)?;
    let forecasts = load_cov_panel(&args.forecasts)?;
    let realized = load_cov_panel(&args.realized)?;
    let returns = load_returns_panel(&args.returns)?;

    let kind = cfg.constraint_kind()?;
    let constraints = match kind {
        ConstraintKind::Global => ConstraintSet::global(),
        ConstraintKind::Restricted => ConstraintSet::restricted(),
        ConstraintKind::LongOnly => ConstraintSet::long_only(),
    };
    let bt_cfg = BacktestConfig {
        rebalance_fraction: cfg.rebalance_fraction,
        annualization: cfg.annualization,
    };
    let mats: Vec<DMatrix<f64>> = (0..forecasts.n_days()).map(|t| forecasts.mat(t)).collect();
    let outcome = backtest(
        &forecasts.dates,
        &mats,
        &returns,
        &realized,
        &constraints,
        &bt_cfg,
    )?;

    let report_path = args.out.join(format!("backtest_{}.csv", args.label));
    save_backtest_report_csv(&outcome.report, &report_path)?;
    let weights_path = args.out.join(format!("weights_{}.csv", args.label));
    save_weights_csv(
        &outcome.dates,
        &outcome.weights,
        &forecasts.assets,
        &weights_path,
    )?;

    let mut manifest = RunManifest::new("backtest", &cfg);
    manifest
        .input(&args.forecasts)
        .input(&args.realized)
        .input(&args.returns)
        .output(&report_path)
        .output(&weights_path)
        .count("days", outcome.dates.len() as i64)
        .count("repaired_forecasts", outcome.repaired_forecasts as i64);
    manifest.save(&args.out.join("backtest.manifest.json"))?;
    println!(
        "backtested {} days under {} constraints: annualized std {:.4}%, sharpe {:.4}",
        outcome.dates.len(),
        cfg.constraints,
        outcome.report.std_dev_pct,
        outcome.report.sharpe_ratio
    );
    Ok(())
}

fn estimate_both(series: &[f64], bandwidth: Option<usize>) -> Result<[LongMemoryEstimate; 2]> {
    Ok([
        gph_estimate(series, bandwidth)?,
        local_whittle_estimate(series, bandwidth)?,
    ])
}

fn cmd_diagnose(mut cfg: RunConfig, args: DiagnoseArgs) -> Result<()> {
    if let Some(v) = args.k_max {
        cfg.k_max = v;
    }
    if let Some(v) = args.bandwidth {
        cfg.bandwidth = v;
    }
    ensure_dir(&args.out)?;
    let panel = load_cov_panel(&args.input)?;
    let bandwidth = (cfg.bandwidth > 0).then_some(cfg.bandwidth);
    let mut manifest = RunManifest::new("diagnose", &cfg);
    manifest.input(&args.input);

    // Long memory of each asset's log-variance series, plus factor-variance
    // series when weights are supplied.
    let mut rows: Vec<(String, [LongMemoryEstimate; 2])> = Vec::new();
    let n = panel.n_assets();
    let t_len = panel.n_days();
    for i in 0..n {
        let series: Vec<f64> = (0..t_len)
            .map(|t| {
                let v = panel.mats[t][covcast::panel::vech_index(n, i, i)];
                v.max(1e-300).ln()
            })
            .collect();
        rows.push((
            format!("logvar_{}", panel.assets[i]),
            estimate_both(&series, bandwidth)?,
        ));
    }
    if let Some(wpath) = &args.weights {
        let spec = load_factor_spec_csv(wpath)?.aligned_to(&panel.assets)?;
        manifest.input(wpath);
        let k = spec.n_factors();
        let mut factor_series = vec![Vec::with_capacity(t_len); k];
        for t in 0..t_len {
            let dec_f = covcast::factor::factor_cov(&panel.mat(t), &spec)?;
            for j in 0..k {
                factor_series[j].push(dec_f[(j, j)].max(1e-300).ln());
            }
        }
        for (j, series) in factor_series.iter().enumerate() {
            rows.push((
                format!("logvar_factor_{}", spec.factor_names[j]),
                estimate_both(series, bandwidth)?,
            ));
        }
    }

    let lm_path = args.out.join("long_memory.csv");
    {
        use std::io::Write;
        let file = std::fs::File::create(&lm_path)
            .map_err(|e| Error::io(lm_path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let io_err = |e| Error::io(lm_path.display().to_string(), e);
        writeln!(w, "series,method,bandwidth,d_hat").map_err(io_err)?;
        for (name, ests) in &rows {
            for est in ests {
                let method = match est.method {
                    covcast::diagnostics::LongMemoryMethod::Gph => "log_periodogram",
                    covcast::diagnostics::LongMemoryMethod::LocalWhittle => "local_whittle",
                };
                writeln!(w, "{name},{method},{},{:.16e}", est.bandwidth, est.d_hat)
                    .map_err(io_err)?;
            }
        }
        w.flush().map_err(io_err)?;
    }
    manifest.output(&lm_path).count("series", rows.len() as i64);

    // Leftover-factor scan on residual returns.
    if let (Some(rpath), Some(wpath)) = (&args.returns, &args.weights) {
        let returns = load_returns_panel(rpath)?;
        manifest.input(rpath);
        let spec = load_factor_spec_csv(wpath)?.aligned_to(&returns.assets)?;
        let residuals = factor_regression_residuals(&returns.returns, &spec.weights)?;
        let scan = omitted_factor_scan(&residuals, cfg.k_max)?;
        let xi_path = args.out.join("xi.csv");
        {
            use std::io::Write;
            let file = std::fs::File::create(&xi_path)
                .map_err(|e| Error::io(xi_path.display().to_string(), e))?;
            let mut w = std::io::BufWriter::new(file);
            let io_err = |e| Error::io(xi_path.display().to_string(), e);
            writeln!(w, "k,xi").map_err(io_err)?;
            for (k, xi) in scan.xi.iter().enumerate() {
                writeln!(w, "{k},{xi:.16e}").map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        manifest.output(&xi_path);
        match scan.detected_k {
            Some(k) => manifest.count("detected_factors", k as i64),
            None => manifest.count("detected_factors", -1),
        };
        println!(
            "leftover-factor scan: {}",
            match scan.detected_k {
                Some(k) => format!("{k} factors remain"),
                None => "no separation found within k_max".to_string(),
            }
        );
    } else if args.returns.is_some() {
        return Err(Error::Validation(
            "the leftover-factor scan needs --weights alongside --returns".into(),
        ));
    }

    manifest.save(&args.out.join("diagnose.manifest.json"))?;
    println!(
        "diagnostics for {} series in {}",
        rows.len(),
        args.out.display()
    );
    Ok(())
}

/// Residuals of each asset's returns after removing factor returns
/// `f = W' r` by least squares, asset by asset.
fn factor_regression_residuals(
    returns: &DMatrix<f64>,
    weights: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    let t_len = returns.nrows();
    let n = returns.ncols();
    if weights.nrows() != n {
        return Err(Error::Dimension(format!(
            "weights cover {} assets, returns have {n}",
            weights.nrows()
        )));
    }
    let k = weights.ncols();
    let factors = returns * weights; // T x K
                                     // Design with intercept.
    let mut z = DMatrix::<f64>::zeros(t_len, k + 1);
    for t in 0..t_len {
        z[(t, 0)] = 1.0;
        for j in 0..k {
            z[(t, j + 1)] = factors[(t, j)];
        }
    }
    let ztz = z.transpose() * &z;
    let chol = nalgebra::Cholesky::new(ztz)
        .ok_or_else(|| Error::Numeric("factor returns are collinear".into()))?;
    let ztr = z.transpose() * returns; // (K+1) x N
    let coefs = chol.solve(&ztr);
    let fitted = &z * &coefs;
    Ok(returns - fitted)
}
