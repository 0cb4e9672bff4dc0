//! Batch command-line front end for the model fitting library.
//!
//! Subcommands map one-to-one onto library operations: `simulate` and
//! `sample` drive the synthetic population engine, `fit` / `fit-mi` estimate
//! models, `decompose`, `test-equality`, `residuals` and `report` post-process
//! fitted results into JSON, CSV, SVG and text artifacts. Every output is
//! written atomically and accompanied by a run manifest that pins the
//! command, inputs, seed and tool version, so artifacts are reproducible
//! bit-for-bit from their manifest.
//!
//! Exit codes: 0 on success, 1 on domain errors (reported as one-line JSON on
//! stderr), 2 on usage errors.

mod manifest;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use plumm::data::{self, Dataset, PrepareOptions, Schema};
use plumm::eb;
use plumm::fit::{self, FitOptions};
use plumm::likelihood::GradientMethod;
use plumm::mi;
use plumm::model::ModelSpec;
use plumm::report;
use plumm::sim::{self, sampling, SimConfig};
use plumm::weights::{self, WeightScaling};
use plumm::{Error, Result};

use manifest::ManifestBuilder;

#[derive(Parser)]
#[command(
    name = "plumm",
    version,
    about = "Multivariate two-level linear mixed models for assessment data with plausible values"
)]
struct Cli {
    /// Cap on worker threads for the parallel sections.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population and its dataset.
    Simulate(SimulateArgs),
    /// Draw a stratified two-stage PPS sample from a simulated population.
    Sample(SampleArgs),
    /// Fit one model on a single plausible value (optionally weighted).
    Fit(FitArgs),
    /// Fit across all plausible values and pool the results.
    FitMi(FitMiArgs),
    /// Empirical Bayes class effects: caterpillar and normal-probability data.
    Residuals(ResidualsArgs),
    /// Pooled equality test of a term's coefficients across outcomes.
    TestEquality(TestEqualityArgs),
    /// Correlation decomposition of a fitted covariance pair.
    Decompose(DecomposeArgs),
    /// Render the full report: tables, plot CSVs, and SVGs.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulator configuration JSON; omit for a built-in preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset when no config is given: `achievement` or `null`.
    #[arg(long, default_value = "achievement")]
    preset: String,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset CSV; sidecars (schema, frame, areas) share the stem.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Frame JSON emitted by `simulate`.
    #[arg(long)]
    frame: PathBuf,
    /// Population dataset CSV emitted by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// Schema JSON for the dataset.
    #[arg(long)]
    schema: PathBuf,
    /// Sampling configuration JSON; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_data: PathBuf,
    #[arg(long)]
    out_weights: PathBuf,
}

#[derive(Args)]
struct CommonFitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Relative log-likelihood change tolerance.
    #[arg(long, default_value_t = 1e-10)]
    tol_loglik: f64,
    /// Gradient infinity-norm tolerance.
    #[arg(long, default_value_t = 1e-5)]
    tol_grad: f64,
    #[arg(long, default_value_t = 200)]
    max_iter: usize,
    /// Use central finite differences instead of the analytic gradient.
    #[arg(long)]
    fd_gradient: bool,
    /// Apply the K/(K-1) small-sample cluster correction to robust SEs.
    #[arg(long)]
    cluster_correction: bool,
    /// Recompute class means after listwise deletion instead of before.
    #[arg(long)]
    class_means_post_deletion: bool,
}

impl CommonFitArgs {
    fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_iter: self.max_iter,
            tol_loglik: self.tol_loglik,
            tol_grad: self.tol_grad,
            gradient: if self.fd_gradient {
                GradientMethod::central_default::<f64>()
            } else {
                GradientMethod::Analytic
            },
            compute_param_cov: true,
            cluster_correction: self.cluster_correction,
        }
    }

    fn prepare_options(&self) -> PrepareOptions {
        PrepareOptions { class_means_pre_deletion: !self.class_means_post_deletion }
    }
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    common: CommonFitArgs,
    /// Plausible value to fit (1-based).
    #[arg(long, default_value_t = 1)]
    pv: usize,
    /// Survey weights CSV; switches to the weighted univariate fit.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Level-1 weight rescaling for the weighted fit.
    #[arg(long, value_parser = parse_scaling, default_value = "none")]
    weight_scaling: WeightScaling,
    #[arg(long)]
    out: PathBuf,
}

fn parse_scaling(s: &str) -> std::result::Result<WeightScaling, String> {
    match s {
        "none" => Ok(WeightScaling::None),
        "cluster" => Ok(WeightScaling::ClusterSize),
        other => Err(format!("unknown weight scaling `{other}` (use none|cluster)")),
    }
}

#[derive(Args)]
struct FitMiArgs {
    #[command(flatten)]
    common: CommonFitArgs,
    /// Pool with the model-based covariance instead of the robust one.
    #[arg(long)]
    model_based: bool,
    /// Not supported: weighted estimation does not combine with
    /// multiple-imputation pooling.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ResidualsArgs {
    /// Fit JSON from `fit` (or pooled JSON from `fit-mi` with --mi-average).
    #[arg(long)]
    fit: PathBuf,
    #[command(flatten)]
    common: CommonFitArgs,
    /// Plausible value the fit was computed on.
    #[arg(long, default_value_t = 1)]
    pv: usize,
    /// Outcome name; defaults to every outcome.
    #[arg(long)]
    outcome: Option<String>,
    /// Average predictions across all imputations of a pooled fit.
    #[arg(long)]
    mi_average: bool,
    /// Confidence level for the comparative intervals.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Optional class-to-area CSV enabling the territorial summary.
    #[arg(long)]
    areas: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct TestEqualityArgs {
    /// Pooled fit JSON from `fit-mi`.
    #[arg(long)]
    mi: PathBuf,
    /// Term to test for equal coefficients across outcomes.
    #[arg(long)]
    term: String,
    /// Use the model-based covariance instead of the robust one.
    #[arg(long)]
    model_based: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecomposeArgs {
    /// Fit JSON from `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also print the rendered table to stdout.
    #[arg(long)]
    print: bool,
}

#[derive(Args)]
struct ReportArgs {
    /// Pooled fit JSON from `fit-mi`.
    #[arg(long)]
    mi: PathBuf,
    #[command(flatten)]
    common: CommonFitArgs,
    /// Plausible value used for the residual analysis.
    #[arg(long, default_value_t = 1)]
    pv: usize,
    /// Class-to-area CSV for the territorial table.
    #[arg(long)]
    areas: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads.max(1)).build_global();
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate(args) => run_simulate(args),
        Command::Sample(args) => run_sample(args),
        Command::Fit(args) => run_fit(args),
        Command::FitMi(args) => run_fit_mi(args),
        Command::Residuals(args) => run_residuals(args),
        Command::TestEquality(args) => run_test_equality(args),
        Command::Decompose(args) => run_decompose(args),
        Command::Report(args) => run_report(args),
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

fn load_prepared(
    common: &CommonFitArgs,
) -> Result<(Dataset<f64>, Schema, ModelSpec, data::ExclusionReport, Vec<String>)> {
    let schema = Schema::from_json(&std::fs::read_to_string(&common.schema)?)?;
    let spec = ModelSpec::from_json(&std::fs::read_to_string(&common.model)?)?;
    let raw: Dataset<f64> = data::load_dataset(&common.data, &schema)?;
    let (prepared, report, warnings) =
        data::prepare_dataset(&raw, &spec, common.prepare_options())?;
    let warnings = warnings
        .into_iter()
        .map(|w| match w {
            data::TransformWarning::CenteredBinary { column } => {
                format!("centered binary indicator `{column}`")
            }
        })
        .collect();
    Ok((prepared, schema, spec, report, warnings))
}

fn stem_sidecar(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("out");
    out.with_file_name(format!("{stem}{suffix}"))
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("simulate");
    let mut config = match &args.config {
        Some(path) => {
            manifest.input(path);
            SimConfig::from_json(&std::fs::read_to_string(path)?)?
        }
        None => match args.preset.as_str() {
            "achievement" => SimConfig::achievement_preset(0),
            "null" => SimConfig::null_preset(0),
            other => {
                return Err(Error::Validation(format!(
                    "unknown preset `{other}` (use achievement|null)"
                )))
            }
        },
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    manifest.seed(config.seed);

    let (frame, dataset) = sim::simulate_population::<f64>(&config)?;
    let schema = dataset.schema();

    let schema_path = stem_sidecar(&args.out, ".schema.json");
    let frame_path = stem_sidecar(&args.out, ".frame.json");
    let areas_path = stem_sidecar(&args.out, ".areas.csv");

    manifest.write_output(&args.out, data::emit_dataset_to_string(&dataset).as_bytes())?;
    manifest.write_output(&schema_path, serde_json::to_string_pretty(&schema)?.as_bytes())?;
    manifest.write_output(&frame_path, serde_json::to_string(&frame)?.as_bytes())?;
    let mut areas = String::from("class_id,area\n");
    for (class, area) in frame.class_areas() {
        areas.push_str(&format!("{class},{area}\n"));
    }
    manifest.write_output(&areas_path, areas.as_bytes())?;
    manifest.finish(&args.out)?;
    println!(
        "simulated {} students in {} classes ({} schools) -> {}",
        dataset.n_students(),
        dataset.n_classes(),
        frame.schools.len(),
        args.out.display()
    );
    Ok(())
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("sample");
    manifest.input(&args.frame);
    manifest.input(&args.data);
    manifest.input(&args.schema);
    let frame: sim::FramePopulation<f64> = read_json(&args.frame)?;
    let schema = Schema::from_json(&std::fs::read_to_string(&args.schema)?)?;
    let dataset: Dataset<f64> = data::load_dataset(&args.data, &schema)?;
    let mut config: sampling::SampleConfig = match &args.config {
        Some(path) => {
            manifest.input(path);
            read_json(path)?
        }
        None => sampling::SampleConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    manifest.seed(config.seed);

    let (sampled, weight_set) = sampling::sample_survey(&frame, &dataset, &config)?;
    manifest.write_output(&args.out_data, data::emit_dataset_to_string(&sampled).as_bytes())?;
    weights::emit_weights(&weight_set, &args.out_weights)?;
    manifest.output(&args.out_weights);
    manifest.finish(&args.out_data)?;
    println!(
        "sampled {} students in {} classes -> {}",
        sampled.n_students(),
        sampled.n_classes(),
        args.out_data.display()
    );
    Ok(())
}

fn run_fit(args: FitArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("fit");
    manifest.input(&args.common.data);
    manifest.input(&args.common.schema);
    manifest.input(&args.common.model);
    let (prepared, _, spec, exclusions, warnings) = load_prepared(&args.common)?;
    let design = plumm::design::build_design(&prepared, &spec, args.pv)?;
    let fit = match &args.weights {
        Some(path) => {
            manifest.input(path);
            if spec.outcomes.len() != 1 {
                return Err(Error::Validation(
                    "weighted fitting is univariate: declare a single outcome in the model".into(),
                ));
            }
            let mut ws = weights::load_weights::<f64>(path)?;
            ws.scaling = args.weight_scaling;
            weights::fit_weighted_univariate(&design, &ws, &args.common.fit_options())?
        }
        None => fit::fit_ml(&design, &args.common.fit_options())?,
    };
    let payload = serde_json::json!({
        "fit": fit,
        "pv_index": args.pv,
        "exclusions": exclusions,
        "warnings": warnings,
        "units": { "scores": "score points", "variances": "score points squared" },
    });
    manifest.write_output(&args.out, serde_json::to_string_pretty(&payload)?.as_bytes())?;
    manifest.finish(&args.out)?;
    println!(
        "fit: logL = {:.4}, {} students, {} classes, converged = {}",
        fit.log_lik, fit.n_students, fit.n_classes, fit.convergence.converged
    );
    Ok(())
}

fn run_fit_mi(args: FitMiArgs) -> Result<()> {
    if args.weights.is_some() {
        // Pooling weighted fits across plausible values compounds the weight
        // and imputation variance inflation; the combination is rejected.
        return Err(Error::Validation(
            "--weights cannot be combined with fit-mi: weighted pseudo-likelihood estimation \
             is offered for single-plausible-value univariate fits only"
                .into(),
        ));
    }
    let mut manifest = ManifestBuilder::new("fit-mi");
    manifest.input(&args.common.data);
    manifest.input(&args.common.schema);
    manifest.input(&args.common.model);
    let (prepared, _, spec, exclusions, warnings) = load_prepared(&args.common)?;
    let opts = mi::MiOptions {
        fit: args.common.fit_options(),
        use_robust: !args.model_based,
        ..mi::MiOptions::default()
    };
    let pooled = mi::fit_mi(&prepared, &spec, &opts)?;
    let payload = serde_json::json!({
        "mi": pooled,
        "exclusions": exclusions,
        "warnings": warnings,
        "units": { "scores": "score points", "variances": "score points squared" },
    });
    manifest.write_output(&args.out, serde_json::to_string_pretty(&payload)?.as_bytes())?;
    manifest.finish(&args.out)?;
    println!(
        "pooled {} of {} imputations; {} equality tests",
        pooled.fits.len(),
        pooled.n_imputations,
        pooled.tests.len()
    );
    Ok(())
}

fn load_fit_json(path: &Path) -> Result<plumm::FitResult64> {
    let value: serde_json::Value = read_json(path)?;
    let fit = value
        .get("fit")
        .cloned()
        .ok_or_else(|| Error::Validation(format!("{} holds no `fit` object", path.display())))?;
    Ok(serde_json::from_value(fit)?)
}

fn load_mi_json(path: &Path) -> Result<plumm::MiFitResult64> {
    let value: serde_json::Value = read_json(path)?;
    let mi = value
        .get("mi")
        .cloned()
        .ok_or_else(|| Error::Validation(format!("{} holds no `mi` object", path.display())))?;
    Ok(serde_json::from_value(mi)?)
}

fn load_areas(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let mut map = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(Error::from)?;
        if let (Some(class), Some(area)) = (record.get(0), record.get(1)) {
            map.insert(class.trim().to_string(), area.trim().to_string());
        }
    }
    Ok(map)
}

fn outcome_indices(outcomes: &[String], wanted: &Option<String>) -> Result<Vec<usize>> {
    match wanted {
        None => Ok((0..outcomes.len()).collect()),
        Some(name) => {
            let idx = outcomes.iter().position(|o| o == name).ok_or_else(|| {
                Error::Validation(format!("unknown outcome `{name}`; model fits {outcomes:?}"))
            })?;
            Ok(vec![idx])
        }
    }
}

fn write_residual_artifacts(
    manifest: &mut ManifestBuilder,
    residuals: &plumm::EbResiduals64,
    outcome_idx: &[usize],
    level: f64,
    areas: Option<&BTreeMap<String, String>>,
    out_dir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    for &o in outcome_idx {
        let outcome = residuals.outcomes[o].clone();
        let cats = eb::caterpillar_data(residuals, o, level)?;
        let qq = eb::qq_data(residuals, o)?;
        manifest.write_output(
            &out_dir.join(format!("caterpillar_{outcome}.csv")),
            report::caterpillar_csv(&cats).as_bytes(),
        )?;
        manifest.write_output(
            &out_dir.join(format!("caterpillar_{outcome}.svg")),
            report::caterpillar_svg(&cats, &outcome).as_bytes(),
        )?;
        manifest.write_output(
            &out_dir.join(format!("qq_{outcome}.csv")),
            report::qq_csv(&qq).as_bytes(),
        )?;
        manifest.write_output(
            &out_dir.join(format!("qq_{outcome}.svg")),
            report::qq_svg(&qq, &outcome).as_bytes(),
        )?;
        if let Some(groups) = areas {
            let summary = eb::territorial_summary(residuals, o, groups)?;
            manifest.write_output(
                &out_dir.join(format!("territorial_{outcome}.txt")),
                report::render_territorial(&summary, &outcome).as_bytes(),
            )?;
        }
    }
    Ok(())
}

fn run_residuals(args: ResidualsArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("residuals");
    manifest.input(&args.fit);
    manifest.input(&args.common.data);
    manifest.input(&args.common.schema);
    manifest.input(&args.common.model);
    let (prepared, _, spec, _, _) = load_prepared(&args.common)?;
    let residuals = if args.mi_average {
        let pooled = load_mi_json(&args.fit)?;
        let designs: Vec<plumm::StackedDesign64> = pooled
            .pv_indices
            .iter()
            .map(|&pv| plumm::design::build_design(&prepared, &spec, pv))
            .collect::<Result<_>>()?;
        eb::eb_predict_averaged(&pooled.fits, &designs)?
    } else {
        let fit = load_fit_json(&args.fit)?;
        let design = plumm::design::build_design(&prepared, &spec, args.pv)?;
        eb::eb_predict(&fit, &design)?
    };
    let outcome_idx = outcome_indices(&residuals.outcomes, &args.outcome)?;
    let areas = match &args.areas {
        Some(path) => {
            manifest.input(path);
            Some(load_areas(path)?)
        }
        None => None,
    };
    write_residual_artifacts(
        &mut manifest,
        &residuals,
        &outcome_idx,
        args.level,
        areas.as_ref(),
        &args.out_dir,
    )?;
    manifest.finish(&args.out_dir.join("residuals"))?;
    println!(
        "residuals for {} classes and {} outcome(s) -> {}",
        residuals.n_classes(),
        outcome_idx.len(),
        args.out_dir.display()
    );
    Ok(())
}

fn run_test_equality(args: TestEqualityArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("test-equality");
    manifest.input(&args.mi);
    let pooled = load_mi_json(&args.mi)?;
    let test = mi::test_equality(&pooled, &args.term, !args.model_based)?;
    manifest.write_output(&args.out, serde_json::to_string_pretty(&test)?.as_bytes())?;
    manifest.finish(&args.out)?;
    println!(
        "equality of `{}` across outcomes: D1 = {:.4}, F({}, {:.1}), p = {:.4}",
        args.term, test.d1, test.k, test.df_denominator, test.p_value
    );
    Ok(())
}

fn run_decompose(args: DecomposeArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("decompose");
    manifest.input(&args.fit);
    let fit = load_fit_json(&args.fit)?;
    let decomposition = fit::decompose(&fit);
    let payload = serde_json::json!({
        "decomposition": decomposition,
        "units": { "icc": "percent", "pct_between": "percent" },
    });
    manifest.write_output(&args.out, serde_json::to_string_pretty(&payload)?.as_bytes())?;
    manifest.finish(&args.out)?;
    if args.print {
        print!("{}", report::render_decomposition(&decomposition));
    }
    Ok(())
}

fn run_report(args: ReportArgs) -> Result<()> {
    let mut manifest = ManifestBuilder::new("report");
    manifest.input(&args.mi);
    manifest.input(&args.common.data);
    manifest.input(&args.common.schema);
    manifest.input(&args.common.model);
    let pooled = load_mi_json(&args.mi)?;
    let (prepared, _, spec, _, _) = load_prepared(&args.common)?;

    std::fs::create_dir_all(&args.out_dir)?;
    let mut text = String::new();

    // (a) correlation decomposition from the pooled covariance matrices.
    let mut rep_fit = pooled.fits[0].clone();
    rep_fit.sigma = pooled.sigma_combined.clone();
    rep_fit.tau = pooled.tau_combined.clone();
    text.push_str(&report::render_decomposition(&fit::decompose(&rep_fit)));
    text.push('\n');

    // (b) coefficient table with equality-test p-values.
    text.push_str(&report::render_coefficient_table(&pooled));
    text.push('\n');

    // (c) residual analysis on one designated plausible value.
    let which = pooled
        .pv_indices
        .iter()
        .position(|&pv| pv == args.pv)
        .ok_or_else(|| Error::Validation(format!("no stored fit for pv {}", args.pv)))?;
    let design = plumm::design::build_design(&prepared, &spec, args.pv)?;
    let residuals = eb::eb_predict(&pooled.fits[which], &design)?;
    let areas = match &args.areas {
        Some(path) => {
            manifest.input(path);
            Some(load_areas(path)?)
        }
        None => None,
    };
    if let Some(groups) = &areas {
        for o in 0..residuals.outcomes.len() {
            let summary = eb::territorial_summary(&residuals, o, groups)?;
            text.push_str(&report::render_territorial(&summary, &residuals.outcomes[o]));
            text.push('\n');
        }
    }
    let all: Vec<usize> = (0..residuals.outcomes.len()).collect();
    write_residual_artifacts(&mut manifest, &residuals, &all, 0.95, areas.as_ref(), &args.out_dir)?;

    manifest.write_output(&args.out_dir.join("report.txt"), text.as_bytes())?;
    manifest.finish(&args.out_dir.join("report"))?;
    println!("report -> {}", args.out_dir.display());
    Ok(())
}
