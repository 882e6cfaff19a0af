//! `blipmeta`: privacy-preserving multisite estimation of individualized
//! treatment rules.
//!
//! Subcommands cover the full pipeline: simulate scenario data, fit a site
//! and emit its transferable summary, pool summaries at the coordinator
//! (from files, stdin, or TCP), fit the one-stage comparator, extract and
//! apply rules, evaluate against truth-known cohorts, and orchestrate
//! replicated studies. Every run writes a manifest (config echo, seeds,
//! tool version) beside its outputs.

use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use blipmeta_core::federation::{
    self, encode_summary, model_fingerprint, read_summaries_dir, validate_summary,
    CollectOptions, SiteSummary,
};
use blipmeta_core::itr::{self, Rule};
use blipmeta_core::model::{ModelSpec, SiteDataset};
use blipmeta_core::simgen::{generate_replicate, CovariateTable, Scenario};
use blipmeta_core::stage_one::run_site_pipeline;
use blipmeta_core::stage_two::{
    assemble_likelihood, run_mcmc, McmcSettings, PooledPosterior, PosteriorSummaryDoc,
    PriorConfig,
};
use blipmeta_core::study::{self, Manifest, StudyConfig};

#[derive(Parser)]
#[command(name = "blipmeta", version, about = "Multisite treatment-rule estimation without sharing individual-level data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one replicate of a scenario as per-site CSV files.
    Simulate(SimulateArgs),
    /// Fit one site and write its transferable summary document.
    FitSite(FitSiteArgs),
    /// Pool site summaries into the hierarchical posterior.
    Pool(PoolArgs),
    /// One-stage comparator: fit all sites' raw data in a single model.
    FitPooled(FitPooledArgs),
    /// Evaluate a pooled rule against a truth-known scenario cohort.
    Evaluate(EvaluateArgs),
    /// Apply a pooled rule to a covariate file, row by row.
    Recommend(RecommendArgs),
    /// Send a site summary to a collecting coordinator over TCP.
    ServeSite(ServeSiteArgs),
    /// Collect site summaries over TCP and write them to a directory.
    Collect(CollectArgs),
    /// Run a replicated simulation study end to end.
    RunStudy(RunStudyArgs),
    /// Merge per-study aggregate reports into one document.
    Report(ReportArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Replicate index to generate.
    #[arg(long, default_value_t = 0)]
    replicate: u32,
    /// Output directory for site CSVs.
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct FitSiteArgs {
    /// Site data CSV with a header row.
    #[arg(long)]
    data: PathBuf,
    /// Model specification (TOML or JSON).
    #[arg(long)]
    model: PathBuf,
    /// Site identifier; defaults to the data file stem.
    #[arg(long)]
    site_id: Option<String>,
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    /// Output path for the summary document.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct McmcArgs {
    #[arg(long, default_value_t = 2)]
    chains: usize,
    #[arg(long, default_value_t = 1000)]
    warmup: usize,
    #[arg(long, default_value_t = 1000)]
    kept: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl McmcArgs {
    fn settings(&self) -> McmcSettings {
        McmcSettings {
            n_chains: self.chains,
            n_warmup: self.warmup,
            n_kept: self.kept,
            seed: self.seed,
        }
    }
}

#[derive(Args)]
struct PoolArgs {
    /// Directory of `*.summary.json` documents.
    #[arg(long, conflicts_with = "stdin")]
    summaries: Option<PathBuf>,
    /// Read newline-delimited summary documents from standard input.
    #[arg(long)]
    stdin: bool,
    /// Model specification the summaries must match.
    #[arg(long)]
    model: PathBuf,
    /// Prior configuration TOML; defaults to vague normal means with a
    /// half-Cauchy(0,1) variance prior.
    #[arg(long)]
    priors: Option<PathBuf>,
    /// Shorthand: horseshoe on all treatment-covariate interactions.
    #[arg(long)]
    horseshoe: bool,
    #[command(flatten)]
    mcmc: McmcArgs,
    /// Output prefix: writes `<prefix>.draws.csv`, `<prefix>.summary.json`,
    /// and `<prefix>.manifest.json`.
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct FitPooledArgs {
    /// Site data CSVs (site id = file stem).
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    priors: Option<PathBuf>,
    #[arg(long)]
    horseshoe: bool,
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
    #[command(flatten)]
    mcmc: McmcArgs,
    #[arg(long)]
    out_prefix: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Pooling summary JSON (from `pool` or `fit-pooled`).
    #[arg(long)]
    summary: PathBuf,
    /// Truth scenario TOML.
    #[arg(long)]
    scenario: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    cohort_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use posterior medians instead of means for the rule.
    #[arg(long)]
    median: bool,
    #[arg(long)]
    dose_lo: Option<f64>,
    #[arg(long)]
    dose_hi: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RecommendArgs {
    #[arg(long)]
    summary: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Covariate CSV (no treatment or outcome columns required).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    median: bool,
    #[arg(long, default_value_t = -100.0, allow_hyphen_values = true)]
    dose_lo: f64,
    #[arg(long, default_value_t = 100.0)]
    dose_hi: f64,
    /// Draws CSV from `pool`; adds per-row dose quantiles over the
    /// posterior draws.
    #[arg(long)]
    draws: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeSiteArgs {
    /// Coordinator address, e.g. `127.0.0.1:7070`.
    #[arg(long)]
    connect: String,
    /// Pre-built summary document to send.
    #[arg(long, conflicts_with_all = ["data", "model"])]
    summary: Option<PathBuf>,
    /// Fit this data file and send the resulting summary.
    #[arg(long, requires = "model")]
    data: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    site_id: Option<String>,
    #[arg(long, default_value = "treatment")]
    treatment_col: String,
    #[arg(long, default_value = "outcome")]
    outcome_col: String,
}

#[derive(Args)]
struct CollectArgs {
    /// Listen address, e.g. `0.0.0.0:7070`.
    #[arg(long)]
    listen: String,
    /// Number of distinct sites expected.
    #[arg(long)]
    expect: usize,
    /// Expected model fingerprint (or derive it from --model).
    #[arg(long, conflicts_with = "model")]
    fingerprint: Option<String>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Keep whatever arrived at the deadline instead of failing.
    #[arg(long)]
    allow_partial: bool,
    /// Collection timeout in seconds (default 30, or BLIPMETA_TIMEOUT_SECS).
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// Directory for the collected `*.summary.json` documents.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunStudyArgs {
    /// Study configuration TOML.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (per-replicate CSV, aggregate JSON, manifest).
    #[arg(long)]
    out: PathBuf,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the replicate count.
    #[arg(long)]
    replicates: Option<u32>,
    /// Worker threads for replicates (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Aggregate JSON files from `run-study`; keys are file stems.
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Simulate(args) => simulate(args),
        Command::FitSite(args) => fit_site(args),
        Command::Pool(args) => pool(args),
        Command::FitPooled(args) => fit_pooled(args),
        Command::Evaluate(args) => evaluate(args),
        Command::Recommend(args) => recommend(args),
        Command::ServeSite(args) => serve_site(args),
        Command::Collect(args) => collect_cmd(args),
        Command::RunStudy(args) => run_study_cmd(args),
        Command::Report(args) => report(args),
    }
}

fn load_scenario(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let mut scenario = Scenario::from_path(path)
        .with_context(|| format!("reading scenario {}", path.display()))?;
    if let Some(seed) = seed {
        scenario.seed = seed;
    }
    Ok(scenario)
}

fn load_priors(
    path: Option<&PathBuf>,
    horseshoe: bool,
    spec: &ModelSpec,
) -> Result<PriorConfig> {
    match (path, horseshoe) {
        (Some(p), false) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading priors {}", p.display()))?;
            Ok(PriorConfig::from_toml_str(&text)?)
        }
        (None, true) => Ok(PriorConfig::horseshoe(spec)),
        (None, false) => Ok(PriorConfig::default()),
        (Some(_), true) => bail!("--priors and --horseshoe are mutually exclusive"),
    }
}

fn site_id_for(path: &Path, explicit: Option<&String>) -> String {
    explicit.cloned().unwrap_or_else(|| {
        path.file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "site".to_string())
    })
}

fn simulate(args: SimulateArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario, args.seed)?;
    let data = generate_replicate(&scenario, args.replicate)?;
    std::fs::create_dir_all(&args.out)?;
    for site in &data.sites {
        let path = args.out.join(format!("{}.csv", site.site_id));
        let file = std::fs::File::create(&path)?;
        site.to_csv_writer(file)?;
    }

    #[derive(serde::Serialize)]
    struct SimulateManifest<'a> {
        scenario: &'a Scenario,
        replicate: u32,
        site_sizes: &'a [usize],
        site_alphas: &'a [Option<[f64; 3]>],
    }
    Manifest::for_config(&SimulateManifest {
        scenario: &scenario,
        replicate: args.replicate,
        site_sizes: &data.site_sizes,
        site_alphas: &data.site_alphas,
    })?
    .write(&args.out.join("manifest.json"))?;
    println!(
        "wrote {} site files to {}",
        data.sites.len(),
        args.out.display()
    );
    Ok(())
}

fn fit_site(args: FitSiteArgs) -> Result<()> {
    let spec = ModelSpec::from_path(&args.model)?;
    let site_id = site_id_for(&args.data, args.site_id.as_ref());
    let data = SiteDataset::from_csv_path(
        &args.data,
        site_id,
        &args.treatment_col,
        &args.outcome_col,
    )?;
    let summary = run_site_pipeline(&spec, &data)?;
    std::fs::write(&args.out, encode_summary(&summary)?)?;

    #[derive(serde::Serialize)]
    struct FitSiteManifest<'a> {
        model: &'a ModelSpec,
        data: String,
        site_id: &'a str,
        n_obs: usize,
        entries: usize,
    }
    Manifest::for_config(&FitSiteManifest {
        model: &spec,
        data: args.data.display().to_string(),
        site_id: &summary.site_id,
        n_obs: summary.n_obs,
        entries: summary.entries.len(),
    })?
    .write(&manifest_path(&args.out))?;
    println!(
        "site `{}`: {} transferable entries -> {}",
        summary.site_id,
        summary.entries.len(),
        args.out.display()
    );
    Ok(())
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "output".into());
    name.push_str(".manifest.json");
    out.with_file_name(name)
}

fn read_stdin_summaries(fingerprint: &str) -> Result<Vec<SiteSummary>> {
    use std::io::BufRead;
    let stdin = std::io::stdin();
    let mut by_site = std::collections::BTreeMap::new();
    for line in stdin.lock().lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let summary = validate_summary(line.as_bytes(), Some(fingerprint))
            .map_err(blipmeta_core::Error::from)?;
        if by_site.contains_key(&summary.site_id) {
            bail!("duplicate site id `{}` on stdin", summary.site_id);
        }
        by_site.insert(summary.site_id.clone(), summary);
    }
    Ok(by_site.into_values().collect())
}

fn write_posterior_outputs(
    posterior: &PooledPosterior,
    fingerprint: &str,
    out_prefix: &Path,
) -> Result<PosteriorSummaryDoc> {
    let doc = posterior.summary_doc(fingerprint, 0.95);
    let draws_path = with_suffix(out_prefix, ".draws.csv");
    let summary_path = with_suffix(out_prefix, ".summary.json");
    let file = std::fs::File::create(&draws_path)?;
    posterior.write_draws_csv(file)?;
    std::fs::write(&summary_path, doc.to_json_bytes()?)?;
    println!(
        "wrote {} and {}",
        draws_path.display(),
        summary_path.display()
    );
    Ok(doc)
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pooled".into());
    name.push_str(suffix);
    prefix.with_file_name(name)
}

fn pool(args: PoolArgs) -> Result<()> {
    let spec = ModelSpec::from_path(&args.model)?;
    let fingerprint = model_fingerprint(&spec)?;
    let summaries = if args.stdin {
        read_stdin_summaries(&fingerprint)?
    } else {
        let dir = args
            .summaries
            .as_ref()
            .context("either --summaries or --stdin is required")?;
        read_summaries_dir(dir, Some(&fingerprint))?
    };
    if summaries.is_empty() {
        bail!("no site summaries found");
    }
    let labels = spec.psi_labels();
    let priors = load_priors(args.priors.as_ref(), args.horseshoe, &spec)?;
    let graph = assemble_likelihood(&summaries, spec.n_blip())?;
    let resolved = priors.resolve(&labels)?;
    let posterior = run_mcmc(&graph, &resolved, &labels, &args.mcmc.settings())?;
    write_posterior_outputs(&posterior, &fingerprint, &args.out_prefix)?;

    #[derive(serde::Serialize)]
    struct PoolManifest<'a> {
        model: &'a ModelSpec,
        priors: &'a PriorConfig,
        mcmc: McmcSettings,
        n_sites: usize,
        fingerprint: &'a str,
    }
    Manifest::for_config(&PoolManifest {
        model: &spec,
        priors: &priors,
        mcmc: args.mcmc.settings(),
        n_sites: summaries.len(),
        fingerprint: &fingerprint,
    })?
    .write(&with_suffix(&args.out_prefix, ".manifest.json"))?;
    Ok(())
}

fn fit_pooled(args: FitPooledArgs) -> Result<()> {
    let spec = ModelSpec::from_path(&args.model)?;
    let fingerprint = model_fingerprint(&spec)?;
    let mut datasets = Vec::with_capacity(args.data.len());
    for path in &args.data {
        let site_id = site_id_for(path, None);
        datasets.push(SiteDataset::from_csv_path(
            path,
            site_id,
            &args.treatment_col,
            &args.outcome_col,
        )?);
    }
    let priors = load_priors(args.priors.as_ref(), args.horseshoe, &spec)?;
    let n_sites = datasets.len();
    let model = blipmeta_core::one_stage::OneStageModel {
        spec: spec.clone(),
        datasets,
        priors: blipmeta_core::one_stage::OneStagePriors {
            psi: priors.clone(),
            ..Default::default()
        },
    };
    let posterior = blipmeta_core::one_stage::run_onestage(&model, &args.mcmc.settings())?;
    write_posterior_outputs(&posterior, &fingerprint, &args.out_prefix)?;

    #[derive(serde::Serialize)]
    struct FitPooledManifest<'a> {
        model: &'a ModelSpec,
        priors: &'a PriorConfig,
        mcmc: McmcSettings,
        n_sites: usize,
    }
    Manifest::for_config(&FitPooledManifest {
        model: &spec,
        priors: &priors,
        mcmc: args.mcmc.settings(),
        n_sites,
    })?
    .write(&with_suffix(&args.out_prefix, ".manifest.json"))?;
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let scenario = load_scenario(&args.scenario, None)?;
    let spec = scenario.model_spec();
    let doc = PosteriorSummaryDoc::from_path(&args.summary)?;
    let rule = Rule::from_summary_doc(&spec, &doc, args.median)?;
    let bounds = match (args.dose_lo, args.dose_hi) {
        (Some(lo), Some(hi)) => Some((lo, hi)),
        (None, None) => None,
        _ => bail!("--dose-lo and --dose-hi must be given together"),
    };
    let eval = itr::evaluate_rule(&rule, &scenario, args.cohort_size, args.seed, bounds)?;
    let mut bytes = serde_json::to_vec_pretty(&eval)?;
    bytes.push(b'\n');
    std::fs::write(&args.out, bytes)?;

    #[derive(serde::Serialize)]
    struct EvaluateManifest<'a> {
        scenario: &'a Scenario,
        summary: String,
        cohort_size: usize,
        seed: u64,
        use_median: bool,
    }
    Manifest::for_config(&EvaluateManifest {
        scenario: &scenario,
        summary: args.summary.display().to_string(),
        cohort_size: args.cohort_size,
        seed: args.seed,
        use_median: args.median,
    })?
    .write(&manifest_path(&args.out))?;
    println!(
        "dVF = {} (value under rule: {})",
        eval.dvf, eval.value_estimate
    );
    Ok(())
}

fn covariate_table_from_csv(path: &Path) -> Result<CovariateTable> {
    let mut rdr = csv::Reader::from_path(path)?;
    let names: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let mut columns = vec![Vec::new(); names.len()];
    for record in rdr.records() {
        let record = record?;
        for (j, field) in record.iter().enumerate() {
            let value: f64 = field
                .trim()
                .parse()
                .with_context(|| format!("non-numeric value `{field}` in column {}", names[j]))?;
            columns[j].push(value);
        }
    }
    Ok(CovariateTable { names, columns })
}

fn psi_draws_from_csv(path: &Path, labels: &[String]) -> Result<Vec<Vec<f64>>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
    let cols: Vec<usize> = labels
        .iter()
        .map(|l| {
            let name = format!("psi[{l}]");
            headers
                .iter()
                .position(|h| *h == name)
                .with_context(|| format!("draws file lacks column {name}"))
        })
        .collect::<Result<_>>()?;
    let mut draws = Vec::new();
    for record in rdr.records() {
        let record = record?;
        draws.push(
            cols.iter()
                .map(|&c| record[c].parse::<f64>().context("non-numeric draw"))
                .collect::<Result<Vec<f64>>>()?,
        );
    }
    Ok(draws)
}

fn recommend(args: RecommendArgs) -> Result<()> {
    let spec = ModelSpec::from_path(&args.model)?;
    let doc = PosteriorSummaryDoc::from_path(&args.summary)?;
    let rule = Rule::from_summary_doc(&spec, &doc, args.median)?;
    let table = covariate_table_from_csv(&args.data)?;
    let prepared = rule.prepare(&table)?;
    let bounds = (args.dose_lo, args.dose_hi);
    let draws = args
        .draws
        .as_ref()
        .map(|p| psi_draws_from_csv(p, &doc.psi_labels))
        .transpose()?;

    let file = std::fs::File::create(&args.out)?;
    let mut wtr = csv::Writer::from_writer(file);
    let is_binary = spec.blip_terms_quadratic.is_empty();
    let mut header: Vec<String> = vec!["row".into()];
    if is_binary {
        header.push("decision".into());
    } else {
        header.push("dose".into());
        header.push("clipped".into());
        header.push("concave".into());
        if draws.is_some() {
            header.extend(
                ["dose_q025", "dose_median", "dose_q975"]
                    .iter()
                    .map(|s| s.to_string()),
            );
        }
    }
    wtr.write_record(&header)?;
    for row in 0..table.n_rows() {
        let mut record = vec![row.to_string()];
        if is_binary {
            record.push(prepared.decide_binary(&table, row)?.to_string());
        } else {
            let d = prepared.decide_dose(&table, row, bounds)?;
            record.push(format!("{}", d.dose));
            record.push(u8::from(d.clipped).to_string());
            record.push(u8::from(d.concave).to_string());
            if let Some(draws) = &draws {
                let doses = itr::dose_per_draw(&spec, draws, &table, row, bounds)?;
                for p in [0.025, 0.5, 0.975] {
                    record.push(format!("{}", blipmeta_core::mcmc::quantile(&doses, p)));
                }
            }
        }
        wtr.write_record(&record)?;
    }
    wtr.flush()?;
    drop(wtr);

    #[derive(serde::Serialize)]
    struct RecommendManifest<'a> {
        model: &'a ModelSpec,
        summary: String,
        data: String,
        use_median: bool,
        dose_bounds: (f64, f64),
    }
    Manifest::for_config(&RecommendManifest {
        model: &spec,
        summary: args.summary.display().to_string(),
        data: args.data.display().to_string(),
        use_median: args.median,
        dose_bounds: bounds,
    })?
    .write(&manifest_path(&args.out))?;
    println!("wrote recommendations for {} rows", table.n_rows());
    Ok(())
}

fn serve_site(args: ServeSiteArgs) -> Result<()> {
    let summary = match (&args.summary, &args.data, &args.model) {
        (Some(path), None, None) => {
            let bytes = std::fs::read(path)?;
            validate_summary(&bytes, None).map_err(blipmeta_core::Error::from)?
        }
        (None, Some(data), Some(model)) => {
            let spec = ModelSpec::from_path(model)?;
            let site_id = site_id_for(data, args.site_id.as_ref());
            let dataset = SiteDataset::from_csv_path(
                data,
                site_id,
                &args.treatment_col,
                &args.outcome_col,
            )?;
            run_site_pipeline(&spec, &dataset)?
        }
        _ => bail!("provide either --summary, or --data with --model"),
    };
    federation::serve_summary(&args.connect, &summary)?;
    println!("summary for site `{}` acknowledged", summary.site_id);
    Ok(())
}

fn collect_cmd(args: CollectArgs) -> Result<()> {
    let fingerprint = match (&args.fingerprint, &args.model) {
        (Some(f), None) => f.clone(),
        (None, Some(model)) => model_fingerprint(&ModelSpec::from_path(model)?)?,
        _ => bail!("provide either --fingerprint or --model"),
    };
    let listener = TcpListener::bind(&args.listen)
        .with_context(|| format!("binding {}", args.listen))?;
    println!(
        "collecting {} summaries on {}",
        args.expect,
        listener.local_addr()?
    );
    let mut options = CollectOptions::new(args.expect, fingerprint.clone());
    options.allow_partial = args.allow_partial;
    options.timeout = args.timeout_secs.map(Duration::from_secs);
    let outcome = federation::collect(listener, &options)?;
    for warning in &outcome.warnings {
        eprintln!("warning: {warning}");
    }
    federation::write_summaries_dir(&args.out, &outcome.summaries)?;

    #[derive(serde::Serialize)]
    struct CollectManifest {
        expect: usize,
        received: usize,
        fingerprint: String,
        allow_partial: bool,
    }
    Manifest::for_config(&CollectManifest {
        expect: args.expect,
        received: outcome.summaries.len(),
        fingerprint,
        allow_partial: args.allow_partial,
    })?
    .write(&args.out.join("manifest.json"))?;
    println!(
        "collected {} summaries into {}",
        outcome.summaries.len(),
        args.out.display()
    );
    Ok(())
}

fn run_study_cmd(args: RunStudyArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading study config {}", args.config.display()))?;
    let mut config = StudyConfig::from_toml_str(&text)?;
    if let Some(seed) = args.seed {
        config.scenario.seed = seed;
    }
    if let Some(r) = args.replicates {
        config.replicates = r;
    }
    if let Some(threads) = args.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }

    let output = study::run_study(&config)?;
    std::fs::create_dir_all(&args.out)?;
    let csv_path = args.out.join("replicates.csv");
    let file = std::fs::File::create(&csv_path)?;
    output.write_replicates_csv(file)?;
    let metrics_path = args.out.join("metrics.json");
    std::fs::write(&metrics_path, output.metrics_json_bytes()?)?;
    Manifest::for_config(&config)?.write(&args.out.join("manifest.json"))?;

    for m in &output.metrics.per_index {
        let rb = m
            .relative_bias
            .map(|b| format!("{:.3}%", 100.0 * b))
            .unwrap_or_else(|| "n/a".into());
        let sel = m
            .selection_proportion
            .map(|p| format!(", selected {:.1}%", 100.0 * p))
            .unwrap_or_default();
        println!(
            "{}: mean {:.4} (true {}), relative bias {rb}, sd {:.4}{sel}",
            m.label, m.mean_estimate, m.true_value, m.sd
        );
    }
    println!(
        "dVF mean {:.5} (sd {:.5}); {} replicates, {} failed",
        output.metrics.dvf_mean,
        output.metrics.dvf_sd,
        output.metrics.n_replicates,
        output.metrics.n_failed
    );
    println!("outputs in {}", args.out.display());
    Ok(())
}

fn report(args: ReportArgs) -> Result<()> {
    let mut inputs = Vec::new();
    for path in &args.inputs {
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        let value: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)
            .with_context(|| format!("parsing {}", path.display()))?;
        inputs.push((stem, value));
    }
    let merged = study::merge_reports(inputs);
    let mut bytes = serde_json::to_vec_pretty(&merged)?;
    bytes.push(b'\n');
    std::fs::write(&args.out, bytes)?;
    println!(
        "merged {} reports into {}",
        args.inputs.len(),
        args.out.display()
    );
    Ok(())
}
