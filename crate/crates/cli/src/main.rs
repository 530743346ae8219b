use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use csegg::convert::{convert_visual_genome, ConvertOptions};
use csegg::dataset::{
    bucketize, class_frequencies, load_dataset, Bucket, BucketPolicy, ClassKind, IngestError, Split, FORMAT_VERSION,
};
use csegg::metrics::MetricsError;
use csegg::predictor::PredictorError;
use csegg::protocols::{build_scenario, mask_task, ProtocolError, ScenarioKind, ScenarioManifest};
use csegg::ras::{
    plan_prompts, sample_labels, EmbeddingProvider, HttpEmbedder, MockEmbedder, ProviderError, RasConfig, RasError,
    RetryPolicy, TripletUniverse,
};
use csegg::report::{build_report, ReportError};
use csegg::runner::{run_seeds, RunConfig, RunError, RunOptions};
use csegg::sampling::SamplingError;
use csegg::synth::{generate, write_placeholder_images, SynthConfig};

#[derive(Parser)]
#[command(name = "csegg", version, about = "Continual scene graph generation benchmark harness")]
struct Cli {
    /// Seed for commands without their own seed list.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run configuration (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = "info")]
    log_level: String,
    /// Worker threads for prediction.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert raw Visual Genome files into the dataset layout.
    Convert {
        raw_dir: PathBuf,
        out_dir: PathBuf,
        #[arg(long, default_value_t = 150)]
        max_objects: usize,
        #[arg(long, default_value_t = 50)]
        max_predicates: usize,
    },
    /// Build a scenario manifest from a dataset.
    Split {
        dataset: PathBuf,
        #[arg(long, value_enum)]
        scenario: Kind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a continual experiment, one directory per seed.
    Run(RunArgs),
    /// Tables, curves and a summary from one or more run directories.
    Report {
        #[arg(required = true)]
        run_dirs: Vec<PathBuf>,
        /// Where to write the report files; defaults to `<first run dir>/report`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Plan replay prompts from a triplet universe without generating images.
    RasDryrun {
        universe: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, env = "CSEGG_SIDE_CAR_URL")]
        sidecar_url: Option<String>,
    },
    /// Dataset statistics, per task when a scenario manifest is given.
    Stats {
        dataset: PathBuf,
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Write a synthetic dataset.
    Synth {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1000)]
        images: usize,
        #[arg(long, default_value_t = 150)]
        objects: usize,
        #[arg(long, default_value_t = 50)]
        predicates: usize,
        /// Also write placeholder images of this many bytes each.
        #[arg(long)]
        image_bytes: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    S1,
    S2,
    S3,
}

impl From<Kind> for ScenarioKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::S1 => ScenarioKind::S1,
            Kind::S2 => ScenarioKind::S2,
            Kind::S3 => ScenarioKind::S3,
        }
    }
}

#[derive(Args)]
struct RunArgs {
    /// Output directory; seed `s` runs in `<out>/seed-<s>`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// naive, replay@<pct>, ras, ras_gt, ewc, packnet or joint.
    #[arg(long)]
    strategy: Option<String>,
    /// oracle, decay_oracle:<rho>, freq_baseline, empty or cmd:<command>.
    #[arg(long)]
    predictor: Option<String>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    ks: Option<Vec<usize>>,
    /// Train scratch models for forward transfer.
    #[arg(long)]
    fwt: bool,
    #[arg(long, env = "CSEGG_SIDE_CAR_URL")]
    sidecar_url: Option<String>,
    /// Any configuration field, as `dotted.key=value` (value parsed as JSON,
    /// else taken as a string).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue a run stopped part-way.
    #[arg(long)]
    resume: bool,
    #[arg(long, hide = true)]
    stop_after: Option<usize>,
}

/// Failures specific to the command line.
#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("universe {0} has no labels")]
    EmptyUniverse(PathBuf),
    #[error("invalid override {0:?}: {1}")]
    Override(String, String),
}

fn error_code(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<RunError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<ReportError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<IngestError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<ProtocolError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<RasError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<PredictorError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<SamplingError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<ProviderError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<MetricsError>() {
            return x.code();
        }
        if let Some(x) = cause.downcast_ref::<CliError>() {
            return match x {
                CliError::EmptyUniverse(_) => "EmptyUniverse",
                CliError::Override(..) => "InvalidConfig",
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "IoError";
        }
    }
    "Error"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("error_code=UsageError");
            return ExitCode::from(2);
        }
    };
    env_logger::Builder::new().parse_filters(&cli.log_level).format_timestamp(None).init();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            eprintln!("error_code={}", error_code(&e));
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Convert { raw_dir, out_dir, max_objects, max_predicates } => {
            let opts = ConvertOptions { max_object_classes: *max_objects, max_predicate_classes: *max_predicates };
            let d = convert_visual_genome(raw_dir, &opts)?;
            d.write(out_dir)?;
            println!(
                "{} graphs, {} object classes, {} predicate classes -> {}",
                d.len(),
                d.vocab.objects.len(),
                d.vocab.predicates.len(),
                out_dir.display()
            );
        }
        Command::Split { dataset, scenario, out } => {
            let (d, _) = load_dataset(dataset, FORMAT_VERSION)?;
            let s = build_scenario(&d, (*scenario).into(), cli.seed.unwrap_or(0))?;
            ScenarioManifest::from_scenario(&s, &d.vocab).write(out)?;
            for t in &s.tasks {
                println!(
                    "task {}: {} objects, {} predicates, {} train / {} test images",
                    t.index,
                    t.objects.as_ref().map_or_else(|| "all".to_string(), |o| o.len().to_string()),
                    t.predicates.len(),
                    t.train_images.len(),
                    t.test_images.len()
                );
            }
            if let Some(g) = &s.generalization_test {
                println!("generalization: {} test images", g.test_images.len());
            }
        }
        Command::Run(args) => cmd_run(cli, args)?,
        Command::Report { run_dirs, out } => {
            let bundle = build_report(run_dirs)?;
            let out = out.clone().unwrap_or_else(|| run_dirs[0].join("report"));
            bundle.write(&out)?;
            print!("{}", bundle.summary());
            println!("\nreport written to {}", out.display());
        }
        Command::RasDryrun { universe, out, sidecar_url } => cmd_ras_dryrun(cli, universe, out, sidecar_url.as_deref())?,
        Command::Stats { dataset, scenario } => {
            let stats = dataset_stats(dataset, scenario.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Synth { out_dir, images, objects, predicates, image_bytes } => {
            let cfg = SynthConfig {
                seed: cli.seed.unwrap_or(0),
                images: *images,
                object_classes: *objects,
                predicate_classes: *predicates,
                ..Default::default()
            };
            let d = generate(&cfg);
            d.write(out_dir)?;
            if let Some(bytes) = image_bytes {
                let ids: Vec<&str> = d.graphs().map(|g| g.image_id.as_str()).collect();
                write_placeholder_images(&out_dir.join("images"), ids.into_iter(), *bytes, cfg.seed)?;
            }
            println!("{} graphs -> {}", d.len(), out_dir.display());
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), String> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| format!("{} is not a table", parts[..i].join(".")))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| json!({}));
        if cur.is_null() {
            *cur = json!({});
        }
    }
    Err("empty key".into())
}

/// Applies `key=value` overrides to a configuration.
fn apply_overrides(cfg: &RunConfig, overrides: &[String]) -> Result<RunConfig> {
    if overrides.is_empty() {
        return Ok(cfg.clone());
    }
    let mut v = serde_json::to_value(cfg)?;
    for o in overrides {
        let (key, raw) = o.split_once('=').ok_or_else(|| CliError::Override(o.clone(), "expected KEY=VALUE".into()))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(&mut v, key.trim(), value).map_err(|e| CliError::Override(o.clone(), e))?;
    }
    serde_json::from_value(v).map_err(|e| RunError::InvalidConfig(vec![e.to_string()]).into())
}

fn run_config(cli: &Cli, args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(s) = &args.scenario {
        cfg.scenario = s.clone();
    }
    if let Some(s) = &args.strategy {
        cfg.strategy = s.parse().map_err(|e: String| RunError::InvalidConfig(vec![format!("strategy: {e}")]))?;
    }
    if let Some(p) = &args.predictor {
        cfg.predictor = p.clone();
    }
    match (&args.seeds, cli.seed) {
        (Some(s), _) => cfg.seeds = s.clone(),
        (None, Some(s)) => cfg.seeds = vec![s],
        _ => {}
    }
    if let Some(ks) = &args.ks {
        cfg.ks = ks.clone();
    }
    if args.fwt {
        cfg.fwt = true;
    }
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    if let Some(url) = &args.sidecar_url {
        cfg.sidecar_url = Some(url.clone());
        cfg.ras.embedding_endpoint = None;
        cfg.ras.generation_endpoint = None;
    }
    let cfg = apply_overrides(&cfg, &args.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_run(cli: &Cli, args: &RunArgs) -> Result<()> {
    let cfg = run_config(cli, args)?;
    let opts = RunOptions { resume: args.resume, stop_after: args.stop_after };
    let records = run_seeds(&cfg, &args.out, opts)?;
    log::info!("{} seed(s) finished", records.len());
    let bundle = build_report(&[args.out.clone()])?;
    print!("{}", bundle.summary());
    Ok(())
}

fn cmd_ras_dryrun(cli: &Cli, universe: &Path, out: &Path, sidecar: Option<&str>) -> Result<()> {
    let cfg: RasConfig = match &cli.config {
        Some(p) => RunConfig::load(p)?.ras,
        None => RasConfig::default(),
    };
    cfg.validate()?;
    let file = TripletUniverse::read_file(universe)?;
    let vocab = file.vocab();
    let u = TripletUniverse::from_file(&file, &vocab).map_err(|e| anyhow::anyhow!("{}: {e}", universe.display()))?;
    if u.is_empty() {
        bail!(CliError::EmptyUniverse(universe.to_path_buf()));
    }
    let seed = cli.seed.unwrap_or(0);
    let embedder: Box<dyn EmbeddingProvider> = match sidecar {
        Some(url) => Box::new(HttpEmbedder::connect(url, RetryPolicy::default())?),
        None => Box::new(MockEmbedder { seed }),
    };
    let labels = sample_labels(&u, cfg.alpha, cfg.min_cluster_size_exclusive + 1, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let plan = plan_prompts(&labels, &vocab, embedder.as_ref(), &cfg)?;
    let mut text = String::new();
    for p in &plan.prompts {
        text.push_str(&p.text);
        text.push('\n');
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| parent.display().to_string())?;
    }
    fs::write(out, &text).with_context(|| out.display().to_string())?;
    println!(
        "{} of {} labels sampled, {} prompt(s){} -> {}",
        labels.len(),
        u.len(),
        plan.prompts.len(),
        if plan.fallback { " (fallback grouping)" } else { "" },
        out.display()
    );
    Ok(())
}

fn bucket_sizes(kind: ClassKind, d: &csegg::dataset::Dataset) -> Value {
    let b = bucketize(&class_frequencies(d, kind), BucketPolicy::default());
    json!({
        "head": b.members(Bucket::Head).len(),
        "body": b.members(Bucket::Body).len(),
        "tail": b.members(Bucket::Tail).len(),
    })
}

fn dataset_stats(dataset: &Path, scenario: Option<&Path>) -> Result<Value> {
    let (d, report) = load_dataset(dataset, FORMAT_VERSION)?;
    let edges: usize = d.graphs().map(|g| g.relations.len()).sum();
    let objects: usize = d.graphs().map(|g| g.objects.len()).sum();
    let mut out = json!({
        "graphs": d.len(),
        "splits": {
            "train": d.splits().ids(Split::Train).len(),
            "val": d.splits().ids(Split::Val).len(),
            "test": d.splits().ids(Split::Test).len(),
        },
        "object_classes": d.vocab.objects.len(),
        "predicate_classes": d.vocab.predicates.len(),
        "objects": objects,
        "relations": edges,
        "object_buckets": bucket_sizes(ClassKind::Objects, &d),
        "predicate_buckets": bucket_sizes(ClassKind::Predicates, &d),
        "repaired_graphs": report.repaired_graphs,
        "dropped_graphs": report.dropped_graphs.len(),
    });
    if let Some(path) = scenario {
        let s = ScenarioManifest::read(path)?.to_scenario(&d.vocab)?;
        let mut tasks = Vec::new();
        for t in &s.tasks {
            let td = mask_task(&d, &s, t.index, false)?;
            let count = |gs: &[csegg::graph::SceneGraph]| gs.iter().map(|g| g.relations.len()).sum::<usize>();
            tasks.push(json!({
                "task": t.index,
                "object_classes": t.objects.as_ref().map(|o| o.len()),
                "predicate_classes": t.predicates.len(),
                "train_graphs": td.train.len(),
                "train_relations": count(&td.train),
                "test_graphs": td.test.len(),
                "test_relations": count(&td.test),
            }));
        }
        out["scenario"] = json!({
            "kind": s.kind.to_string(),
            "tasks": tasks,
            "generalization_images": s.generalization_test.as_ref().map(|g| g.test_images.len()),
        });
    }
    Ok(out)
}
