use std::collections::BTreeSet;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use chrono::{DateTime, Utc};
use clap::{Args, Parser, Subcommand};

use templeak_core::analyze::Allowlist;
use templeak_core::config::{load_sweep, load_synth, LoadedSweep};
use templeak_core::percept::{ClassRegistry, Embedder, HttpEmbedder, HttpSegmenter, Segmenter, StubExtractor, StubSegmenter};
use templeak_core::pipeline::{
    import_corpus, run_analyze, run_detect, run_sweep, seal_run, AnalyzeOptions, DetectMode, DetectOptions, Perception,
    PipelineError, ProbeOptions,
};
use templeak_core::providers::{BatchError, HttpProvider, Provider, ProviderError, StubProvider};
use templeak_core::store::{Store, STORE_DIR_ENV};
use templeak_core::synthcorpus::{build_corpus, plant_benchmark, BenchmarkParams};
use templeak_core::transport::{HttpEndpoint, PROVIDER_TOKEN_ENV};
use templeak_core::verify::{run_verify, Mutant, VerifyOptions};

/// RFC 3339 timestamp pinned as "now", for byte-reproducible runs.
const CLOCK_ENV: &str = "TEMPLEAK_CLOCK";

#[derive(Parser)]
#[command(name = "templeak", version, about = "Template-memorization auditing for text-to-image endpoints")]
struct Cli {
    /// Store directory.
    #[arg(long, global = true, env = STORE_DIR_ENV, default_value = ".templeak")]
    store: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a sweep and print its run id.
    Sweep(SweepArgs),
    /// Mask, embed and cluster a run; prints the report path.
    Detect(DetectArgs),
    /// Classify detected groups; prints the findings path.
    Analyze(AnalyzeArgs),
    /// Build a labeled corpus and print its manifest path.
    Synth(SynthArgs),
    /// Run the built-in oracle suites.
    Verify(VerifyArgs),
    /// Serve the triage API.
    Serve(ServeArgs),
    /// Mark a run complete; later changes to its results are refused.
    Seal { run_id: String },
    /// Print a run summary rebuilt from its manifest.
    Replay { run_id: String },
    /// List runs in the store.
    Runs,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    /// `stub` or a provider base URL.
    #[arg(long, default_value = "stub")]
    provider: String,
    #[arg(long, default_value_t = 4)]
    concurrency: usize,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120)]
    timeout: u64,
}

#[derive(Args)]
struct PerceptArgs {
    /// `stub` or a segmentation service base URL.
    #[arg(long, default_value = "stub")]
    segmenter: String,
    /// `stub` or an embedding service base URL.
    #[arg(long, default_value = "stub")]
    embedder: String,
    /// Mask dilation radius in pixels.
    #[arg(long, default_value_t = 0)]
    dilation: u32,
}

#[derive(Args)]
struct DetectArgs {
    run_id: String,
    #[arg(long, default_value_t = templeak_core::detect::DEFAULT_THRESHOLD)]
    threshold: f64,
    /// Comma-separated classes to mask; others are embedded unmasked.
    #[arg(long, value_delimiter = ',')]
    mask_classes: Option<Vec<String>>,
    #[arg(long, default_value = "cliques")]
    mode: DetectMode,
    #[command(flatten)]
    percept: PerceptArgs,
}

#[derive(Args)]
struct AnalyzeArgs {
    run_id: String,
    /// `A=B`: collocations A and B may share templates. Repeatable.
    #[arg(long = "leak-allowlist", value_parser = parse_allow)]
    leak_allowlist: Vec<(String, String)>,
    #[arg(long)]
    leak_threshold: Option<f64>,
    /// Directory of candidate training images.
    #[arg(long)]
    sources: Option<PathBuf>,
    /// Run the early-step probe against the provider.
    #[arg(long)]
    probe: bool,
    /// Provider for the probe: `stub` or a base URL.
    #[arg(long, default_value = "stub")]
    provider: String,
    /// Sweep config whose stub plants the probe provider should reproduce.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 120)]
    timeout: u64,
    #[command(flatten)]
    percept: PerceptArgs,
}

#[derive(Args)]
struct SynthArgs {
    /// Corpus spec (TOML).
    spec: Option<PathBuf>,
    /// Benchmark preset `GxM+N[~L]` instead of a spec.
    #[arg(long, conflicts_with = "spec")]
    plant: Option<String>,
    /// Image side for `--plant`.
    #[arg(long)]
    size: Option<u32>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Export directory.
    #[arg(long)]
    out: PathBuf,
    /// Also import the corpus into the store under this label and print the
    /// run id.
    #[arg(long)]
    import: Option<String>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    quick: bool,
    /// Inject a known defect; the suite must then fail.
    #[arg(long)]
    mutant: Option<Mutant>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Origin of the triage UI, for CORS. Any origin when unset.
    #[arg(long)]
    ui_origin: Option<String>,
    #[arg(long, env = templeak_svc::TOKEN_ENV, hide_env_values = true)]
    token: Option<String>,
}

fn parse_allow(s: &str) -> Result<(String, String), String> {
    Allowlist::parse_pair(s).ok_or_else(|| format!("expected A=B, got {s:?}"))
}

/// Error carrying its process exit code.
#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Self { code: 2, error: e.into() }
    }
}

fn invariant(msg: String) -> Failure {
    Failure {
        code: 1,
        error: anyhow!(msg),
    }
}

fn now() -> anyhow::Result<DateTime<Utc>> {
    match std::env::var(CLOCK_ENV) {
        Ok(s) if !s.is_empty() => Ok(DateTime::parse_from_rfc3339(&s)
            .with_context(|| format!("{CLOCK_ENV}={s:?}"))?
            .with_timezone(&Utc)),
        _ => Ok(Utc::now()),
    }
}

fn endpoint(url: &str, timeout: u64) -> anyhow::Result<HttpEndpoint> {
    let token = std::env::var(PROVIDER_TOKEN_ENV).ok().filter(|t| !t.is_empty());
    Ok(HttpEndpoint::new(url, Duration::from_secs(timeout))?.with_token(token))
}

fn stub_for(loaded: &LoadedSweep) -> StubProvider {
    let (w, h) = (loaded.config.width, loaded.config.height);
    StubProvider::new(&loaded.config.provider_id)
        .with_plants(loaded.plants.iter().map(|p| p.stub_plant(w, h)).collect())
        .with_sharp_early(loaded.sharp_early.iter().cloned())
}

fn provider_for(kind: &str, id: &str, loaded: Option<&LoadedSweep>, timeout: u64) -> anyhow::Result<Box<dyn Provider>> {
    Ok(match (kind, loaded) {
        ("stub", Some(l)) => Box::new(stub_for(l)),
        ("stub", None) => Box::new(StubProvider::new(id)),
        (url, _) => Box::new(HttpProvider::new(id, endpoint(url, timeout)?)),
    })
}

struct Backends {
    segmenter: Box<dyn Segmenter>,
    embedder: Box<dyn Embedder>,
}

impl Backends {
    fn new(store: &Store, args: &PerceptArgs) -> anyhow::Result<Self> {
        let segmenter: Box<dyn Segmenter> = match args.segmenter.as_str() {
            "stub" => Box::new(StubSegmenter::new(store.load_atlas()?)),
            url => Box::new(HttpSegmenter::new(url, endpoint(url, 120)?)),
        };
        let embedder: Box<dyn Embedder> = match args.embedder.as_str() {
            "stub" => Box::new(StubExtractor),
            url => Box::new(HttpEmbedder::new(url, endpoint(url, 120)?)),
        };
        Ok(Self { segmenter, embedder })
    }

    fn perception(&self, dilation: u32) -> Perception<'_> {
        let mut p = Perception::new(self.segmenter.as_ref(), self.embedder.as_ref());
        p.dilation = dilation;
        p
    }
}

async fn cmd_sweep(store: &Store, args: SweepArgs) -> Result<(), Failure> {
    let loaded = load_sweep(&args.config, &ClassRegistry::default())?;
    let (w, h) = (loaded.config.width, loaded.config.height);
    for p in &loaded.plants {
        let r = p.region(w, h);
        store.add_atlas_region(&r.base, &r.mask.to_rle())?;
    }
    let provider = provider_for(&args.provider, &loaded.config.provider_id, Some(&loaded), args.timeout)?;
    let out = match run_sweep(store, &loaded.config, provider.as_ref(), args.concurrency, now()?).await {
        Ok(o) => o,
        Err(PipelineError::Batch(BatchError::Aborted { failed, total, first })) => {
            let hint = match &first {
                ProviderError::Transport(t) if t.is_unreachable() => " (provider unreachable)",
                _ => "",
            };
            return Err(anyhow!("sweep aborted{hint}: {failed} of {total} requests failed; first error: {first}").into());
        }
        Err(e) => return Err(e.into()),
    };
    println!("{}", out.run_id);
    let b = &out.batch;
    if b.new_calls == 0 {
        eprintln!("0 new generations (cached)");
    } else {
        eprintln!("{} new generations, {} cached", b.new_calls - b.failures.len(), b.cached);
    }
    if !b.failures.is_empty() {
        for f in &b.failures {
            eprintln!("failed: prompt {} seed {}: {}", f.prompt_index, f.request.seed, f.error);
        }
        return Err(anyhow!("{} of {} generations failed", b.failures.len(), b.records.len() + b.failures.len()).into());
    }
    Ok(())
}

async fn cmd_detect(store: &Store, args: DetectArgs) -> Result<(), Failure> {
    let backends = Backends::new(store, &args.percept)?;
    let opts = DetectOptions {
        threshold: args.threshold,
        mode: args.mode,
        mask_classes: args.mask_classes.map(|v| v.into_iter().collect::<BTreeSet<_>>()),
        ..DetectOptions::default()
    };
    let out = run_detect(store, &backends.perception(args.percept.dilation), &args.run_id, &opts).await?;
    println!("{}", out.report_path.display());
    eprintln!(
        "{} groups at threshold {}{}",
        out.groups.len(),
        args.threshold,
        if out.unchanged { " (unchanged)" } else { "" }
    );
    Ok(())
}

async fn cmd_analyze(store: &Store, args: AnalyzeArgs) -> Result<(), Failure> {
    let backends = Backends::new(store, &args.percept)?;
    let loaded = match &args.config {
        Some(p) => Some(load_sweep(p, &ClassRegistry::default())?),
        None => None,
    };
    let provider = if args.probe {
        let id = store.replay(&args.run_id)?.config.provider_id;
        Some(provider_for(&args.provider, &id, loaded.as_ref(), args.timeout)?)
    } else {
        None
    };
    let opts = AnalyzeOptions {
        allowlist: args.leak_allowlist.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect(),
        leak_threshold: args.leak_threshold,
        sources: args.sources.as_deref(),
        probe: provider.as_deref().map(|p| ProbeOptions {
            provider: p,
            seeds: Vec::new(),
        }),
        ..AnalyzeOptions::default()
    };
    let out = run_analyze(store, &backends.perception(args.percept.dilation), &args.run_id, &opts).await?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    println!("{}", out.findings_path.display());
    let mut counts = std::collections::BTreeMap::new();
    for f in &out.findings {
        *counts.entry(format!("{:?}", f.kind).to_lowercase()).or_insert(0usize) += 1;
    }
    let parts: Vec<String> = counts.iter().map(|(k, n)| format!("{n} {k}")).collect();
    eprintln!(
        "{} findings ({}), {} new",
        out.findings.len(),
        if parts.is_empty() { "none".to_string() } else { parts.join(", ") },
        out.new
    );
    Ok(())
}

fn cmd_synth(store: &Store, args: SynthArgs) -> Result<(), Failure> {
    let corpus = match (&args.spec, &args.plant) {
        (Some(spec), None) => build_corpus(&load_synth(spec)?)?,
        (None, Some(preset)) => {
            let mut p = BenchmarkParams::parse(preset)?;
            if let Some(s) = args.size {
                p.width = s;
                p.height = s;
            }
            p.seed = args.seed;
            plant_benchmark(&p)?
        }
        _ => return Err(anyhow!("give a spec file or --plant").into()),
    };
    let manifest = corpus.export(&args.out)?;
    println!("{}", manifest.display());
    eprintln!("{} pairs, {} truth groups", corpus.pairs.len(), corpus.truth_groups().len());
    if let Some(label) = &args.import {
        println!("{}", import_corpus(store, &corpus, label, now()?)?);
    }
    Ok(())
}

async fn cmd_verify(args: VerifyArgs) -> Result<(), Failure> {
    let report = run_verify(VerifyOptions {
        quick: args.quick,
        mutant: args.mutant,
    })
    .await;
    for c in &report.checks {
        println!(
            "{} {:<22} {:.2?}  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.elapsed,
            c.detail
        );
    }
    if report.passed() {
        return Ok(());
    }
    let broken: Vec<String> = report.failures().map(|c| format!("{} ({})", c.invariant, c.name)).collect();
    Err(invariant(format!("invariant violated: {}", broken.join("; "))))
}

fn open_store(path: &Path) -> anyhow::Result<Store> {
    Store::open(path).with_context(|| format!("opening store {}", path.display()))
}

async fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Verify(a) => cmd_verify(a).await,
        Cmd::Sweep(a) => cmd_sweep(&open_store(&cli.store)?, a).await,
        Cmd::Detect(a) => cmd_detect(&open_store(&cli.store)?, a).await,
        Cmd::Analyze(a) => cmd_analyze(&open_store(&cli.store)?, a).await,
        Cmd::Synth(a) => cmd_synth(&open_store(&cli.store)?, a),
        Cmd::Serve(a) => {
            let cfg = templeak_svc::ServiceConfig {
                token: a.token.filter(|t| !t.is_empty()),
                ui_origin: a.ui_origin,
                clock: std::env::var(CLOCK_ENV).ok().filter(|s| !s.is_empty()).map(|_| now()).transpose()?,
            };
            templeak_svc::serve(open_store(&cli.store)?, cfg, a.addr).await?;
            Ok(())
        }
        Cmd::Seal { run_id } => {
            seal_run(&open_store(&cli.store)?, &run_id)?;
            eprintln!("sealed {run_id}");
            Ok(())
        }
        Cmd::Replay { run_id } => {
            let store = open_store(&cli.store)?;
            let state = store.replay(&run_id)?;
            println!("{}", serde_json::to_string_pretty(&store.summarize(&state))?);
            Ok(())
        }
        Cmd::Runs => {
            let store = open_store(&cli.store)?;
            for id in store.run_ids()? {
                match store.replay(&id) {
                    Ok(s) => {
                        let sum = store.summarize(&s);
                        println!(
                            "{}\t{:?}\t{}\t{} generations\t{} groups\t{} findings",
                            sum.run_id, sum.status, sum.run_label, sum.generations, sum.groups, sum.findings
                        );
                    }
                    Err(e) => println!("{id}\tunreadable: {e}"),
                }
            }
            Ok(())
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
