//! Stage orchestration over the store: sweep, corpus import, detection and
//! analysis. Every stage replays the run first and appends only what is new,
//! so re-running a stage is cheap and leaves the outputs byte-identical.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use chrono::{DateTime, Utc};
use futures::stream::{self, StreamExt, TryStreamExt};
use image::RgbImage;
use rayon::prelude::*;
use thiserror::Error;

use crate::analyze::{
    clique_dispersion, early_step_probe, leakage_scan, patch_match, sort_findings, source_match, to_jsonl,
    AnalyzeError, Allowlist, Finding, LeakCandidate, ProbeRequest, SourceImage, SourceQuery,
    DEFAULT_PATCH_GRID, DEFAULT_PATCH_THRESHOLD, DEFAULT_PERTURBATION_CUTOFF, DEFAULT_SOURCE_THRESHOLD,
};
use crate::detect::{
    build_graph, connected_components, form_groups, maximal_cliques, Clique, DetectError, DetectionReport,
    MemberInfo, SweepPoint, TemplateGroup, ThresholdSweepRow, DEFAULT_NODE_BUDGET, DEFAULT_THRESHOLD,
    REPORT_SWEEP_THRESHOLDS,
};
use crate::imaging::{self, ImagingError};
use crate::percept::{masked_embed, segment, ClassRegistry, Embedder, FillPolicy, Mask, MaskedEmbedding, PerceptError, Segmenter};
use crate::prompt_forge::{Collocation, Descriptor, ForgeError, PromptSpec, SweepConfig, DEFAULT_TEMPLATE};
use crate::providers::{generate_batch, BatchError, BatchOutcome, GenerationRecord, GenerationRequest, Provider};
use crate::store::{write_atomic, Event, RunKind, RunState, RunStatus, Store, StoreError};
use crate::synthcorpus::LabeledCorpus;

/// Provider id recorded for runs imported from a labeled corpus.
pub const CORPUS_PROVIDER: &str = "corpus";
const PERCEPT_CONCURRENCY: usize = 8;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Percept(#[from] PerceptError),
    #[error(transparent)]
    Detect(#[from] DetectError),
    #[error(transparent)]
    Analyze(#[from] AnalyzeError),
    #[error(transparent)]
    Forge(#[from] ForgeError),
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("run {0} has no detection; run detect first")]
    NoDetection(String),
    #[error("run {0} is complete and its stored result differs; refusing to append")]
    Sealed(String),
    #[error("corpus has no image for {0}")]
    MissingCorpusImage(String),
    #[error("cannot read source directory {path}: {message}")]
    SourceDir { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DetectMode {
    /// Exact maximal cliques.
    #[default]
    Cliques,
    /// Connected components, for comparison only.
    Components,
}

impl fmt::Display for DetectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Cliques => "cliques",
            Self::Components => "components",
        })
    }
}

impl FromStr for DetectMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "cliques" => Ok(Self::Cliques),
            "components" => Ok(Self::Components),
            other => Err(format!("unknown detect mode {other:?}; expected cliques or components")),
        }
    }
}

/// Segmentation and embedding backends plus masking knobs.
pub struct Perception<'a> {
    pub segmenter: &'a dyn Segmenter,
    pub embedder: &'a dyn Embedder,
    pub registry: ClassRegistry,
    pub fill: FillPolicy,
    /// Mask dilation radius in pixels.
    pub dilation: u32,
}

impl<'a> Perception<'a> {
    pub fn new(segmenter: &'a dyn Segmenter, embedder: &'a dyn Embedder) -> Self {
        Self {
            segmenter,
            embedder,
            registry: ClassRegistry::default(),
            fill: FillPolicy::Mean,
            dilation: 0,
        }
    }
}

/// One masked embedding, with the manifest events it produced.
struct Embedded {
    mask: Option<Mask>,
    vector: Vec<f64>,
    events: Vec<Event>,
}

impl Perception<'_> {
    async fn mask_for(
        &self,
        store: &Store,
        state: &RunState,
        digest: &str,
        image: &RgbImage,
        class: &str,
        events: &mut Vec<Event>,
    ) -> Result<Mask, PipelineError> {
        let seg_id = self.segmenter.id();
        let raw = match store.cached_mask(seg_id, digest, class) {
            Some(rle) => rle.decode()?,
            None => {
                let m = segment(self.segmenter, &self.registry, image, class).await?;
                store.cache_mask(seg_id, digest, &m.to_rle())?;
                m
            }
        };
        if !state.masks.contains_key(&(digest.to_string(), class.to_string())) {
            events.push(Event::Mask {
                image_digest: digest.to_string(),
                segmenter_id: seg_id.to_string(),
                mask: raw.to_rle(),
            });
        }
        Ok(if self.dilation > 0 { raw.dilate(self.dilation) } else { raw })
    }

    async fn embed(
        &self,
        store: &Store,
        state: &RunState,
        digest: &str,
        class: Option<&str>,
    ) -> Result<Embedded, PipelineError> {
        let image = store.get_rgb(digest)?;
        let mut events = Vec::new();
        let mask = match class {
            Some(c) => Some(self.mask_for(store, state, digest, &image, c, &mut events).await?),
            None => None,
        };
        let mask_digest = mask.as_ref().map_or_else(|| "none".to_string(), Mask::digest);
        let emb_id = self.embedder.id();
        let vector = match store.cached_embedding(emb_id, digest, &mask_digest) {
            Some(v) => v,
            None => {
                let e = masked_embed(self.embedder, &image, digest, mask.as_ref(), self.fill).await?;
                store.cache_embedding(emb_id, digest, &mask_digest, &e.vector)?;
                e.vector
            }
        };
        if !state.embeddings.contains_key(&(digest.to_string(), mask_digest.clone())) {
            events.push(Event::Embedding {
                image_digest: digest.to_string(),
                provider_id: emb_id.to_string(),
                mask_digest,
                vector_digest: imaging::vector_digest(&vector),
            });
        }
        Ok(Embedded { mask, vector, events })
    }

    /// Embeds `(digest, class)` jobs concurrently; results keep job order.
    async fn embed_all(
        &self,
        store: &Store,
        state: &RunState,
        jobs: Vec<(String, Option<String>)>,
    ) -> Result<(BTreeMap<(String, Option<String>), Embedded>, Vec<Event>), PipelineError> {
        let results: Vec<_> = stream::iter(jobs.into_iter().map(|(d, c)| async move {
            let e = self.embed(store, state, &d, c.as_deref()).await?;
            Ok::<_, PipelineError>(((d, c), e))
        }))
        .buffered(PERCEPT_CONCURRENCY)
        .try_collect()
        .await?;
        let mut events = Vec::new();
        let mut seen = BTreeSet::new();
        let mut out = BTreeMap::new();
        for (key, mut e) in results {
            for ev in e.events.drain(..) {
                let k = match &ev {
                    Event::Mask { image_digest, mask, .. } => format!("m\n{image_digest}\n{}", mask.class_label),
                    Event::Embedding { image_digest, mask_digest, .. } => format!("e\n{image_digest}\n{mask_digest}"),
                    _ => unreachable!("percept emits mask and embedding events only"),
                };
                if seen.insert(k) {
                    events.push(ev);
                }
            }
            out.insert(key, e);
        }
        Ok((out, events))
    }
}

/// Appends `events` unless the run is sealed, in which case there must be
/// nothing to append.
fn append_all(store: &Store, state: &RunState, events: Vec<Event>) -> Result<(), PipelineError> {
    if events.is_empty() {
        return Ok(());
    }
    if state.status == RunStatus::Complete {
        return Err(PipelineError::Sealed(state.run_id.clone()));
    }
    for e in events {
        store.append_event(&state.run_id, e)?;
    }
    Ok(())
}

// ---- sweep ----

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub run_id: String,
    /// An earlier run with the same config was resumed.
    pub resumed: bool,
    pub batch: BatchOutcome,
}

/// Generate `config` into a run, resuming the latest run with an identical
/// config when one exists.
pub async fn run_sweep(
    store: &Store,
    config: &SweepConfig,
    provider: &dyn Provider,
    concurrency_limit: usize,
    at: DateTime<Utc>,
) -> Result<SweepOutcome, PipelineError> {
    config.validate()?;
    let (run_id, resumed) = match store.find_run_by_config(&config.digest())? {
        Some(id) => (id, true),
        None => (store.create_run(config, RunKind::Sweep, at)?, false),
    };
    let batch = generate_batch(store, &run_id, config, provider, concurrency_limit).await?;
    Ok(SweepOutcome { run_id, resumed, batch })
}

// ---- corpus import ----

fn corpus_template(caption: &str, descriptor: &str, category: &str) -> String {
    let t = caption
        .replacen(category, "{collocation}", 1)
        .replacen(descriptor, "{descriptor}", 1);
    let ok = t.contains("{descriptor}")
        && t.contains("{collocation}")
        && t.replacen("{descriptor}", descriptor, 1).replacen("{collocation}", category, 1) == caption;
    if ok {
        t
    } else {
        DEFAULT_TEMPLATE.to_string()
    }
}

/// Import a labeled corpus as a run: one prompt per pair, seed 0. Planted
/// regions go to the store atlas for the stub segmenter. Importing the same
/// corpus again returns the existing run.
pub fn import_corpus(
    store: &Store,
    corpus: &LabeledCorpus,
    run_label: &str,
    at: DateTime<Utc>,
) -> Result<String, PipelineError> {
    let first = corpus
        .pairs
        .first()
        .ok_or_else(|| PipelineError::Forge(ForgeError::InvalidSweep("corpus has no pairs".into())))?;
    let first_img = corpus
        .images
        .get(&first.image_digest)
        .ok_or_else(|| PipelineError::MissingCorpusImage(first.image_digest.clone()))?;
    let mut prompts = Vec::with_capacity(corpus.pairs.len());
    for p in &corpus.pairs {
        let mut coll = Collocation::new(&p.category, "corpus")?;
        if let Some(c) = &p.segmentation_class {
            coll = coll.with_class(c);
        }
        let template = corpus_template(&p.caption, &p.descriptor, &p.category);
        prompts.push(PromptSpec::new(Descriptor::new(&p.descriptor)?, coll, &template)?);
    }
    let config = SweepConfig {
        run_label: run_label.to_string(),
        provider_id: CORPUS_PROVIDER.to_string(),
        steps: 1,
        width: first_img.width(),
        height: first_img.height(),
        guidance: 0.0,
        seeds: vec![0],
        prompts,
    };
    for region in &corpus.atlas {
        store.add_atlas_region(&region.base, &region.mask.to_rle())?;
    }
    if let Some(id) = store.find_run_by_config(&config.digest())? {
        return Ok(id);
    }
    let run_id = store.create_run(&config, RunKind::Corpus, at)?;
    for (pi, p) in corpus.pairs.iter().enumerate() {
        let img = corpus
            .images
            .get(&p.image_digest)
            .ok_or_else(|| PipelineError::MissingCorpusImage(p.image_digest.clone()))?;
        let digest = store.put_rgb(img)?;
        let record = GenerationRecord {
            request: GenerationRequest {
                prompt: config.prompts[pi].rendered.clone(),
                seed: 0,
                steps: config.steps,
                width: img.width(),
                height: img.height(),
                guidance: config.guidance,
                provider_id: CORPUS_PROVIDER.to_string(),
            },
            image_digest: digest,
            created_at: at,
            provider_meta: BTreeMap::new(),
        };
        store.append_event(
            &run_id,
            Event::Generation {
                prompt_index: pi,
                seed_index: 0,
                cached: false,
                record,
            },
        )?;
    }
    Ok(run_id)
}

// ---- detect ----

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOptions {
    pub threshold: f64,
    pub mode: DetectMode,
    pub node_budget: usize,
    /// Only these segmentation classes are masked; `None` masks every
    /// collocation that names a class.
    pub mask_classes: Option<BTreeSet<String>>,
}

impl Default for DetectOptions {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            mode: DetectMode::Cliques,
            node_budget: DEFAULT_NODE_BUDGET,
            mask_classes: None,
        }
    }
}

impl DetectOptions {
    fn class_for<'c>(&self, coll: &'c Collocation) -> Option<&'c str> {
        let class = coll.segmentation_class.as_deref()?;
        match &self.mask_classes {
            Some(set) if !set.contains(class) => None,
            _ => Some(class),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub report_path: std::path::PathBuf,
    pub report: DetectionReport,
    pub groups: Vec<TemplateGroup>,
    /// The stored detection already matched; nothing was appended.
    pub unchanged: bool,
}

fn registry_for(base: &ClassRegistry, state: &RunState) -> ClassRegistry {
    let mut reg = base.clone();
    // a labeled corpus defines its own classes
    if state.kind == RunKind::Corpus {
        for c in state.config.collocations() {
            if let Some(k) = &c.segmentation_class {
                reg.insert(k);
            }
        }
    }
    reg
}

fn cliques_of(graph_embs: &[MaskedEmbedding], threshold: f64, mode: DetectMode, budget: usize) -> Result<Vec<Clique>, DetectError> {
    let graph = build_graph(graph_embs, threshold)?;
    match mode {
        DetectMode::Cliques => maximal_cliques(&graph, budget),
        DetectMode::Components => Ok(connected_components(&graph)),
    }
}

fn as_embedding(digest: &str, vector: &[f64]) -> MaskedEmbedding {
    MaskedEmbedding {
        vector: vector.to_vec(),
        dim: vector.len(),
        provider_id: String::new(),
        image_digest: digest.to_string(),
        mask_digest: String::new(),
    }
}

/// Segment, mask, embed, build per-collocation graphs, enumerate cliques and
/// merge them into groups. Writes `report.json`.
pub async fn run_detect(
    store: &Store,
    percept: &Perception<'_>,
    run_id: &str,
    opts: &DetectOptions,
) -> Result<DetectOutcome, PipelineError> {
    if !(opts.threshold > 0.0 && opts.threshold <= 1.0) {
        return Err(DetectError::BadThreshold(opts.threshold).into());
    }
    let state = store.replay(run_id)?;
    let percept = Perception {
        segmenter: percept.segmenter,
        embedder: percept.embedder,
        registry: registry_for(&percept.registry, &state),
        fill: percept.fill,
        dilation: percept.dilation,
    };

    // collocation text -> unique digests in record order
    let mut partitions: BTreeMap<String, (Collocation, Vec<String>)> = BTreeMap::new();
    let mut collocation_of: BTreeMap<String, Collocation> = BTreeMap::new();
    let mut jobs = Vec::new();
    let mut job_seen = BTreeSet::new();
    for (&(pi, _), rec) in &state.records {
        let coll = &state.config.prompts[pi].collocation;
        let (_, part) = partitions
            .entry(coll.text.clone())
            .or_insert_with(|| (coll.clone(), Vec::new()));
        if !part.contains(&rec.image_digest) {
            part.push(rec.image_digest.clone());
        }
        collocation_of.entry(rec.image_digest.clone()).or_insert_with(|| coll.clone());
        let job = (rec.image_digest.clone(), opts.class_for(coll).map(String::from));
        if job_seen.insert(job.clone()) {
            jobs.push(job);
        }
    }
    let (embedded, events) = percept.embed_all(store, &state, jobs).await?;
    let vector_of = |digest: &str, coll: &Collocation| -> &Vec<f64> {
        &embedded[&(digest.to_string(), opts.class_for(coll).map(String::from))].vector
    };

    let part_embs: Vec<Vec<MaskedEmbedding>> = partitions
        .values()
        .map(|(coll, digests)| digests.iter().map(|d| as_embedding(d, vector_of(d, coll))).collect())
        .collect();
    let cliques: Vec<Clique> = part_embs
        .par_iter()
        .map(|embs| cliques_of(embs, opts.threshold, opts.mode, opts.node_budget))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .flatten()
        .collect();

    let mut members = BTreeMap::new();
    for c in &cliques {
        for m in &c.members {
            let coll = &collocation_of[m];
            members.entry(m.clone()).or_insert_with(|| MemberInfo {
                collocation: coll.clone(),
                embedding: vector_of(m, coll).clone(),
            });
        }
    }
    let groups = form_groups(run_id, &cliques, &members)?;

    let prompt_rows: Vec<(String, Vec<MaskedEmbedding>)> = {
        let mut by_prompt: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (&(pi, _), rec) in &state.records {
            let list = by_prompt.entry(pi).or_default();
            if !list.contains(&rec.image_digest) {
                list.push(rec.image_digest.clone());
            }
        }
        by_prompt
            .into_iter()
            .map(|(pi, ds)| {
                let p = &state.config.prompts[pi];
                let embs = ds.iter().map(|d| as_embedding(d, vector_of(d, &p.collocation))).collect();
                (p.rendered.clone(), embs)
            })
            .collect()
    };
    let threshold_sweep = prompt_rows
        .par_iter()
        .map(|(prompt, embs)| {
            let points = REPORT_SWEEP_THRESHOLDS
                .iter()
                .map(|&t| {
                    let graph = build_graph(embs, t)?;
                    let largest = maximal_cliques(&graph, opts.node_budget)?
                        .iter()
                        .map(|c| c.members.len())
                        .max()
                        .unwrap_or(0);
                    Ok(SweepPoint {
                        threshold: t,
                        edges: graph.edges.len(),
                        largest_clique: largest,
                    })
                })
                .collect::<Result<Vec<_>, DetectError>>()?;
            Ok(ThresholdSweepRow {
                prompt: prompt.clone(),
                images: embs.len(),
                points,
            })
        })
        .collect::<Result<Vec<_>, DetectError>>()?;

    let mut report = DetectionReport::new(run_id, opts.threshold, &opts.mode.to_string(), &groups);
    report.threshold_sweep = threshold_sweep;
    let report_digest = report.digest();
    let unchanged = state
        .detection
        .as_ref()
        .is_some_and(|d| d.report_digest == report_digest);

    let mut events = events;
    if !unchanged {
        events.push(Event::Detection {
            threshold: opts.threshold,
            mode: opts.mode.to_string(),
            report_digest,
            groups: groups.clone(),
        });
    }
    if unchanged && state.status == RunStatus::Complete {
        // sealed and identical: cache-only events are not needed
        events.clear();
    }
    append_all(store, &state, events)?;
    let report_path = store.report_path(run_id)?;
    write_atomic(&report_path, &report.to_bytes())?;
    Ok(DetectOutcome {
        report_path,
        report,
        groups,
        unchanged,
    })
}

// ---- analyze ----

pub struct ProbeOptions<'a> {
    pub provider: &'a dyn Provider,
    /// Seeds per prompt; the run's own seeds when empty.
    pub seeds: Vec<u64>,
}

pub struct AnalyzeOptions<'a> {
    pub allowlist: Allowlist,
    /// Defaults to the detection threshold.
    pub leak_threshold: Option<f64>,
    pub perturbation_cutoff: f64,
    pub sources: Option<&'a Path>,
    pub source_threshold: f64,
    pub patch_grid: (u32, u32),
    pub patch_threshold: f64,
    pub probe: Option<ProbeOptions<'a>>,
}

impl Default for AnalyzeOptions<'_> {
    fn default() -> Self {
        Self {
            allowlist: Allowlist::default(),
            leak_threshold: None,
            perturbation_cutoff: DEFAULT_PERTURBATION_CUTOFF,
            sources: None,
            source_threshold: DEFAULT_SOURCE_THRESHOLD,
            patch_grid: DEFAULT_PATCH_GRID,
            patch_threshold: DEFAULT_PATCH_THRESHOLD,
            probe: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeOutcome {
    pub findings_path: std::path::PathBuf,
    pub findings: Vec<Finding>,
    /// Findings not already recorded in the manifest.
    pub new: usize,
    pub warnings: Vec<String>,
}

/// Readable images of a source directory, sorted by file name, plus one
/// warning per unreadable file.
pub fn load_sources(dir: &Path) -> Result<(Vec<SourceImage>, Vec<String>), PipelineError> {
    let err = |e: std::io::Error| PipelineError::SourceDir {
        path: dir.display().to_string(),
        message: e.to_string(),
    };
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(err)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut images = Vec::new();
    let mut warnings = Vec::new();
    for p in paths {
        let id = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        match std::fs::read(&p).map_err(|e| e.to_string()).and_then(|b| imaging::decode(&b).map_err(|e| e.to_string())) {
            Ok(image) => images.push(SourceImage { id, image }),
            Err(e) => warnings.push(format!("skipping unreadable source {id}: {e}")),
        }
    }
    Ok((images, warnings))
}

/// Dispersion per group, leakage over every generation, and the optional
/// source and probe analyses. `findings.jsonl` holds this invocation's
/// findings in merge order; the manifest keeps every finding ever emitted.
pub async fn run_analyze(
    store: &Store,
    percept: &Perception<'_>,
    run_id: &str,
    opts: &AnalyzeOptions<'_>,
) -> Result<AnalyzeOutcome, PipelineError> {
    let state = store.replay(run_id)?;
    let det = state
        .detection
        .clone()
        .ok_or_else(|| PipelineError::NoDetection(run_id.to_string()))?;
    let percept = Perception {
        segmenter: percept.segmenter,
        embedder: percept.embedder,
        registry: registry_for(&percept.registry, &state),
        fill: percept.fill,
        dilation: percept.dilation,
    };
    let mut events = Vec::new();
    let mut warnings = Vec::new();
    let mut findings = Vec::new();

    // unique generations with their collocation, in record order
    let mut gens: Vec<(String, Collocation)> = Vec::new();
    let mut seen = BTreeSet::new();
    for (&(pi, _), rec) in &state.records {
        if seen.insert(rec.image_digest.clone()) {
            gens.push((rec.image_digest.clone(), state.config.prompts[pi].collocation.clone()));
        }
    }

    // dispersion
    let mut images: BTreeMap<String, RgbImage> = BTreeMap::new();
    let mut masks: BTreeMap<String, Mask> = BTreeMap::new();
    for g in &det.groups {
        for m in &g.members {
            if !images.contains_key(m) {
                images.insert(m.clone(), store.get_rgb(m)?);
            }
            if let Some(class) = &g.collocation.segmentation_class {
                if let Some(rle) = state.masks.get(&(m.clone(), class.clone())) {
                    let raw = rle.decode()?;
                    let mask = if percept.dilation > 0 { raw.dilate(percept.dilation) } else { raw };
                    masks.insert(m.clone(), mask);
                }
            }
        }
        findings.push(clique_dispersion(g, &images, &masks, det.threshold, opts.perturbation_cutoff)?);
    }

    // leakage: every generation against every foreign fingerprint, masked
    // with the editable region of the fingerprint's class
    let group_classes: Vec<(String, Option<String>)> = det
        .groups
        .iter()
        .map(|g| (g.collocation.text.to_lowercase(), g.collocation.segmentation_class.clone()))
        .collect();
    let mut jobs = Vec::new();
    let mut job_seen = BTreeSet::new();
    for (d, coll) in &gens {
        let own = coll.text.to_lowercase();
        let mut wanted: Vec<Option<String>> = vec![None];
        wanted.extend(group_classes.iter().filter(|(t, _)| *t != own).filter_map(|(_, c)| c.clone()).map(Some));
        for c in wanted {
            let job = (d.clone(), c);
            if job_seen.insert(job.clone()) {
                jobs.push(job);
            }
        }
    }
    let (embedded, ev) = percept.embed_all(store, &state, jobs).await?;
    events.extend(ev);
    let candidates: Vec<LeakCandidate> = gens
        .iter()
        .map(|(d, coll)| {
            let mut by_class = BTreeMap::new();
            for ((jd, jc), e) in embedded.range((d.clone(), None)..) {
                if jd != d {
                    break;
                }
                if let Some(c) = jc {
                    by_class.insert(c.clone(), e.vector.clone());
                }
            }
            LeakCandidate {
                digest: d.clone(),
                collocation: coll.text.clone(),
                unmasked: embedded[&(d.clone(), None)].vector.clone(),
                by_class,
            }
        })
        .collect();
    let leak_threshold = opts.leak_threshold.unwrap_or(det.threshold);
    findings.extend(leakage_scan(&det.groups, &candidates, &opts.allowlist, leak_threshold));

    // local source tracing
    if let Some(dir) = opts.sources {
        let (sources, warn) = load_sources(dir)?;
        warnings.extend(warn);
        if sources.is_empty() {
            return Err(AnalyzeError::EmptyCorpus.into());
        }
        let class_jobs: Vec<(String, Option<String>)> = gens
            .iter()
            .filter_map(|(d, c)| c.segmentation_class.clone().map(|k| (d.clone(), Some(k))))
            .collect();
        let (masked, ev) = percept.embed_all(store, &state, class_jobs).await?;
        events.extend(ev);
        let mut queries = Vec::with_capacity(gens.len());
        for (d, c) in &gens {
            let mask = c
                .segmentation_class
                .as_ref()
                .and_then(|k| masked.get(&(d.clone(), Some(k.clone()))))
                .and_then(|e| e.mask.clone())
                .filter(|m| !m.is_empty());
            let image = match images.get(d) {
                Some(i) => i.clone(),
                None => store.get_rgb(d)?,
            };
            queries.push(SourceQuery {
                digest: d.clone(),
                image,
                mask,
            });
        }
        findings.extend(source_match(&queries, &sources, percept.embedder, percept.fill, opts.source_threshold).await?);
        let pairs: Vec<(String, RgbImage)> = sources.into_iter().map(|s| (s.id, s.image)).collect();
        let patch: Vec<Vec<Finding>> = queries
            .par_iter()
            .map(|q| patch_match(&q.digest, &q.image, &pairs, opts.patch_grid, opts.patch_threshold))
            .collect::<Result<_, _>>()?;
        findings.extend(patch.into_iter().flatten());
    }

    if let Some(probe) = &opts.probe {
        let seeds = if probe.seeds.is_empty() {
            state.config.seeds.clone()
        } else {
            probe.seeds.clone()
        };
        let mut prompts = BTreeSet::new();
        for p in &state.config.prompts {
            if !prompts.insert(p.rendered.clone()) {
                continue;
            }
            let req = ProbeRequest {
                prompt: p.rendered.clone(),
                seeds: seeds.clone(),
                width: state.config.width,
                height: state.config.height,
                guidance: state.config.guidance,
                provider_id: probe.provider.id().to_string(),
            };
            findings.push(early_step_probe(&req, probe.provider).await?);
        }
    }

    sort_findings(&mut findings);
    findings.dedup();
    let new: Vec<Finding> = findings.iter().filter(|f| !state.findings.contains(f)).cloned().collect();
    let n_new = new.len();
    for w in &warnings {
        if !state.warnings.contains(w) {
            events.push(Event::Warning { message: w.clone() });
        }
    }
    events.extend(new.into_iter().map(|finding| Event::Finding { finding }));
    if n_new == 0 && state.status == RunStatus::Complete {
        events.clear();
    }
    append_all(store, &state, events)?;
    let findings_path = store.findings_path(run_id)?;
    write_atomic(&findings_path, &to_jsonl(&findings))?;
    Ok(AnalyzeOutcome {
        findings_path,
        findings,
        new: n_new,
        warnings,
    })
}

/// Mark a run complete; later stages may only reproduce stored results.
pub fn seal_run(store: &Store, run_id: &str) -> Result<(), PipelineError> {
    let state = store.replay(run_id)?;
    if state.status != RunStatus::Complete {
        store.set_status(run_id, RunStatus::Complete)?;
    }
    Ok(())
}
