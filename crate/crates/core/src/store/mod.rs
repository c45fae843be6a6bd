//! Content-addressed image store, provider caches and run manifests.
//!
//! Layout under the store root:
//!
//! ```text
//! objects/ab/cdef...            canonical PNG, named by SHA-256
//! runs/<run_id>/manifest.jsonl  append-only event log
//! runs/<run_id>/report.json     detection report
//! runs/<run_id>/findings.jsonl  analysis findings
//! cache/*.jsonl                 generation, mask and embedding caches
//! atlas.jsonl                   planted regions known to the stub segmenter
//! sweeps/<digest>.toml          generated sweep configs awaiting review
//! ```

mod ids;
mod manifest;

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use image::RgbImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{self, ImagingError};
use crate::percept::{KnownRegion, RleMask};
use crate::prompt_forge::SweepConfig;

pub use ids::{is_valid_run_id, run_id};
pub use manifest::{DetectionState, Event, FailedGeneration, ManifestLine, RunKind, RunState, RunStatus};

/// Environment variable naming the store root.
pub const STORE_DIR_ENV: &str = "TEMPLEAK_STORE_DIR";

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("object {0} not found")]
    NotFound(String),
    #[error("unknown run {0}")]
    UnknownRun(String),
    #[error("run {0} is complete; no further events may be appended")]
    RunComplete(String),
    #[error("run {0} already exists")]
    RunExists(String),
    #[error("manifest of run {run_id} is corrupt at sequence {seq}: {message}")]
    Corrupt { run_id: String, seq: u64, message: String },
    #[error(transparent)]
    Imaging(#[from] ImagingError),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Write to a sibling temp file, fsync, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let dir = path.parent().unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}-{:?}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("obj"),
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(bytes).map_err(io_err(&tmp))?;
        f.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}

#[derive(Serialize, Deserialize)]
struct GenCacheLine {
    key: String,
    digest: String,
}

#[derive(Serialize, Deserialize)]
struct EmbCacheLine {
    provider_id: String,
    image_digest: String,
    mask_digest: String,
    vector: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct MaskCacheLine {
    key: String,
    mask: RleMask,
}

#[derive(Serialize, Deserialize)]
struct AtlasLine {
    base_digest: String,
    mask: RleMask,
}

#[derive(Default)]
struct Caches {
    generations: HashMap<String, String>,
    embeddings: HashMap<(String, String, String), Vec<f64>>,
    masks: HashMap<String, RleMask>,
}

struct RunWriter {
    file: File,
    next_seq: u64,
    status: RunStatus,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub kind: RunKind,
    pub run_label: String,
    pub provider_id: String,
    pub config_digest: String,
    pub created_at: DateTime<Utc>,
    pub status: RunStatus,
    pub generations: usize,
    pub failures: usize,
    pub groups: usize,
    pub findings: usize,
}

pub struct Store {
    root: PathBuf,
    caches: Mutex<Caches>,
    writers: Mutex<HashMap<String, RunWriter>>,
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, StoreError> {
    let content = match fs::read_to_string(path) {
        Ok(c) => c,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(io_err(path)(e)),
    };
    // torn tail lines from an interrupted append are skipped
    Ok(content
        .lines()
        .filter_map(|l| serde_json::from_str(l).ok())
        .collect())
}

fn append_jsonl<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut line = serde_json::to_vec(value)?;
    line.push(b'\n');
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    f.write_all(&line).map_err(io_err(path))?;
    f.flush().map_err(io_err(path))
}

impl Store {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        for sub in ["objects", "runs", "cache", "sweeps"] {
            let p = root.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let mut caches = Caches::default();
        for l in read_jsonl::<GenCacheLine>(&root.join("cache/generations.jsonl"))? {
            caches.generations.insert(l.key, l.digest);
        }
        for l in read_jsonl::<EmbCacheLine>(&root.join("cache/embeddings.jsonl"))? {
            caches
                .embeddings
                .insert((l.provider_id, l.image_digest, l.mask_digest), l.vector);
        }
        for l in read_jsonl::<MaskCacheLine>(&root.join("cache/masks.jsonl"))? {
            caches.masks.insert(l.key, l.mask);
        }
        Ok(Self {
            root,
            caches: Mutex::new(caches),
            writers: Mutex::new(HashMap::new()),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn object_path(&self, digest: &str) -> Option<PathBuf> {
        if digest.len() != 64 || !digest.bytes().all(|b| b.is_ascii_hexdigit()) {
            return None;
        }
        Some(self.root.join("objects").join(&digest[..2]).join(&digest[2..]))
    }

    /// Store the canonical PNG re-encode of `bytes`; returns its digest.
    pub fn put_image(&self, bytes: &[u8]) -> Result<String, StoreError> {
        let canonical = imaging::canonicalize(bytes)?;
        self.put_canonical(canonical)
    }

    pub fn put_rgb(&self, img: &RgbImage) -> Result<String, StoreError> {
        self.put_canonical(imaging::encode_png(img)?)
    }

    fn put_canonical(&self, canonical: Vec<u8>) -> Result<String, StoreError> {
        let digest = imaging::sha256_hex(&canonical);
        let path = self.object_path(&digest).expect("sha256 hex");
        if !path.exists() {
            write_atomic(&path, &canonical)?;
        }
        Ok(digest)
    }

    pub fn has_image(&self, digest: &str) -> bool {
        self.object_path(digest).is_some_and(|p| p.exists())
    }

    pub fn get_image(&self, digest: &str) -> Result<Vec<u8>, StoreError> {
        let path = self
            .object_path(digest)
            .ok_or_else(|| StoreError::NotFound(digest.to_string()))?;
        fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::NotFound(digest.to_string()),
            _ => io_err(&path)(e),
        })
    }

    pub fn get_rgb(&self, digest: &str) -> Result<RgbImage, StoreError> {
        Ok(imaging::decode(&self.get_image(digest)?)?)
    }

    pub fn cached_generation(&self, key: &str) -> Option<String> {
        let c = self.caches.lock().expect("cache lock");
        c.generations
            .get(key)
            .filter(|d| self.has_image(d))
            .cloned()
    }

    pub fn cache_generation(&self, key: &str, digest: &str) -> Result<(), StoreError> {
        let mut c = self.caches.lock().expect("cache lock");
        if c.generations.get(key).map(String::as_str) == Some(digest) {
            return Ok(());
        }
        append_jsonl(
            &self.root.join("cache/generations.jsonl"),
            &GenCacheLine {
                key: key.into(),
                digest: digest.into(),
            },
        )?;
        c.generations.insert(key.into(), digest.into());
        Ok(())
    }

    pub fn cached_embedding(&self, provider_id: &str, image_digest: &str, mask_digest: &str) -> Option<Vec<f64>> {
        let c = self.caches.lock().expect("cache lock");
        c.embeddings
            .get(&(provider_id.into(), image_digest.into(), mask_digest.into()))
            .cloned()
    }

    pub fn cache_embedding(
        &self,
        provider_id: &str,
        image_digest: &str,
        mask_digest: &str,
        vector: &[f64],
    ) -> Result<(), StoreError> {
        let mut c = self.caches.lock().expect("cache lock");
        let key = (provider_id.to_string(), image_digest.to_string(), mask_digest.to_string());
        if c.embeddings.contains_key(&key) {
            return Ok(());
        }
        append_jsonl(
            &self.root.join("cache/embeddings.jsonl"),
            &EmbCacheLine {
                provider_id: key.0.clone(),
                image_digest: key.1.clone(),
                mask_digest: key.2.clone(),
                vector: vector.to_vec(),
            },
        )?;
        c.embeddings.insert(key, vector.to_vec());
        Ok(())
    }

    fn mask_key(segmenter_id: &str, image_digest: &str, class_label: &str) -> String {
        format!("{segmenter_id}\u{1f}{image_digest}\u{1f}{class_label}")
    }

    pub fn cached_mask(&self, segmenter_id: &str, image_digest: &str, class_label: &str) -> Option<RleMask> {
        let c = self.caches.lock().expect("cache lock");
        c.masks
            .get(&Self::mask_key(segmenter_id, image_digest, class_label))
            .cloned()
    }

    pub fn cache_mask(&self, segmenter_id: &str, image_digest: &str, mask: &RleMask) -> Result<(), StoreError> {
        let key = Self::mask_key(segmenter_id, image_digest, &mask.class_label);
        let mut c = self.caches.lock().expect("cache lock");
        if c.masks.contains_key(&key) {
            return Ok(());
        }
        append_jsonl(
            &self.root.join("cache/masks.jsonl"),
            &MaskCacheLine {
                key: key.clone(),
                mask: mask.clone(),
            },
        )?;
        c.masks.insert(key, mask.clone());
        Ok(())
    }

    /// Register a planted template for the stub segmenter. Idempotent.
    pub fn add_atlas_region(&self, base: &RgbImage, mask: &RleMask) -> Result<(), StoreError> {
        let base_digest = self.put_rgb(base)?;
        let path = self.root.join("atlas.jsonl");
        let existing: Vec<AtlasLine> = read_jsonl(&path)?;
        if existing
            .iter()
            .any(|l| l.base_digest == base_digest && &l.mask == mask)
        {
            return Ok(());
        }
        append_jsonl(
            &path,
            &AtlasLine {
                base_digest,
                mask: mask.clone(),
            },
        )
    }

    pub fn load_atlas(&self) -> Result<Vec<KnownRegion>, StoreError> {
        let mut out = Vec::new();
        for l in read_jsonl::<AtlasLine>(&self.root.join("atlas.jsonl"))? {
            let mask = l.mask.decode().map_err(|e| StoreError::Corrupt {
                run_id: "atlas".into(),
                seq: 0,
                message: e.to_string(),
            })?;
            out.push(KnownRegion {
                base: self.get_rgb(&l.base_digest)?,
                mask,
            });
        }
        Ok(out)
    }

    // ---- runs ----

    pub fn run_dir(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        if !is_valid_run_id(run_id) {
            return Err(StoreError::UnknownRun(run_id.to_string()));
        }
        Ok(self.root.join("runs").join(run_id))
    }

    fn manifest_path(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.run_dir(run_id)?.join("manifest.jsonl"))
    }

    pub fn run_exists(&self, run_id: &str) -> bool {
        self.manifest_path(run_id).is_ok_and(|p| p.exists())
    }

    pub fn create_run(&self, config: &SweepConfig, kind: RunKind, at: DateTime<Utc>) -> Result<String, StoreError> {
        let config_digest = config.digest();
        let entropy = hex::decode(&config_digest).expect("hex digest");
        let id = run_id(at, &entropy);
        let path = self.manifest_path(&id)?;
        if path.exists() {
            return Err(StoreError::RunExists(id));
        }
        let dir = path.parent().expect("run dir");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let file = OpenOptions::new()
            .create_new(true)
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?;
        self.writers.lock().expect("writer lock").insert(
            id.clone(),
            RunWriter {
                file,
                next_seq: 1,
                status: RunStatus::Running,
            },
        );
        self.append_at(
            &id,
            Event::RunCreated {
                run_id: id.clone(),
                kind,
                config_digest,
                config: config.clone(),
            },
            at,
        )?;
        Ok(id)
    }

    /// Most recent run created from an identical config.
    pub fn find_run_by_config(&self, config_digest: &str) -> Result<Option<String>, StoreError> {
        let mut hits = Vec::new();
        for id in self.run_ids()? {
            let content = fs::read(self.manifest_path(&id)?).unwrap_or_default();
            let first = content.split(|&b| b == b'\n').next().unwrap_or_default();
            if let Ok(line) = serde_json::from_slice::<ManifestLine>(first) {
                if let Event::RunCreated { config_digest: d, .. } = line.event {
                    if d == config_digest {
                        hits.push(id);
                    }
                }
            }
        }
        Ok(hits.pop())
    }

    /// Run ids in creation order.
    pub fn run_ids(&self) -> Result<Vec<String>, StoreError> {
        let dir = self.root.join("runs");
        let mut ids: Vec<String> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().into_string().ok())
            .filter(|n| is_valid_run_id(n))
            .filter(|n| self.run_exists(n))
            .collect();
        ids.sort();
        Ok(ids)
    }

    fn open_writer<'a>(
        &self,
        writers: &'a mut HashMap<String, RunWriter>,
        run_id: &str,
    ) -> Result<&'a mut RunWriter, StoreError> {
        if !writers.contains_key(run_id) {
            let path = self.manifest_path(run_id)?;
            if !path.exists() {
                return Err(StoreError::UnknownRun(run_id.to_string()));
            }
            let content = fs::read(&path).map_err(io_err(&path))?;
            let scan = manifest::scan(run_id, &content)?;
            let state = manifest::replay_lines(run_id, &scan.lines)?;
            let file = OpenOptions::new()
                .write(true)
                .open(&path)
                .map_err(io_err(&path))?;
            if scan.valid_len < content.len() as u64 {
                log::warn!(
                    "run {run_id}: dropping {} bytes of torn manifest tail",
                    content.len() as u64 - scan.valid_len
                );
                file.set_len(scan.valid_len).map_err(io_err(&path))?;
                file.sync_all().map_err(io_err(&path))?;
            }
            let file = OpenOptions::new()
                .append(true)
                .open(&path)
                .map_err(io_err(&path))?;
            writers.insert(
                run_id.to_string(),
                RunWriter {
                    file,
                    next_seq: state.last_seq + 1,
                    status: state.status,
                },
            );
        }
        Ok(writers.get_mut(run_id).expect("inserted"))
    }

    /// Durably append `event`; returns its sequence number.
    pub fn append_event(&self, run_id: &str, event: Event) -> Result<u64, StoreError> {
        self.append_at(run_id, event, Utc::now())
    }

    fn append_at(&self, run_id: &str, event: Event, at: DateTime<Utc>) -> Result<u64, StoreError> {
        let mut writers = self.writers.lock().expect("writer lock");
        let w = self.open_writer(&mut writers, run_id)?;
        if w.status == RunStatus::Complete {
            return Err(StoreError::RunComplete(run_id.to_string()));
        }
        let seq = w.next_seq;
        let status_change = match &event {
            Event::Status { status } => Some(*status),
            _ => None,
        };
        let line = ManifestLine { v: 1, seq, at, event };
        let mut bytes = serde_json::to_vec(&line)?;
        bytes.push(b'\n');
        let path = self.manifest_path(run_id)?;
        w.file.write_all(&bytes).map_err(io_err(&path))?;
        w.file.flush().map_err(io_err(&path))?;
        w.file.sync_data().map_err(io_err(&path))?;
        w.next_seq += 1;
        if let Some(s) = status_change {
            w.status = s;
        }
        Ok(seq)
    }

    pub fn set_status(&self, run_id: &str, status: RunStatus) -> Result<u64, StoreError> {
        self.append_event(run_id, Event::Status { status })
    }

    /// Rebuild run state from its manifest. A torn final record is ignored.
    pub fn replay(&self, run_id: &str) -> Result<RunState, StoreError> {
        let path = self.manifest_path(run_id)?;
        let content = match fs::read(&path) {
            Ok(c) => c,
            Err(e) if e.kind() == io::ErrorKind::NotFound => {
                return Err(StoreError::UnknownRun(run_id.to_string()))
            }
            Err(e) => return Err(io_err(&path)(e)),
        };
        let scan = manifest::scan(run_id, &content)?;
        manifest::replay_lines(run_id, &scan.lines)
    }

    pub fn manifest_lines(&self, run_id: &str) -> Result<Vec<ManifestLine>, StoreError> {
        let path = self.manifest_path(run_id)?;
        let content = fs::read(&path).map_err(|e| match e.kind() {
            io::ErrorKind::NotFound => StoreError::UnknownRun(run_id.to_string()),
            _ => io_err(&path)(e),
        })?;
        Ok(manifest::scan(run_id, &content)?.lines)
    }

    pub fn summarize(&self, state: &RunState) -> RunSummary {
        RunSummary {
            run_id: state.run_id.clone(),
            kind: state.kind,
            run_label: state.config.run_label.clone(),
            provider_id: state.config.provider_id.clone(),
            config_digest: state.config_digest.clone(),
            created_at: state.created_at,
            status: state.status,
            generations: state.records.len(),
            failures: state.failures.len(),
            groups: state.detection.as_ref().map_or(0, |d| d.groups.len()),
            findings: state.findings.len(),
        }
    }

    pub fn report_path(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.run_dir(run_id)?.join("report.json"))
    }

    pub fn findings_path(&self, run_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.run_dir(run_id)?.join("findings.jsonl"))
    }

    /// Persist a generated sweep config for review; returns its path.
    pub fn save_sweep(&self, config: &SweepConfig) -> Result<PathBuf, StoreError> {
        let path = self
            .root
            .join("sweeps")
            .join(format!("{}.toml", &config.digest()[..16]));
        let text = toml::to_string_pretty(config).map_err(|e| StoreError::Corrupt {
            run_id: "sweep".into(),
            seq: 0,
            message: e.to_string(),
        })?;
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

/// Group ids of every run, for lookups by group.
pub fn group_index(store: &Store) -> Result<BTreeMap<String, String>, StoreError> {
    let mut out = BTreeMap::new();
    for id in store.run_ids()? {
        if let Ok(state) = store.replay(&id) {
            if let Some(det) = &state.detection {
                for g in &det.groups {
                    out.insert(g.group_id.clone(), id.clone());
                }
            }
        }
    }
    Ok(out)
}
