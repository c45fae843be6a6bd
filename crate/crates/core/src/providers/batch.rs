use std::collections::BTreeMap;

use chrono::Utc;
use futures::stream::{self, StreamExt};
use thiserror::Error;

use super::{check_image, GenerationRecord, GenerationRequest, Provider, ProviderError};
use crate::prompt_forge::{ForgeError, SweepConfig};
use crate::store::{Event, RunStatus, Store, StoreError};

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("concurrency limit must be at least 1")]
    ZeroConcurrency,
    #[error(transparent)]
    Config(#[from] ForgeError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("run {run_id} was created from a different config")]
    ConfigMismatch { run_id: String },
    #[error("sweep aborted: {failed} of {total} requests failed (first error: {first})")]
    Aborted {
        failed: usize,
        total: usize,
        first: ProviderError,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailedEntry {
    pub prompt_index: usize,
    pub seed_index: usize,
    pub request: GenerationRequest,
    pub error: ProviderError,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchOutcome {
    /// One per successful `(prompt, seed)` pair, in `(prompt, seed)` order.
    pub records: Vec<GenerationRecord>,
    pub failures: Vec<FailedEntry>,
    /// Requests actually sent to the provider.
    pub new_calls: usize,
    /// Pairs served from the run manifest or the generation cache.
    pub cached: usize,
}

fn request_for(config: &SweepConfig, pi: usize, si: usize) -> GenerationRequest {
    GenerationRequest {
        prompt: config.prompts[pi].rendered.clone(),
        seed: config.seeds[si],
        steps: config.steps,
        width: config.width,
        height: config.height,
        guidance: config.guidance,
        provider_id: config.provider_id.clone(),
    }
}

async fn call(
    store: &Store,
    provider: &dyn Provider,
    request: &GenerationRequest,
) -> Result<GenerationRecord, ProviderError> {
    let out = provider.generate(request).await?;
    check_image(request, &out.png)?;
    let digest = store
        .put_image(&out.png)
        .map_err(|e| ProviderError::BadImage(e.to_string()))?;
    // cache before manifest: a crash between the two costs no extra call
    store
        .cache_generation(&request.cache_key(), &digest)
        .map_err(|e| ProviderError::BadImage(e.to_string()))?;
    Ok(GenerationRecord {
        request: request.clone(),
        image_digest: digest,
        created_at: Utc::now(),
        provider_meta: out.meta,
    })
}

/// Generate every `(prompt, seed)` pair of `config` into run `run_id`.
///
/// Pairs already recorded in the manifest or present in the generation
/// cache are not re-requested, so an interrupted sweep resumes where it
/// stopped. Failed pairs are logged and skipped; the run is marked failed
/// and the call errors only when more than half of the pairs fail.
pub async fn generate_batch(
    store: &Store,
    run_id: &str,
    config: &SweepConfig,
    provider: &dyn Provider,
    concurrency_limit: usize,
) -> Result<BatchOutcome, BatchError> {
    if concurrency_limit == 0 {
        return Err(BatchError::ZeroConcurrency);
    }
    config.validate()?;
    let state = store.replay(run_id)?;
    if state.config_digest != config.digest() {
        return Err(BatchError::ConfigMismatch {
            run_id: run_id.to_string(),
        });
    }
    let sealed = state.status == RunStatus::Complete;

    let mut done: BTreeMap<(usize, usize), GenerationRecord> = BTreeMap::new();
    let mut cached = 0usize;
    let mut from_manifest = 0usize;
    let mut todo = Vec::new();
    for pi in 0..config.prompts.len() {
        for si in 0..config.seeds.len() {
            if let Some(rec) = state.records.get(&(pi, si)) {
                done.insert((pi, si), rec.clone());
                cached += 1;
                from_manifest += 1;
                continue;
            }
            let request = request_for(config, pi, si);
            if let Some(digest) = store.cached_generation(&request.cache_key()) {
                let record = GenerationRecord {
                    request,
                    image_digest: digest,
                    created_at: Utc::now(),
                    provider_meta: BTreeMap::new(),
                };
                store.append_event(
                    run_id,
                    Event::Generation {
                        prompt_index: pi,
                        seed_index: si,
                        cached: true,
                        record: record.clone(),
                    },
                )?;
                done.insert((pi, si), record);
                cached += 1;
            } else {
                todo.push((pi, si, request));
            }
        }
    }

    let new_calls = todo.len();
    let mut results = stream::iter(todo)
        .map(|(pi, si, request)| async move {
            let res = call(store, provider, &request).await;
            (pi, si, request, res)
        })
        .buffer_unordered(concurrency_limit);

    let mut failures = Vec::new();
    while let Some((pi, si, request, res)) = results.next().await {
        match res {
            Ok(record) => {
                store.append_event(
                    run_id,
                    Event::Generation {
                        prompt_index: pi,
                        seed_index: si,
                        cached: false,
                        record: record.clone(),
                    },
                )?;
                done.insert((pi, si), record);
            }
            Err(error) => {
                log::warn!("generation failed for {:?} seed {}: {error}", request.prompt, request.seed);
                store.append_event(
                    run_id,
                    Event::GenerationFailed {
                        prompt_index: pi,
                        seed_index: si,
                        request: request.clone(),
                        error: error.to_string(),
                        retryable: error.is_retryable(),
                    },
                )?;
                failures.push(FailedEntry {
                    prompt_index: pi,
                    seed_index: si,
                    request,
                    error,
                });
            }
        }
    }
    failures.sort_by_key(|f| (f.prompt_index, f.seed_index));

    let total = config.request_count();
    if failures.len() * 2 > total {
        store.set_status(run_id, RunStatus::Failed)?;
        return Err(BatchError::Aborted {
            failed: failures.len(),
            total,
            first: failures[0].error.clone(),
        });
    }
    // nothing happened: keep a re-run from growing the manifest
    let noop = from_manifest == total && failures.is_empty();
    if !sealed && !noop {
        store.append_event(
            run_id,
            Event::SweepFinished {
                new_calls,
                cached,
                failed: failures.len(),
            },
        )?;
    }
    Ok(BatchOutcome {
        records: done.into_values().collect(),
        failures,
        new_calls,
        cached,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt_forge::{expand_grid, Collocation, Descriptor, DEFAULT_TEMPLATE};
    use crate::providers::StubProvider;
    use crate::store::RunKind;
    use async_trait::async_trait;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn config(n_prompts: usize, n_seeds: u64) -> SweepConfig {
        let descriptors: Vec<Descriptor> = ["Floral", "Galaxy", "red"][..n_prompts]
            .iter()
            .map(|d| Descriptor::new(d).unwrap())
            .collect();
        SweepConfig {
            run_label: "batch".into(),
            provider_id: "stub".into(),
            steps: 20,
            width: 32,
            height: 32,
            guidance: 7.5,
            seeds: (0..n_seeds).collect(),
            prompts: expand_grid(&descriptors, &[Collocation::new("Area Rug", "home").unwrap()], DEFAULT_TEMPLATE)
                .unwrap(),
        }
    }

    #[tokio::test]
    async fn ordered_and_cached_on_rerun() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cfg = config(2, 2);
        let id = store.create_run(&cfg, RunKind::Sweep, Utc::now()).unwrap();
        let p = StubProvider::default();
        let out = generate_batch(&store, &id, &cfg, &p, 3).await.unwrap();
        assert_eq!(out.records.len(), 4);
        assert_eq!(out.new_calls, 4);
        let order: Vec<(String, u64)> = out
            .records
            .iter()
            .map(|r| (r.request.prompt.clone(), r.request.seed))
            .collect();
        assert_eq!(
            order,
            vec![
                ("Floral Area Rug".into(), 0),
                ("Floral Area Rug".into(), 1),
                ("Galaxy Area Rug".into(), 0),
                ("Galaxy Area Rug".into(), 1)
            ]
        );
        let again = generate_batch(&store, &id, &cfg, &p, 3).await.unwrap();
        assert_eq!(again.new_calls, 0);
        assert_eq!(again.cached, 4);
        assert_eq!(p.calls(), 4);

        // a second run with the same requests is served from the cache
        let mut other = cfg.clone();
        other.run_label = "other".into();
        let id2 = store.create_run(&other, RunKind::Sweep, Utc::now()).unwrap();
        let third = generate_batch(&store, &id2, &other, &p, 1).await.unwrap();
        assert_eq!(third.new_calls, 0);
        assert_eq!(p.calls(), 4);
    }

    struct Flaky {
        inner: StubProvider,
        fail_every: usize,
        n: AtomicUsize,
    }

    #[async_trait]
    impl Provider for Flaky {
        fn id(&self) -> &str {
            "stub"
        }
        async fn generate(&self, r: &GenerationRequest) -> Result<super::super::GeneratedImage, ProviderError> {
            let k = self.n.fetch_add(1, Ordering::SeqCst);
            if k.is_multiple_of(self.fail_every) {
                return Err(ProviderError::InvalidRequest("flaky".into()));
            }
            self.inner.generate(r).await
        }
    }

    #[tokio::test]
    async fn failures_recorded_not_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cfg = config(3, 2);
        let id = store.create_run(&cfg, RunKind::Sweep, Utc::now()).unwrap();
        let p = Flaky {
            inner: StubProvider::default(),
            fail_every: 3,
            n: AtomicUsize::new(0),
        };
        let out = generate_batch(&store, &id, &cfg, &p, 1).await.unwrap();
        assert_eq!(out.failures.len(), 2);
        assert_eq!(out.records.len() + out.failures.len(), 6);
        let state = store.replay(&id).unwrap();
        assert_eq!(state.failures.len(), 2);
        assert_eq!(state.records.len(), 4);
    }

    #[tokio::test]
    async fn majority_failure_aborts() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cfg = config(2, 2);
        let id = store.create_run(&cfg, RunKind::Sweep, Utc::now()).unwrap();
        let p = Flaky {
            inner: StubProvider::default(),
            fail_every: 1,
            n: AtomicUsize::new(0),
        };
        let err = generate_batch(&store, &id, &cfg, &p, 2).await.unwrap_err();
        assert!(matches!(err, BatchError::Aborted { failed: 4, total: 4, .. }));
        assert_eq!(store.replay(&id).unwrap().status, RunStatus::Failed);
    }

    #[tokio::test]
    async fn zero_limit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path()).unwrap();
        let cfg = config(1, 1);
        let id = store.create_run(&cfg, RunKind::Sweep, Utc::now()).unwrap();
        let err = generate_batch(&store, &id, &cfg, &StubProvider::default(), 0).await;
        assert!(matches!(err, Err(BatchError::ZeroConcurrency)));
    }
}
