use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{BackendSettings, PoolSettings, RelevanceSettings, RunConfig, TauSetting};
use super::dataset::Sample;
use super::report::{build_report, RunReport};
use super::HarnessError;
use crate::backend::{ChatCompletionsBackend, ChatEndpointConfig, GenerationBackend};
use crate::gating::InsertionPolicy;
use crate::metrics::{reduction_ratio, TokenLedger};
use crate::mocks::{BackendScript, ScoreEntry, ScriptedBackend, ScriptedChatEndpoint, ScriptedScorer};
use crate::objectpool::{
    filter_candidates, image_dimensions, load_manifest, request_segmentation, HttpSegmentationProvider,
    ImageDimensions, ObjectPool,
};
use crate::orchestrator::{run_trace, Providers, ReasoningTrace};
use crate::relevance::{EmbeddingRelevance, HttpEmbeddingClient, RelevanceProvider};
use crate::tracestore::{self, DocumentKind, StoredDocument};
use crate::transport::{Cassette, RecordingTransport, ReplayTransport, ReqwestTransport, RetryPolicy, Transport};

pub const API_KEY_ENV: &str = "ICOT_API_KEY";

/// Per-sample backend scripts.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScriptBook {
    pub samples: BTreeMap<String, BackendScript>,
}

/// Per-sample relevance tables.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreBook {
    pub samples: BTreeMap<String, Vec<ScoreEntry>>,
}

/// Reads either a stored (hashed) document of `kind` or bare JSON.
pub fn load_json_or_document<T: DeserializeOwned>(path: &Path, kind: DocumentKind) -> Result<T, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    if value.get("content_hash").is_some() {
        return tracestore::read_payload(path, kind).map_err(|e| HarnessError::Config(e.to_string()));
    }
    serde_json::from_value(value).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}

/// Where a run's outputs and cassettes go. None of this affects results, so
/// it stays out of the configuration hash.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Parent of the run directory; `None` keeps the run in memory.
    pub runs_root: Option<PathBuf>,
    /// Serve provider calls from `<dir>/<sample_id>/<service>.json`.
    pub replay: Option<PathBuf>,
    /// Record provider calls into `<dir>/<sample_id>/<service>.json`.
    pub record: Option<PathBuf>,
}

pub struct BenchmarkRun {
    pub report: RunReport,
    /// Sorted by sample id.
    pub traces: Vec<(String, ReasoningTrace)>,
    pub run_dir: Option<PathBuf>,
}

/// Shared, read-only inputs prepared once per run.
struct RunInputs {
    scripts: Option<ScriptBook>,
    scores: Option<ScoreBook>,
    manifest: Option<BTreeMap<String, ObjectPool>>,
    api_key: Option<String>,
}

impl RunInputs {
    fn prepare(cfg: &RunConfig) -> Result<Self, HarnessError> {
        let scripts = match &cfg.backend {
            BackendSettings::Scripted { scripts, .. } => {
                let book: ScriptBook = load_json_or_document(scripts, DocumentKind::Script)?;
                for (id, script) in &book.samples {
                    script
                        .validate()
                        .map_err(|e| HarnessError::Config(format!("script for {id}: {e}")))?;
                }
                Some(book)
            }
            BackendSettings::Chat { .. } => None,
        };
        let scores = match &cfg.relevance {
            RelevanceSettings::Scripted { tables } => Some(load_json_or_document(tables, DocumentKind::Script)?),
            RelevanceSettings::Embedding { .. } => None,
        };
        let manifest = match &cfg.pool {
            PoolSettings::Manifest { path } => {
                Some(load_manifest(path).map_err(|e| HarnessError::Config(e.to_string()))?)
            }
            _ => None,
        };
        Ok(Self {
            scripts,
            scores,
            manifest,
            api_key: std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty()),
        })
    }
}

fn safe_name(id: &str) -> String {
    let cleaned: String = id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "._-".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect();
    if cleaned == id && !cleaned.starts_with('.') {
        cleaned
    } else {
        let digest = hex::encode(Sha256::digest(id.as_bytes()));
        format!("{cleaned}-{}", &digest[..8])
    }
}

type Recorder = Arc<RecordingTransport<Arc<dyn Transport>>>;

/// Builds transports for one sample, honouring replay and record options.
struct TransportFactory<'a> {
    sample_dir: Option<PathBuf>,
    record: bool,
    recorders: Mutex<Vec<(String, Recorder)>>,
    options: &'a RunOptions,
}

impl<'a> TransportFactory<'a> {
    fn new(options: &'a RunOptions, sample_id: &str) -> Self {
        Self {
            sample_dir: options.replay.as_ref().map(|d| d.join(safe_name(sample_id))),
            record: options.record.is_some(),
            recorders: Mutex::new(Vec::new()),
            options,
        }
    }

    fn make(&self, service: &str, case: &str, live: impl FnOnce() -> Arc<dyn Transport>) -> Arc<dyn Transport> {
        let base: Arc<dyn Transport> = match &self.sample_dir {
            Some(dir) => {
                let path = dir.join(format!("{service}.json"));
                let cassette = match tracestore::read_payload::<Cassette>(&path, DocumentKind::Cassette) {
                    Ok(c) => c,
                    Err(e) => {
                        log::warn!("no usable cassette for {case}/{service}: {e}");
                        Cassette {
                            case: format!("{case}/{service}"),
                            interactions: Vec::new(),
                        }
                    }
                };
                Arc::new(ReplayTransport::new(cassette))
            }
            None => live(),
        };
        if !self.record {
            return base;
        }
        let recorder = Arc::new(RecordingTransport::new(base, format!("{case}/{service}")));
        self.recorders
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((service.to_string(), Arc::clone(&recorder)));
        recorder
    }

    fn save(&self, sample_id: &str) -> Result<(), HarnessError> {
        let Some(root) = &self.options.record else {
            return Ok(());
        };
        let dir = root.join(safe_name(sample_id));
        for (service, recorder) in self.recorders.lock().unwrap_or_else(|e| e.into_inner()).iter() {
            let doc = StoredDocument::new(DocumentKind::Cassette, &recorder.cassette())
                .map_err(|e| HarnessError::Io(e.to_string()))?;
            tracestore::write_document_to(&dir.join(format!("{service}.json")), &doc)
                .map_err(|e| HarnessError::Io(e.to_string()))?;
        }
        Ok(())
    }
}

fn retry_policy(cfg: &RunConfig) -> RetryPolicy {
    RetryPolicy {
        max_retries: cfg.network.max_retries,
        base_delay: Duration::from_millis(cfg.network.backoff_ms),
        timeout: Duration::from_millis(cfg.network.timeout_ms),
    }
}

fn auth_headers(key: &Option<String>) -> Vec<(String, String)> {
    key.iter()
        .map(|k| ("authorization".to_string(), format!("Bearer {k}")))
        .collect()
}

fn empty_pool(sample: &Sample) -> ObjectPool {
    let dims = std::fs::read(&sample.image_path)
        .ok()
        .and_then(|b| image_dimensions(&b, &sample.image_path).ok())
        .unwrap_or(ImageDimensions { width: 0, height: 0 });
    ObjectPool::empty(sample.sample_id.clone(), dims)
}

fn run_sample(
    sample: &Sample,
    cfg: &RunConfig,
    inputs: &RunInputs,
    options: &RunOptions,
) -> Result<ReasoningTrace, HarnessError> {
    let factory = TransportFactory::new(options, &sample.sample_id);
    let case = sample.sample_id.as_str();
    let retry = retry_policy(cfg);
    let live = || -> Arc<dyn Transport> { Arc::new(ReqwestTransport::new()) };

    let backend: Box<dyn GenerationBackend> = match &cfg.backend {
        BackendSettings::Chat {
            url,
            model,
            temperature,
        } => {
            let transport = factory.make("chat", case, live);
            Box::new(
                ChatCompletionsBackend::new(
                    ChatEndpointConfig {
                        url: url.clone(),
                        model: model.clone(),
                        temperature: *temperature,
                    },
                    transport,
                    retry,
                )
                .with_api_key(inputs.api_key.clone())
                .with_estimator(cfg.estimator()),
            )
        }
        BackendSettings::Scripted { wire, .. } => {
            let script = inputs
                .scripts
                .as_ref()
                .and_then(|b| b.samples.get(&sample.sample_id))
                .cloned()
                .unwrap_or_default();
            if *wire {
                let transport = factory.make("chat", case, || Arc::new(ScriptedChatEndpoint::new(script)));
                Box::new(
                    ChatCompletionsBackend::new(
                        ChatEndpointConfig {
                            url: "scripted://chat".into(),
                            model: "scripted".into(),
                            temperature: None,
                        },
                        transport,
                        RetryPolicy::immediate(0),
                    )
                    .with_estimator(cfg.estimator()),
                )
            } else {
                let mut b = ScriptedBackend::new(script);
                b.estimator = cfg.estimator();
                Box::new(b)
            }
        }
    };

    let relevance: Box<dyn RelevanceProvider> = match &cfg.relevance {
        RelevanceSettings::Embedding {
            text_url,
            image_url,
            model,
            max_concurrency,
        } => {
            let client = HttpEmbeddingClient {
                text_url: text_url.clone(),
                image_url: image_url.clone(),
                model: model.clone(),
                transport: factory.make("embedding", case, live),
                retry,
                headers: auth_headers(&inputs.api_key),
            };
            Box::new(EmbeddingRelevance::new(client, *max_concurrency))
        }
        RelevanceSettings::Scripted { .. } => {
            let table = inputs
                .scores
                .as_ref()
                .and_then(|b| b.samples.get(&sample.sample_id))
                .map(|entries| ScriptedScorer::from_table(entries))
                .unwrap_or_default();
            Box::new(table)
        }
    };

    let raw_pool = match &cfg.pool {
        PoolSettings::Manifest { .. } => inputs
            .manifest
            .as_ref()
            .and_then(|m| m.get(&sample.sample_id))
            .cloned()
            .unwrap_or_else(|| {
                log::warn!("{}: no manifest entry, pool is empty", sample.sample_id);
                empty_pool(sample)
            }),
        PoolSettings::Service { url, max_in_flight } => {
            let mut provider = HttpSegmentationProvider::new(
                url.clone(),
                factory.make("segmentation", case, live),
                retry,
                *max_in_flight,
            );
            provider.headers = auth_headers(&inputs.api_key);
            let source = sample.trace_question().image;
            request_segmentation(&source, &provider).unwrap_or_else(|e| {
                log::warn!("{}: segmentation failed, pool is empty: {e}", sample.sample_id);
                empty_pool(sample)
            })
        }
        PoolSettings::None => empty_pool(sample),
    };
    let pool = filter_candidates(&raw_pool, &cfg.filter);

    let trace = run_trace(
        &sample.trace_question(),
        &pool,
        &cfg.orchestrator(),
        &Providers {
            backend: backend.as_ref(),
            relevance: relevance.as_ref(),
        },
    );
    factory.save(&sample.sample_id)?;
    Ok(trace)
}

/// Runs every sample on a pool of `cfg.workers` threads.
fn run_all(samples: &[Sample], cfg: &RunConfig, options: &RunOptions) -> Result<Vec<ReasoningTrace>, HarnessError> {
    let inputs = RunInputs::prepare(cfg)?;
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<ReasoningTrace, HarnessError>>>> =
        samples.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..cfg.workers.min(samples.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(sample) = samples.get(i) else { break };
                let result = run_sample(sample, cfg, &inputs, options);
                *slots[i].lock().unwrap_or_else(|e| e.into_inner()) = Some(result);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| {
            slot.into_inner()
                .unwrap_or_else(|e| e.into_inner())
                .unwrap_or_else(|| Err(HarnessError::Io("worker exited without a result".into())))
        })
        .collect()
}

fn create_run_dir(root: &Path, hash: &str) -> Result<PathBuf, HarnessError> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{stamp}-{}", &hash[..12]);
    for n in 0.. {
        let name = if n == 0 { base.clone() } else { format!("{base}.{n}") };
        let dir = root.join(name);
        match std::fs::create_dir_all(root).and_then(|_| std::fs::create_dir(&dir)) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(HarnessError::Io(format!("{}: {e}", dir.display()))),
        }
    }
    unreachable!("the suffix search always terminates")
}

pub fn trace_file_name(sample_id: &str) -> String {
    format!("{}.json", safe_name(sample_id))
}

/// Runs `run_trace` for each sample and aggregates a report. With
/// `options.runs_root`, writes `traces/`, `config.json` and `report.json`
/// under `<root>/<UTC timestamp>-<config hash prefix>/`.
pub fn run_benchmark(samples: &[Sample], cfg: &RunConfig, options: &RunOptions) -> Result<BenchmarkRun, HarnessError> {
    cfg.validate()?;
    let traces = run_all(samples, cfg, options)?;
    let mut pairs: Vec<(Sample, ReasoningTrace)> = samples.iter().cloned().zip(traces).collect();
    pairs.sort_by(|a, b| a.0.sample_id.cmp(&b.0.sample_id));
    let hash = cfg.config_hash();
    let report = build_report(&hash, cfg.tau, &pairs);

    let run_dir = match &options.runs_root {
        Some(root) => {
            let dir = create_run_dir(root, &hash)?;
            let io = |e: tracestore::StoreError| HarnessError::Io(e.to_string());
            for (sample, trace) in &pairs {
                let doc = StoredDocument::new(DocumentKind::Trace, trace).map_err(io)?;
                tracestore::write_document_to(&dir.join("traces").join(trace_file_name(&sample.sample_id)), &doc)
                    .map_err(io)?;
            }
            let doc = StoredDocument::new(DocumentKind::Config, cfg).map_err(io)?;
            tracestore::write_document_to(&dir.join("config.json"), &doc).map_err(io)?;
            let doc = StoredDocument::new(DocumentKind::Report, &report).map_err(io)?;
            tracestore::write_document_to(&dir.join("report.json"), &doc).map_err(io)?;
            log::info!("run written to {}", dir.display());
            Some(dir)
        }
        None => None,
    };
    Ok(BenchmarkRun {
        report,
        traces: pairs.into_iter().map(|(s, t)| (s.sample_id, t)).collect(),
        run_dir,
    })
}

/// `"0.1:1.0:0.1"` (inclusive range) or `"0.1,0.2,0.5"`. Values are rounded
/// to 10 decimals so accumulated steps do not drift.
pub fn parse_grid(input: &str) -> Result<Vec<f64>, HarnessError> {
    let bad = |m: String| HarnessError::Config(format!("grid {input:?}: {m}"));
    let num = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(e.to_string()));
    let round = |x: f64| (x * 1e10).round() / 1e10;
    let grid: Vec<f64> = if input.contains(':') {
        let parts: Vec<&str> = input.split(':').collect();
        let [start, end, step] = parts.as_slice() else {
            return Err(bad("expected start:end:step".into()));
        };
        let (start, end, step) = (num(start)?, num(end)?, num(step)?);
        if step.is_nan() || step <= 0.0 || end < start {
            return Err(bad("need step > 0 and end >= start".into()));
        }
        let count = ((end - start) / step + 1e-9).floor() as usize + 1;
        (0..count).map(|i| round(start + i as f64 * step)).collect()
    } else {
        input.split(',').map(num).collect::<Result<_, _>>()?
    };
    if grid.is_empty() || grid.iter().any(|t| !t.is_finite()) {
        return Err(bad("empty or non-finite".into()));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub accuracy: f64,
    pub mean_insertions: f64,
    pub mean_total_tokens: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
    /// First τ reaching the highest accuracy.
    pub best_tau: f64,
}

pub fn sweep_tau(
    samples: &[Sample],
    base: &RunConfig,
    grid: &[f64],
    options: &RunOptions,
) -> Result<SweepTable, HarnessError> {
    if grid.is_empty() {
        return Err(HarnessError::Config("empty tau grid".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &tau in grid {
        let cfg = base.with_policy(InsertionPolicy::Gated { tau });
        let run = run_benchmark(samples, &cfg, options)?;
        rows.push(SweepRow {
            tau,
            accuracy: run.report.accuracy,
            mean_insertions: run.report.insertions.mean_insertions,
            mean_total_tokens: run.report.mean_total_tokens,
        });
    }
    let best = rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.accuracy >= r.accuracy => Some(b),
            _ => Some(r),
        })
        .map(|r| r.tau)
        .unwrap_or(grid[0]);
    Ok(SweepTable { rows, best_tau: best })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRow {
    pub policy: String,
    pub tau: TauSetting,
    pub accuracy: f64,
    pub mean_total_tokens: f64,
    pub mean_text_tokens: f64,
    pub mean_image_tokens: f64,
    pub mean_insertions: f64,
    pub ledgers: Vec<TokenLedger>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub rows: Vec<PolicyRow>,
    /// Token reduction of the gated policy relative to always-insert, when
    /// both were run.
    pub gated_vs_always_reduction: Option<f64>,
}

pub fn compare_policies(
    samples: &[Sample],
    cfg: &RunConfig,
    policies: &[InsertionPolicy],
    options: &RunOptions,
) -> Result<ComparisonReport, HarnessError> {
    if policies.len() < 2 {
        return Err(HarnessError::Config("compare needs at least two policies".into()));
    }
    let mut rows = Vec::with_capacity(policies.len());
    for &policy in policies {
        let run = run_benchmark(samples, &cfg.with_policy(policy), options)?;
        let r = &run.report;
        rows.push(PolicyRow {
            policy: policy.label(),
            tau: TauSetting::from_policy(policy),
            accuracy: r.accuracy,
            mean_total_tokens: r.mean_total_tokens,
            mean_text_tokens: r.mean_text_tokens,
            mean_image_tokens: r.mean_image_tokens,
            mean_insertions: r.insertions.mean_insertions,
            ledgers: r.rows.iter().map(|row| row.ledger.clone()).collect(),
        });
    }
    let find = |want: fn(&InsertionPolicy) -> bool| policies.iter().position(want).map(|i| rows[i].mean_total_tokens);
    let gated = find(|p| matches!(p, InsertionPolicy::Gated { .. }));
    let always = find(|p| matches!(p, InsertionPolicy::Always));
    let gated_vs_always_reduction = match (gated, always) {
        (Some(g), Some(a)) => reduction_ratio(g, a).ok(),
        _ => None,
    };
    Ok(ComparisonReport {
        rows,
        gated_vs_always_reduction,
    })
}

/// `"gated,always,never"`; `gated` uses `default_tau`, `gated:0.3` an
/// explicit threshold.
pub fn parse_policies(input: &str, default_tau: f64) -> Result<Vec<InsertionPolicy>, HarnessError> {
    input
        .split(',')
        .map(|p| {
            let p = p.trim();
            match p {
                "always" => Ok(InsertionPolicy::Always),
                "never" => Ok(InsertionPolicy::Never),
                "gated" => Ok(InsertionPolicy::Gated { tau: default_tau }),
                _ => p
                    .strip_prefix("gated:")
                    .and_then(|t| t.parse::<f64>().ok())
                    .filter(|t| t.is_finite())
                    .map(|tau| InsertionPolicy::Gated { tau })
                    .ok_or_else(|| HarnessError::Config(format!("unknown policy {p:?}"))),
            }
        })
        .collect()
}
