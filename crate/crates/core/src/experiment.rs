//! Experiment harness: dataset loading, eval-set construction, attack and
//! check execution across claims, metric computation, and paired bootstrap
//! significance testing.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{compute_poison_count, run_attack, AttackKind, Fact2FictionConfig};
use crate::defense::{paraphrase_claim, BigramScorer, DefenseConfig, DefensePipeline, PerplexityScorer};
use crate::domain::{classify_outcome, Claim, OutcomeClass, VeracityLabel};
use crate::error::{Error, Result};
use crate::llm::{Backend, HttpBackend, LiveConfig, ScriptedBackend, MAX_QUESTIONS};
use crate::retrieval::{fnv1a64, Embedder, HashEmbedder, KnowledgeBase, RemoteEmbedder};
use crate::victim::{check, CheckContext, Exchange, FactCheckReport, Transcript, VictimKind};

/// Largest poisoning rate a config may request.
pub const MAX_POISON_RATE: f64 = 0.2;

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendConfig {
    Scripted {
        rules_path: PathBuf,
    },
    Live {
        base_url: String,
        model: String,
        #[serde(default)]
        requests_per_minute: Option<u32>,
        #[serde(default)]
        max_concurrency: Option<usize>,
        #[serde(default)]
        max_retries: Option<usize>,
        #[serde(default)]
        timeout_secs: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EmbedderConfig {
    Hash { dim: usize, seed: u64 },
    Live { base_url: String, model: String },
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        EmbedderConfig::Hash { dim: 256, seed: 0 }
    }
}

fn default_k() -> usize {
    5
}

fn default_max_questions() -> usize {
    MAX_QUESTIONS
}

fn default_concurrency() -> usize {
    4
}

fn default_trials() -> usize {
    1
}

/// One experiment cell: a single (victim, attack, defense, poison rate)
/// combination over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_path: PathBuf,
    #[serde(default)]
    pub victim: VictimKind,
    /// Attack name: `none`, a baseline, or `fact2fiction` with optional
    /// `-noanswer`/`-nobudget`/`-noquery` ablation suffixes.
    pub attack: String,
    #[serde(default)]
    pub defense: DefenseConfig,
    pub poison_rate: f64,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default = "default_max_questions")]
    pub max_questions: usize,
    pub backend: BackendConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub rng_seed: u64,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

/// Parse an attack name as used in configs and result tables.
pub fn parse_attack(name: &str) -> Result<Option<AttackKind>> {
    if name == "none" {
        return Ok(None);
    }
    let kind = match name {
        "naive" => AttackKind::Naive,
        "prompt_injection" => AttackKind::PromptInjection,
        "disinformation" => AttackKind::Disinformation,
        "poisonedrag" => AttackKind::PoisonedRag,
        _ => {
            let rest = name.strip_prefix("fact2fiction").ok_or_else(|| {
                Error::InvalidConfig(format!("unknown attack {name:?}"))
            })?;
            let mut cfg = Fact2FictionConfig::default();
            let mut rest = rest;
            if let Some(r) = rest.strip_prefix("-noanswer") {
                cfg.answer_planning = false;
                rest = r;
            }
            if let Some(r) = rest.strip_prefix("-nobudget") {
                cfg.budget_planning = false;
                rest = r;
            }
            if let Some(r) = rest.strip_prefix("-noquery") {
                cfg.query_planning = false;
                rest = r;
            }
            if !rest.is_empty() {
                return Err(Error::InvalidConfig(format!("unknown attack {name:?}")));
            }
            AttackKind::Fact2Fiction(cfg)
        }
    };
    Ok(Some(kind))
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.poison_rate > 0.0 && self.poison_rate <= MAX_POISON_RATE) {
            return Err(Error::InvalidConfig(format!(
                "poison rate must be in (0, {MAX_POISON_RATE}], got {}",
                self.poison_rate
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("retrieval depth k must be at least 1".into()));
        }
        if self.max_questions == 0 || self.max_questions > MAX_QUESTIONS {
            return Err(Error::InvalidConfig(format!(
                "max questions must be in 1..={MAX_QUESTIONS}, got {}",
                self.max_questions
            )));
        }
        if self.concurrency == 0 {
            return Err(Error::InvalidConfig("concurrency must be at least 1".into()));
        }
        if self.trials == 0 {
            return Err(Error::InvalidConfig("trials must be at least 1".into()));
        }
        if let EmbedderConfig::Hash { dim, .. } = self.embedder {
            if dim == 0 {
                return Err(Error::InvalidConfig("hash embedder dim must be at least 1".into()));
            }
        }
        parse_attack(&self.attack)?;
        self.defense.validate()
    }

    pub fn attack_kind(&self) -> Result<Option<AttackKind>> {
        parse_attack(&self.attack)
    }
}

pub fn build_backend(cfg: &BackendConfig) -> Result<Box<dyn Backend>> {
    match cfg {
        BackendConfig::Scripted { rules_path } => {
            Ok(Box::new(ScriptedBackend::from_json_file(rules_path)?))
        }
        BackendConfig::Live { base_url, model, requests_per_minute, max_concurrency, max_retries, timeout_secs } => {
            let mut live = LiveConfig::new(base_url, model);
            if let Some(rpm) = requests_per_minute {
                live.requests_per_minute = *rpm;
            }
            if let Some(limit) = max_concurrency {
                live.max_concurrency = *limit;
            }
            if let Some(retries) = max_retries {
                live.max_retries = *retries;
            }
            if let Some(secs) = timeout_secs {
                live.timeout_secs = *secs;
            }
            Ok(Box::new(HttpBackend::new(live)?))
        }
    }
}

pub fn build_embedder(cfg: &EmbedderConfig) -> Result<Box<dyn Embedder>> {
    match cfg {
        EmbedderConfig::Hash { dim, seed } => {
            if *dim == 0 {
                return Err(Error::InvalidConfig("hash embedder dim must be at least 1".into()));
            }
            Ok(Box::new(HashEmbedder::new(*dim, *seed)))
        }
        EmbedderConfig::Live { base_url, model } => {
            let api_key = std::env::var(crate::llm::API_KEY_ENV).ok();
            Ok(Box::new(RemoteEmbedder::new(base_url, model, api_key)?))
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset

#[derive(Debug, Deserialize)]
struct ClaimRecord {
    claim_id: String,
    claim: String,
    label: VeracityLabel,
    #[serde(default)]
    date: Option<String>,
    #[serde(default)]
    speaker: Option<String>,
}

#[derive(Debug, Deserialize)]
struct KbRecord {
    evidence_id: String,
    text: String,
    #[serde(default)]
    url: Option<String>,
}

#[derive(Debug)]
pub struct Dataset {
    pub claims: Vec<Claim>,
    pub kbs: BTreeMap<String, KnowledgeBase>,
}

impl Dataset {
    pub fn kb(&self, claim_id: &str) -> Result<&KnowledgeBase> {
        self.kbs
            .get(claim_id)
            .ok_or_else(|| Error::InvalidConfig(format!("no knowledge base for claim {claim_id}")))
    }

    pub fn total_evidences(&self) -> usize {
        self.kbs.values().map(|kb| kb.len()).sum()
    }

    pub fn targetable_count(&self) -> usize {
        self.claims.iter().filter(|c| c.gold_label.is_targetable()).count()
    }
}

/// Load `claims.json` plus one `kb/<claim_id>.jsonl` evidence file per
/// claim, embedding every evidence with the given embedder.
pub fn load_dataset(dir: &Path, embedder: &dyn Embedder) -> Result<Dataset> {
    let claims_path = dir.join("claims.json");
    let text = std::fs::read_to_string(&claims_path)
        .map_err(|e| Error::io(format!("read {}", claims_path.display()), e))?;
    let records: Vec<ClaimRecord> = serde_json::from_str(&text).map_err(|e| Error::DatasetSchema {
        file: claims_path.display().to_string(),
        line: e.line(),
        reason: e.to_string(),
    })?;

    let mut claims = Vec::with_capacity(records.len());
    let mut seen = BTreeSet::new();
    for record in records {
        if !seen.insert(record.claim_id.clone()) {
            return Err(Error::DatasetSchema {
                file: claims_path.display().to_string(),
                line: 0,
                reason: format!("duplicate claim id {:?}", record.claim_id),
            });
        }
        let mut claim =
            Claim::new(record.claim_id.clone(), record.claim, record.label).map_err(|e| {
                Error::DatasetSchema {
                    file: claims_path.display().to_string(),
                    line: 0,
                    reason: format!("claim {:?}: {e}", record.claim_id),
                }
            })?;
        claim.date = record.date;
        claim.speaker = record.speaker;
        claims.push(claim);
    }

    let mut kbs = BTreeMap::new();
    for claim in &claims {
        let kb_path = dir.join("kb").join(format!("{}.jsonl", claim.id));
        let file = std::fs::File::open(&kb_path)
            .map_err(|e| Error::io(format!("read {}", kb_path.display()), e))?;
        let mut evidences = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(format!("read {}", kb_path.display()), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: KbRecord =
                serde_json::from_str(&line).map_err(|e| Error::DatasetSchema {
                    file: kb_path.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            let mut evidence = crate::domain::Evidence::clean(record.evidence_id, record.text)
                .map_err(|e| Error::DatasetSchema {
                    file: kb_path.display().to_string(),
                    line: i + 1,
                    reason: e.to_string(),
                })?;
            evidence.url = record.url;
            evidences.push(evidence);
        }
        let kb = KnowledgeBase::from_evidences(claim.id.clone(), evidences, embedder)
            .map_err(|e| Error::for_claim(claim.id.clone(), e))?;
        kbs.insert(claim.id.clone(), kb);
    }
    Ok(Dataset { claims, kbs })
}

// ---------------------------------------------------------------------------
// Eval set and probe cache

/// On-disk cache of probe reports keyed by (victim, backend, claim), so the
/// same clean check never reruns.
pub struct ProbeCache {
    dir: PathBuf,
}

impl ProbeCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<ProbeCache> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
        Ok(ProbeCache { dir })
    }

    fn path(&self, victim: VictimKind, backend_name: &str, claim_id: &str) -> PathBuf {
        let key = fnv1a64(0, format!("{}|{backend_name}|{claim_id}", victim.name()).as_bytes());
        self.dir.join(format!("{key:016x}.json"))
    }

    pub fn get(&self, victim: VictimKind, backend_name: &str, claim_id: &str) -> Option<FactCheckReport> {
        let text = std::fs::read_to_string(self.path(victim, backend_name, claim_id)).ok()?;
        serde_json::from_str(&text).ok()
    }

    pub fn put(
        &self,
        victim: VictimKind,
        backend_name: &str,
        claim_id: &str,
        report: &FactCheckReport,
    ) -> Result<()> {
        let path = self.path(victim, backend_name, claim_id);
        let json = serde_json::to_string_pretty(report)
            .map_err(|e| Error::MalformedReply(format!("serialize probe report: {e}")))?;
        std::fs::write(&path, json).map_err(|e| Error::io(format!("write {}", path.display()), e))
    }
}

/// The claims an experiment targets: targetable gold label and a correct
/// clean-KB verdict, with the probe report that proves it.
#[derive(Debug)]
pub struct EvalSet {
    pub claims: Vec<Claim>,
    pub probes: BTreeMap<String, FactCheckReport>,
    /// (claim_id, reason) for every dataset claim not in the eval set.
    pub excluded: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

enum ProbeOutcome {
    Kept(FactCheckReport),
    Excluded(String),
}

/// Bounded worker pool mapping `f` over `items`; output order matches input
/// order regardless of scheduling.
fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    let n = items.len();
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..n).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = workers.max(1).min(n.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("worker filled every slot")).collect()
}

/// Run the victim on every targetable claim's clean knowledge base and keep
/// the claims it verdicts correctly. Probes run without defenses.
pub fn build_eval_set(
    dataset: &Dataset,
    config: &ExperimentConfig,
    backend: &dyn Backend,
    embedder: &dyn Embedder,
    cache: Option<&ProbeCache>,
) -> Result<EvalSet> {
    let mut candidates: Vec<&Claim> = Vec::new();
    let mut excluded: Vec<(String, String)> = Vec::new();
    for claim in &dataset.claims {
        if claim.gold_label.is_targetable() {
            candidates.push(claim);
        } else {
            excluded.push((claim.id.clone(), format!("gold label {} is not targetable", claim.gold_label)));
        }
    }

    let outcomes = parallel_map(&candidates, config.concurrency, |claim| {
        if let Some(cache) = cache {
            if let Some(report) = cache.get(config.victim, backend.name(), &claim.id) {
                return (claim.id.clone(), ProbeOutcome::Kept(report), true);
            }
        }
        let kb = match dataset.kb(&claim.id) {
            Ok(kb) => kb,
            Err(e) => return (claim.id.clone(), ProbeOutcome::Excluded(e.to_string()), false),
        };
        let mut ctx = CheckContext::new(backend, embedder);
        ctx.k = config.k;
        ctx.max_questions = config.max_questions;
        match check(config.victim, claim, kb, &ctx) {
            Ok(report) => (claim.id.clone(), ProbeOutcome::Kept(report), false),
            Err(e) => (claim.id.clone(), ProbeOutcome::Excluded(format!("probe failed: {e}")), false),
        }
    });

    let mut claims = Vec::new();
    let mut probes = BTreeMap::new();
    let mut warnings = Vec::new();
    for ((claim_id, outcome, from_cache), claim) in outcomes.into_iter().zip(&candidates) {
        match outcome {
            ProbeOutcome::Kept(report) => {
                if let (Some(cache), false) = (cache, from_cache) {
                    cache.put(config.victim, backend.name(), &claim_id, &report)?;
                }
                if report.verdict == claim.gold_label {
                    claims.push((*claim).clone());
                    probes.insert(claim_id, report);
                } else {
                    excluded.push((
                        claim_id,
                        format!("pre-attack verdict {} disagrees with gold {}", report.verdict, claim.gold_label),
                    ));
                }
            }
            ProbeOutcome::Excluded(reason) => excluded.push((claim_id, reason)),
        }
    }
    claims.sort_by(|a, b| a.id.cmp(&b.id));
    if claims.is_empty() {
        warnings.push("eval set is empty: the victim verdicted no targetable claim correctly".to_string());
    }
    Ok(EvalSet { claims, probes, excluded, warnings })
}

// ---------------------------------------------------------------------------
// Results and metrics

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClaimResult {
    pub claim_id: String,
    pub trial: usize,
    pub rate: f64,
    pub gold: VeracityLabel,
    pub pre_verdict: VeracityLabel,
    pub post_verdict: VeracityLabel,
    pub outcome: OutcomeClass,
    pub injected_count: usize,
    pub retrieved_total: usize,
    pub retrieved_malicious: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateMetrics {
    pub n: usize,
    pub asr: f64,
    pub sfr: f64,
    pub sir: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n_claims: usize,
    /// Fraction of results whose verdict was exactly inverted.
    pub asr: f64,
    /// Fraction of results with any incorrect verdict.
    pub sfr: f64,
    /// Retrieved-malicious over total-retrieved, micro-averaged across every
    /// retrieval of every result.
    pub sir: f64,
    pub per_rate: BTreeMap<String, RateMetrics>,
    pub per_claim_sir: BTreeMap<String, f64>,
}

fn rate_key(rate: f64) -> String {
    format!("{rate}")
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(results: &[ClaimResult]) -> Result<MetricsSummary> {
    if results.is_empty() {
        return Err(Error::EmptyResults);
    }
    for r in results {
        if r.retrieved_malicious > r.retrieved_total {
            return Err(Error::InvalidConfig(format!(
                "claim {} retrieved more malicious ({}) than total ({})",
                r.claim_id, r.retrieved_malicious, r.retrieved_total
            )));
        }
        let expected = classify_outcome(r.gold, r.post_verdict)?;
        if r.outcome != expected {
            return Err(Error::InvalidConfig(format!(
                "claim {} outcome {:?} disagrees with its verdicts",
                r.claim_id, r.outcome
            )));
        }
    }

    let tally = |rows: &[&ClaimResult]| -> RateMetrics {
        let n = rows.len();
        let inverted = rows.iter().filter(|r| r.outcome == OutcomeClass::Inverted).count();
        let degraded = rows.iter().filter(|r| r.outcome == OutcomeClass::Degraded).count();
        let mal: usize = rows.iter().map(|r| r.retrieved_malicious).sum();
        let total: usize = rows.iter().map(|r| r.retrieved_total).sum();
        RateMetrics {
            n,
            asr: ratio(inverted, n),
            sfr: ratio(inverted + degraded, n),
            sir: ratio(mal, total),
        }
    };

    let all: Vec<&ClaimResult> = results.iter().collect();
    let overall = tally(&all);

    let mut by_rate: BTreeMap<String, Vec<&ClaimResult>> = BTreeMap::new();
    for r in results {
        by_rate.entry(rate_key(r.rate)).or_default().push(r);
    }
    let per_rate = by_rate.into_iter().map(|(k, rows)| (k, tally(&rows))).collect();

    let mut by_claim: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for r in results {
        let entry = by_claim.entry(r.claim_id.clone()).or_insert((0, 0));
        entry.0 += r.retrieved_malicious;
        entry.1 += r.retrieved_total;
    }
    let per_claim_sir = by_claim.into_iter().map(|(k, (mal, total))| (k, ratio(mal, total))).collect();

    Ok(MetricsSummary {
        n_claims: overall.n,
        asr: overall.asr,
        sfr: overall.sfr,
        sir: overall.sir,
        per_rate,
        per_claim_sir,
    })
}

// ---------------------------------------------------------------------------
// Experiment execution

/// Everything shared across the cells of one evaluation: backend, embedder,
/// loaded dataset, and the probed eval set. Cells varying only attack,
/// defense, or rate can reuse it.
pub struct Workbench {
    pub backend: Box<dyn Backend>,
    pub embedder: Box<dyn Embedder>,
    pub dataset: Dataset,
    pub eval: EvalSet,
}

impl Workbench {
    pub fn prepare(config: &ExperimentConfig, cache: Option<&ProbeCache>) -> Result<Workbench> {
        config.validate()?;
        let backend = build_backend(&config.backend)?;
        let embedder = build_embedder(&config.embedder)?;
        let dataset = load_dataset(&config.dataset_path, embedder.as_ref())?;
        let eval = build_eval_set(&dataset, config, backend.as_ref(), embedder.as_ref(), cache)?;
        Ok(Workbench { backend, embedder, dataset, eval })
    }
}

#[derive(Debug)]
pub struct CellOutcome {
    pub results: Vec<ClaimResult>,
    pub summary: MetricsSummary,
    /// (claim_id, reason) per failed job; non-fatal below the abort
    /// threshold.
    pub failures: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

/// Full record of one job, written per (claim, trial) when a report
/// directory is given.
#[derive(Debug, Serialize, Deserialize)]
pub struct JobRecord {
    pub result: ClaimResult,
    pub report: FactCheckReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript: Option<Vec<Exchange>>,
}

/// Seed for one trial's attack randomness, derived from the experiment seed.
pub fn trial_seed(rng_seed: u64, trial: usize) -> u64 {
    fnv1a64(rng_seed, format!("trial|{trial}").as_bytes())
}

/// Claim ids appear in artifact filenames; replace anything outside
/// `[A-Za-z0-9_-]` so they stay portable.
pub fn sanitize_id(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn run_one(
    bench: &Workbench,
    config: &ExperimentConfig,
    kind: Option<&AttackKind>,
    claim: &Claim,
    trial: usize,
    trace: bool,
) -> Result<(ClaimResult, FactCheckReport, Option<Vec<Exchange>>)> {
    let backend = bench.backend.as_ref();
    let embedder = bench.embedder.as_ref();
    let kb = bench.dataset.kb(&claim.id)?;
    let probe = bench
        .eval
        .probes
        .get(&claim.id)
        .ok_or_else(|| Error::InvalidConfig(format!("no probe report for claim {}", claim.id)))?;

    let (checked_kb, injected_count) = match kind {
        Some(kind) => {
            let m = compute_poison_count(config.poison_rate, kb.len())?;
            let poison =
                run_attack(kind, claim, m, Some(probe), backend, trial_seed(config.rng_seed, trial))?;
            let injected = poison.evidences.len();
            (kb.inject(&poison.evidences, embedder)?, injected)
        }
        None => (kb.clone(), 0),
    };

    let checked_claim =
        if config.defense.paraphrase { paraphrase_claim(claim, backend)? } else { claim.clone() };
    let scorer: Option<BigramScorer> =
        config.defense.ppl.is_some().then(|| BigramScorer::fit_on_kb(kb)).transpose()?;
    let pipeline =
        DefensePipeline::new(&config.defense, scorer.as_ref().map(|s| s as &dyn PerplexityScorer))?;
    let transcript = trace.then(Transcript::default);

    let mut ctx = CheckContext::new(backend, embedder);
    ctx.k = config.k;
    ctx.max_questions = config.max_questions;
    if !pipeline.is_empty() {
        ctx.filter = Some(&pipeline);
    }
    if let Some(t) = &transcript {
        ctx.transcript = Some(t);
    }
    let report = check(config.victim, &checked_claim, &checked_kb, &ctx)?;
    let counts = report.retrieval_counts();
    let result = ClaimResult {
        claim_id: claim.id.clone(),
        trial,
        rate: config.poison_rate,
        gold: claim.gold_label,
        pre_verdict: probe.verdict,
        post_verdict: report.verdict,
        outcome: classify_outcome(claim.gold_label, report.verdict)?,
        injected_count,
        retrieved_total: counts.kept_total,
        retrieved_malicious: counts.kept_malicious,
    };
    Ok((result, report, transcript.map(|t| t.snapshot())))
}

/// Run one experiment cell over a prepared workbench. `report_dir`, when
/// given, receives a JSON record per (claim, trial); `trace` additionally
/// captures every prompt/completion exchange into those records.
pub fn run_cell(
    bench: &Workbench,
    config: &ExperimentConfig,
    report_dir: Option<&Path>,
    trace: bool,
) -> Result<CellOutcome> {
    config.validate()?;
    let kind = config.attack_kind()?;
    if let Some(dir) = report_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("create {}", dir.display()), e))?;
    }

    let jobs: Vec<(usize, &Claim)> = (0..config.trials)
        .flat_map(|trial| bench.eval.claims.iter().map(move |claim| (trial, claim)))
        .collect();
    let outcomes = parallel_map(&jobs, config.concurrency, |(trial, claim)| {
        run_one(bench, config, kind.as_ref(), claim, *trial, trace)
            .map_err(|e| Error::for_claim(claim.id.clone(), e))
    });

    let mut results = Vec::new();
    let mut failures = Vec::new();
    for ((trial, claim), outcome) in jobs.iter().zip(outcomes) {
        match outcome {
            Ok((result, report, transcript)) => {
                if let Some(dir) = report_dir {
                    let record = JobRecord { result: result.clone(), report, transcript };
                    let path = dir.join(format!("{}-t{trial}.json", sanitize_id(&claim.id)));
                    let json = serde_json::to_string_pretty(&record)
                        .map_err(|e| Error::MalformedReply(format!("serialize job record: {e}")))?;
                    std::fs::write(&path, json)
                        .map_err(|e| Error::io(format!("write {}", path.display()), e))?;
                }
                results.push(result);
            }
            Err(e) => failures.push((claim.id.clone(), e.to_string())),
        }
    }
    if failures.len() * 10 > jobs.len() {
        return Err(Error::TooManyClaimFailures { failed: failures.len(), total: jobs.len() });
    }
    let summary = compute_metrics(&results)?;
    let mut warnings = bench.eval.warnings.clone();
    for (claim_id, reason) in &failures {
        warnings.push(format!("claim {claim_id} failed: {reason}"));
    }
    Ok(CellOutcome { results, summary, failures, warnings })
}

#[derive(Debug)]
pub struct ExperimentRun {
    pub results: Vec<ClaimResult>,
    pub summary: MetricsSummary,
    pub eval_size: usize,
    pub excluded: Vec<(String, String)>,
    pub failures: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

/// One-shot experiment: prepare a workbench from the config and run its
/// single cell.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRun> {
    let bench = Workbench::prepare(config, None)?;
    let cell = run_cell(&bench, config, None, false)?;
    Ok(ExperimentRun {
        results: cell.results,
        summary: cell.summary,
        eval_size: bench.eval.claims.len(),
        excluded: bench.eval.excluded,
        failures: cell.failures,
        warnings: cell.warnings,
    })
}

// ---------------------------------------------------------------------------
// Paired bootstrap

/// One-sided paired bootstrap: the returned p-value is the fraction of
/// with-replacement resamples of paired indices where mean(a) ≤ mean(b).
/// Small p favors a over b.
pub fn paired_bootstrap(
    success_a: &[bool],
    success_b: &[bool],
    resamples: usize,
    seed: u64,
) -> Result<f64> {
    if success_a.len() != success_b.len() || success_a.len() < 2 {
        return Err(Error::BootstrapInput { a: success_a.len(), b: success_b.len() });
    }
    if resamples < 1000 {
        return Err(Error::TooFewResamples(resamples));
    }
    let n = success_a.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut favorable = 0usize;
    for _ in 0..resamples {
        let mut sum_a = 0u64;
        let mut sum_b = 0u64;
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sum_a += u64::from(success_a[i]);
            sum_b += u64::from(success_b[i]);
        }
        if sum_a <= sum_b {
            favorable += 1;
        }
    }
    Ok(favorable as f64 / resamples as f64)
}

/// Per-result attack-success indicators ordered by (claim_id, trial).
pub fn success_indicators(results: &[ClaimResult]) -> Vec<bool> {
    let mut rows: Vec<(&str, usize, bool)> = results
        .iter()
        .map(|r| (r.claim_id.as_str(), r.trial, r.outcome == OutcomeClass::Inverted))
        .collect();
    rows.sort();
    rows.into_iter().map(|(_, _, s)| s).collect()
}

/// Align two result sets on their common (claim_id, trial) keys and return
/// paired success vectors.
pub fn paired_success(a: &[ClaimResult], b: &[ClaimResult]) -> Result<(Vec<bool>, Vec<bool>)> {
    let index = |rows: &[ClaimResult]| -> BTreeMap<(String, usize), bool> {
        rows.iter()
            .map(|r| ((r.claim_id.clone(), r.trial), r.outcome == OutcomeClass::Inverted))
            .collect()
    };
    let a_map = index(a);
    let b_map = index(b);
    let mut va = Vec::new();
    let mut vb = Vec::new();
    for (key, &sa) in &a_map {
        if let Some(&sb) = b_map.get(key) {
            va.push(sa);
            vb.push(sb);
        }
    }
    if va.len() < 2 {
        return Err(Error::BootstrapInput { a: a.len(), b: b.len() });
    }
    Ok((va, vb))
}

// ---------------------------------------------------------------------------
// Persistence

pub fn write_claims_jsonl(results: &[ClaimResult], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("create {}", path.display()), e))?;
    let mut writer = std::io::BufWriter::new(file);
    for result in results {
        let line = serde_json::to_string(result)
            .map_err(|e| Error::MalformedReply(format!("serialize claim result: {e}")))?;
        writeln!(writer, "{line}").map_err(|e| Error::io(format!("write {}", path.display()), e))?;
    }
    Ok(())
}

pub fn read_claims_jsonl(path: &Path) -> Result<Vec<ClaimResult>> {
    let file =
        std::fs::File::open(path).map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    let mut results = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("read {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let result: ClaimResult = serde_json::from_str(&line).map_err(|e| Error::DatasetSchema {
            file: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        results.push(result);
    }
    Ok(results)
}

/// One row of the run summary table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub attack: String,
    pub victim: String,
    pub defense: String,
    pub rate: f64,
    pub asr: f64,
    pub sfr: f64,
    pub sir: f64,
    pub n: usize,
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("attack,victim,defense,rate,asr,sfr,sir,n\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{:.6},{}\n",
            row.attack, row.victim, row.defense, row.rate, row.asr, row.sfr, row.sir, row.n
        ));
    }
    out
}

pub fn write_summary_csv(rows: &[SummaryRow], path: &Path) -> Result<()> {
    std::fs::write(path, summary_csv(rows)).map_err(|e| Error::io(format!("write {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{CompletionRequest, Rule};
    use std::sync::atomic::AtomicUsize;

    fn write_lines(path: &Path, lines: &[String]) {
        std::fs::write(path, lines.join("\n") + "\n").unwrap();
    }

    /// Lay out a dataset directory: claims.json plus kb/<id>.jsonl files.
    fn write_dataset(dir: &Path, claims: &[(&str, &str, &str)], kbs: &[(&str, Vec<(String, String)>)]) {
        std::fs::create_dir_all(dir.join("kb")).unwrap();
        let records: Vec<serde_json::Value> = claims
            .iter()
            .map(|(id, text, label)| {
                serde_json::json!({"claim_id": id, "claim": text, "label": label})
            })
            .collect();
        std::fs::write(dir.join("claims.json"), serde_json::to_string_pretty(&records).unwrap())
            .unwrap();
        for (id, evidences) in kbs {
            let lines: Vec<String> = evidences
                .iter()
                .map(|(eid, text)| {
                    serde_json::json!({"evidence_id": eid, "text": text}).to_string()
                })
                .collect();
            write_lines(&dir.join("kb").join(format!("{id}.jsonl")), &lines);
        }
    }

    fn filler_kb(prefix: &str, vocab: &str) -> Vec<(String, String)> {
        (0..10).map(|i| (format!("{prefix}{i:02}"), format!("{vocab} item number {i}"))).collect()
    }

    fn scripted_config(dir: &Path, rules_path: &Path, attack: &str, rate: f64) -> ExperimentConfig {
        ExperimentConfig {
            dataset_path: dir.to_path_buf(),
            victim: VictimKind::Simple,
            attack: attack.to_string(),
            defense: DefenseConfig::none(),
            poison_rate: rate,
            k: 5,
            max_questions: 10,
            backend: BackendConfig::Scripted { rules_path: rules_path.to_path_buf() },
            embedder: EmbedderConfig::Hash { dim: 64, seed: 0 },
            rng_seed: 7,
            concurrency: 2,
            trials: 1,
        }
    }

    fn flip_rules() -> serde_json::Value {
        serde_json::json!({
            "rules": [
                {"contains": "is inaccurate", "response": "poisoned context detected\nVERDICT: Refuted"}
            ],
            "default_response": "evidence is consistent\nVERDICT: Supported"
        })
    }

    /// Three Supported claims: two whose clean KBs share no tokens with the
    /// claim (the injected claim-echo wins retrieval) and one whose KB
    /// repeats the claim text verbatim (clean entries win on distance).
    fn flip_scenario(dir: &Path) {
        write_dataset(
            dir,
            &[
                ("c1", "alpha bravo charlie delta", "supported"),
                ("c2", "golf hotel india juliet", "supported"),
                ("c3", "kilo lima mike november", "supported"),
            ],
            &[
                ("c1", filler_kb("a", "zulu yankee xray whiskey")),
                ("c2", filler_kb("b", "victor uniform tango sierra")),
                ("c3", (0..10).map(|i| (format!("c{i:02}"), "kilo lima mike november".to_string())).collect()),
            ],
        );
    }

    #[test]
    fn dataset_loads_claims_and_kbs() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &[
                ("c1", "one claim", "supported"),
                ("c2", "second claim", "refuted"),
                ("c3", "third claim", "not_enough_evidence"),
            ],
            &[
                ("c1", filler_kb("a", "alpha")),
                ("c2", filler_kb("b", "bravo")),
                ("c3", filler_kb("c", "charlie")),
            ],
        );
        let embedder = HashEmbedder::new(32, 0);
        let dataset = load_dataset(dir.path(), &embedder).unwrap();
        assert_eq!(dataset.claims.len(), 3);
        assert_eq!(dataset.kbs.len(), 3);
        assert_eq!(dataset.total_evidences(), 30);
        assert_eq!(dataset.targetable_count(), 2);
        assert!(dataset.kb("c1").unwrap().len() == 10);
        assert!(dataset.kb("missing").is_err());
    }

    #[test]
    fn dataset_errors_name_file_and_line() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[("c1", "text", "supported")], &[("c1", filler_kb("a", "x"))]);
        let kb_path = dir.path().join("kb/c1.jsonl");
        let good = std::fs::read_to_string(&kb_path).unwrap();
        std::fs::write(&kb_path, good.replacen("{\"evidence_id", "{broken", 1)).unwrap();
        let embedder = HashEmbedder::new(32, 0);
        match load_dataset(dir.path(), &embedder) {
            Err(Error::DatasetSchema { file, line, .. }) => {
                assert!(file.ends_with("c1.jsonl"));
                assert_eq!(line, 1);
            }
            other => panic!("expected a schema error, got {other:?}"),
        }

        std::fs::write(dir.path().join("claims.json"), "not json").unwrap();
        assert!(matches!(load_dataset(dir.path(), &embedder), Err(Error::DatasetSchema { .. })));
    }

    #[test]
    fn dataset_rejects_duplicate_evidence_ids() {
        let dir = tempfile::tempdir().unwrap();
        let mut kb = filler_kb("a", "vocab");
        kb[3].0 = kb[2].0.clone();
        write_dataset(dir.path(), &[("c1", "text", "supported")], &[("c1", kb)]);
        let embedder = HashEmbedder::new(32, 0);
        let err = load_dataset(dir.path(), &embedder).unwrap_err();
        assert!(err.to_string().contains("c1"), "error should name the claim: {err}");
    }

    fn correctness_rules(wrong_claim_text: &str) -> ScriptedBackend {
        ScriptedBackend::new(
            vec![Rule::contains(wrong_claim_text, "contradicted\nVERDICT: Refuted")],
            "fine\nVERDICT: Supported",
        )
    }

    #[test]
    fn eval_set_keeps_only_correct_targetable_claims() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &[
                ("c1", "first claim text", "supported"),
                ("c2", "second claim text", "refuted"),
                ("c3", "third claim text", "supported"),
                ("c4", "fourth claim text", "not_enough_evidence"),
            ],
            &[
                ("c1", filler_kb("a", "alpha")),
                ("c2", filler_kb("b", "bravo")),
                ("c3", filler_kb("c", "charlie")),
                ("c4", filler_kb("d", "delta")),
            ],
        );
        let embedder = HashEmbedder::new(32, 0);
        let dataset = load_dataset(dir.path(), &embedder).unwrap();
        // wrong on c3 (gold supported, scripted refuted); right on c2 via the
        // same rule (gold refuted)
        let backend = ScriptedBackend::new(
            vec![
                Rule::contains("second claim text", "contradicted\nVERDICT: Refuted"),
                Rule::contains("third claim text", "contradicted\nVERDICT: Refuted"),
            ],
            "fine\nVERDICT: Supported",
        );
        let config = scripted_config(dir.path(), Path::new("unused"), "none", 0.01);
        let eval = build_eval_set(&dataset, &config, &backend, &embedder, None).unwrap();
        let ids: Vec<&str> = eval.claims.iter().map(|c| c.id.as_str()).collect();
        assert_eq!(ids, vec!["c1", "c2"]);
        assert!(eval.probes.contains_key("c1") && eval.probes.contains_key("c2"));
        assert_eq!(eval.excluded.len(), 2);
        assert!(eval.excluded.iter().any(|(id, r)| id == "c4" && r.contains("not targetable")));
        assert!(eval.excluded.iter().any(|(id, r)| id == "c3" && r.contains("disagrees")));
        assert!(eval.warnings.is_empty());
    }

    #[test]
    fn empty_eval_set_warns() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[("c1", "only claim", "supported")], &[("c1", filler_kb("a", "x"))]);
        let embedder = HashEmbedder::new(32, 0);
        let dataset = load_dataset(dir.path(), &embedder).unwrap();
        let backend = correctness_rules("only claim");
        let config = scripted_config(dir.path(), Path::new("unused"), "none", 0.01);
        let eval = build_eval_set(&dataset, &config, &backend, &embedder, None).unwrap();
        assert!(eval.claims.is_empty());
        assert_eq!(eval.warnings.len(), 1);
    }

    struct CountingBackend<'a> {
        inner: &'a dyn Backend,
        calls: AtomicUsize,
    }

    impl Backend for CountingBackend<'_> {
        fn name(&self) -> &str {
            self.inner.name()
        }
        fn raw_complete(&self, request: &CompletionRequest) -> Result<String> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.raw_complete(request)
        }
    }

    #[test]
    fn probe_cache_prevents_reprobing() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &[("c1", "cached claim", "supported")], &[("c1", filler_kb("a", "x"))]);
        let embedder = HashEmbedder::new(32, 0);
        let dataset = load_dataset(dir.path(), &embedder).unwrap();
        let scripted = ScriptedBackend::new(vec![], "fine\nVERDICT: Supported");
        let cache_dir = tempfile::tempdir().unwrap();
        let cache = ProbeCache::new(cache_dir.path()).unwrap();
        let config = scripted_config(dir.path(), Path::new("unused"), "none", 0.01);

        let first = CountingBackend { inner: &scripted, calls: AtomicUsize::new(0) };
        let eval = build_eval_set(&dataset, &config, &first, &embedder, Some(&cache)).unwrap();
        assert_eq!(eval.claims.len(), 1);
        assert!(first.calls.load(Ordering::SeqCst) > 0);

        let second = CountingBackend { inner: &scripted, calls: AtomicUsize::new(0) };
        let eval = build_eval_set(&dataset, &config, &second, &embedder, Some(&cache)).unwrap();
        assert_eq!(eval.claims.len(), 1);
        assert_eq!(second.calls.load(Ordering::SeqCst), 0, "second pass served from cache");
    }

    fn result_row(
        claim_id: &str,
        outcome: OutcomeClass,
        retrieved_total: usize,
        retrieved_malicious: usize,
    ) -> ClaimResult {
        let post = match outcome {
            OutcomeClass::Inverted => VeracityLabel::Refuted,
            OutcomeClass::Unchanged => VeracityLabel::Supported,
            OutcomeClass::Degraded => VeracityLabel::NotEnoughEvidence,
        };
        ClaimResult {
            claim_id: claim_id.to_string(),
            trial: 0,
            rate: 0.01,
            gold: VeracityLabel::Supported,
            pre_verdict: VeracityLabel::Supported,
            post_verdict: post,
            outcome,
            injected_count: 1,
            retrieved_total,
            retrieved_malicious,
        }
    }

    #[test]
    fn metrics_match_hand_arithmetic() {
        let results = vec![
            result_row("c1", OutcomeClass::Inverted, 10, 4),
            result_row("c2", OutcomeClass::Degraded, 10, 0),
            result_row("c3", OutcomeClass::Unchanged, 0, 0),
            result_row("c4", OutcomeClass::Inverted, 0, 0),
        ];
        let summary = compute_metrics(&results).unwrap();
        assert_eq!(summary.n_claims, 4);
        assert!((summary.asr - 0.5).abs() < 1e-12);
        assert!((summary.sfr - 0.75).abs() < 1e-12);
        assert!((summary.sir - 0.2).abs() < 1e-12);
        assert_eq!(summary.per_rate.len(), 1);
        assert!((summary.per_claim_sir["c1"] - 0.4).abs() < 1e-12);
        assert_eq!(summary.per_claim_sir["c3"], 0.0);

        assert!(matches!(compute_metrics(&[]), Err(Error::EmptyResults)));
    }

    #[test]
    fn metrics_asr_never_exceeds_sfr() {
        let mut state = 0x1234_5678_9abc_def0u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state
        };
        for _ in 0..200 {
            let n = (next() % 20 + 1) as usize;
            let results: Vec<ClaimResult> = (0..n)
                .map(|i| {
                    let outcome = match next() % 3 {
                        0 => OutcomeClass::Inverted,
                        1 => OutcomeClass::Degraded,
                        _ => OutcomeClass::Unchanged,
                    };
                    let total = (next() % 10) as usize;
                    let mal = if total == 0 { 0 } else { (next() % (total as u64 + 1)) as usize };
                    result_row(&format!("c{i}"), outcome, total, mal)
                })
                .collect();
            let summary = compute_metrics(&results).unwrap();
            assert!(summary.asr <= summary.sfr + 1e-15);
        }
    }

    #[test]
    fn metrics_reject_inconsistent_rows() {
        let mut bad = result_row("c1", OutcomeClass::Inverted, 5, 6);
        assert!(compute_metrics(std::slice::from_ref(&bad)).is_err());
        bad = result_row("c1", OutcomeClass::Inverted, 5, 0);
        bad.outcome = OutcomeClass::Unchanged;
        assert!(compute_metrics(std::slice::from_ref(&bad)).is_err());
    }

    #[test]
    fn end_to_end_flip_scenario_matches_prediction() {
        let dir = tempfile::tempdir().unwrap();
        flip_scenario(dir.path());
        let rules_path = dir.path().join("rules.json");
        std::fs::write(&rules_path, flip_rules().to_string()).unwrap();
        let config = scripted_config(dir.path(), &rules_path, "naive", 0.01);

        let run = run_experiment(&config).unwrap();
        assert_eq!(run.eval_size, 3);
        assert_eq!(run.results.len(), 3);
        for r in &run.results {
            assert_eq!(r.injected_count, 1, "m = max(1, round(0.01 * 10))");
            assert_eq!(r.pre_verdict, VeracityLabel::Supported);
            assert!(r.retrieved_malicious <= r.retrieved_total);
        }
        // c1/c2: the injected claim-echo out-ranks the disjoint-vocab clean
        // entries; c3's verbatim clean copies sit at distance zero
        let by_id: BTreeMap<&str, &ClaimResult> =
            run.results.iter().map(|r| (r.claim_id.as_str(), r)).collect();
        assert_eq!(by_id["c1"].outcome, OutcomeClass::Inverted);
        assert_eq!(by_id["c2"].outcome, OutcomeClass::Inverted);
        assert_eq!(by_id["c3"].outcome, OutcomeClass::Unchanged);
        assert_eq!(by_id["c1"].retrieved_malicious, 1);
        assert_eq!(by_id["c3"].retrieved_malicious, 0);
        assert!((run.summary.asr - 2.0 / 3.0).abs() < 1e-12);
        assert!((run.summary.sfr - 2.0 / 3.0).abs() < 1e-12);
        assert!((run.summary.sir - 2.0 / 15.0).abs() < 1e-12);
        assert!(run.failures.is_empty());
    }

    #[test]
    fn runs_are_reproducible_and_concurrency_invariant() {
        let dir = tempfile::tempdir().unwrap();
        flip_scenario(dir.path());
        let rules_path = dir.path().join("rules.json");
        std::fs::write(&rules_path, flip_rules().to_string()).unwrap();
        let config = scripted_config(dir.path(), &rules_path, "naive", 0.01);

        let a = run_experiment(&config).unwrap();
        let b = run_experiment(&config).unwrap();
        let mut serial = config.clone();
        serial.concurrency = 1;
        let c = run_experiment(&serial).unwrap();
        let json = |r: &ExperimentRun| serde_json::to_string(&r.results).unwrap();
        assert_eq!(json(&a), json(&b));
        assert_eq!(json(&a), json(&c));
    }

    #[test]
    fn no_attack_means_no_malicious_retrievals() {
        let dir = tempfile::tempdir().unwrap();
        flip_scenario(dir.path());
        let rules_path = dir.path().join("rules.json");
        std::fs::write(&rules_path, flip_rules().to_string()).unwrap();
        let config = scripted_config(dir.path(), &rules_path, "none", 0.01);

        let run = run_experiment(&config).unwrap();
        assert_eq!(run.summary.asr, 0.0);
        assert_eq!(run.summary.sfr, 0.0);
        assert_eq!(run.summary.sir, 0.0);
        for r in &run.results {
            assert_eq!(r.injected_count, 0);
            assert_eq!(r.outcome, OutcomeClass::Unchanged);
        }
    }

    #[test]
    fn paraphrase_defense_redirects_the_retrieval_query() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(
            dir.path(),
            &[("c1", "alpha bravo charlie delta", "supported")],
            &[("c1", filler_kb("a", "zulu yankee xray whiskey"))],
        );
        let rules_path = dir.path().join("rules.json");
        let mut rules = flip_rules();
        rules["rules"]
            .as_array_mut()
            .unwrap()
            .insert(0, serde_json::json!({
                "contains": "Reply with the paraphrased claim only.",
                "response": "zulu yankee xray whiskey"
            }));
        std::fs::write(&rules_path, rules.to_string()).unwrap();

        let mut config = scripted_config(dir.path(), &rules_path, "naive", 0.01);
        let undefended = run_experiment(&config).unwrap();
        assert_eq!(undefended.summary.asr, 1.0);

        config.defense.paraphrase = true;
        let defended = run_experiment(&config).unwrap();
        assert_eq!(defended.summary.asr, 0.0, "paraphrased query retrieves only clean evidence");
        assert_eq!(defended.summary.sir, 0.0);
        assert_eq!(defended.results[0].pre_verdict, VeracityLabel::Supported);
    }

    struct PoisonSensitiveBackend {
        inner: ScriptedBackend,
        fail_marker: String,
    }

    impl Backend for PoisonSensitiveBackend {
        fn name(&self) -> &str {
            "poison-sensitive"
        }
        fn raw_complete(&self, request: &CompletionRequest) -> Result<String> {
            if request.prompt.contains(&self.fail_marker) {
                return Err(Error::Transport("synthetic outage".into()));
            }
            self.inner.raw_complete(request)
        }
    }

    #[test]
    fn too_many_claim_failures_abort_the_run() {
        let dir = tempfile::tempdir().unwrap();
        flip_scenario(dir.path());
        let embedder = HashEmbedder::new(64, 0);
        let dataset = load_dataset(dir.path(), &embedder).unwrap();
        let backend = PoisonSensitiveBackend {
            inner: ScriptedBackend::new(vec![], "fine\nVERDICT: Supported"),
            // fires only once the naive attack has injected this text
            fail_marker: "is inaccurate".into(),
        };
        let config = scripted_config(dir.path(), Path::new("unused"), "naive", 0.01);
        let eval = build_eval_set(&dataset, &config, &backend, &embedder, None).unwrap();
        assert_eq!(eval.claims.len(), 3, "probes see no poison and succeed");
        let bench = Workbench {
            backend: Box::new(backend),
            embedder: Box::new(embedder),
            dataset,
            eval,
        };
        // c3's clean copies out-rank its malicious entry, so that job alone
        // succeeds
        match run_cell(&bench, &config, None, false) {
            Err(Error::TooManyClaimFailures { failed, total }) => {
                assert_eq!((failed, total), (2, 3));
            }
            other => panic!("expected an abort, got {other:?}"),
        }
    }

    #[test]
    fn failures_below_the_threshold_are_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let claims: Vec<(String, String, &str)> = (0..11)
            .map(|i| (format!("c{i:02}"), format!("claim number {i} reads qq{i} ww{i}"), "supported"))
            .collect();
        let claim_refs: Vec<(&str, &str, &str)> =
            claims.iter().map(|(id, text, label)| (id.as_str(), text.as_str(), *label)).collect();
        let kbs: Vec<(&str, Vec<(String, String)>)> =
            claims.iter().map(|(id, _, _)| (id.as_str(), filler_kb("a", "filler vocab"))).collect();
        write_dataset(dir.path(), &claim_refs, &kbs);

        let embedder = HashEmbedder::new(64, 0);
        let dataset = load_dataset(dir.path(), &embedder).unwrap();
        let backend = PoisonSensitiveBackend {
            inner: ScriptedBackend::new(vec![], "fine\nVERDICT: Supported"),
            fail_marker: "qq3 ww3 is".into(),
        };
        let config = scripted_config(dir.path(), Path::new("unused"), "naive", 0.01);
        let eval = build_eval_set(&dataset, &config, &backend, &embedder, None).unwrap();
        assert_eq!(eval.claims.len(), 11);
        let bench = Workbench { backend: Box::new(backend), embedder: Box::new(embedder), dataset, eval };
        let cell = run_cell(&bench, &config, None, false).unwrap();
        assert_eq!(cell.results.len(), 10);
        assert_eq!(cell.failures.len(), 1);
        assert_eq!(cell.failures[0].0, "c03");
        assert!(cell.warnings.iter().any(|w| w.contains("c03")));
    }

    #[test]
    fn job_records_capture_reports_and_transcripts() {
        let dir = tempfile::tempdir().unwrap();
        flip_scenario(dir.path());
        let rules_path = dir.path().join("rules.json");
        std::fs::write(&rules_path, flip_rules().to_string()).unwrap();
        let config = scripted_config(dir.path(), &rules_path, "naive", 0.01);
        let bench = Workbench::prepare(&config, None).unwrap();
        let reports = dir.path().join("reports");
        let cell = run_cell(&bench, &config, Some(&reports), true).unwrap();
        assert_eq!(cell.results.len(), 3);
        let record: JobRecord = serde_json::from_str(
            &std::fs::read_to_string(reports.join("c1-t0.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(record.result.claim_id, "c1");
        assert!(!record.report.retrieval_log.is_empty());
        let transcript = record.transcript.unwrap();
        assert!(!transcript.is_empty());
        assert!(transcript[0].prompt.contains("alpha bravo charlie delta"));
    }

    #[test]
    fn bootstrap_matches_expected_endpoints() {
        let ones = vec![true; 20];
        let zeros = vec![false; 20];
        assert_eq!(paired_bootstrap(&ones, &zeros, 10_000, 3).unwrap(), 0.0);
        assert_eq!(paired_bootstrap(&ones, &ones, 1000, 3).unwrap(), 1.0);
        assert_eq!(paired_bootstrap(&zeros, &ones, 1000, 3).unwrap(), 1.0);

        let a = vec![true, true, false, true];
        let b = vec![true, false, false, false];
        let p1 = paired_bootstrap(&a, &b, 2000, 11).unwrap();
        let p2 = paired_bootstrap(&a, &b, 2000, 11).unwrap();
        assert_eq!(p1, p2, "seeded runs are bit-identical");
        assert!(p1 > 0.0 && p1 < 0.5, "a clearly beats b but ties exist: {p1}");
    }

    #[test]
    fn bootstrap_rejects_bad_input() {
        let a = vec![true, false];
        assert!(matches!(
            paired_bootstrap(&a, &[true], 1000, 0),
            Err(Error::BootstrapInput { a: 2, b: 1 })
        ));
        assert!(matches!(
            paired_bootstrap(&[true], &[false], 1000, 0),
            Err(Error::BootstrapInput { .. })
        ));
        assert!(matches!(
            paired_bootstrap(&a, &a, 999, 0),
            Err(Error::TooFewResamples(999))
        ));
    }

    #[test]
    fn paired_success_aligns_on_common_keys() {
        let a = vec![
            result_row("c1", OutcomeClass::Inverted, 5, 1),
            result_row("c2", OutcomeClass::Unchanged, 5, 0),
            result_row("c3", OutcomeClass::Inverted, 5, 1),
        ];
        let b = vec![
            result_row("c3", OutcomeClass::Unchanged, 5, 0),
            result_row("c1", OutcomeClass::Unchanged, 5, 0),
            result_row("c2", OutcomeClass::Inverted, 5, 1),
        ];
        let (va, vb) = paired_success(&a, &b).unwrap();
        assert_eq!(va, vec![true, false, true]);
        assert_eq!(vb, vec![false, true, false]);
        assert_eq!(success_indicators(&a), vec![true, false, true]);
        assert!(paired_success(&a[..1], &b[..1]).is_err(), "one common key is too few");
    }

    #[test]
    fn claims_jsonl_round_trips() {
        let results = vec![
            result_row("c1", OutcomeClass::Inverted, 5, 2),
            result_row("c2", OutcomeClass::Unchanged, 5, 0),
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("claims.jsonl");
        write_claims_jsonl(&results, &path).unwrap();
        assert_eq!(read_claims_jsonl(&path).unwrap(), results);
    }

    #[test]
    fn summary_csv_renders_fixed_columns() {
        let rows = vec![SummaryRow {
            attack: "naive".into(),
            victim: "simple".into(),
            defense: "none".into(),
            rate: 0.01,
            asr: 2.0 / 3.0,
            sfr: 2.0 / 3.0,
            sir: 2.0 / 15.0,
            n: 3,
        }];
        assert_eq!(
            summary_csv(&rows),
            "attack,victim,defense,rate,asr,sfr,sir,n\nnaive,simple,none,0.01,0.666667,0.666667,0.133333,3\n"
        );
    }

    #[test]
    fn attack_names_parse_and_round_trip() {
        assert!(parse_attack("none").unwrap().is_none());
        for name in [
            "naive",
            "prompt_injection",
            "disinformation",
            "poisonedrag",
            "fact2fiction",
            "fact2fiction-noanswer",
            "fact2fiction-nobudget",
            "fact2fiction-noquery",
            "fact2fiction-noanswer-nobudget-noquery",
        ] {
            let kind = parse_attack(name).unwrap().unwrap();
            assert_eq!(kind.name(), name);
        }
        assert!(parse_attack("fact2fiction-bogus").is_err());
        assert!(parse_attack("unknown").is_err());
    }

    #[test]
    fn config_validation_enforces_ranges() {
        let dir = tempfile::tempdir().unwrap();
        let base = scripted_config(dir.path(), Path::new("r.json"), "naive", 0.01);
        assert!(base.validate().is_ok());

        let mut bad = base.clone();
        bad.poison_rate = 0.25;
        assert!(bad.validate().is_err());
        bad.poison_rate = 0.2;
        assert!(bad.validate().is_ok());

        let mut bad = base.clone();
        bad.k = 0;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.max_questions = 11;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.trials = 0;
        assert!(bad.validate().is_err());
        let mut bad = base.clone();
        bad.attack = "mystery".into();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_serializes_with_tagged_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let config = scripted_config(dir.path(), Path::new("rules.json"), "fact2fiction", 0.02);
        let json = serde_json::to_value(&config).unwrap();
        assert_eq!(json["backend"]["kind"], "scripted");
        assert_eq!(json["embedder"]["kind"], "hash");
        let back: ExperimentConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, config);
    }
}
