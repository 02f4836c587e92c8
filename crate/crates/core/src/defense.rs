//! Defenses against knowledge-base poisoning.
//!
//! Three composable stages: claim paraphrasing before the check, k-means
//! cluster filtering per retrieval, and perplexity filtering per retrieval.
//! When several are enabled they run in that fixed order.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Claim, Evidence, Provenance};
use crate::error::{Error, Result};
use crate::llm::{complete, render_prompt, template, Backend, CompletionRequest, LiveConfig, TemplateId};
use crate::retrieval::{EmbeddingVector, KnowledgeBase};
use crate::victim::{DroppedEvidence, EvidenceFilter, FilterOutcome};

/// Reason code recorded for evidences dropped by the cluster filter.
pub const REASON_CLUSTER: &str = "cluster_density";
/// Reason code recorded for evidences dropped by the perplexity filter.
pub const REASON_PERPLEXITY: &str = "high_perplexity";

const DENSITY_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterFilterConfig {
    /// Cluster count. The defense is defined for exactly two clusters.
    pub k: usize,
    /// Mean-distance ratio between the sparser and denser cluster at which
    /// the denser one is dropped.
    pub density_ratio_threshold: f64,
    pub max_iters: usize,
    pub seed: u64,
}

impl Default for ClusterFilterConfig {
    fn default() -> Self {
        ClusterFilterConfig { k: 2, density_ratio_threshold: 2.0, max_iters: 50, seed: 0 }
    }
}

impl ClusterFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k != 2 {
            return Err(Error::InvalidConfig(format!("cluster filter requires k = 2, got {}", self.k)));
        }
        if self.density_ratio_threshold.is_nan() || self.density_ratio_threshold <= 1.0 {
            return Err(Error::InvalidConfig(format!(
                "density ratio threshold must exceed 1, got {}",
                self.density_ratio_threshold
            )));
        }
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("cluster filter needs at least one iteration".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplFilterConfig {
    /// Quantile of the per-retrieval score distribution used as the drop
    /// threshold; scores strictly above it are dropped.
    pub threshold_quantile: f64,
}

impl Default for PplFilterConfig {
    fn default() -> Self {
        PplFilterConfig { threshold_quantile: 0.9 }
    }
}

impl PplFilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "perplexity threshold quantile must be in (0, 1], got {}",
                self.threshold_quantile
            )));
        }
        Ok(())
    }
}

/// Which defenses an experiment enables. Paraphrasing transforms the claim
/// before the check; the other two filter each retrieved set.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DefenseConfig {
    #[serde(default)]
    pub paraphrase: bool,
    #[serde(default)]
    pub cluster: Option<ClusterFilterConfig>,
    #[serde(default)]
    pub ppl: Option<PplFilterConfig>,
}

impl DefenseConfig {
    pub fn none() -> Self {
        DefenseConfig::default()
    }

    pub fn is_none(&self) -> bool {
        !self.paraphrase && self.cluster.is_none() && self.ppl.is_none()
    }

    /// Short label for result tables, stage names joined in pipeline order.
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.paraphrase {
            parts.push("paraphrase");
        }
        if self.cluster.is_some() {
            parts.push("cluster_filter");
        }
        if self.ppl.is_some() {
            parts.push("ppl_filter");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(cluster) = &self.cluster {
            cluster.validate()?;
        }
        if let Some(ppl) = &self.ppl {
            ppl.validate()?;
        }
        Ok(())
    }
}

/// Re-check the claim under a paraphrase: same id and gold label, new text.
pub fn paraphrase_claim(claim: &Claim, backend: &dyn Backend) -> Result<Claim> {
    let prompt = render_prompt(template(TemplateId::Paraphrase), &[("CLAIM", claim.text.as_str())])?;
    let reply = complete(backend, &CompletionRequest::new(prompt))?;
    let mut paraphrased = Claim::new(claim.id.clone(), reply.trim(), claim.gold_label)?;
    paraphrased.date = claim.date.clone();
    paraphrased.speaker = claim.speaker.clone();
    Ok(paraphrased)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Kmeans2Result {
    /// Cluster index (0 or 1) per input vector.
    pub assignments: Vec<usize>,
    pub centroids: [EmbeddingVector; 2],
    /// Objective (sum of squared distances to the assigned centroid) after
    /// each assignment step; non-increasing.
    pub objective_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest_centroid(v: &EmbeddingVector, centroids: &[EmbeddingVector; 2]) -> usize {
    let d0 = v.squared_distance(&centroids[0]);
    let d1 = v.squared_distance(&centroids[1]);
    usize::from(d1 < d0)
}

fn mean_vector(vectors: &[EmbeddingVector], members: &[usize]) -> EmbeddingVector {
    let dim = vectors[members[0]].dim();
    let mut sums = vec![0.0; dim];
    for &i in members {
        for (s, x) in sums.iter_mut().zip(vectors[i].as_slice()) {
            *s += x;
        }
    }
    let n = members.len() as f64;
    EmbeddingVector::new(sums.into_iter().map(|s| s / n).collect())
        .expect("mean of finite vectors is finite")
}

/// Two-way k-means with Lloyd's iteration. Centroids start at a farthest
/// pair (exact ties broken by the seeded RNG), and a cluster left empty by
/// an assignment step is re-seeded to the point farthest from the other
/// centroid.
pub fn kmeans2(vectors: &[EmbeddingVector], cfg: &ClusterFilterConfig) -> Result<Kmeans2Result> {
    cfg.validate()?;
    let n = vectors.len();
    if n < 2 {
        return Err(Error::TooFewVectors(n));
    }
    let dim = vectors[0].dim();
    for v in vectors {
        if v.dim() != dim {
            return Err(Error::DimMismatch { expected: dim, got: v.dim() });
        }
    }

    let mut best_pairs: Vec<(usize, usize)> = Vec::new();
    let mut best = f64::NEG_INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = vectors[i].squared_distance(&vectors[j]);
            if d > best {
                best = d;
                best_pairs.clear();
            }
            if d == best {
                best_pairs.push((i, j));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (a, b) = best_pairs[rng.random_range(0..best_pairs.len())];
    let mut centroids = [vectors[a].clone(), vectors[b].clone()];

    let mut assignments: Vec<usize> = vec![0; n];
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let fresh: Vec<usize> = vectors.iter().map(|v| nearest_centroid(v, &centroids)).collect();
        let mut fresh = fresh;
        for cluster in 0..2 {
            if fresh.contains(&cluster) {
                continue;
            }
            let other = &centroids[1 - cluster];
            let far = (0..n)
                .max_by(|&i, &j| {
                    vectors[i]
                        .squared_distance(other)
                        .total_cmp(&vectors[j].squared_distance(other))
                })
                .expect("at least two vectors");
            centroids[cluster] = vectors[far].clone();
            for (slot, v) in fresh.iter_mut().zip(vectors) {
                *slot = nearest_centroid(v, &centroids);
            }
            if fresh.iter().all(|&c| c != cluster) {
                fresh[far] = cluster;
            }
        }
        let objective: f64 =
            vectors.iter().zip(&fresh).map(|(v, &c)| v.squared_distance(&centroids[c])).sum();
        trace.push(objective);
        let unchanged = iterations > 1 && fresh == assignments;
        assignments = fresh;
        if unchanged {
            converged = true;
            break;
        }
        for (cluster, centroid) in centroids.iter_mut().enumerate() {
            let members: Vec<usize> =
                (0..n).filter(|&i| assignments[i] == cluster).collect();
            *centroid = mean_vector(vectors, &members);
        }
    }

    Ok(Kmeans2Result { assignments, centroids, objective_trace: trace, iterations, converged })
}

fn mean_pairwise_distance(vectors: &[&EmbeddingVector]) -> f64 {
    let n = vectors.len();
    if n < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            total += vectors[i].euclidean_distance(vectors[j]);
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Drop the denser k-means cluster when the retrieved set splits into one
/// tight and one dispersed group. Fewer than three items pass through
/// untouched.
pub fn cluster_filter_outcome(
    retrieved: &[(Evidence, EmbeddingVector)],
    cfg: &ClusterFilterConfig,
) -> Result<FilterOutcome> {
    cfg.validate()?;
    if retrieved.len() < 3 {
        return Ok(FilterOutcome {
            kept: retrieved.iter().map(|(e, _)| e.clone()).collect(),
            dropped: Vec::new(),
        });
    }
    let vectors: Vec<EmbeddingVector> = retrieved.iter().map(|(_, v)| v.clone()).collect();
    let clustering = kmeans2(&vectors, cfg)?;
    let cluster_refs = |cluster: usize| -> Vec<&EmbeddingVector> {
        clustering
            .assignments
            .iter()
            .zip(&vectors)
            .filter(|(&c, _)| c == cluster)
            .map(|(_, v)| v)
            .collect()
    };
    let d = [mean_pairwise_distance(&cluster_refs(0)), mean_pairwise_distance(&cluster_refs(1))];
    let (sparse, dense) = if d[0] >= d[1] { (d[0], d[1]) } else { (d[1], d[0]) };
    let ratio = sparse / dense.max(DENSITY_EPSILON);
    if ratio < cfg.density_ratio_threshold {
        return Ok(FilterOutcome {
            kept: retrieved.iter().map(|(e, _)| e.clone()).collect(),
            dropped: Vec::new(),
        });
    }
    let denser_cluster = usize::from(d[1] < d[0]);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for ((evidence, _), &cluster) in retrieved.iter().zip(&clustering.assignments) {
        if cluster == denser_cluster {
            dropped.push(DroppedEvidence { id: evidence.id.clone(), reason: REASON_CLUSTER.into() });
        } else {
            kept.push(evidence.clone());
        }
    }
    Ok(FilterOutcome { kept, dropped })
}

pub fn cluster_filter(
    retrieved: &[(Evidence, EmbeddingVector)],
    cfg: &ClusterFilterConfig,
) -> Result<Vec<Evidence>> {
    Ok(cluster_filter_outcome(retrieved, cfg)?.kept)
}

/// Text naturalness scorer; lower scores mean more natural text.
pub trait PerplexityScorer: Send + Sync {
    fn name(&self) -> &str;
    /// Finite positive score, deterministic per implementation.
    fn score(&self, text: &str) -> Result<f64>;
}

const START_SYMBOL: usize = usize::MAX;

/// Character-bigram language model with add-one smoothing, fit on a claim's
/// clean knowledge base. Scores are mean negative log-likelihood per
/// character.
#[derive(Debug, Clone)]
pub struct BigramScorer {
    vocab: HashMap<char, usize>,
    pair_counts: HashMap<(usize, usize), u64>,
    context_totals: HashMap<usize, u64>,
}

impl BigramScorer {
    pub fn fit<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<BigramScorer> {
        let mut vocab = HashMap::new();
        let mut pair_counts = HashMap::new();
        let mut context_totals = HashMap::new();
        let mut saw_text = false;
        for text in texts {
            saw_text = true;
            let mut prev = START_SYMBOL;
            for ch in text.chars() {
                let next_id = vocab.len();
                let id = *vocab.entry(ch).or_insert(next_id);
                *pair_counts.entry((prev, id)).or_insert(0) += 1;
                *context_totals.entry(prev).or_insert(0) += 1;
                prev = id;
            }
        }
        if !saw_text || vocab.is_empty() {
            return Err(Error::InvalidConfig("perplexity scorer needs a non-empty training corpus".into()));
        }
        Ok(BigramScorer { vocab, pair_counts, context_totals })
    }

    /// Fit on the clean entries of a knowledge base.
    pub fn fit_on_kb(kb: &KnowledgeBase) -> Result<BigramScorer> {
        BigramScorer::fit(
            kb.entries()
                .iter()
                .filter(|e| matches!(e.evidence.provenance, Provenance::Clean))
                .map(|e| e.evidence.text.as_str()),
        )
    }

    fn symbol(&self, ch: char) -> usize {
        // unseen characters share one out-of-vocabulary id
        self.vocab.get(&ch).copied().unwrap_or(self.vocab.len())
    }
}

impl PerplexityScorer for BigramScorer {
    fn name(&self) -> &str {
        "char-bigram"
    }

    fn score(&self, text: &str) -> Result<f64> {
        let alphabet = (self.vocab.len() + 1) as f64;
        let mut loss = 0.0;
        let mut count = 0u64;
        let mut prev = START_SYMBOL;
        for ch in text.chars() {
            let id = self.symbol(ch);
            let pair = *self.pair_counts.get(&(prev, id)).unwrap_or(&0) as f64;
            let total = *self.context_totals.get(&prev).unwrap_or(&0) as f64;
            loss -= ((pair + 1.0) / (total + alphabet)).ln();
            count += 1;
            prev = id;
        }
        if count == 0 {
            return Ok(alphabet.ln());
        }
        Ok(loss / count as f64)
    }
}

/// Perplexity scorer backed by a completions endpoint that echoes the prompt
/// with token logprobs. Score is mean negative logprob per token.
pub struct RemoteLmScorer {
    cfg: LiveConfig,
    client: reqwest::blocking::Client,
    name: String,
}

impl RemoteLmScorer {
    pub fn new(cfg: LiveConfig) -> Result<RemoteLmScorer> {
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        let name = format!("remote-{}", cfg.model);
        Ok(RemoteLmScorer { cfg, client, name })
    }

    fn endpoint(&self) -> String {
        format!("{}/v1/completions", self.cfg.base_url.trim_end_matches('/'))
    }
}

#[derive(Deserialize)]
struct EchoLogprobs {
    token_logprobs: Vec<Option<f64>>,
}

#[derive(Deserialize)]
struct EchoChoice {
    logprobs: Option<EchoLogprobs>,
}

#[derive(Deserialize)]
struct EchoResponse {
    choices: Vec<EchoChoice>,
}

impl PerplexityScorer for RemoteLmScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, text: &str) -> Result<f64> {
        let payload = serde_json::json!({
            "model": self.cfg.model,
            "prompt": text,
            "max_tokens": 0,
            "echo": true,
            "logprobs": 0,
        });
        let mut request = self.client.post(self.endpoint()).json(&payload);
        if let Some(key) = &self.cfg.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = response.status();
        let body = response.text().map_err(|e| Error::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(Error::RateLimited);
        }
        if status.is_server_error() {
            return Err(Error::Transport(format!("server error {status}: {body}")));
        }
        if !status.is_success() {
            return Err(Error::Rejected { status: status.as_u16(), body });
        }
        let parsed: EchoResponse =
            serde_json::from_str(&body).map_err(|e| Error::MalformedReply(format!("{e}: {body}")))?;
        let logprobs = parsed
            .choices
            .first()
            .and_then(|c| c.logprobs.as_ref())
            .ok_or_else(|| Error::MalformedReply("completion carried no logprobs".into()))?;
        let mut total = 0.0;
        let mut count = 0u64;
        for lp in logprobs.token_logprobs.iter().flatten() {
            total -= lp;
            count += 1;
        }
        if count == 0 {
            return Err(Error::MalformedReply("no scored tokens in logprobs".into()));
        }
        let score = total / count as f64;
        if !score.is_finite() {
            return Err(Error::MalformedReply(format!("non-finite perplexity score {score}")));
        }
        Ok(score)
    }
}

/// Drop evidences whose perplexity score strictly exceeds the given quantile
/// of the current set's scores. Survivor order is preserved.
pub fn ppl_filter_outcome(
    evidences: &[Evidence],
    scorer: &dyn PerplexityScorer,
    threshold_quantile: f64,
) -> Result<FilterOutcome> {
    PplFilterConfig { threshold_quantile }.validate()?;
    if evidences.is_empty() {
        return Ok(FilterOutcome { kept: Vec::new(), dropped: Vec::new() });
    }
    let scores: Vec<f64> =
        evidences.iter().map(|e| scorer.score(&e.text)).collect::<Result<_>>()?;
    let mut sorted = scores.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let index = ((threshold_quantile * sorted.len() as f64).ceil() as usize).max(1) - 1;
    let threshold = sorted[index];
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (evidence, score) in evidences.iter().zip(&scores) {
        if *score > threshold {
            dropped.push(DroppedEvidence { id: evidence.id.clone(), reason: REASON_PERPLEXITY.into() });
        } else {
            kept.push(evidence.clone());
        }
    }
    Ok(FilterOutcome { kept, dropped })
}

pub fn ppl_filter(
    evidences: &[Evidence],
    scorer: &dyn PerplexityScorer,
    threshold_quantile: f64,
) -> Result<Vec<Evidence>> {
    Ok(ppl_filter_outcome(evidences, scorer, threshold_quantile)?.kept)
}

/// Per-retrieval defense stages wired into the victim as an evidence
/// filter: cluster filtering first, then perplexity filtering on the
/// survivors.
pub struct DefensePipeline<'a> {
    cluster: Option<ClusterFilterConfig>,
    ppl: Option<(&'a dyn PerplexityScorer, f64)>,
}

impl<'a> DefensePipeline<'a> {
    /// `scorer` is required when the config enables the perplexity filter.
    pub fn new(cfg: &DefenseConfig, scorer: Option<&'a dyn PerplexityScorer>) -> Result<Self> {
        cfg.validate()?;
        let ppl = match (&cfg.ppl, scorer) {
            (Some(ppl_cfg), Some(scorer)) => Some((scorer, ppl_cfg.threshold_quantile)),
            (Some(_), None) => {
                return Err(Error::InvalidConfig(
                    "perplexity filter enabled but no scorer was provided".into(),
                ))
            }
            (None, _) => None,
        };
        Ok(DefensePipeline { cluster: cfg.cluster, ppl })
    }

    pub fn is_empty(&self) -> bool {
        self.cluster.is_none() && self.ppl.is_none()
    }
}

impl EvidenceFilter for DefensePipeline<'_> {
    fn apply(&self, items: &[(Evidence, EmbeddingVector)]) -> Result<FilterOutcome> {
        let mut dropped = Vec::new();
        let mut kept: Vec<Evidence> = match &self.cluster {
            Some(cfg) => {
                let outcome = cluster_filter_outcome(items, cfg)?;
                dropped.extend(outcome.dropped);
                outcome.kept
            }
            None => items.iter().map(|(e, _)| e.clone()).collect(),
        };
        if let Some((scorer, quantile)) = &self.ppl {
            let outcome = ppl_filter_outcome(&kept, *scorer, *quantile)?;
            dropped.extend(outcome.dropped);
            kept = outcome.kept;
        }
        Ok(FilterOutcome { kept, dropped })
    }
}
