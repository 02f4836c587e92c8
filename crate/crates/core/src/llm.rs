//! Prompt templates and LLM backends.
//!
//! Every completion in the workspace goes through [`complete`], which
//! accepts either the deterministic [`ScriptedBackend`] (rule-based, for
//! tests and desk-scale runs) or the live [`HttpBackend`] speaking the
//! OpenAI-compatible chat protocol. Templates are shipped as plain-text
//! assets with `[SLOT]` placeholders and rendered in a single pass.

use std::path::Path;
use std::sync::{Condvar, LazyLock, Mutex};
use std::time::{Duration, Instant};

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::domain::VeracityLabel;
use crate::error::{Error, Result};

/// Environment variable holding the live-backend API key. Keys are never
/// read from configuration files.
pub const API_KEY_ENV: &str = "FACTGAUNTLET_API_KEY";

/// Upper bound on search queries kept per sub-question.
pub const MAX_QUERIES: usize = 5;

/// Upper bound on sub-questions kept per claim decomposition.
pub const MAX_QUESTIONS: usize = 10;

// ---------------------------------------------------------------------------
// Templates

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TemplateId {
    Decompose,
    AnswerPlan,
    ImportanceScore,
    QueryPlan,
    ExecutorCorpus,
    SimpleVerdict,
    SubQuestionAnswer,
    Aggregate,
    Paraphrase,
}

impl TemplateId {
    pub fn name(self) -> &'static str {
        match self {
            TemplateId::Decompose => "Decompose",
            TemplateId::AnswerPlan => "AnswerPlan",
            TemplateId::ImportanceScore => "ImportanceScore",
            TemplateId::QueryPlan => "QueryPlan",
            TemplateId::ExecutorCorpus => "ExecutorCorpus",
            TemplateId::SimpleVerdict => "SimpleVerdict",
            TemplateId::SubQuestionAnswer => "SubQuestionAnswer",
            TemplateId::Aggregate => "Aggregate",
            TemplateId::Paraphrase => "Paraphrase",
        }
    }

    pub fn all() -> [TemplateId; 9] {
        [
            TemplateId::Decompose,
            TemplateId::AnswerPlan,
            TemplateId::ImportanceScore,
            TemplateId::QueryPlan,
            TemplateId::ExecutorCorpus,
            TemplateId::SimpleVerdict,
            TemplateId::SubQuestionAnswer,
            TemplateId::Aggregate,
            TemplateId::Paraphrase,
        ]
    }
}

/// A prompt body with `[SLOT]` placeholders and the slots that must be bound
/// before it can be sent.
#[derive(Debug)]
pub struct PromptTemplate {
    pub id: TemplateId,
    pub body: &'static str,
    pub required_slots: &'static [&'static str],
}

static DECOMPOSE: PromptTemplate = PromptTemplate {
    id: TemplateId::Decompose,
    body: include_str!("../assets/prompts/decompose.txt"),
    required_slots: &["CLAIM", "N_QUESTIONS"],
};

static ANSWER_PLAN: PromptTemplate = PromptTemplate {
    id: TemplateId::AnswerPlan,
    body: include_str!("../assets/prompts/answer_plan.txt"),
    required_slots: &["CLAIM", "JUSTIFICATION", "TARGET_VERDICT", "QUESTIONS_LIST", "KEYWORD"],
};

/// Ablation variant of [`TemplateId::AnswerPlan`] that never sees the
/// victim's justification.
static ANSWER_PLAN_UNTARGETED: PromptTemplate = PromptTemplate {
    id: TemplateId::AnswerPlan,
    body: include_str!("../assets/prompts/answer_plan_untargeted.txt"),
    required_slots: &["CLAIM", "TARGET_VERDICT", "QUESTIONS_LIST", "KEYWORD"],
};

static IMPORTANCE_SCORE: PromptTemplate = PromptTemplate {
    id: TemplateId::ImportanceScore,
    body: include_str!("../assets/prompts/importance_score.txt"),
    required_slots: &["CLAIM", "JUSTIFICATION", "ORIGINAL_VERDICT", "QA_LIST", "CURRENT_QUESTION"],
};

static QUERY_PLAN: PromptTemplate = PromptTemplate {
    id: TemplateId::QueryPlan,
    body: include_str!("../assets/prompts/query_plan.txt"),
    required_slots: &["CLAIM", "QUESTION"],
};

static EXECUTOR_CORPUS: PromptTemplate = PromptTemplate {
    id: TemplateId::ExecutorCorpus,
    body: include_str!("../assets/prompts/executor_corpus.txt"),
    required_slots: &["CLAIM", "QUESTION", "ADVERSARIAL_ANSWER", "KEYWORD"],
};

static SIMPLE_VERDICT: PromptTemplate = PromptTemplate {
    id: TemplateId::SimpleVerdict,
    body: include_str!("../assets/prompts/simple_verdict.txt"),
    required_slots: &["CLAIM", "EVIDENCE"],
};

static SUB_QUESTION_ANSWER: PromptTemplate = PromptTemplate {
    id: TemplateId::SubQuestionAnswer,
    body: include_str!("../assets/prompts/sub_question_answer.txt"),
    required_slots: &["CLAIM", "QUESTION", "EVIDENCE"],
};

static AGGREGATE: PromptTemplate = PromptTemplate {
    id: TemplateId::Aggregate,
    body: include_str!("../assets/prompts/aggregate.txt"),
    required_slots: &["CLAIM", "QA_LIST"],
};

static PARAPHRASE: PromptTemplate = PromptTemplate {
    id: TemplateId::Paraphrase,
    body: include_str!("../assets/prompts/paraphrase.txt"),
    required_slots: &["CLAIM"],
};

pub fn template(id: TemplateId) -> &'static PromptTemplate {
    match id {
        TemplateId::Decompose => &DECOMPOSE,
        TemplateId::AnswerPlan => &ANSWER_PLAN,
        TemplateId::ImportanceScore => &IMPORTANCE_SCORE,
        TemplateId::QueryPlan => &QUERY_PLAN,
        TemplateId::ExecutorCorpus => &EXECUTOR_CORPUS,
        TemplateId::SimpleVerdict => &SIMPLE_VERDICT,
        TemplateId::SubQuestionAnswer => &SUB_QUESTION_ANSWER,
        TemplateId::Aggregate => &AGGREGATE,
        TemplateId::Paraphrase => &PARAPHRASE,
    }
}

pub fn answer_plan_untargeted() -> &'static PromptTemplate {
    &ANSWER_PLAN_UNTARGETED
}

static SLOT_RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"\[([A-Z][A-Z0-9_]*)\]").unwrap());

/// Substitute bindings into the template body.
///
/// Replacement is a single pass over the body, so binding values that happen
/// to contain `[SLOT]`-shaped text are kept as data. Unbound non-required
/// slots are left verbatim.
pub fn render_prompt(template: &PromptTemplate, bindings: &[(&str, &str)]) -> Result<String> {
    let missing: Vec<String> = template
        .required_slots
        .iter()
        .filter(|slot| !bindings.iter().any(|(k, _)| k == *slot))
        .map(|s| s.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingSlots { template: template.id.name(), slots: missing });
    }
    let rendered = SLOT_RE.replace_all(template.body, |caps: &regex::Captures| {
        match bindings.iter().find(|(k, _)| *k == &caps[1]) {
            Some((_, v)) => v.to_string(),
            None => caps[0].to_string(),
        }
    });
    Ok(rendered.into_owned())
}

/// `[KEYWORD]` value for the corpus-generation template.
pub fn keyword_short(target: VeracityLabel) -> Result<&'static str> {
    match target {
        VeracityLabel::Supported => Ok("supports"),
        VeracityLabel::Refuted => Ok("refutes"),
        other => Err(Error::InvalidGoldLabel(other)),
    }
}

/// `[KEYWORD]` value for the answer-planning template.
pub fn keyword_long(target: VeracityLabel) -> Result<&'static str> {
    match target {
        VeracityLabel::Supported => Ok("supports (the claim is true)"),
        VeracityLabel::Refuted => Ok("refutes (the claim is false)"),
        other => Err(Error::InvalidGoldLabel(other)),
    }
}

// ---------------------------------------------------------------------------
// Completions

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    pub prompt: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        CompletionRequest { prompt: prompt.into(), temperature: 1.0, max_tokens: 2048, seed: None }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

/// A completion provider. Implementations must tolerate concurrent calls.
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;
    fn raw_complete(&self, request: &CompletionRequest) -> Result<String>;
}

/// Validated completion: non-empty prompt in, non-empty text out.
pub fn complete(backend: &dyn Backend, request: &CompletionRequest) -> Result<String> {
    if request.prompt.is_empty() {
        return Err(Error::EmptyText("completion prompt"));
    }
    if request.temperature.is_nan() || request.temperature < 0.0 || request.max_tokens == 0 {
        return Err(Error::InvalidConfig(format!(
            "completion request needs temperature >= 0 and max_tokens > 0 (got {} / {})",
            request.temperature, request.max_tokens
        )));
    }
    let text = backend.raw_complete(request)?;
    if text.trim().is_empty() {
        return Err(Error::EmptyCompletion);
    }
    Ok(text)
}

// ---------------------------------------------------------------------------
// Scripted backend

#[derive(Debug, Clone)]
pub enum Matcher {
    Contains(String),
    Pattern(Regex),
}

impl Matcher {
    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Matcher::Contains(needle) => prompt.contains(needle.as_str()),
            Matcher::Pattern(re) => re.is_match(prompt),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Rule {
    pub matcher: Matcher,
    pub response: String,
}

impl Rule {
    pub fn contains(needle: impl Into<String>, response: impl Into<String>) -> Rule {
        Rule { matcher: Matcher::Contains(needle.into()), response: response.into() }
    }

    pub fn pattern(pattern: &str, response: impl Into<String>) -> Result<Rule> {
        let re = Regex::new(pattern)
            .map_err(|e| Error::InvalidConfig(format!("bad scripted rule pattern {pattern:?}: {e}")))?;
        Ok(Rule { matcher: Matcher::Pattern(re), response: response.into() })
    }
}

#[derive(Deserialize, Serialize)]
struct RuleSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pattern: Option<String>,
    response: String,
}

#[derive(Deserialize, Serialize)]
struct ScriptSpec {
    rules: Vec<RuleSpec>,
    default_response: String,
}

/// Deterministic rule-based backend: the first rule whose matcher hits the
/// prompt wins; otherwise `default_response` is returned.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    rules: Vec<Rule>,
    default_response: String,
    name: String,
}

impl ScriptedBackend {
    pub fn new(rules: Vec<Rule>, default_response: impl Into<String>) -> Self {
        let default_response = default_response.into();
        // the name fingerprints the rule set so caches keyed on backend
        // identity never serve replies from a different script
        let mut digest = crate::retrieval::fnv1a64(0, default_response.as_bytes());
        for rule in &rules {
            let surface = match &rule.matcher {
                Matcher::Contains(needle) => format!("c:{needle}"),
                Matcher::Pattern(re) => format!("p:{}", re.as_str()),
            };
            digest = crate::retrieval::fnv1a64(digest, surface.as_bytes());
            digest = crate::retrieval::fnv1a64(digest, rule.response.as_bytes());
        }
        let name = format!("scripted-{digest:016x}");
        ScriptedBackend { rules, default_response, name }
    }

    pub fn from_json_str(json: &str) -> Result<Self> {
        let spec: ScriptSpec = serde_json::from_str(json)
            .map_err(|e| Error::InvalidConfig(format!("bad scripted backend rules: {e}")))?;
        let mut rules = Vec::with_capacity(spec.rules.len());
        for (i, r) in spec.rules.into_iter().enumerate() {
            let rule = match (r.contains, r.pattern) {
                (Some(c), None) => Rule::contains(c, r.response),
                (None, Some(p)) => Rule::pattern(&p, r.response)?,
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "scripted rule {i} must set exactly one of `contains` or `pattern`"
                    )))
                }
            };
            rules.push(rule);
        }
        Ok(ScriptedBackend::new(rules, spec.default_response))
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(format!("read scripted rules {}", path.display()), e))?;
        Self::from_json_str(&text)
    }
}

impl Backend for ScriptedBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn raw_complete(&self, request: &CompletionRequest) -> Result<String> {
        for rule in &self.rules {
            if rule.matcher.matches(&request.prompt) {
                return Ok(rule.response.clone());
            }
        }
        Ok(self.default_response.clone())
    }
}

// ---------------------------------------------------------------------------
// Live backend

#[derive(Debug, Clone)]
pub struct LiveConfig {
    pub base_url: String,
    pub model: String,
    /// Bearer token, if the gateway requires one. Populated from
    /// [`API_KEY_ENV`] by [`LiveConfig::new`].
    pub api_key: Option<String>,
    pub max_retries: usize,
    pub retry_base_ms: u64,
    pub timeout_secs: u64,
    /// 0 disables rate limiting.
    pub requests_per_minute: u32,
    pub max_concurrency: usize,
}

impl LiveConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        LiveConfig {
            base_url: base_url.into(),
            model: model.into(),
            api_key: std::env::var(API_KEY_ENV).ok(),
            max_retries: 3,
            retry_base_ms: 200,
            timeout_secs: 120,
            requests_per_minute: 0,
            max_concurrency: 4,
        }
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    active: Mutex<usize>,
    cv: Condvar,
    max: usize,
}

impl Gate {
    fn new(max: usize) -> Self {
        Gate { active: Mutex::new(0), cv: Condvar::new(), max: max.max(1) }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.cv.wait(active).unwrap();
        }
        *active += 1;
        GateGuard { gate: self }
    }
}

struct GateGuard<'a> {
    gate: &'a Gate,
}

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut active = self.gate.active.lock().unwrap();
        *active -= 1;
        self.gate.cv.notify_one();
    }
}

struct BucketState {
    tokens: f64,
    last: Instant,
}

/// Token bucket refilled at `requests_per_minute / 60` tokens per second.
struct TokenBucket {
    state: Mutex<BucketState>,
    rate_per_sec: f64,
    capacity: f64,
}

impl TokenBucket {
    fn new(requests_per_minute: u32) -> Option<Self> {
        if requests_per_minute == 0 {
            return None;
        }
        let rate = requests_per_minute as f64 / 60.0;
        let capacity = rate.max(1.0);
        Some(TokenBucket {
            state: Mutex::new(BucketState { tokens: capacity, last: Instant::now() }),
            rate_per_sec: rate,
            capacity,
        })
    }

    fn take(&self) {
        loop {
            let wait = {
                let mut s = self.state.lock().unwrap();
                let now = Instant::now();
                s.tokens = (s.tokens + now.duration_since(s.last).as_secs_f64() * self.rate_per_sec)
                    .min(self.capacity);
                s.last = now;
                if s.tokens >= 1.0 {
                    s.tokens -= 1.0;
                    return;
                }
                (1.0 - s.tokens) / self.rate_per_sec
            };
            std::thread::sleep(Duration::from_secs_f64(wait.min(0.25)));
        }
    }
}

#[derive(Serialize)]
struct ChatMessage<'a> {
    role: &'static str,
    content: &'a str,
}

#[derive(Serialize)]
struct ChatRequest<'a> {
    model: &'a str,
    messages: [ChatMessage<'a>; 1],
    temperature: f64,
    max_tokens: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatResponseMessage,
}

#[derive(Deserialize)]
struct ChatResponseMessage {
    content: String,
}

/// OpenAI-compatible chat client. The whole prompt is sent as one user
/// message; transient failures (transport, 429, 5xx) retry with exponential
/// backoff, everything else fails immediately.
pub struct HttpBackend {
    cfg: LiveConfig,
    client: reqwest::blocking::Client,
    gate: Gate,
    bucket: Option<TokenBucket>,
    name: String,
}

impl HttpBackend {
    pub fn new(cfg: LiveConfig) -> Result<Self> {
        if cfg.base_url.is_empty() || cfg.model.is_empty() {
            return Err(Error::InvalidConfig("live backend needs base_url and model".into()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| Error::InvalidConfig(format!("http client: {e}")))?;
        let gate = Gate::new(cfg.max_concurrency);
        let bucket = TokenBucket::new(cfg.requests_per_minute);
        let name = format!("live-{}", cfg.model);
        Ok(HttpBackend { cfg, client, gate, bucket, name })
    }

    pub fn endpoint(&self) -> String {
        format!("{}/v1/chat/completions", self.cfg.base_url.trim_end_matches('/'))
    }

    fn try_once(&self, request: &CompletionRequest) -> Result<String> {
        if let Some(bucket) = &self.bucket {
            bucket.take();
        }
        let body = ChatRequest {
            model: &self.cfg.model,
            messages: [ChatMessage { role: "user", content: &request.prompt }],
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            seed: request.seed,
        };
        let mut req = self.client.post(self.endpoint()).json(&body);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", format!("Bearer {key}"));
        }
        let resp = req.send().map_err(|e| Error::Transport(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Error::Transport(e.to_string()))?;
        if status.as_u16() == 429 {
            return Err(Error::RateLimited);
        }
        if status.is_server_error() {
            return Err(Error::Transport(format!("HTTP {status}")));
        }
        if !status.is_success() {
            return Err(Error::Rejected { status: status.as_u16(), body: snippet(&text) });
        }
        let parsed: ChatResponse =
            serde_json::from_str(&text).map_err(|e| Error::MalformedReply(format!("{e}; body: {}", snippet(&text))))?;
        match parsed.choices.into_iter().next() {
            Some(choice) => Ok(choice.message.content),
            None => Err(Error::MalformedReply("no choices in chat response".into())),
        }
    }
}

fn snippet(text: &str) -> String {
    const LIMIT: usize = 400;
    if text.len() <= LIMIT {
        text.to_string()
    } else {
        let mut end = LIMIT;
        while !text.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}…", &text[..end])
    }
}

impl Backend for HttpBackend {
    fn name(&self) -> &str {
        &self.name
    }

    fn raw_complete(&self, request: &CompletionRequest) -> Result<String> {
        let _permit = self.gate.acquire();
        let mut last: Option<Error> = None;
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let backoff = self.cfg.retry_base_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.try_once(request) {
                Ok(text) => return Ok(text),
                Err(e) if e.is_retriable() => last = Some(e),
                Err(e) => return Err(e),
            }
        }
        Err(Error::RetriesExhausted {
            attempts: self.cfg.max_retries + 1,
            last: last.expect("at least one attempt ran").to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// Structured output parsing

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaId {
    AnswerPlanResponse,
    ImportanceResponse,
}

/// One planned (question, adversarial answer) pair from the answer-planning
/// step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedAnswer {
    pub question: String,
    pub answer: String,
    #[serde(default)]
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScore {
    pub score: f64,
    pub reasoning: String,
    /// Set when the raw score fell outside [0, 10] and was clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum JsonPayload {
    AnswerPlan(Vec<PlannedAnswer>),
    Importance(ImportanceScore),
}

/// Pull the first JSON object out of model text that may wrap it in prose or
/// code fences.
fn extract_json_object(text: &str) -> Option<serde_json::Value> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str(trimmed) {
        return Some(v);
    }
    static FENCE: LazyLock<Regex> =
        LazyLock::new(|| Regex::new(r"(?s)```(?:json)?\s*(.*?)```").unwrap());
    if let Some(caps) = FENCE.captures(text) {
        if let Ok(v) = serde_json::from_str(caps[1].trim()) {
            return Some(v);
        }
    }
    // Fall back to the first balanced top-level object, string-aware.
    let bytes = text.as_bytes();
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, &b) in bytes.iter().enumerate().skip(start) {
        if in_string {
            if escaped {
                escaped = false;
            } else if b == b'\\' {
                escaped = true;
            } else if b == b'"' {
                in_string = false;
            }
            continue;
        }
        match b {
            b'"' => in_string = true,
            b'{' => depth += 1,
            b'}' => {
                depth -= 1;
                if depth == 0 {
                    return serde_json::from_str(&text[start..=i]).ok();
                }
            }
            _ => {}
        }
    }
    None
}

fn payload_err(schema: &'static str, reason: impl Into<String>, raw: &str) -> Error {
    Error::JsonPayload { schema, reason: reason.into(), raw: raw.to_string() }
}

pub fn parse_answer_plan(text: &str) -> Result<Vec<PlannedAnswer>> {
    const SCHEMA: &str = "AnswerPlanResponse";
    let value = extract_json_object(text).ok_or_else(|| payload_err(SCHEMA, "no JSON object found", text))?;
    let answers = value
        .get("answers")
        .and_then(|a| a.as_array())
        .ok_or_else(|| payload_err(SCHEMA, "missing `answers` array", text))?;
    let mut out = Vec::with_capacity(answers.len());
    for (i, item) in answers.iter().enumerate() {
        let planned: PlannedAnswer = serde_json::from_value(item.clone())
            .map_err(|e| payload_err(SCHEMA, format!("answers[{i}]: {e}"), text))?;
        if planned.answer.trim().is_empty() {
            return Err(payload_err(SCHEMA, format!("answers[{i}] has an empty answer"), text));
        }
        out.push(planned);
    }
    if out.is_empty() {
        return Err(payload_err(SCHEMA, "`answers` array is empty", text));
    }
    Ok(out)
}

pub fn parse_importance(text: &str) -> Result<ImportanceScore> {
    const SCHEMA: &str = "ImportanceResponse";
    let value = extract_json_object(text).ok_or_else(|| payload_err(SCHEMA, "no JSON object found", text))?;
    let raw_score = value
        .get("importance_score")
        .ok_or_else(|| payload_err(SCHEMA, "missing `importance_score`", text))?;
    let score = match raw_score {
        serde_json::Value::Number(n) => n.as_f64(),
        serde_json::Value::String(s) => s.trim().parse::<f64>().ok(),
        _ => None,
    }
    .filter(|s| s.is_finite())
    .ok_or_else(|| payload_err(SCHEMA, "`importance_score` is not a finite number", text))?;
    let reasoning = value.get("reasoning").and_then(|r| r.as_str()).unwrap_or_default().to_string();
    let clamped = !(0.0..=10.0).contains(&score);
    Ok(ImportanceScore { score: score.clamp(0.0, 10.0), reasoning, clamped })
}

pub fn parse_json_payload(text: &str, schema: SchemaId) -> Result<JsonPayload> {
    match schema {
        SchemaId::AnswerPlanResponse => parse_answer_plan(text).map(JsonPayload::AnswerPlan),
        SchemaId::ImportanceResponse => parse_importance(text).map(JsonPayload::Importance),
    }
}

// ---------------------------------------------------------------------------
// Free-text extraction

/// Back-ticked search queries from query-planning output, capped at
/// [`MAX_QUERIES`].
pub fn extract_queries(text: &str) -> Vec<String> {
    static QUERY: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"`([^`]+)`").unwrap());
    QUERY
        .captures_iter(text)
        .map(|c| c[1].trim().to_string())
        .filter(|q| !q.is_empty())
        .take(MAX_QUERIES)
        .collect()
}

static ENUM_ITEM: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*\d{1,3}[.):]\s*(.*\S)\s*$").unwrap());

fn strip_wrapping_quotes(s: &str) -> String {
    let s = s.trim();
    if s.len() >= 2 && s.starts_with('"') && s.ends_with('"') {
        s[1..s.len() - 1].trim().to_string()
    } else {
        s.to_string()
    }
}

/// Sub-questions from decomposition output: the enumerated lines after the
/// last "Questions" heading, capped at [`MAX_QUESTIONS`]. Without such a
/// heading, the trailing enumerated block is used.
pub fn extract_questions(text: &str) -> Vec<String> {
    let lines: Vec<&str> = text.lines().collect();
    let heading = lines
        .iter()
        .rposition(|l| l.to_lowercase().contains("questions") && !ENUM_ITEM.is_match(l));
    let items_after = |start: usize| -> Vec<String> {
        lines[start..]
            .iter()
            .filter_map(|l| ENUM_ITEM.captures(l).map(|c| strip_wrapping_quotes(&c[1])))
            .collect()
    };
    let questions = match heading {
        Some(i) => items_after(i + 1),
        None => {
            let mut tail: Vec<String> = Vec::new();
            for line in lines.iter().rev() {
                if let Some(caps) = ENUM_ITEM.captures(line) {
                    tail.push(strip_wrapping_quotes(&caps[1]));
                } else if line.trim().is_empty() {
                    continue;
                } else if !tail.is_empty() {
                    break;
                }
            }
            tail.reverse();
            tail
        }
    };
    questions.into_iter().take(MAX_QUESTIONS).collect()
}

/// Render a numbered question/answer record for aggregation and
/// importance-scoring prompts.
pub fn format_qa_list(pairs: &[(String, String)]) -> String {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (q, a))| format!("{}. Q: {}\n   A: {}", i + 1, q, a))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Render a numbered question list for the answer-planning prompt.
pub fn format_question_list(questions: &[String]) -> String {
    questions
        .iter()
        .enumerate()
        .map(|(i, q)| format!("{}. {}", i + 1, q))
        .collect::<Vec<_>>()
        .join("\n")
}

/// Convenience wrapper rendering a template and completing it in one step.
pub fn render_and_complete(
    backend: &dyn Backend,
    tpl: &PromptTemplate,
    slots: &[(&str, &str)],
    temperature: f64,
) -> Result<String> {
    let prompt = render_prompt(tpl, slots)?;
    complete(backend, &CompletionRequest::new(prompt).with_temperature(temperature))
}
