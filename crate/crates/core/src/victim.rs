//! The two fact-checking victims.
//!
//! `simple_check` is a naive RAG pipeline: one retrieval with the claim
//! text, one completion for the verdict. `agentic_check` decomposes the
//! claim into sub-questions, plans search queries per question, answers each
//! from retrieved evidence, and aggregates the answers into a verdict. Both
//! log every retrieve call so injection rates can be computed afterwards.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::domain::{Claim, Evidence, VeracityLabel};
use crate::error::{Error, Result};
use crate::llm::{
    complete, extract_queries, extract_questions, format_qa_list, render_prompt, template,
    Backend, CompletionRequest, TemplateId,
};
use crate::retrieval::{Embedder, EmbeddingVector, KnowledgeBase};

/// One evidence surfacing in a retrieval, with its provenance flag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRef {
    pub id: String,
    pub malicious: bool,
}

/// An evidence removed by a defense filter before reaching the LLM.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedEvidence {
    pub id: String,
    pub reason: String,
}

/// Record of a single retrieve call: what came back and what a defense
/// dropped. `dropped` is always a subset of `retrieved`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetrievalLogEntry {
    pub query: String,
    pub retrieved: Vec<EvidenceRef>,
    pub dropped: Vec<DroppedEvidence>,
}

impl RetrievalLogEntry {
    /// Evidences that survived filtering and reached the LLM context.
    pub fn kept(&self) -> impl Iterator<Item = &EvidenceRef> {
        self.retrieved.iter().filter(|r| !self.dropped.iter().any(|d| d.id == r.id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubQuestionRecord {
    pub question: String,
    pub queries: Vec<String>,
    pub retrieved_ids: Vec<String>,
    pub answer: String,
}

/// Post-filter retrieval totals summed over every retrieve call of a check.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RetrievalCounts {
    pub kept_total: usize,
    pub kept_malicious: usize,
    pub dropped_total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactCheckReport {
    pub claim_id: String,
    pub verdict: VeracityLabel,
    pub justification: String,
    pub sub_records: Vec<SubQuestionRecord>,
    pub retrieval_log: Vec<RetrievalLogEntry>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl FactCheckReport {
    pub fn retrieval_counts(&self) -> RetrievalCounts {
        let mut counts = RetrievalCounts::default();
        for entry in &self.retrieval_log {
            for kept in entry.kept() {
                counts.kept_total += 1;
                if kept.malicious {
                    counts.kept_malicious += 1;
                }
            }
            counts.dropped_total += entry.dropped.len();
        }
        counts
    }
}

/// Outcome of a defense filter over one retrieved set.
#[derive(Debug, Clone)]
pub struct FilterOutcome {
    pub kept: Vec<Evidence>,
    pub dropped: Vec<DroppedEvidence>,
}

/// Per-retrieval defense hook. Implementations must only ever remove items;
/// kept preserves the input order.
pub trait EvidenceFilter: Send + Sync {
    fn apply(&self, items: &[(Evidence, EmbeddingVector)]) -> Result<FilterOutcome>;
}

/// Prompt/completion pair captured when tracing is enabled.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub label: String,
    pub prompt: String,
    pub completion: String,
}

/// Thread-safe transcript sink for `--trace` runs.
#[derive(Debug, Default)]
pub struct Transcript {
    entries: Mutex<Vec<Exchange>>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, label: &str, prompt: &str, completion: &str) {
        self.entries.lock().unwrap().push(Exchange {
            label: label.to_string(),
            prompt: prompt.to_string(),
            completion: completion.to_string(),
        });
    }

    pub fn snapshot(&self) -> Vec<Exchange> {
        self.entries.lock().unwrap().clone()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VictimKind {
    #[default]
    Simple,
    Agentic,
}

impl VictimKind {
    pub fn name(self) -> &'static str {
        match self {
            VictimKind::Simple => "simple",
            VictimKind::Agentic => "agentic",
        }
    }
}

/// Everything a check needs besides the claim and its knowledge base.
pub struct CheckContext<'a> {
    pub backend: &'a dyn Backend,
    pub embedder: &'a dyn Embedder,
    pub k: usize,
    pub max_questions: usize,
    pub filter: Option<&'a dyn EvidenceFilter>,
    pub transcript: Option<&'a Transcript>,
}

impl<'a> CheckContext<'a> {
    pub fn new(backend: &'a dyn Backend, embedder: &'a dyn Embedder) -> Self {
        CheckContext { backend, embedder, k: 5, max_questions: 10, filter: None, transcript: None }
    }

    fn ask(&self, label: &str, prompt: String) -> Result<String> {
        let reply = complete(self.backend, &CompletionRequest::new(prompt.clone()))?;
        if let Some(t) = self.transcript {
            t.record(label, &prompt, &reply);
        }
        Ok(reply)
    }

    fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("retrieval depth k must be at least 1".into()));
        }
        if !(1..=10).contains(&self.max_questions) {
            return Err(Error::InvalidConfig(format!(
                "max_questions must be in 1..=10, got {}",
                self.max_questions
            )));
        }
        Ok(())
    }
}

pub fn check(
    kind: VictimKind,
    claim: &Claim,
    kb: &KnowledgeBase,
    ctx: &CheckContext<'_>,
) -> Result<FactCheckReport> {
    match kind {
        VictimKind::Simple => simple_check(claim, kb, ctx),
        VictimKind::Agentic => agentic_check(claim, kb, ctx),
    }
}

/// Case-insensitive parse of the last `VERDICT:` line. The slash form
/// "Conflicting/Cherry-picking" maps to [`VeracityLabel::ConflictingEvidence`].
pub fn parse_verdict(text: &str) -> Result<VeracityLabel> {
    let value = text
        .lines()
        .rev()
        .find_map(|line| line.trim().to_lowercase().strip_prefix("verdict:").map(str::to_string))
        .ok_or_else(|| Error::VerdictParse(text.to_string()))?;
    let normalized: String = value
        .chars()
        .map(|c| if c == '/' || c == '-' { ' ' } else { c })
        .collect::<String>()
        .replace('.', " ")
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ");
    match normalized.as_str() {
        "supported" => Ok(VeracityLabel::Supported),
        "refuted" => Ok(VeracityLabel::Refuted),
        "not enough evidence" => Ok(VeracityLabel::NotEnoughEvidence),
        "conflicting evidence" | "conflicting cherry picking" => Ok(VeracityLabel::ConflictingEvidence),
        _ => Err(Error::VerdictParse(text.to_string())),
    }
}

/// The completion text above its final `VERDICT:` line, used as the
/// justification. Falls back to the whole text when nothing precedes it.
fn justification_of(text: &str) -> String {
    let lines: Vec<&str> = text.lines().collect();
    let sentinel = lines
        .iter()
        .rposition(|l| l.trim().to_lowercase().starts_with("verdict:"));
    let body = match sentinel {
        Some(i) => lines[..i].join("\n"),
        None => String::new(),
    };
    let body = body.trim();
    if body.is_empty() {
        text.trim().to_string()
    } else {
        body.to_string()
    }
}

fn format_evidence_block(evidences: &[Evidence]) -> String {
    if evidences.is_empty() {
        return "(no evidence retrieved)".to_string();
    }
    evidences
        .iter()
        .enumerate()
        .map(|(i, e)| format!("{}. {}", i + 1, e.text))
        .collect::<Vec<_>>()
        .join("\n")
}

/// One retrieve call plus the defense filter: returns survivors and appends
/// the full log entry.
fn retrieve_filtered(
    query: &str,
    kb: &KnowledgeBase,
    ctx: &CheckContext<'_>,
    log: &mut Vec<RetrievalLogEntry>,
) -> Result<Vec<Evidence>> {
    let query_vec = ctx.embedder.embed(query)?;
    let hits = kb.retrieve(&query_vec, ctx.k)?;
    let retrieved: Vec<EvidenceRef> = hits
        .iter()
        .map(|h| EvidenceRef { id: h.entry.evidence.id.clone(), malicious: h.entry.evidence.is_malicious() })
        .collect();
    let items: Vec<(Evidence, EmbeddingVector)> =
        hits.iter().map(|h| (h.entry.evidence.clone(), h.entry.embedding.clone())).collect();
    let (kept, dropped) = match ctx.filter {
        Some(filter) => {
            let outcome = filter.apply(&items)?;
            (outcome.kept, outcome.dropped)
        }
        None => (items.into_iter().map(|(e, _)| e).collect(), Vec::new()),
    };
    log.push(RetrievalLogEntry { query: query.to_string(), retrieved, dropped });
    Ok(kept)
}

fn verdict_completion(
    ctx: &CheckContext<'_>,
    label: &str,
    prompt: &str,
) -> Result<(VeracityLabel, String)> {
    let first = ctx.ask(label, prompt.to_string())?;
    match parse_verdict(&first) {
        Ok(verdict) => Ok((verdict, justification_of(&first))),
        Err(_) => {
            let second = ctx.ask(&format!("{label}-retry"), prompt.to_string())?;
            let verdict = parse_verdict(&second)?;
            Ok((verdict, justification_of(&second)))
        }
    }
}

/// Naive RAG check: retrieve once with the claim text, ask for a verdict
/// over the retrieved evidence.
pub fn simple_check(claim: &Claim, kb: &KnowledgeBase, ctx: &CheckContext<'_>) -> Result<FactCheckReport> {
    ctx.validate()?;
    let mut log = Vec::new();
    let kept = retrieve_filtered(&claim.text, kb, ctx, &mut log)?;
    let prompt = render_prompt(
        template(TemplateId::SimpleVerdict),
        &[("CLAIM", claim.text.as_str()), ("EVIDENCE", &format_evidence_block(&kept))],
    )?;
    let (verdict, justification) = verdict_completion(ctx, "simple-verdict", &prompt)?;
    Ok(FactCheckReport {
        claim_id: claim.id.clone(),
        verdict,
        justification,
        sub_records: Vec::new(),
        retrieval_log: log,
        warnings: Vec::new(),
    })
}

/// Agentic check: decompose into sub-questions, plan queries, answer each
/// sub-question from its retrieved union, then aggregate.
pub fn agentic_check(claim: &Claim, kb: &KnowledgeBase, ctx: &CheckContext<'_>) -> Result<FactCheckReport> {
    ctx.validate()?;
    let decompose_prompt = render_prompt(
        template(TemplateId::Decompose),
        &[("CLAIM", claim.text.as_str()), ("N_QUESTIONS", &ctx.max_questions.to_string())],
    )?;
    let decomposition = ctx.ask("decompose", decompose_prompt)?;
    let mut questions = extract_questions(&decomposition);
    questions.truncate(ctx.max_questions);
    if questions.is_empty() {
        let mut report = simple_check(claim, kb, ctx)?;
        report
            .warnings
            .push("decomposition produced no questions; fell back to the simple check".to_string());
        return Ok(report);
    }

    let mut log = Vec::new();
    let mut sub_records = Vec::with_capacity(questions.len());
    let mut warnings = Vec::new();
    for question in &questions {
        let plan_prompt = render_prompt(
            template(TemplateId::QueryPlan),
            &[("CLAIM", claim.text.as_str()), ("QUESTION", question.as_str())],
        )?;
        let plan_reply = ctx.ask("query-plan", plan_prompt)?;
        let mut queries = extract_queries(&plan_reply);
        if queries.is_empty() {
            warnings.push(format!("no queries proposed for {question:?}; using the question itself"));
            queries.push(question.clone());
        }

        let mut union: Vec<Evidence> = Vec::new();
        for query in &queries {
            let kept = retrieve_filtered(query, kb, ctx, &mut log)?;
            for evidence in kept {
                if !union.iter().any(|e| e.id == evidence.id) {
                    union.push(evidence);
                }
            }
        }

        let answer_prompt = render_prompt(
            template(TemplateId::SubQuestionAnswer),
            &[
                ("CLAIM", claim.text.as_str()),
                ("QUESTION", question.as_str()),
                ("EVIDENCE", &format_evidence_block(&union)),
            ],
        )?;
        let answer = ctx.ask("sub-answer", answer_prompt)?.trim().to_string();
        sub_records.push(SubQuestionRecord {
            question: question.clone(),
            queries,
            retrieved_ids: union.iter().map(|e| e.id.clone()).collect(),
            answer,
        });
    }

    let qa_pairs: Vec<(String, String)> =
        sub_records.iter().map(|r| (r.question.clone(), r.answer.clone())).collect();
    let aggregate_prompt = render_prompt(
        template(TemplateId::Aggregate),
        &[("CLAIM", claim.text.as_str()), ("QA_LIST", &format_qa_list(&qa_pairs))],
    )?;
    let (verdict, justification) = verdict_completion(ctx, "aggregate", &aggregate_prompt)?;
    Ok(FactCheckReport {
        claim_id: claim.id.clone(),
        verdict,
        justification,
        sub_records,
        retrieval_log: log,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{Rule, ScriptedBackend};
    use crate::retrieval::HashEmbedder;
    use std::collections::VecDeque;

    fn claim() -> Claim {
        Claim::new("c1", "the bridge opened in 1999", VeracityLabel::Supported).unwrap()
    }

    fn clean_kb(embedder: &HashEmbedder) -> KnowledgeBase {
        let evidences = vec![
            Evidence::clean("e1", "the bridge opened in 1999 to traffic").unwrap(),
            Evidence::clean("e2", "construction finished late in 1998").unwrap(),
            Evidence::clean("e3", "unrelated river facts and figures").unwrap(),
        ];
        KnowledgeBase::from_evidences("c1", evidences, embedder).unwrap()
    }

    #[test]
    fn verdict_parsing_accepts_label_surface_forms() {
        assert_eq!(parse_verdict("...\nVERDICT: Supported").unwrap(), VeracityLabel::Supported);
        assert_eq!(parse_verdict("VERDICT: refuted.").unwrap(), VeracityLabel::Refuted);
        assert_eq!(parse_verdict("verdict:   Not Enough Evidence").unwrap(), VeracityLabel::NotEnoughEvidence);
        assert_eq!(
            parse_verdict("VERDICT: Conflicting/Cherry-picking").unwrap(),
            VeracityLabel::ConflictingEvidence
        );
        assert_eq!(
            parse_verdict("VERDICT: Conflicting Evidence").unwrap(),
            VeracityLabel::ConflictingEvidence
        );
    }

    #[test]
    fn verdict_parsing_uses_the_last_sentinel() {
        let text = "VERDICT: Supported\nwait, revised analysis...\nVERDICT: Refuted";
        assert_eq!(parse_verdict(text).unwrap(), VeracityLabel::Refuted);
    }

    #[test]
    fn verdict_parsing_rejects_missing_or_unknown() {
        assert!(matches!(parse_verdict("no verdict here"), Err(Error::VerdictParse(_))));
        assert!(matches!(parse_verdict("VERDICT: maybe"), Err(Error::VerdictParse(_))));
    }

    #[test]
    fn justification_is_text_above_the_sentinel() {
        assert_eq!(justification_of("reasoning here\nVERDICT: Supported"), "reasoning here");
        assert_eq!(justification_of("VERDICT: Supported"), "VERDICT: Supported");
    }

    #[test]
    fn simple_check_produces_one_retrieval_and_a_verdict() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = ScriptedBackend::new(
            vec![Rule::contains("Evidence:", "the evidence contradicts it\nVERDICT: Refuted")],
            "VERDICT: Not Enough Evidence",
        );
        let ctx = CheckContext::new(&backend, &embedder);
        let report = simple_check(&claim(), &kb, &ctx).unwrap();
        assert_eq!(report.verdict, VeracityLabel::Refuted);
        assert_eq!(report.justification, "the evidence contradicts it");
        assert_eq!(report.retrieval_log.len(), 1);
        assert_eq!(report.retrieval_log[0].query, claim().text);
        assert_eq!(report.retrieval_log[0].retrieved.len(), 3, "k clamps to KB size");
        assert!(report.sub_records.is_empty());
    }

    #[test]
    fn simple_check_survives_an_empty_kb() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = KnowledgeBase::from_evidences("c1", vec![], &embedder).unwrap();
        let backend = ScriptedBackend::new(
            vec![Rule::contains("(no evidence retrieved)", "nothing to go on\nVERDICT: Not Enough Evidence")],
            "VERDICT: Supported",
        );
        let ctx = CheckContext::new(&backend, &embedder);
        let report = simple_check(&claim(), &kb, &ctx).unwrap();
        assert_eq!(report.verdict, VeracityLabel::NotEnoughEvidence);
        assert!(report.retrieval_log[0].retrieved.is_empty());
    }

    /// Stateful backend replaying a fixed reply sequence, for reprompt tests.
    struct SeqBackend {
        replies: Mutex<VecDeque<String>>,
    }

    impl SeqBackend {
        fn new(replies: &[&str]) -> Self {
            SeqBackend { replies: Mutex::new(replies.iter().map(|s| s.to_string()).collect()) }
        }
    }

    impl Backend for SeqBackend {
        fn name(&self) -> &str {
            "seq"
        }

        fn raw_complete(&self, _request: &CompletionRequest) -> Result<String> {
            let mut replies = self.replies.lock().unwrap();
            Ok(replies.pop_front().unwrap_or_else(|| "exhausted".to_string()))
        }
    }

    #[test]
    fn verdict_parse_failure_reprompts_once_then_succeeds() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = SeqBackend::new(&["garbled reply", "second try\nVERDICT: Supported"]);
        let transcript = Transcript::new();
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.transcript = Some(&transcript);
        let report = simple_check(&claim(), &kb, &ctx).unwrap();
        assert_eq!(report.verdict, VeracityLabel::Supported);
        let labels: Vec<String> = transcript.snapshot().into_iter().map(|e| e.label).collect();
        assert_eq!(labels, vec!["simple-verdict".to_string(), "simple-verdict-retry".to_string()]);
    }

    #[test]
    fn verdict_parse_failure_twice_is_an_error() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = SeqBackend::new(&["garbled", "still garbled"]);
        let ctx = CheckContext::new(&backend, &embedder);
        assert!(matches!(simple_check(&claim(), &kb, &ctx), Err(Error::VerdictParse(_))));
    }

    fn agentic_backend() -> ScriptedBackend {
        ScriptedBackend::new(
            vec![
                Rule::contains("Interpretation:", "Questions:\n1. Did the bridge open in 1999?\n2. Was the bridge finished in 1998?"),
                Rule::pattern(r"(?s)Question: Did the bridge open in 1999\?.*Final Queries:", "`bridge opened 1999 traffic`").unwrap(),
                Rule::pattern(r"(?s)Question: Was the bridge finished in 1998\?.*Final Queries:", "`construction finished 1998`").unwrap(),
                Rule::contains("Question-Answer Record:", "answers align with the claim\nVERDICT: Supported"),
                Rule::contains("Answer:", "Yes, per the retrieved evidence."),
            ],
            "VERDICT: Not Enough Evidence",
        )
    }

    #[test]
    fn agentic_check_runs_the_full_pipeline() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = agentic_backend();
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.max_questions = 2;
        let report = agentic_check(&claim(), &kb, &ctx).unwrap();
        assert_eq!(report.verdict, VeracityLabel::Supported);
        assert_eq!(report.sub_records.len(), 2);
        for record in &report.sub_records {
            assert!(!record.queries.is_empty());
            assert!(!record.retrieved_ids.is_empty());
            assert_eq!(record.answer, "Yes, per the retrieved evidence.");
        }
        assert_eq!(report.sub_records[0].question, "Did the bridge open in 1999?");
        // one retrieval per planned query
        assert_eq!(report.retrieval_log.len(), 2);
        assert_eq!(report.retrieval_log[0].query, "bridge opened 1999 traffic");
    }

    #[test]
    fn agentic_check_respects_max_questions_cap() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = agentic_backend();
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.max_questions = 1;
        let report = agentic_check(&claim(), &kb, &ctx).unwrap();
        assert_eq!(report.sub_records.len(), 1);
    }

    #[test]
    fn agentic_check_falls_back_when_no_questions_come_back() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = ScriptedBackend::new(
            vec![
                Rule::contains("Interpretation:", "I cannot decompose this claim."),
                Rule::contains("Evidence:", "fine\nVERDICT: Supported"),
            ],
            "VERDICT: Supported",
        );
        let ctx = CheckContext::new(&backend, &embedder);
        let report = agentic_check(&claim(), &kb, &ctx).unwrap();
        assert!(report.sub_records.is_empty());
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("fell back"));
        assert_eq!(report.verdict, VeracityLabel::Supported);
    }

    #[test]
    fn agentic_check_queries_fall_back_to_the_question() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = ScriptedBackend::new(
            vec![
                Rule::contains("Interpretation:", "Questions:\n1. Did the bridge open in 1999?"),
                Rule::contains("Final Queries:", "no backticks in this reply"),
                Rule::contains("Question-Answer Record:", "VERDICT: Supported"),
                Rule::contains("Answer:", "an answer"),
            ],
            "fallback",
        );
        let ctx = CheckContext::new(&backend, &embedder);
        let report = agentic_check(&claim(), &kb, &ctx).unwrap();
        assert_eq!(report.sub_records[0].queries, vec!["Did the bridge open in 1999?".to_string()]);
        assert!(!report.warnings.is_empty());
    }

    #[test]
    fn malicious_retrievals_are_flagged_in_the_log() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let poison =
            Evidence::malicious("c1/mal/naive/0/0", "the bridge opened in 1999", "naive", None).unwrap();
        let poisoned = kb.inject(std::slice::from_ref(&poison), &embedder).unwrap();
        let backend = ScriptedBackend::new(
            vec![Rule::contains("Evidence:", "VERDICT: Refuted")],
            "VERDICT: Refuted",
        );
        let ctx = CheckContext::new(&backend, &embedder);
        let report = simple_check(&claim(), &poisoned, &ctx).unwrap();
        let entry = &report.retrieval_log[0];
        assert!(entry.retrieved.iter().any(|r| r.malicious && r.id == "c1/mal/naive/0/0"));
        let counts = report.retrieval_counts();
        assert_eq!(counts.kept_malicious, 1);
        assert_eq!(counts.kept_total, 4);
    }

    /// Filter dropping every evidence whose text contains a marker token.
    struct MarkerFilter;

    impl EvidenceFilter for MarkerFilter {
        fn apply(&self, items: &[(Evidence, EmbeddingVector)]) -> Result<FilterOutcome> {
            let mut kept = Vec::new();
            let mut dropped = Vec::new();
            for (evidence, _) in items {
                if evidence.text.contains("ZZMARK") {
                    dropped.push(DroppedEvidence { id: evidence.id.clone(), reason: "marker".into() });
                } else {
                    kept.push(evidence.clone());
                }
            }
            Ok(FilterOutcome { kept, dropped })
        }
    }

    #[test]
    fn filters_remove_evidence_before_the_llm_sees_it() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let poison = Evidence::malicious(
            "c1/mal/naive/0/0",
            "ZZMARK the bridge opened in 1999",
            "naive",
            None,
        )
        .unwrap();
        let poisoned = kb.inject(std::slice::from_ref(&poison), &embedder).unwrap();
        let transcript = Transcript::new();
        let backend = ScriptedBackend::new(vec![], "VERDICT: Supported");
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.filter = Some(&MarkerFilter);
        ctx.transcript = Some(&transcript);
        let report = simple_check(&claim(), &poisoned, &ctx).unwrap();
        let entry = &report.retrieval_log[0];
        assert_eq!(entry.dropped.len(), 1);
        assert_eq!(entry.dropped[0].id, "c1/mal/naive/0/0");
        assert!(entry.retrieved.iter().any(|r| r.id == "c1/mal/naive/0/0"), "drop is logged, not hidden");
        let counts = report.retrieval_counts();
        assert_eq!(counts.kept_malicious, 0);
        assert_eq!(counts.dropped_total, 1);
        let prompt = &transcript.snapshot()[0].prompt;
        assert!(!prompt.contains("ZZMARK"));
    }

    #[test]
    fn scripted_checks_are_bit_reproducible() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = agentic_backend();
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.max_questions = 2;
        let a = agentic_check(&claim(), &kb, &ctx).unwrap();
        let b = agentic_check(&claim(), &kb, &ctx).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn empty_injection_does_not_change_the_report() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let same = kb.inject(&[], &embedder).unwrap();
        let backend = agentic_backend();
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.max_questions = 2;
        let a = agentic_check(&claim(), &kb, &ctx).unwrap();
        let b = agentic_check(&claim(), &same, &ctx).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn context_validation_rejects_bad_settings() {
        let embedder = HashEmbedder::new(32, 1);
        let kb = clean_kb(&embedder);
        let backend = ScriptedBackend::new(vec![], "VERDICT: Supported");
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.k = 0;
        assert!(simple_check(&claim(), &kb, &ctx).is_err());
        let mut ctx = CheckContext::new(&backend, &embedder);
        ctx.max_questions = 11;
        assert!(agentic_check(&claim(), &kb, &ctx).is_err());
    }

    #[test]
    fn report_round_trips_through_json() {
        let report = FactCheckReport {
            claim_id: "c1".into(),
            verdict: VeracityLabel::Refuted,
            justification: "because".into(),
            sub_records: vec![SubQuestionRecord {
                question: "q?".into(),
                queries: vec!["q1".into()],
                retrieved_ids: vec!["e1".into()],
                answer: "a".into(),
            }],
            retrieval_log: vec![RetrievalLogEntry {
                query: "q1".into(),
                retrieved: vec![EvidenceRef { id: "e1".into(), malicious: false }],
                dropped: vec![],
            }],
            warnings: vec!["w".into()],
        };
        let json = serde_json::to_string(&report).unwrap();
        let back: FactCheckReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);
    }
}
