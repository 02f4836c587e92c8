//! Core vocabulary shared by every module: claims, veracity labels, evidence,
//! and outcome classification for attacked claims.
//!
//! All types here are immutable value objects and safe to share across
//! threads.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The four AVeriTeC veracity labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VeracityLabel {
    Supported,
    Refuted,
    NotEnoughEvidence,
    ConflictingEvidence,
}

impl VeracityLabel {
    /// Only supported/refuted claims can be targeted for inversion.
    pub fn is_targetable(self) -> bool {
        matches!(self, VeracityLabel::Supported | VeracityLabel::Refuted)
    }

    /// Human-readable surface form used inside prompts and reports.
    pub fn display_name(self) -> &'static str {
        match self {
            VeracityLabel::Supported => "Supported",
            VeracityLabel::Refuted => "Refuted",
            VeracityLabel::NotEnoughEvidence => "Not Enough Evidence",
            VeracityLabel::ConflictingEvidence => "Conflicting Evidence",
        }
    }
}

impl std::fmt::Display for VeracityLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.display_name())
    }
}

/// A textual statement with a gold veracity label; the unit of attack and
/// verification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Claim {
    pub id: String,
    pub text: String,
    pub gold_label: VeracityLabel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub date: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
}

impl Claim {
    pub fn new(id: impl Into<String>, text: impl Into<String>, gold_label: VeracityLabel) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::EmptyText("claim text"));
        }
        Ok(Claim { id: id.into(), text, gold_label, date: None, speaker: None })
    }

    /// Whether this claim is a valid attack target under the threat model.
    pub fn is_targetable(&self) -> bool {
        self.gold_label.is_targetable()
    }
}

/// Where an evidence came from: the original corpus or an attack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Clean,
    Malicious {
        attack_name: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        sub_question_index: Option<usize>,
    },
}

impl Provenance {
    pub fn is_malicious(&self) -> bool {
        matches!(self, Provenance::Malicious { .. })
    }
}

/// One text snippet in a claim's knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub id: String,
    pub text: String,
    pub provenance: Provenance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub url: Option<String>,
}

impl Evidence {
    pub fn clean(id: impl Into<String>, text: impl Into<String>) -> Result<Self> {
        Self::with_provenance(id, text, Provenance::Clean)
    }

    pub fn malicious(
        id: impl Into<String>,
        text: impl Into<String>,
        attack_name: impl Into<String>,
        sub_question_index: Option<usize>,
    ) -> Result<Self> {
        Self::with_provenance(
            id,
            text,
            Provenance::Malicious { attack_name: attack_name.into(), sub_question_index },
        )
    }

    fn with_provenance(id: impl Into<String>, text: impl Into<String>, provenance: Provenance) -> Result<Self> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(Error::EmptyText("evidence text"));
        }
        Ok(Evidence { id: id.into(), text, provenance, url: None })
    }

    pub fn is_malicious(&self) -> bool {
        self.provenance.is_malicious()
    }
}

/// Id scheme for injected evidences, keyed so that retrieval accounting stays
/// auditable: `{claim_id}/mal/{attack}/{k}/{h}`.
pub fn malicious_evidence_id(claim_id: &str, attack: &str, sub_question: usize, index: usize) -> String {
    format!("{claim_id}/mal/{attack}/{sub_question}/{index}")
}

/// How a post-attack verdict relates to the gold label.
///
/// `Inverted` is the strict subset counted by ASR; `Degraded` covers every
/// other incorrect verdict, so ASR's numerator is always a subset of SFR's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeClass {
    Inverted,
    Degraded,
    Unchanged,
}

impl OutcomeClass {
    /// Counted by SFR: any incorrect post-attack verdict.
    pub fn is_incorrect(self) -> bool {
        matches!(self, OutcomeClass::Inverted | OutcomeClass::Degraded)
    }
}

/// Map a targetable gold label to the attacker's goal verdict.
pub fn invert_label(label: VeracityLabel) -> Result<VeracityLabel> {
    match label {
        VeracityLabel::Supported => Ok(VeracityLabel::Refuted),
        VeracityLabel::Refuted => Ok(VeracityLabel::Supported),
        other => Err(Error::InvalidGoldLabel(other)),
    }
}

/// Classify a post-attack verdict against the gold label.
pub fn classify_outcome(gold: VeracityLabel, post_verdict: VeracityLabel) -> Result<OutcomeClass> {
    let inverted = invert_label(gold)?;
    if post_verdict == inverted {
        Ok(OutcomeClass::Inverted)
    } else if post_verdict == gold {
        Ok(OutcomeClass::Unchanged)
    } else {
        Ok(OutcomeClass::Degraded)
    }
}
