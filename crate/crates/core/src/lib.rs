//! Red-team testbed for agentic fact-checking systems.
//!
//! The crate wires together four moving parts:
//!
//! - **Victims** ([`victim`]): a naive RAG checker and an agentic checker that
//!   decomposes claims into sub-questions, both backed by per-claim knowledge
//!   bases with exact k-NN retrieval ([`retrieval`]).
//! - **Attacks** ([`attack`]): knowledge-base poisoning baselines plus the
//!   planner/executor attack that mirrors the victim's decomposition and
//!   exploits its justifications.
//! - **Defenses** ([`defense`]): claim paraphrasing, k-means cluster
//!   filtering, and perplexity filtering over retrieved evidence.
//! - **Evaluation** ([`experiment`]): dataset ingestion, probe/attack/check
//!   orchestration, ASR/SFR/SIR metrics, and paired bootstrap significance.
//!
//! LLM access goes through [`llm`], which offers a deterministic scripted
//! backend for desk-scale runs and an OpenAI-compatible HTTP client for live
//! runs.

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub mod attack;
pub mod defense;
pub mod domain;
pub mod error;
pub mod experiment;
pub mod llm;
pub mod retrieval;
pub mod victim;

pub use domain::{classify_outcome, invert_label, Claim, Evidence, OutcomeClass, Provenance, VeracityLabel};
pub use error::{Error, Result};
