//! The four subcommands and the artifacts they leave behind.
//!
//! Everything under `<out>/results/<run_id>/` except `manifest.json` is
//! byte-identical across repeated runs of the same config and dataset; the
//! manifest carries the only timestamps. The run id is a hash of the resolved
//! config plus the dataset contents, so a changed input lands in a fresh
//! directory instead of silently overwriting an older run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};

use factgauntlet_core::attack::{compute_poison_count, run_attack, save_poison_set, AttackKind};
use factgauntlet_core::domain::{invert_label, Claim};
use factgauntlet_core::experiment::{
    build_backend, build_embedder, load_dataset, paired_bootstrap, paired_success, parse_attack,
    run_cell, sanitize_id, trial_seed, write_summary_csv, ClaimResult, ProbeCache, SummaryRow,
    Workbench,
};
use factgauntlet_core::retrieval::fnv1a64;

use crate::config::RunConfig;

/// Marker for errors that reflect a bad invocation or config rather than a
/// runtime failure; `main` maps these to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage_error(message: impl Into<String>) -> anyhow::Error {
    UsageError(message.into()).into()
}

fn probe_cache_dir(out: &Path) -> PathBuf {
    out.join("probe-cache")
}

fn eval_set_path(out: &Path) -> PathBuf {
    out.join("eval_set.json")
}

fn run_dir(out: &Path, run_id: &str) -> PathBuf {
    out.join("results").join(run_id)
}

/// Reject obviously broken inputs before any backend work starts, so the
/// caller sees a usage error instead of a mid-run failure.
fn precheck(config: &RunConfig) -> Result<()> {
    let claims = config.dataset.join("claims.json");
    if !claims.is_file() {
        return Err(usage_error(format!(
            "dataset {} has no claims.json",
            config.dataset.display()
        )));
    }
    if let factgauntlet_core::experiment::BackendConfig::Scripted { rules_path } = &config.backend {
        if !rules_path.is_file() {
            return Err(usage_error(format!(
                "scripted backend rules file {} does not exist",
                rules_path.display()
            )));
        }
    }
    Ok(())
}

/// FNV-1a over claims.json and every kb file in sorted order; detects any
/// dataset edit between runs.
fn dataset_hash(dir: &Path) -> Result<u64> {
    let claims_path = dir.join("claims.json");
    let claims = std::fs::read(&claims_path)
        .with_context(|| format!("read {}", claims_path.display()))?;
    let mut hash = fnv1a64(0, b"claims.json");
    hash = fnv1a64(hash, &claims);
    let kb_dir = dir.join("kb");
    let mut files: Vec<PathBuf> = Vec::new();
    if kb_dir.is_dir() {
        for entry in
            std::fs::read_dir(&kb_dir).with_context(|| format!("read {}", kb_dir.display()))?
        {
            files.push(entry?.path());
        }
    }
    files.sort();
    for file in files {
        let name = file.file_name().unwrap_or_default().to_string_lossy();
        let body = std::fs::read(&file).with_context(|| format!("read {}", file.display()))?;
        hash = fnv1a64(hash, name.as_bytes());
        hash = fnv1a64(hash, &body);
    }
    Ok(hash)
}

fn run_id(config: &RunConfig, dataset_hash: u64) -> String {
    let snapshot = serde_json::to_string(config).expect("config serializes");
    format!("run-{:016x}", fnv1a64(dataset_hash, snapshot.as_bytes()))
}

fn write_pretty_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("write {}", path.display()))?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("read {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parse {}", path.display()))
}

// ---------------------------------------------------------------------------
// Artifact schemas

/// Which claims survived probing, written by `probe` and reused by `attack`.
#[derive(Debug, Serialize, Deserialize)]
pub struct EvalSetListing {
    pub victim: String,
    pub backend: String,
    pub dataset_hash: String,
    pub included: Vec<String>,
    pub excluded: Vec<ExcludedClaim>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ExcludedClaim {
    pub claim_id: String,
    pub reason: String,
}

/// One line of `claims.jsonl`: a per-claim result tagged with the cell it
/// came from.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRow {
    pub attack: String,
    pub victim: String,
    pub defense: String,
    #[serde(flatten)]
    pub result: ClaimResult,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SummaryFile {
    pub run_id: String,
    #[serde(default)]
    pub compare_with: Option<String>,
    pub rows: Vec<SummaryRow>,
    pub excluded: Vec<ExcludedClaim>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairedComparison {
    pub rate: f64,
    pub attack: String,
    pub baseline: String,
    /// One-sided: fraction of paired resamples where the attack does not beat
    /// the baseline.
    pub p_value: f64,
    pub resamples: usize,
}

/// Everything needed to reproduce a run, plus the only timestamps in the
/// output tree.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub created_at: String,
    pub config: RunConfig,
    pub dataset_hash: String,
    pub rng_seed: u64,
    pub trial_seeds: Vec<u64>,
    pub core_version: String,
    pub cli_version: String,
}

// ---------------------------------------------------------------------------
// probe

pub fn cmd_probe(config: &RunConfig, out: &Path) -> Result<()> {
    precheck(config)?;
    std::fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let cache = ProbeCache::new(probe_cache_dir(out))?;
    let cell = config.cell(&config.attacks[0], config.rates[0]);
    let bench = Workbench::prepare(&cell, Some(&cache))?;

    let listing = EvalSetListing {
        victim: config.victim.name().to_string(),
        backend: bench.backend.name().to_string(),
        dataset_hash: format!("{:016x}", dataset_hash(&config.dataset)?),
        included: bench.eval.claims.iter().map(|c| c.id.clone()).collect(),
        excluded: bench
            .eval
            .excluded
            .iter()
            .map(|(claim_id, reason)| ExcludedClaim {
                claim_id: claim_id.clone(),
                reason: reason.clone(),
            })
            .collect(),
        warnings: bench.eval.warnings.clone(),
    };
    write_pretty_json(&listing, &eval_set_path(out))?;

    let probes_dir = out.join("probes");
    std::fs::create_dir_all(&probes_dir)
        .with_context(|| format!("create {}", probes_dir.display()))?;
    for claim in &bench.eval.claims {
        let report = &bench.eval.probes[&claim.id];
        write_pretty_json(report, &probes_dir.join(format!("{}.json", sanitize_id(&claim.id))))?;
    }

    println!(
        "probe: {} of {} claims enter the eval set",
        listing.included.len(),
        bench.dataset.claims.len()
    );
    for entry in &listing.excluded {
        println!("  excluded {}: {}", entry.claim_id, entry.reason);
    }
    for warning in &listing.warnings {
        println!("  warning: {warning}");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// attack

fn attack_needs_probe(kind: &AttackKind) -> bool {
    matches!(kind, AttackKind::Fact2Fiction(_))
}

pub fn cmd_attack(config: &RunConfig, out: &Path) -> Result<()> {
    precheck(config)?;
    let embedder = build_embedder(&config.embedder)?;
    let dataset = load_dataset(&config.dataset, embedder.as_ref())?;
    let backend = build_backend(&config.backend)?;

    let listing: Option<EvalSetListing> = if eval_set_path(out).is_file() {
        Some(read_json(&eval_set_path(out))?)
    } else {
        None
    };
    let claim_ids: Vec<String> = match &listing {
        Some(listing) => listing.included.clone(),
        None => dataset
            .claims
            .iter()
            .filter(|c| invert_label(c.gold_label).is_ok())
            .map(|c| c.id.clone())
            .collect(),
    };
    let claims: BTreeMap<&str, &Claim> =
        dataset.claims.iter().map(|c| (c.id.as_str(), c)).collect();
    let max_rate = config.rates.iter().copied().fold(0.0_f64, f64::max);

    let cache_dir = probe_cache_dir(out);
    let cache = cache_dir.is_dir().then(|| ProbeCache::new(&cache_dir)).transpose()?;

    for attack_name in &config.attacks {
        let Some(kind) = parse_attack(attack_name)? else {
            println!("attack {attack_name}: nothing to generate");
            continue;
        };
        if attack_needs_probe(&kind) && cache.is_none() {
            return Err(usage_error(format!(
                "attack {attack_name} needs cached probe reports; run `factgauntlet probe` with \
                 this config first"
            )));
        }
        let attack_dir = out.join("poisons").join(attack_name);
        std::fs::create_dir_all(&attack_dir)
            .with_context(|| format!("create {}", attack_dir.display()))?;
        for claim_id in &claim_ids {
            let claim = claims
                .get(claim_id.as_str())
                .copied()
                .with_context(|| format!("eval set lists unknown claim {claim_id:?}"))?;
            let kb = dataset.kb(claim_id)?;
            let m = compute_poison_count(max_rate, kb.len())?;
            let probe = match (&kind, &cache) {
                (AttackKind::Fact2Fiction(_), Some(cache)) => {
                    let report = cache.get(config.victim, backend.name(), claim_id);
                    if report.is_none() {
                        return Err(usage_error(format!(
                            "no cached probe for claim {claim_id:?}; run `factgauntlet probe` \
                             with this config first"
                        )));
                    }
                    report
                }
                _ => None,
            };
            let poison = run_attack(
                &kind,
                claim,
                m,
                probe.as_ref(),
                backend.as_ref(),
                trial_seed(config.rng_seed, 0),
            )?;
            save_poison_set(&poison, &attack_dir.join(format!("{}.json", sanitize_id(claim_id))))?;
        }
        println!(
            "attack {attack_name}: wrote {} poison sets sized for rate {max_rate}",
            claim_ids.len()
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// evaluate

pub fn cmd_evaluate(config: &RunConfig, out: &Path, trace: bool) -> Result<PathBuf> {
    precheck(config)?;
    std::fs::create_dir_all(out).with_context(|| format!("create {}", out.display()))?;
    let cache = ProbeCache::new(probe_cache_dir(out))?;
    let hash = dataset_hash(&config.dataset)?;
    let id = run_id(config, hash);
    let dir = run_dir(out, &id);
    std::fs::create_dir_all(&dir).with_context(|| format!("create {}", dir.display()))?;

    let first = config.cell(&config.attacks[0], config.rates[0]);
    let bench = Workbench::prepare(&first, Some(&cache))?;
    let victim_label = config.victim.name().to_string();
    let defense_label = config.defense.label();

    let mut rows: Vec<RunRow> = Vec::new();
    let mut summary_rows: Vec<SummaryRow> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut cell_results: BTreeMap<(String, String), Vec<ClaimResult>> = BTreeMap::new();
    for cell in config.cells() {
        let attack = cell.attack.clone();
        let rate = cell.poison_rate;
        let report_dir =
            trace.then(|| dir.join("reports").join(sanitize_id(&format!("{attack}-{rate}"))));
        let outcome = run_cell(&bench, &cell, report_dir.as_deref(), trace)
            .with_context(|| format!("attack {attack} at rate {rate}"))?;
        summary_rows.push(SummaryRow {
            attack: attack.clone(),
            victim: victim_label.clone(),
            defense: defense_label.clone(),
            rate,
            asr: outcome.summary.asr,
            sfr: outcome.summary.sfr,
            sir: outcome.summary.sir,
            n: outcome.summary.n_claims,
        });
        for warning in &outcome.warnings {
            warnings.push(format!("{attack} rate {rate}: {warning}"));
        }
        for result in &outcome.results {
            rows.push(RunRow {
                attack: attack.clone(),
                victim: victim_label.clone(),
                defense: defense_label.clone(),
                result: result.clone(),
            });
        }
        cell_results.insert((attack, format!("{rate}")), outcome.results);
    }

    let claims_path = dir.join("claims.jsonl");
    let file = std::fs::File::create(&claims_path)
        .with_context(|| format!("create {}", claims_path.display()))?;
    let mut writer = std::io::BufWriter::new(file);
    for row in &rows {
        serde_json::to_writer(&mut writer, row)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;

    write_summary_csv(&summary_rows, &dir.join("summary.csv"))?;

    let mut comparisons: Vec<PairedComparison> = Vec::new();
    for &rate in &config.rates {
        let key = |attack: &str| (attack.to_string(), format!("{rate}"));
        for attack in &config.attacks {
            for baseline in &config.attacks {
                if attack == baseline {
                    continue;
                }
                let a = &cell_results[&key(attack)];
                let b = &cell_results[&key(baseline)];
                let (wins_a, wins_b) = match paired_success(a, b) {
                    Ok(pair) => pair,
                    Err(err) => {
                        warnings.push(format!(
                            "no p-value for {attack} vs {baseline} at rate {rate}: {err}"
                        ));
                        continue;
                    }
                };
                let seed = fnv1a64(
                    config.rng_seed,
                    format!("bootstrap|{attack}|{baseline}|{rate}").as_bytes(),
                );
                let p_value =
                    paired_bootstrap(&wins_a, &wins_b, config.bootstrap_resamples, seed)?;
                comparisons.push(PairedComparison {
                    rate,
                    attack: attack.clone(),
                    baseline: baseline.clone(),
                    p_value,
                    resamples: config.bootstrap_resamples,
                });
            }
        }
    }
    write_pretty_json(&comparisons, &dir.join("pvalues.json"))?;

    let summary = SummaryFile {
        run_id: id.clone(),
        compare_with: config.compare_with.clone(),
        rows: summary_rows,
        excluded: bench
            .eval
            .excluded
            .iter()
            .map(|(claim_id, reason)| ExcludedClaim {
                claim_id: claim_id.clone(),
                reason: reason.clone(),
            })
            .collect(),
        warnings,
    };
    write_pretty_json(&summary, &dir.join("summary.json"))?;

    let manifest = RunManifest {
        run_id: id.clone(),
        created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        config: config.clone(),
        dataset_hash: format!("{hash:016x}"),
        rng_seed: config.rng_seed,
        trial_seeds: (0..config.trials).map(|t| trial_seed(config.rng_seed, t)).collect(),
        core_version: factgauntlet_core::VERSION.to_string(),
        cli_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_pretty_json(&manifest, &dir.join("manifest.json"))?;

    println!("run {id}: {} claims in the eval set", bench.eval.claims.len());
    for row in &summary.rows {
        println!(
            "  {} rate {}: asr {:.3} sfr {:.3} sir {:.3} (n={})",
            row.attack, row.rate, row.asr, row.sfr, row.sir, row.n
        );
    }
    for warning in &summary.warnings {
        println!("  warning: {warning}");
    }
    Ok(dir)
}

// ---------------------------------------------------------------------------
// report

pub fn cmd_report(out: &Path, run_ids: &[String]) -> Result<()> {
    for id in run_ids {
        let dir = run_dir(out, id);
        let summary_path = dir.join("summary.json");
        if !summary_path.is_file() {
            bail!("unknown run id {id:?}: no summary at {}", summary_path.display());
        }
        let summary: SummaryFile = read_json(&summary_path)?;
        let pvalues_path = dir.join("pvalues.json");
        let comparisons: Vec<PairedComparison> = if pvalues_path.is_file() {
            read_json(&pvalues_path)?
        } else {
            Vec::new()
        };
        let text = render_report(&summary, &comparisons);
        print!("{text}");
        let report_path = dir.join("report.txt");
        std::fs::write(&report_path, &text)
            .with_context(|| format!("write {}", report_path.display()))?;
    }
    Ok(())
}

/// One table per poison rate. A `sig` column appears only when the run named
/// a baseline attack; `+` marks p <= 0.05 against it.
pub fn render_report(summary: &SummaryFile, comparisons: &[PairedComparison]) -> String {
    let mut out = String::new();
    let victim = summary.rows.first().map(|r| r.victim.as_str()).unwrap_or("-");
    let defense = summary.rows.first().map(|r| r.defense.as_str()).unwrap_or("-");
    let _ = writeln!(out, "run {} (victim {victim}, defense {defense})", summary.run_id);
    if let Some(baseline) = &summary.compare_with {
        let _ = writeln!(out, "significance baseline: {baseline} (one-sided, alpha 0.05)");
    }

    let mut rates: Vec<f64> = Vec::new();
    for row in &summary.rows {
        if !rates.contains(&row.rate) {
            rates.push(row.rate);
        }
    }
    let name_width = summary
        .rows
        .iter()
        .map(|r| r.attack.len())
        .max()
        .unwrap_or(6)
        .max("attack".len());

    for rate in rates {
        let _ = writeln!(out, "\nrate {rate}");
        let _ = write!(out, "  {:<name_width$}  {:>7}  {:>7}  {:>7}  {:>5}", "attack", "asr", "sfr", "sir", "n");
        let sig_column = summary.compare_with.is_some();
        if sig_column {
            let _ = write!(out, "  sig");
        }
        let _ = writeln!(out);
        for row in summary.rows.iter().filter(|r| r.rate == rate) {
            let _ = write!(
                out,
                "  {:<name_width$}  {:>7.3}  {:>7.3}  {:>7.3}  {:>5}",
                row.attack, row.asr, row.sfr, row.sir, row.n
            );
            if sig_column {
                let baseline = summary.compare_with.as_deref().unwrap();
                let significant = comparisons.iter().any(|c| {
                    c.rate == rate
                        && c.attack == row.attack
                        && c.baseline == baseline
                        && c.p_value <= 0.05
                });
                if significant && row.attack != baseline {
                    let _ = write!(out, "  +");
                }
            }
            let _ = writeln!(out);
        }
    }
    if !summary.warnings.is_empty() {
        let _ = writeln!(out, "\nwarnings:");
        for warning in &summary.warnings {
            let _ = writeln!(out, "  {warning}");
        }
    }
    out
}
