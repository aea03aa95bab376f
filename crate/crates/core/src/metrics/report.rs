use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::process::Command;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{estoi, seg_snr, EstoiConstants, ESTOI};
use crate::data::{Manifest, ManifestEntry, Split};
use crate::dsp::{load_mono, ResampleQuality, SAMPLE_RATE};
use crate::{Error, Result, TOOL_VERSION};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub id: String,
    pub noise_type: String,
    pub snr_db: f64,
    pub estoi: f64,
    pub estoi_raw: f64,
    pub seg_snr_db: f64,
    pub noisy_estoi: Option<f64>,
    pub noisy_seg_snr_db: Option<f64>,
    pub pesq: Option<f64>,
}

/// Arithmetic means over one group of utterances. Optional columns are
/// present only when every member has them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMeans {
    pub key: String,
    pub count: usize,
    pub estoi: f64,
    pub seg_snr_db: f64,
    pub noisy_estoi: Option<f64>,
    pub noisy_seg_snr_db: Option<f64>,
    pub pesq: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissingEntry {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tool_version: String,
    pub run_config: serde_json::Value,
    pub estoi_constants: EstoiConstants,
    pub utterances: Vec<UtteranceMetrics>,
    /// Ascending SNR.
    pub by_snr: Vec<GroupMeans>,
    /// Alphabetical noise type.
    pub by_noise_type: Vec<GroupMeans>,
    pub overall: Option<GroupMeans>,
    pub missing: Vec<MissingEntry>,
    /// False when any test entry could not be scored.
    pub complete: bool,
    pub warnings: Vec<String>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn mean_opt(items: &[&UtteranceMetrics], f: impl Fn(&UtteranceMetrics) -> Option<f64>) -> Option<f64> {
    let vals: Option<Vec<f64>> = items.iter().map(|u| f(u)).collect();
    vals.map(|v| mean(v.into_iter()))
}

fn group(key: String, items: &[&UtteranceMetrics]) -> GroupMeans {
    GroupMeans {
        key,
        count: items.len(),
        estoi: mean(items.iter().map(|u| u.estoi)),
        seg_snr_db: mean(items.iter().map(|u| u.seg_snr_db)),
        noisy_estoi: mean_opt(items, |u| u.noisy_estoi),
        noisy_seg_snr_db: mean_opt(items, |u| u.noisy_seg_snr_db),
        pesq: mean_opt(items, |u| u.pesq),
    }
}

fn snr_key(snr: f64) -> String {
    format!("{snr}")
}

/// Builds the grouped report from per-utterance records.
pub fn summarize(utterances: Vec<UtteranceMetrics>, missing: Vec<MissingEntry>, warnings: Vec<String>) -> MetricReport {
    let mut snrs: Vec<f64> = utterances.iter().map(|u| u.snr_db).collect();
    snrs.sort_by(|a, b| a.partial_cmp(b).expect("finite SNR"));
    snrs.dedup();
    let by_snr = snrs
        .iter()
        .map(|&s| {
            let items: Vec<&UtteranceMetrics> = utterances.iter().filter(|u| u.snr_db == s).collect();
            group(snr_key(s), &items)
        })
        .collect();
    let mut noise: BTreeMap<&str, Vec<&UtteranceMetrics>> = BTreeMap::new();
    for u in &utterances {
        noise.entry(u.noise_type.as_str()).or_default().push(u);
    }
    let by_noise_type = noise.into_iter().map(|(k, v)| group(k.to_string(), &v)).collect();
    let all: Vec<&UtteranceMetrics> = utterances.iter().collect();
    let overall = (!all.is_empty()).then(|| group("all".into(), &all));
    MetricReport {
        tool_version: TOOL_VERSION.to_string(),
        run_config: serde_json::Value::Null,
        estoi_constants: ESTOI,
        complete: missing.is_empty(),
        utterances,
        by_snr,
        by_noise_type,
        overall,
        missing,
        warnings,
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluateOptions {
    /// Also score the unprocessed mixture.
    pub include_noisy: bool,
    /// External quality tool, e.g. `pesq +16000 {clean} {degraded}`; the
    /// last number printed on stdout is taken as the score.
    pub pesq_command: Option<String>,
    pub resample_quality: ResampleQuality,
}

fn run_pesq(template: &str, clean: &Path, degraded: &Path) -> std::result::Result<f64, String> {
    let args: Vec<String> = template
        .split_whitespace()
        .map(|a| {
            a.replace("{clean}", &clean.to_string_lossy())
                .replace("{degraded}", &degraded.to_string_lossy())
        })
        .collect();
    let (prog, rest) = args.split_first().ok_or("empty quality command")?;
    let out = Command::new(prog).args(rest).output().map_err(|e| format!("{prog}: {e}"))?;
    if !out.status.success() {
        return Err(format!("{prog} exited with {}", out.status));
    }
    String::from_utf8_lossy(&out.stdout)
        .split(|c: char| c.is_whitespace() || c == '=' || c == ',')
        .filter_map(|t| t.parse::<f64>().ok())
        .next_back()
        .ok_or_else(|| format!("{prog} printed no number"))
}

enum Outcome {
    Scored(UtteranceMetrics, Option<String>),
    Missing(MissingEntry),
}

fn score_entry(e: &ManifestEntry, enhanced_dir: &Path, opts: &EvaluateOptions) -> Result<Outcome> {
    let id = e.id();
    let path = enhanced_dir.join(format!("{id}.wav"));
    if !path.is_file() {
        return Ok(Outcome::Missing(MissingEntry {
            id,
            reason: format!("{} not found", path.display()),
        }));
    }
    let pair = e.render(opts.resample_quality)?;
    let enhanced = load_mono(&path, opts.resample_quality)?;
    if enhanced.len() != pair.clean.len() {
        return Ok(Outcome::Missing(MissingEntry {
            id,
            reason: format!("{} samples, clean has {}", enhanced.len(), pair.clean.len()),
        }));
    }
    let est = estoi(&pair.clean, &enhanced, SAMPLE_RATE)?;
    let (noisy_estoi, noisy_seg) = if opts.include_noisy {
        (
            Some(estoi(&pair.clean, &pair.noisy, SAMPLE_RATE)?.score),
            Some(seg_snr(&pair.clean, &pair.noisy)?),
        )
    } else {
        (None, None)
    };
    let (pesq, warning) = match &opts.pesq_command {
        None => (None, None),
        Some(t) => match run_pesq(t, &e.clean_path, &path) {
            Ok(v) => (Some(v), None),
            Err(msg) => (None, Some(format!("{id}: {msg}"))),
        },
    };
    Ok(Outcome::Scored(
        UtteranceMetrics {
            id,
            noise_type: e.noise_type(),
            snr_db: e.snr_db,
            estoi: est.score,
            estoi_raw: est.raw,
            seg_snr_db: seg_snr(&pair.clean, &enhanced)?,
            noisy_estoi,
            noisy_seg_snr_db: noisy_seg,
            pesq,
        },
        warning,
    ))
}

/// Scores every test entry against `{enhanced_dir}/{id}.wav`. Missing or
/// mismatched files are listed, not fatal.
pub fn evaluate_manifest(manifest: &Manifest, enhanced_dir: &Path, opts: &EvaluateOptions) -> Result<MetricReport> {
    let entries: Vec<&ManifestEntry> = manifest.split(Split::Test).collect();
    if entries.is_empty() {
        return Err(Error::invalid("manifest has no test entries"));
    }
    let outcomes: Vec<Result<Outcome>> = entries.par_iter().map(|e| score_entry(e, enhanced_dir, opts)).collect();
    let mut utterances = Vec::new();
    let mut missing = Vec::new();
    let mut warnings = Vec::new();
    for o in outcomes {
        match o? {
            Outcome::Scored(u, w) => {
                utterances.push(u);
                warnings.extend(w);
            }
            Outcome::Missing(m) => missing.push(m),
        }
    }
    Ok(summarize(utterances, missing, warnings))
}

impl MetricReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SNR columns ascending with a trailing overall average; one row per
    /// metric and condition.
    pub fn render_table(&self) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<18}", "SNR (dB)");
        for g in &self.by_snr {
            let _ = write!(out, "{:>8}", g.key);
        }
        let _ = writeln!(out, "{:>8}", "Avg.");
        type Pick = fn(&GroupMeans) -> Option<f64>;
        let rows: [(&str, Pick, usize); 5] = [
            ("ESTOI noisy", |g| g.noisy_estoi, 3),
            ("ESTOI enhanced", |g| Some(g.estoi), 3),
            ("SegSNR noisy", |g| g.noisy_seg_snr_db, 2),
            ("SegSNR enhanced", |g| Some(g.seg_snr_db), 2),
            ("PESQ enhanced", |g| g.pesq, 2),
        ];
        for (label, pick, prec) in rows {
            let Some(overall) = self.overall.as_ref() else { break };
            if pick(overall).is_none() {
                continue;
            }
            let _ = write!(out, "{label:<18}");
            for g in self.by_snr.iter().chain(std::iter::once(overall)) {
                match pick(g) {
                    Some(v) => {
                        let _ = write!(out, "{v:>8.prec$}");
                    }
                    None => {
                        let _ = write!(out, "{:>8}", "-");
                    }
                }
            }
            out.push('\n');
        }
        if !self.complete {
            let _ = writeln!(out, "incomplete: {} entries missing", self.missing.len());
        }
        out
    }
}
