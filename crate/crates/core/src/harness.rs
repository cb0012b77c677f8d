//! Experiment driver: efficiency benchmarks, the fixed-layer agreement
//! study, and report files.

use std::collections::BTreeSet;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;

use num_rational::Ratio;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::config::TokenId;
use crate::engine::{generate, reference_decode, teacher_forced_trace, GenerationResult};
use crate::error::{Error, Result};
use crate::heads::HeadSet;
use crate::interleave::Modality;
use crate::policy::{ratio_to_f64, speedup, ExitPolicy, PolicyStack};
use crate::prompts;
use crate::sampling::SamplingConfig;

/// Exit-layer statistics for one modality, summed over every run of a policy.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityStats {
    pub steps: usize,
    pub exit_layer_sum: usize,
    /// Steps inside runs that reached their full length (whole chunks).
    pub complete_steps: usize,
    pub complete_exit_layer_sum: usize,
    pub avg_exit_layer: Option<f64>,
    pub speedup_pct: Option<f64>,
    /// Block evaluations attributed to this modality's positions, backfill included.
    pub layer_computations: usize,
    pub probe_count: usize,
}

impl ModalityStats {
    fn finish(&mut self, num_layers: usize) {
        if let Some(avg) = self.avg() {
            self.avg_exit_layer = Some(ratio_to_f64(avg));
            self.speedup_pct = Some(100.0 * ratio_to_f64(speedup(avg, num_layers)));
        }
    }

    /// Exact average exit layer over all steps.
    pub fn avg(&self) -> Option<Ratio<u64>> {
        (self.steps > 0).then(|| Ratio::new(self.exit_layer_sum as u64, self.steps as u64))
    }

    /// Exact average over whole runs only.
    pub fn complete_avg(&self) -> Option<Ratio<u64>> {
        (self.complete_steps > 0).then(|| Ratio::new(self.complete_exit_layer_sum as u64, self.complete_steps as u64))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub policy: String,
    pub num_layers: usize,
    pub runs: usize,
    pub text: ModalityStats,
    pub speech: ModalityStats,
    /// Sum of per-step exit layers: the sequential depth the decode waits on.
    pub seq_depth: usize,
    /// All block evaluations including backfill.
    pub layer_computations: usize,
    pub backfill_layers: usize,
    pub probe_count: usize,
    /// Closed-form averages (`"25"`, `"989/26"`); absent for confidence policies.
    pub expected_text_depth: Option<String>,
    pub expected_speech_depth: Option<String>,
}

impl EfficiencyReport {
    pub fn stats(&self, modality: Modality) -> &ModalityStats {
        match modality {
            Modality::Text => &self.text,
            Modality::Speech => &self.speech,
        }
    }

    pub fn expected(&self, modality: Modality) -> Option<Ratio<u64>> {
        let s = match modality {
            Modality::Text => &self.expected_text_depth,
            Modality::Speech => &self.expected_speech_depth,
        };
        s.as_ref().and_then(|s| s.parse().ok())
    }
}

fn run_length(modality: Modality, config: &crate::ModelConfig) -> usize {
    match modality {
        Modality::Text => config.n_text,
        Modality::Speech => config.n_speech,
    }
}

/// Folds one generation into per-modality statistics.
pub fn accumulate(report: &mut EfficiencyReport, result: &GenerationResult, config: &crate::ModelConfig) {
    let l = result.num_layers;
    let steps = &result.steps;
    let mut i = 0;
    while i < steps.len() {
        // one maximal run of same-modality steps
        let m = steps[i].modality;
        let mut j = i;
        while j < steps.len() && steps[j].modality == m && (j == i || steps[j].local_index == steps[j - 1].local_index + 1) {
            j += 1;
        }
        let complete = j - i == run_length(m, config);
        let stats = match m {
            Modality::Text => &mut report.text,
            Modality::Speech => &mut report.speech,
        };
        for s in &steps[i..j] {
            stats.steps += 1;
            stats.exit_layer_sum += s.exit_layer;
            if complete {
                stats.complete_steps += 1;
                stats.complete_exit_layer_sum += s.exit_layer;
            }
            // Every position ends complete, so an exit at e owes L - e more.
            stats.layer_computations += l;
            stats.probe_count += s.entropies.as_ref().map_or(0, Vec::len);
        }
        i = j;
    }
    report.runs += 1;
    report.seq_depth += result.seq_depth();
    report.layer_computations += result.layer_computations();
    report.backfill_layers += result.backfill_layers();
    report.probe_count += result.probe_count();
}

/// Probe count implied by the exit trace: `e - l_min + 1` for a confident
/// exit at `e`, `L - l_min` when every probe failed.
pub fn implied_probe_count(result: &GenerationResult, policy: &PolicyStack) -> usize {
    let l = result.num_layers;
    result
        .steps
        .iter()
        .map(|s| match policy.governing(s.modality) {
            Some(ExitPolicy::Confidence { min_layer, .. }) if *min_layer < l => {
                if s.exit_layer < l {
                    s.exit_layer - min_layer + 1
                } else {
                    l - min_layer
                }
            }
            _ => 0,
        })
        .sum()
}

/// Sampling for the `index`-th prompt: nucleus seeds are offset per prompt.
pub fn prompt_sampling(sampling: &SamplingConfig, index: usize) -> SamplingConfig {
    match sampling.seed() {
        Some(seed) => sampling.reseeded(seed.wrapping_add(index as u64)),
        None => sampling.clone(),
    }
}

pub fn run_benchmark(
    backbone: &Backbone,
    heads: &HeadSet,
    policies: &[PolicyStack],
    prompts: &[Vec<TokenId>],
    sampling: &SamplingConfig,
    max_new_tokens: usize,
) -> Result<Vec<EfficiencyReport>> {
    if prompts.is_empty() {
        return Err(Error::EmptyInput("prompt list"));
    }
    let config = backbone.config();
    let l = config.num_layers;
    policies
        .iter()
        .map(|policy| {
            let annotate = |e: Error| Error::Run { policy: policy.to_string(), source: Box::new(e) };
            let results: Vec<GenerationResult> = prompts
                .par_iter()
                .enumerate()
                .map(|(i, p)| generate(backbone, heads, policy, p, &prompt_sampling(sampling, i), max_new_tokens))
                .collect::<Result<_>>()
                .map_err(annotate)?;
            let expected = |m| policy.expected_depth_for(config, m).ok().map(|r| r.to_string());
            let mut report = EfficiencyReport {
                policy: policy.to_string(),
                num_layers: l,
                runs: 0,
                text: ModalityStats::default(),
                speech: ModalityStats::default(),
                seq_depth: 0,
                layer_computations: 0,
                backfill_layers: 0,
                probe_count: 0,
                expected_text_depth: expected(Modality::Text),
                expected_speech_depth: expected(Modality::Speech),
            };
            for r in &results {
                accumulate(&mut report, r, config);
            }
            report.text.finish(l);
            report.speech.finish(l);
            Ok(report)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRow {
    pub layer: usize,
    pub agreements: usize,
    pub n_steps: usize,
    /// `None` when no speech step was observed.
    pub agreement_pct: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleStudyResult {
    pub num_layers: usize,
    pub rows: Vec<AgreementRow>,
    pub prompt_digest: String,
    pub seed: Option<u64>,
}

impl OracleStudyResult {
    pub fn agreement(&self, layer: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.layer == layer).and_then(|r| r.agreement_pct)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,agreement_pct,n_steps\n");
        for r in &self.rows {
            let pct = r.agreement_pct.map_or_else(|| "undefined".to_string(), |p| format!("{p:.2}"));
            out.push_str(&format!("{},{},{}\n", r.layer, pct, r.n_steps));
        }
        out
    }
}

/// Full-depth generation per prompt, then a teacher-forced pass reading each
/// probe layer's head; agreement is the share of speech steps whose layer
/// prediction equals the final-layer prediction.
pub fn run_oracle_study(
    backbone: &Backbone,
    heads: &HeadSet,
    prompts: &[Vec<TokenId>],
    layers: &BTreeSet<usize>,
    sampling: &SamplingConfig,
    max_new_tokens: usize,
) -> Result<OracleStudyResult> {
    heads.covers(layers)?;
    let l = backbone.num_layers();
    let mut probe = layers.clone();
    probe.insert(l);
    let per_prompt: Vec<Vec<(usize, usize, usize)>> = prompts
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let g = reference_decode(backbone, p, &prompt_sampling(sampling, i), max_new_tokens)?;
            let mut seq = p.clone();
            seq.extend(g.result.tokens());
            let trace = teacher_forced_trace(backbone, heads, &seq, p.len(), &probe)?;
            let speech: Vec<_> = trace.iter().filter(|s| s.modality == Modality::Speech).collect();
            Ok(layers
                .iter()
                .map(|&layer| {
                    let agree = speech.iter().filter(|s| s.predictions[&layer] == s.predictions[&l]).count();
                    (layer, agree, speech.len())
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let rows = layers
        .iter()
        .enumerate()
        .map(|(k, &layer)| {
            let agreements: usize = per_prompt.iter().map(|r| r[k].1).sum();
            let n_steps: usize = per_prompt.iter().map(|r| r[k].2).sum();
            AgreementRow {
                layer,
                agreements,
                n_steps,
                agreement_pct: (n_steps > 0).then(|| 100.0 * agreements as f64 / n_steps as f64),
            }
        })
        .collect();
    Ok(OracleStudyResult {
        num_layers: l,
        rows,
        prompt_digest: prompts::digest(prompts),
        seed: sampling.seed(),
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

/// Everything a report file records about a benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub artifact_version: String,
    pub generated_at: String,
    pub config_digest: String,
    pub backbone_digest: String,
    pub heads_digest: String,
    pub sampling: SamplingConfig,
    pub prompt_digest: String,
    pub max_new_tokens: usize,
    pub eos_placement: String,
    /// Config fields replaced by flags or environment variables.
    #[serde(default)]
    pub overrides: Vec<String>,
    pub reports: Vec<EfficiencyReport>,
}

pub const CSV_HEADER: &str = "policy,modality,avg_exit_layer,speedup_pct,seq_depth,layer_computations,probe_count";

fn opt(x: Option<f64>, digits: usize) -> String {
    x.map_or_else(String::new, |v| format!("{v:.digits$}"))
}

pub fn report_csv(file: &ReportFile) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in &file.reports {
        for m in Modality::ALL {
            let s = r.stats(m);
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.policy,
                m,
                opt(s.avg_exit_layer, 6),
                opt(s.speedup_pct, 4),
                s.exit_layer_sum,
                s.layer_computations,
                s.probe_count
            ));
        }
    }
    out
}

pub fn render_report(file: &ReportFile, format: ReportFormat) -> Result<String> {
    if file.reports.is_empty() {
        return Err(Error::EmptyInput("reports"));
    }
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(file)? + "\n",
        ReportFormat::Csv => report_csv(file),
    })
}

/// Writes `contents` to a path that must not exist yet.
pub fn write_once(path: &Path, contents: &str) -> Result<()> {
    let mut f = OpenOptions::new().write(true).create_new(true).open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AlreadyExists {
            Error::AlreadyExists(path.display().to_string())
        } else {
            Error::Io(e)
        }
    })?;
    f.write_all(contents.as_bytes())?;
    Ok(())
}

pub fn emit_report(file: &ReportFile, format: ReportFormat, path: &Path) -> Result<()> {
    write_once(path, &render_report(file, format)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::policy::SparkVariant;

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        // ties get averaged ranks
        let r = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 1.0, 2.0, 3.0]);
        assert!(r > 0.9 && r < 1.0);
    }

    fn setup() -> (Backbone, HeadSet) {
        let b = Backbone::new(ModelConfig { max_seq_len: 128, ..ModelConfig::toy() }).unwrap();
        let h = HeadSet::warm_start(&b, &(1..8).collect());
        (b, h)
    }

    #[test]
    fn disable_reports_full_depth() {
        let (b, h) = setup();
        let prompts = prompts::synthetic(b.config(), 4, 1);
        let reps = run_benchmark(&b, &h, &[ExitPolicy::Disable.into()], &prompts, &SamplingConfig::Greedy, 20).unwrap();
        assert_eq!(reps[0].text.avg_exit_layer, Some(8.0));
        assert_eq!(reps[0].speech.avg_exit_layer, Some(8.0));
        assert_eq!(reps[0].speech.speedup_pct, Some(0.0));
    }

    #[test]
    fn schedule_average_matches_closed_form() {
        let (b, h) = setup();
        let prompts = prompts::synthetic(b.config(), 4, 2);
        let policy: PolicyStack = ExitPolicy::spark(SparkVariant::Triple, 3).into();
        let reps = run_benchmark(&b, &h, &[policy], &prompts, &SamplingConfig::nucleus(0.7, 0.9, 1), 23).unwrap();
        let r = &reps[0];
        assert_eq!(r.speech.complete_avg(), r.expected(Modality::Speech));
        assert_eq!(r.layer_computations, r.seq_depth + r.backfill_layers);
        assert_eq!(r.text.layer_computations + r.speech.layer_computations, r.layer_computations);
    }

    #[test]
    fn confidence_zero_threshold_never_exits() {
        let (b, h) = setup();
        let prompts = prompts::synthetic(b.config(), 3, 3);
        let policy: PolicyStack = ExitPolicy::confidence(0.0, 4).into();
        let reps = run_benchmark(&b, &h, &[policy], &prompts, &SamplingConfig::Greedy, 15).unwrap();
        assert_eq!(reps[0].speech.avg_exit_layer, Some(8.0));
        assert_eq!(reps[0].probe_count, reps[0].speech.steps * 4);
    }

    #[test]
    fn oracle_study_final_layer_and_empty_denominator() {
        let (b, h) = setup();
        let prompts = prompts::synthetic(b.config(), 3, 4);
        let res = run_oracle_study(&b, &h, &prompts, &BTreeSet::from([2, 8]), &SamplingConfig::Greedy, 12).unwrap();
        assert_eq!(res.agreement(8), Some(100.0));
        assert!(res.to_csv().contains("\n8,100.00,"));
        // a single text step has no speech positions
        let empty = run_oracle_study(&b, &h, &prompts, &BTreeSet::from([8]), &SamplingConfig::Greedy, 1).unwrap();
        assert_eq!(empty.rows[0].agreement_pct, None);
        assert!(empty.to_csv().contains("8,undefined,0"));
    }

    #[test]
    fn report_files_are_write_once_and_round_trip() {
        let (b, h) = setup();
        let prompts = prompts::synthetic(b.config(), 2, 5);
        let reports = run_benchmark(&b, &h, &["spark-even-4".parse().unwrap()], &prompts, &SamplingConfig::Greedy, 10).unwrap();
        let file = ReportFile {
            artifact_version: crate::ARTIFACT_VERSION.into(),
            generated_at: "0".into(),
            config_digest: "c".into(),
            backbone_digest: b.digest().into(),
            heads_digest: h.digest(),
            sampling: SamplingConfig::Greedy,
            prompt_digest: prompts::digest(&prompts),
            max_new_tokens: 10,
            eos_placement: crate::interleave::EOS_PLACEMENT.into(),
            overrides: vec![],
            reports,
        };
        let dir = tempfile::tempdir().unwrap();
        let json = dir.path().join("report.json");
        emit_report(&file, ReportFormat::Json, &json).unwrap();
        assert!(matches!(emit_report(&file, ReportFormat::Json, &json), Err(Error::AlreadyExists(_))));
        let back: ReportFile = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
        assert_eq!(back, file);
        let csv = render_report(&file, ReportFormat::Csv).unwrap();
        assert!(csv.starts_with("policy,modality,avg_exit_layer,speedup_pct,seq_depth,layer_computations,probe_count\n"));
        assert_eq!(csv.lines().count(), 3);
        let empty = ReportFile { reports: vec![], ..file };
        assert!(render_report(&empty, ReportFormat::Csv).is_err());
    }
}
