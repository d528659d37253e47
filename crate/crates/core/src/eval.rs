//! BLEU scoring, inter-model diversity matrices, and monolingual-size
//! sweep reports.

use crate::corpus::TokenSeq;
use crate::decoding::{beam_search_single, DecodeConfig, DecodeError};
use crate::models::BasicModel;
use serde::Serialize;
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Decode(#[from] DecodeError),
}

const EPSILON: f64 = 1e-9;

/// Corpus-level BLEU-4. Precisions with zero matches are floored at
/// epsilon; orders with no n-grams at all count as perfect so that a
/// corpus compared against itself scores exactly 100.
#[derive(Debug, Clone, Serialize)]
pub struct BleuReport {
    pub bleu: f64,
    pub precisions: [f64; 4],
    pub brevity_penalty: f64,
    pub hyp_tokens: usize,
    pub ref_tokens: usize,
    pub smoothing: &'static str,
}

impl BleuReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn ngram_counts(tokens: &[u32], n: usize) -> HashMap<&[u32], usize> {
    let mut counts: HashMap<&[u32], usize> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Standard clipped corpus BLEU with a single reference per hypothesis.
/// Terminal eos tokens are excluded from both sides.
pub fn corpus_bleu(hyps: &[TokenSeq], refs: &[TokenSeq]) -> Result<BleuReport, EvalError> {
    if hyps.len() != refs.len() {
        return Err(EvalError::Input(format!(
            "{} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(EvalError::Input("empty corpus".into()));
    }
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let mut hyp_tokens = 0usize;
    let mut ref_tokens = 0usize;
    for (h, r) in hyps.iter().zip(refs) {
        let h = h.content();
        let r = r.content();
        hyp_tokens += h.len();
        ref_tokens += r.len();
        for n in 1..=4 {
            if h.len() < n {
                continue;
            }
            totals[n - 1] += h.len() - n + 1;
            let ref_counts = ngram_counts(r, n);
            let hyp_counts = ngram_counts(h, n);
            for (gram, count) in hyp_counts {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
        }
    }
    let mut precisions = [0.0f64; 4];
    for n in 0..4 {
        precisions[n] = if totals[n] == 0 {
            1.0
        } else if matches[n] == 0 {
            EPSILON
        } else {
            matches[n] as f64 / totals[n] as f64
        };
    }
    let brevity_penalty = if hyp_tokens == 0 {
        // 0/0 counts as matched lengths so self-comparison stays at 100
        if ref_tokens == 0 { 1.0 } else { 0.0 }
    } else {
        (1.0 - ref_tokens as f64 / hyp_tokens as f64).exp().min(1.0)
    };
    let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
    let bleu = 100.0 * brevity_penalty * log_mean.exp();
    Ok(BleuReport {
        bleu,
        precisions,
        brevity_penalty,
        hyp_tokens,
        ref_tokens,
        smoothing: "zero-match precisions floored at 1e-9; empty orders vacuously perfect",
    })
}

/// Pairwise BLEU between model decodes on a shared test set. Entry (a, b)
/// scores model a's hypotheses against model b's as reference.
#[derive(Debug, Clone)]
pub struct DiversityMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl DiversityMatrix {
    /// Labeled CSV, values to two decimals.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("model");
        for l in &self.labels {
            write!(out, ",{l}").unwrap();
        }
        out.push('\n');
        for (i, row) in self.values.iter().enumerate() {
            out.push_str(&self.labels[i]);
            for v in row {
                write!(out, ",{v:.2}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    /// Mean of the off-diagonal entries.
    pub fn off_diagonal_mean(&self) -> f64 {
        let k = self.values.len();
        if k < 2 {
            return f64::NAN;
        }
        let sum: f64 = (0..k)
            .flat_map(|a| (0..k).filter(move |&b| b != a).map(move |b| (a, b)))
            .map(|(a, b)| self.values[a][b])
            .sum();
        sum / (k * (k - 1)) as f64
    }
}

/// Decodes the test sources with every model and cross-scores the
/// results. `labels` names each model (architecture, direction, seed) in
/// the emitted matrix.
pub fn diversity_matrix(
    models: &[&BasicModel],
    labels: &[String],
    test_sources: &[TokenSeq],
    cfg: &DecodeConfig,
) -> Result<DiversityMatrix, EvalError> {
    if models.len() != labels.len() {
        return Err(EvalError::Input(format!(
            "{} models vs {} labels",
            models.len(),
            labels.len()
        )));
    }
    if models.is_empty() || test_sources.is_empty() {
        return Err(EvalError::Input("need at least one model and one test source".into()));
    }
    let mut decodes: Vec<Vec<TokenSeq>> = Vec::with_capacity(models.len());
    for m in models {
        let mut outs = Vec::with_capacity(test_sources.len());
        for x in test_sources {
            let hyps = beam_search_single(m, x, cfg)?;
            outs.push(hyps[0].tokens.clone());
        }
        decodes.push(outs);
    }
    let k = models.len();
    let mut values = vec![vec![0.0; k]; k];
    for a in 0..k {
        for b in 0..k {
            values[a][b] = corpus_bleu(&decodes[a], &decodes[b])?.bleu;
        }
    }
    Ok(DiversityMatrix { labels: labels.to_vec(), values })
}

/// One row of a monolingual-size sweep: corpus size and per-model BLEU.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub mono_size: usize,
    pub bleu_per_model: Vec<f64>,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    /// Line-delimited JSON, one record per row.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            out.push_str(&serde_json::to_string(row).expect("row serializes"));
            out.push('\n');
        }
        out
    }

    /// Plain-text aligned table.
    pub fn to_table(&self) -> String {
        let k = self.rows[0].bleu_per_model.len();
        let mut out = String::new();
        write!(out, "{:>10}", "mono").unwrap();
        for i in 0..k {
            write!(out, " {:>9}", format!("model{i}")).unwrap();
        }
        writeln!(out, " {:>9}", "mean").unwrap();
        for row in &self.rows {
            write!(out, "{:>10}", row.mono_size).unwrap();
            for b in &row.bleu_per_model {
                write!(out, " {b:>9.2}").unwrap();
            }
            writeln!(out, " {:>9.2}", row.mean).unwrap();
        }
        out
    }
}

/// Collates (mono size, per-model BLEU) runs into a sweep report with
/// rows sorted by size. Requires at least two sizes including zero, the
/// basic-model baseline.
pub fn sweep_report(runs: &[(usize, Vec<f64>)]) -> Result<SweepReport, EvalError> {
    if runs.len() < 2 {
        return Err(EvalError::Input("sweep needs at least two monolingual sizes".into()));
    }
    if !runs.iter().any(|(size, _)| *size == 0) {
        return Err(EvalError::Input("sweep must include the size-0 baseline".into()));
    }
    let width = runs[0].1.len();
    if width == 0 || runs.iter().any(|(_, b)| b.len() != width) {
        return Err(EvalError::Input("per-model BLEU lists must be nonempty and equally sized".into()));
    }
    let mut rows: Vec<SweepRow> = runs
        .iter()
        .map(|(size, bleu)| SweepRow {
            mono_size: *size,
            bleu_per_model: bleu.clone(),
            mean: bleu.iter().sum::<f64>() / bleu.len() as f64,
        })
        .collect();
    rows.sort_by_key(|r| r.mono_size);
    Ok(SweepReport { rows })
}
