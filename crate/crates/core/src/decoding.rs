//! Beam, diverse-beam, and token-level-ensemble decoding.
//!
//! One engine drives every variant: plain beam search is the 1-group,
//! zero-diversity case, and a single model is an ensemble of one. The
//! engine works in the models' internal token order; hypotheses are
//! un-reversed (for R2L models) only when they are returned.

use crate::corpus::{TokenSeq, BOS, EOS, PAD};
use crate::models::{BasicModel, ModelError, StepState};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("config: {0}")]
    Config(String),
    #[error("unsupported combination: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Length-penalty exponent in lp(L) = ((5+L)/6)^alpha.
    pub alpha: f64,
    /// Maximum content tokens before eos is forced.
    pub max_len: usize,
    /// Diversity strength (diverse beam only).
    pub lambda: f64,
    /// Group count (diverse beam only); must divide beam.
    pub groups: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { beam: 5, alpha: 0.6, max_len: 32, lambda: 0.5, groups: 5 }
    }
}

impl DecodeConfig {
    fn validate(&self) -> Result<(), DecodeError> {
        if self.beam == 0 {
            return Err(DecodeError::Config("beam must be at least 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(DecodeError::Config(format!("alpha must be nonnegative, got {}", self.alpha)));
        }
        if self.max_len == 0 {
            return Err(DecodeError::Config("max_len must be at least 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(DecodeError::Config(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// Length penalty lp(L) = ((5+L)/6)^alpha; L counts all tokens including
/// the terminal eos.
pub fn length_penalty(len: usize, alpha: f64) -> f64 {
    ((5.0 + len as f64) / 6.0).powf(alpha)
}

#[derive(Debug, Clone)]
pub struct Hypothesis {
    /// External-order tokens, terminal eos included.
    pub tokens: TokenSeq,
    pub raw_log_prob: f64,
    pub normalized: f64,
}

fn check_ensemble(models: &[&BasicModel]) -> Result<(), DecodeError> {
    let Some(first) = models.first() else {
        return Err(DecodeError::Config("ensemble needs at least one model".into()));
    };
    for m in &models[1..] {
        if m.direction != first.direction {
            return Err(DecodeError::Unsupported(
                "token-level ensembles cannot mix left-to-right and right-to-left models".into(),
            ));
        }
        if m.target_vocab != first.target_vocab {
            return Err(DecodeError::Unsupported("ensemble models must share the target vocabulary".into()));
        }
        if m.source_vocab != first.source_vocab {
            return Err(DecodeError::Unsupported("ensemble models must share the source vocabulary".into()));
        }
    }
    Ok(())
}

/// Arithmetic mean of the models' next-token probability vectors, as a
/// log-distribution. States advance in lockstep with their models.
///
/// When every model reports a bitwise-identical distribution the first is
/// returned directly: the mean of equal vectors is that vector, and the
/// shortcut realizes the identity without float round-trips.
pub fn ensemble_step(
    models: &[&BasicModel],
    states: Vec<StepState>,
) -> Result<(Vec<f64>, Vec<StepState>), DecodeError> {
    check_ensemble(models)?;
    if models.len() != states.len() {
        return Err(DecodeError::Config(format!(
            "{} models but {} states",
            models.len(),
            states.len()
        )));
    }
    let mut dists = Vec::with_capacity(models.len());
    let mut out_states = Vec::with_capacity(states.len());
    for (m, s) in models.iter().zip(states) {
        let (d, s) = m.step(s)?;
        dists.push(d);
        out_states.push(s);
    }
    if dists[1..].iter().all(|d| d == &dists[0]) {
        let first = dists.swap_remove(0);
        return Ok((first, out_states));
    }
    let v = dists[0].len();
    let inv = 1.0 / dists.len() as f64;
    let mut mean = vec![0.0; v];
    for d in &dists {
        for (acc, &lp) in mean.iter_mut().zip(d.iter()) {
            *acc += lp.exp();
        }
    }
    for p in &mut mean {
        *p = (*p * inv).ln();
    }
    Ok((mean, out_states))
}

struct Live {
    states: Vec<StepState>,
    tokens: Vec<u32>,
    raw: f64,
}

struct Finished {
    tokens: Vec<u32>,
    raw: f64,
}

fn advance_all(states: &[StepState], token: u32) -> Vec<StepState> {
    states.iter().map(|s| s.clone().advance(token)).collect()
}

/// Shared engine: `groups` sub-beams of size beam/groups decoded
/// sequentially per step, later groups penalized by lambda times the
/// count of identical step tokens already chosen by earlier groups.
fn beam_engine(
    models: &[&BasicModel],
    x: &TokenSeq,
    cfg: &DecodeConfig,
    groups: usize,
    lambda: f64,
) -> Result<Vec<Hypothesis>, DecodeError> {
    cfg.validate()?;
    check_ensemble(models)?;
    if groups == 0 || !cfg.beam.is_multiple_of(groups) {
        return Err(DecodeError::Config(format!(
            "group count {groups} must divide beam size {}",
            cfg.beam
        )));
    }
    let group_width = cfg.beam / groups;
    let vocab = models[0].target_vocab.size();

    let init_states: Vec<StepState> = models
        .iter()
        .map(|m| m.start_state(x))
        .collect::<Result<_, _>>()?;
    let mut group_lives: Vec<Vec<Live>> = (0..groups)
        .map(|_| vec![Live { states: init_states.clone(), tokens: Vec::new(), raw: 0.0 }])
        .collect();
    let mut finished: Vec<Finished> = Vec::new();

    for _ in 0..cfg.max_len {
        let mut step_counts = vec![0usize; vocab];
        let mut any_live = false;
        for lives in group_lives.iter_mut() {
            // candidate = (selection key, token path, raw lp, live index, token)
            let mut cands: Vec<(f64, f64, usize, u32)> = Vec::new();
            for (li, live) in lives.iter_mut().enumerate() {
                let states = std::mem::take(&mut live.states);
                let (dist, states) = ensemble_step(models, states)?;
                live.states = states;
                for (tok, &lp) in dist.iter().enumerate() {
                    let tok = tok as u32;
                    if tok == PAD || tok == BOS {
                        continue;
                    }
                    let raw = live.raw + lp;
                    if !raw.is_finite() {
                        continue;
                    }
                    let key = raw - lambda * step_counts[tok as usize] as f64;
                    cands.push((key, raw, li, tok));
                }
            }
            cands.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap()
                    .then_with(|| lives[a.2].tokens.cmp(&lives[b.2].tokens))
                    .then_with(|| a.3.cmp(&b.3))
            });
            // the top group_width candidates are kept; an eos candidate
            // consumes its slot by finishing, so beam 1 is exactly greedy
            let mut next: Vec<Live> = Vec::with_capacity(group_width);
            for &(_, raw, li, tok) in cands.iter().take(group_width) {
                step_counts[tok as usize] += 1;
                if tok == EOS {
                    finished.push(Finished { tokens: lives[li].tokens.clone(), raw });
                } else {
                    let mut tokens = lives[li].tokens.clone();
                    tokens.push(tok);
                    next.push(Live { states: advance_all(&lives[li].states, tok), tokens, raw });
                }
            }
            *lives = next;
            any_live |= !lives.is_empty();
        }
        if !any_live {
            break;
        }
    }

    // force-finish surviving entries with the true eos log-probability
    for lives in group_lives {
        for live in lives {
            let (dist, _) = ensemble_step(models, live.states)?;
            let raw = live.raw + dist[EOS as usize];
            if raw.is_finite() {
                finished.push(Finished { tokens: live.tokens, raw });
            }
        }
    }

    let alpha = cfg.alpha;
    let model = models[0];
    let mut hyps: Vec<Hypothesis> = finished
        .into_iter()
        .map(|f| {
            let len = f.tokens.len() + 1; // terminal eos counts
            let mut ids = f.tokens;
            ids.push(EOS);
            let internal = TokenSeq::from_raw(ids);
            Hypothesis {
                tokens: model.external_target(&internal),
                raw_log_prob: f.raw,
                normalized: f.raw / length_penalty(len, alpha),
            }
        })
        .collect();
    hyps.sort_by(|a, b| {
        b.normalized
            .partial_cmp(&a.normalized)
            .unwrap()
            .then_with(|| a.tokens.ids().cmp(b.tokens.ids()))
    });
    hyps.dedup_by(|a, b| a.tokens == b.tokens);
    hyps.truncate(cfg.beam);
    Ok(hyps)
}

/// Standard beam search over a model or a token-level ensemble; ranked by
/// normalized score, descending, ties broken by lower token sequence.
pub fn beam_search(models: &[&BasicModel], x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    beam_engine(models, x, cfg, 1, 0.0)
}

/// Single-model convenience wrapper.
pub fn beam_search_single(model: &BasicModel, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    beam_search(&[model], x, cfg)
}

/// Beam search with Hamming diversity across groups.
pub fn diverse_beam_search(model: &BasicModel, x: &TokenSeq, cfg: &DecodeConfig) -> Result<Vec<Hypothesis>, DecodeError> {
    beam_engine(&[model], x, cfg, cfg.groups, cfg.lambda)
}

/// Token sequences of the top-k hypotheses (pseudo-data generation).
pub fn topk_pseudo(model: &BasicModel, x: &TokenSeq, k: usize, cfg: &DecodeConfig) -> Result<Vec<TokenSeq>, DecodeError> {
    if k > cfg.beam {
        return Err(DecodeError::Config(format!("k {} exceeds beam size {}", k, cfg.beam)));
    }
    let hyps = beam_search_single(model, x, cfg)?;
    Ok(hyps.into_iter().take(k).map(|h| h.tokens).collect())
}
