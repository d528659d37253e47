//! Reciprocal-supervised learning: the symmetric-KL agreement objective,
//! its sampled gradient estimators, the enumeration oracle that validates
//! them, the co-EM training loop, and the self-training and
//! back-translation baselines.
//!
//! The oracle enumerates every eos-terminated sequence up to a length
//! bound and treats the renormalized truncated distribution as the ground
//! truth. Estimator checks therefore carry an error term of the order of
//! the truncated mass; fixtures concentrate mass on short sequences so
//! that term sits orders of magnitude below the tolerances.

use crate::autodiff::{AdError, NodeId, Tape};
use crate::corpus::{
    combine_sources, CombinedSourceCorpus, CorpusError, MonolingualCorpus, ParallelCorpus,
    SentencePair, TokenSeq, Vocabulary, BOS, EOS, PAD, UNK,
};
use crate::decoding::{beam_search_single, topk_pseudo, DecodeConfig, DecodeError};
use crate::eval::{corpus_bleu, EvalError};
use crate::models::{BasicModel, Bound, Dropout, ModelError};
use crate::nd::NdArray;
use crate::rng::stream;
use crate::training::{
    adam_step, mle_epoch, pack_by_length, OptimizerState, TrainConfig, TrainError,
};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RslError {
    #[error("config: {0}")]
    Config(String),
    #[error("enumeration space {space:.3e} exceeds the oracle guard {limit:.3e}")]
    OracleTooLarge { space: f64, limit: f64 },
    #[error("truncated mass too large for the oracle: model_i {mass_i:.3e}, model_j {mass_j:.3e}")]
    OracleInvalid { mass_i: f64, mass_j: f64 },
    #[error("model {model} diverged in round {round}")]
    Diverged { round: usize, model: usize },
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PseudoMode {
    /// Ancestral sampling at the configured temperature.
    Sample,
    /// Deterministic beam top-1; forces one generation per source.
    Beam,
}

/// Cooperative-tuning hyperparameters. `train` and `decode` configure the
/// inner weighted-MLE optimizer and the pseudo/eval decoding.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RSLConfig {
    pub k: usize,
    pub samples_per_source: usize,
    pub rounds: usize,
    pub mode: PseudoMode,
    pub temperature: f64,
    /// Adds self-generated pairs reweighted by the clipped density ratio.
    pub self_term: bool,
    /// Density-ratio log-weight clip; `f64::INFINITY` disables clipping.
    pub weight_clip: f64,
    pub m_step_epochs: usize,
    /// Divides agreement weights by (k-1) for sensitivity studies.
    pub normalize_opponents: bool,
    /// Per-round pseudo-corpus TSV dumps land here when set.
    pub dump_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for RSLConfig {
    fn default() -> Self {
        RSLConfig {
            k: 2,
            samples_per_source: 1,
            rounds: 3,
            mode: PseudoMode::Sample,
            temperature: 1.0,
            self_term: false,
            weight_clip: 5.0,
            m_step_epochs: 1,
            normalize_opponents: false,
            dump_dir: None,
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RSLConfig {
    pub fn validate(&self) -> Result<(), RslError> {
        if self.k < 2 {
            return Err(RslError::Config("k must be at least 2".into()));
        }
        self.validate_single()
    }

    /// Field checks shared with the single-model baselines.
    fn validate_single(&self) -> Result<(), RslError> {
        if self.samples_per_source == 0 {
            return Err(RslError::Config("samples_per_source must be at least 1".into()));
        }
        if self.rounds == 0 {
            return Err(RslError::Config("rounds must be at least 1".into()));
        }
        if self.weight_clip.is_nan() || self.weight_clip <= 0.0 {
            return Err(RslError::Config("weight_clip must be positive".into()));
        }
        if !self.temperature.is_finite() || self.temperature <= 0.0 {
            return Err(RslError::Config("temperature must be positive and finite".into()));
        }
        if self.m_step_epochs == 0 {
            return Err(RslError::Config("m_step_epochs must be at least 1".into()));
        }
        self.train.validate()?;
        Ok(())
    }

    fn effective_samples(&self) -> usize {
        match self.mode {
            PseudoMode::Sample => self.samples_per_source,
            PseudoMode::Beam => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PseudoOrigin {
    /// Generated by model `model`; trains every other model at weight 1.
    Cross { model: usize },
    /// Generated by model `model` for itself, weighted by the clipped
    /// log density ratio against one opponent.
    SelfRatio { model: usize },
}

impl fmt::Display for PseudoOrigin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PseudoOrigin::Cross { model } => write!(f, "cross:{model}"),
            PseudoOrigin::SelfRatio { model } => write!(f, "self:{model}"),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PseudoPair {
    pub source: TokenSeq,
    pub target: TokenSeq,
    pub weight: f64,
    pub origin: PseudoOrigin,
    pub round: usize,
}

#[derive(Debug, Clone, Default)]
pub struct PseudoCorpus {
    pub pairs: Vec<PseudoPair>,
    /// Self-term weights that hit the clip bound during generation.
    pub clipped_weights: usize,
}

impl PseudoCorpus {
    /// Pairs model `i` trains on: everyone else's generations plus its
    /// own ratio-reweighted pairs.
    pub fn view_for(&self, model: usize) -> Vec<&PseudoPair> {
        self.pairs
            .iter()
            .filter(|p| match p.origin {
                PseudoOrigin::Cross { model: j } => j != model,
                PseudoOrigin::SelfRatio { model: i } => i == model,
            })
            .collect()
    }

    pub fn cross_count(&self) -> usize {
        self.pairs.iter().filter(|p| matches!(p.origin, PseudoOrigin::Cross { .. })).count()
    }

    /// Tab-separated dump: source, target, weight, origin, round.
    pub fn write_tsv(
        &self,
        path: &Path,
        source_vocab: &Vocabulary,
        target_vocab: &Vocabulary,
    ) -> Result<(), RslError> {
        let mut out = Vec::new();
        for p in &self.pairs {
            writeln!(
                out,
                "{}\t{}\t{:?}\t{}\t{}",
                p.source.to_line(source_vocab),
                p.target.to_line(target_vocab),
                p.weight,
                p.origin,
                p.round
            )?;
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Every eos-terminated sequence of content length <= the bound, with its
/// exact probability, plus the mass of the sequences beyond the bound.
#[derive(Debug, Clone)]
pub struct EnumeratedDistribution {
    /// (external-order sequence, probability), in enumeration order.
    pub entries: Vec<(TokenSeq, f64)>,
    pub truncated_mass: f64,
    log_probs: Vec<f64>,
    index: HashMap<Vec<u32>, usize>,
}

impl EnumeratedDistribution {
    pub fn support_size(&self) -> usize {
        self.entries.len()
    }

    /// Exact log-probabilities, aligned with `entries`. More precise than
    /// `ln` of the probability when the probability underflows.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn position(&self, y: &TokenSeq) -> Option<usize> {
        self.index.get(y.ids()).copied()
    }

    pub fn probability(&self, y: &TokenSeq) -> Option<f64> {
        self.position(y).map(|i| self.entries[i].1)
    }
}

fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

const ORACLE_SPACE_LIMIT: f64 = 1e6;

/// Walks the full generation tree via incremental decoding. Every token
/// except eos continues a prefix, matching the sampler's support exactly
/// (reserved tokens included). Probabilities are exact step products;
/// `truncated_mass` is accumulated from the depth-limit frontier, so the
/// law of total probability is a checkable property rather than an
/// accounting identity.
pub fn enumerate_distribution(
    model: &BasicModel,
    x: &TokenSeq,
    l_max: usize,
) -> Result<EnumeratedDistribution, RslError> {
    let v = model.target_vocab.size();
    let space = (v as f64).powi(l_max as i32);
    if space > ORACLE_SPACE_LIMIT {
        return Err(RslError::OracleTooLarge { space, limit: ORACLE_SPACE_LIMIT });
    }
    let mut seqs: Vec<(TokenSeq, f64)> = Vec::new();
    let mut frontier: Vec<f64> = Vec::new();
    let state = model.start_state(x)?;
    let mut prefix: Vec<u32> = Vec::new();
    walk(model, state, 0.0, l_max, &mut prefix, &mut seqs, &mut frontier)?;
    let mut entries = Vec::with_capacity(seqs.len());
    let mut log_probs = Vec::with_capacity(seqs.len());
    let mut index = HashMap::with_capacity(seqs.len());
    for (i, (y, lp)) in seqs.into_iter().enumerate() {
        index.insert(y.ids().to_vec(), i);
        entries.push((y, lp.exp()));
        log_probs.push(lp);
    }
    let truncated_mass: f64 = frontier.iter().map(|lp| lp.exp()).sum();
    Ok(EnumeratedDistribution { entries, truncated_mass, log_probs, index })
}

fn walk(
    model: &BasicModel,
    state: crate::models::StepState,
    lp: f64,
    remaining: usize,
    prefix: &mut Vec<u32>,
    seqs: &mut Vec<(TokenSeq, f64)>,
    frontier: &mut Vec<f64>,
) -> Result<(), RslError> {
    let (dist, state) = model.step(state)?;
    let lp_eos = dist[EOS as usize];
    let mut ids = prefix.clone();
    ids.push(EOS);
    let internal = TokenSeq::from_raw(ids);
    seqs.push((model.external_target(&internal), lp + lp_eos));
    if remaining == 0 {
        // ln(1 - P(eos)): everything continuing past the bound is lost
        frontier.push(lp + (-lp_eos.exp()).ln_1p());
        return Ok(());
    }
    for tok in 0..model.target_vocab.size() as u32 {
        if tok == EOS {
            continue;
        }
        prefix.push(tok);
        walk(model, state.clone().advance(tok), lp + dist[tok as usize], remaining - 1, prefix, seqs, frontier)?;
        prefix.pop();
    }
    Ok(())
}

/// Per-sequence log-probabilities of `ys` under one shared encoding, as a
/// single `[1, n]` node so the renormalized distribution can be expressed
/// with softmax over the support.
fn support_log_probs(
    model: &BasicModel,
    tape: &mut Tape,
    bound: &Bound,
    x: &TokenSeq,
    ys: &[&TokenSeq],
) -> Result<NodeId, RslError> {
    let memory = model.encode_node(tape, bound, x.ids(), &mut Dropout::Off)?;
    let v = model.target_vocab.size();
    let mut picked = Vec::with_capacity(ys.len());
    let mut t_lens = Vec::with_capacity(ys.len());
    for y in ys {
        let y_int = model.internal_target(y);
        let ids = y_int.ids();
        let mut tgt_in = Vec::with_capacity(ids.len());
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(&ids[..ids.len() - 1]);
        let rows = model.decode_rows_node(tape, bound, memory, &tgt_in, &mut Dropout::Off)?;
        let mut pick = vec![0.0; ids.len() * v];
        for (t, &id) in ids.iter().enumerate() {
            pick[t * v + id as usize] = 1.0;
        }
        let pick = tape.leaf(NdArray::from_vec(&[ids.len(), v], pick));
        picked.push(tape.mul(rows, pick)?);
        t_lens.push(ids.len());
    }
    let cat = tape.concat(&picked, 0)?;
    let ones = tape.leaf(NdArray::from_vec(&[v, 1], vec![1.0; v]));
    let row_sums = tape.matmul(cat, ones)?;
    let total: usize = t_lens.iter().sum();
    let mut sel = vec![0.0; ys.len() * total];
    let mut offset = 0;
    for (s, &t) in t_lens.iter().enumerate() {
        for c in offset..offset + t {
            sel[s * total + c] = 1.0;
        }
        offset += t;
    }
    let sel = tape.leaf(NdArray::from_vec(&[ys.len(), total], sel));
    let grouped = tape.matmul(sel, row_sums)?;
    Ok(tape.transpose(grouped)?)
}

const ORACLE_MASS_LIMIT: f64 = 1e-6;

/// Exact divergences between two models over the renormalized truncated
/// support, with gradients w.r.t. the first model's parameters.
#[derive(Debug, Clone)]
pub struct ExactKLReport {
    pub support_size: usize,
    pub truncated_mass_i: f64,
    pub truncated_mass_j: f64,
    /// KL(P_j || P_i).
    pub kl_j_i: f64,
    /// KL(P_i || P_j).
    pub kl_i_j: f64,
    /// d KL(P_j || P_i) / d theta_i, in parameter order.
    pub grad_kl_j_i: Vec<NdArray>,
    /// d KL(P_i || P_j) / d theta_i, in parameter order.
    pub grad_kl_i_j: Vec<NdArray>,
}

/// Enumerates both models, renormalizes each by its retained mass, and
/// differentiates the explicit KL sums through the tape. Model i's
/// renormalized distribution is softmax over its support log-probs, so
/// the gradients account for the renormalization exactly.
pub fn exact_kl_and_grads(
    model_i: &BasicModel,
    model_j: &BasicModel,
    x: &TokenSeq,
    l_max: usize,
) -> Result<ExactKLReport, RslError> {
    if model_i.target_vocab != model_j.target_vocab || model_i.source_vocab != model_j.source_vocab {
        return Err(RslError::Config("models must share vocabularies".into()));
    }
    let enum_i = enumerate_distribution(model_i, x, l_max)?;
    let enum_j = enumerate_distribution(model_j, x, l_max)?;
    if enum_i.truncated_mass >= ORACLE_MASS_LIMIT || enum_j.truncated_mass >= ORACLE_MASS_LIMIT {
        return Err(RslError::OracleInvalid {
            mass_i: enum_i.truncated_mass,
            mass_j: enum_j.truncated_mass,
        });
    }
    let n = enum_i.support_size();
    // both walks cover the same sequence set; R2L walks emit it in a
    // different order, so entries are joined by external ids
    let lz_j = logsumexp(enum_j.log_probs());
    let mut lpj = vec![0.0; n];
    for (idx, (y, _)) in enum_i.entries.iter().enumerate() {
        let pos = enum_j.position(y).expect("supports are the same sequence set");
        lpj[idx] = enum_j.log_probs()[pos] - lz_j;
    }
    let pj: Vec<f64> = lpj.iter().map(|l| l.exp()).collect();

    let mut tape = Tape::new();
    let bound = model_i.bind(&mut tape);
    let ys: Vec<&TokenSeq> = enum_i.entries.iter().map(|(y, _)| y).collect();
    let v = support_log_probs(model_i, &mut tape, &bound, x, &ys)?;
    let lpt = tape.log_softmax(v)?;
    let pt = tape.softmax(v)?;
    let lpj_leaf = tape.leaf(NdArray::from_vec(&[1, n], lpj));
    let pj_leaf = tape.leaf(NdArray::from_vec(&[1, n], pj));

    let neg_lpt = tape.neg(lpt)?;
    let diff_ji = tape.add(lpj_leaf, neg_lpt)?;
    let prod_ji = tape.mul(pj_leaf, diff_ji)?;
    let kl_ji = tape.sum(prod_ji)?;

    let neg_lpj = tape.neg(lpj_leaf)?;
    let diff_ij = tape.add(lpt, neg_lpj)?;
    let prod_ij = tape.mul(pt, diff_ij)?;
    let kl_ij = tape.sum(prod_ij)?;

    let g_ji = tape.backward(kl_ji)?;
    let g_ij = tape.backward(kl_ij)?;
    let grad_kl_j_i = bound.ids().iter().map(|&id| g_ji.dense(&tape, id)).collect();
    let grad_kl_i_j = bound.ids().iter().map(|&id| g_ij.dense(&tape, id)).collect();
    Ok(ExactKLReport {
        support_size: n,
        truncated_mass_i: enum_i.truncated_mass,
        truncated_mass_j: enum_j.truncated_mass,
        kl_j_i: tape.value(kl_ji).item(),
        kl_i_j: tape.value(kl_ij).item(),
        grad_kl_j_i,
        grad_kl_i_j,
    })
}

/// Sampled gradient of the agreement terms for one source sentence.
#[derive(Debug, Clone)]
pub struct GradEstimate {
    /// Parameter-order gradient estimate for model i.
    pub grad: Vec<NdArray>,
    /// Self-term weights that hit the clip bound.
    pub clipped: usize,
    pub samples: usize,
}

/// Monte-Carlo estimate of d/d theta_i of sum_j [KL(P_j||P_i) +
/// KL(P_i||P_j)] at one source. Opponent samples drive the first term
/// with unit weight; the model's own samples drive the second with the
/// clipped log density ratio summed over opponents. Sampling is always at
/// temperature 1; all log-probs are evaluated without dropout.
pub fn rs_grad_estimate(
    model_i: &BasicModel,
    opponents: &[&BasicModel],
    x: &TokenSeq,
    cfg: &RSLConfig,
    rng: &mut ChaCha8Rng,
) -> Result<GradEstimate, RslError> {
    if opponents.is_empty() {
        return Err(RslError::Config("estimator needs at least one opponent".into()));
    }
    let s = cfg.samples_per_source;
    let c = cfg.weight_clip;
    let mut grad: Vec<NdArray> =
        model_i.params.values().iter().map(|a| NdArray::zeros(a.shape())).collect();
    let mut clipped = 0;
    let mut samples = 0;
    for m_j in opponents {
        for _ in 0..s {
            let (y, _) = m_j.sample(x, cfg.decode.max_len, 1.0, rng)?;
            accumulate_scaled_score(model_i, x, &y, -1.0 / s as f64, &mut grad)?;
            samples += 1;
        }
    }
    if cfg.self_term {
        for _ in 0..s {
            let (y, _) = model_i.sample(x, cfg.decode.max_len, 1.0, rng)?;
            let lp_i = model_i.log_prob(x, &y)?;
            let mut w = 0.0;
            for m_j in opponents {
                let raw = m_j.log_prob(x, &y)? - lp_i;
                let clamped = raw.clamp(-c, c);
                if clamped != raw {
                    clipped += 1;
                }
                w += clamped;
            }
            accumulate_scaled_score(model_i, x, &y, -w / s as f64, &mut grad)?;
            samples += 1;
        }
    }
    Ok(GradEstimate { grad, clipped, samples })
}

/// grad += coeff * d log P(y|x) / d theta.
fn accumulate_scaled_score(
    model: &BasicModel,
    x: &TokenSeq,
    y: &TokenSeq,
    coeff: f64,
    grad: &mut [NdArray],
) -> Result<(), RslError> {
    if coeff == 0.0 {
        return Ok(());
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let lp = model.log_prob_node(&mut tape, &bound, x, y, &mut Dropout::Off)?;
    let g = tape.backward(lp)?;
    for (slot, &id) in grad.iter_mut().zip(bound.ids()) {
        let d = g.dense(&tape, id);
        for (a, b) in slot.data_mut().iter_mut().zip(d.data()) {
            *a += coeff * b;
        }
    }
    Ok(())
}

/// E-step: every model generates pseudo targets for every combined
/// source. Cross pairs carry weight 1 toward the other models; when the
/// self term is on, each model's own samples are emitted once per
/// opponent with the clipped log density ratio as weight. Each (model,
/// source) unit draws from its own derived stream, so results do not
/// depend on iteration scheduling.
pub fn e_step(
    models: &[BasicModel],
    sources: &CombinedSourceCorpus,
    cfg: &RSLConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<PseudoCorpus, RslError> {
    let master: u64 = rng.gen();
    let n = sources.len();
    let s = cfg.effective_samples();
    let mut pairs = Vec::new();
    let mut clipped = 0;
    for (j, model) in models.iter().enumerate() {
        for (si, x) in sources.sentences.iter().enumerate() {
            let targets = generate(model, x, cfg, s, stream(master, "e-step-cross", (j * n + si) as u64))?;
            for y in targets {
                pairs.push(PseudoPair {
                    source: x.clone(),
                    target: y,
                    weight: 1.0,
                    origin: PseudoOrigin::Cross { model: j },
                    round,
                });
            }
        }
    }
    if cfg.self_term {
        for (i, model) in models.iter().enumerate() {
            for (si, x) in sources.sentences.iter().enumerate() {
                let targets = generate(model, x, cfg, s, stream(master, "e-step-self", (i * n + si) as u64))?;
                for y in targets {
                    let lp_i = model.log_prob(x, &y)?;
                    for (j, opponent) in models.iter().enumerate() {
                        if j == i {
                            continue;
                        }
                        let raw = opponent.log_prob(x, &y)? - lp_i;
                        let w = raw.clamp(-cfg.weight_clip, cfg.weight_clip);
                        if w != raw {
                            clipped += 1;
                        }
                        pairs.push(PseudoPair {
                            source: x.clone(),
                            target: y.clone(),
                            weight: w,
                            origin: PseudoOrigin::SelfRatio { model: i },
                            round,
                        });
                    }
                }
            }
        }
    }
    Ok(PseudoCorpus { pairs, clipped_weights: clipped })
}

fn generate(
    model: &BasicModel,
    x: &TokenSeq,
    cfg: &RSLConfig,
    s: usize,
    mut unit_rng: ChaCha8Rng,
) -> Result<Vec<TokenSeq>, RslError> {
    match cfg.mode {
        PseudoMode::Sample => {
            let mut out = Vec::with_capacity(s);
            for _ in 0..s {
                let (y, _) = model.sample(x, cfg.decode.max_len, cfg.temperature, &mut unit_rng)?;
                out.push(y);
            }
            Ok(out)
        }
        PseudoMode::Beam => Ok(topk_pseudo(model, x, 1, &cfg.decode)?),
    }
}

/// One training pair with its loss coefficient.
struct TrainItem<'a> {
    source: &'a TokenSeq,
    target: &'a TokenSeq,
    coeff: f64,
}

/// One optimizer pass over coefficient-weighted pairs. Batch loss is
/// -(sum_p coeff_p * log P(y_p|x_p)) / (sum_p |coeff_p| * len_p), which
/// reduces exactly to the token-mean NLL of `mle_epoch` when every
/// coefficient is 1. Batches whose coefficients are all zero carry no
/// gradient signal and are skipped. Returns the weighted per-token loss.
fn weighted_epoch(
    model: &mut BasicModel,
    items: &[TrainItem],
    tcfg: &TrainConfig,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
) -> Result<f64, RslError> {
    if items.is_empty() {
        return Err(RslError::Config("no training items".into()));
    }
    let lens: Vec<usize> = items.iter().map(|it| it.target.len()).collect();
    let batches = pack_by_length(&lens, tcfg.batch_tokens);
    let mut num = 0.0;
    let mut den = 0.0;
    for (bi, batch) in batches.iter().enumerate() {
        let denom: f64 = batch.iter().map(|&i| items[i].coeff.abs() * lens[i] as f64).sum();
        if denom == 0.0 {
            continue;
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let rate = model.arch.dropout;
        let mut drop = if model.is_training() && rate > 0.0 {
            Dropout::On { rate, rng }
        } else {
            Dropout::Off
        };
        let mut total: Option<NodeId> = None;
        for &ii in batch {
            let lp = model.log_prob_node(&mut tape, &bound, items[ii].source, items[ii].target, &mut drop)?;
            let scaled = tape.scale(lp, items[ii].coeff)?;
            total = Some(match total {
                None => scaled,
                Some(t) => tape.add(t, scaled)?,
            });
        }
        let loss = tape.scale(total.expect("nonempty batch"), -1.0 / denom)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged { batch: bi }.into());
        }
        let grads = tape.backward(loss)?;
        let gvec: Vec<NdArray> = bound.ids().iter().map(|&id| grads.dense(&tape, id)).collect();
        adam_step(opt, &mut model.params, gvec, tcfg.clip_norm)?;
        num += loss_val * denom;
        den += denom;
    }
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

/// M-step for one model: weighted MLE over real pairs at coefficient 1
/// and pseudo pairs at stored_weight * N / (M * S), realizing the 1/N and
/// 1/M corpus normalizations as relative per-pair coefficients inside one
/// optimizer pass. `combined_len` is M, the combined source count.
pub fn m_step(
    model: &mut BasicModel,
    parallel: &ParallelCorpus,
    view: &[&PseudoPair],
    cfg: &RSLConfig,
    combined_len: usize,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
) -> Result<f64, RslError> {
    if parallel.is_empty() {
        return Err(RslError::Config("parallel corpus is empty".into()));
    }
    if combined_len == 0 {
        return Err(RslError::Config("combined source corpus is empty".into()));
    }
    let n = parallel.len() as f64;
    let m = combined_len as f64;
    let s = cfg.effective_samples() as f64;
    let opponents = if cfg.normalize_opponents { (cfg.k - 1) as f64 } else { 1.0 };
    let scale = n / (m * s * opponents);
    let mut items: Vec<TrainItem> = parallel
        .pairs
        .iter()
        .map(|p| TrainItem { source: &p.source, target: &p.target, coeff: 1.0 })
        .collect();
    for p in view {
        items.push(TrainItem { source: &p.source, target: &p.target, coeff: p.weight * scale });
    }
    let mut last = 0.0;
    for _ in 0..cfg.m_step_epochs {
        last = weighted_epoch(model, &items, &cfg.train, opt, rng)?;
    }
    Ok(last)
}

/// Per-round co-EM observables. BLEU and diversity appear when a held-out
/// corpus is supplied.
#[derive(Debug, Clone, Serialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub pseudo_pairs: usize,
    pub clipped_weights: usize,
    /// Weighted training NLL per model, last M-step epoch.
    pub mean_train_nll: Vec<f64>,
    pub validation_bleu: Option<Vec<f64>>,
    pub mean_validation_bleu: Option<f64>,
    /// Mean pairwise BLEU between model decodes; lower is more diverse.
    pub cross_diversity: Option<f64>,
}

/// Cooperative tuning: alternate E-steps (every model pseudo-labels the
/// combined sources) and per-model weighted M-steps for up to
/// `cfg.rounds` rounds, regenerating pseudo data each round. Optimizer
/// state persists across rounds. With a held-out corpus the loop stops
/// early once mean validation BLEU improves by less than 0.1.
pub fn co_em(
    models: &mut [BasicModel],
    parallel: &ParallelCorpus,
    mono: &MonolingualCorpus,
    cfg: &RSLConfig,
    held_out: Option<&ParallelCorpus>,
) -> Result<Vec<RoundMetrics>, RslError> {
    if cfg.rounds == 0 {
        return Ok(Vec::new());
    }
    cfg.validate()?;
    if models.len() != cfg.k {
        return Err(RslError::Config(format!("{} models but k = {}", models.len(), cfg.k)));
    }
    for m in models.iter() {
        if m.source_vocab != parallel.source_vocab || m.target_vocab != parallel.target_vocab {
            return Err(RslError::Config(format!("model {} vocabulary differs from the corpus", m.id)));
        }
    }
    let combined = combine_sources(parallel, mono)?;
    let k = models.len();
    let mut opts: Vec<OptimizerState> =
        models.iter().map(|m| OptimizerState::from_config(&m.params, &cfg.train)).collect();
    let mut metrics = Vec::new();
    let mut prev_mean: Option<f64> = None;
    for round in 0..cfg.rounds {
        let mut e_rng = stream(cfg.train.seed, "e-step", round as u64);
        let pseudo = e_step(models, &combined, cfg, round, &mut e_rng)?;
        if let Some(dir) = &cfg.dump_dir {
            std::fs::create_dir_all(dir)?;
            pseudo.write_tsv(
                &dir.join(format!("pseudo-round-{round}.tsv")),
                &parallel.source_vocab,
                &parallel.target_vocab,
            )?;
        }
        let mut nlls = Vec::with_capacity(k);
        for i in 0..k {
            let view = pseudo.view_for(i);
            let mut m_rng = stream(cfg.train.seed, "m-step", (round * k + i) as u64);
            models[i].dropout_mode(true);
            let outcome = m_step(&mut models[i], parallel, &view, cfg, combined.len(), &mut opts[i], &mut m_rng);
            models[i].dropout_mode(false);
            match outcome {
                Ok(nll) => nlls.push(nll),
                Err(RslError::Train(TrainError::Diverged { .. })) => {
                    return Err(RslError::Diverged { round, model: i })
                }
                Err(e) => return Err(e),
            }
        }
        let (bleu, mean_bleu, diversity) = match held_out {
            Some(h) => {
                let (b, d) = held_out_scores(models, h, &cfg.decode)?;
                let mean = b.iter().sum::<f64>() / b.len() as f64;
                (Some(b), Some(mean), Some(d))
            }
            None => (None, None, None),
        };
        metrics.push(RoundMetrics {
            round,
            pseudo_pairs: pseudo.pairs.len(),
            clipped_weights: pseudo.clipped_weights,
            mean_train_nll: nlls,
            validation_bleu: bleu,
            mean_validation_bleu: mean_bleu,
            cross_diversity: diversity,
        });
        if let (Some(prev), Some(cur)) = (prev_mean, mean_bleu) {
            if cur - prev < 0.1 {
                break;
            }
        }
        if mean_bleu.is_some() {
            prev_mean = mean_bleu;
        }
    }
    Ok(metrics)
}

/// Per-model held-out BLEU plus the mean pairwise BLEU between decodes.
fn held_out_scores(
    models: &[BasicModel],
    held_out: &ParallelCorpus,
    decode: &DecodeConfig,
) -> Result<(Vec<f64>, f64), RslError> {
    let refs: Vec<TokenSeq> = held_out.pairs.iter().map(|p| p.target.clone()).collect();
    let mut decodes: Vec<Vec<TokenSeq>> = Vec::with_capacity(models.len());
    for m in models {
        let mut outs = Vec::with_capacity(held_out.len());
        for p in &held_out.pairs {
            outs.push(beam_search_single(m, &p.source, decode)?[0].tokens.clone());
        }
        decodes.push(outs);
    }
    let mut bleu = Vec::with_capacity(models.len());
    for d in &decodes {
        bleu.push(corpus_bleu(d, &refs)?.bleu);
    }
    let k = models.len();
    let mut diversity = 0.0;
    if k > 1 {
        let mut sum = 0.0;
        for a in 0..k {
            for b in 0..k {
                if a != b {
                    sum += corpus_bleu(&decodes[a], &decodes[b])?.bleu;
                }
            }
        }
        diversity = sum / (k * (k - 1)) as f64;
    }
    Ok((bleu, diversity))
}

/// Self-training: the model pseudo-labels the combined sources with beam
/// top-k (weight 1) and retrains on real plus pseudo pairs, regenerating
/// each round. The single-model reduction of the co-EM loop.
pub fn self_training(
    model: &mut BasicModel,
    parallel: &ParallelCorpus,
    mono: &MonolingualCorpus,
    cfg: &RSLConfig,
    top_k: usize,
) -> Result<Vec<RoundMetrics>, RslError> {
    cfg.validate_single()?;
    if top_k == 0 {
        return Err(RslError::Config("top_k must be at least 1".into()));
    }
    if parallel.is_empty() {
        return Err(RslError::Config("parallel corpus is empty".into()));
    }
    let combined = combine_sources(parallel, mono)?;
    let n = parallel.len() as f64;
    let m = combined.len() as f64;
    let scale = n / (m * top_k as f64);
    let mut opt = OptimizerState::from_config(&model.params, &cfg.train);
    let mut metrics = Vec::new();
    for round in 0..cfg.rounds {
        let mut pseudo: Vec<(&TokenSeq, TokenSeq)> = Vec::with_capacity(combined.len() * top_k);
        for x in &combined.sentences {
            for y in topk_pseudo(model, x, top_k, &cfg.decode)? {
                pseudo.push((x, y));
            }
        }
        let mut items: Vec<TrainItem> = parallel
            .pairs
            .iter()
            .map(|p| TrainItem { source: &p.source, target: &p.target, coeff: 1.0 })
            .collect();
        for (x, y) in &pseudo {
            items.push(TrainItem { source: x, target: y, coeff: scale });
        }
        let mut m_rng = stream(cfg.train.seed, "self-training", round as u64);
        model.dropout_mode(true);
        let mut last = Ok(0.0);
        for _ in 0..cfg.m_step_epochs {
            last = weighted_epoch(model, &items, &cfg.train, &mut opt, &mut m_rng);
            if last.is_err() {
                break;
            }
        }
        model.dropout_mode(false);
        let nll = match last {
            Ok(v) => v,
            Err(RslError::Train(TrainError::Diverged { .. })) => {
                return Err(RslError::Diverged { round, model: model.id })
            }
            Err(e) => return Err(e),
        };
        metrics.push(RoundMetrics {
            round,
            pseudo_pairs: pseudo.len(),
            clipped_weights: 0,
            mean_train_nll: vec![nll],
            validation_bleu: None,
            mean_validation_bleu: None,
            cross_diversity: None,
        });
    }
    Ok(metrics)
}

/// Synthetic (source, target) pairs for back-translation: the backward
/// model translates each target-side sentence to a source-side
/// hypothesis. Reserved ids a raw decode may emit are folded to unk so
/// the synthetic source stays well-formed; one pair per mono sentence.
pub fn synthesize_bt_pairs(
    bwd: &BasicModel,
    target_mono: &MonolingualCorpus,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<Vec<SentencePair>, RslError> {
    let mut out = Vec::with_capacity(target_mono.len());
    for t in &target_mono.sentences {
        let hyp = topk_pseudo(bwd, t, 1, decode)?;
        let mut src_ids: Vec<u32> = hyp[0]
            .content()
            .iter()
            .map(|&id| if id == PAD || id == BOS { UNK } else { id })
            .collect();
        if src_ids.is_empty() {
            src_ids.push(UNK);
        }
        out.push(SentencePair {
            source: TokenSeq::source(src_ids, source_vocab)?,
            target: TokenSeq::target_from_content(t.ids().to_vec(), target_vocab)?,
        });
    }
    Ok(out)
}

/// Back-translation baseline: target-side monolingual sentences are
/// translated to synthetic sources once, and the forward model is
/// retrained with plain MLE on real plus synthetic pairs at weight 1.
/// Returns the final epoch's training NLL.
pub fn back_translation(
    fwd: &mut BasicModel,
    bwd: &BasicModel,
    parallel: &ParallelCorpus,
    target_mono: &MonolingualCorpus,
    cfg: &RSLConfig,
) -> Result<f64, RslError> {
    cfg.validate_single()?;
    if bwd.source_vocab != fwd.target_vocab || bwd.target_vocab != fwd.source_vocab {
        return Err(RslError::Config("backward model vocabularies must mirror the forward model".into()));
    }
    if target_mono.vocab != fwd.target_vocab {
        return Err(RslError::Config("monolingual vocabulary must match the target side".into()));
    }
    let mut pairs = parallel.pairs.clone();
    pairs.extend(synthesize_bt_pairs(bwd, target_mono, &fwd.source_vocab, &fwd.target_vocab, &cfg.decode)?);
    let union = ParallelCorpus::new(pairs, fwd.source_vocab.clone(), fwd.target_vocab.clone())?;
    let mut opt = OptimizerState::from_config(&fwd.params, &cfg.train);
    let mut rng = stream(cfg.train.seed, "back-translation", 0);
    fwd.dropout_mode(true);
    let mut last = 0.0;
    for _ in 0..cfg.m_step_epochs * cfg.rounds {
        match mle_epoch(fwd, &union, &cfg.train, &mut opt, &mut rng) {
            Ok(v) => last = v,
            Err(e) => {
                fwd.dropout_mode(false);
                return Err(e.into());
            }
        }
    }
    fwd.dropout_mode(false);
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::rel_err;
    use crate::models::{init_model, ArchKind, ArchitectureSpec, Direction};
    use rand::SeedableRng;

    fn vocab4() -> Vocabulary {
        Vocabulary::from_content(["a", "b", "c", "d"].map(String::from)).unwrap()
    }

    fn arch(kind: ArchKind) -> ArchitectureSpec {
        let mut a = match kind {
            ArchKind::Attention => ArchitectureSpec::attention(),
            ArchKind::Recurrent => ArchitectureSpec::recurrent(),
            ArchKind::Convolutional => ArchitectureSpec::convolutional(),
        };
        a.d_model = 8;
        a.ffn_width = 16;
        a.dropout = 0.0;
        a
    }

    fn tiny(kind: ArchKind, dir: Direction, id: usize, seed: u64) -> BasicModel {
        let v = vocab4();
        init_model(arch(kind), dir, &v, &v, id, seed).unwrap()
    }

    /// Concentrates mass on short sequences so oracle truncation error
    /// sits far below the comparison tolerances.
    fn bias_eos(model: &mut BasicModel, amount: f64) {
        let idx = model.params.index_of("out_b");
        model.params.values_mut()[idx].data_mut()[EOS as usize] += amount;
    }

    fn src(ids: &[u32]) -> TokenSeq {
        TokenSeq::source(ids.to_vec(), &vocab4()).unwrap()
    }

    fn tgt(ids: &[u32]) -> TokenSeq {
        TokenSeq::target_from_content(ids.to_vec(), &vocab4()).unwrap()
    }

    fn tiny_parallel() -> ParallelCorpus {
        let v = vocab4();
        let pairs = vec![
            SentencePair { source: src(&[4, 5]), target: tgt(&[5, 4]) },
            SentencePair { source: src(&[6]), target: tgt(&[6]) },
            SentencePair { source: src(&[7, 4, 5]), target: tgt(&[5, 4, 7]) },
            SentencePair { source: src(&[5, 6]), target: tgt(&[6, 5]) },
        ];
        ParallelCorpus::new(pairs, v.clone(), v).unwrap()
    }

    fn tiny_mono() -> MonolingualCorpus {
        MonolingualCorpus::new(vec![src(&[4, 6]), src(&[7, 7])], vocab4()).unwrap()
    }

    fn fast_cfg() -> RSLConfig {
        let mut cfg = RSLConfig {
            rounds: 1,
            samples_per_source: 1,
            m_step_epochs: 1,
            ..RSLConfig::default()
        };
        cfg.decode.max_len = 4;
        cfg.decode.beam = 2;
        cfg.decode.groups = 1;
        cfg.train.batch_tokens = 64;
        cfg.train.base_lr = 1e-3;
        cfg
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = fast_cfg();
        cfg.k = 1;
        assert!(cfg.validate().is_err());
        let mut cfg = fast_cfg();
        cfg.samples_per_source = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = fast_cfg();
        cfg.weight_clip = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = fast_cfg();
        cfg.weight_clip = f64::INFINITY; // clip disabled is a valid setting
        assert!(cfg.validate().is_ok());
        let mut cfg = fast_cfg();
        cfg.temperature = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = fast_cfg();
        cfg.m_step_epochs = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn enumeration_obeys_the_law_of_total_probability() {
        for (kind, dir, seed) in [
            (ArchKind::Attention, Direction::L2R, 1),
            (ArchKind::Recurrent, Direction::R2L, 2),
            (ArchKind::Convolutional, Direction::L2R, 3),
        ] {
            let m = tiny(kind, dir, 0, seed);
            let d = enumerate_distribution(&m, &src(&[4, 5]), 2).unwrap();
            let total: f64 = d.entries.iter().map(|(_, p)| p).sum();
            assert!((total + d.truncated_mass - 1.0).abs() < 1e-12, "{kind:?} {dir:?}");
            assert!(d.truncated_mass >= 0.0 && d.truncated_mass < 1.0);
            // support: all sequences over the 7 non-eos tokens, lengths 0..=2
            assert_eq!(d.support_size(), 1 + 7 + 49);
        }
    }

    #[test]
    fn eos_biased_model_is_nearly_a_point_mass() {
        let mut m = tiny(ArchKind::Attention, Direction::L2R, 0, 4);
        bias_eos(&mut m, 12.0);
        let d = enumerate_distribution(&m, &src(&[4]), 2).unwrap();
        let (first, p) = &d.entries[0];
        assert_eq!(first.ids(), &[EOS]);
        assert!(*p > 1.0 - 1e-4, "{p}");
        assert!(d.truncated_mass < 1e-9);
    }

    #[test]
    fn oracle_guard_rejects_large_spaces() {
        let v = Vocabulary::from_content((0..30).map(|i| format!("t{i}")).collect::<Vec<_>>()).unwrap();
        let m = init_model(arch(ArchKind::Attention), Direction::L2R, &v, &v, 0, 1).unwrap();
        let x = TokenSeq::source(vec![4], &v).unwrap();
        match enumerate_distribution(&m, &x, 12) {
            Err(RslError::OracleTooLarge { space, limit }) => {
                assert!(space > limit);
            }
            other => panic!("expected guard error, got {other:?}"),
        }
    }

    #[test]
    fn enumeration_agrees_with_sampling_frequencies() {
        let m = tiny(ArchKind::Attention, Direction::L2R, 0, 7);
        let x = src(&[5, 4]);
        let d = enumerate_distribution(&m, &x, 2).unwrap();
        let n = 6000usize;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts: HashMap<Vec<u32>, usize> = HashMap::new();
        let mut truncated = 0usize;
        // sampling at bound + 1 makes natural termination cover content
        // lengths 0..=2 and the forced-eos bucket the depth-3 frontier
        for _ in 0..n {
            let (y, was_truncated) = m.sample(&x, 3, 1.0, &mut rng).unwrap();
            if was_truncated {
                truncated += 1;
            } else {
                *counts.entry(y.ids().to_vec()).or_insert(0) += 1;
            }
        }
        for (y, p) in &d.entries {
            let freq = counts.get(y.ids()).copied().unwrap_or(0) as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!(
                (freq - p).abs() <= 4.0 * sigma + 2.0 / n as f64,
                "seq {:?}: freq {freq} vs p {p}",
                y.ids()
            );
        }
        let mass = d.truncated_mass;
        let sigma = (mass * (1.0 - mass) / n as f64).sqrt();
        assert!((truncated as f64 / n as f64 - mass).abs() <= 4.0 * sigma + 2.0 / n as f64);
    }

    #[test]
    fn identical_models_have_zero_kl_and_zero_gradients() {
        let mut a = tiny(ArchKind::Recurrent, Direction::L2R, 0, 9);
        bias_eos(&mut a, 8.0);
        let mut b = a.clone();
        b.id = 1; // same parameters, distinct identity
        let r = exact_kl_and_grads(&a, &b, &src(&[4, 5]), 2).unwrap();
        assert!(r.kl_j_i.abs() < 1e-10, "{}", r.kl_j_i);
        assert!(r.kl_i_j.abs() < 1e-10, "{}", r.kl_i_j);
        for g in r.grad_kl_j_i.iter().chain(&r.grad_kl_i_j) {
            for &v in g.data() {
                assert!(v.abs() < 1e-10, "{v}");
            }
        }
    }

    #[test]
    fn kl_is_positive_for_distinct_models() {
        let mut a = tiny(ArchKind::Attention, Direction::L2R, 0, 3);
        bias_eos(&mut a, 8.0);
        let mut b = tiny(ArchKind::Attention, Direction::L2R, 1, 5);
        bias_eos(&mut b, 8.0);
        let r = exact_kl_and_grads(&a, &b, &src(&[4, 5]), 2).unwrap();
        assert!(r.kl_j_i > 0.0);
        assert!(r.kl_i_j > 0.0);
        assert!(r.truncated_mass_i < 1e-6 && r.truncated_mass_j < 1e-6);
    }

    #[test]
    fn oracle_rejects_diffuse_models() {
        // unbiased tiny models spread far too much mass past the bound
        let a = tiny(ArchKind::Attention, Direction::L2R, 0, 3);
        let b = tiny(ArchKind::Attention, Direction::L2R, 1, 5);
        match exact_kl_and_grads(&a, &b, &src(&[4, 5]), 2) {
            Err(RslError::OracleInvalid { mass_i, mass_j }) => {
                assert!(mass_i >= 1e-6 || mass_j >= 1e-6);
            }
            other => panic!("expected OracleInvalid, got {other:?}"),
        }
    }

    /// The anti-drift anchor: gradients obtained by differentiating the
    /// renormalized KL sums through the tape must match the closed-form
    /// enumeration expectations -sum_y P_j grad log P_i (first direction)
    /// and sum_y P_i (log P_i - log P_j) grad log P_i (second direction).
    /// The residual is of the order of the truncated mass.
    #[test]
    fn autodiff_gradients_match_closed_form_enumeration() {
        // bias 12 pushes the truncated mass to ~1e-11 so the logZ
        // residual sits two orders below the 1e-8 gate
        let mut mi = tiny(ArchKind::Attention, Direction::L2R, 0, 13);
        bias_eos(&mut mi, 12.0);
        let mut mj = tiny(ArchKind::Recurrent, Direction::R2L, 1, 14);
        bias_eos(&mut mj, 12.0);
        let x = src(&[4, 5]);
        let l_max = 2;
        let report = exact_kl_and_grads(&mi, &mj, &x, l_max).unwrap();

        let enum_i = enumerate_distribution(&mi, &x, l_max).unwrap();
        let enum_j = enumerate_distribution(&mj, &x, l_max).unwrap();
        let lz_i = logsumexp(enum_i.log_probs());
        let lz_j = logsumexp(enum_j.log_probs());
        let n = enum_i.support_size();
        let mut w_ji = vec![0.0; n];
        let mut w_ij = vec![0.0; n];
        for (idx, (y, _)) in enum_i.entries.iter().enumerate() {
            let lpi = enum_i.log_probs()[idx] - lz_i;
            let lpj = enum_j.log_probs()[enum_j.position(y).unwrap()] - lz_j;
            w_ji[idx] = -lpj.exp();
            w_ij[idx] = lpi.exp() * (lpi - lpj);
        }
        let closed_ji = weighted_score_sum(&mi, &x, &enum_i, &w_ji);
        let closed_ij = weighted_score_sum(&mi, &x, &enum_i, &w_ij);
        let mut worst: f64 = 0.0;
        for (a, b) in report.grad_kl_j_i.iter().zip(&closed_ji) {
            for (&x1, &x2) in a.data().iter().zip(b.data()) {
                worst = worst.max(rel_err(x1, x2));
            }
        }
        for (a, b) in report.grad_kl_i_j.iter().zip(&closed_ij) {
            for (&x1, &x2) in a.data().iter().zip(b.data()) {
                worst = worst.max(rel_err(x1, x2));
            }
        }
        assert!(worst < 1e-8, "worst rel err {worst}");
    }

    /// sum_y w_y * grad log P(y|x) over the support, by one backward pass.
    fn weighted_score_sum(
        model: &BasicModel,
        x: &TokenSeq,
        support: &EnumeratedDistribution,
        weights: &[f64],
    ) -> Vec<NdArray> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let ys: Vec<&TokenSeq> = support.entries.iter().map(|(y, _)| y).collect();
        let v = support_log_probs(model, &mut tape, &bound, x, &ys).unwrap();
        let w = tape.leaf(NdArray::from_vec(&[1, weights.len()], weights.to_vec()));
        let prod = tape.mul(v, w).unwrap();
        let root = tape.sum(prod).unwrap();
        let g = tape.backward(root).unwrap();
        bound.ids().iter().map(|&id| g.dense(&tape, id)).collect()
    }

    #[test]
    fn renormalized_score_function_mean_is_zero() {
        let mut m = tiny(ArchKind::Convolutional, Direction::L2R, 0, 21);
        bias_eos(&mut m, 8.0);
        let x = src(&[6]);
        let d = enumerate_distribution(&m, &x, 2).unwrap();
        let lz = logsumexp(d.log_probs());
        let w: Vec<f64> = d.log_probs().iter().map(|lp| (lp - lz).exp()).collect();
        let mean = weighted_score_sum(&m, &x, &d, &w);
        for g in &mean {
            for &v in g.data() {
                assert!(v.abs() < 1e-8, "{v}");
            }
        }
    }

    /// Weights each possible sample by its true sampling probability and
    /// checks that the estimator's exact expectation (clip disabled, self
    /// term on) reproduces the oracle gradient of KL(P_j||P_i) +
    /// KL(P_i||P_j). Validates both expectation terms and the implicit
    /// use of the score function's zero mean.
    #[test]
    fn estimator_expectation_matches_exact_gradients() {
        let mut mi = tiny(ArchKind::Attention, Direction::L2R, 0, 31);
        bias_eos(&mut mi, 8.0);
        let mut mj = tiny(ArchKind::Convolutional, Direction::L2R, 1, 32);
        bias_eos(&mut mj, 8.0);
        let x = src(&[7, 6]);
        let l_max = 2;
        let report = exact_kl_and_grads(&mi, &mj, &x, l_max).unwrap();
        let enum_i = enumerate_distribution(&mi, &x, l_max).unwrap();
        let enum_j = enumerate_distribution(&mj, &x, l_max).unwrap();
        // per-sequence estimator contribution, weighted by true sampling
        // probability: cross samples from j at weight 1, self samples
        // from i at the unclipped log ratio
        let n = enum_i.support_size();
        let mut w = vec![0.0; n];
        for (idx, (y, p_i)) in enum_i.entries.iter().enumerate() {
            let pos = enum_j.position(y).unwrap();
            let p_j = enum_j.entries[pos].1;
            let ratio = enum_j.log_probs()[pos] - enum_i.log_probs()[idx];
            w[idx] = -p_j - p_i * ratio;
        }
        let expected = weighted_score_sum(&mi, &x, &enum_i, &w);
        let mut worst: f64 = 0.0;
        for ((a, b), c) in report.grad_kl_j_i.iter().zip(&report.grad_kl_i_j).zip(&expected) {
            for ((&g1, &g2), &e) in a.data().iter().zip(b.data()).zip(c.data()) {
                worst = worst.max(rel_err(g1 + g2, e));
            }
        }
        assert!(worst < 1e-6, "worst rel err {worst}");
    }

    #[test]
    fn estimator_counts_samples_and_clips() {
        let mi = tiny(ArchKind::Attention, Direction::L2R, 0, 41);
        let mj = tiny(ArchKind::Recurrent, Direction::L2R, 1, 42);
        let mut cfg = fast_cfg();
        cfg.samples_per_source = 3;
        cfg.self_term = true;
        cfg.weight_clip = 1e-6; // force every self weight onto the bound
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est = rs_grad_estimate(&mi, &[&mj], &src(&[4]), &cfg, &mut rng).unwrap();
        assert_eq!(est.samples, 6);
        assert_eq!(est.clipped, 3);
        for g in &est.grad {
            assert!(g.data().iter().all(|v| v.is_finite()));
        }
        assert!(est.grad.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn self_weights_vanish_for_identical_models() {
        let a = tiny(ArchKind::Attention, Direction::L2R, 0, 50);
        let mut b = a.clone();
        b.id = 1;
        let mut cfg = fast_cfg();
        cfg.self_term = true;
        cfg.samples_per_source = 2;
        let combined = combine_sources(&tiny_parallel(), &MonolingualCorpus::empty(vocab4())).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pseudo = e_step(&[a, b], &combined, &cfg, 0, &mut rng).unwrap();
        let self_pairs: Vec<_> = pseudo
            .pairs
            .iter()
            .filter(|p| matches!(p.origin, PseudoOrigin::SelfRatio { .. }))
            .collect();
        assert!(!self_pairs.is_empty());
        for p in self_pairs {
            assert_eq!(p.weight, 0.0, "identical models must give exactly zero log ratios");
        }
        assert_eq!(pseudo.clipped_weights, 0);
    }

    #[test]
    fn e_step_counting_matches_the_closed_form() {
        let models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 60),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 61),
        ];
        // one parallel pair plus two mono sentences: three sources total
        let parallel = ParallelCorpus::new(
            vec![SentencePair { source: src(&[4, 5]), target: tgt(&[5, 4]) }],
            vocab4(),
            vocab4(),
        )
        .unwrap();
        let mono = MonolingualCorpus::new(vec![src(&[4, 6]), src(&[7, 7])], vocab4()).unwrap();
        let combined = combine_sources(&parallel, &mono).unwrap();
        let mut cfg = fast_cfg();
        cfg.samples_per_source = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pseudo = e_step(&models, &combined, &cfg, 0, &mut rng).unwrap();
        assert_eq!(pseudo.pairs.len(), 12); // 3 sources x 2 models x 2 samples
        assert_eq!(pseudo.view_for(0).len(), 6);
        assert_eq!(pseudo.view_for(1).len(), 6);
        for p in &pseudo.pairs {
            assert_eq!(p.weight, 1.0);
            assert!(p.target.ends_with_eos());
            assert!(p.target.content().len() <= cfg.decode.max_len);
            assert_eq!(p.round, 0);
        }
    }

    #[test]
    fn e_step_counting_property_three_models() {
        let models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 70),
            tiny(ArchKind::Recurrent, Direction::R2L, 1, 71),
            tiny(ArchKind::Convolutional, Direction::L2R, 2, 72),
        ];
        let combined = combine_sources(&tiny_parallel(), &tiny_mono()).unwrap();
        let mut cfg = fast_cfg();
        cfg.k = 3;
        cfg.samples_per_source = 2;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pseudo = e_step(&models, &combined, &cfg, 2, &mut rng).unwrap();
        let k = 3;
        let s = 2;
        let d = combined.len();
        assert_eq!(pseudo.pairs.len(), k * s * d);
        let visible_total: usize = (0..k).map(|i| pseudo.view_for(i).len()).sum();
        assert_eq!(visible_total, k * (k - 1) * s * d);
    }

    #[test]
    fn beam_mode_e_step_is_deterministic_and_forces_one_sample() {
        let models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 80),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 81),
        ];
        let combined = combine_sources(&tiny_parallel(), &tiny_mono()).unwrap();
        let mut cfg = fast_cfg();
        cfg.mode = PseudoMode::Beam;
        cfg.samples_per_source = 5;
        let mut rng_a = ChaCha8Rng::seed_from_u64(5);
        let mut rng_b = ChaCha8Rng::seed_from_u64(99);
        let a = e_step(&models, &combined, &cfg, 0, &mut rng_a).unwrap();
        let b = e_step(&models, &combined, &cfg, 0, &mut rng_b).unwrap();
        assert_eq!(a.pairs.len(), 2 * combined.len());
        assert_eq!(a.pairs.len(), b.pairs.len());
        for (x, y) in a.pairs.iter().zip(&b.pairs) {
            assert_eq!(x.target.ids(), y.target.ids());
            assert_eq!(x.weight.to_bits(), y.weight.to_bits());
            assert_eq!(x.origin, y.origin);
        }
    }

    #[test]
    fn m_step_with_empty_view_is_bitwise_mle() {
        let parallel = tiny_parallel();
        let cfg = fast_cfg();
        let mut a = tiny(ArchKind::Recurrent, Direction::L2R, 0, 90);
        let mut b = a.clone();
        let mut opt_a = OptimizerState::from_config(&a.params, &cfg.train);
        let mut opt_b = OptimizerState::from_config(&b.params, &cfg.train);
        let mut rng_a = ChaCha8Rng::seed_from_u64(6);
        let mut rng_b = ChaCha8Rng::seed_from_u64(6);
        let nll_m = m_step(&mut a, &parallel, &[], &cfg, parallel.len(), &mut opt_a, &mut rng_a).unwrap();
        let nll_e = mle_epoch(&mut b, &parallel, &cfg.train, &mut opt_b, &mut rng_b).unwrap();
        assert_eq!(nll_m.to_bits(), nll_e.to_bits());
        for (x, y) in a.params.values().iter().zip(b.params.values()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn zero_weight_pseudo_pairs_contribute_exactly_nothing() {
        let parallel = tiny_parallel();
        let mut cfg = fast_cfg();
        cfg.train.batch_tokens = 1024; // one batch holds everything
        let zero = PseudoPair {
            source: src(&[4, 6]),
            target: tgt(&[5, 5]),
            weight: 0.0,
            origin: PseudoOrigin::SelfRatio { model: 0 },
            round: 0,
        };
        let mut a = tiny(ArchKind::Attention, Direction::L2R, 0, 91);
        let mut b = a.clone();
        let mut opt_a = OptimizerState::from_config(&a.params, &cfg.train);
        let mut opt_b = OptimizerState::from_config(&b.params, &cfg.train);
        let mut rng_a = ChaCha8Rng::seed_from_u64(7);
        let mut rng_b = ChaCha8Rng::seed_from_u64(7);
        m_step(&mut a, &parallel, &[&zero], &cfg, parallel.len() + 1, &mut opt_a, &mut rng_a).unwrap();
        m_step(&mut b, &parallel, &[], &cfg, parallel.len() + 1, &mut opt_b, &mut rng_b).unwrap();
        for (x, y) in a.params.values().iter().zip(b.params.values()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() == 0.0, "{p} vs {q}");
            }
        }
    }

    #[test]
    fn weighted_loss_matches_hand_computation() {
        let parallel = tiny_parallel();
        let mut cfg = fast_cfg();
        cfg.train.base_lr = 0.0; // loss observed, parameters untouched
        cfg.train.batch_tokens = 1024;
        let mut model = tiny(ArchKind::Recurrent, Direction::L2R, 0, 92);
        let pseudo = PseudoPair {
            source: src(&[4, 6]),
            target: tgt(&[5]),
            weight: 0.5,
            origin: PseudoOrigin::Cross { model: 1 },
            round: 0,
        };
        // coefficient: weight * N / (M * S) with N = 4, M = 6, S = 1
        let c = 0.5 * 4.0 / 6.0;
        let mut num = 0.0;
        let mut den = 0.0;
        for p in &parallel.pairs {
            num += model.log_prob(&p.source, &p.target).unwrap();
            den += p.target.len() as f64;
        }
        num += c * model.log_prob(&pseudo.source, &pseudo.target).unwrap();
        den += c * pseudo.target.len() as f64;
        let expected = -num / den;
        let mut opt = OptimizerState::from_config(&model.params, &cfg.train);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let got = m_step(&mut model, &parallel, &[&pseudo], &cfg, 6, &mut opt, &mut rng).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn co_em_zero_rounds_returns_models_unchanged() {
        let mut models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 100),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 101),
        ];
        let before: Vec<Vec<u64>> = models
            .iter()
            .map(|m| m.params.values().iter().flat_map(|a| a.data().iter().map(|v| v.to_bits())).collect())
            .collect();
        let mut cfg = fast_cfg();
        cfg.rounds = 0;
        let metrics = co_em(&mut models, &tiny_parallel(), &tiny_mono(), &cfg, None).unwrap();
        assert!(metrics.is_empty());
        for (m, b) in models.iter().zip(&before) {
            let after: Vec<u64> =
                m.params.values().iter().flat_map(|a| a.data().iter().map(|v| v.to_bits())).collect();
            assert_eq!(&after, b);
        }
    }

    #[test]
    fn co_em_runs_without_monolingual_data() {
        let mut models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 110),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 111),
        ];
        let parallel = tiny_parallel();
        let cfg = fast_cfg();
        let metrics =
            co_em(&mut models, &parallel, &MonolingualCorpus::empty(vocab4()), &cfg, None).unwrap();
        assert_eq!(metrics.len(), 1);
        assert_eq!(metrics[0].pseudo_pairs, 2 * parallel.len());
        assert_eq!(metrics[0].mean_train_nll.len(), 2);
        assert!(metrics[0].validation_bleu.is_none());
    }

    #[test]
    fn co_em_with_lr_zero_and_beam_mode_is_an_e_step_fixed_point() {
        let mut models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 120),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 121),
        ];
        let dir = std::env::temp_dir().join(format!("rsl-fixed-point-{}", std::process::id()));
        let mut cfg = fast_cfg();
        cfg.rounds = 2;
        cfg.mode = PseudoMode::Beam;
        cfg.train.base_lr = 0.0;
        cfg.dump_dir = Some(dir.clone());
        co_em(&mut models, &tiny_parallel(), &tiny_mono(), &cfg, None).unwrap();
        let r0 = std::fs::read_to_string(dir.join("pseudo-round-0.tsv")).unwrap();
        let r1 = std::fs::read_to_string(dir.join("pseudo-round-1.tsv")).unwrap();
        // identical except for the stamped round column
        assert_eq!(r0.replace("\t0\n", "\tR\n"), r1.replace("\t1\n", "\tR\n"));
        assert!(!r0.is_empty());
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn co_em_reports_divergence_with_round_and_model() {
        let mut models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 130),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 131),
        ];
        let idx = models[1].params.index_of("out_b");
        models[1].params.values_mut()[idx].data_mut()[0] = f64::NAN;
        let cfg = fast_cfg();
        match co_em(&mut models, &tiny_parallel(), &tiny_mono(), &cfg, None) {
            Err(RslError::Diverged { round: 0, model: 1 }) => {}
            other => panic!("expected Diverged {{round: 0, model: 1}}, got {other:?}"),
        }
    }

    #[test]
    fn co_em_emits_validation_metrics_when_held_out_is_given() {
        let mut models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 140),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 141),
        ];
        let parallel = tiny_parallel();
        let cfg = fast_cfg();
        let metrics = co_em(
            &mut models,
            &parallel,
            &MonolingualCorpus::empty(vocab4()),
            &cfg,
            Some(&parallel),
        )
        .unwrap();
        let m = &metrics[0];
        let bleu = m.validation_bleu.as_ref().unwrap();
        assert_eq!(bleu.len(), 2);
        assert!(bleu.iter().all(|b| (0.0..=100.0).contains(b)));
        assert!(m.mean_validation_bleu.is_some());
        assert!(m.cross_diversity.is_some());
    }

    #[test]
    fn self_training_counts_pseudo_pairs_and_updates_the_model() {
        let mut model = tiny(ArchKind::Attention, Direction::L2R, 0, 150);
        let before: Vec<u64> =
            model.params.values().iter().flat_map(|a| a.data().iter().map(|v| v.to_bits())).collect();
        let parallel = tiny_parallel();
        let mono = tiny_mono();
        let mut cfg = fast_cfg();
        cfg.rounds = 2;
        let metrics = self_training(&mut model, &parallel, &mono, &cfg, 2).unwrap();
        assert_eq!(metrics.len(), 2);
        let combined = parallel.len() + mono.len();
        assert_eq!(metrics[0].pseudo_pairs, combined * 2);
        let after: Vec<u64> =
            model.params.values().iter().flat_map(|a| a.data().iter().map(|v| v.to_bits())).collect();
        assert_ne!(before, after);
    }

    #[test]
    fn self_training_rejects_top_k_beyond_the_beam() {
        let mut model = tiny(ArchKind::Attention, Direction::L2R, 0, 151);
        let cfg = fast_cfg(); // beam 2
        assert!(self_training(&mut model, &tiny_parallel(), &tiny_mono(), &cfg, 3).is_err());
    }

    #[test]
    fn back_translation_with_empty_mono_is_bitwise_mle() {
        let v = vocab4();
        let mut fwd = tiny(ArchKind::Attention, Direction::L2R, 0, 160);
        let bwd = tiny(ArchKind::Recurrent, Direction::L2R, 1, 161);
        let parallel = tiny_parallel();
        let mut cfg = fast_cfg();
        cfg.rounds = 2;
        cfg.m_step_epochs = 1;
        let mut reference = fwd.clone();
        back_translation(&mut fwd, &bwd, &parallel, &MonolingualCorpus::empty(v), &cfg).unwrap();
        let mut opt = OptimizerState::from_config(&reference.params, &cfg.train);
        let mut rng = stream(cfg.train.seed, "back-translation", 0);
        for _ in 0..2 {
            mle_epoch(&mut reference, &parallel, &cfg.train, &mut opt, &mut rng).unwrap();
        }
        for (x, y) in fwd.params.values().iter().zip(reference.params.values()) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert_eq!(p.to_bits(), q.to_bits());
            }
        }
    }

    #[test]
    fn back_translation_synthesizes_one_pair_per_mono_sentence() {
        let bwd = tiny(ArchKind::Recurrent, Direction::L2R, 1, 170);
        let mono = tiny_mono();
        let cfg = fast_cfg();
        let v = vocab4();
        let pairs = synthesize_bt_pairs(&bwd, &mono, &v, &v, &cfg.decode).unwrap();
        assert_eq!(pairs.len(), mono.len());
        for (pair, orig) in pairs.iter().zip(&mono.sentences) {
            assert_eq!(pair.target.content(), orig.ids());
            assert!(pair.target.ends_with_eos());
            assert!(!pair.source.ids().is_empty());
        }
    }

    #[test]
    fn back_translation_rejects_mismatched_vocabularies() {
        let mut fwd = tiny(ArchKind::Attention, Direction::L2R, 0, 180);
        let other = Vocabulary::from_content(["x", "y", "z", "w", "q"].map(String::from)).unwrap();
        let bwd = init_model(arch(ArchKind::Recurrent), Direction::L2R, &other, &other, 1, 181).unwrap();
        let cfg = fast_cfg();
        match back_translation(&mut fwd, &bwd, &tiny_parallel(), &tiny_mono(), &cfg) {
            Err(RslError::Config(_)) => {}
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn pseudo_corpus_tsv_has_five_fields_per_line() {
        let models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 190),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 191),
        ];
        let combined = combine_sources(&tiny_parallel(), &tiny_mono()).unwrap();
        let mut cfg = fast_cfg();
        cfg.self_term = true;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pseudo = e_step(&models, &combined, &cfg, 3, &mut rng).unwrap();
        let path = std::env::temp_dir().join(format!("rsl-tsv-{}.tsv", std::process::id()));
        pseudo.write_tsv(&path, &vocab4(), &vocab4()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::remove_file(&path).ok();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), pseudo.pairs.len());
        for line in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            assert_eq!(fields.len(), 5, "line {line:?}");
            fields[2].parse::<f64>().unwrap();
            assert!(fields[3].starts_with("cross:") || fields[3].starts_with("self:"));
            assert_eq!(fields[4], "3");
        }
    }

    #[test]
    fn views_exclude_own_cross_and_others_self_pairs() {
        let models = vec![
            tiny(ArchKind::Attention, Direction::L2R, 0, 200),
            tiny(ArchKind::Recurrent, Direction::L2R, 1, 201),
        ];
        let combined = combine_sources(&tiny_parallel(), &MonolingualCorpus::empty(vocab4())).unwrap();
        let mut cfg = fast_cfg();
        cfg.self_term = true;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let pseudo = e_step(&models, &combined, &cfg, 0, &mut rng).unwrap();
        for i in 0..2 {
            for p in pseudo.view_for(i) {
                match p.origin {
                    PseudoOrigin::Cross { model } => assert_ne!(model, i),
                    PseudoOrigin::SelfRatio { model } => assert_eq!(model, i),
                }
            }
        }
    }
}
