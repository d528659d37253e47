//! MLE training: Adam with inverse-sqrt warmup, length-sorted token-budget
//! batching, checkpoint save/load/averaging.

use crate::autodiff::{AdError, NodeId, Tape};
use crate::corpus::{ParallelCorpus, SentencePair, Vocabulary};
use crate::models::{ArchKind, ArchitectureSpec, BasicModel, Bound, Direction, Dropout, ModelError, ParamSet};
use crate::nd::NdArray;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged: non-finite loss in batch {batch}")]
    Diverged { batch: usize },
    #[error("non-finite gradient for parameter {0}")]
    NanGradient(String),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Token budget per batch, counting target tokens including eos.
    pub batch_tokens: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub eval_every: usize,
    pub base_lr: f64,
    pub warmup: u64,
    /// Evals without validation improvement before pretraining stops.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 60,
            batch_tokens: 512,
            clip_norm: 1.0,
            seed: 0,
            checkpoint_every: 1,
            eval_every: 1,
            base_lr: 5e-3,
            warmup: 400,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.max_epochs == 0
            || self.batch_tokens == 0
            || self.checkpoint_every == 0
            || self.eval_every == 0
            || self.warmup == 0
            || self.patience == 0
        {
            return Err(TrainError::Config("epoch, batch, warmup, and cadence budgets must be positive".into()));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(TrainError::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !self.base_lr.is_finite() || self.base_lr < 0.0 {
            return Err(TrainError::Config(format!("base_lr must be finite and non-negative, got {}", self.base_lr)));
        }
        Ok(())
    }
}

/// Adam accumulators, kept parallel to the owning model's parameter order.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    m: Vec<NdArray>,
    v: Vec<NdArray>,
    step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub base_lr: f64,
    pub warmup: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamSet) -> Self {
        Self::with_schedule(params, 5e-3, 400)
    }

    pub fn with_schedule(params: &ParamSet, base_lr: f64, warmup: u64) -> Self {
        let zeros: Vec<NdArray> = params.values().iter().map(|p| NdArray::zeros(p.shape())).collect();
        OptimizerState { m: zeros.clone(), v: zeros, step: 0, beta1: 0.9, beta2: 0.98, eps: 1e-9, base_lr, warmup }
    }

    pub fn from_config(params: &ParamSet, cfg: &TrainConfig) -> Self {
        Self::with_schedule(params, cfg.base_lr, cfg.warmup)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Inverse-sqrt schedule with linear warmup; t counts from 1.
    pub fn lr(&self, t: u64) -> f64 {
        let t = t as f64;
        let w = self.warmup as f64;
        self.base_lr * (t.powf(-0.5)).min(t * w.powf(-1.5))
    }
}

/// Scales all gradients by clip/norm when the global L2 norm exceeds clip.
fn clip_global_norm(grads: &mut [NdArray], clip: f64) -> f64 {
    let norm = grads.iter().map(|g| g.l2_norm().powi(2)).sum::<f64>().sqrt();
    if norm > clip {
        let s = clip / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= s;
            }
        }
    }
    norm
}

/// One Adam update with bias correction, after global-norm clipping.
pub fn adam_step(
    opt: &mut OptimizerState,
    params: &mut ParamSet,
    mut grads: Vec<NdArray>,
    clip_norm: f64,
) -> Result<(), TrainError> {
    assert_eq!(grads.len(), params.len(), "gradient list must match parameter count");
    for (name, g) in params.names().iter().zip(&grads) {
        if !g.all_finite() {
            return Err(TrainError::NanGradient(name.clone()));
        }
    }
    clip_global_norm(&mut grads, clip_norm);

    opt.step += 1;
    let t = opt.step;
    let lr = opt.lr(t);
    let bc1 = 1.0 - opt.beta1.powi(t as i32);
    let bc2 = 1.0 - opt.beta2.powi(t as i32);
    for (i, p) in params.values_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = opt.m[i].data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = opt.beta1 * *mi + (1.0 - opt.beta1) * gi;
        }
        let v = opt.v[i].data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = opt.beta2 * *vi + (1.0 - opt.beta2) * gi * gi;
        }
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(opt.m[i].data()).zip(opt.v[i].data()) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + opt.eps);
        }
    }
    Ok(())
}

/// Indices of `pairs` stably sorted by target length, packed greedily so
/// each batch stays within the token budget (a single long pair still
/// forms its own batch).
pub(crate) fn pack_by_length(lens: &[usize], budget: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lens.len()).collect();
    order.sort_by_key(|&i| lens[i]);
    let mut batches = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let mut cur_tokens = 0usize;
    for i in order {
        let t = lens[i];
        if !cur.is_empty() && cur_tokens + t > budget {
            batches.push(std::mem::take(&mut cur));
            cur_tokens = 0;
        }
        cur.push(i);
        cur_tokens += t;
    }
    if !cur.is_empty() {
        batches.push(cur);
    }
    batches
}

fn pack_batches(pairs: &[SentencePair], budget: usize) -> Vec<Vec<usize>> {
    let lens: Vec<usize> = pairs.iter().map(|p| p.target.len()).collect();
    pack_by_length(&lens, budget)
}

/// Token-mean negative log-likelihood node over one batch. Returns the
/// loss node and the number of target tokens it averages over.
fn batch_loss_node(
    model: &BasicModel,
    tape: &mut Tape,
    bound: &Bound,
    batch: &[&SentencePair],
    drop: &mut Dropout,
) -> Result<(NodeId, usize), TrainError> {
    let mut total = None;
    let mut tokens = 0usize;
    for pair in batch {
        let lp = model.log_prob_node(tape, bound, &pair.source, &pair.target, drop)?;
        tokens += pair.target.len();
        total = Some(match total {
            None => lp,
            Some(acc) => tape.add(acc, lp)?,
        });
    }
    let total = total.ok_or_else(|| TrainError::Config("empty batch".into()))?;
    let loss = tape.scale(total, -1.0 / tokens as f64)?;
    Ok((loss, tokens))
}

/// One pass over the corpus: length-sorted token-budget batches, one Adam
/// step each. Returns the corpus-mean per-token NLL. Dropout is drawn from
/// `rng` only when the model is in training mode.
pub fn mle_epoch(
    model: &mut BasicModel,
    corpus: &ParallelCorpus,
    cfg: &TrainConfig,
    opt: &mut OptimizerState,
    rng: &mut ChaCha8Rng,
) -> Result<f64, TrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Config("training corpus is empty".into()));
    }
    let batches = pack_batches(&corpus.pairs, cfg.batch_tokens);
    let mut total_nll = 0.0;
    let mut total_tokens = 0usize;
    for (bi, batch) in batches.iter().enumerate() {
        let refs: Vec<&SentencePair> = batch.iter().map(|&i| &corpus.pairs[i]).collect();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let rate = model.arch.dropout;
        let mut drop = if model.is_training() && rate > 0.0 {
            Dropout::On { rate, rng }
        } else {
            Dropout::Off
        };
        let (loss, tokens) = batch_loss_node(model, &mut tape, &bound, &refs, &mut drop)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(TrainError::Diverged { batch: bi });
        }
        let grads = tape.backward(loss)?;
        let gvec: Vec<NdArray> = bound.ids().iter().map(|&id| grads.dense(&tape, id)).collect();
        adam_step(opt, &mut model.params, gvec, cfg.clip_norm)?;
        total_nll += loss_val * tokens as f64;
        total_tokens += tokens;
    }
    Ok(total_nll / total_tokens as f64)
}

/// A saved model: architecture, parameters, optional optimizer moments,
/// and training metadata. File layout: the magic line, a text preamble
/// (arch, direction, vocab sizes, metadata, parameter name/shape table,
/// optimizer header), then every value as little-endian f64 in preamble
/// order (parameters, then first moments, then second moments).
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arch: ArchitectureSpec,
    pub direction: Direction,
    pub source_vocab_size: usize,
    pub target_vocab_size: usize,
    pub epoch: usize,
    pub validation: Option<f64>,
    pub averaged_from: Vec<String>,
    pub params: ParamSet,
    pub optimizer: Option<OptimizerState>,
}

const MAGIC: &str = "RSLCKPT1";

fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}

fn preamble_line<'a>(bytes: &'a [u8], pos: &mut usize, path: &Path) -> Result<&'a str, TrainError> {
    let rest = &bytes[*pos..];
    let end = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| TrainError::Format(format!("{}: unexpected end of preamble", path.display())))?;
    let line = std::str::from_utf8(&rest[..end])
        .map_err(|_| TrainError::Format(format!("{}: preamble is not UTF-8", path.display())))?;
    *pos += end + 1;
    Ok(line)
}

impl Checkpoint {
    pub fn from_model(
        model: &BasicModel,
        opt: Option<&OptimizerState>,
        epoch: usize,
        validation: Option<f64>,
    ) -> Checkpoint {
        Checkpoint {
            arch: model.arch,
            direction: model.direction,
            source_vocab_size: model.source_vocab.size(),
            target_vocab_size: model.target_vocab.size(),
            epoch,
            validation,
            averaged_from: Vec::new(),
            params: model.params.clone(),
            optimizer: opt.cloned(),
        }
    }

    /// Rebuilds a model, validating vocabulary sizes against the metadata.
    pub fn into_model(self, id: usize, src: &Vocabulary, tgt: &Vocabulary) -> Result<BasicModel, TrainError> {
        if src.size() != self.source_vocab_size || tgt.size() != self.target_vocab_size {
            return Err(TrainError::Format(format!(
                "vocabulary sizes {}/{} do not match checkpoint {}/{}",
                src.size(),
                tgt.size(),
                self.source_vocab_size,
                self.target_vocab_size
            )));
        }
        Ok(BasicModel::from_parts(id, self.arch, self.direction, self.params, src.clone(), tgt.clone())?)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let mut text = String::new();
        text.push_str(MAGIC);
        text.push('\n');
        let a = &self.arch;
        let kind = match a.kind {
            ArchKind::Attention => "attention",
            ArchKind::Recurrent => "recurrent",
            ArchKind::Convolutional => "convolutional",
        };
        text.push_str(&format!(
            "arch {kind} {} {} {} {} {} {}\n",
            a.d_model,
            a.layers,
            a.heads,
            a.kernel_width,
            a.ffn_width,
            fmt_f64(a.dropout)
        ));
        let dir = match self.direction {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        };
        text.push_str(&format!("direction {dir}\n"));
        text.push_str(&format!("vocab {} {}\n", self.source_vocab_size, self.target_vocab_size));
        text.push_str(&format!("epoch {}\n", self.epoch));
        match self.validation {
            Some(v) => text.push_str(&format!("validation {}\n", fmt_f64(v))),
            None => text.push_str("validation none\n"),
        }
        text.push_str(&format!("averaged_from {}\n", self.averaged_from.len()));
        for s in &self.averaged_from {
            text.push_str(s);
            text.push('\n');
        }
        text.push_str(&format!("params {}\n", self.params.len()));
        for (name, value) in self.params.iter() {
            text.push_str(name);
            for d in value.shape() {
                text.push_str(&format!(" {d}"));
            }
            text.push('\n');
        }
        match &self.optimizer {
            Some(o) => text.push_str(&format!(
                "optimizer adam {} {} {} {} {} {}\n",
                o.step,
                fmt_f64(o.beta1),
                fmt_f64(o.beta2),
                fmt_f64(o.eps),
                fmt_f64(o.base_lr),
                o.warmup
            )),
            None => text.push_str("optimizer none\n"),
        }
        let copies = if self.optimizer.is_some() { 3 } else { 1 };
        let count = self.params.total_elems() * copies;
        text.push_str(&format!("blob {count}\n"));

        let mut bytes = text.into_bytes();
        bytes.reserve(count * 8);
        let mut push = |arrays: &[NdArray]| {
            for a in arrays {
                for &x in a.data() {
                    bytes.extend_from_slice(&x.to_le_bytes());
                }
            }
        };
        push(self.params.values());
        if let Some(o) = &self.optimizer {
            push(&o.m);
            push(&o.v);
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, TrainError> {
        let bytes = fs::read(path)?;
        let bad = |msg: String| TrainError::Format(format!("{}: {msg}", path.display()));
        let mut pos = 0usize;

        if preamble_line(&bytes, &mut pos, path)? != MAGIC {
            return Err(bad(format!("missing {MAGIC} magic header")));
        }

        let parse_f64 = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad float {s:?}")));
        let parse_usize = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad integer {s:?}")));

        let arch_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let t: Vec<&str> = arch_line.split(' ').collect();
        if t.len() != 8 || t[0] != "arch" {
            return Err(bad(format!("malformed arch line {arch_line:?}")));
        }
        let kind = match t[1] {
            "attention" => ArchKind::Attention,
            "recurrent" => ArchKind::Recurrent,
            "convolutional" => ArchKind::Convolutional,
            other => return Err(bad(format!("unknown architecture {other:?}"))),
        };
        let arch = ArchitectureSpec {
            kind,
            d_model: parse_usize(t[2])?,
            layers: parse_usize(t[3])?,
            heads: parse_usize(t[4])?,
            kernel_width: parse_usize(t[5])?,
            ffn_width: parse_usize(t[6])?,
            dropout: parse_f64(t[7])?,
        };

        let dir_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let direction = match dir_line.as_str() {
            "direction l2r" => Direction::L2R,
            "direction r2l" => Direction::R2L,
            other => return Err(bad(format!("malformed direction line {other:?}"))),
        };

        let vocab_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let t: Vec<&str> = vocab_line.split(' ').collect();
        if t.len() != 3 || t[0] != "vocab" {
            return Err(bad(format!("malformed vocab line {vocab_line:?}")));
        }
        let source_vocab_size = parse_usize(t[1])?;
        let target_vocab_size = parse_usize(t[2])?;

        let epoch_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let epoch = epoch_line
            .strip_prefix("epoch ")
            .ok_or_else(|| bad(format!("malformed epoch line {epoch_line:?}")))
            .and_then(parse_usize)?;

        let val_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let validation = match val_line.strip_prefix("validation ") {
            Some("none") => None,
            Some(v) => Some(parse_f64(v)?),
            None => return Err(bad(format!("malformed validation line {val_line:?}"))),
        };

        let avg_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let avg_count = avg_line
            .strip_prefix("averaged_from ")
            .ok_or_else(|| bad(format!("malformed averaged_from line {avg_line:?}")))
            .and_then(parse_usize)?;
        let mut averaged_from = Vec::with_capacity(avg_count);
        for _ in 0..avg_count {
            averaged_from.push(preamble_line(&bytes, &mut pos, path)?.to_string());
        }

        let params_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let param_count = params_line
            .strip_prefix("params ")
            .ok_or_else(|| bad(format!("malformed params line {params_line:?}")))
            .and_then(parse_usize)?;
        let mut table: Vec<(String, Vec<usize>)> = Vec::with_capacity(param_count);
        for _ in 0..param_count {
            let line = preamble_line(&bytes, &mut pos, path)?.to_string();
            let mut it = line.split(' ');
            let name = it.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("empty parameter row".into()))?;
            let shape: Vec<usize> = it.map(parse_usize).collect::<Result<_, _>>()?;
            if shape.is_empty() {
                return Err(bad(format!("parameter {name} has no shape")));
            }
            table.push((name.to_string(), shape));
        }

        let opt_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let opt_header = if opt_line == "optimizer none" {
            None
        } else {
            let t: Vec<&str> = opt_line.split(' ').collect();
            if t.len() != 8 || t[0] != "optimizer" || t[1] != "adam" {
                return Err(bad(format!("malformed optimizer line {opt_line:?}")));
            }
            Some((
                t[2].parse::<u64>().map_err(|_| bad(format!("bad step {:?}", t[2])))?,
                parse_f64(t[3])?,
                parse_f64(t[4])?,
                parse_f64(t[5])?,
                parse_f64(t[6])?,
                t[7].parse::<u64>().map_err(|_| bad(format!("bad warmup {:?}", t[7])))?,
            ))
        };

        let blob_line = preamble_line(&bytes, &mut pos, path)?.to_string();
        let blob_count = blob_line
            .strip_prefix("blob ")
            .ok_or_else(|| bad(format!("malformed blob line {blob_line:?}")))
            .and_then(parse_usize)?;
        let elems: usize = table.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        let copies = if opt_header.is_some() { 3 } else { 1 };
        if blob_count != elems * copies {
            return Err(bad(format!("blob count {blob_count} does not match parameter table ({})", elems * copies)));
        }
        if bytes.len() - pos != blob_count * 8 {
            return Err(bad(format!("blob holds {} bytes, expected {}", bytes.len() - pos, blob_count * 8)));
        }

        let read_set = |pos: &mut usize| -> Vec<NdArray> {
            table
                .iter()
                .map(|(_, shape)| {
                    let n: usize = shape.iter().product();
                    let data: Vec<f64> = (0..n)
                        .map(|i| {
                            let at = *pos + i * 8;
                            f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap())
                        })
                        .collect();
                    *pos += n * 8;
                    NdArray::from_vec(shape, data)
                })
                .collect()
        };
        let values = read_set(&mut pos);
        let mut params = ParamSet::new();
        for ((name, _), value) in table.iter().zip(values) {
            params.insert(name, value);
        }
        let optimizer = opt_header.map(|(step, beta1, beta2, eps, base_lr, warmup)| {
            let m = read_set(&mut pos);
            let v = read_set(&mut pos);
            OptimizerState { m, v, step, beta1, beta2, eps, base_lr, warmup }
        });

        Ok(Checkpoint {
            arch,
            direction,
            source_vocab_size,
            target_vocab_size,
            epoch,
            validation,
            averaged_from,
            params,
            optimizer,
        })
    }
}

/// Parameter-wise mean of the checkpoints at `paths`. Optimizer state is
/// discarded; metadata records the source list. All inputs must agree on
/// architecture, direction, vocabulary sizes, and parameter table.
pub fn average_checkpoints(paths: &[PathBuf]) -> Result<Checkpoint, TrainError> {
    if paths.is_empty() {
        return Err(TrainError::Config("no checkpoints to average".into()));
    }
    let first = Checkpoint::load(&paths[0])?;
    let mut sums: Vec<NdArray> = first.params.values().to_vec();
    let mut epoch = first.epoch;
    for path in paths.iter().skip(1) {
        let ck = Checkpoint::load(path)?;
        let field_mismatch = |field: &str, a: String, b: String| {
            TrainError::Format(format!(
                "checkpoints disagree on {field}: {a} ({}) vs {b} ({})",
                paths[0].display(),
                path.display()
            ))
        };
        let a = &first.arch;
        let b = &ck.arch;
        if a.kind != b.kind {
            return Err(field_mismatch("kind", format!("{:?}", a.kind), format!("{:?}", b.kind)));
        }
        if a.d_model != b.d_model {
            return Err(field_mismatch("d_model", a.d_model.to_string(), b.d_model.to_string()));
        }
        if a.layers != b.layers {
            return Err(field_mismatch("layers", a.layers.to_string(), b.layers.to_string()));
        }
        if a.heads != b.heads {
            return Err(field_mismatch("heads", a.heads.to_string(), b.heads.to_string()));
        }
        if a.kernel_width != b.kernel_width {
            return Err(field_mismatch("kernel_width", a.kernel_width.to_string(), b.kernel_width.to_string()));
        }
        if a.ffn_width != b.ffn_width {
            return Err(field_mismatch("ffn_width", a.ffn_width.to_string(), b.ffn_width.to_string()));
        }
        if first.direction != ck.direction {
            return Err(field_mismatch("direction", format!("{:?}", first.direction), format!("{:?}", ck.direction)));
        }
        if first.source_vocab_size != ck.source_vocab_size {
            return Err(field_mismatch(
                "source_vocab_size",
                first.source_vocab_size.to_string(),
                ck.source_vocab_size.to_string(),
            ));
        }
        if first.target_vocab_size != ck.target_vocab_size {
            return Err(field_mismatch(
                "target_vocab_size",
                first.target_vocab_size.to_string(),
                ck.target_vocab_size.to_string(),
            ));
        }
        if first.params.names() != ck.params.names() {
            return Err(field_mismatch(
                "parameter table",
                format!("{} entries", first.params.len()),
                format!("{} entries", ck.params.len()),
            ));
        }
        for ((name, a), b) in first.params.iter().zip(ck.params.values()) {
            if a.shape() != b.shape() {
                return Err(field_mismatch(
                    &format!("shape of {name}"),
                    format!("{:?}", a.shape()),
                    format!("{:?}", b.shape()),
                ));
            }
        }
        for (s, v) in sums.iter_mut().zip(ck.params.values()) {
            s.add_assign(v);
        }
        epoch = epoch.max(ck.epoch);
    }
    let inv = 1.0 / paths.len() as f64;
    for s in sums.iter_mut() {
        for x in s.data_mut() {
            *x *= inv;
        }
    }
    let mut params = ParamSet::new();
    for (name, value) in first.params.names().iter().zip(sums) {
        params.insert(name, value);
    }
    Ok(Checkpoint {
        arch: first.arch,
        direction: first.direction,
        source_vocab_size: first.source_vocab_size,
        target_vocab_size: first.target_vocab_size,
        epoch,
        validation: None,
        averaged_from: paths.iter().map(|p| p.display().to_string()).collect(),
        params,
        optimizer: None,
    })
}
