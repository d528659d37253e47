//! The basic seq2seq models: three architectures, each usable in two
//! decoding factorizations (left-to-right and right-to-left).
//!
//! Direction handling: an R2L model is an ordinary model that internally
//! sees target content reversed. `log_prob` reverses the target before
//! scoring, `sample` un-reverses before returning, and the source is
//! never touched. Everything below the public API works in internal
//! order.
//!
//! Incremental decoding recomputes the decoder over the whole prefix at
//! each step. Causal structure makes that recomputation bit-identical to
//! the matching teacher-forced rows: masked attention scores underflow to
//! exact zero probabilities and contribute exact zeros to row sums.

use crate::autodiff::{AdError, NodeId, Tape};
use crate::corpus::{TokenSeq, Vocabulary, BOS, EOS, PAD};
use crate::nd::NdArray;
use crate::rng::stream;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("architecture: {0}")]
    Arch(String),
    #[error("input: {0}")]
    Input(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

/// Additive logit mask: large enough that exp underflows to exact zero
/// after max-subtraction, small enough to stay finite.
pub const LOGIT_MASK: f64 = -1e9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ArchKind {
    Attention,
    Recurrent,
    Convolutional,
}

impl fmt::Display for ArchKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ArchKind::Attention => "attention",
            ArchKind::Recurrent => "recurrent",
            ArchKind::Convolutional => "convolutional",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub kind: ArchKind,
    pub d_model: usize,
    pub layers: usize,
    /// Attention only.
    pub heads: usize,
    /// Convolutional only; odd, applied causally in the decoder.
    pub kernel_width: usize,
    pub ffn_width: usize,
    pub dropout: f64,
}

impl ArchitectureSpec {
    pub fn attention() -> Self {
        ArchitectureSpec { kind: ArchKind::Attention, d_model: 32, layers: 2, heads: 2, kernel_width: 3, ffn_width: 64, dropout: 0.1 }
    }

    pub fn recurrent() -> Self {
        ArchitectureSpec { kind: ArchKind::Recurrent, d_model: 32, layers: 1, heads: 1, kernel_width: 3, ffn_width: 64, dropout: 0.1 }
    }

    pub fn convolutional() -> Self {
        ArchitectureSpec { kind: ArchKind::Convolutional, d_model: 32, layers: 2, heads: 1, kernel_width: 3, ffn_width: 64, dropout: 0.1 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model < 2 || !self.d_model.is_multiple_of(2) {
            return Err(ModelError::Arch(format!("d_model must be even and at least 2, got {}", self.d_model)));
        }
        if self.layers == 0 {
            return Err(ModelError::Arch("layer count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Arch(format!("dropout must be in [0,1), got {}", self.dropout)));
        }
        match self.kind {
            ArchKind::Attention => {
                if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
                    return Err(ModelError::Arch(format!(
                        "head count {} must divide d_model {}",
                        self.heads, self.d_model
                    )));
                }
                if self.ffn_width == 0 {
                    return Err(ModelError::Arch("ffn_width must be positive".into()));
                }
            }
            ArchKind::Recurrent => {
                if self.layers != 1 {
                    return Err(ModelError::Arch("the recurrent model supports exactly one layer".into()));
                }
            }
            ArchKind::Convolutional => {
                if self.kernel_width.is_multiple_of(2) || self.kernel_width == 0 {
                    return Err(ModelError::Arch(format!("kernel_width must be odd, got {}", self.kernel_width)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    L2R,
    R2L,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::L2R => "l2r",
            Direction::R2L => "r2l",
        })
    }
}

/// Ordered, named parameter tensors. Construction order is the order in
/// checkpoints and in flattened gradient vectors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<NdArray>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn insert(&mut self, name: &str, value: NdArray) {
        assert!(
            self.index.insert(name.to_string(), self.values.len()).is_none(),
            "duplicate parameter {name}"
        );
        self.names.push(name.to_string());
        self.values.push(value);
    }

    pub fn index_of(&self, name: &str) -> usize {
        *self.index.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get(&self, name: &str) -> &NdArray {
        &self.values[self.index_of(name)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn total_elems(&self) -> usize {
        self.values.iter().map(NdArray::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[NdArray] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [NdArray] {
        &mut self.values
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }
}

/// Parameter leaves registered on a tape, aligned with [`ParamSet`] order.
pub struct Bound {
    ids: Vec<NodeId>,
}

impl Bound {
    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    /// Wraps externally created leaves (e.g. for gradient checking);
    /// callers must match [`ParamSet`] order.
    pub fn from_ids(ids: Vec<NodeId>) -> Bound {
        Bound { ids }
    }
}

/// Dropout behavior for one forward pass. Training mode draws an inverted
/// Bernoulli mask per call site; evaluation is a no-op.
pub enum Dropout<'r> {
    Off,
    On { rate: f64, rng: &'r mut ChaCha8Rng },
}

impl Dropout<'_> {
    pub fn apply(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId, AdError> {
        match self {
            Dropout::Off => Ok(x),
            Dropout::On { rate, .. } if *rate == 0.0 => Ok(x),
            Dropout::On { rate, rng } => {
                let shape = tape.value(x).shape().to_vec();
                let keep = 1.0 - *rate;
                let inv = 1.0 / keep;
                let n: usize = tape.value(x).numel();
                let data: Vec<f64> = (0..n).map(|_| if rng.gen_bool(keep) { inv } else { 0.0 }).collect();
                let mask = tape.leaf(NdArray::from_vec(&shape, data));
                tape.mul(x, mask)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct BasicModel {
    pub id: usize,
    pub arch: ArchitectureSpec,
    pub direction: Direction,
    pub params: ParamSet,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
    training: bool,
}

/// Incremental decoding state. Holds the cached encoder memory and the
/// tokens emitted so far (internal order, terminal eos not included).
#[derive(Debug, Clone)]
pub struct StepState {
    model_id: usize,
    memory: Arc<NdArray>,
    emitted: Vec<u32>,
    done: bool,
}

impl StepState {
    pub fn emitted(&self) -> &[u32] {
        &self.emitted
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn model_id(&self) -> usize {
        self.model_id
    }

    /// Records a chosen token. Emitting eos finishes the state.
    pub fn advance(mut self, token: u32) -> StepState {
        if token == EOS {
            self.done = true;
        } else {
            self.emitted.push(token);
        }
        self
    }
}

fn positional_encoding(len: usize, d: usize) -> NdArray {
    let mut data = Vec::with_capacity(len * d);
    for t in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    NdArray::from_vec(&[len, d], data)
}

/// [t, t] additive mask: 0 at or below the diagonal, LOGIT_MASK above.
fn causal_mask(t: usize) -> NdArray {
    let mut data = vec![0.0; t * t];
    for i in 0..t {
        for j in (i + 1)..t {
            data[i * t + j] = LOGIT_MASK;
        }
    }
    NdArray::from_vec(&[t, t], data)
}

/// Output logit mask: pad and bos can never be emitted.
fn output_mask(vocab: usize) -> NdArray {
    let mut data = vec![0.0; vocab];
    data[PAD as usize] = LOGIT_MASK;
    data[BOS as usize] = LOGIT_MASK;
    NdArray::from_vec(&[vocab], data)
}

fn box_muller(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Creates a model with parameters drawn deterministically from `seed`:
/// matrices uniform(-s, s) with s = sqrt(6/(fan_in+fan_out)), embeddings
/// normal(0, d_model^,-1/2), biases zero.
pub fn init_model(
    arch: ArchitectureSpec,
    direction: Direction,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
    id: usize,
    seed: u64,
) -> Result<BasicModel, ModelError> {
    arch.validate()?;
    let d = arch.d_model;
    let mut rng = stream(seed, "init", id as u64);
    let mut params = ParamSet::new();

    let embed = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, v: usize| {
        let sd = (d as f64).powf(-0.5);
        let data: Vec<f64> = (0..v * d).map(|_| box_muller(rng) * sd).collect();
        p.insert(name, NdArray::from_vec(&[v, d], data));
    };
    let matrix = |p: &mut ParamSet, rng: &mut ChaCha8Rng, name: &str, a: usize, b: usize| {
        let s = (6.0 / (a + b) as f64).sqrt();
        let data: Vec<f64> = (0..a * b).map(|_| rng.gen_range(-s..=s)).collect();
        p.insert(name, NdArray::from_vec(&[a, b], data));
    };
    let bias = |p: &mut ParamSet, name: &str, n: usize| {
        p.insert(name, NdArray::zeros(&[n]));
    };

    embed(&mut params, &mut rng, "src_embed", source_vocab.size());
    embed(&mut params, &mut rng, "tgt_embed", target_vocab.size());

    match arch.kind {
        ArchKind::Attention => {
            let f = arch.ffn_width;
            for l in 0..arch.layers {
                for proj in ["wq", "wk", "wv", "wo"] {
                    matrix(&mut params, &mut rng, &format!("enc{l}.attn.{proj}"), d, d);
                }
                matrix(&mut params, &mut rng, &format!("enc{l}.ffn.w1"), d, f);
                bias(&mut params, &format!("enc{l}.ffn.b1"), f);
                matrix(&mut params, &mut rng, &format!("enc{l}.ffn.w2"), f, d);
                bias(&mut params, &format!("enc{l}.ffn.b2"), d);
            }
            for l in 0..arch.layers {
                for proj in ["wq", "wk", "wv", "wo"] {
                    matrix(&mut params, &mut rng, &format!("dec{l}.self.{proj}"), d, d);
                }
                for proj in ["wq", "wk", "wv", "wo"] {
                    matrix(&mut params, &mut rng, &format!("dec{l}.cross.{proj}"), d, d);
                }
                matrix(&mut params, &mut rng, &format!("dec{l}.ffn.w1"), d, f);
                bias(&mut params, &format!("dec{l}.ffn.b1"), f);
                matrix(&mut params, &mut rng, &format!("dec{l}.ffn.w2"), f, d);
                bias(&mut params, &format!("dec{l}.ffn.b2"), d);
            }
        }
        ArchKind::Recurrent => {
            for side in ["enc", "dec"] {
                matrix(&mut params, &mut rng, &format!("{side}.gru.wi"), d, 3 * d);
                bias(&mut params, &format!("{side}.gru.bi"), 3 * d);
                matrix(&mut params, &mut rng, &format!("{side}.gru.wh"), d, 3 * d);
                bias(&mut params, &format!("{side}.gru.bh"), 3 * d);
            }
            matrix(&mut params, &mut rng, "dec.combine.w", 2 * d, d);
            bias(&mut params, "dec.combine.b", d);
        }
        ArchKind::Convolutional => {
            let k = arch.kernel_width;
            for side in ["enc", "dec"] {
                for l in 0..arch.layers {
                    matrix(&mut params, &mut rng, &format!("{side}{l}.conv.w"), k * d, 2 * d);
                    bias(&mut params, &format!("{side}{l}.conv.b"), 2 * d);
                }
            }
        }
    }

    matrix(&mut params, &mut rng, "out_w", d, target_vocab.size());
    bias(&mut params, "out_b", target_vocab.size());

    Ok(BasicModel {
        id,
        arch,
        direction,
        params,
        source_vocab: source_vocab.clone(),
        target_vocab: target_vocab.clone(),
        training: false,
    })
}

impl BasicModel {
    /// Rebuilds a model around explicit parts (checkpoint load path).
    pub fn from_parts(
        id: usize,
        arch: ArchitectureSpec,
        direction: Direction,
        params: ParamSet,
        source_vocab: Vocabulary,
        target_vocab: Vocabulary,
    ) -> Result<BasicModel, ModelError> {
        arch.validate()?;
        let reference = init_model(arch, direction, &source_vocab, &target_vocab, id, 0)?;
        if reference.params.names() != params.names() {
            return Err(ModelError::Arch("parameter names do not match the architecture".into()));
        }
        for (name, v) in params.iter() {
            if reference.params.get(name).shape() != v.shape() {
                return Err(ModelError::Arch(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    v.shape(),
                    reference.params.get(name).shape()
                )));
            }
        }
        Ok(BasicModel { id, arch, direction, params, source_vocab, target_vocab, training: false })
    }

    pub fn dropout_mode(&mut self, training: bool) {
        self.training = training;
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Registers every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound { ids: self.params.values().iter().map(|v| tape.leaf(v.clone())).collect() }
    }

    fn p(&self, bound: &Bound, name: &str) -> NodeId {
        bound.ids[self.params.index_of(name)]
    }

    /// Target in the model's internal decode order.
    pub fn internal_target(&self, y: &TokenSeq) -> TokenSeq {
        match self.direction {
            Direction::L2R => y.clone(),
            Direction::R2L => y.reversed(),
        }
    }

    /// Internal-order sample back to external order.
    pub fn external_target(&self, y_internal: &TokenSeq) -> TokenSeq {
        match self.direction {
            Direction::L2R => y_internal.clone(),
            Direction::R2L => y_internal.reversed(),
        }
    }

    fn check_seq(&self, ids: &[u32], vocab: &Vocabulary, what: &str) -> Result<(), ModelError> {
        for &id in ids {
            if id as usize >= vocab.size() {
                return Err(ModelError::Input(format!("{what} id {} outside vocabulary of size {}", id, vocab.size())));
            }
        }
        Ok(())
    }

    // -- shared forward pieces -------------------------------------------

    #[allow(clippy::too_many_arguments)]
    fn embed_with_positions(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        table: &str,
        ids: &[u32],
        scale_sqrt_d: bool,
        positions: bool,
        drop: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let table = self.p(bound, table);
        let mut x = tape.embedding_gather(table, &idx)?;
        if scale_sqrt_d {
            x = tape.scale(x, (self.arch.d_model as f64).sqrt())?;
        }
        if positions {
            let pe = tape.leaf(positional_encoding(ids.len(), self.arch.d_model));
            x = tape.add(x, pe)?;
        }
        Ok(drop.apply(tape, x)?)
    }

    /// Multi-head attention. `q_in` is [T,d]; `kv_in` is [S,d]. A causal
    /// mask is added when requested (requires T == S).
    fn multihead(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        prefix: &str,
        q_in: NodeId,
        kv_in: NodeId,
        causal: bool,
    ) -> Result<NodeId, ModelError> {
        let d = self.arch.d_model;
        let heads = self.arch.heads;
        let dh = d / heads;
        let q = {
            let w = self.p(bound, &format!("{prefix}.wq"));
            tape.matmul(q_in, w)?
        };
        let k = {
            let w = self.p(bound, &format!("{prefix}.wk"));
            tape.matmul(kv_in, w)?
        };
        let v = {
            let w = self.p(bound, &format!("{prefix}.wv"));
            tape.matmul(kv_in, w)?
        };
        let t_len = tape.value(q).shape()[0];
        let mask = if causal { Some(tape.leaf(causal_mask(t_len))) } else { None };
        let mut ctxs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice(q, 1, h * dh, (h + 1) * dh)?;
            let kh = tape.slice(k, 1, h * dh, (h + 1) * dh)?;
            let vh = tape.slice(v, 1, h * dh, (h + 1) * dh)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let weights = tape.softmax(scores)?;
            ctxs.push(tape.matmul(weights, vh)?);
        }
        let ctx = if ctxs.len() == 1 { ctxs[0] } else { tape.concat(&ctxs, 1)? };
        let wo = self.p(bound, &format!("{prefix}.wo"));
        Ok(tape.matmul(ctx, wo)?)
    }

    fn ffn(&self, tape: &mut Tape, bound: &Bound, prefix: &str, x: NodeId) -> Result<NodeId, ModelError> {
        let w1 = self.p(bound, &format!("{prefix}.w1"));
        let b1 = self.p(bound, &format!("{prefix}.b1"));
        let w2 = self.p(bound, &format!("{prefix}.w2"));
        let b2 = self.p(bound, &format!("{prefix}.b2"));
        let h = tape.matmul(x, w1)?;
        let h = tape.add(h, b1)?;
        let h = tape.relu(h)?;
        let h = tape.matmul(h, w2)?;
        Ok(tape.add(h, b2)?)
    }

    /// One GRU pass over `inputs` rows; returns all hidden states [T,d].
    fn gru(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        side: &str,
        inputs: NodeId,
        h0: NodeId,
    ) -> Result<NodeId, ModelError> {
        let d = self.arch.d_model;
        let t_len = tape.value(inputs).shape()[0];
        let wi = self.p(bound, &format!("{side}.gru.wi"));
        let bi = self.p(bound, &format!("{side}.gru.bi"));
        let wh = self.p(bound, &format!("{side}.gru.wh"));
        let bh = self.p(bound, &format!("{side}.gru.bh"));
        let xg = tape.matmul(inputs, wi)?;
        let xg = tape.add(xg, bi)?;
        let mut h = h0;
        let mut rows = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let xt = tape.slice(xg, 0, t, t + 1)?;
            let xr = tape.slice(xt, 1, 0, d)?;
            let xz = tape.slice(xt, 1, d, 2 * d)?;
            let xn = tape.slice(xt, 1, 2 * d, 3 * d)?;
            let hg = tape.matmul(h, wh)?;
            let hg = tape.add(hg, bh)?;
            let hr = tape.slice(hg, 1, 0, d)?;
            let hz = tape.slice(hg, 1, d, 2 * d)?;
            let hn = tape.slice(hg, 1, 2 * d, 3 * d)?;
            let r = {
                let s = tape.add(xr, hr)?;
                tape.sigmoid(s)?
            };
            let z = {
                let s = tape.add(xz, hz)?;
                tape.sigmoid(s)?
            };
            let n = {
                let gated = tape.mul(r, hn)?;
                let s = tape.add(xn, gated)?;
                tape.tanh(s)?
            };
            // h = n - z*n + z*h_prev
            let zn = tape.mul(z, n)?;
            let zh = tape.mul(z, h)?;
            let nzn = tape.neg(zn)?;
            let part = tape.add(n, nzn)?;
            h = tape.add(part, zh)?;
            rows.push(h);
        }
        Ok(if rows.len() == 1 { rows[0] } else { tape.concat(&rows, 0)? })
    }

    /// Rows of `x` shifted by `offset` along time (vacated rows zero):
    /// row t of the result is row t+offset of `x`.
    fn shifted(&self, tape: &mut Tape, x: NodeId, offset: isize) -> Result<NodeId, ModelError> {
        if offset == 0 {
            return Ok(x);
        }
        let shape = tape.value(x).shape().to_vec();
        let (t_len, d) = (shape[0], shape[1]);
        let n = offset.unsigned_abs();
        if n >= t_len {
            return Ok(tape.leaf(NdArray::zeros(&[t_len, d])));
        }
        let zeros = tape.leaf(NdArray::zeros(&[n, d]));
        if offset < 0 {
            let head = tape.slice(x, 0, 0, t_len - n)?;
            Ok(tape.concat(&[zeros, head], 0)?)
        } else {
            let tail = tape.slice(x, 0, n, t_len)?;
            Ok(tape.concat(&[tail, zeros], 0)?)
        }
    }

    /// One GLU convolution block: gather the kernel window as concatenated
    /// shifted copies, project to 2d, gate, residual, scale by sqrt(0.5).
    fn conv_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        name: &str,
        x: NodeId,
        causal: bool,
        drop: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        let k = self.arch.kernel_width as isize;
        let offsets: Vec<isize> = if causal {
            (1 - k..=0).collect()
        } else {
            (-(k / 2)..=k / 2).collect()
        };
        let mut cols = Vec::with_capacity(offsets.len());
        for off in offsets {
            cols.push(self.shifted(tape, x, off)?);
        }
        let window = tape.concat(&cols, 1)?;
        let w = self.p(bound, &format!("{name}.w"));
        let b = self.p(bound, &format!("{name}.b"));
        let proj = tape.matmul(window, w)?;
        let proj = tape.add(proj, b)?;
        let g = tape.glu(proj)?;
        let g = drop.apply(tape, g)?;
        let s = tape.add(x, g)?;
        Ok(tape.scale(s, 0.5f64.sqrt())?)
    }

    /// Encoder memory [S, d] for internal source ids.
    pub fn encode_node(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        src: &[u32],
        drop: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        if src.is_empty() {
            return Err(ModelError::Input("empty source".into()));
        }
        self.check_seq(src, &self.source_vocab, "source")?;
        match self.arch.kind {
            ArchKind::Attention => {
                let mut h = self.embed_with_positions(tape, bound, "src_embed", src, true, true, drop)?;
                for l in 0..self.arch.layers {
                    let normed = tape.layer_norm(h, 1e-5)?;
                    let a = self.multihead(tape, bound, &format!("enc{l}.attn"), normed, normed, false)?;
                    let a = drop.apply(tape, a)?;
                    h = tape.add(h, a)?;
                    let normed = tape.layer_norm(h, 1e-5)?;
                    let f = self.ffn(tape, bound, &format!("enc{l}.ffn"), normed)?;
                    let f = drop.apply(tape, f)?;
                    h = tape.add(h, f)?;
                }
                Ok(tape.layer_norm(h, 1e-5)?)
            }
            ArchKind::Recurrent => {
                let x = self.embed_with_positions(tape, bound, "src_embed", src, false, false, drop)?;
                let h0 = tape.leaf(NdArray::zeros(&[1, self.arch.d_model]));
                self.gru(tape, bound, "enc", x, h0)
            }
            ArchKind::Convolutional => {
                let mut h = self.embed_with_positions(tape, bound, "src_embed", src, false, true, drop)?;
                for l in 0..self.arch.layers {
                    h = self.conv_block(tape, bound, &format!("enc{l}.conv"), h, false, drop)?;
                }
                Ok(h)
            }
        }
    }

    /// Teacher-forced next-token log-distributions, one row per position:
    /// row t = log P(. | decoder inputs 0..=t, memory). Pad and bos are
    /// masked out before log_softmax. `tgt_in` starts with bos.
    pub fn decode_rows_node(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        memory: NodeId,
        tgt_in: &[u32],
        drop: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        if tgt_in.is_empty() {
            return Err(ModelError::Input("empty decoder input".into()));
        }
        self.check_seq(tgt_in, &self.target_vocab, "target")?;
        let h = match self.arch.kind {
            ArchKind::Attention => {
                let mut h = self.embed_with_positions(tape, bound, "tgt_embed", tgt_in, true, true, drop)?;
                for l in 0..self.arch.layers {
                    let normed = tape.layer_norm(h, 1e-5)?;
                    let a = self.multihead(tape, bound, &format!("dec{l}.self"), normed, normed, true)?;
                    let a = drop.apply(tape, a)?;
                    h = tape.add(h, a)?;
                    let normed = tape.layer_norm(h, 1e-5)?;
                    let c = self.multihead(tape, bound, &format!("dec{l}.cross"), normed, memory, false)?;
                    let c = drop.apply(tape, c)?;
                    h = tape.add(h, c)?;
                    let normed = tape.layer_norm(h, 1e-5)?;
                    let f = self.ffn(tape, bound, &format!("dec{l}.ffn"), normed)?;
                    let f = drop.apply(tape, f)?;
                    h = tape.add(h, f)?;
                }
                tape.layer_norm(h, 1e-5)?
            }
            ArchKind::Recurrent => {
                let d = self.arch.d_model;
                let x = self.embed_with_positions(tape, bound, "tgt_embed", tgt_in, false, false, drop)?;
                let s_len = tape.value(memory).shape()[0];
                let h0 = tape.slice(memory, 0, s_len - 1, s_len)?;
                let hs = self.gru(tape, bound, "dec", x, h0)?;
                let mem_t = tape.transpose(memory)?;
                let scores = tape.matmul(hs, mem_t)?;
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
                let weights = tape.softmax(scores)?;
                let ctx = tape.matmul(weights, memory)?;
                let both = tape.concat(&[hs, ctx], 1)?;
                let w = self.p(bound, "dec.combine.w");
                let b = self.p(bound, "dec.combine.b");
                let comb = tape.matmul(both, w)?;
                let comb = tape.add(comb, b)?;
                tape.tanh(comb)?
            }
            ArchKind::Convolutional => {
                let d = self.arch.d_model;
                let mut h = self.embed_with_positions(tape, bound, "tgt_embed", tgt_in, false, true, drop)?;
                for l in 0..self.arch.layers {
                    h = self.conv_block(tape, bound, &format!("dec{l}.conv"), h, true, drop)?;
                    let mem_t = tape.transpose(memory)?;
                    let scores = tape.matmul(h, mem_t)?;
                    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
                    let weights = tape.softmax(scores)?;
                    let ctx = tape.matmul(weights, memory)?;
                    let s = tape.add(h, ctx)?;
                    h = tape.scale(s, 0.5f64.sqrt())?;
                }
                h
            }
        };
        let out_w = self.p(bound, "out_w");
        let out_b = self.p(bound, "out_b");
        let logits = tape.matmul(h, out_w)?;
        let logits = tape.add(logits, out_b)?;
        let mask = tape.leaf(output_mask(self.target_vocab.size()));
        let logits = tape.add(logits, mask)?;
        Ok(tape.log_softmax(logits)?)
    }

    /// log P(y_internal | memory) as a scalar node: gold entries of the
    /// teacher-forced rows, picked by a constant one-hot matrix and
    /// summed. `y_internal` must end with eos.
    pub fn log_prob_node_given_memory(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        memory: NodeId,
        y_internal: &[u32],
        drop: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        if y_internal.last() != Some(&EOS) {
            return Err(ModelError::Input("target must end with eos".into()));
        }
        let mut tgt_in = Vec::with_capacity(y_internal.len());
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(&y_internal[..y_internal.len() - 1]);
        let rows = self.decode_rows_node(tape, bound, memory, &tgt_in, drop)?;
        let v = self.target_vocab.size();
        let t_len = y_internal.len();
        let mut pick = vec![0.0; t_len * v];
        for (t, &id) in y_internal.iter().enumerate() {
            pick[t * v + id as usize] = 1.0;
        }
        let pick = tape.leaf(NdArray::from_vec(&[t_len, v], pick));
        let gold = tape.mul(rows, pick)?;
        Ok(tape.sum(gold)?)
    }

    /// log P(y | x) as a scalar node, handling direction internally.
    /// `y` is in external order and must end with eos.
    pub fn log_prob_node(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: &TokenSeq,
        y: &TokenSeq,
        drop: &mut Dropout,
    ) -> Result<NodeId, ModelError> {
        let y_int = self.internal_target(y);
        let memory = self.encode_node(tape, bound, x.ids(), drop)?;
        self.log_prob_node_given_memory(tape, bound, memory, y_int.ids(), drop)
    }

    /// Exact sequence log-probability under teacher forcing, evaluation
    /// mode. Deterministic: identical calls return bit-identical values.
    pub fn log_prob(&self, x: &TokenSeq, y: &TokenSeq) -> Result<f64, ModelError> {
        if !y.ends_with_eos() {
            return Err(ModelError::Input("target must end with eos".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let node = self.log_prob_node(&mut tape, &bound, x, y, &mut Dropout::Off)?;
        Ok(tape.value(node).item())
    }

    /// Prepares incremental decoding for source `x`: runs the encoder once
    /// (evaluation mode) and caches its memory.
    pub fn start_state(&self, x: &TokenSeq) -> Result<StepState, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let memory = self.encode_node(&mut tape, &bound, x.ids(), &mut Dropout::Off)?;
        Ok(StepState {
            model_id: self.id,
            memory: Arc::new(tape.value(memory).clone()),
            emitted: Vec::new(),
            done: false,
        })
    }

    /// Next-token log-distribution for the state's prefix. The state is
    /// returned unchanged; record the chosen token with
    /// [`StepState::advance`].
    pub fn step(&self, state: StepState) -> Result<(Vec<f64>, StepState), ModelError> {
        if state.model_id != self.id {
            return Err(ModelError::Contract(format!(
                "state belongs to model {}, stepped with model {}",
                state.model_id, self.id
            )));
        }
        if state.done {
            return Err(ModelError::Contract("step after eos was emitted".into()));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let memory = tape.leaf((*state.memory).clone());
        let mut tgt_in = Vec::with_capacity(state.emitted.len() + 1);
        tgt_in.push(BOS);
        tgt_in.extend_from_slice(&state.emitted);
        let rows = self.decode_rows_node(&mut tape, &bound, memory, &tgt_in, &mut Dropout::Off)?;
        let v = self.target_vocab.size();
        let t_len = tgt_in.len();
        let last = &tape.value(rows).data()[(t_len - 1) * v..t_len * v];
        Ok((last.to_vec(), state))
    }

    /// Ancestral sampling with temperature. Stops at eos or after
    /// `max_len` content tokens (eos then appended; the flag reports the
    /// truncation). R2L models return the un-reversed sequence.
    pub fn sample(
        &self,
        x: &TokenSeq,
        max_len: usize,
        temperature: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<(TokenSeq, bool), ModelError> {
        if max_len == 0 {
            return Err(ModelError::Input("max_len must be at least 1".into()));
        }
        if temperature <= 0.0 {
            return Err(ModelError::Input("temperature must be positive".into()));
        }
        let mut state = self.start_state(x)?;
        for _ in 0..=max_len {
            if state.emitted.len() == max_len {
                break;
            }
            let (dist, s) = self.step(state)?;
            let token = sample_from_log_dist(&dist, temperature, rng);
            state = s.advance(token as u32);
            if state.done {
                break;
            }
        }
        let truncated = !state.done;
        let mut ids = state.emitted;
        ids.push(EOS);
        let internal = TokenSeq::from_raw(ids);
        Ok((self.external_target(&internal), truncated))
    }
}

/// Draws an index from softmax(log_dist / temperature).
fn sample_from_log_dist(log_dist: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let max = log_dist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_dist.iter().map(|&lp| ((lp - max) / temperature).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        u -= w;
        if u <= 0.0 {
            return i;
        }
    }
    // floating-point slack: fall back to the last positive-weight entry
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(log_dist.len() - 1)
}
