//! Vocabulary, token-sequence, and corpus data model; synthetic
//! translation-task generators; corpus file I/O.
//!
//! File formats: one sentence per line, surface tokens space-separated,
//! UTF-8. Target sentences are stored without their terminal eos; it is
//! re-appended on read, so write-then-read is the identity. Vocabulary
//! files hold one token per line with the line number as the id.

use crate::rng::stream;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    Empty,
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("invalid token sequence: {0}")]
    Sequence(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Surface-token table. Ids 0..=3 are always the reserved tokens, in the
/// order pad, bos, eos, unk.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
    }
}
impl Eq for Vocabulary {}

impl Vocabulary {
    /// Builds a vocabulary from content tokens; reserved tokens are
    /// prepended automatically.
    pub fn from_content<I>(content: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(content);
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::Config(format!("token {t:?} is empty or contains whitespace")));
            }
            if i >= 4 && RESERVED.contains(&t.as_str()) {
                return Err(CorpusError::Config(format!("content token {t:?} collides with a reserved token")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(CorpusError::Config(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id for a surface token; unknown tokens map to unk.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of the non-reserved tokens.
    pub fn content_ids(&self) -> impl Iterator<Item = u32> {
        4..self.size() as u32
    }
}

/// Reserved tokens first, then surface tokens by descending frequency
/// with lexicographic tie-break, truncated at `max_size`.
pub fn build_vocab(lines: &[String], max_size: usize) -> Result<Vocabulary, CorpusError> {
    if max_size < 5 {
        return Err(CorpusError::Config(format!("vocab max_size must be at least 5, got {max_size}")));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for line in lines {
        for tok in line.split_whitespace() {
            *counts.entry(tok).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        return Err(CorpusError::Empty);
    }
    let mut items: Vec<(&str, u64)> = counts.into_iter().collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.truncate(max_size - 4);
    Vocabulary::from_content(items.into_iter().map(|(t, _)| t.to_string()))
}

/// A sequence of token ids. Sources hold content tokens only; targets end
/// with eos, which appears exactly once. Neither contains pad or bos.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn source(ids: Vec<u32>, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        if ids.is_empty() {
            return Err(CorpusError::Sequence("empty source".into()));
        }
        for &id in &ids {
            if id as usize >= vocab.size() {
                return Err(CorpusError::Sequence(format!("id {} out of vocab size {}", id, vocab.size())));
            }
            if id == PAD || id == BOS || id == EOS {
                return Err(CorpusError::Sequence(format!("source contains reserved id {id}")));
            }
        }
        Ok(TokenSeq { ids })
    }

    /// Target from content ids; the terminal eos is appended here.
    pub fn target_from_content(content: Vec<u32>, vocab: &Vocabulary) -> Result<Self, CorpusError> {
        if content.is_empty() {
            return Err(CorpusError::Sequence("empty target".into()));
        }
        for &id in &content {
            if id as usize >= vocab.size() {
                return Err(CorpusError::Sequence(format!("id {} out of vocab size {}", id, vocab.size())));
            }
            if id == PAD || id == BOS || id == EOS {
                return Err(CorpusError::Sequence(format!("target content contains reserved id {id}")));
            }
        }
        let mut ids = content;
        ids.push(EOS);
        Ok(TokenSeq { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ends_with_eos(&self) -> bool {
        self.ids.last() == Some(&EOS)
    }

    /// Ids without the terminal eos (identity for sources).
    pub fn content(&self) -> &[u32] {
        match self.ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.ids,
        }
    }

    /// Content reversed in place, terminal eos (if any) kept last.
    pub fn reversed(&self) -> TokenSeq {
        let mut ids: Vec<u32> = self.content().iter().rev().copied().collect();
        if self.ends_with_eos() {
            ids.push(EOS);
        }
        TokenSeq { ids }
    }

    /// Surface form, excluding the terminal eos.
    pub fn to_line(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (i, &id) in self.content().iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(vocab.token(id));
        }
        out
    }

    /// Target with no content tokens; decoders can emit eos immediately
    /// and evaluation must score such hypotheses.
    pub fn empty_target() -> TokenSeq {
        TokenSeq { ids: vec![EOS] }
    }

    /// Construction bypass for sequences whose shape is established by the
    /// caller (e.g. model samples that already end in eos).
    pub(crate) fn from_raw(ids: Vec<u32>) -> TokenSeq {
        TokenSeq { ids }
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.ids)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub source: TokenSeq,
    pub target: TokenSeq,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub pairs: Vec<SentencePair>,
    pub source_vocab: Vocabulary,
    pub target_vocab: Vocabulary,
}

impl ParallelCorpus {
    pub fn new(pairs: Vec<SentencePair>, source_vocab: Vocabulary, target_vocab: Vocabulary) -> Result<Self, CorpusError> {
        if pairs.is_empty() {
            return Err(CorpusError::Empty);
        }
        for p in &pairs {
            if p.source.ids().iter().any(|&id| id as usize >= source_vocab.size())
                || p.target.ids().iter().any(|&id| id as usize >= target_vocab.size())
            {
                return Err(CorpusError::Sequence("pair references id outside vocabulary".into()));
            }
            if !p.target.ends_with_eos() {
                return Err(CorpusError::Sequence("target missing terminal eos".into()));
            }
        }
        Ok(ParallelCorpus { pairs, source_vocab, target_vocab })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same corpus with source and target sides exchanged (targets
    /// lose their eos to become sources; sources gain one).
    pub fn swapped(&self) -> ParallelCorpus {
        let pairs = self
            .pairs
            .iter()
            .map(|p| {
                let mut tgt = p.source.ids().to_vec();
                tgt.push(EOS);
                SentencePair {
                    source: TokenSeq { ids: p.target.content().to_vec() },
                    target: TokenSeq { ids: tgt },
                }
            })
            .collect();
        ParallelCorpus {
            pairs,
            source_vocab: self.target_vocab.clone(),
            target_vocab: self.source_vocab.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MonolingualCorpus {
    pub sentences: Vec<TokenSeq>,
    pub vocab: Vocabulary,
}

impl MonolingualCorpus {
    pub fn new(sentences: Vec<TokenSeq>, vocab: Vocabulary) -> Result<Self, CorpusError> {
        for s in &sentences {
            if s.ids().iter().any(|&id| id as usize >= vocab.size()) {
                return Err(CorpusError::Sequence("sentence references id outside vocabulary".into()));
            }
        }
        Ok(MonolingualCorpus { sentences, vocab })
    }

    pub fn empty(vocab: Vocabulary) -> MonolingualCorpus {
        MonolingualCorpus { sentences: Vec::new(), vocab }
    }

    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    ParallelSource,
    Monolingual,
}

/// Parallel sources followed by monolingual sentences, no deduplication.
/// Its length is the M in the agreement-term weighting.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CombinedSourceCorpus {
    pub sentences: Vec<TokenSeq>,
    pub provenance: Vec<Provenance>,
}

impl CombinedSourceCorpus {
    pub fn len(&self) -> usize {
        self.sentences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.is_empty()
    }
}

pub fn combine_sources(p: &ParallelCorpus, m: &MonolingualCorpus) -> Result<CombinedSourceCorpus, CorpusError> {
    if p.source_vocab != m.vocab {
        return Err(CorpusError::Config("parallel source vocabulary differs from monolingual vocabulary".into()));
    }
    let mut sentences = Vec::with_capacity(p.len() + m.len());
    let mut provenance = Vec::with_capacity(p.len() + m.len());
    for pair in &p.pairs {
        sentences.push(pair.source.clone());
        provenance.push(Provenance::ParallelSource);
    }
    for s in &m.sentences {
        sentences.push(s.clone());
        provenance.push(Provenance::Monolingual);
    }
    Ok(CombinedSourceCorpus { sentences, provenance })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    CipherReverse,
    NumberSpelling,
    NoisyCopy,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskKind::CipherReverse => "cipher-reverse",
            TaskKind::NumberSpelling => "number-spelling",
            TaskKind::NoisyCopy => "noisy-copy",
        };
        f.write_str(s)
    }
}

/// Recipe for a synthetic translation task. Everything downstream is a
/// pure function of this value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: TaskKind,
    pub source_vocab_size: usize,
    pub max_len: usize,
    pub pair_count: usize,
    pub mono_count: usize,
    pub noise_rate: f64,
    pub seed: u64,
}

impl SyntheticTaskSpec {
    /// Held-out evaluation pairs generated alongside training data.
    pub fn held_out_count(&self) -> usize {
        (self.pair_count / 10).max(1)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.max_len < 2 {
            return Err(CorpusError::Config(format!("max_len must be at least 2, got {}", self.max_len)));
        }
        if self.pair_count == 0 {
            return Err(CorpusError::Config("pair_count must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_rate) {
            return Err(CorpusError::Config(format!("noise_rate must be in [0,1], got {}", self.noise_rate)));
        }
        match self.task {
            TaskKind::CipherReverse | TaskKind::NoisyCopy => {
                if self.source_vocab_size < 6 {
                    return Err(CorpusError::Config(format!(
                        "{} needs source_vocab_size of at least 6 (two content tokens), got {}",
                        self.task, self.source_vocab_size
                    )));
                }
            }
            TaskKind::NumberSpelling => {
                if self.source_vocab_size < 14 {
                    return Err(CorpusError::Config(format!(
                        "number-spelling needs source_vocab_size of at least 14 (ten digits), got {}",
                        self.source_vocab_size
                    )));
                }
            }
        }
        Ok(())
    }

    fn alphabet_len(&self) -> usize {
        match self.task {
            TaskKind::CipherReverse | TaskKind::NoisyCopy => self.source_vocab_size - 4,
            TaskKind::NumberSpelling => 10,
        }
    }
}

fn letter_token(i: usize) -> String {
    if i < 26 {
        char::from(b'a' + i as u8).to_string()
    } else {
        format!("t{i}")
    }
}

const DIGIT_WORDS: [&str; 10] = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

fn task_vocabs(spec: &SyntheticTaskSpec) -> Result<(Vocabulary, Vocabulary), CorpusError> {
    match spec.task {
        TaskKind::CipherReverse | TaskKind::NoisyCopy => {
            let a = spec.alphabet_len();
            let v = Vocabulary::from_content((0..a).map(letter_token))?;
            Ok((v.clone(), v))
        }
        TaskKind::NumberSpelling => {
            let src = Vocabulary::from_content((0..10).map(|d| d.to_string()))?;
            let tgt = Vocabulary::from_content(DIGIT_WORDS.iter().map(|s| s.to_string()))?;
            Ok((src, tgt))
        }
    }
}

/// Number of distinct source sentences the task can produce.
fn sentence_space(alphabet: usize, max_len: usize) -> u128 {
    let a = alphabet as u128;
    let mut total: u128 = 0;
    let mut pow = a.saturating_mul(a);
    for _ in 2..=max_len {
        total = total.saturating_add(pow);
        pow = pow.saturating_mul(a);
    }
    total
}

/// Samples `count` distinct source sentences (content ids, no eos).
fn distinct_pool(spec: &SyntheticTaskSpec, count: usize) -> Result<Vec<Vec<u32>>, CorpusError> {
    let a = spec.alphabet_len();
    let space = sentence_space(a, spec.max_len);
    if (count as u128).saturating_mul(2) > space {
        return Err(CorpusError::Config(format!(
            "task space holds {space} distinct sentences; cannot draw {count} distinct samples with margin"
        )));
    }
    let mut rng = stream(spec.seed, "task-sources", 0);
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(count);
    let mut pool: Vec<Vec<u32>> = Vec::with_capacity(count);
    let mut attempts: usize = 0;
    let max_attempts = count.saturating_mul(1000).saturating_add(10_000);
    while pool.len() < count {
        attempts += 1;
        if attempts > max_attempts {
            return Err(CorpusError::Config("distinct-source sampling exceeded its attempt budget".into()));
        }
        let len = rng.gen_range(2..=spec.max_len);
        let s: Vec<u32> = (0..len).map(|_| 4 + rng.gen_range(0..a) as u32).collect();
        if seen.insert(s.clone()) {
            pool.push(s);
        }
    }
    Ok(pool)
}

/// The cipher as a full id map: reserved ids map to themselves, content
/// ids through a seeded permutation of the alphabet.
pub fn cipher_permutation(spec: &SyntheticTaskSpec) -> Result<Vec<u32>, CorpusError> {
    if spec.task != TaskKind::CipherReverse {
        return Err(CorpusError::Config(format!("cipher permutation is only defined for cipher-reverse, not {}", spec.task)));
    }
    spec.validate()?;
    let a = spec.alphabet_len();
    let mut perm: Vec<u32> = (0..a as u32).map(|i| 4 + i).collect();
    perm.shuffle(&mut stream(spec.seed, "cipher", 0));
    let mut map: Vec<u32> = (0..4).collect();
    map.extend(perm);
    Ok(map)
}

/// Gold target content for a source. `pool_index` keys the noise stream
/// so noisy-copy corruption is a pure function of the spec.
fn gold_target(spec: &SyntheticTaskSpec, cipher: Option<&[u32]>, src: &[u32], pool_index: usize) -> Vec<u32> {
    match spec.task {
        TaskKind::CipherReverse => {
            let map = cipher.expect("cipher table present for cipher-reverse");
            src.iter().rev().map(|&id| map[id as usize]).collect()
        }
        TaskKind::NumberSpelling => src.to_vec(), // digit id i maps to word id i
        TaskKind::NoisyCopy => {
            let a = spec.alphabet_len();
            let mut rng = stream(spec.seed, "noise", pool_index as u64);
            src.iter()
                .map(|&id| {
                    if spec.noise_rate > 0.0 && rng.gen_bool(spec.noise_rate) {
                        // substitute with a uniformly random different token
                        let offset = rng.gen_range(1..a) as u32;
                        4 + ((id - 4 + offset) % a as u32)
                    } else {
                        id
                    }
                })
                .collect()
        }
    }
}

/// Generates (training pairs, source-side monolingual, held-out pairs).
/// The three source sets are pairwise disjoint by construction.
pub fn generate_task(
    spec: &SyntheticTaskSpec,
) -> Result<(ParallelCorpus, MonolingualCorpus, ParallelCorpus), CorpusError> {
    spec.validate()?;
    let (src_vocab, tgt_vocab) = task_vocabs(spec)?;
    let cipher = match spec.task {
        TaskKind::CipherReverse => Some(cipher_permutation(spec)?),
        _ => None,
    };
    let held = spec.held_out_count();
    let pool = distinct_pool(spec, spec.pair_count + held + spec.mono_count)?;

    let make_pairs = |lo: usize, hi: usize| -> Result<Vec<SentencePair>, CorpusError> {
        (lo..hi)
            .map(|i| {
                let content = gold_target(spec, cipher.as_deref(), &pool[i], i);
                Ok(SentencePair {
                    source: TokenSeq::source(pool[i].clone(), &src_vocab)?,
                    target: TokenSeq::target_from_content(content, &tgt_vocab)?,
                })
            })
            .collect()
    };

    let train = ParallelCorpus::new(make_pairs(0, spec.pair_count)?, src_vocab.clone(), tgt_vocab.clone())?;
    let held_out = ParallelCorpus::new(
        make_pairs(spec.pair_count, spec.pair_count + held)?,
        src_vocab.clone(),
        tgt_vocab.clone(),
    )?;
    let mono_seqs: Result<Vec<TokenSeq>, CorpusError> = pool[spec.pair_count + held..]
        .iter()
        .map(|s| TokenSeq::source(s.clone(), &src_vocab))
        .collect();
    let mono = MonolingualCorpus::new(mono_seqs?, src_vocab)?;
    Ok((train, mono, held_out))
}

/// Target-language monolingual sentences for back-translation: fresh
/// sources beyond the standard pools, gold-mapped to the target side.
pub fn generate_target_mono(spec: &SyntheticTaskSpec, count: usize) -> Result<MonolingualCorpus, CorpusError> {
    spec.validate()?;
    let (_, tgt_vocab) = task_vocabs(spec)?;
    let cipher = match spec.task {
        TaskKind::CipherReverse => Some(cipher_permutation(spec)?),
        _ => None,
    };
    let base = spec.pair_count + spec.held_out_count() + spec.mono_count;
    let pool = distinct_pool(spec, base + count)?;
    let sentences: Result<Vec<TokenSeq>, CorpusError> = pool[base..]
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let content = gold_target(spec, cipher.as_deref(), s, base + j);
            TokenSeq::source(content, &tgt_vocab)
        })
        .collect();
    MonolingualCorpus::new(sentences?, tgt_vocab)
}

fn seq_from_line(line: &str, lineno: usize, path: &str, vocab: &Vocabulary, target: bool) -> Result<TokenSeq, CorpusError> {
    let ids: Vec<u32> = line.split_whitespace().map(|t| vocab.id(t)).collect();
    if ids.is_empty() {
        return Err(CorpusError::Format { path: path.into(), line: lineno, msg: "empty sentence".into() });
    }
    let built = if target {
        TokenSeq::target_from_content(ids, vocab)
    } else {
        TokenSeq::source(ids, vocab)
    };
    built.map_err(|e| CorpusError::Format { path: path.into(), line: lineno, msg: e.to_string() })
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads a parallel corpus from two line-aligned files.
pub fn read_corpus(
    src_path: &Path,
    tgt_path: &Path,
    source_vocab: &Vocabulary,
    target_vocab: &Vocabulary,
) -> Result<ParallelCorpus, CorpusError> {
    let src_lines = read_lines(src_path)?;
    let tgt_lines = read_lines(tgt_path)?;
    if src_lines.len() != tgt_lines.len() {
        let (path, line) = if src_lines.len() > tgt_lines.len() {
            (src_path, tgt_lines.len() + 1)
        } else {
            (tgt_path, src_lines.len() + 1)
        };
        return Err(CorpusError::Format {
            path: path.display().to_string(),
            line,
            msg: format!("line counts differ: {} source vs {} target lines", src_lines.len(), tgt_lines.len()),
        });
    }
    if src_lines.is_empty() {
        return Err(CorpusError::Empty);
    }
    let src_name = src_path.display().to_string();
    let tgt_name = tgt_path.display().to_string();
    let pairs: Result<Vec<SentencePair>, CorpusError> = src_lines
        .iter()
        .zip(tgt_lines.iter())
        .enumerate()
        .map(|(i, (s, t))| {
            Ok(SentencePair {
                source: seq_from_line(s, i + 1, &src_name, source_vocab, false)?,
                target: seq_from_line(t, i + 1, &tgt_name, target_vocab, true)?,
            })
        })
        .collect();
    ParallelCorpus::new(pairs?, source_vocab.clone(), target_vocab.clone())
}

/// Writes a parallel corpus to two line-aligned files (eos stripped).
pub fn write_corpus(corpus: &ParallelCorpus, src_path: &Path, tgt_path: &Path) -> Result<(), CorpusError> {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in &corpus.pairs {
        src.push_str(&p.source.to_line(&corpus.source_vocab));
        src.push('\n');
        tgt.push_str(&p.target.to_line(&corpus.target_vocab));
        tgt.push('\n');
    }
    fs::write(src_path, src)?;
    fs::write(tgt_path, tgt)?;
    Ok(())
}

pub fn read_mono(path: &Path, vocab: &Vocabulary) -> Result<MonolingualCorpus, CorpusError> {
    let lines = read_lines(path)?;
    let name = path.display().to_string();
    let sentences: Result<Vec<TokenSeq>, CorpusError> = lines
        .iter()
        .enumerate()
        .map(|(i, l)| seq_from_line(l, i + 1, &name, vocab, false))
        .collect();
    MonolingualCorpus::new(sentences?, vocab.clone())
}

pub fn write_mono(mono: &MonolingualCorpus, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for s in &mono.sentences {
        out.push_str(&s.to_line(&mono.vocab));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Vocabulary file: one token per line, line number = id.
pub fn write_vocab(vocab: &Vocabulary, path: &Path) -> Result<(), CorpusError> {
    let mut out = String::new();
    for t in vocab.tokens() {
        out.push_str(t);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary, CorpusError> {
    let lines = read_lines(path)?;
    let name = path.display().to_string();
    for (i, expected) in RESERVED.iter().enumerate() {
        if lines.get(i).map(String::as_str) != Some(*expected) {
            return Err(CorpusError::Format {
                path: name,
                line: i + 1,
                msg: format!("expected reserved token {expected:?} on line {}", i + 1),
            });
        }
    }
    Vocabulary::from_content(lines[4..].iter().cloned()).map_err(|e| match e {
        CorpusError::Config(msg) => CorpusError::Format { path: path.display().to_string(), line: 0, msg },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_spec(task: TaskKind) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task,
            source_vocab_size: 30,
            max_len: 6,
            pair_count: 40,
            mono_count: 20,
            noise_rate: 0.2,
            seed: 11,
        }
    }

    #[test]
    fn build_vocab_frequency_then_lexicographic() {
        let lines = vec!["a b".to_string(), "b".to_string()];
        let v = build_vocab(&lines, 10).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "b", "a"]);
    }

    #[test]
    fn build_vocab_tie_breaks_lexicographically() {
        let lines = vec!["b a".to_string()];
        let v = build_vocab(&lines, 10).unwrap();
        assert_eq!(v.token(4), "a");
        assert_eq!(v.token(5), "b");
    }

    #[test]
    fn build_vocab_empty_input_errors() {
        assert!(matches!(build_vocab(&[], 10), Err(CorpusError::Empty)));
        let blank = vec!["   ".to_string()];
        assert!(matches!(build_vocab(&blank, 10), Err(CorpusError::Empty)));
    }

    #[test]
    fn build_vocab_truncates_at_max_size() {
        let lines = vec!["c c c b b a".to_string()];
        let v = build_vocab(&lines, 6).unwrap();
        assert_eq!(v.size(), 6);
        assert_eq!(v.tokens()[4..], ["c".to_string(), "b".to_string()]);
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = Vocabulary::from_content(["a".to_string()]).unwrap();
        assert_eq!(v.id("zzz"), UNK);
        assert_eq!(v.id("a"), 4);
    }

    #[test]
    fn cipher_reverse_matches_permutation() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let map = cipher_permutation(&spec).unwrap();
        let (train, _, _) = generate_task(&spec).unwrap();
        for p in &train.pairs {
            let expect: Vec<u32> = p.source.ids().iter().rev().map(|&id| map[id as usize]).collect();
            assert_eq!(p.target.content(), expect.as_slice());
        }
    }

    #[test]
    fn cipher_is_invertible_on_sequences() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let map = cipher_permutation(&spec).unwrap();
        let mut inverse = vec![0u32; map.len()];
        for (i, &m) in map.iter().enumerate() {
            inverse[m as usize] = i as u32;
        }
        let (train, _, _) = generate_task(&spec).unwrap();
        for p in &train.pairs {
            let recovered: Vec<u32> = p.target.content().iter().rev().map(|&id| inverse[id as usize]).collect();
            assert_eq!(recovered.as_slice(), p.source.ids());
        }
    }

    #[test]
    fn noisy_copy_zero_noise_is_identity() {
        let mut spec = tiny_spec(TaskKind::NoisyCopy);
        spec.noise_rate = 0.0;
        let (train, _, _) = generate_task(&spec).unwrap();
        for p in &train.pairs {
            assert_eq!(p.source.ids(), p.target.content());
        }
    }

    #[test]
    fn noisy_copy_substitutes_with_different_tokens() {
        let mut spec = tiny_spec(TaskKind::NoisyCopy);
        spec.noise_rate = 1.0;
        let (train, _, _) = generate_task(&spec).unwrap();
        for p in &train.pairs {
            for (s, t) in p.source.ids().iter().zip(p.target.content()) {
                assert_ne!(s, t);
            }
        }
    }

    #[test]
    fn number_spelling_maps_digits_to_words() {
        let spec = SyntheticTaskSpec {
            task: TaskKind::NumberSpelling,
            source_vocab_size: 14,
            max_len: 5,
            pair_count: 30,
            mono_count: 10,
            noise_rate: 0.0,
            seed: 3,
        };
        let (train, _, _) = generate_task(&spec).unwrap();
        for p in &train.pairs {
            for (&s, &t) in p.source.ids().iter().zip(p.target.content()) {
                let digit: usize = train.source_vocab.token(s).parse().unwrap();
                assert_eq!(train.target_vocab.token(t), DIGIT_WORDS[digit]);
            }
        }
    }

    #[test]
    fn same_seed_same_corpora() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let a = generate_task(&spec).unwrap();
        let b = generate_task(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pools_are_pairwise_disjoint() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let (train, mono, held) = generate_task(&spec).unwrap();
        let mut seen: HashSet<&[u32]> = HashSet::new();
        for p in &train.pairs {
            assert!(seen.insert(p.source.ids()));
        }
        for p in &held.pairs {
            assert!(seen.insert(p.source.ids()));
        }
        for s in &mono.sentences {
            assert!(seen.insert(s.ids()));
        }
        assert_eq!(held.len(), spec.held_out_count());
        assert_eq!(mono.len(), spec.mono_count);
    }

    #[test]
    fn target_mono_is_fresh_and_target_side() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let (train, mono, held) = generate_task(&spec).unwrap();
        let extra = generate_target_mono(&spec, 15).unwrap();
        assert_eq!(extra.len(), 15);
        assert_eq!(extra.vocab, train.target_vocab);
        // fresh sources: none of the underlying sources reappear
        let map = cipher_permutation(&spec).unwrap();
        let mut inverse = vec![0u32; map.len()];
        for (i, &m) in map.iter().enumerate() {
            inverse[m as usize] = i as u32;
        }
        let mut seen: HashSet<Vec<u32>> = HashSet::new();
        for p in train.pairs.iter().chain(held.pairs.iter()) {
            seen.insert(p.source.ids().to_vec());
        }
        for s in &mono.sentences {
            seen.insert(s.ids().to_vec());
        }
        for t in &extra.sentences {
            let src: Vec<u32> = t.ids().iter().rev().map(|&id| inverse[id as usize]).collect();
            assert!(!seen.contains(&src));
        }
    }

    #[test]
    fn vocab_too_small_for_bijection_errors() {
        let mut spec = tiny_spec(TaskKind::CipherReverse);
        spec.source_vocab_size = 5;
        assert!(matches!(generate_task(&spec), Err(CorpusError::Config(_))));
    }

    #[test]
    fn space_too_small_errors() {
        let mut spec = tiny_spec(TaskKind::CipherReverse);
        spec.source_vocab_size = 6; // alphabet of 2
        spec.max_len = 2; // 4 distinct sentences
        spec.pair_count = 10;
        assert!(matches!(generate_task(&spec), Err(CorpusError::Config(_))));
    }

    #[test]
    fn combine_sources_lengths_and_order() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let (train, mono, _) = generate_task(&spec).unwrap();
        let combined = combine_sources(&train, &mono).unwrap();
        assert_eq!(combined.len(), train.len() + mono.len());
        assert_eq!(combined.sentences[0], train.pairs[0].source);
        assert_eq!(combined.provenance[0], Provenance::ParallelSource);
        assert_eq!(*combined.sentences.last().unwrap(), *mono.sentences.last().unwrap());
        assert_eq!(*combined.provenance.last().unwrap(), Provenance::Monolingual);

        let empty = MonolingualCorpus::empty(train.source_vocab.clone());
        let only_parallel = combine_sources(&train, &empty).unwrap();
        assert_eq!(only_parallel.len(), train.len());
    }

    #[test]
    fn combine_sources_keeps_duplicates() {
        let v = Vocabulary::from_content(["a".to_string(), "b".to_string()]).unwrap();
        let s = TokenSeq::source(vec![4, 5], &v).unwrap();
        let pair = SentencePair { source: s.clone(), target: TokenSeq::target_from_content(vec![5, 4], &v).unwrap() };
        let p = ParallelCorpus::new(vec![pair], v.clone(), v.clone()).unwrap();
        let m = MonolingualCorpus::new(vec![s.clone()], v).unwrap();
        let combined = combine_sources(&p, &m).unwrap();
        assert_eq!(combined.len(), 2);
        assert_eq!(combined.sentences[0], combined.sentences[1]);
    }

    #[test]
    fn combine_sources_vocab_mismatch_errors() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let (train, _, _) = generate_task(&spec).unwrap();
        let other = Vocabulary::from_content(["q".to_string()]).unwrap();
        let m = MonolingualCorpus::empty(other);
        assert!(matches!(combine_sources(&train, &m), Err(CorpusError::Config(_))));
    }

    #[test]
    fn corpus_round_trip_is_identity() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(TaskKind::CipherReverse);
        let (train, mono, _) = generate_task(&spec).unwrap();

        let sp = dir.path().join("train.src");
        let tp = dir.path().join("train.tgt");
        write_corpus(&train, &sp, &tp).unwrap();
        let back = read_corpus(&sp, &tp, &train.source_vocab, &train.target_vocab).unwrap();
        assert_eq!(back, train);

        let mp = dir.path().join("mono.src");
        write_mono(&mono, &mp).unwrap();
        let mono_back = read_mono(&mp, &mono.vocab).unwrap();
        assert_eq!(mono_back, mono);
    }

    #[test]
    fn generators_write_bitwise_equal_files() {
        let dir = tempdir().unwrap();
        let spec = tiny_spec(TaskKind::NoisyCopy);
        let mut bytes = Vec::new();
        for run in 0..2 {
            let (train, _, _) = generate_task(&spec).unwrap();
            let sp = dir.path().join(format!("r{run}.src"));
            let tp = dir.path().join(format!("r{run}.tgt"));
            write_corpus(&train, &sp, &tp).unwrap();
            bytes.push((fs::read(&sp).unwrap(), fs::read(&tp).unwrap()));
        }
        assert_eq!(bytes[0], bytes[1]);
    }

    #[test]
    fn line_count_mismatch_reports_first_extra_line() {
        let dir = tempdir().unwrap();
        let sp = dir.path().join("x.src");
        let tp = dir.path().join("x.tgt");
        fs::write(&sp, "a\nb\nc\n").unwrap();
        fs::write(&tp, "a\nb\nc\nd\n").unwrap();
        let v = Vocabulary::from_content(["a".to_string(), "b".to_string(), "c".to_string(), "d".to_string()]).unwrap();
        match read_corpus(&sp, &tp, &v, &v) {
            Err(CorpusError::Format { path, line, .. }) => {
                assert_eq!(line, 4);
                assert!(path.ends_with("x.tgt"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn empty_line_is_a_format_error() {
        let dir = tempdir().unwrap();
        let sp = dir.path().join("y.src");
        let tp = dir.path().join("y.tgt");
        fs::write(&sp, "a\n\n").unwrap();
        fs::write(&tp, "a\nb\n").unwrap();
        let v = Vocabulary::from_content(["a".to_string(), "b".to_string()]).unwrap();
        match read_corpus(&sp, &tp, &v, &v) {
            Err(CorpusError::Format { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("empty"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempdir().unwrap();
        let v = Vocabulary::from_content(["b".to_string(), "a".to_string()]).unwrap();
        let path = dir.path().join("vocab.txt");
        write_vocab(&v, &path).unwrap();
        assert_eq!(read_vocab(&path).unwrap(), v);
    }

    #[test]
    fn vocab_file_missing_reserved_header_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        fs::write(&path, "a\nb\n").unwrap();
        assert!(matches!(read_vocab(&path), Err(CorpusError::Format { line: 1, .. })));
    }

    #[test]
    fn swapped_corpus_flips_sides() {
        let spec = tiny_spec(TaskKind::CipherReverse);
        let (train, _, _) = generate_task(&spec).unwrap();
        let sw = train.swapped();
        assert_eq!(sw.pairs[0].source.ids(), train.pairs[0].target.content());
        assert_eq!(sw.pairs[0].target.content(), train.pairs[0].source.ids());
        assert!(sw.pairs[0].target.ends_with_eos());
        assert_eq!(sw.swapped(), train);
    }

    #[test]
    fn reversed_keeps_terminal_eos() {
        let v = Vocabulary::from_content(["a".to_string(), "b".to_string(), "c".to_string()]).unwrap();
        let t = TokenSeq::target_from_content(vec![4, 5, 6], &v).unwrap();
        let r = t.reversed();
        assert_eq!(r.ids(), &[6, 5, 4, EOS]);
        assert_eq!(r.reversed(), t);
    }
}
