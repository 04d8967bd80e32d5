//! Byte-level corpus handling and synthetic tasks.
//!
//! Documents are raw bytes; each byte is a token id and `0x00` doubles as
//! the end-of-document marker. Documents are concatenated with EOS and cut
//! into fixed-length blocks, optionally passed through a seeded shuffle
//! buffer.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{PmpError, Result};
use crate::quantgeom::SeededStream;

pub const EOS: u32 = 0;
pub const BYTE_VOCAB: usize = 256;
pub const DEFAULT_BLOCK_LEN: usize = 256;
pub const DEFAULT_SHUFFLE_BUFFER: usize = 1024;

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PackedBlock {
    pub tokens: Vec<u32>,
}

/// Streams fixed-length blocks out of EOS-terminated documents. The trailing
/// partial block is dropped.
pub struct Packer<I> {
    docs: I,
    block_len: usize,
    eos: u32,
    pending: Vec<u32>,
}

impl<I: Iterator<Item = Vec<u8>>> Iterator for Packer<I> {
    type Item = PackedBlock;

    fn next(&mut self) -> Option<PackedBlock> {
        while self.pending.len() < self.block_len {
            let doc = self.docs.next()?;
            self.pending.extend(doc.iter().map(|&b| b as u32));
            self.pending.push(self.eos);
        }
        let rest = self.pending.split_off(self.block_len);
        let tokens = std::mem::replace(&mut self.pending, rest);
        Some(PackedBlock { tokens })
    }
}

/// Packs `documents` into blocks of `block_len` tokens separated by `eos_id`.
pub fn pack_corpus<D>(
    documents: D,
    block_len: usize,
    eos_id: u32,
    vocab_size: usize,
) -> Result<Packer<std::iter::Peekable<D::IntoIter>>>
where
    D: IntoIterator<Item = Vec<u8>>,
{
    if eos_id as usize >= vocab_size || vocab_size < BYTE_VOCAB {
        return Err(PmpError::Argument(format!(
            "eos id {eos_id} and byte tokens must fit a vocabulary of {vocab_size}"
        )));
    }
    if block_len == 0 {
        return Err(PmpError::Argument("block length must be positive".into()));
    }
    let mut docs = documents.into_iter().peekable();
    if docs.peek().is_none() {
        return Err(PmpError::Data("empty corpus".into()));
    }
    Ok(Packer {
        docs,
        block_len,
        eos: eos_id,
        pending: Vec::with_capacity(2 * block_len),
    })
}

/// Fixed-capacity shuffle buffer: fill to capacity, then emit a uniformly
/// chosen resident and refill from upstream; drain randomly at the end.
pub struct ShuffleBuffer<I> {
    inner: I,
    buffer: Vec<PackedBlock>,
    capacity: usize,
    rng: SeededStream,
    exhausted: bool,
}

impl<I: Iterator<Item = PackedBlock>> ShuffleBuffer<I> {
    pub fn new(inner: I, capacity: usize, seed: u64) -> Self {
        ShuffleBuffer {
            inner,
            buffer: Vec::with_capacity(capacity.max(1)),
            capacity: capacity.max(1),
            rng: SeededStream::new(seed).split(0x5B0F),
            exhausted: false,
        }
    }
}

impl<I: Iterator<Item = PackedBlock>> Iterator for ShuffleBuffer<I> {
    type Item = PackedBlock;

    fn next(&mut self) -> Option<PackedBlock> {
        while !self.exhausted && self.buffer.len() < self.capacity {
            match self.inner.next() {
                Some(b) => self.buffer.push(b),
                None => self.exhausted = true,
            }
        }
        if self.buffer.is_empty() {
            return None;
        }
        let i = self.rng.below(self.buffer.len() as u64) as usize;
        Some(self.buffer.swap_remove(i))
    }
}

/// Packs and optionally shuffles a corpus into a materialised block list.
pub fn blocks_from_documents(
    documents: Vec<Vec<u8>>,
    block_len: usize,
    shuffle: Option<(usize, u64)>,
) -> Result<Vec<PackedBlock>> {
    let packer = pack_corpus(documents, block_len, EOS, BYTE_VOCAB)?;
    Ok(match shuffle {
        Some((capacity, seed)) => ShuffleBuffer::new(packer, capacity, seed).collect(),
        None => packer.collect(),
    })
}

/// Splits text into documents at blank lines.
pub fn split_documents(bytes: &[u8]) -> Vec<Vec<u8>> {
    let mut docs = Vec::new();
    let mut current: Vec<u8> = Vec::new();
    for line in bytes.split(|&b| b == b'\n') {
        let line = line.strip_suffix(b"\r").unwrap_or(line);
        if line.iter().all(|b| b.is_ascii_whitespace()) {
            if !current.is_empty() {
                docs.push(std::mem::take(&mut current));
            }
        } else {
            if !current.is_empty() {
                current.push(b'\n');
            }
            current.extend_from_slice(line);
        }
    }
    if !current.is_empty() {
        docs.push(current);
    }
    docs
}

/// Reads a corpus from a file, or from every regular file of a directory in
/// name order.
pub fn load_corpus(path: &Path) -> Result<Vec<Vec<u8>>> {
    let mut docs = Vec::new();
    if path.is_dir() {
        let mut files: Vec<_> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        for f in files {
            docs.extend(split_documents(&std::fs::read(f)?));
        }
    } else {
        docs = split_documents(&std::fs::read(path)?);
    }
    if docs.is_empty() {
        return Err(PmpError::Data(format!("no documents found in {}", path.display())));
    }
    Ok(docs)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TaskKind {
    MarkovLm,
    CopyLm,
    ParityCls,
    KeywordCls,
}

impl TaskKind {
    pub fn is_classification(self) -> bool {
        matches!(self, TaskKind::ParityCls | TaskKind::KeywordCls)
    }

    pub fn n_classes(self) -> usize {
        2
    }
}

impl FromStr for TaskKind {
    type Err = PmpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "markov-lm" => Ok(TaskKind::MarkovLm),
            "copy-lm" => Ok(TaskKind::CopyLm),
            "parity-cls" => Ok(TaskKind::ParityCls),
            "keyword-cls" => Ok(TaskKind::KeywordCls),
            other => Err(PmpError::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::MarkovLm => "markov-lm",
            TaskKind::CopyLm => "copy-lm",
            TaskKind::ParityCls => "parity-cls",
            TaskKind::KeywordCls => "keyword-cls",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
    pub seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskData {
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

/// Symbols emitted by the Markov source.
pub const MARKOV_ALPHABET: &[u8] = b"abcdefghijklmnopqrstuvwxyz ";
/// Pattern whose presence defines the keyword task. Keyword-task text has
/// these bytes scrubbed (replaced by spaces) before the pattern is planted.
pub const KEYWORD: &[u8] = b"xyz";
/// Byte counted by the parity task.
pub const PARITY_MARK: u8 = b'#';
const COPY_SEPARATOR: u8 = b'|';
const CHAIN_SEED: u64 = 0x4D41_524B_4F56;

/// Fixed order-2 Markov chain over [`MARKOV_ALPHABET`]: each context has
/// three successors with probabilities 0.6 / 0.3 / 0.1.
#[derive(Clone, Debug)]
pub struct MarkovChain {
    successors: Vec<[u8; 3]>,
}

impl Default for MarkovChain {
    fn default() -> Self {
        Self::new()
    }
}

impl MarkovChain {
    pub fn new() -> Self {
        let n = MARKOV_ALPHABET.len();
        let mut rng = SeededStream::new(CHAIN_SEED);
        let successors = (0..n * n)
            .map(|_| {
                let mut pick: Vec<u8> = (0..n as u8).collect();
                rng.shuffle(&mut pick);
                [pick[0], pick[1], pick[2]]
            })
            .collect();
        MarkovChain { successors }
    }

    fn next_symbol(&self, a: usize, b: usize, rng: &mut SeededStream) -> usize {
        let s = &self.successors[a * MARKOV_ALPHABET.len() + b];
        let u = rng.next_f64();
        let idx = if u < 0.6 {
            0
        } else if u < 0.9 {
            1
        } else {
            2
        };
        s[idx] as usize
    }

    /// `len` bytes starting from a uniformly random context.
    pub fn sample(&self, len: usize, rng: &mut SeededStream) -> Vec<u8> {
        let n = MARKOV_ALPHABET.len() as u64;
        let mut a = rng.below(n) as usize;
        let mut b = rng.below(n) as usize;
        let mut out = Vec::with_capacity(len);
        for _ in 0..len {
            let c = self.next_symbol(a, b, rng);
            out.push(MARKOV_ALPHABET[c]);
            a = b;
            b = c;
        }
        out
    }
}

/// Markov-chain documents with lengths uniform in `min_len..=max_len`.
pub fn markov_documents(n_docs: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<Vec<u8>> {
    let chain = MarkovChain::new();
    let mut rng = SeededStream::new(seed).split(0xD0C5);
    (0..n_docs)
        .map(|_| {
            let len = min_len + rng.below((max_len - min_len + 1) as u64) as usize;
            chain.sample(len, &mut rng)
        })
        .collect()
}

fn to_tokens(bytes: &[u8]) -> Vec<u32> {
    bytes.iter().map(|&b| b as u32).collect()
}

/// Deterministic examples for `task`; train and eval come from disjoint
/// sub-streams of the seed.
pub fn gen_synthetic(task: &SyntheticTask) -> Result<TaskData> {
    let min_len = match task.kind {
        TaskKind::KeywordCls => KEYWORD.len() + 1,
        TaskKind::CopyLm => 3,
        _ => 2,
    };
    if task.seq_len < min_len {
        return Err(PmpError::Config(format!(
            "{} needs sequences of at least {min_len} tokens",
            task.kind
        )));
    }
    let chain = MarkovChain::new();
    let root = SeededStream::new(task.seed);
    let make = |n: usize, stream: u64| {
        let mut rng = root.split(stream);
        (0..n)
            .map(|i| generate_one(task.kind, task.seq_len, i, &chain, &mut rng))
            .collect::<Vec<_>>()
    };
    Ok(TaskData {
        train: make(task.n_train, 1),
        eval: make(task.n_eval, 2),
    })
}

fn generate_one(
    kind: TaskKind,
    len: usize,
    index: usize,
    chain: &MarkovChain,
    rng: &mut SeededStream,
) -> Example {
    match kind {
        TaskKind::MarkovLm => Example {
            tokens: to_tokens(&chain.sample(len, rng)),
            label: None,
        },
        TaskKind::CopyLm => {
            let half = (len - 1) / 2;
            let n = MARKOV_ALPHABET.len() as u64;
            let s: Vec<u8> = (0..half).map(|_| MARKOV_ALPHABET[rng.below(n) as usize]).collect();
            let mut bytes = s.clone();
            bytes.push(COPY_SEPARATOR);
            bytes.extend_from_slice(&s);
            while bytes.len() < len {
                bytes.push(COPY_SEPARATOR);
            }
            Example {
                tokens: to_tokens(&bytes),
                label: None,
            }
        }
        TaskKind::ParityCls => {
            let mut bytes = chain.sample(len, rng);
            let marks = rng.below(5) as usize;
            let mut positions: Vec<usize> = (0..len).collect();
            rng.shuffle(&mut positions);
            for &p in positions.iter().take(marks.min(len)) {
                bytes[p] = PARITY_MARK;
            }
            Example {
                tokens: to_tokens(&bytes),
                label: Some(marks.min(len) % 2),
            }
        }
        TaskKind::KeywordCls => {
            let mut bytes = chain.sample(len, rng);
            for b in bytes.iter_mut().filter(|b| KEYWORD.contains(b)) {
                *b = b' ';
            }
            // balanced classes: alternate by index, position random
            let label = index % 2;
            if label == 1 {
                let at = rng.below((len - KEYWORD.len() + 1) as u64) as usize;
                bytes[at..at + KEYWORD.len()].copy_from_slice(KEYWORD);
            }
            Example {
                tokens: to_tokens(&bytes),
                label: Some(label),
            }
        }
    }
}

/// Labelled keyword presence, used to double-check generated data.
pub fn contains_keyword(tokens: &[u32]) -> bool {
    let kw = to_tokens(KEYWORD);
    tokens.windows(kw.len()).any(|w| w == kw.as_slice())
}
