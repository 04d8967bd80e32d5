//! Tiny LLaMA-family decoder: RMS-norm, rotary attention with grouped
//! key/value heads, SiLU-gated MLP, untied output projection.
//!
//! Base parameters live in one flat `f32` vector indexed by a
//! [`FlatParamLayout`]; that vector is the coordinate system shared by masks,
//! gradients, optimizer state and checkpoints. Fine-tuning additions (the
//! classification head and LoRA adapters) sit outside it.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{PmpError, Result};
use crate::quantgeom::SeededStream;

pub const RMS_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rope_theta: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_layers: 2,
            hidden_size: 64,
            n_heads: 4,
            n_kv_heads: 2,
            intermediate_size: 128,
            vocab_size: 256,
            max_seq_len: 256,
            rope_theta: 10_000.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("hidden_size", self.hidden_size),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(PmpError::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(PmpError::Config(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(PmpError::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(PmpError::Config(format!(
                "head dimension {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        if self.max_seq_len < 2 {
            return Err(PmpError::Config("max_seq_len must be at least 2".into()));
        }
        if !(self.rope_theta > 0.0) || !self.rope_theta.is_finite() {
            return Err(PmpError::Config("rope_theta must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Names and shapes of every base parameter, in layout order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (d, i, v) = (self.hidden_size, self.intermediate_size, self.vocab_size);
        let mut specs = vec![("tok_embeddings".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            specs.push((p("attn_norm"), vec![d]));
            specs.push((p("wq"), vec![d, d]));
            specs.push((p("wk"), vec![d, self.kv_dim()]));
            specs.push((p("wv"), vec![d, self.kv_dim()]));
            specs.push((p("wo"), vec![d, d]));
            specs.push((p("mlp_norm"), vec![d]));
            specs.push((p("w_gate"), vec![d, i]));
            specs.push((p("w_up"), vec![d, i]));
            specs.push((p("w_down"), vec![i, d]));
        }
        specs.push(("final_norm".to_string(), vec![d]));
        specs.push(("lm_head".to_string(), vec![d, v]));
        specs
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered `(name, shape, offset)` table mapping named tensors onto one flat
/// vector of length `d`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatParamLayout {
    entries: Vec<LayoutEntry>,
    d: usize,
    hash: u64,
}

impl FlatParamLayout {
    pub fn new(specs: Vec<(String, Vec<usize>)>) -> Result<Self> {
        let mut entries: Vec<LayoutEntry> = Vec::with_capacity(specs.len());
        let mut offset = 0;
        for (name, shape) in specs {
            if entries.iter().any(|e| e.name == name) {
                return Err(PmpError::Config(format!("duplicate parameter name {name}")));
            }
            if shape.iter().any(|&s| s == 0) {
                return Err(PmpError::Config(format!("parameter {name} has an empty axis")));
            }
            let e = LayoutEntry {
                name,
                shape,
                offset,
            };
            offset += e.len();
            entries.push(e);
        }
        let hash = Self::digest(entries.iter().map(|e| (e.name.as_str(), e.shape.as_slice())));
        Ok(FlatParamLayout {
            entries,
            d: offset,
            hash,
        })
    }

    /// FNV-1a over names, shapes and their order.
    pub fn digest<'a>(items: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01B3;
        let mut h: u64 = 0xCBF2_9CE4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, shape) in items {
            feed(name.as_bytes());
            feed(&[0xFF]);
            for &s in shape {
                feed(&(s as u64).to_le_bytes());
            }
            feed(&[0xFE]);
        }
        h
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn layout_hash(&self) -> u64 {
        self.hash
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Layout entry owning flat coordinate `i`.
    pub fn owner(&self, i: usize) -> Option<&LayoutEntry> {
        let pos = self.entries.partition_point(|e| e.offset + e.len() <= i);
        self.entries.get(pos)
    }
}

fn init_tensor(stream: &mut SeededStream, shape: &[usize], std: f64, out: &mut [f32]) {
    if shape.len() == 1 {
        out.fill(1.0);
    } else {
        for v in out.iter_mut() {
            *v = (std * stream.next_gaussian()) as f32;
        }
    }
}

/// Linear classification head on the final-position hidden state.
#[derive(Clone, Debug, PartialEq)]
pub struct ClsHead {
    pub n_classes: usize,
    pub layout: FlatParamLayout,
    pub values: Vec<f32>,
}

impl ClsHead {
    pub fn new(hidden: usize, n_classes: usize, seed: u64) -> Result<Self> {
        if n_classes < 2 {
            return Err(PmpError::Config("classification head needs at least 2 classes".into()));
        }
        let layout = FlatParamLayout::new(vec![
            ("cls_head.weight".into(), vec![hidden, n_classes]),
            ("cls_head.bias".into(), vec![n_classes]),
        ])?;
        let mut values = vec![0.0f32; layout.d()];
        let mut stream = SeededStream::new(seed).split(0xC15);
        for v in &mut values[..hidden * n_classes] {
            *v = (INIT_STD * stream.next_gaussian()) as f32;
        }
        Ok(ClsHead {
            n_classes,
            layout,
            values,
        })
    }
}

/// Low-rank adapters on the four attention projections of every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    pub rank: usize,
    pub alpha: f64,
    pub layout: FlatParamLayout,
    pub values: Vec<f32>,
}

const LORA_TARGETS: [&str; 4] = ["wq", "wk", "wv", "wo"];

impl LoraAdapters {
    /// `A` starts Gaussian with std `1/sqrt(in)`, `B` at zero, so the adapted
    /// model initially equals the base model.
    pub fn new(config: &ModelConfig, rank: usize, alpha: f64, seed: u64) -> Result<Self> {
        let mut specs = Vec::new();
        if rank > 0 {
            for l in 0..config.n_layers {
                for t in LORA_TARGETS {
                    let (din, dout) = lora_dims(config, t);
                    specs.push((format!("lora.{l}.{t}.a"), vec![din, rank]));
                    specs.push((format!("lora.{l}.{t}.b"), vec![rank, dout]));
                }
            }
        }
        let layout = FlatParamLayout::new(specs)?;
        let mut values = vec![0.0f32; layout.d()];
        let mut stream = SeededStream::new(seed).split(0x10_4A);
        for e in layout.entries() {
            if e.name.ends_with(".a") {
                let std = 1.0 / (e.shape[0] as f64).sqrt();
                for v in &mut values[e.range()] {
                    *v = (std * stream.next_gaussian()) as f32;
                }
            }
        }
        Ok(LoraAdapters {
            rank,
            alpha,
            layout,
            values,
        })
    }

    pub fn scale(&self) -> f64 {
        if self.rank == 0 {
            0.0
        } else {
            self.alpha / self.rank as f64
        }
    }
}

fn lora_dims(config: &ModelConfig, target: &str) -> (usize, usize) {
    match target {
        "wk" | "wv" => (config.hidden_size, config.kv_dim()),
        _ => (config.hidden_size, config.hidden_size),
    }
}

/// The base transformer plus optional fine-tuning attachments.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    layout: FlatParamLayout,
    params: Vec<f32>,
    pub head: Option<ClsHead>,
    pub lora: Option<LoraAdapters>,
}

/// Which parameter groups receive gradients in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Trainable {
    pub base: bool,
    pub extras: bool,
}

impl Trainable {
    pub const BASE: Trainable = Trainable {
        base: true,
        extras: false,
    };
    pub const ALL: Trainable = Trainable {
        base: true,
        extras: true,
    };
    pub const EXTRAS: Trainable = Trainable {
        base: false,
        extras: true,
    };
    pub const NONE: Trainable = Trainable {
        base: false,
        extras: false,
    };
}

/// Output of [`Model::forward_hidden`].
#[derive(Clone, Copy, Debug)]
pub struct Decoded {
    pub hidden: Var,
    pub lm_head: Var,
}

/// Builds the model with normal(0, 0.02) matrices and unit norm gains. Each
/// tensor draws from its own sub-stream of `seed`.
pub fn build_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let layout = FlatParamLayout::new(config.param_specs())?;
    let mut params = vec![0.0f32; layout.d()];
    let root = SeededStream::new(seed);
    for (i, e) in layout.entries().iter().enumerate() {
        let mut stream = root.split(i as u64);
        init_tensor(&mut stream, &e.shape, INIT_STD, &mut params[e.range()]);
    }
    Ok(Model {
        config,
        layout,
        params,
        head: None,
        lora: None,
    })
}

impl Model {
    /// Rebuilds a model around an existing flat parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<f32>) -> Result<Self> {
        config.validate()?;
        let layout = FlatParamLayout::new(config.param_specs())?;
        if params.len() != layout.d() {
            return Err(PmpError::Compatibility(format!(
                "parameter vector has length {}, layout expects {}",
                params.len(),
                layout.d()
            )));
        }
        Ok(Model {
            config,
            layout,
            params,
            head: None,
            lora: None,
        })
    }

    pub fn layout(&self) -> &FlatParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f32] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f32] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: &[f32]) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(PmpError::Compatibility(format!(
                "parameter vector has length {}, layout expects {}",
                params.len(),
                self.params.len()
            )));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }

    pub fn attach_head(&mut self, n_classes: usize, seed: u64) -> Result<()> {
        self.head = Some(ClsHead::new(self.config.hidden_size, n_classes, seed)?);
        Ok(())
    }

    pub fn attach_lora(&mut self, rank: usize, alpha: f64, seed: u64) -> Result<()> {
        self.lora = Some(LoraAdapters::new(&self.config, rank, alpha, seed)?);
        Ok(())
    }

    fn tensor(&self, e: &crate::model::LayoutEntry, values: &[f32]) -> Tensor<f32> {
        Tensor::new(e.shape.clone(), values[e.range()].to_vec()).expect("layout shapes are valid")
    }

    fn check_tokens(&self, blocks: &[&[u32]]) -> Result<usize> {
        let t = match blocks.first() {
            Some(b) => b.len(),
            None => return Err(PmpError::Data("empty batch".into())),
        };
        if t == 0 || t > self.config.max_seq_len {
            return Err(PmpError::Data(format!(
                "sequence length {t} outside 1..={}",
                self.config.max_seq_len
            )));
        }
        for (s, block) in blocks.iter().enumerate() {
            if block.len() != t {
                return Err(PmpError::Data(format!(
                    "sequence {s} has length {}, expected {t}",
                    block.len()
                )));
            }
            if let Some(p) = block
                .iter()
                .position(|&tok| tok as usize >= self.config.vocab_size)
            {
                return Err(PmpError::Data(format!(
                    "token {} at position {p} of sequence {s} outside vocabulary of {}",
                    block[p], self.config.vocab_size
                )));
            }
        }
        Ok(t)
    }

    /// Runs the decoder and returns final-normed hidden states `[B*T, hidden]`
    /// together with the node holding the output projection.
    pub fn forward_hidden(
        &self,
        g: &mut Graph<f32>,
        blocks: &[&[u32]],
        trainable: Trainable,
    ) -> Result<Decoded> {
        let t = self.check_tokens(blocks)?;
        let b = blocks.len();
        let cfg = &self.config;
        let (d, hd, h, kvh) = (cfg.hidden_size, cfg.head_dim(), cfg.n_heads, cfg.n_kv_heads);
        let groups = h / kvh;

        let mut vars = std::collections::HashMap::new();
        for e in self.layout.entries() {
            let tensor = self.tensor(e, &self.params);
            let v = if trainable.base {
                g.param(&e.name, tensor)?
            } else {
                g.input(tensor)?
            };
            vars.insert(e.name.clone(), v);
        }
        let mut lora_vars = std::collections::HashMap::new();
        if let Some(lora) = self.lora.as_ref().filter(|l| l.rank > 0) {
            for e in lora.layout.entries() {
                let tensor = self.tensor(e, &lora.values);
                let v = if trainable.extras {
                    g.param(&e.name, tensor)?
                } else {
                    g.input(tensor)?
                };
                lora_vars.insert(e.name.clone(), v);
            }
        }
        let lora_scale = self.lora.as_ref().map_or(0.0, |l| l.scale());
        let p = |name: &str| vars[name];

        let ids: Vec<usize> = blocks.iter().flat_map(|s| s.iter().map(|&x| x as usize)).collect();
        let mut x = g.embedding(p("tok_embeddings"), &ids)?;

        for l in 0..cfg.n_layers {
            let name = |s: &str| format!("layers.{l}.{s}");
            let proj = |g: &mut Graph<f32>, input: Var, target: &str| -> Result<Var> {
                let y = g.matmul(input, p(&name(target)))?;
                let key = format!("lora.{l}.{target}.a");
                match lora_vars.get(&key) {
                    Some(&a) => {
                        let bvar = lora_vars[&format!("lora.{l}.{target}.b")];
                        let low = g.matmul(input, a)?;
                        let up = g.matmul(low, bvar)?;
                        let up = g.scale(up, lora_scale)?;
                        g.add(y, up)
                    }
                    None => Ok(y),
                }
            };

            let hn = g.rms_norm(x, p(&name("attn_norm")), RMS_EPS)?;
            let q = proj(g, hn, "wq")?;
            let k = proj(g, hn, "wk")?;
            let v = proj(g, hn, "wv")?;

            let q = g.reshape(q, &[b, t, h, hd])?;
            let q = g.rope(q, cfg.rope_theta)?;
            let q = g.reshape(q, &[b, t, kvh, groups, hd])?;
            let q = g.permute(q, &[0, 2, 3, 1, 4])?;
            let q = g.reshape(q, &[b * kvh, groups * t, hd])?;

            let k = g.reshape(k, &[b, t, kvh, hd])?;
            let k = g.rope(k, cfg.rope_theta)?;
            let k = g.permute(k, &[0, 2, 3, 1])?;
            let k = g.reshape(k, &[b * kvh, hd, t])?;

            let v = g.reshape(v, &[b, t, kvh, hd])?;
            let v = g.permute(v, &[0, 2, 1, 3])?;
            let v = g.reshape(v, &[b * kvh, t, hd])?;

            let scores = g.matmul(q, k)?;
            let scores = g.scale(scores, 1.0 / (hd as f64).sqrt())?;
            let scores = g.causal_mask_fill(scores, t)?;
            let probs = g.softmax(scores)?;
            let attn = g.matmul(probs, v)?;
            let attn = g.reshape(attn, &[b, kvh, groups, t, hd])?;
            let attn = g.permute(attn, &[0, 3, 1, 2, 4])?;
            let attn = g.reshape(attn, &[b * t, d])?;
            let out = proj(g, attn, "wo")?;
            x = g.add(x, out)?;

            let hn = g.rms_norm(x, p(&name("mlp_norm")), RMS_EPS)?;
            let gate = g.matmul(hn, p(&name("w_gate")))?;
            let gate = g.silu(gate)?;
            let up = g.matmul(hn, p(&name("w_up")))?;
            let act = g.mul(gate, up)?;
            let down = g.matmul(act, p(&name("w_down")))?;
            x = g.add(x, down)?;
        }
        let hidden = g.rms_norm(x, p("final_norm"), RMS_EPS)?;
        Ok(Decoded {
            hidden,
            lm_head: p("lm_head"),
        })
    }

    /// Logits for every position, `[B*T, vocab]`.
    pub fn logits(&self, g: &mut Graph<f32>, blocks: &[&[u32]]) -> Result<Var> {
        let out = self.forward_hidden(g, blocks, Trainable::NONE)?;
        g.matmul(out.hidden, out.lm_head)
    }

    /// Next-token cross-entropy averaged over the `B*(T-1)` predicted
    /// positions of the batch.
    pub fn lm_loss(&self, g: &mut Graph<f32>, blocks: &[&[u32]], trainable: Trainable) -> Result<Var> {
        let t = blocks.first().map_or(0, |b| b.len());
        if t < 2 {
            return Err(PmpError::Data(format!(
                "language-model block needs at least 2 tokens, got {t}"
            )));
        }
        let b = blocks.len();
        let d = self.config.hidden_size;
        let out = self.forward_hidden(g, blocks, trainable)?;
        let hidden = g.reshape(out.hidden, &[b, t, d])?;
        let hidden = g.slice(hidden, 1, 0, t - 1)?;
        let hidden = g.reshape(hidden, &[b * (t - 1), d])?;
        let logits = g.matmul(hidden, out.lm_head)?;
        let targets: Vec<usize> = blocks
            .iter()
            .flat_map(|s| s[1..].iter().map(|&x| x as usize))
            .collect();
        g.cross_entropy_mean(logits, &targets)
    }

    /// Classification cross-entropy of the head applied to each sequence's
    /// final hidden state.
    pub fn cls_loss(
        &self,
        g: &mut Graph<f32>,
        blocks: &[&[u32]],
        labels: &[usize],
        trainable: Trainable,
    ) -> Result<Var> {
        let logits = self.cls_logits(g, blocks, trainable)?;
        if labels.len() != blocks.len() {
            return Err(PmpError::Data(format!(
                "{} labels for {} sequences",
                labels.len(),
                blocks.len()
            )));
        }
        g.cross_entropy_mean(logits, labels)
    }

    /// Head logits `[B, n_classes]`.
    pub fn cls_logits(&self, g: &mut Graph<f32>, blocks: &[&[u32]], trainable: Trainable) -> Result<Var> {
        let head = self
            .head
            .as_ref()
            .ok_or_else(|| PmpError::State("classification head not attached".into()))?;
        let t = blocks.first().map_or(0, |b| b.len());
        let b = blocks.len();
        let d = self.config.hidden_size;
        let out = self.forward_hidden(g, blocks, trainable)?;
        let hidden = g.reshape(out.hidden, &[b, t, d])?;
        let last = g.slice(hidden, 1, t - 1, t)?;
        let last = g.reshape(last, &[b, d])?;
        let mut vars = Vec::new();
        for e in head.layout.entries() {
            let tensor = self.tensor(e, &head.values);
            vars.push(if trainable.extras {
                g.param(&e.name, tensor)?
            } else {
                g.input(tensor)?
            });
        }
        let logits = g.matmul(last, vars[0])?;
        g.add(logits, vars[1])
    }

    /// Mean next-token loss without recording gradients.
    pub fn eval_lm_loss(&self, blocks: &[&[u32]]) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.lm_loss(&mut g, blocks, Trainable::NONE)?;
        Ok(g.value(loss).item())
    }

    /// Argmax class per sequence.
    pub fn predict(&self, blocks: &[&[u32]]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let logits = self.cls_logits(&mut g, blocks, Trainable::NONE)?;
        let t = g.value(logits);
        let c = t.shape()[1];
        Ok(t.data()
            .chunks(c)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}
