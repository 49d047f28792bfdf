//! Factorized space-time masked transformers over part token grids.
//!
//! Each of the four part rows is prefixed with one text token, so a sample
//! of `n` steps is a `4 × (n+1)` lattice flattened row-major (`p·(n+1)+t`,
//! `t = 0` being the text token). Every layer runs spatial attention (within
//! a time step, plus the row's own text token), then temporal attention
//! (within a part row), then a feed-forward block, all pre-norm.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::nn::{
    read_checkpoint, write_checkpoint, Adam, AttnGroup, CheckpointError, CheckpointMap, ParamGrads, ParamStore,
    Tape, Tensor, Var,
};
use crate::spamvq::TokenGrid;

#[derive(Debug, Error)]
pub enum GenError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("tau must lie in [0, 1], got {0}")]
    Tau(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("sequence of {n} steps exceeds the model's maximum of {max}")]
    TooLong { n: usize, max: usize },
    #[error("residual layer {j} out of range 1..={v}")]
    LayerRange { j: usize, v: usize },
    #[error("base layer still contains MASK at part {part}, step {step}")]
    MaskInBase { part: usize, step: usize },
    #[error("token {token} out of range for codebook of size {k}")]
    TokenRange { token: u32, k: usize },
    #[error("text embedding has length {actual}, expected {expected}")]
    TextDim { expected: usize, actual: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("text embedding failed: {0}")]
    Embed(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub steps: usize,
    pub cfg_base: f64,
    pub cfg_res: f64,
    pub text_dim: usize,
    /// Longest token sequence the positional table covers.
    pub max_len: usize,
    pub uncond_prob: f64,
    pub lr: f64,
    pub warmup: usize,
    /// Codebook size `K`; `K` doubles as the MASK token.
    pub codes: usize,
    /// Quantization layers including the base layer.
    pub quant_layers: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl GenConfig {
    pub fn desk() -> Self {
        Self {
            layers: 2,
            heads: 2,
            model_dim: 32,
            ff_dim: 64,
            steps: 10,
            cfg_base: 4.0,
            cfg_res: 5.0,
            text_dim: 32,
            max_len: 64,
            uncond_prob: 0.1,
            lr: 2e-3,
            warmup: 100,
            codes: 32,
            quant_layers: 3,
        }
    }

    pub fn validate(&self) -> Result<(), GenError> {
        let bad = |m: &str| Err(GenError::Config(m.to_string()));
        if self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return bad("model_dim must be divisible by heads");
        }
        if self.steps < 1 {
            return bad("steps must be at least 1");
        }
        if self.layers < 1 || self.ff_dim < 1 || self.text_dim < 1 || self.max_len < 1 {
            return bad("layers, ff_dim, text_dim and max_len must be positive");
        }
        if self.codes < 2 || self.quant_layers < 1 {
            return bad("need at least 2 codes and 1 quantization layer");
        }
        if !(0.0..1.0).contains(&self.uncond_prob) {
            return bad("uncond_prob must lie in [0, 1)");
        }
        Ok(())
    }

    /// Residual layer count `V`.
    pub fn residual_layers(&self) -> usize {
        self.quant_layers - 1
    }

    fn to_entries(&self) -> Vec<(String, Tensor)> {
        [
            ("cfg.layers", self.layers as f64),
            ("cfg.heads", self.heads as f64),
            ("cfg.model_dim", self.model_dim as f64),
            ("cfg.ff_dim", self.ff_dim as f64),
            ("cfg.steps", self.steps as f64),
            ("cfg.cfg_base", self.cfg_base),
            ("cfg.cfg_res", self.cfg_res),
            ("cfg.text_dim", self.text_dim as f64),
            ("cfg.max_len", self.max_len as f64),
            ("cfg.uncond_prob", self.uncond_prob),
            ("cfg.lr", self.lr),
            ("cfg.warmup", self.warmup as f64),
            ("cfg.codes", self.codes as f64),
            ("cfg.quant_layers", self.quant_layers as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), Tensor::scalar(v)))
        .collect()
    }

    fn from_map(m: &mut CheckpointMap) -> Result<Self, GenError> {
        let cfg = Self {
            layers: m.scalar("cfg.layers")? as usize,
            heads: m.scalar("cfg.heads")? as usize,
            model_dim: m.scalar("cfg.model_dim")? as usize,
            ff_dim: m.scalar("cfg.ff_dim")? as usize,
            steps: m.scalar("cfg.steps")? as usize,
            cfg_base: m.scalar("cfg.cfg_base")?,
            cfg_res: m.scalar("cfg.cfg_res")?,
            text_dim: m.scalar("cfg.text_dim")? as usize,
            max_len: m.scalar("cfg.max_len")? as usize,
            uncond_prob: m.scalar("cfg.uncond_prob")?,
            lr: m.scalar("cfg.lr")?,
            warmup: m.scalar("cfg.warmup")? as usize,
            codes: m.scalar("cfg.codes")? as usize,
            quant_layers: m.scalar("cfg.quant_layers")? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fraction of tokens still masked at normalized step `tau`.
pub fn gamma(tau: f64) -> Result<f64, GenError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(GenError::Tau(tau));
    }
    if tau == 1.0 {
        return Ok(0.0);
    }
    Ok((PI * tau / 2.0).cos())
}

/// `ceil(total · γ(τ))`, with `τ` clamped to `[0, 1]`.
pub fn mask_count(total: usize, tau: f64) -> usize {
    let g = gamma(tau.clamp(0.0, 1.0)).unwrap_or(0.0);
    ((total as f64 * g).ceil() as usize).min(total)
}

/// Source of fixed-length text embeddings; `None` is the null embedding.
pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Option<Vec<f32>>, GenError>;
}

/// Offline embedder: signed feature hashing of character trigrams and word
/// unigrams/bigrams, L2-normalized.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl HashEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    fn add_feature(&self, v: &mut [f64], feature: &[u8], weight: f64) {
        use std::hash::Hasher;
        let mut h = fnv::FnvHasher::default();
        h.write(feature);
        let x = h.finish();
        let idx = (x % self.dim as u64) as usize;
        let sign = if (x >> 63) & 1 == 1 { -1.0 } else { 1.0 };
        v[idx] += sign * weight;
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Option<Vec<f32>>, GenError> {
        if text.is_empty() {
            return Ok(None);
        }
        let mut v = vec![0.0f64; self.dim];
        let padded: Vec<u8> = [b"\x02".as_slice(), text.as_bytes(), b"\x03".as_slice()].concat();
        for w in padded.windows(3) {
            self.add_feature(&mut v, w, 1.0);
        }
        if padded.len() < 3 {
            self.add_feature(&mut v, &padded, 1.0);
        }
        let lower = text.to_lowercase();
        let words: Vec<&str> = lower.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).collect();
        for w in &words {
            self.add_feature(&mut v, format!("w:{w}").as_bytes(), 2.0);
        }
        for pair in words.windows(2) {
            self.add_feature(&mut v, format!("b:{} {}", pair[0], pair[1]).as_bytes(), 1.5);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            v[0] = 1.0;
        } else {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        Ok(Some(v.into_iter().map(|x| x as f32).collect()))
    }
}

pub fn embed_text(prompt: &str, provider: &dyn TextEmbedder) -> Result<Option<Vec<f32>>, GenError> {
    provider.embed(prompt)
}

/// Global and per-part text conditioning. Absent entries fall back to the
/// global embedding, then to the learned null token.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TextBundle {
    pub global: Option<Vec<f32>>,
    pub locals: [Option<Vec<f32>>; 4],
}

impl TextBundle {
    pub fn unconditional() -> Self {
        Self::default()
    }

    pub fn global(v: Option<Vec<f32>>) -> Self {
        Self {
            global: v,
            locals: Default::default(),
        }
    }

    pub fn embed(global: &str, locals: [Option<&str>; 4], provider: &dyn TextEmbedder) -> Result<Self, GenError> {
        let mut out = Self::global(provider.embed(global)?);
        for (slot, text) in out.locals.iter_mut().zip(locals) {
            if let Some(t) = text {
                *slot = provider.embed(t)?;
            }
        }
        Ok(out)
    }

    pub fn token_for(&self, part: usize) -> Option<&[f32]> {
        self.locals[part].as_deref().or(self.global.as_deref())
    }

    pub fn is_unconditional(&self) -> bool {
        (0..4).all(|p| self.token_for(p).is_none())
    }

    pub fn validate(&self, dim: usize) -> Result<(), GenError> {
        for v in self.locals.iter().chain(std::iter::once(&self.global)).flatten() {
            if v.len() != dim {
                return Err(GenError::TextDim {
                    expected: dim,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(GenError::Embed("non-finite text embedding".into()));
            }
        }
        Ok(())
    }
}

/// `4 × n × K` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub n: usize,
    pub k: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn at(&self, part: usize, t: usize) -> &[f64] {
        let o = (part * self.n + t) * self.k;
        &self.data[o..o + self.k]
    }
}

/// `(1+s)·ω_c − s·ω_u`, elementwise.
pub fn cfg_logits(cond: &Logits, uncond: &Logits, s: f64) -> Result<Logits, GenError> {
    if (cond.n, cond.k) != (uncond.n, uncond.k) || cond.data.len() != uncond.data.len() {
        return Err(GenError::Shape("conditional and unconditional logits differ in shape".into()));
    }
    if s == 0.0 {
        return Ok(cond.clone());
    }
    let data = cond.data.iter().zip(&uncond.data).map(|(c, u)| (1.0 + s) * c - s * u).collect();
    Ok(Logits {
        n: cond.n,
        k: cond.k,
        data,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Base,
    Residual,
}

impl Kind {
    fn prefix(self) -> &'static str {
        match self {
            Kind::Base => "base",
            Kind::Residual => "res",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    Spatial,
    Temporal,
}

/// Token input of one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum TokenInput<'a> {
    /// `4 × n` base tokens, MASK allowed.
    Base(&'a [u32]),
    /// Tokens of layers `0..j`, each `4 × n`; predicts layer `j`.
    Residual { below: &'a [&'a [u32]], j: usize },
}

/// Attention neighbourhoods for `n` steps in the `4 × (n+1)` lattice.
pub fn attention_groups(n: usize) -> (Arc<Vec<AttnGroup>>, Arc<Vec<AttnGroup>>) {
    let w = n + 1;
    let mut spatial = vec![AttnGroup::clique((0..4).map(|p| p * w).collect())];
    for t in 1..w {
        for p in 0..4 {
            let mut keys: Vec<usize> = (0..4).map(|q| q * w + t).collect();
            keys.push(p * w);
            spatial.push(AttnGroup {
                queries: vec![p * w + t],
                keys,
            });
        }
    }
    let temporal = (0..4).map(|p| AttnGroup::clique((p * w..(p + 1) * w).collect())).collect();
    (Arc::new(spatial), Arc::new(temporal))
}

/// Masked positions and text dropout for one base training sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BasePlan {
    /// Flat `p·n + t` positions to mask.
    pub masked: Vec<usize>,
    pub drop_text: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResPlan {
    pub j: usize,
    pub drop_text: bool,
}

/// A tokenized clip with its conditioning.
#[derive(Debug, Clone)]
pub struct Sample {
    pub grid: TokenGrid,
    pub text: TextBundle,
}

/// Base and residual transformers sharing one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct GenModel {
    pub cfg: GenConfig,
    pub base: ParamStore,
    pub res: ParamStore,
}

fn linear_param(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, bias: bool, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::uniform(fan_in, fan_out, bound, rng));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(1, fan_out));
    }
}

fn ln_param(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.g"), Tensor::from_vec(1, dim, vec![1.0; dim]));
    store.insert(format!("{name}.b"), Tensor::zeros(1, dim));
}

fn build_params(cfg: &GenConfig, kind: Kind, rng: &mut impl Rng) -> ParamStore {
    let pre = kind.prefix();
    let dm = cfg.model_dim;
    let emb = 0.1;
    let mut s = ParamStore::new();
    match kind {
        Kind::Base => {
            s.insert(format!("{pre}.tok_emb"), Tensor::uniform(cfg.codes + 1, dm, emb, rng));
        }
        Kind::Residual => {
            for u in 0..cfg.residual_layers() {
                s.insert(format!("{pre}.emb{u}"), Tensor::uniform(cfg.codes, dm, emb, rng));
            }
            s.insert(
                format!("{pre}.layer_emb"),
                Tensor::uniform(cfg.residual_layers().max(1), dm, emb, rng),
            );
        }
    }
    linear_param(&mut s, &format!("{pre}.text_proj"), cfg.text_dim, dm, true, rng);
    s.insert(format!("{pre}.null_text"), Tensor::uniform(1, dm, emb, rng));
    s.insert(format!("{pre}.time_pos"), Tensor::uniform(cfg.max_len + 1, dm, emb, rng));
    s.insert(format!("{pre}.part_emb"), Tensor::uniform(4, dm, emb, rng));
    for l in 0..cfg.layers {
        let lp = format!("{pre}.l{l}");
        for (ln, att) in [("ln1", "sp"), ("ln2", "tp")] {
            ln_param(&mut s, &format!("{lp}.{ln}"), dm);
            for m in ["q", "k", "v", "o"] {
                linear_param(&mut s, &format!("{lp}.{att}.{m}"), dm, dm, false, rng);
            }
        }
        ln_param(&mut s, &format!("{lp}.ln3"), dm);
        linear_param(&mut s, &format!("{lp}.ff1"), dm, cfg.ff_dim, true, rng);
        linear_param(&mut s, &format!("{lp}.ff2"), cfg.ff_dim, dm, true, rng);
    }
    ln_param(&mut s, &format!("{pre}.ln_f"), dm);
    linear_param(&mut s, &format!("{pre}.head"), dm, cfg.codes, true, rng);
    s
}

/// Row of position `(part, t)` in the flattened lattice.
pub fn lattice_row(n: usize, part: usize, t: usize) -> usize {
    part * (n + 1) + t + 1
}

impl GenModel {
    pub fn new(cfg: GenConfig, seed: u64) -> Result<Self, GenError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = build_params(&cfg, Kind::Base, &mut rng);
        let res = build_params(&cfg, Kind::Residual, &mut rng);
        Ok(Self { cfg, base, res })
    }

    pub fn store(&self, kind: Kind) -> &ParamStore {
        match kind {
            Kind::Base => &self.base,
            Kind::Residual => &self.res,
        }
    }

    pub fn store_mut(&mut self, kind: Kind) -> &mut ParamStore {
        match kind {
            Kind::Base => &mut self.base,
            Kind::Residual => &mut self.res,
        }
    }

    /// Zero the output projection of one attention sub-layer in every layer,
    /// turning that residual branch into the identity.
    pub fn disable_sublayer(&mut self, kind: Kind, which: Sublayer) {
        let tag = match which {
            Sublayer::Spatial => "sp",
            Sublayer::Temporal => "tp",
        };
        let pre = kind.prefix();
        for l in 0..self.cfg.layers {
            let t = self.store_mut(kind).by_name_mut(&format!("{pre}.l{l}.{tag}.o.w")).unwrap();
            t.data.fill(0.0);
        }
    }

    fn check_tokens(&self, tokens: &[u32], allow_mask: bool) -> Result<(), GenError> {
        let limit = if allow_mask { self.cfg.codes } else { self.cfg.codes - 1 };
        if let Some(&t) = tokens.iter().find(|&&t| t as usize > limit) {
            return Err(GenError::TokenRange {
                token: t,
                k: self.cfg.codes,
            });
        }
        Ok(())
    }

    fn validate_input(&self, input: &TokenInput, text: &TextBundle) -> Result<usize, GenError> {
        text.validate(self.cfg.text_dim)?;
        let len = match input {
            TokenInput::Base(t) => {
                self.check_tokens(t, true)?;
                t.len()
            }
            TokenInput::Residual { below, j } => {
                let v = self.cfg.residual_layers();
                if *j < 1 || *j > v || below.len() != *j {
                    return Err(GenError::LayerRange { j: *j, v });
                }
                for b in below.iter() {
                    self.check_tokens(b, false)?;
                    if b.len() != below[0].len() {
                        return Err(GenError::Shape("residual layers differ in length".into()));
                    }
                }
                below[0].len()
            }
        };
        if len % 4 != 0 || len == 0 {
            return Err(GenError::Shape(format!("token count {len} is not a positive multiple of 4")));
        }
        let n = len / 4;
        if n > self.cfg.max_len {
            return Err(GenError::TooLong { n, max: self.cfg.max_len });
        }
        Ok(n)
    }

    /// Forward pass; returns the `4(n+1) × K` logits node.
    pub fn forward(&self, tape: &mut Tape, input: TokenInput, text: &TextBundle) -> Result<Var, GenError> {
        let n = self.validate_input(&input, text)?;
        let kind = match input {
            TokenInput::Base(_) => Kind::Base,
            TokenInput::Residual { .. } => Kind::Residual,
        };
        let store = self.store(kind);
        let pre = kind.prefix();
        let p = |tape: &mut Tape, name: &str| tape.param_named(store, &format!("{pre}.{name}"));
        let w = n + 1;
        let rows = 4 * w;

        let null = p(tape, "null_text");
        let text_rows = if text.is_unconditional() {
            tape.gather(null, &[0, 0, 0, 0])
        } else {
            let td = self.cfg.text_dim;
            let mut m = Tensor::zeros(4, td);
            let mut idx = [4usize; 4];
            for (part, slot) in idx.iter_mut().enumerate() {
                if let Some(v) = text.token_for(part) {
                    for (d, x) in m.row_mut(part).iter_mut().zip(v) {
                        *d = *x as f64;
                    }
                    *slot = part;
                }
            }
            let e = tape.constant(m);
            let pw = p(tape, "text_proj.w");
            let pb = p(tape, "text_proj.b");
            let proj = tape.linear(e, pw, Some(pb));
            let both = tape.concat_rows(&[proj, null]);
            tape.gather(both, &idx)
        };

        let tok_rows = match input {
            TokenInput::Base(t) => {
                let table = p(tape, "tok_emb");
                let idx: Vec<usize> = t.iter().map(|&x| x as usize).collect();
                tape.gather(table, &idx)
            }
            TokenInput::Residual { below, j } => {
                let mut acc: Option<Var> = None;
                for (u, layer) in below.iter().enumerate() {
                    let table = p(tape, &format!("emb{u}"));
                    let idx: Vec<usize> = layer.iter().map(|&x| x as usize).collect();
                    let e = tape.gather(table, &idx);
                    acc = Some(match acc {
                        Some(a) => tape.add(a, e),
                        None => e,
                    });
                }
                let acc = acc.expect("at least one layer below");
                let le = p(tape, "layer_emb");
                let lrow = tape.gather(le, &vec![j - 1; 4 * n]);
                tape.add(acc, lrow)
            }
        };

        let stacked = tape.concat_rows(&[text_rows, tok_rows]);
        let mut perm = Vec::with_capacity(rows);
        let mut time_idx = Vec::with_capacity(rows);
        let mut part_idx = Vec::with_capacity(rows);
        for part in 0..4 {
            for t in 0..w {
                perm.push(if t == 0 { part } else { 4 + part * n + t - 1 });
                time_idx.push(t);
                part_idx.push(part);
            }
        }
        let mut x = tape.gather(stacked, &perm);
        let tp = p(tape, "time_pos");
        let tpos = tape.gather(tp, &time_idx);
        x = tape.add(x, tpos);
        let pe = p(tape, "part_emb");
        let ppos = tape.gather(pe, &part_idx);
        x = tape.add(x, ppos);

        let (spatial, temporal) = attention_groups(n);
        let heads = self.cfg.heads;
        for l in 0..self.cfg.layers {
            for (ln, att, groups) in [("ln1", "sp", &spatial), ("ln2", "tp", &temporal)] {
                let g = p(tape, &format!("l{l}.{ln}.g"));
                let b = p(tape, &format!("l{l}.{ln}.b"));
                let h = tape.layer_norm(x, g, b);
                let wq = p(tape, &format!("l{l}.{att}.q.w"));
                let wk = p(tape, &format!("l{l}.{att}.k.w"));
                let wv = p(tape, &format!("l{l}.{att}.v.w"));
                let wo = p(tape, &format!("l{l}.{att}.o.w"));
                let q = tape.matmul(h, wq);
                let k = tape.matmul(h, wk);
                let v = tape.matmul(h, wv);
                let a = tape.grouped_attention(q, k, v, heads, groups.clone());
                let o = tape.matmul(a, wo);
                x = tape.add(x, o);
            }
            let g = p(tape, &format!("l{l}.ln3.g"));
            let b = p(tape, &format!("l{l}.ln3.b"));
            let h = tape.layer_norm(x, g, b);
            let w1 = p(tape, &format!("l{l}.ff1.w"));
            let b1 = p(tape, &format!("l{l}.ff1.b"));
            let w2 = p(tape, &format!("l{l}.ff2.w"));
            let b2 = p(tape, &format!("l{l}.ff2.b"));
            let f = tape.linear(h, w1, Some(b1));
            let f = tape.relu(f);
            let f = tape.linear(f, w2, Some(b2));
            x = tape.add(x, f);
        }
        let g = p(tape, "ln_f.g");
        let b = p(tape, "ln_f.b");
        let h = tape.layer_norm(x, g, b);
        let hw = p(tape, "head.w");
        let hb = p(tape, "head.b");
        Ok(tape.linear(h, hw, Some(hb)))
    }

    fn logits_of(&self, input: TokenInput, text: &TextBundle) -> Result<Logits, GenError> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, input, text)?;
        let all = tape.value(out);
        let k = self.cfg.codes;
        let n = all.rows / 4 - 1;
        let mut data = Vec::with_capacity(4 * n * k);
        for part in 0..4 {
            for t in 0..n {
                data.extend_from_slice(all.row(lattice_row(n, part, t)));
            }
        }
        Ok(Logits { n, k, data })
    }

    /// Logits for every base position given a partially masked `4 × n` row set.
    pub fn base_forward(&self, base: &[u32], text: &TextBundle) -> Result<Logits, GenError> {
        self.logits_of(TokenInput::Base(base), text)
    }

    /// Logits for layer `j` given layers `0..j` of `grid`.
    pub fn residual_forward(&self, grid: &TokenGrid, j: usize, text: &TextBundle) -> Result<Logits, GenError> {
        let v = self.cfg.residual_layers();
        if j < 1 || j > v || j >= grid.layers {
            return Err(GenError::LayerRange { j, v });
        }
        let below: Vec<&[u32]> = (0..j).map(|u| grid.layer(u)).collect();
        self.logits_of(TokenInput::Residual { below: &below, j }, text)
    }

    /// Iteratively fill the MASK positions of `base` (a `4 × n` row set);
    /// positions that are not MASK on entry are never changed.
    pub fn fill_base(&self, base: &[u32], text: &TextBundle, rng: &mut impl Rng) -> Result<Vec<u32>, GenError> {
        let mask = self.cfg.codes as u32;
        let mut cur = base.to_vec();
        let initial = cur.iter().filter(|&&t| t == mask).count();
        if initial == 0 {
            self.validate_input(&TokenInput::Base(&cur), text)?;
            return Ok(cur);
        }
        let null = TextBundle::unconditional();
        let steps = self.cfg.steps;
        let n = cur.len() / 4;
        for k in 1..=steps {
            let tau = k as f64 / steps as f64;
            let cond = self.base_forward(&cur, text)?;
            let uncond = self.base_forward(&cur, &null)?;
            let g = cfg_logits(&cond, &uncond, self.cfg.cfg_base)?;
            let temp = if steps == 1 {
                0.0
            } else {
                1.0 - (k - 1) as f64 / (steps - 1) as f64
            };
            let mut cands: Vec<(usize, u32, f64)> = Vec::new();
            for (pos, &tok) in cur.iter().enumerate() {
                if tok != mask {
                    continue;
                }
                let row = g.at(pos / n, pos % n);
                let probs = softmax(row, 1.0);
                let pick = if temp <= 0.0 {
                    argmax(row)
                } else {
                    sample_index(&softmax(row, temp), rng.gen::<f64>())
                };
                cands.push((pos, pick as u32, probs[pick]));
            }
            let keep_masked = if k == steps { 0 } else { mask_count(initial, tau) };
            let decide = cands.len().saturating_sub(keep_masked);
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(pos, tok, _) in &cands[..decide] {
                cur[pos] = tok;
            }
        }
        Ok(cur)
    }

    /// Fresh base-layer generation of `n` steps.
    pub fn generate_base(&self, text: &TextBundle, n: usize, seed: u64) -> Result<Vec<u32>, GenError> {
        let start = vec![self.cfg.codes as u32; 4 * n];
        self.fill_base(&start, text, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Predict residual layers `1..=V` in order for the cells `p·n + t`
    /// where `cells` is true; other cells keep their tokens.
    pub fn regenerate_residuals(
        &self,
        grid: &TokenGrid,
        text: &TextBundle,
        cells: &[bool],
    ) -> Result<TokenGrid, GenError> {
        let mask = grid.mask();
        for part in 0..4 {
            for t in 0..grid.n {
                if grid.get(0, part, t) == mask {
                    return Err(GenError::MaskInBase { part, step: t });
                }
            }
        }
        if cells.len() != 4 * grid.n {
            return Err(GenError::Shape("cell selector length differs from 4·n".into()));
        }
        let n = grid.n;
        let mut out = grid.clone();
        let null = TextBundle::unconditional();
        for j in 1..grid.layers {
            let cond = self.residual_forward(&out, j, text)?;
            let uncond = self.residual_forward(&out, j, &null)?;
            let g = cfg_logits(&cond, &uncond, self.cfg.cfg_res)?;
            for (pos, &sel) in cells.iter().enumerate() {
                if sel {
                    out.set(j, pos / n, pos % n, argmax(g.at(pos / n, pos % n)) as u32);
                }
            }
        }
        Ok(out)
    }

    pub fn generate_residuals(&self, grid: &TokenGrid, text: &TextBundle) -> Result<TokenGrid, GenError> {
        self.regenerate_residuals(grid, text, &vec![true; 4 * grid.n])
    }

    /// Base then residual generation into a complete grid.
    pub fn generate(&self, text: &TextBundle, n: usize, seed: u64) -> Result<TokenGrid, GenError> {
        let base = self.generate_base(text, n, seed)?;
        let mut grid = TokenGrid::masked(self.cfg.quant_layers, n, self.cfg.codes);
        grid.layer_mut(0).copy_from_slice(&base);
        self.generate_residuals(&grid, text)
    }

    pub fn plan_base(&self, n: usize, rng: &mut impl Rng) -> BasePlan {
        let total = 4 * n;
        let tau: f64 = rng.gen();
        let count = mask_count(total, tau).max(1).min(total);
        let mut masked = rand::seq::index::sample(rng, total, count).into_vec();
        masked.sort_unstable();
        let drop_text = rng.gen::<f64>() < self.cfg.uncond_prob;
        BasePlan { masked, drop_text }
    }

    pub fn plan_res(&self, rng: &mut impl Rng) -> ResPlan {
        let v = self.cfg.residual_layers();
        let j = if v == 0 { 0 } else { rng.gen_range(1..=v) };
        let drop_text = rng.gen::<f64>() < self.cfg.uncond_prob;
        ResPlan { j, drop_text }
    }

    /// Masked-token NLL of one sample (summed over masked positions divided
    /// by their count) and its gradient.
    pub fn base_sample_grad(&self, s: &Sample, plan: &BasePlan) -> Result<(f64, ParamGrads, usize), GenError> {
        let base = s.grid.layer(0);
        let n = s.grid.n;
        let mut input = base.to_vec();
        for &pos in &plan.masked {
            input[pos] = self.cfg.codes as u32;
        }
        let text = if plan.drop_text {
            TextBundle::unconditional()
        } else {
            s.text.clone()
        };
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, TokenInput::Base(&input), &text)?;
        let targets: Vec<(usize, usize)> = plan
            .masked
            .iter()
            .map(|&pos| (lattice_row(n, pos / n, pos % n), base[pos] as usize))
            .collect();
        let scale = if targets.is_empty() { 0.0 } else { 1.0 / targets.len() as f64 };
        let loss = tape.cross_entropy(logits, &targets, scale);
        let lv = tape.value(loss).data[0];
        let lt = tape.value(logits);
        let correct = targets.iter().filter(|(r, c)| argmax(lt.row(*r)) == *c).count();
        let grads = tape.backward(loss).param_grads(&tape, &self.base);
        Ok((lv, grads, correct))
    }

    /// NLL over all positions of layer `plan.j` and its gradient.
    pub fn res_sample_grad(&self, s: &Sample, plan: &ResPlan) -> Result<(f64, ParamGrads), GenError> {
        let v = self.cfg.residual_layers();
        if plan.j < 1 || plan.j > v || plan.j >= s.grid.layers {
            return Err(GenError::LayerRange { j: plan.j, v });
        }
        let n = s.grid.n;
        let below: Vec<&[u32]> = (0..plan.j).map(|u| s.grid.layer(u)).collect();
        let text = if plan.drop_text {
            TextBundle::unconditional()
        } else {
            s.text.clone()
        };
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, TokenInput::Residual { below: &below, j: plan.j }, &text)?;
        let layer = s.grid.layer(plan.j);
        let targets: Vec<(usize, usize)> = (0..4 * n)
            .map(|pos| (lattice_row(n, pos / n, pos % n), layer[pos] as usize))
            .collect();
        let loss = tape.cross_entropy(logits, &targets, 1.0 / targets.len() as f64);
        let lv = tape.value(loss).data[0];
        let grads = tape.backward(loss).param_grads(&tape, &self.res);
        Ok((lv, grads))
    }

    /// Batch-mean base loss and gradient for explicit plans.
    pub fn base_batch_grad(&self, batch: &[Sample], plans: &[BasePlan]) -> Result<(f64, ParamGrads, f64), GenError> {
        if batch.is_empty() {
            return Err(GenError::EmptyBatch);
        }
        let results: Vec<_> = batch
            .par_iter()
            .zip(plans.par_iter())
            .map(|(s, p)| self.base_sample_grad(s, p))
            .collect();
        let mut grads = ParamGrads::zeros_like(&self.base);
        let mut loss = 0.0;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (r, p) in results.into_iter().zip(plans) {
            let (l, g, c) = r?;
            loss += l;
            grads.accumulate(&g);
            correct += c;
            total += p.masked.len();
        }
        let b = batch.len() as f64;
        grads.scale(1.0 / b);
        Ok((loss / b, grads, correct as f64 / total.max(1) as f64))
    }

    pub fn res_batch_grad(&self, batch: &[Sample], plans: &[ResPlan]) -> Result<(f64, ParamGrads), GenError> {
        if batch.is_empty() {
            return Err(GenError::EmptyBatch);
        }
        let results: Vec<_> = batch
            .par_iter()
            .zip(plans.par_iter())
            .map(|(s, p)| self.res_sample_grad(s, p))
            .collect();
        let mut grads = ParamGrads::zeros_like(&self.res);
        let mut loss = 0.0;
        for r in results {
            let (l, g) = r?;
            loss += l;
            grads.accumulate(&g);
        }
        let b = batch.len() as f64;
        grads.scale(1.0 / b);
        Ok((loss / b, grads))
    }

    /// One optimizer step of the base transformer. Returns `(loss, masked accuracy)`.
    pub fn train_base_step(&mut self, batch: &[Sample], opt: &mut Adam, rng: &mut impl Rng) -> Result<(f64, f64), GenError> {
        let plans: Vec<BasePlan> = batch.iter().map(|s| self.plan_base(s.grid.n, rng)).collect();
        let (loss, grads, acc) = self.base_batch_grad(batch, &plans)?;
        if !loss.is_finite() {
            return Err(GenError::NonFiniteLoss);
        }
        opt.update(&mut self.base, &grads);
        Ok((loss, acc))
    }

    /// One optimizer step of the residual transformer. With no residual
    /// layers there is nothing to train and the loss is zero.
    pub fn train_res_step(&mut self, batch: &[Sample], opt: &mut Adam, rng: &mut impl Rng) -> Result<f64, GenError> {
        if self.cfg.residual_layers() == 0 {
            return Ok(0.0);
        }
        let plans: Vec<ResPlan> = batch.iter().map(|_| self.plan_res(rng)).collect();
        let (loss, grads) = self.res_batch_grad(batch, &plans)?;
        if !loss.is_finite() {
            return Err(GenError::NonFiniteLoss);
        }
        opt.update(&mut self.res, &grads);
        Ok(loss)
    }

    /// Conditional argmax accuracy on freshly drawn masks, `rounds` draws per
    /// sample.
    pub fn masked_accuracy(&self, batch: &[Sample], rounds: usize, rng: &mut impl Rng) -> Result<f64, GenError> {
        let mut correct = 0usize;
        let mut total = 0usize;
        for s in batch {
            for _ in 0..rounds {
                let mut plan = self.plan_base(s.grid.n, rng);
                plan.drop_text = false;
                let (_, _, c) = self.base_sample_grad(s, &plan)?;
                correct += c;
                total += plan.masked.len();
            }
        }
        Ok(correct as f64 / total.max(1) as f64)
    }

    pub fn optimizers(&self) -> (Adam, Adam) {
        (
            Adam::new(&self.base, self.cfg.lr, self.cfg.warmup),
            Adam::new(&self.res, self.cfg.lr, self.cfg.warmup),
        )
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.cfg.to_entries();
        for store in [&self.base, &self.res] {
            for (_, name, t) in store.iter() {
                out.push((name.to_string(), t.clone()));
            }
        }
        out
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self, GenError> {
        let mut map = CheckpointMap::new(entries);
        let cfg = GenConfig::from_map(&mut map)?;
        let mut model = GenModel::new(cfg, 0)?;
        for kind in [Kind::Base, Kind::Residual] {
            let names: Vec<(String, (usize, usize))> = model
                .store(kind)
                .iter()
                .map(|(_, n, t)| (n.to_string(), t.shape()))
                .collect();
            for (name, (r, c)) in names {
                *model.store_mut(kind).by_name_mut(&name).unwrap() = map.take_shaped(&name, r, c)?;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), GenError> {
        Ok(write_checkpoint(path, &self.to_entries())?)
    }

    pub fn load(path: &Path) -> Result<Self, GenError> {
        Self::from_entries(read_checkpoint(path)?)
    }
}

fn softmax(row: &[f64], temp: f64) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - mx) / temp).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// First index of the maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_index(probs: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}
