//! Part-wise residual VQ-VAE: one convolutional encoder and one residual
//! quantizer stack per body part, and a single decoder that reconstructs the
//! whole body from the concatenated part latents (order LU, RU, LL, RL).

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::motiondata::{
    four_part_partition, slice_part, standard_layout, MotionError, MotionSequence, Part, PartMotion,
    PartitionScheme, FEATURE_DIM,
};
use crate::nn::{
    read_checkpoint, write_checkpoint, Adam, CheckpointError, CheckpointMap, ParamGrads, ParamStore, Tape,
    Tensor, Var,
};

#[derive(Debug, Error)]
pub enum VqError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("codebook is empty")]
    EmptyCodebook,
    #[error("expected {expected} codebooks, got {actual}")]
    LayerCount { expected: usize, actual: usize },
    #[error("token grid contains MASK at layer {layer}, part {part}, step {step}")]
    MaskInGrid { layer: usize, part: usize, step: usize },
    #[error("token {token} out of range for codebook of size {k}")]
    TokenRange { token: u32, k: usize },
    #[error("non-finite loss")]
    NonFiniteLoss,
    #[error("empty batch")]
    EmptyBatch,
    #[error("batch clips must share length, got {0} and {1}")]
    RaggedBatch(usize, usize),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RvqConfig {
    /// Total quantization layers, base included.
    pub num_layers: usize,
    pub codes_per_book: usize,
    pub code_dim: usize,
    /// Temporal downsampling factor; a power of two.
    pub downscale: usize,
    pub quant_dropout: f64,
    pub beta: f64,
    pub ema_decay: f64,
    pub reset_threshold: f64,
    /// Channel width of the convolutional stacks.
    pub width: usize,
    pub lr: f64,
    pub warmup: usize,
}

impl Default for RvqConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RvqConfig {
    pub fn desk() -> Self {
        Self {
            num_layers: 3,
            codes_per_book: 32,
            code_dim: 16,
            downscale: 4,
            quant_dropout: 0.2,
            beta: 0.02,
            ema_decay: 0.99,
            reset_threshold: 1.0,
            width: 32,
            lr: 2e-3,
            warmup: 100,
        }
    }

    pub fn validate(&self) -> Result<(), VqError> {
        let bad = |m: &str| Err(VqError::Config(m.to_string()));
        if self.num_layers < 1 {
            return bad("num_layers must be at least 1");
        }
        if self.codes_per_book < 2 {
            return bad("codes_per_book must be at least 2");
        }
        if self.code_dim < 1 || self.width < 1 {
            return bad("code_dim and width must be positive");
        }
        if !self.downscale.is_power_of_two() {
            return bad("downscale must be a power of two");
        }
        if !(0.0..1.0).contains(&self.quant_dropout) {
            return bad("quant_dropout must lie in [0, 1)");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("ema_decay must lie in (0, 1)");
        }
        if self.beta < 0.0 || self.reset_threshold < 0.0 {
            return bad("beta and reset_threshold must be non-negative");
        }
        Ok(())
    }

    /// Number of stride-2 stages.
    pub fn stages(&self) -> usize {
        self.downscale.trailing_zeros() as usize
    }

    pub fn tokens_for(&self, frames: usize) -> usize {
        frames.div_ceil(self.downscale)
    }

    fn to_entries(&self) -> Vec<(String, Tensor)> {
        [
            ("cfg.num_layers", self.num_layers as f64),
            ("cfg.codes_per_book", self.codes_per_book as f64),
            ("cfg.code_dim", self.code_dim as f64),
            ("cfg.downscale", self.downscale as f64),
            ("cfg.quant_dropout", self.quant_dropout),
            ("cfg.beta", self.beta),
            ("cfg.ema_decay", self.ema_decay),
            ("cfg.reset_threshold", self.reset_threshold),
            ("cfg.width", self.width as f64),
            ("cfg.lr", self.lr),
            ("cfg.warmup", self.warmup as f64),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), Tensor::scalar(v)))
        .collect()
    }

    fn from_map(m: &mut CheckpointMap) -> Result<Self, VqError> {
        let cfg = Self {
            num_layers: m.scalar("cfg.num_layers")? as usize,
            codes_per_book: m.scalar("cfg.codes_per_book")? as usize,
            code_dim: m.scalar("cfg.code_dim")? as usize,
            downscale: m.scalar("cfg.downscale")? as usize,
            quant_dropout: m.scalar("cfg.quant_dropout")?,
            beta: m.scalar("cfg.beta")?,
            ema_decay: m.scalar("cfg.ema_decay")?,
            reset_threshold: m.scalar("cfg.reset_threshold")?,
            width: m.scalar("cfg.width")? as usize,
            lr: m.scalar("cfg.lr")?,
            warmup: m.scalar("cfg.warmup")? as usize,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `K × d` code table with EMA statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub k: usize,
    pub d: usize,
    pub vectors: Vec<f32>,
    pub ema_counts: Vec<f64>,
    pub ema_sums: Vec<f64>,
    pub initialized: bool,
}

impl Codebook {
    pub fn from_vectors(k: usize, d: usize, vectors: Vec<f32>) -> Self {
        assert_eq!(vectors.len(), k * d);
        Self {
            k,
            d,
            ema_counts: vec![1.0; k],
            ema_sums: vectors.iter().map(|&v| v as f64).collect(),
            vectors,
            initialized: true,
        }
    }

    pub fn random(k: usize, d: usize, rng: &mut impl Rng) -> Self {
        let vectors = (0..k * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let mut b = Self::from_vectors(k, d, vectors);
        b.initialized = false;
        b
    }

    pub fn code(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }

    /// Seed every code from (a tiled, shuffled copy of) the given latents.
    pub fn init_from(&mut self, latents: &[f32], rng: &mut impl Rng) {
        let rows = latents.len() / self.d;
        if rows == 0 {
            return;
        }
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(rng);
        for c in 0..self.k {
            let r = order[c % rows];
            self.vectors[c * self.d..(c + 1) * self.d].copy_from_slice(&latents[r * self.d..(r + 1) * self.d]);
        }
        self.ema_sums = self.vectors.iter().map(|&v| v as f64).collect();
        self.ema_counts = vec![1.0; self.k];
        self.initialized = true;
    }

    /// One EMA step from `(latent, assigned code)` pairs; codes whose running
    /// count falls below `threshold` are replaced by a random batch latent.
    /// Returns the number of codes reset.
    pub fn ema_update(
        &mut self,
        latents: &[f32],
        tokens: &[u32],
        decay: f64,
        threshold: f64,
        rng: &mut impl Rng,
    ) -> usize {
        let d = self.d;
        let rows = tokens.len();
        debug_assert_eq!(latents.len(), rows * d);
        if rows == 0 {
            return 0;
        }
        let mut counts = vec![0.0; self.k];
        let mut sums = vec![0.0; self.k * d];
        for (r, &tok) in tokens.iter().enumerate() {
            let c = tok as usize;
            counts[c] += 1.0;
            for j in 0..d {
                sums[c * d + j] += latents[r * d + j] as f64;
            }
        }
        let mut resets = 0;
        for c in 0..self.k {
            self.ema_counts[c] = decay * self.ema_counts[c] + (1.0 - decay) * counts[c];
            for j in 0..d {
                self.ema_sums[c * d + j] = decay * self.ema_sums[c * d + j] + (1.0 - decay) * sums[c * d + j];
            }
            // The draw happens for every code so the stream position does
            // not depend on usage.
            let pick = rng.gen_range(0..rows);
            if self.ema_counts[c] >= threshold {
                for j in 0..d {
                    self.vectors[c * d + j] = (self.ema_sums[c * d + j] / self.ema_counts[c]) as f32;
                }
            } else {
                self.vectors[c * d..(c + 1) * d].copy_from_slice(&latents[pick * d..(pick + 1) * d]);
                resets += 1;
            }
        }
        resets
    }
}

/// Index of the nearest code by squared Euclidean distance; ties go to the
/// lowest index.
pub fn nearest_code(v: &[f32], book: &Codebook) -> Result<usize, VqError> {
    if book.k == 0 {
        return Err(VqError::EmptyCodebook);
    }
    if v.len() != book.d {
        return Err(VqError::Shape(format!("vector of length {} vs code dim {}", v.len(), book.d)));
    }
    let mut best = 0;
    let mut best_d = f32::INFINITY;
    for c in 0..book.k {
        let dist: f32 = book.code(c).iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum();
        if dist < best_d {
            best_d = dist;
            best = c;
        }
    }
    Ok(best)
}

/// `n × d` latent vectors of one part.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentSeq {
    pub part: Part,
    pub n: usize,
    pub d: usize,
    pub vectors: Vec<f32>,
}

impl LatentSeq {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.d..(i + 1) * self.d]
    }
}

/// Output of residual quantization over one part's latents.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// `active × n` code indices.
    pub tokens: Vec<Vec<u32>>,
    /// `n × d`, sum of selected codes over the active layers.
    pub sum: Vec<f32>,
    /// `n × d`, what is left after the last active layer.
    pub residual: Vec<f32>,
    /// Residual entering each active layer (`r^v`).
    pub layer_inputs: Vec<Vec<f32>>,
    /// Selected code vectors per active layer.
    pub layer_codes: Vec<Vec<f32>>,
}

pub fn quantize_residual(latent: &LatentSeq, books: &[Codebook], active: usize) -> Result<Quantized, VqError> {
    if active < 1 || active > books.len() {
        return Err(VqError::LayerCount {
            expected: books.len(),
            actual: active,
        });
    }
    let (n, d) = (latent.n, latent.d);
    let mut r = latent.vectors.clone();
    let mut sum = vec![0.0f32; n * d];
    let mut tokens = Vec::with_capacity(active);
    let mut layer_inputs = Vec::with_capacity(active);
    let mut layer_codes = Vec::with_capacity(active);
    for book in &books[..active] {
        if book.d != d {
            return Err(VqError::Shape(format!("code dim {} vs latent dim {d}", book.d)));
        }
        let mut toks = Vec::with_capacity(n);
        let mut codes = vec![0.0f32; n * d];
        for i in 0..n {
            let c = nearest_code(&r[i * d..(i + 1) * d], book)?;
            toks.push(c as u32);
            codes[i * d..(i + 1) * d].copy_from_slice(book.code(c));
        }
        layer_inputs.push(r.clone());
        for j in 0..n * d {
            r[j] -= codes[j];
            sum[j] += codes[j];
        }
        layer_codes.push(codes);
        tokens.push(toks);
    }
    Ok(Quantized {
        tokens,
        sum,
        residual: r,
        layer_inputs,
        layer_codes,
    })
}

/// Sentinel used for masked positions; equals the codebook size.
pub fn mask_token(k: usize) -> u32 {
    k as u32
}

/// Token indices laid out `[layer][part][step]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub layers: usize,
    pub n: usize,
    /// Codebook size; also the MASK value.
    pub k: usize,
    pub data: Vec<u32>,
}

impl TokenGrid {
    pub fn masked(layers: usize, n: usize, k: usize) -> Self {
        Self {
            layers,
            n,
            k,
            data: vec![k as u32; layers * 4 * n],
        }
    }

    pub fn mask(&self) -> u32 {
        self.k as u32
    }

    fn idx(&self, layer: usize, part: usize, t: usize) -> usize {
        (layer * 4 + part) * self.n + t
    }

    pub fn get(&self, layer: usize, part: usize, t: usize) -> u32 {
        self.data[self.idx(layer, part, t)]
    }

    pub fn set(&mut self, layer: usize, part: usize, t: usize, v: u32) {
        let i = self.idx(layer, part, t);
        self.data[i] = v;
    }

    /// Tokens of one layer, `4 × n` row-major.
    pub fn layer(&self, layer: usize) -> &[u32] {
        &self.data[layer * 4 * self.n..(layer + 1) * 4 * self.n]
    }

    pub fn layer_mut(&mut self, layer: usize) -> &mut [u32] {
        let n = self.n;
        &mut self.data[layer * 4 * n..(layer + 1) * 4 * n]
    }

    pub fn count_mask(&self) -> usize {
        let m = self.mask();
        self.data.iter().filter(|&&v| v == m).count()
    }

    pub fn is_complete(&self) -> bool {
        self.count_mask() == 0
    }

    /// Columns `range` of every layer and part.
    pub fn slice_steps(&self, range: std::ops::Range<usize>) -> TokenGrid {
        let n = range.len();
        let mut out = TokenGrid::masked(self.layers, n, self.k);
        for l in 0..self.layers {
            for p in 0..4 {
                for (j, t) in range.clone().enumerate() {
                    out.set(l, p, j, self.get(l, p, t));
                }
            }
        }
        out
    }

    /// Time-concatenation of grids that share layers and `k`.
    pub fn concat(grids: &[&TokenGrid]) -> TokenGrid {
        let first = grids[0];
        let n = grids.iter().map(|g| g.n).sum();
        let mut out = TokenGrid::masked(first.layers, n, first.k);
        let mut off = 0;
        for g in grids {
            assert_eq!((g.layers, g.k), (first.layers, first.k), "grid concat mismatch");
            for l in 0..g.layers {
                for p in 0..4 {
                    for t in 0..g.n {
                        out.set(l, p, off + t, g.get(l, p, t));
                    }
                }
            }
            off += g.n;
        }
        out
    }
}

/// Numeric output of [`rvq_loss`] split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RvqLoss {
    pub total: f64,
    pub recon: f64,
    pub commit: f64,
}

/// Mean-absolute reconstruction error plus `beta` times the mean squared
/// distance between each layer's input residual and its selected codes.
/// `residual_inputs[p][v]` and `quantized[p][v]` hold part `p`, layer `v`.
pub fn rvq_loss(
    m: &[f32],
    m_hat: &[f32],
    residual_inputs: &[Vec<Vec<f32>>],
    quantized: &[Vec<Vec<f32>>],
    beta: f64,
) -> RvqLoss {
    assert_eq!(m.len(), m_hat.len());
    let recon = if m.is_empty() {
        0.0
    } else {
        m.iter().zip(m_hat).map(|(a, b)| (*a as f64 - *b as f64).abs()).sum::<f64>() / m.len() as f64
    };
    let mut commit = 0.0;
    for (rs, qs) in residual_inputs.iter().zip(quantized) {
        for (r, q) in rs.iter().zip(qs) {
            if r.is_empty() {
                continue;
            }
            let s: f64 = r.iter().zip(q).map(|(a, b)| (*a as f64 - *b as f64).powi(2)).sum();
            commit += s / r.len() as f64;
        }
    }
    RvqLoss {
        total: recon + beta * commit,
        recon,
        commit,
    }
}

/// Per-clip results of the surrogate loss used for training.
pub struct ClipGrad {
    pub loss: RvqLoss,
    pub grads: ParamGrads,
    /// Per part, the latents and tokens of every active layer.
    pub assignments: Vec<Vec<(Vec<f32>, Vec<u32>)>>,
}

/// Encoders, quantizers and decoder with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct RvqModel {
    pub cfg: RvqConfig,
    pub params: ParamStore,
    /// `[part][layer]`.
    pub books: Vec<Vec<Codebook>>,
    scheme: PartitionScheme,
}

fn conv_param(store: &mut ParamStore, name: &str, kernel: usize, cin: usize, cout: usize, rng: &mut impl Rng) {
    let bound = 1.0 / ((kernel * cin) as f64).sqrt();
    store.insert(format!("{name}.w"), Tensor::uniform(kernel * cin, cout, bound, rng));
    store.insert(format!("{name}.b"), Tensor::zeros(1, cout));
}

fn res_params(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) {
    conv_param(store, &format!("{name}.c1"), 3, width, width, rng);
    conv_param(store, &format!("{name}.c2"), 1, width, width, rng);
}

fn conv(tape: &mut Tape, store: &ParamStore, name: &str, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
    let w = tape.param_named(store, &format!("{name}.w"));
    let b = tape.param_named(store, &format!("{name}.b"));
    tape.conv1d(x, w, b, kernel, stride, pad)
}

fn res_block(tape: &mut Tape, store: &ParamStore, name: &str, x: Var) -> Var {
    let h = tape.relu(x);
    let h = conv(tape, store, &format!("{name}.c1"), h, 3, 1, 1);
    let h = tape.relu(h);
    let h = conv(tape, store, &format!("{name}.c2"), h, 1, 1, 0);
    tape.add(x, h)
}

fn part_tag(p: Part) -> &'static str {
    match p {
        Part::LU => "lu",
        Part::RU => "ru",
        Part::LL => "ll",
        Part::RL => "rl",
    }
}

impl RvqModel {
    pub fn new(cfg: RvqConfig, seed: u64) -> Result<Self, VqError> {
        cfg.validate()?;
        let scheme = four_part_partition(&standard_layout());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let w = cfg.width;
        for part in Part::ALL {
            let e = format!("enc.{}", part_tag(part));
            conv_param(&mut params, &format!("{e}.in"), 3, scheme.part_dim(part), w, &mut rng);
            res_params(&mut params, &format!("{e}.res0"), w, &mut rng);
            for s in 0..cfg.stages() {
                conv_param(&mut params, &format!("{e}.down{s}"), 4, w, w, &mut rng);
                res_params(&mut params, &format!("{e}.res{}", s + 1), w, &mut rng);
            }
            conv_param(&mut params, &format!("{e}.out"), 3, w, cfg.code_dim, &mut rng);
        }
        conv_param(&mut params, "dec.in", 3, 4 * cfg.code_dim, w, &mut rng);
        res_params(&mut params, "dec.res0", w, &mut rng);
        for s in 0..cfg.stages() {
            conv_param(&mut params, &format!("dec.up{s}"), 3, w, w, &mut rng);
            res_params(&mut params, &format!("dec.res{}", s + 1), w, &mut rng);
        }
        conv_param(&mut params, "dec.post", 3, w, w, &mut rng);
        conv_param(&mut params, "dec.out", 3, w, FEATURE_DIM, &mut rng);
        let books = (0..4)
            .map(|_| {
                (0..cfg.num_layers)
                    .map(|_| Codebook::random(cfg.codes_per_book, cfg.code_dim, &mut rng))
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            params,
            books,
            scheme,
        })
    }

    pub fn scheme(&self) -> &PartitionScheme {
        &self.scheme
    }

    /// Encoder forward on a tape; `x` is `T_pad × D_part`.
    pub fn encoder_forward(&self, tape: &mut Tape, part: Part, x: Var) -> Var {
        let e = format!("enc.{}", part_tag(part));
        let p = &self.params;
        let mut h = conv(tape, p, &format!("{e}.in"), x, 3, 1, 1);
        h = res_block(tape, p, &format!("{e}.res0"), h);
        for s in 0..self.cfg.stages() {
            h = conv(tape, p, &format!("{e}.down{s}"), h, 4, 2, 1);
            h = res_block(tape, p, &format!("{e}.res{}", s + 1), h);
        }
        conv(tape, p, &format!("{e}.out"), h, 3, 1, 1)
    }

    /// Decoder forward on a tape; `z` is `n × 4d`, output `n·downscale × 263`.
    pub fn decoder_forward(&self, tape: &mut Tape, z: Var) -> Var {
        let p = &self.params;
        let mut h = conv(tape, p, "dec.in", z, 3, 1, 1);
        h = res_block(tape, p, "dec.res0", h);
        for s in 0..self.cfg.stages() {
            h = tape.upsample2(h);
            h = conv(tape, p, &format!("dec.up{s}"), h, 3, 1, 1);
            h = res_block(tape, p, &format!("dec.res{}", s + 1), h);
        }
        h = conv(tape, p, "dec.post", h, 3, 1, 1);
        h = tape.relu(h);
        conv(tape, p, "dec.out", h, 3, 1, 1)
    }

    /// Part features padded with the last frame to a multiple of `downscale`.
    fn padded_part(&self, pm: &PartMotion) -> Tensor {
        let n = self.cfg.tokens_for(pm.len);
        let t_pad = n * self.cfg.downscale;
        let mut x = Tensor::zeros(t_pad, pm.dim);
        for t in 0..t_pad {
            let src = t.min(pm.len - 1);
            for c in 0..pm.dim {
                x.data[t * pm.dim + c] = pm.get(src, c) as f64;
            }
        }
        x
    }

    pub fn encode_part(&self, pm: &PartMotion) -> Result<LatentSeq, VqError> {
        let want = self.scheme.part_dim(pm.part);
        if pm.dim != want {
            return Err(VqError::Shape(format!(
                "part {} has {} columns, encoder expects {want}",
                pm.part, pm.dim
            )));
        }
        if pm.len == 0 {
            return Err(VqError::Motion(MotionError::Empty));
        }
        let mut tape = Tape::new();
        let x = tape.constant(self.padded_part(pm));
        let y = self.encoder_forward(&mut tape, pm.part, x);
        let out = tape.value(y);
        Ok(LatentSeq {
            part: pm.part,
            n: out.rows,
            d: out.cols,
            vectors: out.data.iter().map(|&v| v as f32).collect(),
        })
    }

    /// Decode `n × 4d` latents in `f64`; output has `n·downscale` rows.
    pub fn decode_f64(&self, z: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let y = self.decoder_forward(&mut tape, zv);
        tape.value(y).clone()
    }

    fn concat_latents(&self, latents: &[LatentSeq]) -> Result<Tensor, VqError> {
        if latents.len() != 4 {
            return Err(VqError::Shape(format!("expected 4 part latents, got {}", latents.len())));
        }
        let n = latents[0].n;
        let d = self.cfg.code_dim;
        for l in latents {
            if l.n != n || l.d != d {
                return Err(VqError::Shape(format!(
                    "part latents disagree: {}×{} vs {n}×{d}",
                    l.n, l.d
                )));
            }
        }
        let mut z = Tensor::zeros(n, 4 * d);
        for (p, l) in latents.iter().enumerate() {
            for i in 0..n {
                for j in 0..d {
                    z.data[i * 4 * d + p * d + j] = l.vectors[i * d + j] as f64;
                }
            }
        }
        Ok(z)
    }

    /// Decode four part latents (given in LU, RU, LL, RL order).
    pub fn decode_whole(&self, latents: &[LatentSeq], fps: f32) -> Result<MotionSequence, VqError> {
        let z = self.concat_latents(latents)?;
        let out = self.decode_f64(&z);
        Ok(MotionSequence::new(
            out.data.iter().map(|&v| v as f32).collect(),
            FEATURE_DIM,
            fps,
        )?)
    }

    pub fn tokenize(&self, m: &MotionSequence) -> Result<TokenGrid, VqError> {
        let n = self.cfg.tokens_for(m.len());
        let mut grid = TokenGrid::masked(self.cfg.num_layers, n, self.cfg.codes_per_book);
        for part in Part::ALL {
            let pm = slice_part(m, part, &self.scheme)?;
            let lat = self.encode_part(&pm)?;
            let q = quantize_residual(&lat, &self.books[part.index()], self.cfg.num_layers)?;
            for (l, toks) in q.tokens.iter().enumerate() {
                for (t, &c) in toks.iter().enumerate() {
                    grid.set(l, part.index(), t, c);
                }
            }
        }
        Ok(grid)
    }

    /// Sum of embedded codes per part, in layer order.
    pub fn embed_grid(&self, grid: &TokenGrid) -> Result<Vec<LatentSeq>, VqError> {
        if grid.layers != self.cfg.num_layers {
            return Err(VqError::LayerCount {
                expected: self.cfg.num_layers,
                actual: grid.layers,
            });
        }
        let d = self.cfg.code_dim;
        let mut out = Vec::with_capacity(4);
        for part in Part::ALL {
            let p = part.index();
            let mut vectors = vec![0.0f32; grid.n * d];
            for l in 0..grid.layers {
                let book = &self.books[p][l];
                for t in 0..grid.n {
                    let tok = grid.get(l, p, t);
                    if tok == grid.mask() {
                        return Err(VqError::MaskInGrid {
                            layer: l,
                            part: p,
                            step: t,
                        });
                    }
                    if tok as usize >= book.k {
                        return Err(VqError::TokenRange { token: tok, k: book.k });
                    }
                    for (v, c) in vectors[t * d..(t + 1) * d].iter_mut().zip(book.code(tok as usize)) {
                        *v += c;
                    }
                }
            }
            out.push(LatentSeq {
                part,
                n: grid.n,
                d,
                vectors,
            });
        }
        Ok(out)
    }

    pub fn detokenize(&self, grid: &TokenGrid, fps: f32) -> Result<MotionSequence, VqError> {
        let lat = self.embed_grid(grid)?;
        self.decode_whole(&lat, fps)
    }

    /// Loss and straight-through gradients for one clip with the given
    /// number of active layers. Codebooks are read, not modified.
    pub fn clip_grad(&self, m: &MotionSequence, active: usize) -> Result<ClipGrad, VqError> {
        let mut tape = Tape::new();
        let mut enc_out = Vec::with_capacity(4);
        for part in Part::ALL {
            let pm = slice_part(m, part, &self.scheme)?;
            let x = tape.constant(self.padded_part(&pm));
            enc_out.push(self.encoder_forward(&mut tape, part, x));
        }
        let latents: Vec<Tensor> = enc_out.iter().map(|&v| tape.value(v).clone()).collect();
        let (loss, dec_grads, lat_grads, assignments) = self.latent_loss(m, &latents, active)?;
        let seeds: Vec<(Var, Tensor)> = enc_out.iter().copied().zip(lat_grads).collect();
        let mut grads = tape.backward_from(&seeds).param_grads(&tape, &self.params);
        grads.accumulate(&dec_grads);
        Ok(ClipGrad {
            loss,
            grads,
            assignments,
        })
    }

    /// Quantize encoder outputs, decode, and return the loss, decoder
    /// parameter gradients and the straight-through gradient with respect to
    /// each part's encoder output.
    #[allow(clippy::type_complexity)]
    pub fn latent_loss(
        &self,
        m: &MotionSequence,
        latents: &[Tensor],
        active: usize,
    ) -> Result<(RvqLoss, ParamGrads, Vec<Tensor>, Vec<Vec<(Vec<f32>, Vec<u32>)>>), VqError> {
        let d = self.cfg.code_dim;
        let n = latents[0].rows;
        let mut quants = Vec::with_capacity(4);
        for (p, lat) in latents.iter().enumerate() {
            let seq = LatentSeq {
                part: Part::ALL[p],
                n,
                d,
                vectors: lat.data.iter().map(|&v| v as f32).collect(),
            };
            quants.push(quantize_residual(&seq, &self.books[p], active)?);
        }
        let mut z = Tensor::zeros(n, 4 * d);
        for (p, q) in quants.iter().enumerate() {
            for i in 0..n {
                for j in 0..d {
                    z.data[i * 4 * d + p * d + j] = q.sum[i * d + j] as f64;
                }
            }
        }
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let out = self.decoder_forward(&mut tape, zv);
        let recon = tape.take_rows(out, m.len());
        let target = Tensor::from_vec(m.len(), FEATURE_DIM, m.data().iter().map(|&v| v as f64).collect());
        let l1 = tape.l1_loss(recon, &target);
        let g = tape.backward(l1);
        let dec_grads = g.param_grads(&tape, &self.params);
        let gz = g.get(zv).cloned().unwrap_or_else(|| Tensor::zeros(n, 4 * d));

        let m_hat: Vec<f32> = tape.value(recon).data.iter().map(|&v| v as f32).collect();
        let rin: Vec<Vec<Vec<f32>>> = quants.iter().map(|q| q.layer_inputs.clone()).collect();
        let rq: Vec<Vec<Vec<f32>>> = quants.iter().map(|q| q.layer_codes.clone()).collect();
        let mut loss = rvq_loss(m.data(), &m_hat, &rin, &rq, self.cfg.beta);
        // Use the exact f64 reconstruction term rather than its f32 echo.
        loss.recon = tape.value(l1).data[0];
        loss.total = loss.recon + self.cfg.beta * loss.commit;

        let beta = self.cfg.beta;
        let mut lat_grads = Vec::with_capacity(4);
        for (p, q) in quants.iter().enumerate() {
            let mut gp = Tensor::zeros(n, d);
            for i in 0..n {
                for j in 0..d {
                    gp.data[i * d + j] = gz.data[i * 4 * d + p * d + j];
                }
            }
            // d/db ‖r^v − c_v‖² = 2 (r^v − c_v) since r^v = b − Σ_{u<v} c_u.
            let norm = 2.0 * beta / (n * d) as f64;
            for v in 0..q.layer_inputs.len() {
                for k in 0..n * d {
                    gp.data[k] += norm * (q.layer_inputs[v][k] as f64 - q.layer_codes[v][k] as f64);
                }
            }
            lat_grads.push(gp);
        }
        let assignments = quants
            .into_iter()
            .map(|q| q.layer_inputs.into_iter().zip(q.tokens).collect())
            .collect();
        Ok((loss, dec_grads, lat_grads, assignments))
    }

    /// Number of active layers for one step under quantization dropout.
    pub fn draw_active_layers(&self, rng: &mut impl Rng) -> usize {
        if rng.gen::<f64>() < self.cfg.quant_dropout {
            rng.gen_range(1..=self.cfg.num_layers)
        } else {
            self.cfg.num_layers
        }
    }

    /// Seed uninitialized codebooks from the latents of `batch`, layer by
    /// layer so deeper books see real residuals.
    pub fn init_codebooks(&mut self, batch: &[MotionSequence], rng: &mut impl Rng) -> Result<(), VqError> {
        for part in Part::ALL {
            let p = part.index();
            if self.books[p].iter().all(|b| b.initialized) {
                continue;
            }
            let mut lats = Vec::new();
            for m in batch {
                let pm = slice_part(m, part, &self.scheme)?;
                lats.push(self.encode_part(&pm)?);
            }
            for l in 0..self.cfg.num_layers {
                if !self.books[p][l].initialized {
                    let mut pool = Vec::new();
                    for lat in &lats {
                        if l == 0 {
                            pool.extend_from_slice(&lat.vectors);
                        } else {
                            pool.extend_from_slice(&quantize_residual(lat, &self.books[p], l)?.residual);
                        }
                    }
                    self.books[p][l].init_from(&pool, rng);
                }
            }
        }
        Ok(())
    }

    /// One optimization step over `batch`. Returns the batch-mean loss.
    pub fn train_step(&mut self, batch: &[MotionSequence], opt: &mut Adam, rng: &mut ChaCha8Rng) -> Result<RvqLoss, VqError> {
        let first = batch.first().ok_or(VqError::EmptyBatch)?;
        if let Some(m) = batch.iter().find(|m| m.len() != first.len()) {
            return Err(VqError::RaggedBatch(first.len(), m.len()));
        }
        self.init_codebooks(batch, rng)?;
        let active = self.draw_active_layers(rng);
        let results: Vec<Result<ClipGrad, VqError>> = batch.par_iter().map(|m| self.clip_grad(m, active)).collect();
        let mut grads = ParamGrads::zeros_like(&self.params);
        let mut loss = RvqLoss {
            total: 0.0,
            recon: 0.0,
            commit: 0.0,
        };
        let mut assignments = Vec::with_capacity(batch.len());
        for r in results {
            let c = r?;
            grads.accumulate(&c.grads);
            loss.total += c.loss.total;
            loss.recon += c.loss.recon;
            loss.commit += c.loss.commit;
            assignments.push(c.assignments);
        }
        let b = batch.len() as f64;
        loss.total /= b;
        loss.recon /= b;
        loss.commit /= b;
        if !loss.total.is_finite() {
            return Err(VqError::NonFiniteLoss);
        }
        grads.scale(1.0 / b);
        opt.update(&mut self.params, &grads);
        for p in 0..4 {
            for l in 0..active {
                let mut lat = Vec::new();
                let mut tok = Vec::new();
                for clip in &assignments {
                    lat.extend_from_slice(&clip[p][l].0);
                    tok.extend_from_slice(&clip[p][l].1);
                }
                self.books[p][l].ema_update(&lat, &tok, self.cfg.ema_decay, self.cfg.reset_threshold, rng);
            }
        }
        Ok(loss)
    }

    /// Mean absolute reconstruction error per feature over `clips`, using
    /// all quantization layers.
    pub fn reconstruction_l1(&self, clips: &[MotionSequence]) -> Result<f64, VqError> {
        let mut total = 0.0;
        let mut count = 0usize;
        for m in clips {
            let rec = self.detokenize(&self.tokenize(m)?, m.fps)?;
            for t in 0..m.len() {
                for (a, b) in m.frame(t).iter().zip(rec.frame(t)) {
                    total += (*a as f64 - *b as f64).abs();
                }
            }
            count += m.len() * FEATURE_DIM;
        }
        Ok(total / count.max(1) as f64)
    }

    pub fn new_optimizer(&self) -> Adam {
        Adam::new(&self.params, self.cfg.lr, self.cfg.warmup)
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor)> {
        let mut out = self.cfg.to_entries();
        for (_, name, t) in self.params.iter() {
            out.push((name.to_string(), t.clone()));
        }
        let (k, d) = (self.cfg.codes_per_book, self.cfg.code_dim);
        for (p, books) in self.books.iter().enumerate() {
            for (l, b) in books.iter().enumerate() {
                let pre = format!("book.{}.{l}", part_tag(Part::ALL[p]));
                out.push((
                    format!("{pre}.vectors"),
                    Tensor::from_vec(k, d, b.vectors.iter().map(|&v| v as f64).collect()),
                ));
                out.push((format!("{pre}.counts"), Tensor::from_vec(1, k, b.ema_counts.clone())));
                out.push((format!("{pre}.sums"), Tensor::from_vec(k, d, b.ema_sums.clone())));
            }
        }
        out
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self, VqError> {
        let mut map = CheckpointMap::new(entries);
        let cfg = RvqConfig::from_map(&mut map)?;
        let mut model = RvqModel::new(cfg.clone(), 0)?;
        let names: Vec<(String, (usize, usize))> = model
            .params
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.shape()))
            .collect();
        for (name, (r, c)) in names {
            *model.params.by_name_mut(&name).unwrap() = map.take_shaped(&name, r, c)?;
        }
        let (k, d) = (cfg.codes_per_book, cfg.code_dim);
        for p in 0..4 {
            for l in 0..cfg.num_layers {
                let pre = format!("book.{}.{l}", part_tag(Part::ALL[p]));
                let v = map.take_shaped(&format!("{pre}.vectors"), k, d)?;
                let c = map.take_shaped(&format!("{pre}.counts"), 1, k)?;
                let s = map.take_shaped(&format!("{pre}.sums"), k, d)?;
                model.books[p][l] = Codebook {
                    k,
                    d,
                    vectors: v.data.iter().map(|&x| x as f32).collect(),
                    ema_counts: c.data,
                    ema_sums: s.data,
                    initialized: true,
                };
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<(), VqError> {
        Ok(write_checkpoint(path, &self.to_entries())?)
    }

    pub fn load(path: &Path) -> Result<Self, VqError> {
        Self::from_entries(read_checkpoint(path)?)
    }

    /// Parameters rounded through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        let flat: Vec<f64> = self.params.flatten().iter().map(|&v| v as f32 as f64).collect();
        self.params.set_flat(&flat);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motiondata::synthetic_motion;

    fn tiny_cfg() -> RvqConfig {
        RvqConfig {
            width: 8,
            code_dim: 4,
            codes_per_book: 8,
            ..RvqConfig::desk()
        }
    }

    #[test]
    fn nearest_code_examples() {
        let book = Codebook::from_vectors(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
        assert_eq!(nearest_code(&[0.2, 0.1], &book).unwrap(), 0);
        let book = Codebook::from_vectors(4, 2, vec![0.0, 0.0, 1.0, 1.0, 2.0, 0.0, 0.5, -0.5]);
        assert_eq!(nearest_code(&[0.5, -0.5], &book).unwrap(), 3);
        // Equidistant from codes 0 and 1.
        assert_eq!(nearest_code(&[0.5, 0.5], &book).unwrap(), 0);
    }

    #[test]
    fn nearest_code_rejects_bad_shapes() {
        let book = Codebook::from_vectors(0, 2, vec![]);
        assert!(matches!(nearest_code(&[0.0, 0.0], &book), Err(VqError::EmptyCodebook)));
        let book = Codebook::from_vectors(1, 2, vec![0.0, 0.0]);
        assert!(nearest_code(&[0.0], &book).is_err());
    }

    #[test]
    fn exact_hit_leaves_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut books: Vec<Codebook> = (0..3).map(|_| Codebook::random(8, 4, &mut rng)).collect();
        books[1].vectors[..4].fill(0.0);
        books[2].vectors[..4].fill(0.0);
        let lat = LatentSeq {
            part: Part::LU,
            n: 1,
            d: 4,
            vectors: books[0].code(5).to_vec(),
        };
        let q = quantize_residual(&lat, &books, 3).unwrap();
        assert_eq!(q.tokens[0], vec![5]);
        assert!(q.layer_inputs[1].iter().all(|&v| v == 0.0));
        assert!(q.residual.iter().all(|&v| v == 0.0));
        let q1 = quantize_residual(&lat, &books, 1).unwrap();
        assert_eq!(q1.sum, books[0].code(5));
        assert!(quantize_residual(&lat, &books, 0).is_err());
        assert!(quantize_residual(&lat, &books, 4).is_err());
    }

    #[test]
    fn token_math() {
        let cfg = RvqConfig::desk();
        assert_eq!(cfg.tokens_for(8), 2);
        assert_eq!(cfg.tokens_for(196), 49);
        assert_eq!(cfg.tokens_for(9), 3);
    }

    #[test]
    fn encode_lengths_and_zero_input() {
        let model = RvqModel::new(tiny_cfg(), 1).unwrap();
        for (t, n) in [(8, 2), (196, 49), (5, 2)] {
            let m = MotionSequence::zeros(t, 20.0).unwrap();
            let pm = slice_part(&m, Part::LL, model.scheme()).unwrap();
            let lat = model.encode_part(&pm).unwrap();
            assert_eq!(lat.n, n);
            assert!(lat.vectors.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn encode_rejects_wrong_width() {
        let model = RvqModel::new(tiny_cfg(), 1).unwrap();
        let m = MotionSequence::zeros(8, 20.0).unwrap();
        let mut pm = slice_part(&m, Part::LL, model.scheme()).unwrap();
        pm.part = Part::LU;
        assert!(matches!(model.encode_part(&pm), Err(VqError::Shape(_))));
    }

    #[test]
    fn decode_zero_and_part_order() {
        let model = RvqModel::new(tiny_cfg(), 2).unwrap();
        let zero: Vec<LatentSeq> = Part::ALL
            .iter()
            .map(|&part| LatentSeq {
                part,
                n: 3,
                d: 4,
                vectors: vec![0.0; 12],
            })
            .collect();
        let out = model.decode_whole(&zero, 20.0).unwrap();
        assert_eq!(out.len(), 12);
        assert!(out.data().iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lats: Vec<LatentSeq> = Part::ALL
            .iter()
            .map(|&part| LatentSeq {
                part,
                n: 3,
                d: 4,
                vectors: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            })
            .collect();
        let a = model.decode_whole(&lats, 20.0).unwrap();
        let swapped = vec![lats[1].clone(), lats[0].clone(), lats[2].clone(), lats[3].clone()];
        let b = model.decode_whole(&swapped, 20.0).unwrap();
        assert_ne!(a.data(), b.data());
        assert!(model.decode_whole(&lats[..3], 20.0).is_err());
        let mut ragged = lats.clone();
        ragged[2].n = 2;
        ragged[2].vectors.truncate(8);
        assert!(model.decode_whole(&ragged, 20.0).is_err());
    }

    #[test]
    fn rvq_loss_identities() {
        let m = vec![0.5f32, -1.0, 2.0];
        let r = vec![vec![vec![1.0f32, 2.0]]];
        let zero = rvq_loss(&m, &m, &r, &r, 1.0);
        assert_eq!(zero.total, 0.0);
        let q = vec![vec![vec![0.0f32, 0.0]]];
        let hat = vec![0.0f32, 0.0, 0.0];
        let l = rvq_loss(&m, &hat, &r, &q, 0.0);
        assert!((l.total - 3.5 / 3.0).abs() < 1e-12);
        let l = rvq_loss(&m, &m, &r, &q, 0.5);
        assert!((l.total - 0.5 * 2.5).abs() < 1e-12);
    }

    #[test]
    fn tokenize_round_trip_shapes() {
        let model = RvqModel::new(tiny_cfg(), 5).unwrap();
        let m = synthetic_motion(7, 16).unwrap();
        let g1 = model.tokenize(&m).unwrap();
        let g2 = model.tokenize(&m).unwrap();
        assert_eq!(g1, g2);
        assert_eq!((g1.layers, g1.n), (3, 4));
        assert!(g1.is_complete());
        let rec = model.detokenize(&g1, 20.0).unwrap();
        assert_eq!(rec.len(), 16);
        let mut masked = g1.clone();
        masked.set(1, 2, 0, masked.mask());
        assert!(matches!(
            model.detokenize(&masked, 20.0),
            Err(VqError::MaskInGrid { layer: 1, part: 2, step: 0 })
        ));
    }

    #[test]
    fn reset_replaces_unused_code() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut book = Codebook::from_vectors(2, 2, vec![0.0, 0.0, 9.0, 9.0]);
        let before = book.code(1).to_vec();
        let lat = vec![0.1, 0.2, -0.1, 0.0];
        let resets = book.ema_update(&lat, &[0, 0], 0.99, 1.0, &mut rng);
        assert_eq!(resets, 1);
        assert_ne!(book.code(1), before.as_slice());
        assert!(book.code(1) == &lat[..2] || book.code(1) == &lat[2..]);
    }

    #[test]
    fn ema_converges_to_assigned_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut book = Codebook::from_vectors(1, 2, vec![3.0, -3.0]);
        let lat = vec![1.0, 0.0, 0.0, 1.0];
        let mean = [0.5f32, 0.5];
        let gap = |b: &Codebook| (b.code(0)[0] - mean[0]).abs() + (b.code(0)[1] - mean[1]).abs();
        let mut prev = gap(&book);
        for _ in 0..600 {
            book.ema_update(&lat, &[0, 0], 0.99, 0.5, &mut rng);
            let g = gap(&book);
            assert!(g <= prev + 1e-6);
            prev = g;
        }
        assert!(prev < 1e-2);
    }

    #[test]
    fn grid_slice_and_concat() {
        let mut g = TokenGrid::masked(2, 3, 8);
        for (i, v) in g.data.iter_mut().enumerate() {
            *v = (i % 8) as u32;
        }
        let a = g.slice_steps(0..1);
        let b = g.slice_steps(1..3);
        assert_eq!(TokenGrid::concat(&[&a, &b]), g);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut model = RvqModel::new(tiny_cfg(), 11).unwrap();
        model.round_to_f32();
        let back = RvqModel::from_entries(model.to_entries()).unwrap();
        assert_eq!(back.params, model.params);
        assert_eq!(back.cfg, model.cfg);
        for p in 0..4 {
            for l in 0..3 {
                assert_eq!(back.books[p][l].vectors, model.books[p][l].vectors);
            }
        }
    }

    #[test]
    fn config_validation() {
        let mut c = RvqConfig::desk();
        c.downscale = 3;
        assert!(c.validate().is_err());
        let mut c = RvqConfig::desk();
        c.quant_dropout = 1.0;
        assert!(c.validate().is_err());
        let mut c = RvqConfig::desk();
        c.codes_per_book = 1;
        assert!(c.validate().is_err());
    }
}
