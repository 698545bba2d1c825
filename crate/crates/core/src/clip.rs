//! Contrastive report/image dual encoder.
//!
//! The text side is a small pre-norm transformer whose per-token features
//! condition the denoiser; the image side is a strided conv stem followed by
//! two transformer blocks. Both pool to a shared joint space in which the
//! symmetric contrastive objective is optimized.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{tokenize, GrayImage, Labels, Sample, TokenizedReport, Vocabulary, MAX_TOKENS, PAD};
use crate::error::{Error, Result};
use crate::nn::{Adam, Graph, LayerNorm, Linear, ParamId, ParamStore, Real, Tensor, TransformerBlock, Var};
use crate::rng::stream;

pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 5e-3;
pub const TAU_MAX: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub d_txt: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub d_joint: usize,
}

impl TextEncoderConfig {
    pub fn desk(vocab_size: usize) -> Self {
        TextEncoderConfig {
            vocab_size,
            d_txt: 128,
            layers: 4,
            heads: 4,
            max_len: MAX_TOKENS,
            d_joint: 128,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(Error::config("text vocabulary must hold the specials plus one token"));
        }
        if self.heads == 0 || !self.d_txt.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "d_txt {} not divisible by {} heads",
                self.d_txt, self.heads
            )));
        }
        if self.max_len == 0 || self.d_joint == 0 {
            return Err(Error::config("text encoder dimensions must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ImageEncoderConfig {
    pub image_size: usize,
    /// Widths of the three stride-2 conv stages.
    pub channels: [usize; 3],
    pub d_img: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_joint: usize,
}

impl ImageEncoderConfig {
    pub fn desk(image_size: usize) -> Self {
        ImageEncoderConfig {
            image_size,
            channels: [16, 32, 64],
            d_img: 128,
            layers: 2,
            heads: 4,
            d_joint: 128,
        }
    }

    /// Side length of the token grid after the stem.
    pub fn grid(&self) -> usize {
        self.image_size / 8
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 8 || !self.image_size.is_multiple_of(8) {
            return Err(Error::config(format!(
                "image encoder needs a size divisible by 8, got {}",
                self.image_size
            )));
        }
        if self.heads == 0 || !self.d_img.is_multiple_of(self.heads) {
            return Err(Error::config("d_img not divisible by heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ClipConfig {
    pub text: TextEncoderConfig,
    pub image: ImageEncoderConfig,
}

impl ClipConfig {
    pub fn desk(vocab_size: usize, image_size: usize) -> Self {
        ClipConfig {
            text: TextEncoderConfig::desk(vocab_size),
            image: ImageEncoderConfig::desk(image_size),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        self.image.validate()?;
        if self.text.d_joint != self.image.d_joint {
            return Err(Error::config("text and image encoders must share d_joint"));
        }
        Ok(())
    }
}

/// Frozen-encoder output for one report.
///
/// Only the real-token rows are stored; [`ReportEmbedding::padded_tokens`]
/// expands them to the full `max_len × d_txt` layout with zero rows at
/// masked positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportEmbedding {
    /// `[n_real, d_txt]`, in sequence order.
    pub tokens: Tensor<f32>,
    pub mask: Vec<bool>,
    pub pooled: Vec<f32>,
}

impl ReportEmbedding {
    pub fn d_txt(&self) -> usize {
        self.tokens.cols()
    }

    pub fn n_real(&self) -> usize {
        self.tokens.rows()
    }

    pub fn padded_tokens(&self) -> Tensor<f32> {
        let d = self.d_txt();
        let mut out = Tensor::zeros(&[self.mask.len(), d]);
        let mut src = 0;
        for (i, &m) in self.mask.iter().enumerate() {
            if m {
                out.data_mut()[i * d..(i + 1) * d].copy_from_slice(self.tokens.row(src));
                src += 1;
            }
        }
        out
    }
}

#[derive(Clone)]
pub struct TextEncoder {
    pub cfg: TextEncoderConfig,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    proj: Linear,
}

/// Batched text features: `tokens` is `[batch·seq, d_txt]` where `seq` is
/// the longest real span in the batch; rows past an item's span are padding.
pub struct TextFeatures {
    pub tokens: Var,
    pub pooled: Var,
    pub seq: usize,
    /// Original sequence position of every kept token, per item.
    pub positions: Vec<Vec<usize>>,
}

impl TextEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: TextEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_txt;
        let tok_emb = store.add("text.tok_emb", Tensor::randn(&[cfg.vocab_size, d], 0.02, rng))?;
        let pos_emb = store.add("text.pos_emb", Tensor::randn(&[cfg.max_len, d], 0.02, rng))?;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("text.blocks.{i}"), d, cfg.heads, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "text.ln_f", d)?;
        let proj = Linear::new(store, "text.proj", d, cfg.d_joint, false, rng)?;
        Ok(TextEncoder {
            cfg,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            proj,
        })
    }

    /// Encodes a batch. Padded positions are masked out of attention and
    /// dropped from the sequence, so an item's features never depend on its
    /// padding or on its batch companions.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, reports: &[&TokenizedReport]) -> Result<TextFeatures> {
        if reports.is_empty() {
            return Err(Error::config("cannot encode an empty batch"));
        }
        let mut positions = Vec::with_capacity(reports.len());
        for r in reports {
            if r.ids.len() != r.mask.len() || r.ids.len() > self.cfg.max_len {
                return Err(Error::shape(format!(
                    "report of length {} (mask {}) exceeds max_len {}",
                    r.ids.len(),
                    r.mask.len(),
                    self.cfg.max_len
                )));
            }
            if let Some(&bad) = r.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
                return Err(Error::config(format!(
                    "token id {bad} outside vocabulary of {}",
                    self.cfg.vocab_size
                )));
            }
            let pos: Vec<usize> = (0..r.ids.len()).filter(|&i| r.mask[i]).collect();
            if pos.is_empty() {
                return Err(Error::config("report has no real tokens"));
            }
            positions.push(pos);
        }
        let batch = reports.len();
        let seq = positions.iter().map(Vec::len).max().unwrap_or(1);
        let mut ids = Vec::with_capacity(batch * seq);
        let mut pos_idx = Vec::with_capacity(batch * seq);
        let mut key_mask = Vec::with_capacity(batch * seq);
        for (r, pos) in reports.iter().zip(&positions) {
            for j in 0..seq {
                match pos.get(j) {
                    Some(&p) => {
                        ids.push(r.ids[p] as usize);
                        pos_idx.push(p);
                        key_mask.push(true);
                    }
                    None => {
                        ids.push(PAD as usize);
                        pos_idx.push(0);
                        key_mask.push(false);
                    }
                }
            }
        }
        let tok = g.param(self.tok_emb);
        let pos = g.param(self.pos_emb);
        let te = g.gather_rows(tok, ids)?;
        let pe = g.gather_rows(pos, pos_idx)?;
        let mut x = g.add(te, pe)?;
        for b in &self.blocks {
            x = b.forward(g, x, batch, seq, Some(&key_mask))?;
        }
        let x = self.ln_f.forward(g, x)?;
        let groups = positions
            .iter()
            .enumerate()
            .map(|(b, p)| {
                let w = T::one() / T::from_usize(p.len()).unwrap();
                (0..p.len()).map(|j| (b * seq + j, w)).collect()
            })
            .collect();
        let mean = g.weighted_row_sum(x, groups)?;
        let pooled = self.proj.forward(g, mean)?;
        Ok(TextFeatures {
            tokens: x,
            pooled,
            seq,
            positions,
        })
    }
}

#[derive(Clone)]
pub struct ImageEncoder {
    pub cfg: ImageEncoderConfig,
    convs: Vec<crate::nn::Conv2d>,
    embed: Linear,
    pos_emb: ParamId,
    blocks: Vec<TransformerBlock>,
    ln_f: LayerNorm,
    proj: Linear,
}

impl ImageEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: ImageEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in cfg.channels.iter().enumerate() {
            convs.push(crate::nn::Conv2d::new(store, &format!("image.stem.{i}"), c_in, c, 3, 2, 1, rng)?);
            c_in = c;
        }
        let embed = Linear::new(store, "image.embed", c_in, cfg.d_img, true, rng)?;
        let n_tok = cfg.grid() * cfg.grid();
        let pos_emb = store.add("image.pos_emb", Tensor::randn(&[n_tok, cfg.d_img], 0.02, rng))?;
        let blocks = (0..cfg.layers)
            .map(|i| TransformerBlock::new(store, &format!("image.blocks.{i}"), cfg.d_img, cfg.heads, rng))
            .collect::<Result<_>>()?;
        let ln_f = LayerNorm::new(store, "image.ln_f", cfg.d_img)?;
        let proj = Linear::new(store, "image.proj", cfg.d_img, cfg.d_joint, false, rng)?;
        Ok(ImageEncoder {
            cfg,
            convs,
            embed,
            pos_emb,
            blocks,
            ln_f,
            proj,
        })
    }

    /// `x` is `[batch, 1, size, size]`; returns pooled `[batch, d_joint]`.
    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let size = self.cfg.image_size;
        if s.len() != 4 || s[1] != 1 || s[2] != size || s[3] != size {
            return Err(Error::shape(format!(
                "image encoder expects [batch, 1, {size}, {size}], got {s:?}"
            )));
        }
        let batch = s[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h)?;
            h = g.gelu(h);
        }
        let h = g.nchw_to_rows(h)?;
        let h = self.embed.forward(g, h)?;
        let n_tok = self.cfg.grid() * self.cfg.grid();
        let pos = g.param(self.pos_emb);
        let pos = g.gather_rows(pos, (0..batch * n_tok).map(|i| i % n_tok).collect())?;
        let mut h = g.add(h, pos)?;
        for b in &self.blocks {
            h = b.forward(g, h, batch, n_tok, None)?;
        }
        let h = self.ln_f.forward(g, h)?;
        let w = T::one() / T::from_usize(n_tok).unwrap();
        let groups = (0..batch)
            .map(|b| (0..n_tok).map(|j| (b * n_tok + j, w)).collect())
            .collect();
        let mean = g.weighted_row_sum(h, groups)?;
        self.proj.forward(g, mean)
    }
}

/// Stacks images into a `[n, 1, size, size]` tensor with values in `[-1, 1]`.
pub fn image_batch<T: Real>(images: &[&GrayImage], size: usize) -> Result<Tensor<T>> {
    let mut data = Vec::with_capacity(images.len() * size * size);
    for img in images {
        if img.size != size || img.pixels.len() != size * size {
            return Err(Error::shape(format!(
                "image is {}x{}, encoder expects {size}x{size}",
                img.size, img.size
            )));
        }
        data.extend(img.to_signed().into_iter().map(|v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![images.len(), 1, size, size], data)
}

pub struct ClipModel<T: Real = f32> {
    pub cfg: ClipConfig,
    pub store: ParamStore<T>,
    pub text: TextEncoder,
    pub image: ImageEncoder,
    log_tau: ParamId,
}

impl<T: Real> ClipModel<T> {
    pub fn new(cfg: ClipConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, 0);
        let mut store = ParamStore::new();
        let text = TextEncoder::new(&mut store, cfg.text.clone(), &mut rng)?;
        let image = ImageEncoder::new(&mut store, cfg.image.clone(), &mut rng)?;
        let log_tau = store.add("log_tau", Tensor::full(&[1], T::from_f64_lossy(TAU_INIT.ln())))?;
        Ok(ClipModel {
            cfg,
            store,
            text,
            image,
            log_tau,
        })
    }

    /// Same architecture over a different parameter set of identical layout.
    pub fn with_params(&self, store: ParamStore<T>) -> Self {
        ClipModel {
            cfg: self.cfg.clone(),
            store,
            text: self.text.clone(),
            image: self.image.clone(),
            log_tau: self.log_tau,
        }
    }

    pub fn tau(&self) -> f64 {
        self.store.get(self.log_tau).data()[0].as_f64().exp().clamp(TAU_MIN, TAU_MAX)
    }

    /// Keeps τ inside its clamp after an optimizer step.
    pub fn clamp_tau(&mut self) {
        let v = &mut self.store.get_mut(self.log_tau).data_mut()[0];
        *v = T::from_f64_lossy(v.as_f64().clamp(TAU_MIN.ln(), TAU_MAX.ln()));
    }

    /// Per-token features and pooled joint vector of one report.
    pub fn encode_text(&self, report: &TokenizedReport) -> Result<ReportEmbedding> {
        let mut g = Graph::new(&self.store);
        let f = self.text.forward(&mut g, &[report])?;
        let n = f.positions[0].len();
        let d = self.cfg.text.d_txt;
        let tokens = g.value(f.tokens).data()[..n * d]
            .iter()
            .map(|v| v.as_f64() as f32)
            .collect();
        Ok(ReportEmbedding {
            tokens: Tensor::new(vec![n, d], tokens)?,
            mask: report.mask.clone(),
            pooled: g.value(f.pooled).data().iter().map(|v| v.as_f64() as f32).collect(),
        })
    }

    /// Pooled joint vectors `[n, d_joint]`, encoded in chunks of 64.
    pub fn encode_images(&self, images: &[&GrayImage]) -> Result<Tensor<f32>> {
        let d = self.cfg.image.d_joint;
        let mut out = Vec::with_capacity(images.len() * d);
        for chunk in images.chunks(64) {
            let mut g = Graph::new(&self.store);
            let x = g.input(image_batch(chunk, self.cfg.image.image_size)?);
            let p = self.image.forward(&mut g, x)?;
            out.extend(g.value(p).data().iter().map(|v| v.as_f64() as f32));
        }
        Tensor::new(vec![images.len(), d], out)
    }

    pub fn encode_image(&self, image: &GrayImage) -> Result<Vec<f32>> {
        Ok(self.encode_images(&[image])?.into_data())
    }

    /// Contrastive loss of a batch of matched pairs, recorded on `g`.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_, T>,
        images: &[&GrayImage],
        reports: &[&TokenizedReport],
    ) -> Result<(Var, f64)> {
        if images.len() != reports.len() {
            return Err(Error::shape("image and report counts differ"));
        }
        let x = g.input(image_batch(images, self.cfg.image.image_size)?);
        let iv = self.image.forward(g, x)?;
        let tv = self.text.forward(g, reports)?.pooled;
        let lt = g.param(self.log_tau);
        let tau = T::from_f64_lossy(self.tau());
        let out = contrastive_loss_grad(g.value(iv), g.value(tv), tau)?;
        let dlog = Tensor::full(&[1], out.d_tau * tau);
        let value = out.loss.as_f64();
        let v = g.loss(out.loss, vec![(iv, out.d_img), (tv, out.d_txt), (lt, dlog)])?;
        Ok((v, value))
    }
}

/// Loss value and its gradients w.r.t. raw embeddings and τ.
pub struct ContrastiveOutput<T> {
    pub loss: T,
    pub d_img: Tensor<T>,
    pub d_txt: Tensor<T>,
    pub d_tau: T,
}

fn normalize_rows<T: Real>(x: &Tensor<T>, what: &str) -> Result<(Vec<T>, Vec<T>)> {
    let (n, d) = (x.rows(), x.cols());
    let mut u = vec![T::zero(); n * d];
    let mut norms = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i);
        let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
        if !(norm > T::zero()) || !norm.is_finite() {
            return Err(Error::Numeric(format!("{what} row {i} has zero or non-finite norm")));
        }
        for j in 0..d {
            u[i * d + j] = row[j] / norm;
        }
        norms.push(norm);
    }
    Ok((u, norms))
}

fn log_softmax_ce<T: Real>(logits: &[T], target: usize, probs: &mut [T]) -> T {
    let (arg, mx) = logits
        .iter()
        .copied()
        .enumerate()
        .fold((0, T::neg_infinity()), |a, (i, l)| if l > a.1 { (i, l) } else { a });
    // the max term contributes exactly 1; ln_1p keeps tiny tails accurate
    let mut rest = T::zero();
    for (i, (p, &l)) in probs.iter_mut().zip(logits).enumerate() {
        *p = (l - mx).exp();
        if i != arg {
            rest += *p;
        }
    }
    let sum = T::one() + rest;
    for p in probs.iter_mut() {
        *p = *p / sum;
    }
    (mx - logits[target]) + rest.ln_1p()
}

/// Symmetric cross-entropy over cosine similarities scaled by `1/τ`, with
/// the closed-form gradient.
pub fn contrastive_loss_grad<T: Real>(img: &Tensor<T>, txt: &Tensor<T>, tau: T) -> Result<ContrastiveOutput<T>> {
    if img.shape().len() != 2 || img.shape() != txt.shape() || img.rows() == 0 {
        return Err(Error::shape(format!(
            "contrastive loss needs two equal [N, d] inputs with N ≥ 1, got {:?} and {:?}",
            img.shape(),
            txt.shape()
        )));
    }
    if !(tau > T::zero()) {
        return Err(Error::config("temperature must be positive"));
    }
    let (n, d) = (img.rows(), img.cols());
    let (u, nu) = normalize_rows(img, "image embedding")?;
    let (v, nv) = normalize_rows(txt, "text embedding")?;
    let inv_tau = T::one() / tau;
    let mut s = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let dot: T = (0..d).map(|k| u[i * d + k] * v[j * d + k]).sum();
            s[i * n + j] = dot * inv_tau;
        }
    }
    let mut loss = T::zero();
    let mut p = vec![T::zero(); n * n];
    let mut q = vec![T::zero(); n * n];
    let mut row = vec![T::zero(); n];
    let mut col = vec![T::zero(); n];
    for i in 0..n {
        loss += log_softmax_ce(&s[i * n..(i + 1) * n], i, &mut row);
        p[i * n..(i + 1) * n].copy_from_slice(&row);
        let column: Vec<T> = (0..n).map(|r| s[r * n + i]).collect();
        loss += log_softmax_ce(&column, i, &mut col);
        for r in 0..n {
            q[r * n + i] = col[r];
        }
    }
    let scale = T::one() / T::from_usize(2 * n).unwrap();
    loss *= scale;
    // dL/dS
    let mut gs = vec![T::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let delta = if i == j { T::from_f64_lossy(2.0) } else { T::zero() };
            gs[i * n + j] = (p[i * n + j] + q[i * n + j] - delta) * scale;
        }
    }
    let d_tau = -(0..n * n).map(|k| gs[k] * s[k]).sum::<T>() * inv_tau;
    let mut du = vec![T::zero(); n * d];
    let mut dv = vec![T::zero(); n * d];
    for i in 0..n {
        for j in 0..n {
            let w = gs[i * n + j] * inv_tau;
            for k in 0..d {
                du[i * d + k] += w * v[j * d + k];
                dv[j * d + k] += w * u[i * d + k];
            }
        }
    }
    let back = |unit: &[T], du: &[T], norms: &[T]| -> Vec<T> {
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let r = &unit[i * d..(i + 1) * d];
            let g = &du[i * d..(i + 1) * d];
            let dot: T = r.iter().zip(g).map(|(&a, &b)| a * b).sum();
            for k in 0..d {
                out[i * d + k] = (g[k] - r[k] * dot) / norms[i];
            }
        }
        out
    };
    Ok(ContrastiveOutput {
        loss,
        d_img: Tensor::new(vec![n, d], back(&u, &du, &nu))?,
        d_txt: Tensor::new(vec![n, d], back(&v, &dv, &nv))?,
        d_tau,
    })
}

pub fn contrastive_loss<T: Real>(img: &Tensor<T>, txt: &Tensor<T>, tau: T) -> Result<f64> {
    Ok(contrastive_loss_grad(img, txt, tau)?.loss.as_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for ClipTrainConfig {
    fn default() -> Self {
        ClipTrainConfig {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_top1: f64,
}

/// Fraction of images whose most similar report, among the reports of the
/// same chunk of `chunk` pairs, describes the same finding (identical label
/// set). Reports are templated, so several distinct strings can describe one
/// finding and the paired string is not the only correct answer.
pub fn retrieval_top1(model: &ClipModel<f32>, samples: &[Sample], vocab: &Vocabulary, chunk: usize) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::config("retrieval needs at least one sample"));
    }
    let mut hits = 0usize;
    for part in samples.chunks(chunk.max(1)) {
        let imgs: Vec<&GrayImage> = part.iter().map(|s| &s.image).collect();
        let iv = model.encode_images(&imgs)?;
        let (u, _) = normalize_rows(&iv, "image embedding")?;
        let txt: Vec<Vec<f32>> = part
            .iter()
            .map(|s| model.encode_text(&tokenize(&s.report, vocab)).map(|e| e.pooled))
            .collect::<Result<_>>()?;
        let d = iv.cols();
        let t = Tensor::new(vec![part.len(), d], txt.concat())?;
        let (v, _) = normalize_rows(&t, "text embedding")?;
        for i in 0..part.len() {
            let best = (0..part.len())
                .map(|j| (j, (0..d).map(|k| u[i * d + k] * v[j * d + k]).sum::<f32>()))
                .fold((0, f32::NEG_INFINITY), |acc, x| if x.1 > acc.1 { x } else { acc })
                .0;
            if same_finding(&part[best].labels, &part[i].labels) {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

fn same_finding(a: &Labels, b: &Labels) -> bool {
    a == b
}

/// Trains from scratch. `on_step(step, loss)` runs after every update.
pub fn train_clip(
    model: &mut ClipModel<f32>,
    train: &[Sample],
    val: &[Sample],
    vocab: &Vocabulary,
    cfg: &ClipTrainConfig,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<ClipEpoch>> {
    if train.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("clip training needs data, batch_size ≥ 1 and lr > 0"));
    }
    let tokens: Vec<TokenizedReport> = train.iter().map(|s| tokenize(&s.report, vocab)).collect();
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, 1 + epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let imgs: Vec<&GrayImage> = idx.iter().map(|&i| &train[i].image).collect();
            let reps: Vec<&TokenizedReport> = idx.iter().map(|&i| &tokens[i]).collect();
            let mut grads = {
                let mut g = Graph::new(&model.store);
                let (l, value) = model.batch_loss(&mut g, &imgs, &reps)?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "clip loss is {value} at epoch {epoch}, step {step} (tau {})",
                        model.tau()
                    )));
                }
                sum += value;
                count += 1;
                let grads = g.backward(l)?;
                on_step(step, value)?;
                grads
            };
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite clip gradient at step {step}")));
            }
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut model.store, &grads);
            model.clamp_tau();
            step += 1;
        }
        let val_top1 = if val.is_empty() {
            f64::NAN
        } else {
            retrieval_top1(model, val, vocab, 64)?
        };
        let loss = sum / count.max(1) as f64;
        log::info!("clip epoch {epoch}: loss {loss:.4} val top-1 {val_top1:.3} tau {:.4}", model.tau());
        history.push(ClipEpoch { epoch, loss, val_top1 });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_vocab, synth_corpus, SynthSpec};
    use crate::nn::gradcheck::{check_param_grads, finite_difference, relative_error};
    use proptest::prelude::{prop_assert, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(vocab: usize) -> ClipConfig {
        ClipConfig {
            text: TextEncoderConfig {
                vocab_size: vocab,
                d_txt: 8,
                layers: 1,
                heads: 2,
                max_len: MAX_TOKENS,
                d_joint: 6,
            },
            image: ImageEncoderConfig {
                image_size: 16,
                channels: [2, 3, 4],
                d_img: 8,
                layers: 1,
                heads: 2,
                d_joint: 6,
            },
        }
    }

    fn mat(n: usize, d: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![n, d], v.to_vec()).unwrap()
    }

    #[test]
    fn single_pair_has_zero_loss() {
        let a = mat(1, 3, &[1.0, 2.0, 3.0]);
        let b = mat(1, 3, &[-1.0, 0.5, 0.0]);
        assert!(contrastive_loss(&a, &b, 0.07).unwrap().abs() < 1e-15);
    }

    #[test]
    fn uniform_logits_give_ln_n() {
        let a = mat(4, 2, &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
        let l = contrastive_loss(&a, &a, 0.1).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((l - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn strongly_diagonal_pair() {
        // cos = ±1 with τ = 0.1 puts ±10 on the logits
        let a = mat(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        let l = contrastive_loss(&a, &a, 0.1).unwrap();
        let want = (-20f64).exp().ln_1p();
        assert!((l - want).abs() < 1e-15 * want, "{l:e} vs {want:e}");
        assert!((l / 2.06e-9 - 1.0).abs() < 0.01);
    }

    #[test]
    fn zero_row_is_an_error() {
        let a = mat(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let b = mat(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        assert!(contrastive_loss(&a, &b, 0.1).is_err());
    }

    fn random_pair(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Tensor<f64>, Tensor<f64>) {
        (Tensor::randn(&[n, d], 1.0, rng), Tensor::randn(&[n, d], 1.0, rng))
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.gen_range(1..=8);
            let d = rng.gen_range(1..=16);
            let (a, b) = random_pair(&mut rng, n, d);
            let tau = rng.gen_range(0.05..0.5);
            let out = contrastive_loss_grad(&a, &b, tau).unwrap();
            let fa = finite_difference(
                |x| contrastive_loss(&mat(n, d, x), &b, tau),
                a.data(),
                1e-4,
            )
            .unwrap();
            let fb = finite_difference(
                |x| contrastive_loss(&a, &mat(n, d, x), tau),
                b.data(),
                1e-4,
            )
            .unwrap();
            let ft = finite_difference(|x| contrastive_loss(&a, &b, x[0]), &[tau], 1e-6).unwrap();
            assert!(relative_error(out.d_img.data(), &fa) < 1e-5);
            assert!(relative_error(out.d_txt.data(), &fb) < 1e-5);
            assert!(relative_error(&[out.d_tau], &ft) < 1e-5);
        }
    }

    proptest! {
        #[test]
        fn loss_is_symmetric_nonnegative_and_scale_invariant(
            seed in 0u64..1000, n in 1usize..8, d in 1usize..10, s in 0.1f64..10.0, tau in 0.01f64..0.5
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = random_pair(&mut rng, n, d);
            let l = contrastive_loss(&a, &b, tau).unwrap();
            prop_assert!(l >= 0.0);
            prop_assert!((l - contrastive_loss(&b, &a, tau).unwrap()).abs() < 1e-10);
            let mut scaled = a.clone();
            let row = rng.gen_range(0..n);
            for v in &mut scaled.data_mut()[row * d..(row + 1) * d] {
                *v *= s;
            }
            prop_assert!((l - contrastive_loss(&scaled, &b, tau).unwrap()).abs() < 1e-9);
        }
    }

    fn tiny_setup() -> (Vec<Sample>, Vocabulary) {
        let corpus = synth_corpus(&SynthSpec::new(6, 2).with_size(16)).unwrap();
        let vocab = build_vocab(&corpus).unwrap();
        (corpus, vocab)
    }

    #[test]
    fn end_to_end_parameter_gradients() {
        let (corpus, vocab) = tiny_setup();
        let model = ClipModel::<f64>::new(tiny_cfg(vocab.len()), 1).unwrap();
        let toks: Vec<TokenizedReport> = corpus.iter().map(|s| tokenize(&s.report, &vocab)).collect();
        let imgs: Vec<&GrayImage> = corpus.iter().map(|s| &s.image).collect();
        let reps: Vec<&TokenizedReport> = toks.iter().collect();
        let mut g = Graph::new(&model.store);
        let (l, _) = model.batch_loss(&mut g, &imgs, &reps).unwrap();
        let grads = g.backward(l).unwrap();
        let report = check_param_grads(
            &model.store,
            &grads,
            |store| {
                let probe = model.with_params(store.clone());
                let mut g = Graph::new(&probe.store);
                Ok(probe.batch_loss(&mut g, &imgs, &reps)?.1)
            },
            1e-5,
            6,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn padding_and_batch_companions_do_not_change_text_features() {
        let (corpus, vocab) = tiny_setup();
        let model = ClipModel::<f32>::new(tiny_cfg(vocab.len()), 3).unwrap();
        let a = tokenize(&corpus[0].report, &vocab);
        let b = tokenize("there is a large opacity in the left lung concerning for pneumonia.", &vocab);
        let alone = model.encode_text(&a).unwrap();
        assert_eq!(alone, model.encode_text(&a).unwrap());
        let mut g = Graph::new(&model.store);
        let f = model.text.forward(&mut g, &[&b, &a]).unwrap();
        let pooled = &g.value(f.pooled).data()[6..12];
        for (x, y) in pooled.iter().zip(&alone.pooled) {
            assert!((x - y).abs() < 1e-6);
        }
        let padded = alone.padded_tokens();
        assert_eq!(padded.shape(), &[MAX_TOKENS, 8]);
        for i in a.len()..MAX_TOKENS {
            assert!(padded.row(i).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn token_order_matters_and_empty_reports_are_finite() {
        let (_, vocab) = tiny_setup();
        let model = ClipModel::<f32>::new(tiny_cfg(vocab.len()), 4).unwrap();
        let a = tokenize("left lung opacity", &vocab);
        let b = tokenize("lung left opacity", &vocab);
        let (ea, eb) = (model.encode_text(&a).unwrap(), model.encode_text(&b).unwrap());
        let dot: f32 = ea.pooled.iter().zip(&eb.pooled).map(|(x, y)| x * y).sum();
        let na: f32 = ea.pooled.iter().map(|x| x * x).sum::<f32>().sqrt();
        let nb: f32 = eb.pooled.iter().map(|x| x * x).sum::<f32>().sqrt();
        assert!(dot / (na * nb) < 1.0 - 1e-6);
        let empty = model.encode_text(&tokenize("", &vocab)).unwrap();
        assert!(empty.pooled.iter().all(|v| v.is_finite()));
        let mut bad = a.clone();
        bad.ids[1] = vocab.len() as u32;
        assert!(model.encode_text(&bad).is_err());
    }

    #[test]
    fn image_encoder_shapes_and_determinism() {
        let (corpus, vocab) = tiny_setup();
        let model = ClipModel::<f32>::new(tiny_cfg(vocab.len()), 5).unwrap();
        let zero = GrayImage {
            size: 16,
            pixels: vec![0; 256],
        };
        assert!(model.encode_image(&zero).unwrap().iter().all(|v| v.is_finite()));
        let img = &corpus[1].image;
        assert_eq!(model.encode_image(img).unwrap(), model.encode_image(&img.clone()).unwrap());
        let wrong = GrayImage {
            size: 32,
            pixels: vec![0; 1024],
        };
        assert!(model.encode_image(&wrong).is_err());
    }

    #[test]
    fn one_step_changes_the_batch_loss() {
        let (corpus, vocab) = tiny_setup();
        let mut model = ClipModel::<f32>::new(tiny_cfg(vocab.len()), 6).unwrap();
        let toks: Vec<TokenizedReport> = corpus.iter().map(|s| tokenize(&s.report, &vocab)).collect();
        let imgs: Vec<&GrayImage> = corpus.iter().map(|s| &s.image).collect();
        let reps: Vec<&TokenizedReport> = toks.iter().collect();
        let before = {
            let mut g = Graph::new(&model.store);
            model.batch_loss(&mut g, &imgs, &reps).unwrap().1
        };
        let cfg = ClipTrainConfig {
            epochs: 1,
            batch_size: corpus.len(),
            ..Default::default()
        };
        train_clip(&mut model, &corpus, &[], &vocab, &cfg, |_, _| Ok(())).unwrap();
        let mut g = Graph::new(&model.store);
        let after = model.batch_loss(&mut g, &imgs, &reps).unwrap().1;
        assert_ne!(before, after);
    }

    #[test]
    fn tau_stays_clamped() {
        let (_, vocab) = tiny_setup();
        let mut model = ClipModel::<f32>::new(tiny_cfg(vocab.len()), 7).unwrap();
        assert!((model.tau() - TAU_INIT).abs() < 1e-6);
        model.store.get_mut(model.log_tau).data_mut()[0] = -20.0;
        model.clamp_tau();
        assert!((model.tau() - TAU_MIN).abs() < 1e-6);
    }
}
