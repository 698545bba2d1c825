//! Transformer denoiser over one joint token sequence
//! `[time | report tokens | latent patches]` with long skip connections.
//!
//! Conditioning is plain joint self-attention: report tokens sit in the same
//! sequence as the image patches, so there is no cross-attention module.
//!
//! With `key_mask` enabled, padded report positions are excluded as attention
//! keys. Their outputs are discarded at the head and every other layer is
//! per-token, so they cannot influence the prediction; the implementation
//! therefore drops them from the sequence entirely, which is exact and makes
//! the sequence only as long as the longest report in the batch.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autoencoder::{LatentTensor, LATENT_CHANNELS};
use crate::clip::ReportEmbedding;
use crate::data::MAX_TOKENS;
use crate::diffusion::{gaussian, q_marginal, NoisePredictor, TimeStep, VarianceSchedule};
use crate::error::{Error, Result};
use crate::nn::layers::sinusoidal_embedding;
use crate::nn::{Adam, Graph, Linear, ParamId, ParamStore, Real, Tensor, TransformerBlock, Var};
use crate::rng::stream;

pub const TIME_EMBED_DIM: usize = 64;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct UViTConfig {
    pub dim: usize,
    pub heads: usize,
    pub n_enc: usize,
    pub n_mid: usize,
    pub n_dec: usize,
    pub patch: usize,
    /// Latent `(h, w, channels)`.
    pub latent: (usize, usize, usize),
    pub text_len: usize,
    pub d_txt: usize,
    /// Exclude padded report positions from attention.
    pub key_mask: bool,
}

impl UViTConfig {
    /// 8×8×8 latents, D = 128, 4/1/4 blocks, patch 2.
    pub fn desk() -> Self {
        UViTConfig {
            dim: 128,
            heads: 4,
            n_enc: 4,
            n_mid: 1,
            n_dec: 4,
            patch: 2,
            latent: (8, 8, LATENT_CHANNELS),
            text_len: MAX_TOKENS,
            d_txt: 128,
            key_mask: true,
        }
    }

    /// 8/1/8 blocks on 32×32×8 latents with the full 256-token report.
    pub fn full_scale() -> Self {
        UViTConfig {
            dim: 512,
            heads: 8,
            n_enc: 8,
            n_mid: 1,
            n_dec: 8,
            patch: 2,
            latent: (32, 32, LATENT_CHANNELS),
            text_len: MAX_TOKENS,
            d_txt: 128,
            key_mask: false,
        }
    }

    /// Tiny configuration used for gradient checks.
    pub fn tiny() -> Self {
        UViTConfig {
            dim: 16,
            heads: 2,
            n_enc: 2,
            n_mid: 1,
            n_dec: 2,
            patch: 2,
            latent: (4, 4, LATENT_CHANNELS),
            text_len: 8,
            d_txt: 8,
            key_mask: false,
        }
    }

    pub fn n_patches(&self) -> usize {
        (self.latent.0 / self.patch) * (self.latent.1 / self.patch)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.latent.2
    }

    /// Full sequence length `1 + text_len + M`.
    pub fn seq_len(&self) -> usize {
        1 + self.text_len + self.n_patches()
    }

    pub fn n_blocks(&self) -> usize {
        self.n_enc + self.n_mid + self.n_dec
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        let (h, w, c) = self.latent;
        if self.patch == 0 || h % self.patch != 0 || w % self.patch != 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::config(format!(
                "latent {h}x{w} not divisible by patch {}",
                self.patch
            )));
        }
        if self.n_enc != self.n_dec {
            return Err(Error::config("encoder and decoder block counts must match for skip pairing"));
        }
        if self.text_len == 0 || self.d_txt == 0 {
            return Err(Error::config("text length and width must be positive"));
        }
        Ok(())
    }
}

/// `[h, w, c]` → `[M, p·p·c]`, patches in row-major order, each flattened
/// as `(dy, dx, c)`.
pub fn patchify<T: Real>(z: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let s = z.shape();
    if s.len() != 3 || p == 0 || !s[0].is_multiple_of(p) || !s[1].is_multiple_of(p) {
        return Err(Error::shape(format!("cannot patchify {s:?} with patch {p}")));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / p, w / p);
    let mut out = Vec::with_capacity(z.numel());
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..p {
                let row = (py * p + dy) * w + px * p;
                out.extend_from_slice(&z.data()[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, p * p * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(x: &Tensor<T>, h: usize, w: usize, c: usize, p: usize) -> Result<Tensor<T>> {
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || x.shape() != [(h / p) * (w / p), p * p * c] {
        return Err(Error::shape(format!(
            "cannot unpatchify {:?} into {h}x{w}x{c} with patch {p}",
            x.shape()
        )));
    }
    let gw = w / p;
    let mut out = vec![T::zero(); h * w * c];
    for (k, patch) in x.data().chunks(p * p * c).enumerate() {
        let (py, px) = (k / gw, k % gw);
        for dy in 0..p {
            let row = (py * p + dy) * w + px * p;
            out[row * c..(row + p) * c].copy_from_slice(&patch[dy * p * c..(dy + 1) * p * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Token sequence on the graph plus the layout needed to run blocks on it.
pub struct Embedded {
    /// Tokens before the position table is added, `[batch·seq, D]`.
    pub raw: Var,
    pub tokens: Var,
    pub batch: usize,
    pub seq: usize,
    /// Text slots per item inside `seq`.
    pub text_slots: usize,
    pub key_mask: Option<Vec<bool>>,
}

#[derive(Clone)]
pub struct UViT<T: Real = f32> {
    pub cfg: UViTConfig,
    pub store: ParamStore<T>,
    time_fc1: Linear,
    time_fc2: Linear,
    text_proj: Linear,
    patch_embed: Linear,
    pos_emb: ParamId,
    enc: Vec<TransformerBlock>,
    mid: Vec<TransformerBlock>,
    dec: Vec<TransformerBlock>,
    skips: Vec<Linear>,
    head: Linear,
}

impl<T: Real> UViT<T> {
    pub fn new(cfg: UViTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, 0);
        let mut store = ParamStore::new();
        let d = cfg.dim;
        let s = &mut store;
        let r = &mut rng;
        let time_fc1 = Linear::new(s, "time.fc1", TIME_EMBED_DIM, d, true, r)?;
        let time_fc2 = Linear::new(s, "time.fc2", d, d, true, r)?;
        let text_proj = Linear::new(s, "text_proj", cfg.d_txt, d, true, r)?;
        let patch_embed = Linear::new(s, "patch_embed", cfg.patch_dim(), d, true, r)?;
        let pos_emb = s.add("pos_emb", Tensor::randn(&[cfg.seq_len(), d], 0.02, r))?;
        let blocks = |prefix: &str, n: usize, s: &mut ParamStore<T>, r: &mut rand_chacha::ChaCha8Rng| {
            (0..n)
                .map(|i| TransformerBlock::new(s, &format!("{prefix}.{i}"), d, cfg.heads, r))
                .collect::<Result<Vec<_>>>()
        };
        let enc = blocks("enc", cfg.n_enc, s, r)?;
        let mid = blocks("mid", cfg.n_mid, s, r)?;
        let mut dec = Vec::with_capacity(cfg.n_dec);
        let mut skips = Vec::with_capacity(cfg.n_dec);
        for i in 0..cfg.n_dec {
            skips.push(Linear::new(s, &format!("skip.{i}"), 2 * d, d, true, r)?);
            dec.push(TransformerBlock::new(s, &format!("dec.{i}"), d, cfg.heads, r)?);
        }
        let head = Linear::new(s, "head", d, cfg.patch_dim(), true, r)?;
        Ok(UViT {
            cfg,
            store,
            time_fc1,
            time_fc2,
            text_proj,
            patch_embed,
            pos_emb,
            enc,
            mid,
            dec,
            skips,
            head,
        })
    }

    pub fn with_params(&self, store: ParamStore<T>) -> Self {
        UViT { store, ..self.clone() }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &TransformerBlock> {
        self.enc.iter().chain(&self.mid).chain(&self.dec)
    }

    /// Output projections of every residual branch.
    pub fn residual_output_params(&self) -> Vec<ParamId> {
        self.blocks().flat_map(|b| b.residual_outputs()).collect()
    }

    fn check_inputs(&self, z_t: &Tensor<T>, t_frac: &[f64], conds: &[&ReportEmbedding]) -> Result<usize> {
        let (h, w, c) = self.cfg.latent;
        let s = z_t.shape();
        if s.len() != 4 || s[1..] != [h, w, c] {
            return Err(Error::shape(format!(
                "denoiser expects [batch, {h}, {w}, {c}], got {s:?}"
            )));
        }
        let b = s[0];
        if b == 0 || t_frac.len() != b || conds.len() != b {
            return Err(Error::shape(format!(
                "batch of {b} latents with {} timesteps and {} conditions",
                t_frac.len(),
                conds.len()
            )));
        }
        for e in conds {
            if e.mask.len() != self.cfg.text_len || e.d_txt() != self.cfg.d_txt {
                return Err(Error::shape(format!(
                    "report embedding {}x{} does not match text {}x{}",
                    e.mask.len(),
                    e.d_txt(),
                    self.cfg.text_len,
                    self.cfg.d_txt
                )));
            }
        }
        Ok(b)
    }

    /// Builds the joint token sequence for a batch.
    pub fn embed_inputs(
        &self,
        g: &mut Graph<'_, T>,
        z_t: &Tensor<T>,
        t_frac: &[f64],
        conds: &[&ReportEmbedding],
    ) -> Result<Embedded> {
        let batch = self.check_inputs(z_t, t_frac, conds)?;
        let cfg = &self.cfg;
        let (h, w, c) = cfg.latent;
        let m = cfg.n_patches();
        let d_txt = cfg.d_txt;

        let mut temb = Vec::with_capacity(batch * TIME_EMBED_DIM);
        for &tf in t_frac {
            temb.extend(sinusoidal_embedding(tf, TIME_EMBED_DIM).into_iter().map(T::from_f64_lossy));
        }
        let tv = g.input(Tensor::new(vec![batch, TIME_EMBED_DIM], temb)?);
        let tv = self.time_fc1.forward(g, tv)?;
        let tv = g.silu(tv);
        let tv = self.time_fc2.forward(g, tv)?;

        // text slots: every position, or only the real ones when masking
        let slots: Vec<Vec<Option<usize>>> = conds
            .iter()
            .map(|e| {
                if cfg.key_mask {
                    (0..cfg.text_len).filter(|&i| e.mask[i]).map(Some).collect()
                } else {
                    (0..cfg.text_len).map(Some).collect()
                }
            })
            .collect();
        let l = slots.iter().map(Vec::len).max().unwrap_or(0);
        let mut text = vec![T::zero(); batch * l * d_txt];
        let mut text_pos = Vec::with_capacity(batch * l);
        for (b, (e, sl)) in conds.iter().zip(&slots).enumerate() {
            let mut real = 0;
            for j in 0..l {
                match sl.get(j).copied().flatten() {
                    Some(p) => {
                        if e.mask[p] {
                            let dst = &mut text[(b * l + j) * d_txt..(b * l + j + 1) * d_txt];
                            for (o, &v) in dst.iter_mut().zip(e.tokens.row(real)) {
                                *o = T::from_f64_lossy(v as f64);
                            }
                            real += 1;
                        }
                        text_pos.push(Some(p));
                    }
                    None => text_pos.push(None),
                }
            }
        }
        let xv = if l > 0 {
            let x = g.input(Tensor::new(vec![batch * l, d_txt], text)?);
            Some(self.text_proj.forward(g, x)?)
        } else {
            None
        };

        let mut patches = Vec::with_capacity(batch * m * cfg.patch_dim());
        for item in z_t.data().chunks(h * w * c) {
            let zi = Tensor::new(vec![h, w, c], item.to_vec())?;
            patches.extend_from_slice(patchify(&zi, cfg.patch)?.data());
        }
        let pv = g.input(Tensor::new(vec![batch * m, cfg.patch_dim()], patches)?);
        let pv = self.patch_embed.forward(g, pv)?;

        // interleave [time | text | image] per item
        let seq = 1 + l + m;
        let mut parts = vec![tv];
        parts.extend(xv);
        parts.push(pv);
        let all = g.concat_rows(&parts)?;
        let (text_base, img_base) = (batch, batch + batch * l);
        let mut order = Vec::with_capacity(batch * seq);
        let mut pos_idx = Vec::with_capacity(batch * seq);
        let mut mask = Vec::with_capacity(batch * seq);
        for b in 0..batch {
            order.push(b);
            pos_idx.push(0);
            mask.push(true);
            for j in 0..l {
                order.push(text_base + b * l + j);
                match text_pos[b * l + j] {
                    Some(p) => {
                        pos_idx.push(1 + p);
                        mask.push(!cfg.key_mask || conds[b].mask[p]);
                    }
                    None => {
                        pos_idx.push(1 + j);
                        mask.push(false);
                    }
                }
            }
            for k in 0..m {
                order.push(img_base + b * m + k);
                pos_idx.push(1 + cfg.text_len + k);
                mask.push(true);
            }
        }
        let raw = g.gather_rows(all, order)?;
        let pos = g.param(self.pos_emb);
        let pos = g.gather_rows(pos, pos_idx)?;
        let tokens = g.add(raw, pos)?;
        let key_mask = if mask.iter().all(|&k| k) { None } else { Some(mask) };
        Ok(Embedded {
            raw,
            tokens,
            batch,
            seq,
            text_slots: l,
            key_mask,
        })
    }

    /// Noise prediction in patch layout, `[batch·M, p·p·c]`.
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        z_t: &Tensor<T>,
        t_frac: &[f64],
        conds: &[&ReportEmbedding],
    ) -> Result<Var> {
        let e = self.embed_inputs(g, z_t, t_frac, conds)?;
        let (batch, seq) = (e.batch, e.seq);
        let mask = e.key_mask.as_deref();
        let mut x = e.tokens;
        let mut stored = Vec::with_capacity(self.enc.len());
        for b in &self.enc {
            x = b.forward(g, x, batch, seq, mask)?;
            stored.push(x);
        }
        for b in &self.mid {
            x = b.forward(g, x, batch, seq, mask)?;
        }
        for (b, skip) in self.dec.iter().zip(&self.skips) {
            // LIFO: the first encoder output feeds the last decoder block
            let s = stored.pop().expect("one stored output per decoder block");
            let cat = g.concat_cols(x, s)?;
            x = skip.forward(g, cat)?;
            x = b.forward(g, x, batch, seq, mask)?;
        }
        let m = self.cfg.n_patches();
        let img_rows = (0..batch)
            .flat_map(|b| (0..m).map(move |k| b * seq + 1 + e.text_slots + k))
            .collect();
        let img = g.gather_rows(x, img_rows)?;
        self.head.forward(g, img)
    }

    /// `eps_hat` with the same `[batch, h, w, c]` shape as `z_t`.
    pub fn denoise(&self, z_t: &Tensor<T>, t_frac: &[f64], conds: &[&ReportEmbedding]) -> Result<Tensor<T>> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, z_t, t_frac, conds)?;
        let (h, w, c) = self.cfg.latent;
        let m = self.cfg.n_patches();
        let pd = self.cfg.patch_dim();
        let mut data = Vec::with_capacity(z_t.numel());
        for item in g.value(out).data().chunks(m * pd) {
            let p = Tensor::new(vec![m, pd], item.to_vec())?;
            data.extend(unpatchify(&p, h, w, c, self.cfg.patch)?.into_data());
        }
        Tensor::new(z_t.shape().to_vec(), data)
    }

    /// Noise-prediction loss on a batch of clean latents. Each item draws its
    /// own `t ~ U{1..T}` and `ε ~ N(0, I)` from `rng`.
    pub fn batch_loss(
        &self,
        g: &mut Graph<'_, T>,
        z0: &[&Tensor<T>],
        conds: &[&ReportEmbedding],
        sched: &VarianceSchedule,
        rng: &mut impl Rng,
    ) -> Result<(Var, f64)> {
        let nb = NoisyBatch::draw(z0, sched, rng)?;
        let fracs: Vec<f64> = nb.t.iter().map(|t| t.fraction()).collect();
        let out = self.forward(g, &nb.z_t, &fracs, conds)?;
        let mut target = Vec::with_capacity(nb.eps.numel());
        let item = nb.eps.numel() / z0.len();
        let (h, w, c) = self.cfg.latent;
        for e in nb.eps.data().chunks(item) {
            let e = Tensor::new(vec![h, w, c], e.to_vec())?;
            target.extend(patchify(&e, self.cfg.patch)?.into_data());
        }
        let target = Tensor::new(g.shape(out).to_vec(), target)?;
        let l = g.mse(out, &target)?;
        let v = g.value(l).data()[0].as_f64();
        if !v.is_finite() {
            let ts: Vec<usize> = nb.t.iter().map(|t| t.get()).collect();
            return Err(Error::Numeric(format!("denoiser loss is {v} for timesteps {ts:?}")));
        }
        Ok((l, v))
    }
}

/// Forward-noised batch: `z_t = q_marginal(z0, t, ε)` per item, stacked
/// `[batch, h, w, c]`.
pub struct NoisyBatch<T> {
    pub z_t: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: Vec<TimeStep>,
}

impl<T: Real> NoisyBatch<T> {
    pub fn draw(z0: &[&Tensor<T>], sched: &VarianceSchedule, rng: &mut impl Rng) -> Result<Self> {
        let first = z0.first().ok_or_else(|| Error::config("denoiser loss needs a nonempty batch"))?;
        let mut shape = vec![z0.len()];
        shape.extend_from_slice(first.shape());
        let mut zt = Vec::with_capacity(z0.len() * first.numel());
        let mut eps_all = Vec::with_capacity(z0.len() * first.numel());
        let mut ts = Vec::with_capacity(z0.len());
        for z in z0 {
            let t = TimeStep::new(rng.gen_range(1..=sched.len()), sched)?;
            let eps = gaussian::<T>(z.shape(), rng);
            zt.extend(q_marginal(z, t, &eps, sched)?.into_data());
            eps_all.extend(eps.into_data());
            ts.push(t);
        }
        Ok(NoisyBatch {
            z_t: Tensor::new(shape.clone(), zt)?,
            eps: Tensor::new(shape, eps_all)?,
            t: ts,
        })
    }
}

/// Mean over the batch of `‖ε − ε̂‖² / numel` for any noise predictor.
pub fn noise_prediction_loss<T: Real>(
    z0: &[&Tensor<T>],
    sched: &VarianceSchedule,
    rng: &mut impl Rng,
    mut predict: impl FnMut(&Tensor<T>, &[TimeStep]) -> Result<Tensor<T>>,
) -> Result<f64> {
    let nb = NoisyBatch::draw(z0, sched, rng)?;
    let eps_hat = predict(&nb.z_t, &nb.t)?;
    if eps_hat.shape() != nb.eps.shape() {
        return Err(Error::shape("noise prediction shape differs from the noise"));
    }
    let item = nb.eps.numel() / z0.len();
    let mut total = 0.0;
    for (i, (e, p)) in nb.eps.data().chunks(item).zip(eps_hat.data().chunks(item)).enumerate() {
        let mse = e.iter().zip(p).map(|(&a, &b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / item as f64;
        if !mse.is_finite() {
            return Err(Error::Numeric(format!("loss is {mse} at timestep {}", nb.t[i].get())));
        }
        total += mse;
    }
    Ok(total / z0.len() as f64)
}

impl NoisePredictor<f32, ReportEmbedding> for UViT<f32> {
    fn predict_noise(&self, x_t: &Tensor<f32>, t: TimeStep, cond: &[ReportEmbedding]) -> Result<Tensor<f32>> {
        let refs: Vec<&ReportEmbedding> = cond.iter().collect();
        self.denoise(x_t, &vec![t.fraction(); refs.len()], &refs)
    }
}

/// Scaled clean latents paired with indices into a table of report embeddings.
pub struct DenoiserData {
    pub latents: Vec<LatentTensor>,
    pub cond_of: Vec<usize>,
    pub conds: Vec<ReportEmbedding>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for DenoiserTrainConfig {
    fn default() -> Self {
        DenoiserTrainConfig {
            epochs: 60,
            batch_size: 32,
            lr: 3e-4,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserEpoch {
    pub epoch: usize,
    pub loss: f64,
}

/// Minimizes the noise-prediction loss. `on_step(step, loss)` runs after
/// every update; `on_epoch(epoch)` runs after every epoch.
pub fn train_denoiser(
    model: &mut UViT<f32>,
    data: &DenoiserData,
    sched: &VarianceSchedule,
    cfg: &DenoiserTrainConfig,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
    mut on_epoch: impl FnMut(usize) -> Result<()>,
) -> Result<Vec<DenoiserEpoch>> {
    if data.latents.is_empty() || data.latents.len() != data.cond_of.len() {
        return Err(Error::config("denoiser training needs one condition per latent"));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("batch_size must be ≥ 1 and lr > 0"));
    }
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut order: Vec<usize> = (0..data.latents.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    let noise_seed = crate::rng::derive_seed(cfg.seed, "denoiser-noise");
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, 1 + epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let z0: Vec<&Tensor<f32>> = idx.iter().map(|&i| &data.latents[i]).collect();
            let conds: Vec<&ReportEmbedding> = idx.iter().map(|&i| &data.conds[data.cond_of[i]]).collect();
            let mut rng = stream(noise_seed, step);
            let mut grads = {
                let mut g = Graph::new(&model.store);
                let (l, value) = model
                    .batch_loss(&mut g, &z0, &conds, sched, &mut rng)
                    .map_err(|e| match e {
                        Error::Numeric(m) => Error::Numeric(format!("step {step}: {m}")),
                        other => other,
                    })?;
                sum += value;
                count += 1;
                on_step(step, value)?;
                g.backward(l)?
            };
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite denoiser gradient at step {step}")));
            }
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut model.store, &grads);
            step += 1;
        }
        let loss = sum / count.max(1) as f64;
        log::info!("denoiser epoch {epoch}: loss {loss:.4}");
        history.push(DenoiserEpoch { epoch, loss });
        on_epoch(epoch)?;
    }
    Ok(history)
}
