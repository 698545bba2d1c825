//! Convolutional autoencoder that defines the latent space for diffusion.
//!
//! Encoder: a stride-1 input conv, one stride-2 conv per halving, then a conv
//! to eight latent channels. Decoder mirrors it with nearest-neighbour
//! upsampling and ends in `tanh`, so reconstructions stay in `[-1, 1]`.
//! Latents are exposed channel-last, `[h, w, 8]`.

use rand::seq::SliceRandom;

use crate::data::{GrayImage, Sample};
use crate::error::{Error, Result};
use crate::nn::{Adam, Conv2d, Graph, ParamStore, Real, Tensor, Var};
use crate::rng::stream;

pub const LATENT_CHANNELS: usize = 8;

/// `[h, w, 8]` latent of one image.
pub type LatentTensor = Tensor<f32>;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AutoencoderConfig {
    pub image_size: usize,
    pub downsample: usize,
    /// Width at full resolution followed by the width after each halving.
    pub channels: Vec<usize>,
}

impl AutoencoderConfig {
    pub fn desk(image_size: usize) -> Self {
        AutoencoderConfig {
            image_size,
            downsample: 4,
            channels: vec![16, 32, 64],
        }
    }

    /// 256×256 inputs, factor 8, 32×32×8 latents.
    pub fn full_scale() -> Self {
        AutoencoderConfig {
            image_size: 256,
            downsample: 8,
            channels: vec![32, 64, 128, 128],
        }
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    pub fn latent_side(&self) -> usize {
        self.image_size / self.downsample
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_side(), self.latent_side(), LATENT_CHANNELS]
    }

    pub fn validate(&self) -> Result<()> {
        if !self.downsample.is_power_of_two() {
            return Err(Error::config(format!(
                "downsample factor {} is not a power of two",
                self.downsample
            )));
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(self.downsample) {
            return Err(Error::config(format!(
                "image size {} not divisible by downsample factor {}",
                self.image_size, self.downsample
            )));
        }
        if self.channels.len() != self.stages() + 1 || self.channels.contains(&0) {
            return Err(Error::config(format!(
                "expected {} positive channel widths for factor {}",
                self.stages() + 1,
                self.downsample
            )));
        }
        Ok(())
    }
}

pub struct Autoencoder<T: Real = f32> {
    pub cfg: AutoencoderConfig,
    pub store: ParamStore<T>,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    /// Per-channel mean of the training latents, removed before diffusion.
    pub latent_shift: Vec<f64>,
    /// Multiplies centred latents to give roughly unit variance for diffusion.
    pub latent_scale: f64,
}

impl<T: Real> Autoencoder<T> {
    pub fn new(cfg: AutoencoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(seed, 0);
        let mut store = ParamStore::new();
        let ch = &cfg.channels;
        let mut enc = vec![Conv2d::new(&mut store, "enc.in", 1, ch[0], 3, 1, 1, &mut rng)?];
        for i in 0..cfg.stages() {
            enc.push(Conv2d::new(&mut store, &format!("enc.down.{i}"), ch[i], ch[i + 1], 3, 2, 1, &mut rng)?);
        }
        let last = *ch.last().unwrap();
        enc.push(Conv2d::new(&mut store, "enc.out", last, LATENT_CHANNELS, 3, 1, 1, &mut rng)?);
        let mut dec = vec![Conv2d::new(&mut store, "dec.in", LATENT_CHANNELS, last, 3, 1, 1, &mut rng)?];
        for i in (0..cfg.stages()).rev() {
            dec.push(Conv2d::new(&mut store, &format!("dec.up.{i}"), ch[i + 1], ch[i], 3, 1, 1, &mut rng)?);
        }
        dec.push(Conv2d::new(&mut store, "dec.out", ch[0], 1, 3, 1, 1, &mut rng)?);
        Ok(Autoencoder {
            cfg,
            store,
            enc,
            dec,
            latent_shift: vec![0.0; LATENT_CHANNELS],
            latent_scale: 1.0,
        })
    }

    /// Raw encoder output to the normalized space the denoiser works in.
    pub fn to_diffusion(&self, z: &mut LatentTensor) {
        let scale = self.latent_scale as f32;
        for px in z.data_mut().chunks_mut(LATENT_CHANNELS) {
            for (v, &m) in px.iter_mut().zip(&self.latent_shift) {
                *v = (*v - m as f32) * scale;
            }
        }
    }

    pub fn from_diffusion(&self, z: &mut LatentTensor) {
        let inv = (1.0 / self.latent_scale) as f32;
        for px in z.data_mut().chunks_mut(LATENT_CHANNELS) {
            for (v, &m) in px.iter_mut().zip(&self.latent_shift) {
                *v = *v * inv + m as f32;
            }
        }
    }

    /// `[b, 1, H, W]` → `[b, 8, h, w]`.
    pub fn encode_graph(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = x;
        let n = self.enc.len();
        for (i, c) in self.enc.iter().enumerate() {
            h = c.forward(g, h)?;
            if i + 1 < n {
                h = g.gelu(h);
            }
        }
        Ok(h)
    }

    /// `[b, 8, h, w]` → `[b, 1, H, W]` in `[-1, 1]`.
    pub fn decode_graph(&self, g: &mut Graph<'_, T>, z: Var) -> Result<Var> {
        let n = self.dec.len();
        let mut h = z;
        for (i, c) in self.dec.iter().enumerate() {
            if i > 0 && i + 1 < n {
                h = g.upsample2(h)?;
            }
            h = c.forward(g, h)?;
            h = if i + 1 < n { g.gelu(h) } else { g.tanh(h) };
        }
        Ok(h)
    }

    fn image_input(&self, images: &[&Tensor<f32>]) -> Result<Tensor<T>> {
        let s = self.cfg.image_size;
        let mut data = Vec::with_capacity(images.len() * s * s);
        for img in images {
            if img.shape() != [s, s] {
                return Err(Error::shape(format!(
                    "autoencoder expects {s}x{s} images, got {:?}",
                    img.shape()
                )));
            }
            data.extend(img.data().iter().map(|&v| T::from_f64_lossy(v as f64)));
        }
        Tensor::new(vec![images.len(), 1, s, s], data)
    }

    /// Encodes `[H, W]` images in `[-1, 1]` to unscaled `[h, w, 8]` latents.
    pub fn encode_batch(&self, images: &[&Tensor<f32>]) -> Result<Vec<LatentTensor>> {
        let [h, w, c] = self.cfg.latent_shape();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new(&self.store);
            let x = g.input(self.image_input(chunk)?);
            let z = self.encode_graph(&mut g, x)?;
            let rows = g.nchw_to_rows(z)?;
            for item in g.value(rows).data().chunks(h * w * c) {
                out.push(Tensor::new(vec![h, w, c], item.iter().map(|v| v.as_f64() as f32).collect())?);
            }
        }
        Ok(out)
    }

    pub fn encode(&self, image: &Tensor<f32>) -> Result<LatentTensor> {
        Ok(self.encode_batch(&[image])?.pop().expect("one latent per image"))
    }

    /// Decodes unscaled `[h, w, 8]` latents to `[H, W]` images.
    pub fn decode_batch(&self, latents: &[&LatentTensor]) -> Result<Vec<Tensor<f32>>> {
        let [h, w, c] = self.cfg.latent_shape();
        let s = self.cfg.image_size;
        let mut out = Vec::with_capacity(latents.len());
        for chunk in latents.chunks(64) {
            let mut data = vec![T::zero(); chunk.len() * c * h * w];
            for (b, z) in chunk.iter().enumerate() {
                if z.shape() != [h, w, c] {
                    return Err(Error::shape(format!(
                        "latent {:?} does not match configured {:?}",
                        z.shape(),
                        [h, w, c]
                    )));
                }
                for p in 0..h * w {
                    for ch in 0..c {
                        data[(b * c + ch) * h * w + p] = T::from_f64_lossy(z.data()[p * c + ch] as f64);
                    }
                }
            }
            let mut g = Graph::new(&self.store);
            let z = g.input(Tensor::new(vec![chunk.len(), c, h, w], data)?);
            let x = self.decode_graph(&mut g, z)?;
            for item in g.value(x).data().chunks(s * s) {
                out.push(Tensor::new(vec![s, s], item.iter().map(|v| v.as_f64() as f32).collect())?);
            }
        }
        Ok(out)
    }

    pub fn decode(&self, z: &LatentTensor) -> Result<Tensor<f32>> {
        Ok(self.decode_batch(&[z])?.pop().expect("one image per latent"))
    }

    /// Mean squared reconstruction error of a batch, recorded on `g`.
    pub fn batch_loss(&self, g: &mut Graph<'_, T>, images: &[&Tensor<f32>]) -> Result<(Var, f64)> {
        let x = self.image_input(images)?;
        let xv = g.input(x.clone());
        let z = self.encode_graph(g, xv)?;
        let y = self.decode_graph(g, z)?;
        let l = g.mse(y, &x)?;
        let v = g.value(l).data()[0].as_f64();
        Ok((l, v))
    }
}

/// Image as an `[H, W]` tensor in `[-1, 1]`.
pub fn signed_image(img: &GrayImage) -> Tensor<f32> {
    Tensor::new(vec![img.size, img.size], img.to_signed()).expect("square image")
}

/// PSNR in dB of two `[-1, 1]` images, measured on the `[0, 1]` scale.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x as f64 - y as f64) / 2.0).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    10.0 * (1.0 / mse.max(1e-20)).log10()
}

/// Mean reconstruction PSNR over a set of samples.
pub fn mean_psnr(ae: &Autoencoder<f32>, samples: &[Sample]) -> Result<f64> {
    let imgs: Vec<Tensor<f32>> = samples.iter().map(|s| signed_image(&s.image)).collect();
    let refs: Vec<&Tensor<f32>> = imgs.iter().collect();
    let z = ae.encode_batch(&refs)?;
    let zr: Vec<&LatentTensor> = z.iter().collect();
    let rec = ae.decode_batch(&zr)?;
    Ok(imgs.iter().zip(&rec).map(|(a, b)| psnr(a, b)).sum::<f64>() / imgs.len().max(1) as f64)
}

/// Per-channel `(mean, std)` of latents plus the global std.
pub fn latent_stats(latents: &[LatentTensor]) -> (Vec<(f64, f64)>, f64) {
    let mut sums = [(0.0, 0.0); LATENT_CHANNELS];
    let mut n = 0usize;
    for z in latents {
        for px in z.data().chunks(LATENT_CHANNELS) {
            for (s, &v) in sums.iter_mut().zip(px) {
                s.0 += v as f64;
                s.1 += (v as f64).powi(2);
            }
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    let per: Vec<(f64, f64)> = sums
        .iter()
        .map(|&(s, sq)| {
            let m = s / n;
            (m, (sq / n - m * m).max(0.0).sqrt())
        })
        .collect();
    let total: f64 = sums.iter().map(|s| s.0).sum::<f64>() / (n * LATENT_CHANNELS as f64);
    let total_sq: f64 = sums.iter().map(|s| s.1).sum::<f64>() / (n * LATENT_CHANNELS as f64);
    (per, (total_sq - total * total).max(0.0).sqrt())
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for AeTrainConfig {
    fn default() -> Self {
        AeTrainConfig {
            epochs: 12,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_psnr: f64,
}

/// Minimizes reconstruction MSE, then fits the latent normalization: the
/// per-channel means of the training latents and the inverse std left after
/// removing them.
pub fn train_autoencoder(
    ae: &mut Autoencoder<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &AeTrainConfig,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<AeEpoch>> {
    if train.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("autoencoder training needs data, batch_size ≥ 1 and lr > 0"));
    }
    let images: Vec<Tensor<f32>> = train.iter().map(|s| signed_image(&s.image)).collect();
    let mut opt = Adam::new(&ae.store, cfg.lr);
    let mut order: Vec<usize> = (0..images.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, 1 + epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let batch: Vec<&Tensor<f32>> = idx.iter().map(|&i| &images[i]).collect();
            let mut grads = {
                let mut g = Graph::new(&ae.store);
                let (l, value) = ae.batch_loss(&mut g, &batch)?;
                if !value.is_finite() {
                    return Err(Error::Numeric(format!(
                        "autoencoder loss is {value} at epoch {epoch}, step {step}"
                    )));
                }
                sum += value;
                count += 1;
                on_step(step, value)?;
                g.backward(l)?
            };
            if !grads.is_finite() {
                return Err(Error::Numeric(format!("non-finite autoencoder gradient at step {step}")));
            }
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut ae.store, &grads);
            step += 1;
        }
        let val_psnr = if val.is_empty() { f64::NAN } else { mean_psnr(ae, val)? };
        let loss = sum / count.max(1) as f64;
        log::info!("autoencoder epoch {epoch}: loss {loss:.5} val psnr {val_psnr:.2} dB");
        history.push(AeEpoch { epoch, loss, val_psnr });
    }
    let refs: Vec<&Tensor<f32>> = images.iter().collect();
    let (per, _) = latent_stats(&ae.encode_batch(&refs)?);
    let std = (per.iter().map(|&(_, s)| s * s).sum::<f64>() / per.len() as f64).sqrt();
    if !(std > 0.0 && std.is_finite()) {
        return Err(Error::Numeric(format!("degenerate latent std {std}")));
    }
    ae.latent_shift = per.iter().map(|&(m, _)| m).collect();
    ae.latent_scale = 1.0 / std;
    Ok(history)
}
