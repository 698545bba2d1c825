//! Report-to-image generation from trained stage checkpoints.

use std::path::Path;

use crate::autoencoder::Autoencoder;
use crate::clip::{ClipModel, ReportEmbedding};
use crate::data::{tokenize, GrayImage, Vocabulary};
use crate::diffusion::{sample, Sampler, VarianceSchedule};
use crate::nn::Tensor;
use crate::trainer::{load_autoencoder, load_clip, load_denoiser};
use crate::uvit::UViT;
use crate::{Error, Result};

/// Items sampled together; results do not depend on it.
const GEN_BATCH: usize = 32;

pub struct Pipeline {
    pub vocab: Vocabulary,
    pub clip: ClipModel<f32>,
    pub ae: Autoencoder<f32>,
    pub denoiser: UViT<f32>,
    pub sched: VarianceSchedule,
}

impl Pipeline {
    /// Loads the clip, autoencoder and denoiser checkpoints from `dir`.
    pub fn load(dir: &Path) -> Result<Self> {
        let (clip, vocab) = load_clip(dir)?;
        let ae = load_autoencoder(dir)?;
        let (denoiser, sched) = load_denoiser(dir)?;
        let p = Pipeline {
            vocab,
            clip,
            ae,
            denoiser,
            sched,
        };
        p.check()?;
        Ok(p)
    }

    fn check(&self) -> Result<()> {
        let [h, w, c] = self.ae.cfg.latent_shape();
        let u = &self.denoiser.cfg;
        if u.latent != (h, w, c) || u.d_txt != self.clip.cfg.text.d_txt || u.text_len != self.clip.cfg.text.max_len {
            return Err(Error::shape(
                "denoiser checkpoint does not match the clip and autoencoder checkpoints",
            ));
        }
        Ok(())
    }

    pub fn encode_report(&self, report: &str) -> Result<ReportEmbedding> {
        self.clip.encode_text(&tokenize(report, &self.vocab))
    }

    /// One image per (condition, seed) pair.
    pub fn generate_from(&self, conds: &[ReportEmbedding], seeds: &[u64], steps: usize, sampler: Sampler) -> Result<Vec<GrayImage>> {
        if conds.len() != seeds.len() {
            return Err(Error::config("one seed per report"));
        }
        let (h, w, c) = self.denoiser.cfg.latent;
        let mut out = Vec::with_capacity(conds.len());
        for (cs, ss) in conds.chunks(GEN_BATCH).zip(seeds.chunks(GEN_BATCH)) {
            let z = sample(&self.denoiser, cs, &self.sched, steps, ss, &[h, w, c], sampler)?;
            let latents: Vec<Tensor<f32>> = z
                .data()
                .chunks(h * w * c)
                .map(|item| {
                    let mut z = Tensor::new(vec![h, w, c], item.to_vec())?;
                    self.ae.from_diffusion(&mut z);
                    Ok(z)
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor<f32>> = latents.iter().collect();
            for img in self.ae.decode_batch(&refs)? {
                if !img.is_finite() {
                    return Err(Error::Numeric("generated image has non-finite pixels".into()));
                }
                out.push(GrayImage::from_signed(img.shape()[0], img.data()));
            }
        }
        Ok(out)
    }

    pub fn generate(&self, reports: &[&str], seeds: &[u64], steps: usize, sampler: Sampler) -> Result<Vec<GrayImage>> {
        let conds = reports
            .iter()
            .map(|r| self.encode_report(r))
            .collect::<Result<Vec<_>>>()?;
        self.generate_from(&conds, seeds, steps, sampler)
    }

    pub fn generate_one(&self, report: &str, seed: u64, steps: usize, sampler: Sampler) -> Result<GrayImage> {
        Ok(self.generate(&[report], &[seed], steps, sampler)?.remove(0))
    }
}

/// Images of independent uniform pixels, the FID reference for "no signal".
pub fn noise_images(n: usize, size: usize, seed: u64) -> Vec<GrayImage> {
    use rand::Rng;
    let mut rng = crate::rng::stream(seed, 0);
    (0..n)
        .map(|_| GrayImage {
            size,
            pixels: (0..size * size).map(|_| rng.gen()).collect(),
        })
        .collect()
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct EvalSummary {
    /// FID of generated images against the real test images.
    pub fid: f64,
    /// FID of uniform-noise images against the same reference.
    pub fid_noise: f64,
    /// FID of held-out real images against the same reference.
    pub fid_real: Option<f64>,
    pub auroc: serde_json::Map<String, serde_json::Value>,
    pub params: u64,
    pub flops_batch4: u64,
    pub sec_per_image: f64,
    pub n_gen: usize,
    pub steps: usize,
    pub seed: u64,
    pub feature_extractor: &'static str,
}

impl EvalSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    /// `key value` lines for terminals.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "fid {:.4}\nfid_noise {:.4}\n",
            self.fid, self.fid_noise
        );
        if let Some(r) = self.fid_real {
            s += &format!("fid_real {r:.4}\n");
        }
        for (k, v) in &self.auroc {
            s += &format!("auroc.{k} {:.4}\n", v.as_f64().unwrap_or(f64::NAN));
        }
        s += &format!(
            "params {}\nflops_batch4 {}\nsec_per_image {:.4}\nn_gen {}\nsteps {}\nseed {}\n",
            self.params, self.flops_batch4, self.sec_per_image, self.n_gen, self.steps, self.seed
        );
        s
    }
}

pub struct EvalRequest<'a> {
    /// Reports and labels to generate from; the real images are the FID reference.
    pub test: &'a [crate::data::Sample],
    /// Optional second real set for a real-vs-real calibration FID.
    pub held_out: &'a [crate::data::Sample],
    pub n_gen: usize,
    pub steps: usize,
    pub seed: u64,
    pub sampler: Sampler,
    pub latency_trials: usize,
}

/// Generates one image per test report (cycling when `n_gen` exceeds the
/// test set), then scores realism, alignment and cost.
pub fn evaluate(p: &Pipeline, classifier: &crate::eval::ToyClassifier<f32>, req: &EvalRequest<'_>) -> Result<EvalSummary> {
    use crate::eval::{alignment_eval, count_flops, count_params, fid, measure_latency};
    if req.test.is_empty() || req.n_gen < 2 {
        return Err(Error::config("evaluation needs test samples and n_gen ≥ 2"));
    }
    let picked: Vec<&crate::data::Sample> = req.test.iter().cycle().take(req.n_gen).collect();
    let reports: Vec<&str> = picked.iter().map(|s| s.report.as_str()).collect();
    let seeds: Vec<u64> = (0..req.n_gen as u64).map(|i| crate::rng::derive_seed(req.seed, &format!("eval-{i}"))).collect();
    let generated = p.generate(&reports, &seeds, req.steps, req.sampler)?;
    let gen_refs: Vec<&GrayImage> = generated.iter().collect();
    let real: Vec<&GrayImage> = req.test.iter().map(|s| &s.image).collect();
    let size = real[0].size;
    let noise = noise_images(req.n_gen, size, crate::rng::derive_seed(req.seed, "noise"));
    let noise_refs: Vec<&GrayImage> = noise.iter().collect();
    let fid_gen = fid(&real, &gen_refs, &p.clip)?;
    let fid_noise = fid(&real, &noise_refs, &p.clip)?;
    let fid_real = if req.held_out.len() >= 2 {
        let h: Vec<&GrayImage> = req.held_out.iter().map(|s| &s.image).collect();
        Some(fid(&real, &h, &p.clip)?)
    } else {
        None
    };
    let labels: Vec<crate::data::Labels> = picked.iter().map(|s| s.labels).collect();
    let align = alignment_eval(classifier, &gen_refs, &labels)?;
    let mut auroc = serde_json::Map::new();
    for (k, v) in &align.per_label {
        auroc.insert(k.clone(), (*v).into());
    }
    auroc.insert("avg".into(), align.avg.into());
    let lat = measure_latency(req.steps, req.latency_trials, || {
        p.generate_one(reports[0], seeds[0], req.steps, req.sampler).map(|_| ())
    })?;
    Ok(EvalSummary {
        fid: fid_gen,
        fid_noise,
        fid_real,
        auroc,
        params: count_params(&p.denoiser.cfg)?,
        flops_batch4: count_flops(&p.denoiser.cfg, 4)?,
        sec_per_image: lat.median_sec,
        n_gen: req.n_gen,
        steps: req.steps,
        seed: req.seed,
        feature_extractor: "clip-image-pooled",
    })
}
