//! Stage-level training: corpus loading, prerequisite checks, metrics files
//! and checkpoint writing.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autoencoder::{signed_image, train_autoencoder, AeTrainConfig, Autoencoder, AutoencoderConfig};
use crate::checkpoint::Checkpoint;
use crate::clip::{retrieval_top1, train_clip, ClipConfig, ClipModel, ClipTrainConfig, ReportEmbedding};
use crate::config::RunConfig;
use crate::data::{build_vocab, load_manifest, split_corpus, tokenize, Sample, Vocabulary};
use crate::diffusion::{make_schedule, ScheduleKind, VarianceSchedule};
use crate::eval::{train_classifier, ClassifierTrainConfig, ToyClassifier};
use crate::rng::{derive_seed, entropy_seed};
use crate::uvit::{train_denoiser, DenoiserData, DenoiserTrainConfig, UViT, UViTConfig};
use crate::{Error, Result};

pub const VOCAB_FILE: &str = "vocab.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stage {
    Clip,
    Autoencoder,
    Denoiser,
    Classifier,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Clip, Stage::Autoencoder, Stage::Denoiser, Stage::Classifier];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Clip => "clip",
            Stage::Autoencoder => "autoencoder",
            Stage::Denoiser => "denoiser",
            Stage::Classifier => "classifier",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "clip" => Ok(Stage::Clip),
            "ae" | "autoencoder" => Ok(Stage::Autoencoder),
            "denoiser" => Ok(Stage::Denoiser),
            "classifier" => Ok(Stage::Classifier),
            _ => Err(Error::config(format!(
                "unknown stage {s:?}; expected clip, ae, denoiser or classifier"
            ))),
        }
    }

    pub fn prerequisites(self) -> &'static [Stage] {
        match self {
            Stage::Denoiser => &[Stage::Clip, Stage::Autoencoder],
            _ => &[],
        }
    }

    pub fn checkpoint_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.ckpt", self.name()))
    }

    pub fn metrics_path(self, dir: &Path) -> PathBuf {
        dir.join(format!("{}.metrics", self.name()))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Loads a stage checkpoint, or reports the stage as a missing prerequisite.
pub fn read_stage(stage: Stage, dir: &Path) -> Result<Checkpoint> {
    let path = stage.checkpoint_path(dir);
    if !path.is_file() {
        return Err(Error::MissingPrerequisite {
            stage: stage.name().into(),
            path,
        });
    }
    let ck = Checkpoint::load(&path)?;
    let found = ck.meta("stage")?;
    if found != stage.name() {
        return Err(Error::Format(format!(
            "{} holds a {found} checkpoint, expected {stage}",
            path.display()
        )));
    }
    Ok(ck)
}

fn config_meta<C: serde::de::DeserializeOwned>(ck: &Checkpoint) -> Result<C> {
    serde_json::from_str(ck.meta("model_config")?)
        .map_err(|e| Error::Format(format!("checkpoint model_config: {e}")))
}

fn to_json(v: &impl serde::Serialize) -> String {
    serde_json::to_string(v).expect("config types serialize")
}

pub fn load_clip(dir: &Path) -> Result<(ClipModel<f32>, Vocabulary)> {
    let ck = read_stage(Stage::Clip, dir)?;
    let cfg: ClipConfig = config_meta(&ck)?;
    let mut model = ClipModel::new(cfg, 0)?;
    ck.load_into(&mut model.store)?;
    let vocab = Vocabulary::from_text(ck.meta("vocab")?)?;
    Ok((model, vocab))
}

pub fn load_autoencoder(dir: &Path) -> Result<Autoencoder<f32>> {
    let ck = read_stage(Stage::Autoencoder, dir)?;
    let mut model = Autoencoder::new(config_meta(&ck)?, 0)?;
    ck.load_into(&mut model.store)?;
    model.latent_scale = ck.meta_parse("latent_scale")?;
    model.latent_shift = ck
        .meta("latent_shift")?
        .split(',')
        .map(|v| v.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Format(format!("checkpoint latent_shift: {e}")))?;
    if model.latent_shift.len() != model.cfg.latent_shape()[2] {
        return Err(Error::Format("checkpoint latent_shift has the wrong channel count".into()));
    }
    Ok(model)
}

pub fn load_denoiser(dir: &Path) -> Result<(UViT<f32>, VarianceSchedule)> {
    let ck = read_stage(Stage::Denoiser, dir)?;
    let cfg: UViTConfig = config_meta(&ck)?;
    let mut model = UViT::new(cfg, 0)?;
    ck.load_into(&mut model.store)?;
    let sched = make_schedule(
        ScheduleKind::Linear,
        ck.meta_parse("diffusion.steps")?,
        ck.meta_parse("diffusion.beta_start")?,
        ck.meta_parse("diffusion.beta_end")?,
    )?;
    Ok((model, sched))
}

pub fn load_classifier(dir: &Path) -> Result<ToyClassifier<f32>> {
    let ck = read_stage(Stage::Classifier, dir)?;
    let mut model = ToyClassifier::new(ck.meta_parse("image_size")?, 0)?;
    ck.load_into(&mut model.store)?;
    Ok(model)
}

/// Corpus samples plus the vocabulary stored beside them (built from the
/// training split when absent).
pub fn load_corpus(data_dir: &Path) -> Result<(Vec<Sample>, Vocabulary)> {
    if !data_dir.is_dir() {
        return Err(Error::io(
            data_dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "data directory not found"),
        ));
    }
    let samples = load_manifest(data_dir)?;
    if samples.is_empty() {
        return Err(Error::Data {
            path: data_dir.to_path_buf(),
            msg: "corpus is empty".into(),
        });
    }
    let vocab_path = data_dir.join(VOCAB_FILE);
    let vocab = if vocab_path.is_file() {
        Vocabulary::load(&vocab_path)?
    } else {
        build_vocab(&split_corpus(&samples).0)?
    };
    Ok((samples, vocab))
}

/// Append-only `step <n> loss <value>` lines.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
    eval_interval: usize,
}

impl MetricsWriter {
    /// Starts a fresh metrics file for one run.
    pub fn create(path: &Path, eval_interval: usize) -> Result<Self> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsWriter {
            out: BufWriter::new(f),
            path: path.to_path_buf(),
            eval_interval: eval_interval.max(1),
        })
    }

    pub fn log(&mut self, step: u64, loss: f64) -> Result<()> {
        writeln!(self.out, "step {step} loss {loss}").map_err(|e| Error::io(&self.path, e))?;
        if step.is_multiple_of(self.eval_interval as u64) {
            log::info!("step {step} loss {loss:.5}");
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

/// Parses a metrics file back into `(step, loss)` pairs.
pub fn read_metrics(path: &Path) -> Result<Vec<(u64, f64)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split_whitespace().collect();
            match f.as_slice() {
                ["step", s, "loss", l] => Ok((
                    s.parse().map_err(|_| Error::Format(format!("metrics line {}", i + 1)))?,
                    l.parse().map_err(|_| Error::Format(format!("metrics line {}", i + 1)))?,
                )),
                _ => Err(Error::Format(format!("metrics line {}: {line:?}", i + 1))),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub seed: u64,
    pub steps: u64,
    pub final_loss: f64,
    /// Stage-specific validation figure: CLIP top-1, autoencoder PSNR,
    /// classifier mean AUROC.
    pub validation: Option<f64>,
}

/// Report embeddings for every distinct report, and each sample's index into them.
pub fn encode_reports(clip: &ClipModel<f32>, vocab: &Vocabulary, samples: &[Sample]) -> Result<(Vec<ReportEmbedding>, Vec<usize>)> {
    let mut index = std::collections::HashMap::new();
    let mut conds = Vec::new();
    let mut cond_of = Vec::with_capacity(samples.len());
    for s in samples {
        let i = match index.get(&s.report) {
            Some(&i) => i,
            None => {
                conds.push(clip.encode_text(&tokenize(&s.report, vocab))?);
                index.insert(s.report.clone(), conds.len() - 1);
                conds.len() - 1
            }
        };
        cond_of.push(i);
    }
    Ok((conds, cond_of))
}

/// Trains one stage from `cfg` and writes its checkpoint and metrics file.
pub fn train(stage: Stage, cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dir = &cfg.ckpt_dir;
    // prerequisites first so a missing stage is reported before any work
    for &p in stage.prerequisites() {
        read_stage(p, dir)?;
    }
    let (samples, vocab) = load_corpus(&cfg.data_dir)?;
    let (train_set, val_set, _) = split_corpus(&samples);
    if train_set.is_empty() {
        return Err(Error::Data {
            path: cfg.data_dir.clone(),
            msg: "training split is empty".into(),
        });
    }
    let image_size = samples[0].image.size;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let seed = match cfg.seed {
        Some(s) => s,
        None => {
            let s = entropy_seed();
            log::info!("no seed given; using {s}");
            s
        }
    };
    let stage_seed = derive_seed(seed, stage.name());
    let metrics_path = stage.metrics_path(dir);
    let mut metrics = MetricsWriter::create(&metrics_path, cfg.eval_interval)?;
    let mut steps = 0u64;
    let mut last = f64::NAN;
    let mut on_step = |s: u64, l: f64| {
        steps = s + 1;
        last = l;
        metrics.log(s, l)
    };
    let base = Checkpoint::default()
        .with_meta("stage", stage.name())
        .with_meta("seed", seed)
        .with_meta("deterministic", cfg.deterministic)
        .with_meta("run_config", recipe_text(cfg));

    let (ck, validation) = match stage {
        Stage::Clip => {
            let mut model = ClipModel::<f32>::new(ClipConfig::desk(vocab.len(), image_size), stage_seed)?;
            let p = &cfg.clip;
            let tc = ClipTrainConfig {
                epochs: p.epochs,
                batch_size: p.batch_size,
                lr: p.lr,
                seed: stage_seed,
                clip_norm: p.clip_norm,
            };
            let hist = train_clip(&mut model, &train_set, &val_set, &vocab, &tc, &mut on_step)?;
            let top1 = match hist.last() {
                Some(e) => Some(e.val_top1),
                None if !val_set.is_empty() => Some(retrieval_top1(&model, &val_set, &vocab, 64)?),
                None => None,
            };
            let ck = Checkpoint { tensors: model.store.to_named(), ..base }
                .with_meta("model_config", to_json(&model.cfg))
                .with_meta("vocab", vocab.to_text());
            (ck, top1)
        }
        Stage::Autoencoder => {
            let ac = AutoencoderConfig {
                downsample: cfg.ae_downsample,
                ..AutoencoderConfig::desk(image_size)
            };
            let mut model = Autoencoder::<f32>::new(ac, stage_seed)?;
            let p = &cfg.ae;
            let tc = AeTrainConfig {
                epochs: p.epochs,
                batch_size: p.batch_size,
                lr: p.lr,
                seed: stage_seed,
                clip_norm: p.clip_norm,
            };
            let hist = train_autoencoder(&mut model, &train_set, &val_set, &tc, &mut on_step)?;
            let ck = Checkpoint { tensors: model.store.to_named(), ..base }
                .with_meta("model_config", to_json(&model.cfg))
                .with_meta("latent_scale", model.latent_scale)
                .with_meta(
                    "latent_shift",
                    model.latent_shift.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
                );
            (ck, hist.last().map(|e| e.val_psnr))
        }
        Stage::Denoiser => {
            let (clip, clip_vocab) = load_clip(dir)?;
            let ae = load_autoencoder(dir)?;
            let frozen = (clip.store.checksum(), ae.store.checksum());
            let images: Vec<_> = train_set.iter().map(|s| signed_image(&s.image)).collect();
            let refs: Vec<_> = images.iter().collect();
            let latents = ae
                .encode_batch(&refs)?
                .into_iter()
                .map(|mut z| {
                    ae.to_diffusion(&mut z);
                    z
                })
                .collect();
            let (conds, cond_of) = encode_reports(&clip, &clip_vocab, &train_set)?;
            let data = DenoiserData { latents, cond_of, conds };
            let [h, w, c] = ae.cfg.latent_shape();
            let ucfg = UViTConfig {
                latent: (h, w, c),
                d_txt: clip.cfg.text.d_txt,
                text_len: clip.cfg.text.max_len,
                ..cfg.uvit.clone()
            };
            let mut model = UViT::<f32>::new(ucfg, stage_seed)?;
            let sched = cfg.schedule()?;
            let p = &cfg.denoiser;
            let tc = DenoiserTrainConfig {
                epochs: p.epochs,
                batch_size: p.batch_size,
                lr: p.lr,
                seed: stage_seed,
                clip_norm: p.clip_norm,
            };
            let check_frozen = |epoch: usize| {
                if (clip.store.checksum(), ae.store.checksum()) != frozen {
                    return Err(Error::Numeric(format!("frozen stage weights changed during epoch {epoch}")));
                }
                Ok(())
            };
            train_denoiser(&mut model, &data, &sched, &tc, &mut on_step, check_frozen)?;
            let ck = Checkpoint { tensors: model.store.to_named(), ..base }
                .with_meta("model_config", to_json(&model.cfg))
                .with_meta("diffusion.steps", cfg.diffusion_steps)
                .with_meta("diffusion.beta_start", cfg.beta_start)
                .with_meta("diffusion.beta_end", cfg.beta_end)
                .with_meta("clip_checksum", &frozen.0)
                .with_meta("autoencoder_checksum", &frozen.1);
            (ck, None)
        }
        Stage::Classifier => {
            let mut model = ToyClassifier::<f32>::new(image_size, stage_seed)?;
            let p = &cfg.classifier;
            let tc = ClassifierTrainConfig {
                epochs: p.epochs,
                batch_size: p.batch_size,
                lr: p.lr,
                seed: stage_seed,
                clip_norm: p.clip_norm,
            };
            let hist = train_classifier(&mut model, &train_set, &val_set, &tc, &mut on_step)?;
            let ck = Checkpoint { tensors: model.store.to_named(), ..base }.with_meta("image_size", image_size);
            (ck, hist.last().and_then(|e| e.val_auroc.as_ref()).map(|r| r.avg))
        }
    };
    metrics.finish()?;
    let ck = ck.with_meta("global_step", steps);
    let path = stage.checkpoint_path(dir);
    ck.save(&path)?;
    Ok(TrainOutcome {
        stage,
        checkpoint: path,
        metrics: metrics_path,
        seed,
        steps,
        final_loss: last,
        validation,
    })
}

/// The run config minus the output directory, so identical runs written to
/// different places produce identical checkpoint bytes.
fn recipe_text(cfg: &RunConfig) -> String {
    let text = cfg.to_text();
    text.lines()
        .filter(|l| !l.starts_with("ckpt_dir "))
        .map(|l| format!("{l}\n"))
        .collect()
}

/// Moving averages of `values` over a trailing window.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || values.len() < window {
        return Vec::new();
    }
    values.windows(window).map(|w| w.iter().sum::<f64>() / window as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{save_manifest, synth_corpus, SynthSpec};

    fn tiny_run(dir: &Path) -> RunConfig {
        let data = dir.join("data");
        let corpus = synth_corpus(&SynthSpec::new(40, 2).with_size(16)).unwrap();
        save_manifest(&corpus, &data).unwrap();
        let mut cfg = RunConfig {
            data_dir: data,
            ckpt_dir: dir.join("ck"),
            seed: Some(5),
            ..Default::default()
        };
        cfg.clip.epochs = 1;
        cfg.ae.epochs = 1;
        cfg.denoiser.epochs = 1;
        cfg.classifier.epochs = 1;
        cfg.uvit = UViTConfig {
            dim: 16,
            heads: 2,
            n_enc: 1,
            n_dec: 1,
            ..UViTConfig::desk()
        };
        cfg.diffusion_steps = 50;
        cfg.sample_steps = 5;
        cfg
    }

    #[test]
    fn stage_names_parse() {
        for s in Stage::ALL {
            assert_eq!(Stage::parse(s.name()).unwrap(), s);
        }
        assert_eq!(Stage::parse("ae").unwrap(), Stage::Autoencoder);
        assert!(Stage::parse("vae").is_err());
    }

    #[test]
    fn denoiser_requires_earlier_stages() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        let err = train(Stage::Denoiser, &cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("clip"), "{err}");
        train(Stage::Clip, &cfg).unwrap();
        let err = train(Stage::Denoiser, &cfg).unwrap_err();
        assert!(err.to_string().contains("autoencoder"), "{err}");
    }

    #[test]
    fn stages_write_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_run(dir.path());
        for stage in [Stage::Clip, Stage::Autoencoder, Stage::Denoiser] {
            let out = train(stage, &cfg).unwrap();
            let m = read_metrics(&out.metrics).unwrap();
            assert_eq!(m.len() as u64, out.steps);
            assert!(m.iter().enumerate().all(|(i, &(s, l))| s == i as u64 && l.is_finite()));
            let ck = Checkpoint::load(&out.checkpoint).unwrap();
            assert_eq!(ck.meta("stage").unwrap(), stage.name());
            assert_eq!(ck.meta_parse::<u64>("global_step").unwrap(), out.steps);
        }
        let den = Checkpoint::load(&Stage::Denoiser.checkpoint_path(&cfg.ckpt_dir)).unwrap();
        let clip = Checkpoint::load(&Stage::Clip.checkpoint_path(&cfg.ckpt_dir)).unwrap();
        let mut store = load_clip(&cfg.ckpt_dir).unwrap().0.store;
        assert_eq!(den.meta("clip_checksum").unwrap(), store.checksum());
        clip.load_into(&mut store).unwrap();
        assert!(load_denoiser(&cfg.ckpt_dir).is_ok());
        assert!(load_autoencoder(&cfg.ckpt_dir).unwrap().latent_scale > 0.0);
    }

    #[test]
    fn stage_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let ck = Checkpoint::default().with_meta("stage", "clip");
        ck.save(&Stage::Autoencoder.checkpoint_path(dir.path())).unwrap();
        assert!(matches!(load_autoencoder(dir.path()), Err(Error::Format(_))));
    }

    #[test]
    fn moving_average_windows() {
        assert_eq!(moving_average(&[1.0, 2.0, 3.0, 4.0], 2), vec![1.5, 2.5, 3.5]);
        assert!(moving_average(&[1.0], 2).is_empty());
    }
}
