//! Flat `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Command-line `--key value`
//! pairs are applied on top with the same keys. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::diffusion::{make_schedule, Sampler, ScheduleKind, VarianceSchedule};
use crate::uvit::UViTConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StageParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub clip_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    /// `None` draws a seed from entropy when a command starts.
    pub seed: Option<u64>,
    pub deterministic: bool,
    /// Steps between progress log lines.
    pub eval_interval: usize,
    pub clip: StageParams,
    pub ae: StageParams,
    pub denoiser: StageParams,
    pub classifier: StageParams,
    pub ae_downsample: usize,
    /// Image side used by `profile`; training reads it from the corpus.
    pub image_size: usize,
    /// Report token width used by `profile`; training reads it from the text encoder.
    pub text_d_txt: usize,
    pub uvit: UViTConfig,
    pub diffusion_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
    pub sample_eta: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let stage = |epochs, batch_size, lr| StageParams {
            epochs,
            batch_size,
            lr,
            clip_norm: 1.0,
        };
        RunConfig {
            data_dir: PathBuf::from("data"),
            ckpt_dir: PathBuf::from("checkpoints"),
            seed: None,
            deterministic: false,
            eval_interval: 50,
            clip: stage(30, 64, 1e-3),
            ae: stage(12, 32, 1e-3),
            denoiser: stage(60, 32, 3e-4),
            classifier: stage(10, 32, 1e-3),
            ae_downsample: 4,
            image_size: 32,
            text_d_txt: 128,
            uvit: UViTConfig::desk(),
            diffusion_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 50,
            sample_eta: 0.0,
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::config(format!("invalid value {value:?} for `{key}`")))
}

impl RunConfig {
    pub const KEYS: &'static [&'static str] = &[
        "data_dir",
        "ckpt_dir",
        "seed",
        "deterministic",
        "eval_interval",
        "clip.epochs",
        "clip.batch_size",
        "clip.lr",
        "clip.clip_norm",
        "ae.epochs",
        "ae.batch_size",
        "ae.lr",
        "ae.clip_norm",
        "ae.downsample",
        "image_size",
        "text.d_txt",
        "denoiser.epochs",
        "denoiser.batch_size",
        "denoiser.lr",
        "denoiser.clip_norm",
        "classifier.epochs",
        "classifier.batch_size",
        "classifier.lr",
        "classifier.clip_norm",
        "uvit.dim",
        "uvit.heads",
        "uvit.n_enc",
        "uvit.n_mid",
        "uvit.n_dec",
        "uvit.patch",
        "uvit.key_mask",
        "diffusion.steps",
        "diffusion.beta_start",
        "diffusion.beta_end",
        "sample.steps",
        "sample.eta",
    ];

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let stage = |s: &mut StageParams, field: &str| -> Result<()> {
            match field {
                "epochs" => s.epochs = parse(key, value)?,
                "batch_size" => s.batch_size = parse(key, value)?,
                "lr" => s.lr = parse(key, value)?,
                "clip_norm" => s.clip_norm = parse(key, value)?,
                _ => return Err(Error::config(format!("unknown config key `{key}`"))),
            }
            Ok(())
        };
        match key.split_once('.') {
            Some(("clip", f)) => stage(&mut self.clip, f)?,
            Some(("ae", "downsample")) => self.ae_downsample = parse(key, value)?,
            Some(("ae", f)) => stage(&mut self.ae, f)?,
            Some(("denoiser", f)) => stage(&mut self.denoiser, f)?,
            Some(("classifier", f)) => stage(&mut self.classifier, f)?,
            _ => match key {
                "data_dir" => self.data_dir = PathBuf::from(value),
                "ckpt_dir" => self.ckpt_dir = PathBuf::from(value),
                "seed" => self.seed = Some(parse(key, value)?),
                "deterministic" => self.deterministic = parse(key, value)?,
                "eval_interval" => self.eval_interval = parse(key, value)?,
                "image_size" => self.image_size = parse(key, value)?,
                "text.d_txt" => self.text_d_txt = parse(key, value)?,
                "uvit.dim" => self.uvit.dim = parse(key, value)?,
                "uvit.heads" => self.uvit.heads = parse(key, value)?,
                "uvit.n_enc" => self.uvit.n_enc = parse(key, value)?,
                "uvit.n_mid" => self.uvit.n_mid = parse(key, value)?,
                "uvit.n_dec" => self.uvit.n_dec = parse(key, value)?,
                "uvit.patch" => self.uvit.patch = parse(key, value)?,
                "uvit.key_mask" => self.uvit.key_mask = parse(key, value)?,
                "diffusion.steps" => self.diffusion_steps = parse(key, value)?,
                "diffusion.beta_start" => self.beta_start = parse(key, value)?,
                "diffusion.beta_end" => self.beta_end = parse(key, value)?,
                "sample.steps" => self.sample_steps = parse(key, value)?,
                "sample.eta" => self.sample_eta = parse(key, value)?,
                _ => return Err(Error::config(format!("unknown config key `{key}`"))),
            },
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative `data_dir` and `ckpt_dir` resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        if let Some(base) = path.parent() {
            for p in [&mut cfg.data_dir, &mut cfg.ckpt_dir] {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("clip", &self.clip),
            ("ae", &self.ae),
            ("denoiser", &self.denoiser),
            ("classifier", &self.classifier),
        ] {
            if s.batch_size == 0 {
                return Err(Error::config(format!("{name}.batch_size must be ≥ 1")));
            }
            if !(s.lr > 0.0) || !(s.clip_norm > 0.0) {
                return Err(Error::config(format!("{name}.lr and {name}.clip_norm must be > 0")));
            }
        }
        if self.eval_interval == 0 {
            return Err(Error::config("eval_interval must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&self.sample_eta) {
            return Err(Error::config("sample.eta must lie in [0, 1]"));
        }
        if self.sample_steps > self.diffusion_steps {
            return Err(Error::config("sample.steps exceeds diffusion.steps"));
        }
        self.schedule()?;
        self.uvit.validate()
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        make_schedule(ScheduleKind::Linear, self.diffusion_steps, self.beta_start, self.beta_end)
    }

    /// Denoiser shape implied by `image_size`, `ae.downsample` and `text.d_txt`.
    pub fn profile_uvit(&self) -> Result<UViTConfig> {
        let ds = self.ae_downsample;
        if !ds.is_power_of_two() || self.image_size == 0 || !self.image_size.is_multiple_of(ds) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by ae.downsample {ds}",
                self.image_size
            )));
        }
        let side = self.image_size / ds;
        let (h, w, c) = (side, side, crate::autoencoder::LATENT_CHANNELS);
        let cfg = UViTConfig {
            latent: (h, w, c),
            d_txt: self.text_d_txt,
            text_len: crate::data::MAX_TOKENS,
            ..self.uvit.clone()
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn sampler(&self) -> Sampler {
        Sampler::Ddim { eta: self.sample_eta }
    }

    /// Echo of every key, parseable by [`RunConfig::from_text`].
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("data_dir", self.data_dir.display().to_string());
        kv("ckpt_dir", self.ckpt_dir.display().to_string());
        if let Some(s) = self.seed {
            kv("seed", s.to_string());
        }
        kv("deterministic", self.deterministic.to_string());
        kv("eval_interval", self.eval_interval.to_string());
        for (name, s) in [
            ("clip", &self.clip),
            ("ae", &self.ae),
            ("denoiser", &self.denoiser),
            ("classifier", &self.classifier),
        ] {
            kv(&format!("{name}.epochs"), s.epochs.to_string());
            kv(&format!("{name}.batch_size"), s.batch_size.to_string());
            kv(&format!("{name}.lr"), s.lr.to_string());
            kv(&format!("{name}.clip_norm"), s.clip_norm.to_string());
        }
        kv("ae.downsample", self.ae_downsample.to_string());
        kv("image_size", self.image_size.to_string());
        kv("text.d_txt", self.text_d_txt.to_string());
        let u = &self.uvit;
        kv("uvit.dim", u.dim.to_string());
        kv("uvit.heads", u.heads.to_string());
        kv("uvit.n_enc", u.n_enc.to_string());
        kv("uvit.n_mid", u.n_mid.to_string());
        kv("uvit.n_dec", u.n_dec.to_string());
        kv("uvit.patch", u.patch.to_string());
        kv("uvit.key_mask", u.key_mask.to_string());
        kv("diffusion.steps", self.diffusion_steps.to_string());
        kv("diffusion.beta_start", self.beta_start.to_string());
        kv("diffusion.beta_end", self.beta_end.to_string());
        kv("sample.steps", self.sample_steps.to_string());
        kv("sample.eta", self.sample_eta.to_string());
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_overrides() {
        let cfg = RunConfig::from_text("# run\nseed = 7\nclip.epochs=3 # short\n\nuvit.key_mask = false\n").unwrap();
        assert_eq!(cfg.seed, Some(7));
        assert_eq!(cfg.clip.epochs, 3);
        assert!(!cfg.uvit.key_mask);
        assert_eq!(cfg.ae.epochs, RunConfig::default().ae.epochs);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        for text in ["colour = red", "clip.depth = 3", "seed = -1", "ae.lr = 0", "clip.batch_size = 0", "no equals"] {
            assert!(matches!(RunConfig::from_text(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn every_key_round_trips_through_the_echo() {
        let mut cfg = RunConfig {
            seed: Some(3),
            ..Default::default()
        };
        cfg.denoiser.lr = 5e-4;
        cfg.sample_eta = 0.5;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        for key in RunConfig::KEYS {
            assert!(cfg.to_text().contains(&format!("{key} = ")), "{key}");
        }
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "data_dir = corpus\nckpt_dir = /abs/ck\n").unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.data_dir, dir.path().join("corpus"));
        assert_eq!(cfg.ckpt_dir, PathBuf::from("/abs/ck"));
    }
}
