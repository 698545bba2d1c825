use std::time::Instant;

use serde::Serialize;

use crate::uvit::{UViTConfig, TIME_EMBED_DIM};
use crate::Result;

/// Denoiser parameter count from closed-form layer sizes.
pub fn count_params(cfg: &UViTConfig) -> Result<u64> {
    cfg.validate()?;
    let d = cfg.dim as u64;
    let p = cfg.patch_dim() as u64;
    let linear = |i: u64, o: u64| i * o + o;
    let block = 12 * d * d + 13 * d;
    Ok(linear(TIME_EMBED_DIM as u64, d)
        + linear(d, d)
        + linear(cfg.d_txt as u64, d)
        + linear(p, d)
        + cfg.seq_len() as u64 * d
        + cfg.n_blocks() as u64 * block
        + cfg.n_dec as u64 * linear(2 * d, d)
        + linear(d, p))
}

/// Forward FLOPs of one denoiser evaluation at `batch`, with every text slot
/// present. A multiply-add counts as 2 FLOPs; elementwise activations and
/// additions are not counted.
pub fn count_flops(cfg: &UViTConfig, batch: usize) -> Result<u64> {
    cfg.validate()?;
    let b = batch as u64;
    let d = cfg.dim as u64;
    let h = cfg.heads as u64;
    let k = cfg.seq_len() as u64;
    let m = cfg.n_patches() as u64;
    let p = cfg.patch_dim() as u64;
    let lin = |tokens: u64, i: u64, o: u64| 2 * b * tokens * i * o;
    let attn = 2 * (2 * b * h * k * k * (d / h)) + 5 * b * h * k * k;
    let block = 2 * 5 * b * k * d + lin(k, d, 3 * d) + lin(k, d, d) + attn + lin(k, d, 4 * d) + lin(k, 4 * d, d);
    Ok(lin(1, TIME_EMBED_DIM as u64, d)
        + lin(1, d, d)
        + lin(cfg.text_len as u64, cfg.d_txt as u64, d)
        + lin(m, p, d)
        + cfg.n_blocks() as u64 * block
        + cfg.n_dec as u64 * lin(k, 2 * d, d)
        + lin(m, d, p))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostReport {
    pub params: u64,
    pub flops_batch4: u64,
    pub sec_per_image: Option<f64>,
    pub peak_activation_elems: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub median_sec: f64,
    pub steps: usize,
    pub n_trials: usize,
    pub low_confidence: bool,
}

/// Median wall-clock seconds of `n_trials` calls to `run`.
pub fn measure_latency(steps: usize, n_trials: usize, mut run: impl FnMut() -> Result<()>) -> Result<LatencyReport> {
    let n_trials = n_trials.max(1);
    let mut times = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let t = Instant::now();
        run()?;
        times.push(t.elapsed().as_secs_f64());
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median_sec = if times.len() % 2 == 1 {
        times[mid]
    } else {
        (times[mid - 1] + times[mid]) / 2.0
    };
    Ok(LatencyReport {
        median_sec,
        steps,
        n_trials,
        low_confidence: n_trials < 3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clip::ReportEmbedding;
    use crate::nn::{Graph, Linear, ParamStore, Tensor, TransformerBlock};
    use crate::uvit::UViT;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn full_text(cfg: &UViTConfig) -> ReportEmbedding {
        ReportEmbedding {
            tokens: Tensor::zeros(&[cfg.text_len, cfg.d_txt]),
            mask: vec![true; cfg.text_len],
            pooled: vec![],
        }
    }

    fn measured(cfg: &UViTConfig, batch: usize) -> (u64, u64) {
        let model = UViT::<f32>::new(cfg.clone(), 0).unwrap();
        let e = full_text(cfg);
        let conds = vec![&e; batch];
        let (h, w, c) = cfg.latent;
        let mut g = Graph::new(&model.store);
        model
            .forward(&mut g, &Tensor::zeros(&[batch, h, w, c]), &vec![0.5; batch], &conds)
            .unwrap();
        (model.store.num_scalars() as u64, g.flops())
    }

    #[test]
    fn single_linear_is_two_flops() {
        let mut store = ParamStore::<f32>::new();
        let l = Linear::new(&mut store, "l", 1, 1, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::scalar(1.0).reshape(&[1, 1]).unwrap());
        l.forward(&mut g, x).unwrap();
        assert_eq!(g.flops(), 2);
    }

    #[test]
    fn block_parameter_count() {
        let mut store = ParamStore::<f32>::new();
        TransformerBlock::new(&mut store, "b", 128, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(store.num_scalars(), 198_272);
    }

    #[test]
    fn analytic_counts_equal_enumeration() {
        for cfg in [
            UViTConfig::tiny(),
            UViTConfig { key_mask: false, ..UViTConfig::tiny() },
            UViTConfig { n_enc: 1, n_dec: 1, patch: 4, ..UViTConfig::tiny() },
        ] {
            for batch in [1, 4] {
                let (params, flops) = measured(&cfg, batch);
                assert_eq!(count_params(&cfg).unwrap(), params);
                assert_eq!(count_flops(&cfg, batch).unwrap(), flops);
            }
        }
    }

    #[test]
    fn flops_linear_in_batch() {
        for cfg in [UViTConfig::desk(), UViTConfig::full_scale()] {
            let one = count_flops(&cfg, 1).unwrap();
            for b in [2, 4, 7] {
                assert_eq!(count_flops(&cfg, b).unwrap(), b as u64 * one);
            }
        }
    }

    #[test]
    fn latency_median_and_flags() {
        let mut calls = 0;
        let r = measure_latency(10, 1, || {
            calls += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(calls, 1);
        assert!(r.low_confidence);
        assert!(r.median_sec >= 0.0 && r.median_sec.is_finite());
        assert!(!measure_latency(10, 3, || Ok(())).unwrap().low_confidence);
    }
}
