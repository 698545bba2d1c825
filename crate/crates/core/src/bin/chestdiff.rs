use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use chestdiff::clip::ReportEmbedding;
use chestdiff::config::RunConfig;
use chestdiff::data::{build_vocab, save_manifest, split_corpus, synth_corpus, write_pgm, SynthSpec};
use chestdiff::diffusion::Sampler;
use chestdiff::eval::{count_flops, count_params, measure_latency, CostReport};
use chestdiff::nn::{Graph, Tensor};
use chestdiff::pipeline::{evaluate, EvalRequest, Pipeline};
use chestdiff::rng::entropy_seed;
use chestdiff::trainer::{load_classifier, load_corpus, train, Stage, VOCAB_FILE};
use chestdiff::uvit::UViT;
use chestdiff::{Error, Result};

#[derive(Parser)]
#[command(name = "chestdiff", version, about = "Report-conditioned latent diffusion for toy chest radiographs")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic corpus: PGM images, manifest.jsonl and vocab.txt.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Train one stage. Extra `--key value` pairs override the config file.
    Train {
        #[arg(long)]
        stage: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        deterministic: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
    /// Generate one image from a report.
    Generate {
        #[arg(long)]
        report: String,
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated images for realism, label alignment and cost.
    Evaluate {
        #[arg(long)]
        ckpt_dir: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 200)]
        n_gen: usize,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        latency_trials: usize,
        /// Also write the JSON summary here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print parameter and FLOP counts for a denoiser configuration.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Time this many single-image generations with random weights.
        #[arg(long, default_value_t = 0)]
        latency_trials: usize,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, hide = true)]
        overrides: Vec<String>,
    },
}

fn seed_or_entropy(seed: Option<u64>) -> u64 {
    seed.unwrap_or_else(|| {
        let s = entropy_seed();
        eprintln!("seed {s}");
        s
    })
}

fn run_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::config(format!("unexpected argument {flag:?}")))?;
        let (key, value) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        cfg.set(&key.replace('-', "_"), &value)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn synth_data(out: &Path, n: usize, seed: Option<u64>, size: usize) -> Result<()> {
    let seed = seed_or_entropy(seed);
    let spec = SynthSpec::new(n, seed).with_size(size);
    spec.validate()?;
    let corpus = synth_corpus(&spec)?;
    save_manifest(&corpus, out)?;
    let (train, _, _) = split_corpus(&corpus);
    let vocab_src = if train.is_empty() { &corpus } else { &train };
    build_vocab(vocab_src)?.save(&out.join(VOCAB_FILE))?;
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn train_cmd(stage: &str, config: Option<&Path>, deterministic: bool, seed: Option<u64>, overrides: &[String]) -> Result<()> {
    let stage = Stage::parse(stage)?;
    let mut cfg = run_config(config, overrides)?;
    if let Some(s) = seed {
        cfg.seed = Some(s);
    }
    cfg.deterministic |= deterministic;
    if cfg.deterministic && cfg.seed.is_none() {
        cfg.seed = Some(0);
    }
    if cfg.seed.is_none() {
        cfg.seed = Some(seed_or_entropy(None));
    }
    let out = train(stage, &cfg)?;
    println!(
        "stage {} seed {} steps {} final_loss {:.6}{}",
        out.stage,
        out.seed,
        out.steps,
        out.final_loss,
        out.validation.map(|v| format!(" validation {v:.4}")).unwrap_or_default()
    );
    println!("checkpoint {}", out.checkpoint.display());
    println!("metrics {}", out.metrics.display());
    Ok(())
}

fn generate_cmd(report: &str, ckpt_dir: &Path, steps: usize, seed: Option<u64>, eta: f64, out: &Path) -> Result<()> {
    if !(0.0..=1.0).contains(&eta) {
        return Err(Error::config("--eta must lie in [0, 1]"));
    }
    let p = Pipeline::load(ckpt_dir)?;
    let seed = seed.unwrap_or_else(entropy_seed);
    let img = p.generate_one(report, seed, steps, Sampler::Ddim { eta })?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_pgm(out, &img)?;
    println!("seed {seed}");
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate_cmd(
    ckpt_dir: &Path,
    data: &Path,
    n_gen: usize,
    steps: usize,
    seed: Option<u64>,
    latency_trials: usize,
    json: Option<&Path>,
) -> Result<()> {
    let p = Pipeline::load(ckpt_dir)?;
    let classifier = load_classifier(ckpt_dir)?;
    let (samples, _) = load_corpus(data)?;
    let (_, val, test) = split_corpus(&samples);
    let seed = seed_or_entropy(seed);
    let summary = evaluate(
        &p,
        &classifier,
        &EvalRequest {
            test: &test,
            held_out: &val,
            n_gen,
            steps,
            seed,
            sampler: Sampler::Ddim { eta: 0.0 },
            latency_trials,
        },
    )?;
    print!("{}", summary.to_text());
    if let Some(path) = json {
        std::fs::write(path, summary.to_json()).map_err(|e| Error::io(path, e))?;
    }
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

fn profile_cmd(config: Option<&Path>, latency_trials: usize, overrides: &[String]) -> Result<()> {
    let cfg = run_config(config, overrides)?;
    let ucfg = cfg.profile_uvit()?;
    let params = count_params(&ucfg)?;
    let flops = count_flops(&ucfg, 4)?;
    let model = UViT::<f32>::new(ucfg.clone(), 0)?;
    let text = ReportEmbedding {
        tokens: Tensor::zeros(&[ucfg.text_len, ucfg.d_txt]),
        mask: vec![true; ucfg.text_len],
        pooled: Vec::new(),
    };
    let (h, w, c) = ucfg.latent;
    let peak = {
        let mut g = Graph::new(&model.store);
        model.forward(&mut g, &Tensor::zeros(&[1, h, w, c]), &[1.0], &[&text])?;
        g.activation_elems() as u64
    };
    let sec_per_image = if latency_trials > 0 {
        let sched = cfg.schedule()?;
        let conds = [text.clone()];
        let lat = measure_latency(cfg.sample_steps, latency_trials, || {
            chestdiff::diffusion::sample(&model, &conds, &sched, cfg.sample_steps, &[0], &[h, w, c], cfg.sampler()).map(|_| ())
        })?;
        Some(lat.median_sec)
    } else {
        None
    };
    let report = CostReport {
        params,
        flops_batch4: flops,
        sec_per_image,
        peak_activation_elems: peak,
    };
    println!("# FLOPs count one multiply-add as 2; batch 4; every one of the {} text slots present", ucfg.text_len);
    println!(
        "denoiser dim {} heads {} blocks {}/{}/{} patch {} latent {}x{}x{} tokens {}",
        ucfg.dim, ucfg.heads, ucfg.n_enc, ucfg.n_mid, ucfg.n_dec, ucfg.patch, h, w, c, ucfg.seq_len()
    );
    println!("params {params}");
    println!("flops_batch4 {flops}");
    println!("gflops_batch4 {:.3}", flops as f64 / 1e9);
    println!("peak_activation_elems_batch1 {peak}");
    match sec_per_image {
        Some(s) => println!("sec_per_image {s:.4} (steps {}, {latency_trials} trials, random weights)", cfg.sample_steps),
        None => println!("sec_per_image not measured"),
    }
    println!(
        "note: reference figures of 58.175 M params, 118.918 GFLOPs and 1.828 s/image come from a system with \
         undisclosed widths, pretrained components and different data; they are not directly comparable"
    );
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::SynthData { out, n, seed, size } => synth_data(out, *n, *seed, *size),
        Cmd::Train {
            stage,
            config,
            deterministic,
            seed,
            overrides,
        } => train_cmd(stage, config.as_deref(), *deterministic, *seed, overrides),
        Cmd::Generate {
            report,
            ckpt_dir,
            steps,
            seed,
            eta,
            out,
        } => generate_cmd(report, ckpt_dir, *steps, *seed, *eta, out),
        Cmd::Evaluate {
            ckpt_dir,
            data,
            n_gen,
            steps,
            seed,
            latency_trials,
            json,
        } => evaluate_cmd(ckpt_dir, data, *n_gen, *steps, *seed, *latency_trials, json.as_deref()),
        Cmd::Profile {
            config,
            latency_trials,
            overrides,
        } => profile_cmd(config.as_deref(), *latency_trials, overrides),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
