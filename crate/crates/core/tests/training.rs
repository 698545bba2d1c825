use chestdiff::config::RunConfig;
use chestdiff::data::{build_vocab, save_manifest, split_corpus, synth_corpus, SynthSpec};
use chestdiff::trainer::{moving_average, read_metrics, train, Stage, VOCAB_FILE};
use chestdiff::uvit::UViTConfig;

fn small_run(dir: &std::path::Path, n: usize) -> RunConfig {
    let data = dir.join("data");
    let corpus = synth_corpus(&SynthSpec::new(n, 11)).unwrap();
    save_manifest(&corpus, &data).unwrap();
    let (train_set, _, _) = split_corpus(&corpus);
    build_vocab(&train_set).unwrap().save(&data.join(VOCAB_FILE)).unwrap();
    RunConfig {
        data_dir: data,
        ckpt_dir: dir.join("ck"),
        seed: Some(3),
        ..Default::default()
    }
}

#[test]
fn denoiser_loss_trend_decreases() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path(), 300);
    cfg.clip.epochs = 2;
    cfg.ae.epochs = 2;
    cfg.denoiser.lr = 1e-3;
    cfg.denoiser.batch_size = 8;
    cfg.denoiser.epochs = 8;
    cfg.uvit = UViTConfig {
        dim: 32,
        heads: 2,
        n_enc: 1,
        n_dec: 1,
        ..UViTConfig::desk()
    };
    train(Stage::Clip, &cfg).unwrap();
    train(Stage::Autoencoder, &cfg).unwrap();
    let out = train(Stage::Denoiser, &cfg).unwrap();
    let losses: Vec<f64> = read_metrics(&out.metrics).unwrap().into_iter().map(|(_, l)| l).take(200).collect();
    assert_eq!(losses.len(), 200);
    let ma = moving_average(&losses, 50);
    assert!(ma.last().unwrap() < ma.first().unwrap(), "{} -> {}", ma[0], ma.last().unwrap());
}

#[test]
fn same_seed_same_clip_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path(), 60);
    cfg.clip.epochs = 1;
    let a = std::fs::read(train(Stage::Clip, &cfg).unwrap().checkpoint).unwrap();
    let b = std::fs::read(train(Stage::Clip, &cfg).unwrap().checkpoint).unwrap();
    assert_eq!(a, b);
    cfg.seed = Some(4);
    let c = std::fs::read(train(Stage::Clip, &cfg).unwrap().checkpoint).unwrap();
    assert_ne!(a, c);
}
