use rand::seq::SliceRandom;
use serde::Serialize;

use super::roc::auroc;
use crate::clip::image_batch;
use crate::data::{GrayImage, Labels, Sample};
use crate::nn::{Adam, Conv2d, Graph, Linear, ParamStore, Real, Tensor, Var};
use crate::rng::stream;
use crate::{Error, Result};

const N_LABELS: usize = Labels::NAMES.len();
const CHANNELS: [usize; 3] = [16, 32, 32];
const HIDDEN: usize = 64;

/// Small convolutional multi-label classifier: three stride-2 convolutions,
/// a flattened hidden layer and one logit per label.
#[derive(Clone)]
pub struct ToyClassifier<T: Real = f32> {
    pub image_size: usize,
    pub store: ParamStore<T>,
    convs: Vec<Conv2d>,
    fc1: Linear,
    fc2: Linear,
}

impl<T: Real> ToyClassifier<T> {
    pub fn new(image_size: usize, seed: u64) -> Result<Self> {
        if image_size == 0 || !image_size.is_multiple_of(8) {
            return Err(Error::config(format!("classifier image size {image_size} must be a multiple of 8")));
        }
        let mut rng = stream(seed, 0);
        let mut store = ParamStore::new();
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(&mut store, &format!("cls.conv.{i}"), c_in, c, 3, 2, 1, &mut rng)?);
            c_in = c;
        }
        let side = image_size / 8;
        let fc1 = Linear::new(&mut store, "cls.fc1", c_in * side * side, HIDDEN, true, &mut rng)?;
        let fc2 = Linear::new(&mut store, "cls.fc2", HIDDEN, N_LABELS, true, &mut rng)?;
        Ok(ToyClassifier {
            image_size,
            store,
            convs,
            fc1,
            fc2,
        })
    }

    pub fn with_params(&self, store: ParamStore<T>) -> Self {
        ToyClassifier { store, ..self.clone() }
    }

    /// `[batch, labels]` logits for `[batch, 1, size, size]` input.
    pub fn logits(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let batch = g.shape(x)[0];
        let mut h = x;
        for c in &self.convs {
            h = c.forward(g, h)?;
            h = g.gelu(h);
        }
        let flat = g.shape(h)[1..].iter().product::<usize>();
        let h = g.reshape(h, &[batch, flat])?;
        let h = self.fc1.forward(g, h)?;
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    pub fn batch_loss(&self, g: &mut Graph<'_, T>, images: &[&GrayImage], labels: &[Labels]) -> Result<(Var, f64)> {
        let x = g.input(image_batch(images, self.image_size)?);
        let logits = self.logits(g, x)?;
        let targets = labels
            .iter()
            .flat_map(|l| l.as_array().map(|b| if b { T::one() } else { T::zero() }))
            .collect();
        let l = g.bce_with_logits(logits, &Tensor::new(vec![labels.len(), N_LABELS], targets)?)?;
        let v = g.value(l).data()[0].as_f64();
        Ok((l, v))
    }

    /// Per-label probabilities in [`Labels::NAMES`] order.
    pub fn probabilities(&self, images: &[&GrayImage]) -> Result<Vec<[f64; N_LABELS]>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let mut g = Graph::new(&self.store);
            let x = g.input(image_batch(chunk, self.image_size)?);
            let l = self.logits(&mut g, x)?;
            for row in g.value(l).data().chunks(N_LABELS) {
                let mut p = [0.0; N_LABELS];
                for (o, &v) in p.iter_mut().zip(row) {
                    *o = 1.0 / (1.0 + (-v.as_f64()).exp());
                }
                out.push(p);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            clip_norm: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub val_auroc: Option<AlignmentReport>,
}

pub fn train_classifier(
    model: &mut ToyClassifier<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &ClassifierTrainConfig,
    mut on_step: impl FnMut(u64, f64) -> Result<()>,
) -> Result<Vec<ClassifierEpoch>> {
    if train.is_empty() || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("classifier training needs samples, batch_size ≥ 1 and lr > 0"));
    }
    let mut opt = Adam::new(&model.store, cfg.lr);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut stream(cfg.seed, 1 + epoch as u64));
        let (mut sum, mut count) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let images: Vec<&GrayImage> = idx.iter().map(|&i| &train[i].image).collect();
            let labels: Vec<Labels> = idx.iter().map(|&i| train[i].labels).collect();
            let mut grads = {
                let mut g = Graph::new(&model.store);
                let (l, v) = model.batch_loss(&mut g, &images, &labels)?;
                if !v.is_finite() {
                    return Err(Error::Numeric(format!("classifier loss is {v} at step {step}")));
                }
                sum += v;
                count += 1;
                on_step(step, v)?;
                g.backward(l)?
            };
            grads.clip_global_norm(cfg.clip_norm);
            opt.step(&mut model.store, &grads);
            step += 1;
        }
        let images: Vec<&GrayImage> = val.iter().map(|s| &s.image).collect();
        let labels: Vec<Labels> = val.iter().map(|s| s.labels).collect();
        let val_auroc = alignment_eval(model, &images, &labels).ok();
        let loss = sum / count as f64;
        log::info!("classifier epoch {epoch}: loss {loss:.4}");
        history.push(ClassifierEpoch { epoch, loss, val_auroc });
    }
    Ok(history)
}

/// Per-label AUROC of classifier scores against the labels the images
/// were meant to show.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub per_label: Vec<(String, f64)>,
    pub avg: f64,
}

impl AlignmentReport {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.per_label.iter().find(|(n, _)| n == label).map(|&(_, v)| v)
    }
}

pub fn alignment_eval(classifier: &ToyClassifier<f32>, images: &[&GrayImage], labels: &[Labels]) -> Result<AlignmentReport> {
    if images.len() != labels.len() {
        return Err(Error::shape("one label set per image"));
    }
    let probs = classifier.probabilities(images)?;
    let mut per_label = Vec::with_capacity(N_LABELS);
    for (k, name) in Labels::NAMES.iter().enumerate() {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let truth: Vec<bool> = labels.iter().map(|l| l.as_array()[k]).collect();
        per_label.push((name.to_string(), auroc(&scores, &truth)?));
    }
    let avg = per_label.iter().map(|(_, v)| v).sum::<f64>() / N_LABELS as f64;
    Ok(AlignmentReport { per_label, avg })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{split_corpus, synth_corpus, SynthSpec};
    use crate::nn::gradcheck::check_param_grads;
    use rand::SeedableRng;

    #[test]
    fn logits_shape_and_size_check() {
        let c = ToyClassifier::<f32>::new(32, 0).unwrap();
        let img = GrayImage { size: 32, pixels: vec![128; 1024] };
        assert_eq!(c.probabilities(&[&img, &img]).unwrap().len(), 2);
        assert!(ToyClassifier::<f32>::new(30, 0).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let corpus = synth_corpus(&SynthSpec::new(6, 3).with_size(16)).unwrap();
        let images: Vec<&GrayImage> = corpus.iter().map(|s| &s.image).collect();
        let labels: Vec<Labels> = corpus.iter().map(|s| s.labels).collect();
        let c = ToyClassifier::<f64>::new(16, 1).unwrap();
        let mut g = Graph::new(&c.store);
        let (l, _) = c.batch_loss(&mut g, &images, &labels).unwrap();
        let grads = g.backward(l).unwrap();
        let report = check_param_grads(
            &c.store,
            &grads,
            |s| {
                let m = c.with_params(s.clone());
                let mut g = Graph::new(&m.store);
                Ok(m.batch_loss(&mut g, &images, &labels)?.1)
            },
            1e-5,
            4,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(2),
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "{report:?}");
    }

    #[test]
    fn learns_the_labels_of_a_small_corpus() {
        let corpus = synth_corpus(&SynthSpec::new(600, 5)).unwrap();
        let (train, _, test) = split_corpus(&corpus);
        let mut c = ToyClassifier::<f32>::new(32, 3).unwrap();
        let cfg = ClassifierTrainConfig { epochs: 4, ..Default::default() };
        train_classifier(&mut c, &train, &[], &cfg, |_, _| Ok(())).unwrap();
        let images: Vec<&GrayImage> = test.iter().map(|s| &s.image).collect();
        let labels: Vec<Labels> = test.iter().map(|s| s.labels).collect();
        let r = alignment_eval(&c, &images, &labels).unwrap();
        assert!(r.avg > 0.85, "{r:?}");
    }
}
