//! Toy report/image corpus: synthesis, tokenization and on-disk formats.

mod manifest;
mod synth;
mod vocab;

pub use manifest::{load_manifest, read_pgm, save_manifest, write_pgm, MANIFEST_FILE};
pub use synth::{
    render_report, synth_corpus, synth_sample, SynthSpec, HEALTHY_REPORT, OPACITY_THRESHOLD,
    TEMPLATES,
};
pub use vocab::{
    build_vocab, normalize_tokens, tokenize, TokenizedReport, Vocabulary, BOS, EOS, MAX_TOKENS, PAD, UNK,
};

use crate::rng::splitmix64;

/// 8-bit grayscale square image, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub size: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    /// Pixel values in `[0, 1]`.
    pub fn to_unit(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 255.0).collect()
    }

    /// Pixel values in `[-1, 1]`, the autoencoder's input range.
    pub fn to_signed(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| p as f32 / 127.5 - 1.0).collect()
    }

    /// Maps `[-1, 1]` back to 8 bits, rounding half away from zero.
    pub fn from_signed(size: usize, values: &[f32]) -> Self {
        let pixels = values
            .iter()
            .map(|&v| {
                let x = ((v.clamp(-1.0, 1.0) as f64 + 1.0) * 127.5).round();
                x.clamp(0.0, 255.0) as u8
            })
            .collect();
        GrayImage { size, pixels }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Left,
    Right,
    None,
}

impl Side {
    pub fn word(self) -> &'static str {
        match self {
            Side::Left => "left",
            Side::Right => "right",
            Side::None => "none",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Severity {
    Small,
    Large,
    None,
}

impl Severity {
    pub fn word(self) -> &'static str {
        match self {
            Severity::Small => "small",
            Severity::Large => "large",
            Severity::None => "none",
        }
    }
}

/// Binary finding labels, in the fixed order of [`Labels::NAMES`].
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Labels {
    pub opacity: bool,
    pub left: bool,
    pub right: bool,
    pub large: bool,
}

impl Labels {
    pub const NAMES: [&'static str; 4] = ["opacity", "left", "right", "large"];

    pub fn from_finding(side: Side, severity: Severity) -> Self {
        let present = side != Side::None && severity != Severity::None;
        Labels {
            opacity: present,
            left: present && side == Side::Left,
            right: present && side == Side::Right,
            large: present && severity == Severity::Large,
        }
    }

    pub fn as_array(&self) -> [bool; 4] {
        [self.opacity, self.left, self.right, self.large]
    }

    pub fn side(&self) -> Side {
        match (self.left, self.right) {
            (true, false) => Side::Left,
            (false, true) => Side::Right,
            _ => Side::None,
        }
    }

    pub fn severity(&self) -> Severity {
        match (self.opacity, self.large) {
            (false, _) => Severity::None,
            (true, true) => Severity::Large,
            (true, false) => Severity::Small,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image: GrayImage,
    pub report: String,
    pub labels: Labels,
    pub side: Side,
    pub severity: Severity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

/// 70/10/20 assignment from a hash of the sample index.
pub fn split_of(index: usize) -> Split {
    match splitmix64(index as u64) % 10 {
        0..=6 => Split::Train,
        7 => Split::Val,
        _ => Split::Test,
    }
}

/// Partitions a corpus into (train, val, test) by [`split_of`].
pub fn split_corpus(corpus: &[Sample]) -> (Vec<Sample>, Vec<Sample>, Vec<Sample>) {
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for (i, s) in corpus.iter().enumerate() {
        match split_of(i) {
            Split::Train => tr.push(s.clone()),
            Split::Val => va.push(s.clone()),
            Split::Test => te.push(s.clone()),
        }
    }
    (tr, va, te)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_proportions_are_close_to_70_10_20() {
        let n = 10_000;
        let mut counts = [0usize; 3];
        for i in 0..n {
            counts[match split_of(i) {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            }] += 1;
        }
        let frac: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
        assert!((frac[0] - 0.7).abs() < 0.02);
        assert!((frac[1] - 0.1).abs() < 0.02);
        assert!((frac[2] - 0.2).abs() < 0.02);
    }

    #[test]
    fn signed_round_trip_is_exact_for_every_level() {
        let img = GrayImage {
            size: 16,
            pixels: (0..=255).collect(),
        };
        assert_eq!(GrayImage::from_signed(16, &img.to_signed()), img);
    }

    #[test]
    fn labels_reconstruct_side_and_severity() {
        for side in [Side::Left, Side::Right] {
            for sev in [Severity::Small, Severity::Large] {
                let l = Labels::from_finding(side, sev);
                assert_eq!((l.side(), l.severity()), (side, sev));
            }
        }
        let none = Labels::from_finding(Side::None, Severity::None);
        assert_eq!(none, Labels::default());
    }
}
