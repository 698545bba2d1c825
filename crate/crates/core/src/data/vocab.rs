use std::collections::HashMap;
use std::fs;
use std::path::Path;

use super::Sample;
use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Fixed tokenized length, BOS and EOS included.
pub const MAX_TOKENS: usize = 256;

const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, splits on whitespace and strips punctuation; empty pieces vanish.
pub fn normalize_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.chars()
                .filter(|c| c.is_alphanumeric())
                .flat_map(char::to_lowercase)
                .collect::<String>()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Dense token ↔ id map with the four special ids fixed at 0..=3.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Ids beyond the specials are assigned by descending frequency, ties
    /// broken lexicographically, so corpus order never matters.
    pub fn build<'a>(reports: impl IntoIterator<Item = &'a str>) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut n_reports = 0usize;
        for r in reports {
            n_reports += 1;
            for t in normalize_tokens(r) {
                *counts.entry(t).or_default() += 1;
            }
        }
        if n_reports == 0 {
            return Err(Error::config("cannot build a vocabulary from an empty corpus"));
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t))
            .collect();
        Ok(Self::from_tokens(tokens))
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..4] != SPECIALS.map(String::from) {
            return Err(Error::Format("vocabulary must start with the four special tokens".into()));
        }
        let v = Self::from_tokens(tokens);
        if v.index.len() != v.tokens.len() {
            return Err(Error::Format("vocabulary contains duplicate tokens".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Data {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

/// Builds the vocabulary of a corpus' reports.
pub fn build_vocab(corpus: &[Sample]) -> Result<Vocabulary> {
    Vocabulary::build(corpus.iter().map(|s| s.report.as_str()))
}

/// Fixed-length token ids plus padding mask (`true` = real token).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenizedReport {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl TokenizedReport {
    /// Number of real tokens, BOS and EOS included.
    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// `[BOS] + ids + [EOS]`, padded to [`MAX_TOKENS`]. Reports longer than
/// `MAX_TOKENS - 2` keep their first `MAX_TOKENS - 2` tokens so that EOS
/// lands on the last position.
pub fn tokenize(report: &str, vocab: &Vocabulary) -> TokenizedReport {
    let mut ids = Vec::with_capacity(MAX_TOKENS);
    ids.push(BOS);
    ids.extend(
        normalize_tokens(report)
            .iter()
            .take(MAX_TOKENS - 2)
            .map(|t| vocab.id(t).unwrap_or(UNK)),
    );
    ids.push(EOS);
    let real = ids.len();
    ids.resize(MAX_TOKENS, PAD);
    let mask = (0..MAX_TOKENS).map(|i| i < real).collect();
    TokenizedReport { ids, mask }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn frequency_then_lexicographic_ordering() {
        let v = Vocabulary::build(["a b", "b c"]).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("b"), Some(4));
        assert_eq!(v.id("a"), Some(5));
        assert_eq!(v.id("c"), Some(6));
        assert_eq!(Vocabulary::build(["x x x"]).unwrap().len(), 5);
    }

    #[test]
    fn corpus_order_does_not_matter() {
        let reports = ["no acute findings.", "small left lung opacity.", "there is a large opacity in the right lung."];
        let a = Vocabulary::build(reports).unwrap();
        let mut rev = reports;
        rev.reverse();
        assert_eq!(a, Vocabulary::build(rev).unwrap());
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(Vocabulary::build(std::iter::empty()).is_err());
    }

    #[test]
    fn empty_report_is_bos_eos() {
        let v = Vocabulary::build(["a"]).unwrap();
        let t = tokenize("", &v);
        assert_eq!(&t.ids[..2], &[BOS, EOS]);
        assert!(t.ids[2..].iter().all(|&i| i == PAD));
        assert_eq!(t.len(), 2);
    }

    #[test]
    fn healthy_report_has_five_real_tokens() {
        let v = Vocabulary::build(["no acute findings."]).unwrap();
        let t = tokenize("no acute findings.", &v);
        assert_eq!(t.len(), 5);
        assert!(t.ids[1..4].iter().all(|&i| i > UNK));
    }

    #[test]
    fn long_report_is_truncated_with_final_eos() {
        let v = Vocabulary::build(["w"]).unwrap();
        let text = vec!["w"; 300].join(" ");
        let t = tokenize(&text, &v);
        assert_eq!(t.ids[255], EOS);
        assert_eq!(t.ids[0], BOS);
        assert_eq!(t.len(), 256);
    }

    #[test]
    fn oov_maps_to_unk() {
        let v = Vocabulary::build(["a"]).unwrap();
        let t = tokenize("zzz a", &v);
        assert_eq!(&t.ids[..4], &[BOS, UNK, 4, EOS]);
    }

    #[test]
    fn text_round_trip() {
        let v = Vocabulary::build(["no acute findings.", "left lung"]).unwrap();
        assert_eq!(Vocabulary::from_text(&v.to_text()).unwrap(), v);
        assert!(Vocabulary::from_text("a\nb\n").is_err());
    }

    proptest! {
        #[test]
        fn length_law_holds(text in "[a-z .,!]{0,1200}") {
            let v = Vocabulary::build(["a b c"]).unwrap();
            let t = tokenize(&text, &v);
            prop_assert_eq!(t.ids.len(), MAX_TOKENS);
            prop_assert_eq!(t.mask.len(), MAX_TOKENS);
            let n = t.len();
            // mask is a prefix of ones followed by zeros
            prop_assert!(t.mask[..n].iter().all(|&m| m));
            prop_assert!(t.mask[n..].iter().all(|&m| !m));
            prop_assert!(t.ids[n..].iter().all(|&i| i == PAD));
            prop_assert_eq!(t.ids[0], BOS);
            prop_assert_eq!(t.ids[n - 1], EOS);
        }
    }
}
