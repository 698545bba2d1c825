use crate::{Error, Result};

/// Probability that a random positive outranks a random negative, ties
/// counting one half. Computed from midranks in `O(n log n)`.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Numeric("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::config("AUROC needs at least one positive and one negative"));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    pub(crate) fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for (i, &li) in labels.iter().enumerate() {
            for (j, &lj) in labels.iter().enumerate() {
                if li && !lj {
                    den += 1.0;
                    num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_cases() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 6], &[true, false, true, false, false, true]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.8, 0.4, 0.6, 0.2], &[true, true, false, false]).unwrap(), 0.75);
        assert!(auroc(&[0.1, 0.2], &[true, true]).is_err());
        assert!(auroc(&[0.1], &[true, false]).is_err());
    }

    fn scored() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..20)
            .prop_flat_map(|n| (proptest::collection::vec(0u8..6, n), proptest::collection::vec(any::<bool>(), n)))
            .prop_filter("both classes", |(_, l)| l.iter().any(|&x| x) && l.iter().any(|&x| !x))
            .prop_map(|(s, l)| (s.into_iter().map(|v| v as f64 * 0.25).collect(), l))
    }

    proptest! {
        #[test]
        fn equals_pair_counting((s, l) in scored()) {
            prop_assert_eq!(auroc(&s, &l).unwrap(), brute(&s, &l));
        }

        #[test]
        fn negation_complements((s, l) in scored()) {
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((auroc(&s, &l).unwrap() + auroc(&neg, &l).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn invariant_to_increasing_maps((s, l) in scored()) {
            let mapped: Vec<f64> = s.iter().map(|v| (3.0 * v).exp() - 7.0).collect();
            prop_assert_eq!(auroc(&s, &l).unwrap(), auroc(&mapped, &l).unwrap());
        }
    }
}
