use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::data::GrayImage;
use crate::{Error, Result};

/// Gaussian fit of a feature set.
#[derive(Clone, Debug, PartialEq)]
pub struct FrechetStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl FrechetStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Fewer than `d + 1` samples cannot give a full-rank covariance.
    pub fn rank_deficient(&self) -> bool {
        self.n < self.dim() + 1
    }
}

/// Sample mean and unbiased covariance of `N × d` features.
pub fn fit_frechet(features: &[Vec<f64>]) -> Result<FrechetStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::config(format!("need at least 2 feature rows, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(Error::shape("feature rows must share a nonzero width"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(FrechetStats { mean, cov, n })
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let s = e.eigenvalues.map(|l| l.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&s) * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)`, floored at 0.
///
/// The trace term uses `Tr((Σa^½ Σb Σa^½)^½)`, which has the same value but
/// stays symmetric.
pub fn frechet_distance(a: &FrechetStats, b: &FrechetStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!(
            "feature dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let dm = (&a.mean - &b.mean).norm_squared();
    let ra = sym_sqrt(&a.cov);
    let inner = &ra * &b.cov * &ra;
    let e = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = e.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let d = dm + a.cov.trace() + b.cov.trace() - 2.0 * tr_sqrt;
    if !d.is_finite() {
        return Err(Error::Numeric("Fréchet distance is not finite".into()));
    }
    Ok(d.max(0.0))
}

/// Frozen image embedding used for distribution comparisons.
pub trait FeatureExtractor {
    fn features(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>>;
}

impl FeatureExtractor for crate::clip::ClipModel<f32> {
    fn features(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
        let t = self.encode_images(images)?;
        Ok(t.data()
            .chunks(t.cols())
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect())
    }
}

pub fn fid(real: &[&GrayImage], generated: &[&GrayImage], extractor: &impl FeatureExtractor) -> Result<f64> {
    if real.is_empty() || generated.is_empty() {
        return Err(Error::config("FID needs nonempty image sets"));
    }
    let a = fit_frechet(&extractor.features(real)?)?;
    let b = fit_frechet(&extractor.features(generated)?)?;
    if a.rank_deficient() || b.rank_deficient() {
        log::warn!("FID on {} and {} images in {} dims: covariance is rank deficient", a.n, b.n, a.dim());
    }
    frechet_distance(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn stats(mean: Vec<f64>, cov: DMatrix<f64>) -> FrechetStats {
        FrechetStats {
            mean: DVector::from_vec(mean),
            cov,
            n: 1000,
        }
    }

    fn gauss1(mu: f64, var: f64) -> FrechetStats {
        stats(vec![mu], DMatrix::from_element(1, 1, var))
    }

    #[test]
    fn hand_covariance() {
        let s = fit_frechet(&[vec![0.0, 0.0], vec![2.0, 0.0]]).unwrap();
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.cov, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        let same = fit_frechet(&[vec![1.5, -2.0], vec![1.5, -2.0]]).unwrap();
        assert_eq!(same.cov, DMatrix::zeros(2, 2));
        assert!(fit_frechet(&[vec![1.0]]).is_err());
    }

    #[test]
    fn constant_column_has_zero_covariance() {
        let rows: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64, 3.0, (i * i) as f64]).collect();
        let s = fit_frechet(&rows).unwrap();
        for k in 0..3 {
            assert_eq!(s.cov[(1, k)], 0.0);
            assert_eq!(s.cov[(k, 1)], 0.0);
        }
    }

    #[test]
    fn one_dimensional_cases() {
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(1.0, 1.0)).unwrap() - 1.0).abs() < 1e-6);
        assert!((frechet_distance(&gauss1(0.0, 1.0), &gauss1(0.0, 4.0)).unwrap() - 1.0).abs() < 1e-6);
        let a = gauss1(0.3, 2.5);
        assert!(frechet_distance(&a, &a).unwrap() < 1e-12);
        assert!(frechet_distance(&a, &stats(vec![0.0, 0.0], DMatrix::identity(2, 2))).is_err());
    }

    fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::<f64>::from_fn(d, d, |_, _| StandardNormal.sample(rng));
        &a * a.transpose() / d as f64 + DMatrix::identity(d, d) * 0.05
    }

    /// Denman–Beavers iteration for the principal square root of `Σa Σb`,
    /// whose eigenvalues are real and positive.
    fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        let mut y = a * b;
        let mut z = DMatrix::identity(a.nrows(), a.nrows());
        for _ in 0..100 {
            let yi = y.clone().try_inverse().unwrap();
            let zi = z.clone().try_inverse().unwrap();
            let ny = (&y + zi) * 0.5;
            z = (&z + yi) * 0.5;
            y = ny;
        }
        y.trace()
    }

    #[test]
    fn matches_iterative_square_root_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for d in [2, 3, 5, 8] {
            let (ca, cb) = (random_spd(d, &mut rng), random_spd(d, &mut rng));
            let ma: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mb: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let dm: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
            let want = dm + ca.trace() + cb.trace() - 2.0 * trace_sqrt_product(&ca, &cb);
            let got = frechet_distance(&stats(ma, ca), &stats(mb, cb)).unwrap();
            assert!((got - want).abs() < 1e-6, "d={d}: {got} vs {want}");
        }
    }

    proptest! {
        #[test]
        fn symmetric_and_nonnegative(seed in any::<u64>(), d in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = stats((0..d).map(|_| StandardNormal.sample(&mut rng)).collect(), random_spd(d, &mut rng));
            let b = stats((0..d).map(|_| StandardNormal.sample(&mut rng)).collect(), random_spd(d, &mut rng));
            let ab = frechet_distance(&a, &b).unwrap();
            let ba = frechet_distance(&b, &a).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() < 1e-6 * (1.0 + ab));
            prop_assert!(frechet_distance(&a, &a).unwrap() < 1e-8);
        }
    }

    struct Identity;

    impl FeatureExtractor for Identity {
        fn features(&self, images: &[&GrayImage]) -> Result<Vec<Vec<f64>>> {
            Ok(images.iter().map(|i| i.pixels[..6].iter().map(|&p| p as f64).collect()).collect())
        }
    }

    fn noise_images(n: usize, seed: u64) -> Vec<GrayImage> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| GrayImage {
                size: 4,
                pixels: (0..16).map(|_| rng.gen_range(100..140)).collect(),
            })
            .collect()
    }

    #[test]
    fn set_against_itself_is_zero() {
        let imgs = noise_images(40, 1);
        let r: Vec<&GrayImage> = imgs.iter().collect();
        assert!(fid(&r, &r, &Identity).unwrap() < 1e-8);
        assert!(fid(&r, &[], &Identity).is_err());
    }

    #[test]
    fn duplicated_set_differs_only_by_bias_correction() {
        let (a, b) = (noise_images(30, 2), noise_images(30, 3));
        let ra: Vec<&GrayImage> = a.iter().collect();
        let rb: Vec<&GrayImage> = b.iter().collect();
        let doubled: Vec<&GrayImage> = ra.iter().chain(&ra).copied().collect();
        let n = ra.len() as f64;
        let mut sa = fit_frechet(&Identity.features(&ra).unwrap()).unwrap();
        sa.cov *= 2.0 * (n - 1.0) / (2.0 * n - 1.0);
        let sb = fit_frechet(&Identity.features(&rb).unwrap()).unwrap();
        let corrected = frechet_distance(&sa, &sb).unwrap();
        assert!((fid(&doubled, &rb, &Identity).unwrap() - corrected).abs() < 1e-6);
    }
}
