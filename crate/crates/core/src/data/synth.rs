//! Procedural toy chest radiographs with templated reports.
//!
//! Each image is a lung-field background (vertical gradient, bright
//! mediastinum, two darker lung lobes) with at most one bright elliptical
//! opacity. The report is rendered from the same draw that placed the
//! ellipse, so text, image and labels agree by construction.
//!
//! Laterality follows the radiographic convention: the patient's left lung
//! appears on the viewer's right (`x > size / 2`).

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{GrayImage, Labels, Sample, Severity, Side};
use crate::error::{Error, Result};
use crate::rng::stream;

/// Report of every sample without an opacity.
pub const HEALTHY_REPORT: &str = "no acute findings.";

/// Positive-finding templates; `{size}` and `{side}` are slot-filled.
pub const TEMPLATES: [&str; 11] = [
    "there is a {size} opacity in the {side} lung.",
    "{size} {side} lung opacity.",
    "{side} lung shows a {size} opacity.",
    "a {size} area of opacity is seen in the {side} lung.",
    "findings consistent with a {size} {side} sided opacity.",
    "{size} opacity projecting over the {side} lung field.",
    "the {side} lung demonstrates a {size} focal opacity.",
    "new {size} opacity in the {side} lung.",
    "there is a {size} {side} lung opacity concerning for pneumonia.",
    "{side} sided {size} opacity is present.",
    "{size} airspace opacity in the {side} lung.",
];

/// Pixels brighter than this belong to an opacity; the background never reaches it.
pub const OPACITY_THRESHOLD: f32 = 0.75;

const BACKGROUND_MAX: f64 = 0.62;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub image_size: usize,
    pub seed: u64,
    /// Probability that a sample carries an opacity.
    pub opacity_rate: f64,
    /// Probability that an opacity sits in the left lung.
    pub left_rate: f64,
    /// Probability that an opacity is large.
    pub large_rate: f64,
    /// Semi-major axis range as a fraction of the image width.
    pub small_radius: (f64, f64),
    pub large_radius: (f64, f64),
    pub opacity_intensity: (f64, f64),
}

impl SynthSpec {
    pub fn new(n_samples: usize, seed: u64) -> Self {
        SynthSpec {
            n_samples,
            image_size: 32,
            seed,
            opacity_rate: 0.5,
            left_rate: 0.5,
            large_rate: 0.5,
            small_radius: (0.07, 0.10),
            large_radius: (0.14, 0.18),
            opacity_intensity: (0.85, 0.95),
        }
    }

    pub fn with_size(mut self, size: usize) -> Self {
        self.image_size = size;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::config("n_samples must be at least 1"));
        }
        if self.image_size < 16 {
            return Err(Error::config(format!(
                "image_size {} below the minimum of 16",
                self.image_size
            )));
        }
        if !self.image_size.is_multiple_of(4) {
            return Err(Error::config(format!(
                "image_size {} is not divisible by 4",
                self.image_size
            )));
        }
        for (name, p) in [
            ("opacity_rate", self.opacity_rate),
            ("left_rate", self.left_rate),
            ("large_rate", self.large_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1]")));
            }
        }
        let ok_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !ok_range(self.small_radius) || !ok_range(self.large_radius) || self.large_radius.1 > 0.2 {
            return Err(Error::config("opacity radius ranges must be positive, ordered and ≤ 0.2"));
        }
        let (ilo, ihi) = self.opacity_intensity;
        if !(ilo > 0.8 && ilo <= ihi && ihi <= 1.0) {
            return Err(Error::config("opacity intensity range must lie in (0.8, 1]"));
        }
        Ok(())
    }
}

/// Renders a report for a finding; `template` indexes [`TEMPLATES`].
pub fn render_report(side: Side, severity: Severity, template: usize) -> String {
    match (side, severity) {
        (Side::None, _) | (_, Severity::None) => HEALTHY_REPORT.to_string(),
        _ => TEMPLATES[template % TEMPLATES.len()]
            .replace("{size}", severity.word())
            .replace("{side}", side.word()),
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Lung-field background in `[0.05, BACKGROUND_MAX]`, row-major.
fn background(size: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let brightness = rng.gen_range(-0.04..0.04);
    let dx = rng.gen_range(-0.02..0.02);
    let dy = rng.gen_range(-0.02..0.02);
    let lung_w = rng.gen_range(0.15..0.19);
    let lung_h = rng.gen_range(0.27..0.32);
    let s = size as f64;
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        let v = (y as f64 + 0.5) / s;
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let mut p = 0.15 + 0.2 * v + 0.2 * (-((u - 0.5) / 0.09).powi(2)).exp();
            for cx in [0.3, 0.7] {
                let r = ((u - cx - dx) / lung_w).powi(2) + ((v - 0.45 - dy) / lung_h).powi(2);
                // soft-edged darkening inside each lobe
                let inside = 1.0 / (1.0 + ((r - 1.0) * 8.0).exp());
                p *= 1.0 - 0.45 * inside;
            }
            let noise: f64 = rng.gen_range(-0.015..0.015);
            out.push((p + brightness + noise).clamp(0.05, BACKGROUND_MAX));
        }
    }
    out
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    intensity: f64,
}

fn draw_ellipse(img: &mut [f64], size: usize, e: &Ellipse) {
    let s = size as f64;
    let (sin, cos) = e.theta.sin_cos();
    // anti-aliasing band of about one pixel, measured along the minor axis
    let edge = e.b * s;
    for y in 0..size {
        let v = (y as f64 + 0.5) / s - e.cy;
        for x in 0..size {
            let u = (x as f64 + 0.5) / s - e.cx;
            let pu = u * cos + v * sin;
            let pv = -u * sin + v * cos;
            let d = ((pu / e.a).powi(2) + (pv / e.b).powi(2)).sqrt();
            let w = ((1.0 - d) * edge + 0.5).clamp(0.0, 1.0);
            let p = &mut img[y * size + x];
            *p = *p * (1.0 - w) + e.intensity * w;
        }
    }
}

/// Generates sample `index` of the corpus described by `spec`.
pub fn synth_sample(spec: &SynthSpec, index: u64) -> Sample {
    let mut rng = stream(spec.seed, index);
    let size = spec.image_size;
    let present = rng.gen_bool(spec.opacity_rate);
    let left = rng.gen_bool(spec.left_rate);
    let large = rng.gen_bool(spec.large_rate);
    let template = rng.gen_range(0..TEMPLATES.len());
    let mut img = background(size, &mut rng);

    let (side, severity) = if present {
        let side = if left { Side::Left } else { Side::Right };
        let severity = if large { Severity::Large } else { Severity::Small };
        // patient's left lung is drawn on the viewer's right
        let lung_x = if left { 0.7 } else { 0.3 };
        let a = uniform(
            &mut rng,
            if large { spec.large_radius } else { spec.small_radius },
        );
        let e = Ellipse {
            cx: lung_x + rng.gen_range(-0.05..0.05),
            cy: rng.gen_range(0.35..0.6),
            a,
            b: a * rng.gen_range(0.7..1.0),
            theta: rng.gen_range(0.0..std::f64::consts::PI),
            intensity: uniform(&mut rng, spec.opacity_intensity),
        };
        draw_ellipse(&mut img, size, &e);
        (side, severity)
    } else {
        (Side::None, Severity::None)
    };

    let pixels = img
        .iter()
        .map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Sample {
        image: GrayImage { size, pixels },
        report: render_report(side, severity, template),
        labels: Labels::from_finding(side, severity),
        side,
        severity,
    }
}

/// Generates the full corpus. Each sample draws from its own `(seed, index)` stream.
pub fn synth_corpus(spec: &SynthSpec) -> Result<Vec<Sample>> {
    spec.validate()?;
    Ok((0..spec.n_samples as u64).map(|i| synth_sample(spec, i)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent pixel analysis: threshold, then test the centroid's half-plane.
    fn analyse(img: &GrayImage) -> (bool, Side) {
        let thr = (OPACITY_THRESHOLD * 255.0) as u8;
        let (mut n, mut sx) = (0usize, 0f64);
        for y in 0..img.size {
            for x in 0..img.size {
                if img.pixels[y * img.size + x] > thr {
                    n += 1;
                    sx += x as f64 + 0.5;
                }
            }
        }
        if n < 3 {
            return (false, Side::None);
        }
        let side = if sx / n as f64 > img.size as f64 / 2.0 {
            Side::Left
        } else {
            Side::Right
        };
        (true, side)
    }

    #[test]
    fn identical_spec_gives_identical_corpus() {
        let spec = SynthSpec::new(1, 7);
        assert_eq!(synth_corpus(&spec).unwrap(), synth_corpus(&spec).unwrap());
    }

    #[test]
    fn healthy_samples_use_healthy_template_and_no_ellipse() {
        let corpus = synth_corpus(&SynthSpec::new(200, 5)).unwrap();
        let healthy: Vec<_> = corpus.iter().filter(|s| !s.labels.opacity).collect();
        assert!(!healthy.is_empty());
        for s in healthy {
            assert_eq!(s.report, HEALTHY_REPORT);
            assert_eq!(s.labels, Labels::default());
            assert_eq!(analyse(&s.image), (false, Side::None));
        }
    }

    #[test]
    fn presence_rate_near_configured_rate() {
        let corpus = synth_corpus(&SynthSpec::new(1000, 3)).unwrap();
        let pos = corpus.iter().filter(|s| s.labels.opacity).count();
        let frac = pos as f64 / 1000.0;
        assert!((frac - 0.5).abs() <= 0.05, "presence fraction {frac}");
    }

    #[test]
    fn labels_agree_with_pixel_analysis() {
        let corpus = synth_corpus(&SynthSpec::new(2000, 17)).unwrap();
        for (i, s) in corpus.iter().enumerate() {
            let (present, side) = analyse(&s.image);
            assert_eq!(present, s.labels.opacity, "sample {i}: {}", s.report);
            assert_eq!(side, s.side, "sample {i}: {}", s.report);
            assert_eq!(s.labels.left, side == Side::Left);
            assert_eq!(s.labels.right, side == Side::Right);
        }
    }

    #[test]
    fn report_mentions_side_and_size() {
        for s in synth_corpus(&SynthSpec::new(100, 1)).unwrap() {
            if s.labels.opacity {
                assert!(s.report.contains(s.side.word()));
                assert!(s.report.contains(s.severity.word()));
            }
        }
    }

    #[test]
    fn invalid_sizes_are_configuration_errors() {
        for size in [30, 8, 18] {
            let err = synth_corpus(&SynthSpec::new(4, 0).with_size(size)).unwrap_err();
            assert_eq!(err.exit_code(), 2);
        }
        assert!(synth_corpus(&SynthSpec::new(0, 0)).is_err());
        assert!(synth_corpus(&SynthSpec::new(2, 0).with_size(64)).is_ok());
    }
}
