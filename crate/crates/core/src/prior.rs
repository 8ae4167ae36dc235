//! Gaussian kernel density estimate of bounding-box area ratios, used as the
//! prior over per-step zoom ratios when generating search processes.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{area_ratio, BBox, ImageSize};

const MAX_REJECTIONS: usize = 1000;

/// Bandwidth used when Silverman's rule degenerates (all samples equal).
const FALLBACK_BANDWIDTH: f64 = 1e-3;

/// How the kernel bandwidth is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    /// Silverman's rule of thumb.
    Auto,
    Fixed(f64),
}

/// One-dimensional Gaussian KDE over ratios in `(0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawDistribution")]
pub struct RatioDistribution {
    samples: Vec<f64>,
    bandwidth: f64,
}

#[derive(Deserialize)]
struct RawDistribution {
    samples: Vec<f64>,
    bandwidth: f64,
}

impl TryFrom<RawDistribution> for RatioDistribution {
    type Error = Error;

    fn try_from(raw: RawDistribution) -> Result<Self> {
        fit_kde(&raw.samples, Bandwidth::Fixed(raw.bandwidth))
    }
}

/// Fits a Gaussian KDE to `ratios`.
pub fn fit_kde(ratios: &[f64], bandwidth: Bandwidth) -> Result<RatioDistribution> {
    if ratios.is_empty() {
        return Err(Error::Empty("ratio list"));
    }
    if let Some(bad) = ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
        return Err(Error::invalid(format!("ratio {bad} is outside (0, 1]")));
    }
    let bandwidth = match bandwidth {
        Bandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        Bandwidth::Fixed(h) => return Err(Error::invalid(format!("bandwidth {h} must be > 0"))),
        Bandwidth::Auto => silverman(ratios),
    };
    Ok(RatioDistribution {
        samples: ratios.to_vec(),
        bandwidth,
    })
}

fn silverman(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let mut sorted = xs.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile(&sorted, 0.75) - quantile(&sorted, 0.25);
    let spread = if iqr > 0.0 {
        var.sqrt().min(iqr / 1.34)
    } else {
        var.sqrt()
    };
    let h = 0.9 * spread * n.powf(-0.2);
    if h > 0.0 && h.is_finite() {
        h
    } else {
        FALLBACK_BANDWIDTH
    }
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

impl RatioDistribution {
    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Untruncated kernel density at `r`.
    pub fn density(&self, r: f64) -> f64 {
        let h = self.bandwidth;
        let norm = 1.0 / (h * (2.0 * PI).sqrt() * self.samples.len() as f64);
        norm * self
            .samples
            .iter()
            .map(|s| (-0.5 * ((r - s) / h).powi(2)).exp())
            .sum::<f64>()
    }

    /// Probability mass of the untruncated density on `[a, b]`.
    pub fn mass_between(&self, a: f64, b: f64) -> f64 {
        let h = self.bandwidth;
        self.samples
            .iter()
            .map(|s| normal_cdf((b - s) / h) - normal_cdf((a - s) / h))
            .sum::<f64>()
            / self.samples.len() as f64
    }

    /// Draws one ratio: a kernel center plus Gaussian noise, redrawn until it
    /// lands in `(0, 1]`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64> {
        for _ in 0..MAX_REJECTIONS {
            let center = self.samples[rng.gen_range(0..self.samples.len())];
            let noise: f64 = rng.sample(StandardNormal);
            let r = center + self.bandwidth * noise;
            if r > 0.0 && r <= 1.0 {
                return Ok(r);
            }
        }
        Err(Error::SamplingExhausted(MAX_REJECTIONS))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Free-function form of [`RatioDistribution::sample`].
pub fn sample_ratio<R: Rng + ?Sized>(dist: &RatioDistribution, rng: &mut R) -> Result<f64> {
    dist.sample(rng)
}

/// Area ratio of every `(gt box, image size)` pair, in input order.
pub fn ratios_from_dataset<'a, I>(items: I) -> Result<Vec<f64>>
where
    I: IntoIterator<Item = (&'a BBox, ImageSize)>,
{
    let ratios = items
        .into_iter()
        .map(|(b, size)| area_ratio(b, size))
        .collect::<Result<Vec<_>>>()?;
    if ratios.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    Ok(ratios)
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

// Maclaurin series below 2.5, erfc continued fraction above; ~1e-12 absolute.
fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.5 {
        // Maclaurin series
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for n in 1..200 {
            term *= -x2 / n as f64;
            let add = term / (2 * n + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        2.0 / PI.sqrt() * sum
    } else {
        // continued fraction for erfc, evaluated bottom-up
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = (k as f64 / 2.0) / (x + f);
        }
        1.0 - (-x * x).exp() / PI.sqrt() / (x + f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn single_kernel_peak() {
        let h = 0.05;
        let d = fit_kde(&[0.5], Bandwidth::Fixed(h)).unwrap();
        let want = 1.0 / (h * (2.0 * PI).sqrt());
        assert!((d.density(0.5) - want).abs() < 1e-12);
    }

    #[test]
    fn duplicates_match_single_sample() {
        let a = fit_kde(&[0.3], Bandwidth::Fixed(0.02)).unwrap();
        let b = fit_kde(&[0.3, 0.3, 0.3], Bandwidth::Fixed(0.02)).unwrap();
        for r in [0.0, 0.25, 0.3, 0.31, 0.9] {
            assert!((a.density(r) - b.density(r)).abs() < 1e-12);
        }
    }

    #[test]
    fn quadrature_matches_truncated_mass() {
        let d = fit_kde(&[0.02, 0.05, 0.08, 0.4, 0.97], Bandwidth::Auto).unwrap();
        // composite Simpson on [0, 1]
        let n = 20_000;
        let step = 1.0 / n as f64;
        let mut acc = d.density(0.0) + d.density(1.0);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * d.density(i as f64 * step);
        }
        let integral = acc * step / 3.0;
        assert!((integral - d.mass_between(0.0, 1.0)).abs() < 1e-3);
    }

    #[test]
    fn erf_reference_values() {
        assert!((erf(0.5) - 0.520_499_877_813_046_5).abs() < 1e-12);
        assert!((erf(1.0) - 0.842_700_792_949_714_9).abs() < 1e-12);
        assert!((erf(3.0) - 0.999_977_909_503_001_4).abs() < 1e-12);
        assert_eq!(erf(0.0), 0.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_kde(&[], Bandwidth::Auto).is_err());
        assert!(fit_kde(&[0.0], Bandwidth::Auto).is_err());
        assert!(fit_kde(&[1.2], Bandwidth::Auto).is_err());
        assert!(fit_kde(&[0.5], Bandwidth::Fixed(0.0)).is_err());
        assert!(serde_json::from_str::<RatioDistribution>(r#"{"samples":[],"bandwidth":0.1}"#).is_err());
    }

    #[test]
    fn vanishing_bandwidth_concentrates_samples() {
        let d = fit_kde(&[0.5], Bandwidth::Fixed(1e-9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let r = d.sample(&mut rng).unwrap();
            assert!((r - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn samples_stay_in_unit_interval() {
        let d = fit_kde(&[0.001, 0.01, 0.99, 1.0], Bandwidth::Fixed(0.05)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let r = d.sample(&mut rng).unwrap();
            assert!(r > 0.0 && r <= 1.0);
        }
    }

    #[test]
    fn impossible_support_exhausts_retries() {
        // every kernel sits far outside (0, 1]: practically no draw is accepted
        let d = RatioDistribution {
            samples: vec![1.0],
            bandwidth: 1e-12,
        };
        let shifted = RatioDistribution {
            samples: d.samples.iter().map(|s| s + 5.0).collect(),
            bandwidth: d.bandwidth,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            shifted.sample(&mut rng),
            Err(Error::SamplingExhausted(1000))
        ));
    }

    #[test]
    fn monte_carlo_mean_matches_truncated_kde_mean() {
        let d = fit_kde(&[0.02, 0.04, 0.06, 0.1, 0.15], Bandwidth::Fixed(0.03)).unwrap();
        // oracle: quadrature of r p(r) over (0, 1] divided by the mass there
        let n = 200_000;
        let step = 1.0 / n as f64;
        let (mut m0, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let r = (i as f64 + 0.5) * step;
            let p = d.density(r) * step;
            m0 += p;
            m1 += r * p;
            m2 += r * r * p;
        }
        let mean = m1 / m0;
        let sd = (m2 / m0 - mean * mean).sqrt();

        let draws = 100_000;
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let emp = (0..draws).map(|_| d.sample(&mut rng).unwrap()).sum::<f64>() / draws as f64;
        let se = sd / (draws as f64).sqrt();
        assert!((emp - mean).abs() < 3.0 * se, "emp {emp} vs {mean} (se {se})");
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        let d = fit_kde(&[0.05, 0.07], Bandwidth::Auto).unwrap();
        let draw = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..32).map(|_| d.sample(&mut rng).unwrap()).collect::<Vec<_>>()
        };
        assert_eq!(draw(9), draw(9));
        assert_ne!(draw(9), draw(10));
    }

    #[test]
    fn ratios_follow_input_order() {
        let img = ImageSize::new(100, 100).unwrap();
        let a = BBox::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::new(50.0, 50.0, 70.0, 70.0).unwrap();
        let full = BBox::full(img);
        assert_eq!(ratios_from_dataset([(&full, img)]).unwrap(), vec![1.0]);
        let rs = ratios_from_dataset([(&a, img), (&b, img)]).unwrap();
        assert!((rs[0] - 0.01).abs() < 1e-15 && (rs[1] - 0.04).abs() < 1e-15);
        assert!(ratios_from_dataset(std::iter::empty()).is_err());
    }

    #[test]
    fn density_is_non_negative_and_decays() {
        let d = fit_kde(&[0.1, 0.2], Bandwidth::Auto).unwrap();
        for i in -50..=50 {
            assert!(d.density(i as f64 * 0.1) >= 0.0);
        }
        assert!(d.density(50.0) < 1e-300);
        assert!(d.density(-50.0) < 1e-300);
    }
}
