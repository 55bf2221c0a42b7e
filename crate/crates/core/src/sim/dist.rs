use rand::Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

/// A non-negative duration distribution, in seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Dist {
    Fixed {
        value: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Log-normal with the given median and shape, truncated at `cap` when set.
    LogNormal {
        median: f64,
        sigma: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cap: Option<f64>,
    },
}

impl Dist {
    pub const ZERO: Dist = Dist::Fixed { value: 0.0 };

    pub fn fixed(value: f64) -> Self {
        Dist::Fixed { value }
    }

    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            Dist::Fixed { value } => value >= 0.0 && value.is_finite(),
            Dist::Uniform { lo, hi } => lo >= 0.0 && lo <= hi && hi.is_finite(),
            Dist::LogNormal { median, sigma, cap } => {
                median > 0.0 && sigma >= 0.0 && median.is_finite() && cap.is_none_or(|c| c >= 0.0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{self:?} can produce negative or non-finite samples"))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Dist::Fixed { value } => value,
            Dist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }
            Dist::LogNormal { median, sigma, cap } => {
                let x = if sigma > 0.0 {
                    LogNormal::new(median.ln(), sigma).expect("validated").sample(rng)
                } else {
                    median
                };
                cap.map_or(x, |c| x.min(c))
            }
        }
    }

    /// Largest value the distribution can produce, if bounded.
    pub fn upper_bound(&self) -> Option<f64> {
        match *self {
            Dist::Fixed { value } => Some(value),
            Dist::Uniform { hi, .. } => Some(hi),
            Dist::LogNormal { sigma, median, cap } => cap.or((sigma == 0.0).then_some(median)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn samples_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ln = Dist::LogNormal {
            median: 20.0,
            sigma: 2.0,
            cap: Some(3000.0),
        };
        let xs: Vec<f64> = (0..20_000).map(|_| ln.sample(&mut rng)).collect();
        assert!(xs.iter().all(|&x| (0.0..=3000.0).contains(&x)));
        let mut sorted = xs.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        assert!((median / 20.0 - 1.0).abs() < 0.1, "median {median}");

        let u = Dist::Uniform { lo: 120.0, hi: 180.0 };
        assert!((0..1000).map(|_| u.sample(&mut rng)).all(|x| (120.0..180.0).contains(&x)));
        assert_eq!(Dist::fixed(5.0).sample(&mut rng), 5.0);
    }

    #[test]
    fn json_shape() {
        let d: Dist = serde_json::from_str(r#"{"kind":"log_normal","median":8,"sigma":1.5,"cap":3000}"#).unwrap();
        assert_eq!(d.upper_bound(), Some(3000.0));
        assert!(Dist::Uniform { lo: 2.0, hi: 1.0 }.validate().is_err());
    }
}
