use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Standard normal quantile at 0.999.
const Z_999: f64 = 3.090_232_306_167_813;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LengthDistribution {
    /// Lognormal fitted so that the 0.999 quantile is `p999_ratio` times the
    /// median, truncated to `max_len`.
    Lognormal {
        median: f64,
        #[serde(default = "default_ratio")]
        p999_ratio: f64,
        max_len: u32,
    },
    /// Recorded output lengths, replayed in order.
    Empirical { lengths: Vec<u32>, max_len: u32 },
}

fn default_ratio() -> f64 {
    10.0
}

impl LengthDistribution {
    pub fn lognormal(median: f64, p999_ratio: f64, max_len: u32) -> Result<Self> {
        let d = LengthDistribution::Lognormal { median, p999_ratio, max_len };
        d.validate()?;
        Ok(d)
    }

    /// Parses a length file: one token count per line, blank lines ignored.
    pub fn parse_empirical(text: &str, max_len: u32) -> Result<Self> {
        let mut lengths = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let v: u32 = line
                .parse()
                .map_err(|_| Error::Malformed(format!("length file line {}: {line:?} is not a token count", no + 1)))?;
            lengths.push(v);
        }
        let d = LengthDistribution::Empirical { lengths, max_len };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LengthDistribution::Lognormal { median, p999_ratio, max_len } => {
                if !(*median >= 1.0) {
                    return Err(Error::invalid(format!("median must be at least 1, got {median}")));
                }
                if !(*p999_ratio > 1.0) {
                    return Err(Error::invalid(format!("p999_ratio must exceed 1, got {p999_ratio}")));
                }
                if *max_len == 0 {
                    return Err(Error::invalid("max_len must be positive"));
                }
            }
            LengthDistribution::Empirical { lengths, max_len } => {
                if lengths.is_empty() {
                    return Err(Error::Malformed("length file has no entries".into()));
                }
                if *max_len == 0 {
                    return Err(Error::invalid("max_len must be positive"));
                }
            }
        }
        Ok(())
    }

    pub fn max_len(&self) -> u32 {
        match self {
            LengthDistribution::Lognormal { max_len, .. } | LengthDistribution::Empirical { max_len, .. } => *max_len,
        }
    }

    /// Lognormal `(mu, sigma)` of the untruncated distribution.
    pub fn lognormal_params(median: f64, p999_ratio: f64) -> (f64, f64) {
        (median.ln(), p999_ratio.ln() / Z_999)
    }
}

/// `n` output lengths, each at least one token and at most `max_len`.
pub fn sample_lengths(dist: &LengthDistribution, n: usize, seed: u64) -> Result<Vec<u32>> {
    dist.validate()?;
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let max_len = dist.max_len();
    Ok(match dist {
        LengthDistribution::Lognormal { median, p999_ratio, .. } => {
            let (mu, sigma) = LengthDistribution::lognormal_params(*median, *p999_ratio);
            let ln = LogNormal::new(mu, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| (ln.sample(&mut rng).round() as u32).clamp(1, max_len)).collect()
        }
        LengthDistribution::Empirical { lengths, .. } => {
            lengths.iter().cycle().take(n).map(|&l| l.clamp(1, max_len)).collect()
        }
    })
}
