use rand::Rng;
use serde::{Deserialize, Serialize};

use super::generator::{generate_scene, GeneratorConfig, SceneSample};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixSource {
    pub name: String,
    pub config: GeneratorConfig,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

/// Weighted set of generator configs. With `equal_likelihood` every source is
/// drawn with the same probability regardless of its weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMix {
    pub sources: Vec<MixSource>,
    #[serde(default)]
    pub equal_likelihood: bool,
}

impl DatasetMix {
    pub fn single(name: &str, config: GeneratorConfig) -> Self {
        Self { sources: vec![MixSource { name: name.into(), config, weight: 1.0 }], equal_likelihood: true }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sources.is_empty() {
            return Err(Error::Empty("dataset mix has no sources".into()));
        }
        for s in &self.sources {
            if !(s.weight > 0.0) || !s.weight.is_finite() {
                return Err(Error::InvalidConfig(format!("source {:?} has weight {}", s.name, s.weight)));
            }
            s.config.validate()?;
        }
        Ok(())
    }

    /// Effective per-source draw probabilities.
    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.sources.len() as f64;
        if self.equal_likelihood {
            return vec![1.0 / n; self.sources.len()];
        }
        let total: f64 = self.sources.iter().map(|s| s.weight).sum();
        self.sources.iter().map(|s| s.weight / total).collect()
    }

    pub fn pick_source<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<usize> {
        if self.sources.is_empty() {
            return Err(Error::Empty("dataset mix has no sources".into()));
        }
        let probs = self.probabilities();
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return Ok(i);
            }
        }
        Ok(probs.len() - 1)
    }
}

/// Draws a source, then a scene seed, from `rng`. Returns the source index
/// alongside the sample.
pub fn sample_mix<R: Rng + ?Sized>(mix: &DatasetMix, rng: &mut R) -> Result<(usize, SceneSample)> {
    let source = mix.pick_source(rng)?;
    let seed: u64 = rng.random();
    let sample = generate_scene(&mix.sources[source].config, seed)?;
    Ok((source, sample))
}
