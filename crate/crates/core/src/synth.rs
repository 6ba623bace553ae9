//! Deterministic synthetic datasets with group-conditional class separation.
//!
//! Feature mode draws each example from a spherical Gaussian. Class means
//! sit at `±separation / 2` on dimension 0 and groups are shifted by
//! `±group_offset` on dimension 1 (minority positive), so group membership is
//! visible to a classifier without carrying label information. Signal mode
//! synthesises multichannel recordings whose alpha-band amplitude depends on
//! the class and runs them through the feature pipeline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{seeded_rng, Dataset, Example, Group, SeedStream};
use crate::error::{Error, Result};
use crate::features::{segment, segment_feature_dim, segment_features, MultiChannelSignal, ALPHA, TOTAL};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SynthMode {
    Features,
    Signal {
        sample_rate: f64,
        /// Length of one segment (one example) in seconds.
        duration_s: f64,
        channels: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Subjects per cell, `counts[label][group]`.
    pub counts: [[usize; 2]; 2],
    pub feature_dim: usize,
    /// Distance between class means, per group.
    pub class_separation: [f64; 2],
    pub group_offset: f64,
    pub noise_std: f64,
    pub segments_per_subject: usize,
    pub seed: u64,
    pub mode: SynthMode,
    pub group_names: [String; 2],
}

impl SynthConfig {
    pub fn features(counts: [[usize; 2]; 2], feature_dim: usize, seed: u64) -> Self {
        SynthConfig {
            counts,
            feature_dim,
            class_separation: [2.0, 2.0],
            group_offset: 0.5,
            noise_std: 1.0,
            segments_per_subject: 10,
            seed,
            mode: SynthMode::Features,
            group_names: ["s0".into(), "s1".into()],
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in Group::BOTH {
            if self.counts[0][g.index()] + self.counts[1][g.index()] == 0 {
                return Err(Error::invalid(format!("group {g} has no subjects")));
            }
        }
        if self.feature_dim == 0 {
            return Err(Error::invalid("feature_dim must be positive"));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise_std must be positive, got {}", self.noise_std)));
        }
        if self.segments_per_subject == 0 {
            return Err(Error::invalid("segments_per_subject must be positive"));
        }
        if self.class_separation.iter().any(|s| !s.is_finite()) || !self.group_offset.is_finite() {
            return Err(Error::invalid("separations and offset must be finite"));
        }
        if self.group_names[0] == self.group_names[1] {
            return Err(Error::invalid("group names must differ"));
        }
        if let SynthMode::Signal {
            sample_rate,
            duration_s,
            channels,
        } = self.mode
        {
            if channels < 2 {
                return Err(Error::invalid("signal mode needs at least two channels"));
            }
            if !(sample_rate > 2.0 * TOTAL.high) {
                return Err(Error::invalid(format!(
                    "sample rate {sample_rate} Hz cannot resolve {} Hz",
                    TOTAL.high
                )));
            }
            if !(duration_s >= 1.0) {
                return Err(Error::invalid("segments must last at least one second"));
            }
            let expected = segment_feature_dim(channels);
            if self.feature_dim != expected {
                return Err(Error::invalid(format!(
                    "{channels} channels give {expected} features, config says {}",
                    self.feature_dim
                )));
            }
        }
        Ok(())
    }

    pub fn example_count(&self) -> usize {
        self.counts.iter().flatten().sum::<usize>() * self.segments_per_subject
    }
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = seeded_rng(SeedStream::new(cfg.seed).derive("synth", 0));
    let mut examples = Vec::with_capacity(cfg.example_count());
    for g in Group::BOTH {
        for label in [1u8, 0] {
            for k in 0..cfg.counts[label as usize][g.index()] {
                let id = format!(
                    "{}-{}-{:03}",
                    cfg.group_names[g.index()],
                    if label == 1 { "pos" } else { "neg" },
                    k
                );
                let rows = match cfg.mode {
                    SynthMode::Features => feature_rows(cfg, g, label, &mut rng),
                    SynthMode::Signal {
                        sample_rate,
                        duration_s,
                        channels,
                    } => signal_rows(cfg, g, label, sample_rate, duration_s, channels, &mut rng)?,
                };
                examples.extend(rows.into_iter().map(|x| Example::new(x, f64::from(label), g, id.clone())));
            }
        }
    }
    Dataset::checked(examples, cfg.feature_dim, cfg.group_names.clone())
}

fn feature_rows(cfg: &SynthConfig, g: Group, label: u8, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut mean = vec![0.0; cfg.feature_dim];
    mean[0] = (f64::from(label) - 0.5) * cfg.class_separation[g.index()];
    if cfg.feature_dim > 1 {
        mean[1] = if g == Group::S0 { cfg.group_offset } else { -cfg.group_offset };
    }
    (0..cfg.segments_per_subject)
        .map(|_| {
            mean.iter()
                .map(|m| m + cfg.noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect()
}

fn signal_rows(
    cfg: &SynthConfig,
    g: Group,
    label: u8,
    sample_rate: f64,
    duration_s: f64,
    channels: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let seg_len = (duration_s * sample_rate).round() as usize;
    let n = seg_len * cfg.segments_per_subject;
    let centre = 1.0 + (f64::from(label) - 0.5) * 0.5 * cfg.class_separation[g.index()];
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut samples = Vec::with_capacity(channels);
    for _ in 0..channels {
        let alpha_phase = rng.gen_range(0.0..two_pi);
        let beta_phase = rng.gen_range(0.0..two_pi);
        let mut ch = Vec::with_capacity(n);
        for s in 0..cfg.segments_per_subject {
            let jitter: f64 = rng.sample(StandardNormal);
            let amp = (centre + 0.25 * cfg.noise_std * jitter).max(0.05);
            for i in 0..seg_len {
                let t = (s * seg_len + i) as f64 / sample_rate;
                let noise: f64 = rng.sample(StandardNormal);
                ch.push(
                    amp * (two_pi * 10.0 * t + alpha_phase).sin()
                        + 0.7 * (two_pi * 20.0 * t + beta_phase).sin()
                        + 0.5 * cfg.noise_std * noise,
                );
            }
        }
        samples.push(ch);
    }
    let names = (0..channels).map(|c| format!("ch{c}")).collect();
    let signal = MultiChannelSignal::new(samples, sample_rate, names)?;
    segment(&signal, duration_s)?
        .iter()
        .map(|seg| segment_features(seg, ALPHA, TOTAL))
        .collect()
}

fn preset_config(counts: [[usize; 2]; 2], names: [&str; 2], seed: u64) -> SynthConfig {
    SynthConfig {
        group_names: names.map(String::from),
        ..SynthConfig::features(counts, 8, seed)
    }
}

/// Subject counts of the Mumtaz resting-state study: females are the minority.
pub fn mumtaz_like(seed: u64) -> SynthConfig {
    preset_config([[8, 20], [13, 17]], ["female", "male"], seed)
}

pub fn modma_like(seed: u64) -> SynthConfig {
    preset_config([[9, 20], [11, 13]], ["female", "male"], seed)
}

/// Males are the minority here.
pub fn rest_like(seed: u64) -> SynthConfig {
    preset_config([[35, 40], [12, 34]], ["male", "female"], seed)
}

pub const PRESETS: [&str; 4] = ["mumtaz-like", "modma-like", "rest-like", "biased"];

/// Looks up a named preset. `bias_gap` only affects `biased`.
pub fn preset(name: &str, seed: u64, bias_gap: f64) -> Result<SynthConfig> {
    match name {
        "mumtaz-like" => Ok(mumtaz_like(seed)),
        "modma-like" => Ok(modma_like(seed)),
        "rest-like" => Ok(rest_like(seed)),
        "biased" => Ok(biased_config(bias_gap, seed)),
        other => Err(Error::Config(format!(
            "unknown preset {other:?}; expected one of {}",
            PRESETS.join(", ")
        ))),
    }
}

/// 20/20 majority and 12/12 minority subjects, 10 segments each, 8 dims,
/// majority separation 2 and minority separation `2 - bias_gap`.
pub fn biased_config(bias_gap: f64, seed: u64) -> SynthConfig {
    SynthConfig {
        class_separation: [2.0 - bias_gap, 2.0],
        group_names: ["minority".into(), "majority".into()],
        ..SynthConfig::features([[12, 20], [12, 20]], 8, seed)
    }
}

pub fn biased_preset(bias_gap: f64, seed: u64) -> Dataset {
    generate(&biased_config(bias_gap, seed)).expect("biased preset is always valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::discrimination;

    #[test]
    fn mumtaz_counts() {
        let ds = generate(&mumtaz_like(3)).unwrap();
        assert_eq!(ds.len(), 580);
        let cells = ds.cell_counts();
        assert_eq!(cells, [[80, 200], [130, 170]]);
        assert_eq!(ds.group_names, ["female".to_string(), "male".to_string()]);
    }

    #[test]
    fn balanced_counts_have_little_discrimination() {
        for seed in 0..20 {
            let mut cfg = SynthConfig::features([[10, 10], [10, 10]], 4, seed);
            cfg.segments_per_subject = 10;
            let ds = generate(&cfg).unwrap();
            assert_eq!(ds.len(), 400);
            assert!(discrimination(&ds).unwrap().disc.abs() <= 0.05);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&mumtaz_like(9)).unwrap();
        let b = generate(&mumtaz_like(9)).unwrap();
        assert_eq!(a.digest(), b.digest());
        let c = generate(&mumtaz_like(10)).unwrap();
        assert_ne!(a.digest(), c.digest());
        assert_eq!(biased_preset(1.5, 4), biased_preset(1.5, 4));
    }

    #[test]
    fn subject_coherence() {
        let ds = generate(&rest_like(1)).unwrap();
        let mut seen = std::collections::HashMap::new();
        for e in &ds.examples {
            let entry = seen.entry(e.subject_id.clone()).or_insert((e.group, e.label, 0));
            assert_eq!((entry.0, entry.1), (e.group, e.label));
            entry.2 += 1;
        }
        assert_eq!(seen.len(), 121);
        assert!(seen.values().all(|v| v.2 == 10));
    }

    #[test]
    fn signal_mode_shapes() {
        let cfg = SynthConfig {
            mode: SynthMode::Signal {
                sample_rate: 128.0,
                duration_s: 2.0,
                channels: 3,
            },
            feature_dim: 6,
            segments_per_subject: 3,
            ..SynthConfig::features([[2, 2], [2, 2]], 6, 5)
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.len(), 24);
        assert!(ds.examples.iter().all(|e| e.features.len() == 6 && e.features.iter().all(|x| x.is_finite())));
        // relative powers are fractions; the asymmetry entries are their differences
        for e in &ds.examples {
            assert!(e.features[..3].iter().all(|&r| r > 0.0 && r < 1.0));
            assert!((e.features[3] - (e.features[0] - e.features[1])).abs() < 1e-12);
        }
        let bad = SynthConfig { feature_dim: 5, ..cfg };
        assert!(generate(&bad).is_err());
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SynthConfig::features([[0, 5], [0, 5]], 4, 0);
        assert!(generate(&cfg).is_err());
        cfg.counts = [[1, 5], [0, 5]];
        cfg.noise_std = 0.0;
        assert!(generate(&cfg).is_err());
        assert!(preset("nope", 0, 0.0).is_err());
    }
}
