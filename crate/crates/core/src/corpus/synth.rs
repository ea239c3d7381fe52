use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Corpus, FeatureRecord};
use crate::error::{Error, Result};
use crate::numkit::{argmax, dot, logsumexp, Matrix};
use crate::rng;

/// Parameters of the synthetic feature generator.
///
/// Audio features of class `k` spoken by speaker `s` are
/// `μ_k + o_s + σ·ε`; text features are `M·μ_k + σ_t·ε'` for a fixed random
/// coupling `M`. Class means are `separation·σ/√2` times a unit basis vector
/// (or a random unit direction when `K > d_a`), so distinct means sit
/// `separation·σ` apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub audio_dim: usize,
    pub text_dim: usize,
    pub num_speakers: usize,
    /// Records per class across the whole corpus, assigned to speakers round robin.
    pub class_counts: Vec<usize>,
    pub separation: f64,
    pub noise_std: f64,
    pub speaker_offset_std: f64,
    pub text_noise_std: f64,
    pub coupling_seed: u64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            audio_dim: 32,
            text_dim: 32,
            num_speakers: 10,
            class_counts: vec![60; 4],
            separation: 4.0,
            noise_std: 1.0,
            speaker_offset_std: 0.3,
            text_noise_std: 0.5,
            coupling_seed: 1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: &str| Err(Error::config(field, msg));
        if self.num_classes == 0 {
            return bad("num_classes", "must be positive");
        }
        if self.audio_dim == 0 {
            return bad("audio_dim", "must be positive");
        }
        if self.num_speakers == 0 {
            return bad("num_speakers", "must be positive");
        }
        if self.class_counts.len() != self.num_classes {
            return bad("class_counts", "needs one count per class");
        }
        if self.class_counts.contains(&0) {
            return bad("class_counts", "every count must be positive");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return bad("separation", "must be finite and >= 0");
        }
        for (field, v) in [
            ("noise_std", self.noise_std),
            ("speaker_offset_std", self.speaker_offset_std),
            ("text_noise_std", self.text_noise_std),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(field, "must be finite and >= 0");
            }
        }
        if self.noise_std == 0.0 {
            return bad("noise_std", "must be > 0");
        }
        Ok(())
    }
}

/// Every generative parameter of a synthetic corpus, enough to evaluate the
/// class-conditional densities and the Bayes rule in closed form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleSpec {
    pub class_means: Matrix,
    pub noise_std: f64,
    pub speakers: Vec<String>,
    /// Row `s` is the additive audio offset of `speakers[s]`; rows sum to zero.
    pub speaker_offsets: Matrix,
    /// `[d_t x d_a]` text coupling.
    pub coupling: Matrix,
    pub text_noise_std: f64,
    pub class_priors: Vec<f64>,
}

fn speaker_name(i: usize) -> String {
    format!("spk{i:03}")
}

fn gaussian_vec<R: Rng + ?Sized>(len: usize, std: f64, rng: &mut R) -> Vec<f64> {
    (0..len)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

pub fn synth_corpus(cfg: &SynthConfig) -> Result<(Corpus, OracleSpec)> {
    cfg.validate()?;
    let k = cfg.num_classes;
    let d_a = cfg.audio_dim;
    let d_t = cfg.text_dim;
    let radius = cfg.separation * cfg.noise_std / 2f64.sqrt();

    let mut coupling_rng = rng::from_seed(cfg.coupling_seed);
    let mut class_means = Matrix::zeros(k, d_a);
    if k <= d_a {
        for c in 0..k {
            class_means.set(c, c, radius);
        }
    } else {
        for c in 0..k {
            let dir = gaussian_vec(d_a, 1.0, &mut coupling_rng);
            let n = dot(&dir, &dir).sqrt();
            for (j, v) in dir.iter().enumerate() {
                class_means.set(c, j, radius * v / n);
            }
        }
    }
    let coupling_data = gaussian_vec(d_t * d_a, 1.0 / (d_a as f64).sqrt(), &mut coupling_rng);
    let coupling = Matrix::new(d_t, d_a, coupling_data)?;

    let mut rng = rng::from_seed(cfg.seed);
    let mut offsets = Matrix::zeros(cfg.num_speakers, d_a);
    for s in 0..cfg.num_speakers {
        let o = gaussian_vec(d_a, cfg.speaker_offset_std, &mut rng);
        offsets.row_mut(s).copy_from_slice(&o);
    }
    let centre: Vec<f64> = offsets
        .column_sums()
        .iter()
        .map(|v| v / cfg.num_speakers as f64)
        .collect();
    for s in 0..cfg.num_speakers {
        for (v, c) in offsets.row_mut(s).iter_mut().zip(&centre) {
            *v -= c;
        }
    }

    let total: usize = cfg.class_counts.iter().sum();
    let oracle = OracleSpec {
        class_means,
        noise_std: cfg.noise_std,
        speakers: (0..cfg.num_speakers).map(speaker_name).collect(),
        speaker_offsets: offsets,
        coupling,
        text_noise_std: cfg.text_noise_std,
        class_priors: cfg
            .class_counts
            .iter()
            .map(|&c| c as f64 / total as f64)
            .collect(),
    };

    let mut records = Vec::with_capacity(total);
    for (class, &count) in cfg.class_counts.iter().enumerate() {
        for j in 0..count {
            records.push(oracle.sample(class, j % cfg.num_speakers, &mut rng));
        }
    }
    let provenance = format!(
        "synthetic K={k} d_a={d_a} d_t={d_t} speakers={} separation={} seed={} coupling_seed={}",
        cfg.num_speakers, cfg.separation, cfg.seed, cfg.coupling_seed
    );
    let corpus = Corpus::new(d_a, d_t, k, records, provenance)?;
    Ok((corpus, oracle))
}

impl OracleSpec {
    pub fn num_classes(&self) -> usize {
        self.class_means.rows()
    }

    pub fn audio_dim(&self) -> usize {
        self.class_means.cols()
    }

    pub fn text_dim(&self) -> usize {
        self.coupling.rows()
    }

    /// Noise-free text feature `M·μ_k`.
    pub fn text_mean(&self, class: usize) -> Vec<f64> {
        let mu = self.class_means.row(class);
        self.coupling.row_iter().map(|m| dot(m, mu)).collect()
    }

    fn speaker_index(&self, speaker: &str) -> Option<usize> {
        self.speakers.iter().position(|s| s == speaker)
    }

    /// Draws one record of `class` from speaker number `speaker`.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, speaker: usize, rng: &mut R) -> FeatureRecord {
        let mu = self.class_means.row(class);
        let offset = self.speaker_offsets.row(speaker);
        let noise = gaussian_vec(mu.len(), self.noise_std, rng);
        let audio = mu
            .iter()
            .zip(offset)
            .zip(&noise)
            .map(|((m, o), e)| m + o + e)
            .collect();
        let text_noise = gaussian_vec(self.text_dim(), self.text_noise_std, rng);
        let text = self
            .text_mean(class)
            .iter()
            .zip(&text_noise)
            .map(|(m, e)| m + e)
            .collect();
        FeatureRecord {
            audio,
            text,
            label: class,
            speaker: self.speakers[speaker].clone(),
        }
    }

    /// Log class posteriors (up to a shared constant) of an audio feature.
    /// A known speaker uses that speaker's offset; otherwise the density is
    /// the uniform mixture over all speaker offsets.
    pub fn log_posterior(&self, audio: &[f64], speaker: Option<&str>) -> Vec<f64> {
        let var = self.noise_std * self.noise_std;
        let loglik = |class: usize, s: usize| -> f64 {
            let mu = self.class_means.row(class);
            let o = self.speaker_offsets.row(s);
            let sq: f64 = audio
                .iter()
                .zip(mu)
                .zip(o)
                .map(|((h, m), o)| (h - m - o).powi(2))
                .sum();
            -0.5 * sq / var
        };
        let known = speaker.and_then(|s| self.speaker_index(s));
        (0..self.num_classes())
            .map(|c| {
                let ll = match known {
                    Some(s) => loglik(c, s),
                    None => {
                        let terms: Vec<f64> =
                            (0..self.speakers.len()).map(|s| loglik(c, s)).collect();
                        logsumexp(&terms)
                    }
                };
                self.class_priors[c].ln() + ll
            })
            .collect()
    }

    pub fn bayes_predict(&self, audio: &[f64], speaker: Option<&str>) -> usize {
        argmax(&self.log_posterior(audio, speaker))
    }

    /// Fraction of records the Bayes rule labels correctly.
    pub fn bayes_accuracy(&self, records: &[FeatureRecord]) -> f64 {
        if records.is_empty() {
            return 0.0;
        }
        let hits = records
            .iter()
            .filter(|r| self.bayes_predict(&r.audio, Some(&r.speaker)) == r.label)
            .count();
        hits as f64 / records.len() as f64
    }

    /// Smallest distance between two distinct class means.
    pub fn min_class_distance(&self) -> f64 {
        let k = self.num_classes();
        let mut best = f64::INFINITY;
        for a in 0..k {
            for b in a + 1..k {
                let d: f64 = self
                    .class_means
                    .row(a)
                    .iter()
                    .zip(self.class_means.row(b))
                    .map(|(x, y)| (x - y).powi(2))
                    .sum::<f64>()
                    .sqrt();
                best = best.min(d);
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = SynthConfig::default();
        let (a, oa) = synth_corpus(&cfg).unwrap();
        let (b, ob) = synth_corpus(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        let (c, _) = synth_corpus(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let base = SynthConfig::default();
        assert!(synth_corpus(&SynthConfig {
            num_classes: 0,
            class_counts: vec![],
            ..base.clone()
        })
        .is_err());
        assert!(synth_corpus(&SynthConfig {
            num_speakers: 0,
            ..base.clone()
        })
        .is_err());
        assert!(synth_corpus(&SynthConfig {
            separation: -1.0,
            ..base
        })
        .is_err());
    }

    #[test]
    fn wide_separation_gives_perfect_bayes_accuracy() {
        let cfg = SynthConfig {
            num_classes: 2,
            class_counts: vec![200, 200],
            separation: 10.0,
            ..SynthConfig::default()
        };
        let (corpus, oracle) = synth_corpus(&cfg).unwrap();
        assert!(oracle.bayes_accuracy(corpus.records()) > 0.995);
        assert!((oracle.min_class_distance() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_separation_gives_chance_bayes_accuracy() {
        let cfg = SynthConfig {
            separation: 0.0,
            class_counts: vec![500; 4],
            ..SynthConfig::default()
        };
        let (corpus, oracle) = synth_corpus(&cfg).unwrap();
        // equal means and priors: every posterior ties, so the rule always says class 0
        let acc = oracle.bayes_accuracy(corpus.records());
        assert!((acc - 0.25).abs() < 1e-12, "{acc}");
    }

    #[test]
    fn empirical_class_means_converge() {
        let n = 2000;
        let cfg = SynthConfig {
            class_counts: vec![n; 4],
            audio_dim: 8,
            text_dim: 4,
            ..SynthConfig::default()
        };
        let (corpus, oracle) = synth_corpus(&cfg).unwrap();
        for k in 0..4 {
            let rows: Vec<&FeatureRecord> =
                corpus.records().iter().filter(|r| r.label == k).collect();
            for j in 0..8 {
                let mean: f64 = rows.iter().map(|r| r.audio[j]).sum::<f64>() / rows.len() as f64;
                let tol = 3.0 * cfg.noise_std / (n as f64).sqrt();
                assert!(
                    (mean - oracle.class_means.get(k, j)).abs() < tol,
                    "class {k} coord {j}: {mean}"
                );
            }
        }
    }

    #[test]
    fn round_robin_speakers() {
        let cfg = SynthConfig {
            num_speakers: 5,
            class_counts: vec![5; 4],
            ..SynthConfig::default()
        };
        let (corpus, _) = synth_corpus(&cfg).unwrap();
        assert_eq!(corpus.speakers().len(), 5);
        for s in corpus.speakers() {
            let labels: Vec<usize> = corpus
                .records()
                .iter()
                .filter(|r| r.speaker == s)
                .map(|r| r.label)
                .collect();
            assert_eq!(labels, vec![0, 1, 2, 3]);
        }
    }
}
