//! Flat, typed run configuration.
//!
//! The file is TOML with one key per setting and no tables. Any key can be
//! overridden from the environment as `MIAUG_<KEY>` (upper case), whose value
//! is parsed as a TOML value and falls back to a plain string. Unknown keys,
//! from either source, are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::{FinalConfig, Mode};
use crate::baseline::BaselineConfig;
use crate::corpus::SynthConfig;
use crate::error::{Error, Result};
use crate::infogan::{DiscriminatorFeatures, GanConfig};

pub const ENV_PREFIX: &str = "MIAUG_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub jobs: usize,

    /// Corpus file (`.csv` or binary); when empty a synthetic corpus is generated.
    pub corpus: Option<PathBuf>,
    /// Class count for CSV input; defaults to `max label + 1`.
    pub corpus_classes: Option<usize>,
    pub synth_classes: usize,
    pub synth_audio_dim: usize,
    pub synth_text_dim: usize,
    pub synth_speakers: usize,
    pub synth_class_counts: Vec<usize>,
    pub synth_separation: f64,
    pub synth_noise_std: f64,
    pub synth_speaker_offset_std: f64,
    pub synth_text_noise_std: f64,
    pub synth_coupling_seed: u64,

    pub baseline_epochs: usize,
    pub batch_size: usize,
    pub baseline_lr: f64,
    pub tau: f64,
    pub w_ser: f64,
    pub w_cl: f64,
    pub w_mi: f64,
    pub symmetric_cl: bool,

    pub noise_dim: usize,
    pub lambda: f64,
    pub gan_lr_d: f64,
    pub gan_lr_g: f64,
    pub gan_epochs: usize,
    pub freeze_q: bool,
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub disc_features: DiscriminatorFeatures,
    pub disc_conditional: bool,
    pub ema_decay: f64,

    pub mode: Mode,
    /// Add generated features (2x audio, 4x fusion) to the final training set.
    pub augment: bool,
    pub balance: bool,
    /// Regenerate the generated part of the final training set every epoch.
    pub resample: bool,
    pub final_epochs: usize,
    pub final_lr: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        let base = BaselineConfig::default();
        let gan = GanConfig::default();
        let fin = FinalConfig::default();
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            jobs: 1,
            corpus: None,
            corpus_classes: None,
            synth_classes: synth.num_classes,
            synth_audio_dim: synth.audio_dim,
            synth_text_dim: synth.text_dim,
            synth_speakers: synth.num_speakers,
            synth_class_counts: synth.class_counts,
            synth_separation: synth.separation,
            synth_noise_std: synth.noise_std,
            synth_speaker_offset_std: synth.speaker_offset_std,
            synth_text_noise_std: synth.text_noise_std,
            synth_coupling_seed: synth.coupling_seed,
            baseline_epochs: base.epochs,
            batch_size: base.batch_size,
            baseline_lr: base.lr,
            tau: base.tau,
            w_ser: base.w_ser,
            w_cl: base.w_cl,
            w_mi: base.w_mi,
            symmetric_cl: base.symmetric_cl,
            noise_dim: gan.noise_dim,
            lambda: gan.lambda,
            gan_lr_d: gan.lr_d,
            gan_lr_g: gan.lr_g,
            gan_epochs: gan.epochs,
            freeze_q: gan.freeze_q,
            mixup: gan.mixup,
            mixup_alpha: gan.mixup_alpha,
            disc_features: gan.disc_features,
            disc_conditional: gan.disc_conditional,
            ema_decay: gan.ema_decay,
            mode: Mode::Audio,
            augment: true,
            balance: false,
            resample: false,
            final_epochs: fin.epochs,
            final_lr: fin.lr,
        }
    }
}

/// Parses an override value as a TOML value, or keeps it as a string.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// Parses `text`, applies `MIAUG_*` pairs from `env`, and validates.
    pub fn parse(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("<file>", e.message().to_string()))?;
        for (key, value) in env {
            if let Some(name) = key.strip_prefix(ENV_PREFIX) {
                table.insert(name.to_ascii_lowercase(), env_value(&value));
            }
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| {
            let message = e.message().to_string();
            let field = message
                .split('`')
                .nth(1)
                .unwrap_or("<file>")
                .to_string();
            Error::Config { field, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) with process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?,
            None => String::new(),
        };
        Self::parse(&text, std::env::vars())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_classes: self.synth_classes,
            audio_dim: self.synth_audio_dim,
            text_dim: self.synth_text_dim,
            num_speakers: self.synth_speakers,
            class_counts: self.synth_class_counts.clone(),
            separation: self.synth_separation,
            noise_std: self.synth_noise_std,
            speaker_offset_std: self.synth_speaker_offset_std,
            text_noise_std: self.synth_text_noise_std,
            coupling_seed: self.synth_coupling_seed,
            seed: self.seed,
        }
    }

    pub fn baseline(&self, seed: u64) -> BaselineConfig {
        BaselineConfig {
            epochs: self.baseline_epochs,
            batch_size: self.batch_size,
            lr: self.baseline_lr,
            tau: self.tau,
            w_ser: self.w_ser,
            w_cl: self.w_cl,
            w_mi: self.w_mi,
            symmetric_cl: self.symmetric_cl,
            seed,
        }
    }

    pub fn gan(&self, seed: u64) -> GanConfig {
        GanConfig {
            noise_dim: self.noise_dim,
            lambda: self.lambda,
            tau: self.tau,
            lr_d: self.gan_lr_d,
            lr_g: self.gan_lr_g,
            epochs: self.gan_epochs,
            batch_size: self.batch_size,
            freeze_q: self.freeze_q,
            mixup: self.mixup,
            mixup_alpha: self.mixup_alpha,
            disc_features: self.disc_features,
            disc_conditional: self.disc_conditional,
            ema_decay: self.ema_decay,
            seed,
        }
    }

    pub fn final_head(&self, seed: u64) -> FinalConfig {
        FinalConfig {
            epochs: self.final_epochs,
            batch_size: self.batch_size,
            lr: self.final_lr,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.jobs == 0 {
            return Err(Error::config("jobs", "must be at least 1"));
        }
        if self.corpus.is_none() {
            self.synth().validate()?;
        }
        self.baseline(0).validate()?;
        self.gan(0).validate()?;
        self.final_head(0).validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_env() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::parse("", no_env()).unwrap(), RunConfig::default());
    }

    #[test]
    fn negative_lambda_names_the_field() {
        match RunConfig::parse("lambda = -0.5", no_env()) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lambda"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_rejected() {
        match RunConfig::parse("lamda = 1.0", no_env()) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "lamda"),
            other => panic!("{other:?}"),
        }
        let env = vec![("MIAUG_NOPE".to_string(), "1".to_string())];
        assert!(RunConfig::parse("", env).is_err());
    }

    #[test]
    fn wrong_types_are_rejected() {
        assert!(RunConfig::parse("seed = \"x\"", no_env()).is_err());
        assert!(RunConfig::parse("mode = \"video\"", no_env()).is_err());
    }

    #[test]
    fn environment_overrides_file() {
        let env = vec![
            ("MIAUG_LAMBDA".to_string(), "0.25".to_string()),
            ("MIAUG_MODE".to_string(), "fusion".to_string()),
            ("MIAUG_SYNTH_CLASS_COUNTS".to_string(), "[3, 4, 5, 6]".to_string()),
            ("OTHER_LAMBDA".to_string(), "9".to_string()),
        ];
        let cfg = RunConfig::parse("lambda = 2.0\nseed = 7", env).unwrap();
        assert_eq!(cfg.lambda, 0.25);
        assert_eq!(cfg.mode, Mode::Fusion);
        assert_eq!(cfg.synth_class_counts, vec![3, 4, 5, 6]);
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn toml_round_trip() {
        let cfg = RunConfig {
            lambda: 0.1 + 0.2,
            corpus: Some("data/x.csv".into()),
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::parse(&cfg.to_toml(), no_env()).unwrap(), cfg);
    }
}
