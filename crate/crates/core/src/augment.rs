//! Stage 3: augmented training sets built from a trained generator, and the
//! final classifier trained on them with every earlier module frozen.

use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::{batches, predict_with};
use crate::checkpoint::Checkpoint;
use crate::corpus::io::{csv_header, read_corpus_body, Reader};
use crate::corpus::{corpus_to_bytes, Corpus, FeatureRecord};
use crate::error::{Error, Result};
use crate::eval::{uar_from_predictions, UarReport};
use crate::infogan::{generate, sample_noise, GanBundle};
use crate::losses::{cross_entropy, positive_finite};
use crate::numkit::{AdamConfig, LayerAdam, LinearLayer, Matrix};
use crate::rng;

/// Speaker id given to samples generated from a label alone.
pub const GENERATED_SPEAKER: &str = "generated";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Generated,
}

impl Origin {
    fn as_str(self) -> &'static str {
        match self {
            Origin::Real => "real",
            Origin::Generated => "generated",
        }
    }

    fn code(origin: Option<Origin>) -> u8 {
        match origin {
            Some(Origin::Real) => 0,
            Some(Origin::Generated) => 1,
            None => 2,
        }
    }

    fn from_code(code: u8) -> Option<Option<Origin>> {
        match code {
            0 => Some(Some(Origin::Real)),
            1 => Some(Some(Origin::Generated)),
            2 => Some(None),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentedItem {
    pub audio: Vec<f64>,
    pub text: Option<Vec<f64>>,
    pub label: usize,
    pub speaker: String,
    pub origin_audio: Origin,
    /// `None` when the item carries no text feature.
    pub origin_text: Option<Origin>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSet {
    pub audio_dim: usize,
    pub text_dim: usize,
    pub num_classes: usize,
    pub items: Vec<AugmentedItem>,
}

impl AugmentedSet {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for it in &self.items {
            counts[it.label] += 1;
        }
        counts
    }

    pub fn generated_count(&self) -> usize {
        self.items
            .iter()
            .filter(|it| it.origin_audio == Origin::Generated)
            .count()
    }

    /// Items whose audio and text (if any) are both real.
    pub fn real_slice(&self) -> Vec<&AugmentedItem> {
        self.items
            .iter()
            .filter(|it| it.origin_audio == Origin::Real && it.origin_text != Some(Origin::Generated))
            .collect()
    }

    /// Real-only set in the same shape as [`augment_ser`] output, for control runs.
    pub fn from_corpus(corpus: &Corpus, with_text: bool) -> Self {
        Self {
            audio_dim: corpus.audio_dim(),
            text_dim: corpus.text_dim(),
            num_classes: corpus.num_classes(),
            items: corpus
                .records()
                .iter()
                .map(|r| real_item(r, with_text))
                .collect(),
        }
    }

    fn to_corpus(&self, provenance: &str) -> Result<Corpus> {
        let records = self
            .items
            .iter()
            .map(|it| FeatureRecord {
                audio: it.audio.clone(),
                text: it.text.clone().unwrap_or_else(|| vec![0.0; self.text_dim]),
                label: it.label,
                speaker: it.speaker.clone(),
            })
            .collect();
        Corpus::new(
            self.audio_dim,
            self.text_dim,
            self.num_classes,
            records,
            provenance,
        )
    }

    /// Corpus binary layout followed by an origin section:
    /// `"ORIG", u64 count, count x (u8 audio origin, u8 text origin)` with
    /// codes 0 real, 1 generated, 2 absent.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = corpus_to_bytes(&self.to_corpus("augmented")?);
        out.extend_from_slice(b"ORIG");
        out.extend_from_slice(&(self.items.len() as u64).to_le_bytes());
        for it in &self.items {
            out.push(Origin::code(Some(it.origin_audio)));
            out.push(Origin::code(it.origin_text));
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let corpus = read_corpus_body(&mut r)?;
        if r.take(4, "origin tag")? != b"ORIG" {
            return r.fail("expected ORIG section");
        }
        let count = r.u64("origin count")? as usize;
        if count != corpus.len() {
            return r.fail(format!(
                "origin section has {count} entries for {} records",
                corpus.len()
            ));
        }
        let mut items = Vec::with_capacity(count);
        for rec in corpus.records() {
            let codes = r.take(2, "origin codes")?;
            let (Some(Some(origin_audio)), Some(origin_text)) =
                (Origin::from_code(codes[0]), Origin::from_code(codes[1]))
            else {
                return r.fail(format!("bad origin codes {codes:?}"));
            };
            items.push(AugmentedItem {
                audio: rec.audio.clone(),
                text: origin_text.map(|_| rec.text.clone()),
                label: rec.label,
                speaker: rec.speaker.clone(),
                origin_audio,
                origin_text,
            });
        }
        if r.remaining() != 0 {
            return r.fail("trailing bytes after origin section");
        }
        Ok(Self {
            audio_dim: corpus.audio_dim(),
            text_dim: corpus.text_dim(),
            num_classes: corpus.num_classes(),
            items,
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// Corpus CSV columns plus `origin_audio,origin_text`; text cells are
    /// empty and `origin_text` is `none` when an item has no text.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        let mut header = csv_header(self.audio_dim, self.text_dim);
        header.push("origin_audio".into());
        header.push("origin_text".into());
        w.write_record(&header)?;
        for it in &self.items {
            let mut row = vec![it.speaker.clone(), it.label.to_string()];
            row.extend(it.audio.iter().map(|v| v.to_string()));
            match &it.text {
                Some(t) => row.extend(t.iter().map(|v| v.to_string())),
                None => row.extend(std::iter::repeat_n(String::new(), self.text_dim)),
            }
            row.push(it.origin_audio.as_str().into());
            row.push(it.origin_text.map_or("none", Origin::as_str).into());
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn real_item(r: &FeatureRecord, with_text: bool) -> AugmentedItem {
    AugmentedItem {
        audio: r.audio.clone(),
        text: with_text.then(|| r.text.clone()),
        label: r.label,
        speaker: r.speaker.clone(),
        origin_audio: Origin::Real,
        origin_text: with_text.then_some(Origin::Real),
    }
}

fn check_dims(corpus: &Corpus, bundle: &GanBundle) -> Result<()> {
    if corpus.audio_dim() != bundle.audio_dim()
        || corpus.text_dim() != bundle.text_dim()
        || corpus.num_classes() != bundle.num_classes()
    {
        return Err(Error::shape(
            "augment",
            format!(
                "a={} t={} K={}",
                bundle.audio_dim(),
                bundle.text_dim(),
                bundle.num_classes()
            ),
            format!(
                "a={} t={} K={}",
                corpus.audio_dim(),
                corpus.text_dim(),
                corpus.num_classes()
            ),
        ));
    }
    Ok(())
}

/// One `ĥ` per record, conditioned on that record's label and text.
fn generate_for(corpus: &Corpus, bundle: &GanBundle, rng: &mut rng::Rng) -> Result<Matrix> {
    let z = sample_noise(corpus.len(), bundle.noise_dim, rng);
    generate(bundle, &z, &corpus.labels(), &corpus.text_matrix())
}

/// `2N` audio-only items: every real record plus one generated feature
/// conditioned on it.
pub fn augment_ser(train: &Corpus, bundle: &GanBundle, rng: &mut rng::Rng) -> Result<AugmentedSet> {
    check_dims(train, bundle)?;
    let hhat = generate_for(train, bundle, rng)?;
    let mut items = Vec::with_capacity(2 * train.len());
    for (r, h) in train.records().iter().zip(hhat.row_iter()) {
        items.push(real_item(r, false));
        items.push(AugmentedItem {
            audio: h.to_vec(),
            text: None,
            label: r.label,
            speaker: r.speaker.clone(),
            origin_audio: Origin::Generated,
            origin_text: None,
        });
    }
    Ok(AugmentedSet {
        audio_dim: train.audio_dim(),
        text_dim: train.text_dim(),
        num_classes: train.num_classes(),
        items,
    })
}

/// `4N` items: `(h,t), (h,t′), (ĥ,t), (ĥ,t′)` per record, with `t′` the
/// text projector applied to `ĥ`.
pub fn augment_multimodal(train: &Corpus, bundle: &GanBundle, rng: &mut rng::Rng) -> Result<AugmentedSet> {
    check_dims(train, bundle)?;
    let hhat = generate_for(train, bundle, rng)?;
    let tprime = bundle.q.projector.forward(&hhat)?;
    let mut items = Vec::with_capacity(4 * train.len());
    for (i, r) in train.records().iter().enumerate() {
        for (audio, origin_audio) in [(&r.audio[..], Origin::Real), (hhat.row(i), Origin::Generated)] {
            for (text, origin_text) in [(&r.text[..], Origin::Real), (tprime.row(i), Origin::Generated)] {
                items.push(AugmentedItem {
                    audio: audio.to_vec(),
                    text: Some(text.to_vec()),
                    label: r.label,
                    speaker: r.speaker.clone(),
                    origin_audio,
                    origin_text: Some(origin_text),
                });
            }
        }
    }
    Ok(AugmentedSet {
        audio_dim: train.audio_dim(),
        text_dim: train.text_dim(),
        num_classes: train.num_classes(),
        items,
    })
}

/// Per-class diagonal Gaussian over text features, used to fill the text
/// slot when generating from a label alone.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPrior {
    pub means: Matrix,
    pub stds: Matrix,
}

impl TextPrior {
    /// All-zero prior: every draw is the zero vector.
    pub fn zeros(num_classes: usize, text_dim: usize) -> Self {
        Self {
            means: Matrix::zeros(num_classes, text_dim),
            stds: Matrix::zeros(num_classes, text_dim),
        }
    }

    /// Sample mean and std per class; classes without records fall back to zeros.
    pub fn fit(corpus: &Corpus) -> Self {
        let (k, d) = (corpus.num_classes(), corpus.text_dim());
        let mut prior = Self::zeros(k, d);
        for c in 0..k {
            let rows: Vec<&[f64]> = corpus
                .records()
                .iter()
                .filter(|r| r.label == c)
                .map(|r| r.text.as_slice())
                .collect();
            if rows.is_empty() {
                continue;
            }
            let n = rows.len() as f64;
            for j in 0..d {
                let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
                let var = if rows.len() > 1 {
                    rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
                } else {
                    0.0
                };
                prior.means.set(c, j, mean);
                prior.stds.set(c, j, var.sqrt());
            }
        }
        prior
    }

    pub fn sample<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> Result<Vec<f64>> {
        if class >= self.means.rows() {
            return Err(Error::LabelOutOfRange {
                label: class,
                classes: self.means.rows(),
            });
        }
        Ok(self
            .means
            .row(class)
            .iter()
            .zip(self.stds.row(class))
            .map(|(&m, &s)| m + s * rng.sample::<f64, _>(StandardNormal))
            .collect())
    }
}

/// All real records plus enough label-conditioned samples to bring every
/// class up to the largest class count.
pub fn balance_classes(
    train: &Corpus,
    bundle: &GanBundle,
    prior: &TextPrior,
    rng: &mut rng::Rng,
) -> Result<AugmentedSet> {
    check_dims(train, bundle)?;
    balance_set(AugmentedSet::from_corpus(train, true), bundle, prior, rng)
}

/// Appends label-conditioned samples to `set` until its class histogram is uniform.
pub fn balance_set(
    mut set: AugmentedSet,
    bundle: &GanBundle,
    prior: &TextPrior,
    rng: &mut rng::Rng,
) -> Result<AugmentedSet> {
    if set.audio_dim != bundle.audio_dim()
        || set.text_dim != bundle.text_dim()
        || set.num_classes != bundle.num_classes()
    {
        return Err(Error::shape(
            "balance_classes",
            format!("a={} t={} K={}", bundle.audio_dim(), bundle.text_dim(), bundle.num_classes()),
            format!("a={} t={} K={}", set.audio_dim, set.text_dim, set.num_classes),
        ));
    }
    if prior.means.rows() != set.num_classes || prior.means.cols() != set.text_dim {
        return Err(Error::shape(
            "balance_classes",
            format!("text prior {}x{}", set.num_classes, set.text_dim),
            format!("{}x{}", prior.means.rows(), prior.means.cols()),
        ));
    }
    let counts = set.histogram();
    let target = counts.iter().copied().max().unwrap_or(0);
    let labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, target - n))
        .collect();
    if labels.is_empty() {
        return Ok(set);
    }
    let text_rows = labels
        .iter()
        .map(|&c| prior.sample(c, rng))
        .collect::<Result<Vec<_>>>()?;
    let text = if set.text_dim == 0 {
        Matrix::zeros(labels.len(), 0)
    } else {
        let refs: Vec<&[f64]> = text_rows.iter().map(Vec::as_slice).collect();
        Matrix::from_rows(&refs)?
    };
    let z = sample_noise(labels.len(), bundle.noise_dim, rng);
    let hhat = generate(bundle, &z, &labels, &text)?;
    for ((h, t), &c) in hhat.row_iter().zip(text_rows).zip(&labels) {
        set.items.push(AugmentedItem {
            audio: h.to_vec(),
            text: Some(t),
            label: c,
            speaker: GENERATED_SPEAKER.into(),
            origin_audio: Origin::Generated,
            origin_text: Some(Origin::Generated),
        });
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Audio,
    /// One linear layer over `[h; t]`.
    Fusion,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" => Ok(Self::Audio),
            "fusion" => Ok(Self::Fusion),
            other => Err(Error::config(
                "mode",
                format!("expected audio or fusion, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinalConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

impl FinalConfig {
    pub fn validate(&self) -> Result<()> {
        positive_finite("final_lr", self.lr)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinalClassifier {
    pub head: LinearLayer,
    pub mode: Mode,
    pub trace: Vec<f64>,
}

fn features<'a>(
    items: impl ExactSizeIterator<Item = (&'a [f64], Option<&'a [f64]>)>,
    mode: Mode,
) -> Result<Matrix> {
    let rows = items
        .enumerate()
        .map(|(i, (audio, text))| match mode {
            Mode::Audio => Ok(audio.to_vec()),
            Mode::Fusion => {
                let text = text.ok_or_else(|| {
                    Error::InvalidInput(format!("fusion mode needs text, item {i} has none"))
                })?;
                Ok(audio.iter().chain(text).copied().collect())
            }
        })
        .collect::<Result<Vec<Vec<f64>>>>()?;
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    Matrix::from_rows(&refs)
}

fn set_features(set: &AugmentedSet, mode: Mode) -> Result<Matrix> {
    if set.is_empty() {
        return Err(Error::InvalidInput("empty augmented set".into()));
    }
    features(
        set.items.iter().map(|it| (it.audio.as_slice(), it.text.as_deref())),
        mode,
    )
}

impl FinalClassifier {
    pub fn input_dim(audio_dim: usize, text_dim: usize, mode: Mode) -> usize {
        match mode {
            Mode::Audio => audio_dim,
            Mode::Fusion => audio_dim + text_dim,
        }
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_layer(b"HEAD", &self.head);
        ck.push_json(b"MODE", &self.mode)?;
        ck.push_json(b"TRAC", &self.trace)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        Ok(Self {
            head: ck.layer(b"HEAD")?,
            mode: ck.json(b"MODE")?,
            trace: ck.json(b"TRAC")?,
        })
    }

    pub fn predict(&self, records: &[FeatureRecord]) -> Result<Vec<usize>> {
        let x = features(
            records.iter().map(|r| (r.audio.as_slice(), Some(r.text.as_slice()))),
            self.mode,
        )?;
        Ok(predict_with(&self.head, &x)?.1)
    }

    pub fn evaluate(&self, records: &[FeatureRecord]) -> Result<UarReport> {
        if records.is_empty() {
            return Err(Error::InvalidInput("UAR of an empty record set".into()));
        }
        let truth: Vec<usize> = records.iter().map(|r| r.label).collect();
        uar_from_predictions(&truth, &self.predict(records)?, self.head.out_dim())
    }
}

/// Trains a fresh head by Adam on cross-entropy over a fixed augmented set.
pub fn train_final_classifier(aug: &AugmentedSet, mode: Mode, cfg: &FinalConfig) -> Result<FinalClassifier> {
    fit_head(aug, None, mode, cfg)
}

/// As [`train_final_classifier`], but epochs after the first train on
/// `resample(epoch)`, which lets callers regenerate features every epoch.
pub fn train_final_classifier_resampled(
    first: &AugmentedSet,
    mut resample: impl FnMut(usize) -> Result<AugmentedSet>,
    mode: Mode,
    cfg: &FinalConfig,
) -> Result<FinalClassifier> {
    fit_head(first, Some(&mut resample), mode, cfg)
}

type Resampler<'a> = &'a mut dyn FnMut(usize) -> Result<AugmentedSet>;

fn fit_head(
    first: &AugmentedSet,
    mut resample: Option<Resampler<'_>>,
    mode: Mode,
    cfg: &FinalConfig,
) -> Result<FinalClassifier> {
    cfg.validate()?;
    let dim = FinalClassifier::input_dim(first.audio_dim, first.text_dim, mode);
    let mut head = LinearLayer::gaussian(dim, first.num_classes, &mut rng::stream(cfg.seed, "final-init", 0));
    let mut opt = LayerAdam::new(&head, AdamConfig::with_lr(cfg.lr));
    let mut shuffle = rng::stream(cfg.seed, "final-batches", 0);
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut x = set_features(first, mode)?;
    let mut labels: Vec<usize> = first.items.iter().map(|it| it.label).collect();

    for epoch in 0..cfg.epochs {
        if let (Some(f), true) = (resample.as_mut(), epoch > 0) {
            let set = f(epoch)?;
            x = set_features(&set, mode)?;
            labels = set.items.iter().map(|it| it.label).collect();
        }
        let plan = batches(labels.len(), cfg.batch_size, 1, &mut shuffle);
        let mut sum = 0.0;
        for idx in &plan {
            let xb = x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let ce = cross_entropy(&head.forward(&xb)?, &yb)?;
            if !ce.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "final classifier loss",
                });
            }
            let grads = head.backward(&xb, &ce.grads[0])?;
            opt.step(&mut head, &grads)?;
            sum += ce.value;
        }
        trace.push(sum / plan.len().max(1) as f64);
    }
    Ok(FinalClassifier { head, mode, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{train_baseline, BaselineConfig, BaselineModel};
    use crate::corpus::{synth_corpus, SynthConfig};
    use crate::infogan::{GanConfig, GanBundle};

    fn corpus(counts: Vec<usize>) -> Corpus {
        synth_corpus(&SynthConfig {
            num_classes: counts.len(),
            audio_dim: 6,
            text_dim: 5,
            num_speakers: 3,
            class_counts: counts,
            separation: 6.0,
            ..SynthConfig::default()
        })
        .unwrap()
        .0
    }

    fn untrained_bundle(c: &Corpus) -> GanBundle {
        let baseline = BaselineModel::init(
            c.audio_dim(),
            c.text_dim(),
            c.num_classes(),
            BaselineConfig::default(),
        );
        GanBundle::init(&baseline, &GanConfig::default())
    }

    #[test]
    fn ser_doubles_every_class() {
        let c = corpus(vec![20, 10, 15, 5]);
        let aug = augment_ser(&c, &untrained_bundle(&c), &mut rng::from_seed(1)).unwrap();
        assert_eq!(aug.len(), 100);
        assert_eq!(aug.generated_count(), 50);
        assert_eq!(aug.histogram(), vec![40, 20, 30, 10]);
        for pair in aug.items.chunks(2) {
            assert_eq!(pair[0].label, pair[1].label);
        }
    }

    #[test]
    fn multimodal_emits_all_four_combinations() {
        let c = corpus(vec![7, 6, 6, 6]);
        let aug = augment_multimodal(&c, &untrained_bundle(&c), &mut rng::from_seed(2)).unwrap();
        assert_eq!(aug.len(), 100);
        let mut tags = std::collections::BTreeMap::new();
        for it in &aug.items {
            *tags.entry((it.origin_audio, it.origin_text.unwrap())).or_insert(0) += 1;
        }
        assert_eq!(tags.len(), 4);
        assert!(tags.values().all(|&n| n == 25));
        let real = aug.real_slice();
        assert_eq!(real.len(), c.len());
        for (it, r) in real.iter().zip(c.records()) {
            assert_eq!(it.audio, r.audio);
            assert_eq!(it.text.as_deref(), Some(r.text.as_slice()));
            assert_eq!(it.label, r.label);
        }
    }

    #[test]
    fn balancing_fills_to_the_largest_class() {
        let c = corpus(vec![100, 40, 40, 20]);
        let bundle = untrained_bundle(&c);
        let aug = balance_classes(&c, &bundle, &TextPrior::fit(&c), &mut rng::from_seed(3)).unwrap();
        assert_eq!(aug.histogram(), vec![100; 4]);
        let mut generated = [0; 4];
        for it in aug.items.iter().filter(|it| it.origin_audio == Origin::Generated) {
            generated[it.label] += 1;
        }
        assert_eq!(generated, [0, 60, 60, 80]);

        let balanced = corpus(vec![10; 4]);
        let aug = balance_classes(&balanced, &bundle, &TextPrior::zeros(4, 5), &mut rng::from_seed(3)).unwrap();
        assert_eq!(aug.generated_count(), 0);
    }

    #[test]
    fn text_prior_rejects_unknown_class() {
        let prior = TextPrior::zeros(3, 2);
        assert_eq!(prior.sample(1, &mut rng::from_seed(0)).unwrap(), vec![0.0, 0.0]);
        assert!(matches!(
            prior.sample(3, &mut rng::from_seed(0)),
            Err(Error::LabelOutOfRange { label: 3, classes: 3 })
        ));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let c = corpus(vec![5; 4]);
        let other = corpus(vec![5; 3]);
        let bundle = untrained_bundle(&other);
        assert!(augment_ser(&c, &bundle, &mut rng::from_seed(0)).is_err());
        assert!(augment_multimodal(&c, &bundle, &mut rng::from_seed(0)).is_err());
    }

    #[test]
    fn fusion_requires_text() {
        let c = corpus(vec![5; 4]);
        let aug = augment_ser(&c, &untrained_bundle(&c), &mut rng::from_seed(0)).unwrap();
        assert!(train_final_classifier(&aug, Mode::Fusion, &FinalConfig::default()).is_err());
        assert!(train_final_classifier(&aug, Mode::Audio, &FinalConfig { epochs: 2, ..FinalConfig::default() }).is_ok());
    }

    #[test]
    fn real_slice_training_matches_retrain() {
        let c = corpus(vec![10; 4]);
        let bundle = untrained_bundle(&c);
        let aug = augment_multimodal(&c, &bundle, &mut rng::from_seed(4)).unwrap();
        let slice = AugmentedSet {
            items: aug.real_slice().into_iter().cloned().collect(),
            ..aug.clone()
        };
        let cfg = FinalConfig { epochs: 30, ..FinalConfig::default() };
        let a = train_final_classifier(&slice, Mode::Fusion, &cfg).unwrap();
        let b = train_final_classifier(&AugmentedSet::from_corpus(&c, true), Mode::Fusion, &cfg).unwrap();
        let ua = a.evaluate(c.records()).unwrap().uar;
        let ub = b.evaluate(c.records()).unwrap().uar;
        assert!((ua - ub).abs() <= 0.005);
    }

    #[test]
    fn final_training_leaves_earlier_modules_untouched() {
        let c = corpus(vec![12; 4]);
        let baseline = train_baseline(&c, &BaselineConfig { epochs: 5, ..BaselineConfig::default() }).unwrap();
        let bundle = GanBundle::init(&baseline, &GanConfig::default());
        let before = (
            baseline.to_checkpoint().unwrap().to_bytes(),
            bundle.to_checkpoint().unwrap().to_bytes(),
        );
        let aug = augment_ser(&c, &bundle, &mut rng::from_seed(5)).unwrap();
        let head = train_final_classifier(&aug, Mode::Audio, &FinalConfig { epochs: 5, ..FinalConfig::default() }).unwrap();
        assert_eq!(head.trace.len(), 5);
        let ck = Checkpoint::from_bytes(&head.to_checkpoint().unwrap().to_bytes()).unwrap();
        assert_eq!(FinalClassifier::from_checkpoint(&ck).unwrap(), head);
        assert_eq!(before.0, baseline.to_checkpoint().unwrap().to_bytes());
        assert_eq!(before.1, bundle.to_checkpoint().unwrap().to_bytes());
    }

    #[test]
    fn binary_and_csv_export() {
        let c = corpus(vec![4; 4]);
        let bundle = untrained_bundle(&c);
        for aug in [
            augment_ser(&c, &bundle, &mut rng::from_seed(6)).unwrap(),
            augment_multimodal(&c, &bundle, &mut rng::from_seed(6)).unwrap(),
        ] {
            let bytes = aug.to_bytes().unwrap();
            assert_eq!(AugmentedSet::from_bytes(&bytes).unwrap(), aug);
            assert!(AugmentedSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("aug.csv");
        let aug = augment_ser(&c, &bundle, &mut rng::from_seed(6)).unwrap();
        aug.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().next().unwrap().ends_with("origin_audio,origin_text"));
        assert_eq!(text.lines().count(), 1 + aug.len());
        assert!(text.lines().nth(2).unwrap().ends_with("generated,none"));
    }
}
