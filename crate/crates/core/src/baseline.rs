//! Stage 1: the emotion head `softmax(W_y h + b_y)` and the text projector
//! `t̂ = W_t h + b_t`, trained jointly on cross-entropy, text→audio
//! contrastive alignment and InfoNCE between `t` and `t̂`.
//!
//! Features are read from files, so the audio/text alignment term has no
//! trainable parameter here: it is evaluated and logged, and its gradient
//! would only reach a feature extractor. It needs `d_a = d_t` and is skipped
//! otherwise.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::{audio_matrix, Corpus, FeatureRecord};
use crate::error::{Error, Result};
use crate::eval::{uar_from_predictions, UarReport};
use crate::losses::{contrastive_alignment, cross_entropy, infonce, non_negative, positive_finite};
use crate::numkit::{argmax, softmax_rows, AdamConfig, LayerAdam, LinearGrads, LinearLayer, Matrix};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub tau: f64,
    pub w_ser: f64,
    pub w_cl: f64,
    pub w_mi: f64,
    /// Average in the audio→text direction of the alignment loss.
    pub symmetric_cl: bool,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            tau: 0.07,
            w_ser: 1.0,
            w_cl: 1.0,
            w_mi: 1.0,
            symmetric_cl: false,
            seed: 0,
        }
    }
}

impl BaselineConfig {
    fn contrastive_active(&self) -> bool {
        self.w_cl > 0.0 || self.w_mi > 0.0
    }

    pub fn validate(&self) -> Result<()> {
        non_negative("w_ser", self.w_ser)?;
        non_negative("w_cl", self.w_cl)?;
        non_negative("w_mi", self.w_mi)?;
        positive_finite("baseline_lr", self.lr)?;
        positive_finite("tau", self.tau)?;
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.batch_size < 2 && self.contrastive_active() {
            return Err(Error::config(
                "batch_size",
                "contrastive terms need batches of at least 2",
            ));
        }
        Ok(())
    }
}

/// Per-epoch means of the stage-1 loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineEpoch {
    pub total: f64,
    pub ser: f64,
    pub cl: f64,
    pub mi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineModel {
    pub classifier: LinearLayer,
    pub projector: LinearLayer,
    pub config: BaselineConfig,
    pub trace: Vec<BaselineEpoch>,
}

/// Value and parameter gradients of the stage-1 objective on one batch.
#[derive(Clone, Debug)]
pub struct Stage1Loss {
    pub terms: BaselineEpoch,
    pub classifier: LinearGrads,
    pub projector: LinearGrads,
}

/// `w_ser·L_SER + w_cl·L_CL + w_mi·L_MI` on a batch.
pub fn stage1_objective(
    classifier: &LinearLayer,
    projector: &LinearLayer,
    audio: &Matrix,
    text: &Matrix,
    labels: &[usize],
    cfg: &BaselineConfig,
) -> Result<Stage1Loss> {
    let logits = classifier.forward(audio)?;
    let ce = cross_entropy(&logits, labels)?;
    let head_grads = classifier.backward(audio, &ce.grads[0].scale(cfg.w_ser))?;

    let cl = if cfg.w_cl > 0.0 && audio.cols() == text.cols() && text.cols() > 0 {
        contrastive_alignment(text, audio, cfg.tau, cfg.symmetric_cl)?.value
    } else {
        0.0
    };

    let (mi, proj_grads) = if cfg.w_mi > 0.0 && text.cols() > 0 {
        let predicted = projector.forward(audio)?;
        let nce = infonce(text, &predicted, cfg.tau)?;
        let grads = projector.backward(audio, &nce.loss.grads[1].scale(cfg.w_mi))?;
        (nce.loss.value, grads)
    } else {
        let zeros = Matrix::zeros(audio.rows(), projector.out_dim());
        (0.0, projector.backward(audio, &zeros)?)
    };

    Ok(Stage1Loss {
        terms: BaselineEpoch {
            total: cfg.w_ser * ce.value + cfg.w_cl * cl + cfg.w_mi * mi,
            ser: ce.value,
            cl,
            mi,
        },
        classifier: head_grads,
        projector: proj_grads,
    })
}

/// Mini-batch index plan for one epoch. Batches smaller than `min_batch` are dropped.
pub(crate) fn batches(n: usize, batch_size: usize, min_batch: usize, rng: &mut rng::Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .filter(|c| c.len() >= min_batch)
        .map(<[usize]>::to_vec)
        .collect()
}

impl BaselineModel {
    /// Freshly initialised head and projector: weights `N(0, 1/in)`, zero biases.
    pub fn init(audio_dim: usize, text_dim: usize, num_classes: usize, cfg: BaselineConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "baseline-init", 0);
        Self {
            classifier: LinearLayer::gaussian(audio_dim, num_classes, &mut r),
            projector: LinearLayer::gaussian(audio_dim, text_dim, &mut r),
            config: cfg,
            trace: Vec::new(),
        }
    }

    pub fn audio_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn text_dim(&self) -> usize {
        self.projector.out_dim()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_layer(b"HEAD", &self.classifier);
        ck.push_layer(b"PROJ", &self.projector);
        ck.push_json(b"CONF", &self.config)?;
        ck.push_json(b"TRAC", &self.trace)?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let classifier = ck.layer(b"HEAD")?;
        let projector = ck.layer(b"PROJ")?;
        if classifier.in_dim() != projector.in_dim() {
            return Err(Error::Format {
                offset: 0,
                message: "head and projector disagree on the audio dimension".into(),
            });
        }
        Ok(Self {
            classifier,
            projector,
            config: ck.json(b"CONF")?,
            trace: ck.json(b"TRAC")?,
        })
    }
}

pub fn train_baseline(corpus: &Corpus, cfg: &BaselineConfig) -> Result<BaselineModel> {
    cfg.validate()?;
    let mut model = BaselineModel::init(
        corpus.audio_dim(),
        corpus.text_dim(),
        corpus.num_classes(),
        cfg.clone(),
    );
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut head_opt = LayerAdam::new(&model.classifier, adam);
    let mut proj_opt = LayerAdam::new(&model.projector, adam);
    let min_batch = if cfg.contrastive_active() { 2 } else { 1 };
    let mut shuffle = rng::stream(cfg.seed, "baseline-batches", 0);
    let audio = corpus.audio_matrix();
    let text = corpus.text_matrix();
    let labels = corpus.labels();

    for epoch in 0..cfg.epochs {
        let plan = batches(corpus.len(), cfg.batch_size, min_batch, &mut shuffle);
        if plan.is_empty() {
            return Err(Error::InvalidInput(format!(
                "{} records cannot fill a batch of at least {min_batch}",
                corpus.len()
            )));
        }
        let mut sum = BaselineEpoch {
            total: 0.0,
            ser: 0.0,
            cl: 0.0,
            mi: 0.0,
        };
        for idx in &plan {
            let h = audio.select_rows(idx);
            let t = text.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let step = stage1_objective(&model.classifier, &model.projector, &h, &t, &y, cfg)?;
            if !step.terms.total.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "stage-1 loss",
                });
            }
            head_opt.step(&mut model.classifier, &step.classifier)?;
            proj_opt.step(&mut model.projector, &step.projector)?;
            sum.total += step.terms.total;
            sum.ser += step.terms.ser;
            sum.cl += step.terms.cl;
            sum.mi += step.terms.mi;
        }
        let n = plan.len() as f64;
        model.trace.push(BaselineEpoch {
            total: sum.total / n,
            ser: sum.ser / n,
            cl: sum.cl / n,
            mi: sum.mi / n,
        });
    }
    Ok(model)
}

/// Class probabilities and arg-max labels (ties to the lower class index).
pub fn predict(model: &BaselineModel, audio: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    predict_with(&model.classifier, audio)
}

pub(crate) fn predict_with(head: &LinearLayer, features: &Matrix) -> Result<(Matrix, Vec<usize>)> {
    let probs = softmax_rows(&head.forward(features)?);
    let labels = probs.row_iter().map(argmax).collect();
    Ok((probs, labels))
}

pub fn evaluate_uar(model: &BaselineModel, records: &[FeatureRecord]) -> Result<UarReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("UAR of an empty record set".into()));
    }
    let (_, predicted) = predict(model, &audio_matrix(records))?;
    let truth: Vec<usize> = records.iter().map(|r| r.label).collect();
    uar_from_predictions(&truth, &predicted, model.num_classes())
}
