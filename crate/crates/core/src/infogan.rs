//! Stage 2: adversarial training of a linear generator `ĥ = G(z, c, t)` and
//! a linear discriminator, with the generator regularised by mutual
//! information between `ĥ` and its conditioning.
//!
//! The information terms reuse the stage-1 layers as variational heads: the
//! emotion head scores `ĥ` against `c` with cross-entropy, and the text
//! projector maps `ĥ` into text space where InfoNCE pairs it with `t`. The
//! heads are frozen unless `freeze_q` is off.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baseline::{batches, BaselineModel};
use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::losses::{
    bce_with_logits, cross_entropy, gan_d_loss, gan_g_loss, infonce, non_negative,
    positive_finite, sample_mix_weight,
};
use crate::numkit::{argmax, AdamConfig, LayerAdam, LinearGrads, LinearLayer, Matrix};
use crate::rng;

/// Input map of the discriminator before its linear layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorFeatures {
    /// `D(h) = w·h + b`.
    #[default]
    Linear,
    /// `D(h) = w·[h; h⊙h] + b`, still one linear layer, over a fixed
    /// quadratic lift. A linear logit only separates means; the lift lets the
    /// discriminator see per-dimension variance, and it contains the exact
    /// optimum for any pair of axis-aligned Gaussians.
    Quadratic,
}

impl std::str::FromStr for DiscriminatorFeatures {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(Self::Linear),
            "quadratic" => Ok(Self::Quadratic),
            other => Err(Error::config(
                "disc_features",
                format!("expected linear or quadratic, got `{other}`"),
            )),
        }
    }
}

/// One linear layer producing a single logit from a fixed lift `φ(h)` of the
/// feature, optionally conditioned on the class.
///
/// Conditioned on `K` classes, the layer sees `[φ(h); onehot(c) ⊗ φ(h); onehot(c)]`,
/// which gives every class its own linear score on top of a shared one.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    map: LinearLayer,
    features: DiscriminatorFeatures,
    classes: usize,
}

fn lift_width(audio_dim: usize, features: DiscriminatorFeatures) -> usize {
    match features {
        DiscriminatorFeatures::Linear => audio_dim,
        DiscriminatorFeatures::Quadratic => 2 * audio_dim,
    }
}

impl Discriminator {
    /// Unconditional discriminator over `map`.
    pub fn new(map: LinearLayer, features: DiscriminatorFeatures) -> Self {
        Self {
            map,
            features,
            classes: 0,
        }
    }

    /// Discriminator conditioned on `classes` labels (0 means unconditional).
    pub fn conditional(map: LinearLayer, features: DiscriminatorFeatures, classes: usize) -> Result<Self> {
        let d = Self {
            map,
            features,
            classes,
        };
        let width = lift_width(d.input_dim(), features) * (1 + classes) + classes;
        if d.map.out_dim() != 1 || width != d.map.in_dim() {
            return Err(Error::shape(
                "Discriminator::conditional",
                format!("input width consistent with {classes} classes"),
                d.map.in_dim(),
            ));
        }
        Ok(d)
    }

    pub fn init<R: Rng + ?Sized>(
        audio_dim: usize,
        features: DiscriminatorFeatures,
        classes: usize,
        rng: &mut R,
    ) -> Self {
        let phi = lift_width(audio_dim, features);
        let width = phi * (1 + classes) + classes;
        Self {
            map: LinearLayer::gaussian(width, 1, rng),
            features,
            classes,
        }
    }

    pub fn map(&self) -> &LinearLayer {
        &self.map
    }

    pub fn features(&self) -> DiscriminatorFeatures {
        self.features
    }

    /// Number of conditioning classes; 0 when unconditional.
    pub fn classes(&self) -> usize {
        self.classes
    }

    fn lift_dim(&self) -> usize {
        (self.map.in_dim() - self.classes.min(self.map.in_dim())) / (1 + self.classes)
    }

    pub fn input_dim(&self) -> usize {
        match self.features {
            DiscriminatorFeatures::Linear => self.lift_dim(),
            DiscriminatorFeatures::Quadratic => self.lift_dim() / 2,
        }
    }

    fn lift(&self, h: &Matrix, labels: Option<&[usize]>) -> Result<Matrix> {
        if h.cols() != self.input_dim() {
            return Err(Error::shape(
                "discriminator",
                format!("{} feature columns", self.input_dim()),
                h.cols(),
            ));
        }
        let phi = match self.features {
            DiscriminatorFeatures::Linear => h.clone(),
            DiscriminatorFeatures::Quadratic => Matrix::hcat(&[h, &h.map(|v| v * v)])?,
        };
        if self.classes == 0 {
            return Ok(phi);
        }
        let labels = labels.ok_or_else(|| {
            Error::InvalidInput("conditional discriminator needs labels".into())
        })?;
        if labels.len() != h.rows() {
            return Err(Error::shape("discriminator labels", h.rows(), labels.len()));
        }
        let p = phi.cols();
        let mut out = Matrix::zeros(h.rows(), self.map.in_dim());
        for (i, &c) in labels.iter().enumerate() {
            if c >= self.classes {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: self.classes,
                });
            }
            let src = phi.row(i);
            let row = out.row_mut(i);
            row[..p].copy_from_slice(src);
            row[p * (1 + c)..p * (2 + c)].copy_from_slice(src);
            row[p * (1 + self.classes) + c] = 1.0;
        }
        Ok(out)
    }

    /// One pre-sigmoid logit per row of an unconditional discriminator.
    pub fn logits(&self, h: &Matrix) -> Result<Vec<f64>> {
        self.score(h, None)
    }

    /// One pre-sigmoid logit per row; `labels` are required when conditional
    /// and ignored otherwise.
    pub fn score(&self, h: &Matrix, labels: Option<&[usize]>) -> Result<Vec<f64>> {
        Ok(self.map.forward(&self.lift(h, labels)?)?.into_vec())
    }

    /// Gradient w.r.t. `h` and the layer parameters for upstream `dlogits` (`B x 1`).
    pub fn backward(&self, h: &Matrix, dlogits: &Matrix) -> Result<(Matrix, LinearGrads)> {
        self.score_backward(h, None, dlogits)
    }

    pub fn score_backward(
        &self,
        h: &Matrix,
        labels: Option<&[usize]>,
        dlogits: &Matrix,
    ) -> Result<(Matrix, LinearGrads)> {
        let lifted = self.lift(h, labels)?;
        let grads = self.map.backward(&lifted, dlogits)?;
        let p = self.lift_dim();
        // gradient w.r.t. φ(h): shared block plus the block of each row's class
        let mut dphi = grads.input.column_block(0, p);
        if let (true, Some(labels)) = (self.classes > 0, labels) {
            for (i, &c) in labels.iter().enumerate() {
                let block = &grads.input.row(i)[p * (1 + c)..p * (2 + c)];
                for (o, &g) in dphi.row_mut(i).iter_mut().zip(block) {
                    *o += g;
                }
            }
        }
        let dh = match self.features {
            DiscriminatorFeatures::Linear => dphi,
            DiscriminatorFeatures::Quadratic => {
                let d = h.cols();
                let mut dh = dphi.column_block(0, d);
                let dsq = dphi.column_block(d, d);
                for i in 0..dh.rows() {
                    let hi = h.row(i);
                    let si = dsq.row(i);
                    for ((o, &x), &s) in dh.row_mut(i).iter_mut().zip(hi).zip(si) {
                        *o += 2.0 * x * s;
                    }
                }
                dh
            }
        };
        Ok((dh, grads))
    }
}

/// Linear map over the concatenation `[z; onehot(c); t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    map: LinearLayer,
    noise_dim: usize,
    num_classes: usize,
    text_dim: usize,
}

impl Generator {
    pub fn new(map: LinearLayer, noise_dim: usize, num_classes: usize, text_dim: usize) -> Result<Self> {
        if map.in_dim() != noise_dim + num_classes + text_dim {
            return Err(Error::shape(
                "Generator::new",
                format!("input dim {}", noise_dim + num_classes + text_dim),
                map.in_dim(),
            ));
        }
        Ok(Self {
            map,
            noise_dim,
            num_classes,
            text_dim,
        })
    }

    pub fn init<R: Rng + ?Sized>(
        noise_dim: usize,
        num_classes: usize,
        text_dim: usize,
        audio_dim: usize,
        rng: &mut R,
    ) -> Self {
        let map = LinearLayer::gaussian(noise_dim + num_classes + text_dim, audio_dim, rng);
        Self {
            map,
            noise_dim,
            num_classes,
            text_dim,
        }
    }

    pub fn map(&self) -> &LinearLayer {
        &self.map
    }

    pub fn map_mut(&mut self) -> &mut LinearLayer {
        &mut self.map
    }

    pub fn noise_dim(&self) -> usize {
        self.noise_dim
    }

    pub fn output_dim(&self) -> usize {
        self.map.out_dim()
    }

    /// Builds `[z | onehot(c) | t]`.
    pub fn input(&self, z: &Matrix, labels: &[usize], text: &Matrix) -> Result<Matrix> {
        let b = z.rows();
        if z.cols() != self.noise_dim
            || text.cols() != self.text_dim
            || labels.len() != b
            || text.rows() != b
        {
            return Err(Error::shape(
                "generate",
                format!(
                    "z: Bx{}, {} labels, t: Bx{}",
                    self.noise_dim, b, self.text_dim
                ),
                format!(
                    "z: {}x{}, {} labels, t: {}x{}",
                    z.rows(),
                    z.cols(),
                    labels.len(),
                    text.rows(),
                    text.cols()
                ),
            ));
        }
        let mut onehot = Matrix::zeros(b, self.num_classes);
        for (i, &c) in labels.iter().enumerate() {
            if c >= self.num_classes {
                return Err(Error::LabelOutOfRange {
                    label: c,
                    classes: self.num_classes,
                });
            }
            onehot.set(i, c, 1.0);
        }
        Matrix::hcat(&[z, &onehot, text])
    }
}

/// Variational heads shared with stage 1.
#[derive(Clone, Debug, PartialEq)]
pub struct QHeads {
    pub classifier: LinearLayer,
    pub projector: LinearLayer,
}

impl QHeads {
    pub fn from_baseline(baseline: &BaselineModel) -> Self {
        Self {
            classifier: baseline.classifier.clone(),
            projector: baseline.projector.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanConfig {
    pub noise_dim: usize,
    pub lambda: f64,
    pub tau: f64,
    pub lr_d: f64,
    pub lr_g: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub freeze_q: bool,
    /// Train the discriminator on mixed real/generated inputs with soft targets.
    pub mixup: bool,
    pub mixup_alpha: f64,
    pub disc_features: DiscriminatorFeatures,
    /// Condition the discriminator on the class label.
    pub disc_conditional: bool,
    /// Decay of the exponential moving average of generator parameters that
    /// becomes the returned generator; 0 returns the last iterate.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            noise_dim: 16,
            lambda: 1.0,
            tau: 0.07,
            lr_d: 4e-3,
            lr_g: 1e-3,
            epochs: 300,
            batch_size: 32,
            freeze_q: true,
            mixup: true,
            mixup_alpha: 0.4,
            disc_features: DiscriminatorFeatures::Linear,
            disc_conditional: false,
            ema_decay: 0.999,
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.noise_dim == 0 {
            return Err(Error::config("noise_dim", "must be at least 1"));
        }
        non_negative("lambda", self.lambda)?;
        positive_finite("tau", self.tau)?;
        positive_finite("gan_lr_d", self.lr_d)?;
        positive_finite("gan_lr_g", self.lr_g)?;
        positive_finite("mixup_alpha", self.mixup_alpha)?;
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay", format!("must lie in [0, 1), got {}", self.ema_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GanBundle {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub q: QHeads,
    pub noise_dim: usize,
    pub lambda: f64,
    pub tau: f64,
    pub freeze_q: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanEpoch {
    pub d_loss: f64,
    pub g_loss: f64,
    pub l_iy: f64,
    pub l_it: f64,
    pub mi_bound_t: f64,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    noise_dim: usize,
    num_classes: usize,
    text_dim: usize,
    lambda: f64,
    tau: f64,
    freeze_q: bool,
    disc_features: DiscriminatorFeatures,
    #[serde(default)]
    disc_classes: usize,
}

impl GanBundle {
    pub fn init(baseline: &BaselineModel, cfg: &GanConfig) -> Self {
        let mut r = rng::stream(cfg.seed, "gan-init", 0);
        let generator = Generator::init(
            cfg.noise_dim,
            baseline.num_classes(),
            baseline.text_dim(),
            baseline.audio_dim(),
            &mut r,
        );
        let classes = if cfg.disc_conditional { baseline.num_classes() } else { 0 };
        let discriminator = Discriminator::init(baseline.audio_dim(), cfg.disc_features, classes, &mut r);
        Self {
            generator,
            discriminator,
            q: QHeads::from_baseline(baseline),
            noise_dim: cfg.noise_dim,
            lambda: cfg.lambda,
            tau: cfg.tau,
            freeze_q: cfg.freeze_q,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.generator.num_classes
    }

    pub fn text_dim(&self) -> usize {
        self.generator.text_dim
    }

    pub fn audio_dim(&self) -> usize {
        self.generator.output_dim()
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new();
        ck.push_layer(b"GENR", &self.generator.map);
        ck.push_layer(b"DISC", &self.discriminator.map);
        ck.push_layer(b"QCLS", &self.q.classifier);
        ck.push_layer(b"QPRJ", &self.q.projector);
        ck.push_json(
            b"CONF",
            &BundleMeta {
                noise_dim: self.noise_dim,
                num_classes: self.num_classes(),
                text_dim: self.text_dim(),
                lambda: self.lambda,
                tau: self.tau,
                freeze_q: self.freeze_q,
                disc_features: self.discriminator.features,
                disc_classes: self.discriminator.classes,
            },
        )?;
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: BundleMeta = ck.json(b"CONF")?;
        Ok(Self {
            generator: Generator::new(
                ck.layer(b"GENR")?,
                meta.noise_dim,
                meta.num_classes,
                meta.text_dim,
            )?,
            discriminator: Discriminator::conditional(
                ck.layer(b"DISC")?,
                meta.disc_features,
                meta.disc_classes,
            )?,
            q: QHeads {
                classifier: ck.layer(b"QCLS")?,
                projector: ck.layer(b"QPRJ")?,
            },
            noise_dim: meta.noise_dim,
            lambda: meta.lambda,
            tau: meta.tau,
            freeze_q: meta.freeze_q,
        })
    }
}

/// Standard Gaussian noise, `rows x dim`.
pub fn sample_noise<R: Rng + ?Sized>(rows: usize, dim: usize, rng: &mut R) -> Matrix {
    let data = (0..rows * dim).map(|_| rng.sample(StandardNormal)).collect();
    Matrix::new(rows, dim, data).expect("sized")
}

/// `ĥ = G([z | onehot(c) | t])`
pub fn generate(bundle: &GanBundle, z: &Matrix, labels: &[usize], text: &Matrix) -> Result<Matrix> {
    let input = bundle.generator.input(z, labels, text)?;
    bundle.generator.map.forward(&input)
}

/// Information metrics of a batch of generated features.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiDiagnostics {
    pub l_iy: f64,
    pub l_it: f64,
    /// `ln B − L_It`
    pub mi_bound_t: f64,
    pub q_label_accuracy: f64,
}

/// Scores features against their conditioning through the heads in `q`.
pub fn mi_metrics(
    q: &QHeads,
    tau: f64,
    features: &Matrix,
    labels: &[usize],
    text: &Matrix,
) -> Result<MiDiagnostics> {
    let logits = q.classifier.forward(features)?;
    let l_iy = cross_entropy(&logits, labels)?.value;
    let hits = logits
        .row_iter()
        .zip(labels)
        .filter(|(row, &c)| argmax(row) == c)
        .count();
    let (l_it, mi_bound_t) = if text.cols() > 0 && features.rows() >= 2 {
        let predicted = q.projector.forward(features)?;
        let nce = infonce(text, &predicted, tau)?;
        (nce.loss.value, nce.mi_lower_bound)
    } else {
        (0.0, 0.0)
    };
    Ok(MiDiagnostics {
        l_iy,
        l_it,
        mi_bound_t,
        q_label_accuracy: hits as f64 / labels.len().max(1) as f64,
    })
}

/// Pure evaluation of the information terms on generated samples.
pub fn mi_diagnostics(
    bundle: &GanBundle,
    z: &Matrix,
    labels: &[usize],
    text: &Matrix,
) -> Result<MiDiagnostics> {
    let hhat = generate(bundle, z, labels, text)?;
    mi_metrics(&bundle.q, bundle.tau, &hhat, labels, text)
}

/// Value and gradients of `gan_g_loss + λ·(L_Iy + L_It)`.
#[derive(Clone, Debug)]
pub struct GeneratorLoss {
    pub value: f64,
    pub g_loss: f64,
    pub l_iy: f64,
    pub l_it: f64,
    pub mi_bound_t: f64,
    pub generator: LinearGrads,
    /// Head gradients, present only when `λ > 0`.
    pub classifier: Option<LinearGrads>,
    pub projector: Option<LinearGrads>,
}

/// With `λ = 0` the information terms are evaluated for logging only and
/// contribute nothing to any gradient.
pub fn generator_objective(
    bundle: &GanBundle,
    z: &Matrix,
    labels: &[usize],
    text: &Matrix,
) -> Result<GeneratorLoss> {
    let input = bundle.generator.input(z, labels, text)?;
    let hhat = bundle.generator.map.forward(&input)?;
    let fake = bundle.discriminator.score(&hhat, Some(labels))?;
    let g = gan_g_loss(&fake)?;
    let (mut dh, _) = bundle.discriminator.score_backward(&hhat, Some(labels), &g.grads[0])?;

    let lambda = bundle.lambda;
    let use_text = bundle.text_dim() > 0 && hhat.rows() >= 2;
    let mut classifier = None;
    let mut projector = None;
    let (l_iy, l_it, mi_bound_t);
    if lambda > 0.0 {
        let logits = bundle.q.classifier.forward(&hhat)?;
        let ce = cross_entropy(&logits, labels)?;
        let cg = bundle.q.classifier.backward(&hhat, &ce.grads[0].scale(lambda))?;
        dh.add_scaled(&cg.input, 1.0)?;
        classifier = Some(cg);
        l_iy = ce.value;
        if use_text {
            let predicted = bundle.q.projector.forward(&hhat)?;
            let nce = infonce(text, &predicted, bundle.tau)?;
            let pg = bundle
                .q
                .projector
                .backward(&hhat, &nce.loss.grads[1].scale(lambda))?;
            dh.add_scaled(&pg.input, 1.0)?;
            projector = Some(pg);
            l_it = nce.loss.value;
            mi_bound_t = nce.mi_lower_bound;
        } else {
            l_it = 0.0;
            mi_bound_t = 0.0;
        }
    } else {
        let m = mi_metrics(&bundle.q, bundle.tau, &hhat, labels, text)?;
        l_iy = m.l_iy;
        l_it = m.l_it;
        mi_bound_t = m.mi_bound_t;
    }

    let generator = bundle.generator.map.backward(&input, &dh)?;
    Ok(GeneratorLoss {
        value: g.value + lambda * (l_iy + l_it),
        g_loss: g.value,
        l_iy,
        l_it,
        mi_bound_t,
        generator,
        classifier,
        projector,
    })
}

fn add_grads(a: &mut LinearGrads, b: &LinearGrads) -> Result<()> {
    a.weight.add_scaled(&b.weight, 1.0)?;
    for (x, y) in a.bias.iter_mut().zip(&b.bias) {
        *x += y;
    }
    Ok(())
}

/// Discriminator loss and parameter gradients on one batch of real and
/// generated features; row `i` of both carries label `labels[i]`.
pub fn discriminator_loss(
    disc: &Discriminator,
    real: &Matrix,
    fake: &Matrix,
    labels: &[usize],
) -> Result<(f64, LinearGrads)> {
    let out = gan_d_loss(&disc.score(real, Some(labels))?, &disc.score(fake, Some(labels))?)?;
    let (_, mut grads) = disc.score_backward(real, Some(labels), &out.grads[0])?;
    let (_, fake_grads) = disc.score_backward(fake, Some(labels), &out.grads[1])?;
    add_grads(&mut grads, &fake_grads)?;
    Ok((out.value, grads))
}

/// Soft-target loss on `w_i·real_i + (1 − w_i)·fake_i` with target `w_i`.
pub fn discriminator_mixup_loss(
    disc: &Discriminator,
    real: &Matrix,
    fake: &Matrix,
    labels: &[usize],
    weights: &[f64],
) -> Result<(f64, LinearGrads)> {
    if real.shape() != fake.shape() || weights.len() != real.rows() {
        return Err(Error::shape(
            "discriminator_mixup_loss",
            format!("{}x{} and {} weights", real.rows(), real.cols(), real.rows()),
            format!("{}x{} and {} weights", fake.rows(), fake.cols(), weights.len()),
        ));
    }
    let mut mixed = real.clone();
    for (i, &w) in weights.iter().enumerate() {
        for (m, &f) in mixed.row_mut(i).iter_mut().zip(fake.row(i)) {
            *m = w * *m + (1.0 - w) * f;
        }
    }
    let out = bce_with_logits(&disc.score(&mixed, Some(labels))?, weights)?;
    let (_, grads) = disc.score_backward(&mixed, Some(labels), &out.grads[0])?;
    Ok((out.value, grads))
}

/// Settings for fitting a discriminator against fixed sample sets.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscriminatorFit {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Trains `disc` on `gan_d_loss` against fixed real and generated samples
/// (a frozen generator). Batches are drawn without replacement per pass.
/// `labels` pair row `i` of both sets with a class and are only read by a
/// conditional discriminator.
pub fn fit_discriminator(
    disc: &mut Discriminator,
    real: &Matrix,
    fake: &Matrix,
    labels: &[usize],
    fit: &DiscriminatorFit,
) -> Result<f64> {
    let mut opt = LayerAdam::new(&disc.map, AdamConfig::with_lr(fit.lr));
    let mut r = rng::stream(fit.seed, "disc-fit", 0);
    let n = real.rows().min(fake.rows());
    if labels.len() != n {
        return Err(Error::shape("fit_discriminator labels", n, labels.len()));
    }
    let b = fit.batch_size.clamp(1, n.max(1));
    let mut plan: Vec<Vec<usize>> = Vec::new();
    let mut last = f64::NAN;
    for step in 0..fit.steps {
        if plan.is_empty() {
            plan = batches(n, b, b, &mut r);
            plan.reverse();
        }
        let idx = plan.pop().expect("non-empty plan");
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let (loss, grads) = discriminator_loss(
            disc,
            &real.select_rows(&idx),
            &fake.select_rows(&idx),
            &batch_labels,
        )?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch: step,
                what: "discriminator loss",
            });
        }
        opt.step(&mut disc.map, &grads)?;
        last = loss;
    }
    Ok(last)
}

/// Alternating discriminator/generator training state.
pub struct GanTrainer {
    pub bundle: GanBundle,
    cfg: GanConfig,
    opt_g: LayerAdam,
    opt_d: LayerAdam,
    opt_qc: LayerAdam,
    opt_qp: LayerAdam,
    noise: rng::Rng,
    mix: rng::Rng,
    ema: Vec<f64>,
    steps: u64,
}

impl GanTrainer {
    pub fn new(bundle: GanBundle, cfg: &GanConfig) -> Result<Self> {
        cfg.validate()?;
        let g = AdamConfig::with_lr(cfg.lr_g);
        Ok(Self {
            opt_g: LayerAdam::new(&bundle.generator.map, g),
            opt_d: LayerAdam::new(&bundle.discriminator.map, AdamConfig::with_lr(cfg.lr_d)),
            opt_qc: LayerAdam::new(&bundle.q.classifier, g),
            opt_qp: LayerAdam::new(&bundle.q.projector, g),
            noise: rng::stream(cfg.seed, "gan-noise", 0),
            mix: rng::stream(cfg.seed, "gan-mixup", 0),
            ema: bundle.generator.map.params(),
            steps: 0,
            bundle,
            cfg: cfg.clone(),
        })
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self, real: &Matrix, labels: &[usize], text: &Matrix) -> Result<(f64, GeneratorLoss)> {
        let b = real.rows();
        let z = sample_noise(b, self.cfg.noise_dim, &mut self.noise);
        let fake = generate(&self.bundle, &z, labels, text)?;
        let (d_loss, d_grads) = if self.cfg.mixup {
            let weights = (0..b)
                .map(|_| sample_mix_weight(self.cfg.mixup_alpha, &mut self.mix))
                .collect::<Result<Vec<_>>>()?;
            discriminator_mixup_loss(&self.bundle.discriminator, real, &fake, labels, &weights)?
        } else {
            discriminator_loss(&self.bundle.discriminator, real, &fake, labels)?
        };
        self.opt_d.step(&mut self.bundle.discriminator.map, &d_grads)?;

        let z = sample_noise(b, self.cfg.noise_dim, &mut self.noise);
        let g = generator_objective(&self.bundle, &z, labels, text)?;
        self.opt_g.step(&mut self.bundle.generator.map, &g.generator)?;
        self.steps += 1;
        // warm-up keeps the average from being dominated by the initial weights
        let t = self.steps as f64;
        let decay = self.cfg.ema_decay.min((1.0 + t) / (10.0 + t));
        for (e, p) in self.ema.iter_mut().zip(self.bundle.generator.map.params()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
        if !self.bundle.freeze_q {
            if let Some(cg) = &g.classifier {
                self.opt_qc.step(&mut self.bundle.q.classifier, cg)?;
            }
            if let Some(pg) = &g.projector {
                self.opt_qp.step(&mut self.bundle.q.projector, pg)?;
            }
        }
        Ok((d_loss, g))
    }

    /// The trained bundle, with the averaged generator when averaging is on.
    pub fn finish(mut self) -> Result<GanBundle> {
        if self.cfg.ema_decay > 0.0 {
            self.bundle.generator.map.set_params(&self.ema)?;
        }
        Ok(self.bundle)
    }
}

/// Trains generator and discriminator on the corpus, conditioning each
/// generated sample on the `(c, t)` of a real record from the same batch.
pub fn train_infogan(
    corpus: &Corpus,
    baseline: &BaselineModel,
    cfg: &GanConfig,
) -> Result<(GanBundle, Vec<GanEpoch>)> {
    cfg.validate()?;
    if baseline.audio_dim() != corpus.audio_dim()
        || baseline.text_dim() != corpus.text_dim()
        || baseline.num_classes() != corpus.num_classes()
    {
        return Err(Error::shape(
            "train_infogan",
            format!(
                "corpus dims a={} t={} K={}",
                baseline.audio_dim(),
                baseline.text_dim(),
                baseline.num_classes()
            ),
            format!(
                "a={} t={} K={}",
                corpus.audio_dim(),
                corpus.text_dim(),
                corpus.num_classes()
            ),
        ));
    }
    let mut trainer = GanTrainer::new(GanBundle::init(baseline, cfg), cfg)?;
    let mut shuffle = rng::stream(cfg.seed, "gan-batches", 0);
    let audio = corpus.audio_matrix();
    let text = corpus.text_matrix();
    let labels = corpus.labels();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let plan = batches(corpus.len(), cfg.batch_size, 2, &mut shuffle);
        if plan.is_empty() {
            return Err(Error::InvalidInput(
                "corpus too small for a batch of 2".into(),
            ));
        }
        let mut sum = GanEpoch {
            d_loss: 0.0,
            g_loss: 0.0,
            l_iy: 0.0,
            l_it: 0.0,
            mi_bound_t: 0.0,
        };
        for idx in &plan {
            let h = audio.select_rows(idx);
            let t = text.select_rows(idx);
            let c: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (d_loss, g) = trainer.step(&h, &c, &t)?;
            if !d_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "discriminator loss",
                });
            }
            if !g.value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    what: "generator loss",
                });
            }
            sum.d_loss += d_loss;
            sum.g_loss += g.g_loss;
            sum.l_iy += g.l_iy;
            sum.l_it += g.l_it;
            sum.mi_bound_t += g.mi_bound_t;
        }
        let n = plan.len() as f64;
        trace.push(GanEpoch {
            d_loss: sum.d_loss / n,
            g_loss: sum.g_loss / n,
            l_iy: sum.l_iy / n,
            l_it: sum.l_it / n,
            mi_bound_t: sum.mi_bound_t / n,
        });
    }
    Ok((trainer.finish()?, trace))
}

pub fn write_trace_csv(trace: &[GanEpoch], path: impl AsRef<std::path::Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "d_loss", "g_loss", "L_Iy", "L_It", "mi_bound_t"])?;
    for (i, e) in trace.iter().enumerate() {
        w.write_record([
            i.to_string(),
            e.d_loss.to_string(),
            e.g_loss.to_string(),
            e.l_iy.to_string(),
            e.l_it.to_string(),
            e.mi_bound_t.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::BaselineConfig;
    use crate::numkit::{grad_check, GRAD_CHECK_STEP};

    fn small_bundle(lambda: f64, features: DiscriminatorFeatures) -> GanBundle {
        bundle_with(lambda, features, false)
    }

    fn bundle_with(lambda: f64, features: DiscriminatorFeatures, conditional: bool) -> GanBundle {
        let baseline = BaselineModel::init(4, 3, 3, BaselineConfig::default());
        GanBundle::init(
            &baseline,
            &GanConfig {
                noise_dim: 2,
                lambda,
                tau: 0.5,
                disc_features: features,
                disc_conditional: conditional,
                ..GanConfig::default()
            },
        )
    }

    const VARIANTS: [(DiscriminatorFeatures, bool); 4] = [
        (DiscriminatorFeatures::Linear, false),
        (DiscriminatorFeatures::Quadratic, false),
        (DiscriminatorFeatures::Linear, true),
        (DiscriminatorFeatures::Quadratic, true),
    ];

    fn batch(r: &mut rng::Rng, b: usize) -> (Matrix, Vec<usize>, Matrix) {
        let z = sample_noise(b, 2, r);
        let labels = (0..b).map(|i| i % 3).collect();
        let text = sample_noise(b, 3, r);
        (z, labels, text)
    }

    #[test]
    fn zero_generator_outputs_zero() {
        let mut bundle = small_bundle(1.0, DiscriminatorFeatures::Linear);
        bundle.generator.map = LinearLayer::zeros(2 + 3 + 3, 4);
        let mut r = rng::from_seed(1);
        let (z, c, t) = batch(&mut r, 5);
        let h = generate(&bundle, &z, &c, &t).unwrap();
        assert!(h.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generation_is_deterministic_and_checked() {
        let bundle = small_bundle(1.0, DiscriminatorFeatures::Linear);
        let mut r = rng::from_seed(2);
        let (z, c, t) = batch(&mut r, 4);
        assert_eq!(
            generate(&bundle, &z, &c, &t).unwrap(),
            generate(&bundle, &z, &c, &t).unwrap()
        );
        assert!(generate(&bundle, &Matrix::zeros(4, 3), &c, &t).is_err());
        assert!(generate(&bundle, &z, &[0, 1, 2, 3], &t).is_err());
    }

    #[test]
    fn noise_spans_at_most_noise_dim_directions() {
        // with (c, t) fixed, ĥ − ĥ₀ = W_z (z − z₀) lies in the column span of W_z
        let bundle = small_bundle(1.0, DiscriminatorFeatures::Linear);
        let mut r = rng::from_seed(3);
        let (_, c, t) = batch(&mut r, 1);
        let z0 = Matrix::zeros(1, 2);
        let h0 = generate(&bundle, &z0, &c, &t).unwrap();
        let wz = bundle.generator.map().weight().column_block(0, 2);
        for _ in 0..5 {
            let z = sample_noise(1, 2, &mut r);
            let h = generate(&bundle, &z, &c, &t).unwrap();
            let expected = z.matmul_t(&wz).unwrap();
            for j in 0..4 {
                assert!((h.get(0, j) - h0.get(0, j) - expected.get(0, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn generator_objective_passes_gradient_check() {
        for (features, conditional) in VARIANTS {
            for lambda in [0.0, 0.7] {
                let bundle = bundle_with(lambda, features, conditional);
                let mut r = rng::from_seed(4);
                let (z, c, t) = batch(&mut r, 6);
                let check = grad_check(
                    |p| {
                        let mut b = bundle.clone();
                        b.generator.map.set_params(p).unwrap();
                        let out = generator_objective(&b, &z, &c, &t).unwrap();
                        let value = out.g_loss + lambda * (out.l_iy + out.l_it);
                        (value, out.generator.flat())
                    },
                    &bundle.generator.map.params(),
                    GRAD_CHECK_STEP,
                )
                .unwrap();
                assert!(
                    check.max_rel_error < 1e-4,
                    "{features:?} {conditional} {lambda}: {check:?}"
                );
            }
        }
    }

    #[test]
    fn discriminator_losses_pass_gradient_check() {
        for (features, conditional) in VARIANTS {
            let bundle = bundle_with(1.0, features, conditional);
            let mut r = rng::from_seed(5);
            let real = sample_noise(5, 4, &mut r);
            let fake = sample_noise(5, 4, &mut r);
            let labels = [2, 0, 1, 1, 2];
            let weights = [0.1, 0.5, 0.9, 0.3, 0.7];
            for mixed in [false, true] {
                let check = grad_check(
                    |p| {
                        let mut d = bundle.discriminator.clone();
                        d.map.set_params(p).unwrap();
                        let (v, g) = if mixed {
                            discriminator_mixup_loss(&d, &real, &fake, &labels, &weights).unwrap()
                        } else {
                            discriminator_loss(&d, &real, &fake, &labels).unwrap()
                        };
                        (v, g.flat())
                    },
                    &bundle.discriminator.map.params(),
                    GRAD_CHECK_STEP,
                )
                .unwrap();
                assert!(check.max_rel_error < 1e-4, "{check:?}");
            }
            // input gradient of the lift
            let d = &bundle.discriminator;
            let check = grad_check(
                |p| {
                    let h = Matrix::new(5, 4, p.to_vec()).unwrap();
                    let logits = d.score(&h, Some(&labels)).unwrap();
                    let out = gan_g_loss(&logits).unwrap();
                    let (dh, _) = d.score_backward(&h, Some(&labels), &out.grads[0]).unwrap();
                    (out.value, dh.into_vec())
                },
                real.as_slice(),
                GRAD_CHECK_STEP,
            )
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{check:?}");
        }
    }

    #[test]
    fn zero_lambda_adds_no_gradient() {
        let bundle = small_bundle(0.0, DiscriminatorFeatures::Linear);
        let mut r = rng::from_seed(6);
        let (z, c, t) = batch(&mut r, 6);
        let out = generator_objective(&bundle, &z, &c, &t).unwrap();
        assert!(out.classifier.is_none() && out.projector.is_none());

        // vanilla non-saturating gradient computed by hand
        let input = bundle.generator.input(&z, &c, &t).unwrap();
        let hhat = bundle.generator.map().forward(&input).unwrap();
        let g = gan_g_loss(&bundle.discriminator.logits(&hhat).unwrap()).unwrap();
        let (dh, _) = bundle.discriminator.backward(&hhat, &g.grads[0]).unwrap();
        let vanilla = bundle.generator.map().backward(&input, &dh).unwrap();
        assert_eq!(out.generator, vanilla);
        assert_eq!(out.value, g.value);
    }

    #[test]
    fn diagnostics_bound_and_identity() {
        let bundle = small_bundle(1.0, DiscriminatorFeatures::Linear);
        let mut r = rng::from_seed(7);
        let (z, c, t) = batch(&mut r, 8);
        let m = mi_diagnostics(&bundle, &z, &c, &t).unwrap();
        assert!(m.mi_bound_t <= 8f64.ln());
        assert!((0.0..=1.0).contains(&m.q_label_accuracy));
    }

    #[test]
    fn checkpoint_round_trip() {
        for (features, conditional) in VARIANTS {
            let bundle = bundle_with(0.5, features, conditional);
            let bytes = bundle.to_checkpoint().unwrap().to_bytes();
            let back = GanBundle::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(back, bundle);
        }
    }

    #[test]
    fn conditional_discriminator_needs_valid_labels() {
        let d = bundle_with(1.0, DiscriminatorFeatures::Linear, true).discriminator;
        assert_eq!((d.classes(), d.input_dim()), (3, 4));
        let h = Matrix::zeros(2, 4);
        assert!(d.logits(&h).is_err());
        assert!(d.score(&h, Some(&[0])).is_err());
        assert!(matches!(
            d.score(&h, Some(&[0, 3])),
            Err(Error::LabelOutOfRange { .. })
        ));
        assert_eq!(d.score(&h, Some(&[0, 2])).unwrap().len(), 2);
        let bad = LinearLayer::zeros(4 * 4 + 2, 1);
        assert!(Discriminator::conditional(bad, DiscriminatorFeatures::Linear, 3).is_err());
    }
}
