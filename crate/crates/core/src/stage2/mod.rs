//! Unified embedding: two encoders into a shared `d_v`-space, a shared
//! classifier on the projections and two cross-domain decoders, trained
//! jointly on
//!
//! ```text
//! L = λ1‖Va − Vb‖² + λ2·CE([Va; Vb]) + λ3(‖Va‖² + ‖Vb‖²)
//!   + λ4(‖dec_ab(Va) − Zb‖² + ‖dec_ba(Vb) − Za‖²) + λ5·R(α)
//! ```
//!
//! where `R` penalizes the encoder weight matrices' distance from α.

mod train;

use rand::Rng;

use crate::diffmath::{Activation, MathError, Matrix, Mlp, Tape, Var};
use crate::error::TrainError;

pub use train::{train_embedding, write_history_csv, EmbedEpoch};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    /// `d_z → hidden → d_v → d_v` encoders and mirrored decoders.
    Deep,
    /// Single linear layers (`V = Z·w`), the literal equation form; a
    /// `prefix` adds ReLU layers in front of the encoder's linear map.
    Linear,
}

/// How `R` reads "weight minus α".
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegularizerMode {
    /// `Σ ‖W − α·J‖²_F`, α subtracted from every entry.
    Broadcast,
    /// `Σ (‖W‖_F − α)²`.
    Norm,
}

impl RegularizerMode {
    pub fn tag(self) -> u8 {
        match self {
            RegularizerMode::Broadcast => 0,
            RegularizerMode::Norm => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(RegularizerMode::Broadcast),
            1 => Some(RegularizerMode::Norm),
            _ => None,
        }
    }
}

/// Scaling of the squared-error terms (alignment, norm, decoder).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    /// Plain squared Frobenius norms summed over the batch.
    Sum,
    /// Divided by the number of entries (rows × width), like a mean squared error.
    Mean,
}

impl Reduction {
    pub fn tag(self) -> u8 {
        match self {
            Reduction::Sum => 0,
            Reduction::Mean => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Reduction::Sum),
            1 => Some(Reduction::Mean),
            _ => None,
        }
    }
}

/// Term definitions that are not weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermOptions {
    pub regularizer_mode: RegularizerMode,
    pub reduction: Reduction,
}

impl Default for TermOptions {
    fn default() -> Self {
        Self {
            regularizer_mode: RegularizerMode::Broadcast,
            reduction: Reduction::Mean,
        }
    }
}

/// λ1..λ5 and α.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alignment: f64,
    pub classification: f64,
    pub norm: f64,
    pub decoder: f64,
    pub regularizer: f64,
    pub alpha: f64,
}

impl LossWeights {
    /// λ1..λ4 = 1, α = 0; λ5 is the caller's pick from the {1, 0.001} grid.
    pub fn dsrsid_like(regularizer: f64) -> Self {
        Self {
            alignment: 1.0,
            classification: 1.0,
            norm: 1.0,
            decoder: 1.0,
            regularizer,
            alpha: 0.0,
        }
    }

    /// λ1 = 1e-5, λ3 = λ4 = 0.01, λ5 = 1, α = 1. λ2 is unstated and set to 1.
    pub fn merced_like() -> Self {
        Self {
            alignment: 1e-5,
            classification: 1.0,
            norm: 0.01,
            decoder: 0.01,
            regularizer: 1.0,
            alpha: 1.0,
        }
    }

    /// Named presets; `dsrsid-like` takes λ5 = 0.001 from its grid.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "dsrsid-like" => Some(Self::dsrsid_like(0.001)),
            "merced-like" => Some(Self::merced_like()),
            _ => None,
        }
    }

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.alignment,
            self.classification,
            self.norm,
            self.decoder,
            self.regularizer,
            self.alpha,
        ]
    }

    pub fn from_array(v: [f64; 6]) -> Self {
        Self {
            alignment: v[0],
            classification: v[1],
            norm: v[2],
            decoder: v[3],
            regularizer: v[4],
            alpha: v[5],
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.as_array().iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "loss weights must be finite and non-negative: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub d_v: usize,
    pub architecture: Architecture,
    /// Width of the first encoder layer (and last decoder hidden layer).
    pub hidden: usize,
    /// Extra encoder layers inserted right after the input, e.g. `[512, 128]`
    /// when training directly on raw features.
    pub prefix: Vec<usize>,
    pub encoder_output: Activation,
    pub terms: TermOptions,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Stop once the epoch total improves by less than `early_stop_tol`
    /// (relative) for `early_stop_patience` consecutive epochs; 0 disables.
    pub early_stop_patience: usize,
    pub early_stop_tol: f64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            d_v: 64,
            architecture: Architecture::Deep,
            hidden: 128,
            prefix: Vec::new(),
            encoder_output: Activation::Identity,
            terms: TermOptions::default(),
            epochs: 400,
            batch_size: 64,
            lr: 0.01,
            seed: 0,
            early_stop_patience: 20,
            early_stop_tol: 1e-6,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.d_v == 0 || self.hidden == 0 || self.prefix.contains(&0) {
            return bad("layer widths must be positive");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedModel {
    pub encoder_a: Mlp,
    pub encoder_b: Mlp,
    pub classifier: Mlp,
    /// `V_a → Z_b`.
    pub decoder_ab: Mlp,
    /// `V_b → Z_a`.
    pub decoder_ba: Mlp,
}

fn encoder<R: Rng + ?Sized>(d_in: usize, config: &EmbedConfig, rng: &mut R) -> Mlp {
    let d_v = config.d_v;
    match config.architecture {
        Architecture::Linear => {
            let mut dims = vec![d_in];
            dims.extend_from_slice(&config.prefix);
            dims.push(d_v);
            Mlp::new(&dims, Activation::Relu, Activation::Identity, rng)
        }
        Architecture::Deep => {
            let mut dims = vec![d_in];
            dims.extend_from_slice(&config.prefix);
            dims.extend_from_slice(&[config.hidden, d_v, d_v]);
            Mlp::new(&dims, Activation::Relu, config.encoder_output, rng)
        }
    }
}

fn decoder<R: Rng + ?Sized>(d_out: usize, config: &EmbedConfig, rng: &mut R) -> Mlp {
    let d_v = config.d_v;
    match config.architecture {
        Architecture::Linear => Mlp::new(
            &[d_v, d_out],
            Activation::Identity,
            Activation::Identity,
            rng,
        ),
        Architecture::Deep => Mlp::new(
            &[d_v, d_v, config.hidden, d_out],
            Activation::Relu,
            Activation::Identity,
            rng,
        ),
    }
}

impl EmbedModel {
    pub fn new<R: Rng + ?Sized>(
        d_za: usize,
        d_zb: usize,
        classes: usize,
        config: &EmbedConfig,
        rng: &mut R,
    ) -> Self {
        let encoder_a = encoder(d_za, config, rng);
        let encoder_b = encoder(d_zb, config, rng);
        let classifier = Mlp::new(
            &[config.d_v, classes],
            Activation::Identity,
            Activation::Identity,
            rng,
        );
        let decoder_ab = decoder(d_zb, config, rng);
        let decoder_ba = decoder(d_za, config, rng);
        Self {
            encoder_a,
            encoder_b,
            classifier,
            decoder_ab,
            decoder_ba,
        }
    }

    /// Checks that the five groups compose.
    pub fn validate(&self) -> Result<(), MathError> {
        let d_v = self.d_v();
        let mismatch = |op, l: usize, r: usize| MathError::ShapeMismatch {
            op,
            left: (1, l),
            right: (r, 1),
        };
        if self.encoder_b.output_dim() != d_v {
            return Err(mismatch("encoder widths", d_v, self.encoder_b.output_dim()));
        }
        for (op, m) in [
            ("classifier input", &self.classifier),
            ("decoder_ab input", &self.decoder_ab),
            ("decoder_ba input", &self.decoder_ba),
        ] {
            if m.input_dim() != d_v {
                return Err(mismatch(op, d_v, m.input_dim()));
            }
        }
        if self.decoder_ab.output_dim() != self.encoder_b.input_dim() {
            return Err(mismatch(
                "decoder_ab output",
                self.encoder_b.input_dim(),
                self.decoder_ab.output_dim(),
            ));
        }
        if self.decoder_ba.output_dim() != self.encoder_a.input_dim() {
            return Err(mismatch(
                "decoder_ba output",
                self.encoder_a.input_dim(),
                self.decoder_ba.output_dim(),
            ));
        }
        Ok(())
    }

    pub fn d_v(&self) -> usize {
        self.encoder_a.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn encoder(&self, domain: Domain) -> &Mlp {
        match domain {
            Domain::A => &self.encoder_a,
            Domain::B => &self.encoder_b,
        }
    }

    pub fn groups(&self) -> [&Mlp; 5] {
        [
            &self.encoder_a,
            &self.encoder_b,
            &self.classifier,
            &self.decoder_ab,
            &self.decoder_ba,
        ]
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.groups().into_iter().flat_map(Mlp::params).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.encoder_a.params_mut();
        p.extend(self.encoder_b.params_mut());
        p.extend(self.classifier.params_mut());
        p.extend(self.decoder_ab.params_mut());
        p.extend(self.decoder_ba.params_mut());
        p
    }

    pub fn register(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            encoder_a: self.encoder_a.register(tape),
            encoder_b: self.encoder_b.register(tape),
            classifier: self.classifier.register(tape),
            decoder_ab: self.decoder_ab.register(tape),
            decoder_ba: self.decoder_ba.register(tape),
        }
    }
}

/// Tape leaves for each parameter group, in `Mlp::register` order.
pub struct ModelVars {
    pub encoder_a: Vec<Var>,
    pub encoder_b: Vec<Var>,
    pub classifier: Vec<Var>,
    pub decoder_ab: Vec<Var>,
    pub decoder_ba: Vec<Var>,
}

impl ModelVars {
    /// Inverse of `all`: cuts a flat leaf list into the five groups.
    pub fn split(model: &EmbedModel, vars: &[Var]) -> ModelVars {
        let mut rest = vars;
        let mut take = |m: &Mlp| {
            let (head, tail) = rest.split_at(m.param_count());
            rest = tail;
            head.to_vec()
        };
        ModelVars {
            encoder_a: take(&model.encoder_a),
            encoder_b: take(&model.encoder_b),
            classifier: take(&model.classifier),
            decoder_ab: take(&model.decoder_ab),
            decoder_ba: take(&model.decoder_ba),
        }
    }

    pub fn all(&self) -> Vec<Var> {
        [
            &self.encoder_a,
            &self.encoder_b,
            &self.classifier,
            &self.decoder_ab,
            &self.decoder_ba,
        ]
        .into_iter()
        .flatten()
        .copied()
        .collect()
    }

    /// Encoder weight matrices (biases sit at odd positions).
    fn encoder_weights(&self) -> impl Iterator<Item = Var> + '_ {
        self.encoder_a
            .iter()
            .chain(&self.encoder_b)
            .step_by(2)
            .copied()
    }
}

/// Encoder forward pass for one domain.
pub fn project(model: &EmbedModel, z: &Matrix, domain: Domain) -> Result<Matrix, MathError> {
    model.encoder(domain).forward(z)
}

/// Unweighted objective terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub alignment: f64,
    pub classification: f64,
    pub norm: f64,
    pub decoder: f64,
    pub regularizer: f64,
    pub total: f64,
}

fn squared(tape: &mut Tape, x: Var, reduction: Reduction) -> Result<Var, MathError> {
    let s = tape.frobenius_sq(x)?;
    match reduction {
        Reduction::Sum => Ok(s),
        Reduction::Mean => {
            let n = tape.value(x).data().len() as f64;
            tape.scale(s, 1.0 / n)
        }
    }
}

pub(crate) fn alignment_var(
    tape: &mut Tape,
    va: Var,
    vb: Var,
    reduction: Reduction,
) -> Result<Var, MathError> {
    let d = tape.sub(va, vb)?;
    squared(tape, d, reduction)
}

pub(crate) fn classification_var(
    tape: &mut Tape,
    model: &EmbedModel,
    vars: &[Var],
    va: Var,
    vb: Var,
    labels: &[usize],
) -> Result<Var, MathError> {
    let stacked = tape.vstack(va, vb)?;
    let logits = model.classifier.forward_tape(tape, stacked, vars)?;
    let doubled: Vec<usize> = labels.iter().chain(labels).copied().collect();
    tape.softmax_cross_entropy(logits, &doubled)
}

pub(crate) fn norm_var(
    tape: &mut Tape,
    va: Var,
    vb: Var,
    reduction: Reduction,
) -> Result<Var, MathError> {
    let a = squared(tape, va, reduction)?;
    let b = squared(tape, vb, reduction)?;
    tape.add(a, b)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn decoder_var(
    tape: &mut Tape,
    model: &EmbedModel,
    mv: &ModelVars,
    va: Var,
    vb: Var,
    za: Var,
    zb: Var,
    reduction: Reduction,
) -> Result<Var, MathError> {
    let rab = model.decoder_ab.forward_tape(tape, va, &mv.decoder_ab)?;
    let rba = model.decoder_ba.forward_tape(tape, vb, &mv.decoder_ba)?;
    let eab = tape.sub(rab, zb)?;
    let eba = tape.sub(rba, za)?;
    let sab = squared(tape, eab, reduction)?;
    let sba = squared(tape, eba, reduction)?;
    tape.add(sab, sba)
}

pub(crate) fn regularizer_var(
    tape: &mut Tape,
    weights: &[Var],
    alpha: f64,
    mode: RegularizerMode,
) -> Result<Var, MathError> {
    let mut terms = Vec::with_capacity(weights.len());
    for &w in weights {
        let (r, c) = tape.value(w).shape();
        let t = match mode {
            RegularizerMode::Broadcast => {
                let shifted = tape.sub_const(w, &Matrix::filled(r, c, alpha))?;
                tape.frobenius_sq(shifted)?
            }
            RegularizerMode::Norm => {
                let sq = tape.frobenius_sq(w)?;
                let norm = tape.sqrt(sq)?;
                let gap = tape.add_scalar(norm, -alpha)?;
                tape.frobenius_sq(gap)?
            }
        };
        terms.push((t, 1.0));
    }
    tape.weighted_sum(&terms)
}

/// All objective nodes for one batch.
pub struct ObjectiveVars {
    pub alignment: Var,
    pub classification: Var,
    pub norm: Var,
    pub decoder: Var,
    pub regularizer: Var,
    pub total: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn objective(
    tape: &mut Tape,
    model: &EmbedModel,
    mv: &ModelVars,
    za: &Matrix,
    zb: &Matrix,
    labels: &[usize],
    weights: &LossWeights,
    opts: TermOptions,
) -> Result<ObjectiveVars, MathError> {
    let r = opts.reduction;
    let za = tape.leaf(za.clone());
    let zb = tape.leaf(zb.clone());
    let va = model.encoder_a.forward_tape(tape, za, &mv.encoder_a)?;
    let vb = model.encoder_b.forward_tape(tape, zb, &mv.encoder_b)?;
    let alignment = alignment_var(tape, va, vb, r)?;
    let classification = classification_var(tape, model, &mv.classifier, va, vb, labels)?;
    let norm = norm_var(tape, va, vb, r)?;
    let decoder = decoder_var(tape, model, mv, va, vb, za, zb, r)?;
    let enc_w: Vec<Var> = mv.encoder_weights().collect();
    let regularizer = regularizer_var(tape, &enc_w, weights.alpha, opts.regularizer_mode)?;
    let total = tape.weighted_sum(&[
        (alignment, weights.alignment),
        (classification, weights.classification),
        (norm, weights.norm),
        (decoder, weights.decoder),
        (regularizer, weights.regularizer),
    ])?;
    Ok(ObjectiveVars {
        alignment,
        classification,
        norm,
        decoder,
        regularizer,
        total,
    })
}

impl ObjectiveVars {
    pub fn terms(&self, tape: &Tape) -> Result<LossTerms, MathError> {
        Ok(LossTerms {
            alignment: tape.scalar(self.alignment)?,
            classification: tape.scalar(self.classification)?,
            norm: tape.scalar(self.norm)?,
            decoder: tape.scalar(self.decoder)?,
            regularizer: tape.scalar(self.regularizer)?,
            total: tape.scalar(self.total)?,
        })
    }
}

/// `‖Va − Vb‖²_F`.
pub fn loss_alignment(va: &Matrix, vb: &Matrix) -> Result<f64, MathError> {
    Ok(va.sub(vb)?.frobenius_sq())
}

/// Mean softmax cross-entropy of the shared classifier on `[Va; Vb]`, each
/// row keeping its pair's label.
pub fn loss_classification(
    model: &EmbedModel,
    va: &Matrix,
    vb: &Matrix,
    labels: &[usize],
) -> Result<f64, MathError> {
    let mut tape = Tape::new();
    let vars = model.classifier.register(&mut tape);
    let a = tape.leaf(va.clone());
    let b = tape.leaf(vb.clone());
    let out = classification_var(&mut tape, model, &vars, a, b, labels)?;
    tape.scalar(out)
}

/// `‖Va‖²_F + ‖Vb‖²_F`.
pub fn loss_norm(va: &Matrix, vb: &Matrix) -> f64 {
    va.frobenius_sq() + vb.frobenius_sq()
}

/// `‖dec_ab(Va) − Zb‖²_F + ‖dec_ba(Vb) − Za‖²_F`.
pub fn loss_decoder(
    model: &EmbedModel,
    va: &Matrix,
    vb: &Matrix,
    za: &Matrix,
    zb: &Matrix,
) -> Result<f64, MathError> {
    let ab = model.decoder_ab.forward(va)?.sub(zb)?.frobenius_sq();
    let ba = model.decoder_ba.forward(vb)?.sub(za)?.frobenius_sq();
    Ok(ab + ba)
}

/// `R` over both encoders' weight matrices; biases are not penalized.
pub fn regularizer(model: &EmbedModel, alpha: f64, mode: RegularizerMode) -> f64 {
    model
        .encoder_a
        .layers
        .iter()
        .chain(&model.encoder_b.layers)
        .map(|l| match mode {
            RegularizerMode::Broadcast => l
                .weight
                .data()
                .iter()
                .map(|w| (w - alpha).powi(2))
                .sum::<f64>(),
            RegularizerMode::Norm => (l.weight.frobenius() - alpha).powi(2),
        })
        .sum()
}

/// Evaluates every term on one row-aligned batch. The plain `loss_*`
/// functions above compute the `Reduction::Sum` forms.
pub fn total_loss(
    model: &EmbedModel,
    za: &Matrix,
    zb: &Matrix,
    labels: &[usize],
    weights: &LossWeights,
    opts: TermOptions,
) -> Result<LossTerms, MathError> {
    let mut tape = Tape::new();
    let mv = model.register(&mut tape);
    objective(&mut tape, model, &mv, za, zb, labels, weights, opts)?.terms(&tape)
}
