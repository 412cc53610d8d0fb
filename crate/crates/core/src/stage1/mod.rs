//! Domain classifier pretraining.
//!
//! Each modality gets its own MLP classifier whose penultimate activations
//! `Z` become the intermediate representation fed to the joint embedding.
//! The training loss is classification cross-entropy plus the soft
//! orthogonality penalty `‖ZᵀZ − I‖²_F` on the mini-batch Gram matrix.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::{FeatureSet, Labels};
use crate::diffmath::{
    adam_step, Activation, AdamConfig, AdamState, MathError, Matrix, Mlp, Tape, Var,
};
use crate::error::TrainError;

/// Target matrix inside the orthogonality penalty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrthoTarget {
    /// `d_z × d_z` identity.
    Identity,
    /// `d_z × d_z` all-ones matrix.
    Ones,
}

impl OrthoTarget {
    pub fn matrix(self, dim: usize) -> Matrix {
        match self {
            OrthoTarget::Identity => Matrix::identity(dim),
            OrthoTarget::Ones => Matrix::filled(dim, dim, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Config {
    /// Hidden widths between the input and the `Z` layer.
    pub hidden: Vec<usize>,
    pub z_dim: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub ortho_target: OrthoTarget,
    pub activation: Activation,
    /// Activation on the `Z` layer itself. Linear by default: with ReLU the
    /// penalty drives every unit to zero before the classifier can learn.
    pub z_activation: Activation,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            hidden: vec![512],
            z_dim: 128,
            dropout: 0.5,
            epochs: 400,
            batch_size: 64,
            lr: 0.01,
            seed: 0,
            ortho_target: OrthoTarget::Identity,
            activation: Activation::Relu,
            z_activation: Activation::Identity,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.z_dim == 0 || self.hidden.contains(&0) {
            return bad("layer widths must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
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

/// Feature extractor (input → … → Z) followed by a linear head.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNet {
    pub extractor: Mlp,
    pub head: Mlp,
    pub dropout: f64,
    pub multi_label: bool,
}

/// Loss components of one evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Terms {
    pub ce: f64,
    pub ortho: f64,
    pub total: f64,
}

/// Per-epoch means over mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub ce: f64,
    pub ortho: f64,
    pub total: f64,
}

impl ClassifierNet {
    pub fn new<R: Rng + ?Sized>(
        input: usize,
        classes: usize,
        multi_label: bool,
        config: &Stage1Config,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![input];
        dims.extend_from_slice(&config.hidden);
        dims.push(config.z_dim);
        let extractor = Mlp::new(&dims, config.activation, config.z_activation, rng);
        let head = Mlp::new(
            &[config.z_dim, classes],
            Activation::Identity,
            Activation::Identity,
            rng,
        );
        Self {
            extractor,
            head,
            dropout: config.dropout,
            multi_label,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn z_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn classes(&self) -> usize {
        self.head.output_dim()
    }

    pub fn logits(&self, x: &Matrix) -> Result<Matrix, MathError> {
        self.head.forward(&self.extractor.forward(x)?)
    }

    /// Fraction of correct decisions: arg-max for single-label nets,
    /// per-label sign of the logit for multi-label nets.
    pub fn accuracy(&self, x: &Matrix, labels: &Labels) -> Result<f64, MathError> {
        let logits = self.logits(x)?;
        let c = logits.cols();
        let mut correct = 0usize;
        let mut total = 0usize;
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let set = labels.set(i);
            if self.multi_label {
                for (j, &v) in row.iter().enumerate() {
                    correct += usize::from((v > 0.0) == set.contains(&j));
                }
                total += c;
            } else {
                let arg = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |(bi, bv), (j, &v)| {
                        if v > bv {
                            (j, v)
                        } else {
                            (bi, bv)
                        }
                    })
                    .0;
                correct += usize::from(set.contains(&arg));
                total += 1;
            }
        }
        Ok(correct as f64 / total as f64)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        let mut p = self.extractor.params();
        p.extend(self.head.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.extractor.params_mut();
        p.extend(self.head.params_mut());
        p
    }
}

/// Recorded objective pieces.
pub struct Stage1Vars {
    pub ce: Var,
    pub ortho: Var,
    pub total: Var,
}

/// Builds the pretraining objective on `tape`. `dropout_mask`, when given,
/// multiplies the classifier's view of `Z`; the penalty always uses the
/// unmasked `Z` (the representation later extracted).
pub fn stage1_objective(
    tape: &mut Tape,
    net: &ClassifierNet,
    x: Var,
    vars: &[Var],
    labels: &Labels,
    dropout_mask: Option<Matrix>,
    target: &Matrix,
) -> Result<Stage1Vars, MathError> {
    let (ex_vars, head_vars) = vars.split_at(net.extractor.param_count());
    let z = net.extractor.forward_tape(tape, x, ex_vars)?;
    let z_cls = match dropout_mask {
        Some(mask) => tape.mul_const(z, mask)?,
        None => z,
    };
    let logits = net.head.forward_tape(tape, z_cls, head_vars)?;
    let ce = match labels {
        Labels::Single { indices, .. } => tape.softmax_cross_entropy(logits, indices)?,
        Labels::Multi { .. } => tape.sigmoid_bce(logits, &labels.multi_hot())?,
    };
    let gram = tape.t_matmul(z, z)?;
    let diff = tape.sub_const(gram, target)?;
    let ortho = tape.frobenius_sq(diff)?;
    let total = tape.weighted_sum(&[(ce, 1.0), (ortho, 1.0)])?;
    Ok(Stage1Vars { ce, ortho, total })
}

fn register(tape: &mut Tape, net: &ClassifierNet) -> Vec<Var> {
    let mut v = net.extractor.register(tape);
    v.extend(net.head.register(tape));
    v
}

fn check_labels(net: &ClassifierNet, labels: &Labels, rows: usize) -> Result<(), MathError> {
    if labels.classes() != net.classes() {
        return Err(MathError::LabelOutOfRange {
            label: labels.classes().saturating_sub(1),
            classes: net.classes(),
        });
    }
    if labels.len() != rows {
        return Err(MathError::ShapeMismatch {
            op: "stage1 labels",
            left: (rows, net.input_dim()),
            right: (labels.len(), 1),
        });
    }
    Ok(())
}

/// Evaluates the objective with dropout disabled.
pub fn stage1_loss(
    net: &ClassifierNet,
    x: &Matrix,
    labels: &Labels,
    target: OrthoTarget,
) -> Result<Stage1Terms, MathError> {
    check_labels(net, labels, x.rows())?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let vars = register(&mut tape, net);
    let t = target.matrix(net.z_dim());
    let o = stage1_objective(&mut tape, net, xv, &vars, labels, None, &t)?;
    Ok(Stage1Terms {
        ce: tape.scalar(o.ce)?,
        ortho: tape.scalar(o.ortho)?,
        total: tape.scalar(o.total)?,
    })
}

fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Option<Matrix> {
    if p == 0.0 {
        return None;
    }
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    Some(Matrix::new(rows, cols, data).expect("mask is finite"))
}

/// Trains a classifier on `fs` (features should already be normalized).
pub fn pretrain_domain(
    fs: &FeatureSet,
    config: &Stage1Config,
) -> Result<(ClassifierNet, Vec<Stage1Epoch>), TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut net = ClassifierNet::new(
        fs.dim(),
        fs.classes(),
        fs.labels.is_multi(),
        config,
        &mut rng,
    );
    let mut adam = AdamState::new(net.params(), AdamConfig::default());
    let target = config.ortho_target.matrix(config.z_dim);
    let n = fs.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        let (mut ce_sum, mut ortho_sum, mut total_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let x = fs.features.select_rows(chunk)?;
            let labels = fs.labels.subset(chunk);
            let mask = dropout_mask(chunk.len(), config.z_dim, config.dropout, &mut rng);

            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let vars = register(&mut tape, &net);
            let o = stage1_objective(&mut tape, &net, xv, &vars, &labels, mask, &target)
                .map_err(TrainError::at_epoch(epoch))?;
            let grads = tape
                .backward(o.total)
                .map_err(TrainError::at_epoch(epoch))?;
            let g: Vec<Matrix> = vars
                .iter()
                .map(|&v| grads.wrt(v))
                .collect::<Result<_, _>>()?;
            adam_step(&mut net.params_mut(), &g, &mut adam, config.lr)
                .map_err(TrainError::at_epoch(epoch))?;

            ce_sum += tape.scalar(o.ce)?;
            ortho_sum += tape.scalar(o.ortho)?;
            total_sum += tape.scalar(o.total)?;
            batches += 1;
        }
        let k = batches as f64;
        let rec = Stage1Epoch {
            epoch,
            ce: ce_sum / k,
            ortho: ortho_sum / k,
            total: total_sum / k,
        };
        if !rec.total.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch });
        }
        history.push(rec);
    }
    Ok((net, history))
}

/// Penultimate activations `Z` with dropout disabled.
pub fn extract_intermediate(net: &ClassifierNet, features: &Matrix) -> Result<Matrix, MathError> {
    net.extractor.forward(features)
}
