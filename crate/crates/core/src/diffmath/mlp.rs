use rand::Rng;

use super::{leaky_relu, relu, MathError, Matrix, Tape, Var, LEAKY_SLOPE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::LeakyRelu),
            _ => None,
        }
    }

    fn apply(self, x: Matrix) -> Result<Matrix, MathError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => Ok(relu(&x)),
            Activation::LeakyRelu => leaky_relu(&x, LEAKY_SLOPE),
        }
    }

    fn apply_tape(self, tape: &mut Tape, x: Var) -> Result<Var, MathError> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
        }
    }
}

/// Fully connected layer `act(x·W + b)` with `W: in × out`, `b: 1 × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Matrix,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights, zero bias.
    pub fn glorot<R: Rng + ?Sized>(
        input: usize,
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (input + output) as f64).sqrt();
        Self {
            weight: Matrix::random_uniform(input, output, bound, rng),
            bias: Matrix::zeros(1, output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// `dims = [in, h1, …, out]`; every layer but the last uses `hidden`,
    /// the last uses `output`.
    pub fn new<R: Rng + ?Sized>(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        rng: &mut R,
    ) -> Self {
        assert!(
            dims.len() >= 2,
            "an MLP needs at least an input and an output width"
        );
        let n = dims.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let act = if i + 1 == n { output } else { hidden };
                Dense::glorot(dims[i], dims[i + 1], act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self, MathError> {
        if layers.is_empty() {
            return Err(MathError::EmptyShape { rows: 0, cols: 0 });
        }
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(MathError::ShapeMismatch {
                    op: "mlp",
                    left: pair[0].weight.shape(),
                    right: pair[1].weight.shape(),
                });
            }
        }
        for l in &layers {
            if l.bias.shape() != (1, l.output_dim()) {
                return Err(MathError::ShapeMismatch {
                    op: "mlp bias",
                    left: l.weight.shape(),
                    right: l.bias.shape(),
                });
            }
        }
        Ok(Self { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix, MathError> {
        let mut h = x.clone();
        for l in &self.layers {
            h = l.activation.apply(h.matmul(&l.weight)?.add_row(&l.bias)?)?;
        }
        Ok(h)
    }

    /// Records all parameters on `tape` as leaves: `[W0, b0, W1, b1, …]`.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.clone(), l.bias.clone()])
            .map(|m| tape.leaf(m))
            .collect()
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var, vars: &[Var]) -> Result<Var, MathError> {
        debug_assert_eq!(vars.len(), 2 * self.layers.len());
        let mut h = x;
        for (l, wb) in self.layers.iter().zip(vars.chunks_exact(2)) {
            let z = tape.matmul(h, wb[0])?;
            let z = tape.add_row(z, wb[1])?;
            h = l.activation.apply_tape(tape, z)?;
        }
        Ok(h)
    }

    pub fn params(&self) -> Vec<&Matrix> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn param_count(&self) -> usize {
        2 * self.layers.len()
    }
}
