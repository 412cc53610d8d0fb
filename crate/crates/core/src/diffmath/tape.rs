// Reverse-mode differentiation over a linear tape.
//
// Every primitive appends one node holding its forward value and the handles
// of its operands. `backward` walks the nodes from the output down to index 0,
// so replay order is the exact reverse of recording order, and gradients of a
// node used several times accumulate by addition.

use std::sync::atomic::{AtomicU64, Ordering};

use super::{MathError, Matrix};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(0);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    TMatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Shift(Var),
    MulConst(Var, Matrix),
    Relu(Var),
    LeakyRelu(Var, f64),
    VStack(Var, Var),
    Sqrt(Var),
    FrobeniusSq(Var),
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix,
    },
    SigmoidBce {
        logits: Var,
        targets: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Single-threaded record of primitive operations for one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn scalar_matrix(v: f64, op: &'static str) -> Result<Matrix, MathError> {
    if !v.is_finite() {
        return Err(MathError::NonFinite { op });
    }
    Ok(Matrix::from_parts(1, 1, vec![v]))
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn check(&self, v: Var) -> Result<(), MathError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(MathError::NotOnTape);
        }
        Ok(())
    }

    fn val(&self, v: Var) -> Result<&Matrix, MathError> {
        self.check(v)?;
        Ok(&self.nodes[v.index].value)
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.val(v).expect("variable belongs to another tape")
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64, MathError> {
        let m = self.val(v)?;
        if m.shape() != (1, 1) {
            return Err(MathError::NotScalar { shape: m.shape() });
        }
        Ok(m.get(0, 0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.val(a)?.matmul(self.val(b)?)?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `aᵀ · b`.
    pub fn t_matmul(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.val(a)?.t_matmul(self.val(b)?)?;
        Ok(self.push(out, Op::TMatMul(a, b)))
    }

    /// Broadcast-adds a `1 × cols` bias to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, MathError> {
        let out = self.val(x)?.add_row(self.val(bias)?)?;
        Ok(self.push(out, Op::AddRow(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.val(a)?.add(self.val(b)?)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.val(a)?.sub(self.val(b)?)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, MathError> {
        let out = self.val(a)?.scale(c)?;
        Ok(self.push(out, Op::Scale(a, c)))
    }

    /// `a − c` for a constant matrix `c` of the same shape.
    pub fn sub_const(&mut self, a: Var, c: &Matrix) -> Result<Var, MathError> {
        let out = self.val(a)?.sub(c)?;
        Ok(self.push(out, Op::Shift(a)))
    }

    /// `a + c` entrywise for a scalar constant.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, MathError> {
        let out = self.val(a)?.map("add_scalar", |v| v + c)?;
        Ok(self.push(out, Op::Shift(a)))
    }

    /// Entrywise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Matrix) -> Result<Var, MathError> {
        let out = self.val(a)?.hadamard(&c)?;
        Ok(self.push(out, Op::MulConst(a, c)))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, MathError> {
        let out = relu(self.val(a)?);
        Ok(self.push(out, Op::Relu(a)))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var, MathError> {
        let out = leaky_relu(self.val(a)?, slope)?;
        Ok(self.push(out, Op::LeakyRelu(a, slope)))
    }

    pub fn vstack(&mut self, a: Var, b: Var) -> Result<Var, MathError> {
        let out = self.val(a)?.vstack(self.val(b)?)?;
        Ok(self.push(out, Op::VStack(a, b)))
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, MathError> {
        let x = self.val(a)?;
        if x.data().iter().any(|&v| v < 0.0) {
            return Err(MathError::Domain { op: "sqrt" });
        }
        let out = x.map("sqrt", f64::sqrt)?;
        Ok(self.push(out, Op::Sqrt(a)))
    }

    /// Sum of squared entries, as a `1 × 1` node.
    pub fn frobenius_sq(&mut self, a: Var) -> Result<Var, MathError> {
        let out = scalar_matrix(self.val(a)?.frobenius_sq(), "frobenius_sq")?;
        Ok(self.push(out, Op::FrobeniusSq(a)))
    }

    /// Mean softmax cross-entropy of `logits` (n × C) against class indices.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        labels: &[usize],
    ) -> Result<Var, MathError> {
        let x = self.val(logits)?;
        let (loss, probs) = softmax_ce_forward(x, labels)?;
        let out = scalar_matrix(loss, "softmax_cross_entropy")?;
        Ok(self.push(
            out,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Mean elementwise binary cross-entropy with logits.
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &Matrix) -> Result<Var, MathError> {
        let x = self.val(logits)?;
        let loss = sigmoid_bce_forward(x, targets)?;
        let out = scalar_matrix(loss, "sigmoid_bce")?;
        Ok(self.push(
            out,
            Op::SigmoidBce {
                logits,
                targets: targets.clone(),
            },
        ))
    }

    /// `Σ cᵢ·sᵢ` over `1 × 1` nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, MathError> {
        let mut total = 0.0;
        for &(v, c) in terms {
            total += c * self.scalar(v)?;
        }
        let out = scalar_matrix(total, "weighted_sum")?;
        Ok(self.push(out, Op::WeightedSum(terms.to_vec())))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, output: Var) -> Result<Gradients, MathError> {
        self.check(output)?;
        let out_shape = self.nodes[output.index].value.shape();
        if out_shape != (1, 1) {
            return Err(MathError::NotScalar { shape: out_shape });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.index] = Some(vec![1.0]);
        let mut visited = Vec::new();

        for i in (0..=output.index).rev() {
            let Some(g) = grads[i].take() else { continue };
            visited.push(i);
            let node = &self.nodes[i];
            let (rows, cols) = node.value.shape();
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let g = Matrix::from_parts(rows, cols, g.clone());
                    let ga = g.matmul_t(&self.nodes[b.index].value)?;
                    let gb = self.nodes[a.index].value.t_matmul(&g)?;
                    accumulate(&mut grads, a.index, ga.data());
                    accumulate(&mut grads, b.index, gb.data());
                }
                Op::TMatMul(a, b) => {
                    // out = aᵀb: d a = b gᵀ, d b = a g
                    let g = Matrix::from_parts(rows, cols, g.clone());
                    let ga = self.nodes[b.index].value.matmul_t(&g)?;
                    let gb = self.nodes[a.index].value.matmul(&g)?;
                    accumulate(&mut grads, a.index, ga.data());
                    accumulate(&mut grads, b.index, gb.data());
                }
                Op::AddRow(x, bias) => {
                    accumulate(&mut grads, x.index, &g);
                    let gb = Matrix::from_parts(rows, cols, g.clone()).sum_rows();
                    accumulate(&mut grads, bias.index, gb.data());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, a.index, &g);
                    accumulate(&mut grads, b.index, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, a.index, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, b.index, &neg);
                }
                Op::Scale(a, c) => {
                    let s: Vec<f64> = g.iter().map(|v| v * c).collect();
                    accumulate(&mut grads, a.index, &s);
                }
                Op::Shift(a) => accumulate(&mut grads, a.index, &g),
                Op::MulConst(a, c) => {
                    let s: Vec<f64> = g.iter().zip(c.data()).map(|(v, m)| v * m).collect();
                    accumulate(&mut grads, a.index, &s);
                }
                Op::Relu(a) => {
                    let x = self.nodes[a.index].value.data();
                    let s: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(v, &x)| if x > 0.0 { *v } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, a.index, &s);
                }
                Op::LeakyRelu(a, slope) => {
                    let x = self.nodes[a.index].value.data();
                    let s: Vec<f64> = g
                        .iter()
                        .zip(x)
                        .map(|(v, &x)| if x > 0.0 { *v } else { slope * v })
                        .collect();
                    accumulate(&mut grads, a.index, &s);
                }
                Op::VStack(a, b) => {
                    let split = self.nodes[a.index].value.data().len();
                    accumulate(&mut grads, a.index, &g[..split]);
                    accumulate(&mut grads, b.index, &g[split..]);
                }
                Op::Sqrt(a) => {
                    let y = node.value.data();
                    let s: Vec<f64> = g.iter().zip(y).map(|(v, y)| 0.5 * v / y).collect();
                    accumulate(&mut grads, a.index, &s);
                }
                Op::FrobeniusSq(a) => {
                    let x = self.nodes[a.index].value.data();
                    let s: Vec<f64> = x.iter().map(|x| 2.0 * x * g[0]).collect();
                    accumulate(&mut grads, a.index, &s);
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    probs,
                } => {
                    let n = labels.len() as f64;
                    let c = probs.cols();
                    let mut s = probs.data().to_vec();
                    for (r, &l) in labels.iter().enumerate() {
                        s[r * c + l] -= 1.0;
                    }
                    for v in &mut s {
                        *v *= g[0] / n;
                    }
                    accumulate(&mut grads, logits.index, &s);
                }
                Op::SigmoidBce { logits, targets } => {
                    let x = self.nodes[logits.index].value.data();
                    let count = x.len() as f64;
                    let s: Vec<f64> = x
                        .iter()
                        .zip(targets.data())
                        .map(|(&x, &t)| (sigmoid(x) - t) * g[0] / count)
                        .collect();
                    accumulate(&mut grads, logits.index, &s);
                }
                Op::WeightedSum(terms) => {
                    for &(v, c) in terms {
                        accumulate(&mut grads, v.index, &[c * g[0]]);
                    }
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }

        let mut out = Vec::with_capacity(self.nodes.len());
        for (node, g) in self.nodes.iter().zip(grads) {
            out.push(match g {
                Some(g) if matches!(node.op, Op::Leaf) => {
                    let (r, c) = node.value.shape();
                    Some(
                        Matrix::new(r, c, g)
                            .map_err(|_| MathError::NonFinite { op: "backward" })?,
                    )
                }
                _ => None,
            });
        }
        Ok(Gradients {
            tape: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape()).collect(),
            grads: out,
            visited,
        })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], index: usize, g: &[f64]) {
    match &mut grads[index] {
        Some(acc) => {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradients of a scalar with respect to every leaf of a tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    shapes: Vec<(usize, usize)>,
    grads: Vec<Option<Matrix>>,
    visited: Vec<usize>,
}

impl Gradients {
    /// Gradient for a leaf; zeros when the leaf did not influence the output.
    pub fn wrt(&self, v: Var) -> Result<Matrix, MathError> {
        if v.tape != self.tape || v.index >= self.shapes.len() {
            return Err(MathError::NotOnTape);
        }
        Ok(match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.index];
                Matrix::zeros(r, c)
            }
        })
    }

    /// Node indices in the order the reverse pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn relu(x: &Matrix) -> Matrix {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Matrix::from_parts(x.rows(), x.cols(), data)
}

pub fn leaky_relu(x: &Matrix, slope: f64) -> Result<Matrix, MathError> {
    x.map("leaky_relu", |v| if v > 0.0 { v } else { slope * v })
}

fn softmax_ce_forward(x: &Matrix, labels: &[usize]) -> Result<(f64, Matrix), MathError> {
    let (n, c) = x.shape();
    if labels.len() != n {
        return Err(MathError::ShapeMismatch {
            op: "softmax_cross_entropy",
            left: x.shape(),
            right: (labels.len(), 1),
        });
    }
    let mut probs = vec![0.0; n * c];
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= c {
            return Err(MathError::LabelOutOfRange { label, classes: c });
        }
        let row = x.row(r);
        let (arg, max) =
            row.iter()
                .copied()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |(ai, m), (i, v)| if v > m { (i, v) } else { (ai, m) },
                );
        // the arg-max term contributes exactly 1; ln_1p keeps tiny losses accurate
        let rest: f64 = row
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != arg)
            .map(|(_, &v)| (v - max).exp())
            .sum();
        let lse = max + rest.ln_1p();
        for (p, &v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
        total += (max - row[label]) + rest.ln_1p();
    }
    Ok((total / n as f64, Matrix::from_parts(n, c, probs)))
}

fn sigmoid_bce_forward(x: &Matrix, targets: &Matrix) -> Result<f64, MathError> {
    if x.shape() != targets.shape() {
        return Err(MathError::ShapeMismatch {
            op: "sigmoid_bce",
            left: x.shape(),
            right: targets.shape(),
        });
    }
    let mut total = 0.0;
    for (&z, &t) in x.data().iter().zip(targets.data()) {
        if t != 0.0 && t != 1.0 {
            return Err(MathError::NonBinaryTarget { value: t });
        }
        total += z.max(0.0) - z * t + (-z.abs()).exp().ln_1p();
    }
    Ok(total / x.data().len() as f64)
}

/// Mean softmax cross-entropy, evaluated without recording.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<f64, MathError> {
    softmax_ce_forward(logits, labels).map(|(l, _)| l)
}

/// Mean binary cross-entropy with logits, evaluated without recording.
pub fn sigmoid_bce(logits: &Matrix, targets: &Matrix) -> Result<f64, MathError> {
    sigmoid_bce_forward(logits, targets)
}

pub fn frobenius_sq(x: &Matrix) -> f64 {
    x.frobenius_sq()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn relu_examples() {
        assert_eq!(
            relu(&Matrix::from_rows(&[[-1.0, 2.0]])),
            Matrix::from_rows(&[[0.0, 2.0]])
        );
        assert_eq!(relu(&Matrix::zeros(2, 2)), Matrix::zeros(2, 2));
        let l = leaky_relu(&Matrix::from_rows(&[[-10.0]]), 0.01).unwrap();
        assert!((l.get(0, 0) + 0.1).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::filled(3, 4, 0.7);
        let l = softmax_cross_entropy(&uniform, &[0, 1, 3]).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        let confident = Matrix::from_rows(&[[10.0, -10.0]]);
        let l = softmax_cross_entropy(&confident, &[0]).unwrap();
        let expected = (-20f64).exp().ln_1p();
        assert!((l - expected).abs() < 1e-22);
        assert!((l - 2.06e-9).abs() < 1e-11);

        let one = Matrix::from_rows(&[[0.3, -1.2, 2.0]]);
        let two = Matrix::from_rows(&[[0.3, -1.2, 2.0], [0.3, -1.2, 2.0]]);
        let a = softmax_cross_entropy(&one, &[2]).unwrap();
        let b = softmax_cross_entropy(&two, &[2, 2]).unwrap();
        assert!((a - b).abs() < 1e-15);

        assert!(matches!(
            softmax_cross_entropy(&one, &[3]),
            Err(MathError::LabelOutOfRange {
                label: 3,
                classes: 3
            })
        ));
    }

    #[test]
    fn bce_examples() {
        let zeros = Matrix::zeros(2, 3);
        let t = Matrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 0.0, 1.0]]);
        assert!((sigmoid_bce(&zeros, &t).unwrap() - 2f64.ln()).abs() < 1e-15);

        let l = sigmoid_bce(&Matrix::from_rows(&[[20.0]]), &Matrix::from_rows(&[[1.0]])).unwrap();
        assert!((l - (-20f64).exp().ln_1p()).abs() < 1e-22);
        assert!((l - 2.06e-9).abs() < 1e-10);

        let x = Matrix::from_rows(&[[0.4, -2.0, 3.5]]);
        let t = Matrix::from_rows(&[[1.0, 0.0, 0.0]]);
        let flipped_t = Matrix::from_rows(&[[0.0, 1.0, 1.0]]);
        let a = sigmoid_bce(&x, &t).unwrap();
        let b = sigmoid_bce(&x.scale(-1.0).unwrap(), &flipped_t).unwrap();
        assert!((a - b).abs() < 1e-15);

        assert!(matches!(
            sigmoid_bce(&x, &Matrix::from_rows(&[[0.5, 0.0, 1.0]])),
            Err(MathError::NonBinaryTarget { .. })
        ));
        assert!(sigmoid_bce(&x, &zeros).is_err());
    }

    #[test]
    fn frobenius_examples() {
        assert_eq!(frobenius_sq(&Matrix::zeros(2, 2)), 0.0);
        assert_eq!(frobenius_sq(&Matrix::from_rows(&[[3.0, 4.0]])), 25.0);
        let m = Matrix::from_rows(&[[1.5, -2.0], [0.25, 3.0]]);
        let scaled = m.scale(3.0).unwrap();
        assert!((frobenius_sq(&scaled) - 9.0 * frobenius_sq(&m)).abs() < 1e-12);
    }

    #[test]
    fn frobenius_gradient_is_twice_input() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]));
        let l = tape.frobenius_sq(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(
            g.wrt(x).unwrap(),
            Matrix::from_rows(&[[2.0, -4.0], [1.0, 6.0]])
        );
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[[1.0, 2.0]]));
        let unused = tape.leaf(Matrix::from_rows(&[[5.0], [6.0]]));
        let l = tape.frobenius_sq(x).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(unused).unwrap(), Matrix::zeros(2, 1));
    }

    #[test]
    fn reused_value_accumulates() {
        // l = ‖x‖² + ‖x‖² + ‖x‖² has gradient 6x
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[[1.0, -1.0]]));
        let f = tape.frobenius_sq(x).unwrap();
        let l = tape.weighted_sum(&[(f, 1.0), (f, 1.0), (f, 1.0)]).unwrap();
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap(), Matrix::from_rows(&[[6.0, -6.0]]));
    }

    #[test]
    fn visit_order_is_reverse_of_recording() {
        let mut tape = Tape::new();
        let x = tape.leaf(Matrix::from_rows(&[[1.0, 2.0]]));
        let w = tape.leaf(Matrix::from_rows(&[[1.0], [0.5]]));
        let y = tape.matmul(x, w).unwrap();
        let r = tape.relu(y).unwrap();
        let l = tape.frobenius_sq(r).unwrap();
        let g = tape.backward(l).unwrap();
        let order = g.visit_order();
        assert_eq!(order, &[4, 3, 2, 1, 0]);
    }

    #[test]
    fn foreign_or_non_scalar_output_is_rejected() {
        let mut a = Tape::new();
        let mut b = Tape::new();
        let x = a.leaf(Matrix::zeros(1, 1));
        let _ = b.leaf(Matrix::zeros(1, 1));
        assert!(matches!(b.backward(x), Err(MathError::NotOnTape)));
        let m = a.leaf(Matrix::zeros(2, 2));
        assert!(matches!(a.backward(m), Err(MathError::NotScalar { .. })));
    }

    #[test]
    fn sum_of_losses_backward_is_sum_of_backwards() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xm = Matrix::random_uniform(4, 3, 1.0, &mut rng);
        let wm = Matrix::random_uniform(3, 2, 1.0, &mut rng);
        let build = |which: u8| {
            let mut t = Tape::new();
            let x = t.leaf(xm.clone());
            let w = t.leaf(wm.clone());
            let l1 = t.frobenius_sq(x).unwrap();
            let p = t.matmul(x, w).unwrap();
            let l2 = t.softmax_cross_entropy(p, &[0, 1, 1, 0]).unwrap();
            let out = match which {
                1 => t.weighted_sum(&[(l1, 1.0)]).unwrap(),
                2 => t.weighted_sum(&[(l2, 1.0)]).unwrap(),
                _ => t.weighted_sum(&[(l1, 1.0), (l2, 1.0)]).unwrap(),
            };
            let g = t.backward(out).unwrap();
            (g.wrt(x).unwrap(), g.wrt(w).unwrap())
        };
        let (gx1, gw1) = build(1);
        let (gx2, gw2) = build(2);
        let (gx, gw) = build(0);
        assert_eq!(gx, gx2.add(&gx1).unwrap());
        assert_eq!(gw, gw1.add(&gw2).unwrap());
    }
}
