use super::{MathError, Matrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates, one pair per parameter matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    shapes: Vec<(usize, usize)>,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Matrix>, config: AdamConfig) -> Self {
        let shapes: Vec<_> = params.into_iter().map(Matrix::shape).collect();
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect(),
            v: shapes.iter().map(|(r, c)| vec![0.0; r * c]).collect(),
            shapes,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update applied in place.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<(), MathError> {
    if params.len() != state.shapes.len() || grads.len() != state.shapes.len() {
        return Err(MathError::ShapeMismatch {
            op: "adam_step",
            left: (params.len(), 0),
            right: (grads.len(), state.shapes.len()),
        });
    }
    for ((p, g), &shape) in params.iter().zip(grads).zip(&state.shapes) {
        if p.shape() != shape || g.shape() != shape {
            return Err(MathError::ShapeMismatch {
                op: "adam_step",
                left: p.shape(),
                right: g.shape(),
            });
        }
    }
    state.step += 1;
    let AdamConfig { beta1, beta2, eps } = state.config;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        let g = g.data();
        p.update(|i, w| {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        })?;
    }
    Ok(())
}
