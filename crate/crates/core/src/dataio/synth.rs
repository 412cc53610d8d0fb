use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataError, FeatureSet, Labels};
use crate::diffmath::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthRegime {
    PairedSingle,
    UnpairedMulti { max_labels: usize },
}

/// Class-conditional Gaussian clusters for two modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub dim_a: usize,
    pub dim_b: usize,
    /// Distance between class means in units of the (unit) intra-class std.
    pub separation: f64,
    pub seed: u64,
    pub regime: SynthRegime,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |m: String| Err(DataError::InvalidSpec(m));
        if self.classes < 2 {
            return bad(format!("classes = {}; need at least 2", self.classes));
        }
        if self.per_class < 2 {
            return bad(format!("per_class = {}; need at least 2", self.per_class));
        }
        if self.dim_a == 0 || self.dim_b == 0 {
            return bad("feature dimensions must be positive".into());
        }
        if !self.separation.is_finite() || self.separation < 0.0 {
            return bad(format!(
                "separation = {}; must be finite and non-negative",
                self.separation
            ));
        }
        if let SynthRegime::UnpairedMulti { max_labels } = self.regime {
            if max_labels == 0 || max_labels > self.classes {
                return bad(format!(
                    "max_labels = {max_labels}; must lie in 1..={}",
                    self.classes
                ));
            }
        }
        Ok(())
    }
}

/// `classes` means in `dim` dimensions with pairwise distance `separation`
/// (exact when `classes <= dim`, approximate otherwise).
fn class_means<R: Rng + ?Sized>(
    classes: usize,
    dim: usize,
    separation: f64,
    rng: &mut R,
) -> Vec<Vec<f64>> {
    let radius = separation / std::f64::consts::SQRT_2;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(classes);
    for _ in 0..classes {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if means.len() < dim {
            for m in &means {
                let dot: f64 = v.iter().zip(m).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(m) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        for x in &mut v {
            *x /= norm;
        }
        means.push(v);
    }
    means
        .into_iter()
        .map(|v| v.into_iter().map(|x| x * radius).collect())
        .collect()
}

fn sample_row<R: Rng + ?Sized>(center: &[f64], rng: &mut R, out: &mut Vec<f64>) {
    for &c in center {
        let noise: f64 = rng.sample(StandardNormal);
        // narrowed so CMFV round-trips are exact
        out.push((c + noise) as f32 as f64);
    }
}

fn mix(means: &[Vec<f64>], labels: &[usize]) -> Vec<f64> {
    let d = means[0].len();
    let mut out = vec![0.0; d];
    for &l in labels {
        for (o, m) in out.iter_mut().zip(&means[l]) {
            *o += m;
        }
    }
    let k = labels.len() as f64;
    out.iter_mut().for_each(|v| *v /= k);
    out
}

/// Generates modalities A and B.
///
/// Paired-single: row `i` of A and B share one label. Unpaired-multi: each
/// A-sample carries its own class plus up to `max_labels − 1` extra random
/// classes and is centred on the average of those class means; B stays
/// single-label. Sample order is shuffled (jointly for paired data).
pub fn synth_generate(spec: &SynthSpec) -> Result<(FeatureSet, FeatureSet), DataError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let c = spec.classes;
    let n = c * spec.per_class;
    let means_a = class_means(c, spec.dim_a, spec.separation, &mut rng);
    let means_b = class_means(c, spec.dim_b, spec.separation, &mut rng);

    let base: Vec<usize> = (0..n).map(|i| i / spec.per_class).collect();
    match spec.regime {
        SynthRegime::PairedSingle => {
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let labels: Vec<usize> = order.iter().map(|&i| base[i]).collect();
            let mut xa = Vec::with_capacity(n * spec.dim_a);
            let mut xb = Vec::with_capacity(n * spec.dim_b);
            for &l in &labels {
                sample_row(&means_a[l], &mut rng, &mut xa);
                sample_row(&means_b[l], &mut rng, &mut xb);
            }
            let a = FeatureSet::new(
                Matrix::new(n, spec.dim_a, xa)?,
                Labels::single(c, labels.clone())?,
                "A",
            )?;
            let b = FeatureSet::new(
                Matrix::new(n, spec.dim_b, xb)?,
                Labels::single(c, labels)?,
                "B",
            )?;
            Ok((a, b))
        }
        SynthRegime::UnpairedMulti { max_labels } => {
            let mut order_a: Vec<usize> = (0..n).collect();
            order_a.shuffle(&mut rng);
            let mut sets = Vec::with_capacity(n);
            let mut xa = Vec::with_capacity(n * spec.dim_a);
            for &i in &order_a {
                let own = base[i];
                let k = rng.random_range(1..=max_labels);
                let mut others: Vec<usize> = (0..c).filter(|&x| x != own).collect();
                others.shuffle(&mut rng);
                let mut set = vec![own];
                set.extend_from_slice(&others[..k - 1]);
                set.sort_unstable();
                sample_row(&mix(&means_a, &set), &mut rng, &mut xa);
                sets.push(set);
            }
            let mut order_b: Vec<usize> = (0..n).collect();
            order_b.shuffle(&mut rng);
            let labels_b: Vec<usize> = order_b.iter().map(|&i| base[i]).collect();
            let mut xb = Vec::with_capacity(n * spec.dim_b);
            for &l in &labels_b {
                sample_row(&means_b[l], &mut rng, &mut xb);
            }
            let a = FeatureSet::new(
                Matrix::new(n, spec.dim_a, xa)?,
                Labels::multi(c, sets)?,
                "A",
            )?;
            let b = FeatureSet::new(
                Matrix::new(n, spec.dim_b, xb)?,
                Labels::single(c, labels_b)?,
                "B",
            )?;
            Ok((a, b))
        }
    }
}
