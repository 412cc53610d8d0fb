use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{objective, EmbedConfig, EmbedModel, LossWeights};
use crate::dataio::{batches, make_pairs, FeatureSet, Regime};
use crate::diffmath::{adam_step, AdamConfig, AdamState, Matrix, Tape};
use crate::error::TrainError;

/// Per-epoch batch means of the unweighted terms and the weighted total.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct EmbedEpoch {
    pub epoch: usize,
    pub alignment: f64,
    pub classification: f64,
    pub norm: f64,
    pub decoder: f64,
    pub regularizer: f64,
    pub total: f64,
}

/// Mini-batch Adam over all five parameter groups.
///
/// Unpaired data is re-paired by label at the start of every epoch.
/// Training stops at the epoch budget or when early stopping triggers.
/// With early stopping enabled the returned model is the one from the
/// epoch with the lowest total, not the last.
pub fn train_embedding(
    za: &FeatureSet,
    zb: &FeatureSet,
    regime: Regime,
    weights: &LossWeights,
    config: &EmbedConfig,
) -> Result<(EmbedModel, Vec<EmbedEpoch>), TrainError> {
    weights.validate()?;
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = EmbedModel::new(za.dim(), zb.dim(), za.classes(), config, &mut rng);
    let mut adam = AdamState::new(model.params(), AdamConfig::default());
    let mut history = Vec::with_capacity(config.epochs);
    let mut best = f64::INFINITY;
    let mut stale = 0usize;
    let mut kept: Option<EmbedModel> = None;

    for epoch in 0..config.epochs {
        let pairs = make_pairs(za, zb, regime, rng.random())?;
        if pairs.is_empty() {
            return Err(TrainError::EmptyPairing);
        }
        let mut sums = [0.0f64; 6];
        let mut count = 0usize;
        for batch in batches(
            &pairs,
            &za.features,
            &zb.features,
            config.batch_size,
            &mut rng,
        )? {
            let mut tape = Tape::new();
            let mv = model.register(&mut tape);
            let obj = objective(
                &mut tape,
                &model,
                &mv,
                &batch.za,
                &batch.zb,
                &batch.labels,
                weights,
                config.terms,
            )
            .map_err(TrainError::at_epoch(epoch))?;
            let t = obj.terms(&tape)?;
            if !t.total.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            let grads = tape
                .backward(obj.total)
                .map_err(TrainError::at_epoch(epoch))?;
            let g: Vec<Matrix> = mv
                .all()
                .iter()
                .map(|&v| grads.wrt(v))
                .collect::<Result<_, _>>()?;
            adam_step(&mut model.params_mut(), &g, &mut adam, config.lr)
                .map_err(TrainError::at_epoch(epoch))?;
            for (s, v) in sums.iter_mut().zip([
                t.alignment,
                t.classification,
                t.norm,
                t.decoder,
                t.regularizer,
                t.total,
            ]) {
                *s += v;
            }
            count += 1;
        }
        let k = count as f64;
        let rec = EmbedEpoch {
            epoch,
            alignment: sums[0] / k,
            classification: sums[1] / k,
            norm: sums[2] / k,
            decoder: sums[3] / k,
            regularizer: sums[4] / k,
            total: sums[5] / k,
        };
        history.push(rec);

        if config.early_stop_patience > 0 {
            if best.is_infinite() || rec.total < best - config.early_stop_tol * best.abs() {
                best = rec.total;
                stale = 0;
                kept = Some(model.clone());
            } else {
                stale += 1;
                if stale >= config.early_stop_patience {
                    break;
                }
            }
        }
    }
    Ok((kept.unwrap_or(model), history))
}

/// Columns: epoch, L2, L3, L4, L5, R, total.
pub fn write_history_csv(history: &[EmbedEpoch], path: impl AsRef<Path>) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{normalize, synth_generate, SynthRegime, SynthSpec};

    fn paired() -> (FeatureSet, FeatureSet) {
        let (a, b) = synth_generate(&SynthSpec {
            classes: 8,
            per_class: 30,
            dim_a: 32,
            dim_b: 16,
            separation: 10.0,
            seed: 6,
            regime: SynthRegime::PairedSingle,
        })
        .unwrap();
        (normalize(&a).unwrap().0, normalize(&b).unwrap().0)
    }

    fn config(epochs: usize) -> EmbedConfig {
        EmbedConfig {
            d_v: 32,
            epochs,
            seed: 2,
            ..EmbedConfig::default()
        }
    }

    #[test]
    fn total_decreases_over_first_ten_epochs() {
        let (a, b) = paired();
        let (_, hist) = train_embedding(
            &a,
            &b,
            Regime::Paired,
            &LossWeights::dsrsid_like(0.001),
            &config(10),
        )
        .unwrap();
        assert_eq!(hist.len(), 10);
        for w in hist.windows(2) {
            assert!(w[1].total < w[0].total, "{} -> {}", w[0].total, w[1].total);
        }
    }

    #[test]
    fn zero_lambda5_removes_regularizer_from_total() {
        let (a, b) = paired();
        let w = LossWeights {
            regularizer: 0.0,
            ..LossWeights::dsrsid_like(1.0)
        };
        let (_, hist) = train_embedding(&a, &b, Regime::Paired, &w, &config(2)).unwrap();
        for h in &hist {
            assert!(h.regularizer > 0.0);
            let sum = h.alignment + h.classification + h.norm + h.decoder;
            assert!((h.total - sum).abs() <= 1e-12 * sum);
        }
    }

    #[test]
    fn identical_seeds_give_identical_models() {
        let (a, b) = paired();
        let w = LossWeights::merced_like();
        let r1 = train_embedding(&a, &b, Regime::Unpaired, &w, &config(2)).unwrap();
        let r2 = train_embedding(&a, &b, Regime::Unpaired, &w, &config(2)).unwrap();
        assert_eq!(r1, r2);
    }

    #[test]
    fn early_stop_ends_a_flat_run() {
        let (a, b) = paired();
        let w = LossWeights::from_array([0.0; 6]);
        let mut cfg = config(100);
        cfg.early_stop_patience = 3;
        let (_, hist) = train_embedding(&a, &b, Regime::Paired, &w, &cfg).unwrap();
        // all-zero objective never improves on the first epoch
        assert_eq!(hist.len(), 4);
    }

    #[test]
    fn early_stop_keeps_lowest_total_epoch() {
        let (a, b) = paired();
        let w = LossWeights::dsrsid_like(1.0);
        let mut cfg = config(12);
        cfg.early_stop_patience = 12;
        cfg.early_stop_tol = 0.0;
        let (kept, hist) = train_embedding(&a, &b, Regime::Paired, &w, &cfg).unwrap();
        let best = hist
            .iter()
            .min_by(|x, y| x.total.total_cmp(&y.total))
            .unwrap()
            .epoch;
        cfg.epochs = best + 1;
        cfg.early_stop_patience = 0;
        let (truncated, _) = train_embedding(&a, &b, Regime::Paired, &w, &cfg).unwrap();
        assert_eq!(kept, truncated);
    }

    #[test]
    fn history_csv_has_expected_columns() {
        let (a, b) = paired();
        let (_, hist) = train_embedding(
            &a,
            &b,
            Regime::Paired,
            &LossWeights::dsrsid_like(1.0),
            &config(2),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        write_history_csv(&hist, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,alignment,classification,norm,decoder,regularizer,total"
        );
        assert_eq!(lines.count(), 2);
    }

    #[test]
    fn bad_weights_are_rejected() {
        let (a, b) = paired();
        let w = LossWeights {
            alpha: -1.0,
            ..LossWeights::merced_like()
        };
        assert!(matches!(
            train_embedding(&a, &b, Regime::Paired, &w, &config(1)),
            Err(TrainError::Config(_))
        ));
    }
}
