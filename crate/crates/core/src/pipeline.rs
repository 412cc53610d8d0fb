//! End-to-end runs: split and normalize, pretrain both domains, extract `Z`,
//! train the embedding, then evaluate every retrieval direction.

use crate::dataio::{split, split_indices, DataError, FeatureSet, NormStats, Regime};
use crate::diffmath::Matrix;
use crate::error::TrainError;
use crate::retrieval::{evaluate, EvalOptions, Gallery, MetricReport, RetrievalError};
use crate::stage1::{
    extract_intermediate, pretrain_domain, ClassifierNet, Stage1Config, Stage1Epoch,
};
use crate::stage2::{
    project, train_embedding, Domain, EmbedConfig, EmbedEpoch, EmbedModel, LossWeights,
};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl From<crate::diffmath::MathError> for PipelineError {
    fn from(e: crate::diffmath::MathError) -> Self {
        PipelineError::Train(TrainError::Math(e))
    }
}

/// A domain's train and test portions.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitSet {
    pub train: FeatureSet,
    pub test: FeatureSet,
}

impl SplitSet {
    fn map(
        &self,
        f: impl Fn(&Matrix) -> Result<Matrix, PipelineError>,
    ) -> Result<SplitSet, PipelineError> {
        Ok(SplitSet {
            train: self.train.with_features(f(&self.train.features)?)?,
            test: self.test.with_features(f(&self.test.features)?)?,
        })
    }
}

/// Stratified split of both domains. Paired data is split with one index
/// set so pairs stay aligned; unpaired domains are split independently.
pub fn split_domains(
    a: &FeatureSet,
    b: &FeatureSet,
    regime: Regime,
    fraction: f64,
    seed: u64,
) -> Result<(SplitSet, SplitSet), DataError> {
    match regime {
        Regime::Paired => {
            if a.len() != b.len() || a.labels != b.labels {
                return Err(DataError::PairMismatch(
                    "paired domains need identical labels row by row".into(),
                ));
            }
            let (train, test) = split_indices(&a.labels, fraction, seed)?;
            if train.is_empty() || test.is_empty() {
                return Err(DataError::TooFewSamples {
                    needed: 2,
                    got: a.len(),
                });
            }
            let part = |fs: &FeatureSet| -> Result<SplitSet, DataError> {
                Ok(SplitSet {
                    train: fs.subset(&train)?,
                    test: fs.subset(&test)?,
                })
            };
            Ok((part(a)?, part(b)?))
        }
        Regime::Unpaired => {
            let (ta, sa) = split(a, fraction, seed)?;
            let (tb, sb) = split(b, fraction, seed.wrapping_add(1))?;
            Ok((
                SplitSet {
                    train: ta,
                    test: sa,
                },
                SplitSet {
                    train: tb,
                    test: sb,
                },
            ))
        }
    }
}

/// Standardizes both portions with statistics fitted on the train portion.
pub fn normalize_split(s: &SplitSet) -> Result<(SplitSet, NormStats), DataError> {
    let stats = NormStats::fit(&s.train.features)?;
    Ok((
        SplitSet {
            train: stats.apply_set(&s.train)?,
            test: stats.apply_set(&s.test)?,
        },
        stats,
    ))
}

pub type Pretrained = (ClassifierNet, Vec<Stage1Epoch>);

/// Trains the two domain classifiers concurrently. Domain B uses
/// `config.seed + 1`.
pub fn pretrain_both(
    a: &FeatureSet,
    b: &FeatureSet,
    config: &Stage1Config,
) -> Result<(Pretrained, Pretrained), TrainError> {
    let config_b = Stage1Config {
        seed: config.seed.wrapping_add(1),
        ..config.clone()
    };
    let (ra, rb) = rayon::join(
        || pretrain_domain(a, config),
        || pretrain_domain(b, &config_b),
    );
    Ok((ra?, rb?))
}

/// `Z` for both portions of a normalized split.
pub fn extract_split(net: &ClassifierNet, s: &SplitSet) -> Result<SplitSet, PipelineError> {
    s.map(|x| Ok(extract_intermediate(net, x)?))
}

/// Where uni- and cross-modal queries search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GalleryMode {
    /// Test queries against the training portion of the target domain.
    Train,
    /// Test queries against the test portion; a query never retrieves itself.
    Heldout,
}

impl GalleryMode {
    pub fn as_str(self) -> &'static str {
        match self {
            GalleryMode::Train => "train",
            GalleryMode::Heldout => "heldout",
        }
    }
}

impl std::str::FromStr for GalleryMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(GalleryMode::Train),
            "heldout" => Ok(GalleryMode::Heldout),
            other => Err(format!(
                "unknown gallery mode {other:?} (expected train or heldout)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSettings {
    pub ks: Vec<usize>,
    pub cutoff: Option<usize>,
    pub gallery: GalleryMode,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            ks: vec![10],
            cutoff: None,
            gallery: GalleryMode::Train,
        }
    }
}

/// Metrics for every retrieval direction of one model.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DirectionReport {
    pub d_v: usize,
    pub a2b: MetricReport,
    pub b2a: MetricReport,
    pub a2a: MetricReport,
    pub b2b: MetricReport,
    /// Queries from both domains against the union of both galleries.
    pub mixed: MetricReport,
    /// Mean row norm of the test embeddings over both domains.
    pub mean_norm: f64,
}

impl DirectionReport {
    /// Mean of the two cross-modal mAPs.
    pub fn cross_map(&self) -> f64 {
        0.5 * (self.a2b.map + self.b2a.map)
    }

    /// Mean of the two cross-modal chance levels.
    pub fn cross_chance(&self) -> f64 {
        0.5 * (self.a2b.chance + self.b2a.chance)
    }

    pub fn directions(&self) -> [(&'static str, &MetricReport); 5] {
        [
            ("A2B", &self.a2b),
            ("B2A", &self.b2a),
            ("A2A", &self.a2a),
            ("B2B", &self.b2b),
            ("mixed", &self.mixed),
        ]
    }
}

/// Projected galleries of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedded {
    pub train: Gallery,
    pub test: Gallery,
}

pub fn embed(model: &EmbedModel, z: &SplitSet, domain: Domain) -> Result<Embedded, PipelineError> {
    let g = |fs: &FeatureSet| -> Result<Gallery, PipelineError> {
        Ok(Gallery::new(
            project(model, &fs.features, domain)?,
            fs.labels.clone(),
            &fs.modality,
        )?)
    };
    Ok(Embedded {
        train: g(&z.train)?,
        test: g(&z.test)?,
    })
}

pub fn evaluate_directions(
    d_v: usize,
    a: &Embedded,
    b: &Embedded,
    settings: &EvalSettings,
) -> Result<DirectionReport, PipelineError> {
    let cross = EvalOptions {
        cutoff: settings.cutoff,
        skip_self: false,
    };
    let (ga, gb, uni) = match settings.gallery {
        GalleryMode::Train => (&a.train, &b.train, cross),
        GalleryMode::Heldout => (
            &a.test,
            &b.test,
            EvalOptions {
                skip_self: true,
                ..cross
            },
        ),
    };
    let ks = &settings.ks;
    let mixed_queries = a.test.concat(&b.test)?;
    let mixed = match settings.gallery {
        GalleryMode::Train => evaluate(&mixed_queries, &ga.concat(gb)?, ks, cross)?,
        GalleryMode::Heldout => evaluate(&mixed_queries, &mixed_queries, ks, uni)?,
    };
    let norms = a.test.embeddings().vstack(b.test.embeddings())?;
    Ok(DirectionReport {
        d_v,
        a2b: evaluate(&a.test, gb, ks, cross)?,
        b2a: evaluate(&b.test, ga, ks, cross)?,
        a2a: evaluate(&a.test, ga, ks, uni)?,
        b2b: evaluate(&b.test, gb, ks, uni)?,
        mixed,
        mean_norm: norms.mean_row_norm(),
    })
}

/// Everything a full run needs besides the data.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub regime: Regime,
    pub split_fraction: f64,
    pub split_seed: u64,
    pub stage1: Stage1Config,
    pub stage2: EmbedConfig,
    pub weights: LossWeights,
    pub eval: EvalSettings,
    /// Skip pretraining: the embedding is trained from random initialization
    /// on the normalized raw features, with the stage-1 layer widths
    /// prepended to each encoder.
    pub end_to_end: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            regime: Regime::Paired,
            split_fraction: 0.7,
            split_seed: 0,
            stage1: Stage1Config::default(),
            stage2: EmbedConfig::default(),
            weights: LossWeights::dsrsid_like(1.0),
            eval: EvalSettings::default(),
            end_to_end: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub report: DirectionReport,
    pub model: EmbedModel,
    pub history: Vec<EmbedEpoch>,
}

/// Normalized splits and, unless end-to-end, the stage-1 nets and `Z`.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub norm_a: SplitSet,
    pub norm_b: SplitSet,
    pub stats_a: NormStats,
    pub stats_b: NormStats,
    pub stage1: Option<Stage1Outputs>,
}

#[derive(Debug, Clone)]
pub struct Stage1Outputs {
    pub net_a: ClassifierNet,
    pub net_b: ClassifierNet,
    pub history_a: Vec<Stage1Epoch>,
    pub history_b: Vec<Stage1Epoch>,
    pub z_a: SplitSet,
    pub z_b: SplitSet,
}

pub fn prepare(
    a: &FeatureSet,
    b: &FeatureSet,
    config: &PipelineConfig,
) -> Result<Prepared, PipelineError> {
    let (sa, sb) = split_domains(
        a,
        b,
        config.regime,
        config.split_fraction,
        config.split_seed,
    )?;
    let (norm_a, stats_a) = normalize_split(&sa)?;
    let (norm_b, stats_b) = normalize_split(&sb)?;
    let stage1 = if config.end_to_end {
        None
    } else {
        let ((net_a, history_a), (net_b, history_b)) =
            pretrain_both(&norm_a.train, &norm_b.train, &config.stage1)?;
        let z_a = extract_split(&net_a, &norm_a)?;
        let z_b = extract_split(&net_b, &norm_b)?;
        Some(Stage1Outputs {
            net_a,
            net_b,
            history_a,
            history_b,
            z_a,
            z_b,
        })
    };
    Ok(Prepared {
        norm_a,
        norm_b,
        stats_a,
        stats_b,
        stage1,
    })
}

/// Embedding config actually used for the stage-2 inputs of `prepared`.
pub fn effective_embed_config(config: &PipelineConfig, d_v: usize) -> EmbedConfig {
    let mut c = EmbedConfig {
        d_v,
        ..config.stage2.clone()
    };
    if config.end_to_end {
        let mut prefix = config.stage1.hidden.clone();
        prefix.push(config.stage1.z_dim);
        prefix.extend_from_slice(&c.prefix);
        c.prefix = prefix;
    }
    c
}

/// Trains and evaluates one embedding of width `d_v` on prepared data.
pub fn run_embedding(
    prepared: &Prepared,
    config: &PipelineConfig,
    d_v: usize,
) -> Result<RunOutput, PipelineError> {
    let (za, zb) = match &prepared.stage1 {
        Some(s) => (&s.z_a, &s.z_b),
        None => (&prepared.norm_a, &prepared.norm_b),
    };
    let embed_cfg = effective_embed_config(config, d_v);
    let (model, history) = train_embedding(
        &za.train,
        &zb.train,
        config.regime,
        &config.weights,
        &embed_cfg,
    )?;
    let ea = embed(&model, za, Domain::A)?;
    let eb = embed(&model, zb, Domain::B)?;
    let report = evaluate_directions(d_v, &ea, &eb, &config.eval)?;
    Ok(RunOutput {
        report,
        model,
        history,
    })
}

/// `prepare` followed by `run_embedding` for each width.
pub fn run(
    a: &FeatureSet,
    b: &FeatureSet,
    config: &PipelineConfig,
    d_vs: &[usize],
) -> Result<Vec<RunOutput>, PipelineError> {
    let prepared = prepare(a, b, config)?;
    d_vs.iter()
        .map(|&d| run_embedding(&prepared, config, d))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{synth_generate, SynthRegime, SynthSpec};

    fn data(regime: SynthRegime) -> (FeatureSet, FeatureSet) {
        synth_generate(&SynthSpec {
            classes: 4,
            per_class: 20,
            dim_a: 8,
            dim_b: 6,
            separation: 8.0,
            seed: 3,
            regime,
        })
        .unwrap()
    }

    #[test]
    fn paired_split_keeps_pairs_aligned() {
        let (a, b) = data(SynthRegime::PairedSingle);
        let (sa, sb) = split_domains(&a, &b, Regime::Paired, 0.75, 1).unwrap();
        assert_eq!(sa.train.labels, sb.train.labels);
        assert_eq!(sa.test.labels, sb.test.labels);
        assert_eq!((sa.train.len(), sa.test.len()), (60, 20));
    }

    #[test]
    fn normalization_uses_train_statistics() {
        let (a, b) = data(SynthRegime::PairedSingle);
        let (sa, _) = split_domains(&a, &b, Regime::Paired, 0.75, 1).unwrap();
        let (n, stats) = normalize_split(&sa).unwrap();
        assert_eq!(stats, NormStats::fit(&sa.train.features).unwrap());
        assert_eq!(n.test.features, stats.apply(&sa.test.features).unwrap());
    }

    fn small_config(regime: Regime) -> PipelineConfig {
        PipelineConfig {
            regime,
            stage1: Stage1Config {
                hidden: vec![32],
                z_dim: 16,
                epochs: 15,
                ..Stage1Config::default()
            },
            stage2: EmbedConfig {
                hidden: 16,
                epochs: 15,
                ..EmbedConfig::default()
            },
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn pipeline_reports_every_direction_and_is_deterministic() {
        let (a, b) = data(SynthRegime::PairedSingle);
        let cfg = small_config(Regime::Paired);
        let r1 = run(&a, &b, &cfg, &[8, 4]).unwrap();
        let r2 = run(&a, &b, &cfg, &[8, 4]).unwrap();
        assert_eq!(r1.len(), 2);
        for (x, y) in r1.iter().zip(&r2) {
            assert_eq!(x.report, y.report);
        }
        let rep = &r1[0].report;
        assert_eq!(rep.d_v, 8);
        assert_eq!(rep.a2b.queries, 24);
        assert_eq!(rep.mixed.queries, 48);
        assert!(rep.cross_map() > rep.cross_chance());
    }

    #[test]
    fn unpaired_and_end_to_end_runs_complete() {
        let (a, b) = data(SynthRegime::UnpairedMulti { max_labels: 2 });
        let mut cfg = small_config(Regime::Unpaired);
        cfg.weights = LossWeights::merced_like();
        let pre = run(&a, &b, &cfg, &[8]).unwrap();
        assert!(pre[0].report.a2b.map.is_finite());
        cfg.end_to_end = true;
        let e2e = run(&a, &b, &cfg, &[8]).unwrap();
        // d → 32 → 16 → hidden → d_v → d_v
        assert_eq!(e2e[0].model.encoder_a.layers.len(), 5);
        assert_eq!(e2e[0].model.decoder_ab.output_dim(), 6);
        cfg.eval.gallery = GalleryMode::Heldout;
        let held = run(&a, &b, &cfg, &[8]).unwrap();
        assert_eq!(held[0].report.a2a.queries, held[0].report.a2b.queries);
    }
}
