//! Flat `key = value` run configuration.

use std::fmt::Write as _;

use crate::dataio::Regime;
use crate::diffmath::Activation;
use crate::pipeline::{EvalSettings, GalleryMode, PipelineConfig};
use crate::stage1::{OrthoTarget, Stage1Config};
use crate::stage2::{
    Architecture, EmbedConfig, LossWeights, Reduction, RegularizerMode, TermOptions,
};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,
    pub regime: Regime,
    pub weights: LossWeights,
    pub d_v: Vec<usize>,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub split_fraction: f64,
    pub ks: Vec<usize>,
    pub cutoff: Option<usize>,
    pub gallery: GalleryMode,
    pub stage1_hidden: Vec<usize>,
    pub z_dim: usize,
    pub dropout: f64,
    pub ortho_target: OrthoTarget,
    pub z_activation: Activation,
    pub architecture: Architecture,
    pub encoder_hidden: usize,
    pub encoder_output: Activation,
    pub regularizer: RegularizerMode,
    pub reduction: Reduction,
    pub early_stop_patience: usize,
    pub end_to_end: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s1 = Stage1Config::default();
        let s2 = EmbedConfig::default();
        Self {
            preset: "dsrsid-like".into(),
            regime: Regime::Paired,
            weights: LossWeights::preset("dsrsid-like").expect("built-in preset"),
            d_v: vec![64],
            stage1_epochs: s1.epochs,
            stage2_epochs: s2.epochs,
            batch_size: s2.batch_size,
            lr: s2.lr,
            seed: 0,
            split_fraction: 0.7,
            ks: vec![10],
            cutoff: None,
            gallery: GalleryMode::Train,
            stage1_hidden: s1.hidden,
            z_dim: s1.z_dim,
            dropout: s1.dropout,
            ortho_target: s1.ortho_target,
            z_activation: s1.z_activation,
            architecture: s2.architecture,
            encoder_hidden: s2.hidden,
            encoder_output: s2.encoder_output,
            regularizer: s2.terms.regularizer_mode,
            reduction: s2.terms.reduction,
            early_stop_patience: s2.early_stop_patience,
            end_to_end: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?}"))
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, String> {
    let v: Vec<T> = value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect::<Result<_, _>>()?;
    if v.is_empty() {
        return Err(format!("{key}: empty list"));
    }
    Ok(v)
}

fn join<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn activation(key: &str, value: &str) -> Result<Activation, String> {
    match value {
        "identity" | "linear" => Ok(Activation::Identity),
        "relu" => Ok(Activation::Relu),
        "leaky_relu" => Ok(Activation::LeakyRelu),
        _ => Err(format!(
            "{key}: expected identity, relu or leaky_relu, got {value:?}"
        )),
    }
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Identity => "identity",
        Activation::Relu => "relu",
        Activation::LeakyRelu => "leaky_relu",
    }
}

/// `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_entries(text: &str) -> Result<Vec<(String, String)>, String> {
    let mut entries = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key = value", n + 1))?;
        entries.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(entries)
}

impl RunConfig {
    /// Applies one setting. `preset` replaces all six loss weights.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let v = value.trim();
        let w = &mut self.weights;
        match key {
            "preset" => {
                *w = LossWeights::preset(v)
                    .ok_or_else(|| format!("unknown preset {v:?} (dsrsid-like, merced-like)"))?;
                // merced-like: one linear map per domain whose weight norm R pins to α
                (self.architecture, self.regularizer) = match v {
                    "merced-like" => (Architecture::Linear, RegularizerMode::Norm),
                    _ => (Architecture::Deep, RegularizerMode::Broadcast),
                };
                self.preset = v.to_string();
            }
            "regime" => self.regime = v.parse()?,
            "lambda1" => w.alignment = parse(key, v)?,
            "lambda2" => w.classification = parse(key, v)?,
            "lambda3" => w.norm = parse(key, v)?,
            "lambda4" => w.decoder = parse(key, v)?,
            "lambda5" => w.regularizer = parse(key, v)?,
            "alpha" => w.alpha = parse(key, v)?,
            "dv" => self.d_v = parse_list(key, v)?,
            "stage1_epochs" => self.stage1_epochs = parse(key, v)?,
            "stage2_epochs" => self.stage2_epochs = parse(key, v)?,
            "epochs" => {
                self.stage1_epochs = parse(key, v)?;
                self.stage2_epochs = self.stage1_epochs;
            }
            "batch_size" => self.batch_size = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "split_fraction" => self.split_fraction = parse(key, v)?,
            "k" => self.ks = parse_list(key, v)?,
            "cutoff" => {
                self.cutoff = match v {
                    "all" => None,
                    _ => Some(parse(key, v)?),
                }
            }
            "gallery" => self.gallery = v.parse()?,
            "stage1_hidden" => self.stage1_hidden = parse_list(key, v)?,
            "z_dim" => self.z_dim = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "ortho_target" => {
                self.ortho_target = match v {
                    "identity" => OrthoTarget::Identity,
                    "ones" => OrthoTarget::Ones,
                    _ => return Err(format!("{key}: expected identity or ones, got {v:?}")),
                }
            }
            "z_activation" => self.z_activation = activation(key, v)?,
            "architecture" => {
                self.architecture = match v {
                    "deep" => Architecture::Deep,
                    "linear" => Architecture::Linear,
                    _ => return Err(format!("{key}: expected deep or linear, got {v:?}")),
                }
            }
            "encoder_hidden" => self.encoder_hidden = parse(key, v)?,
            "encoder_output" => self.encoder_output = activation(key, v)?,
            "regularizer" => {
                self.regularizer = match v {
                    "broadcast" => RegularizerMode::Broadcast,
                    "norm" => RegularizerMode::Norm,
                    _ => return Err(format!("{key}: expected broadcast or norm, got {v:?}")),
                }
            }
            "reduction" => {
                self.reduction = match v {
                    "sum" => Reduction::Sum,
                    "mean" => Reduction::Mean,
                    _ => return Err(format!("{key}: expected sum or mean, got {v:?}")),
                }
            }
            "early_stop_patience" => self.early_stop_patience = parse(key, v)?,
            "end_to_end" => self.end_to_end = parse(key, v)?,
            _ => return Err(format!("unknown config key {key:?}")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment. A `preset` line is
    /// applied first wherever it appears, so explicit weights override it.
    pub fn apply_text(&mut self, text: &str) -> Result<(), String> {
        self.resolve(&parse_entries(text)?, &[])
    }

    /// Applies file entries, then overrides. The preset (an override's if
    /// given, else the file's) goes first so every explicit key wins over it.
    pub fn resolve(
        &mut self,
        file: &[(String, String)],
        overrides: &[(String, String)],
    ) -> Result<(), String> {
        let is_preset = |e: &&(String, String)| e.0 == "preset";
        if let Some((k, v)) = overrides
            .iter()
            .rfind(is_preset)
            .or_else(|| file.iter().rfind(is_preset))
        {
            self.set(k, v)?;
        }
        for (k, v) in file.iter().chain(overrides).filter(|e| e.0 != "preset") {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(format!(
                "split_fraction = {}; must lie in (0, 1)",
                self.split_fraction
            ));
        }
        if self.ks.contains(&0) {
            return Err("k values must be positive".into());
        }
        if self.cutoff == Some(0) {
            return Err("cutoff must be positive".into());
        }
        self.weights.validate().map_err(|e| e.to_string())?;
        let p = self.pipeline();
        p.stage1.validate().map_err(|e| e.to_string())?;
        for &d in &self.d_v {
            crate::pipeline::effective_embed_config(&p, d)
                .validate()
                .map_err(|e| e.to_string())?;
        }
        Ok(())
    }

    /// Every key with its resolved value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("preset", self.preset.clone());
        put("regime", self.regime.as_str().into());
        put("lambda1", w.alignment.to_string());
        put("lambda2", w.classification.to_string());
        put("lambda3", w.norm.to_string());
        put("lambda4", w.decoder.to_string());
        put("lambda5", w.regularizer.to_string());
        put("alpha", w.alpha.to_string());
        put("dv", join(&self.d_v));
        put("stage1_epochs", self.stage1_epochs.to_string());
        put("stage2_epochs", self.stage2_epochs.to_string());
        put("batch_size", self.batch_size.to_string());
        put("lr", self.lr.to_string());
        put("seed", self.seed.to_string());
        put("split_fraction", self.split_fraction.to_string());
        put("k", join(&self.ks));
        put(
            "cutoff",
            self.cutoff.map_or("all".into(), |c| c.to_string()),
        );
        put("gallery", self.gallery.as_str().into());
        put("stage1_hidden", join(&self.stage1_hidden));
        put("z_dim", self.z_dim.to_string());
        put("dropout", self.dropout.to_string());
        put(
            "ortho_target",
            match self.ortho_target {
                OrthoTarget::Identity => "identity",
                OrthoTarget::Ones => "ones",
            }
            .into(),
        );
        put("z_activation", activation_name(self.z_activation).into());
        put(
            "architecture",
            match self.architecture {
                Architecture::Deep => "deep",
                Architecture::Linear => "linear",
            }
            .into(),
        );
        put("encoder_hidden", self.encoder_hidden.to_string());
        put(
            "encoder_output",
            activation_name(self.encoder_output).into(),
        );
        put(
            "regularizer",
            match self.regularizer {
                RegularizerMode::Broadcast => "broadcast",
                RegularizerMode::Norm => "norm",
            }
            .into(),
        );
        put(
            "reduction",
            match self.reduction {
                Reduction::Sum => "sum",
                Reduction::Mean => "mean",
            }
            .into(),
        );
        put("early_stop_patience", self.early_stop_patience.to_string());
        put("end_to_end", self.end_to_end.to_string());
        s
    }

    /// Library configuration; stage-1 seeds derive from `seed`, stage-2 seeds
    /// from `seed` and `d_v`.
    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            regime: self.regime,
            split_fraction: self.split_fraction,
            split_seed: self.seed,
            stage1: Stage1Config {
                hidden: self.stage1_hidden.clone(),
                z_dim: self.z_dim,
                dropout: self.dropout,
                epochs: self.stage1_epochs,
                batch_size: self.batch_size,
                lr: self.lr,
                seed: self.seed.wrapping_mul(2).wrapping_add(1),
                ortho_target: self.ortho_target,
                activation: Activation::Relu,
                z_activation: self.z_activation,
            },
            stage2: EmbedConfig {
                d_v: self.d_v[0],
                architecture: self.architecture,
                hidden: self.encoder_hidden,
                prefix: Vec::new(),
                encoder_output: self.encoder_output,
                terms: TermOptions {
                    regularizer_mode: self.regularizer,
                    reduction: self.reduction,
                },
                epochs: self.stage2_epochs,
                batch_size: self.batch_size,
                lr: self.lr,
                seed: self.seed,
                early_stop_patience: self.early_stop_patience,
                early_stop_tol: 1e-6,
            },
            weights: self.weights,
            eval: EvalSettings {
                ks: self.ks.clone(),
                cutoff: self.cutoff,
                gallery: self.gallery,
            },
            end_to_end: self.end_to_end,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_text("preset = merced-like\nalpha = 2 # comment\ndv = 16, 32\nregime = unpaired\ncutoff = 50\n")
            .unwrap();
        assert_eq!(c.weights.alpha, 2.0);
        assert_eq!(c.weights.decoder, 0.01);
        assert_eq!(c.d_v, vec![16, 32]);
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn preset_applies_before_explicit_weights() {
        let mut c = RunConfig::default();
        c.apply_text("lambda4 = 0.5\npreset = merced-like\n")
            .unwrap();
        assert_eq!(c.weights.decoder, 0.5);
        assert_eq!(c.weights.norm, 0.01);
    }

    #[test]
    fn overrides_beat_the_file() {
        let file = parse_entries("preset = merced-like\nalpha = 2\nseed = 4").unwrap();
        let flags = vec![
            ("alpha".to_string(), "0".to_string()),
            ("preset".to_string(), "dsrsid-like".to_string()),
        ];
        let mut c = RunConfig::default();
        c.resolve(&file, &flags).unwrap();
        assert_eq!(c.preset, "dsrsid-like");
        assert_eq!(c.weights.alpha, 0.0);
        assert_eq!(c.weights.alignment, 1.0);
        assert_eq!(c.seed, 4);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c
            .apply_text("colour = blue")
            .unwrap_err()
            .contains("unknown config key"));
        assert!(c.set("lr", "fast").is_err());
        assert!(c.apply_text("no equals sign").is_err());
        c.set("split_fraction", "1.5").unwrap();
        assert!(c.validate().is_err());
        let mut c = RunConfig::default();
        c.set("alpha", "-1").unwrap();
        assert!(c.validate().is_err());
    }
}
