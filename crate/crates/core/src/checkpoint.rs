// Model checkpoints, little-endian.
//
// CMM1 (stage-1 classifier):
//   magic "CMM1" | version u32 | label_mode u8 | dropout f32
//   extractor: mlp | head: mlp
//   norm: d u32 | mean d×f64 | std d×f64
//
// CMM2 (embedding model):
//   magic "CMM2" | version u32 | d_v u32 | C u32
//   λ1..λ5, α: 6×f64 | regularizer_mode u8 | reduction u8
//   encoder_a, encoder_b, classifier, decoder_ab, decoder_ba: mlp each
//
// mlp:   layer_count u32, then per layer
//        in u32 | out u32 | activation u8 | weight in×out f32 (row-major) | bias out f32
//
// Weights are narrowed to f32, so a loaded model reproduces the saved bytes
// exactly but is not bitwise equal to an f64 model that was never saved.

use std::io::Write;
use std::path::Path;

use crate::dataio::format::{io_err, Cursor};
use crate::dataio::{DataError, NormStats};
use crate::diffmath::{Activation, Dense, Matrix, Mlp};
use crate::stage1::ClassifierNet;
use crate::stage2::{EmbedModel, LossWeights, Reduction, RegularizerMode, TermOptions};

pub const CMM1_MAGIC: [u8; 4] = *b"CMM1";
pub const CMM2_MAGIC: [u8; 4] = *b"CMM2";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Stage-1 network plus the normalization fitted on its training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Checkpoint {
    pub net: ClassifierNet,
    pub norm: NormStats,
}

/// Embedding model plus the objective it was trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage2Checkpoint {
    pub model: EmbedModel,
    pub weights: LossWeights,
    pub terms: TermOptions,
}

fn write_mlp(out: &mut Vec<u8>, mlp: &Mlp) {
    out.extend_from_slice(&(mlp.layers.len() as u32).to_le_bytes());
    for l in &mlp.layers {
        out.extend_from_slice(&(l.input_dim() as u32).to_le_bytes());
        out.extend_from_slice(&(l.output_dim() as u32).to_le_bytes());
        out.push(l.activation.tag());
        for &v in l.weight.data().iter().chain(l.bias.data()) {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

fn read_f32s(cur: &mut Cursor, n: usize) -> Result<Vec<f64>, DataError> {
    (0..n).map(|_| cur.f32().map(f64::from)).collect()
}

fn read_mlp(cur: &mut Cursor) -> Result<Mlp, DataError> {
    let count = cur.u32()? as usize;
    if count == 0 {
        return Err(DataError::InvalidHeader("network with no layers".into()));
    }
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let input = cur.u32()? as usize;
        let output = cur.u32()? as usize;
        if input == 0 || output == 0 {
            return Err(DataError::InvalidHeader(format!("layer {input}×{output}")));
        }
        let tag = cur.u8()?;
        let activation = Activation::from_tag(tag)
            .ok_or_else(|| DataError::InvalidHeader(format!("activation tag {tag}")))?;
        let weight = Matrix::new(input, output, read_f32s(cur, input * output)?)?;
        let bias = Matrix::new(1, output, read_f32s(cur, output)?)?;
        layers.push(Dense {
            weight,
            bias,
            activation,
        });
    }
    Ok(Mlp::from_layers(layers)?)
}

fn check_magic(cur: &mut Cursor, expected: [u8; 4]) -> Result<(), DataError> {
    let found: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if found != expected {
        return Err(DataError::BadMagic { found, expected });
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    Ok(())
}

pub fn encode_stage1(ckpt: &Stage1Checkpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CMM1_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(u8::from(ckpt.net.multi_label));
    out.extend_from_slice(&(ckpt.net.dropout as f32).to_le_bytes());
    write_mlp(&mut out, &ckpt.net.extractor);
    write_mlp(&mut out, &ckpt.net.head);
    out.extend_from_slice(&(ckpt.norm.dim() as u32).to_le_bytes());
    for &v in ckpt.norm.mean.iter().chain(&ckpt.norm.std) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_stage1(bytes: &[u8]) -> Result<Stage1Checkpoint, DataError> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, CMM1_MAGIC)?;
    let mode = cur.u8()?;
    if mode > 1 {
        return Err(DataError::InvalidHeader(format!("label_mode={mode}")));
    }
    let dropout = f64::from(cur.f32()?);
    if !(0.0..1.0).contains(&dropout) {
        return Err(DataError::InvalidHeader(format!("dropout={dropout}")));
    }
    let extractor = read_mlp(&mut cur)?;
    let head = read_mlp(&mut cur)?;
    if extractor.output_dim() != head.input_dim() {
        return Err(DataError::InvalidHeader(
            "extractor and head widths differ".into(),
        ));
    }
    let d = cur.u32()? as usize;
    if d != extractor.input_dim() {
        return Err(DataError::InvalidHeader(format!(
            "normalization width {d} vs input width {}",
            extractor.input_dim()
        )));
    }
    let mut stats = Vec::with_capacity(2 * d);
    for _ in 0..2 * d {
        stats.push(cur.f64()?);
    }
    cur.finish()?;
    let std = stats.split_off(d);
    Ok(Stage1Checkpoint {
        net: ClassifierNet {
            extractor,
            head,
            dropout,
            multi_label: mode == 1,
        },
        norm: NormStats { mean: stats, std },
    })
}

pub fn encode_stage2(ckpt: &Stage2Checkpoint) -> Vec<u8> {
    let m = &ckpt.model;
    let mut out = Vec::new();
    out.extend_from_slice(&CMM2_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.d_v() as u32).to_le_bytes());
    out.extend_from_slice(&(m.classes() as u32).to_le_bytes());
    for v in ckpt.weights.as_array() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.push(ckpt.terms.regularizer_mode.tag());
    out.push(ckpt.terms.reduction.tag());
    for g in m.groups() {
        write_mlp(&mut out, g);
    }
    out
}

pub fn decode_stage2(bytes: &[u8]) -> Result<Stage2Checkpoint, DataError> {
    let mut cur = Cursor::new(bytes);
    check_magic(&mut cur, CMM2_MAGIC)?;
    let d_v = cur.u32()? as usize;
    let classes = cur.u32()? as usize;
    let mut w = [0.0; 6];
    for v in &mut w {
        *v = cur.f64()?;
    }
    let weights = LossWeights::from_array(w);
    weights
        .validate()
        .map_err(|e| DataError::InvalidHeader(e.to_string()))?;
    let tag = cur.u8()?;
    let regularizer_mode = RegularizerMode::from_tag(tag)
        .ok_or_else(|| DataError::InvalidHeader(format!("regularizer mode {tag}")))?;
    let tag = cur.u8()?;
    let reduction = Reduction::from_tag(tag)
        .ok_or_else(|| DataError::InvalidHeader(format!("reduction {tag}")))?;
    let model = EmbedModel {
        encoder_a: read_mlp(&mut cur)?,
        encoder_b: read_mlp(&mut cur)?,
        classifier: read_mlp(&mut cur)?,
        decoder_ab: read_mlp(&mut cur)?,
        decoder_ba: read_mlp(&mut cur)?,
    };
    cur.finish()?;
    model.validate()?;
    if model.d_v() != d_v || model.classes() != classes {
        return Err(DataError::InvalidHeader(format!(
            "header says d_v={d_v}, C={classes}; layers say d_v={}, C={}",
            model.d_v(),
            model.classes()
        )));
    }
    Ok(Stage2Checkpoint {
        model,
        weights,
        terms: TermOptions {
            regularizer_mode,
            reduction,
        },
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let mut f = std::fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

fn read_file(path: &Path) -> Result<Vec<u8>, DataError> {
    std::fs::read(path).map_err(io_err(path))
}

pub fn save_stage1(ckpt: &Stage1Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_stage1(ckpt))
}

pub fn load_stage1(path: impl AsRef<Path>) -> Result<Stage1Checkpoint, DataError> {
    decode_stage1(&read_file(path.as_ref())?)
}

pub fn save_stage2(ckpt: &Stage2Checkpoint, path: impl AsRef<Path>) -> Result<(), DataError> {
    write_file(path.as_ref(), &encode_stage2(ckpt))
}

pub fn load_stage2(path: impl AsRef<Path>) -> Result<Stage2Checkpoint, DataError> {
    decode_stage2(&read_file(path.as_ref())?)
}

/// Rounds every parameter to f32, i.e. to what a checkpoint stores.
pub fn narrow_mlp(mlp: &mut Mlp) {
    for p in mlp.params_mut() {
        p.update(|_, v| *v = f64::from(*v as f32))
            .expect("narrowing keeps values finite");
    }
}

/// `narrow_mlp` over all five parameter groups.
pub fn narrow_embed(model: &mut EmbedModel) {
    let EmbedModel {
        encoder_a,
        encoder_b,
        classifier,
        decoder_ab,
        decoder_ba,
    } = model;
    for m in [encoder_a, encoder_b, classifier, decoder_ab, decoder_ba] {
        narrow_mlp(m);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stage1::Stage1Config;
    use crate::stage2::EmbedConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn stage1() -> Stage1Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = Stage1Config {
            hidden: vec![6],
            z_dim: 4,
            ..Stage1Config::default()
        };
        let mut net = ClassifierNet::new(5, 3, true, &cfg, &mut rng);
        narrow_mlp(&mut net.extractor);
        narrow_mlp(&mut net.head);
        Stage1Checkpoint {
            net,
            norm: NormStats {
                mean: vec![0.1, -2.0, 3.5, 0.0, 1e-9],
                std: vec![1.0, 0.3, 2.0, 0.0, 7.0],
            },
        }
    }

    fn stage2() -> Stage2Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut model = EmbedModel::new(
            4,
            3,
            5,
            &EmbedConfig {
                d_v: 6,
                ..EmbedConfig::default()
            },
            &mut rng,
        );
        narrow_embed(&mut model);
        Stage2Checkpoint {
            model,
            weights: LossWeights::merced_like(),
            terms: TermOptions {
                regularizer_mode: RegularizerMode::Norm,
                reduction: Reduction::Mean,
            },
        }
    }

    #[test]
    fn stage1_round_trip_is_exact() {
        let c = stage1();
        let bytes = encode_stage1(&c);
        let back = decode_stage1(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_stage1(&back), bytes);
    }

    #[test]
    fn stage2_round_trip_is_exact() {
        let c = stage2();
        let bytes = encode_stage2(&c);
        let back = decode_stage2(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_stage2(&back), bytes);
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.cmm2");
        save_stage2(&stage2(), &p).unwrap();
        assert_eq!(load_stage2(&p).unwrap(), stage2());
        assert!(matches!(
            load_stage1(dir.path().join("missing")),
            Err(DataError::Io { .. })
        ));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = encode_stage2(&stage2());
        let mut magic = good.clone();
        magic[0] = b'X';
        assert!(matches!(
            decode_stage2(&magic),
            Err(DataError::BadMagic { .. })
        ));
        assert!(matches!(
            decode_stage1(&good),
            Err(DataError::BadMagic { .. })
        ));
        let mut version = good.clone();
        version[4] = 9;
        assert!(matches!(
            decode_stage2(&version),
            Err(DataError::VersionMismatch { found: 9, .. })
        ));
        assert!(matches!(
            decode_stage2(&good[..good.len() - 1]),
            Err(DataError::Truncated { .. })
        ));
        let mut long = good.clone();
        long.push(0);
        assert!(matches!(
            decode_stage2(&long),
            Err(DataError::TrailingBytes { extra: 1 })
        ));
        let mut dv = good.clone();
        dv[8] = 7;
        assert!(matches!(
            decode_stage2(&dv),
            Err(DataError::InvalidHeader(_))
        ));
        let s1 = encode_stage1(&stage1());
        let mut mode = s1.clone();
        mode[8] = 4;
        assert!(matches!(
            decode_stage1(&mode),
            Err(DataError::InvalidHeader(_))
        ));
    }
}
