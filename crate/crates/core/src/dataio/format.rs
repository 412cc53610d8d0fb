// CMFV feature files, little-endian:
//
//   magic "CMFV" | version u32 | n u64 | d u32 | label_mode u8 | C u32
//   features: n*d f32, row-major
//   labels:   mode 0 -> n u32 class indices
//             mode 1 -> n rows of ceil(C/8) bytes, bit j of row i set iff i has label j
//
// Features are held as f64 in memory and narrowed to f32 on save, so values
// that came from a file (or are otherwise f32-representable) round-trip exactly.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, FeatureSet, Labels};
use crate::diffmath::Matrix;

pub const CMFV_MAGIC: [u8; 4] = *b"CMFV";
pub const CMFV_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 1 + 4;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn save_feature_file(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_feature_set(fs, &mut w).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load_feature_file(path: impl AsRef<Path>) -> Result<FeatureSet, DataError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(io_err(path))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(io_err(path))?;
    let modality = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_feature_set(&bytes, modality)
}

pub fn write_feature_set<W: Write>(fs: &FeatureSet, w: &mut W) -> std::io::Result<()> {
    let c = fs.classes();
    w.write_all(&CMFV_MAGIC)?;
    w.write_all(&CMFV_VERSION.to_le_bytes())?;
    w.write_all(&(fs.len() as u64).to_le_bytes())?;
    w.write_all(&(fs.dim() as u32).to_le_bytes())?;
    w.write_all(&[u8::from(fs.labels.is_multi())])?;
    w.write_all(&(c as u32).to_le_bytes())?;
    for &v in fs.features.data() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    match &fs.labels {
        Labels::Single { indices, .. } => {
            for &l in indices {
                w.write_all(&(l as u32).to_le_bytes())?;
            }
        }
        Labels::Multi { sets, .. } => {
            let width = c.div_ceil(8);
            for s in sets {
                let mut row = vec![0u8; width];
                for &l in s {
                    row[l / 8] |= 1 << (l % 8);
                }
                w.write_all(&row)?;
            }
        }
    }
    Ok(())
}

pub(crate) struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], DataError> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(DataError::Truncated {
                needed: end - self.bytes.len(),
            });
        }
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8, DataError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, DataError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, DataError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self) -> Result<f32, DataError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64, DataError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// Errors unless every byte has been consumed.
    pub(crate) fn finish(&self) -> Result<(), DataError> {
        if self.pos != self.bytes.len() {
            return Err(DataError::TrailingBytes {
                extra: self.bytes.len() - self.pos,
            });
        }
        Ok(())
    }
}

pub fn read_feature_set(
    bytes: &[u8],
    modality: impl Into<String>,
) -> Result<FeatureSet, DataError> {
    let mut cur = Cursor::new(bytes);
    let magic: [u8; 4] = cur.take(4)?.try_into().unwrap();
    if magic != CMFV_MAGIC {
        return Err(DataError::BadMagic {
            found: magic,
            expected: CMFV_MAGIC,
        });
    }
    let version = cur.u32()?;
    if version != CMFV_VERSION {
        return Err(DataError::VersionMismatch {
            found: version,
            expected: CMFV_VERSION,
        });
    }
    let n = usize::try_from(cur.u64()?)
        .map_err(|_| DataError::InvalidHeader("n does not fit in memory".into()))?;
    let d = cur.u32()? as usize;
    let mode = cur.u8()?;
    let c = cur.u32()? as usize;
    debug_assert_eq!(cur.pos, HEADER_LEN);
    if n == 0 || d == 0 {
        return Err(DataError::InvalidHeader(format!(
            "n={n}, d={d}; both must be positive"
        )));
    }
    if c < 2 {
        return Err(DataError::InvalidHeader(format!(
            "C={c}; need at least 2 classes"
        )));
    }
    if mode > 1 {
        return Err(DataError::InvalidHeader(format!("label_mode={mode}")));
    }
    let feature_bytes = n
        .checked_mul(d)
        .and_then(|v| v.checked_mul(4))
        .ok_or_else(|| DataError::InvalidHeader("n*d overflows".into()))?;
    let raw = cur.take(feature_bytes)?;
    let data: Vec<f64> = raw
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let features = Matrix::new(n, d, data)?;

    let labels = if mode == 0 {
        let mut indices = Vec::with_capacity(n);
        for _ in 0..n {
            let l = cur.u32()? as usize;
            if l >= c {
                return Err(DataError::LabelOutOfRange {
                    label: l,
                    classes: c,
                });
            }
            indices.push(l);
        }
        Labels::single(c, indices)?
    } else {
        let width = c.div_ceil(8);
        let mut sets = Vec::with_capacity(n);
        for _ in 0..n {
            let row = cur.take(width)?;
            let mut s = Vec::new();
            for (byte_idx, &byte) in row.iter().enumerate() {
                for bit in 0..8 {
                    if byte & (1 << bit) != 0 {
                        let l = byte_idx * 8 + bit;
                        if l >= c {
                            return Err(DataError::LabelOutOfRange {
                                label: l,
                                classes: c,
                            });
                        }
                        s.push(l);
                    }
                }
            }
            sets.push(s);
        }
        Labels::multi(c, sets)?
    };
    cur.finish()?;
    FeatureSet::new(features, labels, modality)
}

/// Reads the CSV fixture format: header `f0,…,f{d-1},labels`, labels as
/// `;`-separated class indices. Label mode is multi when any row carries a
/// number of labels other than one; `classes` defaults to `max label + 1`.
pub fn load_csv(path: impl AsRef<Path>, classes: Option<usize>) -> Result<FeatureSet, DataError> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| DataError::Csv(e.to_string()))?;
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv(e.to_string()))?
        .clone();
    let d = headers.len().saturating_sub(1);
    if d == 0 || headers.get(d) != Some("labels") {
        return Err(DataError::Csv("header must be f0..f{d-1},labels".into()));
    }
    for (j, h) in headers.iter().take(d).enumerate() {
        if h != format!("f{j}") {
            return Err(DataError::Csv(format!(
                "column {j} is named {h:?}, expected \"f{j}\""
            )));
        }
    }
    let mut data = Vec::new();
    let mut sets: Vec<Vec<usize>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| DataError::Csv(e.to_string()))?;
        if rec.len() != d + 1 {
            return Err(DataError::Csv(format!(
                "row {i} has {} fields, expected {}",
                rec.len(),
                d + 1
            )));
        }
        for field in rec.iter().take(d) {
            let v: f64 = field
                .parse()
                .map_err(|_| DataError::Csv(format!("row {i}: not a number: {field:?}")))?;
            data.push(v);
        }
        let labels = rec.get(d).unwrap_or("");
        let set = labels
            .split(';')
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| DataError::Csv(format!("row {i}: bad label {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        sets.push(set);
    }
    if sets.is_empty() {
        return Err(DataError::TooFewSamples { needed: 1, got: 0 });
    }
    let max_label = sets.iter().flatten().copied().max().unwrap_or(0);
    let c = classes.unwrap_or((max_label + 1).max(2));
    let features = Matrix::new(sets.len(), d, data)?;
    let labels = if sets.iter().all(|s| s.len() == 1) {
        Labels::single(c, sets.into_iter().map(|s| s[0]).collect())?
    } else {
        Labels::multi(c, sets)?
    };
    let modality = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    FeatureSet::new(features, labels, modality)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_fixture() -> FeatureSet {
        let features = Matrix::from_rows(&[[0.5, -1.25, 3.0], [2.0, 0.0, -0.125]]);
        FeatureSet::new(features, Labels::single(3, vec![2, 0]).unwrap(), "a").unwrap()
    }

    fn encode(fs: &FeatureSet) -> Vec<u8> {
        let mut buf = Vec::new();
        write_feature_set(fs, &mut buf).unwrap();
        buf
    }

    #[test]
    fn single_label_layout_size() {
        // header 4+4+8+4+1+4 = 25 bytes, features 2*3*4, labels 2*4
        let bytes = encode(&single_fixture());
        assert_eq!(HEADER_LEN, 25);
        assert_eq!(bytes.len(), 25 + 24 + 8);
        assert_eq!(&bytes[..4], b"CMFV");
        assert_eq!(bytes[20], 0);
    }

    #[test]
    fn round_trip_single_and_multi() {
        let fs = single_fixture();
        assert_eq!(read_feature_set(&encode(&fs), "a").unwrap(), fs);

        let features = Matrix::from_rows(&[[1.0], [2.5], [-4.0]]);
        let labels = Labels::multi(17, vec![vec![0, 16], vec![3], vec![8, 9, 10]]).unwrap();
        let fs = FeatureSet::new(features, labels, "m").unwrap();
        let bytes = encode(&fs);
        assert_eq!(bytes.len(), 25 + 12 + 3 * 3);
        assert_eq!(read_feature_set(&bytes, "m").unwrap(), fs);
    }

    #[test]
    fn corrupt_headers_are_rejected() {
        let good = encode(&single_fixture());

        let mut bad = good.clone();
        bad[..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            read_feature_set(&bad, "a"),
            Err(DataError::BadMagic { .. })
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(
            read_feature_set(&bad, "a"),
            Err(DataError::VersionMismatch { found: 2, .. })
        ));

        let bad = &good[..good.len() - 3];
        assert!(matches!(
            read_feature_set(bad, "a"),
            Err(DataError::Truncated { needed: 3 })
        ));

        let mut bad = good.clone();
        let lab = bad.len() - 4;
        bad[lab..].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            read_feature_set(&bad, "a"),
            Err(DataError::LabelOutOfRange {
                label: 7,
                classes: 3
            })
        ));

        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(
            read_feature_set(&bad, "a"),
            Err(DataError::TrailingBytes { extra: 1 })
        ));
    }

    #[test]
    fn csv_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("toy.csv");
        std::fs::write(&p, "f0,f1,labels\n1.0,2.0,0\n-1,0.5,1;3\n0,0,2\n").unwrap();
        let fs = load_csv(&p, None).unwrap();
        assert_eq!(fs.len(), 3);
        assert_eq!(fs.dim(), 2);
        assert_eq!(fs.classes(), 4);
        assert!(fs.labels.is_multi());
        assert_eq!(fs.labels.set(1), &[1, 3]);

        std::fs::write(&p, "a,b,labels\n1,2,0\n").unwrap();
        assert!(load_csv(&p, None).is_err());
    }
}
