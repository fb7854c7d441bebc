//! `QGC1` dataset files.
//!
//! Little-endian layout:
//!
//! ```text
//! "QGC1"            4 bytes
//! version = 1       u32
//! num_classes       u32
//! num_cycles        u32
//! T                 u32
//! per cycle:        u32 label, then T×3 f32 in time-major (x, y, z) order
//! ```
//!
//! Samples are stored as `f32`; values already representable in single
//! precision round-trip bit-exactly. A JSON sidecar with the same basename
//! records provenance.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{GaitCycle, GaitDataset, Split};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"QGC1";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: Option<u64>,
    pub noise_sigma: Option<f64>,
    pub split: Split,
}

pub fn encode_dataset(ds: &GaitDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let t = ds.cycle_length().unwrap_or(0);
    let mut out = Vec::with_capacity(HEADER_LEN + ds.len() * (4 + 12 * t));
    out.extend_from_slice(MAGIC);
    for v in [VERSION, ds.num_classes as u32, ds.len() as u32, t as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for c in &ds.cycles {
        out.extend_from_slice(&c.label.to_le_bytes());
        for s in &c.samples {
            for &v in s {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(
                self.pos,
                format!("truncated file: need {n} bytes for {what}, {} remain", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode_dataset(bytes: &[u8], split: Split) -> Result<GaitDataset> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::parse(0, "bad magic, expected \"QGC1\""));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::parse(4, format!("unsupported version {version}")));
    }
    let num_classes = r.u32("num_classes")? as usize;
    let num_cycles = r.u32("num_cycles")? as usize;
    let t = r.u32("cycle length")? as usize;
    let mut cycles = Vec::with_capacity(num_cycles.min(bytes.len() / 4));
    for i in 0..num_cycles {
        let label_at = r.pos;
        let label = r.u32("label")?;
        if label as usize >= num_classes {
            return Err(Error::parse(
                label_at,
                format!("cycle {i}: label {label} ≥ num_classes {num_classes}"),
            ));
        }
        let mut samples = Vec::with_capacity(t);
        for _ in 0..t {
            let at = r.pos;
            let s = [
                r.f32("sample")? as f64,
                r.f32("sample")? as f64,
                r.f32("sample")? as f64,
            ];
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(at, format!("cycle {i}: non-finite sample")));
            }
            samples.push(s);
        }
        cycles.push(GaitCycle { samples, label });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(GaitDataset {
        cycles,
        num_classes,
        split,
    })
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    fs::write(manifest_path(path), text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Option<Manifest>> {
    let p = manifest_path(path);
    if !p.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(p)?)?))
}

/// Writes the binary file and its sidecar manifest.
pub fn save_dataset(ds: &GaitDataset, path: &Path, manifest: &Manifest) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    write_manifest(path, manifest)
}

/// Reads a dataset; the split tag comes from the sidecar when present.
pub fn load_dataset(path: &Path) -> Result<GaitDataset> {
    let bytes = fs::read(path)?;
    let split = read_manifest(path)?.map(|m| m.split).unwrap_or(Split::Train);
    decode_dataset(&bytes, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_dataset, SynthConfig};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> GaitDataset {
        let cfg = SynthConfig {
            num_classes: 3,
            cycles_per_class: 4,
            ..SynthConfig::default()
        };
        generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap()
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.qgc");
        let ds = small();
        let m = Manifest {
            seed: Some(9),
            noise_sigma: Some(0.05),
            split: Split::Train,
        };
        save_dataset(&ds, &path, &m).unwrap();
        assert_eq!(load_dataset(&path).unwrap(), ds);
        assert_eq!(read_manifest(&path).unwrap(), Some(m));
    }

    #[test]
    fn header_layout() {
        let bytes = encode_dataset(&small()).unwrap();
        assert_eq!(&bytes[..4], b"QGC1");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &3u32.to_le_bytes());
        assert_eq!(&bytes[12..16], &12u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &100u32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 12 * (4 + 1200));
    }

    #[test]
    fn corrupted_magic() {
        let mut bytes = encode_dataset(&small()).unwrap();
        bytes[1] = b'X';
        let err = decode_dataset(&bytes, Split::Train).unwrap_err();
        assert!(matches!(err, Error::Parse { offset: 0, .. }));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn truncated_and_bad_label() {
        let bytes = encode_dataset(&small()).unwrap();
        let err = decode_dataset(&bytes[..bytes.len() - 3], Split::Train).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");

        let mut bytes = bytes;
        bytes[20..24].copy_from_slice(&7u32.to_le_bytes());
        match decode_dataset(&bytes, Split::Train).unwrap_err() {
            Error::Parse { offset, message } => {
                assert_eq!(offset, 20);
                assert!(message.contains("label"));
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn empty_dataset() {
        let ds = GaitDataset::new(Vec::new(), 5, Split::Test).unwrap();
        let bytes = encode_dataset(&ds).unwrap();
        assert_eq!(bytes.len(), 20);
        assert_eq!(decode_dataset(&bytes, Split::Test).unwrap(), ds);
    }

    proptest! {
        #[test]
        fn f32_values_round_trip(values in proptest::collection::vec(-1e6f32..1e6f32, 3 * 5 * 2), labels in proptest::collection::vec(0u32..4, 2)) {
            let cycles = labels.iter().enumerate().map(|(i, &label)| GaitCycle {
                samples: (0..5).map(|t| {
                    let o = (i * 5 + t) * 3;
                    [values[o] as f64, values[o + 1] as f64, values[o + 2] as f64]
                }).collect(),
                label,
            }).collect();
            let ds = GaitDataset::new(cycles, 4, Split::Val).unwrap();
            let back = decode_dataset(&encode_dataset(&ds).unwrap(), Split::Val).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
