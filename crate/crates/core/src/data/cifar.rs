use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabeledDataset;
use crate::error::{Error, Result};

/// One label byte followed by 3072 channel-planar pixel bytes.
pub const CIFAR10_RECORD_LEN: usize = 3073;
const PIXELS: usize = 3072;
const PLANE: usize = 1024;

/// Per-channel normalization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelNorm {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelNorm {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }
}

impl Default for ChannelNorm {
    fn default() -> Self {
        Self::identity()
    }
}

/// Parses concatenated CIFAR-10 binary records.
pub fn parse_cifar10_bytes(bytes: &[u8], norm: &ChannelNorm) -> Result<LabeledDataset> {
    if norm.std.iter().any(|&s| !(s > 0.0) || !s.is_finite()) || norm.mean.iter().any(|m| !m.is_finite()) {
        return Err(Error::Parameter("channel normalization needs finite means and positive stds".into()));
    }
    if !bytes.len().is_multiple_of(CIFAR10_RECORD_LEN) {
        let offset = bytes.len() - bytes.len() % CIFAR10_RECORD_LEN;
        return Err(Error::Format {
            offset,
            message: format!(
                "truncated record: {} trailing bytes, records are {CIFAR10_RECORD_LEN} bytes",
                bytes.len() - offset
            ),
        });
    }
    let n = bytes.len() / CIFAR10_RECORD_LEN;
    let mut features = Vec::with_capacity(n * PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (r, rec) in bytes.chunks_exact(CIFAR10_RECORD_LEN).enumerate() {
        let label = rec[0];
        if label > 9 {
            return Err(Error::Format {
                offset: r * CIFAR10_RECORD_LEN,
                message: format!("label byte {label} exceeds 9"),
            });
        }
        labels.push(label as usize);
        for (p, &px) in rec[1..].iter().enumerate() {
            let ch = p / PLANE;
            let v = (px as f64 / 255.0 - norm.mean[ch]) / norm.std[ch];
            features.push(v as f32);
        }
    }
    LabeledDataset::new(features, PIXELS, labels, 10)
}

/// Loads one CIFAR-10 binary batch file.
pub fn load_cifar10_binary(path: &Path, norm: &ChannelNorm) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path)?;
    parse_cifar10_bytes(&bytes, norm)
}

/// Serializes one record; `pixels` is channel-planar R, G, B, 32×32 row-major.
pub fn encode_cifar10_record(label: u8, pixels: &[u8; PIXELS]) -> Vec<u8> {
    let mut out = Vec::with_capacity(CIFAR10_RECORD_LEN);
    out.push(label);
    out.extend_from_slice(pixels);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixels(seed: u32) -> [u8; PIXELS] {
        let mut p = [0u8; PIXELS];
        for (i, v) in p.iter_mut().enumerate() {
            *v = ((i as u32 * 31 + seed * 7) % 256) as u8;
        }
        p
    }

    #[test]
    fn two_records() {
        let mut bytes = encode_cifar10_record(3, &pixels(1));
        bytes.extend(encode_cifar10_record(9, &pixels(2)));
        let d = parse_cifar10_bytes(&bytes, &ChannelNorm::identity()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[3, 9]);
    }

    #[test]
    fn truncated_final_record_names_offset() {
        let mut bytes = encode_cifar10_record(3, &pixels(1));
        bytes.extend(&encode_cifar10_record(1, &pixels(2))[..100]);
        match parse_cifar10_bytes(&bytes, &ChannelNorm::identity()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR10_RECORD_LEN),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range() {
        let mut bytes = encode_cifar10_record(0, &pixels(1));
        bytes.extend(encode_cifar10_record(10, &pixels(2)));
        match parse_cifar10_bytes(&bytes, &ChannelNorm::identity()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, CIFAR10_RECORD_LEN),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn write_then_read_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.bin");
        let px = pixels(5);
        std::fs::write(&path, encode_cifar10_record(7, &px)).unwrap();
        let d = load_cifar10_binary(&path, &ChannelNorm::identity()).unwrap();
        assert_eq!(d.labels(), &[7]);
        let back: Vec<u8> = d.sample(0).iter().map(|&v| (v as f64 * 255.0).round() as u8).collect();
        assert_eq!(back.as_slice(), &px[..]);
    }

    #[test]
    fn per_channel_normalization() {
        let mut px = [0u8; PIXELS];
        px[..PLANE].fill(255);
        px[PLANE..2 * PLANE].fill(51);
        let norm = ChannelNorm {
            mean: [0.5, 0.1, 0.0],
            std: [0.25, 0.5, 2.0],
        };
        let d = parse_cifar10_bytes(&encode_cifar10_record(0, &px), &norm).unwrap();
        let s = d.sample(0);
        assert!((s[0] - 2.0).abs() < 1e-6);
        assert!((s[PLANE] - 0.2).abs() < 1e-6);
        assert_eq!(s[2 * PLANE], 0.0);
    }
}
