//! On-disk dataset container.
//!
//! Layout: magic `SFVDDS1\n`, a UTF-8 `key: value` manifest terminated by a
//! blank line, then a raw little-endian payload of 32-bit IEEE-754 floats
//! (train videos in order, then test videos). The manifest carries a CRC-32
//! of the payload; readers verify it and report byte offsets on truncation.

use super::{LabeledVideo, TargetDataset, Vdim, VideoTensor};
use crate::error::{Error, Result};
use ndarray::Array4;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const MAGIC: &[u8] = b"SFVDDS1\n";
const VERSION: u32 = 1;

/// Guard against hostile manifests requesting absurd allocations.
const MAX_TOTAL_REALS: usize = 1 << 28;

fn push_kv(out: &mut String, key: &str, value: impl std::fmt::Display) {
    out.push_str(key);
    out.push_str(": ");
    out.push_str(&value.to_string());
    out.push('\n');
}

fn csv_usize(values: impl Iterator<Item = usize>) -> String {
    values.map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Serialize a dataset to `bytes` (manifest + f32 payload).
pub fn encode(ds: &TargetDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut payload = Vec::with_capacity((ds.train.len() + ds.test.len()) * ds.dims.len() * 4);
    for lv in ds.train.iter().chain(&ds.test) {
        for &v in lv.video.data.as_slice().expect("standard layout") {
            payload.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&payload);

    let mut m = String::new();
    push_kv(&mut m, "version", VERSION);
    push_kv(&mut m, "classes", ds.class_names.join(","));
    push_kv(&mut m, "f", ds.dims.f);
    push_kv(&mut m, "c", ds.dims.c);
    push_kv(&mut m, "h", ds.dims.h);
    push_kv(&mut m, "w", ds.dims.w);
    push_kv(&mut m, "train_count", ds.train.len());
    push_kv(&mut m, "test_count", ds.test.len());
    push_kv(&mut m, "train_labels", csv_usize(ds.train.iter().map(|v| v.label)));
    push_kv(&mut m, "test_labels", csv_usize(ds.test.iter().map(|v| v.label)));
    push_kv(
        &mut m,
        "frame_ambiguous_pairs",
        ds.frame_ambiguous_pairs
            .iter()
            .map(|(a, b)| format!("{a}-{b}"))
            .collect::<Vec<_>>()
            .join(","),
    );
    push_kv(&mut m, "provenance", ds.provenance.replace('\n', " "));
    push_kv(&mut m, "payload_len", payload.len());
    push_kv(&mut m, "payload_crc32", format!("{crc:08x}"));

    let mut out = Vec::with_capacity(MAGIC.len() + m.len() + 1 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(m.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

/// Parse `key: value` manifest lines (liberal about spacing after ':').
fn parse_manifest(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("manifest line without ':': {line:?}")))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn req<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("manifest missing key `{key}`")))
}

fn req_usize(m: &BTreeMap<String, String>, key: &str) -> Result<usize> {
    req(m, key)?
        .parse()
        .map_err(|_| Error::Format(format!("manifest key `{key}` is not an integer")))
}

fn parse_labels(text: &str, what: &str) -> Result<Vec<usize>> {
    if text.is_empty() {
        return Ok(vec![]);
    }
    text.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad {what} entry {t:?}")))
        })
        .collect()
}

/// Decode a container from raw bytes.
pub fn decode(bytes: &[u8]) -> Result<TargetDataset> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic, expected SFVDDS1".into()));
    }
    // Manifest ends at the first blank line.
    let rest = &bytes[MAGIC.len()..];
    let sep = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("manifest not terminated by a blank line".into()))?;
    let manifest_text = std::str::from_utf8(&rest[..sep + 1])
        .map_err(|_| Error::Format("manifest is not UTF-8".into()))?;
    let payload_start = MAGIC.len() + sep + 2;
    let payload = &bytes[payload_start..];

    let m = parse_manifest(manifest_text)?;
    let version: u32 = req(&m, "version")?
        .parse()
        .map_err(|_| Error::Format("bad version field".into()))?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported container version {version}, expected {VERSION}"
        )));
    }
    let class_names: Vec<String> = req(&m, "classes")?
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if class_names.is_empty() {
        return Err(Error::Format("container declares no classes".into()));
    }
    let dims = Vdim::new(
        req_usize(&m, "f")?,
        req_usize(&m, "c")?,
        req_usize(&m, "h")?,
        req_usize(&m, "w")?,
    );
    let train_count = req_usize(&m, "train_count")?;
    let test_count = req_usize(&m, "test_count")?;
    let total_reals = dims
        .len()
        .checked_mul(train_count + test_count)
        .filter(|&n| n <= MAX_TOTAL_REALS)
        .ok_or_else(|| Error::Format("declared payload exceeds size limits".into()))?;

    let declared_len = req_usize(&m, "payload_len")?;
    if declared_len != total_reals * 4 {
        return Err(Error::Format(format!(
            "payload_len {declared_len} does not match declared shapes ({} reals)",
            total_reals
        )));
    }
    if payload.len() < declared_len {
        return Err(Error::Format(format!(
            "payload truncated at byte offset {}: expected {declared_len} bytes, found {}",
            payload_start + payload.len(),
            payload.len()
        )));
    }
    let payload = &payload[..declared_len];
    let declared_crc = u32::from_str_radix(req(&m, "payload_crc32")?, 16)
        .map_err(|_| Error::Format("bad payload_crc32 field".into()))?;
    let actual_crc = crc32fast::hash(payload);
    if actual_crc != declared_crc {
        return Err(Error::Format(format!(
            "payload checksum mismatch at byte offset {payload_start}: crc {actual_crc:08x}, manifest {declared_crc:08x}"
        )));
    }

    let train_labels = parse_labels(req(&m, "train_labels")?, "train label")?;
    let test_labels = parse_labels(req(&m, "test_labels")?, "test label")?;
    if train_labels.len() != train_count || test_labels.len() != test_count {
        return Err(Error::Format("label lists do not match declared counts".into()));
    }
    let pairs_text = req(&m, "frame_ambiguous_pairs")?;
    let mut frame_ambiguous_pairs = Vec::new();
    if !pairs_text.is_empty() {
        for p in pairs_text.split(',') {
            let (a, b) = p
                .split_once('-')
                .ok_or_else(|| Error::Format(format!("bad ambiguous pair {p:?}")))?;
            frame_ambiguous_pairs.push((
                a.trim().parse().map_err(|_| Error::Format(format!("bad pair {p:?}")))?,
                b.trim().parse().map_err(|_| Error::Format(format!("bad pair {p:?}")))?,
            ));
        }
    }

    let mut reals = Vec::with_capacity(total_reals);
    for chunk in payload.chunks_exact(4) {
        reals.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let vlen = dims.len();
    let take = |labels: &[usize], offset: usize| -> Result<Vec<LabeledVideo>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, &label)| {
                let start = (offset + i) * vlen;
                let data = Array4::from_shape_vec(
                    (dims.f, dims.c, dims.h, dims.w),
                    reals[start..start + vlen].to_vec(),
                )
                .expect("shape");
                Ok(LabeledVideo {
                    video: VideoTensor::new(data)?,
                    label,
                })
            })
            .collect()
    };
    let train = take(&train_labels, 0)?;
    let test = take(&test_labels, train_count)?;

    let ds = TargetDataset {
        class_names,
        dims,
        train,
        test,
        provenance: req(&m, "provenance")?.to_string(),
        frame_ambiguous_pairs,
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a container atomically (temp file + rename).
pub fn write_container(ds: &TargetDataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<TargetDataset> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::toy::{generate_toy_dataset, ToySpec};

    fn sample() -> TargetDataset {
        generate_toy_dataset(&ToySpec {
            classes: 3,
            per_class_train: 2,
            per_class_test: 1,
            f: 4,
            c: 1,
            h: 8,
            w: 8,
            seed: 5,
            imbalance_ratios: None,
        })
        .unwrap()
    }

    #[test]
    fn roundtrip_is_identity() {
        let ds = sample();
        let bytes = encode(&ds).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn roundtrip_through_file() {
        let ds = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy.sfvd");
        write_container(&ds, &path).unwrap();
        assert_eq!(read_container(&path).unwrap(), ds);
    }

    #[test]
    fn rejects_unknown_version() {
        let ds = sample();
        let bytes = encode(&ds).unwrap();
        let text = String::from_utf8_lossy(&bytes[..200]).into_owned();
        assert!(text.contains("version: 1"));
        let mut corrupted = bytes.clone();
        let pos = bytes
            .windows(10)
            .position(|w| w == b"version: 1")
            .unwrap();
        corrupted[pos + 9] = b'7';
        let err = decode(&corrupted).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn flipping_a_payload_byte_fails_checksum() {
        let ds = sample();
        let mut bytes = encode(&ds).unwrap();
        let last = bytes.len() - 3;
        bytes[last] ^= 0x40;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn truncation_reports_byte_offset() {
        let ds = sample();
        let bytes = encode(&ds).unwrap();
        let err = decode(&bytes[..bytes.len() - 10]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("truncated") && msg.contains("byte offset"), "{msg}");
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(decode(b"NOTMAGIC").is_err());
    }
}
