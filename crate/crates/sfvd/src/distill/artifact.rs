//! On-disk format for distilled artifacts (all three modes).
//!
//! Same container conventions as the dataset format: magic `SFVDSY1\n`,
//! UTF-8 `key: value` manifest ending in a blank line, then a raw
//! little-endian payload with a CRC-32 recorded in the manifest. Learnable
//! state is stored as f64; embedded real videos as f32 (they come off the
//! 32-bit dataset grid). The manifest reports the byte count of the frame
//! payload and of the temporal extras separately so storage accounting
//! stays explicit.

use super::{FusedSyntheticSet, SyntheticSet};
use crate::data::Vdim;
use crate::error::{Error, Result};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

pub const MAGIC: &[u8] = b"SFVDSY1\n";

#[derive(Clone, Debug, PartialEq)]
pub enum DistilledArtifact {
    Sfvd(SyntheticSet),
    SfvdT(FusedSyntheticSet),
    FullVideo(SyntheticSet),
}

impl DistilledArtifact {
    pub fn mode(&self) -> &'static str {
        match self {
            DistilledArtifact::Sfvd(_) => "sfvd",
            DistilledArtifact::SfvdT(_) => "sfvd_t",
            DistilledArtifact::FullVideo(_) => "fullvideo",
        }
    }

    pub fn base(&self) -> &SyntheticSet {
        match self {
            DistilledArtifact::Sfvd(s) | DistilledArtifact::FullVideo(s) => s,
            DistilledArtifact::SfvdT(f) => &f.base,
        }
    }

    /// Materialized `(f, c, h, w)` videos with hard labels (and soft labels
    /// when present).
    pub fn materialize(&self) -> Result<Vec<(Vec<f64>, usize, Option<Vec<f64>>)>> {
        let base = self.base();
        let mut out = Vec::with_capacity(base.items());
        for item in 0..base.items() {
            let video = match self {
                DistilledArtifact::Sfvd(s) | DistilledArtifact::FullVideo(s) => {
                    s.materialize_item(item)?
                }
                DistilledArtifact::SfvdT(f) => f.materialize_item(item)?,
            };
            let soft = base.soft_labels.as_ref().map(|s| s[item].clone());
            out.push((video, base.labels[item], soft));
        }
        Ok(out)
    }
}

fn push_f64(payload: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        payload.extend_from_slice(&v.to_le_bytes());
    }
}

fn push_f32(payload: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        payload.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode(artifact: &DistilledArtifact) -> Result<Vec<u8>> {
    let base = artifact.base();
    let mut payload = Vec::new();
    let mut sections = Vec::new();

    push_f64(&mut payload, &base.frames);
    sections.push(format!("frames f64 {}", base.frames.len()));
    if let Some(soft) = &base.soft_labels {
        let flat: Vec<f64> = soft.iter().flatten().copied().collect();
        push_f64(&mut payload, &flat);
        sections.push(format!("soft_labels f64 {}", flat.len()));
    }
    let mut frame_bytes = payload.len();
    if let DistilledArtifact::SfvdT(fused) = artifact {
        push_f64(&mut payload, &fused.fusion);
        sections.push(format!("fusion f64 {}", fused.fusion.len()));
        let flat: Vec<f64> = fused.videos.iter().flatten().copied().collect();
        push_f32(&mut payload, &flat);
        sections.push(format!("videos f32 {}", flat.len()));
    }
    let temporal_bytes = payload.len() - frame_bytes;
    if matches!(artifact, DistilledArtifact::FullVideo(_)) {
        frame_bytes = payload.len();
    }

    let crc = crc32fast::hash(&payload);
    let mut m = String::new();
    let mut kv = |k: &str, v: String| {
        m.push_str(k);
        m.push_str(": ");
        m.push_str(&v);
        m.push('\n');
    };
    kv("version", "1".into());
    kv("mode", artifact.mode().into());
    kv("ipc", base.ipc.to_string());
    kv("k", base.k.to_string());
    kv("num_classes", base.num_classes.to_string());
    kv("f", base.dims.f.to_string());
    kv("c", base.dims.c.to_string());
    kv("h", base.dims.h.to_string());
    kv("w", base.dims.w.to_string());
    kv("items", base.items().to_string());
    kv(
        "labels",
        base.labels
            .iter()
            .map(|l| l.to_string())
            .collect::<Vec<_>>()
            .join(","),
    );
    kv(
        "label_mode",
        if base.soft_labels.is_some() { "soft" } else { "hard" }.into(),
    );
    kv("inner_lr", {
        let lr = match artifact {
            DistilledArtifact::SfvdT(f) => f.inner_lr,
            _ => base.inner_lr,
        };
        format!("{lr:?}")
    });
    kv("provenance_seed", base.provenance_seed.to_string());
    if let DistilledArtifact::SfvdT(fused) = artifact {
        kv("base_inner_lr", format!("{:?}", fused.base.inner_lr));
        kv(
            "video_refs",
            fused
                .video_refs
                .iter()
                .map(|r| r.to_string())
                .collect::<Vec<_>>()
                .join(","),
        );
        kv("fusion_param_count", fused.fusion.len().to_string());
    }
    kv("frame_payload_bytes", frame_bytes.to_string());
    kv("temporal_extra_bytes", temporal_bytes.to_string());
    for s in &sections {
        kv("section", s.clone());
    }
    kv("payload_len", payload.len().to_string());
    kv("payload_crc32", format!("{crc:08x}"));

    let mut out = Vec::with_capacity(MAGIC.len() + m.len() + 1 + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(m.as_bytes());
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

struct Manifest {
    map: BTreeMap<String, String>,
    sections: Vec<(String, String, usize)>,
}

fn parse_manifest(text: &str) -> Result<Manifest> {
    let mut map = BTreeMap::new();
    let mut sections = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once(':')
            .ok_or_else(|| Error::Format(format!("artifact manifest line without ':': {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if k == "section" {
            let parts: Vec<&str> = v.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad section line {v:?}")));
            }
            let count: usize = parts[2]
                .parse()
                .map_err(|_| Error::Format(format!("bad section count in {v:?}")))?;
            sections.push((parts[0].to_string(), parts[1].to_string(), count));
        } else {
            map.insert(k.to_string(), v.to_string());
        }
    }
    Ok(Manifest { map, sections })
}

fn req<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    m.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Format(format!("artifact manifest missing key `{key}`")))
}

fn req_parse<T: std::str::FromStr>(m: &BTreeMap<String, String>, key: &str) -> Result<T> {
    req(m, key)?
        .parse()
        .map_err(|_| Error::Format(format!("bad artifact manifest value for `{key}`")))
}

/// Size guard against hostile manifests.
const MAX_SECTION_REALS: usize = 1 << 27;

pub fn decode(bytes: &[u8]) -> Result<DistilledArtifact> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("bad magic, expected SFVDSY1".into()));
    }
    let rest = &bytes[MAGIC.len()..];
    let sep = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| Error::Format("artifact manifest not terminated by blank line".into()))?;
    let text = std::str::from_utf8(&rest[..sep + 1])
        .map_err(|_| Error::Format("artifact manifest is not UTF-8".into()))?;
    let payload_start = MAGIC.len() + sep + 2;
    let payload = &bytes[payload_start..];
    let man = parse_manifest(text)?;
    let m = &man.map;
    let version: u32 = req_parse(m, "version")?;
    if version != 1 {
        return Err(Error::Format(format!(
            "unsupported artifact version {version}"
        )));
    }
    let declared_len: usize = req_parse(m, "payload_len")?;
    if payload.len() < declared_len {
        return Err(Error::Format(format!(
            "artifact payload truncated at byte offset {}: expected {declared_len} bytes, found {}",
            payload_start + payload.len(),
            payload.len()
        )));
    }
    let payload = &payload[..declared_len];
    let declared_crc = u32::from_str_radix(req(m, "payload_crc32")?, 16)
        .map_err(|_| Error::Format("bad payload_crc32".into()))?;
    if crc32fast::hash(payload) != declared_crc {
        return Err(Error::Format(format!(
            "artifact payload checksum mismatch at byte offset {payload_start}"
        )));
    }

    let mode = req(m, "mode")?.to_string();
    let dims = Vdim::new(
        req_parse(m, "f")?,
        req_parse(m, "c")?,
        req_parse(m, "h")?,
        req_parse(m, "w")?,
    );
    let items: usize = req_parse(m, "items")?;
    let labels: Vec<usize> = req(m, "labels")?
        .split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad label {s:?}")))
        })
        .collect::<Result<_>>()?;
    if labels.len() != items {
        return Err(Error::Format("label count does not match items".into()));
    }
    let inner_lr: f64 = req_parse(m, "inner_lr")?;

    // walk the declared sections
    let mut offset = 0usize;
    let mut sections: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (name, dtype, count) in &man.sections {
        if *count > MAX_SECTION_REALS {
            return Err(Error::Format(format!("section {name} exceeds size limits")));
        }
        let width = match dtype.as_str() {
            "f64" => 8,
            "f32" => 4,
            other => return Err(Error::Format(format!("unknown section dtype {other:?}"))),
        };
        let need = count * width;
        if offset + need > payload.len() {
            return Err(Error::Format(format!(
                "section {name} truncated at payload offset {offset}"
            )));
        }
        let raw = &payload[offset..offset + need];
        let vals: Vec<f64> = match dtype.as_str() {
            "f64" => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            _ => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        sections.insert(name.clone(), vals);
        offset += need;
    }

    let frames = sections
        .remove("frames")
        .ok_or_else(|| Error::Format("artifact missing frames section".into()))?;
    let k: usize = req_parse(m, "k")?;
    let num_classes: usize = req_parse(m, "num_classes")?;
    if frames.len() != items * k * dims.frame_len() {
        return Err(Error::Format("frames section length mismatch".into()));
    }
    let soft_labels = match sections.remove("soft_labels") {
        Some(flat) => {
            if flat.len() != items * num_classes {
                return Err(Error::Format("soft_labels section length mismatch".into()));
            }
            Some(
                flat.chunks(num_classes)
                    .map(|c| c.to_vec())
                    .collect::<Vec<_>>(),
            )
        }
        None => None,
    };
    let base_inner_lr = match m.get("base_inner_lr") {
        Some(v) => v
            .parse()
            .map_err(|_| Error::Format("bad base_inner_lr".into()))?,
        None => inner_lr,
    };
    let base = SyntheticSet {
        dims,
        ipc: req_parse(m, "ipc")?,
        k,
        num_classes,
        frames,
        labels,
        soft_labels,
        inner_lr: base_inner_lr,
        provenance_seed: req_parse(m, "provenance_seed")?,
    };
    match mode.as_str() {
        "sfvd" => Ok(DistilledArtifact::Sfvd(base)),
        "fullvideo" => Ok(DistilledArtifact::FullVideo(base)),
        "sfvd_t" => {
            let fusion = sections
                .remove("fusion")
                .ok_or_else(|| Error::Format("sfvd_t artifact missing fusion section".into()))?;
            let videos_flat = sections
                .remove("videos")
                .ok_or_else(|| Error::Format("sfvd_t artifact missing videos section".into()))?;
            if videos_flat.len() != items * dims.len() {
                return Err(Error::Format("videos section length mismatch".into()));
            }
            let video_refs: Vec<usize> = req(m, "video_refs")?
                .split(',')
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Format(format!("bad video ref {s:?}")))
                })
                .collect::<Result<_>>()?;
            if video_refs.len() != items {
                return Err(Error::Format("video_refs count mismatch".into()));
            }
            let videos: Vec<Vec<f64>> = videos_flat
                .chunks(dims.len())
                .map(|c| c.to_vec())
                .collect();
            Ok(DistilledArtifact::SfvdT(FusedSyntheticSet {
                base,
                video_refs,
                videos,
                fusion,
                inner_lr,
            }))
        }
        other => Err(Error::Format(format!("unknown artifact mode {other:?}"))),
    }
}

pub fn write_artifact(artifact: &DistilledArtifact, path: &Path) -> Result<()> {
    let bytes = encode(artifact)?;
    let tmp = path.with_extension("tmp");
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(&bytes)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_artifact(path: &Path) -> Result<DistilledArtifact> {
    let bytes = fs::read(path)
        .map_err(|e| Error::Format(format!("cannot read {}: {e}", path.display())))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::{init_synthetic, InitMode, LabelMode};

    fn sample_set(soft: bool) -> SyntheticSet {
        let ds = crate::data::generate_toy_dataset(&crate::data::ToySpec {
            classes: 2,
            per_class_train: 3,
            per_class_test: 1,
            f: 4,
            c: 1,
            h: 8,
            w: 8,
            seed: 3,
            imbalance_ratios: None,
        })
        .unwrap();
        let mut set =
            init_synthetic(&ds, 1, 1, 5, LabelMode::Hard, InitMode::RealSample, 0.015).unwrap();
        if soft {
            set.soft_labels = Some(vec![vec![0.25, -1.5], vec![-0.125, 2.0]]);
        }
        set
    }

    #[test]
    fn sfvd_roundtrip_bit_exact() {
        for soft in [false, true] {
            let set = sample_set(soft);
            let art = DistilledArtifact::Sfvd(set);
            let bytes = encode(&art).unwrap();
            assert_eq!(decode(&bytes).unwrap(), art);
        }
    }

    #[test]
    fn sfvd_t_roundtrip_bit_exact() {
        let set = sample_set(false);
        let dims = set.dims;
        let items = set.items();
        let fused = FusedSyntheticSet {
            base: set,
            video_refs: vec![0, 4],
            videos: (0..items)
                .map(|i| (0..dims.len()).map(|j| (((i + j) % 7) as f32 / 7.0f32) as f64).collect())
                .collect(),
            fusion: (0..crate::models::FusionLayer::new(dims.c).param_count())
                .map(|i| i as f64 * 0.125)
                .collect(),
            inner_lr: 0.03125,
        };
        let art = DistilledArtifact::SfvdT(fused);
        let bytes = encode(&art).unwrap();
        assert_eq!(decode(&bytes).unwrap(), art);
    }

    #[test]
    fn corruption_and_truncation_detected() {
        let art = DistilledArtifact::Sfvd(sample_set(false));
        let mut bytes = encode(&art).unwrap();
        let n = bytes.len();
        bytes[n - 5] ^= 1;
        assert!(decode(&bytes).unwrap_err().to_string().contains("checksum"));
        let bytes = encode(&art).unwrap();
        let err = decode(&bytes[..bytes.len() - 4]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn file_roundtrip() {
        let art = DistilledArtifact::FullVideo(sample_set(false));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.sfvdsy");
        write_artifact(&art, &path).unwrap();
        assert_eq!(read_artifact(&path).unwrap(), art);
    }
}
