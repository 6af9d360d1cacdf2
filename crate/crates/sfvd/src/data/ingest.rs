//! Ingestion of raw frame directories into a [`TargetDataset`].
//!
//! Expected tree: `root/<class>/<video>/frame_*.ppm` (binary P5/P6), or the
//! same underneath `root/train/` and `root/test/` when both splits exist.
//! Frames are cover-resized and center-cropped to the configured spatial
//! size, uniformly subsampled (or padded by repeating the last frame) to the
//! configured frame count, and scaled to [0, 1].

use super::{LabeledVideo, TargetDataset, VideoTensor};
use crate::error::{Error, Result};
use crate::ppm;
use ndarray::Array4;
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Clone, Debug)]
pub struct IngestLayout {
    pub f: usize,
    pub h: usize,
    pub w: usize,
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::Ingest(format!("cannot list {}: {e}", path.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

fn sorted_files(path: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::Ingest(format!("cannot list {}: {e}", path.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    Ok(files)
}

/// Bilinear sample of a source image at fractional coordinates, per channel,
/// computed in f32 so results land on the 32-bit grid the container stores.
fn bilinear(img: &ppm::Image, ch: usize, y: f32, x: f32) -> f64 {
    let y0 = (y.floor() as isize).clamp(0, img.height as isize - 1) as usize;
    let x0 = (x.floor() as isize).clamp(0, img.width as isize - 1) as usize;
    let y1 = (y0 + 1).min(img.height - 1);
    let x1 = (x0 + 1).min(img.width - 1);
    let fy = (y - y0 as f32).clamp(0.0, 1.0);
    let fx = (x - x0 as f32).clamp(0.0, 1.0);
    let at = |yy: usize, xx: usize| -> f32 {
        img.data[(yy * img.width + xx) * img.channels + ch] as f32 / 255.0
    };
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bot * fy) as f64
}

/// Cover-resize + center-crop one frame into `(c, h, w)` reals appended to `out`.
fn fit_frame(img: &ppm::Image, h: usize, w: usize, out: &mut Vec<f64>) {
    if img.height == h && img.width == w {
        for ch in 0..img.channels {
            for y in 0..h {
                for x in 0..w {
                    out.push(img.sample(ch, y, x));
                }
            }
        }
        return;
    }
    let scale = (h as f32 / img.height as f32).max(w as f32 / img.width as f32);
    let src_h = img.height as f32;
    let src_w = img.width as f32;
    // center of target pixel mapped back into source coordinates
    let off_y = (src_h - h as f32 / scale) / 2.0;
    let off_x = (src_w - w as f32 / scale) / 2.0;
    for ch in 0..img.channels {
        for y in 0..h {
            for x in 0..w {
                let sy = off_y + (y as f32 + 0.5) / scale - 0.5;
                let sx = off_x + (x as f32 + 0.5) / scale - 0.5;
                out.push(bilinear(img, ch, sy, sx));
            }
        }
    }
}

fn load_video(dir: &Path, layout: &IngestLayout) -> Result<Array4<f64>> {
    let files = sorted_files(dir)?;
    if files.is_empty() {
        return Err(Error::Ingest(format!(
            "video directory {} contains no frames",
            dir.display()
        )));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut channels = None;
    let mut src_dims = None;
    for file in &files {
        let bytes = fs::read(file)
            .map_err(|e| Error::Ingest(format!("cannot read {}: {e}", file.display())))?;
        let img = ppm::parse(&bytes)
            .map_err(|e| Error::Ingest(format!("{}: {e}", file.display())))?;
        if let Some(c) = channels {
            if c != img.channels {
                return Err(Error::Ingest(format!(
                    "{}: channel count differs within video",
                    file.display()
                )));
            }
        }
        if let Some((sh, sw)) = src_dims {
            if (img.height, img.width) != (sh, sw) {
                return Err(Error::Ingest(format!(
                    "{}: frame size {}x{} differs from {}x{} within video",
                    file.display(),
                    img.height,
                    img.width,
                    sh,
                    sw
                )));
            }
        }
        channels = Some(img.channels);
        src_dims = Some((img.height, img.width));
        frames.push(img);
    }
    let c = channels.unwrap();
    let source_count = frames.len();
    // Uniform stride selection floor(j * S / f); repeat the last frame when short.
    let mut data = Vec::with_capacity(layout.f * c * layout.h * layout.w);
    for j in 0..layout.f {
        let idx = if source_count >= layout.f {
            j * source_count / layout.f
        } else {
            j.min(source_count - 1)
        };
        fit_frame(&frames[idx], layout.h, layout.w, &mut data);
    }
    Ok(Array4::from_shape_vec((layout.f, c, layout.h, layout.w), data).expect("shape"))
}

fn ingest_split(
    root: &Path,
    layout: &IngestLayout,
    class_names: &[String],
) -> Result<Vec<LabeledVideo>> {
    let mut out = Vec::new();
    for class_dir in sorted_dirs(root)? {
        let name = class_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        let label = class_names
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Ingest(format!("unknown class directory {name:?}")))?;
        for video_dir in sorted_dirs(&class_dir)? {
            let data = load_video(&video_dir, layout)?;
            out.push(LabeledVideo {
                video: VideoTensor::new(data)?,
                label,
            });
        }
    }
    Ok(out)
}

/// Ingest `root` into a dataset. When `root/train` exists, it provides the
/// train split and `root/test` (optional) the test split; otherwise `root`
/// itself is the train split.
pub fn ingest_frame_dirs(root: &Path, layout: &IngestLayout) -> Result<TargetDataset> {
    if layout.f < 1 || layout.h < 8 || layout.w < 8 {
        return Err(Error::Config(format!(
            "ingest layout needs f >= 1 and h, w >= 8, got f={}, h={}, w={}",
            layout.f, layout.h, layout.w
        )));
    }
    let train_root = if root.join("train").is_dir() {
        root.join("train")
    } else {
        root.to_path_buf()
    };
    let class_names: Vec<String> = sorted_dirs(&train_root)?
        .into_iter()
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .collect();
    if class_names.is_empty() {
        return Err(Error::Ingest(format!(
            "no class directories under {}",
            train_root.display()
        )));
    }
    let train = ingest_split(&train_root, layout, &class_names)?;
    let test = if root.join("train").is_dir() && root.join("test").is_dir() {
        ingest_split(&root.join("test"), layout, &class_names)?
    } else {
        vec![]
    };
    if train.is_empty() {
        return Err(Error::Ingest("ingested zero train videos".into()));
    }
    let dims = train[0].video.dims();
    let ds = TargetDataset {
        class_names,
        dims,
        train,
        test,
        provenance: format!("ingested from {}", root.display()),
        frame_ambiguous_pairs: vec![],
    };
    ds.validate().map_err(|e| match e {
        Error::Data(m) => Error::Ingest(m),
        other => other,
    })?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vdim;
    use crate::ppm::Image;

    fn write_frame(dir: &Path, name: &str, img: &Image) {
        fs::create_dir_all(dir).unwrap();
        fs::write(dir.join(name), ppm::write(img).unwrap()).unwrap();
    }

    fn flat_gray(level: u8, h: usize, w: usize) -> Image {
        Image::new(1, h, w, vec![level; h * w])
    }

    #[test]
    fn single_class_identical_frames() {
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("walk/v0");
        for i in 0..16 {
            write_frame(&vdir, &format!("frame_{i:03}.pgm"), &flat_gray(128, 8, 8));
        }
        let ds = ingest_frame_dirs(tmp.path(), &IngestLayout { f: 16, h: 8, w: 8 }).unwrap();
        assert_eq!(ds.train.len(), 1);
        assert_eq!(ds.class_names, vec!["walk"]);
        let v = &ds.train[0].video.data;
        let first = v.index_axis(ndarray::Axis(0), 0).to_owned();
        for t in 0..16 {
            assert_eq!(v.index_axis(ndarray::Axis(0), t), first);
        }
        assert_eq!(v[[0, 0, 0, 0]], (128.0f32 / 255.0) as f64);
    }

    #[test]
    fn rgb_scaling_identity() {
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("red/v0");
        let mut data = Vec::new();
        for _ in 0..64 {
            data.extend_from_slice(&[255, 0, 0]);
        }
        write_frame(&vdir, "f0.ppm", &Image::new(3, 8, 8, data));
        let ds = ingest_frame_dirs(tmp.path(), &IngestLayout { f: 1, h: 8, w: 8 }).unwrap();
        let v = &ds.train[0].video.data;
        assert_eq!(v[[0, 0, 3, 3]], 1.0);
        assert_eq!(v[[0, 1, 3, 3]], 0.0);
        assert_eq!(v[[0, 2, 3, 3]], 0.0);
    }

    #[test]
    fn uniform_stride_selects_expected_indices() {
        // 32 source frames, f=16 -> indices {0, 2, 4, ..., 30}; encode the
        // frame index in the pixel level to observe the selection.
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("cls/v0");
        for i in 0..32u32 {
            write_frame(&vdir, &format!("f{i:03}.pgm"), &flat_gray(i as u8, 8, 8));
        }
        let ds = ingest_frame_dirs(tmp.path(), &IngestLayout { f: 16, h: 8, w: 8 }).unwrap();
        let v = &ds.train[0].video.data;
        for j in 0..16 {
            let expect = ((2 * j) as f32 / 255.0) as f64;
            assert_eq!(v[[j, 0, 0, 0]], expect, "frame {j}");
        }
    }

    #[test]
    fn short_video_pads_by_repeat() {
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("cls/v0");
        write_frame(&vdir, "a.pgm", &flat_gray(10, 8, 8));
        write_frame(&vdir, "b.pgm", &flat_gray(20, 8, 8));
        let ds = ingest_frame_dirs(tmp.path(), &IngestLayout { f: 4, h: 8, w: 8 }).unwrap();
        let v = &ds.train[0].video.data;
        let lv = |t: usize| v[[t, 0, 0, 0]];
        assert_eq!(lv(0), (10.0f32 / 255.0) as f64);
        assert_eq!(lv(1), (20.0f32 / 255.0) as f64);
        assert_eq!(lv(2), lv(1));
        assert_eq!(lv(3), lv(1));
    }

    #[test]
    fn malformed_header_names_file() {
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("cls/v0");
        fs::create_dir_all(&vdir).unwrap();
        fs::write(vdir.join("bad.ppm"), b"P9 broken").unwrap();
        let err = ingest_frame_dirs(tmp.path(), &IngestLayout { f: 1, h: 8, w: 8 }).unwrap_err();
        assert!(err.to_string().contains("bad.ppm"), "{err}");
    }

    #[test]
    fn inconsistent_sizes_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("cls/v0");
        write_frame(&vdir, "a.pgm", &flat_gray(1, 8, 8));
        write_frame(&vdir, "b.pgm", &flat_gray(1, 9, 8));
        let err = ingest_frame_dirs(tmp.path(), &IngestLayout { f: 2, h: 8, w: 8 }).unwrap_err();
        assert!(err.to_string().contains("differs"), "{err}");
    }

    #[test]
    fn resize_crop_lands_on_target_dims() {
        let tmp = tempfile::tempdir().unwrap();
        let vdir = tmp.path().join("cls/v0");
        write_frame(&vdir, "a.pgm", &flat_gray(100, 20, 32));
        let ds = ingest_frame_dirs(tmp.path(), &IngestLayout { f: 2, h: 8, w: 8 }).unwrap();
        assert_eq!(ds.dims, Vdim::new(2, 1, 8, 8));
        // flat image stays flat under bilinear resampling
        let expect = (100.0f32 / 255.0) as f64;
        for v in ds.train[0].video.data.iter() {
            assert!((v - expect).abs() < 1e-9);
        }
    }
}
