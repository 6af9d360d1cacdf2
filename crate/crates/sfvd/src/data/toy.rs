//! Procedural toy video corpus: ten motion programs over rendered shapes.
//!
//! Classes are designed so that *temporal* dynamics, not any single frame,
//! separate the designated pairs: `slide_right`/`slide_left` and
//! `slide_down`/`slide_up` traverse a full wrap-around cycle, so the two
//! directions visit exactly the same frame set in opposite order. All other
//! classes use a shape no other class renders, so one frame suffices.

use super::{LabeledVideo, TargetDataset, Vdim, VideoTensor};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};
use ndarray::Array4;
use rand::Rng as _;

#[derive(Clone, Debug, PartialEq)]
pub struct ToySpec {
    pub classes: usize,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub f: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub seed: u64,
    /// Optional per-class multiplier on the train count (rounded).
    pub imbalance_ratios: Option<Vec<f64>>,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            classes: 10,
            per_class_train: 20,
            per_class_test: 10,
            f: 8,
            c: 1,
            h: 16,
            w: 16,
            seed: 0,
            imbalance_ratios: None,
        }
    }
}

const PROGRAMS: [&str; 10] = [
    "slide_right",
    "slide_left",
    "slide_down",
    "slide_up",
    "rotate",
    "pulse",
    "bounce",
    "flicker",
    "hold",
    "morph",
];

/// Quantize to the 8-bit grid in f32 so values survive the 32-bit container
/// payload and PPM export bit-exactly.
fn q255(v: f64) -> f64 {
    let k = (v * 255.0).round().clamp(0.0, 255.0);
    (k as f32 / 255.0f32) as f64
}

#[derive(Clone, Copy)]
struct VideoParams {
    r0: usize,
    c0: usize,
    phase: usize,
    /// Per-channel intensity (index 0 used when c == 1).
    color: [f64; 3],
}

fn draw_params(seed: u64, c: usize, h: usize, w: usize, test_split: bool) -> VideoParams {
    let mut rng = seeded(seed);
    let r0 = rng.random_range(0..h);
    let c0 = rng.random_range(0..w);
    let phase = rng.random_range(0..4usize);
    let mut color = [0.0; 3];
    for ch in color.iter_mut().take(c.max(1)) {
        // Train intensities use even 8-bit levels, test uses odd levels, so
        // the two splits can never contain an identical video.
        let base = rng.random_range(70..=127u32) * 2;
        let level = if test_split { base + 1 } else { base };
        *ch = (level.min(255) as f32 / 255.0f32) as f64;
    }
    VideoParams { r0, c0, phase, color }
}

type Mask = Vec<(isize, isize)>;

fn square(side: isize) -> Mask {
    let mut m = Vec::new();
    let lo = -(side / 2);
    for dy in lo..lo + side {
        for dx in lo..lo + side {
            m.push((dy, dx));
        }
    }
    m
}

fn thick_cross() -> Mask {
    // 7x7 plus sign with 3-pixel-thick arms
    let mut m = Vec::new();
    for a in -3isize..=3 {
        for b in -1isize..=1 {
            m.push((b, a));
            if a < -1 || a > 1 {
                m.push((a, b));
            }
        }
    }
    m
}

fn bar(orientation: usize) -> Mask {
    (-3isize..=3)
        .map(|d| match orientation % 4 {
            0 => (0, d),
            1 => (d, d),
            2 => (d, 0),
            _ => (d, -d),
        })
        .collect()
}

fn ring6() -> Mask {
    let mut m = Vec::new();
    for x in -3isize..=2 {
        m.push((-3, x));
        m.push((2, x));
    }
    for y in -2isize..=1 {
        m.push((y, -3));
        m.push((y, 2));
    }
    m
}

fn lshape() -> Mask {
    let mut m: Mask = (0..5).map(|d| (d as isize, 0)).collect();
    m.extend((1..4).map(|d| (4, d as isize)));
    m
}

fn tshape() -> Mask {
    let mut m: Mask = (-2isize..=2).map(|d| (-2, d)).collect();
    m.extend((-1isize..=2).map(|d| (d, 0)));
    m
}

fn xshape() -> Mask {
    let mut m = Vec::new();
    for d in -2isize..=2 {
        m.push((d, d));
        if d != 0 {
            m.push((d, -d));
        }
    }
    m
}

fn paint(frame: &mut [f64], dims: &Vdim, mask: &Mask, r: usize, c: usize, color: &[f64; 3]) {
    let (h, w) = (dims.h as isize, dims.w as isize);
    for &(dy, dx) in mask {
        let y = (r as isize + dy).rem_euclid(h) as usize;
        let x = (c as isize + dx).rem_euclid(w) as usize;
        for ch in 0..dims.c {
            frame[ch * dims.h * dims.w + y * dims.w + x] = color[ch];
        }
    }
}

fn render(program: usize, p: &VideoParams, dims: &Vdim) -> Array4<f64> {
    let frame_len = dims.frame_len();
    let mut data = vec![0.0f64; dims.f * frame_len];
    let sx = dims.w / dims.f;
    let sy = dims.h / dims.f;
    let dim_color = {
        let mut c = p.color;
        for v in &mut c {
            *v = q255(*v * 0.45);
        }
        c
    };
    // bounce anchor: a narrow band fully inside the grid
    let bstart = p.r0 % (dims.h - 3);
    for t in 0..dims.f {
        let frame = &mut data[t * frame_len..(t + 1) * frame_len];
        match program {
            0 => paint(frame, dims, &square(6), p.r0, (p.c0 + t * sx) % dims.w, &p.color),
            1 => {
                let col = (p.c0 + dims.w - (t * sx) % dims.w) % dims.w;
                paint(frame, dims, &square(6), p.r0, col, &p.color)
            }
            2 => paint(frame, dims, &thick_cross(), (p.r0 + t * sy) % dims.h, p.c0, &p.color),
            3 => {
                let row = (p.r0 + dims.h - (t * sy) % dims.h) % dims.h;
                paint(frame, dims, &thick_cross(), row, p.c0, &p.color)
            }
            4 => {
                // quarter turn midway through the clip
                let orientation = p.phase + 2 * usize::from(t >= dims.f / 2);
                paint(frame, dims, &bar(orientation), p.r0, p.c0, &p.color)
            }
            5 => {
                // single growth step midway through the clip
                let side = if t < dims.f / 2 { 3isize } else { 5 };
                paint(frame, dims, &square(side), p.r0, p.c0, &p.color)
            }
            6 => {
                // slow bounce: one-pixel triangle wave inside a 3-row band
                let tri = [0usize, 1, 2, 1];
                let row = (bstart + tri[(p.phase + t) % 4]).min(dims.h - 2);
                paint(frame, dims, &square(2), row, p.c0, &p.color)
            }
            7 => {
                let col = if (p.phase + t) % 2 == 0 { &p.color } else { &dim_color };
                paint(frame, dims, &ring6(), p.r0, p.c0, col)
            }
            8 => paint(frame, dims, &lshape(), p.r0, p.c0, &p.color),
            _ => {
                let mask = if t < dims.f / 2 { tshape() } else { xshape() };
                paint(frame, dims, &mask, p.r0, p.c0, &p.color)
            }
        }
    }
    Array4::from_shape_vec((dims.f, dims.c, dims.h, dims.w), data).expect("shape")
}

/// Seed base for one video: ambiguous pair members share their parameter
/// stream so paired videos start from identical poses.
fn video_seed(spec_seed: u64, class: usize, index: usize, test_split: bool) -> u64 {
    let pair_base = match class {
        0 | 1 => 0usize,
        2 | 3 => 2,
        other => other,
    };
    let tag = (pair_base as u64) << 32 | (index as u64) << 1 | u64::from(test_split);
    derive_seed(spec_seed, 0x70f0_0000 ^ tag)
}

pub fn generate_toy_dataset(spec: &ToySpec) -> Result<TargetDataset> {
    if spec.classes < 2 || spec.classes > PROGRAMS.len() {
        return Err(Error::Config(format!(
            "toy classes must be in 2..={}, got {}",
            PROGRAMS.len(),
            spec.classes
        )));
    }
    if spec.per_class_train < 1 {
        return Err(Error::Config("per_class_train must be >= 1".into()));
    }
    if spec.f < 1 || !(spec.c == 1 || spec.c == 3) || spec.h < 8 || spec.w < 8 {
        return Err(Error::Config(format!(
            "toy dims (f={}, c={}, h={}, w={}) violate f>=1, c in {{1,3}}, h,w >= 8",
            spec.f, spec.c, spec.h, spec.w
        )));
    }
    if spec.h % spec.f != 0 || spec.w % spec.f != 0 {
        return Err(Error::Config(format!(
            "toy h and w must be divisible by f for wrap-exact motion, got h={}, w={}, f={}",
            spec.h, spec.w, spec.f
        )));
    }
    if let Some(ratios) = &spec.imbalance_ratios {
        if ratios.len() != spec.classes || ratios.iter().any(|r| *r <= 0.0 || !r.is_finite()) {
            return Err(Error::Config(format!(
                "imbalance_ratios must list {} positive values",
                spec.classes
            )));
        }
    }

    let dims = Vdim::new(spec.f, spec.c, spec.h, spec.w);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..spec.classes {
        let ratio = spec
            .imbalance_ratios
            .as_ref()
            .map(|r| r[class])
            .unwrap_or(1.0);
        let train_count = ((spec.per_class_train as f64 * ratio).round() as usize).max(1);
        for i in 0..train_count {
            let p = draw_params(video_seed(spec.seed, class, i, false), spec.c, spec.h, spec.w, false);
            train.push(LabeledVideo {
                video: VideoTensor::new(render(class, &p, &dims))?,
                label: class,
            });
        }
        for i in 0..spec.per_class_test {
            let p = draw_params(video_seed(spec.seed, class, i, true), spec.c, spec.h, spec.w, true);
            test.push(LabeledVideo {
                video: VideoTensor::new(render(class, &p, &dims))?,
                label: class,
            });
        }
    }

    let mut pairs = Vec::new();
    if spec.classes >= 2 {
        pairs.push((0, 1));
    }
    if spec.classes >= 4 {
        pairs.push((2, 3));
    }

    let ds = TargetDataset {
        class_names: PROGRAMS[..spec.classes].iter().map(|s| s.to_string()).collect(),
        dims,
        train,
        test,
        provenance: format!(
            "toy(classes={}, per_class_train={}, per_class_test={}, f={}, c={}, h={}, w={}, seed={})",
            spec.classes,
            spec.per_class_train,
            spec.per_class_test,
            spec.f,
            spec.c,
            spec.h,
            spec.w,
            spec.seed
        ),
        frame_ambiguous_pairs: pairs,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Axis;
    use std::collections::HashSet;

    #[test]
    fn deterministic_given_seed() {
        let spec = ToySpec {
            classes: 2,
            per_class_train: 1,
            per_class_test: 0,
            f: 4,
            c: 1,
            h: 8,
            w: 8,
            seed: 0,
            imbalance_ratios: None,
        };
        let a = generate_toy_dataset(&spec).unwrap();
        let b = generate_toy_dataset(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len(), 2);
    }

    #[test]
    fn imbalance_ratios_shape_train_counts() {
        let spec = ToySpec {
            classes: 2,
            per_class_train: 10,
            per_class_test: 0,
            imbalance_ratios: Some(vec![1.0, 0.5]),
            ..ToySpec::default()
        };
        let ds = generate_toy_dataset(&spec).unwrap();
        assert_eq!(ds.train_class_counts(), vec![10, 5]);
    }

    #[test]
    fn ambiguous_pair_shares_start_frame_and_full_frame_set() {
        let spec = ToySpec {
            classes: 4,
            per_class_train: 3,
            per_class_test: 2,
            ..ToySpec::default()
        };
        let ds = generate_toy_dataset(&spec).unwrap();
        assert_eq!(ds.frame_ambiguous_pairs, vec![(0, 1), (2, 3)]);
        for &(a, b) in &ds.frame_ambiguous_pairs {
            let avids: Vec<_> = ds.train.iter().filter(|v| v.label == a).collect();
            let bvids: Vec<_> = ds.train.iter().filter(|v| v.label == b).collect();
            for (va, vb) in avids.iter().zip(&bvids) {
                // identical first frame
                assert_eq!(
                    va.video.data.index_axis(Axis(0), 0),
                    vb.video.data.index_axis(Axis(0), 0)
                );
                // identical frame sets (order-insensitive)
                let frames = |v: &LabeledVideo| -> HashSet<Vec<u64>> {
                    (0..v.video.dims().f)
                        .map(|t| {
                            v.video
                                .data
                                .index_axis(Axis(0), t)
                                .iter()
                                .map(|x| x.to_bits())
                                .collect()
                        })
                        .collect()
                };
                assert_eq!(frames(va), frames(vb));
                // but not identical as sequences
                assert_ne!(va.video.data, vb.video.data);
            }
        }
    }

    #[test]
    fn train_and_test_are_disjoint() {
        let ds = generate_toy_dataset(&ToySpec {
            classes: 10,
            per_class_train: 4,
            per_class_test: 4,
            ..ToySpec::default()
        })
        .unwrap();
        for tr in &ds.train {
            for te in &ds.test {
                assert_ne!(tr.video.data, te.video.data);
            }
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let base = ToySpec::default();
        assert!(generate_toy_dataset(&ToySpec { classes: 1, ..base.clone() }).is_err());
        assert!(generate_toy_dataset(&ToySpec { per_class_train: 0, ..base.clone() }).is_err());
        assert!(generate_toy_dataset(&ToySpec { w: 12, ..base.clone() }).is_err());
        assert!(
            generate_toy_dataset(&ToySpec { imbalance_ratios: Some(vec![1.0]), ..base }).is_err()
        );
    }

    #[test]
    fn pixels_survive_f32_quantization() {
        let ds = generate_toy_dataset(&ToySpec {
            classes: 3,
            per_class_train: 2,
            per_class_test: 1,
            ..ToySpec::default()
        })
        .unwrap();
        for lv in ds.train.iter().chain(&ds.test) {
            for &v in lv.video.data.iter() {
                assert_eq!((v as f32) as f64, v);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
