//! Datasets, frame sampling, and the on-disk container.

pub mod container;
pub mod ingest;
pub mod toy;

use crate::error::{Error, Result};
use crate::interpolation::{self, InterpKind};
use crate::rng::{derive_seed, seeded, Rng};
use ndarray::Array4;
use rand::Rng as _;

pub use toy::{generate_toy_dataset, ToySpec};

/// Video dimensions `(f, c, h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vdim {
    pub f: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Vdim {
    pub fn new(f: usize, c: usize, h: usize, w: usize) -> Self {
        Vdim { f, c, h, w }
    }
    /// Reals per video.
    pub fn len(&self) -> usize {
        self.f * self.c * self.h * self.w
    }
    /// Reals per frame.
    pub fn frame_len(&self) -> usize {
        self.c * self.h * self.w
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Vdim {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{},{})", self.f, self.c, self.h, self.w)
    }
}

/// Rank-4 sample `(f, c, h, w)`, unit-scaled.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    pub data: Array4<f64>,
}

impl VideoTensor {
    /// Validates the shape contract for ingested/generated videos
    /// (synthetic learnable frames do not pass through here).
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (f, c, h, w) = data.dim();
        if f < 1 || !(c == 1 || c == 3) || h < 8 || w < 8 {
            return Err(Error::Data(format!(
                "video shape ({f},{c},{h},{w}) violates f>=1, c in {{1,3}}, h,w >= 8"
            )));
        }
        if data.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Data(
                "video entries must be finite and within [0, 1]".into(),
            ));
        }
        Ok(VideoTensor { data })
    }

    pub fn dims(&self) -> Vdim {
        let (f, c, h, w) = self.data.dim();
        Vdim::new(f, c, h, w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledVideo {
    pub video: VideoTensor,
    pub label: usize,
}

/// A dataset with train/test splits sharing one shape.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetDataset {
    pub class_names: Vec<String>,
    pub dims: Vdim,
    pub train: Vec<LabeledVideo>,
    pub test: Vec<LabeledVideo>,
    /// Free-form origin note carried into the container manifest.
    pub provenance: String,
    /// Class index pairs that share identical frame *sets* and differ only in
    /// temporal order (single-frame information cannot separate them).
    pub frame_ambiguous_pairs: Vec<(usize, usize)>,
}

impl TargetDataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        for lv in self.train.iter().chain(&self.test) {
            if lv.label >= self.num_classes() {
                return Err(Error::Data(format!(
                    "label {} out of range for {} classes",
                    lv.label,
                    self.num_classes()
                )));
            }
            if lv.video.dims() != self.dims {
                return Err(Error::Data(format!(
                    "video dims {} differ from dataset dims {}",
                    lv.video.dims(),
                    self.dims
                )));
            }
        }
        Ok(())
    }

    /// Train-video indices belonging to `class`.
    pub fn class_train_indices(&self, class: usize) -> Vec<usize> {
        self.train
            .iter()
            .enumerate()
            .filter(|(_, lv)| lv.label == class)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn train_class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_classes()];
        for lv in &self.train {
            counts[lv.label] += 1;
        }
        counts
    }
}

/// `n` frames selected from one video, with their source positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSet {
    pub frames: Array4<f64>,
    pub source_indices: Vec<usize>,
}

impl FrameSet {
    pub fn stored_reals(&self) -> usize {
        self.frames.len()
    }
}

/// Select `n` frames: a single frame is drawn uniformly at random, two or
/// more are evenly spaced over `[0, f-1]` inclusive of both endpoints
/// (`index_j = round(j * (f-1) / (n-1))`, ties rounding down).
pub fn sample_frames(video: &VideoTensor, n: usize, rng: &mut Rng) -> Result<FrameSet> {
    let dims = video.dims();
    let f = dims.f;
    if n < 1 || n > f {
        return Err(Error::Argument(format!(
            "sample_frames needs 1 <= n <= f, got n={n}, f={f}"
        )));
    }
    let indices: Vec<usize> = if n == 1 {
        vec![rng.random_range(0..f)]
    } else {
        (0..n)
            .map(|j| {
                let num = 2 * j * (f - 1) + (n - 1) - 1;
                num / (2 * (n - 1))
            })
            .collect()
    };
    let frame_len = dims.frame_len();
    let src = video.data.as_slice().expect("standard layout");
    let mut data = Vec::with_capacity(n * frame_len);
    for &idx in &indices {
        data.extend_from_slice(&src[idx * frame_len..(idx + 1) * frame_len]);
    }
    Ok(FrameSet {
        frames: Array4::from_shape_vec((n, dims.c, dims.h, dims.w), data).expect("shape"),
        source_indices: indices,
    })
}

/// Provenance of an interpolated dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpProvenance {
    pub n: usize,
    pub seed: u64,
    pub kind: InterpKind,
}

/// The target dataset with every train video replaced by its crossfade
/// reconstruction from `n` sampled frames. The test split stays real.
#[derive(Clone, Debug)]
pub struct InterpolatedDataset {
    pub dataset: TargetDataset,
    /// The frame sets that would actually be stored (train split, in order).
    pub frame_sets: Vec<FrameSet>,
    pub provenance: InterpProvenance,
}

impl InterpolatedDataset {
    /// Total stored reals across all frame sets.
    pub fn stored_reals(&self) -> usize {
        self.frame_sets.iter().map(FrameSet::stored_reals).sum()
    }
}

/// Per-video RNG stream for frame sampling, shared with
/// [`crate::bound`]'s interpolation-error estimate.
pub fn frame_sample_rng(seed: u64, video_index: usize) -> Rng {
    seeded(derive_seed(seed, 0x5a11_0000 ^ video_index as u64))
}

/// Build the interpolated dataset: sample `n` frames per train video and
/// crossfade them back to `f` frames. Labels and the test split are preserved.
pub fn build_interpolated_dataset(
    target: &TargetDataset,
    n: usize,
    seed: u64,
) -> Result<InterpolatedDataset> {
    let f = target.dims.f;
    if n > f {
        return Err(Error::Argument(format!(
            "interpolation needs n <= f, got n={n}, f={f}"
        )));
    }
    let mut train = Vec::with_capacity(target.train.len());
    let mut frame_sets = Vec::with_capacity(target.train.len());
    for (i, lv) in target.train.iter().enumerate() {
        let mut rng = frame_sample_rng(seed, i);
        let fs = sample_frames(&lv.video, n, &mut rng)?;
        let data = interpolation::crossfade(&fs.frames, f)?;
        train.push(LabeledVideo {
            video: VideoTensor { data },
            label: lv.label,
        });
        frame_sets.push(fs);
    }
    let dataset = TargetDataset {
        class_names: target.class_names.clone(),
        dims: target.dims,
        train,
        test: target.test.clone(),
        provenance: format!(
            "interpolated(n={n}, seed={seed}, kind=crossfade) from [{}]",
            target.provenance
        ),
        frame_ambiguous_pairs: target.frame_ambiguous_pairs.clone(),
    };
    Ok(InterpolatedDataset {
        dataset,
        frame_sets,
        provenance: InterpProvenance {
            n,
            seed,
            kind: InterpKind::Crossfade,
        },
    })
}

/// Oversample minority classes (with replacement) until every class matches
/// the majority train count. The test split is untouched.
pub fn oversample_balance(target: &TargetDataset, rng: &mut Rng) -> Result<TargetDataset> {
    let counts = target.train_class_counts();
    if counts.iter().any(|&c| c == 0) {
        let empty = counts.iter().position(|&c| c == 0).unwrap();
        return Err(Error::Data(format!(
            "class {} ({}) has no train videos",
            empty, target.class_names[empty]
        )));
    }
    let max = *counts.iter().max().unwrap();
    let mut out = target.clone();
    for class in 0..target.num_classes() {
        let members = target.class_train_indices(class);
        for _ in counts[class]..max {
            let pick = members[rng.random_range(0..members.len())];
            out.train.push(target.train[pick].clone());
        }
    }
    out.provenance = format!("{} +oversampled", target.provenance);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tiny_video(f: usize, fill: impl Fn(usize) -> f64) -> VideoTensor {
        let mut data = Vec::new();
        for t in 0..f {
            data.extend(std::iter::repeat(fill(t)).take(64));
        }
        VideoTensor::new(Array4::from_shape_vec((f, 1, 8, 8), data).unwrap()).unwrap()
    }

    #[test]
    fn sample_full_and_two_endpoints() {
        let v = tiny_video(16, |t| t as f64 / 16.0);
        let mut rng = seeded(0);
        let fs = sample_frames(&v, 16, &mut rng).unwrap();
        assert_eq!(fs.source_indices, (0..16).collect::<Vec<_>>());
        assert_eq!(fs.frames, v.data);
        let fs2 = sample_frames(&v, 2, &mut rng).unwrap();
        assert_eq!(fs2.source_indices, vec![0, 15]);
    }

    #[test]
    fn sample_single_stays_in_range_and_multi_is_deterministic() {
        let v = tiny_video(16, |t| t as f64 / 16.0);
        for s in 0..20u64 {
            let idx = sample_frames(&v, 1, &mut seeded(s)).unwrap().source_indices[0];
            assert!(idx < 16);
        }
        // n >= 2 ignores the rng entirely
        let a = sample_frames(&v, 5, &mut seeded(1)).unwrap();
        let b = sample_frames(&v, 5, &mut seeded(999)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sample_rejects_out_of_range_n() {
        let v = tiny_video(4, |_| 0.0);
        assert!(sample_frames(&v, 0, &mut seeded(0)).is_err());
        assert!(sample_frames(&v, 5, &mut seeded(0)).is_err());
    }

    #[test]
    fn even_spacing_is_strictly_increasing_and_endpoint_inclusive() {
        for f in 2..40 {
            let v = tiny_video(f, |_| 0.5);
            for n in 2..=f {
                let idx = sample_frames(&v, n, &mut seeded(0)).unwrap().source_indices;
                assert_eq!(idx[0], 0);
                assert_eq!(*idx.last().unwrap(), f - 1);
                assert!(idx.windows(2).all(|w| w[0] < w[1]), "f={f}, n={n}: {idx:?}");
            }
        }
    }

    #[test]
    fn rounding_ties_break_downward() {
        // f=4, n=3: positions {0, 1.5, 3} -> {0, 1, 3}
        let v = tiny_video(4, |t| t as f64 / 4.0);
        let idx = sample_frames(&v, 3, &mut seeded(0)).unwrap().source_indices;
        assert_eq!(idx, vec![0, 1, 3]);
    }

    fn mini_dataset(per_class: &[usize]) -> TargetDataset {
        let mut train = Vec::new();
        for (label, &count) in per_class.iter().enumerate() {
            for i in 0..count {
                train.push(LabeledVideo {
                    video: tiny_video(4, |t| ((label * 7 + i + t) % 10) as f64 / 10.0),
                    label,
                });
            }
        }
        TargetDataset {
            class_names: (0..per_class.len()).map(|k| format!("c{k}")).collect(),
            dims: Vdim::new(4, 1, 8, 8),
            train,
            test: vec![],
            provenance: "test".into(),
            frame_ambiguous_pairs: vec![],
        }
    }

    #[test]
    fn oversample_balances_counts_with_valid_members() {
        let ds = mini_dataset(&[4, 2, 1]);
        let out = oversample_balance(&ds, &mut seeded(3)).unwrap();
        assert_eq!(out.train_class_counts(), vec![4, 4, 4]);
        // every duplicate is a member of its own class
        for lv in &out.train {
            assert!(ds
                .train
                .iter()
                .any(|o| o.label == lv.label && o.video == lv.video));
        }
        // already balanced stays unchanged
        let bal = mini_dataset(&[3, 3]);
        assert_eq!(
            oversample_balance(&bal, &mut seeded(0)).unwrap().train,
            bal.train
        );
    }

    #[test]
    fn interpolated_identity_at_n_equals_f() {
        let ds = mini_dataset(&[2, 2]);
        let interp = build_interpolated_dataset(&ds, 4, 9).unwrap();
        for (a, b) in interp.dataset.train.iter().zip(&ds.train) {
            assert_eq!(a.video.data, b.video.data);
            assert_eq!(a.label, b.label);
        }
    }

    #[test]
    fn interpolated_storage_fraction_at_n_1() {
        let ds = mini_dataset(&[3, 3]);
        let interp = build_interpolated_dataset(&ds, 1, 9).unwrap();
        let full: usize = ds.train.len() * ds.dims.len();
        assert_eq!(interp.stored_reals() * ds.dims.f, full);
        for lv in &interp.dataset.train {
            let first = lv.video.data.index_axis(ndarray::Axis(0), 0).to_owned();
            for t in 0..ds.dims.f {
                assert_eq!(lv.video.data.index_axis(ndarray::Axis(0), t), first);
            }
        }
    }
}
