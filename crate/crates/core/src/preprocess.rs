//! Turns raw joint coordinates `x` (C×T×V×M) into the 3C-channel network
//! input: raw coordinates, frame-to-frame motion, and coordinates relative
//! to the center joint.
//!
//! Motion for the last frame is zero. With zero padding after `valid_frames`,
//! the frame `valid_frames - 1` sees the jump to the padded zeros, so a padded
//! sequence carries exactly one nonzero motion frame at that boundary.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Spatial coordinates per joint.
pub const COORDS: usize = 3;
/// Channels after preprocessing.
pub const INPUT_CHANNELS: usize = 3 * COORDS;
pub const DEFAULT_MAX_FRAMES: usize = 300;

/// One skeleton clip, `data` laid out as `[C, T, V, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonSequence {
    pub data: Tensor,
    pub valid_frames: usize,
    pub label: usize,
    pub sample_id: String,
}

impl SkeletonSequence {
    pub fn new(data: Tensor, valid_frames: usize, label: usize, sample_id: impl Into<String>) -> Result<Self> {
        let s = data.shape();
        if s.len() != 4 || s[0] != COORDS {
            return Err(Error::Input(format!("skeleton data must be [3, T, V, M], got {:?}", s)));
        }
        if valid_frames > s[1] {
            return Err(Error::Input(format!("valid_frames {valid_frames} exceeds T = {}", s[1])));
        }
        let seq = SkeletonSequence { data, valid_frames, label, sample_id: sample_id.into() };
        let (t, v, m) = (seq.frames(), seq.joints(), seq.bodies());
        for c in 0..COORDS {
            let tail = &seq.data.data()[(c * t + valid_frames) * v * m..(c + 1) * t * v * m];
            if tail.iter().any(|&x| x != 0.0) {
                return Err(Error::Input(format!(
                    "sample {}: frames after valid_frames must be zero",
                    seq.sample_id
                )));
            }
        }
        Ok(seq)
    }

    pub fn frames(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn joints(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn bodies(&self) -> usize {
        self.data.shape()[3]
    }

    /// Raw offset of `(c, t, v, m)`.
    pub fn index(&self, c: usize, t: usize, v: usize, m: usize) -> usize {
        ((c * self.frames() + t) * self.joints() + v) * self.bodies() + m
    }
}

/// `x_t[t] = x[t + 1] - x[t]`, zero for the final frame.
pub fn motion_features(x: &SkeletonSequence) -> Tensor {
    let (t, v, m) = (x.frames(), x.joints(), x.bodies());
    let frame = v * m;
    let src = x.data.data();
    let mut out = Tensor::zeros(x.data.shape());
    let dst = out.data_mut();
    for c in 0..COORDS {
        for f in 0..t.saturating_sub(1) {
            let cur = (c * t + f) * frame;
            let next = cur + frame;
            for i in 0..frame {
                dst[cur + i] = src[next + i] - src[cur + i];
            }
        }
    }
    out
}

/// Coordinates relative to each body's own center joint in every frame.
pub fn relative_coordinates(x: &SkeletonSequence, center: usize) -> Result<Tensor> {
    let (t, v, m) = (x.frames(), x.joints(), x.bodies());
    if center >= v {
        return Err(Error::Config(format!("center joint {center} out of range for {v} joints")));
    }
    let src = x.data.data();
    let mut out = Tensor::zeros(x.data.shape());
    let dst = out.data_mut();
    for c in 0..COORDS {
        for f in 0..t {
            let base = (c * t + f) * v * m;
            for j in 0..v {
                for b in 0..m {
                    dst[base + j * m + b] = src[base + j * m + b] - src[base + center * m + b];
                }
            }
        }
    }
    Ok(out)
}

/// Channel concatenation `(x, x_t, x_r)`: `[3, T, V, M] -> [9, T, V, M]`.
pub fn assemble(x: &SkeletonSequence, center: usize) -> Result<Tensor> {
    let relative = relative_coordinates(x, center)?;
    let motion = motion_features(x);
    let mut data = Vec::with_capacity(3 * x.data.len());
    data.extend_from_slice(x.data.data());
    data.extend_from_slice(motion.data());
    data.extend_from_slice(relative.data());
    let s = x.data.shape();
    Tensor::new(vec![INPUT_CHANNELS, s[1], s[2], s[3]], data)
}

/// Preprocesses and stacks samples into `[N, 9, T, V, M]`.
pub fn assemble_batch(samples: &[&SkeletonSequence], center: usize) -> Result<Tensor> {
    let first = samples.first().ok_or_else(|| Error::Input("empty batch".into()))?;
    let s = first.data.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * 3 * first.data.len());
    for x in samples {
        if x.data.shape() != s.as_slice() {
            return Err(Error::Dimension(format!(
                "sample {} has shape {:?}, batch expects {:?}",
                x.sample_id,
                x.data.shape(),
                s
            )));
        }
        data.extend(assemble(x, center)?.into_data());
    }
    Tensor::new(vec![samples.len(), INPUT_CHANNELS, s[1], s[2], s[3]], data)
}

/// Moves bodies into the batch axis: `[N, C, T, V, M] -> [N·M, C, T, V]`,
/// row `n·M + m` holding body `m` of sample `n`.
pub fn fold_bodies(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::Dimension(format!("fold_bodies expects rank 5, got {:?}", s)));
    }
    let (n, c, t, v, m) = (s[0], s[1], s[2], s[3], s[4]);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    let ctv = c * t * v;
    for i in 0..n {
        for (p, chunk) in src[i * ctv * m..(i + 1) * ctv * m].chunks(m).enumerate() {
            for (b, &val) in chunk.iter().enumerate() {
                out[(i * m + b) * ctv + p] = val;
            }
        }
    }
    Tensor::new(vec![n * m, c, t, v], out)
}
