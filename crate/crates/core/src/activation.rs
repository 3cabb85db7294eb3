//! Class activation maps over (frame, joint) and the stream masks built from them.
//!
//! A CAM is `M_c(t, i) = Σ_k w^c_k f_k(t, i)` for the class `c` chosen per
//! sample. Masks accumulate as
//! `mask_s = (mask_1 ⊙ … ⊙ mask_{s-1}) ⊙ (1 - softmax(M_c^{s-1}))`
//! with the softmax taken jointly over all `T × V` locations of one body of
//! one sample. The first stream's mask is all ones. Masks are constants: no
//! gradient flows through their construction.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Tensor};

/// CAM values laid out `[N, M, T', V]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMap {
    pub values: Tensor,
    pub stream_index: usize,
    /// Class used for each sample.
    pub classes: Vec<usize>,
}

/// Mask laid out `[N, M, T, V]`, entries in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamMask {
    pub values: Tensor,
    /// One-based stream number.
    pub stream_index: usize,
}

/// A `(body, frame, joint)` cell of a map.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Location {
    pub body: usize,
    pub frame: usize,
    pub joint: usize,
}

/// CAM of `feature_map[N·M, C, T', V]` under classifier rows `head_weight[K, C]`.
pub fn compute_cam(
    feature_map: &Tensor,
    bodies: usize,
    head_weight: &Tensor,
    classes: &[usize],
    stream_index: usize,
) -> Result<ActivationMap> {
    let s = feature_map.shape();
    let w = head_weight.shape();
    if s.len() != 4 || w.len() != 2 || w[1] != s[1] || bodies == 0 || s[0] != classes.len() * bodies {
        return Err(Error::Dimension(format!(
            "compute_cam: feature map {:?}, weights {:?}, {} samples x {bodies} bodies",
            s,
            w,
            classes.len()
        )));
    }
    let (rows, c, t, v) = (s[0], s[1], s[2], s[3]);
    if let Some(&bad) = classes.iter().find(|&&k| k >= w[0]) {
        return Err(Error::Input(format!("class {bad} out of range for {} classes", w[0])));
    }
    let plane = t * v;
    let fm = feature_map.data();
    let mut out = vec![0.0; rows * plane];
    for r in 0..rows {
        let class = classes[r / bodies];
        let weights = &head_weight.data()[class * c..(class + 1) * c];
        let dst = &mut out[r * plane..(r + 1) * plane];
        for (k, &wk) in weights.iter().enumerate() {
            for (d, &f) in dst.iter_mut().zip(&fm[(r * c + k) * plane..(r * c + k + 1) * plane]) {
                *d += wk * f;
            }
        }
    }
    let values = Tensor::new(vec![classes.len(), bodies, t, v], out)?;
    Ok(ActivationMap { values, stream_index, classes: classes.to_vec() })
}

/// Nearest-neighbour repetition along frames: input frame `t` reads map
/// frame `t / reduction`. Requires `T' = ceil(T / reduction)`.
pub fn upsample_map(map: &ActivationMap, frames: usize, reduction: usize) -> Result<Tensor> {
    let s = map.values.shape();
    let (n, m, t_small, v) = (s[0], s[1], s[2], s[3]);
    if reduction == 0 || t_small != frames.div_ceil(reduction) {
        return Err(Error::Config(format!(
            "cannot upsample {t_small} frames to {frames} with reduction {reduction}"
        )));
    }
    let src = map.values.data();
    let mut out = Vec::with_capacity(n * m * frames * v);
    for r in 0..n * m {
        for t in 0..frames {
            let from = (r * t_small + t / reduction) * v;
            out.extend_from_slice(&src[from..from + v]);
        }
    }
    Tensor::new(vec![n, m, frames, v], out)
}

/// Softmax over all `T × V` cells of each `(sample, body)` block of `[N, M, T, V]`.
pub fn location_softmax(cam: &Tensor) -> Tensor {
    let s = cam.shape();
    let plane = s[2] * s[3];
    let mut out = cam.clone();
    if plane > 0 {
        out.data_mut().chunks_mut(plane).for_each(softmax_in_place);
    }
    out
}

pub fn first_mask(samples: usize, bodies: usize, frames: usize, joints: usize) -> StreamMask {
    StreamMask { values: Tensor::ones(&[samples, bodies, frames, joints]), stream_index: 1 }
}

/// Mask of the next stream from all previous masks and the previous stream's
/// CAM, already upsampled to input resolution.
pub fn next_mask(previous: &[StreamMask], cam: &Tensor) -> Result<StreamMask> {
    let last = previous
        .last()
        .ok_or_else(|| Error::Usage("next_mask needs the masks of all preceding streams".into()))?;
    for m in previous {
        if m.values.shape() != cam.shape() {
            return Err(Error::Dimension(format!(
                "mask {:?} does not match CAM {:?}",
                m.values.shape(),
                cam.shape()
            )));
        }
    }
    let soft = location_softmax(cam);
    let mut values = Tensor::ones(cam.shape());
    for m in previous {
        for (d, &p) in values.data_mut().iter_mut().zip(m.values.data()) {
            *d *= p;
        }
    }
    for (d, &p) in values.data_mut().iter_mut().zip(soft.data()) {
        *d *= 1.0 - p;
    }
    Ok(StreamMask { values, stream_index: last.stream_index + 1 })
}

/// `x_s = x' ⊙ mask_s`, broadcasting the `[N, M, T, V]` mask over the nine
/// channels of `x'[N, 9, T, V, M]`.
pub fn mask_input(x_prime: &Tensor, mask: &StreamMask) -> Result<Tensor> {
    let s = x_prime.shape();
    let ms = mask.values.shape();
    if s.len() != 5 || ms.len() != 4 || ms != [s[0], s[4], s[2], s[3]] {
        return Err(Error::Dimension(format!("mask {:?} does not fit input {:?}", ms, s)));
    }
    let (n, c, t, v, m) = (s[0], s[1], s[2], s[3], s[4]);
    let mv = mask.values.data();
    let mut out = x_prime.clone();
    let data = out.data_mut();
    for i in 0..n {
        for ch in 0..c {
            for f in 0..t {
                for j in 0..v {
                    let base = (((i * c + ch) * t + f) * v + j) * m;
                    for b in 0..m {
                        data[base + b] *= mv[((i * m + b) * t + f) * v + j];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Per-sample quantile threshold: the value at rank `ceil(q · n) - 1` of the
/// ascending sort.
pub fn quantile_threshold(values: &[f64], quantile: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let rank = ((quantile * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[rank]
}

/// Cells whose CAM value is strictly above the sample's quantile threshold.
pub fn activated_joints(cam: &ActivationMap, quantile: f64) -> Result<Vec<BTreeSet<Location>>> {
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Config(format!("quantile {quantile} outside (0, 1)")));
    }
    let s = cam.values.shape();
    let (n, m, t, v) = (s[0], s[1], s[2], s[3]);
    let per_sample = m * t * v;
    Ok(cam
        .values
        .data()
        .chunks(per_sample)
        .take(n)
        .map(|cells| {
            let threshold = quantile_threshold(cells, quantile);
            cells
                .iter()
                .enumerate()
                .filter(|(_, &x)| x > threshold)
                .map(|(idx, _)| Location { body: idx / (t * v), frame: (idx / v) % t, joint: idx % v })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(values: Tensor) -> ActivationMap {
        let n = values.shape()[0];
        ActivationMap { values, stream_index: 1, classes: vec![0; n] }
    }

    #[test]
    fn zero_features_give_zero_cam() {
        let f = Tensor::zeros(&[2, 3, 4, 5]);
        let w = Tensor::ones(&[2, 3]);
        let cam = compute_cam(&f, 1, &w, &[0, 1], 1).unwrap();
        assert!(cam.values.data().iter().all(|&x| x == 0.0));
        assert!(matches!(compute_cam(&f, 1, &w, &[0, 2], 1), Err(Error::Input(_))));
    }

    #[test]
    fn single_channel_unit_weight_is_identity() {
        let f = Tensor::new(vec![1, 1, 2, 2], vec![1., -2., 3., 0.5]).unwrap();
        let w = Tensor::ones(&[1, 1]);
        let cam = compute_cam(&f, 1, &w, &[0], 1).unwrap();
        assert_eq!(cam.values.data(), f.data());
    }

    #[test]
    fn upsample_identity_and_repeat() {
        let m = map(Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        assert_eq!(upsample_map(&m, 2, 1).unwrap().data(), m.values.data());
        let up = upsample_map(&m, 4, 2).unwrap();
        assert_eq!(up.data(), &[1., 2., 1., 2., 3., 4., 3., 4.]);
        assert!(upsample_map(&m, 5, 2).is_err());
    }

    #[test]
    fn constant_cam_gives_uniform_mask() {
        let first = first_mask(1, 1, 3, 4);
        let cam = Tensor::full(&[1, 1, 3, 4], 0.7);
        let m = next_mask(&[first], &cam).unwrap();
        assert_eq!(m.stream_index, 2);
        for &x in m.values.data() {
            assert!((x - (1.0 - 1.0 / 12.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn dominant_location_is_suppressed() {
        let first = first_mask(1, 1, 2, 3);
        let mut cam = Tensor::zeros(&[1, 1, 2, 3]);
        cam.set(&[0, 0, 1, 2], 1000.0);
        let m = next_mask(&[first], &cam).unwrap();
        assert!(m.values.get(&[0, 0, 1, 2]) < 1e-12);
        assert!((m.values.get(&[0, 0, 0, 0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn next_mask_requires_history() {
        assert!(matches!(next_mask(&[], &Tensor::zeros(&[1, 1, 1, 1])), Err(Error::Usage(_))));
    }

    #[test]
    fn mask_input_ones_and_zeros() {
        let x = Tensor::new(vec![1, 9, 2, 2, 1], (0..36).map(|i| i as f64 - 10.0).collect()).unwrap();
        let ones = first_mask(1, 1, 2, 2);
        assert_eq!(mask_input(&x, &ones).unwrap(), x);
        let zeros = StreamMask { values: Tensor::zeros(&[1, 1, 2, 2]), stream_index: 2 };
        assert!(mask_input(&x, &zeros).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activated_joint_tie_rule() {
        let constant = map(Tensor::full(&[1, 1, 2, 5], 3.0));
        assert!(activated_joints(&constant, 0.9).unwrap()[0].is_empty());
        let mut hot = Tensor::zeros(&[1, 1, 2, 5]);
        hot.set(&[0, 0, 1, 3], 2.0);
        let sets = activated_joints(&map(hot), 0.5).unwrap();
        let expected: BTreeSet<Location> = [Location { body: 0, frame: 1, joint: 3 }].into();
        assert_eq!(sets[0], expected);
        assert!(activated_joints(&constant, 1.0).is_err());
    }
}
