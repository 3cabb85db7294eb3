//! Occlusion benchmark: zero a body part's joints at every frame, or a
//! contiguous block of frames near the start of the clip.
//!
//! Occlusion acts on raw coordinates, before preprocessing, so the motion and
//! relative channels derived later see the same missing data a capture
//! failure would produce.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphDef;
use crate::model::Classifier;
use crate::preprocess::{SkeletonSequence, COORDS};
use crate::train::evaluate;

/// Temporal blocks start within this many leading frames.
pub const TEMPORAL_WINDOW: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OcclusionKind {
    None,
    Spatial { part: u32 },
    Temporal { block_length: usize },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OcclusionSpec {
    #[serde(flatten)]
    pub kind: OcclusionKind,
    #[serde(default)]
    pub seed: u64,
}

impl OcclusionSpec {
    pub fn none() -> Self {
        OcclusionSpec { kind: OcclusionKind::None, seed: 0 }
    }

    pub fn spatial(part: u32) -> Self {
        OcclusionSpec { kind: OcclusionKind::Spatial { part }, seed: 0 }
    }

    pub fn temporal(block_length: usize, seed: u64) -> Self {
        OcclusionSpec { kind: OcclusionKind::Temporal { block_length }, seed }
    }

    /// Column label used in result tables.
    pub fn label(&self) -> String {
        match self.kind {
            OcclusionKind::None => "none".into(),
            OcclusionKind::Spatial { part } => format!("part{part}"),
            OcclusionKind::Temporal { block_length } => format!("frames{block_length}"),
        }
    }

    pub fn validate(&self, graph: &GraphDef) -> Result<()> {
        match self.kind {
            OcclusionKind::None => Ok(()),
            OcclusionKind::Spatial { part } => graph.part(part).map(|_| ()),
            OcclusionKind::Temporal { block_length } => check_block(block_length),
        }
    }
}

/// What was zeroed in one sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedOcclusion {
    pub sample_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub part: Option<u32>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub joints: Vec<usize>,
    /// First frame and length of the zeroed block.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<(usize, usize)>,
}

fn check_block(block_length: usize) -> Result<()> {
    if block_length > TEMPORAL_WINDOW {
        return Err(Error::Config(format!(
            "temporal block of {block_length} frames exceeds the {TEMPORAL_WINDOW}-frame window"
        )));
    }
    Ok(())
}

/// Zeroes the given joints at every frame and body.
pub fn occlude_joints(x: &SkeletonSequence, joints: &[usize]) -> Result<SkeletonSequence> {
    let (t, v, m) = (x.frames(), x.joints(), x.bodies());
    if let Some(&bad) = joints.iter().find(|&&j| j >= v) {
        return Err(Error::Config(format!("joint {bad} out of range for {v} joints")));
    }
    let mut out = x.clone();
    let data = out.data.data_mut();
    for c in 0..COORDS {
        for f in 0..t {
            for &j in joints {
                let base = ((c * t + f) * v + j) * m;
                data[base..base + m].fill(0.0);
            }
        }
    }
    Ok(out)
}

pub fn occlude_spatial(x: &SkeletonSequence, part: u32, graph: &GraphDef) -> Result<SkeletonSequence> {
    occlude_joints(x, &graph.part(part)?.joints)
}

/// Zeroes frames `[start, start + length)` across all joints and bodies.
pub fn occlude_frames(x: &SkeletonSequence, start: usize, length: usize) -> Result<SkeletonSequence> {
    let (t, v, m) = (x.frames(), x.joints(), x.bodies());
    if start + length > t {
        return Err(Error::Config(format!("frames {start}..{} exceed T = {t}", start + length)));
    }
    let mut out = x.clone();
    let frame = v * m;
    let data = out.data.data_mut();
    for c in 0..COORDS {
        data[(c * t + start) * frame..(c * t + start + length) * frame].fill(0.0);
    }
    Ok(out)
}

/// Zeroes a block of `block_length` frames starting uniformly at random in
/// `[0, W - block_length]`, where `W` is the 100-frame window clipped to the
/// clip length. Returns the start frame.
pub fn occlude_temporal<R: Rng + ?Sized>(
    x: &SkeletonSequence,
    block_length: usize,
    rng: &mut R,
) -> Result<(SkeletonSequence, usize)> {
    check_block(block_length)?;
    let window = TEMPORAL_WINDOW.min(x.frames());
    if block_length > window {
        return Err(Error::Config(format!(
            "temporal block of {block_length} frames does not fit {} frames",
            x.frames()
        )));
    }
    if block_length == 0 {
        return Ok((x.clone(), 0));
    }
    let start = rng.gen_range(0..=window - block_length);
    Ok((occlude_frames(x, start, block_length)?, start))
}

/// Random stream for sample `index` under `seed`, independent of the order in
/// which samples are processed.
pub fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Applies `spec` to every sample.
pub fn apply_occlusion(
    samples: &[SkeletonSequence],
    spec: &OcclusionSpec,
    graph: &GraphDef,
) -> Result<(Vec<SkeletonSequence>, Vec<AppliedOcclusion>)> {
    spec.validate(graph)?;
    let mut out = Vec::with_capacity(samples.len());
    let mut applied = Vec::with_capacity(samples.len());
    for (i, x) in samples.iter().enumerate() {
        let mut record = AppliedOcclusion { sample_id: x.sample_id.clone(), part: None, joints: Vec::new(), frames: None };
        let occluded = match spec.kind {
            OcclusionKind::None => x.clone(),
            OcclusionKind::Spatial { part } => {
                record.part = Some(part);
                record.joints = graph.part(part)?.joints.clone();
                occlude_joints(x, &record.joints)?
            }
            OcclusionKind::Temporal { block_length } => {
                let (y, start) = occlude_temporal(x, block_length, &mut sample_rng(spec.seed, i))?;
                record.frames = Some((start, block_length));
                y
            }
        };
        out.push(occluded);
        applied.push(record);
    }
    Ok((out, applied))
}

/// Accuracy (in percent) of each model under each occlusion setting, plus
/// the difference between the last and the first model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcclusionTable {
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<f64>)>,
}

impl OcclusionTable {
    pub fn difference(&self) -> Option<Vec<f64>> {
        let (first, last) = (self.rows.first()?, self.rows.last()?);
        Some(last.1.iter().zip(&first.1).map(|(a, b)| a - b).collect())
    }

    /// Delimiter-separated rendering with a trailing `difference` row.
    pub fn to_delimited(&self, sep: char) -> String {
        let mut out = String::from("model");
        for c in &self.columns {
            out.push(sep);
            out.push_str(c);
        }
        out.push('\n');
        let mut line = |name: &str, values: &[f64]| {
            out.push_str(name);
            for v in values {
                out.push(sep);
                out.push_str(&format!("{v:.2}"));
            }
            out.push('\n');
        };
        for (name, values) in &self.rows {
            line(name, values);
        }
        if self.rows.len() > 1 {
            if let Some(diff) = self.difference() {
                line("difference", &diff);
            }
        }
        out
    }
}

impl fmt::Display for OcclusionTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_delimited(','))
    }
}

/// Evaluates every model on every occluded copy of `samples`. The first model
/// is the reference for the difference row.
pub fn run_occlusion_suite(
    models: &mut [(String, &mut dyn Classifier)],
    samples: &[SkeletonSequence],
    specs: &[OcclusionSpec],
    graph: &GraphDef,
    batch_size: usize,
) -> Result<OcclusionTable> {
    let occluded = specs
        .iter()
        .map(|spec| apply_occlusion(samples, spec, graph).map(|(x, _)| x))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(models.len());
    for (name, model) in models.iter_mut() {
        let mut accs = Vec::with_capacity(specs.len());
        for set in &occluded {
            accs.push(100.0 * evaluate(&mut **model, set, batch_size)?.accuracy);
        }
        rows.push((name.clone(), accs));
    }
    Ok(OcclusionTable { columns: specs.iter().map(OcclusionSpec::label).collect(), rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn seq(t: usize, v: usize, m: usize) -> SkeletonSequence {
        let data: Vec<f64> = (0..3 * t * v * m).map(|i| 1.0 + i as f64).collect();
        SkeletonSequence::new(Tensor::new(vec![3, t, v, m], data).unwrap(), t, 0, "s").unwrap()
    }

    #[test]
    fn spatial_zeroes_only_part_joints() {
        let g = GraphDef::ntu_rgbd();
        let x = seq(4, 25, 2);
        let y = occlude_spatial(&x, 3, &g).unwrap();
        let hands = &g.part(3).unwrap().joints;
        for c in 0..3 {
            for t in 0..4 {
                for j in 0..25 {
                    for b in 0..2 {
                        let i = x.index(c, t, j, b);
                        if hands.contains(&j) {
                            assert_eq!(y.data.data()[i], 0.0);
                        } else {
                            assert_eq!(y.data.data()[i], x.data.data()[i]);
                        }
                    }
                }
            }
        }
        assert_eq!(occlude_spatial(&y, 3, &g).unwrap(), y);
        assert!(matches!(occlude_spatial(&x, 9, &g), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_edge_cases() {
        let x = seq(120, 3, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (same, _) = occlude_temporal(&x, 0, &mut rng).unwrap();
        assert_eq!(same, x);
        let (full, start) = occlude_temporal(&x, 100, &mut rng).unwrap();
        assert_eq!(start, 0);
        for c in 0..3 {
            for t in 0..120 {
                let zero = full.data.get(&[c, t, 1, 0]) == 0.0;
                assert_eq!(zero, t < 100);
            }
        }
        assert!(matches!(occlude_temporal(&x, 101, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn temporal_window_is_seeded() {
        let x = seq(150, 2, 1);
        let a = occlude_temporal(&x, 30, &mut sample_rng(5, 3)).unwrap().1;
        let b = occlude_temporal(&x, 30, &mut sample_rng(5, 3)).unwrap().1;
        assert_eq!(a, b);
        assert!(a <= 70);
    }

    #[test]
    fn table_layout() {
        let t = OcclusionTable {
            columns: vec!["none".into(), "part1".into()],
            rows: vec![("1s".into(), vec![90.0, 50.0]), ("3s".into(), vec![91.0, 70.5])],
        };
        assert_eq!(t.to_string(), "model,none,part1\n1s,90.00,50.00\n3s,91.00,70.50\ndifference,1.00,20.50\n");
    }

    #[test]
    fn spec_json_shape() {
        let spec: OcclusionSpec = serde_json::from_str(r#"{"kind":"temporal","block_length":20,"seed":4}"#).unwrap();
        assert_eq!(spec, OcclusionSpec::temporal(20, 4));
        assert_eq!(spec.label(), "frames20");
    }
}
