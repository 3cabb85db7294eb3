//! Skeleton topology and distance-partitioned normalized adjacency.

use std::collections::VecDeque;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 1e-4;

/// A named group of joints, referenced by the occlusion benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyPart {
    pub id: u32,
    pub name: String,
    pub joints: Vec<usize>,
}

/// Graph definition as stored in a graph file (JSON).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphDef {
    pub name: String,
    pub num_joints: usize,
    #[serde(default)]
    pub joint_names: Vec<String>,
    pub edges: Vec<[usize; 2]>,
    pub center_joint: usize,
    #[serde(default)]
    pub parts: Vec<BodyPart>,
}

const NTU_JOINTS: [&str; 25] = [
    "spine_base",
    "spine_mid",
    "neck",
    "head",
    "shoulder_left",
    "elbow_left",
    "wrist_left",
    "hand_left",
    "shoulder_right",
    "elbow_right",
    "wrist_right",
    "hand_right",
    "hip_left",
    "knee_left",
    "ankle_left",
    "foot_left",
    "hip_right",
    "knee_right",
    "ankle_right",
    "foot_right",
    "spine_shoulder",
    "hand_tip_left",
    "thumb_left",
    "hand_tip_right",
    "thumb_right",
];

// Kinect v2 bone list, zero-based.
const NTU_EDGES: [[usize; 2]; 24] = [
    [0, 1],
    [1, 20],
    [2, 20],
    [3, 2],
    [4, 20],
    [5, 4],
    [6, 5],
    [7, 6],
    [8, 20],
    [9, 8],
    [10, 9],
    [11, 10],
    [12, 0],
    [13, 12],
    [14, 13],
    [15, 14],
    [16, 0],
    [17, 16],
    [18, 17],
    [19, 18],
    [21, 22],
    [22, 7],
    [23, 24],
    [24, 11],
];

impl GraphDef {
    /// The 25-joint Kinect v2 skeleton used by NTU RGB+D, with the five
    /// occlusion parts (left arm, right arm, two hands, two legs, trunk).
    pub fn ntu_rgbd() -> Self {
        let part = |id, name: &str, joints: &[usize]| BodyPart { id, name: name.into(), joints: joints.to_vec() };
        GraphDef {
            name: "ntu-rgbd-25".into(),
            num_joints: 25,
            joint_names: NTU_JOINTS.iter().map(|s| s.to_string()).collect(),
            edges: NTU_EDGES.to_vec(),
            center_joint: 1,
            parts: vec![
                part(1, "left arm", &[4, 5, 6, 7, 21, 22]),
                part(2, "right arm", &[8, 9, 10, 11, 23, 24]),
                part(3, "two hands", &[6, 7, 21, 22, 10, 11, 23, 24]),
                part(4, "two legs", &[12, 13, 14, 15, 16, 17, 18, 19]),
                part(5, "trunk", &[0, 1, 2, 3, 20]),
            ],
        }
    }

    /// A simple chain `0 - 1 - ... - (n-1)` centered on the middle joint.
    pub fn path(num_joints: usize) -> Self {
        GraphDef {
            name: format!("path-{num_joints}"),
            num_joints,
            joint_names: Vec::new(),
            edges: (1..num_joints).map(|i| [i - 1, i]).collect(),
            center_joint: num_joints / 2,
            parts: Vec::new(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let def: GraphDef = serde_json::from_str(text)?;
        def.validate()?;
        Ok(def)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("graph definition serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Checks index ranges and connectivity.
    pub fn validate(&self) -> Result<()> {
        let v = self.num_joints;
        if v == 0 {
            return Err(Error::Config("graph has no joints".into()));
        }
        if self.center_joint >= v {
            return Err(Error::Config(format!("center joint {} out of range for {v} joints", self.center_joint)));
        }
        if !self.joint_names.is_empty() && self.joint_names.len() != v {
            return Err(Error::Config(format!("{} joint names for {v} joints", self.joint_names.len())));
        }
        for &[a, b] in &self.edges {
            if a >= v || b >= v {
                return Err(Error::Config(format!("edge ({a}, {b}) out of range for {v} joints")));
            }
        }
        for p in &self.parts {
            if let Some(&j) = p.joints.iter().find(|&&j| j >= v) {
                return Err(Error::Config(format!("part {} lists joint {j} out of range", p.id)));
            }
        }
        self.hop_distance().map(|_| ())
    }

    pub fn neighbors(&self, joint: usize) -> Vec<usize> {
        let mut out: Vec<usize> = self
            .edges
            .iter()
            .filter_map(|&[a, b]| match (a == joint, b == joint) {
                (true, false) => Some(b),
                (false, true) => Some(a),
                _ => None,
            })
            .collect();
        out.sort_unstable();
        out.dedup();
        out
    }

    /// All-pairs shortest path lengths by breadth-first search.
    pub fn hop_distance(&self) -> Result<Vec<Vec<usize>>> {
        let v = self.num_joints;
        let adjacency: Vec<Vec<usize>> = (0..v).map(|j| self.neighbors(j)).collect();
        let mut dist = vec![vec![usize::MAX; v]; v];
        for (src, row) in dist.iter_mut().enumerate() {
            row[src] = 0;
            let mut queue = VecDeque::from([src]);
            while let Some(j) = queue.pop_front() {
                for &k in &adjacency[j] {
                    if row[k] == usize::MAX {
                        row[k] = row[j] + 1;
                        queue.push_back(k);
                    }
                }
            }
        }
        let unreachable: Vec<usize> = (0..v).filter(|&k| dist[0][k] == usize::MAX).collect();
        if !unreachable.is_empty() {
            return Err(Error::Config(format!(
                "graph {} is disconnected: joints {:?} unreachable from joint 0",
                self.name, unreachable
            )));
        }
        Ok(dist)
    }

    /// Looks up an occlusion part; an empty joint list is an error.
    pub fn part(&self, id: u32) -> Result<&BodyPart> {
        let part = self
            .parts
            .iter()
            .find(|p| p.id == id)
            .ok_or_else(|| Error::Config(format!("graph {} defines no part {id}", self.name)))?;
        if part.joints.is_empty() {
            return Err(Error::Config(format!("part {id} ({}) has no joints", part.name)));
        }
        Ok(part)
    }

    /// Stable content hash of the topology.
    pub fn digest(&self) -> u64 {
        let canonical = serde_json::to_vec(self).expect("graph definition serializes");
        let hash = Sha256::digest(&canonical);
        u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
    }
}

/// A validated skeleton graph together with its partitioning parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SkeletonGraph {
    def: GraphDef,
    max_distance: usize,
    alpha: f64,
    hops: Vec<Vec<usize>>,
}

impl SkeletonGraph {
    pub fn new(def: GraphDef, max_distance: usize, alpha: f64) -> Result<Self> {
        def.validate()?;
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        let hops = def.hop_distance()?;
        Ok(SkeletonGraph { def, max_distance, alpha, hops })
    }

    pub fn def(&self) -> &GraphDef {
        &self.def
    }

    pub fn num_joints(&self) -> usize {
        self.def.num_joints
    }

    pub fn center_joint(&self) -> usize {
        self.def.center_joint
    }

    pub fn max_distance(&self) -> usize {
        self.max_distance
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn hops(&self) -> &[Vec<usize>] {
        &self.hops
    }

    /// Binary adjacency `A_d` holding exactly the pairs at hop distance `d`.
    pub fn partition(&self, d: usize) -> Tensor {
        let v = self.num_joints();
        let mut a = Tensor::zeros(&[v, v]);
        for i in 0..v {
            for k in 0..v {
                if self.hops[i][k] == d {
                    a.set(&[i, k], 1.0);
                }
            }
        }
        a
    }

    pub fn build_partitions(&self) -> NormalizedAdjacencySet {
        let matrices = (0..=self.max_distance)
            .map(|d| normalize_partition(&self.partition(d), self.alpha))
            .collect();
        NormalizedAdjacencySet { alpha: self.alpha, matrices }
    }
}

/// `Λ^{-1/2} A Λ^{-1/2}` with `Λ_ii = Σ_k A_ik + α`.
pub fn normalize_partition(a: &Tensor, alpha: f64) -> Tensor {
    let v = a.shape()[0];
    let inv_sqrt: Vec<f64> = (0..v)
        .map(|i| {
            let degree: f64 = a.data()[i * v..(i + 1) * v].iter().sum();
            1.0 / (degree + alpha).sqrt()
        })
        .collect();
    let mut out = a.clone();
    for i in 0..v {
        for k in 0..v {
            let x = a.data()[i * v + k] * inv_sqrt[i] * inv_sqrt[k];
            out.data_mut()[i * v + k] = x;
        }
    }
    out
}

/// Normalized adjacency matrices for `d = 0..=D_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacencySet {
    pub alpha: f64,
    pub matrices: Vec<Tensor>,
}

impl NormalizedAdjacencySet {
    pub fn max_distance(&self) -> usize {
        self.matrices.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn path_distances() {
        let g = GraphDef::path(3);
        let d = g.hop_distance().unwrap();
        assert_eq!(d[0][2], 2);
        for (i, row) in d.iter().enumerate() {
            assert_eq!(row[i], 0);
        }
    }

    #[test]
    fn disconnected_graph_names_unreachable_joints() {
        let mut g = GraphDef::path(4);
        g.edges.retain(|e| *e != [2, 3]);
        let err = g.hop_distance().unwrap_err().to_string();
        assert!(err.contains("[3]"), "{err}");
    }

    #[test]
    fn ntu_graph_is_valid_and_wrist_elbow_adjacent() {
        let g = GraphDef::ntu_rgbd();
        g.validate().unwrap();
        let d = g.hop_distance().unwrap();
        assert_eq!(d[6][5], 1);
        assert_eq!(d[10][9], 1);
        for p in 1..=5 {
            assert!(!g.part(p).unwrap().joints.is_empty());
        }
        assert!(g.part(6).is_err());
    }

    #[test]
    fn identity_partition_normalizes_to_one_over_one_plus_alpha() {
        let g = SkeletonGraph::new(GraphDef::path(4), 0, DEFAULT_ALPHA).unwrap();
        let set = g.build_partitions();
        let a0 = &set.matrices[0];
        for i in 0..4 {
            for k in 0..4 {
                let expected = if i == k { 1.0 / (1.0 + DEFAULT_ALPHA) } else { 0.0 };
                assert!((a0.get(&[i, k]) - expected).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn two_joint_graph_distance_one() {
        let g = SkeletonGraph::new(GraphDef::path(2), 1, DEFAULT_ALPHA).unwrap();
        let a1 = &g.build_partitions().matrices[1];
        let off = 1.0 / (1.0 + DEFAULT_ALPHA);
        assert_eq!(a1.get(&[0, 0]), 0.0);
        assert!((a1.get(&[0, 1]) - off).abs() < 1e-15);
        assert!((a1.get(&[1, 0]) - off).abs() < 1e-15);
    }

    #[test]
    fn empty_rows_stay_zero() {
        // path of 3 joints: the middle joint has nothing at distance 2
        let g = SkeletonGraph::new(GraphDef::path(3), 2, DEFAULT_ALPHA).unwrap();
        let a2 = &g.build_partitions().matrices[2];
        assert!(a2.data()[3..6].iter().all(|&x| x.abs() <= DEFAULT_ALPHA));
    }

    #[test]
    fn graph_file_roundtrip() {
        let g = GraphDef::ntu_rgbd();
        let back = GraphDef::from_json(&g.to_json()).unwrap();
        assert_eq!(g, back);
        assert_eq!(g.digest(), back.digest());
        assert!(GraphDef::from_json(r#"{"name":"x","num_joints":1,"edges":[],"center_joint":0,"bogus":1}"#).is_err());
    }
}
