//! Checkpoints of a baseline network or a multi-stream model.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic          8 bytes  "RAGCNCKP"
//! version        u32      1
//! kind           u8       0 = baseline, 1 = multi-stream model
//! graph hash     u64      digest of the graph definition
//! config digest  u64      digest of the network configuration
//! streams        u32
//! epoch          u32
//! graph          u32 length + JSON
//! config         u32 length + JSON
//! records        u32 count, then per record:
//!                  name (u32 length + UTF-8), ndim u32, dims u32 x ndim,
//!                  f32 values
//! ```
//!
//! Model records are prefixed `streams.{s}.`; the fusion head keeps its own
//! names. Values are stored at 32-bit precision, so a loaded checkpoint saves
//! back to identical bytes.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::graph::GraphDef;
use crate::model::RaGcnModel;
use crate::params::ParamSet;
use crate::stgcn::{StgcnConfig, StgcnNetwork};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"RAGCNCKP";
pub const CHECKPOINT_VERSION: usize = 1;

#[derive(Clone, Debug)]
pub enum Snapshot {
    Baseline(StgcnNetwork),
    Model(RaGcnModel),
}

impl Snapshot {
    pub fn num_streams(&self) -> usize {
        match self {
            Snapshot::Baseline(_) => 1,
            Snapshot::Model(m) => m.num_streams(),
        }
    }

    pub fn graph_def(&self) -> &GraphDef {
        match self {
            Snapshot::Baseline(n) => n.graph().def(),
            Snapshot::Model(m) => m.graph_def(),
        }
    }

    pub fn config(&self) -> &StgcnConfig {
        match self {
            Snapshot::Baseline(n) => n.config(),
            Snapshot::Model(m) => m.config(),
        }
    }

    /// A model view: a baseline becomes a one-stream model.
    pub fn into_model(self) -> Result<RaGcnModel> {
        match self {
            Snapshot::Baseline(n) => RaGcnModel::init_streams(&n, 1),
            Snapshot::Model(m) => Ok(m),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub version: usize,
    pub graph_hash: u64,
    pub config_digest: u64,
    pub streams: usize,
    pub epoch: usize,
}

pub fn config_digest(config: &StgcnConfig) -> u64 {
    let json = serde_json::to_vec(config).expect("configuration serializes");
    let hash = Sha256::digest(&json);
    u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"))
}

fn records(snapshot: &Snapshot) -> Vec<(String, &Tensor)> {
    match snapshot {
        Snapshot::Baseline(n) => n.params.entries().iter().map(|e| (e.name.clone(), &e.value)).collect(),
        Snapshot::Model(m) => m
            .streams
            .iter()
            .enumerate()
            .flat_map(|(s, n)| n.params.entries().iter().map(move |e| (format!("streams.{s}.{}", e.name), &e.value)))
            .chain(m.fusion.entries().iter().map(|e| (e.name.clone(), &e.value)))
            .collect(),
    }
}

pub fn save_checkpoint(snapshot: &Snapshot, epoch: usize) -> Result<Vec<u8>> {
    let graph = snapshot.graph_def();
    let config = snapshot.config();
    let mut w = ByteWriter::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION)?;
    w.u8(matches!(snapshot, Snapshot::Model(_)) as u8);
    w.u64(graph.digest());
    w.u64(config_digest(config));
    w.u32(snapshot.num_streams())?;
    w.u32(epoch)?;
    w.str(&serde_json::to_string(graph)?)?;
    w.str(&serde_json::to_string(config)?)?;
    let recs = records(snapshot);
    w.u32(recs.len())?;
    for (name, value) in recs {
        w.str(&name)?;
        w.u32(value.ndim())?;
        for &d in value.shape() {
            w.u32(d)?;
        }
        w.f32s(value.data());
    }
    Ok(w.buf)
}

fn fill(params: &mut ParamSet, prefix: &str, stored: &mut BTreeMap<String, Tensor>) -> Result<()> {
    for entry in params.entries_mut() {
        let key = format!("{prefix}{}", entry.name);
        let value = stored.remove(&key).ok_or_else(|| Error::Load(format!("checkpoint lacks parameter {key}")))?;
        if value.shape() != entry.value.shape() {
            return Err(Error::Load(format!(
                "parameter {key} has shape {:?}, model expects {:?}",
                value.shape(),
                entry.value.shape()
            )));
        }
        entry.value = value;
    }
    Ok(())
}

/// Parses a checkpoint. With `expected_graph`, a checkpoint built for a
/// different topology is rejected.
pub fn load_checkpoint(bytes: &[u8], expected_graph: Option<&GraphDef>) -> Result<(Snapshot, CheckpointMeta)> {
    let mut r = ByteReader::new(bytes);
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Load(format!("unsupported checkpoint version {version}")));
    }
    let kind = r.u8("kind")?;
    let graph_hash = r.u64("graph hash")?;
    let digest = r.u64("config digest")?;
    let streams = r.u32("stream count")?;
    let epoch = r.u32("epoch")?;
    let graph = GraphDef::from_json(&r.str("graph")?).map_err(|e| Error::Corrupt(format!("embedded graph: {e}")))?;
    let config: StgcnConfig =
        serde_json::from_str(&r.str("config")?).map_err(|e| Error::Corrupt(format!("embedded config: {e}")))?;
    if graph.digest() != graph_hash {
        return Err(Error::Load("graph hash does not match the embedded graph".into()));
    }
    if let Some(expected) = expected_graph {
        if expected.digest() != graph_hash {
            return Err(Error::Load(format!(
                "checkpoint was built for graph {}, not {}",
                graph.name, expected.name
            )));
        }
    }
    if config_digest(&config) != digest {
        return Err(Error::Load("config digest does not match the embedded configuration".into()));
    }
    let count = r.u32("record count")?;
    let mut stored = BTreeMap::new();
    for _ in 0..count {
        let name = r.str("record name")?;
        let ndim = r.u32("record rank")?;
        let shape = (0..ndim).map(|_| r.u32("record shape")).collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| Error::Corrupt(format!("record {name} has an oversized shape")))?;
        let value = Tensor::new(shape, r.f32s(len, "record values")?)?;
        if stored.insert(name.clone(), value).is_some() {
            return Err(Error::Corrupt(format!("parameter {name} stored twice")));
        }
    }
    r.finish()?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let snapshot = match kind {
        0 => {
            if streams != 1 {
                return Err(Error::Corrupt(format!("baseline checkpoint declares {streams} streams")));
            }
            let mut net = StgcnNetwork::new(graph, config, &mut rng)?;
            fill(&mut net.params, "", &mut stored)?;
            Snapshot::Baseline(net)
        }
        1 => {
            let base = StgcnNetwork::new(graph, config, &mut rng)?;
            let mut model = RaGcnModel::init_streams(&base, streams)?;
            for (s, net) in model.streams.iter_mut().enumerate() {
                fill(&mut net.params, &format!("streams.{s}."), &mut stored)?;
            }
            fill(&mut model.fusion, "", &mut stored)?;
            Snapshot::Model(model)
        }
        other => return Err(Error::Corrupt(format!("unknown checkpoint kind {other}"))),
    };
    if let Some(extra) = stored.keys().next() {
        return Err(Error::Load(format!("checkpoint has unexpected parameter {extra}")));
    }
    let meta = CheckpointMeta { version, graph_hash, config_digest: digest, streams, epoch };
    Ok((snapshot, meta))
}

pub fn save_checkpoint_file(path: impl AsRef<Path>, snapshot: &Snapshot, epoch: usize) -> Result<()> {
    std::fs::write(path, save_checkpoint(snapshot, epoch)?)?;
    Ok(())
}

pub fn load_checkpoint_file(path: impl AsRef<Path>, expected_graph: Option<&GraphDef>) -> Result<(Snapshot, CheckpointMeta)> {
    load_checkpoint(&std::fs::read(path)?, expected_graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn baseline() -> StgcnNetwork {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = StgcnConfig::from_plan(3, 1, 3, &[(9, 4, 1), (4, 6, 2)]);
        StgcnNetwork::new(GraphDef::path(4), cfg, &mut rng).unwrap()
    }

    #[test]
    fn save_load_save_is_fixed_point() {
        let snap = Snapshot::Model(RaGcnModel::init_streams(&baseline(), 2).unwrap());
        let bytes = save_checkpoint(&snap, 7).unwrap();
        let (back, meta) = load_checkpoint(&bytes, None).unwrap();
        assert_eq!(meta.streams, 2);
        assert_eq!(meta.epoch, 7);
        assert_eq!(save_checkpoint(&back, 7).unwrap(), bytes);
    }

    #[test]
    fn rejects_truncation_and_wrong_graph() {
        let bytes = save_checkpoint(&Snapshot::Baseline(baseline()), 0).unwrap();
        assert!(matches!(load_checkpoint(&bytes[..bytes.len() / 2], None), Err(Error::Corrupt(_))));
        assert!(matches!(load_checkpoint(&bytes, Some(&GraphDef::path(5))), Err(Error::Load(_))));
        let mut wrong = bytes.clone();
        wrong[8] = 2;
        assert!(matches!(load_checkpoint(&wrong, None), Err(Error::Load(_))));
    }
}
