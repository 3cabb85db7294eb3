//! Finite-difference check of tape gradients on a micro RA-GCN.
//!
//! Masks are computed once and then held fixed, which matches how the tape
//! treats them (constants), so the loss is a smooth function of the
//! parameters apart from ReLU kinks.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activation::StreamMask;
use crate::error::{Error, Result};
use crate::graph::GraphDef;
use crate::model::{CamClass, RaGcnModel};
use crate::params::ParamSet;
use crate::stgcn::{Mode, StgcnConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Denominator floor for the relative error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub params: usize,
    pub seed: u64,
    pub step: f64,
    pub samples: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig { params: 20, seed: 0, step: 1e-5, samples: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    GraphWeight,
    EdgeImportance,
    TemporalKernel,
    Residual,
    Norm,
    FusionHead,
}

impl ParamKind {
    pub const ALL: [ParamKind; 6] = [
        ParamKind::GraphWeight,
        ParamKind::EdgeImportance,
        ParamKind::TemporalKernel,
        ParamKind::Residual,
        ParamKind::Norm,
        ParamKind::FusionHead,
    ];

    /// Kind of a trainable parameter name; stream classifier heads (unused by
    /// the fusion loss) map to `None`.
    pub fn of(name: &str) -> Option<ParamKind> {
        if name.starts_with("fusion.") {
            Some(ParamKind::FusionHead)
        } else if name.contains(".gcn.weight") {
            Some(ParamKind::GraphWeight)
        } else if name.contains(".gcn.importance") {
            Some(ParamKind::EdgeImportance)
        } else if name.contains(".tcn.weight") {
            Some(ParamKind::TemporalKernel)
        } else if name.contains(".residual.weight") {
            Some(ParamKind::Residual)
        } else if name.ends_with(".gamma") || name.ends_with(".beta") {
            Some(ParamKind::Norm)
        } else {
            None
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub name: String,
    pub index: usize,
    pub kind: ParamKind,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub entries: Vec<GradcheckEntry>,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "name,index,kind,analytic,numeric,rel_error")?;
        for e in &self.entries {
            writeln!(f, "{},{},{:?},{:.9e},{:.9e},{:.3e}", e.name, e.index, e.kind, e.analytic, e.numeric, e.rel_error)?;
        }
        write!(f, "max_rel_error,{:.3e}", self.max_rel_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// The micro configuration: five-joint path, eight frames, one body, four
/// layers, two streams, two classes, no dropout.
pub fn micro_model(seed: u64, samples: usize) -> Result<(RaGcnModel, Tensor, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cfg = StgcnConfig::from_plan(2, 1, 3, &[(9, 4, 1), (4, 4, 1), (4, 6, 2), (6, 6, 1)]);
    cfg.dropout = 0.0;
    let model = RaGcnModel::new(GraphDef::path(5), cfg, 2, &mut rng)?;
    let x = Tensor::uniform(&[samples, 9, 8, 5, 1], -1.0, 1.0, &mut rng);
    let labels = (0..samples).map(|i| i % 2).collect();
    Ok((model, x, labels))
}

/// Where a sampled scalar lives: stream index (`None` for the fusion head),
/// entry index and flat offset.
#[derive(Clone, Copy, Debug)]
struct Location {
    stream: Option<usize>,
    entry: usize,
    offset: usize,
}

fn params_of(model: &mut RaGcnModel, stream: Option<usize>) -> &mut ParamSet {
    match stream {
        Some(s) => &mut model.streams[s].params,
        None => &mut model.fusion,
    }
}

fn loss_value(model: &mut RaGcnModel, x: &Tensor, labels: &[usize], masks: &[StreamMask]) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pass = model.forward_pass(&mut tape, &bind, x, CamClass::Labels(labels), Some(masks), Mode::Train, &mut rng)?;
    let loss = model.loss(&mut tape, &pass, labels, false)?;
    Ok(tape.value(loss).data()[0])
}

/// Compares tape gradients with central differences on `cfg.params` scalars
/// drawn round-robin across parameter kinds.
pub fn run_gradcheck(model: &mut RaGcnModel, x: &Tensor, labels: &[usize], cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.params == 0 || !(cfg.step > 0.0) {
        return Err(Error::Config("gradcheck needs a positive parameter count and step".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut tape = Tape::new();
    let bind = model.bind(&mut tape);
    let mut fwd_rng = ChaCha8Rng::seed_from_u64(0);
    let pass = model.forward_pass(&mut tape, &bind, x, CamClass::Labels(labels), None, Mode::Train, &mut fwd_rng)?;
    let masks = pass.masks.clone();
    let loss = model.loss(&mut tape, &pass, labels, false)?;
    tape.backward(loss)?;

    let mut grads = Vec::new();
    let mut pools: Vec<(ParamKind, Vec<Location>)> = ParamKind::ALL.iter().map(|&k| (k, Vec::new())).collect();
    let sets: Vec<Option<usize>> = (0..model.num_streams()).map(Some).chain([None]).collect();
    for &stream in &sets {
        let b = match stream {
            Some(s) => &bind.streams[s],
            None => &bind.fusion,
        };
        let g = b.grads(&tape);
        let set = match stream {
            Some(s) => &model.streams[s].params,
            None => &model.fusion,
        };
        for (entry, e) in set.entries().iter().enumerate() {
            let Some(kind) = ParamKind::of(&e.name).filter(|_| e.trainable) else { continue };
            let pool = &mut pools.iter_mut().find(|(k, _)| *k == kind).expect("kind listed").1;
            // Importance entries off the partition's support never affect the loss.
            let support = match (kind, stream) {
                (ParamKind::EdgeImportance, Some(s)) => e
                    .name
                    .rsplit('.')
                    .next()
                    .and_then(|d| d.parse::<usize>().ok())
                    .map(|d| model.streams[s].adjacency().matrices[d].clone()),
                _ => None,
            };
            pool.extend(
                (0..e.value.len())
                    .filter(|&i| support.as_ref().map_or(true, |a| a.data()[i] != 0.0))
                    .map(|offset| Location { stream, entry, offset }),
            );
        }
        grads.push((stream, g));
    }
    for (_, pool) in pools.iter_mut() {
        pool.shuffle(&mut rng);
    }
    pools.retain(|(_, p)| !p.is_empty());

    let mut picks = Vec::with_capacity(cfg.params);
    let mut round = 0;
    while picks.len() < cfg.params && pools.iter().any(|(_, p)| round < p.len()) {
        for (kind, pool) in &pools {
            if picks.len() < cfg.params && round < pool.len() {
                picks.push((*kind, pool[round]));
            }
        }
        round += 1;
    }

    let mut entries = Vec::with_capacity(picks.len());
    for (kind, loc) in picks {
        let grad = grads.iter().find(|(s, _)| *s == loc.stream).expect("bound set").1[loc.entry].as_ref();
        let analytic = grad.map_or(0.0, |g| g[loc.offset]);
        let original = params_of(model, loc.stream).entries()[loc.entry].value.data()[loc.offset];
        let probe = |value: f64, model: &mut RaGcnModel| -> Result<f64> {
            params_of(model, loc.stream).entries_mut()[loc.entry].value.data_mut()[loc.offset] = value;
            loss_value(model, x, labels, &masks)
        };
        let plus = probe(original + cfg.step, model)?;
        let minus = probe(original - cfg.step, model)?;
        probe(original, model)?;
        let numeric = (plus - minus) / (2.0 * cfg.step);
        let name = params_of(model, loc.stream).entries()[loc.entry].name.clone();
        let name = match loc.stream {
            Some(s) => format!("streams.{s}.{name}"),
            None => name,
        };
        entries.push(GradcheckEntry {
            name,
            index: loc.offset,
            kind,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = entries.iter().map(|e| e.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport { entries, max_rel_error })
}
