//! The ST-GCN baseline: distance-partitioned spatial graph convolution,
//! temporal convolution, residual layers, global average pooling and a
//! linear classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphDef, NormalizedAdjacencySet, SkeletonGraph, DEFAULT_ALPHA};
use crate::params::{Binding, ParamId, ParamSet};
use crate::preprocess::{fold_bodies, INPUT_CHANNELS};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
}

/// Per-layer view of a network configuration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StgcnLayerConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub temporal_stride: usize,
    pub temporal_window: usize,
    pub max_distance: usize,
    pub dropout_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StgcnConfig {
    pub num_classes: usize,
    /// `D_max`: adjacency partitions cover hop distances `0..=max_distance`.
    pub max_distance: usize,
    /// `L`: odd temporal kernel length.
    pub window: usize,
    pub dropout: f64,
    pub input_norm: bool,
    pub alpha: f64,
    pub layers: Vec<LayerSpec>,
}

/// Ten-layer channel plan with stride 2 at the two widening layers.
pub const STANDARD_PLAN: [(usize, usize, usize); 10] = [
    (INPUT_CHANNELS, 64, 1),
    (64, 64, 1),
    (64, 64, 1),
    (64, 64, 1),
    (64, 128, 2),
    (128, 128, 1),
    (128, 128, 1),
    (128, 256, 2),
    (256, 256, 1),
    (256, 256, 1),
];

impl StgcnConfig {
    pub fn standard(num_classes: usize, max_distance: usize, window: usize) -> Self {
        Self::from_plan(num_classes, max_distance, window, &STANDARD_PLAN)
    }

    /// `D_max = 2, L = 5`, the best cross-subject setting.
    pub fn cross_subject(num_classes: usize) -> Self {
        Self::standard(num_classes, 2, 5)
    }

    /// `D_max = 3, L = 9`, the best cross-view setting.
    pub fn cross_view(num_classes: usize) -> Self {
        Self::standard(num_classes, 3, 9)
    }

    pub fn from_plan(num_classes: usize, max_distance: usize, window: usize, plan: &[(usize, usize, usize)]) -> Self {
        StgcnConfig {
            num_classes,
            max_distance,
            window,
            dropout: 0.5,
            input_norm: true,
            alpha: DEFAULT_ALPHA,
            layers: plan
                .iter()
                .map(|&(i, o, s)| LayerSpec { in_channels: i, out_channels: o, stride: s })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        if self.window % 2 == 0 {
            return Err(Error::Config(format!("temporal window {} must be odd", self.window)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("alpha {} must be positive", self.alpha)));
        }
        let first = self.layers.first().ok_or_else(|| Error::Config("network has no layers".into()))?;
        if first.in_channels != INPUT_CHANNELS {
            return Err(Error::Config(format!(
                "first layer takes {} channels, input has {INPUT_CHANNELS}",
                first.in_channels
            )));
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.stride != 1 && l.stride != 2 {
                return Err(Error::Config(format!("layer {i}: stride {} not in {{1, 2}}", l.stride)));
            }
            if l.in_channels == 0 || l.out_channels == 0 {
                return Err(Error::Config(format!("layer {i}: zero channels")));
            }
            if i > 0 && self.layers[i - 1].out_channels != l.in_channels {
                return Err(Error::Config(format!(
                    "layer {i} takes {} channels but layer {} produces {}",
                    l.in_channels,
                    i - 1,
                    self.layers[i - 1].out_channels
                )));
            }
        }
        Ok(())
    }

    pub fn feature_channels(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    /// Product of temporal strides.
    pub fn temporal_reduction(&self) -> usize {
        self.layers.iter().map(|l| l.stride).product()
    }

    pub fn output_frames(&self, frames: usize) -> usize {
        self.layers.iter().fold(frames, |t, l| t.div_ceil(l.stride))
    }

    pub fn layer(&self, i: usize) -> StgcnLayerConfig {
        let l = self.layers[i];
        StgcnLayerConfig {
            in_channels: l.in_channels,
            out_channels: l.out_channels,
            temporal_stride: l.stride,
            temporal_window: self.window,
            max_distance: self.max_distance,
            dropout_rate: self.dropout,
        }
    }
}

/// Parameter handles of one batch normalization.
#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Debug)]
pub struct LayerIds {
    pub config: StgcnLayerConfig,
    pub graph_weights: Vec<ParamId>,
    pub importance: Vec<ParamId>,
    pub graph_norm: NormIds,
    pub temporal: ParamId,
    pub temporal_norm: NormIds,
    /// `None` for an identity shortcut.
    pub residual: Option<(ParamId, NormIds)>,
}

/// Outputs of the feature extractor.
#[derive(Clone, Copy, Debug)]
pub struct Features {
    /// `[N, C_final]`, averaged over frames, joints and bodies.
    pub pooled: Var,
    /// `[N·M, C_final, T', V]`, the map before global average pooling.
    pub feature_map: Var,
}

#[derive(Clone, Debug)]
pub struct StgcnNetwork {
    config: StgcnConfig,
    graph: SkeletonGraph,
    adjacency: NormalizedAdjacencySet,
    pub params: ParamSet,
    input_norm: Option<NormIds>,
    layers: Vec<LayerIds>,
    head_weight: ParamId,
    head_bias: ParamId,
}

fn add_norm(params: &mut ParamSet, prefix: &str, channels: usize) -> NormIds {
    NormIds {
        gamma: params.add(format!("{prefix}.gamma"), Tensor::ones(&[channels])),
        beta: params.add(format!("{prefix}.beta"), Tensor::zeros(&[channels])),
        running_mean: params.add_buffer(format!("{prefix}.running_mean"), Tensor::zeros(&[channels])),
        running_var: params.add_buffer(format!("{prefix}.running_var"), Tensor::ones(&[channels])),
    }
}

fn he_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

impl StgcnNetwork {
    pub fn new<R: Rng + ?Sized>(graph_def: GraphDef, config: StgcnConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let graph = SkeletonGraph::new(graph_def, config.max_distance, config.alpha)?;
        let adjacency = graph.build_partitions();
        let v = graph.num_joints();
        let partitions = config.max_distance + 1;
        let mut params = ParamSet::new();
        let input_norm = config.input_norm.then(|| add_norm(&mut params, "input_norm", INPUT_CHANNELS));
        let mut layers = Vec::with_capacity(config.layers.len());
        for i in 0..config.layers.len() {
            let lc = config.layer(i);
            let (cin, cout) = (lc.in_channels, lc.out_channels);
            let p = format!("layers.{i}");
            let graph_weights = (0..partitions)
                .map(|d| params.add(format!("{p}.gcn.weight.{d}"), he_uniform(&[cout, cin], cin, rng)))
                .collect();
            let importance = (0..partitions)
                .map(|d| params.add(format!("{p}.gcn.importance.{d}"), Tensor::ones(&[v, v])))
                .collect();
            let graph_norm = add_norm(&mut params, &format!("{p}.gcn_norm"), cout);
            let temporal = params.add(
                format!("{p}.tcn.weight"),
                he_uniform(&[cout, cout, lc.temporal_window], cout * lc.temporal_window, rng),
            );
            let temporal_norm = add_norm(&mut params, &format!("{p}.tcn_norm"), cout);
            let residual = (cin != cout || lc.temporal_stride != 1).then(|| {
                let w = params.add(format!("{p}.residual.weight"), he_uniform(&[cout, cin, 1], cin, rng));
                (w, add_norm(&mut params, &format!("{p}.residual_norm"), cout))
            });
            layers.push(LayerIds { config: lc, graph_weights, importance, graph_norm, temporal, temporal_norm, residual });
        }
        let c = config.feature_channels();
        let bound = 1.0 / (c as f64).sqrt();
        let head_weight = params.add("head.weight", Tensor::uniform(&[config.num_classes, c], -bound, bound, rng));
        let head_bias = params.add("head.bias", Tensor::zeros(&[config.num_classes]));
        Ok(StgcnNetwork { config, graph, adjacency, params, input_norm, layers, head_weight, head_bias })
    }

    pub fn config(&self) -> &StgcnConfig {
        &self.config
    }

    pub fn graph(&self) -> &SkeletonGraph {
        &self.graph
    }

    pub fn adjacency(&self) -> &NormalizedAdjacencySet {
        &self.adjacency
    }

    pub fn layers(&self) -> &[LayerIds] {
        &self.layers
    }

    pub fn input_norm(&self) -> Option<NormIds> {
        self.input_norm
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        (self.head_weight, self.head_bias)
    }

    /// Classifier weights `[num_classes, C_final]`; row `c` is `w^c`.
    pub fn head_weight(&self) -> &Tensor {
        self.params.get(self.head_weight)
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape)
    }

    fn norm(&mut self, tape: &mut Tape, bind: &Binding, x: Var, ids: NormIds, mode: Mode) -> Result<Var> {
        let (gamma, beta) = (bind.var(ids.gamma), bind.var(ids.beta));
        let (mean, var) = self.params.pair_mut(ids.running_mean, ids.running_var);
        tape.batch_norm(x, gamma, beta, mean.data_mut(), var.data_mut(), mode.is_train())
    }

    fn layer<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        index: usize,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let ids = self.layers[index].clone();
        let adjacency: Vec<Var> = self.adjacency.matrices.iter().map(|a| tape.constant(a.clone())).collect();
        let weights: Vec<Var> = ids.graph_weights.iter().map(|&p| bind.var(p)).collect();
        let importance: Vec<Var> = ids.importance.iter().map(|&p| bind.var(p)).collect();
        let spatial = spatial_graph_conv(tape, x, &adjacency, &weights, &importance)?;
        let h = self.norm(tape, bind, spatial, ids.graph_norm, mode)?;
        let h = tape.relu(h);
        let h = if mode.is_train() { tape.dropout(h, ids.config.dropout_rate, rng)? } else { h };
        let h = tape.temporal_conv(h, bind.var(ids.temporal), ids.config.temporal_stride)?;
        let h = self.norm(tape, bind, h, ids.temporal_norm, mode)?;
        let shortcut = match ids.residual {
            None => x,
            Some((w, norm)) => {
                let r = tape.temporal_conv(x, bind.var(w), ids.config.temporal_stride)?;
                self.norm(tape, bind, r, norm, mode)?
            }
        };
        let sum = tape.add(h, shortcut)?;
        Ok(tape.relu(sum))
    }

    /// Runs the layer stack on folded input `[N·M, 9, T, V]`.
    pub fn forward_features<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        x: Var,
        bodies: usize,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Features> {
        let s = tape.shape(x).to_vec();
        let v = self.graph.num_joints();
        if s.len() != 4 || s[1] != INPUT_CHANNELS || s[3] != v || bodies == 0 || s[0] % bodies != 0 {
            return Err(Error::Dimension(format!(
                "network expects [N·M, {INPUT_CHANNELS}, T, {v}] with M = {bodies}, got {:?}",
                s
            )));
        }
        let mut h = x;
        if let Some(ids) = self.input_norm {
            h = self.norm(tape, bind, h, ids, mode)?;
        }
        for i in 0..self.layers.len() {
            h = self.layer(tape, bind, i, h, mode, rng)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let pooled = tape.group_mean(pooled, bodies)?;
        Ok(Features { pooled, feature_map: h })
    }

    /// Linear classifier on pooled features.
    pub fn classify(&self, tape: &mut Tape, bind: &Binding, pooled: Var) -> Result<Var> {
        tape.linear(pooled, bind.var(self.head_weight), bind.var(self.head_bias))
    }

    /// Convenience pass from preprocessed input `[N, 9, T, V, M]` to logits.
    pub fn forward<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        bind: &Binding,
        x_prime: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Features, Var)> {
        let bodies = *x_prime.shape().last().ok_or_else(|| Error::Dimension("empty input".into()))?;
        let x = tape.constant(fold_bodies(x_prime)?);
        let features = self.forward_features(tape, bind, x, bodies, mode, rng)?;
        let logits = self.classify(tape, bind, features.pooled)?;
        Ok((features, logits))
    }
}

/// `Σ_d W_d · f_in · (Â_d ⊙ M_d)` where `W_d` mixes channels and the graph
/// product contracts the joint axis.
pub fn spatial_graph_conv(
    tape: &mut Tape,
    x: Var,
    adjacency: &[Var],
    weights: &[Var],
    importance: &[Var],
) -> Result<Var> {
    if adjacency.is_empty() || adjacency.len() != weights.len() || adjacency.len() != importance.len() {
        return Err(Error::Config(format!(
            "spatial_graph_conv: {} adjacency partitions, {} weights, {} importance masks",
            adjacency.len(),
            weights.len(),
            importance.len()
        )));
    }
    let mut total: Option<Var> = None;
    for d in 0..adjacency.len() {
        let a = tape.mul(adjacency[d], importance[d])?;
        let aggregated = tape.graph_aggregate(x, a)?;
        let mixed = tape.channel_mix(aggregated, weights[d])?;
        total = Some(match total {
            None => mixed,
            Some(t) => tape.add(t, mixed)?,
        });
    }
    Ok(total.expect("at least one partition"))
}
