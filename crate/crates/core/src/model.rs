//! Multi-stream RA-GCN: each stream is an ST-GCN that sees the preprocessed
//! input gated by a mask of the joints earlier streams have not yet
//! activated. Pooled stream features are concatenated and classified by one
//! linear fusion head.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::activation::{compute_cam, first_mask, mask_input, next_mask, upsample_map, ActivationMap, StreamMask};
use crate::error::{Error, Result};
use crate::graph::GraphDef;
use crate::params::{Binding, ParamId, ParamSet};
use crate::preprocess::fold_bodies;
use crate::stgcn::{Features, Mode, StgcnConfig, StgcnNetwork};
use crate::tape::{Tape, Var};
use crate::tensor::{argmax, Tensor};

/// Anything that maps preprocessed input `[N, 9, T, V, M]` to logits.
pub trait Classifier {
    fn center_joint(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Evaluation-mode logits `[N, K]`.
    fn predict_logits(&mut self, x_prime: &Tensor) -> Result<Tensor>;
}

impl Classifier for StgcnNetwork {
    fn center_joint(&self) -> usize {
        self.graph().center_joint()
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict_logits(&mut self, x_prime: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (_, logits) = self.forward(&mut tape, &bind, x_prime, Mode::Eval, &mut rng)?;
        Ok(tape.value(logits).clone())
    }
}

/// Which class selects the CAM weights `w^c`.
#[derive(Clone, Copy, Debug)]
pub enum CamClass<'a> {
    /// Ground truth, used while training.
    Labels(&'a [usize]),
    /// Arg-max of the preceding stream's own classifier, used at inference.
    Predicted,
}

/// Tape bindings for every parameter set of a model.
#[derive(Clone, Debug)]
pub struct ModelBinding {
    pub streams: Vec<Binding>,
    pub fusion: Binding,
}

/// Everything one forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelPass {
    /// Fusion logits `[N, K]`.
    pub logits: Var,
    /// Each stream's own classifier on its pooled features.
    pub stream_logits: Vec<Var>,
    pub features: Vec<Features>,
    /// Mask applied to each stream's input.
    pub masks: Vec<StreamMask>,
    /// CAM of each stream at feature resolution.
    pub cams: Vec<ActivationMap>,
}

#[derive(Clone, Debug)]
pub struct RaGcnModel {
    pub streams: Vec<StgcnNetwork>,
    pub fusion: ParamSet,
    fusion_weight: ParamId,
    fusion_bias: ParamId,
}

impl RaGcnModel {
    /// Independently initialized streams and a random fusion head.
    pub fn new<R: Rng + ?Sized>(graph: GraphDef, config: StgcnConfig, num_streams: usize, rng: &mut R) -> Result<Self> {
        if num_streams == 0 {
            return Err(Error::Config("an RA-GCN needs at least one stream".into()));
        }
        let streams = (0..num_streams)
            .map(|_| StgcnNetwork::new(graph.clone(), config.clone(), rng))
            .collect::<Result<Vec<_>>>()?;
        let width = num_streams * config.feature_channels();
        let bound = 1.0 / (width as f64).sqrt();
        let mut fusion = ParamSet::new();
        let fusion_weight = fusion.add("fusion.weight", Tensor::uniform(&[config.num_classes, width], -bound, bound, rng));
        let fusion_bias = fusion.add("fusion.bias", Tensor::zeros(&[config.num_classes]));
        Ok(RaGcnModel { streams, fusion, fusion_weight, fusion_bias })
    }

    /// Clones the baseline into every stream. The fusion head tiles the
    /// baseline classifier over the stream blocks scaled by `1 / S`, so with
    /// all-one masks the model reproduces the baseline logits.
    pub fn init_streams(baseline: &StgcnNetwork, num_streams: usize) -> Result<Self> {
        if num_streams == 0 {
            return Err(Error::Config("an RA-GCN needs at least one stream".into()));
        }
        let head = baseline.head_weight();
        let (k, c) = (head.shape()[0], head.shape()[1]);
        let scale = 1.0 / num_streams as f64;
        let mut weight = Tensor::zeros(&[k, num_streams * c]);
        for class in 0..k {
            for s in 0..num_streams {
                for ch in 0..c {
                    weight.set(&[class, s * c + ch], head.get(&[class, ch]) * scale);
                }
            }
        }
        let mut fusion = ParamSet::new();
        let fusion_weight = fusion.add("fusion.weight", weight);
        let bias = baseline.params.get(baseline.head_ids().1).clone();
        let fusion_bias = fusion.add("fusion.bias", bias);
        Ok(RaGcnModel { streams: vec![baseline.clone(); num_streams], fusion, fusion_weight, fusion_bias })
    }

    /// Rebuilds a model around existing parameter sets (checkpoint loading).
    pub fn from_parts(streams: Vec<StgcnNetwork>, fusion: ParamSet) -> Result<Self> {
        let first = streams.first().ok_or_else(|| Error::Config("no streams".into()))?;
        let (k, c) = (first.config().num_classes, first.config().feature_channels());
        if streams.iter().any(|s| s.config() != first.config() || s.graph() != first.graph()) {
            return Err(Error::Config("streams must share graph and configuration".into()));
        }
        let fusion_weight = fusion.find("fusion.weight").ok_or_else(|| Error::Config("missing fusion.weight".into()))?;
        let fusion_bias = fusion.find("fusion.bias").ok_or_else(|| Error::Config("missing fusion.bias".into()))?;
        if fusion.get(fusion_weight).shape() != [k, streams.len() * c] || fusion.get(fusion_bias).shape() != [k] {
            return Err(Error::Config("fusion head does not match streams".into()));
        }
        Ok(RaGcnModel { streams, fusion, fusion_weight, fusion_bias })
    }

    pub fn num_streams(&self) -> usize {
        self.streams.len()
    }

    pub fn config(&self) -> &StgcnConfig {
        self.streams[0].config()
    }

    pub fn graph_def(&self) -> &GraphDef {
        self.streams[0].graph().def()
    }

    pub fn fusion_ids(&self) -> (ParamId, ParamId) {
        (self.fusion_weight, self.fusion_bias)
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelBinding {
        ModelBinding {
            streams: self.streams.iter().map(|s| s.bind(tape)).collect(),
            fusion: self.fusion.bind(tape),
        }
    }

    /// Runs every stream in order. Unless `fixed_masks` is given, the mask of
    /// stream `s + 1` is built from the CAM of stream `s`, which is computed
    /// from the recorded feature map and treated as a constant.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_pass<R: Rng + ?Sized>(
        &mut self,
        tape: &mut Tape,
        bind: &ModelBinding,
        x_prime: &Tensor,
        cam_class: CamClass<'_>,
        fixed_masks: Option<&[StreamMask]>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ModelPass> {
        let s = x_prime.shape().to_vec();
        if s.len() != 5 {
            return Err(Error::Dimension(format!("model input must be [N, 9, T, V, M], got {:?}", s)));
        }
        let (n, t, v, m) = (s[0], s[2], s[3], s[4]);
        if let CamClass::Labels(labels) = cam_class {
            if labels.len() != n {
                return Err(Error::Input(format!("{} labels for {n} samples", labels.len())));
            }
        }
        if let Some(fixed) = fixed_masks {
            if fixed.len() != self.streams.len() {
                return Err(Error::Usage(format!(
                    "{} fixed masks for {} streams",
                    fixed.len(),
                    self.streams.len()
                )));
            }
        }
        let reduction = self.config().temporal_reduction();
        let mut masks: Vec<StreamMask> = match fixed_masks {
            Some(fixed) => fixed.to_vec(),
            None => vec![first_mask(n, m, t, v)],
        };
        let mut features = Vec::with_capacity(self.streams.len());
        let mut stream_logits = Vec::with_capacity(self.streams.len());
        let mut cams = Vec::with_capacity(self.streams.len());
        for idx in 0..self.streams.len() {
            let gated = mask_input(x_prime, &masks[idx])?;
            let x = tape.constant(fold_bodies(&gated)?);
            let stream = &mut self.streams[idx];
            let f = stream.forward_features(tape, &bind.streams[idx], x, m, mode, rng)?;
            let logits = stream.classify(tape, &bind.streams[idx], f.pooled)?;
            let classes: Vec<usize> = match cam_class {
                CamClass::Labels(labels) => labels.to_vec(),
                CamClass::Predicted => tape.value(logits).data().chunks(self.config().num_classes).map(argmax).collect(),
            };
            let stream = &self.streams[idx];
            let cam = compute_cam(tape.value(f.feature_map), m, stream.head_weight(), &classes, idx + 1)?;
            if fixed_masks.is_none() && idx + 1 < self.streams.len() {
                let up = upsample_map(&cam, t, reduction)?;
                let next = next_mask(&masks, &up)?;
                masks.push(next);
            }
            features.push(f);
            stream_logits.push(logits);
            cams.push(cam);
        }
        let pooled: Vec<Var> = features.iter().map(|f| f.pooled).collect();
        let joined = tape.concat(&pooled, 1)?;
        let logits = tape.linear(joined, bind.fusion.var(self.fusion_weight), bind.fusion.var(self.fusion_bias))?;
        Ok(ModelPass { logits, stream_logits, features, masks, cams })
    }

    /// Cross-entropy of the fusion logits. With `stream_heads`, the
    /// cross-entropy of every stream's own classifier is added, so each
    /// stream has to recognize the action from its masked input and its head
    /// stays a meaningful source of CAM weights.
    pub fn loss(
        &self,
        tape: &mut Tape,
        pass: &ModelPass,
        labels: &[usize],
        stream_heads: bool,
    ) -> Result<Var> {
        let mut loss = tape.cross_entropy(pass.logits, labels)?;
        if stream_heads {
            for &logits in &pass.stream_logits {
                let head_loss = tape.cross_entropy(logits, labels)?;
                loss = tape.add(loss, head_loss)?;
            }
        }
        Ok(loss)
    }
}

impl Classifier for RaGcnModel {
    fn center_joint(&self) -> usize {
        self.streams[0].graph().center_joint()
    }

    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn predict_logits(&mut self, x_prime: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bind = self.bind(&mut tape);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward_pass(&mut tape, &bind, x_prime, CamClass::Predicted, None, Mode::Eval, &mut rng)?;
        Ok(tape.value(pass.logits).clone())
    }
}
