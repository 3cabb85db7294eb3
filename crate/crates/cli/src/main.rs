//! `ragcn`: pretrain, finetune, evaluate and probe RA-GCN models.

mod config;
mod manifest;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ragcn::activation::upsample_map;
use ragcn::data::checkpoint::{load_checkpoint_file, save_checkpoint, CheckpointMeta, Snapshot};
use ragcn::data::dataset::DatasetFile;
use ragcn::data::synthetic::{generate_synthetic, SyntheticActionSpec};
use ragcn::gradcheck::{micro_model, run_gradcheck};
use ragcn::model::{CamClass, Classifier};
use ragcn::occlusion::{apply_occlusion, run_occlusion_suite, OcclusionSpec};
use ragcn::preprocess::{assemble_batch, SkeletonSequence};
use ragcn::stgcn::Mode;
use ragcn::tape::Tape;
use ragcn::train::{evaluate, finetune, pretrain_baseline, EpochLog, Evaluation};
use ragcn::{Error, GraphDef, RaGcnModel, Result, StgcnNetwork};
use serde_json::json;

use config::RunConfig;
use manifest::Manifest;

/// Largest relative error `gradcheck` accepts.
const GRADCHECK_TOLERANCE: f64 = 1e-3;
const EVAL_BATCH: usize = 32;

#[derive(Parser)]
#[command(name = "ragcn", version, about = "Richly activated GCNs for skeleton action recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single-stream ST-GCN baseline.
    Pretrain(Common),
    /// Initialize every stream from a baseline checkpoint and train jointly.
    Finetune(Common),
    /// Evaluate checkpoints, optionally under occlusion.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Run the full occlusion table (clean, parts 1-5, 10-50 frame blocks).
        #[arg(long)]
        suite: bool,
    },
    /// Write an occluded copy of a dataset.
    Occlude(Common),
    /// Write per-sample activation maps and masks as text.
    CamDump {
        #[command(flatten)]
        common: Common,
        /// Number of samples to dump.
        #[arg(long)]
        samples: Option<usize>,
        /// Use ground-truth classes instead of predictions for the maps.
        #[arg(long)]
        true_labels: bool,
    },
    /// Compare tape gradients with finite differences on a micro model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        params: Option<usize>,
    },
    /// Generate a planted-signal synthetic dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        #[arg(long)]
        per_class: Option<usize>,
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
}

#[derive(Args, Clone, Debug, Default)]
struct Common {
    /// TOML/JSON config file or a previous run's manifest.json.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    graph: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    val_dataset: Option<PathBuf>,
    /// Checkpoint to load; repeat to compare several models.
    #[arg(long = "checkpoint")]
    checkpoints: Vec<PathBuf>,
    #[arg(long)]
    streams: Option<usize>,
    #[arg(long)]
    dmax: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    /// Layer plan: standard, desk or micro.
    #[arg(long)]
    plan: Option<String>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Zero the joints of this body part.
    #[arg(long)]
    occlude_part: Option<u32>,
    /// Zero a random block of this many frames.
    #[arg(long)]
    occlude_frames: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($flag:ident => $($field:ident).+) => {
                if let Some(v) = self.$flag.clone() {
                    cfg.$($field).+ = v;
                }
            };
        }
        set!(streams => streams);
        set!(dmax => dmax);
        set!(window => window);
        set!(plan => plan);
        set!(dropout => dropout);
        set!(epochs => train.epochs);
        set!(batch_size => train.batch_size);
        set!(lr => train.learning_rate);
        if self.plan.is_some() {
            cfg.layers = None;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
            cfg.train.seed = seed;
            cfg.gradcheck.seed = seed;
        }
        for (flag, field) in [(&self.graph, &mut cfg.graph), (&self.dataset, &mut cfg.dataset), (&self.val_dataset, &mut cfg.val_dataset), (&self.out, &mut cfg.out)] {
            if flag.is_some() {
                *field = flag.clone();
            }
        }
        if !self.checkpoints.is_empty() {
            cfg.checkpoints = self.checkpoints.clone();
        }
        if self.occlude_part.is_some() || self.occlude_frames.is_some() {
            cfg.occlusion.clear();
            if let Some(part) = self.occlude_part {
                cfg.occlusion.push(OcclusionSpec { seed: cfg.seed, ..OcclusionSpec::spatial(part) });
            }
            if let Some(frames) = self.occlude_frames {
                cfg.occlusion.push(OcclusionSpec::temporal(frames, cfg.seed));
            }
        }
        Ok(cfg)
    }
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    manifest: Manifest,
    log: String,
}

impl Run {
    fn start(command: &str, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out.clone().unwrap_or_else(|| Path::new("runs").join(command));
        std::fs::create_dir_all(&out)?;
        let manifest = Manifest::new(command, &cfg)?;
        Ok(Run { cfg, out, manifest, log: String::from("epoch,split,loss,accuracy\n") })
    }

    fn record(&mut self, line: &EpochLog) {
        println!("{line}");
        let _ = writeln!(self.log, "{line}");
    }

    fn dataset(&mut self, path: &Path) -> Result<DatasetFile> {
        self.manifest.input(path)?;
        DatasetFile::load(path)
    }

    fn checkpoint(&mut self, path: &Path, graph: Option<&GraphDef>) -> Result<(Snapshot, CheckpointMeta)> {
        self.manifest.input(path)?;
        load_checkpoint_file(path, graph)
    }

    fn explicit_graph(&mut self) -> Result<Option<GraphDef>> {
        match self.cfg.graph.clone() {
            Some(path) => {
                self.manifest.input(&path)?;
                GraphDef::load(&path).map(Some)
            }
            None => Ok(None),
        }
    }

    fn finish(mut self, results: serde_json::Value) -> Result<()> {
        if self.log.lines().count() > 1 {
            let log = std::mem::take(&mut self.log);
            self.manifest.write_artifact(&self.out.join("log.csv"), log.as_bytes())?;
        }
        self.manifest.results = results;
        self.manifest.save(&self.out)
    }
}

enum Outcome {
    Done,
    CheckFailed(String),
}

fn eval_line(epoch: usize, eval: &Evaluation) -> EpochLog {
    EpochLog { epoch, split: "eval".into(), loss: eval.loss, accuracy: eval.accuracy }
}

fn evaluate_snapshot(snapshot: &mut Snapshot, samples: &[SkeletonSequence]) -> Result<Evaluation> {
    match snapshot {
        Snapshot::Baseline(net) => evaluate(net, samples, EVAL_BATCH),
        Snapshot::Model(model) => evaluate(model, samples, EVAL_BATCH),
    }
}

fn cmd_pretrain(mut run: Run) -> Result<Outcome> {
    let graph = run.cfg.graph_def()?;
    let train = run.dataset(&run.cfg.dataset_path()?.to_path_buf())?;
    let val = match run.cfg.val_dataset.clone() {
        Some(p) => Some(run.dataset(&p)?),
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let net = StgcnNetwork::new(graph.clone(), run.cfg.network_config(train.header.num_classes)?, &mut rng)?;
    let mut lines = Vec::new();
    let tc = run.cfg.train.clone();
    let outcome = pretrain_baseline(net, &train.samples, val.as_ref().map(|v| v.samples.as_slice()), &tc, &mut |l| {
        lines.push(l.clone())
    })?;
    for l in &lines {
        run.record(l);
    }
    let ckpt_path = run.out.join("baseline.ckpt");
    let bytes = save_checkpoint(&Snapshot::Baseline(outcome.best), outcome.best_epoch)?;
    run.manifest.write_artifact(&ckpt_path, &bytes)?;
    let (mut reloaded, _) = load_checkpoint_file(&ckpt_path, Some(&graph))?;
    let eval_set = val.as_ref().unwrap_or(&train);
    let eval = evaluate_snapshot(&mut reloaded, &eval_set.samples)?;
    run.record(&eval_line(outcome.best_epoch, &eval));
    run.finish(json!({
        "best_epoch": outcome.best_epoch,
        "eval_loss": eval.loss,
        "eval_accuracy": eval.accuracy,
    }))?;
    Ok(Outcome::Done)
}

fn cmd_finetune(mut run: Run) -> Result<Outcome> {
    let graph = run.explicit_graph()?;
    let ckpt = run.cfg.checkpoints.first().cloned().ok_or_else(|| Error::Usage("finetune needs --checkpoint".into()))?;
    let (snapshot, _) = run.checkpoint(&ckpt, graph.as_ref())?;
    let model = match snapshot {
        Snapshot::Baseline(net) => RaGcnModel::init_streams(&net, run.cfg.streams)?,
        Snapshot::Model(m) if m.num_streams() == run.cfg.streams => m,
        Snapshot::Model(m) => {
            return Err(Error::Config(format!(
                "checkpoint has {} streams but {} were requested",
                m.num_streams(),
                run.cfg.streams
            )))
        }
    };
    let train = run.dataset(&run.cfg.dataset_path()?.to_path_buf())?;
    let val = match run.cfg.val_dataset.clone() {
        Some(p) => Some(run.dataset(&p)?),
        None => None,
    };
    let tc = run.cfg.train.clone();
    let mut lines = Vec::new();
    let mut epoch_ckpts = Vec::new();
    let outcome = finetune(
        model,
        &train.samples,
        val.as_ref().map(|v| v.samples.as_slice()),
        &tc,
        &mut |l| lines.push(l.clone()),
        &mut |epoch, m| {
            epoch_ckpts.push((epoch, save_checkpoint(&Snapshot::Model(m.clone()), epoch)?));
            Ok(())
        },
    )?;
    for l in &lines {
        run.record(l);
    }
    for (epoch, bytes) in &epoch_ckpts {
        run.manifest.write_artifact(&run.out.join(format!("model-epoch{epoch}.ckpt")), bytes)?;
    }
    let path = run.out.join("model.ckpt");
    let bytes = save_checkpoint(&Snapshot::Model(outcome.best), outcome.best_epoch)?;
    run.manifest.write_artifact(&path, &bytes)?;
    let (mut reloaded, _) = load_checkpoint_file(&path, None)?;
    let eval_set = val.as_ref().unwrap_or(&train);
    let eval = evaluate_snapshot(&mut reloaded, &eval_set.samples)?;
    run.record(&eval_line(outcome.best_epoch, &eval));
    run.finish(json!({
        "best_epoch": outcome.best_epoch,
        "eval_loss": eval.loss,
        "eval_accuracy": eval.accuracy,
    }))?;
    Ok(Outcome::Done)
}

fn default_suite(seed: u64) -> Vec<OcclusionSpec> {
    let mut specs = vec![OcclusionSpec::none()];
    specs.extend((1..=5).map(OcclusionSpec::spatial));
    specs.extend([10, 20, 30, 40, 50].map(|n| OcclusionSpec::temporal(n, seed)));
    specs
}

fn apply_all(samples: Vec<SkeletonSequence>, specs: &[OcclusionSpec], graph: &GraphDef) -> Result<(Vec<SkeletonSequence>, serde_json::Value)> {
    let mut current = samples;
    let mut records = Vec::new();
    for spec in specs {
        let (next, applied) = apply_occlusion(&current, spec, graph)?;
        records.push(json!({ "spec": spec, "applied": applied }));
        current = next;
    }
    Ok((current, serde_json::Value::Array(records)))
}

fn cmd_eval(mut run: Run, suite: bool) -> Result<Outcome> {
    if run.cfg.checkpoints.is_empty() {
        return Err(Error::Usage("eval needs at least one --checkpoint".into()));
    }
    let explicit = run.explicit_graph()?;
    let mut snapshots = Vec::new();
    for path in run.cfg.checkpoints.clone() {
        let (snap, meta) = run.checkpoint(&path, explicit.as_ref())?;
        snapshots.push((path, snap, meta));
    }
    let graph = explicit.unwrap_or_else(|| snapshots[0].1.graph_def().clone());
    let data = run.dataset(&run.cfg.dataset_path()?.to_path_buf())?;

    if suite {
        let specs = if run.cfg.occlusion.is_empty() { default_suite(run.cfg.seed) } else { run.cfg.occlusion.clone() };
        let mut names = Vec::new();
        let mut models: Vec<Box<dyn Classifier>> = Vec::new();
        for (path, snap, _) in snapshots {
            let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            names.push(format!("{}s:{stem}", snap.num_streams()));
            match snap {
                Snapshot::Baseline(net) => models.push(Box::new(net)),
                Snapshot::Model(m) => models.push(Box::new(m)),
            }
        }
        let mut refs: Vec<(String, &mut dyn Classifier)> =
            names.into_iter().zip(models.iter_mut()).map(|(n, m)| (n, &mut **m as &mut dyn Classifier)).collect();
        let table = run_occlusion_suite(&mut refs, &data.samples, &specs, &graph, EVAL_BATCH)?;
        let text = table.to_delimited(',');
        print!("{text}");
        run.manifest.write_artifact(&run.out.join("occlusion.csv"), text.as_bytes())?;
        run.finish(serde_json::to_value(&table)?)?;
        return Ok(Outcome::Done);
    }

    let (samples, applied) = apply_all(data.samples, &run.cfg.occlusion, &graph)?;
    let mut results = Vec::new();
    for (path, mut snap, meta) in snapshots {
        let eval = evaluate_snapshot(&mut snap, &samples)?;
        run.record(&eval_line(meta.epoch, &eval));
        results.push(json!({
            "checkpoint": path.display().to_string(),
            "streams": snap.num_streams(),
            "loss": eval.loss,
            "accuracy": eval.accuracy,
            "predictions": eval.predictions,
        }));
    }
    run.finish(json!({ "evaluations": results, "occlusion": applied }))?;
    Ok(Outcome::Done)
}

fn cmd_occlude(mut run: Run) -> Result<Outcome> {
    let graph = run.cfg.graph_def()?;
    if let Some(p) = run.cfg.graph.clone() {
        run.manifest.input(&p)?;
    }
    if run.cfg.occlusion.is_empty() {
        return Err(Error::Usage("occlude needs --occlude-part or --occlude-frames (or occlusion specs in the config)".into()));
    }
    let data = run.dataset(&run.cfg.dataset_path()?.to_path_buf())?;
    let class_names = data.header.class_names.clone();
    let (samples, applied) = apply_all(data.samples, &run.cfg.occlusion, &graph)?;
    let occluded = DatasetFile::new(class_names, samples)?;
    run.manifest.write_artifact(&run.out.join("occluded.dat"), &occluded.to_bytes()?)?;
    run.finish(json!({ "occlusion": applied }))?;
    Ok(Outcome::Done)
}

fn cmd_cam_dump(mut run: Run, samples: Option<usize>, true_labels: bool) -> Result<Outcome> {
    let explicit = run.explicit_graph()?;
    let ckpt = run.cfg.checkpoints.first().cloned().ok_or_else(|| Error::Usage("cam-dump needs --checkpoint".into()))?;
    let (snapshot, _) = run.checkpoint(&ckpt, explicit.as_ref())?;
    let mut model = snapshot.into_model()?;
    let data = run.dataset(&run.cfg.dataset_path()?.to_path_buf())?;
    let count = samples.unwrap_or(run.cfg.cam_samples).min(data.samples.len());
    let chosen: Vec<&SkeletonSequence> = data.samples.iter().take(count).collect();
    let x = assemble_batch(&chosen, model.center_joint())?;
    let labels: Vec<usize> = chosen.iter().map(|s| s.label).collect();
    let mut tape = Tape::new();
    let bind = model.bind(&mut tape);
    let mut rng = ChaCha8Rng::seed_from_u64(run.cfg.seed);
    let class = if true_labels { CamClass::Labels(&labels) } else { CamClass::Predicted };
    let pass = model.forward_pass(&mut tape, &bind, &x, class, None, Mode::Eval, &mut rng)?;
    let dir = run.out.join("cam");
    std::fs::create_dir_all(&dir)?;
    let (t, v, m) = (x.shape()[2], x.shape()[3], x.shape()[4]);
    let reduction = model.config().temporal_reduction();
    let upsampled = pass.cams.iter().map(|c| upsample_map(c, t, reduction)).collect::<Result<Vec<_>>>()?;
    for (n, sample) in chosen.iter().enumerate() {
        let mut text = String::from("stream,body,frame,joint,class,cam,mask\n");
        for (s, (cam, mask)) in upsampled.iter().zip(&pass.masks).enumerate() {
            let class = pass.cams[s].classes[n];
            for b in 0..m {
                for f in 0..t {
                    for j in 0..v {
                        let _ = writeln!(
                            text,
                            "{},{b},{f},{j},{class},{:.6e},{:.6e}",
                            s + 1,
                            cam.get(&[n, b, f, j]),
                            mask.values.get(&[n, b, f, j])
                        );
                    }
                }
            }
        }
        let name: String = sample.sample_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect();
        run.manifest.write_artifact(&dir.join(format!("{n:04}-{name}.csv")), text.as_bytes())?;
    }
    run.finish(json!({ "samples": count, "streams": model.num_streams() }))?;
    Ok(Outcome::Done)
}

fn cmd_gradcheck(mut run: Run, params: Option<usize>) -> Result<Outcome> {
    let mut gc = run.cfg.gradcheck.clone();
    if let Some(p) = params {
        gc.params = p;
    }
    let (mut model, x, labels) = micro_model(gc.seed, gc.samples)?;
    let report = run_gradcheck(&mut model, &x, &labels, &gc)?;
    let text = format!("{report}\n");
    print!("{text}");
    run.manifest.write_artifact(&run.out.join("gradcheck.csv"), text.as_bytes())?;
    let passed = report.passes(GRADCHECK_TOLERANCE);
    run.finish(json!({ "params": report.entries.len(), "max_rel_error": report.max_rel_error, "passed": passed }))?;
    if passed {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::CheckFailed(format!(
            "max relative error {:.3e} exceeds {GRADCHECK_TOLERANCE:e}",
            report.max_rel_error
        )))
    }
}

fn cmd_synth(mut run: Run) -> Result<Outcome> {
    let graph = run.cfg.graph_def()?;
    if let Some(p) = run.cfg.graph.clone() {
        run.manifest.input(&p)?;
    }
    let s = &run.cfg.synth;
    let spec = SyntheticActionSpec::planted(&graph, s.classes, s.joints_per_class, s.per_class, s.frames, s.noise)?;
    let data = generate_synthetic(&spec, &graph, run.cfg.seed)?;
    let path = run.out.join("dataset.dat");
    run.manifest.write_artifact(&path, &data.to_bytes()?)?;
    println!("{} samples, {} classes -> {}", data.samples.len(), data.header.num_classes, path.display());
    run.finish(json!({ "samples": data.samples.len(), "spec": spec }))?;
    Ok(Outcome::Done)
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Pretrain(c) => cmd_pretrain(Run::start("pretrain", c.resolve()?)?),
        Command::Finetune(c) => cmd_finetune(Run::start("finetune", c.resolve()?)?),
        Command::Eval { common, suite } => cmd_eval(Run::start("eval", common.resolve()?)?, suite),
        Command::Occlude(c) => cmd_occlude(Run::start("occlude", c.resolve()?)?),
        Command::CamDump { common, samples, true_labels } => {
            cmd_cam_dump(Run::start("cam-dump", common.resolve()?)?, samples, true_labels)
        }
        Command::Gradcheck { common, params } => cmd_gradcheck(Run::start("gradcheck", common.resolve()?)?, params),
        Command::Synth { common, classes, per_class, frames, noise } => {
            let mut cfg = common.resolve()?;
            let s = &mut cfg.synth;
            s.classes = classes.unwrap_or(s.classes);
            s.per_class = per_class.unwrap_or(s.per_class);
            s.frames = frames.unwrap_or(s.frames);
            s.noise = noise.unwrap_or(s.noise);
            cmd_synth(Run::start("synth", cfg)?)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed(msg)) => {
            eprintln!("error[check]: {msg}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(if matches!(e, Error::Usage(_)) { 2 } else { 1 })
        }
    }
}
