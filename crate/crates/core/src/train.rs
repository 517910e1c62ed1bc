//! Three-stage training: composite losses, duplex diffusion, then
//! composite fine-tuning with the diffusion parameters held fixed.
//!
//! Everything that influences the loss trajectory (parameters, Adam
//! moments, rng positions, data cursor) lives in [`Trainer`] and round-trips
//! through checkpoints, so an interrupted run resumes bit-exactly.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{make_batches, observed_vocab, Batch, ParallelPair};
use crate::diffusion::{ddm_train_step, DdmSetup};
use crate::error::{config_err, Error, Result};
use crate::eval::{greedy_accuracy, EVAL_BATCH};
use crate::format::{self, NamedTensor};
use crate::losses::composite_loss;
use crate::model::{DuplexModel, DDM_PREFIX};
use crate::params::{apply_bn_updates, Ctx, ParamKind, ParamStore};
use crate::rdc::{Direction, BN_MOMENTUM};
use crate::rng::{streams, Rng, RngState, RngStreams};
use crate::tensor::Scalar;

/// Precision of training runs.
pub type TrainScalar = f32;

pub const CHECKPOINT_VERSION: u32 = 1;
const EVAL_STREAM: &str = "ddm-eval";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Composite losses on the duplex stack.
    Rdc,
    /// Duplex noise-prediction training.
    Ddm,
    /// Composite losses again, diffusion parameters frozen.
    Finetune,
}

impl Stage {
    pub const ALL: [Stage; 3] = [Stage::Rdc, Stage::Ddm, Stage::Finetune];

    pub fn number(self) -> u8 {
        match self {
            Stage::Rdc => 1,
            Stage::Ddm => 2,
            Stage::Finetune => 3,
        }
    }

    fn index(self) -> usize {
        self.number() as usize - 1
    }

    pub fn from_number(n: u8) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|s| s.number() == n)
            .ok_or_else(|| config_err(format!("no stage {n}")))
    }

    pub fn budget(self, cfg: &RunConfig) -> usize {
        match self {
            Stage::Rdc => cfg.train.k1,
            Stage::Ddm => cfg.train.k2,
            Stage::Finetune => cfg.train.k3,
        }
    }
}

/// Linear warmup to `lr`, then `lr·√(warmup/step)`. `step` counts from 1.
pub fn learning_rate(lr: f64, warmup: usize, step: u64) -> f64 {
    let (s, w) = (step.max(1) as f64, warmup as f64);
    if warmup == 0 {
        lr
    } else if s <= w {
        lr * s / w
    } else {
        lr * (w / s).sqrt()
    }
}

/// Global L2 norm over every present gradient.
pub fn grad_norm<S: Scalar>(grads: &[Option<Vec<S>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter().map(|v| v.f64() * v.f64()))
        .sum::<f64>()
        .sqrt()
}

/// Adam with per-entry step counts, so parameters that start receiving
/// gradients late get proper bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<S> {
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: Vec<u64>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros = |e: &crate::params::ParamEntry<S>| match e.kind {
            ParamKind::Weight => vec![S::zero(); e.numel()],
            ParamKind::Buffer => Vec::new(),
        };
        Adam {
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
            t: vec![0; store.len()],
        }
    }

    /// Apply one update from `grads` (store order), each scaled by `scale`
    /// first. Entries without a gradient are left untouched.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<Vec<S>>], lr: f64, scale: f64, betas: (f64, f64), eps: f64) {
        let (b1, b2) = betas;
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
            let p = &mut store.entries_mut()[i].data;
            for (j, gj) in g.iter().enumerate() {
                let gj = gj.f64() * scale;
                let m = b1 * self.m[i][j].f64() + (1.0 - b1) * gj;
                let v = b2 * self.v[i][j].f64() + (1.0 - b2) * gj * gj;
                self.m[i][j] = S::of(m);
                self.v[i][j] = S::of(v);
                p[j] = S::of(p[j].f64() - lr * (m / c1) / ((v / c2).sqrt() + eps));
            }
        }
    }

    fn to_named(&self, store: &ParamStore<S>) -> Vec<NamedTensor<S>> {
        let mut out = Vec::new();
        for (i, e) in store.entries().iter().enumerate() {
            if e.kind == ParamKind::Weight {
                for (tag, data) in [("m", &self.m[i]), ("v", &self.v[i])] {
                    out.push(NamedTensor {
                        name: format!("{tag}/{}", e.name),
                        shape: e.shape.clone(),
                        data: data.clone(),
                    });
                }
            }
        }
        out
    }

    fn load_named(&mut self, store: &ParamStore<S>, tensors: Vec<NamedTensor<S>>, steps: Vec<u64>) -> Result<()> {
        if steps.len() != store.len() {
            return Err(Error::Format("optimizer step counts do not match the model".into()));
        }
        let mut it = tensors.into_iter();
        for (i, e) in store.entries().iter().enumerate() {
            if e.kind != ParamKind::Weight {
                continue;
            }
            for tag in ["m", "v"] {
                let t = it
                    .next()
                    .ok_or_else(|| Error::Format("optimizer state is missing tensors".into()))?;
                if t.name != format!("{tag}/{}", e.name) || t.shape != e.shape {
                    return Err(Error::Format(format!("optimizer tensor {} does not match {}", t.name, e.name)));
                }
                if tag == "m" {
                    self.m[i] = t.data;
                } else {
                    self.v[i] = t.data;
                }
            }
        }
        if it.next().is_some() {
            return Err(Error::Format("optimizer state has extra tensors".into()));
        }
        self.t = steps;
        Ok(())
    }
}

/// Counters that locate a run in its schedule and data stream.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    /// Optimizer steps over all stages.
    pub step: u64,
    pub stage_steps: [u64; 3],
    pub epoch: u64,
    /// Next batch within the epoch.
    pub cursor: usize,
}

/// One metrics line. Absent values are omitted from JSON and left empty in
/// CSV.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: u8,
    /// `train` for a logged optimizer step, `eval` for held-out metrics.
    pub kind: String,
    pub loss: Option<f64>,
    pub fwd: Option<f64>,
    pub rev: Option<f64>,
    pub fba_fwd: Option<f64>,
    pub fba_rev: Option<f64>,
    pub cc_x: Option<f64>,
    pub cc_y: Option<f64>,
    pub cc_skipped: Option<usize>,
    pub l_ddm: Option<f64>,
    pub ddm_t: Option<usize>,
    pub mse_x: Option<f64>,
    pub mse_y: Option<f64>,
    pub lr: Option<f64>,
    pub grad_norm: Option<f64>,
    pub acc_fwd: Option<f64>,
    pub acc_rev: Option<f64>,
    pub dev_loss: Option<f64>,
    pub dev_ddm: Option<f64>,
}

impl MetricRecord {
    fn new(step: u64, stage: Stage, kind: &str) -> Self {
        MetricRecord {
            step,
            stage: stage.number(),
            kind: kind.into(),
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("record serializes");
        if let Some(map) = v.as_object_mut() {
            map.retain(|_, x| !x.is_null());
        }
        v.to_string()
    }
}

/// Held-out quality at one point of training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSnapshot {
    pub acc_fwd: f64,
    pub acc_rev: f64,
    pub dev_loss: f64,
}

struct RunOutput {
    dir: PathBuf,
    jsonl: BufWriter<File>,
    csv: csv::Writer<File>,
    timing: BufWriter<File>,
    started: Instant,
}

impl RunOutput {
    fn open(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir.join("checkpoints"))?;
        let append = |name: &str| OpenOptions::new().create(true).append(true).open(dir.join(name));
        let csv_path = dir.join("metrics.csv");
        let fresh_csv = fs::metadata(&csv_path).map(|m| m.len() == 0).unwrap_or(true);
        let csv = csv::WriterBuilder::new()
            .has_headers(fresh_csv)
            .from_writer(append("metrics.csv")?);
        Ok(RunOutput {
            dir: dir.to_path_buf(),
            jsonl: BufWriter::new(append("metrics.jsonl")?),
            csv,
            timing: BufWriter::new(append("timing.jsonl")?),
            started: Instant::now(),
        })
    }

    fn write(&mut self, rec: &MetricRecord) -> Result<()> {
        writeln!(self.jsonl, "{}", rec.to_json())?;
        self.jsonl.flush()?;
        self.csv.serialize(rec).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        self.csv.flush()?;
        let wall = self.started.elapsed().as_secs_f64();
        writeln!(self.timing, "{}", serde_json::json!({"step": rec.step, "kind": rec.kind, "wallclock_s": wall}))?;
        self.timing.flush()?;
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointState {
    version: u32,
    config_hash: String,
    progress: Progress,
    adam_steps: Vec<u64>,
    dropout_rng: RngState,
    diffusion_rng: RngState,
}

/// Owns the model, optimizer, data stream and rng streams of one run.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: DuplexModel,
    pub store: ParamStore<TrainScalar>,
    adam: Adam<TrainScalar>,
    pub progress: Progress,
    dropout_rng: Rng,
    diffusion_rng: Rng,
    setup: DdmSetup,
    train: Vec<ParallelPair>,
    dev: Vec<ParallelPair>,
    batches: Option<(u64, Vec<Batch>)>,
    out: Option<RunOutput>,
    /// Every record emitted so far in this process.
    pub history: Vec<MetricRecord>,
}

impl Trainer {
    pub fn new(cfg: RunConfig, train: Vec<ParallelPair>, dev: Vec<ParallelPair>) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::Data("training corpus is empty".into()));
        }
        let vx = observed_vocab(&train.iter().chain(&dev).map(|p| ParallelPair { src: p.src.clone(), tgt: vec![0] }).collect::<Vec<_>>());
        let vy = observed_vocab(&train.iter().chain(&dev).map(|p| ParallelPair { src: vec![0], tgt: p.tgt.clone() }).collect::<Vec<_>>());
        if vx > cfg.model.vocab_x || vy > cfg.model.vocab_y {
            return Err(config_err(format!(
                "corpus uses {vx}/{vy} units but the model has vocabularies {}/{}",
                cfg.model.vocab_x, cfg.model.vocab_y
            )));
        }
        let (model, store) = DuplexModel::new::<TrainScalar>(&cfg.model, cfg.seed)?;
        let streams = RngStreams::new(cfg.seed);
        let setup = cfg.diffusion.setup()?;
        let mut t = Trainer {
            adam: Adam::new(&store),
            model,
            store,
            progress: Progress::default(),
            dropout_rng: streams.stream(streams::DROPOUT),
            diffusion_rng: streams.stream(streams::DIFFUSION),
            setup,
            train,
            dev,
            batches: None,
            out: None,
            history: Vec::new(),
            cfg,
        };
        // Surface oversized pairs before any step is taken.
        t.current_batches()?;
        Ok(t)
    }

    /// Rebuild a trainer from a checkpoint written under the same config.
    pub fn resume(cfg: RunConfig, train: Vec<ParallelPair>, dev: Vec<ParallelPair>, ckpt: &Path) -> Result<Self> {
        let mut t = Self::new(cfg, train, dev)?;
        t.load_checkpoint(ckpt)?;
        Ok(t)
    }

    /// Write metrics, timing, config and checkpoints under `dir`.
    pub fn with_output(mut self, dir: &Path) -> Result<Self> {
        let out = RunOutput::open(dir)?;
        self.cfg.save(&dir.join("config.toml"))?;
        self.out = Some(out);
        Ok(self)
    }

    pub fn out_dir(&self) -> Option<&Path> {
        self.out.as_ref().map(|o| o.dir.as_path())
    }

    pub fn dev(&self) -> &[ParallelPair] {
        &self.dev
    }

    fn current_batches(&mut self) -> Result<&[Batch]> {
        let epoch = self.progress.epoch;
        if self.batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut rng = RngStreams::new(self.cfg.seed).indexed(streams::DATA, epoch);
            let b = make_batches(&self.train, self.cfg.train.batch_tokens, &mut rng)?;
            self.batches = Some((epoch, b));
        }
        Ok(&self.batches.as_ref().expect("just built").1)
    }

    fn next_batch(&mut self) -> Result<Batch> {
        let cursor = self.progress.cursor;
        let batches = self.current_batches()?;
        let batch = batches[cursor].clone();
        if cursor + 1 == batches.len() {
            self.progress.epoch += 1;
            self.progress.cursor = 0;
        } else {
            self.progress.cursor += 1;
        }
        Ok(batch)
    }

    fn emit(&mut self, rec: MetricRecord) -> Result<()> {
        if let Some(out) = &mut self.out {
            out.write(&rec)?;
        }
        self.history.push(rec);
        Ok(())
    }

    /// Run the remaining budget of each stage in order.
    pub fn run(&mut self, stages: &[Stage]) -> Result<()> {
        for &s in stages {
            self.run_stage(s)?;
        }
        Ok(())
    }

    pub fn run_stage(&mut self, stage: Stage) -> Result<()> {
        let budget = stage.budget(&self.cfg) as u64;
        let i = stage.index();
        if self.progress.stage_steps[i] >= budget {
            return Ok(());
        }
        if self.progress.stage_steps[i] == 0 {
            self.log_eval(stage)?;
        }
        while self.progress.stage_steps[i] < budget {
            let rec = self.step(stage)?;
            let done = self.progress.stage_steps[i];
            if done % self.cfg.train.log_interval as u64 == 0 || done == budget {
                self.emit(rec)?;
            }
            if done % self.cfg.train.eval_interval as u64 == 0 || done == budget {
                self.log_eval(stage)?;
                self.checkpoint_to_run_dir()?;
            }
        }
        Ok(())
    }

    /// One optimizer step of `stage` on the next batch.
    pub fn step(&mut self, stage: Stage) -> Result<MetricRecord> {
        let batch = self.next_batch()?;
        let (src, tgt) = (batch.src_slices(), batch.tgt_slices());
        let step = self.progress.step + 1;
        let mut rec = MetricRecord::new(step, stage, "train");
        let model = &self.model;
        let tc = &self.cfg.train;
        let with_ddm = stage == Stage::Ddm;
        let b = self
            .store
            .bind(|e| model.is_trainable(e) && (with_ddm || !e.name.starts_with(DDM_PREFIX)));
        let ctx = Ctx::new(true, self.dropout_rng.clone());

        let composite = |rec: &mut MetricRecord| {
            let (loss, terms) = composite_loss(model, &b, &ctx, &src, &tgt, &tc.weights, tc.mode)?;
            rec.fwd = Some(terms.fwd);
            rec.rev = Some(terms.rev);
            rec.fba_fwd = Some(terms.fba_fwd);
            rec.fba_rev = Some(terms.fba_rev);
            rec.cc_x = Some(terms.cc_x);
            rec.cc_y = Some(terms.cc_y);
            rec.cc_skipped = Some(terms.cc_skipped);
            Ok::<_, Error>(loss)
        };
        let loss = match stage {
            Stage::Rdc | Stage::Finetune => composite(&mut rec)?,
            Stage::Ddm => {
                let d = ddm_train_step(model, &b, &ctx, &self.setup, &src, &tgt, &mut self.diffusion_rng)?;
                rec.l_ddm = Some(d.loss.item().f64());
                rec.ddm_t = Some(d.t);
                rec.mse_x = Some(d.mse_x);
                rec.mse_y = Some(d.mse_y);
                if tc.stage2_composite {
                    d.loss.add(&composite(&mut rec)?)?
                } else {
                    d.loss
                }
            }
        };
        let value = loss.item().f64();
        rec.loss = Some(value);
        let diverged = |detail: String| Error::Divergence {
            step: step as usize,
            stage: format!("stage {}", stage.number()),
            detail,
        };
        if !value.is_finite() {
            return Err(diverged(format!("non-finite loss; step record {}", rec.to_json())));
        }
        loss.backward()?;
        let grads = b.grads();
        let norm = grad_norm(&grads);
        if !norm.is_finite() {
            return Err(diverged(format!("non-finite gradient norm at loss {value}")));
        }
        let scale = if tc.clip_norm > 0.0 && norm > tc.clip_norm { tc.clip_norm / norm } else { 1.0 };
        let lr = learning_rate(tc.lr, tc.warmup, step);
        rec.lr = Some(lr);
        rec.grad_norm = Some(norm);
        let (betas, eps) = ((tc.beta1, tc.beta2), tc.adam_eps);
        drop(b);
        self.adam.update(&mut self.store, &grads, lr, scale, betas, eps);
        apply_bn_updates(&mut self.store, &ctx.take_bn_updates(), BN_MOMENTUM);
        self.dropout_rng = ctx.into_rng();
        self.progress.step = step;
        self.progress.stage_steps[stage.index()] += 1;
        Ok(rec)
    }

    fn eval_pairs(&self) -> &[ParallelPair] {
        &self.dev[..self.dev.len().min(self.cfg.train.eval_pairs)]
    }

    /// Held-out greedy accuracy in both directions and the mean composite
    /// loss, in eval mode.
    pub fn evaluate(&self) -> Result<EvalSnapshot> {
        let pairs = self.eval_pairs();
        if pairs.is_empty() {
            return Err(Error::Data("no held-out pairs to evaluate on".into()));
        }
        let b = self.store.bind_frozen();
        let ctx = Ctx::eval();
        let tc = &self.cfg.train;
        let mut total = 0.0;
        for chunk in pairs.chunks(EVAL_BATCH) {
            let src: Vec<&[usize]> = chunk.iter().map(|p| p.src.as_slice()).collect();
            let tgt: Vec<&[usize]> = chunk.iter().map(|p| p.tgt.as_slice()).collect();
            let (_, terms) = composite_loss(&self.model, &b, &ctx, &src, &tgt, &tc.weights, tc.mode)?;
            total += terms.total * chunk.len() as f64;
        }
        Ok(EvalSnapshot {
            acc_fwd: greedy_accuracy(&self.model, &b, pairs, Direction::Forward)?,
            acc_rev: greedy_accuracy(&self.model, &b, pairs, Direction::Reverse)?,
            dev_loss: total / pairs.len() as f64,
        })
    }

    /// Held-out L_DDM under a fixed noise stream, comparable across calls.
    pub fn evaluate_ddm(&self) -> Result<f64> {
        let pairs = self.eval_pairs();
        if pairs.is_empty() {
            return Err(Error::Data("no held-out pairs to evaluate on".into()));
        }
        let b = self.store.bind_frozen();
        let ctx = Ctx::eval();
        let mut rng = RngStreams::new(self.cfg.seed).stream(EVAL_STREAM);
        let (mut sum, mut n) = (0.0, 0usize);
        for chunk in pairs.chunks(EVAL_BATCH) {
            let src: Vec<&[usize]> = chunk.iter().map(|p| p.src.as_slice()).collect();
            let tgt: Vec<&[usize]> = chunk.iter().map(|p| p.tgt.as_slice()).collect();
            for _ in 0..self.cfg.diffusion.eval_draws.max(1) {
                sum += ddm_train_step(&self.model, &b, &ctx, &self.setup, &src, &tgt, &mut rng)?.loss.item().f64();
                n += 1;
            }
        }
        Ok(sum / n as f64)
    }

    fn log_eval(&mut self, stage: Stage) -> Result<()> {
        if self.dev.is_empty() {
            return Ok(());
        }
        let snap = self.evaluate()?;
        let mut rec = MetricRecord::new(self.progress.step, stage, "eval");
        rec.acc_fwd = Some(snap.acc_fwd);
        rec.acc_rev = Some(snap.acc_rev);
        rec.dev_loss = Some(snap.dev_loss);
        if stage == Stage::Ddm {
            rec.dev_ddm = Some(self.evaluate_ddm()?);
        }
        self.emit(rec)
    }

    fn checkpoint_to_run_dir(&mut self) -> Result<()> {
        let Some(dir) = self.out_dir().map(Path::to_path_buf) else {
            return Ok(());
        };
        let ckpt = dir.join("checkpoints").join(format!("step-{:07}", self.progress.step));
        self.save_checkpoint(&ckpt)?;
        fs::write(dir.join("checkpoints").join("latest"), ckpt.file_name().unwrap().to_string_lossy().as_bytes())?;
        Ok(())
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        format::save(&dir.join("params.dplx"), &self.store.to_named())?;
        format::save(&dir.join("optim.dplx"), &self.adam.to_named(&self.store))?;
        let state = CheckpointState {
            version: CHECKPOINT_VERSION,
            config_hash: self.cfg.hash(),
            progress: self.progress.clone(),
            adam_steps: self.adam.t.clone(),
            dropout_rng: RngState::capture(&self.dropout_rng),
            diffusion_rng: RngState::capture(&self.diffusion_rng),
        };
        fs::write(dir.join("state.json"), serde_json::to_string_pretty(&state)?)?;
        self.cfg.save(&dir.join("config.toml"))?;
        Ok(())
    }

    fn load_checkpoint(&mut self, dir: &Path) -> Result<()> {
        let fail = |reason: String| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason,
        };
        let state: CheckpointState = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
        if state.version != CHECKPOINT_VERSION {
            return Err(fail(format!("version {} is not {CHECKPOINT_VERSION}", state.version)));
        }
        if state.config_hash != self.cfg.hash() {
            return Err(fail("config hash differs from the run being resumed".into()));
        }
        self.store.load_named(format::load(&dir.join("params.dplx"))?)?;
        self.adam
            .load_named(&self.store, format::load(&dir.join("optim.dplx"))?, state.adam_steps)?;
        self.progress = state.progress;
        self.dropout_rng = state.dropout_rng.restore()?;
        self.diffusion_rng = state.diffusion_rng.restore()?;
        self.batches = None;
        Ok(())
    }
}

/// Resolve a run directory or checkpoint directory to a checkpoint.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join("params.dplx").is_file() {
        return Ok(path.to_path_buf());
    }
    let latest = path.join("checkpoints").join("latest");
    if latest.is_file() {
        let name = fs::read_to_string(&latest)?;
        return Ok(path.join("checkpoints").join(name.trim()));
    }
    Err(Error::Checkpoint {
        path: path.to_path_buf(),
        reason: "no checkpoint found".into(),
    })
}

/// Load a trained model for inference.
pub fn load_model(path: &Path) -> Result<(RunConfig, DuplexModel, ParamStore<TrainScalar>)> {
    let dir = resolve_checkpoint(path)?;
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let (model, mut store) = DuplexModel::new::<TrainScalar>(&cfg.model, cfg.seed)?;
    store.load_named(format::load(&dir.join("params.dplx"))?)?;
    Ok((cfg, model, store))
}
