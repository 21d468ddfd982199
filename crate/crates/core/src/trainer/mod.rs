//! Batch-kind dispatch, the two-phase paired iteration, Adam and checkpoints.
//!
//! A paired batch runs a normal-to-normal update, then one image encoding
//! feeding both decoders with the losses summed. Unpaired batches run the
//! single translation their modality allows. A "step" is one mini-batch.

mod adam;
mod checkpoint;
mod schedule;

use std::fmt::Write as _;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use adam::Adam;
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use schedule::{RngState, Schedule, SchedulePosition};

use crate::data::{Sample, SampleKind};
use crate::error::{Error, Result};
use crate::losses::{cosine_loss, l2_loss};
use crate::model::{CrossModalModel, Mode, ModelConfig, Net, ParamVars};
use crate::tensor::{Tape, Tensor, Var};

/// How a paired batch turns into optimizer updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairedUpdates {
    /// One update after each phase.
    #[default]
    Two,
    /// Gradients of both phases summed into one update.
    One,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    /// Mini-batches to run; ignored when `epochs` is set.
    pub steps: usize,
    pub epochs: Option<usize>,
    pub batch_size: usize,
    pub seed: u64,
    pub paired_updates: PairedUpdates,
    pub model: ModelConfig,
    pub data: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            steps: 300,
            epochs: None,
            batch_size: 4,
            seed: 0,
            paired_updates: PairedUpdates::Two,
            model: ModelConfig::default(),
            data: None,
        }
    }
}

impl TrainConfig {
    /// The full-length schedule: 40 epochs.
    pub fn forty_epochs() -> Self {
        TrainConfig {
            epochs: Some(40),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !self.betas.iter().all(|b| (0.0..1.0).contains(b)) {
            return Err(Error::Config(format!("betas must lie in [0, 1), got {:?}", self.betas)));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.model.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    NormalToNormal,
    /// Shared image encoding into both decoders.
    ImageToNormalAndImage,
    ImageToImage,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::NormalToNormal => "n2n",
            Phase::ImageToNormalAndImage => "i2n+i2i",
            Phase::ImageToImage => "i2i",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum PhaseOutcome {
    /// `loss` is the summed objective; `parts` names its terms.
    Ran { loss: f64, parts: Vec<(&'static str, f64)> },
    Skipped { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub outcome: PhaseOutcome,
}

impl PhaseRecord {
    pub fn loss(&self) -> Option<f64> {
        match self.outcome {
            PhaseOutcome::Ran { loss, .. } => Some(loss),
            PhaseOutcome::Skipped { .. } => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub kind: SampleKind,
    pub phases: Vec<PhaseRecord>,
    pub updates: usize,
}

impl IterationRecord {
    pub fn phase(&self, phase: Phase) -> Option<&PhaseRecord> {
        self.phases.iter().find(|p| p.phase == phase)
    }
}

/// Stacked rasters of a homogeneous batch.
struct Batch {
    kind: SampleKind,
    image: Option<Tensor>,
    normals: Option<Tensor>,
    mask: Tensor,
}

fn stack(batch: &[&Sample]) -> Result<Batch> {
    let kind = batch
        .first()
        .ok_or_else(|| Error::invalid("train_iteration", "empty batch"))?
        .kind;
    if let Some(other) = batch.iter().find(|s| s.kind != kind) {
        return Err(Error::invalid(
            "train_iteration",
            format!("mixed batch: {:?} and {:?}", kind, other.kind),
        ));
    }
    let collect = |f: fn(&Sample) -> Option<&Tensor>, what: &str| -> Result<Option<Tensor>> {
        let parts: Option<Vec<&Tensor>> = batch.iter().map(|s| f(s)).collect();
        match parts {
            Some(p) => Tensor::stack_batch(&p).map(Some),
            None if batch.iter().all(|s| f(s).is_none()) => Ok(None),
            None => Err(Error::invalid("train_iteration", format!("some samples lack {what}"))),
        }
    };
    let image = collect(|s| s.image.as_ref(), "an image")?;
    let normals = collect(|s| s.normals.as_ref(), "normals")?;
    let masks: Vec<&Tensor> = batch.iter().map(|s| &s.mask).collect();
    let need = |t: &Option<Tensor>, what: &str| {
        t.as_ref()
            .map(|_| ())
            .ok_or_else(|| Error::invalid("train_iteration", format!("{kind:?} batch without {what}")))
    };
    if kind.has_image() {
        need(&image, "images")?;
    }
    if kind.has_normals() {
        need(&normals, "normals")?;
    }
    Ok(Batch {
        kind,
        image,
        normals,
        mask: Tensor::stack_batch(&masks)?,
    })
}

type NamedLosses = Vec<(&'static str, Var)>;

/// Runs one phase on a fresh tape and accumulates the gradients of `nets`
/// into the parameter buffers. Returns the phase losses and the bound names.
fn run_phase(
    model: &mut CrossModalModel,
    nets: &[Net],
    build: impl FnOnce(&CrossModalModel, &mut Tape, &ParamVars) -> Result<(Var, NamedLosses)>,
) -> Result<(f64, Vec<(&'static str, f64)>, Vec<String>)> {
    let mut tape = Tape::new();
    let pv = model.bind(&mut tape, nets);
    let (total, parts) = build(model, &mut tape, &pv)?;
    let loss = tape.value(total).data()[0] as f64;
    let parts = parts
        .into_iter()
        .map(|(name, v)| (name, tape.value(v).data()[0] as f64))
        .collect();
    let grads = tape.backward(total)?;
    model.params.accumulate(&pv, &grads)?;
    Ok((loss, parts, pv.names().map(str::to_string).collect()))
}

fn missing_networks(model: &CrossModalModel, mode: Mode) -> Option<String> {
    let absent: Vec<&str> = mode
        .networks()
        .iter()
        .filter(|n| !model.has_network(**n))
        .map(|n| n.prefix().trim_end_matches('.'))
        .collect();
    (!absent.is_empty()).then(|| format!("configuration has no {}", absent.join(", ")))
}

fn skipped(phase: Phase, reason: String) -> PhaseRecord {
    PhaseRecord {
        phase,
        outcome: PhaseOutcome::Skipped { reason },
    }
}

fn ran(phase: Phase, loss: f64, parts: Vec<(&'static str, f64)>) -> PhaseRecord {
    PhaseRecord {
        phase,
        outcome: PhaseOutcome::Ran { loss, parts },
    }
}

/// One training iteration on a single-kind batch.
pub fn train_iteration(
    model: &mut CrossModalModel,
    batch: &[&Sample],
    optimizer: &mut Adam,
    paired_updates: PairedUpdates,
) -> Result<IterationRecord> {
    let b = stack(batch)?;
    let mut phases = Vec::new();
    let mut updates = 0;
    let mut pending: Vec<String> = Vec::new();
    let mut flush = |model: &mut CrossModalModel, names: &mut Vec<String>, updates: &mut usize| -> Result<()> {
        if !names.is_empty() {
            names.sort();
            names.dedup();
            optimizer.step(&mut model.params, names.iter().map(String::as_str))?;
            names.clear();
            *updates += 1;
        }
        Ok(())
    };

    let normal_to_normal = |model: &mut CrossModalModel, normals: &Tensor, mask: &Tensor| {
        run_phase(model, Mode::NormalToNormal.networks(), |m, tape, pv| {
            let x = tape.constant(normals.clone());
            let y = m.forward(tape, pv, x, Mode::NormalToNormal)?;
            let l = cosine_loss(tape, normals, y, mask)?;
            Ok((l, vec![("n2n", l)]))
        })
    };

    match b.kind {
        SampleKind::Paired => {
            let (image, normals) = (b.image.as_ref().expect("stacked"), b.normals.as_ref().expect("stacked"));
            match missing_networks(model, Mode::NormalToNormal) {
                Some(reason) => phases.push(skipped(Phase::NormalToNormal, reason)),
                None => {
                    let (loss, parts, names) = normal_to_normal(model, normals, &b.mask)?;
                    phases.push(ran(Phase::NormalToNormal, loss, parts));
                    pending.extend(names);
                    if paired_updates == PairedUpdates::Two {
                        flush(model, &mut pending, &mut updates)?;
                    }
                }
            }
            let mut nets = vec![Net::ImageEncoder, Net::NormalDecoder];
            if model.has_network(Net::ImageDecoder) {
                nets.push(Net::ImageDecoder);
            }
            let (loss, parts, names) = run_phase(model, &nets, |m, tape, pv| {
                let x = tape.constant(image.clone());
                let (n_hat, recon) = m.forward_paired(tape, pv, x)?;
                let l_n = cosine_loss(tape, normals, n_hat, &b.mask)?;
                match recon {
                    Some(r) => {
                        let l_i = l2_loss(tape, image, r, &b.mask)?;
                        let total = tape.add(l_n, l_i)?;
                        Ok((total, vec![("i2n", l_n), ("i2i", l_i)]))
                    }
                    None => Ok((l_n, vec![("i2n", l_n)])),
                }
            })?;
            phases.push(ran(Phase::ImageToNormalAndImage, loss, parts));
            pending.extend(names);
            flush(model, &mut pending, &mut updates)?;
        }
        SampleKind::ImageOnly => match missing_networks(model, Mode::ImageToImage) {
            Some(reason) => phases.push(skipped(Phase::ImageToImage, reason)),
            None => {
                let image = b.image.as_ref().expect("stacked");
                let (loss, parts, names) = run_phase(model, Mode::ImageToImage.networks(), |m, tape, pv| {
                    let x = tape.constant(image.clone());
                    let y = m.forward(tape, pv, x, Mode::ImageToImage)?;
                    let l = l2_loss(tape, image, y, &b.mask)?;
                    Ok((l, vec![("i2i", l)]))
                })?;
                phases.push(ran(Phase::ImageToImage, loss, parts));
                pending.extend(names);
                flush(model, &mut pending, &mut updates)?;
            }
        },
        SampleKind::NormalOnly => match missing_networks(model, Mode::NormalToNormal) {
            Some(reason) => phases.push(skipped(Phase::NormalToNormal, reason)),
            None => {
                let normals = b.normals.as_ref().expect("stacked");
                let (loss, parts, names) = normal_to_normal(model, normals, &b.mask)?;
                phases.push(ran(Phase::NormalToNormal, loss, parts));
                pending.extend(names);
                flush(model, &mut pending, &mut updates)?;
            }
        },
    }
    Ok(IterationRecord {
        kind: b.kind,
        phases,
        updates,
    })
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub kind: SampleKind,
    pub phase: Phase,
    pub loss: Option<f64>,
}

pub const LOG_HEADER: &str = "step,kind,phase,loss";

/// CSV with one row per phase; skipped phases carry `skipped` as the loss.
pub fn format_log(rows: &[LogRow]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for r in rows {
        let loss = r.loss.map_or_else(|| "skipped".to_string(), |l| format!("{l:.6}"));
        let _ = writeln!(out, "{},{},{},{}", r.step, r.kind.as_str(), r.phase.as_str(), loss);
    }
    out
}

/// Owns the model, optimizer and schedule for a run.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CrossModalModel,
    pub optimizer: Adam,
    schedule: Schedule,
    samples: Vec<Sample>,
    pub step: u64,
    pub log: Vec<LogRow>,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        let model = CrossModalModel::new(config.model.clone())?;
        Self::assemble(config, model, samples)
    }

    fn assemble(config: TrainConfig, model: CrossModalModel, samples: Vec<Sample>) -> Result<Self> {
        let res = config.model.input_resolution;
        if let Some(s) = samples.iter().find(|s| s.resolution() != res) {
            return Err(Error::Config(format!(
                "sample {} has resolution {}, model expects {res}",
                s.id,
                s.resolution()
            )));
        }
        let optimizer = Adam::new(&model.params, config.learning_rate, config.betas, config.adam_eps);
        let schedule = Schedule::new(&samples, config.batch_size, config.seed)?;
        Ok(Trainer {
            config,
            model,
            optimizer,
            schedule,
            samples,
            step: 0,
            log: Vec::new(),
        })
    }

    /// Continues a run from a checkpoint of that run.
    pub fn resume(config: TrainConfig, checkpoint: Checkpoint, samples: Vec<Sample>) -> Result<Self> {
        config.validate()?;
        if checkpoint.model.config() != &config.model {
            return Err(Error::ConfigMismatch("checkpoint model differs from the training config".into()));
        }
        let mut trainer = Self::assemble(config, checkpoint.model, samples)?;
        trainer.optimizer = checkpoint.optimizer;
        trainer.optimizer.learning_rate = trainer.config.learning_rate;
        trainer.optimizer.beta1 = trainer.config.betas[0];
        trainer.optimizer.beta2 = trainer.config.betas[1];
        trainer.optimizer.eps = trainer.config.adam_eps;
        trainer.step = checkpoint.meta.step;
        trainer.schedule.seek(&checkpoint.meta.schedule)?;
        Ok(trainer)
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.schedule.batches_per_epoch()
    }

    /// Total steps the configuration asks for.
    pub fn planned_steps(&self) -> u64 {
        match self.config.epochs {
            Some(e) => (e * self.batches_per_epoch()) as u64,
            None => self.config.steps as u64,
        }
    }

    pub fn train_step(&mut self) -> Result<IterationRecord> {
        let ids = self.schedule.next_batch();
        let batch: Vec<&Sample> = ids.iter().map(|&i| &self.samples[i]).collect();
        let record = train_iteration(&mut self.model, &batch, &mut self.optimizer, self.config.paired_updates)?;
        self.step += 1;
        for p in &record.phases {
            self.log.push(LogRow {
                step: self.step,
                kind: record.kind,
                phase: p.phase,
                loss: p.loss(),
            });
        }
        Ok(record)
    }

    /// Runs until `planned_steps`, calling `observe` after each step.
    pub fn run(&mut self, mut observe: impl FnMut(u64, &IterationRecord)) -> Result<()> {
        while self.step < self.planned_steps() {
            let record = self.train_step()?;
            observe(self.step, &record);
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            meta: CheckpointMeta {
                step: self.step,
                schedule: self.schedule.position(),
            },
        }
    }
}

#[cfg(test)]
mod tests;
