//! The training loop: SGD with momentum over shuffled mini-batches.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::checkpoint::{read_container, read_slices, take_section, write_container, Payload};
use super::config::{Mode, TrainConfig};
use super::data::{load_dataset, Dataset};
use super::metrics::{trace_metrics, MetricsRecord, MetricsWriter};
use super::model::{softmax_cross_entropy, BackwardEnv, ConvTrace, Model};
use crate::backward::BackwardStep;
use crate::clip::{load_state, save_state, ClipState};
use crate::error::{Error, Result};
use crate::tensor::ByteReader;

const EVAL_CHUNK: usize = 250;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct Progress {
    iteration: u64,
    epoch: u64,
    /// Batch index within the current epoch.
    cursor: u64,
}

/// Loss and accuracy accumulated since the last record.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct Window {
    loss_sum: f64,
    batches: u64,
    correct: u64,
    seen: u64,
}

pub struct Trainer {
    config: TrainConfig,
    train: Dataset,
    val: Dataset,
    model: Model,
    velocity: Vec<Vec<f32>>,
    clip: ClipState,
    progress: Progress,
    window: Window,
    order: Vec<usize>,
}

/// Summary of a finished run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainOutcome {
    pub records: Vec<MetricsRecord>,
    pub final_val_acc: f64,
    pub iterations: u64,
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn all_finite(values: &[f32]) -> bool {
    values.iter().all(|v| v.is_finite())
}

impl Trainer {
    /// Loads the configured dataset and initializes the model.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let (train, val) = load_dataset(&config.dataset, config.seeds.data)?;
        Self::with_data(config, train, val)
    }

    pub fn with_data(config: TrainConfig, train: Dataset, val: Dataset) -> Result<Self> {
        config.validate()?;
        for (name, d) in [("training", &train), ("validation", &val)] {
            if d.is_empty() {
                return Err(Error::Config(format!("the {name} set is empty")));
            }
            if d.image_shape() != config.model.input {
                return Err(Error::Config(format!(
                    "{name} images are {:?} but the model expects {:?}",
                    d.image_shape(),
                    config.model.input
                )));
            }
            if d.classes() != config.dataset.classes() {
                return Err(Error::Config(format!("{name} set has {} classes", d.classes())));
            }
        }
        let model = Model::init(&config)?;
        let velocity = model.params().iter().map(|p| vec![0.0; p.len()]).collect();
        let order = epoch_order(config.seeds.shuffle, 0, train.len());
        Ok(Trainer {
            config,
            train,
            val,
            model,
            velocity,
            clip: ClipState::new(),
            progress: Progress::default(),
            window: Window::default(),
            order,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn clip_state(&self) -> &ClipState {
        &self.clip
    }

    pub fn iteration(&self) -> u64 {
        self.progress.iteration
    }

    pub fn epoch(&self) -> u64 {
        self.progress.epoch
    }

    pub fn iterations_per_epoch(&self) -> u64 {
        self.train.len().div_ceil(self.config.batch_size) as u64
    }

    pub fn total_iterations(&self) -> u64 {
        self.iterations_per_epoch() * self.config.epochs
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
    }

    /// Conv layer ids, in model order.
    pub fn conv_layers(&self) -> Vec<u32> {
        self.model.conv_topology().into_iter().map(|(id, _)| id).collect()
    }

    /// Mean loss and accuracy of the current model on a dataset.
    pub fn evaluate(&self, data: &Dataset) -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        let indices: Vec<usize> = (0..data.len()).collect();
        for chunk in indices.chunks(EVAL_CHUNK) {
            let (x, y) = data.batch(chunk);
            let (logits, _) = self.model.forward(&x, false)?;
            let (l, c, _) = softmax_cross_entropy(&logits, &y)?;
            loss += l * chunk.len() as f64;
            correct += c;
        }
        Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
    }

    /// Record of the untrained model: loss and accuracy over the whole training set.
    pub fn initial_record(&self) -> Result<MetricsRecord> {
        let (loss, train_acc) = self.evaluate(&self.train)?;
        let (_, val_acc) = self.evaluate(&self.val)?;
        Ok(MetricsRecord {
            iteration: self.progress.iteration,
            epoch: self.progress.epoch,
            loss,
            train_acc,
            val_acc,
            layers: Vec::new(),
        })
    }

    fn next_batch(&self) -> Vec<usize> {
        let bs = self.config.batch_size;
        let start = self.progress.cursor as usize * bs;
        let end = (start + bs).min(self.train.len());
        self.order[start..end].to_vec()
    }

    fn backward_step(&self) -> BackwardStep {
        BackwardStep {
            seed: self.config.seeds.rounding,
            iteration: self.progress.iteration,
            pairing: self.config.pairing,
        }
    }

    fn divergence(&self, what: &str) -> Error {
        let mut lines = vec![what.to_string()];
        let names = self.model.named_params();
        for (name, t) in &names {
            let finite = all_finite(t.data());
            lines.push(format!("  {name}: max|w| = {}{}", t.max_abs(), if finite { "" } else { " (non-finite)" }));
        }
        for (id, layer) in self.clip.layers() {
            let live: Vec<f32> = layer.scales.iter().flatten().copied().collect();
            let lo = live.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = live.iter().copied().fold(0.0f32, f32::max);
            lines.push(format!(
                "  conv{id} clip scales: {} of {} set, range [{lo}, {hi}]",
                live.len(),
                layer.scales.len()
            ));
        }
        Error::Diverged {
            iteration: self.progress.iteration,
            diagnostic: lines.join("\n"),
        }
    }

    /// Values that overflow inside the forward or backward pass surface as
    /// contract errors from tensor construction.
    fn overflow(&self, e: Error) -> Error {
        match e {
            Error::Contract(m) if m.starts_with("non-finite") => self.divergence(&m),
            e => e,
        }
    }

    /// Runs one iteration. Returns a record at logging intervals and after the last iteration.
    pub fn step(&mut self) -> Result<Option<MetricsRecord>> {
        if self.is_finished() {
            return Err(Error::contract("training already finished"));
        }
        let indices = self.next_batch();
        let (x, labels) = self.train.batch(&indices);
        let (logits, caches) = self.model.forward(&x, true).map_err(|e| self.overflow(e))?;
        let (loss, correct, g_logits) = softmax_cross_entropy(&logits, &labels)?;
        if !loss.is_finite() {
            return Err(self.divergence(&format!("loss is {loss}")));
        }
        let last = self.progress.iteration + 1 == self.total_iterations();
        let log_now = (self.progress.iteration + 1) % self.config.log_every == 0 || last;
        let step = self.backward_step();
        let mut env = BackwardEnv {
            mode: self.config.mode,
            clip: &mut self.clip,
            hyper: &self.config.hyper,
            step,
            capture: log_now,
        };
        let backward = self.model.backward(caches, g_logits, &mut env);
        let (grads, traces) = backward.map_err(|e| self.overflow(e))?;
        if let Some(i) = grads.iter().position(|g| !all_finite(g)) {
            let name = self.model.named_params().swap_remove(i).0;
            return Err(self.divergence(&format!("gradient of {name} is not finite")));
        }

        let lr = self.config.lr.at_epoch(self.progress.epoch);
        let (mu, wd) = (self.config.momentum, self.config.weight_decay);
        for ((p, g), v) in self.model.params_mut().into_iter().zip(&grads).zip(&mut self.velocity) {
            for ((w, &gw), vel) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vel = mu * *vel + gw + wd * *w;
                *w -= lr * *vel;
            }
        }
        if self.model.params().iter().any(|p| !all_finite(p)) {
            return Err(self.divergence("parameters became non-finite"));
        }
        self.clip.finish_iteration();

        self.window.loss_sum += loss;
        self.window.batches += 1;
        self.window.correct += correct as u64;
        self.window.seen += labels.len() as u64;
        let iteration = self.progress.iteration;
        self.progress.iteration += 1;
        self.progress.cursor += 1;
        if self.progress.cursor == self.iterations_per_epoch() {
            self.progress.cursor = 0;
            self.progress.epoch += 1;
            self.order = epoch_order(self.config.seeds.shuffle, self.progress.epoch, self.train.len());
        }
        if !log_now {
            return Ok(None);
        }
        self.record(&traces, iteration).map(Some)
    }

    fn record(&mut self, traces: &[ConvTrace], iteration: u64) -> Result<MetricsRecord> {
        let cfg = &self.config;
        let layers = traces
            .iter()
            .map(|t| trace_metrics(t, cfg.mode == Mode::Int8Da, cfg.hyper.lambda, cfg.alpha, cfg.seeds.rounding, iteration))
            .collect::<Result<Vec<_>>>()?;
        let (_, val_acc) = self.evaluate(&self.val)?;
        let w = std::mem::take(&mut self.window);
        Ok(MetricsRecord {
            iteration: self.progress.iteration,
            epoch: self.progress.epoch,
            loss: w.loss_sum / w.batches.max(1) as f64,
            train_acc: w.correct as f64 / w.seen.max(1) as f64,
            val_acc,
            layers,
        })
    }

    /// Trains to completion, handing each record to `sink`. A fresh trainer
    /// first emits the record of the untrained model.
    pub fn run(&mut self, sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>) -> Result<TrainOutcome> {
        let mut records = Vec::new();
        if self.progress.iteration == 0 {
            let rec = self.initial_record()?;
            sink(&rec)?;
            records.push(rec);
        }
        while !self.is_finished() {
            if let Some(rec) = self.step()? {
                sink(&rec)?;
                records.push(rec);
            }
        }
        let final_val_acc = match records.last() {
            Some(r) => r.val_acc,
            None => self.evaluate(&self.val)?.1,
        };
        Ok(TrainOutcome {
            records,
            final_val_acc,
            iterations: self.progress.iteration,
        })
    }

    /// Gradients every conv layer would see on the next batch; the trainer is unchanged.
    pub fn peek_gradients(&self) -> Result<Vec<ConvTrace>> {
        let indices = if self.is_finished() {
            let bs = self.config.batch_size.min(self.train.len());
            self.order[..bs].to_vec()
        } else {
            self.next_batch()
        };
        let (x, labels) = self.train.batch(&indices);
        let (logits, caches) = self.model.forward(&x, true).map_err(|e| self.overflow(e))?;
        let (_, _, g) = softmax_cross_entropy(&logits, &labels)?;
        let mut clip = self.clip.clone();
        let mut env = BackwardEnv {
            mode: self.config.mode,
            clip: &mut clip,
            hyper: &self.config.hyper,
            step: self.backward_step(),
            capture: true,
        };
        Ok(self.model.backward(caches, g, &mut env)?.1)
    }

    pub fn save_checkpoint<W: Write>(&self, out: W) -> Result<()> {
        let model = Payload::default().slices(self.model.params().into_iter()).0.clone();
        let mut optim = Payload::default();
        optim.slices(self.velocity.iter().map(|v| v.as_slice()));
        optim
            .f64(self.window.loss_sum)
            .u64(self.window.batches)
            .u64(self.window.correct)
            .u64(self.window.seen);
        let mut clip = Vec::new();
        save_state(&self.clip, &mut clip)?;
        let mut rng = Payload::default();
        rng.u64(self.config.seeds.shuffle)
            .u64(self.config.seeds.rounding)
            .u64(self.progress.iteration)
            .u64(self.progress.epoch)
            .u64(self.progress.cursor);
        write_container(
            out,
            &[
                ("config/v1", self.config.to_json().into_bytes()),
                ("model/v1", model),
                ("optim/v1", optim.0),
                ("clip_state/v1", clip),
                ("rng/v1", rng.0),
            ],
        )
    }

    pub fn save_checkpoint_file(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.save_checkpoint(std::io::BufWriter::new(file))
    }

    /// Restores a checkpoint, reloading the dataset named by its embedded config.
    pub fn restore<R: Read>(input: R) -> Result<Self> {
        let (config, sections) = Self::read_sections(input)?;
        let (train, val) = load_dataset(&config.dataset, config.seeds.data)?;
        Self::restore_sections(config, sections, train, val)
    }

    pub fn restore_with_data<R: Read>(input: R, train: Dataset, val: Dataset) -> Result<Self> {
        let (config, sections) = Self::read_sections(input)?;
        Self::restore_sections(config, sections, train, val)
    }

    pub fn restore_file(path: &Path) -> Result<Self> {
        Self::restore(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// The config embedded in a checkpoint.
    pub fn checkpoint_config<R: Read>(input: R) -> Result<TrainConfig> {
        Ok(Self::read_sections(input)?.0)
    }

    fn read_sections<R: Read>(input: R) -> Result<(TrainConfig, Vec<(String, Vec<u8>)>)> {
        let mut sections = read_container(input)?;
        let text = take_section(&mut sections, "config/v1")?;
        let text = String::from_utf8(text).map_err(|_| Error::Checkpoint("config section is not UTF-8".into()))?;
        let config = TrainConfig::from_json(&text).map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
        Ok((config, sections))
    }

    fn restore_sections(config: TrainConfig, mut sections: Vec<(String, Vec<u8>)>, train: Dataset, val: Dataset) -> Result<Self> {
        let bad = |what: &str, e: Error| Error::Checkpoint(format!("{what}: {e}"));
        let mut t = Self::with_data(config, train, val)?;

        let payload = take_section(&mut sections, "model/v1")?;
        let mut r = ByteReader::new(&payload[..]);
        let params = read_slices(&mut r).map_err(|e| bad("model/v1", e))?;
        r.expect_eof().map_err(|e| bad("model/v1", e))?;
        let shapes: Vec<usize> = t.model.params().iter().map(|p| p.len()).collect();
        if params.iter().map(Vec::len).collect::<Vec<_>>() != shapes {
            return Err(Error::Checkpoint("model/v1 parameter sizes do not match the model".into()));
        }
        for (dst, src) in t.model.params_mut().into_iter().zip(&params) {
            dst.copy_from_slice(src);
        }

        let payload = take_section(&mut sections, "optim/v1")?;
        let mut r = ByteReader::new(&payload[..]);
        let velocity = read_slices(&mut r).map_err(|e| bad("optim/v1", e))?;
        if velocity.iter().map(Vec::len).collect::<Vec<_>>() != shapes {
            return Err(Error::Checkpoint("optim/v1 momentum sizes do not match the model".into()));
        }
        t.velocity = velocity;
        let mut read_window = || -> Result<Window> {
            Ok(Window {
                loss_sum: f64::from_bits(r.read_u64()?),
                batches: r.read_u64()?,
                correct: r.read_u64()?,
                seen: r.read_u64()?,
            })
        };
        t.window = read_window().map_err(|e| bad("optim/v1", e))?;
        r.expect_eof().map_err(|e| bad("optim/v1", e))?;

        let payload = take_section(&mut sections, "clip_state/v1")?;
        t.clip = load_state(&payload[..])?;
        t.clip.check_topology(&t.model.conv_topology())?;

        let payload = take_section(&mut sections, "rng/v1")?;
        let mut r = ByteReader::new(&payload[..]);
        let mut read_rng = || -> Result<[u64; 5]> {
            let mut v = [0u64; 5];
            for x in v.iter_mut() {
                *x = r.read_u64()?;
            }
            Ok(v)
        };
        let [shuffle, rounding, iteration, epoch, cursor] = read_rng().map_err(|e| bad("rng/v1", e))?;
        r.expect_eof().map_err(|e| bad("rng/v1", e))?;
        if shuffle != t.config.seeds.shuffle || rounding != t.config.seeds.rounding {
            return Err(Error::Checkpoint("rng/v1 seeds disagree with the embedded config".into()));
        }
        if cursor >= t.iterations_per_epoch() || epoch > t.config.epochs {
            return Err(Error::Checkpoint(format!("rng/v1 position (epoch {epoch}, batch {cursor}) is out of range")));
        }
        t.progress = Progress { iteration, epoch, cursor };
        t.order = epoch_order(t.config.seeds.shuffle, epoch, t.train.len());
        if let Some((name, _)) = sections.first() {
            return Err(Error::Checkpoint(format!("unexpected section {name}")));
        }
        Ok(t)
    }
}

/// Trains with default data loading and collects every record.
pub fn train(config: TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(config)?.run(&mut |_| Ok(()))
}

/// Trains and writes `config.json`, `metrics.csv`, `metrics.jsonl`,
/// `checkpoint.daq8` and `summary.json` into `dir`.
pub fn train_to_dir(mut trainer: Trainer, dir: &Path) -> Result<TrainOutcome> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config.json"), trainer.config().to_json())?;
    let mut writer = MetricsWriter::create(dir, &trainer.conv_layers())?;
    let outcome = trainer.run(&mut |rec| writer.append(rec))?;
    writer.finish()?;
    trainer.save_checkpoint_file(&dir.join("checkpoint.daq8"))?;
    let summary = serde_json::json!({
        "mode": trainer.config().mode,
        "iterations": outcome.iterations,
        "final_val_acc": outcome.final_val_acc,
    });
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(outcome)
}
