//! Joint optimization of network and router parameters: SGD with momentum,
//! weight decay on weights only, half-period-cosine learning rate with
//! linear warmup, bit-exact checkpoints and a metrics CSV log.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{DgError, Result};
use crate::model::{forward_auto, ConnectivityMode, Network};
use crate::routing::ThresholdPolicy;
use crate::tensor::{Array, Tape};

/// Optimization hyperparameters. The connectivity mechanism under training
/// is the network's own mode; it determines which parameter set exists
/// (baseline: network only; static alpha: network + edge scalars; dynamic:
/// network + routers).
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f32,
    pub warmup_epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 64,
            batch_size: 128,
            base_lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            label_smoothing: 0.1,
            warmup_epochs: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_lr <= 0.0 && self.epochs > 0 {
            // lr == 0 is allowed for null-update tests, reject negatives
            if self.base_lr < 0.0 {
                return Err(DgError::Config(format!(
                    "learning rate {} must not be negative",
                    self.base_lr
                )));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(DgError::Config(format!(
                "label smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if self.batch_size == 0 {
            return Err(DgError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

/// Step-resolved learning-rate schedule: linear warmup from zero to the
/// base rate, then a half-period cosine down to zero.
#[derive(Clone, Copy, Debug)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn from_config(cfg: &TrainConfig, steps_per_epoch: usize) -> Self {
        Self {
            base_lr: cfg.base_lr,
            warmup_steps: cfg.warmup_epochs * steps_per_epoch,
            total_steps: cfg.epochs * steps_per_epoch,
        }
    }
}

pub fn lr_at(step: usize, sched: &Schedule) -> f64 {
    if sched.total_steps == 0 {
        return 0.0;
    }
    if step < sched.warmup_steps {
        return sched.base_lr * step as f64 / sched.warmup_steps as f64;
    }
    let span = (sched.total_steps - sched.warmup_steps).max(1);
    let t = (step - sched.warmup_steps).min(span) as f64 / span as f64;
    0.5 * sched.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Weight decay applies to weight matrices/kernels only; biases and edge
/// scalars are exempt (decaying a router bias drags the initial
/// connectivity toward 0.5 regardless of data).
pub fn decays(name: &str) -> bool {
    name.ends_with(".kernel") || name.ends_with(".weight") || name == "head.weight"
}

/// All learnable state of a run: the network (which owns every learnable
/// tensor for its mode), one momentum slot per parameter, and counters.
pub struct TrainState {
    pub net: Network<f32>,
    pub momenta: Vec<Array<f32>>,
    pub step: usize,
    pub epoch: usize,
    pub best_acc: f64,
}

impl TrainState {
    pub fn new(net: Network<f32>) -> Self {
        let momenta = net
            .params()
            .iter()
            .map(|p| Array::zeros(p.shape().to_vec()))
            .collect();
        Self {
            net,
            momenta,
            step: 0,
            epoch: 0,
            best_acc: 0.0,
        }
    }
}

/// One optimization step: forward in the network's connectivity mode,
/// smoothed cross-entropy, backward, SGD/momentum update at the scheduled
/// rate. Alpha scalars clamp back to [0,1] after the update.
pub fn train_step(
    state: &mut TrainState,
    batch: &Array<f32>,
    labels: &[usize],
    cfg: &TrainConfig,
    sched: &Schedule,
) -> Result<f32> {
    let mut tape = Tape::new();
    let bound = state.net.bind(&mut tape, true);
    let x = tape.constant(batch.clone());
    let (logits, _) = forward_auto(&state.net, &mut tape, &bound, x, None)?;
    let loss = tape.cross_entropy_smoothed(logits, labels, cfg.label_smoothing)?;
    let loss_v = tape.value(loss).item();
    tape.backward(loss)?;

    let lr = lr_at(state.step, sched);
    if !loss_v.is_finite() {
        let max_abs_grad = bound
            .flat
            .iter()
            .filter_map(|&id| tape.grad(id))
            .map(|g| g.max_abs())
            .fold(0.0, f64::max);
        return Err(DgError::NonFiniteLoss {
            step: state.step,
            lr,
            max_abs_grad,
        });
    }

    let names = state.net.param_names();
    let params = state.net.params_mut();
    debug_assert_eq!(params.len(), bound.flat.len());
    for (((name, param), momentum), &id) in names
        .iter()
        .zip(params)
        .zip(state.momenta.iter_mut())
        .zip(&bound.flat)
    {
        let grad = tape.grad(id).expect("backward populated all leaves");
        let wd = if decays(name) { cfg.weight_decay as f32 } else { 0.0 };
        let m = cfg.momentum as f32;
        let lr32 = lr as f32;
        let is_alpha = name.contains(".alpha.");
        for ((p, v), &g) in param
            .data_mut()
            .iter_mut()
            .zip(momentum.data_mut())
            .zip(grad.data())
        {
            *v = m * *v + g + wd * *p;
            *p -= lr32 * *v;
            if is_alpha {
                *p = p.clamp(0.0, 1.0);
            }
        }
    }
    state.step += 1;
    Ok(loss_v)
}

/// Argmax accuracy over the given sample indices, batched. Dynamic-mode
/// evaluation uses soft weights unless a threshold policy is supplied.
pub fn evaluate(
    net: &Network<f32>,
    dataset: &crate::data::Dataset,
    indices: &[usize],
    batch_size: usize,
    threshold: Option<&ThresholdPolicy>,
) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size) {
        let (images, labels) = dataset.batch(chunk);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(images);
        let (logits, _) = forward_auto(net, &mut tape, &bound, x, threshold)?;
        let lv = tape.value(logits);
        let k = lv.shape()[1];
        for (b, &label) in labels.iter().enumerate() {
            let row = &lv.data()[b * k..(b + 1) * k];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
                .map(|(i, _)| i)
                .unwrap_or(0);
            if pred == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

// ── metrics log ─────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub lr: f64,
    pub loss: f32,
    pub eval_acc: Option<f64>,
}

/// CSV log `step,lr,loss,eval_acc`; the accuracy column is empty except on
/// evaluation rows. Floats use shortest round-trip formatting, so files
/// parse back losslessly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    pub rows: Vec<MetricsRow>,
}

impl MetricsLog {
    pub fn push(&mut self, step: usize, lr: f64, loss: f32, eval_acc: Option<f64>) {
        self.rows.push(MetricsRow {
            step,
            lr,
            loss,
            eval_acc,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,eval_acc\n");
        for r in &self.rows {
            let acc = r.eval_acc.map(|a| a.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{},{}\n", r.step, r.lr, r.loss, acc));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 {
                if line != "step,lr,loss,eval_acc" {
                    return Err(DgError::Data(format!("bad metrics header {line:?}")));
                }
                continue;
            }
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 4 {
                return Err(DgError::Data(format!("bad metrics row {line:?}")));
            }
            let parse_err = || DgError::Data(format!("bad metrics row {line:?}"));
            rows.push(MetricsRow {
                step: cells[0].parse().map_err(|_| parse_err())?,
                lr: cells[1].parse().map_err(|_| parse_err())?,
                loss: cells[2].parse().map_err(|_| parse_err())?,
                eval_acc: if cells[3].is_empty() {
                    None
                } else {
                    Some(cells[3].parse().map_err(|_| parse_err())?)
                },
            });
        }
        Ok(Self { rows })
    }

    /// Last evaluation accuracy in the log.
    pub fn final_eval_acc(&self) -> Option<f64> {
        self.rows.iter().rev().find_map(|r| r.eval_acc)
    }
}

// ── checkpoint ──────────────────────────────────────────────────────────

const CHECKPOINT_MAGIC: &[u8; 4] = b"DGNC";
const CHECKPOINT_VERSION: u32 = 1;

/// Writes a versioned binary checkpoint: every learnable tensor plus its
/// momentum slot as raw little-endian f32 bits, keyed by canonical name.
/// Round-trips bit-exactly.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u8(match state.net.mode {
        ConnectivityMode::Baseline => 0,
        ConnectivityMode::StaticAlpha => 1,
        ConnectivityMode::Dynamic => 2,
    })?;
    w.write_u64::<LittleEndian>(state.step as u64)?;
    w.write_u64::<LittleEndian>(state.epoch as u64)?;
    w.write_f64::<LittleEndian>(state.best_acc)?;
    let names = state.net.param_names();
    let params = state.net.params();
    w.write_u32::<LittleEndian>(names.len() as u32)?;
    for ((name, param), momentum) in names.iter().zip(&params).zip(&state.momenta) {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u8(param.shape().len() as u8)?;
        for &d in param.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in param.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
        for &v in momentum.data() {
            w.write_f32::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Restores a checkpoint into a freshly built network of the same
/// architecture and mode. Parameter names and shapes must match exactly.
pub fn load_checkpoint(net: Network<f32>, path: &Path) -> Result<TrainState> {
    let bad = |msg: String| DgError::Checkpoint(msg);
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(bad(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mode = match r.read_u8()? {
        0 => ConnectivityMode::Baseline,
        1 => ConnectivityMode::StaticAlpha,
        2 => ConnectivityMode::Dynamic,
        m => return Err(bad(format!("unknown mode tag {m}"))),
    };
    if mode != net.mode {
        return Err(bad(format!(
            "checkpoint mode {} does not match network mode {}",
            mode.name(),
            net.mode.name()
        )));
    }
    let step = r.read_u64::<LittleEndian>()? as usize;
    let epoch = r.read_u64::<LittleEndian>()? as usize;
    let best_acc = r.read_f64::<LittleEndian>()?;
    let count = r.read_u32::<LittleEndian>()? as usize;

    let mut state = TrainState::new(net);
    let names = state.net.param_names();
    if count != names.len() {
        return Err(bad(format!(
            "checkpoint has {count} tensors, network has {}",
            names.len()
        )));
    }
    let mut params = state.net.params_mut();
    for (idx, name) in names.iter().enumerate() {
        let len = r.read_u16::<LittleEndian>()? as usize;
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)?;
        let got = String::from_utf8(buf).map_err(|e| bad(e.to_string()))?;
        if &got != name {
            return Err(bad(format!("tensor {idx}: expected {name:?}, got {got:?}")));
        }
        let ndim = r.read_u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.read_u32::<LittleEndian>()? as usize);
        }
        if shape != params[idx].shape() {
            return Err(bad(format!(
                "tensor {name}: shape {shape:?} does not match {:?}",
                params[idx].shape()
            )));
        }
        for v in params[idx].data_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
        for v in state.momenta[idx].data_mut() {
            *v = r.read_f32::<LittleEndian>()?;
        }
    }
    state.step = step;
    state.epoch = epoch;
    state.best_acc = best_acc;
    Ok(state)
}
