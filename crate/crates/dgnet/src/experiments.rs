//! Experiment orchestration: full training runs, evaluation, the
//! three-mode connectivity ablation and the random-wiring comparison.
//! Every run is deterministic given its config, and each output directory
//! receives the resolved config that produced it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::data::{self, Dataset};
use crate::error::{DgError, Result};
use crate::graph::{export_dot, export_edge_csv};
use crate::model::{
    count_cost, dynamic_forward, ConnectivityMode, CostReport, Network,
};
use crate::rng;
use crate::tensor::{Array, Tape};
use crate::train::{
    evaluate, lr_at, save_checkpoint, train_step, MetricsLog, Schedule, TrainState,
};

/// Loads the dataset a config names (synthetic generation or CIFAR-10
/// binary files).
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.dataset.source.as_str() {
        "synthetic" => data::synth_dataset(&cfg.synth_spec()),
        "cifar10" => {
            if cfg.dataset.path.is_empty() {
                return Err(DgError::Config(
                    "dataset.path required for cifar10 source".into(),
                ));
            }
            let ds = data::load_cifar_binary(Path::new(&cfg.dataset.path))?;
            let train_cap = (cfg.dataset.train_cap > 0).then_some(cfg.dataset.train_cap);
            let eval_cap = (cfg.dataset.eval_cap > 0).then_some(cfg.dataset.eval_cap);
            Ok(data::with_split_caps(ds, train_cap, eval_cap))
        }
        other => Err(DgError::Config(format!("unknown dataset source {other:?}"))),
    }
}

pub fn build_network(cfg: &RunConfig) -> Result<Network<f32>> {
    Network::new(
        cfg.arch_config()?,
        cfg.mode()?,
        cfg.router_init(),
        cfg.training.seed,
    )
}

pub struct RunOutcome {
    pub state: TrainState,
    pub metrics: MetricsLog,
    pub final_acc: f64,
    pub best_acc: f64,
}

/// Trains a network per config on the given dataset. Per-epoch batch order
/// comes from the shuffle stream of the run seed, one substream per epoch,
/// so identical configs reproduce identical loss curves bit for bit.
pub fn train_network(
    net: Network<f32>,
    dataset: &Dataset,
    cfg: &RunConfig,
) -> Result<RunOutcome> {
    let tcfg = cfg.train_config()?;
    let mut state = TrainState::new(net);
    let train_idx = dataset.train_indices();
    let eval_idx = dataset.eval_indices();
    if train_idx.is_empty() {
        return Err(DgError::Data("empty training split".into()));
    }
    let steps_per_epoch = train_idx.len().div_ceil(tcfg.batch_size);
    let sched = Schedule::from_config(&tcfg, steps_per_epoch);
    let mut metrics = MetricsLog::default();
    let mut final_acc = 0.0;
    for epoch in 0..tcfg.epochs {
        let mut order = train_idx.clone();
        let mut shuffle_rng = rng::seeded(
            tcfg.seed.wrapping_add((epoch as u64) << 32),
            rng::STREAM_SHUFFLE,
        );
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let (images, labels) = dataset.batch(chunk);
            let lr = lr_at(state.step, &sched);
            let loss = train_step(&mut state, &images, &labels, &tcfg, &sched)?;
            metrics.push(state.step - 1, lr, loss, None);
            epoch_loss += loss as f64;
            batches += 1;
        }
        state.epoch = epoch + 1;
        let acc = evaluate(&state.net, dataset, &eval_idx, tcfg.batch_size, None)?;
        final_acc = acc;
        state.best_acc = state.best_acc.max(acc);
        metrics.push(
            state.step,
            lr_at(state.step, &sched),
            (epoch_loss / batches.max(1) as f64) as f32,
            Some(acc),
        );
    }
    let best_acc = state.best_acc;
    Ok(RunOutcome {
        state,
        metrics,
        final_acc,
        best_acc,
    })
}

/// `train` command body: trains and writes `resolved_config.toml`,
/// `metrics.csv` and `checkpoint.bin` into the output directory.
pub fn train_run(cfg: &RunConfig, out_dir: &Path) -> Result<RunOutcome> {
    let dataset = load_dataset(cfg)?;
    let net = build_network(cfg)?;
    let outcome = train_network(net, &dataset, cfg)?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("resolved_config.toml"), cfg.to_toml_string())?;
    fs::write(out_dir.join("metrics.csv"), outcome.metrics.to_csv())?;
    save_checkpoint(&outcome.state, &out_dir.join("checkpoint.bin"))?;
    Ok(outcome)
}

/// `eval` command body. With `pruned` set, dynamic-mode evaluation applies
/// the config's threshold policy to router outputs (Eq.-5 gating).
pub fn eval_checkpoint(cfg: &RunConfig, checkpoint: &Path, pruned: bool) -> Result<f64> {
    let dataset = load_dataset(cfg)?;
    let net = build_network(cfg)?;
    let state = crate::train::load_checkpoint(net, checkpoint)?;
    let policy = cfg.threshold_policy()?;
    let threshold = (pruned && state.net.mode == ConnectivityMode::Dynamic).then_some(&policy);
    evaluate(
        &state.net,
        &dataset,
        &dataset.eval_indices(),
        cfg.training.batch_size,
        threshold,
    )
}

/// Per-mode ablation record over seeds.
#[derive(Clone, Debug)]
pub struct ModeResult {
    pub mode: ConnectivityMode,
    pub accs: Vec<f64>,
}

impl ModeResult {
    pub fn mean(&self) -> f64 {
        self.accs.iter().sum::<f64>() / self.accs.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
            / self.accs.len().max(1) as f64)
            .sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    pub results: Vec<ModeResult>,
}

impl AblationReport {
    pub fn result(&self, mode: ConnectivityMode) -> &ModeResult {
        self.results
            .iter()
            .find(|r| r.mode == mode)
            .expect("all three modes present")
    }

    /// Per-seed accuracy differences between two modes (paired by seed).
    pub fn paired_diffs(&self, a: ConnectivityMode, b: ConnectivityMode) -> Vec<f64> {
        self.result(a)
            .accs
            .iter()
            .zip(&self.result(b).accs)
            .map(|(x, y)| x - y)
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("mode,seed,eval_acc\n");
        for r in &self.results {
            for (seed, acc) in self.seeds.iter().zip(&r.accs) {
                let _ = writeln!(out, "{},{},{}", r.mode.name(), seed, acc);
            }
        }
        out
    }
}

impl std::fmt::Display for AblationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "{:<14} {:>8} {:>8} per-seed", "mode", "mean", "std")?;
        for r in &self.results {
            let accs: Vec<String> = r.accs.iter().map(|a| format!("{a:.4}")).collect();
            writeln!(
                f,
                "{:<14} {:>8.4} {:>8.4} [{}]",
                r.mode.name(),
                r.mean(),
                r.std(),
                accs.join(", ")
            )?;
        }
        Ok(())
    }
}

/// Trains the three connectivity modes with identical seeds, schedules and
/// architecture (only the connectivity mechanism differs) and evaluates
/// each on the held-out split.
pub fn run_ablation(cfg: &RunConfig, seeds: &[u64]) -> Result<AblationReport> {
    let dataset = load_dataset(cfg)?;
    let modes = [
        ConnectivityMode::Baseline,
        ConnectivityMode::StaticAlpha,
        ConnectivityMode::Dynamic,
    ];
    let mut results = Vec::new();
    for mode in modes {
        let mut accs = Vec::new();
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.training.mode = mode.name().to_string();
            run_cfg.training.seed = seed;
            let net = build_network(&run_cfg)?;
            let outcome = train_network(net, &dataset, &run_cfg)?;
            accs.push(outcome.final_acc);
        }
        results.push(ModeResult { mode, accs });
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        results,
    })
}

/// One arm of the random-wiring comparison.
#[derive(Clone, Debug)]
pub struct WiringResult {
    pub arm: String,
    pub multiadds: u64,
    pub accs: Vec<f64>,
}

impl WiringResult {
    pub fn mean(&self) -> f64 {
        self.accs.iter().sum::<f64>() / self.accs.len().max(1) as f64
    }

    pub fn std(&self) -> f64 {
        let m = self.mean();
        (self.accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>()
            / self.accs.len().max(1) as f64)
            .sqrt()
    }
}

#[derive(Clone, Debug)]
pub struct WiringReport {
    pub seeds: Vec<u64>,
    pub results: Vec<WiringResult>,
}

impl WiringReport {
    pub fn result(&self, arm: &str) -> &WiringResult {
        self.results
            .iter()
            .find(|r| r.arm == arm)
            .expect("arm present")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("arm,multiadds,seed,eval_acc\n");
        for r in &self.results {
            for (seed, acc) in self.seeds.iter().zip(&r.accs) {
                let _ = writeln!(out, "{},{},{},{}", r.arm, r.multiadds, seed, acc);
            }
        }
        out
    }
}

impl std::fmt::Display for WiringReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<10} {:>12} {:>8} {:>8} per-seed",
            "arm", "multiadds", "mean", "std"
        )?;
        for r in &self.results {
            let accs: Vec<String> = r.accs.iter().map(|a| format!("{a:.4}")).collect();
            writeln!(
                f,
                "{:<10} {:>12} {:>8.4} {:>8.4} [{}]",
                r.arm,
                r.multiadds,
                r.mean(),
                r.std(),
                accs.join(", ")
            )?;
        }
        Ok(())
    }
}

/// Random-wiring comparison: static baselines on ER/BA/WS graphs against
/// the dynamic complete graph, matched node and channel budgets.
pub fn run_randwire_compare(cfg: &RunConfig, seeds: &[u64]) -> Result<WiringReport> {
    let dataset = load_dataset(cfg)?;
    let arms: [(&str, &str, &str); 4] = [
        ("er", "er", "baseline"),
        ("ba", "ba", "baseline"),
        ("ws", "ws", "baseline"),
        ("dynamic", "complete", "dynamic"),
    ];
    let mut results = Vec::new();
    for (arm, pattern, mode) in arms {
        let mut accs = Vec::new();
        let mut multiadds = 0u64;
        for &seed in seeds {
            let mut run_cfg = cfg.clone();
            run_cfg.architecture.pattern = pattern.to_string();
            run_cfg.training.mode = mode.to_string();
            run_cfg.training.seed = seed;
            // distinct random graphs per seed
            run_cfg.architecture.graph_seed = cfg.architecture.graph_seed.wrapping_add(seed);
            let net = build_network(&run_cfg)?;
            multiadds = count_cost(&net, (net.arch.image_size, net.arch.image_size))
                .multiadds_total;
            let outcome = train_network(net, &dataset, &run_cfg)?;
            accs.push(outcome.final_acc);
        }
        results.push(WiringResult {
            arm: arm.to_string(),
            multiadds,
            accs,
        });
    }
    Ok(WiringReport {
        seeds: seeds.to_vec(),
        results,
    })
}

/// `cost` command body.
pub fn cost_report(cfg: &RunConfig) -> Result<CostReport> {
    let net = build_network(cfg)?;
    Ok(count_cost(
        &net,
        (net.arch.image_size, net.arch.image_size),
    ))
}

/// Runs a dynamic forward pass over the requested samples and writes one
/// DOT graph per (sample, stage) plus a combined `edges.csv` with lines
/// `sample,stage,i,j,weight` (stages 0-based, nodes 1-based).
pub fn export_graphs(
    cfg: &RunConfig,
    checkpoint: Option<&Path>,
    samples: &[usize],
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let dataset = load_dataset(cfg)?;
    let net = match checkpoint {
        Some(p) => crate::train::load_checkpoint(build_network(cfg)?, p)?.net,
        None => build_network(cfg)?,
    };
    if net.mode != ConnectivityMode::Dynamic {
        return Err(DgError::Config(
            "graph export requires dynamic connectivity mode".into(),
        ));
    }
    for &s in samples {
        if s >= dataset.len() {
            return Err(DgError::Data(format!(
                "sample {s} out of range for dataset of {}",
                dataset.len()
            )));
        }
    }
    let (images, _) = dataset.batch(samples);
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = tape.constant(images);
    let out = dynamic_forward(&net, &mut tape, &bound, x)?;

    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("resolved_config.toml"), cfg.to_toml_string())?;
    let mut written = Vec::new();
    let mut csv = String::from("sample,stage,i,j,weight\n");
    for (s, buf) in out.buffers.iter().enumerate() {
        let graph = &net.stages[s].graph;
        for (bi, &sample) in samples.iter().enumerate() {
            let snap: Array<f32> = buf.snapshot(&tape, bi)?;
            let n = graph.node_count();
            let mut weights = std::collections::BTreeMap::new();
            for (i, j) in graph.edges() {
                let w = snap.data()[(j - 1) * n + (i - 1)] as f64;
                weights.insert((i, j), w);
                let _ = writeln!(csv, "{sample},{s},{i},{j},{w}");
            }
            let dot = export_dot(graph, Some(&weights))?;
            let path = out_dir.join(format!("sample{sample}_stage{s}.dot"));
            fs::write(&path, dot)?;
            written.push(path);
        }
    }
    let csv_path = out_dir.join("edges.csv");
    fs::write(&csv_path, csv)?;
    written.push(csv_path);

    // Topology-only exports per stage
    for (s, stage) in net.stages.iter().enumerate() {
        let path = out_dir.join(format!("topology_stage{s}.csv"));
        fs::write(&path, export_edge_csv(&stage.graph, None)?)?;
        written.push(path);
    }
    Ok(written)
}
