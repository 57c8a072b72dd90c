//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line (run with `cargo test --test acceptance -- --nocapture`
//! to see them). Tolerances are pinned in the assertions.

mod common;

use std::collections::BTreeMap;

use common::{close_rel, max_abs_diff, micro_arch, oracle, random_array};
use dgnet::config::RunConfig;
use dgnet::experiments::{run_ablation, run_randwire_compare, train_run};
use dgnet::graph::WiringKind;
use dgnet::model::{
    count_cost, dynamic_forward, dynamic_forward_with, forward_auto, forward_pruned,
    prune_network, static_forward, ArchConfig, ConnectivityMode, Network, RouterInit,
    RouterOverride, StaticWeights,
};
use dgnet::routing::{split_equivalence_check, RouterParams, ThresholdPolicy};
use dgnet::tensor::{Array, Tape};
use rand::Rng;

fn pass(n: usize, what: &str) {
    println!("criterion {n}: PASS — {what}");
}

// ── 1. gradient correctness ─────────────────────────────────────────────

#[test]
fn criterion_01_gradient_correctness_64bit() {
    let start = std::time::Instant::now();
    let arch = micro_arch(1, 3, 8, 8, 4);
    let mut net = Network::<f64>::new(
        arch,
        ConnectivityMode::Dynamic,
        RouterInit { std: 0.5, bias: 0.0 },
        13,
    )
    .unwrap();
    let batch = random_array::<f64>(vec![2, 3, 8, 8], 1.0, 500);
    let labels = vec![1usize, 3];

    let loss_of = |net: &Network<f64>| -> f64 {
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let out = dynamic_forward(net, &mut tape, &bound, x).unwrap();
        let loss = tape
            .cross_entropy_smoothed(out.logits, &labels, 0.1)
            .unwrap();
        tape.value(loss).item()
    };

    // analytic gradients
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let x = tape.constant(batch.clone());
    let out = dynamic_forward(&net, &mut tape, &bound, x).unwrap();
    let loss = tape
        .cross_entropy_smoothed(out.logits, &labels, 0.1)
        .unwrap();
    tape.backward(loss).unwrap();
    let grads: Vec<Array<f64>> = bound
        .flat
        .iter()
        .map(|&id| tape.grad(id).unwrap().clone())
        .collect();

    let names = net.param_names();
    let eps = 1e-5;
    let mut checked = 0usize;
    for (p_idx, name) in names.iter().enumerate() {
        let numel = net.params()[p_idx].numel();
        for e in 0..numel {
            net.params_mut()[p_idx].data_mut()[e] += eps;
            let lp = loss_of(&net);
            net.params_mut()[p_idx].data_mut()[e] -= 2.0 * eps;
            let lm = loss_of(&net);
            net.params_mut()[p_idx].data_mut()[e] += eps;
            let fd = (lp - lm) / (2.0 * eps);
            let analytic = grads[p_idx].data()[e];
            assert!(
                close_rel(analytic, fd, 1e-4, 1e-8),
                "{name}[{e}]: analytic {analytic} vs fd {fd}"
            );
            checked += 1;
        }
    }
    let elapsed = start.elapsed();
    assert!(checked > 500, "only {checked} parameters checked");
    assert!(
        elapsed.as_secs() < 60,
        "gradient check took {elapsed:?}, budget is one minute"
    );
    pass(
        1,
        &format!("{checked} parameters match finite differences within 1e-4 ({elapsed:?})"),
    );
}

// ── 2. static/dynamic reduction ─────────────────────────────────────────

#[test]
fn criterion_02_dynamic_reduces_to_static_on_pattern_masks() {
    let net = Network::<f32>::new(
        micro_arch(2, 5, 6, 16, 4),
        ConnectivityMode::Dynamic,
        RouterInit { std: 0.6, bias: 0.0 },
        21,
    )
    .unwrap();
    let x = random_array::<f32>(vec![3, 3, 16, 16], 1.0, 501);
    for pattern in [WiringKind::Vgg, WiringKind::Res, WiringKind::Dense] {
        let mut mask = BTreeMap::new();
        for (s, stage) in net.stages.iter().enumerate() {
            let pattern_graph = dgnet::graph::pattern_edges(pattern, 5, 0).unwrap();
            for (i, j) in stage.graph.edges() {
                mask.insert((s, i, j), if pattern_graph.has_edge(i, j) { 1.0f32 } else { 0.0 });
            }
        }
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let xid = tape.constant(x.clone());
        let forced = dynamic_forward_with(
            &net,
            &mut tape,
            &bound,
            xid,
            None,
            &RouterOverride::PerEdge(&mask),
        )
        .unwrap();
        let xid2 = tape.constant(x.clone());
        let plain =
            static_forward(&net, &mut tape, &bound, xid2, &StaticWeights::Fixed(&mask)).unwrap();
        let diff = max_abs_diff(tape.value(forced.logits), tape.value(plain));
        assert!(diff < 1e-5, "{pattern:?}: max deviation {diff}");
    }
    pass(2, "forced-mask dynamic equals static for vgg/res/dense within 1e-5");
}

// ── 3. recursive-oracle equivalence ─────────────────────────────────────

#[test]
fn criterion_03_recursive_oracle_equivalence() {
    let mut worst: f64 = 0.0;
    for draw in 0..100u64 {
        let n = 3 + (draw % 3) as usize;
        let net = Network::<f32>::new(
            micro_arch(1, n, 4, 8, 3),
            ConnectivityMode::Dynamic,
            RouterInit { std: 0.8, bias: 0.0 },
            900 + draw,
        )
        .unwrap();
        let x = random_array::<f32>(vec![2, 3, 8, 8], 1.0, 1500 + draw);
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let xid = tape.constant(x.clone());
        let out = dynamic_forward(&net, &mut tape, &bound, xid).unwrap();
        for b in 0..2 {
            let sample = Array::stack(&[x.slice_first(b)]).unwrap();
            let want = oracle::dynamic_logits(&net, &sample);
            let got = Array::stack(&[tape.value(out.logits).slice_first(b)]).unwrap();
            let diff = max_abs_diff(&got, &want);
            worst = worst.max(diff);
            assert!(diff < 1e-5, "draw {draw} N={n} sample {b}: deviation {diff}");
        }
    }
    pass(
        3,
        &format!("100 random draws on N in 3..=5 match the recursive evaluator (worst {worst:.2e})"),
    );
}

// ── 4. router split equivalence ─────────────────────────────────────────

#[test]
fn criterion_04_router_split_equivalence() {
    let mut rng = dgnet::rng::seeded(77, 11);
    let mut worst: f64 = 0.0;
    for case in 0..1000u64 {
        let c = rng.gen_range(1..9);
        let zeta = rng.gen_range(1..7);
        let batch = rng.gen_range(1..4);
        let hw = rng.gen_range(2..6);
        let mut router_rng = dgnet::rng::seeded(3000 + case, dgnet::rng::STREAM_ROUTER);
        let router = RouterParams::<f32>::init(c, zeta, 0.7, 0.2, &mut router_rng);
        let features = random_array::<f32>(vec![batch, c, hw, hw], 1.0, 4000 + case);
        let dev = split_equivalence_check(&router, &features).unwrap();
        worst = worst.max(dev);
        assert!(dev <= 1e-6, "case {case}: deviation {dev}");
    }
    pass(
        4,
        &format!("1000 joint-vs-split router cases agree within 1e-6 (worst {worst:.2e})"),
    );
}

// ── 5. buffer invariants ────────────────────────────────────────────────

#[test]
fn criterion_05_buffer_invariants_randomized() {
    let mut rng = dgnet::rng::seeded(55, 11);
    let mut samples_seen = 0usize;
    let mut pass_idx = 0u64;
    while samples_seen < 10_000 {
        pass_idx += 1;
        let n = rng.gen_range(3..7);
        let b = rng.gen_range(2..9);
        let net = Network::<f32>::new(
            micro_arch(1, n, 3, 8, 3),
            ConnectivityMode::Dynamic,
            RouterInit { std: 0.8, bias: 0.0 },
            7000 + pass_idx,
        )
        .unwrap();
        let x = random_array::<f32>(vec![b, 3, 8, 8], 1.0, 8000 + pass_idx);
        let run = |batch: &Array<f32>| {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, false);
            let xid = tape.constant(batch.clone());
            let out = dynamic_forward(&net, &mut tape, &bound, xid).unwrap();
            out.buffers
                .iter()
                .map(|buf| buf.snapshot_all::<f32>(&tape))
                .collect::<Vec<_>>()
        };
        let snaps = run(&x);
        for stage in &snaps {
            for snap in stage {
                for j in 0..n {
                    for i in j..n {
                        assert_eq!(
                            snap.data()[j * n + i],
                            0.0,
                            "triangularity broken at ({j},{i})"
                        );
                    }
                }
            }
        }
        // batch permutation equivariance: reverse the batch
        let perm: Vec<usize> = (0..b).rev().collect();
        let rows: Vec<Array<f32>> = perm.iter().map(|&i| x.slice_first(i)).collect();
        let reversed = Array::stack(&rows).unwrap();
        let snaps_rev = run(&reversed);
        for (stage, stage_rev) in snaps.iter().zip(&snaps_rev) {
            for (slot, &src) in perm.iter().enumerate() {
                assert_eq!(
                    stage_rev[slot].data(),
                    stage[src].data(),
                    "permutation equivariance broken"
                );
            }
        }
        samples_seen += 2 * b;
    }
    pass(
        5,
        &format!("triangularity and permutation equivariance over {samples_seen} samples"),
    );
}

// ── 6. prune correctness ────────────────────────────────────────────────

#[test]
fn criterion_06_prune_masked_equals_skipped_and_output_reachable() {
    let mut rng = dgnet::rng::seeded(66, 11);
    let mut models = 0usize;
    let mut worst: f64 = 0.0;
    for trial in 0..100u64 {
        let n = rng.gen_range(3..7);
        let stages = rng.gen_range(1..3);
        let net = Network::<f32>::new(
            micro_arch(stages, n, 4, 8, 3),
            ConnectivityMode::Dynamic,
            RouterInit { std: 1.2, bias: 0.0 },
            9000 + trial,
        )
        .unwrap();
        let tau = 0.05 + 0.9 * rng.gen::<f64>();
        let policy = ThresholdPolicy::fixed(tau).unwrap();
        let x = random_array::<f32>(vec![2, 3, 8, 8], 1.0, 10_000 + trial);

        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let xid = tape.constant(x.clone());
        let out = dynamic_forward(&net, &mut tape, &bound, xid).unwrap();
        let snapshots: Vec<Vec<Array<f32>>> =
            out.buffers.iter().map(|b| b.snapshot_all(&tape)).collect();
        let plans = prune_network(&net, &snapshots, &policy);

        for b in 0..2 {
            let sample = Array::stack(&[x.slice_first(b)]).unwrap();
            let sample_plans: Vec<_> = plans.iter().map(|stage| stage[b].clone()).collect();
            // liveness: graph search over the plan's live edges
            for (s, plan) in sample_plans.iter().enumerate() {
                let nn = net.stages[s].graph.node_count();
                let mut reach = vec![false; nn + 1];
                reach[1] = true;
                let mut frontier = vec![1usize];
                while let Some(v) = frontier.pop() {
                    for &(i, j) in &plan.live_edges {
                        if i == v && !reach[j] {
                            reach[j] = true;
                            frontier.push(j);
                        }
                    }
                }
                assert!(
                    reach[nn],
                    "trial {trial} stage {s} sample {b}: output unreachable at tau {tau}"
                );
            }
            let skipped = forward_pruned(&net, &sample, &sample_plans).unwrap();
            let mats: Vec<Vec<Array<f32>>> = sample_plans
                .iter()
                .map(|p| vec![p.weights.clone()])
                .collect();
            let mut t2 = Tape::new();
            let b2 = net.bind(&mut t2, false);
            let xid2 = t2.constant(sample);
            let masked = dynamic_forward_with(
                &net,
                &mut t2,
                &b2,
                xid2,
                None,
                &RouterOverride::PerSample(&mats),
            )
            .unwrap();
            let diff = max_abs_diff(&skipped, t2.value(masked.logits));
            worst = worst.max(diff);
            assert!(diff < 1e-6, "trial {trial} sample {b}: deviation {diff}");
        }
        models += 1;
    }
    pass(
        6,
        &format!("{models} random models: masked == skipped (worst {worst:.2e}), output always reachable"),
    );
}

// ── 7. cost accounting ──────────────────────────────────────────────────

#[test]
fn criterion_07_cost_accounting_desk_reference() {
    let arch = ArchConfig::desk_reference();
    let net = Network::<f32>::new(
        arch,
        ConnectivityMode::Dynamic,
        RouterInit::default(),
        70,
    )
    .unwrap();
    let report = count_cost(&net, (32, 32));
    let share = report.router_share();
    assert!(share > 0.0);
    assert!(share < 0.02, "router share {share}");

    // Independent recount: spatial halves per stage (32 -> 16, 8, 4, 2);
    // the input node maps the previous width, interiors stay at 64.
    let mut checked = 0usize;
    let spatial = [16usize, 8, 4, 2];
    for s in 0..4 {
        let hw = spatial[s];
        for j in 1..=5 {
            let name = format!("s{s}.n{j}.conv");
            let c_in = if j == 1 {
                if s == 0 {
                    3
                } else {
                    64
                }
            } else {
                64
            };
            let hand = (c_in * 64 * hw * hw * 9) as u64;
            let layer = report
                .layers
                .iter()
                .find(|l| l.name == name)
                .unwrap_or_else(|| panic!("layer {name} missing"));
            assert_eq!(layer.multiadds, hand, "{name}");
            checked += 1;
        }
    }
    assert!(checked >= 10);
    pass(
        7,
        &format!("router share {share:.5} < 0.02; {checked} conv layers match the hand formula exactly"),
    );
}

// ── 8. ablation ordering ────────────────────────────────────────────────

fn ablation_base_config() -> RunConfig {
    RunConfig::load(
        None,
        &[
            ("architecture.stages".into(), "2".into()),
            ("architecture.nodes_per_stage".into(), "5".into()),
            ("architecture.channels".into(), "[6, 12]".into()),
            ("architecture.image_size".into(), "16".into()),
            ("dataset.classes".into(), "4".into()),
            ("dataset.per_class".into(), "150".into()),
            ("dataset.eval_per_class".into(), "40".into()),
            ("dataset.noise".into(), "1.2".into()),
            ("training.epochs".into(), "12".into()),
            ("training.batch_size".into(), "32".into()),
            ("training.base_lr".into(), "0.05".into()),
            ("training.warmup_epochs".into(), "1".into()),
        ],
    )
    .unwrap()
}

fn assert_ablation_direction(report: &dgnet::experiments::AblationReport, label: &str) {
    let baseline = report.result(ConnectivityMode::Baseline).mean();
    let static_alpha = report.result(ConnectivityMode::StaticAlpha).mean();
    let dynamic = report.result(ConnectivityMode::Dynamic).mean();
    assert!(
        dynamic >= static_alpha && static_alpha >= baseline,
        "{label}: ordering broken: dynamic {dynamic:.4}, static {static_alpha:.4}, baseline {baseline:.4}"
    );
    let diffs = report.paired_diffs(ConnectivityMode::Dynamic, ConnectivityMode::Baseline);
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let std = (diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / diffs.len() as f64)
        .sqrt();
    assert!(
        mean > 0.0 && mean > std,
        "{label}: dynamic - baseline {mean:.4} not separated beyond one std {std:.4} (diffs {diffs:?})"
    );
}

#[test]
fn criterion_08_ablation_ordering_synthetic() {
    let start = std::time::Instant::now();
    let cfg = ablation_base_config();
    let report = run_ablation(&cfg, &[0, 1, 2]).unwrap();
    assert_ablation_direction(&report, "synthetic");
    let elapsed = start.elapsed();
    assert!(
        elapsed.as_secs() < 1800,
        "ablation took {elapsed:?}, budget is 30 minutes"
    );
    pass(
        8,
        &format!(
            "synthetic K=4: dynamic {:.4} >= static_alpha {:.4} >= baseline {:.4} over 3 seeds ({elapsed:?})",
            report.result(ConnectivityMode::Dynamic).mean(),
            report.result(ConnectivityMode::StaticAlpha).mean(),
            report.result(ConnectivityMode::Baseline).mean(),
        ),
    );
}

#[test]
fn criterion_08b_ablation_ordering_cifar_subset_if_provided() {
    let Ok(dir) = std::env::var("DGNET_CIFAR_DIR") else {
        println!("criterion 8 (cifar subset): SKIP — set DGNET_CIFAR_DIR to a CIFAR-10 binary directory to enable");
        return;
    };
    let mut cfg = ablation_base_config();
    cfg.dataset.source = "cifar10".into();
    cfg.dataset.path = dir;
    cfg.dataset.train_cap = 4000;
    cfg.dataset.eval_cap = 1000;
    cfg.architecture.channels = vec![8, 16];
    cfg.training.epochs = 10;
    let report = run_ablation(&cfg, &[0, 1, 2]).unwrap();
    assert_ablation_direction(&report, "cifar subset");
    pass(8, "cifar-10 subset ordering holds over 3 seeds");
}

// ── 9. random-wiring comparison ─────────────────────────────────────────

#[test]
fn criterion_09_randwire_comparison() {
    let mut cfg = ablation_base_config();
    cfg.architecture.nodes_per_stage = 8;
    cfg.training.epochs = 16;
    // generator parameters: er p=0.2, ba m=5, ws k=4 p=0.75 (section defaults)
    assert_eq!(cfg.architecture.er_p, 0.2);
    assert_eq!(cfg.architecture.ba_m, 5);
    assert_eq!(cfg.architecture.ws_k, 4);
    assert_eq!(cfg.architecture.ws_p, 0.75);
    let report = run_randwire_compare(&cfg, &[0, 1, 2]).unwrap();
    let dynamic = report.result("dynamic").mean();
    for arm in ["er", "ba", "ws"] {
        let static_mean = report.result(arm).mean();
        assert!(
            dynamic >= static_mean,
            "dynamic {dynamic:.4} below {arm} {static_mean:.4}"
        );
    }
    pass(
        9,
        &format!(
            "dynamic {:.4} >= er {:.4}, ba {:.4}, ws {:.4} over 3 seeds",
            dynamic,
            report.result("er").mean(),
            report.result("ba").mean(),
            report.result("ws").mean(),
        ),
    );
}

// ── 10. reproducibility ─────────────────────────────────────────────────

#[test]
fn criterion_10_bit_identical_metrics_on_rerun() {
    let mut cfg = ablation_base_config();
    cfg.training.epochs = 2;
    cfg.dataset.per_class = 40;
    cfg.dataset.eval_per_class = 10;
    let dir = tempfile::tempdir().unwrap();
    let out_a = dir.path().join("a");
    let out_b = dir.path().join("b");
    train_run(&cfg, &out_a).unwrap();
    train_run(&cfg, &out_b).unwrap();
    let a = std::fs::read(out_a.join("metrics.csv")).unwrap();
    let b = std::fs::read(out_b.join("metrics.csv")).unwrap();
    assert_eq!(a, b, "metrics.csv differs between identical runs");
    assert!(!a.is_empty());
    let ca = std::fs::read(out_a.join("checkpoint.bin")).unwrap();
    let cb = std::fs::read(out_b.join("checkpoint.bin")).unwrap();
    assert_eq!(ca, cb, "checkpoints differ between identical runs");
    pass(10, "two identical runs produced byte-identical metrics and checkpoints");
}

// sanity: the dispatcher executes the right forward path per mode
#[test]
fn forward_auto_covers_all_modes() {
    for mode in [
        ConnectivityMode::Baseline,
        ConnectivityMode::StaticAlpha,
        ConnectivityMode::Dynamic,
    ] {
        let net =
            Network::<f32>::new(micro_arch(1, 3, 4, 8, 2), mode, RouterInit::default(), 5)
                .unwrap();
        let mut tape = Tape::new();
        let bound = net.bind(&mut tape, false);
        let x = tape.constant(random_array::<f32>(vec![2, 3, 8, 8], 1.0, 600));
        let (logits, buffers) = forward_auto(&net, &mut tape, &bound, x, None).unwrap();
        assert_eq!(tape.value(logits).shape(), &[2, 2]);
        assert_eq!(buffers.is_some(), mode == ConnectivityMode::Dynamic);
    }
}
