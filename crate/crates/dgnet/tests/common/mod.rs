//! Shared test fixtures: naive-loop reference implementations, recursive
//! per-sample evaluators and finite-difference helpers. Everything here is
//! deliberately written against the math definitions, independent of the
//! engine's im2col/tape code paths.

#![allow(dead_code)]

use dgnet::model::{Network, NodeRole};
use dgnet::tensor::{Array, Element};

/// Naive reference kernels (direct nested loops).
pub mod naive {
    use super::*;

    /// Six-nested-loop convolution with optional bias.
    pub fn conv2d<E: Element>(
        x: &Array<E>,
        kernel: &Array<E>,
        bias: Option<&Array<E>>,
        stride: usize,
        padding: usize,
    ) -> Array<E> {
        let (b, c_in, h, w) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        );
        let (c_out, k) = (kernel.shape()[0], kernel.shape()[2]);
        let h_out = (h + 2 * padding - k) / stride + 1;
        let w_out = (w + 2 * padding - k) / stride + 1;
        let mut out = Array::zeros(vec![b, c_out, h_out, w_out]);
        for bi in 0..b {
            for co in 0..c_out {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = bias.map(|bv| bv.data()[co]).unwrap_or_else(E::zero);
                        for ci in 0..c_in {
                            for kh in 0..k {
                                for kw in 0..k {
                                    let ih = (oh * stride + kh) as isize - padding as isize;
                                    let iw = (ow * stride + kw) as isize - padding as isize;
                                    if ih >= 0 && iw >= 0 && (ih as usize) < h && (iw as usize) < w
                                    {
                                        let xv = x.data()
                                            [((bi * c_in + ci) * h + ih as usize) * w + iw as usize];
                                        let kv = kernel.data()
                                            [((co * c_in + ci) * k + kh) * k + kw];
                                        acc = acc + xv * kv;
                                    }
                                }
                            }
                        }
                        out.data_mut()[((bi * c_out + co) * h_out + oh) * w_out + ow] = acc;
                    }
                }
            }
        }
        out
    }

    pub fn global_avg_pool<E: Element>(x: &Array<E>) -> Array<E> {
        let (b, c, h, w) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        );
        let mut out = Array::zeros(vec![b, c]);
        for bi in 0..b {
            for ci in 0..c {
                let mut acc = E::zero();
                for p in 0..h * w {
                    acc = acc + x.data()[(bi * c + ci) * h * w + p];
                }
                out.data_mut()[bi * c + ci] = acc / E::from_f64((h * w) as f64);
            }
        }
        out
    }

    pub fn fully_connected<E: Element>(x: &Array<E>, w: &Array<E>, b: &Array<E>) -> Array<E> {
        let (batch, c_in) = (x.shape()[0], x.shape()[1]);
        let c_out = w.shape()[1];
        let mut out = Array::zeros(vec![batch, c_out]);
        for bi in 0..batch {
            for o in 0..c_out {
                let mut acc = b.data()[o];
                for i in 0..c_in {
                    acc = acc + x.data()[bi * c_in + i] * w.data()[i * c_out + o];
                }
                out.data_mut()[bi * c_out + o] = acc;
            }
        }
        out
    }

    pub fn relu<E: Element>(x: &Array<E>) -> Array<E> {
        x.map(|v| if v > E::zero() { v } else { E::zero() })
    }

    pub fn sigmoid<E: Element>(x: &Array<E>) -> Array<E> {
        x.map(|v| E::one() / (E::one() + (-v).exp()))
    }

    pub fn scale<E: Element>(x: &Array<E>, c: E) -> Array<E> {
        x.map(|v| v * c)
    }

    pub fn add<E: Element>(a: &Array<E>, b: &Array<E>) -> Array<E> {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| x + y)
            .collect();
        Array::new(a.shape().to_vec(), data).unwrap()
    }

    /// Smoothed cross-entropy via direct softmax (no log-sum-exp trick).
    pub fn cross_entropy<E: Element>(logits: &Array<E>, labels: &[usize], smoothing: E) -> E {
        let (b, k) = (logits.shape()[0], logits.shape()[1]);
        let uniform = smoothing / E::from_f64(k as f64);
        let mut total = E::zero();
        for bi in 0..b {
            let row = &logits.data()[bi * k..(bi + 1) * k];
            let m = row.iter().copied().fold(E::neg_infinity(), E::max);
            let denom: E = row.iter().map(|&v| (v - m).exp()).sum();
            for (kk, &v) in row.iter().enumerate() {
                let q = if kk == labels[bi] {
                    E::one() - smoothing + uniform
                } else {
                    uniform
                };
                let log_p = v - m - denom.ln();
                total = total - q * log_p;
            }
        }
        total / E::from_f64(b as f64)
    }
}

/// Recursive per-sample evaluators applying the aggregation definitions
/// node by node (memoized recursion, naive kernels).
pub mod oracle {
    use super::*;
    use std::collections::BTreeMap;

    fn transform<E: Element>(net: &Network<E>, stage: usize, node: usize, agg: &Array<E>) -> Array<E> {
        let block = &net.stages[stage].nodes[node - 1];
        match &block.conv {
            Some(c) => naive::relu(&naive::conv2d(
                agg,
                &c.kernel,
                Some(&c.bias),
                c.stride,
                c.padding,
            )),
            None => agg.clone(),
        }
    }

    fn head<E: Element>(net: &Network<E>, features: &Array<E>) -> Array<E> {
        let pooled = naive::global_avg_pool(features);
        naive::fully_connected(&pooled, &net.head.weight, &net.head.bias)
    }

    /// Static recursion: x_j = f_j(sum_i w_ij x_i) with fixed edge weights
    /// keyed by (stage, i, j).
    pub fn static_logits<E: Element>(
        net: &Network<E>,
        sample: &Array<E>,
        weights: &BTreeMap<(usize, usize, usize), E>,
    ) -> Array<E> {
        let mut x = sample.clone();
        for s in 0..net.stages.len() {
            x = static_stage(net, s, &x, weights);
        }
        head(net, &x)
    }

    fn static_stage<E: Element>(
        net: &Network<E>,
        s: usize,
        input: &Array<E>,
        weights: &BTreeMap<(usize, usize, usize), E>,
    ) -> Array<E> {
        let n = net.stages[s].graph.node_count();
        let mut memo: Vec<Option<Array<E>>> = vec![None; n + 1];
        fn feat<E: Element>(
            net: &Network<E>,
            s: usize,
            j: usize,
            input: &Array<E>,
            weights: &BTreeMap<(usize, usize, usize), E>,
            memo: &mut Vec<Option<Array<E>>>,
        ) -> Array<E> {
            if let Some(v) = &memo[j] {
                return v.clone();
            }
            let agg = if j == 1 {
                input.clone()
            } else {
                let mut acc: Option<Array<E>> = None;
                for i in net.stages[s].graph.in_sources(j) {
                    let xi = feat(net, s, i, input, weights, memo);
                    let w = *weights.get(&(s, i, j)).expect("weight for every edge");
                    let term = naive::scale(&xi, w);
                    acc = Some(match acc {
                        Some(a) => naive::add(&a, &term),
                        None => term,
                    });
                }
                acc.expect("non-input node has incoming edges")
            };
            let out = transform(net, s, j, &agg);
            memo[j] = Some(out.clone());
            out
        }
        feat(net, s, n, input, weights, &mut memo)
    }

    /// Dynamic recursion: routing weights come from each node's router
    /// applied to its own transformed features.
    pub fn dynamic_logits<E: Element>(net: &Network<E>, sample: &Array<E>) -> Array<E> {
        let mut x = sample.clone();
        for s in 0..net.stages.len() {
            x = dynamic_stage(net, s, &x);
        }
        head(net, &x)
    }

    fn dynamic_stage<E: Element>(net: &Network<E>, s: usize, input: &Array<E>) -> Array<E> {
        let n = net.stages[s].graph.node_count();
        let mut memo: Vec<Option<Array<E>>> = vec![None; n + 1];
        // Weight of edge (i, j): position of j within i's ascending targets.
        fn alpha<E: Element>(
            net: &Network<E>,
            s: usize,
            i: usize,
            j: usize,
            input: &Array<E>,
            memo: &mut Vec<Option<Array<E>>>,
        ) -> E {
            let xi = feat(net, s, i, input, memo);
            let router = net.stages[s].nodes[i - 1]
                .router
                .as_ref()
                .expect("routed node");
            let squeezed = naive::global_avg_pool(&xi);
            let pre = naive::fully_connected(&squeezed, &router.weight, &router.bias);
            let weights = naive::sigmoid(&pre);
            let targets = net.stages[s].graph.out_targets(i);
            let pos = targets.iter().position(|&t| t == j).expect("edge exists");
            weights.data()[pos]
        }
        fn feat<E: Element>(
            net: &Network<E>,
            s: usize,
            j: usize,
            input: &Array<E>,
            memo: &mut Vec<Option<Array<E>>>,
        ) -> Array<E> {
            if let Some(v) = &memo[j] {
                return v.clone();
            }
            let agg = if j == 1 {
                input.clone()
            } else {
                let mut acc: Option<Array<E>> = None;
                for i in net.stages[s].graph.in_sources(j) {
                    let xi = feat(net, s, i, input, memo);
                    let w = alpha(net, s, i, j, input, memo);
                    let term = naive::scale(&xi, w);
                    acc = Some(match acc {
                        Some(a) => naive::add(&a, &term),
                        None => term,
                    });
                }
                acc.expect("non-input node has incoming edges")
            };
            let out = transform(net, s, j, &agg);
            memo[j] = Some(out.clone());
            out
        }
        feat(net, s, n, input, &mut memo)
    }
}

/// Relative-error comparison with an absolute floor for near-zero pairs.
pub fn close_rel(a: f64, b: f64, rel_tol: f64, abs_floor: f64) -> bool {
    let diff = (a - b).abs();
    diff <= rel_tol * a.abs().max(b.abs()) || diff <= abs_floor
}

pub fn max_abs_diff<E: Element>(a: &Array<E>, b: &Array<E>) -> f64 {
    assert_eq!(a.shape(), b.shape(), "shape mismatch in comparison");
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

pub fn random_array<E: Element>(shape: Vec<usize>, std: f64, seed: u64) -> Array<E> {
    let mut a = Array::zeros(shape);
    a.fill_normal(std, &mut dgnet::rng::seeded(seed, dgnet::rng::STREAM_DATA));
    a
}

/// Small complete-graph architectures used across the test suites.
pub fn micro_arch(
    stages: usize,
    nodes: usize,
    channels: usize,
    image: usize,
    classes: usize,
) -> dgnet::model::ArchConfig {
    dgnet::model::ArchConfig {
        stages,
        nodes_per_stage: nodes,
        channels: vec![channels; stages],
        in_channels: 3,
        image_size: image,
        classes,
        pattern: dgnet::graph::WiringKind::Complete,
        graph_seed: 0,
        stage_stride: 2,
        kernel_size: 3,
    }
}

/// Checks the paper-role invariants of a built network (input transforms,
/// output aggregates).
pub fn assert_roles<E: Element>(net: &Network<E>) {
    for stage in &net.stages {
        assert_eq!(stage.nodes.first().unwrap().role, NodeRole::Input);
        assert_eq!(stage.nodes.last().unwrap().role, NodeRole::Output);
        assert!(stage.nodes.last().unwrap().conv.is_none());
    }
}
