//! Network assembly and execution.
//!
//! A network is a chain of stages; each stage is a [`StageGraph`] over node
//! blocks sharing one channel count. The stage input node carries the
//! channel/stride transform, interior nodes are constant-width conv blocks,
//! and the output node aggregates without transforming. Three connectivity
//! modes exist: fixed pattern weights (baseline), learnable per-edge scalars
//! (static alpha) and per-sample router weights (dynamic).

use std::collections::{BTreeMap, BTreeSet};

use crate::buffer::AdjacencyBuffer;
use crate::error::{DgError, Result};
use crate::graph::{pattern_edges, StageGraph, WiringKind};
use crate::rng;
use crate::routing::{self, RouterParams, ThresholdPolicy};
use crate::tensor::{Array, Element, Tape, TensorId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectivityMode {
    /// Pattern edges with weight 1 for every sample.
    Baseline,
    /// One learnable scalar per edge, shared by all samples.
    StaticAlpha,
    /// Router-generated instance-aware weights.
    Dynamic,
}

impl ConnectivityMode {
    pub fn name(&self) -> &'static str {
        match self {
            ConnectivityMode::Baseline => "baseline",
            ConnectivityMode::StaticAlpha => "static_alpha",
            ConnectivityMode::Dynamic => "dynamic",
        }
    }
}

/// Architecture hyperparameters. Stages are indexed 0-based throughout the
/// API; nodes keep the 1-based convention of the stage graph.
#[derive(Clone, Debug)]
pub struct ArchConfig {
    pub stages: usize,
    pub nodes_per_stage: usize,
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub image_size: usize,
    pub classes: usize,
    pub pattern: WiringKind,
    pub graph_seed: u64,
    /// Stride of each stage input node's convolution.
    pub stage_stride: usize,
    pub kernel_size: usize,
}

impl ArchConfig {
    /// Reference desk-scale architecture: 4 stages of 6 nodes at 64
    /// channels on 32x32 inputs, completely connected.
    pub fn desk_reference() -> Self {
        Self {
            stages: 4,
            nodes_per_stage: 6,
            channels: vec![64; 4],
            in_channels: 3,
            image_size: 32,
            classes: 10,
            pattern: WiringKind::Complete,
            graph_seed: 0,
            stage_stride: 2,
            kernel_size: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| DgError::InvalidArgument {
            op: "ArchConfig::validate",
            msg,
        };
        if self.stages < 1 {
            return Err(bad("need at least one stage".into()));
        }
        if self.nodes_per_stage < 2 {
            return Err(bad(format!(
                "nodes_per_stage {} below minimum 2",
                self.nodes_per_stage
            )));
        }
        if self.channels.len() != self.stages {
            return Err(bad(format!(
                "channels list has {} entries for {} stages",
                self.channels.len(),
                self.stages
            )));
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return Err(bad("channel counts must be positive".into()));
        }
        if self.classes < 2 {
            return Err(bad(format!("classes {} below minimum 2", self.classes)));
        }
        if self.kernel_size.is_multiple_of(2) || self.kernel_size == 0 {
            return Err(bad(format!("kernel size {} must be odd", self.kernel_size)));
        }
        if self.stage_stride < 1 {
            return Err(bad("stage stride must be >= 1".into()));
        }
        for (k, &(h, _)) in self.stage_spatial().iter().enumerate() {
            if h < 1 {
                return Err(bad(format!("stage {k} has empty spatial extent")));
            }
        }
        Ok(())
    }

    /// Output spatial extent of each stage (square).
    pub fn stage_spatial(&self) -> Vec<(usize, usize)> {
        let pad = self.kernel_size / 2;
        let mut hw = self.image_size;
        let mut out = Vec::with_capacity(self.stages);
        for _ in 0..self.stages {
            hw = (hw + 2 * pad).saturating_sub(self.kernel_size) / self.stage_stride + 1;
            out.push((hw, hw));
        }
        out
    }

    /// Stage graphs, one per stage. Random wirings draw a distinct graph
    /// per stage from the stage-offset seed.
    pub fn stage_graphs(&self) -> Result<Vec<StageGraph>> {
        (0..self.stages)
            .map(|k| {
                let g = pattern_edges(
                    self.pattern,
                    self.nodes_per_stage,
                    self.graph_seed.wrapping_add(k as u64),
                )?;
                g.validate().map_err(|v| DgError::InvalidArgument {
                    op: "stage_graphs",
                    msg: v.to_string(),
                })?;
                Ok(g)
            })
            .collect()
    }
}

/// Router initialisation knobs (the paper is silent on this; near 0.5 is
/// the symmetric default, a positive bias mimics a near-static start).
#[derive(Clone, Copy, Debug)]
pub struct RouterInit {
    pub std: f64,
    pub bias: f64,
}

impl Default for RouterInit {
    fn default() -> Self {
        Self {
            std: 0.01,
            bias: 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ConvBlock<E> {
    pub kernel: Array<E>,
    pub bias: Array<E>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    Input,
    Interior,
    Output,
}

/// One graph node: aggregation happens outside, this holds the transform
/// and the router that weights the node's output edges.
#[derive(Clone, Debug)]
pub struct NodeBlock<E> {
    pub role: NodeRole,
    pub conv: Option<ConvBlock<E>>,
    pub router: Option<RouterParams<E>>,
}

#[derive(Clone, Debug)]
pub struct Stage<E> {
    pub graph: StageGraph,
    pub nodes: Vec<NodeBlock<E>>,
    /// Learnable per-edge scalars; populated in static-alpha mode only.
    pub alphas: BTreeMap<(usize, usize), Array<E>>,
    pub channels: usize,
}

#[derive(Clone, Debug)]
pub struct LinearParams<E> {
    pub weight: Array<E>,
    pub bias: Array<E>,
}

#[derive(Clone, Debug)]
pub struct Network<E> {
    pub arch: ArchConfig,
    pub mode: ConnectivityMode,
    pub stages: Vec<Stage<E>>,
    pub head: LinearParams<E>,
}

impl<E: Element> Network<E> {
    /// Builds a network. Network weights draw from the seed's net stream
    /// regardless of mode, so all three connectivity modes share identical
    /// initial convolution and head parameters for a given seed.
    pub fn new(
        arch: ArchConfig,
        mode: ConnectivityMode,
        router_init: RouterInit,
        seed: u64,
    ) -> Result<Self> {
        arch.validate()?;
        let graphs = arch.stage_graphs()?;
        let mut net_rng = rng::seeded(seed, rng::STREAM_NET);
        let mut router_rng = rng::seeded(seed, rng::STREAM_ROUTER);
        let k = arch.kernel_size;
        let pad = k / 2;

        let mut stages = Vec::with_capacity(arch.stages);
        let mut carry_fanin = 1usize; // terms summed into the next stage input
        for (s, graph) in graphs.into_iter().enumerate() {
            let c_out = arch.channels[s];
            let c_prev = if s == 0 {
                arch.in_channels
            } else {
                arch.channels[s - 1]
            };
            let n = arch.nodes_per_stage;
            let mut nodes = Vec::with_capacity(n);
            for j in 1..=n {
                // He init scaled by the number of aggregated input terms;
                // without normalization layers, dense aggregation would
                // otherwise blow up activation magnitudes node by node.
                let agg_terms = if j == 1 {
                    carry_fanin
                } else {
                    graph.in_degree(j).max(1)
                };
                // Aggregated terms share ancestry, so their sum grows like
                // the term count rather than its square root; damp by the
                // full count.
                let damp = agg_terms as f64;
                let (role, conv) = if j == 1 {
                    let mut kernel = Array::zeros(vec![c_out, c_prev, k, k]);
                    kernel.fill_normal(
                        (2.0 / (c_prev * k * k) as f64).sqrt() / damp,
                        &mut net_rng,
                    );
                    (
                        NodeRole::Input,
                        Some(ConvBlock {
                            kernel,
                            bias: Array::zeros(vec![c_out]),
                            stride: arch.stage_stride,
                            padding: pad,
                        }),
                    )
                } else if j == n {
                    (NodeRole::Output, None)
                } else {
                    let mut kernel = Array::zeros(vec![c_out, c_out, k, k]);
                    kernel.fill_normal(
                        (2.0 / (c_out * k * k) as f64).sqrt() / damp,
                        &mut net_rng,
                    );
                    (
                        NodeRole::Interior,
                        Some(ConvBlock {
                            kernel,
                            bias: Array::zeros(vec![c_out]),
                            stride: 1,
                            padding: pad,
                        }),
                    )
                };
                nodes.push(NodeBlock {
                    role,
                    conv,
                    router: None,
                });
            }
            if mode == ConnectivityMode::Dynamic {
                for j in 1..=n {
                    let zeta = graph.out_degree(j);
                    if zeta > 0 {
                        nodes[j - 1].router = Some(RouterParams::init(
                            c_out,
                            zeta,
                            router_init.std,
                            router_init.bias,
                            &mut router_rng,
                        ));
                    }
                }
            }
            let mut alphas = BTreeMap::new();
            if mode == ConnectivityMode::StaticAlpha {
                for (i, j) in graph.edges() {
                    alphas.insert((i, j), Array::scalar(E::from_f64(0.5)));
                }
            }
            carry_fanin = graph.in_degree(n).max(1);
            stages.push(Stage {
                graph,
                nodes,
                alphas,
                channels: c_out,
            });
        }

        let c_head = *arch.channels.last().expect("validated stages >= 1");
        let mut head_weight = Array::zeros(vec![c_head, arch.classes]);
        head_weight.fill_normal((1.0 / c_head as f64).sqrt(), &mut net_rng);
        let head = LinearParams {
            weight: head_weight,
            bias: Array::zeros(vec![arch.classes]),
        };

        Ok(Self {
            arch,
            mode,
            stages,
            head,
        })
    }

    /// Canonical parameter traversal order shared by naming, binding,
    /// checkpointing and optimizer updates.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (idx, node) in stage.nodes.iter().enumerate() {
                let j = idx + 1;
                if node.conv.is_some() {
                    names.push(format!("s{s}.n{j}.conv.kernel"));
                    names.push(format!("s{s}.n{j}.conv.bias"));
                }
                if node.router.is_some() {
                    names.push(format!("s{s}.n{j}.router.weight"));
                    names.push(format!("s{s}.n{j}.router.bias"));
                }
            }
            for (i, j) in stage.alphas.keys() {
                names.push(format!("s{s}.alpha.{i}_{j}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Array<E>> {
        let mut out = Vec::new();
        for stage in &self.stages {
            for node in &stage.nodes {
                if let Some(c) = &node.conv {
                    out.push(&c.kernel);
                    out.push(&c.bias);
                }
                if let Some(r) = &node.router {
                    out.push(&r.weight);
                    out.push(&r.bias);
                }
            }
            out.extend(stage.alphas.values());
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array<E>> {
        let mut out = Vec::new();
        for stage in &mut self.stages {
            for node in &mut stage.nodes {
                if let Some(c) = &mut node.conv {
                    out.push(&mut c.kernel);
                    out.push(&mut c.bias);
                }
                if let Some(r) = &mut node.router {
                    out.push(&mut r.weight);
                    out.push(&mut r.bias);
                }
            }
            out.extend(stage.alphas.values_mut());
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Registers every parameter as a tape leaf, in canonical order.
    pub fn bind(&self, tape: &mut Tape<E>, requires_grad: bool) -> Bound {
        let mut flat = Vec::new();
        let mut stages = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            let mut nodes = Vec::with_capacity(stage.nodes.len());
            for node in &stage.nodes {
                let conv = node.conv.as_ref().map(|c| {
                    let kid = tape.leaf(c.kernel.clone(), requires_grad);
                    let bid = tape.leaf(c.bias.clone(), requires_grad);
                    flat.push(kid);
                    flat.push(bid);
                    (kid, bid)
                });
                let router = node.router.as_ref().map(|r| {
                    let wid = tape.leaf(r.weight.clone(), requires_grad);
                    let bid = tape.leaf(r.bias.clone(), requires_grad);
                    flat.push(wid);
                    flat.push(bid);
                    (wid, bid)
                });
                nodes.push(BoundNode { conv, router });
            }
            let mut alphas = BTreeMap::new();
            for (&edge, value) in &stage.alphas {
                let id = tape.leaf(value.clone(), requires_grad);
                flat.push(id);
                alphas.insert(edge, id);
            }
            stages.push(BoundStage { nodes, alphas });
        }
        let head_weight = tape.leaf(self.head.weight.clone(), requires_grad);
        let head_bias = tape.leaf(self.head.bias.clone(), requires_grad);
        flat.push(head_weight);
        flat.push(head_bias);
        Bound {
            stages,
            head_weight,
            head_bias,
            flat,
        }
    }

    fn check_batch(&self, tape: &Tape<E>, batch: TensorId) -> Result<usize> {
        let s = tape.value(batch).shape();
        if s.len() != 4
            || s[1] != self.arch.in_channels
            || s[2] != self.arch.image_size
            || s[3] != self.arch.image_size
        {
            return Err(DgError::InvalidArgument {
                op: "forward",
                msg: format!(
                    "batch shape {s:?} does not match [B,{},{},{}]",
                    self.arch.in_channels, self.arch.image_size, self.arch.image_size
                ),
            });
        }
        Ok(s[0])
    }
}

/// Tape ids of bound parameters, mirroring the network structure plus the
/// canonical flat order.
pub struct Bound {
    pub stages: Vec<BoundStage>,
    pub head_weight: TensorId,
    pub head_bias: TensorId,
    pub flat: Vec<TensorId>,
}

pub struct BoundStage {
    pub nodes: Vec<BoundNode>,
    pub alphas: BTreeMap<(usize, usize), TensorId>,
}

pub struct BoundNode {
    pub conv: Option<(TensorId, TensorId)>,
    pub router: Option<(TensorId, TensorId)>,
}

/// Edge weights for the static forward pass.
pub enum StaticWeights<'a, E> {
    /// Weight 1 on every pattern edge.
    AllOnes,
    /// Fixed scalar per (stage, i, j); every stage edge must be covered.
    Fixed(&'a BTreeMap<(usize, usize, usize), E>),
    /// The network's learnable alpha scalars (static-alpha mode).
    Learned,
}

/// Router substitution for the dynamic forward pass (testing and masked
/// execution).
pub enum RouterOverride<'a, E> {
    None,
    /// Constant per-edge weights keyed by (stage, i, j), shared by samples.
    PerEdge(&'a BTreeMap<(usize, usize, usize), E>),
    /// Per-stage, per-sample `[N,N]` weight matrices (row j-1 = target,
    /// column i-1 = source), as produced by buffer snapshots or prune plans.
    PerSample(&'a [Vec<Array<E>>]),
}

fn node_transform<E: Element>(
    tape: &mut Tape<E>,
    node: &NodeBlock<E>,
    bound: &BoundNode,
    agg: TensorId,
) -> Result<TensorId> {
    match (&node.conv, bound.conv) {
        (Some(c), Some((kid, bid))) => {
            let y = tape.conv2d(agg, kid, Some(bid), c.stride, c.padding)?;
            tape.relu(y)
        }
        _ => Ok(agg), // output node: pure aggregation
    }
}

enum EdgeWeight<E> {
    Const(E),
    Scalar(TensorId),
    Rows(TensorId),
}

/// Weighted-sum aggregation over a node's incoming edges, ascending source
/// order (fixed summation order keeps outputs deterministic).
fn aggregate<E: Element>(
    tape: &mut Tape<E>,
    terms: Vec<(TensorId, EdgeWeight<E>)>,
) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for (feat, weight) in terms {
        let term = match weight {
            EdgeWeight::Const(c) => tape.scale_const(feat, c)?,
            EdgeWeight::Scalar(id) => tape.scale_scalar(feat, id)?,
            EdgeWeight::Rows(id) => tape.scale_rows(feat, id)?,
        };
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| DgError::InvalidArgument {
        op: "aggregate",
        msg: "node has no incoming edges".into(),
    })
}

/// Static execution: node j computes f(sum_i w_ij x_i) in topological order
/// with sample-independent edge weights.
pub fn static_forward<E: Element>(
    net: &Network<E>,
    tape: &mut Tape<E>,
    bound: &Bound,
    batch: TensorId,
    weights: &StaticWeights<E>,
) -> Result<TensorId> {
    net.check_batch(tape, batch)?;
    let mut stage_input = batch;
    for (s, stage) in net.stages.iter().enumerate() {
        let n = stage.graph.node_count();
        let mut feats: Vec<Option<TensorId>> = vec![None; n + 1];
        for j in 1..=n {
            let agg = if j == 1 {
                stage_input
            } else {
                let mut terms = Vec::new();
                for i in stage.graph.in_sources(j) {
                    let w = match weights {
                        StaticWeights::AllOnes => EdgeWeight::Const(E::one()),
                        StaticWeights::Fixed(map) => EdgeWeight::Const(*map.get(&(s, i, j)).ok_or(
                            DgError::MissingEdgeWeight { stage: s, i, j },
                        )?),
                        StaticWeights::Learned => EdgeWeight::Scalar(
                            *bound.stages[s]
                                .alphas
                                .get(&(i, j))
                                .ok_or(DgError::MissingEdgeWeight { stage: s, i, j })?,
                        ),
                    };
                    terms.push((feats[i].expect("topological order"), w));
                }
                aggregate(tape, terms)?
            };
            feats[j] = Some(node_transform(
                tape,
                &stage.nodes[j - 1],
                &bound.stages[s].nodes[j - 1],
                agg,
            )?);
        }
        stage_input = feats[n].expect("output node computed");
    }
    classifier(tape, bound, stage_input)
}

pub struct DynamicOutput {
    pub logits: TensorId,
    pub buffers: Vec<AdjacencyBuffer>,
}

/// Dynamic execution with the four-step node procedure: read the incoming
/// row from the stage buffer, aggregate per-sample weighted sums, transform,
/// route, and write the outgoing column.
pub fn dynamic_forward<E: Element>(
    net: &Network<E>,
    tape: &mut Tape<E>,
    bound: &Bound,
    batch: TensorId,
) -> Result<DynamicOutput> {
    dynamic_forward_with(net, tape, bound, batch, None, &RouterOverride::None)
}

/// Full-control dynamic forward: optional inference-time threshold gating
/// of router outputs and optional router substitution. The threshold only
/// gates genuine router outputs, never overridden weights.
pub fn dynamic_forward_with<E: Element>(
    net: &Network<E>,
    tape: &mut Tape<E>,
    bound: &Bound,
    batch: TensorId,
    threshold: Option<&ThresholdPolicy>,
    routers: &RouterOverride<E>,
) -> Result<DynamicOutput> {
    let b = net.check_batch(tape, batch)?;
    let mut stage_input = batch;
    let mut buffers = Vec::with_capacity(net.stages.len());
    for (s, stage) in net.stages.iter().enumerate() {
        let n = stage.graph.node_count();
        let mut buf = AdjacencyBuffer::with_checks(tape, b, n, cfg!(debug_assertions))?;
        let mut feats: Vec<Option<TensorId>> = vec![None; n + 1];
        for j in 1..=n {
            let agg = if j == 1 {
                stage_input
            } else {
                let row = buf.read_incoming(tape, j)?;
                let mut terms = Vec::new();
                for i in stage.graph.in_sources(j) {
                    let w = tape.column(row, i - 1)?;
                    terms.push((feats[i].expect("topological order"), EdgeWeight::Rows(w)));
                }
                aggregate(tape, terms)?
            };
            let x = node_transform(
                tape,
                &stage.nodes[j - 1],
                &bound.stages[s].nodes[j - 1],
                agg,
            )?;
            let targets = stage.graph.out_targets(j);
            if targets.is_empty() {
                buf.mark_complete(j);
            } else {
                let weights = match routers {
                    RouterOverride::None => {
                        let (wid, bid) = bound.stages[s].nodes[j - 1].router.ok_or_else(|| {
                            DgError::InvalidArgument {
                                op: "dynamic_forward",
                                msg: format!("node {j} of stage {s} has no router"),
                            }
                        })?;
                        let raw = routing::route(tape, x, wid, bid)?;
                        match threshold {
                            Some(p) if p.is_active() => tape.threshold(raw, E::from_f64(p.tau))?,
                            _ => raw,
                        }
                    }
                    RouterOverride::PerEdge(map) => {
                        let mut data = Vec::with_capacity(b * targets.len());
                        for _ in 0..b {
                            for &t in &targets {
                                data.push(*map.get(&(s, j, t)).ok_or(
                                    DgError::MissingEdgeWeight {
                                        stage: s,
                                        i: j,
                                        j: t,
                                    },
                                )?);
                            }
                        }
                        tape.constant(Array::new(vec![b, targets.len()], data)?)
                    }
                    RouterOverride::PerSample(mats) => {
                        let stage_mats = &mats[s];
                        let mut data = Vec::with_capacity(b * targets.len());
                        for m in stage_mats.iter().take(b) {
                            for &t in &targets {
                                data.push(m.data()[(t - 1) * n + (j - 1)]);
                            }
                        }
                        tape.constant(Array::new(vec![b, targets.len()], data)?)
                    }
                };
                buf.write_outgoing(tape, j, weights, &targets)?;
            }
            feats[j] = Some(x);
        }
        stage_input = feats[n].expect("output node computed");
        buffers.push(buf);
    }
    let logits = classifier(tape, bound, stage_input)?;
    Ok(DynamicOutput { logits, buffers })
}

fn classifier<E: Element>(
    tape: &mut Tape<E>,
    bound: &Bound,
    features: TensorId,
) -> Result<TensorId> {
    let pooled = tape.global_avg_pool(features)?;
    tape.fully_connected(pooled, bound.head_weight, bound.head_bias)
}

/// Dispatches the forward pass for the network's connectivity mode.
pub fn forward_auto<E: Element>(
    net: &Network<E>,
    tape: &mut Tape<E>,
    bound: &Bound,
    batch: TensorId,
    threshold: Option<&ThresholdPolicy>,
) -> Result<(TensorId, Option<Vec<AdjacencyBuffer>>)> {
    match net.mode {
        ConnectivityMode::Baseline => {
            let logits = static_forward(net, tape, bound, batch, &StaticWeights::AllOnes)?;
            Ok((logits, None))
        }
        ConnectivityMode::StaticAlpha => {
            let logits = static_forward(net, tape, bound, batch, &StaticWeights::Learned)?;
            Ok((logits, None))
        }
        ConnectivityMode::Dynamic => {
            let out =
                dynamic_forward_with(net, tape, bound, batch, threshold, &RouterOverride::None)?;
            Ok((out.logits, Some(out.buffers)))
        }
    }
}

// ── pruning ─────────────────────────────────────────────────────────────

/// Per-sample active sub-graph for one stage after thresholding, dead-node
/// cascade and liveness repair.
#[derive(Clone, Debug)]
pub struct PrunePlan<E> {
    /// `alive[j-1]` = node j survives.
    pub alive: Vec<bool>,
    pub live_edges: BTreeSet<(usize, usize)>,
    /// `[N,N]` masked weight matrix: snapshot values on live edges, zero
    /// elsewhere. Executing the full graph with these weights equals
    /// executing only the live sub-graph.
    pub weights: Array<E>,
    /// Edges restored by liveness repair (kept despite weights below tau).
    pub repaired: Vec<(usize, usize)>,
}

/// Applies the threshold gate to one sample's adjacency snapshot and works
/// out which nodes stay live. Closing all input or output edges of a node
/// removes it and the removal cascades; if that would disconnect the output
/// node, the maximum-weight incoming edge is restored walking backwards
/// until the chain meets an input-connected node.
pub fn prune_for_inference<E: Element>(
    graph: &StageGraph,
    snapshot: &Array<E>,
    policy: &ThresholdPolicy,
) -> PrunePlan<E> {
    let n = graph.node_count();
    let weight = |i: usize, j: usize| snapshot.data()[(j - 1) * n + (i - 1)];
    let tau = E::from_f64(policy.tau);
    let mut live: BTreeSet<(usize, usize)> = graph
        .edges()
        .filter(|&(i, j)| !policy.is_active() || weight(i, j) >= tau)
        .collect();

    let reachable = |live: &BTreeSet<(usize, usize)>| {
        let mut from_input = vec![false; n + 1];
        from_input[1] = true;
        for j in 2..=n {
            from_input[j] = live.iter().any(|&(i, t)| t == j && from_input[i]);
        }
        from_input
    };

    let mut repaired = Vec::new();
    let mut from_input = reachable(&live);
    let mut cursor = n;
    while !from_input[cursor] {
        let best = graph
            .in_sources(cursor)
            .into_iter()
            .max_by(|&a, &b| {
                weight(a, cursor)
                    .partial_cmp(&weight(b, cursor))
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
            .expect("every non-input node has an incoming edge");
        if live.insert((best, cursor)) {
            repaired.push((best, cursor));
        }
        cursor = best;
        from_input = reachable(&live);
    }

    // Cascaded dead-node removal = bidirectional reachability over the
    // post-threshold edge set.
    let from_input = reachable(&live);
    let mut to_output = vec![false; n + 1];
    to_output[n] = true;
    for i in (1..n).rev() {
        to_output[i] = live.iter().any(|&(s, t)| s == i && to_output[t]);
    }
    let alive: Vec<bool> = (1..=n).map(|v| from_input[v] && to_output[v]).collect();

    let live_edges: BTreeSet<(usize, usize)> = live
        .into_iter()
        .filter(|&(i, j)| alive[i - 1] && alive[j - 1])
        .collect();
    let mut weights = Array::zeros(vec![n, n]);
    for &(i, j) in &live_edges {
        weights.data_mut()[(j - 1) * n + (i - 1)] = weight(i, j);
    }
    PrunePlan {
        alive,
        live_edges,
        weights,
        repaired,
    }
}

/// Prunes every stage of every sample from the buffers of a completed
/// dynamic forward pass. Outer index: stage; inner: sample.
pub fn prune_network<E: Element>(
    net: &Network<E>,
    snapshots: &[Vec<Array<E>>],
    policy: &ThresholdPolicy,
) -> Vec<Vec<PrunePlan<E>>> {
    net.stages
        .iter()
        .zip(snapshots)
        .map(|(stage, mats)| {
            mats.iter()
                .map(|m| prune_for_inference(&stage.graph, m, policy))
                .collect()
        })
        .collect()
}

/// Executes one sample through its pruned per-stage sub-graphs, skipping
/// dead nodes entirely. `sample` must have batch extent 1; `plans` holds
/// one plan per stage.
pub fn forward_pruned<E: Element>(
    net: &Network<E>,
    sample: &Array<E>,
    plans: &[PrunePlan<E>],
) -> Result<Array<E>> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let mut stage_input = tape.constant(sample.clone());
    net.check_batch(&tape, stage_input)?;
    for (s, stage) in net.stages.iter().enumerate() {
        let plan = &plans[s];
        let n = stage.graph.node_count();
        let mut feats: Vec<Option<TensorId>> = vec![None; n + 1];
        for j in 1..=n {
            if !plan.alive[j - 1] {
                continue;
            }
            let agg = if j == 1 {
                stage_input
            } else {
                let mut terms = Vec::new();
                for i in stage.graph.in_sources(j) {
                    if plan.live_edges.contains(&(i, j)) {
                        let w = plan.weights.data()[(j - 1) * n + (i - 1)];
                        terms.push((
                            feats[i].expect("live source computed"),
                            EdgeWeight::Const(w),
                        ));
                    }
                }
                aggregate(&mut tape, terms)?
            };
            feats[j] = Some(node_transform(
                &mut tape,
                &stage.nodes[j - 1],
                &bound.stages[s].nodes[j - 1],
                agg,
            )?);
        }
        stage_input = feats[n].ok_or_else(|| DgError::InvalidArgument {
            op: "forward_pruned",
            msg: format!("stage {s}: output node pruned away"),
        })?;
    }
    let logits = classifier(&mut tape, &bound, stage_input)?;
    Ok(tape.value(logits).clone())
}

// ── cost accounting ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum LayerKind {
    Conv {
        c_in: usize,
        c_out: usize,
        k: usize,
        h_out: usize,
        w_out: usize,
    },
    Linear {
        c_in: usize,
        c_out: usize,
    },
    Router {
        c_in: usize,
        zeta_out: usize,
    },
}

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub kind: LayerKind,
    pub params: u64,
    pub multiadds: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub params: u64,
    pub multiadds_total: u64,
    pub multiadds_router: u64,
    pub layers: Vec<LayerCost>,
}

impl CostReport {
    /// Router multiply-adds as a fraction of the total.
    pub fn router_share(&self) -> f64 {
        if self.multiadds_total == 0 {
            0.0
        } else {
            self.multiadds_router as f64 / self.multiadds_total as f64
        }
    }
}

impl std::fmt::Display for CostReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "params: {}", self.params)?;
        writeln!(f, "multiadds_total: {}", self.multiadds_total)?;
        writeln!(f, "multiadds_router: {}", self.multiadds_router)?;
        writeln!(f, "router_share: {:.6}", self.router_share())?;
        writeln!(f, "layers:")?;
        for l in &self.layers {
            match &l.kind {
                LayerKind::Conv {
                    c_in,
                    c_out,
                    k,
                    h_out,
                    w_out,
                } => writeln!(
                    f,
                    "  {} conv c_in={c_in} c_out={c_out} k={k} out={h_out}x{w_out} params={} multiadds={}",
                    l.name, l.params, l.multiadds
                )?,
                LayerKind::Linear { c_in, c_out } => writeln!(
                    f,
                    "  {} linear c_in={c_in} c_out={c_out} params={} multiadds={}",
                    l.name, l.params, l.multiadds
                )?,
                LayerKind::Router { c_in, zeta_out } => writeln!(
                    f,
                    "  {} router c_in={c_in} zeta_out={zeta_out} params={} multiadds={}",
                    l.name, l.params, l.multiadds
                )?,
            }
        }
        Ok(())
    }
}

/// Parameter and multiply-add accounting. Convolutions cost
/// c_in * c_out * h_out * w_out * k^2, the head costs c_in * c_out, and each
/// router costs c_in * zeta_out; per-edge alpha scalars count as parameters.
pub fn count_cost<E: Element>(net: &Network<E>, input_hw: (usize, usize)) -> CostReport {
    let mut layers = Vec::new();
    let mut router_macs = 0u64;
    let (mut h, mut w) = input_hw;
    let pad = net.arch.kernel_size / 2;
    let k = net.arch.kernel_size;
    let mut alpha_params = 0u64;
    for (s, stage) in net.stages.iter().enumerate() {
        h = (h + 2 * pad).saturating_sub(k) / net.arch.stage_stride + 1;
        w = (w + 2 * pad).saturating_sub(k) / net.arch.stage_stride + 1;
        for (idx, node) in stage.nodes.iter().enumerate() {
            let j = idx + 1;
            if let Some(c) = &node.conv {
                let c_out = c.kernel.shape()[0];
                let c_in = c.kernel.shape()[1];
                let macs = (c_in * c_out * h * w * k * k) as u64;
                layers.push(LayerCost {
                    name: format!("s{s}.n{j}.conv"),
                    kind: LayerKind::Conv {
                        c_in,
                        c_out,
                        k,
                        h_out: h,
                        w_out: w,
                    },
                    params: (c.kernel.numel() + c.bias.numel()) as u64,
                    multiadds: macs,
                });
            }
            if let Some(r) = &node.router {
                let macs = routing::router_multiadds(r.in_channels(), r.out_edges());
                router_macs += macs;
                layers.push(LayerCost {
                    name: format!("s{s}.n{j}.router"),
                    kind: LayerKind::Router {
                        c_in: r.in_channels(),
                        zeta_out: r.out_edges(),
                    },
                    params: (r.weight.numel() + r.bias.numel()) as u64,
                    multiadds: macs,
                });
            }
        }
        alpha_params += stage.alphas.len() as u64;
    }
    let (c_in, c_out) = (net.head.weight.shape()[0], net.head.weight.shape()[1]);
    layers.push(LayerCost {
        name: "head".into(),
        kind: LayerKind::Linear { c_in, c_out },
        params: (net.head.weight.numel() + net.head.bias.numel()) as u64,
        multiadds: (c_in * c_out) as u64,
    });
    let params = layers.iter().map(|l| l.params).sum::<u64>() + alpha_params;
    let multiadds_total = layers.iter().map(|l| l.multiadds).sum();
    CostReport {
        params,
        multiadds_total,
        multiadds_router: router_macs,
        layers,
    }
}
