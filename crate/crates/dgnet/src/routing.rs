//! Per-node routers: squeeze (global average pooling), affine map and
//! sigmoid, emitting one weight per output edge for every sample. Also the
//! threshold policy that converts soft weights into pruned connectivity at
//! inference.

use serde::{Deserialize, Serialize};

use crate::error::{DgError, Result};
use crate::tensor::{Array, Element, Tape, TensorId};

/// Router parameters for one node: `weight` is `[C, zeta_out]`, `bias` is
/// `[zeta_out]`, where C is the node's output channel count and zeta_out
/// its number of output edges.
#[derive(Clone, Debug)]
pub struct RouterParams<E> {
    pub weight: Array<E>,
    pub bias: Array<E>,
}

impl<E: Element> RouterParams<E> {
    /// Zero-mean Gaussian weights (`std` small) and constant bias. With the
    /// default bias 0 every edge starts near weight 0.5; a positive bias
    /// (e.g. logit of 0.9) mimics a near-static start.
    pub fn init(channels: usize, out_edges: usize, std: f64, bias: f64, rng: &mut impl rand::Rng) -> Self {
        let mut weight = Array::zeros(vec![channels, out_edges]);
        weight.fill_normal(std, rng);
        Self {
            weight,
            bias: Array::full(vec![out_edges], E::from_f64(bias)),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_edges(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Routing weights for bound parameters: `sigmoid(fc(gap(features)))`,
/// shape `[B, zeta_out]`, differentiable into weights, bias and features.
pub fn route<E: Element>(
    tape: &mut Tape<E>,
    features: TensorId,
    weight: TensorId,
    bias: TensorId,
) -> Result<TensorId> {
    let c = tape.value(features).shape().get(1).copied().unwrap_or(0);
    let expect = tape.value(weight).shape()[0];
    if c != expect {
        return Err(DgError::ShapeMismatch {
            op: "route",
            dim: "channels",
            expected: expect,
            got: c,
        });
    }
    let squeezed = tape.global_avg_pool(features)?;
    let pre = tape.fully_connected(squeezed, weight, bias)?;
    tape.sigmoid(pre)
}

/// Convenience wrapper evaluating a router on plain arrays (no gradients).
pub fn route_arrays<E: Element>(
    tape: &mut Tape<E>,
    router: &RouterParams<E>,
    features: TensorId,
) -> Result<TensorId> {
    let w = tape.constant(router.weight.clone());
    let b = tape.constant(router.bias.clone());
    route(tape, features, w, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    Off,
    Fixed,
}

/// Per-node threshold: weights below tau are closed at inference. Training
/// always uses the soft weights (the hard gate has no useful gradient).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    pub mode: ThresholdMode,
    pub tau: f64,
}

impl ThresholdPolicy {
    pub fn off() -> Self {
        Self {
            mode: ThresholdMode::Off,
            tau: 0.0,
        }
    }

    pub fn fixed(tau: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&tau) {
            return Err(DgError::InvalidArgument {
                op: "ThresholdPolicy::fixed",
                msg: format!("tau {tau} outside [0,1)"),
            });
        }
        Ok(Self {
            mode: ThresholdMode::Fixed,
            tau,
        })
    }

    pub fn is_active(&self) -> bool {
        matches!(self.mode, ThresholdMode::Fixed)
    }
}

/// Elementwise gate: weights below tau become 0, all others pass unchanged.
/// Mode `off` is the identity.
pub fn apply_threshold<E: Element>(weights: &Array<E>, policy: &ThresholdPolicy) -> Array<E> {
    match policy.mode {
        ThresholdMode::Off => weights.clone(),
        ThresholdMode::Fixed => {
            let tau = E::from_f64(policy.tau);
            weights.map(|w| if w < tau { E::zero() } else { w })
        }
    }
}

/// Evaluates the joint router (one affine map over all output edges) and
/// the equivalent per-edge split routers on the same features; returns the
/// maximum absolute deviation between the two forms.
pub fn split_equivalence_check<E: Element>(
    router: &RouterParams<E>,
    features: &Array<E>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(features.clone());
    let joint = route_arrays(&mut tape, router, x)?;
    let joint_out = tape.value(joint).clone();

    let (c, zeta) = (router.in_channels(), router.out_edges());
    let batch = features.shape()[0];
    let mut worst: f64 = 0.0;
    for e in 0..zeta {
        let col: Vec<E> = (0..c).map(|ci| router.weight.data()[ci * zeta + e]).collect();
        let split = RouterParams {
            weight: Array::new(vec![c, 1], col)?,
            bias: Array::new(vec![1], vec![router.bias.data()[e]])?,
        };
        let out = route_arrays(&mut tape, &split, x)?;
        for b in 0..batch {
            let d = (tape.value(out).data()[b].as_f64() - joint_out.data()[b * zeta + e].as_f64()).abs();
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Multiply-accumulate count of one router evaluation (the affine map over
/// the squeezed feature vector).
pub fn router_multiadds(c_in: usize, zeta_out: usize) -> u64 {
    c_in as u64 * zeta_out as u64
}
