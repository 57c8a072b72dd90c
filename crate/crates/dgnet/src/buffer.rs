//! Batched adjacency-matrix buffer.
//!
//! One buffer belongs to one forward pass of one stage. Cell `[b, j, i]`
//! (0-based storage, 1-based node API) holds the weight of edge i→j for
//! sample b, so rows carry a node's input-edge weights and columns its
//! output-edge weights. Producers write their column after transforming,
//! consumers read their row before aggregating, and the whole store lives
//! on the tape: gradients of the loss flow back through the stored weights
//! into the routers that produced them.

use crate::error::{DgError, Result};
use crate::tensor::{Array, Element, Tape, TensorId};

/// Fill-state tracking is a debug aid; protocol violations are programming
/// errors, so benchmark paths construct the buffer unchecked.
pub struct AdjacencyBuffer {
    current: TensorId,
    batch: usize,
    n: usize,
    checks: bool,
    wrote: Vec<bool>,  // node i completed write_outgoing (1-based)
    filled: Vec<bool>, // per (target, source) cell, 0-based
}

impl AdjacencyBuffer {
    /// Zero-initialised `[B, N, N]` store with nothing marked filled.
    pub fn new<E: Element>(tape: &mut Tape<E>, batch: usize, n: usize) -> Result<Self> {
        Self::with_checks(tape, batch, n, true)
    }

    pub fn with_checks<E: Element>(
        tape: &mut Tape<E>,
        batch: usize,
        n: usize,
        checks: bool,
    ) -> Result<Self> {
        if batch < 1 || n < 1 {
            return Err(DgError::InvalidArgument {
                op: "AdjacencyBuffer::new",
                msg: format!("batch {batch} and node count {n} must be >= 1"),
            });
        }
        let current = tape.constant(Array::zeros(vec![batch, n, n]));
        Ok(Self {
            current,
            batch,
            n,
            checks,
            wrote: vec![false; n + 1],
            filled: vec![false; n * n],
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn node_count(&self) -> usize {
        self.n
    }

    /// Current tape tensor holding the `[B, N, N]` store.
    pub fn tensor(&self) -> TensorId {
        self.current
    }

    /// Stores node `i`'s routing weights into column i: for each sample b
    /// and target j, cell `[b, j, i]` receives the matching weight. An empty
    /// target list is a no-op that still marks node i complete.
    pub fn write_outgoing<E: Element>(
        &mut self,
        tape: &mut Tape<E>,
        node_i: usize,
        weights: TensorId,
        targets: &[usize],
    ) -> Result<()> {
        if node_i < 1 || node_i > self.n {
            return Err(DgError::InvalidArgument {
                op: "write_outgoing",
                msg: format!("node {node_i} out of range for N={}", self.n),
            });
        }
        for &t in targets {
            if t <= node_i {
                return Err(DgError::BufferOrderViolation {
                    from_node: node_i,
                    to_node: t,
                });
            }
            if t > self.n {
                return Err(DgError::InvalidArgument {
                    op: "write_outgoing",
                    msg: format!("target {t} out of range for N={}", self.n),
                });
            }
        }
        if self.checks {
            for &t in targets {
                if self.filled[(t - 1) * self.n + (node_i - 1)] {
                    return Err(DgError::BufferDoubleWrite {
                        from_node: node_i,
                        to_node: t,
                    });
                }
            }
        }
        if !targets.is_empty() {
            let ws = tape.value(weights).shape();
            if ws != [self.batch, targets.len()] {
                return Err(DgError::ShapeMismatch {
                    op: "write_outgoing",
                    dim: "weights",
                    expected: self.batch * targets.len(),
                    got: tape.value(weights).numel(),
                });
            }
            let rows: Vec<usize> = targets.iter().map(|&t| t - 1).collect();
            self.current = tape.col_write(self.current, node_i - 1, &rows, weights)?;
            for &t in targets {
                self.filled[(t - 1) * self.n + (node_i - 1)] = true;
            }
        }
        self.wrote[node_i] = true;
        Ok(())
    }

    /// Marks a node with no outgoing edges as complete so later row reads
    /// are not blocked on it.
    pub fn mark_complete(&mut self, node_i: usize) {
        if node_i >= 1 && node_i <= self.n {
            self.wrote[node_i] = true;
        }
    }

    /// Row slice `[B, j-1]` of node j's input-edge weights; positions with
    /// no edge hold zero. Requires every node i < j to have completed its
    /// writes first.
    pub fn read_incoming<E: Element>(&self, tape: &mut Tape<E>, node_j: usize) -> Result<TensorId> {
        if node_j < 1 || node_j > self.n {
            return Err(DgError::InvalidArgument {
                op: "read_incoming",
                msg: format!("node {node_j} out of range for N={}", self.n),
            });
        }
        if self.checks {
            if let Some(missing) = (1..node_j).find(|&i| !self.wrote[i]) {
                return Err(DgError::BufferReadBeforeWrite {
                    node: node_j,
                    missing_source: missing,
                });
            }
        }
        tape.row_slice(self.current, node_j - 1, node_j - 1)
    }

    /// Detached `[N, N]` copy of sample b's adjacency matrix.
    pub fn snapshot<E: Element>(&self, tape: &Tape<E>, sample: usize) -> Result<Array<E>> {
        if sample >= self.batch {
            return Err(DgError::InvalidArgument {
                op: "snapshot",
                msg: format!("sample {sample} out of range for batch {}", self.batch),
            });
        }
        Ok(tape.value(self.current).slice_first(sample))
    }

    pub fn snapshot_all<E: Element>(&self, tape: &Tape<E>) -> Vec<Array<E>> {
        (0..self.batch)
            .map(|b| tape.value(self.current).slice_first(b))
            .collect()
    }
}
