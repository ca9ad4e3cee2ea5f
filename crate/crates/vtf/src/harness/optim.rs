//! Bias-corrected Adam over a [`ParamStore`], plus dynamic loss scaling.
//!
//! The optimizer state (first/second moments and the step counter) persists
//! to disk in the same binary tensor format as parameters, so an interrupted
//! run resumes with bit-identical updates.

use crate::blocks::ParamStore;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::{ArrayD, Zip};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

/// Adam hyperparameters. `eps` sits outside the square root (PyTorch
/// convention), and both moments are bias-corrected.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        }
    }

    /// Applies one update. `grads` must be in the store's registration order
    /// (as produced by [`crate::blocks::collect_grads`]). Moment updates and
    /// the parameter step are computed in f64 and cast back, so f32 training
    /// is deterministic and unaffected by accumulation order.
    pub fn step<S: Scalar>(
        &self,
        store: &mut ParamStore<S>,
        state: &mut AdamState<S>,
        grads: &[ArrayD<S>],
    ) -> Result<()> {
        if grads.len() != store.len() || state.m.len() != store.len() {
            return Err(Error::InvalidArgument {
                context: "Adam::step",
                message: format!(
                    "expected {} gradient tensors, got {} (state has {})",
                    store.len(),
                    grads.len(),
                    state.m.len()
                ),
            });
        }
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for i in 0..grads.len() {
            if grads[i].shape() != store.array(i).shape() {
                return Err(Error::ShapeMismatch {
                    context: "Adam::step",
                    expected: format!("{:?} for {}", store.array(i).shape(), store.name(i)),
                    got: format!("{:?}", grads[i].shape()),
                });
            }
            Zip::from(store.array_mut(i))
                .and(&mut state.m[i])
                .and(&mut state.v[i])
                .and(&grads[i])
                .for_each(|p, m, v, &g| {
                    let gf = g.to_f64();
                    let mf = self.beta1 * m.to_f64() + (1.0 - self.beta1) * gf;
                    let vf = self.beta2 * v.to_f64() + (1.0 - self.beta2) * gf * gf;
                    *m = S::from_f64(mf);
                    *v = S::from_f64(vf);
                    let update = self.lr * (mf / bc1) / ((vf / bc2).sqrt() + self.eps);
                    *p = S::from_f64(p.to_f64() - update);
                });
        }
        Ok(())
    }
}

/// First/second moment estimates, parallel to a store's registration order.
#[derive(Debug, Clone)]
pub struct AdamState<S: Scalar> {
    m: Vec<ArrayD<S>>,
    v: Vec<ArrayD<S>>,
    t: u64,
}

const ADAM_MAGIC: &[u8; 8] = b"VTADAM01";

impl<S: Scalar> AdamState<S> {
    pub fn new(store: &ParamStore<S>) -> Self {
        let zeros: Vec<ArrayD<S>> = (0..store.len())
            .map(|i| ArrayD::zeros(store.array(i).raw_dim()))
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Number of applied updates (skipped steps do not advance it).
    pub fn updates(&self) -> u64 {
        self.t
    }

    /// Writes the moments (named `m.*` / `v.*` after the parameters they
    /// track) and the update counter.
    pub fn save(&self, path: &Path, params: &ParamStore<S>) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(f);
        let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);
        w.write_all(ADAM_MAGIC).map_err(io_err)?;
        w.write_all(&self.t.to_le_bytes()).map_err(io_err)?;
        let mut combined = ParamStore::<S>::new();
        for i in 0..params.len() {
            combined.register(format!("m.{}", params.name(i)), self.m[i].clone());
            combined.register(format!("v.{}", params.name(i)), self.v[i].clone());
        }
        combined.save_writer(&mut w).map_err(io_err)
    }

    /// Reads a state saved for the same parameter set; names and shapes must
    /// match exactly.
    pub fn load(path: &Path, params: &ParamStore<S>) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = BufReader::new(f);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|e| Error::Checkpoint(format!("truncated optimizer file: {e}")))?;
        if &magic != ADAM_MAGIC {
            return Err(Error::Checkpoint("bad optimizer file magic".into()));
        }
        let mut tb = [0u8; 8];
        r.read_exact(&mut tb)
            .map_err(|e| Error::Checkpoint(format!("truncated optimizer file: {e}")))?;
        let t = u64::from_le_bytes(tb);
        let combined = ParamStore::<S>::load_reader(&mut r)?;
        let mut m = Vec::with_capacity(params.len());
        let mut v = Vec::with_capacity(params.len());
        for i in 0..params.len() {
            let name = params.name(i);
            for (prefix, dst) in [("m", &mut m), ("v", &mut v)] {
                let key = format!("{prefix}.{name}");
                let id = combined.find(&key).ok_or_else(|| {
                    Error::Checkpoint(format!("optimizer state is missing {key}"))
                })?;
                let arr = combined.get(id);
                if arr.shape() != params.array(i).shape() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer moment {key} has shape {:?}, parameter has {:?}",
                        arr.shape(),
                        params.array(i).shape()
                    )));
                }
                dst.push(arr.clone());
            }
        }
        Ok(AdamState { m, v, t })
    }

    #[cfg(test)]
    fn moment(&self, id: crate::blocks::ParamId) -> (&ArrayD<S>, &ArrayD<S>) {
        (&self.m[id.0], &self.v[id.0])
    }
}

// ---------------------------------------------------------------------------
// Dynamic loss scaling

/// Initial multiplier when scaling is enabled.
pub const SCALE_INIT: f64 = 65536.0;
/// Doubles the scale after this many consecutive finite-gradient steps.
pub const SCALE_GROWTH_INTERVAL: usize = 50;
/// Scale ceiling and floor.
pub const SCALE_MAX: f64 = 1048576.0;
pub const SCALE_MIN: f64 = 1.0;

/// Serializable scaler state for checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ScalerState {
    pub scale: f64,
    pub consecutive_good: usize,
}

/// Dynamic loss scaling for reduced-precision training: the loss is
/// multiplied by `scale()` before backprop, gradients are divided by it after.
/// On overflow (non-finite gradients) the step is skipped and the scale
/// halves; after [`SCALE_GROWTH_INTERVAL`] clean steps it doubles.
///
/// When disabled the scale is fixed at 1 and overflow handling is left to the
/// caller (which should fail instead of skipping).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossScaler {
    scale: f64,
    consecutive_good: usize,
    enabled: bool,
}

impl LossScaler {
    pub fn new(enabled: bool) -> Self {
        LossScaler {
            scale: if enabled { SCALE_INIT } else { 1.0 },
            consecutive_good: 0,
            enabled,
        }
    }

    pub fn enabled(&self) -> bool {
        self.enabled
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// Records the outcome of a step's gradient check.
    pub fn observe(&mut self, finite: bool) {
        if !self.enabled {
            return;
        }
        if finite {
            self.consecutive_good += 1;
            if self.consecutive_good >= SCALE_GROWTH_INTERVAL {
                self.scale = (self.scale * 2.0).min(SCALE_MAX);
                self.consecutive_good = 0;
            }
        } else {
            self.scale = (self.scale * 0.5).max(SCALE_MIN);
            self.consecutive_good = 0;
        }
    }

    pub fn state(&self) -> ScalerState {
        ScalerState {
            scale: self.scale,
            consecutive_good: self.consecutive_good,
        }
    }

    pub fn restore(&mut self, state: ScalerState) {
        self.scale = state.scale;
        self.consecutive_good = state.consecutive_good;
    }
}

/// Divides every gradient by `scale` in place and reports whether all entries
/// are finite afterwards.
pub fn unscale_grads<S: Scalar>(grads: &mut [ArrayD<S>], scale: f64) -> bool {
    let inv = S::from_f64(1.0 / scale);
    let mut finite = true;
    for g in grads.iter_mut() {
        g.mapv_inplace(|x| x * inv);
        if !g.iter().all(|&x| x.to_f64().is_finite()) {
            finite = false;
        }
    }
    finite
}
