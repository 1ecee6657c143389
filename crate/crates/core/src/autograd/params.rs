use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Tape, Var};
use crate::error::{HdError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Convolution kernel; the only kind that takes weight decay.
    Weight,
    Bias,
    BnScale,
    BnShift,
    /// Batch-norm running statistics: state, not trainable.
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub tensor: Tensor,
}

/// Owns every parameter and buffer of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            kind,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Kaiming-uniform style init (bound `1/sqrt(fan_in)`), as in common
    /// convolution layers.
    pub fn add_conv_weight(
        &mut self,
        name: impl Into<String>,
        shape: [usize; 4],
        rng: &mut impl Rng,
    ) -> ParamId {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = 1.0 / fan_in.sqrt();
        self.add(
            name,
            ParamKind::Weight,
            Tensor::uniform(shape.to_vec(), -bound, bound, rng),
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn trainable_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(i, _)| ParamId(i))
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind.trainable())
            .map(|e| e.tensor.numel())
            .sum()
    }

    /// Replace all tensors from `other`, which must have identical layout.
    pub fn load_from(&mut self, other: &[ParamEntry]) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(HdError::Checkpoint(format!(
                "parameter count mismatch: file has {}, model has {}",
                other.len(),
                self.entries.len()
            )));
        }
        for (mine, theirs) in self.entries.iter_mut().zip(other) {
            if mine.name != theirs.name || mine.tensor.shape() != theirs.tensor.shape() {
                return Err(HdError::Checkpoint(format!(
                    "parameter `{}` {:?} does not match `{}` {:?}",
                    theirs.name,
                    theirs.tensor.shape(),
                    mine.name,
                    mine.tensor.shape()
                )));
            }
            mine.tensor = theirs.tensor.clone();
        }
        Ok(())
    }

    /// Set every parameter and buffer to zero.
    pub fn zero_all(&mut self) {
        for e in &mut self.entries {
            e.tensor.data_mut().fill(0.0);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; running statistics are updated.
    Train,
    /// Frozen running statistics.
    Eval,
}

/// One forward pass: the tape plus read-only access to parameters.
pub struct Ctx<'a> {
    pub tape: Tape,
    params: &'a ParamStore,
    param_vars: HashMap<ParamId, Var>,
    mode: Mode,
    stat_updates: Vec<(ParamId, Tensor)>,
    track_stats: bool,
}

impl<'a> Ctx<'a> {
    pub fn new(params: &'a ParamStore, mode: Mode) -> Self {
        Self {
            tape: Tape::new(),
            params,
            param_vars: HashMap::new(),
            mode,
            stat_updates: Vec::new(),
            track_stats: true,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn params(&self) -> &ParamStore {
        self.params
    }

    /// Disable running-statistic bookkeeping (gradient checks re-run the same
    /// forward many times).
    pub fn without_stat_tracking(mut self) -> Self {
        self.track_stats = false;
        self
    }

    /// Tape variable of parameter `id`, created once per pass.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let entry = self.params.entry(id);
        let v = self
            .tape
            .param_leaf(id, entry.tensor.clone(), entry.kind.trainable());
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    pub(crate) fn record_stat(&mut self, id: ParamId, value: Tensor) {
        if self.track_stats {
            self.stat_updates.push((id, value));
        }
    }

    /// Running-statistic updates produced by a training-mode pass.
    pub fn take_stat_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Abort with the layer name if `v` holds NaN or infinity.
    pub fn ensure_finite(&self, layer: &str, v: Var) -> Result<()> {
        if self.tape.value(v).all_finite() {
            Ok(())
        } else {
            Err(HdError::NonFinite(layer.to_string()))
        }
    }
}
