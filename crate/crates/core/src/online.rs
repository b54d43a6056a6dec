//! Online adaptation of weights and/or parametric bias over a sliding
//! window of recent samples.

use std::collections::VecDeque;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::modality::MaskVector;
use crate::model::{GeMuCoModel, ParametricBias};
use crate::trainer::{
    batch_gradient, mask_pool, MaskSource, ModelStepper, OptimizerKind, Prepared, Sample,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OnlineMode {
    POnly,
    WOnly,
    Both,
}

impl OnlineMode {
    fn updates_weights(self) -> bool {
        matches!(self, OnlineMode::WOnly | OnlineMode::Both)
    }

    fn updates_pb(self) -> bool {
        matches!(self, OnlineMode::POnly | OnlineMode::Both)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OnlineConfig {
    pub mode: OnlineMode,
    pub buffer_capacity: usize,
    /// Updates start once the buffer holds this many samples.
    pub min_start: usize,
    pub steps_per_datum: usize,
    pub weight_lr: f64,
    pub pb_lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for OnlineConfig {
    fn default() -> Self {
        Self {
            mode: OnlineMode::POnly,
            buffer_capacity: 100,
            min_start: 20,
            steps_per_datum: 1,
            weight_lr: 1e-3,
            pb_lr: 1e-2,
            optimizer: OptimizerKind::Sgd,
            seed: 0,
        }
    }
}

impl OnlineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_start == 0 || self.min_start > self.buffer_capacity {
            return Err(Error::InvalidConfig(format!(
                "need 0 < min_start <= buffer_capacity, got {} and {}",
                self.min_start, self.buffer_capacity
            )));
        }
        for (name, lr) in [("weight_lr", self.weight_lr), ("pb_lr", self.pb_lr)] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }
}

/// Bounded FIFO window; the oldest sample is evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineBuffer {
    samples: VecDeque<Sample>,
    capacity: usize,
}

impl OnlineBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            samples: VecDeque::with_capacity(capacity),
            capacity,
        }
    }

    /// Appends a sample and returns the evicted one, if any.
    pub fn push(&mut self, s: Sample) -> Option<Sample> {
        if self.capacity == 0 {
            return Some(s);
        }
        let evicted = if self.samples.len() == self.capacity {
            self.samples.pop_front()
        } else {
            None
        };
        self.samples.push_back(s);
        evicted
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Sample> {
        self.samples.iter()
    }

    pub fn clear(&mut self) {
        self.samples.clear();
    }
}

/// Synthetic samples for known constraints, added to every update batch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub samples: Vec<Sample>,
}

/// One round of `steps_per_datum` gradient steps over buffer and
/// constraints. Returns the mean masked loss before the last step, or
/// `None` when the buffer is below `min_start`.
pub fn update(
    model: &mut GeMuCoModel,
    pb: &mut ParametricBias,
    buffer: &OnlineBuffer,
    constraints: &ConstraintSet,
    cfg: &OnlineConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<f64>> {
    let mut stepper = ModelStepper::new(cfg.optimizer, model, 1);
    update_with(model, pb, buffer, constraints, cfg, rng, &mut stepper)
}

fn update_with(
    model: &mut GeMuCoModel,
    pb: &mut ParametricBias,
    buffer: &OnlineBuffer,
    constraints: &ConstraintSet,
    cfg: &OnlineConfig,
    rng: &mut ChaCha8Rng,
    stepper: &mut ModelStepper,
) -> Result<Option<f64>> {
    cfg.validate()?;
    check_len("parametric bias", model.pb_dim, pb.dim())?;
    if buffer.len() < cfg.min_start {
        log::debug!(
            "online buffer holds {} < {} samples, skipping update",
            buffer.len(),
            cfg.min_start
        );
        return Ok(None);
    }
    let pool = mask_pool(model, MaskSource::Feasible)?;
    let mut items: Vec<(Prepared, Vec<usize>)> = Vec::new();
    for s in buffer.iter().chain(&constraints.samples) {
        let p = Prepared::new(model, s, 0)?;
        let ok: Vec<usize> = (0..pool.len()).filter(|&i| p.admits(&pool[i])).collect();
        if !ok.is_empty() {
            items.push((p, ok));
        }
    }
    if items.is_empty() {
        return Err(Error::Empty(
            "no sample in the window admits a feasible mask".into(),
        ));
    }
    let mut last = 0.0;
    for step in 0..cfg.steps_per_datum {
        let masks: Vec<&MaskVector> = items
            .iter()
            .map(|(_, ok)| &pool[ok[rng.random_range(0..ok.len())]])
            .collect();
        let batch: Vec<(&Prepared, &MaskVector)> =
            items.iter().map(|(p, _)| p).zip(masks).collect();
        let pbs = vec![pb.values.clone()];
        let g = batch_gradient(model, &batch, &pbs);
        if !g.loss_sum.is_finite() {
            return Err(Error::NonFinite {
                iteration: step,
                what: "online loss".into(),
            });
        }
        last = g.loss_sum / batch.len() as f64;
        if cfg.mode.updates_weights() {
            stepper.step_weights(model, &g, cfg.weight_lr);
        }
        if cfg.mode.updates_pb() {
            let mut pbs = pbs;
            stepper.step_pb(&mut pbs, &g, &[true], cfg.pb_lr);
            pb.values = pbs.pop().expect("one state");
        }
    }
    Ok(Some(last))
}

/// Owns a mutable model and the current parametric bias. Readers take
/// immutable snapshots, refreshed after each update.
pub struct OnlineUpdater {
    model: GeMuCoModel,
    pb: ParametricBias,
    cfg: OnlineConfig,
    buffer: OnlineBuffer,
    constraints: ConstraintSet,
    rng: ChaCha8Rng,
    stepper: ModelStepper,
    snapshot: Arc<GeMuCoModel>,
    trajectory: Vec<Vec<f64>>,
    losses: Vec<f64>,
}

impl OnlineUpdater {
    pub fn new(model: GeMuCoModel, pb: ParametricBias, cfg: OnlineConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        check_len("parametric bias", model.pb_dim, pb.dim())?;
        let stepper = ModelStepper::new(cfg.optimizer, &model, 1);
        Ok(Self {
            snapshot: Arc::new(model.clone()),
            buffer: OnlineBuffer::new(cfg.buffer_capacity),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            trajectory: vec![pb.values.clone()],
            losses: Vec::new(),
            constraints: ConstraintSet::default(),
            model,
            pb,
            cfg,
            stepper,
        })
    }

    pub fn with_constraints(mut self, constraints: ConstraintSet) -> Self {
        self.constraints = constraints;
        self
    }

    /// Buffers a sample and runs one update round if the window is full
    /// enough. Returns whether an update happened.
    pub fn observe(&mut self, s: Sample) -> Result<bool> {
        if s.values.len() != self.model.data_layout.total_dim() {
            return Err(Error::Dimension {
                context: "online sample",
                expected: self.model.data_layout.total_dim(),
                got: s.values.len(),
            });
        }
        self.buffer.push(s);
        let r = update_with(
            &mut self.model,
            &mut self.pb,
            &self.buffer,
            &self.constraints,
            &self.cfg,
            &mut self.rng,
            &mut self.stepper,
        )?;
        match r {
            Some(loss) => {
                self.losses.push(loss);
                self.trajectory.push(self.pb.values.clone());
                if self.cfg.mode.updates_weights() {
                    self.snapshot = Arc::new(self.model.clone());
                }
                Ok(true)
            }
            None => Ok(false),
        }
    }

    pub fn snapshot(&self) -> Arc<GeMuCoModel> {
        Arc::clone(&self.snapshot)
    }

    pub fn pb(&self) -> &ParametricBias {
        &self.pb
    }

    /// PB after every update, starting with the initial value.
    pub fn trajectory(&self) -> &[Vec<f64>] {
        &self.trajectory
    }

    /// Window loss seen by each update.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn buffer(&self) -> &OnlineBuffer {
        &self.buffer
    }

    pub fn into_parts(self) -> (GeMuCoModel, ParametricBias) {
        (self.model, self.pb)
    }
}
