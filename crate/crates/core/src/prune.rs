//! Redundancy-driven filter masking.
//!
//! Filters of a convolution layer are flattened to vectors and compared
//! pairwise by cosine similarity; when a pair exceeds the threshold θ the
//! higher-indexed filter is masked. Masking zeroes the corresponding
//! output channel at forward time; channels are not physically removed.
//! Two schedule mechanisms stabilize training: a warm-up of W epochs
//! during which the mask is forced to all-ones, and lazy recomputation
//! every N epochs afterwards.
//!
//! [`simulate_convergence`] provides a synthetic stand-in for training:
//! filters drift toward a small set of prototypes, manufacturing the
//! redundancy that real training produces, so schedule variants can be
//! compared deterministically.

use crate::rng::{seeded_rng, stream_rng};
use crate::tensor::{BankError, FeatureMap, FilterBank};
use ndarray::{Array2, Array4};
use rand::RngExt;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error("mask length {mask} does not match channel count {channels}")]
    ShapeMismatch { mask: usize, channels: usize },
    #[error(
        "epochs must be given in non-decreasing order starting at 1; saw {requested} after {seen:?}"
    )]
    NonMonotoneEpoch { seen: Option<u32>, requested: u32 },
    #[error("theta must lie strictly inside (0, 1), got {0}")]
    ThetaOutOfRange(f64),
    #[error("update interval must be >= 1")]
    ZeroInterval,
}

/// Pairwise cosine similarities between flattened filters.
///
/// Symmetric with unit diagonal (to rounding); entries in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SimMatrix {
    values: Array2<f64>,
}

impl SimMatrix {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }
}

/// Binary keep/drop decision per output channel. At least bit 0 is always
/// set: only higher-indexed filters can be masked.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PruneMask {
    bits: Vec<bool>,
}

impl PruneMask {
    pub fn all_ones(len: usize) -> Self {
        PruneMask {
            bits: vec![true; len],
        }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn active(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }
}

/// Percentage of masked channels.
pub fn sparsity(mask: &PruneMask) -> f64 {
    let zeros = mask.len() - mask.active();
    100.0 * zeros as f64 / mask.len() as f64
}

/// Flatten each filter to a row, row-major over (C_in, k, k).
///
/// The order is fixed because serialization depends on it, even though
/// cosine similarity itself does not.
pub fn flatten_filters(bank: &FilterBank) -> Array2<f64> {
    let (c_out, c_in, k, _) = bank.dim();
    let flat: Vec<f64> = bank
        .weights()
        .as_standard_layout()
        .iter()
        .copied()
        .collect();
    Array2::from_shape_vec((c_out, c_in * k * k), flat).expect("size is conserved")
}

/// Inverse of [`flatten_filters`].
pub fn unflatten_filters(
    rows: &Array2<f64>,
    c_in: usize,
    k: usize,
) -> Result<FilterBank, BankError> {
    let c_out = rows.nrows();
    let flat: Vec<f64> = rows.as_standard_layout().iter().copied().collect();
    let arr = Array4::from_shape_vec((c_out, c_in, k, k), flat)
        .map_err(|_| BankError::EmptyDim([c_out, c_in, k, k]))?;
    FilterBank::new(arr)
}

/// Cosine similarity matrix of the bank's flattened filters.
pub fn cosine_similarity_matrix(bank: &FilterBank) -> SimMatrix {
    let rows = flatten_filters(bank);
    let n = rows.nrows();
    let norms: Vec<f64> = rows.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        for j in i..n {
            let s = rows.row(i).dot(&rows.row(j)) / (norms[i] * norms[j]);
            values[[i, j]] = s;
            values[[j, i]] = s;
        }
    }
    SimMatrix { values }
}

/// What a pair above threshold does when the lower-indexed filter has
/// already been masked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskRule {
    /// Only still-active filters mask later ones; pairs whose first
    /// member is already masked are skipped. Prevents transitive chains
    /// from over-pruning.
    #[default]
    SurvivorOnly,
    /// Mask filter j whenever S_ij > θ, regardless of filter i's state.
    Unconditional,
}

/// Scan the upper triangle in row-major order and mask filter `j` of any
/// pair with `S_ij > theta` (strict), under the default survivor rule.
pub fn derive_mask(sim: &SimMatrix, theta: f64) -> PruneMask {
    derive_mask_with(sim, theta, MaskRule::SurvivorOnly)
}

pub fn derive_mask_with(sim: &SimMatrix, theta: f64, rule: MaskRule) -> PruneMask {
    let n = sim.len();
    let mut bits = vec![true; n];
    for i in 0..n {
        if rule == MaskRule::SurvivorOnly && !bits[i] {
            continue;
        }
        for (j, bit) in bits.iter_mut().enumerate().skip(i + 1) {
            if *bit && sim.values[[i, j]] > theta {
                *bit = false;
            }
        }
    }
    PruneMask { bits }
}

/// Zero the masked channels of a feature map; kept channels pass through
/// bitwise unchanged.
pub fn apply_mask(x: &FeatureMap, mask: &PruneMask) -> Result<FeatureMap, PruneError> {
    let (_, c, _, _) = x.dim();
    if c != mask.len() {
        return Err(PruneError::ShapeMismatch {
            mask: mask.len(),
            channels: c,
        });
    }
    let mut out = x.data().clone();
    for (ch, keep) in mask.bits.iter().enumerate() {
        if !keep {
            out.index_axis_mut(ndarray::Axis(1), ch).fill(0.0);
        }
    }
    Ok(FeatureMap::new(out).expect("input dims already validated"))
}

/// Threshold and timing of mask recomputation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PruneSchedule {
    pub theta: f64,
    /// Epochs (1-indexed, inclusive) during which the mask stays all-ones.
    pub warmup_epochs: u32,
    /// Recompute the mask every `interval` epochs after warm-up.
    pub interval: u32,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        PruneSchedule {
            theta: 0.85,
            warmup_epochs: 10,
            interval: 5,
        }
    }
}

impl PruneSchedule {
    fn validate(&self) -> Result<(), PruneError> {
        if !(self.theta > 0.0 && self.theta < 1.0) {
            return Err(PruneError::ThetaOutOfRange(self.theta));
        }
        if self.interval == 0 {
            return Err(PruneError::ZeroInterval);
        }
        Ok(())
    }

    /// Whether the mask is recomputed at `epoch` under this schedule.
    pub fn recomputes_at(&self, epoch: u32) -> bool {
        epoch > self.warmup_epochs && (epoch - self.warmup_epochs).is_multiple_of(self.interval)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    /// Still inside warm-up; mask forced to all-ones.
    Warmup,
    /// Off-cycle epoch; previous mask retained.
    Kept,
    /// Mask recomputed from the bank at this epoch.
    Recomputed,
}

/// Mask plus schedule bookkeeping, advanced once per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneState {
    schedule: PruneSchedule,
    rule: MaskRule,
    mask: PruneMask,
    last_update_epoch: Option<u32>,
    last_seen_epoch: Option<u32>,
}

impl PruneState {
    pub fn new(n_filters: usize, schedule: PruneSchedule) -> Result<Self, PruneError> {
        schedule.validate()?;
        Ok(PruneState {
            schedule,
            rule: MaskRule::SurvivorOnly,
            mask: PruneMask::all_ones(n_filters),
            last_update_epoch: None,
            last_seen_epoch: None,
        })
    }

    pub fn with_rule(mut self, rule: MaskRule) -> Self {
        self.rule = rule;
        self
    }

    pub fn mask(&self) -> &PruneMask {
        &self.mask
    }

    pub fn schedule(&self) -> &PruneSchedule {
        &self.schedule
    }

    pub fn last_update_epoch(&self) -> Option<u32> {
        self.last_update_epoch
    }

    /// Advance to `epoch` (1-indexed, non-decreasing across calls).
    ///
    /// Inside warm-up the mask is all-ones. Afterwards it is recomputed
    /// whenever `(epoch - warmup) % interval == 0` and retained otherwise.
    pub fn schedule_step(
        &mut self,
        epoch: u32,
        bank: &FilterBank,
    ) -> Result<StepOutcome, PruneError> {
        if epoch < 1 || self.last_seen_epoch.is_some_and(|seen| epoch < seen) {
            return Err(PruneError::NonMonotoneEpoch {
                seen: self.last_seen_epoch,
                requested: epoch,
            });
        }
        if bank.c_out() != self.mask.len() {
            return Err(PruneError::ShapeMismatch {
                mask: self.mask.len(),
                channels: bank.c_out(),
            });
        }
        self.last_seen_epoch = Some(epoch);
        if epoch <= self.schedule.warmup_epochs {
            self.mask = PruneMask::all_ones(self.mask.len());
            return Ok(StepOutcome::Warmup);
        }
        if self.schedule.recomputes_at(epoch) {
            let sim = cosine_similarity_matrix(bank);
            self.mask = derive_mask_with(&sim, self.schedule.theta, self.rule);
            self.last_update_epoch = Some(epoch);
            Ok(StepOutcome::Recomputed)
        } else {
            Ok(StepOutcome::Kept)
        }
    }
}

/// Bank with iid standard-normal entries.
pub fn random_bank(c_out: usize, c_in: usize, k: usize, seed: u64) -> FilterBank {
    let mut rng = seeded_rng(seed);
    let arr = Array4::from_shape_fn((c_out, c_in, k, k), |_| rng.sample(StandardNormal));
    FilterBank::new(arr).expect("continuous draws produce no zero filter")
}

/// Bank whose filters come in exact duplicate pairs: filter 2i+1 copies
/// filter 2i. Used to pin fully-redundant behavior.
pub fn duplicated_pair_bank(c_out: usize, c_in: usize, k: usize, seed: u64) -> FilterBank {
    assert!(
        c_out.is_multiple_of(2),
        "pair bank needs an even channel count"
    );
    let mut rng = seeded_rng(seed);
    let mut arr = Array4::zeros((c_out, c_in, k, k));
    for pair in 0..c_out / 2 {
        let filter: Vec<f64> = (0..c_in * k * k)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        for copy in 0..2 {
            let mut view = arr.index_axis_mut(ndarray::Axis(0), 2 * pair + copy);
            for (slot, v) in view.iter_mut().zip(&filter) {
                *slot = *v;
            }
        }
    }
    FilterBank::new(arr).expect("continuous draws produce no zero filter")
}

/// Synthetic training stand-in: filters interpolate from a random start
/// toward a small set of prototypes, with jitter that fades as the drift
/// completes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriftSpec {
    pub n_filters: usize,
    pub c_in: usize,
    pub kernel: usize,
    /// Number of prototype clusters the filters collapse onto.
    pub n_prototypes: usize,
    /// Progress toward the prototypes per epoch; the bank is frozen once
    /// `rate * epoch >= 1`. Zero means the filters never converge.
    pub rate: f64,
    /// Scale of per-epoch jitter, multiplied by the remaining distance.
    pub noise: f64,
    pub epochs: u32,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            n_filters: 64,
            c_in: 16,
            kernel: 3,
            n_prototypes: 16,
            rate: 1.0 / 15.0,
            noise: 0.05,
            epochs: 50,
        }
    }
}

/// Per-epoch sparsity under one schedule, plus the epochs at which the
/// mask was actually recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityTrace {
    /// Sparsity percentage after each epoch, index `epoch - 1`.
    pub per_epoch: Vec<f64>,
    pub update_epochs: Vec<u32>,
}

impl SparsityTrace {
    pub fn at_epoch(&self, epoch: u32) -> f64 {
        self.per_epoch[(epoch - 1) as usize]
    }

    pub fn terminal(&self) -> f64 {
        *self.per_epoch.last().expect("at least one epoch simulated")
    }

    pub fn recompute_count(&self) -> usize {
        self.update_epochs.len()
    }
}

/// The drifting bank at a given epoch. Pure in (spec, seed, epoch), so
/// every schedule sees the identical weight sequence.
pub fn drift_bank_at(spec: &DriftSpec, seed: u64, epoch: u32) -> FilterBank {
    let dims = (spec.n_filters, spec.c_in, spec.kernel, spec.kernel);
    let mut base_rng = stream_rng(seed, 0);
    let base = Array4::from_shape_fn(dims, |_| base_rng.sample::<f64, _>(StandardNormal));
    let mut proto_rng = stream_rng(seed, 1);
    let protos = Array4::from_shape_fn(
        (spec.n_prototypes, spec.c_in, spec.kernel, spec.kernel),
        |_| proto_rng.sample::<f64, _>(StandardNormal),
    );

    let progress = (spec.rate * epoch as f64).min(1.0);
    let remaining = 1.0 - progress;
    let mut noise_rng = stream_rng(seed, 1000 + epoch as u64);
    let arr = Array4::from_shape_fn(dims, |(f, c, i, j)| {
        let jitter: f64 = noise_rng.sample(StandardNormal);
        remaining * base[[f, c, i, j]]
            + progress * protos[[f % spec.n_prototypes, c, i, j]]
            + spec.noise * remaining * jitter
    });
    FilterBank::new(arr).expect("continuous draws produce no zero filter")
}

/// Run the drifting bank through the schedule and record sparsity per
/// epoch.
pub fn simulate_convergence(
    spec: &DriftSpec,
    schedule: PruneSchedule,
    seed: u64,
) -> Result<SparsityTrace, PruneError> {
    let mut state = PruneState::new(spec.n_filters, schedule)?;
    let mut per_epoch = Vec::with_capacity(spec.epochs as usize);
    let mut update_epochs = Vec::new();
    for epoch in 1..=spec.epochs {
        let bank = drift_bank_at(spec, seed, epoch);
        if state.schedule_step(epoch, &bank)? == StepOutcome::Recomputed {
            update_epochs.push(epoch);
        }
        per_epoch.push(sparsity(state.mask()));
    }
    Ok(SparsityTrace {
        per_epoch,
        update_epochs,
    })
}
