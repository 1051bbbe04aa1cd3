//! End-to-end compression: stream calibration activations through the
//! model, decompose each planned slot in execution order on the partially
//! compressed state, replace it in place, and account for the result.
//!
//! Within a module the order is q, k, v (one shared input tap), then o,
//! then gate, up (shared tap), then down — each later group sees the
//! activations produced by the already-replaced earlier slots, so the
//! decomposition of a slot absorbs the error introduced upstream.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::modelgraph::{ModelConfig, ModelState, Slot, Tap, ROM_W1_SUFFIX, ROM_W2_SUFFIX};
use crate::planner::{self, CompressionPlan};
use crate::romcore;
use crate::tensorstore::{self, Dtype, Matrix, RawTensor, TensorArchive, TokenBatch};

#[derive(Clone, Debug)]
pub struct CompressOptions {
    /// Sequence length the before/after MAC totals are quoted at.
    pub seq_len_for_macs: usize,
    /// Carry the hidden state entering each module forward instead of
    /// recomputing the prefix per tap. Bit-identical to the recompute
    /// path; it only skips repeated work.
    pub reuse_hidden: bool,
}

impl Default for CompressOptions {
    fn default() -> Self {
        CompressOptions {
            seq_len_for_macs: planner::DEFAULT_MAC_SEQ_LEN,
            reuse_hidden: false,
        }
    }
}

/// One decomposed (or skipped) slot.
#[derive(Clone, Debug, Serialize)]
pub struct SlotRecord {
    pub module_index: usize,
    pub slot: Slot,
    pub rank: usize,
    pub d_out: usize,
    pub d_in: usize,
    pub retained_energy: f64,
    pub discarded_energy: f64,
    pub reconstruction_error: f64,
    pub params_saved: u64,
    pub skipped: bool,
    /// Wall time is console/diagnostic data only; it stays out of the
    /// serialized report so reruns are byte-identical.
    #[serde(skip)]
    pub wall_time: Duration,
}

#[derive(Clone, Debug, Serialize)]
pub struct CompressionReport {
    pub records: Vec<SlotRecord>,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub seq_len_for_macs: usize,
    /// Workspace bound for the largest single slot: activations, the dense
    /// weight, its factors and the d_out^2 spectrum. Independent of model
    /// depth.
    pub peak_planned_bytes: u64,
    #[serde(skip)]
    pub total_wall_time: Duration,
}

impl CompressionReport {
    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = serde_json::to_string_pretty(self).expect("report is serializable");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// The plan that was actually applied: every non-skipped record.
    pub fn executed_ranks(&self) -> BTreeMap<(usize, Slot), usize> {
        self.records
            .iter()
            .filter(|r| !r.skipped)
            .map(|r| ((r.module_index, r.slot), r.rank))
            .collect()
    }
}

/// Callback surface for observing the compression loop.
pub trait CompressObserver {
    /// Fired with the exact activations a slot is about to be decomposed
    /// from, and the state they were computed on.
    fn on_activations(&mut self, _step: &ActivationStep<'_>) {}
    /// Fired after a slot is replaced (or skipped).
    fn on_slot_done(&mut self, _record: &SlotRecord) {}
}

pub struct ActivationStep<'a> {
    pub module_index: usize,
    pub slot: Slot,
    pub rank: usize,
    pub tap: Tap,
    pub activations: &'a Matrix,
    pub state: &'a ModelState,
}

pub struct NoopObserver;

impl CompressObserver for NoopObserver {}

const TAP_GROUPS: [(Tap, &[Slot]); 4] = [
    (Tap::AttnInput, &[Slot::Q, Slot::K, Slot::V]),
    (Tap::OInput, &[Slot::O]),
    (Tap::MlpInput, &[Slot::Gate, Slot::Up]),
    (Tap::DownInput, &[Slot::Down]),
];

pub fn compress(
    state: &mut ModelState,
    plan: &CompressionPlan,
    calib: &TokenBatch,
    opts: &CompressOptions,
) -> Result<CompressionReport> {
    compress_observed(state, plan, calib, opts, &mut NoopObserver)
}

pub fn compress_observed(
    state: &mut ModelState,
    plan: &CompressionPlan,
    calib: &TokenBatch,
    opts: &CompressOptions,
    observer: &mut dyn CompressObserver,
) -> Result<CompressionReport> {
    let config = state.config().clone();
    plan.validate(&config)?;
    if calib.seq_len > config.max_seq {
        return Err(Error::Argument(format!(
            "calibration sequence length {} exceeds max_seq {}",
            calib.seq_len, config.max_seq
        )));
    }
    if let Some(&bad) = calib.ids().iter().find(|&&id| id as usize >= config.vocab_size) {
        return Err(Error::Range(format!(
            "calibration token id {bad} >= vocab size {}",
            config.vocab_size
        )));
    }

    let started = Instant::now();
    let mut records = Vec::with_capacity(plan.ranks().len());
    let (batch, seq) = (calib.batch, calib.seq_len);

    // hidden state entering the module currently being processed; the
    // prefix never changes after its module is finished, so advancing it
    // module by module matches a fresh forward bit for bit
    let mut carried: Option<(usize, Matrix)> = if opts.reuse_hidden {
        Some((0, state.embed_tokens(calib)?))
    } else {
        None
    };

    for module in plan.module_indices() {
        if let Some((next, hidden)) = carried.as_mut() {
            while *next < module {
                *hidden = state.tap_in_block(*next, hidden, batch, seq, Tap::BlockOutput)?;
                *next += 1;
            }
        }
        for (tap, slots) in TAP_GROUPS {
            let planned: Vec<Slot> = slots
                .iter()
                .copied()
                .filter(|s| plan.rank(module, *s).is_some())
                .collect();
            if planned.is_empty() {
                continue;
            }
            let activations = match &carried {
                Some((_, hidden)) => state.tap_in_block(module, hidden, batch, seq, tap)?,
                None => state.forward_hidden(calib, module, tap)?,
            };
            for slot in planned {
                let rank = plan.rank(module, slot).expect("slot was filtered as planned");
                let (d_out, d_in) = slot.dims(&config);
                if rank * (d_out + d_in) >= d_out * d_in {
                    // at or past the never-worse bound: keep the slot dense
                    let record = SlotRecord {
                        module_index: module,
                        slot,
                        rank,
                        d_out,
                        d_in,
                        retained_energy: 0.0,
                        discarded_energy: 0.0,
                        reconstruction_error: 0.0,
                        params_saved: 0,
                        skipped: true,
                        wall_time: Duration::ZERO,
                    };
                    observer.on_slot_done(&record);
                    records.push(record);
                    continue;
                }
                let weight = state
                    .layer(module)
                    .slot(slot)
                    .dense()
                    .ok_or_else(|| {
                        Error::Plan("slot is already low-rank".into()).at(module, slot.name())
                    })?
                    .clone();
                observer.on_activations(&ActivationStep {
                    module_index: module,
                    slot,
                    rank,
                    tap,
                    activations: &activations,
                    state,
                });
                let slot_started = Instant::now();
                let result = romcore::decompose_layer(&weight, &activations, rank)
                    .map_err(|e| e.at(module, slot.name()))?;
                let reconstruction = romcore::reconstruction_error(&result, &weight, &activations)
                    .map_err(|e| e.at(module, slot.name()))?;
                let romcore::DecompositionResult {
                    w1,
                    w2,
                    rank,
                    retained_energy,
                    discarded_energy,
                    ..
                } = result;
                state.replace_layer(module, slot, w1, w2)?;
                let record = SlotRecord {
                    module_index: module,
                    slot,
                    rank,
                    d_out,
                    d_in,
                    retained_energy,
                    discarded_energy,
                    reconstruction_error: reconstruction,
                    params_saved: (d_out * d_in - rank * (d_out + d_in)) as u64,
                    skipped: false,
                    wall_time: slot_started.elapsed(),
                };
                observer.on_slot_done(&record);
                records.push(record);
            }
        }
    }

    let executed = CompressionPlan::from_ranks(
        plan.modules_from_end,
        plan.module_budget,
        records
            .iter()
            .filter(|r| !r.skipped)
            .map(|r| ((r.module_index, r.slot), r.rank))
            .collect(),
    );
    let params_before = planner::count_params(&config, None);
    let params_after = planner::count_params(&config, Some(&executed));
    debug_assert_eq!(params_after, state.param_count());

    Ok(CompressionReport {
        peak_planned_bytes: planned_peak_bytes(&config, plan, calib.n_tokens()),
        records,
        params_before,
        params_after,
        macs_before: planner::compute_macs(&config, None, opts.seq_len_for_macs),
        macs_after: planner::compute_macs(&config, Some(&executed), opts.seq_len_for_macs),
        seq_len_for_macs: opts.seq_len_for_macs,
        total_wall_time: started.elapsed(),
    })
}

/// Workspace bound in bytes for compressing the largest planned slot:
/// `4 * (N*d  hidden  +  N*tap_width  +  d_out*d_in  +  r*(d_out+d_in)  +
/// 2*d_out^2)`. Depends on the widest slot, not on model depth.
pub fn planned_peak_bytes(
    config: &ModelConfig,
    plan: &CompressionPlan,
    n_tokens: usize,
) -> u64 {
    let d = config.hidden_size as u64;
    let n = n_tokens as u64;
    let mut peak = 0u64;
    for (&(_, slot), &rank) in plan.ranks() {
        let (d_out, d_in) = slot.dims(config);
        let tap_width = match slot.tap() {
            Tap::DownInput => config.intermediate_size as u64,
            _ => d,
        };
        let elems = n * d
            + n * tap_width
            + (d_out as u64) * (d_in as u64)
            + (rank as u64) * (d_out as u64 + d_in as u64)
            + 2 * (d_out as u64) * (d_out as u64);
        peak = peak.max(elems);
    }
    4 * peak
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct DriftStats {
    pub max_abs: f64,
    pub frobenius: f64,
    pub mean_abs: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VerificationSummary {
    pub checks: Vec<CheckResult>,
    pub logits_drift: DriftStats,
}

impl VerificationSummary {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn drift_stats(a: &Matrix, b: &Matrix) -> DriftStats {
    let n = (a.rows() * a.cols()).max(1) as f64;
    let mut max_abs = 0.0f64;
    let mut sum_sq = 0.0f64;
    let mut sum_abs = 0.0f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        let d = (*x as f64 - *y as f64).abs();
        max_abs = max_abs.max(d);
        sum_sq += d * d;
        sum_abs += d;
    }
    DriftStats { max_abs, frobenius: sum_sq.sqrt(), mean_abs: sum_abs / n }
}

/// Structural checks on a compressed model plus logits drift against the
/// original on a held-out batch. Failures are reported, never thrown.
pub fn verify(
    original: &ModelState,
    compressed: &ModelState,
    plan: &CompressionPlan,
    calib: &TokenBatch,
) -> Result<VerificationSummary> {
    let mut checks = Vec::new();
    let config = original.config();
    checks.push(CheckResult {
        name: "config-match".into(),
        passed: config == compressed.config(),
        detail: "architectures must be identical".into(),
    });

    let mut executed_ranks: BTreeMap<(usize, Slot), usize> = BTreeMap::new();
    for (&(module, slot), &rank) in plan.ranks() {
        let repr = compressed.layer(module).slot(slot);
        let (d_out, d_in) = slot.dims(config);
        match repr.low_rank() {
            Some((w1, w2)) => {
                executed_ranks.insert((module, slot), repr.rank().unwrap_or(0));
                // w1ᵀ w1 = I within 1e-5
                let r = w1.cols();
                let mut max_dev = 0.0f64;
                for p in 0..r {
                    for q in 0..r {
                        let mut dot = 0.0f64;
                        for i in 0..w1.rows() {
                            dot += w1.get(i, p) as f64 * w1.get(i, q) as f64;
                        }
                        let expect = if p == q { 1.0 } else { 0.0 };
                        max_dev = max_dev.max((dot - expect).abs());
                    }
                }
                checks.push(CheckResult {
                    name: format!("orthonormal-w1 {module}.{slot}"),
                    passed: max_dev <= 1e-5,
                    detail: format!("max |w1ᵀw1 - I| = {max_dev:.3e}"),
                });
                let factor_params = (w1.rows() * w1.cols() + w2.rows() * w2.cols()) as u64;
                let dense_params = (d_out * d_in) as u64;
                checks.push(CheckResult {
                    name: format!("never-worse {module}.{slot}"),
                    passed: factor_params <= dense_params,
                    detail: format!("{factor_params} factor params vs {dense_params} dense"),
                });
            }
            None => {
                // planned but left dense: legal only as a never-worse skip
                let skip_ok = rank * (d_out + d_in) >= d_out * d_in
                    && repr == original.layer(module).slot(slot);
                checks.push(CheckResult {
                    name: format!("skipped-slot {module}.{slot}"),
                    passed: skip_ok,
                    detail: format!("rank {rank} planned; slot kept dense"),
                });
            }
        }
    }

    let planned_modules: Vec<usize> = plan.module_indices();
    let mut prefix_pure = true;
    for module in 0..config.num_layers {
        if planned_modules.contains(&module) {
            continue;
        }
        let (a, b) = (original.layer(module), compressed.layer(module));
        if a != b {
            prefix_pure = false;
        }
    }
    checks.push(CheckResult {
        name: "prefix-purity".into(),
        passed: prefix_pure,
        detail: "unplanned modules are bit-identical".into(),
    });

    let executed = CompressionPlan::from_ranks(
        plan.modules_from_end,
        plan.module_budget,
        executed_ranks,
    );
    let predicted = planner::count_params(config, Some(&executed));
    let actual = compressed.param_count();
    checks.push(CheckResult {
        name: "param-accounting".into(),
        passed: predicted == actual,
        detail: format!("planner predicts {predicted}, model holds {actual}"),
    });

    let logits_orig = original.logits(calib)?;
    let logits_comp = compressed.logits(calib)?;
    let logits_drift = drift_stats(&logits_orig, &logits_comp);

    Ok(VerificationSummary { checks, logits_drift })
}

#[derive(Clone, Debug, Serialize)]
pub struct BlockDrift {
    pub module_index: usize,
    pub max_abs: f64,
    pub frobenius: f64,
}

/// Hidden-state drift at every block output, exposing how compression
/// error compounds with depth.
pub fn output_drift(
    original: &ModelState,
    compressed: &ModelState,
    batch: &TokenBatch,
) -> Result<Vec<BlockDrift>> {
    let config = original.config();
    let (b, s) = (batch.batch, batch.seq_len);
    let mut h_orig = original.embed_tokens(batch)?;
    let mut h_comp = compressed.embed_tokens(batch)?;
    let mut out = Vec::with_capacity(config.num_layers);
    for module in 0..config.num_layers {
        h_orig = original.tap_in_block(module, &h_orig, b, s, Tap::BlockOutput)?;
        h_comp = compressed.tap_in_block(module, &h_comp, b, s, Tap::BlockOutput)?;
        let stats = drift_stats(&h_orig, &h_comp);
        out.push(BlockDrift {
            module_index: module,
            max_abs: stats.max_abs,
            frobenius: stats.frobenius,
        });
    }
    Ok(out)
}

/// How factor tensors are stored in the compressed archive.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoreDtype {
    F32,
    F16,
    BF16,
    /// Match each slot's original on-disk dtype.
    Keep,
}

impl StoreDtype {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(StoreDtype::F32),
            "f16" => Ok(StoreDtype::F16),
            "bf16" => Ok(StoreDtype::BF16),
            "keep" => Ok(StoreDtype::Keep),
            other => Err(Error::Argument(format!(
                "store dtype {other:?}; expected f32, f16, bf16 or keep"
            ))),
        }
    }

    fn resolve(self, original: Dtype) -> Dtype {
        match self {
            StoreDtype::F32 => Dtype::F32,
            StoreDtype::F16 => Dtype::F16,
            StoreDtype::BF16 => Dtype::BF16,
            StoreDtype::Keep => original,
        }
    }
}

fn slot_of_tensor_name(name: &str, num_layers: usize) -> Option<(usize, Slot)> {
    for module in 0..num_layers {
        for slot in Slot::ALL {
            if slot.tensor_name(module) == name {
                return Some((module, slot));
            }
        }
    }
    None
}

/// Write the compressed archive: untouched tensors are copied byte for
/// byte; each low-rank slot becomes `<name>.rom_w1` / `<name>.rom_w2`.
pub fn save_compressed(
    source: &TensorArchive,
    state: &ModelState,
    out_path: impl AsRef<Path>,
    store: StoreDtype,
) -> Result<()> {
    let num_layers = state.config().num_layers;
    let mut tensors: BTreeMap<String, RawTensor> = BTreeMap::new();
    for (name, entry) in source.entries() {
        let replaced = slot_of_tensor_name(name, num_layers)
            .and_then(|(module, slot)| state.layer(module).slot(slot).low_rank());
        match replaced {
            Some((w1, w2)) => {
                let dtype = store.resolve(entry.dtype);
                tensors.insert(
                    format!("{name}{ROM_W1_SUFFIX}"),
                    RawTensor::from_matrix(dtype, w1),
                );
                tensors.insert(
                    format!("{name}{ROM_W2_SUFFIX}"),
                    RawTensor::from_matrix(dtype, w2),
                );
            }
            None => {
                tensors.insert(
                    name.clone(),
                    RawTensor {
                        dtype: entry.dtype,
                        shape: entry.shape.clone(),
                        bytes: source.load_raw(name)?,
                    },
                );
            }
        }
    }
    tensorstore::write_entries(out_path, &tensors)
}

/// Provenance sidecar written next to a compressed archive.
#[derive(Clone, Debug, Serialize)]
pub struct RomMeta {
    pub version: String,
    pub seed: u64,
    pub store_dtype: String,
    pub calibration: CalibDescriptor,
    pub plan: BTreeMap<String, usize>,
    pub modules_from_end: usize,
    pub module_budget: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct CalibDescriptor {
    pub path: String,
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: usize,
}

impl RomMeta {
    pub fn new(
        plan: &CompressionPlan,
        calib: &TokenBatch,
        calib_path: &str,
        seed: u64,
        store_dtype: &str,
    ) -> Self {
        RomMeta {
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            store_dtype: store_dtype.to_string(),
            calibration: CalibDescriptor {
                path: calib_path.to_string(),
                batch: calib.batch,
                seq_len: calib.seq_len,
                tokens: calib.n_tokens(),
            },
            plan: plan
                .ranks()
                .iter()
                .map(|((m, s), r)| (format!("{m}.{s}"), *r))
                .collect(),
            modules_from_end: plan.modules_from_end,
            module_budget: plan.module_budget,
        }
    }

    /// Sidecar path for an archive: `<archive>.rom_meta.json`.
    pub fn sidecar_path(archive: &Path) -> std::path::PathBuf {
        let mut name = archive.as_os_str().to_os_string();
        name.push(".rom_meta.json");
        std::path::PathBuf::from(name)
    }

    pub fn save(&self, archive_path: &Path) -> Result<()> {
        let path = Self::sidecar_path(archive_path);
        let mut text = serde_json::to_string_pretty(self).expect("meta is serializable");
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}
