//! The runtime engine: request intake, the work-distribution decision
//! workflow, per-slot simulated execution of a tree under a framework
//! configuration, host-side Loop/MapReduce stages, trait substitution,
//! result merging and statistics capture.
//!
//! Requests are handled first-come-first-served; every run uses all the
//! configured hardware. Between runs the engine mutates its adaptation state
//! (current configuration, lbt, balancer) according to the decision workflow:
//! a changed (SCT, workload) pair derives a configuration from the knowledge
//! base, recurring unbalanced runs either build a profile from scratch or
//! adjust the distribution with the adaptive binary search, and a quiet
//! history reuses the current configuration.

use std::collections::BTreeMap;
use std::sync::mpsc;

use thiserror::Error;

use crate::balance::{
    lbt_update, should_balance, AbsEvent, AbsState, BalancerParams, FasterType,
};
use crate::decomp::{partition_input, DecompError, PartitionPlan, SlotContext, SlotRole};
use crate::kb::{DerivedConfig, KbError, KnowledgeBase, Profile, Provenance, Scope};
use crate::platform::{
    cpu_kernel_time, gpu_get_configurations, gpu_kernel_time, transfer_bytes, CpuDeviceModel,
    FissionLevel, GpuDeviceModel, Noise, PlatformConfig, PlatformError,
};
use crate::sct::{
    HostReducer, KernelId, KernelSpec, LoopCondition, Reduction, Sct, SctError, SctId, SctNode,
    TraitBinding,
};
use crate::tuner::{self, SearchTrace, TunerParams};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Sct(#[from] SctError),
    #[error(transparent)]
    Decomp(#[from] DecompError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Kb(#[from] KbError),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

// ── Workload characterization ───────────────────────────────────────────────

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum FpPrecision {
    None,
    Single,
    Double,
}

/// What a workload looks like to the knowledge base: dimensionality, elements
/// per dimension, floating-point precision. Not the data itself.
#[derive(
    Debug, Clone, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct WorkloadId {
    pub elements_per_dimension: Vec<u64>,
    pub fp_precision: FpPrecision,
}

impl WorkloadId {
    pub fn new(elements_per_dimension: Vec<u64>, fp_precision: FpPrecision) -> Result<Self, EngineError> {
        if elements_per_dimension.is_empty() {
            return Err(EngineError::ShapeMismatch("workload needs at least one dimension".into()));
        }
        if elements_per_dimension.contains(&0) {
            return Err(EngineError::ShapeMismatch("workload dimensions must be >= 1".into()));
        }
        Ok(WorkloadId { elements_per_dimension, fp_precision })
    }

    pub fn dimensions(&self) -> usize {
        self.elements_per_dimension.len()
    }

    pub fn total_elements(&self) -> u64 {
        self.elements_per_dimension.iter().product()
    }

    pub fn label(&self) -> String {
        let dims: Vec<String> =
            self.elements_per_dimension.iter().map(|e| e.to_string()).collect();
        let precision = match self.fp_precision {
            FpPrecision::None => "none",
            FpPrecision::Single => "single",
            FpPrecision::Double => "double",
        };
        format!("{}:{precision}", dims.join("x"))
    }
}

/// Workload fractions per device type.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Split {
    pub cpu: f64,
    pub gpu: f64,
}

impl Split {
    pub fn new(cpu: f64) -> Self {
        let cpu = cpu.clamp(0.0, 1.0);
        Split { cpu, gpu: 1.0 - cpu }
    }
}

/// One point of the tuning space: platform configuration, device-type split,
/// per-GPU weights, and the derived level of coarse parallelism.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameworkConfig {
    pub platform: PlatformConfig,
    pub split: Split,
    pub per_gpu_weights: Vec<f64>,
    pub parallelism: usize,
}

// ── Hardware fleet ──────────────────────────────────────────────────────────

/// The devices made available to the engine: at most one (possibly
/// multi-socket) CPU device plus any number of GPUs.
#[derive(Debug, Clone, Default)]
pub struct Fleet {
    pub cpu: Option<CpuDeviceModel>,
    pub gpus: Vec<GpuDeviceModel>,
}

impl Fleet {
    pub fn validate(&self) -> Result<(), PlatformError> {
        if self.cpu.is_none() && self.gpus.is_empty() {
            return Err(PlatformError::InvalidModel("fleet declares no devices".into()));
        }
        if let Some(cpu) = &self.cpu {
            cpu.validate()?;
        }
        for gpu in &self.gpus {
            gpu.validate()?;
        }
        Ok(())
    }

    pub fn gpu_refs(&self) -> Vec<&GpuDeviceModel> {
        self.gpus.iter().collect()
    }

    /// Normalized relative-performance weights over the GPU fleet.
    pub fn gpu_weights(&self) -> Vec<f64> {
        let total: f64 = self.gpus.iter().map(|g| g.relative_perf).sum();
        self.gpus.iter().map(|g| g.relative_perf / total).collect()
    }

    pub fn cpu_subdevices(&self, level: FissionLevel) -> u32 {
        self.cpu.as_ref().map(|c| c.subdevices(level)).unwrap_or(0)
    }
}

impl FrameworkConfig {
    /// Bind a platform configuration and a split to a fleet, normalizing the
    /// split for single-type fleets and deriving the parallelism.
    pub fn assemble(
        fleet: &Fleet,
        platform: PlatformConfig,
        split: Split,
    ) -> Result<Self, EngineError> {
        if platform.overlap == 0 {
            return Err(EngineError::InvalidConfig("overlap must be >= 1".into()));
        }
        let split = if fleet.cpu.is_none() {
            Split { cpu: 0.0, gpu: 1.0 }
        } else if fleet.gpus.is_empty() {
            Split { cpu: 1.0, gpu: 0.0 }
        } else {
            Split::new(split.cpu)
        };
        let cpu_slots = fleet.cpu_subdevices(platform.fission_level) as usize;
        let parallelism = cpu_slots + fleet.gpus.len() * platform.overlap as usize;
        Ok(FrameworkConfig {
            platform,
            split,
            per_gpu_weights: if fleet.gpus.is_empty() { Vec::new() } else { fleet.gpu_weights() },
            parallelism,
        })
    }
}

// ── Requests, statistics, results ───────────────────────────────────────────

/// One execution request: the workload characterization plus the concrete
/// argument lengths/values. Vector lengths default to the workload's total
/// element count.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRequest {
    pub workload: WorkloadId,
    pub vector_lengths: BTreeMap<String, u64>,
    pub scalar_values: BTreeMap<String, f64>,
}

impl RunRequest {
    pub fn of(workload: WorkloadId) -> Self {
        RunRequest { workload, vector_lengths: BTreeMap::new(), scalar_values: BTreeMap::new() }
    }
}

/// Per-run measurements.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionStats {
    /// Work time accumulated by each slot (barrier waits excluded).
    pub per_slot_times: Vec<f64>,
    /// Max over CPU subdevice slots, when the CPU received work.
    pub cpu_time: Option<f64>,
    /// Max over GPUs of the summed lane times, when GPUs received work.
    pub gpu_time: Option<f64>,
    /// min/max ratio of the per-type times; defined only when both types
    /// received work. 1 means perfectly even.
    pub dev: Option<f64>,
    /// Load-balancing threshold after this run.
    pub lbt: f64,
    /// Critical-path time: max device timeline plus host stages.
    pub wall_ms: f64,
}

/// One simulated kernel execution on one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskRecord {
    pub slot: usize,
    pub kernel: KernelId,
    pub offset: u64,
    pub length: u64,
    /// Scalar arguments substituted from partition traits, by name.
    pub trait_bindings: BTreeMap<String, f64>,
    pub time_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReductionOutcome {
    pub op: String,
    pub partials: Vec<f64>,
    pub merged: f64,
}

/// Notable execution/adaptation events, in order.
#[derive(Debug, Clone, PartialEq)]
pub enum EngineEvent {
    Barrier { iteration: u64 },
    StateUpdate { iteration: u64, parallel: bool },
    Reduced { op: String, value: f64 },
    BalanceTrigger,
    BalanceRefine,
    BalanceShift { direction: i8 },
    BalanceDoubled,
    BalanceConverged,
}

impl EngineEvent {
    pub fn label(&self) -> String {
        match self {
            EngineEvent::Barrier { iteration } => format!("barrier({iteration})"),
            EngineEvent::StateUpdate { iteration, parallel } => {
                format!("state-update({iteration},{})", if *parallel { "parallel" } else { "serial" })
            }
            EngineEvent::Reduced { op, value } => format!("reduced({op},{value})"),
            EngineEvent::BalanceTrigger => "trigger".into(),
            EngineEvent::BalanceRefine => "refine".into(),
            EngineEvent::BalanceShift { direction } => format!("shift({direction:+})"),
            EngineEvent::BalanceDoubled => "double".into(),
            EngineEvent::BalanceConverged => "converge".into(),
        }
    }
}

/// What the decision workflow did for a run.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    Derived { scope: Scope },
    Built,
    Balanced,
    Reused,
}

impl Action {
    pub fn label(&self) -> String {
        match self {
            Action::Derived { scope } => format!("derived({})", scope.label()),
            Action::Built => "built".into(),
            Action::Balanced => "balanced".into(),
            Action::Reused => "reused".into(),
        }
    }
}

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub run_index: u64,
    pub sct_id: SctId,
    pub workload: WorkloadId,
    pub action: Action,
    pub config: FrameworkConfig,
    pub stats: ExecutionStats,
    pub tasks: Vec<TaskRecord>,
    pub reductions: Vec<ReductionOutcome>,
    pub events: Vec<EngineEvent>,
    /// Present when this run triggered profile construction.
    pub search: Option<SearchTrace>,
}

// ── Slot table ──────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotDevice {
    CpuSub(u32),
    GpuLane { gpu: usize, lane: u32 },
}

#[derive(Debug, Clone)]
pub struct SlotTable {
    pub devices: Vec<SlotDevice>,
    pub roles: Vec<SlotRole>,
    pub fractions: Vec<f64>,
    pub cpu_slots: usize,
}

/// Expand a framework configuration into the per-slot table: one slot per CPU
/// subdevice plus `overlap` lanes per GPU, with the CPU share split evenly
/// among subdevices and the GPU share split by relative performance.
pub fn build_slot_table(fleet: &Fleet, config: &FrameworkConfig) -> SlotTable {
    let mut devices = Vec::new();
    let mut roles = Vec::new();
    let mut fractions = Vec::new();

    let cpu_slots = fleet.cpu_subdevices(config.platform.fission_level) as usize;
    for i in 0..cpu_slots {
        devices.push(SlotDevice::CpuSub(i as u32));
        roles.push(SlotRole::Cpu);
        fractions.push(config.split.cpu / cpu_slots as f64);
    }
    for (g, _) in fleet.gpus.iter().enumerate() {
        let weight = config.per_gpu_weights.get(g).copied().unwrap_or(0.0);
        for lane in 0..config.platform.overlap {
            devices.push(SlotDevice::GpuLane { gpu: g, lane });
            roles.push(SlotRole::Gpu { weight });
            fractions.push(config.split.gpu * weight / config.platform.overlap as f64);
        }
    }
    SlotTable { devices, roles, fractions, cpu_slots }
}

/// Work-group sizes each slot imposes on the partitioning: searched sizes on
/// GPU slots, pinned-or-unit sizes on CPU slots.
pub fn slot_context(sct: &Sct, table: &SlotTable, config: &FrameworkConfig) -> SlotContext {
    let kernels = sct.kernels();
    let wgs = table
        .devices
        .iter()
        .map(|dev| {
            let mut per_kernel = BTreeMap::new();
            for k in &kernels {
                let w = match dev {
                    SlotDevice::CpuSub(_) => k.fixed_outer_wgs().unwrap_or(1),
                    SlotDevice::GpuLane { .. } => config.platform.wgs_of(&k.id),
                };
                per_kernel.insert(k.id.clone(), w);
            }
            per_kernel
        })
        .collect();
    SlotContext::new(table.roles.clone(), wgs)
}

// ── The engine ──────────────────────────────────────────────────────────────

struct CurrentState {
    key: (SctId, WorkloadId),
    config: FrameworkConfig,
    lbt: f64,
    balancer: Option<AbsState>,
    last_type_times: Option<(f64, f64)>,
    last_dev: Option<f64>,
    derived_cpu_share: Option<f64>,
}

pub struct Engine {
    pub fleet: Fleet,
    pub kb: KnowledgeBase,
    pub tuner_params: TunerParams,
    pub balancer_params: BalancerParams,
    pub profiling_enabled: bool,
    pub host_reduce_per_partial_ms: f64,
    noise: Option<Noise>,
    run_index: u64,
    current: Option<CurrentState>,
}

impl Engine {
    pub fn new(fleet: Fleet, kb: KnowledgeBase) -> Result<Self, EngineError> {
        fleet.validate()?;
        Ok(Engine {
            fleet,
            kb,
            tuner_params: TunerParams::default(),
            balancer_params: BalancerParams::default(),
            profiling_enabled: true,
            host_reduce_per_partial_ms: 0.0,
            noise: None,
            run_index: 0,
            current: None,
        })
    }

    pub fn with_noise(mut self, noise: Option<Noise>) -> Self {
        self.noise = noise;
        self
    }

    pub fn run_index(&self) -> u64 {
        self.run_index
    }

    /// Handle one execution request: decide a configuration per the workflow,
    /// execute the tree, update the adaptation state and persist improvements.
    pub fn run(&mut self, sct: &Sct, request: &RunRequest) -> Result<RunOutcome, EngineError> {
        sct.validate_communication()?;
        self.check_shapes(sct, request)?;
        let key = (sct.id().clone(), request.workload.clone());
        let mut events = Vec::new();
        let mut search = None;

        let (action, config) = self.decide(sct, request, &key, &mut events, &mut search)?;

        let lengths = effective_lengths(sct, request);
        let clock = self.run_index;
        let exec = execute_once(
            &self.fleet,
            sct,
            &config,
            &lengths,
            &request.scalar_values,
            clock,
            self.host_reduce_per_partial_ms,
            &mut self.noise,
        )?;

        let prev_lbt = match (&self.current, &action) {
            // A fresh configuration restarts the imbalance history.
            (_, Action::Derived { .. }) | (_, Action::Built) => 0.0,
            (Some(cur), _) if cur.key == key => cur.lbt,
            _ => 0.0,
        };
        let lbt = lbt_update(prev_lbt, exec.stats.dev.unwrap_or(1.0), &self.balancer_params);

        let mut stats = exec.stats;
        stats.lbt = lbt;

        // Persist what the run taught us.
        match &action {
            Action::Derived { .. } => {
                self.store_profile(&key, &config, stats.wall_ms, Provenance::Derived)?;
            }
            Action::Balanced => {
                self.store_profile(&key, &config, stats.wall_ms, Provenance::Balanced)?;
            }
            _ => {}
        }

        let prev = self.current.take();
        let (balancer, derived_cpu_share) = match &action {
            Action::Derived { .. } | Action::Built => (None, Some(config.split.cpu)),
            _ => match prev {
                Some(c) => (c.balancer, c.derived_cpu_share),
                None => (None, None),
            },
        };
        self.current = Some(CurrentState {
            key: key.clone(),
            config: config.clone(),
            lbt,
            balancer,
            last_type_times: stats.cpu_time.zip(stats.gpu_time),
            last_dev: stats.dev,
            derived_cpu_share,
        });

        let outcome = RunOutcome {
            run_index: self.run_index,
            sct_id: key.0,
            workload: key.1,
            action,
            config,
            stats,
            tasks: exec.tasks,
            reductions: exec.reductions,
            events: { events.extend(exec.events); events },
            search,
        };
        self.run_index += 1;
        Ok(outcome)
    }

    /// The top-level decision workflow.
    fn decide(
        &mut self,
        sct: &Sct,
        request: &RunRequest,
        key: &(SctId, WorkloadId),
        events: &mut Vec<EngineEvent>,
        search: &mut Option<SearchTrace>,
    ) -> Result<(Action, FrameworkConfig), EngineError> {
        let recurrent = self.current.as_ref().is_some_and(|c| &c.key == key);
        if !recurrent {
            let derivation = self.kb.derive(&key.0, &key.1);
            let config = self.materialize(sct, derivation.config)?;
            return Ok((Action::Derived { scope: derivation.scope }, config));
        }

        let params = self.balancer_params;
        let (lbt, balancing, last_dev, last_type_times, cur_config, derived_share) = {
            let cur = self.current.as_ref().expect("recurrent implies current");
            (
                cur.lbt,
                cur.balancer.is_some(),
                cur.last_dev,
                cur.last_type_times,
                cur.config.clone(),
                cur.derived_cpu_share,
            )
        };

        if balancing {
            // Active redistribution: converge on a balanced run, otherwise
            // take the next adaptive step from the last run's feedback.
            if last_dev.map(|d| params.is_balanced(d)).unwrap_or(true) {
                self.current.as_mut().expect("recurrent").balancer = None;
                events.push(EngineEvent::BalanceConverged);
                return Ok((Action::Reused, cur_config));
            }
            let (cpu_t, gpu_t) = last_type_times.expect("unbalanced run has both types");
            let faster = FasterType::from_times(cpu_t, gpu_t);
            let cur = self.current.as_mut().expect("recurrent");
            let balancer = cur.balancer.as_mut().expect("balancing");
            let (next_cpu, abs_events) = balancer.step(faster, cur_config.split.cpu);
            push_abs_events(events, &abs_events);
            let mut config = cur_config;
            config.split = Split::new(next_cpu);
            return Ok((Action::Balanced, config));
        }

        if should_balance(lbt, &params) {
            let has_built = self
                .kb
                .get(&key.0, &key.1)
                .map(|p| p.provenance == Provenance::Built)
                .unwrap_or(false);
            if self.profiling_enabled && !has_built {
                let (profile, trace) = tuner::build_profile(self, sct, request)?;
                *search = Some(trace);
                let config = self.materialize(
                    sct,
                    DerivedConfig {
                        split: profile.split,
                        fission: profile.platform.fission_level,
                        overlap: profile.platform.overlap,
                        wgs: Some(profile.platform.wgs_per_kernel.clone()),
                    },
                )?;
                return Ok((Action::Built, config));
            }

            // Trigger the adaptive binary search and take its first step.
            events.push(EngineEvent::BalanceTrigger);
            let min_step = self.min_split_step(sct, request, &cur_config)?;
            let current_share = cur_config.split.cpu;
            let discrepancy = derived_share.map(|d| (current_share - d).abs()).unwrap_or(0.0);
            let initial =
                if discrepancy >= min_step.max(1.0 / 64.0) { discrepancy } else { 0.125 };
            let mut abs = AbsState::on_trigger(current_share, initial, min_step);
            let (cpu_t, gpu_t) = last_type_times.expect("trigger implies both types ran");
            let faster = FasterType::from_times(cpu_t, gpu_t);
            let (next_cpu, abs_events) = abs.step(faster, current_share);
            push_abs_events(events, &abs_events);
            self.current.as_mut().expect("recurrent").balancer = Some(abs);
            let mut config = cur_config;
            config.split = Split::new(next_cpu);
            return Ok((Action::Balanced, config));
        }

        Ok((Action::Reused, cur_config))
    }

    /// Turn a derived candidate into a concrete configuration for this tree
    /// and fleet: unsupported fission snaps to NO_FISSION, missing work-group
    /// sizes fall back to the best-occupancy candidate.
    pub fn materialize(
        &self,
        sct: &Sct,
        derived: DerivedConfig,
    ) -> Result<FrameworkConfig, EngineError> {
        let fission = match &self.fleet.cpu {
            Some(cpu) if crate::platform::cpu_get_configurations(cpu).contains(&derived.fission) => {
                derived.fission
            }
            _ => FissionLevel::NoFission,
        };
        let mut wgs_per_kernel = BTreeMap::new();
        if !self.fleet.gpus.is_empty() {
            let fallback = gpu_get_configurations(
                &self.fleet.gpu_refs(),
                sct,
                self.tuner_params.occupancy_threshold,
                1,
            )
            .wgs_candidates
            .into_iter()
            .next()
            .map(|c| c.assignment)
            .unwrap_or_default();
            for kernel in sct.kernels() {
                let w = derived
                    .wgs
                    .as_ref()
                    .and_then(|m| m.get(&kernel.id).copied())
                    .or_else(|| fallback.get(&kernel.id).copied())
                    .unwrap_or(1);
                wgs_per_kernel.insert(kernel.id.clone(), kernel.fixed_outer_wgs().unwrap_or(w));
            }
        }
        FrameworkConfig::assemble(
            &self.fleet,
            PlatformConfig { fission_level: fission, overlap: derived.overlap.max(1), wgs_per_kernel },
            derived.split,
        )
    }

    /// Measure a configuration `executions` times at a frozen clock without
    /// touching the adaptation state; reports the best wall time with its
    /// per-type times. This is the probe the profile builder uses, and it
    /// doubles as the hook for calibration against external oracles.
    pub fn measure_config(
        &mut self,
        sct: &Sct,
        request: &RunRequest,
        config: &FrameworkConfig,
        executions: u32,
    ) -> Result<(f64, Option<(f64, f64)>), EngineError> {
        let lengths = effective_lengths(sct, request);
        let mut best: Option<(f64, Option<(f64, f64)>)> = None;
        for _ in 0..executions.max(1) {
            let exec = execute_once(
                &self.fleet,
                sct,
                config,
                &lengths,
                &request.scalar_values,
                self.run_index,
                self.host_reduce_per_partial_ms,
                &mut self.noise,
            )?;
            let wall = exec.stats.wall_ms;
            let types = exec.stats.cpu_time.zip(exec.stats.gpu_time);
            if best.as_ref().map(|(b, _)| wall < *b).unwrap_or(true) {
                best = Some((wall, types));
            }
        }
        Ok(best.expect("at least one execution"))
    }

    fn store_profile(
        &mut self,
        key: &(SctId, WorkloadId),
        config: &FrameworkConfig,
        wall_ms: f64,
        provenance: Provenance,
    ) -> Result<(), EngineError> {
        if wall_ms.is_nan() || wall_ms <= 0.0 {
            return Ok(());
        }
        self.kb.store(Profile {
            sct_id: key.0.clone(),
            workload: key.1.clone(),
            split: config.split,
            platform: config.platform.clone(),
            best_time_ms: wall_ms,
            provenance,
        })?;
        Ok(())
    }

    /// Finest CPU-share move the decomposition can express: the largest
    /// granule-to-length ratio across the partitioned vectors.
    pub(crate) fn min_split_step(
        &self,
        sct: &Sct,
        request: &RunRequest,
        config: &FrameworkConfig,
    ) -> Result<f64, EngineError> {
        let lengths = effective_lengths(sct, request);
        let table = build_slot_table(&self.fleet, config);
        let ctx = slot_context(sct, &table, config);
        let plan = partition_input(sct, &lengths, &table.fractions, &ctx)?;
        let step = plan
            .granularity
            .iter()
            .filter_map(|(v, &g)| lengths.get(v).map(|&l| g as f64 / l as f64))
            .fold(0.0f64, f64::max);
        Ok(if step > 0.0 { step } else { 1.0 / 64.0 })
    }

    fn check_shapes(&self, sct: &Sct, request: &RunRequest) -> Result<(), EngineError> {
        let kernels = sct.kernels();
        let known = |name: &str| kernels.iter().any(|k| k.args.iter().any(|a| a.name == name));
        for name in request.vector_lengths.keys() {
            if !known(name) {
                return Err(EngineError::ShapeMismatch(format!(
                    "vector length given for unknown argument '{name}'"
                )));
            }
        }
        for name in request.scalar_values.keys() {
            if !known(name) {
                return Err(EngineError::ShapeMismatch(format!(
                    "scalar value given for unknown argument '{name}'"
                )));
            }
        }
        Ok(())
    }
}

fn push_abs_events(events: &mut Vec<EngineEvent>, abs_events: &[AbsEvent]) {
    for e in abs_events {
        events.push(match e {
            AbsEvent::Refine => EngineEvent::BalanceRefine,
            AbsEvent::Shift { direction } => EngineEvent::BalanceShift { direction: *direction },
            AbsEvent::DoubledStep => EngineEvent::BalanceDoubled,
        });
    }
}

/// Vector lengths with the workload's total element count as the default.
pub fn effective_lengths(sct: &Sct, request: &RunRequest) -> BTreeMap<String, u64> {
    let mut lengths = request.vector_lengths.clone();
    let default = request.workload.total_elements();
    for kernel in sct.kernels() {
        for arg in kernel.args.iter().filter(|a| a.is_data_vector()) {
            lengths.entry(arg.name.clone()).or_insert(default);
        }
    }
    lengths
}

// ── Execution of one run ────────────────────────────────────────────────────

struct ExecOutput {
    stats: ExecutionStats,
    tasks: Vec<TaskRecord>,
    reductions: Vec<ReductionOutcome>,
    events: Vec<EngineEvent>,
}

struct ExecCtx<'a> {
    fleet: &'a Fleet,
    config: &'a FrameworkConfig,
    plan: &'a PartitionPlan,
    table: &'a SlotTable,
    scalars: &'a BTreeMap<String, f64>,
    clock: u64,
    host_reduce_per_partial_ms: f64,
    // timelines: one per CPU subdevice, then one per GPU device
    timelines: Vec<f64>,
    slot_work: Vec<f64>,
    host_ms: f64,
    tasks: Vec<TaskRecord>,
    reductions: Vec<ReductionOutcome>,
    events: Vec<EngineEvent>,
}

impl ExecCtx<'_> {
    fn timeline_of(&self, slot: usize) -> usize {
        match self.table.devices[slot] {
            SlotDevice::CpuSub(i) => i as usize,
            SlotDevice::GpuLane { gpu, .. } => self.table.cpu_slots + gpu,
        }
    }
}

/// Execute the depth-first kernel sequence of `sct` under `config` across the
/// slots of `plan`, simulating per-slot durations and host-side Loop /
/// MapReduce stages.
#[allow(clippy::too_many_arguments)]
fn execute_once(
    fleet: &Fleet,
    sct: &Sct,
    config: &FrameworkConfig,
    lengths: &BTreeMap<String, u64>,
    scalars: &BTreeMap<String, f64>,
    clock: u64,
    host_reduce_per_partial_ms: f64,
    noise: &mut Option<Noise>,
) -> Result<ExecOutput, EngineError> {
    let table = build_slot_table(fleet, config);
    let ctx = slot_context(sct, &table, config);
    let plan = partition_input(sct, lengths, &table.fractions, &ctx)?;

    let timeline_count = table.cpu_slots + fleet.gpus.len();
    let mut exec = ExecCtx {
        fleet,
        config,
        plan: &plan,
        table: &table,
        scalars,
        clock,
        host_reduce_per_partial_ms,
        timelines: vec![0.0; timeline_count],
        slot_work: vec![0.0; table.devices.len()],
        host_ms: 0.0,
        tasks: Vec::new(),
        reductions: Vec::new(),
        events: Vec::new(),
    };
    exec_node(sct, &mut exec, noise)?;

    // Per-type aggregates over work time (waits excluded): CPU subdevices run
    // in parallel, a GPU serializes its lanes, GPUs run in parallel.
    let cpu_work: Vec<f64> = (0..table.cpu_slots).map(|i| exec.slot_work[i]).collect();
    let mut gpu_work = vec![0.0f64; fleet.gpus.len()];
    for (slot, dev) in table.devices.iter().enumerate() {
        if let SlotDevice::GpuLane { gpu, .. } = dev {
            gpu_work[*gpu] += exec.slot_work[slot];
        }
    }
    let cpu_time = cpu_work.iter().copied().fold(None, fold_positive_max);
    let gpu_time = gpu_work.iter().copied().fold(None, fold_positive_max);
    let dev = match (cpu_time, gpu_time) {
        (Some(c), Some(g)) => Some(c.min(g) / c.max(g)),
        _ => None,
    };
    let wall_ms =
        exec.timelines.iter().copied().fold(0.0f64, f64::max) + exec.host_ms;

    Ok(ExecOutput {
        stats: ExecutionStats {
            per_slot_times: exec.slot_work,
            cpu_time,
            gpu_time,
            dev,
            lbt: 0.0,
            wall_ms,
        },
        tasks: exec.tasks,
        reductions: exec.reductions,
        events: exec.events,
    })
}

fn fold_positive_max(acc: Option<f64>, x: f64) -> Option<f64> {
    if x > 0.0 {
        Some(acc.map_or(x, |a| a.max(x)))
    } else {
        acc
    }
}

fn exec_node(sct: &Sct, exec: &mut ExecCtx<'_>, noise: &mut Option<Noise>) -> Result<(), EngineError> {
    match sct.node() {
        SctNode::Pipeline { stages } => {
            for s in stages {
                exec_node(s, exec, noise)?;
            }
        }
        SctNode::Map { tree } => exec_node(tree, exec, noise)?,
        SctNode::Leaf { kernel } => exec_kernel(kernel, exec, noise)?,
        SctNode::Loop { body, state } => {
            let mut values: BTreeMap<String, f64> =
                state.updated_items.iter().map(|i| (i.clone(), 0.0)).collect();
            let mut iteration = 0u64;
            while state.condition.continues(iteration, &values) {
                exec_node(body, exec, noise)?;
                if !state.updated_items.is_empty() {
                    // The update applies independently per partition only when
                    // every refreshed item is a partitioned vector.
                    let parallel = state.updated_items.iter().all(|item| {
                        body.kernels().iter().any(|k| {
                            k.args.iter().any(|a| a.name == *item && a.is_partitioned())
                        })
                    });
                    exec.events.push(EngineEvent::StateUpdate { iteration, parallel });
                }
                if let LoopCondition::WhileBelow { item, step, .. } = &state.condition {
                    if let Some(v) = values.get_mut(item) {
                        *v += step;
                    }
                }
                if state.global_sync {
                    let m = exec.timelines.iter().copied().fold(0.0f64, f64::max);
                    exec.timelines.iter_mut().for_each(|t| *t = m);
                    exec.events.push(EngineEvent::Barrier { iteration });
                }
                iteration += 1;
            }
        }
        SctNode::MapReduce { map_stage, reduction } => {
            exec_node(map_stage, exec, noise)?;
            match reduction {
                Reduction::Tree(t) => exec_node(t, exec, noise)?,
                Reduction::Host(op) => host_reduce(map_stage, op, exec),
            }
        }
    }
    Ok(())
}

fn exec_kernel(
    kernel: &KernelSpec,
    exec: &mut ExecCtx<'_>,
    noise: &mut Option<Noise>,
) -> Result<(), EngineError> {
    let primary = kernel.primary_vector();
    for slot in 0..exec.table.devices.len() {
        let part = exec
            .plan
            .partition(&primary.name, slot)
            .expect("plan covers every data vector");
        if part.length == 0 {
            continue;
        }
        let time = match exec.table.devices[slot] {
            SlotDevice::CpuSub(_) => {
                let cpu = exec.fleet.cpu.as_ref().expect("cpu slot implies cpu model");
                cpu_kernel_time(
                    cpu,
                    exec.config.platform.fission_level,
                    &kernel.id,
                    part.length,
                    exec.clock,
                    noise,
                )?
            }
            SlotDevice::GpuLane { gpu, .. } => {
                let model = &exec.fleet.gpus[gpu];
                let bytes = transfer_bytes(kernel, |name| {
                    exec.plan.partition(name, slot).map(|p| p.length).unwrap_or(0)
                });
                gpu_kernel_time(
                    model,
                    kernel,
                    part.length,
                    bytes,
                    exec.config.platform.wgs_of(&kernel.id),
                    exec.config.platform.overlap,
                    noise,
                )?
            }
        };

        let mut trait_bindings = BTreeMap::new();
        for arg in &kernel.args {
            match arg.trait_binding {
                TraitBinding::Size => {
                    trait_bindings.insert(arg.name.clone(), part.length as f64);
                }
                TraitBinding::Offset => {
                    trait_bindings.insert(arg.name.clone(), part.offset as f64);
                }
                TraitBinding::None => {
                    if arg.kind == crate::sct::ArgKind::Scalar {
                        if let Some(v) = exec.scalars.get(&arg.name) {
                            trait_bindings.insert(arg.name.clone(), *v);
                        }
                    }
                }
            }
        }

        let t = exec.timeline_of(slot);
        exec.timelines[t] += time;
        exec.slot_work[slot] += time;
        exec.tasks.push(TaskRecord {
            slot,
            kernel: kernel.id.clone(),
            offset: part.offset,
            length: part.length,
            trait_bindings,
            time_ms: time,
        });
    }
    Ok(())
}

/// Host-side merge of the per-slot partial results, folded in slot order and
/// charged to the critical path after the last slot completes.
fn host_reduce(map_stage: &Sct, op: &HostReducer, exec: &mut ExecCtx<'_>) {
    let kernels = map_stage.kernels();
    let Some(first) = kernels.first() else { return };
    let primary = first.primary_vector();
    let mut partials = Vec::new();
    for slot in 0..exec.table.devices.len() {
        if let Some(p) = exec.plan.partition(&primary.name, slot) {
            if p.length > 0 {
                partials.push(index_sum(p.offset, p.length));
            }
        }
    }
    if partials.is_empty() {
        return;
    }
    let merged = partials[1..]
        .iter()
        .fold(partials[0], |acc, &x| op.apply(acc, x));
    exec.host_ms += exec.host_reduce_per_partial_ms * partials.len() as f64;
    exec.events.push(EngineEvent::Reduced { op: op.label().to_string(), value: merged });
    exec.reductions.push(ReductionOutcome {
        op: op.label().to_string(),
        partials,
        merged,
    });
}

/// Synthetic partial result of a partition: the sum of its element indices
/// (element `i` carries value `i`). With ADD the whole-domain merge is
/// independent of the split, which makes oracles exact.
pub fn index_sum(offset: u64, length: u64) -> f64 {
    if length == 0 {
        return 0.0;
    }
    let o = offset as u128;
    let l = length as u128;
    let total = l * (2 * o + l - 1) / 2;
    total as f64
}

// ── FIFO request intake ─────────────────────────────────────────────────────

enum Job {
    Run { sct: Box<Sct>, request: RunRequest, reply: mpsc::Sender<Result<RunOutcome, EngineError>> },
    Inspect(Box<dyn FnOnce(&mut Engine) + Send>),
}

/// Asynchronous facade over an [`Engine`]: requests are queued and handled
/// first-come-first-served by a worker thread; submission returns a ticket
/// whose result can be claimed from any thread.
pub struct EngineService {
    tx: mpsc::Sender<Job>,
    worker: Option<std::thread::JoinHandle<Engine>>,
}

pub struct RunTicket(mpsc::Receiver<Result<RunOutcome, EngineError>>);

impl RunTicket {
    /// Block until the engine has processed every request ahead of this one
    /// and then this one.
    pub fn wait(self) -> Result<RunOutcome, EngineError> {
        self.0.recv().expect("engine worker alive while tickets exist")
    }
}

impl EngineService {
    pub fn spawn(mut engine: Engine) -> Self {
        let (tx, rx) = mpsc::channel::<Job>();
        let worker = std::thread::spawn(move || {
            while let Ok(job) = rx.recv() {
                match job {
                    Job::Run { sct, request, reply } => {
                        let _ = reply.send(engine.run(&sct, &request));
                    }
                    Job::Inspect(f) => f(&mut engine),
                }
            }
            engine
        });
        EngineService { tx, worker: Some(worker) }
    }

    /// Enqueue an execution request. Returns immediately.
    pub fn submit(&self, sct: Sct, request: RunRequest) -> RunTicket {
        let (reply, rx) = mpsc::channel();
        self.tx
            .send(Job::Run { sct: Box::new(sct), request, reply })
            .expect("engine worker alive");
        RunTicket(rx)
    }

    /// Run a closure against the engine from the queue's tail (after all
    /// previously submitted requests).
    pub fn inspect<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut Engine) -> R + Send + 'static,
    ) -> R {
        let (tx, rx) = mpsc::channel();
        self.tx
            .send(Job::Inspect(Box::new(move |engine| {
                let _ = tx.send(f(engine));
            })))
            .expect("engine worker alive");
        rx.recv().expect("engine worker alive")
    }

    /// Drain the queue and take the engine back. Closing the sender ends the
    /// worker loop once every queued request has been handled.
    pub fn shutdown(mut self) -> Engine {
        let worker = self.worker.take().expect("shutdown once");
        let (dummy, _) = mpsc::channel();
        drop(std::mem::replace(&mut self.tx, dummy));
        worker.join().expect("engine worker exits cleanly")
    }
}

impl Drop for EngineService {
    fn drop(&mut self) {
        if let Some(worker) = self.worker.take() {
            let (tx, _) = mpsc::channel();
            drop(std::mem::replace(&mut self.tx, tx));
            let _ = worker.join();
        }
    }
}
