//! Scenario-driven simulation harness.
//!
//! A scenario file declares the device fleet (with synthetic cost models),
//! the kernel interfaces, the computation trees, named workloads and an
//! ordered run schedule, plus optional CPU load events and parameter
//! overrides. Running a scenario drives the engine through the schedule and
//! produces the run trace, the knowledge-base file and plot-ready CSV series.
//! Identical (scenario, seed) inputs produce byte-identical artifacts.

mod tree;

pub use tree::parse_tree;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::balance::BalancerParams;
use crate::engine::{
    Engine, EngineError, Fleet, FpPrecision, RunRequest, WorkloadId,
};
use crate::kb::{Derivation, KbError, KnowledgeBase, Profile};
use crate::platform::{
    CpuDeviceModel, FissionLevel, GpuDeviceModel, LoadProfile, Noise, cpu_get_configurations,
};
use crate::sct::{
    ArgKind, KernelArg, KernelResources, KernelSource, KernelSpec, Mutability, Sct, TraitBinding,
    TransferMode,
};
use crate::trace::{self, ReportSummary, TraceRecord};
use crate::tuner::{self, SearchTrace, TunerParams};

pub const SCENARIO_SCHEMA: &str = "hetsim-scenario/1";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse failure: {0}")]
    Parse(String),
    #[error("invalid scenario field '{field}': {message}")]
    Validation { field: String, message: String },
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Kb(#[from] KbError),
}

fn invalid(field: &str, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation { field: field.to_string(), message: message.into() }
}

// ── File schema ─────────────────────────────────────────────────────────────

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    schema: String,
    seed: Option<u64>,
    noise_amplitude: Option<f64>,
    host_reduce_per_partial_ms: Option<f64>,
    #[serde(default)]
    tuner: TunerSection,
    #[serde(default)]
    balancer: BalancerSection,
    devices: DevicesSection,
    kernels: BTreeMap<String, KernelDecl>,
    #[serde(rename = "sct")]
    scts: BTreeMap<String, SctDecl>,
    workloads: BTreeMap<String, WorkloadDecl>,
    schedule: Vec<ScheduleEntry>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TunerSection {
    occupancy_threshold: Option<f64>,
    precision_ms: Option<f64>,
    number_executions: Option<u32>,
    overlap_cap: Option<u32>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BalancerSection {
    weight: Option<f64>,
    max_dev: Option<f64>,
    c_factor: Option<f64>,
    trigger_threshold: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DevicesSection {
    cpu: Option<CpuDecl>,
    #[serde(default)]
    gpu: Vec<GpuDecl>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CpuDecl {
    cores: u32,
    #[serde(default)]
    topology: BTreeMap<String, u32>,
    throughput: BTreeMap<String, BTreeMap<String, f64>>,
    #[serde(default)]
    load_events: Vec<LoadEventDecl>,
    #[serde(default)]
    slot_overhead_ms: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadEventDecl {
    at_run: u64,
    multiplier: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GpuDecl {
    name: Option<String>,
    compute_units: u32,
    max_wg_per_cu: u32,
    local_mem_per_cu: u64,
    registers_per_cu: u64,
    #[serde(default = "default_one")]
    relative_perf: f64,
    throughput: BTreeMap<String, f64>,
    transfer_bandwidth: f64,
    #[serde(default = "default_half")]
    overlap_efficiency: f64,
    min_wgs: Option<u64>,
    max_wgs: Option<u64>,
}

fn default_one() -> f64 {
    1.0
}
fn default_half() -> f64 {
    0.5
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelDecl {
    #[serde(default = "default_dim")]
    dimensionality: u8,
    #[serde(default)]
    work_per_thread: BTreeMap<String, u64>,
    #[serde(default)]
    registers_per_thread: u64,
    #[serde(default)]
    local_mem_per_group: u64,
    fixed_wgs: Option<Vec<u64>>,
    args: Vec<ArgDecl>,
    kernel_file: Option<String>,
    kernel_function: Option<String>,
}

fn default_dim() -> u8 {
    1
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArgDecl {
    name: String,
    kind: String,
    #[serde(default)]
    mutable: bool,
    #[serde(default)]
    local: bool,
    element_width: Option<u64>,
    transfer: Option<String>,
    epu: Option<u64>,
    #[serde(rename = "trait")]
    trait_binding: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct SctDecl {
    tree: String,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct WorkloadDecl {
    dims: Vec<u64>,
    #[serde(default = "default_precision")]
    precision: String,
    #[serde(default)]
    lengths: BTreeMap<String, u64>,
    #[serde(default)]
    scalars: BTreeMap<String, f64>,
}

fn default_precision() -> String {
    "single".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleEntry {
    sct: String,
    workload: String,
    #[serde(default = "default_repeat")]
    repeat: u64,
}

fn default_repeat() -> u64 {
    1
}

// ── Built scenario ──────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ScheduleItem {
    pub sct: String,
    pub workload: String,
    pub repeat: u64,
}

/// Workload definition: the characterization plus explicit per-argument
/// vector lengths and scalar values.
pub type WorkloadDef = (WorkloadId, BTreeMap<String, u64>, BTreeMap<String, f64>);

/// A parsed and validated scenario, ready to drive an engine.
#[derive(Debug)]
pub struct Scenario {
    pub fleet: Fleet,
    pub kernels: BTreeMap<String, KernelSpec>,
    pub scts: BTreeMap<String, Sct>,
    pub workloads: BTreeMap<String, WorkloadDef>,
    pub schedule: Vec<ScheduleItem>,
    pub tuner_params: TunerParams,
    pub balancer_params: BalancerParams,
    pub seed: Option<u64>,
    pub noise_amplitude: f64,
    pub host_reduce_per_partial_ms: f64,
}

impl Scenario {
    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let file: ScenarioFile =
            toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
        build(file)
    }

    /// Build the execution request for a (sct, workload) pairing. Lengths and
    /// scalar values for arguments the tree does not have are dropped, since
    /// a workload may be shared by trees with different interfaces.
    pub fn request_for(&self, sct_name: &str, workload_name: &str) -> Result<RunRequest, ScenarioError> {
        let (workload, lengths, scalars) = self
            .workloads
            .get(workload_name)
            .ok_or_else(|| invalid("schedule.workload", format!("unknown workload '{workload_name}'")))?;
        let sct = self.sct(sct_name)?;
        let known = |name: &String| {
            sct.kernels().iter().any(|k| k.args.iter().any(|a| &a.name == name))
        };
        Ok(RunRequest {
            workload: workload.clone(),
            vector_lengths:
                lengths.iter().filter(|(k, _)| known(k)).map(|(k, v)| (k.clone(), *v)).collect(),
            scalar_values:
                scalars.iter().filter(|(k, _)| known(k)).map(|(k, v)| (k.clone(), *v)).collect(),
        })
    }

    pub fn sct(&self, name: &str) -> Result<&Sct, ScenarioError> {
        self.scts
            .get(name)
            .ok_or_else(|| invalid("schedule.sct", format!("unknown sct '{name}'")))
    }

    /// Instantiate a fresh engine for this scenario: fleet, parameters,
    /// noise and the knowledge base carried in `options`.
    pub fn engine(&self, options: &RunOptions) -> Result<Engine, ScenarioError> {
        let kb = options.kb()?;
        let seed = options.seed.or(self.seed);
        let noise = match (self.noise_amplitude, seed) {
            (0.0, _) => None,
            (a, Some(s)) => Some(Noise::new(s, a)),
            (_, None) => {
                return Err(invalid("noise_amplitude", "noise needs a seed (file or --seed)"))
            }
        };
        let mut engine = Engine::new(self.fleet.clone(), kb)?.with_noise(noise);
        engine.tuner_params = self.tuner_params;
        engine.balancer_params = self.balancer_params;
        engine.profiling_enabled = !options.no_profiling;
        engine.host_reduce_per_partial_ms = self.host_reduce_per_partial_ms;
        Ok(engine)
    }
}

fn parse_level(label: &str, field: &str) -> Result<FissionLevel, ScenarioError> {
    FissionLevel::parse(label)
        .ok_or_else(|| invalid(field, format!("unknown fission level '{label}'")))
}

fn build(file: ScenarioFile) -> Result<Scenario, ScenarioError> {
    if file.schema != SCENARIO_SCHEMA {
        return Err(invalid(
            "schema",
            format!("unsupported schema '{}', expected '{SCENARIO_SCHEMA}'", file.schema),
        ));
    }
    if file.schedule.is_empty() {
        return Err(invalid("schedule", "the schedule must not be empty"));
    }

    // Kernels.
    let mut kernels = BTreeMap::new();
    for (name, decl) in &file.kernels {
        let field = format!("kernels.{name}");
        let mut args = Vec::new();
        for a in &decl.args {
            let arg = build_arg(a, &field)?;
            args.push(arg);
        }
        let mut spec = KernelSpec::new(
            name,
            args,
            decl.work_per_thread.clone(),
            decl.fixed_wgs.clone(),
            KernelResources {
                registers_per_thread: decl.registers_per_thread,
                local_mem_per_group: decl.local_mem_per_group,
            },
            decl.dimensionality,
        )
        .map_err(|e| invalid(&field, e.to_string()))?;
        if let (Some(f), Some(func)) = (&decl.kernel_file, &decl.kernel_function) {
            spec.source = Some(KernelSource { file: f.clone(), function: func.clone() });
        }
        kernels.insert(name.clone(), spec);
    }

    // Trees.
    let mut scts = BTreeMap::new();
    for (name, decl) in &file.scts {
        let field = format!("sct.{name}.tree");
        let sct = parse_tree(&decl.tree, &kernels).map_err(|e| invalid(&field, e))?;
        sct.validate_communication().map_err(|e| invalid(&field, e.to_string()))?;
        scts.insert(name.clone(), sct);
    }

    // Devices.
    let cpu = match &file.devices.cpu {
        None => None,
        Some(decl) => Some(build_cpu(decl)?),
    };
    let mut gpus = Vec::new();
    for (i, decl) in file.devices.gpu.iter().enumerate() {
        gpus.push(build_gpu(decl, i)?);
    }
    let fleet = Fleet { cpu, gpus };
    fleet
        .validate()
        .map_err(|e| invalid("devices", e.to_string()))?;

    // Throughput coverage for every kernel used in a tree.
    let mut used: BTreeMap<&str, ()> = BTreeMap::new();
    for sct in scts.values() {
        for k in sct.kernels() {
            used.insert(&k.id, ());
        }
    }
    if let Some(cpu) = &fleet.cpu {
        for &kernel in used.keys() {
            for level in cpu_get_configurations(cpu) {
                if cpu.throughput.get(kernel).and_then(|m| m.get(&level)).is_none() {
                    return Err(invalid(
                        &format!("devices.cpu.throughput.{kernel}.{}", level.label()),
                        "missing per-subdevice throughput for a supported fission level",
                    ));
                }
            }
        }
    }
    for gpu in &fleet.gpus {
        for &kernel in used.keys() {
            if !gpu.throughput.contains_key(kernel) {
                return Err(invalid(
                    &format!("devices.gpu.{}.throughput.{kernel}", gpu.name),
                    "missing throughput for a kernel used in the schedule",
                ));
            }
        }
    }

    // Workloads.
    let mut workloads = BTreeMap::new();
    for (name, decl) in &file.workloads {
        let field = format!("workloads.{name}");
        let precision = match decl.precision.as_str() {
            "none" => FpPrecision::None,
            "single" => FpPrecision::Single,
            "double" => FpPrecision::Double,
            other => {
                return Err(invalid(
                    &format!("{field}.precision"),
                    format!("unknown precision '{other}'"),
                ))
            }
        };
        let workload = WorkloadId::new(decl.dims.clone(), precision)
            .map_err(|e| invalid(&format!("{field}.dims"), e.to_string()))?;
        workloads.insert(name.clone(), (workload, decl.lengths.clone(), decl.scalars.clone()));
    }

    // Workload argument names must exist somewhere (typo guard); per-run
    // requests later narrow them to the paired tree's interface.
    let any_arg_known = |name: &str| {
        scts.values()
            .any(|sct| sct.kernels().iter().any(|k| k.args.iter().any(|a| a.name == name)))
    };
    for (wname, (_, lengths, scalars)) in &workloads {
        for key in lengths.keys().chain(scalars.keys()) {
            if !any_arg_known(key) {
                return Err(invalid(
                    &format!("workloads.{wname}.lengths.{key}"),
                    format!("'{key}' is not an argument of any declared sct"),
                ));
            }
        }
    }

    // Schedule references.
    let mut schedule = Vec::new();
    for (i, entry) in file.schedule.iter().enumerate() {
        let field = format!("schedule[{i}]");
        if !scts.contains_key(&entry.sct) {
            return Err(invalid(&format!("{field}.sct"), format!("unknown sct '{}'", entry.sct)));
        }
        if !workloads.contains_key(&entry.workload) {
            return Err(invalid(
                &format!("{field}.workload"),
                format!("unknown workload '{}'", entry.workload),
            ));
        }
        if entry.repeat == 0 {
            return Err(invalid(&format!("{field}.repeat"), "repeat must be >= 1"));
        }
        schedule.push(ScheduleItem {
            sct: entry.sct.clone(),
            workload: entry.workload.clone(),
            repeat: entry.repeat,
        });
    }

    // Parameters.
    let defaults = TunerParams::default();
    let tuner_params = TunerParams {
        occupancy_threshold: file.tuner.occupancy_threshold.unwrap_or(defaults.occupancy_threshold),
        precision_ms: file.tuner.precision_ms.or(defaults.precision_ms),
        number_executions: file.tuner.number_executions.unwrap_or(defaults.number_executions),
        overlap_cap: file.tuner.overlap_cap.unwrap_or(defaults.overlap_cap),
    };
    tuner_params.validate().map_err(|e| invalid("tuner", e))?;
    let defaults = BalancerParams::default();
    let balancer_params = BalancerParams {
        weight: file.balancer.weight.unwrap_or(defaults.weight),
        max_dev: file.balancer.max_dev.unwrap_or(defaults.max_dev),
        c_factor: file.balancer.c_factor.unwrap_or(defaults.c_factor),
        trigger_threshold: file.balancer.trigger_threshold.unwrap_or(defaults.trigger_threshold),
    };
    balancer_params.validate().map_err(|e| invalid("balancer", e))?;

    let noise_amplitude = file.noise_amplitude.unwrap_or(0.0);
    if !(0.0..=1.0).contains(&noise_amplitude) {
        return Err(invalid("noise_amplitude", "must be in [0,1]"));
    }

    Ok(Scenario {
        fleet,
        kernels,
        scts,
        workloads,
        schedule,
        tuner_params,
        balancer_params,
        seed: file.seed,
        noise_amplitude,
        host_reduce_per_partial_ms: file.host_reduce_per_partial_ms.unwrap_or(0.0),
    })
}

fn build_arg(decl: &ArgDecl, field: &str) -> Result<KernelArg, ScenarioError> {
    let field = format!("{field}.args.{}", decl.name);
    let kind = match decl.kind.as_str() {
        "vector" => ArgKind::Vector,
        "scalar" => ArgKind::Scalar,
        other => return Err(invalid(&field, format!("unknown arg kind '{other}'"))),
    };
    let mutability = if decl.mutable { Mutability::Mutable } else { Mutability::Immutable };
    match kind {
        ArgKind::Scalar => {
            let trait_binding = match decl.trait_binding.as_deref() {
                None | Some("none") => TraitBinding::None,
                Some("size") => TraitBinding::Size,
                Some("offset") => TraitBinding::Offset,
                Some(other) => {
                    return Err(invalid(&field, format!("unknown trait '{other}'")))
                }
            };
            let mut arg = KernelArg::scalar(&decl.name, trait_binding);
            arg.mutability = mutability;
            Ok(arg)
        }
        ArgKind::Vector => {
            if decl.local {
                return Ok(KernelArg::local_scratch(&decl.name, decl.element_width.unwrap_or(4)));
            }
            let transfer = match decl.transfer.as_deref() {
                None | Some("partition") => TransferMode::Partition,
                Some("copy") => TransferMode::Copy,
                Some(other) => {
                    return Err(invalid(&field, format!("unknown transfer mode '{other}'")))
                }
            };
            KernelArg::vector_with_mode(
                &decl.name,
                decl.element_width.unwrap_or(4),
                decl.epu.unwrap_or(1),
                mutability,
                transfer,
            )
            .map_err(|e| invalid(&field, e.to_string()))
        }
    }
}

fn build_cpu(decl: &CpuDecl) -> Result<CpuDeviceModel, ScenarioError> {
    let mut cache_topology = BTreeMap::new();
    for (label, &count) in &decl.topology {
        let level = parse_level(label, &format!("devices.cpu.topology.{label}"))?;
        cache_topology.insert(level, count);
    }
    let mut throughput = BTreeMap::new();
    for (kernel, per_level) in &decl.throughput {
        let mut map = BTreeMap::new();
        for (label, &t) in per_level {
            let level =
                parse_level(label, &format!("devices.cpu.throughput.{kernel}.{label}"))?;
            map.insert(level, t);
        }
        throughput.insert(kernel.clone(), map);
    }
    let mut events: Vec<(u64, f64)> =
        decl.load_events.iter().map(|e| (e.at_run, e.multiplier)).collect();
    events.sort_by_key(|&(at, _)| at);
    let cpu = CpuDeviceModel {
        cores: decl.cores,
        cache_topology,
        throughput,
        load_profile: LoadProfile { events },
        slot_overhead_ms: decl.slot_overhead_ms,
    };
    cpu.validate().map_err(|e| invalid("devices.cpu", e.to_string()))?;
    Ok(cpu)
}

fn build_gpu(decl: &GpuDecl, index: usize) -> Result<GpuDeviceModel, ScenarioError> {
    let name = decl.name.clone().unwrap_or_else(|| format!("gpu{index}"));
    let gpu = GpuDeviceModel {
        name: name.clone(),
        compute_units: decl.compute_units,
        max_wg_per_cu: decl.max_wg_per_cu,
        local_mem_per_cu: decl.local_mem_per_cu,
        registers_per_cu: decl.registers_per_cu,
        relative_perf: decl.relative_perf,
        throughput: decl.throughput.clone(),
        transfer_bandwidth: decl.transfer_bandwidth,
        overlap_efficiency: decl.overlap_efficiency,
        min_wgs: decl.min_wgs.unwrap_or(1),
        max_wgs: decl.max_wgs.unwrap_or(1024),
    };
    gpu.validate()
        .map_err(|e| invalid(&format!("devices.gpu.{name}"), e.to_string()))?;
    Ok(gpu)
}

// ── Operations ──────────────────────────────────────────────────────────────

/// Options common to the scenario-level operations.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub no_profiling: bool,
    pub kb_text: Option<String>,
}

impl RunOptions {
    fn kb(&self) -> Result<KnowledgeBase, ScenarioError> {
        match &self.kb_text {
            Some(text) => Ok(KnowledgeBase::from_toml_str(text)?),
            None => Ok(KnowledgeBase::new()),
        }
    }
}

/// Artifacts of one scenario run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Artifacts {
    pub trace: String,
    pub kb: String,
    pub series_csv: String,
    pub summary: ReportSummary,
}

/// Execute a scenario's schedule through the engine.
pub fn run_scenario(text: &str, options: &RunOptions) -> Result<Artifacts, ScenarioError> {
    let scenario = Scenario::parse(text)?;
    let mut engine = scenario.engine(options)?;

    let mut records = Vec::new();
    for item in &scenario.schedule {
        let sct = scenario.sct(&item.sct)?;
        let request = scenario.request_for(&item.sct, &item.workload)?;
        for _ in 0..item.repeat {
            let outcome = engine.run(sct, &request)?;
            records.push(TraceRecord::from_outcome(&item.sct, &outcome));
        }
    }

    Ok(Artifacts {
        trace: trace::to_toml(&records),
        kb: engine.kb.to_toml_string(),
        series_csv: trace::to_series_csv(&records),
        summary: trace::summarize(&records),
    })
}

/// Result of a forced profile construction.
#[derive(Debug, Clone)]
pub struct ProfileArtifacts {
    pub profile: Profile,
    pub kb: String,
    pub search: SearchTrace,
}

/// Force profile construction for a named (sct, workload) pair, bypassing the
/// trigger conditions.
pub fn profile_scenario(
    text: &str,
    sct_name: &str,
    workload_name: &str,
    options: &RunOptions,
) -> Result<ProfileArtifacts, ScenarioError> {
    let scenario = Scenario::parse(text)?;
    let sct = scenario.sct(sct_name)?;
    let request = scenario.request_for(sct_name, workload_name)?;
    let mut engine = scenario.engine(options)?;
    let (profile, search) = tuner::build_profile(&mut engine, sct, &request)?;
    Ok(ProfileArtifacts { profile, kb: engine.kb.to_toml_string(), search })
}

/// Result of a knowledge-base derivation query.
#[derive(Debug, Clone)]
pub struct DeriveOutput {
    pub derivation: Derivation,
    /// The stored profile verbatim, on an exact hit.
    pub stored: Option<Profile>,
}

/// Print what the KB would derive for a named (sct, workload) pair, without
/// running anything.
pub fn derive_scenario(
    text: &str,
    sct_name: &str,
    workload_name: &str,
    options: &RunOptions,
) -> Result<DeriveOutput, ScenarioError> {
    let scenario = Scenario::parse(text)?;
    let sct = scenario.sct(sct_name)?;
    let request = scenario.request_for(sct_name, workload_name)?;
    let kb = options.kb()?;
    let derivation = kb.derive(sct.id(), &request.workload);
    let stored = kb.get(sct.id(), &request.workload).cloned();
    Ok(DeriveOutput { derivation, stored })
}
