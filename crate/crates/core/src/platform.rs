//! Simulated CPU and GPU execution platforms.
//!
//! Stands in for real device back-ends: CPUs expose cache/NUMA fission
//! levels, GPUs expose occupancy-filtered work-group size candidates and
//! overlapped execution. Timing comes from declared linear cost models, so
//! optima are analytically derivable and runs are reproducible.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::sct::{KernelId, KernelSpec, Sct};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlatformError {
    #[error("no declared throughput for kernel '{kernel}' on {device}")]
    UnknownKernelThroughput { kernel: String, device: String },
    #[error("invalid device model: {0}")]
    InvalidModel(String),
}

/// CPU device-fission levels, ordered from finest to no fission.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum FissionLevel {
    L1,
    L2,
    L3,
    Numa,
    NoFission,
}

impl FissionLevel {
    pub const ORDER: [FissionLevel; 5] = [
        FissionLevel::L1,
        FissionLevel::L2,
        FissionLevel::L3,
        FissionLevel::Numa,
        FissionLevel::NoFission,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            FissionLevel::L1 => "L1",
            FissionLevel::L2 => "L2",
            FissionLevel::L3 => "L3",
            FissionLevel::Numa => "NUMA",
            FissionLevel::NoFission => "NO_FISSION",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ORDER.iter().copied().find(|l| l.label() == s)
    }
}

impl std::fmt::Display for FissionLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

/// External CPU load as a step function over the run index; multiplier >= 1
/// scales CPU execution times.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoadProfile {
    /// (from_run, multiplier) pairs, sorted by run.
    pub events: Vec<(u64, f64)>,
}

impl LoadProfile {
    pub fn at(&self, run: u64) -> f64 {
        let mut m = 1.0;
        for &(from, mult) in &self.events {
            if run >= from {
                m = mult;
            } else {
                break;
            }
        }
        m
    }
}

/// Simulated multi-core CPU exposed as one OpenCL-style device that can be
/// fissioned into cache/NUMA-aligned subdevices.
///
/// `throughput[kernel][level]` is elements/ms of one subdevice at that
/// fission level. A subdevice's identity (and cache locality) changes with
/// the level, which is what makes the fission axis worth searching.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CpuDeviceModel {
    pub cores: u32,
    /// Subdevice count per supported fission level; NO_FISSION is implicit
    /// (always supported, one subdevice).
    pub cache_topology: BTreeMap<FissionLevel, u32>,
    pub throughput: BTreeMap<KernelId, BTreeMap<FissionLevel, f64>>,
    pub load_profile: LoadProfile,
    /// Optional affine term: fixed cost per kernel task per slot. Zero keeps
    /// the model homogeneous of degree 1 in the partition size.
    pub slot_overhead_ms: f64,
}

impl CpuDeviceModel {
    pub fn validate(&self) -> Result<(), PlatformError> {
        if self.cores == 0 {
            return Err(PlatformError::InvalidModel("cpu needs at least one core".into()));
        }
        let mut prev: Option<u32> = None;
        for level in FissionLevel::ORDER {
            if let Some(&n) = self.cache_topology.get(&level) {
                if n == 0 {
                    return Err(PlatformError::InvalidModel(format!(
                        "fission level {level} declares zero subdevices"
                    )));
                }
                if level == FissionLevel::NoFission && n != 1 {
                    return Err(PlatformError::InvalidModel(
                        "NO_FISSION yields exactly one subdevice".into(),
                    ));
                }
                if let Some(p) = prev {
                    if n > p {
                        return Err(PlatformError::InvalidModel(format!(
                            "subdevice counts must be non-increasing towards {level}"
                        )));
                    }
                }
                prev = Some(n);
            }
        }
        for per_level in self.throughput.values() {
            for &t in per_level.values() {
                if t.is_nan() || t <= 0.0 {
                    return Err(PlatformError::InvalidModel(
                        "cpu throughput must be positive".into(),
                    ));
                }
            }
        }
        if self.load_profile.events.iter().any(|&(_, m)| m < 1.0) {
            return Err(PlatformError::InvalidModel("load multipliers must be >= 1".into()));
        }
        Ok(())
    }

    /// Subdevices produced by fissioning at `level`.
    pub fn subdevices(&self, level: FissionLevel) -> u32 {
        if level == FissionLevel::NoFission {
            1
        } else {
            self.cache_topology.get(&level).copied().unwrap_or(1)
        }
    }

    fn throughput_at(&self, kernel: &str, level: FissionLevel) -> Result<f64, PlatformError> {
        self.throughput
            .get(kernel)
            .and_then(|m| m.get(&level))
            .copied()
            .ok_or_else(|| PlatformError::UnknownKernelThroughput {
                kernel: kernel.to_string(),
                device: format!("cpu at {level}"),
            })
    }
}

/// Ordered fission levels the device supports, finest first, NO_FISSION last.
pub fn cpu_get_configurations(cpu: &CpuDeviceModel) -> Vec<FissionLevel> {
    let mut out: Vec<FissionLevel> = FissionLevel::ORDER
        .into_iter()
        .filter(|l| *l != FissionLevel::NoFission && cpu.cache_topology.contains_key(l))
        .collect();
    out.push(FissionLevel::NoFission);
    out
}

/// Simulated GPU device.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpuDeviceModel {
    pub name: String,
    pub compute_units: u32,
    pub max_wg_per_cu: u32,
    pub local_mem_per_cu: u64,
    pub registers_per_cu: u64,
    /// Static weight for the multi-GPU split.
    pub relative_perf: f64,
    /// Elements/ms at full occupancy, per kernel.
    pub throughput: BTreeMap<KernelId, f64>,
    /// Bytes/ms over the host link.
    pub transfer_bandwidth: f64,
    /// Fraction of the transfer hidden per extra overlap level, in [0,1].
    pub overlap_efficiency: f64,
    /// Work-group size floor (wavefront/warp) and device ceiling for the
    /// candidate generator.
    pub min_wgs: u64,
    pub max_wgs: u64,
}

impl GpuDeviceModel {
    pub fn validate(&self) -> Result<(), PlatformError> {
        let positive = [
            ("compute_units", self.compute_units as f64),
            ("max_wg_per_cu", self.max_wg_per_cu as f64),
            ("relative_perf", self.relative_perf),
            ("transfer_bandwidth", self.transfer_bandwidth),
            ("min_wgs", self.min_wgs as f64),
            ("max_wgs", self.max_wgs as f64),
        ];
        for (name, v) in positive {
            if v.is_nan() || v <= 0.0 {
                return Err(PlatformError::InvalidModel(format!(
                    "gpu '{}': {name} must be positive",
                    self.name
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_efficiency) {
            return Err(PlatformError::InvalidModel(format!(
                "gpu '{}': overlap_efficiency must be in [0,1]",
                self.name
            )));
        }
        if self.min_wgs > self.max_wgs {
            return Err(PlatformError::InvalidModel(format!(
                "gpu '{}': min_wgs exceeds max_wgs",
                self.name
            )));
        }
        for &t in self.throughput.values() {
            if t.is_nan() || t <= 0.0 {
                return Err(PlatformError::InvalidModel(format!(
                    "gpu '{}': throughput must be positive",
                    self.name
                )));
            }
        }
        Ok(())
    }

    fn throughput_of(&self, kernel: &str) -> Result<f64, PlatformError> {
        self.throughput.get(kernel).copied().ok_or_else(|| {
            PlatformError::UnknownKernelThroughput {
                kernel: kernel.to_string(),
                device: format!("gpu '{}'", self.name),
            }
        })
    }
}

/// One point of the per-device configuration space.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PlatformConfig {
    pub fission_level: FissionLevel,
    pub overlap: u32,
    pub wgs_per_kernel: BTreeMap<KernelId, u64>,
}

impl PlatformConfig {
    pub fn wgs_of(&self, kernel: &str) -> u64 {
        self.wgs_per_kernel.get(kernel).copied().unwrap_or(1)
    }
}

// ── Occupancy ───────────────────────────────────────────────────────────────

/// Fraction of a compute unit's concurrent work-group capacity the kernel can
/// reach at work-group size `wgs`: the tightest of the work-group slot,
/// local-memory and register limits, over `max_wg_per_cu`.
pub fn occupancy(gpu: &GpuDeviceModel, kernel: &KernelSpec, wgs: u64) -> f64 {
    let cap = gpu.max_wg_per_cu as u64;
    let by_slots = cap;
    let by_local = gpu
        .local_mem_per_cu
        .checked_div(kernel.resources.local_mem_per_group)
        .map_or(cap, |groups| groups.min(cap));
    let regs_per_group = kernel.resources.registers_per_thread.saturating_mul(wgs);
    let by_regs = gpu
        .registers_per_cu
        .checked_div(regs_per_group)
        .map_or(cap, |groups| groups.min(cap));
    by_slots.min(by_local).min(by_regs) as f64 / cap as f64
}

/// One work-group size assignment covering every kernel of the tree, with the
/// worst per-kernel/per-device occupancy it reaches.
#[derive(Debug, Clone, PartialEq)]
pub struct WgsCandidate {
    pub assignment: BTreeMap<KernelId, u64>,
    pub min_occupancy: f64,
}

/// GPU configuration space: overlap degrees in natural order and work-group
/// size candidates in non-increasing occupancy order.
#[derive(Debug, Clone, PartialEq)]
pub struct GpuConfigSpace {
    pub overlaps: Vec<u32>,
    pub wgs_candidates: Vec<WgsCandidate>,
}

/// Enumerate the GPU configuration space for `sct` over one or more devices.
///
/// Candidates are the power-of-two sizes within the devices' limits whose
/// occupancy stays at or above `occupancy_threshold` for every kernel on
/// every device; kernels with a user-pinned size keep it in every candidate.
/// When nothing passes the threshold, the single best-occupancy size is
/// returned. Sizes with zero occupancy anywhere are never candidates.
pub fn gpu_get_configurations(
    gpus: &[&GpuDeviceModel],
    sct: &Sct,
    occupancy_threshold: f64,
    overlap_cap: u32,
) -> GpuConfigSpace {
    assert!(occupancy_threshold > 0.0, "occupancy threshold must be positive");
    let overlaps: Vec<u32> = (1..=overlap_cap.max(1)).collect();
    if gpus.is_empty() {
        return GpuConfigSpace { overlaps: vec![1], wgs_candidates: Vec::new() };
    }

    let kernels = sct.kernels();
    let min_wgs = gpus.iter().map(|g| g.min_wgs).max().unwrap_or(1);
    let max_wgs = gpus.iter().map(|g| g.max_wgs).min().unwrap_or(1024);

    let mut sizes = Vec::new();
    let mut s = 1u64;
    while s <= max_wgs {
        if s >= min_wgs {
            sizes.push(s);
        }
        s <<= 1;
    }

    let mut scored: Vec<WgsCandidate> = Vec::new();
    for &size in &sizes {
        let mut min_occ = f64::INFINITY;
        let mut assignment = BTreeMap::new();
        for kernel in &kernels {
            let w = kernel.fixed_outer_wgs().unwrap_or(size);
            assignment.insert(kernel.id.clone(), w);
            for gpu in gpus {
                min_occ = min_occ.min(occupancy(gpu, kernel, w));
            }
        }
        if kernels.is_empty() {
            min_occ = 1.0;
        }
        if min_occ > 0.0 && !scored.iter().any(|c| c.assignment == assignment) {
            scored.push(WgsCandidate { assignment, min_occupancy: min_occ });
        }
    }

    // Non-increasing occupancy, ties broken by the larger size first.
    scored.sort_by(|a, b| {
        b.min_occupancy
            .partial_cmp(&a.min_occupancy)
            .unwrap()
            .then_with(|| outer_size(b).cmp(&outer_size(a)))
    });

    let passing: Vec<WgsCandidate> = scored
        .iter()
        .filter(|c| c.min_occupancy >= occupancy_threshold)
        .cloned()
        .collect();
    let wgs_candidates = if passing.is_empty() {
        scored.into_iter().take(1).collect()
    } else {
        passing
    };
    GpuConfigSpace { overlaps, wgs_candidates }
}

fn outer_size(c: &WgsCandidate) -> u64 {
    c.assignment.values().copied().max().unwrap_or(1)
}

// ── Simulated timing ────────────────────────────────────────────────────────

/// Optional seeded multiplicative noise; disabled unless a seed is given.
#[derive(Debug, Clone)]
pub struct Noise {
    rng: ChaCha8Rng,
    amplitude: f64,
}

impl Noise {
    pub fn new(seed: u64, amplitude: f64) -> Self {
        Noise { rng: ChaCha8Rng::seed_from_u64(seed), amplitude }
    }

    pub fn factor(&mut self) -> f64 {
        1.0 + self.rng.random::<f64>() * self.amplitude
    }
}

/// Time for one CPU subdevice slot to execute `elements` of `kernel` at the
/// given fission level: size over per-subdevice throughput, scaled by the
/// external load at `clock` (a run ordinal). Zero-size partitions cost
/// nothing.
pub fn cpu_kernel_time(
    cpu: &CpuDeviceModel,
    level: FissionLevel,
    kernel: &str,
    elements: u64,
    clock: u64,
    noise: &mut Option<Noise>,
) -> Result<f64, PlatformError> {
    if elements == 0 {
        return Ok(0.0);
    }
    let thr = cpu.throughput_at(kernel, level)?;
    let mut t = cpu.slot_overhead_ms + elements as f64 / thr * cpu.load_profile.at(clock);
    if let Some(n) = noise {
        t *= n.factor();
    }
    Ok(t)
}

/// Bytes moved over the host link for one execution of `kernel` on a slot:
/// partitioned vectors contribute their partition, COPY vectors the whole
/// data set.
pub fn transfer_bytes(kernel: &KernelSpec, partition_len: impl Fn(&str) -> u64) -> u64 {
    kernel
        .args
        .iter()
        .filter(|a| a.is_data_vector())
        .map(|a| partition_len(&a.name) * a.element_width)
        .sum()
}

/// Time for one GPU overlap lane to execute its partition of `kernel`:
/// compute at occupancy-scaled throughput plus the transfer cost discounted
/// geometrically per extra overlap level.
pub fn gpu_kernel_time(
    gpu: &GpuDeviceModel,
    kernel: &KernelSpec,
    domain_elements: u64,
    bytes: u64,
    wgs: u64,
    overlap: u32,
    noise: &mut Option<Noise>,
) -> Result<f64, PlatformError> {
    if domain_elements == 0 {
        return Ok(0.0);
    }
    let thr = gpu.throughput_of(&kernel.id)?;
    let occ = occupancy(gpu, kernel, wgs).max(f64::MIN_POSITIVE);
    let compute = domain_elements as f64 / (thr * occ);
    let hidden = (1.0 - gpu.overlap_efficiency).powi(overlap.max(1) as i32 - 1);
    let transfer = bytes as f64 / gpu.transfer_bandwidth * hidden;
    let mut t = compute + transfer;
    if let Some(n) = noise {
        t *= n.factor();
    }
    Ok(t)
}
