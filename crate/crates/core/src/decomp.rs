//! Locality-aware domain decomposition.
//!
//! Input vectors are split into one contiguous partition per parallel
//! execution slot so that two kernels communicating a vector see the same
//! partitioning, every partition length is a multiple of each kernel's
//! `epu / nu` quotient, and a multiple of every work-group size assigned to
//! the slots. All three families are divisibility constraints, so the minimal
//! valid partition size (the *granule*) is their lcm.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::sct::{KernelId, KernelSpec, Sct, TransferMode};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("kernel '{kernel}': epu of vector '{vector}' is not a multiple of its work_per_thread")]
    EpuNuViolation { kernel: String, vector: String },
    #[error("no valid partitioning of vector '{vector}': {reason}")]
    InfeasiblePartition { vector: String, reason: String },
    #[error("no length supplied for vector '{0}'")]
    MissingLength(String),
    #[error("invalid slot fractions: {0}")]
    InvalidFractions(String),
}

/// Role of one parallel execution slot; GPU slots carry the weight used to
/// place residual granules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlotRole {
    Cpu,
    Gpu { weight: f64 },
}

impl SlotRole {
    pub fn is_gpu(&self) -> bool {
        matches!(self, SlotRole::Gpu { .. })
    }
}

/// Per-slot execution context the partitioner must respect: the slot roles
/// and the work-group size assigned to every kernel on each slot (outermost
/// dimension).
#[derive(Debug, Clone)]
pub struct SlotContext {
    pub roles: Vec<SlotRole>,
    pub wgs: Vec<BTreeMap<KernelId, u64>>,
}

impl SlotContext {
    pub fn new(roles: Vec<SlotRole>, wgs: Vec<BTreeMap<KernelId, u64>>) -> Self {
        assert_eq!(roles.len(), wgs.len(), "one wgs map per slot");
        SlotContext { roles, wgs }
    }

    /// Uniform context: same wgs per kernel on every slot.
    pub fn uniform(roles: Vec<SlotRole>, wgs: BTreeMap<KernelId, u64>) -> Self {
        let n = roles.len();
        SlotContext { roles, wgs: vec![wgs; n] }
    }

    pub fn slots(&self) -> usize {
        self.roles.len()
    }

    fn wgs_of(&self, slot: usize, kernel: &str) -> u64 {
        self.wgs[slot].get(kernel).copied().unwrap_or(1)
    }
}

/// One contiguous slice of a vector assigned to an execution slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Partition {
    pub offset: u64,
    pub length: u64,
    pub slot: usize,
}

/// A complete decomposition: per vector, one partition per slot (COPY vectors
/// get full-span entries), plus the granularity each partitioned vector was
/// rounded to.
#[derive(Debug, Clone)]
pub struct PartitionPlan {
    pub slots: usize,
    pub per_vector: BTreeMap<String, Vec<Partition>>,
    pub granularity: BTreeMap<String, u64>,
    pub copy_vectors: BTreeSet<String>,
}

impl PartitionPlan {
    pub fn partition(&self, vector: &str, slot: usize) -> Option<Partition> {
        self.per_vector.get(vector).map(|ps| ps[slot])
    }

    /// True when the slot received work for at least one partitioned vector.
    pub fn slot_active(&self, slot: usize) -> bool {
        self.per_vector.iter().any(|(v, ps)| !self.copy_vectors.contains(v) && ps[slot].length > 0)
    }
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// Minimal valid partition size of `vector` in elements: any multiple of the
/// returned granule satisfies, for every kernel touching the vector and every
/// slot, both the `epu/nu` divisibility and the work-group size divisibility.
pub fn granule(
    vector_name: &str,
    epu: u64,
    kernels: &[&KernelSpec],
    ctx: &SlotContext,
) -> Result<u64, DecompError> {
    let mut g = 1u64;
    for kernel in kernels {
        let nu = kernel.nu(vector_name);
        if !epu.is_multiple_of(nu) {
            return Err(DecompError::EpuNuViolation {
                kernel: kernel.id.clone(),
                vector: vector_name.to_string(),
            });
        }
        g = lcm(g, epu / nu);
        for slot in 0..ctx.slots() {
            g = lcm(g, ctx.wgs_of(slot, &kernel.id));
        }
    }
    Ok(g)
}

/// Decompose every global data vector of `sct` across the slots according to
/// the per-slot `fractions`.
///
/// Partitioned vectors are apportioned in whole granules: each slot gets the
/// floor of its share, every positive-fraction slot gets at least one
/// granule, and leftover granules go to the highest-weighted active GPU slot
/// (largest-remainder order when no GPU slot is active). COPY vectors get one
/// full-span entry per slot.
pub fn partition_input(
    sct: &Sct,
    vector_lengths: &BTreeMap<String, u64>,
    fractions: &[f64],
    ctx: &SlotContext,
) -> Result<PartitionPlan, DecompError> {
    if fractions.len() != ctx.slots() {
        return Err(DecompError::InvalidFractions(format!(
            "{} fractions for {} slots",
            fractions.len(),
            ctx.slots()
        )));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|f| *f < 0.0) {
        return Err(DecompError::InvalidFractions(format!("fractions sum to {sum}")));
    }

    // Gather each distinct vector and the kernels touching it.
    let kernels = sct.kernels();
    let mut touching: BTreeMap<&str, Vec<&KernelSpec>> = BTreeMap::new();
    let mut mode: BTreeMap<&str, (TransferMode, u64)> = BTreeMap::new();
    for k in &kernels {
        for arg in k.args.iter().filter(|a| a.is_data_vector()) {
            touching.entry(&arg.name).or_default().push(k);
            mode.entry(&arg.name).or_insert((arg.transfer_mode, arg.epu));
        }
    }

    let mut plan = PartitionPlan {
        slots: ctx.slots(),
        per_vector: BTreeMap::new(),
        granularity: BTreeMap::new(),
        copy_vectors: BTreeSet::new(),
    };

    for (name, kernels) in &touching {
        let length = *vector_lengths
            .get(*name)
            .ok_or_else(|| DecompError::MissingLength(name.to_string()))?;
        let (transfer, epu) = mode[name];
        match transfer {
            TransferMode::Copy => {
                let parts = (0..ctx.slots())
                    .map(|slot| Partition { offset: 0, length, slot })
                    .collect();
                plan.per_vector.insert(name.to_string(), parts);
                plan.copy_vectors.insert(name.to_string());
            }
            TransferMode::Partition => {
                let g = granule(name, epu, kernels, ctx)?;
                let counts = apportion(name, length, g, fractions, &ctx.roles)?;
                let mut offset = 0u64;
                let mut parts = Vec::with_capacity(ctx.slots());
                for (slot, granules) in counts.iter().enumerate() {
                    let len = granules * g;
                    parts.push(Partition { offset, length: len, slot });
                    offset += len;
                }
                plan.per_vector.insert(name.to_string(), parts);
                plan.granularity.insert(name.to_string(), g);
            }
        }
    }
    Ok(plan)
}

/// Split `length / g` granules across the slots. Returns granule counts.
fn apportion(
    vector: &str,
    length: u64,
    g: u64,
    fractions: &[f64],
    roles: &[SlotRole],
) -> Result<Vec<u64>, DecompError> {
    if !length.is_multiple_of(g) {
        return Err(DecompError::InfeasiblePartition {
            vector: vector.to_string(),
            reason: format!("length {length} is not a multiple of the granule {g}"),
        });
    }
    let total = length / g;
    let active: Vec<usize> =
        (0..fractions.len()).filter(|&j| fractions[j] > 0.0).collect();
    if total < active.len() as u64 {
        return Err(DecompError::InfeasiblePartition {
            vector: vector.to_string(),
            reason: format!(
                "{length} elements are shorter than {} minimal granules of {g}",
                active.len()
            ),
        });
    }

    let mut counts = vec![0u64; fractions.len()];
    for &j in &active {
        counts[j] = (fractions[j] * total as f64).floor() as u64;
        if counts[j] == 0 {
            counts[j] = 1;
        }
    }

    let mut assigned: u64 = counts.iter().sum();
    // Rounding plus the one-granule floor can oversubscribe; take the excess
    // back from the largest allocations.
    while assigned > total {
        let donor = active
            .iter()
            .copied()
            .filter(|&j| counts[j] > 1)
            .max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a)))
            .expect("total >= active slots, so a donor with > 1 granule exists");
        counts[donor] -= 1;
        assigned -= 1;
    }

    if assigned < total {
        let residue = total - assigned;
        let gpu_target = active
            .iter()
            .copied()
            .filter(|&j| roles[j].is_gpu())
            .max_by(|&a, &b| {
                let wa = match roles[a] {
                    SlotRole::Gpu { weight } => weight,
                    _ => 0.0,
                };
                let wb = match roles[b] {
                    SlotRole::Gpu { weight } => weight,
                    _ => 0.0,
                };
                wa.partial_cmp(&wb).unwrap().then(b.cmp(&a))
            });
        match gpu_target {
            Some(j) => counts[j] += residue,
            None => {
                // CPU-only: largest remainder, ties to the lower slot index.
                let mut order: Vec<usize> = active.clone();
                order.sort_by(|&a, &b| {
                    let ra = fractions[a] * total as f64 - (fractions[a] * total as f64).floor();
                    let rb = fractions[b] * total as f64 - (fractions[b] * total as f64).floor();
                    rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
                });
                let mut left = residue;
                let mut i = 0;
                while left > 0 {
                    counts[order[i % order.len()]] += 1;
                    left -= 1;
                    i += 1;
                }
            }
        }
    }
    Ok(counts)
}
