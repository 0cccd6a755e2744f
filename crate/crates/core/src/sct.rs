//! Skeleton computation trees and the kernel interface metadata that drives
//! decomposition and scheduling.
//!
//! A computation is a tree of skeleton nodes (Pipeline / Loop / Map /
//! MapReduce) whose leaves are [`KernelSpec`]s. Trees are immutable after
//! construction and identified by a deterministic content hash, so the same
//! structure always maps to the same knowledge-base key across process
//! restarts.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use sha2::{Digest, Sha256};
use thiserror::Error;

/// Kernel identifier (opaque label, unique per distinct spec).
pub type KernelId = String;

/// Content hash identifying a tree (or subtree), hex encoded SHA-256.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
#[serde(transparent)]
pub struct SctId(pub String);

impl fmt::Display for SctId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl SctId {
    /// Short prefix for human-facing traces.
    pub fn short(&self) -> &str {
        &self.0[..12.min(self.0.len())]
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SctError {
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error("no iteration count for loop {0}")]
    MissingIterationCount(SctId),
}

// ── Kernel interface ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArgKind {
    Vector,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mutability {
    Immutable,
    Mutable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MemorySpace {
    Global,
    Local,
}

/// How a vector reaches the devices: split into partitions, or replicated
/// whole to every execution slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    Partition,
    Copy,
}

/// Partition-bound value substituted into a scalar argument before each
/// execution: the current partition's size or its offset in the whole domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraitBinding {
    None,
    Size,
    Offset,
}

/// One kernel parameter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelArg {
    pub name: String,
    pub kind: ArgKind,
    pub mutability: Mutability,
    pub memory: MemorySpace,
    /// Bytes per element; meaningful for vectors only.
    pub element_width: u64,
    pub transfer_mode: TransferMode,
    /// Elementary partitioning unit in elements. Ignored for COPY vectors.
    pub epu: u64,
    /// Partition-bound substitution; scalars only.
    pub trait_binding: TraitBinding,
}

impl KernelArg {
    /// Partitionable global vector.
    pub fn vector(
        name: &str,
        element_width: u64,
        epu: u64,
        mutability: Mutability,
    ) -> Result<Self, SctError> {
        Self::vector_with_mode(name, element_width, epu, mutability, TransferMode::Partition)
    }

    /// Global vector with an explicit transfer mode. A mutable COPY vector is
    /// rejected here: no merge is defined for replicated outputs.
    pub fn vector_with_mode(
        name: &str,
        element_width: u64,
        epu: u64,
        mutability: Mutability,
        transfer_mode: TransferMode,
    ) -> Result<Self, SctError> {
        if transfer_mode == TransferMode::Copy && mutability == Mutability::Mutable {
            return Err(SctError::InvalidSpec(format!(
                "vector '{name}': mutable COPY vectors are rejected (no merge semantics)"
            )));
        }
        if epu == 0 {
            return Err(SctError::InvalidSpec(format!("vector '{name}': epu must be >= 1")));
        }
        Ok(KernelArg {
            name: name.to_string(),
            kind: ArgKind::Vector,
            mutability,
            memory: MemorySpace::Global,
            element_width,
            transfer_mode,
            epu,
            trait_binding: TraitBinding::None,
        })
    }

    /// Work-group local scratch buffer; never partitioned or transferred.
    pub fn local_scratch(name: &str, element_width: u64) -> Self {
        KernelArg {
            name: name.to_string(),
            kind: ArgKind::Vector,
            mutability: Mutability::Mutable,
            memory: MemorySpace::Local,
            element_width,
            transfer_mode: TransferMode::Copy,
            epu: 1,
            trait_binding: TraitBinding::None,
        }
    }

    /// Immutable scalar, optionally bound to a partition trait.
    pub fn scalar(name: &str, trait_binding: TraitBinding) -> Self {
        KernelArg {
            name: name.to_string(),
            kind: ArgKind::Scalar,
            mutability: Mutability::Immutable,
            memory: MemorySpace::Global,
            element_width: 8,
            transfer_mode: TransferMode::Copy,
            epu: 1,
            trait_binding,
        }
    }

    /// Mutable scalar (host-updated loop state and the like).
    pub fn mutable_scalar(name: &str) -> Self {
        KernelArg {
            mutability: Mutability::Mutable,
            ..Self::scalar(name, TraitBinding::None)
        }
    }

    /// True for vectors the decomposition actually splits: global PARTITION
    /// vectors.
    pub fn is_partitioned(&self) -> bool {
        self.kind == ArgKind::Vector
            && self.memory == MemorySpace::Global
            && self.transfer_mode == TransferMode::Partition
    }

    /// True for global vectors that carry host data (partitioned or copied).
    pub fn is_data_vector(&self) -> bool {
        self.kind == ArgKind::Vector && self.memory == MemorySpace::Global
    }

    fn validate(&self) -> Result<(), SctError> {
        match self.kind {
            ArgKind::Vector => {
                if self.trait_binding != TraitBinding::None {
                    return Err(SctError::InvalidSpec(format!(
                        "arg '{}': trait bindings apply to scalars only",
                        self.name
                    )));
                }
                if self.epu == 0 {
                    return Err(SctError::InvalidSpec(format!(
                        "vector '{}': epu must be >= 1",
                        self.name
                    )));
                }
                if self.transfer_mode == TransferMode::Copy
                    && self.mutability == Mutability::Mutable
                    && self.memory == MemorySpace::Global
                {
                    return Err(SctError::InvalidSpec(format!(
                        "vector '{}': mutable COPY vectors are rejected (no merge semantics)",
                        self.name
                    )));
                }
                if self.element_width == 0 {
                    return Err(SctError::InvalidSpec(format!(
                        "vector '{}': element_width must be >= 1",
                        self.name
                    )));
                }
            }
            ArgKind::Scalar => {
                if self.memory == MemorySpace::Local {
                    return Err(SctError::InvalidSpec(format!(
                        "scalar '{}': local memory holds vectors only",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Per-group resource demands used by the occupancy model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct KernelResources {
    pub registers_per_thread: u64,
    pub local_mem_per_group: u64,
}

/// Opaque reference to the wrapped kernel code; carried as labels only.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct KernelSource {
    pub file: String,
    pub function: String,
}

/// Interface specification of one kernel: argument metadata, elements per
/// thread, resource usage and work-group size constraints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    pub id: KernelId,
    pub args: Vec<KernelArg>,
    /// Elements of each vector processed by one thread; missing entries
    /// default to 1.
    pub work_per_thread: BTreeMap<String, u64>,
    /// User-mandated work-group size per dimension; overrides the search.
    pub fixed_wgs: Option<Vec<u64>>,
    pub resources: KernelResources,
    /// Work-space dimensionality, 1–3.
    pub dimensionality: u8,
    pub source: Option<KernelSource>,
}

impl KernelSpec {
    pub fn new(
        id: &str,
        args: Vec<KernelArg>,
        work_per_thread: BTreeMap<String, u64>,
        fixed_wgs: Option<Vec<u64>>,
        resources: KernelResources,
        dimensionality: u8,
    ) -> Result<Self, SctError> {
        let spec = KernelSpec {
            id: id.to_string(),
            args,
            work_per_thread,
            fixed_wgs,
            resources,
            dimensionality,
            source: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Minimal 1-D kernel over a single partitioned vector; handy default for
    /// tests and scenarios.
    pub fn simple(id: &str, vector: &str, element_width: u64, epu: u64) -> Self {
        KernelSpec::new(
            id,
            vec![KernelArg::vector(vector, element_width, epu, Mutability::Mutable).unwrap()],
            BTreeMap::new(),
            None,
            KernelResources::default(),
            1,
        )
        .unwrap()
    }

    fn validate(&self) -> Result<(), SctError> {
        if self.id.is_empty() {
            return Err(SctError::InvalidSpec("kernel id must be non-empty".into()));
        }
        if !(1..=3).contains(&self.dimensionality) {
            return Err(SctError::InvalidSpec(format!(
                "kernel '{}': dimensionality must be 1-3",
                self.id
            )));
        }
        if self.args.is_empty() {
            return Err(SctError::InvalidSpec(format!(
                "kernel '{}': needs at least one argument",
                self.id
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for arg in &self.args {
            arg.validate()?;
            if !seen.insert(arg.name.as_str()) {
                return Err(SctError::InvalidSpec(format!(
                    "kernel '{}': duplicate argument '{}'",
                    self.id, arg.name
                )));
            }
        }
        if !self.args.iter().any(|a| a.is_partitioned()) {
            return Err(SctError::InvalidSpec(format!(
                "kernel '{}': needs at least one partitioned vector (its distributed domain)",
                self.id
            )));
        }
        if let Some(wgs) = &self.fixed_wgs {
            if wgs.len() != self.dimensionality as usize {
                return Err(SctError::InvalidSpec(format!(
                    "kernel '{}': fixed_wgs needs {} entries",
                    self.id, self.dimensionality
                )));
            }
            if wgs.contains(&0) {
                return Err(SctError::InvalidSpec(format!(
                    "kernel '{}': fixed_wgs entries must be >= 1",
                    self.id
                )));
            }
        }
        for (name, &nu) in &self.work_per_thread {
            if nu == 0 {
                return Err(SctError::InvalidSpec(format!(
                    "kernel '{}': work_per_thread for '{}' must be >= 1",
                    self.id, name
                )));
            }
            match self.args.iter().find(|a| &a.name == name) {
                Some(a) if a.kind == ArgKind::Vector => {}
                _ => {
                    return Err(SctError::InvalidSpec(format!(
                        "kernel '{}': work_per_thread names unknown vector '{}'",
                        self.id, name
                    )))
                }
            }
        }
        // epu(V) mod nu(V,K) = 0 must hold for every partitioned vector.
        for arg in self.args.iter().filter(|a| a.is_partitioned()) {
            let nu = self.nu(&arg.name);
            if arg.epu % nu != 0 {
                return Err(SctError::InvalidSpec(format!(
                    "kernel '{}': epu {} of vector '{}' is not a multiple of work_per_thread {}",
                    self.id, arg.epu, arg.name, nu
                )));
            }
        }
        Ok(())
    }

    /// Elements of vector `arg` processed per thread (defaults to 1).
    pub fn nu(&self, arg: &str) -> u64 {
        self.work_per_thread.get(arg).copied().unwrap_or(1)
    }

    /// The kernel's primary distributed domain: its first partitioned vector.
    /// SIZE/OFFSET traits and the synthetic cost model refer to it.
    pub fn primary_vector(&self) -> &KernelArg {
        self.args
            .iter()
            .find(|a| a.is_partitioned())
            .expect("validated: at least one partitioned vector")
    }

    /// Work-group size along the outermost dimension when the user pinned one.
    pub fn fixed_outer_wgs(&self) -> Option<u64> {
        self.fixed_wgs.as_ref().map(|w| w[0])
    }
}

// ── Loop state and host reducers ────────────────────────────────────────────

/// Host-evaluated loop condition. Restricted to pure functions of the
/// iteration index and declared state dynamics so simulated runs are
/// reproducible.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum LoopCondition {
    /// Iterate exactly `n` times.
    Count(u64),
    /// Continue while the state item's value is below `limit`; the item
    /// advances by `step` per iteration starting from 0.
    WhileBelow { item: String, limit: f64, step: f64 },
}

impl LoopCondition {
    /// Statically known iteration count, when the condition determines one.
    pub fn static_count(&self) -> Option<u64> {
        match self {
            LoopCondition::Count(n) => Some(*n),
            LoopCondition::WhileBelow { limit, step, .. } => {
                if *limit <= 0.0 {
                    Some(0)
                } else {
                    Some((limit / step).ceil() as u64)
                }
            }
        }
    }

    /// Whether another iteration runs, given the index of the iteration about
    /// to start and current state values.
    pub fn continues(&self, iteration: u64, state: &BTreeMap<String, f64>) -> bool {
        match self {
            LoopCondition::Count(n) => iteration < *n,
            LoopCondition::WhileBelow { item, limit, .. } => {
                state.get(item).copied().unwrap_or(0.0) < *limit
            }
        }
    }
}

/// State carried by a Loop node: the stoppage condition, the output items
/// refreshed after each iteration, and whether that refresh needs an
/// all-device synchronization.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LoopState {
    pub condition: LoopCondition,
    pub updated_items: Vec<String>,
    pub global_sync: bool,
}

impl LoopState {
    pub fn counted(n: u64) -> Self {
        LoopState { condition: LoopCondition::Count(n), updated_items: Vec::new(), global_sync: false }
    }

    pub fn with_sync(mut self, sync: bool) -> Self {
        self.global_sync = sync;
        self
    }

    pub fn with_updates(mut self, items: &[&str]) -> Self {
        self.updated_items = items.iter().map(|s| s.to_string()).collect();
        self
    }
}

/// User-supplied combine function for host-side reductions.
#[derive(Clone)]
pub struct UserReducer {
    pub name: String,
    pub associative: bool,
    pub combine: Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>,
}

impl fmt::Debug for UserReducer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("UserReducer")
            .field("name", &self.name)
            .field("associative", &self.associative)
            .finish()
    }
}

impl PartialEq for UserReducer {
    fn eq(&self, other: &Self) -> bool {
        self.name == other.name && self.associative == other.associative
    }
}

/// Host-side merging function applied to the partial results of the parallel
/// executions, folded in slot order.
#[derive(Debug, Clone, PartialEq)]
pub enum HostReducer {
    Add,
    Sub,
    Mul,
    Div,
    User(UserReducer),
}

impl HostReducer {
    pub fn apply(&self, acc: f64, x: f64) -> f64 {
        match self {
            HostReducer::Add => acc + x,
            HostReducer::Sub => acc - x,
            HostReducer::Mul => acc * x,
            HostReducer::Div => acc / x,
            HostReducer::User(u) => (u.combine)(acc, x),
        }
    }

    pub fn is_associative(&self) -> bool {
        match self {
            HostReducer::Add | HostReducer::Mul => true,
            HostReducer::Sub | HostReducer::Div => false,
            HostReducer::User(u) => u.associative,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            HostReducer::Add => "add",
            HostReducer::Sub => "sub",
            HostReducer::Mul => "mul",
            HostReducer::Div => "div",
            HostReducer::User(u) => &u.name,
        }
    }
}

// ── The tree ────────────────────────────────────────────────────────────────

/// Reduction stage of a MapReduce: either a device-side subtree or a
/// host-side merging function.
#[derive(Debug, Clone, PartialEq)]
pub enum Reduction {
    Tree(Box<Sct>),
    Host(HostReducer),
}

#[derive(Debug, Clone, PartialEq)]
pub enum SctNode {
    Pipeline { stages: Vec<Sct> },
    Loop { body: Box<Sct>, state: LoopState },
    Map { tree: Box<Sct> },
    MapReduce { map_stage: Box<Sct>, reduction: Reduction },
    Leaf { kernel: KernelSpec },
}

/// A validated skeleton computation tree with its deterministic content id.
///
/// Structurally identical trees hash to the same id; any change to a leaf
/// kernel's interface changes it.
#[derive(Debug, Clone)]
pub struct Sct {
    node: SctNode,
    id: SctId,
}

impl PartialEq for Sct {
    fn eq(&self, other: &Self) -> bool {
        self.id == other.id
    }
}

impl Sct {
    pub fn leaf(kernel: KernelSpec) -> Result<Self, SctError> {
        kernel.validate()?;
        Ok(Self::seal(SctNode::Leaf { kernel }))
    }

    pub fn pipeline(stages: Vec<Sct>) -> Result<Self, SctError> {
        if stages.len() < 2 {
            return Err(SctError::InvalidSpec(format!(
                "pipeline needs at least 2 stages, got {}",
                stages.len()
            )));
        }
        Ok(Self::seal(SctNode::Pipeline { stages }))
    }

    pub fn loop_(body: Sct, state: LoopState) -> Result<Self, SctError> {
        if let LoopCondition::WhileBelow { item, step, limit } = &state.condition {
            if !step.is_finite() || *step <= 0.0 || !limit.is_finite() {
                return Err(SctError::InvalidSpec(
                    "loop condition needs a finite limit and a positive step".into(),
                ));
            }
            if !state.updated_items.contains(item) {
                return Err(SctError::InvalidSpec(format!(
                    "loop condition reads '{item}' which is not among the updated items"
                )));
            }
        }
        // Updated items must name mutable args reachable in the body.
        for item in &state.updated_items {
            let found = body.kernels().iter().any(|k| {
                k.args
                    .iter()
                    .any(|a| &a.name == item && a.mutability == Mutability::Mutable)
            });
            if !found {
                return Err(SctError::InvalidSpec(format!(
                    "loop updates '{item}' which is not a mutable argument of its body"
                )));
            }
        }
        Ok(Self::seal(SctNode::Loop { body: Box::new(body), state }))
    }

    pub fn map(tree: Sct) -> Result<Self, SctError> {
        Ok(Self::seal(SctNode::Map { tree: Box::new(tree) }))
    }

    pub fn map_reduce(map_stage: Sct, reduction: Reduction) -> Result<Self, SctError> {
        Ok(Self::seal(SctNode::MapReduce { map_stage: Box::new(map_stage), reduction }))
    }

    fn seal(node: SctNode) -> Self {
        let id = hash_node(&node);
        Sct { node, id }
    }

    pub fn id(&self) -> &SctId {
        &self.id
    }

    pub fn node(&self) -> &SctNode {
        &self.node
    }

    /// All leaf kernels in depth-first order (duplicates possible when one
    /// kernel appears in several leaves).
    pub fn kernels(&self) -> Vec<&KernelSpec> {
        let mut out = Vec::new();
        collect_kernels(&self.node, &mut out);
        out
    }

    /// Ids of every Loop subtree, depth-first.
    pub fn loop_ids(&self) -> Vec<SctId> {
        fn walk(sct: &Sct, out: &mut Vec<SctId>) {
            match &sct.node {
                SctNode::Pipeline { stages } => stages.iter().for_each(|s| walk(s, out)),
                SctNode::Loop { body, .. } => {
                    out.push(sct.id.clone());
                    walk(body, out);
                }
                SctNode::Map { tree } => walk(tree, out),
                SctNode::MapReduce { map_stage, reduction } => {
                    walk(map_stage, out);
                    if let Reduction::Tree(t) = reduction {
                        walk(t, out);
                    }
                }
                SctNode::Leaf { .. } => {}
            }
        }
        let mut out = Vec::new();
        walk(self, &mut out);
        out
    }

    /// Cross-kernel consistency of communicated vectors: args sharing a name
    /// must agree on kind, element width, transfer mode and epu.
    pub fn validate_communication(&self) -> Result<(), SctError> {
        let mut seen: BTreeMap<&str, &KernelArg> = BTreeMap::new();
        for kernel in self.kernels() {
            for arg in kernel.args.iter().filter(|a| a.memory == MemorySpace::Global) {
                match seen.get(arg.name.as_str()) {
                    None => {
                        seen.insert(&arg.name, arg);
                    }
                    Some(prev) => {
                        let compatible = prev.kind == arg.kind
                            && (prev.kind == ArgKind::Scalar
                                || (prev.element_width == arg.element_width
                                    && prev.transfer_mode == arg.transfer_mode
                                    && prev.epu == arg.epu));
                        if !compatible {
                            return Err(SctError::InvalidSpec(format!(
                                "argument '{}' is declared incompatibly by two kernels",
                                arg.name
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn collect_kernels<'a>(node: &'a SctNode, out: &mut Vec<&'a KernelSpec>) {
    match node {
        SctNode::Pipeline { stages } => stages.iter().for_each(|s| collect_kernels(&s.node, out)),
        SctNode::Loop { body, .. } => collect_kernels(&body.node, out),
        SctNode::Map { tree } => collect_kernels(&tree.node, out),
        SctNode::MapReduce { map_stage, reduction } => {
            collect_kernels(&map_stage.node, out);
            if let Reduction::Tree(t) = reduction {
                collect_kernels(&t.node, out);
            }
        }
        SctNode::Leaf { kernel } => out.push(kernel),
    }
}

// ── Content hashing ─────────────────────────────────────────────────────────
//
// Canonical byte encoding, independent of serde so the id survives format
// churn: every field is written tagged and length-prefixed.

struct Hasher(Sha256);

impl Hasher {
    fn new() -> Self {
        Hasher(Sha256::new())
    }
    fn tag(&mut self, t: u8) {
        self.0.update([t]);
    }
    fn u64(&mut self, v: u64) {
        self.0.update(v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.update(v.to_bits().to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.update(s.as_bytes());
    }
}

fn hash_node(node: &SctNode) -> SctId {
    let mut h = Hasher::new();
    write_node(node, &mut h);
    let digest = h.0.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        use std::fmt::Write;
        write!(hex, "{b:02x}").unwrap();
    }
    SctId(hex)
}

fn write_node(node: &SctNode, h: &mut Hasher) {
    match node {
        SctNode::Pipeline { stages } => {
            h.tag(1);
            h.u64(stages.len() as u64);
            for s in stages {
                write_node(&s.node, h);
            }
        }
        SctNode::Loop { body, state } => {
            h.tag(2);
            match &state.condition {
                LoopCondition::Count(n) => {
                    h.tag(10);
                    h.u64(*n);
                }
                LoopCondition::WhileBelow { item, limit, step } => {
                    h.tag(11);
                    h.str(item);
                    h.f64(*limit);
                    h.f64(*step);
                }
            }
            h.u64(state.updated_items.len() as u64);
            for it in &state.updated_items {
                h.str(it);
            }
            h.tag(state.global_sync as u8);
            write_node(&body.node, h);
        }
        SctNode::Map { tree } => {
            h.tag(3);
            write_node(&tree.node, h);
        }
        SctNode::MapReduce { map_stage, reduction } => {
            h.tag(4);
            write_node(&map_stage.node, h);
            match reduction {
                Reduction::Tree(t) => {
                    h.tag(20);
                    write_node(&t.node, h);
                }
                Reduction::Host(r) => {
                    h.tag(21);
                    h.str(r.label());
                }
            }
        }
        SctNode::Leaf { kernel } => {
            h.tag(5);
            write_kernel(kernel, h);
        }
    }
}

fn write_kernel(k: &KernelSpec, h: &mut Hasher) {
    h.str(&k.id);
    h.u64(k.args.len() as u64);
    for a in &k.args {
        h.str(&a.name);
        h.tag(match a.kind {
            ArgKind::Vector => 0,
            ArgKind::Scalar => 1,
        });
        h.tag(match a.mutability {
            Mutability::Immutable => 0,
            Mutability::Mutable => 1,
        });
        h.tag(match a.memory {
            MemorySpace::Global => 0,
            MemorySpace::Local => 1,
        });
        h.u64(a.element_width);
        h.tag(match a.transfer_mode {
            TransferMode::Partition => 0,
            TransferMode::Copy => 1,
        });
        h.u64(a.epu);
        h.tag(match a.trait_binding {
            TraitBinding::None => 0,
            TraitBinding::Size => 1,
            TraitBinding::Offset => 2,
        });
    }
    h.u64(k.work_per_thread.len() as u64);
    for (name, nu) in &k.work_per_thread {
        h.str(name);
        h.u64(*nu);
    }
    match &k.fixed_wgs {
        None => h.tag(0),
        Some(w) => {
            h.tag(1);
            h.u64(w.len() as u64);
            for &x in w {
                h.u64(x);
            }
        }
    }
    h.u64(k.resources.registers_per_thread);
    h.u64(k.resources.local_mem_per_group);
    h.u64(k.dimensionality as u64);
    match &k.source {
        None => h.tag(0),
        Some(s) => {
            h.tag(1);
            h.str(&s.file);
            h.str(&s.function);
        }
    }
}

// ── Execution order ─────────────────────────────────────────────────────────

/// Sequential single-device kernel order: a depth-first walk with Loop bodies
/// statically expanded.
///
/// `loop_iteration_counts` is keyed by each Loop node's subtree id. Loops with
/// a fixed `Count` condition may omit their entry; state-dependent conditions
/// are evaluated at execution time, so their static expansion needs one.
pub fn kernel_execution_order(
    sct: &Sct,
    loop_iteration_counts: &BTreeMap<SctId, u64>,
) -> Result<Vec<KernelId>, SctError> {
    let mut out = Vec::new();
    walk_order(sct, loop_iteration_counts, &mut out)?;
    Ok(out)
}

fn walk_order(
    sct: &Sct,
    counts: &BTreeMap<SctId, u64>,
    out: &mut Vec<KernelId>,
) -> Result<(), SctError> {
    match &sct.node {
        SctNode::Pipeline { stages } => {
            for s in stages {
                walk_order(s, counts, out)?;
            }
        }
        SctNode::Loop { body, state } => {
            let fixed = match state.condition {
                LoopCondition::Count(n) => Some(n),
                LoopCondition::WhileBelow { .. } => None,
            };
            let n = counts
                .get(&sct.id)
                .copied()
                .or(fixed)
                .ok_or_else(|| SctError::MissingIterationCount(sct.id.clone()))?;
            for _ in 0..n {
                walk_order(body, counts, out)?;
            }
        }
        SctNode::Map { tree } => walk_order(tree, counts, out)?,
        SctNode::MapReduce { map_stage, reduction } => {
            walk_order(map_stage, counts, out)?;
            if let Reduction::Tree(t) = reduction {
                walk_order(t, counts, out)?;
            }
        }
        SctNode::Leaf { kernel } => out.push(kernel.id.clone()),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k(id: &str) -> KernelSpec {
        KernelSpec::simple(id, &format!("{id}_data"), 4, 1)
    }

    /// pipeline(K1, loop(K2), K3)
    fn fig1_tree(loop_count: u64) -> Sct {
        Sct::pipeline(vec![
            Sct::leaf(k("K1")).unwrap(),
            Sct::loop_(Sct::leaf(k("K2")).unwrap(), LoopState::counted(loop_count)).unwrap(),
            Sct::leaf(k("K3")).unwrap(),
        ])
        .unwrap()
    }

    #[test]
    fn pipeline_with_one_stage_is_rejected() {
        let err = Sct::pipeline(vec![Sct::leaf(k("K1")).unwrap()]).unwrap_err();
        assert!(matches!(err, SctError::InvalidSpec(_)));
    }

    #[test]
    fn leaf_id_is_stable_across_constructions() {
        let a = Sct::leaf(k("K1")).unwrap();
        let b = Sct::leaf(k("K1")).unwrap();
        assert_eq!(a.id(), b.id());
    }

    #[test]
    fn kernel_change_changes_the_id() {
        let a = Sct::leaf(k("K1")).unwrap();
        let mut spec = k("K1");
        spec.resources.registers_per_thread = 32;
        let b = Sct::leaf(spec).unwrap();
        assert_ne!(a.id(), b.id());
    }

    #[test]
    fn depth_first_order_expands_loops() {
        let order = kernel_execution_order(&fig1_tree(3), &BTreeMap::new()).unwrap();
        assert_eq!(order, vec!["K1", "K2", "K2", "K2", "K3"]);
    }

    #[test]
    fn single_leaf_order() {
        let sct = Sct::leaf(k("K1")).unwrap();
        assert_eq!(kernel_execution_order(&sct, &BTreeMap::new()).unwrap(), vec!["K1"]);
    }

    #[test]
    fn map_of_pipeline_order() {
        let sct = Sct::map(
            Sct::pipeline(vec![Sct::leaf(k("Ka")).unwrap(), Sct::leaf(k("Kb")).unwrap()]).unwrap(),
        )
        .unwrap();
        assert_eq!(kernel_execution_order(&sct, &BTreeMap::new()).unwrap(), vec!["Ka", "Kb"]);
    }

    #[test]
    fn explicit_count_overrides_static_one() {
        let tree = fig1_tree(3);
        let loop_id = tree.loop_ids()[0].clone();
        let counts = BTreeMap::from([(loop_id, 1u64)]);
        let order = kernel_execution_order(&tree, &counts).unwrap();
        assert_eq!(order, vec!["K1", "K2", "K3"]);
    }

    #[test]
    fn mutable_copy_vector_is_rejected() {
        let err = KernelArg::vector_with_mode("v", 4, 1, Mutability::Mutable, TransferMode::Copy)
            .unwrap_err();
        assert!(matches!(err, SctError::InvalidSpec(_)));
    }

    #[test]
    fn epu_must_divide_by_work_per_thread() {
        let err = KernelSpec::new(
            "K",
            vec![KernelArg::vector("v", 4, 3, Mutability::Mutable).unwrap()],
            BTreeMap::from([("v".to_string(), 2u64)]),
            None,
            KernelResources::default(),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("not a multiple"));
    }

    #[test]
    fn trait_binding_on_vector_is_rejected() {
        let mut arg = KernelArg::vector("v", 4, 1, Mutability::Mutable).unwrap();
        arg.trait_binding = TraitBinding::Size;
        let err = KernelSpec::new(
            "K",
            vec![arg],
            BTreeMap::new(),
            None,
            KernelResources::default(),
            1,
        )
        .unwrap_err();
        assert!(err.to_string().contains("scalars only"));
    }

    #[test]
    fn loop_updates_must_reference_mutable_body_args() {
        let body = Sct::leaf(k("K2")).unwrap();
        let state = LoopState::counted(2).with_updates(&["nope"]);
        assert!(Sct::loop_(body, state).is_err());
    }

    #[test]
    fn while_below_static_count() {
        let c = LoopCondition::WhileBelow { item: "x".into(), limit: 10.0, step: 3.0 };
        assert_eq!(c.static_count(), Some(4));
    }

    #[test]
    fn state_dependent_loops_need_an_iteration_count_for_expansion() {
        let state = LoopState {
            condition: LoopCondition::WhileBelow { item: "K2_data".into(), limit: 6.0, step: 2.0 },
            updated_items: vec!["K2_data".into()],
            global_sync: false,
        };
        let tree = Sct::loop_(Sct::leaf(k("K2")).unwrap(), state).unwrap();
        let err = kernel_execution_order(&tree, &BTreeMap::new()).unwrap_err();
        assert!(matches!(err, SctError::MissingIterationCount(_)));

        let counts = BTreeMap::from([(tree.loop_ids()[0].clone(), 3u64)]);
        assert_eq!(kernel_execution_order(&tree, &counts).unwrap().len(), 3);
    }

    #[test]
    fn order_length_matches_loop_product() {
        let inner = Sct::loop_(Sct::leaf(k("K2")).unwrap(), LoopState::counted(2)).unwrap();
        let outer = Sct::loop_(inner, LoopState::counted(3)).unwrap();
        let order = kernel_execution_order(&outer, &BTreeMap::new()).unwrap();
        assert_eq!(order.len(), 6);
    }

    #[test]
    fn structurally_equal_trees_share_ids_and_differ_otherwise() {
        assert_eq!(fig1_tree(3).id(), fig1_tree(3).id());
        assert_ne!(fig1_tree(3).id(), fig1_tree(4).id());
    }

    #[test]
    fn declared_associative_reducers_are_associative() {
        use proptest::prelude::*;
        let max_reducer = HostReducer::User(UserReducer {
            name: "max".into(),
            associative: true,
            combine: Arc::new(f64::max),
        });
        let mut runner = proptest::test_runner::TestRunner::default();
        runner
            .run(
                &(-1e3f64..1e3, -1e3f64..1e3, -1e3f64..1e3),
                |(a, b, c)| {
                    for op in [&HostReducer::Add, &HostReducer::Mul, &max_reducer] {
                        prop_assert!(op.is_associative());
                        let left = op.apply(op.apply(a, b), c);
                        let right = op.apply(a, op.apply(b, c));
                        let scale = left.abs().max(right.abs()).max(1.0);
                        prop_assert!(
                            (left - right).abs() <= 1e-9 * scale,
                            "{} not associative at ({a},{b},{c})",
                            op.label()
                        );
                    }
                    prop_assert!(!HostReducer::Sub.is_associative());
                    prop_assert!(!HostReducer::Div.is_associative());
                    Ok(())
                },
            )
            .unwrap();
    }

    #[test]
    fn communication_conflicts_are_detected() {
        let a = KernelSpec::simple("Ka", "v", 4, 2);
        let b = KernelSpec::simple("Kb", "v", 4, 4); // conflicting epu for v
        let tree =
            Sct::pipeline(vec![Sct::leaf(a).unwrap(), Sct::leaf(b).unwrap()]).unwrap();
        assert!(tree.validate_communication().is_err());
    }
}
