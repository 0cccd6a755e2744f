//! Scheduling and auto-tuning engine for compound multi-kernel computations
//! ("skeleton computation trees") on heterogeneous CPU/GPU fleets.
//!
//! The crate simulates device execution against configurable cost models and
//! reproduces the full adaptation loop of the runtime it models:
//!
//! * [`sct`]: computation trees (pipeline/loop/map/map-reduce) over kernel
//!   interface specifications, plus the depth-first execution order.
//! * [`decomp`]: locality-aware domain decomposition under the divisibility
//!   constraint system (elementary partitioning units, work-per-thread,
//!   work-group sizes).
//! * [`platform`]: simulated CPU (cache-fission) and GPU (occupancy,
//!   transfer overlap) execution platforms.
//! * [`engine`]: the runtime: FIFO request intake, the work-distribution
//!   decision workflow, per-slot execution, traits, merging, statistics.
//! * [`tuner`]: profile construction: ordered search over
//!   (fission, overlap, work-group sizes) with a binary-search workload
//!   distribution generator.
//! * [`kb`]: knowledge base: profile persistence and configuration
//!   derivation by scoped RBF/nearest-neighbour interpolation.
//! * [`balance`]: dynamic load balancing: the lbt indicator and the
//!   adaptive binary search.
//! * [`scenario`]: declarative scenario files, the schedule runner, and
//!   trace/series/report artifacts.

pub mod balance;
pub mod decomp;
pub mod engine;
pub mod kb;
pub mod platform;
pub mod scenario;
pub mod sct;
pub mod trace;
pub mod tuner;
