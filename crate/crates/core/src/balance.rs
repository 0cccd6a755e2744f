//! Dynamic load balancing: the load-balancing threshold (lbt) that detects
//! recurring imbalance, and the adaptive binary search that redistributes
//! work between the device types.
//!
//! The lbt is an exponentially weighted indicator: sporadic unbalanced runs
//! decay away, recurring ones drive it towards 1 and trigger redistribution.
//! The adaptive search bisects the CPU-share interval towards the faster
//! device type; when the optimum has left the interval it shifts the interval
//! sideways, doubling the step after more than two shifts in the same
//! direction.

use serde::{Deserialize, Serialize};

/// Tunables of the balancing process.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancerParams {
    /// Weight of the latest run in the lbt recurrence.
    pub weight: f64,
    /// Deviation bound under which a run counts as unbalanced.
    pub max_dev: f64,
    /// Correction factor for computations that prefer slightly unbalanced
    /// distributions.
    pub c_factor: f64,
    /// lbt level that triggers redistribution (realizes "lbt ≈ 1").
    pub trigger_threshold: f64,
}

impl Default for BalancerParams {
    fn default() -> Self {
        BalancerParams {
            weight: 2.0 / 3.0,
            max_dev: 0.85,
            c_factor: 1.0,
            trigger_threshold: 0.95,
        }
    }
}

impl BalancerParams {
    pub fn validate(&self) -> Result<(), String> {
        let inside = |v: f64, lo, hi| !v.is_nan() && v > lo && v <= hi;
        if !inside(self.weight, 0.0, 1.0) || self.weight == 1.0 {
            return Err("balancer weight must be in (0,1)".into());
        }
        if !inside(self.max_dev, 0.0, 1.0) {
            return Err("max_dev must be in (0,1]".into());
        }
        if self.c_factor.is_nan() || self.c_factor <= 0.0 {
            return Err("c_factor must be positive".into());
        }
        if !inside(self.trigger_threshold, 0.0, 1.0) {
            return Err("trigger_threshold must be in (0,1]".into());
        }
        Ok(())
    }

    /// A run is balanced when its deviation, corrected by `c_factor`, reaches
    /// `max_dev`. `dev` is the min/max ratio of the per-type times, so 1
    /// means perfectly even.
    pub fn is_balanced(&self, dev: f64) -> bool {
        dev / self.c_factor >= self.max_dev
    }
}

/// One step of the lbt recurrence:
/// `lbt(n) = isUnbalanced(dev) × weight + lbt(n−1) × (1 − weight)`.
pub fn lbt_update(prev_lbt: f64, dev: f64, params: &BalancerParams) -> f64 {
    let unbalanced = if params.is_balanced(dev) { 0.0 } else { 1.0 };
    unbalanced * params.weight + prev_lbt * (1.0 - params.weight)
}

/// Redistribution fires once the indicator is close enough to 1.
pub fn should_balance(lbt: f64, params: &BalancerParams) -> bool {
    lbt >= params.trigger_threshold
}

/// Which device type finished first. Ties bind to the GPU, consistent with
/// the distribution generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FasterType {
    Cpu,
    Gpu,
}

impl FasterType {
    pub fn from_times(cpu_time: f64, gpu_time: f64) -> Self {
        if cpu_time < gpu_time {
            FasterType::Cpu
        } else {
            FasterType::Gpu
        }
    }

    /// Direction of the CPU share move: the faster type takes on more work.
    fn direction(self) -> f64 {
        match self {
            FasterType::Cpu => 1.0,
            FasterType::Gpu => -1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbsPhase {
    Refining,
    Shifting,
}

/// Adaptive-binary-search state over the CPU share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbsState {
    /// CPU-share interval under search.
    pub lo: f64,
    pub hi: f64,
    /// Workload share still under training; halves while refining, doubles
    /// after repeated same-direction shifts.
    pub transferable: f64,
    /// Consecutive same-direction shifts, signed (+ towards more CPU).
    pub shift_count: i32,
    pub phase: AbsPhase,
    /// Finest representable share move (one granule); refining below it
    /// cannot change the plan.
    pub min_step: f64,
}

/// What one adaptive step did, for the run trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbsEvent {
    Refine,
    Shift { direction: i8 },
    DoubledStep,
}

impl AbsState {
    /// Fresh search centred on the current split. `initial_transferable` is
    /// the discrepancy against the derived reference when one exists,
    /// otherwise 1/8 of the total.
    pub fn on_trigger(current_cpu_share: f64, initial_transferable: f64, min_step: f64) -> Self {
        let t = initial_transferable.clamp(min_step, 1.0);
        AbsState {
            lo: (current_cpu_share - t).max(0.0),
            hi: (current_cpu_share + t).min(1.0),
            transferable: t,
            shift_count: 0,
            phase: AbsPhase::Refining,
            min_step,
        }
    }

    /// Advance the search one run: evaluate the feedback for `current` (the
    /// split the run just executed with) and emit the next candidate split.
    pub fn step(&mut self, faster: FasterType, current_cpu_share: f64) -> (f64, Vec<AbsEvent>) {
        let dir = faster.direction();
        let mut events = Vec::new();

        let at_boundary = if dir > 0.0 {
            self.hi - current_cpu_share < self.min_step
        } else {
            current_cpu_share - self.lo < self.min_step
        };

        if self.phase == AbsPhase::Refining && !at_boundary {
            // Classic bisection: discard the slower half, the candidate is
            // the midpoint of what remains.
            if dir > 0.0 {
                self.lo = current_cpu_share;
            } else {
                self.hi = current_cpu_share;
            }
            self.transferable = (self.hi - self.lo).max(self.min_step);
            self.shift_count = 0;
            events.push(AbsEvent::Refine);
            return (self.clamp(0.5 * (self.lo + self.hi)), events);
        }

        if self.phase == AbsPhase::Shifting && (dir as i32).signum() != self.shift_count.signum() {
            // Direction reversed: the optimum sits between the last two shift
            // positions; refine inside that bracket.
            self.phase = AbsPhase::Refining;
            if dir > 0.0 {
                self.lo = current_cpu_share;
                self.hi = (current_cpu_share + self.transferable).min(1.0);
            } else {
                self.hi = current_cpu_share;
                self.lo = (current_cpu_share - self.transferable).max(0.0);
            }
            self.transferable = (self.hi - self.lo).max(self.min_step);
            self.shift_count = 0;
            events.push(AbsEvent::Refine);
            return (self.clamp(0.5 * (self.lo + self.hi)), events);
        }

        // Shift: translate the interval one transferable-width sideways.
        if self.phase == AbsPhase::Shifting {
            self.shift_count += dir as i32;
            if self.shift_count.abs() > 2 {
                self.transferable = (self.transferable * 2.0).min(1.0);
                events.push(AbsEvent::DoubledStep);
            }
        } else {
            self.phase = AbsPhase::Shifting;
            self.shift_count = dir as i32;
        }
        let t = self.transferable;
        self.lo = (self.lo + dir * t).clamp(0.0, 1.0);
        self.hi = (self.hi + dir * t).clamp(0.0, 1.0);
        if self.hi < self.lo {
            std::mem::swap(&mut self.hi, &mut self.lo);
        }
        // A doubled step may outgrow the interval; widen it on the moving
        // side so the transferable share never exceeds the interval width.
        if self.hi - self.lo < t {
            if dir > 0.0 {
                self.hi = (self.lo + t).min(1.0);
            } else {
                self.lo = (self.hi - t).max(0.0);
            }
        }
        events.push(AbsEvent::Shift { direction: dir as i8 });
        (self.clamp(current_cpu_share + dir * t), events)
    }

    fn clamp(&self, share: f64) -> f64 {
        share.clamp(0.0, 1.0)
    }
}
