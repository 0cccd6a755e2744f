//! Profile construction: the ordered search over (CPU fission level, GPU
//! overlap, work-group sizes) with a binary-search workload distribution
//! generator in the innermost loop.
//!
//! Axes are visited in the order most likely to perform well: fission levels
//! finest-first, overlap ascending, work-group sizes by non-increasing
//! occupancy. Each axis stops as soon as a candidate fails to improve on
//! its predecessor. The distribution generator halves the transferable share
//! each round, permanently binding the other half to whichever device type
//! ran faster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Engine, EngineError, FrameworkConfig, RunRequest, Split};
use crate::kb::{Profile, Provenance};
use crate::platform::{cpu_get_configurations, gpu_get_configurations, FissionLevel, PlatformConfig, WgsCandidate};
use crate::sct::{KernelId, Sct};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TunerError {
    #[error("workload distribution generator exhausted (transferable below one granule)")]
    Exhausted,
}

/// Profile-construction tunables.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TunerParams {
    /// Minimum accepted GPU occupancy for work-group size candidates.
    pub occupancy_threshold: f64,
    /// Stop refining a distribution once the improvement falls below this.
    /// `None` resolves to 1% of the first measured candidate time.
    pub precision_ms: Option<f64>,
    /// Executions per candidate; the minimum time is kept.
    pub number_executions: u32,
    /// Upper bound of the overlap axis.
    pub overlap_cap: u32,
}

impl Default for TunerParams {
    fn default() -> Self {
        TunerParams {
            occupancy_threshold: 0.8,
            precision_ms: None,
            number_executions: 3,
            overlap_cap: 8,
        }
    }
}

impl TunerParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.occupancy_threshold.is_nan()
            || self.occupancy_threshold <= 0.0
            || self.occupancy_threshold > 1.0
        {
            return Err("occupancy_threshold must be in (0,1]".into());
        }
        if self.number_executions == 0 {
            return Err("number_executions must be >= 1".into());
        }
        if let Some(p) = self.precision_ms {
            if p.is_nan() || p <= 0.0 {
                return Err("precision must be positive".into());
            }
        }
        if self.overlap_cap == 0 {
            return Err("overlap_cap must be >= 1".into());
        }
        Ok(())
    }
}

// ── Workload distribution generator ─────────────────────────────────────────

/// Share of the workload still under training after `n` halvings.
pub fn transferable_size(n: u32, size: f64) -> f64 {
    size / 2f64.powi(n as i32)
}

/// Generator state: the shares permanently bound to each device type and the
/// transferable share still being trained. Always sums to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WldGenState {
    pub bound_cpu: f64,
    pub bound_gpu: f64,
    pub transferable: f64,
    pub iteration: u32,
}

impl WldGenState {
    /// Initially all the work is transferable and none is bound.
    pub fn initial() -> Self {
        WldGenState { bound_cpu: 0.0, bound_gpu: 0.0, transferable: 1.0, iteration: 0 }
    }
}

/// Next candidate distribution: the transferable share split evenly on top of
/// what is already bound. Errors once the transferable share can no longer
/// move a whole granule.
pub fn wld_next(state: &WldGenState, min_share: f64) -> Result<Split, TunerError> {
    if state.transferable < min_share.max(f64::MIN_POSITIVE) {
        return Err(TunerError::Exhausted);
    }
    let half = state.transferable / 2.0;
    Ok(Split { cpu: state.bound_cpu + half, gpu: state.bound_gpu + half })
}

/// Fold one measurement back in: the faster type keeps its half of the
/// transferable share for good (ties bind to the GPU), the other half stays
/// under training.
pub fn wld_feedback(state: &WldGenState, cpu_time: f64, gpu_time: f64) -> WldGenState {
    let half = state.transferable / 2.0;
    let (bound_cpu, bound_gpu) = if cpu_time < gpu_time {
        (state.bound_cpu + half, state.bound_gpu)
    } else {
        (state.bound_cpu, state.bound_gpu + half)
    };
    WldGenState { bound_cpu, bound_gpu, transferable: half, iteration: state.iteration + 1 }
}

// ── Search trace ────────────────────────────────────────────────────────────

/// One evaluated (configuration, distribution) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchStep {
    pub fission: FissionLevel,
    pub overlap: u32,
    pub wgs: BTreeMap<KernelId, u64>,
    pub cpu_share: f64,
    pub time_ms: f64,
    pub stored: bool,
    pub note: String,
}

/// Full record of one profile construction, enough to audit the candidate
/// orderings, the discard stops and the training curve.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchTrace {
    pub steps: Vec<SearchStep>,
    pub fission_visits: Vec<FissionLevel>,
    pub overlap_visits: Vec<u32>,
    /// Work-group sizes visited per (fission, overlap) context, in order.
    pub wgs_visits: Vec<Vec<u64>>,
    pub precision_ms: f64,
}

// ── Profile construction ────────────────────────────────────────────────────

/// Build a profile from scratch for (sct, workload): nested iteration over
/// fission, overlap and work-group sizes, with the distribution generator
/// innermost. Improvements are persisted to the knowledge base as they are
/// found; the final profile is returned with its search trace.
///
/// The builder owns the engine for its duration; candidate evaluations run at
/// a frozen clock.
pub fn build_profile(
    engine: &mut Engine,
    sct: &Sct,
    request: &RunRequest,
) -> Result<(Profile, SearchTrace), EngineError> {
    let params = engine.tuner_params;
    let key = (sct.id().clone(), request.workload.clone());

    let fission_levels = match &engine.fleet.cpu {
        Some(cpu) => cpu_get_configurations(cpu),
        None => vec![FissionLevel::NoFission],
    };
    let (overlaps, wgs_candidates) = if engine.fleet.gpus.is_empty() {
        (vec![1u32], vec![WgsCandidate { assignment: BTreeMap::new(), min_occupancy: 1.0 }])
    } else {
        let space = gpu_get_configurations(
            &engine.fleet.gpu_refs(),
            sct,
            params.occupancy_threshold,
            params.overlap_cap,
        );
        (space.overlaps, space.wgs_candidates)
    };
    let single_type = engine.fleet.cpu.is_none() || engine.fleet.gpus.is_empty();

    let mut trace = SearchTrace::default();
    let mut precision = params.precision_ms;
    let mut best: Option<(f64, FrameworkConfig)> = None;

    let mut prev_fission_time: Option<f64> = None;
    for &fission in &fission_levels {
        trace.fission_visits.push(fission);
        let mut fission_time: Option<f64> = None;

        let mut prev_overlap_time: Option<f64> = None;
        for &overlap in &overlaps {
            trace.overlap_visits.push(overlap);
            trace.wgs_visits.push(Vec::new());
            let mut overlap_time: Option<f64> = None;

            let mut prev_wgs_time: Option<f64> = None;
            for candidate in &wgs_candidates {
                trace
                    .wgs_visits
                    .last_mut()
                    .expect("context pushed above")
                    .push(candidate.assignment.values().copied().max().unwrap_or(1));
                let cand_time = search_distributions(
                    engine,
                    sct,
                    request,
                    &key,
                    fission,
                    overlap,
                    candidate,
                    single_type,
                    &mut precision,
                    &mut best,
                    &mut trace,
                )?;

                fission_time = min_opt(fission_time, cand_time);
                overlap_time = min_opt(overlap_time, cand_time);
                if discard(prev_wgs_time, cand_time) {
                    break;
                }
                prev_wgs_time = Some(cand_time);
            }

            if discard(prev_overlap_time, overlap_time.unwrap_or(f64::INFINITY)) {
                break;
            }
            prev_overlap_time = overlap_time;
        }

        if discard(prev_fission_time, fission_time.unwrap_or(f64::INFINITY)) {
            break;
        }
        prev_fission_time = fission_time;
    }

    trace.precision_ms = precision.unwrap_or(0.0);

    if best.is_none() {
        return Err(EngineError::InvalidConfig(
            "profile search found no feasible configuration".into(),
        ));
    }
    let profile = engine
        .kb
        .get(&key.0, &key.1)
        .cloned()
        .expect("an improvement was stored whenever best advanced");
    Ok((profile, trace))
}

/// A candidate "fails to improve performance relatively to the former" on its
/// axis; the first candidate on an axis has no former and is never discarded.
fn discard(prev: Option<f64>, current: f64) -> bool {
    match prev {
        Some(p) => current >= p,
        None => false,
    }
}

fn min_opt(acc: Option<f64>, x: f64) -> Option<f64> {
    Some(acc.map_or(x, |a| a.min(x)))
}

/// The innermost loop of the builder: walk the distribution generator for one
/// (fission, overlap, wgs) candidate. Returns the candidate's representative
/// (best measured) time; infeasible candidates report infinity so the axis
/// discard fires.
#[allow(clippy::too_many_arguments)]
fn search_distributions(
    engine: &mut Engine,
    sct: &Sct,
    request: &RunRequest,
    key: &(crate::sct::SctId, crate::engine::WorkloadId),
    fission: FissionLevel,
    overlap: u32,
    candidate: &WgsCandidate,
    single_type: bool,
    precision: &mut Option<f64>,
    best: &mut Option<(f64, FrameworkConfig)>,
    trace: &mut SearchTrace,
) -> Result<f64, EngineError> {
    let number_executions = engine.tuner_params.number_executions;
    let probe = assemble(engine, fission, overlap, candidate, Split::new(0.5))?;
    let min_share = match engine.min_split_step(sct, request, &probe) {
        Ok(s) => s,
        Err(EngineError::Decomp(e)) => {
            trace.steps.push(SearchStep {
                fission,
                overlap,
                wgs: candidate.assignment.clone(),
                cpu_share: 0.5,
                time_ms: f64::INFINITY,
                stored: false,
                note: format!("infeasible: {e}"),
            });
            return Ok(f64::INFINITY);
        }
        Err(e) => return Err(e),
    };

    let mut wld = WldGenState::initial();
    // The distribution search is steered by this candidate's own sequence of
    // measurements: it stops when two consecutive evaluations differ by less
    // than the precision or when the time regresses. The globally best time
    // only decides what gets persisted.
    let mut cand_time = f64::INFINITY;

    while let Ok(split) = wld_next(&wld, min_share) {
        let config = assemble(engine, fission, overlap, candidate, split)?;

        let (time, type_times) = match engine.measure_config(sct, request, &config, number_executions)
        {
            Ok(r) => r,
            Err(EngineError::Decomp(e)) => {
                trace.steps.push(SearchStep {
                    fission,
                    overlap,
                    wgs: candidate.assignment.clone(),
                    cpu_share: config.split.cpu,
                    time_ms: f64::INFINITY,
                    stored: false,
                    note: format!("infeasible: {e}"),
                });
                break;
            }
            Err(e) => return Err(e),
        };

        if precision.is_none() {
            *precision = Some(time * 0.01);
        }

        // Bind the transferable half to the faster type before judging the
        // measurement, mirroring the evaluation feeding the generator.
        if let Some((cpu_t, gpu_t)) = type_times {
            wld = wld_feedback(&wld, cpu_t, gpu_t);
        }

        let stored_best = best.as_ref().map(|(t, _)| *t).unwrap_or(f64::INFINITY);
        let stored = time < stored_best;
        if stored {
            *best = Some((time, config.clone()));
            engine.kb.store(Profile {
                sct_id: key.0.clone(),
                workload: key.1.clone(),
                split: config.split,
                platform: config.platform.clone(),
                best_time_ms: time,
                provenance: Provenance::Built,
            })?;
        }

        let improvement = cand_time - time;
        let regressed = time >= cand_time;
        cand_time = cand_time.min(time);
        let precision_break =
            !regressed && improvement < precision.expect("resolved above");
        trace.steps.push(SearchStep {
            fission,
            overlap,
            wgs: candidate.assignment.clone(),
            cpu_share: config.split.cpu,
            time_ms: time,
            stored,
            note: if regressed {
                "regression".into()
            } else if precision_break {
                "improved, within precision".into()
            } else {
                "improved".into()
            },
        });
        if regressed || precision_break {
            break;
        }

        if single_type || type_times.is_none() {
            // Only one device type received work: there is no distribution to
            // train, a single evaluation judges the candidate.
            break;
        }
    }

    Ok(cand_time)
}

fn assemble(
    engine: &Engine,
    fission: FissionLevel,
    overlap: u32,
    candidate: &WgsCandidate,
    split: Split,
) -> Result<FrameworkConfig, EngineError> {
    FrameworkConfig::assemble(
        &engine.fleet,
        PlatformConfig {
            fission_level: fission,
            overlap,
            wgs_per_kernel: candidate.assignment.clone(),
        },
        split,
    )
}
