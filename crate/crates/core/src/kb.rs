//! Knowledge base: persisted best-known configurations and configuration
//! derivation for unseen (SCT, workload) pairs.
//!
//! Derivation narrows its scope in order (profiles of the same SCT, then
//! profiles of the same workload, then profiles of the same dimensionality)
//! and interpolates the split fraction over log-scaled workload coordinates
//! with a Gaussian RBF (nearest neighbour beyond three dimensions or in
//! degenerate scopes). Discrete configuration fields are never interpolated;
//! they come from the nearest stored profile.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::engine::{Split, WorkloadId};
use crate::platform::{FissionLevel, PlatformConfig};
use crate::sct::{KernelId, SctId};

#[derive(Debug, Error)]
pub enum KbError {
    #[error("knowledge base persistence failure: {0}")]
    PersistenceFailure(String),
    #[error("invalid profile: {0}")]
    InvalidProfile(String),
}

/// How a stored configuration was obtained. Later stages supersede earlier
/// ones at equal times.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Derived,
    Balanced,
    Built,
}

impl Provenance {
    pub fn label(&self) -> &'static str {
        match self {
            Provenance::Derived => "derived",
            Provenance::Balanced => "balanced",
            Provenance::Built => "built",
        }
    }
}

/// Best-known framework configuration for an (SCT, workload) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub sct_id: SctId,
    pub workload: WorkloadId,
    pub split: Split,
    pub platform: PlatformConfig,
    pub best_time_ms: f64,
    pub provenance: Provenance,
}

impl Profile {
    fn validate(&self) -> Result<(), KbError> {
        if self.best_time_ms.is_nan() || self.best_time_ms <= 0.0 {
            return Err(KbError::InvalidProfile("best_time must be positive".into()));
        }
        if (self.split.cpu + self.split.gpu - 1.0).abs() > 1e-9 {
            return Err(KbError::InvalidProfile("split fractions must sum to 1".into()));
        }
        Ok(())
    }
}

/// Scope the derivation ended up using; carried on results so the narrowing
/// order is observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    ExactHit,
    SameSct,
    SameWorkload,
    SameDimensionality,
    Default,
}

impl Scope {
    pub fn label(&self) -> &'static str {
        match self {
            Scope::ExactHit => "exact-hit",
            Scope::SameSct => "same-sct",
            Scope::SameWorkload => "same-workload",
            Scope::SameDimensionality => "same-dimensionality",
            Scope::Default => "cold-default",
        }
    }
}

/// A derived configuration candidate. `wgs` is `None` when the KB has no
/// usable stored sizes (cold start) and the engine should pick the
/// best-occupancy sizes for the actual tree.
#[derive(Debug, Clone, PartialEq)]
pub struct DerivedConfig {
    pub split: Split,
    pub fission: FissionLevel,
    pub overlap: u32,
    pub wgs: Option<BTreeMap<KernelId, u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Derivation {
    pub config: DerivedConfig,
    pub scope: Scope,
}

impl DerivedConfig {
    /// Cold-start fallback: even split, no fission, single execution.
    pub fn default_config() -> Self {
        DerivedConfig {
            split: Split { cpu: 0.5, gpu: 0.5 },
            fission: FissionLevel::NoFission,
            overlap: 1,
            wgs: None,
        }
    }
}

/// In-memory knowledge base, persisted as a schema-tagged TOML record file
/// (tiny: tens of profiles), rewritten compacted on save.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    profiles: BTreeMap<(SctId, WorkloadId), Profile>,
}

pub const KB_SCHEMA: &str = "hetsim-kb/1";

#[derive(Serialize, Deserialize)]
struct KbFile {
    schema: String,
    #[serde(default, rename = "profile")]
    profiles: Vec<Profile>,
}

impl KnowledgeBase {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Profile> {
        self.profiles.values()
    }

    pub fn get(&self, sct_id: &SctId, workload: &WorkloadId) -> Option<&Profile> {
        self.profiles.get(&(sct_id.clone(), workload.clone()))
    }

    /// Upsert keyed by (sct_id, workload). An existing entry is replaced only
    /// by a strictly better time or an escalated provenance.
    pub fn store(&mut self, profile: Profile) -> Result<bool, KbError> {
        profile.validate()?;
        let key = (profile.sct_id.clone(), profile.workload.clone());
        match self.profiles.get(&key) {
            Some(existing)
                if profile.best_time_ms >= existing.best_time_ms
                    && profile.provenance <= existing.provenance =>
            {
                Ok(false)
            }
            _ => {
                self.profiles.insert(key, profile);
                Ok(true)
            }
        }
    }

    /// Derive a configuration candidate for an (SCT, workload) pair.
    ///
    /// Scope narrowing: exact hit (the KB "serving as a cache"), profiles of
    /// the same SCT, profiles of the same workload, profiles of the same
    /// dimensionality, and finally the default configuration.
    pub fn derive(&self, sct_id: &SctId, workload: &WorkloadId) -> Derivation {
        if let Some(p) = self.get(sct_id, workload) {
            return Derivation {
                config: DerivedConfig {
                    split: p.split,
                    fission: p.platform.fission_level,
                    overlap: p.platform.overlap,
                    wgs: Some(p.platform.wgs_per_kernel.clone()),
                },
                scope: Scope::ExactHit,
            };
        }

        let same_sct: Vec<&Profile> =
            self.profiles.values().filter(|p| &p.sct_id == sct_id).collect();
        if !same_sct.is_empty() {
            return Derivation {
                config: interpolate(&same_sct, workload),
                scope: Scope::SameSct,
            };
        }

        let same_workload: Vec<&Profile> =
            self.profiles.values().filter(|p| &p.workload == workload).collect();
        if !same_workload.is_empty() {
            return Derivation {
                config: interpolate(&same_workload, workload),
                scope: Scope::SameWorkload,
            };
        }

        let same_dim: Vec<&Profile> = self
            .profiles
            .values()
            .filter(|p| p.workload.dimensions() == workload.dimensions())
            .collect();
        if !same_dim.is_empty() {
            return Derivation {
                config: interpolate(&same_dim, workload),
                scope: Scope::SameDimensionality,
            };
        }

        Derivation { config: DerivedConfig::default_config(), scope: Scope::Default }
    }

    // ── persistence ──

    pub fn to_toml_string(&self) -> String {
        let file = KbFile {
            schema: KB_SCHEMA.to_string(),
            profiles: self.profiles.values().cloned().collect(),
        };
        toml::to_string(&file).expect("kb serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self, KbError> {
        if s.trim().is_empty() {
            return Ok(Self::new());
        }
        let file: KbFile =
            toml::from_str(s).map_err(|e| KbError::PersistenceFailure(e.to_string()))?;
        if file.schema != KB_SCHEMA {
            return Err(KbError::PersistenceFailure(format!(
                "unsupported kb schema '{}', expected '{KB_SCHEMA}'",
                file.schema
            )));
        }
        let mut kb = Self::new();
        for p in file.profiles {
            p.validate()?;
            kb.profiles.insert((p.sct_id.clone(), p.workload.clone()), p);
        }
        Ok(kb)
    }

    pub fn load(path: &Path) -> Result<Self, KbError> {
        if !path.exists() {
            return Ok(Self::new());
        }
        let text = std::fs::read_to_string(path)
            .map_err(|e| KbError::PersistenceFailure(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), KbError> {
        std::fs::write(path, self.to_toml_string())
            .map_err(|e| KbError::PersistenceFailure(format!("{}: {e}", path.display())))
    }
}

// ── Scattered-data interpolation ────────────────────────────────────────────

fn coords(w: &WorkloadId) -> Vec<f64> {
    w.elements_per_dimension.iter().map(|&e| (e as f64).ln()).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let mut sum = 0.0;
    for i in 0..n {
        let d = a[i] - b[i];
        sum += d * d;
    }
    // Dimension mismatch inside a scope can only happen in the same-workload
    // scope where all points coincide anyway; treat missing axes as zero.
    for x in a.iter().skip(n).chain(b.iter().skip(n)) {
        sum += x * x;
    }
    sum.sqrt()
}

fn nearest<'a>(profiles: &[&'a Profile], query: &[f64]) -> &'a Profile {
    profiles
        .iter()
        .min_by(|a, b| {
            let da = distance(&coords(&a.workload), query);
            let db = distance(&coords(&b.workload), query);
            da.partial_cmp(&db).unwrap()
        })
        .expect("non-empty scope")
}

fn interpolate(profiles: &[&Profile], workload: &WorkloadId) -> DerivedConfig {
    let query = coords(workload);
    let nn = nearest(profiles, &query);
    let mut config = DerivedConfig {
        split: nn.split,
        fission: nn.platform.fission_level,
        overlap: nn.platform.overlap,
        wgs: Some(nn.platform.wgs_per_kernel.clone()),
    };
    // The continuous field (the split) is interpolated when the scope
    // supports it; everything discrete stays nearest-neighbour.
    if workload.dimensions() <= 3 && profiles.len() >= 2 {
        if let Some(cpu) = rbf_interpolate(profiles, &query) {
            let cpu = cpu.clamp(0.0, 1.0);
            config.split = Split { cpu, gpu: 1.0 - cpu };
        }
    }
    config
}

/// Gaussian RBF interpolation of the CPU fraction over workload coordinates.
/// Shape parameter: the median pairwise distance of the scope's points.
/// Returns `None` for degenerate scopes (coincident points, singular system).
fn rbf_interpolate(profiles: &[&Profile], query: &[f64]) -> Option<f64> {
    let points: Vec<Vec<f64>> = profiles.iter().map(|p| coords(&p.workload)).collect();
    let values: Vec<f64> = profiles.iter().map(|p| p.split.cpu).collect();
    let n = points.len();

    let mut dists = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            dists.push(distance(&points[i], &points[j]));
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let sigma = if dists.len() % 2 == 1 {
        dists[dists.len() / 2]
    } else {
        0.5 * (dists[dists.len() / 2 - 1] + dists[dists.len() / 2])
    };
    if sigma.is_nan() || sigma <= 0.0 {
        return None;
    }

    let phi = |r: f64| (-(r / sigma) * (r / sigma)).exp();
    let mut matrix = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in 0..n {
            matrix[i][j] = phi(distance(&points[i], &points[j]));
        }
    }
    let weights = solve(&mut matrix, values)?;
    Some(query_rbf(&points, &weights, query, phi))
}

fn query_rbf(
    points: &[Vec<f64>],
    weights: &[f64],
    query: &[f64],
    phi: impl Fn(f64) -> f64,
) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * phi(distance(p, query)))
        .sum()
}

/// Gaussian elimination with partial pivoting. The Gaussian kernel matrix is
/// positive definite for distinct points, so failure means a degenerate scope.
fn solve(matrix: &mut [Vec<f64>], mut rhs: Vec<f64>) -> Option<Vec<f64>> {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| {
            matrix[a][col].abs().partial_cmp(&matrix[b][col].abs()).unwrap()
        })?;
        if matrix[pivot][col].abs() < 1e-12 {
            return None;
        }
        matrix.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..n {
            let f = matrix[row][col] / matrix[col][col];
            let (pivot_row, rest) = matrix.split_at_mut(col + 1);
            let pivot = &pivot_row[col];
            for (x, p) in rest[row - col - 1].iter_mut().zip(pivot).skip(col) {
                *x -= f * p;
            }
            rhs[row] -= f * rhs[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..n {
            acc -= matrix[row][k] * x[k];
        }
        x[row] = acc / matrix[row][row];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::FpPrecision;

    fn workload(sizes: &[u64]) -> WorkloadId {
        WorkloadId::new(sizes.to_vec(), FpPrecision::Single).unwrap()
    }

    fn profile(sct: &str, sizes: &[u64], cpu: f64, time: f64, prov: Provenance) -> Profile {
        Profile {
            sct_id: SctId(sct.to_string()),
            workload: workload(sizes),
            split: Split { cpu, gpu: 1.0 - cpu },
            platform: PlatformConfig {
                fission_level: FissionLevel::L2,
                overlap: 2,
                wgs_per_kernel: BTreeMap::from([("K".to_string(), 64u64)]),
            },
            best_time_ms: time,
            provenance: prov,
        }
    }

    #[test]
    fn store_then_lookup_round_trips() {
        let mut kb = KnowledgeBase::new();
        let p = profile("a", &[1000], 0.3, 5.0, Provenance::Built);
        kb.store(p.clone()).unwrap();
        assert_eq!(kb.get(&p.sct_id, &p.workload), Some(&p));
    }

    #[test]
    fn slower_profile_does_not_replace_a_faster_one() {
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[1000], 0.3, 5.0, Provenance::Built)).unwrap();
        let replaced = kb.store(profile("a", &[1000], 0.4, 9.0, Provenance::Built)).unwrap();
        assert!(!replaced);
        assert_eq!(kb.get(&SctId("a".into()), &workload(&[1000])).unwrap().split.cpu, 0.3);
    }

    #[test]
    fn provenance_escalation_replaces_at_equal_time() {
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[1000], 0.3, 5.0, Provenance::Derived)).unwrap();
        let replaced = kb.store(profile("a", &[1000], 0.4, 5.0, Provenance::Built)).unwrap();
        assert!(replaced);
        assert_eq!(
            kb.get(&SctId("a".into()), &workload(&[1000])).unwrap().provenance,
            Provenance::Built
        );
    }

    #[test]
    fn exact_hit_returns_the_stored_profile_verbatim() {
        let mut kb = KnowledgeBase::new();
        let p = profile("a", &[1000], 0.3, 5.0, Provenance::Built);
        kb.store(p.clone()).unwrap();
        let d = kb.derive(&p.sct_id, &p.workload);
        assert_eq!(d.scope, Scope::ExactHit);
        assert_eq!(d.config.split, p.split);
        assert_eq!(d.config.fission, FissionLevel::L2);
        assert_eq!(d.config.overlap, 2);
        assert_eq!(d.config.wgs.unwrap()["K"], 64);
    }

    #[test]
    fn one_dimensional_interpolation_stays_between_the_stored_fractions() {
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[1_000_000], 0.30, 5.0, Provenance::Built)).unwrap();
        kb.store(profile("a", &[10_000_000], 0.20, 9.0, Provenance::Built)).unwrap();
        let d = kb.derive(&SctId("a".into()), &workload(&[5_500_000]));
        assert_eq!(d.scope, Scope::SameSct);
        let cpu = d.config.split.cpu;
        assert!(cpu > 0.20 && cpu < 0.30, "cpu fraction {cpu} not strictly between");
    }

    #[test]
    fn empty_kb_yields_the_default_config() {
        let kb = KnowledgeBase::new();
        let d = kb.derive(&SctId("a".into()), &workload(&[42]));
        assert_eq!(d.scope, Scope::Default);
        assert_eq!(d.config.split, Split { cpu: 0.5, gpu: 0.5 });
        assert_eq!(d.config.fission, FissionLevel::NoFission);
        assert_eq!(d.config.overlap, 1);
        assert!(d.config.wgs.is_none());
    }

    #[test]
    fn scope_narrowing_order() {
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[1000], 0.3, 5.0, Provenance::Built)).unwrap();
        kb.store(profile("b", &[2000], 0.4, 5.0, Provenance::Built)).unwrap();
        kb.store(profile("c", &[64, 64], 0.6, 5.0, Provenance::Built)).unwrap();

        // same SCT beats same workload
        assert_eq!(kb.derive(&SctId("a".into()), &workload(&[2000])).scope, Scope::SameSct);
        // unseen SCT, known workload
        assert_eq!(kb.derive(&SctId("x".into()), &workload(&[2000])).scope, Scope::SameWorkload);
        // unseen SCT and workload, known dimensionality
        assert_eq!(
            kb.derive(&SctId("x".into()), &workload(&[128, 128])).scope,
            Scope::SameDimensionality
        );
        // nothing matches at all
        assert_eq!(kb.derive(&SctId("x".into()), &workload(&[1, 2, 3])).scope, Scope::Default);
    }

    #[test]
    fn interpolated_fractions_are_clamped() {
        // Equal stored values overshoot at the midpoint with a plain Gaussian
        // RBF; the result must still be a valid fraction.
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[1_000], 0.999, 5.0, Provenance::Built)).unwrap();
        kb.store(profile("a", &[1_000_000], 0.999, 5.0, Provenance::Built)).unwrap();
        let d = kb.derive(&SctId("a".into()), &workload(&[30_000]));
        assert!((0.0..=1.0).contains(&d.config.split.cpu));
        assert!((0.0..=1.0).contains(&d.config.split.gpu));
    }

    #[test]
    fn discrete_fields_come_from_the_nearest_neighbour() {
        let mut kb = KnowledgeBase::new();
        let mut near = profile("a", &[1_000], 0.3, 5.0, Provenance::Built);
        near.platform.fission_level = FissionLevel::L1;
        near.platform.overlap = 4;
        let far = profile("a", &[1_000_000_000], 0.2, 5.0, Provenance::Built);
        kb.store(near).unwrap();
        kb.store(far).unwrap();
        let d = kb.derive(&SctId("a".into()), &workload(&[2_000]));
        assert_eq!(d.config.fission, FissionLevel::L1);
        assert_eq!(d.config.overlap, 4);
    }

    #[test]
    fn four_dimensional_queries_use_pure_nearest_neighbour() {
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[8, 8, 8, 8], 0.3, 5.0, Provenance::Built)).unwrap();
        kb.store(profile("a", &[64, 64, 64, 64], 0.7, 5.0, Provenance::Built)).unwrap();
        let d = kb.derive(&SctId("a".into()), &workload(&[9, 9, 9, 9]));
        assert_eq!(d.config.split.cpu, 0.3, "no interpolation beyond 3 dims");
    }

    #[test]
    fn toml_round_trip_is_bit_exact() {
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[1000], 0.300000000001, 5.125, Provenance::Built)).unwrap();
        kb.store(profile("b", &[7, 9], 1.0 / 3.0, 0.1 + 0.2, Provenance::Derived)).unwrap();
        let text = kb.to_toml_string();
        let reloaded = KnowledgeBase::from_toml_str(&text).unwrap();
        for (orig, back) in kb.iter().zip(reloaded.iter()) {
            assert_eq!(orig.split.cpu.to_bits(), back.split.cpu.to_bits());
            assert_eq!(orig.best_time_ms.to_bits(), back.best_time_ms.to_bits());
            assert_eq!(orig, back);
        }
        assert_eq!(text, reloaded.to_toml_string());
    }

    #[test]
    fn unknown_schema_is_rejected() {
        let err = KnowledgeBase::from_toml_str("schema = \"other/9\"\n").unwrap_err();
        assert!(err.to_string().contains("schema"));
    }

    #[test]
    fn storage_io_failures_surface_as_persistence_errors() {
        let mut kb = KnowledgeBase::new();
        kb.store(profile("a", &[10], 0.5, 1.0, Provenance::Derived)).unwrap();
        // writing over a directory fails
        let err = kb.save(&std::env::temp_dir()).unwrap_err();
        assert!(matches!(err, KbError::PersistenceFailure(_)));
        // loading a missing file is an empty kb, not an error
        let missing = std::env::temp_dir().join("hetsim-kb-does-not-exist.toml");
        assert!(KnowledgeBase::load(&missing).unwrap().is_empty());
    }
}
