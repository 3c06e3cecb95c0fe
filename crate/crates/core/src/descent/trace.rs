use std::io::Write;
use std::path::Path;

use crate::embeddings::WeightedParticles;
use crate::error::{Result, UsdError};
use crate::features::FeatureMap;
use crate::mmd::mmd2;
use crate::scalar::Real;

pub const TRACE_HEADER: &str = "step,mmd2,sf2,total_mass,n_particles";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord<T: Real> {
    pub step: usize,
    /// MMD² to the target under the evaluation map.
    pub mmd2: T,
    pub sf2: T,
    pub total_mass: T,
    pub n_particles: usize,
    /// MMD² to the target under the descent map, `|δ|²`.
    pub mmd2_descent: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T: Real> {
    pub step: usize,
    pub particles: WeightedParticles<T>,
}

/// Per-step record of a descent run, step 0 included.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentTrace<T: Real> {
    pub records: Vec<TraceRecord<T>>,
    pub snapshots: Vec<Snapshot<T>>,
}

impl<T: Real> Default for DescentTrace<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> DescentTrace<T> {
    pub fn new() -> Self {
        Self {
            records: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    pub fn initial(&self) -> Option<&TraceRecord<T>> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TraceRecord<T>> {
        self.records.last()
    }

    /// Particles at the end of the run, if a final snapshot was taken.
    pub fn final_snapshot(&self) -> Option<&Snapshot<T>> {
        self.snapshots.last()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{TRACE_HEADER}")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.step,
                r.mmd2.to_f64_lossy(),
                r.sf2.to_f64_lossy(),
                r.total_mass.to_f64_lossy(),
                r.n_particles
            )?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("trace csv is ascii")
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

/// Snapshot closest to equidistant (in MMD) from source and target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Midpoint<T: Real> {
    pub snapshot_index: usize,
    pub step: usize,
    pub mmd_to_source: T,
    pub mmd_to_target: T,
}

impl<T: Real> Midpoint<T> {
    pub fn gap(&self) -> T {
        (self.mmd_to_source - self.mmd_to_target).abs()
    }
}

/// Finds the snapshot minimizing `|MMD(q_ℓ, source) − MMD(q_ℓ, target)|`,
/// ties going to the earlier snapshot.
pub fn find_midpoint<T: Real>(
    trace: &DescentTrace<T>,
    source: &WeightedParticles<T>,
    target: &WeightedParticles<T>,
    fm_eval: &FeatureMap<T>,
) -> Result<Midpoint<T>> {
    find_midpoint_in(&trace.snapshots, source, target, fm_eval)
}

pub fn find_midpoint_in<T: Real>(
    snapshots: &[Snapshot<T>],
    source: &WeightedParticles<T>,
    target: &WeightedParticles<T>,
    fm_eval: &FeatureMap<T>,
) -> Result<Midpoint<T>> {
    let mut best: Option<Midpoint<T>> = None;
    for (idx, snap) in snapshots.iter().enumerate() {
        let candidate = Midpoint {
            snapshot_index: idx,
            step: snap.step,
            mmd_to_source: mmd2(&snap.particles, source, fm_eval)?.max(T::zero()).sqrt(),
            mmd_to_target: mmd2(&snap.particles, target, fm_eval)?.max(T::zero()).sqrt(),
        };
        if best.is_none_or(|b| candidate.gap() < b.gap()) {
            best = Some(candidate);
        }
    }
    best.ok_or(UsdError::NoSnapshots)
}
