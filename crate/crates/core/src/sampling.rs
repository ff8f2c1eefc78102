//! Uniform Monte Carlo samplers on boxes and time-space boxes.
//!
//! For timed domains the time coordinate is stored first in every point.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{FexError, Result};
use crate::points::PointSet;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Hypercube,
    TimedHypercube,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    lower: Vec<f64>,
    upper: Vec<f64>,
    time: Option<(f64, f64)>,
}

impl DomainSpec {
    /// `[lo, hi]^d`.
    pub fn hypercube(d: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; d], vec![hi; d], None)
    }

    /// `[t0, t1] x [lo, hi]^d`.
    pub fn timed_hypercube(d: usize, lo: f64, hi: f64, t0: f64, t1: f64) -> Result<Self> {
        Self::new(vec![lo; d], vec![hi; d], Some((t0, t1)))
    }

    pub fn new(lower: Vec<f64>, upper: Vec<f64>, time: Option<(f64, f64)>) -> Result<Self> {
        if lower.is_empty() {
            return Err(FexError::Config("domain dimension must be at least 1".into()));
        }
        if lower.len() != upper.len() {
            return Err(FexError::DimensionMismatch { expected: lower.len(), got: upper.len() });
        }
        let ordered = |lo: f64, hi: f64| lo.is_finite() && hi.is_finite() && lo < hi;
        if !lower.iter().zip(&upper).all(|(&l, &u)| ordered(l, u)) {
            return Err(FexError::Config("domain bounds must satisfy lower < upper".into()));
        }
        if let Some((t0, t1)) = time {
            if !ordered(t0, t1) {
                return Err(FexError::Config("time interval must satisfy t0 < t1".into()));
            }
        }
        Ok(Self { lower, upper, time })
    }

    pub fn kind(&self) -> DomainKind {
        if self.time.is_some() {
            DomainKind::TimedHypercube
        } else {
            DomainKind::Hypercube
        }
    }

    pub fn spatial_dim(&self) -> usize {
        self.lower.len()
    }

    /// Coordinates per point, time included.
    pub fn point_dim(&self) -> usize {
        self.spatial_dim() + usize::from(self.time.is_some())
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn time(&self) -> Option<(f64, f64)> {
        self.time
    }

    fn time_len(&self) -> f64 {
        self.time.map_or(1.0, |(t0, t1)| t1 - t0)
    }

    fn widths(&self) -> impl Iterator<Item = f64> + '_ {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l)
    }

    /// Spatial volume.
    pub fn spatial_volume(&self) -> f64 {
        self.widths().product()
    }

    /// Volume of the full (time x space) region.
    pub fn volume(&self) -> f64 {
        self.spatial_volume() * self.time_len()
    }

    fn facet_areas(&self) -> Vec<f64> {
        let w: Vec<f64> = self.widths().collect();
        let d = w.len();
        (0..d)
            .map(|i| (0..d).filter(|&j| j != i).map(|j| w[j]).product::<f64>())
            .collect()
    }

    /// Measure of the spatial boundary (times the time interval, if any).
    pub fn boundary_measure(&self) -> f64 {
        2.0 * self.facet_areas().iter().sum::<f64>() * self.time_len()
    }
}

/// Points drawn from one region together with the region's measure.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub points: PointSet,
    pub weight: f64,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn require_points(n: usize) -> Result<()> {
    if n == 0 {
        Err(FexError::Config("sample count must be at least 1".into()))
    } else {
        Ok(())
    }
}

fn push_time(spec: &DomainSpec, rng: &mut Rng, data: &mut Vec<f64>) {
    if let Some((t0, t1)) = spec.time {
        data.push(rng.gen_range(t0..t1));
    }
}

/// `n` i.i.d. uniform points in the full region.
pub fn sample_interior(spec: &DomainSpec, n: usize, rng: &mut Rng) -> Result<SampleBatch> {
    require_points(n)?;
    let mut data = Vec::with_capacity(n * spec.point_dim());
    for _ in 0..n {
        push_time(spec, rng, &mut data);
        for (&l, &u) in spec.lower.iter().zip(&spec.upper) {
            data.push(rng.gen_range(l..u));
        }
    }
    Ok(SampleBatch { points: PointSet::new(spec.point_dim(), data), weight: spec.volume() })
}

/// `n` uniform points on the spatial boundary.
///
/// Each point picks one of the `2d` facets with probability proportional to
/// its area (uniform on a cube), pins that coordinate to its bound and draws
/// the remaining coordinates uniformly.
pub fn sample_boundary(spec: &DomainSpec, n: usize, rng: &mut Rng) -> Result<SampleBatch> {
    require_points(n)?;
    let d = spec.spatial_dim();
    let areas = spec.facet_areas();
    let cube = areas.iter().all(|&a| a == areas[0]);
    let total: f64 = areas.iter().sum();
    let mut data = Vec::with_capacity(n * spec.point_dim());
    for _ in 0..n {
        let facet = if cube {
            rng.gen_range(0..2 * d)
        } else {
            let mut r = rng.gen_range(0.0..2.0 * total);
            let mut k = 2 * d - 1;
            for (f, a) in areas.iter().flat_map(|a| [a, a]).enumerate() {
                if r < *a {
                    k = f;
                    break;
                }
                r -= a;
            }
            k
        };
        let (axis, upper_side) = (facet / 2, facet % 2 == 1);
        push_time(spec, rng, &mut data);
        for i in 0..d {
            let (l, u) = (spec.lower[i], spec.upper[i]);
            data.push(if i == axis {
                if upper_side {
                    u
                } else {
                    l
                }
            } else {
                rng.gen_range(l..u)
            });
        }
    }
    Ok(SampleBatch { points: PointSet::new(spec.point_dim(), data), weight: spec.boundary_measure() })
}

/// `n` uniform points on the initial time slice `t = t0`; weight is the spatial volume.
pub fn sample_initial_slice(spec: &DomainSpec, n: usize, rng: &mut Rng) -> Result<SampleBatch> {
    require_points(n)?;
    let Some((t0, _)) = spec.time else {
        return Err(FexError::Config("initial slice requires a timed domain".into()));
    };
    let mut data = Vec::with_capacity(n * spec.point_dim());
    for _ in 0..n {
        data.push(t0);
        for (&l, &u) in spec.lower.iter().zip(&spec.upper) {
            data.push(rng.gen_range(l..u));
        }
    }
    Ok(SampleBatch { points: PointSet::new(spec.point_dim(), data), weight: spec.spatial_volume() })
}

/// Mean of `values`, accumulated as offsets from the first entry so that a
/// constant input returns that constant exactly.
pub fn shifted_mean(values: &[f64]) -> f64 {
    let Some(&first) = values.first() else {
        return 0.0;
    };
    let rest: f64 = values.iter().map(|v| v - first).sum();
    first + rest / values.len() as f64
}

/// `weight * mean(f(points))`.
pub fn mc_integral<F>(f: F, batch: &SampleBatch) -> Result<f64>
where
    F: FnOnce(&PointSet) -> Result<Vec<f64>>,
{
    let values = f(&batch.points)?;
    if values.len() != batch.len() {
        return Err(FexError::DimensionMismatch { expected: batch.len(), got: values.len() });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(FexError::NonFinite("integrand"));
    }
    let m = shifted_mean(&values);
    if !m.is_finite() {
        return Err(FexError::NonFinite("integral estimate"));
    }
    Ok(batch.weight * m)
}
