//! Flow and reconstruction error metrics, and slice export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::ParticleSet;
use crate::kdtree::KdTree;

/// Mean endpoint error over the grid.
pub fn aee(estimated: &FlowField, truth: &FlowField) -> Result<f64> {
    if estimated.dims != truth.dims {
        return Err(Error::DimensionMismatch(format!(
            "flow dims {:?} vs {:?}",
            estimated.dims, truth.dims
        )));
    }
    if truth.vectors.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = estimated
        .vectors
        .iter()
        .zip(&truth.vectors)
        .map(|(a, b)| (a - b).norm())
        .sum();
    Ok(sum / truth.vectors.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconStats {
    pub truth_count: usize,
    pub reconstructed_count: usize,
    pub undetected: usize,
    pub undetected_fraction: f64,
    pub ghosts: usize,
    /// Relative to the ground-truth count, so it can exceed 1.
    pub ghost_fraction: f64,
    pub avg_position_error: f64,
}

/// Matched `(reconstructed, truth, distance)` triples: all pairs closer than
/// `radius`, taken nearest first, each particle used at most once.
pub fn match_pairs(
    reconstructed: &ParticleSet,
    truth: &ParticleSet,
    radius: f64,
) -> Vec<(usize, usize, f64)> {
    let tree = KdTree::new(&truth.positions());
    let mut pairs = Vec::new();
    let mut hits = Vec::new();
    for (i, p) in reconstructed.iter().enumerate() {
        tree.within_radius_into(&p.position, radius, &mut hits);
        for &j in &hits {
            pairs.push((i, j, (p.position - truth.particles[j].position).norm()));
        }
    }
    pairs.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut used_r = vec![false; reconstructed.len()];
    let mut used_t = vec![false; truth.len()];
    pairs
        .into_iter()
        .filter(|&(i, j, _)| {
            if used_r[i] || used_t[j] {
                return false;
            }
            used_r[i] = true;
            used_t[j] = true;
            true
        })
        .collect()
}

pub fn match_particles(
    reconstructed: &ParticleSet,
    truth: &ParticleSet,
    radius: f64,
) -> ReconStats {
    let matched = match_pairs(reconstructed, truth, radius);
    let n = truth.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    let undetected = n - matched.len();
    let ghosts = reconstructed.len() - matched.len();
    let avg = if matched.is_empty() {
        0.0
    } else {
        matched.iter().map(|m| m.2).sum::<f64>() / matched.len() as f64
    };
    ReconStats {
        truth_count: n,
        reconstructed_count: reconstructed.len(),
        undetected,
        undetected_fraction: frac(undetected),
        ghosts,
        ghost_fraction: frac(ghosts),
        avg_position_error: avg,
    }
}

/// One component of the z-slice `index` as CSV, one row per y.
pub fn export_slice(field: &FlowField, index: usize, component: usize) -> Result<String> {
    let [nx, ny, nz] = field.dims;
    if index >= nz {
        return Err(Error::IndexOutOfRange { index, size: nz });
    }
    if component >= 3 {
        return Err(Error::IndexOutOfRange {
            index: component,
            size: 3,
        });
    }
    let mut out = String::new();
    for j in 0..ny {
        for i in 0..nx {
            if i > 0 {
                out.push(',');
            }
            let v = field.vectors[field.index(i, j, index)][component];
            write!(out, "{v}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}
