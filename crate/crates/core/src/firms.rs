//! Firm technologies: profit evaluation and supply analysis.
//!
//! A production set is one of three shapes: the singleton `{offset}` used by
//! government firms, a translated finitely-generated cone
//! `{offset + sum_r a_r g_r : a_r >= 0}`, or a polytope
//! `conv{offset + v}`. Setting `free_disposal` on a cone implicitly appends
//! the disposal rays `-e_1, ..., -e_ell`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vecmath::dot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TechnologyKind {
    /// Singleton production set `{offset}`; the government firm uses this
    /// with a zero offset.
    Zero,
    /// Translated finitely-generated cone.
    ConeRays,
    /// Convex hull of translated vertices.
    Polytope,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Technology {
    pub kind: TechnologyKind,
    pub offset: Vec<f64>,
    pub generators: Vec<Vec<f64>>,
    pub free_disposal: bool,
}

/// Nonnegative intensity per generator of a cone (for a polytope, convex
/// weights over its vertices; for a free-disposal cone the disposal rays
/// `-e_i` occupy the trailing `ell` slots).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivityVector {
    pub levels: Vec<f64>,
}

impl ActivityVector {
    pub fn new(levels: Vec<f64>) -> Self {
        Self { levels }
    }

    pub fn zeros(n: usize) -> Self {
        Self { levels: vec![0.0; n] }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FirmError {
    #[error("activity vector has {got} levels, technology expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("supply set is empty: max profit is unbounded (ray {ray} earns {profit})")]
    UnboundedSupply { ray: usize, profit: f64 },
}

impl Technology {
    pub fn zero_firm(ell: usize) -> Self {
        Self {
            kind: TechnologyKind::Zero,
            offset: vec![0.0; ell],
            generators: Vec::new(),
            free_disposal: false,
        }
    }

    pub fn cone(generators: Vec<Vec<f64>>) -> Self {
        let ell = generators.first().map_or(0, Vec::len);
        Self {
            kind: TechnologyKind::ConeRays,
            offset: vec![0.0; ell],
            generators,
            free_disposal: false,
        }
    }

    pub fn free_disposal_cone(ell: usize, generators: Vec<Vec<f64>>) -> Self {
        Self {
            kind: TechnologyKind::ConeRays,
            offset: vec![0.0; ell],
            generators,
            free_disposal: true,
        }
    }

    pub fn polytope(vertices: Vec<Vec<f64>>) -> Self {
        let ell = vertices.first().map_or(0, Vec::len);
        Self {
            kind: TechnologyKind::Polytope,
            offset: vec![0.0; ell],
            generators: vertices,
            free_disposal: false,
        }
    }

    pub fn with_offset(mut self, offset: Vec<f64>) -> Self {
        self.offset = offset;
        self
    }

    /// Explicit generators plus, for a free-disposal cone, the implicit
    /// disposal rays `-e_i`.
    pub fn effective_rays(&self, ell: usize) -> Vec<Vec<f64>> {
        let mut rays = self.generators.clone();
        if self.kind == TechnologyKind::ConeRays && self.free_disposal {
            for i in 0..ell {
                let mut e = vec![0.0; ell];
                e[i] = -1.0;
                rays.push(e);
            }
        }
        rays
    }

    /// Number of activity levels a certificate must carry for this firm.
    pub fn activity_len(&self, ell: usize) -> usize {
        match self.kind {
            TechnologyKind::Zero => 0,
            TechnologyKind::ConeRays => {
                self.generators.len() + if self.free_disposal { ell } else { 0 }
            }
            TechnologyKind::Polytope => self.generators.len(),
        }
    }
}

/// Maximum profit `sup { p.y : y in Y }`; `+inf` is a legitimate value for a
/// cone with a profitable ray.
pub fn max_profit(tech: &Technology, price: &[f64]) -> f64 {
    let base = dot(price, &tech.offset);
    match tech.kind {
        TechnologyKind::Zero => base,
        TechnologyKind::ConeRays => {
            let profitable = tech
                .effective_rays(price.len())
                .iter()
                .any(|g| dot(price, g) > 0.0);
            if profitable {
                f64::INFINITY
            } else {
                base
            }
        }
        TechnologyKind::Polytope => {
            let best = tech
                .generators
                .iter()
                .map(|v| dot(price, v))
                .fold(f64::NEG_INFINITY, f64::max);
            if tech.generators.is_empty() {
                base
            } else {
                base + best
            }
        }
    }
}

/// Indices of generators on which any activity is profit-maximizing: cone
/// rays with `|p.g| <= tol` (all rays satisfy `p.g <= 0` when profit is
/// finite), or polytope vertices within `tol` of the maximum.
pub fn supply_active_set(
    tech: &Technology,
    price: &[f64],
    tol: f64,
) -> Result<Vec<usize>, FirmError> {
    match tech.kind {
        TechnologyKind::Zero => Ok(Vec::new()),
        TechnologyKind::ConeRays => {
            let rays = tech.effective_rays(price.len());
            for (r, g) in rays.iter().enumerate() {
                let profit = dot(price, g);
                if profit > tol {
                    return Err(FirmError::UnboundedSupply { ray: r, profit });
                }
            }
            Ok(rays
                .iter()
                .enumerate()
                .filter(|(_, g)| dot(price, g).abs() <= tol)
                .map(|(r, _)| r)
                .collect())
        }
        TechnologyKind::Polytope => {
            let values: Vec<f64> = tech.generators.iter().map(|v| dot(price, v)).collect();
            let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            Ok(values
                .iter()
                .enumerate()
                .filter(|(_, &v)| best - v <= tol)
                .map(|(r, _)| r)
                .collect())
        }
    }
}

/// `offset + sum_r a_r g_r` over the technology's effective generators.
pub fn production_from_activities(
    tech: &Technology,
    activities: &ActivityVector,
) -> Result<Vec<f64>, FirmError> {
    let ell = tech.offset.len();
    let expected = tech.activity_len(ell);
    if activities.levels.len() != expected {
        return Err(FirmError::Dimension {
            expected,
            got: activities.levels.len(),
        });
    }
    let mut y = tech.offset.clone();
    for (a, g) in activities.levels.iter().zip(tech.effective_rays(ell)) {
        for (yi, gi) in y.iter_mut().zip(&g) {
            *yi += a * gi;
        }
    }
    Ok(y)
}
