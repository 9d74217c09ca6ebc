//! Emission-quota economies.
//!
//! The government regulates the first `t` commodities and assigns each firm
//! (a government firm with the singleton technology `{0}` included) a quota
//! vector `m^(j) <= 0` on them. A quota equilibrium clears to the compliance
//! vector `E(m)` (aggregate quota on regulated coordinates, zero elsewhere)
//! instead of zero: the regulated commodities may be under-consumed by
//! exactly the permitted emission. Firms earn the rent `proj_t(p).m^(j)` on
//! their quota holdings, which flows to consumers through shareholdings;
//! supply sets are unchanged because the rent does not depend on the
//! production plan.
//!
//! Solving reduces to an ordinary equilibrium of the economy whose firm
//! technologies are shifted by `E(m^(j))`, with productions mapped back by
//! subtracting the shift.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::{Economy, EconomyError};
use crate::preferences::Statistic;
use crate::solver::{
    aggregate_excess, build_certificate, solve_equilibrium, verify_with_options,
    EquilibriumCertificate, SolveError, SolverConfig, VerificationReport, VerifyOptions,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaScheme {
    /// Number of regulated commodities (they occupy coordinates `0..t`).
    pub regulated_count: usize,
    /// Per-firm quota vectors, one `t`-vector per firm, each `<= 0`.
    pub quotas: Vec<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum QuotaError {
    #[error("quota dimension error: {0}")]
    Dimension(String),
    #[error("quota must be nonpositive: firm {firm} coordinate {coordinate} is {value}")]
    Positive {
        firm: usize,
        coordinate: usize,
        value: f64,
    },
}

impl QuotaScheme {
    pub fn zero(regulated_count: usize, firm_count: usize) -> Self {
        Self {
            regulated_count,
            quotas: vec![vec![0.0; regulated_count]; firm_count],
        }
    }

    pub fn validate(&self, firm_count: usize, ell: usize) -> Result<(), QuotaError> {
        if self.regulated_count > ell {
            return Err(QuotaError::Dimension(format!(
                "regulated_count {} exceeds ell {ell}",
                self.regulated_count
            )));
        }
        if self.quotas.len() != firm_count {
            return Err(QuotaError::Dimension(format!(
                "{} quota vectors for {firm_count} firms",
                self.quotas.len()
            )));
        }
        for (j, m) in self.quotas.iter().enumerate() {
            if m.len() != self.regulated_count {
                return Err(QuotaError::Dimension(format!(
                    "firm {j} quota has {} entries for regulated_count {}",
                    m.len(),
                    self.regulated_count
                )));
            }
            for (i, v) in m.iter().enumerate() {
                if *v > 0.0 {
                    return Err(QuotaError::Positive {
                        firm: j,
                        coordinate: i,
                        value: *v,
                    });
                }
            }
        }
        Ok(())
    }

    /// Aggregate quota `m = sum_j m^(j)`.
    pub fn aggregate(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.regulated_count];
        for q in &self.quotas {
            for (t, v) in m.iter_mut().zip(q) {
                *t += v;
            }
        }
        m
    }

    /// The firm's quota embedded in commodity space: `E(m^(j))`.
    pub fn firm_target(&self, firm: usize, ell: usize) -> Vec<f64> {
        let mut e = vec![0.0; ell];
        e[..self.regulated_count].copy_from_slice(&self.quotas[firm]);
        e
    }

    pub fn is_zero(&self) -> bool {
        self.quotas.iter().all(|m| m.iter().all(|v| *v == 0.0))
    }
}

/// The compliance vector `E(m)`: aggregate quota on the first `t`
/// coordinates, zeros elsewhere. A quota equilibrium's aggregate excess
/// equals this vector exactly.
pub fn compliance_target(scheme: &QuotaScheme, ell: usize) -> Result<Vec<f64>, QuotaError> {
    if scheme.regulated_count > ell {
        return Err(QuotaError::Dimension(format!(
            "regulated_count {} exceeds ell {ell}",
            scheme.regulated_count
        )));
    }
    let mut target = vec![0.0; ell];
    let m = scheme.aggregate();
    target[..scheme.regulated_count].copy_from_slice(&m);
    Ok(target)
}

/// Shifts each firm's technology by its quota: `Y'_j = Y_j + {E(m^(j))}`.
/// Preferences that observe total production are re-wired so they keep
/// seeing the unshifted productions. Zero quotas return the economy
/// unchanged bit for bit.
pub fn shift_economy(econ: &Economy, scheme: &QuotaScheme) -> Result<Economy, QuotaError> {
    scheme.validate(econ.firms.len(), econ.ell())?;
    let ell = econ.ell();
    let mut out = econ.clone();
    let mut total_shift = vec![0.0; ell];
    let mut any = false;
    for (j, firm) in out.firms.iter_mut().enumerate() {
        let shift = scheme.firm_target(j, ell);
        if shift.iter().all(|v| *v == 0.0) {
            continue;
        }
        any = true;
        for (o, s) in firm.offset.iter_mut().zip(&shift) {
            *o += s;
        }
        for (t, s) in total_shift.iter_mut().zip(&shift) {
            *t += s;
        }
    }
    if !any {
        return Ok(out);
    }
    for c in &mut out.consumers {
        if let Some(ext) = &mut c.preference.externality {
            if ext.statistic == Statistic::TotalProduction {
                let offset = ext
                    .statistic_offset
                    .get_or_insert_with(|| vec![0.0; ext.gamma.len()]);
                for (o, s) in offset.iter_mut().zip(&total_shift) {
                    *o -= s;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuotaCertificate {
    #[serde(flatten)]
    pub base: EquilibriumCertificate,
    /// Per-firm quota rent `proj_t(p).m^(j)`.
    pub rents: Vec<f64>,
    /// `aggregate_excess - E(m)`; zero at a compliant equilibrium.
    pub compliance_residual: Vec<f64>,
}

impl QuotaCertificate {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("certificate serialization is infallible")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn rents_at(scheme: &QuotaScheme, price: &[f64]) -> Vec<f64> {
    scheme
        .quotas
        .iter()
        .map(|m| m.iter().zip(price).map(|(q, p)| q * p).sum())
        .collect()
}

/// Solves the quota economy through the shifted reduction and maps the
/// certificate back: same price and bundles, productions in the original
/// technologies, rents attached. With all-zero quotas the result is
/// bit-identical to `solve_equilibrium`.
pub fn solve_quota(
    econ: &Economy,
    scheme: &QuotaScheme,
    cfg: &SolverConfig,
) -> Result<QuotaCertificate, SolveError> {
    scheme
        .validate(econ.firms.len(), econ.ell())
        .map_err(|e| SolveError::Dimension(e.to_string()))?;
    let shifted = shift_economy(econ, scheme).map_err(|e| SolveError::Dimension(e.to_string()))?;
    let shifted_cert = solve_equilibrium(&shifted, cfg)?;

    let base = if scheme.is_zero() {
        shifted_cert
    } else {
        // Rebuild productions in the original technologies from the same
        // activity levels; this subtracts E(m^(j)) exactly.
        let bundles: Vec<Vec<f64>> = econ
            .consumers
            .iter()
            .map(|c| shifted_cert.bundles[&c.id].clone())
            .collect();
        let levels: Vec<Vec<f64>> = shifted_cert
            .activities
            .iter()
            .map(|a| a.levels.clone())
            .collect();
        build_certificate(
            econ,
            shifted_cert.price.as_slice().to_vec(),
            &bundles,
            &levels,
        )?
    };

    let price = base.price.as_slice().to_vec();
    let rents = rents_at(scheme, &price);
    let bundles: Vec<Vec<f64>> = econ
        .consumers
        .iter()
        .map(|c| base.bundles[&c.id].clone())
        .collect();
    let excess = aggregate_excess(econ, &bundles, &base.productions)?;
    let target = compliance_target(scheme, econ.ell())
        .map_err(|e| SolveError::Dimension(e.to_string()))?;
    let compliance_residual: Vec<f64> = excess.iter().zip(&target).map(|(e, t)| e - t).collect();
    Ok(QuotaCertificate {
        base,
        rents,
        compliance_residual,
    })
}

/// Verifies a certificate as a quota equilibrium: demand optimality at
/// rent-augmented incomes, ordinary profit maximization (rents are
/// price-only constants), and clearing to the compliance vector.
pub fn verify_quota(
    econ: &Economy,
    scheme: &QuotaScheme,
    cert: &QuotaCertificate,
    tol: f64,
) -> VerificationReport {
    let target = match compliance_target(scheme, econ.ell()) {
        Ok(t) => t,
        Err(_) => vec![0.0; econ.ell()],
    };
    let opts = VerifyOptions {
        clearing_target: Some(target),
        firm_income_bonus: Some(rents_at(scheme, cert.base.price.as_slice())),
        ..VerifyOptions::default()
    };
    verify_with_options(econ, &cert.base, tol, &opts)
}

/// Loads a quota document: `{"regulated_count": t, "quotas": {"<firm
/// index>": [t entries], ...}}`; firms without an entry hold zero quota.
pub fn load_quota_scheme(text: &str, firm_count: usize) -> Result<QuotaScheme, EconomyError> {
    #[derive(Deserialize)]
    struct QuotaDoc {
        regulated_count: usize,
        #[serde(default)]
        quotas: std::collections::BTreeMap<String, Vec<f64>>,
    }
    let doc: QuotaDoc = serde_json::from_str(text)?;
    let mut quotas = vec![vec![0.0; doc.regulated_count]; firm_count];
    for (key, m) in doc.quotas {
        let j: usize = key.parse().map_err(|_| {
            EconomyError::Schema(format!("quota key {key:?} is not a firm index"))
        })?;
        if j >= firm_count {
            return Err(EconomyError::Schema(format!(
                "quota names firm {j} but the economy has {firm_count} firms"
            )));
        }
        if m.len() != doc.regulated_count {
            return Err(EconomyError::Schema(format!(
                "quota for firm {j} has {} entries, regulated_count is {}",
                m.len(),
                doc.regulated_count
            )));
        }
        quotas[j] = m;
    }
    Ok(QuotaScheme {
        regulated_count: doc.regulated_count,
        quotas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::{build_garbage_economy, build_one_agent_economy};
    use crate::firms::Technology;
    use crate::solver::SolverConfig;
    use crate::vecmath::linf_norm;

    /// One-agent economy with a government firm holding the whole quota.
    fn one_agent_with_government() -> Economy {
        let mut econ = build_one_agent_economy();
        econ.firms.push(Technology::zero_firm(2));
        econ.consumers[0].shares = vec![1.0];
        econ.commodities.regulated_count = 1;
        econ
    }

    #[test]
    fn compliance_target_examples() {
        let scheme = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-0.05], vec![-0.03], vec![-0.02]],
        };
        assert_eq!(compliance_target(&scheme, 3).unwrap(), vec![-0.10, 0.0, 0.0]);
        let zero = QuotaScheme::zero(0, 2);
        assert_eq!(compliance_target(&zero, 2).unwrap(), vec![0.0, 0.0]);
        let gov = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-1.0]],
        };
        assert_eq!(compliance_target(&gov, 3).unwrap(), vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn positive_quota_is_rejected() {
        let scheme = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![0.1]],
        };
        assert!(matches!(
            scheme.validate(1, 2),
            Err(QuotaError::Positive { firm: 0, .. })
        ));
    }

    #[test]
    fn zero_quota_shift_is_identity() {
        let econ = build_garbage_economy(4).unwrap();
        let scheme = QuotaScheme::zero(1, 2);
        assert_eq!(shift_economy(&econ, &scheme).unwrap(), econ);
    }

    #[test]
    fn shift_moves_offsets_only() {
        let mut econ = build_garbage_economy(4).unwrap();
        econ.firms.push(Technology::zero_firm(3));
        for c in &mut econ.consumers {
            c.shares = vec![1.0, 1.0, 1.0];
        }
        let scheme = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-0.05], vec![0.0], vec![-0.1]],
        };
        let shifted = shift_economy(&econ, &scheme).unwrap();
        assert_eq!(shifted.firms[0].offset, vec![-0.05, 0.0, 0.0]);
        assert_eq!(shifted.firms[0].generators, econ.firms[0].generators);
        assert_eq!(shifted.firms[1], econ.firms[1]);
        assert_eq!(shifted.firms[2].offset, vec![-0.1, 0.0, 0.0]);
    }

    #[test]
    fn one_agent_quota_equilibrium() {
        let econ = one_agent_with_government();
        let scheme = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-0.5]],
        };
        let cert = solve_quota(&econ, &scheme, &SolverConfig::default()).unwrap();
        let p = cert.base.price.as_slice();
        assert!((p[0] + 0.5).abs() < 1e-10, "price {p:?}");
        assert!((p[1] - 0.5).abs() < 1e-10);
        // Rent p_bad * m = (-0.5)(-0.5) = 0.25 funds consumption (0.5, 1).
        assert!((cert.rents[0] - 0.25).abs() < 1e-10);
        let x = cert.base.bundle_for("agent").unwrap();
        assert!((x[0] - 0.5).abs() < 1e-9, "bundle {x:?}");
        assert!((x[1] - 1.0).abs() < 1e-9);
        // Aggregate excess equals the compliance vector (-0.5, 0).
        let excess =
            aggregate_excess(&econ, std::slice::from_ref(x), &cert.base.productions).unwrap();
        assert!((excess[0] + 0.5).abs() < 1e-9);
        assert!(excess[1].abs() < 1e-9);
        assert!(linf_norm(&cert.compliance_residual) < 1e-9);
        assert!(verify_quota(&econ, &scheme, &cert, 1e-8).passed);
    }

    #[test]
    fn one_agent_quota_beats_grid_scan() {
        // Brute-force check: the shifted economy's residual over a coarse
        // price grid is minimized in the cell containing the solver's price.
        let econ = one_agent_with_government();
        let scheme = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-0.5]],
        };
        let shifted = shift_economy(&econ, &scheme).unwrap();
        let points = crate::solver::excess_map_scan(&shifted, 41).unwrap();
        let best = points
            .iter()
            .min_by(|a, b| a.residual_norm.partial_cmp(&b.residual_norm).unwrap())
            .unwrap();
        assert!((best.price[0] + 0.5).abs() < 1e-9);
        let cert = solve_quota(&econ, &scheme, &SolverConfig::default()).unwrap();
        assert!(
            linf_norm(&cert.compliance_residual) <= best.residual_norm + 1e-12,
            "solver should be at least as good as the best grid cell"
        );
    }

    #[test]
    fn zero_quota_solve_is_bit_identical_to_plain_solve() {
        let econ = build_garbage_economy(12).unwrap();
        let scheme = QuotaScheme::zero(1, 2);
        let cfg = SolverConfig::default();
        let plain = crate::solver::solve_equilibrium(&econ, &cfg).unwrap();
        let quota = solve_quota(&econ, &scheme, &cfg).unwrap();
        assert_eq!(plain, quota.base);
        assert!(quota.rents.iter().all(|r| *r == 0.0));
    }

    #[test]
    fn wrong_scheme_fails_compliance() {
        let econ = one_agent_with_government();
        let scheme_a = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-0.5]],
        };
        let scheme_b = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-0.2]],
        };
        let cert = solve_quota(&econ, &scheme_a, &SolverConfig::default()).unwrap();
        let report = verify_quota(&econ, &scheme_b, &cert, 1e-8);
        assert!(!report.passed);
        assert!(!report.market_clearing.passed);
    }

    #[test]
    fn omitted_rents_break_demand_optimality() {
        let econ = one_agent_with_government();
        let scheme = QuotaScheme {
            regulated_count: 1,
            quotas: vec![vec![-0.5]],
        };
        let cert = solve_quota(&econ, &scheme, &SolverConfig::default()).unwrap();
        // Verify against the compliance target but without rent income: the
        // bundle costs the rent, so the budget fails.
        let opts = VerifyOptions {
            clearing_target: Some(compliance_target(&scheme, 2).unwrap()),
            ..VerifyOptions::default()
        };
        let report = verify_with_options(&econ, &cert.base, 1e-8, &opts);
        assert!(!report.demand_optimality.passed);
    }

    #[test]
    fn quota_document_parses_with_defaults() {
        let scheme = load_quota_scheme(
            r#"{"regulated_count": 1, "quotas": {"0": [-0.05], "2": [-0.03]}}"#,
            3,
        )
        .unwrap();
        assert_eq!(scheme.quotas, vec![vec![-0.05], vec![0.0], vec![-0.03]]);
        assert!(load_quota_scheme(r#"{"regulated_count": 1, "quotas": {"9": [-1.0]}}"#, 2).is_err());
    }
}
