//! Command implementations behind the `badmarket` binary: load, validate,
//! solve, verify, quota, welfare, family sweep, oracle. Every failure maps
//! to an exit code; nothing escapes as a crash.
//!
//! Exit codes: 0 success, 1 verification failure, 2 no convergence,
//! 3 input error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::economy::{validate_economy, Economy, Severity};
use crate::experiments::{emit_csv, run_family, FamilyKind};
use crate::io::load_economy;
use crate::quota::{load_quota_scheme, solve_quota, verify_quota, QuotaCertificate};
use crate::solver::{
    check_certificate_shape, solve_equilibrium, verify_equilibrium, EquilibriumCertificate,
    SolveError, SolverConfig, VerificationReport,
};
use crate::vecmath::linf_norm;
use crate::welfare::{pareto_dominates, utilities_under};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VERIFICATION: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

#[derive(Debug)]
pub struct CommandOutcome {
    pub exit_code: i32,
    pub summary: String,
    pub artifacts: Vec<PathBuf>,
}

impl CommandOutcome {
    fn ok(summary: String) -> Self {
        Self {
            exit_code: EXIT_OK,
            summary,
            artifacts: Vec::new(),
        }
    }

    fn input_error(message: String) -> Self {
        Self {
            exit_code: EXIT_INPUT,
            summary: message,
            artifacts: Vec::new(),
        }
    }

    fn with_artifact(mut self, path: PathBuf) -> Self {
        self.artifacts.push(path);
        self
    }
}

/// Global flags shared by all subcommands.
#[derive(Debug, Clone, Default)]
pub struct CommonFlags {
    /// Overrides the clearing tolerance; the optimality tolerance follows at
    /// ten times this value.
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub restarts: Option<usize>,
    pub out: Option<PathBuf>,
    pub quota: Option<PathBuf>,
}

impl CommonFlags {
    pub fn config(&self) -> SolverConfig {
        let mut cfg = SolverConfig::default();
        if let Some(tol) = self.tol {
            cfg.clearing_tol = tol;
            cfg.optimality_tol = tol * 10.0;
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(restarts) = self.restarts {
            cfg.restarts = restarts;
        }
        cfg
    }

    fn verify_tol(&self) -> f64 {
        self.tol.unwrap_or(1e-8)
    }
}

fn read_file(path: &Path) -> Result<String, CommandOutcome> {
    std::fs::read_to_string(path)
        .map_err(|e| CommandOutcome::input_error(format!("cannot read {}: {e}", path.display())))
}

fn load_economy_checked(path: &Path) -> Result<Economy, CommandOutcome> {
    let text = read_file(path)?;
    load_economy(&text)
        .map_err(|e| CommandOutcome::input_error(format!("{}: {e}", path.display())))
}

fn write_artifact(path: &Path, contents: &str) -> Result<(), CommandOutcome> {
    std::fs::write(path, contents)
        .map_err(|e| CommandOutcome::input_error(format!("cannot write {}: {e}", path.display())))
}

fn price_line(econ: &Economy, price: &[f64]) -> String {
    econ.commodities
        .labels
        .iter()
        .zip(price)
        .map(|(label, p)| format!("{label} = {p:+.12}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn report_lines(report: &VerificationReport) -> String {
    let mut out = String::new();
    let line = |name: &str, c: &crate::solver::ConditionReport| {
        format!(
            "  {:22} {}  (worst gap {:.3e}{})\n",
            name,
            if c.passed { "pass" } else { "FAIL" },
            c.worst_gap,
            if c.failures.is_empty() {
                String::new()
            } else {
                format!("; {}", c.failures.join("; "))
            }
        )
    };
    out.push_str(&line("demand optimality", &report.demand_optimality));
    out.push_str(&line("profit maximization", &report.profit_maximization));
    out.push_str(&line("market clearing", &report.market_clearing));
    out.push_str(&line("cheaper-point promotion", &report.promotion));
    out
}

fn validation_gate(econ: &Economy) -> Result<String, CommandOutcome> {
    let report = validate_economy(econ);
    let mut notes = String::new();
    for f in &report.findings {
        let tag = match f.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        let _ = writeln!(notes, "  [{tag}] {}: {}", f.rule, f.message);
    }
    if report.passed {
        Ok(notes)
    } else {
        Err(CommandOutcome::input_error(format!(
            "economy failed validation:\n{notes}"
        )))
    }
}

pub fn cmd_solve(economy_path: &Path, flags: &CommonFlags) -> CommandOutcome {
    let econ = match load_economy_checked(economy_path) {
        Ok(e) => e,
        Err(out) => return out,
    };
    let warnings = match validation_gate(&econ) {
        Ok(w) => w,
        Err(out) => return out,
    };
    let cfg = flags.config();
    match solve_equilibrium(&econ, &cfg) {
        Ok(cert) => {
            let report = verify_equilibrium(&econ, &cert, flags.verify_tol());
            let mut summary = String::new();
            let _ = writeln!(summary, "equilibrium price: {}", price_line(&econ, &cert.price));
            let _ = writeln!(
                summary,
                "clearing residual (max): {:.3e}",
                linf_norm(&cert.residuals.clearing)
            );
            summary.push_str(&report_lines(&report));
            if !warnings.is_empty() {
                let _ = writeln!(summary, "validation notes:\n{warnings}");
            }
            let mut outcome = if report.passed {
                CommandOutcome::ok(summary)
            } else {
                CommandOutcome {
                    exit_code: EXIT_VERIFICATION,
                    summary,
                    artifacts: Vec::new(),
                }
            };
            if let Some(out) = &flags.out {
                if let Err(e) = write_artifact(out, &cert.to_json()) {
                    return e;
                }
                outcome = outcome.with_artifact(out.clone());
            }
            outcome
        }
        Err(SolveError::NoConvergence {
            best_residual,
            best_price,
        }) => CommandOutcome {
            exit_code: EXIT_NO_CONVERGENCE,
            summary: format!(
                "no convergence: best residual {best_residual:.3e} at price {best_price:?}"
            ),
            artifacts: Vec::new(),
        },
        Err(e) => CommandOutcome::input_error(e.to_string()),
    }
}

pub fn cmd_verify(economy_path: &Path, certificate_path: &Path, flags: &CommonFlags) -> CommandOutcome {
    let econ = match load_economy_checked(economy_path) {
        Ok(e) => e,
        Err(out) => return out,
    };
    let cert_text = match read_file(certificate_path) {
        Ok(t) => t,
        Err(out) => return out,
    };
    let tol = flags.verify_tol();
    let (report, price) = if let Some(quota_path) = &flags.quota {
        let quota_text = match read_file(quota_path) {
            Ok(t) => t,
            Err(out) => return out,
        };
        let scheme = match load_quota_scheme(&quota_text, econ.firms.len()) {
            Ok(s) => s,
            Err(e) => return CommandOutcome::input_error(e.to_string()),
        };
        let cert = match QuotaCertificate::from_json(&cert_text) {
            Ok(c) => c,
            Err(e) => return CommandOutcome::input_error(format!("certificate: {e}")),
        };
        if let Err(msg) = check_certificate_shape(&econ, &cert.base) {
            return CommandOutcome::input_error(msg);
        }
        let price = cert.base.price.as_slice().to_vec();
        (verify_quota(&econ, &scheme, &cert, tol), price)
    } else {
        let cert = match EquilibriumCertificate::from_json(&cert_text) {
            Ok(c) => c,
            Err(e) => return CommandOutcome::input_error(format!("certificate: {e}")),
        };
        if let Err(msg) = check_certificate_shape(&econ, &cert) {
            return CommandOutcome::input_error(msg);
        }
        let price = cert.price.as_slice().to_vec();
        (verify_equilibrium(&econ, &cert, tol), price)
    };
    let mut summary = String::new();
    let _ = writeln!(summary, "certificate price: {}", price_line(&econ, &price));
    summary.push_str(&report_lines(&report));
    let _ = writeln!(
        summary,
        "verdict: {}",
        if report.passed { "pass" } else { "FAIL" }
    );
    CommandOutcome {
        exit_code: if report.passed { EXIT_OK } else { EXIT_VERIFICATION },
        summary,
        artifacts: Vec::new(),
    }
}

pub fn cmd_quota(economy_path: &Path, flags: &CommonFlags) -> CommandOutcome {
    let econ = match load_economy_checked(economy_path) {
        Ok(e) => e,
        Err(out) => return out,
    };
    let Some(quota_path) = &flags.quota else {
        return CommandOutcome::input_error("quota subcommand requires --quota <path>".into());
    };
    let quota_text = match read_file(quota_path) {
        Ok(t) => t,
        Err(out) => return out,
    };
    let scheme = match load_quota_scheme(&quota_text, econ.firms.len()) {
        Ok(s) => s,
        Err(e) => return CommandOutcome::input_error(e.to_string()),
    };
    let cfg = flags.config();
    match solve_quota(&econ, &scheme, &cfg) {
        Ok(cert) => {
            let report = verify_quota(&econ, &scheme, &cert, flags.verify_tol());
            let mut summary = String::new();
            let _ = writeln!(
                summary,
                "quota equilibrium price: {}",
                price_line(&econ, &cert.base.price)
            );
            let _ = writeln!(summary, "rents by firm: {:?}", cert.rents);
            let _ = writeln!(
                summary,
                "compliance residual (max): {:.3e}",
                linf_norm(&cert.compliance_residual)
            );
            summary.push_str(&report_lines(&report));
            let mut outcome = if report.passed {
                CommandOutcome::ok(summary)
            } else {
                CommandOutcome {
                    exit_code: EXIT_VERIFICATION,
                    summary,
                    artifacts: Vec::new(),
                }
            };
            if let Some(out) = &flags.out {
                if let Err(e) = write_artifact(out, &cert.to_json()) {
                    return e;
                }
                outcome = outcome.with_artifact(out.clone());
            }
            outcome
        }
        Err(SolveError::NoConvergence {
            best_residual,
            best_price,
        }) => CommandOutcome {
            exit_code: EXIT_NO_CONVERGENCE,
            summary: format!(
                "no convergence: best residual {best_residual:.3e} at price {best_price:?}"
            ),
            artifacts: Vec::new(),
        },
        Err(e) => CommandOutcome::input_error(e.to_string()),
    }
}

pub fn cmd_welfare(
    economy_path: &Path,
    cert_a_path: &Path,
    cert_b_path: &Path,
    csv: Option<&Path>,
    _flags: &CommonFlags,
) -> CommandOutcome {
    let econ = match load_economy_checked(economy_path) {
        Ok(e) => e,
        Err(out) => return out,
    };
    let mut allocs = Vec::new();
    for path in [cert_a_path, cert_b_path] {
        let text = match read_file(path) {
            Ok(t) => t,
            Err(out) => return out,
        };
        let cert = match EquilibriumCertificate::from_json(&text) {
            Ok(c) => c,
            Err(e) => return CommandOutcome::input_error(format!("{}: {e}", path.display())),
        };
        if let Err(msg) = check_certificate_shape(&econ, &cert) {
            return CommandOutcome::input_error(msg);
        }
        let alloc: Vec<Vec<f64>> = econ
            .consumers
            .iter()
            .map(|c| cert.bundles[&c.id].clone())
            .collect();
        allocs.push(alloc);
    }
    let (a, b) = (&allocs[0], &allocs[1]);
    let ua = match utilities_under(&econ, a, &[], &[]) {
        Ok(u) => u,
        Err(e) => return CommandOutcome::input_error(e.to_string()),
    };
    let ub = match utilities_under(&econ, b, &[], &[]) {
        Ok(u) => u,
        Err(e) => return CommandOutcome::input_error(e.to_string()),
    };
    let a_over_b = pareto_dominates(&econ, a, b).unwrap_or(false);
    let b_over_a = pareto_dominates(&econ, b, a).unwrap_or(false);
    let verdict = if a_over_b {
        "first allocation Pareto-dominates the second"
    } else if b_over_a {
        "second allocation Pareto-dominates the first"
    } else {
        "no dominance"
    };
    let mut summary = String::new();
    let _ = writeln!(summary, "{:12} {:>18} {:>18}", "consumer", "utility_a", "utility_b");
    for (c, (x, y)) in econ.consumers.iter().zip(ua.iter().zip(&ub)) {
        let _ = writeln!(summary, "{:12} {:>18.12} {:>18.12}", c.id, x, y);
    }
    let _ = writeln!(summary, "verdict: {verdict}");
    let mut outcome = CommandOutcome::ok(summary);
    if let Some(path) = csv {
        let mut text = String::from("consumer,utility_a,utility_b\n");
        for (c, (x, y)) in econ.consumers.iter().zip(ua.iter().zip(&ub)) {
            let _ = writeln!(text, "{},{:.16e},{:.16e}", c.id, x, y);
        }
        if let Err(e) = write_artifact(path, &text) {
            return e;
        }
        outcome = outcome.with_artifact(path.to_path_buf());
    }
    outcome
}

pub fn cmd_family(family: &str, ns_spec: &str, flags: &CommonFlags) -> CommandOutcome {
    let kind: FamilyKind = match family.parse() {
        Ok(k) => k,
        Err(e) => return CommandOutcome::input_error(e),
    };
    let ns: Result<Vec<usize>, _> = ns_spec
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect();
    let ns = match ns {
        Ok(v) if !v.is_empty() => v,
        _ => {
            return CommandOutcome::input_error(format!(
                "--ns must be a comma-separated list of sizes, got {ns_spec:?}"
            ))
        }
    };
    let cfg = flags.config();
    let records = run_family(kind, &ns, &cfg);
    let mut summary = String::new();
    for r in &records {
        let _ = writeln!(
            summary,
            "n = {:6}  converged = {:5}  oracle gap = {:.3e}  ui share = {:.6}  {:.1} ms",
            r.n, r.converged, r.oracle_gap, r.ui_share, r.runtime_ms
        );
    }
    let all_converged = records.iter().all(|r| r.converged);
    let out_path = flags
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("family_{family}.csv")));
    if let Err(e) = emit_csv(&records, &out_path) {
        return CommandOutcome::input_error(format!("cannot write {}: {e}", out_path.display()));
    }
    let _ = writeln!(summary, "records written to {}", out_path.display());
    CommandOutcome {
        exit_code: if all_converged { EXIT_OK } else { EXIT_NO_CONVERGENCE },
        summary,
        artifacts: vec![out_path],
    }
}

pub fn cmd_oracle(family: &str, n: Option<usize>, flags: &CommonFlags) -> CommandOutcome {
    let kind: FamilyKind = match family.parse() {
        Ok(k) => k,
        Err(e) => return CommandOutcome::input_error(e),
    };
    let text = match kind {
        FamilyKind::Hara => {
            let n = n.unwrap_or(2);
            match crate::experiments::hara_oracle(n) {
                Ok(cert) => cert.to_json(),
                Err(e) => return CommandOutcome::input_error(e.to_string()),
            }
        }
        FamilyKind::Garbage => {
            let oracle = crate::experiments::garbage_oracle();
            serde_json::json!({
                "price": oracle.price,
                "aggregate_garbage": oracle.aggregate_garbage,
                "aggregate_consumption": oracle.aggregate_consumption,
                "productions": oracle.productions,
            })
            .to_string()
        }
    };
    let mut outcome = CommandOutcome::ok(text.clone());
    if let Some(out) = &flags.out {
        if let Err(e) = write_artifact(out, &text) {
            return e;
        }
        outcome.summary = format!("oracle written to {}", out.display());
        outcome = outcome.with_artifact(out.clone());
    }
    outcome
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::economy::build_one_agent_economy;
    use crate::io::serialize_economy;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, contents: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, contents).unwrap();
        path
    }

    #[test]
    fn solve_command_end_to_end() {
        let dir = tempdir().unwrap();
        let econ_path = write(
            dir.path(),
            "one_agent.json",
            &serialize_economy(&build_one_agent_economy()),
        );
        let out_path = dir.path().join("cert.json");
        let flags = CommonFlags {
            out: Some(out_path.clone()),
            ..CommonFlags::default()
        };
        let outcome = cmd_solve(&econ_path, &flags);
        assert_eq!(outcome.exit_code, EXIT_OK, "{}", outcome.summary);
        assert!(outcome.summary.contains("bad = -0.5"), "{}", outcome.summary);
        assert!(out_path.exists());

        // The emitted certificate verifies through the CLI too.
        let verify = cmd_verify(&econ_path, &out_path, &CommonFlags::default());
        assert_eq!(verify.exit_code, EXIT_OK, "{}", verify.summary);
    }

    #[test]
    fn malformed_economy_is_an_input_error() {
        let dir = tempdir().unwrap();
        let path = write(dir.path(), "broken.json", "{not json");
        assert_eq!(cmd_solve(&path, &CommonFlags::default()).exit_code, EXIT_INPUT);
    }

    #[test]
    fn zero_restarts_exits_no_convergence() {
        let dir = tempdir().unwrap();
        let econ_path = write(
            dir.path(),
            "one_agent.json",
            &serialize_economy(&build_one_agent_economy()),
        );
        let flags = CommonFlags {
            restarts: Some(0),
            ..CommonFlags::default()
        };
        assert_eq!(cmd_solve(&econ_path, &flags).exit_code, EXIT_NO_CONVERGENCE);
    }

    #[test]
    fn tampered_certificate_fails_verification() {
        let dir = tempdir().unwrap();
        let econ = build_one_agent_economy();
        let econ_path = write(dir.path(), "one_agent.json", &serialize_economy(&econ));
        let cert = crate::solver::solve_equilibrium(&econ, &SolverConfig::default()).unwrap();
        let mut tampered = cert.clone();
        tampered.bundles.insert("agent".into(), vec![0.25, 1.0]);
        let cert_path = write(dir.path(), "cert.json", &tampered.to_json());
        let outcome = cmd_verify(&econ_path, &cert_path, &CommonFlags::default());
        assert_eq!(outcome.exit_code, EXIT_VERIFICATION);
        assert!(outcome.summary.contains("market clearing"), "{}", outcome.summary);
    }

    #[test]
    fn dimension_mismatch_is_an_input_error() {
        let dir = tempdir().unwrap();
        let econ = build_one_agent_economy();
        let econ_path = write(dir.path(), "one_agent.json", &serialize_economy(&econ));
        let cert = crate::solver::solve_equilibrium(&econ, &SolverConfig::default()).unwrap();
        let mut wrong = cert.clone();
        wrong.bundles.remove("agent");
        wrong.bundles.insert("ghost".into(), vec![1.0, 1.0]);
        let cert_path = write(dir.path(), "cert.json", &wrong.to_json());
        let outcome = cmd_verify(&econ_path, &cert_path, &CommonFlags::default());
        assert_eq!(outcome.exit_code, EXIT_INPUT);
    }

    #[test]
    fn welfare_of_identical_allocations_reports_no_dominance() {
        let dir = tempdir().unwrap();
        let econ = build_one_agent_economy();
        let econ_path = write(dir.path(), "one_agent.json", &serialize_economy(&econ));
        let cert = crate::solver::solve_equilibrium(&econ, &SolverConfig::default()).unwrap();
        let cert_path = write(dir.path(), "cert.json", &cert.to_json());
        let outcome = cmd_welfare(
            &econ_path,
            &cert_path,
            &cert_path,
            None,
            &CommonFlags::default(),
        );
        assert_eq!(outcome.exit_code, EXIT_OK);
        assert!(outcome.summary.contains("no dominance"));
    }

    #[test]
    fn family_command_writes_csv() {
        let dir = tempdir().unwrap();
        let out = dir.path().join("hara.csv");
        let flags = CommonFlags {
            out: Some(out.clone()),
            seed: Some(7),
            ..CommonFlags::default()
        };
        let outcome = cmd_family("hara", "1,2", &flags);
        assert_eq!(outcome.exit_code, EXIT_OK, "{}", outcome.summary);
        let text = std::fs::read_to_string(&out).unwrap();
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn quota_command_round_trip() {
        let dir = tempdir().unwrap();
        let mut econ = build_one_agent_economy();
        econ.firms.push(crate::firms::Technology::zero_firm(2));
        econ.consumers[0].shares = vec![1.0];
        econ.commodities.regulated_count = 1;
        let econ_path = write(dir.path(), "econ.json", &serialize_economy(&econ));
        let quota_path = write(
            dir.path(),
            "quota.json",
            r#"{"regulated_count": 1, "quotas": {"0": [-0.5]}}"#,
        );
        let cert_out = dir.path().join("qcert.json");
        let flags = CommonFlags {
            quota: Some(quota_path),
            out: Some(cert_out.clone()),
            ..CommonFlags::default()
        };
        let outcome = cmd_quota(&econ_path, &flags);
        assert_eq!(outcome.exit_code, EXIT_OK, "{}", outcome.summary);
        // Verify the emitted quota certificate through the CLI.
        let verify = cmd_verify(&econ_path, &cert_out, &flags);
        assert_eq!(verify.exit_code, EXIT_OK, "{}", verify.summary);
    }

    #[test]
    fn oracle_command_prints_reference() {
        let outcome = cmd_oracle("garbage", None, &CommonFlags::default());
        assert_eq!(outcome.exit_code, EXIT_OK);
        assert!(outcome.summary.contains("aggregate_garbage"));
        let outcome = cmd_oracle("hara", Some(2), &CommonFlags::default());
        assert_eq!(outcome.exit_code, EXIT_OK);
        assert!(outcome.summary.contains("price"));
    }
}
