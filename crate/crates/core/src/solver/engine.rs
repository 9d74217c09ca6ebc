//! Inner machinery of the equilibrium solver.
//!
//! Unknowns of the inner problem are the price coordinates on the l1 sphere
//! under a fixed sign pattern. Everything set-valued at a given price is
//! resolved inside the residual evaluation by a deterministic nonnegative
//! least-squares subproblem: cone activity levels, polytope vertex weights,
//! and convex weights over a tied Linear consumer's optimal vertex set.
//! Complementarity (no profitable ray, zero profit on active rays) enters
//! the residual through Fischer-Burmeister rows.
//!
//! Multi-start seeds combine analytic candidates with random simplex draws:
//! null-space directions of the stacked ray matrix are exactly the prices at
//! which every ray earns zero profit, and a Linear consumer's coefficient
//! direction is exactly the price at which its demand ties across a budget
//! face. Equilibria of linear economies live on those manifolds.
//!
//! A converged candidate is then polished: the detected structure (active
//! rays, tied vertex patterns, demand clamp branches) is frozen and the
//! resulting smooth square-ish system is re-solved by damped Gauss-Newton to
//! machine precision.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::economy::{Consumer, Economy};
use crate::firms::{max_profit, TechnologyKind};
use crate::preferences::{
    budget_box_vertices, demand, linear_demand_vertices, Context, DemandError, Family,
};
use crate::solver::nnls::nnls;
use crate::vecmath::{dot, l1_norm, linf_norm};

const TIE_TOL: f64 = 1e-9;
const SIMPLEX_PENALTY: f64 = 1e2;
const PAR_THRESHOLD: usize = 64;

#[derive(Debug, Clone)]
#[allow(dead_code)] // payloads are diagnostic, read through Debug
pub(crate) enum EvalAbort {
    UnboundedProfit { firm: usize },
    Demand { consumer: usize, error: DemandError },
}

/// Fischer-Burmeister pairing; zero iff `u >= 0`, `v >= 0`, `u v = 0`.
fn fischer_burmeister(u: f64, v: f64) -> f64 {
    u + v - (u * u + v * v).sqrt()
}

#[derive(Debug, Clone)]
pub(crate) struct TieSet {
    pub vertices: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Evaluation {
    pub residual: Vec<f64>,
    pub norm2: f64,
    pub norm_inf: f64,
    pub bundles: Vec<Vec<f64>>,
    pub activities: Vec<Vec<f64>>,
    pub ties: Vec<Option<TieSet>>,
}

fn consumer_demand(
    consumer: &Consumer,
    price: &[f64],
    income: f64,
    ctx: &Context,
) -> Result<(Vec<f64>, Option<TieSet>), DemandError> {
    if let Family::Linear { coefficients } = &consumer.preference.family {
        if consumer.preference.scale == 1.0 {
            let (vertices, _) =
                linear_demand_vertices(coefficients, &consumer.bounds, price, income, TIE_TOL)?;
            if vertices.len() == 1 {
                return Ok((vertices[0].clone(), None));
            }
            let k = vertices.len();
            return Ok((
                vertices[0].clone(),
                Some(TieSet {
                    vertices,
                    weights: vec![1.0 / k as f64; k],
                }),
            ));
        }
    }
    let x = demand(consumer, price, income, ctx)?;
    Ok((x, None))
}

/// Evaluates the inner residual at a price. Demand-side set-valuedness and
/// the supply selection are resolved by NNLS on the clearing block.
pub(crate) fn evaluate(
    econ: &Economy,
    ctx: &Context,
    price: &[f64],
) -> Result<Evaluation, EvalAbort> {
    let ell = econ.ell();
    let n = econ.consumers.len();

    // Firm profits; an unbounded firm rejects the price outright.
    let mut profits = Vec::with_capacity(econ.firms.len());
    for (j, firm) in econ.firms.iter().enumerate() {
        let pi = max_profit(firm, price);
        if !pi.is_finite() {
            return Err(EvalAbort::UnboundedProfit { firm: j });
        }
        profits.push(pi);
    }

    let income_of = |c: &Consumer| -> f64 {
        dot(price, &c.endowment)
            + c.shares
                .iter()
                .zip(&profits)
                .map(|(t, pi)| t * pi)
                .sum::<f64>()
    };
    let incomes: Vec<f64> = econ.consumers.iter().map(income_of).collect();

    let run = |(i, c): (usize, &Consumer)| -> Result<(Vec<f64>, Option<TieSet>), EvalAbort> {
        consumer_demand(c, price, incomes[i], ctx).map_err(|error| EvalAbort::Demand {
            consumer: i,
            error,
        })
    };
    let demands: Vec<(Vec<f64>, Option<TieSet>)> = if n >= PAR_THRESHOLD {
        econ.consumers
            .par_iter()
            .enumerate()
            .map(run)
            .collect::<Result<_, _>>()?
    } else {
        econ.consumers
            .iter()
            .enumerate()
            .map(run)
            .collect::<Result<_, _>>()?
    };

    // Base excess from fixed bundles and firm offsets.
    let mut c0 = vec![0.0; ell];
    for (c, (x, tie)) in econ.consumers.iter().zip(&demands) {
        if tie.is_none() {
            for (acc, v) in c0.iter_mut().zip(x) {
                *acc += c.weight * v;
            }
        }
        for (acc, e) in c0.iter_mut().zip(&c.endowment) {
            *acc -= c.weight * e;
        }
    }
    for firm in &econ.firms {
        for (acc, o) in c0.iter_mut().zip(&firm.offset) {
            *acc -= o;
        }
    }

    // Columns of the clearing block: -g per cone ray, -v per polytope
    // vertex, +mu*v per tied vertex. Simplex groups get a penalty row each.
    struct Group {
        start: usize,
        len: usize,
    }
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut firm_vars: Vec<Group> = Vec::new();
    for firm in &econ.firms {
        let start = columns.len();
        match firm.kind {
            TechnologyKind::Zero => {}
            TechnologyKind::ConeRays => {
                for g in firm.effective_rays(ell) {
                    columns.push(g.iter().map(|v| -v).collect());
                }
            }
            TechnologyKind::Polytope => {
                for v in &firm.generators {
                    columns.push(v.iter().map(|x| -x).collect());
                }
            }
        }
        firm_vars.push(Group {
            start,
            len: columns.len() - start,
        });
    }
    let mut tie_vars: Vec<Option<Group>> = Vec::with_capacity(n);
    for (c, (_, tie)) in econ.consumers.iter().zip(&demands) {
        match tie {
            None => tie_vars.push(None),
            Some(t) => {
                let start = columns.len();
                for v in &t.vertices {
                    columns.push(v.iter().map(|x| c.weight * x).collect());
                }
                tie_vars.push(Some(Group {
                    start,
                    len: t.vertices.len(),
                }));
            }
        }
    }

    let nv = columns.len();
    let mut simplex_groups: Vec<&Group> = Vec::new();
    for (firm, grp) in econ.firms.iter().zip(&firm_vars) {
        if firm.kind == TechnologyKind::Polytope && grp.len > 0 {
            simplex_groups.push(grp);
        }
    }
    for grp in tie_vars.iter().flatten() {
        simplex_groups.push(grp);
    }

    let rows = ell + simplex_groups.len();
    let mut vars = DVector::zeros(nv);
    if nv > 0 {
        let mut a = DMatrix::zeros(rows, nv);
        let mut b = DVector::zeros(rows);
        for (k, col) in columns.iter().enumerate() {
            for i in 0..ell {
                a[(i, k)] = col[i];
            }
        }
        for i in 0..ell {
            b[i] = -c0[i];
        }
        for (s, grp) in simplex_groups.iter().enumerate() {
            for k in grp.start..grp.start + grp.len {
                a[(ell + s, k)] = SIMPLEX_PENALTY;
            }
            b[ell + s] = SIMPLEX_PENALTY;
        }
        vars = nnls(&a, &b);
    }

    // Assemble bundles, activities, and the residual vector.
    let mut excess = c0;
    for (k, col) in columns.iter().enumerate() {
        for i in 0..ell {
            excess[i] += vars[k] * col[i];
        }
    }

    let mut activities: Vec<Vec<f64>> = Vec::with_capacity(econ.firms.len());
    for grp in &firm_vars {
        activities.push((grp.start..grp.start + grp.len).map(|k| vars[k]).collect());
    }
    let mut bundles: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut ties: Vec<Option<TieSet>> = Vec::with_capacity(n);
    for (idx, (x, tie)) in demands.into_iter().enumerate() {
        match (tie, &tie_vars[idx]) {
            (Some(mut t), Some(grp)) => {
                let weights: Vec<f64> =
                    (grp.start..grp.start + grp.len).map(|k| vars[k]).collect();
                let mut combined = vec![0.0; ell];
                for (w, v) in weights.iter().zip(&t.vertices) {
                    for i in 0..ell {
                        combined[i] += w * v[i];
                    }
                }
                t.weights = weights;
                bundles.push(combined);
                ties.push(Some(t));
            }
            _ => {
                bundles.push(x);
                ties.push(None);
            }
        }
    }

    let mut residual = excess.clone();
    residual.push(l1_norm(price) - 1.0);
    for (firm, acts) in econ.firms.iter().zip(&activities) {
        match firm.kind {
            TechnologyKind::Zero => {}
            TechnologyKind::ConeRays => {
                for (g, a) in firm.effective_rays(ell).iter().zip(acts) {
                    residual.push(fischer_burmeister(-dot(price, g), *a));
                }
            }
            TechnologyKind::Polytope => {
                let values: Vec<f64> = firm.generators.iter().map(|v| dot(price, v)).collect();
                let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                for (val, w) in values.iter().zip(acts) {
                    residual.push(fischer_burmeister(best - val, *w));
                }
                residual.push(acts.iter().sum::<f64>() - 1.0);
            }
        }
    }
    for t in ties.iter().flatten() {
        residual.push(t.weights.iter().sum::<f64>() - 1.0);
    }

    let norm2 = dot(&residual, &residual).sqrt();
    Ok(Evaluation {
        norm_inf: linf_norm(&residual),
        norm2,
        residual,
        bundles,
        activities,
        ties,
    })
}

/// Projects a direction onto a sign pattern and the l1 sphere; `None` if the
/// projection collapses to zero.
pub(crate) fn project_pattern(dir: &[f64], pattern: &[f64]) -> Option<Vec<f64>> {
    let mut p: Vec<f64> = dir
        .iter()
        .zip(pattern)
        .map(|(d, s)| s * (s * d).max(0.0))
        .collect();
    let norm = l1_norm(&p);
    if norm < 1e-12 {
        return None;
    }
    for v in &mut p {
        *v /= norm;
    }
    Some(p)
}

pub(crate) struct GnResult {
    pub price: Vec<f64>,
    pub eval: Evaluation,
}

/// Damped Gauss-Newton on the price with forward-difference Jacobian and
/// step halving on non-descent; the price stays on the sign pattern's sphere
/// octant by projection after each trial step.
pub(crate) fn gauss_newton(
    econ: &Economy,
    ctx: &Context,
    pattern: &[f64],
    start: &[f64],
    max_iters: usize,
) -> Option<GnResult> {
    let ell = econ.ell();
    let mut price = project_pattern(start, pattern)?;
    let mut eval = evaluate(econ, ctx, &price).ok()?;
    for _ in 0..max_iters {
        if eval.norm_inf < 1e-13 {
            break;
        }
        let m = eval.residual.len();
        let mut jac = DMatrix::zeros(m, ell);
        let f0 = DVector::from_column_slice(&eval.residual);
        let mut have_column = false;
        for i in 0..ell {
            let h = 1e-7 * (1.0 + price[i].abs());
            let mut forward = price.clone();
            forward[i] += h;
            let trial = match evaluate(econ, ctx, &forward) {
                Ok(e) => Some((e, h)),
                Err(_) => {
                    let mut backward = price.clone();
                    backward[i] -= h;
                    evaluate(econ, ctx, &backward).ok().map(|e| (e, -h))
                }
            };
            if let Some((e, step)) = trial {
                if e.residual.len() == m {
                    for r in 0..m {
                        jac[(r, i)] = (e.residual[r] - eval.residual[r]) / step;
                    }
                    have_column = true;
                }
            }
        }
        if !have_column {
            break;
        }
        let jt = jac.transpose();
        let gram = &jt * &jac;
        let rhs = -(&jt * &f0);
        let mut improved = false;
        let mut lambda = 1e-12;
        'levenberg: for _ in 0..8 {
            let mut damped = gram.clone();
            for i in 0..ell {
                damped[(i, i)] += lambda * (1.0 + gram[(i, i)].abs());
            }
            let Some(delta) = damped.clone().cholesky().map(|ch| ch.solve(&rhs)) else {
                lambda *= 100.0;
                continue;
            };
            let mut alpha = 1.0;
            for _ in 0..30 {
                let trial: Vec<f64> = (0..ell).map(|i| price[i] + alpha * delta[i]).collect();
                if let Some(projected) = project_pattern(&trial, pattern) {
                    if let Ok(e) = evaluate(econ, ctx, &projected) {
                        if e.norm2 < eval.norm2 * (1.0 - 1e-12) {
                            price = projected;
                            eval = e;
                            improved = true;
                            break 'levenberg;
                        }
                    }
                }
                alpha *= 0.5;
            }
            lambda *= 100.0;
        }
        if !improved {
            break;
        }
    }
    Some(GnResult { price, eval })
}

// ---------------------------------------------------------------------------
// Seeds

/// Analytic candidate price directions: null-space vectors of the stacked
/// explicit ray matrix (all rays earn zero profit there) and Linear
/// consumers' coefficient vectors (their demand ties there).
pub(crate) fn analytic_directions(econ: &Economy) -> Vec<Vec<f64>> {
    let ell = econ.ell();
    let mut dirs: Vec<Vec<f64>> = Vec::new();
    let rays: Vec<&Vec<f64>> = econ
        .firms
        .iter()
        .filter(|f| f.kind == TechnologyKind::ConeRays)
        .flat_map(|f| f.generators.iter())
        .collect();
    if !rays.is_empty() {
        let m = rays.len();
        let mat = DMatrix::from_fn(m, ell, |r, c| rays[r][c]);
        let svd = mat.svd(false, true);
        if let Some(vt) = svd.v_t {
            for r in 0..vt.nrows() {
                let sv = svd.singular_values.get(r).copied().unwrap_or(0.0);
                if sv < 1e-10 {
                    let dir: Vec<f64> = (0..ell).map(|c| vt[(r, c)]).collect();
                    dirs.push(dir.clone());
                    dirs.push(dir.iter().map(|v| -v).collect());
                }
            }
            // Rank-deficient stacks expose extra rows of V^T beyond the
            // singular value count.
            for r in svd.singular_values.len()..vt.nrows() {
                let dir: Vec<f64> = (0..ell).map(|c| vt[(r, c)]).collect();
                dirs.push(dir.clone());
                dirs.push(dir.iter().map(|v| -v).collect());
            }
        }
    }
    for c in &econ.consumers {
        if let Family::Linear { coefficients } = &c.preference.family {
            dirs.push(coefficients.clone());
            dirs.push(coefficients.iter().map(|v| -v).collect());
        }
    }
    dirs
}

pub(crate) fn sign_patterns(ell: usize) -> Vec<Vec<f64>> {
    let count = 1usize << ell.min(10);
    (0..count)
        .map(|mask| {
            (0..ell)
                .map(|i| if mask & (1 << i) != 0 { -1.0 } else { 1.0 })
                .collect()
        })
        .collect()
}

/// Deterministic seed for a (pattern, draw) slot: analytic candidates first,
/// then the simplex center, then seeded random simplex points.
pub(crate) fn seed_for(
    econ: &Economy,
    analytic: &[Vec<f64>],
    pattern: &[f64],
    draw: usize,
    seed: u64,
) -> Vec<f64> {
    let ell = econ.ell();
    if draw < analytic.len() {
        return analytic[draw].clone();
    }
    if draw == analytic.len() {
        return pattern.iter().map(|s| s / ell as f64).collect();
    }
    let salt = (draw as u64).wrapping_mul(0x9E3779B97F4A7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt);
    // Exponential draws normalized to the simplex, signed by the pattern.
    let mut q: Vec<f64> = (0..ell)
        .map(|_| -(1.0 - rng.random::<f64>()).ln())
        .collect();
    let total: f64 = q.iter().sum();
    for (v, s) in q.iter_mut().zip(pattern) {
        *v = *v / total * s;
    }
    q
}

// ---------------------------------------------------------------------------
// Polish

#[derive(Debug, Clone, Copy, PartialEq)]
enum Coord {
    Zero,
    Bound,
    Budget,
}

#[derive(Debug, Clone)]
struct FrozenVertex(Vec<Coord>);

impl FrozenVertex {
    fn detect(vertex: &[f64], bounds: &[f64], tol: f64) -> Option<Self> {
        let mut pattern = Vec::with_capacity(vertex.len());
        let mut free = 0;
        for (x, b) in vertex.iter().zip(bounds) {
            if x.abs() <= tol {
                pattern.push(Coord::Zero);
            } else if b.is_finite() && (x - b).abs() <= tol {
                pattern.push(Coord::Bound);
            } else {
                pattern.push(Coord::Budget);
                free += 1;
            }
        }
        (free <= 1).then_some(Self(pattern))
    }

    fn rebuild(&self, bounds: &[f64], price: &[f64], income: f64) -> Option<Vec<f64>> {
        let mut x = vec![0.0; self.0.len()];
        let mut free: Option<usize> = None;
        for (i, c) in self.0.iter().enumerate() {
            match c {
                Coord::Zero => {}
                Coord::Bound => x[i] = bounds[i],
                Coord::Budget => free = Some(i),
            }
        }
        if let Some(f) = free {
            if price[f] == 0.0 {
                return None;
            }
            let rest: f64 = (0..x.len()).filter(|&i| i != f).map(|i| price[i] * x[i]).sum();
            x[f] = (income - rest) / price[f];
        }
        Some(x)
    }
}

#[derive(Debug, Clone)]
enum FrozenDemand {
    /// Recompute the clamped closed form as-is (smooth near the solution).
    ClosedForm,
    /// Single frozen vertex of a Linear consumer.
    Vertex(FrozenVertex),
    /// Tied Linear consumer: convex weights over frozen vertices.
    Tied(Vec<FrozenVertex>),
}

struct PolishProblem<'a> {
    econ: &'a Economy,
    ctx: &'a Context,
    frozen: Vec<FrozenDemand>,
    /// Active ray indices per cone firm (polytope: support vertices).
    active: Vec<Vec<usize>>,
    n_price: usize,
    n_act: usize,
    tie_offsets: Vec<Option<(usize, usize)>>,
}

struct PolishParts {
    bundles: Vec<Vec<f64>>,
    /// Full activity layout per firm, zeros on frozen-inactive generators.
    activities: Vec<Vec<f64>>,
}

impl PolishProblem<'_> {
    fn unpack<'z>(&self, z: &'z [f64]) -> (&'z [f64], &'z [f64], &'z [f64]) {
        let (p, rest) = z.split_at(self.n_price);
        let (a, lam) = rest.split_at(self.n_act);
        (p, a, lam)
    }

    fn residual(&self, z: &[f64]) -> Option<Vec<f64>> {
        self.compute(z).map(|(rows, _)| rows)
    }

    fn compute(&self, z: &[f64]) -> Option<(Vec<f64>, PolishParts)> {
        let econ = self.econ;
        let ell = econ.ell();
        let (price, act, lam) = self.unpack(z);

        // Productions and profits from the frozen active structure.
        let mut productions: Vec<Vec<f64>> = Vec::with_capacity(econ.firms.len());
        let mut full_activities: Vec<Vec<f64>> = Vec::with_capacity(econ.firms.len());
        let mut cursor = 0;
        for (firm, active) in econ.firms.iter().zip(&self.active) {
            let mut y = firm.offset.clone();
            let mut full = vec![0.0; firm.activity_len(ell)];
            match firm.kind {
                TechnologyKind::Zero => {}
                TechnologyKind::ConeRays => {
                    let rays = firm.effective_rays(ell);
                    for &r in active {
                        let a = act[cursor];
                        cursor += 1;
                        full[r] = a;
                        for i in 0..ell {
                            y[i] += a * rays[r][i];
                        }
                    }
                }
                TechnologyKind::Polytope => {
                    for &r in active {
                        let w = act[cursor];
                        cursor += 1;
                        full[r] = w;
                        for (yi, gi) in y.iter_mut().zip(&firm.generators[r]) {
                            *yi += w * gi;
                        }
                    }
                }
            }
            productions.push(y);
            full_activities.push(full);
        }
        let profits: Vec<f64> = productions.iter().map(|y| dot(price, y)).collect();

        let mut excess = vec![0.0; ell];
        let mut rows_tail: Vec<f64> = Vec::new();
        let mut bundles: Vec<Vec<f64>> = Vec::with_capacity(econ.consumers.len());
        for (idx, c) in econ.consumers.iter().enumerate() {
            let income = dot(price, &c.endowment)
                + c.shares
                    .iter()
                    .zip(&profits)
                    .map(|(t, pi)| t * pi)
                    .sum::<f64>();
            let bundle = match &self.frozen[idx] {
                FrozenDemand::ClosedForm => demand(c, price, income, self.ctx).ok()?,
                FrozenDemand::Vertex(v) => v.rebuild(&c.bounds, price, income)?,
                FrozenDemand::Tied(vs) => {
                    let (start, len) = self.tie_offsets[idx]?;
                    let verts: Vec<Vec<f64>> = vs
                        .iter()
                        .map(|v| v.rebuild(&c.bounds, price, income))
                        .collect::<Option<_>>()?;
                    let coeffs = match &c.preference.family {
                        Family::Linear { coefficients } => coefficients,
                        _ => return None,
                    };
                    let mut x = vec![0.0; ell];
                    for (k, v) in verts.iter().enumerate() {
                        for i in 0..ell {
                            x[i] += lam[start + k] * v[i];
                        }
                    }
                    // Tie rows: all frozen vertices stay utility-equal.
                    for v in verts.iter().skip(1) {
                        rows_tail.push(dot(coeffs, v) - dot(coeffs, &verts[0]));
                    }
                    rows_tail.push(lam[start..start + len].iter().sum::<f64>() - 1.0);
                    x
                }
            };
            for i in 0..ell {
                excess[i] += c.weight * (bundle[i] - c.endowment[i]);
            }
            bundles.push(bundle);
        }
        for y in &productions {
            for i in 0..ell {
                excess[i] -= y[i];
            }
        }

        let mut rows = excess;
        rows.push(l1_norm(price) - 1.0);
        // Zero profit on active cone rays; vertex-value equality on
        // polytope supports.
        for (firm, active) in econ.firms.iter().zip(&self.active) {
            match firm.kind {
                TechnologyKind::Zero => {}
                TechnologyKind::ConeRays => {
                    let rays = firm.effective_rays(ell);
                    for &r in active {
                        rows.push(dot(price, &rays[r]));
                    }
                }
                TechnologyKind::Polytope => {
                    if let Some((&first, rest)) = active.split_first() {
                        for &r in rest {
                            rows.push(dot(price, &firm.generators[r])
                                - dot(price, &firm.generators[first]));
                        }
                    }
                }
            }
        }
        // Polytope weights sum to one.
        let mut cursor = 0;
        for (firm, active) in econ.firms.iter().zip(&self.active) {
            let len = active.len();
            if firm.kind == TechnologyKind::Polytope && len > 0 {
                rows.push(act[cursor..cursor + len].iter().sum::<f64>() - 1.0);
            }
            cursor += len;
        }
        rows.extend(rows_tail);
        Some((
            rows,
            PolishParts {
                bundles,
                activities: full_activities,
            },
        ))
    }
}

pub(crate) struct PolishOutcome {
    pub price: Vec<f64>,
    pub bundles: Vec<Vec<f64>>,
    pub activities: Vec<Vec<f64>>,
    pub norm2: f64,
}

/// Freezes the structure detected at a converged candidate and re-solves the
/// smooth equality system by damped Gauss-Newton, driving the residual to
/// machine precision. Returns the refined price with the bundles and
/// activity levels assembled from the polished variables.
pub(crate) fn polish(
    econ: &Economy,
    ctx: &Context,
    price: &[f64],
    eval: &Evaluation,
) -> Option<PolishOutcome> {
    let ell = econ.ell();
    let zero_profit_tol = 1e-6;
    let activity_tol = 1e-8;

    let mut active: Vec<Vec<usize>> = Vec::with_capacity(econ.firms.len());
    for (firm, acts) in econ.firms.iter().zip(&eval.activities) {
        match firm.kind {
            TechnologyKind::Zero => active.push(vec![]),
            TechnologyKind::ConeRays => {
                let rays = firm.effective_rays(ell);
                let set: Vec<usize> = (0..rays.len())
                    .filter(|&r| {
                        acts[r] > activity_tol || dot(price, &rays[r]).abs() <= zero_profit_tol
                    })
                    .collect();
                active.push(set);
            }
            TechnologyKind::Polytope => {
                let mut set: Vec<usize> =
                    (0..firm.generators.len()).filter(|&r| acts[r] > activity_tol).collect();
                if set.is_empty() && !firm.generators.is_empty() {
                    let best = (0..firm.generators.len())
                        .max_by(|&a, &b| {
                            dot(price, &firm.generators[a])
                                .partial_cmp(&dot(price, &firm.generators[b]))
                                .unwrap()
                        })
                        .unwrap();
                    set.push(best);
                }
                active.push(set);
            }
        }
    }

    let mut frozen: Vec<FrozenDemand> = Vec::with_capacity(econ.consumers.len());
    let mut tie_offsets: Vec<Option<(usize, usize)>> = Vec::with_capacity(econ.consumers.len());
    let mut lam0: Vec<f64> = Vec::new();
    for (idx, c) in econ.consumers.iter().enumerate() {
        let vertex_tol = 1e-7 * (1.0 + linf_norm(&eval.bundles[idx]));
        match (&c.preference.family, &eval.ties[idx]) {
            (Family::Linear { .. }, Some(tie)) if c.preference.scale == 1.0 => {
                let patterns: Option<Vec<FrozenVertex>> = tie
                    .vertices
                    .iter()
                    .map(|v| FrozenVertex::detect(v, &c.bounds, vertex_tol))
                    .collect();
                match patterns {
                    Some(ps) => {
                        tie_offsets.push(Some((lam0.len(), ps.len())));
                        lam0.extend_from_slice(&tie.weights);
                        frozen.push(FrozenDemand::Tied(ps));
                    }
                    None => {
                        tie_offsets.push(None);
                        frozen.push(FrozenDemand::ClosedForm);
                    }
                }
            }
            (Family::Linear { .. }, None) if c.preference.scale == 1.0 => {
                tie_offsets.push(None);
                match FrozenVertex::detect(&eval.bundles[idx], &c.bounds, vertex_tol) {
                    Some(v) => frozen.push(FrozenDemand::Vertex(v)),
                    None => frozen.push(FrozenDemand::ClosedForm),
                }
            }
            _ => {
                tie_offsets.push(None);
                frozen.push(FrozenDemand::ClosedForm);
            }
        }
    }

    let mut act0: Vec<f64> = Vec::new();
    for (grp, acts) in active.iter().zip(&eval.activities) {
        for &r in grp {
            act0.push(acts[r].max(0.0));
        }
    }

    let problem = PolishProblem {
        econ,
        ctx,
        frozen,
        active: active.clone(),
        n_price: ell,
        n_act: act0.len(),
        tie_offsets,
    };
    let mut z: Vec<f64> = Vec::with_capacity(ell + act0.len() + lam0.len());
    z.extend_from_slice(price);
    z.extend_from_slice(&act0);
    z.extend_from_slice(&lam0);

    let mut f = problem.residual(&z)?;
    let mut best_norm = dot(&f, &f).sqrt();
    for _ in 0..60 {
        if linf_norm(&f) < 1e-15 {
            break;
        }
        let m = f.len();
        let nvars = z.len();
        let mut jac = DMatrix::zeros(m, nvars);
        for i in 0..nvars {
            let h = 1e-8 * (1.0 + z[i].abs());
            let mut zp = z.clone();
            zp[i] += h;
            let fp = problem.residual(&zp)?;
            if fp.len() != m {
                return None;
            }
            for r in 0..m {
                jac[(r, i)] = (fp[r] - f[r]) / h;
            }
        }
        let jt = jac.transpose();
        let gram = &jt * &jac;
        let rhs = -(&jt * DVector::from_column_slice(&f));
        let mut improved = false;
        let mut lambda = 1e-14;
        for _ in 0..6 {
            let mut damped = gram.clone();
            for i in 0..nvars {
                damped[(i, i)] += lambda * (1.0 + gram[(i, i)].abs());
            }
            let Some(delta) = damped.cholesky().map(|ch| ch.solve(&rhs)) else {
                lambda *= 1e3;
                continue;
            };
            let mut alpha = 1.0;
            for _ in 0..20 {
                let trial: Vec<f64> =
                    z.iter().zip(delta.iter()).map(|(v, d)| v + alpha * d).collect();
                if let Some(ft) = problem.residual(&trial) {
                    let norm = dot(&ft, &ft).sqrt();
                    if norm < best_norm * (1.0 - 1e-14) {
                        z = trial;
                        f = ft;
                        best_norm = norm;
                        improved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if improved {
                break;
            }
            lambda *= 1e3;
        }
        if !improved {
            break;
        }
    }

    // Exact renormalization of the price, then assembly of the polished
    // variables into certificate parts (activities clamped at zero).
    {
        let (p, _, _) = problem.unpack(&z);
        let norm = l1_norm(p);
        if norm < 1e-12 {
            return None;
        }
        let scale = 1.0 / norm;
        for v in z[..ell].iter_mut() {
            *v *= scale;
        }
    }
    let (rows, mut parts) = problem.compute(&z)?;
    for acts in &mut parts.activities {
        for a in acts.iter_mut() {
            *a = a.max(0.0);
        }
    }
    Some(PolishOutcome {
        price: z[..ell].to_vec(),
        bundles: parts.bundles,
        activities: parts.activities,
        norm2: dot(&rows, &rows).sqrt(),
    })
}

// ---------------------------------------------------------------------------
// Structural helpers shared with the quota and scan paths

/// Weighted l1 distance between successive allocations, the outer loop's
/// convergence metric.
pub(crate) fn allocation_distance(econ: &Economy, a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    econ.consumers
        .iter()
        .zip(a.iter().zip(b))
        .map(|(c, (x, y))| c.weight * x.iter().zip(y).map(|(u, v)| (u - v).abs()).sum::<f64>())
        .sum()
}

/// Hull vertices of the budget set restricted to a consumer's box; exposed
/// for diagnostics and tests.
#[allow(dead_code)]
pub(crate) fn consumer_budget_vertices(
    consumer: &Consumer,
    price: &[f64],
    income: f64,
) -> Result<Vec<Vec<f64>>, DemandError> {
    budget_box_vertices(&consumer.bounds, price, income)
}
