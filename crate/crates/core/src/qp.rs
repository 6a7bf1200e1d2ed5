//! Inequality-constrained QP kernel and the Euclidean projection onto the
//! lifted polytope.
//!
//! The solver runs operator splitting (ADMM) to locate the active set, then
//! polishes with an equality-constrained KKT solve so every returned point
//! carries a certified KKT residual. Consecutive projections along an online
//! run barely move, so the polish step caches its factorization per active
//! set and most solves reduce to two triangular solves plus a feasibility
//! sweep — no ADMM iterations at all.

use nalgebra::{DMatrix, DVector};

use crate::constraints::LiftedPolytope;
use crate::error::{Error, Result};
use crate::policy::DacPolicy;
use crate::sparse::SparseMatrix;

/// Convex QP `min 1/2 v' diag(p) v + q' v  s.t.  C v <= h` with strictly
/// positive diagonal curvature.
#[derive(Debug, Clone)]
pub struct QpProblem {
    pub p_diag: DVector<f64>,
    pub q: DVector<f64>,
    pub c: SparseMatrix,
    pub h: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    Infeasible,
    MaxIter,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub v: DVector<f64>,
    /// Multipliers for every row (zero off the active set).
    pub duals: DVector<f64>,
    pub status: QpStatus,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub objective: f64,
    pub admm_iterations: usize,
    /// Whether the cached active set certified without any ADMM work.
    pub fast_path: bool,
}

/// Tolerances of the kernel. Feasibility is what the safety claims lean on.
#[derive(Debug, Clone, Copy)]
pub struct QpTolerances {
    pub feasibility: f64,
    pub kkt: f64,
    pub admm_eps: f64,
    pub max_admm_iters: usize,
    pub max_pivots: usize,
}

impl Default for QpTolerances {
    fn default() -> Self {
        Self {
            feasibility: 1e-8,
            kkt: 1e-6,
            admm_eps: 1e-7,
            max_admm_iters: 50_000,
            max_pivots: 240,
        }
    }
}

const ADMM_SIGMA: f64 = 1e-6;
const ADMM_RHO: f64 = 1.0;
// Quasi-definite shift on the dual block of the polish KKT system; makes the
// factorization well-posed even when the active rows are linearly dependent.
// Iterative refinement against the unshifted system restores accuracy.
const KKT_REG: f64 = 1e-11;

/// Cached polish factorization: Schur complement of the diagonal-curvature
/// KKT system, or the full indefinite LU when the Schur Cholesky fails.
enum PolishFactor {
    Schur {
        chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    },
    Full {
        lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    },
}

/// Reusable solver for one constraint system; `solve` accepts a fresh linear
/// term each call and warm-starts from the previous solution.
pub struct QpSolver {
    p_diag: DVector<f64>,
    c: SparseMatrix,
    h: DVector<f64>,
    /// Per-row normalization: internal row r is the true row divided by s[r].
    row_scale: DVector<f64>,
    tol: QpTolerances,
    admm_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    // warm state
    x: DVector<f64>,
    z: DVector<f64>,
    y: DVector<f64>,
    have_warm: bool,
    // cached polish factorization for the last active set
    cached_active: Vec<usize>,
    cached_factor: Option<PolishFactor>,
    // workspaces
    ws_rows: DVector<f64>,
    ws_rows2: DVector<f64>,
    ws_vars: DVector<f64>,
}

impl QpSolver {
    pub fn new(p_diag: DVector<f64>, c: SparseMatrix, h: DVector<f64>) -> Result<Self> {
        Self::with_tolerances(p_diag, c, h, QpTolerances::default())
    }

    pub fn with_tolerances(
        p_diag: DVector<f64>,
        c: SparseMatrix,
        h: DVector<f64>,
        tol: QpTolerances,
    ) -> Result<Self> {
        let n = p_diag.len();
        if c.ncols() != n || c.nrows() != h.len() {
            return Err(Error::DimensionMismatch("QpSolver::new".into()));
        }
        if p_diag.iter().any(|p| *p <= 0.0) {
            return Err(Error::InvalidArgument(
                "curvature diagonal must be strictly positive".into(),
            ));
        }
        let raw_scales = c.row_inf_norms();
        let mut row_scale = DVector::from_element(c.nrows(), 1.0);
        for r in 0..c.nrows() {
            if raw_scales[r] > 1e-14 {
                row_scale[r] = raw_scales[r];
            } else if h[r] < 0.0 {
                return Err(Error::DegenerateConstraints(format!(
                    "row {r} has zero coefficients but negative right-hand side"
                )));
            }
        }
        // scaled rows: divide triplets by s[r]
        let mut trips = Vec::with_capacity(c.nnz());
        for r in 0..c.nrows() {
            let (idx, vals) = c.row(r);
            for (&j, &v) in idx.iter().zip(vals) {
                trips.push((r, j, v / row_scale[r]));
            }
        }
        let c_scaled = SparseMatrix::from_triplets(c.nrows(), n, trips);
        let h_scaled = DVector::from_fn(c.nrows(), |r, _| h[r] / row_scale[r]);

        let rho_vec = DVector::from_element(c_scaled.nrows(), ADMM_RHO);
        let mut kkt = c_scaled.normal_matrix_weighted(&rho_vec);
        for i in 0..n {
            kkt[(i, i)] += p_diag[i] + ADMM_SIGMA;
        }
        let admm_chol = kkt
            .cholesky()
            .ok_or_else(|| Error::DegenerateConstraints("ADMM matrix not SPD".into()))?;
        let rows = c_scaled.nrows();
        Ok(Self {
            p_diag,
            c: c_scaled,
            h: h_scaled,
            row_scale,
            tol,
            admm_chol,
            x: DVector::zeros(n),
            z: DVector::zeros(rows),
            y: DVector::zeros(rows),
            have_warm: false,
            cached_active: Vec::new(),
            cached_factor: None,
            ws_rows: DVector::zeros(rows),
            ws_rows2: DVector::zeros(rows),
            ws_vars: DVector::zeros(n),
        })
    }

    pub fn num_vars(&self) -> usize {
        self.p_diag.len()
    }

    pub fn num_rows(&self) -> usize {
        self.c.nrows()
    }

    /// Drop warm-start state (used by determinism and cold-start tests).
    pub fn reset(&mut self) {
        self.x.fill(0.0);
        self.z.fill(0.0);
        self.y.fill(0.0);
        self.have_warm = false;
        self.cached_active.clear();
        self.cached_factor = None;
    }

    /// Maximum true-space violation of `C v <= h`.
    pub fn violation(&self, v: &DVector<f64>) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for r in 0..self.c.nrows() {
            let resid = (self.c.row_dot(r, v) - self.h[r]) * self.row_scale[r];
            worst = worst.max(resid);
        }
        worst.max(0.0)
    }

    /// Minimum true-space slack of `C v <= h` (negative when violated).
    pub fn min_slack(&self, v: &DVector<f64>) -> f64 {
        let mut best = f64::INFINITY;
        for r in 0..self.c.nrows() {
            let slack = (self.h[r] - self.c.row_dot(r, v)) * self.row_scale[r];
            best = best.min(slack);
        }
        best
    }

    fn objective(&self, q: &DVector<f64>, v: &DVector<f64>) -> f64 {
        0.5 * v
            .iter()
            .enumerate()
            .map(|(i, vi)| self.p_diag[i] * vi * vi)
            .sum::<f64>()
            + q.dot(v)
    }

    /// Solve for the given linear term, reusing warm state when present.
    pub fn solve(&mut self, q: &DVector<f64>) -> Result<QpSolution> {
        if q.len() != self.num_vars() {
            return Err(Error::DimensionMismatch("QpSolver::solve".into()));
        }
        // Unconstrained problems short-circuit.
        if self.c.nrows() == 0 {
            let v = DVector::from_fn(self.num_vars(), |i, _| -q[i] / self.p_diag[i]);
            return Ok(QpSolution {
                objective: self.objective(q, &v),
                v,
                duals: DVector::zeros(0),
                status: QpStatus::Optimal,
                primal_residual: 0.0,
                dual_residual: 0.0,
                admm_iterations: 0,
                fast_path: true,
            });
        }

        // Primary path: the dual active-set iteration warm-started from the
        // cached working set (empty on the first call); the previous set
        // usually still certifies outright.
        {
            let active = if self.cached_factor.is_some() {
                let cached = self.cached_active.clone();
                if let Some(sol) = self.try_polish(q, &cached, true)? {
                    return Ok(sol);
                }
                cached
            } else {
                Vec::new()
            };
            match self.gi_loop(q, active)? {
                GiOutcome::Solved(sol) => return Ok(sol),
                GiOutcome::Infeasible => {
                    return Ok(QpSolution {
                        v: self.x.clone(),
                        duals: DVector::zeros(self.c.nrows()),
                        status: QpStatus::Infeasible,
                        primal_residual: self.violation(&self.x),
                        dual_residual: f64::NAN,
                        objective: f64::NAN,
                        admm_iterations: 0,
                        fast_path: false,
                    })
                }
                GiOutcome::Stuck => {}
            }
        }

        // Fallback: operator splitting to locate the active set, then one
        // more dual active-set pass from that guess.
        let (iters, maybe_infeasible) = self.run_admm(q);
        if maybe_infeasible {
            return Ok(QpSolution {
                v: self.x.clone(),
                duals: self.unscale_duals(&self.y),
                status: QpStatus::Infeasible,
                primal_residual: self.violation(&self.x),
                dual_residual: f64::NAN,
                objective: f64::NAN,
                admm_iterations: iters,
                fast_path: false,
            });
        }
        let active = self.active_guess_from_admm();
        match self.gi_loop(q, active)? {
            GiOutcome::Solved(mut sol) => {
                sol.admm_iterations = iters;
                Ok(sol)
            }
            GiOutcome::Infeasible => Ok(QpSolution {
                v: self.x.clone(),
                duals: self.unscale_duals(&self.y),
                status: QpStatus::Infeasible,
                primal_residual: self.violation(&self.x),
                dual_residual: f64::NAN,
                objective: f64::NAN,
                admm_iterations: iters,
                fast_path: false,
            }),
            GiOutcome::Stuck => {
                // report the splitting point honestly
                let stat = self.stationarity(q, &self.x, &self.y);
                Ok(QpSolution {
                    v: self.x.clone(),
                    duals: self.unscale_duals(&self.y),
                    status: QpStatus::MaxIter,
                    primal_residual: self.violation(&self.x),
                    dual_residual: stat,
                    objective: self.objective(q, &self.x),
                    admm_iterations: iters,
                    fast_path: false,
                })
            }
        }
    }

    fn unscale_duals(&self, y_scaled: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(y_scaled.len(), |r, _| y_scaled[r] / self.row_scale[r])
    }

    /// `||diag(p) v + q + C' y||_inf` with scaled rows and scaled duals
    /// (the products coincide with the true-space value).
    fn stationarity(&self, q: &DVector<f64>, v: &DVector<f64>, y_scaled: &DVector<f64>) -> f64 {
        let mut grad = DVector::from_fn(self.num_vars(), |i, _| self.p_diag[i] * v[i] + q[i]);
        let mut cty = DVector::zeros(self.num_vars());
        self.c.mul_transpose_vec(y_scaled, &mut cty);
        grad += cty;
        grad.amax()
    }

    fn run_admm(&mut self, q: &DVector<f64>) -> (usize, bool) {
        if !self.have_warm {
            self.x.fill(0.0);
            self.c.mul_vec(&self.x, &mut self.z);
            for r in 0..self.z.len() {
                self.z[r] = self.z[r].min(self.h[r]);
            }
            self.y.fill(0.0);
        }
        let mut iters = 0;
        for it in 1..=self.tol.max_admm_iters {
            iters = it;
            // rhs = sigma x - q + C'(rho z - y)
            for r in 0..self.z.len() {
                self.ws_rows[r] = ADMM_RHO * self.z[r] - self.y[r];
            }
            self.c.mul_transpose_vec(&self.ws_rows, &mut self.ws_vars);
            for i in 0..self.x.len() {
                self.ws_vars[i] += ADMM_SIGMA * self.x[i] - q[i];
            }
            let x_new = self.admm_chol.solve(&self.ws_vars);
            self.c.mul_vec(&x_new, &mut self.ws_rows2); // z~ = C x
            let mut r_prim = 0.0f64;
            for r in 0..self.z.len() {
                let zt = self.ws_rows2[r];
                let z_new = (zt + self.y[r] / ADMM_RHO).min(self.h[r]);
                self.y[r] += ADMM_RHO * (zt - z_new);
                r_prim = r_prim.max((zt - z_new).abs());
                self.z[r] = z_new;
            }
            self.x = x_new;
            if it % 25 == 0 || r_prim < self.tol.admm_eps {
                let r_dual = self.stationarity(q, &self.x, &self.y);
                if r_prim < self.tol.admm_eps && r_dual < self.tol.admm_eps.max(1e-6) {
                    self.have_warm = true;
                    return (iters, false);
                }
                // crude infeasibility certificate: y >= 0, C'y ~ 0, h'y < 0
                if it % 500 == 0 {
                    let ynorm = self.y.amax();
                    if ynorm > 1e6 {
                        let mut cty = DVector::zeros(self.num_vars());
                        self.c.mul_transpose_vec(&self.y, &mut cty);
                        let hy = self.h.dot(&self.y);
                        if cty.amax() <= 1e-8 * ynorm && hy < -1e-8 * ynorm {
                            return (iters, true);
                        }
                    }
                }
            }
        }
        self.have_warm = true;
        (iters, false)
    }

    fn active_guess_from_admm(&self) -> Vec<usize> {
        let mut act = Vec::new();
        for r in 0..self.c.nrows() {
            let slack = self.h[r] - self.c.row_dot(r, &self.x);
            if slack <= 1e-6 * (1.0 + self.h[r].abs()) || self.y[r] > 1e-7 {
                act.push(r);
            }
        }
        // never exceed the variable count; keep the most binding rows
        if act.len() > self.num_vars() {
            act.sort_by(|&a, &b| {
                let sa = self.h[a] - self.c.row_dot(a, &self.x);
                let sb = self.h[b] - self.c.row_dot(b, &self.x);
                sa.partial_cmp(&sb).unwrap().then(a.cmp(&b))
            });
            act.truncate(self.num_vars());
            act.sort_unstable();
        }
        act
    }

    /// Factor the KKT system for an active set and store it in the cache.
    /// With diagonal curvature the system reduces to the |A|-sized Schur
    /// complement `G = C_A P^{-1} C_A'`; a quasi-definite shift keeps the
    /// factorization well-posed under dependent rows, and the full
    /// indefinite LU serves as fallback when the Cholesky fails.
    fn factor_active(&mut self, active: &[usize]) -> Result<()> {
        let na = active.len();
        let mut g = DMatrix::<f64>::zeros(na, na);
        for a in 0..na {
            let (ia, va) = self.c.row(active[a]);
            for b in a..na {
                let (ib, vb) = self.c.row(active[b]);
                // index-merge dot product weighted by 1/p
                let mut dot = 0.0;
                let (mut pa, mut pb) = (0usize, 0usize);
                while pa < ia.len() && pb < ib.len() {
                    match ia[pa].cmp(&ib[pb]) {
                        std::cmp::Ordering::Less => pa += 1,
                        std::cmp::Ordering::Greater => pb += 1,
                        std::cmp::Ordering::Equal => {
                            dot += va[pa] * vb[pb] / self.p_diag[ia[pa]];
                            pa += 1;
                            pb += 1;
                        }
                    }
                }
                g[(a, b)] = dot;
                g[(b, a)] = dot;
            }
        }
        for a in 0..na {
            g[(a, a)] += KKT_REG * (1.0 + g[(a, a)]);
        }
        let factor = match g.clone().cholesky() {
            Some(chol) => PolishFactor::Schur { chol },
            None => {
                let n = self.num_vars();
                let dim = n + na;
                let mut kkt = DMatrix::<f64>::zeros(dim, dim);
                for i in 0..n {
                    kkt[(i, i)] = self.p_diag[i];
                }
                for (a, &r) in active.iter().enumerate() {
                    let (idx, vals) = self.c.row(r);
                    for (&j, &v) in idx.iter().zip(vals) {
                        kkt[(n + a, j)] = v;
                        kkt[(j, n + a)] = v;
                    }
                    kkt[(n + a, n + a)] = -KKT_REG;
                }
                PolishFactor::Full { lu: kkt.lu() }
            }
        };
        self.cached_factor = Some(factor);
        self.cached_active = active.to_vec();
        Ok(())
    }

    /// Solve the cached KKT system for an arbitrary right-hand side
    /// `(rhs_v, rhs_active)` with iterative refinement against the
    /// unshifted operator.
    fn kkt_solve_refined(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let n = self.num_vars();
        let na = self.cached_active.len();
        let factor = self.cached_factor.as_ref().expect("factor first");
        let apply_inverse = |r: &DVector<f64>| -> Option<DVector<f64>> {
            match factor {
                PolishFactor::Schur { chol } => {
                    // lambda from (G + reg) lambda = C_A P^{-1} r_v - r_a,
                    // then v = P^{-1}(r_v - C_A' lambda)
                    let mut rhs_l = DVector::zeros(na);
                    for (a, &row) in self.cached_active.iter().enumerate() {
                        let (idx, vals) = self.c.row(row);
                        let mut dot = 0.0;
                        for (&j, &cv) in idx.iter().zip(vals) {
                            dot += cv * r[j] / self.p_diag[j];
                        }
                        rhs_l[a] = dot - r[n + a];
                    }
                    let lambda = chol.solve(&rhs_l);
                    let mut full = DVector::zeros(n + na);
                    for i in 0..n {
                        full[i] = r[i] / self.p_diag[i];
                    }
                    for (a, &row) in self.cached_active.iter().enumerate() {
                        let (idx, vals) = self.c.row(row);
                        for (&j, &cv) in idx.iter().zip(vals) {
                            full[j] -= cv * lambda[a] / self.p_diag[j];
                        }
                        full[n + a] = lambda[a];
                    }
                    Some(full)
                }
                PolishFactor::Full { lu } => lu.solve(r),
            }
        };
        let mut sol = apply_inverse(rhs)
            .ok_or_else(|| Error::DegenerateConstraints("singular KKT system".into()))?;
        for _ in 0..3 {
            let resid = rhs - self.kkt_apply(&sol);
            if resid.amax() <= 1e-14 * (1.0 + rhs.amax()) {
                break;
            }
            match apply_inverse(&resid) {
                Some(c) => sol += c,
                None => break,
            }
        }
        Ok(sol)
    }

    /// Solve the cached KKT system for linear term `q`; returns `(v, lambda)`.
    fn solve_kkt(&self, q: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.num_vars();
        let na = self.cached_active.len();
        let mut rhs = DVector::zeros(n + na);
        for i in 0..n {
            rhs[i] = -q[i];
        }
        for (a, &r) in self.cached_active.iter().enumerate() {
            rhs[n + a] = self.h[r];
        }
        let sol = self.kkt_solve_refined(&rhs)?;
        let v = sol.rows(0, n).into_owned();
        let lambda = sol.rows(n, na).into_owned();
        Ok((v, lambda))
    }

    fn kkt_apply(&self, sol: &DVector<f64>) -> DVector<f64> {
        let n = self.num_vars();
        let na = self.cached_active.len();
        let mut out = DVector::zeros(n + na);
        for i in 0..n {
            out[i] = self.p_diag[i] * sol[i];
        }
        for (a, &r) in self.cached_active.iter().enumerate() {
            let (idx, vals) = self.c.row(r);
            let mut dot = 0.0;
            for (&j, &v) in idx.iter().zip(vals) {
                dot += v * sol[j];
                out[j] += v * sol[n + a];
            }
            out[n + a] = dot;
        }
        out
    }

    /// Certify a KKT pair for the given active set; on success stores warm
    /// state and returns the finished solution.
    fn certify(
        &mut self,
        q: &DVector<f64>,
        active: &[usize],
        v: &DVector<f64>,
        lambda: &DVector<f64>,
        fast_path: bool,
    ) -> Option<QpSolution> {
        if lambda.iter().any(|l| *l < -self.tol.kkt) {
            return None;
        }
        let viol = self.violation(v);
        if viol > self.tol.feasibility {
            return None;
        }
        let mut y_full = DVector::zeros(self.c.nrows());
        for (a, &r) in active.iter().enumerate() {
            y_full[r] = lambda[a].max(0.0);
        }
        let stat = self.stationarity(q, v, &y_full);
        if stat > self.tol.kkt {
            return None;
        }
        // refresh warm state so a later ADMM fallback starts well
        self.x = v.clone();
        let mut cv = DVector::zeros(self.z.len());
        self.c.mul_vec(v, &mut cv);
        for r in 0..self.z.len() {
            self.z[r] = cv[r].min(self.h[r]);
        }
        self.y = y_full.clone();
        self.have_warm = true;
        Some(QpSolution {
            objective: self.objective(q, v),
            duals: self.unscale_duals(&y_full),
            v: v.clone(),
            status: QpStatus::Optimal,
            primal_residual: viol,
            dual_residual: stat,
            admm_iterations: 0,
            fast_path,
        })
    }

    /// Solve on a fixed active set and certify; `reuse_factor` trusts the
    /// cached factorization (fast path). Returns None when the set does not
    /// certify.
    fn try_polish(
        &mut self,
        q: &DVector<f64>,
        active: &[usize],
        reuse_factor: bool,
    ) -> Result<Option<QpSolution>> {
        if !(reuse_factor && self.cached_active == active && self.cached_factor.is_some()) {
            self.factor_active(active)?;
        }
        let (v, lambda) = match self.solve_kkt(q) {
            Ok(p) => p,
            Err(_) => return Ok(None),
        };
        Ok(self.certify(q, active, &v, &lambda, reuse_factor))
    }

    /// Dual active-set iteration (Goldfarb-Idnani): maintain a point that
    /// is optimal for the subproblem restricted to the working set with
    /// nonnegative multipliers, and add most-violated constraints one at a
    /// time via primal/dual ratio steps. Finite for strictly convex
    /// problems; detects infeasibility when a dual step is unbounded.
    /// `start` seeds the working set (typically the previous active set).
    fn gi_loop(&mut self, q: &DVector<f64>, start: Vec<usize>) -> Result<GiOutcome> {
        let n = self.num_vars();
        let rows = self.c.nrows();
        // establish the starting S-pair: eq-solve on the seed set, dropping
        // negative multipliers until none remain
        let mut active = start;
        active.sort_unstable();
        active.dedup();
        let (mut x, mut lambda) = loop {
            self.factor_active(&active)?;
            let (xx, ll) = self.solve_kkt(q)?;
            let mut drop_at: Option<usize> = None;
            let mut most_neg = -1e-12;
            for (a, l) in ll.iter().enumerate() {
                if *l < most_neg {
                    most_neg = *l;
                    drop_at = Some(a);
                }
            }
            match drop_at {
                Some(a) => {
                    active.remove(a);
                }
                None => break (xx, ll.iter().cloned().collect::<Vec<f64>>()),
            }
        };

        let mut pivots = 0usize;
        'outer: loop {
            // most violated inactive row, smallest index on ties
            let mut worst_row: Option<usize> = None;
            let mut worst = self.tol.feasibility * 0.25;
            for r in 0..rows {
                if active.binary_search(&r).is_ok() {
                    continue;
                }
                let viol = self.c.row_dot(r, &x) - self.h[r];
                if viol > worst {
                    worst = viol;
                    worst_row = Some(r);
                }
            }
            let Some(r) = worst_row else {
                // optimal for the full row set: snap with a fresh eq-solve
                return match self.try_polish(q, &active.clone(), true)? {
                    Some(sol) => Ok(GiOutcome::Solved(sol)),
                    None => {
                        if std::env::var_os("OGDBZ_QP_TRACE").is_some() {
                            let (v, l) = self.solve_kkt(q)?;
                            let minl = l.iter().cloned().fold(f64::INFINITY, f64::min);
                            let mut y = DVector::zeros(self.c.nrows());
                            for (a, &rr) in active.iter().enumerate() { y[rr] = l[a].max(0.0); }
                            let mut ygi = DVector::zeros(self.c.nrows());
                            for (a, &rr) in active.iter().enumerate() { ygi[rr] = lambda[a].max(0.0); }
                            eprintln!("GI final polish failed: viol={:.3e} min_l={:.3e} stat={:.3e} |A|={}",
                                self.violation(&v), minl, self.stationarity(q, &v, &y), active.len());
                            eprintln!("  gi point: dist_to_exact={:.3e} viol_gi={:.3e} stat_gi={:.3e}",
                                (&x - &v).amax(), self.violation(&x), self.stationarity(q, &x, &ygi));
                            // which row is violated at the exact point?
                            for rr in 0..self.c.nrows() {
                                let vv = self.c.row_dot(rr, &v) - self.h[rr];
                                if vv > 1e-8 {
                                    eprintln!("  exact-point violated row {rr}: {:.3e} (in W: {})",
                                        vv, active.binary_search(&rr).is_ok());
                                }
                            }
                        }
                        Ok(GiOutcome::Stuck)
                    }
                };
            };
            let mut viol = worst;
            let mut lambda_r = 0.0f64;
            loop {
                pivots += 1;
                if pivots > self.tol.max_pivots {
                    if std::env::var_os("OGDBZ_QP_TRACE").is_some() {
                        eprintln!("GI stuck: |A|={} r={} viol={:.3e}", active.len(), r, viol);
                    }
                    return Ok(GiOutcome::Stuck);
                }
                if std::env::var_os("OGDBZ_QP_TRACE").is_some() {
                    eprintln!("GI pivot {}: |A|={} r={} viol={:.3e}", pivots, active.len(), r, viol);
                }
                // step directions: P z + C_W' u = -c_r, C_W z = 0
                let mut c_r = DVector::zeros(n);
                {
                    let (idx, vals) = self.c.row(r);
                    for (&j, &v) in idx.iter().zip(vals) {
                        c_r[j] = v;
                    }
                }
                let (z, u) = self.step_directions(&c_r)?;
                let ztpz: f64 = z
                    .iter()
                    .enumerate()
                    .map(|(i, zi)| self.p_diag[i] * zi * zi)
                    .sum();
                // A row (nearly) dependent on the working set has z ~ 0 and
                // must take a dual step; detect it by capping the primal
                // displacement rather than thresholding z itself, which is
                // unreliable across the mixed curvature scales.
                let primal_ok =
                    ztpz > 1e-30 && (viol / ztpz) * z.amax() <= 1e8 * (1.0 + x.amax());
                let t2 = if primal_ok { viol / ztpz } else { f64::INFINITY };
                // dual blocking: lambda_j + t u_j >= 0 over u_j < 0
                let mut t1 = f64::INFINITY;
                let mut blocker: Option<usize> = None;
                for (a, &uj) in u.iter().enumerate() {
                    if uj < -1e-14 {
                        let cap = -lambda[a] / uj;
                        if cap < t1 - 1e-15 {
                            t1 = cap;
                            blocker = Some(a);
                        }
                    }
                }
                let t = t1.min(t2);
                if !t.is_finite() {
                    // dual unbounded: a genuine infeasibility certificate
                    // only when the primal direction truly vanished; a capped
                    // ill-conditioned step falls through to the fallback.
                    return if ztpz <= 1e-30 {
                        Ok(GiOutcome::Infeasible)
                    } else {
                        Ok(GiOutcome::Stuck)
                    };
                }
                // apply the step
                if t > 0.0 {
                    x.axpy(t, &z, 1.0);
                    for (a, l) in lambda.iter_mut().enumerate() {
                        *l = (*l + t * u[a]).max(0.0);
                    }
                    lambda_r += t;
                    viol -= t * ztpz;
                }
                if t2 <= t1 {
                    // constraint r satisfied: enters the working set; refresh
                    // the S-pair from an exact solve so roundoff from the
                    // incremental steps cannot accumulate
                    let pos = active.binary_search(&r).unwrap_err();
                    active.insert(pos, r);
                    self.factor_active(&active.clone())?;
                    let (xx, ll) = self.solve_kkt(q)?;
                    if ll.iter().all(|l| *l >= -1e-9) {
                        x = xx;
                        lambda = ll.iter().cloned().collect();
                    } else {
                        // exact solve disagrees on dual feasibility (heavy
                        // degeneracy): keep the incremental pair
                        lambda.insert(pos, lambda_r);
                    }
                    continue 'outer;
                }
                // dual block: drop the blocker, keep working on r
                let a = blocker.expect("finite t1 implies a blocker");
                active.remove(a);
                lambda.remove(a);
                self.factor_active(&active.clone())?;
            }
        }
    }

    /// Solve `P z + C_W' u = -c_r`, `C_W z = 0` through the cached factor.
    fn step_directions(&self, c_r: &DVector<f64>) -> Result<(DVector<f64>, Vec<f64>)> {
        let n = self.num_vars();
        let na = self.cached_active.len();
        let mut rhs = DVector::zeros(n + na);
        for i in 0..n {
            rhs[i] = -c_r[i];
        }
        let sol = self.kkt_solve_refined(&rhs)?;
        let z = sol.rows(0, n).into_owned();
        let u = sol.rows(n, na).iter().cloned().collect();
        Ok((z, u))
    }
}

/// Outcome of one Goldfarb-Idnani pass.
enum GiOutcome {
    Solved(QpSolution),
    Infeasible,
    Stuck,
}

/// One-shot convenience wrapper around [`QpSolver`].
pub fn solve_qp(problem: &QpProblem, warm_start: Option<&DVector<f64>>) -> Result<QpSolution> {
    let mut solver = QpSolver::new(problem.p_diag.clone(), problem.c.clone(), problem.h.clone())?;
    if let Some(w) = warm_start {
        solver.x = w.clone();
        solver.c.mul_vec(w, &mut solver.ws_rows2);
        for r in 0..solver.z.len() {
            solver.z[r] = solver.ws_rows2[r].min(solver.h[r]);
        }
        solver.have_warm = true;
    }
    solver.solve(&problem.q)
}

// ---------------------------------------------------------------------------
// Phase-one feasibility LP
// ---------------------------------------------------------------------------

/// Outcome of the phase-one LP `max s  s.t.  C v + s 1 <= h` (with a tiny
/// quadratic regularization so the problem is strictly convex).
#[derive(Debug, Clone)]
pub struct FeasibilityReport {
    /// Strictly feasible witness, when one exists.
    pub witness: Option<DVector<f64>>,
    /// Verified minimum slack of the witness in true row units.
    pub max_slack: f64,
    pub admm_iterations: usize,
}

const LP_REG: f64 = 1e-8;

/// Maximize the uniform slack over the polytope rows. The witness doubles as
/// the initialization of the online run.
pub fn solve_feasibility_lp(poly: &LiftedPolytope) -> Result<FeasibilityReport> {
    let n = poly.num_vars();
    let rows = poly.num_rows();
    // augmented problem over (v, s)
    let mut trips = Vec::with_capacity(poly.c.nnz() + rows);
    for r in 0..rows {
        let (idx, vals) = poly.c.row(r);
        for (&j, &v) in idx.iter().zip(vals) {
            trips.push((r, j, v));
        }
        trips.push((r, n, 1.0));
    }
    let c_aug = SparseMatrix::from_triplets(rows, n + 1, trips);
    let p_diag = DVector::from_element(n + 1, LP_REG);
    let mut q = DVector::zeros(n + 1);
    q[n] = -1.0; // maximize s
    let mut solver = QpSolver::new(p_diag, c_aug, poly.rhs())?;
    let sol = solver.solve(&q)?;
    let s_star = sol.v[n];
    if !s_star.is_finite() || s_star > 1e9 {
        return Err(Error::DegenerateConstraints(format!(
            "unbounded uniform slack (s = {s_star:.3e}); constraint data degenerate"
        )));
    }
    let witness = sol.v.rows(0, n).into_owned();
    // verify strict feasibility directly on the original rows
    let mut cv = DVector::zeros(rows);
    poly.c.mul_vec(&witness, &mut cv);
    let rhs = poly.rhs();
    let mut min_slack = f64::INFINITY;
    for r in 0..rows {
        min_slack = min_slack.min(rhs[r] - cv[r]);
    }
    Ok(FeasibilityReport {
        witness: if min_slack > 0.0 { Some(witness) } else { None },
        max_slack: min_slack.max(s_star.min(0.0)),
        admm_iterations: sol.admm_iterations,
    })
}

// ---------------------------------------------------------------------------
// Projection onto Omega_eps
// ---------------------------------------------------------------------------

/// Diagnostics of one projection.
#[derive(Debug, Clone, Copy)]
pub struct ProjectionInfo {
    pub admm_iterations: usize,
    pub fast_path: bool,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Frobenius distance between input and projected policy.
    pub distance: f64,
}

/// Regularization applied to the auxiliary (Y, Z) blocks so the projection
/// QP is strictly convex in every coordinate; the policy-block optimum is
/// unaffected beyond tolerance.
pub const AUX_REG: f64 = 1e-10;

/// Euclidean projection of policies onto `Omega_eps` through the lifted
/// polytope, with warm starting and factorization reuse across calls.
pub struct OmegaProjector {
    solver: QpSolver,
    layout: crate::constraints::VarLayout,
    q_buf: DVector<f64>,
}

impl OmegaProjector {
    pub fn new(poly: &LiftedPolytope) -> Result<Self> {
        let n = poly.num_vars();
        let m_len = poly.layout.m_len();
        let p_diag = DVector::from_fn(n, |i, _| if i < m_len { 1.0 } else { AUX_REG });
        let solver = QpSolver::new(p_diag, poly.c.clone(), poly.rhs())?;
        Ok(Self {
            solver,
            layout: poly.layout,
            q_buf: DVector::zeros(n),
        })
    }

    pub fn reset(&mut self) {
        self.solver.reset();
    }

    /// Project a policy; errors on solver failure (an uncertified projection
    /// voids the safety guarantee, so callers must abort).
    pub fn project(&mut self, m_point: &DacPolicy) -> Result<(DacPolicy, ProjectionInfo)> {
        let l = &self.layout;
        if m_point.h() != l.h || m_point.action_dim() != l.m || m_point.state_dim() != l.n {
            return Err(Error::DimensionMismatch("project".into()));
        }
        let flat = m_point.to_flat();
        self.q_buf.fill(0.0);
        for i in 0..l.m_len() {
            self.q_buf[i] = -flat[i];
        }
        let sol = self.solver.solve(&self.q_buf)?;
        match sol.status {
            QpStatus::Optimal => {}
            QpStatus::Infeasible => {
                return Err(Error::InfeasibleSet {
                    max_slack: -sol.primal_residual,
                    condition: " (projection target set)".into(),
                })
            }
            QpStatus::MaxIter => {
                return Err(Error::SolverFailure {
                    iterations: sol.admm_iterations,
                    primal: sol.primal_residual,
                    dual: sol.dual_residual,
                })
            }
        }
        let projected = DacPolicy::from_flat(
            &sol.v.rows(0, l.m_len()).into_owned(),
            l.h,
            l.m,
            l.n,
        )?;
        let distance = projected.frob_distance(m_point);
        Ok((
            projected,
            ProjectionInfo {
                admm_iterations: sol.admm_iterations,
                fast_path: sol.fast_path,
                primal_residual: sol.primal_residual,
                dual_residual: sol.dual_residual,
                distance,
            },
        ))
    }
}

// ---------------------------------------------------------------------------
// Exhaustive reference solver (dual route for the tests)
// ---------------------------------------------------------------------------

/// Brute-force QP reference: tries every active-constraint subset in
/// lexicographic order, solves the equality-constrained system, and keeps
/// the feasible candidate with the smallest objective. Exponential in the
/// number of rows; guarded for test-sized problems only.
pub mod oracle {
    use super::*;

    pub fn solve_by_enumeration(problem: &QpProblem) -> Result<DVector<f64>> {
        let rows = problem.c.nrows();
        let n = problem.p_diag.len();
        if rows > 20 {
            return Err(Error::InvalidArgument(
                "enumeration oracle guard: more than 20 rows".into(),
            ));
        }
        let mut best: Option<(f64, DVector<f64>)> = None;
        for mask in 0..(1usize << rows) {
            let active: Vec<usize> = (0..rows).filter(|r| (mask >> r) & 1 == 1).collect();
            if active.len() > n {
                continue;
            }
            let na = active.len();
            let dim = n + na;
            let mut kkt = DMatrix::<f64>::zeros(dim, dim);
            let mut rhs = DVector::<f64>::zeros(dim);
            for i in 0..n {
                kkt[(i, i)] = problem.p_diag[i];
                rhs[i] = -problem.q[i];
            }
            for (a, &r) in active.iter().enumerate() {
                let (idx, vals) = problem.c.row(r);
                for (&j, &v) in idx.iter().zip(vals) {
                    kkt[(n + a, j)] = v;
                    kkt[(j, n + a)] = v;
                }
                rhs[n + a] = problem.h[r];
            }
            let lu = kkt.full_piv_lu();
            let Some(sol) = lu.solve(&rhs) else { continue };
            let v = sol.rows(0, n).into_owned();
            // feasibility of every row
            let mut feasible = true;
            for r in 0..rows {
                if problem.c.row_dot(r, &v) > problem.h[r] + 1e-9 {
                    feasible = false;
                    break;
                }
            }
            if !feasible {
                continue;
            }
            let obj = 0.5
                * v.iter()
                    .enumerate()
                    .map(|(i, vi)| problem.p_diag[i] * vi * vi)
                    .sum::<f64>()
                + problem.q.dot(&v);
            if best.as_ref().map_or(true, |(b, _)| obj < *b - 1e-14) {
                best = Some((obj, v));
            }
        }
        best.map(|(_, v)| v)
            .ok_or_else(|| Error::InfeasibleSet {
                max_slack: f64::NEG_INFINITY,
                condition: " (oracle: no feasible subset)".into(),
            })
    }
}
