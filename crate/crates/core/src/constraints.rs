//! Robust constraint machinery: the worst-case constraint functions `g` /
//! `ring g`, buffer-size calculus, the lifted polytope representation of the
//! search space `Omega_eps`, and worst-case margin audits.
//!
//! For box-bounded disturbances the supremum of a linear form over the
//! admissible set has the closed form
//! `sup D_i' xt~ = sum_s ||D_i' Phi_s^x||_1 * w_bar`, which is what `g_x`
//! and `g_u` evaluate. Tying every window slot to one policy gives the
//! decoupled `ring` versions, and
//!
//! ```text
//! Omega_eps = { M in M_set :  ring_g_x_i(M) <= d_x,i - eps,
//!                             ring_g_u_j(M) <= d_u,j - eps }
//! ```
//!
//! becomes a polytope in `(M, Y^x, Y^u, Z)` after dominating the absolute
//! values with auxiliary variables.

use nalgebra::{DMatrix, DVector, RowDVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::policy::{self, ClosedLoop, DacPolicy, PolicyWindow};
use crate::sparse::SparseMatrix;
use crate::system::{ConstraintSpec, LinearSystem, ProblemInstance, StableGain};

// ---------------------------------------------------------------------------
// g functions
// ---------------------------------------------------------------------------

/// All `Phi_k^x` for one window (k = 1..2H).
pub fn phi_x_table(loop_: &ClosedLoop, window_states: &[DacPolicy]) -> Result<Vec<DMatrix<f64>>> {
    (1..=2 * loop_.h)
        .map(|k| policy::phi_x(loop_, k, window_states))
        .collect()
}

/// All `Phi_k^u` for one window (k = 1..2H).
pub fn phi_u_table(loop_: &ClosedLoop, window: &PolicyWindow) -> Result<Vec<DMatrix<f64>>> {
    (1..=2 * loop_.h)
        .map(|k| policy::phi_u(loop_, k, window))
        .collect()
}

fn g_from_phis(rows: &DMatrix<f64>, phis: &[DMatrix<f64>], w_bar: f64) -> DVector<f64> {
    DVector::from_fn(rows.nrows(), |i, _| {
        phis.iter()
            .map(|phi| linalg::row_l1(&(rows.row(i) * phi)))
            .sum::<f64>()
            * w_bar
    })
}

/// `g_i^x(window) = sum_{s=1}^{2H} ||D_{x,i}' Phi_s^x||_1 w_bar` for every i.
pub fn g_x_all(
    loop_: &ClosedLoop,
    window_states: &[DacPolicy],
    dx_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<DVector<f64>> {
    Ok(g_from_phis(dx_mat, &phi_x_table(loop_, window_states)?, w_bar))
}

/// `g_j^u(window) = sum_{s=1}^{2H} ||D_{u,j}' Phi_s^u||_1 w_bar` for every j.
pub fn g_u_all(
    loop_: &ClosedLoop,
    window: &PolicyWindow,
    du_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<DVector<f64>> {
    Ok(g_from_phis(du_mat, &phi_u_table(loop_, window)?, w_bar))
}

/// Single state-constraint row of `g^x` (0-based row index).
pub fn g_x(
    loop_: &ClosedLoop,
    row: usize,
    window_states: &[DacPolicy],
    dx_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<f64> {
    if row >= dx_mat.nrows() {
        return Err(Error::InvalidArgument(format!("g_x row {row} out of range")));
    }
    Ok(g_x_all(loop_, window_states, dx_mat, w_bar)?[row])
}

/// Single action-constraint row of `g^u` (0-based row index).
pub fn g_u(
    loop_: &ClosedLoop,
    row: usize,
    window: &PolicyWindow,
    du_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<f64> {
    if row >= du_mat.nrows() {
        return Err(Error::InvalidArgument(format!("g_u row {row} out of range")));
    }
    Ok(g_u_all(loop_, window, du_mat, w_bar)?[row])
}

/// `ring g^x`: every window slot equal to `policy`.
pub fn ring_g_x_all(
    loop_: &ClosedLoop,
    policy: &DacPolicy,
    dx_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<DVector<f64>> {
    let window = PolicyWindow::constant(policy);
    g_x_all(loop_, window.states_window(), dx_mat, w_bar)
}

/// `ring g^u`: every window slot equal to `policy`.
pub fn ring_g_u_all(
    loop_: &ClosedLoop,
    policy: &DacPolicy,
    du_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<DVector<f64>> {
    let window = PolicyWindow::constant(policy);
    g_u_all(loop_, &window, du_mat, w_bar)
}

pub fn ring_g_x(
    loop_: &ClosedLoop,
    row: usize,
    policy: &DacPolicy,
    dx_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<f64> {
    Ok(ring_g_x_all(loop_, policy, dx_mat, w_bar)?[row])
}

pub fn ring_g_u(
    loop_: &ClosedLoop,
    row: usize,
    policy: &DacPolicy,
    du_mat: &DMatrix<f64>,
    w_bar: f64,
) -> Result<f64> {
    Ok(ring_g_u_all(loop_, policy, du_mat, w_bar)?[row])
}

/// Direct membership test for `Omega_eps` (ring constraints plus the policy
/// set), with `tol` of slack allowed on each row.
pub fn in_omega(
    loop_: &ClosedLoop,
    constraints: &ConstraintSpec,
    policy: &DacPolicy,
    epsilon: f64,
    tol: f64,
) -> Result<bool> {
    let report = policy::in_m_set(policy, loop_.gain.kappa, loop_.gain.gamma);
    if report.min_slack < -tol {
        return Ok(false);
    }
    let w_bar = loop_.w_bar;
    let gx = ring_g_x_all(loop_, policy, &constraints.dx_mat, w_bar)?;
    for i in 0..constraints.k_x() {
        if gx[i] > constraints.dx[i] - epsilon + tol {
            return Ok(false);
        }
    }
    let gu = ring_g_u_all(loop_, policy, &constraints.du_mat, w_bar)?;
    for j in 0..constraints.k_u() {
        if gu[j] > constraints.du[j] - epsilon + tol {
            return Ok(false);
        }
    }
    Ok(true)
}

// ---------------------------------------------------------------------------
// Buffer-size calculus
// ---------------------------------------------------------------------------

/// All derived constants of the buffer calculus for one `(system, gain, H,
/// eta)` tuple. Everything is recomputable from those inputs.
#[derive(Debug, Clone)]
pub struct BufferParams {
    pub h: usize,
    pub eta: f64,
    /// Buffer size in use; set by the caller (0 until assigned).
    pub epsilon: f64,
    pub eps1: f64,
    pub eps2: f64,
    pub eps3: f64,
    pub c1: f64,
    pub c2: f64,
    pub c3: f64,
    /// State/action norm bound `b` along rollouts with policies in the set.
    pub b_bound: f64,
    /// Lipschitz constant `L_g(H)` of the coupled constraint functions.
    pub l_g: f64,
    /// Gradient bound `G_f` of the decoupled stage costs.
    pub g_f: f64,
    /// Hidden constant used in `G_f` (the published bound is Theta-form).
    pub gf_constant: f64,
}

impl BufferParams {
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    /// Theorem-1 safety condition `eps >= eps1 + eps2`.
    pub fn safety_condition(&self) -> bool {
        self.epsilon >= self.eps1 + self.eps2
    }

    /// Theorem-1 non-emptiness condition `eps <= eps_star - eps1 - eps3`.
    pub fn nonempty_condition(&self, eps_star: f64) -> bool {
        self.epsilon <= eps_star - self.eps1 - self.eps3
    }
}

/// Evaluate the buffer constants with the `G_f` hidden constant set to 1.
///
/// `grad_bound` is the cost-gradient constant `G`. Fails when `H` sits below
/// the stability threshold `log(2 kappa^2)/log(1/(1-gamma))`.
pub fn compute_buffers(
    system: &LinearSystem,
    constraints: &ConstraintSpec,
    gain: &StableGain,
    h: usize,
    eta: f64,
    grad_bound: f64,
) -> Result<BufferParams> {
    compute_buffers_with(system, constraints, gain, h, eta, grad_bound, 1.0)
}

/// Same as [`compute_buffers`] with an explicit `G_f` hidden constant.
pub fn compute_buffers_with(
    system: &LinearSystem,
    constraints: &ConstraintSpec,
    gain: &StableGain,
    h: usize,
    eta: f64,
    grad_bound: f64,
    gf_constant: f64,
) -> Result<BufferParams> {
    let min_h = policy::min_horizon(gain.kappa, gain.gamma);
    if h < min_h {
        return Err(Error::HorizonTooShort { h, min_h });
    }
    let (n, m) = (system.n() as f64, system.m() as f64);
    let kappa = gain.kappa;
    let gamma = gain.gamma;
    let kappa_b = system.kappa_b();
    let w_bar = system.w_bar;
    let d_inf = constraints.d_inf();
    let hf = h as f64;
    let decay = (1.0 - gamma).powi(h as i32);

    let b_bound = 8.0 * (m * n * n).sqrt() * hf * w_bar * kappa.powi(6) * kappa_b / gamma;
    let l_g = w_bar * n.sqrt() * d_inf * kappa.powi(3) * kappa_b * hf.sqrt();
    let g_f = gf_constant
        * grad_bound
        * b_bound
        * (1.0 + kappa)
        * n.sqrt()
        * w_bar
        * kappa.powi(2)
        * kappa_b
        * hf.sqrt()
        * (1.0 + gamma)
        / gamma;

    let c1 = 8.0 * w_bar * kappa.powi(9) * kappa_b * d_inf / gamma;
    let eps1 = c1 * n * m.sqrt() * hf * decay;
    // eps2 in the pre-simplification form L_g * eta * G_f / gamma^2; c2 is
    // the equivalent polynomial coefficient, reported for transparency.
    let eps2 = l_g * eta * g_f / (gamma * gamma);
    let c2 = l_g * g_f / (gamma * gamma * n * n * m.sqrt() * hf * hf);
    let c3 = 2.0 * d_inf * kappa.powi(5) * w_bar / gamma;
    let eps3 = c3 * n.sqrt() * decay;

    Ok(BufferParams {
        h,
        eta,
        epsilon: 0.0,
        eps1,
        eps2,
        eps3,
        c1,
        c2,
        c3,
        b_bound,
        l_g,
        g_f,
        gf_constant,
    })
}

// ---------------------------------------------------------------------------
// Lifted polytope
// ---------------------------------------------------------------------------

/// Coordinate layout of the lifted variable `(M, Y^x, Y^u, Z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarLayout {
    pub h: usize,
    pub m: usize,
    pub n: usize,
    pub k_x: usize,
    pub k_u: usize,
}

impl VarLayout {
    pub fn m_len(&self) -> usize {
        self.h * self.m * self.n
    }

    pub fn yx_len(&self) -> usize {
        self.k_x * 2 * self.h * self.n
    }

    pub fn yu_len(&self) -> usize {
        self.k_u * 2 * self.h * self.n
    }

    pub fn z_len(&self) -> usize {
        self.h * self.m * self.n
    }

    pub fn total(&self) -> usize {
        self.m_len() + self.yx_len() + self.yu_len() + self.z_len()
    }

    /// Index of `M[i]_{r,c}` (lag `i` is 1-based; `r`, `c` are 0-based).
    pub fn m_idx(&self, i: usize, r: usize, c: usize) -> usize {
        (i - 1) * self.m * self.n + r * self.n + c
    }

    /// Index of `Y^x_{i,k,l}` (constraint row `i` 0-based, lag `k` 1-based,
    /// coordinate `l` 0-based).
    pub fn yx_idx(&self, i: usize, k: usize, l: usize) -> usize {
        self.m_len() + i * 2 * self.h * self.n + (k - 1) * self.n + l
    }

    pub fn yu_idx(&self, j: usize, k: usize, l: usize) -> usize {
        self.m_len() + self.yx_len() + j * 2 * self.h * self.n + (k - 1) * self.n + l
    }

    /// Index of `Z[i]_{r,c}` (lag `i` 1-based).
    pub fn z_idx(&self, i: usize, r: usize, c: usize) -> usize {
        self.m_len() + self.yx_len() + self.yu_len() + (i - 1) * self.m * self.n + r * self.n + c
    }
}

/// Row-family boundaries of the lifted inequality system, in build order.
#[derive(Debug, Clone, Copy)]
pub struct RowFamilies {
    /// `sum Y^x w_bar <= d_x - eps` (k_x rows)
    pub budget_x: (usize, usize),
    /// `sum Y^u w_bar <= d_u - eps` (k_u rows)
    pub budget_u: (usize, usize),
    /// `sum_j Z[i]_{k,j} <= 2 sqrt(n) kappa^3 (1-gamma)^{i-1}` (H*m rows)
    pub z_budget: (usize, usize),
    /// `+-(D_x' ring-Phi^x)_l <= Y^x` (2*k_x*2H*n rows)
    pub abs_x: (usize, usize),
    /// `+-(D_u' ring-Phi^u)_l <= Y^u` (2*k_u*2H*n rows)
    pub abs_u: (usize, usize),
    /// `+-M <= Z` (2*H*m*n rows)
    pub abs_m: (usize, usize),
}

/// The lifted polytope `{ v : C v <= h(eps) }` equivalent to `Omega_eps`.
#[derive(Debug, Clone)]
pub struct LiftedPolytope {
    pub c: SparseMatrix,
    /// Right-hand side at `eps = 0`.
    pub h0: DVector<f64>,
    /// `h(eps) = h0 - eps * eps_mask` (mask is 1 on the budget rows).
    pub eps_mask: DVector<f64>,
    pub epsilon: f64,
    pub layout: VarLayout,
    pub families: RowFamilies,
    dx_rows: DMatrix<f64>,
    du_rows: DMatrix<f64>,
}

impl LiftedPolytope {
    /// Right-hand side at the stored buffer size.
    pub fn rhs(&self) -> DVector<f64> {
        &self.h0 - self.epsilon * &self.eps_mask
    }

    /// Right-hand side at an arbitrary buffer size.
    pub fn rhs_at(&self, epsilon: f64) -> DVector<f64> {
        &self.h0 - epsilon * &self.eps_mask
    }

    /// Same constraint matrix, different buffer.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let mut p = self.clone();
        p.epsilon = epsilon;
        p
    }

    pub fn num_rows(&self) -> usize {
        self.c.nrows()
    }

    pub fn num_vars(&self) -> usize {
        self.layout.total()
    }

    /// Extract the policy from a lifted point.
    pub fn policy_of(&self, v: &DVector<f64>) -> Result<DacPolicy> {
        let l = &self.layout;
        DacPolicy::from_flat(&v.rows(0, l.m_len()).into_owned(), l.h, l.m, l.n)
    }

    /// The canonical lifted witness for a policy: `Y` and `Z` are set to the
    /// exact absolute values they dominate. Returns the point and the
    /// maximum violation of `C v <= h(eps)` (so `<= 0` iff the policy lies
    /// in `Omega_eps`).
    pub fn witness_for(&self, loop_: &ClosedLoop, policy: &DacPolicy) -> Result<(DVector<f64>, f64)> {
        let l = &self.layout;
        if policy.h() != l.h || policy.action_dim() != l.m || policy.state_dim() != l.n {
            return Err(Error::DimensionMismatch("witness_for".into()));
        }
        let mut v = DVector::zeros(l.total());
        v.rows_mut(0, l.m_len()).copy_from(&policy.to_flat());
        let table = policy::ring_phi(loop_, policy)?;
        for i in 0..l.k_x {
            for k in 1..=2 * l.h {
                let row = self.dx_row(i) * &table.phi_x[k - 1];
                for c in 0..l.n {
                    v[l.yx_idx(i, k, c)] = row[c].abs();
                }
            }
        }
        for j in 0..l.k_u {
            for k in 1..=2 * l.h {
                let row = self.du_row(j) * &table.phi_u[k - 1];
                for c in 0..l.n {
                    v[l.yu_idx(j, k, c)] = row[c].abs();
                }
            }
        }
        for i in 1..=l.h {
            for r in 0..l.m {
                for c in 0..l.n {
                    v[l.z_idx(i, r, c)] = policy.mat(i)[(r, c)].abs();
                }
            }
        }
        let mut cv = DVector::zeros(self.c.nrows());
        self.c.mul_vec(&v, &mut cv);
        let h = self.rhs();
        let viol = (0..cv.len())
            .map(|r| cv[r] - h[r])
            .fold(f64::NEG_INFINITY, f64::max);
        Ok((v, viol))
    }

    fn dx_row(&self, i: usize) -> RowDVector<f64> {
        self.dx_rows.row(i).into_owned()
    }

    fn du_row(&self, j: usize) -> RowDVector<f64> {
        self.du_rows.row(j).into_owned()
    }

    /// Dump the inequality system as text, one row per line:
    /// the coefficients followed by the right-hand side.
    pub fn write_dense(&self, out: &mut dyn std::io::Write) -> Result<()> {
        let h = self.rhs();
        let dense = self.c.to_dense();
        for r in 0..dense.nrows() {
            let mut line = String::with_capacity(dense.ncols() * 12);
            for c in 0..dense.ncols() {
                line.push_str(&format!("{:.17e} ", dense[(r, c)]));
            }
            line.push_str(&format!("{:.17e}\n", h[r]));
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Build the lifted polytope for `Omega_eps` over `(M, Y^x, Y^u, Z)`.
///
/// Valid for any real `eps` (the set may be empty for large `eps`).
pub fn build_lifted_polytope(
    instance: &ProblemInstance,
    loop_: &ClosedLoop,
    epsilon: f64,
) -> Result<LiftedPolytope> {
    let cons = &instance.constraints;
    let layout = VarLayout {
        h: loop_.h,
        m: loop_.m(),
        n: loop_.n(),
        k_x: cons.k_x(),
        k_u: cons.k_u(),
    };
    let (h, m, n) = (layout.h, layout.m, layout.n);
    let w_bar = instance.system.w_bar;
    let two_h = 2 * h;

    let n_rows = layout.k_x
        + layout.k_u
        + h * m
        + 2 * layout.k_x * two_h * n
        + 2 * layout.k_u * two_h * n
        + 2 * h * m * n;
    let mut trips: Vec<(usize, usize, f64)> = Vec::new();
    let mut h0 = DVector::zeros(n_rows);
    let mut eps_mask = DVector::zeros(n_rows);
    let mut row = 0usize;

    // F1: budget rows for the state constraints
    let budget_x = (row, row + layout.k_x);
    for i in 0..layout.k_x {
        for k in 1..=two_h {
            for l in 0..n {
                trips.push((row, layout.yx_idx(i, k, l), w_bar));
            }
        }
        h0[row] = cons.dx[i];
        eps_mask[row] = 1.0;
        row += 1;
    }
    // F2: budget rows for the action constraints
    let budget_u = (row, row + layout.k_u);
    for j in 0..layout.k_u {
        for k in 1..=two_h {
            for l in 0..n {
                trips.push((row, layout.yu_idx(j, k, l), w_bar));
            }
        }
        h0[row] = cons.du[j];
        eps_mask[row] = 1.0;
        row += 1;
    }
    // F3: Z row-sum bounds (the policy-set membership)
    let z_budget = (row, row + h * m);
    for i in 1..=h {
        for r in 0..m {
            for c in 0..n {
                trips.push((row, layout.z_idx(i, r, c), 1.0));
            }
            h0[row] = loop_.m_set_bound(i);
            row += 1;
        }
    }

    // Affine expansion of (D' ring-Phi_k^x(M))_l: constant part plus
    // coefficients on M[j]_{p,l} for j in [max(1, k-H), min(H, k-1)].
    // For the u family the row vector is D_u' and there is an extra direct
    // M[k] term plus the -K-weighted x part.
    let abs_x = (row, row + 2 * layout.k_x * two_h * n);
    for i in 0..layout.k_x {
        let d_row = cons.dx_mat.row(i).into_owned();
        for k in 1..=two_h {
            // constant: (D' A_K^{k-1})_l for k <= H
            let const_row: RowDVector<f64> = if k <= h {
                &d_row * loop_.ak_power(k - 1)
            } else {
                RowDVector::zeros(n)
            };
            // coefficient rows: r_j = D' A_K^{k-j-1} B (1 x m), j in window
            let j_lo = k.saturating_sub(h).max(1);
            let j_hi = (k - 1).min(h);
            let coefs: Vec<(usize, RowDVector<f64>)> = (j_lo..=j_hi)
                .map(|j| (j, &d_row * loop_.ak_power_b(k - j - 1)))
                .collect();
            for l in 0..n {
                for sign in [1.0f64, -1.0] {
                    for (j, r_j) in &coefs {
                        for p in 0..m {
                            if r_j[p] != 0.0 {
                                trips.push((row, layout.m_idx(*j, p, l), sign * r_j[p]));
                            }
                        }
                    }
                    trips.push((row, layout.yx_idx(i, k, l), -1.0));
                    h0[row] = -sign * const_row[l];
                    row += 1;
                }
            }
        }
    }
    let abs_u = (row, row + 2 * layout.k_u * two_h * n);
    for j_row in 0..layout.k_u {
        let d_row = cons.du_mat.row(j_row).into_owned();
        // r' = D_u' K feeds the -K Phi^x part
        let dk_row = &d_row * &loop_.gain.k;
        for k in 1..=two_h {
            let const_row: RowDVector<f64> = if k <= h {
                -(&dk_row * loop_.ak_power(k - 1))
            } else {
                RowDVector::zeros(n)
            };
            let j_lo = k.saturating_sub(h).max(1);
            let j_hi = (k - 1).min(h);
            let coefs: Vec<(usize, RowDVector<f64>)> = (j_lo..=j_hi)
                .map(|j| (j, -(&dk_row * loop_.ak_power_b(k - j - 1))))
                .collect();
            for l in 0..n {
                for sign in [1.0f64, -1.0] {
                    // direct M_t[k] term (only for k <= H)
                    if k <= h {
                        for p in 0..m {
                            if d_row[p] != 0.0 {
                                trips.push((row, layout.m_idx(k, p, l), sign * d_row[p]));
                            }
                        }
                    }
                    for (j, r_j) in &coefs {
                        for p in 0..m {
                            if r_j[p] != 0.0 {
                                trips.push((row, layout.m_idx(*j, p, l), sign * r_j[p]));
                            }
                        }
                    }
                    trips.push((row, layout.yu_idx(j_row, k, l), -1.0));
                    h0[row] = -sign * const_row[l];
                    row += 1;
                }
            }
        }
    }
    // F6: +-M <= Z
    let abs_m = (row, row + 2 * h * m * n);
    for i in 1..=h {
        for r in 0..m {
            for c in 0..n {
                for sign in [1.0f64, -1.0] {
                    trips.push((row, layout.m_idx(i, r, c), sign));
                    trips.push((row, layout.z_idx(i, r, c), -1.0));
                    h0[row] = 0.0;
                    row += 1;
                }
            }
        }
    }
    debug_assert_eq!(row, n_rows);

    Ok(LiftedPolytope {
        c: SparseMatrix::from_triplets(n_rows, layout.total(), trips),
        h0,
        eps_mask,
        epsilon,
        layout,
        families: RowFamilies {
            budget_x,
            budget_u,
            z_budget,
            abs_x,
            abs_u,
            abs_m,
        },
        dx_rows: cons.dx_mat.clone(),
        du_rows: cons.du_mat.clone(),
    })
}

// ---------------------------------------------------------------------------
// Worst-case margins
// ---------------------------------------------------------------------------

/// Certified worst-case constraint margins along a realized policy sequence.
/// Entry `<= 0` proves the row holds under every admissible disturbance.
#[derive(Debug, Clone)]
pub struct MarginReport {
    /// `state[t][i]`: upper bound on `D_{x,i}' x_t - d_{x,i}` over all
    /// admissible disturbance sequences.
    pub state: Vec<DVector<f64>>,
    /// `action[t][j]`: same for `D_{u,j}' u_t - d_{u,j}`.
    pub action: Vec<DVector<f64>>,
    pub worst: f64,
    /// `(stage, row, is_state)` attaining the worst margin.
    pub worst_at: (usize, usize, bool),
}

impl MarginReport {
    pub fn all_certified(&self) -> bool {
        self.worst <= 0.0
    }

    /// CSV dump: one line per stage with every margin column.
    pub fn write_csv(&self, out: &mut dyn std::io::Write) -> Result<()> {
        let k_x = self.state.first().map_or(0, |v| v.len());
        let k_u = self.action.first().map_or(0, |v| v.len());
        let mut header = String::from("t");
        for i in 0..k_x {
            header.push_str(&format!(",margin_x_{i}"));
        }
        for j in 0..k_u {
            header.push_str(&format!(",margin_u_{j}"));
        }
        header.push('\n');
        out.write_all(header.as_bytes())?;
        for t in 0..self.state.len() {
            let mut line = format!("{t}");
            for i in 0..k_x {
                line.push_str(&format!(",{:.17e}", self.state[t][i]));
            }
            for j in 0..k_u {
                line.push_str(&format!(",{:.17e}", self.action[t][j]));
            }
            line.push('\n');
            out.write_all(line.as_bytes())?;
        }
        Ok(())
    }
}

/// Upper-bound every constraint row at every stage of a rollout over ALL
/// admissible disturbances: transient term `||D A_K^H|| * ||x_{t-H}||`
/// (with the realized state norm when `states` is given, else the uniform
/// bound `b_fallback`) plus the window-coupled `g` value.
///
/// `policies[t]` is the policy played at stage `t`; stages before 0 reuse
/// `policies[0]` (they only multiply zero-padded disturbances).
pub fn worst_case_margins(
    loop_: &ClosedLoop,
    constraints: &ConstraintSpec,
    policies: &[DacPolicy],
    states: Option<&[DVector<f64>]>,
    b_fallback: f64,
) -> Result<MarginReport> {
    if policies.is_empty() {
        return Err(Error::InvalidArgument("empty policy sequence".into()));
    }
    let h = loop_.h;
    let w_bar = loop_.w_bar;
    let t_len = policies.len();
    let ak_h = loop_.ak_power(h);
    // transient coefficients per row
    let tx: Vec<f64> = (0..constraints.k_x())
        .map(|i| (constraints.dx_mat.row(i) * ak_h).norm())
        .collect();
    let ku_mat = &loop_.gain.k;
    let tu: Vec<f64> = (0..constraints.k_u())
        .map(|j| (constraints.du_mat.row(j) * ku_mat * ak_h).norm())
        .collect();

    let pol_at = |t: isize| -> &DacPolicy {
        if t < 0 {
            &policies[0]
        } else {
            &policies[t as usize]
        }
    };

    let mut state_margins = Vec::with_capacity(t_len);
    let mut action_margins = Vec::with_capacity(t_len);
    let mut worst = f64::NEG_INFINITY;
    let mut worst_at = (0, 0, true);
    for t in 0..t_len {
        let xnorm_past = if t >= h {
            match states {
                Some(xs) => xs[t - h].norm(),
                None => b_fallback,
            }
        } else {
            0.0 // states at negative time are identically zero
        };
        // state constraint at stage t uses window M_{t-H} .. M_{t-1}
        let window_x: Vec<DacPolicy> = (0..h)
            .map(|j| pol_at(t as isize - h as isize + j as isize).clone())
            .collect();
        let gx = g_x_all(loop_, &window_x, &constraints.dx_mat, w_bar)?;
        let mx = DVector::from_fn(constraints.k_x(), |i, _| {
            tx[i] * xnorm_past + gx[i] - constraints.dx[i]
        });
        // action constraint at stage t uses window M_{t-H} .. M_t
        let mut wp = window_x.clone();
        wp.push(policies[t].clone());
        let window_u = PolicyWindow::new(wp)?;
        let gu = g_u_all(loop_, &window_u, &constraints.du_mat, w_bar)?;
        let mu = DVector::from_fn(constraints.k_u(), |j, _| {
            tu[j] * xnorm_past + gu[j] - constraints.du[j]
        });
        for i in 0..mx.len() {
            if mx[i] > worst {
                worst = mx[i];
                worst_at = (t, i, true);
            }
        }
        for j in 0..mu.len() {
            if mu[j] > worst {
                worst = mu[j];
                worst_at = (t, j, false);
            }
        }
        state_margins.push(mx);
        action_margins.push(mu);
    }
    Ok(MarginReport {
        state: state_margins,
        action: action_margins,
        worst,
        worst_at,
    })
}

// ---------------------------------------------------------------------------
// Strict-safety probe for linear gains
// ---------------------------------------------------------------------------

/// Result of probing Assumption 3 on a grid of candidate linear gains.
#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub eps_star: f64,
    pub k_star: StableGain,
    /// Number of grid candidates that were certified and safe.
    pub admissible: usize,
}

/// Worst-case constraint values of the pure linear loop `u = -K x` over all
/// admissible disturbances: exact geometric sums
/// `sup_t sup_w D_i' x_t = sum_{s>=1} ||D_i' A_K^{s-1}||_1 w_bar`.
pub fn linear_loop_worst_case(
    system: &LinearSystem,
    constraints: &ConstraintSpec,
    gain: &StableGain,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let a_k = &system.a - &system.b * &gain.k;
    let rho = linalg::spectral_radius(&a_k);
    if rho >= 1.0 {
        return Err(Error::UnstableClosedLoop { rho });
    }
    let n = system.n();
    let mut worst_x = DVector::zeros(constraints.k_x());
    let mut worst_u = DVector::zeros(constraints.k_u());
    // rows propagated through powers of A_K
    let mut dx_pow = constraints.dx_mat.clone();
    let mut du_pow: DMatrix<f64> = &constraints.du_mat * &gain.k;
    let scale = (n as f64).sqrt() * system.w_bar;
    for s in 0..200_000 {
        let mut step = 0.0f64;
        for i in 0..worst_x.len() {
            let add = linalg::row_l1(&dx_pow.row(i).into_owned()) * system.w_bar;
            worst_x[i] += add;
            step = step.max(add);
        }
        for j in 0..worst_u.len() {
            let add = linalg::row_l1(&du_pow.row(j).into_owned()) * system.w_bar;
            worst_u[j] += add;
            step = step.max(add);
        }
        dx_pow *= &a_k;
        du_pow *= &a_k;
        // conservative tail bound from the certificate
        let tail = gain.kappa.powi(2)
            * (1.0 - gain.gamma).powi(s as i32 + 1)
            * scale
            * constraints.d_inf()
            / gain.gamma.max(1e-12);
        if tail < 1e-13 && step < 1e-13 {
            break;
        }
    }
    Ok((worst_x, worst_u))
}

/// Probe the strict-safety level of Assumption 3: for every candidate gain
/// that certifies at the instance's `(kappa, gamma)`, compute the largest
/// uniform tightening it survives, and return the maximizer.
pub fn epsilon_star_probe(
    system: &LinearSystem,
    constraints: &ConstraintSpec,
    kappa: f64,
    gamma: f64,
    candidates: &[DMatrix<f64>],
) -> Result<ProbeResult> {
    let mut best: Option<(f64, StableGain)> = None;
    let mut admissible = 0usize;
    for k in candidates {
        let gain = match crate::system::certify_strong_stability(&system.a, &system.b, k, kappa, gamma)
        {
            Ok(g) => g,
            Err(_) => continue,
        };
        let (wx, wu) = linear_loop_worst_case(system, constraints, &gain)?;
        let mut eps = f64::INFINITY;
        for i in 0..constraints.k_x() {
            eps = eps.min(constraints.dx[i] - wx[i]);
        }
        for j in 0..constraints.k_u() {
            eps = eps.min(constraints.du[j] - wu[j]);
        }
        if eps > 0.0 {
            admissible += 1;
            if best.as_ref().map_or(true, |(b, _)| eps > *b) {
                best = Some((eps, gain));
            }
        }
    }
    match best {
        Some((eps_star, k_star)) => Ok(ProbeResult {
            eps_star,
            k_star,
            admissible,
        }),
        None => Err(Error::AssumptionViolated(
            "no candidate gain is strictly safe on this instance (Assumption 3 unverifiable)"
                .into(),
        )),
    }
}

/// Uniform grid of scalar gains, handy for scalar instances.
pub fn scalar_gain_grid(lo: f64, hi: f64, count: usize) -> Vec<DMatrix<f64>> {
    (0..count)
        .map(|i| {
            let k = lo + (hi - lo) * i as f64 / (count.max(2) - 1) as f64;
            DMatrix::from_row_slice(1, 1, &[k])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::test_support::{random_instance, random_policy_in_m, simulate};
    use crate::policy::DisturbanceRing;
    use crate::system::{build_hvac_instance, certify_auto, HvacConfig};
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loop(a: f64, b: f64, k: f64, w_bar: f64, h: usize) -> (LinearSystem, ClosedLoop) {
        let sys = LinearSystem::new(
            DMatrix::from_row_slice(1, 1, &[a]),
            DMatrix::from_row_slice(1, 1, &[b]),
            w_bar,
        )
        .unwrap();
        let gain = certify_auto(&sys.a, &sys.b, &DMatrix::from_row_slice(1, 1, &[k])).unwrap();
        let lp = ClosedLoop::new(&sys, &gain, h).unwrap();
        (sys, lp)
    }

    #[test]
    fn g_x_trivial_and_hand_cases() {
        // w_bar = 0 kills everything
        let (_, lp0) = scalar_loop(0.9, -0.6, 0.0, 0.0, 2);
        let zeros = vec![DacPolicy::zeros(2, 1, 1); 2];
        let d = DMatrix::from_row_slice(1, 1, &[1.0]);
        assert_relative_eq!(g_x(&lp0, 0, &zeros, &d, 0.0).unwrap(), 0.0);

        // A_K = 0.9, H = 2, zero policies, D = 1, w_bar = 1.2:
        // 1.2 * (1 + 0.9) = 2.28
        let (_, lp) = scalar_loop(0.9, -0.6, 0.0, 1.2, 2);
        assert_relative_eq!(g_x(&lp, 0, &zeros, &d, 1.2).unwrap(), 2.28, epsilon = 1e-12);

        // zero policies with K = 0 make g_u vanish
        let win = PolicyWindow::constant(&DacPolicy::zeros(2, 1, 1));
        assert_relative_eq!(g_u(&lp, 0, &win, &d, 1.2).unwrap(), 0.0);
    }

    /// Brute-force supremum of `D_row' xt~` (or `D_row' ut~`) by enumerating
    /// every sign pattern of the last 2H disturbances and simulating the
    /// plant directly; completely independent of the Phi machinery.
    fn oracle_sup(
        sys: &LinearSystem,
        loop_: &ClosedLoop,
        window: &[DacPolicy],
        current: Option<&DacPolicy>,
        d_row: &RowDVector<f64>,
    ) -> f64 {
        let h = loop_.h;
        let n = sys.n();
        let t = 2 * h;
        let bits = t * n;
        assert!(bits <= 12, "oracle dimension guard");
        let mut best = f64::NEG_INFINITY;
        for pattern in 0..(1usize << bits) {
            // disturbance at stage s (= lag t - s) gets the bits [s*n, (s+1)*n)
            let ws: Vec<DVector<f64>> = (0..t + 1)
                .map(|s| {
                    if s < t {
                        DVector::from_fn(n, |c, _| {
                            if (pattern >> (s * n + c)) & 1 == 1 {
                                sys.w_bar
                            } else {
                                -sys.w_bar
                            }
                        })
                    } else {
                        DVector::zeros(n) // w_t itself never matters here
                    }
                })
                .collect();
            // policy timeline: stages t-H..t-1 play the window, before that
            // the oldest window entry (its actions only see enumerated w's
            // through x, which the A_K^H term removes), stage t the current.
            let policies: Vec<DacPolicy> = (0..=t)
                .map(|s| {
                    if s >= t - h && s < t {
                        window[s - (t - h)].clone()
                    } else if s == t {
                        current.cloned().unwrap_or_else(|| window[0].clone())
                    } else {
                        window[0].clone()
                    }
                })
                .collect();
            let (xs, us) = simulate(sys, &loop_.gain, &policies, &ws);
            let val = match current {
                None => {
                    let xt = &xs[t] - loop_.ak_power(h) * &xs[t - h];
                    (d_row * xt)[0]
                }
                Some(_) => {
                    let ut = &us[t] + &loop_.gain.k * (loop_.ak_power(h) * &xs[t - h]);
                    (d_row * ut)[0]
                }
            };
            best = best.max(val);
        }
        best
    }

    #[test]
    fn g_matches_sign_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for trial in 0..12 {
            // keep 2H*n <= 12
            let (n, h) = match trial % 3 {
                0 => (1, 3),
                1 => (2, 3),
                _ => (3, 2),
            };
            let m = rng.random_range(1..=2);
            let (sys, gain) = random_instance(9000 + trial, n, m, 0.7);
            let lp = ClosedLoop::new(&sys, &gain, h).unwrap();
            let window: Vec<DacPolicy> =
                (0..h).map(|_| random_policy_in_m(&lp, &mut rng, 0.7)).collect();
            let current = random_policy_in_m(&lp, &mut rng, 0.7);
            let dx = DMatrix::from_fn(1, n, |_, _| rng.random_range(-1.0..1.0));
            let du = DMatrix::from_fn(1, m, |_, _| rng.random_range(-1.0..1.0));

            let gx = g_x(&lp, 0, &window, &dx, sys.w_bar).unwrap();
            let ox = oracle_sup(&sys, &lp, &window, None, &dx.row(0).into_owned());
            assert!(
                (gx - ox).abs() <= 1e-9 * (1.0 + ox.abs()),
                "g_x {gx} vs oracle {ox}"
            );

            let mut wp = window.clone();
            wp.push(current.clone());
            let pw = PolicyWindow::new(wp).unwrap();
            let gu = g_u(&lp, 0, &pw, &du, sys.w_bar).unwrap();
            let ou = oracle_sup(&sys, &lp, &window, Some(&current), &du.row(0).into_owned());
            assert!(
                (gu - ou).abs() <= 1e-9 * (1.0 + ou.abs()),
                "g_u {gu} vs oracle {ou}"
            );
        }
    }

    #[test]
    fn ring_g_equals_slotwise_g() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (sys, gain) = random_instance(4242, 2, 1, 0.9);
        let lp = ClosedLoop::new(&sys, &gain, 3).unwrap();
        let pol = random_policy_in_m(&lp, &mut rng, 0.8);
        let dx = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let window = vec![pol.clone(); 3];
        for i in 0..2 {
            assert_relative_eq!(
                ring_g_x(&lp, i, &pol, &dx, sys.w_bar).unwrap(),
                g_x(&lp, i, &window, &dx, sys.w_bar).unwrap(),
                epsilon = 1e-12
            );
        }
        let du = DMatrix::from_fn(1, 1, |_, _| rng.random_range(-1.0..1.0));
        let pw = PolicyWindow::constant(&pol);
        assert_relative_eq!(
            ring_g_u(&lp, 0, &pol, &du, sys.w_bar).unwrap(),
            g_u(&lp, 0, &pw, &du, sys.w_bar).unwrap(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn buffer_constants_trivial_cases() {
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        // w_bar = 0 zeroes every epsilon
        let mut sys0 = inst.system.clone();
        sys0.w_bar = 0.0;
        let b0 = compute_buffers(&sys0, &inst.constraints, &inst.base_gain, 7, 0.05, 8.0).unwrap();
        assert_eq!(b0.eps1, 0.0);
        assert_eq!(b0.eps2, 0.0);
        assert_eq!(b0.eps3, 0.0);
        // eta = 0 zeroes eps2 only
        let b1 =
            compute_buffers(&inst.system, &inst.constraints, &inst.base_gain, 7, 0.0, 8.0).unwrap();
        assert_eq!(b1.eps2, 0.0);
        assert!(b1.eps1 > 0.0 && b1.eps3 > 0.0);
        // below the stability threshold -> error
        assert!(matches!(
            compute_buffers(&inst.system, &inst.constraints, &inst.base_gain, 1, 0.0, 8.0),
            Err(Error::HorizonTooShort { .. })
        ));
    }

    #[test]
    fn c2_polynomial_equals_closed_form() {
        // with b pinned to its closed form, c2 collapses to
        // 8 G wbar^3 Dmax (1+kappa)(1+gamma) kappa^11 kappaB^3 / gamma^4
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        let g = 8.0;
        let bp = compute_buffers(&inst.system, &inst.constraints, &inst.base_gain, 7, 0.01, g)
            .unwrap();
        let (kappa, gamma) = (inst.base_gain.kappa, inst.base_gain.gamma);
        let kb = inst.system.kappa_b();
        let dmax = inst.constraints.d_inf();
        let w = inst.system.w_bar;
        let c2_closed = 8.0 * g * w.powi(3) * dmax * (1.0 + kappa) * (1.0 + gamma)
            * kappa.powi(11)
            * kb.powi(3)
            / gamma.powi(4);
        assert_relative_eq!(bp.c2, c2_closed, epsilon = 1e-9);
        // eps2 agrees through both routes
        assert_relative_eq!(
            bp.eps2,
            bp.c2 * bp.eta * 1.0 * 1.0 * 49.0,
            epsilon = 1e-9
        );
    }

    #[test]
    fn buffer_monotonicity_grids() {
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        let gamma = inst.base_gain.gamma;
        let h_floor = (1.0 / gamma).ceil() as usize;
        let mut prev: Option<(f64, f64)> = None;
        for h in h_floor.max(2)..h_floor + 10 {
            let bp = compute_buffers(&inst.system, &inst.constraints, &inst.base_gain, h, 0.01, 8.0)
                .unwrap();
            if let Some((e1, e3)) = prev {
                assert!(bp.eps1 <= e1 + 1e-12, "eps1 not decreasing at H={h}");
                assert!(bp.eps3 <= e3 + 1e-12, "eps3 not decreasing at H={h}");
            }
            prev = Some((bp.eps1, bp.eps3));
        }
        // eps2 linear in eta
        let b_a = compute_buffers(&inst.system, &inst.constraints, &inst.base_gain, 7, 0.02, 8.0)
            .unwrap();
        let b_b = compute_buffers(&inst.system, &inst.constraints, &inst.base_gain, 7, 0.04, 8.0)
            .unwrap();
        assert_relative_eq!(2.0 * b_a.eps2, b_b.eps2, epsilon = 1e-12);
    }

    #[test]
    fn lifted_polytope_equivalence_with_direct_membership() {
        // Lemma-11 equivalence, both directions, on randomized policies:
        // the canonical witness violates nothing iff the ring constraints
        // and the policy-set bounds hold directly.
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        let lp = ClosedLoop::new(&inst.system, &inst.base_gain, 3).unwrap();
        let poly = build_lifted_polytope(&inst, &lp, 0.04).unwrap();
        let mut seen_in = false;
        let mut seen_out = false;
        for _ in 0..60 {
            let scale = rng.random_range(0.05..2.0);
            let pol = random_policy_in_m(&lp, &mut rng, scale);
            let direct = in_omega(&lp, &inst.constraints, &pol, 0.04, 0.0).unwrap();
            let (_, viol) = poly.witness_for(&lp, &pol).unwrap();
            assert_eq!(direct, viol <= 1e-12, "direct {direct} vs witness viol {viol}");
            seen_in |= direct;
            seen_out |= !direct;
        }
        assert!(seen_in && seen_out, "test should exercise both sides");
    }

    #[test]
    fn lifted_polytope_shape_and_eps_behaviour() {
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        let lp = ClosedLoop::new(&inst.system, &inst.base_gain, 7).unwrap();
        let poly = build_lifted_polytope(&inst, &lp, 0.04).unwrap();
        let l = &poly.layout;
        assert_eq!(l.total(), 7 + 2 * 14 + 2 * 14 + 7);
        assert_eq!(poly.num_rows(), 2 + 2 + 7 + 56 + 56 + 14);
        // Z budget rows carry the policy-set radius
        let (z_lo, _) = poly.families.z_budget;
        for i in 1..=7 {
            assert_relative_eq!(poly.h0[z_lo + i - 1], lp.m_set_bound(i), epsilon = 1e-12);
        }
        // zero policy: in Omega for small eps on this instance fails the
        // x-budget (g = 1.714 > 2 - eps only when eps > 0.286), so:
        let zero = DacPolicy::zeros(7, 1, 1);
        assert!(in_omega(&lp, &inst.constraints, &zero, 0.04, 0.0).unwrap());
        assert!(!in_omega(&lp, &inst.constraints, &zero, 0.4, 0.0).unwrap());
        // eps beyond every budget empties the set at the zero policy
        let (_, viol_big) = poly
            .with_epsilon(2.0 * inst.constraints.dx.max())
            .witness_for(&lp, &zero)
            .unwrap();
        assert!(viol_big > 0.0);
        // monotonicity of the rhs in eps
        let h_small = poly.rhs_at(0.04);
        let h_large = poly.rhs_at(0.4);
        for r in 0..poly.num_rows() {
            assert!(h_large[r] <= h_small[r] + 1e-15);
        }
    }

    #[test]
    fn omega_monotone_in_eps() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        let lp = ClosedLoop::new(&inst.system, &inst.base_gain, 4).unwrap();
        for _ in 0..40 {
            let scale = rng.random_range(0.05..1.5);
            let pol = random_policy_in_m(&lp, &mut rng, scale);
            let eps_hi = rng.random_range(0.0..0.6);
            let eps_lo = rng.random_range(-0.2..eps_hi);
            if in_omega(&lp, &inst.constraints, &pol, eps_hi, 0.0).unwrap() {
                assert!(in_omega(&lp, &inst.constraints, &pol, eps_lo, 0.0).unwrap());
            }
        }
    }

    #[test]
    fn g_lipschitz_property() {
        // |g(W) - g(W')| <= L_g sum_k (1-gamma)^{k-1} ||M_{t-k} - M'_{t-k}||_F
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (sys, gain) = random_instance(777, 2, 1, 0.8);
        let h = 4;
        let lp = ClosedLoop::new(&sys, &gain, h).unwrap();
        let dx = DMatrix::from_fn(2, 2, |_, _| rng.random_range(-1.0..1.0));
        let cons = ConstraintSpec::new(
            dx.clone(),
            DVector::from_vec(vec![10.0, 10.0]),
            DMatrix::from_fn(1, 1, |_, _| 1.0),
            DVector::from_vec(vec![10.0]),
        )
        .unwrap();
        let l_g = sys.w_bar
            * (sys.n() as f64).sqrt()
            * cons.d_inf()
            * gain.kappa.powi(3)
            * sys.kappa_b()
            * (h as f64).sqrt();
        for _ in 0..20 {
            let w1: Vec<DacPolicy> =
                (0..h).map(|_| random_policy_in_m(&lp, &mut rng, 0.9)).collect();
            let w2: Vec<DacPolicy> =
                (0..h).map(|_| random_policy_in_m(&lp, &mut rng, 0.9)).collect();
            let g1 = g_x_all(&lp, &w1, &dx, sys.w_bar).unwrap();
            let g2 = g_x_all(&lp, &w2, &dx, sys.w_bar).unwrap();
            // oldest-first slice: M_{t-k} = window[h - k]
            let rhs: f64 = (1..=h)
                .map(|k| {
                    (1.0 - gain.gamma).powi(k as i32 - 1)
                        * w1[h - k].frob_distance(&w2[h - k])
                })
                .sum::<f64>()
                * l_g;
            for i in 0..2 {
                assert!(
                    (g1[i] - g2[i]).abs() <= rhs * (1.0 + 1e-9),
                    "row {i}: {} > {}",
                    (g1[i] - g2[i]).abs(),
                    rhs
                );
            }
        }
    }

    #[test]
    fn margins_with_zero_disturbance_equal_minus_d() {
        let mut cfg = HvacConfig::paper();
        cfg.w_amplitude = 0.0;
        let inst = build_hvac_instance(&cfg).unwrap();
        let lp = ClosedLoop::new(&inst.system, &inst.base_gain, 3).unwrap();
        let zero = DacPolicy::zeros(3, 1, 1);
        let policies = vec![zero; 10];
        let states = vec![DVector::zeros(1); 10];
        let rep =
            worst_case_margins(&lp, &inst.constraints, &policies, Some(&states), 0.0).unwrap();
        for t in 0..10 {
            for i in 0..2 {
                assert_relative_eq!(rep.state[t][i], -inst.constraints.dx[i], epsilon = 1e-12);
                assert_relative_eq!(rep.action[t][i], -inst.constraints.du[i], epsilon = 1e-12);
            }
        }
        assert!(rep.all_certified());
    }

    #[test]
    fn oversized_policy_shows_positive_margin_and_adversarial_violation() {
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        let h = 3;
        let lp = ClosedLoop::new(&inst.system, &inst.base_gain, h).unwrap();
        // scale a feasible deadbeat-like policy far past the boundary
        let pol = DacPolicy::new(vec![
            DMatrix::from_row_slice(1, 1, &[3.0]),
            DMatrix::from_row_slice(1, 1, &[0.0]),
            DMatrix::from_row_slice(1, 1, &[0.0]),
        ])
        .unwrap();
        let policies = vec![pol.clone(); 12];
        let rep = worst_case_margins(&lp, &inst.constraints, &policies, None, 0.0).unwrap();
        assert!(rep.worst > 0.0);
        // and an adversarial-sign disturbance realization actually violates.
        // ring-Phi signs for this policy are (+, -, -, ...), so feed -w_bar
        // for a stretch and flip to +w_bar at the final lag.
        let mut ring = DisturbanceRing::new(2 * h, 1);
        let mut x = DVector::zeros(1);
        let mut worst_x: f64 = 0.0;
        for t in 0..10 {
            let u = policy::control_action(&lp.gain, &x, &pol, &ring).unwrap();
            let sign = if t == 8 { 1.0 } else { -1.0 };
            let w = DVector::from_vec(vec![sign * inst.system.w_bar]);
            x = &inst.system.a * &x + &inst.system.b * &u + &w;
            ring.push(w);
            worst_x = worst_x.max(x[0].abs());
        }
        assert!(
            worst_x > inst.constraints.dx[0],
            "adversarial rollout should breach the box, got {worst_x}"
        );
    }

    #[test]
    fn probe_zero_disturbance_gives_min_d() {
        let mut cfg = HvacConfig::paper();
        cfg.w_amplitude = 0.0;
        let inst = build_hvac_instance(&cfg).unwrap();
        let grid = scalar_gain_grid(-1.5, 1.5, 61);
        let probe = epsilon_star_probe(
            &inst.system,
            &inst.constraints,
            inst.base_gain.kappa,
            inst.base_gain.gamma,
            &grid,
        )
        .unwrap();
        assert_relative_eq!(probe.eps_star, 2.0, epsilon = 1e-12); // min(dx, du) entries
    }

    #[test]
    fn probe_scalar_hvac_matches_geometric_closed_form() {
        let cfg = HvacConfig::paper();
        let inst = build_hvac_instance(&cfg).unwrap();
        let grid = scalar_gain_grid(-2.5, 2.5, 501);
        let probe = epsilon_star_probe(
            &inst.system,
            &inst.constraints,
            inst.base_gain.kappa,
            inst.base_gain.gamma,
            &grid,
        )
        .unwrap();
        // independent arithmetic: for scalar K, sup |x| = w/(1-|a_K|),
        // sup |u| = |K| sup |x|; admissible iff |a_K| <= 1-gamma, |K| <= kappa
        let mut best = f64::NEG_INFINITY;
        for k in &grid {
            let kv = k[(0, 0)];
            let ak = 0.9 + 0.6 * kv;
            if ak.abs() > 1.0 - inst.base_gain.gamma + 1e-12 || kv.abs() > inst.base_gain.kappa {
                continue;
            }
            let sx = 1.2 / (1.0 - ak.abs());
            let su = kv.abs() * sx;
            let eps = (2.0 - sx).min(2.5 - su);
            best = best.max(eps);
        }
        assert_relative_eq!(probe.eps_star, best, epsilon = 1e-9);
        assert!(probe.eps_star > 0.7 && probe.eps_star < 0.72);
        // unstable candidates were excluded: K = 1.0 gives a_K = 1.5
        let unstable_only = vec![DMatrix::from_row_slice(1, 1, &[1.0])];
        assert!(epsilon_star_probe(
            &inst.system,
            &inst.constraints,
            inst.base_gain.kappa,
            inst.base_gain.gamma,
            &unstable_only
        )
        .is_err());
    }
}
