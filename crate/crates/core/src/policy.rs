//! Disturbance-action policies and the coefficient maps that make states and
//! actions affine in the policy parameters.
//!
//! A policy `M = {M[1], ..., M[H]}` plays `u_t = -K x_t + sum_i M[i] w_{t-i}`
//! around a fixed strongly stable base gain `K`. Writing `A_K = A - B K`,
//! the state and action decompose as
//!
//! ```text
//! x_t = A_K^H x_{t-H} + xt~,   u_t = -K A_K^H x_{t-H} + ut~,
//! xt~ = sum_{k=1}^{2H} Phi_k^x(M_{t-H..t-1}) w_{t-k},
//! ut~ = -K xt~ + sum_{i=1}^H M_t[i] w_{t-i},
//! Phi_k^x = A_K^{k-1} 1{k<=H} + sum_{i=1}^H A_K^{i-1} B M_{t-i}[k-i] 1{1<=k-i<=H},
//! Phi_k^u = M_t[k] 1{k<=H} - K Phi_k^x.
//! ```
//!
//! # Index conventions (worked example, H = 3, evaluating at time t)
//!
//! Window slices are **oldest first**. For `phi_x` the slice holds the H
//! policies that shaped `xt~`:
//!
//! ```text
//! window_states = [ M_{t-3}, M_{t-2}, M_{t-1} ]   (index 0 is the oldest)
//!                     i=3       i=2       i=1     (lag i in the formula)
//! ```
//!
//! so lag `i` reads `window_states[H - i]`, and within that policy the
//! superscript `[k - i]` selects matrix number `k - i` (1-based). Spelled out
//! for `k = 4`:
//!
//! ```text
//! Phi_4^x = A_K^0 B M_{t-1}[3] + A_K^1 B M_{t-2}[2] + A_K^2 B M_{t-3}[1]
//! ```
//!
//! (`A_K^{4-1}` is absent because `k = 4 > H`.) For `phi_u` the window has
//! H+1 entries ending at the current policy: `[M_{t-3}, ..., M_t]`.
//! Disturbance lags mirror this: `lag(j)` of a [`DisturbanceRing`] is
//! `w_{t-j}`, with `w_s = 0` for `s < 0` provided by the zero-initialized
//! ring of depth `2H`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;
use crate::system::{LinearSystem, StableGain};

/// A disturbance-action policy: `H` matrices of shape m x n, 1-indexed in
/// the math (`M[i] = mats[i-1]`).
#[derive(Debug, Clone, PartialEq)]
pub struct DacPolicy {
    pub mats: Vec<DMatrix<f64>>,
}

impl DacPolicy {
    pub fn new(mats: Vec<DMatrix<f64>>) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::InvalidArgument("policy needs H >= 1".into()));
        }
        let (m, n) = (mats[0].nrows(), mats[0].ncols());
        for mat in &mats {
            if mat.nrows() != m || mat.ncols() != n {
                return Err(Error::DimensionMismatch(
                    "all policy matrices must share the same shape".into(),
                ));
            }
            if !linalg::is_finite_mat(mat) {
                return Err(Error::NonFinite("policy matrix".into()));
            }
        }
        Ok(Self { mats })
    }

    pub fn zeros(h: usize, m: usize, n: usize) -> Self {
        Self {
            mats: vec![DMatrix::zeros(m, n); h],
        }
    }

    pub fn h(&self) -> usize {
        self.mats.len()
    }

    pub fn action_dim(&self) -> usize {
        self.mats[0].nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.mats[0].ncols()
    }

    /// `M[i]` with the paper's 1-based superscript.
    pub fn mat(&self, i: usize) -> &DMatrix<f64> {
        &self.mats[i - 1]
    }

    /// Frobenius norm of the stacked parameter block.
    pub fn frob_norm(&self) -> f64 {
        self.mats.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
    }

    /// Frobenius distance to another policy of identical shape.
    pub fn frob_distance(&self, other: &DacPolicy) -> f64 {
        self.mats
            .iter()
            .zip(&other.mats)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Flatten into a coordinate vector (block i, then row-major within a
    /// block). This is the layout the lifted polytope uses for the M block.
    pub fn to_flat(&self) -> DVector<f64> {
        let (h, m, n) = (self.h(), self.action_dim(), self.state_dim());
        let mut v = DVector::zeros(h * m * n);
        for (i, mat) in self.mats.iter().enumerate() {
            for r in 0..m {
                for c in 0..n {
                    v[i * m * n + r * n + c] = mat[(r, c)];
                }
            }
        }
        v
    }

    pub fn from_flat(v: &DVector<f64>, h: usize, m: usize, n: usize) -> Result<Self> {
        if v.len() != h * m * n {
            return Err(Error::DimensionMismatch("from_flat".into()));
        }
        let mats = (0..h)
            .map(|i| {
                DMatrix::from_fn(m, n, |r, c| v[i * m * n + r * n + c])
            })
            .collect();
        DacPolicy::new(mats)
    }
}

/// An ordered window `M_{t-H}, ..., M_t` (oldest first, length H+1).
#[derive(Debug, Clone)]
pub struct PolicyWindow {
    policies: Vec<DacPolicy>,
}

impl PolicyWindow {
    pub fn new(policies: Vec<DacPolicy>) -> Result<Self> {
        if policies.len() < 2 {
            return Err(Error::InvalidArgument(
                "policy window must hold H + 1 >= 2 policies".into(),
            ));
        }
        let h = policies[0].h();
        if policies.len() != h + 1 {
            return Err(Error::DimensionMismatch(format!(
                "window with H = {} must hold {} policies, got {}",
                h,
                h + 1,
                policies.len()
            )));
        }
        if policies.iter().any(|p| p.h() != h) {
            return Err(Error::DimensionMismatch(
                "window policies must share the same H".into(),
            ));
        }
        Ok(Self { policies })
    }

    /// All window slots equal to one policy (the ring evaluation).
    pub fn constant(policy: &DacPolicy) -> Self {
        Self {
            policies: vec![policy.clone(); policy.h() + 1],
        }
    }

    pub fn h(&self) -> usize {
        self.policies[0].h()
    }

    /// The current policy `M_t`.
    pub fn current(&self) -> &DacPolicy {
        self.policies.last().unwrap()
    }

    /// The H historical policies `M_{t-H}, ..., M_{t-1}` (oldest first).
    pub fn states_window(&self) -> &[DacPolicy] {
        &self.policies[..self.policies.len() - 1]
    }

    pub fn policies(&self) -> &[DacPolicy] {
        &self.policies
    }
}

/// Precomputed closed-loop data for a `(system, gain)` pair: powers of
/// `A_K` up to `2H` and the products `A_K^i B` for `i < H`.
#[derive(Debug, Clone)]
pub struct ClosedLoop {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub gain: StableGain,
    pub a_k: DMatrix<f64>,
    pub h: usize,
    pub kappa_b: f64,
    pub w_bar: f64,
    ak_pow: Vec<DMatrix<f64>>,
    ak_pow_b: Vec<DMatrix<f64>>,
}

impl ClosedLoop {
    pub fn new(system: &LinearSystem, gain: &StableGain, h: usize) -> Result<Self> {
        if h == 0 {
            return Err(Error::InvalidArgument("H must be >= 1".into()));
        }
        if gain.k.nrows() != system.m() || gain.k.ncols() != system.n() {
            return Err(Error::DimensionMismatch("gain vs system".into()));
        }
        let a_k = &system.a - &system.b * &gain.k;
        let mut ak_pow = Vec::with_capacity(2 * h + 1);
        ak_pow.push(DMatrix::identity(system.n(), system.n()));
        for i in 1..=2 * h {
            let next = &ak_pow[i - 1] * &a_k;
            ak_pow.push(next);
        }
        let ak_pow_b = (0..h).map(|i| &ak_pow[i] * &system.b).collect();
        Ok(Self {
            a: system.a.clone(),
            b: system.b.clone(),
            gain: gain.clone(),
            a_k,
            h,
            kappa_b: system.kappa_b(),
            w_bar: system.w_bar,
            ak_pow,
            ak_pow_b,
        })
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.ncols()
    }

    /// `A_K^k`, cached for `k <= 2H`.
    pub fn ak_power(&self, k: usize) -> &DMatrix<f64> {
        &self.ak_pow[k]
    }

    /// `A_K^i B`, cached for `i < H`.
    pub fn ak_power_b(&self, i: usize) -> &DMatrix<f64> {
        &self.ak_pow_b[i]
    }

    /// Radius of the policy set `M` at lag `i` (1-based):
    /// `2 sqrt(n) kappa^3 (1-gamma)^{i-1}`.
    pub fn m_set_bound(&self, i: usize) -> f64 {
        2.0 * (self.n() as f64).sqrt()
            * self.gain.kappa.powi(3)
            * (1.0 - self.gain.gamma).powi(i as i32 - 1)
    }

    /// Smallest H satisfying the stability precondition
    /// `H >= log(2 kappa^2) / log(1/(1-gamma))`.
    pub fn min_horizon(&self) -> usize {
        min_horizon(self.gain.kappa, self.gain.gamma)
    }
}

/// `ceil(log(2 kappa^2) / log(1/(1-gamma)))`, at least 1.
pub fn min_horizon(kappa: f64, gamma: f64) -> usize {
    if gamma >= 1.0 {
        return 1;
    }
    let h = (2.0 * kappa * kappa).ln() / (1.0 / (1.0 - gamma)).ln();
    (h.ceil() as usize).max(1)
}

/// Fixed-depth ring of past disturbances, zero-initialized so that
/// `w_s = 0` for `s < 0` comes out automatically.
#[derive(Debug, Clone)]
pub struct DisturbanceRing {
    buf: Vec<DVector<f64>>,
    head: usize,
    depth: usize,
}

impl DisturbanceRing {
    pub fn new(depth: usize, dim: usize) -> Self {
        Self {
            buf: vec![DVector::zeros(dim); depth],
            head: depth - 1,
            depth,
        }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn push(&mut self, w: DVector<f64>) {
        self.head = (self.head + 1) % self.depth;
        self.buf[self.head] = w;
    }

    /// `w_{t-j}` for `1 <= j <= depth` where `t` is the time of the next
    /// `push`; immediately after pushing `w_t`, `lag(1)` returns it.
    pub fn lag(&self, j: usize) -> &DVector<f64> {
        debug_assert!(j >= 1 && j <= self.depth);
        &self.buf[(self.head + self.depth - (j - 1)) % self.depth]
    }
}

/// `Phi_k^x` for the window `M_{t-H}, ..., M_{t-1}` (oldest first).
pub fn phi_x(loop_: &ClosedLoop, k: usize, window_states: &[DacPolicy]) -> Result<DMatrix<f64>> {
    let h = loop_.h;
    if k < 1 || k > 2 * h {
        return Err(Error::InvalidArgument(format!(
            "phi_x index k = {k} outside 1..={}",
            2 * h
        )));
    }
    if window_states.len() != h {
        return Err(Error::DimensionMismatch(format!(
            "phi_x expects {} window policies, got {}",
            h,
            window_states.len()
        )));
    }
    let mut phi = if k <= h {
        loop_.ak_power(k - 1).clone()
    } else {
        DMatrix::zeros(loop_.n(), loop_.n())
    };
    for i in 1..=h {
        let j = k as isize - i as isize;
        if j >= 1 && j <= h as isize {
            // lag i is the i-th most recent entry of the oldest-first slice
            let m_ti = &window_states[h - i];
            phi += loop_.ak_power_b(i - 1) * m_ti.mat(j as usize);
        }
    }
    Ok(phi)
}

/// `Phi_k^u` for the window `M_{t-H}, ..., M_t`.
pub fn phi_u(loop_: &ClosedLoop, k: usize, window: &PolicyWindow) -> Result<DMatrix<f64>> {
    let h = loop_.h;
    if window.h() != h {
        return Err(Error::DimensionMismatch("phi_u window H".into()));
    }
    let px = phi_x(loop_, k, window.states_window())?;
    let mut phi = -&loop_.gain.k * px;
    if k <= h {
        phi += window.current().mat(k);
    }
    Ok(phi)
}

/// Both coefficient families evaluated with every slot equal to `policy`.
#[derive(Debug, Clone)]
pub struct PhiTable {
    /// `phi_x[k-1]` is the ring `Phi_k^x`, k = 1..2H.
    pub phi_x: Vec<DMatrix<f64>>,
    /// `phi_u[k-1]` is the ring `Phi_k^u`, k = 1..2H.
    pub phi_u: Vec<DMatrix<f64>>,
}

/// Evaluate `Phi_k^x`, `Phi_k^u` with every window slot tied to `policy`.
pub fn ring_phi(loop_: &ClosedLoop, policy: &DacPolicy) -> Result<PhiTable> {
    let window = PolicyWindow::constant(policy);
    let mut px = Vec::with_capacity(2 * loop_.h);
    let mut pu = Vec::with_capacity(2 * loop_.h);
    for k in 1..=2 * loop_.h {
        px.push(phi_x(loop_, k, window.states_window())?);
        pu.push(phi_u(loop_, k, &window)?);
    }
    Ok(PhiTable { phi_x: px, phi_u: pu })
}

/// `xt~ = sum_{k=1}^{2H} Phi_k^x w_{t-k}`.
pub fn approx_state(
    loop_: &ClosedLoop,
    window_states: &[DacPolicy],
    ring: &DisturbanceRing,
) -> Result<DVector<f64>> {
    if ring.depth() < 2 * loop_.h {
        return Err(Error::DimensionMismatch(
            "disturbance ring shallower than 2H".into(),
        ));
    }
    let mut x = DVector::zeros(loop_.n());
    for k in 1..=2 * loop_.h {
        let phi = phi_x(loop_, k, window_states)?;
        x += phi * ring.lag(k);
    }
    Ok(x)
}

/// `ut~ = -K xt~ + sum_{i=1}^H M_t[i] w_{t-i}`.
pub fn approx_action(
    loop_: &ClosedLoop,
    window: &PolicyWindow,
    ring: &DisturbanceRing,
) -> Result<DVector<f64>> {
    let xt = approx_state(loop_, window.states_window(), ring)?;
    let mut u = -&loop_.gain.k * xt;
    for i in 1..=loop_.h {
        u += window.current().mat(i) * ring.lag(i);
    }
    Ok(u)
}

/// The played action `u_t = -K x_t + sum_{i=1}^H M[i] w_{t-i}`.
pub fn control_action(
    gain: &StableGain,
    x: &DVector<f64>,
    policy: &DacPolicy,
    ring: &DisturbanceRing,
) -> Result<DVector<f64>> {
    if ring.depth() < policy.h() {
        return Err(Error::DimensionMismatch(
            "disturbance ring shallower than H".into(),
        ));
    }
    let mut u = -&gain.k * x;
    for i in 1..=policy.h() {
        u += policy.mat(i) * ring.lag(i);
    }
    Ok(u)
}

/// The disturbance-action surrogate of the linear controller `u = -K x`:
/// `M[i](K) = (K_base - K)(A - B K)^{i-1}`. Always lands in the policy set
/// of the base certificate.
pub fn policy_from_gain(
    target: &StableGain,
    base: &StableGain,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    h: usize,
) -> Result<DacPolicy> {
    if target.k.shape() != base.k.shape() {
        return Err(Error::DimensionMismatch("policy_from_gain".into()));
    }
    let diff = &base.k - &target.k;
    let a_target = a - b * &target.k;
    let mut mats = Vec::with_capacity(h);
    let mut pow = DMatrix::identity(a.nrows(), a.ncols());
    for i in 0..h {
        if i > 0 {
            pow = &pow * &a_target;
        }
        mats.push(&diff * &pow);
    }
    DacPolicy::new(mats)
}

/// Result of the membership check against the policy set `M`.
#[derive(Debug, Clone)]
pub struct MembershipReport {
    pub ok: bool,
    /// Minimum of `bound_i - ||M[i]||_inf` over lags (negative when violated).
    pub min_slack: f64,
    /// 1-based lag attaining the minimum slack.
    pub argmin_lag: usize,
}

/// Check `||M[i]||_inf <= 2 sqrt(n) kappa^3 (1-gamma)^{i-1}` for every lag.
pub fn in_m_set(policy: &DacPolicy, kappa: f64, gamma: f64) -> MembershipReport {
    let n = policy.state_dim() as f64;
    let mut min_slack = f64::INFINITY;
    let mut argmin_lag = 1;
    for i in 1..=policy.h() {
        let bound = 2.0 * n.sqrt() * kappa.powi(3) * (1.0 - gamma).powi(i as i32 - 1);
        let slack = bound - linalg::op_norm_inf(policy.mat(i));
        if slack < min_slack {
            min_slack = slack;
            argmin_lag = i;
        }
    }
    MembershipReport {
        ok: min_slack >= 0.0,
        min_slack,
        argmin_lag,
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::system::{certify_auto, LinearSystem};
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// A random strictly stable instance with certified base gain.
    pub fn random_instance(
        seed: u64,
        n: usize,
        m: usize,
        w_bar: f64,
    ) -> (LinearSystem, StableGain) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        loop {
            let a_raw = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
            let rho = crate::linalg::spectral_radius(&a_raw);
            let a = a_raw * (rng.random_range(0.3..0.9) / rho.max(1e-6));
            let b = DMatrix::from_fn(n, m, |_, _| rng.random_range(-1.0..1.0));
            let k = DMatrix::from_fn(m, n, |_, _| rng.random_range(-0.2..0.2));
            let sys = LinearSystem::new(a.clone(), b.clone(), w_bar).unwrap();
            match certify_auto(&a, &b, &k) {
                Ok(gain) if gain.gamma > 0.05 && gain.kappa < 25.0 => return (sys, gain),
                _ => continue,
            }
        }
    }

    /// A random policy strictly inside the policy set of `loop_`.
    pub fn random_policy_in_m(loop_: &ClosedLoop, rng: &mut ChaCha8Rng, scale: f64) -> DacPolicy {
        let (m, n, h) = (loop_.m(), loop_.n(), loop_.h);
        let mats = (1..=h)
            .map(|i| {
                let bound = loop_.m_set_bound(i);
                let raw = DMatrix::from_fn(m, n, |_, _| rng.random_range(-1.0..1.0));
                let norm = crate::linalg::op_norm_inf(&raw).max(1e-12);
                raw * (scale * bound / norm * rng.random_range(0.0..1.0))
            })
            .collect();
        DacPolicy::new(mats).unwrap()
    }

    /// Simulate the plant under a sequence of policies, returning states,
    /// actions and the disturbance sequence used.
    pub fn simulate(
        sys: &LinearSystem,
        gain: &StableGain,
        policies: &[DacPolicy],
        ws: &[DVector<f64>],
    ) -> (Vec<DVector<f64>>, Vec<DVector<f64>>) {
        let h = policies[0].h();
        let mut ring = DisturbanceRing::new(2 * h, sys.n());
        let mut x = DVector::zeros(sys.n());
        let mut xs = vec![x.clone()];
        let mut us = Vec::new();
        for (t, w) in ws.iter().enumerate() {
            let u = control_action(gain, &x, &policies[t], &ring).unwrap();
            x = &sys.a * &x + &sys.b * &u + w;
            ring.push(w.clone());
            xs.push(x.clone());
            us.push(u);
        }
        (xs, us)
    }
}
