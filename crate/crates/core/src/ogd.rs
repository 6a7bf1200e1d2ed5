//! The OGD-BZ driver: online gradient descent over disturbance-action
//! policies with projection onto the buffered constraint set.
//!
//! Each stage plays `u_t = -K x_t + sum_i M_t[i] w_{t-i}`, recovers the
//! disturbance from the observed next state, and updates
//! `M_{t+1} = Proj[ M_t - eta_t * grad f_t(M_t) ]`, where `f_t` ties every
//! window slot of the surrogate state/action to the current policy and is
//! evaluated at the realized disturbances.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::constraints::{self, BufferParams, LiftedPolytope};
use crate::error::{Error, Result};
use crate::policy::{self, ClosedLoop, DacPolicy, DisturbanceRing};
use crate::qp::{solve_feasibility_lp, OmegaProjector};
use crate::sim::DisturbanceSource;
use crate::system::ProblemInstance;

// ---------------------------------------------------------------------------
// Cost streams
// ---------------------------------------------------------------------------

/// Stage costs `c_t(x, u)`, convex and differentiable, revealed after the
/// action at stage `t` is played. `grad_bound` is the constant `G` with
/// `||grad_x c|| <= G b`, `||grad_u c|| <= G b` on norm-`b` balls.
pub trait CostStream: Send + Sync {
    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64;
    fn grad_x(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_u(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn grad_bound(&self) -> f64;
}

/// `c_t(x, u) = q_t ||x||^2 + r_t ||u||^2` with per-stage weights.
#[derive(Debug, Clone)]
pub struct QuadraticCostStream {
    q: Vec<f64>,
    r: Vec<f64>,
}

impl QuadraticCostStream {
    pub fn new(q: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        if q.len() != r.len() || q.is_empty() {
            return Err(Error::DimensionMismatch("cost stream lengths".into()));
        }
        if q.iter().chain(r.iter()).any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::InvalidArgument(
                "cost weights must be finite and nonnegative".into(),
            ));
        }
        Ok(Self { q, r })
    }

    /// Constant state weight, action weights drawn i.i.d. from
    /// `Unif(r_min, r_max)` with a dedicated sub-seed so the cost randomness
    /// replays independently of the disturbances.
    pub fn random_r(
        len: usize,
        q_weight: f64,
        r_min: f64,
        r_max: f64,
        cost_seed: u64,
    ) -> Result<Self> {
        use rand::Rng;
        use rand_chacha::rand_core::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cost_seed);
        let r: Vec<f64> = (0..len).map(|_| rng.random_range(r_min..r_max)).collect();
        Self::new(vec![q_weight; len], r)
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn weights(&self, t: usize) -> (f64, f64) {
        (self.q[t.min(self.q.len() - 1)], self.r[t.min(self.r.len() - 1)])
    }
}

impl CostStream for QuadraticCostStream {
    fn value(&self, t: usize, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let (q, r) = self.weights(t);
        q * x.norm_squared() + r * u.norm_squared()
    }

    fn grad_x(&self, t: usize, x: &DVector<f64>, _u: &DVector<f64>) -> DVector<f64> {
        let (q, _) = self.weights(t);
        2.0 * q * x
    }

    fn grad_u(&self, t: usize, _x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (_, r) = self.weights(t);
        2.0 * r * u
    }

    fn grad_bound(&self) -> f64 {
        let qm = self.q.iter().cloned().fold(0.0, f64::max);
        let rm = self.r.iter().cloned().fold(0.0, f64::max);
        2.0 * qm.max(rm)
    }
}

// ---------------------------------------------------------------------------
// Parameters and schedules
// ---------------------------------------------------------------------------

/// Stepsize schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EtaSchedule {
    Constant(f64),
    /// `eta_t = scale * max(t + 1, floor)^{-1/2}`.
    Diminishing { scale: f64, floor: usize },
}

impl EtaSchedule {
    /// The published experiment's schedule: `0.5 * max(t+1, 40)^{-1/2}`.
    pub fn paper() -> Self {
        EtaSchedule::Diminishing {
            scale: 0.5,
            floor: 40,
        }
    }

    pub fn at(&self, t: usize) -> f64 {
        match *self {
            EtaSchedule::Constant(eta) => eta,
            EtaSchedule::Diminishing { scale, floor } => {
                scale / (((t + 1).max(floor)) as f64).sqrt()
            }
        }
    }

    /// Largest stepsize over the horizon (what the eps2 bound is evaluated
    /// at; for diminishing schedules this extrapolates the constant-step
    /// analysis and is flagged in run metadata).
    pub fn max_eta(&self) -> f64 {
        match *self {
            EtaSchedule::Constant(eta) => eta,
            EtaSchedule::Diminishing { scale, floor } => scale / (floor.max(1) as f64).sqrt(),
        }
    }
}

/// Evaluation of the two Theorem-1 conditions for a parameter choice. Both
/// are recorded, never silently assumed.
#[derive(Debug, Clone, Copy)]
pub struct TheoremFlags {
    /// `H >= log(2 kappa^2)/log(1/(1-gamma))`.
    pub h_ok: bool,
    /// Safety condition `eps >= eps1 + eps2` (eps2 at the largest stepsize).
    pub safety: bool,
    /// Non-emptiness condition `eps <= eps_star - eps1 - eps3`, when an
    /// `eps_star` estimate is available.
    pub nonempty: Option<bool>,
    pub eps_star: Option<f64>,
}

impl TheoremFlags {
    /// True when every certified-safety precondition is known to hold.
    pub fn certified(&self) -> bool {
        self.h_ok && self.safety
    }
}

#[derive(Debug, Clone)]
pub struct OgdBzParams {
    pub h: usize,
    pub epsilon: f64,
    pub eta: EtaSchedule,
    pub buffers: BufferParams,
    pub flags: TheoremFlags,
    pub seed: u64,
}

impl OgdBzParams {
    /// Assemble parameters from explicit `(H, epsilon, eta)`, evaluating the
    /// buffer calculus and the Theorem-1 flags.
    pub fn manual(
        instance: &ProblemInstance,
        h: usize,
        epsilon: f64,
        eta: EtaSchedule,
        grad_bound: f64,
        eps_star: Option<f64>,
        seed: u64,
    ) -> Result<Self> {
        let buffers = constraints::compute_buffers(
            &instance.system,
            &instance.constraints,
            &instance.base_gain,
            h,
            eta.max_eta(),
            grad_bound,
        )?
        .with_epsilon(epsilon);
        let min_h = policy::min_horizon(instance.base_gain.kappa, instance.base_gain.gamma);
        let flags = TheoremFlags {
            h_ok: h >= min_h,
            safety: buffers.safety_condition(),
            nonempty: eps_star.map(|s| buffers.nonempty_condition(s)),
            eps_star,
        };
        Ok(Self {
            h,
            epsilon,
            eta,
            buffers,
            flags,
            seed,
        })
    }
}

/// Parameter-selection mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectMode {
    /// Safety-first: `eps = eps_star/2`, `eta <= eps_star/(8 c2 n^2 sqrt(m) H^2)`,
    /// H large enough for both Theorem-1 conditions.
    Theorem1,
    /// Regret-oriented: `H ~ log(8 (c1+c2) n sqrt(m) T / eps_star)`,
    /// `eta = 1/(n^2 sqrt(m) H sqrt(T))`, `eps = eps1 + eps2`.
    Corollary2,
}

/// Choose `(H, eta, eps)` from the closed-form schedules. The returned flags
/// record which Theorem-1 conditions the selection actually satisfies.
pub fn select_parameters(
    instance: &ProblemInstance,
    horizon: usize,
    eps_star: f64,
    mode: SelectMode,
    grad_bound: f64,
    seed: u64,
) -> Result<OgdBzParams> {
    if eps_star <= 0.0 {
        return Err(Error::AssumptionViolated(
            "eps_star must be positive (no strictly safe linear gain)".into(),
        ));
    }
    let gain = &instance.base_gain;
    let (n, m) = (instance.n() as f64, instance.m() as f64);
    let gamma = gain.gamma;
    let min_h = policy::min_horizon(gain.kappa, gamma);
    let t_f = (horizon.max(1)) as f64;
    let log_decay = (1.0 / (1.0 - gamma)).ln();
    // c1, c2, c3 do not depend on (H, eta); evaluate once at a valid point.
    let probe = constraints::compute_buffers(
        &instance.system,
        &instance.constraints,
        gain,
        min_h,
        0.0,
        grad_bound,
    )?;

    match mode {
        SelectMode::Theorem1 => {
            let arg = 8.0 * (probe.c1 + probe.c3) * n * m.sqrt() * t_f / eps_star;
            let mut h = ((arg.max(1.0)).ln() / log_decay).ceil().max(0.0) as usize;
            h = h.max(min_h);
            let epsilon = eps_star / 2.0;
            const H_CAP: usize = 400;
            loop {
                if h > H_CAP {
                    return Err(Error::AssumptionViolated(format!(
                        "no H <= {H_CAP} satisfies the non-emptiness condition \
                         eps <= eps_star - eps1(H) - eps3(H) (binding condition)"
                    )));
                }
                let eta = eps_star / (8.0 * probe.c2 * n * n * m.sqrt() * (h * h) as f64);
                let buffers = constraints::compute_buffers(
                    &instance.system,
                    &instance.constraints,
                    gain,
                    h,
                    eta,
                    grad_bound,
                )?
                .with_epsilon(epsilon);
                let safety = buffers.safety_condition();
                let nonempty = buffers.nonempty_condition(eps_star);
                if safety && nonempty {
                    return Ok(OgdBzParams {
                        h,
                        epsilon,
                        eta: EtaSchedule::Constant(eta),
                        buffers,
                        flags: TheoremFlags {
                            h_ok: true,
                            safety,
                            nonempty: Some(nonempty),
                            eps_star: Some(eps_star),
                        },
                        seed,
                    });
                }
                if !nonempty {
                    // eps1 + eps3 decay with H
                    h += 1;
                    continue;
                }
                return Err(Error::AssumptionViolated(format!(
                    "safety condition eps >= eps1 + eps2 unsatisfiable at H = {h} \
                     (binding condition: eps1 = {:.3e}, eps2 = {:.3e}, eps = {:.3e})",
                    buffers.eps1, buffers.eps2, epsilon
                )));
            }
        }
        SelectMode::Corollary2 => {
            let arg = 8.0 * (probe.c1 + probe.c2) * n * m.sqrt() * t_f / eps_star;
            let mut h = ((arg.max(1.0)).ln() / log_decay).ceil().max(0.0) as usize;
            h = h.max(min_h);
            let eta = 1.0 / (n * n * m.sqrt() * h as f64 * t_f.sqrt());
            let buffers = constraints::compute_buffers(
                &instance.system,
                &instance.constraints,
                gain,
                h,
                eta,
                grad_bound,
            )?;
            let epsilon = buffers.eps1 + buffers.eps2;
            let buffers = buffers.with_epsilon(epsilon);
            let flags = TheoremFlags {
                h_ok: true,
                safety: buffers.safety_condition(),
                nonempty: Some(buffers.nonempty_condition(eps_star)),
                eps_star: Some(eps_star),
            };
            Ok(OgdBzParams {
                h,
                epsilon,
                eta: EtaSchedule::Constant(eta),
                buffers,
                flags,
                seed,
            })
        }
    }
}

// ---------------------------------------------------------------------------
// Gradient of the decoupled stage cost
// ---------------------------------------------------------------------------

/// Gradient workspace output: the gradient (shaped like a policy) together
/// with the surrogate state/action it was evaluated at.
#[derive(Debug, Clone)]
pub struct RingGradient {
    pub grad: DacPolicy,
    pub x_tilde: DVector<f64>,
    pub u_tilde: DVector<f64>,
}

/// Gradient of `c_t(xt~(M), ut~(M))` with every window slot tied to `M`,
/// evaluated at the realized disturbance window:
///
/// ```text
/// d/dM[j] = sum_{i=1}^H B'(A_K^{i-1})'(gx - K' gu) w_{t-i-j}' + gu w_{t-j}'
/// ```
pub fn grad_ring_f(
    loop_: &ClosedLoop,
    cost: &dyn CostStream,
    t: usize,
    policy: &DacPolicy,
    ring: &DisturbanceRing,
) -> Result<RingGradient> {
    let h = loop_.h;
    let (n, m) = (loop_.n(), loop_.m());
    if ring.depth() < 2 * h {
        return Err(Error::DimensionMismatch("ring depth < 2H".into()));
    }
    // surrogate state: x~ = sum_{k<=H} A^{k-1} w_{t-k}
    //                     + sum_i A^{i-1} B (sum_j M[j] w_{t-i-j})
    let mut x_tilde = DVector::zeros(n);
    for k in 1..=h {
        x_tilde += loop_.ak_power(k - 1) * ring.lag(k);
    }
    let mut inner = Vec::with_capacity(h); // s_i = sum_j M[j] w_{t-i-j}
    for i in 1..=h {
        let mut s = DVector::zeros(m);
        for j in 1..=h {
            s += policy.mat(j) * ring.lag(i + j);
        }
        x_tilde += loop_.ak_power_b(i - 1) * &s;
        inner.push(s);
    }
    let mut u_tilde = -&loop_.gain.k * &x_tilde;
    for j in 1..=h {
        u_tilde += policy.mat(j) * ring.lag(j);
    }
    let gx = cost.grad_x(t, &x_tilde, &u_tilde);
    let gu = cost.grad_u(t, &x_tilde, &u_tilde);
    if !(crate::linalg::is_finite_vec(&gx) && crate::linalg::is_finite_vec(&gu)) {
        return Err(Error::NonFinite("cost gradient".into()));
    }
    // c_i = B' (A_K^{i-1})' (gx - K' gu)
    let gxk = &gx - loop_.gain.k.transpose() * &gu;
    let cis: Vec<DVector<f64>> = (1..=h)
        .map(|i| loop_.ak_power_b(i - 1).transpose() * &gxk)
        .collect();
    let mut mats = Vec::with_capacity(h);
    for j in 1..=h {
        let mut g = DMatrix::zeros(m, n);
        for (i, ci) in cis.iter().enumerate() {
            g += ci * ring.lag(i + 1 + j).transpose();
        }
        g += &gu * ring.lag(j).transpose();
        mats.push(g);
    }
    Ok(RingGradient {
        grad: DacPolicy::new(mats)?,
        x_tilde,
        u_tilde,
    })
}

// ---------------------------------------------------------------------------
// Rollout trace
// ---------------------------------------------------------------------------

/// One stage of a run.
#[derive(Debug, Clone)]
pub struct StageRecord {
    pub t: usize,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// Disturbance recovered as `x_{t+1} - A x_t - B u_t` (what the online
    /// algorithm observes; the replay identity holds bitwise).
    pub w: DVector<f64>,
    /// Policy played at this stage (absent for plain non-policy rollouts).
    pub policy: Option<DacPolicy>,
    pub cost: f64,
    pub eta: f64,
    /// Frobenius norm of `M_{t+1} - M_t` (0 at the final stage).
    pub motion: f64,
    pub proj_primal: f64,
    pub proj_dual: f64,
    pub proj_iters: usize,
    pub proj_fast_path: bool,
    pub wall_secs: f64,
}

/// A completed rollout.
#[derive(Debug, Clone)]
pub struct RolloutTrace {
    pub stages: Vec<StageRecord>,
    pub final_state: DVector<f64>,
    /// Whether any stage exceeded the slow-motion bound `eta_t * G_f`.
    pub motion_flag_raised: bool,
    pub total_cost: f64,
}

impl RolloutTrace {
    pub fn horizon(&self) -> usize {
        self.stages.len().saturating_sub(1)
    }

    /// Verify the replay identity `x_{t+1} - A x_t - B u_t = w_t` bitwise.
    pub fn replay_exact(&self, a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
        for t in 0..self.stages.len() {
            let s = &self.stages[t];
            let x_next = if t + 1 < self.stages.len() {
                &self.stages[t + 1].x
            } else {
                &self.final_state
            };
            let w = x_next - a * &s.x - b * &s.u;
            if w.as_slice() != s.w.as_slice() {
                return false;
            }
        }
        true
    }

    /// Policies per stage; `None` when any stage lacks one (plain rollouts).
    pub fn policies(&self) -> Option<Vec<DacPolicy>> {
        self.stages.iter().map(|s| s.policy.clone()).collect()
    }

    pub fn states(&self) -> Vec<DVector<f64>> {
        self.stages.iter().map(|s| s.x.clone()).collect()
    }
}

// ---------------------------------------------------------------------------
// The driver
// ---------------------------------------------------------------------------

/// Online OGD-BZ state; step it with observed next states, or use
/// [`run_ogd_bz`] to drive a whole rollout against a disturbance source.
pub struct OgdBz<'a> {
    pub instance: &'a ProblemInstance,
    pub params: OgdBzParams,
    pub loop_: ClosedLoop,
    pub polytope: LiftedPolytope,
    projector: OmegaProjector,
    policy: DacPolicy,
    ring: DisturbanceRing,
    x: DVector<f64>,
    t: usize,
    stages: Vec<StageRecord>,
    motion_flag: bool,
    total_cost: f64,
}

impl<'a> OgdBz<'a> {
    /// Build the polytope, certify non-emptiness, and initialize `M_0` from
    /// the feasibility witness.
    pub fn new(instance: &'a ProblemInstance, params: OgdBzParams) -> Result<Self> {
        let loop_ = ClosedLoop::new(&instance.system, &instance.base_gain, params.h)?;
        let polytope = constraints::build_lifted_polytope(instance, &loop_, params.epsilon)?;
        let feas = solve_feasibility_lp(&polytope)?;
        let witness = feas.witness.ok_or_else(|| {
            let condition = match params.flags.nonempty {
                Some(false) => {
                    " (violated Theorem-1 condition: eps <= eps_star - eps1 - eps3)".to_string()
                }
                _ => " (search space empty at this buffer size)".to_string(),
            };
            Error::InfeasibleSet {
                max_slack: feas.max_slack,
                condition,
            }
        })?;
        let policy = polytope.policy_of(&witness)?;
        let projector = OmegaProjector::new(&polytope)?;
        let n = instance.n();
        Ok(Self {
            instance,
            loop_,
            projector,
            policy,
            ring: DisturbanceRing::new(2 * params.h, n),
            x: DVector::zeros(n),
            t: 0,
            stages: Vec::new(),
            motion_flag: false,
            total_cost: 0.0,
            polytope,
            params,
        })
    }

    pub fn current_policy(&self) -> &DacPolicy {
        &self.policy
    }

    pub fn state(&self) -> &DVector<f64> {
        &self.x
    }

    pub fn t(&self) -> usize {
        self.t
    }

    /// The action for the current stage.
    pub fn action(&self) -> Result<DVector<f64>> {
        policy::control_action(&self.loop_.gain, &self.x, &self.policy, &self.ring)
    }

    /// Advance one stage: play `u_t`, observe `x_{t+1}`, recover `w_t`, take
    /// the projected gradient step. `final_stage` skips the policy update
    /// (nothing consumes `M_{T+1}`).
    pub fn step(
        &mut self,
        u: DVector<f64>,
        x_next: DVector<f64>,
        cost: &dyn CostStream,
        final_stage: bool,
    ) -> Result<()> {
        let started = Instant::now();
        let sys = &self.instance.system;
        // recover w_t exactly as the algorithm observes it
        let w = &x_next - &sys.a * &self.x - &sys.b * &u;
        let stage_cost = cost.value(self.t, &self.x, &u);
        self.total_cost += stage_cost;
        let eta = self.params.eta.at(self.t);

        let (next_policy, motion, info) = if final_stage {
            (self.policy.clone(), 0.0, None)
        } else {
            let g = grad_ring_f(&self.loop_, cost, self.t, &self.policy, &self.ring)?;
            let mut target_mats = Vec::with_capacity(self.params.h);
            for i in 1..=self.params.h {
                target_mats.push(self.policy.mat(i) - eta * g.grad.mat(i));
            }
            let target = DacPolicy::new(target_mats)?;
            let (projected, info) = self.projector.project(&target)?;
            let motion = projected.frob_distance(&self.policy);
            (projected, motion, Some(info))
        };
        if motion > eta * self.params.buffers.g_f * (1.0 + 1e-9) {
            self.motion_flag = true;
        }
        self.stages.push(StageRecord {
            t: self.t,
            x: self.x.clone(),
            u,
            w: w.clone(),
            policy: Some(self.policy.clone()),
            cost: stage_cost,
            eta,
            motion,
            proj_primal: info.map_or(0.0, |i| i.primal_residual),
            proj_dual: info.map_or(0.0, |i| i.dual_residual),
            proj_iters: info.map_or(0, |i| i.admm_iterations),
            proj_fast_path: info.map_or(true, |i| i.fast_path),
            wall_secs: started.elapsed().as_secs_f64(),
        });
        self.policy = next_policy;
        self.ring.push(w);
        self.x = x_next;
        self.t += 1;
        Ok(())
    }

    pub fn finish(self, final_state: DVector<f64>) -> RolloutTrace {
        RolloutTrace {
            stages: self.stages,
            final_state,
            motion_flag_raised: self.motion_flag,
            total_cost: self.total_cost,
        }
    }
}

/// Run Algorithm 1 end to end for `instance.horizon` stages.
pub fn run_ogd_bz(
    instance: &ProblemInstance,
    params: OgdBzParams,
    cost: &dyn CostStream,
    disturbances: &mut dyn DisturbanceSource,
) -> Result<RolloutTrace> {
    let horizon = instance.horizon;
    let mut alg = OgdBz::new(instance, params)?;
    let sys = &instance.system;
    for t in 0..=horizon {
        let u = alg.action()?;
        if !crate::linalg::is_finite_vec(&u) {
            return Err(Error::NonFinite(format!("action at stage {t}")));
        }
        let w = disturbances.next_disturbance(t, &alg.x, &u);
        let x_next = &sys.a * &alg.x + &sys.b * &u + &w;
        alg.step(u, x_next, cost, t == horizon)?;
    }
    let final_state = alg.x.clone();
    Ok(alg.finish(final_state))
}

// ---------------------------------------------------------------------------
// Trace persistence
// ---------------------------------------------------------------------------

pub const TRACE_SCHEMA: &str = "ogdbz-trace-v1";

impl RolloutTrace {
    /// Write the trace as CSV (schema `ogdbz-trace-v1`): a `#` header line
    /// with the dimensions, the column header, one row per stage, and a
    /// trailing `# final` line with the terminal state.
    pub fn write_csv(&self, out: &mut dyn std::io::Write) -> Result<()> {
        let n = self.final_state.len();
        let m = self.stages.first().map_or(0, |s| s.u.len());
        let h = self
            .stages
            .first()
            .and_then(|s| s.policy.as_ref().map(|p| p.h()))
            .unwrap_or(0);
        writeln!(
            out,
            "# {TRACE_SCHEMA} n={n} m={m} h={h} motion_flag={}",
            u8::from(self.motion_flag_raised)
        )?;
        let mut header = String::from("t");
        for i in 0..n {
            header.push_str(&format!(",x_{i}"));
        }
        for i in 0..m {
            header.push_str(&format!(",u_{i}"));
        }
        for i in 0..n {
            header.push_str(&format!(",w_{i}"));
        }
        header.push_str(",cost,eta,motion,proj_primal,proj_dual,proj_iters,proj_fast,wall_secs");
        for lag in 1..=h {
            for r in 0..m {
                for c in 0..n {
                    header.push_str(&format!(",m_{lag}_{r}_{c}"));
                }
            }
        }
        writeln!(out, "{header}")?;
        for s in &self.stages {
            let mut line = format!("{}", s.t);
            for v in s.x.iter().chain(s.u.iter()).chain(s.w.iter()) {
                line.push_str(&format!(",{v:.17e}"));
            }
            line.push_str(&format!(
                ",{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{},{},{:.6e}",
                s.cost,
                s.eta,
                s.motion,
                s.proj_primal,
                s.proj_dual,
                s.proj_iters,
                u8::from(s.proj_fast_path),
                s.wall_secs
            ));
            if let Some(pol) = &s.policy {
                for lag in 1..=h {
                    for r in 0..pol.action_dim() {
                        for c in 0..pol.state_dim() {
                            line.push_str(&format!(",{:.17e}", pol.mat(lag)[(r, c)]));
                        }
                    }
                }
            }
            writeln!(out, "{line}")?;
        }
        let finals: Vec<String> = self.final_state.iter().map(|v| format!("{v:.17e}")).collect();
        writeln!(out, "# final {}", finals.join(" "))?;
        Ok(())
    }

    /// Parse a trace written by [`RolloutTrace::write_csv`].
    pub fn read_csv(input: &str) -> Result<Self> {
        let mut lines = input.lines();
        let head = lines
            .next()
            .ok_or_else(|| Error::MalformedTrace("empty file".into()))?;
        if !head.starts_with(&format!("# {TRACE_SCHEMA}")) {
            return Err(Error::MalformedTrace(format!(
                "unknown schema line: {head}"
            )));
        }
        let mut n = 0usize;
        let mut m = 0usize;
        let mut h = 0usize;
        let mut motion_flag = false;
        for tok in head.split_whitespace() {
            if let Some(v) = tok.strip_prefix("n=") {
                n = v.parse().map_err(|_| Error::MalformedTrace("bad n".into()))?;
            } else if let Some(v) = tok.strip_prefix("m=") {
                m = v.parse().map_err(|_| Error::MalformedTrace("bad m".into()))?;
            } else if let Some(v) = tok.strip_prefix("h=") {
                h = v.parse().map_err(|_| Error::MalformedTrace("bad h".into()))?;
            } else if let Some(v) = tok.strip_prefix("motion_flag=") {
                motion_flag = v == "1";
            }
        }
        if n == 0 || m == 0 {
            return Err(Error::MalformedTrace("missing dimensions".into()));
        }
        let _header = lines
            .next()
            .ok_or_else(|| Error::MalformedTrace("missing column header".into()))?;
        let mut stages = Vec::new();
        let mut final_state: Option<DVector<f64>> = None;
        let mut total_cost = 0.0;
        for line in lines {
            if let Some(rest) = line.strip_prefix("# final ") {
                let vals: std::result::Result<Vec<f64>, _> =
                    rest.split_whitespace().map(str::parse).collect();
                let vals = vals.map_err(|_| Error::MalformedTrace("bad final state".into()))?;
                if vals.len() != n {
                    return Err(Error::MalformedTrace("final state dimension".into()));
                }
                final_state = Some(DVector::from_vec(vals));
                continue;
            }
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            let expected = 1 + n + m + n + 8 + h * m * n;
            if fields.len() != expected {
                return Err(Error::MalformedTrace(format!(
                    "row has {} fields, expected {expected}",
                    fields.len()
                )));
            }
            let parse = |s: &str| -> Result<f64> {
                s.parse::<f64>()
                    .map_err(|_| Error::MalformedTrace(format!("bad number: {s}")))
            };
            let t: usize = fields[0]
                .parse()
                .map_err(|_| Error::MalformedTrace("bad stage index".into()))?;
            let mut at = 1usize;
            let mut take = |len: usize, at: &mut usize| -> Result<DVector<f64>> {
                let mut v = DVector::zeros(len);
                for i in 0..len {
                    v[i] = parse(fields[*at + i])?;
                }
                *at += len;
                Ok(v)
            };
            let x = take(n, &mut at)?;
            let u = take(m, &mut at)?;
            let w = take(n, &mut at)?;
            let cost = parse(fields[at])?;
            let eta = parse(fields[at + 1])?;
            let motion = parse(fields[at + 2])?;
            let proj_primal = parse(fields[at + 3])?;
            let proj_dual = parse(fields[at + 4])?;
            let proj_iters: usize = fields[at + 5]
                .parse()
                .map_err(|_| Error::MalformedTrace("bad iteration count".into()))?;
            let proj_fast_path = fields[at + 6] == "1";
            let wall_secs = parse(fields[at + 7])?;
            at += 8;
            let policy = if h > 0 {
                let mut mats = Vec::with_capacity(h);
                for _ in 0..h {
                    let mut mat = DMatrix::zeros(m, n);
                    for r in 0..m {
                        for c in 0..n {
                            mat[(r, c)] = parse(fields[at])?;
                            at += 1;
                        }
                    }
                    mats.push(mat);
                }
                Some(DacPolicy::new(mats)?)
            } else {
                None
            };
            total_cost += cost;
            stages.push(StageRecord {
                t,
                x,
                u,
                w,
                policy,
                cost,
                eta,
                motion,
                proj_primal,
                proj_dual,
                proj_iters,
                proj_fast_path,
                wall_secs,
            });
        }
        Ok(RolloutTrace {
            stages,
            final_state: final_state
                .ok_or_else(|| Error::MalformedTrace("missing final-state line".into()))?,
            motion_flag_raised: motion_flag,
            total_cost,
        })
    }
}
