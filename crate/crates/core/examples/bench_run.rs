use nalgebra::DVector;
use ogdbz::constraints::build_lifted_polytope;
use ogdbz::ogd::{grad_ring_f, EtaSchedule, OgdBzParams, QuadraticCostStream};
use ogdbz::policy::{control_action, ClosedLoop, DacPolicy, DisturbanceRing};
use ogdbz::qp::{solve_feasibility_lp, OmegaProjector};
use ogdbz::sim::{DisturbanceSource, UniformBox};
use ogdbz::system::{build_hvac_instance, HvacConfig};
use std::time::Instant;

fn main() {
    let mut inst = build_hvac_instance(&HvacConfig::paper()).unwrap();
    inst.horizon = 2000;
    let h = 7usize;
    let lp = ClosedLoop::new(&inst.system, &inst.base_gain, h).unwrap();
    let poly = build_lifted_polytope(&inst, &lp, 0.04).unwrap();
    let feas = solve_feasibility_lp(&poly).unwrap();
    let mut policy = poly.policy_of(&feas.witness.unwrap()).unwrap();
    let mut proj = OmegaProjector::new(&poly).unwrap();
    let cost = QuadraticCostStream::random_r(2001, 2.0, 0.1, 4.0, 42).unwrap();
    let mut src = UniformBox::new(inst.system.w_bar, 1, 0);
    let mut ring = DisturbanceRing::new(2 * h, 1);
    let mut x = DVector::zeros(1);
    let sched = EtaSchedule::paper();
    let _ = OgdBzParams::manual(&inst, h, 0.04, sched, 8.0, None, 0);
    let t0 = Instant::now();
    for t in 0..200usize {
        let u = control_action(&inst.base_gain, &x, &policy, &ring).unwrap();
        let w = src.next_disturbance(t, &x, &u);
        let x_next = &inst.system.a * &x + &inst.system.b * &u + &w;
        let g = grad_ring_f(&lp, &cost, t, &policy, &ring).unwrap();
        let eta = sched.at(t);
        let target = DacPolicy::new(
            (1..=h).map(|i| policy.mat(i) - eta * g.grad.mat(i)).collect(),
        )
        .unwrap();
        let step_t = Instant::now();
        match proj.project(&target) {
            Ok((p, info)) => {
                if t < 40 || t % 50 == 0 {
                    println!(
                        "t={t} grad_norm={:.2} target_dist={:.3} admm={} fast={} proj_ms={:.2}",
                        g.grad.frob_norm(),
                        target.frob_distance(&policy),
                        info.admm_iterations,
                        info.fast_path,
                        1000.0 * step_t.elapsed().as_secs_f64()
                    );
                }
                policy = p;
            }
            Err(e) => {
                println!("t={t} FAILED: {e}");
                break;
            }
        }
        ring.push(w);
        x = x_next;
    }
    println!("200 steps in {:.2}s", t0.elapsed().as_secs_f64());
}
