//! Linearized inverted pendulum on a cart, LQR synthesis and time stepping.
//!
//! State order is `[r, θ, ṙ, θ̇]` throughout.

use std::io::Write;

use nalgebra::{DMatrix, Matrix4, RowVector4, Vector4};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::riccati;

pub const DEFAULT_CART_MASS: f64 = 0.5;
pub const DEFAULT_FRICTION: f64 = 0.1;
pub const DEFAULT_GRAVITY: f64 = 9.8;
pub const DEFAULT_R_LQR: f64 = 0.1;
pub const DEFAULT_DT: f64 = 0.01;
pub const DEFAULT_REFERENCE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub cart_mass: f64,
    pub pendulum_mass: f64,
    /// Distance from the pivot to the pendulum's centre of mass.
    pub length: f64,
    pub friction: f64,
    pub gravity: f64,
}

impl PlantParams {
    pub fn new(pendulum_mass: f64, length: f64) -> Self {
        PlantParams {
            cart_mass: DEFAULT_CART_MASS,
            pendulum_mass,
            length,
            friction: DEFAULT_FRICTION,
            gravity: DEFAULT_GRAVITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pendulum_mass, self.length, self.gravity];
        if all.iter().any(|v| !v.is_finite() || *v <= 0.0) || !self.friction.is_finite() || self.friction < 0.0 {
            return Err(Error::InvalidArgument(format!("non-physical plant parameters {self:?}")));
        }
        Ok(())
    }

    /// Moment of inertia of a uniform bar, `m l² / 3`.
    pub fn inertia(&self) -> f64 {
        self.pendulum_mass * self.length * self.length / 3.0
    }

    /// `(M + m) I + m M l²`.
    pub fn c(&self) -> f64 {
        let (mm, m, l) = (self.cart_mass, self.pendulum_mass, self.length);
        (mm + m) * self.inertia() + m * mm * l * l
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub r: f64,
    pub theta: f64,
    pub v: f64,
    pub q: f64,
}

impl PlantState {
    pub fn new(r: f64, theta: f64, v: f64, q: f64) -> Self {
        PlantState { r, theta, v, q }
    }

    pub fn to_vector(&self) -> Vector4<f64> {
        Vector4::new(self.r, self.theta, self.v, self.q)
    }

    pub fn from_vector(x: &Vector4<f64>) -> Self {
        PlantState { r: x[0], theta: x[1], v: x[2], q: x[3] }
    }

    pub fn is_finite(&self) -> bool {
        self.r.is_finite() && self.theta.is_finite() && self.v.is_finite() && self.q.is_finite()
    }
}

/// State and input matrices of the linearized cart-pendulum.
pub fn linearized_matrices(p: &PlantParams) -> (Matrix4<f64>, Vector4<f64>) {
    let (mm, m, l, b, g) = (p.cart_mass, p.pendulum_mass, p.length, p.friction, p.gravity);
    let i = p.inertia();
    let c = p.c();
    #[rustfmt::skip]
    let a = Matrix4::new(
        0.0, 0.0,                     1.0,                       0.0,
        0.0, 0.0,                     0.0,                       1.0,
        0.0, m * m * g * l * l / c,   -b * (i + m * l * l) / c,  0.0,
        0.0, m * g * l * (mm + m) / c, -m * l * b / c,           0.0,
    );
    let bv = Vector4::new(0.0, 0.0, (i + m * l * l) / c, m * l / c);
    (a, bv)
}

/// LQR state feedback with reference precompensation: `u = N̄·ref − K x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqrDesign {
    pub gain: [f64; 4],
    pub precompensation: f64,
    pub q_weight: [[f64; 4]; 4],
    pub r_weight: f64,
    /// Riccati solution used to form the gain.
    pub riccati: [[f64; 4]; 4],
    /// Frobenius norm of the Riccati residual at `riccati`.
    pub residual: f64,
}

impl LqrDesign {
    pub fn gain_row(&self) -> RowVector4<f64> {
        RowVector4::from_row_slice(&self.gain)
    }

    pub fn control(&self, s: &PlantState, reference: f64) -> f64 {
        self.precompensation * reference - (self.gain_row() * s.to_vector())[0]
    }

    pub fn closed_loop(&self, a: &Matrix4<f64>, b: &Vector4<f64>) -> Matrix4<f64> {
        a - b * self.gain_row()
    }

    /// True when every closed-loop eigenvalue has negative real part.
    pub fn is_hurwitz(&self, a: &Matrix4<f64>, b: &Vector4<f64>) -> bool {
        self.closed_loop(a, b).complex_eigenvalues().iter().all(|e| e.re < 0.0)
    }
}

/// Default cost weights: diag(5000, 0, 100, 0).
pub fn default_q() -> Matrix4<f64> {
    Matrix4::from_diagonal(&Vector4::new(5000.0, 0.0, 100.0, 0.0))
}

/// Solve the continuous-time LQR problem and the unit-DC-gain precompensation for `r`.
pub fn solve_lqr(a: &Matrix4<f64>, b: &Vector4<f64>, q: &Matrix4<f64>, r_lqr: f64) -> Result<LqrDesign> {
    let ad = DMatrix::from_column_slice(4, 4, a.as_slice());
    let bd = DMatrix::from_column_slice(4, 1, b.as_slice());
    let qd = DMatrix::from_column_slice(4, 4, q.as_slice());
    let sol = riccati::solve_care(&ad, &bd, &qd, r_lqr, &riccati::CareOptions::default())?;
    let gain = [sol.gain[(0, 0)], sol.gain[(0, 1)], sol.gain[(0, 2)], sol.gain[(0, 3)]];
    let k = RowVector4::from_row_slice(&gain);
    let acl = a - b * k;
    let inv = acl.try_inverse().ok_or(Error::Singular("closed-loop matrix"))?;
    let dc = (inv * b)[0];
    if dc == 0.0 || !dc.is_finite() {
        return Err(Error::Singular("closed-loop DC gain"));
    }
    let mut p = [[0.0; 4]; 4];
    let mut qw = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..4 {
            p[i][j] = sol.p[(i, j)];
            qw[i][j] = q[(i, j)];
        }
    }
    Ok(LqrDesign {
        gain,
        precompensation: -1.0 / dc,
        q_weight: qw,
        r_weight: r_lqr,
        riccati: p,
        residual: sol.residual,
    })
}

/// LQR for a plant with the default weights.
pub fn design_default(p: &PlantParams) -> Result<LqrDesign> {
    p.validate()?;
    let (a, b) = linearized_matrices(p);
    solve_lqr(&a, &b, &default_q(), DEFAULT_R_LQR)
}

/// One classical RK4 step of `ẋ = A x + B f` with `f` held over the step.
pub fn step(p: &PlantParams, s: &PlantState, force: f64, dt: f64) -> Result<PlantState> {
    let (a, b) = linearized_matrices(p);
    step_with(&a, &b, s, force, dt)
}

pub(crate) fn step_with(a: &Matrix4<f64>, b: &Vector4<f64>, s: &PlantState, force: f64, dt: f64) -> Result<PlantState> {
    if dt <= 0.0 || !dt.is_finite() {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }
    let x = s.to_vector();
    let bf = b * force;
    let f = |x: &Vector4<f64>| a * x + bf;
    let k1 = f(&x);
    let k2 = f(&(x + k1 * (dt / 2.0)));
    let k3 = f(&(x + k2 * (dt / 2.0)));
    let k4 = f(&(x + k3 * dt));
    let next = PlantState::from_vector(&(x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)));
    if !next.is_finite() {
        return Err(Error::Diverged);
    }
    Ok(next)
}

/// Closed-loop simulation output. `forces[i]` is held from `states[i]` to `states[i + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub dt: f64,
    pub states: Vec<PlantState>,
    pub forces: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn final_state(&self) -> &PlantState {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    /// CSV with columns `t, r, theta, v, q, f`; the final row has no force.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["t", "r", "theta", "v", "q", "f"])?;
        for (i, s) in self.states.iter().enumerate() {
            let f = self.forces.get(i).map(|f| f.to_string()).unwrap_or_default();
            wr.write_record([
                (i as f64 * self.dt).to_string(),
                s.r.to_string(),
                s.theta.to_string(),
                s.v.to_string(),
                s.q.to_string(),
                f,
            ])?;
        }
        wr.flush()?;
        Ok(())
    }
}

pub fn step_count(duration: f64, dt: f64) -> Result<usize> {
    if dt <= 0.0 || duration < 0.0 {
        return Err(Error::InvalidArgument(format!("bad duration {duration} / dt {dt}")));
    }
    let n = (duration / dt).round();
    if (n * dt - duration).abs() > 1e-9 * duration.max(1.0) {
        return Err(Error::InvalidArgument(format!("duration {duration} is not a multiple of dt {dt}")));
    }
    Ok(n as usize)
}

/// Zero-order-hold closed-loop rollout; `controller` is sampled once per `dt`.
///
/// The trajectory has `duration / dt + 1` states including `s0`.
pub fn rollout<C>(p: &PlantParams, mut controller: C, s0: PlantState, duration: f64, dt: f64) -> Result<Trajectory>
where
    C: FnMut(&PlantState) -> f64,
{
    let n = step_count(duration, dt)?;
    let (a, b) = linearized_matrices(p);
    let mut states = Vec::with_capacity(n + 1);
    let mut forces = Vec::with_capacity(n);
    states.push(s0);
    let mut s = s0;
    for _ in 0..n {
        let f = controller(&s);
        if !f.is_finite() {
            return Err(Error::Diverged);
        }
        s = step_with(&a, &b, &s, f, dt)?;
        forces.push(f);
        states.push(s);
    }
    Ok(Trajectory { dt, states, forces })
}

/// Random episode conditions: bar mass, bar length and initial angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSampler {
    pub mass_range: (f64, f64),
    pub length_range: (f64, f64),
    pub theta0_range: (f64, f64),
}

impl Default for ScenarioSampler {
    fn default() -> Self {
        ScenarioSampler { mass_range: (0.1, 2.0), length_range: (0.2, 0.5), theta0_range: (-0.1, 0.1) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Episode {
    pub params: PlantParams,
    pub initial: PlantState,
}

impl ScenarioSampler {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Episode {
        let m = rng.random_range(self.mass_range.0..=self.mass_range.1);
        let l = rng.random_range(self.length_range.0..=self.length_range.1);
        let th = rng.random_range(self.theta0_range.0..=self.theta0_range.1);
        Episode { params: PlantParams::new(m, l), initial: PlantState::new(0.0, th, 0.0, 0.0) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matrices_by_hand() {
        let p = PlantParams::new(0.2, 0.3);
        assert!((p.inertia() - 0.006).abs() < 1e-15);
        assert!((p.c() - 0.0132).abs() < 1e-15);
        let (a, b) = linearized_matrices(&p);
        assert_eq!(a.row(0), RowVector4::new(0.0, 0.0, 1.0, 0.0));
        assert_eq!(a.row(1), RowVector4::new(0.0, 0.0, 0.0, 1.0));
        assert!((b[2] - (0.006 + 0.2 * 0.09) / 0.0132).abs() < 1e-12);
        assert!((b[3] - 0.06 / 0.0132).abs() < 1e-12);
        assert!((a[(2, 1)] - 0.04 * 9.8 * 0.09 / 0.0132).abs() < 1e-12);
        assert!((a[(3, 1)] - 0.2 * 9.8 * 0.3 * 0.7 / 0.0132).abs() < 1e-12);
        assert!((a[(2, 2)] + 0.1 * 0.024 / 0.0132).abs() < 1e-12);
        assert!((a[(3, 2)] + 0.06 * 0.1 / 0.0132).abs() < 1e-12);
    }

    #[test]
    fn equilibrium_is_fixed() {
        let p = PlantParams::new(0.5, 0.3);
        let s = step(&p, &PlantState::default(), 0.0, 0.01).unwrap();
        assert_eq!(s, PlantState::default());
        let traj = rollout(&p, |_| 0.0, PlantState::default(), 2.0, 0.01).unwrap();
        assert_eq!(traj.len(), 201);
        assert!(traj.states.iter().all(|s| *s == PlantState::default()));
    }

    #[test]
    fn rk4_matches_refined_euler() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sampler = ScenarioSampler::default();
        for _ in 0..10 {
            let ep = sampler.sample(&mut rng);
            let (a, b) = linearized_matrices(&ep.params);
            let s0 = PlantState::new(0.05, ep.initial.theta, -0.3, 0.4);
            let f = rng.random_range(-20.0..20.0);
            let rk = step(&ep.params, &s0, f, 0.01).unwrap().to_vector();
            // explicit Euler on 100 and 200 substeps, Richardson-extrapolated to second order
            let euler = |n: usize| {
                let h = 0.01 / n as f64;
                let mut x = s0.to_vector();
                for _ in 0..n {
                    x += (a * x + b * f) * h;
                }
                x
            };
            let extrap = euler(200) * 2.0 - euler(100);
            for i in 0..4 {
                assert!((rk[i] - extrap[i]).abs() < 1e-6, "component {i}: {} vs {}", rk[i], extrap[i]);
            }
        }
    }

    #[test]
    fn closed_loop_rk4_tracks_refined_integration_over_two_seconds() {
        let p = PlantParams::new(1.1, 0.25);
        let design = design_default(&p).unwrap();
        let (a, b) = linearized_matrices(&p);
        let s0 = PlantState::new(0.0, 0.08, 0.0, 0.0);
        let traj = rollout(&p, |s| design.control(s, 0.2), s0, 2.0, 0.01).unwrap();
        // the oracle closes its own loop so replayed forces cannot excite the unstable open-loop mode
        let mut x = s0.to_vector();
        for i in 0..traj.forces.len() {
            let f = design.control(&PlantState::from_vector(&x), 0.2);
            let euler = |n: usize| {
                let h = 0.01 / n as f64;
                let mut y = x;
                for _ in 0..n {
                    y += (a * y + b * f) * h;
                }
                y
            };
            x = euler(400) * 2.0 - euler(200);
            let rk = traj.states[i + 1].to_vector();
            for c in 0..4 {
                assert!((rk[c] - x[c]).abs() < 1e-4, "step {i} component {c}");
            }
        }
    }

    #[test]
    fn first_order_response_to_unit_force() {
        let p = PlantParams::new(0.7, 0.4);
        let (_, b) = linearized_matrices(&p);
        let dt = 1e-7;
        let s = step(&p, &PlantState::default(), 1.0, dt).unwrap();
        assert!((s.v / dt - b[2]).abs() < 1e-5 * b[2]);
        assert!((s.q / dt - b[3]).abs() < 1e-5 * b[3]);
    }

    #[test]
    fn partials_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let sampler = ScenarioSampler::default();
        for _ in 0..10 {
            let ep = sampler.sample(&mut rng);
            let (m, l) = (ep.params.pendulum_mass, ep.params.length);
            // d/dm of B3 = (I + m l²)/c = (4/3) m l² / c, analytic
            let mm = DEFAULT_CART_MASS;
            let b3 = |m: f64| {
                let c = (mm + m) * m * l * l / 3.0 + m * mm * l * l;
                (4.0 / 3.0) * m * l * l / c
            };
            let h = 1e-6;
            let fd = (linearized_matrices(&PlantParams::new(m + h, l)).1[2]
                - linearized_matrices(&PlantParams::new(m - h, l)).1[2])
                / (2.0 * h);
            let fd_ref = (b3(m + h) - b3(m - h)) / (2.0 * h);
            // closed-form: B3 = 4 / (4M + m), so dB3/dm = -4 / (4M + m)²
            let analytic = -4.0 / (4.0 * mm + m).powi(2);
            assert!((fd - analytic).abs() < 1e-6, "{fd} vs {analytic}");
            assert!((fd_ref - analytic).abs() < 1e-6);
        }
    }

    #[test]
    fn scalar_duration_checks() {
        assert_eq!(step_count(2.0, 0.01).unwrap(), 200);
        assert!(step_count(2.005, 0.01).is_err());
        assert!(step(&PlantParams::new(0.5, 0.3), &PlantState::default(), 0.0, 0.0).is_err());
        let bad = PlantState::new(f64::NAN, 0.0, 0.0, 0.0);
        assert!(matches!(step(&PlantParams::new(0.5, 0.3), &bad, 0.0, 0.01), Err(Error::Diverged)));
    }

    #[test]
    fn lqr_design_and_rollout() {
        let p = PlantParams::new(0.5, 0.3);
        let design = design_default(&p).unwrap();
        let (a, b) = linearized_matrices(&p);
        assert!(design.residual < 1e-8, "residual {}", design.residual);
        assert!(design.is_hurwitz(&a, &b));
        let traj =
            rollout(&p, |s| design.control(s, DEFAULT_REFERENCE), PlantState::new(0.0, 0.05, 0.0, 0.0), 2.0, 0.01)
                .unwrap();
        let last = traj.final_state();
        assert!((last.r - 0.2).abs() < 0.1, "{last:?}");
        assert!(last.theta.abs() < 0.01, "{last:?}");
    }

    #[test]
    fn precompensation_gives_unit_dc_gain() {
        let p = PlantParams::new(1.3, 0.45);
        let design = design_default(&p).unwrap();
        let (a, b) = linearized_matrices(&p);
        // steady state of ẋ = (A − BK)x + B N̄ ref, solved directly
        let acl = design.closed_loop(&a, &b);
        let xss = -acl.try_inverse().unwrap() * b * (design.precompensation * 0.2);
        assert!((xss[0] - 0.2).abs() < 1e-9);
        // long simulation converges to the same point
        let traj = rollout(&p, |s| design.control(s, 0.2), PlantState::default(), 20.0, 0.01).unwrap();
        assert!((traj.final_state().r - 0.2).abs() < 1e-6);
    }

    #[test]
    fn trajectory_csv_shape() {
        let p = PlantParams::new(0.5, 0.3);
        let traj = rollout(&p, |_| 0.0, PlantState::default(), 0.05, 0.01).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.starts_with("t,r,theta,v,q,f"));
    }
}
