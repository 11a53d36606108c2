//! Universal gate set under constantly-on interactions: decoupling-sequence
//! gate design, crosstalk evaluation, and the repeated-gate fidelity-decay
//! benchmark.
//!
//! Gate convention: the entangling `R_{c-X}^{π/2}` targets conditional
//! rotations about anti-parallel x axes with π/4 magnitude per electron
//! branch (branch-angle difference π/2). That one definition fixes the
//! target pair for the whole crate.
//!
//! Frames: transverse gates (X, c-X) are defined in each nucleus's bare
//! Larmor rotating frame, so a sequence is compared through
//! `W̃ = R_free(T)†·W` with `R_free` the free precession over the sequence
//! duration — phase tracked in software costs nothing. Z rotations are the
//! opposite: they are calibrated idles whose lab-frame z phase hits the
//! requested angle while the electron stays echoed. Reported fidelities are
//! additionally maximized over a correctable static nuclear Z frame, and
//! bystander crosstalk is the basis-independent `1 − |Tr W̃|/2` averaged
//! over the two branches — exactly zero for a decoupled spin.

use num_complex::Complex64 as C64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cmat::CMat;
use crate::dynamics::{
    cpmg_conditional_propagators, ConditionalPropagators, DensityMatrix, NoiseModel,
    PulseSequence,
};
use crate::exec;
use crate::spin_model::{HyperfineTensor, SystemConfig};
use crate::su2::{Quat, IDENTITY};

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

#[derive(Debug, Error)]
pub enum GateError {
    #[error("unknown spin id {0}")]
    UnknownSpin(u32),
    #[error("no feasible sequence: best cost {best_cost} above ceiling {ceiling}")]
    NoFeasibleSequence { best_cost: f64, ceiling: f64 },
    #[error("gate kind {0:?} has no decoupling-sequence target")]
    NoSequenceTarget(GateKind),
    #[error("benchmark budget exceeded: {total_ms} ms over the {budget_ms} ms sequence budget")]
    BudgetExceeded { total_ms: f64, budget_ms: f64 },
    #[error("root find failed: {0}")]
    RootFind(String),
    #[error(transparent)]
    Dynamics(#[from] crate::dynamics::DynamicsError),
    #[error("gate table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GateKind {
    NuclearXHalfPi,
    NuclearZHalfPi,
    NuclearZQuarterPi,
    ControlledXHalfPi,
    ElectronSingleQubit,
}

impl GateKind {
    /// Whether targets are compared in the bare-Larmor rotating frame
    /// (transverse gates) or the lab frame (Z rotations, which are
    /// calibrated idles).
    pub fn uses_rotating_frame(self) -> bool {
        !matches!(self, GateKind::NuclearZHalfPi | GateKind::NuclearZQuarterPi)
    }

    /// Branch targets (W0, W1); `None` for electron gates, which are ideal
    /// instantaneous unitaries with no sequence to evaluate.
    pub fn target_pair(self) -> Option<(Quat, Quat)> {
        let x = [1.0, 0.0, 0.0];
        let z = [0.0, 0.0, 1.0];
        match self {
            GateKind::NuclearXHalfPi => {
                let t = Quat::from_axis_angle(x, FRAC_PI_2);
                Some((t, t))
            }
            GateKind::NuclearZHalfPi => {
                let t = Quat::from_axis_angle(z, FRAC_PI_2);
                Some((t, t))
            }
            GateKind::NuclearZQuarterPi => {
                let t = Quat::from_axis_angle(z, FRAC_PI_4);
                Some((t, t))
            }
            GateKind::ControlledXHalfPi => Some((
                Quat::from_axis_angle(x, FRAC_PI_4),
                Quat::from_axis_angle(x, -FRAC_PI_4),
            )),
            GateKind::ElectronSingleQubit => None,
        }
    }

    /// Number of repetitions after which the ideal gate composes to identity.
    pub fn identity_period(self) -> u32 {
        match self {
            GateKind::NuclearXHalfPi | GateKind::NuclearZHalfPi => 4,
            GateKind::NuclearZQuarterPi => 8,
            // π/4 per branch: eight applications close both branches.
            GateKind::ControlledXHalfPi => 8,
            GateKind::ElectronSingleQubit => 4,
        }
    }

    pub fn parse(s: &str) -> Result<Self, GateError> {
        match s {
            "nuclear_x_half_pi" => Ok(GateKind::NuclearXHalfPi),
            "nuclear_z_half_pi" => Ok(GateKind::NuclearZHalfPi),
            "nuclear_z_quarter_pi" => Ok(GateKind::NuclearZQuarterPi),
            "controlled_x_half_pi" => Ok(GateKind::ControlledXHalfPi),
            "electron_single_qubit" => Ok(GateKind::ElectronSingleQubit),
            other => Err(GateError::Table(format!("unknown gate kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GateSpec {
    pub kind: GateKind,
    pub target_spin: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpinRef {
    Resolved(u32),
    Bath(usize),
}

/// Axis and angle of one conditional rotation (canonical SU(2), angle in
/// [0, π]).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRotation {
    pub axis: Option<[f64; 3]>,
    pub angle_rad: f64,
}

impl ConditionalRotation {
    fn of(q: Quat) -> Self {
        ConditionalRotation {
            axis: q.rotation_axis(),
            angle_rad: q.rotation_angle(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkEntry {
    pub spin: SpinRef,
    /// Mean rotation angle the bystander picks up (rad).
    pub rotation_angle_rad: f64,
    /// `1 − |Tr W|/2` averaged over the two branches.
    pub crosstalk: f64,
    pub fidelity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GateReport {
    pub spec: GateSpec,
    pub sequence: PulseSequence,
    pub target_fidelity: f64,
    /// (electron |0⟩ branch, electron |−1⟩ branch) rotations on the target.
    pub target_rotation_w0: ConditionalRotation,
    pub target_rotation_w1: ConditionalRotation,
    /// Z-frame angle (rad) at which the fidelity is reported.
    pub z_frame_rad: f64,
    pub crosstalk: Vec<CrosstalkEntry>,
    pub duration_ns: f64,
    /// Z realization fell back to a zero-duration software frame update.
    pub software_frame_fallback: bool,
}

impl GateReport {
    /// The achieved branch propagators, reconstructed from the descriptors.
    pub fn branch_propagators(&self) -> ConditionalPropagators {
        let rebuild = |r: &ConditionalRotation| match r.axis {
            Some(axis) => Quat::from_axis_angle(axis, r.angle_rad),
            None => IDENTITY,
        };
        ConditionalPropagators {
            w0: rebuild(&self.target_rotation_w0),
            w1: rebuild(&self.target_rotation_w1),
        }
    }

    /// Synthetic report carrying an exact target pair; the reference gate for
    /// benchmark oracles.
    pub fn ideal(spec: GateSpec, duration_ns: f64) -> Self {
        let (t0, t1) = spec.kind.target_pair().unwrap_or((IDENTITY, IDENTITY));
        GateReport {
            spec,
            sequence: PulseSequence::cpmg(0, 1.0),
            target_fidelity: 1.0,
            target_rotation_w0: ConditionalRotation::of(t0),
            target_rotation_w1: ConditionalRotation::of(t1),
            z_frame_rad: 0.0,
            crosstalk: Vec::new(),
            duration_ns,
            software_frame_fallback: false,
        }
    }
}

/// Mean branch fidelity against a target pair at a given nuclear Z frame.
fn pair_fidelity_at(cp: &ConditionalPropagators, t0: Quat, t1: Quat, phi: f64) -> f64 {
    let f0 = cp.w0.z_frame(phi).dot(t0).abs();
    let f1 = cp.w1.z_frame(phi).dot(t1).abs();
    0.5 * (f0 + f1)
}

/// Fidelity maximized over the correctable Z frame; returns (fidelity, φ).
fn pair_fidelity(cp: &ConditionalPropagators, t0: Quat, t1: Quat) -> (f64, f64) {
    let mut best = (f64::NEG_INFINITY, 0.0);
    const COARSE: usize = 128;
    for i in 0..COARSE {
        let phi = i as f64 / COARSE as f64 * 2.0 * PI;
        let f = pair_fidelity_at(cp, t0, t1, phi);
        if f > best.0 {
            best = (f, phi);
        }
    }
    // Golden refinement around the best coarse angle.
    let span = 2.0 * PI / COARSE as f64;
    let (mut lo, mut hi) = (best.1 - span, best.1 + span);
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (
        pair_fidelity_at(cp, t0, t1, c),
        pair_fidelity_at(cp, t0, t1, d),
    );
    for _ in 0..40 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = pair_fidelity_at(cp, t0, t1, c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = pair_fidelity_at(cp, t0, t1, d);
        }
    }
    let phi = 0.5 * (lo + hi);
    (pair_fidelity_at(cp, t0, t1, phi).max(best.0), phi)
}

/// Free Larmor precession over a sequence's duration.
fn free_rotation(omega_n_khz: f64, duration_ns: f64) -> Quat {
    Quat::from_field_khz([0.0, 0.0, omega_n_khz], duration_ns)
}

/// Conditional propagators in the bare-Larmor rotating frame.
fn into_rotating_frame(cp: &ConditionalPropagators, r_free: Quat) -> ConditionalPropagators {
    let r_dag = r_free.adjoint();
    ConditionalPropagators {
        w0: r_dag.mul(cp.w0),
        w1: r_dag.mul(cp.w1),
    }
}

/// Evaluates a sequence for every spin in the config against a gate target.
///
/// Target metrics come from the conditional propagators of the target spin;
/// every other resolved and bath spin contributes a crosstalk entry measured
/// in its own rotating frame.
pub fn evaluate_sequence(
    seq: &PulseSequence,
    config: &SystemConfig,
    spec: GateSpec,
) -> Result<GateReport, GateError> {
    let (t0, t1) = spec
        .kind
        .target_pair()
        .ok_or(GateError::NoSequenceTarget(spec.kind))?;
    let target = config
        .spin(spec.target_spin)
        .ok_or(GateError::UnknownSpin(spec.target_spin))?;
    let r_free = free_rotation(config.omega_n_khz(), seq.total_duration_ns());

    let (f0, f1) = config.conditional_fields(&target.hyperfine);
    let cp_lab = cpmg_conditional_propagators(f0, f1, seq)?;
    let cp = if spec.kind.uses_rotating_frame() {
        into_rotating_frame(&cp_lab, r_free)
    } else {
        cp_lab
    };
    let (fidelity, phi) = pair_fidelity(&cp, t0, t1);

    let mut crosstalk = Vec::new();
    let mut push_bystander = |spin: SpinRef, t: &HyperfineTensor| -> Result<(), GateError> {
        let (f0, f1) = config.conditional_fields(t);
        let cpb = into_rotating_frame(&cpmg_conditional_propagators(f0, f1, seq)?, r_free);
        let fid = 0.5 * (cpb.w0.trace_abs_half() + cpb.w1.trace_abs_half());
        crosstalk.push(CrosstalkEntry {
            spin,
            rotation_angle_rad: 0.5 * (cpb.w0.rotation_angle() + cpb.w1.rotation_angle()),
            crosstalk: 1.0 - fid,
            fidelity: fid,
        });
        Ok(())
    };
    for s in &config.resolved_spins {
        if s.id != spec.target_spin {
            push_bystander(SpinRef::Resolved(s.id), &s.hyperfine)?;
        }
    }
    for (i, t) in config.bath_spins.iter().enumerate() {
        push_bystander(SpinRef::Bath(i), t)?;
    }

    Ok(GateReport {
        spec,
        sequence: *seq,
        target_fidelity: fidelity,
        target_rotation_w0: ConditionalRotation::of(cp.w0),
        target_rotation_w1: ConditionalRotation::of(cp.w1),
        z_frame_rad: phi,
        crosstalk,
        duration_ns: seq.total_duration_ns(),
        software_frame_fallback: false,
    })
}

fn mean_crosstalk(report: &GateReport) -> f64 {
    if report.crosstalk.is_empty() {
        0.0
    } else {
        report.crosstalk.iter().map(|c| c.crosstalk).sum::<f64>() / report.crosstalk.len() as f64
    }
}

/// Search space and cost weights for [`optimize_gate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceSearch {
    pub n_min: u32,
    pub n_max: u32,
    pub tau_min_ns: f64,
    pub tau_max_ns: f64,
    pub tau_step_ns: f64,
    /// Crosstalk weight λ.
    pub lambda: f64,
    /// Normalized-duration weight μ.
    pub mu: f64,
    /// Reject the search entirely when the best cost exceeds this.
    pub cost_ceiling: f64,
}

impl Default for SequenceSearch {
    fn default() -> Self {
        SequenceSearch {
            n_min: 2,
            n_max: 64,
            tau_min_ns: 50.0,
            tau_max_ns: 20_000.0,
            tau_step_ns: 2.0,
            lambda: 1.0,
            mu: 0.1,
            cost_ceiling: 0.5,
        }
    }
}

fn cost_of(report: &GateReport, search: &SequenceSearch) -> f64 {
    let dur_norm =
        report.duration_ns / (2.0 * f64::from(search.n_max) * search.tau_max_ns);
    (1.0 - report.target_fidelity) + search.lambda * mean_crosstalk(report) + search.mu * dur_norm
}

/// Cheap cost used inside the grid scan: same formula, but evaluated straight
/// from the quaternions without building reports.
struct ScanContext {
    target_fields: ([f64; 3], [f64; 3]),
    bystander_fields: Vec<([f64; 3], [f64; 3])>,
    t0: Quat,
    t1: Quat,
    omega_n_khz: f64,
}

impl ScanContext {
    fn cost(&self, n: u32, tau: f64, search: &SequenceSearch) -> f64 {
        let r_free = free_rotation(self.omega_n_khz, 2.0 * f64::from(n) * tau);
        let cp = into_rotating_frame(
            &crate::dynamics::cpmg_conditional_propagators_even(
                self.target_fields.0,
                self.target_fields.1,
                tau,
                n,
            ),
            r_free,
        );
        let (fid, _) = pair_fidelity(&cp, self.t0, self.t1);
        let mut xtalk = 0.0;
        for (f0, f1) in &self.bystander_fields {
            let cpb = into_rotating_frame(
                &crate::dynamics::cpmg_conditional_propagators_even(*f0, *f1, tau, n),
                r_free,
            );
            xtalk += 1.0 - 0.5 * (cpb.w0.trace_abs_half() + cpb.w1.trace_abs_half());
        }
        if !self.bystander_fields.is_empty() {
            xtalk /= self.bystander_fields.len() as f64;
        }
        let dur_norm =
            (2.0 * f64::from(n) * tau) / (2.0 * f64::from(search.n_max) * search.tau_max_ns);
        (1.0 - fid) + search.lambda * xtalk + search.mu * dur_norm
    }
}

/// Designs a gate by scanning even pulse counts and a τ grid, then refining τ
/// by golden section around the best grid point. Z rotations delegate to
/// [`realize_z_rotation`].
pub fn optimize_gate(
    spec: GateSpec,
    config: &SystemConfig,
    search: &SequenceSearch,
) -> Result<GateReport, GateError> {
    match spec.kind {
        GateKind::NuclearZHalfPi => return realize_z_rotation(spec, config, FRAC_PI_2),
        GateKind::NuclearZQuarterPi => return realize_z_rotation(spec, config, FRAC_PI_4),
        GateKind::ElectronSingleQubit => {
            return Ok(GateReport::ideal(spec, 0.0));
        }
        _ => {}
    }
    let (t0, t1) = spec
        .kind
        .target_pair()
        .ok_or(GateError::NoSequenceTarget(spec.kind))?;
    let target = config
        .spin(spec.target_spin)
        .ok_or(GateError::UnknownSpin(spec.target_spin))?;
    let ctx = ScanContext {
        target_fields: config.conditional_fields(&target.hyperfine),
        bystander_fields: config
            .resolved_spins
            .iter()
            .filter(|s| s.id != spec.target_spin)
            .map(|s| config.conditional_fields(&s.hyperfine))
            .chain(
                config
                    .bath_spins
                    .iter()
                    .map(|t| config.conditional_fields(t)),
            )
            .collect(),
        t0,
        t1,
        omega_n_khz: config.omega_n_khz(),
    };

    let n_taus = ((search.tau_max_ns - search.tau_min_ns) / search.tau_step_ns).floor() as usize + 1;
    let ns: Vec<u32> = (search.n_min..=search.n_max)
        .filter(|n| n % 2 == 0 && *n > 0)
        .collect();
    if ns.is_empty() || n_taus == 0 {
        return Err(GateError::NoFeasibleSequence {
            best_cost: f64::INFINITY,
            ceiling: search.cost_ceiling,
        });
    }

    // Parallel over the τ axis; N loop inside each task.
    let per_tau = exec::map_indexed(n_taus, |it| {
        let tau = search.tau_min_ns + it as f64 * search.tau_step_ns;
        let mut best = (f64::INFINITY, ns[0], tau);
        for &n in &ns {
            let c = ctx.cost(n, tau, search);
            if c < best.0 {
                best = (c, n, tau);
            }
        }
        best
    });
    let &(_, best_n, best_tau) = per_tau
        .iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("nonempty scan");

    // Golden refinement of τ at the winning N.
    let (mut lo, mut hi) = (
        (best_tau - search.tau_step_ns).max(search.tau_min_ns),
        (best_tau + search.tau_step_ns).min(search.tau_max_ns),
    );
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (
        ctx.cost(best_n, c, search),
        ctx.cost(best_n, d, search),
    );
    for _ in 0..48 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = ctx.cost(best_n, c, search);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = ctx.cost(best_n, d, search);
        }
    }
    let tau_refined = 0.5 * (lo + hi);
    let refined_cost = ctx.cost(best_n, tau_refined, search);
    let grid_cost = ctx.cost(best_n, best_tau, search);
    // Refinement must never lose to the grid point it started from.
    let tau_final = if refined_cost <= grid_cost { tau_refined } else { best_tau };

    let report = evaluate_sequence(&PulseSequence::cpmg(best_n, tau_final), config, spec)?;
    let final_cost = cost_of(&report, search);
    if final_cost > search.cost_ceiling {
        return Err(GateError::NoFeasibleSequence {
            best_cost: final_cost,
            ceiling: search.cost_ceiling,
        });
    }
    Ok(report)
}

/// Mean conditional-symmetric z phase (rad) the target acquires over an
/// N = 4 unit at half-interval τ.
fn z_phase_at(fields: ([f64; 3], [f64; 3]), tau_ns: f64) -> f64 {
    let cp = crate::dynamics::cpmg_conditional_propagators_even(fields.0, fields.1, tau_ns, 4);
    let angle = |q: Quat| {
        let q = q.canonical();
        2.0 * q.z.atan2(q.w)
    };
    0.5 * (angle(cp.w0) + angle(cp.w1))
}

/// Realizes a nuclear Z rotation as a short N = 4 decoupling unit whose τ is
/// solved so the target acquires the requested phase symmetrically in both
/// manifolds while the electron is echoed. Falls back to a flagged
/// zero-duration software-frame update when the root find fails or the
/// requested angle is (numerically) zero.
pub fn realize_z_rotation(
    spec: GateSpec,
    config: &SystemConfig,
    angle_rad: f64,
) -> Result<GateReport, GateError> {
    let target = config
        .spin(spec.target_spin)
        .ok_or(GateError::UnknownSpin(spec.target_spin))?;
    let fields = config.conditional_fields(&target.hyperfine);

    let software_frame = |reason: &str| {
        let mut rep = GateReport::ideal(spec, 0.0);
        rep.software_frame_fallback = true;
        rep.z_frame_rad = angle_rad;
        let _ = reason;
        rep
    };

    if angle_rad.abs() < 1e-12 {
        // Degenerate zero-duration solution.
        return Ok(software_frame("zero angle"));
    }

    // Bracket the first root of g(τ) = phase(τ) − angle by marching out.
    let g = |tau: f64| z_phase_at(fields, tau) - angle_rad;
    let mut lo = 0.5;
    let mut flo = g(lo);
    let mut hi = lo;
    let mut found = false;
    let mut step = 0.5;
    for _ in 0..4000 {
        hi += step;
        let fhi = g(hi);
        if flo * fhi <= 0.0 {
            found = true;
            break;
        }
        lo = hi;
        flo = fhi;
        step = (step * 1.05).min(5.0);
        if hi > 5000.0 {
            break;
        }
    }
    if !found {
        return Ok(software_frame("no bracket"));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid) * flo <= 0.0 {
            hi = mid;
        } else {
            lo = mid;
            flo = g(lo);
        }
    }
    let tau = 0.5 * (lo + hi);
    evaluate_sequence(&PulseSequence::cpmg(4, tau), config, spec)
}

// ---------------------------------------------------------------------------
// Fidelity benchmarking
// ---------------------------------------------------------------------------

/// Joint electron–nucleus state fidelity to |0↑⟩ via the Z-basis estimator
/// `F = (⟨ZI⟩ + ⟨IZ⟩ + ⟨ZZ⟩ + 1)/4`. Basis order: electron (|0⟩, |−1⟩) ⊗
/// nucleus (|↑⟩, |↓⟩); Z is +1 on |0⟩ and |↑⟩.
pub fn joint_state_fidelity(state: &DensityMatrix) -> f64 {
    assert_eq!(state.rho.n, 4, "joint fidelity needs electron ⊗ one nucleus");
    let diag = |i: usize| state.rho[(i, i)].re;
    let zi = diag(0) + diag(1) - diag(2) - diag(3);
    let iz = diag(0) - diag(1) + diag(2) - diag(3);
    let zz = diag(0) - diag(1) - diag(2) + diag(3);
    0.25 * (zi + iz + zz + 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElectronPrep {
    Zero,
    MinusOne,
    Plus,
    /// Paper protocol for single-qubit gates: run |0⟩ and |−1⟩ preparations
    /// and average the decay curves.
    AverageZeroMinus,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOptions {
    /// Most gate applications in one curve; multiples of the identity period
    /// are sampled up to here.
    pub m_max: u32,
    pub electron_prep: ElectronPrep,
    /// Depolarizing error injected on the target spin per application.
    pub injected_depolarizing: f64,
    /// Hard sequence-length budget (ms) for the longest point.
    pub budget_ms: f64,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions {
            m_max: 40,
            electron_prep: ElectronPrep::AverageZeroMinus,
            injected_depolarizing: 0.0,
            budget_ms: 32.0,
        }
    }
}

/// Linear fit of the state-fidelity decay `F(M) = f_init − M·f_gate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub f_init: f64,
    /// Per-gate infidelity: the (sign-flipped) slope of the linear fit.
    pub f_gate: f64,
    pub residual_rms: f64,
    pub per_m: Vec<(u32, f64)>,
    /// Decay visibly nonlinear; the linear model may over-estimate fidelity.
    pub nonlinear_flag: bool,
}

const NONLINEAR_RESIDUAL_RMS: f64 = 5e-3;

fn ols_fit(points: &[(u32, f64)]) -> (f64, f64, f64) {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(m, f) in points {
        let x = f64::from(m);
        sx += x;
        sy += f;
        sxx += x * x;
        sxy += x * f;
    }
    let denom = n * sxx - sx * sx;
    let slope = if denom.abs() < 1e-30 {
        0.0
    } else {
        (n * sxy - sx * sy) / denom
    };
    let intercept = (sy - slope * sx) / n;
    let mut ss = 0.0;
    for &(m, f) in points {
        let r = f - (intercept + slope * f64::from(m));
        ss += r * r;
    }
    (intercept, slope, (ss / n).sqrt())
}

fn electron_density(prep: ElectronPrep) -> DensityMatrix {
    let amp = match prep {
        ElectronPrep::Zero => [C64::new(1.0, 0.0), C64::new(0.0, 0.0)],
        ElectronPrep::MinusOne => [C64::new(0.0, 0.0), C64::new(1.0, 0.0)],
        ElectronPrep::Plus | ElectronPrep::AverageZeroMinus => [
            C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0),
            C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0),
        ],
    };
    DensityMatrix::from_pure(&amp)
}

fn conditional_gate_unitary(cp: &ConditionalPropagators) -> CMat {
    let mut u = CMat::zeros(4);
    let m0 = cp.w0.to_mat2();
    let m1 = cp.w1.to_mat2();
    for i in 0..2 {
        for j in 0..2 {
            u[(i, j)] = m0.0[i][j];
            u[(2 + i, 2 + j)] = m1.0[i][j];
        }
    }
    u
}

/// Depolarizes the nuclear qubit of an electron ⊗ nucleus density matrix:
/// `ρ → (1−p)·ρ + p·Tr_n(ρ) ⊗ I/2`.
fn depolarize_nucleus(rho: &CMat, p: f64) -> CMat {
    let mut out = CMat::zeros(4);
    // Electron reduced matrix.
    let mut red = CMat::zeros(2);
    for a in 0..2 {
        for b in 0..2 {
            red[(a, b)] = rho[(2 * a, 2 * b)] + rho[(2 * a + 1, 2 * b + 1)];
        }
    }
    for a in 0..2 {
        for b in 0..2 {
            for k in 0..2 {
                out[(2 * a + k, 2 * b + k)] = red[(a, b)] * C64::new(0.5, 0.0);
            }
        }
    }
    let mut res = CMat::zeros(4);
    res.add_assign_scaled(rho, C64::new(1.0 - p, 0.0));
    res.add_assign_scaled(&out, C64::new(p, 0.0));
    res
}

fn fidelity_to_prep(rho: &DensityMatrix, prep: ElectronPrep, joint: bool) -> f64 {
    if !joint {
        // Nuclear state fidelity to |↑⟩, electron traced out.
        return (rho.rho[(0, 0)] + rho.rho[(2, 2)]).re;
    }
    match prep {
        ElectronPrep::Zero => joint_state_fidelity(rho),
        ElectronPrep::MinusOne => {
            // Same Z-basis estimator with the electron axis flipped.
            let diag = |i: usize| rho.rho[(i, i)].re;
            let zi = -(diag(0) + diag(1) - diag(2) - diag(3));
            let iz = diag(0) - diag(1) + diag(2) - diag(3);
            let zz = -(diag(0) - diag(1) - diag(2) + diag(3));
            0.25 * (zi + iz + zz + 1.0)
        }
        ElectronPrep::Plus | ElectronPrep::AverageZeroMinus => {
            // Direct overlap with |+↑⟩; coherences matter here, so the
            // Z-basis estimator does not apply.
            let half = C64::new(0.5, 0.0);
            (half * (rho.rho[(0, 0)] + rho.rho[(0, 2)] + rho.rho[(2, 0)] + rho.rho[(2, 2)])).re
        }
    }
}

fn decay_curve(
    gate: &GateReport,
    f_init: f64,
    prep: ElectronPrep,
    opts: &BenchmarkOptions,
    joint: bool,
) -> Vec<(u32, f64)> {
    let cp = gate.branch_propagators();
    let u = conditional_gate_unitary(&cp);
    let period = gate.spec.kind.identity_period();
    let nuc = {
        let mut m = CMat::zeros(2);
        m[(0, 0)] = C64::new(f_init, 0.0);
        m[(1, 1)] = C64::new(1.0 - f_init, 0.0);
        DensityMatrix { rho: m }
    };
    let mut rho = electron_density(prep).kron(&nuc);
    let mut points = Vec::new();
    points.push((0, fidelity_to_prep(&rho, prep, joint)));
    let mut m_applied = 0u32;
    while m_applied + period <= opts.m_max {
        for _ in 0..period {
            rho.evolve(&u);
            if opts.injected_depolarizing > 0.0 {
                rho.rho = depolarize_nucleus(&rho.rho, 2.0 * opts.injected_depolarizing);
            }
        }
        m_applied += period;
        points.push((m_applied, fidelity_to_prep(&rho, prep, joint)));
    }
    points
}

/// Repeated-gate fidelity-decay benchmark.
///
/// Applies the achieved gate in identity-period multiples up to `m_max`,
/// measures the target-spin state fidelity (joint electron–nucleus fidelity
/// for the entangling gate), and fits `F(M) = f_init − M·f_gate`. Single-
/// qubit gates average the |0⟩ and |−1⟩ electron preparations.
pub fn benchmark_gate_decay(
    gate: &GateReport,
    config: &SystemConfig,
    _noise: &NoiseModel,
    opts: &BenchmarkOptions,
) -> Result<DecayFit, GateError> {
    let spin = config
        .spin(gate.spec.target_spin)
        .ok_or(GateError::UnknownSpin(gate.spec.target_spin))?;
    let total_ms = f64::from(opts.m_max) * gate.duration_ns * 1e-6;
    if total_ms > opts.budget_ms {
        return Err(GateError::BudgetExceeded {
            total_ms,
            budget_ms: opts.budget_ms,
        });
    }
    let joint = gate.spec.kind == GateKind::ControlledXHalfPi;

    let points = match (joint, opts.electron_prep) {
        (false, ElectronPrep::AverageZeroMinus) => {
            let a = decay_curve(gate, spin.f_init, ElectronPrep::Zero, opts, false);
            let b = decay_curve(gate, spin.f_init, ElectronPrep::MinusOne, opts, false);
            a.into_iter()
                .zip(b)
                .map(|((m, fa), (_, fb))| (m, 0.5 * (fa + fb)))
                .collect()
        }
        (_, prep) => decay_curve(gate, spin.f_init, prep, opts, joint),
    };

    let (f_init, slope, residual_rms) = ols_fit(&points);
    Ok(DecayFit {
        f_init,
        f_gate: -slope,
        residual_rms,
        nonlinear_flag: residual_rms > NONLINEAR_RESIDUAL_RMS,
        per_m: points,
    })
}

/// Samples `n` unresolved bath tensors with |Azz| and Azx uniform below
/// `bound_khz`, deterministic under the seed. The Azx sign is a frame choice,
/// so it is drawn non-negative; the transverse diagonal completes tracelessly.
pub fn sample_bath(n: usize, bound_khz: f64, seed: u64) -> Vec<HyperfineTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let azz = rng.gen_range(-bound_khz..bound_khz);
            let azx = rng.gen_range(0.0..bound_khz);
            HyperfineTensor::weak_coupling(azz, azx)
        })
        .collect()
}

/// Parses a gate-parameter table (`spin_id,gate_kind,n_pulses,tau_ns`,
/// header mandatory).
pub fn import_gate_table_csv<R: std::io::BufRead>(
    r: R,
) -> Result<Vec<(u32, GateKind, u32, f64)>, GateError> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| GateError::Table("empty gate table".into()))?
        .map_err(|e| GateError::Table(e.to_string()))?;
    if header.trim() != "spin_id,gate_kind,n_pulses,tau_ns" {
        return Err(GateError::Table(format!(
            "expected header 'spin_id,gate_kind,n_pulses,tau_ns', got '{header}'"
        )));
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| GateError::Table(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 4 {
            return Err(GateError::Table(format!("row {}: expected 4 fields", i + 2)));
        }
        let row_err = |e: String| GateError::Table(format!("row {}: {e}", i + 2));
        rows.push((
            f[0].parse::<u32>().map_err(|e| row_err(e.to_string()))?,
            GateKind::parse(f[1])?,
            f[2].parse::<u32>().map_err(|e| row_err(e.to_string()))?,
            f[3].parse::<f64>().map_err(|e| row_err(e.to_string()))?,
        ));
    }
    Ok(rows)
}
