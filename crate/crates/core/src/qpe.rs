//! Adaptive quantum-phase-estimation frequency measurement and the joint
//! hyperfine refinement.
//!
//! A run is a sequence of Ramsey experiments with halving precession times
//! `t_n = 2^(N−n)·t_min`. Step n reads the n-th least significant binary
//! digit of the frequency: the measurement probability is
//! `P = (1 + C·cos(2π·f·t − θ))/2`, the digit is `k = 0` for `P > 0.5`, and
//! the basis angle updates as `θ ← θ/2 + k·π/2` so phase from already-read
//! digits cancels. The θ halving also carries the initial π/2 down the
//! sequence, which centers every step on the middle of its digit bin: with
//! `f = K·f0 + f0/2` every noiseless probability is exactly 0 or 1.
//!
//! The digit string determines `f` modulo `1/t_min`; the center-of-bin
//! estimate `Σ 2^(n−1)·k_n·f0 + f0/2` minimizes the worst-case error over
//! the residual. Frequencies that the rough-fit prior places beyond the
//! paper-style validity window `1/(2·t_min)` are flagged and unwrapped onto
//! the alias ladder `f̂ + m/t_min` nearest the prior.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{sample_detuning_khz, sample_shots_with, ShotEstimate};
use crate::exec;
use crate::spin_model::{
    floquet_hamiltonians, invert_hyperfine, precession_axis_frequency, BxCorrection,
    HyperfineTensor, MagneticField, PhysicalConstants, SystemConfig,
};
use crate::units;

#[derive(Debug, Error)]
pub enum QpeError {
    #[error("invalid qpe config: {0}")]
    InvalidConfig(String),
    #[error("unknown spin id {0}")]
    UnknownSpin(u32),
    #[error("backend failure at step {step}: {message}")]
    Backend {
        step: usize,
        message: String,
        partial: Box<QpeRecord>,
    },
    #[error("replay divergence at step {step}: {message}")]
    ReplayDivergence { step: usize, message: String },
    #[error("refinement needs at least one measured spin")]
    NoSpins,
    #[error(transparent)]
    Model(#[from] crate::spin_model::ModelError),
}

/// Configuration of one adaptive QPE run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpeConfig {
    pub t_min_ns: f64,
    pub n_steps: u32,
    pub shots: u64,
    pub theta_1_rad: f64,
    /// Include the Gaussian T2* envelope in the contrast model.
    pub t2star_decay: bool,
    /// Per-shot quasi-static detuning width (kHz); 0 disables sampling.
    pub detuning_sigma_khz: f64,
    pub seed: u64,
}

impl Default for QpeConfig {
    fn default() -> Self {
        QpeConfig {
            t_min_ns: 800.0,
            n_steps: 7,
            shots: 1000,
            theta_1_rad: std::f64::consts::FRAC_PI_2,
            t2star_decay: true,
            detuning_sigma_khz: 0.0,
            seed: 0,
        }
    }
}

impl QpeConfig {
    pub fn validate(&self) -> Result<(), QpeError> {
        if !(self.t_min_ns > 0.0) || self.n_steps == 0 || self.shots == 0 {
            return Err(QpeError::InvalidConfig(format!(
                "need t_min > 0, n_steps >= 1, shots >= 1; got {self:?}"
            )));
        }
        Ok(())
    }

    /// Precession time of step n (1-based): `2^(N−n)·t_min`.
    pub fn t_n_ns(&self, n: u32) -> f64 {
        self.t_min_ns * f64::from(1u32 << (self.n_steps - n))
    }

    /// Frequency resolution `f0 = 1/(2^N·t_min)` in kHz.
    pub fn f0_khz(&self) -> f64 {
        1e6 / (f64::from(1u32 << self.n_steps) * self.t_min_ns)
    }

    /// Upper edge of the estimator's unambiguous range, `1/t_min`, in kHz.
    pub fn unambiguous_range_khz(&self) -> f64 {
        1e6 / self.t_min_ns
    }
}

/// One Ramsey step of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QpeStep {
    pub n: u32,
    pub t_ns: f64,
    pub theta_rad: f64,
    pub p_hat: f64,
    pub std_err: f64,
    pub shots: u64,
    pub k: u8,
    /// |p̂ − 0.5| / stderr; 0 flags an exact tie broken toward k = 0.
    pub confidence: f64,
    pub zero_confidence: bool,
}

/// Full log of one adaptive run plus the frequency estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QpeRecord {
    pub steps: Vec<QpeStep>,
    pub f_estimate_khz: f64,
    /// Half-width of the estimate bin, f0/2.
    pub f_error_khz: f64,
    pub f0_khz: f64,
    /// Electron manifold the run was conditioned on (+1 or −1).
    pub manifold_ms: i8,
    pub spin_id: Option<u32>,
    pub seed: u64,
    /// Prior window said the true frequency may exceed 1/(2·t_min).
    pub aliasing_flag: bool,
    /// Estimate unwrapped onto the alias ladder nearest the prior.
    pub f_unwrapped_khz: Option<f64>,
}

/// Ideal Ramsey probability `P = (1 + C·cos(2π·f·t − θ))/2`.
pub fn ramsey_probability(f_khz: f64, t_ns: f64, theta_rad: f64, contrast: f64) -> f64 {
    0.5 * (1.0 + contrast * (units::phase_rad(f_khz, t_ns) - theta_rad).cos())
}

/// Digit decision: `k = 0` for p̂ above one half, `k = 1` below; an exact
/// tie breaks to 0 and is flagged.
pub fn digit_decision(p_hat: f64) -> (u8, bool) {
    if p_hat < 0.5 {
        (1, false)
    } else {
        (0, p_hat == 0.5)
    }
}

/// Basis update `θ ← θ/2 + k·π/2`, reduced mod 2π.
pub fn update_basis(theta_rad: f64, k: u8) -> f64 {
    (0.5 * theta_rad + f64::from(k) * std::f64::consts::FRAC_PI_2)
        .rem_euclid(std::f64::consts::TAU)
}

/// Center-of-bin estimate from the digit string (LSB first).
pub fn frequency_from_digits(digits: &[u8], f0_khz: f64) -> f64 {
    let k: f64 = digits
        .iter()
        .enumerate()
        .map(|(i, &k)| f64::from(k) * f64::from(1u32 << i))
        .sum();
    (k + 0.5) * f0_khz
}

/// Answers one Ramsey query `(t, θ) → p̂`.
pub trait MeasurementBackend {
    fn measure(&mut self, step: usize, t_ns: f64, theta_rad: f64) -> Result<ShotEstimate, String>;
}

/// Simulator-backed source: exact per-manifold precession frequency from the
/// rotating-frame model, contrast from polarization and optional T2* decay,
/// optional quasi-static detuning per shot, binomial shot sampling.
pub struct SimulatorBackend {
    pub f_khz: f64,
    /// Static contrast 2·F_init − 1 from the polarization fidelity.
    pub contrast: f64,
    pub t2star_ms: Option<f64>,
    pub detuning_sigma_khz: f64,
    pub shots: u64,
    rng: ChaCha8Rng,
}

impl SimulatorBackend {
    pub fn new(f_khz: f64, f_init: f64, t2star_ms: Option<f64>, cfg: &QpeConfig) -> Self {
        SimulatorBackend {
            f_khz,
            contrast: 2.0 * f_init - 1.0,
            t2star_ms,
            detuning_sigma_khz: cfg.detuning_sigma_khz,
            shots: cfg.shots,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        }
    }

    fn contrast_at(&self, t_ns: f64) -> f64 {
        let mut c = self.contrast;
        if let Some(t2) = self.t2star_ms {
            let t_ms = units::ms_from_ns(t_ns);
            c *= (-(t_ms / t2).powi(2)).exp();
        }
        c
    }
}

impl MeasurementBackend for SimulatorBackend {
    fn measure(&mut self, _step: usize, t_ns: f64, theta_rad: f64) -> Result<ShotEstimate, String> {
        let c = self.contrast_at(t_ns);
        if self.detuning_sigma_khz > 0.0 {
            // Shot-wise quasi-static detuning: one Bernoulli draw per shot.
            let mut hits = 0u64;
            for _ in 0..self.shots {
                let df = sample_detuning_khz(self.detuning_sigma_khz, &mut self.rng);
                let p = ramsey_probability(self.f_khz + df, t_ns, theta_rad, c);
                if rand::Rng::gen_bool(&mut self.rng, p.clamp(0.0, 1.0)) {
                    hits += 1;
                }
            }
            let p_hat = hits as f64 / self.shots as f64;
            Ok(ShotEstimate {
                p_hat,
                std_err: (p_hat * (1.0 - p_hat) / self.shots as f64).sqrt(),
                shots: self.shots,
            })
        } else {
            let p = ramsey_probability(self.f_khz, t_ns, theta_rad, c);
            Ok(sample_shots_with(p, self.shots, &mut self.rng))
        }
    }
}

/// Noiseless, infinite-shot backend; p̂ equals the ideal probability.
pub struct IdealBackend {
    pub f_khz: f64,
    pub contrast: f64,
}

impl MeasurementBackend for IdealBackend {
    fn measure(&mut self, _step: usize, t_ns: f64, theta_rad: f64) -> Result<ShotEstimate, String> {
        let p = ramsey_probability(self.f_khz, t_ns, theta_rad, self.contrast);
        Ok(ShotEstimate {
            p_hat: p,
            std_err: 0.0,
            shots: u64::MAX,
        })
    }
}

/// Replays a recorded measurement file; bit-reproducible by construction.
/// Rows must match the requested schedule: `t` within 0.5 ns and `θ` within
/// 1e-9 rad, otherwise the replay has diverged from the recorded run.
pub struct ReplayBackend {
    pub rows: Vec<ReplayRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplayRow {
    pub step: u32,
    pub t_ns: f64,
    pub theta_rad: f64,
    pub p_hat: f64,
    pub std_err: f64,
    pub shots: u64,
}

impl ReplayBackend {
    /// Parses the measurement-record CSV
    /// (`step,t_ns,theta_rad,p_hat,stderr,shots`, header mandatory).
    pub fn from_csv<R: std::io::BufRead>(r: R) -> Result<Self, QpeError> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| QpeError::InvalidConfig("empty replay file".into()))?
            .map_err(|e| QpeError::InvalidConfig(e.to_string()))?;
        if header.trim() != "step,t_ns,theta_rad,p_hat,stderr,shots" {
            return Err(QpeError::InvalidConfig(format!(
                "expected replay header 'step,t_ns,theta_rad,p_hat,stderr,shots', got '{header}'"
            )));
        }
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| QpeError::InvalidConfig(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 6 {
                return Err(QpeError::InvalidConfig(format!(
                    "replay row {}: expected 6 fields",
                    i + 2
                )));
            }
            let parse_err = |e: std::num::ParseFloatError| {
                QpeError::InvalidConfig(format!("replay row {}: {e}", i + 2))
            };
            rows.push(ReplayRow {
                step: fields[0]
                    .parse()
                    .map_err(|e| QpeError::InvalidConfig(format!("replay row {}: {e}", i + 2)))?,
                t_ns: fields[1].parse().map_err(parse_err)?,
                theta_rad: fields[2].parse().map_err(parse_err)?,
                p_hat: fields[3].parse().map_err(parse_err)?,
                std_err: fields[4].parse().map_err(parse_err)?,
                shots: fields[5]
                    .parse()
                    .map_err(|e| QpeError::InvalidConfig(format!("replay row {}: {e}", i + 2)))?,
            });
        }
        Ok(ReplayBackend { rows })
    }

    pub fn to_csv<W: std::io::Write>(rows: &[ReplayRow], mut w: W) -> std::io::Result<()> {
        writeln!(w, "step,t_ns,theta_rad,p_hat,stderr,shots")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.t_ns, r.theta_rad, r.p_hat, r.std_err, r.shots
            )?;
        }
        Ok(())
    }
}

impl MeasurementBackend for ReplayBackend {
    fn measure(&mut self, step: usize, t_ns: f64, theta_rad: f64) -> Result<ShotEstimate, String> {
        let row = self
            .rows
            .get(step - 1)
            .ok_or_else(|| format!("replay exhausted at step {step}"))?;
        if (row.t_ns - t_ns).abs() > 0.5 {
            return Err(format!(
                "recorded t = {} ns but schedule asks {} ns",
                row.t_ns, t_ns
            ));
        }
        if (row.theta_rad - theta_rad).abs() > 1e-9 {
            return Err(format!(
                "recorded theta = {} but update rule gives {}",
                row.theta_rad, theta_rad
            ));
        }
        Ok(ShotEstimate {
            p_hat: row.p_hat,
            std_err: row.std_err,
            shots: row.shots,
        })
    }
}

/// Runs the N-step adaptive sequence against a backend.
pub fn run_adaptive_qpe<B: MeasurementBackend>(
    backend: &mut B,
    cfg: &QpeConfig,
    manifold_ms: i8,
) -> Result<QpeRecord, QpeError> {
    cfg.validate()?;
    let f0 = cfg.f0_khz();
    let mut steps: Vec<QpeStep> = Vec::with_capacity(cfg.n_steps as usize);
    let mut theta = cfg.theta_1_rad;
    let mut digits: Vec<u8> = Vec::with_capacity(cfg.n_steps as usize);

    for n in 1..=cfg.n_steps {
        let t_ns = cfg.t_n_ns(n);
        let est = match backend.measure(n as usize, t_ns, theta) {
            Ok(e) => e,
            Err(message) => {
                let partial = QpeRecord {
                    steps,
                    f_estimate_khz: f64::NAN,
                    f_error_khz: 0.5 * f0,
                    f0_khz: f0,
                    manifold_ms,
                    spin_id: None,
                    seed: cfg.seed,
                    aliasing_flag: false,
                    f_unwrapped_khz: None,
                };
                return Err(QpeError::Backend {
                    step: n as usize,
                    message,
                    partial: Box::new(partial),
                });
            }
        };
        let (k, tie) = digit_decision(est.p_hat);
        let confidence = if est.std_err > 0.0 {
            (est.p_hat - 0.5).abs() / est.std_err
        } else if tie {
            0.0
        } else {
            f64::INFINITY
        };
        steps.push(QpeStep {
            n,
            t_ns,
            theta_rad: theta,
            p_hat: est.p_hat,
            std_err: est.std_err,
            shots: est.shots,
            k,
            confidence,
            zero_confidence: tie,
        });
        digits.push(k);
        theta = update_basis(theta, k);
    }

    Ok(QpeRecord {
        f_estimate_khz: frequency_from_digits(&digits, f0),
        f_error_khz: 0.5 * f0,
        f0_khz: f0,
        steps,
        manifold_ms,
        spin_id: None,
        seed: cfg.seed,
        aliasing_flag: false,
        f_unwrapped_khz: None,
    })
}

/// Unwraps an estimate onto `f̂ + m/t_min` nearest the prior (m ≥ 0).
pub fn unwrap_alias(f_estimate_khz: f64, range_khz: f64, prior_khz: f64) -> f64 {
    let m = ((prior_khz - f_estimate_khz) / range_khz).round().max(0.0);
    f_estimate_khz + m * range_khz
}

/// Both-manifold frequency measurement of one resolved spin against the
/// simulator backend.
///
/// The electron is prepared in |+1⟩ then |−1⟩; the other nuclei stay
/// maximally mixed and never enter the target's Ramsey phase, because the
/// per-manifold Hamiltonians carry no inter-nuclear terms. Priors for the
/// aliasing check come from the config's current hyperfine estimates.
pub fn measure_frequency_pair(
    config: &SystemConfig,
    spin_id: u32,
    cfg: &QpeConfig,
) -> Result<(QpeRecord, QpeRecord), QpeError> {
    let spin = config
        .spin(spin_id)
        .ok_or(QpeError::UnknownSpin(spin_id))?;
    let nh = floquet_hamiltonians(&config.constants, &config.field, &spin.hyperfine)?;

    let run = |ms: i8, seed_salt: u64| -> Result<QpeRecord, QpeError> {
        let f_true = precession_axis_frequency(&nh.for_ms(ms)).freq_khz;
        let mut cfg_run = *cfg;
        cfg_run.seed = cfg.seed ^ (u64::from(spin_id) << 32) ^ seed_salt;
        let t2 = cfg.t2star_decay.then_some(spin.t2star_ms.unwrap_or(10.0));
        let mut backend = SimulatorBackend::new(f_true, spin.f_init, t2, &cfg_run);
        let mut rec = run_adaptive_qpe(&mut backend, &cfg_run, ms)?;
        rec.spin_id = Some(spin_id);

        // Aliasing: the prior is the secular prediction from the config.
        let (azz, azx) = spin.hyperfine.secular();
        let omega_n = config.omega_n_khz();
        let (fp, fm) = crate::spin_model::precession_frequencies_secular(azz, azx, omega_n);
        let plus_ms = config.branch_mapping.plus_branch_ms;
        let prior = if ms == plus_ms { fp } else { fm };
        if prior > 0.5 * cfg.unambiguous_range_khz() {
            rec.aliasing_flag = true;
            rec.f_unwrapped_khz = Some(unwrap_alias(
                rec.f_estimate_khz,
                cfg.unambiguous_range_khz(),
                prior,
            ));
        }
        Ok(rec)
    };

    Ok((run(1, 0x9e37_79b9)?, run(-1, 0x517c_c1b7)?))
}

// ---------------------------------------------------------------------------
// Joint hyperfine refinement
// ---------------------------------------------------------------------------

/// Measured frequency triple of one spin entering the refinement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpinFrequencies {
    pub id: u32,
    pub f_plus_khz: f64,
    pub f_minus_khz: f64,
    pub omega_n_khz: f64,
    pub omega_n_err_khz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefinedSpin {
    pub id: u32,
    pub azz_khz: f64,
    pub azx_khz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RefineResult {
    pub spins: Vec<RefinedSpin>,
    pub bx_g: f64,
    /// Shared bare Larmor frequency recovered by the fit.
    pub omega_n_true_khz: f64,
    pub residual: f64,
    /// Bx pinned at the calibration bound: treat as model mismatch.
    pub bx_at_bound: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    pub bx_bound_g: f64,
    /// Huber scale (kHz) for the ωn-channel residuals. The quoted ωn errors
    /// are a few hundredths of a kHz while spin-to-spin scatter is an order
    /// of magnitude larger, so a robust loss keeps unmodeled drift from
    /// dragging the transverse-field estimate.
    pub huber_delta_khz: f64,
    pub bx_grid_step_g: f64,
}

impl Default for RefineOptions {
    fn default() -> Self {
        RefineOptions {
            bx_bound_g: 2.5,
            huber_delta_khz: 0.015,
            bx_grid_step_g: 0.05,
        }
    }
}

fn huber(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// Inverts every spin at a candidate Bx and predicts its ms = 0 precession
/// frequency from the rotating-frame model at a candidate shared Larmor.
fn refine_objective(
    inputs: &[SpinFrequencies],
    constants: &PhysicalConstants,
    bz_g: f64,
    bx_g: f64,
    omega_n_true_khz: f64,
    delta: f64,
) -> Option<f64> {
    let gamma_n = constants.gamma_n_khz_per_g;
    let bz_eff = omega_n_true_khz / gamma_n;
    let field = MagneticField {
        bz_g: bz_eff,
        bx_g,
        by_g: 0.0,
    };
    let corr = BxCorrection::new(bx_g, *constants, bz_g);
    let mut acc = 0.0;
    for s in inputs {
        let inv = invert_hyperfine(s.f_plus_khz, s.f_minus_khz, s.omega_n_khz, Some(&corr)).ok()?;
        let t = HyperfineTensor::weak_coupling(inv.azz_khz, inv.azx_khz);
        let nh = floquet_hamiltonians(constants, &field, &t).ok()?;
        let f0_model = precession_axis_frequency(&nh.h_zero).freq_khz;
        acc += huber(f0_model - s.omega_n_khz, delta);
    }
    Some(acc)
}

fn golden_min<F: Fn(f64) -> f64>(mut lo: f64, mut hi: f64, f: F, iters: u32) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iters {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    let x = 0.5 * (lo + hi);
    let fx = f(x);
    if fc < fd && fc < fx {
        (c, fc)
    } else if fd <= fc && fd < fx {
        (d, fd)
    } else {
        (x, fx)
    }
}

/// Joint least-squares refinement of all measured spins with one shared
/// transverse field Bx ∈ [0, bound].
///
/// Per-spin (Azz, Azx) are profiled out exactly by the corrected inversion at
/// each candidate Bx, so the branch-frequency channel is fit perfectly and
/// identification of Bx comes from the per-spin ms = 0 frequencies: their
/// spread versus Azx is the transverse-field signature. A shared bare Larmor
/// frequency is profiled in the inner loop. With a single spin the problem is
/// exactly determined and the fit falls back to zeroth-order inversion.
pub fn refine_hyperfine(
    inputs: &[SpinFrequencies],
    constants: &PhysicalConstants,
    bz_g: f64,
    opts: &RefineOptions,
) -> Result<RefineResult, QpeError> {
    if inputs.is_empty() {
        return Err(QpeError::NoSpins);
    }
    if inputs.len() == 1 {
        let s = &inputs[0];
        let inv = invert_hyperfine(s.f_plus_khz, s.f_minus_khz, s.omega_n_khz, None)?;
        return Ok(RefineResult {
            spins: vec![RefinedSpin {
                id: s.id,
                azz_khz: inv.azz_khz,
                azx_khz: inv.azx_khz,
            }],
            bx_g: 0.0,
            omega_n_true_khz: s.omega_n_khz,
            residual: 0.0,
            bx_at_bound: false,
        });
    }

    let omega_mean =
        inputs.iter().map(|s| s.omega_n_khz).sum::<f64>() / inputs.len() as f64;
    let objective_at_bx = |bx: f64| -> f64 {
        // Profile the shared Larmor over a ±2 kHz window around the mean.
        let f = |w: f64| {
            refine_objective(inputs, constants, bz_g, bx, w, opts.huber_delta_khz)
                .unwrap_or(f64::INFINITY)
        };
        golden_min(omega_mean - 2.0, omega_mean + 2.0, f, 48).1
    };

    let n_grid = (opts.bx_bound_g / opts.bx_grid_step_g).round() as usize + 1;
    let grid: Vec<f64> = (0..n_grid)
        .map(|i| (i as f64 * opts.bx_grid_step_g).min(opts.bx_bound_g))
        .collect();
    let costs = exec::map_slice(&grid, |&bx| objective_at_bx(bx));
    let (best_i, _) = costs
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, &c)| (i, c))
        .expect("nonempty grid");

    let lo = grid[best_i.saturating_sub(1)];
    let hi = grid[(best_i + 1).min(grid.len() - 1)];
    let (bx_best, _) = if hi > lo {
        golden_min(lo, hi, objective_at_bx, 40)
    } else {
        (grid[best_i], costs[best_i])
    };

    let f = |w: f64| {
        refine_objective(inputs, constants, bz_g, bx_best, w, opts.huber_delta_khz)
            .unwrap_or(f64::INFINITY)
    };
    let (omega_true, residual) = golden_min(omega_mean - 2.0, omega_mean + 2.0, f, 60);

    // Final parameters: corrected inversion at the fitted Bx, each spin using
    // its own measured ωn as the paper's pipeline does.
    let corr = BxCorrection::new(bx_best, *constants, bz_g);
    let mut spins = Vec::with_capacity(inputs.len());
    for s in inputs {
        let inv = invert_hyperfine(s.f_plus_khz, s.f_minus_khz, s.omega_n_khz, Some(&corr))?;
        spins.push(RefinedSpin {
            id: s.id,
            azz_khz: inv.azz_khz,
            azx_khz: inv.azx_khz,
        });
    }
    Ok(RefineResult {
        spins,
        bx_g: bx_best,
        omega_n_true_khz: omega_true,
        residual,
        bx_at_bound: (bx_best - opts.bx_bound_g).abs() < 1e-6,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    #[test]
    fn ramsey_aligned_basis_gives_unity() {
        let theta = units::phase_rad(410.0, 1600.0);
        assert_relative_eq!(ramsey_probability(410.0, 1600.0, theta, 1.0), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ramsey_zero_contrast_is_half() {
        for f in [10.0, 333.3, 1100.0] {
            assert_eq!(ramsey_probability(f, 900.0, 0.3, 0.0), 0.5);
        }
    }

    #[test]
    fn ramsey_worked_phase_example() {
        // f = 546.875 kHz over 3.2 μs puts the phase at 1.5π; θ = π/2 gives 0.
        let p = ramsey_probability(546.875, 3200.0, FRAC_PI_2, 1.0);
        assert_relative_eq!(p, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn digit_decision_cases() {
        assert_eq!(digit_decision(0.9), (0, false));
        assert_eq!(digit_decision(0.1), (1, false));
        assert_eq!(digit_decision(0.5), (0, true));
    }

    #[test]
    fn basis_update_examples() {
        assert_relative_eq!(update_basis(FRAC_PI_2, 1), 3.0 * PI / 4.0, epsilon = 1e-15);
        assert_relative_eq!(update_basis(FRAC_PI_2, 0), PI / 4.0, epsilon = 1e-15);
        assert_relative_eq!(update_basis(3.0 * PI / 4.0, 1), 7.0 * PI / 8.0, epsilon = 1e-15);
    }

    #[test]
    fn worked_three_step_run() {
        // N = 3, t_min = 800 ns, f = 546.875 kHz: digits (1,1,0) read from
        // probabilities (0, 0, 1), estimate exact.
        let cfg = QpeConfig {
            n_steps: 3,
            t2star_decay: false,
            ..QpeConfig::default()
        };
        assert_relative_eq!(cfg.f0_khz(), 156.25, epsilon = 1e-12);
        let mut backend = IdealBackend {
            f_khz: 546.875,
            contrast: 1.0,
        };
        let rec = run_adaptive_qpe(&mut backend, &cfg, 1).unwrap();
        let ps: Vec<f64> = rec.steps.iter().map(|s| s.p_hat).collect();
        assert_relative_eq!(ps[0], 0.0, epsilon = 1e-9);
        assert_relative_eq!(ps[1], 0.0, epsilon = 1e-9);
        assert_relative_eq!(ps[2], 1.0, epsilon = 1e-9);
        let ks: Vec<u8> = rec.steps.iter().map(|s| s.k).collect();
        assert_eq!(ks, vec![1, 1, 0]);
        assert_relative_eq!(rec.f_estimate_khz, 546.875, epsilon = 1e-9);
    }

    #[test]
    fn all_zero_digit_case() {
        let cfg = QpeConfig {
            n_steps: 3,
            t2star_decay: false,
            ..QpeConfig::default()
        };
        let f = 0.5 * cfg.f0_khz();
        let mut backend = IdealBackend { f_khz: f, contrast: 1.0 };
        let rec = run_adaptive_qpe(&mut backend, &cfg, 1).unwrap();
        assert!(rec.steps.iter().all(|s| (s.p_hat - 1.0).abs() < 1e-9));
        assert!(rec.steps.iter().all(|s| s.k == 0));
        assert_relative_eq!(rec.f_estimate_khz, f, epsilon = 1e-12);
    }

    #[test]
    fn first_step_probability_washes_out_with_decay() {
        // t_1/T2* ≫ 1 pushes the first-step probability to 0.5.
        let cfg = QpeConfig {
            n_steps: 10,
            t2star_decay: true,
            ..QpeConfig::default()
        };
        let mut backend = SimulatorBackend::new(537.1, 0.95, Some(0.05), &cfg);
        let c = backend.contrast_at(cfg.t_n_ns(1));
        assert!(c < 1e-6);
        let est = backend.measure(1, cfg.t_n_ns(1), FRAC_PI_2).unwrap();
        assert!((est.p_hat - 0.5).abs() < 0.06);
    }

    #[test]
    fn alias_unwrap_picks_nearest_ladder_point() {
        assert_relative_eq!(unwrap_alias(100.0, 1250.0, 1400.0), 1350.0, epsilon = 1e-12);
        assert_relative_eq!(unwrap_alias(100.0, 1250.0, 120.0), 100.0, epsilon = 1e-12);
        // Never unwraps downward.
        assert_relative_eq!(unwrap_alias(900.0, 1250.0, 100.0), 900.0, epsilon = 1e-12);
    }

    #[test]
    fn replay_round_trip_and_divergence() {
        let rows = vec![
            ReplayRow {
                step: 1,
                t_ns: 3200.0,
                theta_rad: FRAC_PI_2,
                p_hat: 0.1,
                std_err: 0.01,
                shots: 1000,
            },
            ReplayRow {
                step: 2,
                t_ns: 1600.0,
                theta_rad: 3.0 * PI / 4.0,
                p_hat: 0.2,
                std_err: 0.01,
                shots: 1000,
            },
            ReplayRow {
                step: 3,
                t_ns: 800.0,
                theta_rad: 7.0 * PI / 8.0,
                p_hat: 0.9,
                std_err: 0.01,
                shots: 1000,
            },
        ];
        let mut buf = Vec::new();
        ReplayBackend::to_csv(&rows, &mut buf).unwrap();
        let mut backend = ReplayBackend::from_csv(std::io::BufReader::new(&buf[..])).unwrap();
        let cfg = QpeConfig {
            n_steps: 3,
            ..QpeConfig::default()
        };
        let rec = run_adaptive_qpe(&mut backend, &cfg, -1).unwrap();
        assert_eq!(rec.steps.len(), 3);
        assert_eq!(rec.steps[0].k, 1);

        // A record whose theta does not follow from the digits diverges.
        let mut bad = rows.clone();
        bad[1].theta_rad = 0.1;
        let mut backend = ReplayBackend { rows: bad };
        let err = run_adaptive_qpe(&mut backend, &cfg, -1).unwrap_err();
        match err {
            QpeError::Backend { step, partial, .. } => {
                assert_eq!(step, 2);
                assert_eq!(partial.steps.len(), 1);
            }
            other => panic!("expected backend error, got {other:?}"),
        }
    }

    proptest! {
        /// Telescoping: for center-of-bin frequencies every noiseless
        /// probability is exactly 0 or 1 and the digits are read back.
        #[test]
        fn center_of_bin_probabilities_are_extremal(bits in 1u32..=9, k in 0u32..512) {
            let cfg = QpeConfig {
                n_steps: bits,
                t2star_decay: false,
                ..QpeConfig::default()
            };
            let k = k % (1u32 << bits);
            let f = (k as f64 + 0.5) * cfg.f0_khz();
            let mut backend = IdealBackend { f_khz: f, contrast: 1.0 };
            let rec = run_adaptive_qpe(&mut backend, &cfg, 1).unwrap();
            for s in &rec.steps {
                prop_assert!(s.p_hat < 1e-9 || s.p_hat > 1.0 - 1e-9);
            }
            prop_assert!((rec.f_estimate_khz - f).abs() < 1e-9);
            // Digit string equals the binary expansion, LSB first.
            for (i, s) in rec.steps.iter().enumerate() {
                prop_assert_eq!(u32::from(s.k), (k >> i) & 1);
            }
        }

        /// Correct digits bound the error by f0/2 for any in-range frequency.
        #[test]
        fn estimate_bound_holds_noiseless(f in 1f64..1249.0) {
            let cfg = QpeConfig {
                n_steps: 8,
                t2star_decay: false,
                ..QpeConfig::default()
            };
            let mut backend = IdealBackend { f_khz: f, contrast: 1.0 };
            let rec = run_adaptive_qpe(&mut backend, &cfg, 1).unwrap();
            prop_assert!((rec.f_estimate_khz - f).abs() <= 0.5 * cfg.f0_khz() + 1e-9);
        }

        /// Doubling the step count halves the worst-case error.
        #[test]
        fn monotone_precision(bits in 1u32..=8) {
            let a = QpeConfig { n_steps: bits, ..QpeConfig::default() };
            let b = QpeConfig { n_steps: bits + 1, ..QpeConfig::default() };
            prop_assert!((b.f0_khz() - 0.5 * a.f0_khz()).abs() < 1e-12);
        }
    }
}
