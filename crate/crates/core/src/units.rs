//! Unit conventions and the single conversion boundary.
//!
//! Public interfaces speak ordinary-frequency kHz, gauss, and nanoseconds.
//! Propagators and interference phases need angular frequency; the rule is
//! 1 kHz = 2π rad/ms, and times convert ns → ms. Every phase in the crate is
//! produced by [`phase_rad`] or [`angular_rad_per_ms`] so the 2π lives here
//! and nowhere else.

use std::f64::consts::TAU;

/// Angular frequency (rad/ms) of an ordinary frequency in kHz.
#[inline]
pub fn angular_rad_per_ms(f_khz: f64) -> f64 {
    TAU * f_khz
}

/// Ordinary frequency (kHz) of an angular frequency in rad/ms.
#[inline]
pub fn khz_from_angular(w_rad_per_ms: f64) -> f64 {
    w_rad_per_ms / TAU
}

#[inline]
pub fn ms_from_ns(t_ns: f64) -> f64 {
    t_ns * 1e-6
}

#[inline]
pub fn ns_from_ms(t_ms: f64) -> f64 {
    t_ms * 1e6
}

/// Accumulated phase (rad) of a kHz frequency over a ns interval.
#[inline]
pub fn phase_rad(f_khz: f64, t_ns: f64) -> f64 {
    angular_rad_per_ms(f_khz) * ms_from_ns(t_ns)
}
