//! Dual-frequency continuous-wave ToF decoding.
//!
//! Each frequency contributes four correlation images `Q_{f,θ}` for
//! `θ ∈ {0, π/2, π, 3π/2}`. The low frequency gives an unambiguous but noisy
//! distance that selects the wrap index of the precise high-frequency
//! distance. Confidence combines signal amplitude, agreement between the two
//! frequencies, and local depth smoothness.

use std::f64::consts::{PI, TAU};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::image::Image;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ToFError {
    #[error("raw planes must share dimensions: expected {expected:?}, plane {index} is {found:?}")]
    DimensionMismatch {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("raw plane {index} contains a non-finite value")]
    NonFinite { index: usize },
    #[error("invalid ToF configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Frequency {
    Low,
    High,
}

impl Frequency {
    pub const ALL: [Frequency; 2] = [Frequency::Low, Frequency::High];

    pub fn index(self) -> usize {
        match self {
            Frequency::Low => 0,
            Frequency::High => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToFConfig {
    pub speed_of_light: f64,
    /// Low modulation frequency (Hz); assumed never to wrap.
    pub f_low: f64,
    pub f_high: f64,
    pub sigma_amplitude: f64,
    pub sigma_depth: f64,
    pub sigma_gradient: f64,
    /// Largest wrap index searched for the high frequency.
    pub k_max: u32,
    /// Pixels whose amplitude sum falls below this are invalid.
    pub amplitude_floor: f64,
    /// The sensor reports radial range instead of z-depth.
    pub range_mode: bool,
}

impl Default for ToFConfig {
    fn default() -> Self {
        Self {
            speed_of_light: SPEED_OF_LIGHT,
            f_low: 2e7,
            f_high: 1e8,
            sigma_amplitude: 20.0,
            sigma_depth: 0.05,
            sigma_gradient: 0.005,
            k_max: 4,
            amplitude_floor: 1e-3,
            range_mode: false,
        }
    }
}

impl ToFConfig {
    pub fn validate(&self) -> Result<(), ToFError> {
        let bad = |m: &str| Err(ToFError::InvalidConfig(m.to_string()));
        if !(self.f_low > 0.0 && self.f_low < self.f_high) {
            return bad("need 0 < f_low < f_high");
        }
        if !(self.sigma_amplitude > 0.0 && self.sigma_depth > 0.0 && self.sigma_gradient > 0.0) {
            return bad("sigmas must be positive");
        }
        if !(self.speed_of_light > 0.0) {
            return bad("speed of light must be positive");
        }
        Ok(())
    }

    pub fn frequency_hz(&self, f: Frequency) -> f64 {
        match f {
            Frequency::Low => self.f_low,
            Frequency::High => self.f_high,
        }
    }

    /// Distance covered by one full phase cycle, `c / 2f`.
    pub fn wrap_period(&self, f: Frequency) -> f64 {
        self.speed_of_light / (2.0 * self.frequency_hz(f))
    }

    pub fn unambiguous_range(&self) -> f64 {
        self.wrap_period(Frequency::Low)
    }
}

/// The eight raw correlation images, indexed `[frequency][θ]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RawToFFrame {
    planes: [[Image<f64>; 4]; 2],
}

impl RawToFFrame {
    pub fn new(planes: [[Image<f64>; 4]; 2]) -> Result<Self, ToFError> {
        let expected = planes[0][0].dims();
        for (i, p) in planes.iter().flatten().enumerate() {
            if p.dims() != expected {
                return Err(ToFError::DimensionMismatch {
                    index: i,
                    expected,
                    found: p.dims(),
                });
            }
            if p.as_slice().iter().any(|x| !x.is_finite()) {
                return Err(ToFError::NonFinite { index: i });
            }
        }
        Ok(Self { planes })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        let z = Image::new(width, height, 0.0);
        Self {
            planes: std::array::from_fn(|_| std::array::from_fn(|_| z.clone())),
        }
    }

    pub fn width(&self) -> usize {
        self.planes[0][0].width()
    }

    pub fn height(&self) -> usize {
        self.planes[0][0].height()
    }

    /// Plane for frequency `f` and phase step `theta` (0..4 ↔ 0, π/2, π, 3π/2).
    pub fn plane(&self, f: Frequency, theta: usize) -> &Image<f64> {
        &self.planes[f.index()][theta]
    }

    pub fn planes(&self) -> &[[Image<f64>; 4]; 2] {
        &self.planes
    }

    #[inline]
    pub fn quad(&self, f: Frequency, u: usize, v: usize) -> [f64; 4] {
        let p = &self.planes[f.index()];
        [
            p[0].get(u, v),
            p[1].get(u, v),
            p[2].get(u, v),
            p[3].get(u, v),
        ]
    }
}

/// Decoded depth with its confidence factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ToFDepthMap {
    /// Unwrapped high-frequency distance in meters; 0 marks invalid pixels.
    pub depth: Image<f64>,
    /// Low-frequency distance used for unwrapping.
    pub depth_low: Image<f64>,
    pub confidence: Image<f64>,
    pub omega_amplitude: Image<f64>,
    pub omega_depth: Image<f64>,
    pub omega_gradient: Image<f64>,
    pub amplitude_sum: Image<f64>,
    pub wrap_index: Image<u8>,
}

impl ToFDepthMap {
    pub fn width(&self) -> usize {
        self.depth.width()
    }

    pub fn height(&self) -> usize {
        self.depth.height()
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.depth.get(u, v) > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.as_slice().iter().filter(|&&d| d > 0.0).count()
    }
}

/// Phase in `[0, 2π)` from one quad; `atan2(0, 0)` is taken as 0.
#[inline]
pub fn phase_from_quad(q: [f64; 4]) -> f64 {
    let y = q[2] - q[0];
    let x = q[3] - q[1];
    if y == 0.0 && x == 0.0 {
        return 0.0;
    }
    let mut phi = y.atan2(x);
    if phi < 0.0 {
        phi += TAU;
    }
    if phi >= TAU {
        phi = 0.0;
    }
    phi
}

#[inline]
pub fn amplitude_from_quad(q: [f64; 4]) -> f64 {
    ((q[0] - q[1]).powi(2) + (q[2] - q[3]).powi(2)).sqrt() * 0.5
}

/// Phase and amplitude maps for one modulation frequency.
pub fn compute_phase_amplitude(frame: &RawToFFrame, f: Frequency) -> (Image<f64>, Image<f64>) {
    let (w, h) = (frame.width(), frame.height());
    let phase = Image::from_fn(w, h, |u, v| phase_from_quad(frame.quad(f, u, v)));
    let amp = Image::from_fn(w, h, |u, v| amplitude_from_quad(frame.quad(f, u, v)));
    (phase, amp)
}

/// `d = c/(4πf)·φ + k·c/(2f)`
#[inline]
pub fn phase_to_distance(phase: f64, frequency_hz: f64, k: u32, speed_of_light: f64) -> f64 {
    speed_of_light / (4.0 * PI * frequency_hz) * phase
        + k as f64 * speed_of_light / (2.0 * frequency_hz)
}

/// Picks the high-frequency wrap index closest to the low-frequency distance.
/// Ties go to the smaller index.
pub fn unwrap_depth(d_low: f64, phase_high: f64, cfg: &ToFConfig) -> (f64, u32) {
    let mut best = (
        phase_to_distance(phase_high, cfg.f_high, 0, cfg.speed_of_light),
        0u32,
    );
    let mut best_err = (d_low - best.0).abs();
    for k in 1..=cfg.k_max {
        let d = phase_to_distance(phase_high, cfg.f_high, k, cfg.speed_of_light);
        let err = (d_low - d).abs();
        if err < best_err {
            best = (d, k);
            best_err = err;
        }
    }
    best
}

/// `ω_A = exp(-(1/ΣA) / (2σ_A²))`, with `ω_A = 0` when `ΣA = 0`.
#[inline]
pub fn amplitude_confidence(amplitude_sum: f64, sigma: f64) -> f64 {
    if !(amplitude_sum > 0.0) {
        return 0.0;
    }
    (-(1.0 / amplitude_sum) / (2.0 * sigma * sigma)).exp()
}

#[inline]
pub fn depth_agreement_confidence(d_low: f64, d_high: f64, sigma: f64) -> f64 {
    (-(d_low - d_high).powi(2) / (2.0 * sigma * sigma)).exp()
}

/// Smoothness confidence from central-difference gradients of depth and
/// inverse depth. Borders and invalid neighbours replicate the center value.
pub fn gradient_confidence(depth: &Image<f64>, sigma: f64) -> Image<f64> {
    let (w, h) = depth.dims();
    let two_s2 = 2.0 * sigma * sigma;
    let rows: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|v| {
            (0..w)
                .map(|u| {
                    let c = depth.get(u, v);
                    if !(c > 0.0) {
                        return 0.0;
                    }
                    let at = |uu: isize, vv: isize| -> f64 {
                        if uu < 0 || vv < 0 || uu >= w as isize || vv >= h as isize {
                            return c;
                        }
                        let d = depth.get(uu as usize, vv as usize);
                        if d > 0.0 {
                            d
                        } else {
                            c
                        }
                    };
                    let (ui, vi) = (u as isize, v as isize);
                    let (l, r, t, b) = (
                        at(ui - 1, vi),
                        at(ui + 1, vi),
                        at(ui, vi - 1),
                        at(ui, vi + 1),
                    );
                    let gx = 0.5 * (r - l);
                    let gy = 0.5 * (b - t);
                    let ix = 0.5 * (1.0 / r - 1.0 / l);
                    let iy = 0.5 * (1.0 / b - 1.0 / t);
                    (-(gx * gx + gy * gy) / two_s2).exp() * (-(ix * ix + iy * iy) / two_s2).exp()
                })
                .collect()
        })
        .collect();
    Image::from_vec(w, h, rows.concat())
}

/// The combined confidence and its three factors.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfidenceMaps {
    pub omega: Image<f64>,
    pub omega_amplitude: Image<f64>,
    pub omega_depth: Image<f64>,
    pub omega_gradient: Image<f64>,
}

/// Computes `ω = ω_A·ω_d·ω_∇`. Pixels with non-positive `depth` are invalid
/// and get zero for every factor.
pub fn compute_confidence(
    d_low: &Image<f64>,
    d_high: &Image<f64>,
    depth: &Image<f64>,
    amplitude_sum: &Image<f64>,
    cfg: &ToFConfig,
) -> ConfidenceMaps {
    let (w, h) = depth.dims();
    let grad = gradient_confidence(depth, cfg.sigma_gradient);
    let mut omega_amplitude = Image::new(w, h, 0.0);
    let mut omega_depth = Image::new(w, h, 0.0);
    let mut omega_gradient = Image::new(w, h, 0.0);
    let mut omega = Image::new(w, h, 0.0);
    for v in 0..h {
        for u in 0..w {
            if !(depth.get(u, v) > 0.0) {
                continue;
            }
            let a = amplitude_confidence(amplitude_sum.get(u, v), cfg.sigma_amplitude);
            let d = depth_agreement_confidence(d_low.get(u, v), d_high.get(u, v), cfg.sigma_depth);
            let g = grad.get(u, v);
            omega_amplitude.set(u, v, a);
            omega_depth.set(u, v, d);
            omega_gradient.set(u, v, g);
            omega.set(u, v, a * d * g);
        }
    }
    ConfidenceMaps {
        omega,
        omega_amplitude,
        omega_depth,
        omega_gradient,
    }
}

/// Full decode: phases, unwrapping, validity and confidence.
pub fn estimate_tof_depth(frame: &RawToFFrame, cfg: &ToFConfig) -> ToFDepthMap {
    let (w, h) = (frame.width(), frame.height());
    let mut depth = Image::new(w, h, 0.0);
    let mut depth_low = Image::new(w, h, 0.0);
    let mut amplitude_sum = Image::new(w, h, 0.0);
    let mut wrap_index = Image::new(w, h, 0u8);
    for v in 0..h {
        for u in 0..w {
            let ql = frame.quad(Frequency::Low, u, v);
            let qh = frame.quad(Frequency::High, u, v);
            let sum_a = amplitude_from_quad(ql) + amplitude_from_quad(qh);
            amplitude_sum.set(u, v, sum_a);
            if !(sum_a >= cfg.amplitude_floor) {
                continue;
            }
            let d_low = phase_to_distance(phase_from_quad(ql), cfg.f_low, 0, cfg.speed_of_light);
            let (d_high, k) = unwrap_depth(d_low, phase_from_quad(qh), cfg);
            depth_low.set(u, v, d_low);
            if d_high > 0.0 {
                depth.set(u, v, d_high);
                wrap_index.set(u, v, k as u8);
            }
        }
    }
    let conf = compute_confidence(&depth_low, &depth, &depth, &amplitude_sum, cfg);
    ToFDepthMap {
        depth,
        depth_low,
        confidence: conf.omega,
        omega_amplitude: conf.omega_amplitude,
        omega_depth: conf.omega_depth,
        omega_gradient: conf.omega_gradient,
        amplitude_sum,
        wrap_index,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn quad_from_diffs(sin_term: f64, cos_term: f64) -> [f64; 4] {
        // Q_π − Q_0 = sin_term, Q_{3π/2} − Q_{π/2} = cos_term
        [10.0, 10.0, 10.0 + sin_term, 10.0 + cos_term]
    }

    #[test]
    fn phase_examples() {
        assert_eq!(phase_from_quad(quad_from_diffs(0.0, 5.0)), 0.0);
        assert_abs_diff_eq!(
            phase_from_quad(quad_from_diffs(4.0, 0.0)),
            PI / 2.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            phase_from_quad(quad_from_diffs(0.0, -3.0)),
            PI,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            phase_from_quad(quad_from_diffs(-1.0, 0.0)),
            1.5 * PI,
            epsilon = 1e-15
        );
        assert_eq!(phase_from_quad([0.0; 4]), 0.0);
        assert_eq!(amplitude_from_quad([0.0; 4]), 0.0);
    }

    #[test]
    fn exact_inverse_quads_recover_phase() {
        let (o, a, phi) = (100.0, 7.0, 1.234f64);
        let q = [
            o - a * phi.sin(),
            o - a * phi.cos(),
            o + a * phi.sin(),
            o + a * phi.cos(),
        ];
        assert_abs_diff_eq!(phase_from_quad(q), 1.234, epsilon = 1e-9);
    }

    #[test]
    fn distance_examples() {
        let c = SPEED_OF_LIGHT;
        assert_eq!(phase_to_distance(0.0, 1e8, 0, c), 0.0);
        assert_abs_diff_eq!(
            phase_to_distance(PI, 1e8, 0, c),
            0.749_481_145,
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            phase_to_distance(0.0, 1e8, 1, c),
            1.498_962_29,
            epsilon = 1e-9
        );
    }

    #[test]
    fn unwrap_examples() {
        let cfg = ToFConfig::default();
        let (d, k) = unwrap_depth(2.0, PI, &cfg);
        assert_eq!(k, 1);
        assert_abs_diff_eq!(d, 2.248_443_435, epsilon = 1e-9);

        let phi = 0.5 * 4.0 * PI * 1e8 / SPEED_OF_LIGHT;
        let (d, k) = unwrap_depth(0.5, phi, &cfg);
        assert_eq!(k, 0);
        assert_abs_diff_eq!(d, 0.5, epsilon = 1e-12);

        // true depth 3.0 m, low-frequency error ±0.37 m
        let period = cfg.wrap_period(Frequency::High);
        let phi = (3.0 % period) / period * TAU;
        for err in [-0.37, -0.2, 0.0, 0.2, 0.37] {
            let (d, k) = unwrap_depth(3.0 + err, phi, &cfg);
            assert_eq!(k, 2);
            assert_abs_diff_eq!(d, 3.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn confidence_spot_values() {
        assert_eq!(depth_agreement_confidence(1.3, 1.3, 0.05), 1.0);
        assert_abs_diff_eq!(
            depth_agreement_confidence(1.0, 1.05, 0.05),
            (-0.5f64).exp(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(
            amplitude_confidence(1.0 / 800.0, 20.0),
            (-1.0f64).exp(),
            epsilon = 1e-9
        );
        assert_eq!(amplitude_confidence(0.0, 20.0), 0.0);
        let flat = Image::new(8, 6, 2.5);
        assert!(gradient_confidence(&flat, 0.005)
            .as_slice()
            .iter()
            .all(|&g| g == 1.0));
    }

    #[test]
    fn all_zero_frame_is_invalid() {
        let m = estimate_tof_depth(&RawToFFrame::zeros(6, 4), &ToFConfig::default());
        assert_eq!(m.valid_count(), 0);
        assert!(m.confidence.as_slice().iter().all(|&c| c == 0.0));
    }

    #[test]
    fn mismatched_planes_rejected() {
        let mut planes: [[Image<f64>; 4]; 2] =
            std::array::from_fn(|_| std::array::from_fn(|_| Image::new(4, 4, 0.0)));
        planes[1][2] = Image::new(5, 4, 0.0);
        assert!(matches!(
            RawToFFrame::new(planes),
            Err(ToFError::DimensionMismatch { index: 6, .. })
        ));
        let mut planes: [[Image<f64>; 4]; 2] =
            std::array::from_fn(|_| std::array::from_fn(|_| Image::new(4, 4, 0.0)));
        planes[0][1].set(1, 1, f64::NAN);
        assert!(matches!(
            RawToFFrame::new(planes),
            Err(ToFError::NonFinite { index: 1 })
        ));
    }

    proptest! {
        #[test]
        fn amplitude_confidence_monotone(a in 1e-4f64..1e3, b in 1e-4f64..1e3) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            prop_assert!(amplitude_confidence(lo, 20.0) <= amplitude_confidence(hi, 20.0));
        }

        #[test]
        fn depth_confidence_monotone(x in 0.0f64..1.0, y in 0.0f64..1.0) {
            let (lo, hi) = if x < y { (x, y) } else { (y, x) };
            prop_assert!(depth_agreement_confidence(2.0, 2.0 + lo, 0.05) >= depth_agreement_confidence(2.0, 2.0 + hi, 0.05));
        }

        #[test]
        fn combined_confidence_is_product(seed in proptest::collection::vec(0.5f64..4.0, 30)) {
            let depth = Image::from_vec(6, 5, seed.clone());
            let low = depth.map(|d| d + 0.01);
            let amp = depth.map(|d| d * 10.0);
            let c = compute_confidence(&low, &depth, &depth, &amp, &ToFConfig::default());
            for i in 0..30 {
                let p = c.omega_amplitude.as_slice()[i] * c.omega_depth.as_slice()[i] * c.omega_gradient.as_slice()[i];
                prop_assert!((c.omega.as_slice()[i] - p).abs() <= 1e-6);
                for f in [&c.omega, &c.omega_amplitude, &c.omega_depth, &c.omega_gradient] {
                    prop_assert!((0.0..=1.0).contains(&f.as_slice()[i]));
                }
            }
        }
    }
}
