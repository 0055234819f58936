//! Synthetic shot gathers made of a single dipping Ricker event.

use std::f64::consts::PI;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seisdata::{split_dataset, AcquisitionMeta, Dataset, Gather};

/// Number of samples on each side of the wavelet peak such that the
/// wavelet is truncated only where it is negligible (|t| > 1.5 / f0).
pub fn default_half_len(f0: f64, dt: f64) -> usize {
    (1.5 / (f0 * dt)).ceil() as usize
}

/// Samples the Ricker wavelet `(1 - 2 pi^2 f0^2 t^2) exp(-pi^2 f0^2 t^2)` on
/// `2 * half_len + 1` points centred on t = 0.
pub fn ricker(f0: f64, dt: f64, half_len: usize) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::Param(format!("dt must be positive, got {dt}")));
    }
    if !(f0 > 0.0 && f0 < 0.5 / dt) {
        return Err(Error::Param(format!(
            "f0 = {f0} Hz is not below the Nyquist frequency {} Hz",
            0.5 / dt
        )));
    }
    let a = (PI * f0).powi(2);
    Ok((0..=2 * half_len)
        .map(|k| {
            let t = (k as f64 - half_len as f64) * dt;
            let at2 = a * t * t;
            (1.0 - 2.0 * at2) * (-at2).exp()
        })
        .collect())
}

/// Scales a signal to unit energy (sum of squares equal to one).
pub fn normalize_energy(w: &[f64]) -> Result<Vec<f64>> {
    let energy: f64 = w.iter().map(|v| v * v).sum();
    if energy == 0.0 || !energy.is_finite() {
        return Err(Error::Param("cannot normalize a zero-energy signal".into()));
    }
    let s = energy.sqrt();
    Ok(w.iter().map(|v| v / s).collect())
}

/// A linear event: centre time `t0 + slope * x` on trace `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventSpec {
    /// Apparent dip in seconds per trace.
    pub slope: f64,
    /// Intercept time at trace 0, seconds.
    pub t0: f64,
    pub amplitude: f64,
}

impl EventSpec {
    fn center_row(&self, x: usize, dt: f64) -> i64 {
        ((self.t0 + self.slope * x as f64) / dt).round() as i64
    }

    /// Checks that at least part of the wavelet lands inside the window.
    pub fn validate(&self, n_t: usize, n_x: usize, dt: f64, half_len: usize) -> Result<()> {
        if !(self.slope.is_finite() && self.t0.is_finite() && self.amplitude.is_finite()) {
            return Err(Error::Param("event parameters must be finite".into()));
        }
        let h = half_len as i64;
        let visible = (0..n_x).any(|x| {
            let c = self.center_row(x, dt);
            c + h >= 0 && c - h < n_t as i64
        });
        if !visible {
            return Err(Error::Param(format!(
                "event (t0 = {}, slope = {}) never enters the {n_t}-sample window",
                self.t0, self.slope
            )));
        }
        Ok(())
    }
}

/// Renders one event with nearest-sample placement. Wavelet samples falling
/// outside the time window are clipped.
pub fn render_event(n_t: usize, n_x: usize, meta: AcquisitionMeta, spec: &EventSpec) -> Result<Gather> {
    meta.validate()?;
    let half_len = default_half_len(meta.f0, meta.dt);
    spec.validate(n_t, n_x, meta.dt, half_len)?;
    let w = ricker(meta.f0, meta.dt, half_len)?;
    let mut samples = Array2::<f32>::zeros((n_t, n_x));
    for x in 0..n_x {
        let start = spec.center_row(x, meta.dt) - half_len as i64;
        for (k, wk) in w.iter().enumerate() {
            let t = start + k as i64;
            if (0..n_t as i64).contains(&t) {
                samples[[t as usize, x]] = (spec.amplitude * wk) as f32;
            }
        }
    }
    Ok(Gather::from_parts(samples, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_gathers: usize,
    pub n_t: usize,
    pub n_x: usize,
    pub dt: f64,
    pub dx: f64,
    pub f0: f64,
    /// Closed interval of slopes in seconds per trace; `None` means `±2 dt`.
    pub slope_range: Option<(f64, f64)>,
    /// Closed interval of intercept times in seconds; `None` means
    /// `[0.2, 0.8] * n_t * dt`.
    pub t0_range: Option<(f64, f64)>,
    pub amplitude: f64,
    /// Size of the train+validation pool; `None` keeps one gather for evaluation.
    pub n_trainval: Option<usize>,
    pub trainval_ratio: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_gathers: 251,
            n_t: 512,
            n_x: 256,
            dt: 0.006,
            dx: 12.5,
            f0: 27.0,
            slope_range: None,
            t0_range: None,
            amplitude: 1.0,
            n_trainval: None,
            trainval_ratio: 0.75,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn slope_range(&self) -> (f64, f64) {
        self.slope_range.unwrap_or((-2.0 * self.dt, 2.0 * self.dt))
    }

    pub fn t0_range(&self) -> (f64, f64) {
        let span = self.n_t as f64 * self.dt;
        self.t0_range.unwrap_or((0.2 * span, 0.8 * span))
    }

    pub fn meta(&self) -> Result<AcquisitionMeta> {
        AcquisitionMeta::new(self.dt, self.dx, self.f0)
    }

    pub fn validate(&self) -> Result<()> {
        self.meta()?;
        if self.n_t == 0 || self.n_x == 0 {
            return Err(Error::Config("gather dimensions must be positive".into()));
        }
        for (name, (lo, hi)) in [("slope_range", self.slope_range()), ("t0_range", self.t0_range())] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("{name} [{lo}, {hi}] is empty")));
            }
        }
        if self.amplitude == 0.0 || !self.amplitude.is_finite() {
            return Err(Error::Config("amplitude must be finite and non-zero".into()));
        }
        if self.n_trainval.unwrap_or(0) > self.n_gathers {
            return Err(Error::Config("n_trainval exceeds n_gathers".into()));
        }
        Ok(())
    }

    /// Draws the event for gather `index` from its own ChaCha stream.
    pub fn draw_event(&self, index: usize) -> EventSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);
        let draw = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        let slope = draw(&mut rng, self.slope_range());
        let t0 = draw(&mut rng, self.t0_range());
        EventSpec {
            slope,
            t0,
            amplitude: self.amplitude,
        }
    }
}

/// Generates `cfg.n_gathers` single-event gathers and splits them.
pub fn make_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let meta = cfg.meta()?;
    let gathers = (0..cfg.n_gathers)
        .map(|i| render_event(cfg.n_t, cfg.n_x, meta, &cfg.draw_event(i)))
        .collect::<Result<Vec<_>>>()?;
    let n_trainval = cfg.n_trainval.unwrap_or(cfg.n_gathers.saturating_sub(1));
    let split = split_dataset(cfg.n_gathers, n_trainval, cfg.trainval_ratio, cfg.seed)?;
    Dataset::new(gathers, split)
}
