//! Corruption models: trace deletion (uniform, Markov burst, regular) and
//! additive noise (white Gaussian, spike-like, band-limited).
//!
//! Missing-trace operators zero the deleted columns and return a
//! [`TraceMask`]; noise operators never mark anything missing.

use ndarray::Array2;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seisdata::{Gather, TraceMask};
use crate::synthgen::{default_half_len, normalize_energy, ricker};

/// Number of taps of the band-limited noise low-pass filter.
pub const LOWPASS_TAPS: usize = 101;

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn round_count(fraction: f64, n: usize) -> usize {
    ((fraction * n as f64).round() as usize).min(n)
}

fn zero_traces(g: &Gather, mask: &TraceMask) -> Gather {
    let mut s = g.samples().clone();
    for x in mask.missing_indices() {
        s.column_mut(x).fill(0.0);
    }
    Gather::from_parts(s, g.meta)
}

fn add_noise(g: &Gather, noise: &Array2<f32>) -> Result<Gather> {
    Gather::new(g.samples() + noise, g.meta)
}

/// Deletes exactly `round(H / 100 * n_x)` distinct traces chosen uniformly.
pub fn uniform_missing(g: &Gather, h_percent: f64, seed: u64) -> Result<(Gather, TraceMask)> {
    uniform_missing_with(g, h_percent, &mut rng_for(seed, 0))
}

fn uniform_missing_with(g: &Gather, h_percent: f64, rng: &mut ChaCha8Rng) -> Result<(Gather, TraceMask)> {
    if !(0.0..100.0).contains(&h_percent) {
        return Err(Error::Param(format!("H must be in [0, 100), got {h_percent}")));
    }
    let n_x = g.n_x();
    let count = round_count(h_percent / 100.0, n_x);
    let mut flags = vec![false; n_x];
    for i in sample(rng, n_x, count) {
        flags[i] = true;
    }
    let mask = TraceMask::from_flags(flags);
    Ok((zero_traces(g, &mask), mask))
}

/// Two-state Markov chain generating bursts of missing traces.
///
/// `alpha` is the stationary probability of a missing trace and `beta` the
/// mean burst length; `p` is the NM -> M transition probability and `q`
/// the M -> M probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BurstChain {
    pub alpha: f64,
    pub beta: f64,
    pub p: f64,
    pub q: f64,
}

impl BurstChain {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Param(format!("alpha must be in (0, 1), got {alpha}")));
        }
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(Error::Param(format!("beta must be >= 1, got {beta}")));
        }
        if alpha > beta / (1.0 + beta) {
            return Err(Error::Param(format!(
                "alpha = {alpha} exceeds beta / (1 + beta) = {}; p would exceed 1",
                beta / (1.0 + beta)
            )));
        }
        Ok(BurstChain {
            alpha,
            beta,
            p: alpha / (beta * (1.0 - alpha)),
            q: 1.0 - 1.0 / beta,
        })
    }

    /// Stationary probability of the missing state, `p / (p + 1 - q)`.
    pub fn stationary_missing(&self) -> f64 {
        self.p / (self.p + 1.0 - self.q)
    }

    /// Standard deviation of the (geometric) burst length, `sqrt(q) / (1 - q)`.
    pub fn burst_length_std(&self) -> f64 {
        self.q.sqrt() / (1.0 - self.q)
    }

    /// Runs the chain over `n` traces, starting from the stationary law.
    pub fn simulate<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<bool> {
        let mut out = Vec::with_capacity(n);
        let mut missing = rng.random::<f64>() < self.alpha;
        for i in 0..n {
            if i > 0 {
                let u = rng.random::<f64>();
                missing = if missing { u < self.q } else { u < self.p };
            }
            out.push(missing);
        }
        out
    }
}

/// Deletes traces following a [`BurstChain`] swept left to right.
pub fn burst_missing(g: &Gather, alpha: f64, beta: f64, seed: u64) -> Result<(Gather, TraceMask)> {
    burst_missing_with(g, alpha, beta, &mut rng_for(seed, 0))
}

fn burst_missing_with(g: &Gather, alpha: f64, beta: f64, rng: &mut ChaCha8Rng) -> Result<(Gather, TraceMask)> {
    let chain = BurstChain::new(alpha, beta)?;
    let mask = TraceMask::from_flags(chain.simulate(g.n_x(), rng));
    Ok((zero_traces(g, &mask), mask))
}

/// Keeps every `factor`-th trace starting at trace 0.
pub fn regular_missing(g: &Gather, factor: usize) -> Result<(Gather, TraceMask)> {
    if factor < 2 {
        return Err(Error::Param(format!("decimation factor must be >= 2, got {factor}")));
    }
    let mask = TraceMask::from_flags((0..g.n_x()).map(|x| x % factor != 0).collect());
    Ok((zero_traces(g, &mask), mask))
}

fn gaussian_field<R: Rng>(shape: (usize, usize), sigma: f64, rng: &mut R) -> Result<Array2<f32>> {
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Param(e.to_string()))?;
    // Column-by-column draw so that each trace consumes a contiguous run
    // of the random stream.
    let (n_t, n_x) = shape;
    let mut out = Array2::zeros(shape);
    for x in 0..n_x {
        for t in 0..n_t {
            out[[t, x]] = normal.sample(rng) as f32;
        }
    }
    Ok(out)
}

/// Mean squared sample value.
pub fn signal_power(g: &Gather) -> f64 {
    let n = g.samples().len() as f64;
    g.samples().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n
}

/// Noise variance giving a target S/N (dB) for signal power `p_sig`.
pub fn sigma2_for_snr(p_sig: f64, snr_db: f64) -> f64 {
    p_sig / 10f64.powf(snr_db / 10.0)
}

/// Adds white Gaussian noise whose power sits `snr_db` below the gather's.
pub fn awgn_snr(g: &Gather, snr_db: f64, seed: u64) -> Result<Gather> {
    awgn_snr_with(g, snr_db, &mut rng_for(seed, 0))
}

fn awgn_snr_with(g: &Gather, snr_db: f64, rng: &mut ChaCha8Rng) -> Result<Gather> {
    let p = signal_power(g);
    if p == 0.0 {
        return Err(Error::Param("cannot set S/N of an all-zero gather".into()));
    }
    if !snr_db.is_finite() {
        return Err(Error::Param(format!("S/N must be finite, got {snr_db}")));
    }
    awgn_sigma_with(g, sigma2_for_snr(p, snr_db).sqrt(), rng)
}

/// Adds white Gaussian noise with standard deviation `sigma`.
pub fn awgn_sigma(g: &Gather, sigma: f64, seed: u64) -> Result<Gather> {
    awgn_sigma_with(g, sigma, &mut rng_for(seed, 0))
}

fn awgn_sigma_with(g: &Gather, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Gather> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    add_noise(g, &gaussian_field(g.shape(), sigma, rng)?)
}

/// Sparse spike positions (flattened `t * n_x + x`) and their values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeField {
    pub positions: Vec<usize>,
    pub values: Vec<f32>,
}

/// Draws `round(d / 100 * n_t * n_x)` spike locations, each set to the
/// gather's minimum or maximum with equal probability.
pub fn spike_field<R: Rng>(g: &Gather, d_percent: f64, rng: &mut R) -> Result<SpikeField> {
    if !(d_percent > 0.0 && d_percent < 100.0) {
        return Err(Error::Param(format!("d must be in (0, 100), got {d_percent}")));
    }
    let n = g.samples().len();
    let count = round_count(d_percent / 100.0, n);
    let lo = g.samples().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = g.samples().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut positions = sample(rng, n, count).into_vec();
    positions.sort_unstable();
    let values = positions
        .iter()
        .map(|_| if rng.random::<bool>() { hi } else { lo })
        .collect();
    Ok(SpikeField { positions, values })
}

/// Convolves the spike field trace by trace with a wavelet ("same" length,
/// zero padded) and adds it to the gather.
pub fn add_wavelet_spikes(g: &Gather, field: &SpikeField, wavelet: &[f64]) -> Result<Gather> {
    let (n_t, n_x) = g.shape();
    let half = (wavelet.len() / 2) as i64;
    let mut s = g.samples().mapv(|v| v as f64);
    for (&pos, &val) in field.positions.iter().zip(&field.values) {
        let (t, x) = (pos / n_x, pos % n_x);
        for (k, w) in wavelet.iter().enumerate() {
            let row = t as i64 + k as i64 - half;
            if (0..n_t as i64).contains(&row) {
                s[[row as usize, x]] += val as f64 * w;
            }
        }
    }
    Gather::new(s.mapv(|v| v as f32), g.meta)
}

/// Spike-like noise: a sparse min/max spike field shaped by a unit-energy
/// Ricker wavelet at `f0`.
pub fn spike_noise(g: &Gather, d_percent: f64, f0: f64, seed: u64) -> Result<Gather> {
    spike_noise_with(g, d_percent, f0, &mut rng_for(seed, 0))
}

fn spike_noise_with(g: &Gather, d_percent: f64, f0: f64, rng: &mut ChaCha8Rng) -> Result<Gather> {
    let dt = g.meta.dt;
    let wavelet = normalize_energy(&ricker(f0, dt, default_half_len(f0, dt))?)?;
    let field = spike_field(g, d_percent, rng)?;
    add_wavelet_spikes(g, &field, &wavelet)
}

/// Hamming-windowed sinc low-pass with unit DC gain and odd length `taps`.
pub fn lowpass_fir(cutoff_hz: f64, dt: f64, taps: usize) -> Result<Vec<f64>> {
    let nyquist = 0.5 / dt;
    if !(cutoff_hz > 0.0 && cutoff_hz < nyquist) {
        return Err(Error::Param(format!(
            "cutoff {cutoff_hz} Hz must lie in (0, {nyquist}) Hz"
        )));
    }
    if taps % 2 == 0 {
        return Err(Error::Param("low-pass filter needs an odd tap count".into()));
    }
    let fc = cutoff_hz * dt; // cycles per sample
    let m = (taps - 1) as f64;
    let c = (taps / 2) as f64;
    let mut h: Vec<f64> = (0..taps)
        .map(|n| {
            let k = n as f64 - c;
            let sinc = if k == 0.0 {
                2.0 * fc
            } else {
                (2.0 * std::f64::consts::PI * fc * k).sin() / (std::f64::consts::PI * k)
            };
            let window = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / m).cos();
            sinc * window
        })
        .collect();
    let dc: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= dc);
    Ok(h)
}

/// Zero-phase "same" filtering with a symmetric odd-length FIR.
pub fn filter_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len() as i64;
    let c = (h.len() / 2) as i64;
    (0..n)
        .map(|i| {
            h.iter()
                .enumerate()
                .filter_map(|(k, hk)| {
                    let j = i + c - k as i64;
                    (0..n).contains(&j).then(|| hk * x[j as usize])
                })
                .sum()
        })
        .collect()
}

/// Gaussian noise of std `sigma`, low-passed per trace at `cutoff_hz`.
pub fn bandlimited_noise(g: &Gather, sigma: f64, cutoff_hz: f64, seed: u64) -> Result<Gather> {
    bandlimited_noise_with(g, sigma, cutoff_hz, &mut rng_for(seed, 0))
}

fn bandlimited_noise_with(g: &Gather, sigma: f64, cutoff_hz: f64, rng: &mut ChaCha8Rng) -> Result<Gather> {
    let h = lowpass_fir(cutoff_hz, g.meta.dt, LOWPASS_TAPS)?;
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Param(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(g.clone());
    }
    let (n_t, n_x) = g.shape();
    let white = gaussian_field((n_t, n_x), sigma, rng)?;
    let mut noise = Array2::zeros((n_t, n_x));
    for x in 0..n_x {
        let trace: Vec<f64> = white.column(x).iter().map(|&v| v as f64).collect();
        for (t, v) in filter_same(&trace, &h).into_iter().enumerate() {
            noise[[t, x]] = v as f32;
        }
    }
    add_noise(g, &noise)
}

/// Scales each non-constant trace so that `max - min = 1`.
pub fn normalize_trace_range(g: &Gather) -> Gather {
    let mut s = g.samples().clone();
    for mut col in s.columns_mut() {
        let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let range = hi - lo;
        if range > 0.0 {
            col.mapv_inplace(|v| v / range);
        }
    }
    Gather::from_parts(s, g.meta)
}

/// One corruption model with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case")]
pub enum Corruption {
    /// Delete `h` percent of the traces uniformly at random.
    Uniform { h: f64 },
    /// Markov bursts with missing probability `alpha` and mean length `beta`.
    Burst { alpha: f64, beta: f64 },
    /// Keep one trace in `factor`.
    Regular { factor: usize },
    AwgnSnr { snr_db: f64 },
    AwgnSigma { sigma: f64 },
    /// `d` percent of samples hit by Ricker-shaped spikes at `f0`.
    Spike { d: f64, f0: f64 },
    Bandlimited { sigma: f64, cutoff: f64 },
    /// Per-trace range normalization (comparison-protocol preprocessing).
    NormalizeTraces,
}

/// A corruption model plus the seed driving it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub corruption: Corruption,
    #[serde(default)]
    pub seed: u64,
}

impl CorruptionSpec {
    pub fn new(corruption: Corruption, seed: u64) -> Self {
        CorruptionSpec { corruption, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Param(msg));
        match self.corruption {
            Corruption::Uniform { h } if !(0.0..100.0).contains(&h) => bad(format!("H = {h} outside [0, 100)")),
            Corruption::Burst { alpha, beta } => BurstChain::new(alpha, beta).map(|_| ()),
            Corruption::Regular { factor } if factor < 2 => bad(format!("factor = {factor} < 2")),
            Corruption::AwgnSigma { sigma } | Corruption::Bandlimited { sigma, .. } if !(sigma >= 0.0) => {
                bad(format!("sigma = {sigma} must be >= 0"))
            }
            Corruption::Spike { d, .. } if !(d > 0.0 && d < 100.0) => bad(format!("d = {d} outside (0, 100)")),
            _ => Ok(()),
        }
    }

    pub fn removes_traces(&self) -> bool {
        matches!(
            self.corruption,
            Corruption::Uniform { .. } | Corruption::Burst { .. } | Corruption::Regular { .. }
        )
    }

    /// Applies the corruption to gather number `stream` of a dataset; each
    /// gather draws from its own ChaCha stream of `self.seed`.
    pub fn apply(&self, g: &Gather, stream: u64) -> Result<(Gather, TraceMask)> {
        let mut rng = rng_for(self.seed, stream);
        let none = || TraceMask::none(g.n_x());
        match self.corruption {
            Corruption::Uniform { h } => uniform_missing_with(g, h, &mut rng),
            Corruption::Burst { alpha, beta } => burst_missing_with(g, alpha, beta, &mut rng),
            Corruption::Regular { factor } => regular_missing(g, factor),
            Corruption::AwgnSnr { snr_db } => Ok((awgn_snr_with(g, snr_db, &mut rng)?, none())),
            Corruption::AwgnSigma { sigma } => Ok((awgn_sigma_with(g, sigma, &mut rng)?, none())),
            Corruption::Spike { d, f0 } => Ok((spike_noise_with(g, d, f0, &mut rng)?, none())),
            Corruption::Bandlimited { sigma, cutoff } => {
                Ok((bandlimited_noise_with(g, sigma, cutoff, &mut rng)?, none()))
            }
            Corruption::NormalizeTraces => Ok((normalize_trace_range(g), none())),
        }
    }
}

/// Applies several corruptions in order. The returned mask is the union of
/// all trace deletions and the deleted traces are zero in the output even
/// when a noise step follows the deletion.
pub fn apply_chain(g: &Gather, specs: &[CorruptionSpec], stream: u64) -> Result<(Gather, TraceMask)> {
    let mut out = g.clone();
    let mut mask = TraceMask::none(g.n_x());
    for spec in specs {
        let (next, m) = spec.apply(&out, stream)?;
        out = next;
        mask = mask.union(&m);
    }
    Ok((zero_traces(&out, &mask), mask))
}
