//! Browser tools built on `corrnet`: a PHAT-β explorer, a room response
//! decay viewer and a cost calculator.
//!
//! Each tool is a plain Rust function returning a serialisable trace, so it
//! runs and is tested natively; [`web`] wraps them for wasm-bindgen as
//! JSON-in, JSON-out calls.

use corrnet::config::KvConfig;
use corrnet::eval::{breakdown_by_kind, costs_per_second};
use corrnet::features::{pairwise_correlations, phat_beta, PHAT_EPS};
use corrnet::mixsim::{make_mixture, synth_rir, synth_source, RoomScene, SPEED_OF_SOUND};
use corrnet::model::ModelConfig;
use corrnet::stft::{stft, StftConfig};
use corrnet::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub mod web;

const ARRAY_CENTRE: [f64; 3] = [3.0, 2.0, 1.5];
const SOURCE_DISTANCE: f64 = 1.5;

fn bad(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

/// One talker in front of a two-mic array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GccParams {
    /// Microphone spacing in metres.
    pub spacing: f64,
    /// Source direction from broadside in degrees.
    pub angle_deg: f64,
    pub beta: f64,
    pub t60: f64,
    pub tail_ratio: f64,
    /// `None` is noiseless.
    pub snr_db: Option<f64>,
    pub sample_rate: u32,
    pub n_fft: usize,
    pub seconds: f64,
    pub seed: u64,
}

impl Default for GccParams {
    fn default() -> Self {
        Self {
            spacing: 0.1,
            angle_deg: 30.0,
            beta: 0.5,
            t60: 0.3,
            tail_ratio: 0.25,
            snr_db: Some(20.0),
            sample_rate: 16000,
            n_fft: 512,
            seconds: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GccTrace {
    pub lags_ms: Vec<f64>,
    /// Cross-correlation over `lags_ms`, peak normalised to 1.
    pub gcc: Vec<f64>,
    pub true_lag_ms: f64,
    pub peak_lag_ms: f64,
    /// Frame average of `|Φ'_01|` per bin in dB, maximum at 0.
    pub magnitude_db: Vec<f64>,
    pub freqs_hz: Vec<f64>,
}

/// Cross-correlation of the two mics after PHAT-β weighting of every
/// time-frequency cell, evaluated on a fine lag grid.
pub fn phat_gcc(p: &GccParams) -> Result<GccTrace> {
    if !(0.0..=1.0).contains(&p.beta) {
        return Err(bad(format!("beta {} outside [0, 1]", p.beta)));
    }
    if !(p.spacing > 0.0 && p.spacing <= 1.0) || !(p.seconds > 0.0 && p.seconds <= 10.0) {
        return Err(bad("spacing must lie in (0, 1] m and duration in (0, 10] s"));
    }
    let [cx, cy, cz] = ARRAY_CENTRE;
    let a = p.angle_deg.to_radians();
    let scene = RoomScene {
        sample_rate: p.sample_rate,
        mics: vec![[cx - p.spacing / 2.0, cy, cz], [cx + p.spacing / 2.0, cy, cz]],
        sources: vec![[cx + SOURCE_DISTANCE * a.sin(), cy + SOURCE_DISTANCE * a.cos(), cz]],
        t60: p.t60,
        tail_ratio: p.tail_ratio,
        snr_db: p.snr_db,
        overlap: 0.0,
    };
    let len = (p.seconds * p.sample_rate as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let dry = synth_source(len, p.sample_rate, &mut rng);
    let ex = make_mixture(&scene, &[dry], len, p.seed)?;
    let x = stft(&ex.mixture, StftConfig::half_overlap(p.n_fft)?)?;
    let phi = pairwise_correlations(&x);
    let w = phat_beta(&phi, &vec![p.beta; phi.bins], PHAT_EPS)?;

    // pair (0, 1) sits between the two autocorrelations
    let (nf, nt) = (w.bins, w.frames);
    let mut mean = vec![(0.0, 0.0); nf];
    let mut mags = vec![0.0; nf];
    for t in 0..nt {
        for f in 0..nf {
            let i = w.index(1, t, f);
            mean[f].0 += w.re[i] / nt as f64;
            mean[f].1 += w.im[i] / nt as f64;
            mags[f] += w.re[i].hypot(w.im[i]) / nt as f64;
        }
    }

    let fs = p.sample_rate as f64;
    let omega = |f: usize| 2.0 * std::f64::consts::PI * f as f64 * fs / p.n_fft as f64;
    let max_lag = (1.5 * p.spacing / SPEED_OF_SOUND).max(1e-3);
    let steps = 400;
    let lags: Vec<f64> = (0..=steps).map(|i| -max_lag + 2.0 * max_lag * i as f64 / steps as f64).collect();
    // Φ = X0 X1*, so a delay D at mic 1 shows as exp(+jωD)
    let mut gcc: Vec<f64> = lags
        .iter()
        .map(|&tau| {
            mean.iter()
                .enumerate()
                .map(|(f, &(re, im))| {
                    let edge = if f == 0 || f == nf - 1 { 0.5 } else { 1.0 };
                    let (c, s) = ((omega(f) * tau).cos(), (omega(f) * tau).sin());
                    edge * (re * c + im * s)
                })
                .sum()
        })
        .collect();
    let (peak, top) = gcc.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b });
    if top.abs() > 0.0 {
        gcc.iter_mut().for_each(|v| *v /= top.abs());
    }

    let loudest = mags.iter().copied().fold(0.0, f64::max);
    Ok(GccTrace {
        lags_ms: lags.iter().map(|l| 1e3 * l).collect(),
        gcc,
        true_lag_ms: 1e3 * (scene.distance(0, 1) - scene.distance(0, 0)) / SPEED_OF_SOUND,
        peak_lag_ms: 1e3 * lags[peak],
        magnitude_db: mags.iter().map(|m| 20.0 * (m.max(1e-30) / loudest).log10()).collect(),
        freqs_hz: (0..nf).map(|f| f as f64 * fs / p.n_fft as f64).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecayParams {
    pub t60: f64,
    pub tail_ratio: f64,
    /// Source to microphone distance in metres.
    pub distance: f64,
    pub sample_rate: u32,
    pub seed: u64,
}

impl Default for DecayParams {
    fn default() -> Self {
        Self {
            t60: 0.4,
            tail_ratio: 0.25,
            distance: 1.5,
            sample_rate: 16000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayTrace {
    pub sample_rate: u32,
    pub rir: Vec<f64>,
    /// Backward-integrated energy in dB, 0 at the first sample.
    pub edc_db: Vec<f64>,
    pub direct_ms: f64,
    /// Direct-to-reverberant energy ratio; `None` without a tail.
    pub drr_db: Option<f64>,
    /// Decay time fitted to the tail between 5 and 25 dB below its onset;
    /// `None` without a tail.
    pub t60_fit: Option<f64>,
}

/// Synthesised response and its energy decay curve.
pub fn rir_decay(p: &DecayParams) -> Result<DecayTrace> {
    if !(p.t60 >= 0.0 && p.t60 <= 3.0) {
        return Err(bad(format!("t60 {} outside [0, 3] s", p.t60)));
    }
    let [cx, cy, cz] = ARRAY_CENTRE;
    let scene = RoomScene {
        sample_rate: p.sample_rate,
        mics: vec![ARRAY_CENTRE],
        sources: vec![[cx + p.distance, cy, cz]],
        t60: p.t60,
        tail_ratio: p.tail_ratio,
        snr_db: None,
        overlap: 0.0,
    };
    scene.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let r = synth_rir(&scene, 0, 0, &mut rng);
    let h = r.full();
    let edc = schroeder_db(&h);

    let energy = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>();
    let (e_direct, e_tail) = (energy(&r.direct), energy(&r.tail));
    let t60_fit = (e_tail > 0.0).then(|| fit_decay(&edc[r.tail_start..], p.sample_rate)).flatten();
    Ok(DecayTrace {
        sample_rate: p.sample_rate,
        drr_db: (e_tail > 0.0).then(|| 10.0 * (e_direct / e_tail).log10()),
        direct_ms: 1e3 * r.delay / p.sample_rate as f64,
        rir: h,
        edc_db: edc,
        t60_fit,
    })
}

/// Remaining energy after each sample, in dB relative to the total.
pub fn schroeder_db(h: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut out: Vec<f64> = h
        .iter()
        .rev()
        .map(|v| {
            acc += v * v;
            acc
        })
        .collect();
    out.reverse();
    let total = out.first().copied().unwrap_or(0.0).max(1e-300);
    out.iter().map(|e| 10.0 * (e.max(1e-300) / total).log10()).collect()
}

/// Least-squares slope over the 5..25 dB span below the curve's first value,
/// extrapolated to 60 dB.
fn fit_decay(edc: &[f64], sample_rate: u32) -> Option<f64> {
    let start = *edc.first()?;
    let pts: Vec<(f64, f64)> = edc
        .iter()
        .enumerate()
        .filter(|(_, &v)| v <= start - 5.0 && v >= start - 25.0)
        .map(|(i, &v)| (i as f64 / sample_rate as f64, v))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let (mx, my) = (pts.iter().map(|p| p.0).sum::<f64>() / n, pts.iter().map(|p| p.1).sum::<f64>() / n);
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let slope = sxy / sxx;
    (slope < 0.0).then(|| -60.0 / slope)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSummary {
    pub params: u64,
    pub gmacs_per_second: f64,
    pub frames_per_second: usize,
    /// `(module kind, params, G MAC/s)`.
    pub modules: Vec<(String, u64, f64)>,
    /// The configuration as parsed, in `key = value` form.
    pub config: String,
}

/// Published model configuration in `key = value` form.
pub fn published_config_text(mics: usize, n_fft: usize) -> String {
    let mut kv = KvConfig::new();
    ModelConfig::published(mics, n_fft / 2 + 1).write_kv(&mut kv);
    kv.to_text()
}

/// Parameters and per-second multiply-accumulates of a configuration;
/// absent keys take the small default configuration.
pub fn cost_summary(config: &str, sample_rate: u32, hop: usize) -> Result<CostSummary> {
    if hop == 0 || sample_rate == 0 {
        return Err(bad("hop and sample rate must be positive"));
    }
    let cfg = ModelConfig::from_kv(&KvConfig::parse(config)?)?;
    let r = costs_per_second(&cfg, sample_rate, hop);
    let mut kv = KvConfig::new();
    cfg.write_kv(&mut kv);
    Ok(CostSummary {
        params: r.params,
        gmacs_per_second: r.macs_per_second / 1e9,
        frames_per_second: r.frames,
        modules: breakdown_by_kind(&r).into_iter().map(|m| (m.name, m.params, m.macs as f64 / 1e9)).collect(),
        config: kv.to_text(),
    })
}
