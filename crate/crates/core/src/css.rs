//! Continuous separation of long recordings: overlapping windows with
//! history and future context, cross-window permutation stitching, and the
//! optional Wiener beamformer plus enhancement stage.

use std::time::Instant;

use nalgebra::{Complex, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, mismatch, Result};
use crate::model::{HeadMode, TfCorrNet};
use crate::stft::{istft, stft, ComplexSpectrogram, StftConfig, Waveform};
use crate::tensor::Real;
use crate::training::{best_permutation, Example};

/// Window layout in seconds: `history | current | future`, hop = `current`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChunkSchedule {
    pub history: f64,
    pub current: f64,
    pub future: f64,
}

impl Default for ChunkSchedule {
    fn default() -> Self {
        Self {
            history: 1.2,
            current: 0.8,
            future: 0.4,
        }
    }
}

/// Window layout in STFT frames (every block a whole number of hops).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkFrames {
    pub history: usize,
    pub current: usize,
    pub future: usize,
    pub hop: usize,
}

impl ChunkFrames {
    pub fn window_samples(&self) -> usize {
        (self.history + self.current + self.future) * self.hop
    }

    /// Frames shared by consecutive windows.
    pub fn overlap(&self) -> usize {
        self.history + self.future
    }
}

impl ChunkSchedule {
    pub fn window(&self) -> f64 {
        self.history + self.current + self.future
    }

    pub fn frames(&self, sample_rate: u32, hop: usize) -> Result<ChunkFrames> {
        let to_frames = |s: f64| (s * sample_rate as f64 / hop as f64).round() as usize;
        let f = ChunkFrames {
            history: to_frames(self.history),
            current: to_frames(self.current),
            future: to_frames(self.future),
            hop,
        };
        if f.current == 0 {
            return Err(invalid("chunk schedule", "current block shorter than one hop"));
        }
        Ok(f)
    }
}

/// One processing window over a stream of `total` samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkSpan {
    pub index: usize,
    /// First sample of the window; negative while the history runs before the stream.
    pub start: isize,
    pub len: usize,
    /// Emitted samples `[current_start, current_end)`, clipped to the stream.
    pub current_start: usize,
    pub current_end: usize,
}

/// Windows with hop `current`; samples outside the stream are zero-padded.
pub fn plan_chunks(total: usize, frames: ChunkFrames) -> Result<Vec<ChunkSpan>> {
    if total == 0 {
        return Err(invalid("plan_chunks", "empty input"));
    }
    let step = frames.current * frames.hop;
    Ok((0..total.div_ceil(step))
        .map(|i| ChunkSpan {
            index: i,
            start: (i * step) as isize - (frames.history * frames.hop) as isize,
            len: frames.window_samples(),
            current_start: i * step,
            current_end: ((i + 1) * step).min(total),
        })
        .collect())
}

/// Anything that maps a mixture spectrogram to `K` per-source spectrograms.
pub trait Separator {
    fn sources(&self) -> usize;
    fn separate(&self, x: &ComplexSpectrogram<f64>) -> Result<Vec<ComplexSpectrogram<f64>>>;
}

impl<T: Real> Separator for TfCorrNet<T> {
    fn sources(&self) -> usize {
        self.config().sources
    }

    /// Runs at unit reference-mic RMS, as in training, and restores the input scale.
    fn separate(&self, x: &ComplexSpectrogram<f64>) -> Result<Vec<ComplexSpectrogram<f64>>> {
        let rms = istft(&x.select_channels(&[0]))?.rms(0);
        let gain = if rms > 1e-9 { 1.0 / rms } else { 1.0 };
        let scaled = ComplexSpectrogram::from_planes(
            x.channels(),
            x.config(),
            x.length(),
            x.sample_rate(),
            x.re.iter().map(|v| v * gain).collect(),
            x.im.iter().map(|v| v * gain).collect(),
        )?;
        let out = TfCorrNet::separate(self, &scaled.cast::<T>())?;
        out.into_iter()
            .map(|y| {
                let y = y.cast::<f64>();
                ComplexSpectrogram::from_planes(
                    y.channels(),
                    y.config(),
                    y.length(),
                    y.sample_rate(),
                    y.re.iter().map(|v| v / gain).collect(),
                    y.im.iter().map(|v| v / gain).collect(),
                )
            })
            .collect()
    }
}

/// Whole-signal separation in one pass; one waveform per source.
pub fn separate_waveform(sep: &dyn Separator, x: &Waveform<f64>, cfg: StftConfig) -> Result<Vec<Waveform<f64>>> {
    let spec = stft(x, cfg)?;
    sep.separate(&spec)?.iter().map(istft).collect()
}

/// Summed L1 distance between magnitudes of `a` and `b` over frames
/// `[a0, a0 + n)` and `[b0, b0 + n)` of every channel.
pub fn magnitude_distance(a: &ComplexSpectrogram<f64>, a0: usize, b: &ComplexSpectrogram<f64>, b0: usize, n: usize) -> f64 {
    let nf = a.bins();
    let mut d = 0.0;
    for m in 0..a.channels().min(b.channels()) {
        let (ia, ib) = (a.index(m, a0, 0), b.index(m, b0, 0));
        for i in 0..n * nf {
            let ma = a.re[ia + i].hypot(a.im[ia + i]);
            let mb = b.re[ib + i].hypot(b.im[ib + i]);
            d += (ma - mb).abs();
        }
    }
    d
}

/// Assignment of a new window's outputs to the global streams.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkLog {
    pub chunk: usize,
    pub start_sample: isize,
    /// `permutation[j]` is the stream receiving local output `j`.
    pub permutation: Vec<usize>,
    pub cost: f64,
    pub elapsed_ms: f64,
}

/// Choose `perm[j]` = stream for local output `j` minimising the magnitude
/// distance to the previous window's streams over the shared frames.
pub fn stitch(
    prev: &[ComplexSpectrogram<f64>],
    prev_start: usize,
    new: &[ComplexSpectrogram<f64>],
    new_start: usize,
    overlap: usize,
) -> (Vec<usize>, f64) {
    let cost: Vec<Vec<f64>> = new
        .iter()
        .map(|n| prev.iter().map(|p| magnitude_distance(p, prev_start, n, new_start, overlap)).collect())
        .collect();
    best_permutation(&cost)
}

/// Streams of a continuous run with the per-window assignment log.
#[derive(Debug, Clone)]
pub struct CssOutput {
    pub streams: Vec<ComplexSpectrogram<f64>>,
    pub log: Vec<ChunkLog>,
}

impl CssOutput {
    pub fn waveforms(&self) -> Result<Vec<Waveform<f64>>> {
        self.streams.iter().map(istft).collect()
    }

    pub fn log_jsonl(&self) -> Result<String> {
        self.log
            .iter()
            .map(|l| serde_json::to_string(l).map(|s| s + "\n").map_err(Into::into))
            .collect()
    }
}

/// Separate `x` window by window, align each window's outputs to the running
/// streams, and keep only every window's current block.
pub fn run_css(sep: &dyn Separator, x: &Waveform<f64>, cfg: StftConfig, schedule: ChunkSchedule) -> Result<CssOutput> {
    let frames = schedule.frames(x.sample_rate(), cfg.hop())?;
    let chunks = plan_chunks(x.len(), frames)?;
    let total_frames = cfg.frames(x.len());
    let (k, nf) = (sep.sources(), cfg.bins());
    let mut streams: Option<Vec<ComplexSpectrogram<f64>>> = None;
    let mut prev: Vec<ComplexSpectrogram<f64>> = Vec::new();
    let mut log = Vec::with_capacity(chunks.len());
    for c in &chunks {
        let t0 = Instant::now();
        let window = stft(&x.window(c.start, c.len), cfg)?;
        let mut out = sep.separate(&window)?;
        if out.len() != k {
            return Err(invalid("run_css", format!("separator returned {} outputs for {k} sources", out.len())));
        }
        let (perm, cost) = if prev.is_empty() {
            ((0..k).collect(), 0.0)
        } else {
            stitch(&prev, frames.current, &out, 0, frames.overlap())
        };
        let mut ordered: Vec<Option<ComplexSpectrogram<f64>>> = vec![None; k];
        for (j, y) in out.drain(..).enumerate() {
            ordered[perm[j]] = Some(y);
        }
        let ordered: Vec<ComplexSpectrogram<f64>> = ordered.into_iter().map(|y| y.expect("bijection")).collect();

        let mo = ordered[0].channels();
        let streams = streams.get_or_insert_with(|| {
            (0..k).map(|_| ComplexSpectrogram::zeros(mo, cfg, x.len(), x.sample_rate())).collect()
        });
        let first = c.current_start / cfg.hop();
        for (s, y) in streams.iter_mut().zip(&ordered) {
            for t in 0..frames.current {
                let g = first + t;
                if g >= total_frames {
                    break;
                }
                for m in 0..mo {
                    let (src, dst) = (y.index(m, frames.history + t, 0), s.index(m, g, 0));
                    s.re[dst..dst + nf].copy_from_slice(&y.re[src..src + nf]);
                    s.im[dst..dst + nf].copy_from_slice(&y.im[src..src + nf]);
                }
            }
        }
        log.push(ChunkLog {
            chunk: c.index,
            start_sample: c.start,
            permutation: perm,
            cost,
            elapsed_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        prev = ordered;
    }
    Ok(CssOutput {
        streams: streams.unwrap_or_default(),
        log,
    })
}

type C64 = Complex<f64>;

/// Per-bin spatial covariance `(1/T) Σ_t v_t v_tᴴ`.
pub fn spatial_covariance(x: &ComplexSpectrogram<f64>, f: usize) -> DMatrix<C64> {
    let (m, nt) = (x.channels(), x.frames());
    let mut phi = DMatrix::<C64>::zeros(m, m);
    for t in 0..nt {
        let v = DVector::from_iterator(m, (0..m).map(|c| x.get(c, t, f)));
        phi += &v * v.adjoint();
    }
    phi / C64::new(nt.max(1) as f64, 0.0)
}

/// `w_f = (Φ_x + δI)⁻¹ Φ_s e_ref` with `δ = loading · tr(Φ_x) / M`.
pub fn mwf_weights(phi_x: &DMatrix<C64>, phi_s: &DMatrix<C64>, reference: usize, loading: f64) -> DVector<C64> {
    let m = phi_x.nrows();
    let delta = loading * phi_x.trace().re / m as f64;
    let a = phi_x + DMatrix::<C64>::identity(m, m) * C64::new(delta, 0.0);
    let rhs = phi_s.column(reference).into_owned();
    match a.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => a.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(m)),
    }
}

/// Default relative diagonal loading.
pub const MWF_LOADING: f64 = 1e-3;

/// Beamform `x` towards each MIMO estimate; one single-channel spectrogram per source.
pub fn mwf_beamformer(
    x: &ComplexSpectrogram<f64>,
    estimates: &[ComplexSpectrogram<f64>],
    reference: usize,
    loading: f64,
) -> Result<Vec<ComplexSpectrogram<f64>>> {
    let (m, nt, nf) = (x.channels(), x.frames(), x.bins());
    if reference >= m {
        return Err(invalid("mwf", format!("reference mic {reference} of {m}")));
    }
    let phi_x: Vec<DMatrix<C64>> = (0..nf).map(|f| spatial_covariance(x, f)).collect();
    estimates
        .iter()
        .map(|y| {
            if y.channels() != m || y.frames() != nt || y.bins() != nf {
                return Err(mismatch("mwf", &[m, nt, nf], &[y.channels(), y.frames(), y.bins()]));
            }
            let mut out = ComplexSpectrogram::zeros(1, x.config(), x.length(), x.sample_rate());
            for (f, px) in phi_x.iter().enumerate() {
                let w = mwf_weights(px, &spatial_covariance(y, f), reference, loading);
                for t in 0..nt {
                    let v: C64 = (0..m).map(|c| w[c].conj() * x.get(c, t, f)).sum();
                    out.set(0, t, f, v);
                }
            }
            Ok(out)
        })
        .collect()
}

/// Input of the enhancement stage: the mixture with one beamformed channel appended.
pub fn second_stage_input(x: &ComplexSpectrogram<f64>, bf: &ComplexSpectrogram<f64>) -> Result<ComplexSpectrogram<f64>> {
    ComplexSpectrogram::stack(&[x, bf])
}

/// MIMO separation, Wiener beamforming, and single-output enhancement per source.
pub struct TwoStage<'a, T> {
    pub first: &'a TfCorrNet<T>,
    pub second: &'a TfCorrNet<T>,
    pub reference: usize,
    pub loading: f64,
}

impl<'a, T: Real> TwoStage<'a, T> {
    pub fn new(first: &'a TfCorrNet<T>, second: &'a TfCorrNet<T>) -> Result<Self> {
        let (a, b) = (first.config(), second.config());
        if a.head_mode != HeadMode::Mimo {
            return Err(invalid("second stage", "first stage must estimate every microphone"));
        }
        if b.mics != a.mics + 1 || b.sources != 1 || b.head_mode != HeadMode::Miso {
            return Err(invalid("second stage", "enhancement model needs M + 1 inputs, one source, MISO head"));
        }
        Ok(Self {
            first,
            second,
            reference: 0,
            loading: MWF_LOADING,
        })
    }

    /// Beamformed outputs of the first stage, before enhancement.
    pub fn beamform(&self, x: &ComplexSpectrogram<f64>) -> Result<Vec<ComplexSpectrogram<f64>>> {
        let y = Separator::separate(self.first, x)?;
        mwf_beamformer(x, &y, self.reference, self.loading)
    }
}

impl<T: Real> Separator for TwoStage<'_, T> {
    fn sources(&self) -> usize {
        self.first.config().sources
    }

    fn separate(&self, x: &ComplexSpectrogram<f64>) -> Result<Vec<ComplexSpectrogram<f64>>> {
        self.beamform(x)?
            .iter()
            .map(|bf| {
                let input = second_stage_input(x, bf)?;
                let mut out = Separator::separate(self.second, &input)?;
                Ok(out.remove(0))
            })
            .collect()
    }
}

/// Training examples for the enhancement stage: per source, the mixture plus
/// the beamformed first-stage output, targeting that source's direct path.
/// Beamformer outputs are matched to targets by minimum reference-mic error.
pub fn second_stage_examples<T: Real>(
    first: &TfCorrNet<T>,
    data: &[Example],
    cfg: StftConfig,
    reference: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for ex in data {
        let x = stft(&ex.mixture, cfg)?;
        let y = Separator::separate(first, &x)?;
        let bf: Vec<Waveform<f64>> = mwf_beamformer(&x, &y, reference, MWF_LOADING)?
            .iter()
            .map(istft)
            .collect::<Result<_>>()?;
        let cost: Vec<Vec<f64>> = bf
            .iter()
            .map(|b| {
                ex.targets
                    .iter()
                    .map(|t| {
                        b.channel(0)
                            .iter()
                            .zip(t.channel(reference))
                            .map(|(a, b)| (a - b).abs())
                            .sum()
                    })
                    .collect()
            })
            .collect();
        let (perm, _) = best_permutation(&cost);
        for (j, b) in bf.iter().enumerate() {
            let mut chans: Vec<Vec<f64>> = (0..ex.mixture.channels()).map(|c| ex.mixture.channel(c).to_vec()).collect();
            chans.push(b.channel(0).to_vec());
            let target = ex.targets[perm[j]].select_channels(&[reference]);
            out.push(Example {
                mixture: Waveform::from_channels(ex.mixture.sample_rate(), &chans)?,
                targets: vec![target],
            });
        }
    }
    Ok(out)
}
