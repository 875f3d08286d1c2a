//! Multi-channel STFT analysis and overlap-add synthesis.
//!
//! Square-root periodic Hann windows are used for both analysis and synthesis,
//! with `n_fft / 2` zeros of centre padding on each side. Synthesis divides by
//! the exact summed window envelope, so `istft(stft(x)) == x` up to rounding
//! for any hop of the form `n_fft / R` with integer `R >= 2`.

use std::f64::consts::PI;

use num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{invalid, Result};
use crate::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StftConfig {
    n_fft: usize,
    hop: usize,
}

impl StftConfig {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < 4 || !n_fft.is_power_of_two() {
            return Err(invalid(
                "stft",
                format!("n_fft must be a power of two >= 4, got {n_fft}"),
            ));
        }
        if hop == 0 || n_fft % hop != 0 || n_fft / hop < 2 {
            return Err(invalid(
                "stft",
                format!("hop {hop} must divide n_fft {n_fft} at least twice"),
            ));
        }
        Ok(Self { n_fft, hop })
    }

    /// `n_fft` with the default half-window hop.
    pub fn half_overlap(n_fft: usize) -> Result<Self> {
        Self::new(n_fft, n_fft / 2)
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    /// Frame count for a signal of `n` samples under centre padding.
    pub fn frames(&self, n: usize) -> usize {
        1 + n / self.hop
    }

    pub fn window<T: Real>(&self) -> Vec<T> {
        let n = self.n_fft as f64;
        (0..self.n_fft)
            .map(|i| T::of((0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).sqrt()))
            .collect()
    }
}

/// Multi-channel time-domain signal stored channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T = f64> {
    channels: usize,
    sample_rate: u32,
    data: Vec<T>,
}

impl<T: Real> Waveform<T> {
    pub fn new(channels: usize, sample_rate: u32, data: Vec<T>) -> Result<Self> {
        if channels == 0 || sample_rate == 0 || data.len() % channels != 0 {
            return Err(invalid(
                "waveform",
                format!(
                    "{} samples do not split into {channels} channels",
                    data.len()
                ),
            ));
        }
        Ok(Self {
            channels,
            sample_rate,
            data,
        })
    }

    pub fn from_channels(sample_rate: u32, chans: &[Vec<T>]) -> Result<Self> {
        let len = chans.first().map_or(0, Vec::len);
        if chans.iter().any(|c| c.len() != len) {
            return Err(invalid("waveform", "channels differ in length"));
        }
        Self::new(chans.len(), sample_rate, chans.concat())
    }

    pub fn zeros(channels: usize, sample_rate: u32, len: usize) -> Self {
        Self {
            channels,
            sample_rate,
            data: vec![T::zero(); channels * len],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.len() as f64 / self.sample_rate as f64
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn scaled(&self, g: T) -> Self {
        Self {
            channels: self.channels,
            sample_rate: self.sample_rate,
            data: self.data.iter().map(|&v| v * g).collect(),
        }
    }

    /// Samples `[start, start + len)`, zero-filled outside the signal.
    pub fn window(&self, start: isize, len: usize) -> Self {
        let n = self.len() as isize;
        let mut data = Vec::with_capacity(self.channels * len);
        for c in 0..self.channels {
            let ch = self.channel(c);
            data.extend((0..len as isize).map(|i| {
                let s = start + i;
                if s >= 0 && s < n {
                    ch[s as usize]
                } else {
                    T::zero()
                }
            }));
        }
        Self {
            channels: self.channels,
            sample_rate: self.sample_rate,
            data,
        }
    }

    pub fn select_channels(&self, idx: &[usize]) -> Self {
        Self {
            channels: idx.len(),
            sample_rate: self.sample_rate,
            data: idx
                .iter()
                .flat_map(|&c| self.channel(c).iter().copied())
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Waveform<U> {
        Waveform {
            channels: self.channels,
            sample_rate: self.sample_rate,
            data: self.data.iter().map(|v| U::of(v.to_f64c())).collect(),
        }
    }

    pub fn rms(&self, c: usize) -> f64 {
        let ch = self.channel(c);
        (ch.iter().map(|v| v.to_f64c().powi(2)).sum::<f64>() / ch.len().max(1) as f64).sqrt()
    }
}

/// Complex spectrogram with real and imaginary planes shaped `(M, T, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram<T = f64> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    channels: usize,
    frames: usize,
    cfg: StftConfig,
    length: usize,
    sample_rate: u32,
}

impl<T: Real> ComplexSpectrogram<T> {
    pub fn zeros(channels: usize, cfg: StftConfig, length: usize, sample_rate: u32) -> Self {
        let frames = cfg.frames(length);
        let n = channels * frames * cfg.bins();
        Self {
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
            channels,
            frames,
            cfg,
            length,
            sample_rate,
        }
    }

    pub fn from_planes(
        channels: usize,
        cfg: StftConfig,
        length: usize,
        sample_rate: u32,
        re: Vec<T>,
        im: Vec<T>,
    ) -> Result<Self> {
        let frames = cfg.frames(length);
        let n = channels * frames * cfg.bins();
        if re.len() != n || im.len() != n {
            return Err(invalid(
                "spectrogram",
                format!(
                    "expected {n} values per plane, got {} / {}",
                    re.len(),
                    im.len()
                ),
            ));
        }
        Ok(Self {
            re,
            im,
            channels,
            frames,
            cfg,
            length,
            sample_rate,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.cfg.bins()
    }

    pub fn config(&self) -> StftConfig {
        self.cfg
    }

    /// Length in samples of the signal this spectrogram represents.
    pub fn length(&self) -> usize {
        self.length
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    #[inline]
    pub fn index(&self, m: usize, t: usize, f: usize) -> usize {
        (m * self.frames + t) * self.cfg.bins() + f
    }

    pub fn get(&self, m: usize, t: usize, f: usize) -> Complex<T> {
        let i = self.index(m, t, f);
        Complex::new(self.re[i], self.im[i])
    }

    pub fn set(&mut self, m: usize, t: usize, f: usize, v: Complex<T>) {
        let i = self.index(m, t, f);
        self.re[i] = v.re;
        self.im[i] = v.im;
    }

    pub fn select_channels(&self, idx: &[usize]) -> Self {
        let plane = self.frames * self.cfg.bins();
        let pick = |d: &[T]| {
            idx.iter()
                .flat_map(|&c| d[c * plane..(c + 1) * plane].iter().copied())
                .collect()
        };
        Self {
            re: pick(&self.re),
            im: pick(&self.im),
            channels: idx.len(),
            ..self.clone()
        }
    }

    /// Stack the channels of several spectrograms with identical geometry.
    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| invalid("spectrogram", "nothing to stack"))?;
        if parts
            .iter()
            .any(|p| p.frames != first.frames || p.cfg != first.cfg || p.length != first.length)
        {
            return Err(invalid("spectrogram", "cannot stack differing geometries"));
        }
        Ok(Self {
            re: parts.iter().flat_map(|p| p.re.iter().copied()).collect(),
            im: parts.iter().flat_map(|p| p.im.iter().copied()).collect(),
            channels: parts.iter().map(|p| p.channels).sum(),
            ..(*first).clone()
        })
    }

    /// Frames `[start, start + len)` as a new spectrogram of matching length.
    pub fn frame_range(&self, start: usize, len: usize) -> Self {
        let nf = self.cfg.bins();
        let mut re = Vec::with_capacity(self.channels * len * nf);
        let mut im = Vec::with_capacity(self.channels * len * nf);
        for m in 0..self.channels {
            let a = self.index(m, start, 0);
            re.extend_from_slice(&self.re[a..a + len * nf]);
            im.extend_from_slice(&self.im[a..a + len * nf]);
        }
        Self {
            re,
            im,
            channels: self.channels,
            frames: len,
            cfg: self.cfg,
            length: len.saturating_sub(1) * self.cfg.hop,
            sample_rate: self.sample_rate,
        }
    }

    pub fn magnitude(&self) -> Vec<T> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&a, &b)| a.hypot(b))
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ComplexSpectrogram<U> {
        ComplexSpectrogram {
            re: self.re.iter().map(|v| U::of(v.to_f64c())).collect(),
            im: self.im.iter().map(|v| U::of(v.to_f64c())).collect(),
            channels: self.channels,
            frames: self.frames,
            cfg: self.cfg,
            length: self.length,
            sample_rate: self.sample_rate,
        }
    }
}

/// Short-time Fourier transform of every channel (DFT sign convention `e^{-i2πkn/N}`).
///
/// Transforms run in f64 regardless of `T`; `T` only sets the storage precision.
pub fn stft<T: Real>(w: &Waveform<T>, cfg: StftConfig) -> Result<ComplexSpectrogram<T>> {
    if w.is_empty() {
        return Err(invalid("stft", "empty input"));
    }
    let n = w.len();
    let (nfft, hop, nb) = (cfg.n_fft, cfg.hop, cfg.bins());
    let frames = cfg.frames(n);
    let win = cfg.window::<f64>();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut out = ComplexSpectrogram::zeros(w.channels(), cfg, n, w.sample_rate());
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let half = (nfft / 2) as isize;
    for m in 0..w.channels() {
        let ch = w.channel(m);
        for t in 0..frames {
            let start = (t * hop) as isize - half;
            for (j, b) in buf.iter_mut().enumerate() {
                let s = start + j as isize;
                let v = if s >= 0 && (s as usize) < n {
                    ch[s as usize].to_f64c()
                } else {
                    0.0
                };
                *b = Complex::new(v * win[j], 0.0);
            }
            fft.process(&mut buf);
            let base = out.index(m, t, 0);
            for k in 0..nb {
                out.re[base + k] = T::of(buf[k].re);
                out.im[base + k] = T::of(buf[k].im);
            }
        }
    }
    Ok(out)
}

/// Overlap-add inverse of [`stft`], restoring the original signal length.
pub fn istft<T: Real>(s: &ComplexSpectrogram<T>) -> Result<Waveform<T>> {
    let cfg = s.cfg;
    if s.re.len() != s.channels * s.frames * cfg.bins() || s.frames != cfg.frames(s.length) {
        return Err(invalid(
            "istft",
            "spectrogram geometry inconsistent with its n_fft",
        ));
    }
    let plane = s.frames * cfg.bins();
    let mut data = Vec::with_capacity(s.channels * s.length);
    for m in 0..s.channels {
        data.extend(istft_plane(
            &s.re[m * plane..(m + 1) * plane],
            &s.im[m * plane..(m + 1) * plane],
            s.frames,
            &cfg,
            s.length,
        ));
    }
    Waveform::new(s.channels, s.sample_rate, data)
}

fn envelope(cfg: &StftConfig, frames: usize, padded: usize) -> Vec<f64> {
    let win = cfg.window::<f64>();
    let mut env = vec![0.0; padded];
    for t in 0..frames {
        for (j, &w) in win.iter().enumerate() {
            if let Some(e) = env.get_mut(t * cfg.hop + j) {
                *e += w * w;
            }
        }
    }
    env
}

/// Inverse STFT of one `(T, F)` plane pair to `n` samples.
pub(crate) fn istft_plane<T: Real>(
    re: &[T],
    im: &[T],
    frames: usize,
    cfg: &StftConfig,
    n: usize,
) -> Vec<T> {
    let (nfft, hop, nb) = (cfg.n_fft, cfg.hop, cfg.bins());
    let padded = (frames - 1) * hop + nfft;
    let win = cfg.window::<f64>();
    let ifft = FftPlanner::<f64>::new().plan_fft_inverse(nfft);
    let mut acc = vec![0.0; padded];
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let inv_n = 1.0 / nfft as f64;
    for t in 0..frames {
        for k in 0..nb {
            buf[k] = Complex::new(re[t * nb + k].to_f64c(), im[t * nb + k].to_f64c());
        }
        for k in 1..nfft / 2 {
            buf[nfft - k] = buf[k].conj();
        }
        ifft.process(&mut buf);
        for j in 0..nfft {
            acc[t * hop + j] += buf[j].re * inv_n * win[j];
        }
    }
    let env = envelope(cfg, frames, padded);
    let half = nfft / 2;
    (0..n)
        .map(|i| T::of(acc[i + half] / env[i + half]))
        .collect()
}

/// Adjoint of [`istft_plane`]: maps a gradient over samples to gradients over
/// the real and imaginary planes.
pub(crate) fn istft_plane_adjoint<T: Real>(
    g: &[T],
    frames: usize,
    cfg: &StftConfig,
) -> (Vec<T>, Vec<T>) {
    let (nfft, hop, nb) = (cfg.n_fft, cfg.hop, cfg.bins());
    let padded = (frames - 1) * hop + nfft;
    let half = nfft / 2;
    let env = envelope(cfg, frames, padded);
    let mut gp = vec![0.0; padded];
    for (i, &v) in g.iter().enumerate() {
        gp[i + half] = v.to_f64c() / env[i + half];
    }
    let win = cfg.window::<f64>();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut re = Vec::with_capacity(frames * nb);
    let mut im = Vec::with_capacity(frames * nb);
    let inv_n = 1.0 / nfft as f64;
    for t in 0..frames {
        for j in 0..nfft {
            buf[j] = Complex::new(win[j] * gp[t * hop + j], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..nb {
            let c = if k == 0 || k == nfft / 2 {
                inv_n
            } else {
                2.0 * inv_n
            };
            re.push(T::of(buf[k].re * c));
            im.push(T::of(buf[k].im * c));
        }
    }
    (re, im)
}
