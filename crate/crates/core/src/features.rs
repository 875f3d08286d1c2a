//! Spatial correlation features with trainable per-bin PHAT-β weighting.
//!
//! For every time-frequency bin the upper-triangular pairwise products
//! `Φ_{mm'} = X_m X*_{m'}` (`m <= m'`, lexicographic) are formed, weighted by
//! `Φ / max(|Φ|, eps)^β_f` and flattened into `M(M+1)` real channels: all real
//! parts first, then all imaginary parts.

use std::str::FromStr;

use crate::error::{invalid, Result};
use crate::stft::{ComplexSpectrogram, Waveform};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const PHAT_EPS: f64 = 1e-8;

/// Network input representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputMode {
    /// PHAT-β weighted pairwise correlations, `M(M+1)` channels.
    Correlation,
    /// Reference magnitude plus cos/sin of inter-mic phase, `1 + 2(M-1)` channels.
    MagIpd,
    /// Real and imaginary STFT parts, `2M` channels.
    Raw,
}

impl InputMode {
    pub fn channels(self, mics: usize) -> usize {
        match self {
            InputMode::Correlation => mics * (mics + 1),
            InputMode::MagIpd => 1 + 2 * (mics - 1),
            InputMode::Raw => 2 * mics,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Correlation => "correlation",
            InputMode::MagIpd => "mag+ipd",
            InputMode::Raw => "raw",
        }
    }
}

impl FromStr for InputMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "correlation" => Ok(Self::Correlation),
            "mag+ipd" | "mag_ipd" => Ok(Self::MagIpd),
            "raw" | "raw-realimag" => Ok(Self::Raw),
            _ => Err(invalid("input_mode", format!("unknown input mode {s:?}"))),
        }
    }
}

/// Upper-triangular microphone pairs `(m, m')`, `m <= m'`, in lexicographic order.
pub fn mic_pairs(mics: usize) -> Vec<(usize, usize)> {
    (0..mics)
        .flat_map(|a| (a..mics).map(move |b| (a, b)))
        .collect()
}

/// Complex pairwise correlations shaped `(P, T, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Correlations<T = f64> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub pairs: usize,
    pub frames: usize,
    pub bins: usize,
}

impl<T: Real> Correlations<T> {
    pub fn index(&self, p: usize, t: usize, f: usize) -> usize {
        (p * self.frames + t) * self.bins + f
    }
}

pub fn pairwise_correlations<T: Real>(x: &ComplexSpectrogram<T>) -> Correlations<T> {
    let pairs = mic_pairs(x.channels());
    let (nt, nf) = (x.frames(), x.bins());
    let plane = nt * nf;
    let mut re = Vec::with_capacity(pairs.len() * plane);
    let mut im = Vec::with_capacity(pairs.len() * plane);
    for &(a, b) in &pairs {
        let (ar, ai) = (
            &x.re[a * plane..(a + 1) * plane],
            &x.im[a * plane..(a + 1) * plane],
        );
        let (br, bi) = (
            &x.re[b * plane..(b + 1) * plane],
            &x.im[b * plane..(b + 1) * plane],
        );
        for i in 0..plane {
            // (ar + i ai)(br - i bi)
            re.push(ar[i] * br[i] + ai[i] * bi[i]);
            im.push(if a == b {
                T::zero()
            } else {
                ai[i] * br[i] - ar[i] * bi[i]
            });
        }
    }
    Correlations {
        re,
        im,
        pairs: pairs.len(),
        frames: nt,
        bins: nf,
    }
}

/// Per-bin free parameters `b_f` with `β_f = sigmoid(b_f)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaParams {
    pub b: Vec<f64>,
}

impl BetaParams {
    /// Parameters giving `β_f = beta` at every bin; `beta` must lie in (0, 1).
    pub fn uniform(bins: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 1.0) {
            return Err(invalid(
                "beta",
                format!("initial beta {beta} outside (0, 1)"),
            ));
        }
        Ok(Self {
            b: vec![(beta / (1.0 - beta)).ln(); bins],
        })
    }

    pub fn beta(&self) -> Vec<f64> {
        self.b.iter().map(|&b| 1.0 / (1.0 + (-b).exp())).collect()
    }
}

/// `Φ' = Φ / max(|Φ|, eps)^{β_f}` with explicit per-bin exponents.
pub fn phat_beta<T: Real>(
    phi: &Correlations<T>,
    beta: &[f64],
    eps: f64,
) -> Result<Correlations<T>> {
    if beta.len() != phi.bins {
        return Err(invalid(
            "phat_beta",
            format!("{} exponents for {} bins", beta.len(), phi.bins),
        ));
    }
    if eps <= 0.0 {
        return Err(invalid("phat_beta", "eps must be positive"));
    }
    let mut out = phi.clone();
    for i in 0..phi.re.len() {
        let f = i % phi.bins;
        let mag = phi.re[i].hypot(phi.im[i]).to_f64c().max(eps);
        let w = T::of(mag.powf(-beta[f]));
        out.re[i] = phi.re[i] * w;
        out.im[i] = phi.im[i] * w;
    }
    Ok(out)
}

/// Flattened network input `z` shaped `(M(M+1), T, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationFeature<T = f64> {
    pub z: Tensor<T>,
}

pub fn flatten_features<T: Real>(phi: &Correlations<T>) -> CorrelationFeature<T> {
    let mut data = phi.re.clone();
    data.extend_from_slice(&phi.im);
    CorrelationFeature {
        z: Tensor::from_parts(vec![2 * phi.pairs, phi.frames, phi.bins], data),
    }
}

pub fn unflatten_features<T: Real>(z: &CorrelationFeature<T>) -> Result<Correlations<T>> {
    let s = z.z.shape();
    if s.len() != 3 || s[0] % 2 != 0 {
        return Err(invalid(
            "unflatten_features",
            format!("bad feature shape {s:?}"),
        ));
    }
    let half = z.z.len() / 2;
    Ok(Correlations {
        re: z.z.data()[..half].to_vec(),
        im: z.z.data()[half..].to_vec(),
        pairs: s[0] / 2,
        frames: s[1],
        bins: s[2],
    })
}

/// Ablation inputs shaped `(channels, T, F)`.
pub fn alt_features<T: Real>(x: &ComplexSpectrogram<T>, mode: InputMode) -> Result<Tensor<T>> {
    let m = x.channels();
    let (nt, nf) = (x.frames(), x.bins());
    let plane = nt * nf;
    let data = match mode {
        InputMode::Correlation => {
            return Err(invalid(
                "alt_features",
                "correlation input is built by phat_beta",
            ));
        }
        InputMode::Raw => {
            let mut d = x.re.clone();
            d.extend_from_slice(&x.im);
            d
        }
        InputMode::MagIpd => {
            let mut d: Vec<T> = (0..plane).map(|i| x.re[i].hypot(x.im[i])).collect();
            let mut sin = Vec::with_capacity((m - 1) * plane);
            for c in 1..m {
                for i in 0..plane {
                    let j = c * plane + i;
                    // angle of X_c X_1*
                    let re = x.re[j] * x.re[i] + x.im[j] * x.im[i];
                    let im = x.im[j] * x.re[i] - x.re[j] * x.im[i];
                    let a = im.atan2(re);
                    d.push(a.cos());
                    sin.push(a.sin());
                }
            }
            d.extend(sin);
            d
        }
    };
    Tensor::new(&[mode.channels(m), nt, nf], data)
}

/// Scale a waveform to unit RMS on the reference microphone; returns the gain applied.
pub fn normalize_reference_rms<T: Real>(w: &Waveform<T>, reference: usize) -> (Waveform<T>, f64) {
    let rms = w.rms(reference);
    let gain = if rms > 1e-12 { 1.0 / rms } else { 1.0 };
    (w.scaled(T::of(gain)), gain)
}

/// Correlations reordered channel-last as constants `(T, F, P)` for the graph.
pub(crate) struct GraphCorrelations<T> {
    pub re: Tensor<T>,
    pub im: Tensor<T>,
    pub log_mag: Tensor<T>,
}

impl<T: Real> GraphCorrelations<T> {
    pub fn new(phi: &Correlations<T>, eps: f64) -> Self {
        let (p, nt, nf) = (phi.pairs, phi.frames, phi.bins);
        let mut re = Vec::with_capacity(phi.re.len());
        let mut im = Vec::with_capacity(phi.re.len());
        let mut lm = Vec::with_capacity(phi.re.len());
        for t in 0..nt {
            for f in 0..nf {
                for q in 0..p {
                    let i = phi.index(q, t, f);
                    re.push(phi.re[i]);
                    im.push(phi.im[i]);
                    lm.push(T::of(phi.re[i].hypot(phi.im[i]).to_f64c().max(eps).ln()));
                }
            }
        }
        let shape = vec![nt, nf, p];
        Self {
            re: Tensor::from_parts(shape.clone(), re),
            im: Tensor::from_parts(shape.clone(), im),
            log_mag: Tensor::from_parts(shape, lm),
        }
    }
}

/// Differentiable PHAT-β features, channel-last `(T, F, 2P)`.
///
/// `beta` must have shape `(1, F, 1)` and hold the exponents themselves (for a
/// trainable β pass `sigmoid(b)`).
pub(crate) fn phat_features_graph<T: Real>(
    g: &mut Graph<T>,
    corr: &GraphCorrelations<T>,
    beta: Var,
) -> Result<Var> {
    let lm = g.constant(corr.log_mag.clone());
    let re = g.constant(corr.re.clone());
    let im = g.constant(corr.im.clone());
    let e = g.mul(lm, beta)?;
    let e = g.neg(e)?;
    let w = g.exp(e)?;
    let re = g.mul(re, w)?;
    let im = g.mul(im, w)?;
    g.concat(&[re, im], 2)
}
