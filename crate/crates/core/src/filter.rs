//! Multi-tap complex filtering of the mixture spectrogram.
//!
//! Each output bin is `y_{k,tf} = W_{k,tf} x̃_{tf}` where `x̃_{tf}` stacks the
//! mixture frames `t-L ..= t+L` of every microphone. Tap index
//! `j = (ℓ + L)·M + m`: frame offset major, microphone minor.

use crate::error::{invalid, mismatch, Result};
use crate::stft::ComplexSpectrogram;
use crate::tensor::{Real, Tensor};

/// Tap-stacked mixture with planes shaped `((2L+1)·M, T, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedMixture<T = f64> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub taps: usize,
    pub frames: usize,
    pub bins: usize,
}

impl<T: Real> StackedMixture<T> {
    pub fn index(&self, j: usize, t: usize, f: usize) -> usize {
        (j * self.frames + t) * self.bins + f
    }

    /// Channel-last layout `(T, F, 2, J)` consumed by the graph's complex filter.
    pub fn to_graph_tensor(&self) -> Tensor<T> {
        let (nj, nt, nf) = (self.taps, self.frames, self.bins);
        let mut data = Vec::with_capacity(2 * self.re.len());
        for t in 0..nt {
            for f in 0..nf {
                for plane in [&self.re, &self.im] {
                    data.extend((0..nj).map(|j| plane[(j * nt + t) * nf + f]));
                }
            }
        }
        Tensor::from_parts(vec![nt, nf, 2, nj], data)
    }
}

pub fn stack_taps<T: Real>(x: &ComplexSpectrogram<T>, half_taps: usize) -> StackedMixture<T> {
    let (m, nt, nf) = (x.channels(), x.frames(), x.bins());
    let taps = (2 * half_taps + 1) * m;
    let mut re = vec![T::zero(); taps * nt * nf];
    let mut im = vec![T::zero(); taps * nt * nf];
    for l in 0..2 * half_taps + 1 {
        for c in 0..m {
            let j = l * m + c;
            for t in 0..nt {
                let Some(src) = (t + l).checked_sub(half_taps).filter(|&s| s < nt) else {
                    continue;
                };
                let (a, b) = (x.index(c, src, 0), (j * nt + t) * nf);
                re[b..b + nf].copy_from_slice(&x.re[a..a + nf]);
                im[b..b + nf].copy_from_slice(&x.im[a..a + nf]);
            }
        }
    }
    StackedMixture {
        re,
        im,
        taps,
        frames: nt,
        bins: nf,
    }
}

/// Per-source filters with planes shaped `(K, M_out, J, T, F)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterSet<T = f64> {
    pub re: Vec<T>,
    pub im: Vec<T>,
    pub sources: usize,
    pub outputs: usize,
    pub taps: usize,
    pub frames: usize,
    pub bins: usize,
}

impl<T: Real> FilterSet<T> {
    pub fn zeros(sources: usize, outputs: usize, taps: usize, frames: usize, bins: usize) -> Self {
        let n = sources * outputs * taps * frames * bins;
        Self {
            re: vec![T::zero(); n],
            im: vec![T::zero(); n],
            sources,
            outputs,
            taps,
            frames,
            bins,
        }
    }

    pub fn index(&self, k: usize, o: usize, j: usize, t: usize, f: usize) -> usize {
        (((k * self.outputs + o) * self.taps + j) * self.frames + t) * self.bins + f
    }

    /// Filter that passes the centre tap of microphone `reference` to every output.
    pub fn reference_selector(
        sources: usize,
        outputs: usize,
        mics: usize,
        half_taps: usize,
        frames: usize,
        bins: usize,
    ) -> Self {
        let mut w = Self::zeros(sources, outputs, (2 * half_taps + 1) * mics, frames, bins);
        for k in 0..sources {
            for o in 0..outputs {
                let j = half_taps * mics + if outputs == mics { o } else { 0 };
                for t in 0..frames {
                    for f in 0..bins {
                        let i = w.index(k, o, j, t, f);
                        w.re[i] = T::one();
                    }
                }
            }
        }
        w
    }

    /// Convert from the graph layout `(K, T, F, 2, M_out, J)`.
    pub fn from_graph_tensor(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 6 || s[3] != 2 {
            return Err(invalid(
                "filter_set",
                format!("expected (K, T, F, 2, Mo, J), got {s:?}"),
            ));
        }
        let (k, nt, nf, mo, nj) = (s[0], s[1], s[2], s[4], s[5]);
        let mut w = Self::zeros(k, mo, nj, nt, nf);
        let d = t.data();
        let mut p = 0;
        for ki in 0..k {
            for ti in 0..nt {
                for fi in 0..nf {
                    for ri in 0..2 {
                        for o in 0..mo {
                            for j in 0..nj {
                                let i = w.index(ki, o, j, ti, fi);
                                if ri == 0 {
                                    w.re[i] = d[p];
                                } else {
                                    w.im[i] = d[p];
                                }
                                p += 1;
                            }
                        }
                    }
                }
            }
        }
        Ok(w)
    }

    pub fn all_finite(&self) -> bool {
        self.re.iter().chain(&self.im).all(|v| v.is_finite())
    }
}

/// `y_{k,tf} = W_{k,tf} x̃_{tf}`, one `M_out`-channel spectrogram per source.
///
/// `like` supplies the STFT geometry (length, sample rate) of the outputs.
pub fn apply_filters<T: Real>(
    w: &FilterSet<T>,
    x: &StackedMixture<T>,
    like: &ComplexSpectrogram<T>,
) -> Result<Vec<ComplexSpectrogram<T>>> {
    if w.taps != x.taps
        || w.frames != x.frames
        || w.bins != x.bins
        || like.frames() != x.frames
        || like.bins() != x.bins
    {
        return Err(mismatch(
            "apply_filters",
            &[w.taps, w.frames, w.bins],
            &[x.taps, x.frames, x.bins],
        ));
    }
    let plane = x.frames * x.bins;
    let mut out = Vec::with_capacity(w.sources);
    for k in 0..w.sources {
        let mut re = vec![T::zero(); w.outputs * plane];
        let mut im = vec![T::zero(); w.outputs * plane];
        for o in 0..w.outputs {
            let (yr, yi) = (
                &mut re[o * plane..(o + 1) * plane],
                &mut im[o * plane..(o + 1) * plane],
            );
            for j in 0..w.taps {
                let wb = w.index(k, o, j, 0, 0);
                let (wr, wi) = (&w.re[wb..wb + plane], &w.im[wb..wb + plane]);
                let (xr, xi) = (
                    &x.re[j * plane..(j + 1) * plane],
                    &x.im[j * plane..(j + 1) * plane],
                );
                for i in 0..plane {
                    yr[i] += wr[i] * xr[i] - wi[i] * xi[i];
                    yi[i] += wr[i] * xi[i] + wi[i] * xr[i];
                }
            }
        }
        out.push(ComplexSpectrogram::from_planes(
            w.outputs,
            like.config(),
            like.length(),
            like.sample_rate(),
            re,
            im,
        )?);
    }
    Ok(out)
}
