//! The separation network: encoder, `R` stages of temporal, frequency and
//! spectral modules, and a multi-tap filter (or direct mapping) head.
//!
//! Activations are channel-last, `H (T, F, C)`. Parameter names are
//! dot-separated paths such as `stage1.spectral.branch0.block.ega.qkv.w`.

pub mod blocks;
pub mod params;

use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use blocks::BlockCfg;
pub use params::{Bound, ParamInit, Params};

use crate::config::KvConfig;
use crate::error::{invalid, Error, Result};
use crate::features::{
    alt_features, pairwise_correlations, phat_features_graph, GraphCorrelations, InputMode,
    PHAT_EPS,
};
use crate::filter::{stack_taps, FilterSet};
use crate::stft::ComplexSpectrogram;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Whether every microphone (MIMO) or only the reference (MISO) is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadMode {
    Mimo,
    Miso,
}

/// Whether the head emits filters applied to the mixture or the outputs directly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputMode {
    Filtering,
    Mapping,
}

impl FromStr for HeadMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mimo" => Ok(Self::Mimo),
            "miso" => Ok(Self::Miso),
            _ => Err(invalid("head_mode", format!("unknown head mode {s:?}"))),
        }
    }
}

impl FromStr for OutputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "filtering" | "filter" => Ok(Self::Filtering),
            "mapping" | "map" => Ok(Self::Mapping),
            _ => Err(invalid("output_mode", format!("unknown output mode {s:?}"))),
        }
    }
}

impl HeadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            HeadMode::Mimo => "mimo",
            HeadMode::Miso => "miso",
        }
    }
}

impl OutputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputMode::Filtering => "filtering",
            OutputMode::Mapping => "mapping",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input microphone channels `M`.
    pub mics: usize,
    /// Sources `K`.
    pub sources: usize,
    pub channels: usize,
    pub spec_channels: usize,
    pub spec_dim: usize,
    pub stages: usize,
    pub heads: usize,
    pub dconv_kernel: usize,
    pub downsample: usize,
    /// Filter half-taps `L`; the filter spans `2L + 1` frames.
    pub half_taps: usize,
    /// Frequency bins `F`.
    pub bins: usize,
    /// GLU output width of the EFN as a multiple of its input width.
    pub efn_expansion: usize,
    pub head_mode: HeadMode,
    pub input_mode: InputMode,
    pub output_mode: OutputMode,
    pub beta_init: f64,
    pub beta_trainable: bool,
}

impl ModelConfig {
    /// Published configuration (`C = 96`, `C' = 16`, `F' = 96`, `R = 4`).
    pub fn published(mics: usize, bins: usize) -> Self {
        Self {
            mics,
            sources: 2,
            channels: 96,
            spec_channels: 16,
            spec_dim: 96,
            stages: 4,
            heads: 4,
            dconv_kernel: 65,
            downsample: 4,
            half_taps: 1,
            bins,
            efn_expansion: 3,
            head_mode: HeadMode::Miso,
            input_mode: InputMode::Correlation,
            output_mode: OutputMode::Filtering,
            beta_init: 0.5,
            beta_trainable: true,
        }
    }

    /// Small configuration that trains on a CPU in minutes.
    pub fn desk(mics: usize, bins: usize) -> Self {
        Self {
            channels: 16,
            spec_channels: 4,
            spec_dim: 16,
            stages: 2,
            heads: 2,
            dconv_kernel: 9,
            downsample: 2,
            head_mode: HeadMode::Mimo,
            ..Self::published(mics, bins)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.mics == 0 || self.sources == 0 || self.stages == 0 || self.channels == 0 {
            return fail("mics, sources, R and C must be positive".into());
        }
        if self.spec_channels == 0 || self.spec_channels >= self.channels {
            return fail(format!(
                "C' = {} must lie in 1..C = {}",
                self.spec_channels, self.channels
            ));
        }
        if self.spec_dim == 0 || self.spec_dim >= self.bins {
            return fail(format!(
                "F' = {} must lie in 1..F = {}",
                self.spec_dim, self.bins
            ));
        }
        if self.dconv_kernel % 2 == 0 {
            return fail(format!(
                "dconv_kernel must be odd, got {}",
                self.dconv_kernel
            ));
        }
        if self.downsample == 0 || self.efn_expansion == 0 || self.heads == 0 {
            return fail("downsample, efn_expansion and heads must be >= 1".into());
        }
        if self.channels % self.heads != 0 || self.spec_dim % self.heads != 0 {
            return fail(format!("heads = {} must divide C and F'", self.heads));
        }
        if self.beta_trainable && !(self.beta_init > 0.0 && self.beta_init < 1.0) {
            return fail(format!(
                "trainable beta needs beta_init in (0, 1), got {}",
                self.beta_init
            ));
        }
        if !(0.0..=1.0).contains(&self.beta_init) {
            return fail(format!("beta_init {} outside [0, 1]", self.beta_init));
        }
        Ok(())
    }

    pub fn outputs(&self) -> usize {
        match self.head_mode {
            HeadMode::Mimo => self.mics,
            HeadMode::Miso => 1,
        }
    }

    /// Filter length `(2L + 1)·M`.
    pub fn taps(&self) -> usize {
        (2 * self.half_taps + 1) * self.mics
    }

    pub fn input_channels(&self) -> usize {
        self.input_mode.channels(self.mics)
    }

    /// Head conv output channels per source.
    pub fn head_channels(&self) -> usize {
        match self.output_mode {
            OutputMode::Filtering => 2 * self.outputs() * self.taps(),
            OutputMode::Mapping => 2 * self.outputs(),
        }
    }

    pub fn block(&self, width: usize) -> BlockCfg {
        BlockCfg {
            width,
            heads: self.heads,
            kernel: self.dconv_kernel,
            factor: self.downsample,
            expansion: self.efn_expansion,
        }
    }

    pub fn write_kv(&self, kv: &mut KvConfig) {
        kv.set("mics", self.mics);
        kv.set("sources", self.sources);
        kv.set("C", self.channels);
        kv.set("C_prime", self.spec_channels);
        kv.set("F_prime", self.spec_dim);
        kv.set("R", self.stages);
        kv.set("heads", self.heads);
        kv.set("dconv_kernel", self.dconv_kernel);
        kv.set("downsample", self.downsample);
        kv.set("taps_L", self.half_taps);
        kv.set("bins", self.bins);
        kv.set("efn_expansion", self.efn_expansion);
        kv.set("head_mode", self.head_mode.as_str());
        kv.set("input_mode", self.input_mode.as_str());
        kv.set("output_mode", self.output_mode.as_str());
        kv.set("beta_init", self.beta_init);
        kv.set("beta_trainable", self.beta_trainable);
    }

    /// Read a configuration; absent keys fall back to [`ModelConfig::desk`].
    /// `bins` may be given directly or derived from `n_fft`.
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let mics = kv.get_or("mics", 2)?;
        let bins = match kv.get::<usize>("bins")? {
            Some(b) => b,
            None => kv.get_or::<usize>("n_fft", 128)? / 2 + 1,
        };
        let d = Self::desk(mics, bins);
        let cfg = Self {
            mics,
            bins,
            sources: kv.get_or("sources", d.sources)?,
            channels: kv.get_or("C", d.channels)?,
            spec_channels: kv.get_or("C_prime", d.spec_channels)?,
            spec_dim: kv.get_or("F_prime", d.spec_dim)?,
            stages: kv.get_or("R", d.stages)?,
            heads: kv.get_or("heads", d.heads)?,
            dconv_kernel: kv.get_or("dconv_kernel", d.dconv_kernel)?,
            downsample: kv.get_or("downsample", d.downsample)?,
            half_taps: kv.get_or("taps_L", d.half_taps)?,
            efn_expansion: kv.get_or("efn_expansion", d.efn_expansion)?,
            head_mode: kv.get_or("head_mode", d.head_mode)?,
            input_mode: kv.get_or("input_mode", d.input_mode)?,
            output_mode: kv.get_or("output_mode", d.output_mode)?,
            beta_init: kv.get_or("beta_init", d.beta_init)?,
            beta_trainable: kv.get_or("beta_trainable", d.beta_trainable)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Network input derived from a mixture spectrogram.
pub struct ModelInput<T> {
    features: Features<T>,
    /// Tap-stacked mixture `(T, F, 2, J)`; present in filtering mode.
    stacked: Option<Tensor<T>>,
    frames: usize,
}

enum Features<T> {
    Correlation(GraphCorrelations<T>),
    /// Channel-last `(T, F, C_in)`.
    Direct(Tensor<T>),
}

impl<T> ModelInput<T> {
    pub fn frames(&self) -> usize {
        self.frames
    }
}

/// Network parameters together with their configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TfCorrNet<T = f32> {
    cfg: ModelConfig,
    params: Params<T>,
}

impl<T: Real> TfCorrNet<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed)?;
        Ok(Self { cfg, params })
    }

    /// Wrap existing parameters, checking names and shapes against the config.
    pub fn from_params(cfg: ModelConfig, params: Params<T>) -> Result<Self> {
        cfg.validate()?;
        let reference = init_params::<T>(&cfg, 0)?;
        for (name, t) in reference.names().iter().zip(reference.tensors()) {
            match params.get(name) {
                None => return Err(Error::Checkpoint(format!("missing parameter {name:?}"))),
                Some(p) if p.shape() != t.shape() => {
                    return Err(Error::Checkpoint(format!(
                        "{name}: shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        if params.len() != reference.len() {
            let extra = params.names().iter().find(|n| reference.get(n).is_none());
            return Err(Error::Checkpoint(format!("unexpected parameter {extra:?}")));
        }
        // keep the canonical order
        let mut ordered = Params::new();
        for name in reference.names() {
            ordered.insert(name.clone(), params.get(name).cloned().unwrap_or_default())?;
        }
        Ok(Self {
            cfg,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.count()
    }

    pub fn cast<U: Real>(&self) -> TfCorrNet<U> {
        TfCorrNet {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    pub fn prepare(&self, x: &ComplexSpectrogram<T>) -> Result<ModelInput<T>> {
        if x.channels() != self.cfg.mics || x.bins() != self.cfg.bins {
            return Err(invalid(
                "model input",
                format!(
                    "expected {} mics x {} bins, got {} x {}",
                    self.cfg.mics,
                    self.cfg.bins,
                    x.channels(),
                    x.bins()
                ),
            ));
        }
        let features = match self.cfg.input_mode {
            InputMode::Correlation => {
                Features::Correlation(GraphCorrelations::new(&pairwise_correlations(x), PHAT_EPS))
            }
            mode => {
                let t = alt_features(x, mode)?;
                let (c, nt, nf) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut data = Vec::with_capacity(t.len());
                for i in 0..nt * nf {
                    data.extend((0..c).map(|ch| t.data()[ch * nt * nf + i]));
                }
                Features::Direct(Tensor::new(&[nt, nf, c], data)?)
            }
        };
        let stacked = match self.cfg.output_mode {
            OutputMode::Filtering => Some(stack_taps(x, self.cfg.half_taps).to_graph_tensor()),
            OutputMode::Mapping => None,
        };
        Ok(ModelInput {
            features,
            stacked,
            frames: x.frames(),
        })
    }

    /// Network input features, channel-last `(T, F, C_in)`.
    pub fn features(&self, g: &mut Graph<T>, p: &Bound<T>, input: &ModelInput<T>) -> Result<Var> {
        match &input.features {
            Features::Direct(t) => Ok(g.constant(t.clone())),
            Features::Correlation(corr) => {
                let beta = if self.cfg.beta_trainable {
                    let b = p.var("features.beta_logit")?;
                    g.sigmoid(b)?
                } else {
                    g.constant(Tensor::full(
                        &[1, self.cfg.bins, 1],
                        T::of(self.cfg.beta_init),
                    ))
                };
                phat_features_graph(g, corr, beta)
            }
        }
    }

    /// 3×3 convolution to `C` channels followed by layer norm over channels.
    pub fn encoder(&self, g: &mut Graph<T>, p: &Bound<T>, z: Var) -> Result<Var> {
        let s = g.shape(z).to_vec();
        if s.len() != 3 || s[2] != self.cfg.input_channels() {
            return Err(invalid(
                "encoder",
                format!("expected (T, F, {}), got {s:?}", self.cfg.input_channels()),
            ));
        }
        let x = g.reshape(z, &[1, s[0], s[1], s[2]])?;
        let w = p.var("encoder.conv.w")?;
        let b = p.var("encoder.conv.b")?;
        let h = g.conv2d_cl(x, w, Some(b))?;
        let h = g.reshape(h, &[s[0], s[1], self.cfg.channels])?;
        blocks::ln(g, p, "encoder.ln", h)
    }

    /// One global/local block per frequency bin, over sequences of frames.
    pub fn temporal(&self, g: &mut Graph<T>, p: &Bound<T>, stage: usize, h: Var) -> Result<Var> {
        let x = g.permute(h, &[1, 0, 2])?;
        let y = blocks::gl_block(
            g,
            p,
            &format!("stage{stage}.temporal"),
            x,
            &self.cfg.block(self.cfg.channels),
        )?;
        g.permute(y, &[1, 0, 2])
    }

    /// One global/local block per frame, over sequences of bins.
    pub fn frequency(&self, g: &mut Graph<T>, p: &Bound<T>, stage: usize, h: Var) -> Result<Var> {
        blocks::gl_block(
            g,
            p,
            &format!("stage{stage}.frequency"),
            h,
            &self.cfg.block(self.cfg.channels),
        )
    }

    /// Channel projection to two `C'`-wide branches; each is projected over
    /// frequency to `F'`, run through a global/local block over frames, and
    /// projected back to `F`. The branch sum is lifted back to `C` by two
    /// linear layers and added to the input.
    pub fn spectral(&self, g: &mut Graph<T>, p: &Bound<T>, stage: usize, h: Var) -> Result<Var> {
        let pre = format!("stage{stage}.spectral");
        let cp = self.cfg.spec_channels;
        let proj = blocks::lin(g, p, &format!("{pre}.proj"), h)?;
        let mut sum = None;
        for b in 0..2 {
            let s = g.slice(proj, 2, b * cp, cp)?;
            let s = g.permute(s, &[2, 0, 1])?;
            let s = blocks::lin(g, p, &format!("{pre}.branch{b}.fin"), s)?;
            let s = blocks::gl_block(
                g,
                p,
                &format!("{pre}.branch{b}.block"),
                s,
                &self.cfg.block(self.cfg.spec_dim),
            )?;
            let s = blocks::lin(g, p, &format!("{pre}.branch{b}.fout"), s)?;
            sum = Some(match sum {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        let s = g.permute(sum.expect("two branches"), &[1, 2, 0])?;
        let s = blocks::lin(g, p, &format!("{pre}.back1"), s)?;
        let s = blocks::lin(g, p, &format!("{pre}.back2"), s)?;
        g.add(h, s)
    }

    pub fn stage(&self, g: &mut Graph<T>, p: &Bound<T>, stage: usize, h: Var) -> Result<Var> {
        let h = self.temporal(g, p, stage, h)?;
        let h = self.frequency(g, p, stage, h)?;
        self.spectral(g, p, stage, h)
    }

    /// Split to `K` source features and apply the shared 3×3 conv:
    /// `(K, T, F, head_channels)`.
    pub fn head(&self, g: &mut Graph<T>, p: &Bound<T>, h: Var) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let (k, c) = (self.cfg.sources, self.cfg.channels);
        let y = blocks::lin(g, p, "head.split", h)?;
        let y = g.reshape(y, &[s[0], s[1], k, c])?;
        let y = g.permute(y, &[2, 0, 1, 3])?;
        let w = p.var("head.conv.w")?;
        let b = p.var("head.conv.b")?;
        g.conv2d_cl(y, w, Some(b))
    }

    /// Source estimates `(K, T, F, 2, M_out)`.
    pub fn forward(&self, g: &mut Graph<T>, p: &Bound<T>, input: &ModelInput<T>) -> Result<Var> {
        let head = self.forward_head(g, p, input)?;
        self.estimates_from_head(g, head, input)
    }

    /// Raw head output `(K, T, F, head_channels)`.
    pub fn forward_head(
        &self,
        g: &mut Graph<T>,
        p: &Bound<T>,
        input: &ModelInput<T>,
    ) -> Result<Var> {
        let z = self.features(g, p, input)?;
        let mut h = self.encoder(g, p, z)?;
        for r in 0..self.cfg.stages {
            h = self.stage(g, p, r, h)?;
        }
        self.head(g, p, h)
    }

    fn estimates_from_head(
        &self,
        g: &mut Graph<T>,
        head: Var,
        input: &ModelInput<T>,
    ) -> Result<Var> {
        let (k, nt, nf, mo) = (
            self.cfg.sources,
            input.frames,
            self.cfg.bins,
            self.cfg.outputs(),
        );
        match (&input.stacked, self.cfg.output_mode) {
            (Some(x), OutputMode::Filtering) => {
                let w = g.reshape(head, &[k, nt, nf, 2, mo, self.cfg.taps()])?;
                g.complex_filter(w, x)
            }
            (_, OutputMode::Mapping) => g.reshape(head, &[k, nt, nf, 2, mo]),
            (None, OutputMode::Filtering) => {
                Err(invalid("forward", "input prepared without tap stack"))
            }
        }
    }

    /// Estimated multi-tap filters (filtering mode only).
    pub fn estimate_filters(&self, x: &ComplexSpectrogram<T>) -> Result<FilterSet<T>> {
        if self.cfg.output_mode != OutputMode::Filtering {
            return Err(invalid("estimate_filters", "model is in mapping mode"));
        }
        let input = self.prepare(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let head = self.forward_head(&mut g, &p, &input)?;
        let s = g.shape(head).to_vec();
        let w = g.reshape(
            head,
            &[s[0], s[1], s[2], 2, self.cfg.outputs(), self.cfg.taps()],
        )?;
        FilterSet::from_graph_tensor(g.value(w))
    }

    /// Separate one chunk: one `M_out`-channel spectrogram per source.
    pub fn separate(&self, x: &ComplexSpectrogram<T>) -> Result<Vec<ComplexSpectrogram<T>>> {
        let input = self.prepare(x)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let y = self.forward(&mut g, &p, &input)?;
        estimates_to_spectrograms(g.value(y), x)
    }
}

/// Split `(K, T, F, 2, M_out)` estimates into per-source spectrograms shaped like `like`.
pub fn estimates_to_spectrograms<T: Real>(
    y: &Tensor<T>,
    like: &ComplexSpectrogram<T>,
) -> Result<Vec<ComplexSpectrogram<T>>> {
    let s = y.shape();
    if s.len() != 5 || s[3] != 2 || s[1] != like.frames() || s[2] != like.bins() {
        return Err(invalid(
            "estimates",
            format!("unexpected estimate shape {s:?}"),
        ));
    }
    let (k, nt, nf, mo) = (s[0], s[1], s[2], s[4]);
    let d = y.data();
    (0..k)
        .map(|ki| {
            let mut re = vec![T::zero(); mo * nt * nf];
            let mut im = vec![T::zero(); mo * nt * nf];
            for t in 0..nt {
                for f in 0..nf {
                    let base = (((ki * nt + t) * nf + f) * 2) * mo;
                    for o in 0..mo {
                        re[(o * nt + t) * nf + f] = d[base + o];
                        im[(o * nt + t) * nf + f] = d[base + mo + o];
                    }
                }
            }
            ComplexSpectrogram::from_planes(
                mo,
                like.config(),
                like.length(),
                like.sample_rate(),
                re,
                im,
            )
        })
        .collect()
}

fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<Params<T>> {
    let mut init = ParamInit::new(ChaCha8Rng::seed_from_u64(seed));
    if cfg.input_mode == InputMode::Correlation && cfg.beta_trainable {
        let b = (cfg.beta_init / (1.0 - cfg.beta_init)).ln();
        init.raw(
            "features.beta_logit",
            Tensor::full(&[1, cfg.bins, 1], T::of(b)),
        )?;
    }
    init.conv2d("encoder.conv", 3, cfg.input_channels(), cfg.channels)?;
    init.layernorm("encoder.ln", cfg.channels)?;
    let (c, cp, fp, f) = (cfg.channels, cfg.spec_channels, cfg.spec_dim, cfg.bins);
    for r in 0..cfg.stages {
        blocks::init_gl_block(&mut init, &format!("stage{r}.temporal"), &cfg.block(c))?;
        blocks::init_gl_block(&mut init, &format!("stage{r}.frequency"), &cfg.block(c))?;
        let pre = format!("stage{r}.spectral");
        init.linear(&format!("{pre}.proj"), c, 2 * cp, false)?;
        for b in 0..2 {
            init.linear(&format!("{pre}.branch{b}.fin"), f, fp, false)?;
            blocks::init_gl_block(&mut init, &format!("{pre}.branch{b}.block"), &cfg.block(fp))?;
            init.linear(&format!("{pre}.branch{b}.fout"), fp, f, false)?;
        }
        init.linear(&format!("{pre}.back1"), cp, c, false)?;
        init.linear(&format!("{pre}.back2"), c, c, true)?;
    }
    init.linear("head.split", c, cfg.sources * c, false)?;
    init.conv2d("head.conv", 3, c, cfg.head_channels())?;
    Ok(init.params)
}
