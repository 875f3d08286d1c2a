//! Separation metrics and analytic cost accounting.

use serde::{Deserialize, Serialize};

use crate::css::{run_css, separate_waveform, ChunkSchedule, Separator};
use crate::error::{invalid, mismatch, Result};
use crate::model::{HeadMode, ModelConfig, OutputMode};
use crate::stft::{StftConfig, Waveform};
use crate::training::{permutations, Example};

/// Upper bound on reported ratios, reached by exact matches.
pub const SDR_CAP_DB: f64 = 60.0;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den <= num * 10f64.powf(-SDR_CAP_DB / 10.0) {
        SDR_CAP_DB
    } else {
        (10.0 * (num / den).log10()).min(SDR_CAP_DB)
    }
}

fn check(op: &'static str, est: &[f64], reference: &[f64]) -> Result<()> {
    if est.len() != reference.len() {
        return Err(mismatch(op, &[est.len()], &[reference.len()]));
    }
    if energy(reference) == 0.0 {
        return Err(invalid(op, "reference is all zeros"));
    }
    Ok(())
}

/// `10·log10(‖s‖² / ‖s − ŝ‖²)`, capped at [`SDR_CAP_DB`].
pub fn sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check("sdr", est, reference)?;
    let err: f64 = est.iter().zip(reference).map(|(e, r)| (r - e).powi(2)).sum();
    Ok(ratio_db(energy(reference), err))
}

/// Scale-invariant SDR: the reference is first scaled to the projection of the estimate.
pub fn si_sdr(est: &[f64], reference: &[f64]) -> Result<f64> {
    check("si_sdr", est, reference)?;
    let a = est.iter().zip(reference).map(|(e, r)| e * r).sum::<f64>() / energy(reference);
    let target: Vec<f64> = reference.iter().map(|r| a * r).collect();
    let err: f64 = est.iter().zip(&target).map(|(e, t)| (e - t).powi(2)).sum();
    Ok(ratio_db(energy(&target), err))
}

/// Metrics of one example under its best output/reference assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleMetrics {
    pub id: String,
    /// `permutation[i]` is the reference matched to output `i`.
    pub permutation: Vec<usize>,
    /// Per reference, in reference order.
    pub sdr: Vec<f64>,
    pub sdri: Vec<f64>,
    pub si_sdr: Vec<f64>,
}

impl ExampleMetrics {
    pub fn mean_sdri(&self) -> f64 {
        mean(&self.sdri)
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len().max(1) as f64
}

/// Best-permutation metrics of `estimates` against `references` (single channel each).
/// The permutation maximises mean SDR; `mixture` is the no-processing baseline.
pub fn example_metrics(id: &str, estimates: &[Vec<f64>], references: &[Vec<f64>], mixture: &[f64]) -> Result<ExampleMetrics> {
    let k = references.len();
    if estimates.len() != k || k == 0 {
        return Err(invalid("metrics", format!("{} estimates for {k} references", estimates.len())));
    }
    let table: Vec<Vec<f64>> = estimates
        .iter()
        .map(|e| references.iter().map(|r| sdr(e, r)).collect::<Result<_>>())
        .collect::<Result<_>>()?;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for p in permutations(k) {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| table[i][j]).sum();
        if best.as_ref().is_none_or(|(b, _)| total > *b) {
            best = Some((total, p));
        }
    }
    let (_, perm) = best.expect("k >= 1");
    let mut sdr_v = vec![0.0; k];
    let mut si = vec![0.0; k];
    let mut sdri = vec![0.0; k];
    for (i, &j) in perm.iter().enumerate() {
        sdr_v[j] = table[i][j];
        si[j] = si_sdr(&estimates[i], &references[j])?;
        sdri[j] = table[i][j] - sdr(mixture, &references[j])?;
    }
    Ok(ExampleMetrics {
        id: id.to_string(),
        permutation: perm,
        sdr: sdr_v,
        sdri,
        si_sdr: si,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub examples: Vec<ExampleMetrics>,
    pub mean_sdr: f64,
    pub mean_sdri: f64,
    pub mean_si_sdr: f64,
}

impl MetricReport {
    pub fn new(examples: Vec<ExampleMetrics>) -> Self {
        let all = |f: fn(&ExampleMetrics) -> &Vec<f64>| mean(&examples.iter().flat_map(|e| f(e).iter().copied()).collect::<Vec<_>>());
        Self {
            mean_sdr: all(|e| &e.sdr),
            mean_sdri: all(|e| &e.sdri),
            mean_si_sdr: all(|e| &e.si_sdr),
            examples,
        }
    }
}

/// Whole-signal or chunked (continuous) separation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunMode {
    Single,
    Css(ChunkSchedule),
}

/// One waveform per source.
pub fn run_separator(sep: &dyn Separator, x: &Waveform<f64>, cfg: StftConfig, mode: RunMode) -> Result<Vec<Waveform<f64>>> {
    match mode {
        RunMode::Single => separate_waveform(sep, x, cfg),
        RunMode::Css(schedule) => run_css(sep, x, cfg, schedule)?.waveforms(),
    }
}

/// Separate every example and score the `reference` channel against the
/// direct-path targets. Examples run on `threads` threads (0 = all cores);
/// the report keeps input order.
pub fn evaluate(
    sep: &(dyn Separator + Sync),
    data: &[(String, Example)],
    cfg: StftConfig,
    mode: RunMode,
    reference: usize,
    threads: usize,
) -> Result<MetricReport> {
    let per = crate::par::map(data, crate::par::resolve(threads), |(id, ex)| -> Result<ExampleMetrics> {
        if reference >= ex.mixture.channels() {
            return Err(invalid("evaluate", format!("reference mic {reference} of {}", ex.mixture.channels())));
        }
        let out = run_separator(sep, &ex.mixture, cfg, mode)?;
        let pick = |w: &Waveform<f64>| w.channel(reference.min(w.channels() - 1)).to_vec();
        let estimates: Vec<Vec<f64>> = out.iter().map(pick).collect();
        let references: Vec<Vec<f64>> = ex.targets.iter().map(pick).collect();
        example_metrics(id, &estimates, &references, ex.mixture.channel(reference))
    });
    Ok(MetricReport::new(per.into_iter().collect::<Result<_>>()?))
}

/// Parameters and multiply-accumulates of one named module.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleCost {
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub params: u64,
    /// Multiply-accumulates for `frames` frames.
    pub macs: u64,
    pub frames: usize,
    pub macs_per_second: f64,
    pub modules: Vec<ModuleCost>,
}

#[derive(Default)]
struct Tally {
    params: u64,
    macs: u64,
}

impl Tally {
    /// `rows` applications of a `din → dout` linear layer with bias.
    fn linear(&mut self, rows: usize, din: usize, dout: usize) {
        self.params += (din * dout + dout) as u64;
        self.macs += (rows * din * dout) as u64;
    }

    fn layernorm(&mut self, width: usize) {
        self.params += 2 * width as u64;
    }

    fn macs(&mut self, n: usize) {
        self.macs += n as u64;
    }
}

fn pooled(len: usize, factor: usize) -> usize {
    len.div_ceil(factor)
}

/// Global/local block over `n` sequences of length `l` and width `d`.
fn gl_block_cost(t: &mut Tally, cfg: &ModelConfig, n: usize, l: usize, d: usize) {
    let lp = pooled(l, cfg.downsample);
    // EGA
    t.layernorm(d);
    t.linear(n * l, d, d);
    t.linear(n * lp, d, 3 * d);
    t.macs(2 * n * lp * lp * d);
    t.linear(n * lp, d, d);
    // EFN, twice
    let hidden = cfg.efn_expansion * d;
    for _ in 0..2 {
        t.layernorm(d);
        t.linear(n * l, d, d);
        t.linear(n * lp, d, 2 * hidden);
        t.linear(n * lp, hidden, d);
    }
    // CLA
    t.layernorm(d);
    t.linear(n * l, d, 2 * d);
    t.params += (d * cfg.dconv_kernel + d) as u64;
    t.macs(n * l * d * cfg.dconv_kernel);
    t.linear(n * l, d, d);
}

/// Analytic walk over every layer for `frames` STFT frames. One complex
/// multiply-accumulate counts as four real ones; elementwise work is free.
pub fn count_costs(cfg: &ModelConfig, frames: usize, seconds: f64) -> CostReport {
    let (nt, nf, c) = (frames, cfg.bins, cfg.channels);
    let mut modules = Vec::new();
    let mut push = |name: String, t: Tally| {
        modules.push(ModuleCost {
            name,
            params: t.params,
            macs: t.macs,
        })
    };

    let mut t = Tally::default();
    if cfg.input_mode == crate::features::InputMode::Correlation && cfg.beta_trainable {
        t.params += nf as u64;
    }
    push("features".into(), t);

    let mut t = Tally::default();
    let cin = cfg.input_channels();
    t.params += (9 * cin * c + c) as u64;
    t.macs(nt * nf * 9 * cin * c);
    t.layernorm(c);
    push("encoder".into(), t);

    for r in 0..cfg.stages {
        let mut t = Tally::default();
        gl_block_cost(&mut t, cfg, nf, nt, c);
        push(format!("stage{r}.temporal"), t);

        let mut t = Tally::default();
        gl_block_cost(&mut t, cfg, nt, nf, c);
        push(format!("stage{r}.frequency"), t);

        let mut t = Tally::default();
        let (cp, fp) = (cfg.spec_channels, cfg.spec_dim);
        t.linear(nt * nf, c, 2 * cp);
        for _ in 0..2 {
            t.linear(cp * nt, nf, fp);
            gl_block_cost(&mut t, cfg, cp, nt, fp);
            t.linear(cp * nt, fp, nf);
        }
        t.linear(nt * nf, cp, c);
        t.linear(nt * nf, c, c);
        push(format!("stage{r}.spectral"), t);
    }

    let mut t = Tally::default();
    let k = cfg.sources;
    t.linear(nt * nf, c, k * c);
    let hc = cfg.head_channels();
    t.params += (9 * c * hc + hc) as u64;
    t.macs(k * nt * nf * 9 * c * hc);
    if cfg.output_mode == OutputMode::Filtering {
        let mo = match cfg.head_mode {
            HeadMode::Mimo => cfg.mics,
            HeadMode::Miso => 1,
        };
        t.macs(4 * k * nt * nf * mo * cfg.taps());
    }
    push("head".into(), t);

    let params = modules.iter().map(|m| m.params).sum();
    let macs = modules.iter().map(|m| m.macs).sum();
    CostReport {
        params,
        macs,
        frames,
        macs_per_second: macs as f64 / seconds,
        modules,
    }
}

/// Costs for one second of audio at `sample_rate` with hop `hop`.
pub fn costs_per_second(cfg: &ModelConfig, sample_rate: u32, hop: usize) -> CostReport {
    let frames = 1 + sample_rate as usize / hop;
    count_costs(cfg, frames, 1.0)
}

/// Group module costs by their first path component (`stage0.temporal` → `temporal`).
pub fn breakdown_by_kind(report: &CostReport) -> Vec<ModuleCost> {
    let mut out: Vec<ModuleCost> = Vec::new();
    for m in &report.modules {
        let kind = m.name.rsplit('.').next().unwrap_or(&m.name).to_string();
        match out.iter_mut().find(|o| o.name == kind) {
            Some(o) => {
                o.params += m.params;
                o.macs += m.macs;
            }
            None => out.push(ModuleCost { name: kind, ..m.clone() }),
        }
    }
    out
}
