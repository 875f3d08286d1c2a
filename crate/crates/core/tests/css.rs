use std::cell::Cell;

use corrnet::css::{
    mwf_beamformer, mwf_weights, plan_chunks, run_css, second_stage_examples, second_stage_input, spatial_covariance, stitch,
    ChunkLog, ChunkSchedule, Separator, TwoStage,
};
use corrnet::error::Result;
use corrnet::features::{flatten_features, pairwise_correlations};
use corrnet::mixsim::{make_mixture, synth_source, RoomScene};
use corrnet::model::{HeadMode, ModelConfig, TfCorrNet};
use corrnet::stft::{istft, stft, ComplexSpectrogram, StftConfig, Waveform};
use corrnet::training::Example;
use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FS: u32 = 8000;

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

fn db(num: f64, den: f64) -> f64 {
    10.0 * (num / den).log10()
}

#[test]
fn default_schedule_in_frames() {
    let f = ChunkSchedule::default().frames(16000, 256).unwrap();
    assert_eq!((f.history, f.current, f.future), (75, 50, 25));
    assert_eq!(f.window_samples(), 38_400);
    assert_eq!(f.overlap(), 100);
    let f = ChunkSchedule::default().frames(FS, 64).unwrap();
    assert_eq!((f.history, f.current, f.future), (150, 100, 50));
    let tiny = ChunkSchedule {
        history: 0.0,
        current: 0.001,
        future: 0.0,
    };
    assert!(tiny.frames(FS, 64).is_err());
}

#[test]
fn chunks_tile_the_stream() {
    let f = ChunkSchedule::default().frames(FS, 64).unwrap();
    for total in [1, 6399, 6400, 6401, 80_000, 80_123] {
        let chunks = plan_chunks(total, f).unwrap();
        assert_eq!(chunks.len(), total.div_ceil(6400));
        let mut next = 0;
        for c in &chunks {
            assert_eq!(c.current_start, next);
            assert_eq!(c.start, c.current_start as isize - 9600);
            assert_eq!(c.len, 19_200);
            next = c.current_end;
        }
        assert_eq!(next, total);
    }
    assert!(plan_chunks(0, f).is_err());
}

fn spec(x: &[f64]) -> ComplexSpectrogram<f64> {
    stft(&Waveform::new(1, FS, x.to_vec()).unwrap(), StftConfig::half_overlap(128).unwrap()).unwrap()
}

#[test]
fn stitch_recovers_identity_and_swap() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let a = spec(&synth_source(4000, FS, &mut rng));
    let b = spec(&synth_source(4000, FS, &mut rng));
    let prev = vec![a.clone(), b.clone()];
    let (p, c) = stitch(&prev, 10, &[a.clone(), b.clone()], 10, 20);
    assert_eq!((p, c), (vec![0, 1], 0.0));
    let (p, c) = stitch(&prev, 10, &[b, a], 10, 20);
    assert_eq!((p, c), (vec![1, 0], 0.0));
}

/// Returns the true windowed source spectra for each successive window,
/// shuffled, with a little cross-talk.
struct Oracle {
    sources: Vec<Waveform<f64>>,
    starts: Vec<isize>,
    len: usize,
    cfg: StftConfig,
    flips: Vec<Vec<usize>>,
    call: Cell<usize>,
    leak: f64,
}

impl Separator for Oracle {
    fn sources(&self) -> usize {
        self.sources.len()
    }

    fn separate(&self, _x: &ComplexSpectrogram<f64>) -> Result<Vec<ComplexSpectrogram<f64>>> {
        let i = self.call.get();
        self.call.set(i + 1);
        let w: Vec<Waveform<f64>> = self.sources.iter().map(|s| s.window(self.starts[i], self.len)).collect();
        let k = w.len();
        self.flips[i]
            .iter()
            .map(|&src| {
                let mut y = w[src].clone();
                let other = &w[(src + 1) % k];
                for (a, b) in y.channel_mut(0).iter_mut().zip(other.channel(0)) {
                    *a += self.leak * b;
                }
                stft(&y, self.cfg)
            })
            .collect()
    }
}

#[test]
fn oracle_stream_with_flips_is_stitched() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let total = 10 * FS as usize;
    let sources: Vec<Waveform<f64>> = (0..2)
        .map(|_| Waveform::new(1, FS, synth_source(total, FS, &mut rng)).unwrap())
        .collect();
    let mix = Waveform::new(1, FS, (0..total).map(|i| sources[0].data()[i] + sources[1].data()[i]).collect()).unwrap();
    let cfg = StftConfig::half_overlap(128).unwrap();
    let schedule = ChunkSchedule::default();
    let frames = schedule.frames(FS, cfg.hop()).unwrap();
    let chunks = plan_chunks(total, frames).unwrap();
    let flips: Vec<Vec<usize>> = (0..chunks.len())
        .map(|_| if rng.random_bool(0.5) { vec![1, 0] } else { vec![0, 1] })
        .collect();
    assert!(flips.iter().filter(|f| f[0] == 1).count() >= 3);
    let oracle = Oracle {
        sources: sources.clone(),
        starts: chunks.iter().map(|c| c.start).collect(),
        len: frames.window_samples(),
        cfg,
        flips: flips.clone(),
        call: Cell::new(0),
        leak: 0.2,
    };
    let out = run_css(&oracle, &mix, cfg, schedule).unwrap();
    assert_eq!(out.log.len(), chunks.len());

    // stream receiving source s in the first window
    let mut stream_of = [0usize; 2];
    for (j, &src) in flips[0].iter().enumerate() {
        stream_of[src] = out.log[0].permutation[j];
    }
    let correct = out
        .log
        .iter()
        .zip(&flips)
        .filter(|(l, f)| f.iter().enumerate().all(|(j, &src)| l.permutation[j] == stream_of[src]))
        .count();
    let accuracy = correct as f64 / chunks.len() as f64;
    assert!(accuracy >= 0.9, "accuracy {accuracy}");

    // the stitched streams carry one source each, at the leakage level
    let waves = out.waveforms().unwrap();
    for s in 0..2 {
        let y = waves[stream_of[s]].channel(0);
        let target: Vec<f64> = (0..total).map(|i| sources[s].data()[i] + 0.2 * sources[1 - s].data()[i]).collect();
        let err: Vec<f64> = y.iter().zip(&target).map(|(a, b)| a - b).collect();
        assert!(db(energy(&target), energy(&err)) > 40.0);
    }
    let lines: Vec<ChunkLog> = out.log_jsonl().unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines, out.log);
}

fn c(re: f64, im: f64) -> Complex<f64> {
    Complex::new(re, im)
}

#[test]
fn mwf_passthrough_and_null_limits() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = 4;
    let a = DMatrix::from_fn(m, 6, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let phi = &a * a.adjoint();
    for reference in 0..m {
        let w = mwf_weights(&phi, &phi, reference, 1e-10);
        for i in 0..m {
            let e = if i == reference { 1.0 } else { 0.0 };
            assert!((w[i] - c(e, 0.0)).norm() < 1e-6, "{reference} {i}: {}", w[i]);
        }
    }
    let w = mwf_weights(&phi, &DMatrix::zeros(m, m), 0, 1e-3);
    assert!(w.iter().all(|v| v.norm() == 0.0));
    // rank-deficient covariance still yields finite weights thanks to loading
    let v = a.column(0).into_owned();
    let w = mwf_weights(&(&v * v.adjoint()), &(&v * v.adjoint()), 1, 1e-3);
    assert!(w.iter().all(|x| x.re.is_finite() && x.im.is_finite()));
}

fn anechoic(sources: Vec<[f64; 3]>, seed: u64) -> (Waveform<f64>, Vec<Waveform<f64>>) {
    let scene = RoomScene {
        sample_rate: FS,
        mics: (0..4)
            .map(|i| {
                let a = std::f64::consts::FRAC_PI_2 * i as f64;
                [0.1 * a.cos(), 0.1 * a.sin(), 1.5]
            })
            .collect(),
        t60: 0.0,
        tail_ratio: 0.0,
        snr_db: None,
        overlap: 1.0,
        sources,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dry: Vec<Vec<f64>> = (0..scene.sources.len()).map(|_| synth_source(16_000, FS, &mut rng)).collect();
    let ex = make_mixture(&scene, &dry, 16_000, seed).unwrap();
    (ex.mixture, ex.images)
}

/// Apply per-bin weights estimated on the mixture to another signal.
fn apply_like(x: &ComplexSpectrogram<f64>, est: &ComplexSpectrogram<f64>, part: &ComplexSpectrogram<f64>) -> Vec<f64> {
    let mut out = ComplexSpectrogram::zeros(1, x.config(), x.length(), x.sample_rate());
    for f in 0..x.bins() {
        let w = mwf_weights(&spatial_covariance(x, f), &spatial_covariance(est, f), 0, corrnet::css::MWF_LOADING);
        for t in 0..x.frames() {
            let v: Complex<f64> = (0..x.channels()).map(|m| w[m].conj() * part.get(m, t, f)).sum();
            out.set(0, t, f, v);
        }
    }
    istft(&out).unwrap().channel(0).to_vec()
}

#[test]
fn oracle_mwf_improves_sir() {
    let (mix, images) = anechoic(vec![[2.0, 0.0, 1.5], [0.0, 2.0, 1.6]], 1);
    let cfg = StftConfig::half_overlap(256).unwrap();
    let x = stft(&mix, cfg).unwrap();
    let s: Vec<_> = images.iter().map(|w| stft(w, cfg).unwrap()).collect();
    let out = mwf_beamformer(&x, &s, 0, corrnet::css::MWF_LOADING).unwrap();
    assert_eq!(out.len(), 2);
    for k in 0..2 {
        let own = apply_like(&x, &s[k], &s[k]);
        let other = apply_like(&x, &s[k], &s[1 - k]);
        let sir_in = db(energy(images[k].channel(0)), energy(images[1 - k].channel(0)));
        let sir_out = db(energy(&own), energy(&other));
        assert!(sir_out - sir_in >= 5.0, "source {k}: {sir_in:.2} -> {sir_out:.2}");
        // linearity: the beamformer output is the sum of its parts
        let total = istft(&out[k]).unwrap();
        let sum: Vec<f64> = own.iter().zip(&other).map(|(a, b)| a + b).collect();
        let err: Vec<f64> = total.channel(0).iter().zip(&sum).map(|(a, b)| a - b).collect();
        assert!(energy(&err) < 1e-20 * energy(&sum).max(1.0) + 1e-20);
    }
}

#[test]
fn single_source_mwf_does_not_distort() {
    let (mix, images) = anechoic(vec![[2.0, 0.5, 1.5]], 2);
    let cfg = StftConfig::half_overlap(256).unwrap();
    let x = stft(&mix, cfg).unwrap();
    let out = mwf_beamformer(&x, &[stft(&images[0], cfg).unwrap()], 0, corrnet::css::MWF_LOADING).unwrap();
    let y = istft(&out[0]).unwrap();
    let r = mix.channel(0);
    let err: Vec<f64> = y.channel(0).iter().zip(r).map(|(a, b)| a - b).collect();
    assert!(db(energy(y.channel(0)), energy(r)).abs() < 0.1);
    assert!(db(energy(r), energy(&err)) > 20.0);
}

#[test]
fn mwf_rejects_bad_inputs() {
    let (mix, images) = anechoic(vec![[2.0, 0.5, 1.5]], 2);
    let cfg = StftConfig::half_overlap(64).unwrap();
    let x = stft(&mix, cfg).unwrap();
    assert!(mwf_beamformer(&x, &[stft(&images[0], cfg).unwrap()], 4, 1e-3).is_err());
    assert!(mwf_beamformer(&x, &[stft(&images[0].select_channels(&[0]), cfg).unwrap()], 0, 1e-3).is_err());
}

fn micro(mics: usize, sources: usize, head_mode: HeadMode) -> ModelConfig {
    ModelConfig {
        sources,
        channels: 8,
        spec_channels: 2,
        spec_dim: 4,
        stages: 1,
        heads: 2,
        dconv_kernel: 3,
        head_mode,
        ..ModelConfig::desk(mics, 17)
    }
}

#[test]
fn network_separator_is_scale_equivariant() {
    let net = TfCorrNet::<f64>::new(micro(2, 2, HeadMode::Mimo), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = Waveform::new(2, FS, (0..1000).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
    let cfg = StftConfig::half_overlap(32).unwrap();
    let x = stft(&w, cfg).unwrap();
    let y = Separator::separate(&net, &x).unwrap();
    let y5 = Separator::separate(&net, &stft(&w.scaled(5.0), cfg).unwrap()).unwrap();
    for (a, b) in y.iter().zip(&y5) {
        for (p, q) in a.re.iter().zip(&b.re) {
            assert!((5.0 * p - q).abs() < 1e-9 * (1.0 + q.abs()));
        }
    }
}

#[test]
fn css_with_a_network_produces_full_length_streams() {
    let net = TfCorrNet::<f32>::new(micro(2, 2, HeadMode::Mimo), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = Waveform::new(2, FS, (0..2 * 5000).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
    let schedule = ChunkSchedule {
        history: 0.1,
        current: 0.2,
        future: 0.05,
    };
    let out = run_css(&net, &w, StftConfig::half_overlap(32).unwrap(), schedule).unwrap();
    let waves = out.waveforms().unwrap();
    assert_eq!(waves.len(), 2);
    assert!(waves.iter().all(|y| y.len() == 5000 && y.channels() == 2));
    assert_eq!(out.log.len(), 5000usize.div_ceil(1600));
}

#[test]
fn second_stage_wiring() {
    let first = TfCorrNet::<f64>::new(micro(2, 2, HeadMode::Mimo), 1).unwrap();
    let second = TfCorrNet::<f64>::new(micro(3, 1, HeadMode::Miso), 2).unwrap();
    assert!(TwoStage::new(&second, &first).is_err());
    assert!(TwoStage::new(&first, &TfCorrNet::<f64>::new(micro(3, 2, HeadMode::Miso), 2).unwrap()).is_err());
    let two = TwoStage::new(&first, &second).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = Waveform::new(2, FS, (0..1200).map(|_| rng.random_range(-0.3..0.3)).collect()).unwrap();
    let cfg = StftConfig::half_overlap(32).unwrap();
    let x = stft(&w, cfg).unwrap();
    let bf = two.beamform(&x).unwrap();
    let stacked = second_stage_input(&x, &bf[0]).unwrap();
    assert_eq!(stacked.channels(), 3);
    // (M + 1)(M + 2) correlation channels for the enhancement stage
    assert_eq!(flatten_features(&pairwise_correlations(&stacked)).z.shape()[0], 12);
    let y = Separator::separate(&two, &x).unwrap();
    assert_eq!(y.len(), 2);
    assert!(y.iter().all(|s| s.channels() == 1 && s.frames() == x.frames()));

    let targets: Vec<Waveform<f64>> = (0..2)
        .map(|_| Waveform::new(2, FS, (0..1200).map(|_| rng.random_range(-0.1..0.1)).collect()).unwrap())
        .collect();
    let ex = Example {
        mixture: w.clone(),
        targets,
    };
    let second_data = second_stage_examples(&first, &[ex], cfg, 0).unwrap();
    assert_eq!(second_data.len(), 2);
    for e in &second_data {
        assert_eq!(e.mixture.channels(), 3);
        assert_eq!(&e.mixture.data()[..1200], w.data());
        assert_eq!(e.targets.len(), 1);
        assert_eq!(e.targets[0].channels(), 1);
    }
}

