//! Synthetic reverberant multi-speaker mixtures with direct-path targets.
//!
//! Room responses are a fractional-delay direct path plus an exponentially
//! decaying white tail; no image sources. Inter-microphone delays are exact,
//! which is what the correlation features consume.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::config::KvConfig;
use crate::error::{invalid, Result};
use crate::stft::Waveform;
use crate::training::Example;
use crate::wav::{read_wav, write_wav, WavFormat};

pub const SPEED_OF_SOUND: f64 = 343.0;
/// `ln(1000)`: amplitude decays by 60 dB over one T60.
pub const DECAY_60DB: f64 = 6.907_755_278_982_137;
pub const DIRECT_TAPS: usize = 32;
const QUANT: f64 = 32768.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomScene {
    pub sample_rate: u32,
    pub mics: Vec<[f64; 3]>,
    pub sources: Vec<[f64; 3]>,
    /// Decay time of the tail in seconds; 0 gives a pure direct path.
    pub t60: f64,
    /// Tail energy relative to direct-path energy.
    pub tail_ratio: f64,
    /// `None` means noiseless.
    pub snr_db: Option<f64>,
    /// Fraction of the mixture during which two sources are active.
    pub overlap: f64,
}

impl RoomScene {
    pub fn distance(&self, k: usize, m: usize) -> f64 {
        let (a, b) = (self.sources[k], self.mics[m]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mics.is_empty() || self.sources.is_empty() {
            return Err(invalid("scene", "needs at least one mic and one source"));
        }
        for k in 0..self.sources.len() {
            for m in 0..self.mics.len() {
                if self.distance(k, m) < 1e-3 {
                    return Err(invalid("scene", format!("source {k} coincides with mic {m}")));
                }
            }
        }
        if !(0.0..=1.0).contains(&self.overlap) || self.t60 < 0.0 || self.tail_ratio < 0.0 {
            return Err(invalid("scene", "overlap, t60 or tail_ratio out of range"));
        }
        Ok(())
    }
}

/// Room response split into its direct path and reverberant tail.
#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    /// `DIRECT_TAPS` windowed-sinc taps starting at sample `direct_start`.
    pub direct: Vec<f64>,
    pub direct_start: usize,
    /// Tail samples starting at `tail_start`, after the direct taps end.
    pub tail: Vec<f64>,
    pub tail_start: usize,
    /// Fractional delay of the direct path in samples.
    pub delay: f64,
}

impl Rir {
    /// Dense response `direct + tail`.
    pub fn full(&self) -> Vec<f64> {
        let mut h = vec![0.0; (self.tail_start + self.tail.len()).max(self.direct_start + self.direct.len())];
        for (i, &v) in self.direct.iter().enumerate() {
            h[self.direct_start + i] += v;
        }
        for (i, &v) in self.tail.iter().enumerate() {
            h[self.tail_start + i] += v;
        }
        h
    }
}

/// Fractional delay `d` as `DIRECT_TAPS` Hann-windowed sinc taps; returns (taps, first index).
pub fn fractional_delay(d: f64) -> (Vec<f64>, usize) {
    let half = DIRECT_TAPS as isize / 2;
    let start = (d.floor() as isize - half + 1).max(0);
    let taps = (0..DIRECT_TAPS)
        .map(|i| {
            let n = (start + i as isize) as f64;
            let x = n - d;
            let sinc = if x.abs() < 1e-12 { 1.0 } else { (PI * x).sin() / (PI * x) };
            // window centred on the true delay, zero at ±half
            let w = if x.abs() < half as f64 { 0.5 + 0.5 * (PI * x / half as f64).cos() } else { 0.0 };
            sinc * w
        })
        .collect();
    (taps, start as usize)
}

/// Response from source `k` to mic `m`: `1/r` direct path at delay `r/c`,
/// then white noise under `exp(−ln(1000)·t/T60)` scaled to `tail_ratio`.
pub fn synth_rir(scene: &RoomScene, k: usize, m: usize, rng: &mut impl Rng) -> Rir {
    let fs = scene.sample_rate as f64;
    let r = scene.distance(k, m);
    let delay = r / SPEED_OF_SOUND * fs;
    let (mut direct, direct_start) = fractional_delay(delay);
    for v in &mut direct {
        *v /= r;
    }
    let tail_start = direct_start + DIRECT_TAPS;
    let len = (scene.t60 * fs).ceil() as usize;
    let mut tail: Vec<f64> = (0..len)
        .map(|i| {
            let n: f64 = rng.sample(StandardNormal);
            n * (-DECAY_60DB * i as f64 / (scene.t60 * fs)).exp()
        })
        .collect();
    let e_tail: f64 = tail.iter().map(|v| v * v).sum();
    if e_tail > 0.0 {
        let e_direct: f64 = direct.iter().map(|v| v * v).sum();
        let g = (scene.tail_ratio * e_direct / e_tail).sqrt();
        for v in &mut tail {
            *v *= g;
        }
    }
    Rir {
        direct,
        direct_start,
        tail,
        tail_start,
        delay,
    }
}

/// Full linear convolution via FFT.
pub fn fft_convolve(a: &[f64], b: &[f64]) -> Vec<f64> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let n = a.len() + b.len() - 1;
    let size = n.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let (fwd, inv) = (planner.plan_fft_forward(size), planner.plan_fft_inverse(size));
    let pad = |x: &[f64]| {
        let mut v: Vec<Complex<f64>> = x.iter().map(|&r| Complex::new(r, 0.0)).collect();
        v.resize(size, Complex::default());
        v
    };
    let (mut fa, mut fb) = (pad(a), pad(b));
    fwd.process(&mut fa);
    fwd.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x *= y;
    }
    inv.process(&mut fa);
    fa.truncate(n);
    fa.into_iter().map(|c| c.re / size as f64).collect()
}

/// `x * h` where `h` is `taps` starting at `offset`, truncated to `len` samples.
fn sparse_convolve(x: &[f64], taps: &[f64], offset: usize, len: usize) -> Vec<f64> {
    let mut y = vec![0.0; len];
    for (i, &h) in taps.iter().enumerate() {
        let shift = offset + i;
        if shift >= len {
            break;
        }
        for (yo, &xi) in y[shift..].iter_mut().zip(x) {
            *yo += h * xi;
        }
    }
    y
}

/// Speech-like test signal: a gliding harmonic tone under a syllable-rate
/// envelope, with pauses.
pub fn synth_source(len: usize, sample_rate: u32, rng: &mut impl Rng) -> Vec<f64> {
    let fs = sample_rate as f64;
    let f0 = rng.random_range(90.0..260.0);
    let vib_rate = rng.random_range(0.5..3.0);
    let vib_depth = rng.random_range(0.02..0.12);
    let syl = rng.random_range(2.5..6.0);
    let formants: Vec<(f64, f64)> = (0..3)
        .map(|i| {
            let centre = [rng.random_range(300.0..900.0), rng.random_range(900.0..2200.0), rng.random_range(2200.0..3400.0)][i];
            (centre, rng.random_range(80.0..250.0))
        })
        .collect();
    let harmonics = ((fs / 2.0 * 0.9) / (f0 * (1.0 + vib_depth))).floor().max(1.0) as usize;
    let amps: Vec<f64> = (1..=harmonics)
        .map(|h| {
            let f = h as f64 * f0;
            let env: f64 = formants.iter().map(|&(c, bw)| (-((f - c) / bw).powi(2)).exp()).sum();
            (0.15 + env) / (h as f64).sqrt()
        })
        .collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let syl_phase = rng.random_range(0.0..2.0 * PI);
    let mut phase = 0.0;
    let mut out = Vec::with_capacity(len);
    for n in 0..len {
        let t = n as f64 / fs;
        let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
        phase += 2.0 * PI * f / fs;
        let s: f64 = amps
            .iter()
            .zip(&phases)
            .enumerate()
            .map(|(h, (&a, &p))| a * ((h + 1) as f64 * phase + p).sin())
            .sum();
        let env = (0.5 - 0.5 * (2.0 * PI * syl * t + syl_phase).cos()).powf(1.5);
        out.push(s * env);
    }
    let rms = (out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64).sqrt();
    if rms > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.1 / rms);
    }
    out
}

/// Sample start offsets and active length of `k` utterances in `len` samples
/// so that the two-talker portion is `overlap · len` for two sources.
pub fn placement(len: usize, k: usize, overlap: f64) -> (Vec<usize>, usize) {
    if k == 1 {
        return (vec![0], len);
    }
    let active = ((len as f64 * (1.0 + overlap) / 2.0).round() as usize).min(len);
    let step = (len - active) as f64 / (k - 1) as f64;
    ((0..k).map(|i| (i as f64 * step).round() as usize).collect(), active)
}

/// Generated example. All signals lie on the 16-bit grid, so the mixture is
/// exactly `Σ images + noise` and survives PCM-16 storage.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureExample {
    pub mixture: Waveform<f64>,
    /// Direct-path images, `M` channels per source.
    pub targets: Vec<Waveform<f64>>,
    /// Reverberant images, `M` channels per source.
    pub images: Vec<Waveform<f64>>,
    pub noise: Waveform<f64>,
    pub scene: RoomScene,
    pub seed: u64,
}

impl MixtureExample {
    pub fn to_example(&self) -> Example {
        Example {
            mixture: self.mixture.clone(),
            targets: self.targets.clone(),
        }
    }
}

fn quantize(x: f64) -> f64 {
    (x * QUANT).round() / QUANT
}

/// Colored noise: white Gaussian through a random one-pole low-pass, per mic.
fn colored_noise(mics: usize, len: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..mics)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..0.9);
            let mut prev = 0.0;
            (0..len)
                .map(|_| {
                    let w: f64 = rng.sample(StandardNormal);
                    prev = a * prev + (1.0 - a) * w;
                    prev
                })
                .collect()
        })
        .collect()
}

/// Convolve `dry` sources with the scene's responses, place them with the
/// configured overlap, and add noise at the scene SNR.
pub fn make_mixture(scene: &RoomScene, dry: &[Vec<f64>], len: usize, seed: u64) -> Result<MixtureExample> {
    scene.validate()?;
    let (k, m) = (scene.sources.len(), scene.mics.len());
    if dry.len() != k {
        return Err(invalid("make_mixture", format!("{} dry sources for {k} positions", dry.len())));
    }
    let (starts, active) = placement(len, k, scene.overlap);
    if let Some(i) = dry.iter().position(|d| d.len() < active) {
        return Err(invalid(
            "make_mixture",
            format!("source {i} has {} samples, placement needs {active}", dry[i].len()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut targets = vec![vec![vec![0.0; len]; m]; k];
    let mut images = vec![vec![vec![0.0; len]; m]; k];
    for s in 0..k {
        let mut placed = vec![0.0; len];
        placed[starts[s]..starts[s] + active].copy_from_slice(&dry[s][..active]);
        for c in 0..m {
            let rir = synth_rir(scene, s, c, &mut rng);
            let direct = sparse_convolve(&placed, &rir.direct, rir.direct_start, len);
            let mut image = direct.clone();
            if !rir.tail.is_empty() {
                let tail = fft_convolve(&placed, &rir.tail);
                for (i, v) in image.iter_mut().enumerate().skip(rir.tail_start) {
                    *v += tail[i - rir.tail_start];
                }
            }
            targets[s][c] = direct;
            images[s][c] = image;
        }
    }
    let mut noise = vec![vec![0.0; len]; m];
    if let Some(snr) = scene.snr_db {
        let raw = colored_noise(m, len, &mut rng);
        let e_sig: f64 = images.iter().flatten().flatten().map(|v| v * v).sum();
        let e_noise: f64 = raw.iter().flatten().map(|v| v * v).sum();
        let g = if e_noise > 0.0 { (e_sig / e_noise / 10f64.powf(snr / 10.0)).sqrt() } else { 0.0 };
        noise = raw.into_iter().map(|ch| ch.into_iter().map(|v| v * g).collect()).collect();
    }

    // common gain so the mixture peaks near -6 dBFS, then snap to the 16-bit grid
    let peak = (0..m)
        .flat_map(|c| {
            let (images, noise) = (&images, &noise);
            (0..len).map(move |i| (images.iter().map(|im| im[c][i]).sum::<f64>() + noise[c][i]).abs())
        })
        .fold(0.0, f64::max);
    let gain = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    let snap = |x: &mut Vec<Vec<f64>>| x.iter_mut().flatten().for_each(|v| *v = quantize(*v * gain));
    targets.iter_mut().for_each(snap);
    images.iter_mut().for_each(snap);
    snap(&mut noise);

    let mut mix = noise.clone();
    for im in &images {
        for (mc, ic) in mix.iter_mut().zip(im) {
            for (a, b) in mc.iter_mut().zip(ic) {
                *a += b;
            }
        }
    }
    let fs = scene.sample_rate;
    let wave = |chans: &[Vec<f64>]| Waveform::from_channels(fs, chans);
    Ok(MixtureExample {
        mixture: wave(&mix)?,
        targets: targets.iter().map(|t| wave(t)).collect::<Result<_>>()?,
        images: images.iter().map(|t| wave(t)).collect::<Result<_>>()?,
        noise: wave(&noise)?,
        scene: scene.clone(),
        seed,
    })
}

/// Ranges from which scenes are drawn. Keys in the text form match field names.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub sample_rate: u32,
    pub mics: usize,
    pub sources: usize,
    /// Array radius (circular, or half the spacing of a two-mic pair) in meters.
    pub array_radius: f64,
    pub duration: f64,
    pub t60_min: f64,
    pub t60_max: f64,
    pub tail_ratio: f64,
    pub snr_min: f64,
    pub snr_max: f64,
    pub overlap_min: f64,
    pub overlap_max: f64,
    pub distance_min: f64,
    pub distance_max: f64,
    /// Minimum azimuth separation between sources, degrees.
    pub min_separation_deg: f64,
}

impl SceneConfig {
    pub fn desk() -> Self {
        Self {
            sample_rate: 8000,
            mics: 2,
            sources: 2,
            array_radius: 0.05,
            duration: 2.4,
            t60_min: 0.2,
            t60_max: 0.6,
            tail_ratio: 0.25,
            snr_min: 0.0,
            snr_max: 20.0,
            overlap_min: 0.0,
            overlap_max: 1.0,
            distance_min: 1.0,
            distance_max: 2.5,
            min_separation_deg: 20.0,
        }
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::desk();
        Ok(Self {
            sample_rate: kv.get_or("sample_rate", d.sample_rate)?,
            mics: kv.get_or("mics", d.mics)?,
            sources: kv.get_or("sources", d.sources)?,
            array_radius: kv.get_or("array_radius", d.array_radius)?,
            duration: kv.get_or("duration", d.duration)?,
            t60_min: kv.get_or("t60_min", d.t60_min)?,
            t60_max: kv.get_or("t60_max", d.t60_max)?,
            tail_ratio: kv.get_or("tail_ratio", d.tail_ratio)?,
            snr_min: kv.get_or("snr_min", d.snr_min)?,
            snr_max: kv.get_or("snr_max", d.snr_max)?,
            overlap_min: kv.get_or("overlap_min", d.overlap_min)?,
            overlap_max: kv.get_or("overlap_max", d.overlap_max)?,
            distance_min: kv.get_or("distance_min", d.distance_min)?,
            distance_max: kv.get_or("distance_max", d.distance_max)?,
            min_separation_deg: kv.get_or("min_separation_deg", d.min_separation_deg)?,
        })
    }

    pub fn samples(&self) -> usize {
        (self.duration * self.sample_rate as f64).round() as usize
    }

    /// Mic positions on a horizontal circle at 1.5 m height (a line pair for two mics).
    pub fn array(&self) -> Vec<[f64; 3]> {
        (0..self.mics)
            .map(|i| {
                let a = 2.0 * PI * i as f64 / self.mics as f64;
                [self.array_radius * a.cos(), self.array_radius * a.sin(), 1.5]
            })
            .collect()
    }

    pub fn sample_scene(&self, rng: &mut impl Rng) -> RoomScene {
        let mut azimuths: Vec<f64> = Vec::with_capacity(self.sources);
        let sep = self.min_separation_deg.to_radians();
        while azimuths.len() < self.sources {
            let a = rng.random_range(0.0..2.0 * PI);
            let ok = azimuths.iter().all(|&b| {
                let d = (a - b).rem_euclid(2.0 * PI);
                d.min(2.0 * PI - d) >= sep
            });
            if ok || azimuths.len() as f64 * sep >= PI {
                azimuths.push(a);
            }
        }
        let sources = azimuths
            .iter()
            .map(|&a| {
                let r = rng.random_range(self.distance_min..=self.distance_max);
                [r * a.cos(), r * a.sin(), rng.random_range(1.2..1.9)]
            })
            .collect();
        let snr = rng.random_range(self.snr_min..=self.snr_max);
        RoomScene {
            sample_rate: self.sample_rate,
            mics: self.array(),
            sources,
            t60: rng.random_range(self.t60_min..=self.t60_max),
            tail_ratio: self.tail_ratio,
            snr_db: snr.is_finite().then_some(snr),
            overlap: rng.random_range(self.overlap_min..=self.overlap_max),
        }
    }

    /// Example `index` of a set seeded by `seed`; independent of other indices.
    pub fn generate(&self, seed: u64, index: u64) -> Result<MixtureExample> {
        let ex_seed = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index);
        let mut rng = ChaCha8Rng::seed_from_u64(ex_seed);
        let scene = self.sample_scene(&mut rng);
        let len = self.samples();
        let dry: Vec<Vec<f64>> = (0..self.sources).map(|_| synth_source(len, self.sample_rate, &mut rng)).collect();
        make_mixture(&scene, &dry, len, rng.random())
            .map(|ex| MixtureExample { seed: ex_seed, ..ex })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mixture: PathBuf,
    pub targets: Vec<PathBuf>,
    pub images: Vec<PathBuf>,
    pub noise: PathBuf,
    pub duration: f64,
    pub sample_rate: u32,
    pub mics: usize,
    pub sources: usize,
    pub t60: f64,
    pub snr_db: Option<f64>,
    pub overlap: f64,
    pub seed: u64,
}

impl ManifestRecord {
    /// Load mixture and targets; relative paths resolve against `root`.
    pub fn load(&self, root: &Path) -> Result<Example> {
        let p = |q: &Path| if q.is_absolute() { q.to_path_buf() } else { root.join(q) };
        Ok(Example {
            mixture: read_wav(p(&self.mixture))?,
            targets: self.targets.iter().map(|t| read_wav(p(t))).collect::<Result<_>>()?,
        })
    }
}

pub const SCENE_FILE: &str = "scene.json";
pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
struct StoredScene {
    scene: RoomScene,
    seed: u64,
}

/// Write one example as PCM-16 WAVs plus its scene under `dir/id`.
pub fn write_example(dir: &Path, id: &str, ex: &MixtureExample) -> Result<()> {
    let d = dir.join(id);
    fs::create_dir_all(&d)?;
    write_wav(d.join("mixture.wav"), &ex.mixture, WavFormat::Pcm16)?;
    for (k, (t, im)) in ex.targets.iter().zip(&ex.images).enumerate() {
        write_wav(d.join(format!("target{k}.wav")), t, WavFormat::Pcm16)?;
        write_wav(d.join(format!("image{k}.wav")), im, WavFormat::Pcm16)?;
    }
    write_wav(d.join("noise.wav"), &ex.noise, WavFormat::Pcm16)?;
    let stored = StoredScene {
        scene: ex.scene.clone(),
        seed: ex.seed,
    };
    fs::write(d.join(SCENE_FILE), serde_json::to_string_pretty(&stored)?)?;
    Ok(())
}

/// Scan `dir` for example subdirectories and write `dir/manifest.jsonl`
/// (sorted by id, paths relative to `dir`).
pub fn build_manifest(dir: &Path) -> Result<Vec<ManifestRecord>> {
    let mut ids: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().join(SCENE_FILE).is_file())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    let mut records = Vec::with_capacity(ids.len());
    for id in ids {
        let stored: StoredScene = serde_json::from_str(&fs::read_to_string(dir.join(&id).join(SCENE_FILE))?)?;
        let s = &stored.scene;
        let rel = |f: String| PathBuf::from(&id).join(f);
        let mixture = read_wav(dir.join(&id).join("mixture.wav"))?;
        records.push(ManifestRecord {
            mixture: rel("mixture.wav".into()),
            targets: (0..s.sources.len()).map(|k| rel(format!("target{k}.wav"))).collect(),
            images: (0..s.sources.len()).map(|k| rel(format!("image{k}.wav"))).collect(),
            noise: rel("noise.wav".into()),
            duration: mixture.duration(),
            sample_rate: s.sample_rate,
            mics: s.mics.len(),
            sources: s.sources.len(),
            t60: s.t60,
            snr_db: s.snr_db,
            overlap: s.overlap,
            seed: stored.seed,
            id,
        });
    }
    let text: String = records
        .iter()
        .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
        .collect::<Result<_, _>>()?;
    fs::write(dir.join(MANIFEST_FILE), text)?;
    Ok(records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Into::into))
        .collect()
}

/// Generate `count` examples into `dir` and index them.
pub fn generate_dataset(dir: &Path, cfg: &SceneConfig, count: usize, seed: u64) -> Result<Vec<ManifestRecord>> {
    fs::create_dir_all(dir)?;
    for i in 0..count {
        let ex = cfg.generate(seed, i as u64)?;
        write_example(dir, &format!("ex{i:05}"), &ex)?;
    }
    build_manifest(dir)
}
