//! WAV file I/O (PCM-16 and IEEE float32, interleaved multi-channel).

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{invalid, Result};
use crate::stft::Waveform;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

impl std::str::FromStr for WavFormat {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pcm16" => Ok(Self::Pcm16),
            "f32" | "float32" => Ok(Self::Float32),
            _ => Err(invalid("wav", format!("unknown sample format {s:?}"))),
        }
    }
}

pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform<f64>> {
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<Result<_, _>>()?,
        (fmt, bits) => {
            return Err(invalid(
                "wav",
                format!("unsupported sample format {fmt:?}/{bits} bit"),
            ));
        }
    };
    let n = interleaved.len() / channels;
    let mut data = vec![0.0; interleaved.len()];
    for (i, v) in interleaved.into_iter().enumerate() {
        data[(i % channels) * n + i / channels] = v;
    }
    Waveform::new(channels, spec.sample_rate, data)
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform<f64>, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: w.channels() as u16,
        sample_rate: w.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = WavWriter::create(path, spec)?;
    for i in 0..w.len() {
        for c in 0..w.channels() {
            let v = w.channel(c)[i];
            match format {
                WavFormat::Pcm16 => {
                    writer.write_sample((v * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?
                }
                WavFormat::Float32 => writer.write_sample(v as f32)?,
            }
        }
    }
    writer.finalize()?;
    Ok(())
}
