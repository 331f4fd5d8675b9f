//! 16-bit PCM WAV input and output.
//!
//! The pipeline is pinned to 16 kHz / 16-bit audio; anything else is rejected
//! instead of resampled.

use std::path::Path;

use anyhow::{bail, Context, Result};

pub const REQUIRED_SAMPLE_RATE: u32 = 16_000;

/// Reads a WAV file into per-channel f64 signals in [-1, 1).
pub fn read_wav(path: &Path) -> Result<(Vec<Vec<f64>>, u32)> {
    let mut reader = hound::WavReader::open(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        bail!(
            "{}: only 16-bit integer PCM is supported, found {:?} at {} bits",
            path.display(),
            spec.sample_format,
            spec.bits_per_sample
        );
    }
    let channels = spec.channels as usize;
    if channels == 0 {
        bail!("{}: zero channels", path.display());
    }
    let mut out = vec![Vec::with_capacity(reader.len() as usize / channels); channels];
    for (i, sample) in reader.samples::<i16>().enumerate() {
        let sample = sample.with_context(|| format!("corrupt sample in {}", path.display()))?;
        out[i % channels].push(f64::from(sample) / 32768.0);
    }
    Ok((out, spec.sample_rate))
}

/// Reads a session either from one multichannel WAV or from per-channel mono
/// WAVs; enforces the fixed sample rate, at least two channels, and equal
/// lengths.
pub fn read_session(multichannel: Option<&Path>, mono: &[std::path::PathBuf]) -> Result<Vec<Vec<f64>>> {
    let channels = match (multichannel, mono.is_empty()) {
        (Some(path), true) => {
            let (channels, rate) = read_wav(path)?;
            check_rate(path, rate)?;
            channels
        }
        (None, false) => {
            let mut channels = Vec::with_capacity(mono.len());
            for path in mono {
                let (mut parts, rate) = read_wav(path)?;
                check_rate(path, rate)?;
                if parts.len() != 1 {
                    bail!("{}: expected a mono file, found {} channels", path.display(), parts.len());
                }
                channels.push(parts.remove(0));
            }
            channels
        }
        (Some(_), false) => bail!("give either one multichannel WAV or --ch files, not both"),
        (None, true) => bail!("no input audio given"),
    };
    if channels.len() < 2 {
        bail!("need at least 2 channels, got {}", channels.len());
    }
    let len = channels[0].len();
    for (i, ch) in channels.iter().enumerate() {
        if ch.len() != len {
            bail!("channel {i} has {} samples, channel 0 has {len}", ch.len());
        }
    }
    Ok(channels)
}

fn check_rate(path: &Path, rate: u32) -> Result<()> {
    if rate != REQUIRED_SAMPLE_RATE {
        bail!(
            "{}: sample rate {rate} Hz, the pipeline requires {REQUIRED_SAMPLE_RATE} Hz",
            path.display()
        );
    }
    Ok(())
}

/// Writes channels interleaved as 16-bit PCM.
pub fn write_wav(path: &Path, channels: &[Vec<f64>], sample_rate: u32) -> Result<()> {
    if channels.is_empty() {
        bail!("cannot write a WAV with zero channels");
    }
    let len = channels[0].len();
    if channels.iter().any(|ch| ch.len() != len) {
        bail!("channel lengths differ");
    }
    let spec = hound::WavSpec {
        channels: channels.len() as u16,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .with_context(|| format!("cannot create {}", path.display()))?;
    for n in 0..len {
        for ch in channels {
            writer.write_sample(quantize(ch[n]))?;
        }
    }
    writer.finalize()?;
    Ok(())
}

pub fn write_wav_mono(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    write_wav(path, std::slice::from_ref(&samples.to_vec()), sample_rate)
}

fn quantize(v: f64) -> i16 {
    (v * 32768.0).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16
}
