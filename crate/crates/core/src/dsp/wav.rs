use std::io::{Seek, Write};
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::stft::Waveform;
use crate::error::{Error, Result};

/// Reads a mono WAV file stored as 16-bit PCM or 32-bit float.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Data(format!(
            "{}: expected mono audio, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Data(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("{}: non-finite sample at {i}", path.display())));
    }
    Ok(Waveform::new(samples, spec.sample_rate))
}

fn float_spec(sample_rate: u32) -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    }
}

/// Writes a mono 32-bit float WAV file.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let mut writer = WavWriter::create(path, float_spec(w.sample_rate))?;
    for s in &w.samples {
        writer.write_sample(*s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Writes a mono 32-bit float WAV stream into any seekable sink.
pub fn write_wav_to<W: Write + Seek>(sink: W, w: &Waveform) -> Result<()> {
    let mut writer = WavWriter::new(sink, float_spec(w.sample_rate))?;
    for s in &w.samples {
        writer.write_sample(*s as f32)?;
    }
    writer.finalize()?;
    Ok(())
}

/// Encodes a waveform as an in-memory 32-bit float WAV file.
pub fn wav_bytes(w: &Waveform) -> Result<Vec<u8>> {
    let mut cursor = std::io::Cursor::new(Vec::new());
    write_wav_to(&mut cursor, w)?;
    Ok(cursor.into_inner())
}

/// Writes a mono 16-bit PCM WAV file; samples are clipped to [-1, 1).
pub fn write_wav_pcm16(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec)?;
    for s in &w.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
