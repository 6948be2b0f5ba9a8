use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::AudioClip;
use crate::error::{EatError, Result};

/// Reads 16-bit PCM or 32-bit float WAV. Only the first channel is kept.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let data_err = |e: hound::Error| EatError::Data(format!("{}: {e}", path.display()));
    let mut reader = WavReader::open(path).map_err(data_err)?;
    let spec = reader.spec();
    let channels = spec.channels.max(1) as usize;
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(data_err)?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .step_by(channels)
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(data_err)?,
        (fmt, bits) => {
            return Err(EatError::Data(format!(
                "{}: unsupported WAV sample format {fmt:?}/{bits} bit",
                path.display()
            )))
        }
    };
    AudioClip::new(samples, spec.sample_rate)
        .map_err(|e| EatError::Data(format!("{}: {e}", path.display())))
}

/// Writes a mono 16-bit PCM WAV, clipping to [-1, 1].
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let io_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => EatError::io(path, io),
        other => EatError::Data(format!("{}: {other}", path.display())),
    };
    let mut writer = WavWriter::create(path, spec).map_err(io_err)?;
    for &s in &clip.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v).map_err(io_err)?;
    }
    writer.finalize().map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pcm16_round_trip_and_first_channel() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let clip = AudioClip::new(vec![0.0, 0.5, -0.5, 0.25], 16_000).unwrap();
        write_wav(&p, &clip).unwrap();
        let back = read_wav(&p).unwrap();
        assert_eq!(back.sample_rate, 16_000);
        for (a, b) in back.samples.iter().zip(&clip.samples) {
            assert!((a - b).abs() < 1e-4);
        }

        let stereo = dir.path().join("s.wav");
        let spec = WavSpec {
            channels: 2,
            sample_rate: 8_000,
            bits_per_sample: 32,
            sample_format: SampleFormat::Float,
        };
        let mut w = WavWriter::create(&stereo, spec).unwrap();
        for (l, r) in [(0.1f32, 0.9f32), (0.2, 0.8), (0.3, 0.7)] {
            w.write_sample(l).unwrap();
            w.write_sample(r).unwrap();
        }
        w.finalize().unwrap();
        let back = read_wav(&stereo).unwrap();
        assert_eq!(back.samples.len(), 3);
        assert!((back.samples[2] - 0.3).abs() < 1e-7);
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let err = read_wav(Path::new("/nonexistent/x.wav")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
