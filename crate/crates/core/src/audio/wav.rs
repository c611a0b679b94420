use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::SignalBuffer;
use crate::error::{Error, Result};

fn map_hound(e: hound::Error) -> Error {
    match e {
        hound::Error::Unsupported => Error::UnsupportedCodec("format tag is not PCM or IEEE float".into()),
        hound::Error::FormatError(msg) => Error::MalformedWav(msg.to_string()),
        hound::Error::IoError(io) => Error::MalformedWav(io.to_string()),
        other => Error::MalformedWav(other.to_string()),
    }
}

/// Reads a PCM (8/16/24/32-bit int) or 32-bit float WAV file as normalized
/// mono. Multichannel audio is averaged across channels.
pub fn load_wav(path: &Path) -> Result<SignalBuffer> {
    if !path.is_file() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = WavReader::open(path).map_err(map_hound)?;
    let spec = reader.spec();
    let interleaved: Vec<f32> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().collect::<std::result::Result<_, _>>().map_err(map_hound)?,
        (SampleFormat::Int, bits @ (8 | 16 | 24 | 32)) => {
            let scale = 1.0 / (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| (v as f64 * scale) as f32))
                .collect::<std::result::Result<_, _>>()
                .map_err(map_hound)?
        }
        (fmt, bits) => return Err(Error::UnsupportedCodec(format!("{bits}-bit {fmt:?} samples"))),
    };
    let channels = spec.channels.max(1) as usize;
    let mono = if channels == 1 {
        interleaved
    } else {
        interleaved
            .chunks_exact(channels)
            .map(|frame| frame.iter().sum::<f32>() / channels as f32)
            .collect()
    };
    SignalBuffer::new(mono, spec.sample_rate)
}

/// Writes 16-bit PCM mono. Samples are scaled by 32768 and clamped, so a
/// round trip through [`load_wav`] is exact to within 1/32768.
pub fn write_wav(path: &Path, sig: &SignalBuffer) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: sig.sample_rate(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec).map_err(map_hound)?;
    for &v in sig.samples() {
        let q = (v as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(map_hound)?;
    }
    w.finalize().map_err(map_hound)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_raw(path: &Path, spec: WavSpec, samples: &[i32]) {
        let mut w = WavWriter::create(path, spec).unwrap();
        for &s in samples {
            match spec.bits_per_sample {
                8 => w.write_sample(s as i8).unwrap(),
                16 => w.write_sample(s as i16).unwrap(),
                _ => w.write_sample(s).unwrap(),
            }
        }
        w.finalize().unwrap();
    }

    fn spec(channels: u16, bits: u16) -> WavSpec {
        WavSpec { channels, sample_rate: 16_000, bits_per_sample: bits, sample_format: SampleFormat::Int }
    }

    #[test]
    fn int16_full_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, spec(1, 16), &[32767, -32768, 0]);
        let s = load_wav(&p).unwrap();
        assert!((s.samples()[0] - 0.99997).abs() < 1e-5);
        assert_eq!(s.samples()[1], -1.0);
        assert_eq!(s.sample_rate(), 16_000);
    }

    #[test]
    fn other_bit_depths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        write_raw(&p, spec(1, 8), &[64, -128]);
        assert_eq!(load_wav(&p).unwrap().samples(), &[0.5, -1.0]);
        write_raw(&p, spec(1, 24), &[4_194_304]);
        assert_eq!(load_wav(&p).unwrap().samples(), &[0.5]);

        let fspec = WavSpec { channels: 1, sample_rate: 8000, bits_per_sample: 32, sample_format: SampleFormat::Float };
        let mut w = WavWriter::create(&p, fspec).unwrap();
        w.write_sample(0.25f32).unwrap();
        w.finalize().unwrap();
        let s = load_wav(&p).unwrap();
        assert_eq!((s.samples(), s.sample_rate()), (&[0.25f32][..], 8000));
    }

    #[test]
    fn stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, spec(2, 16), &[16384, -16384, 16384, 16384]);
        assert_eq!(load_wav(&p).unwrap().samples(), &[0.0, 0.5]);
    }

    #[test]
    fn sine_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sine.wav");
        let src: Vec<f32> = (0..16_000)
            .map(|i| (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16_000.0).sin() as f32)
            .collect();
        write_wav(&p, &SignalBuffer::new(src.clone(), 16_000).unwrap()).unwrap();
        let back = load_wav(&p).unwrap();
        assert_eq!(back.len(), src.len());
        for (a, b) in src.iter().zip(back.samples()) {
            assert!((a - b).abs() <= 1.0 / 32768.0);
        }
    }

    #[test]
    fn error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.wav");
        assert!(matches!(load_wav(&missing), Err(Error::MissingFile(_))));

        let junk = dir.path().join("junk.wav");
        std::fs::write(&junk, b"this is not a riff file at all").unwrap();
        assert!(matches!(load_wav(&junk), Err(Error::MalformedWav(_))));

        // RIFF/WAVE with a format tag of 2 (ADPCM)
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&(36u32 + 4).to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&16_000u32.to_le_bytes());
        bytes.extend_from_slice(&32_000u32.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let adpcm = dir.path().join("adpcm.wav");
        std::fs::write(&adpcm, bytes).unwrap();
        assert!(matches!(load_wav(&adpcm), Err(Error::UnsupportedCodec(_))));
    }
}
