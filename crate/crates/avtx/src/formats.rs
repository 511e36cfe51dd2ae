//! Tensor, video and WAV files.
//!
//! Tensor file (`.avtxt`), little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `AVTXTENS` |
//! | 4 | version, `u32` = 1 |
//! | 4 | rank `r`, `u32` |
//! | 8 r | extents, `u64` each |
//! | 1 | element width, 4 (f32) or 8 (f64) |
//! | 8 | element count `n`, `u64` |
//! | n x width | row-major elements |
//!
//! Video container (`.avtxv`), little-endian:
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `AVTXVIDE` |
//! | 4 | version, `u32` = 1 |
//! | 4 | width, `u32` |
//! | 4 | height, `u32` |
//! | 4 | frame count `n`, `u32` |
//! | 8 | fps numerator, `u64` |
//! | 8 | fps denominator, `u64` |
//! | n x h x w x 3 | RGB24 frames, row-major, channels interleaved |

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use avtx_core::audio::{Waveform, SAMPLE_RATE};
use avtx_core::video::{Rate, RawVideo};
use avtx_core::{Scalar, Tensor};

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};

pub const TENSOR_MAGIC: &[u8; 8] = b"AVTXTENS";
pub const VIDEO_MAGIC: &[u8; 8] = b"AVTXVIDE";
pub const FORMAT_VERSION: u32 = 1;

pub(crate) fn create(path: &Path) -> Result<Writer<BufWriter<File>>> {
    let f = File::create(path).map_err(Error::io(path))?;
    Ok(Writer::new(BufWriter::new(f), path))
}

pub(crate) fn open(path: &Path) -> Result<Reader<BufReader<File>>> {
    let f = File::open(path).map_err(Error::io(path))?;
    Ok(Reader::new(BufReader::new(f), path))
}

pub(crate) fn version<R: std::io::Read>(r: &mut Reader<R>) -> Result<()> {
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(r.corrupt(format!("unsupported version {v}, expected {FORMAT_VERSION}")));
    }
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = create(path)?;
    w.bytes(TENSOR_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.tensor(t)?;
    w.finish()?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut r = open(path)?;
    r.magic(TENSOR_MAGIC)?;
    version(&mut r)?;
    let t = r.tensor()?;
    r.end()?;
    Ok(t)
}

pub fn write_video(path: &Path, v: &RawVideo) -> Result<()> {
    let mut w = create(path)?;
    w.bytes(VIDEO_MAGIC)?;
    w.u32(FORMAT_VERSION)?;
    w.u32(v.width as u32)?;
    w.u32(v.height as u32)?;
    w.u32(v.frames() as u32)?;
    w.u64(v.fps.num)?;
    w.u64(v.fps.den)?;
    w.bytes(&v.pixels)?;
    w.finish()?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<RawVideo> {
    let mut r = open(path)?;
    r.magic(VIDEO_MAGIC)?;
    version(&mut r)?;
    let (width, height, frames) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let fps = Rate::new(r.u64()?, r.u64()?)?;
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(3 * frames))
        .filter(|&n| n > 0 && n < 1 << 34)
        .ok_or_else(|| r.corrupt(format!("implausible video size {width}x{height}x{frames}")))?;
    let pixels = r.bytes(n)?;
    r.end()?;
    Ok(RawVideo::new(width, height, fps, pixels)?)
}

/// Mono 16-bit PCM at 16 kHz, samples scaled to [-1, 1).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let wav = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = hound::WavReader::open(path).map_err(wav)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format(
            path,
            format!(
                "expected mono 16-bit PCM, got {} channel(s) of {}-bit {:?}",
                spec.channels, spec.bits_per_sample, spec.sample_format
            ),
        ));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as Scalar / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav)?;
    Ok(Waveform::new(samples, spec.sample_rate)?)
}

/// Writes mono 16-bit PCM at 16 kHz; samples are clipped to [-1, 1).
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let wav = |source| Error::Wav {
        path: path.to_path_buf(),
        source,
    };
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = hound::WavWriter::create(path, spec).map_err(wav)?;
    for &s in w.samples() {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.write_sample(v).map_err(wav)?;
    }
    out.finalize().map_err(wav)
}
