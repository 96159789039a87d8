//! WAV files, atomic writes and checksums.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};
use rirsolve::SignalBuffer;
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

/// Reads a mono WAV stored as 32-bit float or 16-bit PCM.
pub fn read_wav(path: &Path) -> CliResult<SignalBuffer> {
    let mut reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(e) => CliError::io(path, e),
        other => CliError::Config(format!("{}: {other}", path.display())),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CliError::Config(format!(
            "{}: expected a mono file, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Result<Vec<f64>, hound::Error> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Float, 32) => reader.samples::<f32>().map(|s| s.map(f64::from)).collect(),
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect(),
        (fmt, bits) => {
            return Err(CliError::Config(format!(
                "{}: unsupported sample format {fmt:?} with {bits} bits",
                path.display()
            )))
        }
    };
    let samples = samples.map_err(|e| CliError::io(path, e))?;
    SignalBuffer::new(samples, spec.sample_rate).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// 32-bit float mono WAV image of `x`.
pub fn wav_bytes(x: &SignalBuffer) -> CliResult<Vec<u8>> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: x.sample_rate(),
        bits_per_sample: 32,
        sample_format: SampleFormat::Float,
    };
    let mut buf = Cursor::new(Vec::new());
    let encode = |buf: &mut Cursor<Vec<u8>>| -> Result<(), hound::Error> {
        let mut w = WavWriter::new(buf, spec)?;
        for &v in x.samples() {
            w.write_sample(v as f32)?;
        }
        w.finalize()
    };
    encode(&mut buf).map_err(|e| CliError::Io(format!("encoding WAV: {e}")))?;
    Ok(buf.into_inner())
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let name = path
        .file_name()
        .ok_or_else(|| CliError::Io(format!("{}: not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Writes `x` as a float WAV and returns the file's SHA-256.
pub fn write_wav(path: &Path, x: &SignalBuffer) -> CliResult<String> {
    let bytes = wav_bytes(x)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(format!("encoding JSON: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}
