//! On-disk formats: feature maps, checkpoints, and portable pixmaps.
//!
//! Feature maps (`JFAR`) and checkpoints (`JFCK`) are little-endian binary
//! containers with explicit magic and version fields; payloads are 32-bit
//! floats, so a write/read cycle is bitwise lossless for `f32` data. Images
//! use binary PPM (`P6`) and PGM (`P5`). Every writer stages into a
//! temporary file in the target directory and renames it into place, so a
//! failed write never leaves a partial file at the destination.

use std::error::Error;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::model::{JafarParams, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{FeatureMap, SaliencyMap, Tensor};
use crate::train::{ConfigError, RunConfig};
use crate::image::Image;

const FEATURE_MAGIC: &[u8; 4] = b"JFAR";
const CHECKPOINT_MAGIC: &[u8; 4] = b"JFCK";
const FORMAT_VERSION: u32 = 1;
/// Refuse payloads past this size; catches absurd headers before allocating.
const MAX_PAYLOAD_BYTES: u64 = 1 << 33;

// ───────────────────────── errors ─────────────────────────

#[derive(Debug)]
pub enum IoFormatError {
    Io { path: PathBuf, source: std::io::Error },
    BadMagic { expected: [u8; 4], got: [u8; 4] },
    UnsupportedVersion { got: u32 },
    TruncatedFile,
    HeaderPayloadMismatch { detail: String },
    MalformedHeader { detail: String },
    Config(ConfigError),
    Model(ModelError),
}

impl fmt::Display for IoFormatError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IoFormatError::Io { path, source } => {
                write!(f, "{}: {source}", path.display())
            }
            IoFormatError::BadMagic { expected, got } => write!(
                f,
                "bad magic: expected {:?}, got {:?}",
                String::from_utf8_lossy(expected),
                String::from_utf8_lossy(got)
            ),
            IoFormatError::UnsupportedVersion { got } => {
                write!(f, "unsupported format version {got}")
            }
            IoFormatError::TruncatedFile => write!(f, "file ends before its payload does"),
            IoFormatError::HeaderPayloadMismatch { detail } => {
                write!(f, "header does not match payload: {detail}")
            }
            IoFormatError::MalformedHeader { detail } => write!(f, "malformed header: {detail}"),
            IoFormatError::Config(e) => write!(f, "checkpoint config: {e}"),
            IoFormatError::Model(e) => write!(f, "checkpoint tensors: {e}"),
        }
    }
}

impl Error for IoFormatError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            IoFormatError::Io { source, .. } => Some(source),
            IoFormatError::Config(e) => Some(e),
            IoFormatError::Model(e) => Some(e),
            _ => None,
        }
    }
}

impl From<ConfigError> for IoFormatError {
    fn from(e: ConfigError) -> Self {
        IoFormatError::Config(e)
    }
}

impl From<ModelError> for IoFormatError {
    fn from(e: ModelError) -> Self {
        IoFormatError::Model(e)
    }
}

type IoResult<T> = Result<T, IoFormatError>;

// ───────────────────────── atomic writes ─────────────────────────

/// Writes bytes via a staged temporary file and an atomic rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> IoResult<()> {
    let err = |source| IoFormatError::Io { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(err(e));
    }
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(err(e));
    }
    Ok(())
}

fn read_file(path: &Path) -> IoResult<Vec<u8>> {
    fs::read(path).map_err(|source| IoFormatError::Io { path: path.to_path_buf(), source })
}

// ───────────────────────── byte cursor ─────────────────────────

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Cursor { data, pos: 0 }
    }

    fn take(&mut self, n: usize) -> IoResult<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(IoFormatError::TruncatedFile);
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> IoResult<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16_le(&mut self) -> IoResult<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self) -> IoResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn f32_slice(&mut self, count: usize) -> IoResult<Vec<f32>> {
        let b = self.take(count * 4)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }
}

fn check_header(cur: &mut Cursor<'_>, magic: &[u8; 4]) -> IoResult<()> {
    let got = cur.take(4)?;
    if got != magic {
        return Err(IoFormatError::BadMagic { expected: *magic, got: [got[0], got[1], got[2], got[3]] });
    }
    let version = cur.u32_le()?;
    if version != FORMAT_VERSION {
        return Err(IoFormatError::UnsupportedVersion { got: version });
    }
    Ok(())
}

fn push_f32<T: Scalar>(out: &mut Vec<u8>, values: &[T]) {
    for v in values {
        out.extend_from_slice(&v.to_stored().to_le_bytes());
    }
}

fn checked_numel(dims: &[u32]) -> IoResult<usize> {
    let mut n: u64 = 1;
    for &d in dims {
        if d == 0 {
            return Err(IoFormatError::HeaderPayloadMismatch {
                detail: "zero-sized dimension".into(),
            });
        }
        n = n.saturating_mul(d as u64);
    }
    if n.saturating_mul(4) > MAX_PAYLOAD_BYTES {
        return Err(IoFormatError::HeaderPayloadMismatch {
            detail: format!("payload of {n} elements is implausibly large"),
        });
    }
    Ok(n as usize)
}

// ───────────────────────── feature maps ─────────────────────────

/// Writes a feature map: magic, version, `c h w` (u32 LE), then f32 LE data.
pub fn write_feature_map<T: Scalar>(path: &Path, f: &FeatureMap<T>) -> IoResult<()> {
    if f.c == 0 || f.h == 0 || f.w == 0 {
        return Err(IoFormatError::HeaderPayloadMismatch {
            detail: format!("cannot serialize empty map {}x{}x{}", f.c, f.h, f.w),
        });
    }
    let mut out = Vec::with_capacity(16 + 4 * f.data().len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for dim in [f.c, f.h, f.w] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    push_f32(&mut out, f.data());
    atomic_write(path, &out)
}

/// Reads a feature map written by [`write_feature_map`].
pub fn read_feature_map<T: Scalar>(path: &Path) -> IoResult<FeatureMap<T>> {
    let bytes = read_file(path)?;
    let mut cur = Cursor::new(&bytes);
    check_header(&mut cur, FEATURE_MAGIC)?;
    let c = cur.u32_le()?;
    let h = cur.u32_le()?;
    let w = cur.u32_le()?;
    let numel = checked_numel(&[c, h, w])?;
    let data = cur.f32_slice(numel)?;
    if cur.remaining() != 0 {
        return Err(IoFormatError::HeaderPayloadMismatch {
            detail: format!("{} trailing bytes after payload", cur.remaining()),
        });
    }
    let data = data.into_iter().map(T::from_stored).collect();
    Ok(FeatureMap::from_vec(c as usize, h as usize, w as usize, data))
}

// ───────────────────────── checkpoints ─────────────────────────

/// Writes a checkpoint: header, length-prefixed config text, then each named
/// tensor (u16 name length, name, u8 rank, u32 dims, f32 data) in order.
pub fn write_checkpoint<T: Scalar>(
    path: &Path,
    config_text: &str,
    tensors: &[(String, &Tensor<T>)],
) -> IoResult<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let cfg = config_text.as_bytes();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, tensor) in tensors {
        let name_bytes = name.as_bytes();
        assert!(name_bytes.len() <= u16::MAX as usize, "tensor name too long");
        assert!(tensor.shape().len() <= u8::MAX as usize, "tensor rank too large");
        out.extend_from_slice(&(name_bytes.len() as u16).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.push(tensor.shape().len() as u8);
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        push_f32(&mut out, tensor.data());
    }
    atomic_write(path, &out)
}

/// Reads a checkpoint's raw contents: the config text and the named tensors
/// in stored order.
pub fn read_checkpoint(path: &Path) -> IoResult<(String, Vec<(String, Tensor<f32>)>)> {
    let bytes = read_file(path)?;
    let mut cur = Cursor::new(&bytes);
    check_header(&mut cur, CHECKPOINT_MAGIC)?;
    let cfg_len = cur.u32_le()? as usize;
    let cfg = String::from_utf8(cur.take(cfg_len)?.to_vec()).map_err(|e| {
        IoFormatError::MalformedHeader { detail: format!("config text is not UTF-8: {e}") }
    })?;
    let count = cur.u32_le()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16_le()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec()).map_err(|e| {
            IoFormatError::MalformedHeader { detail: format!("tensor name is not UTF-8: {e}") }
        })?;
        let rank = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(cur.u32_le()?);
        }
        let numel = checked_numel(&dims)?;
        let data = cur.f32_slice(numel)?;
        let shape: Vec<usize> = dims.iter().map(|&d| d as usize).collect();
        tensors.push((name, Tensor::from_vec(&shape, data)));
    }
    if cur.remaining() != 0 {
        return Err(IoFormatError::HeaderPayloadMismatch {
            detail: format!("{} trailing bytes after payload", cur.remaining()),
        });
    }
    Ok((cfg, tensors))
}

/// Serializes a run's configuration and parameters.
pub fn save_checkpoint(path: &Path, run: &RunConfig, params: &JafarParams<f32>) -> IoResult<()> {
    write_checkpoint(path, &run.to_text(), &params.named_tensors())
}

/// Loads and validates a checkpoint: parses the embedded config and checks
/// every tensor name and shape against it.
pub fn load_checkpoint(path: &Path) -> IoResult<(RunConfig, JafarParams<f32>)> {
    let (cfg_text, tensors) = read_checkpoint(path)?;
    let run = RunConfig::parse(&cfg_text)?;
    let params = JafarParams::from_named(run.model.clone(), tensors)?;
    Ok((run, params))
}

// ───────────────────────── portable pixmaps ─────────────────────────

fn quantize<T: Scalar>(v: T) -> u8 {
    (v.wide().clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a binary RGB pixmap (`P6`, max value 255).
pub fn write_ppm<T: Scalar>(path: &Path, img: &Image<T>) -> IoResult<()> {
    if img.h == 0 || img.w == 0 {
        return Err(IoFormatError::HeaderPayloadMismatch {
            detail: format!("cannot serialize empty image {}x{}", img.h, img.w),
        });
    }
    let mut out = format!("P6\n{} {}\n255\n", img.w, img.h).into_bytes();
    for y in 0..img.h {
        for x in 0..img.w {
            for c in 0..3 {
                out.push(quantize(img.at(c, y, x)));
            }
        }
    }
    atomic_write(path, &out)
}

/// Writes a binary grayscale pixmap (`P5`, max value 255).
pub fn write_pgm<T: Scalar>(path: &Path, map: &SaliencyMap<T>) -> IoResult<()> {
    if map.h == 0 || map.w == 0 {
        return Err(IoFormatError::HeaderPayloadMismatch {
            detail: format!("cannot serialize empty map {}x{}", map.h, map.w),
        });
    }
    let mut out = format!("P5\n{} {}\n255\n", map.w, map.h).into_bytes();
    out.extend(map.data().iter().map(|&v| quantize(v)));
    atomic_write(path, &out)
}

/// Reads whitespace/comment-separated decimal tokens from a pixmap header.
fn pnm_tokens(cur: &mut Cursor<'_>, count: usize) -> IoResult<Vec<usize>> {
    let mut tokens = Vec::with_capacity(count);
    let mut current: Option<usize> = None;
    while tokens.len() < count {
        let b = cur.u8().map_err(|_| IoFormatError::MalformedHeader {
            detail: "header ended before its size fields".into(),
        })?;
        match b {
            b'#' => {
                if let Some(v) = current.take() {
                    tokens.push(v);
                }
                while cur.u8().map_err(|_| IoFormatError::MalformedHeader {
                    detail: "unterminated comment".into(),
                })? != b'\n'
                {}
            }
            b'0'..=b'9' => {
                let d = (b - b'0') as usize;
                current = Some(current.map_or(d, |v| v * 10 + d));
            }
            b' ' | b'\t' | b'\r' | b'\n' => {
                if let Some(v) = current.take() {
                    tokens.push(v);
                }
            }
            other => {
                return Err(IoFormatError::MalformedHeader {
                    detail: format!("unexpected header byte 0x{other:02x}"),
                })
            }
        }
    }
    Ok(tokens)
}

fn read_pnm(path: &Path, magic: &[u8; 2], channels: usize) -> IoResult<(usize, usize, Vec<u8>)> {
    let bytes = read_file(path)?;
    let mut cur = Cursor::new(&bytes);
    let got = cur.take(2)?;
    if got != magic {
        return Err(IoFormatError::BadMagic {
            expected: [magic[0], magic[1], b' ', b' '],
            got: [got[0], got[1], b' ', b' '],
        });
    }
    let dims = pnm_tokens(&mut cur, 3)?;
    let (w, h, maxval) = (dims[0], dims[1], dims[2]);
    if maxval != 255 {
        return Err(IoFormatError::MalformedHeader {
            detail: format!("max value {maxval}; only 255 is supported"),
        });
    }
    if w == 0 || h == 0 {
        return Err(IoFormatError::HeaderPayloadMismatch { detail: "empty image".into() });
    }
    let payload = cur.take(channels * w * h)?.to_vec();
    if cur.remaining() != 0 {
        return Err(IoFormatError::HeaderPayloadMismatch {
            detail: format!("{} trailing bytes after pixels", cur.remaining()),
        });
    }
    Ok((w, h, payload))
}

/// Reads a binary RGB pixmap into unit-range values.
pub fn read_ppm<T: Scalar>(path: &Path) -> IoResult<Image<T>> {
    let (w, h, payload) = read_pnm(path, b"P6", 3)?;
    let mut img = Image::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let b = payload[(y * w + x) * 3 + c];
                img.set(c, y, x, T::lit(b as f64 / 255.0));
            }
        }
    }
    Ok(img)
}

/// Reads a binary grayscale pixmap into unit-range values.
pub fn read_pgm<T: Scalar>(path: &Path) -> IoResult<SaliencyMap<T>> {
    let (w, h, payload) = read_pnm(path, b"P5", 1)?;
    let data = payload.into_iter().map(|b| T::lit(b as f64 / 255.0)).collect();
    Ok(SaliencyMap::from_vec(h, w, data))
}
