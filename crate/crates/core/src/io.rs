//! Binary artifact formats.
//!
//! Every file starts with a 4-byte magic and a little-endian `u16`
//! version, so the first six bytes identify the artifact. All integers are
//! little-endian. Every file ends with a CRC-32 of all preceding bytes.
//!
//! | magic  | contents |
//! |--------|----------|
//! | `DVFE` | features: rows `u32`, cols `u32`, row-major `f32` |
//! | `DVPO` | posteriors: same layout, rows sum to 1 within 1e-3 |
//! | `DVST` | statistics: mixtures `u32`, dim `u32`, background id, then per mixture `N`, `F[D]`, `S[D]` as `f64` |
//! | `DVIV` | i-vector archive: count `u32`, then id, normalized flag, dim `u32`, `f64` values |
//! | `DVMD` | model container: kind tag `u8`, then a kind-specific `f64` payload |
//!
//! Readers parse the body using the declared sizes, then require exactly
//! the 4-byte checksum to follow. Every failure carries the byte offset
//! where parsing stopped.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::aligner::{Layer, MlpModel};
use crate::features::{FeatureKind, FeatureSequence};
use crate::gmm::{DiagGmm, VarianceFloor};
use crate::hmm::{AlignmentMatrix, AlignmentSource, HmmSet, HmmState};
use crate::ivector::{IVector, TvModel};
use crate::map::SpeakerModel;
use crate::pgmm::{Background, Pgmm, SuffStats};
use crate::plda::PldaBackend;
use crate::NUM_STATES;

pub const FORMAT_VERSION: u16 = 1;
/// Largest tolerated deviation of a posterior row sum from 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-3;

const HEADER_LEN: usize = 6;
const CRC_LEN: usize = 4;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("file truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { expected: String, found: String },
    #[error("unsupported version {version} at byte 4")]
    UnsupportedVersion { version: u16 },
    #[error("checksum mismatch at byte {offset}")]
    ChecksumMismatch { offset: usize },
    #[error("non-finite value at byte {offset}")]
    NonFinite { offset: usize },
    #[error("{extra} unexpected bytes after byte {offset}")]
    TrailingBytes { offset: usize, extra: usize },
    #[error("posterior row {row} at byte {offset} sums to {sum}")]
    RowNotNormalized { row: usize, offset: usize, sum: f64 },
    #[error("posteriors have {found} columns, expected {expected}")]
    WrongStateCount { found: usize, expected: usize },
    #[error("unknown model kind {tag} at byte {offset}")]
    UnknownModelKind { tag: u8, offset: usize },
    #[error("expected a {expected} model, found {found}")]
    WrongModelKind { expected: &'static str, found: &'static str },
    #[error("invalid content ending at byte {offset}: {message}")]
    Invalid { offset: usize, message: String },
}

impl IoError {
    /// Byte position a decoding error refers to, if it has one.
    pub fn offset(&self) -> Option<usize> {
        match self {
            IoError::BadMagic { .. } => Some(0),
            IoError::UnsupportedVersion { .. } => Some(4),
            IoError::Truncated { offset }
            | IoError::ChecksumMismatch { offset }
            | IoError::NonFinite { offset }
            | IoError::TrailingBytes { offset, .. }
            | IoError::RowNotNormalized { offset, .. }
            | IoError::UnknownModelKind { offset, .. }
            | IoError::Invalid { offset, .. } => Some(*offset),
            IoError::File { .. } | IoError::WrongStateCount { .. } | IoError::WrongModelKind { .. } => None,
        }
    }
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

fn read_file(path: &Path) -> Result<Vec<u8>, IoError> {
    fs::read(path).map_err(file_err(path))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    fs::write(path, bytes).map_err(file_err(path))
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new(magic: &[u8; 4]) -> Self {
        let mut buf = magic.to_vec();
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        Self { buf }
    }

    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("size fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.f64(*v);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.buf.extend_from_slice(s.as_bytes());
    }

    fn vector(&mut self, v: &[f64]) {
        self.u32(v.len());
        self.f64s(v);
    }

    fn matrix(&mut self, m: &Array2<f64>) {
        self.u32(m.nrows());
        self.u32(m.ncols());
        self.f64s(m.iter());
    }

    fn dmatrix(&mut self, m: &DMatrix<f64>) {
        self.u32(m.nrows());
        self.u32(m.ncols());
        // row-major, like every other matrix on disk
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                self.f64(m[(r, c)]);
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let crc = crc32fast::hash(&self.buf);
        self.buf.extend_from_slice(&crc.to_le_bytes());
        self.buf
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn open(bytes: &'a [u8], magic: &[u8; 4]) -> Result<Self, IoError> {
        let mut r = Self { bytes, pos: 0 };
        let found = r.take(4)?;
        if found != magic {
            return Err(IoError::BadMagic {
                expected: String::from_utf8_lossy(magic).into_owned(),
                found: String::from_utf8_lossy(found).into_owned(),
            });
        }
        let version = r.u16()?;
        if version != FORMAT_VERSION {
            return Err(IoError::UnsupportedVersion { version });
        }
        Ok(r)
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.remaining() < n {
            return Err(IoError::Truncated { offset: self.bytes.len() });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    /// Fails early when `count` items of `size` bytes cannot fit, so a
    /// corrupted length never triggers a huge allocation.
    fn reserve(&self, count: usize, size: usize) -> Result<(), IoError> {
        match count.checked_mul(size) {
            Some(n) if n <= self.remaining() => Ok(()),
            _ => Err(IoError::Truncated { offset: self.bytes.len() }),
        }
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<usize, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32(&mut self) -> Result<f64, IoError> {
        let offset = self.pos;
        let v = f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes"));
        if !v.is_finite() {
            return Err(IoError::NonFinite { offset });
        }
        Ok(v as f64)
    }

    fn f64(&mut self) -> Result<f64, IoError> {
        let offset = self.pos;
        let v = f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes"));
        if !v.is_finite() {
            return Err(IoError::NonFinite { offset });
        }
        Ok(v)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, IoError> {
        self.reserve(n, 8)?;
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String, IoError> {
        let len = self.u32()?;
        let offset = self.pos;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| IoError::Invalid { offset, message: "string is not UTF-8".into() })
    }

    fn vector(&mut self) -> Result<Vec<f64>, IoError> {
        let n = self.u32()?;
        self.f64s(n)
    }

    fn dims(&mut self) -> Result<(usize, usize), IoError> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        Ok((rows, cols))
    }

    fn matrix(&mut self) -> Result<Array2<f64>, IoError> {
        let (rows, cols) = self.dims()?;
        let n = rows.checked_mul(cols).ok_or(IoError::Truncated { offset: self.bytes.len() })?;
        let data = self.f64s(n)?;
        Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
    }

    fn dmatrix(&mut self) -> Result<DMatrix<f64>, IoError> {
        let (rows, cols) = self.dims()?;
        let n = rows.checked_mul(cols).ok_or(IoError::Truncated { offset: self.bytes.len() })?;
        let data = self.f64s(n)?;
        Ok(DMatrix::from_row_slice(rows, cols, &data))
    }

    fn invalid(&self, message: impl ToString) -> IoError {
        IoError::Invalid { offset: self.pos, message: message.to_string() }
    }

    /// Checks the trailer: exactly one CRC-32 over everything before it.
    fn finish(mut self) -> Result<(), IoError> {
        let body_end = self.pos;
        let stored = u32::from_le_bytes(self.take(CRC_LEN)?.try_into().expect("4 bytes"));
        if self.remaining() > 0 {
            return Err(IoError::TrailingBytes { offset: self.pos, extra: self.remaining() });
        }
        if crc32fast::hash(&self.bytes[..body_end]) != stored {
            return Err(IoError::ChecksumMismatch { offset: body_end });
        }
        Ok(())
    }
}

/// Returns the 4-byte magic and version of an artifact.
pub fn peek_header(bytes: &[u8]) -> Result<([u8; 4], u16), IoError> {
    if bytes.len() < HEADER_LEN {
        return Err(IoError::Truncated { offset: bytes.len() });
    }
    Ok((bytes[..4].try_into().expect("4 bytes"), u16::from_le_bytes([bytes[4], bytes[5]])))
}

fn encode_f32_matrix(magic: &[u8; 4], m: &Array2<f64>) -> Vec<u8> {
    let mut w = Writer::new(magic);
    w.u32(m.nrows());
    w.u32(m.ncols());
    for v in m.iter() {
        w.buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.finish()
}

fn decode_f32_matrix<'a>(bytes: &'a [u8], magic: &[u8; 4]) -> Result<(Array2<f64>, Reader<'a>), IoError> {
    let mut r = Reader::open(bytes, magic)?;
    let (rows, cols) = r.dims()?;
    let n = rows.checked_mul(cols).ok_or(IoError::Truncated { offset: bytes.len() })?;
    r.reserve(n, 4)?;
    let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>, _>>()?;
    Ok((Array2::from_shape_vec((rows, cols), data).expect("length checked"), r))
}

/// Features are stored as `f32`; values already representable in `f32`
/// round-trip exactly.
pub fn encode_features(feats: &FeatureSequence) -> Vec<u8> {
    encode_f32_matrix(b"DVFE", feats.frames())
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureSequence, IoError> {
    let (frames, r) = decode_f32_matrix(bytes, b"DVFE")?;
    let end = r.pos;
    r.finish()?;
    let kind = FeatureKind::from_width(frames.ncols()).map_err(|e| IoError::Invalid { offset: 14, message: e.to_string() })?;
    FeatureSequence::new(frames, kind).map_err(|e| IoError::Invalid { offset: end, message: e.to_string() })
}

pub fn write_features(path: &Path, feats: &FeatureSequence) -> Result<(), IoError> {
    write_file(path, &encode_features(feats))
}

pub fn read_features(path: &Path) -> Result<FeatureSequence, IoError> {
    decode_features(&read_file(path)?)
}

pub fn encode_posteriors(post: &Array2<f64>) -> Vec<u8> {
    encode_f32_matrix(b"DVPO", post)
}

/// Reads a posterior matrix as stored. Rows must be nonnegative and sum to
/// 1 within [`ROW_SUM_TOLERANCE`].
pub fn decode_posteriors(bytes: &[u8]) -> Result<Array2<f64>, IoError> {
    let (post, r) = decode_f32_matrix(bytes, b"DVPO")?;
    let end = r.pos;
    r.finish()?;
    if post.nrows() == 0 || post.ncols() == 0 {
        return Err(IoError::Invalid { offset: end, message: "empty posterior matrix".into() });
    }
    for (row, values) in post.outer_iter().enumerate() {
        if let Some(col) = values.iter().position(|p| *p < 0.0) {
            return Err(IoError::Invalid { offset: HEADER_LEN + 8 + 4 * (row * post.ncols() + col), message: "negative posterior".into() });
        }
        let sum = values.sum();
        if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(IoError::RowNotNormalized { row, offset: HEADER_LEN + 8 + 4 * row * post.ncols(), sum });
        }
    }
    Ok(post)
}

pub fn write_posteriors(path: &Path, post: &Array2<f64>) -> Result<(), IoError> {
    write_file(path, &encode_posteriors(post))
}

pub fn read_posteriors(path: &Path) -> Result<Array2<f64>, IoError> {
    decode_posteriors(&read_file(path)?)
}

/// Posteriors from an external state classifier. Rows are renormalized to
/// sum to 1 exactly; the file must have one column per HMM state.
pub fn load_external_posteriors(path: &Path) -> Result<AlignmentMatrix, IoError> {
    external_alignment(read_posteriors(path)?)
}

pub fn external_alignment(mut post: Array2<f64>) -> Result<AlignmentMatrix, IoError> {
    if post.ncols() != NUM_STATES {
        return Err(IoError::WrongStateCount { found: post.ncols(), expected: NUM_STATES });
    }
    for mut row in post.outer_iter_mut() {
        let sum = row.sum();
        row /= sum;
    }
    AlignmentMatrix::new(post, AlignmentSource::Dnn).map_err(|e| IoError::Invalid { offset: 0, message: e.to_string() })
}

pub fn encode_stats(stats: &SuffStats) -> Vec<u8> {
    let mut w = Writer::new(b"DVST");
    w.u32(stats.num_mixtures());
    w.u32(stats.dim());
    w.str(&stats.background_id);
    for m in 0..stats.num_mixtures() {
        w.f64(stats.n[m]);
        w.f64s(stats.f.row(m));
        w.f64s(stats.s.row(m));
    }
    w.finish()
}

pub fn decode_stats(bytes: &[u8]) -> Result<SuffStats, IoError> {
    let mut r = Reader::open(bytes, b"DVST")?;
    let (m, d) = r.dims()?;
    let background_id = r.str()?;
    let block = d.checked_mul(2).and_then(|x| x.checked_add(1)).ok_or(IoError::Truncated { offset: bytes.len() })?;
    r.reserve(m, block.saturating_mul(8))?;
    let mut stats = SuffStats::zeros(m, d, &background_id);
    for k in 0..m {
        let offset = r.pos;
        stats.n[k] = r.f64()?;
        if stats.n[k] < 0.0 {
            return Err(IoError::Invalid { offset, message: "negative zeroth-order count".into() });
        }
        for j in 0..d {
            stats.f[[k, j]] = r.f64()?;
        }
        for j in 0..d {
            stats.s[[k, j]] = r.f64()?;
        }
    }
    r.finish()?;
    Ok(stats)
}

pub fn write_stats(path: &Path, stats: &SuffStats) -> Result<(), IoError> {
    write_file(path, &encode_stats(stats))
}

pub fn read_stats(path: &Path) -> Result<SuffStats, IoError> {
    decode_stats(&read_file(path)?)
}

pub fn encode_ivectors(entries: &[(String, IVector)]) -> Vec<u8> {
    let mut w = Writer::new(b"DVIV");
    w.u32(entries.len());
    for (id, iv) in entries {
        w.str(id);
        w.u8(iv.normalized as u8);
        w.vector(iv.values.as_slice());
    }
    w.finish()
}

pub fn decode_ivectors(bytes: &[u8]) -> Result<Vec<(String, IVector)>, IoError> {
    let mut r = Reader::open(bytes, b"DVIV")?;
    let count = r.u32()?;
    // every entry needs at least a length, a flag and a dimension
    r.reserve(count, 9)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id = r.str()?;
        let offset = r.pos;
        let normalized = match r.u8()? {
            0 => false,
            1 => true,
            _ => return Err(IoError::Invalid { offset, message: "normalized flag must be 0 or 1".into() }),
        };
        let values = DVector::from_vec(r.vector()?);
        out.push((id, IVector { values, normalized }));
    }
    r.finish()?;
    Ok(out)
}

pub fn write_ivectors(path: &Path, entries: &[(String, IVector)]) -> Result<(), IoError> {
    write_file(path, &encode_ivectors(entries))
}

pub fn read_ivectors(path: &Path) -> Result<Vec<(String, IVector)>, IoError> {
    decode_ivectors(&read_file(path)?)
}

/// Everything the `DVMD` container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Ubm(DiagGmm),
    Hmm(HmmSet),
    Pgmm(Pgmm),
    Mlp(MlpModel),
    Tv(TvModel),
    Plda(PldaBackend),
    Speaker(SpeakerModel),
}

impl Model {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Model::Ubm(_) => "ubm",
            Model::Hmm(_) => "hmm",
            Model::Pgmm(_) => "pgmm",
            Model::Mlp(_) => "mlp",
            Model::Tv(_) => "tv",
            Model::Plda(_) => "plda",
            Model::Speaker(_) => "speaker",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            Model::Ubm(_) => 1,
            Model::Hmm(_) => 2,
            Model::Pgmm(_) => 3,
            Model::Mlp(_) => 4,
            Model::Tv(_) => 5,
            Model::Plda(_) => 6,
            Model::Speaker(_) => 7,
        }
    }
}

macro_rules! model_accessor {
    ($name:ident, $variant:ident, $ty:ty, $label:literal) => {
        impl Model {
            pub fn $name(self) -> Result<$ty, IoError> {
                match self {
                    Model::$variant(m) => Ok(m),
                    other => Err(IoError::WrongModelKind { expected: $label, found: other.kind_name() }),
                }
            }
        }
    };
}

model_accessor!(into_ubm, Ubm, DiagGmm, "ubm");
model_accessor!(into_hmm, Hmm, HmmSet, "hmm");
model_accessor!(into_pgmm, Pgmm, Pgmm, "pgmm");
model_accessor!(into_mlp, Mlp, MlpModel, "mlp");
model_accessor!(into_tv, Tv, TvModel, "tv");
model_accessor!(into_plda, Plda, PldaBackend, "plda");
model_accessor!(into_speaker, Speaker, SpeakerModel, "speaker");

fn put_gmm(w: &mut Writer, g: &DiagGmm) {
    w.vector(g.weights().as_slice().expect("contiguous"));
    w.matrix(g.means());
    w.matrix(g.variances());
}

fn get_gmm(r: &mut Reader) -> Result<DiagGmm, IoError> {
    let weights = Array1::from_vec(r.vector()?);
    let means = r.matrix()?;
    let variances = r.matrix()?;
    DiagGmm::new(weights, means, variances).map_err(|e| r.invalid(e))
}

fn put_background(w: &mut Writer, b: &Background) {
    w.matrix(b.means());
    w.matrix(b.variances());
}

fn get_background(r: &mut Reader) -> Result<Background, IoError> {
    let means = r.matrix()?;
    let variances = r.matrix()?;
    Background::new(means, variances).map_err(|e| r.invalid(e))
}

fn put_dvector(w: &mut Writer, v: &DVector<f64>) {
    w.vector(v.as_slice());
}

fn get_dvector(r: &mut Reader) -> Result<DVector<f64>, IoError> {
    Ok(DVector::from_vec(r.vector()?))
}

pub fn encode_model(model: &Model) -> Vec<u8> {
    let mut w = Writer::new(b"DVMD");
    w.u8(model.tag());
    match model {
        Model::Ubm(g) => put_gmm(&mut w, g),
        Model::Hmm(h) => {
            w.u32(h.states().len());
            for s in h.states() {
                w.f64(s.self_loop);
                put_gmm(&mut w, &s.gmm);
            }
        }
        Model::Pgmm(p) => {
            w.u32(p.state_ids().len());
            for &s in p.state_ids() {
                w.u32(s);
            }
            w.vector(&p.variance_floor().floor);
            w.vector(&p.variance_floor().global_var);
            for g in p.gmms() {
                put_gmm(&mut w, g);
            }
        }
        Model::Mlp(m) => {
            w.u32(m.layers.len());
            for layer in &m.layers {
                w.matrix(&layer.weights);
                w.vector(layer.bias.as_slice().expect("contiguous"));
            }
            w.vector(m.input_mean.as_slice().expect("contiguous"));
            w.vector(m.input_scale.as_slice().expect("contiguous"));
            w.vector(&m.log_priors);
        }
        Model::Tv(t) => {
            w.dmatrix(t.matrix());
            put_background(&mut w, t.background());
        }
        Model::Plda(p) => {
            put_dvector(&mut w, &p.center);
            w.dmatrix(&p.lda);
            put_dvector(&mut w, &p.mean);
            w.dmatrix(&p.between);
            w.dmatrix(&p.within);
        }
        Model::Speaker(s) => {
            w.str(&s.background_id);
            w.f64(s.relevance);
            w.matrix(&s.means);
        }
    }
    w.finish()
}

fn get_mlp(r: &mut Reader) -> Result<MlpModel, IoError> {
    let n = r.u32()?;
    r.reserve(n, 12)?;
    let mut layers: Vec<Layer> = Vec::with_capacity(n);
    for _ in 0..n {
        let weights = r.matrix()?;
        let bias = Array1::from_vec(r.vector()?);
        if bias.len() != weights.nrows() {
            return Err(r.invalid("bias length differs from layer outputs"));
        }
        if let Some(prev) = layers.last() {
            if prev.weights.nrows() != weights.ncols() {
                return Err(r.invalid("layer input width differs from previous output"));
            }
        }
        layers.push(Layer { weights, bias });
    }
    let input_mean = Array1::from_vec(r.vector()?);
    let input_scale = Array1::from_vec(r.vector()?);
    let log_priors = r.vector()?;
    let (first, last) = match (layers.first(), layers.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(r.invalid("network has no layers")),
    };
    if input_mean.len() != first.weights.ncols() || input_scale.len() != input_mean.len() || log_priors.len() != last.weights.nrows() {
        return Err(r.invalid("normalization or prior length differs from the network"));
    }
    Ok(MlpModel { layers, input_mean, input_scale, log_priors })
}

fn get_plda(r: &mut Reader) -> Result<PldaBackend, IoError> {
    let center = get_dvector(r)?;
    let lda = r.dmatrix()?;
    let mean = get_dvector(r)?;
    let between = r.dmatrix()?;
    let within = r.dmatrix()?;
    let k = lda.nrows();
    if lda.ncols() != center.len() || mean.len() != k || between.shape() != (k, k) || within.shape() != (k, k) || k == 0 {
        return Err(r.invalid("PLDA parameter shapes disagree"));
    }
    Ok(PldaBackend { center, lda, mean, between, within })
}

pub fn decode_model(bytes: &[u8]) -> Result<Model, IoError> {
    let mut r = Reader::open(bytes, b"DVMD")?;
    let tag_offset = r.pos;
    let tag = r.u8()?;
    let model = match tag {
        1 => Model::Ubm(get_gmm(&mut r)?),
        2 => {
            let n = r.u32()?;
            r.reserve(n, 8)?;
            let mut states = Vec::with_capacity(n);
            for _ in 0..n {
                let self_loop = r.f64()?;
                states.push(HmmState { self_loop, gmm: get_gmm(&mut r)? });
            }
            Model::Hmm(HmmSet::new(states).map_err(|e| r.invalid(e))?)
        }
        3 => {
            let n = r.u32()?;
            r.reserve(n, 4)?;
            let ids = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
            let floor = r.vector()?;
            let global_var = r.vector()?;
            let gmms = (0..n).map(|_| get_gmm(&mut r)).collect::<Result<Vec<_>, _>>()?;
            Model::Pgmm(Pgmm::new(ids, gmms, VarianceFloor { floor, global_var }).map_err(|e| r.invalid(e))?)
        }
        4 => Model::Mlp(get_mlp(&mut r)?),
        5 => {
            let t = r.dmatrix()?;
            let bg = get_background(&mut r)?;
            Model::Tv(TvModel::new(t, bg).map_err(|e| r.invalid(e))?)
        }
        6 => Model::Plda(get_plda(&mut r)?),
        7 => {
            let background_id = r.str()?;
            let relevance = r.f64()?;
            let means = r.matrix()?;
            Model::Speaker(SpeakerModel { means, background_id, relevance })
        }
        tag => return Err(IoError::UnknownModelKind { tag, offset: tag_offset }),
    };
    r.finish()?;
    Ok(model)
}

pub fn write_model(path: &Path, model: &Model) -> Result<(), IoError> {
    write_file(path, &encode_model(model))
}

pub fn read_model(path: &Path) -> Result<Model, IoError> {
    decode_model(&read_file(path)?)
}
