//! Acoustic front end: log mel filterbank and MFCC streams with
//! regression deltas, utterance-level CMVN and context splicing.
//!
//! Conventions follow HTK defaults: per-frame pre-emphasis of 0.97, a
//! Hamming window, magnitude spectrum, mel scale `1127 ln(1 + f/700)`,
//! log energies floored at 1.0 and deltas over a +/-2 frame regression
//! window with edge replication.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use thiserror::Error;

/// The only accepted sample rate.
pub const SAMPLE_RATE: u32 = 16_000;
/// Width of the filterbank stream (40 statics + deltas + delta-deltas).
pub const FBANK_DIM: usize = 120;
/// Width of the MFCC stream (20 statics + deltas + delta-deltas).
pub const MFCC_DIM: usize = 60;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("sample rate {0} Hz is not supported (expected 16000)")]
    BadSampleRate(u32),
    #[error("audio clip has {samples} samples, shorter than one {window}-sample window")]
    ClipTooShort { samples: usize, window: usize },
    #[error("CMVN needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("expected {expected} features, got {actual:?}")]
    WrongKind { expected: &'static str, actual: FeatureKind },
    #[error("feature width {cols} does not match any known stream")]
    UnknownWidth { cols: usize },
    #[error("feature sequence must have at least one frame")]
    Empty,
    #[error("non-finite feature value at frame {frame}, dim {dim}")]
    NonFinite { frame: usize, dim: usize },
    #[error("invalid feature config: {0}")]
    BadConfig(&'static str),
    #[error("wav: {0}")]
    Wav(String),
}

/// Mono 16-bit PCM audio.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<i16>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Result<Self, FeatureError> {
        if sample_rate != SAMPLE_RATE {
            return Err(FeatureError::BadSampleRate(sample_rate));
        }
        if samples.is_empty() {
            return Err(FeatureError::ClipTooShort { samples: 0, window: 1 });
        }
        Ok(Self { samples, sample_rate })
    }

    /// Reads a RIFF/WAVE file holding mono 16-bit PCM.
    pub fn read_wav(path: &Path) -> Result<Self, FeatureError> {
        let reader = hound::WavReader::open(path).map_err(|e| FeatureError::Wav(e.to_string()))?;
        let spec = reader.spec();
        if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
            return Err(FeatureError::Wav(format!(
                "expected mono PCM16, got {} channel(s) at {} bits",
                spec.channels, spec.bits_per_sample
            )));
        }
        let samples = reader
            .into_samples::<i16>()
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| FeatureError::Wav(e.to_string()))?;
        Self::new(samples, spec.sample_rate)
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }
}

/// Which stream a feature matrix belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    Fbank120,
    Mfcc60,
    /// Filterbank frames stacked with `context` neighbours on each side.
    Spliced { context: usize },
    /// Any other stream of the given width (external or test features).
    Raw { dim: usize },
}

impl FeatureKind {
    pub fn dim(self) -> usize {
        match self {
            FeatureKind::Fbank120 => FBANK_DIM,
            FeatureKind::Mfcc60 => MFCC_DIM,
            FeatureKind::Spliced { context } => FBANK_DIM * (2 * context + 1),
            FeatureKind::Raw { dim } => dim,
        }
    }

    /// Infers the stream from a matrix width (as stored in feature files).
    pub fn from_width(cols: usize) -> Result<Self, FeatureError> {
        match cols {
            MFCC_DIM => Ok(FeatureKind::Mfcc60),
            FBANK_DIM => Ok(FeatureKind::Fbank120),
            c if c % FBANK_DIM == 0 && (c / FBANK_DIM) % 2 == 1 => {
                Ok(FeatureKind::Spliced { context: (c / FBANK_DIM - 1) / 2 })
            }
            0 => Err(FeatureError::UnknownWidth { cols: 0 }),
            c => Ok(FeatureKind::Raw { dim: c }),
        }
    }
}

/// A T x D matrix of per-frame features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: Array2<f64>,
    frame_shift_ms: f64,
    kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(frames: Array2<f64>, kind: FeatureKind) -> Result<Self, FeatureError> {
        Self::with_shift(frames, kind, 10.0)
    }

    pub fn with_shift(frames: Array2<f64>, kind: FeatureKind, frame_shift_ms: f64) -> Result<Self, FeatureError> {
        if frames.nrows() == 0 {
            return Err(FeatureError::Empty);
        }
        if frames.ncols() != kind.dim() {
            return Err(FeatureError::WrongKind { expected: kind_name(kind), actual: kind });
        }
        if let Some(((frame, dim), _)) = frames.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(FeatureError::NonFinite { frame, dim });
        }
        let frames = if frames.is_standard_layout() { frames } else { frames.as_standard_layout().to_owned() };
        Ok(Self { frames, frame_shift_ms, kind })
    }

    pub fn frames(&self) -> &Array2<f64> {
        &self.frames
    }

    pub fn into_frames(self) -> Array2<f64> {
        self.frames
    }

    /// Frame `t` as a contiguous slice.
    pub fn frame(&self, t: usize) -> &[f64] {
        let d = self.frames.ncols();
        &self.frames.as_slice().expect("standard layout")[t * d..(t + 1) * d]
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    pub fn kind(&self) -> FeatureKind {
        self.kind
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift_ms
    }

    /// Frames `range` as a new sequence of the same kind.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<Self, FeatureError> {
        Self::with_shift(self.frames.slice(s![range, ..]).to_owned(), self.kind, self.frame_shift_ms)
    }
}

fn kind_name(kind: FeatureKind) -> &'static str {
    match kind {
        FeatureKind::Fbank120 => "FBANK120",
        FeatureKind::Mfcc60 => "MFCC60",
        FeatureKind::Spliced { .. } => "SPLICED",
        FeatureKind::Raw { .. } => "RAW",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub window_ms: f64,
    pub shift_ms: f64,
    pub n_mels: usize,
    pub n_ceps: usize,
    /// Frames of context on each side for splicing.
    pub context: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self { window_ms: 25.0, shift_ms: 10.0, n_mels: 40, n_ceps: 20, context: 5 }
    }
}

impl FeatureConfig {
    fn validate(&self) -> Result<(), FeatureError> {
        if !(self.window_ms > self.shift_ms && self.shift_ms > 0.0) {
            return Err(FeatureError::BadConfig("need window_ms > shift_ms > 0"));
        }
        if self.n_ceps > self.n_mels || self.n_mels == 0 {
            return Err(FeatureError::BadConfig("need 0 < n_ceps <= n_mels"));
        }
        Ok(())
    }

    fn window_samples(&self) -> usize {
        (self.window_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }

    fn shift_samples(&self) -> usize {
        (self.shift_ms * SAMPLE_RATE as f64 / 1000.0).round() as usize
    }
}

/// Number of frames for `samples` under the given framing.
pub fn frame_count(samples: usize, window: usize, shift: usize) -> usize {
    if samples < window {
        0
    } else {
        (samples - window) / shift + 1
    }
}

/// 40 log mel energies per frame with deltas and delta-deltas.
pub fn extract_fbank(audio: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureSequence, FeatureError> {
    if cfg.n_mels * 3 != FBANK_DIM {
        return Err(FeatureError::BadConfig("filterbank stream needs 40 mel bands"));
    }
    let log_mel = log_mel_energies(audio, cfg)?;
    FeatureSequence::with_shift(append_deltas(log_mel.view()), FeatureKind::Fbank120, cfg.shift_ms)
}

/// 20 cepstra per frame (c0..c19) with deltas and delta-deltas.
pub fn extract_mfcc(audio: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureSequence, FeatureError> {
    if cfg.n_ceps * 3 != MFCC_DIM {
        return Err(FeatureError::BadConfig("MFCC stream needs 20 cepstra"));
    }
    let log_mel = log_mel_energies(audio, cfg)?;
    let mut ceps = Array2::zeros((log_mel.nrows(), cfg.n_ceps));
    for (t, row) in log_mel.outer_iter().enumerate() {
        let c = dct_ii(row.as_slice().expect("contiguous row"), cfg.n_ceps);
        ceps.row_mut(t).assign(&Array1::from(c));
    }
    FeatureSequence::with_shift(append_deltas(ceps.view()), FeatureKind::Mfcc60, cfg.shift_ms)
}

/// HTK-normalized DCT-II: `c_i = sqrt(2/N) sum_j m_j cos(pi i (j + 0.5) / N)`.
pub fn dct_ii(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len() as f64;
    let scale = (2.0 / n).sqrt();
    (0..n_out)
        .map(|i| {
            scale
                * input
                    .iter()
                    .enumerate()
                    .map(|(j, m)| m * (PI * i as f64 * (j as f64 + 0.5) / n).cos())
                    .sum::<f64>()
        })
        .collect()
}

fn log_mel_energies(audio: &AudioClip, cfg: &FeatureConfig) -> Result<Array2<f64>, FeatureError> {
    cfg.validate()?;
    if audio.sample_rate() != SAMPLE_RATE {
        return Err(FeatureError::BadSampleRate(audio.sample_rate()));
    }
    let window = cfg.window_samples();
    let shift = cfg.shift_samples();
    let samples = audio.samples();
    let n_frames = frame_count(samples.len(), window, shift);
    if n_frames == 0 {
        return Err(FeatureError::ClipTooShort { samples: samples.len(), window });
    }

    let fft_len = window.next_power_of_two();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(fft_len);
    let hamming: Vec<f64> = (0..window)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (window as f64 - 1.0)).cos())
        .collect();
    let filters = mel_filterbank(cfg.n_mels, fft_len, SAMPLE_RATE as f64);

    let mut out = Array2::zeros((n_frames, cfg.n_mels));
    let mut buf = vec![Complex::new(0.0, 0.0); fft_len];
    let mut frame = vec![0.0; window];
    for t in 0..n_frames {
        let start = t * shift;
        for (dst, &src) in frame.iter_mut().zip(&samples[start..start + window]) {
            *dst = f64::from(src);
        }
        for i in (1..window).rev() {
            frame[i] -= 0.97 * frame[i - 1];
        }
        frame[0] *= 1.0 - 0.97;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < window { Complex::new(frame[i] * hamming[i], 0.0) } else { Complex::new(0.0, 0.0) };
        }
        fft.process(&mut buf);
        let magnitude: Vec<f64> = buf[..fft_len / 2 + 1].iter().map(|c| c.norm()).collect();
        for (m, filter) in filters.iter().enumerate() {
            let energy: f64 = filter.iter().map(|&(bin, w)| w * magnitude[bin]).sum();
            out[[t, m]] = energy.max(1.0).ln();
        }
    }
    Ok(out)
}

fn mel(f: f64) -> f64 {
    1127.0 * (1.0 + f / 700.0).ln()
}

/// Triangular filters equally spaced on the mel axis from 0 Hz to Nyquist,
/// as sparse `(bin, weight)` lists.
fn mel_filterbank(n_mels: usize, fft_len: usize, sample_rate: f64) -> Vec<Vec<(usize, f64)>> {
    let mel_hi = mel(sample_rate / 2.0);
    let centers: Vec<f64> = (0..n_mels + 2).map(|i| mel_hi * i as f64 / (n_mels + 1) as f64).collect();
    let mut filters = vec![Vec::new(); n_mels];
    for bin in 1..=fft_len / 2 {
        let m = mel(bin as f64 * sample_rate / fft_len as f64);
        for (k, filter) in filters.iter_mut().enumerate() {
            let (lo, mid, hi) = (centers[k], centers[k + 1], centers[k + 2]);
            let w = if m > lo && m <= mid {
                (m - lo) / (mid - lo)
            } else if m > mid && m < hi {
                (hi - m) / (hi - mid)
            } else {
                0.0
            };
            if w > 0.0 {
                filter.push((bin, w));
            }
        }
    }
    filters
}

/// Regression deltas over +/-2 frames with edge replication.
fn deltas(x: ArrayView2<f64>) -> Array2<f64> {
    const WINDOW: isize = 2;
    let t_len = x.nrows() as isize;
    let norm: f64 = 2.0 * (1..=WINDOW).map(|k| (k * k) as f64).sum::<f64>();
    let mut out = Array2::zeros(x.raw_dim());
    for t in 0..t_len {
        let mut row = out.row_mut(t as usize);
        for k in 1..=WINDOW {
            let fwd = x.row((t + k).min(t_len - 1) as usize);
            let bwd = x.row((t - k).max(0) as usize);
            row.zip_mut_with(&(&fwd - &bwd), |o, d| *o += k as f64 * d);
        }
        row.mapv_inplace(|v| v / norm);
    }
    out
}

/// `[statics | deltas | delta-deltas]`.
fn append_deltas(statics: ArrayView2<f64>) -> Array2<f64> {
    let d1 = deltas(statics);
    let d2 = deltas(d1.view());
    ndarray::concatenate(Axis(1), &[statics.view(), d1.view(), d2.view()]).expect("equal row counts")
}

/// Per-utterance mean and variance normalization. Constant dimensions are
/// set to zero instead of being divided by a zero deviation.
pub fn apply_cmvn(feats: &FeatureSequence) -> Result<FeatureSequence, FeatureError> {
    let t = feats.num_frames();
    if t < 2 {
        return Err(FeatureError::TooFewFrames(t));
    }
    let mut frames = feats.frames().clone();
    for mut col in frames.columns_mut() {
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            col.fill(0.0);
            continue;
        }
        let mean = col.sum() / t as f64;
        col.mapv_inplace(|v| v - mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / t as f64;
        if var > 0.0 {
            let inv = 1.0 / var.sqrt();
            col.mapv_inplace(|v| v * inv);
        }
    }
    FeatureSequence::with_shift(frames, feats.kind(), feats.frame_shift_ms())
}

/// Stacks each filterbank frame with `context` neighbours on each side,
/// repeating the first/last frame at the edges.
pub fn splice(feats: &FeatureSequence, context: usize) -> Result<FeatureSequence, FeatureError> {
    if feats.kind() != FeatureKind::Fbank120 {
        return Err(FeatureError::WrongKind { expected: "FBANK120", actual: feats.kind() });
    }
    if context == 0 {
        return Ok(feats.clone());
    }
    let t_len = feats.num_frames() as isize;
    let d = feats.dim();
    let width = 2 * context + 1;
    let mut out = Array2::zeros((t_len as usize, d * width));
    for t in 0..t_len {
        for (block, offset) in (-(context as isize)..=context as isize).enumerate() {
            let src = (t + offset).clamp(0, t_len - 1) as usize;
            out.slice_mut(s![t as usize, block * d..(block + 1) * d]).assign(&feats.frames().row(src));
        }
    }
    FeatureSequence::with_shift(out, FeatureKind::Spliced { context }, feats.frame_shift_ms())
}

/// Center block of a spliced sequence, i.e. the original frames.
pub fn unsplice(feats: &FeatureSequence) -> Result<FeatureSequence, FeatureError> {
    let FeatureKind::Spliced { context } = feats.kind() else {
        return Err(FeatureError::WrongKind { expected: "SPLICED", actual: feats.kind() });
    };
    let center = feats.frames().slice(s![.., context * FBANK_DIM..(context + 1) * FBANK_DIM]).to_owned();
    FeatureSequence::with_shift(center, FeatureKind::Fbank120, feats.frame_shift_ms())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_clip(len: usize, seed: u64) -> AudioClip {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AudioClip::new((0..len).map(|_| rng.gen_range(-3000..3000)).collect(), SAMPLE_RATE).unwrap()
    }

    #[test]
    fn one_second_gives_98_frames() {
        let clip = noise_clip(16_000, 1);
        let fb = extract_fbank(&clip, &FeatureConfig::default()).unwrap();
        assert_eq!(fb.num_frames(), (16_000 - 400) / 160 + 1);
        assert_eq!(fb.num_frames(), 98);
        assert_eq!(fb.dim(), 120);
        assert_eq!(fb.kind(), FeatureKind::Fbank120);
        let mfcc = extract_mfcc(&clip, &FeatureConfig::default()).unwrap();
        assert_eq!(mfcc.num_frames(), 98);
        assert_eq!(mfcc.dim(), 60);
    }

    #[test]
    fn short_clip_rejected() {
        let clip = noise_clip(100, 2);
        assert_eq!(
            extract_fbank(&clip, &FeatureConfig::default()),
            Err(FeatureError::ClipTooShort { samples: 100, window: 400 })
        );
    }

    #[test]
    fn bad_sample_rate() {
        assert_eq!(AudioClip::new(vec![0; 1000], 8000), Err(FeatureError::BadSampleRate(8000)));
    }

    #[test]
    fn dc_input_gives_constant_cepstra() {
        let clip = AudioClip::new(vec![1200; 8000], SAMPLE_RATE).unwrap();
        let mfcc = extract_mfcc(&clip, &FeatureConfig::default()).unwrap();
        let first = mfcc.frames().row(0).to_owned();
        for row in mfcc.frames().outer_iter() {
            for (a, b) in row.iter().zip(first.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn dct_matches_direct_summation() {
        let log_e: Vec<f64> = (0..40).map(|j| ((j * 7 % 11) as f64).sin() * 3.0 + j as f64 * 0.1).collect();
        let got = dct_ii(&log_e, 20);
        for (i, g) in got.iter().enumerate() {
            let mut direct = 0.0;
            for (j, m) in log_e.iter().enumerate() {
                direct += m * (std::f64::consts::PI / 40.0 * i as f64 * (j as f64 + 0.5)).cos();
            }
            direct *= (2.0f64 / 40.0).sqrt();
            assert!((g - direct).abs() < 1e-12, "c{i}: {g} vs {direct}");
        }
    }

    #[test]
    fn cmvn_moments_and_constant_dim() {
        let mut frames = Array2::from_shape_fn((50, 60), |(t, d)| ((t * 31 + d * 7) % 17) as f64 * 0.3 + d as f64);
        frames.column_mut(3).fill(4.2);
        let feats = FeatureSequence::new(frames, FeatureKind::Mfcc60).unwrap();
        let out = apply_cmvn(&feats).unwrap();
        for (d, col) in out.frames().columns().into_iter().enumerate() {
            let mean = col.sum() / 50.0;
            assert!(mean.abs() < 1e-6);
            let var = col.iter().map(|v| v * v).sum::<f64>() / 50.0;
            if d == 3 {
                assert!(col.iter().all(|&v| v == 0.0));
            } else {
                assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cmvn_needs_two_frames() {
        let feats = FeatureSequence::new(Array2::zeros((1, 60)), FeatureKind::Mfcc60).unwrap();
        assert_eq!(apply_cmvn(&feats), Err(FeatureError::TooFewFrames(1)));
    }

    #[test]
    fn splice_shapes_and_padding() {
        let frames = Array2::from_shape_fn((1, 120), |(_, d)| d as f64);
        let one = FeatureSequence::new(frames, FeatureKind::Fbank120).unwrap();
        let spliced = splice(&one, 5).unwrap();
        assert_eq!(spliced.dim(), 1320);
        assert_eq!(spliced.kind(), FeatureKind::Spliced { context: 5 });
        for block in 0..11 {
            for d in 0..120 {
                assert_eq!(spliced.frames()[[0, block * 120 + d]], d as f64);
            }
        }
        assert_eq!(splice(&one, 0).unwrap(), one);
        let mfcc = FeatureSequence::new(Array2::zeros((3, 60)), FeatureKind::Mfcc60).unwrap();
        assert!(matches!(splice(&mfcc, 5), Err(FeatureError::WrongKind { .. })));
    }

    #[test]
    fn frame_count_ignores_content() {
        let a = extract_fbank(&noise_clip(5000, 3), &FeatureConfig::default()).unwrap();
        let b = extract_fbank(&AudioClip::new(vec![0; 5000], SAMPLE_RATE).unwrap(), &FeatureConfig::default()).unwrap();
        assert_eq!(a.num_frames(), b.num_frames());
    }

    fn arb_frames(dim: usize) -> impl Strategy<Value = Array2<f64>> {
        (2usize..12).prop_flat_map(move |t| {
            proptest::collection::vec(-50.0f64..50.0, t * dim)
                .prop_map(move |v| Array2::from_shape_vec((t, dim), v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn cmvn_is_idempotent(frames in arb_frames(60)) {
            let feats = FeatureSequence::new(frames, FeatureKind::Mfcc60).unwrap();
            let once = apply_cmvn(&feats).unwrap();
            let twice = apply_cmvn(&once).unwrap();
            for (a, b) in once.frames().iter().zip(twice.frames().iter()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn splice_then_center_recovers_input(frames in arb_frames(120), context in 0usize..6) {
            let feats = FeatureSequence::new(frames, FeatureKind::Fbank120).unwrap();
            let spliced = splice(&feats, context).unwrap();
            let back = if context == 0 { spliced } else { unsplice(&spliced).unwrap() };
            prop_assert_eq!(back.frames(), feats.frames());
        }

        #[test]
        fn outputs_finite(len in 400usize..3000, seed in 0u64..1000) {
            let clip = noise_clip(len, seed);
            let mfcc = extract_mfcc(&clip, &FeatureConfig::default()).unwrap();
            prop_assert!(mfcc.frames().iter().all(|v| v.is_finite()));
        }
    }
}
