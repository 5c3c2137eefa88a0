//! Raw audio to normalized log-Mel features.
//!
//! Pipeline per frame: pre-emphasis (0.97) → Hann window → power spectrum
//! via FFT → triangular Mel filterbank (HTK Mel scale, 20 Hz to Nyquist) →
//! natural log with a floor of 1e-10.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"MS2F";
pub const LOG_FLOOR: f64 = 1e-10;
pub const CMVN_EPS: f64 = 1e-8;

/// Mono PCM samples scaled into [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// A `num_frames × feature_dim` matrix of log-Mel energies, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f32>,
    num_frames: usize,
    feature_dim: usize,
}

impl FeatureSequence {
    pub fn new(num_frames: usize, feature_dim: usize, data: Vec<f32>) -> Result<Self> {
        if num_frames == 0 || feature_dim == 0 || data.len() != num_frames * feature_dim {
            return Err(Error::Data(format!(
                "feature matrix {num_frames}x{feature_dim} with {} values",
                data.len()
            )));
        }
        Ok(FeatureSequence {
            data,
            num_frames,
            feature_dim,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        &self.data[t * self.feature_dim..(t + 1) * self.feature_dim]
    }

    pub fn get(&self, t: usize, f: usize) -> f32 {
        self.data[t * self.feature_dim + f]
    }

    /// Writes the `MS2F` cache format: magic, u32 T, u32 d, f32 payload (LE).
    pub fn write_cache(&self, path: &Path) -> Result<()> {
        let mut out = Vec::with_capacity(12 + self.data.len() * 4);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&(self.num_frames as u32).to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&out))
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_cache(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let bad = |field: &str| Error::UnsupportedFormat {
            path: path.to_path_buf(),
            field: field.to_string(),
        };
        if buf.len() < 12 || &buf[..4] != FEATURE_MAGIC {
            return Err(bad("magic"));
        }
        let t = u32::from_le_bytes(buf[4..8].try_into().unwrap()) as usize;
        let d = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        if buf.len() != 12 + t * d * 4 {
            return Err(bad("payload length"));
        }
        let data = buf[12..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        FeatureSequence::new(t, d, data)
    }
}

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

/// Reads a mono 16-bit PCM RIFF/WAVE file. When `expected_rate` is given a
/// different sample rate is rejected.
pub fn load_wav(path: &Path, expected_rate: Option<u32>) -> Result<Waveform> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    parse_wav(&buf, expected_rate).map_err(|field| Error::UnsupportedFormat {
        path: path.to_path_buf(),
        field,
    })
}

fn parse_wav(b: &[u8], expected_rate: Option<u32>) -> std::result::Result<Waveform, String> {
    if b.len() < 12 || &b[..4] != b"RIFF" || &b[8..12] != b"WAVE" {
        return Err("RIFF/WAVE header".into());
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None;
    while pos + 8 <= b.len() {
        let id = &b[pos..pos + 4];
        let size = u32_at(b, pos + 4) as usize;
        let body = pos + 8;
        if body + size > b.len() {
            return Err(format!("chunk {} length", String::from_utf8_lossy(id)));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err("fmt chunk size".into());
                }
                fmt = Some((
                    u16_at(b, body),
                    u16_at(b, body + 2),
                    u32_at(b, body + 4),
                    u16_at(b, body + 14),
                ));
            }
            b"data" => {
                let (format, channels, rate, bits) = fmt.ok_or("missing fmt chunk before data")?;
                if format != 1 {
                    return Err(format!("audio_format={format} (only PCM=1)"));
                }
                if channels != 1 {
                    return Err(format!("channels={channels} (only mono)"));
                }
                if bits != 16 {
                    return Err(format!("bits_per_sample={bits} (only 16)"));
                }
                if let Some(want) = expected_rate {
                    if rate != want {
                        return Err(format!("sample_rate={rate} (expected {want})"));
                    }
                }
                let samples = b[body..body + size]
                    .chunks_exact(2)
                    .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                    .collect();
                return Ok(Waveform {
                    samples,
                    sample_rate: rate,
                });
            }
            _ => {}
        }
        pos = body + size + (size & 1);
    }
    Err("missing data chunk".into())
}

/// Writes a mono 16-bit PCM WAV. Samples are clipped to [-1, 1).
pub fn write_wav(path: &Path, wave: &Waveform) -> Result<()> {
    let n = wave.samples.len() as u32;
    let mut out = Vec::with_capacity(44 + 2 * n as usize);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + 2 * n).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&wave.sample_rate.to_le_bytes());
    out.extend_from_slice(&(wave.sample_rate * 2).to_le_bytes());
    out.extend_from_slice(&2u16.to_le_bytes());
    out.extend_from_slice(&16u16.to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(2 * n).to_le_bytes());
    for &s in &wave.samples {
        let v = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub n_mels: usize,
    pub frame_len_ms: f64,
    pub frame_shift_ms: f64,
    pub low_freq: f64,
    pub preemphasis: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        FrontendConfig {
            sample_rate: 16000,
            n_mels: 80,
            frame_len_ms: 25.0,
            frame_shift_ms: 10.0,
            low_freq: 20.0,
            preemphasis: 0.97,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Precomputed window, FFT plan and filterbank for one configuration.
#[derive(Clone)]
pub struct MelFrontend {
    config: FrontendConfig,
    frame_len: usize,
    frame_shift: usize,
    n_fft: usize,
    window: Vec<f64>,
    /// Per Mel bin: first FFT bin index and its weights.
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MelFrontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MelFrontend").field("config", &self.config).finish()
    }
}

impl MelFrontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        let sr = config.sample_rate as f64;
        let frame_len = (sr * config.frame_len_ms / 1000.0).round() as usize;
        let frame_shift = (sr * config.frame_shift_ms / 1000.0).round() as usize;
        if frame_len < 2 || frame_shift == 0 || config.n_mels == 0 {
            return Err(Error::config("data.audio", "frame length, shift and n_mels must be positive"));
        }
        let nyquist = sr / 2.0;
        if config.low_freq >= nyquist {
            return Err(Error::config("data.audio.low_freq", "must be below Nyquist"));
        }
        let n_fft = frame_len.next_power_of_two();
        let window = (0..frame_len)
            .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / (frame_len - 1) as f64).cos())
            .collect();

        let (lo, hi) = (hz_to_mel(config.low_freq), hz_to_mel(nyquist));
        let step = (hi - lo) / (config.n_mels + 1) as f64;
        let n_bins = n_fft / 2 + 1;
        let mut filters = Vec::with_capacity(config.n_mels);
        let mut centers_hz = Vec::with_capacity(config.n_mels);
        for m in 0..config.n_mels {
            let (left, center, right) = (lo + m as f64 * step, lo + (m + 1) as f64 * step, lo + (m + 2) as f64 * step);
            centers_hz.push(mel_to_hz(center));
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let mel = hz_to_mel(k as f64 * sr / n_fft as f64);
                let w = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                if w > 0.0 {
                    let start = *first.get_or_insert(k);
                    weights.resize(k - start, 0.0);
                    weights.push(w);
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(MelFrontend {
            config,
            frame_len,
            frame_shift,
            n_fft,
            window,
            filters,
            centers_hz,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn frame_shift(&self) -> usize {
        self.frame_shift
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Center frequency of every Mel filter in Hz.
    pub fn center_frequencies(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Number of frames produced for `num_samples` samples.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        if num_samples < self.frame_len {
            0
        } else {
            1 + (num_samples - self.frame_len) / self.frame_shift
        }
    }

    /// Pre-emphasized and Hann-windowed copy of one frame.
    pub fn windowed_frame(&self, frame: &[f32]) -> Vec<f64> {
        let mut x: Vec<f64> = frame.iter().map(|&v| v as f64).collect();
        let a = self.config.preemphasis;
        for i in (1..x.len()).rev() {
            x[i] -= a * x[i - 1];
        }
        x[0] -= a * x[0];
        x.iter_mut().zip(&self.window).for_each(|(v, w)| *v *= w);
        x
    }

    /// One-sided power spectrum `|X_k|^2` of a windowed frame, zero-padded to `n_fft`.
    pub fn power_spectrum(&self, windowed: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = windowed.iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(self.n_fft, Complex::new(0.0, 0.0));
        self.fft.process(&mut buf);
        buf[..self.n_fft / 2 + 1].iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn log_mel(&self, wave: &Waveform) -> Result<FeatureSequence> {
        if wave.sample_rate != self.config.sample_rate {
            return Err(Error::Data(format!(
                "sample rate {} does not match configured {}",
                wave.sample_rate, self.config.sample_rate
            )));
        }
        let t = self.num_frames(wave.samples.len());
        if t == 0 {
            return Err(Error::TooShort(format!(
                "{} samples, need at least {} for one frame",
                wave.samples.len(),
                self.frame_len
            )));
        }
        let d = self.config.n_mels;
        let mut data = Vec::with_capacity(t * d);
        for i in 0..t {
            let start = i * self.frame_shift;
            let frame = &wave.samples[start..start + self.frame_len];
            let power = self.power_spectrum(&self.windowed_frame(frame));
            for (first, weights) in &self.filters {
                let e: f64 = weights.iter().zip(&power[*first..]).map(|(w, p)| w * p).sum();
                data.push(e.max(LOG_FLOOR).ln() as f32);
            }
        }
        FeatureSequence::new(t, d, data)
    }
}

/// Per-dimension statistics for global CMVN.
#[derive(Clone, Debug, PartialEq)]
pub struct CmvnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl CmvnStats {
    pub fn estimate(feats: &[FeatureSequence]) -> Result<Self> {
        let d = feats.first().ok_or_else(|| Error::Data("no features for CMVN statistics".into()))?.feature_dim;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = 0usize;
        for f in feats {
            if f.feature_dim != d {
                return Err(Error::Data("mixed feature dimensions".into()));
            }
            for row in f.data.chunks(d) {
                for j in 0..d {
                    sum[j] += row[j] as f64;
                    sq[j] += (row[j] as f64).powi(2);
                }
            }
            n += f.num_frames;
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let var = sq.iter().zip(&mean).map(|(s, m)| (s / n as f64 - m * m).max(0.0)).collect();
        Ok(CmvnStats { mean, var })
    }

    /// One `mean<TAB>var` line per dimension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let text: String = self.mean.iter().zip(&self.var).map(|(m, v)| format!("{m:e}\t{v:e}\n")).collect();
        std::fs::write(path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let mut stats = CmvnStats { mean: Vec::new(), var: Vec::new() };
        for (i, line) in text.lines().enumerate() {
            let parsed = line.split_once('\t').and_then(|(m, v)| Some((m.parse::<f64>().ok()?, v.parse::<f64>().ok()?)));
            let (m, v) = parsed.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: "expected `mean<TAB>var`".into(),
            })?;
            stats.mean.push(m);
            stats.var.push(v);
        }
        if stats.mean.is_empty() {
            return Err(Error::Data(format!("{} holds no CMVN statistics", path.display())));
        }
        Ok(stats)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CmvnMode {
    Utterance,
    Global(CmvnStats),
}

fn normalize(f: &mut FeatureSequence, mean: &[f64], var: &[f64]) {
    let d = f.feature_dim;
    for row in f.data.chunks_mut(d) {
        for j in 0..d {
            row[j] = ((row[j] as f64 - mean[j]) / (var[j] + CMVN_EPS).sqrt()) as f32;
        }
    }
}

/// Mean/variance normalization per feature dimension.
pub fn cmvn(feats: &mut [FeatureSequence], mode: &CmvnMode) -> Result<()> {
    match mode {
        CmvnMode::Utterance => {
            for f in feats.iter_mut() {
                let stats = CmvnStats::estimate(std::slice::from_ref(f))?;
                normalize(f, &stats.mean, &stats.var);
            }
        }
        CmvnMode::Global(stats) => {
            for f in feats.iter_mut() {
                if f.feature_dim != stats.mean.len() {
                    return Err(Error::Data("CMVN statistics dimension mismatch".into()));
                }
                normalize(f, &stats.mean, &stats.var);
            }
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskValue {
    Zero,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentPolicy {
    pub num_freq_masks: usize,
    pub max_freq_width: usize,
    pub num_time_masks: usize,
    pub max_time_width: usize,
    pub mask_value: MaskValue,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 2,
            max_freq_width: 10,
            num_time_masks: 2,
            max_time_width: 20,
            mask_value: MaskValue::Zero,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn disabled() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 0,
            num_time_masks: 0,
            ..Default::default()
        }
    }

    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        if self.num_freq_masks > 0 && self.max_freq_width >= feature_dim {
            return Err(Error::config(
                "data.audio.spec_augment.freq_width",
                format!("{} must be < feature_dim {feature_dim}", self.max_freq_width),
            ));
        }
        Ok(())
    }
}

/// One masked band: `axis_freq` selects frequency vs. time, covering `start..start+width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub axis_freq: bool,
    pub start: usize,
    pub width: usize,
}

/// Draws masks in a fixed order: all frequency masks, then all time masks;
/// per mask the width is drawn first, then the start.
pub fn draw_masks(policy: &SpecAugmentPolicy, num_frames: usize, feature_dim: usize, rng: &mut impl Rng) -> Vec<Mask> {
    let mut masks = Vec::new();
    for _ in 0..policy.num_freq_masks {
        let width = rng.gen_range(0..=policy.max_freq_width.min(feature_dim));
        let start = rng.gen_range(0..=feature_dim - width);
        masks.push(Mask { axis_freq: true, start, width });
    }
    for _ in 0..policy.num_time_masks {
        let width = rng.gen_range(0..=policy.max_time_width.min(num_frames));
        let start = rng.gen_range(0..=num_frames - width);
        masks.push(Mask { axis_freq: false, start, width });
    }
    masks
}

pub fn apply_masks(feat: &FeatureSequence, masks: &[Mask], mask_value: MaskValue) -> FeatureSequence {
    let fill = match mask_value {
        MaskValue::Zero => 0.0,
        MaskValue::Mean => (feat.data.iter().map(|&v| v as f64).sum::<f64>() / feat.data.len() as f64) as f32,
    };
    let mut out = feat.clone();
    let d = feat.feature_dim;
    for m in masks {
        for t in 0..feat.num_frames {
            for f in 0..d {
                let hit = if m.axis_freq {
                    f >= m.start && f < m.start + m.width
                } else {
                    t >= m.start && t < m.start + m.width
                };
                if hit {
                    out.data[t * d + f] = fill;
                }
            }
        }
    }
    out
}

/// Training-time time/frequency masking.
pub fn spec_augment(feat: &FeatureSequence, policy: &SpecAugmentPolicy, rng: &mut impl Rng) -> FeatureSequence {
    let masks = draw_masks(policy, feat.num_frames, feat.feature_dim, rng);
    apply_masks(feat, &masks, policy.mask_value)
}
