//! Audio ingestion and the log-mel frontend.
//!
//! Everything the model sees starts here: 16-bit PCM WAV bytes are
//! downmixed to mono, resampled to 16 kHz by linear interpolation, scaled
//! to [-1, 1), and then either segmented into fixed 3-second pieces for
//! the backbone or rendered into a log-mel spectrogram.
//!
//! The resampler is deliberately simple (linear, not polyphase); the
//! synthetic training material is band-limited enough that this does not
//! matter, and it keeps ingestion dependency-free.

use std::f64::consts::PI;
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use thiserror::Error;

/// Canonical sample rate after ingestion.
pub const SAMPLE_RATE: u32 = 16_000;
/// Length of one backbone segment, in seconds.
pub const SEGMENT_SECONDS: f64 = 3.0;
/// Tracks are truncated to this many seconds before segmentation.
pub const MAX_TRACK_SECONDS: f64 = 20.0;

// ─────────────────────────────── Errors ───────────────────────────────

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("malformed WAV: {0}")]
    MalformedWav(String),
    #[error("empty or too-short input: {0}")]
    EmptyInput(String),
    #[error("clip too short: need {need} samples, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

// ─────────────────────────────── Clip ─────────────────────────────────

/// Mono audio at the canonical rate.
#[derive(Debug, Clone)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

// ─────────────────────────────── WAV I/O ──────────────────────────────

fn rd_u16(b: &[u8], o: usize) -> u16 {
    u16::from_le_bytes([b[o], b[o + 1]])
}

fn rd_u32(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]])
}

/// Parse 16-bit PCM WAV bytes into a mono 16 kHz clip.
///
/// Stereo is downmixed by channel mean, other rates are linearly
/// resampled, and integer samples are scaled by 1/32768.
pub fn ingest(bytes: &[u8]) -> Result<AudioClip, AudioError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(AudioError::MalformedWav("missing RIFF/WAVE header".into()));
    }
    let mut pos = 12;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // format, channels, rate, bits
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = rd_u32(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        if body_start + size > bytes.len() {
            return Err(AudioError::MalformedWav(format!(
                "chunk {:?} overruns file",
                String::from_utf8_lossy(id)
            )));
        }
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(AudioError::MalformedWav("fmt chunk too small".into()));
                }
                fmt = Some((
                    rd_u16(bytes, body_start),
                    rd_u16(bytes, body_start + 2),
                    rd_u32(bytes, body_start + 4),
                    rd_u16(bytes, body_start + 14),
                ));
            }
            b"data" => data = Some(&bytes[body_start..body_start + size]),
            _ => {} // skip LIST, fact, ...
        }
        pos = body_start + size + (size & 1); // chunks are word-aligned
    }
    let (format, channels, rate, bits) =
        fmt.ok_or_else(|| AudioError::MalformedWav("no fmt chunk".into()))?;
    if format != 1 {
        return Err(AudioError::UnsupportedFormat(format!("WAV format tag {format}, want PCM (1)")));
    }
    if bits != 16 {
        return Err(AudioError::UnsupportedFormat(format!("{bits}-bit PCM, want 16")));
    }
    if channels == 0 || channels > 2 {
        return Err(AudioError::UnsupportedFormat(format!("{channels} channels, want 1 or 2")));
    }
    if rate == 0 {
        return Err(AudioError::MalformedWav("zero sample rate".into()));
    }
    let data = data.ok_or_else(|| AudioError::MalformedWav("no data chunk".into()))?;
    let frame_bytes = 2 * channels as usize;
    let n_frames = data.len() / frame_bytes;
    if n_frames == 0 {
        return Err(AudioError::EmptyInput("no audio frames".into()));
    }
    // Downmix to mono and scale by 1/32768, in f64 for the resampler.
    let mut mono = Vec::with_capacity(n_frames);
    for f in 0..n_frames {
        let mut acc = 0.0f64;
        for c in 0..channels as usize {
            let o = f * frame_bytes + 2 * c;
            acc += i16::from_le_bytes([data[o], data[o + 1]]) as f64;
        }
        mono.push(acc / channels as f64 / 32768.0);
    }
    let resampled = if rate == SAMPLE_RATE { mono } else { resample_linear(&mono, rate, SAMPLE_RATE) };
    Ok(AudioClip {
        samples: resampled.into_iter().map(|v| v as f32).collect(),
        sample_rate: SAMPLE_RATE,
    })
}

/// Read and ingest a WAV file.
pub fn read_wav(path: &Path) -> Result<AudioClip, AudioError> {
    ingest(&std::fs::read(path)?)
}

/// Write mono samples as 16-bit PCM WAV. Values are clamped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<(), AudioError> {
    let n = samples.len();
    let data_bytes = 2 * n as u32;
    let mut out = Vec::with_capacity(44 + 2 * n);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&(36 + data_bytes).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes()); // PCM
    out.extend_from_slice(&1u16.to_le_bytes()); // mono
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * 2).to_le_bytes()); // byte rate
    out.extend_from_slice(&2u16.to_le_bytes()); // block align
    out.extend_from_slice(&16u16.to_le_bytes()); // bits
    out.extend_from_slice(b"data");
    out.extend_from_slice(&data_bytes.to_le_bytes());
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Linear-interpolation resampler.
///
/// Output length is `⌊(n-1)·out/in⌋ + 1`: the first and last input samples
/// map to the first and (at most) last output positions.
pub fn resample_linear(x: &[f64], in_rate: u32, out_rate: u32) -> Vec<f64> {
    if x.is_empty() || in_rate == out_rate {
        return x.to_vec();
    }
    let n = x.len();
    let out_len = ((n - 1) as u64 * out_rate as u64 / in_rate as u64) as usize + 1;
    let step = in_rate as f64 / out_rate as f64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let p = i as f64 * step;
        let k = p.floor() as usize;
        let frac = p - k as f64;
        let a = x[k.min(n - 1)];
        let b = x[(k + 1).min(n - 1)];
        out.push(a + (b - a) * frac);
    }
    out
}

// ─────────────────────────── Segmentation ─────────────────────────────

/// Cut a clip into `T = ⌊min(dur, max_seconds)/seg_seconds⌋` non-overlapping
/// segments, dropping the remainder. The clip must cover one segment.
pub fn segment(
    clip: &AudioClip,
    seg_seconds: f64,
    max_seconds: f64,
) -> Result<Vec<AudioClip>, AudioError> {
    let seg_len = (seg_seconds * clip.sample_rate as f64).round() as usize;
    let max_len = (max_seconds * clip.sample_rate as f64).round() as usize;
    if clip.samples.len() < seg_len {
        return Err(AudioError::TooShort { need: seg_len, got: clip.samples.len() });
    }
    let usable = clip.samples.len().min(max_len);
    let t = usable / seg_len;
    Ok((0..t)
        .map(|i| AudioClip {
            samples: clip.samples[i * seg_len..(i + 1) * seg_len].to_vec(),
            sample_rate: clip.sample_rate,
        })
        .collect())
}

/// Uniform random contiguous crop of the given duration.
pub fn random_crop(
    clip: &AudioClip,
    seconds: f64,
    rng: &mut ChaCha8Rng,
) -> Result<AudioClip, AudioError> {
    let crop_len = (seconds * clip.sample_rate as f64).round() as usize;
    if clip.samples.len() < crop_len {
        return Err(AudioError::TooShort { need: crop_len, got: clip.samples.len() });
    }
    let start = rng.random_range(0..=clip.samples.len() - crop_len);
    Ok(AudioClip {
        samples: clip.samples[start..start + crop_len].to_vec(),
        sample_rate: clip.sample_rate,
    })
}

// ─────────────────────────── Mel frontend ─────────────────────────────

/// STFT/mel parameters.
#[derive(Debug, Clone, Copy)]
pub struct MelConfig {
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        MelConfig { win: 512, hop: 256, n_mels: 48, fmin: 0.0, fmax: 8000.0, floor: 1e-10 }
    }
}

/// Log-mel spectrogram, `frames x n_mels`, row-major (one row per frame).
#[derive(Debug, Clone)]
pub struct MelSpectrogram {
    pub data: Vec<f64>,
    pub frames: usize,
    pub n_mels: usize,
    pub frame_hop: usize,
}

impl MelSpectrogram {
    pub fn at(&self, frame: usize, mel: usize) -> f64 {
        self.data[frame * self.n_mels + mel]
    }
}

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Reusable mel pipeline: periodic Hann window, magnitude STFT, HTK-scale
/// triangular filterbank with unit peaks, natural log with a 1e-10 floor.
pub struct MelProcessor {
    cfg: MelConfig,
    window: Vec<f64>,
    /// Per filter: (first bin, weights over a contiguous bin range).
    filters: Vec<(usize, Vec<f64>)>,
    centers_hz: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MelProcessor {
    pub fn new(cfg: MelConfig, sample_rate: u32) -> MelProcessor {
        let n = cfg.win;
        let window: Vec<f64> =
            (0..n).map(|i| 0.5 * (1.0 - (2.0 * PI * i as f64 / n as f64).cos())).collect();
        let n_bins = n / 2 + 1;
        let bin_hz = sample_rate as f64 / n as f64;
        // n_mels + 2 equally spaced points on the mel scale; filter m spans
        // points m..m+2 with its unit peak at point m+1.
        let lo = hz_to_mel(cfg.fmin);
        let hi = hz_to_mel(cfg.fmax);
        let pts: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut filters = Vec::with_capacity(cfg.n_mels);
        for m in 0..cfg.n_mels {
            let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
            let mut first = None;
            let mut weights = Vec::new();
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f <= l || f >= r {
                    0.0
                } else if f <= c {
                    (f - l) / (c - l)
                } else {
                    (r - f) / (r - c)
                };
                if w > 0.0 {
                    if first.is_none() {
                        first = Some(k);
                    }
                    weights.push(w);
                } else if first.is_some() {
                    break;
                }
            }
            filters.push((first.unwrap_or(0), weights));
        }
        let centers_hz = pts[1..=cfg.n_mels].to_vec();
        let fft = FftPlanner::new().plan_fft_forward(n);
        MelProcessor { cfg, window, filters, centers_hz, fft }
    }

    pub fn config(&self) -> &MelConfig {
        &self.cfg
    }

    /// Center frequency (Hz) of each mel filter.
    pub fn center_freqs(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Index of the filter whose center lies closest to `hz`.
    pub fn nearest_band(&self, hz: f64) -> usize {
        self.centers_hz
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| (*a - hz).abs().total_cmp(&(*b - hz).abs()))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    /// Number of frames produced for a clip of `len` samples.
    pub fn frames_for(&self, len: usize) -> usize {
        if len < self.cfg.win {
            0
        } else {
            1 + (len - self.cfg.win) / self.cfg.hop
        }
    }

    /// Compute the log-mel spectrogram of a clip.
    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram, AudioError> {
        let x = &clip.samples;
        if x.len() < self.cfg.win {
            return Err(AudioError::EmptyInput(format!(
                "{} samples is shorter than one {}-sample window",
                x.len(),
                self.cfg.win
            )));
        }
        let frames = self.frames_for(x.len());
        let n_bins = self.cfg.win / 2 + 1;
        let mut out = vec![0.0; frames * self.cfg.n_mels];
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.win];
        let mut mags = vec![0.0; n_bins];
        for t in 0..frames {
            let start = t * self.cfg.hop;
            for i in 0..self.cfg.win {
                buf[i] = Complex::new(x[start + i] as f64 * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (k, m) in mags.iter_mut().enumerate() {
                *m = buf[k].norm();
            }
            let row = &mut out[t * self.cfg.n_mels..(t + 1) * self.cfg.n_mels];
            for (m, (first, weights)) in self.filters.iter().enumerate() {
                let mut acc = 0.0;
                for (j, &w) in weights.iter().enumerate() {
                    acc += w * mags[first + j];
                }
                row[m] = acc.max(self.cfg.floor).ln();
            }
        }
        Ok(MelSpectrogram {
            data: out,
            frames,
            n_mels: self.cfg.n_mels,
            frame_hop: self.cfg.hop,
        })
    }
}

// ─────────────────────────────── Tests ─────────────────────────────────
