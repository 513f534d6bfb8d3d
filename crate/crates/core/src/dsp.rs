//! Audio front end: resampling, STFT, mel filterbank and log-mel
//! spectrograms, plus 16-bit PCM WAV I/O.
//!
//! All spectral arithmetic runs in `f64`; the final log-mel matrix is stored
//! as `f32`. Every function is pure, so identical input bytes always give an
//! identical matrix.

use std::io::{Read, Seek, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("clip too short: {samples} samples, need at least {needed}")]
    TooShort { samples: usize, needed: usize },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("sample {index} is not finite")]
    NonFinite { index: usize },
    #[error("wav: {0}")]
    Wav(#[from] hound::Error),
}

pub type Result<T, E = DspError> = std::result::Result<T, E>;

/// Mono waveform with its sample rate.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(DspError::Parameter("sample rate must be positive".into()));
        }
        if let Some(index) = samples.iter().position(|v| !v.is_finite()) {
            return Err(DspError::NonFinite { index });
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Linear-interpolation downsampling. Output sample `i` is read at source
/// position `i·source/target`; the output has `floor(n·target/source)` samples.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    let src = clip.sample_rate as u64;
    let tgt = target_rate as u64;
    if tgt == 0 {
        return Err(DspError::Parameter("target rate must be positive".into()));
    }
    if tgt > src {
        return Err(DspError::Unsupported(format!("upsampling from {src} Hz to {tgt} Hz")));
    }
    if tgt == src {
        return Ok(clip.clone());
    }
    let n = clip.samples.len() as u64;
    let out_len = (n * tgt / src) as usize;
    let x = &clip.samples;
    let out = (0..out_len as u64)
        .map(|i| {
            let num = i * src;
            let idx = (num / tgt) as usize;
            let frac = (num % tgt) as f64 / tgt as f64;
            let a = x[idx] as f64;
            let b = x.get(idx + 1).map_or(a, |&v| v as f64);
            (a + (b - a) * frac) as f32
        })
        .collect();
    AudioClip::new(out, target_rate)
}

/// Frame count of a sliding window: `floor((n − win)/hop) + 1`, or `None`
/// when the clip is shorter than one window.
pub fn frame_count(n_samples: usize, win: usize, hop: usize) -> Option<usize> {
    (hop > 0 && win > 0 && n_samples >= win).then(|| (n_samples - win) / hop + 1)
}

fn ms_to_samples(ms: f64, rate: u32) -> Result<usize> {
    let n = (ms * rate as f64 / 1000.0).round();
    if !(n >= 1.0) {
        return Err(DspError::Parameter(format!("{ms} ms is shorter than one sample at {rate} Hz")));
    }
    Ok(n as usize)
}

/// Complex short-time spectrum, row-major `[n_frames × n_bins]`.
#[derive(Clone, Debug)]
pub struct Stft {
    pub values: Vec<Complex<f64>>,
    pub n_frames: usize,
    pub n_bins: usize,
    pub nfft: usize,
    pub win_len: usize,
    pub hop_len: usize,
}

impl Stft {
    pub fn magnitudes(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm()).collect()
    }

    pub fn power(&self) -> Vec<f64> {
        self.values.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn frame(&self, i: usize) -> &[Complex<f64>] {
        &self.values[i * self.n_bins..(i + 1) * self.n_bins]
    }
}

/// Periodic Hann window.
fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Hann-windowed STFT; each frame is zero-padded to the next power of two.
pub fn stft(clip: &AudioClip, window_ms: f64, hop_ms: f64) -> Result<Stft> {
    let win = ms_to_samples(window_ms, clip.sample_rate)?;
    let hop = ms_to_samples(hop_ms, clip.sample_rate)?;
    let n_frames = frame_count(clip.len(), win, hop).ok_or(DspError::TooShort {
        samples: clip.len(),
        needed: win,
    })?;
    let nfft = win.next_power_of_two();
    let n_bins = nfft / 2 + 1;
    let window = hann(win);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(nfft);
    let mut buf = vec![Complex::new(0.0, 0.0); nfft];
    let mut values = Vec::with_capacity(n_frames * n_bins);
    for f in 0..n_frames {
        let seg = &clip.samples[f * hop..f * hop + win];
        for (i, slot) in buf.iter_mut().enumerate() {
            *slot = match seg.get(i) {
                Some(&s) => Complex::new(s as f64 * window[i], 0.0),
                None => Complex::new(0.0, 0.0),
            };
        }
        fft.process(&mut buf);
        values.extend_from_slice(&buf[..n_bins]);
    }
    Ok(Stft {
        values,
        n_frames,
        n_bins,
        nfft,
        win_len: win,
        hop_len: hop,
    })
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters, row-major `[n_mels × n_bins]`.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    pub weights: Vec<f64>,
    pub n_mels: usize,
    pub n_bins: usize,
    /// Peak frequency of each triangle in Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn row(&self, m: usize) -> &[f64] {
        &self.weights[m * self.n_bins..(m + 1) * self.n_bins]
    }
}

/// HTK-scale filterbank: `n_mels + 2` edge points uniform in mel over
/// `[fmin, fmax]`, unit-peak triangles evaluated at the FFT bin frequencies.
pub fn mel_filterbank(n_mels: usize, fmin: f64, fmax: f64, nfft: usize, rate: u32) -> Result<MelFilterbank> {
    let nyquist = rate as f64 / 2.0;
    if n_mels == 0 || nfft < 2 {
        return Err(DspError::Parameter("need at least one mel band and nfft ≥ 2".into()));
    }
    if !(fmin >= 0.0 && fmin < fmax) {
        return Err(DspError::Parameter(format!("need 0 ≤ fmin < fmax, got {fmin}..{fmax}")));
    }
    if fmax > nyquist {
        return Err(DspError::Parameter(format!("fmax {fmax} Hz exceeds Nyquist {nyquist} Hz")));
    }
    let n_bins = nfft / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut weights = vec![0.0; n_mels * n_bins];
    for m in 0..n_mels {
        let (l, c, u) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * rate as f64 / nfft as f64;
            let w = ((f - l) / (c - l)).min((u - f) / (u - c));
            weights[m * n_bins + k] = w.max(0.0);
        }
        if weights[m * n_bins..(m + 1) * n_bins].iter().all(|&w| w == 0.0) {
            return Err(DspError::Parameter(format!(
                "mel band {m} ({l:.1}..{u:.1} Hz) falls between FFT bins; use fewer bands or a larger nfft"
            )));
        }
    }
    Ok(MelFilterbank {
        weights,
        n_mels,
        n_bins,
        centers_hz: edges[1..=n_mels].to_vec(),
    })
}

/// Log-mel front-end settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            window_ms: 40.0,
            hop_ms: 40.0,
            n_mels: 128,
            fmin: 125.0,
            fmax: 7500.0,
        }
    }
}

pub const LOG_FLOOR: f64 = 1e-10;

/// Row-major `[n_frames × n_mels]` log-mel energies.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub config: MelConfig,
}

impl MelSpectrogram {
    pub fn n_mels(&self) -> usize {
        self.config.n_mels
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let m = self.config.n_mels;
        &self.frames[i * m..(i + 1) * m]
    }
}

/// `log(melfb · |STFT|² + 1e-10)`. The clip must already be at the
/// configured rate.
pub fn mel_spectrogram(clip: &AudioClip, config: &MelConfig) -> Result<MelSpectrogram> {
    if clip.sample_rate != config.sample_rate {
        return Err(DspError::Parameter(format!(
            "clip is {} Hz, front end expects {} Hz; resample first",
            clip.sample_rate, config.sample_rate
        )));
    }
    let spec = stft(clip, config.window_ms, config.hop_ms)?;
    let fb = mel_filterbank(config.n_mels, config.fmin, config.fmax, spec.nfft, config.sample_rate)?;
    let power = spec.power();
    let mut frames = Vec::with_capacity(spec.n_frames * config.n_mels);
    for f in 0..spec.n_frames {
        let p = &power[f * spec.n_bins..(f + 1) * spec.n_bins];
        for m in 0..config.n_mels {
            let e: f64 = fb.row(m).iter().zip(p).map(|(w, v)| w * v).sum();
            frames.push((e + LOG_FLOOR).ln() as f32);
        }
    }
    Ok(MelSpectrogram {
        frames,
        n_frames: spec.n_frames,
        config: *config,
    })
}

/// Decode a mono 16-bit PCM WAV stream.
pub fn read_wav_from<R: Read>(reader: R) -> Result<AudioClip> {
    let mut r = hound::WavReader::new(reader)?;
    let spec = r.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(DspError::Unsupported(format!(
            "only mono 16-bit PCM is supported, got {} channel(s), {} bits, {:?}",
            spec.channels, spec.bits_per_sample, spec.sample_format
        )));
    }
    let samples = r
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioClip::new(samples, spec.sample_rate)
}

pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let file = std::fs::File::open(path).map_err(hound::Error::IoError)?;
    read_wav_from(std::io::BufReader::new(file))
}

/// Encode as mono 16-bit PCM; samples are clipped to `[−1, 1]`.
pub fn write_wav_to<W: Write + Seek>(clip: &AudioClip, writer: W) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::new(writer, spec)?;
    for &s in &clip.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

pub fn write_wav(clip: &AudioClip, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(hound::Error::IoError)?;
    write_wav_to(clip, std::io::BufWriter::new(file))
}
