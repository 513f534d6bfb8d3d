//! Deterministic synthetic datasets.
//!
//! * class images: oriented gratings whose orientation band encodes one of
//!   eight classes;
//! * triplets: two images of one class and one of another, with the
//!   same-class pair annotated;
//! * unlabeled images: gratings at arbitrary orientation;
//! * audio-visual clips: smoothed random-walk arousal/valence traces driving
//!   a tone (amplitude ↔ arousal, pitch ↔ valence) and a frame stream
//!   (brightness ↔ arousal, orientation ↔ valence).
//!
//! Every sample is a pure function of `(seed, index)`, so shards can be
//! generated in any order and regenerated bit-identically.

mod persist;

pub(crate) use persist::hex;
pub use persist::{
    clip_path, load_av_split, load_image_split, load_triplet_split, load_unlabeled, write_dataset, AvFamily,
    DatasetSpec, FamilyInfo, ImageSet, Manifest, Split, SplitRanges, TripletSet, MANIFEST,
};

use std::f64::consts::PI;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::dsp::{AudioClip, DspError};
use crate::losses::TripletLabel;
use crate::tensor::Tensor;

/// Bumped whenever any generator's output changes.
pub const GENERATOR_VERSION: u32 = 1;
pub const NUM_CLASSES: usize = 8;
pub const CLASS_BAND_DEG: f64 = 22.5;
pub const CLASS_SPREAD_DEG: f64 = 11.0;
pub const PIXEL_NOISE: f64 = 0.1;
pub const AUDIO_RATE: u32 = 16_000;
/// Label grid and frame period in milliseconds (25 fps).
pub const TRACE_STEP_MS: u32 = 40;
pub const SAMPLES_PER_STEP: usize = (AUDIO_RATE as usize * TRACE_STEP_MS as usize) / 1000;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error(transparent)]
    Dsp(#[from] DspError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] crate::checkpoint::CheckpointError),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{0} exists and is not empty; pass --force to overwrite")]
    NotEmpty(std::path::PathBuf),
}

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
enum Stream {
    ClassImage = 1,
    Triplet = 2,
    Unlabeled = 3,
    AvTrace = 4,
    AvNoise = 5,
    AvFrame = 6,
}

/// Independent RNG for one sample of one generator family.
fn stream(seed: u64, family: Stream, index: u64, sub: u64) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    h = splitmix64(h ^ family as u64);
    h = splitmix64(h ^ index);
    h = splitmix64(h ^ sub);
    ChaCha8Rng::seed_from_u64(h)
}

/// Generative factors of one grating.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Latent {
    /// Wave-vector direction in degrees, `[0, 180)`.
    pub theta_deg: f64,
    /// Cycles per pixel.
    pub freq: f64,
    pub phase: f64,
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthImage {
    /// `3 × size × size`, values in `[−1, 1]`.
    pub pixels: Vec<f32>,
    pub size: usize,
    pub class_id: Option<u8>,
    pub latent: Latent,
    pub seed: u64,
    pub index: u64,
}

/// Render a grating with additive Gaussian pixel noise, clipped to `[−1, 1]`.
pub fn render_grating(size: usize, latent: &Latent, noise: f64, rng: &mut impl Rng) -> Vec<f32> {
    let normal = Normal::new(0.0, noise.max(0.0)).expect("finite sigma");
    let (s, c) = latent.theta_deg.to_radians().sin_cos();
    let half = (size as f64 - 1.0) / 2.0;
    let mut base = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 - half, y as f64 - half);
            let wave = (2.0 * PI * latent.freq * (u * c + v * s) + latent.phase).sin();
            base.push(latent.brightness + latent.contrast * wave);
        }
    }
    let mut out = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        for &b in &base {
            let n = if noise > 0.0 { normal.sample(rng) } else { 0.0 };
            out.push((b + n).clamp(-1.0, 1.0) as f32);
        }
    }
    out
}

fn class_latent(rng: &mut impl Rng, class: u8) -> Latent {
    Latent {
        theta_deg: class as f64 * CLASS_BAND_DEG + rng.random_range(0.0..CLASS_SPREAD_DEG),
        freq: rng.random_range(0.08..0.16),
        phase: rng.random_range(0.0..2.0 * PI),
        brightness: rng.random_range(-0.2..0.2),
        contrast: rng.random_range(0.5..0.8),
    }
}

fn class_image_from(rng: &mut ChaCha8Rng, seed: u64, index: u64, size: usize, class: u8) -> SynthImage {
    let latent = class_latent(rng, class);
    SynthImage {
        pixels: render_grating(size, &latent, PIXEL_NOISE, rng),
        size,
        class_id: Some(class),
        latent,
        seed,
        index,
    }
}

/// How class ids are assigned to indices.
#[derive(Clone, Debug, PartialEq)]
pub enum ClassBalance {
    /// Class `index mod 8`.
    Balanced,
    /// Class drawn per index from the given (unnormalised) weights.
    Weighted(Vec<f64>),
}

/// Image `index` of the class-image family.
pub fn class_image(seed: u64, index: u64, size: usize, balance: &ClassBalance) -> SynthImage {
    let mut rng = stream(seed, Stream::ClassImage, index, 0);
    let class = match balance {
        ClassBalance::Balanced => (index % NUM_CLASSES as u64) as u8,
        ClassBalance::Weighted(w) => {
            let total: f64 = w.iter().sum();
            let mut r = rng.random_range(0.0..total);
            let mut k = 0;
            while k + 1 < w.len() && r >= w[k] {
                r -= w[k];
                k += 1;
            }
            k as u8
        }
    };
    class_image_from(&mut rng, seed, index, size, class)
}

fn check_count(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(DataError::Parameter(format!("{what} count must be positive")));
    }
    Ok(())
}

pub fn gen_images(seed: u64, n: usize, size: usize, balance: &ClassBalance) -> Result<Vec<SynthImage>> {
    check_count(n, "image")?;
    if let ClassBalance::Weighted(w) = balance {
        if w.len() != NUM_CLASSES || w.iter().any(|&v| !(v >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
            return Err(DataError::Parameter(format!("need {NUM_CLASSES} non-negative class weights")));
        }
    }
    Ok((0..n as u64).map(|i| class_image(seed, i, size, balance)).collect())
}

/// Image `index` of the unlabeled family: orientation uniform on `[0°, 180°)`
/// and wider brightness, contrast and frequency ranges.
pub fn unlabeled_image(seed: u64, index: u64, size: usize) -> SynthImage {
    let mut rng = stream(seed, Stream::Unlabeled, index, 0);
    let latent = Latent {
        theta_deg: rng.random_range(0.0..180.0),
        freq: rng.random_range(0.06..0.2),
        phase: rng.random_range(0.0..2.0 * PI),
        brightness: rng.random_range(-0.3..0.3),
        contrast: rng.random_range(0.4..0.9),
    };
    SynthImage {
        pixels: render_grating(size, &latent, PIXEL_NOISE, &mut rng),
        size,
        class_id: None,
        latent,
        seed,
        index,
    }
}

pub fn gen_unlabeled(seed: u64, n: usize, size: usize) -> Result<Vec<SynthImage>> {
    check_count(n, "unlabeled image")?;
    Ok((0..n as u64).map(|i| unlabeled_image(seed, i, size)).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthTriplet {
    pub images: [SynthImage; 3],
    pub label: TripletLabel,
}

/// Triplet `index`: classes `a ≠ b`, two images of `a` and one of `b`; the
/// odd image's position is uniform over the three slots.
pub fn triplet(seed: u64, index: u64, size: usize) -> SynthTriplet {
    let mut rng = stream(seed, Stream::Triplet, index, 0);
    let a = rng.random_range(0..NUM_CLASSES as u8);
    let b = (a + rng.random_range(1..NUM_CLASSES as u8)) % NUM_CLASSES as u8;
    let odd = rng.random_range(0..3usize);
    let images = std::array::from_fn(|slot| {
        let class = if slot == odd { b } else { a };
        class_image_from(&mut rng, seed, index, size, class)
    });
    SynthTriplet {
        images,
        label: TripletLabel::new(odd as u8 + 1).expect("label in 1..=3"),
    }
}

pub fn gen_triplets(seed: u64, n: usize, size: usize) -> Result<Vec<SynthTriplet>> {
    check_count(n, "triplet")?;
    Ok((0..n as u64).map(|i| triplet(seed, i, size)).collect())
}

/// Knobs of the audio-visual clip generator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AvParams {
    pub duration_s: f64,
    /// Per-sample SNR of the additive audio noise; `None` for a clean tone.
    pub snr_db: Option<f64>,
    /// Fraction of frames replaced by zeros.
    pub frame_dropout: f64,
    pub frame_size: usize,
}

impl Default for AvParams {
    fn default() -> Self {
        Self {
            duration_s: 30.0,
            snr_db: Some(20.0),
            frame_dropout: 0.1,
            frame_size: 32,
        }
    }
}

pub const WALK_STEP_SIGMA: f64 = 0.05;
/// Moving-average length in trace steps (1 s).
pub const SMOOTH_STEPS: usize = 25;

#[derive(Clone, Debug, PartialEq)]
pub struct AvSample {
    pub seed: u64,
    pub index: u64,
    pub audio: AudioClip,
    /// `(arousal, valence)` per 40 ms step.
    pub trace: Vec<[f32; 2]>,
    /// Grating frequency shared by all frames of the clip.
    pub frame_freq: f64,
    pub frame_dropout: f64,
    pub frame_size: usize,
}

pub fn trace_len(duration_s: f64) -> usize {
    (duration_s * 1000.0 / TRACE_STEP_MS as f64 + 1e-9).floor() as usize
}

fn smoothed_walk(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let step = Normal::new(0.0, WALK_STEP_SIGMA).expect("finite sigma");
    let mut x = rng.random_range(-0.6..0.6);
    let raw: Vec<f64> = (0..n)
        .map(|_| {
            x = (x + step.sample(rng)).clamp(-1.0, 1.0);
            x
        })
        .collect();
    let half = SMOOTH_STEPS / 2;
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(n);
            (raw[lo..hi].iter().sum::<f64>() / (hi - lo) as f64).clamp(-1.0, 1.0)
        })
        .collect()
}

/// Tone pitch for a valence value.
pub fn pitch_hz(valence: f64) -> f64 {
    200.0 + 150.0 * (valence + 1.0)
}

/// Tone amplitude for an arousal value.
pub fn amplitude(arousal: f64) -> f64 {
    0.1 + 0.4 * (arousal + 1.0) / 2.0
}

/// Clip `index` of the audio-visual family.
pub fn av_sample(seed: u64, index: u64, params: &AvParams) -> Result<AvSample> {
    if !(params.duration_s >= 2.0) {
        return Err(DataError::Parameter(format!("clip duration {} s is below 2 s", params.duration_s)));
    }
    if !(0.0..1.0).contains(&params.frame_dropout) {
        return Err(DataError::Parameter("frame dropout must lie in [0, 1)".into()));
    }
    let n = trace_len(params.duration_s);
    let mut rng = stream(seed, Stream::AvTrace, index, 0);
    let arousal = smoothed_walk(&mut rng, n);
    let valence = smoothed_walk(&mut rng, n);
    // f32-representable so the persisted value regenerates identical frames
    let frame_freq = rng.random_range(0.08f32..0.16) as f64;
    let trace: Vec<[f32; 2]> = arousal.iter().zip(&valence).map(|(&a, &v)| [a as f32, v as f32]).collect();

    let mut noise_rng = stream(seed, Stream::AvNoise, index, 0);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let noise_scale = params.snr_db.map(|db| 10f64.powf(-db / 20.0) / 2f64.sqrt());
    let total = n * SAMPLES_PER_STEP;
    let mut phase = 0.0f64;
    let mut samples = Vec::with_capacity(total);
    for j in 0..total {
        // trace value at the sample's position, linear between step centres
        let pos = (j as f64 + 0.5) / SAMPLES_PER_STEP as f64 - 0.5;
        let i0 = pos.floor().max(0.0) as usize;
        let i1 = (i0 + 1).min(n - 1);
        let w = (pos - i0 as f64).clamp(0.0, 1.0);
        let a = arousal[i0] + (arousal[i1] - arousal[i0]) * w;
        let v = valence[i0] + (valence[i1] - valence[i0]) * w;
        phase += 2.0 * PI * pitch_hz(v) / AUDIO_RATE as f64;
        let amp = amplitude(a);
        let mut s = amp * phase.sin();
        if let Some(k) = noise_scale {
            s += k * amp * unit.sample(&mut noise_rng);
        }
        samples.push(s.clamp(-1.0, 1.0) as f32);
    }
    Ok(AvSample {
        seed,
        index,
        audio: AudioClip::new(samples, AUDIO_RATE)?,
        trace,
        frame_freq,
        frame_dropout: params.frame_dropout,
        frame_size: params.frame_size,
    })
}

pub fn gen_av(seed: u64, n_clips: usize, params: &AvParams) -> Result<Vec<AvSample>> {
    check_count(n_clips, "clip")?;
    (0..n_clips as u64).map(|i| av_sample(seed, i, params)).collect()
}

/// Frame orientation for a valence value: `[−1, 1]` ↦ `[0°, 135°]`, leaving a
/// 45° gap so the extremes stay distinguishable under 180° periodicity.
pub fn frame_theta_deg(valence: f64) -> f64 {
    67.5 * (valence + 1.0)
}

/// Frame brightness for an arousal value.
pub fn frame_brightness(arousal: f64) -> f64 {
    0.5 * arousal
}

/// Render one frame of a clip from its trace value. Dropped frames are zero.
pub fn render_frame(
    seed: u64,
    index: u64,
    frame: usize,
    point: [f32; 2],
    frame_freq: f64,
    dropout: f64,
    size: usize,
) -> Vec<f32> {
    let mut rng = stream(seed, Stream::AvFrame, index, frame as u64);
    if rng.random_range(0.0..1.0) < dropout {
        return vec![0.0; 3 * size * size];
    }
    let latent = Latent {
        theta_deg: frame_theta_deg(point[1] as f64),
        freq: frame_freq,
        phase: rng.random_range(0.0..2.0 * PI),
        brightness: frame_brightness(point[0] as f64),
        contrast: 0.5,
    };
    render_grating(size, &latent, PIXEL_NOISE, &mut rng)
}

impl AvSample {
    pub fn n_frames(&self) -> usize {
        self.trace.len()
    }

    /// Pixels of frame `i`, regenerated from the stored trace.
    pub fn frame(&self, i: usize) -> Vec<f32> {
        render_frame(self.seed, self.index, i, self.trace[i], self.frame_freq, self.frame_dropout, self.frame_size)
    }

    /// Frames in `range` as `[n, 3, size, size]`.
    pub fn frames(&self, range: Range<usize>) -> Tensor {
        let n = range.len();
        let mut data = Vec::with_capacity(n * 3 * self.frame_size * self.frame_size);
        for i in range {
            data.extend(self.frame(i));
        }
        Tensor::new(vec![n, 3, self.frame_size, self.frame_size], data).expect("frame tensor")
    }

    /// Mean `(arousal, valence)` over trace steps in `range`.
    pub fn mean_target(&self, range: Range<usize>) -> [f32; 2] {
        let n = range.len() as f64;
        let (mut a, mut v) = (0.0f64, 0.0f64);
        for p in &self.trace[range] {
            a += p[0] as f64;
            v += p[1] as f64;
        }
        [(a / n) as f32, (v / n) as f32]
    }
}

/// Stack images into `[n, 3, size, size]`.
pub fn stack_images<'a>(images: impl IntoIterator<Item = &'a SynthImage>) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    let mut size = 0;
    for img in images {
        size = img.size;
        data.extend_from_slice(&img.pixels);
        n += 1;
    }
    Tensor::new(vec![n, 3, size, size], data).expect("non-empty image stack")
}

#[cfg(test)]
mod tests {
    use super::*;
    use sha2::{Digest, Sha256};

    #[test]
    fn balanced_classes() {
        let imgs = gen_images(7, 800, 32, &ClassBalance::Balanced).unwrap();
        let mut counts = [0; 8];
        for img in &imgs {
            counts[img.class_id.unwrap() as usize] += 1;
        }
        assert_eq!(counts, [100; 8]);
    }

    #[test]
    fn images_are_deterministic_and_bounded() {
        let a = gen_images(7, 20, 32, &ClassBalance::Balanced).unwrap();
        let b = gen_images(7, 20, 32, &ClassBalance::Balanced).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|img| img.pixels.iter().all(|v| v.abs() <= 1.0)));
        assert_ne!(a, gen_images(8, 20, 32, &ClassBalance::Balanced).unwrap());
    }

    #[test]
    fn generation_is_order_independent() {
        let all = gen_images(3, 50, 16, &ClassBalance::Balanced).unwrap();
        assert_eq!(class_image(3, 37, 16, &ClassBalance::Balanced), all[37]);
        let trips = gen_triplets(3, 10, 16).unwrap();
        assert_eq!(triplet(3, 9, 16), trips[9]);
    }

    #[test]
    fn class_bands_are_disjoint() {
        for img in gen_images(1, 400, 8, &ClassBalance::Balanced).unwrap() {
            let k = img.class_id.unwrap() as f64;
            assert!(img.latent.theta_deg >= k * 22.5 && img.latent.theta_deg < k * 22.5 + 11.0);
        }
    }

    #[test]
    fn weighted_balance() {
        let w = vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 3.0];
        let imgs = gen_images(1, 400, 8, &ClassBalance::Weighted(w)).unwrap();
        let sevens = imgs.iter().filter(|i| i.class_id == Some(7)).count();
        assert!(imgs.iter().all(|i| matches!(i.class_id, Some(0) | Some(7))));
        assert!((250..350).contains(&sevens));
    }

    #[test]
    fn zero_count_is_rejected() {
        assert!(gen_images(1, 0, 32, &ClassBalance::Balanced).is_err());
        assert!(gen_triplets(1, 0, 32).is_err());
        assert!(gen_unlabeled(1, 0, 32).is_err());
    }

    #[test]
    fn triplet_labels_mark_the_same_class_pair() {
        for t in gen_triplets(5, 500, 8).unwrap() {
            let (a, b, c) = t.label.positions();
            let cls = |i: usize| t.images[i].class_id.unwrap();
            assert_eq!(cls(a), cls(b));
            assert_ne!(cls(a), cls(c));
        }
    }

    #[test]
    fn triplet_labels_are_uniform() {
        let mut counts = [0f64; 3];
        for t in gen_triplets(11, 3000, 4).unwrap() {
            counts[t.label.get() as usize - 1] += 1.0;
        }
        let chi2: f64 = counts.iter().map(|c| (c - 1000.0).powi(2) / 1000.0).sum();
        // χ² with 2 degrees of freedom, p = 0.01
        assert!(chi2 < 9.21, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn unlabeled_orientation_is_uniform() {
        let imgs = gen_unlabeled(13, 5000, 4).unwrap();
        assert!(imgs.iter().all(|i| i.class_id.is_none()));
        let mut theta: Vec<f64> = imgs.iter().map(|i| i.latent.theta_deg / 180.0).collect();
        theta.sort_by(f64::total_cmp);
        let n = theta.len() as f64;
        let d = theta
            .iter()
            .enumerate()
            .map(|(i, &x)| (x - i as f64 / n).abs().max(((i + 1) as f64 / n - x).abs()))
            .fold(0.0, f64::max);
        // Kolmogorov-Smirnov critical value at α = 0.01
        assert!(d < 1.628 / n.sqrt(), "D = {d}");
        assert_eq!(gen_unlabeled(13, 5, 4).unwrap(), imgs[..5].to_vec());
    }

    #[test]
    fn av_trace_length_and_range() {
        let clip = av_sample(2, 0, &AvParams::default()).unwrap();
        assert_eq!(clip.trace.len(), 750);
        assert_eq!(clip.audio.len(), 30 * 16_000);
        assert!(clip.trace.iter().flatten().all(|v| v.abs() <= 1.0));
        assert!(av_sample(2, 0, &AvParams { duration_s: 1.5, ..AvParams::default() }).is_err());
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        crate::losses::pearson(a, b).unwrap()
    }

    #[test]
    fn clean_rms_tracks_arousal() {
        let params = AvParams { snr_db: None, ..AvParams::default() };
        let mut rms = Vec::new();
        let mut target = Vec::new();
        for i in 0..4 {
            let clip = av_sample(21, i, &params).unwrap();
            for w in 0..30 {
                let s = &clip.audio.samples()[w * 16_000..(w + 1) * 16_000];
                rms.push((s.iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / s.len() as f64).sqrt());
                target.push(clip.mean_target(w * 25..(w + 1) * 25)[0] as f64);
            }
        }
        assert!(pearson(&rms, &target) > 0.9);
    }

    #[test]
    fn noisy_clip_shares_trace_with_clean_clip() {
        let noisy = av_sample(4, 3, &AvParams { duration_s: 2.0, ..AvParams::default() }).unwrap();
        let clean = av_sample(4, 3, &AvParams { duration_s: 2.0, snr_db: None, ..AvParams::default() }).unwrap();
        assert_eq!(noisy.trace, clean.trace);
        assert_ne!(noisy.audio, clean.audio);
    }

    #[test]
    fn frames_regenerate_identically_and_drop_out() {
        let clip = av_sample(9, 1, &AvParams { duration_s: 4.0, ..AvParams::default() }).unwrap();
        let again = av_sample(9, 1, &AvParams { duration_s: 4.0, ..AvParams::default() }).unwrap();
        for i in 0..clip.n_frames() {
            assert_eq!(clip.frame(i), again.frame(i));
        }
        let dropped = (0..clip.n_frames()).filter(|&i| clip.frame(i).iter().all(|&v| v == 0.0)).count();
        assert!(dropped > 0 && dropped < 25, "{dropped} of 100 dropped");
        assert_eq!(clip.frames(10..14).shape(), &[4, 3, 32, 32]);
    }

    #[test]
    fn linear_orientation_energy_classifier_separates_classes() {
        // Oriented-energy features: grating projections at 36 directions
        // (quadrature pairs over a frequency sweep), classified by nearest
        // class mean, which is a linear decision rule.
        let size = 32;
        let features = |img: &SynthImage| -> Vec<f64> {
            let half = (size as f64 - 1.0) / 2.0;
            (0..36)
                .map(|d| {
                    let th = (d as f64 * 5.0).to_radians();
                    let mut e = 0.0;
                    for f in [0.08, 0.1, 0.12, 0.14, 0.16] {
                        let (mut re, mut im) = (0.0, 0.0);
                        for y in 0..size {
                            for x in 0..size {
                                let p = img.pixels[y * size + x] as f64;
                                let arg = 2.0 * PI * f * ((x as f64 - half) * th.cos() + (y as f64 - half) * th.sin());
                                re += p * arg.cos();
                                im += p * arg.sin();
                            }
                        }
                        e += re * re + im * im;
                    }
                    e.sqrt()
                })
                .collect()
        };
        let train = gen_images(31, 240, size, &ClassBalance::Balanced).unwrap();
        let test: Vec<SynthImage> = (240..400).map(|i| class_image(31, i, size, &ClassBalance::Balanced)).collect();
        let mut means = vec![vec![0.0; 36]; 8];
        for img in &train {
            let f = features(img);
            let m = &mut means[img.class_id.unwrap() as usize];
            m.iter_mut().zip(&f).for_each(|(a, b)| *a += b / 30.0);
        }
        let correct = test
            .iter()
            .filter(|img| {
                let f = features(img);
                let dist = |m: &Vec<f64>| m.iter().zip(&f).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
                let best = (0..8).min_by(|&a, &b| dist(&means[a]).total_cmp(&dist(&means[b]))).unwrap();
                best as u8 == img.class_id.unwrap()
            })
            .count();
        assert!(correct as f64 / test.len() as f64 > 0.9, "{correct}/{}", test.len());
    }

    #[test]
    fn index_ranges_give_disjoint_splits() {
        let imgs = gen_images(17, 300, 16, &ClassBalance::Balanced).unwrap();
        let hash = |img: &SynthImage| {
            let mut h = Sha256::new();
            img.pixels.iter().for_each(|v| h.update(v.to_le_bytes()));
            h.finalize().to_vec()
        };
        let ranges = SplitRanges::for_count(300);
        let set = |r: &std::ops::Range<usize>| imgs[r.clone()].iter().map(hash).collect::<std::collections::HashSet<_>>();
        let (a, b, c) = (set(&ranges.train), set(&ranges.val), set(&ranges.test));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(ranges.train.len() + ranges.val.len() + ranges.test.len(), 300);
    }

    proptest::proptest! {
        #[test]
        fn images_are_reproducible_and_in_range(seed in 0u64..1000, index in 0u64..10_000) {
            let a = class_image(seed, index, 8, &ClassBalance::Balanced);
            proptest::prop_assert_eq!(&a, &class_image(seed, index, 8, &ClassBalance::Balanced));
            proptest::prop_assert!(a.pixels.iter().all(|v| (-1.0..=1.0).contains(v)));
            let t = triplet(seed, index, 8);
            proptest::prop_assert!((1..=3).contains(&t.label.get()));
        }
    }
}
