//! On-disk dataset layout.
//!
//! ```text
//! <root>/manifest.json
//! <root>/images/{train,val,test}.aver    pixels [n,3,H,W], labels [n]
//! <root>/images/unlabeled.aver           pixels [n,3,H,W]
//! <root>/triplets/{train,val,test}.aver  first/second/third [n,3,H,W], labels [n]
//! <root>/av/clip_NNNNN.wav               16 kHz PCM16 mono
//! <root>/av/traces.aver                  trace [n,T,2], frame_freq [n]
//! ```
//!
//! Frames are not stored: they regenerate from `(seed, index, trace)`.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    av_sample, class_image, triplet, unlabeled_image, AvParams, AvSample, ClassBalance, DataError, Result,
    GENERATOR_VERSION,
};
use crate::checkpoint::Checkpoint;
use crate::dsp::{read_wav, write_wav, AudioClip};
use crate::losses::TripletLabel;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "dev" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(DataError::Parameter(format!("unknown split {s:?}, expected train, val or test"))),
        }
    }
}

/// Index ranges of the 70/15/15 split.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRanges {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitRanges {
    pub fn for_count(n: usize) -> Self {
        let a = n * 70 / 100;
        let b = n * 85 / 100;
        Self { train: 0..a, val: a..b, test: b..n }
    }

    pub fn get(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub seed: u64,
    pub image_size: usize,
    pub n_images: usize,
    pub n_triplets: usize,
    pub n_unlabeled: usize,
    pub n_av: usize,
    pub av: AvParams,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            image_size: 32,
            n_images: 4000,
            n_triplets: 3000,
            n_unlabeled: 2000,
            n_av: 100,
            av: AvParams::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyInfo {
    pub count: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub splits: Option<SplitRanges>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub unlabeled: Option<usize>,
    /// SHA-256 of every file of the family, keyed by path relative to the root.
    pub files: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvFamily {
    #[serde(flatten)]
    pub info: FamilyInfo,
    pub duration_s: f64,
    pub snr_db: Option<f64>,
    pub frame_dropout: f64,
    pub trace_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub generator_version: u32,
    pub seed: u64,
    pub image_size: usize,
    /// Family name to its record; `av` maps to `null` when no clips were made.
    pub families: BTreeMap<String, serde_json::Value>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|source| DataError::Io { path: path.clone(), source })?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
        if m.generator_version != GENERATOR_VERSION {
            return Err(DataError::Manifest(format!(
                "dataset was made by generator version {}, this build is version {GENERATOR_VERSION}",
                m.generator_version
            )));
        }
        Ok(m)
    }

    fn family<T: for<'de> Deserialize<'de>>(&self, name: &str) -> Result<T> {
        match self.families.get(name) {
            Some(v) if !v.is_null() => {
                serde_json::from_value(v.clone()).map_err(|e| DataError::Manifest(format!("family {name}: {e}")))
            }
            _ => Err(DataError::Manifest(format!("dataset has no {name} family"))),
        }
    }

    pub fn images(&self) -> Result<FamilyInfo> {
        self.family("images")
    }

    pub fn triplets(&self) -> Result<FamilyInfo> {
        self.family("triplets")
    }

    pub fn av(&self) -> Result<AvFamily> {
        self.family("av")
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io { path: path.to_path_buf(), source }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(io_err(path))
}

fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn save(root: &Path, rel: &str, ck: &Checkpoint, files: &mut BTreeMap<String, String>) -> Result<()> {
    let path = root.join(rel);
    ck.save(&path)?;
    files.insert(rel.to_string(), hash_file(&path)?);
    Ok(())
}

fn pixels(images: impl Iterator<Item = Vec<f32>>, size: usize) -> Tensor {
    let mut data = Vec::new();
    let mut n = 0;
    for p in images {
        data.extend(p);
        n += 1;
    }
    Tensor::new(vec![n, 3, size, size], data).expect("pixel stack")
}

fn labels(values: impl Iterator<Item = f32>) -> Tensor {
    Tensor::from_vec(values.collect())
}

/// Generate every family of `spec` under `root`.
///
/// `root` must be absent or empty unless `force`, in which case the existing
/// family directories and manifest are replaced.
pub fn write_dataset(root: &Path, spec: &DatasetSpec, force: bool) -> Result<Manifest> {
    if spec.n_images == 0 || spec.n_triplets == 0 || spec.n_unlabeled == 0 {
        return Err(DataError::Parameter("image, triplet and unlabeled counts must be positive".into()));
    }
    if spec.image_size < 8 {
        return Err(DataError::Parameter(format!("image size {} is below 8", spec.image_size)));
    }
    if root.exists() {
        let non_empty = std::fs::read_dir(root).map_err(io_err(root))?.next().is_some();
        if non_empty && !force {
            return Err(DataError::NotEmpty(root.to_path_buf()));
        }
        for sub in ["images", "triplets", "av"] {
            let p = root.join(sub);
            if p.exists() {
                std::fs::remove_dir_all(&p).map_err(io_err(&p))?;
            }
        }
    }
    create_dir(&root.join("images"))?;
    create_dir(&root.join("triplets"))?;
    let (seed, size) = (spec.seed, spec.image_size);
    let mut families = BTreeMap::new();
    let mut notes = Vec::new();

    let ranges = SplitRanges::for_count(spec.n_images);
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        let imgs: Vec<_> = ranges.get(split).map(|i| class_image(seed, i as u64, size, &ClassBalance::Balanced)).collect();
        let mut ck = Checkpoint::new();
        ck.push_tensor("labels", labels(imgs.iter().map(|i| i.class_id.expect("labelled") as f32)));
        ck.push_tensor("pixels", pixels(imgs.into_iter().map(|i| i.pixels), size));
        save(root, &format!("images/{split}.aver"), &ck, &mut files)?;
    }
    let mut ck = Checkpoint::new();
    ck.push_tensor("pixels", pixels((0..spec.n_unlabeled as u64).map(|i| unlabeled_image(seed, i, size).pixels), size));
    save(root, "images/unlabeled.aver", &ck, &mut files)?;
    let info = FamilyInfo { count: spec.n_images, splits: Some(ranges), unlabeled: Some(spec.n_unlabeled), files };
    families.insert("images".to_string(), serde_json::to_value(info).expect("serializable"));

    let ranges = SplitRanges::for_count(spec.n_triplets);
    let mut files = BTreeMap::new();
    for split in Split::ALL {
        let trips: Vec<_> = ranges.get(split).map(|i| triplet(seed, i as u64, size)).collect();
        let mut ck = Checkpoint::new();
        ck.push_tensor("labels", labels(trips.iter().map(|t| t.label.get() as f32)));
        for (slot, name) in ["first", "second", "third"].into_iter().enumerate() {
            ck.push_tensor(name, pixels(trips.iter().map(|t| t.images[slot].pixels.clone()), size));
        }
        save(root, &format!("triplets/{split}.aver"), &ck, &mut files)?;
    }
    let info = FamilyInfo { count: spec.n_triplets, splits: Some(ranges), unlabeled: None, files };
    families.insert("triplets".to_string(), serde_json::to_value(info).expect("serializable"));

    if spec.n_av == 0 {
        families.insert("av".to_string(), serde_json::Value::Null);
        notes.push("av family absent: 0 clips requested".to_string());
    } else {
        let params = AvParams { frame_size: size, ..spec.av };
        create_dir(&root.join("av"))?;
        let mut files = BTreeMap::new();
        let mut traces = Vec::new();
        let mut freqs = Vec::new();
        let mut t_len = 0;
        for i in 0..spec.n_av {
            let clip = av_sample(seed, i as u64, &params)?;
            let rel = format!("av/clip_{i:05}.wav");
            let path = root.join(&rel);
            write_wav(&clip.audio, &path)?;
            files.insert(rel, hash_file(&path)?);
            t_len = clip.trace.len();
            traces.extend(clip.trace.iter().flatten().copied());
            freqs.push(clip.frame_freq as f32);
        }
        let mut ck = Checkpoint::new();
        ck.push_tensor("trace", Tensor::new(vec![spec.n_av, t_len, 2], traces).expect("trace stack"));
        ck.push_tensor("frame_freq", Tensor::from_vec(freqs));
        save(root, "av/traces.aver", &ck, &mut files)?;
        let fam = AvFamily {
            info: FamilyInfo { count: spec.n_av, splits: Some(SplitRanges::for_count(spec.n_av)), unlabeled: None, files },
            duration_s: params.duration_s,
            snr_db: params.snr_db,
            frame_dropout: params.frame_dropout,
            trace_len: t_len,
        };
        families.insert("av".to_string(), serde_json::to_value(fam).expect("serializable"));
    }

    let manifest = Manifest { generator_version: GENERATOR_VERSION, seed, image_size: size, families, notes };
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).expect("serializable") + "\n";
    std::fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

/// Labelled images of one split.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    /// `[n, 3, H, W]`
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TripletSet {
    /// Slot-wise `[n, 3, H, W]`.
    pub images: [Tensor; 3],
    pub labels: Vec<TripletLabel>,
}

impl TripletSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

fn load_shard(root: &Path, rel: &str) -> Result<Checkpoint> {
    Ok(Checkpoint::load(&root.join(rel))?)
}

fn shard_tensor(ck: &Checkpoint, name: &str) -> Result<Tensor> {
    Ok(ck.tensor(name)?.clone())
}

fn int_labels(t: &Tensor, max: usize, what: &str) -> Result<Vec<usize>> {
    t.data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) <= max {
                Ok(v as usize)
            } else {
                Err(DataError::Manifest(format!("invalid {what} label {v}")))
            }
        })
        .collect()
}

pub fn load_image_split(root: &Path, split: Split) -> Result<ImageSet> {
    Manifest::load(root)?.images()?;
    let ck = load_shard(root, &format!("images/{split}.aver"))?;
    let labels = int_labels(ck.tensor("labels")?, super::NUM_CLASSES - 1, "class")?;
    let images = shard_tensor(&ck, "pixels")?;
    if images.shape().first() != Some(&labels.len()) {
        return Err(DataError::Manifest(format!("images/{split}.aver: pixel and label counts differ")));
    }
    Ok(ImageSet { images, labels })
}

pub fn load_unlabeled(root: &Path) -> Result<Tensor> {
    Manifest::load(root)?.images()?;
    shard_tensor(&load_shard(root, "images/unlabeled.aver")?, "pixels")
}

pub fn load_triplet_split(root: &Path, split: Split) -> Result<TripletSet> {
    Manifest::load(root)?.triplets()?;
    let ck = load_shard(root, &format!("triplets/{split}.aver"))?;
    let labels = int_labels(ck.tensor("labels")?, 3, "triplet")?
        .into_iter()
        .map(|v| TripletLabel::new(v as u8).map_err(|e| DataError::Manifest(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let images = [shard_tensor(&ck, "first")?, shard_tensor(&ck, "second")?, shard_tensor(&ck, "third")?];
    if images.iter().any(|t| t.shape().first() != Some(&labels.len())) {
        return Err(DataError::Manifest(format!("triplets/{split}.aver: slot and label counts differ")));
    }
    Ok(TripletSet { images, labels })
}

/// Path of clip `index`'s audio.
pub fn clip_path(root: &Path, index: usize) -> PathBuf {
    root.join(format!("av/clip_{index:05}.wav"))
}

/// Clips of one split with audio read back from disk (PCM16-quantised).
pub fn load_av_split(root: &Path, split: Split) -> Result<Vec<AvSample>> {
    let manifest = Manifest::load(root)?;
    let fam = manifest.av()?;
    let ck = load_shard(root, "av/traces.aver")?;
    let trace = ck.tensor("trace")?;
    let freq = ck.tensor("frame_freq")?;
    if trace.shape() != [fam.info.count, fam.trace_len, 2] || freq.len() != fam.info.count {
        return Err(DataError::Manifest("av/traces.aver does not match the manifest".into()));
    }
    let ranges = fam.info.splits.clone().ok_or_else(|| DataError::Manifest("av family has no split ranges".into()))?;
    ranges
        .get(split)
        .map(|i| {
            let audio: AudioClip = read_wav(&clip_path(root, i))?;
            let rows = &trace.data()[i * fam.trace_len * 2..(i + 1) * fam.trace_len * 2];
            Ok(AvSample {
                seed: manifest.seed,
                index: i as u64,
                audio,
                trace: rows.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
                frame_freq: freq.data()[i] as f64,
                frame_dropout: fam.frame_dropout,
                frame_size: manifest.image_size,
            })
        })
        .collect()
}
