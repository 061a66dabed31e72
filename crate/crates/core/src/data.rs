//! Dataset ingestion: keypoints, image codecs, manifests and pair sampling.
//!
//! Images are held channel-major (`3 × side × side`) in `[-1, 1]`. Keypoints
//! use the 18-joint COCO/OpenPose ordering listed in [`JOINT_NAMES`].

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use image::imageops::FilterType;
use image::{ColorType, DynamicImage, ImageBuffer as RgbBuffer, Rgb};
use posexfer_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_KEYPOINTS: usize = 18;

/// Training and inference resolutions.
pub const LEVELS: [usize; 5] = [64, 128, 256, 512, 1024];

pub const JOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

pub fn check_level(level: usize) -> Result<()> {
    if LEVELS.contains(&level) {
        Ok(())
    } else {
        Err(Error::InvalidLevel(level))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f32,
    pub y: f32,
    pub confidence: f32,
}

impl Keypoint {
    pub const MISSING: Keypoint = Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    };

    /// Joints with zero confidence were not detected.
    pub fn is_present(&self) -> bool {
        self.confidence > 0.0
    }
}

/// 18 body keypoints in pixel coordinates of an `(h, w)` image.
#[derive(Clone, Debug, PartialEq)]
pub struct KeypointSet {
    points: [Keypoint; NUM_KEYPOINTS],
    source_resolution: (usize, usize),
}

impl KeypointSet {
    pub fn new(points: [Keypoint; NUM_KEYPOINTS], source_resolution: (usize, usize)) -> Result<Self> {
        let (h, w) = source_resolution;
        if h == 0 || w == 0 {
            return Err(Error::InvalidKeypoints(format!(
                "source resolution {h}x{w} must be positive"
            )));
        }
        for (k, p) in points.iter().enumerate() {
            if !(p.x.is_finite() && p.y.is_finite() && p.confidence.is_finite()) {
                return Err(Error::InvalidKeypoints(format!(
                    "{} has a non-finite component",
                    JOINT_NAMES[k]
                )));
            }
            if !(0.0..=1.0).contains(&p.confidence) {
                return Err(Error::InvalidKeypoints(format!(
                    "{} confidence {} is outside [0, 1]",
                    JOINT_NAMES[k], p.confidence
                )));
            }
            if p.is_present() && !(p.x >= 0.0 && p.x < w as f32 && p.y >= 0.0 && p.y < h as f32) {
                return Err(Error::InvalidKeypoints(format!(
                    "{} at ({}, {}) lies outside the {h}x{w} image",
                    JOINT_NAMES[k], p.x, p.y
                )));
            }
        }
        Ok(Self {
            points,
            source_resolution,
        })
    }

    /// Builds a set from `[x, y, confidence]` triples.
    pub fn from_triples(triples: &[[f32; 3]], source_resolution: (usize, usize)) -> Result<Self> {
        if triples.len() != NUM_KEYPOINTS {
            return Err(Error::InvalidKeypoints(format!(
                "expected {NUM_KEYPOINTS} keypoints, got {}",
                triples.len()
            )));
        }
        let mut points = [Keypoint::MISSING; NUM_KEYPOINTS];
        for (p, t) in points.iter_mut().zip(triples) {
            *p = Keypoint {
                x: t[0],
                y: t[1],
                confidence: t[2],
            };
        }
        Self::new(points, source_resolution)
    }

    /// Reads a JSON array of 18 `[x, y, confidence]` triples.
    pub fn load(path: &Path, source_resolution: (usize, usize)) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let triples: Vec<[f32; 3]> = serde_json::from_str(&text).map_err(|e| {
            Error::InvalidKeypoints(format!("{}: {e}", path.display()))
        })?;
        Self::from_triples(&triples, source_resolution)
            .map_err(|e| Error::InvalidKeypoints(format!("{}: {e}", path.display())))
    }

    pub fn to_triples(&self) -> Vec<[f32; 3]> {
        self.points.iter().map(|p| [p.x, p.y, p.confidence]).collect()
    }

    pub fn points(&self) -> &[Keypoint; NUM_KEYPOINTS] {
        &self.points
    }

    pub fn get(&self, k: usize) -> Keypoint {
        self.points[k]
    }

    pub fn source_resolution(&self) -> (usize, usize) {
        self.source_resolution
    }

    pub fn num_present(&self) -> usize {
        self.points.iter().filter(|p| p.is_present()).count()
    }

    /// Rescales coordinates per axis to a `(h, w)` grid.
    pub fn scale(&self, target: (usize, usize)) -> Result<Self> {
        let (th, tw) = target;
        if th == 0 || tw == 0 {
            return Err(Error::InvalidKeypoints(format!(
                "target resolution {th}x{tw} must be positive"
            )));
        }
        let (sh, sw) = self.source_resolution;
        let sx = tw as f64 / sw as f64;
        let sy = th as f64 / sh as f64;
        let mut points = self.points;
        for p in points.iter_mut() {
            p.x = scale_coord(p.x, sx, tw);
            p.y = scale_coord(p.y, sy, th);
        }
        Ok(Self {
            points,
            source_resolution: target,
        })
    }
}

/// `v * ratio`, kept strictly below `limit` so in-bounds points stay in bounds.
fn scale_coord(v: f32, ratio: f64, limit: usize) -> f32 {
    let s = (v as f64 * ratio) as f32;
    if s >= limit as f32 && (v as f64) < limit as f64 / ratio {
        f32::from_bits((limit as f32).to_bits() - 1)
    } else {
        s
    }
}

pub fn scale_keypoints(kp: &KeypointSet, target: (usize, usize)) -> Result<KeypointSet> {
    kp.scale(target)
}

/// Square RGB image, channel-major, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    side: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(side: usize, data: Vec<f32>) -> Result<Self> {
        if side == 0 || data.len() != 3 * side * side {
            return Err(Error::InvalidImage(format!(
                "{} values do not form a 3x{side}x{side} image",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(v.is_finite() && (-1.0..=1.0).contains(*v))) {
            return Err(Error::InvalidImage(format!("value {v} is outside [-1, 1]")));
        }
        Ok(Self { side, data })
    }

    pub fn filled(side: usize, value: f32) -> Self {
        assert!((-1.0..=1.0).contains(&value));
        Self {
            side,
            data: vec![value; 3 * side * side],
        }
    }

    /// Wraps sample `n` of a `(batch, 3, s, s)` tensor, clamping into `[-1, 1]`.
    pub fn from_tensor(t: &Tensor<f32>, n: usize) -> Result<Self> {
        let (b, c, h, w) = t.dims4();
        if c != 3 || h != w || n >= b {
            return Err(Error::ShapeMismatch(format!(
                "cannot take image {n} from tensor of shape {:?}",
                t.shape()
            )));
        }
        let per = 3 * h * w;
        let data = t.data()[n * per..(n + 1) * per]
            .iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(-1.0, 1.0) })
            .collect();
        Ok(Self { side: h, data })
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[1, 3, self.side, self.side], self.data.clone())
    }

    pub fn batch(images: &[&ImageBuffer]) -> Result<Tensor<f32>> {
        let side = images
            .first()
            .ok_or_else(|| Error::ShapeMismatch("empty image batch".into()))?
            .side;
        let mut data = Vec::with_capacity(images.len() * 3 * side * side);
        for im in images {
            if im.side != side {
                return Err(Error::ShapeMismatch(format!(
                    "batch mixes {side}px and {}px images",
                    im.side
                )));
            }
            data.extend_from_slice(&im.data);
        }
        Ok(Tensor::from_vec(&[images.len(), 3, side, side], data))
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.side, self.side)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Value at channel `c`, row `y`, column `x`.
    pub fn at(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.side + y) * self.side + x]
    }

    /// Copies the `side × side` window with top-left `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, side: usize) -> Result<Self> {
        if x0 + side > self.side || y0 + side > self.side || side == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {side}px at ({x0}, {y0}) exceeds {}px image",
                self.side
            )));
        }
        let mut data = Vec::with_capacity(3 * side * side);
        for c in 0..3 {
            for y in y0..y0 + side {
                let row = (c * self.side + y) * self.side;
                data.extend_from_slice(&self.data[row + x0..row + x0 + side]);
            }
        }
        Ok(Self { side, data })
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, side: usize) -> Result<Self> {
        if side == 0 || self.side % side != 0 {
            return Err(Error::ShapeMismatch(format!(
                "cannot downsample {}px to {side}px",
                self.side
            )));
        }
        let f = self.side / side;
        let norm = 1.0 / (f * f) as f32;
        let mut data = vec![0.0f32; 3 * side * side];
        for c in 0..3 {
            for y in 0..side {
                for x in 0..side {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += self.at(c, y * f + dy, x * f + dx);
                        }
                    }
                    data[(c * side + y) * side + x] = acc * norm;
                }
            }
        }
        Ok(Self { side, data })
    }

    /// Quantizes to 8-bit RGB; inverse of the decode mapping.
    pub fn to_rgb8(&self) -> RgbBuffer<Rgb<u8>, Vec<u8>> {
        let s = self.side;
        RgbBuffer::from_fn(s as u32, s as u32, |x, y| {
            let px = |c: usize| to_u8(self.at(c, y as usize, x as usize));
            Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8()
            .save_with_format(path, image::ImageFormat::Png)
            .map_err(|e| Error::Encode {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
    }
}

pub fn to_u8(v: f32) -> u8 {
    ((v + 1.0) * 0.5 * 255.0).round().clamp(0.0, 255.0) as u8
}

pub fn from_u8(p: u8) -> f32 {
    p as f32 / 255.0 * 2.0 - 1.0
}

/// Decodes a PNG, resizes it to `level × level` with antialiased bilinear
/// filtering and maps 8-bit values onto `[-1, 1]`.
pub fn decode_image(path: &Path, level: usize) -> Result<ImageBuffer> {
    check_level(level)?;
    decode_image_any(path, level)
}

/// [`decode_image`] without restricting the output side to a training level.
pub fn decode_image_any(path: &Path, side: usize) -> Result<ImageBuffer> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    from_dynamic(img, side, path)
}

fn from_dynamic(img: DynamicImage, side: usize, path: &Path) -> Result<ImageBuffer> {
    match img.color() {
        ColorType::L8 | ColorType::La8 | ColorType::Rgb8 | ColorType::Rgba8 => {}
        other => {
            return Err(Error::UnsupportedBitDepth {
                path: path.to_path_buf(),
                format: format!("{other:?}"),
            })
        }
    }
    let mut rgb = img.to_rgb8();
    if rgb.width() as usize != side || rgb.height() as usize != side {
        rgb = image::imageops::resize(&rgb, side as u32, side as u32, FilterType::Triangle);
    }
    let plane = side * side;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, px) in rgb.pixels().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = from_u8(px[c]);
        }
    }
    Ok(ImageBuffer { side, data })
}

pub fn image_dimensions(path: &Path) -> Result<(usize, usize)> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let (w, h) = image::image_dimensions(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok((h as usize, w as usize))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub subject_id: String,
    pub frame_id: String,
    pub image: PathBuf,
    pub keypoints: PathBuf,
}

/// How `(reference, target)` frame pairs are drawn from each subject.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// Every ordered pair of distinct frames.
    #[default]
    OrderedPairs,
    /// Ordered pairs plus each frame paired with itself.
    WithIdentity,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingPolicy {
    pub kind: PairKind,
    /// Number of passes over all pairs that indices may address; `None` is unbounded.
    pub epochs: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct DatasetManifest {
    pub records: Vec<Record>,
    pub pairing_policy: PairingPolicy,
    /// Record indices per subject, subjects in sorted order.
    subjects: BTreeMap<String, Vec<usize>>,
    /// Flattened ordered pair table, built once.
    pairs: Arc<Vec<(u32, u32)>>,
    perm_cache: Arc<Mutex<Option<(u64, u64, Arc<Vec<u32>>)>>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    subject_id: String,
    frame_id: String,
    image: PathBuf,
    keypoints: PathBuf,
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, PairingPolicy::default())
}

/// Reads a JSON-lines manifest; relative paths resolve against its directory.
pub fn load_manifest_with(path: &Path, policy: PairingPolicy) -> Result<DatasetManifest> {
    let file = fs::File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            path: path.to_path_buf(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        if raw.subject_id.is_empty() || raw.frame_id.is_empty() {
            return Err(Error::MalformedRecord {
                path: path.to_path_buf(),
                line: i + 1,
                reason: "subject_id and frame_id must be non-empty".into(),
            });
        }
        let image = base.join(&raw.image);
        let keypoints = base.join(&raw.keypoints);
        for p in [&image, &keypoints] {
            if !p.is_file() {
                return Err(Error::MissingFile(p.clone()));
            }
        }
        records.push(Record {
            subject_id: raw.subject_id,
            frame_id: raw.frame_id,
            image,
            keypoints,
        });
    }
    if records.is_empty() {
        return Err(Error::EmptyManifest(path.to_path_buf()));
    }
    DatasetManifest::from_records(records, policy)
}

impl DatasetManifest {
    pub fn from_records(records: Vec<Record>, pairing_policy: PairingPolicy) -> Result<Self> {
        let mut subjects: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            subjects.entry(r.subject_id.clone()).or_default().push(i);
        }
        if let Some((s, frames)) = subjects.iter().find(|(_, f)| f.len() < 2) {
            return Err(Error::SingleFrameSubject {
                subject: s.clone(),
                frames: frames.len(),
            });
        }
        let mut pairs = Vec::new();
        for frames in subjects.values() {
            for &a in frames {
                for &b in frames {
                    if a != b || pairing_policy.kind == PairKind::WithIdentity {
                        pairs.push((a as u32, b as u32));
                    }
                }
            }
        }
        Ok(Self {
            records,
            pairing_policy,
            subjects,
            pairs: Arc::new(pairs),
            perm_cache: Arc::new(Mutex::new(None)),
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_subjects(&self) -> usize {
        self.subjects.len()
    }

    pub fn subjects(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.subjects.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Pairs per epoch.
    pub fn pairs_per_epoch(&self) -> u64 {
        self.pairs.len() as u64
    }

    /// All ordered pairs in canonical (unshuffled) order.
    pub fn all_pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }

    /// `(reference, target)` record indices for a sample index.
    ///
    /// Each epoch visits every pair once in a seeded random order.
    pub fn pair_indices(&self, seed: u64, index: u64) -> Result<(usize, usize)> {
        let per = self.pairs_per_epoch();
        if let Some(epochs) = self.pairing_policy.epochs {
            let limit = epochs.saturating_mul(per);
            if index >= limit {
                return Err(Error::IndexOutOfRange { index, limit });
            }
        }
        let epoch = index / per;
        let perm = self.epoch_permutation(seed, epoch);
        let (a, b) = self.pairs[perm[(index % per) as usize] as usize];
        Ok((a as usize, b as usize))
    }

    fn epoch_permutation(&self, seed: u64, epoch: u64) -> Arc<Vec<u32>> {
        let mut cache = self.perm_cache.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((s, e, p)) = cache.as_ref() {
            if *s == seed && *e == epoch {
                return p.clone();
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(epoch);
        let mut perm: Vec<u32> = (0..self.pairs.len() as u32).collect();
        perm.shuffle(&mut rng);
        let perm = Arc::new(perm);
        *cache = Some((seed, epoch, perm.clone()));
        perm
    }

    pub fn load_keypoints(&self, record: usize) -> Result<KeypointSet> {
        let r = &self.records[record];
        let res = image_dimensions(&r.image)?;
        KeypointSet::load(&r.keypoints, res)
    }

    /// Decodes a record's image and keypoints at `level`.
    pub fn load_frame(&self, record: usize, level: usize) -> Result<(ImageBuffer, KeypointSet)> {
        let r = &self.records[record];
        let img = decode_image(&r.image, level)?;
        let kp = self.load_keypoints(record)?.scale((level, level))?;
        Ok((img, kp))
    }
}

#[derive(Clone, Debug)]
pub struct SamplePair {
    pub reference: ImageBuffer,
    pub target: ImageBuffer,
    /// Target keypoints in `level × level` pixel coordinates.
    pub target_keypoints: KeypointSet,
    pub subject_id: String,
    pub reference_frame: String,
    pub target_frame: String,
}

/// Draws and decodes pair `index` of the seeded sampling order at `level`.
pub fn sample_pair(manifest: &DatasetManifest, seed: u64, index: u64, level: usize) -> Result<SamplePair> {
    let (a, b) = manifest.pair_indices(seed, index)?;
    let (reference, _) = manifest.load_frame(a, level)?;
    let (target, target_keypoints) = manifest.load_frame(b, level)?;
    Ok(SamplePair {
        reference,
        target,
        target_keypoints,
        subject_id: manifest.records[a].subject_id.clone(),
        reference_frame: manifest.records[a].frame_id.clone(),
        target_frame: manifest.records[b].frame_id.clone(),
    })
}
