//! MNIST ingestion, reduction to 10×10 images of five digit classes, and
//! seeded batch iteration.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::seed;

pub const RAW_SIDE: usize = 28;
pub const RAW_PIXELS: usize = RAW_SIDE * RAW_SIDE;
pub const SIDE: usize = 10;
pub const PIXELS: usize = SIDE * SIDE;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Retained digit classes, in one-hot order.
pub const DEFAULT_CLASSES: [u8; 5] = [0, 1, 4, 6, 7];

pub const EXPECTED_TRAIN: usize = 30690;
pub const EXPECTED_TEST: usize = 5083;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("truncated header in {0}")]
    TruncatedHeader(String),
    #[error("bad magic number in {file}: expected {expected:#010x}, found {found:#010x}")]
    BadMagic {
        file: String,
        expected: u32,
        found: u32,
    },
    #[error("unsupported image dimensions {rows}x{cols} (expected 28x28)")]
    Dimensions { rows: u32, cols: u32 },
    #[error("truncated payload in {file}: header declares {declared} bytes, found {found}")]
    TruncatedPayload {
        file: String,
        declared: usize,
        found: usize,
    },
    #[error("count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },
    #[error("invalid class list: {0}")]
    Classes(String),
    #[error("malformed dataset cache: {0}")]
    Cache(String),
}

/// A 28×28 grayscale MNIST digit.
#[derive(Clone, PartialEq, Eq)]
pub struct RawImage {
    pub pixels: Box<[u8; RAW_PIXELS]>,
}

impl fmt::Debug for RawImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("RawImage").finish_non_exhaustive()
    }
}

impl RawImage {
    pub fn from_fn(mut f: impl FnMut(usize, usize) -> u8) -> Self {
        let mut pixels = Box::new([0u8; RAW_PIXELS]);
        for r in 0..RAW_SIDE {
            for c in 0..RAW_SIDE {
                pixels[r * RAW_SIDE + c] = f(r, c);
            }
        }
        Self { pixels }
    }

    fn at(&self, r: isize, c: isize) -> f64 {
        let r = r.clamp(0, RAW_SIDE as isize - 1) as usize;
        let c = c.clamp(0, RAW_SIDE as isize - 1) as usize;
        f64::from(self.pixels[r * RAW_SIDE + c])
    }
}

/// Ordered set of retained digits; position in the set is the class index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassSet(Vec<u8>);

impl Default for ClassSet {
    fn default() -> Self {
        Self(DEFAULT_CLASSES.to_vec())
    }
}

impl ClassSet {
    pub fn new(mut digits: Vec<u8>) -> Result<Self, DatasetError> {
        digits.sort_unstable();
        digits.dedup();
        if digits.is_empty() {
            return Err(DatasetError::Classes("empty".into()));
        }
        if let Some(d) = digits.iter().find(|d| **d > 9) {
            return Err(DatasetError::Classes(format!("digit {d} out of range")));
        }
        Ok(Self(digits))
    }

    pub fn parse(list: &str) -> Result<Self, DatasetError> {
        let digits = list
            .split(',')
            .map(|s| {
                s.trim()
                    .parse::<u8>()
                    .map_err(|_| DatasetError::Classes(format!("not a digit: {s:?}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(digits)
    }

    pub fn digits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn index_of(&self, digit: u8) -> Option<usize> {
        self.0.iter().position(|d| *d == digit)
    }

    pub fn digit(&self, class: usize) -> u8 {
        self.0[class]
    }
}

/// A reduced, normalized 10×10 image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub pixels: [f32; PIXELS],
    /// Original MNIST digit.
    pub digit: u8,
    /// Index of `digit` in the class set (one-hot position).
    pub class: usize,
}

impl Image {
    pub fn input(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| f64::from(*p)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<Image>,
    pub test: Vec<Image>,
    pub classes: ClassSet,
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX3 image file and an IDX1 label file held in memory.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Vec<(RawImage, u8)>, DatasetError> {
    if images.len() < 16 {
        return Err(DatasetError::TruncatedHeader("images".into()));
    }
    if labels.len() < 8 {
        return Err(DatasetError::TruncatedHeader("labels".into()));
    }
    let magic = be_u32(images, 0);
    if magic != IMAGES_MAGIC {
        return Err(DatasetError::BadMagic {
            file: "images".into(),
            expected: IMAGES_MAGIC,
            found: magic,
        });
    }
    let magic = be_u32(labels, 0);
    if magic != LABELS_MAGIC {
        return Err(DatasetError::BadMagic {
            file: "labels".into(),
            expected: LABELS_MAGIC,
            found: magic,
        });
    }
    let n_images = be_u32(images, 4) as usize;
    let (rows, cols) = (be_u32(images, 8), be_u32(images, 12));
    if rows as usize != RAW_SIDE || cols as usize != RAW_SIDE {
        return Err(DatasetError::Dimensions { rows, cols });
    }
    let n_labels = be_u32(labels, 4) as usize;
    if n_images != n_labels {
        return Err(DatasetError::CountMismatch {
            images: n_images,
            labels: n_labels,
        });
    }
    let declared = n_images * RAW_PIXELS;
    if images.len() - 16 < declared {
        return Err(DatasetError::TruncatedPayload {
            file: "images".into(),
            declared,
            found: images.len() - 16,
        });
    }
    if labels.len() - 8 < n_labels {
        return Err(DatasetError::TruncatedPayload {
            file: "labels".into(),
            declared: n_labels,
            found: labels.len() - 8,
        });
    }
    let records = images[16..16 + declared]
        .chunks_exact(RAW_PIXELS)
        .zip(&labels[8..8 + n_labels])
        .map(|(px, &label)| {
            let pixels: Box<[u8; RAW_PIXELS]> = Box::new(px.try_into().unwrap());
            (RawImage { pixels }, label)
        })
        .collect();
    Ok(records)
}

fn read_file(path: &Path) -> Result<Vec<u8>, DatasetError> {
    std::fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_idx(
    images_path: &Path,
    labels_path: &Path,
) -> Result<Vec<(RawImage, u8)>, DatasetError> {
    let images = read_file(images_path)?;
    let labels = read_file(labels_path)?;
    parse_idx(&images, &labels).map_err(|e| match e {
        DatasetError::TruncatedHeader(which) => DatasetError::TruncatedHeader(format!(
            "{} ({which})",
            if which == "images" {
                images_path
            } else {
                labels_path
            }
            .display()
        )),
        other => other,
    })
}

/// Labelled raw images as read from an IDX pair.
pub type Records = Vec<(RawImage, u8)>;

/// Loads the standard train and test IDX files from `dir`.
pub fn load_mnist_dir(dir: &Path) -> Result<(Records, Records), DatasetError> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS))?;
    let test = load_idx(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS))?;
    Ok((train, test))
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn cubic_kernel(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// Downscales 28×28 → 10×10 with bicubic interpolation at half-pixel-centered
/// source coordinates, clamping indices at the border. Output is in grayscale
/// units, clamped to [0, 255].
pub fn downscale_bicubic(img: &RawImage) -> [f64; PIXELS] {
    let scale = RAW_SIDE as f64 / SIDE as f64;
    let mut out = [0.0; PIXELS];
    for i in 0..SIDE {
        let sy = (i as f64 + 0.5) * scale - 0.5;
        let fy = sy.floor();
        for j in 0..SIDE {
            let sx = (j as f64 + 0.5) * scale - 0.5;
            let fx = sx.floor();
            let mut acc = 0.0;
            for m in -1..=2 {
                let wy = cubic_kernel(sy - (fy + m as f64));
                let mut row = 0.0;
                for n in -1..=2 {
                    let wx = cubic_kernel(sx - (fx + n as f64));
                    row += wx * img.at(fy as isize + m, fx as isize + n);
                }
                acc += wy * row;
            }
            out[i * SIDE + j] = acc.clamp(0.0, 255.0);
        }
    }
    out
}

fn to_image(raw: &RawImage, digit: u8, class: usize) -> Image {
    let grey = downscale_bicubic(raw);
    let mut pixels = [0f32; PIXELS];
    for (p, g) in pixels.iter_mut().zip(grey) {
        *p = (g / 255.0) as f32;
    }
    Image {
        pixels,
        digit,
        class,
    }
}

/// Keeps only images of the retained classes, downscaled and normalized.
pub fn reduce_records(records: &[(RawImage, u8)], classes: &ClassSet) -> Vec<Image> {
    records
        .iter()
        .filter_map(|(raw, digit)| classes.index_of(*digit).map(|c| to_image(raw, *digit, c)))
        .collect()
}

pub fn reduce(
    train: &[(RawImage, u8)],
    test: &[(RawImage, u8)],
    classes: &ClassSet,
) -> DatasetSplit {
    DatasetSplit {
        train: reduce_records(train, classes),
        test: reduce_records(test, classes),
        classes: classes.clone(),
    }
}

/// Re-applies the class filter to already reduced images.
pub fn refilter(images: &[Image], classes: &ClassSet) -> Vec<Image> {
    images
        .iter()
        .filter_map(|img| {
            classes.index_of(img.digit).map(|class| Image {
                class,
                ..img.clone()
            })
        })
        .collect()
}

/// Infinite sequence of index batches; each epoch is an independent seeded
/// permutation, and the last batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchIndices {
    len: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchIndices {
    pub fn new(len: usize, batch_size: usize, seed: u64) -> Self {
        assert!(batch_size >= 1, "batch size must be at least 1");
        let mut b = Self {
            len,
            batch_size,
            seed,
            epoch: 0,
            order: Vec::new(),
            pos: 0,
        };
        b.shuffle();
        b
    }

    fn shuffle(&mut self) {
        self.order = (0..self.len).collect();
        let mut rng = seed::rng(seed::derive_index(self.seed, self.epoch));
        self.order.shuffle(&mut rng);
        self.pos = 0;
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchIndices {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.len == 0 {
            return None;
        }
        if self.pos >= self.len {
            self.epoch += 1;
            self.shuffle();
        }
        let end = (self.pos + self.batch_size).min(self.len);
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(batch)
    }
}

/// Batches of training images; see [`BatchIndices`].
pub fn batches(
    split: &DatasetSplit,
    batch_size: usize,
    seed: u64,
) -> impl Iterator<Item = Vec<&Image>> {
    BatchIndices::new(split.train.len(), batch_size, seed)
        .map(move |idx| idx.into_iter().map(|i| &split.train[i]).collect())
}

const CACHE_MAGIC: &[u8; 4] = b"RDMN";
const CACHE_VERSION: u32 = 1;

/// Serializes a split as: magic `RDMN`, then little-endian u32 header
/// `{version, n_train, n_test, rows, cols, n_classes}`, the class digits as
/// bytes, then for train and test in turn the row-major f32 pixels followed
/// by one digit byte per image.
pub fn cache_to_bytes(split: &DatasetSplit) -> Vec<u8> {
    let mut out =
        Vec::with_capacity(32 + (split.train.len() + split.test.len()) * (PIXELS * 4 + 1));
    out.extend_from_slice(CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        split.train.len() as u32,
        split.test.len() as u32,
        SIDE as u32,
        SIDE as u32,
        split.classes.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(split.classes.digits());
    for part in [&split.train, &split.test] {
        for img in part.iter() {
            for p in img.pixels {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        out.extend(part.iter().map(|img| img.digit));
    }
    out
}

pub fn cache_from_bytes(bytes: &[u8]) -> Result<DatasetSplit, DatasetError> {
    let bad = |m: &str| DatasetError::Cache(m.to_string());
    if bytes.len() < 28 || &bytes[..4] != CACHE_MAGIC {
        return Err(bad("bad magic or short header"));
    }
    let word =
        |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    if word(0) != CACHE_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let (n_train, n_test, rows, cols, n_classes) = (word(1), word(2), word(3), word(4), word(5));
    if rows * cols != PIXELS {
        return Err(bad("unsupported dimensions"));
    }
    let mut pos = 28;
    let classes = ClassSet::new(
        bytes
            .get(pos..pos + n_classes)
            .ok_or_else(|| bad("truncated class list"))?
            .to_vec(),
    )?;
    pos += n_classes;
    let mut read_part = |n: usize| -> Result<Vec<Image>, DatasetError> {
        let px_len = n * PIXELS * 4;
        let px = bytes
            .get(pos..pos + px_len)
            .ok_or_else(|| bad("truncated pixels"))?;
        let labels = bytes
            .get(pos + px_len..pos + px_len + n)
            .ok_or_else(|| bad("truncated labels"))?;
        pos += px_len + n;
        px.chunks_exact(PIXELS * 4)
            .zip(labels)
            .map(|(chunk, &digit)| {
                let mut pixels = [0f32; PIXELS];
                for (p, b) in pixels.iter_mut().zip(chunk.chunks_exact(4)) {
                    *p = f32::from_le_bytes(b.try_into().unwrap());
                }
                let class = classes
                    .index_of(digit)
                    .ok_or_else(|| bad("label outside class set"))?;
                Ok(Image {
                    pixels,
                    digit,
                    class,
                })
            })
            .collect()
    };
    let train = read_part(n_train)?;
    let test = read_part(n_test)?;
    if pos != bytes.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(DatasetSplit {
        train,
        test,
        classes,
    })
}

pub fn write_cache(split: &DatasetSplit, path: &Path) -> Result<(), DatasetError> {
    std::fs::write(path, cache_to_bytes(split)).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_cache(path: &Path) -> Result<DatasetSplit, DatasetError> {
    cache_from_bytes(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(n: u32, px: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [IMAGES_MAGIC, n, 28, 28] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(px);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for w in [LABELS_MAGIC, labels.len() as u32] {
            v.extend_from_slice(&w.to_be_bytes());
        }
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_well_formed_pair() {
        let px: Vec<u8> = (0..2 * RAW_PIXELS).map(|i| (i % 256) as u8).collect();
        let recs = parse_idx(&idx_images(2, &px), &idx_labels(&[3, 7])).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].1, 7);
        assert_eq!(recs[1].0.pixels[0], (RAW_PIXELS % 256) as u8);
    }

    #[test]
    fn empty_file_is_truncated_header() {
        let err = parse_idx(&[], &idx_labels(&[1])).unwrap_err();
        assert!(matches!(err, DatasetError::TruncatedHeader(_)), "{err}");
        assert!(err.to_string().contains("truncated header"));
    }

    #[test]
    fn count_mismatch_is_reported() {
        let px = vec![0u8; 10 * RAW_PIXELS];
        let err = parse_idx(&idx_images(10, &px), &idx_labels(&[0; 9])).unwrap_err();
        assert!(matches!(
            err,
            DatasetError::CountMismatch {
                images: 10,
                labels: 9
            }
        ));
        assert!(err.to_string().contains("count mismatch"));
    }

    #[test]
    fn bad_magic_and_truncated_payload_are_distinct() {
        let mut imgs = idx_images(1, &[0u8; RAW_PIXELS]);
        imgs[3] = 0x01;
        assert!(matches!(
            parse_idx(&imgs, &idx_labels(&[0])),
            Err(DatasetError::BadMagic { found: 0x0801, .. })
        ));
        let short = idx_images(2, &[0u8; RAW_PIXELS]);
        assert!(matches!(
            parse_idx(&short, &idx_labels(&[0, 1])),
            Err(DatasetError::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn kernel_partitions_unity() {
        for k in 0..=10 {
            let t = k as f64 / 10.0;
            let s: f64 = (-1..=2).map(|m| cubic_kernel(t - m as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(cubic_kernel(0.0), 1.0);
        assert_eq!(cubic_kernel(1.0), 0.0);
        assert_eq!(cubic_kernel(2.0), 0.0);
    }

    #[test]
    fn constant_image_stays_constant() {
        let out = downscale_bicubic(&RawImage::from_fn(|_, _| 128));
        assert!(out.iter().all(|v| (v - 128.0).abs() < 1e-9));
    }

    #[test]
    fn linear_ramp_is_reproduced_away_from_borders() {
        // pixel = 9 * column; the closed-form interpolant at source x is 9 * x.
        let out = downscale_bicubic(&RawImage::from_fn(|_, c| (9 * c) as u8));
        let scale = RAW_SIDE as f64 / SIDE as f64;
        for i in 0..SIDE {
            for j in 1..SIDE - 1 {
                let sx = (j as f64 + 0.5) * scale - 0.5;
                assert!((out[i * SIDE + j] - 9.0 * sx).abs() < 1.0, "({i},{j})");
            }
        }
    }

    #[test]
    fn reduce_keeps_only_retained_classes() {
        let classes = ClassSet::default();
        let blank = RawImage::from_fn(|_, _| 0);
        let others: Vec<_> = [2u8, 3, 5, 8, 9]
            .iter()
            .map(|d| (blank.clone(), *d))
            .collect();
        assert!(reduce_records(&others, &classes).is_empty());
        let zero = reduce_records(&[(RawImage::from_fn(|r, _| (r * 9) as u8), 0)], &classes);
        assert_eq!(zero.len(), 1);
        assert_eq!((zero[0].digit, zero[0].class), (0, 0));
        assert!(zero[0].pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        assert_eq!(refilter(&zero, &classes), zero);
    }

    #[test]
    fn class_set_orders_and_validates() {
        let c = ClassSet::parse("7, 0,1").unwrap();
        assert_eq!(c.digits(), &[0, 1, 7]);
        assert_eq!(c.index_of(7), Some(2));
        assert!(ClassSet::parse("").is_err());
        assert!(ClassSet::parse("12").is_err());
        assert_eq!(ClassSet::default().index_of(4), Some(2));
    }

    #[test]
    fn batches_partition_each_epoch() {
        let sizes: Vec<usize> = BatchIndices::new(5, 2, 1)
            .take(3)
            .map(|b| b.len())
            .collect();
        assert_eq!(sizes, vec![2, 2, 1]);
        let mut epoch: Vec<usize> = BatchIndices::new(5, 2, 1).take(3).flatten().collect();
        epoch.sort_unstable();
        assert_eq!(epoch, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn batches_are_seed_deterministic() {
        let a: Vec<_> = BatchIndices::new(1000, 7, 42).take(400).collect();
        let b: Vec<_> = BatchIndices::new(1000, 7, 42).take(400).collect();
        assert_eq!(a, b);
        let c: Vec<_> = BatchIndices::new(30690, 100, 43).take(1).collect();
        let d: Vec<_> = BatchIndices::new(30690, 100, 42).take(1).collect();
        assert_ne!(c, d);
    }

    #[test]
    fn cache_round_trip_and_rejects_corruption() {
        let classes = ClassSet::default();
        let recs: Vec<_> = (0..4u8)
            .map(|k| {
                (
                    RawImage::from_fn(|r, c| ((r * 7 + c * 3 + k as usize) % 256) as u8),
                    [0, 1, 4, 7][k as usize],
                )
            })
            .collect();
        let split = reduce(&recs[..3], &recs[3..], &classes);
        let bytes = cache_to_bytes(&split);
        assert_eq!(cache_from_bytes(&bytes).unwrap(), split);
        assert!(cache_from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(cache_from_bytes(b"XXXX").is_err());
    }
}
