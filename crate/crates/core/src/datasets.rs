//! Toy manifolds and IDX image ingestion.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::Tensor;
use crate::config::{DatasetFamily, ExperimentConfig};
use crate::error::{Error, Result};
use crate::rng::SeedTree;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Noise standard deviations, as fractions of the radius, used in the toy experiments.
pub const NOISE_LEVELS: [f64; 4] = [0.01, 0.05, 0.07, 0.10];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ToyFamily {
    OneMoon,
    Circle,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToySpec {
    pub family: ToyFamily,
    pub n: usize,
    /// Noise standard deviation as a fraction of the radius.
    pub noise_frac: f64,
    pub radius: f64,
    pub seed: u64,
}

/// Points (r cos t, r sin t) plus isotropic Gaussian noise; t ∈ [0, 2π) for the
/// circle and [0, π) for the one-moon (upper semicircle).
pub fn gen_toy(spec: &ToySpec) -> Result<Tensor> {
    if spec.n == 0 || !(spec.noise_frac >= 0.0) || !(spec.radius > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid toy spec {spec:?}")));
    }
    let mut rng = SeedTree::new(spec.seed).child("toy").rng();
    let span = match spec.family {
        ToyFamily::OneMoon => std::f64::consts::PI,
        ToyFamily::Circle => 2.0 * std::f64::consts::PI,
    };
    let sd = spec.noise_frac * spec.radius;
    let mut data = Vec::with_capacity(2 * spec.n);
    for _ in 0..spec.n {
        let t = rng.random::<f64>() * span;
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        data.push(spec.radius * t.cos() + sd * nx);
        data.push(spec.radius * t.sin() + sd * ny);
    }
    Tensor::new(vec![spec.n, 2], data)
}

/// Images as rows of `[0, 1]` intensities.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    pub images: Tensor,
    pub labels: Option<Vec<u8>>,
    pub height: usize,
    pub width: usize,
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.images.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> ImageSet {
        ImageSet {
            images: self.images.select_rows(idx),
            labels: self
                .labels
                .as_ref()
                .map(|l| idx.iter().map(|&i| l[i]).collect()),
            height: self.height,
            width: self.width,
        }
    }
}

fn format_err(offset: usize, detail: String) -> Error {
    Error::Format {
        what: "IDX file",
        offset: offset as u64,
        detail,
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| {
            format_err(
                at,
                format!(
                    "truncated header: need 4 bytes at offset {at}, file has {}",
                    bytes.len()
                ),
            )
        })
}

/// Parses an unsigned-byte IDX tensor, returning (dims, payload).
fn parse_idx(bytes: &[u8], magic: u32) -> Result<(Vec<usize>, &[u8])> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return Err(format_err(
            0,
            format!("bad magic: expected 0x{magic:08x}, found 0x{found:08x}"),
        ));
    }
    let rank = (magic & 0xff) as usize;
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let d = be_u32(bytes, 4 + 4 * i)? as usize;
        if d == 0 {
            return Err(format_err(4 + 4 * i, format!("dimension {i} is zero")));
        }
        dims.push(d);
    }
    let header = 4 + 4 * rank;
    let len = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| format_err(4, "dimension product overflows".into()))?;
    let have = bytes.len() - header.min(bytes.len());
    if have < len {
        return Err(format_err(
            bytes.len(),
            format!("truncated payload: header promises {len} bytes, found {have}"),
        ));
    }
    if have > len {
        return Err(format_err(
            header + len,
            format!("{} unexpected trailing bytes", have - len),
        ));
    }
    Ok((dims, &bytes[header..]))
}

/// Parses IDX image bytes (magic 0x00000803) into `[N, H·W]` values scaled by 1/255.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(Tensor, usize, usize)> {
    let (dims, payload) = parse_idx(bytes, IDX_IMAGES_MAGIC)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let data = payload.iter().map(|&p| p as f64 / 255.0).collect();
    Ok((Tensor::new(vec![n, h * w], data)?, h, w))
}

/// Parses IDX label bytes (magic 0x00000801).
pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, payload) = parse_idx(bytes, IDX_LABELS_MAGIC)?;
    Ok(payload.to_vec())
}

/// Reads an image file and optional label file; gzip input is detected by its header.
pub fn load_idx(images: &Path, labels: Option<&Path>) -> Result<ImageSet> {
    let bytes = read_maybe_gz(images)?;
    let (images_t, height, width) = parse_idx_images(&bytes).map_err(|e| with_path(e, images))?;
    let labels = match labels {
        None => None,
        Some(p) => {
            let l = parse_idx_labels(&read_maybe_gz(p)?).map_err(|e| with_path(e, p))?;
            if l.len() != images_t.rows() {
                return Err(Error::InvalidArgument(format!(
                    "{} has {} labels for {} images",
                    p.display(),
                    l.len(),
                    images_t.rows()
                )));
            }
            Some(l)
        }
    };
    Ok(ImageSet {
        images: images_t,
        labels,
        height,
        width,
    })
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { offset, detail, .. } => Error::Format {
            what: "IDX file",
            offset,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    }
}

/// Serializes raw pixel bytes as an IDX image tensor.
pub fn idx_image_bytes(pixels: &[u8], n: usize, height: usize, width: usize) -> Result<Vec<u8>> {
    if pixels.len() != n * height * width {
        return Err(Error::InvalidArgument(format!(
            "{} pixels for {n} images of {height}x{width}",
            pixels.len()
        )));
    }
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IDX_IMAGES_MAGIC, n as u32, height as u32, width as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn idx_label_bytes(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Writes bytes, gzip-compressed when the path ends in `.gz`.
pub fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let res = if path.extension().is_some_and(|e| e == "gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut f = file;
        f.write_all(bytes)
    };
    res.map_err(|e| Error::io(path, e))
}

/// Quantizes `[0, 1]` intensities back to bytes.
pub fn to_pixel_bytes(images: &Tensor) -> Vec<u8> {
    images
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

/// Seeded subsample without replacement, stratified by label when labels exist.
pub fn subsample(set: &ImageSet, n: usize, seed: u64) -> Result<ImageSet> {
    Ok(set.select(&subsample_indices(set, n, seed)?))
}

/// Splits into a stratified subsample of `n` and the remaining rows, in file order.
pub fn split_off(set: &ImageSet, n: usize, seed: u64) -> Result<(ImageSet, ImageSet)> {
    let chosen = subsample_indices(set, n, seed)?;
    let mut taken = vec![false; set.len()];
    for &i in &chosen {
        taken[i] = true;
    }
    let rest: Vec<usize> = (0..set.len()).filter(|&i| !taken[i]).collect();
    Ok((set.select(&chosen), set.select(&rest)))
}

fn subsample_indices(set: &ImageSet, n: usize, seed: u64) -> Result<Vec<usize>> {
    let total = set.len();
    if n > total {
        return Err(Error::InvalidArgument(format!(
            "cannot take {n} of {total} samples"
        )));
    }
    let mut rng = SeedTree::new(seed).child("subsample").rng();
    let mut chosen = match &set.labels {
        None => {
            let mut idx: Vec<usize> = (0..total).collect();
            idx.shuffle(&mut rng);
            idx.truncate(n);
            idx
        }
        Some(labels) => {
            let mut classes: Vec<u8> = labels.clone();
            classes.sort_unstable();
            classes.dedup();
            let mut pools: Vec<Vec<usize>> = classes
                .iter()
                .map(|&c| (0..total).filter(|&i| labels[i] == c).collect())
                .collect();
            for p in &mut pools {
                p.shuffle(&mut rng);
            }
            // equal quotas, the remainder going to a random subset of classes
            let k = classes.len();
            let mut quota = vec![n / k; k];
            let mut order: Vec<usize> = (0..k).collect();
            order.shuffle(&mut rng);
            for &c in order.iter().take(n % k) {
                quota[c] += 1;
            }
            // classes too small to fill their quota hand the shortfall to the others
            loop {
                let short: usize = (0..k)
                    .map(|c| quota[c].saturating_sub(pools[c].len()))
                    .sum();
                if short == 0 {
                    break;
                }
                for c in 0..k {
                    quota[c] = quota[c].min(pools[c].len());
                }
                let mut left = short;
                for &c in order.iter().cycle().take(k * n.max(1)) {
                    if left == 0 {
                        break;
                    }
                    if quota[c] < pools[c].len() {
                        quota[c] += 1;
                        left -= 1;
                    }
                }
            }
            let mut idx = Vec::with_capacity(n);
            for c in 0..k {
                idx.extend_from_slice(&pools[c][..quota[c]]);
            }
            idx
        }
    };
    chosen.shuffle(&mut rng);
    Ok(chosen)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Seed for generating or subsampling one split, derived from the training seed.
pub fn split_seed(cfg: &ExperimentConfig, split: Split) -> u64 {
    use rand::RngCore;
    SeedTree::new(cfg.train.seed)
        .child("data")
        .child(split.name())
        .rng()
        .next_u64()
}

/// A toy split as configured.
pub fn toy_split(cfg: &ExperimentConfig, split: Split) -> Result<Tensor> {
    let d = &cfg.dataset;
    let family = match d.name {
        DatasetFamily::OneMoon => ToyFamily::OneMoon,
        DatasetFamily::Circle => ToyFamily::Circle,
        other => {
            return Err(Error::InvalidArgument(format!(
                "{other} is not a toy dataset"
            )))
        }
    };
    let n = match split {
        Split::Train => d.n_train,
        Split::Test => d.n_test,
    };
    gen_toy(&ToySpec {
        family,
        n,
        noise_frac: d.noise_frac,
        radius: d.radius,
        seed: split_seed(cfg, split),
    })
}

/// An image split: the configured IDX files, subsampled to the configured size.
pub fn image_split(cfg: &ExperimentConfig, split: Split) -> Result<ImageSet> {
    let d = &cfg.dataset;
    let family = d.name;
    let (h, w) = family
        .image_shape()
        .ok_or_else(|| Error::InvalidArgument(format!("{family} is not an image dataset")))?;
    let (images, labels, n) = match split {
        Split::Train => (&d.train_images, &d.train_labels, d.n_train),
        Split::Test => (&d.test_images, &d.test_labels, d.n_test),
    };
    let images = images.as_deref().ok_or_else(|| {
        Error::Config(vec![format!(
            "dataset.{}_images is required for {family}",
            split.name()
        )])
    })?;
    let set = load_idx(images, labels.as_deref())?;
    if (set.height, set.width) != (h, w) {
        return Err(Error::InvalidArgument(format!(
            "{}: images are {}x{}, dataset {family} expects {h}x{w}",
            images.display(),
            set.height,
            set.width
        )));
    }
    let n = n.min(set.len());
    subsample(&set, n, split_seed(cfg, split))
}

/// Rows of one split as configured.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Tensor> {
    if cfg.dataset.name.is_toy() {
        toy_split(cfg, split)
    } else {
        Ok(image_split(cfg, split)?.images)
    }
}

/// Train and test matrices for an experiment.
pub fn load_experiment_data(cfg: &ExperimentConfig) -> Result<(Tensor, Tensor)> {
    Ok((
        load_split(cfg, Split::Train)?,
        load_split(cfg, Split::Test)?,
    ))
}
