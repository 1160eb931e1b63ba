//! Dataset ingestion and preprocessing: CIFAR-10 binary batches, IDX
//! image/label files, per-image normalization, balanced subsetting, bilinear
//! or nearest downsampling, and deterministic synthetic generators for
//! property tests.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::input::InputSet;
use crate::tensor::SpatialShape;

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3 * 32 * 32 pixel bytes
const CIFAR_PIXELS: usize = 3072;

/// Raw images with class labels, channel-major pixel storage.
#[derive(Debug, Clone)]
pub struct RawDataset {
    /// One `channels * height * width` vector per image.
    pub images: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl RawDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn spatial_shape(&self) -> SpatialShape {
        if self.height == 1 {
            SpatialShape::OneD(self.width)
        } else {
            SpatialShape::TwoD(self.height, self.width)
        }
    }

    /// View as an input set without touching pixel values.
    pub fn to_input_set(&self) -> Result<InputSet> {
        InputSet::new(
            self.images.clone(),
            (0..self.len() as u64).collect(),
            self.channels,
            self.spatial_shape(),
        )
    }

    fn validate(&self) -> Result<()> {
        let want = self.channels * self.height * self.width;
        for (i, img) in self.images.iter().enumerate() {
            if img.len() != want {
                return Err(Error::Dataset(format!(
                    "image {i} has {} values, expected {want}",
                    img.len()
                )));
            }
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::Dataset(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        if self.labels.len() != self.images.len() {
            return Err(Error::Dataset("label/image count mismatch".into()));
        }
        Ok(())
    }
}

/// Loads CIFAR-10 binary batches: each 3073-byte record is one label byte
/// followed by 3072 channel-major pixel bytes (3 x 32 x 32).
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<RawDataset> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in paths {
        let bytes = fs::read(path.as_ref())?;
        if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
            return Err(Error::Dataset(format!(
                "{}: {} bytes is not a multiple of the {CIFAR_RECORD}-byte record",
                path.as_ref().display(),
                bytes.len()
            )));
        }
        for record in bytes.chunks_exact(CIFAR_RECORD) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(Error::Dataset(format!(
                    "{}: label byte {label} exceeds 9",
                    path.as_ref().display()
                )));
            }
            labels.push(label);
            images.push(record[1..=CIFAR_PIXELS].iter().map(|&b| b as f64).collect());
        }
    }
    let ds = RawDataset {
        images,
        labels,
        n_classes: 10,
        channels: 3,
        height: 32,
        width: 32,
    };
    ds.validate()?;
    Ok(ds)
}

fn read_u32_be(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Dataset("idx file truncated".into()))
}

/// Loads an IDX image/label file pair (plain, not gzipped). Images may be
/// unsigned bytes (dtype 0x08) or 64-bit floats (0x0E), with 3 dims
/// `(n, h, w)` or 4 dims `(n, c, h, w)`; labels are unsigned bytes, 1 dim.
pub fn load_idx(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<RawDataset> {
    let img = fs::read(images_path.as_ref())?;
    let magic = read_u32_be(&img, 0)?;
    let dtype = (magic >> 8) & 0xff;
    let ndims = (magic & 0xff) as usize;
    if magic >> 16 != 0 || !(ndims == 3 || ndims == 4) || !(dtype == 0x08 || dtype == 0x0e) {
        return Err(Error::Dataset(format!(
            "{}: unsupported idx magic {magic:#010x}",
            images_path.as_ref().display()
        )));
    }
    let mut dims = Vec::with_capacity(ndims);
    for i in 0..ndims {
        dims.push(read_u32_be(&img, 4 + 4 * i)? as usize);
    }
    let (n, channels, height, width) = if ndims == 3 {
        (dims[0], 1, dims[1], dims[2])
    } else {
        (dims[0], dims[1], dims[2], dims[3])
    };
    let per_image = channels * height * width;
    let header = 4 + 4 * ndims;
    let elem = if dtype == 0x08 { 1 } else { 8 };
    if img.len() != header + n * per_image * elem {
        return Err(Error::Dataset(format!(
            "{}: size {} disagrees with header {n} x {per_image} x {elem}",
            images_path.as_ref().display(),
            img.len()
        )));
    }
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let start = header + i * per_image * elem;
        let image: Vec<f64> = if dtype == 0x08 {
            img[start..start + per_image]
                .iter()
                .map(|&b| b as f64)
                .collect()
        } else {
            img[start..start + per_image * 8]
                .chunks_exact(8)
                .map(|c| f64::from_be_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
                .collect()
        };
        images.push(image);
    }

    let lab = fs::read(labels_path.as_ref())?;
    let lmagic = read_u32_be(&lab, 0)?;
    if lmagic != 0x0000_0801 {
        return Err(Error::Dataset(format!(
            "{}: unsupported idx label magic {lmagic:#010x}",
            labels_path.as_ref().display()
        )));
    }
    let ln = read_u32_be(&lab, 4)? as usize;
    if ln != n || lab.len() != 8 + ln {
        return Err(Error::Dataset(format!(
            "{}: {ln} labels for {n} images",
            labels_path.as_ref().display()
        )));
    }
    let labels: Vec<usize> = lab[8..].iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let ds = RawDataset {
        images,
        labels,
        n_classes,
        channels,
        height,
        width,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes a dataset as an IDX pair: float64 images (4 dims when multichannel)
/// and unsigned-byte labels.
pub fn write_idx(
    ds: &RawDataset,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    ds.validate()?;
    if ds.n_classes > 256 {
        return Err(Error::Dataset(
            "idx labels are single bytes; 256 classes max".into(),
        ));
    }
    let mut img = Vec::new();
    if ds.channels == 1 {
        img.extend_from_slice(&0x0000_0e03u32.to_be_bytes());
        for dim in [ds.len(), ds.height, ds.width] {
            img.extend_from_slice(&(dim as u32).to_be_bytes());
        }
    } else {
        img.extend_from_slice(&0x0000_0e04u32.to_be_bytes());
        for dim in [ds.len(), ds.channels, ds.height, ds.width] {
            img.extend_from_slice(&(dim as u32).to_be_bytes());
        }
    }
    for image in &ds.images {
        for &v in image {
            img.extend_from_slice(&v.to_be_bytes());
        }
    }
    let mut f = fs::File::create(images_path.as_ref())?;
    f.write_all(&img)?;

    let mut lab = Vec::new();
    lab.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    lab.extend_from_slice(&(ds.len() as u32).to_be_bytes());
    lab.extend(ds.labels.iter().map(|&l| l as u8));
    let mut f = fs::File::create(labels_path.as_ref())?;
    f.write_all(&lab)?;
    Ok(())
}

/// Normalizes every image to zero mean and unit variance over all channels
/// and pixels jointly, placing it on the sphere of radius `sqrt(total dims)`.
/// Constant images cannot be normalized.
pub fn normalize(ds: &RawDataset) -> Result<InputSet> {
    let mut samples = Vec::with_capacity(ds.len());
    for (i, img) in ds.images.iter().enumerate() {
        let n = img.len() as f64;
        let mean = img.iter().sum::<f64>() / n;
        let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        if var == 0.0 {
            return Err(Error::Dataset(format!(
                "image {i} is constant and cannot be normalized"
            )));
        }
        let std = var.sqrt();
        samples.push(img.iter().map(|v| (v - mean) / std).collect());
    }
    InputSet::new(
        samples,
        (0..ds.len() as u64).collect(),
        ds.channels,
        ds.spatial_shape(),
    )
}

/// Draws `per_class` samples of every class without replacement,
/// deterministically in the seed.
pub fn balanced_subset(ds: &RawDataset, per_class: usize, seed: u64) -> Result<RawDataset> {
    let mut picked = Vec::new();
    for class in 0..ds.n_classes {
        let mut members: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == class).collect();
        if members.len() < per_class {
            return Err(Error::Dataset(format!(
                "class {class} has {} samples, need {per_class}",
                members.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(class as u64);
        members.shuffle(&mut rng);
        picked.extend(members.into_iter().take(per_class));
    }
    Ok(RawDataset {
        images: picked.iter().map(|&i| ds.images[i].clone()).collect(),
        labels: picked.iter().map(|&i| ds.labels[i]).collect(),
        n_classes: ds.n_classes,
        channels: ds.channels,
        height: ds.height,
        width: ds.width,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DownsampleMethod {
    Bilinear,
    Nearest,
}

/// Source coordinate of output index `i` under the align-corners-false
/// convention: pixel centers at `(i + 0.5) * scale - 0.5`.
fn source_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

/// Downsamples every image to `target_h x target_w`. Bilinear interpolation
/// and nearest-neighbor share the align-corners-false coordinate map;
/// `target = source` is lossless for both.
pub fn downsample(
    ds: &RawDataset,
    target_h: usize,
    target_w: usize,
    method: DownsampleMethod,
) -> Result<RawDataset> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::Dataset("downsample target must be nonzero".into()));
    }
    if target_h > ds.height || target_w > ds.width {
        return Err(Error::Dataset(format!(
            "target {target_h}x{target_w} exceeds source {}x{}",
            ds.height, ds.width
        )));
    }
    let scale_h = ds.height as f64 / target_h as f64;
    let scale_w = ds.width as f64 / target_w as f64;
    let clamp = |v: f64, hi: usize| -> usize { (v.max(0.0) as usize).min(hi - 1) };
    let mut images = Vec::with_capacity(ds.len());
    for img in &ds.images {
        let mut out = vec![0.0; ds.channels * target_h * target_w];
        for c in 0..ds.channels {
            let plane = &img[c * ds.height * ds.width..(c + 1) * ds.height * ds.width];
            for r in 0..target_h {
                for col in 0..target_w {
                    let sr = source_coord(r, scale_h);
                    let sc = source_coord(col, scale_w);
                    let v = match method {
                        DownsampleMethod::Nearest => {
                            let rr = clamp(sr.floor(), ds.height);
                            let cc = clamp(sc.floor(), ds.width);
                            plane[rr * ds.width + cc]
                        }
                        DownsampleMethod::Bilinear => {
                            let r0 = clamp(sr.floor(), ds.height);
                            let c0 = clamp(sc.floor(), ds.width);
                            let r1 = (r0 + 1).min(ds.height - 1);
                            let c1 = (c0 + 1).min(ds.width - 1);
                            let fr = (sr - r0 as f64).clamp(0.0, 1.0);
                            let fc = (sc - c0 as f64).clamp(0.0, 1.0);
                            let top = plane[r0 * ds.width + c0] * (1.0 - fc)
                                + plane[r0 * ds.width + c1] * fc;
                            let bottom = plane[r1 * ds.width + c0] * (1.0 - fc)
                                + plane[r1 * ds.width + c1] * fc;
                            top * (1.0 - fr) + bottom * fr
                        }
                    };
                    out[c * target_h * target_w + r * target_w + col] = v;
                }
            }
        }
        images.push(out);
    }
    Ok(RawDataset {
        images,
        labels: ds.labels.clone(),
        n_classes: ds.n_classes,
        channels: ds.channels,
        height: target_h,
        width: target_w,
    })
}

/// Synthetic dataset specifications.
#[derive(Debug, Clone, PartialEq)]
pub enum SynthSpec {
    /// Per-class Gaussian template plus per-sample noise; balanced labels.
    Blobs {
        classes: usize,
        per_class: usize,
        channels: usize,
        height: usize,
        width: usize,
        noise: f64,
    },
    /// Circular shifts of random base images; the label is the orbit index.
    ShiftFamily {
        bases: usize,
        shifts: usize,
        channels: usize,
        width: usize,
    },
}

/// Deterministic synthetic data for invariance and pipeline tests.
pub fn synth_dataset(spec: &SynthSpec, seed: u64) -> Result<RawDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *spec {
        SynthSpec::Blobs {
            classes,
            per_class,
            channels,
            height,
            width,
            noise,
        } => {
            if classes == 0 || per_class == 0 {
                return Err(Error::Dataset(
                    "blob spec needs classes and per_class >= 1".into(),
                ));
            }
            let dims = channels * height * width;
            let templates: Vec<Vec<f64>> = (0..classes)
                .map(|_| {
                    (0..dims)
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect()
                })
                .collect();
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for (class, template) in templates.iter().enumerate() {
                for _ in 0..per_class {
                    let img: Vec<f64> = template
                        .iter()
                        .map(|&t| t + noise * rng.sample::<f64, _>(StandardNormal))
                        .collect();
                    images.push(img);
                    labels.push(class);
                }
            }
            Ok(RawDataset {
                images,
                labels,
                n_classes: classes,
                channels,
                height,
                width,
            })
        }
        SynthSpec::ShiftFamily {
            bases,
            shifts,
            channels,
            width,
        } => {
            if bases == 0 || shifts == 0 || shifts > width {
                return Err(Error::Dataset(
                    "shift family needs bases >= 1 and 1 <= shifts <= width".into(),
                ));
            }
            let mut images = Vec::new();
            let mut labels = Vec::new();
            for base_idx in 0..bases {
                let base: Vec<f64> = (0..channels * width)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                for s in 0..shifts {
                    images.push(crate::input::shift_sample(
                        &base,
                        channels,
                        SpatialShape::OneD(width),
                        s,
                    ));
                    labels.push(base_idx);
                }
            }
            Ok(RawDataset {
                images,
                labels,
                n_classes: bases,
                channels,
                height: 1,
                width,
            })
        }
    }
}
