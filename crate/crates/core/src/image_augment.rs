//! Brightness, grid-distortion and crop transforms, and materialisation of
//! an augmented copy of a random fraction of the training split.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::dataset::{DatasetSplit, SamplePair};
use crate::seeding::record_rng;

pub const DEFAULT_FRACTION: f64 = 0.10;
pub const DEFAULT_GRID_CELLS: u32 = 4;

pub const BRIGHTNESS_RANGE: (f64, f64) = (0.1, 0.5);
pub const GRID_RANGE: (f64, f64) = (0.2, 0.8);
pub const CROP_RANGE: (f64, f64) = (0.1, 0.5);

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("pixel buffer holds {got} bytes, expected {expected} for {width}x{height} RGB")]
    BufferSize {
        width: u32,
        height: u32,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("image {width}x{height} is smaller than the {cells}-cell grid")]
    TooSmall { width: u32, height: u32, cells: u32 },
    #[error("crop of {width}x{height} at gamma {gamma} leaves an empty image")]
    EmptyCrop { width: u32, height: u32, gamma: f64 },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        source: image::ImageError,
    },
    #[error("augmented sample id `{0}` already exists")]
    IdCollision(String),
}

impl AugmentError {
    /// Whether the failure came from the filesystem rather than the data.
    pub fn is_io(&self) -> bool {
        matches!(self, AugmentError::Image { source: image::ImageError::IoError(_), .. })
    }
}

/// Row-major 8-bit RGB pixels.
#[derive(Clone, PartialEq, Eq)]
pub struct ImageBuffer {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl fmt::Debug for ImageBuffer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ImageBuffer({}x{})", self.width, self.height)
    }
}

impl ImageBuffer {
    pub fn new(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self, AugmentError> {
        let expected = width as usize * height as usize * 3;
        if width == 0 || height == 0 || pixels.len() != expected {
            return Err(AugmentError::BufferSize {
                width,
                height,
                expected,
                got: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let pixels = rgb
            .iter()
            .copied()
            .cycle()
            .take(width as usize * height as usize * 3)
            .collect();
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(width as usize * height as usize * 3);
        for y in 0..height {
            for x in 0..width {
                pixels.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn channel(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width as usize + x) * 3 + c] as f64
    }

    /// Bilinear sample at a continuous pixel position, clamped to the border.
    fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let max_x = (self.width - 1) as f64;
        let max_y = (self.height - 1) as f64;
        let x = x.clamp(0.0, max_x);
        let y = y.clamp(0.0, max_y);
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as usize, y0 as usize);
        let x1 = (x0 + 1).min(self.width as usize - 1);
        let y1 = (y0 + 1).min(self.height as usize - 1);
        let top = self.channel(x0, y0, c) * (1.0 - fx) + self.channel(x1, y0, c) * fx;
        let bottom = self.channel(x0, y1, c) * (1.0 - fx) + self.channel(x1, y1, c) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    pub fn open(path: &Path) -> Result<Self, AugmentError> {
        let img = image::open(path)
            .map_err(|source| AugmentError::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (width, height) = img.dimensions();
        Ok(Self {
            width,
            height,
            pixels: img.into_raw(),
        })
    }

    /// Writes a PNG regardless of the extension.
    pub fn save_png(&self, path: &Path) -> Result<(), AugmentError> {
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )
        .map_err(|source| AugmentError::Image {
            path: path.to_path_buf(),
            source,
        })
    }
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Scales every sample by `1 + sign·alpha`, rounding and saturating.
pub fn brightness_adjust(img: &ImageBuffer, alpha: f64, sign: i8) -> Result<ImageBuffer, AugmentError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(AugmentError::Parameter(format!("alpha {alpha} outside [0, 1]")));
    }
    let factor = 1.0 + sign.signum() as f64 * alpha;
    Ok(ImageBuffer {
        width: img.width,
        height: img.height,
        pixels: img.pixels.iter().map(|&v| to_u8(v as f64 * factor)).collect(),
    })
}

/// Random grid warp.
///
/// A `(cells+1)²` lattice spans the image with border points pinned; each
/// interior point moves by up to `beta·cell/2` per axis. Every output pixel
/// reads from its own position plus the bilinearly interpolated
/// displacement of its cell corners, using bilinear sampling.
pub fn grid_distort(
    img: &ImageBuffer,
    beta: f64,
    grid_cells: u32,
    seed: u64,
) -> Result<ImageBuffer, AugmentError> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(AugmentError::Parameter(format!("beta {beta} outside [0, 1]")));
    }
    if grid_cells < 2 {
        return Err(AugmentError::Parameter(format!("grid_cells {grid_cells} < 2")));
    }
    if img.width < grid_cells || img.height < grid_cells {
        return Err(AugmentError::TooSmall {
            width: img.width,
            height: img.height,
            cells: grid_cells,
        });
    }

    let n = grid_cells as usize;
    let cell_w = (img.width - 1) as f64 / n as f64;
    let cell_h = (img.height - 1) as f64 / n as f64;
    let bound_x = beta * cell_w / 2.0;
    let bound_y = beta * cell_h / 2.0;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dx = vec![0.0; (n + 1) * (n + 1)];
    let mut dy = vec![0.0; (n + 1) * (n + 1)];
    for j in 1..n {
        for i in 1..n {
            let k = j * (n + 1) + i;
            dx[k] = rng.random_range(-1.0..=1.0) * bound_x;
            dy[k] = rng.random_range(-1.0..=1.0) * bound_y;
        }
    }

    let locate = |p: f64, cell: f64| {
        let idx = ((p / cell).floor() as usize).min(n - 1);
        (idx, p / cell - idx as f64)
    };

    let mut pixels = Vec::with_capacity(img.pixels.len());
    for y in 0..img.height {
        let (j, v) = locate(y as f64, cell_h);
        for x in 0..img.width {
            let (i, u) = locate(x as f64, cell_w);
            let k00 = j * (n + 1) + i;
            let k10 = k00 + 1;
            let k01 = k00 + n + 1;
            let k11 = k01 + 1;
            let lerp2 = |d: &[f64]| {
                (d[k00] * (1.0 - u) + d[k10] * u) * (1.0 - v) + (d[k01] * (1.0 - u) + d[k11] * u) * v
            };
            let sx = x as f64 + lerp2(&dx);
            let sy = y as f64 + lerp2(&dy);
            for c in 0..3 {
                pixels.push(to_u8(img.sample(sx, sy, c)));
            }
        }
    }
    Ok(ImageBuffer {
        width: img.width,
        height: img.height,
        pixels,
    })
}

/// Output size of [`random_crop`]: `round(dim·(1−gamma))` per axis.
pub fn crop_dimensions(width: u32, height: u32, gamma: f64) -> (u32, u32) {
    let keep = 1.0 - gamma;
    (
        (width as f64 * keep).round() as u32,
        (height as f64 * keep).round() as u32,
    )
}

/// Cuts a sub-rectangle at a seeded uniform offset, without resampling.
pub fn random_crop(img: &ImageBuffer, gamma: f64, seed: u64) -> Result<ImageBuffer, AugmentError> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(AugmentError::Parameter(format!("gamma {gamma} outside [0, 1)")));
    }
    let (w, h) = crop_dimensions(img.width, img.height, gamma);
    if w < 1 || h < 1 {
        return Err(AugmentError::EmptyCrop {
            width: img.width,
            height: img.height,
            gamma,
        });
    }
    let (ox, oy) = crop_offset(img.width, img.height, w, h, seed);
    let row = img.width as usize * 3;
    let mut pixels = Vec::with_capacity(w as usize * h as usize * 3);
    for y in oy..oy + h {
        let start = y as usize * row + ox as usize * 3;
        pixels.extend_from_slice(&img.pixels[start..start + w as usize * 3]);
    }
    Ok(ImageBuffer {
        width: w,
        height: h,
        pixels,
    })
}

/// Top-left corner chosen by [`random_crop`] for the given seed.
pub fn crop_offset(width: u32, height: u32, crop_w: u32, crop_h: u32, seed: u64) -> (u32, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ox = rng.random_range(0..=width - crop_w);
    let oy = rng.random_range(0..=height - crop_h);
    (ox, oy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentationKind {
    Brightness,
    Grid,
    Crop,
}

impl AugmentationKind {
    pub const ALL: [AugmentationKind; 3] = [
        AugmentationKind::Brightness,
        AugmentationKind::Grid,
        AugmentationKind::Crop,
    ];

    pub fn parameter_range(self) -> (f64, f64) {
        match self {
            AugmentationKind::Brightness => BRIGHTNESS_RANGE,
            AugmentationKind::Grid => GRID_RANGE,
            AugmentationKind::Crop => CROP_RANGE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    /// alpha, beta or gamma depending on `kind`.
    pub parameter: f64,
    pub seed: u64,
    pub grid_cells: u32,
}

impl AugmentationSpec {
    /// Draws a kind uniformly and its parameter from the kind's range.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let kind = AugmentationKind::ALL[rng.random_range(0..3)];
        let (lo, hi) = kind.parameter_range();
        Self {
            kind,
            parameter: rng.random_range(lo..=hi),
            seed: rng.random(),
            grid_cells: DEFAULT_GRID_CELLS,
        }
    }

    /// Brightness direction is derived from the seed: even brightens.
    pub fn apply(&self, img: &ImageBuffer) -> Result<ImageBuffer, AugmentError> {
        match self.kind {
            AugmentationKind::Brightness => {
                let sign = if self.seed.is_multiple_of(2) { 1 } else { -1 };
                brightness_adjust(img, self.parameter, sign)
            }
            AugmentationKind::Grid => grid_distort(img, self.parameter, self.grid_cells, self.seed),
            AugmentationKind::Crop => random_crop(img, self.parameter, self.seed),
        }
    }
}

/// One selected training sample and the transform it will receive.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationPlan {
    /// Index into the training list.
    pub source: usize,
    pub spec: AugmentationSpec,
}

/// Selects `floor(fraction·|train|)` samples without replacement and draws
/// one transform for each. Selection uses `seed`; each sample's transform
/// uses `seed ⊕ hash(sample_id)`, so it does not depend on processing order.
pub fn plan_subset(
    train: &[SamplePair],
    fraction: f64,
    seed: u64,
) -> Result<Vec<AugmentationPlan>, AugmentError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(AugmentError::Parameter(format!("fraction {fraction} outside (0, 1]")));
    }
    let count = (fraction * train.len() as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = index::sample(&mut rng, train.len(), count).into_vec();
    chosen.sort_unstable();
    Ok(chosen
        .into_iter()
        .map(|source| {
            let mut rng = record_rng(seed, &["augment", &train[source].sample_id]);
            AugmentationPlan {
                source,
                spec: AugmentationSpec::sample(&mut rng),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentOutput {
    pub augmented: Vec<SamplePair>,
    /// Original training samples followed by the augmented ones.
    pub final_train: Vec<SamplePair>,
}

fn augmented_ref(image_ref: &str, ordinal: usize) -> String {
    let path = Path::new(image_ref);
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let name = if ordinal == 0 {
        format!("{stem}-aug.png")
    } else {
        format!("{stem}-aug-{ordinal}.png")
    };
    match path.parent().filter(|p| !p.as_os_str().is_empty()) {
        Some(parent) => format!("{}/{name}", parent.to_string_lossy()),
        None => name,
    }
}

/// Applies [`plan_subset`] to the training split, writing each augmented
/// image as PNG next to its source (`<stem>-aug.png`, resolved against
/// `image_root`). Augmented samples keep every label of their source.
pub fn augment_subset(
    split: &DatasetSplit,
    fraction: f64,
    seed: u64,
    image_root: &Path,
) -> Result<AugmentOutput, AugmentError> {
    let plans = plan_subset(&split.train, fraction, seed)?;

    let existing: HashSet<&str> = split.iter().map(|s| s.sample_id.as_str()).collect();
    let mut ref_counts: HashMap<&str, usize> = HashMap::new();
    let mut jobs = Vec::with_capacity(plans.len());
    for plan in &plans {
        let source = &split.train[plan.source];
        let id = format!("{}-aug", source.sample_id);
        if existing.contains(id.as_str()) {
            return Err(AugmentError::IdCollision(id));
        }
        let ordinal = ref_counts.entry(source.image_ref.as_str()).or_insert(0);
        let new_ref = augmented_ref(&source.image_ref, *ordinal);
        *ordinal += 1;
        jobs.push((plan, source, id, new_ref));
    }

    let augmented = jobs
        .into_par_iter()
        .map(|(plan, source, id, new_ref)| {
            let img = ImageBuffer::open(&image_root.join(&source.image_ref))?;
            let out = plan.spec.apply(&img)?;
            out.save_png(&image_root.join(&new_ref))?;
            log::debug!("{} -> {} ({:?})", source.sample_id, new_ref, plan.spec.kind);

            let mut sample = source.clone();
            sample.sample_id = id;
            sample.image_ref = new_ref;
            sample.extra.insert(
                "augmentation".into(),
                json!({
                    "source_id": source.sample_id,
                    "kind": plan.spec.kind,
                    "parameter": plan.spec.parameter,
                    "seed": plan.spec.seed,
                }),
            );
            Ok(sample)
        })
        .collect::<Result<Vec<_>, AugmentError>>()?;

    let mut final_train = split.train.clone();
    final_train.extend(augmented.iter().cloned());
    Ok(AugmentOutput {
        augmented,
        final_train,
    })
}
