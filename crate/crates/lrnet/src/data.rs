//! Dataset plumbing: binary PGM I/O, the on-disk manifest, synthetic scene
//! generation, and the crop/flip/rotate/contrast sampling transforms.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// One image/label pair: a single-channel intensity map in [0,1] and a
/// strictly binary mask of the same extents, both stored as [1,1,H,W].
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: Tensor<f32>,
    pub mask: Tensor<f32>,
}

impl Sample {
    pub fn new(image: Tensor<f32>, mask: Tensor<f32>) -> Result<Self> {
        if image.shape() != mask.shape() {
            return Err(Error::Data(format!(
                "image extents {:?} do not match mask extents {:?}",
                image.shape(),
                mask.shape()
            )));
        }
        if image.n() != 1 || image.c() != 1 {
            return Err(Error::Data(format!(
                "a sample holds one single-channel map, got shape {:?}",
                image.shape()
            )));
        }
        if !mask.data().iter().all(|&v| v == 0.0 || v == 1.0) {
            return Err(Error::Data("mask is not binary".into()));
        }
        Ok(Sample { image, mask })
    }

    pub fn h(&self) -> usize {
        self.image.h()
    }

    pub fn w(&self) -> usize {
        self.image.w()
    }
}

/// Which side of the 4:1 dataset split an indexed sample belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split label {other:?}"))),
        }
    }
}

/// 4:1 split by index: every fifth sample (index 4, 9, 14, …) is held out.
pub fn split_of(index: usize) -> Split {
    if index % 5 == 4 {
        Split::Test
    } else {
        Split::Train
    }
}

// ---------------------------------------------------------------------------
// Binary PGM (P5) I/O
// ---------------------------------------------------------------------------

struct PgmScanner<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> PgmScanner<'a> {
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Option<&'a [u8]> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn int(&mut self, what: &str) -> Result<usize> {
        let tok = self.token().ok_or_else(|| Error::Data(format!("missing PGM {what}")))?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("invalid PGM {what}")))
    }
}

/// Read an 8-bit binary PGM as `(h, w, raster)`, row-major.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut sc = PgmScanner { bytes: &bytes, pos: 0 };
    let err = |msg: String| Error::Data(format!("{}: {msg}", path.display()));
    match sc.token() {
        Some(b"P5") => {}
        _ => return Err(err("not a binary PGM (P5) file".into())),
    }
    let w = sc.int("width").map_err(|e| err(e.to_string()))?;
    let h = sc.int("height").map_err(|e| err(e.to_string()))?;
    let maxval = sc.int("maxval").map_err(|e| err(e.to_string()))?;
    if maxval != 255 {
        return Err(err(format!("only 8-bit PGM is supported, got maxval {maxval}")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if !sc.bytes.get(sc.pos).is_some_and(|b| b.is_ascii_whitespace()) {
        return Err(err("missing separator before raster".into()));
    }
    sc.pos += 1;
    let len = h.checked_mul(w).ok_or_else(|| err("extent overflow".into()))?;
    let raster = &bytes[sc.pos..];
    if raster.len() < len {
        return Err(err(format!("raster holds {} bytes, expected {len}", raster.len())));
    }
    Ok((h, w, raster[..len].to_vec()))
}

/// Write an 8-bit binary PGM with the given row-major raster.
pub fn write_pgm(path: &Path, h: usize, w: usize, raster: &[u8]) -> Result<()> {
    debug_assert_eq!(raster.len(), h * w);
    let mut out = Vec::with_capacity(raster.len() + 32);
    out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
    out.extend_from_slice(raster);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Read a grayscale image as intensities in [0,1].
pub fn read_image_pgm(path: &Path) -> Result<Tensor<f32>> {
    let (h, w, raster) = read_pgm(path)?;
    let data = raster.iter().map(|&b| f32::from(b) / 255.0).collect();
    Tensor::from_vec([1, 1, h, w], data)
}

/// Write intensities in [0,1] as a grayscale image (values quantized to
/// round(v·255), clamped).
pub fn write_image_pgm(path: &Path, image: &Tensor<f32>) -> Result<()> {
    let raster: Vec<u8> =
        image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    write_pgm(path, image.h(), image.w(), &raster)
}

/// Read a binary mask; pixel values must be exactly 0 or 255.
pub fn read_mask_pgm(path: &Path) -> Result<Tensor<f32>> {
    let (h, w, raster) = read_pgm(path)?;
    let mut data = Vec::with_capacity(raster.len());
    for &b in &raster {
        match b {
            0 => data.push(0.0),
            255 => data.push(1.0),
            other => {
                return Err(Error::Data(format!(
                    "{}: mask value {other} is neither 0 nor 255",
                    path.display()
                )))
            }
        }
    }
    Tensor::from_vec([1, 1, h, w], data)
}

/// Write a {0,1} mask as a {0,255} PGM.
pub fn write_mask_pgm(path: &Path, mask: &Tensor<f32>) -> Result<()> {
    let mut raster = Vec::with_capacity(mask.len());
    for &v in mask.data() {
        if v == 0.0 {
            raster.push(0u8);
        } else if v == 1.0 {
            raster.push(255u8);
        } else {
            return Err(Error::Data(format!("mask value {v} is not binary")));
        }
    }
    write_pgm(path, mask.h(), mask.w(), &raster)
}

// ---------------------------------------------------------------------------
// Dataset directory and manifest
// ---------------------------------------------------------------------------

pub const MANIFEST_NAME: &str = "manifest.txt";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image: String,
    pub mask: String,
    pub split: Split,
}

/// Write samples as `image_NNNN.pgm`/`mask_NNNN.pgm` pairs plus a manifest,
/// splitting 4:1 by index. Returns the manifest entries written.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut manifest = String::from("# image mask split\n");
    for (i, sample) in samples.iter().enumerate() {
        let entry = ManifestEntry {
            image: format!("image_{i:04}.pgm"),
            mask: format!("mask_{i:04}.pgm"),
            split: split_of(i),
        };
        write_image_pgm(&dir.join(&entry.image), &sample.image)?;
        write_mask_pgm(&dir.join(&entry.mask), &sample.mask)?;
        manifest.push_str(&format!("{} {} {}\n", entry.image, entry.mask, entry.split));
        entries.push(entry);
    }
    fs::write(dir.join(MANIFEST_NAME), manifest).map_err(|e| Error::io(dir, e))?;
    Ok(entries)
}

/// Parse the manifest in a dataset directory.
pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [image, mask, split] = fields[..] else {
            return Err(Error::Data(format!(
                "{}:{}: expected `image mask split`, got {line:?}",
                path.display(),
                lineno + 1
            )));
        };
        entries.push(ManifestEntry {
            image: image.to_string(),
            mask: mask.to_string(),
            split: split.parse()?,
        });
    }
    Ok(entries)
}

/// Load the samples listed in a dataset's manifest, optionally restricted
/// to one side of the split.
pub fn load_samples(dir: &Path, split: Option<Split>) -> Result<Vec<Sample>> {
    let mut samples = Vec::new();
    for entry in read_manifest(dir)? {
        if split.is_some_and(|s| s != entry.split) {
            continue;
        }
        let image = read_image_pgm(&dir.join(&entry.image))?;
        let mask = read_mask_pgm(&dir.join(&entry.mask))?;
        samples.push(Sample::new(image, mask)?);
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// Geometric and photometric transforms
// ---------------------------------------------------------------------------

/// Mirror along the horizontal axis (reverses each row).
pub fn hflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ni, ci, y, x, t.at(ni, ci, y, w - 1 - x));
                }
            }
        }
    }
    out
}

/// Mirror along the vertical axis (reverses row order).
pub fn vflip<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ni, ci, y, x, t.at(ni, ci, h - 1 - y, x));
                }
            }
        }
    }
    out
}

/// One clockwise quarter turn; an H×W map becomes W×H.
pub fn rot90<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = t.shape();
    let mut out = Tensor::zeros([n, c, w, h]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..w {
                for x in 0..h {
                    out.set(ni, ci, y, x, t.at(ni, ci, h - 1 - x, y));
                }
            }
        }
    }
    out
}

/// Zero-pad a map on the bottom/right to at least the given extents.
fn pad_to(t: &Tensor<f32>, ph: usize, pw: usize) -> Tensor<f32> {
    let [n, c, h, w] = t.shape();
    if h >= ph && w >= pw {
        return t.clone();
    }
    let (ph, pw) = (ph.max(h), pw.max(w));
    let mut out = Tensor::zeros([n, c, ph, pw]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ni, ci, y, x, t.at(ni, ci, y, x));
                }
            }
        }
    }
    out
}

fn crop(t: &Tensor<f32>, oy: usize, ox: usize, size: usize) -> Tensor<f32> {
    let [n, c, _, _] = t.shape();
    let mut out = Tensor::zeros([n, c, size, size]);
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..size {
                for x in 0..size {
                    out.set(ni, ci, y, x, t.at(ni, ci, oy + y, ox + x));
                }
            }
        }
    }
    out
}

/// Crop a size×size window at a uniformly random valid offset. Inputs
/// smaller than `size` in either extent are zero-padded to `size` there
/// first (the mask pads with background).
pub fn random_crop(sample: &Sample, size: usize, rng: &mut impl Rng) -> Result<Sample> {
    if size == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let image = pad_to(&sample.image, size, size);
    let mask = pad_to(&sample.mask, size, size);
    let oy = rng.gen_range(0..=image.h() - size);
    let ox = rng.gen_range(0..=image.w() - size);
    Sample::new(crop(&image, oy, ox, size), crop(&mask, oy, ox, size))
}

/// Deterministic centered variant of [`random_crop`], for validation.
pub fn center_crop(sample: &Sample, size: usize) -> Result<Sample> {
    if size == 0 {
        return Err(Error::Config("crop size must be positive".into()));
    }
    let image = pad_to(&sample.image, size, size);
    let mask = pad_to(&sample.mask, size, size);
    let oy = (image.h() - size) / 2;
    let ox = (image.w() - size) / 2;
    Sample::new(crop(&image, oy, ox, size), crop(&mask, oy, ox, size))
}

/// Which augmentation draws are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    pub rotate: bool,
    pub contrast: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig { hflip: true, vflip: true, rotate: true, contrast: true }
    }
}

impl AugmentConfig {
    pub const OFF: AugmentConfig =
        AugmentConfig { hflip: false, vflip: false, rotate: false, contrast: false };
}

/// Randomly transform a sample: horizontal/vertical flips each with
/// probability 1/2, rotation by k·90° with k uniform in 0..4, and a
/// multiplicative contrast factor uniform in [0.8, 1.2) on the image only
/// (clamped to [0,1]). The mask receives the identical geometric
/// transforms and no photometric ones. Disabled draws are skipped.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if cfg.hflip && rng.gen_bool(0.5) {
        image = hflip(&image);
        mask = hflip(&mask);
    }
    if cfg.vflip && rng.gen_bool(0.5) {
        image = vflip(&image);
        mask = vflip(&mask);
    }
    if cfg.rotate {
        for _ in 0..rng.gen_range(0..4u32) {
            image = rot90(&image);
            mask = rot90(&mask);
        }
    }
    if cfg.contrast {
        let factor = rng.gen_range(0.8..1.2f32);
        image = image.map(|v| (v * factor).clamp(0.0, 1.0));
    }
    Sample { image, mask }
}

/// Stack same-extent samples into `[B,1,H,W]` image and mask tensors.
pub fn stack_samples(samples: &[Sample]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let Some(first) = samples.first() else {
        return Err(Error::Data("cannot stack an empty batch".into()));
    };
    let (h, w) = (first.h(), first.w());
    let mut images = Vec::with_capacity(samples.len() * h * w);
    let mut masks = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if s.h() != h || s.w() != w {
            return Err(Error::Data(format!(
                "batch mixes extents {}x{} and {}x{}",
                h,
                w,
                s.h(),
                s.w()
            )));
        }
        images.extend_from_slice(s.image.data());
        masks.extend_from_slice(s.mask.data());
    }
    Ok((
        Tensor::from_vec([samples.len(), 1, h, w], images)?,
        Tensor::from_vec([samples.len(), 1, h, w], masks)?,
    ))
}

// ---------------------------------------------------------------------------
// Synthetic scene generation
// ---------------------------------------------------------------------------

/// Parameters of the synthetic dataset: smooth low-frequency backgrounds
/// with additive Gaussian noise and a few small isotropic Gaussian targets.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub extent_min: usize,
    pub extent_max: usize,
    pub targets_min: usize,
    pub targets_max: usize,
    /// Target radius parameter range in pixels.
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Target peak brightness range above the background.
    pub amplitude_min: f64,
    pub amplitude_max: f64,
    /// Node spacing of the background's coarse interpolation grid; larger
    /// means smoother.
    pub background_spacing: usize,
    pub background_min: f64,
    pub background_max: f64,
    /// Standard deviation of the per-pixel additive Gaussian noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            count: 500,
            extent_min: 256,
            extent_max: 512,
            targets_min: 2,
            targets_max: 5,
            sigma_min: 1.5,
            sigma_max: 4.0,
            amplitude_min: 0.4,
            amplitude_max: 0.9,
            background_spacing: 64,
            background_min: 0.1,
            background_max: 0.45,
            noise: 0.02,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges: [(&str, f64, f64); 3] = [
            ("sigma", self.sigma_min, self.sigma_max),
            ("amplitude", self.amplitude_min, self.amplitude_max),
            ("background", self.background_min, self.background_max),
        ];
        for (name, lo, hi) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::Config(format!("empty or non-finite {name} range {lo}..{hi}")));
            }
        }
        if self.extent_min > self.extent_max || self.targets_min > self.targets_max {
            return Err(Error::Config("empty extent or target-count range".into()));
        }
        if self.sigma_min < 0.5 {
            return Err(Error::Config(format!(
                "target sigma must be at least 0.5 px, got {}",
                self.sigma_min
            )));
        }
        if self.extent_min == 0 {
            return Err(Error::Config("image extent must be positive".into()));
        }
        if self.background_spacing == 0 {
            return Err(Error::Config("background grid spacing must be positive".into()));
        }
        if self.noise < 0.0 || !self.noise.is_finite() {
            return Err(Error::Config(format!("noise level must be non-negative, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Smooth background: values drawn on a coarse grid and bilinearly
/// interpolated to full resolution.
fn background(h: usize, w: usize, cfg: &SynthConfig, rng: &mut impl Rng) -> Vec<f64> {
    let sp = cfg.background_spacing;
    let gh = h.div_ceil(sp) + 1;
    let gw = w.div_ceil(sp) + 1;
    let grid: Vec<f64> = (0..gh * gw)
        .map(|_| {
            if cfg.background_min == cfg.background_max {
                cfg.background_min
            } else {
                rng.gen_range(cfg.background_min..cfg.background_max)
            }
        })
        .collect();
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        let iy = y / sp;
        let ty = (y - iy * sp) as f64 / sp as f64;
        for x in 0..w {
            let ix = x / sp;
            let tx = (x - ix * sp) as f64 / sp as f64;
            let g = |dy: usize, dx: usize| grid[(iy + dy) * gw + (ix + dx)];
            out.push(
                (1.0 - ty) * ((1.0 - tx) * g(0, 0) + tx * g(0, 1))
                    + ty * ((1.0 - tx) * g(1, 0) + tx * g(1, 1)),
            );
        }
    }
    out
}

fn uniform(lo: f64, hi: f64, rng: &mut impl Rng) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Generate the sample at one index. Each index owns a dedicated RNG
/// stream of the dataset seed, so generation is order-independent.
pub fn synth_one(cfg: &SynthConfig, index: usize) -> Result<Sample> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64 + 1);

    let h = rng.gen_range(cfg.extent_min..=cfg.extent_max);
    let w = rng.gen_range(cfg.extent_min..=cfg.extent_max);
    let mut image = background(h, w, cfg, &mut rng);
    let mut mask = vec![0.0f32; h * w];

    let k = rng.gen_range(cfg.targets_min..=cfg.targets_max);
    let mut placed: Vec<(usize, usize, f64)> = Vec::with_capacity(k);
    for _ in 0..k {
        let sigma = uniform(cfg.sigma_min, cfg.sigma_max, &mut rng);
        let amplitude = uniform(cfg.amplitude_min, cfg.amplitude_max, &mut rng);
        // Keep the whole footprint inside the frame and away from other
        // targets, so per-target masks never merge.
        let margin = (4.0 * sigma).ceil() as usize + 1;
        if 2 * margin >= h || 2 * margin >= w {
            continue;
        }
        let mut center = None;
        for _ in 0..10_000 {
            let cy = rng.gen_range(margin..h - margin);
            let cx = rng.gen_range(margin..w - margin);
            let clear = placed.iter().all(|&(py, px, ps)| {
                let (dy, dx) = (cy as f64 - py as f64, cx as f64 - px as f64);
                dy * dy + dx * dx >= (4.0 * (sigma + ps)).powi(2)
            });
            if clear {
                center = Some((cy, cx));
                break;
            }
        }
        let Some((cy, cx)) = center else { continue };
        placed.push((cy, cx, sigma));

        let reach = (4.0 * sigma).ceil() as usize;
        let half_max = 0.5 * amplitude;
        for y in cy.saturating_sub(reach)..=(cy + reach).min(h - 1) {
            for x in cx.saturating_sub(reach)..=(cx + reach).min(w - 1) {
                let (dy, dx) = (y as f64 - cy as f64, x as f64 - cx as f64);
                let g = amplitude * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                image[y * w + x] += g;
                if g > half_max {
                    mask[y * w + x] = 1.0;
                }
            }
        }
    }

    for v in &mut image {
        let z: f64 = rng.sample(StandardNormal);
        *v = (*v + cfg.noise * z).clamp(0.0, 1.0);
    }

    let image: Vec<f32> = image.into_iter().map(|v| v as f32).collect();
    Sample::new(Tensor::from_vec([1, 1, h, w], image)?, Tensor::from_vec([1, 1, h, w], mask)?)
}

/// Generate the whole dataset; index into the result matches [`split_of`].
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<Sample>> {
    cfg.validate()?;
    (0..cfg.count).map(|i| synth_one(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::edge_weight_map;
    use proptest::prelude::*;
    // Both globs above surface a `Rng` trait; pin the one the tests mean.
    use rand::Rng;

    fn tiny_sample(h: usize, w: usize) -> Sample {
        let image: Vec<f32> = (0..h * w).map(|i| (i % 7) as f32 / 10.0).collect();
        let mut mask = vec![0.0f32; h * w];
        mask[0] = 1.0;
        mask[h * w / 2] = 1.0;
        Sample::new(
            Tensor::from_vec([1, 1, h, w], image).unwrap(),
            Tensor::from_vec([1, 1, h, w], mask).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn image_pgm_roundtrip_is_quantization_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.pgm");
        let image =
            Tensor::from_vec([1, 1, 3, 4], (0..12).map(|i| i as f32 / 11.0).collect()).unwrap();
        write_image_pgm(&path, &image).unwrap();
        let back = read_image_pgm(&path).unwrap();
        assert_eq!(back.shape(), [1, 1, 3, 4]);
        for (&orig, &round) in image.data().iter().zip(back.data()) {
            assert_eq!(round, (orig * 255.0).round() / 255.0);
        }
    }

    #[test]
    fn mask_pgm_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.pgm");
        let mask =
            Tensor::from_vec([1, 1, 2, 3], vec![0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        write_mask_pgm(&path, &mask).unwrap();
        assert_eq!(read_mask_pgm(&path).unwrap().data(), mask.data());
    }

    #[test]
    fn non_binary_mask_write_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mask = Tensor::from_vec([1, 1, 1, 2], vec![0.0, 0.5]).unwrap();
        let err = write_mask_pgm(&dir.path().join("m.pgm"), &mask).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn gray_mask_read_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gray.pgm");
        write_pgm(&path, 1, 2, &[0, 128]).unwrap();
        let err = read_mask_pgm(&path).unwrap_err();
        assert!(err.to_string().contains("128"), "{err}");
    }

    #[test]
    fn pgm_header_comments_parse() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.pgm");
        std::fs::write(&path, b"P5 # comment\n# another\n2 1\n255\n\x10\x20").unwrap();
        let (h, w, raster) = read_pgm(&path).unwrap();
        assert_eq!((h, w), (1, 2));
        assert_eq!(raster, vec![0x10, 0x20]);
    }

    #[test]
    fn pgm_rejects_bad_magic_wrong_depth_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let cases: [(&str, &[u8]); 3] = [
            ("magic.pgm", b"P2\n2 1\n255\n\x01\x02"),
            ("depth.pgm", b"P5\n2 1\n65535\n\x01\x02"),
            ("short.pgm", b"P5\n2 2\n255\n\x01\x02"),
        ];
        for (name, bytes) in cases {
            let path = dir.path().join(name);
            std::fs::write(&path, bytes).unwrap();
            assert!(read_pgm(&path).is_err(), "{name} should fail");
        }
    }

    #[test]
    fn crop_at_native_size_is_identity() {
        let s = tiny_sample(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = random_crop(&s, 8, &mut rng).unwrap();
        assert_eq!(c.image.data(), s.image.data());
        assert_eq!(c.mask.data(), s.mask.data());
    }

    #[test]
    fn crop_offsets_cover_the_valid_range() {
        // 12×12 cropped to 8: offsets live in {0..4}²; with enough draws
        // both extremes must appear, and never anything outside.
        let mut image = Tensor::<f32>::zeros([1, 1, 12, 12]);
        for y in 0..12 {
            for x in 0..12 {
                image.set(0, 0, y, x, (y * 12 + x) as f32);
            }
        }
        let s = Sample { image, mask: Tensor::zeros([1, 1, 12, 12]) };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..200 {
            let c = random_crop(&s, 8, &mut rng).unwrap();
            let first = c.image.at(0, 0, 0, 0) as usize;
            let (oy, ox) = (first / 12, first % 12);
            assert!(oy <= 4 && ox <= 4, "offset ({oy},{ox}) out of range");
            // The crop must be the contiguous window at that offset.
            assert_eq!(c.image.at(0, 0, 7, 7) as usize, (oy + 7) * 12 + ox + 7);
            seen.insert((oy, ox));
        }
        assert!(seen.contains(&(0, 0)) && seen.contains(&(4, 4)), "extremes unseen: {seen:?}");
    }

    #[test]
    fn crop_pads_small_inputs_with_background() {
        let s = tiny_sample(5, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = random_crop(&s, 8, &mut rng).unwrap();
        assert_eq!((c.h(), c.w()), (8, 8));
        for y in 0..8 {
            for x in 0..8 {
                let expect_img = if y < 5 && x < 6 { s.image.at(0, 0, y, x) } else { 0.0 };
                let expect_mask = if y < 5 && x < 6 { s.mask.at(0, 0, y, x) } else { 0.0 };
                assert_eq!(c.image.at(0, 0, y, x), expect_img);
                assert_eq!(c.mask.at(0, 0, y, x), expect_mask);
            }
        }
    }

    #[test]
    fn center_crop_is_deterministic_and_centered() {
        let s = tiny_sample(12, 12);
        let a = center_crop(&s, 8).unwrap();
        let b = center_crop(&s, 8).unwrap();
        assert_eq!(a.image.data(), b.image.data());
        assert_eq!(a.image.at(0, 0, 0, 0), s.image.at(0, 0, 2, 2));
    }

    #[test]
    fn augment_with_everything_off_is_identity() {
        let s = tiny_sample(6, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = augment(&s, &AugmentConfig::OFF, &mut rng);
        assert_eq!(a.image.data(), s.image.data());
        assert_eq!(a.mask.data(), s.mask.data());
    }

    #[test]
    fn flips_are_involutions_and_rot90_has_order_four() {
        let t = Tensor::from_vec([1, 2, 3, 4], (0..24).map(|i| i as f32).collect()).unwrap();
        assert_eq!(hflip(&hflip(&t)).data(), t.data());
        assert_eq!(vflip(&vflip(&t)).data(), t.data());
        let r4 = rot90(&rot90(&rot90(&rot90(&t))));
        assert_eq!(r4.shape(), t.shape());
        assert_eq!(r4.data(), t.data());
        // Spot-check the orientation: clockwise sends the top-left corner
        // to the top-right corner.
        let r = rot90(&t);
        assert_eq!(r.shape(), [1, 2, 4, 3]);
        assert_eq!(r.at(0, 0, 0, 2), t.at(0, 0, 0, 0));
    }

    #[test]
    fn augment_preserves_mask_binarity_and_foreground_count() {
        let s = tiny_sample(6, 4);
        let fg: f32 = s.mask.data().iter().sum();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let a = augment(&s, &AugmentConfig::default(), &mut rng);
            assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            assert_eq!(a.mask.data().iter().sum::<f32>(), fg);
            assert_eq!(a.image.shape(), a.mask.shape());
        }
    }

    #[test]
    fn geometric_transforms_commute_with_edge_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mask = Tensor::from_vec(
                [1, 1, 6, 5],
                (0..30).map(|_| if rng.gen_bool(0.3) { 1.0f32 } else { 0.0 }).collect(),
            )
            .unwrap();
            let w = edge_weight_map(&mask).unwrap();
            for (name, f) in [
                ("hflip", hflip::<f32> as fn(&Tensor<f32>) -> Tensor<f32>),
                ("vflip", vflip::<f32>),
                ("rot90", rot90::<f32>),
            ] {
                let transformed_then_weighted = edge_weight_map(&f(&mask)).unwrap();
                let weighted_then_transformed = f(&w);
                assert_eq!(
                    transformed_then_weighted.data(),
                    weighted_then_transformed.data(),
                    "{name} does not commute"
                );
            }
        }
    }

    #[test]
    fn synth_is_deterministic() {
        let cfg = SynthConfig { count: 3, extent_min: 64, extent_max: 96, ..Default::default() };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        assert_eq!(a.len(), 3);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.image.data(), y.image.data());
            assert_eq!(x.mask.data(), y.mask.data());
        }
    }

    #[test]
    fn synth_honors_count_and_produces_targets() {
        let cfg = SynthConfig { count: 6, extent_min: 64, extent_max: 64, ..Default::default() };
        let samples = synth_generate(&cfg).unwrap();
        assert_eq!(samples.len(), 6);
        for s in &samples {
            assert!(s.mask.data().iter().sum::<f32>() >= 1.0, "mask should be nonempty");
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn target_area_matches_the_half_maximum_radius() {
        // One target per image at fixed sigma: the foreground is the disk
        // where the Gaussian exceeds half its amplitude, radius
        // sigma·sqrt(2 ln 2).
        let sigma = 3.0;
        let cfg = SynthConfig {
            count: 10,
            extent_min: 64,
            extent_max: 64,
            targets_min: 1,
            targets_max: 1,
            sigma_min: sigma,
            sigma_max: sigma,
            noise: 0.0,
            ..Default::default()
        };
        let expected_r = sigma * (2.0 * std::f64::consts::LN_2).sqrt();
        for s in synth_generate(&cfg).unwrap() {
            let area: f32 = s.mask.data().iter().sum();
            let measured_r = (f64::from(area) / std::f64::consts::PI).sqrt();
            assert!(
                (measured_r - expected_r).abs() <= 2.0,
                "measured radius {measured_r:.2} vs expected {expected_r:.2}"
            );
        }
    }

    #[test]
    fn split_is_four_to_one() {
        let splits: Vec<Split> = (0..10).map(split_of).collect();
        assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), 8);
        assert_eq!(splits[4], Split::Test);
        assert_eq!(splits[9], Split::Test);
    }

    #[test]
    fn dataset_write_and_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { count: 5, extent_min: 48, extent_max: 64, ..Default::default() };
        let samples = synth_generate(&cfg).unwrap();
        let entries = write_dataset(dir.path(), &samples).unwrap();
        assert_eq!(entries.len(), 5);
        assert_eq!(entries[0].image, "image_0000.pgm");
        assert_eq!(read_manifest(dir.path()).unwrap(), entries);

        let train = load_samples(dir.path(), Some(Split::Train)).unwrap();
        let test = load_samples(dir.path(), Some(Split::Test)).unwrap();
        let all = load_samples(dir.path(), None).unwrap();
        assert_eq!((train.len(), test.len(), all.len()), (4, 1, 5));
        // Masks roundtrip exactly; images roundtrip through quantization.
        assert_eq!(test[0].mask.data(), samples[4].mask.data());
        for (&orig, &back) in samples[0].image.data().iter().zip(all[0].image.data()) {
            assert!((orig - back).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }

    #[test]
    fn synth_rejects_bad_ranges() {
        let bad_sigma = SynthConfig { sigma_min: 0.1, ..Default::default() };
        assert_eq!(synth_generate(&bad_sigma).unwrap_err().exit_code(), 1);
        let empty_range = SynthConfig { extent_min: 128, extent_max: 64, ..Default::default() };
        assert_eq!(synth_generate(&empty_range).unwrap_err().exit_code(), 1);
    }

    proptest! {
        #[test]
        fn crop_always_returns_the_requested_extent(
            h in 1usize..40,
            w in 1usize..40,
            size in 1usize..32,
            seed in 0u64..1000,
        ) {
            let image = Tensor::zeros([1, 1, h, w]);
            let mask = Tensor::zeros([1, 1, h, w]);
            let s = Sample::new(image, mask).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = random_crop(&s, size, &mut rng).unwrap();
            prop_assert_eq!((c.h(), c.w()), (size, size));
        }

        #[test]
        fn augment_keeps_masks_binary(
            h in 1usize..12,
            w in 1usize..12,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let image = Tensor::from_vec(
                [1, 1, h, w],
                (0..h * w).map(|_| rng.gen_range(0.0..1.0f32)).collect(),
            ).unwrap();
            let mask = Tensor::from_vec(
                [1, 1, h, w],
                (0..h * w).map(|_| if rng.gen_bool(0.5) { 1.0f32 } else { 0.0 }).collect(),
            ).unwrap();
            let s = Sample::new(image, mask).unwrap();
            let a = augment(&s, &AugmentConfig::default(), &mut rng);
            prop_assert!(a.mask.data().iter().all(|&v| v == 0.0 || v == 1.0));
            prop_assert_eq!(a.image.shape(), a.mask.shape());
        }
    }
}
