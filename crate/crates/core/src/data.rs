//! Dataset ingestion and augmentation: a synthetic shapes generator for
//! desk-scale runs, the binary-matrix loader for the stereo toy-object
//! set, and batch augmentation (pad-and-crop, flip, brightness,
//! contrast).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeedRng;
use crate::tensor::{Scalar, Tensor};

/// An in-memory labelled image set. Images are `[n, c, h, w]` scaled to
/// `[0, 1]`; optional per-sample attributes carry what the acquisition
/// knew (a brightness offset for synthetic data, a lighting-condition
/// index for the stereo set).
#[derive(Debug, Clone)]
pub struct Dataset<T> {
    pub images: Tensor<T>,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub brightness: Option<Vec<f64>>,
    pub lighting: Option<Vec<u32>>,
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.images.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.rank() != 4 {
            return Err(Error::shape("dataset images must be [n, c, h, w]"));
        }
        let n = self.len();
        if self.labels.len() != n {
            return Err(Error::shape(format!(
                "{} labels for {} images",
                self.labels.len(),
                n
            )));
        }
        if let Some(l) = self.labels.iter().find(|&&l| l >= self.classes) {
            return Err(Error::invalid(format!(
                "label {l} outside {} classes",
                self.classes
            )));
        }
        for attr in [
            self.brightness.as_ref().map(Vec::len),
            self.lighting.as_ref().map(Vec::len),
        ]
        .into_iter()
        .flatten()
        {
            if attr != n {
                return Err(Error::shape("attribute length does not match images"));
            }
        }
        Ok(())
    }

    /// Copy out the samples at `idx`, preserving attributes.
    pub fn subset(&self, idx: &[usize]) -> Result<Dataset<T>> {
        let (c, h, w) = (self.images.dim(1), self.images.dim(2), self.images.dim(3));
        let plane = c * h * w;
        let src = self.images.data();
        let mut data = Vec::with_capacity(idx.len() * plane);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            if i >= self.len() {
                return Err(Error::invalid(format!("sample index {i} out of range")));
            }
            data.extend_from_slice(&src[i * plane..(i + 1) * plane]);
            labels.push(self.labels[i]);
        }
        let pick = |v: &Option<Vec<f64>>| v.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect());
        Ok(Dataset {
            images: Tensor::new(&[idx.len().max(1), c, h, w], if idx.is_empty() {
                vec![T::ZERO; plane]
            } else {
                data
            })?,
            labels,
            classes: self.classes,
            brightness: pick(&self.brightness),
            lighting: self
                .lighting
                .as_ref()
                .map(|v| idx.iter().map(|&i| v[i]).collect()),
        })
    }

    /// Images and labels for the samples at `idx`, as one batch tensor.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let sub = self.subset(idx)?;
        Ok((sub.images, sub.labels))
    }
}

/// Split sample indices into those at or below a brightness boundary and
/// those above it. Errors when the set carries no brightness attribute
/// or either side comes out empty.
pub fn brightness_split<T: Scalar>(
    ds: &Dataset<T>,
    boundary: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let attr = ds
        .brightness
        .as_ref()
        .ok_or_else(|| Error::invalid("dataset has no brightness attribute"))?;
    let (mut lo, mut hi) = (Vec::new(), Vec::new());
    for (i, &b) in attr.iter().enumerate() {
        if b <= boundary {
            lo.push(i);
        } else {
            hi.push(i);
        }
    }
    if lo.is_empty() || hi.is_empty() {
        return Err(Error::invalid(format!(
            "brightness boundary {boundary} leaves an empty regime ({} / {})",
            lo.len(),
            hi.len()
        )));
    }
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// Synthetic shapes
// ---------------------------------------------------------------------------

/// Knobs of the shapes generator.
#[derive(Debug, Clone)]
pub struct ShapesConfig {
    pub per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Per-image additive offset drawn uniformly from this range and
    /// recorded as the brightness attribute.
    pub brightness: (f64, f64),
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            per_class: 100,
            size: 32,
            channels: 1,
            brightness: (0.0, 0.3),
            seed: 1,
        }
    }
}

pub const SHAPE_CLASSES: usize = 5;

/// Render five shape families (disk, square, triangle, cross, ring) with
/// random position and scale on a dim background, plus light pixel noise
/// and a per-image brightness offset. Pixel values stay in `[0, 1]` as
/// long as `brightness.1 <= 0.35`. Deterministic per seed; samples are
/// laid out class-grouped (shuffling is the trainer's job).
pub fn synth_shapes<T: Scalar>(cfg: &ShapesConfig) -> Result<Dataset<T>> {
    if cfg.size < 16 {
        return Err(Error::invalid("shape images need size >= 16"));
    }
    if cfg.per_class == 0 || cfg.channels == 0 {
        return Err(Error::invalid("need at least one sample and one channel"));
    }
    if cfg.brightness.1 < cfg.brightness.0 {
        return Err(Error::invalid("brightness range is reversed"));
    }
    let s = cfg.size;
    let n = SHAPE_CLASSES * cfg.per_class;
    let mut rng = SeedRng::new(cfg.seed);
    let mut data = Vec::with_capacity(n * cfg.channels * s * s);
    let mut labels = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(n);
    for class in 0..SHAPE_CLASSES {
        for _ in 0..cfg.per_class {
            let jitter = s as f64 / 8.0;
            let cx = s as f64 / 2.0 + rng.range(-jitter, jitter);
            let cy = s as f64 / 2.0 + rng.range(-jitter, jitter);
            let r = rng.range(s as f64 / 6.0, s as f64 / 4.0);
            let fg = rng.range(0.4, 0.6);
            let offset = rng.range(cfg.brightness.0, cfg.brightness.1);
            let mut plane = vec![0.0f64; s * s];
            for y in 0..s {
                for x in 0..s {
                    let px = x as f64 + 0.5;
                    let py = y as f64 + 0.5;
                    let inside = shape_hit(class, px - cx, py - cy, r);
                    let base = if inside { fg } else { 0.1 };
                    plane[y * s + x] = base + rng.range(-0.02, 0.02) + offset;
                }
            }
            // Extra channels see the same scene shifted one pixel, which
            // is what a second viewpoint roughly does at this scale.
            for ch in 0..cfg.channels {
                let dx = ch.min(1);
                for y in 0..s {
                    for x in 0..s {
                        let sx = x.saturating_sub(dx);
                        data.push(T::from_f64(plane[y * s + sx]));
                    }
                }
            }
            labels.push(class);
            offsets.push(offset);
        }
    }
    let ds = Dataset {
        images: Tensor::new(&[n, cfg.channels, s, s], data)?,
        labels,
        classes: SHAPE_CLASSES,
        brightness: Some(offsets),
        lighting: None,
    };
    ds.validate()?;
    Ok(ds)
}

fn shape_hit(class: usize, dx: f64, dy: f64, r: f64) -> bool {
    match class {
        // disk
        0 => dx * dx + dy * dy <= r * r,
        // square
        1 => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
        // triangle pointing up
        2 => dy >= -r && dy <= r && dx.abs() <= (dy + r) * 0.5,
        // cross
        3 => {
            let t = (r / 3.0).max(1.0);
            (dx.abs() <= t && dy.abs() <= r) || (dy.abs() <= t && dx.abs() <= r)
        }
        // ring
        4 => {
            let d2 = dx * dx + dy * dy;
            d2 <= r * r && d2 >= (0.55 * r) * (0.55 * r)
        }
        _ => unreachable!("only five shape classes exist"),
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Per-batch augmentation policy. Zero everything = identity.
#[derive(Debug, Clone, Default)]
pub struct AugmentConfig {
    /// Pad this many zero pixels on each side, then crop back at a random
    /// offset.
    pub pad_crop: usize,
    pub flip: bool,
    /// Additive offset drawn from `[-brightness, brightness]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - contrast, 1 + contrast]`, applied
    /// around the per-image mean.
    pub contrast: f64,
}

/// Apply independent random transforms to every sample of the batch.
/// Values are clamped back to `[0, 1]` after the photometric steps.
pub fn augment<T: Scalar>(
    images: &Tensor<T>,
    cfg: &AugmentConfig,
    rng: &mut SeedRng,
) -> Result<Tensor<T>> {
    if images.rank() != 4 {
        return Err(Error::shape("augment expects [n, c, h, w]"));
    }
    let (n, c, h, w) = (
        images.dim(0),
        images.dim(1),
        images.dim(2),
        images.dim(3),
    );
    let src = images.data();
    let mut out = vec![T::ZERO; src.len()];
    let p = cfg.pad_crop;
    for i in 0..n {
        let (dy, dx) = if p > 0 {
            (rng.below(2 * p + 1), rng.below(2 * p + 1))
        } else {
            (0, 0)
        };
        let flip = cfg.flip && rng.uniform() < 0.5;
        let bright = if cfg.brightness > 0.0 {
            rng.range(-cfg.brightness, cfg.brightness)
        } else {
            0.0
        };
        let contrast = if cfg.contrast > 0.0 {
            rng.range(1.0 - cfg.contrast, 1.0 + cfg.contrast)
        } else {
            1.0
        };
        let mean = if cfg.contrast > 0.0 {
            let base = i * c * h * w;
            src[base..base + c * h * w]
                .iter()
                .map(|v| v.to_f64())
                .sum::<f64>()
                / (c * h * w) as f64
        } else {
            0.0
        };
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    // Crop offset (dy, dx) into the padded image means the
                    // output pixel (y, x) reads padded (y + dy, x + dx),
                    // i.e. source (y + dy - p, x + dx - p); out of range
                    // reads the zero padding.
                    let sy = (y + dy) as isize - p as isize;
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = (xx + dx) as isize - p as isize;
                    let v = if sy >= 0 && sy < h as isize && sx >= 0 && sx < w as isize {
                        src[((i * c + ch) * h + sy as usize) * w + sx as usize].to_f64()
                    } else {
                        0.0
                    };
                    let v = if cfg.contrast > 0.0 {
                        mean + (v - mean) * contrast
                    } else {
                        v
                    };
                    let v = (v + bright).clamp(0.0, 1.0);
                    out[((i * c + ch) * h + y) * w + x] = T::from_f64(v);
                }
            }
        }
    }
    Tensor::new(&[n, c, h, w], out)
}

// ---------------------------------------------------------------------------
// Binary-matrix loader (stereo toy-object set)
// ---------------------------------------------------------------------------

// Header constants of the published binary-matrix container: a 4-byte
// little-endian magic selecting the element type, the dimension count,
// then the extents (at least three are always present).
const MAGIC_BYTE: u32 = 0x1E3D4C55;
const MAGIC_INT: u32 = 0x1E3D4C54;

#[derive(Debug)]
struct BinMatrix {
    dims: Vec<usize>,
    bytes: Vec<u8>,
    magic: u32,
}

fn read_binmatrix(path: &Path) -> Result<BinMatrix> {
    let raw = fs::read(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    let need = |n: usize| -> Result<()> {
        if raw.len() < n {
            Err(Error::format(format!(
                "{}: expected at least {n} bytes, file has {}",
                path.display(),
                raw.len()
            )))
        } else {
            Ok(())
        }
    };
    need(8)?;
    let rd = |off: usize| u32::from_le_bytes(raw[off..off + 4].try_into().unwrap());
    let magic = rd(0);
    if magic != MAGIC_BYTE && magic != MAGIC_INT {
        return Err(Error::format(format!(
            "{}: unrecognized matrix magic {magic:#010x}",
            path.display()
        )));
    }
    let ndim = rd(4) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(Error::format(format!(
            "{}: implausible dimension count {ndim}",
            path.display()
        )));
    }
    // The header always stores at least three extents; trailing ones for
    // low-rank matrices are written as 1.
    let stored = ndim.max(3);
    need(8 + 4 * stored)?;
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..stored {
        let d = rd(8 + 4 * i) as usize;
        if i < ndim {
            dims.push(d);
        } else if d != 1 {
            return Err(Error::format(format!(
                "{}: padding extent {d} should be 1",
                path.display()
            )));
        }
    }
    let elem = if magic == MAGIC_BYTE { 1 } else { 4 };
    let count: usize = dims.iter().product();
    let start = 8 + 4 * stored;
    need(start + count * elem)?;
    Ok(BinMatrix {
        dims,
        bytes: raw[start..start + count * elem].to_vec(),
        magic,
    })
}

impl BinMatrix {
    fn ints(&self) -> Vec<i32> {
        self.bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect()
    }
}

/// Load the stereo toy-object set from its three published files: image
/// data (byte matrix `[n, 2, 96, 96]`), category labels (int matrix
/// `[n]`), and per-sample info whose fourth column is the lighting
/// condition. Pixels are scaled to `[0, 1]`.
pub fn load_small_norb<T: Scalar>(dat: &Path, cat: &Path, info: &Path) -> Result<Dataset<T>> {
    let images = read_binmatrix(dat)?;
    if images.magic != MAGIC_BYTE {
        return Err(Error::format(format!(
            "{}: image file must be a byte matrix",
            dat.display()
        )));
    }
    if images.dims.len() != 4 {
        return Err(Error::format(format!(
            "{}: image matrix has {} dimensions, expected 4",
            dat.display(),
            images.dims.len()
        )));
    }
    let [n, c, h, w] = [
        images.dims[0],
        images.dims[1],
        images.dims[2],
        images.dims[3],
    ];
    let labels_m = read_binmatrix(cat)?;
    if labels_m.magic != MAGIC_INT || labels_m.dims[0] != n {
        return Err(Error::format(format!(
            "{}: expected an int matrix of {n} labels, found {:?}",
            cat.display(),
            labels_m.dims
        )));
    }
    let info_m = read_binmatrix(info)?;
    if info_m.magic != MAGIC_INT || info_m.dims.first() != Some(&n) || info_m.dims.get(1) < Some(&4)
    {
        return Err(Error::format(format!(
            "{}: expected an int matrix [{n}, 4+], found {:?}",
            info.display(),
            info_m.dims
        )));
    }
    let labels: Vec<usize> = labels_m.ints().iter().map(|&l| l as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) + 1;
    let width = info_m.dims[1];
    let lighting: Vec<u32> = info_m
        .ints()
        .chunks_exact(width)
        .map(|row| row[3] as u32)
        .collect();
    let data: Vec<T> = images
        .bytes
        .iter()
        .map(|&b| T::from_f64(b as f64 / 255.0))
        .collect();
    let ds = Dataset {
        images: Tensor::new(&[n, c, h, w], data)?,
        labels,
        classes,
        brightness: None,
        lighting: Some(lighting),
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn shapes_are_deterministic_and_balanced() {
        let cfg = ShapesConfig {
            per_class: 7,
            ..Default::default()
        };
        let a: Dataset<f32> = synth_shapes(&cfg).unwrap();
        let b: Dataset<f32> = synth_shapes(&cfg).unwrap();
        assert_eq!(a.images.data(), b.images.data());
        assert_eq!(a.labels, b.labels);
        for class in 0..SHAPE_CLASSES {
            assert_eq!(a.labels.iter().filter(|&&l| l == class).count(), 7);
        }
        let imgs = a.images.data();
        assert!(imgs.iter().all(|&v| (0.0..=1.0).contains(&(v as f64))));
        // Different seeds give different pixels.
        let c: Dataset<f32> = synth_shapes(&ShapesConfig {
            seed: 2,
            per_class: 7,
            ..Default::default()
        })
        .unwrap();
        assert_ne!(a.images.data(), c.images.data());
    }

    #[test]
    fn zero_brightness_range_means_zero_offsets() {
        let ds: Dataset<f64> = synth_shapes(&ShapesConfig {
            per_class: 2,
            brightness: (0.0, 0.0),
            ..Default::default()
        })
        .unwrap();
        assert!(ds.brightness.unwrap().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn brightness_split_respects_boundary() {
        let ds: Dataset<f64> = synth_shapes(&ShapesConfig {
            per_class: 20,
            brightness: (0.0, 0.3),
            ..Default::default()
        })
        .unwrap();
        let (lo, hi) = brightness_split(&ds, 0.15).unwrap();
        assert_eq!(lo.len() + hi.len(), ds.len());
        let attr = ds.brightness.as_ref().unwrap();
        assert!(lo.iter().all(|&i| attr[i] <= 0.15));
        assert!(hi.iter().all(|&i| attr[i] > 0.15));
    }

    #[test]
    fn augment_identity_when_disabled() {
        let ds: Dataset<f64> = synth_shapes(&ShapesConfig {
            per_class: 3,
            ..Default::default()
        })
        .unwrap();
        let mut rng = SeedRng::new(5);
        let out = augment(&ds.images, &AugmentConfig::default(), &mut rng).unwrap();
        assert_eq!(out.data(), ds.images.data());
    }

    #[test]
    fn pad_crop_translates_a_one_hot_pixel() {
        // A single lit pixel at (4, 6); with pad 2 the output must light
        // exactly one pixel at (4 + 2 - dy, 6 + 2 - dx) when in range.
        let mut img = Tensor::<f64>::zeros(&[1, 1, 9, 9]);
        let idx = img.idx4(0, 0, 4, 6);
        img.data_mut()[idx] = 1.0;
        let cfg = AugmentConfig {
            pad_crop: 2,
            ..Default::default()
        };
        let mut rng = SeedRng::new(11);
        let out = augment(&img, &cfg, &mut rng).unwrap();
        let lit: Vec<usize> = out
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(i, _)| i)
            .collect();
        assert!(lit.len() <= 1);
        if let Some(&i) = lit.first() {
            let (y, x) = (i / 9, i % 9);
            assert!((y as isize - 4).abs() <= 2 && (x as isize - 6).abs() <= 2);
        }
    }

    #[test]
    fn augment_brightness_adds_before_clamping() {
        let img = Tensor::<f64>::filled(&[1, 1, 4, 4], 0.5);
        let cfg = AugmentConfig {
            brightness: 0.2,
            ..Default::default()
        };
        let mut rng = SeedRng::new(3);
        let out = augment(&img, &cfg, &mut rng).unwrap();
        let v = out.data()[0];
        assert!(out.data().iter().all(|&x| x == v));
        assert!((0.3..=0.7).contains(&v) && v != 0.5);
    }

    fn write_matrix(path: &Path, magic: u32, dims: &[usize], payload: &[u8]) {
        let mut f = fs::File::create(path).unwrap();
        f.write_all(&magic.to_le_bytes()).unwrap();
        f.write_all(&(dims.len() as u32).to_le_bytes()).unwrap();
        for i in 0..dims.len().max(3) {
            let d = *dims.get(i).unwrap_or(&1) as u32;
            f.write_all(&d.to_le_bytes()).unwrap();
        }
        f.write_all(payload).unwrap();
    }

    #[test]
    fn binmatrix_loader_round_trips_a_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let dat = dir.path().join("x-dat.mat");
        let cat = dir.path().join("x-cat.mat");
        let info = dir.path().join("x-info.mat");
        let n = 3;
        let pixels: Vec<u8> = (0..n * 2 * 96 * 96).map(|i| (i % 251) as u8).collect();
        write_matrix(&dat, MAGIC_BYTE, &[n, 2, 96, 96], &pixels);
        let labels: Vec<u8> = [0i32, 4, 2]
            .iter()
            .flat_map(|l| l.to_le_bytes())
            .collect();
        write_matrix(&cat, MAGIC_INT, &[n], &labels);
        let rows: Vec<u8> = (0..n)
            .flat_map(|i| {
                [i as i32, 3, 17, (i % 6) as i32]
                    .into_iter()
                    .flat_map(|v| v.to_le_bytes())
            })
            .collect();
        write_matrix(&info, MAGIC_INT, &[n, 4], &rows);

        let ds: Dataset<f32> = load_small_norb(&dat, &cat, &info).unwrap();
        assert_eq!(ds.images.shape(), &[3, 2, 96, 96]);
        assert_eq!(ds.labels, vec![0, 4, 2]);
        assert_eq!(ds.lighting, Some(vec![0, 1, 2]));
        assert!((ds.images.data()[1] - 1.0 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn binmatrix_loader_names_failures() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.mat");
        fs::write(&bad, [1u8, 2, 3, 4, 5, 6, 7, 8]).unwrap();
        let err = read_binmatrix(&bad).unwrap_err();
        assert_eq!(err.class(), "format");
        assert!(err.to_string().contains("magic"));

        let trunc = dir.path().join("trunc-dat.mat");
        write_matrix(&trunc, MAGIC_BYTE, &[2, 2, 96, 96], &[0u8; 100]);
        let err = read_binmatrix(&trunc).unwrap_err();
        assert_eq!(err.class(), "format");
        assert!(err.to_string().contains("expected at least"));
    }
}
