//! Complex object datasets.
//!
//! Intensity images become unit-modulus phase objects through one of two
//! encoders, then every object is low-pass filtered to the synthetic NA of
//! the optical configuration it was built for.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{decode_container, encode_container, read_file, write_file};
use crate::error::{Error, Result};
use crate::fourier::Fourier2d;
use crate::optics::{synthetic_na, ComplexField, OpticalConfig, Preset, PupilFunction};
use crate::rng::seeded;

pub const ARCHIVE_MAGIC: [u8; 8] = *b"FPMDATA\0";
pub const ARCHIVE_VERSION: u32 = 1;

pub const IDX_IMAGES_MAGIC: u32 = 2051;
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// `exp(-i pi/2 p)` for a normalized intensity `p` in `[0, 1]`.
pub fn encode_mnist(p: f64) -> Result<Complex64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("normalized pixel {p} outside [0, 1]")));
    }
    Ok(Complex64::from_polar(1.0, -std::f64::consts::FRAC_PI_2 * p))
}

/// `exp(i pi (765 - p) / 765)` for a three-channel 8-bit sum `p` in `[0, 765]`.
pub fn encode_ucsb(p: f64) -> Result<Complex64> {
    if !(0.0..=765.0).contains(&p) {
        return Err(Error::InvalidConfig(format!("summed pixel {p} outside [0, 765]")));
    }
    Ok(Complex64::from_polar(1.0, std::f64::consts::PI * (765.0 - p) / 765.0))
}

/// Zeroes every spatial frequency above `synthetic_na / wavelength`.
pub fn lowpass_by_synthetic_na(object: &ComplexField, config: &OpticalConfig) -> ComplexField {
    let (rows, cols) = object.shape();
    let fourier = Fourier2d::new(rows, cols);
    let mask = PupilFunction::circular(rows, cols, object.pixel_pitch, synthetic_na(config) / config.wavelength);
    let mut spectrum = object.fft2(&fourier);
    mask.apply(&mut spectrum);
    spectrum.ifft2(&fourier)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Mnist,
    Binary16,
    ImageDir,
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DatasetSource::Mnist => "mnist",
            DatasetSource::Binary16 => "binary16",
            DatasetSource::ImageDir => "image-dir",
        })
    }
}

impl FromStr for DatasetSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetSource::Mnist),
            "binary16" => Ok(DatasetSource::Binary16),
            "image-dir" => Ok(DatasetSource::ImageDir),
            _ => Err(Error::InvalidConfig(format!("unknown dataset {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Encoder {
    /// [`encode_mnist`]
    Mnist,
    /// [`encode_ucsb`]
    Ucsb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidConfig(format!("unknown split {s:?}"))),
        }
    }
}

/// Filtered objects stored train, then validation, then test.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexDataset {
    pub source: DatasetSource,
    pub encoder: Encoder,
    /// Preset id, or `"custom"`.
    pub preset: String,
    pub config: OpticalConfig,
    objects: Vec<ComplexField>,
    split_sizes: [usize; 3],
}

impl ComplexDataset {
    /// Filters every object and checks that all share the configuration's grid.
    pub fn from_unfiltered(
        source: DatasetSource,
        encoder: Encoder,
        preset: String,
        config: OpticalConfig,
        unfiltered: Vec<ComplexField>,
        split_sizes: [usize; 3],
    ) -> Result<Self> {
        let objects = unfiltered.iter().map(|o| lowpass_by_synthetic_na(o, &config)).collect();
        Self::from_filtered(source, encoder, preset, config, objects, split_sizes)
    }

    fn from_filtered(
        source: DatasetSource,
        encoder: Encoder,
        preset: String,
        config: OpticalConfig,
        objects: Vec<ComplexField>,
        split_sizes: [usize; 3],
    ) -> Result<Self> {
        if objects.is_empty() {
            return Err(Error::EmptyDataset(format!("{source} dataset has no objects")));
        }
        if split_sizes.iter().sum::<usize>() != objects.len() {
            return Err(Error::Contract(format!(
                "split sizes {split_sizes:?} do not cover {} objects",
                objects.len()
            )));
        }
        let shape = config.highres_shape();
        if let Some(o) = objects.iter().find(|o| o.shape() != shape) {
            return Err(Error::Shape(format!("object {:?} on a {shape:?} grid", o.shape())));
        }
        Ok(Self {
            source,
            encoder,
            preset,
            config,
            objects,
            split_sizes,
        })
    }

    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }

    pub fn objects(&self) -> &[ComplexField] {
        &self.objects
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        self.split_sizes
    }

    pub fn split(&self, split: Split) -> &[ComplexField] {
        let [a, b, _] = self.split_sizes;
        match split {
            Split::Train => &self.objects[..a],
            Split::Validation => &self.objects[a..a + b],
            Split::Test => &self.objects[a + b..],
        }
    }

    /// Keeps the first `n` objects of each split.
    pub fn truncated(&self, train: usize, validation: usize, test: usize) -> Self {
        let take = |s: Split, n: usize| self.split(s).iter().take(n).cloned().collect::<Vec<_>>();
        let parts = [take(Split::Train, train), take(Split::Validation, validation), take(Split::Test, test)];
        Self {
            split_sizes: [parts[0].len(), parts[1].len(), parts[2].len()],
            objects: parts.concat(),
            ..self.clone()
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (rows, cols) = self.config.highres_shape();
        let header = ArchiveHeader {
            source: self.source,
            encoder: self.encoder,
            preset: self.preset.clone(),
            rows,
            cols,
            pixel_pitch: self.objects[0].pixel_pitch,
            train: self.split_sizes[0],
            validation: self.split_sizes[1],
            test: self.split_sizes[2],
            config: self.config.clone(),
        };
        let text = toml::to_string(&header).map_err(|e| Error::Format(format!("archive header: {e}")))?;
        let interleaved: Vec<Vec<f64>> = self
            .objects
            .iter()
            .map(|o| o.re.iter().zip(&o.im).flat_map(|(&r, &i)| [r, i]).collect())
            .collect();
        let arrays: Vec<&[f64]> = interleaved.iter().map(Vec::as_slice).collect();
        Ok(encode_container(&ARCHIVE_MAGIC, ARCHIVE_VERSION, &text, &arrays))
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (text, mut payload) = decode_container(&ARCHIVE_MAGIC, ARCHIVE_VERSION, bytes, origin)?;
        let h: ArchiveHeader = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            offset: 20 + e.span().map_or(0, |s| s.start as u64),
            message: format!("archive header: {}", e.message()),
        })?;
        h.config.validate()?;
        let n = h.train + h.validation + h.test;
        let mut objects = Vec::with_capacity(n);
        for _ in 0..n {
            let v = payload.take(2 * h.rows * h.cols)?;
            let re = v.iter().step_by(2).copied().collect();
            let im = v.iter().skip(1).step_by(2).copied().collect();
            objects.push(ComplexField::new(h.rows, h.cols, re, im, h.pixel_pitch)?);
        }
        payload.finish()?;
        Self::from_filtered(h.source, h.encoder, h.preset, h.config, objects, [h.train, h.validation, h.test])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?, path)
    }
}

#[derive(Serialize, Deserialize)]
struct ArchiveHeader {
    source: DatasetSource,
    encoder: Encoder,
    preset: String,
    rows: usize,
    cols: usize,
    pixel_pitch: f64,
    train: usize,
    validation: usize,
    test: usize,
    config: OpticalConfig,
}

/// The shipped 4x4 binary patterns, bit `r * 4 + c` set for a one at `(r, c)`.
/// [`binary16_patterns`] with [`BINARY16_SEED`] regenerates them.
pub const BINARY16: [u16; 16] = [
    7283, 23557, 61127, 63937, 430, 11037, 593, 13083, 49793, 51939, 38027, 36194, 1194, 51760, 31066, 1611,
];
pub const BINARY16_SEED: u64 = 16;

fn decode_pattern(bits: u16) -> Vec<f64> {
    (0..16).map(|i| f64::from((bits >> i) & 1)).collect()
}

fn binary_field(bits: u16, config: &OpticalConfig) -> ComplexField {
    let values: Vec<Complex64> = decode_pattern(bits)
        .into_iter()
        .map(|p| encode_mnist(p).expect("binary pixel"))
        .collect();
    ComplexField::from_complex(4, 4, config.highres_pitch(), &values).expect("4x4")
}

fn distinct_after_filtering(patterns: &[u16], config: &OpticalConfig) -> bool {
    let filtered: Vec<ComplexField> = patterns
        .iter()
        .map(|&b| lowpass_by_synthetic_na(&binary_field(b, config), config))
        .collect();
    for i in 0..filtered.len() {
        for j in i + 1..filtered.len() {
            let d: f64 = (0..16)
                .map(|p| (filtered[i].re[p] - filtered[j].re[p]).abs() + (filtered[i].im[p] - filtered[j].im[p]).abs())
                .sum();
            if d < 1e-9 {
                return false;
            }
        }
    }
    true
}

/// Sixteen distinct random 4x4 binary patterns that stay pairwise distinct
/// after filtering with the Table 3 configuration. A colliding draw moves on
/// to the next seed. Returns the patterns and the seed that produced them.
pub fn binary16_patterns(seed: u64) -> (Vec<u16>, u64) {
    let config = Preset::Table3.config();
    let mut seed = seed;
    loop {
        let mut rng = seeded(seed);
        let mut patterns: Vec<u16> = Vec::with_capacity(16);
        while patterns.len() < 16 {
            let p: u16 = rng.random();
            if !patterns.contains(&p) {
                patterns.push(p);
            }
        }
        if distinct_after_filtering(&patterns, &config) {
            return (patterns, seed);
        }
        seed += 1;
    }
}

/// The 16-object toy dataset on the Table 3 grid, all in the training split.
pub fn make_binary16() -> ComplexDataset {
    let config = Preset::Table3.config();
    let objects = BINARY16.iter().map(|&b| binary_field(b, &config)).collect();
    ComplexDataset::from_unfiltered(
        DatasetSource::Binary16,
        Encoder::Mnist,
        Preset::Table3.id().to_string(),
        config,
        objects,
        [16, 0, 0],
    )
    .expect("shipped patterns fit the Table 3 grid")
}

/// Dataset inputs on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IngestFormat {
    /// Directory holding `train-images-idx3-ubyte` and optionally
    /// `t10k-images-idx3-ubyte` plus matching label files.
    Idx,
    /// Directory of `.png` images on the configuration's grid.
    PngDir,
}

/// A decoded IDX image file: `count` images of `rows x cols` bytes.
#[derive(Clone, Debug, PartialEq)]
pub struct IdxImages {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<Vec<u8>>,
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes(b.try_into().expect("4 bytes")))
        .ok_or_else(|| Error::Parse {
            path: path.to_path_buf(),
            offset: offset as u64,
            message: "unexpected end of file".into(),
        })
}

/// Parses a big-endian IDX3 image file.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("magic {magic}, expected {IDX_IMAGES_MAGIC}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    let rows = be_u32(bytes, 8, path)? as usize;
    let cols = be_u32(bytes, 12, path)? as usize;
    let size = rows * cols;
    let expected = 16 + count * size;
    if bytes.len() != expected {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len().min(expected) as u64,
            message: format!("{count} images of {rows}x{cols} need {expected} bytes, file has {}", bytes.len()),
        });
    }
    let pixels = bytes[16..].chunks_exact(size.max(1)).take(count).map(<[u8]>::to_vec).collect();
    Ok(IdxImages { rows, cols, pixels })
}

/// Parses a big-endian IDX1 label file.
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, path)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: 0,
            message: format!("magic {magic}, expected {IDX_LABELS_MAGIC}"),
        });
    }
    let count = be_u32(bytes, 4, path)? as usize;
    if bytes.len() != 8 + count {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: bytes.len().min(8 + count) as u64,
            message: format!("{count} labels need {} bytes, file has {}", 8 + count, bytes.len()),
        });
    }
    Ok(bytes[8..].to_vec())
}

/// Training/validation sizes for an MNIST training file of `n` images:
/// 55000/5000 for the full set, otherwise the same 1:11 ratio.
pub fn mnist_train_split(n: usize) -> (usize, usize) {
    if n == 60_000 {
        (55_000, 5_000)
    } else {
        let val = (n as f64 / 12.0).round() as usize;
        (n - val, val)
    }
}

/// Train/validation/test sizes for an image directory, in the 34:12:12
/// proportion of the 58-image cell dataset.
pub fn image_dir_split(n: usize) -> [usize; 3] {
    let held = (n as f64 * 12.0 / 58.0).round() as usize;
    let held = held.min(n / 2);
    [n - 2 * held, held, held]
}

/// Places `src` (`rows x cols`) at the centre of a zero `target` grid.
fn zero_pad(src: &[u8], rows: usize, cols: usize, target: (usize, usize)) -> Result<Vec<u8>> {
    if rows > target.0 || cols > target.1 {
        return Err(Error::Shape(format!("{rows}x{cols} image larger than {target:?} grid")));
    }
    let (top, left) = ((target.0 - rows) / 2, (target.1 - cols) / 2);
    let mut out = vec![0u8; target.0 * target.1];
    for r in 0..rows {
        out[(top + r) * target.1 + left..(top + r) * target.1 + left + cols]
            .copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
    Ok(out)
}

fn mnist_object(pixels: &[u8], config: &OpticalConfig) -> Result<ComplexField> {
    let (rows, cols) = config.highres_shape();
    let values = pixels
        .iter()
        .map(|&p| encode_mnist(f64::from(p) / 255.0))
        .collect::<Result<Vec<_>>>()?;
    ComplexField::from_complex(rows, cols, config.highres_pitch(), &values)
}

fn read_idx(dir: &Path, name: &str) -> Result<Option<(PathBuf, Vec<u8>)>> {
    let path = dir.join(name);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some((path.clone(), read_file(&path)?)))
}

fn idx_objects(dir: &Path, images: &str, labels: &str, config: &OpticalConfig) -> Result<Option<Vec<ComplexField>>> {
    let Some((path, bytes)) = read_idx(dir, images)? else {
        return Ok(None);
    };
    let parsed = parse_idx_images(&bytes, &path)?;
    if let Some((lpath, lbytes)) = read_idx(dir, labels)? {
        let l = parse_idx_labels(&lbytes, &lpath)?;
        if l.len() != parsed.pixels.len() {
            return Err(Error::Parse {
                path: lpath,
                offset: 4,
                message: format!("{} labels for {} images", l.len(), parsed.pixels.len()),
            });
        }
    }
    let target = config.highres_shape();
    parsed
        .pixels
        .iter()
        .map(|p| mnist_object(&zero_pad(p, parsed.rows, parsed.cols, target)?, config))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn ingest_idx(dir: &Path, preset: String, config: OpticalConfig) -> Result<ComplexDataset> {
    let train = idx_objects(dir, "train-images-idx3-ubyte", "train-labels-idx1-ubyte", &config)?.ok_or_else(|| {
        Error::EmptyDataset(format!("{}: no train-images-idx3-ubyte", dir.display()))
    })?;
    let test = idx_objects(dir, "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte", &config)?.unwrap_or_default();
    if train.is_empty() {
        return Err(Error::EmptyDataset(format!("{}: training file holds no images", dir.display())));
    }
    let (n_train, n_val) = mnist_train_split(train.len());
    let test_len = test.len();
    let mut objects = train;
    objects.extend(test);
    ComplexDataset::from_unfiltered(
        DatasetSource::Mnist,
        Encoder::Mnist,
        preset,
        config,
        objects,
        [n_train, n_val, test_len],
    )
}

fn ingest_png_dir(dir: &Path, preset: String, config: OpticalConfig) -> Result<ComplexDataset> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::EmptyDataset(format!("{}: no .png images", dir.display())));
    }
    let (rows, cols) = config.highres_shape();
    let mut objects = Vec::with_capacity(paths.len());
    for path in &paths {
        let img = image::open(path)
            .map_err(|e| Error::Parse {
                path: path.clone(),
                offset: 0,
                message: e.to_string(),
            })?
            .to_rgb8();
        if (img.height() as usize, img.width() as usize) != (rows, cols) {
            return Err(Error::Shape(format!(
                "{}: {}x{} image for a {rows}x{cols} grid",
                path.display(),
                img.height(),
                img.width()
            )));
        }
        let values = img
            .pixels()
            .map(|p| encode_ucsb(p.0.iter().map(|&c| f64::from(c)).sum()))
            .collect::<Result<Vec<_>>>()?;
        objects.push(ComplexField::from_complex(rows, cols, config.highres_pitch(), &values)?);
    }
    let split = image_dir_split(objects.len());
    ComplexDataset::from_unfiltered(DatasetSource::ImageDir, Encoder::Ucsb, preset, config, objects, split)
}

/// Reads a dataset from `path` and filters it for `config`.
pub fn ingest(path: &Path, format: IngestFormat, preset: String, config: OpticalConfig) -> Result<ComplexDataset> {
    config.validate()?;
    if !path.is_dir() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "not a directory"),
        ));
    }
    match format {
        IngestFormat::Idx => ingest_idx(path, preset, config),
        IngestFormat::PngDir => ingest_png_dir(path, preset, config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Complex64, b: Complex64) -> bool {
        (a - b).norm() < 1e-12
    }

    #[test]
    fn mnist_encoder_values() {
        assert!(close(encode_mnist(0.0).unwrap(), Complex64::new(1.0, 0.0)));
        assert!(close(encode_mnist(1.0).unwrap(), Complex64::new(0.0, -1.0)));
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(encode_mnist(0.5).unwrap(), Complex64::new(h, -h)));
        assert!(encode_mnist(1.01).is_err());
        assert!(encode_mnist(-0.1).is_err());
    }

    #[test]
    fn ucsb_encoder_values() {
        assert!(close(encode_ucsb(765.0).unwrap(), Complex64::new(1.0, 0.0)));
        assert!(close(encode_ucsb(0.0).unwrap(), Complex64::new(-1.0, 0.0)));
        assert!(close(encode_ucsb(382.5).unwrap(), Complex64::new(0.0, 1.0)));
        assert!(encode_ucsb(766.0).is_err());
    }

    #[test]
    fn encoders_have_unit_modulus_and_stated_phase_range() {
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            let z = encode_mnist(p).unwrap();
            assert!((z.norm() - 1.0).abs() < 1e-12);
            assert!((-std::f64::consts::FRAC_PI_2 - 1e-12..=1e-12).contains(&z.arg()));
            let w = encode_ucsb(p * 765.0).unwrap();
            assert!((w.norm() - 1.0).abs() < 1e-12);
            assert!((-1e-12..=std::f64::consts::PI + 1e-12).contains(&w.arg().rem_euclid(2.0 * std::f64::consts::PI)));
        }
    }

    #[test]
    fn lowpass_properties() {
        let config = Preset::Table1.config();
        let (rows, cols) = config.highres_shape();
        let pitch = config.highres_pitch();
        let flat = ComplexField::constant(rows, cols, pitch, Complex64::new(0.3, -0.8));
        let out = lowpass_by_synthetic_na(&flat, &config);
        for i in 0..flat.len() {
            assert!((out.re[i] - flat.re[i]).abs() < 1e-12 && (out.im[i] - flat.im[i]).abs() < 1e-12);
        }
        let noisy = ComplexField::from_fn(rows, cols, pitch, |r, c| {
            Complex64::new(((r * 7 + c * 3) % 5) as f64, ((r + 2 * c) % 3) as f64)
        });
        let once = lowpass_by_synthetic_na(&noisy, &config);
        let twice = lowpass_by_synthetic_na(&once, &config);
        for i in 0..once.len() {
            assert!((once.re[i] - twice.re[i]).abs() < 1e-10);
        }
        assert!(once.energy() <= noisy.energy() + 1e-9);
        // Nyquist tone: 16 cycles over 32 pixels is far above the cutoff.
        let tone = ComplexField::from_fn(rows, cols, pitch, |_, c| {
            Complex64::new(if c % 2 == 0 { 1.0 } else { -1.0 }, 0.0)
        });
        let killed = lowpass_by_synthetic_na(&tone, &config);
        assert!(killed.energy() < 1e-20);
    }

    #[test]
    fn binary16_is_regenerated_by_its_seed() {
        let (patterns, seed) = binary16_patterns(BINARY16_SEED);
        assert_eq!(seed, BINARY16_SEED);
        assert_eq!(patterns, BINARY16.to_vec());
    }

    #[test]
    fn binary16_dataset_shape_and_distinctness() {
        let ds = make_binary16();
        assert_eq!(ds.len(), 16);
        assert!(ds.objects().iter().all(|o| o.shape() == (4, 4)));
        let mut sorted = BINARY16.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
        assert!(distinct_after_filtering(&BINARY16, &ds.config));
        // Uniform over 16 objects carries log2(16) = 4 bits.
        assert_eq!((ds.len() as f64).log2(), 4.0);
        let zero = binary_field(0, &ds.config);
        assert!(zero.re.iter().all(|&v| v == 1.0) && zero.im.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn split_rules() {
        assert_eq!(mnist_train_split(60_000), (55_000, 5_000));
        assert_eq!(mnist_train_split(1000), (917, 83));
        assert_eq!(image_dir_split(58), [34, 12, 12]);
        assert_eq!(image_dir_split(1), [1, 0, 0]);
    }

    fn idx_bytes(count: u32, rows: u32, cols: u32) -> Vec<u8> {
        let mut b = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend((0..count * rows * cols).map(|i| (i % 256) as u8));
        b
    }

    #[test]
    fn idx_parsing_and_errors() {
        let p = Path::new("imgs");
        let parsed = parse_idx_images(&idx_bytes(3, 2, 2), p).unwrap();
        assert_eq!(parsed.pixels.len(), 3);
        assert_eq!(parsed.pixels[1], vec![4, 5, 6, 7]);
        let mut bad = idx_bytes(3, 2, 2);
        bad[3] = 0;
        match parse_idx_images(&bad, p) {
            Err(Error::Parse { path, offset, .. }) => {
                assert_eq!(path, p);
                assert_eq!(offset, 0);
            }
            other => panic!("{other:?}"),
        }
        let short = &idx_bytes(3, 2, 2)[..20];
        assert!(matches!(parse_idx_images(short, p), Err(Error::Parse { offset: 20, .. })));
        assert!(matches!(parse_idx_images(&[0, 0], p), Err(Error::Parse { offset: 0, .. })));
        let mut labels = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
        labels.extend_from_slice(&2u32.to_be_bytes());
        labels.extend_from_slice(&[7, 1]);
        assert_eq!(parse_idx_labels(&labels, p).unwrap(), vec![7, 1]);
        assert!(parse_idx_images(&labels, p).is_err());
    }

    #[test]
    fn zero_padding_centres_the_digit() {
        let src: Vec<u8> = (1..=4).collect();
        let out = zero_pad(&src, 2, 2, (4, 4)).unwrap();
        assert_eq!(out, vec![0, 0, 0, 0, 0, 1, 2, 0, 0, 3, 4, 0, 0, 0, 0, 0]);
        assert!(zero_pad(&src, 2, 2, (1, 4)).is_err());
    }

    #[test]
    fn idx_directory_ingest() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("train-images-idx3-ubyte"), idx_bytes(24, 28, 28)).unwrap();
        fs::write(dir.path().join("t10k-images-idx3-ubyte"), idx_bytes(5, 28, 28)).unwrap();
        let ds = ingest(dir.path(), IngestFormat::Idx, "table1".into(), Preset::Table1.config()).unwrap();
        assert_eq!(ds.split_sizes(), [22, 2, 5]);
        assert!(ds.objects().iter().all(|o| o.shape() == (32, 32)));
        // Same files, same bytes.
        let again = ingest(dir.path(), IngestFormat::Idx, "table1".into(), Preset::Table1.config()).unwrap();
        assert_eq!(ds.to_bytes().unwrap(), again.to_bytes().unwrap());
    }

    #[test]
    fn empty_directories_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            ingest(dir.path(), IngestFormat::PngDir, "table2".into(), Preset::Table2.config()),
            Err(Error::EmptyDataset(_))
        ));
        assert!(matches!(
            ingest(dir.path(), IngestFormat::Idx, "table1".into(), Preset::Table1.config()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn png_directory_sums_channels() {
        let dir = tempfile::tempdir().unwrap();
        let config = Preset::Table3.config();
        let img = image::RgbImage::from_fn(4, 4, |x, y| image::Rgb([255, (x * 60) as u8, (y * 60) as u8]));
        img.save(dir.path().join("a.png")).unwrap();
        let ds = ingest(dir.path(), IngestFormat::PngDir, "custom".into(), config.clone()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.encoder, Encoder::Ucsb);
        // Unfiltered object equals encode_ucsb of the channel sum.
        let expected: Vec<Complex64> = img
            .pixels()
            .map(|p| encode_ucsb(p.0.iter().map(|&c| f64::from(c)).sum()).unwrap())
            .collect();
        let raw = ComplexField::from_complex(4, 4, config.highres_pitch(), &expected).unwrap();
        let filtered = lowpass_by_synthetic_na(&raw, &config);
        for i in 0..16 {
            assert!((ds.objects()[0].re[i] - filtered.re[i]).abs() < 1e-12);
        }
        image::RgbImage::new(3, 3).save(dir.path().join("b.png")).unwrap();
        assert!(matches!(
            ingest(dir.path(), IngestFormat::PngDir, "custom".into(), config),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn archive_round_trip_is_exact() {
        let ds = make_binary16();
        let bytes = ds.to_bytes().unwrap();
        let back = ComplexDataset::from_bytes(&bytes, Path::new("ds")).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let mut bad = bytes.clone();
        bad.truncate(bytes.len() - 8);
        assert!(matches!(
            ComplexDataset::from_bytes(&bad, Path::new("ds")),
            Err(Error::Parse { .. })
        ));
    }
}
