//! Dataset container, NSDS file IO, and the synthetic benchmark
//! generator.
//!
//! NSDS layout, all integers little-endian:
//! magic "NSDS", version u8, sample count u32, ndim u32, dims u32 each,
//! class count u32, split tag u8 (0 train, 1 test), then n*prod(dims)
//! f32 pixels followed by n u32 labels.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::rng;
use crate::Tensor;

pub const DATASET_MAGIC: [u8; 4] = *b"NSDS";
pub const DATASET_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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

    fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub n_class: usize,
    pub split: Split,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        self.inputs[0].shape()
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.len() != self.labels.len() {
            return Err(Error::Data(format!(
                "{} inputs but {} labels",
                self.inputs.len(),
                self.labels.len()
            )));
        }
        if self.inputs.is_empty() {
            return Err(Error::Data("dataset is empty".into()));
        }
        if self.n_class < 2 {
            return Err(Error::Data(format!(
                "need at least 2 classes, got {}",
                self.n_class
            )));
        }
        let shape = self.inputs[0].shape();
        for (j, x) in self.inputs.iter().enumerate() {
            if x.shape() != shape {
                return Err(Error::Data(format!(
                    "sample {j} has shape {:?}, expected {:?}",
                    x.shape(),
                    shape
                )));
            }
            if !x.all_finite() {
                return Err(Error::Data(format!("sample {j} has non-finite pixels")));
            }
        }
        for (j, &label) in self.labels.iter().enumerate() {
            if label >= self.n_class {
                return Err(Error::Data(format!(
                    "label {label} at sample {j} out of range for {} classes",
                    self.n_class
                )));
            }
        }
        Ok(())
    }
}

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Write-then-rename so readers never observe a half-written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(std::io::Error::other(format!(
            "cannot write to '{}': no file name",
            path.display()
        ))))?;
    let unique = TEMP_COUNTER.fetch_add(1, Ordering::Relaxed);
    let mut tmp_name = name.to_os_string();
    tmp_name.push(format!(".{}.{unique}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    if let Err(e) = std::fs::write(&tmp, bytes) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    if let Err(e) = std::fs::rename(&tmp, path) {
        let _ = std::fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    dataset.validate()?;
    let shape = dataset.sample_shape();
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&DATASET_MAGIC);
    bytes.push(DATASET_VERSION);
    bytes.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &d in shape {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    bytes.extend_from_slice(&(dataset.n_class as u32).to_le_bytes());
    bytes.push(dataset.split.tag());
    for x in &dataset.inputs {
        for &v in x.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    for &label in &dataset.labels {
        bytes.extend_from_slice(&(label as u32).to_le_bytes());
    }
    atomic_write(path, &bytes)
}

/// Byte reader that reports the offset of whatever is malformed.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        ByteCursor { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> usize {
        self.pos
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "file truncated reading {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    pub(crate) fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                message: format!(
                    "{} trailing bytes after {what}",
                    self.bytes.len() - self.pos
                ),
            });
        }
        Ok(())
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut cur = ByteCursor::new(&bytes);
    let magic = cur.take(4, "magic")?;
    if magic != DATASET_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"NSDS\""),
        });
    }
    let version = cur.u8("version")?;
    if version != DATASET_VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported NSDS version {version}"),
        });
    }
    let n = cur.u32("sample count")? as usize;
    let ndim = cur.u32("dim count")? as usize;
    if ndim == 0 || ndim > 4 {
        return Err(Error::Parse {
            offset: cur.offset() - 4,
            message: format!("implausible sample rank {ndim}"),
        });
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(cur.u32("dimension")? as usize);
    }
    let n_class = cur.u32("class count")? as usize;
    let tag = cur.u8("split tag")?;
    let split = Split::from_tag(tag).ok_or_else(|| Error::Parse {
        offset: cur.offset() - 1,
        message: format!("unknown split tag {tag}"),
    })?;

    let per_sample: usize = shape.iter().product();
    let mut inputs = Vec::with_capacity(n);
    for _ in 0..n {
        let mut data = Vec::with_capacity(per_sample);
        for _ in 0..per_sample {
            data.push(cur.f32("pixel data")? as f64);
        }
        inputs.push(Tensor::new(shape.clone(), data)?);
    }
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(cur.u32("label")? as usize);
    }
    cur.finish("dataset payload")?;

    let dataset = Dataset {
        inputs,
        labels,
        n_class,
        split,
    };
    dataset.validate()?;
    Ok(dataset)
}

/// Class-conditional pattern value at one pixel, before noise.
fn pattern(class: usize, row: usize, col: usize, h: usize, w: usize) -> f64 {
    let cell = (h.min(w) / 4).max(1);
    let on = match class {
        0 => (col / cell) % 2 == 0,
        1 => (row / cell) % 2 == 0,
        2 => (row / cell + col / cell) % 2 == 0,
        3 => {
            let cy = (h as f64 - 1.0) / 2.0;
            let cx = (w as f64 - 1.0) / 2.0;
            let radius = h.min(w) as f64 / 3.0;
            let dy = row as f64 - cy;
            let dx = col as f64 - cx;
            dy * dy + dx * dx <= radius * radius
        }
        // further classes: diagonal stripes whose slope grows with the id
        k => ((row * (k - 2) + col) / cell) % 2 == 0,
    };
    if on {
        1.0
    } else {
        0.0
    }
}

/// Seeded stratified benchmark: one geometric pattern per class plus
/// Gaussian pixel noise, split 80/20 per class. Pixels are quantized to
/// f32 at generation so a save/load round trip is exact.
pub fn gen_synthetic(
    seed: u64,
    n_class: usize,
    n_per_class: usize,
    h: usize,
    w: usize,
    noise: f64,
) -> Result<(Dataset, Dataset)> {
    if n_class < 2 {
        return Err(Error::Parameter(format!(
            "synthetic data needs n_class >= 2, got {n_class}"
        )));
    }
    if n_per_class < 2 || h == 0 || w == 0 {
        return Err(Error::Parameter(
            "synthetic data needs n_per_class >= 2 and a non-empty image shape".into(),
        ));
    }
    if !(noise >= 0.0) || !noise.is_finite() {
        return Err(Error::Parameter(format!("noise must be finite and >= 0, got {noise}")));
    }

    let n_test = (n_per_class / 5).max(1);
    let n_train = n_per_class - n_test;
    let mut r = rng::seeded(seed);
    let mut train = Dataset {
        inputs: Vec::new(),
        labels: Vec::new(),
        n_class,
        split: Split::Train,
    };
    let mut test = Dataset {
        inputs: Vec::new(),
        labels: Vec::new(),
        n_class,
        split: Split::Test,
    };
    for class in 0..n_class {
        for j in 0..n_per_class {
            let mut data = Vec::with_capacity(h * w);
            for row in 0..h {
                for col in 0..w {
                    let z = standard_normal(&mut r);
                    let v = pattern(class, row, col, h, w) + noise * z;
                    data.push(v as f32 as f64);
                }
            }
            let image = Tensor::new(vec![1, h, w], data)?;
            if j < n_train {
                train.inputs.push(image);
                train.labels.push(class);
            } else {
                test.inputs.push(image);
                test.labels.push(class);
            }
        }
    }
    train.validate()?;
    test.validate()?;
    Ok((train, test))
}

/// Box-Muller draw; the log argument stays strictly positive.
fn standard_normal(r: &mut rand_chacha::ChaCha8Rng) -> f64 {
    let u1: f64 = rng::uniform(r, f64::MIN_POSITIVE, 1.0);
    let u2: f64 = rng::uniform(r, 0.0, 1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
