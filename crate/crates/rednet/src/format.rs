//! On-disk artifact format: a TOML manifest describing the structure,
//! next to an NSNN blob holding every parameter as little-endian f32.
//!
//! Blob layout: magic "NSNN", version byte, then the parameter regions.
//! A manifest region gives (offset, len) in bytes; regions must tile the
//! blob contiguously from offset 5 to end-of-file in manifest order, so
//! truncation, overlap, and count mismatches are all detectable.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{atomic_write, ByteCursor};
use crate::error::{Error, Result};
use crate::heads::{multi_indices, Family, FnnHead, Head, PceModel};
use crate::nn::Layer;
use crate::reduce::{Method, ProjectionMap};
use crate::{Network, Tensor};

pub const BLOB_MAGIC: [u8; 4] = *b"NSNN";
pub const BLOB_VERSION: u8 = 1;
pub const MANIFEST_FORMAT: &str = "NSNN";
pub const MANIFEST_VERSION: u32 = 1;

/// Byte range inside the blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
struct Region {
    offset: u64,
    len: u64,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(&BLOB_MAGIC);
        bytes.push(BLOB_VERSION);
        BlobWriter { bytes }
    }

    fn append(&mut self, data: &[f64]) -> Region {
        let offset = self.bytes.len() as u64;
        for &v in data {
            self.bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Region {
            offset,
            len: self.bytes.len() as u64 - offset,
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BlobReader<'a> {
    bytes: &'a [u8],
    /// Where the next region must start; regions tile the payload.
    next: u64,
}

impl<'a> BlobReader<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut cur = ByteCursor::new(bytes);
        let magic = cur.take(4, "blob magic")?;
        if magic != BLOB_MAGIC {
            return Err(Error::Parse {
                offset: 0,
                message: format!("bad blob magic {magic:?}, expected \"NSNN\""),
            });
        }
        let version = cur.u8("blob version")?;
        if version != BLOB_VERSION {
            return Err(Error::Parse {
                offset: 4,
                message: format!("unsupported blob version {version}"),
            });
        }
        Ok(BlobReader { bytes, next: 5 })
    }

    /// Reads a region as f64 values, enforcing the tiling invariant and
    /// the expected element count.
    fn read(&mut self, region: Region, expected: usize, what: &str) -> Result<Vec<f64>> {
        if region.offset != self.next {
            return Err(Error::Validation(format!(
                "{what} region starts at {} but the previous region ends at {}; \
                 regions must tile the blob",
                region.offset, self.next
            )));
        }
        if region.len % 4 != 0 {
            return Err(Error::Validation(format!(
                "{what} region length {} is not a multiple of 4",
                region.len
            )));
        }
        if region.len / 4 != expected as u64 {
            return Err(Error::Validation(format!(
                "{what} region holds {} values, expected {expected}",
                region.len / 4
            )));
        }
        let end = region.offset.checked_add(region.len).ok_or_else(|| {
            Error::Validation(format!("{what} region overflows"))
        })?;
        if end > self.bytes.len() as u64 {
            return Err(Error::Validation(format!(
                "{what} region ends at {end} but the blob has {} bytes (truncated?)",
                self.bytes.len()
            )));
        }
        let mut out = Vec::with_capacity(expected);
        let start = region.offset as usize;
        for chunk in self.bytes[start..end as usize].chunks_exact(4) {
            out.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]) as f64);
        }
        self.next = end;
        Ok(out)
    }

    fn finish(&self) -> Result<()> {
        if self.next != self.bytes.len() as u64 {
            return Err(Error::Validation(format!(
                "blob has {} bytes but the manifest accounts for {}",
                self.bytes.len(),
                self.next
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum LayerRecord {
    Linear {
        n_in: usize,
        n_out: usize,
        weights: Region,
        bias: Region,
    },
    Conv2d {
        c_in: usize,
        c_out: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        weights: Region,
        bias: Region,
    },
    Relu,
    Softplus {
        beta: f64,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    Flatten,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkManifest {
    format: String,
    version: u32,
    kind: String,
    blob: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ProjectionManifest {
    format: String,
    version: u32,
    kind: String,
    blob: String,
    method: String,
    r: usize,
    n_l: usize,
    basis: Region,
    spectrum: Region,
    #[serde(skip_serializing_if = "Option::is_none")]
    center: Option<Region>,
}

#[derive(Debug, Serialize, Deserialize)]
struct PceManifest {
    format: String,
    version: u32,
    kind: String,
    blob: String,
    family: String,
    degree: usize,
    r: usize,
    n_out: usize,
    coefficients: Region,
    mean: Region,
    scale: Region,
}

#[derive(Debug, Serialize, Deserialize)]
struct FnnManifest {
    format: String,
    version: u32,
    kind: String,
    blob: String,
    beta: f64,
    /// Layer widths from input to output; weight i maps dims[i] to
    /// dims[i+1].
    dims: Vec<usize>,
    weights: Vec<Region>,
}

fn toml_error(e: toml::de::Error) -> Error {
    Error::Parse {
        offset: e.span().map(|s| s.start).unwrap_or(0),
        message: e.message().to_string(),
    }
}

fn read_manifest(path: &Path) -> Result<(String, toml::Table)> {
    let text = std::fs::read_to_string(path)?;
    let table: toml::Table = text.parse().map_err(toml_error)?;
    Ok((text, table))
}

/// Header fields are checked from the raw table before the typed parse,
/// so a wrong-kind manifest reports its kind instead of missing fields.
fn check_header(table: &toml::Table, kind_want: &str) -> Result<()> {
    let format = table.get("format").and_then(|v| v.as_str()).unwrap_or("");
    if format != MANIFEST_FORMAT {
        return Err(Error::Validation(format!(
            "manifest format '{format}', expected '{MANIFEST_FORMAT}'"
        )));
    }
    let version = table.get("version").and_then(|v| v.as_integer()).unwrap_or(-1);
    if version != MANIFEST_VERSION as i64 {
        return Err(Error::Validation(format!(
            "manifest version {version}, this build reads {MANIFEST_VERSION}"
        )));
    }
    let kind = table.get("kind").and_then(|v| v.as_str()).unwrap_or("");
    if kind != kind_want {
        return Err(Error::Validation(format!(
            "manifest kind '{kind}', expected '{kind_want}'"
        )));
    }
    Ok(())
}

/// The `kind` field of a manifest, for dispatch before full parsing.
pub fn manifest_kind(path: &Path) -> Result<String> {
    let (_, table) = read_manifest(path)?;
    table
        .get("kind")
        .and_then(|v| v.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::Validation(format!(
            "manifest '{}' has no kind field",
            path.display()
        )))
}

fn blob_path(manifest_path: &Path, blob: &str) -> PathBuf {
    match manifest_path.parent() {
        Some(dir) => dir.join(blob),
        None => PathBuf::from(blob),
    }
}

fn write_pair(dir: &Path, stem: &str, manifest_text: &str, blob: Vec<u8>) -> Result<()> {
    // Blob first: a visible manifest always points at a complete blob.
    atomic_write(&dir.join(format!("{stem}.bin")), &blob)?;
    atomic_write(&dir.join(format!("{stem}.toml")), manifest_text.as_bytes())
}

fn to_manifest_text<M: Serialize>(manifest: &M) -> Result<String> {
    toml::to_string_pretty(manifest)
        .map_err(|e| Error::Validation(format!("manifest serialization failed: {e}")))
}

pub fn save_network(net: &Network, dir: &Path, stem: &str) -> Result<()> {
    let mut blob = BlobWriter::new();
    let mut records = Vec::with_capacity(net.len());
    for layer in net.layers() {
        records.push(match layer {
            Layer::Linear { weight, bias } => LayerRecord::Linear {
                n_in: weight.cols(),
                n_out: weight.rows(),
                weights: blob.append(weight.data()),
                bias: blob.append(bias.data()),
            },
            Layer::Conv2d {
                kernels,
                bias,
                stride,
                padding,
            } => LayerRecord::Conv2d {
                c_in: kernels.shape()[1],
                c_out: kernels.shape()[0],
                kh: kernels.shape()[2],
                kw: kernels.shape()[3],
                stride: *stride,
                padding: *padding,
                weights: blob.append(kernels.data()),
                bias: blob.append(bias.data()),
            },
            Layer::Relu => LayerRecord::Relu,
            Layer::Softplus { beta } => LayerRecord::Softplus { beta: *beta },
            Layer::MaxPool2d { window, stride } => LayerRecord::Maxpool2d {
                window: *window,
                stride: *stride,
            },
            Layer::Flatten => LayerRecord::Flatten,
        });
    }
    let manifest = NetworkManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        kind: "network".to_string(),
        blob: format!("{stem}.bin"),
        input_shape: net.input_shape().to_vec(),
        layers: records,
    };
    write_pair(dir, stem, &to_manifest_text(&manifest)?, blob.finish())
}

pub fn load_network(manifest_path: &Path) -> Result<Network> {
    let (text, table) = read_manifest(manifest_path)?;
    check_header(&table, "network")?;
    let manifest: NetworkManifest = toml::from_str(&text).map_err(toml_error)?;
    let blob_bytes = std::fs::read(blob_path(manifest_path, &manifest.blob))?;
    let mut blob = BlobReader::new(&blob_bytes)?;

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for record in &manifest.layers {
        layers.push(match record {
            LayerRecord::Linear {
                n_in,
                n_out,
                weights,
                bias,
            } => {
                let w = blob.read(*weights, n_in * n_out, "linear weights")?;
                let b = blob.read(*bias, *n_out, "linear bias")?;
                Layer::linear(
                    Tensor::matrix(*n_out, *n_in, w)?,
                    Tensor::from_vec(b),
                )?
            }
            LayerRecord::Conv2d {
                c_in,
                c_out,
                kh,
                kw,
                stride,
                padding,
                weights,
                bias,
            } => {
                let w = blob.read(*weights, c_out * c_in * kh * kw, "conv weights")?;
                let b = blob.read(*bias, *c_out, "conv bias")?;
                Layer::conv2d(
                    crate::tensor::Tensor::new(vec![*c_out, *c_in, *kh, *kw], w)?,
                    Tensor::from_vec(b),
                    *stride,
                    *padding,
                )?
            }
            LayerRecord::Relu => Layer::Relu,
            LayerRecord::Softplus { beta } => Layer::softplus(*beta)?,
            LayerRecord::Maxpool2d { window, stride } => Layer::maxpool2d(*window, *stride)?,
            LayerRecord::Flatten => Layer::Flatten,
        });
    }
    blob.finish()?;
    Network::new(manifest.input_shape, layers)
}

pub fn save_projection(map: &ProjectionMap, dir: &Path, stem: &str) -> Result<()> {
    let mut blob = BlobWriter::new();
    let basis = blob.append(map.basis.data());
    let spectrum = blob.append(&map.spectrum);
    let center = map.center.as_ref().map(|c| blob.append(c.data()));
    let manifest = ProjectionManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        kind: "projection".to_string(),
        blob: format!("{stem}.bin"),
        method: map.method.name().to_string(),
        r: map.r(),
        n_l: map.n_l(),
        basis,
        spectrum,
        center,
    };
    write_pair(dir, stem, &to_manifest_text(&manifest)?, blob.finish())
}

pub fn load_projection(manifest_path: &Path) -> Result<ProjectionMap> {
    let (text, table) = read_manifest(manifest_path)?;
    check_header(&table, "projection")?;
    let manifest: ProjectionManifest = toml::from_str(&text).map_err(toml_error)?;
    let blob_bytes = std::fs::read(blob_path(manifest_path, &manifest.blob))?;
    let mut blob = BlobReader::new(&blob_bytes)?;

    let (r, n_l) = (manifest.r, manifest.n_l);
    if r == 0 || r > n_l {
        return Err(Error::Validation(format!(
            "projection needs 1 <= r <= n_l, got r={r}, n_l={n_l}"
        )));
    }
    let basis = blob.read(manifest.basis, r * n_l, "basis")?;
    let spectrum = blob.read(manifest.spectrum, r, "spectrum")?;
    let center = match manifest.center {
        Some(region) => Some(Tensor::from_vec(blob.read(region, n_l, "center")?)),
        None => None,
    };
    blob.finish()?;

    // Structural checks only. A distilled basis is no longer orthonormal,
    // so the reducer-output invariants are not re-imposed here.
    if spectrum.windows(2).any(|w| w[1] > w[0]) || spectrum.iter().any(|&s| s < 0.0 || !s.is_finite()) {
        return Err(Error::Validation(
            "projection spectrum must be non-negative and non-increasing".into(),
        ));
    }
    let map = ProjectionMap {
        basis: Tensor::matrix(r, n_l, basis)?,
        method: Method::parse(&manifest.method)?,
        spectrum,
        center,
    };
    if !map.basis.all_finite() {
        return Err(Error::Validation("projection basis has non-finite entries".into()));
    }
    Ok(map)
}

pub fn save_head(head: &Head, dir: &Path, stem: &str) -> Result<()> {
    match head {
        Head::Pce(model) => save_pce(model, dir, stem),
        Head::Fnn(fnn) => save_fnn(fnn, dir, stem),
    }
}

/// Loads whichever head kind the manifest declares.
pub fn load_head(manifest_path: &Path) -> Result<Head> {
    match manifest_kind(manifest_path)?.as_str() {
        "pce" => Ok(Head::Pce(load_pce(manifest_path)?)),
        "fnn" => Ok(Head::Fnn(load_fnn(manifest_path)?)),
        other => Err(Error::Validation(format!(
            "manifest kind '{other}' is not a head"
        ))),
    }
}

pub fn save_pce(model: &PceModel, dir: &Path, stem: &str) -> Result<()> {
    model.validate()?;
    let mut blob = BlobWriter::new();
    let coefficients = blob.append(model.coefficients.data());
    let mean = blob.append(&model.mean);
    let scale = blob.append(&model.scale);
    let manifest = PceManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        kind: "pce".to_string(),
        blob: format!("{stem}.bin"),
        family: model.family.name().to_string(),
        degree: model.degree,
        r: model.r(),
        n_out: model.n_out(),
        coefficients,
        mean,
        scale,
    };
    write_pair(dir, stem, &to_manifest_text(&manifest)?, blob.finish())
}

pub fn load_pce(manifest_path: &Path) -> Result<PceModel> {
    let (text, table) = read_manifest(manifest_path)?;
    check_header(&table, "pce")?;
    let manifest: PceManifest = toml::from_str(&text).map_err(toml_error)?;
    let blob_bytes = std::fs::read(blob_path(manifest_path, &manifest.blob))?;
    let mut blob = BlobReader::new(&blob_bytes)?;

    let indices = multi_indices(manifest.r, manifest.degree)?;
    let n_terms = indices.len();
    let coefficients = blob.read(manifest.coefficients, n_terms * manifest.n_out, "coefficients")?;
    let mean = blob.read(manifest.mean, manifest.r, "mean")?;
    let scale = blob.read(manifest.scale, manifest.r, "scale")?;
    blob.finish()?;

    let model = PceModel {
        indices,
        coefficients: Tensor::matrix(n_terms, manifest.n_out, coefficients)?,
        family: Family::parse(&manifest.family)?,
        degree: manifest.degree,
        mean,
        scale,
    };
    model.validate()?;
    Ok(model)
}

pub fn save_fnn(head: &FnnHead, dir: &Path, stem: &str) -> Result<()> {
    head.validate()?;
    let mut blob = BlobWriter::new();
    let mut dims = vec![head.r()];
    let mut weights = Vec::with_capacity(head.weights.len());
    for w in &head.weights {
        dims.push(w.rows());
        weights.push(blob.append(w.data()));
    }
    let manifest = FnnManifest {
        format: MANIFEST_FORMAT.to_string(),
        version: MANIFEST_VERSION,
        kind: "fnn".to_string(),
        blob: format!("{stem}.bin"),
        beta: head.beta,
        dims,
        weights,
    };
    write_pair(dir, stem, &to_manifest_text(&manifest)?, blob.finish())
}

pub fn load_fnn(manifest_path: &Path) -> Result<FnnHead> {
    let (text, table) = read_manifest(manifest_path)?;
    check_header(&table, "fnn")?;
    let manifest: FnnManifest = toml::from_str(&text).map_err(toml_error)?;
    let blob_bytes = std::fs::read(blob_path(manifest_path, &manifest.blob))?;
    let mut blob = BlobReader::new(&blob_bytes)?;

    if manifest.dims.len() < 3 || manifest.weights.len() + 1 != manifest.dims.len() {
        return Err(Error::Validation(format!(
            "fnn manifest has {} dims and {} weight regions; need one region per \
             consecutive dim pair and at least one hidden layer",
            manifest.dims.len(),
            manifest.weights.len()
        )));
    }
    let mut weights = Vec::with_capacity(manifest.weights.len());
    for (i, region) in manifest.weights.iter().enumerate() {
        let (n_in, n_out) = (manifest.dims[i], manifest.dims[i + 1]);
        let data = blob.read(*region, n_in * n_out, "fnn weights")?;
        weights.push(Tensor::matrix(n_out, n_in, data)?);
    }
    blob.finish()?;

    let head = FnnHead {
        weights,
        beta: manifest.beta,
    };
    head.validate()?;
    Ok(head)
}

/// Bytes an artifact occupies on disk: manifest plus blob, measured from
/// the files themselves.
pub fn artifact_bytes(manifest_path: &Path) -> Result<u64> {
    let manifest_len = std::fs::metadata(manifest_path)?.len();
    let (_, table) = read_manifest(manifest_path)?;
    let blob = table
        .get("blob")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Validation(format!(
            "manifest '{}' has no blob field",
            manifest_path.display()
        )))?;
    let blob_len = std::fs::metadata(blob_path(manifest_path, blob))?.len();
    Ok(manifest_len + blob_len)
}
