//! Persistence: the `UNW1` weight container, binary PPM/PGM images, model
//! directories and dataset indexing.
//!
//! Container layout (little-endian):
//!
//! ```text
//! "UNW1" | u16 version = 1 | u32 count
//! count x { u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | ndim x u32 dim | payload }
//! ```
//!
//! dtype tags: 0 = f32, 1 = i8, 2 = i32. Auxiliary tensors hang off a base
//! name with the suffixes `.scale`, `.zero_point`, `.calib.min` and
//! `.calib.max`.

use std::fs;
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::UNetConfig;
use crate::quant::QuantScheme;
use crate::tensor::{Payload, QuantParams, Tensor};

pub const MAGIC: &[u8; 4] = b"UNW1";
pub const VERSION: u16 = 1;

const AUX_SUFFIXES: [&str; 4] = [".scale", ".zero_point", ".calib.min", ".calib.max"];

/// True for names carrying quantization or calibration side data.
pub fn is_auxiliary_name(name: &str) -> bool {
    AUX_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// A raw named array as stored in the container.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredTensor {
    pub dims: Vec<usize>,
    pub data: Payload,
}

impl StoredTensor {
    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Self {
        StoredTensor {
            dims,
            data: Payload::F32(values),
        }
    }

    pub fn scalar_f32(v: f32) -> Self {
        StoredTensor::f32(vec![1], vec![v])
    }

    pub fn scalar_i32(v: i32) -> Self {
        StoredTensor {
            dims: vec![1],
            data: Payload::I32(vec![v]),
        }
    }

    pub fn from_tensor(t: &Tensor) -> Self {
        StoredTensor {
            dims: t.shape().to_vec(),
            data: t.payload().clone(),
        }
    }

    pub fn to_f32_tensor(&self, name: &str) -> Result<Tensor> {
        match &self.data {
            Payload::F32(v) => Tensor::from_f32(self.dims.clone(), v.clone()),
            other => Err(Error::Binding {
                name: name.to_string(),
                reason: format!("expected f32, found {:?}", other.dtype()),
            }),
        }
    }

    /// Single-element value as f64.
    pub fn scalar(&self) -> Option<f64> {
        if self.data.len() != 1 {
            return None;
        }
        Some(match &self.data {
            Payload::F32(v) => v[0] as f64,
            Payload::I8(v) => v[0] as f64,
            Payload::I32(v) => v[0] as f64,
        })
    }
}

/// Ordered collection of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: IndexMap<String, StoredTensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: StoredTensor) -> Result<()> {
        let name = name.into();
        let n: usize = t.dims.iter().product();
        if n != t.data.len() {
            return Err(Error::Shape(format!(
                "`{name}`: dims {:?} need {n} elements, payload has {}",
                t.dims,
                t.data.len()
            )));
        }
        if self.tensors.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&StoredTensor> {
        self.tensors.get(name)
    }

    /// Like [`get`](Self::get) but a missing name is a binding error.
    pub fn require(&self, name: &str) -> Result<&StoredTensor> {
        self.get(name).ok_or_else(|| Error::Binding {
            name: name.to_string(),
            reason: "missing from weight store".into(),
        })
    }

    pub fn remove(&mut self, name: &str) -> Option<StoredTensor> {
        self.tensors.shift_remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &StoredTensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Stores an integer tensor plus its `.scale` and `.zero_point` siblings.
    pub fn insert_quantized(&mut self, name: &str, t: &Tensor) -> Result<()> {
        let q = t
            .quant()
            .ok_or_else(|| Error::Shape(format!("`{name}` is not quantized")))?;
        self.insert(name, StoredTensor::from_tensor(t))?;
        self.insert(format!("{name}.scale"), StoredTensor::scalar_f32(q.scale))?;
        self.insert(format!("{name}.zero_point"), StoredTensor::scalar_i32(q.zero_point))
    }

    /// Reassembles an integer tensor from its payload and siblings. The bit
    /// width is not stored and comes from the caller's scheme.
    pub fn quantized_tensor(&self, name: &str, bits: u8, signed: bool, symmetric: bool) -> Result<Tensor> {
        let raw = self.require(name)?;
        let scale = self
            .require(&format!("{name}.scale"))?
            .scalar()
            .ok_or_else(|| Error::Binding {
                name: format!("{name}.scale"),
                reason: "expected one element".into(),
            })?;
        let zero_point = self
            .get(&format!("{name}.zero_point"))
            .and_then(StoredTensor::scalar)
            .unwrap_or(0.0);
        let params = QuantParams {
            bits,
            scale: scale as f32,
            zero_point: zero_point as i32,
            signed,
            symmetric,
        };
        Tensor::new(raw.dims.clone(), raw.data.clone(), Some(params)).map_err(|e| Error::Binding {
            name: name.to_string(),
            reason: e.to_string(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let tag: u8 = match t.data {
                Payload::F32(_) => 0,
                Payload::I8(_) => 1,
                Payload::I32(_) => 2,
            };
            out.push(tag);
            out.push(t.dims.len() as u8);
            for &d in &t.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match &t.data {
                Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                Payload::I8(v) => out.extend(v.iter().map(|&x| x as u8)),
                Payload::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: String::from_utf8_lossy(MAGIC).into_owned(),
                found: String::from_utf8_lossy(magic).into_owned(),
            });
        }
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let count = r.u32("tensor count")?;
        let mut store = WeightStore::new();
        for i in 0..count {
            let len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "name")?)
                .map_err(|_| Error::UnsupportedFormat(format!("tensor {i} name is not UTF-8")))?
                .to_string();
            let tag = r.u8("dtype")?;
            let elem = match tag {
                0 | 2 => 4,
                1 => 1,
                t => return Err(Error::UnknownDtype(t)),
            };
            let ndim = r.u8("ndim")? as usize;
            let mut dims = Vec::with_capacity(ndim);
            let mut n: usize = 1;
            for _ in 0..ndim {
                let d = r.u32("dims")? as usize;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::UnsupportedFormat(format!("`{name}`: element count overflows")))?;
                dims.push(d);
            }
            let nbytes = n
                .checked_mul(elem)
                .ok_or_else(|| Error::UnsupportedFormat(format!("`{name}`: byte length overflows")))?;
            let raw = r.take(nbytes, &name)?;
            let data = match tag {
                0 => Payload::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Payload::I8(raw.iter().map(|&b| b as i8).collect()),
                _ => Payload::I32(
                    raw.chunks_exact(4)
                        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
            };
            store.insert(name, StoredTensor { dims, data })?;
        }
        if r.pos != bytes.len() {
            return Err(Error::UnsupportedFormat(format!(
                "{} trailing bytes after last tensor",
                bytes.len() - r.pos
            )));
        }
        Ok(store)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "need {n} bytes for {what} at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn write_store(path: impl AsRef<Path>, store: &WeightStore) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, store.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_store(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(&bytes)
}

// ---------------------------------------------------------------------------
// Netpbm images

/// Binary single-channel mask with values in {0, 1}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|&&v| v > 1) {
            return Err(Error::UnsupportedFormat(format!("mask value {v} is not binary")));
        }
        Ok(Mask { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            height,
            width,
            data: vec![0; height * width],
        }
    }
}

struct Pnm<'a> {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    pixels: &'a [u8],
}

fn parse_pnm(bytes: &[u8]) -> Result<Pnm<'_>> {
    let mut pos = 0;
    let mut fields: Vec<usize> = Vec::with_capacity(3);
    if bytes.len() < 2 {
        return Err(Error::Truncated("netpbm header".into()));
    }
    let magic = [bytes[0], bytes[1]];
    pos += 2;
    while fields.len() < 3 {
        match bytes.get(pos) {
            None => return Err(Error::Truncated("netpbm header".into())),
            Some(b'#') => {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => pos += 1,
            Some(c) if c.is_ascii_digit() => {
                let start = pos;
                while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                    pos += 1;
                }
                let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
                let v: usize = text
                    .parse()
                    .map_err(|_| Error::UnsupportedFormat(format!("dimension `{text}` overflows")))?;
                fields.push(v);
            }
            Some(c) => {
                return Err(Error::UnsupportedFormat(format!(
                    "unexpected byte {c:#04x} in netpbm header"
                )))
            }
        }
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::Truncated("netpbm header".into())),
    }
    Ok(Pnm {
        magic,
        width: fields[0],
        height: fields[1],
        maxval: fields[2],
        pixels: &bytes[pos..],
    })
}

fn check_raster(p: &Pnm<'_>, channels: usize) -> Result<usize> {
    if p.maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "maxval {} (only 255 is supported)",
            p.maxval
        )));
    }
    let n = p
        .width
        .checked_mul(p.height)
        .and_then(|v| v.checked_mul(channels))
        .filter(|&v| v <= (1usize << 34))
        .ok_or_else(|| Error::UnsupportedFormat(format!("dimensions {}x{} overflow", p.width, p.height)))?;
    if p.width == 0 || p.height == 0 {
        return Err(Error::UnsupportedFormat("zero-sized image".into()));
    }
    if p.pixels.len() < n {
        return Err(Error::Truncated(format!(
            "raster needs {n} bytes, {} present",
            p.pixels.len()
        )));
    }
    Ok(n)
}

/// Decodes a binary P6 image into a `(1, 3, H, W)` tensor scaled to [0, 1].
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let p = parse_pnm(bytes)?;
    if &p.magic != b"P6" {
        return Err(Error::UnsupportedFormat(format!(
            "magic {:?}, expected P6",
            String::from_utf8_lossy(&p.magic)
        )));
    }
    let n = check_raster(&p, 3)?;
    let (h, w) = (p.height, p.width);
    let mut data = vec![0.0f32; n];
    for (i, px) in p.pixels[..n].chunks_exact(3).enumerate() {
        for c in 0..3 {
            data[c * h * w + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::from_f32(vec![1, 3, h, w], data)
}

/// Encodes a `(1, 3, H, W)` tensor in [0, 1] as P6, rounding to 8 bits.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = image.nchw()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!("expected (1, 3, H, W), got {:?}", image.shape())));
    }
    let v = image.as_f32()?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for i in 0..h * w {
        for ch in 0..3 {
            out.push((v[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

/// Decodes a P5 mask whose pixels are 0 or 255.
pub fn decode_pgm(bytes: &[u8]) -> Result<Mask> {
    let p = parse_pnm(bytes)?;
    if &p.magic != b"P5" {
        return Err(Error::UnsupportedFormat(format!(
            "magic {:?}, expected P5",
            String::from_utf8_lossy(&p.magic)
        )));
    }
    let n = check_raster(&p, 1)?;
    let data = p.pixels[..n]
        .iter()
        .map(|&v| match v {
            0 => Ok(0),
            255 => Ok(1),
            other => Err(Error::UnsupportedFormat(format!("mask value {other} not in {{0, 255}}"))),
        })
        .collect::<Result<Vec<u8>>>()?;
    Mask::new(p.height, p.width, data)
}

pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width, mask.height).into_bytes();
    out.extend(mask.data.iter().map(|&v| if v != 0 { 255 } else { 0 }));
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    decode_ppm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(image)?).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    decode_pgm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &Mask) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(mask)).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Model directories

pub const WEIGHTS_FILE: &str = "weights.unw";
pub const CONFIG_FILE: &str = "config.json";

/// Contents of `config.json` in a model directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    #[serde(flatten)]
    pub config: UNetConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantScheme>,
}

pub fn write_model_dir(dir: impl AsRef<Path>, manifest: &ModelManifest, store: &WeightStore) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let json = serde_json::to_string_pretty(manifest).map_err(|e| Error::Json {
        context: "model manifest".into(),
        source: e,
    })?;
    let cfg = dir.join(CONFIG_FILE);
    fs::write(&cfg, json + "\n").map_err(|e| Error::io(cfg, e))?;
    write_store(dir.join(WEIGHTS_FILE), store)
}

/// Reads only `config.json` of a model directory.
pub fn read_manifest(dir: impl AsRef<Path>) -> Result<ModelManifest> {
    let cfg = dir.as_ref().join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg).map_err(|e| Error::io(&cfg, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text).map_err(|e| Error::Json {
        context: cfg.display().to_string(),
        source: e,
    })?;
    manifest.config.validate()?;
    Ok(manifest)
}

pub fn read_model_dir(dir: impl AsRef<Path>) -> Result<(ModelManifest, WeightStore)> {
    let manifest = read_manifest(&dir)?;
    let store = read_store(dir.as_ref().join(WEIGHTS_FILE))?;
    Ok((manifest, store))
}

/// Loads a model directory: float weights, or quantized weights when the
/// manifest carries a quantization scheme.
pub fn load_model(dir: impl AsRef<Path>) -> Result<crate::model::UNetModel> {
    let (manifest, store) = read_model_dir(dir)?;
    let graph = crate::model::build(manifest.config)?;
    match &manifest.quant {
        Some(scheme) => crate::quant::load_quantized(&graph, scheme, &store),
        None => graph.bind_weights(&store),
    }
}

/// Writes `model` (float or quantized) as a model directory.
pub fn save_model(dir: impl AsRef<Path>, model: &crate::model::UNetModel) -> Result<()> {
    if model.is_quantized() {
        let (manifest, store) = crate::quant::export_quantized(model)?;
        write_model_dir(dir, &manifest, &store)
    } else {
        let manifest = ModelManifest {
            config: *model.config(),
            quant: None,
        };
        write_model_dir(dir, &manifest, &model.export_weights()?)
    }
}

// ---------------------------------------------------------------------------
// Datasets

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPair {
    pub stem: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub pairs: Vec<DatasetPair>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

fn stems(dir: &Path, ext: &str) -> Result<IndexMap<String, PathBuf>> {
    let mut out: Vec<(String, PathBuf)> = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) == Some(ext) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.push((stem.to_string(), path.clone()));
            }
        }
    }
    out.sort_by(|a, b| a.0.as_bytes().cmp(b.0.as_bytes()));
    Ok(out.into_iter().collect())
}

/// Pairs `images/*.ppm` with `gt/*.pgm` by file stem, sorted bytewise by
/// stem. Orphans on either side are an integrity error listing every stem.
pub fn index_dataset(dir: impl AsRef<Path>, limit: Option<usize>) -> Result<DatasetIndex> {
    let dir = dir.as_ref();
    let images = stems(&dir.join("images"), "ppm")?;
    let masks = stems(&dir.join("gt"), "pgm")?;
    let mut orphans: Vec<String> = images
        .keys()
        .filter(|s| !masks.contains_key(*s))
        .map(|s| format!("image without mask: {s}"))
        .collect();
    orphans.extend(
        masks
            .keys()
            .filter(|s| !images.contains_key(*s))
            .map(|s| format!("mask without image: {s}")),
    );
    if !orphans.is_empty() {
        return Err(Error::Integrity(orphans.join("; ")));
    }
    let mut pairs: Vec<DatasetPair> = images
        .into_iter()
        .map(|(stem, image)| {
            let mask = masks[&stem].clone();
            DatasetPair { stem, image, mask }
        })
        .collect();
    if let Some(n) = limit {
        pairs.truncate(n);
    }
    Ok(DatasetIndex { pairs })
}
