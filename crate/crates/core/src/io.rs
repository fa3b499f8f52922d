//! On-disk formats: the raw + TOML-sidecar volume container, model
//! checkpoints, CSV tables, JSON reports and PGM slice exports. Every writer
//! goes through a temporary file in the destination directory and an atomic
//! rename.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{MotionNet, NetConfig};
use crate::params::ParamSet;
use crate::series::FrameSeries;
use crate::tensor::Tensor;
use crate::warp::DisplacementField;

pub const VOLUME_FORMAT: &str = "petmc-volume";
pub const CHECKPOINT_FORMAT: &str = "petmc-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// Write `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn encode(data: &[f64], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * dtype.size());
    for &v in data {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn decode(bytes: &[u8], dtype: Dtype) -> Vec<f64> {
    match dtype {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    }
}

/// Payload path next to a header: same stem, `.raw` extension.
pub fn payload_path(header: &Path) -> PathBuf {
    header.with_extension("raw")
}

/// Sidecar header of a volume container. The payload holds
/// `frames × channels × dims` values, frames outermost, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    pub format: String,
    pub version: u32,
    pub dims: [usize; 3],
    pub frames: usize,
    pub channels: usize,
    pub voxel_mm: [f64; 3],
    /// Frame mid-times (min); empty for a static volume.
    pub mid_times: Vec<f64>,
    /// Frame durations (min); empty for a static volume.
    pub durations: Vec<f64>,
    pub units: String,
    pub endianness: String,
    pub dtype: Dtype,
    /// File name of the payload, relative to the header.
    pub payload: String,
}

impl VolumeHeader {
    pub fn new(dims: [usize; 3], frames: usize, channels: usize, voxel_mm: [f64; 3], units: &str) -> Self {
        Self {
            format: VOLUME_FORMAT.into(),
            version: FORMAT_VERSION,
            dims,
            frames,
            channels,
            voxel_mm,
            mid_times: Vec::new(),
            durations: Vec::new(),
            units: units.into(),
            endianness: "little".into(),
            dtype: Dtype::F32,
            payload: String::new(),
        }
    }

    pub fn values(&self) -> usize {
        self.dims.iter().product::<usize>() * self.frames * self.channels
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        let bad = |msg: String| Err(Error::format(path, msg));
        if self.format != VOLUME_FORMAT {
            return bad(format!("format tag `{}` is not `{VOLUME_FORMAT}`", self.format));
        }
        if self.version != FORMAT_VERSION {
            return bad(format!("unsupported version {}", self.version));
        }
        if self.endianness != "little" {
            return bad(format!("unsupported endianness `{}`", self.endianness));
        }
        if self.dims.contains(&0) || self.frames == 0 || self.channels == 0 {
            return bad("dims, frames and channels must be positive".into());
        }
        if self.voxel_mm.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("voxel size must be positive".into());
        }
        if !(self.mid_times.is_empty() && self.durations.is_empty()) {
            if self.mid_times.len() != self.frames || self.durations.len() != self.frames {
                return bad(format!(
                    "{} frames but {} mid-times and {} durations",
                    self.frames,
                    self.mid_times.len(),
                    self.durations.len()
                ));
            }
            crate::series::validate_timing(&self.mid_times, &self.durations).map_err(|e| Error::format(path, e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VolumeContainer {
    pub header: VolumeHeader,
    pub data: Vec<f64>,
}

impl VolumeContainer {
    pub fn from_series(series: &FrameSeries, units: &str) -> Self {
        let mut header = VolumeHeader::new(series.dims(), series.len(), 1, series.spacing_mm(), units);
        header.mid_times = series.mid_times().to_vec();
        header.durations = series.durations().to_vec();
        let data = series.frames().iter().flat_map(|f| f.data().iter().copied()).collect();
        Self { header, data }
    }

    pub fn from_volume(vol: &Tensor, voxel_mm: [f64; 3], units: &str) -> Result<Self> {
        let dims = vol.vol_dims()?;
        Ok(Self {
            header: VolumeHeader::new(dims, 1, 1, voxel_mm, units),
            data: vol.data().to_vec(),
        })
    }

    /// One frame of three channels per field.
    pub fn from_fields(fields: &[DisplacementField], series: &FrameSeries) -> Result<Self> {
        let mut header = VolumeHeader::new(series.dims(), fields.len(), 3, series.spacing_mm(), "voxel");
        if fields.len() == series.len() {
            header.mid_times = series.mid_times().to_vec();
            header.durations = series.durations().to_vec();
        }
        let mut data = Vec::with_capacity(header.values());
        for f in fields {
            if f.dims() != series.dims() {
                return Err(Error::dim("field grid differs from the series grid"));
            }
            data.extend_from_slice(f.tensor().data());
        }
        Ok(Self { header, data })
    }

    pub fn frame_len(&self) -> usize {
        self.header.dims.iter().product::<usize>() * self.header.channels
    }

    pub fn into_series(self) -> Result<FrameSeries> {
        let h = &self.header;
        if h.channels != 1 {
            return Err(Error::Config(format!("a frame series has 1 channel, container has {}", h.channels)));
        }
        if h.mid_times.is_empty() {
            return Err(Error::config("container carries no frame timing"));
        }
        let n = self.frame_len();
        let frames = self
            .data
            .chunks_exact(n)
            .map(|c| Tensor::new(h.dims.to_vec(), c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        FrameSeries::new(frames, h.mid_times.clone(), h.durations.clone(), h.voxel_mm)
    }

    pub fn into_volume(self) -> Result<Tensor> {
        if self.header.frames != 1 || self.header.channels != 1 {
            return Err(Error::config("expected a single static volume"));
        }
        Tensor::new(self.header.dims.to_vec(), self.data)
    }

    pub fn into_fields(self) -> Result<Vec<DisplacementField>> {
        let h = &self.header;
        if h.channels != 3 {
            return Err(Error::Config(format!("a displacement field has 3 channels, container has {}", h.channels)));
        }
        let [d, hh, w] = h.dims;
        let n = self.frame_len();
        self.data
            .chunks_exact(n)
            .map(|c| DisplacementField::new(Tensor::new(vec![3, d, hh, w], c.to_vec())?, h.voxel_mm))
            .collect()
    }
}

/// Write the payload, then the header, both atomically.
pub fn write_volume(path: &Path, container: &VolumeContainer) -> Result<()> {
    let mut header = container.header.clone();
    header.validate(path)?;
    if container.data.len() != header.values() {
        return Err(Error::dim(format!("{} values for a header describing {}", container.data.len(), header.values())));
    }
    let payload = payload_path(path);
    header.payload = payload
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::format(path, "header path has no usable file name"))?
        .to_string();
    write_atomic(&payload, &encode(&container.data, header.dtype))?;
    let text = toml::to_string(&header).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_volume(path: &Path) -> Result<VolumeContainer> {
    let header: VolumeHeader = toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.message().to_string()))?;
    header.validate(path)?;
    let payload = path.with_file_name(&header.payload);
    let bytes = read_bytes(&payload)?;
    let expected = header.values() * header.dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(&payload, format!("payload has {} bytes, header implies {expected}", bytes.len())));
    }
    let data = decode(&bytes, header.dtype);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::format(&payload, "payload contains non-finite values"));
    }
    Ok(VolumeContainer { header, data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub version: u32,
    pub net: NetConfig,
    pub endianness: String,
    pub dtype: Dtype,
    pub payload: String,
    pub tensors: Vec<TensorEntry>,
}

/// Parameters in full precision with names, shapes and the network config.
pub fn write_checkpoint(path: &Path, net: &MotionNet) -> Result<()> {
    let payload = payload_path(path);
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        net: net.config().clone(),
        endianness: "little".into(),
        dtype: Dtype::F64,
        payload: payload.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string(),
        tensors: net
            .params()
            .iter()
            .map(|(n, t)| TensorEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let data: Vec<f64> = net.params().tensors().iter().flat_map(|t| t.data().iter().copied()).collect();
    write_atomic(&payload, &encode(&data, Dtype::F64))?;
    let text = toml::to_string(&header).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_checkpoint(path: &Path) -> Result<MotionNet> {
    let header: CheckpointHeader = toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.message().to_string()))?;
    if header.format != CHECKPOINT_FORMAT || header.version != FORMAT_VERSION || header.endianness != "little" {
        return Err(Error::format(path, "not a supported checkpoint"));
    }
    let payload = path.with_file_name(&header.payload);
    let bytes = read_bytes(&payload)?;
    let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if bytes.len() != total * header.dtype.size() {
        return Err(Error::format(&payload, format!("payload has {} bytes, header implies {}", bytes.len(), total * header.dtype.size())));
    }
    let data = decode(&bytes, header.dtype);
    let mut params = ParamSet::new();
    let mut at = 0;
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        params.push(&t.name, Tensor::new(t.shape.clone(), data[at..at + n].to_vec())?);
        at += n;
    }
    MotionNet::from_params(header.net, params)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, &bytes)
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let bytes = read_bytes(path)?;
    let mut r = csv::Reader::from_reader(bytes.as_slice());
    r.deserialize().map(|row| row.map_err(|e| Error::format(path, e.to_string()))).collect()
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e.to_string()))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = toml::to_string(value).map_err(|e| Error::format(path, e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    toml::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.message().to_string()))
}

/// Middle slice across `axis` of a `[D,H,W]` volume as rows × columns.
pub fn central_slice(vol: &Tensor, axis: usize) -> Result<(usize, usize, Vec<f64>)> {
    let dims = vol.vol_dims()?;
    if axis > 2 {
        return Err(Error::Config(format!("slice axis {axis} is not 0, 1 or 2")));
    }
    let c = dims[axis] / 2;
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let (rows, cols) = (dims[ra], dims[ca]);
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for q in 0..cols {
            let mut p = [0; 3];
            p[axis] = c;
            p[ra] = r;
            p[ca] = q;
            out.push(vol.data()[crate::tensor::idx3(dims, p[0], p[1], p[2])]);
        }
    }
    Ok((rows, cols, out))
}

/// 8-bit binary graymap with the fixed window recorded in a comment line.
pub fn write_pgm(path: &Path, rows: usize, cols: usize, values: &[f64], window: (f64, f64), label: &str) -> Result<()> {
    if values.len() != rows * cols {
        return Err(Error::dim("image size does not match its values"));
    }
    let (lo, hi) = window;
    if !(hi > lo) {
        return Err(Error::config("display window must have hi > lo"));
    }
    let mut bytes = format!("P5\n# {label} window {lo} {hi}\n{cols} {rows}\n255\n").into_bytes();
    bytes.extend(values.iter().map(|&v| (((v - lo) / (hi - lo)).clamp(0.0, 1.0) * 255.0).round() as u8));
    write_atomic(path, &bytes)
}
