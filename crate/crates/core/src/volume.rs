//! Cine volumes, label volumes and their on-disk format.
//!
//! A volume file is one line of JSON ([`VolumeHeader`]) terminated by `\n`,
//! followed by the voxels as raw little-endian values in C order over
//! `[T, Z, H, W]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_RV: u8 = 1;
pub const LABEL_MYO: u8 = 2;
pub const LABEL_LV: u8 = 3;
pub const LABEL_NAMES: [&str; 4] = ["background", "RV", "myocardium", "LV"];

/// Headers longer than this are rejected before parsing.
pub const MAX_HEADER_BYTES: usize = 1 << 20;

/// Physical voxel geometry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    /// In-plane spacing `(sx, sy)` in mm.
    pub spacing_mm: [f64; 2],
    pub slice_thickness_mm: f64,
    #[serde(default)]
    pub slice_gap_mm: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry {
            spacing_mm: [1.0, 1.0],
            slice_thickness_mm: 1.0,
            slice_gap_mm: 0.0,
        }
    }
}

impl Geometry {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.spacing_mm[0]) || !ok(self.spacing_mm[1]) || !ok(self.slice_thickness_mm) {
            return Err(Error::Validation(format!(
                "spacing {:?} and slice thickness {} must be positive",
                self.spacing_mm, self.slice_thickness_mm
            )));
        }
        if !(self.slice_gap_mm.is_finite() && self.slice_gap_mm >= 0.0) {
            return Err(Error::Validation(format!("slice gap {} must be non-negative", self.slice_gap_mm)));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let g: Geometry = serde_json::from_str(text)?;
        g.validate()?;
        Ok(g)
    }

    /// mm³ represented by one pixel of one slice, thickness plus gap.
    pub fn voxel_mm3(&self) -> f64 {
        self.spacing_mm[0] * self.spacing_mm[1] * (self.slice_thickness_mm + self.slice_gap_mm)
    }
}

/// Voxel types a volume file can hold.
pub trait Voxel: Copy + Default + PartialEq + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
    fn is_valid(self) -> bool {
        true
    }
}

impl Voxel for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> f32 {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
    fn is_valid(self) -> bool {
        self.is_finite()
    }
}

impl Voxel for u8 {
    const DTYPE: &'static str = "u8";
    const BYTES: usize = 1;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> u8 {
        bytes[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeHeader {
    /// `[T, Z, H, W]`.
    pub dims: [usize; 4],
    pub dtype: String,
    pub spacing_mm: [f64; 2],
    pub slice_thickness_mm: f64,
    #[serde(default)]
    pub slice_gap_mm: f64,
    #[serde(default)]
    pub label_names: Vec<String>,
}

/// Dense `[T, Z, H, W]` volume with geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<V> {
    dims: [usize; 4],
    data: Vec<V>,
    geometry: Geometry,
    label_names: Vec<String>,
}

pub type CineVolume = Volume<f32>;
pub type MaskVolume = Volume<u8>;

impl<V: Voxel> Volume<V> {
    pub fn new(dims: [usize; 4], data: Vec<V>, geometry: Geometry) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Validation(format!("dims {dims:?} contain a zero extent")));
        }
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Validation(format!("dims {dims:?} overflow")))?;
        if n != data.len() {
            return Err(Error::Validation(format!(
                "dims {dims:?} hold {n} voxels but {} were given",
                data.len()
            )));
        }
        geometry.validate()?;
        Ok(Volume {
            dims,
            data,
            geometry,
            label_names: Vec::new(),
        })
    }

    pub fn with_label_names(mut self, names: Vec<String>) -> Self {
        self.label_names = names;
        self
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    pub fn frames(&self) -> usize {
        self.dims[0]
    }

    pub fn slices(&self) -> usize {
        self.dims[1]
    }

    pub fn height(&self) -> usize {
        self.dims[2]
    }

    pub fn width(&self) -> usize {
        self.dims[3]
    }

    pub fn data(&self) -> &[V] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [V] {
        &mut self.data
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    fn plane(&self) -> usize {
        self.dims[2] * self.dims[3]
    }

    /// The `H×W` image of frame `t`, slice `z`.
    pub fn slice(&self, t: usize, z: usize) -> &[V] {
        let p = self.plane();
        let start = (t * self.dims[1] + z) * p;
        &self.data[start..start + p]
    }

    pub fn slice_mut(&mut self, t: usize, z: usize) -> &mut [V] {
        let p = self.plane();
        let start = (t * self.dims[1] + z) * p;
        &mut self.data[start..start + p]
    }

    /// All slices of frame `t` as a `[1, Z, H, W]` volume.
    pub fn frame(&self, t: usize) -> Result<Volume<V>> {
        if t >= self.dims[0] {
            return Err(Error::Argument(format!("frame {t} outside [0, {})", self.dims[0])));
        }
        let n = self.dims[1] * self.plane();
        Ok(Volume {
            dims: [1, self.dims[1], self.dims[2], self.dims[3]],
            data: self.data[t * n..(t + 1) * n].to_vec(),
            geometry: self.geometry.clone(),
            label_names: self.label_names.clone(),
        })
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            dims: self.dims,
            dtype: V::DTYPE.into(),
            spacing_mm: self.geometry.spacing_mm,
            slice_thickness_mm: self.geometry.slice_thickness_mm,
            slice_gap_mm: self.geometry.slice_gap_mm,
            label_names: self.label_names.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header()).expect("header serializes");
        out.push(b'\n');
        out.reserve(self.data.len() * V::BYTES);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let (header, body) = decode_header(bytes)?;
        if header.dtype != V::DTYPE {
            return Err(Error::DtypeMismatch {
                expected: V::DTYPE.into(),
                found: header.dtype,
            });
        }
        if header.dims.contains(&0) {
            return Err(Error::Validation(format!("dims {:?} contain a zero extent", header.dims)));
        }
        let expected = header
            .dims
            .iter()
            .try_fold(V::BYTES, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Validation(format!("dims {:?} overflow", header.dims)))?;
        if body.len() < expected {
            return Err(Error::Truncated {
                expected,
                found: body.len(),
            });
        }
        if body.len() > expected {
            return Err(Error::Validation(format!(
                "dims {:?} need {expected} bytes but the buffer holds {}",
                header.dims,
                body.len()
            )));
        }
        let data: Vec<V> = body.chunks_exact(V::BYTES).map(V::read_le).collect();
        if let Some(i) = data.iter().position(|v| !v.is_valid()) {
            return Err(Error::Validation(format!("voxel {i} is not finite")));
        }
        let geometry = Geometry {
            spacing_mm: header.spacing_mm,
            slice_thickness_mm: header.slice_thickness_mm,
            slice_gap_mm: header.slice_gap_mm,
        };
        Ok(Volume::new(header.dims, data, geometry)?.with_label_names(header.label_names))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }
}

impl MaskVolume {
    /// Label names used for segmentation masks.
    pub fn standard_label_names() -> Vec<String> {
        LABEL_NAMES.iter().map(|s| s.to_string()).collect()
    }
}

/// Splits off and parses the JSON header line of a volume file.
pub fn decode_header(bytes: &[u8]) -> Result<(VolumeHeader, &[u8])> {
    let limit = bytes.len().min(MAX_HEADER_BYTES);
    let nl = bytes[..limit]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line terminator".into()))?;
    let header: VolumeHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::MalformedHeader(e.to_string()))?;
    if header.dtype != "f32" && header.dtype != "u8" {
        return Err(Error::MalformedHeader(format!("unknown dtype {:?}", header.dtype)));
    }
    Ok((header, &bytes[nl + 1..]))
}
