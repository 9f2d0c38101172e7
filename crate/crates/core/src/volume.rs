//! Dense 3D grids, axial slicing, nearest-neighbour resampling and the
//! VBV/VBM binary formats.
//!
//! Voxels are stored row-major with `d` slowest and `j` fastest, so voxel
//! `(d, i, j)` lives at `d·H·W + i·W + j`. Axial slices run along `d`.
//!
//! On disk, every file starts with a 4-byte magic (`VBV1` for intensity
//! volumes, `VBM1` for masks), three little-endian `u32` dims, three
//! little-endian `f32` spacings, then the payload: little-endian `f32` voxels
//! or one `u8` (0/1) per mask voxel.

use std::path::Path;

use crate::error::{Error, FormatError, Result};

pub type Dims = [usize; 3];

pub const DEFAULT_SPACING: [f32; 3] = [1.0, 1.0, 1.0];

const VOLUME_MAGIC: [u8; 4] = *b"VBV1";
const MASK_MAGIC: [u8; 4] = *b"VBM1";
const HEADER_LEN: usize = 4 + 12 + 12;

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn flat_index(dims: Dims, d: usize, i: usize, j: usize) -> usize {
    (d * dims[1] + i) * dims[2] + j
}

#[inline]
pub fn unflatten(dims: Dims, idx: usize) -> (usize, usize, usize) {
    let j = idx % dims[2];
    let i = (idx / dims[2]) % dims[1];
    let d = idx / (dims[1] * dims[2]);
    (d, i, j)
}

fn check_dims(op: &'static str, dims: Dims) -> Result<()> {
    if dims.contains(&0) {
        return Err(Error::invalid(op, format!("zero dimension in {dims:?}")));
    }
    Ok(())
}

/// Intensity volume with finite `f32` voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: [f32; 3],
    voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, voxels: Vec<f32>) -> Result<Self> {
        Self::with_spacing(dims, DEFAULT_SPACING, voxels)
    }

    pub fn with_spacing(dims: Dims, spacing: [f32; 3], voxels: Vec<f32>) -> Result<Self> {
        check_dims("Volume::new", dims)?;
        if voxels.len() != voxel_count(dims) {
            return Err(Error::invalid(
                "Volume::new",
                format!("{dims:?} needs {} voxels, got {}", voxel_count(dims), voxels.len()),
            ));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(
                "Volume::new",
                format!("non-positive spacing {spacing:?}"),
            ));
        }
        if let Some(idx) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(
                "Volume::new",
                format!("non-finite voxel at index {idx}"),
            ));
        }
        Ok(Self { dims, spacing, voxels })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: Dims, value: f32) -> Self {
        assert!(!dims.contains(&0), "zero dimension in {dims:?}");
        assert!(value.is_finite());
        Self {
            dims,
            spacing: DEFAULT_SPACING,
            voxels: vec![value; voxel_count(dims)],
        }
    }

    /// Builds a volume from `f(d, i, j)`. Panics if `f` yields a non-finite value.
    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        assert!(!dims.contains(&0), "zero dimension in {dims:?}");
        let mut voxels = Vec::with_capacity(voxel_count(dims));
        for d in 0..dims[0] {
            for i in 0..dims[1] {
                for j in 0..dims[2] {
                    let v = f(d, i, j);
                    assert!(v.is_finite(), "non-finite voxel at ({d},{i},{j})");
                    voxels.push(v);
                }
            }
        }
        Self {
            dims,
            spacing: DEFAULT_SPACING,
            voxels,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn get(&self, d: usize, i: usize, j: usize) -> f32 {
        self.voxels[flat_index(self.dims, d, i, j)]
    }

    /// Applies `f` voxel-wise, keeping dims and spacing.
    pub fn map(&self, mut f: impl FnMut(f32) -> f32) -> Result<Self> {
        Self::with_spacing(self.dims, self.spacing, self.voxels.iter().map(|&v| f(v)).collect())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = header(VOLUME_MAGIC, self.dims, self.spacing);
        out.reserve(self.voxels.len() * 4);
        for v in &self.voxels {
            out.extend_from_slice(&v.to_le_bytes());
        }
        write_file(path.as_ref(), &out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let (dims, spacing, payload) = parse_header(bytes, VOLUME_MAGIC, 4)?;
        let voxels: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(idx) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(idx));
        }
        Ok(Self { dims, spacing, voxels })
    }
}

/// One axial slice, `H×W`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2D {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Slice2D {
    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.pixels[i * self.width + j]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    pub spacing: [f32; 3],
    pub slices: Vec<Slice2D>,
}

impl SliceStack {
    pub fn count(&self) -> usize {
        self.slices.len()
    }

    /// Reassembles the slices into a volume.
    pub fn restack(&self) -> Result<Volume> {
        let first = self
            .slices
            .first()
            .ok_or_else(|| Error::invalid("restack", "empty slice stack"))?;
        let (h, w) = (first.height, first.width);
        if self.slices.iter().any(|s| s.height != h || s.width != w) {
            return Err(Error::invalid("restack", "slices differ in size"));
        }
        let voxels = self.slices.iter().flat_map(|s| s.pixels.iter().copied()).collect();
        Volume::with_spacing([self.slices.len(), h, w], self.spacing, voxels)
    }
}

/// Splits a volume into its `D` axial slices.
pub fn axial_slices(v: &Volume) -> SliceStack {
    let [_, h, w] = v.dims;
    SliceStack {
        spacing: v.spacing,
        slices: v
            .voxels
            .chunks(h * w)
            .map(|c| Slice2D {
                height: h,
                width: w,
                pixels: c.to_vec(),
            })
            .collect(),
    }
}

/// Source index for output index `o` when mapping `src` cells onto `dst` cells
/// by cell centres. Ties resolve toward the lower index.
#[inline]
pub(crate) fn nearest_source(o: usize, src: usize, dst: usize) -> usize {
    // centre of output cell o in source index units: (o + 0.5)·src/dst − 0.5;
    // round-half-down is ceil(x − 0.5). Integer form: ceil(((2o+1)·src − 2·dst) / (2·dst)).
    let num = (2 * o + 1) as i64 * src as i64 - 2 * dst as i64;
    let den = 2 * dst as i64;
    let idx = if num <= 0 { 0 } else { (num + den - 1) / den };
    (idx as usize).min(src - 1)
}

pub(crate) fn nearest_maps(src: Dims, dst: Dims) -> [Vec<usize>; 3] {
    std::array::from_fn(|a| (0..dst[a]).map(|o| nearest_source(o, src[a], dst[a])).collect())
}

/// Nearest-neighbour resampling on cell centres.
pub fn resample_nearest(v: &Volume, new_dims: Dims) -> Result<Volume> {
    check_dims("resample_nearest", new_dims)?;
    let [md, mi, mj] = nearest_maps(v.dims, new_dims);
    let out = Volume::from_fn(new_dims, |d, i, j| v.get(md[d], mi[i], mj[j]));
    Ok(Volume {
        spacing: v.spacing,
        ..out
    })
}

/// Per-voxel probability in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorMap {
    dims: Dims,
    values: Vec<f32>,
}

impl PriorMap {
    pub fn new(dims: Dims, values: Vec<f32>) -> Result<Self> {
        check_dims("PriorMap::new", dims)?;
        if values.len() != voxel_count(dims) {
            return Err(Error::invalid("PriorMap::new", "value count does not match dims"));
        }
        if let Some(idx) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid(
                "PriorMap::new",
                format!("value {} at index {idx} outside [0, 1]", values[idx]),
            ));
        }
        Ok(Self { dims, values })
    }

    pub fn zeros(dims: Dims) -> Self {
        Self {
            dims,
            values: vec![0.0; voxel_count(dims)],
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, d: usize, i: usize, j: usize) -> f32 {
        self.values[flat_index(self.dims, d, i, j)]
    }

    pub fn max(&self) -> f32 {
        self.values.iter().copied().fold(0.0, f32::max)
    }

    /// Voxels strictly above `threshold`.
    pub fn binarize(&self, threshold: f64) -> Mask {
        Mask {
            dims: self.dims,
            spacing: DEFAULT_SPACING,
            bits: self.values.iter().map(|&v| f64::from(v) > threshold).collect(),
        }
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: DEFAULT_SPACING,
            voxels: self.values.clone(),
        }
    }

    pub fn from_volume(v: &Volume) -> Result<Self> {
        Self::new(v.dims, v.voxels.clone())
    }
}

/// One axial slice of a [`Mask`], row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskSlice {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl MaskSlice {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    /// Tight half-open box `(x0, y0, x1, y1)` around the set pixels, with x
    /// along the width axis.
    pub fn tight_box(&self) -> Option<[usize; 4]> {
        let mut b: Option<[usize; 4]> = None;
        for i in 0..self.height {
            for j in 0..self.width {
                if self.get(i, j) {
                    b = Some(match b {
                        None => [j, i, j + 1, i + 1],
                        Some([x0, y0, x1, y1]) => [x0.min(j), y0.min(i), x1.max(j + 1), y1.max(i + 1)],
                    });
                }
            }
        }
        b
    }
}

/// Binary voxel mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    dims: Dims,
    spacing: [f32; 3],
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(dims: Dims, bits: Vec<bool>) -> Result<Self> {
        check_dims("Mask::new", dims)?;
        if bits.len() != voxel_count(dims) {
            return Err(Error::invalid("Mask::new", "bit count does not match dims"));
        }
        Ok(Self {
            dims,
            spacing: DEFAULT_SPACING,
            bits,
        })
    }

    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            spacing: DEFAULT_SPACING,
            bits: vec![false; voxel_count(dims)],
        }
    }

    pub fn full(dims: Dims) -> Self {
        Self {
            dims,
            spacing: DEFAULT_SPACING,
            bits: vec![true; voxel_count(dims)],
        }
    }

    pub fn from_fn(dims: Dims, mut f: impl FnMut(usize, usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(voxel_count(dims));
        for d in 0..dims[0] {
            for i in 0..dims[1] {
                for j in 0..dims[2] {
                    bits.push(f(d, i, j));
                }
            }
        }
        Self {
            dims,
            spacing: DEFAULT_SPACING,
            bits,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.spacing
    }

    pub fn with_spacing(mut self, spacing: [f32; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, d: usize, i: usize, j: usize) -> bool {
        self.bits[flat_index(self.dims, d, i, j)]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn union(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, "Mask::union", |a, b| a || b)
    }

    pub fn intersection(&self, other: &Mask) -> Result<Mask> {
        self.zip_with(other, "Mask::intersection", |a, b| a && b)
    }

    fn zip_with(&self, other: &Mask, op: &'static str, f: impl Fn(bool, bool) -> bool) -> Result<Mask> {
        if self.dims != other.dims {
            return Err(Error::invalid(op, format!("{:?} vs {:?}", self.dims, other.dims)));
        }
        Ok(Mask {
            dims: self.dims,
            spacing: self.spacing,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    /// True if every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims && self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    /// Intersection over union; two empty masks score 1.
    pub fn iou(&self, other: &Mask) -> f64 {
        let (mut inter, mut uni) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += usize::from(a && b);
            uni += usize::from(a || b);
        }
        if uni == 0 {
            1.0
        } else {
            inter as f64 / uni as f64
        }
    }

    /// Fraction of `truth` voxels covered by `self`; 1 for an empty truth.
    pub fn recall_against(&self, truth: &Mask) -> f64 {
        let total = truth.count();
        if total == 0 {
            return 1.0;
        }
        let hit = self.bits.iter().zip(&truth.bits).filter(|(&a, &b)| a && b).count();
        hit as f64 / total as f64
    }

    pub fn centroid(&self) -> Option<[f64; 3]> {
        let mut sum = [0.0; 3];
        let mut n = 0usize;
        for (idx, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let (d, i, j) = unflatten(self.dims, idx);
            sum[0] += d as f64;
            sum[1] += i as f64;
            sum[2] += j as f64;
            n += 1;
        }
        (n > 0).then(|| sum.map(|s| s / n as f64))
    }

    /// Inclusive `(min, max)` corner of the set voxels.
    pub fn bounding_box(&self) -> Option<([usize; 3], [usize; 3])> {
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for (idx, _) in self.bits.iter().enumerate().filter(|(_, &b)| b) {
            let p = unflatten(self.dims, idx);
            for (a, c) in [p.0, p.1, p.2].into_iter().enumerate() {
                lo[a] = lo[a].min(c);
                hi[a] = hi[a].max(c);
            }
            any = true;
        }
        any.then_some((lo, hi))
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            voxels: self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Axial slice `d` of the mask.
    pub fn axial_slice(&self, d: usize) -> MaskSlice {
        let [_, h, w] = self.dims;
        MaskSlice {
            height: h,
            width: w,
            bits: self.bits[d * h * w..(d + 1) * h * w].to_vec(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = header(MASK_MAGIC, self.dims, self.spacing);
        out.extend(self.bits.iter().map(|&b| u8::from(b)));
        write_file(path.as_ref(), &out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|source| Error::Format {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, FormatError> {
        let (dims, spacing, payload) = parse_header(bytes, MASK_MAGIC, 1)?;
        let mut bits = Vec::with_capacity(payload.len());
        for (index, &value) in payload.iter().enumerate() {
            match value {
                0 => bits.push(false),
                1 => bits.push(true),
                _ => return Err(FormatError::InvalidMaskValue { index, value }),
            }
        }
        Ok(Self { dims, spacing, bits })
    }
}

fn header(magic: [u8; 4], dims: Dims, spacing: [f32; 3]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(&magic);
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    out
}

fn parse_header(
    bytes: &[u8],
    magic: [u8; 4],
    elem_size: usize,
) -> std::result::Result<(Dims, [f32; 3], &[u8]), FormatError> {
    if bytes.len() < 4 || bytes[..4] != magic {
        return Err(FormatError::BadMagic {
            expected: magic,
            found: bytes[..bytes.len().min(4)].to_vec(),
        });
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::TruncatedHeader);
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let raw = [u32_at(4), u32_at(8), u32_at(12)];
    let spacing = [f32_at(16), f32_at(20), f32_at(24)];
    if raw.contains(&0) {
        return Err(FormatError::ZeroDimension(raw));
    }
    if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(FormatError::BadSpacing(spacing));
    }
    let expected = raw
        .iter()
        .try_fold(elem_size, |acc, &d| acc.checked_mul(d as usize))
        .ok_or(FormatError::DimensionOverflow(raw))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(FormatError::TrailingBytes(payload.len() - expected));
    }
    Ok((raw.map(|d| d as usize), spacing, payload))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
