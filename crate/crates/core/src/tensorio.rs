//! Binary tensor files, PPM/PGM images, masks and the synthetic datasets.
//!
//! Tensor file layout (little-endian throughout):
//!
//! | bytes | field |
//! |-------|-------|
//! | 4     | magic `LDMI` |
//! | 1     | version (1) |
//! | 1     | dtype: 0 = f32, 1 = f64, 2 = u8 |
//! | 1     | rank (≤ 8) |
//! | 4·rank| dims, u32 each |
//! | …     | row-major payload |

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::inr::{make_coordinate_grid, CoordinateGrid};
use crate::rng::substream;
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"LDMI";
pub const TENSOR_VERSION: u8 = 1;
pub const MAX_RANK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U8 = 2,
}

impl DType {
    pub fn size(&self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U8),
            other => Err(Error::UnknownDtype(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Widens every value to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// Serialises one tensor record into `out`.
pub fn encode_tensor(values: &TensorData, dims: &[usize], out: &mut Vec<u8>) -> Result<()> {
    if dims.is_empty() || dims.len() > MAX_RANK {
        return Err(Error::InvalidTensor(format!(
            "rank {} outside 1..={MAX_RANK}",
            dims.len()
        )));
    }
    let numel: usize = dims.iter().product();
    if numel != values.len() {
        return Err(Error::InvalidTensor(format!(
            "dims {dims:?} need {numel} values, got {}",
            values.len()
        )));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(TENSOR_VERSION);
    out.push(values.dtype() as u8);
    out.push(dims.len() as u8);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidTensor(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match values {
        TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        TensorData::U8(v) => out.extend_from_slice(v),
    }
    Ok(())
}

/// Parses one tensor record from the front of `bytes`; returns the record
/// and the number of bytes consumed.
pub fn decode_tensor(bytes: &[u8]) -> Result<((TensorData, Vec<usize>), usize)> {
    let need = |n: usize| {
        if bytes.len() < n {
            Err(Error::Truncated {
                expected: n,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(4)?;
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(Error::BadMagic { expected: "LDMI" });
    }
    need(7)?;
    if bytes[4] != TENSOR_VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dtype = DType::from_code(bytes[5])?;
    let rank = bytes[6] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::InvalidTensor(format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let header = 7 + 4 * rank;
    need(header)?;
    let dims: Vec<usize> = bytes[7..header]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let numel: usize = dims.iter().product();
    let total = header + numel * dtype.size();
    need(total)?;
    let payload = &bytes[header..total];
    let data = match dtype {
        DType::F32 => TensorData::F32(
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::F64 => TensorData::F64(
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        DType::U8 => TensorData::U8(payload.to_vec()),
    };
    Ok(((data, dims), total))
}

pub fn write_tensor(path: impl AsRef<Path>, values: &TensorData, dims: &[usize]) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(values, dims, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

/// Reads a whole file holding exactly one tensor record.
pub fn read_tensor(path: impl AsRef<Path>) -> Result<(TensorData, Vec<usize>)> {
    let bytes = fs::read(path)?;
    let (rec, used) = decode_tensor(&bytes)?;
    if used != bytes.len() {
        return Err(Error::InvalidTensor(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(rec)
}

/// Writes an `f64` [`Tensor`] bit-exactly.
pub fn write_f64(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    write_tensor(path, &TensorData::F64(t.data().to_vec()), t.shape())
}

pub fn read_f64(path: impl AsRef<Path>) -> Result<Tensor> {
    let (data, dims) = read_tensor(path)?;
    Ok(Tensor::new(dims, data.to_f64()))
}

// ---------------------------------------------------------------- images

fn ppm_byte(v: f64) -> u8 {
    // round half up
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

/// Encodes an `[H, W, C]` image (`C` = 1 → P5, `C` = 3 → P6) with values in
/// `[0, 1]`; out-of-range values are clamped.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let [h, w, c] = image.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "image must be [H, W, C], got {:?}",
            image.shape()
        )));
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(Error::UnsupportedFormat(format!("{c} channels"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| ppm_byte(v)));
    Ok(out)
}

pub fn save_ppm(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    fs::write(path, encode_ppm(image)?)?;
    Ok(())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b if b.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<u32> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::MalformedHeader(format!("expected {what}")))
    }
}

/// Decodes binary PGM/PPM into an `[H, W, C]` tensor with values `v/255`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 2 || bytes[0] != b'P' {
        return Err(Error::MalformedHeader("missing P magic".into()));
    }
    let channels = match bytes[1] {
        b'5' => 1,
        b'6' => 3,
        b'1'..=b'4' | b'7' => {
            return Err(Error::UnsupportedFormat(format!("P{}", bytes[1] as char)));
        }
        _ => return Err(Error::MalformedHeader("unknown magic".into())),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let w = r.number("width")? as usize;
    let h = r.number("height")? as usize;
    let maxval = r.number("maxval")?;
    if maxval != 255 {
        return Err(Error::UnsupportedMaxval(maxval));
    }
    if r.pos >= bytes.len() || !bytes[r.pos].is_ascii_whitespace() {
        return Err(Error::MalformedHeader("missing separator after maxval".into()));
    }
    let start = r.pos + 1;
    let need = w * h * channels;
    let body = &bytes[start.min(bytes.len())..];
    if body.len() < need {
        return Err(Error::Truncated {
            expected: need,
            found: body.len(),
        });
    }
    Ok(Tensor::new(
        vec![h, w, channels],
        body[..need].iter().map(|&b| b as f64 / 255.0).collect(),
    ))
}

pub fn load_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&fs::read(path)?)
}

// ----------------------------------------------------------------- masks

/// Observation mask over a signal's `H × W` grid; `true` = observed.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub shape: [usize; 2],
    pub observed: Vec<bool>,
}

impl Mask {
    pub fn all_observed(shape: [usize; 2]) -> Self {
        Self {
            shape,
            observed: vec![true; shape[0] * shape[1]],
        }
    }

    /// Marks the axis-aligned box `[y0, y1) × [x0, x1)` as missing.
    pub fn with_hole(mut self, y0: usize, y1: usize, x0: usize, x1: usize) -> Self {
        for y in y0..y1.min(self.shape[0]) {
            for x in x0..x1.min(self.shape[1]) {
                self.observed[y * self.shape[1] + x] = false;
            }
        }
        self
    }

    pub fn observed_count(&self) -> usize {
        self.observed.iter().filter(|&&b| b).count()
    }

    /// P5 bytes: 255 observed, 0 missing.
    pub fn to_image(&self) -> Tensor {
        Tensor::new(
            vec![self.shape[0], self.shape[1], 1],
            self.observed.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )
    }

    /// Any pixel ≥ 0.5 (byte ≥ 128) counts as observed.
    pub fn from_image(img: &Tensor) -> Result<Self> {
        let [h, w, 1] = img.shape() else {
            return Err(Error::UnsupportedFormat("mask must be single-channel (P5)".into()));
        };
        Ok(Self {
            shape: [*h, *w],
            observed: img.data().iter().map(|&v| v >= 0.5).collect(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_image(&load_ppm(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_ppm(path, &self.to_image())
    }
}

// -------------------------------------------------------------- datasets

/// One datum: features `Y (D × feat_dim)` at coordinates `X (D × coord_dim)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    pub resolution: Vec<usize>,
    pub coords: Tensor,
    pub features: Tensor,
}

impl Signal {
    pub fn from_features(resolution: &[usize], features: Tensor) -> Result<Self> {
        let grid = make_coordinate_grid(resolution, resolution.len())?;
        if features.rank() != 2 || features.shape()[0] != grid.len() {
            return Err(Error::ShapeMismatch(format!(
                "features {:?} for resolution {resolution:?}",
                features.shape()
            )));
        }
        Ok(Self {
            resolution: resolution.to_vec(),
            coords: grid.coords,
            features,
        })
    }

    /// Features as an `[H, W, C]` image.
    pub fn to_image(&self) -> Tensor {
        let mut shape = self.resolution.clone();
        shape.push(self.features.shape()[1]);
        self.features.clone().reshaped(&shape)
    }

    pub fn from_image(image: &Tensor) -> Result<Self> {
        let [h, w, c] = image.shape() else {
            return Err(Error::ShapeMismatch("image must be [H, W, C]".into()));
        };
        Self::from_features(&[*h, *w], image.clone().reshaped(&[h * w, *c]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub items: Vec<Signal>,
    pub resolution: Vec<usize>,
    pub coord_dim: usize,
    pub feat_dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticKind {
    /// A few random 2-D Gaussian blobs.
    Gaussians,
    /// Sinusoidal gratings with random frequency, orientation and phase.
    Stripes,
    /// Smooth low-frequency random scalar field.
    Field,
}

impl SyntheticKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "gaussians" => Ok(Self::Gaussians),
            "stripes" => Ok(Self::Stripes),
            "field" => Ok(Self::Field),
            other => Err(Error::UnknownKind(other.to_string())),
        }
    }
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn from_items(items: Vec<Signal>) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidConfig("dataset has no items".into()))?;
        let resolution = first.resolution.clone();
        let coord_dim = first.coords.shape()[1];
        let feat_dim = first.features.shape()[1];
        for s in &items {
            if s.resolution != resolution || s.features.shape()[1] != feat_dim {
                return Err(Error::ResolutionMismatch {
                    expected: resolution.clone(),
                    found: s.resolution.clone(),
                });
            }
        }
        Ok(Self {
            items,
            resolution,
            coord_dim,
            feat_dim,
        })
    }

    /// Stacks features into an `[n, H, W, C]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        let mut shape = vec![self.items.len()];
        shape.extend(&self.resolution);
        shape.push(self.feat_dim);
        let data = self
            .items
            .iter()
            .flat_map(|s| s.features.data().iter().copied())
            .collect();
        Tensor::new(shape, data)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [n, h, w, c] = t.shape() else {
            return Err(Error::ShapeMismatch(format!(
                "dataset tensor must be [n, H, W, C], got {:?}",
                t.shape()
            )));
        };
        let per = h * w * c;
        let items = (0..*n)
            .map(|i| {
                let f = Tensor::new(vec![h * w, *c], t.data()[i * per..(i + 1) * per].to_vec());
                Signal::from_features(&[*h, *w], f)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_items(items)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_f64(path, &self.to_tensor())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tensor(&read_f64(path)?)
    }
}

fn synth_item(kind: SyntheticKind, grid: &CoordinateGrid, rng: &mut impl Rng) -> Vec<f64> {
    let pts = grid.coords.data().chunks(2);
    match kind {
        SyntheticKind::Gaussians => {
            let k = rng.random_range(1..=3);
            let blobs: Vec<[f64; 4]> = (0..k)
                .map(|_| {
                    [
                        rng.random_range(-0.7..0.7),
                        rng.random_range(-0.7..0.7),
                        rng.random_range(0.15..0.4),
                        rng.random_range(0.5..1.0),
                    ]
                })
                .collect();
            pts.map(|p| {
                blobs
                    .iter()
                    .map(|[cy, cx, s, a]| {
                        let d2 = (p[0] - cy).powi(2) + (p[1] - cx).powi(2);
                        a * (-d2 / (2.0 * s * s)).exp()
                    })
                    .fold(0.0, f64::max)
            })
            .collect()
        }
        SyntheticKind::Stripes => {
            let f = rng.random_range(1.0..4.0);
            let theta = rng.random_range(0.0..PI);
            let phase = rng.random_range(0.0..2.0 * PI);
            let (s, c) = theta.sin_cos();
            pts.map(|p| (0.5 + 0.5 * (PI * f * (p[0] * c + p[1] * s) + phase).sin()).clamp(0.0, 1.0))
                .collect()
        }
        SyntheticKind::Field => {
            let waves: Vec<[f64; 4]> = (0..4)
                .map(|_| {
                    [
                        rng.random_range(-1.5..1.5),
                        rng.random_range(-1.5..1.5),
                        rng.random_range(0.0..2.0 * PI),
                        rng.random_range(0.2..1.0),
                    ]
                })
                .collect();
            let total: f64 = waves.iter().map(|w| w[3]).sum();
            pts.map(|p| {
                let v: f64 = waves
                    .iter()
                    .map(|[ky, kx, ph, a]| a * (PI * (ky * p[0] + kx * p[1]) + ph).cos())
                    .sum();
                (0.5 + 0.5 * v / total).clamp(0.0, 1.0)
            })
            .collect()
        }
    }
}

/// Deterministic single-channel synthetic images on an `H × W` grid.
pub fn make_synthetic_dataset(kind: &str, n: usize, resolution: [usize; 2], seed: u64) -> Result<Dataset> {
    let kind = SyntheticKind::parse(kind)?;
    if n == 0 {
        return Err(Error::InvalidConfig("dataset size must be >= 1".into()));
    }
    let grid = make_coordinate_grid(&resolution, 2)?;
    let mut rng = substream(seed, "data");
    let items = (0..n)
        .map(|_| {
            let values = synth_item(kind, &grid, &mut rng);
            Signal {
                resolution: resolution.to_vec(),
                coords: grid.coords.clone(),
                features: Tensor::new(vec![grid.len(), 1], values),
            }
        })
        .collect();
    Dataset::from_items(items)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.ldmi");
        let vals = TensorData::F32(vec![1.5, -2.0, 0.25, 3.0, f32::MIN_POSITIVE, 7.0]);
        write_tensor(&p, &vals, &[2, 3]).unwrap();
        assert_eq!(read_tensor(&p).unwrap(), (vals.clone(), vec![2, 3]));

        let mut bytes = fs::read(&p).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode_tensor(&bytes), Err(Error::BadMagic { .. })));

        let mut short = Vec::new();
        encode_tensor(&vals, &[2, 3], &mut short).unwrap();
        short.truncate(short.len() - 4);
        assert!(matches!(decode_tensor(&short), Err(Error::Truncated { .. })));

        let mut bad = fs::read(&p).unwrap();
        bad[5] = 9;
        assert!(matches!(decode_tensor(&bad), Err(Error::UnknownDtype(9))));

        let codes: Vec<_> = [
            Error::BadMagic { expected: "LDMI" },
            Error::Truncated { expected: 1, found: 0 },
            Error::UnknownDtype(9),
        ]
        .iter()
        .map(Error::code)
        .collect();
        assert_eq!(codes, ["bad-magic", "truncated", "unknown-dtype"]);
    }

    #[test]
    fn invalid_dims_are_rejected() {
        let mut buf = Vec::new();
        assert!(encode_tensor(&TensorData::U8(vec![1, 2]), &[], &mut buf).is_err());
        assert!(encode_tensor(&TensorData::U8(vec![1, 2]), &[3], &mut buf).is_err());
    }

    fn arb_record() -> impl Strategy<Value = (TensorData, Vec<usize>)> {
        prop::collection::vec(1usize..5, 1..=4).prop_flat_map(|dims| {
            let n: usize = dims.iter().product();
            let d = dims.clone();
            prop_oneof![
                prop::collection::vec(any::<f32>(), n).prop_map(TensorData::F32),
                prop::collection::vec(any::<f64>(), n).prop_map(TensorData::F64),
                prop::collection::vec(any::<u8>(), n).prop_map(TensorData::U8),
            ]
            .prop_map(move |data| (data, d.clone()))
        })
    }

    fn bits(d: &TensorData) -> Vec<u64> {
        match d {
            TensorData::F32(v) => v.iter().map(|x| x.to_bits() as u64).collect(),
            TensorData::F64(v) => v.iter().map(|x| x.to_bits()).collect(),
            TensorData::U8(v) => v.iter().map(|&x| x as u64).collect(),
        }
    }

    proptest! {
        #[test]
        fn tensor_roundtrip_is_bit_exact((data, dims) in arb_record()) {
            let mut buf = Vec::new();
            encode_tensor(&data, &dims, &mut buf).unwrap();
            let ((back, back_dims), used) = decode_tensor(&buf).unwrap();
            prop_assert_eq!(used, buf.len());
            prop_assert_eq!(back_dims, dims);
            prop_assert_eq!(back.dtype(), data.dtype());
            prop_assert_eq!(bits(&back), bits(&data));
        }

        #[test]
        fn ppm_roundtrip_within_half_step(vals in prop::collection::vec(0.0f64..=1.0, 48), gray in any::<bool>()) {
            let img = if gray {
                Tensor::new(vec![4, 12, 1], vals)
            } else {
                Tensor::new(vec![4, 4, 3], vals)
            };
            let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
            prop_assert_eq!(back.shape(), img.shape());
            prop_assert!(back.max_abs_diff(&img) <= 1.0 / 510.0 + 1e-12);
        }
    }

    #[test]
    fn ppm_normalisation_and_errors() {
        let mut bytes = b"P5\n# comment\n2 1\n255\n".to_vec();
        bytes.extend([255u8, 0]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.shape(), [1, 2, 1]);
        assert_eq!(img.data(), [1.0, 0.0]);

        assert!(matches!(
            decode_ppm(b"P3\n1 1\n255\n0 0 0\n"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            decode_ppm(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::UnsupportedMaxval(65535))
        ));
        assert!(matches!(
            decode_ppm(b"P5\nx 1\n255\n\0"),
            Err(Error::MalformedHeader(_))
        ));
        assert!(matches!(decode_ppm(b"P5\n2 2\n255\n\0"), Err(Error::Truncated { .. })));
    }

    #[test]
    fn ppm_rounds_half_up() {
        let img = Tensor::new(vec![1, 2, 1], vec![0.5 / 255.0, 127.5 / 255.0]);
        let enc = encode_ppm(&img).unwrap();
        assert_eq!(&enc[enc.len() - 2..], [1, 128]);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Mask::all_observed([4, 5]).with_hole(1, 3, 1, 4);
        m.save(dir.path().join("m.pgm")).unwrap();
        let back = Mask::load(dir.path().join("m.pgm")).unwrap();
        assert_eq!(back, m);
        assert_eq!(m.observed_count(), 20 - 6);
    }

    #[test]
    fn synthetic_datasets_are_deterministic_and_normalised() {
        let a = make_synthetic_dataset("gaussians", 4, [16, 16], 7).unwrap();
        let b = make_synthetic_dataset("gaussians", 4, [16, 16], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.coord_dim, a.feat_dim), (2, 1));
        assert_ne!(a, make_synthetic_dataset("gaussians", 4, [16, 16], 8).unwrap());
        for kind in ["gaussians", "stripes", "field"] {
            let d = make_synthetic_dataset(kind, 6, [8, 12], 3).unwrap();
            for s in &d.items {
                assert!(s.features.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind}");
            }
        }
        assert!(matches!(
            make_synthetic_dataset("plasma", 1, [4, 4], 0),
            Err(Error::UnknownKind(_))
        ));
    }

    #[test]
    fn dataset_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let d = make_synthetic_dataset("stripes", 3, [5, 7], 2).unwrap();
        d.save(dir.path().join("d.ldmi")).unwrap();
        assert_eq!(Dataset::load(dir.path().join("d.ldmi")).unwrap(), d);
    }

    #[test]
    fn field_golden_means() {
        // Frozen from a reference run.
        let d = make_synthetic_dataset("field", 2, [8, 8], 1).unwrap();
        let golden = [0.3785538626760583, 0.5206267723666396];
        for (item, g) in d.items.iter().zip(golden) {
            assert!(
                (item.features.mean() - g).abs() < 1e-12,
                "{} vs {g}",
                item.features.mean()
            );
        }
    }
}
