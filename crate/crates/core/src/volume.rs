//! Scalar volumes on the unit cube with voxel-center trilinear sampling.
//!
//! Voxel `(i, j, k)` sits at `((i + ½)/Dx, (j + ½)/Dy, (k + ½)/Dz)`. Storage is
//! x-fastest. On disk a volume is one JSON header line followed by a raw
//! little-endian payload.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffcalc::Point;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Volume3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Volume3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("volume dims must be positive, got {dims:?}")));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::Dimension(format!(
                "volume {dims:?} needs {} values, got {}",
                dims[0] * dims[1] * dims[2],
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::contract(format!("non-finite voxel value at index {i}")));
        }
        Ok(Volume3 { dims, data })
    }

    pub fn constant(dims: [usize; 3], value: f64) -> Result<Self> {
        Volume3::new(dims, vec![value; dims[0] * dims[1] * dims[2]])
    }

    /// Samples `f` at every voxel center.
    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(Point) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for k in 0..dims[2] {
            for j in 0..dims[1] {
                for i in 0..dims[0] {
                    data.push(f(voxel_center(dims, [i, j, k])));
                }
            }
        }
        Volume3::new(dims, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn index(&self, ijk: [usize; 3]) -> usize {
        ijk[0] + self.dims[0] * (ijk[1] + self.dims[1] * ijk[2])
    }

    pub fn get(&self, ijk: [usize; 3]) -> f64 {
        self.data[self.index(ijk)]
    }

    /// Value stored at flat index `idx` (exact grid read).
    pub fn at(&self, idx: usize) -> f64 {
        self.data[idx]
    }

    pub fn center_of(&self, idx: usize) -> Point {
        let d = self.dims;
        voxel_center(d, [idx % d[0], (idx / d[0]) % d[1], idx / (d[0] * d[1])])
    }

    /// Trilinear interpolation over voxel centers, constant in the half-voxel
    /// margin.
    pub fn sample(&self, p: Point) -> f64 {
        self.sample_grad(p).0
    }

    /// Interpolated value and the gradient of the interpolant inside the cell
    /// that holds `p`. Gradient components are zero along clamped axes.
    pub fn sample_grad(&self, p: Point) -> (f64, [f64; 3]) {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        let mut scale = [0.0; 3];
        for a in 0..3 {
            let (b, f, s) = locate(p[a], self.dims[a]);
            base[a] = b;
            frac[a] = f;
            scale[a] = s;
        }
        let step = |a: usize| usize::from(self.dims[a] > 1);
        let mut corners = [0.0; 8];
        for (c, v) in corners.iter_mut().enumerate() {
            let ijk = [
                base[0] + (c & 1) * step(0),
                base[1] + ((c >> 1) & 1) * step(1),
                base[2] + ((c >> 2) & 1) * step(2),
            ];
            *v = self.get(ijk);
        }
        let [fx, fy, fz] = frac;
        let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
        let c00 = lerp(corners[0], corners[1], fx);
        let c10 = lerp(corners[2], corners[3], fx);
        let c01 = lerp(corners[4], corners[5], fx);
        let c11 = lerp(corners[6], corners[7], fx);
        let c0 = lerp(c00, c10, fy);
        let c1 = lerp(c01, c11, fy);
        let value = lerp(c0, c1, fz);

        let dx = {
            let d00 = corners[1] - corners[0];
            let d10 = corners[3] - corners[2];
            let d01 = corners[5] - corners[4];
            let d11 = corners[7] - corners[6];
            lerp(lerp(d00, d10, fy), lerp(d01, d11, fy), fz)
        };
        let dy = lerp(c10 - c00, c11 - c01, fz);
        let dz = c1 - c0;
        (value, [dx * scale[0], dy * scale[1], dz * scale[2]])
    }
}

pub fn voxel_center(dims: [usize; 3], ijk: [usize; 3]) -> Point {
    [
        (ijk[0] as f64 + 0.5) / dims[0] as f64,
        (ijk[1] as f64 + 0.5) / dims[1] as f64,
        (ijk[2] as f64 + 0.5) / dims[2] as f64,
    ]
}

/// Lower cell index, fraction within the cell, and d(fraction)/dp (zero when
/// clamped). Queries on a cell face belong to the lower-index cell.
fn locate(p: f64, n: usize) -> (usize, f64, f64) {
    if n == 1 {
        return (0, 0.0, 0.0);
    }
    let t = p * n as f64 - 0.5;
    let last = (n - 1) as f64;
    if t < 0.0 {
        return (0, 0.0, 0.0);
    }
    if t > last {
        return (n - 2, 1.0, 0.0);
    }
    let cell = (t.ceil() - 1.0).clamp(0.0, (n - 2) as f64);
    (cell as usize, t - cell, n as f64)
}

// ---------------------------------------------------------------------------
// File format.

#[derive(Debug, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    dtype: String,
    order: String,
}

/// Writes the volume with a 32-bit float payload.
pub fn write_volume(v: &Volume3, path: impl AsRef<Path>) -> Result<()> {
    let header = VolumeHeader {
        dims: v.dims,
        dtype: "f32".into(),
        order: "x-fastest".into(),
    };
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n")?;
    for &x in &v.data {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume3> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    parse_volume(&bytes)
}

pub fn parse_volume(bytes: &[u8]) -> Result<Volume3> {
    let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format {
        offset: bytes.len() as u64,
        detail: "header line is not terminated".into(),
    })?;
    let header: VolumeHeader = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format {
        offset: e.column().saturating_sub(1) as u64,
        detail: format!("malformed header: {e}"),
    })?;
    if header.order != "x-fastest" {
        return Err(Error::Format {
            offset: 0,
            detail: format!("unsupported storage order `{}`", header.order),
        });
    }
    let width = match header.dtype.as_str() {
        "f32" => 4,
        "f64" => 8,
        other => {
            return Err(Error::Format {
                offset: 0,
                detail: format!("unsupported dtype `{other}`"),
            })
        }
    };
    if header.dims.iter().any(|&d| d == 0) {
        return Err(Error::Format {
            offset: 0,
            detail: format!("zero dimension in {:?}", header.dims),
        });
    }
    let start = nl + 1;
    let count = header.dims[0] * header.dims[1] * header.dims[2];
    let payload = &bytes[start..];
    if payload.len() != count * width {
        return Err(Error::Format {
            offset: bytes.len() as u64,
            detail: format!(
                "size mismatch: expected {} payload bytes, found {}",
                count * width,
                payload.len()
            ),
        });
    }
    let mut data = Vec::with_capacity(count);
    for (i, chunk) in payload.chunks_exact(width).enumerate() {
        let v = if width == 4 {
            f32::from_le_bytes(chunk.try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(chunk.try_into().unwrap())
        };
        if !v.is_finite() {
            return Err(Error::Format {
                offset: (start + i * width) as u64,
                detail: "non-finite voxel value".into(),
            });
        }
        data.push(v);
    }
    Volume3::new(header.dims, data)
}

/// Rescales values linearly onto [0, 1]. A constant volume maps to zeros.
pub fn normalize_min_max(v: &Volume3) -> Volume3 {
    let lo = v.data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    let data = v
        .data
        .iter()
        .map(|x| if span > 0.0 { (x - lo) / span } else { 0.0 })
        .collect();
    Volume3 { dims: v.dims, data }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn center_of_two_cubed_is_mean() {
        let v = Volume3::new([2, 2, 2], (0..8).map(|i| i as f64).collect()).unwrap();
        assert_eq!(v.sample([0.5; 3]), 3.5);
    }

    #[test]
    fn exact_at_voxel_centers() {
        let v = Volume3::from_fn([5, 4, 3], |p| p[0] * 7.0 + p[1] * p[2]).unwrap();
        for idx in 0..v.len() {
            let s = v.sample(v.center_of(idx));
            assert!((s - v.at(idx)).abs() < 1e-14);
        }
    }

    #[test]
    fn linear_field_is_reproduced() {
        let v = Volume3::from_fn([64, 64, 64], |p| p[0]).unwrap();
        let lo = 0.5 / 64.0;
        for &p in &[[0.3, 0.2, 0.9], [lo, 0.5, 0.5], [1.0 - lo, 0.1, 0.7], [0.123, 0.456, 0.789]] {
            assert!((v.sample(p) - p[0]).abs() < 1e-12);
            let (_, g) = v.sample_grad(p);
            assert!((g[0] - 1.0).abs() < 1e-10 && g[1].abs() < 1e-10 && g[2].abs() < 1e-10);
        }
    }

    #[test]
    fn constant_has_zero_gradient_and_margin_clamps() {
        let v = Volume3::constant([4, 4, 4], 2.5).unwrap();
        assert_eq!(v.sample_grad([0.3, 0.6, 0.9]), (2.5, [0.0; 3]));
        let w = Volume3::from_fn([4, 4, 4], |p| p[0]).unwrap();
        let (val, g) = w.sample_grad([0.01, 0.5, 0.5]);
        assert_eq!(val, 0.125);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let v = Volume3::from_fn([7, 6, 5], |p| (3.0 * p[0]).sin() * (p[1] + 2.0 * p[2]).cos()).unwrap();
        let h = 1e-7;
        for &p in &[[0.31, 0.47, 0.52], [0.6, 0.22, 0.33], [0.2, 0.71, 0.68]] {
            let (_, g) = v.sample_grad(p);
            for a in 0..3 {
                let mut pp = p;
                let mut pm = p;
                pp[a] += h;
                pm[a] -= h;
                let fd = (v.sample(pp) - v.sample(pm)) / (2.0 * h);
                assert!((fd - g[a]).abs() < 1e-6, "axis {a}: {fd} vs {}", g[a]);
            }
        }
    }

    #[test]
    fn io_errors() {
        let v = Volume3::constant([2, 3, 4], 0.5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol");
        write_volume(&v, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert!(matches!(parse_volume(&bytes[..bytes.len() - 1]), Err(Error::Format { .. })));
        assert!(matches!(parse_volume(b"{\"dims\":[1,1"), Err(Error::Format { .. })));
        let mut nan = bytes.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        match parse_volume(&nan) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, n - 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn payload_size_for_128_cubed() {
        let header_len = serde_json::to_vec(&VolumeHeader {
            dims: [128; 3],
            dtype: "f32".into(),
            order: "x-fastest".into(),
        })
        .unwrap()
        .len();
        let v = Volume3::constant([128; 3], 0.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.vol");
        write_volume(&v, &path).unwrap();
        let total = std::fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(total - header_len - 1, 8_388_608);
    }

    proptest! {
        #[test]
        fn f32_payload_round_trips_bit_exact(vals in prop::collection::vec(-1e6f32..1e6, 24)) {
            let v = Volume3::new([2, 3, 4], vals.iter().map(|&x| x as f64).collect()).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("v.vol");
            write_volume(&v, &path).unwrap();
            let back = read_volume(&path).unwrap();
            prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            prop_assert_eq!(back.dims(), v.dims());
        }
    }
}
