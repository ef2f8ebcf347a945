//! Multichannel 3D grids with voxel-to-world affines, trilinear
//! interpolation, and a minimal uncompressed NIfTI-1 read/write subset.
//!
//! The NIfTI subset: 348-byte header, either endianness (detected via
//! `sizeof_hdr`), datatypes uint8 / int16 / float32, 3D or 4D, sform affine
//! when `sform_code > 0` with a pixdim-scaled identity fallback. Samples are
//! converted to float32 internally. Files are written as float32
//! little-endian with the sform set.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Affine, Point3};

/// A multichannel 3D grid. Voxel (x, y, z) channel c lives at
/// `data[(x + nx*(y + ny*z)) * channels + c]` (x fastest, channels
/// interleaved per voxel).
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: (usize, usize, usize),
    pub channels: usize,
    pub voxel_size: [f64; 3],
    pub voxel_to_world: Affine,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(
        dims: (usize, usize, usize),
        channels: usize,
        voxel_size: [f64; 3],
        voxel_to_world: Affine,
        data: Vec<f32>,
    ) -> Result<Self> {
        let (nx, ny, nz) = dims;
        if nx == 0 || ny == 0 || nz == 0 || channels == 0 {
            return Err(Error::InvalidConfig("volume dims must be >= 1".into()));
        }
        if data.len() != nx * ny * nz * channels {
            return Err(Error::ShapeMismatch(format!(
                "volume data has {} values, expected {}",
                data.len(),
                nx * ny * nz * channels
            )));
        }
        if voxel_size.iter().any(|&v| v <= 0.0) {
            return Err(Error::InvalidConfig("voxel size must be positive".into()));
        }
        if voxel_to_world.determinant() == 0.0 {
            return Err(Error::InvalidConfig("voxel_to_world not invertible".into()));
        }
        Ok(Volume {
            dims,
            channels,
            voxel_size,
            voxel_to_world,
            data,
        })
    }

    /// Zero-filled volume with a scaled-identity affine (voxel center (0,0,0)
    /// at world origin).
    pub fn zeros(dims: (usize, usize, usize), channels: usize, voxel_size: [f64; 3]) -> Self {
        let data = vec![0.0; dims.0 * dims.1 * dims.2 * channels];
        Volume {
            dims,
            channels,
            voxel_size,
            voxel_to_world: Affine::scale_translate(voxel_size, [0.0, 0.0, 0.0]),
            data,
        }
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        (x + self.dims.0 * (y + self.dims.1 * z)) * self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize, c: usize) -> f32 {
        self.data[self.voxel_index(x, y, z) + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, c: usize, v: f32) {
        let i = self.voxel_index(x, y, z) + c;
        self.data[i] = v;
    }

    pub fn world_to_voxel(&self) -> Affine {
        self.voxel_to_world
            .inverse()
            .expect("volume affine invertible by construction")
    }

    /// Trilinear interpolation of all channels at a world point. Returns the
    /// interpolated channel vector and whether all eight corners were inside
    /// the grid; out-of-bounds queries yield zeros and `false`.
    pub fn trilinear(&self, p: &Point3) -> (Vec<f64>, bool) {
        let mut out = vec![0.0f64; self.channels];
        let inside = self.trilinear_into(p, &mut out);
        (out, inside)
    }

    /// Allocation-free variant of [`Volume::trilinear`]; `out` must have
    /// `channels` elements.
    pub fn trilinear_into(&self, p: &Point3, out: &mut [f64]) -> bool {
        debug_assert_eq!(out.len(), self.channels);
        let v = self.world_to_voxel().apply(p);
        let (nx, ny, nz) = self.dims;
        let x0f = v.x.floor();
        let y0f = v.y.floor();
        let z0f = v.z.floor();
        let x0 = x0f as isize;
        let y0 = y0f as isize;
        let z0 = z0f as isize;
        if !v.x.is_finite() || !v.y.is_finite() || !v.z.is_finite() {
            out.fill(0.0);
            return false;
        }
        if x0 < 0
            || y0 < 0
            || z0 < 0
            || x0 + 1 >= nx as isize
            || y0 + 1 >= ny as isize
            || z0 + 1 >= nz as isize
        {
            out.fill(0.0);
            return false;
        }
        let fx = v.x - x0f;
        let fy = v.y - y0f;
        let fz = v.z - z0f;
        let (x0, y0, z0) = (x0 as usize, y0 as usize, z0 as usize);
        out.fill(0.0);
        for dz in 0..2 {
            let wz = if dz == 0 { 1.0 - fz } else { fz };
            for dy in 0..2 {
                let wy = if dy == 0 { 1.0 - fy } else { fy };
                for dx in 0..2 {
                    let wx = if dx == 0 { 1.0 - fx } else { fx };
                    let w = wx * wy * wz;
                    let base = self.voxel_index(x0 + dx, y0 + dy, z0 + dz);
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += w * self.data[base + c] as f64;
                    }
                }
            }
        }
        true
    }

    /// The eight corner voxels and trilinear weights for a world point, or
    /// `None` when out of bounds. Used where gradients must be scattered back
    /// onto the grid.
    pub fn trilinear_weights(&self, p: &Point3) -> Option<[(usize, usize, usize, f64); 8]> {
        let v = self.world_to_voxel().apply(p);
        if !v.x.is_finite() || !v.y.is_finite() || !v.z.is_finite() {
            return None;
        }
        let (nx, ny, nz) = self.dims;
        let x0 = v.x.floor() as isize;
        let y0 = v.y.floor() as isize;
        let z0 = v.z.floor() as isize;
        if x0 < 0
            || y0 < 0
            || z0 < 0
            || x0 + 1 >= nx as isize
            || y0 + 1 >= ny as isize
            || z0 + 1 >= nz as isize
        {
            return None;
        }
        let fx = v.x - x0 as f64;
        let fy = v.y - y0 as f64;
        let fz = v.z - z0 as f64;
        let mut out = [(0usize, 0usize, 0usize, 0.0f64); 8];
        let mut i = 0;
        for dz in 0..2usize {
            let wz = if dz == 0 { 1.0 - fz } else { fz };
            for dy in 0..2usize {
                let wy = if dy == 0 { 1.0 - fy } else { fy };
                for dx in 0..2usize {
                    let wx = if dx == 0 { 1.0 - fx } else { fx };
                    out[i] = (
                        (x0 as usize) + dx,
                        (y0 as usize) + dy,
                        (z0 as usize) + dz,
                        wx * wy * wz,
                    );
                    i += 1;
                }
            }
        }
        Some(out)
    }
}

/// A single-channel volume with nonnegative values used as a tissue mask.
#[derive(Debug, Clone)]
pub struct Mask(Volume);

impl Mask {
    pub fn new(v: Volume) -> Result<Self> {
        if v.channels != 1 {
            return Err(Error::InvalidConfig(format!(
                "mask must have 1 channel, got {}",
                v.channels
            )));
        }
        if v.data.iter().any(|&x| x < 0.0) {
            return Err(Error::InvalidConfig("mask values must be >= 0".into()));
        }
        Ok(Mask(v))
    }

    pub fn volume(&self) -> &Volume {
        &self.0
    }

    /// Interpolated mask value at a world point; zero when out of bounds.
    pub fn value_at(&self, p: &Point3) -> f64 {
        let mut out = [0.0f64];
        let inside = self.0.trilinear_into(p, &mut out);
        if inside {
            out[0]
        } else {
            0.0
        }
    }

    /// Voxel indices of all strictly positive voxels.
    pub fn nonzero_voxels(&self) -> Vec<(usize, usize, usize)> {
        let (nx, ny, nz) = self.0.dims;
        let mut out = Vec::new();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if self.0.get(x, y, z, 0) > 0.0 {
                        out.push((x, y, z));
                    }
                }
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// NIfTI-1 subset
// ---------------------------------------------------------------------------

const NIFTI_HEADER_LEN: usize = 348;
const NIFTI_VOX_OFFSET: u64 = 352;

struct HeaderReader<'a> {
    bytes: &'a [u8],
    swap: bool,
}

impl<'a> HeaderReader<'a> {
    fn i16_at(&self, off: usize) -> i16 {
        let b: [u8; 2] = self.bytes[off..off + 2].try_into().unwrap();
        if self.swap {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32_at(&self, off: usize) -> f32 {
        let b: [u8; 4] = self.bytes[off..off + 4].try_into().unwrap();
        if self.swap {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

/// Read an uncompressed NIfTI-1 volume (subset: see module docs).
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes, path)
}

/// Parse NIfTI-1 bytes; `path` is only used for error reporting.
pub fn parse_nifti(bytes: &[u8], path: &Path) -> Result<Volume> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::BadMagic {
            path: path.into(),
            format: "NIfTI-1",
        });
    }

    // Endianness detection via sizeof_hdr.
    let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
    let swap = if le == 348 {
        false
    } else if be == 348 {
        true
    } else {
        return Err(Error::BadMagic {
            path: path.into(),
            format: "NIfTI-1",
        });
    };

    let magic = &bytes[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(Error::BadMagic {
            path: path.into(),
            format: "NIfTI-1",
        });
    }

    let h = HeaderReader {
        bytes: &bytes,
        swap,
    };

    let ndim = h.i16_at(40);
    if ndim != 3 && ndim != 4 {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: format!("dim[0] = {ndim}, expected 3 or 4"),
        });
    }
    let nx = h.i16_at(42) as usize;
    let ny = h.i16_at(44) as usize;
    let nz = h.i16_at(46) as usize;
    let nc = if ndim == 4 { h.i16_at(48) as usize } else { 1 };
    if nx == 0 || ny == 0 || nz == 0 || nc == 0 {
        return Err(Error::MalformedHeader {
            path: path.into(),
            reason: "zero dimension".into(),
        });
    }

    let datatype = h.i16_at(70);
    let elem_size = match datatype {
        2 => 1,  // uint8
        4 => 2,  // int16
        16 => 4, // float32
        other => {
            return Err(Error::UnsupportedDatatype {
                path: path.into(),
                datatype: format!("NIfTI code {other}"),
            })
        }
    };

    let pixdim = [
        h.f32_at(76 + 4) as f64,
        h.f32_at(76 + 8) as f64,
        h.f32_at(76 + 12) as f64,
    ];
    let vox_offset = h.f32_at(108) as u64;
    let sform_code = h.i16_at(254);

    let voxel_to_world = if sform_code > 0 {
        let row = |base: usize| -> [f64; 4] {
            [
                h.f32_at(base) as f64,
                h.f32_at(base + 4) as f64,
                h.f32_at(base + 8) as f64,
                h.f32_at(base + 12) as f64,
            ]
        };
        let rx = row(280);
        let ry = row(296);
        let rz = row(312);
        Affine {
            linear: [
                [rx[0], rx[1], rx[2]],
                [ry[0], ry[1], ry[2]],
                [rz[0], rz[1], rz[2]],
            ],
            translation: [rx[3], ry[3], rz[3]],
        }
    } else {
        let scale = [
            if pixdim[0] > 0.0 { pixdim[0] } else { 1.0 },
            if pixdim[1] > 0.0 { pixdim[1] } else { 1.0 },
            if pixdim[2] > 0.0 { pixdim[2] } else { 1.0 },
        ];
        Affine::scale_translate(scale, [0.0, 0.0, 0.0])
    };

    let voxel_size = [
        if pixdim[0] > 0.0 { pixdim[0] } else { 1.0 },
        if pixdim[1] > 0.0 { pixdim[1] } else { 1.0 },
        if pixdim[2] > 0.0 { pixdim[2] } else { 1.0 },
    ];

    let n_values = nx * ny * nz * nc;
    let needed = n_values * elem_size;
    let start = vox_offset as usize;
    if bytes.len() < start + needed {
        return Err(Error::Truncated {
            path: path.into(),
            expected: start + needed,
            actual: bytes.len(),
        });
    }
    let raw = &bytes[start..start + needed];

    // NIfTI stores the 4th dimension slowest; internally channels are
    // interleaved per voxel.
    let value_at = |i: usize| -> f32 {
        match datatype {
            2 => raw[i] as f32,
            4 => {
                let b: [u8; 2] = raw[2 * i..2 * i + 2].try_into().unwrap();
                let v = if swap {
                    i16::from_be_bytes(b)
                } else {
                    i16::from_le_bytes(b)
                };
                v as f32
            }
            16 => {
                let b: [u8; 4] = raw[4 * i..4 * i + 4].try_into().unwrap();
                if swap {
                    f32::from_be_bytes(b)
                } else {
                    f32::from_le_bytes(b)
                }
            }
            _ => unreachable!(),
        }
    };

    let n_voxels = nx * ny * nz;
    let mut data = vec![0.0f32; n_values];
    for c in 0..nc {
        for v in 0..n_voxels {
            data[v * nc + c] = value_at(c * n_voxels + v);
        }
    }

    Volume::new((nx, ny, nz), nc, voxel_size, voxel_to_world, data)
}

/// Write a volume as float32 little-endian NIfTI-1 with the sform set from
/// `voxel_to_world`.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (nx, ny, nz) = v.dims;
    let nc = v.channels;
    let mut header = vec![0u8; NIFTI_VOX_OFFSET as usize];

    let put_i32 = |h: &mut [u8], off: usize, val: i32| h[off..off + 4].copy_from_slice(&val.to_le_bytes());
    let put_i16 = |h: &mut [u8], off: usize, val: i16| h[off..off + 2].copy_from_slice(&val.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, val: f32| h[off..off + 4].copy_from_slice(&val.to_le_bytes());

    put_i32(&mut header, 0, 348);
    // dim
    let ndim: i16 = if nc > 1 { 4 } else { 3 };
    put_i16(&mut header, 40, ndim);
    put_i16(&mut header, 42, nx as i16);
    put_i16(&mut header, 44, ny as i16);
    put_i16(&mut header, 46, nz as i16);
    put_i16(&mut header, 48, nc.max(1) as i16);
    put_i16(&mut header, 50, 1);
    put_i16(&mut header, 52, 1);
    put_i16(&mut header, 54, 1);
    put_i16(&mut header, 70, 16); // float32
    put_i16(&mut header, 72, 32); // bitpix
    put_f32(&mut header, 76, 1.0); // pixdim[0]
    put_f32(&mut header, 80, v.voxel_size[0] as f32);
    put_f32(&mut header, 84, v.voxel_size[1] as f32);
    put_f32(&mut header, 88, v.voxel_size[2] as f32);
    put_f32(&mut header, 108, NIFTI_VOX_OFFSET as f32);
    put_f32(&mut header, 112, 1.0); // scl_slope
    put_i16(&mut header, 254, 1); // sform_code
    let a = &v.voxel_to_world;
    for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
        put_f32(&mut header, base, a.linear[r][0] as f32);
        put_f32(&mut header, base + 4, a.linear[r][1] as f32);
        put_f32(&mut header, base + 8, a.linear[r][2] as f32);
        put_f32(&mut header, base + 12, a.translation[r] as f32);
    }
    header[344..348].copy_from_slice(b"n+1\0");
    // bytes 348..352 stay zero: no extensions

    let n_voxels = nx * ny * nz;
    let mut body = Vec::with_capacity(n_voxels * nc * 4);
    for c in 0..nc {
        for vx in 0..n_voxels {
            body.extend_from_slice(&v.data[vx * nc + c].to_le_bytes());
        }
    }

    let mut out = header;
    out.extend_from_slice(&body);
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
