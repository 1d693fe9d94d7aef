//! Single-file NIfTI-1 reading and writing.
//!
//! Volumes are stored as float32 with an sform matrix encoding spacing and
//! the axis convention. Reading accepts the common scalar datatypes and
//! converts to float32; writing always emits float32, so a write/read round
//! trip is bit-exact.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian as LE};
use ndarray::{Array3, ShapeBuilder};

use crate::error::{Error, Result};
use crate::volume::{Orientation, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_UINT16: i16 = 512;

/// Read a NIfTI-1 volume from `path`.
pub fn read_nifti(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse_nifti(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

fn parse_nifti(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format("truncated header".into()));
    }
    let hdr = &bytes[..HEADER_SIZE];
    if &hdr[344..348] != MAGIC && &hdr[344..348] != b"ni1\0" {
        return Err(Error::Format("bad magic, not a NIfTI-1 file".into()));
    }
    // Only little-endian files are produced by this pipeline; detect the
    // other byte order via an implausible dim[0] and reject it explicitly.
    let dim0 = LE::read_i16(&hdr[40..42]);
    if !(1..=7).contains(&dim0) {
        return Err(Error::Format("unsupported byte order or corrupt dim field".into()));
    }
    let mut dims = [1usize; 7];
    for (i, d) in dims.iter_mut().enumerate().take(dim0 as usize) {
        let v = LE::read_i16(&hdr[42 + 2 * i..44 + 2 * i]);
        if v < 1 {
            return Err(Error::Format(format!("non-positive dimension dim[{}] = {v}", i + 1)));
        }
        *d = v as usize;
    }
    if dim0 < 3 || dims[3..].iter().any(|&d| d != 1) {
        return Err(Error::Format(format!("expected a 3D volume, got dims {dims:?}")));
    }
    let (h, w, d) = (dims[0], dims[1], dims[2]);

    let datatype = LE::read_i16(&hdr[70..72]);
    let vox_offset = LE::read_f32(&hdr[108..112]) as usize;
    if vox_offset < HEADER_SIZE {
        return Err(Error::Format(format!("vox_offset {vox_offset} overlaps the header")));
    }
    let scl_slope = LE::read_f32(&hdr[112..116]);
    let scl_inter = LE::read_f32(&hdr[116..120]);

    let n = h * w * d;
    let elem = match datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Format(format!("unsupported datatype code {other}"))),
    };
    let need = vox_offset + n * elem;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "truncated file: need {need} bytes, have {}",
            bytes.len()
        )));
    }
    let body = &bytes[vox_offset..need];
    let mut raw: Vec<f32> = Vec::with_capacity(n);
    match datatype {
        DT_UINT8 => raw.extend(body.iter().map(|&b| b as f32)),
        DT_INT16 => raw.extend(body.chunks_exact(2).map(|c| LE::read_i16(c) as f32)),
        DT_UINT16 => raw.extend(body.chunks_exact(2).map(|c| LE::read_u16(c) as f32)),
        DT_INT32 => raw.extend(body.chunks_exact(4).map(|c| LE::read_i32(c) as f32)),
        DT_FLOAT32 => raw.extend(body.chunks_exact(4).map(LE::read_f32)),
        DT_FLOAT64 => raw.extend(body.chunks_exact(8).map(|c| LE::read_f64(c) as f32)),
        _ => unreachable!(),
    }
    if scl_slope != 0.0 && (scl_slope != 1.0 || scl_inter != 0.0) {
        for v in &mut raw {
            *v = *v * scl_slope + scl_inter;
        }
    }

    // NIfTI stores the first index fastest; rebuild as standard layout.
    let data = Array3::from_shape_vec((h, w, d).f(), raw)
        .map_err(|e| Error::Format(format!("shape mismatch: {e}")))?
        .as_standard_layout()
        .to_owned();

    let mut spacing = [0.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let p = LE::read_f32(&hdr[80 + 4 * i..84 + 4 * i]).abs() as f64;
        *s = if p > 0.0 { p } else { 1.0 };
    }

    let sform_code = LE::read_i16(&hdr[254..256]);
    let orientation = if sform_code > 0 {
        let mut dirs = [[0.0f64; 3]; 3];
        for row in 0..3 {
            for col in 0..3 {
                let v = LE::read_f32(&hdr[280 + 16 * row + 4 * col..]) as f64;
                // sform is RAS; flip x and y to get LPS.
                dirs[col][row] = if row < 2 { -v } else { v };
            }
        }
        Orientation::from_lps_directions(dirs)?
    } else {
        Orientation::Canonical
    };

    Volume::new(data, spacing, orientation)
}

/// Write `v` to `path` as a single-file float32 NIfTI-1 volume.
pub fn write_nifti(v: &Volume, path: impl AsRef<Path>) -> Result<PathBuf> {
    let path = path.as_ref();
    let (h, w, d) = v.shape();
    let spacing = v.spacing();

    let mut hdr = [0u8; VOX_OFFSET];
    LE::write_i32(&mut hdr[0..4], HEADER_SIZE as i32);
    LE::write_i16(&mut hdr[40..42], 3);
    LE::write_i16(&mut hdr[42..44], h as i16);
    LE::write_i16(&mut hdr[44..46], w as i16);
    LE::write_i16(&mut hdr[46..48], d as i16);
    for i in 3..7 {
        LE::write_i16(&mut hdr[42 + 2 * i..44 + 2 * i], 1);
    }
    LE::write_i16(&mut hdr[70..72], DT_FLOAT32);
    LE::write_i16(&mut hdr[72..74], 32);
    LE::write_f32(&mut hdr[76..80], 1.0); // qfac
    for (i, s) in spacing.iter().enumerate() {
        LE::write_f32(&mut hdr[80 + 4 * i..84 + 4 * i], *s as f32);
    }
    LE::write_f32(&mut hdr[108..112], VOX_OFFSET as f32);
    LE::write_f32(&mut hdr[112..116], 1.0); // scl_slope
    hdr[123] = 2; // mm
    LE::write_i16(&mut hdr[252..254], 0); // qform_code
    if !matches!(v.orientation(), Orientation::Unknown) {
        LE::write_i16(&mut hdr[254..256], 1); // sform_code: scanner
        let dirs = v.orientation().lps_directions();
        for row in 0..3 {
            for col in 0..3 {
                // LPS -> RAS: flip x and y.
                let sign = if row < 2 { -1.0 } else { 1.0 };
                let val = sign * dirs[col][row] * spacing[col];
                LE::write_f32(
                    &mut hdr[280 + 16 * row + 4 * col..284 + 16 * row + 4 * col],
                    val as f32,
                );
            }
        }
    }
    hdr[344..348].copy_from_slice(MAGIC);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    out.write_all(&hdr).map_err(|e| Error::io(path, e))?;
    // first index fastest
    let data = v.data();
    let mut buf = vec![0u8; 4 * h];
    for k in 0..d {
        for j in 0..w {
            for i in 0..h {
                LE::write_f32(&mut buf[4 * i..4 * i + 4], data[[i, j, k]]);
            }
            out.write_all(&buf).map_err(|e| Error::io(path, e))?;
        }
    }
    out.flush().map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}
