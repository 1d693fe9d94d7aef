//! Minimal DICOM support: single-frame, single-series, scalar images in
//! little-endian implicit or explicit VR transfer syntaxes.
//!
//! Multi-frame, multi-sample and compressed pixel data are rejected rather
//! than guessed. A small explicit-VR writer is included so tests and tooling
//! can produce synthetic series.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian as LE};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nifti::write_nifti;
use crate::volume::{Orientation, Volume};

const TS_IMPLICIT_LE: &str = "1.2.840.10008.1.2";
const TS_EXPLICIT_LE: &str = "1.2.840.10008.1.2.1";

const TAG_TRANSFER_SYNTAX: (u16, u16) = (0x0002, 0x0010);
const TAG_SERIES_UID: (u16, u16) = (0x0020, 0x000E);
const TAG_INSTANCE_NUMBER: (u16, u16) = (0x0020, 0x0013);
const TAG_POSITION: (u16, u16) = (0x0020, 0x0032);
const TAG_ORIENTATION: (u16, u16) = (0x0020, 0x0037);
const TAG_SAMPLES_PER_PIXEL: (u16, u16) = (0x0028, 0x0002);
const TAG_NUMBER_OF_FRAMES: (u16, u16) = (0x0028, 0x0008);
const TAG_ROWS: (u16, u16) = (0x0028, 0x0010);
const TAG_COLS: (u16, u16) = (0x0028, 0x0011);
const TAG_PIXEL_SPACING: (u16, u16) = (0x0028, 0x0030);
const TAG_SLICE_THICKNESS: (u16, u16) = (0x0018, 0x0050);
const TAG_SPACING_BETWEEN: (u16, u16) = (0x0018, 0x0088);
const TAG_BITS_ALLOCATED: (u16, u16) = (0x0028, 0x0100);
const TAG_PIXEL_REPRESENTATION: (u16, u16) = (0x0028, 0x0103);
const TAG_RESCALE_INTERCEPT: (u16, u16) = (0x0028, 0x1052);
const TAG_RESCALE_SLOPE: (u16, u16) = (0x0028, 0x1053);
const TAG_PIXEL_DATA: (u16, u16) = (0x7FE0, 0x0010);

/// One parsed single-frame image slice.
#[derive(Debug, Clone)]
pub struct DicomSlice {
    pub series_uid: String,
    pub instance_number: Option<i64>,
    /// ImagePositionPatient in LPS mm.
    pub position: Option<[f64; 3]>,
    /// Direction along increasing column index (first IOP triplet).
    pub row_cosines: Option<[f64; 3]>,
    /// Direction along increasing row index (second IOP triplet).
    pub col_cosines: Option<[f64; 3]>,
    /// [row spacing, column spacing] in mm.
    pub pixel_spacing: Option<[f64; 2]>,
    pub slice_spacing: Option<f64>,
    pub rows: usize,
    pub cols: usize,
    /// Row-major rescaled pixel values.
    pub pixels: Vec<f32>,
}

impl DicomSlice {
    /// Slice normal (row x col cosines), when orientation is present.
    pub fn normal(&self) -> Option<[f64; 3]> {
        let r = self.row_cosines?;
        let c = self.col_cosines?;
        Some([
            r[1] * c[2] - r[2] * c[1],
            r[2] * c[0] - r[0] * c[2],
            r[0] * c[1] - r[1] * c[0],
        ])
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Format("unexpected end of DICOM stream".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn peek_u16(&self) -> Option<u16> {
        if self.remaining() < 2 {
            None
        } else {
            Some(LE::read_u16(&self.bytes[self.pos..]))
        }
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(LE::read_u16(self.take(2)?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(LE::read_u32(self.take(4)?))
    }
}

fn is_explicit_short_vr(vr: &[u8; 2]) -> bool {
    !matches!(vr, b"OB" | b"OW" | b"OF" | b"SQ" | b"UT" | b"UN")
}

/// Read one element (tag, value bytes). Sequences and undefined lengths are
/// skipped and reported as empty values.
fn read_element(cur: &mut Cursor, explicit: bool) -> Result<((u16, u16), Vec<u8>)> {
    let group = cur.u16()?;
    let elem = cur.u16()?;
    let tag = (group, elem);

    let (vr, len): ([u8; 2], u64) = if explicit {
        let vr: [u8; 2] = cur.take(2)?.try_into().unwrap();
        if is_explicit_short_vr(&vr) {
            (vr, cur.u16()? as u64)
        } else {
            cur.take(2)?; // reserved
            (vr, cur.u32()? as u64)
        }
    } else {
        (*b"UN", cur.u32()? as u64)
    };

    if len == 0xFFFF_FFFF {
        if tag == TAG_PIXEL_DATA {
            return Err(Error::Ingest(
                "encapsulated (compressed) pixel data is not supported".into(),
            ));
        }
        skip_undefined_length(cur)?;
        return Ok((tag, Vec::new()));
    }
    if vr == *b"SQ" {
        cur.take(len as usize)?;
        return Ok((tag, Vec::new()));
    }
    Ok((tag, cur.take(len as usize)?.to_vec()))
}

/// Skip to the matching sequence delimitation item (FFFE,E0DD), allowing for
/// nested undefined-length sequences.
fn skip_undefined_length(cur: &mut Cursor) -> Result<()> {
    let mut depth = 1usize;
    loop {
        let group = cur.u16()?;
        let elem = cur.u16()?;
        if group == 0xFFFE {
            let len = cur.u32()?;
            match elem {
                0xE000 => {
                    if len != 0xFFFF_FFFF {
                        cur.take(len as usize)?;
                    }
                }
                0xE00D => {}
                0xE0DD => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(());
                    }
                }
                _ => return Err(Error::Format("unexpected item tag in sequence".into())),
            }
        } else {
            // nested element inside an item; assume implicit layout inside
            // undefined-length regions (we only ever skip them)
            let len = cur.u32()?;
            if len == 0xFFFF_FFFF {
                depth += 1;
            } else {
                cur.take(len as usize)?;
            }
        }
    }
}

fn parse_string(v: &[u8]) -> String {
    String::from_utf8_lossy(v).trim_matches(['\0', ' ']).to_string()
}

fn parse_ds(v: &[u8]) -> Vec<f64> {
    parse_string(v)
        .split('\\')
        .filter_map(|s| s.trim().parse::<f64>().ok())
        .collect()
}

fn parse_us(v: &[u8]) -> Option<u16> {
    if v.len() >= 2 {
        Some(LE::read_u16(v))
    } else {
        None
    }
}

/// Parse a single DICOM file into a [`DicomSlice`].
pub fn read_dicom_slice(path: impl AsRef<Path>) -> Result<DicomSlice> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_slice(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Ingest(m) => Error::Ingest(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn parse_slice(bytes: &[u8]) -> Result<DicomSlice> {
    if bytes.len() < 132 || &bytes[128..132] != b"DICM" {
        return Err(Error::Ingest("missing DICM magic; not a DICOM part-10 file".into()));
    }
    let mut cur = Cursor { bytes, pos: 132 };

    // file meta group is always explicit VR little endian
    let mut transfer_syntax = String::new();
    while let Some(group) = cur.peek_u16() {
        if group != 0x0002 {
            break;
        }
        let (tag, value) = read_element(&mut cur, true)?;
        if tag == TAG_TRANSFER_SYNTAX {
            transfer_syntax = parse_string(&value);
        }
    }
    let explicit = match transfer_syntax.as_str() {
        TS_EXPLICIT_LE => true,
        TS_IMPLICIT_LE => false,
        other => {
            return Err(Error::Ingest(format!(
                "unsupported transfer syntax '{other}' (only little-endian implicit/explicit)"
            )))
        }
    };

    let mut elements: HashMap<(u16, u16), Vec<u8>> = HashMap::new();
    while cur.remaining() >= 8 {
        let (tag, value) = read_element(&mut cur, explicit)?;
        elements.insert(tag, value);
    }

    let pixel_bytes = elements
        .remove(&TAG_PIXEL_DATA)
        .ok_or_else(|| Error::Ingest("no pixel data; not an image object".into()))?;
    let rows = elements
        .get(&TAG_ROWS)
        .and_then(|v| parse_us(v))
        .ok_or_else(|| Error::Ingest("missing Rows attribute".into()))? as usize;
    let cols = elements
        .get(&TAG_COLS)
        .and_then(|v| parse_us(v))
        .ok_or_else(|| Error::Ingest("missing Columns attribute".into()))? as usize;

    if let Some(spp) = elements.get(&TAG_SAMPLES_PER_PIXEL).and_then(|v| parse_us(v)) {
        if spp != 1 {
            return Err(Error::Ingest(format!("SamplesPerPixel = {spp}; only scalar images supported")));
        }
    }
    if let Some(frames) = elements.get(&TAG_NUMBER_OF_FRAMES).map(|v| parse_string(v)) {
        if frames.trim().parse::<i64>().map(|n| n > 1).unwrap_or(false) {
            return Err(Error::Ingest("multi-frame DICOM is not supported".into()));
        }
    }

    let bits = elements.get(&TAG_BITS_ALLOCATED).and_then(|v| parse_us(v)).unwrap_or(16);
    let signed = elements
        .get(&TAG_PIXEL_REPRESENTATION)
        .and_then(|v| parse_us(v))
        .unwrap_or(0)
        == 1;
    let slope = elements.get(&TAG_RESCALE_SLOPE).map(|v| parse_ds(v)).and_then(|v| v.first().copied()).unwrap_or(1.0);
    let intercept = elements
        .get(&TAG_RESCALE_INTERCEPT)
        .map(|v| parse_ds(v))
        .and_then(|v| v.first().copied())
        .unwrap_or(0.0);

    let n = rows * cols;
    let mut pixels = Vec::with_capacity(n);
    match bits {
        8 => {
            if pixel_bytes.len() < n {
                return Err(Error::Format("pixel data shorter than Rows*Columns".into()));
            }
            if signed {
                pixels.extend(pixel_bytes[..n].iter().map(|&b| b as i8 as f32));
            } else {
                pixels.extend(pixel_bytes[..n].iter().map(|&b| b as f32));
            }
        }
        16 => {
            if pixel_bytes.len() < 2 * n {
                return Err(Error::Format("pixel data shorter than Rows*Columns".into()));
            }
            if signed {
                pixels.extend(pixel_bytes[..2 * n].chunks_exact(2).map(|c| LE::read_i16(c) as f32));
            } else {
                pixels.extend(pixel_bytes[..2 * n].chunks_exact(2).map(|c| LE::read_u16(c) as f32));
            }
        }
        other => return Err(Error::Ingest(format!("BitsAllocated = {other}; only 8/16 supported"))),
    }
    if slope != 1.0 || intercept != 0.0 {
        for p in &mut pixels {
            *p = (*p as f64 * slope + intercept) as f32;
        }
    }

    let iop = elements.get(&TAG_ORIENTATION).map(|v| parse_ds(v)).filter(|v| v.len() == 6);
    let (row_cosines, col_cosines) = match iop {
        Some(v) => (Some([v[0], v[1], v[2]]), Some([v[3], v[4], v[5]])),
        None => (None, None),
    };

    Ok(DicomSlice {
        series_uid: elements
            .get(&TAG_SERIES_UID)
            .map(|v| parse_string(v))
            .ok_or_else(|| Error::Ingest("missing SeriesInstanceUID".into()))?,
        instance_number: elements
            .get(&TAG_INSTANCE_NUMBER)
            .map(|v| parse_string(v))
            .and_then(|s| s.trim().parse().ok()),
        position: elements
            .get(&TAG_POSITION)
            .map(|v| parse_ds(v))
            .filter(|v| v.len() == 3)
            .map(|v| [v[0], v[1], v[2]]),
        row_cosines,
        col_cosines,
        pixel_spacing: elements
            .get(&TAG_PIXEL_SPACING)
            .map(|v| parse_ds(v))
            .filter(|v| v.len() == 2)
            .map(|v| [v[0], v[1]]),
        slice_spacing: elements
            .get(&TAG_SPACING_BETWEEN)
            .or_else(|| elements.get(&TAG_SLICE_THICKNESS))
            .map(|v| parse_ds(v))
            .and_then(|v| v.first().copied()),
        rows,
        cols,
        pixels,
    })
}

/// Ingest a directory containing exactly one single-frame DICOM series and
/// stack it into a volume indexed (row, column, slice).
pub fn load_dicom_series(dir: impl AsRef<Path>) -> Result<Volume> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Ingest(format!("{}: no files in directory", dir.display())));
    }

    let mut slices: Vec<DicomSlice> = paths.iter().map(read_dicom_slice).collect::<Result<_>>()?;

    let series = slices[0].series_uid.clone();
    if slices.iter().any(|s| s.series_uid != series) {
        return Err(Error::Ingest(format!(
            "{}: directory mixes multiple series",
            dir.display()
        )));
    }
    let (rows, cols) = (slices[0].rows, slices[0].cols);
    if slices.iter().any(|s| s.rows != rows || s.cols != cols) {
        return Err(Error::Ingest(format!("{}: inconsistent slice dimensions", dir.display())));
    }

    // Order slices by the projection of their position onto the slice
    // normal; fall back to instance numbers when positions are absent.
    let have_positions = slices.iter().all(|s| s.position.is_some()) && slices[0].normal().is_some();
    if have_positions {
        let normal = slices[0].normal().unwrap();
        let proj = |s: &DicomSlice| {
            let p = s.position.unwrap();
            p[0] * normal[0] + p[1] * normal[1] + p[2] * normal[2]
        };
        slices.sort_by(|a, b| proj(a).total_cmp(&proj(b)));
        for pair in slices.windows(2) {
            if (proj(&pair[1]) - proj(&pair[0])).abs() < 1e-4 {
                return Err(Error::Ingest(format!(
                    "{}: duplicate slice positions cannot be disambiguated",
                    dir.display()
                )));
            }
        }
    } else {
        if slices.iter().any(|s| s.instance_number.is_none()) {
            return Err(Error::Ingest(format!(
                "{}: slices carry neither positions nor instance numbers",
                dir.display()
            )));
        }
        slices.sort_by_key(|s| s.instance_number.unwrap());
        for pair in slices.windows(2) {
            if pair[0].instance_number == pair[1].instance_number {
                return Err(Error::Ingest(format!(
                    "{}: duplicate instance numbers cannot be disambiguated",
                    dir.display()
                )));
            }
        }
    }

    let depth = slices.len();
    let mut data = Array3::<f32>::zeros((rows, cols, depth));
    for (k, s) in slices.iter().enumerate() {
        if s.pixels.len() != rows * cols {
            return Err(Error::Ingest(format!("{}: slice {k} has wrong pixel count", dir.display())));
        }
        for r in 0..rows {
            for c in 0..cols {
                data[[r, c, k]] = s.pixels[r * cols + c];
            }
        }
    }

    let px = slices[0].pixel_spacing.unwrap_or([1.0, 1.0]);
    let slice_gap = if have_positions && depth > 1 {
        let normal = slices[0].normal().unwrap();
        let proj = |s: &DicomSlice| {
            let p = s.position.unwrap();
            p[0] * normal[0] + p[1] * normal[1] + p[2] * normal[2]
        };
        let mut gaps: Vec<f64> =
            slices.windows(2).map(|p| (proj(&p[1]) - proj(&p[0])).abs()).collect();
        gaps.sort_by(f64::total_cmp);
        gaps[gaps.len() / 2]
    } else {
        slices[0].slice_spacing.unwrap_or(1.0)
    };
    let spacing = [px[0], px[1], slice_gap];

    let orientation = match (slices[0].row_cosines, slices[0].col_cosines, slices[0].normal()) {
        (Some(row), Some(col), Some(normal)) => {
            // storage axis 0 = increasing row index, axis 1 = increasing
            // column index, axis 2 = ascending position along the normal
            Orientation::from_lps_directions([col, row, normal])?
        }
        _ => Orientation::Unknown,
    };

    Volume::new(data, spacing, orientation).map_err(|e| match e {
        Error::Format(m) => Error::Ingest(format!("{}: {m}", dir.display())),
        other => other,
    })
}

/// Convert a DICOM series directory into a single NIfTI file at `out`.
pub fn convert_series_to_nifti(dir: impl AsRef<Path>, out: impl AsRef<Path>) -> Result<PathBuf> {
    let volume = load_dicom_series(dir)?;
    write_nifti(&volume, out)
}

// ---------------------------------------------------------------------------
// writer (synthetic series for tests and tooling)
// ---------------------------------------------------------------------------

/// Metadata for one written slice.
#[derive(Debug, Clone)]
pub struct SliceSpec {
    pub series_uid: String,
    pub instance_number: i64,
    pub position: [f64; 3],
    pub row_cosines: [f64; 3],
    pub col_cosines: [f64; 3],
    pub pixel_spacing: [f64; 2],
    pub slice_spacing: f64,
}

fn push_element(out: &mut Vec<u8>, tag: (u16, u16), vr: &[u8; 2], value: &[u8]) {
    let mut padded = value.to_vec();
    if padded.len() % 2 == 1 {
        padded.push(if vr == b"UI" { 0 } else { b' ' });
    }
    let mut buf = [0u8; 4];
    LE::write_u16(&mut buf[0..2], tag.0);
    LE::write_u16(&mut buf[2..4], tag.1);
    out.extend_from_slice(&buf);
    out.extend_from_slice(vr);
    if is_explicit_short_vr(vr) {
        let mut l = [0u8; 2];
        LE::write_u16(&mut l, padded.len() as u16);
        out.extend_from_slice(&l);
    } else {
        out.extend_from_slice(&[0, 0]);
        let mut l = [0u8; 4];
        LE::write_u32(&mut l, padded.len() as u32);
        out.extend_from_slice(&l);
    }
    out.extend_from_slice(&padded);
}

fn ds(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .map(|v| format!("{v}"))
        .collect::<Vec<_>>()
        .join("\\")
        .into_bytes()
}

fn us(v: u16) -> Vec<u8> {
    let mut b = [0u8; 2];
    LE::write_u16(&mut b, v);
    b.to_vec()
}

/// Write one explicit-VR little-endian single-frame slice with unsigned
/// 16-bit pixels (row-major).
pub fn write_dicom_slice(
    path: impl AsRef<Path>,
    spec: &SliceSpec,
    rows: usize,
    cols: usize,
    pixels: &[u16],
) -> Result<()> {
    let path = path.as_ref();
    assert_eq!(pixels.len(), rows * cols, "pixel buffer must be rows*cols");

    let mut meta = Vec::new();
    push_element(&mut meta, TAG_TRANSFER_SYNTAX, b"UI", TS_EXPLICIT_LE.as_bytes());

    let mut body = Vec::new();
    push_element(&mut body, (0x0008, 0x0016), b"UI", b"1.2.840.10008.5.1.4.1.1.4");
    push_element(
        &mut body,
        (0x0008, 0x0018),
        b"UI",
        format!("{}.{}", spec.series_uid, spec.instance_number).as_bytes(),
    );
    push_element(&mut body, TAG_SLICE_THICKNESS, b"DS", &ds(&[spec.slice_spacing]));
    push_element(&mut body, TAG_SPACING_BETWEEN, b"DS", &ds(&[spec.slice_spacing]));
    push_element(&mut body, TAG_SERIES_UID, b"UI", spec.series_uid.as_bytes());
    push_element(&mut body, TAG_INSTANCE_NUMBER, b"IS", spec.instance_number.to_string().as_bytes());
    push_element(&mut body, TAG_POSITION, b"DS", &ds(&spec.position));
    let iop = [
        spec.row_cosines[0],
        spec.row_cosines[1],
        spec.row_cosines[2],
        spec.col_cosines[0],
        spec.col_cosines[1],
        spec.col_cosines[2],
    ];
    push_element(&mut body, TAG_ORIENTATION, b"DS", &ds(&iop));
    push_element(&mut body, TAG_SAMPLES_PER_PIXEL, b"US", &us(1));
    push_element(&mut body, TAG_ROWS, b"US", &us(rows as u16));
    push_element(&mut body, TAG_COLS, b"US", &us(cols as u16));
    push_element(&mut body, TAG_PIXEL_SPACING, b"DS", &ds(&spec.pixel_spacing));
    push_element(&mut body, TAG_BITS_ALLOCATED, b"US", &us(16));
    push_element(&mut body, (0x0028, 0x0101), b"US", &us(16));
    push_element(&mut body, (0x0028, 0x0102), b"US", &us(15));
    push_element(&mut body, TAG_PIXEL_REPRESENTATION, b"US", &us(0));
    let mut pixel_bytes = vec![0u8; pixels.len() * 2];
    LE::write_u16_into(pixels, &mut pixel_bytes);
    push_element(&mut body, TAG_PIXEL_DATA, b"OW", &pixel_bytes);

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&[0u8; 128]).map_err(|e| Error::io(path, e))?;
    w.write_all(b"DICM").map_err(|e| Error::io(path, e))?;
    w.write_all(&meta).map_err(|e| Error::io(path, e))?;
    w.write_all(&body).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Write an axial series (one file per depth index) for a (rows, cols,
/// slices) array of unsigned 16-bit values.
pub fn write_dicom_series(
    dir: impl AsRef<Path>,
    series_uid: &str,
    voxels: &Array3<u16>,
    spacing: [f64; 3],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (rows, cols, depth) = voxels.dim();
    for k in 0..depth {
        let spec = SliceSpec {
            series_uid: series_uid.to_string(),
            instance_number: (k + 1) as i64,
            // axial, first slice inferior-most: position climbs along +z (S)
            position: [0.0, 0.0, k as f64 * spacing[2]],
            row_cosines: [1.0, 0.0, 0.0],
            col_cosines: [0.0, 1.0, 0.0],
            pixel_spacing: [spacing[0], spacing[1]],
            slice_spacing: spacing[2],
        };
        let mut pixels = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                pixels.push(voxels[[r, c, k]]);
            }
        }
        write_dicom_slice(dir.join(format!("slice_{k:04}.dcm")), &spec, rows, cols, &pixels)?;
    }
    Ok(())
}
