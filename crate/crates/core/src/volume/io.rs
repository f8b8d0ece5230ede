//! Volume file formats: the native `SREGVOL1` raw float32 container and
//! single-file NIfTI-1 (`.nii`, optionally gzipped).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use super::{GridGeometry, ScalarVolume};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 8] = b"SREGVOL1";
pub const RAW_HEADER_LEN: usize = 48;
const NIFTI_HEADER_LEN: usize = 348;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeFormat {
    Nifti1,
    RawF32,
}

impl VolumeFormat {
    /// `.nii` / `.nii.gz` map to NIfTI-1, everything else to raw-f32.
    pub fn from_path(path: &Path) -> Self {
        let name = path
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("")
            .to_ascii_lowercase();
        if name.ends_with(".nii") || name.ends_with(".nii.gz") {
            VolumeFormat::Nifti1
        } else {
            VolumeFormat::RawF32
        }
    }
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<ScalarVolume> {
    let bytes = read_maybe_gz(path)?;
    match format {
        VolumeFormat::RawF32 => decode_raw(&bytes, path),
        VolumeFormat::Nifti1 => decode_nifti(&bytes, path),
    }
}

pub fn save_volume(v: &ScalarVolume, path: &Path, format: VolumeFormat) -> Result<()> {
    let bytes = match format {
        VolumeFormat::RawF32 => encode_raw(v),
        VolumeFormat::Nifti1 => encode_nifti(v),
    };
    write_maybe_gz(path, &bytes)
}

fn is_gz(path: &Path) -> bool {
    path.extension()
        .map(|e| e.eq_ignore_ascii_case("gz"))
        .unwrap_or(false)
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if is_gz(path) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn write_maybe_gz(path: &Path, bytes: &[u8]) -> Result<()> {
    if is_gz(path) {
        let mut enc = GzEncoder::new(fs::File::create(path)?, Compression::default());
        enc.write_all(bytes)?;
        enc.finish()?;
    } else {
        fs::write(path, bytes)?;
    }
    Ok(())
}

/// Writes the 48-byte geometry header shared by the volume and map containers.
pub(crate) fn write_geometry_header(out: &mut Vec<u8>, magic: &[u8; 8], g: &GridGeometry) {
    out.extend_from_slice(magic);
    for &d in &g.dims {
        out.write_u32::<LittleEndian>(d as u32).unwrap();
    }
    for &s in &g.spacing {
        out.write_f32::<LittleEndian>(s as f32).unwrap();
    }
    for &o in &g.origin {
        out.write_f32::<LittleEndian>(o as f32).unwrap();
    }
    out.extend_from_slice(&[0u8; 4]);
}

pub(crate) fn read_geometry_header(
    bytes: &[u8],
    magic: &[u8; 8],
    path: &Path,
) -> Result<GridGeometry> {
    let malformed = |reason: &str| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: reason.into(),
    };
    if bytes.len() < RAW_HEADER_LEN {
        return Err(malformed("file shorter than the 48-byte header"));
    }
    if &bytes[..8] != magic {
        return Err(malformed("bad magic"));
    }
    let mut dims = [0usize; 3];
    let mut spacing = [0.0; 3];
    let mut origin = [0.0; 3];
    for a in 0..3 {
        dims[a] = LittleEndian::read_u32(&bytes[8 + 4 * a..]) as usize;
        spacing[a] = LittleEndian::read_f32(&bytes[20 + 4 * a..]) as f64;
        origin[a] = LittleEndian::read_f32(&bytes[32 + 4 * a..]) as f64;
    }
    GridGeometry::new(dims, spacing, origin).map_err(|e| malformed(&e.to_string()))
}

fn encode_raw(v: &ScalarVolume) -> Vec<u8> {
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + 4 * v.data.len());
    write_geometry_header(&mut out, RAW_MAGIC, &v.geometry);
    for &x in &v.data {
        out.write_f32::<LittleEndian>(x as f32).unwrap();
    }
    out
}

fn decode_raw(bytes: &[u8], path: &Path) -> Result<ScalarVolume> {
    let geometry = read_geometry_header(bytes, RAW_MAGIC, path)?;
    let n = geometry.len();
    let expected = RAW_HEADER_LEN + 4 * n;
    if bytes.len() < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: bytes.len(),
        });
    }
    let data = bytes[RAW_HEADER_LEN..expected]
        .chunks_exact(4)
        .map(|c| LittleEndian::read_f32(c) as f64)
        .collect();
    ScalarVolume::new(geometry, data)
}

struct NiftiHeader {
    dims: [usize; 3],
    datatype: i16,
    pixdim: [f64; 3],
    vox_offset: usize,
    slope: f64,
    inter: f64,
    origin: [f64; 3],
    separate_image: bool,
}

fn parse_nifti_header<E: ByteOrder>(b: &[u8], path: &Path) -> Result<NiftiHeader> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let magic = &b[344..348];
    let separate_image = match magic {
        b"n+1\0" => false,
        b"ni1\0" => true,
        _ => return Err(malformed(format!("bad magic {magic:?}"))),
    };
    let ndim = E::read_i16(&b[40..]);
    if !(3..=7).contains(&ndim) {
        return Err(malformed(format!("dim[0] = {ndim}, need a 3D volume")));
    }
    let mut dims = [0usize; 3];
    for a in 0..3 {
        let d = E::read_i16(&b[42 + 2 * a..]);
        if d < 1 {
            return Err(malformed(format!("dim[{}] = {d}", a + 1)));
        }
        dims[a] = d as usize;
    }
    for a in 3..ndim as usize {
        let d = E::read_i16(&b[42 + 2 * a..]);
        if d > 1 {
            return Err(malformed(format!(
                "dim[{}] = {d}; only single 3D volumes are supported",
                a + 1
            )));
        }
    }
    let datatype = E::read_i16(&b[70..]);
    let mut pixdim = [1.0; 3];
    for a in 0..3 {
        let p = E::read_f32(&b[80 + 4 * a..]) as f64;
        pixdim[a] = if p > 0.0 && p.is_finite() { p } else { 1.0 };
    }
    let vox_offset = E::read_f32(&b[108..]);
    if !(vox_offset >= 0.0 && vox_offset.is_finite()) {
        return Err(malformed(format!("vox_offset = {vox_offset}")));
    }
    let slope = E::read_f32(&b[112..]) as f64;
    let inter = E::read_f32(&b[116..]) as f64;
    let qform = E::read_i16(&b[252..]);
    let sform = E::read_i16(&b[254..]);
    let origin = if qform > 0 {
        [
            E::read_f32(&b[268..]) as f64,
            E::read_f32(&b[272..]) as f64,
            E::read_f32(&b[276..]) as f64,
        ]
    } else if sform > 0 {
        [
            E::read_f32(&b[292..]) as f64,
            E::read_f32(&b[308..]) as f64,
            E::read_f32(&b[324..]) as f64,
        ]
    } else {
        [0.0; 3]
    };
    Ok(NiftiHeader {
        dims,
        datatype,
        pixdim,
        vox_offset: vox_offset as usize,
        slope,
        inter,
        origin,
        separate_image,
    })
}

fn decode_nifti(bytes: &[u8], path: &Path) -> Result<ScalarVolume> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "shorter than 348 bytes".into(),
        });
    }
    let little = LittleEndian::read_i32(&bytes[0..]) == 348;
    let big = BigEndian::read_i32(&bytes[0..]) == 348;
    let h = if little {
        parse_nifti_header::<LittleEndian>(bytes, path)?
    } else if big {
        parse_nifti_header::<BigEndian>(bytes, path)?
    } else {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: "sizeof_hdr != 348".into(),
        });
    };
    let width = match h.datatype {
        2 => 1,
        4 => 2,
        16 => 4,
        64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let image_bytes;
    let payload: &[u8] = if h.separate_image {
        image_bytes = read_maybe_gz(&path.with_extension("img"))?;
        &image_bytes[h.vox_offset.min(image_bytes.len())..]
    } else {
        let start = h.vox_offset.max(NIFTI_HEADER_LEN);
        &bytes[start.min(bytes.len())..]
    };
    let n = h.dims[0] * h.dims[1] * h.dims[2];
    if payload.len() < n * width {
        return Err(Error::TruncatedPayload {
            expected: n * width,
            found: payload.len(),
        });
    }
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let c = &payload[i * width..];
            match (h.datatype, little) {
                (2, _) => c[0] as f64,
                (4, true) => LittleEndian::read_i16(c) as f64,
                (4, false) => BigEndian::read_i16(c) as f64,
                (16, true) => LittleEndian::read_f32(c) as f64,
                (16, false) => BigEndian::read_f32(c) as f64,
                (_, true) => LittleEndian::read_f64(c),
                (_, false) => BigEndian::read_f64(c),
            }
        })
        .collect();
    let data = if h.slope != 0.0 && h.slope.is_finite() {
        raw.into_iter().map(|v| v * h.slope + h.inter).collect()
    } else {
        raw
    };
    let geometry = GridGeometry::new(h.dims, h.pixdim, h.origin)?;
    ScalarVolume::new(geometry, data)
}

fn encode_nifti(v: &ScalarVolume) -> Vec<u8> {
    let g = &v.geometry;
    let mut h = vec![0u8; 352];
    LittleEndian::write_i32(&mut h[0..], 348);
    LittleEndian::write_i16(&mut h[40..], 3);
    for a in 0..3 {
        LittleEndian::write_i16(&mut h[42 + 2 * a..], g.dims[a] as i16);
    }
    for a in 3..7 {
        LittleEndian::write_i16(&mut h[42 + 2 * a..], 1);
    }
    LittleEndian::write_i16(&mut h[70..], 16);
    LittleEndian::write_i16(&mut h[72..], 32);
    LittleEndian::write_f32(&mut h[76..], 1.0);
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[80 + 4 * a..], g.spacing[a] as f32);
    }
    LittleEndian::write_f32(&mut h[108..], 352.0);
    LittleEndian::write_f32(&mut h[112..], 1.0);
    LittleEndian::write_f32(&mut h[116..], 0.0);
    h[123] = 2 | 8; // xyzt_units: mm, s
    LittleEndian::write_i16(&mut h[252..], 1);
    LittleEndian::write_i16(&mut h[254..], 1);
    for a in 0..3 {
        LittleEndian::write_f32(&mut h[268 + 4 * a..], g.origin[a] as f32);
    }
    for a in 0..3 {
        let row = 280 + 16 * a;
        LittleEndian::write_f32(&mut h[row + 4 * a..], g.spacing[a] as f32);
        LittleEndian::write_f32(&mut h[row + 12..], g.origin[a] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    h.reserve(4 * v.data.len());
    for &x in &v.data {
        h.write_f32::<LittleEndian>(x as f32).unwrap();
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Builds a minimal little-endian NIfTI-1 header by hand.
    fn handmade_nifti(
        dims: [i16; 3],
        datatype: i16,
        bitpix: i16,
        slope: f32,
        inter: f32,
        payload: &[u8],
    ) -> Vec<u8> {
        let mut b = vec![0u8; 352];
        b[0..4].copy_from_slice(&348i32.to_le_bytes());
        b[40..42].copy_from_slice(&3i16.to_le_bytes());
        for a in 0..3 {
            b[42 + 2 * a..44 + 2 * a].copy_from_slice(&dims[a].to_le_bytes());
        }
        b[70..72].copy_from_slice(&datatype.to_le_bytes());
        b[72..74].copy_from_slice(&bitpix.to_le_bytes());
        for a in 0..3 {
            b[80 + 4 * a..84 + 4 * a].copy_from_slice(&2.0f32.to_le_bytes());
        }
        b[108..112].copy_from_slice(&352.0f32.to_le_bytes());
        b[112..116].copy_from_slice(&slope.to_le_bytes());
        b[116..120].copy_from_slice(&inter.to_le_bytes());
        b[344..348].copy_from_slice(b"n+1\0");
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn nifti_scaling_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.nii");
        let payload: Vec<u8> = (0..8).flat_map(|_| 3i16.to_le_bytes()).collect();
        fs::write(&path, handmade_nifti([2, 2, 2], 4, 16, 2.0, 1.0, &payload)).unwrap();
        let v = load_volume(&path, VolumeFormat::Nifti1).unwrap();
        assert!(v.data.iter().all(|&x| x == 7.0));
        assert_eq!(v.geometry.spacing, [2.0; 3]);
    }

    #[test]
    fn nifti_uint8_and_float64() {
        let dir = tempfile::tempdir().unwrap();
        let p8 = dir.path().join("u8.nii");
        fs::write(
            &p8,
            handmade_nifti([2, 2, 2], 2, 8, 0.0, 0.0, &[0, 1, 2, 3, 4, 5, 6, 255]),
        )
        .unwrap();
        let v = load_volume(&p8, VolumeFormat::Nifti1).unwrap();
        assert_eq!(v.data, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 255.0]);
        let p64 = dir.path().join("f64.nii");
        let payload: Vec<u8> = (0..8)
            .flat_map(|i| (i as f64 * 0.5).to_le_bytes())
            .collect();
        fs::write(&p64, handmade_nifti([2, 2, 2], 64, 64, 0.0, 0.0, &payload)).unwrap();
        let v = load_volume(&p64, VolumeFormat::Nifti1).unwrap();
        assert_eq!(v.data[7], 3.5);
    }

    #[test]
    fn nifti_error_kinds_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let bad_magic = dir.path().join("m.nii");
        let mut b = handmade_nifti([2, 2, 2], 16, 32, 0.0, 0.0, &[0u8; 32]);
        b[344..348].copy_from_slice(b"abc\0");
        fs::write(&bad_magic, b).unwrap();
        assert!(matches!(
            load_volume(&bad_magic, VolumeFormat::Nifti1),
            Err(Error::MalformedHeader { .. })
        ));

        let bad_type = dir.path().join("t.nii");
        fs::write(
            &bad_type,
            handmade_nifti([2, 2, 2], 32, 64, 0.0, 0.0, &[0u8; 128]),
        )
        .unwrap();
        assert!(matches!(
            load_volume(&bad_type, VolumeFormat::Nifti1),
            Err(Error::UnsupportedDatatype(32))
        ));

        let short = dir.path().join("p.nii");
        fs::write(
            &short,
            handmade_nifti([2, 2, 2], 16, 32, 0.0, 0.0, &[0u8; 20]),
        )
        .unwrap();
        assert!(matches!(
            load_volume(&short, VolumeFormat::Nifti1),
            Err(Error::TruncatedPayload { .. })
        ));
    }

    #[test]
    fn nifti_write_read_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let g = GridGeometry::new([3, 4, 2], [0.5, 1.0, 2.0], [-1.0, 2.0, 3.5]).unwrap();
        let v = ScalarVolume::from_fn(g, |p| (p[0] + 2.0 * p[1] - p[2]).round());
        for name in ["v.nii", "v.nii.gz"] {
            let path = dir.path().join(name);
            save_volume(&v, &path, VolumeFormat::from_path(&path)).unwrap();
            let back = load_volume(&path, VolumeFormat::Nifti1).unwrap();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn raw_truncated_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let v = ScalarVolume::filled(GridGeometry::cube(3), 1.0);
        let path = dir.path().join("v.vol");
        save_volume(&v, &path, VolumeFormat::RawF32).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert_eq!(bytes.len(), RAW_HEADER_LEN + 27 * 4);
        fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(
            load_volume(&path, VolumeFormat::RawF32),
            Err(Error::TruncatedPayload { .. })
        ));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        fs::write(&path, bad).unwrap();
        assert!(matches!(
            load_volume(&path, VolumeFormat::RawF32),
            Err(Error::MalformedHeader { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn raw_roundtrip_is_identity(
            dims in proptest::array::uniform3(2usize..6),
            spacing in proptest::array::uniform3(0.25f32..4.0),
            origin in proptest::array::uniform3(-50.0f32..50.0),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = GridGeometry::new(dims, spacing.map(|s| s as f64), origin.map(|o| o as f64)).unwrap();
            let data = (0..g.len()).map(|_| rng.random_range(-1e3f32..1e3) as f64).collect();
            let v = ScalarVolume::new(g, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("r.vol");
            save_volume(&v, &path, VolumeFormat::RawF32).unwrap();
            prop_assert_eq!(load_volume(&path, VolumeFormat::RawF32).unwrap(), v);
        }
    }
}
