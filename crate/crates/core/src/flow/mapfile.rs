use std::io::Write;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use super::register::ShellDiagnostic;
use super::{DeformationMap, Mat3, ShellRecord};
use crate::error::{Error, Result};
use crate::volume::io::{read_geometry_header, write_geometry_header, RAW_HEADER_LEN};
use crate::volume::VectorVolume;

pub const MAP_MAGIC: &[u8; 8] = b"SREGMAP1";

/// Geometry header, q_total (3 × f32 per voxel), J_total (9 × f32 per voxel,
/// row-major), a JSON array of shell records, and the JSON byte length as a
/// trailing u64; all little-endian.
pub fn save_map(map: &DeformationMap, path: &Path) -> Result<()> {
    let n = map.geometry.len();
    let mut out = Vec::with_capacity(RAW_HEADER_LEN + n * 48 + 256);
    write_geometry_header(&mut out, MAP_MAGIC, &map.geometry);
    let mut buf = [0u8; 4];
    for q in &map.q_total.data {
        for c in q {
            LittleEndian::write_f32(&mut buf, *c as f32);
            out.extend_from_slice(&buf);
        }
    }
    for j in &map.j_total {
        for r in 0..3 {
            for c in 0..3 {
                LittleEndian::write_f32(&mut buf, j[(r, c)] as f32);
                out.extend_from_slice(&buf);
            }
        }
    }
    let json = serde_json::to_vec(&map.shells).map_err(|e| Error::Serde(e.to_string()))?;
    out.extend_from_slice(&json);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

pub fn load_map(path: &Path) -> Result<DeformationMap> {
    let bytes = std::fs::read(path)?;
    let geometry = read_geometry_header(&bytes, MAP_MAGIC, path)?;
    let n = geometry.len();
    let payload = n * 12 * 4;
    let need = RAW_HEADER_LEN + payload + 8;
    if bytes.len() < need {
        return Err(Error::TruncatedPayload {
            expected: need,
            found: bytes.len(),
        });
    }
    let json_len = LittleEndian::read_u64(&bytes[bytes.len() - 8..]) as usize;
    if RAW_HEADER_LEN + payload + json_len + 8 != bytes.len() {
        return Err(Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: format!(
                "trailer length {json_len} inconsistent with file size {}",
                bytes.len()
            ),
        });
    }
    let body = &bytes[RAW_HEADER_LEN..RAW_HEADER_LEN + payload];
    let f = |k: usize| LittleEndian::read_f32(&body[4 * k..4 * k + 4]) as f64;
    let q = (0..n)
        .map(|i| [f(3 * i), f(3 * i + 1), f(3 * i + 2)])
        .collect();
    let off = 3 * n;
    let j_total = (0..n)
        .map(|i| Mat3::from_fn(|r, c| f(off + 9 * i + 3 * r + c)))
        .collect();
    let trailer = &bytes[RAW_HEADER_LEN + payload..bytes.len() - 8];
    let shells: Vec<ShellRecord> =
        serde_json::from_slice(trailer).map_err(|e| Error::Serde(e.to_string()))?;
    Ok(DeformationMap {
        q_total: VectorVolume::new(geometry.clone(), q)?,
        geometry,
        j_total,
        shells,
    })
}

/// One CSV row per shell.
pub fn write_diagnostics_csv<W: Write>(mut out: W, rows: &[ShellDiagnostic]) -> Result<()> {
    writeln!(out, "index,steps,duration,energy_end,rmsd_end,wall_seconds")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{:.9e},{:.9e},{:.9e},{:.3}",
            r.index, r.steps, r.duration, r.energy_end, r.rmsd_end, r.wall_seconds
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;

    #[test]
    fn round_trip() {
        let g = GridGeometry::new([4, 3, 5], [1.0, 0.5, 2.0], [-1.0, 2.0, 0.25]).unwrap();
        let mut map = DeformationMap::identity(&g);
        map.q_total
            .data
            .iter_mut()
            .enumerate()
            .for_each(|(i, q)| q[1] += i as f64 * 0.125);
        map.j_total[3] = Mat3::new(1.0, 0.5, 0.0, 0.25, 2.0, 0.0, 0.0, 0.0, 0.75);
        map.shells.push(ShellRecord {
            index: 0,
            level: 0,
            steps: 7,
            duration: 1.5,
            energy_end: 0.25,
            det_min: 0.5,
            det_max: 2.0,
            final_q: None,
            final_j: None,
        });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.map");
        save_map(&map, &path).unwrap();
        let back = load_map(&path).unwrap();
        assert_eq!(back, map);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_map(&path),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn diagnostics_layout() {
        let mut out = Vec::new();
        let row = ShellDiagnostic {
            index: 2,
            level: 0,
            steps: 5,
            duration: 0.5,
            energy_end: 1.0,
            rmsd_end: 0.1,
            wall_seconds: 0.25,
        };
        write_diagnostics_csv(&mut out, &[row]).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "index,steps,duration,energy_end,rmsd_end,wall_seconds"
        );
        assert!(lines[1].starts_with("2,5,"));
    }
}
