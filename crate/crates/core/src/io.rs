//! File formats: camera calibration text, particle CSV, PFM/PGM images,
//! `.pfm3` volumes and `.fld` flow fields.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Matrix2x4;

use crate::error::{Error, Result};
use crate::flow::FlowField;
use crate::geometry::{CameraModel, Image, IntensityVolume, Particle, ParticleSet, Vec3};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_all(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Decimal representation with `sig` significant digits.
pub fn format_significant(v: f64, sig: usize) -> String {
    if v == 0.0 || !v.is_finite() {
        return if v == 0.0 {
            "0".to_string()
        } else {
            v.to_string()
        };
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (sig as i32 - 1 - mag).max(0) as usize;
    format!("{:.*}", decimals, v)
}

// ---- cameras ----

/// One block per camera: 8 numbers (row-major 2x4), then `width height`.
pub fn write_cameras(path: &Path, cameras: &[CameraModel]) -> Result<()> {
    let mut s = String::new();
    for cam in cameras {
        let p = &cam.projection;
        for r in 0..2 {
            let row: Vec<String> = (0..4).map(|c| format!("{:e}", p[(r, c)])).collect();
            let _ = writeln!(s, "{}", row.join(" "));
        }
        let _ = writeln!(s, "{} {}", cam.width, cam.height);
        s.push('\n');
    }
    write_all(path, s.as_bytes())
}

pub fn read_cameras(path: &Path) -> Result<Vec<CameraModel>> {
    let text = read_text(path)?;
    let tokens: Vec<&str> = text.split_whitespace().collect();
    if tokens.len() % 10 != 0 {
        return Err(Error::format(
            path,
            format!("expected blocks of 10 numbers, got {} tokens", tokens.len()),
        ));
    }
    let mut cams = Vec::new();
    for block in tokens.chunks(10) {
        let mut m = [0.0; 8];
        for (i, t) in block[..8].iter().enumerate() {
            m[i] = t
                .parse()
                .map_err(|_| Error::format(path, format!("bad number `{t}`")))?;
        }
        let w: usize = block[8]
            .parse()
            .map_err(|_| Error::format(path, format!("bad width `{}`", block[8])))?;
        let h: usize = block[9]
            .parse()
            .map_err(|_| Error::format(path, format!("bad height `{}`", block[9])))?;
        let proj = Matrix2x4::from_row_slice(&m);
        cams.push(CameraModel::new(proj, w, h)?);
    }
    Ok(cams)
}

// ---- particles ----

pub fn particles_to_csv(set: &ParticleSet) -> String {
    let mut s = String::with_capacity(16 + set.len() * 48);
    s.push_str("x,y,z,intensity\n");
    for p in &set.particles {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            format_significant(p.position.x, 9),
            format_significant(p.position.y, 9),
            format_significant(p.position.z, 9),
            format_significant(p.intensity, 9)
        );
    }
    s
}

pub fn write_particles(path: &Path, set: &ParticleSet) -> Result<()> {
    write_all(path, particles_to_csv(set).as_bytes())
}

pub fn read_particles(path: &Path, time_index: i64) -> Result<ParticleSet> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    match lines.next().map(str::trim) {
        Some("x,y,z,intensity") => {}
        other => {
            return Err(Error::format(
                path,
                format!("expected header `x,y,z,intensity`, got {other:?}"),
            ));
        }
    }
    let mut particles = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let vals: std::result::Result<Vec<f64>, _> =
            line.split(',').map(|t| t.trim().parse::<f64>()).collect();
        let vals = vals.map_err(|_| Error::format(path, format!("line {}: bad number", n + 2)))?;
        if vals.len() != 4 {
            return Err(Error::format(
                path,
                format!("line {}: expected 4 fields", n + 2),
            ));
        }
        if vals[3] < 0.0 {
            return Err(Error::format(
                path,
                format!("line {}: negative intensity", n + 2),
            ));
        }
        particles.push(Particle::new(Vec3::new(vals[0], vals[1], vals[2]), vals[3]));
    }
    Ok(ParticleSet::new(particles, time_index))
}

// ---- images ----

/// Greyscale PFM, little-endian (negative scale), rows stored bottom to top.
pub fn write_pfm(path: &Path, img: &Image) -> Result<()> {
    let mut out = Vec::with_capacity(32 + img.values.len() * 4);
    out.extend_from_slice(format!("Pf\n{} {}\n-1.0\n", img.width, img.height).as_bytes());
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            out.extend_from_slice(&(img.get(x, y) as f32).to_le_bytes());
        }
    }
    write_all(path, &out)
}

/// Splits `n` newline-terminated header lines off the front of `bytes`.
fn split_header<'a>(path: &Path, bytes: &'a [u8], n: usize) -> Result<(Vec<String>, &'a [u8])> {
    let mut lines = Vec::with_capacity(n);
    let mut pos = 0;
    while lines.len() < n {
        let rest = &bytes[pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::format(path, "truncated header"))?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::format(path, "non-utf8 header"))?;
        pos += end + 1;
        let line = line.trim();
        if line.starts_with('#') {
            continue;
        }
        lines.push(line.to_string());
    }
    Ok((lines, &bytes[pos..]))
}

fn parse_dims<const N: usize>(path: &Path, line: &str) -> Result<[usize; N]> {
    let v: Vec<usize> = line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(path, format!("bad dimensions `{line}`")))?;
    v.try_into()
        .map_err(|_| Error::format(path, format!("expected {N} dimensions in `{line}`")))
}

pub fn read_pfm(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let (hdr, data) = split_header(path, &bytes, 3)?;
    if hdr[0] != "Pf" {
        return Err(Error::format(
            path,
            format!("unsupported PFM magic `{}`", hdr[0]),
        ));
    }
    let [w, h] = parse_dims::<2>(path, &hdr[1])?;
    let scale: f64 = hdr[2]
        .parse()
        .map_err(|_| Error::format(path, "bad PFM scale"))?;
    let little = scale < 0.0;
    if data.len() < w * h * 4 {
        return Err(Error::format(path, "truncated PFM data"));
    }
    let mut img = Image::zeros(w, h);
    for (n, chunk) in data.chunks_exact(4).take(w * h).enumerate() {
        let b: [u8; 4] = chunk.try_into().expect("chunk of 4");
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let y = h - 1 - n / w;
        img.set(n % w, y, v as f64);
    }
    Ok(img)
}

fn scale_sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scale");
    s.into()
}

/// 16-bit binary PGM of `round(value * scale)`; the factor goes to `<path>.scale`.
pub fn write_pgm16(path: &Path, img: &Image, scale: f64) -> Result<()> {
    let mut out = Vec::with_capacity(32 + img.values.len() * 2);
    out.extend_from_slice(format!("P5\n{} {}\n65535\n", img.width, img.height).as_bytes());
    for &v in &img.values {
        let q = (v * scale).round().clamp(0.0, 65535.0) as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    write_all(path, &out)?;
    write_all(&scale_sidecar(path), format!("{scale:e}\n").as_bytes())
}

pub fn read_pgm16(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    let (hdr, data) = split_header(path, &bytes, 3)?;
    if hdr[0] != "P5" || hdr[2] != "65535" {
        return Err(Error::format(path, "expected 16-bit binary PGM"));
    }
    let [w, h] = parse_dims::<2>(path, &hdr[1])?;
    let scale: f64 = read_text(&scale_sidecar(path))?
        .trim()
        .parse()
        .map_err(|_| Error::format(path, "bad scale sidecar"))?;
    if data.len() < w * h * 2 {
        return Err(Error::format(path, "truncated PGM data"));
    }
    let values = data
        .chunks_exact(2)
        .take(w * h)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / scale)
        .collect();
    Image::from_values(w, h, values)
}

// ---- volumes ----

/// `PF3\n`, `N M L\n`, then little-endian f32 values, x fastest.
pub fn write_volume(path: &Path, vol: &IntensityVolume) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(format!("PF3\n{} {} {}\n", vol.dims[0], vol.dims[1], vol.dims[2]).as_bytes())?;
        for v in &vol.values {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: &Path) -> Result<IntensityVolume> {
    let bytes = read_bytes(path)?;
    let (hdr, data) = split_header(path, &bytes, 2)?;
    if hdr[0] != "PF3" {
        return Err(Error::format(path, "expected PF3 magic"));
    }
    let dims = parse_dims::<3>(path, &hdr[1])?;
    let n = dims.iter().product::<usize>();
    if data.len() < n * 4 {
        return Err(Error::format(path, "truncated volume data"));
    }
    let values = data
        .chunks_exact(4)
        .take(n)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    IntensityVolume::from_values(dims, values)
}

// ---- flow fields ----

/// `FLW1`, then N, M, L, stride as little-endian u32, then f32 triples, x fastest.
pub fn flow_to_bytes(field: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + field.vectors.len() * 12);
    out.extend_from_slice(b"FLW1");
    for d in field.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&(field.stride as u32).to_le_bytes());
    for v in &field.vectors {
        for c in 0..3 {
            out.extend_from_slice(&(v[c] as f32).to_le_bytes());
        }
    }
    out
}

pub fn write_flow(path: &Path, field: &FlowField) -> Result<()> {
    write_all(path, &flow_to_bytes(field))
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    let bytes = read_bytes(path)?;
    if bytes.len() < 20 || &bytes[..4] != b"FLW1" {
        return Err(Error::format(path, "expected FLW1 magic"));
    }
    let word = |i: usize| {
        u32::from_le_bytes([
            bytes[4 + 4 * i],
            bytes[5 + 4 * i],
            bytes[6 + 4 * i],
            bytes[7 + 4 * i],
        ]) as usize
    };
    let dims = [word(0), word(1), word(2)];
    let stride = word(3);
    let n = dims.iter().product::<usize>();
    let data = &bytes[20..];
    if data.len() < n * 12 {
        return Err(Error::format(path, "truncated flow data"));
    }
    let f = |i: usize| {
        f32::from_le_bytes([
            data[4 * i],
            data[4 * i + 1],
            data[4 * i + 2],
            data[4 * i + 3],
        ]) as f64
    };
    let vectors = (0..n)
        .map(|i| Vec3::new(f(3 * i), f(3 * i + 1), f(3 * i + 2)))
        .collect();
    FlowField::new(dims, stride, vectors)
}

/// CSV export: `i,j,k,u,v,w` per grid point, x fastest.
pub fn write_flow_csv(path: &Path, field: &FlowField) -> Result<()> {
    let mut s = String::from("i,j,k,u,v,w\n");
    for (n, v) in field.vectors.iter().enumerate() {
        let [i, j, k] = field.coords(n);
        let _ = writeln!(
            s,
            "{i},{j},{k},{},{},{}",
            format_significant(v.x, 9),
            format_significant(v.y, 9),
            format_significant(v.z, 9)
        );
    }
    write_all(path, s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn significant_digits() {
        assert_eq!(format_significant(0.0, 9), "0");
        assert_eq!(format_significant(1.0, 9), "1.00000000");
        assert_eq!(format_significant(123.456789012, 9), "123.456789");
        assert_eq!(format_significant(-0.000123456789012, 9), "-0.000123456789");
        assert_eq!(format_significant(1234567890.4, 9), "1234567890");
    }

    #[test]
    fn camera_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cameras.txt");
        let domain = crate::geometry::Domain::new(64, 32, 16).unwrap();
        let cams = vec![
            CameraModel::orthographic(35.0, 18.0, 1.0, &domain, 100, 60).unwrap(),
            CameraModel::orthographic(-35.0, -18.0, 1.0, &domain, 100, 60).unwrap(),
        ];
        write_cameras(&path, &cams).unwrap();
        assert_eq!(read_cameras(&path).unwrap(), cams);
    }

    #[test]
    fn pfm_is_little_endian_bottom_up() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pfm");
        let img = Image::from_values(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.5]).unwrap();
        write_pfm(&path, &img).unwrap();
        let bytes = fs::read(&path).unwrap();
        let hdr = b"Pf\n3 2\n-1.0\n";
        assert_eq!(&bytes[..hdr.len()], hdr);
        // first stored row is the bottom row (y = 1)
        assert_eq!(&bytes[hdr.len()..hdr.len() + 4], &4.0f32.to_le_bytes());
        assert_eq!(read_pfm(&path).unwrap(), img);
    }

    #[test]
    fn pgm_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = Image::from_values(2, 2, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        write_pgm16(&path, &img, 60000.0).unwrap();
        assert!(dir.path().join("a.pgm.scale").exists());
        let back = read_pgm16(&path).unwrap();
        for (a, b) in back.values.iter().zip(&img.values) {
            assert!((a - b).abs() < 1.0 / 60000.0);
        }
    }

    #[test]
    fn volume_and_flow_headers() {
        let dir = tempfile::tempdir().unwrap();
        let vpath = dir.path().join("v.pfm3");
        let vol = IntensityVolume::from_values([2, 1, 2], vec![0.0, 1.0, 2.0, 3.5]).unwrap();
        write_volume(&vpath, &vol).unwrap();
        let bytes = fs::read(&vpath).unwrap();
        assert!(bytes.starts_with(b"PF3\n2 1 2\n"));
        assert_eq!(read_volume(&vpath).unwrap(), vol);

        let fpath = dir.path().join("f.fld");
        let field = FlowField::new(
            [2, 1, 1],
            4,
            vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(-0.5, 0.0, 0.25)],
        )
        .unwrap();
        write_flow(&fpath, &field).unwrap();
        let bytes = fs::read(&fpath).unwrap();
        assert_eq!(&bytes[..4], b"FLW1");
        assert_eq!(&bytes[4..8], &2u32.to_le_bytes());
        assert_eq!(&bytes[16..20], &4u32.to_le_bytes());
        assert_eq!(&bytes[20..24], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 20 + 2 * 12);
        assert_eq!(read_flow(&fpath).unwrap(), field);
    }

    #[test]
    fn particle_csv_rejects_bad_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        fs::write(&path, "a,b\n1,2\n").unwrap();
        assert!(matches!(
            read_particles(&path, 0),
            Err(Error::Format { .. })
        ));
    }
}
