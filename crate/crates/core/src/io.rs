//! On-disk formats.
//!
//! * `VTF1` tensors: magic `VTF1`, u32 rank, rank × u32 dims, little-endian
//!   f32 payload, row-major. All persisted weights and latents use it.
//! * Binary portable pixmaps (P6) for decoded images.
//! * Line-oriented `key = value` manifests for run metadata.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const VTF_MAGIC: &[u8; 4] = b"VTF1";

/// Writes a tensor as VTF1. The payload is always f32 regardless of the
/// in-memory scalar type.
pub fn write_vtf<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    w.write_all(VTF_MAGIC)?;
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_f32_c().to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a VTF1 tensor, casting the f32 payload into `S`.
pub fn read_vtf<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let bad = |details: &str| Error::Malformed {
        path: path.display().to_string(),
        details: details.to_string(),
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated magic"))?;
    if &magic != VTF_MAGIC {
        return Err(bad("bad magic, expected VTF1"));
    }
    let mut u32buf = [0u8; 4];
    r.read_exact(&mut u32buf).map_err(|_| bad("truncated rank"))?;
    let rank = u32::from_le_bytes(u32buf) as usize;
    if rank == 0 || rank > 8 {
        return Err(bad("unreasonable rank"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated dims"))?;
        shape.push(u32::from_le_bytes(u32buf) as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        r.read_exact(&mut u32buf).map_err(|_| bad("truncated payload"))?;
        data.push(S::from_f64_c(f32::from_le_bytes(u32buf) as f64));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(bad("trailing bytes after payload"));
    }
    Tensor::from_vec(shape, data)
}

/// Writes an `[H, W, 3]` tensor with values in [0,1] as a binary P6 pixmap.
pub fn write_ppm<S: Scalar>(path: impl AsRef<Path>, img: &Tensor<S>) -> Result<()> {
    let shape = img.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(Error::shape(
            "write_ppm",
            format!("expected [H, W, 3], got {shape:?}"),
        ));
    }
    let (h, w) = (shape[0], shape[1]);
    let mut out = BufWriter::new(File::create(path.as_ref())?);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = img
        .data()
        .iter()
        .map(|&v| {
            let x = v.to_f64_c().clamp(0.0, 1.0);
            (x * 255.0).round() as u8
        })
        .collect();
    out.write_all(&bytes)?;
    out.flush()?;
    Ok(())
}

/// Reads a binary P6 pixmap into an `[H, W, 3]` tensor with values in [0,1].
pub fn read_ppm<S: Scalar>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = |details: &str| Error::Malformed {
        path: path.display().to_string(),
        details: details.to_string(),
    };

    // Header: "P6" <ws> width <ws> height <ws> maxval <single ws> payload.
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token(&bytes)? != "P6" {
        return Err(bad("not a P6 pixmap"));
    }
    let w: usize = token(&bytes)?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = token(&bytes)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&bytes)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    pos += 1; // single whitespace after maxval
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(bad("truncated payload"));
    }
    let data: Vec<S> = bytes[pos..pos + need]
        .iter()
        .map(|&b| S::from_f64_c(b as f64 / 255.0))
        .collect();
    Tensor::from_vec(vec![h, w, 3], data)
}

/// Writes a `key = value` manifest, one entry per line, in the given order.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[(String, String)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path.as_ref())?);
    for (k, v) in entries {
        writeln!(w, "{k} = {v}")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a `key = value` manifest preserving order. Blank lines and lines
/// starting with `#` are skipped.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Malformed {
                path: path.display().to_string(),
                details: format!("line {}: expected `key = value`", ln + 1),
            });
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Lookup helper over manifest entries.
pub fn manifest_get<'a>(entries: &'a [(String, String)], key: &str) -> Option<&'a str> {
    entries
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
}

/// Persists a set of named tensors into `dir` as `<name>.vtf` files.
pub fn save_tensor_dir<S: Scalar>(
    dir: impl AsRef<Path>,
    tensors: &[(&str, &Tensor<S>)],
) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    for (name, t) in tensors {
        write_vtf(dir.join(format!("{name}.vtf")), t)?;
    }
    Ok(())
}

pub fn load_tensor<S: Scalar>(dir: impl AsRef<Path>, name: &str) -> Result<Tensor<S>> {
    read_vtf(dir.as_ref().join(format!("{name}.vtf")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vtf_roundtrip_preserves_bytes() {
        let dir = std::env::temp_dir().join(format!("vtf-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let t = Tensor::<f32>::from_vec(vec![2, 3], vec![1.5, -2.25, 0.0, 3.75, -0.5, 9.0]).unwrap();
        let p = dir.join("t.vtf");
        write_vtf(&p, &t).unwrap();
        let back: Tensor<f32> = read_vtf(&p).unwrap();
        assert!(t.bit_eq(&back));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn vtf_rejects_bad_magic() {
        let dir = std::env::temp_dir().join(format!("vtf-bad-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("bad.vtf");
        std::fs::write(&p, b"NOPE....").unwrap();
        assert!(matches!(
            read_vtf::<f32>(&p),
            Err(Error::Malformed { .. })
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn manifest_roundtrip() {
        let dir = std::env::temp_dir().join(format!("man-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("m.txt");
        let entries = vec![
            ("seed".to_string(), "42".to_string()),
            ("alpha".to_string(), "0.3".to_string()),
        ];
        write_manifest(&p, &entries).unwrap();
        let back = read_manifest(&p).unwrap();
        assert_eq!(entries, back);
        assert_eq!(manifest_get(&back, "alpha"), Some("0.3"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
