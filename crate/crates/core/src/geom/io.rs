//! PLY (ascii / binary little-endian), whitespace XYZ and NumPy point files.
//!
//! Only vertex `x`, `y`, `z` are read; other properties and elements are
//! skipped. Vertices are returned in file order without deduplication.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geom::PointCloud;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PointFormat {
    PlyAscii,
    PlyBinaryLe,
    XyzText,
}

impl FromStr for PointFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ply-ascii" => Ok(PointFormat::PlyAscii),
            "ply-binary-le" | "ply" => Ok(PointFormat::PlyBinaryLe),
            "xyz-text" | "xyz" => Ok(PointFormat::XyzText),
            other => Err(Error::InvalidArgument(format!("unknown point format '{other}'"))),
        }
    }
}

/// Guesses the format from the extension and, for PLY, the header.
pub fn detect_format(path: &Path) -> Result<PointFormat> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "xyz" | "txt" | "pts" => Ok(PointFormat::XyzText),
        _ => {
            let mut head = [0u8; 512];
            let mut f = fs::File::open(path)?;
            let n = f.read(&mut head)?;
            let text = String::from_utf8_lossy(&head[..n]);
            if !text.starts_with("ply") {
                return Err(Error::Parse(format!("{}: not a PLY file and no known extension", path.display())));
            }
            if text.contains("format ascii") {
                Ok(PointFormat::PlyAscii)
            } else if text.contains("format binary_little_endian") {
                Ok(PointFormat::PlyBinaryLe)
            } else {
                Err(Error::Parse("unsupported PLY format (only ascii and binary_little_endian)".into()))
            }
        }
    }
}

pub fn load_point_cloud(path: &Path, format: PointFormat) -> Result<PointCloud> {
    let bytes = fs::read(path)?;
    let pts = match format {
        PointFormat::PlyAscii | PointFormat::PlyBinaryLe => parse_ply(&bytes, Some(format))?,
        PointFormat::XyzText => parse_xyz(&bytes)?,
    };
    PointCloud::new(pts)
}

/// Loads any supported file, dispatching on extension (`.npy`, `.npz` included).
pub fn load_any(path: &Path) -> Result<PointCloud> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    match ext.as_str() {
        "npy" => PointCloud::new(parse_npy(&fs::read(path)?)?),
        "npz" => load_npz(path, "points"),
        _ => load_point_cloud(path, detect_format(path)?),
    }
}

#[derive(Clone, Copy, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Scalar> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Parse(format!("unknown PLY scalar type '{other}'"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

fn parse_ply(bytes: &[u8], expect: Option<PointFormat>) -> Result<Tensor> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut header_len = 0usize;
    let mut next_line = |line: &mut String| -> Result<bool> {
        line.clear();
        let n = reader.read_line(line)?;
        header_len += n;
        Ok(n > 0)
    };
    if !next_line(&mut line)? || line.trim_end() != "ply" {
        return Err(Error::Parse("missing 'ply' magic".into()));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        if !next_line(&mut line)? {
            return Err(Error::Parse("unexpected end of PLY header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PointFormat::PlyAscii),
            ["format", "binary_little_endian", _] => format = Some(PointFormat::PlyBinaryLe),
            ["format", other, _] => return Err(Error::Parse(format!("unsupported PLY format '{other}'"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| Error::Parse(format!("bad element count '{count}'")))?;
                elements.push(Element { name: name.to_string(), count, props: Vec::new() });
            }
            ["property", "list", ct, it, _name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Parse("property before element".into()))?;
                el.props.push(Property::List { count: Scalar::parse(ct)?, item: Scalar::parse(it)? });
            }
            ["property", ty, name] => {
                let el = elements.last_mut().ok_or_else(|| Error::Parse("property before element".into()))?;
                el.props.push(Property::Scalar { name: name.to_string(), ty: Scalar::parse(ty)? });
            }
            other => return Err(Error::Parse(format!("unrecognized PLY header line {:?}", other.join(" ")))),
        }
    }
    let format = format.ok_or_else(|| Error::Parse("PLY header has no format line".into()))?;
    if let Some(e) = expect {
        if e != format {
            return Err(Error::Parse(format!("expected {e:?} but file declares {format:?}")));
        }
    }
    let vi = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::Parse("PLY has no vertex element".into()))?;
    let col = |n: &str| {
        elements[vi].props.iter().position(|p| matches!(p, Property::Scalar { name, .. } if name == n))
    };
    let (cx, cy, cz) = match (col("x"), col("y"), col("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::Parse("vertex element lacks x/y/z properties".into())),
    };
    let body = &bytes[header_len..];
    let n = elements[vi].count;
    let mut out = Vec::with_capacity(n * 3);
    match format {
        PointFormat::PlyAscii => {
            let text = std::str::from_utf8(body).map_err(|_| Error::Parse("ascii PLY body is not utf-8".into()))?;
            let mut lines = text.lines().filter(|l| !l.trim().is_empty());
            for (ei, el) in elements.iter().enumerate() {
                for row in 0..el.count {
                    let l = lines
                        .next()
                        .ok_or_else(|| Error::Parse(format!("element '{}' declares {} rows, found {row}", el.name, el.count)))?;
                    if ei != vi {
                        continue;
                    }
                    let vals: Vec<f64> = l
                        .split_whitespace()
                        .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("bad number '{t}' in vertex {row}"))))
                        .collect::<Result<_>>()?;
                    let scalar_pos = |c: usize| -> Result<f64> {
                        // Lists before the coordinate shift the token position.
                        let mut pos = 0usize;
                        for p in &el.props[..c] {
                            match p {
                                Property::Scalar { .. } => pos += 1,
                                Property::List { .. } => {
                                    let cnt = *vals.get(pos).ok_or_else(|| Error::Parse(format!("short vertex row {row}")))? as usize;
                                    pos += 1 + cnt;
                                }
                            }
                        }
                        vals.get(pos).copied().ok_or_else(|| Error::Parse(format!("short vertex row {row}")))
                    };
                    out.push(scalar_pos(cx)?);
                    out.push(scalar_pos(cy)?);
                    out.push(scalar_pos(cz)?);
                }
                if ei == vi {
                    break;
                }
            }
        }
        PointFormat::PlyBinaryLe => {
            let mut pos = 0usize;
            let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
                let s = body.get(*pos..*pos + len).ok_or_else(|| Error::Parse("binary PLY body is truncated".into()))?;
                *pos += len;
                Ok(s)
            };
            for (ei, el) in elements.iter().enumerate() {
                for _ in 0..el.count {
                    let mut xyz = [0.0; 3];
                    for (pi, p) in el.props.iter().enumerate() {
                        match p {
                            Property::Scalar { ty, .. } => {
                                let v = ty.read_le(take(&mut pos, ty.size())?);
                                if ei == vi {
                                    if pi == cx {
                                        xyz[0] = v;
                                    } else if pi == cy {
                                        xyz[1] = v;
                                    } else if pi == cz {
                                        xyz[2] = v;
                                    }
                                }
                            }
                            Property::List { count, item } => {
                                let cnt = count.read_le(take(&mut pos, count.size())?) as usize;
                                take(&mut pos, cnt * item.size())?;
                            }
                        }
                    }
                    if ei == vi {
                        out.extend_from_slice(&xyz);
                    }
                }
                if ei == vi {
                    break;
                }
            }
        }
        PointFormat::XyzText => unreachable!(),
    }
    Ok(Tensor::from_vec(n, 3, out))
}

fn parse_xyz(bytes: &[u8]) -> Result<Tensor> {
    let text = std::str::from_utf8(bytes).map_err(|_| Error::Parse("xyz file is not utf-8".into()))?;
    let mut out = Vec::new();
    for (ln, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = l
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .take(3)
            .map(|t| t.parse::<f64>().map_err(|_| Error::Parse(format!("line {}: bad number '{t}'", ln + 1))))
            .collect::<Result<_>>()?;
        if vals.len() < 3 {
            return Err(Error::Parse(format!("line {}: expected 3 coordinates", ln + 1)));
        }
        out.extend_from_slice(&vals);
    }
    let n = out.len() / 3;
    Ok(Tensor::from_vec(n, 3, out))
}

/// Parses a C-ordered `<f4`/`<f8` array of shape `(N, k ≥ 3)`; keeps the first 3 columns.
pub fn parse_npy(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 10 || &bytes[..6] != b"\x93NUMPY" {
        return Err(Error::Parse("missing NumPy magic".into()));
    }
    let major = bytes[6];
    let (hlen, start) = match major {
        1 => (u16::from_le_bytes([bytes[8], bytes[9]]) as usize, 10),
        2 | 3 => {
            if bytes.len() < 12 {
                return Err(Error::Parse("truncated npy header".into()));
            }
            (u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize, 12)
        }
        v => return Err(Error::Parse(format!("unsupported npy version {v}"))),
    };
    let header = std::str::from_utf8(bytes.get(start..start + hlen).ok_or_else(|| Error::Parse("truncated npy header".into()))?)
        .map_err(|_| Error::Parse("npy header is not utf-8".into()))?;
    let field = |key: &str| -> Option<&str> {
        let i = header.find(key)? + key.len();
        let rest = header[i..].trim_start().strip_prefix(':')?.trim_start();
        Some(rest)
    };
    let descr = field("'descr'").ok_or_else(|| Error::Parse("npy header lacks descr".into()))?;
    let ty = if descr.starts_with("'<f4'") {
        Scalar::F32
    } else if descr.starts_with("'<f8'") {
        Scalar::F64
    } else {
        return Err(Error::Parse(format!("unsupported npy dtype {}", &descr[..descr.len().min(8)])));
    };
    if field("'fortran_order'").is_some_and(|f| f.starts_with("True")) {
        return Err(Error::Parse("fortran-ordered npy arrays are not supported".into()));
    }
    let shape_s = field("'shape'").ok_or_else(|| Error::Parse("npy header lacks shape".into()))?;
    let inner = shape_s.trim_start_matches('(').split(')').next().unwrap_or("");
    let dims: Vec<usize> = inner.split(',').filter_map(|t| t.trim().parse().ok()).collect();
    let (n, k) = match dims.as_slice() {
        [n, k] if *k >= 3 => (*n, *k),
        _ => return Err(Error::Parse(format!("npy shape {dims:?} is not (N, >=3)"))),
    };
    let data = &bytes[start + hlen..];
    let sz = ty.size();
    if data.len() < n * k * sz {
        return Err(Error::Parse("npy data is truncated".into()));
    }
    let mut out = Vec::with_capacity(n * 3);
    for r in 0..n {
        for c in 0..3 {
            let o = (r * k + c) * sz;
            out.push(ty.read_le(&data[o..o + sz]));
        }
    }
    Ok(Tensor::from_vec(n, 3, out))
}

/// Reads array `key` (e.g. `points`) from an `.npz` archive.
pub fn load_npz(path: &Path, key: &str) -> Result<PointCloud> {
    let f = fs::File::open(path)?;
    let mut zip = zip::ZipArchive::new(f).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let name = format!("{key}.npy");
    let mut entry = zip.by_name(&name).map_err(|e| Error::Parse(format!("{}: no '{name}': {e}", path.display())))?;
    let mut buf = Vec::new();
    entry.read_to_end(&mut buf)?;
    PointCloud::new(parse_npy(&buf)?)
}

/// Serializes `pc` as PLY (`float` x/y/z) or XYZ text.
pub fn write_point_cloud(path: &Path, pc: &PointCloud, format: PointFormat) -> Result<()> {
    let bytes = encode_point_cloud(pc, format);
    let tmp = path.with_extension("tmp-write");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn encode_point_cloud(pc: &PointCloud, format: PointFormat) -> Vec<u8> {
    let mut out = Vec::new();
    match format {
        PointFormat::PlyAscii | PointFormat::PlyBinaryLe => {
            let fmt = if format == PointFormat::PlyAscii { "ascii" } else { "binary_little_endian" };
            write!(
                out,
                "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
                pc.len()
            )
            .unwrap();
            for p in pc.iter() {
                if format == PointFormat::PlyAscii {
                    writeln!(out, "{} {} {}", p[0] as f32, p[1] as f32, p[2] as f32).unwrap();
                } else {
                    for v in p {
                        out.extend_from_slice(&(v as f32).to_le_bytes());
                    }
                }
            }
        }
        PointFormat::XyzText => {
            for p in pc.iter() {
                writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const ASCII3: &str = "ply\nformat ascii 1.0\ncomment tiny\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 0 0\n0 1 0\n";

    #[test]
    fn ascii_readback() {
        let t = parse_ply(ASCII3.as_bytes(), None).unwrap();
        assert_eq!(t.data(), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn binary_matches_ascii() {
        let pc = PointCloud::new(parse_ply(ASCII3.as_bytes(), None).unwrap()).unwrap();
        let bin = encode_point_cloud(&pc, PointFormat::PlyBinaryLe);
        let back = parse_ply(&bin, Some(PointFormat::PlyBinaryLe)).unwrap();
        assert_eq!(&back, pc.points());
    }

    #[test]
    fn short_vertex_count_is_a_parse_error() {
        let bad = ASCII3.replace("vertex 3", "vertex 5");
        assert!(matches!(parse_ply(bad.as_bytes(), None), Err(Error::Parse(_))));
        let pc = PointCloud::new(parse_ply(ASCII3.as_bytes(), None).unwrap()).unwrap();
        let bin = encode_point_cloud(&pc, PointFormat::PlyBinaryLe);
        let mut patched = bin.clone();
        let at = bin.windows(8).position(|w| w == b"vertex 3").unwrap();
        patched[at + 7] = b'5';
        assert!(matches!(parse_ply(&patched, None), Err(Error::Parse(_))));
    }

    #[test]
    fn skips_extra_properties_and_elements() {
        let mut b = Vec::new();
        b.extend_from_slice(b"ply\nformat binary_little_endian 1.0\nelement vertex 2\nproperty uchar red\nproperty double x\nproperty list uchar int idx\nproperty double y\nproperty double z\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n");
        for (i, p) in [[1.5f64, 2.5, 3.5], [4.0, 5.0, 6.0]].iter().enumerate() {
            b.push(i as u8);
            b.extend_from_slice(&p[0].to_le_bytes());
            b.push(1);
            b.extend_from_slice(&7i32.to_le_bytes());
            b.extend_from_slice(&p[1].to_le_bytes());
            b.extend_from_slice(&p[2].to_le_bytes());
        }
        b.push(3);
        for i in 0..3i32 {
            b.extend_from_slice(&i.to_le_bytes());
        }
        let t = parse_ply(&b, None).unwrap();
        assert_eq!(t.data(), &[1.5, 2.5, 3.5, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn xyz_and_npy() {
        let t = parse_xyz(b"# c\n1 2 3\n\n4,5,6 7\n").unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert!(parse_xyz(b"1 2\n").is_err());

        let header = "{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3), }";
        let mut npy = b"\x93NUMPY\x01\x00".to_vec();
        npy.extend_from_slice(&(header.len() as u16).to_le_bytes());
        npy.extend_from_slice(header.as_bytes());
        for v in [1.0f32, 2.0, 3.0, -1.0, -2.0, -3.0] {
            npy.extend_from_slice(&v.to_le_bytes());
        }
        let t = parse_npy(&npy).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0, -1.0, -2.0, -3.0]);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let empty = "ply\nformat ascii 1.0\nelement vertex 0\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.ply");
        std::fs::write(&p, empty).unwrap();
        assert!(matches!(load_point_cloud(&p, PointFormat::PlyAscii), Err(Error::EmptyCloud)));
    }
}
