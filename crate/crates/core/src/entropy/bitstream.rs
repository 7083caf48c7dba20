//! `.dcp` container: fixed little-endian header, three payloads, CRC32.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"DCP1";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 4 + 1 + 2 + 2 + 2 + 1 + 1 + 12 + 4 + 2 + 8 + 2 + 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Header {
    pub num_sparse: u16,
    pub feat_dim: u16,
    pub hyper_dim: u16,
    pub preserved_size: bool,
    pub coord_bits: u8,
    pub center: [f32; 3],
    pub scale: f32,
    pub ddim_steps: u16,
    pub seed: u64,
    pub q_max: i16,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bitstream {
    pub header: Header,
    pub z: Vec<u8>,
    pub coords: Vec<u8>,
    pub y: Vec<u8>,
}

impl Bitstream {
    pub fn payload_len(&self) -> usize {
        self.z.len() + self.coords.len() + self.y.len()
    }
}

pub fn pack_bitstream(bs: &Bitstream) -> Result<Vec<u8>> {
    let h = &bs.header;
    let mut out = Vec::with_capacity(HEADER_LEN + bs.payload_len() + 4);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&h.num_sparse.to_le_bytes());
    out.extend_from_slice(&h.feat_dim.to_le_bytes());
    out.extend_from_slice(&h.hyper_dim.to_le_bytes());
    out.push(h.preserved_size as u8);
    out.push(h.coord_bits);
    for c in h.center {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out.extend_from_slice(&h.scale.to_le_bytes());
    out.extend_from_slice(&h.ddim_steps.to_le_bytes());
    out.extend_from_slice(&h.seed.to_le_bytes());
    out.extend_from_slice(&h.q_max.to_le_bytes());
    for p in [&bs.z, &bs.coords, &bs.y] {
        let len = u32::try_from(p.len()).map_err(|_| Error::InvalidArgument("payload exceeds 4 GiB".into()))?;
        out.extend_from_slice(&len.to_le_bytes());
    }
    debug_assert_eq!(out.len(), HEADER_LEN);
    let mut crc = crc32fast::Hasher::new();
    for p in [&bs.z, &bs.coords, &bs.y] {
        out.extend_from_slice(p);
        crc.update(p);
    }
    out.extend_from_slice(&crc.finalize().to_le_bytes());
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let s = self
            .buf
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Truncated(format!("stream ends inside {what}")))?;
        self.pos += n;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        Ok(self.take(N, what)?.try_into().unwrap())
    }
}

pub fn unpack_bitstream(bytes: &[u8]) -> Result<Bitstream> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Version(format!("bad magic {magic:?}, expected \"DCP1\"")));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::Version(format!("unsupported version {version}")));
    }
    let num_sparse = u16::from_le_bytes(r.arr("header")?);
    let feat_dim = u16::from_le_bytes(r.arr("header")?);
    let hyper_dim = u16::from_le_bytes(r.arr("header")?);
    let preserved_size = match r.take(1, "header")?[0] {
        0 => false,
        1 => true,
        v => return Err(Error::CorruptStream(format!("preserved-size flag must be 0 or 1, got {v}"))),
    };
    let coord_bits = r.take(1, "header")?[0];
    let mut center = [0f32; 3];
    for c in &mut center {
        *c = f32::from_le_bytes(r.arr("header")?);
    }
    let scale = f32::from_le_bytes(r.arr("header")?);
    let ddim_steps = u16::from_le_bytes(r.arr("header")?);
    let seed = u64::from_le_bytes(r.arr("header")?);
    let q_max = i16::from_le_bytes(r.arr("header")?);
    let mut lens = [0usize; 3];
    for l in &mut lens {
        *l = u32::from_le_bytes(r.arr("header")?) as usize;
    }
    let total: usize = lens.iter().sum();
    if bytes.len() < HEADER_LEN + total + 4 {
        return Err(Error::Truncated(format!(
            "header announces {total} payload bytes but only {} bytes follow",
            bytes.len().saturating_sub(HEADER_LEN + 4)
        )));
    }
    if bytes.len() > HEADER_LEN + total + 4 {
        return Err(Error::CorruptStream(format!("{} trailing bytes after checksum", bytes.len() - HEADER_LEN - total - 4)));
    }
    let z = r.take(lens[0], "z payload")?.to_vec();
    let coords = r.take(lens[1], "coordinate payload")?.to_vec();
    let y = r.take(lens[2], "y payload")?.to_vec();
    let stored = u32::from_le_bytes(r.arr("checksum")?);
    let computed = crc32fast::hash(&bytes[HEADER_LEN..HEADER_LEN + total]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let header =
        Header { num_sparse, feat_dim, hyper_dim, preserved_size, coord_bits, center, scale, ddim_steps, seed, q_max };
    Ok(Bitstream { header, z, coords, y })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            header: Header {
                num_sparse: 76,
                feat_dim: 8,
                hyper_dim: 4,
                preserved_size: true,
                coord_bits: 16,
                center: [0.5, -1.0, 2.25],
                scale: 3.5,
                ddim_steps: 50,
                seed: 0xdead_beef_0102_0304,
                q_max: 127,
            },
            z: vec![1, 2, 3],
            coords: vec![],
            y: vec![9; 10],
        }
    }

    #[test]
    fn roundtrip_and_layout() {
        let bs = sample();
        let bytes = pack_bitstream(&bs).unwrap();
        assert_eq!(&bytes[..4], b"DCP1");
        assert_eq!(bytes.len(), HEADER_LEN + 13 + 4);
        assert_eq!(unpack_bitstream(&bytes).unwrap(), bs);
    }

    #[test]
    fn rejects_bad_magic_truncation_and_corruption() {
        let bytes = pack_bitstream(&sample()).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(unpack_bitstream(&bad), Err(Error::Version(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(unpack_bitstream(&v2), Err(Error::Version(_))));
        assert!(matches!(unpack_bitstream(&bytes[..bytes.len() - 5]), Err(Error::Truncated(_))));
        assert!(matches!(unpack_bitstream(&bytes[..10]), Err(Error::Truncated(_))));
        let mut flip = bytes.clone();
        flip[HEADER_LEN + 1] ^= 1;
        assert!(matches!(unpack_bitstream(&flip), Err(Error::Checksum { .. })));
    }
}
