//! The `MORL` container: little-endian, named typed sections, FNV-1a 64 trailer.
//!
//! ```text
//! "MORL" | version u32 | count u32 | section* | fnv1a64 u64
//! section = name_len u32 | name utf8 | dtype u8 | ndim u32 | dims u64* | data
//! ```

use std::hash::Hasher;

use fnv::FnvHasher;

pub const MAGIC: &[u8; 4] = b"MORL";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Data {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
}

impl Data {
    fn tag(&self) -> u8 {
        match self {
            Data::F32(_) => 0,
            Data::F64(_) => 1,
            Data::U32(_) => 2,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Data::F32(v) => v.len(),
            Data::F64(v) => v.len(),
            Data::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype_name(&self) -> &'static str {
        ["f32", "f64", "u32"][self.tag() as usize]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: Data,
}

impl Section {
    pub fn f64(name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Self {
        Section { name: name.into(), dims: dims.iter().map(|&d| d as u64).collect(), data: Data::F64(data) }
    }

    pub fn u32(name: impl Into<String>, dims: &[usize], data: Vec<u32>) -> Self {
        Section { name: name.into(), dims: dims.iter().map(|&d| d as u64).collect(), data: Data::U32(data) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Record {
    pub sections: Vec<Section>,
}

impl Record {
    pub fn get(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

pub fn encode(rec: &Record) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(rec.sections.len() as u32).to_le_bytes());
    for s in &rec.sections {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.push(s.data.tag());
        out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
        for d in &s.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &s.data {
            Data::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Data::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Why a byte buffer is not a valid record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DecodeError {
    Truncated,
    BadMagic,
    Version(u32),
    Checksum { stored: u64, computed: u64 },
    Malformed(String),
}

impl std::fmt::Display for DecodeError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DecodeError::Truncated => write!(f, "truncated"),
            DecodeError::BadMagic => write!(f, "bad magic"),
            DecodeError::Version(v) => write!(f, "unsupported version {v}"),
            DecodeError::Checksum { stored, computed } => {
                write!(f, "checksum mismatch (stored {stored:016x}, computed {computed:016x})")
            }
            DecodeError::Malformed(m) => write!(f, "{m}"),
        }
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Record, DecodeError> {
    if bytes.len() < 20 {
        return Err(DecodeError::Truncated);
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(DecodeError::Checksum { stored, computed });
    }
    let mut c = Cursor { buf: body, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(DecodeError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(DecodeError::Version(version));
    }
    let count = c.u32()? as usize;
    let mut sections = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| DecodeError::Malformed("section name is not utf-8".into()))?
            .to_string();
        let tag = c.take(1)?[0];
        let ndim = c.u32()? as usize;
        if ndim > 8 {
            return Err(DecodeError::Malformed(format!("section {name}: {ndim} dimensions")));
        }
        let dims = (0..ndim).map(|_| c.u64()).collect::<Result<Vec<_>, _>>()?;
        let n = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| usize::try_from(n).ok())
            .ok_or_else(|| DecodeError::Malformed(format!("section {name}: shape overflows")))?;
        let width = match tag {
            0 | 2 => 4,
            1 => 8,
            t => return Err(DecodeError::Malformed(format!("section {name}: unknown dtype {t}"))),
        };
        let raw = c.take(n.checked_mul(width).ok_or(DecodeError::Truncated)?)?;
        let data = match tag {
            0 => Data::F32(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect()),
            1 => Data::F64(raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect()),
            _ => Data::U32(raw.chunks_exact(4).map(|b| u32::from_le_bytes(b.try_into().unwrap())).collect()),
        };
        sections.push(Section { name, dims, data });
    }
    if c.pos != body.len() {
        return Err(DecodeError::Malformed(format!("{} trailing bytes", body.len() - c.pos)));
    }
    Ok(Record { sections })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Record {
        Record {
            sections: vec![
                Section::f64("a", &[2, 2], vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5]),
                Section { name: "b".into(), dims: vec![3], data: Data::F32(vec![1.5, 2.5, -7.0]) },
                Section::u32("c", &[1], vec![u32::MAX]),
            ],
        }
    }

    #[test]
    fn roundtrip() {
        let r = sample();
        assert_eq!(decode(&encode(&r)).unwrap(), r);
    }

    #[test]
    fn header_layout() {
        let b = encode(&Record::default());
        assert_eq!(&b[..4], b"MORL");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(b.len(), 4 + 4 + 4 + 8);
    }

    #[test]
    fn fnv_reference_values() {
        // published FNV-1a 64 test vectors
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn every_flipped_byte_is_detected() {
        let b = encode(&sample());
        for i in 0..b.len() {
            let mut c = b.clone();
            c[i] ^= 0x5a;
            assert!(decode(&c).is_err(), "byte {i}");
        }
    }

    #[test]
    fn truncation_is_detected() {
        let b = encode(&sample());
        for n in 0..b.len() {
            assert!(decode(&b[..n]).is_err());
        }
    }
}
