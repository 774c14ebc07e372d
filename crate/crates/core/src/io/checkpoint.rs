use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use super::IoError;

pub const MAGIC: &[u8; 8] = b"PRFLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const ENDIAN_MARKER: u32 = 0x0102_0304;

const KIND_ARRAY: u8 = 0;
const KIND_TEXT: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Array { shape: Vec<usize>, data: Vec<f64> },
    /// UTF-8, used for structured state stored as JSON.
    Text(String),
}

/// Named arrays and text blobs, kept sorted by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub entries: BTreeMap<String, Entry>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn put_array(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> Result<(), IoError> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(IoError::Entry(format!(
                "{name}: shape {shape:?} does not hold {} values",
                data.len()
            )));
        }
        self.entries.insert(name, Entry::Array { shape, data });
        Ok(())
    }

    pub fn put_vector(&mut self, name: impl Into<String>, data: Vec<f64>) {
        let n = data.len();
        self.entries.insert(name.into(), Entry::Array { shape: vec![n], data });
    }

    pub fn put_text(&mut self, name: impl Into<String>, text: String) {
        self.entries.insert(name.into(), Entry::Text(text));
    }

    pub fn array(&self, name: &str) -> Result<(&[usize], &[f64]), IoError> {
        match self.entries.get(name) {
            Some(Entry::Array { shape, data }) => Ok((shape, data)),
            Some(Entry::Text(_)) => Err(IoError::Entry(format!("{name} is text, expected an array"))),
            None => Err(IoError::Entry(format!("missing {name}"))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<&[f64], IoError> {
        self.array(name).map(|(_, d)| d)
    }

    pub fn text(&self, name: &str) -> Result<&str, IoError> {
        match self.entries.get(name) {
            Some(Entry::Text(t)) => Ok(t),
            Some(Entry::Array { .. }) => Err(IoError::Entry(format!("{name} is an array, expected text"))),
            None => Err(IoError::Entry(format!("missing {name}"))),
        }
    }

    /// Serialized bytes, checksum included.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&ENDIAN_MARKER.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Array { shape, data } => {
                    out.push(KIND_ARRAY);
                    out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(t) => {
                    out.push(KIND_TEXT);
                    out.extend_from_slice(&(t.len() as u64).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, IoError> {
        if bytes.len() < MAGIC.len() + 4 {
            return Err(IoError::Truncated);
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(IoError::BadMagic);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(IoError::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: MAGIC.len() };
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(IoError::Version {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        if r.u32()? != ENDIAN_MARKER {
            return Err(IoError::Endianness);
        }
        let count = r.u64()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| IoError::Entry(e.to_string()))?;
            let entry = match r.take(1)?[0] {
                KIND_ARRAY => {
                    let rank = r.u32()? as usize;
                    let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
                    let n: usize = shape.iter().product();
                    let raw = r.take(n.checked_mul(8).ok_or(IoError::Truncated)?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Entry::Array { shape, data }
                }
                KIND_TEXT => {
                    let len = r.u64()? as usize;
                    let text = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| IoError::Entry(e.to_string()))?;
                    Entry::Text(text)
                }
                k => return Err(IoError::Entry(format!("{name}: unknown entry kind {k}"))),
            };
            entries.insert(name, entry);
        }
        if r.pos != body.len() {
            return Err(IoError::Entry("trailing bytes after the last entry".into()));
        }
        Ok(Self { entries })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        let end = self.pos.checked_add(n).ok_or(IoError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(IoError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), IoError> {
    let tmp = path.with_extension("tmp");
    let file_err = |p: &Path| {
        let p = p.to_path_buf();
        move |e| IoError::File { path: p, error: e }
    };
    let mut f = std::fs::File::create(&tmp).map_err(file_err(&tmp))?;
    f.write_all(&ckpt.to_bytes()).map_err(file_err(&tmp))?;
    f.sync_all().map_err(file_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(file_err(path))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, IoError> {
    let bytes = std::fs::read(path).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        error: e,
    })?;
    Checkpoint::from_bytes(&bytes)
}
