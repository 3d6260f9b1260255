//! On-disk formats: images, manifests, split files and descriptor files.
//!
//! All binary formats are little-endian.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Where an image was taken: planar coordinates in meters, or a frame
/// number along a traverse.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Geotag {
    Planar { x: f64, y: f64 },
    Frame(i64),
}

impl fmt::Display for Geotag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Geotag::Planar { x, y } => write!(f, "{x},{y}"),
            Geotag::Frame(n) => write!(f, "{n}"),
        }
    }
}

/// One manifest line: `path,place_id,x,y` or `path,place_id,frame`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRecord {
    pub path: PathBuf,
    pub place: usize,
    pub geotag: Geotag,
}

impl ManifestRecord {
    /// File stem of `path`; used as the image id everywhere.
    pub fn id(&self) -> String {
        image_id(&self.path)
    }
}

pub fn image_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |detail: &str| Error::format("manifest", format!("line {}: {detail}", n + 1));
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let place = fields
                .get(1)
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad place id"))?;
            let geotag = match fields.len() {
                3 => Geotag::Frame(fields[2].parse().map_err(|_| bad("bad frame"))?),
                4 => Geotag::Planar {
                    x: fields[2].parse().map_err(|_| bad("bad x"))?,
                    y: fields[3].parse().map_err(|_| bad("bad y"))?,
                },
                _ => return Err(bad("expected 3 or 4 fields")),
            };
            records.push(ManifestRecord {
                path: PathBuf::from(fields[0]),
                place,
                geotag,
            });
        }
        Ok(Self { records })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# path,place_id,x,y | path,place_id,frame\n");
        for r in &self.records {
            out.push_str(&format!("{},{},{}\n", r.path.display(), r.place, r.geotag));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_text())?)
    }

    pub fn find(&self, id: &str) -> Option<&ManifestRecord> {
        self.records.iter().find(|r| r.id() == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Query,
    Db,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Query => "query",
            Role::Db => "db",
        }
    }
}

/// Split file: one `image-id role` per line.
pub fn parse_split(text: &str) -> Result<Vec<(String, Role)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let (Some(id), Some(role), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(Error::format("split", format!("line {}: expected `id role`", n + 1)));
        };
        let role = match role {
            "query" => Role::Query,
            "db" => Role::Db,
            other => {
                return Err(Error::format("split", format!("line {}: unknown role {other:?}", n + 1)))
            }
        };
        out.push((id.to_string(), role));
    }
    Ok(out)
}

pub fn split_text(entries: &[(String, Role)]) -> String {
    entries
        .iter()
        .map(|(id, role)| format!("{id} {}\n", role.as_str()))
        .collect()
}

/// Raw planar image: `H`, `W` as u32, then `3·H·W` f32 values.
pub fn encode_image(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w) = match img.shape() {
        &[3, h, w] => (h, w),
        s => return Err(Error::shape("encode_image", format!("{s:?}"))),
    };
    let mut out = Vec::with_capacity(8 + 4 * img.numel());
    out.extend_from_slice(&(h as u32).to_le_bytes());
    out.extend_from_slice(&(w as u32).to_le_bytes());
    for v in img.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_image(bytes: &[u8]) -> Result<Tensor<f32>> {
    let mut r = Reader::new("image", bytes);
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let data = r.f32s(3 * h * w)?;
    r.finish()?;
    Tensor::new([3, h, w], data)
}

pub fn write_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    Ok(fs::write(path, encode_image(img)?)?)
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    decode_image(&fs::read(path)?)
}

const DESC_MAGIC: &[u8; 4] = b"CRCA";
const DESC_VERSION: u32 = 1;

/// Descriptors with their image ids, row-aligned.
#[derive(Clone, Debug, PartialEq)]
pub struct DescriptorSet {
    pub dim: usize,
    pub ids: Vec<String>,
    /// `ids.len() × dim`, row-major.
    pub data: Vec<f32>,
}

impl DescriptorSet {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn push(&mut self, id: impl Into<String>, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            return Err(Error::DimMismatch {
                expected: self.dim,
                got: v.len(),
            });
        }
        self.ids.push(id.into());
        self.data.extend_from_slice(v);
        Ok(())
    }

    /// `"CRCA"`, version, count, dim (u32 each), the f32 matrix, then each
    /// id as a u32 byte length followed by UTF-8.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DESC_MAGIC);
        for v in [DESC_VERSION, self.len() as u32, self.dim as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new("descriptor file", bytes);
        r.magic(DESC_MAGIC)?;
        let version = r.u32()?;
        if version != DESC_VERSION {
            return Err(Error::format("descriptor file", format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let data = r.f32s(n * dim)?;
        let ids = (0..n).map(|_| r.string()).collect::<Result<_>>()?;
        r.finish()?;
        Ok(Self { dim, ids, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path)?);
        w.write_all(&self.encode())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    what: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(what: &'static str, bytes: &'a [u8]) -> Self {
        Self { what, bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format(self.what, "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, m: &[u8; 4]) -> Result<()> {
        if self.take(4)? != m {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub(crate) fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.what, "size overflow"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format(self.what, "invalid UTF-8"))
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(self.what, "trailing bytes"));
        }
        Ok(())
    }
}

pub(crate) fn f32_bytes(values: &[f32], out: &mut Vec<u8>) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}
