//! File formats.
//!
//! Embedding files come in two containers, chosen by content on load and by
//! extension on save (`.embf` is binary, anything else JSON Lines):
//!
//! * JSON Lines: a header object
//!   `{"format_version":1,"d":D,"count":N,"dtype":"f32"|"f64"}` followed by one
//!   record per line, `{"id":..,"modality":"image"|"text","labels":{..},"vector":[..]}`.
//! * EMBF: little-endian binary, see [`write_embf`] for the exact layout.
//!
//! All JSON written by this crate prints floats with 17 significant digits so
//! that every `f64` survives a round trip. Writes go to a temporary file in the
//! target directory and are renamed into place.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::ser::{Formatter, PrettyFormatter};

use crate::error::{Error, Result};
use crate::geometry::{unit_normalize, AttributeSubspace, Embedding, GroupPrototype, Labels, Modality};
use crate::metrics::GroupCounts;

pub const FORMAT_VERSION: u32 = 1;
pub const EMBF_MAGIC: &[u8; 4] = b"EMBF";
const ABSENT: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        match c {
            1 => Ok(Dtype::F32),
            2 => Ok(Dtype::F64),
            _ => Err(Error::MalformedHeader(format!("unknown dtype code {c}"))),
        }
    }

    fn quantize(self, x: f64) -> f64 {
        match self {
            Dtype::F32 => x as f32 as f64,
            Dtype::F64 => x,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingHeader {
    pub format_version: u32,
    pub d: usize,
    pub count: usize,
    pub dtype: Dtype,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    modality: Modality,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Labels>,
    vector: Vec<f64>,
}

// ---------------------------------------------------------------------------
// JSON output

/// Writes every float with 17 significant digits.
struct Sig17<F>(F);

macro_rules! delegate {
    ($($name:ident),*) => {$(
        fn $name<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
            self.0.$name(w)
        }
    )*};
}

impl<F: Formatter> Formatter for Sig17<F> {
    fn write_f64<W: ?Sized + Write>(&mut self, w: &mut W, value: f64) -> std::io::Result<()> {
        write!(w, "{value:.16e}")
    }

    fn write_f32<W: ?Sized + Write>(&mut self, w: &mut W, value: f32) -> std::io::Result<()> {
        write!(w, "{:.16e}", value as f64)
    }

    delegate!(begin_array, end_array, begin_object, end_object, end_object_value);

    fn begin_array_value<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_array_value(w, first)
    }

    fn end_array_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.end_array_value(w)
    }

    fn begin_object_key<W: ?Sized + Write>(&mut self, w: &mut W, first: bool) -> std::io::Result<()> {
        self.0.begin_object_key(w, first)
    }

    fn begin_object_value<W: ?Sized + Write>(&mut self, w: &mut W) -> std::io::Result<()> {
        self.0.begin_object_value(w)
    }
}

/// Single-line JSON with 17-significant-digit floats.
pub fn to_json_line<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(serde_json::ser::CompactFormatter));
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Indented JSON with 17-significant-digit floats, newline terminated.
pub fn to_json_pretty<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17(PrettyFormatter::new()));
    value.serialize(&mut ser)?;
    buf.push(b'\n');
    Ok(String::from_utf8(buf).expect("serde_json emits UTF-8"))
}

/// Writes `bytes` to a temporary sibling of `path`, then renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_reader(BufReader::new(file))?)
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, to_json_pretty(value)?.as_bytes())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&to_json_line(item)?);
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

// ---------------------------------------------------------------------------
// Embedding files

pub fn save_embeddings(path: &Path, embeddings: &[Embedding], dtype: Dtype) -> Result<()> {
    let bytes = if path.extension().is_some_and(|e| e == "embf") {
        write_embf(embeddings, dtype)?
    } else {
        write_jsonl_embeddings(embeddings, dtype)?.into_bytes()
    };
    write_atomic(path, &bytes)
}

pub fn load_embeddings(path: &Path) -> Result<Vec<Embedding>> {
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EMBF_MAGIC) {
        read_embf(&bytes)
    } else {
        read_jsonl_embeddings(BufReader::new(bytes.as_slice()))
    }
}

fn common_dim(embeddings: &[Embedding]) -> Result<usize> {
    let d = embeddings.first().map_or(0, Embedding::dim);
    for e in embeddings {
        if e.dim() != d {
            return Err(Error::dim(d, e.dim()));
        }
    }
    Ok(d)
}

pub fn write_jsonl_embeddings(embeddings: &[Embedding], dtype: Dtype) -> Result<String> {
    let header = EmbeddingHeader {
        format_version: FORMAT_VERSION,
        d: common_dim(embeddings)?,
        count: embeddings.len(),
        dtype,
    };
    let mut out = to_json_line(&header)?;
    out.push('\n');
    for e in embeddings {
        let rec = Record {
            id: e.id.clone(),
            modality: e.modality,
            labels: e.labels.clone(),
            vector: e.vector.iter().map(|&x| dtype.quantize(x)).collect(),
        };
        out.push_str(&to_json_line(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

struct Ingest {
    d: usize,
    dtype: Dtype,
    seen: HashSet<String>,
    out: Vec<Embedding>,
}

impl Ingest {
    fn new(header: &EmbeddingHeader) -> Result<Self> {
        if header.format_version != FORMAT_VERSION {
            return Err(Error::MalformedHeader(format!(
                "unsupported format_version {}",
                header.format_version
            )));
        }
        if header.d < 2 && header.count > 0 {
            return Err(Error::MalformedHeader(format!("d = {} < 2", header.d)));
        }
        Ok(Ingest {
            d: header.d,
            dtype: header.dtype,
            seen: HashSet::new(),
            out: Vec::with_capacity(header.count.min(1 << 20)),
        })
    }

    fn push(&mut self, id: String, modality: Modality, labels: Option<Labels>, vector: Vec<f64>) -> Result<()> {
        if vector.len() != self.d {
            return Err(Error::dim(self.d, vector.len()));
        }
        if !self.seen.insert(id.clone()) {
            return Err(Error::DuplicateId(id));
        }
        let vector: Vec<f64> = vector.into_iter().map(|x| self.dtype.quantize(x)).collect();
        let vector = unit_normalize(vector).ok_or_else(|| Error::ZeroVector(id.clone()))?;
        self.out.push(Embedding {
            id,
            vector,
            modality,
            labels: labels.filter(|l| !l.is_empty()),
        });
        Ok(())
    }

    fn finish(self, expected: usize) -> Result<Vec<Embedding>> {
        if self.out.len() != expected {
            return Err(Error::MalformedHeader(format!(
                "header count {expected} but {} records",
                self.out.len()
            )));
        }
        Ok(self.out)
    }
}

pub fn read_jsonl_embeddings<R: BufRead>(reader: R) -> Result<Vec<Embedding>> {
    let mut lines = reader.lines().enumerate().filter(|(_, l)| match l {
        Ok(s) => !s.trim().is_empty(),
        Err(_) => true,
    });
    let header_line = match lines.next() {
        Some((_, line)) => line.map_err(|e| Error::io("<embeddings>", e))?,
        None => return Err(Error::MalformedHeader("empty file".into())),
    };
    let header: EmbeddingHeader = serde_json::from_str(&header_line)
        .map_err(|e| Error::MalformedHeader(e.to_string()))?;
    let mut ingest = Ingest::new(&header)?;
    for (_, line) in lines {
        let line = line.map_err(|e| Error::io("<embeddings>", e))?;
        let rec: Record = serde_json::from_str(&line)?;
        ingest.push(rec.id, rec.modality, rec.labels, rec.vector)?;
    }
    ingest.finish(header.count)
}

/// Serializes embeddings into the EMBF container.
///
/// Layout, all integers little-endian:
///
/// ```text
/// offset  size  field
/// 0       4     magic "EMBF"
/// 4       4     u32 format_version (1)
/// 8       1     u8 dtype (1 = f32, 2 = f64)
/// 9       3     reserved, zero
/// 12      4     u32 d
/// 16      8     u64 count
/// 24      ...   id table, `count` entries of
///                 u32 id_len, id bytes (UTF-8)
///                 u8 modality (0 = image, 1 = text)
///                 u32 class_len or 0xFFFFFFFF if absent, class bytes
///                 u32 group_len or 0xFFFFFFFF if absent, group bytes
/// ...     ...   count * d values of dtype, row-major, IEEE 754 LE
/// ```
pub fn write_embf(embeddings: &[Embedding], dtype: Dtype) -> Result<Vec<u8>> {
    let d = common_dim(embeddings)?;
    let mut out = Vec::with_capacity(24 + embeddings.len() * (d * 8 + 32));
    out.extend_from_slice(EMBF_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&[0, 0, 0]);
    out.extend_from_slice(&u32::try_from(d).map_err(|_| Error::InvalidArgument("d too large".into()))?.to_le_bytes());
    out.extend_from_slice(&(embeddings.len() as u64).to_le_bytes());

    let put_str = |out: &mut Vec<u8>, s: Option<&str>| match s {
        Some(s) => {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        None => out.extend_from_slice(&ABSENT.to_le_bytes()),
    };
    for e in embeddings {
        put_str(&mut out, Some(&e.id));
        out.push(match e.modality {
            Modality::Image => 0,
            Modality::Text => 1,
        });
        put_str(&mut out, e.class());
        put_str(&mut out, e.group());
    }
    for e in embeddings {
        for &x in &e.vector {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::MalformedHeader("truncated EMBF file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<Option<String>> {
        let len = self.u32()?;
        if len == ABSENT {
            return Ok(None);
        }
        let raw = self.take(len as usize)?;
        String::from_utf8(raw.to_vec())
            .map(Some)
            .map_err(|_| Error::MalformedHeader("id table is not UTF-8".into()))
    }
}

pub fn read_embf(bytes: &[u8]) -> Result<Vec<Embedding>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != EMBF_MAGIC {
        return Err(Error::MalformedHeader("bad magic".into()));
    }
    let format_version = cur.u32()?;
    let dtype = Dtype::from_code(cur.u8()?)?;
    cur.take(3)?;
    let d = cur.u32()? as usize;
    let count = usize::try_from(cur.u64()?)
        .map_err(|_| Error::MalformedHeader("count overflows".into()))?;
    let header = EmbeddingHeader {
        format_version,
        d,
        count,
        dtype,
    };
    let mut ingest = Ingest::new(&header)?;

    let mut meta = Vec::with_capacity(count.min(1 << 20));
    for _ in 0..count {
        let id = cur
            .string()?
            .ok_or_else(|| Error::MalformedHeader("record without id".into()))?;
        let modality = match cur.u8()? {
            0 => Modality::Image,
            1 => Modality::Text,
            m => return Err(Error::MalformedHeader(format!("unknown modality code {m}"))),
        };
        let class = cur.string()?;
        let group = cur.string()?;
        meta.push((id, modality, Labels { class, group }));
    }
    let width = match dtype {
        Dtype::F32 => 4,
        Dtype::F64 => 8,
    };
    for (id, modality, labels) in meta {
        let raw = cur.take(d * width)?;
        let vector = raw
            .chunks_exact(width)
            .map(|c| match dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        ingest.push(id, modality, Some(labels), vector)?;
    }
    if cur.pos != bytes.len() {
        return Err(Error::MalformedHeader(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    ingest.finish(count)
}

// ---------------------------------------------------------------------------
// Prototypes and subspaces

/// Prototypes are stored as an embedding file, one text record per group
/// with `id` and `labels.group` set to the group name.
pub fn save_prototypes(path: &Path, prototypes: &[GroupPrototype]) -> Result<()> {
    let embs: Vec<Embedding> = prototypes
        .iter()
        .map(|p| Embedding {
            id: p.group.clone(),
            vector: p.vector.clone(),
            modality: Modality::Text,
            labels: Some(Labels::new(None, Some(&p.group))),
        })
        .collect();
    save_embeddings(path, &embs, Dtype::F64)
}

/// Prototypes in file order.
pub fn load_prototypes(path: &Path) -> Result<Vec<GroupPrototype>> {
    Ok(load_embeddings(path)?
        .into_iter()
        .map(|e| GroupPrototype {
            group: e.group().map(str::to_owned).unwrap_or_else(|| e.id.clone()),
            vector: e.vector,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubspaceFile {
    pub format_version: u32,
    pub d: usize,
    pub rank: usize,
    pub reference_group: String,
    pub source_groups: Vec<String>,
    /// Basis columns.
    pub basis: Vec<Vec<f64>>,
}

pub fn save_subspace(path: &Path, s: &AttributeSubspace) -> Result<()> {
    let file = SubspaceFile {
        format_version: FORMAT_VERSION,
        d: s.dim(),
        rank: s.rank(),
        reference_group: s.reference_group().to_owned(),
        source_groups: s.source_groups().to_vec(),
        basis: s.basis().to_vec(),
    };
    write_json(path, &file)
}

pub fn load_subspace(path: &Path) -> Result<AttributeSubspace> {
    let file: SubspaceFile = read_json(path)?;
    if file.format_version != FORMAT_VERSION {
        return Err(Error::MalformedHeader(format!(
            "unsupported subspace format_version {}",
            file.format_version
        )));
    }
    if file.rank != file.basis.len() {
        return Err(Error::MalformedHeader(format!(
            "rank {} but {} basis columns",
            file.rank,
            file.basis.len()
        )));
    }
    AttributeSubspace::from_basis(file.basis, file.d, file.source_groups, file.reference_group)
}

// ---------------------------------------------------------------------------
// CSV inputs

#[derive(Deserialize)]
struct CountRow {
    prompt_id: String,
    group: String,
    count: u64,
}

/// Reads `prompt_id,group,count` rows; prompts keep first-appearance order.
pub fn load_group_counts(path: &Path) -> Result<Vec<GroupCounts>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut order: Vec<String> = Vec::new();
    let mut by_prompt: HashMap<String, BTreeMap<String, u64>> = HashMap::new();
    for row in rdr.deserialize::<CountRow>() {
        let row = row?;
        let entry = by_prompt.entry(row.prompt_id.clone()).or_insert_with(|| {
            order.push(row.prompt_id.clone());
            BTreeMap::new()
        });
        if entry.insert(row.group.clone(), row.count).is_some() {
            return Err(Error::DuplicateId(format!("{}/{}", row.prompt_id, row.group)));
        }
    }
    Ok(order
        .into_iter()
        .map(|p| {
            let counts = by_prompt.remove(&p).expect("recorded");
            GroupCounts::new(p, counts)
        })
        .collect())
}

#[derive(Deserialize)]
struct QrelRow {
    query_id: String,
    relevant_id: String,
}

/// Reads `query_id,relevant_id` relevance judgments.
pub fn load_qrels(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut out = BTreeMap::new();
    for row in rdr.deserialize::<QrelRow>() {
        let row = row?;
        if out.insert(row.query_id.clone(), row.relevant_id).is_some() {
            return Err(Error::DuplicateId(row.query_id));
        }
    }
    Ok(out)
}

pub fn save_qrels(path: &Path, qrels: &BTreeMap<String, String>) -> Result<()> {
    let mut out = String::from("query_id,relevant_id\n");
    for (q, r) in qrels {
        out.push_str(&format!("{q},{r}\n"));
    }
    write_atomic(path, out.as_bytes())
}
