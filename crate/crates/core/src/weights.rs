//! EVTW named-tensor archives, pretrained import and model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "EVTW" | version u32 | tensor_count u32
//! per entry: name_len u16 | name | dtype u8 | rank u8 | dims rank×u32 | offset u64 | length u64
//! zero padding to a 64-byte boundary
//! payload (row-major little-endian values; offsets relative to its start)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{EEGViTModel, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVTW";
pub const VERSION: u32 = 1;
pub const MAX_NAME_BYTES: usize = 255;
const ALIGN: usize = 64;
const DTYPE_REAL32: u8 = 0;

/// Model files carry the head count, which tensor shapes do not reveal.
pub const META_HEADS: &str = "meta.heads";

pub type TensorMap = BTreeMap<String, Tensor<f32>>;

/// One header entry as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchiveEntry {
    pub name: String,
    pub dtype: u8,
    pub dims: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

impl ArchiveEntry {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

fn check_name(name: &str) -> Result<()> {
    if name.is_empty() {
        return Err(Error::InvalidName("empty name".into()));
    }
    if name.len() > MAX_NAME_BYTES {
        return Err(Error::InvalidName(format!(
            "`{}…` is {} bytes (limit {MAX_NAME_BYTES})",
            name.chars().take(32).collect::<String>(),
            name.len()
        )));
    }
    Ok(())
}

fn align_up(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

/// Serialize named tensors. Entries are written in name order, so the bytes
/// depend only on the set of (name, tensor) pairs.
pub fn encode_archive<'a, S, I>(tensors: I) -> Result<Vec<u8>>
where
    S: AsRef<str> + 'a,
    I: IntoIterator<Item = (S, &'a Tensor<f32>)>,
{
    let mut sorted: BTreeMap<String, &Tensor<f32>> = BTreeMap::new();
    for (name, t) in tensors {
        let name = name.as_ref();
        check_name(name)?;
        if sorted.insert(name.to_owned(), t).is_some() {
            return Err(Error::DuplicateName(name.to_owned()));
        }
    }
    let count = u32::try_from(sorted.len())
        .map_err(|_| Error::config("archive", "too many tensors"))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in &sorted {
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::config(name.as_str(), "rank exceeds 255"))?;
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_REAL32);
        out.push(rank);
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::config(name.as_str(), "extent exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        let length = 4 * t.numel() as u64;
        out.extend_from_slice(&offset.to_le_bytes());
        out.extend_from_slice(&length.to_le_bytes());
        offset += length;
    }
    out.resize(align_up(out.len()), 0);
    for t in sorted.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::NotAnArchive(format!(
                "header truncated while reading {what} at byte {}",
                self.pos
            )));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse and fully validate the header. Returns the entries in file order
/// and the byte position where the payload starts.
pub fn parse_header(bytes: &[u8]) -> Result<(Vec<ArchiveEntry>, usize)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::NotAnArchive("bad magic (expected EVTW)".into()));
    }
    let mut c = Cursor { bytes, pos: 4 };
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: VERSION,
        });
    }
    let count = c.u32("tensor count")? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    let mut seen = BTreeSet::new();
    for i in 0..count {
        let len = c.u16("name length")? as usize;
        let name = std::str::from_utf8(c.take(len, "name")?)
            .map_err(|_| Error::InvalidName(format!("entry {i} is not UTF-8")))?
            .to_owned();
        check_name(&name)?;
        let dtype = c.u8("dtype")?;
        if dtype != DTYPE_REAL32 {
            return Err(Error::UnsupportedDtype { name, code: dtype });
        }
        let rank = c.u8("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(c.u32("dims")? as usize);
        }
        let offset = c.u64("offset")?;
        let length = c.u64("length")?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        entries.push(ArchiveEntry {
            name,
            dtype,
            dims,
            offset,
            length,
        });
    }
    let payload_start = align_up(c.pos);
    if payload_start > bytes.len() && !entries.is_empty() {
        return Err(Error::Bounds {
            name: entries[0].name.clone(),
            message: "file ends before the payload".into(),
        });
    }
    let payload_len = bytes.len().saturating_sub(payload_start) as u64;

    for e in &entries {
        if e.dims.contains(&0) {
            return Err(Error::Bounds {
                name: e.name.clone(),
                message: format!("zero extent in {:?}", e.dims),
            });
        }
        let expected = e
            .dims
            .iter()
            .try_fold(4u64, |acc, &d| acc.checked_mul(d as u64));
        if expected != Some(e.length) {
            return Err(Error::Bounds {
                name: e.name.clone(),
                message: format!("length {} does not match dims {:?}", e.length, e.dims),
            });
        }
        match e.offset.checked_add(e.length) {
            Some(end) if end <= payload_len => {}
            _ => {
                return Err(Error::Bounds {
                    name: e.name.clone(),
                    message: format!(
                        "payload region {}+{} exceeds the {payload_len} available bytes",
                        e.offset, e.length
                    ),
                })
            }
        }
    }
    let mut regions: Vec<&ArchiveEntry> = entries.iter().collect();
    regions.sort_by_key(|e| e.offset);
    for w in regions.windows(2) {
        if w[0].offset + w[0].length > w[1].offset {
            return Err(Error::Bounds {
                name: w[1].name.clone(),
                message: format!("payload overlaps `{}`", w[0].name),
            });
        }
    }
    Ok((entries, payload_start))
}

pub fn decode_archive(bytes: &[u8]) -> Result<TensorMap> {
    let (entries, start) = parse_header(bytes)?;
    let mut out = BTreeMap::new();
    for e in entries {
        let from = start + e.offset as usize;
        let raw = &bytes[from..from + e.length as usize];
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        out.insert(e.name, Tensor::from_parts(e.dims, data));
    }
    Ok(out)
}

pub fn write_archive<'a, S, I>(path: &Path, tensors: I) -> Result<()>
where
    S: AsRef<str> + 'a,
    I: IntoIterator<Item = (S, &'a Tensor<f32>)>,
{
    let bytes = encode_archive(tensors)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_archive(path: &Path) -> Result<TensorMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_archive(&bytes)
}

/// Header entries of the archive at `path`, after full validation.
pub fn read_manifest(path: &Path) -> Result<Vec<ArchiveEntry>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(parse_header(&bytes)?.0)
}

/// Name patterns: a trailing `*` matches any suffix, anything else matches
/// exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportPolicy {
    pub load_set: Vec<String>,
    pub fresh_set: Vec<String>,
}

impl Default for ImportPolicy {
    /// Encoder weights come from the archive; patcher, class token,
    /// positional table and head start fresh.
    fn default() -> Self {
        ImportPolicy {
            load_set: vec!["encoder.*".into()],
            fresh_set: vec!["patch.*".into(), "embed.*".into(), "head.*".into()],
        }
    }
}

fn matches(pattern: &str, name: &str) -> bool {
    match pattern.strip_suffix('*') {
        Some(prefix) => name.starts_with(prefix),
        None => pattern == name,
    }
}

impl ImportPolicy {
    pub fn loads(&self, name: &str) -> bool {
        self.load_set.iter().any(|p| matches(p, name))
    }

    pub fn refreshes(&self, name: &str) -> bool {
        self.fresh_set.iter().any(|p| matches(p, name))
    }

    /// Split `names` into (load, fresh). Fails with every name that is
    /// matched by neither set or by both.
    pub fn partition<'a>(
        &self,
        names: impl IntoIterator<Item = &'a str>,
    ) -> Result<(Vec<String>, Vec<String>)> {
        let (mut load, mut fresh, mut gaps) = (Vec::new(), Vec::new(), Vec::new());
        for n in names {
            match (self.loads(n), self.refreshes(n)) {
                (true, false) => load.push(n.to_owned()),
                (false, true) => fresh.push(n.to_owned()),
                _ => gaps.push(n.to_owned()),
            }
        }
        if gaps.is_empty() {
            Ok((load, fresh))
        } else {
            Err(Error::PolicyGap(gaps))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImportManifest {
    pub loaded: Vec<String>,
    pub fresh: Vec<String>,
}

impl EEGViTModel<f32> {
    /// Copy the policy's load set from `archive` verbatim and reinitialize the
    /// fresh set from `seed`. Tensors in the archive outside the load set are
    /// ignored. Applying the same import twice gives the same model.
    pub fn load_pretrained(
        &mut self,
        archive: &TensorMap,
        policy: &ImportPolicy,
        seed: u64,
    ) -> Result<ImportManifest> {
        let specs = self.config.param_specs();
        let (loaded, fresh) = policy.partition(specs.iter().map(|s| s.name.as_str()))?;
        let missing: Vec<String> = loaded
            .iter()
            .filter(|n| !archive.contains_key(*n))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingTensors(missing));
        }
        for spec in &specs {
            if let Some(t) = archive.get(&spec.name).filter(|_| policy.loads(&spec.name)) {
                if t.shape() != spec.shape.as_slice() {
                    return Err(Error::ExtentMismatch {
                        name: spec.name.clone(),
                        model: spec.shape.clone(),
                        archive: t.shape().to_vec(),
                    });
                }
            }
        }
        for spec in &specs {
            let value = if policy.loads(&spec.name) {
                archive[&spec.name].clone()
            } else {
                spec.initialize(seed)
            };
            self.params.insert(spec.name.clone(), value);
        }
        Ok(ImportManifest { loaded, fresh })
    }

    /// Every tensor plus the `meta.heads` entry.
    pub fn to_archive_bytes(&self) -> Result<Vec<u8>> {
        let heads = Tensor::scalar(self.config.encoder.heads as f32);
        encode_archive(self.params.iter().map(|(n, t)| (n.as_str(), t)).chain([(META_HEADS, &heads)]))
    }

    pub fn from_archive_map(mut map: TensorMap) -> Result<Self> {
        let heads = map
            .remove(META_HEADS)
            .ok_or_else(|| Error::MissingTensors(vec![META_HEADS.into()]))?;
        let heads = heads.data()[0];
        if heads.fract() != 0.0 || heads < 1.0 {
            return Err(Error::InvalidData(format!("{META_HEADS} = {heads}")));
        }
        let params = ParamStore::from_map(map);
        let config = ModelConfig::infer(&params, heads as usize)?;
        EEGViTModel::from_params(config, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_archive_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive_map(read_archive(path)?)
    }
}
