//! Checkpoint container: a magic header and named sections, with a JSON
//! manifest beside it listing each section's length and SHA-256.
//!
//! Sections: `config` (run config text), `meta` (JSON), `params` (names,
//! shapes and little-endian f64 values), `preprocessor` (JSON),
//! `candidate_store` (rows, labels, ids and keys) and `context_cache`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::candidates::CandidateStore;
use crate::config::RunConfig;
use crate::data::{Features, Preprocessor, Task};
use crate::error::{Error, Result};
use crate::model::{Model, Tabr};
use crate::retrieval::ContextCache;
use crate::tensor::{ParamStore, Tensor};

const MAGIC: &[u8; 8] = b"TABRCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub task: Task,
    pub p_num: usize,
    pub p_other: usize,
    pub parameter_version: String,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Candidates as deployed: rows, labels and keys. Values are recomputed on
/// load and the keys must come out bitwise equal.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredCandidates {
    pub features: Features,
    pub labels: Vec<f64>,
    pub ids: Vec<usize>,
    pub keys: Tensor,
    pub version: String,
}

impl StoredCandidates {
    pub fn from_store(store: &CandidateStore) -> Self {
        StoredCandidates {
            features: store.features.clone(),
            labels: store.labels.clone(),
            ids: store.ids.clone(),
            keys: store.encoded.keys.clone(),
            version: store.version.clone(),
        }
    }

    /// Re-encodes with `model` and checks version and keys.
    pub fn restore(&self, model: &Tabr) -> Result<CandidateStore> {
        if model.version() != self.version {
            return Err(Error::Checkpoint(format!(
                "candidate store has parameter version {}, model has {}",
                self.version,
                model.version()
            )));
        }
        let store = CandidateStore::build(model, self.features.clone(), self.labels.clone(), self.ids.clone())?;
        if store.encoded.keys != self.keys {
            return Err(Error::Checkpoint("re-encoded candidate keys differ from the stored keys".into()));
        }
        Ok(store)
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub meta: Meta,
    pub params: ParamStore,
    pub preprocessor: Preprocessor,
    pub candidates: Option<StoredCandidates>,
    pub cache: Option<ContextCache>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub parameter_version: String,
    pub sections: Vec<ManifestEntry>,
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut p = path.as_os_str().to_owned();
    p.push(".manifest.json");
    PathBuf::from(p)
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.0.extend_from_slice(s.as_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }

    fn usizes(&mut self, v: &[usize]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.u64(x as u64);
        }
    }

    fn tensor(&mut self, t: &Tensor) {
        self.usizes(t.shape());
        self.f64s(t.data());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    section: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], section: &'static str) -> Self {
        Reader { buf, pos: 0, section }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint(format!("section {} is truncated", self.section)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.buf.len() {
            return Err(Error::Checkpoint(format!("implausible length {n} in section {}", self.section)));
        }
        Ok(n)
    }

    fn str(&mut self) -> Result<String> {
        let n = self.len()?;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }

    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len()?;
        let raw = self.bytes(n * 8)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len()?;
        (0..n).map(|_| self.u64().map(|v| v as usize)).collect()
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.usizes()?;
        let data = self.f64s()?;
        Tensor::new(shape, data)
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("trailing bytes in section {}", self.section)));
        }
        Ok(())
    }
}

fn json<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec_pretty(v).expect("plain data serializes")
}

fn from_json<T: for<'de> Deserialize<'de>>(bytes: &[u8], section: &str) -> Result<T> {
    serde_json::from_slice(bytes).map_err(|e| Error::Checkpoint(format!("section {section}: {e}")))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn encode_params(params: &ParamStore) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(params.len() as u64);
    for (_, name, t) in params.iter() {
        w.str(name);
        w.tensor(t);
    }
    w.0
}

fn decode_params(bytes: &[u8]) -> Result<ParamStore> {
    let mut r = Reader::new(bytes, "params");
    let n = r.len()?;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let name = r.str()?;
        let t = r.tensor()?;
        store.add(name, t);
    }
    r.finish()?;
    Ok(store)
}

fn encode_candidates(c: &StoredCandidates) -> Vec<u8> {
    let mut w = Writer::default();
    w.tensor(&c.features.num);
    w.tensor(&c.features.other);
    w.f64s(&c.labels);
    w.usizes(&c.ids);
    w.tensor(&c.keys);
    w.str(&c.version);
    w.0
}

fn decode_candidates(bytes: &[u8]) -> Result<StoredCandidates> {
    let mut r = Reader::new(bytes, "candidate_store");
    let num = r.tensor()?;
    let other = r.tensor()?;
    let labels = r.f64s()?;
    let ids = r.usizes()?;
    let keys = r.tensor()?;
    let version = r.str()?;
    r.finish()?;
    if [num.rows(), other.rows(), ids.len(), keys.rows()] != [labels.len(); 4] {
        return Err(Error::Checkpoint("candidate store sections disagree on the row count".into()));
    }
    Ok(StoredCandidates {
        features: Features { num, other },
        labels,
        ids,
        keys,
        version,
    })
}

impl Checkpoint {
    /// The model described by the config, carrying the saved parameters.
    pub fn model(&self) -> Result<Model> {
        let mut model = self
            .config
            .build_model(self.meta.task, self.meta.p_num, self.meta.p_other, 0)?;
        model.params_mut().assign(&self.params)?;
        let version = crate::model::parameter_version(model.params());
        if version != self.meta.parameter_version {
            return Err(Error::Checkpoint(format!(
                "parameters hash to {version}, meta records {}",
                self.meta.parameter_version
            )));
        }
        Ok(model)
    }

    fn sections(&self) -> Vec<(&'static str, Vec<u8>)> {
        let mut out = vec![
            ("config", self.config.to_text().into_bytes()),
            ("meta", json(&self.meta)),
            ("params", encode_params(&self.params)),
            ("preprocessor", json(&self.preprocessor)),
        ];
        if let Some(c) = &self.candidates {
            out.push(("candidate_store", encode_candidates(c)));
        }
        if let Some(c) = &self.cache {
            out.push(("context_cache", json(c)));
        }
        out
    }

    /// Writes the container and its manifest.
    pub fn write(&self, path: &Path) -> Result<()> {
        let sections = self.sections();
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut entries = Vec::new();
        for (name, payload) in &sections {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            buf.extend_from_slice(payload);
            entries.push(ManifestEntry {
                name: name.to_string(),
                bytes: payload.len() as u64,
                sha256: sha256_hex(payload),
            });
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))?;
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            parameter_version: self.meta.parameter_version.clone(),
            sections: entries,
        };
        let mp = manifest_path(path);
        std::fs::write(&mp, json(&manifest)).map_err(|e| Error::io(&mp, e))
    }

    /// Reads a container, checking it against the manifest when present.
    pub fn read(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if buf.len() < 16 || &buf[..8] != MAGIC {
            return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
        }
        let version = u32::from_le_bytes(buf[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = u32::from_le_bytes(buf[12..16].try_into().expect("4 bytes")) as usize;
        let mut r = Reader::new(&buf[16..], "header");
        let mut sections: Vec<(String, &[u8])> = Vec::with_capacity(count);
        for _ in 0..count {
            let n = u32::from_le_bytes(r.bytes(4)?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(r.bytes(n)?.to_vec())
                .map_err(|_| Error::Checkpoint("invalid section name".into()))?;
            let len = r.u64()? as usize;
            sections.push((name, r.bytes(len)?));
        }
        r.finish()?;
        let mp = manifest_path(path);
        if mp.exists() {
            let text = std::fs::read(&mp).map_err(|e| Error::io(&mp, e))?;
            let manifest: Manifest = from_json(&text, "manifest")?;
            let listed: Vec<(String, u64, String)> = manifest
                .sections
                .into_iter()
                .map(|e| (e.name, e.bytes, e.sha256))
                .collect();
            let actual: Vec<(String, u64, String)> = sections
                .iter()
                .map(|(n, p)| (n.clone(), p.len() as u64, sha256_hex(p)))
                .collect();
            if listed != actual {
                return Err(Error::Checkpoint("sections do not match the manifest".into()));
            }
        }
        let get = |name: &str| sections.iter().find(|(n, _)| n == name).map(|(_, p)| *p);
        let need = |name: &str| get(name).ok_or_else(|| Error::Checkpoint(format!("missing section {name}")));
        let config_text = std::str::from_utf8(need("config")?)
            .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        Ok(Checkpoint {
            config: RunConfig::parse(config_text)?,
            meta: from_json(need("meta")?, "meta")?,
            params: decode_params(need("params")?)?,
            preprocessor: from_json(need("preprocessor")?, "preprocessor")?,
            candidates: get("candidate_store").map(decode_candidates).transpose()?,
            cache: get("context_cache")
                .map(|b| from_json(b, "context_cache"))
                .transpose()?,
        })
    }
}
