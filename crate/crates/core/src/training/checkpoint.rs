//! Checkpoint container.
//!
//! ```text
//! CHECKPOINT version=1 n_arrays=K manifest_bytes=N\n
//! <N bytes of JSON manifest>
//! <K array records, in manifest order>
//! ```
//!
//! Parameters and optimizer moments are stored as `f64` arrays so a resumed
//! run continues from exactly the same state.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embeddings::{Array, Dtype};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig, ParamId, ParamSet, Tensor};

const MAGIC: &str = "CHECKPOINT";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct OptimizerEntry {
    name: String,
    step: u64,
    config: AdamConfig,
    params: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    kind: String,
    step: u64,
    config: Value,
    corpus_fingerprint: String,
    arrays: Vec<String>,
    optimizers: Vec<OptimizerEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Which network the parameters belong to, e.g. `"content"`.
    pub kind: String,
    pub step: u64,
    /// Model and training configuration, as JSON.
    pub config: Value,
    pub corpus_fingerprint: String,
    pub params: ParamSet,
    pub optimizers: Vec<(String, Adam)>,
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        for (_, name, t) in self.params.iter() {
            arrays.push((format!("param/{name}"), t));
        }
        let mut optimizers = Vec::new();
        for (oname, opt) in &self.optimizers {
            let names: Vec<String> = opt.ids.iter().map(|&id| self.params.name(id).to_string()).collect();
            for (k, n) in names.iter().enumerate() {
                arrays.push((format!("opt/{oname}/m/{n}"), &opt.m[k]));
                arrays.push((format!("opt/{oname}/v/{n}"), &opt.v[k]));
            }
            optimizers.push(OptimizerEntry { name: oname.clone(), step: opt.step, config: opt.cfg, params: names });
        }
        let manifest = Manifest {
            kind: self.kind.clone(),
            step: self.step,
            config: self.config.clone(),
            corpus_fingerprint: self.corpus_fingerprint.clone(),
            arrays: arrays.iter().map(|(n, _)| n.clone()).collect(),
            optimizers,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out =
            format!("{MAGIC} version={VERSION} n_arrays={} manifest_bytes={}\n", arrays.len(), json.len()).into_bytes();
        out.extend_from_slice(&json);
        for (_, t) in arrays {
            let a = Array { dims: t.shape().to_vec(), dtype: Dtype::F64, data: t.data().to_vec() };
            out.extend_from_slice(&a.encode());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::parse("header", "missing header line"))?;
        let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| Error::parse("header", "not UTF-8"))?;
        let mut toks = header.split_whitespace();
        if toks.next() != Some(MAGIC) {
            return Err(Error::parse("header", format!("expected '{MAGIC}'")));
        }
        let mut fields = std::collections::HashMap::new();
        for tok in toks {
            let (k, v) = tok.split_once('=').ok_or_else(|| Error::parse("header", format!("malformed token '{tok}'")))?;
            fields.insert(k, v.parse::<usize>().map_err(|_| Error::parse(k, format!("bad value '{v}'")))?);
        }
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::parse(k, "missing"));
        if get("version")? != VERSION as usize {
            return Err(Error::parse("version", "unsupported"));
        }
        let n_arrays = get("n_arrays")?;
        let mlen = get("manifest_bytes")?;
        let mut pos = nl + 1;
        let mbytes = bytes.get(pos..pos + mlen).ok_or_else(|| Error::parse("manifest_bytes", "truncated manifest"))?;
        let manifest: Manifest =
            serde_json::from_slice(mbytes).map_err(|e| Error::parse("manifest", e.to_string()))?;
        pos += mlen;
        if manifest.arrays.len() != n_arrays {
            return Err(Error::parse("n_arrays", format!("header says {n_arrays}, manifest lists {}", manifest.arrays.len())));
        }
        let mut params = ParamSet::new();
        let mut opt_arrays = std::collections::HashMap::new();
        for name in &manifest.arrays {
            let (a, used) = Array::decode_prefix(&bytes[pos..]).map_err(|e| Error::parse(name.as_str(), e.to_string()))?;
            pos += used;
            let t = Tensor::new(a.dims, a.data);
            if let Some(p) = name.strip_prefix("param/") {
                params.add(p, t);
            } else {
                opt_arrays.insert(name.clone(), t);
            }
        }
        if pos != bytes.len() {
            return Err(Error::parse("payload", format!("{} trailing bytes", bytes.len() - pos)));
        }
        let mut optimizers = Vec::new();
        for e in &manifest.optimizers {
            let ids: Vec<ParamId> = e
                .params
                .iter()
                .map(|n| params.id(n).ok_or_else(|| Error::parse("optimizers", format!("unknown parameter '{n}'"))))
                .collect::<Result<_>>()?;
            let mut opt = Adam::new(&params, ids, e.config);
            opt.step = e.step;
            for (k, n) in e.params.iter().enumerate() {
                let take = |kind: &str| {
                    opt_arrays
                        .get(&format!("opt/{}/{kind}/{n}", e.name))
                        .cloned()
                        .ok_or_else(|| Error::parse("optimizers", format!("missing {kind} for '{n}'")))
                };
                opt.m[k] = take("m")?;
                opt.v[k] = take("v")?;
            }
            optimizers.push((e.name.clone(), opt));
        }
        Ok(Self {
            kind: manifest.kind,
            step: manifest.step,
            config: manifest.config,
            corpus_fingerprint: manifest.corpus_fingerprint,
            params,
            optimizers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&std::fs::read(path)?)
    }

    /// Deserializes the stored configuration.
    pub fn config_as<T: serde::de::DeserializeOwned>(&self) -> Result<T> {
        serde_json::from_value(self.config.clone()).map_err(|e| Error::parse("config", e.to_string()))
    }

    pub fn optimizer(&self, name: &str) -> Option<&Adam> {
        self.optimizers.iter().find(|(n, _)| n == name).map(|(_, o)| o)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Config(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }
}
