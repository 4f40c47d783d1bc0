//! Self-contained training snapshots.
//!
//! Binary layout, little-endian throughout:
//!
//! ```text
//! magic    8 bytes  "PPCKPT\0\0"
//! version  u32
//! header   u64 length + UTF-8 JSON
//! arrays   u32 count, then per array:
//!          u32 name length, name, u32 rank, rank × u64 dims, f64 payload
//! ```
//!
//! Array names are `<role>/param/<name>`, `<role>/adam_m/<name>` and
//! `<role>/adam_v/<name>`, in network then parameter order.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nets::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec, ParamSet};
use crate::optim::AdamState;
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const MAGIC: &[u8; 8] = b"PPCKPT\0\0";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Pix2pix,
    Cyclegan,
    Hd,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Pix2pix => "pix2pix",
            ModelKind::Cyclegan => "cyclegan",
            ModelKind::Hd => "hd",
        }
    }

    /// Whether the model maps coarse masks to fine masks.
    pub fn is_mask_model(self) -> bool {
        self != ModelKind::Hd
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "pix2pix" => Ok(ModelKind::Pix2pix),
            "cyclegan" => Ok(ModelKind::Cyclegan),
            "hd" | "pix2pixhd" => Ok(ModelKind::Hd),
            other => Err(Error::invalid(format!(
                "unknown model `{other}` (pix2pix|cyclegan|hd)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Net {
    Generator(Generator),
    Discriminator(Discriminator),
}

impl Net {
    pub fn params(&self) -> &ParamSet {
        match self {
            Net::Generator(g) => &g.params,
            Net::Discriminator(d) => &d.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        match self {
            Net::Generator(g) => &mut g.params,
            Net::Discriminator(d) => &mut d.params,
        }
    }

    fn spec(&self) -> NetSpec {
        match self {
            Net::Generator(g) => NetSpec::Generator(g.spec),
            Net::Discriminator(d) => NetSpec::Discriminator(d.spec),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "spec", rename_all = "lowercase")]
enum NetSpec {
    Generator(GeneratorSpec),
    Discriminator(DiscriminatorSpec),
}

/// One network of a model with its optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct NetState {
    pub role: String,
    pub net: Net,
    pub adam: AdamState,
}

impl NetState {
    pub fn new(role: impl Into<String>, net: Net) -> Self {
        let adam = AdamState::new(net.params());
        Self {
            role: role.into(),
            net,
            adam,
        }
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: IndexMap<String, f64>,
}

/// Hex SHA-256 of the metric log as written to disk.
pub fn metrics_digest(records: &[MetricRecord]) -> Result<String> {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_string(r)?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex(&h.finalize()))
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer iterations.
    pub step: u64,
    pub nets: Vec<NetState>,
    pub metrics: Vec<MetricRecord>,
    /// Set on diagnostic snapshots written when training aborts.
    pub note: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct NetHeader {
    role: String,
    #[serde(flatten)]
    spec: NetSpec,
    adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: TrainConfig,
    config_digest: String,
    epoch: usize,
    step: u64,
    nets: Vec<NetHeader>,
    metrics: Vec<MetricRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    note: Option<String>,
}

impl Checkpoint {
    pub fn net(&self, role: &str) -> Result<&NetState> {
        self.nets
            .iter()
            .find(|n| n.role == role)
            .ok_or_else(|| Error::Checkpoint(format!("no network with role `{role}`")))
    }

    pub fn net_mut(&mut self, role: &str) -> Result<&mut NetState> {
        self.nets
            .iter_mut()
            .find(|n| n.role == role)
            .ok_or_else(|| Error::Checkpoint(format!("no network with role `{role}`")))
    }

    pub fn generator(&self, role: &str) -> Result<&Generator> {
        match &self.net(role)?.net {
            Net::Generator(g) => Ok(g),
            Net::Discriminator(_) => Err(Error::Checkpoint(format!("`{role}` is not a generator"))),
        }
    }

    pub fn discriminator(&self, role: &str) -> Result<&Discriminator> {
        match &self.net(role)?.net {
            Net::Discriminator(d) => Ok(d),
            Net::Generator(_) => Err(Error::Checkpoint(format!(
                "`{role}` is not a discriminator"
            ))),
        }
    }

    pub fn config_digest(&self) -> Result<String> {
        self.config.digest()
    }

    pub fn metrics_digest(&self) -> Result<String> {
        metrics_digest(&self.metrics)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind,
            config: self.config.clone(),
            config_digest: self.config_digest()?,
            epoch: self.epoch,
            step: self.step,
            nets: self
                .nets
                .iter()
                .map(|n| NetHeader {
                    role: n.role.clone(),
                    spec: n.net.spec(),
                    adam_t: n.adam.t,
                })
                .collect(),
            metrics: self.metrics.clone(),
            note: self.note.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(json.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);

        let mut arrays: Vec<(String, &Tensor)> = Vec::new();
        for n in &self.nets {
            for (group, set) in [
                ("param", n.net.params()),
                ("adam_m", &n.adam.m),
                ("adam_v", &n.adam.v),
            ] {
                for (name, t) in set.iter() {
                    arrays.push((format!("{}/{group}/{name}", n.role), t));
                }
            }
        }
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, t) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&4u32.to_le_bytes());
            for d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = r.u64()? as usize;
        let header: Header = serde_json::from_slice(r.take(hlen)?)?;
        if header.config.digest()? != header.config_digest {
            return Err(Error::Checkpoint("config digest mismatch".into()));
        }
        let count = r.u32()? as usize;
        let mut arrays: IndexMap<String, Tensor> = IndexMap::with_capacity(count);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::Checkpoint("array name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            if rank != 4 {
                return Err(Error::Checkpoint(format!("array `{name}` has rank {rank}")));
            }
            let mut shape = [0usize; 4];
            for d in &mut shape {
                *d = r.u64()? as usize;
            }
            let n: usize = shape.iter().product();
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("array too large".into()))?)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            arrays.insert(name, Tensor::from_vec(shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes after arrays".into()));
        }

        let mut nets = Vec::with_capacity(header.nets.len());
        for nh in header.nets {
            let collect = |group: &str| {
                let prefix = format!("{}/{group}/", nh.role);
                let mut set = ParamSet::new();
                for (k, t) in &arrays {
                    if let Some(name) = k.strip_prefix(&prefix) {
                        set.insert(name, t.clone());
                    }
                }
                set
            };
            let params = collect("param");
            let adam = AdamState {
                t: nh.adam_t,
                m: collect("adam_m"),
                v: collect("adam_v"),
            };
            if params.is_empty() || adam.m.len() != params.len() || adam.v.len() != params.len() {
                return Err(Error::Checkpoint(format!(
                    "incomplete arrays for network `{}`",
                    nh.role
                )));
            }
            let net = match nh.spec {
                NetSpec::Generator(spec) => Net::Generator(Generator { spec, params }),
                NetSpec::Discriminator(spec) => Net::Discriminator(Discriminator { spec, params }),
            };
            nets.push(NetState {
                role: nh.role,
                net,
                adam,
            });
        }
        Ok(Self {
            kind: header.kind,
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            nets,
            metrics: header.metrics,
            note: header.note,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::NotFound(format!("checkpoint {}", path.display())));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
