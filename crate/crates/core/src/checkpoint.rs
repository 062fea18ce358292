//! Versioned binary checkpoints of named matrices and strings.
//!
//! Layout (little endian):
//!
//! ```text
//! "XMCK" | version u8 | stage u8 | seed u64 | config len u32 | config utf-8
//! | entry count u32 | entries... | sha-256 of everything before
//! entry: name len u16 | name | kind u8 (0 matrix, 1 text)
//!        matrix: rows u64 | cols u64 | rows*cols f64
//!        text:   len u32 | utf-8
//! ```

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corrnet::CorrNet;
use crate::dataset::Modality;
use crate::dbn::DbnModel;
use crate::error::{Error, Result};
use crate::fusion::JointFusionRbm;
use crate::io::write_text;
use crate::multitask::StageTwoModel;
use crate::nn::{Activation, DenseLayer, Mlp};
use crate::numeric::FeatureMatrix;
use crate::rbm::{RbmParams, VisibleKind};

pub const MAGIC: &[u8; 4] = b"XMCK";
pub const FORMAT_VERSION: u8 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    One = 1,
    Two = 2,
}

impl Stage {
    fn from_byte(b: u8) -> Result<Self> {
        match b {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            other => Err(Error::Corrupt(format!("unknown stage tag {other}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    Matrix(FeatureMatrix),
    Text(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub config_echo: String,
    entries: Vec<(String, Entry)>,
}

impl Checkpoint {
    pub fn new(stage: Stage, seed: u64, config_echo: impl Into<String>) -> Self {
        Self {
            stage,
            seed,
            config_echo: config_echo.into(),
            entries: Vec::new(),
        }
    }

    pub fn entries(&self) -> &[(String, Entry)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.get(name).is_some()
    }

    fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, e)| e)
    }

    fn put(&mut self, name: &str, entry: Entry) {
        assert!(name.len() <= u16::MAX as usize, "entry name too long");
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| n == name) {
            slot.1 = entry;
        } else {
            self.entries.push((name.to_string(), entry));
        }
    }

    pub fn put_matrix(&mut self, name: &str, m: &FeatureMatrix) {
        self.put(name, Entry::Matrix(m.clone()));
    }

    pub fn put_vector(&mut self, name: &str, v: &[f64]) {
        self.put(
            name,
            Entry::Matrix(FeatureMatrix::row_vector(v).expect("finite vector")),
        );
    }

    pub fn put_text(&mut self, name: &str, text: &str) {
        self.put(name, Entry::Text(text.to_string()));
    }

    /// Copies every entry of `other` under the same names.
    pub fn extend_from(&mut self, other: &Checkpoint) {
        for (name, entry) in &other.entries {
            self.put(name, entry.clone());
        }
    }

    pub fn matrix(&self, name: &str) -> Result<&FeatureMatrix> {
        match self.get(name) {
            Some(Entry::Matrix(m)) => Ok(m),
            Some(Entry::Text(_)) => Err(Error::Compatibility(format!(
                "entry `{name}` is not a matrix"
            ))),
            None => Err(Error::Compatibility(format!(
                "checkpoint has no entry `{name}`"
            ))),
        }
    }

    pub fn vector(&self, name: &str) -> Result<Vec<f64>> {
        let m = self.matrix(name)?;
        if m.rows() != 1 {
            return Err(Error::Compatibility(format!(
                "entry `{name}` is not a vector"
            )));
        }
        Ok(m.as_slice().to_vec())
    }

    pub fn text(&self, name: &str) -> Result<&str> {
        match self.get(name) {
            Some(Entry::Text(t)) => Ok(t),
            Some(Entry::Matrix(_)) => {
                Err(Error::Compatibility(format!("entry `{name}` is not text")))
            }
            None => Err(Error::Compatibility(format!(
                "checkpoint has no entry `{name}`"
            ))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        out.push(self.stage as u8);
        out.extend_from_slice(&self.seed.to_le_bytes());
        out.extend_from_slice(&(self.config_echo.len() as u32).to_le_bytes());
        out.extend_from_slice(self.config_echo.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::Matrix(m) => {
                    out.push(0);
                    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
                    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
                    for v in m.as_slice() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Text(t) => {
                    out.push(1);
                    out.extend_from_slice(&(t.len() as u32).to_le_bytes());
                    out.extend_from_slice(t.as_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 5 || &bytes[..4] != MAGIC {
            return Err(Error::Corrupt("not a checkpoint file (bad magic)".into()));
        }
        if bytes[4] != FORMAT_VERSION {
            return Err(Error::UnsupportedVersion {
                found: bytes[4],
                expected: FORMAT_VERSION,
            });
        }
        if bytes.len() < 6 + DIGEST_LEN {
            return Err(Error::Corrupt("file is truncated".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::Corrupt(
                "checksum mismatch (truncated or modified file)".into(),
            ));
        }
        let mut r = Reader {
            bytes: body,
            pos: 5,
        };
        let stage = Stage::from_byte(r.u8()?)?;
        let seed = r.u64()?;
        let config_len = r.u32()? as usize;
        let config_echo = r.string(config_len)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = r.string(name_len)?;
            let entry = match r.u8()? {
                0 => {
                    let rows = r.u64()? as usize;
                    let cols = r.u64()? as usize;
                    let n = rows.checked_mul(cols).ok_or_else(|| {
                        Error::Corrupt(format!("entry `{name}` has absurd shape"))
                    })?;
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| {
                        Error::Corrupt(format!("entry `{name}` has absurd shape"))
                    })?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Entry::Matrix(
                        FeatureMatrix::new(rows, cols, data)
                            .map_err(|e| Error::Corrupt(format!("entry `{name}`: {e}")))?,
                    )
                }
                1 => {
                    let len = r.u32()? as usize;
                    Entry::Text(r.string(len)?)
                }
                k => {
                    return Err(Error::Corrupt(format!(
                        "entry `{name}` has unknown kind {k}"
                    )))
                }
            };
            entries.push((name, entry));
        }
        if r.pos != body.len() {
            return Err(Error::Corrupt("trailing bytes after the last entry".into()));
        }
        Ok(Self {
            stage,
            seed,
            config_echo,
            entries,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)
                    .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
            }
        }
        fs::write(path, self.to_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        Self::from_bytes(&bytes)
    }

    /// Human-readable listing of the entries.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "stage = {}\nseed = {}\nentries = {}\n",
            self.stage as u8,
            self.seed,
            self.entries.len()
        );
        for (name, e) in &self.entries {
            match e {
                Entry::Matrix(m) => out.push_str(&format!("{name}: {}x{}\n", m.rows(), m.cols())),
                Entry::Text(t) => out.push_str(&format!("{name}: {t:?}\n")),
            }
        }
        out
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        write_text(path, &self.summary())
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
            .ok_or_else(|| Error::Corrupt("file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Corrupt("invalid utf-8 in checkpoint".into()))
    }
}

fn join_dims(dims: &[usize]) -> String {
    dims.iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn put_rbm(ck: &mut Checkpoint, prefix: &str, p: &RbmParams) {
    ck.put_text(&format!("{prefix}.kind"), p.visible_kind.as_str());
    ck.put_vector(&format!("{prefix}.visible_bias"), &p.visible_bias);
    ck.put_vector(&format!("{prefix}.hidden_bias"), &p.hidden_bias);
    ck.put_matrix(&format!("{prefix}.weights"), &p.weights);
}

pub fn get_rbm(ck: &Checkpoint, prefix: &str) -> Result<RbmParams> {
    let kind: VisibleKind = ck
        .text(&format!("{prefix}.kind"))?
        .parse()
        .map_err(|e: Error| Error::Compatibility(format!("{prefix}: {e}")))?;
    RbmParams::new(
        ck.vector(&format!("{prefix}.visible_bias"))?,
        ck.vector(&format!("{prefix}.hidden_bias"))?,
        ck.matrix(&format!("{prefix}.weights"))?.clone(),
        kind,
    )
    .map_err(|e| Error::Compatibility(format!("{prefix}: {e}")))
}

pub fn put_dbn(ck: &mut Checkpoint, prefix: &str, dbn: &DbnModel) {
    ck.put_text(&format!("{prefix}.modality"), dbn.modality().as_str());
    ck.put_text(&format!("{prefix}.dims"), &join_dims(&dbn.layer_dims()));
    for (i, layer) in dbn.layers().iter().enumerate() {
        put_rbm(ck, &format!("{prefix}.layer{i}"), layer);
    }
}

pub fn get_dbn(ck: &Checkpoint, prefix: &str) -> Result<DbnModel> {
    let modality: Modality = ck
        .text(&format!("{prefix}.modality"))?
        .parse()
        .map_err(|e: Error| Error::Compatibility(e.to_string()))?;
    let mut layers = Vec::new();
    while ck.contains(&format!("{prefix}.layer{}.weights", layers.len())) {
        layers.push(get_rbm(ck, &format!("{prefix}.layer{}", layers.len()))?);
    }
    DbnModel::new(layers, modality).map_err(|e| Error::Compatibility(format!("{prefix}: {e}")))
}

pub fn put_mlp(ck: &mut Checkpoint, prefix: &str, net: &Mlp) {
    ck.put_text(&format!("{prefix}.dims"), &join_dims(&net.dims()));
    for (i, layer) in net.layers.iter().enumerate() {
        ck.put_text(
            &format!("{prefix}.layer{i}.activation"),
            layer.activation.as_str(),
        );
        ck.put_matrix(&format!("{prefix}.layer{i}.weights"), &layer.weights);
        ck.put_vector(&format!("{prefix}.layer{i}.bias"), &layer.bias);
    }
}

pub fn get_mlp(ck: &Checkpoint, prefix: &str) -> Result<Mlp> {
    let mut layers: Vec<DenseLayer> = Vec::new();
    loop {
        let i = layers.len();
        let w = format!("{prefix}.layer{i}.weights");
        if !ck.contains(&w) {
            break;
        }
        let activation: Activation = ck
            .text(&format!("{prefix}.layer{i}.activation"))?
            .parse()
            .map_err(|e: Error| Error::Compatibility(e.to_string()))?;
        let weights = ck.matrix(&w)?.clone();
        let bias = ck.vector(&format!("{prefix}.layer{i}.bias"))?;
        if bias.len() != weights.cols() {
            return Err(Error::Compatibility(format!(
                "{prefix}.layer{i}: bias width mismatch"
            )));
        }
        if let Some(prev) = layers.last() {
            if prev.weights.cols() != weights.rows() {
                return Err(Error::Compatibility(format!(
                    "{prefix}: layer {i} does not chain"
                )));
            }
        }
        layers.push(DenseLayer {
            weights,
            bias,
            activation,
        });
    }
    if layers.is_empty() {
        return Err(Error::Compatibility(format!(
            "checkpoint has no network `{prefix}`"
        )));
    }
    Ok(Mlp { layers })
}

pub fn put_corrnet(ck: &mut Checkpoint, prefix: &str, net: &CorrNet) {
    for m in [Modality::Image, Modality::Text] {
        put_mlp(ck, &format!("{prefix}.{m}_encoder"), net.encoder(m));
        put_mlp(ck, &format!("{prefix}.{m}_decoder"), net.decoder(m));
    }
}

pub fn get_corrnet(ck: &Checkpoint, prefix: &str) -> Result<CorrNet> {
    CorrNet::from_parts(
        get_mlp(ck, &format!("{prefix}.image_encoder"))?,
        get_mlp(ck, &format!("{prefix}.image_decoder"))?,
        get_mlp(ck, &format!("{prefix}.text_encoder"))?,
        get_mlp(ck, &format!("{prefix}.text_decoder"))?,
    )
    .map_err(|e| Error::Compatibility(format!("{prefix}: {e}")))
}

pub fn put_fusion(ck: &mut Checkpoint, prefix: &str, f: &JointFusionRbm) {
    if let Some(p) = f.origin() {
        put_rbm(ck, &format!("{prefix}.origin"), p);
    }
    if let Some(p) = f.patch() {
        put_rbm(ck, &format!("{prefix}.patch"), p);
    }
    put_rbm(ck, &format!("{prefix}.top"), f.top());
}

pub fn get_fusion(ck: &Checkpoint, prefix: &str) -> Result<JointFusionRbm> {
    let optional = |part: &str| -> Result<Option<RbmParams>> {
        let p = format!("{prefix}.{part}");
        if ck.contains(&format!("{p}.weights")) {
            get_rbm(ck, &p).map(Some)
        } else {
            Ok(None)
        }
    };
    JointFusionRbm::new(
        optional("origin")?,
        optional("patch")?,
        get_rbm(ck, &format!("{prefix}.top"))?,
    )
    .map_err(|e| Error::Compatibility(format!("{prefix}: {e}")))
}

pub fn put_stage_two(ck: &mut Checkpoint, prefix: &str, m: &StageTwoModel) {
    put_mlp(ck, &format!("{prefix}.image_map"), &m.image_map);
    put_mlp(ck, &format!("{prefix}.text_map"), &m.text_map);
    if let Some(h) = &m.image_head {
        put_mlp(ck, &format!("{prefix}.image_head"), h);
    }
    if let Some(h) = &m.text_head {
        put_mlp(ck, &format!("{prefix}.text_head"), h);
    }
    ck.put_vector(
        &format!("{prefix}.scalars"),
        &[m.margin, m.branch_weight, m.dropout],
    );
}

pub fn get_stage_two(ck: &Checkpoint, prefix: &str) -> Result<StageTwoModel> {
    let head = |name: &str| -> Result<Option<Mlp>> {
        let p = format!("{prefix}.{name}");
        if ck.contains(&format!("{p}.layer0.weights")) {
            get_mlp(ck, &p).map(Some)
        } else {
            Ok(None)
        }
    };
    let scalars = ck.vector(&format!("{prefix}.scalars"))?;
    let [margin, branch_weight, dropout] = scalars[..] else {
        return Err(Error::Compatibility(format!(
            "{prefix}.scalars must hold 3 values"
        )));
    };
    let model = StageTwoModel {
        image_map: get_mlp(ck, &format!("{prefix}.image_map"))?,
        text_map: get_mlp(ck, &format!("{prefix}.text_map"))?,
        image_head: head("image_head")?,
        text_head: head("text_head")?,
        margin,
        branch_weight,
        dropout,
    };
    if model.image_map.output_dim() != model.text_map.output_dim() {
        return Err(Error::Compatibility(
            "stage-two mappings disagree on the common width".into(),
        ));
    }
    Ok(model)
}
