//! Versioned model checkpoints: a UTF-8 manifest of `key:value` lines
//! followed by one blank line and a raw little-endian float payload.
//!
//! The manifest declares the format version, model kind, dtype, seed and
//! training step, the topology, and one `entry:` line per float array with
//! its shape and byte offset. The payload stores every parameter and
//! batchnorm running statistic at the dtype's width, in manifest order, and
//! is covered by a SHA-256 checksum so a single flipped byte is caught at
//! load time instead of producing a silently wrong model.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{CheckpointError, Error, Result};
use crate::nn::{
    Activation, Affine, Classifier, Connector, ConnectorBlock, FeatureExtractor, Network,
    RoutedNetwork,
};
use crate::tensor::{BnStats, DType, Tensor};

pub const FORMAT_VERSION: u32 = 1;

/// Run provenance carried alongside the parameters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CkptMeta {
    pub seed: u64,
    pub step: u64,
}

/// Everything the lab saves to disk.
#[derive(Clone, Debug)]
pub enum SavedModel {
    Network(Network),
    Connector(Connector),
    Routed(RoutedNetwork),
}

impl SavedModel {
    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Network(_) => "network",
            SavedModel::Connector(_) => "connector",
            SavedModel::Routed(_) => "routed",
        }
    }
}

/// One float array headed for the payload.
struct Entry {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

fn tensor_entry(name: String, t: &Tensor) -> Entry {
    Entry {
        name,
        shape: t.shape().to_vec(),
        data: t.data().to_vec(),
    }
}

fn bool_str(b: bool) -> &'static str {
    if b {
        "true"
    } else {
        "false"
    }
}

fn join_usize(v: impl IntoIterator<Item = usize>) -> String {
    v.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn phi_lines(out: &mut String, phi: &FeatureExtractor) {
    let mut widths = vec![phi.input_dim()];
    widths.extend(phi.layers().iter().map(|(a, _)| a.out_dim()));
    let acts = phi
        .layers()
        .iter()
        .map(|(_, act)| act.name())
        .collect::<Vec<_>>()
        .join(",");
    let _ = writeln!(out, "phi.widths:{}", join_usize(widths));
    let _ = writeln!(out, "phi.activations:{acts}");
    let _ = writeln!(out, "phi.frozen:{}", bool_str(phi.frozen()));
}

fn phi_entries(entries: &mut Vec<Entry>, phi: &FeatureExtractor) {
    for (i, (affine, _)) in phi.layers().iter().enumerate() {
        entries.push(tensor_entry(format!("phi.{i}.w"), &affine.w));
        entries.push(tensor_entry(format!("phi.{i}.b"), &affine.b));
    }
}

fn classifier_lines(out: &mut String, g: &Classifier) {
    let _ = writeln!(out, "g.in_dim:{}", g.in_dim());
    let _ = writeln!(out, "g.classes:{}", g.classes());
    let _ = writeln!(out, "g.frozen:{}", bool_str(g.frozen()));
}

fn classifier_entries(entries: &mut Vec<Entry>, g: &Classifier) {
    entries.push(tensor_entry("g.w".into(), &g.w));
    entries.push(tensor_entry("g.b".into(), &g.b));
}

fn connector_lines(out: &mut String, c: &Connector) {
    let mut widths = vec![c.in_dim()];
    widths.extend(c.blocks().iter().map(|b| b.affine.out_dim()));
    let relu = c
        .blocks()
        .iter()
        .map(|b| bool_str(b.relu))
        .collect::<Vec<_>>()
        .join(",");
    let _ = writeln!(out, "conn.widths:{}", join_usize(widths));
    let _ = writeln!(out, "conn.relu:{relu}");
    let _ = writeln!(out, "conn.bn_momentum:{}", c.bn_momentum);
    let _ = writeln!(out, "conn.bn_eps:{}", c.bn_eps);
    let _ = writeln!(out, "conn.frozen:{}", bool_str(c.frozen()));
}

fn connector_entries(entries: &mut Vec<Entry>, c: &Connector) {
    for (i, block) in c.blocks().iter().enumerate() {
        entries.push(tensor_entry(format!("conn.{i}.w"), &block.affine.w));
        entries.push(tensor_entry(format!("conn.{i}.b"), &block.affine.b));
        entries.push(tensor_entry(format!("conn.{i}.gamma"), &block.gamma));
        entries.push(tensor_entry(format!("conn.{i}.beta"), &block.beta));
        let h = block.stats.mean.len();
        entries.push(Entry {
            name: format!("conn.{i}.run_mean"),
            shape: vec![h],
            data: block.stats.mean.clone(),
        });
        entries.push(Entry {
            name: format!("conn.{i}.run_var"),
            shape: vec![h],
            data: block.stats.var.clone(),
        });
    }
}

fn model_dtype(model: &SavedModel) -> Result<DType> {
    let mut tensors: Vec<&Tensor> = Vec::new();
    match model {
        SavedModel::Network(net) => {
            for (a, _) in net.phi.layers() {
                tensors.push(&a.w);
                tensors.push(&a.b);
            }
            tensors.push(&net.g.w);
            tensors.push(&net.g.b);
        }
        SavedModel::Connector(c) => {
            for b in c.blocks() {
                tensors.push(&b.affine.w);
                tensors.push(&b.affine.b);
                tensors.push(&b.gamma);
                tensors.push(&b.beta);
            }
        }
        SavedModel::Routed(r) => {
            for (a, _) in r.phi.layers() {
                tensors.push(&a.w);
                tensors.push(&a.b);
            }
            for b in r.connector.blocks() {
                tensors.push(&b.affine.w);
                tensors.push(&b.affine.b);
                tensors.push(&b.gamma);
                tensors.push(&b.beta);
            }
            tensors.push(&r.classifier.w);
            tensors.push(&r.classifier.b);
        }
    }
    let Some(first) = tensors.first() else {
        return Ok(DType::F64);
    };
    let dt = first.dtype();
    if tensors.iter().any(|t| t.dtype() != dt) {
        return Err(Error::Config(
            "cannot save a model with mixed parameter dtypes".into(),
        ));
    }
    Ok(dt)
}

/// Serializes `model` to `path`. The written bytes are a pure function of
/// the model and `meta`, so save -> load -> save round trips byte for byte.
pub fn save_checkpoint(path: &Path, model: &SavedModel, meta: CkptMeta) -> Result<()> {
    let dtype = model_dtype(model)?;
    let mut entries = Vec::new();
    let mut topo = String::new();
    match model {
        SavedModel::Network(net) => {
            phi_lines(&mut topo, &net.phi);
            classifier_lines(&mut topo, &net.g);
            phi_entries(&mut entries, &net.phi);
            classifier_entries(&mut entries, &net.g);
        }
        SavedModel::Connector(c) => {
            connector_lines(&mut topo, c);
            connector_entries(&mut entries, c);
        }
        SavedModel::Routed(r) => {
            phi_lines(&mut topo, &r.phi);
            connector_lines(&mut topo, &r.connector);
            classifier_lines(&mut topo, &r.classifier);
            phi_entries(&mut entries, &r.phi);
            connector_entries(&mut entries, &r.connector);
            classifier_entries(&mut entries, &r.classifier);
        }
    }

    let width = dtype.byte_width();
    let mut payload = Vec::new();
    let mut manifest = String::new();
    let _ = writeln!(manifest, "format_version:{FORMAT_VERSION}");
    let _ = writeln!(manifest, "kind:{}", model.kind());
    let _ = writeln!(manifest, "dtype:{}", dtype.name());
    let _ = writeln!(manifest, "seed:{}", meta.seed);
    let _ = writeln!(manifest, "step:{}", meta.step);
    manifest.push_str(&topo);
    for e in &entries {
        let _ = writeln!(
            manifest,
            "entry:{};shape={};offset={}",
            e.name,
            join_usize(e.shape.iter().copied()),
            payload.len()
        );
        for &v in &e.data {
            match dtype {
                DType::F32 => payload.extend_from_slice(&(v as f32).to_le_bytes()),
                DType::F64 => payload.extend_from_slice(&v.to_le_bytes()),
            }
        }
        debug_assert_eq!(e.data.len() * width, e.shape.iter().product::<usize>() * width);
    }
    let _ = writeln!(manifest, "payload_len:{}", payload.len());
    let digest = Sha256::digest(&payload);
    let _ = writeln!(manifest, "payload_sha256:{}", hex(&digest));
    manifest.push('\n');

    let mut bytes = manifest.into_bytes();
    bytes.extend_from_slice(&payload);
    std::fs::write(path, bytes)?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    let mut s = String::with_capacity(bytes.len() * 2);
    for b in bytes {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Malformed(msg.into()))
}

fn topology(msg: impl Into<String>) -> Error {
    Error::Checkpoint(CheckpointError::Topology(msg.into()))
}

/// Ordered manifest key/value pairs plus the decoded payload entries.
struct Parsed {
    kind: String,
    dtype: DType,
    meta: CkptMeta,
    topo: Vec<(String, String)>,
    entries: Vec<Entry>,
}

fn parse_file(bytes: &[u8]) -> Result<Parsed> {
    let sep = bytes
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| malformed("missing blank line between manifest and payload"))?;
    let manifest = std::str::from_utf8(&bytes[..sep + 1])
        .map_err(|_| malformed("manifest is not valid UTF-8"))?;
    let payload = &bytes[sep + 2..];

    let mut lines = Vec::new();
    for line in manifest.lines() {
        let Some((key, value)) = line.split_once(':') else {
            return Err(malformed(format!("line without key:value separator: {line:?}")));
        };
        lines.push((key.to_string(), value.to_string()));
    }
    let mut it = lines.into_iter().peekable();

    let take = |it: &mut std::iter::Peekable<std::vec::IntoIter<(String, String)>>,
                key: &str|
     -> Result<String> {
        match it.next() {
            Some((k, v)) if k == key => Ok(v),
            Some((k, _)) => Err(malformed(format!("expected key {key}, found {k}"))),
            None => Err(malformed(format!("manifest ended before key {key}"))),
        }
    };

    let version = take(&mut it, "format_version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::Checkpoint(CheckpointError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        }));
    }
    let kind = take(&mut it, "kind")?;
    let dtype_s = take(&mut it, "dtype")?;
    let dtype = DType::parse(&dtype_s)
        .ok_or_else(|| malformed(format!("unknown dtype {dtype_s:?}")))?;
    let seed: u64 = take(&mut it, "seed")?
        .parse()
        .map_err(|_| malformed("seed is not an unsigned integer"))?;
    let step: u64 = take(&mut it, "step")?
        .parse()
        .map_err(|_| malformed("step is not an unsigned integer"))?;

    let mut topo = Vec::new();
    while let Some((k, _)) = it.peek() {
        if k == "entry" || k == "payload_len" {
            break;
        }
        topo.push(it.next().expect("peeked"));
    }

    let width = dtype.byte_width();
    let mut raw_entries = Vec::new();
    let mut offset = 0usize;
    while matches!(it.peek(), Some((k, _)) if k == "entry") {
        let (_, v) = it.next().expect("peeked");
        let mut name = None;
        let mut shape = None;
        let mut decl_offset = None;
        for part in v.split(';') {
            if let Some(s) = part.strip_prefix("shape=") {
                let dims: std::result::Result<Vec<usize>, _> =
                    s.split(',').map(|d| d.parse::<usize>()).collect();
                shape = Some(dims.map_err(|_| malformed(format!("bad shape in entry {v:?}")))?);
            } else if let Some(o) = part.strip_prefix("offset=") {
                decl_offset = Some(
                    o.parse::<usize>()
                        .map_err(|_| malformed(format!("bad offset in entry {v:?}")))?,
                );
            } else if name.is_none() {
                name = Some(part.to_string());
            } else {
                return Err(malformed(format!("unknown entry attribute {part:?}")));
            }
        }
        let (Some(name), Some(shape), Some(decl_offset)) = (name, shape, decl_offset) else {
            return Err(malformed(format!("entry missing name, shape, or offset: {v:?}")));
        };
        if decl_offset != offset {
            return Err(topology(format!(
                "entry {name} declares offset {decl_offset}, expected {offset}"
            )));
        }
        let numel: usize = shape.iter().product();
        offset += numel * width;
        raw_entries.push((name, shape));
    }

    let declared_len: usize = take(&mut it, "payload_len")?
        .parse()
        .map_err(|_| malformed("payload_len is not an unsigned integer"))?;
    let sha = take(&mut it, "payload_sha256")?;
    if it.next().is_some() {
        return Err(malformed("unexpected keys after payload_sha256"));
    }
    if declared_len != offset {
        return Err(topology(format!(
            "entries cover {offset} bytes but payload_len declares {declared_len}"
        )));
    }
    if payload.len() < declared_len {
        return Err(Error::Checkpoint(CheckpointError::Truncated {
            declared: declared_len,
            actual: payload.len(),
        }));
    }
    if payload.len() > declared_len {
        return Err(malformed(format!(
            "payload holds {} bytes beyond the declared {declared_len}",
            payload.len() - declared_len
        )));
    }
    if hex(&Sha256::digest(payload)) != sha {
        return Err(Error::Checkpoint(CheckpointError::ChecksumMismatch));
    }

    let mut entries = Vec::new();
    let mut cursor = 0usize;
    for (name, shape) in raw_entries {
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = cursor + i * width;
            let v = match dtype {
                DType::F32 => {
                    f32::from_le_bytes(payload[at..at + 4].try_into().expect("width")) as f64
                }
                DType::F64 => f64::from_le_bytes(payload[at..at + 8].try_into().expect("width")),
            };
            data.push(v);
        }
        cursor += numel * width;
        entries.push(Entry { name, shape, data });
    }

    Ok(Parsed {
        kind,
        dtype,
        meta: CkptMeta { seed, step },
        topo,
        entries,
    })
}

/// Cursor over topology keys and payload entries that enforces exact order.
struct Builder {
    dtype: DType,
    topo: std::iter::Peekable<std::vec::IntoIter<(String, String)>>,
    entries: std::iter::Peekable<std::vec::IntoIter<Entry>>,
}

impl Builder {
    fn topo_value(&mut self, key: &str) -> Result<String> {
        match self.topo.next() {
            Some((k, v)) if k == key => Ok(v),
            Some((k, _)) => Err(topology(format!("expected topology key {key}, found {k}"))),
            None => Err(topology(format!("missing topology key {key}"))),
        }
    }

    fn usize_list(&mut self, key: &str) -> Result<Vec<usize>> {
        let v = self.topo_value(key)?;
        v.split(',')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| topology(format!("{key} is not a comma-separated width list: {v:?}")))
    }

    fn bool_value(&mut self, key: &str) -> Result<bool> {
        match self.topo_value(key)?.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(topology(format!("{key} must be true or false, got {other:?}"))),
        }
    }

    fn f64_value(&mut self, key: &str) -> Result<f64> {
        let v = self.topo_value(key)?;
        v.parse()
            .map_err(|_| topology(format!("{key} is not a float: {v:?}")))
    }

    fn array(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        match self.entries.next() {
            Some(e) if e.name == name && e.shape == shape => Ok(e.data),
            Some(e) => Err(topology(format!(
                "expected entry {name} with shape {shape:?}, found {} with shape {:?}",
                e.name, e.shape
            ))),
            None => Err(topology(format!("missing entry {name}"))),
        }
    }

    fn tensor(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let data = self.array(name, shape)?;
        Ok(Tensor::new(shape.to_vec(), data)?
            .with_dtype(self.dtype)
            .with_requires_grad())
    }

    fn phi(&mut self) -> Result<FeatureExtractor> {
        let widths = self.usize_list("phi.widths")?;
        if widths.is_empty() {
            return Err(topology("phi.widths must list at least the input width"));
        }
        let acts_raw = self.topo_value("phi.activations")?;
        let acts: Vec<Activation> = if acts_raw.is_empty() {
            Vec::new()
        } else {
            acts_raw
                .split(',')
                .map(|a| {
                    Activation::parse(a)
                        .ok_or_else(|| topology(format!("unknown activation {a:?}")))
                })
                .collect::<Result<_>>()?
        };
        if acts.len() + 1 != widths.len() {
            return Err(topology(format!(
                "phi declares {} widths but {} activations",
                widths.len(),
                acts.len()
            )));
        }
        let frozen = self.bool_value("phi.frozen")?;
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let w = self.tensor(&format!("phi.{i}.w"), &[pair[1], pair[0]])?;
            let b = self.tensor(&format!("phi.{i}.b"), &[pair[1]])?;
            layers.push((Affine { w, b }, acts[i]));
        }
        Ok(FeatureExtractor::from_parts(
            layers,
            widths[0],
            *widths.last().expect("nonempty"),
            frozen,
        ))
    }

    fn classifier(&mut self) -> Result<Classifier> {
        let in_dim: usize = self
            .topo_value("g.in_dim")?
            .parse()
            .map_err(|_| topology("g.in_dim is not an integer"))?;
        let classes: usize = self
            .topo_value("g.classes")?
            .parse()
            .map_err(|_| topology("g.classes is not an integer"))?;
        let frozen = self.bool_value("g.frozen")?;
        let w = self.tensor("g.w", &[classes, in_dim])?;
        let b = self.tensor("g.b", &[classes])?;
        Ok(Classifier::from_parts(w, b, frozen))
    }

    fn connector(&mut self) -> Result<Connector> {
        let widths = self.usize_list("conn.widths")?;
        if widths.len() < 2 {
            return Err(topology("conn.widths must chain at least two widths"));
        }
        let relu_raw = self.topo_value("conn.relu")?;
        let relu: Vec<bool> = relu_raw
            .split(',')
            .map(|r| match r {
                "true" => Ok(true),
                "false" => Ok(false),
                other => Err(topology(format!("bad relu flag {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if relu.len() + 1 != widths.len() {
            return Err(topology(format!(
                "connector declares {} widths but {} relu flags",
                widths.len(),
                relu.len()
            )));
        }
        let bn_momentum = self.f64_value("conn.bn_momentum")?;
        let bn_eps = self.f64_value("conn.bn_eps")?;
        let frozen = self.bool_value("conn.frozen")?;
        let mut blocks = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            let w = self.tensor(&format!("conn.{i}.w"), &[pair[1], pair[0]])?;
            let b = self.tensor(&format!("conn.{i}.b"), &[pair[1]])?;
            let gamma = self.tensor(&format!("conn.{i}.gamma"), &[pair[1]])?;
            let beta = self.tensor(&format!("conn.{i}.beta"), &[pair[1]])?;
            let mean = self.array(&format!("conn.{i}.run_mean"), &[pair[1]])?;
            let var = self.array(&format!("conn.{i}.run_var"), &[pair[1]])?;
            blocks.push(ConnectorBlock {
                affine: Affine { w, b },
                gamma,
                beta,
                stats: BnStats { mean, var },
                relu: relu[i],
            });
        }
        Ok(Connector::from_parts(
            blocks,
            widths[0],
            *widths.last().expect("len >= 2"),
            bn_momentum,
            bn_eps,
            frozen,
        ))
    }

    fn finish(mut self) -> Result<()> {
        if let Some((k, _)) = self.topo.next() {
            return Err(topology(format!("unexpected trailing topology key {k}")));
        }
        if let Some(e) = self.entries.next() {
            return Err(topology(format!("unexpected trailing entry {}", e.name)));
        }
        Ok(())
    }
}

/// Loads any checkpoint, returning the model and its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(SavedModel, CkptMeta)> {
    let bytes = std::fs::read(path)?;
    let parsed = parse_file(&bytes)?;
    let meta = parsed.meta;
    let mut b = Builder {
        dtype: parsed.dtype,
        topo: parsed.topo.into_iter().peekable(),
        entries: parsed.entries.into_iter().peekable(),
    };
    let model = match parsed.kind.as_str() {
        "network" => {
            let phi = b.phi()?;
            let g = b.classifier()?;
            if g.in_dim() != phi.feature_dim() {
                return Err(topology(format!(
                    "classifier input width {} does not match feature width {}",
                    g.in_dim(),
                    phi.feature_dim()
                )));
            }
            SavedModel::Network(Network { phi, g })
        }
        "connector" => SavedModel::Connector(b.connector()?),
        "routed" => {
            let phi = b.phi()?;
            let connector = b.connector()?;
            let classifier = b.classifier()?;
            if connector.in_dim() != phi.feature_dim()
                || classifier.in_dim() != connector.out_dim()
            {
                return Err(topology(
                    "routed model widths do not chain phi -> connector -> classifier",
                ));
            }
            SavedModel::Routed(RoutedNetwork {
                phi,
                connector,
                classifier,
            })
        }
        other => {
            return Err(malformed(format!("unknown checkpoint kind {other:?}")));
        }
    };
    b.finish()?;
    Ok((model, meta))
}

fn kind_mismatch(expected: &str, found: &str) -> Error {
    Error::Checkpoint(CheckpointError::KindMismatch {
        expected: expected.into(),
        found: found.into(),
    })
}

/// Loads a checkpoint that must contain a self-contained network.
pub fn load_network(path: &Path) -> Result<(Network, CkptMeta)> {
    match load_checkpoint(path)? {
        (SavedModel::Network(net), meta) => Ok((net, meta)),
        (other, _) => Err(kind_mismatch("network", other.kind())),
    }
}

/// Loads a checkpoint that must contain a connector.
pub fn load_connector(path: &Path) -> Result<(Connector, CkptMeta)> {
    match load_checkpoint(path)? {
        (SavedModel::Connector(c), meta) => Ok((c, meta)),
        (other, _) => Err(kind_mismatch("connector", other.kind())),
    }
}

/// Loads a checkpoint that must contain a routed student.
pub fn load_routed(path: &Path) -> Result<(RoutedNetwork, CkptMeta)> {
    match load_checkpoint(path)? {
        (SavedModel::Routed(r), meta) => Ok((r, meta)),
        (other, _) => Err(kind_mismatch("routed", other.kind())),
    }
}
