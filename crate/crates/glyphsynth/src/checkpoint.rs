//! Checkpoint container for trained models.
//!
//! Layout: magic bytes `FTCK`, format version (u32 little-endian), a
//! length-prefixed (u64 little-endian) UTF-8 metadata block of `key=value`
//! lines, then the raw little-endian f64 arrays of every declared tensor in
//! declaration order. The metadata embeds the full experiment config (TOML,
//! newline-escaped) plus its digest, the pinned parameter rows, and one
//! declaration line per tensor, covering the parameters and both stages'
//! optimizer moments. Loading verifies magic, version, digest, geometry,
//! and exact end-of-file, so truncation or tampering surfaces as a
//! structured error rather than a panic or silent corruption.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{ExperimentConfig, TrainedModel};

const MAGIC: &[u8; 4] = b"FTCK";
const VERSION: u32 = 1;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        let _ = write!(s, "{b:02x}");
    }
    s
}

fn escape(text: &str) -> String {
    text.replace('\\', "\\\\").replace('\n', "\\n")
}

fn unescape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    let mut chars = text.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('\\') => out.push('\\'),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn corrupt(what: &str) -> Error {
    Error::Checkpoint(format!("corrupt checkpoint: {what}"))
}

/// Tensor groups stored in the container, in file order.
const GROUPS: [&str; 5] = ["param", "adam_p_m", "adam_p_v", "adam_s_m", "adam_s_v"];

fn group_tensors<'a>(
    model: &'a TrainedModel,
    group: &str,
) -> Vec<(&'a String, &'a Tensor)> {
    match group {
        "param" => model.store.iter().collect(),
        "adam_p_m" => model.adam_p.moments().0.iter().collect(),
        "adam_p_v" => model.adam_p.moments().1.iter().collect(),
        "adam_s_m" => model.adam_s.moments().0.iter().collect(),
        "adam_s_v" => model.adam_s.moments().1.iter().collect(),
        _ => unreachable!("unknown tensor group"),
    }
}

/// Serialize a model to the container format.
pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    let config_toml = model.cfg.to_toml()?;
    let mut meta = String::new();
    let _ = writeln!(meta, "config={}", escape(&config_toml));
    let _ = writeln!(meta, "config_digest={}", sha256_hex(config_toml.as_bytes()));
    let _ = writeln!(meta, "step_p={}", model.adam_p.step_count());
    let _ = writeln!(meta, "step_s={}", model.adam_s.step_count());
    for name in model.store.names() {
        for &row in model.store.pinned_rows(name) {
            let _ = writeln!(meta, "pinned={name}:{row}");
        }
    }
    for group in GROUPS {
        for (name, t) in group_tensors(model, group) {
            let _ = writeln!(meta, "{group}={name}:{}x{}", t.rows(), t.cols());
        }
    }

    let meta_bytes = meta.as_bytes();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(meta_bytes);
    for group in GROUPS {
        for (_, t) in group_tensors(model, group) {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    std::fs::write(path, out)
        .map_err(|e| Error::Checkpoint(format!("cannot write {}: {e}", path.display())))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(&format!(
                "file ends inside {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensor(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let n = rows * cols;
        let raw = self.take(n * 8, &format!("tensor {name}"))?;
        let mut data = Vec::with_capacity(n);
        for chunk in raw.chunks_exact(8) {
            data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        Tensor::new(rows, cols, data)
    }
}

fn parse_decl(value: &str) -> Result<(String, usize, usize)> {
    let (name, shape) = value
        .rsplit_once(':')
        .ok_or_else(|| corrupt("malformed tensor declaration"))?;
    let (r, c) = shape
        .split_once('x')
        .ok_or_else(|| corrupt("malformed tensor shape"))?;
    let rows = r.parse().map_err(|_| corrupt("bad tensor rows"))?;
    let cols = c.parse().map_err(|_| corrupt("bad tensor cols"))?;
    Ok((name.to_string(), rows, cols))
}

/// Deserialize a model, verifying structure and the embedded config digest.
pub fn load(path: &Path) -> Result<TrainedModel> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}, this build reads version {VERSION}"
        )));
    }
    let meta_len = u64::from_le_bytes(r.take(8, "metadata length")?.try_into().unwrap()) as usize;
    let meta = std::str::from_utf8(r.take(meta_len, "metadata")?)
        .map_err(|_| corrupt("metadata is not UTF-8"))?
        .to_string();

    let mut config_text = None;
    let mut config_digest = None;
    let mut step_p = None;
    let mut step_s = None;
    let mut pinned: Vec<(String, usize)> = Vec::new();
    let mut decls: Vec<(&'static str, String, usize, usize)> = Vec::new();

    for line in meta.lines() {
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| corrupt("metadata line without '='"))?;
        match key {
            "config" => config_text = Some(unescape(value)),
            "config_digest" => config_digest = Some(value.to_string()),
            "step_p" => step_p = Some(value.parse().map_err(|_| corrupt("bad step_p"))?),
            "step_s" => step_s = Some(value.parse().map_err(|_| corrupt("bad step_s"))?),
            "pinned" => {
                let (name, row) = value
                    .rsplit_once(':')
                    .ok_or_else(|| corrupt("malformed pinned row"))?;
                pinned.push((
                    name.to_string(),
                    row.parse().map_err(|_| corrupt("bad pinned row"))?,
                ));
            }
            _ => {
                let group = GROUPS
                    .iter()
                    .find(|&&g| g == key)
                    .ok_or_else(|| corrupt(&format!("unknown metadata key {key:?}")))?;
                let (name, rows, cols) = parse_decl(value)?;
                decls.push((group, name, rows, cols));
            }
        }
    }

    let config_text = config_text.ok_or_else(|| corrupt("missing config"))?;
    let declared_digest = config_digest.ok_or_else(|| corrupt("missing config digest"))?;
    if sha256_hex(config_text.as_bytes()) != declared_digest {
        return Err(corrupt("config digest does not match embedded config"));
    }
    let cfg = ExperimentConfig::from_toml(&config_text)?;
    let step_p: u64 = step_p.ok_or_else(|| corrupt("missing step_p"))?;
    let step_s: u64 = step_s.ok_or_else(|| corrupt("missing step_s"))?;

    let mut store = ParamStore::new();
    let mut adam: BTreeMap<&str, BTreeMap<String, Tensor>> = BTreeMap::new();
    for (group, name, rows, cols) in decls {
        let t = r.tensor(&name, rows, cols)?;
        if group == "param" {
            store.insert(&name, t)?;
        } else {
            adam.entry(group).or_default().insert(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(corrupt(&format!(
            "{} trailing bytes after the declared tensors",
            bytes.len() - r.pos
        )));
    }
    if store.is_empty() {
        return Err(corrupt("checkpoint declares no parameters"));
    }
    for (name, row) in pinned {
        store.pin_row(&name, row)?;
    }
    let mut take = |g: &str| adam.remove(g).unwrap_or_default();
    Ok(TrainedModel {
        cfg,
        store,
        adam_p: AdamState::from_parts(step_p, take("adam_p_m"), take("adam_p_v")),
        adam_s: AdamState::from_parts(step_s, take("adam_s_m"), take("adam_s_v")),
    })
}

/// Reject a corpus whose geometry differs from the checkpoint's chunking.
pub fn ensure_geometry(model: &TrainedModel, height: usize, width: usize) -> Result<()> {
    let chunk = model.cfg.model.chunk;
    if chunk.height != height || chunk.width != width {
        return Err(Error::Checkpoint(format!(
            "config mismatch: checkpoint expects {}x{} glyphs, corpus provides {height}x{width}",
            chunk.height, chunk.width
        )));
    }
    Ok(())
}
