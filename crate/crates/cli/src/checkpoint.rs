//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "HNE1" | version u16 | elem-width u8 | opt-state flag u8
//! spec-json length u32 | spec json bytes
//! parameter version u64
//! node count u32
//!   per node: level u32 | index u32 | seed u64 | slot count u16
//!     per slot: name len u16 | name | kind u8 | ndim u8 | dims u32* | f32 data
//! optional optimizer state: entry count u32
//!   per entry: level u32 | index u32 | slot u16 | ndim u8 | dims u32* | f32 data
//! trailing checksum: first 8 bytes of SHA-256 over everything above
//! ```
//!
//! Writing is deterministic, so save -> load -> save reproduces the file
//! byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use hne_core::optim::SgdState;
use hne_core::tensor::Tensor;
use hne_core::tree::{NodeId, NodeParams, Param, ParamKind, ParamStore, TreeSpec};

use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"HNE1";
const VERSION: u16 = 1;
const ELEM_WIDTH: u8 = 4;
const CHECKSUM_LEN: usize = 8;

#[derive(Debug)]
pub struct Checkpoint {
    pub store: ParamStore<f32>,
    pub opt_state: Option<SgdState<f32>>,
}

fn kind_to_u8(kind: ParamKind) -> u8 {
    match kind {
        ParamKind::Weight => 0,
        ParamKind::Bias => 1,
        ParamKind::NormScale => 2,
        ParamKind::NormShift => 3,
        ParamKind::NormStat => 4,
    }
}

fn kind_from_u8(v: u8) -> Option<ParamKind> {
    Some(match v {
        0 => ParamKind::Weight,
        1 => ParamKind::Bias,
        2 => ParamKind::NormScale,
        3 => ParamKind::NormShift,
        4 => ParamKind::NormStat,
        _ => return None,
    })
}

fn put_tensor(buf: &mut Vec<u8>, t: &Tensor<f32>) {
    buf.push(t.shape().len() as u8);
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn save_checkpoint(
    store: &ParamStore<f32>,
    opt_state: Option<&SgdState<f32>>,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.push(ELEM_WIDTH);
    buf.push(opt_state.is_some() as u8);
    let spec_json = serde_json::to_vec(store.spec())
        .map_err(|e| Error::Checkpoint(format!("spec serialization failed: {e}")))?;
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    buf.extend_from_slice(&store.version().to_le_bytes());

    let nodes: Vec<NodeId> = store.spec().node_ids().collect();
    buf.extend_from_slice(&(nodes.len() as u32).to_le_bytes());
    for id in &nodes {
        let np = store.node(*id).expect("store validated against its spec");
        buf.extend_from_slice(&(id.level as u32).to_le_bytes());
        buf.extend_from_slice(&(id.index as u32).to_le_bytes());
        buf.extend_from_slice(&np.seed.to_le_bytes());
        buf.extend_from_slice(&(np.slots.len() as u16).to_le_bytes());
        for p in &np.slots {
            let name = p.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name);
            buf.push(kind_to_u8(p.kind));
            put_tensor(&mut buf, &p.value);
        }
    }
    if let Some(state) = opt_state {
        buf.extend_from_slice(&(state.velocity.len() as u32).to_le_bytes());
        for ((node, slot), t) in &state.velocity {
            buf.extend_from_slice(&(node.level as u32).to_le_bytes());
            buf.extend_from_slice(&(node.index as u32).to_le_bytes());
            buf.extend_from_slice(&(*slot as u16).to_le_bytes());
            put_tensor(&mut buf, t);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest[..CHECKSUM_LEN]);
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "unexpected end of file at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn tensor(&mut self) -> Result<Tensor<f32>> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(&shape, data).map_err(|e| Error::Checkpoint(format!("bad tensor: {e}")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    if buf.len() < CHECKSUM_LEN + 8 {
        return Err(Error::Checkpoint("file too short".into()));
    }
    let (body, tail) = buf.split_at(buf.len() - CHECKSUM_LEN);
    let digest = Sha256::digest(body);
    if &digest[..CHECKSUM_LEN] != tail {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupt".into()));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic: not a checkpoint file".into()));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file is v{version}, this build reads v{VERSION}"
        )));
    }
    let elem = r.u8()?;
    if elem != ELEM_WIDTH {
        return Err(Error::Checkpoint(format!("unsupported element width {elem}")));
    }
    let has_opt = r.u8()? != 0;
    let spec_len = r.u32()? as usize;
    let spec: TreeSpec = serde_json::from_slice(r.take(spec_len)?)
        .map_err(|e| Error::Checkpoint(format!("bad spec json: {e}")))?;
    let param_version = r.u64()?;
    let node_count = r.u32()? as usize;
    let mut nodes = BTreeMap::new();
    for _ in 0..node_count {
        let level = r.u32()? as usize;
        let index = r.u32()? as usize;
        let seed = r.u64()?;
        let slot_count = r.u16()? as usize;
        let mut slots = Vec::with_capacity(slot_count);
        for _ in 0..slot_count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|e| Error::Checkpoint(format!("bad parameter name: {e}")))?;
            let kind = kind_from_u8(r.u8()?)
                .ok_or_else(|| Error::Checkpoint("unknown parameter kind".into()))?;
            let value = r.tensor()?;
            slots.push(Param { name, kind, value });
        }
        nodes.insert(NodeId::new(level, index), NodeParams { seed, slots });
    }
    let opt_state = if has_opt {
        let entries = r.u32()? as usize;
        let mut velocity = BTreeMap::new();
        for _ in 0..entries {
            let level = r.u32()? as usize;
            let index = r.u32()? as usize;
            let slot = r.u16()? as usize;
            let t = r.tensor()?;
            velocity.insert((NodeId::new(level, index), slot), t);
        }
        Some(SgdState { velocity })
    } else {
        None
    };
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last record",
            body.len() - r.pos
        )));
    }
    let store = ParamStore::from_parts(spec, nodes, param_version)
        .map_err(|e| Error::Checkpoint(format!("inconsistent store: {e}")))?;
    Ok(Checkpoint { store, opt_state })
}

/// Load and require the checkpoint's architecture to equal `expected`.
pub fn load_checkpoint_expecting(path: &Path, expected: &TreeSpec) -> Result<Checkpoint> {
    let ckpt = load_checkpoint(path)?;
    if ckpt.store.spec() != expected {
        return Err(Error::Checkpoint(
            "architecture mismatch: checkpoint was written for a different tree".into(),
        ));
    }
    Ok(ckpt)
}
