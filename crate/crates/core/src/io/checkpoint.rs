//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "PRSVLCKP" | version u32
//! config: u32 length, UTF-8 key = value text
//! graph:  u32 node count, u32 root, then per node in topological order a
//!         u32 length and a record: u32 id, u8 kind, kind fields, u32 child
//!         count, u32 child ids
//! params, velocity: per node in topological order a u8 tag (0 none,
//!         1 affine, 2 mix); affine is u64 rows, u64 cols, f64 weights
//!         row-major, f64 biases; mix is u64 length, f64 values
//! epoch u64 | rng seed [u8; 32], stream u64, word position u128
//! ```

use std::path::Path;

use super::config::{format_config, parse_config};
use super::read_file;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::netgraph::{AggregateMode, Graph, NodeId, NodeKind, NodeParams, NodeSpec, Params};
use crate::scalar::Real;
use crate::trainer::{Checkpoint, RngState};

pub const MAGIC: &[u8; 8] = b"PRSVLCKP";
pub const VERSION: u32 = 1;

/// Largest dimension accepted from a file; keeps hostile headers from
/// driving allocations or size arithmetic out of range.
const MAX_DIM: u64 = 1 << 20;
const MAX_HALF_WIDTH: u64 = 1 << 8;

const WHAT: &str = "checkpoint";

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn floats<T: Real>(&mut self, v: &[T]) {
        v.iter().for_each(|x| self.f64(x.as_f64()));
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::format(WHAT, self.pos as u64, message)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes, {} left", self.bytes.len() - self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
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
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().expect("16 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn dim(&mut self, limit: u64) -> Result<usize> {
        let at = self.pos;
        let v = self.u64()?;
        if v > limit {
            return Err(Error::format(WHAT, at as u64, format!("dimension {v} exceeds {limit}")));
        }
        Ok(v as usize)
    }

    fn floats<T: Real>(&mut self, n: usize) -> Result<Vec<T>> {
        let bytes = n
            .checked_mul(8)
            .filter(|&b| b <= self.bytes.len() - self.pos)
            .ok_or_else(|| self.err(format!("truncated: {n} floats do not fit in the remaining bytes")))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
            .collect())
    }
}

fn encode_kind(w: &mut Writer, kind: &NodeKind) {
    match *kind {
        NodeKind::Input { dim } => {
            w.u8(0);
            w.u64(dim as u64);
        }
        NodeKind::Dense { d_in, d_out } => {
            w.u8(1);
            w.u64(d_in as u64);
            w.u64(d_out as u64);
        }
        NodeKind::Conv1d { length, c_in, c_out, half_width, rescale } => {
            w.u8(2);
            for v in [length, c_in, c_out, half_width] {
                w.u64(v as u64);
            }
            w.u8(rescale as u8);
        }
        NodeKind::Conv2d { height, width, c_in, c_out, half_h, half_w, rescale } => {
            w.u8(3);
            for v in [height, width, c_in, c_out, half_h, half_w] {
                w.u64(v as u64);
            }
            w.u8(rescale as u8);
        }
        NodeKind::Relu { dim } => {
            w.u8(4);
            w.u64(dim as u64);
        }
        NodeKind::Dropout { dim, rate } => {
            w.u8(5);
            w.u64(dim as u64);
            w.f64(rate);
        }
        NodeKind::Aggregate { dim, mode } => {
            w.u8(6);
            w.u64(dim as u64);
            w.u8(match mode {
                AggregateMode::Sum => 0,
                AggregateMode::Convex => 1,
            });
        }
    }
}

fn decode_bool(r: &mut Reader) -> Result<bool> {
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        b => Err(Error::format(WHAT, r.pos as u64 - 1, format!("invalid flag byte {b}"))),
    }
}

fn decode_kind(r: &mut Reader) -> Result<NodeKind> {
    let at = r.pos;
    Ok(match r.u8()? {
        0 => NodeKind::Input { dim: r.dim(MAX_DIM)? },
        1 => NodeKind::Dense { d_in: r.dim(MAX_DIM)?, d_out: r.dim(MAX_DIM)? },
        2 => NodeKind::Conv1d {
            length: r.dim(MAX_DIM)?,
            c_in: r.dim(MAX_DIM)?,
            c_out: r.dim(MAX_DIM)?,
            half_width: r.dim(MAX_HALF_WIDTH)?,
            rescale: decode_bool(r)?,
        },
        3 => NodeKind::Conv2d {
            height: r.dim(MAX_DIM)?,
            width: r.dim(MAX_DIM)?,
            c_in: r.dim(MAX_DIM)?,
            c_out: r.dim(MAX_DIM)?,
            half_h: r.dim(MAX_HALF_WIDTH)?,
            half_w: r.dim(MAX_HALF_WIDTH)?,
            rescale: decode_bool(r)?,
        },
        4 => NodeKind::Relu { dim: r.dim(MAX_DIM)? },
        5 => NodeKind::Dropout { dim: r.dim(MAX_DIM)?, rate: r.f64()? },
        6 => NodeKind::Aggregate {
            dim: r.dim(MAX_DIM)?,
            mode: match r.u8()? {
                0 => AggregateMode::Sum,
                1 => AggregateMode::Convex,
                b => return Err(Error::format(WHAT, r.pos as u64 - 1, format!("invalid aggregation mode {b}"))),
            },
        },
        t => return Err(Error::format(WHAT, at as u64, format!("unknown node kind {t}"))),
    })
}

fn encode_params<T: Real>(w: &mut Writer, graph: &Graph, params: &Params<T>) {
    for &id in graph.topo_order() {
        match params.get(id) {
            NodeParams::None => w.u8(0),
            NodeParams::Affine { weight, bias } => {
                w.u8(1);
                w.u64(weight.rows() as u64);
                w.u64(weight.cols() as u64);
                w.floats(weight.as_slice());
                w.floats(bias);
            }
            NodeParams::Mix { alpha } => {
                w.u8(2);
                w.u64(alpha.len() as u64);
                w.floats(alpha);
            }
        }
    }
}

fn decode_params<T: Real>(r: &mut Reader, graph: &Graph) -> Result<Params<T>> {
    let mut nodes: Vec<Option<NodeParams<T>>> = vec![None; graph.len()];
    for &id in graph.topo_order() {
        let at = r.pos;
        let p = match r.u8()? {
            0 => NodeParams::None,
            1 => {
                let (rows, cols) = (r.dim(MAX_DIM * MAX_DIM)?, r.dim(MAX_DIM * MAX_DIM)?);
                let n = rows
                    .checked_mul(cols)
                    .ok_or_else(|| Error::format(WHAT, at as u64, "weight size overflows"))?;
                let weight = Matrix::from_vec(rows, cols, r.floats(n)?)?;
                NodeParams::Affine { weight, bias: r.floats(rows)? }
            }
            2 => {
                let k = r.dim(MAX_DIM)?;
                NodeParams::Mix { alpha: r.floats(k)? }
            }
            t => return Err(Error::format(WHAT, at as u64, format!("unknown parameter tag {t}"))),
        };
        nodes[id.0] = Some(p);
    }
    let params = Params::from_nodes(nodes.into_iter().map(|p| p.expect("every node visited")).collect());
    params
        .check(graph)
        .map_err(|e| Error::format(WHAT, r.pos as u64, format!("parameters do not match the graph: {e}")))?;
    Ok(params)
}

pub fn encode_checkpoint<T: Real>(ck: &Checkpoint<T>) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    let cfg = format_config(&ck.config);
    w.u32(cfg.len());
    w.0.extend_from_slice(cfg.as_bytes());

    w.u32(ck.graph.len());
    w.u32(ck.graph.root().0);
    for &id in ck.graph.topo_order() {
        let spec = ck.graph.node(id);
        let mut rec = Writer(Vec::new());
        rec.u32(id.0);
        encode_kind(&mut rec, &spec.kind);
        rec.u32(spec.children.len());
        spec.children.iter().for_each(|c| rec.u32(c.0));
        w.u32(rec.0.len());
        w.0.extend_from_slice(&rec.0);
    }
    encode_params(&mut w, &ck.graph, &ck.params);
    encode_params(&mut w, &ck.graph, &ck.velocity);
    w.u64(ck.epoch as u64);
    w.0.extend_from_slice(&ck.rng.seed);
    w.u64(ck.rng.stream);
    w.0.extend_from_slice(&ck.rng.word_pos.to_le_bytes());
    w.0
}

pub fn decode_checkpoint<T: Real>(bytes: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len()).ok() != Some(&MAGIC[..]) {
        return Err(Error::Incompatible("missing checkpoint magic; not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Incompatible(format!("format version {version}, this build reads {VERSION}")));
    }
    let len = r.u32()? as usize;
    let at = r.pos;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(WHAT, at as u64, "config is not UTF-8"))?;
    let config = parse_config(text).map_err(|e| Error::format(WHAT, at as u64, e.to_string()))?;

    let count = r.u32()? as usize;
    let root = r.u32()? as usize;
    if count as u64 > MAX_DIM || count > r.bytes.len() {
        return Err(r.err(format!("implausible node count {count}")));
    }
    let mut nodes: Vec<Option<NodeSpec>> = vec![None; count];
    for _ in 0..count {
        let len = r.u32()? as usize;
        let start = r.pos;
        let mut rec = Reader { bytes: &r.bytes[..start + len.min(r.bytes.len() - start)], pos: start };
        let id = rec.u32()? as usize;
        let kind = decode_kind(&mut rec)?;
        let k = rec.u32()? as usize;
        if k > count {
            return Err(rec.err(format!("{k} children in a graph of {count} nodes")));
        }
        let children = (0..k).map(|_| rec.u32().map(|c| NodeId(c as usize))).collect::<Result<Vec<_>>>()?;
        if rec.pos != start + len {
            return Err(rec.err(format!("node record length {len} does not match its contents")));
        }
        r.pos = rec.pos;
        match nodes.get_mut(id) {
            Some(slot @ None) => *slot = Some(NodeSpec { id: NodeId(id), kind, children }),
            _ => return Err(Error::format(WHAT, start as u64, format!("node id {id} repeated or out of range"))),
        }
    }
    let nodes: Vec<NodeSpec> = nodes.into_iter().map(|n| n.expect("count records, distinct ids")).collect();
    let graph = Graph::new(nodes, NodeId(root)).map_err(|e| r.err(e.to_string()))?;

    let params = decode_params(&mut r, &graph)?;
    let velocity = decode_params(&mut r, &graph)?;
    let epoch = r.u64()? as usize;
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = r.u128()?;
    if r.pos != bytes.len() {
        return Err(r.err(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        graph,
        params,
        velocity,
        config,
        epoch,
        rng: RngState { seed, stream, word_pos },
    })
}

pub fn save_checkpoint<T: Real>(ck: &Checkpoint<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint; on any error nothing is returned.
pub fn load_checkpoint<T: Real>(path: &Path) -> Result<Checkpoint<T>> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netgraph::{forward, models, GraphBuilder, Mode};
    use crate::trainer::{TrainConfig, Trainer};
    use crate::Batch;
    use proptest::prelude::{any, prop, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn trained() -> Checkpoint<f64> {
        let mut b = GraphBuilder::new(4 * 4 * 2);
        let conv = b.conv2d(b.input(), 4, 4, 2, 3, 1, 1, true);
        let r = b.relu(conv);
        let d = b.dropout(r, 0.25);
        let h = b.dense(d, 48);
        let r2 = b.relu(h);
        let h2 = b.dense(r2, 48);
        let agg = b.aggregate(&[r2, h2], AggregateMode::Convex);
        let o = b.dense(agg, 3);
        let g = b.build(o).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            hidden: vec![4],
            beta: 0.01,
            ..TrainConfig::mlp_defaults()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Matrix::<f64>::gaussian(24, 32, &mut rng);
        let data = Batch::new(x, (0..24).map(|i| i % 3).collect()).unwrap();
        let mut t = Trainer::new(g, cfg).unwrap();
        t.train(&data, None, |_| {}).unwrap();
        t.checkpoint()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let ck = trained();
        let bytes = encode_checkpoint(&ck);
        let back: Checkpoint<f64> = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(encode_checkpoint(&back), bytes);

        let x = Matrix::<f64>::gaussian(5, 32, &mut ChaCha8Rng::seed_from_u64(1));
        let a = forward(&ck.graph, &ck.params, &x, Mode::Eval).unwrap();
        let b = forward(&back.graph, &back.params, &x, Mode::Eval).unwrap();
        assert_eq!(a.logits(), b.logits());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ck, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), bytes);
        assert_eq!(load_checkpoint::<f64>(&path).unwrap(), ck);
    }

    #[test]
    fn rejects_damage() {
        let bytes = encode_checkpoint(&trained());
        for cut in [0, 5, 12, 100, bytes.len() / 2, bytes.len() - 1] {
            assert!(decode_checkpoint::<f64>(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint::<f64>(&long), Err(Error::Format { .. })));
        let mut wrong = bytes.clone();
        wrong[8] = 2;
        assert!(matches!(decode_checkpoint::<f64>(&wrong), Err(Error::Incompatible(_))));
        let mut magic = bytes;
        magic[0] = b'X';
        assert!(matches!(decode_checkpoint::<f64>(&magic), Err(Error::Incompatible(_))));
    }

    #[test]
    fn f32_models_widen_exactly() {
        let g = models::mlp(3, &[4], 2, 0.0).unwrap();
        let t = Trainer::<f32>::new(g, TrainConfig { hidden: vec![4], ..Default::default() }).unwrap();
        let ck = t.checkpoint();
        let back: Checkpoint<f32> = decode_checkpoint(&encode_checkpoint(&ck)).unwrap();
        assert_eq!(back, ck);
    }

    proptest! {
        #[test]
        fn arbitrary_bytes_never_panic(tail in prop::collection::vec(any::<u8>(), 0..256)) {
            let mut bytes = MAGIC.to_vec();
            bytes.extend_from_slice(&VERSION.to_le_bytes());
            bytes.extend_from_slice(&tail);
            let _ = decode_checkpoint::<f64>(&bytes);
            let _ = decode_checkpoint::<f64>(&tail);
        }

        #[test]
        fn corrupted_checkpoints_never_panic(pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
            let mut bytes = encode_checkpoint(&small());
            let i = pos.index(bytes.len());
            bytes[i] = byte;
            let _ = decode_checkpoint::<f64>(&bytes);
        }
    }

    fn small() -> Checkpoint<f64> {
        let g = models::residual_mlp(3, 4, 1, 2, AggregateMode::Convex, 0.1).unwrap();
        Trainer::<f64>::new(g, TrainConfig::default()).unwrap().checkpoint()
    }
}
