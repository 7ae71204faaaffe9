//! Versioned binary checkpoints and standalone feature-memory blobs.
//!
//! All integers and floats are little endian; the byte layout is documented
//! in `docs/FORMATS.md`. Both containers end with an FNV-1a 64 checksum of
//! every preceding byte.

use std::path::Path;

use crate::dual_lora::{AdapterSet, FeatureMemory, LayerAdapters, LayerMemory};
use crate::error::{Error, Result};
use crate::linalg::{Basis, Mat};
use crate::task_identity::SignatureSet;
use crate::trainer::{CLConfig, Learner};
use crate::vit::{Backbone, ClassifierBank, EncoderConfig, Head, VitMini};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DLCK";
pub const MEMORY_MAGIC: [u8; 4] = *b"DLFM";
pub const FORMAT_VERSION: u32 = 1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }

    fn u32(&mut self, v: usize) {
        self.0.extend((v as u32).to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend(v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend(v.to_le_bytes());
    }

    fn bytes(&mut self, b: &[u8]) {
        self.u32(b.len());
        self.0.extend_from_slice(b);
    }

    fn mat(&mut self, m: &Mat) {
        self.u32(m.rows());
        self.u32(m.cols());
        for &v in m.as_slice() {
            self.f64(v);
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let sum = fnv1a(&self.0);
        self.u64(sum);
        self.0
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn open(buf: &'a [u8], magic: [u8; 4], what: &'static str) -> Result<Self> {
        let err = |d: &str| Error::Format { what, detail: d.into() };
        if buf.len() < 16 {
            return Err(err("file too short"));
        }
        if buf[..4] != magic {
            return Err(err("bad magic bytes"));
        }
        let (body, tail) = buf.split_at(buf.len() - 8);
        let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
        if fnv1a(body) != stored {
            return Err(err("checksum mismatch"));
        }
        let mut r = Reader { buf: body, pos: 4, what };
        let version = r.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(err(&format!("unsupported version {version}")));
        }
        Ok(r)
    }

    fn err(&self, detail: &str) -> Error {
        Error::Format { what: self.what, detail: format!("{detail} at byte {}", self.pos) }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.u32()?;
        self.take(n)
    }

    fn mat(&mut self) -> Result<Mat> {
        let (rows, cols) = (self.u32()?, self.u32()?);
        let n = rows.checked_mul(cols).ok_or_else(|| self.err("matrix size overflow"))?;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("matrix size overflow"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect();
        Mat::from_vec(rows, cols, data).map_err(|e| self.err(&e.to_string()))
    }

    fn shaped(&mut self, rows: usize, cols: usize) -> Result<Mat> {
        let m = self.mat()?;
        if m.shape() != (rows, cols) {
            return Err(self.err(&format!("expected {rows}x{cols}, found {}x{}", m.rows(), m.cols())));
        }
        Ok(m)
    }

    fn basis(&mut self, d: usize) -> Result<Basis> {
        let m = self.mat()?;
        if m.cols() != d {
            return Err(self.err("basis dimension"));
        }
        Basis::from_rows(m).map_err(|e| self.err(&e.to_string()))
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.err("trailing bytes"));
        }
        Ok(())
    }
}

fn write_memory(w: &mut Writer, mem: &FeatureMemory) {
    w.u32(mem.layers.len());
    for l in &mem.layers {
        w.mat(l.phi_k.vectors());
        w.mat(l.phi_v.vectors());
        w.u32(l.psi.len());
        for p in &l.psi {
            w.mat(p.vectors());
        }
    }
}

fn read_memory(r: &mut Reader<'_>, d: usize) -> Result<FeatureMemory> {
    let n = r.u32()?;
    let mut layers = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let phi_k = r.basis(d)?;
        let phi_v = r.basis(d)?;
        let count = r.u32()?;
        let mut psi = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            psi.push(r.basis(d)?);
        }
        layers.push(LayerMemory { phi_k, phi_v, psi });
    }
    Ok(FeatureMemory { layers })
}

/// Serialises a learner: encoder, training config, weights, adapters, heads,
/// memory and signatures.
pub fn encode(learner: &Learner) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend(CHECKPOINT_MAGIC);
    w.u32(FORMAT_VERSION as usize);
    let model = &learner.model;
    let c = &model.config;
    for v in [c.layers, c.embed_dim, c.image_side, c.patch_side, c.channels, c.ffn_ratio] {
        w.u32(v);
    }
    w.bytes(serde_json::to_string(&learner.config).expect("config serialises").as_bytes());
    w.u8(model.backbone.is_frozen() as u8);
    for t in model.backbone.tensors() {
        w.mat(t);
    }
    let a = &model.adapters;
    w.u32(a.rank());
    w.u8(a.residual_enabled() as u8);
    for l in &a.layers {
        for m in [&l.a_k, &l.b_k, &l.a_v, &l.b_v, &l.a_r, &l.b_r, &l.merged_k, &l.merged_v, &l.merged_r] {
            w.mat(m);
        }
    }
    w.u32(model.heads.len());
    for h in &model.heads.heads {
        w.mat(&h.weight);
        w.mat(&h.bias);
    }
    write_memory(&mut w, &learner.memory);
    w.f64(learner.signatures.lambda);
    w.u32(learner.signatures.len());
    for s in learner.signatures.iter() {
        w.u32(s.len());
        for &v in s {
            w.f64(v);
        }
    }
    w.finish()
}

pub fn decode(buf: &[u8]) -> Result<Learner> {
    let mut r = Reader::open(buf, CHECKPOINT_MAGIC, "checkpoint")?;
    let mut dims = [0usize; 6];
    for v in &mut dims {
        *v = r.u32()?;
    }
    let [layers, embed_dim, image_side, patch_side, channels, ffn_ratio] = dims;
    let config = EncoderConfig { layers, embed_dim, image_side, patch_side, channels, ffn_ratio };
    config.validate().map_err(|e| r.err(&e.to_string()))?;
    let cl: CLConfig = serde_json::from_slice(r.bytes()?).map_err(|e| r.err(&e.to_string()))?;

    let frozen = r.u8()? != 0;
    let mut backbone = Backbone::init(&config, &mut crate::rng::Stream::new(0, 0));
    for t in backbone.tensors_mut() {
        let (rows, cols) = t.shape();
        *t = r.shaped(rows, cols)?;
    }
    if frozen {
        backbone.freeze();
    }

    let d = embed_dim;
    let rank = r.u32()?;
    let residual = r.u8()? != 0;
    let mut adapters = AdapterSet::new(layers, d, rank, residual).map_err(|e| r.err(&e.to_string()))?;
    for l in &mut adapters.layers {
        let LayerAdapters { a_k, b_k, a_v, b_v, a_r, b_r, merged_k, merged_v, merged_r } = l;
        for (m, (rows, cols)) in [
            (a_k, (rank, d)),
            (b_k, (d, rank)),
            (a_v, (rank, d)),
            (b_v, (d, rank)),
            (a_r, (rank, d)),
            (b_r, (d, rank)),
            (merged_k, (d, d)),
            (merged_v, (d, d)),
            (merged_r, (d, d)),
        ] {
            *m = r.shaped(rows, cols)?;
        }
    }

    let mut heads = ClassifierBank::default();
    for _ in 0..r.u32()? {
        let weight = r.mat()?;
        if weight.rows() != d {
            return Err(r.err("head input width"));
        }
        let bias = r.shaped(1, weight.cols())?;
        heads.push(Head { weight, bias });
    }
    let memory = read_memory(&mut r, d)?;
    if memory.layers.len() != layers {
        return Err(r.err("memory layer count"));
    }
    let mut signatures = SignatureSet::new(r.f64()?);
    for _ in 0..r.u32()? {
        let n = r.u32()?;
        signatures.push((0..n).map(|_| r.f64()).collect::<Result<_>>()?);
    }
    r.done()?;
    let model = VitMini { config, backbone, adapters, heads };
    Ok(Learner::from_parts(model, memory, signatures, cl))
}

pub fn save(learner: &Learner, path: &Path) -> Result<()> {
    std::fs::write(path, encode(learner))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Learner> {
    decode(&std::fs::read(path)?)
}

/// Standalone blob holding only the feature memory.
pub fn encode_memory(mem: &FeatureMemory) -> Vec<u8> {
    let mut w = Writer::default();
    w.0.extend(MEMORY_MAGIC);
    w.u32(FORMAT_VERSION as usize);
    w.u32(mem.layers.first().map_or(0, LayerMemory::dim));
    write_memory(&mut w, mem);
    w.finish()
}

pub fn decode_memory(buf: &[u8]) -> Result<FeatureMemory> {
    let mut r = Reader::open(buf, MEMORY_MAGIC, "feature memory")?;
    let d = r.u32()?;
    let mem = read_memory(&mut r, d)?;
    r.done()?;
    Ok(mem)
}
