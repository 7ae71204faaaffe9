//! Miniature single-head vision transformer.
//!
//! Pre-norm blocks: `a = LN₁(x)`, attention `h = softmax(QKᵀ/√d)·V` with
//! `Q = a·W^q`, `K = a·(W^k + O^k)`, `V = a·(W^v + O^v) + residual`, output
//! projection `W^o`, then a GELU feed-forward of width `ffn_ratio·d`. The
//! classifier reads the final-norm class token (row 0) of the last block.
//!
//! Gradients are hand-derived per operation. Only the matrix products of the
//! block inventory go through the instrumented [`matmul`]; embeddings, heads,
//! taps and dynamic-memory algebra use uncounted kernels.

mod layers;

pub use layers::LayerNorm;

use serde::{Deserialize, Serialize};

use crate::dual_lora::{AdapterSet, LayerAdapterGrads, LayerAdapters, LayerContext, LayerMemory};
use crate::error::{dim_err, Error, Result};
use crate::linalg::{gemm, matmul, matmul_nt, matmul_tn, softmax_in_place, vecmat, Mat};
use crate::rng::Stream;
use layers::{gelu, gelu_grad, LnCache};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub image_side: usize,
    pub patch_side: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_ffn_ratio")]
    pub ffn_ratio: usize,
}

fn default_channels() -> usize {
    1
}

fn default_ffn_ratio() -> usize {
    4
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 4 {
            return Err(Error::Config(format!("embed_dim {} < 4", self.embed_dim)));
        }
        if self.layers == 0 {
            return Err(Error::Config("at least one layer is required".into()));
        }
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} is not a multiple of patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.channels == 0 || self.ffn_ratio == 0 {
            return Err(Error::Config("channels and ffn_ratio must be positive".into()));
        }
        if self.seq_len() < 2 {
            return Err(Error::Config("sequence needs a class token and a patch".into()));
        }
        Ok(())
    }

    pub fn patches(&self) -> usize {
        let per_side = self.image_side / self.patch_side;
        per_side * per_side
    }

    /// Patches plus the class token.
    pub fn seq_len(&self) -> usize {
        self.patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn pixels(&self) -> usize {
        self.image_side * self.image_side * self.channels
    }

    pub fn ffn_dim(&self) -> usize {
        self.ffn_ratio * self.embed_dim
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockWeights {
    pub ln1: LayerNorm,
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub ln2: LayerNorm,
    pub ffn_in: Mat,
    pub ffn_out: Mat,
}

impl BlockWeights {
    fn init(d: usize, ffn: usize, rng: &mut Stream) -> Self {
        let s = 1.0 / (d as f64).sqrt();
        Self {
            ln1: LayerNorm::new(d),
            wq: gaussian(d, d, s, rng),
            wk: gaussian(d, d, s, rng),
            wv: gaussian(d, d, s, rng),
            wo: gaussian(d, d, s, rng),
            ln2: LayerNorm::new(d),
            ffn_in: gaussian(d, ffn, s, rng),
            ffn_out: gaussian(ffn, d, 1.0 / (ffn as f64).sqrt(), rng),
        }
    }

    fn tensors_mut(&mut self) -> [&mut Mat; 10] {
        [
            &mut self.ln1.gamma,
            &mut self.ln1.beta,
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.ln2.gamma,
            &mut self.ln2.beta,
            &mut self.ffn_in,
            &mut self.ffn_out,
        ]
    }
}

pub(crate) fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Stream) -> Mat {
    Mat::from_raw(rows, cols, (0..rows * cols).map(|_| std * rng.normal()).collect())
}

/// Pretrained weights. Once frozen, backward passes produce no gradient for
/// any of these tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub patch_proj: Mat,
    pub cls_token: Mat,
    pub pos_embed: Mat,
    pub blocks: Vec<BlockWeights>,
    pub final_norm: LayerNorm,
    frozen: bool,
}

impl Backbone {
    pub fn init(config: &EncoderConfig, rng: &mut Stream) -> Self {
        let d = config.embed_dim;
        Self {
            patch_proj: gaussian(config.patch_dim(), d, 1.0 / (config.patch_dim() as f64).sqrt(), rng),
            cls_token: gaussian(1, d, 1.0, rng),
            pos_embed: gaussian(config.seq_len(), d, 0.5, rng),
            blocks: (0..config.layers).map(|_| BlockWeights::init(d, config.ffn_dim(), rng)).collect(),
            final_norm: LayerNorm::new(d),
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Every tensor in a fixed order (embeddings, blocks, final norm).
    pub fn tensors(&self) -> Vec<&Mat> {
        let mut out = vec![&self.patch_proj, &self.cls_token, &self.pos_embed];
        for b in &self.blocks {
            out.extend([
                &b.ln1.gamma, &b.ln1.beta, &b.wq, &b.wk, &b.wv, &b.wo, &b.ln2.gamma, &b.ln2.beta,
                &b.ffn_in, &b.ffn_out,
            ]);
        }
        out.extend([&self.final_norm.gamma, &self.final_norm.beta]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out = vec![&mut self.patch_proj, &mut self.cls_token, &mut self.pos_embed];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out.push(&mut self.final_norm.gamma);
        out.push(&mut self.final_norm.beta);
        out
    }

    /// FNV-1a over the bit patterns of every tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in t.as_slice() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// One fully-connected head `f_t: R^d → R^{C_t}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weight: Mat,
    pub bias: Mat,
}

impl Head {
    pub fn zeros(d: usize, classes: usize) -> Self {
        Self { weight: Mat::zeros(d, classes), bias: Mat::zeros(1, classes) }
    }

    pub fn classes(&self) -> usize {
        self.weight.cols()
    }
}

/// Expanding list of task heads; the logits of head `t` occupy a contiguous
/// slice of the concatenated output.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierBank {
    pub heads: Vec<Head>,
}

impl ClassifierBank {
    pub fn push(&mut self, head: Head) {
        self.heads.push(head);
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(Head::classes).sum()
    }

    pub fn range(&self, t: usize) -> std::ops::Range<usize> {
        let start: usize = self.heads[..t].iter().map(Head::classes).sum();
        start..start + self.heads[t].classes()
    }

    pub fn ranges(&self) -> Vec<std::ops::Range<usize>> {
        (0..self.len()).map(|t| self.range(t)).collect()
    }
}

/// How the value stream treats the residual adapter.
#[derive(Clone, Copy, Debug)]
pub enum ForwardMode<'a> {
    /// Raw `a·R`, intermediates recorded for [`VitMini::backward`].
    Train,
    /// Raw `a·R`.
    Infer,
    /// `a·ΩᵀΩ·R` with Ω rebuilt per sample and layer from the memory.
    InferDm(&'a crate::dual_lora::FeatureMemory),
}

/// Per-layer taps for feature collection.
#[derive(Clone, Debug)]
pub struct LayerTap {
    /// `Q₁`, first row of the query matrix.
    pub q_class: Vec<f64>,
    /// `S₁`, first row of `softmax(QKᵀ/√d)·a`.
    pub s_class: Vec<f64>,
    pub a_in: Mat,
    /// Block output.
    pub h_out: Mat,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// Concatenated logits of every head.
    pub logits: Vec<f64>,
    /// `S₁` of every layer; the last entry feeds task identification.
    pub s_class: Vec<Vec<f64>>,
    /// Class token of the last block output.
    pub class_token: Vec<f64>,
    pub taps: Option<Vec<LayerTap>>,
    /// Relevance weights `ω_τ` per layer, present in dynamic-memory mode.
    pub omegas: Option<Vec<Vec<f64>>>,
    cache: Option<ForwardCache>,
}

impl ForwardOutput {
    pub fn has_cache(&self) -> bool {
        self.cache.is_some()
    }
}

#[derive(Clone, Debug)]
struct ForwardCache {
    patches: Mat,
    blocks: Vec<BlockCache>,
    final_ln: LnCache,
    z: Mat,
}

#[derive(Clone, Debug)]
struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Mat,
    ak: Option<Mat>,
    av: Option<Mat>,
    ar: Option<Mat>,
    h: Mat,
    s_class: Vec<f64>,
    omegas: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
struct BlockCache {
    a: Mat,
    ln1: LnCache,
    attn: AttnCache,
    b: Mat,
    ln2: LnCache,
    u: Mat,
    g: Mat,
}

/// Weights as seen by one block's attention: frozen matrices plus the
/// accumulated adapter updates of finished tasks.
struct EffectiveWeights {
    wk: Mat,
    wv: Mat,
    residual: Option<Mat>,
}

enum ResidualPath<'a> {
    None,
    Raw,
    Dynamic(&'a LayerMemory, Mat),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitMini {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub adapters: AdapterSet,
    pub heads: ClassifierBank,
}

#[derive(Clone, Debug)]
pub struct HeadGrads {
    pub weight: Mat,
    pub bias: Mat,
}

#[derive(Clone, Debug)]
pub struct BackboneGrads {
    tensors: Vec<Mat>,
}

impl BackboneGrads {
    fn zeros_like(b: &Backbone) -> Self {
        Self { tensors: b.tensors().iter().map(|t| Mat::zeros(t.rows(), t.cols())).collect() }
    }

    pub fn tensors(&self) -> &[Mat] {
        &self.tensors
    }
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub adapters: Vec<LayerAdapterGrads>,
    pub heads: Vec<HeadGrads>,
    /// Absent whenever the backbone is frozen.
    pub backbone: Option<BackboneGrads>,
}

impl Gradients {
    pub fn zeros_like(model: &VitMini) -> Self {
        Self {
            adapters: model.adapters.layers.iter().map(LayerAdapterGrads::zeros_like).collect(),
            heads: model
                .heads
                .heads
                .iter()
                .map(|h| HeadGrads {
                    weight: Mat::zeros(h.weight.rows(), h.weight.cols()),
                    bias: Mat::zeros(1, h.classes()),
                })
                .collect(),
            backbone: (!model.backbone.frozen).then(|| BackboneGrads::zeros_like(&model.backbone)),
        }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.adapters.iter_mut().zip(&other.adapters) {
            a.accumulate(b);
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.weight.axpy(1.0, &b.weight);
            a.bias.axpy(1.0, &b.bias);
        }
        if let (Some(a), Some(b)) = (self.backbone.as_mut(), other.backbone.as_ref()) {
            for (x, y) in a.tensors.iter_mut().zip(&b.tensors) {
                x.axpy(1.0, y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.adapters {
            a.scale(s);
        }
        for h in &mut self.heads {
            h.weight = h.weight.scale(s);
            h.bias = h.bias.scale(s);
        }
        if let Some(b) = self.backbone.as_mut() {
            for t in &mut b.tensors {
                *t = t.scale(s);
            }
        }
    }
}

impl VitMini {
    /// Fresh model with randomly initialised (unfrozen) backbone, zero-rank
    /// adapters and no heads.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::new(seed, crate::rng::STREAM_BACKBONE);
        let backbone = Backbone::init(&config, &mut rng);
        let adapters = AdapterSet::new(config.layers, config.embed_dim, 0, false)?;
        Ok(Self { config, backbone, adapters, heads: ClassifierBank::default() })
    }

    pub fn embed_dim(&self) -> usize {
        self.config.embed_dim
    }

    /// Splits an image (channel-major, row-major pixels) into flattened
    /// patches, one per row.
    pub fn patchify(&self, image: &[f64]) -> Result<Mat> {
        let c = &self.config;
        if image.len() != c.pixels() {
            return dim_err(format!("image has {} pixels, expected {}", image.len(), c.pixels()));
        }
        let per_side = c.image_side / c.patch_side;
        let p = c.patch_side;
        let mut out = Mat::zeros(c.patches(), c.patch_dim());
        for pr in 0..per_side {
            for pc in 0..per_side {
                let row = out.row_mut(pr * per_side + pc);
                let mut k = 0;
                for ch in 0..c.channels {
                    for i in 0..p {
                        for j in 0..p {
                            let y = pr * p + i;
                            let x = pc * p + j;
                            row[k] = image[ch * c.image_side * c.image_side + y * c.image_side + x];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn embed(&self, patches: &Mat) -> Mat {
        let d = self.config.embed_dim;
        let proj = gemm(patches, &self.backbone.patch_proj);
        let mut x = Mat::zeros(self.config.seq_len(), d);
        for c in 0..d {
            x[(0, c)] = self.backbone.cls_token[(0, c)] + self.backbone.pos_embed[(0, c)];
        }
        for r in 0..patches.rows() {
            for c in 0..d {
                x[(r + 1, c)] = proj[(r, c)] + self.backbone.pos_embed[(r + 1, c)];
            }
        }
        x
    }

    fn effective(&self, layer: usize, with_raw_residual: bool) -> EffectiveWeights {
        let blk = &self.backbone.blocks[layer];
        let ad = &self.adapters.layers[layer];
        let wk = blk.wk.add(&ad.merged_k).expect("adapter shape");
        let mut wv = blk.wv.add(&ad.merged_v).expect("adapter shape");
        let residual = if self.adapters.residual_enabled() {
            if with_raw_residual {
                wv.axpy(1.0, &ad.merged_r);
                None
            } else {
                Some(ad.residual_product())
            }
        } else {
            None
        };
        EffectiveWeights { wk, wv, residual }
    }

    pub fn forward(&self, image: &[f64], mode: ForwardMode<'_>) -> Result<ForwardOutput> {
        self.run(image, mode, false)
    }

    /// Forward pass that also records [`LayerTap`]s.
    pub fn forward_tapped(&self, image: &[f64], mode: ForwardMode<'_>) -> Result<ForwardOutput> {
        self.run(image, mode, true)
    }

    fn run(&self, image: &[f64], mode: ForwardMode<'_>, with_taps: bool) -> Result<ForwardOutput> {
        if self.heads.is_empty() {
            return Err(Error::State("classifier bank is empty".into()));
        }
        let record = matches!(mode, ForwardMode::Train);
        let patches = self.patchify(image)?;
        let mut x = self.embed(&patches);
        let mut blocks = Vec::with_capacity(self.config.layers);
        let mut taps = with_taps.then(Vec::new);
        let mut s_class = Vec::with_capacity(self.config.layers);
        let mut omegas = matches!(mode, ForwardMode::InferDm(_)).then(Vec::new);

        for l in 0..self.config.layers {
            let dm = match mode {
                ForwardMode::InferDm(mem) => Some(mem.layer(l)?),
                _ => None,
            };
            let (x_next, cache) = self.block_forward(l, &x, dm)?;
            if !x_next.all_finite() {
                return Err(Error::Numeric { layer: l, detail: "block output".into() });
            }
            s_class.push(cache.attn.s_class.clone());
            if let (Some(o), Some(w)) = (omegas.as_mut(), cache.attn.omegas.as_ref()) {
                o.push(w.clone());
            }
            if let Some(t) = taps.as_mut() {
                t.push(LayerTap {
                    q_class: cache.attn.q.row(0).to_vec(),
                    s_class: cache.attn.s_class.clone(),
                    a_in: cache.a.clone(),
                    h_out: x_next.clone(),
                });
            }
            if record {
                blocks.push(cache);
            }
            x = x_next;
        }

        let class_token = x.row(0).to_vec();
        let (z, final_ln) = self.backbone.final_norm.forward(&Mat::row_vector(&class_token));
        let mut logits = Vec::with_capacity(self.heads.total_classes());
        for head in &self.heads.heads {
            let out = gemm(&z, &head.weight);
            logits.extend(out.as_slice().iter().zip(head.bias.as_slice()).map(|(a, b)| a + b));
        }
        let cache = record.then(|| ForwardCache { patches, blocks, final_ln, z });
        Ok(ForwardOutput { logits, s_class, class_token, taps, omegas, cache })
    }

    fn block_forward(&self, l: usize, x: &Mat, dm: Option<&LayerMemory>) -> Result<(Mat, BlockCache)> {
        let blk = &self.backbone.blocks[l];
        let (a, ln1) = blk.ln1.forward(x);
        let eff = self.effective(l, dm.is_none());
        let residual = match (dm, eff.residual) {
            (Some(mem), Some(r)) => ResidualPath::Dynamic(mem, r),
            _ if dm.is_none() && self.adapters.residual_enabled() => ResidualPath::Raw,
            _ => ResidualPath::None,
        };
        let attn = attend(&a, &blk.wq, &eff.wk, &eff.wv, Some(&self.adapters.layers[l]), residual, l)?;
        let x1 = x.add(&matmul(&attn.h, &blk.wo)?)?;
        let (b, ln2) = blk.ln2.forward(&x1);
        let u = matmul(&b, &blk.ffn_in)?;
        let g = u.map(gelu);
        let x2 = x1.add(&matmul(&g, &blk.ffn_out)?)?;
        Ok((x2, BlockCache { a, ln1, attn, b, ln2, u, g }))
    }

    /// Backpropagates `dlogits` (length = all heads) through a training-mode
    /// forward. Adapter and head gradients are always produced; backbone
    /// gradients only while the backbone is unfrozen.
    pub fn backward(&self, fwd: &ForwardOutput, dlogits: &[f64]) -> Result<Gradients> {
        let cache = fwd
            .cache
            .as_ref()
            .ok_or_else(|| Error::State("backward requires a training-mode forward".into()))?;
        if dlogits.len() != self.heads.total_classes() {
            return dim_err(format!(
                "{} logit gradients for {} classes",
                dlogits.len(),
                self.heads.total_classes()
            ));
        }
        let d = self.config.embed_dim;
        let mut grads = Gradients::zeros_like(self);

        let mut dz = vec![0.0; d];
        for (t, head) in self.heads.heads.iter().enumerate() {
            let range = self.heads.range(t);
            let dl = &dlogits[range];
            if dl.iter().all(|&v| v == 0.0) {
                continue;
            }
            let hg = &mut grads.heads[t];
            for i in 0..d {
                let zi = cache.z[(0, i)];
                for (c, &g) in dl.iter().enumerate() {
                    hg.weight[(i, c)] += zi * g;
                    dz[i] += head.weight[(i, c)] * g;
                }
            }
            for (c, &g) in dl.iter().enumerate() {
                hg.bias[(0, c)] += g;
            }
        }

        let mut bb = grads.backbone.take();
        let n_blk = 10;
        let final_idx = 3 + n_blk * self.config.layers;
        let dclass = {
            let fin = bb.as_mut().map(|b| {
                let (lo, hi) = b.tensors.split_at_mut(final_idx + 1);
                (&mut lo[final_idx], &mut hi[0])
            });
            self.backbone.final_norm.backward(&cache.final_ln, &Mat::row_vector(&dz), fin)
        };
        let mut dx = Mat::zeros(self.config.seq_len(), d);
        dx.row_mut(0).copy_from_slice(dclass.row(0));

        for l in (0..self.config.layers).rev() {
            let slot = bb.as_mut().map(|b| &mut b.tensors[3 + n_blk * l..3 + n_blk * (l + 1)]);
            dx = self.block_backward(l, &cache.blocks[l], &dx, &mut grads.adapters[l], slot)?;
        }

        if let Some(b) = bb.as_mut() {
            // dx rows: class token and per-patch embeddings share pos_embed.
            b.tensors[2].axpy(1.0, &dx);
            for c in 0..d {
                b.tensors[1][(0, c)] += dx[(0, c)];
            }
            let dpatch = dx.select_rows(&(1..self.config.seq_len()).collect::<Vec<_>>());
            let dproj = gemm(&cache.patches.transpose(), &dpatch);
            b.tensors[0].axpy(1.0, &dproj);
        }
        grads.backbone = bb;
        Ok(grads)
    }

    fn block_backward(
        &self,
        l: usize,
        c: &BlockCache,
        dx2: &Mat,
        ag: &mut LayerAdapterGrads,
        mut bg: Option<&mut [Mat]>,
    ) -> Result<Mat> {
        let blk = &self.backbone.blocks[l];
        let ad = &self.adapters.layers[l];
        let eff = self.effective(l, true);

        // FFN
        let mut dx1 = dx2.clone();
        let dg = matmul_nt(dx2, &blk.ffn_out)?;
        let mut du = dg;
        for (v, &u) in du.as_mut_slice().iter_mut().zip(c.u.as_slice()) {
            *v *= gelu_grad(u);
        }
        if let Some(b) = bg.as_deref_mut() {
            b[9].axpy(1.0, &matmul_tn(&c.g, dx2)?);
            b[8].axpy(1.0, &matmul_tn(&c.b, &du)?);
        }
        let db = matmul_nt(&du, &blk.ffn_in)?;
        let ln2_grads = bg.as_deref_mut().map(|b| {
            let (lo, hi) = b.split_at_mut(7);
            (&mut lo[6], &mut hi[0])
        });
        dx1.add_assign(&blk.ln2.backward(&c.ln2, &db, ln2_grads))?;

        // output projection
        let mut dx = dx1.clone();
        let dh = matmul_nt(&dx1, &blk.wo)?;
        if let Some(b) = bg.as_deref_mut() {
            b[5].axpy(1.0, &matmul_tn(&c.attn.h, &dx1)?);
        }

        // attention
        let at = &c.attn;
        let dprobs = matmul_nt(&dh, &at.v)?;
        let dv = matmul_tn(&at.probs, &dh)?;
        let n = at.probs.rows();
        let scale = 1.0 / (self.config.embed_dim as f64).sqrt();
        let mut dscores = Mat::zeros(n, n);
        for i in 0..n {
            let p = at.probs.row(i);
            let dp = dprobs.row(i);
            let inner: f64 = p.iter().zip(dp).map(|(a, b)| a * b).sum();
            for j in 0..n {
                dscores[(i, j)] = p[j] * (dp[j] - inner) * scale;
            }
        }
        let dq = matmul(&dscores, &at.k)?;
        let dk = matmul_tn(&dscores, &at.q)?;

        let a = &c.a;
        let mut da = matmul_nt(&dq, &blk.wq)?;
        da.add_assign(&matmul_nt(&dk, &eff.wk)?)?;
        da.add_assign(&matmul_nt(&dv, &eff.wv)?)?;
        if let Some(b) = bg.as_deref_mut() {
            b[2].axpy(1.0, &matmul_tn(a, &dq)?);
            b[3].axpy(1.0, &matmul_tn(a, &dk)?);
            b[4].axpy(1.0, &matmul_tn(a, &dv)?);
        }
        if let Some(ak) = &at.ak {
            lora_backward(a, ak, &ad.a_k, &ad.b_k, &dk, &mut ag.a_k, &mut ag.b_k, &mut da)?;
        }
        if let Some(av) = &at.av {
            lora_backward(a, av, &ad.a_v, &ad.b_v, &dv, &mut ag.a_v, &mut ag.b_v, &mut da)?;
        }
        if let Some(ar) = &at.ar {
            lora_backward(a, ar, &ad.a_r, &ad.b_r, &dv, &mut ag.a_r, &mut ag.b_r, &mut da)?;
        }
        let ln1_grads = bg.as_deref_mut().map(|b| {
            let (lo, hi) = b.split_at_mut(1);
            (&mut lo[0], &mut hi[0])
        });
        dx.add_assign(&blk.ln1.backward(&c.ln1, &da, ln1_grads))?;
        Ok(dx)
    }
}

/// Gradients of `out = (a·B)·A` given `dout`, accumulated in place.
#[allow(clippy::too_many_arguments)]
fn lora_backward(
    a: &Mat,
    ab: &Mat,
    lora_a: &Mat,
    lora_b: &Mat,
    dout: &Mat,
    ga: &mut Mat,
    gb: &mut Mat,
    da: &mut Mat,
) -> Result<()> {
    ga.axpy(1.0, &matmul_tn(ab, dout)?);
    let dab = matmul_nt(dout, lora_a)?;
    gb.axpy(1.0, &matmul_tn(a, &dab)?);
    da.add_assign(&matmul_nt(&dab, lora_b)?)?;
    Ok(())
}

fn attend(
    a: &Mat,
    wq: &Mat,
    wk: &Mat,
    wv: &Mat,
    adapters: Option<&LayerAdapters>,
    residual: ResidualPath<'_>,
    layer: usize,
) -> Result<AttnCache> {
    let d = a.cols();
    if wq.shape() != (d, d) || wk.shape() != (d, d) || wv.shape() != (d, d) {
        return dim_err(format!("attention weights must be {d}x{d}"));
    }
    let live = adapters.filter(|ad| ad.rank() > 0);
    let q = matmul(a, wq)?;
    let mut k = matmul(a, wk)?;
    let mut v = matmul(a, wv)?;
    let (mut ak, mut av, mut ar) = (None, None, None);
    if let Some(ad) = live {
        let t = matmul(a, &ad.b_k)?;
        k.add_assign(&matmul(&t, &ad.a_k)?)?;
        ak = Some(t);
        let t = matmul(a, &ad.b_v)?;
        v.add_assign(&matmul(&t, &ad.a_v)?)?;
        av = Some(t);
        if matches!(residual, ResidualPath::Raw) {
            let t = matmul(a, &ad.b_r)?;
            v.add_assign(&matmul(&t, &ad.a_r)?)?;
            ar = Some(t);
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut probs = matmul_nt(&q, &k)?.scale(scale);
    for r in 0..probs.rows() {
        softmax_in_place(probs.row_mut(r));
    }
    if !probs.all_finite() {
        return Err(Error::Numeric { layer, detail: "attention scores".into() });
    }
    let s_class = vecmat(probs.row(0), a);
    let mut omegas = None;
    if let ResidualPath::Dynamic(mem, r) = &residual {
        let ctx = LayerContext::build(mem, &s_class)?;
        v.add_assign(&ctx.modulate(a, r)?)?;
        omegas = Some(ctx.omegas);
    }
    let h = matmul(&probs, &v)?;
    Ok(AttnCache { q, k, v, probs, ak, av, ar, h, s_class, omegas })
}

/// Attention output `h = softmax(QKᵀ/√d)·V` for normalised activations `a`,
/// with key/value adapters and, when `dm` is given, the dynamic-memory
/// residual in place of the raw one. Returns `h` and the layer's taps.
pub fn attention_block(
    a: &Mat,
    weights: &BlockWeights,
    adapters: Option<&LayerAdapters>,
    residual_enabled: bool,
    dm: Option<&LayerMemory>,
) -> Result<(Mat, LayerTap)> {
    let (mut wk, mut wv) = (weights.wk.clone(), weights.wv.clone());
    let mut path = ResidualPath::None;
    if let Some(ad) = adapters {
        wk.add_assign(&ad.merged_k)?;
        wv.add_assign(&ad.merged_v)?;
        if residual_enabled {
            match dm {
                Some(mem) => path = ResidualPath::Dynamic(mem, ad.residual_product()),
                None => {
                    wv.add_assign(&ad.merged_r)?;
                    path = ResidualPath::Raw;
                }
            }
        }
    }
    let c = attend(a, &weights.wq, &wk, &wv, adapters, path, 0)?;
    let tap = LayerTap {
        q_class: c.q.row(0).to_vec(),
        s_class: c.s_class.clone(),
        a_in: a.clone(),
        h_out: c.h.clone(),
    };
    Ok((c.h, tap))
}

impl VitMini {
    /// Tensors updated by the optimiser in the current phase: adapter factors
    /// and the given head while frozen, everything (plus heads) before.
    pub fn backbone_tensors_mut(&mut self) -> Result<Vec<&mut Mat>> {
        if self.backbone.frozen {
            return Err(Error::State("backbone is frozen".into()));
        }
        Ok(self.backbone.tensors_mut())
    }
}
