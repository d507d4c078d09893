//! The network: component-wise conv encoder, patch tokens, field fusion by a
//! learned query, resampled positional table, axial-attention blocks with
//! low-rank adapters, and a linear patch decoder.
//!
//! A forward pass maps a `(B,t,F,C,D,H,W)` tensor to one of the same shape.
//! The same weights serve 1-D, 2-D and 3-D inputs: singleton spatial axes use
//! a patch extent of 1 and shorter token vectors use the leading columns of
//! the shared projection (equivalent to zero-padding them to full length).

mod checkpoint;
mod config;
pub mod gradcheck;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, OptimState, RngState};
pub use config::{LoraConfig, ModelConfig, PeVariant, PRESET_NAMES};
pub use params::{ParamEntry, ParamGroup, ParamStore};

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{attention, inverse_permutation, resample, seeded_rng, DenseArray, Graph, Rng, Var};
use crate::uptf::UptfTensor;
use params::{fan_in_uniform, uniform};

/// Slope of the encoder's leaky ReLU.
pub const LEAKY_SLOPE: f64 = 0.2;
/// Layer-norm epsilon (inside the square root).
pub const LN_EPS: f64 = 1e-5;
/// Axial attention axes in `(t, D, H, W)` order.
pub const AXES: [&str; 4] = ["t", "d", "h", "w"];

/// Per-forward state: the graph, parameter leaves and the dropout stream.
pub struct Ctx<'g, 'm> {
    pub g: &'g Graph,
    params: &'m ParamStore,
    training: bool,
    track_grads: bool,
    rng: RefCell<Rng>,
    cache: RefCell<HashMap<String, Var<'g>>>,
}

impl<'g, 'm> Ctx<'g, 'm> {
    /// `training` enables dropout; `track_grads` makes trainable parameters
    /// gradient leaves.
    pub fn new(g: &'g Graph, params: &'m ParamStore, training: bool, track_grads: bool, seed: u64) -> Self {
        Self { g, params, training, track_grads, rng: RefCell::new(seeded_rng(seed)), cache: RefCell::new(HashMap::new()) }
    }

    /// Inference context: no dropout, no gradients.
    pub fn eval(g: &'g Graph, params: &'m ParamStore) -> Self {
        Self::new(g, params, false, false, 0)
    }

    pub fn param(&self, name: &str) -> Result<Var<'g>> {
        if let Some(v) = self.cache.borrow().get(name) {
            return Ok(*v);
        }
        let e = self.params.entry(name)?;
        let v = self.g.param(name, e.value.clone(), self.track_grads && e.trainable);
        self.cache.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    pub fn dropout(&self, x: Var<'g>, p: f64) -> Result<Var<'g>> {
        x.dropout(p, &mut *self.rng.borrow_mut(), self.training)
    }
}

/// Token grid of one input: patch counts and per-patch extents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    pub t: usize,
    /// Patches along `(D, H, W)`.
    pub counts: [usize; 3],
    /// Patch extent along `(D, H, W)`; 1 on singleton axes.
    pub extent: [usize; 3],
}

impl PatchGrid {
    pub fn new(cfg: &ModelConfig, t: usize, spatial: [usize; 3]) -> Result<Self> {
        let p = cfg.patch;
        let mut counts = [0; 3];
        let mut extent = [0; 3];
        for i in 0..3 {
            let s = spatial[i];
            extent[i] = if s == 1 { 1 } else { p };
            if !s.is_multiple_of(extent[i]) {
                return Err(Error::shape(format!("spatial extent {s} is not 1 and not divisible by patch {p}")));
            }
            counts[i] = s / extent[i];
        }
        let g = Self { t, counts, extent };
        if g.patches() > cfg.max_patches {
            return Err(Error::shape(format!("{} patches exceed max_patches {}", g.patches(), cfg.max_patches)));
        }
        Ok(g)
    }

    pub fn patches(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn patch_volume(&self) -> usize {
        self.extent.iter().product()
    }

    /// Tokens per sample, `t * n`.
    pub fn tokens(&self) -> usize {
        self.t * self.patches()
    }
}

/// Model parameters plus configuration.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
}

fn attn_name(block: usize, axis: &str, proj: &str) -> String {
    format!("blocks.{block}.attn_{axis}.{proj}")
}

impl Model {
    /// Fresh model with fan-in scaled uniform weights, zero biases, unit
    /// norm gains, and zero-initialized adapter `B` matrices.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = seeded_rng(seed);
        let mut p = ParamStore::new();
        let e = c.embed;
        p.insert("encoder.stem.weight", fan_in_uniform(&[c.conv_stem, c.max_in_ch, 1, 1, 1], c.max_in_ch, &mut rng), ParamGroup::Conv);
        for (i, (cin, cout)) in c.conv_schedule().into_iter().enumerate() {
            p.insert(&format!("encoder.block{i}.weight"), fan_in_uniform(&[cout, cin, 3, 3, 3], cin * 27, &mut rng), ParamGroup::Conv);
            p.insert(&format!("encoder.block{i}.bias"), DenseArray::zeros(&[cout]), ParamGroup::Conv);
        }
        p.insert("proj.weight", fan_in_uniform(&[e, c.token_dim()], c.token_dim(), &mut rng), ParamGroup::Projection);
        p.insert("proj.bias", DenseArray::zeros(&[e]), ParamGroup::Projection);
        p.insert("fusion.q", fan_in_uniform(&[e], e, &mut rng), ParamGroup::Fusion);
        for w in ["wq", "wk", "wv", "wo"] {
            p.insert(&format!("fusion.{w}.weight"), fan_in_uniform(&[e, e], e, &mut rng), ParamGroup::Fusion);
        }
        p.insert("pos.table", fan_in_uniform(&[c.max_ar, c.max_patches, e], e, &mut rng), ParamGroup::PosEnc);
        for b in 0..c.depth {
            for n in ["norm1", "norm2"] {
                p.insert(&format!("blocks.{b}.{n}.gain"), DenseArray::full(&[e], 1.0), ParamGroup::Norm);
                p.insert(&format!("blocks.{b}.{n}.bias"), DenseArray::zeros(&[e]), ParamGroup::Norm);
            }
            for ax in AXES {
                for proj in ["q", "k", "v", "o"] {
                    let name = attn_name(b, ax, proj);
                    p.insert(&format!("{name}.weight"), fan_in_uniform(&[e, e], e, &mut rng), ParamGroup::AttnBase);
                    p.insert(&format!("{name}.bias"), DenseArray::zeros(&[e]), ParamGroup::AttnBase);
                }
            }
            p.insert(&format!("blocks.{b}.mlp.fc1.weight"), fan_in_uniform(&[c.mlp_dim, e], e, &mut rng), ParamGroup::MlpBase);
            p.insert(&format!("blocks.{b}.mlp.fc1.bias"), DenseArray::zeros(&[c.mlp_dim]), ParamGroup::MlpBase);
            p.insert(&format!("blocks.{b}.mlp.fc2.weight"), fan_in_uniform(&[e, c.mlp_dim], c.mlp_dim, &mut rng), ParamGroup::MlpBase);
            p.insert(&format!("blocks.{b}.mlp.fc2.bias"), DenseArray::zeros(&[e]), ParamGroup::MlpBase);
        }
        p.insert("decoder.weight", fan_in_uniform(&[c.decoder_dim(), e], e, &mut rng), ParamGroup::Decoder);
        p.insert("decoder.bias", DenseArray::zeros(&[c.decoder_dim()]), ParamGroup::Decoder);
        let mut m = Self { config, params: p };
        let (ra, rm) = (m.config.lora.r_attn, m.config.lora.r_mlp);
        m.attach_adapters(ra, rm, &mut rng);
        Ok(m)
    }

    /// Rebuilds a model from stored parameters, checking names and shapes
    /// against a fresh instance of `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, e) in reference.params.iter() {
            let got = params.entry(name).map_err(|_| Error::Checkpoint(format!("missing parameter {name}")))?;
            if got.value.shape() != e.value.shape() {
                return Err(Error::Checkpoint(format!("parameter {name}: shape {:?}, expected {:?}", got.value.shape(), e.value.shape())));
            }
        }
        if params.len() != reference.params.len() {
            return Err(Error::Checkpoint(format!("{} parameters, expected {}", params.len(), reference.params.len())));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Linear layers carrying attention adapters: `(name, in, out)`.
    pub fn attn_linears(&self) -> Vec<(String, usize, usize)> {
        let e = self.config.embed;
        (0..self.config.depth)
            .flat_map(|b| AXES.iter().flat_map(move |ax| ["q", "k", "v", "o"].map(|p| (attn_name(b, ax, p), e, e))))
            .collect()
    }

    /// Linear layers carrying MLP adapters: `(name, in, out)`.
    pub fn mlp_linears(&self) -> Vec<(String, usize, usize)> {
        let (e, h) = (self.config.embed, self.config.mlp_dim);
        (0..self.config.depth)
            .flat_map(|b| [(format!("blocks.{b}.mlp.fc1"), e, h), (format!("blocks.{b}.mlp.fc2"), h, e)])
            .collect()
    }

    fn attach_adapters<R: rand::Rng + ?Sized>(&mut self, r_attn: usize, r_mlp: usize, rng: &mut R) {
        let layers: Vec<(String, usize, usize, usize)> = self
            .attn_linears()
            .into_iter()
            .map(|(n, i, o)| (n, i, o, r_attn))
            .chain(self.mlp_linears().into_iter().map(|(n, i, o)| (n, i, o, r_mlp)))
            .collect();
        for (name, inp, out, r) in layers {
            let (a, b) = (format!("{name}.lora_a"), format!("{name}.lora_b"));
            let current = self.params.get(&a).map(|v| v.shape()[0]).unwrap_or(0);
            if current == r {
                continue;
            }
            self.params.remove(&a);
            self.params.remove(&b);
            if r > 0 {
                self.params.insert(&a, uniform(&[r, inp], 1.0 / (inp as f64).sqrt(), rng), ParamGroup::LoraAdapter);
                self.params.insert(&b, DenseArray::zeros(&[out, r]), ParamGroup::LoraAdapter);
            }
        }
        self.config.lora.r_attn = r_attn;
        self.config.lora.r_mlp = r_mlp;
    }

    /// Sets adapter ranks (0 removes adapters). New adapters start with
    /// `B = 0`, so outputs are unchanged. With `freeze_base`, the base
    /// weights and biases of adapted layers become non-trainable.
    pub fn set_lora_mode(&mut self, r_attn: usize, r_mlp: usize, freeze_base: bool, seed: u64) {
        let mut rng = seeded_rng(seed);
        self.attach_adapters(r_attn, r_mlp, &mut rng);
        if freeze_base {
            let adapted: Vec<String> = self
                .attn_linears()
                .into_iter()
                .filter(|_| r_attn > 0)
                .chain(self.mlp_linears().into_iter().filter(|_| r_mlp > 0))
                .map(|l| l.0)
                .collect();
            for name in adapted {
                for s in ["weight", "bias"] {
                    self.params.set_trainable(&format!("{name}.{s}"), false).expect("layer exists");
                }
            }
        }
    }

    /// `x W^T + b` plus the scaled adapter path when `rank > 0`.
    fn linear<'g>(&self, ctx: &Ctx<'g, '_>, name: &str, x: Var<'g>, rank: usize) -> Result<Var<'g>> {
        let w = ctx.param(&format!("{name}.weight"))?;
        let b = ctx.param(&format!("{name}.bias"))?;
        let y = x.linear(w, Some(b))?;
        if rank == 0 {
            return Ok(y);
        }
        let a = ctx.param(&format!("{name}.lora_a"))?;
        let bm = ctx.param(&format!("{name}.lora_b"))?;
        let xin = ctx.dropout(x, self.config.lora.dropout)?;
        let delta = xin.linear(a, None)?.linear(bm, None)?.scale(self.config.lora.alpha / rank as f64);
        y.add(delta)
    }

    /// Checks an input against the configuration and returns its token grid.
    pub fn grid_for(&self, shape: [usize; 7]) -> Result<PatchGrid> {
        let c = &self.config;
        let [_, t, f, comps, d, h, w] = shape;
        if comps > c.max_in_ch || comps > c.max_components {
            return Err(Error::shape(format!("{comps} components exceed max_in_ch {} / max_components {}", c.max_in_ch, c.max_components)));
        }
        if f > c.max_fields {
            return Err(Error::shape(format!("{f} fields exceed max_fields {}", c.max_fields)));
        }
        PatchGrid::new(c, t, [d, h, w])
    }

    /// Conv encoder over every `(trajectory, time, field)` slab:
    /// `(B,T,F,C,D,H,W) -> (B*T*F, F_conv, D, H, W)`.
    pub fn encode<'g>(&self, ctx: &Ctx<'g, '_>, x: &UptfTensor) -> Result<Var<'g>> {
        let [b, t, f, c, d, h, w] = x.shape();
        let cin = self.config.max_in_ch;
        if c > cin {
            return Err(Error::shape(format!("{c} components exceed max_in_ch {cin}")));
        }
        let vol = d * h * w;
        let slabs = b * t * f;
        let mut padded = vec![0.0; slabs * cin * vol];
        for s in 0..slabs {
            padded[s * cin * vol..(s * cin + c) * vol].copy_from_slice(&x.data().data()[s * c * vol..(s + 1) * c * vol]);
        }
        let input = ctx.g.constant(DenseArray::new(vec![slabs, cin, d, h, w], padded)?);
        let mut y = input.conv3d(ctx.param("encoder.stem.weight")?, None, 0)?;
        for i in 0..self.config.conv_schedule().len() {
            let k = ctx.param(&format!("encoder.block{i}.weight"))?;
            let bias = ctx.param(&format!("encoder.block{i}.bias"))?;
            y = y.conv3d(k, Some(bias), 1)?.leaky_relu(LEAKY_SLOPE)?;
        }
        Ok(y)
    }

    /// Non-overlapping patches: `(S, F_conv, D, H, W) -> (S, n, v)` with the
    /// token vector ordered `(channel, pd, ph, pw)`.
    pub fn patchify<'g>(&self, feats: Var<'g>, grid: &PatchGrid) -> Result<Var<'g>> {
        let s = feats.shape();
        let (slabs, fc) = (s[0], s[1]);
        let [cd, ch, cw] = grid.counts;
        let [pd, ph, pw] = grid.extent;
        feats
            .reshape(&[slabs, fc, cd, pd, ch, ph, cw, pw])?
            .permute(&[0, 2, 4, 6, 1, 3, 5, 7])?
            .reshape(&[slabs, grid.patches(), fc * grid.patch_volume()])
    }

    /// Shared projection of `(B*t*F, n, v)` tokens followed by field fusion,
    /// giving `(B, t, n, E)`.
    pub fn project_and_fuse<'g>(&self, ctx: &Ctx<'g, '_>, tokens: Var<'g>, b: usize, f: usize, grid: &PatchGrid) -> Result<Var<'g>> {
        let v = tokens.shape()[2];
        let e = self.config.embed;
        let n = grid.patches();
        let w = ctx.param("proj.weight")?.narrow(1, 0, v)?;
        let x = tokens.linear(w, Some(ctx.param("proj.bias")?))?;
        let x = x.reshape(&[b * grid.t, f, n, e])?.permute(&[0, 2, 1, 3])?.reshape(&[b * grid.t * n, f, e])?;
        self.fuse(ctx, x)?.reshape(&[b, grid.t, n, e])
    }

    /// Learned-query attention over the field axis: `(S, F, E) -> (S, 1, E)`.
    pub fn fuse<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape()[0];
        let e = self.config.embed;
        let q = ctx.param("fusion.q")?.reshape(&[1, e])?.linear(ctx.param("fusion.wq.weight")?, None)?.expand(s)?;
        let k = x.linear(ctx.param("fusion.wk.weight")?, None)?;
        let v = x.linear(ctx.param("fusion.wv.weight")?, None)?;
        attention(q, k, v, self.config.cross_heads)?.linear(ctx.param("fusion.wo.weight")?, None)
    }

    /// Adds the positional table fitted to `(t, n)`, after dropout.
    pub fn positional_encode<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        let (t, n) = (s[1], s[2]);
        let table = ctx.param("pos.table")?;
        let p_hat = match self.config.pe_variant {
            PeVariant::StBilinear => resample(table, t, n)?,
            PeVariant::SLinearTSlice => {
                if t > self.config.max_ar {
                    return Err(Error::shape(format!("{t} time steps exceed max_ar {}", self.config.max_ar)));
                }
                resample(table.narrow(0, 0, t)?, t, n)?
            }
        };
        x.add_broadcast(ctx.dropout(p_hat, self.config.dropout)?)
    }

    /// Attention along one axis of `u: (B, t, D', H', W', E)`; `axis` is 1..=4.
    pub fn axis_attention<'g>(&self, ctx: &Ctx<'g, '_>, block: usize, axis: usize, u: Var<'g>) -> Result<Var<'g>> {
        let shape = u.shape();
        let e = self.config.embed;
        let mut order: Vec<usize> = (0..5).filter(|&a| a != axis).collect();
        order.push(axis);
        order.push(5);
        let identity = order.iter().enumerate().all(|(i, &a)| i == a);
        let up = if identity { u } else { u.permute(&order)? };
        let len = shape[axis];
        let folded = up.reshape(&[shape.iter().product::<usize>() / (len * e), len, e])?;
        let r = self.config.lora.r_attn;
        let ax = AXES[axis - 1];
        let v = self.linear(ctx, &attn_name(block, ax, "v"), folded, r)?;
        let mixed = if len == 1 {
            // a single key gets weight exactly 1, so the output is V itself
            ctx.g.add_logits((shape.iter().product::<usize>() / e) as u64);
            v
        } else {
            let q = self.linear(ctx, &attn_name(block, ax, "q"), folded, r)?;
            let k = self.linear(ctx, &attn_name(block, ax, "k"), folded, r)?;
            attention(q, k, v, self.config.heads)?
        };
        let o = self.linear(ctx, &attn_name(block, ax, "o"), mixed, r)?;
        let o = ctx.dropout(o, self.config.dropout)?;
        let permuted: Vec<usize> = order.iter().map(|&a| shape[a]).collect();
        let o = o.reshape(&permuted)?;
        if identity {
            Ok(o)
        } else {
            o.permute(&inverse_permutation(&order))
        }
    }

    /// Reference full attention over all `t*D'*H'*W'` tokens of each sample,
    /// using the projections of `axis`.
    pub fn full_attention_reference<'g>(&self, ctx: &Ctx<'g, '_>, block: usize, axis: usize, u: Var<'g>) -> Result<Var<'g>> {
        let shape = u.shape();
        let e = self.config.embed;
        let l: usize = shape[1..5].iter().product();
        let flat = u.reshape(&[shape[0], l, e])?;
        let r = self.config.lora.r_attn;
        let ax = AXES[axis - 1];
        let q = self.linear(ctx, &attn_name(block, ax, "q"), flat, r)?;
        let k = self.linear(ctx, &attn_name(block, ax, "k"), flat, r)?;
        let v = self.linear(ctx, &attn_name(block, ax, "v"), flat, r)?;
        let o = self.linear(ctx, &attn_name(block, ax, "o"), attention(q, k, v, self.config.heads)?, r)?;
        o.reshape(&shape)
    }

    /// Pre-norm axial block on `(B, t, n, E)` tokens. The temporal branch
    /// runs only when `t > 1`.
    pub fn axial_block<'g>(&self, ctx: &Ctx<'g, '_>, block: usize, x: Var<'g>, grid: &PatchGrid) -> Result<Var<'g>> {
        let s = x.shape();
        let (b, e) = (s[0], s[3]);
        let [cd, ch, cw] = grid.counts;
        if s[1] != grid.t || s[2] != grid.patches() {
            return Err(Error::shape(format!("tokens {s:?} do not match grid t={} n={}", grid.t, grid.patches())));
        }
        let x6 = x.reshape(&[b, grid.t, cd, ch, cw, e])?;
        let norm = |n: &str, v: Var<'g>| -> Result<Var<'g>> {
            v.layer_norm(5, ctx.param(&format!("blocks.{block}.{n}.gain"))?, ctx.param(&format!("blocks.{block}.{n}.bias"))?, LN_EPS)
        };
        let u = norm("norm1", x6)?;
        let mut y = x6;
        for axis in 1..=4 {
            if axis == 1 && grid.t == 1 {
                continue;
            }
            y = y.add(self.axis_attention(ctx, block, axis, u)?)?;
        }
        let r = self.config.lora.r_mlp;
        let h = self.linear(ctx, &format!("blocks.{block}.mlp.fc1"), norm("norm2", y)?, r)?.gelu();
        let h = ctx.dropout(h, self.config.dropout)?;
        let h = self.linear(ctx, &format!("blocks.{block}.mlp.fc2"), h, r)?;
        y.add(h)?.reshape(&[b, grid.t, grid.patches(), e])
    }

    /// Linear decoder to `F_max * C_max * p^3` per token, sliced to the live
    /// fields, components and patch extents, then un-patched.
    pub fn decode<'g>(&self, ctx: &Ctx<'g, '_>, x: Var<'g>, grid: &PatchGrid, f: usize, c: usize) -> Result<Var<'g>> {
        let cfg = &self.config;
        let s = x.shape();
        let b = s[0];
        let p = cfg.patch;
        let [cd, ch, cw] = grid.counts;
        let [pd, ph, pw] = grid.extent;
        let y = x.linear(ctx.param("decoder.weight")?, Some(ctx.param("decoder.bias")?))?;
        let mut y = y.reshape(&[b, grid.t, cd, ch, cw, cfg.max_fields, cfg.max_components, p, p, p])?;
        for (axis, len) in [(5, f), (6, c), (7, pd), (8, ph), (9, pw)] {
            if y.shape()[axis] != len {
                y = y.narrow(axis, 0, len)?;
            }
        }
        y.permute(&[0, 1, 5, 6, 2, 7, 3, 8, 4, 9])?.reshape(&[b, grid.t, f, c, cd * pd, ch * ph, cw * pw])
    }

    /// Full forward pass; output has the input's shape.
    pub fn forward<'g>(&self, ctx: &Ctx<'g, '_>, x: &UptfTensor) -> Result<Var<'g>> {
        let shape = x.shape();
        let grid = self.grid_for(shape)?;
        let [b, _, f, c, ..] = shape;
        let feats = self.encode(ctx, x)?;
        let tokens = self.patchify(feats, &grid)?;
        let mut z = self.project_and_fuse(ctx, tokens, b, f, &grid)?;
        z = self.positional_encode(ctx, z)?;
        for block in 0..self.config.depth {
            z = self.axial_block(ctx, block, z, &grid)?;
        }
        self.decode(ctx, z, &grid, f, c)
    }

    /// Masked MSE between the last predicted frame and `y` over canonical
    /// (non-broadcast) entries.
    pub fn ar_loss<'g>(&self, ctx: &Ctx<'g, '_>, x: &UptfTensor, y: &UptfTensor) -> Result<Var<'g>> {
        let out = self.forward(ctx, x)?;
        let t = out.shape()[1];
        let last = if t == 1 { out } else { out.narrow(1, t - 1, 1)? };
        last.masked_mse_loss(y.data(), &y.mask_weights())
    }

    /// Loss value and gradients of every trainable parameter.
    pub fn loss_and_grads(&self, x: &UptfTensor, y: &UptfTensor, training: bool, seed: u64) -> Result<(f64, BTreeMap<String, DenseArray>)> {
        let g = Graph::new();
        let ctx = Ctx::new(&g, &self.params, training, true, seed);
        let loss = self.ar_loss(&ctx, x, y)?;
        let value = loss.value().item();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("loss {value}")));
        }
        g.backward(loss)?;
        Ok((value, g.named_grads()))
    }

    /// Inference: predicted next state with broadcast components copied
    /// from their canonical entry.
    pub fn predict(&self, x: &UptfTensor) -> Result<UptfTensor> {
        let g = Graph::new();
        let ctx = Ctx::eval(&g, &self.params);
        let out = self.forward(&ctx, x)?.value();
        let mut y = x.with_data((*out).clone())?;
        y.rebroadcast();
        Ok(y)
    }
}

#[cfg(test)]
mod tests;
