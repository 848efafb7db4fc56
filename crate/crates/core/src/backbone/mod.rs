//! Toy conditional velocity model: a patch-token transformer with joint
//! attention over every image patch of the packed grid plus the condition
//! tokens.
//!
//! Image tokens carry fixed 2-D sinusoidal positions over the whole packed
//! image, so any grid size can be embedded, including grids larger than the
//! ones seen in training. Condition tokens (one layout token, one token per
//! content label) carry no position. A sinusoidal time embedding, passed
//! through a small MLP, is added to every token and also drives adaptive
//! layer norm: each block's norms get a time-dependent shift and scale, and
//! each residual branch a time-dependent gate. The modulation layers start at
//! zero, so every block is the identity at initialization.
//!
//! The output adds a direct path `c(t) * x_t` per patch entry, with `c(t)`
//! read off the time embedding. The velocity of a noisy pixel is mostly a
//! time-dependent multiple of the pixel itself, which the token bottleneck
//! otherwise has to reproduce exactly.

mod checkpoint;
mod layers;
mod params;

use ndarray::{s, Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, RngState, TrainProgress};
pub use params::{ParamId, Params};

use crate::condition::{Condition, Label, LAYOUT_VOCAB};
use crate::error::{Error, Result};
use crate::layout::{GridTensor, LayoutSpec};
use layers::{LayerNormCache, *};

/// Hidden width of each MLP relative to `embed_dim`.
pub const MLP_RATIO: usize = 4;
/// Std of the learned embedding tables at init.
const EMBED_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub cond_vocab: usize,
    pub time_embed_dim: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 4,
            embed_dim: 128,
            depth: 4,
            heads: 4,
            cond_vocab: Label::COUNT,
            time_embed_dim: 64,
            frame_h: 16,
            frame_w: 16,
            channels: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.patch_size == 0 {
            return bad("patch_size must be positive".into());
        }
        if self.frame_h == 0 || self.frame_w == 0 || self.channels == 0 {
            return bad("frame geometry must be nonempty".into());
        }
        if self.frame_h % self.patch_size != 0 || self.frame_w % self.patch_size != 0 {
            return bad(format!(
                "patch_size {} does not divide frame {}x{}",
                self.patch_size, self.frame_h, self.frame_w
            ));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.embed_dim == 0 || self.embed_dim % 4 != 0 {
            return bad(format!(
                "embed_dim {} must be a positive multiple of 4",
                self.embed_dim
            ));
        }
        if self.time_embed_dim < 2 || self.time_embed_dim % 2 != 0 {
            return bad(format!(
                "time_embed_dim {} must be even and at least 2",
                self.time_embed_dim
            ));
        }
        if self.cond_vocab < Label::COUNT {
            return bad(format!(
                "cond_vocab {} is smaller than the {} known labels",
                self.cond_vocab,
                Label::COUNT
            ));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Patches per frame along (rows, cols).
    pub fn patches_per_frame(&self) -> (usize, usize) {
        (
            self.frame_h / self.patch_size,
            self.frame_w / self.patch_size,
        )
    }

    pub fn accepts(&self, layout: &LayoutSpec) -> bool {
        layout.frame_h == self.frame_h
            && layout.frame_w == self.frame_w
            && layout.channels == self.channels
    }
}

#[derive(Debug, Clone)]
struct BlockIds {
    ada_w: ParamId,
    ada_b: ParamId,
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Debug, Clone)]
struct ParamIds {
    patch_w: ParamId,
    patch_b: ParamId,
    time_w1: ParamId,
    time_b1: ParamId,
    time_w2: ParamId,
    time_b2: ParamId,
    layout_embed: ParamId,
    label_embed: ParamId,
    blocks: Vec<BlockIds>,
    final_ada_w: ParamId,
    final_ada_b: ParamId,
    final_g: ParamId,
    final_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    skip_w: ParamId,
    skip_b: ParamId,
}

/// Builds the parameter store in its canonical order, drawing from `rng`.
fn build_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> (Params, ParamIds) {
    let d = cfg.embed_dim;
    let pd = cfg.patch_dim();
    let te = cfg.time_embed_dim;
    let hidden = MLP_RATIO * d;
    let lecun = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
    let mut p = Params::new();

    let patch_w = p.add_normal("patch_embed.w", (pd, d), lecun(pd), rng);
    let patch_b = p.add("patch_embed.b", Array2::zeros((1, d)));
    let time_w1 = p.add_normal("time_mlp.w1", (te, d), lecun(te), rng);
    let time_b1 = p.add("time_mlp.b1", Array2::zeros((1, d)));
    let time_w2 = p.add_normal("time_mlp.w2", (d, d), lecun(d), rng);
    let time_b2 = p.add("time_mlp.b2", Array2::zeros((1, d)));
    let layout_embed = p.add_normal("layout_embed", (LAYOUT_VOCAB, d), EMBED_INIT_STD, rng);
    let label_embed = p.add_normal("label_embed", (cfg.cond_vocab, d), EMBED_INIT_STD, rng);

    let mut blocks = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let n = |s: &str| format!("blocks.{l}.{s}");
        blocks.push(BlockIds {
            ada_w: p.add(n("ada.w"), Array2::zeros((d, 6 * d))),
            ada_b: p.add(n("ada.b"), Array2::zeros((1, 6 * d))),
            ln1_g: p.add(n("ln1.g"), Array2::ones((1, d))),
            ln1_b: p.add(n("ln1.b"), Array2::zeros((1, d))),
            qkv_w: p.add_normal(n("attn.qkv.w"), (d, 3 * d), lecun(d), rng),
            qkv_b: p.add(n("attn.qkv.b"), Array2::zeros((1, 3 * d))),
            proj_w: p.add_normal(n("attn.proj.w"), (d, d), lecun(d), rng),
            proj_b: p.add(n("attn.proj.b"), Array2::zeros((1, d))),
            ln2_g: p.add(n("ln2.g"), Array2::ones((1, d))),
            ln2_b: p.add(n("ln2.b"), Array2::zeros((1, d))),
            fc1_w: p.add_normal(n("mlp.fc1.w"), (d, hidden), lecun(d), rng),
            fc1_b: p.add(n("mlp.fc1.b"), Array2::zeros((1, hidden))),
            fc2_w: p.add_normal(n("mlp.fc2.w"), (hidden, d), lecun(hidden), rng),
            fc2_b: p.add(n("mlp.fc2.b"), Array2::zeros((1, d))),
        });
    }

    let final_ada_w = p.add("final.ada.w", Array2::zeros((d, 2 * d)));
    let final_ada_b = p.add("final.ada.b", Array2::zeros((1, 2 * d)));
    let final_g = p.add("final_ln.g", Array2::ones((1, d)));
    let final_b = p.add("final_ln.b", Array2::zeros((1, d)));
    let out_w = p.add_normal("out.w", (d, pd), lecun(d), rng);
    let out_b = p.add("out.b", Array2::zeros((1, pd)));
    let skip_w = p.add("skip.w", Array2::zeros((d, pd)));
    let skip_b = p.add("skip.b", Array2::ones((1, pd)));

    let ids = ParamIds {
        patch_w,
        patch_b,
        time_w1,
        time_b1,
        time_w2,
        time_b2,
        layout_embed,
        label_embed,
        blocks,
        final_ada_w,
        final_ada_b,
        final_g,
        final_b,
        out_w,
        out_b,
        skip_w,
        skip_b,
    };
    (p, ids)
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: Params,
    ids: ParamIds,
}

/// Kind of a token in the joint sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    /// Image patch belonging to grid cell `(row, col)`.
    Image { row: usize, col: usize },
    Condition,
}

/// Attention weights of one forward pass.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    /// `layers[l][h]` is the `(tokens, tokens)` row-stochastic matrix of head `h`.
    pub layers: Vec<Vec<Array2<f64>>>,
    pub tokens: Vec<TokenKind>,
}

impl AttentionRecord {
    pub fn image_tokens(&self) -> usize {
        self.tokens
            .iter()
            .filter(|t| matches!(t, TokenKind::Image { .. }))
            .count()
    }
}

struct BlockCache {
    /// `(1, 6d)`: shift1, scale1, gate1, shift2, scale2, gate2.
    modv: Array2<f64>,
    ln1: LayerNormCache,
    a0: Array2<f64>,
    a: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    o: Array2<f64>,
    ln2: LayerNormCache,
    m0: Array2<f64>,
    m: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
    f: Array2<f64>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache {
    layout: LayoutSpec,
    patches: Array2<f64>,
    time_feat: Array2<f64>,
    time_pre: Array2<f64>,
    time_act: Array2<f64>,
    temb: Array2<f64>,
    temb_act: Array2<f64>,
    layout_row: usize,
    label_rows: Vec<usize>,
    blocks: Vec<BlockCache>,
    final_mod: Array2<f64>,
    final_ln: LayerNormCache,
    final_n: Array2<f64>,
    final_y: Array2<f64>,
    skip: Array2<f64>,
}

impl ForwardCache {
    pub fn attention(&self) -> Vec<Vec<Array2<f64>>> {
        self.blocks.iter().map(|b| b.probs.clone()).collect()
    }
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (params, ids) = build_params(&config, &mut rng);
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    /// Rebuilds a model from stored parameters; names and shapes must match
    /// the canonical structure for `config`.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Model> {
        config.validate()?;
        let (template, ids) = build_params(&config, &mut ChaCha8Rng::seed_from_u64(0));
        if !template.same_structure(&params) {
            return Err(Error::InvalidConfig(
                "parameter names or shapes do not match the model config".into(),
            ));
        }
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    fn check_inputs(&self, x_t: &GridTensor, t: f64, cond: &Condition) -> Result<()> {
        let layout = x_t.layout();
        if !self.config.accepts(layout) {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}x{}x{} frames, grid has {}x{}x{}",
                self.config.frame_h,
                self.config.frame_w,
                self.config.channels,
                layout.frame_h,
                layout.frame_w,
                layout.channels
            )));
        }
        if !(0.0..=1.0).contains(&t) || t.is_nan() {
            return Err(Error::TOutOfRange(t));
        }
        if !cond.matches_layout(layout) {
            return Err(Error::GeometryMismatch(format!(
                "condition layout token {} does not describe a {}x{} grid",
                cond.layout_token, layout.rows, layout.cols
            )));
        }
        if let Some(bad) = cond
            .label_ids()
            .into_iter()
            .find(|&id| id >= self.config.cond_vocab)
        {
            return Err(Error::InvalidConfig(format!(
                "label id {bad} outside vocabulary of {}",
                self.config.cond_vocab
            )));
        }
        Ok(())
    }

    /// Token layout for a grid: image patches (row-major over the packed
    /// image) followed by the condition tokens.
    pub fn token_kinds(&self, layout: &LayoutSpec, cond: &Condition) -> Vec<TokenKind> {
        let p = self.config.patch_size;
        let (ph, pw) = (layout.grid_h() / p, layout.grid_w() / p);
        let mut kinds: Vec<TokenKind> = (0..ph * pw)
            .map(|i| {
                let (pr, pc) = (i / pw, i % pw);
                TokenKind::Image {
                    row: pr * p / layout.frame_h,
                    col: pc * p / layout.frame_w,
                }
            })
            .collect();
        kinds.extend(std::iter::repeat(TokenKind::Condition).take(1 + cond.label_ids().len()));
        kinds
    }

    pub fn predict_velocity(&self, x_t: &GridTensor, t: f64, cond: &Condition) -> Result<GridTensor> {
        Ok(self.forward(x_t, t, cond)?.0)
    }

    pub fn attention_maps(&self, x_t: &GridTensor, t: f64, cond: &Condition) -> Result<AttentionRecord> {
        let (_, cache) = self.forward(x_t, t, cond)?;
        Ok(AttentionRecord {
            layers: cache.attention(),
            tokens: self.token_kinds(x_t.layout(), cond),
        })
    }

    pub fn forward(
        &self,
        x_t: &GridTensor,
        t: f64,
        cond: &Condition,
    ) -> Result<(GridTensor, ForwardCache)> {
        self.check_inputs(x_t, t, cond)?;
        let cfg = &self.config;
        let p = &self.params;
        let ids = &self.ids;
        let layout = *x_t.layout();

        let patches = patchify(x_t.data(), cfg.patch_size);
        let n_img = patches.nrows();
        let mut h_img = linear(&patches.view(), p.get(ids.patch_w), p.get(ids.patch_b));
        h_img += &position_embedding(&layout, cfg);

        let time_feat = sinusoid(t * 1000.0, cfg.time_embed_dim).insert_axis(Axis(0));
        let time_pre = linear(&time_feat.view(), p.get(ids.time_w1), p.get(ids.time_b1));
        let time_act = silu(&time_pre);
        let temb = linear(&time_act.view(), p.get(ids.time_w2), p.get(ids.time_b2));
        let temb_act = silu(&temb);

        let layout_row = cond.layout_token as usize;
        let label_rows = cond.label_ids();
        let n_tok = n_img + 1 + label_rows.len();
        let mut h = Array2::zeros((n_tok, cfg.embed_dim));
        h.slice_mut(s![..n_img, ..]).assign(&h_img);
        h.row_mut(n_img)
            .assign(&p.get(ids.layout_embed).row(layout_row));
        for (i, &r) in label_rows.iter().enumerate() {
            h.row_mut(n_img + 1 + i)
                .assign(&p.get(ids.label_embed).row(r));
        }
        h += &temb;

        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in &ids.blocks {
            let (out, cache) = block_forward(p, b, cfg.heads, h, &temb_act);
            h = out;
            blocks.push(cache);
        }

        let final_mod = linear(&temb_act.view(), p.get(ids.final_ada_w), p.get(ids.final_ada_b));
        let (final_n, final_ln) = layer_norm(
            &h.slice(s![..n_img, ..]),
            p.get(ids.final_g),
            p.get(ids.final_b),
        );
        let final_y = modulate(&final_n, &final_mod, 0);
        let skip = linear(&temb_act.view(), p.get(ids.skip_w), p.get(ids.skip_b));
        let mut out_tokens = linear(&final_y.view(), p.get(ids.out_w), p.get(ids.out_b));
        out_tokens += &(&patches * &skip);
        let out = unpatchify(&out_tokens, &layout, cfg.patch_size);

        Ok((
            GridTensor::new(out, layout)?,
            ForwardCache {
                layout,
                patches,
                time_feat,
                time_pre,
                time_act,
                temb,
                temb_act,
                layout_row,
                label_rows,
                blocks,
                final_mod,
                final_ln,
                final_n,
                final_y,
                skip,
            },
        ))
    }

    /// Backpropagates `d_out` (gradient w.r.t. the predicted velocity grid),
    /// accumulating parameter gradients into `grads`. Returns the gradient
    /// w.r.t. the input grid.
    pub fn backward(&self, cache: &ForwardCache, d_out: &Array3<f64>, grads: &mut Params) -> Array3<f64> {
        let cfg = &self.config;
        let p = &self.params;
        let ids = &self.ids;
        let d_tokens = patchify(d_out, cfg.patch_size);
        let n_img = d_tokens.nrows();

        let dy = {
            let (gw, gb) = two_mut(grads, ids.out_w, ids.out_b);
            linear_backward(&cache.final_y.view(), p.get(ids.out_w), &d_tokens, gw, gb)
        };
        let dskip = (&d_tokens * &cache.patches).sum_axis(Axis(0)).insert_axis(Axis(0));
        let mut dtemb_act = {
            let (gw, gb) = two_mut(grads, ids.skip_w, ids.skip_b);
            linear_backward(&cache.temb_act.view(), p.get(ids.skip_w), &dskip, gw, gb)
        };
        let (dn, dmod_f) = modulate_backward(&cache.final_n, &cache.final_mod, 0, &dy);
        {
            let (gw, gb) = two_mut(grads, ids.final_ada_w, ids.final_ada_b);
            dtemb_act += &linear_backward(
                &cache.temb_act.view(),
                p.get(ids.final_ada_w),
                &dmod_f,
                gw,
                gb,
            );
        }
        let dhf = {
            let (gg, gb) = two_mut(grads, ids.final_g, ids.final_b);
            layer_norm_backward(&cache.final_ln, p.get(ids.final_g), &dn, gg, gb)
        };
        let n_tok = n_img + 1 + cache.label_rows.len();
        let mut dh = Array2::zeros((n_tok, cfg.embed_dim));
        dh.slice_mut(s![..n_img, ..]).assign(&dhf);

        for (b, bc) in ids.blocks.iter().zip(&cache.blocks).rev() {
            let (dx, dta) = block_backward(p, b, bc, &cache.temb_act, dh, grads);
            dh = dx;
            dtemb_act += &dta;
        }

        // time embedding is added to every token and feeds the modulation
        let mut dtemb = silu_backward(&cache.temb, &dtemb_act);
        dtemb += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
        let dact = {
            let (gw, gb) = two_mut(grads, ids.time_w2, ids.time_b2);
            linear_backward(&cache.time_act.view(), p.get(ids.time_w2), &dtemb, gw, gb)
        };
        let dpre = silu_backward(&cache.time_pre, &dact);
        {
            let (gw, gb) = two_mut(grads, ids.time_w1, ids.time_b1);
            linear_backward(&cache.time_feat.view(), p.get(ids.time_w1), &dpre, gw, gb);
        }

        {
            let mut g = grads.get_mut(ids.layout_embed).row_mut(cache.layout_row);
            g += &dh.row(n_img);
        }
        for (i, &r) in cache.label_rows.iter().enumerate() {
            let mut g = grads.get_mut(ids.label_embed).row_mut(r);
            g += &dh.row(n_img + 1 + i);
        }

        let dh_img = dh.slice(s![..n_img, ..]).to_owned();
        let mut dpatches = {
            let (gw, gb) = two_mut(grads, ids.patch_w, ids.patch_b);
            linear_backward(&cache.patches.view(), p.get(ids.patch_w), &dh_img, gw, gb)
        };
        dpatches += &(&d_tokens * &cache.skip);
        unpatchify(&dpatches, &cache.layout, cfg.patch_size)
    }
}

fn two_mut(grads: &mut Params, a: ParamId, b: ParamId) -> (&mut Array2<f64>, &mut Array2<f64>) {
    assert!(a.0 < b.0, "parameter ids must be ordered");
    let (lo, hi) = grads.tensors_mut().split_at_mut(b.0);
    (&mut lo[a.0], &mut hi[0])
}

/// `x * (1 + scale) + shift`, with shift and scale taken from chunks `k`
/// and `k + 1` of the `(1, n*d)` modulation row and broadcast over tokens.
fn modulate(x: &Array2<f64>, modv: &Array2<f64>, k: usize) -> Array2<f64> {
    let d = x.ncols();
    let shift = modv.slice(s![.., k * d..(k + 1) * d]);
    let scale = modv.slice(s![.., (k + 1) * d..(k + 2) * d]);
    let mut y = x * &scale.mapv(|v| 1.0 + v);
    y += &shift;
    y
}

/// Returns the input gradient and a `(1, n*d)` row holding the shift and
/// scale gradients in chunks `k`, `k + 1` (zero elsewhere).
fn modulate_backward(
    x: &Array2<f64>,
    modv: &Array2<f64>,
    k: usize,
    dy: &Array2<f64>,
) -> (Array2<f64>, Array2<f64>) {
    let d = x.ncols();
    let scale = modv.slice(s![.., (k + 1) * d..(k + 2) * d]);
    let dx = dy * &scale.mapv(|v| 1.0 + v);
    let mut dmod = Array2::zeros(modv.raw_dim());
    dmod.slice_mut(s![0, k * d..(k + 1) * d])
        .assign(&dy.sum_axis(Axis(0)));
    dmod.slice_mut(s![0, (k + 1) * d..(k + 2) * d])
        .assign(&(dy * x).sum_axis(Axis(0)));
    (dx, dmod)
}

fn gate(modv: &Array2<f64>, k: usize, d: usize) -> ndarray::ArrayView2<'_, f64> {
    modv.slice(s![.., k * d..(k + 1) * d])
}

fn block_forward(
    p: &Params,
    b: &BlockIds,
    heads: usize,
    x: Array2<f64>,
    temb_act: &Array2<f64>,
) -> (Array2<f64>, BlockCache) {
    let d = x.ncols();
    let modv = linear(&temb_act.view(), p.get(b.ada_w), p.get(b.ada_b));
    let (a0, ln1) = layer_norm(&x.view(), p.get(b.ln1_g), p.get(b.ln1_b));
    let a = modulate(&a0, &modv, 0);
    let qkv = linear(&a.view(), p.get(b.qkv_w), p.get(b.qkv_b));
    let (attn, probs) = attention(&qkv, heads);
    let o = linear(&attn.view(), p.get(b.proj_w), p.get(b.proj_b));
    let mut x2 = x;
    x2 += &(&o * &gate(&modv, 2, d));
    let (m0, ln2) = layer_norm(&x2.view(), p.get(b.ln2_g), p.get(b.ln2_b));
    let m = modulate(&m0, &modv, 3);
    let pre = linear(&m.view(), p.get(b.fc1_w), p.get(b.fc1_b));
    let act = gelu(&pre);
    let f = linear(&act.view(), p.get(b.fc2_w), p.get(b.fc2_b));
    let mut x3 = x2;
    x3 += &(&f * &gate(&modv, 5, d));
    (
        x3,
        BlockCache {
            modv,
            ln1,
            a0,
            a,
            qkv,
            probs,
            attn,
            o,
            ln2,
            m0,
            m,
            pre,
            act,
            f,
        },
    )
}

/// Returns the gradients w.r.t. the block input and the activated time embedding.
fn block_backward(
    p: &Params,
    b: &BlockIds,
    c: &BlockCache,
    temb_act: &Array2<f64>,
    dx3: Array2<f64>,
    grads: &mut Params,
) -> (Array2<f64>, Array2<f64>) {
    let d = dx3.ncols();
    let df = &dx3 * &gate(&c.modv, 5, d);
    let dgate2 = (&dx3 * &c.f).sum_axis(Axis(0));
    let dact = {
        let (gw, gb) = two_mut(grads, b.fc2_w, b.fc2_b);
        linear_backward(&c.act.view(), p.get(b.fc2_w), &df, gw, gb)
    };
    let dpre = gelu_backward(&c.pre, &dact);
    let dm = {
        let (gw, gb) = two_mut(grads, b.fc1_w, b.fc1_b);
        linear_backward(&c.m.view(), p.get(b.fc1_w), &dpre, gw, gb)
    };
    let (dm0, dmod2) = modulate_backward(&c.m0, &c.modv, 3, &dm);
    let mut dx2 = dx3;
    {
        let (gg, gb) = two_mut(grads, b.ln2_g, b.ln2_b);
        dx2 += &layer_norm_backward(&c.ln2, p.get(b.ln2_g), &dm0, gg, gb);
    }
    let do_ = &dx2 * &gate(&c.modv, 2, d);
    let dgate1 = (&dx2 * &c.o).sum_axis(Axis(0));
    let dattn = {
        let (gw, gb) = two_mut(grads, b.proj_w, b.proj_b);
        linear_backward(&c.attn.view(), p.get(b.proj_w), &do_, gw, gb)
    };
    let dqkv = attention_backward(&c.qkv, &c.probs, &dattn);
    let da = {
        let (gw, gb) = two_mut(grads, b.qkv_w, b.qkv_b);
        linear_backward(&c.a.view(), p.get(b.qkv_w), &dqkv, gw, gb)
    };
    let (da0, dmod1) = modulate_backward(&c.a0, &c.modv, 0, &da);
    let mut dx = dx2;
    {
        let (gg, gb) = two_mut(grads, b.ln1_g, b.ln1_b);
        dx += &layer_norm_backward(&c.ln1, p.get(b.ln1_g), &da0, gg, gb);
    }
    let mut dmod = dmod1 + dmod2;
    dmod.slice_mut(s![0, 2 * d..3 * d]).assign(&dgate1);
    dmod.slice_mut(s![0, 5 * d..6 * d]).assign(&dgate2);
    let dtemb_act = {
        let (gw, gb) = two_mut(grads, b.ada_w, b.ada_b);
        linear_backward(&temb_act.view(), p.get(b.ada_w), &dmod, gw, gb)
    };
    (dx, dtemb_act)
}

/// `(H, W, C)` image to `(H/p * W/p, p*p*C)` patch rows; patch order is
/// row-major over the patch grid, entries ordered `(dy, dx, c)`.
fn patchify(img: &Array3<f64>, p: usize) -> Array2<f64> {
    let (h, w, c) = img.dim();
    let (ph, pw) = (h / p, w / p);
    let mut out = Array2::zeros((ph * pw, p * p * c));
    for pr in 0..ph {
        for pc in 0..pw {
            let mut row = out.row_mut(pr * pw + pc);
            let src = img.slice(s![pr * p..(pr + 1) * p, pc * p..(pc + 1) * p, ..]);
            for (dst, v) in row.iter_mut().zip(src.iter()) {
                *dst = *v;
            }
        }
    }
    out
}

fn unpatchify(tokens: &Array2<f64>, layout: &LayoutSpec, p: usize) -> Array3<f64> {
    let (h, w, c) = (layout.grid_h(), layout.grid_w(), layout.channels);
    let pw = w / p;
    let mut out = Array3::zeros((h, w, c));
    for (i, row) in tokens.rows().into_iter().enumerate() {
        let (pr, pc) = (i / pw, i % pw);
        let mut dst = out.slice_mut(s![pr * p..(pr + 1) * p, pc * p..(pc + 1) * p, ..]);
        for (d, v) in dst.iter_mut().zip(row.iter()) {
            *d = *v;
        }
    }
    out
}

/// Fixed 2-D sinusoidal positions of the patch grid of the whole packed image:
/// the first half of the channels encodes the patch row, the second half the
/// patch column.
fn position_embedding(layout: &LayoutSpec, cfg: &ModelConfig) -> Array2<f64> {
    let p = cfg.patch_size;
    let (ph, pw) = (layout.grid_h() / p, layout.grid_w() / p);
    let half = cfg.embed_dim / 2;
    let mut out = Array2::zeros((ph * pw, cfg.embed_dim));
    for pr in 0..ph {
        let row_enc = sinusoid(pr as f64, half);
        for pc in 0..pw {
            let col_enc = sinusoid(pc as f64, half);
            let mut dst = out.row_mut(pr * pw + pc);
            dst.slice_mut(s![..half]).assign(&row_enc);
            dst.slice_mut(s![half..]).assign(&col_enc);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::standard_normal_like;

    fn tiny() -> ModelConfig {
        ModelConfig {
            patch_size: 2,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            cond_vocab: Label::COUNT,
            time_embed_dim: 4,
            frame_h: 4,
            frame_w: 4,
            channels: 1,
        }
    }

    #[test]
    fn patchify_roundtrip() {
        let layout = LayoutSpec::new(2, 3, 4, 4, 2).unwrap();
        let img = Array3::from_shape_fn(layout.grid_shape(), |(y, x, c)| {
            (y * 100 + x * 3 + c) as f64
        });
        let tokens = patchify(&img, 2);
        assert_eq!(tokens.dim(), (4 * 6, 8));
        assert_eq!(unpatchify(&tokens, &layout, 2), img);
    }

    #[test]
    fn invalid_configs() {
        let mut c = tiny();
        c.patch_size = 3;
        assert!(matches!(Model::init(c, 0), Err(Error::InvalidConfig(_))));
        let mut c = tiny();
        c.heads = 3;
        assert!(Model::init(c, 0).is_err());
        let mut c = tiny();
        c.cond_vocab = 2;
        assert!(Model::init(c, 0).is_err());
    }

    #[test]
    fn token_cells_follow_layout() {
        let m = Model::init(tiny(), 1).unwrap();
        let layout = LayoutSpec::new(2, 2, 4, 4, 1).unwrap();
        let cond = Condition::new(&layout, vec![Label::Motion]).unwrap();
        let kinds = m.token_kinds(&layout, &cond);
        // 8x8 image, patch 2 -> 4x4 patches, 2 condition tokens
        assert_eq!(kinds.len(), 18);
        assert_eq!(kinds[0], TokenKind::Image { row: 0, col: 0 });
        assert_eq!(kinds[3], TokenKind::Image { row: 0, col: 1 });
        assert_eq!(kinds[8], TokenKind::Image { row: 1, col: 0 });
        assert_eq!(kinds[15], TokenKind::Image { row: 1, col: 1 });
        assert_eq!(kinds[16], TokenKind::Condition);
    }

    #[test]
    fn rejects_mismatched_inputs() {
        let m = Model::init(tiny(), 1).unwrap();
        let layout = LayoutSpec::new(2, 2, 4, 4, 1).unwrap();
        let x = GridTensor::zeros(layout);
        let cond = Condition::new(&layout, vec![]).unwrap();
        assert!(matches!(
            m.predict_velocity(&x, 1.5, &cond),
            Err(Error::TOutOfRange(_))
        ));
        let other = LayoutSpec::new(1, 2, 4, 4, 1).unwrap();
        let wrong = Condition::new(&other, vec![]).unwrap();
        assert!(matches!(
            m.predict_velocity(&x, 0.5, &wrong),
            Err(Error::GeometryMismatch(_))
        ));
        let bad_frames = LayoutSpec::new(2, 2, 6, 6, 1).unwrap();
        assert!(matches!(
            m.predict_velocity(&GridTensor::zeros(bad_frames), 0.5, &Condition::new(&bad_frames, vec![]).unwrap()),
            Err(Error::ShapeMismatch(_))
        ));
    }

    /// A model with every parameter (including the zero-initialized
    /// modulation) perturbed, so no gradient path is trivially zero.
    fn scrambled(seed: u64) -> Model {
        use rand_distr::{Distribution, Normal};
        let mut m = Model::init(tiny(), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let n = Normal::new(0.0, 0.2).unwrap();
        for t in m.params_mut().tensors_mut() {
            t.mapv_inplace(|v| v + n.sample(&mut rng));
        }
        m
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut m = scrambled(5);
        let layout = LayoutSpec::new(2, 2, 4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = standard_normal_like(&GridTensor::zeros(layout), &mut rng);
        let w = standard_normal_like(&x, &mut rng);
        let cond = Condition::new(&layout, vec![Label::Motion, Label::ShapeSquare]).unwrap();
        let (_, cache) = m.forward(&x, 0.7, &cond).unwrap();
        let mut grads = m.params().zeros_like();
        m.backward(&cache, w.data(), &mut grads);
        let h = 1e-5;
        for id in 0..m.params().len() {
            let shape = m.params().tensors()[id].dim();
            let name = m.params().names()[id].clone();
            // skip embedding rows that this condition does not touch
            let idx = if name == "layout_embed" {
                (cond.layout_token as usize, shape.1 - 1)
            } else if name == "label_embed" {
                (Label::ShapeSquare.id(), 0)
            } else {
                (shape.0 - 1, shape.1 / 2)
            };
            let orig = m.params().tensors()[id][idx];
            let mut eval = |v: f64| {
                m.params_mut().tensors_mut()[id][idx] = v;
                let y = m.predict_velocity(&x, 0.7, &cond).unwrap();
                (y.data() * w.data()).sum()
            };
            let fd = (eval(orig + h) - eval(orig - h)) / (2.0 * h);
            eval(orig);
            let an = grads.tensors()[id][idx];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "{name}{idx:?}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = scrambled(3);
        let layout = LayoutSpec::new(2, 2, 4, 4, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = standard_normal_like(&GridTensor::zeros(layout), &mut rng);
        let w = standard_normal_like(&x, &mut rng);
        let cond = Condition::new(&layout, vec![Label::RotateCw]).unwrap();
        let (_, cache) = m.forward(&x, 0.4, &cond).unwrap();
        let mut grads = m.params().zeros_like();
        let dx = m.backward(&cache, w.data(), &mut grads);
        let objective = |x: &GridTensor| {
            let y = m.predict_velocity(x, 0.4, &cond).unwrap();
            (y.data() * w.data()).sum()
        };
        let h = 1e-5;
        for idx in [[0, 0, 0], [3, 5, 0], [7, 7, 0]] {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", dx[idx]);
        }
    }
}
