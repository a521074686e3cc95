//! Small pre-norm vision transformer with a pluggable FFN and an optional
//! penultimate-residual readout.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::complement::{ComplementConfig, ComplementTrace, OqcParams, VariantKind};
use crate::hosts::{Host, HostKind, EXPANSION};
use crate::params::{fan_in_normal, normal, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};
use crate::tokens::TokenMap;

pub const LN_EPS: f64 = 1e-5;

/// Host × optional complement.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FfnVariant {
    pub host: HostKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub complement: Option<ComplementConfig>,
}

impl FfnVariant {
    pub fn label(&self) -> String {
        match &self.complement {
            None => self.host.label().to_string(),
            Some(c) => format!("{}+{}-r{}", self.host.label(), c.kind.label(), c.rank),
        }
    }

    pub fn kind(&self) -> Option<VariantKind> {
        self.complement.map(|c| c.kind)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub n_classes: usize,
    pub ffn: FfnVariant,
    pub use_pr_readout: bool,
}

fn default_in_channels() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("backbone.{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl BackboneConfig {
    /// Desk-scale defaults: depth 4, width 64, 4 heads, patch 4, 32×32 input.
    pub fn desk_default(ffn: FfnVariant, n_classes: usize) -> Self {
        Self {
            depth: 4,
            width: 64,
            heads: 4,
            patch: 4,
            image_size: 32,
            in_channels: 3,
            n_classes,
            ffn,
            use_pr_readout: false,
        }
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn hidden(&self) -> usize {
        EXPANSION * self.width
    }

    pub fn validate(&self) -> std::result::Result<(), ConfigError> {
        let bad = |field, reason: String| Err(ConfigError::Invalid { field, reason });
        if self.depth == 0 {
            return bad("depth", "must be positive".into());
        }
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return bad(
                "heads",
                format!("width {} must be a positive multiple of heads {}", self.width, self.heads),
            );
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return bad(
                "patch",
                format!("image_size {} must be divisible by patch {}", self.image_size, self.patch),
            );
        }
        if self.n_classes < 2 {
            return bad("n_classes", "need at least two classes".into());
        }
        if self.in_channels == 0 {
            return bad("in_channels", "must be positive".into());
        }
        if self.use_pr_readout && self.depth < 2 {
            return bad("use_pr_readout", format!("needs depth ≥ 2, got {}", self.depth));
        }
        if let HostKind::Bilinear { groups } = self.ffn.host {
            if groups == 0 || !self.width.is_multiple_of(groups) {
                return bad("ffn.host.groups", format!("{groups} must divide width {}", self.width));
            }
        }
        if let Some(c) = &self.ffn.complement {
            if c.rank == 0 || c.rank >= self.width {
                return bad(
                    "ffn.complement.rank",
                    format!("{} must satisfy 0 < r < width {}", c.rank, self.width),
                );
            }
            if c.kind == VariantKind::AblationSharedProjection && 2 * c.rank > self.hidden() {
                return bad("ffn.complement.rank", "shared projection needs 2r ≤ 4·width".into());
            }
        }
        Ok(())
    }

    /// Parameter count from the architecture alone.
    pub fn analytic_param_count(&self) -> usize {
        let c = self.width;
        let h = self.hidden();
        let patch_dim = self.in_channels * self.patch * self.patch;
        let stem = patch_dim * c + c + self.tokens() * c;
        let host = match self.ffn.host {
            HostKind::Mlp => c * h + h,
            HostKind::Bilinear { groups } => 2 * (c * h / groups + h),
        };
        let complement = self
            .ffn
            .complement
            .as_ref()
            .map_or(0, |cc| OqcParams::count(cc, c, h));
        let block = 4 * c + (c * 3 * c + 3 * c) + (c * c + c) + host + (h * c + c) + complement;
        let head = 2 * c + usize::from(self.use_pr_readout) + c * self.n_classes + self.n_classes;
        stem + self.depth * block + head
    }
}

#[derive(Debug, Clone)]
struct FfnParams {
    host: Host,
    complement: Option<OqcParams>,
    w_out: ParamId,
    b_out: ParamId,
}

#[derive(Debug, Clone)]
struct BlockParams {
    ln1: (ParamId, ParamId),
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ffn: FfnParams,
}

#[derive(Debug, Clone)]
struct Layout {
    patch: (ParamId, ParamId),
    pos: ParamId,
    blocks: Vec<BlockParams>,
    final_ln: (ParamId, ParamId),
    gamma: Option<ParamId>,
    head: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct VitModel<T> {
    pub cfg: BackboneConfig,
    pub params: ParamStore<T>,
    layout: Layout,
}

/// Everything a forward pass exposes beyond the logits.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    /// Classifier input `z`, `[B, C]`.
    pub readout: Var,
    /// `h_1 … h_L`.
    pub layers: Vec<TokenMap>,
    /// One entry per block when a complement is configured.
    pub traces: Vec<ComplementTrace>,
}

fn ln_params<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.g"), Tensor::full([c], T::one()), false),
        store.add(format!("{name}.b"), Tensor::zeros([c]), false),
    )
}

fn linear_params<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.w"), fan_in_normal(rng, fan_in, fan_out), true),
        store.add(format!("{name}.b"), Tensor::zeros([fan_out]), false),
    )
}

impl<T: Real> VitModel<T> {
    /// Builds a model whose every parameter is drawn from `seed`.
    pub fn init(cfg: BackboneConfig, seed: u64) -> std::result::Result<Self, ConfigError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.width;
        let h = cfg.hidden();
        let patch_dim = cfg.in_channels * cfg.patch * cfg.patch;
        let patch = linear_params(&mut store, &mut rng, "patch", patch_dim, c);
        let pos = store.add("pos", normal(&mut rng, [cfg.tokens(), c], 0.02), false);
        let to_cfg = |e: TensorError| ConfigError::Invalid {
            field: "ffn",
            reason: e.to_string(),
        };
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = format!("block{l}");
            let ln1 = ln_params(&mut store, &format!("{name}.ln1"), c);
            let qkv = linear_params(&mut store, &mut rng, &format!("{name}.qkv"), c, 3 * c);
            let proj = linear_params(&mut store, &mut rng, &format!("{name}.proj"), c, c);
            let ln2 = ln_params(&mut store, &format!("{name}.ln2"), c);
            let host = Host::init(&mut store, &mut rng, &format!("{name}.ffn.host"), cfg.ffn.host, c)
                .map_err(to_cfg)?;
            let complement = match cfg.ffn.complement {
                Some(cc) => Some(
                    OqcParams::init(&mut store, &mut rng, &format!("{name}.ffn.oqc"), cc, c, h)
                        .map_err(to_cfg)?,
                ),
                None => None,
            };
            let (w_out, b_out) = linear_params(&mut store, &mut rng, &format!("{name}.ffn.out"), h, c);
            blocks.push(BlockParams {
                ln1,
                qkv,
                proj,
                ln2,
                ffn: FfnParams {
                    host,
                    complement,
                    w_out,
                    b_out,
                },
            });
        }
        let final_ln = ln_params(&mut store, "final_ln", c);
        let gamma = cfg
            .use_pr_readout
            .then(|| store.add("readout.gamma", Tensor::zeros([1]), false));
        let head = linear_params(&mut store, &mut rng, "head", c, cfg.n_classes);
        Ok(Self {
            cfg,
            params: store,
            layout: Layout {
                patch,
                pos,
                blocks,
                final_ln,
                gamma,
                head,
            },
        })
    }

    /// Same architecture at another precision.
    pub fn cast<U: Real>(&self) -> VitModel<U> {
        VitModel {
            cfg: self.cfg,
            params: self.params.cast(),
            layout: self.layout.clone(),
        }
    }

    /// Replaces the parameter values, e.g. from a checkpoint. Names and
    /// shapes must match exactly.
    pub fn load_params(&mut self, params: ParamStore<T>) -> std::result::Result<(), ConfigError> {
        let compatible = params.len() == self.params.len()
            && self.params.iter().zip(params.iter()).all(|((_, a), (_, b))| {
                a.name == b.name && a.value.shape() == b.value.shape()
            });
        if !compatible {
            return Err(ConfigError::Invalid {
                field: "checkpoint",
                reason: "parameter names or shapes differ from the configured architecture".into(),
            });
        }
        self.params = params;
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    pub fn gamma_id(&self) -> Option<ParamId> {
        self.layout.gamma
    }

    pub fn forward(&self, g: &mut Graph<T>, images: &Tensor<T>) -> Result<ForwardOutput> {
        let tokens = patch_embed(g, &self.params, images, self.cfg.patch, self.layout.patch)?;
        let pos = g.param(&self.params, self.layout.pos);
        let mut h = tokens.with(g.add_tiled(tokens.var, pos)?, tokens.channels);

        let mut layers = Vec::with_capacity(self.cfg.depth);
        let mut traces = Vec::new();
        for block in &self.layout.blocks {
            let (next, trace) = self.block_forward(g, block, h)?;
            h = next;
            layers.push(h);
            traces.extend(trace);
        }

        let last = g.mean_tokens(h.var, h.tokens())?;
        let readout = match self.layout.gamma {
            Some(gamma) => {
                let prev = layers[layers.len() - 2];
                let pooled_prev = g.mean_tokens(prev.var, prev.tokens())?;
                let gamma = g.param(&self.params, gamma);
                pr_readout(g, last, pooled_prev, gamma)?
            }
            None => last,
        };
        let (lg, lb) = self.layout.final_ln;
        let (lg, lb) = (g.param(&self.params, lg), g.param(&self.params, lb));
        let normed = g.layernorm(readout, lg, lb, T::lit(LN_EPS))?;
        let logits = linear(g, &self.params, normed, self.layout.head)?;
        Ok(ForwardOutput {
            logits,
            readout,
            layers,
            traces,
        })
    }

    fn block_forward(
        &self,
        g: &mut Graph<T>,
        block: &BlockParams,
        h: TokenMap,
    ) -> Result<(TokenMap, Option<ComplementTrace>)> {
        let store = &self.params;
        let eps = T::lit(LN_EPS);
        let a = layernorm(g, store, h.var, block.ln1, eps)?;
        let attn = attention(g, store, a, h.batch, h.tokens(), self.cfg.heads, block.qkv, block.proj)?;
        let h1 = g.add(h.var, attn)?;

        let f = layernorm(g, store, h1, block.ln2, eps)?;
        let (ffn_out, trace) = ffn_forward(g, store, &block.ffn, h.with(f, h.channels))?;
        let h2 = g.add(h1, ffn_out)?;
        Ok((h.with(h2, h.channels), trace))
    }
}

fn linear<T: Real>(g: &mut Graph<T>, store: &ParamStore<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let w = g.param(store, w);
    let b = g.param(store, b);
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

fn layernorm<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    (gain, bias): (ParamId, ParamId),
    eps: T,
) -> Result<Var> {
    let gain = g.param(store, gain);
    let bias = g.param(store, bias);
    g.layernorm(x, gain, bias, eps)
}

/// Rearranges `[B, C, S, S]` images into `[B·(S/p)², C·p·p]` patch rows.
pub fn patchify<T: Real>(images: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let s = images.shape();
    if s.len() != 4 || s[2] != s[3] {
        return Err(TensorError::InvalidArgument {
            op: "patch_embed",
            reason: format!("expected square (B,C,S,S) images, got {s:?}"),
        });
    }
    let (b, c, size) = (s[0], s[1], s[2]);
    if patch == 0 || size % patch != 0 {
        return Err(TensorError::InvalidArgument {
            op: "patch_embed",
            reason: format!("image size {size} is not divisible by patch {patch}"),
        });
    }
    let grid = size / patch;
    let dim = c * patch * patch;
    let src = images.data();
    let mut out = vec![T::zero(); b * grid * grid * dim];
    for bi in 0..b {
        for py in 0..grid {
            for px in 0..grid {
                let row = (bi * grid + py) * grid + px;
                let dst = &mut out[row * dim..(row + 1) * dim];
                for ci in 0..c {
                    for dy in 0..patch {
                        let y = py * patch + dy;
                        let base = ((bi * c + ci) * size + y) * size + px * patch;
                        let o = (ci * patch + dy) * patch;
                        dst[o..o + patch].copy_from_slice(&src[base..base + patch]);
                    }
                }
            }
        }
    }
    Tensor::new([b * grid * grid, dim], out)
}

/// Non-overlapping patch flattening followed by a linear projection; keeps
/// the `(S/p)×(S/p)` token grid.
pub fn patch_embed<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    images: &Tensor<T>,
    patch: usize,
    proj: (ParamId, ParamId),
) -> Result<TokenMap> {
    let rows = patchify(images, patch)?;
    let (b, grid) = (images.shape()[0], images.shape()[2] / patch);
    let x = g.input(rows);
    let y = linear(g, store, x, proj)?;
    TokenMap::wrap(g, y, b, grid, grid)
}

/// Scaled dot-product multi-head self-attention over each sample's tokens.
#[allow(clippy::too_many_arguments)]
fn attention<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    x: Var,
    batch: usize,
    tokens: usize,
    heads: usize,
    qkv: (ParamId, ParamId),
    proj: (ParamId, ParamId),
) -> Result<Var> {
    let c = g.value(x).last_dim();
    let dh = c / heads;
    let fused = linear(g, store, x, qkv)?;
    let q = g.slice_cols(fused, 0, c)?;
    let k = g.slice_cols(fused, c, c)?;
    let v = g.slice_cols(fused, 2 * c, c)?;
    let q = g.split_heads(q, batch, tokens, heads)?;
    let k = g.split_heads(k, batch, tokens, heads)?;
    let v = g.split_heads(v, batch, tokens, heads)?;
    let scores = g.bmm(q, k, true)?;
    let scores = g.affine(scores, T::one() / T::lit(dh as f64).sqrt(), T::zero())?;
    let weights = g.softmax(scores)?;
    let mixed = g.bmm(weights, v, false)?;
    let merged = g.merge_heads(mixed, batch, tokens, heads)?;
    linear(g, store, merged, proj)
}

fn ffn_forward<T: Real>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    ffn: &FfnParams,
    x: TokenMap,
) -> Result<(Var, Option<ComplementTrace>)> {
    let host_out = ffn.host.forward(g, store, x)?;
    let mut hidden = host_out.hidden.var;
    let mut aux = match &ffn.complement {
        Some(c) => Some(c.auxiliary(g, store, x, &ffn.host, &host_out)?),
        None => None,
    };
    if let (Some(c), Some(a)) = (&ffn.complement, aux.as_mut()) {
        if c.cfg.kind == VariantKind::Full {
            hidden = c.inject_hidden(g, store, hidden, a)?;
        }
    }
    let mut out = linear(g, store, hidden, (ffn.w_out, ffn.b_out))?;
    if let (Some(c), Some(a)) = (&ffn.complement, aux.as_mut()) {
        if c.cfg.kind != VariantKind::Full {
            out = c.inject_output(g, store, x, out, a)?;
        }
    }
    Ok((out, aux.map(|a| a.trace)))
}

/// `z = pooled(h_L) + σ(γ)·pooled(h_{L−1})` on already pooled `[B, C]` inputs.
pub fn pr_readout<T: Real>(g: &mut Graph<T>, pooled_last: Var, pooled_prev: Var, gamma: Var) -> Result<Var> {
    let s = g.sigmoid(gamma)?;
    let scaled = g.scale(pooled_prev, s)?;
    g.add(pooled_last, scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::complement::{GateArity, InnerProductScope};

    fn cfg(ffn: FfnVariant) -> BackboneConfig {
        BackboneConfig {
            depth: 2,
            width: 8,
            heads: 2,
            patch: 4,
            image_size: 8,
            in_channels: 3,
            n_classes: 3,
            ffn,
            use_pr_readout: true,
        }
    }

    fn all_variants() -> Vec<FfnVariant> {
        let mut v = Vec::new();
        for host in [HostKind::Mlp, HostKind::Bilinear { groups: 2 }] {
            v.push(FfnVariant { host, complement: None });
            for kind in VariantKind::ALL {
                v.push(FfnVariant {
                    host,
                    complement: Some(ComplementConfig {
                        kind,
                        rank: 3,
                        scope: InnerProductScope::PerToken,
                        gate_arity: GateArity::PerToken,
                    }),
                });
            }
        }
        v
    }

    #[test]
    fn patch_grid_arithmetic() {
        let img = Tensor::<f64>::zeros([2, 3, 8, 8]);
        let rows = patchify(&img, 4).unwrap();
        assert_eq!(rows.shape(), &[2 * 4, 48]);
        assert!(patchify(&img, 3).is_err());
    }

    #[test]
    fn single_patch_matches_hand_matmul() {
        let model = VitModel::<f64>::init(cfg(all_variants()[0]), 3).unwrap();
        let img = Tensor::from_fn([1, 3, 4, 4], |i| (i as f64 * 0.1).sin());
        let mut g = Graph::new();
        let tm = patch_embed(&mut g, &model.params, &img, 4, model.layout.patch).unwrap();
        assert_eq!((tm.height, tm.width, tm.channels), (1, 1, 8));
        let w = model.params.get(model.layout.patch.0).value.data();
        for j in 0..8 {
            // feature order is (channel, row, col) within the patch
            let mut expect = 0.0;
            for ci in 0..3 {
                for y in 0..4 {
                    for x in 0..4 {
                        let f = (ci * 4 + y) * 4 + x;
                        expect += img.data()[(ci * 4 + y) * 4 + x] * w[f * 8 + j];
                    }
                }
            }
            assert!((g.value(tm.var).data()[j] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn analytic_count_matches_every_variant() {
        for ffn in all_variants() {
            for pr in [false, true] {
                let mut c = cfg(ffn);
                c.use_pr_readout = pr;
                let model = VitModel::<f32>::init(c, 0).unwrap();
                assert_eq!(model.param_count(), c.analytic_param_count(), "{}", ffn.label());
            }
        }
    }

    #[test]
    fn forward_shapes_for_every_variant() {
        let img = Tensor::<f64>::from_fn([2, 3, 8, 8], |i| ((i * 7 % 13) as f64 - 6.0) / 6.0);
        for ffn in all_variants() {
            let model = VitModel::<f64>::init(cfg(ffn), 1).unwrap();
            let mut g = Graph::new();
            let out = model.forward(&mut g, &img).unwrap();
            assert_eq!(g.shape(out.logits), &[2, 3]);
            assert_eq!(g.shape(out.readout), &[2, 8]);
            assert_eq!(out.layers.len(), 2);
            assert_eq!(out.traces.len(), if ffn.complement.is_some() { 2 } else { 0 });
            assert!(g.value(out.logits).all_finite());
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = cfg(all_variants()[0]);
        let mut c = base;
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = base;
        c.patch = 3;
        assert!(c.validate().is_err());
        let mut c = base;
        c.depth = 1;
        let err = c.validate().unwrap_err();
        assert!(err.to_string().contains("use_pr_readout"));
        c.use_pr_readout = false;
        assert!(c.validate().is_ok());
    }
}
