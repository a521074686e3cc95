//! Host feed-forward maps producing the dominant hidden map `b(x)`.
//!
//! Both hosts expand `C → 4C`. [`BilinearHost`] is a simplified grouped
//! bilinear stand-in for a factorized bilinear operator whose internals are
//! not published; it is labelled as such wherever results are reported.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::params::{fan_in_normal, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};
use crate::tokens::TokenMap;

pub const EXPANSION: usize = 4;

/// Which host to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HostKind {
    Mlp,
    Bilinear { groups: usize },
}

impl HostKind {
    pub fn label(&self) -> &'static str {
        match self {
            HostKind::Mlp => "mlp",
            HostKind::Bilinear { .. } => "bilinear",
        }
    }

    /// Human-readable description, flagging the stand-in.
    pub fn description(&self) -> String {
        match self {
            HostKind::Mlp => "mlp (gelu, 4x expansion)".to_string(),
            HostKind::Bilinear { groups } => format!(
                "bilinear stand-in (grouped, g={groups}; simplified, not a faithful AFBO)"
            ),
        }
    }
}

/// Grouped `C → 4C` projection: block-diagonal with `groups` blocks.
#[derive(Debug, Clone)]
pub struct GroupedLinear {
    pub blocks: Vec<ParamId>,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl GroupedLinear {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        groups: usize,
    ) -> Self {
        let (gi, go) = (in_dim / groups, out_dim / groups);
        let blocks = (0..groups)
            .map(|k| store.add(format!("{name}.w{k}"), fan_in_normal(rng, gi, go), true))
            .collect();
        let bias = store.add(format!("{name}.b"), Tensor::zeros([out_dim]), false);
        Self {
            blocks,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let groups = self.blocks.len();
        let gi = self.in_dim / groups;
        let y = if groups == 1 {
            let w = g.param(store, self.blocks[0]);
            g.matmul(x, w)?
        } else {
            let mut parts = Vec::with_capacity(groups);
            for (k, &blk) in self.blocks.iter().enumerate() {
                let xs = g.slice_cols(x, k * gi, gi)?;
                let w = g.param(store, blk);
                parts.push(g.matmul(xs, w)?);
            }
            g.concat_cols(&parts)?
        };
        let b = g.param(store, self.bias);
        g.add_bias(y, b)
    }

    pub fn numel(&self) -> usize {
        self.in_dim * self.out_dim / self.blocks.len() + self.out_dim
    }
}

#[derive(Debug, Clone)]
pub struct MlpHost {
    pub w_in: GroupedLinear,
}

#[derive(Debug, Clone)]
pub struct BilinearHost {
    pub wa: GroupedLinear,
    pub wb: GroupedLinear,
    pub groups: usize,
}

#[derive(Debug, Clone)]
pub enum Host {
    Mlp(MlpHost),
    Bilinear(BilinearHost),
}

/// `b(x)` together with the pre-activations a shared-projection complement
/// may slice.
#[derive(Debug, Clone, Copy)]
pub struct HostOutput {
    pub hidden: TokenMap,
    /// MLP: `x·W_in + b`. Bilinear: branch-a pre-activation.
    pub pre_a: Var,
    /// Bilinear only: branch-b pre-activation (before gelu).
    pub pre_b: Option<Var>,
}

impl Host {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        kind: HostKind,
        channels: usize,
    ) -> std::result::Result<Self, TensorError> {
        let hidden = EXPANSION * channels;
        match kind {
            HostKind::Mlp => Ok(Host::Mlp(MlpHost {
                w_in: GroupedLinear::init(store, rng, &format!("{name}.w_in"), channels, hidden, 1),
            })),
            HostKind::Bilinear { groups } => {
                if groups == 0 || !channels.is_multiple_of(groups) {
                    return Err(TensorError::InvalidArgument {
                        op: "bilinear_host",
                        reason: format!("groups={groups} must divide C={channels} and 4C={hidden}"),
                    });
                }
                Ok(Host::Bilinear(BilinearHost {
                    wa: GroupedLinear::init(store, rng, &format!("{name}.wa"), channels, hidden, groups),
                    wb: GroupedLinear::init(store, rng, &format!("{name}.wb"), channels, hidden, groups),
                    groups,
                }))
            }
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            Host::Mlp(h) => h.w_in.in_dim,
            Host::Bilinear(h) => h.wa.in_dim,
        }
    }

    pub fn hidden_width(&self) -> usize {
        EXPANSION * self.in_channels()
    }

    pub fn numel(&self) -> usize {
        match self {
            Host::Mlp(h) => h.w_in.numel(),
            Host::Bilinear(h) => h.wa.numel() + h.wb.numel(),
        }
    }

    /// Produces the hidden map `b(x)` of shape `(B, 4C, H, W)`.
    pub fn forward<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: TokenMap,
    ) -> Result<HostOutput> {
        if x.channels != self.in_channels() {
            return Err(TensorError::ShapeMismatch {
                op: "host_forward",
                lhs: vec![x.batch, x.channels, x.height, x.width],
                rhs: vec![self.in_channels()],
            });
        }
        match self {
            Host::Mlp(h) => {
                let pre = h.w_in.forward(g, store, x.var)?;
                let act = g.gelu(pre)?;
                Ok(HostOutput {
                    hidden: x.with(act, h.w_in.out_dim),
                    pre_a: pre,
                    pre_b: None,
                })
            }
            Host::Bilinear(h) => {
                let a = h.wa.forward(g, store, x.var)?;
                let b = h.wb.forward(g, store, x.var)?;
                let gb = g.gelu(b)?;
                let prod = g.mul(a, gb)?;
                Ok(HostOutput {
                    hidden: x.with(prod, h.wa.out_dim),
                    pre_a: a,
                    pre_b: Some(b),
                })
            }
        }
    }
}
