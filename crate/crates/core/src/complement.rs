//! The orthogonal quadratic complement family.
//!
//! A low-rank quadratic feature `q = rmsnorm(Ux ⊙ Vx)` is built from the
//! block input, the host's hidden map is projected into the same rank-`r`
//! space as `m = rmsnorm(P·b)`, and only the part of `q` orthogonal to `m`
//! is injected back:
//!
//! ```text
//! residual = q − ⟨q, m⟩ / (‖m‖² + ε) · m
//! q⊥       = rmsnorm(residual)
//! ```
//!
//! `Full` lifts `q⊥` to the hidden width and adds it to `b(x)` before the
//! block's output projection. Every other kind lifts to `C`, normalizes the
//! lifted update `Δ = rmsnorm(O·q⊥)` and adds it after the output projection.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::hosts::{Host, HostOutput};
use crate::params::{fan_in_normal, normal, ParamId, ParamStore};
use crate::tensor::{Graph, Real, Result, Tensor, TensorError, Var};
use crate::tokens::TokenMap;

/// Shared by every rmsnorm and the projection denominator.
pub const EPS: f64 = 1e-6;

/// Standard deviation of the static gate's initial logit.
pub const STATIC_GATE_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Full,
    LowRank,
    StaticGate,
    DynamicGate,
    /// `u`, `v` are slices of the host's own input projection.
    AblationSharedProjection,
    /// Scalar-gated quadratic branch with no orthogonalization.
    AblationNoOrtho,
    /// Low-rank orthogonal complement injected with mixing coefficient 1.
    AblationNoGate,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Full,
        VariantKind::LowRank,
        VariantKind::StaticGate,
        VariantKind::DynamicGate,
        VariantKind::AblationSharedProjection,
        VariantKind::AblationNoOrtho,
        VariantKind::AblationNoGate,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            VariantKind::Full => "oqc-full",
            VariantKind::LowRank => "oqc-lr",
            VariantKind::StaticGate => "oqc-static",
            VariantKind::DynamicGate => "oqc-dynamic",
            VariantKind::AblationSharedProjection => "ablation-shared-projection",
            VariantKind::AblationNoOrtho => "ablation-no-ortho",
            VariantKind::AblationNoGate => "ablation-no-gate",
        }
    }

    pub fn orthogonalizes(&self) -> bool {
        !matches!(self, VariantKind::AblationNoOrtho)
    }

    pub fn is_ablation(&self) -> bool {
        matches!(
            self,
            VariantKind::AblationSharedProjection | VariantKind::AblationNoOrtho | VariantKind::AblationNoGate
        )
    }

    /// Whether the variant reports gate statistics.
    pub fn is_gated(&self) -> bool {
        matches!(self, VariantKind::StaticGate | VariantKind::DynamicGate)
    }

    fn has_beta(&self) -> bool {
        !matches!(self, VariantKind::DynamicGate | VariantKind::AblationNoGate)
    }
}

/// Reduction scope of `⟨q, m⟩` and `‖m‖²`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerProductScope {
    /// Each token's `r` channels form one vector.
    #[default]
    PerToken,
    /// All `r·H·W` entries of a sample form one vector.
    Global,
}

/// Output arity of the dynamic gate's 1×1 convolution.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateArity {
    /// One gate per token, broadcast across channels.
    #[default]
    PerToken,
    PerChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplementConfig {
    pub kind: VariantKind,
    pub rank: usize,
    #[serde(default)]
    pub scope: InnerProductScope,
    #[serde(default)]
    pub gate_arity: GateArity,
}

// ---------------------------------------------------------------- pure ops

/// `q = rmsnorm(x·U ⊙ x·V)` per token. `x` is `[N, C]`, `u`/`v` are `[C, r]`.
pub fn quadratic_feature<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    u: Var,
    v: Var,
    gain_q: Var,
    eps: T,
) -> Result<Var> {
    let ux = g.matmul(x, u)?;
    let vx = g.matmul(x, v)?;
    quadratic_from_projections(g, ux, vx, gain_q, eps)
}

pub fn quadratic_from_projections<T: Real>(
    g: &mut Graph<T>,
    ux: Var,
    vx: Var,
    gain_q: Var,
    eps: T,
) -> Result<Var> {
    let prod = g.mul(ux, vx)?;
    g.rmsnorm(prod, gain_q, eps)
}

/// `m = rmsnorm(b·P)` per token. `b` is `[N, hidden]`, `p` is `[hidden, r]`.
pub fn project_main<T: Real>(g: &mut Graph<T>, b: Var, p: Var, gain_m: Var, eps: T) -> Result<Var> {
    let pb = g.matmul(b, p)?;
    g.rmsnorm(pb, gain_m, eps)
}

#[derive(Debug, Clone, Copy)]
pub struct Orthogonalized {
    /// Pre-normalization residual, orthogonal to `m` up to `ε`.
    pub residual: Var,
    pub q_perp: Var,
}

/// Removes from `q` its component along `m`. `tokens` is the number of
/// tokens per sample; it is only used by [`InnerProductScope::Global`].
pub fn orthogonalize<T: Real>(
    g: &mut Graph<T>,
    q: Var,
    m: Var,
    eps: T,
    gain_perp: Var,
    scope: InnerProductScope,
    tokens: usize,
) -> Result<Orthogonalized> {
    if g.shape(q) != g.shape(m) {
        return Err(TensorError::ShapeMismatch {
            op: "orthogonalize",
            lhs: g.shape(q).to_vec(),
            rhs: g.shape(m).to_vec(),
        });
    }
    let shape = g.shape(q).to_vec();
    let residual = match scope {
        InnerProductScope::PerToken => project_out(g, q, m, eps)?,
        InnerProductScope::Global => {
            let rows = g.value(q).rows();
            let r = g.value(q).last_dim();
            if tokens == 0 || !rows.is_multiple_of(tokens) {
                return Err(TensorError::InvalidArgument {
                    op: "orthogonalize",
                    reason: format!("{rows} rows do not split into samples of {tokens} tokens"),
                });
            }
            let per_sample = [rows / tokens, tokens * r];
            let qs = g.reshape(q, &per_sample)?;
            let ms = g.reshape(m, &per_sample)?;
            let res = project_out(g, qs, ms, eps)?;
            g.reshape(res, &shape)?
        }
    };
    let q_perp = g.rmsnorm(residual, gain_perp, eps)?;
    Ok(Orthogonalized { residual, q_perp })
}

fn project_out<T: Real>(g: &mut Graph<T>, q: Var, m: Var, eps: T) -> Result<Var> {
    let qm = g.row_dot(q, m)?;
    let mm = g.row_dot(m, m)?;
    let denom = g.affine(mm, T::one(), eps)?;
    let coef = g.div(qm, denom)?;
    let along = g.mul_col(m, coef)?;
    g.sub(q, along)
}

/// `h = b + σ(β)·(q⊥·O)` in hidden space; `o` is `[r, hidden]`.
pub fn inject_full<T: Real>(g: &mut Graph<T>, b: Var, q_perp: Var, o: Var, beta: Var) -> Result<Var> {
    let lifted = g.matmul(q_perp, o)?;
    let alpha = g.sigmoid(beta)?;
    let upd = g.scale(lifted, alpha)?;
    g.add(b, upd)
}

/// `Δ = rmsnorm(q⊥·O)` with `o` of shape `[r, C]`.
pub fn lift_delta<T: Real>(g: &mut Graph<T>, q_perp: Var, o: Var, gain_delta: Var, eps: T) -> Result<Var> {
    let lifted = g.matmul(q_perp, o)?;
    g.rmsnorm(lifted, gain_delta, eps)
}

/// `h = b_out + σ(β)·rmsnorm(q⊥·O)`.
pub fn inject_lr<T: Real>(
    g: &mut Graph<T>,
    b_out: Var,
    q_perp: Var,
    o: Var,
    beta: Var,
    gain_delta: Var,
    eps: T,
) -> Result<Var> {
    let delta = lift_delta(g, q_perp, o, gain_delta, eps)?;
    inject_static_gate(g, b_out, delta, beta)
}

/// `h = b_out + σ(β)·Δ` with a standalone scalar gate logit.
pub fn inject_static_gate<T: Real>(g: &mut Graph<T>, b_out: Var, delta: Var, beta: Var) -> Result<Var> {
    let alpha = g.sigmoid(beta)?;
    let upd = g.scale(delta, alpha)?;
    g.add(b_out, upd)
}

/// `h = b_out + σ(x·w + b) ⊙ Δ`. With `w` of shape `[C, 1]` the gate is one
/// scalar per token broadcast over channels; with `[C, C]` it is per channel.
/// Returns the output and the post-sigmoid gate map.
pub fn inject_dynamic_gate<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    b_out: Var,
    delta: Var,
    gate_w: Var,
    gate_b: Var,
) -> Result<(Var, Var)> {
    let logits = g.matmul(x, gate_w)?;
    let logits = g.add_bias(logits, gate_b)?;
    let gate = g.sigmoid(logits)?;
    let upd = if g.value(gate).last_dim() == 1 {
        g.mul_col(delta, gate)?
    } else {
        g.mul(delta, gate)?
    };
    Ok((g.add(b_out, upd)?, gate))
}

/// `h = b_out + Δ` (mixing coefficient fixed to 1).
pub fn inject_ungated<T: Real>(g: &mut Graph<T>, b_out: Var, delta: Var) -> Result<Var> {
    g.add(b_out, delta)
}

// ---------------------------------------------------------------- params

#[derive(Debug, Clone)]
pub struct OqcParams {
    pub cfg: ComplementConfig,
    pub channels: usize,
    pub hidden: usize,
    /// `None` for the shared-projection ablation.
    pub u: Option<ParamId>,
    pub v: Option<ParamId>,
    pub p: ParamId,
    pub o: ParamId,
    pub gain_q: ParamId,
    pub gain_m: ParamId,
    pub gain_perp: Option<ParamId>,
    pub gain_delta: Option<ParamId>,
    pub beta: Option<ParamId>,
    pub gate_conv: Option<(ParamId, ParamId)>,
}

/// Graph nodes exposed for mechanism analysis.
#[derive(Debug, Clone, Copy)]
pub struct ComplementTrace {
    pub q: Var,
    pub m: Var,
    /// Absent when no orthogonalization ran.
    pub residual: Option<Var>,
    /// Post-sigmoid gate: `[1]` for scalar gates, `[N, 1|C]` for dynamic.
    pub gate: Option<Var>,
}

/// Auxiliary branch evaluated up to (not including) injection.
#[derive(Debug, Clone, Copy)]
pub struct Auxiliary {
    pub trace: ComplementTrace,
    /// `q⊥`, or `q` itself when orthogonalization is skipped.
    pub feature: Var,
}

impl OqcParams {
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: ComplementConfig,
        channels: usize,
        hidden: usize,
    ) -> std::result::Result<Self, TensorError> {
        let r = cfg.rank;
        if r == 0 || r >= channels {
            return Err(TensorError::InvalidArgument {
                op: "oqc_params",
                reason: format!("rank {r} must satisfy 0 < r < C = {channels}"),
            });
        }
        let shared = cfg.kind == VariantKind::AblationSharedProjection;
        if shared && 2 * r > hidden {
            return Err(TensorError::InvalidArgument {
                op: "oqc_params",
                reason: format!("shared projection needs 2r = {} ≤ hidden width {hidden}", 2 * r),
            });
        }
        let (u, v) = if shared {
            (None, None)
        } else {
            (
                Some(store.add(format!("{name}.u"), fan_in_normal(rng, channels, r), true)),
                Some(store.add(format!("{name}.v"), fan_in_normal(rng, channels, r), true)),
            )
        };
        let p = store.add(format!("{name}.p"), fan_in_normal(rng, hidden, r), true);
        let lift = if cfg.kind == VariantKind::Full { hidden } else { channels };
        let o = store.add(format!("{name}.o"), fan_in_normal(rng, r, lift), true);
        let gain_q = store.add(format!("{name}.gain_q"), Tensor::full([r], T::one()), false);
        let gain_m = store.add(format!("{name}.gain_m"), Tensor::full([r], T::one()), false);
        let gain_perp = cfg
            .kind
            .orthogonalizes()
            .then(|| store.add(format!("{name}.gain_perp"), Tensor::full([r], T::one()), false));
        let gain_delta = (cfg.kind != VariantKind::Full)
            .then(|| store.add(format!("{name}.gain_delta"), Tensor::full([channels], T::one()), false));
        let beta = cfg.kind.has_beta().then(|| {
            let init = if cfg.kind == VariantKind::StaticGate {
                normal(rng, [1], STATIC_GATE_INIT_STD)
            } else {
                Tensor::zeros([1])
            };
            store.add(format!("{name}.beta"), init, false)
        });
        let gate_conv = (cfg.kind == VariantKind::DynamicGate).then(|| {
            let out = match cfg.gate_arity {
                GateArity::PerToken => 1,
                GateArity::PerChannel => channels,
            };
            (
                store.add(format!("{name}.gate_w"), fan_in_normal(rng, channels, out), true),
                store.add(format!("{name}.gate_b"), Tensor::zeros([out]), false),
            )
        });
        Ok(Self {
            cfg,
            channels,
            hidden,
            u,
            v,
            p,
            o,
            gain_q,
            gain_m,
            gain_perp,
            gain_delta,
            beta,
            gate_conv,
        })
    }

    /// Analytic parameter count for a given configuration.
    pub fn count(cfg: &ComplementConfig, channels: usize, hidden: usize) -> usize {
        let r = cfg.rank;
        let uv = if cfg.kind == VariantKind::AblationSharedProjection { 0 } else { 2 * channels * r };
        let p = hidden * r;
        let o = if cfg.kind == VariantKind::Full { r * hidden } else { r * channels };
        let gains = 2 * r
            + if cfg.kind.orthogonalizes() { r } else { 0 }
            + if cfg.kind == VariantKind::Full { 0 } else { channels };
        let beta = usize::from(cfg.kind.has_beta());
        let gate = if cfg.kind == VariantKind::DynamicGate {
            let out = match cfg.gate_arity {
                GateArity::PerToken => 1,
                GateArity::PerChannel => channels,
            };
            channels * out + out
        } else {
            0
        };
        uv + p + o + gains + beta + gate
    }

    pub fn eps<T: Real>(&self) -> T {
        T::lit(EPS)
    }

    /// Builds `q`, `m` and the (possibly orthogonalized) auxiliary feature.
    pub fn auxiliary<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: TokenMap,
        host: &Host,
        host_out: &HostOutput,
    ) -> Result<Auxiliary> {
        let eps = self.eps::<T>();
        let r = self.cfg.rank;
        let gain_q = g.param(store, self.gain_q);
        let q = match (self.u, self.v) {
            (Some(u), Some(v)) => {
                let u = g.param(store, u);
                let v = g.param(store, v);
                quadratic_feature(g, x.var, u, v, gain_q, eps)?
            }
            _ => {
                let (ux, vx) = shared_slices(g, host, host_out, r)?;
                quadratic_from_projections(g, ux, vx, gain_q, eps)?
            }
        };
        let p = g.param(store, self.p);
        let gain_m = g.param(store, self.gain_m);
        let m = project_main(g, host_out.hidden.var, p, gain_m, eps)?;

        let (residual, feature) = match self.gain_perp {
            Some(gp) => {
                let gain_perp = g.param(store, gp);
                let o = orthogonalize(g, q, m, eps, gain_perp, self.cfg.scope, x.tokens())?;
                (Some(o.residual), o.q_perp)
            }
            None => (None, q),
        };
        Ok(Auxiliary {
            trace: ComplementTrace {
                q,
                m,
                residual,
                gate: None,
            },
            feature,
        })
    }

    /// Full variant: adds the lifted complement to the hidden map.
    pub fn inject_hidden<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        hidden: Var,
        aux: &mut Auxiliary,
    ) -> Result<Var> {
        debug_assert_eq!(self.cfg.kind, VariantKind::Full);
        let o = g.param(store, self.o);
        let beta = g.param(store, self.beta.expect("full variant has beta"));
        let h = inject_full(g, hidden, aux.feature, o, beta)?;
        aux.trace.gate = Some(g.sigmoid(beta)?);
        Ok(h)
    }

    /// Low-rank family: adds the gated `Δ` after the output projection.
    pub fn inject_output<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: TokenMap,
        b_out: Var,
        aux: &mut Auxiliary,
    ) -> Result<Var> {
        let eps = self.eps::<T>();
        let o = g.param(store, self.o);
        let gain_delta = g.param(store, self.gain_delta.expect("low-rank variants normalize Δ"));
        let delta = lift_delta(g, aux.feature, o, gain_delta, eps)?;
        match self.cfg.kind {
            VariantKind::Full => unreachable!("full injects in hidden space"),
            VariantKind::DynamicGate => {
                let (w, b) = self.gate_conv.expect("dynamic variant has a gate conv");
                let (w, b) = (g.param(store, w), g.param(store, b));
                let (h, gate) = inject_dynamic_gate(g, x.var, b_out, delta, w, b)?;
                aux.trace.gate = Some(gate);
                Ok(h)
            }
            VariantKind::AblationNoGate => inject_ungated(g, b_out, delta),
            _ => {
                let beta = g.param(store, self.beta.expect("scalar-gated variant has beta"));
                let h = inject_static_gate(g, b_out, delta, beta)?;
                aux.trace.gate = Some(g.sigmoid(beta)?);
                Ok(h)
            }
        }
    }
}

/// `u(x)`, `v(x)` as slices of the host's input pre-activations.
fn shared_slices<T: Real>(
    g: &mut Graph<T>,
    host: &Host,
    host_out: &HostOutput,
    r: usize,
) -> Result<(Var, Var)> {
    match (host, host_out.pre_b) {
        (Host::Bilinear(_), Some(pre_b)) => {
            let ux = g.slice_cols(host_out.pre_a, 0, r)?;
            let vx = g.slice_cols(pre_b, 0, r)?;
            Ok((ux, vx))
        }
        _ => {
            let ux = g.slice_cols(host_out.pre_a, 0, r)?;
            let vx = g.slice_cols(host_out.pre_a, r, r)?;
            Ok((ux, vx))
        }
    }
}
