//! Self-contained invariant suites: autodiff gradients, orthogonality of the
//! complement, metric cross-checks and degenerate-configuration equivalences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::complement::{self, ComplementConfig, GateArity, InnerProductScope, VariantKind, EPS};
use crate::gradcheck::{check_gradients, DEFAULT_STEP};
use crate::hosts::HostKind;
use crate::metrics::{
    abs_cosines, effective_rank, entropy_rank, participation_ratio, separation_score,
    symmetric_eigenvalues, Features,
};
use crate::params::{normal, uniform};
use crate::tensor::{Graph, Real, Result, Tensor, Var};
use crate::vit::{BackboneConfig, FfnVariant, VitModel};

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    /// Worst observed error or statistic.
    pub worst: f64,
    pub threshold: f64,
    /// The statistic must exceed the threshold rather than stay below it.
    pub at_least: bool,
    pub passed: bool,
    pub detail: String,
}

impl SuiteReport {
    fn new(name: impl Into<String>, cases: usize, worst: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            cases,
            worst,
            threshold,
            at_least: false,
            passed: worst < threshold,
            detail: detail.into(),
        }
    }

    fn at_least(name: impl Into<String>, cases: usize, value: f64, threshold: f64, detail: impl Into<String>) -> Self {
        Self {
            at_least: true,
            passed: value > threshold,
            ..Self::new(name, cases, value, threshold, detail)
        }
    }

    pub fn line(&self) -> String {
        format!(
            "[{}] {:<40} cases={:<6} {}={:.3e} ({} {:.0e}){}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            if self.at_least { "value" } else { "worst" },
            self.worst,
            if self.at_least { ">" } else { "<" },
            self.threshold,
            if self.detail.is_empty() { String::new() } else { format!("  {}", self.detail) }
        )
    }
}

// ------------------------------------------------------------ gradients

pub const PRIMITIVE_TOL: f64 = 1e-6;
pub const COMPOSED_TOL: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

/// Inputs and graph builder for one random case.
pub struct Case {
    pub inputs: Vec<Tensor<f64>>,
    pub build: Build,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    normal(rng, shape.to_vec(), 1.0)
}

fn dims(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub type CaseGen = fn(&mut ChaCha8Rng) -> Case;

/// Every differentiable primitive of the tape, each with a random-case
/// generator.
pub fn primitive_catalog() -> Vec<(&'static str, CaseGen)> {
    vec![
        ("matmul", |r| {
            let (m, k, n) = (dims(r, 1, 4), dims(r, 1, 5), dims(r, 1, 4));
            Case {
                inputs: vec![randn(r, &[m, k]), randn(r, &[k, n])],
                build: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }),
        ("bmm", |r| {
            let (b, m, k, n) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 3));
            Case {
                inputs: vec![randn(r, &[b, m, k]), randn(r, &[b, k, n])],
                build: Box::new(|g, v| g.bmm(v[0], v[1], false)),
            }
        }),
        ("bmm_transposed", |r| {
            let (b, m, k, n) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 3));
            Case {
                inputs: vec![randn(r, &[b, m, k]), randn(r, &[b, n, k])],
                build: Box::new(|g, v| g.bmm(v[0], v[1], true)),
            }
        }),
        ("add", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case {
                inputs: vec![randn(r, &s), randn(r, &s)],
                build: Box::new(|g, v| g.add(v[0], v[1])),
            }
        }),
        ("sub", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case {
                inputs: vec![randn(r, &s), randn(r, &s)],
                build: Box::new(|g, v| g.sub(v[0], v[1])),
            }
        }),
        ("mul", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case {
                inputs: vec![randn(r, &s), randn(r, &s)],
                build: Box::new(|g, v| g.mul(v[0], v[1])),
            }
        }),
        ("div", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            // Denominators bounded away from zero.
            let den = uniform::<f64>(r, s.to_vec(), 1.0).map(|x| x.signum() * (0.5 + x.abs()));
            Case {
                inputs: vec![randn(r, &s), den],
                build: Box::new(|g, v| g.div(v[0], v[1])),
            }
        }),
        ("add_bias", |r| {
            let (n, d) = (dims(r, 1, 4), dims(r, 1, 5));
            Case {
                inputs: vec![randn(r, &[n, d]), randn(r, &[d])],
                build: Box::new(|g, v| g.add_bias(v[0], v[1])),
            }
        }),
        ("scale", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case {
                inputs: vec![randn(r, &s), randn(r, &[1])],
                build: Box::new(|g, v| g.scale(v[0], v[1])),
            }
        }),
        ("mul_col", |r| {
            let (n, d) = (dims(r, 1, 4), dims(r, 1, 5));
            Case {
                inputs: vec![randn(r, &[n, d]), randn(r, &[n, 1])],
                build: Box::new(|g, v| g.mul_col(v[0], v[1])),
            }
        }),
        ("affine", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
            Case {
                inputs: vec![randn(r, &s)],
                build: Box::new(move |g, v| g.affine(v[0], a, b)),
            }
        }),
        ("row_dot", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 5)];
            Case {
                inputs: vec![randn(r, &s), randn(r, &s)],
                build: Box::new(|g, v| g.row_dot(v[0], v[1])),
            }
        }),
        ("reshape", |r| {
            let (a, b) = (dims(r, 1, 4), dims(r, 1, 4));
            Case {
                inputs: vec![randn(r, &[a, b])],
                build: Box::new(move |g, v| {
                    let y = g.reshape(v[0], &[b, a])?;
                    // Break the symmetry of the contraction.
                    let w = g.input(Tensor::from_fn([b, a], |i| 1.0 + i as f64));
                    g.mul(y, w)
                }),
            }
        }),
        ("slice_cols", |r| {
            let (n, d) = (dims(r, 1, 4), dims(r, 2, 6));
            let start = r.random_range(0..d - 1);
            let len = r.random_range(1..=d - start);
            Case {
                inputs: vec![randn(r, &[n, d])],
                build: Box::new(move |g, v| g.slice_cols(v[0], start, len)),
            }
        }),
        ("concat_cols", |r| {
            let n = dims(r, 1, 4);
            let (a, b, c) = (dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 3));
            Case {
                inputs: vec![randn(r, &[n, a]), randn(r, &[n, b]), randn(r, &[n, c])],
                build: Box::new(|g, v| g.concat_cols(&[v[0], v[1], v[2]])),
            }
        }),
        ("split_heads", |r| {
            let (gr, t, h, dh) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 2));
            Case {
                inputs: vec![randn(r, &[gr * t, h * dh])],
                build: Box::new(move |g, v| g.split_heads(v[0], gr, t, h)),
            }
        }),
        ("merge_heads", |r| {
            let (gr, t, h, dh) = (dims(r, 1, 2), dims(r, 1, 3), dims(r, 1, 3), dims(r, 1, 2));
            Case {
                inputs: vec![randn(r, &[gr * h, t, dh])],
                build: Box::new(move |g, v| g.merge_heads(v[0], gr, t, h)),
            }
        }),
        ("gelu", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            let x = randn(r, &s).map(|v| 2.0 * v);
            Case {
                inputs: vec![x],
                build: Box::new(|g, v| g.gelu(v[0])),
            }
        }),
        ("sigmoid", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            let x = randn(r, &s).map(|v| 3.0 * v);
            Case {
                inputs: vec![x],
                build: Box::new(|g, v| g.sigmoid(v[0])),
            }
        }),
        ("softmax", |r| {
            let s = [dims(r, 1, 4), dims(r, 2, 5)];
            Case {
                inputs: vec![randn(r, &s)],
                build: Box::new(|g, v| g.softmax(v[0])),
            }
        }),
        ("rmsnorm", |r| {
            let (n, d) = (dims(r, 1, 4), dims(r, 2, 6));
            Case {
                inputs: vec![randn(r, &[n, d]), randn(r, &[d])],
                build: Box::new(|g, v| g.rmsnorm(v[0], v[1], EPS)),
            }
        }),
        ("layernorm", |r| {
            // At d = 2 the output is ±1 whatever the input, leaving only roundoff.
            let (n, d) = (dims(r, 1, 4), dims(r, 3, 6));
            Case {
                inputs: vec![randn(r, &[n, d]), randn(r, &[d]), randn(r, &[d])],
                build: Box::new(|g, v| g.layernorm(v[0], v[1], v[2], 1e-5)),
            }
        }),
        ("mean_tokens", |r| {
            let (gr, t, d) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4));
            Case {
                inputs: vec![randn(r, &[gr * t, d])],
                build: Box::new(move |g, v| g.mean_tokens(v[0], t)),
            }
        }),
        ("add_tiled", |r| {
            let (gr, t, d) = (dims(r, 1, 3), dims(r, 1, 4), dims(r, 1, 4));
            Case {
                inputs: vec![randn(r, &[gr * t, d]), randn(r, &[t, d])],
                build: Box::new(|g, v| g.add_tiled(v[0], v[1])),
            }
        }),
        ("sum", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case {
                inputs: vec![randn(r, &s)],
                build: Box::new(|g, v| {
                    let w = g.input(Tensor::from_fn(g.shape(v[0]).to_vec(), |i| (i as f64 * 0.7).sin()));
                    let y = g.mul(v[0], w)?;
                    g.sum(y)
                }),
            }
        }),
        ("mean", |r| {
            let s = [dims(r, 1, 4), dims(r, 1, 4)];
            Case {
                inputs: vec![randn(r, &s)],
                build: Box::new(|g, v| {
                    let w = g.input(Tensor::from_fn(g.shape(v[0]).to_vec(), |i| (i as f64 * 0.7).cos()));
                    let y = g.mul(v[0], w)?;
                    g.mean(y)
                }),
            }
        }),
        ("cross_entropy", |r| {
            let (n, k) = (dims(r, 1, 4), dims(r, 2, 5));
            let labels: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
            Case {
                inputs: vec![randn(r, &[n, k])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &labels)),
            }
        }),
    ]
}

/// `x → q, m → orthogonalize → Δ → gated injection` with every tensor on
/// the path as a checked input.
///
/// `r ≥ 3`: at `r = 2` the normalized residual is fixed up to sign by `m`,
/// so gradients into `q` vanish and only roundoff is compared.
pub fn composed_case(rng: &mut ChaCha8Rng, kind: VariantKind) -> Case {
    let (n, c, r) = (dims(rng, 2, 4), dims(rng, 5, 7), dims(rng, 3, 4));
    let hidden = 2 * c;
    let scope = if rng.random_bool(0.5) { InnerProductScope::PerToken } else { InnerProductScope::Global };
    let tokens = if scope == InnerProductScope::Global { n } else { 1 };
    let gain = |rng: &mut ChaCha8Rng, d: usize| normal::<f64>(rng, [d], 0.3).map(|v| 1.0 + v);
    let inputs = vec![
        randn(rng, &[n, c]),                                   // 0 x
        normal(rng, [c, r], 0.7),                              // 1 u
        normal(rng, [c, r], 0.7),                              // 2 v
        randn(rng, &[n, hidden]),                              // 3 b
        normal(rng, [hidden, r], 0.5),                         // 4 p
        normal(rng, [r, c], 0.7),                              // 5 o
        gain(rng, r),                                          // 6 gain_q
        gain(rng, r),                                          // 7 gain_m
        gain(rng, r),                                          // 8 gain_perp
        gain(rng, c),                                          // 9 gain_delta
        randn(rng, &[n, c]),                                   // 10 b_out
        randn(rng, &[1]),                                      // 11 beta
        normal(rng, [c, 1], 0.5),                              // 12 gate_w
        randn(rng, &[1]),                                      // 13 gate_b
    ];
    let build: Build = Box::new(move |g, v| {
        let q = complement::quadratic_feature(g, v[0], v[1], v[2], v[6], EPS)?;
        let m = complement::project_main(g, v[3], v[4], v[7], EPS)?;
        let o = complement::orthogonalize(g, q, m, EPS, v[8], scope, tokens)?;
        let delta = complement::lift_delta(g, o.q_perp, v[5], v[9], EPS)?;
        match kind {
            VariantKind::DynamicGate => Ok(complement::inject_dynamic_gate(g, v[0], v[10], delta, v[12], v[13])?.0),
            VariantKind::AblationNoGate => complement::inject_ungated(g, v[10], delta),
            _ => complement::inject_static_gate(g, v[10], delta, v[11]),
        }
    });
    Case { inputs, build }
}

/// Full variant path: hidden-space injection before the output projection.
pub fn composed_full_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, c, r) = (dims(rng, 2, 4), dims(rng, 5, 7), dims(rng, 3, 4));
    let hidden = 2 * c;
    let gain = |rng: &mut ChaCha8Rng, d: usize| normal::<f64>(rng, [d], 0.3).map(|v| 1.0 + v);
    let inputs = vec![
        randn(rng, &[n, c]),
        normal(rng, [c, r], 0.7),
        normal(rng, [c, r], 0.7),
        randn(rng, &[n, hidden]),
        normal(rng, [hidden, r], 0.5),
        normal(rng, [r, hidden], 0.7),
        gain(rng, r),
        gain(rng, r),
        gain(rng, r),
        randn(rng, &[1]),
        normal(rng, [hidden, c], 0.5),
    ];
    let build: Build = Box::new(|g, v| {
        let q = complement::quadratic_feature(g, v[0], v[1], v[2], v[6], EPS)?;
        let m = complement::project_main(g, v[3], v[4], v[7], EPS)?;
        let o = complement::orthogonalize(g, q, m, EPS, v[8], InnerProductScope::PerToken, 1)?;
        let h = complement::inject_full(g, v[3], o.q_perp, v[5], v[9])?;
        g.matmul(h, v[10])
    });
    Case { inputs, build }
}

fn worst_over(cases: usize, seed: u64, mut make: impl FnMut(&mut ChaCha8Rng) -> Case) -> (f64, Option<String>) {
    let mut worst = 0.0f64;
    for k in 0..cases {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(k as u64));
        let case = make(&mut rng);
        match check_gradients(&case.build, &case.inputs, DEFAULT_STEP) {
            Ok(rep) => worst = worst.max(rep.max_rel_err()),
            Err(e) => return (f64::INFINITY, Some(format!("case {k}: {e}"))),
        }
    }
    (worst, None)
}

pub fn gradient_suites(cases: usize) -> Vec<SuiteReport> {
    let mut out = Vec::new();
    for (i, (name, make)) in primitive_catalog().into_iter().enumerate() {
        let (worst, err) = worst_over(cases, i as u64 + 1, make);
        out.push(SuiteReport::new(
            format!("grad/{name}"),
            cases,
            worst,
            PRIMITIVE_TOL,
            err.unwrap_or_default(),
        ));
    }
    for (j, kind) in [VariantKind::LowRank, VariantKind::DynamicGate, VariantKind::AblationNoGate]
        .into_iter()
        .enumerate()
    {
        let (worst, err) = worst_over(cases, 500 + j as u64, |r| composed_case(r, kind));
        out.push(SuiteReport::new(
            format!("grad/orthogonalize→inject ({})", kind.label()),
            cases,
            worst,
            COMPOSED_TOL,
            err.unwrap_or_default(),
        ));
    }
    let (worst, err) = worst_over(cases, 600, composed_full_case);
    out.push(SuiteReport::new(
        "grad/orthogonalize→inject (oqc-full)",
        cases,
        worst,
        COMPOSED_TOL,
        err.unwrap_or_default(),
    ));
    out
}

// --------------------------------------------------------- orthogonality

/// Per-token cosines collected from random models.
#[derive(Debug, Clone, Default)]
pub struct OverlapSample {
    pub pre: Vec<f64>,
    pub post: Vec<f64>,
}

impl OverlapSample {
    pub fn mean_pre(&self) -> f64 {
        self.pre.iter().sum::<f64>() / self.pre.len() as f64
    }
    pub fn mean_post(&self) -> f64 {
        self.post.iter().sum::<f64>() / self.post.len() as f64
    }
    pub fn max_post(&self) -> f64 {
        self.post.iter().copied().fold(0.0, f64::max)
    }
}

/// The orthogonality probe architecture: width 64, rank 56, 64 tokens.
pub fn probe_backbone(kind: VariantKind) -> BackboneConfig {
    BackboneConfig {
        depth: 2,
        width: 64,
        heads: 4,
        patch: 2,
        image_size: 16,
        in_channels: 3,
        n_classes: 10,
        ffn: FfnVariant {
            host: HostKind::Mlp,
            complement: Some(ComplementConfig {
                kind,
                rank: 56,
                scope: InnerProductScope::PerToken,
                gate_arity: GateArity::PerToken,
            }),
        },
        use_pr_readout: false,
    }
}

/// Randomizes every parameter of a model: matrices keep their fan-in
/// scaling, vectors get unit-scale perturbations.
pub fn randomize<T: Real>(model: &mut VitModel<T>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let p = model.params.get_mut(id);
        let shape = p.value.shape().to_vec();
        let noise = if shape.len() == 2 {
            normal::<T>(&mut rng, shape, 1.0 / (p.value.rows() as f64).sqrt())
        } else {
            normal::<T>(&mut rng, shape, 0.3)
        };
        let keep = if p.value.shape().len() == 2 { T::zero() } else { T::one() };
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v = keep * *v + *n;
        }
    }
}

/// Collects `|cos(q, m)|` and `|cos(residual, m)|` for every token of every
/// layer of randomly parameterized models of the given variants.
pub fn orthogonality_probe<T: Real>(kinds: &[VariantKind], batch: usize, seed: u64) -> Result<OverlapSample> {
    let mut sample = OverlapSample::default();
    for (k, &kind) in kinds.iter().enumerate() {
        let cfg = probe_backbone(kind);
        let mut model = VitModel::<f64>::init(cfg, seed + k as u64).expect("probe config is valid");
        randomize(&mut model, seed ^ (0x9e37 + k as u64));
        let model = model.cast::<T>();
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(17 * k as u64));
        let images: Tensor<T> = normal(&mut rng, [batch, 3, cfg.image_size, cfg.image_size], 1.0);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images)?;
        for tr in &out.traces {
            let to64 = |v: Var| g.value(v).data().iter().map(|x| x.to_f64_lossy()).collect::<Vec<_>>();
            let r = g.value(tr.q).last_dim();
            let (q, m) = (to64(tr.q), to64(tr.m));
            sample
                .pre
                .extend(abs_cosines(Features::new(&q, r), Features::new(&m, r)).expect("aligned"));
            if let Some(res) = tr.residual {
                let res = to64(res);
                sample
                    .post
                    .extend(abs_cosines(Features::new(&res, r), Features::new(&m, r)).expect("aligned"));
            }
        }
    }
    Ok(sample)
}

pub const ORTHOGONAL_KINDS: [VariantKind; 4] =
    [VariantKind::Full, VariantKind::LowRank, VariantKind::StaticGate, VariantKind::DynamicGate];

pub fn orthogonality_suites() -> Result<Vec<SuiteReport>> {
    // 4 variants × 2 layers × 20 samples × 64 tokens = 10,240 tokens
    let f64s = orthogonality_probe::<f64>(&ORTHOGONAL_KINDS, 20, 11)?;
    let f32s = orthogonality_probe::<f32>(&ORTHOGONAL_KINDS, 20, 11)?;
    let n = f64s.post.len();
    Ok(vec![
        SuiteReport::new("ortho/f64 mean |cos(residual,m)|", n, f64s.mean_post(), 1e-7, ""),
        SuiteReport::new("ortho/f64 max |cos(residual,m)|", n, f64s.max_post(), 1e-6, ""),
        SuiteReport::new("ortho/f32 max |cos(residual,m)|", f32s.post.len(), f32s.max_post(), 1e-4, ""),
        SuiteReport::at_least(
            "ortho/pre-projection mean |cos(q,m)|",
            n,
            f64s.mean_pre(),
            0.01,
            format!("drop ×{:.1e}", f64s.mean_pre() / f64s.mean_post()),
        ),
    ])
}

// --------------------------------------------------------------- metrics

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
}

/// Cross-checks both spectral metrics by two independent routes on random
/// matrices, plus their closed-form cases and rotation invariance.
pub fn metric_suites(matrices: usize) -> Vec<SuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6d65_7472);
    let (mut er_worst, mut pr_worst, mut rot_worst) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..matrices {
        let (n, d) = (rng.random_range(8..=64), rng.random_range(2..=16));
        let x: Tensor<f64> = normal(&mut rng, [n, d], 1.0);
        let f = Features::new(x.data(), d);
        let c = crate::metrics::centered(f);
        // Route 2: eigenvalues of the Gram matrix XcᵀXc.
        let mut gram = vec![0.0; d * d];
        for row in c.chunks(d) {
            for i in 0..d {
                for j in 0..d {
                    gram[i * d + j] += row[i] * row[j];
                }
            }
        }
        let ev = symmetric_eigenvalues(&gram, d);
        let sv: Vec<f64> = ev.iter().map(|e| e.max(0.0).sqrt()).collect();
        er_worst = er_worst.max(rel(effective_rank(f).unwrap(), entropy_rank(&sv)));
        let pr_eig = ev.iter().sum::<f64>().powi(2) / ev.iter().map(|e| e * e).sum::<f64>();
        pr_worst = pr_worst.max(rel(participation_ratio(f).unwrap(), pr_eig));

        let rot = random_rotation(&mut rng, d);
        let mut xr = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                xr[i * d + j] = (0..d).map(|k| x.data()[i * d + k] * rot[k * d + j]).sum();
            }
        }
        let fr = Features::new(&xr, d);
        rot_worst = rot_worst
            .max(rel(effective_rank(fr).unwrap(), effective_rank(f).unwrap()))
            .max(rel(participation_ratio(fr).unwrap(), participation_ratio(f).unwrap()));
    }

    // Closed forms: ±e_i rows are isotropic; t·w rows are rank one.
    let d = 16;
    let iso: Vec<f64> = (0..2 * d)
        .flat_map(|k| (0..d).map(move |j| if j == k / 2 { if k % 2 == 0 { 1.0 } else { -1.0 } } else { 0.0 }))
        .collect();
    let w: Vec<f64> = (0..d).map(|j| (j as f64 + 1.0).sqrt()).collect();
    let rank1: Vec<f64> = (0..20).flat_map(|i| w.iter().map(move |v| v * (i as f64 - 7.5))).collect();
    let closed = [
        rel(effective_rank(Features::new(&iso, d)).unwrap(), d as f64),
        rel(participation_ratio(Features::new(&iso, d)).unwrap(), d as f64),
        rel(effective_rank(Features::new(&rank1, d)).unwrap(), 1.0),
        rel(participation_ratio(Features::new(&rank1, d)).unwrap(), 1.0),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    // Separation: closed form D/s and the shuffled-label control.
    let sep_pts = [0.0, 0.5, 0.0, -0.5, 10.0, 0.5, 10.0, -0.5];
    let sep = separation_score(Features::new(&sep_pts, 2), &[0, 0, 1, 1]).unwrap();

    vec![
        SuiteReport::new("metrics/eff_rank svd vs gram-eigen", matrices, er_worst, 1e-8, ""),
        SuiteReport::new("metrics/part_ratio trace vs eigen", matrices, pr_worst, 1e-8, ""),
        SuiteReport::new("metrics/rotation invariance", matrices, rot_worst, 1e-8, ""),
        SuiteReport::new("metrics/closed forms (d, 1)", 4, closed, 1e-12, ""),
        SuiteReport::new("metrics/separation D/s", 1, rel(sep, 20.0), 1e-12, ""),
    ]
}

/// Haar-ish random orthogonal matrix via Gram–Schmidt.
pub fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for c in &cols {
                let dot: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
                for (a, b) in v.iter_mut().zip(c) {
                    *a -= dot * b;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            cols.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut m = vec![0.0; d * d];
    for (j, c) in cols.iter().enumerate() {
        for i in 0..d {
            m[i * d + j] = c[i];
        }
    }
    m
}

// ------------------------------------------------------------ degenerate

fn copy_shared<T: Real>(from: &VitModel<T>, to: &mut VitModel<T>) {
    for (_, p) in from.params.iter() {
        if let Some(id) = to.params.find(&p.name) {
            if to.params.get(id).value.shape() == p.value.shape() {
                to.params.get_mut(id).value = p.value.clone();
            }
        }
    }
}

fn set_matching<T: Real>(model: &mut VitModel<T>, suffix: &str, value: f64) {
    let ids: Vec<_> = model.params.iter().filter(|(_, p)| p.name.ends_with(suffix)).map(|(id, _)| id).collect();
    for id in ids {
        model.params.get_mut(id).value.data_mut().fill(T::lit(value));
    }
}

fn logits(model: &VitModel<f64>, images: &Tensor<f64>) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, images)?;
    Ok(g.value(out.logits).data().to_vec())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn degenerate_model(kind: Option<VariantKind>, seed: u64) -> VitModel<f64> {
    let mut cfg = probe_backbone(VariantKind::LowRank);
    cfg.width = 16;
    cfg.image_size = 8;
    cfg.ffn.complement = kind.map(|k| ComplementConfig {
        kind: k,
        rank: 6,
        scope: InnerProductScope::PerToken,
        gate_arity: GateArity::PerToken,
    });
    let mut m = VitModel::init(cfg, seed).expect("valid");
    randomize(&mut m, seed);
    m
}

/// Maximum logit differences of the three degenerate equivalences.
pub fn degenerate_differences(seed: u64) -> Result<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images: Tensor<f64> = normal(&mut rng, [4, 3, 8, 8], 1.0);
    let beta: f64 = 0.37;

    let mut dynamic = degenerate_model(Some(VariantKind::DynamicGate), seed);
    let mut stat = degenerate_model(Some(VariantKind::StaticGate), seed + 1);
    copy_shared(&dynamic, &mut stat);
    set_matching(&mut dynamic, ".gate_w", 0.0);
    set_matching(&mut dynamic, ".gate_b", beta);
    set_matching(&mut stat, ".beta", beta);
    let d1 = max_diff(&logits(&dynamic, &images)?, &logits(&stat, &images)?);

    // σ(800) is exactly 1 in floating point.
    let nogate = degenerate_model(Some(VariantKind::AblationNoGate), seed + 2);
    let mut lr = degenerate_model(Some(VariantKind::LowRank), seed + 3);
    copy_shared(&nogate, &mut lr);
    set_matching(&mut lr, ".beta", 800.0);
    let d2 = max_diff(&logits(&nogate, &images)?, &logits(&lr, &images)?);

    let plain = degenerate_model(None, seed + 4);
    let mut full = degenerate_model(Some(VariantKind::Full), seed + 5);
    copy_shared(&plain, &mut full);
    set_matching(&mut full, ".beta", -40.0);
    let d3 = max_diff(&logits(&plain, &images)?, &logits(&full, &images)?);
    Ok([d1, d2, d3])
}

pub fn degenerate_suites() -> Result<Vec<SuiteReport>> {
    let mut worst = [0.0f64; 3];
    let seeds = 5;
    for s in 0..seeds {
        let d = degenerate_differences(100 + s)?;
        for (w, v) in worst.iter_mut().zip(d) {
            *w = w.max(v);
        }
    }
    Ok(vec![
        SuiteReport::new("degenerate/dynamic(0,β) ≡ static(β)", seeds as usize, worst[0], 1e-12, ""),
        SuiteReport::new("degenerate/no-gate ≡ lr with σ(β)=1", seeds as usize, worst[1], 1e-12, ""),
        SuiteReport::new("degenerate/full with β→−∞ ≡ host", seeds as usize, worst[2], 1e-6, ""),
    ])
}

/// Every suite, in order.
pub fn run_all(grad_cases: usize) -> Result<Vec<SuiteReport>> {
    let mut out = gradient_suites(grad_cases);
    out.extend(orthogonality_suites()?);
    out.extend(metric_suites(50));
    out.extend(degenerate_suites()?);
    Ok(out)
}
