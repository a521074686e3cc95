//! Re-evaluates a model on an evaluation split and assembles its
//! [`MechanismReport`].

use crate::complement::InnerProductScope;
use crate::metrics::{
    abs_cosines, effective_rank, participation_ratio, separation_score, Features, MechanismReport,
    MetricError, GEOMETRY_NOTE,
};
use crate::tensor::{Graph, Real, Tensor, TensorError};
use crate::train::data::Split;
use crate::vit::VitModel;

#[derive(Debug, thiserror::Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Copies samples `range` of a split into an NCHW batch tensor.
pub fn batch_tensor<T: Real>(split: &Split, idx: &[usize]) -> Tensor<T> {
    let n = split.sample_len();
    let mut data = Vec::with_capacity(idx.len() * n);
    for &i in idx {
        data.extend(split.image(i).iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new([idx.len(), split.channels, split.image_size, split.image_size], data)
        .expect("batch buffer matches its shape")
}

/// Index of the largest logit per row; ties resolve to the lowest index.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<usize> {
    let k = logits.last_dim();
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[derive(Default, Clone)]
struct Running {
    sum: f64,
    max: f64,
    count: usize,
}

impl Running {
    fn push_all(&mut self, xs: &[f64]) {
        for &x in xs {
            self.sum += x;
            self.max = self.max.max(x);
        }
        self.count += xs.len();
    }

    fn mean(&self) -> f64 {
        self.sum / self.count as f64
    }
}

pub struct AnalysisOptions {
    pub seed: u64,
    pub max_samples: usize,
    pub batch_size: usize,
}

/// Accuracy covers the whole split; geometry uses the first `max_samples`
/// readout vectors.
pub fn analyze_model<T: Real>(
    model: &VitModel<T>,
    split: &Split,
    opts: &AnalysisOptions,
) -> Result<MechanismReport, AnalysisError> {
    let cfg = &model.cfg;
    let depth = cfg.depth;
    let kind = cfg.ffn.kind();
    let width = cfg.width;
    let mut pre = vec![Running::default(); depth];
    let mut post = vec![Running::default(); depth];
    let (mut gate_sum, mut gate_sq, mut gate_n) = (0.0f64, 0.0f64, 0usize);
    let mut readout: Vec<f64> = Vec::new();
    let mut correct = 0usize;

    let all: Vec<usize> = (0..split.len()).collect();
    for chunk in all.chunks(opts.batch_size.max(1)) {
        let images = batch_tensor::<T>(split, chunk);
        let mut g = Graph::new();
        let out = model.forward(&mut g, &images)?;
        let pred = argmax_rows(g.value(out.logits));
        correct += pred.iter().zip(chunk).filter(|(p, &i)| **p == split.labels[i]).count();

        let have = readout.len() / width;
        if have < opts.max_samples {
            let take = (opts.max_samples - have).min(chunk.len());
            let z = g.value(out.readout).data();
            readout.extend(z[..take * width].iter().map(|v| v.to_f64_lossy()));
        }

        for (l, tr) in out.traces.iter().enumerate() {
            let group = match cfg.ffn.complement.map(|c| c.scope) {
                Some(InnerProductScope::Global) => cfg.tokens(),
                _ => 1,
            };
            let rows = |v| {
                let t: &Tensor<T> = g.value(v);
                let d = t.last_dim() * group;
                (t.data().iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>(), d)
            };
            let (q, d) = rows(tr.q);
            let (m, _) = rows(tr.m);
            let cos_pre = abs_cosines(Features::new(&q, d), Features::new(&m, d))?;
            pre[l].push_all(&cos_pre);
            match tr.residual {
                Some(res) => {
                    let (r, _) = rows(res);
                    post[l].push_all(&abs_cosines(Features::new(&r, d), Features::new(&m, d))?);
                }
                None => post[l].push_all(&cos_pre),
            }
            if kind.is_some_and(|k| k.is_gated()) {
                if let Some(gv) = tr.gate {
                    let t = g.value(gv);
                    // A scalar gate applies to every token.
                    let reps = if t.numel() == 1 { chunk.len() * cfg.tokens() } else { 1 };
                    for v in t.data() {
                        let v = v.to_f64_lossy();
                        gate_sum += v * reps as f64;
                        gate_sq += v * v * reps as f64;
                        gate_n += reps;
                    }
                }
            }
        }
    }

    let n = readout.len() / width;
    let feats = Features::new(&readout, width);
    let labels = &split.labels[..n];
    let has_complement = kind.is_some();
    let per_pre: Vec<f64> = if has_complement { pre.iter().map(Running::mean).collect() } else { Vec::new() };
    let per_post: Vec<f64> = if has_complement { post.iter().map(Running::mean).collect() } else { Vec::new() };
    let avg = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    let (gate_mean, gate_std) = if gate_n > 0 {
        let m = gate_sum / gate_n as f64;
        let var = (gate_sq / gate_n as f64 - m * m).max(0.0);
        (Some(m), Some(var.sqrt()))
    } else {
        (None, None)
    };
    Ok(MechanismReport {
        variant: cfg.ffn.label(),
        host: cfg.ffn.host.description(),
        seed: opts.seed,
        precision: std::any::type_name::<T>().to_string(),
        accuracy: correct as f64 / split.len().max(1) as f64,
        overlap_pre: avg(&per_pre),
        overlap_post: avg(&per_post),
        overlap_post_max: has_complement.then(|| post.iter().map(|r| r.max).fold(0.0, f64::max)),
        per_layer_overlap_pre: per_pre,
        per_layer_overlap_post: per_post,
        eff_rank: effective_rank(feats)?,
        part_ratio: participation_ratio(feats)?,
        separation: separation_score(feats, labels)?,
        gate_mean,
        gate_std,
        n_samples: n,
        feature_dim: width,
        note: GEOMETRY_NOTE.to_string(),
    })
}
