//! Test-only oracles that share no code with the graph-based model.
#![allow(dead_code)]

use privit_core::latency::ParetoPoint;
use privit_core::vit::{
    AttentionVariant, GeluGranularity, LayerParams, ModelConfig, ModelParams, SwitchSet,
};
use privit_core::Tensor;

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + 0.044715 * x.powi(3))).tanh())
}

fn layernorm(x: &[f64], gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .enumerate()
        .map(|(j, v)| (v - mean) * inv * gamma[j] + beta[j])
        .collect()
}

/// `x · W + b` with `W` stored `[in, out]`.
fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (inp, out) = (w.shape()[0], w.shape()[1]);
    assert_eq!(x.len(), inp);
    (0..out)
        .map(|j| b.data()[j] + (0..inp).map(|i| x[i] * w.data()[i * out + j]).sum::<f64>())
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Switch values expanded to per-element GELU gates `[L][N][m]` and
/// per-row attention gates `[L][H][N]`.
pub struct RefSwitches {
    pub gelu: Vec<Vec<Vec<f64>>>,
    pub softmax: Vec<Vec<Vec<f64>>>,
}

impl RefSwitches {
    pub fn constant(cfg: &ModelConfig, c: f64, s: f64) -> Self {
        let (l, n, m, h) = (cfg.num_layers, cfg.num_tokens(), cfg.mlp_dim, cfg.num_heads);
        Self {
            gelu: vec![vec![vec![c; m]; n]; l],
            softmax: vec![vec![vec![s; n]; h]; l],
        }
    }

    pub fn from_set(cfg: &ModelConfig, set: &SwitchSet) -> Self {
        let (l, n, m, h) = (cfg.num_layers, cfg.num_tokens(), cfg.mlp_dim, cfg.num_heads);
        let c = set.gelu.data();
        let s = set.softmax.data();
        let gelu = (0..l)
            .map(|li| {
                (0..n)
                    .map(|ti| {
                        (0..m)
                            .map(|ei| match cfg.gelu_granularity {
                                GeluGranularity::PerToken => c[li * n + ti],
                                GeluGranularity::PerElement => c[(li * n + ti) * m + ei],
                            })
                            .collect()
                    })
                    .collect()
            })
            .collect();
        let softmax = (0..l)
            .map(|li| {
                (0..h)
                    .map(|hi| (0..n).map(|ti| s[(li * h + hi) * n + ti]).collect())
                    .collect()
            })
            .collect();
        Self { gelu, softmax }
    }
}

fn reference_block(
    cfg: &ModelConfig,
    layer: &LayerParams<Tensor>,
    h: &mut [Vec<f64>],
    gelu_gates: &[Vec<f64>],
    row_gates: &[Vec<f64>],
    variant: AttentionVariant,
) {
    let n = h.len();
    let heads = cfg.num_heads;
    let dh = cfg.embed_dim / heads;
    let a: Vec<Vec<f64>> = h
        .iter()
        .map(|t| layernorm(t, layer.ln1_gamma.data(), layer.ln1_beta.data()))
        .collect();
    let q: Vec<Vec<f64>> = a
        .iter()
        .map(|t| affine(t, &layer.w_q, &layer.b_q))
        .collect();
    let k: Vec<Vec<f64>> = a
        .iter()
        .map(|t| affine(t, &layer.w_k, &layer.b_k))
        .collect();
    let v: Vec<Vec<f64>> = a
        .iter()
        .map(|t| affine(t, &layer.w_v, &layer.b_v))
        .collect();
    let mut mixed = vec![vec![0.0; cfg.embed_dim]; n];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..n {
            let logits: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum())
                .collect();
            let exact = softmax(
                &logits
                    .iter()
                    .map(|l| l / (dh as f64).sqrt())
                    .collect::<Vec<_>>(),
            );
            let approx: Vec<f64> = logits
                .iter()
                .map(|&l| match variant {
                    AttentionVariant::Squared => l * l / n as f64,
                    AttentionVariant::Scale => l / n as f64,
                    AttentionVariant::Uniform => 1.0 / n as f64,
                })
                .collect();
            let s = row_gates[hd][i];
            for j in 0..n {
                let w = s * exact[j] + (1.0 - s) * approx[j];
                for c in cols.clone() {
                    mixed[i][c] += w * v[j][c];
                }
            }
        }
    }
    for (t, m) in h.iter_mut().zip(&mixed) {
        let o = affine(m, &layer.w_o, &layer.b_o);
        t.iter_mut().zip(o).for_each(|(x, y)| *x += y);
    }
    for (ti, t) in h.iter_mut().enumerate() {
        let b = layernorm(t, layer.ln2_gamma.data(), layer.ln2_beta.data());
        let u = affine(&b, &layer.w_fc1, &layer.b_fc1);
        let act: Vec<f64> = u
            .iter()
            .zip(&gelu_gates[ti])
            .map(|(&x, &c)| c * gelu(x) + (1.0 - c) * x)
            .collect();
        let o = affine(&act, &layer.w_fc2, &layer.b_fc2);
        t.iter_mut().zip(o).for_each(|(x, y)| *x += y);
    }
}

/// Logits `[B, classes]` for `[B, H, W, C]` images, computed with nested
/// loops over scalars.
pub fn reference_forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    switches: &RefSwitches,
    images: &Tensor,
) -> Tensor {
    let (size, ch, p) = (cfg.image_size, cfg.channels, cfg.patch_size);
    let grid = size / p;
    let b = images.shape()[0];
    let px = |bi: usize, y: usize, x: usize, c: usize| {
        images.data()[((bi * size + y) * size + x) * ch + c]
    };
    let mut out = Vec::new();
    for bi in 0..b {
        let mut h: Vec<Vec<f64>> = vec![params.cls_token.data().to_vec()];
        for gy in 0..grid {
            for gx in 0..grid {
                let mut patch = Vec::with_capacity(p * p * ch);
                for r in 0..p {
                    for c in 0..p {
                        for k in 0..ch {
                            patch.push(px(bi, gy * p + r, gx * p + c, k));
                        }
                    }
                }
                h.push(affine(&patch, &params.patch_w, &params.patch_b));
            }
        }
        let d = cfg.embed_dim;
        for (i, t) in h.iter_mut().enumerate() {
            for j in 0..d {
                t[j] += params.pos_embed.data()[i * d + j];
            }
        }
        for (l, layer) in params.layers.iter().enumerate() {
            reference_block(
                cfg,
                layer,
                &mut h,
                &switches.gelu[l],
                &switches.softmax[l],
                cfg.attn_variant,
            );
        }
        let cls = layernorm(&h[0], params.norm_gamma.data(), params.norm_beta.data());
        out.extend(affine(&cls, &params.head_w, &params.head_b));
    }
    Tensor::new(&[b, cfg.num_classes], out).unwrap()
}

/// Max absolute difference between two tensors.
pub fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b)
}

/// Undominated points, identical duplicates collapsed to the smallest label,
/// sorted by latency. Quadratic on purpose.
pub fn brute_force_frontier(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut out: Vec<ParetoPoint> = points
        .iter()
        .filter(|p| !points.iter().any(|q| q.dominates(p)))
        .filter(|p| {
            !points
                .iter()
                .any(|q| q.latency == p.latency && q.accuracy == p.accuracy && q.label < p.label)
        })
        .cloned()
        .collect();
    out.sort_by(|a, b| a.latency.total_cmp(&b.latency));
    out
}
