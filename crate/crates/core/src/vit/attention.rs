use super::{AttentionVariant, LayerParams, VitError};
use crate::autodiff::{Graph, Tensor, Var};

/// Projection weights of one attention block, `[in, out]` layout.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub w_q: Var,
    pub b_q: Var,
    pub w_k: Var,
    pub b_k: Var,
    pub w_v: Var,
    pub b_v: Var,
    pub w_o: Var,
    pub b_o: Var,
}

impl AttentionWeights {
    pub fn of_layer(layer: &LayerParams<Var>) -> Self {
        Self {
            w_q: layer.w_q,
            b_q: layer.b_q,
            w_k: layer.w_k,
            b_k: layer.b_k,
            w_v: layer.w_v,
            b_v: layer.b_v,
            w_o: layer.w_o,
            b_o: layer.b_o,
        }
    }
}

/// `c·GELU(x) + (1−c)·x` with `c` broadcast into `x` (per-token switches
/// have shape `[N, 1]` against `[B, N, m]`, per-element `[N, m]`).
pub fn switched_gelu(g: &mut Graph, c: Var, x: Var) -> Result<Var, VitError> {
    let act = g.gelu(x);
    let gated = g.mul(act, c)?;
    let keep = g.one_minus(c);
    let passed = g.mul(x, keep)?;
    Ok(g.add(gated, passed)?)
}

enum Mix {
    Softmax,
    Taylor(AttentionVariant),
    Switched { s: Var, variant: AttentionVariant },
}

/// Standard multi-head attention with `softmax(QKᵀ/√(d/H))` rows.
pub fn softmax_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var, VitError> {
    attention(g, x, w, heads, Mix::Softmax)
}

/// Attention with every row replaced by `(QKᵀ)²/N`.
pub fn squared_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var, VitError> {
    attention(g, x, w, heads, Mix::Taylor(AttentionVariant::Squared))
}

/// Attention with every row replaced by `QKᵀ/N`.
pub fn scale_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var, VitError> {
    attention(g, x, w, heads, Mix::Taylor(AttentionVariant::Scale))
}

/// Every output token is the mean value vector.
pub fn uniform_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
) -> Result<Var, VitError> {
    attention(g, x, w, heads, Mix::Taylor(AttentionVariant::Uniform))
}

pub fn taylor_attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
    variant: AttentionVariant,
) -> Result<Var, VitError> {
    attention(g, x, w, heads, Mix::Taylor(variant))
}

/// Per head and row `i`: `s_i·softmax_row + (1−s_i)·taylor_row`, where `s`
/// is `[H, N]`.
pub fn switched_attention(
    g: &mut Graph,
    x: Var,
    s: Var,
    w: &AttentionWeights,
    heads: usize,
    variant: AttentionVariant,
) -> Result<Var, VitError> {
    attention(g, x, w, heads, Mix::Switched { s, variant })
}

/// `x [rows, in] · w [in, out] + b`, applied over the last axis of any rank.
pub(crate) fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, VitError> {
    let shape = g.shape(x).to_vec();
    let inner = *shape.last().expect("rank ≥ 1");
    let rows = shape.iter().product::<usize>() / inner;
    let flat = g.reshape(x, &[rows, inner])?;
    let y = g.matmul(flat, w)?;
    let y = g.add(y, b)?;
    let mut out_shape = shape;
    *out_shape.last_mut().unwrap() = g.shape(y)[1];
    Ok(g.reshape(y, &out_shape)?)
}

fn split_heads(
    g: &mut Graph,
    x: Var,
    b: usize,
    n: usize,
    heads: usize,
    dh: usize,
) -> Result<Var, VitError> {
    let x = g.reshape(x, &[b, n, heads, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    Ok(g.reshape(x, &[b * heads, n, dh])?)
}

fn attention(
    g: &mut Graph,
    x: Var,
    w: &AttentionWeights,
    heads: usize,
    mix: Mix,
) -> Result<Var, VitError> {
    let in_shape = g.shape(x).to_vec();
    let (b, n, d) = match in_shape.as_slice() {
        &[n, d] => (1, n, d),
        &[b, n, d] => (b, n, d),
        _ => {
            return Err(VitError::InputShape {
                got: in_shape,
                expected: vec![0, 0, 0],
            });
        }
    };
    if heads == 0 || d % heads != 0 {
        return Err(VitError::Config(format!(
            "{heads} heads do not divide width {d}"
        )));
    }
    let dh = d / heads;
    let x3 = g.reshape(x, &[b, n, d])?;

    let v = linear(g, x3, w.w_v, w.b_v)?;
    let v = split_heads(g, v, b, n, heads, dh)?;

    let needs_logits = !matches!(mix, Mix::Taylor(AttentionVariant::Uniform));
    let logits = if needs_logits {
        let q = linear(g, x3, w.w_q, w.b_q)?;
        let k = linear(g, x3, w.w_k, w.b_k)?;
        let q = split_heads(g, q, b, n, heads, dh)?;
        let k = split_heads(g, k, b, n, heads, dh)?;
        Some(g.bmm(q, k, true)?)
    } else {
        None
    };

    let weights = match mix {
        Mix::Softmax => softmax_rows(g, logits.unwrap(), dh)?,
        Mix::Taylor(variant) => taylor_rows(g, logits, variant, b * heads, n),
        Mix::Switched { s, variant } => {
            let expected = [heads, n];
            if g.shape(s) != expected {
                return Err(VitError::SwitchShape(format!(
                    "attention switches {:?}, expected {:?}",
                    g.shape(s),
                    expected
                )));
            }
            let exact = softmax_rows(g, logits.unwrap(), dh)?;
            let approx = taylor_rows(g, logits, variant, b * heads, n);
            let exact = g.reshape(exact, &[b, heads, n, n])?;
            let approx = g.reshape(approx, &[b, heads, n, n])?;
            let s_col = g.reshape(s, &[heads, n, 1])?;
            let keep = g.one_minus(s_col);
            let a = g.mul(exact, s_col)?;
            let t = g.mul(approx, keep)?;
            let blended = g.add(a, t)?;
            g.reshape(blended, &[b * heads, n, n])?
        }
    };

    let out = g.bmm(weights, v, false)?;
    let out = g.reshape(out, &[b, heads, n, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    let out = g.reshape(out, &[b, n, d])?;
    let out = linear(g, out, w.w_o, w.b_o)?;
    Ok(g.reshape(out, &in_shape)?)
}

fn softmax_rows(g: &mut Graph, logits: Var, dh: usize) -> Result<Var, VitError> {
    let scaled = g.scale(logits, 1.0 / (dh as f64).sqrt());
    Ok(g.softmax(scaled)?)
}

fn taylor_rows(
    g: &mut Graph,
    logits: Option<Var>,
    variant: AttentionVariant,
    groups: usize,
    n: usize,
) -> Var {
    let inv_n = 1.0 / n as f64;
    match (variant, logits) {
        (AttentionVariant::Squared, Some(l)) => {
            let sq = g.square(l);
            g.scale(sq, inv_n)
        }
        (AttentionVariant::Scale, Some(l)) => g.scale(l, inv_n),
        _ => g.constant(Tensor::full(&[groups, n, n], inv_n)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_weights(g: &mut Graph, d: usize) -> AttentionWeights {
        let mut w = || g.constant(Tensor::identity(d));
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let mut b = || g.constant(Tensor::zeros(&[d]));
        let (b_q, b_k, b_v, b_o) = (b(), b(), b(), b());
        AttentionWeights {
            w_q,
            b_q,
            w_k,
            b_k,
            w_v,
            b_v,
            w_o,
            b_o,
        }
    }

    fn scalar_case(
        f: impl Fn(&mut Graph, Var, &AttentionWeights) -> Result<Var, VitError>,
        x: f64,
    ) -> f64 {
        let mut g = Graph::new();
        let w = identity_weights(&mut g, 1);
        let x = g.constant(Tensor::from_rows(&[vec![x]]));
        let y = f(&mut g, x, &w).unwrap();
        g.value(y).item()
    }

    #[test]
    fn squared_scalar_examples() {
        assert_eq!(
            scalar_case(|g, x, w| squared_attention(g, x, w, 1), 1.0),
            1.0
        );
        assert_eq!(
            scalar_case(|g, x, w| squared_attention(g, x, w, 1), 2.0),
            32.0
        );
        assert_eq!(
            scalar_case(|g, x, w| squared_attention(g, x, w, 1), 0.0),
            0.0
        );
    }

    #[test]
    fn scale_scalar_example() {
        assert_eq!(scalar_case(|g, x, w| scale_attention(g, x, w, 1), 2.0), 8.0);
        assert_eq!(scalar_case(|g, x, w| scale_attention(g, x, w, 1), 0.0), 0.0);
    }

    #[test]
    fn switched_half_blend_scalar() {
        let blend = scalar_case(
            |g, x, w| {
                let s = g.constant(Tensor::full(&[1, 1], 0.5));
                switched_attention(g, x, s, w, 1, AttentionVariant::Squared)
            },
            2.0,
        );
        assert_eq!(blend, 17.0);
    }

    #[test]
    fn uniform_averages_values() {
        let mut g = Graph::new();
        let w = identity_weights(&mut g, 2);
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 1.0]]));
        let y = uniform_attention(&mut g, x, &w, 1).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn scale_attention_is_linear_in_value_weights() {
        let mut g = Graph::new();
        let mut w = identity_weights(&mut g, 2);
        let x = g.constant(Tensor::from_rows(&[vec![0.5, -1.0], vec![2.0, 0.25]]));
        let y1 = scale_attention(&mut g, x, &w, 2).unwrap();
        w.w_v = g.constant(Tensor::identity(2).map(|v| 2.0 * v));
        let y2 = scale_attention(&mut g, x, &w, 2).unwrap();
        let doubled = g.value(y1).map(|v| 2.0 * v);
        assert!(doubled.max_abs_diff(g.value(y2)) < 1e-15);
    }

    #[test]
    fn switched_gelu_endpoints() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0]));
        for (c, expected) in [(1.0, 0.841192), (0.0, 1.0), (0.5, 0.920596)] {
            let c = g.constant(Tensor::from_vec(vec![c]));
            let y = switched_gelu(&mut g, c, x).unwrap();
            assert!((g.value(y).item() - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn switch_shape_is_checked() {
        let mut g = Graph::new();
        let w = identity_weights(&mut g, 2);
        let x = g.constant(Tensor::zeros(&[3, 2]));
        let s = g.constant(Tensor::ones(&[1, 2]));
        let err = switched_attention(&mut g, x, s, &w, 1, AttentionVariant::Squared).unwrap_err();
        assert!(matches!(err, VitError::SwitchShape(_)));
    }
}
