use super::attention::{linear, switched_attention, switched_gelu, AttentionWeights};
use super::{
    GeluGranularity, ModelConfig, ModelParams, Params, SwitchSet, VitError, LAYERNORM_EPS,
};
use crate::autodiff::{Graph, Tensor, Var};
use crate::rng::Rng;

/// Graph handles for the two switch masks.
#[derive(Clone, Copy, Debug)]
pub struct SwitchVars {
    pub gelu: Var,
    pub softmax: Var,
}

/// Records every weight as a leaf; trainable leaves receive gradients.
pub fn bind_params(g: &mut Graph, params: &ModelParams, trainable: bool) -> Params<Var> {
    params.map(|t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })
}

/// Frozen masks enter the graph as constants and never receive gradients.
pub fn bind_switches(g: &mut Graph, switches: &SwitchSet) -> SwitchVars {
    let mut leaf = |t: &Tensor, frozen: bool| {
        if frozen {
            g.constant(t.clone())
        } else {
            g.param(t.clone())
        }
    };
    SwitchVars {
        gelu: leaf(&switches.gelu, switches.gelu_frozen),
        softmax: leaf(&switches.softmax, switches.softmax_frozen),
    }
}

/// `[B, H, W, C]` images → `[B, patches, p·p·C]`, patches in row-major
/// grid order, each flattened as (row, column, channel).
pub fn patchify(g: &mut Graph, images: Var, cfg: &ModelConfig) -> Result<Var, VitError> {
    let shape = g.shape(images).to_vec();
    let expected = [cfg.image_size, cfg.image_size, cfg.channels];
    if shape.len() != 4 || shape[1..] != expected {
        return Err(VitError::InputShape {
            got: shape,
            expected: [&[0][..], &expected[..]].concat(),
        });
    }
    let (b, grid, p, c) = (shape[0], cfg.grid(), cfg.patch_size, cfg.channels);
    let x = g.reshape(images, &[b, grid, p, grid, p, c])?;
    let x = g.permute(x, &[0, 1, 3, 2, 4, 5])?;
    Ok(g.reshape(x, &[b, grid * grid, p * p * c])?)
}

/// Logits `[B, classes]` for `[B, H, W, C]` images.
pub fn vit_forward(
    g: &mut Graph,
    cfg: &ModelConfig,
    params: &Params<Var>,
    switches: &SwitchVars,
    images: Var,
) -> Result<Var, VitError> {
    let n = cfg.num_tokens();
    let expect = |g: &Graph, v: Var, shape: Vec<usize>| {
        if g.shape(v) == shape.as_slice() {
            Ok(())
        } else {
            Err(VitError::SwitchShape(format!(
                "{:?}, expected {:?}",
                g.shape(v),
                shape
            )))
        }
    };
    expect(g, switches.gelu, cfg.gelu_switch_shape())?;
    expect(g, switches.softmax, cfg.softmax_switch_shape())?;

    let patches = patchify(g, images, cfg)?;
    let tokens = linear(g, patches, params.patch_w, params.patch_b)?;
    let tokens = g.prepend_row(tokens, params.cls_token)?;
    let mut h = g.add(tokens, params.pos_embed)?;

    for (l, layer) in params.layers.iter().enumerate() {
        let a = g.layernorm(h, layer.ln1_gamma, layer.ln1_beta, LAYERNORM_EPS)?;
        let s = g.select(switches.softmax, 0, l)?;
        let attn = switched_attention(
            g,
            a,
            s,
            &AttentionWeights::of_layer(layer),
            cfg.num_heads,
            cfg.attn_variant,
        )?;
        h = g.add(h, attn)?;

        let b = g.layernorm(h, layer.ln2_gamma, layer.ln2_beta, LAYERNORM_EPS)?;
        let u = linear(g, b, layer.w_fc1, layer.b_fc1)?;
        let c = g.select(switches.gelu, 0, l)?;
        let c = match cfg.gelu_granularity {
            GeluGranularity::PerToken => g.reshape(c, &[n, 1])?,
            GeluGranularity::PerElement => c,
        };
        let u = switched_gelu(g, c, u)?;
        let v = linear(g, u, layer.w_fc2, layer.b_fc2)?;
        h = g.add(h, v)?;
    }

    let cls = g.select(h, 1, 0)?;
    let cls = g.layernorm(cls, params.norm_gamma, params.norm_beta, LAYERNORM_EPS)?;
    linear(g, cls, params.head_w, params.head_b)
}

/// Configuration, weights and switches of one switched ViT.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
    pub switches: SwitchSet,
}

impl Model {
    /// Freshly initialized weights, all switches at 1 and trainable.
    pub fn new(config: ModelConfig, epsilon: f64, rng: &mut Rng) -> Result<Self, VitError> {
        config.validate()?;
        let params = ModelParams::init(&config, rng);
        let switches = SwitchSet::new(&config, epsilon);
        Ok(Self {
            config,
            params,
            switches,
        })
    }

    /// Value-only forward pass.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor, VitError> {
        let mut g = Graph::new();
        let params = bind_params(&mut g, &self.params, false);
        let mut frozen = self.switches.clone();
        frozen.gelu_frozen = true;
        frozen.softmax_frozen = true;
        let switches = bind_switches(&mut g, &frozen);
        let x = g.constant(images.clone());
        let out = vit_forward(&mut g, &self.config, &params, &switches, x)?;
        Ok(g.value(out).clone())
    }

    pub fn predict(&self, images: &Tensor) -> Result<Vec<usize>, VitError> {
        Ok(argmax_rows(&self.logits(images)?))
    }
}

pub(crate) fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape()[1];
    logits
        .data()
        .chunks(c)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                    if v > best.1 {
                        (i, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}
