use super::ModelConfig;
use crate::autodiff::Tensor;
use crate::rng::Rng;

/// Weights of one encoder block. Linear weights are stored `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: T,
    pub ln1_beta: T,
    pub w_q: T,
    pub b_q: T,
    pub w_k: T,
    pub b_k: T,
    pub w_v: T,
    pub b_v: T,
    pub w_o: T,
    pub b_o: T,
    pub ln2_gamma: T,
    pub ln2_beta: T,
    pub w_fc1: T,
    pub b_fc1: T,
    pub w_fc2: T,
    pub b_fc2: T,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1_gamma",
    "ln1_beta",
    "w_q",
    "b_q",
    "w_k",
    "b_k",
    "w_v",
    "b_v",
    "w_o",
    "b_o",
    "ln2_gamma",
    "ln2_beta",
    "w_fc1",
    "b_fc1",
    "w_fc2",
    "b_fc2",
];

impl<T> LayerParams<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.w_fc1,
            &self.b_fc1,
            &self.w_fc2,
            &self.b_fc2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.w_fc1,
            &mut self.b_fc1,
            &mut self.w_fc2,
            &mut self.b_fc2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Self {
        let mut next = || it.next().expect("too few tensors for layer");
        Self {
            ln1_gamma: next(),
            ln1_beta: next(),
            w_q: next(),
            b_q: next(),
            w_k: next(),
            b_k: next(),
            w_v: next(),
            b_v: next(),
            w_o: next(),
            b_o: next(),
            ln2_gamma: next(),
            ln2_beta: next(),
            w_fc1: next(),
            b_fc1: next(),
            w_fc2: next(),
            b_fc2: next(),
        }
    }
}

/// All model weights, generic over storage so the same tree holds tensors
/// or graph handles.
///
/// Canonical order (used by checkpoints and optimizers): `patch_w`,
/// `patch_b`, `cls_token`, `pos_embed`, then per layer the sixteen
/// [`LayerParams`] fields in declaration order, then `norm_gamma`,
/// `norm_beta`, `head_w`, `head_b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls_token: T,
    pub pos_embed: T,
    pub layers: Vec<LayerParams<T>>,
    pub norm_gamma: T,
    pub norm_beta: T,
    pub head_w: T,
    pub head_b: T,
}

pub type ModelParams = Params<Tensor>;

impl<T> Params<T> {
    pub fn refs(&self) -> Vec<&T> {
        let mut out = vec![
            &self.patch_w,
            &self.patch_b,
            &self.cls_token,
            &self.pos_embed,
        ];
        for layer in &self.layers {
            out.extend(layer.refs());
        }
        out.extend([
            &self.norm_gamma,
            &self.norm_beta,
            &self.head_w,
            &self.head_b,
        ]);
        out
    }

    pub fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut out = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.cls_token,
            &mut self.pos_embed,
        ];
        for layer in &mut self.layers {
            out.extend(layer.refs_mut());
        }
        out.extend([
            &mut self.norm_gamma,
            &mut self.norm_beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    /// Rebuilds a tree from tensors in canonical order.
    pub fn from_flat(num_layers: usize, items: impl IntoIterator<Item = T>) -> Self {
        let mut it = items.into_iter();
        let next = |it: &mut dyn Iterator<Item = T>| it.next().expect("too few tensors");
        let patch_w = next(&mut it);
        let patch_b = next(&mut it);
        let cls_token = next(&mut it);
        let pos_embed = next(&mut it);
        let layers = (0..num_layers)
            .map(|_| LayerParams::from_iter(&mut it))
            .collect();
        let out = Self {
            patch_w,
            patch_b,
            cls_token,
            pos_embed,
            layers,
            norm_gamma: next(&mut it),
            norm_beta: next(&mut it),
            head_w: next(&mut it),
            head_b: next(&mut it),
        };
        assert!(it.next().is_none(), "too many tensors");
        out
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Params<U> {
        Params::from_flat(self.layers.len(), self.refs().into_iter().map(f))
    }

    pub fn count(&self) -> usize {
        4 + 16 * self.layers.len() + 4
    }

    /// Human-readable names in canonical order, e.g. `layer1.w_q`.
    pub fn names(&self) -> Vec<String> {
        let mut out: Vec<String> = ["patch_w", "patch_b", "cls_token", "pos_embed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for l in 0..self.layers.len() {
            out.extend(LAYER_FIELDS.iter().map(|f| format!("layer{l}.{f}")));
        }
        out.extend(
            ["norm_gamma", "norm_beta", "head_w", "head_b"]
                .iter()
                .map(|s| s.to_string()),
        );
        out
    }
}

impl ModelParams {
    /// Shapes in canonical order for `cfg`.
    pub fn shapes(cfg: &ModelConfig) -> Params<Vec<usize>> {
        let (d, m, n) = (cfg.embed_dim, cfg.mlp_dim, cfg.num_tokens());
        let layer = LayerParams {
            ln1_gamma: vec![d],
            ln1_beta: vec![d],
            w_q: vec![d, d],
            b_q: vec![d],
            w_k: vec![d, d],
            b_k: vec![d],
            w_v: vec![d, d],
            b_v: vec![d],
            w_o: vec![d, d],
            b_o: vec![d],
            ln2_gamma: vec![d],
            ln2_beta: vec![d],
            w_fc1: vec![d, m],
            b_fc1: vec![m],
            w_fc2: vec![m, d],
            b_fc2: vec![d],
        };
        Params {
            patch_w: vec![cfg.patch_dim(), d],
            patch_b: vec![d],
            cls_token: vec![d],
            pos_embed: vec![n, d],
            layers: vec![layer; cfg.num_layers],
            norm_gamma: vec![d],
            norm_beta: vec![d],
            head_w: vec![d, cfg.num_classes],
            head_b: vec![cfg.num_classes],
        }
    }

    /// Xavier-uniform linear weights, zero biases, unit layernorm gains and
    /// N(0, 0.02²) class token and positional embeddings.
    pub fn init(cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let shapes = Self::shapes(cfg);
        let names = shapes.names();
        let tensors: Vec<Tensor> = shapes
            .refs()
            .into_iter()
            .zip(&names)
            .map(|(shape, name)| {
                let field = name.rsplit('.').next().unwrap_or(name);
                if field.contains("gamma") {
                    Tensor::ones(shape)
                } else if field == "cls_token" || field == "pos_embed" {
                    rng.normal_tensor(shape, 0.02)
                } else if shape.len() == 2 {
                    let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    rng.uniform_tensor(shape, -bound, bound)
                } else {
                    Tensor::zeros(shape)
                }
            })
            .collect();
        Params::from_flat(cfg.num_layers, tensors)
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        Self::shapes(cfg).map(|s| Tensor::zeros(s))
    }

    pub fn num_values(&self) -> usize {
        self.refs().iter().map(|t| t.len()).sum()
    }
}
