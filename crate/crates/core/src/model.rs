//! Parameters of the captioner and the transformer block shared by the
//! video encoder and the multimodal encoder.

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Name of the learnable `M×M` mask pre-activation matrix.
pub const MASK_PARAM: &str = "mask.logits";
/// Learned per-grid-position embedding of the video tokens.
pub const VIDEO_POS_PARAM: &str = "video.pos";

pub const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

pub type ParamStore<F> = BTreeMap<String, Tensor<F>>;

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionModel<F = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

/// Parameters registered on a tape for one forward pass.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl FromIterator<(String, Var)> for Bound {
    fn from_iter<I: IntoIterator<Item = (String, Var)>>(iter: I) -> Self {
        Bound {
            vars: iter.into_iter().collect(),
        }
    }
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    /// Substitutes the variable used for `name`.
    pub fn insert(&mut self, name: &str, var: Var) {
        self.vars.insert(name.to_string(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

fn block_shapes(prefix: &str, d: usize, ratio: usize, out: &mut Vec<(String, Vec<usize>)>) {
    for ln in ["ln1", "ln2"] {
        out.push((format!("{prefix}.{ln}.g"), vec![d]));
        out.push((format!("{prefix}.{ln}.b"), vec![d]));
    }
    for proj in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.{proj}.w"), vec![d, d]));
        out.push((format!("{prefix}.{proj}.b"), vec![d]));
    }
    out.push((format!("{prefix}.fc1.w"), vec![d, ratio * d]));
    out.push((format!("{prefix}.fc1.b"), vec![ratio * d]));
    out.push((format!("{prefix}.fc2.w"), vec![ratio * d, d]));
    out.push((format!("{prefix}.fc2.b"), vec![d]));
}

/// Every parameter name with its shape.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let p = &cfg.patch;
    let e = &cfg.encoder;
    let (dv, d, m, n) = (p.width, e.hidden, cfg.video_len(), e.text_len);
    let mut out = vec![
        ("video.patch.w".to_string(), vec![p.block_len(), dv]),
        ("video.patch.b".to_string(), vec![dv]),
        (VIDEO_POS_PARAM.to_string(), vec![m, dv]),
    ];
    for i in 0..p.depth {
        block_shapes(&format!("video.block{i}"), dv, e.mlp_ratio, &mut out);
    }
    out.extend([
        ("video.ln.g".to_string(), vec![dv]),
        ("video.ln.b".to_string(), vec![dv]),
        ("video.proj1.w".to_string(), vec![dv, d]),
        ("video.proj1.b".to_string(), vec![d]),
        ("video.proj2.w".to_string(), vec![d, d]),
        ("video.proj2.b".to_string(), vec![d]),
        ("text.tok".to_string(), vec![e.vocab_size, d]),
        ("text.pos".to_string(), vec![n, d]),
        ("text.type".to_string(), vec![2, d]),
    ]);
    for i in 0..e.layers {
        block_shapes(&format!("layer{i}"), d, e.mlp_ratio, &mut out);
    }
    out.extend([
        ("final_ln.g".to_string(), vec![d]),
        ("final_ln.b".to_string(), vec![d]),
        ("head.w".to_string(), vec![d, e.vocab_size]),
        ("head.b".to_string(), vec![e.vocab_size]),
        (MASK_PARAM.to_string(), vec![m, m]),
    ]);
    out
}

/// Linear-layer weights are the only tensors subject to weight decay.
pub fn is_decayed(name: &str) -> bool {
    name.ends_with(".w")
}

impl<F: Real> CaptionModel<F> {
    /// Gaussian(0, 0.02) weights and embeddings, zero biases, unit norm
    /// scales, and a constant mask pre-activation.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, &[0x1417]);
        let mut params = ParamStore::new();
        for (name, shape) in param_shapes(&config) {
            let t = if name == MASK_PARAM {
                Tensor::full(&shape, F::of(config.encoder.mask_init))
            } else if name.ends_with(".g") {
                Tensor::full(&shape, F::one())
            } else if name.ends_with(".b") {
                Tensor::zeros(&shape)
            } else {
                Tensor::from_fn(&shape, |_| F::of(rng.normal(0.0, INIT_STD)))
            };
            params.insert(name, t);
        }
        Ok(Self { config, params })
    }

    pub fn cast<G: Real>(&self) -> CaptionModel<G> {
        CaptionModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<F>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Registers every parameter on `tape`; those for which `trainable`
    /// returns true receive gradients.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|(name, t)| {
                let v = if trainable(name) {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }
}

pub(crate) fn linear<F: Real>(tape: &mut Tape<F>, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = b.get(&format!("{prefix}.w"))?;
    let bias = b.get(&format!("{prefix}.b"))?;
    tape.linear(x, w, bias)
}

pub(crate) fn layer_norm<F: Real>(
    tape: &mut Tape<F>,
    b: &Bound,
    prefix: &str,
    x: Var,
) -> Result<Var> {
    let g = b.get(&format!("{prefix}.g"))?;
    let beta = b.get(&format!("{prefix}.b"))?;
    tape.layer_norm(x, g, beta, F::of(LN_EPS))
}

/// Pre-norm block: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`.
pub(crate) fn transformer_block<F: Real>(
    tape: &mut Tape<F>,
    b: &Bound,
    prefix: &str,
    x: Var,
    bias: Var,
    groups: usize,
    heads: usize,
) -> Result<Var> {
    let h = layer_norm(tape, b, &format!("{prefix}.ln1"), x)?;
    let q = linear(tape, b, &format!("{prefix}.q"), h)?;
    let k = linear(tape, b, &format!("{prefix}.k"), h)?;
    let v = linear(tape, b, &format!("{prefix}.v"), h)?;
    let a = tape.attention(q, k, v, bias, groups, heads)?;
    let o = linear(tape, b, &format!("{prefix}.o"), a)?;
    let x = tape.add(x, o)?;
    let h = layer_norm(tape, b, &format!("{prefix}.ln2"), x)?;
    let f = linear(tape, b, &format!("{prefix}.fc1"), h)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, b, &format!("{prefix}.fc2"), f)?;
    tape.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exactly_one_mask_matrix() {
        let m = CaptionModel::<f32>::init(ModelConfig::default(), 1).unwrap();
        let masks: Vec<&String> = m.params.keys().filter(|k| k.starts_with("mask")).collect();
        assert_eq!(masks, vec![MASK_PARAM]);
        let mv = m.config.video_len();
        assert_eq!(m.params[MASK_PARAM].shape(), &[mv, mv]);
        assert!(m.params[MASK_PARAM].data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn init_is_seeded() {
        let a = CaptionModel::<f32>::init(ModelConfig::default(), 5).unwrap();
        let b = CaptionModel::<f32>::init(ModelConfig::default(), 5).unwrap();
        let c = CaptionModel::<f32>::init(ModelConfig::default(), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params["layer0.q.b"].data().iter().all(|&v| v == 0.0));
        assert!(a.params["layer0.ln1.g"].data().iter().all(|&v| v == 1.0));
    }
}
