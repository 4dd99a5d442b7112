use std::collections::BTreeMap;

use rand::Rng;

use super::{EncoderVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::numeric::{Graph, Tensor, Var};
use crate::seed;

const STREAM_INIT: u64 = 11;

/// Named parameter arrays. The name set and every shape are a pure function
/// of the [`ModelConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    tensors: BTreeMap<String, Tensor>,
}

/// Parameters owned by the decoder alone. The token and language tables are
/// shared with the encoder and are not on this list.
pub fn is_decoder_param(name: &str) -> bool {
    name.starts_with("dec.") || name.starts_with("out.")
}

/// Names whose decoder-side uses read a detached copy inside the
/// regularization term.
fn read_by_decoder(name: &str) -> bool {
    is_decoder_param(name) || name.starts_with("embed.")
}

fn attention_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, h: usize) {
    for w in ["q", "k", "v", "o"] {
        out.push((format!("{prefix}.w{w}"), vec![h, h]));
        out.push((format!("{prefix}.b{w}"), vec![h]));
    }
}

fn norm_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, h: usize) {
    out.push((format!("{prefix}.g"), vec![h]));
    out.push((format!("{prefix}.b"), vec![h]));
}

fn ff_shapes(out: &mut Vec<(String, Vec<usize>)>, prefix: &str, h: usize, inner: usize) {
    out.push((format!("{prefix}.w1"), vec![h, inner]));
    out.push((format!("{prefix}.b1"), vec![inner]));
    out.push((format!("{prefix}.w2"), vec![inner, h]));
    out.push((format!("{prefix}.b2"), vec![h]));
}

impl Parameters {
    /// Every parameter name with its shape, sorted by name.
    pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let (h, inner) = (cfg.d_model, cfg.d_inner);
        let mut out = vec![
            ("embed.tokens".to_string(), vec![cfg.vocab_size, h]),
            ("embed.lang".to_string(), vec![cfg.n_languages, h]),
            ("out.bias".to_string(), vec![cfg.vocab_size]),
        ];
        if !cfg.tie_output {
            out.push(("out.proj".into(), vec![cfg.vocab_size, h]));
        }
        for l in 0..cfg.n_layers_enc {
            norm_shapes(&mut out, &format!("enc.{l}.ln1"), h);
            attention_shapes(&mut out, &format!("enc.{l}.attn"), h);
            norm_shapes(&mut out, &format!("enc.{l}.ln2"), h);
            ff_shapes(&mut out, &format!("enc.{l}.ff"), h, inner);
        }
        norm_shapes(&mut out, "enc.ln", h);
        let n = cfg.n_pooled_states;
        match cfg.encoder_variant {
            EncoderVariant::Baseline => {}
            EncoderVariant::MeanPool => out.push(("pool.proj".into(), vec![h, n * h])),
            EncoderVariant::AttnPool => {
                out.push(("pool.queries".into(), vec![n, h]));
                for w in ["k", "v", "o"] {
                    out.push((format!("pool.w{w}"), vec![h, h]));
                    out.push((format!("pool.b{w}"), vec![h]));
                }
            }
        }
        for l in 0..cfg.n_layers_dec {
            norm_shapes(&mut out, &format!("dec.{l}.ln1"), h);
            attention_shapes(&mut out, &format!("dec.{l}.self"), h);
            norm_shapes(&mut out, &format!("dec.{l}.ln2"), h);
            attention_shapes(&mut out, &format!("dec.{l}.cross"), h);
            norm_shapes(&mut out, &format!("dec.{l}.ln3"), h);
            ff_shapes(&mut out, &format!("dec.{l}.ff"), h, inner);
        }
        norm_shapes(&mut out, "dec.ln", h);
        out.sort();
        out
    }

    /// Seeded initialization: uniform Glorot for projections, uniform with
    /// variance `1/d_model` for embedding tables and pooling queries, unit
    /// gains and zero biases.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seed::rng(seed, &[STREAM_INIT]);
        let h = cfg.d_model as f32;
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::layout(cfg) {
            let leaf = name.rsplit('.').next().unwrap();
            let bound = if name.starts_with("embed.") || name == "out.proj" || name == "pool.queries" {
                Some((3.0 / h).sqrt())
            } else if name == "pool.proj" {
                Some((6.0 / (2.0 * h)).sqrt())
            } else if shape.len() == 2 {
                Some((6.0 / (shape[0] + shape[1]) as f32).sqrt())
            } else {
                None
            };
            let t = match bound {
                Some(a) => Tensor::from_fn(&shape, |_| rng.gen_range(-a..a)),
                None if leaf == "g" => Tensor::full(&shape, 1.0),
                None => Tensor::zeros(&shape),
            };
            tensors.insert(name, t);
        }
        Ok(Self { tensors })
    }

    pub fn from_map(tensors: BTreeMap<String, Tensor>) -> Self {
        Self { tensors }
    }

    /// Checks names and shapes against `cfg`.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let want = Self::layout(cfg);
        if want.len() != self.tensors.len() {
            return Err(Error::Model(format!(
                "expected {} parameters, found {}",
                want.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in want {
            match self.tensors.get(&name) {
                None => return Err(Error::Model(format!("missing parameter {name}"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::Model(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f32 {
        self.tensors
            .iter()
            .map(|(n, t)| other.get(n).map_or(f32::INFINITY, |o| t.max_abs_diff(o)))
            .fold(0.0, f32::max)
    }
}

/// Graph handles for every parameter, keyed by name.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Records every parameter as a differentiable leaf.
    pub fn params(g: &mut Graph<f32>, params: &Parameters) -> Self {
        Self {
            vars: params.iter().map(|(n, t)| (n.clone(), g.param(t))).collect(),
        }
    }

    /// Records every parameter as a constant, for inference.
    pub fn constants(g: &mut Graph<f32>, params: &Parameters) -> Self {
        Self {
            vars: params
                .iter()
                .map(|(n, t)| (n.clone(), g.constant(t.clone())))
                .collect(),
        }
    }

    /// Same bindings, except that everything the decoder reads is replaced
    /// by a detached copy. Encoder-side uses keep the live handles.
    pub fn with_detached_decoder(&self, g: &mut Graph<f32>) -> Self {
        let vars = self
            .vars
            .iter()
            .map(|(n, &v)| (n.clone(), if read_by_decoder(n) { g.detach(v) } else { v }))
            .collect();
        Self { vars }
    }

    /// Like [`Bound::with_detached_decoder`] but with fresh differentiable
    /// copies of the decoder's parameters; their gradients are simply never
    /// applied.
    pub fn with_frozen_decoder_copy(&self, g: &mut Graph<f32>, params: &Parameters) -> Self {
        let vars = self
            .vars
            .iter()
            .map(|(n, &v)| {
                let v = if read_by_decoder(n) {
                    g.param(params.get(n).expect("bound from the same parameters"))
                } else {
                    v
                };
                (n.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Panics on an unknown name: parameter names are fixed by the layout.
    pub fn get(&self, name: &str) -> Var {
        match self.vars.get(name) {
            Some(&v) => v,
            None => panic!("no parameter named {name}"),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradients of the bound leaves after `backward`, as tensors shaped like
    /// the parameters. Leaves the loss does not reach get zeros.
    pub fn gradients(&self, g: &Graph<f32>) -> Parameters {
        let tensors = self
            .vars
            .iter()
            .map(|(n, &v)| {
                let shape = g.shape(v).to_vec();
                let data = g
                    .grad(v)
                    .map(<[f32]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; g.value(v).len()]);
                (n.clone(), Tensor::new(&shape, data).expect("graph shapes are valid"))
            })
            .collect();
        Parameters { tensors }
    }
}
