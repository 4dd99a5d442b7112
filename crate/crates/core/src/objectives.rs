//! Training losses: translation NLL plus an optional source-independence
//! regularizer weighted by `alpha`.
//!
//! The decoder-side regularizers compare two teacher-forced runs over the
//! same target `Y`: a translation pass conditioned on `Encoder(X)` and an
//! auto-encoding pass conditioned on `Encoder(Y)`. Inside the regularizer the
//! decoder reads detached parameters, so only the encoder is shaped by it.

use serde::{Deserialize, Serialize};

use crate::corpus::ParallelExample;
use crate::error::{Error, Result};
use crate::model::{teacher_forcing, Bound, DecodePass, EncoderOutput, ModelConfig, Net, Parameters, SeqBatch};
use crate::numeric::{Graph, Reduction, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularizer {
    #[default]
    None,
    MseEncoder,
    MseAttention,
    MseDecoder,
    KlSoftmax,
}

impl Regularizer {
    /// Coefficient used when the configuration leaves `alpha` unset.
    pub fn default_alpha(self) -> f64 {
        match self {
            Regularizer::KlSoftmax => 0.01,
            _ => 0.2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regularizer::None => "none",
            Regularizer::MseEncoder => "mse_encoder",
            Regularizer::MseAttention => "mse_attention",
            Regularizer::MseDecoder => "mse_decoder",
            Regularizer::KlSoftmax => "kl_softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub regularizer: Regularizer,
    pub alpha: f64,
    pub reduction: Reduction,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::new(Regularizer::None)
    }
}

impl ObjectiveConfig {
    pub fn new(regularizer: Regularizer) -> Self {
        Self {
            regularizer,
            alpha: regularizer.default_alpha(),
            reduction: Reduction::Mean,
        }
    }

    pub fn with_alpha(self, alpha: f64) -> Self {
        Self { alpha, ..self }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "objective.alpha: {} must be a nonnegative number",
                self.alpha
            )));
        }
        if self.regularizer == Regularizer::MseEncoder && !model.encoder_variant.is_pooling() {
            return Err(Error::Config(
                "objective.regularizer: mse_encoder needs a fixed-size encoder (model.encoder_variant = mean_pool or attn_pool)"
                    .into(),
            ));
        }
        Ok(())
    }

    /// Whether the regularization term is computed at all.
    pub fn active(&self) -> bool {
        self.regularizer != Regularizer::None && self.alpha != 0.0
    }
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub nll: f32,
    pub reg: f32,
    pub total: f32,
}

/// A batch of parallel examples in the three layouts the losses need.
#[derive(Clone, Debug)]
pub struct PairBatch {
    pub src: SeqBatch,
    /// the target sentence presented as encoder input, for the auto pass
    pub tgt_as_src: SeqBatch,
    pub prefix: SeqBatch,
    pub targets: Vec<usize>,
}

impl PairBatch {
    pub fn new(examples: &[&ParallelExample], cfg: &ModelConfig) -> Result<Self> {
        let src: Vec<&[usize]> = examples.iter().map(|e| e.src.as_slice()).collect();
        let tgt: Vec<&[usize]> = examples.iter().map(|e| e.tgt.as_slice()).collect();
        let src_langs: Vec<usize> = examples.iter().map(|e| e.src_lang).collect();
        let tgt_langs: Vec<usize> = examples.iter().map(|e| e.tgt_lang).collect();
        let (prefix, targets) = teacher_forcing(&tgt, &tgt_langs, cfg)?;
        Ok(Self {
            src: SeqBatch::new(&src, &src_langs, cfg.pad())?,
            tgt_as_src: SeqBatch::new(&tgt, &tgt_langs, cfg.pad())?,
            prefix,
            targets,
        })
    }

    /// Number of predicted (non-pad) target tokens.
    pub fn n_tokens(&self) -> usize {
        self.prefix.lens.iter().sum()
    }
}

/// Mean negative log-likelihood over the valid rows.
pub fn nll_loss(g: &mut Graph<f32>, logits: Var, targets: &[usize], valid: &[bool]) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets, Some(valid))?)
}

/// Squared distance between two fixed-size encodings.
pub fn reg_mse_encoder(
    g: &mut Graph<f32>,
    enc_x: &EncoderOutput,
    enc_y: &EncoderOutput,
    reduction: Reduction,
) -> Result<Var> {
    if !enc_x.pooled || !enc_y.pooled || enc_x.len != enc_y.len {
        return Err(Error::Model(
            "encoder regularizer needs fixed-size encoder outputs".into(),
        ));
    }
    Ok(g.mse(enc_x.states, enc_y.states, reduction)?)
}

fn check_pair(trans: &DecodePass, auto: &DecodePass) -> Result<()> {
    if trans.len != auto.len || trans.batch != auto.batch || trans.valid != auto.valid {
        return Err(Error::Model(format!(
            "decoder passes differ in length ({} vs {})",
            trans.len, auto.len
        )));
    }
    if trans.attn_contexts.len() != auto.attn_contexts.len() {
        return Err(Error::Model(format!(
            "decoder passes differ in layer count ({} vs {})",
            trans.attn_contexts.len(),
            auto.attn_contexts.len()
        )));
    }
    Ok(())
}

/// Per-layer squared distance of cross-attention contexts, summed over layers.
pub fn reg_mse_attention(
    g: &mut Graph<f32>,
    trans: &DecodePass,
    auto: &DecodePass,
    reduction: Reduction,
) -> Result<Var> {
    check_pair(trans, auto)?;
    let mut total: Option<Var> = None;
    for (&a, &b) in trans.attn_contexts.iter().zip(&auto.attn_contexts) {
        let layer = g.mse_rows(a, b, Some(&trans.valid), reduction)?;
        total = Some(match total {
            Some(t) => g.add(t, layer)?,
            None => layer,
        });
    }
    total.ok_or_else(|| Error::Model("decoder has no layers".into()))
}

/// Squared distance of the final normalized decoder states.
pub fn reg_mse_decoder(
    g: &mut Graph<f32>,
    trans: &DecodePass,
    auto: &DecodePass,
    reduction: Reduction,
) -> Result<Var> {
    check_pair(trans, auto)?;
    Ok(g.mse_rows(trans.dec_states, auto.dec_states, Some(&trans.valid), reduction)?)
}

/// `KL(P_trans ‖ P_auto)` per target step, averaged (or summed) over steps.
pub fn reg_kl_softmax(
    g: &mut Graph<f32>,
    trans: &DecodePass,
    auto: &DecodePass,
    reduction: Reduction,
) -> Result<Var> {
    check_pair(trans, auto)?;
    let p = g.softmax(trans.logits, 1)?;
    let q = g.softmax(auto.logits, 1)?;
    let kl = g.kl_div_rows(p, q, Some(&trans.valid))?;
    Ok(match reduction {
        Reduction::Mean => kl,
        Reduction::Sum => {
            let n = trans.valid.iter().filter(|&&v| v).count();
            g.scale(kl, n as f32)
        }
    })
}

/// How the regularizer keeps decoder parameters out of its gradient.
#[derive(Clone, Copy, Debug)]
pub enum DecoderIsolation<'p> {
    /// decoder reads detached copies of the live parameters
    Detach,
    /// decoder reads separate differentiable copies whose gradients are
    /// discarded
    FrozenCopy(&'p Parameters),
}

/// Recorded loss nodes of one [`combined_loss`] evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub nll: Var,
    pub reg: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown(&self, g: &Graph<f32>) -> LossBreakdown {
        LossBreakdown {
            nll: g.item(self.nll),
            reg: self.reg.map_or(0.0, |r| g.item(r)),
            total: g.item(self.total),
        }
    }
}

/// `nll + alpha * reg`. The NLL comes from the translation pass alone. When
/// the regularizer is inactive nothing beyond the NLL is recorded, so the
/// total is bitwise the NLL.
pub fn combined_loss(
    g: &mut Graph<f32>,
    net: &mut Net<'_>,
    p: &Bound,
    batch: &PairBatch,
    objective: &ObjectiveConfig,
    isolation: DecoderIsolation<'_>,
) -> Result<LossVars> {
    objective.validate(net.cfg)?;
    let enc_x = net.encode(g, p, &batch.src)?;
    let pass = net.decode_teacher_forced(g, p, &batch.prefix, &enc_x)?;
    let nll = nll_loss(g, pass.logits, &batch.targets, &pass.valid)?;
    if !objective.active() {
        return Ok(LossVars {
            nll,
            reg: None,
            total: nll,
        });
    }
    let enc_y = net.encode(g, p, &batch.tgt_as_src)?;
    let red = objective.reduction;
    let reg = if objective.regularizer == Regularizer::MseEncoder {
        reg_mse_encoder(g, &enc_x, &enc_y, red)?
    } else {
        let pd = match isolation {
            DecoderIsolation::Detach => p.with_detached_decoder(g),
            DecoderIsolation::FrozenCopy(params) => p.with_frozen_decoder_copy(g, params),
        };
        let trans = net.decode_teacher_forced(g, &pd, &batch.prefix, &enc_x)?;
        let auto = net.decode_teacher_forced(g, &pd, &batch.prefix, &enc_y)?;
        match objective.regularizer {
            Regularizer::MseAttention => reg_mse_attention(g, &trans, &auto, red)?,
            Regularizer::MseDecoder => reg_mse_decoder(g, &trans, &auto, red)?,
            Regularizer::KlSoftmax => reg_kl_softmax(g, &trans, &auto, red)?,
            Regularizer::None | Regularizer::MseEncoder => unreachable!(),
        }
    };
    let weighted = g.scale(reg, objective.alpha as f32);
    let total = g.add(nll, weighted)?;
    Ok(LossVars {
        nll,
        reg: Some(reg),
        total,
    })
}
