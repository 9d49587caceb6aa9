use std::ops::Range;

use crate::dist::{Rng, TokenDistribution, TokenId};
use crate::drafter::{build_group_layout, GroupLayout, ParallelDrafter};
use crate::error::{Error, Result};
use crate::model::{grad, head_index, AttentionSpec, ModelConfig, TinyTransformer, EMBEDDING};

use super::loss::{cross_entropy_logits, smooth_l1, smooth_l1_grad, soft_cross_entropy_logits, LossWeights};

/// Which training objective to differentiate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    /// Depth-0 slot with weight 1 plus mask slots with weights `λ_k`.
    MedusaParallel,
    /// Mask slots only (weight 0 on the depth-0 slot).
    Medusa,
    /// Feature regression on the final hidden state plus classification, each
    /// slot weighted as in [`Objective::MedusaParallel`].
    Eagle { w_reg: f64, w_cls: f64 },
}

impl Objective {
    fn slot_weight(&self, j: usize, weights: &LossWeights) -> f64 {
        match (self, j) {
            (Objective::Medusa, 0) => 0.0,
            (_, 0) => 1.0,
            _ => weights.lambda(j),
        }
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "medusa-parallel" => Ok(Self::MedusaParallel),
            "medusa" => Ok(Self::Medusa),
            "eagle" => Ok(Self::Eagle { w_reg: 1.0, w_cls: 0.1 }),
            other => Err(Error::Parse(format!(
                "objective {other:?}, expected medusa-parallel, medusa or eagle"
            ))),
        }
    }
}

/// One training sequence expanded into its group layout, plus optional soft
/// targets and feature targets per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub layout: GroupLayout,
    /// Per slot, the teacher distribution over the label position; empty for
    /// hard-label training.
    pub soft: Vec<Option<TokenDistribution>>,
    /// Per slot, the teacher's final hidden state; empty unless distilling features.
    pub features: Vec<Option<Vec<f64>>>,
}

impl Example {
    /// Hard labels: `sequence[1..]` are the targets of `sequence[..n-1]`.
    pub fn hard(sequence: &[TokenId], k: usize, drafter: &ParallelDrafter) -> Result<Self> {
        if sequence.len() < 2 {
            return Err(Error::InvalidInput("training sequence needs at least 2 tokens".into()));
        }
        let n = sequence.len() - 1;
        let layout = build_group_layout(&sequence[..n], &sequence[1..], k, &drafter.vocabulary())?;
        Ok(Self {
            layout,
            soft: Vec::new(),
            features: Vec::new(),
        })
    }

    /// Labels plus the target model's distributions and final hidden states:
    /// slot `(t, j)` is matched against the target's output at position `t + j`.
    pub fn distilled(sequence: &[TokenId], k: usize, drafter: &ParallelDrafter, target: &TinyTransformer) -> Result<Self> {
        let mut ex = Self::hard(sequence, k, drafter)?;
        let n = sequence.len() - 1;
        let out = target.forward(&sequence[..n], &AttentionSpec::causal(n))?;
        let mut soft = Vec::with_capacity(ex.layout.len());
        let mut features = Vec::with_capacity(ex.layout.len());
        for t in 0..n {
            for j in 0..=k {
                if t + j < n {
                    soft.push(Some(crate::dist::apply_temperature(out.logits_row(t + j), 1.0)?));
                    features.push(Some(out.hidden_row(t + j).to_vec()));
                } else {
                    soft.push(None);
                    features.push(None);
                }
            }
        }
        ex.soft = soft;
        ex.features = features;
        Ok(ex)
    }

    pub fn groups(&self) -> usize {
        self.layout.groups()
    }
}

/// Parameter ranges that receive no updates: the base-vocabulary embedding
/// rows and the output head when they are shared with a target model.
pub fn frozen_ranges(cfg: &ModelConfig) -> Vec<(usize, Range<usize>)> {
    if !cfg.share_embeddings_with_target {
        return Vec::new();
    }
    vec![
        (EMBEDDING, 0..cfg.vocab * cfg.d_model),
        (head_index(cfg), 0..cfg.d_model * cfg.vocab),
    ]
}

/// Loss summed over every group in the batch, and the group count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSum {
    pub total: f64,
    pub groups: usize,
}

impl LossSum {
    pub fn mean(&self) -> f64 {
        if self.groups == 0 {
            0.0
        } else {
            self.total / self.groups as f64
        }
    }
}

/// Per-tensor gradients, in the order of `TinyTransformer::params`.
pub type Gradients = Vec<Vec<f64>>;

fn example_loss(
    model: &TinyTransformer,
    ex: &Example,
    objective: &Objective,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(f64, Option<Gradients>)> {
    let layout = &ex.layout;
    let k = layout.k;
    if weights.k() != k {
        return Err(Error::DimensionMismatch(format!(
            "{} loss weights for K = {k}",
            weights.k()
        )));
    }
    let (out, tape) = if want_grad {
        let (o, t) = model.forward_taped(&layout.input_ids, &layout.attn)?;
        (o, Some(t))
    } else {
        (model.forward(&layout.input_ids, &layout.attn)?, None)
    };
    let cfg = model.config();
    let (vocab, d) = (cfg.vocab, cfg.d_model);
    let n = layout.len();
    let mut dlogits = vec![0.0; n * vocab];
    let mut dhidden = match objective {
        Objective::Eagle { .. } => Some(vec![0.0; n * d]),
        _ => None,
    };
    let mut loss = 0.0;
    for slot in 0..n {
        let j = slot % (k + 1);
        let w = objective.slot_weight(j, weights);
        if w == 0.0 {
            continue;
        }
        let z = out.logits_row(slot);
        let soft = ex.soft.get(slot).and_then(|s| s.as_ref());
        let label = layout.labels[slot];
        let (mut l, g) = match (soft, label) {
            (Some(p), _) => soft_cross_entropy_logits(z, p),
            (None, y) if y >= 0 => {
                if y as usize >= vocab {
                    return Err(Error::TokenOutOfRange { id: y as usize, limit: vocab });
                }
                cross_entropy_logits(z, y as usize)
            }
            _ => continue,
        };
        let mut g_scale = w;
        if let Objective::Eagle { w_reg, w_cls } = *objective {
            l *= w_cls;
            g_scale *= w_cls;
            if let Some(Some(f_true)) = ex.features.get(slot) {
                let h = out.hidden_row(slot);
                l += w_reg * smooth_l1(h, f_true)?;
                if let Some(dh) = dhidden.as_mut() {
                    for (i, (&a, &b)) in h.iter().zip(f_true).enumerate() {
                        dh[slot * d + i] = w * w_reg * smooth_l1_grad(a, b, d);
                    }
                }
            }
        }
        loss += w * l;
        for (dst, gv) in dlogits[slot * vocab..(slot + 1) * vocab].iter_mut().zip(g) {
            *dst = g_scale * gv;
        }
    }
    let grads = match tape {
        Some(t) => Some(grad::backward(model, &t, &dlogits, dhidden.as_deref())),
        None => None,
    };
    Ok((loss, grads))
}

/// Loss over a batch without gradients.
pub fn batch_loss(
    drafter: &ParallelDrafter,
    batch: &[Example],
    objective: &Objective,
    weights: &LossWeights,
) -> Result<LossSum> {
    let mut sum = LossSum { total: 0.0, groups: 0 };
    for ex in batch {
        sum.total += example_loss(drafter.model(), ex, objective, weights, false)?.0;
        sum.groups += ex.groups();
    }
    Ok(sum)
}

/// Mean per-group loss over the batch and its gradient with respect to every
/// parameter. Frozen ranges get zero gradient.
pub fn backward(
    drafter: &ParallelDrafter,
    batch: &[Example],
    objective: &Objective,
    weights: &LossWeights,
) -> Result<(LossSum, Gradients)> {
    mean_loss_and_grad(drafter.model(), batch, objective, weights)
}

fn mean_loss_and_grad(
    model: &TinyTransformer,
    batch: &[Example],
    objective: &Objective,
    weights: &LossWeights,
) -> Result<(LossSum, Gradients)> {
    let mut grads: Gradients = model.params().iter().map(|t| vec![0.0; t.data.len()]).collect();
    let mut sum = LossSum { total: 0.0, groups: 0 };
    for ex in batch {
        let (l, g) = example_loss(model, ex, objective, weights, true)?;
        sum.total += l;
        sum.groups += ex.groups();
        for (acc, g) in grads.iter_mut().zip(g.expect("gradients requested")) {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    if !sum.total.is_finite() {
        return Err(Error::InvalidInput(format!("loss is not finite ({})", sum.total)));
    }
    let scale = if sum.groups == 0 { 0.0 } else { 1.0 / sum.groups as f64 };
    for g in grads.iter_mut() {
        g.iter_mut().for_each(|v| *v *= scale);
    }
    for (t, range) in frozen_ranges(model.config()) {
        grads[t][range].iter_mut().for_each(|v| *v = 0.0);
    }
    Ok((sum, grads))
}

/// One analytic-versus-numeric comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheck {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Compares the analytic gradient with central differences of step `step` at
/// up to `per_tensor` random coordinates of every trainable tensor.
pub fn gradient_check(
    drafter: &ParallelDrafter,
    batch: &[Example],
    objective: &Objective,
    weights: &LossWeights,
    per_tensor: usize,
    step: f64,
    rng: &mut Rng,
) -> Result<Vec<GradCheck>> {
    let mut model = drafter.model().clone();
    let (_, grads) = mean_loss_and_grad(&model, batch, objective, weights)?;
    let frozen = frozen_ranges(model.config());
    let mean = |m: &TinyTransformer| -> Result<f64> {
        let mut sum = LossSum { total: 0.0, groups: 0 };
        for ex in batch {
            sum.total += example_loss(m, ex, objective, weights, false)?.0;
            sum.groups += ex.groups();
        }
        Ok(sum.mean())
    };
    let mut checks = Vec::new();
    for t in 0..model.params().len() {
        let len = model.params()[t].data.len();
        let candidates: Vec<usize> = (0..len)
            .filter(|i| !frozen.iter().any(|(ft, r)| *ft == t && r.contains(i)))
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let picks = sample_without_replacement(&candidates, per_tensor, rng);
        for index in picks {
            let orig = model.w(t)[index];
            model.set_compute_value(t, index, orig + step);
            let plus = mean(&model)?;
            model.set_compute_value(t, index, orig - step);
            let minus = mean(&model)?;
            model.set_compute_value(t, index, orig);
            checks.push(GradCheck {
                tensor: model.params()[t].name.clone(),
                index,
                analytic: grads[t][index],
                numeric: (plus - minus) / (2.0 * step),
            });
        }
    }
    Ok(checks)
}

fn sample_without_replacement(items: &[usize], count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut pool = items.to_vec();
    let take = count.min(pool.len());
    for i in 0..take {
        let j = i + rng.below(pool.len() - i);
        pool.swap(i, j);
    }
    pool.truncate(take);
    pool
}
