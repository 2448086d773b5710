use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::forward::{Decoder, ParamVars};
use super::visual::VisualInput;
use super::vocab::TokenId;
use super::{ModelParams, ReferenceModel};
use crate::error::{domain, Error, Result};
use crate::tensor::{Adam, AdamConfig, Graph, Tensor, Var};

/// One supervised example: image, prompt (starting with BOS), target answer.
#[derive(Debug, Clone)]
pub struct SftExample {
    pub visual: VisualInput,
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub init_seed: u64,
    pub shuffle_seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 12,
            batch_size: 32,
            init_seed: 0,
            shuffle_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub model: ReferenceModel,
    /// Mean batch loss after each optimizer step.
    pub loss_curve: Vec<f64>,
    /// Mean loss over each epoch's batches.
    pub epoch_losses: Vec<f64>,
}

/// Per-item losses and gradients averaged over a batch. Items are evaluated
/// in parallel; the reduction runs in item order so results are
/// reproducible regardless of thread scheduling.
pub fn batch_gradients<T, A, F>(
    params: &ModelParams,
    items: &[T],
    f: F,
) -> Result<(f64, Vec<Tensor>, Vec<A>)>
where
    T: Sync,
    A: Send,
    F: Fn(&mut Graph, &Decoder<'_>, &T) -> Result<(Var, A)> + Sync,
{
    if items.is_empty() {
        return Err(domain("empty batch"));
    }
    let per_item: Vec<Result<(f64, Vec<Tensor>, A)>> = items
        .par_iter()
        .map(|item| {
            let mut g = Graph::new();
            let vars = ParamVars::trainable(&mut g, params);
            let dec = Decoder::new(&params.config, &vars);
            let (loss, aux) = f(&mut g, &dec, item)?;
            let value = g.value(loss).item()?;
            g.backward(loss)?;
            Ok((value, vars.grads(&g), aux))
        })
        .collect();

    let n = items.len() as f64;
    let mut total = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    let mut auxes = Vec::with_capacity(items.len());
    for r in per_item {
        let (loss, g, aux) = r?;
        total += loss;
        auxes.push(aux);
        match &mut grads {
            None => grads = Some(g),
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(&g) {
                    a.data_mut()
                        .iter_mut()
                        .zip(b.data())
                        .for_each(|(x, y)| *x += y);
                }
            }
        }
    }
    let mut grads = grads.unwrap();
    grads
        .iter_mut()
        .for_each(|t| t.data_mut().iter_mut().for_each(|x| *x /= n));
    Ok((total / n, grads, auxes))
}

/// Mean per-token cross-entropy of the response.
pub fn sft_example_loss(g: &mut Graph, dec: &Decoder<'_>, ex: &SftExample) -> Result<Var> {
    let vis = dec.encode_visual(g, &ex.visual, None)?;
    let ctx = dec.visual_context(g, vis)?;
    let lp = dec.sequence_logprob(g, &ctx, &ex.prompt, &ex.response)?;
    Ok(g.scale(lp, -1.0 / ex.response.len() as f64))
}

/// Supervised fine-tuning with Adam. The result is returned frozen, ready to
/// serve as the reference policy.
pub fn sft_train(
    initial: ModelParams,
    corpus: &[SftExample],
    cfg: &SftConfig,
) -> Result<SftOutcome> {
    if corpus.is_empty() {
        return Err(domain("sft corpus is empty"));
    }
    if cfg.batch_size == 0 {
        return Err(domain("batch_size must be positive"));
    }
    let mut params = initial;
    let mut opt = Adam::new(AdamConfig::default());
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut loss_curve = Vec::new();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&SftExample> = chunk.iter().map(|&i| &corpus[i]).collect();
            let (loss, grads, _) = batch_gradients(&params, &batch, |g, dec, ex| {
                Ok((sft_example_loss(g, dec, ex)?, ()))
            })?;
            if !loss.is_finite() || grads.iter().any(|t| !t.is_finite()) {
                return Err(Error::Diverged {
                    step: loss_curve.len(),
                    reason: format!("non-finite sft loss {loss}"),
                    last_finite: Box::new(params),
                });
            }
            let before = params.clone();
            opt.step(&mut params.tensors_mut(), &grads, cfg.learning_rate)?;
            if !params.is_finite() {
                return Err(Error::Diverged {
                    step: loss_curve.len(),
                    reason: "non-finite parameters after update".into(),
                    last_finite: Box::new(before),
                });
            }
            loss_curve.push(loss);
            epoch_total += loss;
            batches += 1;
        }
        epoch_losses.push(epoch_total / batches as f64);
    }
    Ok(SftOutcome {
        model: ReferenceModel::freeze(params),
        loss_curve,
        epoch_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlm::vocab::{BOS, EOS};
    use crate::vlm::{ModelConfig, Scene, SceneLayout};

    fn example(seed: u64) -> SftExample {
        let cfg = ModelConfig::default();
        let scene = Scene::new(vec![3, 1, 4, 1], SceneLayout::default()).unwrap();
        SftExample {
            visual: VisualInput::render(&scene, SceneLayout::default(), &cfg, 0.1, seed).unwrap(),
            prompt: vec![BOS, 6, 7, 9],
            response: vec![15, 13, 16, 13, EOS],
        }
    }

    #[test]
    fn empty_corpus_is_error() {
        let p = ModelParams::init(ModelConfig::default(), 0).unwrap();
        assert!(sft_train(p, &[], &SftConfig::default()).is_err());
    }

    #[test]
    fn single_example_overfits() {
        let p = ModelParams::init(ModelConfig::default(), 0).unwrap();
        let cfg = SftConfig {
            epochs: 2000,
            batch_size: 1,
            ..SftConfig::default()
        };
        let out = sft_train(p, &[example(1)], &cfg).unwrap();
        let first_below = out.loss_curve.iter().position(|&l| l < 0.05);
        assert!(
            first_below.is_some(),
            "final loss {:?}",
            out.loss_curve.last()
        );
        assert!(out.loss_curve.last().unwrap() <= out.loss_curve.first().unwrap());
    }

    #[test]
    fn deterministic_training() {
        let corpus: Vec<SftExample> = (0..6).map(example).collect();
        let cfg = SftConfig {
            epochs: 3,
            batch_size: 4,
            ..SftConfig::default()
        };
        let run = || {
            let p = ModelParams::init(ModelConfig::default(), 9).unwrap();
            sft_train(p, &corpus, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert!(a.model.bitwise_eq(&b.model));
        assert_eq!(a.loss_curve, b.loss_curve);
    }
}
