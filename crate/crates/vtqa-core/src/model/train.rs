//! Training loop (Adam, per-epoch schedule) and batch prediction.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{argmax, ExampleInput, KecmrnModel, ModelConfig, RngState, Vocabularies};
use crate::data::{Example, FeatureContainer};
use crate::error::{Error, Result};
use crate::metrics::{normalize_key, AnswerType, PredictionSet};
use crate::params::{Ctx, ParamSet};
use crate::tensor::{Real, Tensor};

/// One example resolved against the vocabularies and feature container.
#[derive(Clone, Debug)]
pub struct PreparedExample<T> {
    pub qid: String,
    pub input: ExampleInput<T>,
    pub target_class: usize,
    pub answer_type: AnswerType,
}

/// Tokenize, truncate, resolve features, and map gold answers to classes.
/// Gold answers missing from the vocabulary map to the unknown class.
pub fn prepare_examples<T: Real>(
    examples: &[Example],
    vocab: &Vocabularies,
    features: &FeatureContainer,
    config: &ModelConfig,
) -> Result<Vec<PreparedExample<T>>> {
    examples
        .iter()
        .map(|ex| {
            let question_ids = vocab.tokens.encode(&ex.question, config.max_question_tokens);
            let text_ids = vocab.tokens.encode(&ex.text, config.max_text_tokens);
            if question_ids.is_empty() {
                return Err(Error::contract(format!("{}: question has no tokens", ex.qid)));
            }
            if text_ids.is_empty() {
                return Err(Error::contract(format!("{}: text has no tokens", ex.qid)));
            }
            let record = if features.contains(&ex.image_local_path) {
                features.get(&ex.image_local_path)?
            } else {
                features.get(&ex.qid)?
            };
            let regions: Tensor<T> = record.to_tensor();
            let target_class = match (ex.answer_type, ex.yes_or_no) {
                (AnswerType::Yn, Some(label)) => vocab.answers.id_of(&label.to_string()),
                _ => vocab.answers.id_of(&normalize_key(&ex.answer)),
            }
            .unwrap_or(vocab.answers.unk_id());
            Ok(PreparedExample {
                qid: ex.qid.clone(),
                input: ExampleInput::new(question_ids, text_ids, regions),
                target_class,
                answer_type: ex.answer_type,
            })
        })
        .collect()
}

/// Adam with bias correction; moment buffers align with the parameter set.
pub struct Adam<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            m: params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect(),
            v: params.ids().map(|id| vec![T::zero(); params.get(id).numel()]).collect(),
            step: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &[Vec<T>], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "adam: {} gradient tables for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let b1 = T::cast(self.beta1);
        let b2 = T::cast(self.beta2);
        let one = T::one();
        let corr1 = T::cast(1.0 - self.beta1.powi(self.step as i32));
        let corr2 = T::cast(1.0 - self.beta2.powi(self.step as i32));
        let lr_t = T::cast(lr);
        let eps = T::cast(self.eps);
        for (pid, grad) in params.ids().zip(grads) {
            let m = &mut self.m[pid.0];
            let v = &mut self.v[pid.0];
            let theta = params.get_mut(pid).data_mut();
            for j in 0..theta.len() {
                let g = grad[j];
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / corr1;
                let v_hat = v[j] / corr2;
                theta[j] = theta[j] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Per-epoch trace entry.
#[derive(Clone, Debug, serde::Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Argmax accuracy measured on the training forward passes.
    pub train_accuracy: f64,
    pub learning_rate: f64,
}

/// Train in place for `config.epochs` epochs of shuffled minibatches with
/// gradient averaging. `on_epoch` runs after each epoch (checkpointing,
/// logging); the RNG state it receives makes the schedule resumable.
pub fn train<T: Real, F>(
    model: &mut KecmrnModel<T>,
    data: &[PreparedExample<T>],
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&KecmrnModel<T>, &EpochLog, &RngState) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::contract("train: empty dataset"));
    }
    let config = model.config.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(&model.params, config.adam_beta1, config.adam_beta2, config.adam_eps);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut logs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let lr = if epoch >= config.lr_halve_epoch {
            config.learning_rate * 0.5
        } else {
            config.learning_rate
        };
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut hits = 0usize;

        for batch in order.chunks(config.batch_size) {
            let mut grads: Vec<Vec<T>> = model
                .params
                .ids()
                .map(|id| vec![T::zero(); model.params.get(id).numel()])
                .collect();
            for &i in batch {
                let example_rng = ChaCha8Rng::seed_from_u64(rng.gen::<u64>());
                let mut ctx = Ctx::new(&model.params, true, config.dropout, example_rng);
                let fwd = model.forward(&mut ctx, &data[i].input)?;
                let loss = ctx.tape.cross_entropy(fwd.logits, data[i].target_class)?;
                loss_sum += ctx.tape.scalar_value(loss).as_f64();
                let probs: Vec<f64> =
                    ctx.tape.data(fwd.probs).iter().map(|v| v.as_f64()).collect();
                if argmax(&probs) == data[i].target_class {
                    hits += 1;
                }
                ctx.tape.backward(loss)?;
                ctx.accumulate_grads(&mut grads)?;
            }
            let scale = T::cast(1.0 / batch.len() as f64);
            for table in grads.iter_mut() {
                for g in table.iter_mut() {
                    *g = *g * scale;
                }
            }
            adam.step(&mut model.params, &grads, lr)?;
        }

        let log = EpochLog {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            train_accuracy: hits as f64 / data.len() as f64,
            learning_rate: lr,
        };
        let rng_state = RngState { seed: config.seed, word_pos: rng.get_word_pos() };
        on_epoch(model, &log, &rng_state)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Evaluation-mode class index for one example.
pub fn predict_class<T: Real>(model: &KecmrnModel<T>, input: &ExampleInput<T>) -> Result<usize> {
    Ok(argmax(&model.eval_probs(input)?))
}

/// Argmax answers for every example, keyed by qid.
pub fn predict<T: Real>(
    model: &KecmrnModel<T>,
    data: &[PreparedExample<T>],
) -> Result<PredictionSet> {
    let mut preds = PredictionSet::new();
    for ex in data {
        let class = predict_class(model, &ex.input)?;
        preds.insert(&ex.qid, model.vocab.answers.decode(class))?;
    }
    Ok(preds)
}
