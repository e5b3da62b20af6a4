//! The full network: token/answer vocabularies, configuration, encoders,
//! stacked KECMR modules, attention-reduce pooling, and the fused answer
//! head.

pub mod checkpoint;
pub mod lstm;
pub mod train;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kecmr::{kecmr_module, KecmrModuleParams, StreamBundle};
use crate::metrics::normalize_answer;
use crate::params::{xavier_uniform, xavier_uniform_scaled, Ctx, ParamId, ParamSet};
use crate::tape::Var;
use crate::tensor::{Real, Tensor};

pub use checkpoint::{load_checkpoint, load_checkpoint_path, save_checkpoint, save_checkpoint_path, RngState};
pub use lstm::LstmParams;
pub use train::{predict, predict_class, prepare_examples, train, Adam, EpochLog, PreparedExample};

/// Every hyperparameter of the network and its training schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input image feature width (d_i).
    pub d_image_in: usize,
    /// Question encoder width (d_q).
    pub d_question: usize,
    /// Text encoder width (d_t).
    pub d_text: usize,
    /// Latent attention width (d).
    pub d_latent: usize,
    /// Fused multimodal width (d_z).
    pub d_fused: usize,
    pub heads: usize,
    /// Per-head width; heads * head_dim must equal d_latent.
    pub head_dim: usize,
    /// Number of stacked KECMR modules.
    pub modules: usize,
    /// CMR layers inside each module.
    pub cmr_per_module: usize,
    /// Key entities selected per text/image stream.
    pub top_k: usize,
    pub embed_dim: usize,
    /// Feed-forward inner width.
    pub d_ff: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch (1-based) from which the learning rate is halved.
    pub lr_halve_epoch: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub max_text_tokens: usize,
    pub max_question_tokens: usize,
    pub min_token_freq: usize,
    pub layer_norm_eps: f64,
    /// Sinusoidal position signal on embedded sequences (off: the LSTM
    /// provides order awareness).
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_image_in: 2048,
            d_question: 512,
            d_text: 512,
            d_latent: 512,
            d_fused: 1024,
            heads: 8,
            head_dim: 64,
            modules: 2,
            cmr_per_module: 2,
            top_k: 5,
            embed_dim: 300,
            d_ff: 2048,
            dropout: 0.1,
            epochs: 13,
            batch_size: 32,
            learning_rate: 1e-4,
            lr_halve_epoch: 10,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_text_tokens: 512,
            max_question_tokens: 32,
            min_token_freq: 1,
            layer_norm_eps: 1e-6,
            positional_encoding: false,
        }
    }
}

impl ModelConfig {
    /// Small-instance config: ties the width family to `d` (d_q = d_t = d,
    /// d_z = 2d, d_ff = 4d, embed = d) the way the full-size defaults relate.
    pub fn tiny(d: usize, heads: usize) -> Self {
        ModelConfig {
            d_image_in: d,
            d_question: d,
            d_text: d,
            d_latent: d,
            d_fused: 2 * d,
            heads,
            head_dim: d / heads,
            d_ff: 4 * d,
            embed_dim: d,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_image_in", self.d_image_in),
            ("d_question", self.d_question),
            ("d_text", self.d_text),
            ("d_latent", self.d_latent),
            ("d_fused", self.d_fused),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("modules", self.modules),
            ("cmr_per_module", self.cmr_per_module),
            ("top_k", self.top_k),
            ("embed_dim", self.embed_dim),
            ("d_ff", self.d_ff),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("max_text_tokens", self.max_text_tokens),
            ("max_question_tokens", self.max_question_tokens),
        ] {
            if v == 0 {
                return Err(Error::contract(format!("config: {name} must be positive")));
            }
        }
        if self.heads * self.head_dim != self.d_latent {
            return Err(Error::contract(format!(
                "config: heads ({}) x head_dim ({}) != d_latent ({})",
                self.heads, self.head_dim, self.d_latent
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract("config: dropout must lie in [0, 1)"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::contract("config: learning_rate must be positive"));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(Error::contract("config: layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Token <-> id table with pad/unk specials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct TokenVocab {
    items: Vec<String>,
    index: HashMap<String, u32>,
}

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";

impl TokenVocab {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut items = vec![PAD_TOKEN.to_string(), UNK_TOKEN.to_string()];
        items.extend(tokens.into_iter().filter(|t| t != PAD_TOKEN && t != UNK_TOKEN));
        Self::from(items)
    }

    pub fn pad_id(&self) -> u32 {
        0
    }

    pub fn unk_id(&self) -> u32 {
        1
    }

    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(self.unk_id())
    }

    pub fn get(&self, id: u32) -> &str {
        &self.items[id as usize]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Normalized token ids, truncated to `max_len`.
    pub fn encode(&self, s: &str, max_len: usize) -> Vec<u32> {
        normalize_answer(s)
            .into_iter()
            .take(max_len)
            .map(|t| self.id(&t))
            .collect()
    }
}

impl From<Vec<String>> for TokenVocab {
    fn from(items: Vec<String>) -> Self {
        let index = items
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        TokenVocab { items, index }
    }
}

impl From<TokenVocab> for Vec<String> {
    fn from(v: TokenVocab) -> Self {
        v.items
    }
}

/// Answer string <-> class id table; class 0 is the unknown answer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct AnswerVocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

pub const UNK_ANSWER: &str = "<unk>";

impl AnswerVocab {
    /// `answers` must already be normalized keys.
    pub fn new(answers: impl IntoIterator<Item = String>) -> Self {
        let mut items = vec![UNK_ANSWER.to_string()];
        items.extend(answers.into_iter().filter(|a| a != UNK_ANSWER));
        Self::from(items)
    }

    pub fn unk_id(&self) -> usize {
        0
    }

    pub fn id_of(&self, normalized: &str) -> Option<usize> {
        self.index.get(normalized).copied()
    }

    pub fn decode(&self, class: usize) -> &str {
        &self.items[class]
    }

    pub fn class_count(&self) -> usize {
        self.items.len()
    }
}

impl From<Vec<String>> for AnswerVocab {
    fn from(items: Vec<String>) -> Self {
        let index = items.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        AnswerVocab { items, index }
    }
}

impl From<AnswerVocab> for Vec<String> {
    fn from(v: AnswerVocab) -> Self {
        v.items
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabularies {
    pub tokens: TokenVocab,
    pub answers: AnswerVocab,
}

/// Learned softmax pooling: two-layer score MLP, masked softmax over rows,
/// weighted row sum.
#[derive(Clone, Debug)]
pub struct AttentionReduce {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl AttentionReduce {
    pub fn init<T: Real>(ps: &mut ParamSet<T>, rng: &mut ChaCha8Rng, prefix: &str, d: usize) -> Self {
        AttentionReduce {
            w1: ps.add(format!("{prefix}.w1"), xavier_uniform(rng, d, d)),
            b1: ps.add(format!("{prefix}.b1"), Tensor::zeros(vec![d])),
            w2: ps.add(format!("{prefix}.w2"), xavier_uniform(rng, d, 1)),
            b2: ps.add(format!("{prefix}.b2"), Tensor::zeros(vec![1])),
        }
    }

    pub fn forward<T: Real>(&self, ctx: &mut Ctx<'_, T>, x: Var, mask: &[bool]) -> Result<Var> {
        let rows = ctx.tape.shape(x)[0];
        if mask.len() != rows {
            return Err(Error::dim(
                "attention_reduce",
                format!("mask length {} vs {} rows", mask.len(), rows),
            ));
        }
        let w1 = ctx.p(self.w1);
        let b1 = ctx.p(self.b1);
        let w2 = ctx.p(self.w2);
        let b2 = ctx.p(self.b2);
        let h = ctx.tape.matmul(x, w1)?;
        let h = ctx.tape.add_bias(h, b1)?;
        let h = ctx.tape.relu(h);
        let s = ctx.tape.matmul(h, w2)?;
        let s = ctx.tape.add_bias(s, b2)?;
        let s = ctx.tape.reshape(s, vec![1, rows])?;
        let weights = ctx.tape.softmax_lastdim(s, Some(mask))?;
        ctx.tape.matmul(weights, x)
    }
}

/// Parameter handles for every piece of the assembled network.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub embedding: ParamId,
    pub question_encoder: LstmParams,
    pub text_encoder: LstmParams,
    pub question_proj: Option<(ParamId, ParamId)>,
    pub text_proj: Option<(ParamId, ParamId)>,
    pub image_proj: (ParamId, ParamId),
    pub modules: Vec<KecmrModuleParams>,
    pub reduce_text: AttentionReduce,
    pub reduce_image: AttentionReduce,
    pub reduce_question: AttentionReduce,
    pub fuse_text: ParamId,
    pub fuse_image: ParamId,
    pub fuse_question: ParamId,
    pub fuse_gamma: ParamId,
    pub fuse_beta: ParamId,
    pub answer_w: ParamId,
    pub answer_b: ParamId,
}

impl Architecture {
    fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        config: &ModelConfig,
        vocab: &Vocabularies,
    ) -> Result<Self> {
        let d = config.d_latent;
        let embedding = ps.add(
            "embedding",
            xavier_uniform(rng, vocab.tokens.len(), config.embed_dim),
        );
        let question_encoder =
            LstmParams::init(ps, rng, "question_lstm", config.embed_dim, config.d_question);
        let text_encoder = LstmParams::init(ps, rng, "text_lstm", config.embed_dim, config.d_text);
        let question_proj = (config.d_question != d).then(|| {
            (
                ps.add("question_proj.w", xavier_uniform(rng, config.d_question, d)),
                ps.add("question_proj.b", Tensor::zeros(vec![d])),
            )
        });
        let text_proj = (config.d_text != d).then(|| {
            (
                ps.add("text_proj.w", xavier_uniform(rng, config.d_text, d)),
                ps.add("text_proj.b", Tensor::zeros(vec![d])),
            )
        });
        let image_proj = (
            ps.add("image_proj.w", xavier_uniform(rng, config.d_image_in, d)),
            ps.add("image_proj.b", Tensor::zeros(vec![d])),
        );
        let modules = (0..config.modules)
            .map(|m| {
                KecmrModuleParams::init(
                    ps,
                    rng,
                    &format!("kecmr{m}"),
                    d,
                    config.heads,
                    config.d_ff,
                    config.layer_norm_eps,
                    config.cmr_per_module,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let reduce_text = AttentionReduce::init(ps, rng, "reduce_text", d);
        let reduce_image = AttentionReduce::init(ps, rng, "reduce_image", d);
        let reduce_question = AttentionReduce::init(ps, rng, "reduce_question", d);
        let fuse_text = ps.add("fuse.text", xavier_uniform(rng, d, config.d_fused));
        let fuse_image = ps.add("fuse.image", xavier_uniform(rng, d, config.d_fused));
        let fuse_question = ps.add("fuse.question", xavier_uniform(rng, d, config.d_fused));
        let fuse_gamma = ps.add("fuse.ln_gamma", Tensor::filled(vec![config.d_fused], T::one()));
        let fuse_beta = ps.add("fuse.ln_beta", Tensor::zeros(vec![config.d_fused]));
        // Softened head init keeps the initial answer distribution near
        // uniform (loss ~ ln C) without freezing the gradient path.
        let answer_w = ps.add(
            "answer.w",
            xavier_uniform_scaled(rng, config.d_fused, vocab.answers.class_count(), 0.1),
        );
        let answer_b = ps.add("answer.b", Tensor::zeros(vec![vocab.answers.class_count()]));
        Ok(Architecture {
            embedding,
            question_encoder,
            text_encoder,
            question_proj,
            text_proj,
            image_proj,
            modules,
            reduce_text,
            reduce_image,
            reduce_question,
            fuse_text,
            fuse_image,
            fuse_question,
            fuse_gamma,
            fuse_beta,
            answer_w,
            answer_b,
        })
    }
}

/// One example's model-ready inputs. Masks are optional; `None` means every
/// position is valid.
#[derive(Clone, Debug)]
pub struct ExampleInput<T> {
    pub question_ids: Vec<u32>,
    pub text_ids: Vec<u32>,
    pub regions: Tensor<T>,
    pub question_mask: Option<Vec<bool>>,
    pub text_mask: Option<Vec<bool>>,
    pub region_mask: Option<Vec<bool>>,
}

impl<T: Real> ExampleInput<T> {
    pub fn new(question_ids: Vec<u32>, text_ids: Vec<u32>, regions: Tensor<T>) -> Self {
        ExampleInput {
            question_ids,
            text_ids,
            regions,
            question_mask: None,
            text_mask: None,
            region_mask: None,
        }
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub logits: Var,
    pub probs: Var,
}

/// The assembled model: config, vocabularies, parameters, and wiring.
#[derive(Clone, Debug)]
pub struct KecmrnModel<T: Real> {
    pub config: ModelConfig,
    pub vocab: Vocabularies,
    pub params: ParamSet<T>,
    pub arch: Architecture,
}

impl<T: Real> KecmrnModel<T> {
    /// Fresh model with seeded initialization.
    pub fn new(config: ModelConfig, vocab: Vocabularies) -> Result<Self> {
        config.validate()?;
        if vocab.answers.class_count() < 2 {
            return Err(Error::contract("model: answer vocabulary is empty"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let arch = Architecture::init(&mut params, &mut rng, &config, &vocab)?;
        Ok(KecmrnModel { config, vocab, params, arch })
    }

    /// Precision switch preserving parameter values (f32 <-> f64).
    pub fn convert<U: Real>(&self) -> KecmrnModel<U> {
        KecmrnModel {
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            params: self.params.convert(),
            arch: self.arch.clone(),
        }
    }

    fn sinusoidal_encoding(&self, len: usize) -> Vec<T> {
        let e = self.config.embed_dim;
        let mut pe = vec![T::zero(); len * e];
        for pos in 0..len {
            for i in 0..e {
                let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / e as f64);
                pe[pos * e + i] = T::cast(if i % 2 == 0 { angle.sin() } else { angle.cos() });
            }
        }
        pe
    }

    /// Embedding lookup, optional position signal, LSTM, optional width
    /// projection; returns all per-step hidden states as `[len, d]`.
    pub fn encode_text(
        &self,
        ctx: &mut Ctx<'_, T>,
        tokens: &[u32],
        encoder: &LstmParams,
        proj: Option<(ParamId, ParamId)>,
    ) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::contract("encode_text: empty token sequence"));
        }
        let emb_table = ctx.p(self.arch.embedding);
        let idx: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let vocab_len = self.vocab.tokens.len();
        if let Some(&bad) = idx.iter().find(|&&i| i >= vocab_len) {
            return Err(Error::contract(format!("encode_text: token id {bad} outside vocabulary")));
        }
        let mut x = ctx.tape.gather_rows(emb_table, &idx)?;
        if self.config.positional_encoding {
            let pe = self
                .tape_constant(ctx, vec![tokens.len(), self.config.embed_dim], self.sinusoidal_encoding(tokens.len()))?;
            x = ctx.tape.add(x, pe)?;
        }
        let mut h = encoder.forward(ctx, x)?;
        if let Some((w, b)) = proj {
            let wv = ctx.p(w);
            let bv = ctx.p(b);
            h = ctx.tape.matmul(h, wv)?;
            h = ctx.tape.add_bias(h, bv)?;
        }
        Ok(h)
    }

    fn tape_constant(&self, ctx: &mut Ctx<'_, T>, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        ctx.tape.constant(shape, data)
    }

    /// Per-region linear projection into the latent width.
    pub fn encode_image(&self, ctx: &mut Ctx<'_, T>, regions: &Tensor<T>) -> Result<Var> {
        if regions.rank() != 2 || regions.last_dim() != self.config.d_image_in {
            return Err(Error::dim(
                "encode_image",
                format!(
                    "regions {:?} vs configured input width {}",
                    regions.shape(),
                    self.config.d_image_in
                ),
            ));
        }
        let x = ctx.tape.leaf(regions);
        let (w, b) = self.image_proj_vars(ctx);
        let y = ctx.tape.matmul(x, w)?;
        ctx.tape.add_bias(y, b)
    }

    fn image_proj_vars(&self, ctx: &mut Ctx<'_, T>) -> (Var, Var) {
        (ctx.p(self.arch.image_proj.0), ctx.p(self.arch.image_proj.1))
    }

    /// Encoders -> stacked KECMR modules -> per-stream reduce -> fused
    /// answer distribution.
    pub fn forward(&self, ctx: &mut Ctx<'_, T>, input: &ExampleInput<T>) -> Result<ForwardVars> {
        let question = self.encode_text(
            ctx,
            &input.question_ids,
            &self.arch.question_encoder,
            self.arch.question_proj,
        )?;
        let text =
            self.encode_text(ctx, &input.text_ids, &self.arch.text_encoder, self.arch.text_proj)?;
        let image = self.encode_image(ctx, &input.regions)?;

        let check_mask = |mask: &Option<Vec<bool>>, len: usize, what: &str| -> Result<Vec<bool>> {
            match mask {
                None => Ok(vec![true; len]),
                Some(m) if m.len() == len => Ok(m.clone()),
                Some(m) => Err(Error::dim(
                    "forward",
                    format!("{what} mask length {} vs {len} positions", m.len()),
                )),
            }
        };
        let mut bundle = StreamBundle {
            text_mask: check_mask(&input.text_mask, input.text_ids.len(), "text")?,
            image_mask: check_mask(&input.region_mask, input.regions.shape()[0], "image")?,
            question_mask: check_mask(&input.question_mask, input.question_ids.len(), "question")?,
            text,
            image,
            question,
        };

        for module in &self.arch.modules {
            let (next, _index) = kecmr_module(module, ctx, &bundle, self.config.top_k)?;
            bundle = next;
        }

        let t_vec = self.arch.reduce_text.forward(ctx, bundle.text, &bundle.text_mask)?;
        let i_vec = self.arch.reduce_image.forward(ctx, bundle.image, &bundle.image_mask)?;
        let q_vec =
            self.arch.reduce_question.forward(ctx, bundle.question, &bundle.question_mask)?;

        self.fuse_and_classify(ctx, t_vec, i_vec, q_vec)
    }

    /// z = layer_norm(W_t t + W_i i + W_q q); softmax(W_a z + b_a).
    pub fn fuse_and_classify(
        &self,
        ctx: &mut Ctx<'_, T>,
        t_vec: Var,
        i_vec: Var,
        q_vec: Var,
    ) -> Result<ForwardVars> {
        let wt = ctx.p(self.arch.fuse_text);
        let wi = ctx.p(self.arch.fuse_image);
        let wq = ctx.p(self.arch.fuse_question);
        let zt = ctx.tape.matmul(t_vec, wt)?;
        let zi = ctx.tape.matmul(i_vec, wi)?;
        let zq = ctx.tape.matmul(q_vec, wq)?;
        let z = ctx.tape.add(zt, zi)?;
        let z = ctx.tape.add(z, zq)?;
        let gamma = ctx.p(self.arch.fuse_gamma);
        let beta = ctx.p(self.arch.fuse_beta);
        let z = ctx.tape.layer_norm(z, gamma, beta, T::cast(self.config.layer_norm_eps))?;
        let wa = ctx.p(self.arch.answer_w);
        let ba = ctx.p(self.arch.answer_b);
        let logits = ctx.tape.matmul(z, wa)?;
        let logits = ctx.tape.add_bias(logits, ba)?;
        let probs = ctx.tape.softmax_lastdim(logits, None)?;
        Ok(ForwardVars { logits, probs })
    }

    /// Evaluation-mode answer distribution as f64.
    pub fn eval_probs(&self, input: &ExampleInput<T>) -> Result<Vec<f64>> {
        let mut ctx = Ctx::eval(&self.params);
        let fwd = self.forward(&mut ctx, input)?;
        Ok(ctx.tape.data(fwd.probs).iter().map(|v| v.as_f64()).collect())
    }
}

/// Index of the largest probability, ties toward the lower class id.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}
