//! Key-entity extraction and cross-media reasoning.
//!
//! A KECMR module runs one key-entity-extract (KEE) pass that scores and
//! selects the question-relevant text/image positions, then several
//! cross-media-reason (CMR) passes that gather the selected rows, attend
//! them over all three streams, and scatter them back in place.

use rand_chacha::ChaCha8Rng;

use crate::attention::{FeedForward, MultiHeadAttention, SublayerNorm};
use crate::error::{Error, Result};
use crate::params::{xavier_uniform, Ctx, ParamId, ParamSet};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// The three feature streams with their padding masks (`true` = valid).
#[derive(Clone, Debug)]
pub struct StreamBundle {
    pub text: Var,
    pub image: Var,
    pub question: Var,
    pub text_mask: Vec<bool>,
    pub image_mask: Vec<bool>,
    pub question_mask: Vec<bool>,
}

impl StreamBundle {
    /// Bundle with all positions valid.
    pub fn unmasked<T: Real>(tape: &Tape<T>, text: Var, image: Var, question: Var) -> Self {
        StreamBundle {
            text_mask: vec![true; tape.shape(text)[0]],
            image_mask: vec![true; tape.shape(image)[0]],
            question_mask: vec![true; tape.shape(question)[0]],
            text,
            image,
            question,
        }
    }

    fn check<T: Real>(&self, tape: &Tape<T>) -> Result<()> {
        for (name, var, mask) in [
            ("text", self.text, &self.text_mask),
            ("image", self.image, &self.image_mask),
            ("question", self.question, &self.question_mask),
        ] {
            let sh = tape.shape(var);
            if sh.len() != 2 {
                return Err(Error::dim("stream_bundle", format!("{name} stream must be rank 2, got {sh:?}")));
            }
            if sh[0] != mask.len() {
                return Err(Error::dim(
                    "stream_bundle",
                    format!("{name} mask length {} vs {} rows", mask.len(), sh[0]),
                ));
            }
        }
        Ok(())
    }
}

/// Selected positions per stream; the question range is always complete.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyEntityIndex {
    pub text: Vec<usize>,
    pub image: Vec<usize>,
    pub question: Vec<usize>,
}

impl KeyEntityIndex {
    pub fn total(&self) -> usize {
        self.text.len() + self.image.len() + self.question.len()
    }

    fn validate<T: Real>(&self, tape: &Tape<T>, b: &StreamBundle) -> Result<()> {
        for (name, idx, var) in [
            ("text", &self.text, b.text),
            ("image", &self.image, b.image),
            ("question", &self.question, b.question),
        ] {
            let n = tape.shape(var)[0];
            let mut seen = vec![false; n];
            for &i in idx {
                if i >= n {
                    return Err(Error::contract(format!(
                        "key entity index {i} out of range 0..{n} for {name} stream"
                    )));
                }
                if seen[i] {
                    return Err(Error::contract(format!("duplicate key entity index {i} in {name} stream")));
                }
                seen[i] = true;
            }
        }
        Ok(())
    }
}

/// Indices of the `k` largest unmasked scores, ascending. Ties break toward
/// the lower index; `k` saturates at the unmasked count.
pub fn top_k_select<T: Real>(scores: &[T], mask: Option<&[bool]>, k: usize) -> Vec<usize> {
    use std::collections::BinaryHeap;

    // Min-heap of the k best so far: the Reverse-like ordering is encoded by
    // flipping comparisons, with the index as anti-tiebreaker so that a kept
    // high index is evicted before a kept low index of equal score.
    #[derive(PartialEq)]
    struct Entry {
        score: f64,
        index: usize,
    }
    impl Eq for Entry {}
    impl Ord for Entry {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            // BinaryHeap pops the max; we want the weakest entry on top.
            other
                .score
                .partial_cmp(&self.score)
                .expect("finite scores")
                .then(self.index.cmp(&other.index))
        }
    }
    impl PartialOrd for Entry {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }

    let mut heap: BinaryHeap<Entry> = BinaryHeap::new();
    for (i, &s) in scores.iter().enumerate() {
        if let Some(m) = mask {
            if !m[i] {
                continue;
            }
        }
        let e = Entry { score: s.as_f64(), index: i };
        if heap.len() < k {
            heap.push(e);
        } else if let Some(top) = heap.peek() {
            let better = e.score > top.score || (e.score == top.score && e.index < top.index);
            if better {
                heap.pop();
                heap.push(e);
            }
        }
    }
    let mut out: Vec<usize> = heap.into_iter().map(|e| e.index).collect();
    out.sort_unstable();
    out
}

/// Gap between the weakest kept score and the strongest dropped one;
/// `None` when the selection saturates (nothing was dropped).
fn selection_margin<T: Real>(scores: &[T], mask: &[bool], chosen: &[usize]) -> Option<f64> {
    let kept_min = chosen
        .iter()
        .map(|&i| scores[i].as_f64())
        .fold(f64::INFINITY, f64::min);
    let dropped_max = scores
        .iter()
        .enumerate()
        .filter(|(i, _)| mask[*i] && !chosen.contains(i))
        .map(|(_, &s)| s.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    if dropped_max == f64::NEG_INFINITY {
        None
    } else {
        Some(kept_min - dropped_max)
    }
}

/// Key Entity Extract layer parameters: question self-attention, question-
/// guided text/image stacks, and the two affine scoring heads.
#[derive(Clone, Debug)]
pub struct KeeParams {
    pub q_self: MultiHeadAttention,
    pub q_self_norm: SublayerNorm,
    pub q_ffn: FeedForward,
    pub q_ffn_norm: SublayerNorm,
    pub t_self: MultiHeadAttention,
    pub t_self_norm: SublayerNorm,
    pub t_guided: MultiHeadAttention,
    pub t_guided_norm: SublayerNorm,
    pub t_ffn: FeedForward,
    pub t_ffn_norm: SublayerNorm,
    pub i_self: MultiHeadAttention,
    pub i_self_norm: SublayerNorm,
    pub i_guided: MultiHeadAttention,
    pub i_guided_norm: SublayerNorm,
    pub i_ffn: FeedForward,
    pub i_ffn_norm: SublayerNorm,
    pub score_t_w: ParamId,
    pub score_t_b: ParamId,
    pub score_i_w: ParamId,
    pub score_i_b: ParamId,
}

impl KeeParams {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        ln_eps: f64,
    ) -> Result<Self> {
        Ok(KeeParams {
            q_self: MultiHeadAttention::init(ps, rng, &format!("{prefix}.q_self"), d, heads)?,
            q_self_norm: SublayerNorm::init(ps, &format!("{prefix}.q_self"), d, ln_eps),
            q_ffn: FeedForward::init(ps, rng, &format!("{prefix}.q_ffn"), d, d_ff)?,
            q_ffn_norm: SublayerNorm::init(ps, &format!("{prefix}.q_ffn"), d, ln_eps),
            t_self: MultiHeadAttention::init(ps, rng, &format!("{prefix}.t_self"), d, heads)?,
            t_self_norm: SublayerNorm::init(ps, &format!("{prefix}.t_self"), d, ln_eps),
            t_guided: MultiHeadAttention::init(ps, rng, &format!("{prefix}.t_guided"), d, heads)?,
            t_guided_norm: SublayerNorm::init(ps, &format!("{prefix}.t_guided"), d, ln_eps),
            t_ffn: FeedForward::init(ps, rng, &format!("{prefix}.t_ffn"), d, d_ff)?,
            t_ffn_norm: SublayerNorm::init(ps, &format!("{prefix}.t_ffn"), d, ln_eps),
            i_self: MultiHeadAttention::init(ps, rng, &format!("{prefix}.i_self"), d, heads)?,
            i_self_norm: SublayerNorm::init(ps, &format!("{prefix}.i_self"), d, ln_eps),
            i_guided: MultiHeadAttention::init(ps, rng, &format!("{prefix}.i_guided"), d, heads)?,
            i_guided_norm: SublayerNorm::init(ps, &format!("{prefix}.i_guided"), d, ln_eps),
            i_ffn: FeedForward::init(ps, rng, &format!("{prefix}.i_ffn"), d, d_ff)?,
            i_ffn_norm: SublayerNorm::init(ps, &format!("{prefix}.i_ffn"), d, ln_eps),
            score_t_w: ps.add(format!("{prefix}.score_t_w"), xavier_uniform(rng, d, 1)),
            score_t_b: ps.add(format!("{prefix}.score_t_b"), Tensor::zeros(vec![1])),
            score_i_w: ps.add(format!("{prefix}.score_i_w"), xavier_uniform(rng, d, 1)),
            score_i_b: ps.add(format!("{prefix}.score_i_b"), Tensor::zeros(vec![1])),
        })
    }
}

/// KEE result: updated streams, per-position scores, and the selection.
#[derive(Clone, Debug)]
pub struct KeeOutput {
    pub bundle: StreamBundle,
    pub scores_text: Var,
    pub scores_image: Var,
    pub index: KeyEntityIndex,
}

/// One Key Entity Extract pass.
///
/// Updates the question by self-attention + FFN, updates text/image by
/// self-attention, question-guided attention, + FFN, scores the updated
/// text/image rows with affine heads, and selects the top-k unmasked
/// positions per stream. Every question position is selected.
pub fn kee_forward<T: Real>(
    p: &KeeParams,
    ctx: &mut Ctx<'_, T>,
    b: &StreamBundle,
    k: usize,
) -> Result<KeeOutput> {
    if k == 0 {
        return Err(Error::contract("kee_forward: k must be >= 1"));
    }
    b.check(&ctx.tape)?;

    // Q = FFN(MH(Q, Q, Q))
    let q = b.question;
    let q_att = p.q_self.forward(ctx, q, q, q, Some(&b.question_mask))?;
    let q = p.q_self_norm.apply(ctx, q, q_att)?;
    let q_ff = p.q_ffn.forward(ctx, q)?;
    let q = p.q_ffn_norm.apply(ctx, q, q_ff)?;

    // T = FFN(MH(MH(T, T, T), Q, Q))
    let t = b.text;
    let t_att = p.t_self.forward(ctx, t, t, t, Some(&b.text_mask))?;
    let t = p.t_self_norm.apply(ctx, t, t_att)?;
    let t_g = p.t_guided.forward(ctx, t, q, q, Some(&b.question_mask))?;
    let t = p.t_guided_norm.apply(ctx, t, t_g)?;
    let t_ff = p.t_ffn.forward(ctx, t)?;
    let t = p.t_ffn_norm.apply(ctx, t, t_ff)?;

    // I = FFN(MH(MH(I, I, I), Q, Q))
    let i = b.image;
    let i_att = p.i_self.forward(ctx, i, i, i, Some(&b.image_mask))?;
    let i = p.i_self_norm.apply(ctx, i, i_att)?;
    let i_g = p.i_guided.forward(ctx, i, q, q, Some(&b.question_mask))?;
    let i = p.i_guided_norm.apply(ctx, i, i_g)?;
    let i_ff = p.i_ffn.forward(ctx, i)?;
    let i = p.i_ffn_norm.apply(ctx, i, i_ff)?;

    // score = W x + b on the question-aware features.
    let stw = ctx.p(p.score_t_w);
    let stb = ctx.p(p.score_t_b);
    let scores_t = ctx.tape.matmul(t, stw)?;
    let scores_t = ctx.tape.add_bias(scores_t, stb)?;
    let siw = ctx.p(p.score_i_w);
    let sib = ctx.p(p.score_i_b);
    let scores_i = ctx.tape.matmul(i, siw)?;
    let scores_i = ctx.tape.add_bias(scores_i, sib)?;

    // Selection is hard: gradients flow through the gathered values only.
    let index = KeyEntityIndex {
        text: top_k_select(ctx.tape.data(scores_t), Some(&b.text_mask), k),
        image: top_k_select(ctx.tape.data(scores_i), Some(&b.image_mask), k),
        question: (0..b.question_mask.len()).collect(),
    };
    for (scores, mask, chosen) in [
        (ctx.tape.data(scores_t), &b.text_mask, &index.text),
        (ctx.tape.data(scores_i), &b.image_mask, &index.image),
    ] {
        if let Some(margin) = selection_margin(scores, mask, chosen) {
            ctx.min_selection_margin = ctx.min_selection_margin.min(margin);
        }
    }

    Ok(KeeOutput {
        bundle: StreamBundle {
            text: t,
            image: i,
            question: q,
            text_mask: b.text_mask.clone(),
            image_mask: b.image_mask.clone(),
            question_mask: b.question_mask.clone(),
        },
        scores_text: scores_t,
        scores_image: scores_i,
        index,
    })
}

/// Rows of the selected positions, stacked in fixed stream order T, I, Q.
pub fn gather<T: Real>(tape: &mut Tape<T>, b: &StreamBundle, idx: &KeyEntityIndex) -> Result<Var> {
    b.check(tape)?;
    idx.validate(tape, b)?;
    let t = tape.gather_rows(b.text, &idx.text)?;
    let i = tape.gather_rows(b.image, &idx.image)?;
    let q = tape.gather_rows(b.question, &idx.question)?;
    tape.concat_rows(&[t, i, q])
}

/// Write the rows of `s` back to the positions named by `idx`; rows not
/// selected are copied bit-for-bit.
pub fn scatter<T: Real>(
    tape: &mut Tape<T>,
    s: Var,
    b: &StreamBundle,
    idx: &KeyEntityIndex,
) -> Result<StreamBundle> {
    b.check(tape)?;
    idx.validate(tape, b)?;
    let (n_t, n_i, n_q) = (idx.text.len(), idx.image.len(), idx.question.len());
    if tape.shape(s)[0] != n_t + n_i + n_q {
        return Err(Error::dim(
            "scatter",
            format!("{} rows vs index total {}", tape.shape(s)[0], n_t + n_i + n_q),
        ));
    }
    let mut text = b.text;
    if n_t > 0 {
        let rows: Vec<usize> = (0..n_t).collect();
        let src = tape.gather_rows(s, &rows)?;
        text = tape.scatter_rows(b.text, src, &idx.text)?;
    }
    let mut image = b.image;
    if n_i > 0 {
        let rows: Vec<usize> = (n_t..n_t + n_i).collect();
        let src = tape.gather_rows(s, &rows)?;
        image = tape.scatter_rows(b.image, src, &idx.image)?;
    }
    let mut question = b.question;
    if n_q > 0 {
        let rows: Vec<usize> = (n_t + n_i..n_t + n_i + n_q).collect();
        let src = tape.gather_rows(s, &rows)?;
        question = tape.scatter_rows(b.question, src, &idx.question)?;
    }
    Ok(StreamBundle {
        text,
        image,
        question,
        text_mask: b.text_mask.clone(),
        image_mask: b.image_mask.clone(),
        question_mask: b.question_mask.clone(),
    })
}

/// Cross-Media Reason layer parameters.
#[derive(Clone, Debug)]
pub struct CmrParams {
    pub self_attn: MultiHeadAttention,
    pub self_norm: SublayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub cross_norm: SublayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: SublayerNorm,
}

impl CmrParams {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        ln_eps: f64,
    ) -> Result<Self> {
        Ok(CmrParams {
            self_attn: MultiHeadAttention::init(ps, rng, &format!("{prefix}.self"), d, heads)?,
            self_norm: SublayerNorm::init(ps, &format!("{prefix}.self"), d, ln_eps),
            cross_attn: MultiHeadAttention::init(ps, rng, &format!("{prefix}.cross"), d, heads)?,
            cross_norm: SublayerNorm::init(ps, &format!("{prefix}.cross"), d, ln_eps),
            ffn: FeedForward::init(ps, rng, &format!("{prefix}.ffn"), d, d_ff)?,
            ffn_norm: SublayerNorm::init(ps, &format!("{prefix}.ffn"), d, ln_eps),
        })
    }
}

/// One Cross-Media Reason pass.
///
/// S = FFN(MH(MH(S, S, S), [T, I, Q], [T, I, Q])) where the cross-attention
/// keys/values are this layer's input features; the updated S is scattered
/// back, leaving non-selected rows untouched.
pub fn cmr_forward<T: Real>(
    p: &CmrParams,
    ctx: &mut Ctx<'_, T>,
    b: &StreamBundle,
    idx: &KeyEntityIndex,
) -> Result<StreamBundle> {
    let s = gather(&mut ctx.tape, b, idx)?;

    // Mask for S rows: selected text/image rows plus the question mask at
    // its selected positions.
    let mut s_mask: Vec<bool> = Vec::with_capacity(idx.total());
    s_mask.extend(idx.text.iter().map(|&i| b.text_mask[i]));
    s_mask.extend(idx.image.iter().map(|&i| b.image_mask[i]));
    s_mask.extend(idx.question.iter().map(|&i| b.question_mask[i]));

    let full = ctx.tape.concat_rows(&[b.text, b.image, b.question])?;
    let mut full_mask: Vec<bool> = Vec::with_capacity(
        b.text_mask.len() + b.image_mask.len() + b.question_mask.len(),
    );
    full_mask.extend_from_slice(&b.text_mask);
    full_mask.extend_from_slice(&b.image_mask);
    full_mask.extend_from_slice(&b.question_mask);

    let s_att = p.self_attn.forward(ctx, s, s, s, Some(&s_mask))?;
    let s1 = p.self_norm.apply(ctx, s, s_att)?;
    let s_cross = p.cross_attn.forward(ctx, s1, full, full, Some(&full_mask))?;
    let s2 = p.cross_norm.apply(ctx, s1, s_cross)?;
    let s_ff = p.ffn.forward(ctx, s2)?;
    let s3 = p.ffn_norm.apply(ctx, s2, s_ff)?;

    scatter(&mut ctx.tape, s3, b, idx)
}

/// One KEE layer followed by `cmr` CMR layers sharing its selection.
#[derive(Clone, Debug)]
pub struct KecmrModuleParams {
    pub kee: KeeParams,
    pub cmrs: Vec<CmrParams>,
}

impl KecmrModuleParams {
    pub fn init<T: Real>(
        ps: &mut ParamSet<T>,
        rng: &mut ChaCha8Rng,
        prefix: &str,
        d: usize,
        heads: usize,
        d_ff: usize,
        ln_eps: f64,
        cmr_layers: usize,
    ) -> Result<Self> {
        if cmr_layers == 0 {
            return Err(Error::contract("kecmr module: need at least one CMR layer"));
        }
        let kee = KeeParams::init(ps, rng, &format!("{prefix}.kee"), d, heads, d_ff, ln_eps)?;
        let cmrs = (0..cmr_layers)
            .map(|i| CmrParams::init(ps, rng, &format!("{prefix}.cmr{i}"), d, heads, d_ff, ln_eps))
            .collect::<Result<Vec<_>>>()?;
        Ok(KecmrModuleParams { kee, cmrs })
    }
}

/// Full module: KEE once, then every CMR layer with the same index.
pub fn kecmr_module<T: Real>(
    p: &KecmrModuleParams,
    ctx: &mut Ctx<'_, T>,
    b: &StreamBundle,
    k: usize,
) -> Result<(StreamBundle, KeyEntityIndex)> {
    let kee = kee_forward(&p.kee, ctx, b, k)?;
    let mut bundle = kee.bundle;
    for cmr in &p.cmrs {
        bundle = cmr_forward(cmr, ctx, &bundle, &kee.index)?;
    }
    Ok((bundle, kee.index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;
    use rand::{Rng, SeedableRng};

    /// Exhaustive full-sort reference for top-k.
    fn sort_oracle(scores: &[f64], mask: Option<&[bool]>, k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..scores.len())
            .filter(|&i| mask.map_or(true, |m| m[i]))
            .collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }

    #[test]
    fn top_k_basic_and_tie_rule() {
        assert_eq!(top_k_select(&[0.9, 0.1, 0.5], None, 2), vec![0, 2]);
        assert_eq!(top_k_select(&[0.4, 0.4, 0.4], None, 2), vec![0, 1]);
        assert_eq!(top_k_select(&[1.0, 2.0], None, 5), vec![0, 1]);
        assert_eq!(
            top_k_select(&[1.0, 9.0, 9.0, 2.0], Some(&[true, false, true, true]), 2),
            vec![2, 3]
        );
    }

    #[test]
    fn top_k_matches_sort_oracle_on_random_vectors() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(100);
        for case in 0..200 {
            let n = rng.gen_range(1..12);
            // Coarse grid forces plenty of ties.
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 / 4.0).collect();
            let mask: Option<Vec<bool>> = if case % 3 == 0 {
                let mut m: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
                m[rng.gen_range(0..n)] = true;
                Some(m)
            } else {
                None
            };
            let k = rng.gen_range(1..=n + 2);
            let got = top_k_select(&scores, mask.as_deref(), k);
            let want = sort_oracle(&scores, mask.as_deref(), k);
            assert_eq!(got, want, "scores {scores:?} mask {mask:?} k {k}");
        }
    }

    #[test]
    fn top_k_shift_invariance() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..50 {
            let n = rng.gen_range(1..10);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let shifted: Vec<f64> = scores.iter().map(|s| s + 3.25).collect();
            let k = rng.gen_range(1..=n);
            assert_eq!(top_k_select(&scores, None, k), top_k_select(&shifted, None, k));
        }
    }

    fn random_bundle(
        ctx: &mut Ctx<'_, f64>,
        rng: &mut rand_chacha::ChaCha8Rng,
        d: usize,
        l_t: usize,
        l_i: usize,
        l_q: usize,
    ) -> StreamBundle {
        let mut mk = |rows: usize| {
            let data: Vec<f64> = (0..rows * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t = Tensor::new(vec![rows, d], data).unwrap();
            ctx.tape.leaf(&t)
        };
        let text = mk(l_t);
        let image = mk(l_i);
        let question = mk(l_q);
        StreamBundle::unmasked(&ctx.tape, text, image, question)
    }

    fn small_kee(seed: u64, d: usize, heads: usize) -> (ParamSet<f64>, KeeParams) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let kee = KeeParams::init(&mut ps, &mut rng, "kee", d, heads, 2 * d, 1e-6).unwrap();
        (ps, kee)
    }

    #[test]
    fn kee_saturates_when_k_exceeds_lengths() {
        let (ps, kee) = small_kee(1, 8, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let b = random_bundle(&mut ctx, &mut rng, 8, 3, 2, 2);
        let out = kee_forward(&kee, &mut ctx, &b, 99).unwrap();
        assert_eq!(out.index.text, vec![0, 1, 2]);
        assert_eq!(out.index.image, vec![0, 1]);
        assert_eq!(out.index.question, vec![0, 1]);
    }

    #[test]
    fn kee_single_position_streams_select_zero() {
        let (ps, kee) = small_kee(3, 8, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let b = random_bundle(&mut ctx, &mut rng, 8, 1, 1, 1);
        let out = kee_forward(&kee, &mut ctx, &b, 3).unwrap();
        assert_eq!(out.index.text, vec![0]);
        assert_eq!(out.index.image, vec![0]);
        assert_eq!(out.index.question, vec![0]);
    }

    #[test]
    fn kee_selection_equals_score_argsort_oracle() {
        let (ps, kee) = small_kee(5, 8, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let b = random_bundle(&mut ctx, &mut rng, 8, 5, 4, 2);
        let out = kee_forward(&kee, &mut ctx, &b, 2).unwrap();
        let scores_t = ctx.tape.data(out.scores_text).to_vec();
        let scores_i = ctx.tape.data(out.scores_image).to_vec();
        assert_eq!(out.index.text, sort_oracle(&scores_t, None, 2));
        assert_eq!(out.index.image, sort_oracle(&scores_i, None, 2));
    }

    #[test]
    fn gather_full_selection_is_stream_concat() {
        let (ps, _) = small_kee(1, 4, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let b = random_bundle(&mut ctx, &mut rng, 4, 2, 2, 1);
        let idx = KeyEntityIndex { text: vec![0, 1], image: vec![0, 1], question: vec![0] };
        let s = gather(&mut ctx.tape, &b, &idx).unwrap();
        let full = ctx.tape.concat_rows(&[b.text, b.image, b.question]).unwrap();
        assert_eq!(ctx.tape.data(s), ctx.tape.data(full));
    }

    #[test]
    fn gather_copies_rows_bitwise_and_round_trips() {
        let (ps, _) = small_kee(1, 4, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let b = random_bundle(&mut ctx, &mut rng, 4, 3, 2, 2);
        let idx = KeyEntityIndex { text: vec![1], image: vec![0, 1], question: vec![0, 1] };
        let s = gather(&mut ctx.tape, &b, &idx).unwrap();
        // Row 0 of S is text row 1, bit for bit.
        let t_row1 = ctx.tape.data(b.text)[4..8].to_vec();
        assert_eq!(&ctx.tape.data(s)[0..4], &t_row1[..]);
        let back = scatter(&mut ctx.tape, s, &b, &idx).unwrap();
        assert_eq!(ctx.tape.data(back.text), ctx.tape.data(b.text));
        assert_eq!(ctx.tape.data(back.image), ctx.tape.data(b.image));
        assert_eq!(ctx.tape.data(back.question), ctx.tape.data(b.question));
    }

    #[test]
    fn gather_rejects_out_of_range_index() {
        let (ps, _) = small_kee(1, 4, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let b = random_bundle(&mut ctx, &mut rng, 4, 2, 2, 1);
        let idx = KeyEntityIndex { text: vec![5], image: vec![], question: vec![0] };
        assert!(matches!(gather(&mut ctx.tape, &b, &idx), Err(Error::Contract(_))));
    }

    fn small_cmr(seed: u64, d: usize, heads: usize) -> (ParamSet<f64>, CmrParams) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let cmr = CmrParams::init(&mut ps, &mut rng, "cmr", d, heads, 2 * d, 1e-6).unwrap();
        (ps, cmr)
    }

    #[test]
    fn cmr_scatter_locality_leaves_unselected_rows_bitwise() {
        let (ps, cmr) = small_cmr(11, 8, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let b = random_bundle(&mut ctx, &mut rng, 8, 4, 3, 2);
        let idx = KeyEntityIndex { text: vec![0, 2], image: vec![1], question: vec![0, 1] };
        let out = cmr_forward(&cmr, &mut ctx, &b, &idx).unwrap();
        let before_t = ctx.tape.data(b.text).to_vec();
        let after_t = ctx.tape.data(out.text).to_vec();
        for row in [1usize, 3] {
            assert_eq!(&after_t[row * 8..(row + 1) * 8], &before_t[row * 8..(row + 1) * 8]);
        }
        let before_i = ctx.tape.data(b.image).to_vec();
        let after_i = ctx.tape.data(out.image).to_vec();
        for row in [0usize, 2] {
            assert_eq!(&after_i[row * 8..(row + 1) * 8], &before_i[row * 8..(row + 1) * 8]);
        }
    }

    #[test]
    fn cmr_full_selection_updates_every_row() {
        let (ps, cmr) = small_cmr(13, 8, 2);
        let mut ctx = Ctx::eval(&ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let b = random_bundle(&mut ctx, &mut rng, 8, 2, 2, 2);
        let idx = KeyEntityIndex { text: vec![0, 1], image: vec![0, 1], question: vec![0, 1] };
        let out = cmr_forward(&cmr, &mut ctx, &b, &idx).unwrap();
        // Degenerate full selection: equals the attention block applied to
        // the whole concatenation, re-split into streams.
        let full = ctx.tape.concat_rows(&[b.text, b.image, b.question]).unwrap();
        let s_att = cmr.self_attn.forward(&mut ctx, full, full, full, None).unwrap();
        let s1 = cmr.self_norm.apply(&mut ctx, full, s_att).unwrap();
        let s_cross = cmr.cross_attn.forward(&mut ctx, s1, full, full, None).unwrap();
        let s2 = cmr.cross_norm.apply(&mut ctx, s1, s_cross).unwrap();
        let s_ff = cmr.ffn.forward(&mut ctx, s2).unwrap();
        let s3 = cmr.ffn_norm.apply(&mut ctx, s2, s_ff).unwrap();
        let expect = ctx.tape.data(s3).to_vec();
        let got: Vec<f64> = [out.text, out.image, out.question]
            .iter()
            .flat_map(|&v| ctx.tape.data(v).to_vec())
            .collect();
        for (g, e) in got.iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn cmr_gradcheck_small_instance() {
        let (ps, cmr) = small_cmr(15, 8, 2);
        let mut data_rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let t_data: Vec<f64> = (0..4 * 8).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
        let i_data: Vec<f64> = (0..3 * 8).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
        let q_data: Vec<f64> = (0..2 * 8).map(|_| data_rng.gen_range(-1.0..1.0)).collect();
        let idx = KeyEntityIndex { text: vec![0, 2], image: vec![1, 2], question: vec![0, 1] };
        let report = finite_diff_check(
            &ps,
            |ctx| {
                let text = ctx.tape.constant(vec![4, 8], t_data.clone())?;
                let image = ctx.tape.constant(vec![3, 8], i_data.clone())?;
                let question = ctx.tape.constant(vec![2, 8], q_data.clone())?;
                let b = StreamBundle::unmasked(&ctx.tape, text, image, question);
                let out = cmr_forward(&cmr, ctx, &b, &idx)?;
                let all = ctx.tape.concat_rows(&[out.text, out.image, out.question])?;
                crate::gradcheck::probe_loss(&mut ctx.tape, all)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn module_preserves_shapes_and_reuses_index() {
        for seed in 0..50 {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut ps: ParamSet<f64> = ParamSet::new();
            let module =
                KecmrModuleParams::init(&mut ps, &mut rng, "m0", 8, 2, 16, 1e-6, 2).unwrap();
            let mut ctx = Ctx::eval(&ps);
            let l_t = rng.gen_range(1..6);
            let l_i = rng.gen_range(1..5);
            let l_q = rng.gen_range(1..4);
            let b = random_bundle(&mut ctx, &mut rng, 8, l_t, l_i, l_q);
            let (out, idx) = kecmr_module(&module, &mut ctx, &b, 2).unwrap();
            assert_eq!(ctx.tape.shape(out.text), &[l_t, 8]);
            assert_eq!(ctx.tape.shape(out.image), &[l_i, 8]);
            assert_eq!(ctx.tape.shape(out.question), &[l_q, 8]);
            assert_eq!(idx.question, (0..l_q).collect::<Vec<_>>());
            assert_eq!(idx.text.len(), 2.min(l_t));
            assert_eq!(idx.image.len(), 2.min(l_i));
        }
    }
}
