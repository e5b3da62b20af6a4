//! Property tests for the algebraic invariants: softmax row norms and
//! shift invariance, matmul associativity, layer-norm moments, top-k vs a
//! full-sort oracle, and scorer symmetries.

use proptest::collection::vec;
use proptest::prelude::*;
use vtqa_core::data::Example;
use vtqa_core::kecmr::top_k_select;
use vtqa_core::metrics::{
    normalize_answer, score_predictions, token_f1, AnswerType, PredictionSet, YnDictionary,
};
use vtqa_core::{Ctx, ParamSet, Tape, Tensor};

fn finite_val() -> impl Strategy<Value = f64> {
    -50.0..50.0f64
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(
        rows in 1usize..4,
        cols in 1usize..6,
        data in vec(-30.0..30.0f64, 24),
    ) {
        let needed = rows * cols;
        prop_assume!(data.len() >= needed);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![rows, cols], data[..needed].to_vec()).unwrap();
        let y = tape.softmax_lastdim(x, None).unwrap();
        let yd = tape.data(y);
        for r in 0..rows {
            let sum: f64 = yd[r * cols..(r + 1) * cols].iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(
        cols in 1usize..6,
        data in vec(-30.0..30.0f64, 6),
        shift in -20.0..20.0f64,
    ) {
        prop_assume!(data.len() >= cols);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![1, cols], data[..cols].to_vec()).unwrap();
        let y1 = tape.softmax_lastdim(x, None).unwrap();
        let shifted: Vec<f64> = data[..cols].iter().map(|v| v + shift).collect();
        let xs = tape.constant(vec![1, cols], shifted).unwrap();
        let y2 = tape.softmax_lastdim(xs, None).unwrap();
        for (a, b) in tape.data(y1).iter().zip(tape.data(y2)) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn matmul_is_associative(
        m in 1usize..4,
        k in 1usize..4,
        n in 1usize..4,
        p in 1usize..4,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut make = |r: usize, c: usize| -> Vec<f64> {
            (0..r * c).map(|_| rng.gen_range(-2.0..2.0)).collect()
        };
        let mut tape: Tape<f64> = Tape::new();
        let a = tape.constant(vec![m, k], make(m, k)).unwrap();
        let b = tape.constant(vec![k, n], make(k, n)).unwrap();
        let c = tape.constant(vec![n, p], make(n, p)).unwrap();
        let ab = tape.matmul(a, b).unwrap();
        let ab_c = tape.matmul(ab, c).unwrap();
        let bc = tape.matmul(b, c).unwrap();
        let a_bc = tape.matmul(a, bc).unwrap();
        for (x, y) in tape.data(ab_c).iter().zip(tape.data(a_bc)) {
            prop_assert!((x - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(
        rows in 1usize..4,
        cols in 2usize..8,
        data in vec(finite_val(), 32),
    ) {
        let needed = rows * cols;
        prop_assume!(data.len() >= needed);
        let mut tape: Tape<f64> = Tape::new();
        let x = tape.constant(vec![rows, cols], data[..needed].to_vec()).unwrap();
        let gamma = tape.constant(vec![cols], vec![1.0; cols]).unwrap();
        let beta = tape.constant(vec![cols], vec![0.0; cols]).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-6).unwrap();
        let yd = tape.data(y);
        for r in 0..rows {
            let row = &yd[r * cols..(r + 1) * cols];
            let mean: f64 = row.iter().sum::<f64>() / cols as f64;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            prop_assert!(mean.abs() <= 1e-6);
            // Variance sits within the eps band of 1 (slightly below when
            // the input row variance is small).
            prop_assert!(var <= 1.0 + 1e-6);
            let input = &data[r * cols..(r + 1) * cols];
            let imean: f64 = input.iter().sum::<f64>() / cols as f64;
            let ivar: f64 =
                input.iter().map(|v| (v - imean) * (v - imean)).sum::<f64>() / cols as f64;
            if ivar > 1e-3 {
                prop_assert!((var - 1.0).abs() <= 1e-3);
            }
        }
    }

    #[test]
    fn top_k_matches_exhaustive_sort(
        scores in vec(0usize..6, 1..12),
        k in 1usize..14,
        mask_bits in vec(any::<bool>(), 12),
    ) {
        // Coarse score grid forces ties.
        let scores: Vec<f64> = scores.iter().map(|&s| s as f64 / 5.0).collect();
        let mut mask: Vec<bool> = mask_bits[..scores.len()].to_vec();
        if !mask.iter().any(|&b| b) {
            mask[0] = true;
        }
        let got = top_k_select(&scores, Some(&mask), k);
        let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| mask[i]).collect();
        idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx.sort_unstable();
        prop_assert_eq!(got, idx);
    }

    #[test]
    fn token_f1_symmetric_and_bounded(a in ".{0,24}", b in ".{0,24}") {
        let ab = token_f1(&a, &b);
        let ba = token_f1(&b, &a);
        prop_assert!((ab - ba).abs() <= 1e-12);
        prop_assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn exact_match_implies_perfect_f1(s in ".{0,24}") {
        // Identical strings: EM holds, so F1 must be 1 (or both empty).
        prop_assert_eq!(token_f1(&s, &s), 1.0);
    }

    #[test]
    fn normalization_ignores_case_and_surrounding_space(s in "[a-zA-Z 0-9]{0,20}") {
        let padded = format!("  {}  ", s.to_uppercase());
        prop_assert_eq!(normalize_answer(&s), normalize_answer(&padded));
    }
}

#[test]
fn score_is_permutation_invariant_in_example_order() {
    let dict = YnDictionary::seed();
    let mk = |qid: &str, answer: &str, ty: AnswerType| Example {
        qid: qid.to_string(),
        image_local_path: "i.png".to_string(),
        text: "t".to_string(),
        question: "q".to_string(),
        answer: answer.to_string(),
        answer_type: ty,
        yes_or_no: (ty == AnswerType::Yn).then_some(vtqa_core::metrics::YesNo::Yes),
    };
    let gold = vec![
        mk("a", "yes", AnswerType::Yn),
        mk("b", "red scarf", AnswerType::E),
        mk("c", "lantern", AnswerType::G),
        mk("d", "blue", AnswerType::E),
    ];
    let mut preds = PredictionSet::new();
    preds.insert("a", "可以").unwrap();
    preds.insert("b", "red").unwrap();
    preds.insert("c", "lantern").unwrap();
    preds.insert("d", "green").unwrap();

    let forward = score_predictions(&preds, &gold, &dict).unwrap();
    let mut reversed_gold = gold.clone();
    reversed_gold.reverse();
    let reversed = score_predictions(&preds, &reversed_gold, &dict).unwrap();
    assert_eq!(forward, reversed);
}

#[test]
fn ffn_gradcheck_property_over_random_seeds() {
    // Spot property: gradients of a composite net over 100 random seeds.
    use vtqa_core::attention::FeedForward;
    use vtqa_core::gradcheck::{finite_diff_check, probe_loss};
    use rand::{Rng, SeedableRng};
    for seed in 0..100u64 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = rng.gen_range(2..6);
        let mut ps: ParamSet<f64> = ParamSet::new();
        let ffn = FeedForward::init(&mut ps, &mut rng, "ffn", d, 2 * d).unwrap();
        let x: Vec<f64> = (0..2 * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let report = finite_diff_check(
            &ps,
            |ctx: &mut Ctx<f64>| {
                let xv = ctx.tape.constant(vec![2, d], x.clone())?;
                let y = ffn.forward(ctx, xv)?;
                probe_loss(&mut ctx.tape, y)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "seed {seed}: {}", report.max_rel_err);
    }
}

#[test]
fn tensor_rejects_non_finite_everywhere() {
    assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
    let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
    let mut tape: Tape<f64> = Tape::new();
    let _ = tape.leaf(&t);
}
