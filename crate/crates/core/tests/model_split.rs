mod support;

use databright::model_split::data::Dataset;
use databright::model_split::{
    init_model, monolithic, reassemble, segments_digest, split_model, train_epoch_split,
    Activation, Loss, ModelSpec,
};
use proptest::prelude::*;
use support::fd::{max_relative_error, numeric_gradients, split_gradients};

fn spec(dims: &[usize], seed: u64, loss: Loss) -> ModelSpec {
    ModelSpec {
        layer_dims: dims.to_vec(),
        activation: Activation::Tanh,
        loss,
        init_seed: seed,
        learning_rate: 0.05,
    }
}

#[test]
fn gradients_match_finite_differences_on_small_net() {
    for seed in 0..10u64 {
        for loss in [Loss::Mse, Loss::SoftmaxCrossEntropy] {
            let params = init_model(&spec(&[4, 3, 2], seed, loss)).unwrap();
            let data = Dataset::synthetic(seed + 100, 5, 4, 2, loss);
            let numeric = numeric_gradients(&params, &data.inputs, &data.targets, loss, 1e-6);
            for cuts in [vec![], vec![1]] {
                let analytic = split_gradients(&params, &cuts, &data.inputs, &data.targets, loss);
                assert_eq!(analytic.len(), 4 * 3 + 3 + 3 * 2 + 2);
                let err = max_relative_error(&analytic, &numeric);
                assert!(
                    err < 1e-5,
                    "seed {seed} {loss:?} cuts {cuts:?}: rel err {err:e}"
                );
            }
        }
    }
}

#[test]
fn split_gradients_are_bit_identical_to_monolithic() {
    let params = init_model(&spec(&[8, 16, 16, 4], 7, Loss::Mse)).unwrap();
    let data = Dataset::synthetic(1, 16, 8, 4, Loss::Mse);
    let (_, mono) = monolithic::gradients(&params, &data.inputs, &data.targets, Loss::Mse).unwrap();
    let mono: Vec<f64> = mono
        .into_iter()
        .flat_map(|(w, b)| w.into_iter().chain(b))
        .collect();
    for cuts in [vec![], vec![1], vec![2], vec![1, 2]] {
        let split = split_gradients(&params, &cuts, &data.inputs, &data.targets, Loss::Mse);
        let same = split
            .iter()
            .zip(&mono)
            .all(|(a, b)| a.to_bits() == b.to_bits());
        assert!(same, "cuts {cuts:?}");
    }
}

#[test]
fn loss_decreases_over_three_epochs() {
    let loss = Loss::SoftmaxCrossEntropy;
    let mut s = spec(&[8, 16, 16, 4], 3, loss);
    s.learning_rate = 0.1;
    let mut params = init_model(&s).unwrap();
    let data = Dataset::synthetic(9, 64, 8, 4, loss);
    let batches = data.batches(8);
    let mut last = f64::INFINITY;
    for epoch in 0..3 {
        let (mean, _) = monolithic::train_epoch(
            &mut params,
            batches.iter().map(|(x, t)| (x, t)),
            loss,
            s.learning_rate,
        )
        .unwrap();
        assert!(mean <= last + 1e-9, "epoch {epoch}: {mean} > {last}");
        assert!(params.is_finite());
        last = mean;
    }
}

fn train_both(seed: u64, cuts: &[usize], loss: Loss) -> ([u8; 32], [u8; 32]) {
    let s = spec(&[8, 16, 16, 4], seed, loss);
    let data = Dataset::synthetic(seed ^ 0xabc, 64, 8, 4, loss);
    let batches = data.batches(16);
    let mut mono = init_model(&s).unwrap();
    let mut segs = split_model(&mono, cuts).unwrap();
    let (mut d_mono, mut d_split) = ([0; 32], [0; 32]);
    for _ in 0..3 {
        d_mono = monolithic::train_epoch(
            &mut mono,
            batches.iter().map(|(x, t)| (x, t)),
            loss,
            s.learning_rate,
        )
        .unwrap()
        .1;
        d_split = train_epoch_split(
            &mut segs,
            batches.iter().map(|(x, t)| (x, t)),
            loss,
            s.learning_rate,
        )
        .unwrap()
        .1;
    }
    assert_eq!(reassemble(&segs).unwrap(), mono);
    assert_eq!(segments_digest(&segs), d_split);
    (d_mono, d_split)
}

#[test]
fn degenerate_split_equals_monolithic() {
    let (a, b) = train_both(5, &[], Loss::Mse);
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn split_training_matches_monolithic(seed in any::<u64>(), cut in 1usize..3, ce in any::<bool>()) {
        let loss = if ce { Loss::SoftmaxCrossEntropy } else { Loss::Mse };
        let (a, b) = train_both(seed, &[cut], loss);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn split_then_reassemble_is_identity(seed in any::<u64>(), mask in 0u8..8) {
        let params = init_model(&spec(&[3, 5, 5, 5, 2], seed, Loss::Mse)).unwrap();
        let cuts: Vec<usize> = (1..4).filter(|c| mask & (1 << (c - 1)) != 0).collect();
        let segs = split_model(&params, &cuts).unwrap();
        prop_assert_eq!(segs.len(), cuts.len() + 1);
        for pair in segs.windows(2) {
            // Boundary widths line up.
            prop_assert_eq!(pair[0].output_width(), pair[1].input_width());
        }
        prop_assert_eq!(reassemble(&segs).unwrap(), params);
    }
}
