use adaptrial_core::bandit::thompson_round;
use adaptrial_core::{prob_best_exact, BetaPosterior};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Exact P(arm 1 draw > arm 0 draw), frozen from independent quadrature.
const EXAMPLE_1: f64 = 0.802_572_040_962_133_7;
const EXAMPLE_2: f64 = 0.995_538_903_820_637_4;

fn frequency_second_wins(a: (u64, u64), b: (u64, u64), rounds: usize, seed: u64) -> f64 {
    let posts = [
        BetaPosterior::with_counts(1.0, 1.0, a.0, a.1).unwrap(),
        BetaPosterior::with_counts(1.0, 1.0, b.0, b.1).unwrap(),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let wins = (0..rounds)
        .filter(|_| thompson_round(&posts, &mut rng).unwrap().1 == 1)
        .count();
    wins as f64 / rounds as f64
}

#[test]
fn exact_oracle_matches_frozen_values() {
    assert!((prob_best_exact(5.0, 7.0, 7.0, 5.0).unwrap() - EXAMPLE_1).abs() < 1e-12);
    assert!((prob_best_exact(3.0, 9.0, 9.0, 3.0).unwrap() - EXAMPLE_2).abs() < 1e-12);
}

#[test]
fn empirical_selection_matches_oracle() {
    let f1 = frequency_second_wins((4, 6), (6, 4), 1_000_000, 1);
    let f2 = frequency_second_wins((2, 8), (8, 2), 1_000_000, 2);
    assert!((f1 - EXAMPLE_1).abs() <= 0.002, "{f1}");
    assert!((f2 - EXAMPLE_2).abs() <= 0.002, "{f2}");
    assert!(f2 > f1);
}
