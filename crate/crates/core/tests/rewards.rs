use itertools::Itertools;
use orderhint::reward::{self, BootstrapMeans, RewardScales, ScaleProvenance};
use orderhint::sudoku::{Move, Trajectory};
use proptest::prelude::*;

fn line(n: usize) -> Trajectory {
    (0..n).map(|i| Move::new((i / 9) as u8, (i % 9) as u8, 1 + (i % 9) as u8)).collect()
}

fn prov() -> ScaleProvenance {
    ScaleProvenance {
        checkpoint_hash: "c".into(),
        validation_hash: "v".into(),
    }
}

#[test]
fn cell_accuracy_examples() {
    let sol = line(54);
    assert_eq!(reward::cell_accuracy(&sol, &sol).unwrap(), (1.0, 54));
    assert_eq!(reward::cell_accuracy(&sol, &Trajectory::default()).unwrap(), (0.0, 0));
    let mut half: Vec<Move> = sol.iter().take(27).copied().collect();
    half.extend((0..10).map(|i| Move::new(8, i % 9, 9)));
    let (r, n) = reward::cell_accuracy(&sol, &Trajectory::new(half)).unwrap();
    assert_eq!(n, 27);
    assert!((r - 0.5).abs() < 1e-12);
    assert!(reward::cell_accuracy(&Trajectory::default(), &sol).is_err());
}

#[test]
fn order_reward_examples() {
    let sol = line(7);
    assert!((reward::order_reward(&sol, &sol) - 7.0).abs() < 1e-12);

    let single = Trajectory::new(vec![sol.moves[0]]);
    let shifted = Trajectory::new(vec![Move::new(8, 8, 9), sol.moves[0]]);
    // an incorrect move in front shifts the correct one to index 1
    assert!((reward::order_reward(&single, &shifted) - 0.5).abs() < 1e-12);

    let five = line(5);
    let rev = Trajectory::new(five.moves.iter().rev().copied().collect());
    let expected = 1.0 / 5.0 + 1.0 / 3.0 + 1.0 + 1.0 / 3.0 + 1.0 / 5.0;
    assert!((reward::order_reward(&five, &rev) - expected).abs() < 1e-12);
    assert!((expected - 2.0667).abs() < 1e-4);
}

#[test]
fn scale_examples() {
    let s = RewardScales::from_means(0.75, BootstrapMeans { mean_cell: 0.5, mean_order: 3.0 }, prov()).unwrap();
    assert!((s.cell_scale - 1.5).abs() < 1e-12);
    let s = RewardScales::from_means(1.0, BootstrapMeans { mean_cell: 0.3, mean_order: 2.5 }, prov()).unwrap();
    assert_eq!(s.order_scale, 0.0);

    let s = RewardScales::from_means(0.5, BootstrapMeans { mean_cell: 0.25, mean_order: 5.0 }, prov()).unwrap();
    assert!((s.cell_scale - 2.0).abs() < 1e-12 && (s.order_scale - 0.1).abs() < 1e-12);
    assert!((reward::total_reward(0.5, 10.0, &s) - 2.0).abs() < 1e-12);

    let fixed = RewardScales::fixed(1.0, 0.0);
    assert_eq!(reward::total_reward(0.37, 4.0, &fixed), 0.37);
    let fixed = RewardScales::fixed(0.0, 0.2);
    assert!((reward::total_reward(0.37, 4.0, &fixed) - 0.8).abs() < 1e-12);
}

#[test]
fn zero_means_are_clamped() {
    let s = RewardScales::from_means(0.5, BootstrapMeans { mean_cell: 0.0, mean_order: 0.0 }, prov()).unwrap();
    assert!((s.cell_scale - 0.5 / reward::SCALE_EPS).abs() < 1e-3);
    assert!(s.cell_scale.is_finite() && s.order_scale.is_finite());
}

proptest! {
    #[test]
    fn calibration_identity(alpha in 0.0f64..=1.0, mc in 1e-6f64..1.0, mo in 1e-6f64..50.0) {
        let s = RewardScales::from_means(alpha, BootstrapMeans { mean_cell: mc, mean_order: mo }, prov()).unwrap();
        prop_assert!((s.cell_scale * mc + s.order_scale * mo - 1.0).abs() < 1e-9);
        prop_assert!((s.cell_scale * mc - alpha).abs() < 1e-9);
    }

    #[test]
    fn cell_accuracy_ignores_order(n in 1usize..30, seed in any::<u64>()) {
        let sol = line(n);
        let shuffled = orderhint::sudoku::shuffle_trajectory(&sol, seed);
        let partial = Trajectory::new(shuffled.moves[..n / 2].to_vec());
        let a = reward::cell_accuracy(&sol, &partial).unwrap();
        let b = reward::cell_accuracy(&sol, &orderhint::sudoku::shuffle_trajectory(&partial, seed ^ 1)).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn solver_order_uniquely_maximizes_order_reward(n in 1usize..=6, seed in any::<u64>()) {
        let sol = orderhint::sudoku::shuffle_trajectory(&line(9), seed);
        let sol = Trajectory::new(sol.moves[..n].to_vec());
        let best = reward::order_reward(&sol, &sol);
        prop_assert!((best - n as f64).abs() < 1e-12);
        for perm in sol.moves.iter().copied().permutations(n) {
            let r = reward::order_reward(&sol, &Trajectory::new(perm.clone()));
            if perm != sol.moves {
                prop_assert!(r < best);
            }
            prop_assert!(r >= 0.0 && r <= n as f64);
        }
    }
}
