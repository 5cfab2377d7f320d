//! Allocation solver against the grid oracle and the structural properties
//! of the alpha-fair optimum.

use fedqvr::alloc::{
    b_of_w, brute_force_alloc, floor_and_drop, kkt_residual, solve_alloc, AllocProblem, AllocSolution,
};
use fedqvr::quantizer::payload_bits;
use fedqvr::rng::{self, StreamRng};
use fedqvr::wireless::{dbm_to_watts, rate_from_rx_power, tx_delay, LogBase};
use proptest::prelude::*;
use rand::Rng;

/// Random instance with every device able to afford about `target_bits`
/// under an equal split.
fn instance(r: &mut StreamRng, m: usize, alpha: f64, target_bits: f64) -> AllocProblem {
    let d = 7850u64;
    let mu = 128u64;
    let noise = dbm_to_watts(-143.0);
    let w_total = 1e7;
    let gains: Vec<f64> = (0..m)
        .map(|_| {
            let dist: f64 = r.random_range(10.0..500.0);
            let fade: f64 = -(1.0 - r.random::<f64>()).ln();
            1e-3 * dist.powi(-2) * fade.max(0.05)
        })
        .collect();
    // tau from the weakest device at an equal split
    let weakest = gains.iter().cloned().fold(f64::INFINITY, f64::min);
    let rate = rate_from_rx_power(w_total / m as f64, weakest, noise, LogBase::Two);
    let tau = (d as f64 * (target_bits + 1.0) + mu as f64) / rate;
    AllocProblem {
        gains,
        taus: vec![tau; m],
        w_total,
        alpha,
        d,
        mu,
        noise_psd: noise,
        b_lower: 1,
        log_base: LogBase::Two,
    }
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

#[test]
fn matches_grid_oracle_for_two_and_three_devices() {
    let mut r = rng::stream(42, &[]);
    for case in 0..20 {
        let m = 2 + case % 2;
        let alpha = [0.0, 0.5, 0.9][case % 3];
        let bits = r.random_range(1.0..6.0);
        let p = instance(&mut r, m, alpha, bits);
        let sol = solve_alloc(&p).unwrap();
        let grid = brute_force_alloc(&p, if m == 2 { 2000 } else { 50 }).unwrap();
        // the solver may only beat the grid, and by at most the grid resolution
        assert!(
            sol.objective >= grid.objective * (1.0 - 1e-12) - 1e-12,
            "case {case}"
        );
        assert!(
            rel_gap(sol.objective, grid.objective) <= 1e-4,
            "case {case}: {} vs {}",
            sol.objective,
            grid.objective
        );
        assert!(sol.kkt_residual <= 1e-6, "case {case}: kkt {}", sol.kkt_residual);
        let used: f64 = sol.bandwidths.iter().sum();
        assert!((used - p.w_total).abs() <= 1e-8 * p.w_total);
    }
}

#[test]
fn single_device_equals_grid() {
    let mut r = rng::stream(1, &[]);
    let p = instance(&mut r, 1, 0.5, 3.0);
    let sol = solve_alloc(&p).unwrap();
    let grid = brute_force_alloc(&p, 10).unwrap();
    assert_eq!(sol.bandwidths, vec![p.w_total]);
    assert_eq!(grid.bandwidths, vec![p.w_total]);
    assert_eq!(sol.bits_floored[0], p.b_of_w(0, p.w_total).floor() as u32);
}

#[test]
fn symmetric_grid_optimum_is_midpoint() {
    let mut r = rng::stream(2, &[]);
    let mut p = instance(&mut r, 2, 0.5, 3.0);
    p.gains[1] = p.gains[0];
    let grid = brute_force_alloc(&p, 1001).unwrap();
    assert!((grid.bandwidths[0] - p.w_total / 2.0).abs() < 1e-6 * p.w_total);
}

#[test]
fn b_of_w_matches_rate_composition() {
    let mut r = rng::stream(3, &[]);
    for _ in 0..50 {
        let w: f64 = 10f64.powf(r.random_range(3.0..8.0));
        let g: f64 = 10f64.powf(r.random_range(-12.0..-5.0));
        let tau: f64 = r.random_range(1e-4..1e-1);
        let (d, mu) = (r.random_range(10u64..100_000), r.random_range(0u64..1000));
        let noise = dbm_to_watts(-143.0);
        let expect = (tau * rate_from_rx_power(w, g, noise, LogBase::Two) - mu as f64) / d as f64 - 1.0;
        let got = b_of_w(w, g, tau, d, mu, noise, LogBase::Two);
        assert!((got - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }
}

#[test]
fn kkt_detects_perturbation() {
    let mut r = rng::stream(4, &[]);
    let p = instance(&mut r, 3, 0.5, 4.0);
    let sol = solve_alloc(&p).unwrap();
    assert!(sol.kkt_residual <= 1e-6);
    let mut w = sol.bandwidths.clone();
    w[0] *= 1.01;
    w[1] -= 0.01 * sol.bandwidths[0];
    assert!(kkt_residual(&p, &w, sol.dual_lambda) > 1e-4);
}

fn assert_floor_semantics(p: &AllocProblem, sol: &AllocSolution) {
    for i in 0..p.num_devices() {
        let fb = sol.bits_floored[i];
        if sol.dropped.contains(&i) {
            assert!(fb < p.b_lower, "dropped device {i} had {fb} bits");
        } else {
            assert!(fb >= p.b_lower);
            assert!(fb as f64 <= sol.bits_continuous[i]);
            let rate = rate_from_rx_power(sol.bandwidths[i], p.gains[i], p.noise_psd, p.log_base);
            assert!(tx_delay(payload_bits(p.d, fb, p.mu), rate) <= p.taus[i]);
        }
    }
}

#[test]
fn integer_bits_survive_flooring() {
    let mut r = rng::stream(5, &[]);
    // both devices afford at least 6 bits at an equal split
    let p = instance(&mut r, 2, 0.5, 6.0);
    let (floored, dropped) = floor_and_drop(&p, &[p.w_total / 2.0; 2], &[3.0, 5.0]);
    assert_eq!(floored, vec![3, 5]);
    assert!(dropped.is_empty());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn floored_solutions_meet_delay(seed in any::<u64>(), m in 1usize..8, alpha in 0.0f64..0.95, bits in 0.2f64..6.0) {
        let mut r = rng::stream(seed, &[]);
        let mut p = instance(&mut r, m, alpha, bits);
        p.b_lower = r.random_range(1..3);
        let sol = solve_alloc(&p).unwrap();
        assert_floor_semantics(&p, &sol);
        let used: f64 = sol.bandwidths.iter().sum();
        prop_assert!(used <= p.w_total * (1.0 + 1e-6));
    }

    #[test]
    fn more_bandwidth_never_hurts(seed in any::<u64>(), m in 2usize..6, alpha in 0.0f64..0.95) {
        let mut r = rng::stream(seed, &[]);
        let p = instance(&mut r, m, alpha, 4.0);
        let small = solve_alloc(&p).unwrap();
        let big = solve_alloc(&AllocProblem { w_total: p.w_total * 1.5, ..p.clone() }).unwrap();
        for i in 0..m {
            if !small.dropped.contains(&i) {
                prop_assert!(big.bits_continuous[i] >= small.bits_continuous[i] * (1.0 - 1e-7) - 1e-9);
            }
        }
    }

    #[test]
    fn fairness_raises_the_minimum(seed in any::<u64>(), m in 2usize..6) {
        let mut r = rng::stream(seed, &[]);
        let p = instance(&mut r, m, 0.0, 4.0);
        let mut prev = f64::NEG_INFINITY;
        for alpha in [0.0, 0.3, 0.5, 0.7, 0.9] {
            let sol = solve_alloc(&AllocProblem { alpha, ..p.clone() }).unwrap();
            let min = sol.bits_continuous.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assert!(min >= prev - 1e-7 * prev.abs().max(1.0), "alpha {}: {} < {}", alpha, min, prev);
            prev = min;
        }
    }
}

#[test]
fn solution_json_round_trip() {
    let mut r = rng::stream(6, &[]);
    let p = instance(&mut r, 3, 0.5, 3.0);
    let sol = solve_alloc(&p).unwrap();
    let text = serde_json::to_string(&sol).unwrap();
    let back: AllocSolution = serde_json::from_str(&text).unwrap();
    assert_eq!(back, sol);
    let pt: AllocProblem = serde_json::from_str(&serde_json::to_string(&p).unwrap()).unwrap();
    assert_eq!(pt, p);
}
