//! Self-checks run by the `verify` subcommand: quick versions of the
//! oracle suites, each compared against an independent computation.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::alloc::{brute_force_alloc, kkt_residual, solve_alloc, AllocProblem};
use crate::data::{shard_partition, synth_noniid};
use crate::error::Result;
use crate::fed::fedqvr::local_update_with;
use crate::fed::{
    b_weights, e_tilde, ideal_uplink, run_round_fedqvr, sample_clients, ClientPlan, ClientState, Federation,
    RoundPlan, ServerState,
};
use crate::learner::{grad, init_params, loss, ModelSpec, ParamVector};
use crate::quantizer::{dequantize, empirical_omega, omega_bound, quantize, QuantizerConfig};
use crate::rng::{self, StreamRng};
use crate::wireless::{rate_from_rx_power, tx_delay, LogBase};

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    match f() {
        Ok((passed, detail)) => CheckResult { name, passed, detail },
        Err(e) => CheckResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

fn gaussian(n: usize, scale: f64, r: &mut StreamRng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(r);
            scale * z
        })
        .collect()
}

fn quantizer_unbiased(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[100]);
    let cfg = QuantizerConfig::whole_vector();
    let mut worst: f64 = 0.0;
    for bits in [1, 2, 4] {
        let z = gaussian(16, 1.0, &mut r);
        let trials = 20_000;
        let mut sum = vec![0.0; z.len()];
        let mut sq = vec![0.0; z.len()];
        for _ in 0..trials {
            let q = dequantize(&quantize(&z, bits, &[], &cfg, &mut r)?);
            for j in 0..z.len() {
                sum[j] += q[j];
                sq[j] += q[j] * q[j];
            }
        }
        for j in 0..z.len() {
            let mean = sum[j] / trials as f64;
            let var = (sq[j] / trials as f64 - mean * mean).max(0.0);
            let se = (var / trials as f64).sqrt();
            if se > 0.0 {
                worst = worst.max((mean - z[j]).abs() / se);
            } else if (mean - z[j]).abs() > 1e-12 * z[j].abs() {
                worst = f64::INFINITY;
            }
        }
    }
    Ok((worst <= 4.5, format!("max |mean - z| / se = {worst:.2}")))
}

fn quantizer_contraction(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[101]);
    let cfg = QuantizerConfig::whole_vector();
    let mut ok = true;
    for _ in 0..10 {
        let scale = 10f64.powf(r.random_range(-3.0..-1.0));
        let z = gaussian(32, scale, &mut r);
        let bits = r.random_range(1..=4);
        let emp = empirical_omega(&z, bits, &[], &cfg, 2000, &mut r)?;
        ok &= emp <= omega_bound(&z, bits, &[], &cfg)?;
    }
    Ok((ok, "10 delta-scale vectors".into()))
}

fn closed_form_local(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[102]);
    let mut worst: f64 = 0.0;
    for &ge in &[1e-3, 1e-2, 1e-1] {
        for &steps in &[1usize, 2, 5, 17] {
            let eta = 0.05;
            let gamma = ge / eta;
            let theta0 = gaussian(6, 1.0, &mut r);
            let c_i = gaussian(6, 0.1, &mut r);
            let mut g_rng = rng::stream(seed, &[103, steps as u64]);
            let (x, log) = local_update_with(&theta0, &c_i, steps, eta, gamma, |x| {
                let noise = gaussian(6, 0.1, &mut g_rng);
                Ok(ParamVector::from_vec(
                    x.iter().zip(noise).map(|(v, n)| v.sin() + n).collect(),
                ))
            })?;
            let b = b_weights(gamma, eta, steps);
            for j in 0..6 {
                let s: f64 = (0..steps).map(|t| b[t] * (log[t][j] - c_i[j])).sum();
                worst = worst.max((x[j] - theta0[j] + eta * s).abs());
            }
        }
    }
    Ok((worst <= 1e-10, format!("max deviation {worst:.2e}")))
}

fn weight_identity() -> Result<(bool, String)> {
    let mut worst: f64 = 0.0;
    for &(gamma, eta) in &[(0.3, 0.01), (1.0, 0.1), (1e-3, 1e-3)] {
        for steps in 1..=20 {
            let b: f64 = b_weights(gamma, eta, steps).iter().sum();
            worst = worst.max((b - e_tilde(gamma, eta, steps)).abs());
        }
    }
    Ok((worst <= 1e-12, format!("max | ||b||_1 - Et | = {worst:.2e}")))
}

fn gradient_fd(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[104]);
    let ds = synth_noniid(3, 4, 5, 2.0, &mut r)?;
    let idx = ds.all_indices();
    let mut worst: f64 = 0.0;
    for spec in [ModelSpec::logistic(4, 3), ModelSpec::mlp(4, 5, 3)] {
        let theta = init_params(&spec, &mut r);
        let g = grad(&spec, &theta, &ds, &idx)?;
        let h = 1e-6;
        for j in 0..theta.len() {
            let mut p = theta.clone();
            p[j] += h;
            let mut m = theta.clone();
            m[j] -= h;
            let fd = (loss(&spec, &p, &ds, &idx)? - loss(&spec, &m, &ds, &idx)?) / (2.0 * h);
            worst = worst.max((fd - g[j]).abs() / g[j].abs().max(1e-3));
        }
    }
    Ok((worst <= 1e-4, format!("max relative error {worst:.2e}")))
}

fn control_variate_identity(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[105]);
    let ds = synth_noniid(4, 5, 30, 2.0, &mut r)?;
    let part = shard_partition(&ds, 6, 1, &mut r)?;
    let spec = ModelSpec::logistic(5, 4);
    let fed = Federation {
        spec,
        data: &ds,
        partition: &part,
        quantizer: QuantizerConfig::default(),
        seed,
        parallel: false,
    };
    let mut server = ServerState::new(init_params(&spec, &mut r));
    let mut clients = ClientState::for_partition(&part, spec.num_params());
    let mut worst: f64 = 0.0;
    for round in 0..15 {
        let ids = sample_clients(6, 3, &mut r)?;
        let plan = RoundPlan {
            clients: ids
                .iter()
                .map(|&id| ClientPlan {
                    id,
                    local_steps: r.random_range(1..=5),
                    bits: 2,
                })
                .collect(),
            sampled: 3,
            batch_size: 10,
            eta: 0.05,
            gamma: 0.3,
            a: 0.3,
            eta_global: 1.0,
        };
        let (next, _) = run_round_fedqvr(&fed, &server, &mut clients, &plan, &ideal_uplink)?;
        server = next;
        let mut sum = ParamVector::zeros(spec.num_params());
        for c in &clients {
            sum.axpy(c.weight, &c.c);
        }
        worst = worst.max(server.c.max_abs_diff(&sum));
        debug_assert_eq!(server.round, round + 1);
    }
    Ok((worst <= 1e-10, format!("max |c - sum p_i c_i| = {worst:.2e}")))
}

fn alloc_problem(r: &mut StreamRng, m: usize, alpha: f64) -> AllocProblem {
    AllocProblem {
        gains: (0..m).map(|_| 10f64.powf(r.random_range(-9.0..-6.0))).collect(),
        taus: vec![0.05; m],
        w_total: 1e7,
        alpha,
        d: 7850,
        mu: 128,
        noise_psd: 10f64.powf(-17.3),
        b_lower: 1,
        log_base: LogBase::Two,
    }
}

fn alloc_oracle(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[106]);
    let mut worst_gap: f64 = 0.0;
    let mut worst_kkt: f64 = 0.0;
    for alpha in [0.0, 0.5, 0.9] {
        let p = alloc_problem(&mut r, 2, alpha);
        let sol = solve_alloc(&p)?;
        if sol.dropped.len() == 2 {
            continue;
        }
        let grid = brute_force_alloc(&p, 2000)?;
        let gap = (grid.objective - sol.objective) / sol.objective.abs().max(1e-12);
        worst_gap = worst_gap.max(gap);
        worst_kkt = worst_kkt.max(kkt_residual(&p, &sol.bandwidths, sol.dual_lambda));
    }
    Ok((
        worst_gap <= 1e-4 && worst_kkt <= 1e-6,
        format!("grid gap {worst_gap:.2e}, kkt {worst_kkt:.2e}"),
    ))
}

fn floor_conformance(seed: u64) -> Result<(bool, String)> {
    let mut r = rng::stream(seed, &[107]);
    let mut ok = true;
    for _ in 0..20 {
        let m = r.random_range(1..=6);
        let p = alloc_problem(&mut r, m, 0.5);
        let sol = solve_alloc(&p)?;
        for i in 0..m {
            let fb = sol.bits_floored[i];
            if sol.dropped.contains(&i) {
                ok &= fb < p.b_lower;
            } else {
                let rate = rate_from_rx_power(sol.bandwidths[i], p.gains[i], p.noise_psd, p.log_base);
                ok &= tx_delay(p.d * (fb as u64 + 1) + p.mu, rate) <= p.taus[i];
            }
        }
    }
    Ok((ok, "20 random instances".into()))
}

/// Runs every self-check with the given seed.
pub fn verify(seed: u64) -> Vec<CheckResult> {
    vec![
        check("quantizer_unbiased", || quantizer_unbiased(seed)),
        check("quantizer_contraction", || quantizer_contraction(seed)),
        check("control_variate_identity", || control_variate_identity(seed)),
        check("closed_form_local_update", || closed_form_local(seed)),
        check("step_weight_identity", weight_identity),
        check("gradient_finite_difference", || gradient_fd(seed)),
        check("allocation_oracle", || alloc_oracle(seed)),
        check("floor_and_drop", || floor_conformance(seed)),
    ]
}
