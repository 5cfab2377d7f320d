//! Unquantized baselines: FedAvg and SCAFFOLD (control-variate option II,
//! server step `eta_g`). Uploads are full-precision 32-bit floats; SCAFFOLD
//! sends both the model change and the control-variate change.

use super::{ClientState, Federation, RoundPlan, RoundReport, ServerState, Uplink};
use crate::error::{Error, Result};
use crate::learner::{stochastic_grad, ParamVector};
use crate::rng::{self, tag};

pub fn fedavg_payload_bits(d: usize) -> u64 {
    32 * d as u64
}

pub fn scaffold_payload_bits(d: usize) -> u64 {
    64 * d as u64
}

fn diverged(x: &ParamVector, what: &str) -> Result<()> {
    match x.check_finite() {
        Err(Error::NonFinite { index, value }) => Err(Error::Divergence(format!(
            "{what} element {index} became {value}"
        ))),
        other => other,
    }
}

/// Plain local SGD: `x <- x - eta g(x)`.
pub fn local_sgd_with<G>(theta: &[f64], steps: usize, eta: f64, mut grad_fn: G) -> Result<ParamVector>
where
    G: FnMut(&[f64]) -> Result<ParamVector>,
{
    let mut x = ParamVector::from_vec(theta.to_vec());
    for _ in 0..steps {
        let g = grad_fn(&x)?;
        x.axpy(-eta, &g);
        diverged(&x, "local iterate")?;
    }
    Ok(x)
}

/// Corrected local SGD: `y <- y - eta_l (g(y) - c_i + c)`.
pub fn local_scaffold_with<G>(
    theta: &[f64],
    c: &[f64],
    c_i: &[f64],
    steps: usize,
    eta_l: f64,
    mut grad_fn: G,
) -> Result<ParamVector>
where
    G: FnMut(&[f64]) -> Result<ParamVector>,
{
    let mut y = ParamVector::from_vec(theta.to_vec());
    for _ in 0..steps {
        let g = grad_fn(&y)?;
        for j in 0..y.len() {
            y[j] -= eta_l * (g[j] - c_i[j] + c[j]);
        }
        diverged(&y, "local iterate")?;
    }
    Ok(y)
}

/// `c_i+ = c_i - c + (theta - y) / (K eta_l)`.
pub fn scaffold_control_update(
    c_i: &[f64],
    c: &[f64],
    theta: &[f64],
    y: &[f64],
    steps: usize,
    eta_l: f64,
) -> ParamVector {
    let k = steps as f64 * eta_l;
    ParamVector::from_vec(
        (0..c_i.len())
            .map(|j| c_i[j] - c[j] + (theta[j] - y[j]) / k)
            .collect(),
    )
}

fn base_report(server: &ServerState, plan: &RoundPlan) -> RoundReport {
    RoundReport {
        round: server.round,
        active: plan.clients.iter().map(|c| c.id).collect(),
        local_steps: plan.clients.iter().map(|c| c.local_steps).collect(),
        bits: plan.clients.iter().map(|_| 32).collect(),
        ..Default::default()
    }
}

/// FedAvg round: the new model is the unweighted mean of delivered local
/// models; the model is unchanged when nothing arrives.
pub fn run_round_fedavg(
    fed: &Federation,
    server: &ServerState,
    plan: &RoundPlan,
    uplink: &Uplink,
) -> Result<(ServerState, RoundReport)> {
    plan.validate(fed.num_clients())?;
    let round = server.round as u64;
    let locals = fed.map_clients(plan, |cp| {
        let mut r = rng::stream(fed.seed, &[tag::MINIBATCH, round, cp.id as u64]);
        let pool = fed.pool(cp.id);
        local_sgd_with(&server.theta, cp.local_steps, plan.eta, |x| {
            stochastic_grad(&fed.spec, x, fed.data, pool, plan.batch_size, &mut r)
        })
    })?;

    let bits = fedavg_payload_bits(server.theta.len());
    let mut report = base_report(server, plan);
    let mut sum = ParamVector::zeros(server.theta.len());
    for (cp, x) in plan.clients.iter().zip(&locals) {
        if uplink(cp.id, bits) {
            report.uplink_bits += bits;
            report.delivered.push(cp.id);
            sum.axpy(1.0, x);
        } else {
            report.lost_bits += bits;
        }
    }
    let theta = if report.delivered.is_empty() {
        server.theta.clone()
    } else {
        sum.scale(1.0 / report.delivered.len() as f64);
        sum
    };
    Ok((
        ServerState {
            theta,
            c: server.c.clone(),
            round: server.round + 1,
        },
        report,
    ))
}

/// SCAFFOLD round. The server control variate moves by `(1/N) sum dc_i`
/// over delivered clients; clients whose upload is lost keep their old `c_i`.
pub fn run_round_scaffold(
    fed: &Federation,
    server: &ServerState,
    clients: &mut [ClientState],
    plan: &RoundPlan,
    uplink: &Uplink,
) -> Result<(ServerState, RoundReport)> {
    plan.validate(fed.num_clients())?;
    let round = server.round as u64;
    let theta = &server.theta;
    let results = fed.map_clients(plan, |cp| {
        let mut r = rng::stream(fed.seed, &[tag::MINIBATCH, round, cp.id as u64]);
        let pool = fed.pool(cp.id);
        let c_i = &clients[cp.id].c;
        let y = local_scaffold_with(theta, &server.c, c_i, cp.local_steps, plan.eta, |x| {
            stochastic_grad(&fed.spec, x, fed.data, pool, plan.batch_size, &mut r)
        })?;
        let c_new = scaffold_control_update(c_i, &server.c, theta, &y, cp.local_steps, plan.eta);
        Ok((y, c_new))
    })?;

    let d = theta.len();
    let bits = scaffold_payload_bits(d);
    let mut report = base_report(server, plan);
    let mut dy = ParamVector::zeros(d);
    let mut dc = ParamVector::zeros(d);
    for (cp, (y, c_new)) in plan.clients.iter().zip(results) {
        if uplink(cp.id, bits) {
            report.uplink_bits += bits;
            report.delivered.push(cp.id);
            dy.axpy(1.0, &y);
            dy.axpy(-1.0, theta);
            dc.axpy(1.0, &c_new);
            dc.axpy(-1.0, &clients[cp.id].c);
            clients[cp.id].c = c_new;
        } else {
            report.lost_bits += bits;
        }
    }
    let mut next_theta = theta.clone();
    let mut next_c = server.c.clone();
    if !report.delivered.is_empty() {
        next_theta.axpy(plan.eta_global / report.delivered.len() as f64, &dy);
        next_c.axpy(1.0 / fed.num_clients() as f64, &dc);
    }
    diverged(&next_theta, "global model")?;
    Ok((
        ServerState {
            theta: next_theta,
            c: next_c,
            round: server.round + 1,
        },
        report,
    ))
}
