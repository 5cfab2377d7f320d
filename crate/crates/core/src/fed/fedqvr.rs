//! Quantized variance-reduced protocol.
//!
//! Per round `r`:
//! 1. the server broadcasts `theta0 = theta - c / gamma`;
//! 2. each active client runs `E_i` proximal local steps
//!    `x <- (x - eta (g(x) - c_i)) / (1 + gamma eta) + gamma eta / (1 + gamma eta) * theta0`,
//!    quantizes `x - theta0` with `B_i` bits into `Delta_i`, and updates
//!    `c_i <- c_i - a / (eta Et_i) * Delta_i` with
//!    `Et_i = (1 - (1 + gamma eta)^-E_i) / (gamma eta)`;
//! 3. the server applies `c <- c - sum_i a p_i / (eta Et_i) Delta_i` and
//!    `theta <- theta0 + N / m * sum_i p_i Delta_i`.
//!
//! Both control-variate updates use the dequantized `Delta_i`, which keeps
//! `c = sum_i p_i c_i` exact at every round.

use std::collections::BTreeSet;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ClientState, Federation, RoundPlan, RoundReport, ServerState, Uplink};
use crate::error::{Error, Result};
use crate::learner::{stochastic_grad, ParamVector};
use crate::quantizer::{dequantize, quantize, QuantizedDelta, QuantizerConfig};
use crate::rng::{self, tag};

/// `theta - c / gamma`.
pub fn broadcast_point(s: &ServerState, gamma: f64) -> ParamVector {
    let mut out = s.theta.clone();
    out.axpy(-1.0 / gamma, &s.c);
    out
}

/// Effective step count `(1 - (1 + gamma eta)^-E) / (gamma eta)`.
pub fn e_tilde(gamma: f64, eta: f64, steps: usize) -> f64 {
    let ge = gamma * eta;
    // -expm1(-E ln(1+ge)) keeps precision when ge is tiny
    -(-(steps as f64) * ge.ln_1p()).exp_m1() / ge
}

/// Geometric weights `b_t = (1 + gamma eta)^-(E - t)`, `t = 0..E`.
pub fn b_weights(gamma: f64, eta: f64, steps: usize) -> Vec<f64> {
    let base = 1.0 / (1.0 + gamma * eta);
    (0..steps).map(|t| base.powi((steps - t) as i32)).collect()
}

/// Runs `steps` proximal local steps from `theta0` with gradients supplied
/// by `grad_fn`; returns the final iterate and every gradient used.
pub fn local_update_with<G>(
    theta0: &[f64],
    c_i: &[f64],
    steps: usize,
    eta: f64,
    gamma: f64,
    mut grad_fn: G,
) -> Result<(ParamVector, Vec<ParamVector>)>
where
    G: FnMut(&[f64]) -> Result<ParamVector>,
{
    if steps == 0 {
        return Err(Error::InvalidArgument("local steps must be >= 1".into()));
    }
    let shrink = 1.0 / (1.0 + gamma * eta);
    let pull = gamma * eta * shrink;
    let mut x = ParamVector::from_vec(theta0.to_vec());
    let mut log = Vec::with_capacity(steps);
    for _ in 0..steps {
        let g = grad_fn(&x)?;
        for j in 0..x.len() {
            x[j] = shrink * (x[j] - eta * (g[j] - c_i[j])) + pull * theta0[j];
        }
        log.push(g);
        if let Err(Error::NonFinite { index, value }) = x.check_finite() {
            return Err(Error::Divergence(format!(
                "local iterate element {index} became {value}"
            )));
        }
    }
    Ok((x, log))
}

/// Local update on client data with mini-batch gradients.
#[allow(clippy::too_many_arguments)]
pub fn local_update_fedqvr<R: Rng + ?Sized>(
    fed: &Federation,
    client: usize,
    theta0: &[f64],
    c_i: &[f64],
    steps: usize,
    eta: f64,
    gamma: f64,
    batch_size: usize,
    rng: &mut R,
) -> Result<(ParamVector, Vec<ParamVector>)> {
    let pool = fed.pool(client);
    local_update_with(theta0, c_i, steps, eta, gamma, |x| {
        stochastic_grad(&fed.spec, x, fed.data, pool, batch_size, rng)
    })
}

/// What a client sends: the quantized model change and its control-variate
/// step scale `a / (eta Et_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpload {
    pub client: usize,
    pub delta: QuantizedDelta,
    pub step_scale: f64,
}

/// Quantizes `theta_new - theta0` and returns the upload together with the
/// client's updated control variate.
#[allow(clippy::too_many_arguments)]
pub fn client_finish<R: Rng + ?Sized>(
    client: usize,
    theta_new: &[f64],
    theta0: &[f64],
    c_i: &[f64],
    bits: u32,
    eta: f64,
    e_tilde: f64,
    a: f64,
    layout: &[Range<usize>],
    cfg: &QuantizerConfig,
    rng: &mut R,
) -> Result<(ClientUpload, ParamVector)> {
    let diff: Vec<f64> = theta_new.iter().zip(theta0).map(|(x, y)| x - y).collect();
    let delta = quantize(&diff, bits, layout, cfg, rng)?;
    let step_scale = a / (eta * e_tilde);
    let dq = dequantize(&delta);
    let mut c_new = ParamVector::from_vec(c_i.to_vec());
    c_new.axpy(-step_scale, &dq);
    Ok((
        ClientUpload {
            client,
            delta,
            step_scale,
        },
        c_new,
    ))
}

/// Server aggregation over delivered uploads `(upload, p_i)`; `m` is the
/// number of sampled clients and `n` the population size.
pub fn server_aggregate(
    s: &ServerState,
    theta0: &[f64],
    uploads: &[(&ClientUpload, f64)],
    m: usize,
    n: usize,
) -> Result<ServerState> {
    let mut seen = BTreeSet::new();
    for (u, _) in uploads {
        if !seen.insert(u.client) {
            return Err(Error::DuplicateClient(u.client));
        }
    }
    let mut order: Vec<&(&ClientUpload, f64)> = uploads.iter().collect();
    order.sort_by_key(|(u, _)| u.client);

    let mut c = s.c.clone();
    let mut theta = ParamVector::from_vec(theta0.to_vec());
    let mut avg = ParamVector::zeros(theta0.len());
    for (u, p) in order {
        let dq = dequantize(&u.delta);
        if dq.len() != theta0.len() {
            return Err(Error::DimensionMismatch {
                expected: theta0.len(),
                actual: dq.len(),
            });
        }
        c.axpy(-u.step_scale * p, &dq);
        avg.axpy(*p, &dq);
    }
    if !uploads.is_empty() {
        theta.axpy(n as f64 / m as f64, &avg);
    }
    Ok(ServerState {
        theta,
        c,
        round: s.round + 1,
    })
}

/// One full round. Clients whose upload is lost keep their previous control
/// variate, exactly as if they had not been sampled.
pub fn run_round_fedqvr(
    fed: &Federation,
    server: &ServerState,
    clients: &mut [ClientState],
    plan: &RoundPlan,
    uplink: &Uplink,
) -> Result<(ServerState, RoundReport)> {
    plan.validate(fed.num_clients())?;
    if !(plan.gamma > 0.0) || !(plan.a > 0.0 && plan.a < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need gamma > 0 and a in (0, 1), got gamma = {}, a = {}",
            plan.gamma, plan.a
        )));
    }
    let theta0 = broadcast_point(server, plan.gamma);
    let layout = fed.layout();
    let round = server.round as u64;

    let results = fed.map_clients(plan, |cp| {
        let id = cp.id as u64;
        let mut batch_rng = rng::stream(fed.seed, &[tag::MINIBATCH, round, id]);
        let mut quant_rng = rng::stream(fed.seed, &[tag::QUANTIZE, round, id]);
        let c_i = &clients[cp.id].c;
        let (theta_i, _) = local_update_fedqvr(
            fed,
            cp.id,
            &theta0,
            c_i,
            cp.local_steps,
            plan.eta,
            plan.gamma,
            plan.batch_size,
            &mut batch_rng,
        )?;
        let et = e_tilde(plan.gamma, plan.eta, cp.local_steps);
        client_finish(
            cp.id,
            &theta_i,
            &theta0,
            c_i,
            cp.bits,
            plan.eta,
            et,
            plan.a,
            &layout,
            &fed.quantizer,
            &mut quant_rng,
        )
    })?;

    let mut report = RoundReport {
        round: server.round,
        active: plan.clients.iter().map(|c| c.id).collect(),
        local_steps: plan.clients.iter().map(|c| c.local_steps).collect(),
        bits: plan.clients.iter().map(|c| c.bits).collect(),
        ..Default::default()
    };
    let mut delivered = Vec::new();
    for (upload, c_new) in results {
        let bits = upload.delta.payload_bits();
        if uplink(upload.client, bits) {
            report.uplink_bits += bits;
            report.delivered.push(upload.client);
            clients[upload.client].c = c_new;
            delivered.push(upload);
        } else {
            report.lost_bits += bits;
        }
    }
    let weighted: Vec<(&ClientUpload, f64)> =
        delivered.iter().map(|u| (u, clients[u.client].weight)).collect();
    let next = server_aggregate(server, &theta0, &weighted, plan.sampled, fed.num_clients())?;
    if let Err(Error::NonFinite { index, value }) = next.theta.check_finite() {
        return Err(Error::Divergence(format!(
            "global model element {index} became {value} at round {}",
            server.round
        )));
    }
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_examples() {
        let s = ServerState {
            theta: ParamVector::from_vec(vec![1.0, 1.0]),
            c: ParamVector::from_vec(vec![0.3, 0.3]),
            round: 0,
        };
        let t0 = broadcast_point(&s, 0.3);
        assert!(t0.iter().all(|v| v.abs() < 1e-15));
        let zero_c = ServerState::new(ParamVector::from_vec(vec![2.0, -1.0]));
        assert_eq!(broadcast_point(&zero_c, 0.3), zero_c.theta);
    }

    #[test]
    fn e_tilde_values() {
        // (1 - 1.003^-2) / 0.003
        let expected = (1.0 - 1.0 / (1.003f64 * 1.003)) / 0.003;
        assert!((e_tilde(0.3, 0.01, 2) - expected).abs() < 1e-12);
        assert!((e_tilde(0.3, 0.01, 2) - 1.9910).abs() < 5e-5);
        assert!((e_tilde(0.3, 0.01, 1) - 1.0 / 1.003).abs() < 1e-15);
        assert!((e_tilde(1e-3, 1e-3, 5) - 5.0).abs() < 1e-3);
    }

    #[test]
    fn b_weights_values() {
        let b = b_weights(0.3, 0.01, 2);
        assert!((b[0] - 1.0 / (1.003f64 * 1.003)).abs() < 1e-15);
        assert!((b[1] - 1.0 / 1.003).abs() < 1e-15);
        assert!(b[0] < b[1]);
    }

    #[test]
    fn single_step_closed_form() {
        let theta0 = [0.5, -1.0];
        let c_i = [0.1, 0.2];
        let g = [0.4, -0.3];
        let (eta, gamma) = (0.01, 0.3);
        let (x, log) = local_update_with(&theta0, &c_i, 1, eta, gamma, |_| {
            Ok(ParamVector::from_vec(g.to_vec()))
        })
        .unwrap();
        assert_eq!(log.len(), 1);
        let ge = gamma * eta;
        for j in 0..2 {
            let expect = (theta0[j] - eta * (g[j] - c_i[j])) / (1.0 + ge) + ge * theta0[j] / (1.0 + ge);
            assert!((x[j] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_fixed_point() {
        let theta0 = [0.25, -0.5, 1.0];
        let (x, _) =
            local_update_with(&theta0, &[0.0; 3], 7, 0.01, 0.3, |_| Ok(ParamVector::zeros(3))).unwrap();
        for j in 0..3 {
            assert!((x[j] - theta0[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn divergence_detected() {
        let err = local_update_with(&[1.0], &[0.0], 3, 1.0, 0.3, |_| {
            Ok(ParamVector::from_vec(vec![f64::INFINITY]))
        })
        .unwrap_err();
        assert!(matches!(err, Error::Divergence(_)));
    }

    #[test]
    fn unchanged_model_leaves_control_variate() {
        let theta = [0.3, -0.2, 0.1];
        let c_i = [0.5, 0.5, -0.5];
        let (up, c_new) = client_finish(
            0,
            &theta,
            &theta,
            &c_i,
            2,
            0.01,
            1.991,
            0.3,
            &[],
            &QuantizerConfig::whole_vector(),
            &mut rng::stream(1, &[]),
        )
        .unwrap();
        assert!(dequantize(&up.delta).iter().all(|&v| v == 0.0));
        assert_eq!(&c_new[..], &c_i);
    }

    #[test]
    fn aggregate_edge_cases() {
        let s = ServerState {
            theta: ParamVector::from_vec(vec![1.0, 2.0]),
            c: ParamVector::from_vec(vec![0.1, 0.2]),
            round: 4,
        };
        let theta0 = broadcast_point(&s, 0.5);
        let empty = server_aggregate(&s, &theta0, &[], 3, 10).unwrap();
        assert_eq!(empty.theta, theta0);
        assert_eq!(empty.c, s.c);
        assert_eq!(empty.round, 5);

        let diff = [0.25, -0.5];
        let theta_new: Vec<f64> = theta0.iter().zip(diff).map(|(a, b)| a + b).collect();
        let (up, _) = client_finish(
            3,
            &theta_new,
            &theta0,
            &[0.0, 0.0],
            8,
            0.01,
            1.0,
            0.3,
            &[],
            &QuantizerConfig::whole_vector(),
            &mut rng::stream(1, &[]),
        )
        .unwrap();
        let dq = dequantize(&up.delta);
        let one = server_aggregate(&s, &theta0, &[(&up, 0.1)], 1, 10).unwrap();
        for j in 0..2 {
            assert!((one.theta[j] - (theta0[j] + dq[j])).abs() < 1e-15);
        }
        assert!(matches!(
            server_aggregate(&s, &theta0, &[(&up, 0.1), (&up, 0.1)], 2, 10),
            Err(Error::DuplicateClient(3))
        ));
    }
}
