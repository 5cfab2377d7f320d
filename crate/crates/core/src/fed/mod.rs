//! Protocol state machines: the quantized variance-reduced protocol
//! ([`fedqvr`]) and the FedAvg / SCAFFOLD baselines ([`baselines`]).
//!
//! A round is driven by a [`RoundPlan`] (who participates, how many local
//! steps, how many bits) built by the caller. Client computations of one
//! round are independent and may run in parallel; every client draws from its
//! own random stream keyed by `(seed, round, client)`, and the server reduces
//! uploads in ascending client-id order, so results are identical for any
//! worker schedule.

pub mod baselines;
pub mod fedqvr;
pub mod theory;

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Partition};
use crate::error::{Error, Result};
use crate::learner::{ModelSpec, ParamVector};
use crate::quantizer::QuantizerConfig;

pub use baselines::{run_round_fedavg, run_round_scaffold};
pub use fedqvr::{
    b_weights, broadcast_point, client_finish, e_tilde, local_update_fedqvr, run_round_fedqvr,
    server_aggregate,
};

/// Server-side protocol state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub theta: ParamVector,
    /// Server control variate; unused by FedAvg.
    pub c: ParamVector,
    pub round: usize,
}

impl ServerState {
    pub fn new(theta: ParamVector) -> Self {
        let d = theta.len();
        ServerState {
            theta,
            c: ParamVector::zeros(d),
            round: 0,
        }
    }
}

/// Per-device protocol state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientState {
    pub id: usize,
    pub c: ParamVector,
    pub weight: f64,
}

impl ClientState {
    /// Zero control variates for every client of a partition.
    pub fn for_partition(part: &Partition, d: usize) -> Vec<ClientState> {
        part.weights
            .iter()
            .enumerate()
            .map(|(id, &weight)| ClientState {
                id,
                c: ParamVector::zeros(d),
                weight,
            })
            .collect()
    }
}

/// Work order for one participating client.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientPlan {
    pub id: usize,
    pub local_steps: usize,
    /// Quantization bits (ignored by unquantized protocols).
    pub bits: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPlan {
    /// Participating clients in ascending id order.
    pub clients: Vec<ClientPlan>,
    /// Number of clients sampled this round (before any drops); the server
    /// scales aggregates by `N / sampled`.
    pub sampled: usize,
    pub batch_size: usize,
    /// Local step size (`eta_l` for SCAFFOLD).
    pub eta: f64,
    pub gamma: f64,
    pub a: f64,
    /// Server step size for SCAFFOLD.
    pub eta_global: f64,
}

impl RoundPlan {
    pub fn validate(&self, num_clients: usize) -> Result<()> {
        let mut prev = None;
        for c in &self.clients {
            if c.id >= num_clients {
                return Err(Error::InvalidArgument(format!(
                    "client id {} >= N = {num_clients}",
                    c.id
                )));
            }
            if prev.is_some_and(|p| p >= c.id) {
                return Err(Error::DuplicateClient(c.id));
            }
            prev = Some(c.id);
            if c.local_steps == 0 {
                return Err(Error::InvalidArgument(format!(
                    "client {} has zero local steps",
                    c.id
                )));
            }
        }
        if self.clients.len() > self.sampled || self.sampled > num_clients {
            return Err(Error::InvalidArgument(format!(
                "{} planned clients, {} sampled, N = {num_clients}",
                self.clients.len(),
                self.sampled
            )));
        }
        if !(self.eta > 0.0) || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "eta must be > 0 and batch_size >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Read-only context shared by all clients of an experiment.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub spec: ModelSpec,
    pub data: &'a Dataset,
    pub partition: &'a Partition,
    pub quantizer: QuantizerConfig,
    pub seed: u64,
    /// Run the clients of a round on the rayon pool.
    pub parallel: bool,
}

impl Federation<'_> {
    pub fn num_clients(&self) -> usize {
        self.partition.num_clients()
    }

    pub fn layout(&self) -> Vec<Range<usize>> {
        self.spec.tensor_ranges()
    }

    pub fn pool(&self, client: usize) -> &[usize] {
        &self.partition.assignments[client]
    }

    /// Maps `f` over the planned clients, in plan order.
    pub(crate) fn map_clients<T, F>(&self, plan: &RoundPlan, f: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&ClientPlan) -> Result<T> + Sync + Send,
    {
        if self.parallel {
            use rayon::prelude::*;
            plan.clients.par_iter().map(&f).collect()
        } else {
            plan.clients.iter().map(f).collect()
        }
    }
}

/// Outcome of one round.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub active: Vec<usize>,
    pub local_steps: Vec<usize>,
    pub bits: Vec<u32>,
    /// Clients whose upload reached the server.
    pub delivered: Vec<usize>,
    /// Bits successfully uploaded this round.
    pub uplink_bits: u64,
    /// Bits of uploads lost on the channel (not counted in the cost).
    pub lost_bits: u64,
}

/// Delivery predicate: `(client id, payload bits) -> reached the server`.
pub type Uplink<'a> = dyn Fn(usize, u64) -> bool + Sync + 'a;

/// Every upload succeeds.
pub fn ideal_uplink(_: usize, _: u64) -> bool {
    true
}

/// `m` distinct ids drawn uniformly without replacement from `[0, N)`,
/// returned in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Vec<usize>> {
    if m == 0 || m > n {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= m <= N, got m = {m}, N = {n}"
        )));
    }
    let mut ids = index::sample(rng, n, m).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Per-round record of the JSON-lines round trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrace {
    pub round: usize,
    /// Clients sampled before any allocation drop.
    pub sampled: usize,
    pub active: Vec<usize>,
    pub local_steps: Vec<usize>,
    pub bits: Vec<u32>,
    pub delivered: Vec<usize>,
    pub uplink_bits: u64,
    pub train_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

pub fn write_round_trace(path: &Path, rows: &[RoundTrace]) -> Result<()> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}
