//! Experiment driver: data preparation, per-round orchestration (client
//! sampling, channel draws, allocation, protocol round) and evaluation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;

use super::config::{Algorithm, DatasetConfig, ExperimentConfig, PartitionKind, WirelessConfig};
use super::metrics::{evaluate, MetricsRow};
use crate::alloc::{solve_alloc, AllocProblem};
use crate::data::{iid_partition, load_mnist_idx, shard_partition, Dataset, Partition, SyntheticTask};
use crate::error::{Error, Result};
use crate::fed::{
    run_round_fedavg, run_round_fedqvr, run_round_scaffold, sample_clients, write_round_trace, ClientPlan,
    ClientState, Federation, RoundPlan, RoundReport, RoundTrace, ServerState,
};
use crate::learner::{init_params, loss, ModelSpec, ParamVector};
use crate::rng::{self, tag};
use crate::wireless::{place_devices, sample_channel, transmission_ok, ChannelRecord, ChannelTrace};

/// Data, partition and initial model of one experiment.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    pub partition: Partition,
    pub theta0: ParamVector,
}

impl Prepared {
    /// Every training sample held by some client.
    pub fn train_pool(&self) -> Vec<usize> {
        let mut pool: Vec<usize> = self.partition.assignments.concat();
        pool.sort_unstable();
        pool
    }
}

/// Builds the datasets, partition and initial parameters; all randomness is
/// keyed on `cfg.seed`.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let (train, test) = match &cfg.dataset {
        DatasetConfig::Mnist {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } => (
            load_mnist_idx(train_images, train_labels)?,
            load_mnist_idx(test_images, test_labels)?,
        ),
        DatasetConfig::Synthetic {
            num_classes,
            dim,
            train_per_class,
            test_per_class,
            separation,
        } => {
            let task = SyntheticTask::new(
                *num_classes,
                *dim,
                *separation,
                &mut rng::stream(cfg.seed, &[tag::DATA, 0]),
            )?;
            (
                task.sample(*train_per_class, &mut rng::stream(cfg.seed, &[tag::DATA, 1]))?,
                task.sample(*test_per_class, &mut rng::stream(cfg.seed, &[tag::DATA, 2]))?,
            )
        }
    };
    if train.dim() != test.dim() {
        return Err(Error::DimensionMismatch {
            expected: train.dim(),
            actual: test.dim(),
        });
    }
    let num_classes = train.num_classes().max(test.num_classes());
    let spec = cfg.model_spec(train.dim(), num_classes);
    spec.validate()?;
    let mut prng = rng::stream(cfg.seed, &[tag::PARTITION]);
    let partition = match cfg.partition {
        PartitionKind::Shards => shard_partition(&train, cfg.num_clients, cfg.labels_per_client, &mut prng)?,
        PartitionKind::Iid => iid_partition(&train, cfg.num_clients, &mut prng)?,
    };
    let theta0 = init_params(&spec, &mut rng::stream(cfg.seed, &[tag::INIT]));
    Ok(Prepared {
        spec,
        train,
        test,
        partition,
        theta0,
    })
}

/// Full record of a run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<MetricsRow>,
    pub rounds: Vec<RoundTrace>,
    pub final_state: ServerState,
    /// Channel gains used (wireless mode only).
    pub channels: ChannelTrace,
}

impl RunOutput {
    /// Total sampled client slots and the number whose update never reached
    /// the server.
    pub fn drop_totals(&self) -> (usize, usize) {
        let mut sampled = 0;
        let mut dropped = 0;
        for r in &self.rounds {
            sampled += r.sampled;
            dropped += r.sampled - r.delivered.len();
        }
        (sampled, dropped)
    }
}

/// Runs `cfg` and returns its metrics rows.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    run_detailed(cfg).map(|o| o.rows)
}

struct Channels {
    distances: Vec<f64>,
    replay: Option<ChannelTrace>,
    used: ChannelTrace,
}

impl Channels {
    fn new(cfg: &ExperimentConfig, w: &WirelessConfig) -> Result<Self> {
        let distances = place_devices(
            cfg.num_clients,
            w.r_min_m,
            w.r_max_m,
            &mut rng::stream(cfg.seed, &[tag::PLACEMENT]),
        );
        let replay = w.trace_in.as_deref().map(ChannelTrace::read_jsonl).transpose()?;
        Ok(Channels {
            distances,
            replay,
            used: ChannelTrace::default(),
        })
    }

    fn gain(&mut self, seed: u64, w: &WirelessConfig, round: usize, device: usize) -> Result<f64> {
        let rec = match &self.replay {
            Some(trace) => *trace.get(round, device).ok_or_else(|| {
                Error::config(
                    "wireless.trace_in",
                    format!("no channel recorded for round {round}, device {device}"),
                )
            })?,
            None => {
                let draw = sample_channel(
                    self.distances[device],
                    &w.link,
                    &mut rng::stream(seed, &[tag::FADING, round as u64, device as u64]),
                );
                ChannelRecord {
                    round,
                    device,
                    distance_m: draw.distance_m,
                    gain: draw.gain,
                }
            }
        };
        self.used.insert(rec);
        Ok(rec.gain)
    }
}

fn local_steps_for(cfg: &ExperimentConfig, round: usize, id: usize) -> usize {
    if cfg.hlu {
        let [lo, hi] = cfg.hlu_range;
        rng::stream(cfg.seed, &[tag::LOCAL_STEPS, round as u64, id as u64]).random_range(lo..=hi)
    } else {
        cfg.local_steps
    }
}

/// Runs `cfg` and keeps per-round traces and the final state.
pub fn run_detailed(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let start = Instant::now();
    let prep = prepare(cfg)?;
    let fed = Federation {
        spec: prep.spec,
        data: &prep.train,
        partition: &prep.partition,
        quantizer: cfg.quantizer,
        seed: cfg.seed,
        parallel: cfg.parallel,
    };
    let d = prep.spec.num_params();
    let mu = cfg
        .quantizer
        .aux_bits(cfg.quantizer.groups(&fed.layout(), d).len());
    let train_pool = prep.train_pool();
    let mut server = ServerState::new(prep.theta0.clone());
    let mut clients = ClientState::for_partition(&prep.partition, d);
    let mut channels = cfg.wireless.as_ref().map(|w| Channels::new(cfg, w)).transpose()?;

    let eval = |theta: &[f64]| -> Result<(f64, f64)> {
        let train_loss = loss(&prep.spec, theta, &prep.train, &train_pool)?;
        if !train_loss.is_finite() {
            return Err(Error::Divergence(format!("training loss became {train_loss}")));
        }
        let (acc, _) = evaluate(&prep.spec, theta, &prep.test)?;
        Ok((train_loss, acc))
    };

    let mut rows = Vec::new();
    let mut rounds = Vec::with_capacity(cfg.rounds);
    let (l0, a0) = eval(&server.theta)?;
    rows.push(MetricsRow {
        round: 0,
        train_loss: l0,
        test_accuracy: a0,
        cumulative_uplink_bits: 0,
        active_count: 0,
        dropped_count: 0,
        wall_seconds: start.elapsed().as_secs_f64(),
    });
    let mut cumulative = 0u64;

    for r in 0..cfg.rounds {
        let sampled = sample_clients(
            cfg.num_clients,
            cfg.clients_per_round,
            &mut rng::stream(cfg.seed, &[tag::SAMPLE_CLIENTS, r as u64]),
        )?;
        let mut plan = RoundPlan {
            clients: sampled
                .iter()
                .map(|&id| ClientPlan {
                    id,
                    local_steps: local_steps_for(cfg, r, id),
                    bits: cfg.bits,
                })
                .collect(),
            sampled: sampled.len(),
            batch_size: cfg.batch_size,
            eta: if cfg.algorithm == Algorithm::Scaffold {
                cfg.eta_local()
            } else {
                cfg.eta
            },
            gamma: cfg.gamma.unwrap_or(0.0),
            a: cfg.a.unwrap_or(0.0),
            eta_global: cfg.eta_g,
        };

        // per-device bandwidth and gain for the delivery check
        let mut link: BTreeMap<usize, (f64, f64)> = BTreeMap::new();
        if let (Some(w), Some(ch)) = (&cfg.wireless, channels.as_mut()) {
            let gains = sampled
                .iter()
                .map(|&id| ch.gain(cfg.seed, w, r, id))
                .collect::<Result<Vec<_>>>()?;
            if cfg.algorithm == Algorithm::FedQvrE {
                let p = w.link.tx_power_w();
                let problem = AllocProblem {
                    gains: gains.iter().map(|g| p * g).collect(),
                    taus: vec![w.tau_s; sampled.len()],
                    w_total: w.link.total_bandwidth_hz,
                    alpha: w.alpha,
                    d: d as u64,
                    mu,
                    noise_psd: w.link.noise_psd_w_hz(),
                    b_lower: w.b_lower,
                    log_base: w.link.log_base,
                };
                let sol = solve_alloc(&problem)?;
                plan.clients = sol
                    .kept()
                    .map(|k| ClientPlan {
                        bits: sol.bits_floored[k].min(w.b_max),
                        ..plan.clients[k]
                    })
                    .collect();
                for k in sol.kept() {
                    link.insert(sampled[k], (sol.bandwidths[k], gains[k]));
                }
            } else {
                let share = w.link.total_bandwidth_hz / sampled.len() as f64;
                for (k, &id) in sampled.iter().enumerate() {
                    link.insert(id, (share, gains[k]));
                }
            }
        }
        let wireless = cfg.wireless.clone();
        let uplink = move |id: usize, bits: u64| -> bool {
            match &wireless {
                None => true,
                Some(w) => link
                    .get(&id)
                    .is_some_and(|&(bw, g)| transmission_ok(bits, bw, &w.link, g, w.tau_s)),
            }
        };

        let (next, report): (ServerState, RoundReport) = match cfg.algorithm {
            Algorithm::FedAvg => run_round_fedavg(&fed, &server, &plan, &uplink)?,
            Algorithm::Scaffold => run_round_scaffold(&fed, &server, &mut clients, &plan, &uplink)?,
            Algorithm::FedQvr | Algorithm::FedQvrE => {
                run_round_fedqvr(&fed, &server, &mut clients, &plan, &uplink)?
            }
        };
        server = next;
        cumulative += report.uplink_bits;

        let done = r + 1;
        let evaluate_now = done % cfg.eval_every == 0 || done == cfg.rounds;
        let (train_loss, test_accuracy) = if evaluate_now {
            let (l, a) = eval(&server.theta)?;
            (Some(l), Some(a))
        } else {
            (None, None)
        };
        if let (Some(l), Some(a)) = (train_loss, test_accuracy) {
            rows.push(MetricsRow {
                round: done,
                train_loss: l,
                test_accuracy: a,
                cumulative_uplink_bits: cumulative,
                active_count: report.active.len(),
                dropped_count: sampled.len() - report.delivered.len(),
                wall_seconds: start.elapsed().as_secs_f64(),
            });
        }
        rounds.push(RoundTrace {
            round: report.round,
            sampled: sampled.len(),
            active: report.active,
            local_steps: report.local_steps,
            bits: report.bits,
            delivered: report.delivered,
            uplink_bits: report.uplink_bits,
            train_loss,
            test_accuracy,
        });
    }

    let channels = channels.map(|c| c.used).unwrap_or_default();
    if let Some(path) = cfg.wireless.as_ref().and_then(|w| w.trace_out.as_deref()) {
        channels.write_jsonl(path)?;
    }
    if let Some(path) = cfg.outputs.round_trace.as_deref() {
        write_round_trace(path, &rounds)?;
    }
    let out = RunOutput {
        rows,
        rounds,
        final_state: server,
        channels,
    };
    if let Some(path) = cfg.outputs.metrics_csv.as_deref() {
        super::metrics::write_metrics_csv_opts(&out.rows, path, cfg.outputs.timing)?;
    }
    Ok(out)
}
