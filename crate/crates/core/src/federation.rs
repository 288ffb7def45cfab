//! The server loop: every round all clients train on their own copy of the global model,
//! the server averages the replicas, and metrics are collected at the evaluation cadence.

use serde::{Deserialize, Serialize};

use crate::data::{lda_partition, split_client, LabeledDataset, Partition, PartitionSpec, SplitFractions};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng;
use crate::searcher::{phase_of, Phase, SearchEvent, SearchSchedule};
use crate::space::{accuracy, build_supernet, count_flops, count_params, estimated_model_size, ArchMask, SupernetSpec};
use crate::trainer::{
    client_local_round, local_adaptation, server_aggregate, ClientRoundOutput, ClientState, Finetune, Mode,
    RoundContext, TrainerConfig,
};

pub const DEFAULT_EVAL_BATCH: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub spec: SupernetSpec,
    pub trainer: TrainerConfig,
    pub schedule: SearchSchedule,
    pub partition: PartitionSpec,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub rounds: usize,
    pub eval_every: usize,
    pub eval_batch: usize,
    /// Architecture for the Ditto baseline; the full supernet when absent.
    pub fixed_mask: Option<ArchMask>,
    /// Run clients on separate threads. Results do not depend on this.
    pub parallel: bool,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.trainer.validate()?;
        self.schedule.validate()?;
        self.fractions.validate()?;
        if self.partition.clients == 0 {
            return Err(Error::Config("at least one client is required".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be at least 1".into()));
        }
        if self.eval_batch == 0 {
            return Err(Error::Config("eval_batch must be at least 1".into()));
        }
        if self.trainer.mode == Mode::Spider && self.fractions.val <= 0.0 {
            return Err(Error::Config("the search needs a non-empty validation fraction".into()));
        }
        if let Some(mask) = &self.fixed_mask {
            mask.validate()?;
        }
        Ok(())
    }

    /// Initial architecture of every client.
    pub fn initial_mask(&self) -> ArchMask {
        match (self.trainer.mode, &self.fixed_mask) {
            (Mode::Ditto, Some(m)) => m.clone(),
            _ => ArchMask::full(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub client: usize,
    pub phase: Phase,
    /// Top-1 accuracy on the client's test split.
    pub accuracy: f64,
    pub params: usize,
    pub flops: usize,
    pub model_size_bytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub clients: Vec<ClientReport>,
    /// Search events of every round since the previous report.
    pub events: Vec<SearchEvent>,
}

impl RoundReport {
    pub fn mean_accuracy(&self) -> f64 {
        mean(self.clients.iter().map(|c| c.accuracy))
    }

    /// Population standard deviation over the clients.
    pub fn std_accuracy(&self) -> f64 {
        let m = self.mean_accuracy();
        mean(self.clients.iter().map(|c| (c.accuracy - m).powi(2))).sqrt()
    }
}

pub(crate) fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    if n == 0 {
        return 0.0;
    }
    values.sum::<f64>() / n as f64
}

#[derive(Clone, Debug)]
pub struct ClientArtifacts {
    pub client: usize,
    pub mask: ArchMask,
    pub local: ParamStore,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub mode: Mode,
    pub reports: Vec<RoundReport>,
    /// Every search event, in round then client order.
    pub events: Vec<SearchEvent>,
    pub global: ParamStore,
    pub clients: Vec<ClientArtifacts>,
}

/// The experiment's partition, drawn from `cfg.partition`.
pub fn make_partition(cfg: &RunConfig, data: &LabeledDataset) -> Result<Partition> {
    lda_partition(data.labels(), &cfg.partition)
}

/// Top-1 accuracy of `weights` under `mask` on `indices`. Evaluation only.
pub fn evaluate_client(
    weights: &ParamStore,
    mask: &ArchMask,
    spec: &SupernetSpec,
    data: &LabeledDataset,
    indices: &[usize],
    eval_batch: usize,
) -> Result<f64> {
    accuracy(weights, spec, mask, data, indices, eval_batch)
}

fn run_clients(
    clients: &mut [ClientState],
    w: &ParamStore,
    round: usize,
    ctx: &RoundContext<'_>,
    searcher: Option<&SearchSchedule>,
    parallel: bool,
) -> Result<Vec<ClientRoundOutput>> {
    if !parallel || clients.len() < 2 {
        return clients
            .iter_mut()
            .map(|c| client_local_round(c, w, round, ctx, searcher))
            .collect();
    }
    std::thread::scope(|s| {
        let handles: Vec<_> = clients
            .iter_mut()
            .map(|c| s.spawn(move || client_local_round(c, w, round, ctx, searcher)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("client thread panicked"))
            .collect()
    })
}

fn client_report(
    client: &ClientState,
    global: &ParamStore,
    cfg: &RunConfig,
    data: &LabeledDataset,
    phase: Phase,
) -> Result<ClientReport> {
    let full = ArchMask::full();
    let accuracy = match cfg.trainer.mode {
        Mode::Spider | Mode::Ditto => evaluate_client(
            &client.local,
            &client.mask,
            &cfg.spec,
            data,
            &client.split.test,
            cfg.eval_batch,
        )?,
        Mode::Fedavg => evaluate_client(global, &full, &cfg.spec, data, &client.split.test, cfg.eval_batch)?,
        Mode::LocalAdapt => {
            let ft = Finetune {
                epochs: cfg.trainer.finetune_epochs,
                lr: cfg.trainer.finetune_lr,
                batch_size: cfg.trainer.batch_size,
                seed: rng::derive_seed(cfg.seed, &[client.id as u64]),
            };
            let adapted = local_adaptation(global, &cfg.spec, &full, data, &client.split.train, ft)?;
            evaluate_client(&adapted, &full, &cfg.spec, data, &client.split.test, cfg.eval_batch)?
        }
    };
    Ok(ClientReport {
        client: client.id,
        phase,
        accuracy,
        params: count_params(&client.mask, &cfg.spec),
        flops: count_flops(&client.mask, &cfg.spec),
        model_size_bytes: estimated_model_size(&client.mask, &cfg.spec),
    })
}

fn client_phase(client: &ClientState, cfg: &RunConfig, round: usize) -> Phase {
    match cfg.trainer.mode {
        Mode::Spider => phase_of(round, &cfg.schedule, client.unsearched.len()),
        _ => Phase::Fixed,
    }
}

/// Runs `cfg.rounds` rounds on `partition`. Errors abort the run and name the failing round.
pub fn run_federation(cfg: &RunConfig, data: &LabeledDataset, partition: &Partition) -> Result<RunOutput> {
    cfg.validate()?;
    if data.image_shape() != cfg.spec.input_shape {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the supernet expects {:?}",
            data.image_shape(),
            cfg.spec.input_shape
        )));
    }
    if data.classes() != cfg.spec.num_classes {
        return Err(Error::Config(format!(
            "dataset has {} classes but the supernet has {}",
            data.classes(),
            cfg.spec.num_classes
        )));
    }
    if partition.clients.len() != cfg.partition.clients {
        return Err(Error::Config(format!(
            "partition has {} clients, config expects {}",
            partition.clients.len(),
            cfg.partition.clients
        )));
    }
    partition.validate(data.len())?;

    let mut w = build_supernet(&cfg.spec, cfg.seed)?;
    let mode = cfg.trainer.mode;
    let mut clients = partition
        .clients
        .iter()
        .enumerate()
        .map(|(k, idx)| {
            let split = split_client(
                idx,
                cfg.fractions,
                rng::derive_seed(cfg.seed, &[rng::TAG_SPLIT, k as u64]),
            )?;
            ClientState::new(k, &w, cfg.initial_mask(), split, cfg.seed, mode.has_local_model())
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(c) = clients.iter().find(|c| c.split.test.is_empty()) {
        return Err(Error::Split(format!("client {} has an empty test split", c.id)));
    }
    if mode == Mode::Spider {
        if let Some(c) = clients.iter().find(|c| c.split.val.is_empty()) {
            return Err(Error::Split(format!("client {} has an empty validation split", c.id)));
        }
    }

    let searcher = (mode == Mode::Spider).then_some(&cfg.schedule);
    let mut reports = Vec::new();
    let mut events = Vec::new();
    let mut pending = Vec::new();
    let mut prev_phase: Vec<Option<Phase>> = vec![None; clients.len()];
    for round in 0..cfg.rounds {
        let mut step = || -> Result<Option<RoundReport>> {
            let ctx = RoundContext {
                spec: &cfg.spec,
                cfg: &cfg.trainer,
                data,
                seed: cfg.seed,
                eval_batch: cfg.eval_batch,
            };
            let outputs = run_clients(&mut clients, &w, round, &ctx, searcher, cfg.parallel)?;
            let mut replicas = Vec::with_capacity(outputs.len());
            for (c, out) in clients.iter().zip(outputs) {
                if let Some(e) = out.event {
                    events.push(e.clone());
                    pending.push(e);
                }
                replicas.push((out.replica, c.num_samples()));
            }
            w = server_aggregate(&replicas)?;

            let phases: Vec<Phase> = clients.iter().map(|c| client_phase(c, cfg, round)).collect();
            let transition = phases.iter().zip(&prev_phase).any(|(p, q)| q.is_some_and(|q| q != *p));
            prev_phase = phases.iter().copied().map(Some).collect();
            let due = (round + 1) % cfg.eval_every == 0 || round + 1 == cfg.rounds || transition;
            if !due {
                return Ok(None);
            }
            let client_reports = clients
                .iter()
                .zip(&phases)
                .map(|(c, &p)| client_report(c, &w, cfg, data, p))
                .collect::<Result<Vec<_>>>()?;
            Ok(Some(RoundReport {
                round,
                clients: client_reports,
                events: std::mem::take(&mut pending),
            }))
        };
        match step() {
            Ok(Some(r)) => reports.push(r),
            Ok(None) => {}
            Err(e) => {
                return Err(Error::Round {
                    round,
                    source: Box::new(e),
                })
            }
        }
    }
    Ok(RunOutput {
        mode,
        reports,
        events,
        global: w,
        clients: clients
            .into_iter()
            .map(|c| ClientArtifacts {
                client: c.id,
                mask: c.mask,
                local: c.local,
            })
            .collect(),
    })
}
