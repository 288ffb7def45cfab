//! Per-client alternating updates of the global supernet and the regularized local child,
//! and the server-side weighted average.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, LabeledDataset};
use crate::error::{Error, Result};
use crate::params::{sgd_step, ParamStore};
use crate::rng;
use crate::searcher::{self, SearchEvent, SearchSchedule};
use crate::space::{loss_and_grads, mask_weights, parse_edge_param, ArchMask, SupernetSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Private search plus regularized local training.
    Spider,
    /// Regularized local training on a fixed architecture.
    Ditto,
    /// Global model only, evaluated with the full supernet.
    Fedavg,
    /// FedAvg training; each client fine-tunes a copy of the global model before evaluation.
    LocalAdapt,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Spider, Mode::Ditto, Mode::Fedavg, Mode::LocalAdapt];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Spider => "spider",
            Mode::Ditto => "ditto",
            Mode::Fedavg => "fedavg",
            Mode::LocalAdapt => "local-adapt",
        }
    }

    /// Whether clients keep a regularized local model.
    pub fn has_local_model(self) -> bool {
        matches!(self, Mode::Spider | Mode::Ditto)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown mode `{s}` (spider, ditto, fedavg, local-adapt)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    pub eta_w: f32,
    pub eta_v: f32,
    pub lambda: f32,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub mode: Mode,
    pub finetune_epochs: usize,
    pub finetune_lr: f32,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            eta_w: 0.05,
            eta_v: 0.05,
            lambda: 0.1,
            local_epochs: 1,
            batch_size: 32,
            mode: Mode::Spider,
            finetune_epochs: 1,
            finetune_lr: 0.05,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f32| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        positive("eta_w", self.eta_w)?;
        positive("eta_v", self.eta_v)?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.finetune_lr < 0.0 || !self.finetune_lr.is_finite() {
            return Err(Error::Config(format!(
                "finetune_lr must be >= 0, got {}",
                self.finetune_lr
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Everything a client owns. Nothing here is sent to the server.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    /// Local child weights `v_k`; empty for modes without a local model.
    pub local: ParamStore,
    pub mask: ArchMask,
    /// Edge indices not yet searched (shared by both cell kinds).
    pub unsearched: Vec<usize>,
    pub split: ClientSplit,
    pub search_rng: ChaCha8Rng,
}

impl ClientState {
    /// A client whose local model starts as the projection of `w_init` onto `mask`.
    pub fn new(
        id: usize,
        w_init: &ParamStore,
        mask: ArchMask,
        split: ClientSplit,
        seed: u64,
        with_local: bool,
    ) -> Result<Self> {
        if split.train.is_empty() {
            return Err(Error::Split(format!("client {id} has no training samples")));
        }
        let local = if with_local {
            mask_weights(w_init, &mask)?
        } else {
            ParamStore::new()
        };
        let unsearched = (0..crate::space::EDGES_PER_CELL)
            .filter(|&e| crate::space::CellKind::ALL.iter().any(|&k| !mask.is_finalized(k, e)))
            .collect();
        Ok(ClientState {
            id,
            local,
            mask,
            unsearched,
            split,
            search_rng: rng::stream(seed, &[rng::TAG_SEARCH, id as u64]),
        })
    }

    /// Aggregation weight `N_k`: the number of local training samples.
    pub fn num_samples(&self) -> usize {
        self.split.train.len()
    }
}

/// Shuffled minibatches of the training split for one epoch.
pub fn epoch_batches(
    train: &[usize],
    batch_size: usize,
    seed: u64,
    client: usize,
    round: usize,
    epoch: usize,
) -> Vec<Vec<usize>> {
    let mut order = train.to_vec();
    order.shuffle(&mut rng::stream(
        seed,
        &[rng::TAG_BATCHES, client as u64, round as u64, epoch as u64],
    ));
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// `v <- v - eta_v * (g + lambda * (v - w_share))`. A parameter without a data gradient
/// receives only the proximal term.
pub fn regularized_step(
    v: &mut ParamStore,
    grads: &ParamStore,
    w_share: &ParamStore,
    lambda: f32,
    eta_v: f32,
) -> Result<()> {
    if !v.same_names(w_share) {
        return Err(Error::Invariant(format!(
            "local model has {} tensors but the shared projection has {}",
            v.len(),
            w_share.len()
        )));
    }
    for (name, p) in v.iter_mut() {
        let anchor = w_share.get(name).expect("name sets are equal");
        if anchor.shape() != p.shape() {
            return Err(Error::Invariant(format!("shape mismatch on `{name}`")));
        }
        let g = grads.get(name);
        if let Some(g) = g {
            if g.shape() != p.shape() {
                return Err(Error::Usage(format!("gradient shape mismatch on `{name}`")));
            }
        }
        for (i, (x, a)) in p.data_mut().iter_mut().zip(anchor.data()).enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            *x -= eta_v * (gi + lambda * (*x - a));
        }
    }
    for name in grads.names() {
        if !v.contains(name) {
            return Err(Error::Usage(format!("gradient for unknown parameter `{name}`")));
        }
    }
    Ok(())
}

/// Drops the local parameters of operations that `new` removed; every other value is kept.
pub fn reassign_local_after_mask_change(v: &ParamStore, old: &ArchMask, new: &ArchMask) -> Result<ParamStore> {
    if !new.is_subset_of(old) {
        return Err(Error::Usage("new mask is not a subset of the old mask".into()));
    }
    let mut out = ParamStore::new();
    for (name, t) in v {
        let keep = match parse_edge_param(name)? {
            Some((kind, edge, op)) => new.is_active(kind, edge, op),
            None => true,
        };
        if keep {
            out.insert(name.clone(), t.clone());
        }
    }
    Ok(out)
}

/// Shared inputs of a client round.
pub struct RoundContext<'a> {
    pub spec: &'a SupernetSpec,
    pub cfg: &'a TrainerConfig,
    pub data: &'a LabeledDataset,
    pub seed: u64,
    pub eval_batch: usize,
}

/// Result of one client round: the updated global replica and any search event.
pub struct ClientRoundOutput {
    pub replica: ParamStore,
    pub event: Option<SearchEvent>,
}

/// One round on one client. The searcher runs once at the start of the round when given;
/// then for every minibatch the global replica takes a full-supernet SGD step and, when the
/// mode keeps a local model, the local child takes a step regularized towards the
/// projection of the freshly updated replica.
pub fn client_local_round(
    client: &mut ClientState,
    w_global: &ParamStore,
    round: usize,
    ctx: &RoundContext<'_>,
    searcher: Option<&SearchSchedule>,
) -> Result<ClientRoundOutput> {
    let event = match searcher {
        Some(schedule) => searcher::progressive_nas(client, schedule, round, ctx)?,
        None => None,
    };
    let full = ArchMask::full();
    let mut w = w_global.clone();
    for epoch in 0..ctx.cfg.local_epochs {
        for batch in epoch_batches(
            &client.split.train,
            ctx.cfg.batch_size,
            ctx.seed,
            client.id,
            round,
            epoch,
        ) {
            let (images, labels) = ctx.data.gather(&batch)?;
            let (_, gw) = loss_and_grads(&w, ctx.spec, &full, images.clone(), &labels)?;
            sgd_step(&mut w, &gw, ctx.cfg.eta_w)?;
            if ctx.cfg.mode.has_local_model() {
                let w_share = mask_weights(&w, &client.mask)?;
                let (_, gv) = loss_and_grads(&client.local, ctx.spec, &client.mask, images, &labels)?;
                regularized_step(&mut client.local, &gv, &w_share, ctx.cfg.lambda, ctx.cfg.eta_v)?;
            }
        }
    }
    Ok(ClientRoundOutput { replica: w, event })
}

/// The Ditto baseline: the same round with the client's architecture frozen.
pub fn ditto_round(
    client: &mut ClientState,
    w_global: &ParamStore,
    round: usize,
    ctx: &RoundContext<'_>,
) -> Result<ClientRoundOutput> {
    client_local_round(client, w_global, round, ctx, None)
}

/// `sum_k (N_k / N) w_k`, accumulated in f64 in the given (ascending client) order.
pub fn server_aggregate(replicas: &[(ParamStore, usize)]) -> Result<ParamStore> {
    let (first, _) = replicas
        .first()
        .ok_or_else(|| Error::Aggregation("no replicas to aggregate".into()))?;
    let total: usize = replicas.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Err(Error::Aggregation("total sample count is zero".into()));
    }
    for (k, (w, _)) in replicas.iter().enumerate() {
        if !w.same_names(first) {
            return Err(Error::Aggregation(format!("replica {k} has a different parameter set")));
        }
    }
    let mut out = ParamStore::new();
    for (name, t) in first {
        let mut acc = vec![0f64; t.numel()];
        for (w, n) in replicas {
            let x = w.get(name).expect("name sets are equal");
            if x.shape() != t.shape() {
                return Err(Error::Aggregation(format!("shape mismatch on `{name}`")));
            }
            for (a, &v) in acc.iter_mut().zip(x.data()) {
                *a += *n as f64 * v as f64;
            }
        }
        let data = acc.into_iter().map(|a| (a / total as f64) as f32).collect();
        out.insert(name.clone(), crate::autograd::Tensor::new(t.shape().to_vec(), data)?);
    }
    Ok(out)
}

/// Fine-tuning schedule for the local-adaptation baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Finetune {
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
    pub seed: u64,
}

/// Plain-SGD fine-tuning of a copy of the global model on the client's training split.
pub fn local_adaptation(
    w_final: &ParamStore,
    spec: &SupernetSpec,
    mask: &ArchMask,
    data: &LabeledDataset,
    train: &[usize],
    ft: Finetune,
) -> Result<ParamStore> {
    let mut w = w_final.clone();
    for epoch in 0..ft.epochs {
        let mut order = train.to_vec();
        order.shuffle(&mut rng::stream(ft.seed, &[rng::TAG_FINETUNE, epoch as u64]));
        for batch in order.chunks(ft.batch_size.max(1)) {
            let (images, labels) = data.gather(batch)?;
            let (_, g) = loss_and_grads(&w, spec, mask, images, &labels)?;
            sgd_step(&mut w, &g, ft.lr)?;
        }
    }
    Ok(w)
}
