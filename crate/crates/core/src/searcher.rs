//! Three-phase progressive search: warm-up on the full supernet, then one edge finalized
//! every `tau` rounds by validation-accuracy perturbation, then plain training.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::space::{accuracy, ArchMask, CellKind, OpKind, SupernetSpec};
use crate::trainer::{reassign_local_after_mask_change, ClientState, RoundContext};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSchedule {
    /// First round at which a search event may fire.
    pub warmup_rounds: usize,
    /// Rounds between consecutive search events.
    pub tau: usize,
}

impl SearchSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        Ok(())
    }

    pub fn fires(&self, round: usize, unsearched: usize) -> bool {
        round >= self.warmup_rounds && round.is_multiple_of(self.tau) && unsearched > 0
    }

    /// Round of the last search event for `edges` unsearched edges.
    pub fn last_event(&self, edges: usize) -> Option<usize> {
        let first = self.warmup_rounds.div_ceil(self.tau) * self.tau;
        edges.checked_sub(1).map(|n| first + n * self.tau)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Search,
    FinalTrain,
    /// Baselines with a fixed architecture.
    Fixed,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Search => "search",
            Phase::FinalTrain => "final_train",
            Phase::Fixed => "fixed",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Phase of a round given the number of edges still unsearched after that round's search event.
pub fn phase_of(round: usize, schedule: &SearchSchedule, unsearched: usize) -> Phase {
    if round < schedule.warmup_rounds {
        Phase::Warmup
    } else if unsearched > 0 {
        Phase::Search
    } else {
        Phase::FinalTrain
    }
}

/// Validation accuracy of the child with each active op of one edge removed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationScore {
    pub kind: CellKind,
    pub edge: usize,
    pub scores: Vec<(OpKind, f64)>,
}

/// The decision for one cell kind within a search event. `scores` is empty when the
/// edge had a single active op and was finalized without evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeDecision {
    pub kind: CellKind,
    pub scores: Vec<(OpKind, f64)>,
    pub kept: OpKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchEvent {
    pub round: usize,
    pub client: usize,
    pub edge: usize,
    pub decisions: Vec<EdgeDecision>,
}

/// Top-1 validation accuracy of `mask` with `op` removed from `edge`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_without_op(
    mask: &ArchMask,
    kind: CellKind,
    edge: usize,
    op: OpKind,
    weights: &ParamStore,
    spec: &SupernetSpec,
    data: &LabeledDataset,
    val: &[usize],
    eval_batch: usize,
) -> Result<f64> {
    let child = mask.without(kind, edge, op)?;
    accuracy(weights, spec, &child, data, val, eval_batch)
}

/// The op whose removal hurts most (lowest accuracy without it); ties keep the lowest op index.
pub fn select_operation(score: &PerturbationScore) -> Result<OpKind> {
    let mut best: Option<(OpKind, f64)> = None;
    for &(op, acc) in &score.scores {
        if acc.is_nan() {
            return Err(Error::Usage(format!("score for {op} is NaN")));
        }
        best = match best {
            Some((b, a)) if a < acc || (a == acc && b.index() < op.index()) => Some((b, a)),
            _ => Some((op, acc)),
        };
    }
    best.map(|(op, _)| op)
        .ok_or_else(|| Error::Usage(format!("no scores for edge {}", score.edge)))
}

/// Scores every active op of `edge` in one cell kind.
#[allow(clippy::too_many_arguments)]
pub fn score_edge(
    mask: &ArchMask,
    kind: CellKind,
    edge: usize,
    weights: &ParamStore,
    spec: &SupernetSpec,
    data: &LabeledDataset,
    val: &[usize],
    eval_batch: usize,
) -> Result<PerturbationScore> {
    let scores = mask
        .active_ops(kind, edge)
        .into_iter()
        .map(|op| {
            Ok((
                op,
                evaluate_without_op(mask, kind, edge, op, weights, spec, data, val, eval_batch)?,
            ))
        })
        .collect::<Result<_>>()?;
    Ok(PerturbationScore { kind, edge, scores })
}

/// Runs the search gate for one client round. When it fires, a random unsearched edge is
/// finalized in both cell kinds (each scored independently) and the client's local
/// parameters of the removed ops are dropped.
pub fn progressive_nas(
    client: &mut ClientState,
    schedule: &SearchSchedule,
    round: usize,
    ctx: &RoundContext<'_>,
) -> Result<Option<SearchEvent>> {
    if !schedule.fires(round, client.unsearched.len()) {
        return Ok(None);
    }
    let pick = client.search_rng.random_range(0..client.unsearched.len());
    let edge = client.unsearched.remove(pick);
    let mut new_mask = client.mask.clone();
    let mut decisions = Vec::with_capacity(CellKind::ALL.len());
    for kind in CellKind::ALL {
        let active = client.mask.active_ops(kind, edge);
        let (scores, kept) = if active.len() == 1 {
            (Vec::new(), active[0])
        } else {
            let score = score_edge(
                &client.mask,
                kind,
                edge,
                &client.local,
                ctx.spec,
                ctx.data,
                &client.split.val,
                ctx.eval_batch,
            )?;
            let kept = select_operation(&score)?;
            (score.scores, kept)
        };
        new_mask.keep_only(kind, edge, kept)?;
        decisions.push(EdgeDecision { kind, scores, kept });
    }
    client.local = reassign_local_after_mask_change(&client.local, &client.mask, &new_mask)?;
    client.mask = new_mask;
    Ok(Some(SearchEvent {
        round,
        client: client.id,
        edge,
        decisions,
    }))
}
