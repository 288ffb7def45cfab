use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub clients: usize,
    /// Dirichlet concentration; smaller means more label skew.
    pub alpha: f64,
    pub seed: u64,
    /// Every client must end up with at least this many samples.
    pub min_samples: usize,
    pub max_retries: usize,
}

impl PartitionSpec {
    pub fn new(clients: usize, alpha: f64, seed: u64) -> Self {
        PartitionSpec {
            clients,
            alpha,
            seed,
            min_samples: 1,
            max_retries: 100,
        }
    }
}

/// Sample indices owned by each client; also the on-disk partition manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub alpha: f64,
    pub seed: u64,
    pub clients: Vec<Vec<usize>>,
}

impl Partition {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("partition serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("partition manifest: {e}")))
    }

    /// Checks that the manifest is a disjoint cover of `0..n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![false; n];
        for (k, idx) in self.clients.iter().enumerate() {
            if idx.is_empty() {
                return Err(Error::Partition(format!("client {k} has no samples")));
            }
            for &i in idx {
                if i >= n || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Partition(format!(
                        "sample {i} is out of range or assigned twice"
                    )));
                }
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Partition("some samples belong to no client".into()));
        }
        Ok(())
    }
}

fn draw_proportions(gamma: &Gamma<f64>, k: usize, r: &mut impl rand::Rng) -> Option<Vec<f64>> {
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(r)).collect();
    let total: f64 = draws.iter().sum();
    (total > 0.0 && total.is_finite()).then(|| draws.into_iter().map(|d| d / total).collect())
}

/// Per-class Dirichlet(alpha) allocation of sample indices to clients.
///
/// Whole draws are repeated (up to `max_retries`) until every client holds at least
/// `min_samples`; after that, samples are moved one at a time from the largest client.
pub fn lda_partition(labels: &[usize], spec: &PartitionSpec) -> Result<Partition> {
    let k = spec.clients;
    if k == 0 {
        return Err(Error::Partition("at least one client is required".into()));
    }
    if !(spec.alpha > 0.0 && spec.alpha.is_finite()) {
        return Err(Error::Partition(format!("alpha must be positive, got {}", spec.alpha)));
    }
    let min = spec.min_samples.max(1);
    if labels.len() < k * min {
        return Err(Error::Partition(format!(
            "{} samples cannot give {k} clients {min} samples each",
            labels.len()
        )));
    }
    let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
    let mut by_class = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let gamma = Gamma::new(spec.alpha, 1.0).map_err(|e| Error::Partition(format!("invalid alpha: {e}")))?;

    let mut last = None;
    for attempt in 0..spec.max_retries.max(1) {
        let mut r = rng::stream(spec.seed, &[rng::TAG_PARTITION, attempt as u64]);
        let mut assignment = vec![Vec::new(); k];
        let mut ok = true;
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut shuffled = members.clone();
            shuffled.shuffle(&mut r);
            let Some(p) = draw_proportions(&gamma, k, &mut r) else {
                ok = false;
                break;
            };
            let n = shuffled.len();
            let mut start = 0;
            let mut cum = 0.0;
            for (client, &share) in p.iter().enumerate() {
                cum += share;
                let end = if client + 1 == k {
                    n
                } else {
                    ((cum * n as f64).floor() as usize).clamp(start, n)
                };
                assignment[client].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if !ok {
            continue;
        }
        let satisfied = assignment.iter().all(|a| a.len() >= min);
        last = Some(assignment);
        if satisfied {
            break;
        }
    }
    let mut clients =
        last.ok_or_else(|| Error::Partition(format!("no valid Dirichlet draw in {} attempts", spec.max_retries)))?;
    while let Some(poor) = clients.iter().position(|a| a.len() < min) {
        let rich = (0..k)
            .max_by_key(|&c| (clients[c].len(), std::cmp::Reverse(c)))
            .expect("k >= 1");
        if clients[rich].len() <= min {
            return Err(Error::Partition(
                "retries exhausted and no client can spare a sample".into(),
            ));
        }
        let moved = clients[rich].pop().expect("non-empty");
        clients[poor].push(moved);
    }
    for c in &mut clients {
        c.sort_unstable();
    }
    Ok(Partition {
        alpha: spec.alpha,
        seed: spec.seed,
        clients,
    })
}

/// Train/validation/test fractions. Validation may be zero (baselines use 80/20).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub const SEARCH: SplitFractions = SplitFractions {
        train: 0.5,
        val: 0.3,
        test: 0.2,
    };
    pub const BASELINE: SplitFractions = SplitFractions {
        train: 0.8,
        val: 0.0,
        test: 0.2,
    };

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|f| !f.is_finite() || *f < 0.0) || self.train <= 0.0 || self.test <= 0.0 {
            return Err(Error::Split(format!(
                "train and test fractions must be positive and validation non-negative, got {self:?}"
            )));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Split(format!("fractions {self:?} do not sum to 1")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClientSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Deterministic shuffled split. Validation and test sizes are floored; the remainder trains.
pub fn split_client(indices: &[usize], fractions: SplitFractions, seed: u64) -> Result<ClientSplit> {
    fractions.validate()?;
    if indices.is_empty() {
        return Err(Error::Split("cannot split an empty client".into()));
    }
    let n = indices.len();
    let size = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
    let (n_val, n_test) = (size(fractions.val), size(fractions.test));
    let mut shuffled = indices.to_vec();
    shuffled.shuffle(&mut rng::stream(seed, &[rng::TAG_SPLIT]));
    let test = shuffled.split_off(n - n_test);
    let val = shuffled.split_off(n - n_test - n_val);
    Ok(ClientSplit {
        train: shuffled,
        val,
        test,
    })
}
