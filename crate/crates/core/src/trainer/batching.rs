use serde::{Deserialize, Serialize};

use crate::numcore::rng::Rng;

use super::TrainError;

pub const DEFAULT_TOKEN_BUDGET: usize = 4096;
pub const DEFAULT_SPREAD: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub ids: Vec<usize>,
    pub max_len: usize,
    /// Sum of member lengths.
    pub tokens: usize,
}

impl Batch {
    fn from_ids(ids: Vec<usize>, lengths: &[usize]) -> Self {
        let max_len = ids.iter().map(|&i| lengths[i]).max().unwrap_or(0);
        let tokens = ids.iter().map(|&i| lengths[i]).sum();
        Self { ids, max_len, tokens }
    }

    /// Slots occupied once every member is padded to the batch maximum.
    pub fn padded(&self) -> usize {
        self.ids.len() * self.max_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub budget: usize,
    pub spread: f64,
}

impl BatchPlan {
    /// Fraction of padded slots that hold no real token.
    pub fn waste(&self) -> f64 {
        waste(&self.batches)
    }
}

pub fn waste(batches: &[Batch]) -> f64 {
    let padded: usize = batches.iter().map(Batch::padded).sum();
    if padded == 0 {
        return 0.0;
    }
    let real: usize = batches.iter().map(|b| b.tokens).sum();
    1.0 - real as f64 / padded as f64
}

fn check_lengths(lengths: &[usize], budget: usize) -> Result<(), TrainError> {
    let offenders: Vec<(usize, usize)> =
        lengths.iter().enumerate().filter(|(_, &l)| l > budget || l == 0).map(|(i, &l)| (i, l)).collect();
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(TrainError::OverBudget { budget, offenders })
    }
}

/// Length-bucketed batches under a token budget.
///
/// Samples are taken longest first (ties in seeded random order). A batch
/// opened by a sample of length `M` keeps taking the next samples while they
/// are at least `M / spread` long and the batch holds fewer than
/// `floor(budget / M)` samples. Batch order is then shuffled with `seed`.
pub fn plan_batches(lengths: &[usize], budget: usize, spread: f64, seed: u64) -> Result<BatchPlan, TrainError> {
    if !(spread >= 1.0) {
        return Err(TrainError::Config(format!("spread {spread} must be at least 1")));
    }
    check_lengths(lengths, budget)?;
    let mut rng = Rng::seed(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    rng.shuffle(&mut order);
    order.sort_by(|&a, &b| lengths[b].cmp(&lengths[a]));
    let mut batches = Vec::new();
    let mut i = 0;
    while i < order.len() {
        let max_len = lengths[order[i]];
        let capacity = budget / max_len;
        let mut ids = vec![order[i]];
        i += 1;
        while i < order.len() && ids.len() < capacity && (lengths[order[i]] as f64) * spread >= max_len as f64 {
            ids.push(order[i]);
            i += 1;
        }
        batches.push(Batch::from_ids(ids, lengths));
    }
    rng.shuffle(&mut batches);
    Ok(BatchPlan { batches, budget, spread })
}

/// Dataset-order batches of fixed size `floor(budget / longest)`.
pub fn naive_batches(lengths: &[usize], budget: usize) -> Result<Vec<Batch>, TrainError> {
    check_lengths(lengths, budget)?;
    let Some(&longest) = lengths.iter().max() else { return Ok(Vec::new()) };
    let size = budget / longest;
    let ids: Vec<usize> = (0..lengths.len()).collect();
    Ok(ids.chunks(size).map(|c| Batch::from_ids(c.to_vec(), lengths)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub samples: usize,
    pub tokens: usize,
    pub bucketed_batches: usize,
    pub bucketed_padded: usize,
    pub bucketed_waste: f64,
    pub naive_batches: usize,
    pub naive_padded: usize,
    pub naive_waste: f64,
}

pub fn throughput_report(plan: &BatchPlan, naive: &[Batch]) -> ThroughputReport {
    ThroughputReport {
        samples: plan.batches.iter().map(|b| b.ids.len()).sum(),
        tokens: plan.batches.iter().map(|b| b.tokens).sum(),
        bucketed_batches: plan.batches.len(),
        bucketed_padded: plan.batches.iter().map(Batch::padded).sum(),
        bucketed_waste: plan.waste(),
        naive_batches: naive.len(),
        naive_padded: naive.iter().map(Batch::padded).sum(),
        naive_waste: waste(naive),
    }
}
