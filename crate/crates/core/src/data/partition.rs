use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};

use super::{DataError, Dataset};
use crate::seed;

const MAX_DRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq)]
pub enum PartitionMode {
    Iid,
    /// Per-class client proportions drawn from a symmetric Dirichlet.
    Dirichlet { alpha: f64 },
    /// Caller-provided index lists, one per client.
    Natural { indices: Vec<Vec<usize>> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSpec {
    pub mode: PartitionMode,
    pub n_clients: usize,
    pub seed: u64,
}

/// Splits `dataset` into `n_clients` disjoint shards that cover it.
pub fn partition(dataset: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>, DataError> {
    let n = spec.n_clients;
    if n == 0 {
        return Err(DataError::Validation("n_clients must be positive".into()));
    }
    if dataset.len() < n {
        return Err(DataError::Validation(format!("{} samples cannot cover {n} clients", dataset.len())));
    }
    let shards = match &spec.mode {
        PartitionMode::Iid => iid(dataset.len(), n, spec.seed),
        PartitionMode::Dirichlet { alpha } => dirichlet(dataset, n, *alpha, spec.seed)?,
        PartitionMode::Natural { indices } => natural(dataset.len(), n, indices)?,
    };
    Ok(shards.iter().map(|idx| dataset.subset(idx)).collect())
}

fn iid(len: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut seed::rng(seed, &[0x11D]));
    let (base, extra) = (len / n, len % n);
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for c in 0..n {
        let size = base + usize::from(c < extra);
        out.push(order[start..start + size].to_vec());
        start += size;
    }
    out
}

fn dirichlet(dataset: &Dataset, n: usize, alpha: f64, seed: u64) -> Result<Vec<Vec<usize>>, DataError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(DataError::Validation(format!("dirichlet alpha must be positive and finite, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| DataError::Validation(e.to_string()))?;
    let mut by_class = vec![Vec::new(); dataset.classes()];
    for (i, &l) in dataset.labels().iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = seed::rng(seed, &[0xD1C]);
    let mut empty = 0;
    for _ in 0..MAX_DRAWS {
        let mut shards = vec![Vec::new(); n];
        for members in &by_class {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let mut weights: Vec<f64> = (0..n).map(|_| gamma.sample(&mut rng)).collect();
            let total: f64 = weights.iter().sum();
            if total > 0.0 {
                weights.iter_mut().for_each(|w| *w /= total);
            } else {
                weights = vec![1.0 / n as f64; n];
            }
            let mut cum = 0.0;
            let mut start = 0;
            for (c, w) in weights.iter().enumerate() {
                cum += w;
                let end = if c + 1 == n { members.len() } else { ((cum * members.len() as f64).round() as usize).clamp(start, members.len()) };
                shards[c].extend_from_slice(&members[start..end]);
                start = end;
            }
        }
        match shards.iter().position(Vec::is_empty) {
            Some(c) => empty = c,
            None => {
                shards.iter_mut().for_each(|s| s.sort_unstable());
                return Ok(shards);
            }
        }
    }
    Err(DataError::EmptyShard { client: empty, attempts: MAX_DRAWS })
}

fn natural(len: usize, n: usize, indices: &[Vec<usize>]) -> Result<Vec<Vec<usize>>, DataError> {
    if indices.len() != n {
        return Err(DataError::Validation(format!("{} index lists for {n} clients", indices.len())));
    }
    let mut seen = vec![false; len];
    for (c, list) in indices.iter().enumerate() {
        if list.is_empty() {
            return Err(DataError::Validation(format!("client {c} has an empty index list")));
        }
        for &i in list {
            if i >= len {
                return Err(DataError::Validation(format!("index {i} out of range for {len} samples")));
            }
            if std::mem::replace(&mut seen[i], true) {
                return Err(DataError::Validation(format!("index {i} assigned twice")));
            }
        }
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        return Err(DataError::Validation(format!("index {i} not assigned to any client")));
    }
    Ok(indices.to_vec())
}
