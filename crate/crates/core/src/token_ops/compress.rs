use serde::{Deserialize, Serialize};

use super::sort::ImportanceOrder;
use crate::autograd::{kernels, merge_rows_forward, Tensor};
use crate::error::{Error, Result};

/// Token indices kept and dropped by pruning, each ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PruneResult {
    pub kept: Vec<usize>,
    pub dropped: Vec<usize>,
}

/// Drops the `n_prune` lowest-ranked tokens.
pub fn prune(order: &ImportanceOrder, n_prune: usize) -> Result<PruneResult> {
    let n = order.len();
    if n_prune >= n {
        return Err(Error::Schedule(format!(
            "cannot prune {n_prune} of {n} tokens: the class token must survive"
        )));
    }
    let mut kept = order.order[..n - n_prune].to_vec();
    let mut dropped = order.order[n - n_prune..].to_vec();
    kept.sort_unstable();
    dropped.sort_unstable();
    Ok(PruneResult { kept, dropped })
}

/// One merged-away token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeEntry {
    pub source: usize,
    pub destination: usize,
    /// Tokens averaged into the destination, itself included.
    pub group_size: usize,
}

/// Merge assignments over a sequence of `original_len` tokens.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeMap {
    pub original_len: usize,
    pub entries: Vec<MergeEntry>,
}

impl MergeMap {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn build(original_len: usize, pairs: &[(usize, usize)]) -> Self {
        let mut sizes = vec![1usize; original_len];
        for &(_, d) in pairs {
            sizes[d] += 1;
        }
        let mut entries: Vec<MergeEntry> = pairs
            .iter()
            .map(|&(source, destination)| MergeEntry {
                source,
                destination,
                group_size: sizes[destination],
            })
            .collect();
        entries.sort_by_key(|e| e.source);
        Self {
            original_len,
            entries,
        }
    }

    /// Checks that sources are unique, destinations are not sources and
    /// every index is in range.
    pub fn validate(&self) -> Result<()> {
        let n = self.original_len;
        let mut is_source = vec![false; n];
        for e in &self.entries {
            if e.source >= n || e.destination >= n || e.source == e.destination {
                return Err(Error::Schedule(format!("merge entry {e:?} out of range for {n} tokens")));
            }
            if std::mem::replace(&mut is_source[e.source], true) {
                return Err(Error::Schedule(format!("token {} merged twice", e.source)));
            }
        }
        if let Some(e) = self.entries.iter().find(|e| is_source[e.destination]) {
            return Err(Error::Schedule(format!("destination {} is also a source", e.destination)));
        }
        Ok(())
    }
}

/// For each source row, the destination row with maximal cosine similarity
/// on `x`. `dests` is in rank order; ties go to the higher-ranked row.
pub fn assign_destinations(x: &Tensor, sources: &[usize], dests: &[usize]) -> Vec<usize> {
    sources
        .iter()
        .map(|&s| {
            let mut best = dests[0];
            let mut best_sim = f64::NEG_INFINITY;
            for &d in dests {
                let sim = kernels::cosine_similarity(x.row(s), x.row(d));
                if sim > best_sim {
                    best_sim = sim;
                    best = d;
                }
            }
            best
        })
        .collect()
}

/// Merges the `n_merge` lowest-ranked rows of `x` into the remaining
/// non-class rows. Each destination becomes the mean of itself and its
/// sources; sources are removed and remaining rows keep ascending order.
pub fn merge(x: &Tensor, order: &ImportanceOrder, n_merge: usize) -> Result<(Tensor, MergeMap)> {
    let n = x.rows();
    if order.len() != n {
        return Err(Error::shape("merge", format!("{n} rows vs order of {}", order.len())));
    }
    if n_merge == 0 {
        return Ok((
            x.clone(),
            MergeMap {
                original_len: n,
                entries: vec![],
            },
        ));
    }
    if n_merge + 1 >= n {
        return Err(Error::Schedule(format!(
            "merging {n_merge} of {n} tokens leaves no eligible destination"
        )));
    }
    let sources = &order.order[n - n_merge..];
    let dests = &order.order[1..n - n_merge];
    let assigned = assign_destinations(x, sources, dests);
    let mut dest_of = vec![None; n];
    let mut pairs = Vec::with_capacity(n_merge);
    for (&s, &d) in sources.iter().zip(&assigned) {
        dest_of[s] = Some(d);
        pairs.push((s, d));
    }
    let w = vec![1.0; n];
    let merged = merge_rows_forward(x, &w, &dest_of, x.cols());
    let keep: Vec<usize> = (0..n).filter(|&i| dest_of[i].is_none()).collect();
    Ok((select_rows(&merged, &keep), MergeMap::build(n, &pairs)))
}

pub(crate) fn select_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let c = x.cols();
    let mut data = Vec::with_capacity(rows.len() * c);
    for &r in rows {
        data.extend_from_slice(x.row(r));
    }
    Tensor::matrix(rows.len(), c, data).expect("row selection")
}

/// Restores a compressed sequence to `map.original_len` rows: merged sources
/// copy their destination, pruned positions are zero, kept rows are placed
/// unchanged in ascending position order.
pub fn uncompress(tokens: &Tensor, map: &MergeMap, pruned: &[usize]) -> Result<Tensor> {
    map.validate()?;
    let n = map.original_len;
    let mut removed = vec![false; n];
    for e in &map.entries {
        removed[e.source] = true;
    }
    for &p in pruned {
        if p >= n || removed[p] || p == 0 {
            return Err(Error::Schedule(format!("invalid pruned position {p}")));
        }
        removed[p] = true;
    }
    if let Some(e) = map.entries.iter().find(|e| removed[e.destination]) {
        return Err(Error::Schedule(format!("destination {} is not kept", e.destination)));
    }
    let kept: Vec<usize> = (0..n).filter(|&i| !removed[i]).collect();
    if kept.len() != tokens.rows() {
        return Err(Error::shape(
            "uncompress",
            format!("{} rows vs {} kept positions", tokens.rows(), kept.len()),
        ));
    }
    let c = tokens.cols();
    let mut out = Tensor::zeros(&[n, c]);
    for (row, &pos) in kept.iter().enumerate() {
        out.row_mut(pos).copy_from_slice(tokens.row(row));
    }
    for e in &map.entries {
        let d = out.row(e.destination).to_vec();
        out.row_mut(e.source).copy_from_slice(&d);
    }
    Ok(out)
}
