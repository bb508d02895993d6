use rand::seq::{index, SliceRandom};
use rand::Rng;

use super::GroupedDataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Group-balanced subsample: every group keeps `m = min count` rows drawn
/// without replacement. Selected rows keep their original relative order.
pub fn balanced_subset(data: &GroupedDataset, seed: u64) -> Result<GroupedDataset> {
    let groups = data.groups();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); data.num_groups()];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    if let Some(g) = members.iter().position(Vec::is_empty) {
        let (y, a) = data.decode_group(g);
        return Err(Error::EmptyGroup { y, a });
    }
    let m = members
        .iter()
        .map(Vec::len)
        .min()
        .expect("at least one group");
    let mut rng = stream_rng(seed, Stream::Subset);
    let mut chosen = Vec::with_capacity(m * members.len());
    for group in &members {
        if group.len() == m {
            chosen.extend_from_slice(group);
        } else {
            chosen.extend(
                index::sample(&mut rng, group.len(), m)
                    .into_iter()
                    .map(|k| group[k]),
            );
        }
    }
    chosen.sort_unstable();
    Ok(data.select(&chosen))
}

/// One epoch of plain minibatches: a seeded shuffle, cut into consecutive
/// batches with the final partial batch kept.
pub fn shuffled_batches<R: Rng + ?Sized>(
    n: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// One epoch of group-stratified minibatches.
///
/// Each group's members are shuffled and cut into consecutive chunks; batch
/// `k` is the union of every group's chunk `k`. Group `g` contributes
/// `batch_size / G` rows, plus one for the first `batch_size % G` groups, so
/// per-group counts are equal whenever `G` divides `batch_size`. Only full
/// chunks are used, so rows left over after the smallest group's last full
/// chunk sit out that epoch. A group smaller than its share yields a single
/// batch holding every row.
pub fn balanced_batches<R: Rng + ?Sized>(
    groups: &[usize],
    num_groups: usize,
    batch_size: usize,
    rng: &mut R,
) -> Vec<Vec<usize>> {
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_groups];
    for (i, &g) in groups.iter().enumerate() {
        members[g].push(i);
    }
    for m in &mut members {
        m.shuffle(rng);
    }
    let base = batch_size / num_groups;
    let extra = batch_size % num_groups;
    let per_group: Vec<usize> = (0..num_groups)
        .map(|g| (base + usize::from(g < extra)).max(1))
        .collect();
    let batches = members
        .iter()
        .zip(&per_group)
        .filter(|(m, _)| !m.is_empty())
        .map(|(m, &q)| m.len() / q)
        .min()
        .unwrap_or(0);
    let batches = if batches == 0 && !groups.is_empty() {
        1
    } else {
        batches
    };
    (0..batches)
        .map(|k| {
            let mut batch = Vec::with_capacity(batch_size);
            for (m, &q) in members.iter().zip(&per_group) {
                let start = (k * q).min(m.len());
                let end = ((k + 1) * q).min(m.len());
                batch.extend_from_slice(&m[start..end]);
            }
            batch
        })
        .collect()
}
