//! Synthetic data and non-i.i.d. client partitioning.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Batch, Matrix};
use crate::seed::{self, SimRng};

/// Inputs with integer class labels and a per-class sample index.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    class_index: Vec<Vec<usize>>,
}

impl LabeledDataset {
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.rows() != labels.len() {
            return Err(Error::config("inputs and labels differ in length"));
        }
        let mut class_index = vec![Vec::new(); num_classes];
        for (i, &y) in labels.iter().enumerate() {
            class_index
                .get_mut(y)
                .ok_or_else(|| Error::config(format!("label {y} >= {num_classes} classes")))?
                .push(i);
        }
        if let Some(c) = class_index.iter().position(Vec::is_empty) {
            return Err(Error::config(format!("class {c} has no samples")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            class_index,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn class_index(&self, class: usize) -> &[usize] {
        &self.class_index[class]
    }

    pub fn batch(&self, idx: &[usize]) -> Result<Batch> {
        Batch::new(
            self.inputs.select_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    /// Splits off the last `per_class` samples of every class.
    pub fn split_tail(&self, per_class: usize) -> Result<(LabeledDataset, LabeledDataset)> {
        let mut head = Vec::new();
        let mut tail = Vec::new();
        for idx in &self.class_index {
            if idx.len() <= per_class {
                return Err(Error::config("split leaves a class empty"));
            }
            let cut = idx.len() - per_class;
            head.extend_from_slice(&idx[..cut]);
            tail.extend_from_slice(&idx[cut..]);
        }
        let take = |ids: &[usize]| {
            LabeledDataset::new(
                self.inputs.select_rows(ids),
                ids.iter().map(|&i| self.labels[i]).collect(),
                self.num_classes,
            )
        };
        Ok((take(&head)?, take(&tail)?))
    }
}

/// Isotropic unit-variance Gaussian classes whose means are seeded random
/// directions scaled to length `separation`.
pub fn synth_dataset(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    if num_classes < 2 || dim < 2 || per_class < 2 {
        return Err(Error::config("synthetic data needs C >= 2, d >= 2, n >= 2"));
    }
    if !(separation >= 0.0 && separation.is_finite()) {
        return Err(Error::config("separation must be a finite non-negative number"));
    }
    let mut rng = seed::stream(seed, &[seed::tag::DATA]);
    let centers: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| separation * x / norm).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(num_classes * per_class * dim);
    let mut labels = Vec::with_capacity(num_classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    LabeledDataset::new(Matrix::from_vec(labels.len(), dim, data)?, labels, num_classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShardKind {
    Anchor { assigned_expert: usize },
    Normal,
    Test,
}

impl ShardKind {
    pub fn name(&self) -> &'static str {
        match self {
            ShardKind::Anchor { .. } => "anchor",
            ShardKind::Normal => "normal",
            ShardKind::Test => "test",
        }
    }
}

/// One client's local data: sorted, unique sample indices into a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
    pub kind: ShardKind,
}

impl ClientShard {
    pub fn new(client_id: usize, mut indices: Vec<usize>, ds: &LabeledDataset, kind: ShardKind) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if indices.is_empty() {
            return Err(Error::config(format!("client {client_id} has an empty shard")));
        }
        let mut label_histogram = vec![0; ds.num_classes];
        for &i in &indices {
            label_histogram[ds.labels[i]] += 1;
        }
        Ok(Self {
            client_id,
            indices,
            label_histogram,
            kind,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn label_set(&self) -> BTreeSet<usize> {
        self.label_histogram
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    pub fn assigned_expert(&self) -> Option<usize> {
        match self.kind {
            ShardKind::Anchor { assigned_expert } => Some(assigned_expert),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Strategy {
    /// Every client holds exactly `labels_per_client` distinct labels.
    Quantity { labels_per_client: usize },
    /// Per-label client proportions drawn from Dirichlet(alpha).
    Dirichlet { alpha: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionConfig {
    pub strategy: Strategy,
    pub num_clients: usize,
    pub seed: u64,
    /// A sample may be held by several clients (never twice by one).
    pub with_replacement: bool,
    /// Quantity strategy only; defaults to `len / num_clients`.
    pub shard_size: Option<usize>,
}

pub fn partition(ds: &LabeledDataset, cfg: &PartitionConfig) -> Result<Vec<ClientShard>> {
    match cfg.strategy {
        Strategy::Quantity { labels_per_client } => {
            let all: Vec<usize> = (0..ds.num_classes).collect();
            partition_quantity_within(
                ds,
                &all,
                cfg.num_clients,
                labels_per_client,
                cfg.seed,
                cfg.with_replacement,
                cfg.shard_size,
            )
        }
        Strategy::Dirichlet { alpha } => partition_dirichlet(ds, cfg.num_clients, alpha, cfg.seed),
    }
}

pub fn partition_quantity(
    ds: &LabeledDataset,
    num_clients: usize,
    labels_per_client: usize,
    seed: u64,
    with_replacement: bool,
) -> Result<Vec<ClientShard>> {
    let all: Vec<usize> = (0..ds.num_classes).collect();
    partition_quantity_within(ds, &all, num_clients, labels_per_client, seed, with_replacement, None)
}

/// Splits `total` into `parts` near-equal counts, larger ones first.
fn even_split(total: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|j| total / parts + usize::from(j < total % parts))
        .collect()
}

/// Quantity-based label skew restricted to the label pool `labels`.
pub fn partition_quantity_within(
    ds: &LabeledDataset,
    labels: &[usize],
    num_clients: usize,
    labels_per_client: usize,
    seed: u64,
    with_replacement: bool,
    shard_size: Option<usize>,
) -> Result<Vec<ClientShard>> {
    if labels_per_client == 0 || labels_per_client > labels.len() {
        return Err(Error::config(format!(
            "cannot give each client {labels_per_client} distinct labels out of {}",
            labels.len()
        )));
    }
    if num_clients == 0 {
        return Err(Error::config("num_clients must be positive"));
    }
    let size = shard_size
        .unwrap_or(ds.len() / num_clients)
        .max(labels_per_client);
    let per_label = even_split(size, labels_per_client);
    let mut rng = seed::stream(seed, &[seed::tag::PARTITION]);

    let client_labels: Vec<Vec<usize>> = (0..num_clients)
        .map(|_| {
            let mut ls: Vec<usize> = index::sample(&mut rng, labels.len(), labels_per_client)
                .into_iter()
                .map(|i| labels[i])
                .collect();
            ls.sort_unstable();
            ls
        })
        .collect();

    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    if with_replacement {
        for (k, ls) in client_labels.iter().enumerate() {
            for (j, &c) in ls.iter().enumerate() {
                let pool = ds.class_index(c);
                let n = per_label[j].min(pool.len());
                picks[k].extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]));
            }
        }
    } else {
        for &c in labels {
            let holders: Vec<(usize, usize)> = client_labels
                .iter()
                .enumerate()
                .filter_map(|(k, ls)| ls.iter().position(|&l| l == c).map(|j| (k, per_label[j])))
                .collect();
            if holders.is_empty() {
                continue;
            }
            let mut pool = ds.class_index(c).to_vec();
            if pool.len() < holders.len() {
                return Err(Error::config(format!(
                    "label {c} has {} samples for {} clients without replacement",
                    pool.len(),
                    holders.len()
                )));
            }
            pool.shuffle(&mut rng);
            let fair = pool.len() / holders.len();
            let mut at = 0;
            for (k, want) in holders {
                let n = want.min(fair);
                picks[k].extend_from_slice(&pool[at..at + n]);
                at += n;
            }
        }
    }
    picks
        .into_iter()
        .enumerate()
        .map(|(k, idx)| ClientShard::new(k, idx, ds, ShardKind::Normal))
        .collect()
}

fn gamma_row<R: Rng>(rng: &mut R, gamma: &Gamma<f64>, n: usize) -> Vec<f64> {
    (0..n).map(|_| gamma.sample(rng)).collect()
}

/// Rounds `weights * total` to integers summing exactly to `total`
/// (largest remainder, ties to the lower index).
fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    let exact: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut left = total - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (exact[a] - exact[a].floor(), exact[b] - exact[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

const MAX_REDRAWS: usize = 100;

fn gamma_for(alpha: f64) -> Result<Gamma<f64>> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!("dirichlet alpha must be positive, got {alpha}")));
    }
    Gamma::new(alpha, 1.0).map_err(|e| Error::config(format!("bad dirichlet alpha: {e}")))
}

/// Per-label Dirichlet allocation of each label's full sample budget.
///
/// The proportions come from a client x label matrix of Gamma(alpha) draws,
/// normalised per label. A client that ends up with no samples has its row
/// redrawn (at most 100 times).
pub fn partition_dirichlet(ds: &LabeledDataset, num_clients: usize, alpha: f64, seed: u64) -> Result<Vec<ClientShard>> {
    if num_clients == 0 {
        return Err(Error::config("num_clients must be positive"));
    }
    let gamma = gamma_for(alpha)?;
    let classes = ds.num_classes;
    let mut rng = seed::stream(seed, &[seed::tag::PARTITION]);
    let mut q: Vec<Vec<f64>> = (0..num_clients).map(|_| gamma_row(&mut rng, &gamma, classes)).collect();

    let allocate = |q: &[Vec<f64>]| -> Vec<Vec<usize>> {
        // counts[c][k]
        (0..classes)
            .map(|c| {
                let col: Vec<f64> = q.iter().map(|row| row[c]).collect();
                let budget = ds.class_index(c).len();
                if col.iter().sum::<f64>() > 0.0 {
                    apportion(budget, &col)
                } else {
                    apportion(budget, &vec![1.0; num_clients])
                }
            })
            .collect()
    };

    let mut counts = allocate(&q);
    let mut redraws = 0;
    loop {
        let empty: Vec<usize> = (0..num_clients)
            .filter(|&k| counts.iter().all(|col| col[k] == 0))
            .collect();
        if empty.is_empty() {
            break;
        }
        if redraws == MAX_REDRAWS {
            return Err(Error::config(format!(
                "dirichlet partition left {} clients empty after {MAX_REDRAWS} redraws",
                empty.len()
            )));
        }
        for k in empty {
            q[k] = gamma_row(&mut rng, &gamma, classes);
        }
        redraws += 1;
        counts = allocate(&q);
    }

    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); num_clients];
    for (c, col) in counts.iter().enumerate() {
        let pool = ds.class_index(c);
        for (k, &n) in col.iter().enumerate() {
            if n > 0 {
                picks[k].extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]));
            }
        }
    }
    picks
        .into_iter()
        .enumerate()
        .map(|(k, idx)| ClientShard::new(k, idx, ds, ShardKind::Normal))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorConfig {
    pub count: usize,
    pub labels_per_anchor: usize,
    /// Pairwise-disjoint label groups; otherwise Dirichlet(alpha) label mixes.
    pub disjoint: bool,
    pub alpha: f64,
    pub shard_size: usize,
}

/// Anchor `q` is pinned to expert `q`.
pub fn make_anchor_shards(ds: &LabeledDataset, cfg: &AnchorConfig, seed: u64) -> Result<Vec<ClientShard>> {
    let classes = ds.num_classes;
    if cfg.count == 0 {
        return Err(Error::config("at least one anchor is required"));
    }
    let mut rng = seed::stream(seed, &[seed::tag::ANCHORS]);
    let mut shards = Vec::with_capacity(cfg.count);
    if cfg.disjoint {
        let need = cfg.count * cfg.labels_per_anchor;
        if cfg.labels_per_anchor == 0 || need > classes {
            return Err(Error::config(format!(
                "{} disjoint anchors with {} labels need {need} classes, have {classes}",
                cfg.count, cfg.labels_per_anchor
            )));
        }
        let mut perm: Vec<usize> = (0..classes).collect();
        perm.shuffle(&mut rng);
        let per_label = even_split(cfg.shard_size.max(cfg.labels_per_anchor), cfg.labels_per_anchor);
        for q in 0..cfg.count {
            let mut group = perm[q * cfg.labels_per_anchor..(q + 1) * cfg.labels_per_anchor].to_vec();
            group.sort_unstable();
            let mut idx = Vec::new();
            for (j, &c) in group.iter().enumerate() {
                let pool = ds.class_index(c);
                let n = per_label[j].min(pool.len());
                idx.extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]));
            }
            shards.push(ClientShard::new(q, idx, ds, ShardKind::Anchor { assigned_expert: q })?);
        }
    } else {
        let gamma = gamma_for(cfg.alpha)?;
        for q in 0..cfg.count {
            let mix = gamma_row(&mut rng, &gamma, classes);
            let counts = if mix.iter().sum::<f64>() > 0.0 {
                apportion(cfg.shard_size.max(1), &mix)
            } else {
                apportion(cfg.shard_size.max(1), &vec![1.0; classes])
            };
            let mut idx = Vec::new();
            for (c, &n) in counts.iter().enumerate() {
                let pool = ds.class_index(c);
                let n = n.min(pool.len());
                idx.extend(index::sample(&mut rng, pool.len(), n).into_iter().map(|i| pool[i]));
            }
            shards.push(ClientShard::new(q, idx, ds, ShardKind::Anchor { assigned_expert: q })?);
        }
    }
    Ok(shards)
}

/// Label -> expert map implied by anchors with pairwise-disjoint label sets.
///
/// Returns `None` when any two anchors share a label.
pub fn label_expert_map(anchors: &[ClientShard]) -> Option<BTreeMap<usize, usize>> {
    let mut map = BTreeMap::new();
    for a in anchors {
        let q = a.assigned_expert()?;
        for c in a.label_set() {
            if map.insert(c, q).is_some() {
                return None;
            }
        }
    }
    Some(map)
}

const TEST_RETRIES: usize = 1000;

/// Test clients whose label sets never occur among `training`.
///
/// `labels` restricts the label pool (all classes when `None`).
pub fn make_test_clients(
    ds_test: &LabeledDataset,
    count: usize,
    strategy: Strategy,
    seed: u64,
    training: &[ClientShard],
    shard_size: usize,
    labels: Option<&[usize]>,
) -> Result<Vec<ClientShard>> {
    let all: Vec<usize> = (0..ds_test.num_classes).collect();
    let pool_labels = labels.unwrap_or(&all);
    let seen: BTreeSet<BTreeSet<usize>> = training.iter().map(ClientShard::label_set).collect();
    let mut rng = seed::stream(seed, &[seed::tag::TEST_CLIENTS]);
    let mut out = Vec::with_capacity(count);
    for u in 0..count {
        let mut found = None;
        for _ in 0..TEST_RETRIES {
            let counts = draw_label_counts(&mut rng, strategy, pool_labels, ds_test, shard_size)?;
            let set: BTreeSet<usize> = counts.iter().filter(|(_, &n)| n > 0).map(|(&c, _)| c).collect();
            if !set.is_empty() && !seen.contains(&set) {
                found = Some(counts);
                break;
            }
        }
        let counts = found.ok_or_else(|| {
            Error::config(format!(
                "no unseen label combination found for test client {u} after {TEST_RETRIES} draws"
            ))
        })?;
        let mut idx = Vec::new();
        for (&c, &n) in &counts {
            let pool = ds_test.class_index(c);
            idx.extend(index::sample(&mut rng, pool.len(), n.min(pool.len())).into_iter().map(|i| pool[i]));
        }
        out.push(ClientShard::new(u, idx, ds_test, ShardKind::Test)?);
    }
    Ok(out)
}

fn draw_label_counts(
    rng: &mut SimRng,
    strategy: Strategy,
    labels: &[usize],
    ds: &LabeledDataset,
    shard_size: usize,
) -> Result<BTreeMap<usize, usize>> {
    match strategy {
        Strategy::Quantity { labels_per_client: k } => {
            if k == 0 || k > labels.len() {
                return Err(Error::config(format!("cannot draw {k} labels from {}", labels.len())));
            }
            let mut chosen: Vec<usize> = index::sample(rng, labels.len(), k).into_iter().map(|i| labels[i]).collect();
            chosen.sort_unstable();
            let split = even_split(shard_size.max(k), k);
            Ok(chosen.into_iter().zip(split).collect())
        }
        Strategy::Dirichlet { alpha } => {
            let gamma = gamma_for(alpha)?;
            let mix = gamma_row(rng, &gamma, labels.len());
            let weights = if mix.iter().sum::<f64>() > 0.0 { mix } else { vec![1.0; labels.len()] };
            let counts = apportion(shard_size.max(1), &weights);
            Ok(labels
                .iter()
                .zip(counts)
                .map(|(&c, n)| (c, n.min(ds.class_index(c).len())))
                .collect())
        }
    }
}

/// `client_id,kind,label,count` rows for every non-zero histogram entry.
pub fn histogram_csv(shards: &[ClientShard]) -> String {
    let mut out = String::from("client_id,kind,label,count\n");
    for s in shards {
        for (c, &n) in s.label_histogram.iter().enumerate() {
            if n > 0 {
                let _ = writeln!(out, "{},{},{},{}", s.client_id, s.kind.name(), c, n);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn small(seed: u64) -> LabeledDataset {
        synth_dataset(10, 4, 60, 3.0, seed).unwrap()
    }

    #[test]
    fn synth_is_deterministic_and_well_formed() {
        let a = synth_dataset(5, 3, 10, 2.0, 42).unwrap();
        let b = synth_dataset(5, 3, 10, 2.0, 42).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_dataset(5, 3, 10, 2.0, 43).unwrap());
        assert_eq!(a.len(), 50);
        for c in 0..5 {
            assert_eq!(a.class_index(c).len(), 10);
            assert!(a.class_index(c).iter().all(|&i| a.labels[i] == c));
        }
        assert!(synth_dataset(1, 3, 10, 2.0, 0).is_err());
        assert!(synth_dataset(3, 3, 10, -1.0, 0).is_err());
    }

    #[test]
    fn zero_separation_means_coincide() {
        let ds = synth_dataset(4, 8, 2000, 0.0, 1).unwrap();
        let mut means = vec![vec![0.0; 8]; 4];
        for (i, &y) in ds.labels.iter().enumerate() {
            for (m, v) in means[y].iter_mut().zip(ds.inputs.row(i)) {
                *m += v / 2000.0;
            }
        }
        for m in &means {
            assert!(m.iter().all(|v| v.abs() < 0.1), "{m:?}");
        }
    }

    #[test]
    fn split_tail_keeps_classes() {
        let ds = small(3);
        let (tr, te) = ds.split_tail(10).unwrap();
        assert_eq!(te.len(), 100);
        assert_eq!(tr.len(), 500);
        assert!(ds.split_tail(60).is_err());
    }

    #[test]
    fn quantity_partition_has_exact_label_counts() {
        let ds = small(4);
        let shards = partition_quantity(&ds, 100, 4, 9, true).unwrap();
        assert_eq!(shards.len(), 100);
        for s in &shards {
            assert_eq!(s.label_set().len(), 4);
            assert_eq!(s.label_histogram.iter().sum::<usize>(), s.len());
            // membership oracle
            assert!(s.indices.iter().all(|&i| i < ds.len()));
            assert!(s.indices.windows(2).all(|w| w[0] < w[1]));
        }
        let full = partition_quantity(&ds, 7, 10, 9, true).unwrap();
        assert!(full.iter().all(|s| s.label_set().len() == 10));
        assert!(partition_quantity(&ds, 7, 11, 9, true).is_err());
    }

    #[test]
    fn quantity_without_replacement_is_disjoint() {
        let ds = small(5);
        let shards = partition_quantity(&ds, 20, 2, 1, false).unwrap();
        let mut seen = BTreeSet::new();
        for s in &shards {
            assert_eq!(s.label_set().len(), 2);
            for &i in &s.indices {
                assert!(seen.insert(i), "sample {i} held twice");
            }
        }
    }

    #[test]
    fn dirichlet_conserves_label_budgets() {
        let ds = small(6);
        let shards = partition_dirichlet(&ds, 30, 0.1, 2).unwrap();
        assert!(shards.iter().all(|s| !s.is_empty()));
        for c in 0..10 {
            let total: usize = shards.iter().map(|s| s.label_histogram[c]).sum();
            assert_eq!(total, ds.class_index(c).len());
        }
    }

    #[test]
    fn dirichlet_large_alpha_is_near_uniform() {
        let ds = synth_dataset(10, 4, 500, 3.0, 7).unwrap();
        let shards = partition_dirichlet(&ds, 10, 1e6, 3).unwrap();
        for c in 0..10 {
            let counts: Vec<usize> = shards.iter().map(|s| s.label_histogram[c]).collect();
            let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
            assert!((hi as f64) / (lo as f64) < 1.5, "label {c}: {counts:?}");
        }
    }

    #[test]
    fn dirichlet_small_alpha_concentrates() {
        // median over shards of the mass on the top two labels, averaged over 20 seeds
        let ds = synth_dataset(10, 4, 200, 3.0, 8).unwrap();
        let mut medians = Vec::new();
        for seed in 0..20 {
            let shards = partition_dirichlet(&ds, 20, 0.1, seed).unwrap();
            let mut top2: Vec<f64> = shards
                .iter()
                .map(|s| {
                    let mut h = s.label_histogram.clone();
                    h.sort_unstable_by(|a, b| b.cmp(a));
                    (h[0] + h[1]) as f64 / s.len() as f64
                })
                .collect();
            top2.sort_by(f64::total_cmp);
            medians.push(top2[top2.len() / 2]);
        }
        let mean = medians.iter().sum::<f64>() / medians.len() as f64;
        assert!(mean >= 0.6, "mean median top-2 mass {mean}");
    }

    #[test]
    fn disjoint_anchors_partition_labels() {
        let ds = small(9);
        let cfg = AnchorConfig { count: 5, labels_per_anchor: 2, disjoint: true, alpha: 0.1, shard_size: 40 };
        let anchors = make_anchor_shards(&ds, &cfg, 1).unwrap();
        let mut union = BTreeSet::new();
        for (q, a) in anchors.iter().enumerate() {
            assert_eq!(a.assigned_expert(), Some(q));
            assert_eq!(a.label_set().len(), 2);
            for c in a.label_set() {
                assert!(union.insert(c));
            }
        }
        assert_eq!(union, (0..10).collect());
        assert_eq!(label_expert_map(&anchors).unwrap().len(), 10);
        let bad = AnchorConfig { count: 6, ..cfg };
        assert!(make_anchor_shards(&ds, &bad, 1).is_err());
    }

    #[test]
    fn disjoint_anchors_on_hundred_classes() {
        let ds = synth_dataset(100, 4, 4, 3.0, 10).unwrap();
        let cfg = AnchorConfig { count: 10, labels_per_anchor: 10, disjoint: true, alpha: 0.1, shard_size: 40 };
        let anchors = make_anchor_shards(&ds, &cfg, 2).unwrap();
        for i in 0..10 {
            for j in i + 1..10 {
                assert!(anchors[i].label_set().is_disjoint(&anchors[j].label_set()));
            }
        }
    }

    #[test]
    fn overlapping_anchors_may_share_labels() {
        let ds = small(11);
        let cfg = AnchorConfig { count: 5, labels_per_anchor: 2, disjoint: false, alpha: 0.1, shard_size: 50 };
        let overlapping = (0..20).any(|s| {
            let anchors = make_anchor_shards(&ds, &cfg, s).unwrap();
            label_expert_map(&anchors).is_none()
        });
        assert!(overlapping);
    }

    #[test]
    fn test_clients_use_unseen_combinations() {
        let ds = synth_dataset(4, 3, 20, 3.0, 12).unwrap();
        let train = vec![ClientShard::new(0, vec![0, 20], &ds, ShardKind::Normal).unwrap()];
        assert_eq!(train[0].label_set(), BTreeSet::from([0, 1]));
        let strategy = Strategy::Quantity { labels_per_client: 2 };
        let tests = make_test_clients(&ds, 1, strategy, 5, &train, 10, None).unwrap();
        assert_ne!(tests[0].label_set(), train[0].label_set());
        assert_eq!(tests, make_test_clients(&ds, 1, strategy, 5, &train, 10, None).unwrap());

        // exhaustive comparison against every training shard
        let ds = small(13);
        let train = partition_quantity(&ds, 40, 2, 1, true).unwrap();
        let tests = make_test_clients(&ds, 5, strategy, 2, &train, 20, None).unwrap();
        for t in &tests {
            assert_eq!(t.kind, ShardKind::Test);
            assert!(train.iter().all(|s| s.label_set() != t.label_set()));
        }
    }

    #[test]
    fn test_clients_exhaust_when_everything_is_seen() {
        let ds = synth_dataset(3, 3, 20, 3.0, 14).unwrap();
        let train: Vec<ClientShard> = [[0usize, 20], [0, 40], [20, 40]]
            .iter()
            .enumerate()
            .map(|(k, idx)| ClientShard::new(k, idx.to_vec(), &ds, ShardKind::Normal).unwrap())
            .collect();
        let r = make_test_clients(&ds, 1, Strategy::Quantity { labels_per_client: 2 }, 0, &train, 4, None);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn histogram_csv_rows() {
        let ds = synth_dataset(3, 3, 5, 3.0, 15).unwrap();
        let s = ClientShard::new(4, vec![0, 1, 6], &ds, ShardKind::Anchor { assigned_expert: 2 }).unwrap();
        assert_eq!(histogram_csv(&[s]), "client_id,kind,label,count\n4,anchor,0,2\n4,anchor,1,1\n");
    }

    #[test]
    fn apportion_sums_exactly() {
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(7, &[0.0, 1.0]), vec![0, 7]);
    }

    proptest! {
        #[test]
        fn quantity_label_count_is_exact_for_all_seeds(seed in 0u64..500, k in 1usize..=5) {
            let ds = synth_dataset(5, 2, 8, 1.0, 0).unwrap();
            let shards = partition_quantity(&ds, 12, k, seed, true).unwrap();
            prop_assert!(shards.iter().all(|s| s.label_set().len() == k));
            prop_assert_eq!(&shards, &partition_quantity(&ds, 12, k, seed, true).unwrap());
        }

        #[test]
        fn dirichlet_conserves_for_all_seeds(seed in 0u64..200, alpha in 0.05f64..5.0) {
            let ds = synth_dataset(4, 2, 15, 1.0, 0).unwrap();
            let shards = partition_dirichlet(&ds, 6, alpha, seed).unwrap();
            for c in 0..4 {
                prop_assert_eq!(shards.iter().map(|s| s.label_histogram[c]).sum::<usize>(), 15);
            }
        }
    }
}
