//! Cached target index, cosine search and the benchmark metrics.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::dataset::{Benchmark, BenchmarkQuery};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::templates::{format_modification, inference_templates, BenchmarkKind};
use crate::world::{render_image, scene_for_id};

pub const UNIT_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u64>,
    dim: usize,
    matrix: Vec<f32>,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<u64>, rows: Vec<Vec<f32>>) -> Result<Self> {
        if ids.is_empty() || ids.len() != rows.len() {
            return Err(Error::Contract(format!(
                "index needs one row per id, got {} ids and {} rows",
                ids.len(),
                rows.len()
            )));
        }
        let unique: BTreeSet<u64> = ids.iter().copied().collect();
        if unique.len() != ids.len() {
            return Err(Error::Contract("index ids are not unique".into()));
        }
        let dim = rows[0].len();
        for (id, r) in ids.iter().zip(&rows) {
            let n = r.iter().map(|&v| v as f64 * v as f64).sum::<f64>();
            let n = libm::sqrt(n);
            if r.len() != dim || (n - 1.0).abs() > UNIT_TOLERANCE {
                return Err(Error::Contract(format!("index row for {id} is not a unit vector of width {dim}")));
            }
        }
        Ok(Self {
            ids,
            dim,
            matrix: rows.concat(),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Every id ordered by descending dot product, ties by ascending id.
    pub fn full_ranking(&self, q: &[f32]) -> Result<Vec<u64>> {
        if q.len() != self.dim {
            return Err(Error::Contract(format!(
                "query of width {} against index of width {}",
                q.len(),
                self.dim
            )));
        }
        let mut scored: Vec<(f32, u64)> = (0..self.len())
            .map(|i| (self.row(i).iter().zip(q).map(|(a, b)| a * b).sum::<f32>(), self.ids[i]))
            .collect();
        scored.sort_by(|a, b| rank_order(a, b));
        Ok(scored.into_iter().map(|(_, id)| id).collect())
    }

    /// The first `min(k, len)` ids of [`Self::full_ranking`].
    pub fn search(&self, q: &[f32], k: usize) -> Result<Vec<u64>> {
        if k == 0 {
            return Err(Error::Contract("search needs k >= 1".into()));
        }
        let mut r = self.full_ranking(q)?;
        r.truncate(k);
        Ok(r)
    }
}

fn rank_order(a: &(f32, u64), b: &(f32, u64)) -> Ordering {
    b.0.total_cmp(&a.0).then(a.1.cmp(&b.1))
}

fn check_k_gt(k: usize, gt: &[u64]) -> Result<()> {
    if k == 0 {
        return Err(Error::Contract("k must be at least 1".into()));
    }
    if gt.is_empty() {
        return Err(Error::Contract("ground truth is empty".into()));
    }
    Ok(())
}

/// 1 when any ground-truth id is among the first `k` results.
pub fn recall_at_k(ranked: &[u64], gt: &[u64], k: usize) -> Result<f64> {
    check_k_gt(k, gt)?;
    Ok(ranked.iter().take(k).any(|id| gt.contains(id)) as u8 as f64)
}

/// Recall after restricting the ranking to the candidate subset.
pub fn subset_recall_at_k(full_ranking: &[u64], subset: &[u64], gt: &[u64], k: usize) -> Result<f64> {
    if subset.is_empty() {
        return Err(Error::Contract("candidate subset is empty".into()));
    }
    check_k_gt(k, gt)?;
    if !gt.iter().any(|g| subset.contains(g)) {
        return Err(Error::Contract("no ground truth inside the candidate subset".into()));
    }
    let restricted: Vec<u64> = full_ranking.iter().copied().filter(|id| subset.contains(id)).collect();
    recall_at_k(&restricted, gt, k)
}

/// Average precision over the first `k` results, normalized by
/// `min(|gt|, k)`.
pub fn ap_at_k(ranked: &[u64], gt: &[u64], k: usize) -> Result<f64> {
    check_k_gt(k, gt)?;
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, id) in ranked.iter().take(k).enumerate() {
        if gt.contains(id) {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    Ok(sum / gt.len().min(k) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_recall: Option<f64>,
    pub map: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: BenchmarkKind,
    pub ks: Vec<usize>,
    pub rows: Vec<MetricRow>,
    pub n_queries: usize,
    pub index_size: usize,
    /// Digest of the evaluated checkpoint; filled in by the caller.
    #[serde(default)]
    pub config_digest: String,
}

impl EvalReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.recall)
    }
}

/// Scores precomputed query vectors against an index.
pub fn score_queries(
    kind: BenchmarkKind,
    index: &EmbeddingIndex,
    queries: &[BenchmarkQuery],
    query_vecs: &[Vec<f32>],
    ks: &[usize],
) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config("k list must be nonempty and positive".into()));
    }
    if queries.is_empty() || queries.len() != query_vecs.len() {
        return Err(Error::Contract("one vector per query is required".into()));
    }
    let has_subsets = queries.iter().all(|q| q.subset_ids.is_some());
    let mut rows: Vec<MetricRow> = ks
        .iter()
        .map(|&k| MetricRow {
            k,
            recall: 0.0,
            subset_recall: has_subsets.then_some(0.0),
            map: 0.0,
        })
        .collect();
    for (q, v) in queries.iter().zip(query_vecs) {
        let ranking = index.full_ranking(v)?;
        for row in rows.iter_mut() {
            row.recall += recall_at_k(&ranking, &q.gt_ids, row.k)?;
            row.map += ap_at_k(&ranking, &q.gt_ids, row.k)?;
            if let (Some(acc), Some(sub)) = (row.subset_recall.as_mut(), q.subset_ids.as_ref()) {
                *acc += subset_recall_at_k(&ranking, sub, &q.gt_ids, row.k)?;
            }
        }
    }
    let n = queries.len() as f64;
    for row in rows.iter_mut() {
        row.recall /= n;
        row.map /= n;
        if let Some(s) = row.subset_recall.as_mut() {
            *s /= n;
        }
    }
    Ok(EvalReport {
        benchmark: kind,
        ks: ks.to_vec(),
        rows,
        n_queries: queries.len(),
        index_size: index.len(),
        config_digest: String::new(),
    })
}

/// Embeds each target image with the benchmark's caption template.
pub fn build_index<E: Exec>(model: &Model, kind: BenchmarkKind, ids: &[u64], exec: &E) -> Result<EmbeddingIndex> {
    let (caption_tpl, _) = inference_templates(kind);
    let cfg = &model.config;
    let rows: Result<Vec<Vec<f32>>> = exec
        .map(ids.to_vec(), |id| {
            let img = render_image(&scene_for_id(id), cfg.image_size, cfg.patch_size)?;
            model.embed_value(Some(&img), caption_tpl)
        })
        .into_iter()
        .collect();
    EmbeddingIndex::new(ids.to_vec(), rows?)
}

/// Composed embeddings of every query under the benchmark's modification
/// template.
pub fn embed_queries<E: Exec>(model: &Model, kind: BenchmarkKind, queries: &[BenchmarkQuery], exec: &E) -> Result<Vec<Vec<f32>>> {
    let (_, mod_tpl) = inference_templates(kind);
    let cfg = &model.config;
    exec.map(queries.iter().collect(), |q| {
        let img = render_image(&scene_for_id(q.scene_id), cfg.image_size, cfg.patch_size)?;
        model.embed_value(Some(&img), &format_modification(mod_tpl, &q.instruction)?)
    })
    .into_iter()
    .collect()
}

pub fn evaluate<E: Exec>(model: &Model, bench: &Benchmark, ks: &[usize], exec: &E) -> Result<EvalReport> {
    bench.validate()?;
    let index = build_index(model, bench.kind(), bench.index_ids(), exec)?;
    let vecs = embed_queries(model, bench.kind(), &bench.queries, exec)?;
    score_queries(bench.kind(), &index, &bench.queries, &vecs, ks)
}

/// Expected random-ranking R@1 and its central 99% interval. Query `q`
/// hits with probability `|gt_q| / M`; the interval comes from the exact
/// distribution of the hit count (a sum of independent Bernoullis).
pub fn chance_bounds(bench: &Benchmark) -> (f64, f64, f64) {
    let m = bench.index_ids().len() as f64;
    let n = bench.queries.len();
    let mut dist = alloc::vec![0.0f64; n + 1];
    dist[0] = 1.0;
    let mut mean = 0.0;
    for (i, q) in bench.queries.iter().enumerate() {
        let p = (q.gt_ids.len() as f64 / m).min(1.0);
        mean += p;
        for c in (0..=i + 1).rev() {
            let stay = dist[c] * (1.0 - p);
            let up = if c > 0 { dist[c - 1] * p } else { 0.0 };
            dist[c] = stay + up;
        }
    }
    let mut cdf = 0.0;
    let (mut lo, mut hi) = (None, n);
    for (c, &pc) in dist.iter().enumerate() {
        cdf += pc;
        if lo.is_none() && cdf > 0.005 {
            lo = Some(c);
        }
        if cdf >= 0.995 {
            hi = c;
            break;
        }
    }
    let n = n as f64;
    (mean / n, lo.unwrap_or(0) as f64 / n, hi as f64 / n)
}
