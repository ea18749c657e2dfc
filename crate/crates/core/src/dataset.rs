//! Training sets and retrieval benchmarks drawn from the scene world.
//!
//! Scene ids carry their scene (see [`crate::world::scene_id`]); serials are
//! handed out sequentially per split, and benchmark serials start at
//! [`EVAL_SERIAL_BASE`], so splits never share an id.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{streams, substream, StreamRng};
use crate::templates::BenchmarkKind;
use crate::world::{
    caption, instruction_between, mutate, sample_scene, scene_for_id, scene_id, SceneSpec,
    GRAMMAR_SIZE, SINGLE_SLOT_PROB,
};

pub const EVAL_SERIAL_BASE: u64 = 1_000_000_000;
pub const CIRR_SUBSET_SIZE: usize = 6;
/// Distractors in a CIRR-like subset share at least this many slots with the target.
pub const CIRR_MIN_SHARED: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub scene_id: u64,
    pub caption: alloc::string::String,
    /// Caption of a scene one or two slots away; a stage-1 hard negative.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hard_negative: Option<alloc::string::String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripletRecord {
    pub scene_id: u64,
    pub instruction: alloc::string::String,
    pub modified_caption: alloc::string::String,
    pub original_caption: alloc::string::String,
}

impl TripletRecord {
    /// Checks the record against the world it claims to come from.
    pub fn validate(&self) -> Result<()> {
        let s = scene_for_id(self.scene_id);
        let s2 = crate::world::apply_instruction(&s, &self.instruction)?;
        if caption(&s) != self.original_caption || caption(&s2) != self.modified_caption {
            return Err(Error::Contract(format!(
                "triplet for scene {} is inconsistent with its instruction",
                self.scene_id
            )));
        }
        Ok(())
    }
}

/// Pairs and triplets for the two training stages.
pub fn make_dataset(n_pairs: usize, n_triplets: usize, seed: u64) -> Result<(Vec<PairRecord>, Vec<TripletRecord>)> {
    if n_pairs == 0 || n_triplets == 0 {
        return Err(Error::Config("pair and triplet counts must be at least 1".into()));
    }
    let mut rng = substream(seed, streams::DATA);
    let mut serial = 0u64;
    // separate stream, so the scenes do not depend on the negatives drawn
    let mut near = substream(seed, "pair-hard-negatives");
    let mut pairs = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let s = sample_scene(&mut rng);
        let (_, other) = mutate(&s, &mut near);
        pairs.push(PairRecord {
            scene_id: scene_id(serial, &s),
            caption: caption(&s),
            hard_negative: Some(caption(&other)),
        });
        serial += 1;
    }
    let mut triplets = Vec::with_capacity(n_triplets);
    for _ in 0..n_triplets {
        let s = sample_scene(&mut rng);
        let (t, s2) = mutate(&s, &mut rng);
        triplets.push(TripletRecord {
            scene_id: scene_id(serial, &s),
            instruction: t,
            modified_caption: caption(&s2),
            original_caption: caption(&s),
        });
        serial += 1;
    }
    Ok((pairs, triplets))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkQuery {
    pub query_id: u64,
    pub scene_id: u64,
    pub instruction: alloc::string::String,
    pub gt_ids: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset_ids: Option<Vec<u64>>,
}

/// First line of a benchmark file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchmarkHeader {
    pub benchmark: BenchmarkKind,
    pub index_ids: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Benchmark {
    pub header: BenchmarkHeader,
    pub queries: Vec<BenchmarkQuery>,
}

impl Benchmark {
    pub fn kind(&self) -> BenchmarkKind {
        self.header.benchmark
    }

    pub fn index_ids(&self) -> &[u64] {
        &self.header.index_ids
    }

    /// Every scene id the benchmark mentions.
    pub fn scene_ids(&self) -> BTreeSet<u64> {
        let mut s: BTreeSet<u64> = self.header.index_ids.iter().copied().collect();
        s.extend(self.queries.iter().map(|q| q.scene_id));
        s
    }

    /// Checks query ground truth and subsets against the index.
    pub fn validate(&self) -> Result<()> {
        let ids: BTreeSet<u64> = self.header.index_ids.iter().copied().collect();
        if ids.len() != self.header.index_ids.len() {
            return Err(Error::Contract("benchmark index ids are not unique".into()));
        }
        if ids.is_empty() {
            return Err(Error::Contract("benchmark index is empty".into()));
        }
        for q in &self.queries {
            if q.gt_ids.is_empty() || q.gt_ids.iter().any(|g| !ids.contains(g)) {
                return Err(Error::Contract(format!(
                    "query {} ground truth is empty or outside the index",
                    q.query_id
                )));
            }
            if let Some(sub) = &q.subset_ids {
                if sub.iter().any(|g| !ids.contains(g)) || !sub.iter().any(|g| q.gt_ids.contains(g)) {
                    return Err(Error::Contract(format!(
                        "query {} subset is outside the index or misses the ground truth",
                        q.query_id
                    )));
                }
            }
        }
        Ok(())
    }
}

fn pick_slot_count(rng: &mut StreamRng) -> usize {
    if rng.random::<f64>() < SINGLE_SLOT_PROB {
        1
    } else {
        2
    }
}

/// Multi-target benchmark: the index may hold several images of one scene,
/// all of which count as ground truth.
pub fn make_circo_like(n_queries: usize, index_size: usize, seed: u64) -> Result<Benchmark> {
    if n_queries == 0 || index_size == 0 {
        return Err(Error::Config("benchmark needs queries and a nonempty index".into()));
    }
    let mut rng = substream(seed, "bench-circo");
    let mut serial = EVAL_SERIAL_BASE;
    let mut index_ids = Vec::with_capacity(index_size);
    let mut by_spec: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for _ in 0..index_size {
        let s = sample_scene(&mut rng);
        let id = scene_id(serial, &s);
        serial += 1;
        index_ids.push(id);
        by_spec.entry(s.index()).or_default().push(id);
    }
    let mut queries = Vec::with_capacity(n_queries);
    while queries.len() < n_queries {
        let src = sample_scene(&mut rng);
        let n = pick_slot_count(&mut rng);
        let candidates: Vec<usize> = by_spec
            .keys()
            .copied()
            .filter(|&i| src.differing_slots(&SceneSpec::from_index(i)).len() == n)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let target = SceneSpec::from_index(candidates[rng.random_range(0..candidates.len())]);
        queries.push(BenchmarkQuery {
            query_id: queries.len() as u64,
            scene_id: scene_id(serial, &src),
            instruction: instruction_between(&src, &target),
            gt_ids: by_spec[&target.index()].clone(),
            subset_ids: None,
        });
        serial += 1;
    }
    Ok(Benchmark {
        header: BenchmarkHeader {
            benchmark: BenchmarkKind::SyntheticCircoLike,
            index_ids,
        },
        queries,
    })
}

/// Single-target benchmark over distinct scenes, each query carrying a
/// candidate subset of the target plus look-alike distractors.
pub fn make_cirr_like(n_queries: usize, index_size: usize, seed: u64) -> Result<Benchmark> {
    if n_queries == 0 || index_size < CIRR_SUBSET_SIZE || index_size > GRAMMAR_SIZE {
        return Err(Error::Config(format!(
            "cirr-like index size must be in {CIRR_SUBSET_SIZE}..={GRAMMAR_SIZE}, queries nonzero"
        )));
    }
    let mut rng = substream(seed, "bench-cirr");
    let mut serial = EVAL_SERIAL_BASE;
    // distinct specs: partial shuffle of the grammar
    let mut specs: Vec<usize> = (0..GRAMMAR_SIZE).collect();
    for i in 0..index_size {
        let j = rng.random_range(i..specs.len());
        specs.swap(i, j);
    }
    specs.truncate(index_size);
    let mut index_ids = Vec::with_capacity(index_size);
    let mut by_spec: BTreeMap<usize, u64> = BTreeMap::new();
    for &i in &specs {
        let id = scene_id(serial, &SceneSpec::from_index(i));
        serial += 1;
        index_ids.push(id);
        by_spec.insert(i, id);
    }
    let mut queries = Vec::with_capacity(n_queries);
    while queries.len() < n_queries {
        let src = sample_scene(&mut rng);
        let n = pick_slot_count(&mut rng);
        let candidates: Vec<usize> = by_spec
            .keys()
            .copied()
            .filter(|&i| src.differing_slots(&SceneSpec::from_index(i)).len() == n)
            .collect();
        if candidates.is_empty() {
            continue;
        }
        let target = SceneSpec::from_index(candidates[rng.random_range(0..candidates.len())]);
        let mut look_alikes: Vec<u64> = by_spec
            .iter()
            .filter(|(&i, _)| {
                i != target.index() && SceneSpec::from_index(i).shared_slots(&target) >= CIRR_MIN_SHARED
            })
            .map(|(_, &id)| id)
            .collect();
        if look_alikes.len() < CIRR_SUBSET_SIZE - 1 {
            continue;
        }
        for i in 0..CIRR_SUBSET_SIZE - 1 {
            let j = rng.random_range(i..look_alikes.len());
            look_alikes.swap(i, j);
        }
        let gt = by_spec[&target.index()];
        let mut subset: Vec<u64> = look_alikes[..CIRR_SUBSET_SIZE - 1].to_vec();
        subset.push(gt);
        subset.sort_unstable();
        queries.push(BenchmarkQuery {
            query_id: queries.len() as u64,
            scene_id: scene_id(serial, &src),
            instruction: instruction_between(&src, &target),
            gt_ids: alloc::vec![gt],
            subset_ids: Some(subset),
        });
        serial += 1;
    }
    Ok(Benchmark {
        header: BenchmarkHeader {
            benchmark: BenchmarkKind::SyntheticCirrLike,
            index_ids,
        },
        queries,
    })
}

pub fn make_benchmark(kind: BenchmarkKind, n_queries: usize, index_size: usize, seed: u64) -> Result<Benchmark> {
    match kind {
        BenchmarkKind::SyntheticCirrLike => make_cirr_like(n_queries, index_size, seed),
        BenchmarkKind::SyntheticCircoLike => make_circo_like(n_queries, index_size, seed),
    }
}
