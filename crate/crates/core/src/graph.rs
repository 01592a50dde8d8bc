//! Impression graphs (cycle over real nodes plus a prototype star) and
//! episodic task sampling.

use log::debug;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Dataset};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Support,
    Query,
}

/// Symmetric binary adjacency over `n` real nodes plus the prototype node,
/// which sits at index `n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    a: Vec<bool>,
}

impl Adjacency {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("graph needs at least one real node"));
        }
        let m = n + 1;
        let mut a = vec![false; m * m];
        let mut link = |i: usize, j: usize| {
            if i != j {
                a[i * m + j] = true;
                a[j * m + i] = true;
            }
        };
        for i in 0..n {
            link(i, (i + 1) % n);
            link(i, (i + n - 1) % n);
            link(i, n);
        }
        Ok(Adjacency { n, a })
    }

    pub fn num_real(&self) -> usize {
        self.n
    }

    pub fn size(&self) -> usize {
        self.n + 1
    }

    pub fn prototype_index(&self) -> usize {
        self.n
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.a[i * (self.n + 1) + j]
    }

    pub fn degree(&self, i: usize) -> usize {
        (0..=self.n).filter(|&j| self.is_edge(i, j)).count()
    }

    /// Real-node neighbors of real node `i` (the prototype excluded).
    pub fn cycle_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.is_edge(i, j)).collect()
    }

    /// Row-major `n x n` mask of the cycle edges.
    pub fn cycle_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                m.push(self.is_edge(i, j));
            }
        }
        m
    }
}

/// One impression graph on a tape: `nodes` is `[N x d]`, `proto` is `[1 x d]`.
#[derive(Clone, Debug)]
pub struct ClassGraph {
    pub nodes: Var,
    pub proto: Var,
    pub adjacency: Adjacency,
    pub class_id: ClassId,
    pub role: Role,
}

/// Wraps `[N x d]` node embeddings into a graph whose prototype starts at the
/// row mean.
pub fn build_graph(tape: &mut Tape, embeddings: Var, class_id: ClassId, role: Role) -> Result<ClassGraph> {
    let shape = tape.value(embeddings).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::shape("build_graph", &[0, 0], &shape));
    }
    let adjacency = Adjacency::new(shape[0])?;
    let proto = tape.mean_rows(embeddings);
    Ok(ClassGraph {
        nodes: embeddings,
        proto,
        adjacency,
        class_id,
        role,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EpisodeSpec {
    pub ways: usize,
    pub graphs_per_class: usize,
    pub images_per_graph: usize,
    pub query_graphs_per_class: usize,
    /// When false, no impression is used twice within one class of an episode.
    pub sample_with_replacement: bool,
}

impl Default for EpisodeSpec {
    fn default() -> Self {
        EpisodeSpec {
            ways: 5,
            graphs_per_class: 4,
            images_per_graph: 5,
            query_graphs_per_class: 1,
            sample_with_replacement: true,
        }
    }
}

impl EpisodeSpec {
    pub fn new(ways: usize, k: usize, n: usize) -> Self {
        EpisodeSpec {
            ways,
            graphs_per_class: k,
            images_per_graph: n,
            ..EpisodeSpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ways < 2 || self.graphs_per_class == 0 || self.images_per_graph == 0 || self.query_graphs_per_class == 0
        {
            return Err(Error::Config(format!(
                "episode needs ways >= 2 and positive K, N, Q (got C={} K={} N={} Q={})",
                self.ways, self.graphs_per_class, self.images_per_graph, self.query_graphs_per_class
            )));
        }
        Ok(())
    }
}

/// Impression indices for one class of an episode.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassDraw {
    /// Index into the dataset's classes.
    pub class: usize,
    /// `K` graphs of `N` impression indices.
    pub support: Vec<Vec<usize>>,
    /// `Q` graphs of `N` impression indices.
    pub query: Vec<Vec<usize>>,
}

/// Index-level description of an episode; materialized by the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EpisodePlan {
    pub classes: Vec<ClassDraw>,
}

impl EpisodePlan {
    pub fn class_ids<'a>(&self, ds: &'a Dataset) -> Vec<&'a ClassId> {
        self.classes.iter().map(|c| &ds.class(c.class).id).collect()
    }

    pub fn num_support(&self) -> usize {
        self.classes.iter().map(|c| c.support.len()).sum()
    }

    pub fn num_query(&self) -> usize {
        self.classes.iter().map(|c| c.query.len()).sum()
    }
}

/// `n` draws from `pool`: distinct while the pool lasts, then uniform with
/// replacement.
pub(crate) fn draw_graph<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    let mut picked: Vec<usize> = pool.sample(rng, n.min(pool.len())).copied().collect();
    while picked.len() < n {
        picked.push(*pool.choose(rng).expect("non-empty pool"));
    }
    picked
}

/// Draws impressions for one class without reuse; errors if the class is too small.
fn draw_exclusive<R: Rng + ?Sized>(r: usize, graphs: usize, n: usize, rng: &mut R) -> Option<Vec<Vec<usize>>> {
    if r < graphs * n {
        return None;
    }
    let mut idx: Vec<usize> = (0..r).collect();
    idx.shuffle(rng);
    Some(idx[..graphs * n].chunks(n).map(<[usize]>::to_vec).collect())
}

pub fn sample_class<R: Rng + ?Sized>(ds: &Dataset, class: usize, spec: &EpisodeSpec, rng: &mut R) -> Result<ClassDraw> {
    let r = ds.class(class).impressions.len();
    let (k, q, n) = (
        spec.graphs_per_class,
        spec.query_graphs_per_class,
        spec.images_per_graph,
    );
    if !spec.sample_with_replacement {
        let mut graphs = draw_exclusive(r, k + q, n, rng).ok_or_else(|| {
            Error::Dataset(format!(
                "class {} has {r} impressions, {} needed without replacement",
                ds.class(class).id,
                (k + q) * n
            ))
        })?;
        let query = graphs.split_off(k);
        return Ok(ClassDraw {
            class,
            support: graphs,
            query,
        });
    }
    let (support_pool, query_pool): (Vec<usize>, Vec<usize>) = if r >= n * (k + q) {
        let mut idx: Vec<usize> = (0..r).collect();
        idx.shuffle(rng);
        let q_size = r * q / (k + q);
        let query_pool = idx.split_off(r - q_size);
        (idx, query_pool)
    } else {
        debug!(
            "class {}: {r} impressions < {}, support and query may overlap",
            ds.class(class).id,
            n * (k + q)
        );
        ((0..r).collect(), (0..r).collect())
    };
    Ok(ClassDraw {
        class,
        support: (0..k).map(|_| draw_graph(&support_pool, n, rng)).collect(),
        query: (0..q).map(|_| draw_graph(&query_pool, n, rng)).collect(),
    })
}

/// Samples `C` distinct classes uniformly, then support and query graphs per class.
pub fn sample_episode(ds: &Dataset, spec: &EpisodeSpec, seed: u64) -> Result<EpisodePlan> {
    sample_episode_with(ds, spec, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn sample_episode_with<R: Rng + ?Sized>(ds: &Dataset, spec: &EpisodeSpec, rng: &mut R) -> Result<EpisodePlan> {
    spec.validate()?;
    if ds.num_classes() < spec.ways {
        return Err(Error::InsufficientClasses {
            needed: spec.ways,
            available: ds.num_classes(),
        });
    }
    let all: Vec<usize> = (0..ds.num_classes()).collect();
    let chosen: Vec<usize> = all.sample(rng, spec.ways).copied().collect();
    let classes = chosen
        .into_iter()
        .map(|c| sample_class(ds, c, spec, rng))
        .collect::<Result<_>>()?;
    Ok(EpisodePlan { classes })
}

/// Derives a per-episode seed from a base seed, so episodes can be sampled
/// independently and in any order.
pub fn episode_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index.wrapping_add(1));
    rng.random()
}
