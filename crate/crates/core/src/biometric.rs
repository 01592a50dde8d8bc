//! Identification (CMC) and verification (ROC, EER, AUC) protocols over
//! refined prototypes.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, Dataset, SampleKind};
use crate::error::{Error, Result};
use crate::graph::{draw_graph, episode_seed, Role};
use crate::model::{GraphInput, Model};
use crate::numerics::euclid;
use crate::par::{self, Exec};
use crate::protoloss::class_prototype;

/// Per-class split of impression indices into enrollment and test sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnrollmentPartition {
    pub enroll: Vec<usize>,
    pub test: Vec<usize>,
}

/// `r > K*N`: the first `K*N` impressions enroll and the rest are tested;
/// otherwise the first `floor(r/2)` enroll. Indices follow impression-id order.
pub fn partition_enrollment(r: usize, k: usize, n: usize) -> Result<EnrollmentPartition> {
    if r < 2 {
        return Err(Error::Dataset(format!(
            "class needs >= 2 impressions for enrollment, has {r}"
        )));
    }
    let cut = if r > k * n { k * n } else { r / 2 };
    Ok(EnrollmentPartition {
        enroll: (0..cut).collect(),
        test: (cut..r).collect(),
    })
}

/// Gallery classes by ascending Euclidean distance to `probe`, ties by class id.
pub fn identify<'a>(probe: &[f64], gallery: &'a [(ClassId, Vec<f64>)]) -> Result<Vec<(&'a ClassId, f64)>> {
    if gallery.is_empty() {
        return Err(Error::Empty("identify: empty gallery"));
    }
    let mut ranked = gallery
        .iter()
        .map(|(id, v)| {
            if v.len() != probe.len() {
                Err(Error::shape("identify", &[probe.len()], &[v.len()]))
            } else {
                Ok((id, euclid(probe, v)))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    Ok(ranked)
}

/// 1-based rank of `truth` in a ranked list.
pub fn rank_of(ranked: &[(&ClassId, f64)], truth: &ClassId) -> Option<usize> {
    ranked.iter().position(|(id, _)| *id == truth).map(|p| p + 1)
}

/// `cmc[k-1]` is the fraction of probes whose true class is at rank `<= k`.
pub fn cmc_curve(ranks: &[usize], gallery_size: usize) -> Result<Vec<f64>> {
    if ranks.is_empty() {
        return Err(Error::Empty("cmc_curve: no probes"));
    }
    let mut hist = vec![0usize; gallery_size + 1];
    for &r in ranks {
        if r == 0 || r > gallery_size {
            return Err(Error::Dataset(format!("rank {r} outside 1..={gallery_size}")));
        }
        hist[r] += 1;
    }
    let mut acc = 0;
    Ok((1..=gallery_size)
        .map(|k| {
            acc += hist[k];
            acc as f64 / ranks.len() as f64
        })
        .collect())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub genuine: Vec<f64>,
    pub imposter: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    /// `(FAR, TPR)` points from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    pub eer: f64,
    pub auc: f64,
}

/// Sweeps every distinct score as an acceptance threshold (`score <= t`
/// accepts). EER interpolates linearly where FAR crosses FRR; AUC is the
/// trapezoid area, accumulated in integer counts so ties count one half.
pub fn roc_eer_auc(scores: &ScoreSet) -> Result<RocCurve> {
    let (g, i) = (scores.genuine.len(), scores.imposter.len());
    if g == 0 || i == 0 {
        return Err(Error::Empty("roc_eer_auc needs genuine and imposter scores"));
    }
    if scores.genuine.iter().chain(&scores.imposter).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("verification score".into()));
    }
    let mut all: Vec<(f64, bool)> = scores
        .genuine
        .iter()
        .map(|&s| (s, true))
        .chain(scores.imposter.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut counts = vec![(0u64, 0u64)];
    let (mut tp, mut fa) = (0u64, 0u64);
    let mut k = 0;
    while k < all.len() {
        let t = all[k].0;
        while k < all.len() && all[k].0 == t {
            if all[k].1 {
                tp += 1;
            } else {
                fa += 1;
            }
            k += 1;
        }
        counts.push((fa, tp));
    }
    let (gf, imf) = (g as f64, i as f64);
    let points: Vec<(f64, f64)> = counts.iter().map(|&(f, t)| (f as f64 / imf, t as f64 / gf)).collect();

    let mut twice_area: u128 = 0;
    for w in counts.windows(2) {
        twice_area += (w[1].0 - w[0].0) as u128 * (w[0].1 + w[1].1) as u128;
    }
    let auc = twice_area as f64 / (2.0 * gf * imf);

    // FAR - FRR is non-decreasing along the sweep: -1 at the start, +1 at the end.
    let rates = |&(f, t): &(u64, u64)| (f as f64 / imf, (g as u64 - t) as f64 / gf);
    let mut eer = 0.5;
    for w in counts.windows(2) {
        let ((far0, frr0), (far1, frr1)) = (rates(&w[0]), rates(&w[1]));
        let (d0, d1) = (far0 - frr0, far1 - frr1);
        if d0 == 0.0 {
            eer = far0;
            break;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let s = -d0 / (d1 - d0);
            eer = far0 + s * (far1 - far0);
            break;
        }
    }
    Ok(RocCurve { points, eer, auc })
}

/// Rows for one class: embeddings of `idx` plus noisy copies when the set is
/// smaller than a graph.
fn fill_graphs<R: Rng + ?Sized>(
    rows: &mut Vec<Vec<f64>>,
    source: &[&[f64]],
    idx: &[usize],
    graphs: usize,
    n: usize,
    noise_rel: f64,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    let base = rows.len();
    let mut local: Vec<usize> = Vec::with_capacity(idx.len().max(n));
    for &i in idx {
        rows.push(source[i].to_vec());
        local.push(base + local.len());
    }
    if local.len() < n {
        let originals = local.clone();
        while local.len() < n {
            let &src = originals
                .choose(rng)
                .ok_or(Error::Empty("no impressions to backfill from"))?;
            let v = &rows[src];
            let rms = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
            let sigma = noise_rel * rms;
            let noisy: Vec<f64> = if sigma > 0.0 {
                let dist = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
                v.iter().map(|x| x + dist.sample(rng)).collect()
            } else {
                v.clone()
            };
            rows.push(noisy);
            local.push(rows.len() - 1);
        }
    }
    Ok((0..graphs).map(|_| draw_graph(&local, n, rng)).collect())
}

fn embedding_rows(ds: &Dataset, class: usize) -> Vec<&[f64]> {
    ds.class(class).impressions.iter().map(|i| i.sample.values()).collect()
}

/// Mean refined prototype of `K` support graphs refined together.
fn support_prototype(model: &Model, rows: &[Vec<f64>], graphs: Vec<Vec<usize>>, id: &ClassId) -> Result<Vec<f64>> {
    let inputs: Vec<GraphInput> = graphs
        .into_iter()
        .map(|items| GraphInput {
            items,
            class_id: id.clone(),
            role: Role::Support,
        })
        .collect();
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let protos = model.refine(&refs, &inputs)?;
    class_prototype(&protos.iter().map(Vec::as_slice).collect::<Vec<_>>())
}

/// Refined prototype of one query graph processed on its own.
fn query_prototype(model: &Model, rows: &[Vec<f64>], items: Vec<usize>, id: &ClassId) -> Result<Vec<f64>> {
    let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
    let input = GraphInput {
        items,
        class_id: id.clone(),
        role: Role::Query,
    };
    Ok(model.refine(&refs, &[input])?.remove(0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub graphs_per_class: usize,
    pub images_per_graph: usize,
    /// Backfill noise as a fraction of the sample's RMS value.
    pub noise_rel: f64,
    pub pairs_per_kind: usize,
    pub episodes: usize,
    /// Set from the run seed rather than read from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            graphs_per_class: 4,
            images_per_graph: 5,
            noise_rel: 0.01,
            pairs_per_kind: 500,
            episodes: 100,
            seed: 42,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.graphs_per_class == 0 || self.images_per_graph == 0 || self.pairs_per_kind == 0 || self.episodes == 0 {
            return Err(Error::Config("eval counts must be positive".into()));
        }
        if !(self.noise_rel >= 0.0 && self.noise_rel.is_finite()) {
            return Err(Error::Config(format!("noise_rel {} must be >= 0", self.noise_rel)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Identification {
    /// Enrolled class prototypes, in dataset class order.
    pub gallery: Vec<(ClassId, Vec<f64>)>,
    /// Probe prototypes with their true class.
    pub probes: Vec<(ClassId, Vec<f64>)>,
    /// 1-based rank of the true class for every probe.
    pub ranks: Vec<usize>,
    pub cmc: Vec<f64>,
}

impl Identification {
    pub fn rank_k(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }
}

fn require_embeddings(ds: &Dataset) -> Result<()> {
    match ds.kind() {
        SampleKind::Embeddings { .. } => Ok(()),
        SampleKind::Images { .. } => Err(Error::Dataset("evaluation expects an embedded dataset".into())),
    }
}

/// Enrolls every class from its first impressions and identifies probe graphs
/// built from the remaining ones against the whole gallery. `emb` must come
/// from [`Model::embed_dataset`].
pub fn identification(model: &Model, emb: &Dataset, cfg: &EvalConfig, exec: Exec) -> Result<Identification> {
    cfg.validate()?;
    require_embeddings(emb)?;
    let (k, n) = (cfg.graphs_per_class, cfg.images_per_graph);
    let per_class = par::try_map(exec, emb.num_classes(), |c| -> Result<_> {
        let id = &emb.class(c).id;
        let src = embedding_rows(emb, c);
        let part = partition_enrollment(src.len(), k, n)?;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed, c as u64));
        let mut rows = Vec::new();
        let graphs = fill_graphs(&mut rows, &src, &part.enroll, k, n, cfg.noise_rel, &mut rng)?;
        let proto = support_prototype(model, &rows, graphs, id)?;
        let mut probes = Vec::new();
        for chunk in part.test.chunks(n) {
            let mut prow = Vec::new();
            let mut items = chunk.to_vec();
            if chunk.len() < n && part.test.len() >= n {
                // short tail: top up from the class's other test impressions
                let extra: Vec<usize> = part.test.iter().copied().filter(|i| !chunk.contains(i)).collect();
                items.extend(extra.sample(&mut rng, n - chunk.len()).copied());
            }
            let items = fill_graphs(&mut prow, &src, &items, 1, n, cfg.noise_rel, &mut rng)?;
            probes.push((
                id.clone(),
                query_prototype(model, &prow, items.into_iter().next().unwrap(), id)?,
            ));
        }
        Ok(((id.clone(), proto), probes))
    })?;
    let mut gallery = Vec::with_capacity(per_class.len());
    let mut probes = Vec::new();
    for (g, p) in per_class {
        gallery.push(g);
        probes.extend(p);
    }
    let ranks = probes
        .iter()
        .map(|(truth, v)| {
            let ranked = identify(v, &gallery)?;
            rank_of(&ranked, truth).ok_or_else(|| Error::Dataset(format!("class {truth} missing from gallery")))
        })
        .collect::<Result<Vec<_>>>()?;
    let cmc = cmc_curve(&ranks, gallery.len())?;
    Ok(Identification {
        gallery,
        probes,
        ranks,
        cmc,
    })
}

/// Splits a class's impressions into disjoint query / support subsets and
/// returns one query graph and `k` support graphs drawn from them.
fn pair_graphs<R: Rng + ?Sized>(r: usize, k: usize, n: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..r).collect();
    idx.shuffle(rng);
    if r >= n * (k + 1) {
        let support = idx.split_off(n);
        (idx, support[..k * n].to_vec())
    } else {
        let q = (r / (k + 1)).max(1);
        let support = idx.split_off(q);
        (idx, support)
    }
}

/// Genuine pairs compare a `K x N` enrollment prototype and a `1 x N` probe
/// prototype of the same class built from disjoint impressions; imposter
/// pairs take the two sides from different classes. Scores are Euclidean
/// distances.
pub fn verification_scores(model: &Model, emb: &Dataset, cfg: &EvalConfig, exec: Exec) -> Result<ScoreSet> {
    cfg.validate()?;
    require_embeddings(emb)?;
    let (k, n) = (cfg.graphs_per_class, cfg.images_per_graph);
    let eligible: Vec<usize> = (0..emb.num_classes())
        .filter(|&c| emb.class(c).impressions.len() >= 2)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Dataset("no class has >= 2 impressions for verification".into()));
    }
    if emb.num_classes() < 2 {
        return Err(Error::InsufficientClasses {
            needed: 2,
            available: emb.num_classes(),
        });
    }
    let total = 2 * cfg.pairs_per_kind;
    let scores = par::try_map(exec, total, |p| -> Result<(bool, f64)> {
        let genuine = p < cfg.pairs_per_kind;
        let mut rng = ChaCha8Rng::seed_from_u64(episode_seed(cfg.seed ^ 0x5eed, p as u64));
        let (a, b) = if genuine {
            let c = *eligible.choose(&mut rng).unwrap();
            (c, c)
        } else {
            let a = rng.random_range(0..emb.num_classes());
            let mut b = rng.random_range(0..emb.num_classes() - 1);
            if b >= a {
                b += 1;
            }
            (a, b)
        };
        let (src_a, src_b) = (embedding_rows(emb, a), embedding_rows(emb, b));
        let (support_idx, query_idx) = if genuine {
            let (q, s) = pair_graphs(src_a.len(), k, n, &mut rng);
            (s, q)
        } else {
            ((0..src_a.len()).collect(), (0..src_b.len()).collect())
        };
        let mut srows = Vec::new();
        let sgraphs = fill_graphs(&mut srows, &src_a, &support_idx, k, n, cfg.noise_rel, &mut rng)?;
        let mut qrows = Vec::new();
        let qgraph = fill_graphs(&mut qrows, &src_b, &query_idx, 1, n, cfg.noise_rel, &mut rng)?;
        let enrolled = support_prototype(model, &srows, sgraphs, &emb.class(a).id)?;
        let probe = query_prototype(model, &qrows, qgraph.into_iter().next().unwrap(), &emb.class(b).id)?;
        Ok((genuine, euclid(&enrolled, &probe)))
    })?;
    let mut set = ScoreSet::default();
    for (genuine, s) in scores {
        if genuine {
            set.genuine.push(s);
        } else {
            set.imposter.push(s);
        }
    }
    Ok(set)
}
