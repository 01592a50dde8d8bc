//! The full network: optional CNN encoder, PGNN stack and projection, plus
//! the episode-level forward pass shared by training and evaluation.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassData, ClassId, Dataset, Impression, Sample, SampleKind};
use crate::encoder::{BnMode, CnnEncoder, EncoderConfig, Preset};
use crate::error::{Error, Result};
use crate::graph::{build_graph, EpisodePlan, Role};
use crate::numerics::{BatchStats, ParamSet, Tape, Tensor, Var};
use crate::par::{self, Exec};
use crate::pgnn::{GraphBatch, Pgnn, PgnnConfig, PgnnOutput};

/// Images encoded per inference batch.
const EMBED_CHUNK: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// `None` when the dataset already holds embeddings.
    pub encoder: Option<EncoderConfig>,
    pub pgnn: PgnnConfig,
}

impl ModelConfig {
    pub fn preset(p: Preset) -> Self {
        ModelConfig {
            encoder: Some(EncoderConfig::preset(p)),
            pgnn: PgnnConfig::preset(p),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pgnn.validate()?;
        if let Some(enc) = &self.encoder {
            enc.validate()?;
            if enc.embed_dim != self.pgnn.input_dim() {
                return Err(Error::Config(format!(
                    "encoder embed_dim {} does not match pgnn input width {}",
                    enc.embed_dim,
                    self.pgnn.input_dim()
                )));
            }
        }
        Ok(())
    }

    /// Checks that the dataset's samples fit the model input.
    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        match (ds.kind(), &self.encoder) {
            (SampleKind::Images { height, width }, Some(enc)) => {
                if height != enc.input_hw || width != enc.input_hw {
                    return Err(Error::Dataset(format!(
                        "images are {height}x{width}, encoder expects {0}x{0}",
                        enc.input_hw
                    )));
                }
                Ok(())
            }
            (SampleKind::Images { .. }, None) => Err(Error::Dataset("image dataset needs an encoder".into())),
            (SampleKind::Embeddings { dim }, _) if dim != self.pgnn.input_dim() => Err(Error::Dataset(format!(
                "embeddings have width {dim}, pgnn expects {}",
                self.pgnn.input_dim()
            ))),
            (SampleKind::Embeddings { .. }, _) => Ok(()),
        }
    }

    pub fn num_params(&self) -> usize {
        self.encoder.as_ref().map_or(0, EncoderConfig::num_params) + self.pgnn.num_params()
    }
}

/// One graph's inputs: indices into a sample list.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphInput {
    pub items: Vec<usize>,
    pub class_id: ClassId,
    pub role: Role,
}

/// Episode forward results on a tape.
#[derive(Clone, Debug)]
pub struct EpisodeForward {
    /// `[C x d]` mean of each class's support prototypes, in plan order.
    pub class_protos: Var,
    /// `[C*Q x d]` refined query prototypes.
    pub queries: Var,
    /// Class index (into `class_ids`) of every query row.
    pub targets: Vec<usize>,
    pub class_ids: Vec<ClassId>,
    pub stats: Vec<BatchStats>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    pub params: ParamSet,
    encoder: Option<CnnEncoder>,
    pgnn: Pgnn,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let encoder = match &cfg.encoder {
            Some(e) => Some(CnnEncoder::new(e.clone(), &mut params, &mut rng)?),
            None => None,
        };
        let pgnn = Pgnn::new(cfg.pgnn.clone(), &mut params, &mut rng)?;
        Ok(Model {
            cfg,
            params,
            encoder,
            pgnn,
        })
    }

    /// Rebuilds a model around restored parameters.
    pub fn from_params(cfg: ModelConfig, params: ParamSet) -> Result<Self> {
        cfg.validate()?;
        let encoder = match &cfg.encoder {
            Some(e) => Some(CnnEncoder::from_params(e.clone(), &params)?),
            None => None,
        };
        let pgnn = Pgnn::from_params(cfg.pgnn.clone(), &params)?;
        Ok(Model {
            cfg,
            params,
            encoder,
            pgnn,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> Option<&CnnEncoder> {
        self.encoder.as_ref()
    }

    pub fn encoder_mut(&mut self) -> Option<&mut CnnEncoder> {
        self.encoder.as_mut()
    }

    pub fn pgnn(&self) -> &Pgnn {
        &self.pgnn
    }

    /// Initial node embeddings `[n x d]` of the given samples.
    pub fn embed(&self, tape: &mut Tape, samples: &[&Sample], mode: BnMode) -> Result<(Var, Vec<BatchStats>)> {
        let first = samples.first().ok_or(Error::Empty("embed"))?;
        match (first, &self.encoder) {
            (Sample::Embedding(_), _) => {
                let d = self.cfg.pgnn.input_dim();
                let mut data = Vec::with_capacity(samples.len() * d);
                for s in samples {
                    match s {
                        Sample::Embedding(v) if v.len() == d => data.extend_from_slice(v),
                        _ => return Err(Error::Dataset(format!("expected embeddings of width {d}"))),
                    }
                }
                Ok((tape.constant(Tensor::matrix(samples.len(), d, data)?), Vec::new()))
            }
            (Sample::Image(_), Some(enc)) => {
                let images = samples
                    .iter()
                    .map(|s| match s {
                        Sample::Image(img) => Ok(img),
                        Sample::Embedding(_) => Err(Error::Dataset("mixed sample kinds".into())),
                    })
                    .collect::<Result<Vec<_>>>()?;
                enc.forward(tape, &self.params, &images, mode)
            }
            (Sample::Image(_), None) => Err(Error::Dataset("image samples need an encoder".into())),
        }
    }

    /// Embeds every sample once, builds the graphs and runs the PGNN.
    pub fn forward_graphs(
        &self,
        tape: &mut Tape,
        samples: &[&Sample],
        graphs: &[GraphInput],
        mode: BnMode,
    ) -> Result<(PgnnOutput, Vec<BatchStats>)> {
        let (emb, stats) = self.embed(tape, samples, mode)?;
        Ok((self.forward_embedded(tape, emb, graphs)?, stats))
    }

    /// Builds graphs over rows of `emb [n x d]` and runs the PGNN.
    pub fn forward_embedded(&self, tape: &mut Tape, emb: Var, graphs: &[GraphInput]) -> Result<PgnnOutput> {
        let built = graphs
            .iter()
            .map(|g| {
                let rows = tape.gather_rows(emb, &g.items)?;
                build_graph(tape, rows, g.class_id.clone(), g.role)
            })
            .collect::<Result<Vec<_>>>()?;
        let batch = GraphBatch::from_graphs(tape, &built)?;
        self.pgnn.forward(tape, &self.params, &batch)
    }

    /// Forward pass of one sampled episode. `samples` maps `(class, impression)`
    /// indices of the plan to the sample actually fed (possibly augmented).
    pub fn forward_episode<'a>(
        &self,
        tape: &mut Tape,
        ds: &Dataset,
        plan: &EpisodePlan,
        mode: BnMode,
        sample: &dyn Fn(usize, usize) -> std::borrow::Cow<'a, Sample>,
    ) -> Result<EpisodeForward> {
        let mut index: HashMap<(usize, usize), usize> = HashMap::new();
        let mut owned = Vec::new();
        let mut graphs = Vec::new();
        let mut intern = |c: usize, i: usize, owned: &mut Vec<std::borrow::Cow<'a, Sample>>| {
            *index.entry((c, i)).or_insert_with(|| {
                owned.push(sample(c, i));
                owned.len() - 1
            })
        };
        for role in [Role::Support, Role::Query] {
            for draw in &plan.classes {
                let list = if role == Role::Support {
                    &draw.support
                } else {
                    &draw.query
                };
                for g in list {
                    let items = g.iter().map(|&i| intern(draw.class, i, &mut owned)).collect();
                    graphs.push(GraphInput {
                        items,
                        class_id: ds.class(draw.class).id.clone(),
                        role,
                    });
                }
            }
        }
        let refs: Vec<&Sample> = owned.iter().map(|c| c.as_ref()).collect();
        let (out, stats) = self.forward_graphs(tape, &refs, &graphs, mode)?;

        let c = plan.classes.len();
        let n_support = plan.num_support();
        let g_total = graphs.len();
        let mut avg = vec![0.0; c * g_total];
        let mut row = 0;
        for (k, draw) in plan.classes.iter().enumerate() {
            let kk = draw.support.len();
            for _ in 0..kk {
                avg[k * g_total + row] = 1.0 / kk as f64;
                row += 1;
            }
        }
        let avg = tape.constant(Tensor::matrix(c, g_total, avg)?);
        let class_protos = tape.matmul(avg, out.protos)?;
        let query_rows: Vec<usize> = (n_support..g_total).collect();
        let queries = tape.gather_rows(out.protos, &query_rows)?;
        let targets = plan
            .classes
            .iter()
            .enumerate()
            .flat_map(|(k, d)| std::iter::repeat_n(k, d.query.len()))
            .collect();
        Ok(EpisodeForward {
            class_protos,
            queries,
            targets,
            class_ids: plan.class_ids(ds).into_iter().cloned().collect(),
            stats,
        })
    }

    /// Refined prototypes of graphs over precomputed embedding rows, one
    /// plain vector per graph.
    pub fn refine(&self, rows: &[&[f64]], graphs: &[GraphInput]) -> Result<Vec<Vec<f64>>> {
        let first = rows.first().ok_or(Error::Empty("refine"))?;
        let d = first.len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("refine", &[d], &[r.len()]));
            }
            data.extend_from_slice(r);
        }
        let mut tape = Tape::inference();
        let emb = tape.constant(Tensor::matrix(rows.len(), d, data)?);
        let out = self.forward_embedded(&mut tape, emb, graphs)?;
        let t = tape.value(out.protos);
        Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
    }

    /// The dataset with every image replaced by its encoder embedding
    /// (running BN statistics). Embedding datasets are returned unchanged.
    pub fn embed_dataset(&self, ds: &Dataset, exec: Exec) -> Result<Dataset> {
        if let SampleKind::Embeddings { .. } = ds.kind() {
            self.cfg.check_dataset(ds)?;
            return Ok(ds.clone());
        }
        self.cfg.check_dataset(ds)?;
        let flat: Vec<(usize, usize)> = ds
            .classes()
            .iter()
            .enumerate()
            .flat_map(|(c, cl)| (0..cl.impressions.len()).map(move |i| (c, i)))
            .collect();
        let chunks: Vec<&[(usize, usize)]> = flat.chunks(EMBED_CHUNK).collect();
        let rows = par::try_map(exec, chunks.len(), |k| -> Result<Vec<Vec<f64>>> {
            let samples: Vec<&Sample> = chunks[k]
                .iter()
                .map(|&(c, i)| &ds.class(c).impressions[i].sample)
                .collect();
            let mut tape = Tape::inference();
            let (emb, _) = self.embed(&mut tape, &samples, BnMode::Eval)?;
            let t = tape.value(emb);
            Ok((0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect())
        })?;
        let mut rows = rows.into_iter().flatten();
        let classes = ds
            .classes()
            .iter()
            .map(|cl| ClassData {
                id: cl.id.clone(),
                impressions: cl
                    .impressions
                    .iter()
                    .map(|imp| Impression {
                        id: imp.id.clone(),
                        sample: Sample::Embedding(rows.next().expect("one row per impression")),
                    })
                    .collect(),
            })
            .collect();
        Dataset::new(classes)
    }
}
