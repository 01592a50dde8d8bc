//! Graph and PGNN properties: adjacency, relabeling symmetry, batch order,
//! query isolation, episode sampling.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::oracles;
use proton::dataset::{ClassData, Dataset, Impression, Sample};
use proton::encoder::Preset;
use proton::graph::{build_graph, sample_episode, Adjacency, EpisodeSpec, Role};
use proton::numerics::{ParamSet, Tape, Tensor};
use proton::pgnn::{GraphBatch, Pgnn, PgnnConfig};

const D: usize = 8;

fn small_pgnn(cfg: PgnnConfig, seed: u64) -> (Pgnn, ParamSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    let net = Pgnn::new(cfg, &mut params, &mut rng).unwrap();
    params.randomize(0.4, &mut rng);
    (net, params)
}

fn small_cfg() -> PgnnConfig {
    PgnnConfig {
        layer_dims: vec![D, 6, 5],
        ..PgnnConfig::preset(Preset::Tiny)
    }
}

/// Runs the PGNN over graphs given as row-major `[n x D]` blocks; returns
/// per-graph node rows and prototypes.
fn run(net: &Pgnn, params: &ParamSet, graphs: &[(Vec<f64>, Role)]) -> (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) {
    let mut tape = Tape::inference();
    let built: Vec<_> = graphs
        .iter()
        .enumerate()
        .map(|(k, (data, role))| {
            let n = data.len() / D;
            let v = tape.constant(Tensor::matrix(n, D, data.clone()).unwrap());
            build_graph(&mut tape, v, proton::dataset::ClassId(format!("g{k}")), *role).unwrap()
        })
        .collect();
    let batch = GraphBatch::from_graphs(&mut tape, &built).unwrap();
    let out = net.forward(&mut tape, params, &batch).unwrap();
    let (h, p) = (tape.value(out.nodes), tape.value(out.protos));
    let mut nodes = Vec::new();
    let mut row = 0;
    for (data, _) in graphs {
        let n = data.len() / D;
        nodes.push((row..row + n).map(|r| h.row_slice(r).to_vec()).collect());
        row += n;
    }
    (nodes, (0..p.rows()).map(|r| p.row_slice(r).to_vec()).collect())
}

fn graph_data(max_nodes: usize) -> impl Strategy<Value = Vec<f64>> {
    (1..=max_nodes).prop_flat_map(|n| prop::collection::vec(-2.0f64..2.0, n * D))
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

fn relabel(data: &[f64], perm: &[usize]) -> Vec<f64> {
    perm.iter()
        .flat_map(|&i| data[i * D..(i + 1) * D].iter().copied())
        .collect()
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

pub fn adjacency_matches_definition(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(1usize..=12,), |(n,)| {
            let a = Adjacency::new(n).unwrap();
            prop_assert_eq!(a.size(), n + 1);
            prop_assert_eq!(a.prototype_index(), n);
            for i in 0..=n {
                for j in 0..=n {
                    prop_assert_eq!(a.is_edge(i, j), oracles::cycle_edge(n, i, j), "n={} i={} j={}", n, i, j);
                }
                let brute = (0..=n).filter(|&j| oracles::cycle_edge(n, i, j)).count();
                prop_assert_eq!(a.degree(i), brute);
            }
            for i in 0..n {
                let mut nb = a.cycle_neighbors(i);
                nb.sort_unstable();
                let expect: Vec<usize> = (0..n).filter(|&j| oracles::cycle_edge(n, i, j)).collect();
                prop_assert_eq!(nb, expect);
            }

            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn cyclic_relabeling_permutes_nodes_and_keeps_prototype(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(graph_data(7), graph_data(4), 0usize..7, any::<bool>(), 0u64..1000),
            |(data, other, shift, reflect, seed)| {
                let n = data.len() / D;
                let perm: Vec<usize> = (0..n)
                    .map(|i| if reflect { (n + shift - i) % n } else { (i + shift) % n })
                    .collect();
                let (net, params) = small_pgnn(small_cfg(), seed);
                let (h0, p0) = run(
                    &net,
                    &params,
                    &[(data.clone(), Role::Support), (other.clone(), Role::Support)],
                );
                let (h1, p1) = run(
                    &net,
                    &params,
                    &[(relabel(&data, &perm), Role::Support), (other, Role::Support)],
                );
                for (k, &src) in perm.iter().enumerate() {
                    prop_assert!(close(&h1[0][k], &h0[0][src], 1e-10));
                }
                prop_assert!(close(&p1[0], &p0[0], 1e-10));
                prop_assert!(close(&p1[1], &p0[1], 1e-10));

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn graph_order_in_batch_is_irrelevant(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(prop::collection::vec(graph_data(5), 2..5), 0u64..1000),
            |(graphs, seed)| {
                let (net, params) = small_pgnn(small_cfg(), seed);
                let fwd: Vec<_> = graphs.iter().map(|g| (g.clone(), Role::Support)).collect();
                let rev: Vec<_> = fwd.iter().rev().cloned().collect();
                let (_, p0) = run(&net, &params, &fwd);
                let (_, p1) = run(&net, &params, &rev);
                let g = graphs.len();
                for k in 0..g {
                    prop_assert!(close(&p0[k], &p1[g - 1 - k], 1e-10));
                }

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn query_graphs_are_isolated(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(
                prop::collection::vec(graph_data(5), 1..4),
                prop::collection::vec(graph_data(5), 2..4),
                prop::collection::vec(-1.0f64..1.0, 5 * D),
                0usize..4,
                0u64..1000,
            ),
            |(support, queries, bump, which, seed)| {
                let (net, params) = small_pgnn(small_cfg(), seed);
                let mut graphs: Vec<(Vec<f64>, Role)> = support.into_iter().map(|g| (g, Role::Support)).collect();
                let first_query = graphs.len();
                graphs.extend(queries.into_iter().map(|g| (g, Role::Query)));
                let target = first_query + which % (graphs.len() - first_query);
                let (h0, p0) = run(&net, &params, &graphs);
                let mut perturbed = graphs.clone();
                for (v, b) in perturbed[target].0.iter_mut().zip(&bump) {
                    *v += b;
                }
                let (h1, p1) = run(&net, &params, &perturbed);
                for k in (0..graphs.len()).filter(|&k| k != target) {
                    prop_assert_eq!(&h0[k], &h1[k]);
                    prop_assert_eq!(&p0[k], &p1[k]);
                }
                // Alone in a batch, a query graph gives the same result as inside it.
                let (_, alone) = run(&net, &params, &[graphs[target].clone()]);
                prop_assert_eq!(&alone[0], &p0[target]);

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn episodes_are_well_formed(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(
                2usize..9,
                1usize..12,
                2usize..6,
                1usize..4,
                1usize..4,
                any::<bool>(),
                any::<u64>(),
            ),
            |(classes, per_class, ways, k, n, replace, seed)| {
                let ds = Dataset::new(
                    (0..classes)
                        .map(|c| ClassData {
                            id: proton::dataset::ClassId(format!("c{c}")),
                            impressions: (0..per_class)
                                .map(|i| Impression {
                                    id: format!("i{i:02}"),
                                    sample: Sample::Embedding(vec![c as f64, i as f64]),
                                })
                                .collect(),
                        })
                        .collect(),
                )
                .unwrap();
                let spec = EpisodeSpec {
                    ways,
                    graphs_per_class: k,
                    images_per_graph: n,
                    query_graphs_per_class: 1,
                    sample_with_replacement: replace,
                };
                let plan = sample_episode(&ds, &spec, seed);
                let needed = n * (k + 1);
                if ways > classes || (!replace && per_class < needed) {
                    prop_assert!(plan.is_err());
                    return Ok(());
                }
                let plan = plan.unwrap();
                prop_assert_eq!(plan.classes.len(), ways);
                let mut seen: Vec<usize> = plan.classes.iter().map(|d| d.class).collect();
                seen.sort_unstable();
                seen.dedup();
                prop_assert_eq!(seen.len(), ways);
                for d in &plan.classes {
                    prop_assert_eq!(d.support.len(), k);
                    prop_assert_eq!(d.query.len(), 1);
                    prop_assert!(d
                        .support
                        .iter()
                        .chain(&d.query)
                        .all(|g| g.len() == n && g.iter().all(|&i| i < per_class)));
                    if !replace || per_class >= needed {
                        let s: Vec<usize> = d.support.iter().flatten().copied().collect();
                        prop_assert!(d.query.iter().flatten().all(|i| !s.contains(i)));
                    }
                }
                prop_assert_eq!(sample_episode(&ds, &spec, seed).unwrap(), plan);

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}
