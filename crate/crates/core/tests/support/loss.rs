//! Attention, gates, classification and loss properties.

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};

use proton::dataset::ClassId;
use proton::numerics::{sq_euclid, Tape, Tensor};
use proton::pgnn::attention_weights;
use proton::protoloss::{classify, episodic_loss, hybrid_loss, hybrid_value, overall_loss, PrototypeRegistry};

fn vecs(n: std::ops::Range<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
}

fn matrix(rows: &[Vec<f64>]) -> Tensor {
    Tensor::matrix(rows.len(), rows[0].len(), rows.concat()).unwrap()
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

pub fn attention_is_a_distribution_and_follows_neighbor_order(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(
                prop::collection::vec(-2.0f64..2.0, 4),
                vecs(1..6, 4),
                prop::collection::vec(-1.0f64..1.0, 16),
            ),
            |(h, nb, w)| {
                let refs: Vec<&[f64]> = nb.iter().map(Vec::as_slice).collect();
                let a = attention_weights(&h, &refs, &w).unwrap();
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(a.iter().all(|&x| (0.0..=1.0).contains(&x)));
                let rev: Vec<&[f64]> = refs.iter().rev().copied().collect();
                let b = attention_weights(&h, &rev, &w).unwrap();
                for (x, y) in a.iter().zip(b.iter().rev()) {
                    prop_assert!((x - y).abs() < 1e-12);
                }

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn logistic_gates_stay_in_unit_interval(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(prop::collection::vec(-800.0f64..800.0, 1..40),), |(x,)| {
            let mut tape = Tape::inference();
            let v = tape.constant(Tensor::vector(x));
            let g = tape.logistic(v);
            prop_assert!(tape.value(g).data().iter().all(|&s| (0.0..=1.0).contains(&s)));

            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn classify_is_translation_invariant(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(
                prop::collection::vec(-3.0f64..3.0, 3),
                vecs(2..6, 3),
                prop::collection::vec(-5.0f64..5.0, 3),
            ),
            |(q, protos, shift)| {
                let refs: Vec<&[f64]> = protos.iter().map(Vec::as_slice).collect();
                let p = classify(&q, &refs).unwrap();
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let mv = |v: &[f64]| v.iter().zip(&shift).map(|(a, b)| a + b).collect::<Vec<_>>();
                let moved: Vec<Vec<f64>> = protos.iter().map(|v| mv(v)).collect();
                let mrefs: Vec<&[f64]> = moved.iter().map(Vec::as_slice).collect();
                let p2 = classify(&mv(&q), &mrefs).unwrap();
                for (a, b) in p.iter().zip(&p2) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
                // The most probable class is the nearest one.
                let best = (0..protos.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
                let nearest = (0..protos.len())
                    .min_by(|&a, &b| sq_euclid(&q, &protos[a]).total_cmp(&sq_euclid(&q, &protos[b])))
                    .unwrap();
                prop_assert!(sq_euclid(&q, &protos[best]) == sq_euclid(&q, &protos[nearest]));

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn episodic_loss_is_nonnegative_and_matches_classify(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(vecs(2..6, 3), vecs(1..5, 3), prop::collection::vec(0usize..100, 4)),
            |(protos, queries, tseed)| {
                let c = protos.len();
                let targets: Vec<usize> = (0..queries.len()).map(|i| tseed[i] % c).collect();
                let mut tape = Tape::inference();
                let q = tape.constant(matrix(&queries));
                let p = tape.constant(matrix(&protos));
                let loss_var = episodic_loss(&mut tape, q, p, &targets).unwrap();
                let loss = tape.scalar(loss_var);
                prop_assert!(loss >= 0.0);
                let refs: Vec<&[f64]> = protos.iter().map(Vec::as_slice).collect();
                let expect = queries
                    .iter()
                    .zip(&targets)
                    .map(|(qv, &t)| -classify(qv, &refs).unwrap()[t].ln())
                    .sum::<f64>()
                    / queries.len() as f64;
                prop_assert!((loss - expect).abs() <= 1e-9 * (1.0 + expect));

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn hybrid_loss_is_the_convex_combination(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(0.0f64..10.0, 0.0f64..10.0, 0.0f64..=1.0), |(e, o, lambda)| {
            let mut tape = Tape::inference();
            let ev = tape.constant(Tensor::scalar(e));
            let ov = tape.constant(Tensor::scalar(o));
            let h = hybrid_loss(&mut tape, Some(ev), Some(ov), lambda).unwrap();
            let v = hybrid_value(e, o, lambda).unwrap();
            prop_assert!((tape.scalar(h) - v).abs() <= 1e-12 * (1.0 + v));
            prop_assert!(v >= e.min(o) - 1e-12 && v <= e.max(o) + 1e-12);

            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn registry_updates_stay_between_old_and_new(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(
                0.0f64..0.99,
                prop::collection::vec(-3.0f64..3.0, 4),
                prop::collection::vec(-3.0f64..3.0, 4),
            ),
            |(mu, first, second)| {
                let mut reg = PrototypeRegistry::new(mu).unwrap();
                let id = ClassId("a".into());
                reg.update(&id, &first).unwrap();
                prop_assert_eq!(reg.get(&id).unwrap(), first.as_slice());
                reg.update(&id, &second).unwrap();
                for ((v, a), b) in reg.get(&id).unwrap().iter().zip(&first).zip(&second) {
                    prop_assert!(*v >= a.min(*b) - 1e-12 && *v <= a.max(*b) + 1e-12);
                    prop_assert!((v - (mu * a + (1.0 - mu) * b)).abs() < 1e-12);
                }
                prop_assert_eq!(reg.count(&id), Some(2));
                // Repeating one vector converges to it.
                for _ in 0..2000 {
                    reg.update(&id, &second).unwrap();
                }
                for (v, b) in reg.get(&id).unwrap().iter().zip(&second) {
                    prop_assert!((v - b).abs() < 1e-6);
                }

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn overall_loss_bounds_episodic_loss(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(vecs(2..5, 3), vecs(0..4, 3), vecs(1..4, 3)),
            |(protos, extra, queries)| {
                let c = protos.len();
                let targets: Vec<usize> = (0..queries.len()).map(|i| i % c).collect();
                let ids: Vec<ClassId> = (0..c).map(|k| ClassId(format!("e{k}"))).collect();
                let mut reg = PrototypeRegistry::new(0.5).unwrap();
                for (k, v) in protos.iter().enumerate() {
                    reg.update(&ids[k], v).unwrap();
                }
                let mut tape = Tape::inference();
                let q = tape.constant(matrix(&queries));
                let p = tape.constant(matrix(&protos));
                let ep_var = episodic_loss(&mut tape, q, p, &targets).unwrap();
                let ep = tape.scalar(ep_var);
                let same_var = overall_loss(&mut tape, q, p, &ids, &targets, &reg).unwrap();
                let same = tape.scalar(same_var);
                prop_assert_eq!(ep.to_bits(), same.to_bits());
                for (k, v) in extra.iter().enumerate() {
                    reg.update(&ClassId(format!("x{k}")), v).unwrap();
                }
                let more_var = overall_loss(&mut tape, q, p, &ids, &targets, &reg).unwrap();
                let more = tape.scalar(more_var);
                prop_assert!(more >= ep - 1e-12);

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}
