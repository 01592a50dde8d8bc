//! Metric properties: ROC/EER/AUC and CMC against brute-force oracles,
//! transform invariance, identification ranks, enrollment partitions.

use super::oracles;
use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use proton::biometric::{cmc_curve, identify, partition_enrollment, rank_of, roc_eer_auc, ScoreSet};
use proton::dataset::ClassId;

/// Scores on a coarse grid so ties are common.
fn scores(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0u32..40).prop_map(|v| v as f64 * 0.25), 1..=max)
}

fn runner(cases: u32) -> TestRunner {
    TestRunner::new(Config {
        cases,
        failure_persistence: None,
        ..Config::default()
    })
}

pub fn roc_matches_brute_force(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(scores(200), scores(200)), |(g, i)| {
            let roc = roc_eer_auc(&ScoreSet {
                genuine: g.clone(),
                imposter: i.clone(),
            })
            .unwrap();
            prop_assert_eq!(roc.auc, oracles::auc(&g, &i));
            prop_assert_eq!(roc.eer, oracles::eer(&g, &i));
            prop_assert_eq!(roc.points, oracles::roc_points(&g, &i));

            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn roc_invariant_under_increasing_transform(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(scores(100), scores(100), 0.1f64..5.0, -3.0f64..3.0),
            |(g, i, a, b)| {
                let base = roc_eer_auc(&ScoreSet {
                    genuine: g.clone(),
                    imposter: i.clone(),
                })
                .unwrap();
                let f = |v: &Vec<f64>| v.iter().map(|x| (a * x + b).exp()).collect::<Vec<_>>();
                let t = roc_eer_auc(&ScoreSet {
                    genuine: f(&g),
                    imposter: f(&i),
                })
                .unwrap();
                prop_assert_eq!(base.auc, t.auc);
                prop_assert_eq!(base.eer, t.eer);

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn roc_curve_shape(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(scores(100), scores(100)), |(g, i)| {
            let roc = roc_eer_auc(&ScoreSet {
                genuine: g,
                imposter: i,
            })
            .unwrap();
            prop_assert_eq!(roc.points.first().copied(), Some((0.0, 0.0)));
            prop_assert_eq!(roc.points.last().copied(), Some((1.0, 1.0)));
            prop_assert!(roc.points.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 <= w[1].1));
            prop_assert!((0.0..=1.0).contains(&roc.eer) && (0.0..=1.0).contains(&roc.auc));

            Ok(())
        })
        .map_err(|e| e.to_string())
}

pub fn cmc_matches_brute_force(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(1usize..=20, prop::collection::vec(0usize..1000, 1..60)),
            |(gallery, seeds)| {
                let ranks: Vec<usize> = seeds.iter().map(|s| s % gallery + 1).collect();
                let cmc = cmc_curve(&ranks, gallery).unwrap();
                prop_assert_eq!(&cmc, &oracles::cmc(&ranks, gallery));
                prop_assert!(cmc.windows(2).all(|w| w[0] <= w[1]));
                prop_assert_eq!(*cmc.last().unwrap(), 1.0);

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn identify_ranks_match_counting_oracle(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(
            &(
                prop::collection::vec(prop::collection::vec((0u32..5).prop_map(f64::from), 3), 1..=20),
                prop::collection::vec((0u32..5).prop_map(f64::from), 3),
                0usize..20,
            ),
            |(protos, probe, truth)| {
                let gallery: Vec<(ClassId, Vec<f64>)> = protos
                    .iter()
                    .enumerate()
                    .map(|(k, v)| (ClassId(format!("c{k:02}")), v.clone()))
                    .collect();
                let truth = ClassId(format!("c{:02}", truth % gallery.len()));
                let ranked = identify(&probe, &gallery).unwrap();
                let plain: Vec<(String, Vec<f64>)> = gallery.iter().map(|(c, v)| (c.0.clone(), v.clone())).collect();
                prop_assert_eq!(rank_of(&ranked, &truth), Some(oracles::rank(&probe, &plain, &truth.0)));

                let mut reversed = gallery.clone();
                reversed.reverse();
                let again = identify(&probe, &reversed).unwrap();
                prop_assert_eq!(
                    ranked.iter().map(|(c, _)| (*c).clone()).collect::<Vec<_>>(),
                    again.iter().map(|(c, _)| (*c).clone()).collect::<Vec<_>>()
                );

                Ok(())
            },
        )
        .map_err(|e| e.to_string())
}

pub fn enrollment_partition_is_disjoint_and_complete(cases: u32) -> Result<(), String> {
    runner(cases)
        .run(&(2usize..80, 1usize..6, 1usize..6), |(r, k, n)| {
            let p = partition_enrollment(r, k, n).unwrap();
            prop_assert!(p.enroll.iter().all(|e| !p.test.contains(e)));
            let mut all: Vec<usize> = p.enroll.iter().chain(&p.test).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..r).collect::<Vec<_>>());
            prop_assert!(!p.enroll.is_empty() && !p.test.is_empty());
            let expect = if r > k * n { k * n } else { r / 2 };
            prop_assert_eq!(p.enroll.len(), expect);

            Ok(())
        })
        .map_err(|e| e.to_string())
}
