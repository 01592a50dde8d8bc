//! Brute-force reference implementations used by the property suites.

/// `(2 * #{g < i} + #{g == i}) / (2 G I)` over every genuine/imposter pair.
pub fn auc(genuine: &[f64], imposter: &[f64]) -> f64 {
    let mut twice = 0u128;
    for g in genuine {
        for i in imposter {
            if g < i {
                twice += 2;
            } else if g == i {
                twice += 1;
            }
        }
    }
    twice as f64 / (2.0 * genuine.len() as f64 * imposter.len() as f64)
}

/// Counts `(false accepts, true accepts)` at threshold `t` by direct scan.
fn accepts(genuine: &[f64], imposter: &[f64], t: f64) -> (u64, u64) {
    let fa = imposter.iter().filter(|&&s| s <= t).count() as u64;
    let ta = genuine.iter().filter(|&&s| s <= t).count() as u64;
    (fa, ta)
}

/// Threshold sweep over `-inf` and every distinct score, rescanning all
/// scores at each threshold; EER interpolated where FAR - FRR turns >= 0.
pub fn eer(genuine: &[f64], imposter: &[f64]) -> f64 {
    let mut ts: Vec<f64> = genuine.iter().chain(imposter).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let (gn, im) = (genuine.len() as f64, imposter.len() as f64);
    let mut rates = vec![(0.0, 1.0)];
    for t in ts {
        let (fa, ta) = accepts(genuine, imposter, t);
        rates.push((fa as f64 / im, (genuine.len() as u64 - ta) as f64 / gn));
    }
    for w in rates.windows(2) {
        let ((far0, frr0), (far1, frr1)) = (w[0], w[1]);
        let (d0, d1) = (far0 - frr0, far1 - frr1);
        if d0 == 0.0 {
            return far0;
        }
        if d0 < 0.0 && d1 >= 0.0 {
            let s = -d0 / (d1 - d0);
            return far0 + s * (far1 - far0);
        }
    }
    0.5
}

/// ROC points `(FAR, TPR)` at `-inf` and each distinct score.
pub fn roc_points(genuine: &[f64], imposter: &[f64]) -> Vec<(f64, f64)> {
    let mut ts: Vec<f64> = genuine.iter().chain(imposter).copied().collect();
    ts.sort_by(f64::total_cmp);
    ts.dedup();
    let (gn, im) = (genuine.len() as f64, imposter.len() as f64);
    let mut pts = vec![(0.0, 0.0)];
    for t in ts {
        let (fa, ta) = accepts(genuine, imposter, t);
        pts.push((fa as f64 / im, ta as f64 / gn));
    }
    pts
}

/// `cmc[k-1]` = fraction of ranks `<= k`, counted afresh for every k.
pub fn cmc(ranks: &[usize], gallery: usize) -> Vec<f64> {
    (1..=gallery)
        .map(|k| ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
        .collect()
}

/// Rank of the probe's true class by counting strictly closer classes and
/// equally close classes with a smaller id.
pub fn rank(probe: &[f64], gallery: &[(String, Vec<f64>)], truth: &str) -> usize {
    let dist = |v: &[f64]| probe.iter().zip(v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    let (_, tv) = gallery.iter().find(|(id, _)| id == truth).expect("truth in gallery");
    let dt = dist(tv);
    1 + gallery
        .iter()
        .filter(|(id, v)| {
            let d = dist(v);
            d < dt || (d == dt && id.as_str() < truth)
        })
        .count()
}

/// Edge test for an N-node cycle plus a hub at index N, from the definition.
pub fn cycle_edge(n: usize, i: usize, j: usize) -> bool {
    if i == j || i > n || j > n {
        return false;
    }
    if i == n || j == n {
        return true;
    }
    (i + 1) % n == j || (j + 1) % n == i
}
