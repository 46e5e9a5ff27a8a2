use std::collections::BTreeMap;

use eventrank::{fuse_matrix, ComponentKind, FusionConfig, FusionMethod, ScoreComponentMatrix};

fn ids() -> Vec<String> {
    vec!["a".into(), "b".into(), "c".into()]
}

/// Four flat components lean toward `a`; one sharp component picks `b`.
fn crafted() -> ScoreComponentMatrix {
    let mut c = BTreeMap::new();
    c.insert(ComponentKind::QueryVideo, vec![0.0, 8.0, 0.0]);
    for k in &ComponentKind::ALL[1..] {
        c.insert(*k, vec![2.0, 0.0, 0.0]);
    }
    ScoreComponentMatrix::new("q", c, ids()).unwrap()
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let z: f64 = s.iter().map(|x| x.exp()).sum();
    s.iter().map(|x| x.exp() / z).collect()
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|x| x * x.ln()).sum::<f64>()
}

#[test]
fn sharp_minority_flips_top1_under_inverse_entropy() {
    let m = crafted();
    let mean = fuse_matrix(&m, &FusionConfig::from(FusionMethod::Mean)).unwrap();
    let inv = fuse_matrix(&m, &FusionConfig::from(FusionMethod::InvEntropy)).unwrap();
    assert_eq!(m.video_order[mean.ranking[0]], "a");
    assert_eq!(m.video_order[inv.ranking[0]], "b");

    // hand arithmetic
    let flat = softmax(&[2.0, 0.0, 0.0]);
    let sharp = softmax(&[0.0, 8.0, 0.0]);
    let (hf, hs) = (entropy(&flat), entropy(&sharp));
    for v in 0..3 {
        let want_mean = (4.0 * flat[v] + sharp[v]) / 5.0;
        let want_inv = 4.0 * flat[v] / hf + sharp[v] / hs;
        assert!((mean.scores[v] - want_mean).abs() < 1e-9);
        assert!((inv.scores[v] - want_inv).abs() < 1e-9);
    }
}

#[test]
fn all_rules_agree_with_a_single_component() {
    let mut c = BTreeMap::new();
    c.insert(ComponentKind::QueryDesc, vec![0.3, 0.9, 0.1]);
    let m = ScoreComponentMatrix::new("q", c, ids()).unwrap();
    let rankings: Vec<Vec<usize>> = FusionMethod::ALL
        .iter()
        .map(|&f| fuse_matrix(&m, &FusionConfig::from(f)).unwrap().ranking)
        .collect();
    assert!(rankings.iter().all(|r| r == &vec![1, 0, 2]));
}

#[test]
fn rrf_constant_only_rescales_when_requested() {
    let m = crafted();
    let plain = fuse_matrix(&m, &FusionConfig::from(FusionMethod::Rrf)).unwrap();
    // b is first in one component and second in four
    assert_eq!(plain.scores[1], 1.0 + 4.0 * 0.5);
    let shifted = fuse_matrix(&m, &FusionConfig { method: FusionMethod::Rrf, rrf_k: 60.0 }).unwrap();
    assert!((shifted.scores[1] - (1.0 / 61.0 + 4.0 / 62.0)).abs() < 1e-15);
}
