use moe_core::moe::RoutingDecision;
use moe_core::telemetry::{entropy, max_expert_fraction, normalized_entropy, ExpertUsageStats, LAYER_AVERAGING};
use proptest::prelude::*;

fn decision(selected: Vec<usize>, n: usize) -> RoutingDecision<f32> {
    let k = selected.len();
    RoutingDecision {
        selected,
        weights: vec![1.0 / k as f32; k],
        raw_logits: vec![0.0; n],
    }
}

/// Counts by hand: one increment per (token, selected expert).
fn oracle_counts(layers: &[Vec<RoutingDecision<f32>>], n: usize) -> Vec<Vec<u64>> {
    let mut out = vec![vec![0u64; n]; layers.len()];
    for (l, ds) in layers.iter().enumerate() {
        for d in ds {
            for &e in &d.selected {
                out[l][e] += 1;
            }
        }
    }
    out
}

fn oracle_entropy(counts: &[u64]) -> f64 {
    let total: u64 = counts.iter().sum();
    let mut h = 0.0;
    for &c in counts {
        if c > 0 {
            let p = c as f64 / total as f64;
            h -= p * p.ln();
        }
    }
    h / (counts.len() as f64).ln()
}

#[test]
fn entropy_oracles() {
    assert!((normalized_entropy(&[0.125; 8], 8) - 1.0).abs() < 1e-12);
    let mut one = [0.0; 8];
    one[3] = 1.0;
    assert_eq!(normalized_entropy(&one, 8).to_bits(), 0.0f64.to_bits());
    let mut two = [0.0; 8];
    two[0] = 0.5;
    two[5] = 0.5;
    let v = normalized_entropy(&two, 8);
    assert!((v - 2f64.ln() / 8f64.ln()).abs() < 1e-12);
    assert!((v - 0.3333).abs() < 1e-4);
    assert!((entropy(&two) - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn max_fraction_oracles() {
    assert_eq!(max_expert_fraction(&[0.125; 8]), 0.125);
    assert_eq!(max_expert_fraction(&[0.0, 1.0, 0.0]), 1.0);
    let rest = (1.0 - 0.453) / 7.0;
    let mut f = vec![rest; 8];
    f[2] = 0.453;
    assert_eq!(max_expert_fraction(&f), 0.453);
}

#[test]
fn accumulate_examples() {
    let mut s = ExpertUsageStats::new(4, &[0]);
    s.accumulate(&[vec![decision(vec![1, 2], 4)]]).unwrap();
    assert_eq!(s.layers[0].counts, vec![0, 1, 1, 0]);
    assert_eq!(s.layers[0].total_assignments, 2);
    s.accumulate(&[vec![decision(vec![1, 2], 4)]]).unwrap();
    assert_eq!(s.layers[0].counts, vec![0, 2, 2, 0]);
    let two_layers: Vec<Vec<RoutingDecision<f32>>> = vec![vec![], vec![]];
    assert!(s.accumulate(&two_layers).is_err());
}

#[test]
fn export_examples() {
    let mut s = ExpertUsageStats::new(4, &[1, 3]);
    assert!(s.heatmap_csv().is_err());
    let layer: Vec<RoutingDecision<f32>> = (0..4).map(|i| decision(vec![i], 4)).collect();
    s.accumulate(&[layer.clone(), layer]).unwrap();
    let csv = s.heatmap_csv().unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "layer,expert_0,expert_1,expert_2,expert_3");
    assert_eq!(lines[1], "1,0.250000,0.250000,0.250000,0.250000");
    assert_eq!(lines[2], "3,0.250000,0.250000,0.250000,0.250000");
    assert_eq!(lines.len(), 3);

    let dir = tempfile::tempdir().unwrap();
    s.export(dir.path()).unwrap();
    let summary = std::fs::read_to_string(dir.path().join("summary.jsonl")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.lines().last().unwrap().contains(LAYER_AVERAGING));
    assert_eq!(std::fs::read_to_string(dir.path().join("heatmap.csv")).unwrap(), csv);
}

fn arb_layers(n: usize, k: usize) -> impl Strategy<Value = Vec<Vec<RoutingDecision<f32>>>> {
    let token = Just(()).prop_perturb(move |_, mut r| {
        let mut all: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + (r.next_u32() as usize) % (n - i);
            all.swap(i, j);
        }
        decision(all[..k].to_vec(), n)
    });
    proptest::collection::vec(proptest::collection::vec(token, 0..13), 2..=2)
}

fn fill(layers: &[Vec<RoutingDecision<f32>>]) -> ExpertUsageStats {
    let mut s = ExpertUsageStats::new(8, &[0, 1]);
    s.accumulate(layers).unwrap();
    s
}

proptest! {
    #[test]
    fn matches_brute_force_oracle(layers in arb_layers(8, 2)) {
        let s = fill(&layers);
        let want = oracle_counts(&layers, 8);
        for (l, usage) in s.layers.iter().enumerate() {
            prop_assert_eq!(&usage.counts, &want[l]);
            prop_assert_eq!(usage.total_assignments, 2 * layers[l].len() as u64);
            if usage.total_assignments > 0 {
                prop_assert_eq!(usage.normalized_entropy(), oracle_entropy(&want[l]));
            }
        }
    }

    #[test]
    fn merge_equals_monolithic(a in arb_layers(8, 2), b in arb_layers(8, 2), c in arb_layers(8, 2)) {
        let (sa, sb, sc) = (fill(&a), fill(&b), fill(&c));
        let mut whole = ExpertUsageStats::new(8, &[0, 1]);
        whole.accumulate(&a).unwrap();
        whole.accumulate(&b).unwrap();
        whole.accumulate(&c).unwrap();
        let left = sa.merge(&sb).unwrap().merge(&sc).unwrap();
        let right = sa.merge(&sb.merge(&sc).unwrap()).unwrap();
        prop_assert_eq!(&left, &whole);
        prop_assert_eq!(&right, &whole);
        prop_assert_eq!(&sa.merge(&sb).unwrap(), &sb.merge(&sa).unwrap());
        prop_assert_eq!(&sa.merge(&ExpertUsageStats::new(8, &[0, 1])).unwrap(), &sa);
        for (m, w) in left.layers.iter().zip(&whole.layers) {
            if w.total_assignments > 0 {
                prop_assert_eq!(m.normalized_entropy().to_bits(), w.normalized_entropy().to_bits());
            }
        }
    }

    #[test]
    fn exported_layers_are_well_formed(layers in arb_layers(8, 3)) {
        prop_assume!(layers.iter().all(|l| !l.is_empty()));
        let s = fill(&layers);
        for l in &s.layers {
            let f = l.fractions();
            prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let h = l.normalized_entropy();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
            let m = l.max_fraction();
            prop_assert!((1.0 / 8.0 - 1e-12..=1.0).contains(&m));
        }
        let csv = s.heatmap_csv().unwrap();
        for line in csv.lines().skip(1) {
            let sum: f64 = line.split(',').skip(1).map(|v| v.parse::<f64>().unwrap()).sum();
            prop_assert!((sum - 1.0).abs() < 1e-5);
        }
        let summary = s.summary().unwrap();
        let mean = (summary[0].normalized_entropy + summary[1].normalized_entropy) / 2.0;
        prop_assert!((summary[2].normalized_entropy - mean).abs() < 1e-15);
    }
}
