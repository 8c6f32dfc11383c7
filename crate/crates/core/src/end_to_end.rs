//! Whole-pipeline checks on synthetic markets.

use std::collections::BTreeMap;

use crate::pipeline::{run_window, run_windows, PipelineConfig, WindowSpec};
use crate::synth::{generate, GroundTruth, Influence, SynthConfig};

fn setup(n_firms: usize, days: usize, seed: u64, influence: Vec<Influence>) -> (SynthConfig, PipelineConfig) {
    let mut sc = SynthConfig { n_firms, days, seed, influence, influence_gain: 2.0, ..SynthConfig::default() };
    sc.regime.p_up = 0.05;
    sc.regime.p_down = 0.2;
    let mut cfg = PipelineConfig { seed, ..PipelineConfig::default() };
    cfg.features.lookback = 10;
    cfg.dataset.horizon = 10;
    cfg.forest.trees = 100;
    cfg.test.boot = 300;
    (sc, cfg)
}

fn whole(sc: &SynthConfig) -> WindowSpec {
    let days = sc.trading_days();
    WindowSpec { start: days[0], end: *days.last().unwrap(), firms: Vec::new() }
}

#[test]
fn planted_direction_has_the_smallest_p_value() {
    let mut wins = 0;
    for seed in 0..5 {
        let (sc, cfg) = setup(4, 263, seed, vec![Influence { source: 0, target: 1, lag: 10, strength: 0.9 }]);
        let trades = generate(&sc).unwrap().trades;
        let truth = GroundTruth::from_config(&sc);
        let outcome = run_window(&trades, &whole(&sc), &cfg, &BTreeMap::new()).unwrap();
        let results = &outcome.networks[0].edges.results;
        assert_eq!(results.len(), 12);
        let best = results.iter().min_by(|a, b| a.p_raw.total_cmp(&b.p_raw)).unwrap();
        if truth.contains(&best.source, &best.target) {
            wins += 1;
        }
    }
    assert!(wins >= 3, "planted edge ranked first in {wins} of 5 seeds");
}

#[test]
fn every_ordered_pair_is_tested() {
    for (n, expected) in [(2, 2), (3, 6)] {
        let (sc, mut cfg) = setup(n, 60, 3, Vec::new());
        cfg.forest.trees = 20;
        cfg.test.boot = 100;
        let trades = generate(&sc).unwrap().trades;
        let outcome = run_window(&trades, &whole(&sc), &cfg, &BTreeMap::new()).unwrap();
        let results = &outcome.networks[0].edges.results;
        assert_eq!(results.len(), expected, "{n} firms");
        assert!(results.iter().all(|r| r.source != r.target));
        assert_eq!(outcome.networks[0].network.nodes.len(), n);
    }
}

#[test]
fn independent_firms_yield_few_edges() {
    let (mut tested, mut accepted) = (0, 0);
    for seed in 40..43 {
        let (sc, cfg) = setup(4, 263, seed, Vec::new());
        let trades = generate(&sc).unwrap().trades;
        let outcome = run_window(&trades, &whole(&sc), &cfg, &BTreeMap::new()).unwrap();
        tested += outcome.networks[0].edges.results.len();
        accepted += outcome.networks[0].network.edges.len();
    }
    assert_eq!(tested, 36);
    assert!(accepted * 3 <= tested, "{accepted} of {tested} null pairs became edges");
}

#[test]
fn rolling_windows_are_reproducible() {
    let (sc, mut cfg) = setup(3, 80, 5, vec![Influence { source: 0, target: 2, lag: 5, strength: 0.8 }]);
    cfg.forest.trees = 30;
    cfg.test.boot = 100;
    let days = sc.trading_days();
    cfg.windows = vec![
        WindowSpec { start: days[0], end: days[49], firms: Vec::new() },
        WindowSpec { start: days[30], end: days[79], firms: Vec::new() },
    ];
    let trades = generate(&sc).unwrap().trades;
    let snapshot = || -> Vec<String> {
        run_windows(&trades, &cfg, &BTreeMap::new())
            .unwrap()
            .iter()
            .map(|o| o.networks[0].network.to_json().unwrap() + &serde_json::to_string(&o.networks[0].edges.results).unwrap())
            .collect()
    };
    let first = snapshot();
    assert_eq!(first.len(), 2);
    assert_eq!(first, snapshot());
}
