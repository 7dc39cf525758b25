//! Generator and difficulty-scoring behaviour on whole datasets.

use proptest::prelude::*;
use sagcs_core::difficulty::{score_dataset, DifficultyTable, ScoringConfig};
use sagcs_core::harness::{load_dataset, save_dataset};
use sagcs_core::navsim::{
    apply_action, generate_dataset, reset, step, Action, GenConfig, Heading, NavInstance, Pose,
};

fn dataset(n: usize, seed: u64) -> (Vec<NavInstance>, DifficultyTable) {
    let data = generate_dataset(&GenConfig { n_instances: n, seed, ..Default::default() }).unwrap();
    let table = score_dataset(&data, &ScoringConfig::default()).unwrap();
    (data, table)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn difficulty_tracks_ambiguity() {
    let (data, table) = dataset(200, 0);
    let amb: Vec<f64> = data.iter().map(|i| i.environment.ambiguity).collect();
    let r = pearson(&amb, table.scores());
    assert!(r > 0.5, "pearson {r}");
}

#[test]
fn difficulty_spans_unit_interval() {
    let (_, table) = dataset(200, 0);
    let min = table.scores().iter().copied().fold(f64::INFINITY, f64::min);
    let max = table.scores().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(min <= 0.1 && max >= 0.9, "range [{min}, {max}]");
}

#[test]
fn high_ambiguity_is_harder_on_every_seed() {
    for seed in 0..4 {
        let (data, table) = dataset(200, seed);
        let mean_where = |keep: &dyn Fn(f64) -> bool| {
            let v: Vec<f64> = data
                .iter()
                .zip(table.scores())
                .filter(|(i, _)| keep(i.environment.ambiguity))
                .map(|(_, &d)| d)
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (hi, lo) = (mean_where(&|a| a > 0.8), mean_where(&|a| a < 0.2));
        assert!(hi > lo, "seed {seed}: {hi} <= {lo}");
    }
}

#[test]
fn table_covers_dataset_once() {
    let (data, table) = dataset(50, 3);
    let ids: Vec<u64> = data.iter().map(|i| i.id).collect();
    assert_eq!(table.ids(), ids.as_slice());
    assert!(table.scores().iter().all(|d| (0.0..=1.0).contains(d)));
}

#[test]
fn saved_dataset_scores_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (data, table) = dataset(30, 9);
    let path = dir.path().join("train.jsonl");
    save_dataset(&data, &path).unwrap();
    let loaded = load_dataset(&path).unwrap();
    assert_eq!(loaded, data);
    assert_eq!(score_dataset(&loaded, &ScoringConfig::default()).unwrap(), table);
}

fn arb_action() -> impl Strategy<Value = Action> {
    prop::sample::select(Action::ALL.to_vec())
}

proptest! {
    #[test]
    fn turns_are_a_group(h in prop::sample::select(Heading::ALL.to_vec())) {
        prop_assert_eq!(h.turn_left().turn_right(), h);
        prop_assert_eq!(h.turn_left().turn_left().turn_left().turn_left(), h);
    }

    #[test]
    fn trajectory_accounting(actions in prop::collection::vec(arb_action(), 0..40), seed in 0u64..50) {
        let inst = generate_dataset(&GenConfig { n_instances: 1, seed, ..Default::default() }).unwrap().remove(0);
        let env = &inst.environment;
        let mut state = reset(&inst);
        let mut moves = 0;
        for a in actions {
            if state.done {
                prop_assert!(step(env, state.clone(), a).is_err());
                break;
            }
            let before = state.pose;
            state = step(env, state, a).unwrap();
            moves += 1;
            prop_assert!(env.in_bounds(state.pose.x, state.pose.y));
            prop_assert!(state.pose.z >= 0.0);
            if a == Action::Stop {
                prop_assert_eq!(state.pose, before);
            }
        }
        prop_assert_eq!(state.trajectory.len(), moves + 1);
        prop_assert_eq!(state.step_count, moves);
    }

    #[test]
    fn apply_action_is_pure(x in 0.0f64..320.0, y in 0.0f64..320.0, a in arb_action()) {
        let inst = generate_dataset(&GenConfig { n_instances: 1, ..Default::default() }).unwrap().remove(0);
        let p = Pose::new(x, y, 10.0, Heading::S);
        prop_assert_eq!(apply_action(&inst.environment, p, a), apply_action(&inst.environment, p, a));
    }
}
