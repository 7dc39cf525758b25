//! Closed-loop evaluation: goal inference, look-ahead planning, and the
//! NE / SR / OSR / SPL metrics.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::navsim::{
    apply_action_unbounded, horizontal_distance, reset, step, Action, NavInstance, Pose,
    MAX_EPISODE_STEPS, MOVE_STEP_M, SUCCESS_THRESHOLD_M,
};
use crate::trainer::{cell_distribution, CellFeatures, PolicyParams};

pub const DEFAULT_LOOKAHEAD: usize = 3;

/// Penalty in meters per 90° between heading and bearing to the target.
const MISALIGNMENT_M_PER_90: f64 = 1.0;

/// Straight-line reference of `k` waypoints spaced one move apart, ending at the target.
pub fn reference_waypoints(pose: &Pose, target: [f64; 2], k: usize) -> Vec<[f64; 2]> {
    let d = pose.horizontal_distance(target);
    (1..=k.max(1))
        .map(|j| {
            if d == 0.0 {
                return target;
            }
            let s = (j as f64 * MOVE_STEP_M).min(d) / d;
            [pose.x + s * (target[0] - pose.x), pose.y + s * (target[1] - pose.y)]
        })
        .collect()
}

/// Angle in degrees between the pose's heading and the bearing to `target`.
fn heading_deviation(pose: &Pose, target: [f64; 2]) -> f64 {
    let (hx, hy) = pose.heading.unit();
    let (tx, ty) = (target[0] - pose.x, target[1] - pose.y);
    if tx == 0.0 && ty == 0.0 {
        return 0.0;
    }
    let cos = ((hx * tx + hy * ty) / tx.hypot(ty)).clamp(-1.0, 1.0);
    cos.acos().to_degrees()
}

/// One-step look-ahead action choice toward `target`.
pub fn plan_next_action(pose: &Pose, target: [f64; 2], lookahead_k: usize) -> Action {
    if pose.horizontal_distance(target) <= SUCCESS_THRESHOLD_M {
        return Action::Stop;
    }
    let waypoint = reference_waypoints(pose, target, lookahead_k)[0];
    let mut best = (Action::Stop, f64::INFINITY);
    for action in Action::ALL {
        let next = apply_action_unbounded(*pose, action);
        let cost = horizontal_distance([next.x, next.y], waypoint)
            + MISALIGNMENT_M_PER_90 * heading_deviation(&next, target) / 90.0;
        // Strict comparison keeps the earliest action on ties.
        if cost < best.1 {
            best = (action, cost);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub id: u64,
    pub trajectory: Vec<Pose>,
    pub predicted_target: [f64; 2],
    pub target: [f64; 2],
    pub final_pose: Pose,
    pub path_length: f64,
    pub shortest_length: f64,
    pub stopped: bool,
    pub steps: usize,
}

impl EpisodeLog {
    /// Builds a log from a trajectory, deriving the path and shortest lengths.
    pub fn from_trajectory(
        id: u64,
        trajectory: Vec<Pose>,
        predicted_target: [f64; 2],
        target: [f64; 2],
        stopped: bool,
    ) -> Result<Self> {
        let (first, last) = match (trajectory.first(), trajectory.last()) {
            (Some(f), Some(l)) => (*f, *l),
            _ => return Err(Error::Validation(format!("episode {id}: empty trajectory"))),
        };
        let path_length = trajectory
            .windows(2)
            .map(|w| horizontal_distance([w[0].x, w[0].y], [w[1].x, w[1].y]))
            .sum();
        Ok(EpisodeLog {
            id,
            steps: trajectory.len() - 1,
            final_pose: last,
            shortest_length: first.horizontal_distance(target),
            trajectory,
            predicted_target,
            target,
            path_length,
            stopped,
        })
    }

    pub fn final_distance(&self) -> f64 {
        self.final_pose.horizontal_distance(self.target)
    }

    pub fn min_distance(&self) -> f64 {
        self.trajectory
            .iter()
            .map(|p| p.horizontal_distance(self.target))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_steps: usize,
    pub lookahead_k: usize,
    pub success_threshold: f64,
    /// Take the policy's most likely cell instead of sampling one.
    pub greedy: bool,
    /// Re-run goal inference before every step rather than once per episode.
    pub reinfer_each_step: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_steps: MAX_EPISODE_STEPS,
            lookahead_k: DEFAULT_LOOKAHEAD,
            success_threshold: SUCCESS_THRESHOLD_M,
            greedy: false,
            reinfer_each_step: false,
        }
    }
}

/// Predicted target position in meters for one instance.
pub fn infer_goal<R: Rng + ?Sized>(
    params: &PolicyParams,
    instance: &NavInstance,
    features: &CellFeatures,
    greedy: bool,
    rng: &mut R,
) -> Result<[f64; 2]> {
    let probs = cell_distribution(&params.weights, features)?;
    let cell = if greedy {
        probs
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &p)| if p > best.1 { (i, p) } else { best })
            .0
    } else {
        WeightedIndex::new(&probs)
            .map_err(|e| Error::NonFinite(format!("policy distribution: {e}")))?
            .sample(rng)
    };
    let cols = instance.environment.cols();
    Ok(instance.environment.cell_center(cell / cols, cell % cols))
}

/// Drives the planner toward a fixed predicted target.
pub fn run_episode_with_prediction(
    instance: &NavInstance,
    predicted: [f64; 2],
    config: &EvalConfig,
) -> Result<EpisodeLog> {
    run_loop(instance, config, |_| Ok(predicted))
}

/// Goal inference followed by closed-loop planning.
///
/// The prediction is made once from the initial map unless
/// `reinfer_each_step` is set, in which case a new cell is drawn every step.
pub fn run_episode<R: Rng + ?Sized>(
    params: &PolicyParams,
    instance: &NavInstance,
    features: &CellFeatures,
    config: &EvalConfig,
    rng: &mut R,
) -> Result<EpisodeLog> {
    let first = infer_goal(params, instance, features, config.greedy, rng)?;
    if !config.reinfer_each_step {
        return run_episode_with_prediction(instance, first, config);
    }
    let mut current = Some(first);
    run_loop(instance, config, |_| match current.take() {
        Some(p) => Ok(p),
        None => infer_goal(params, instance, features, config.greedy, rng),
    })
}

fn run_loop(
    instance: &NavInstance,
    config: &EvalConfig,
    mut predict: impl FnMut(&Pose) -> Result<[f64; 2]>,
) -> Result<EpisodeLog> {
    if config.max_steps == 0 {
        return Err(Error::Config("max_steps must be at least 1".into()));
    }
    let env = &instance.environment;
    let mut state = reset(instance);
    let mut predicted = instance.target_position;
    let mut stopped = false;
    while state.step_count < config.max_steps {
        predicted = predict(&state.pose)?;
        let action = plan_next_action(&state.pose, predicted, config.lookahead_k);
        state = step(env, state, action)?;
        if action == Action::Stop {
            stopped = true;
            break;
        }
    }
    EpisodeLog::from_trajectory(instance.id, state.trajectory, predicted, instance.target_position, stopped)
}

/// Horizontal distance from the final pose to the target.
pub fn navigation_error(log: &EpisodeLog) -> f64 {
    log.final_distance()
}

fn non_empty(logs: &[EpisodeLog]) -> Result<()> {
    if logs.is_empty() {
        return Err(Error::Validation("no episodes to score".into()));
    }
    Ok(())
}

fn percent(logs: &[EpisodeLog], hit: impl Fn(&EpisodeLog) -> bool) -> f64 {
    100.0 * logs.iter().filter(|l| hit(l)).count() as f64 / logs.len() as f64
}

pub fn success_rate(logs: &[EpisodeLog], threshold: f64) -> Result<f64> {
    non_empty(logs)?;
    Ok(percent(logs, |l| l.final_distance() <= threshold))
}

/// Percent of episodes with any waypoint within `threshold`.
pub fn oracle_success_rate(logs: &[EpisodeLog], threshold: f64) -> Result<f64> {
    non_empty(logs)?;
    Ok(percent(logs, |l| l.min_distance() <= threshold))
}

/// Success weighted by path length, in percent.
pub fn spl(logs: &[EpisodeLog], threshold: f64) -> Result<f64> {
    non_empty(logs)?;
    let sum: f64 = logs
        .iter()
        .filter(|l| l.final_distance() <= threshold)
        .map(|l| {
            let longest = l.path_length.max(l.shortest_length);
            if longest == 0.0 {
                1.0
            } else {
                l.shortest_length / longest
            }
        })
        .sum();
    Ok(100.0 * sum / logs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub ne: f64,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
    pub n: usize,
}

pub fn metric_report(logs: &[EpisodeLog], threshold: f64) -> Result<MetricReport> {
    non_empty(logs)?;
    Ok(MetricReport {
        ne: logs.iter().map(navigation_error).sum::<f64>() / logs.len() as f64,
        sr: success_rate(logs, threshold)?,
        osr: oracle_success_rate(logs, threshold)?,
        spl: spl(logs, threshold)?,
        n: logs.len(),
    })
}

pub fn write_episode_logs(logs: &[EpisodeLog], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for log in logs {
        serde_json::to_writer(&mut out, log)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_episode_logs(path: &Path) -> Result<Vec<EpisodeLog>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut logs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        logs.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navsim::{generate_dataset, GenConfig, Heading};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn pose(x: f64, y: f64) -> Pose {
        Pose::new(x, y, 10.0, Heading::E)
    }

    fn log_of(points: &[(f64, f64)], target: [f64; 2]) -> EpisodeLog {
        let traj = points.iter().map(|&(x, y)| pose(x, y)).collect();
        EpisodeLog::from_trajectory(0, traj, target, target, true).unwrap()
    }

    fn instance() -> NavInstance {
        generate_dataset(&GenConfig { n_instances: 1, seed: 5, ..Default::default() })
            .unwrap()
            .remove(0)
    }

    #[test]
    fn planner_examples() {
        assert_eq!(plan_next_action(&pose(0.0, 0.0), [50.0, 0.0], 3), Action::MoveForward);
        assert_eq!(plan_next_action(&pose(0.0, 0.0), [-50.0, 0.0], 3), Action::TurnLeft);
        assert_eq!(plan_next_action(&pose(0.0, 0.0), [12.0, 16.0], 3), Action::Stop);
        assert_eq!(plan_next_action(&pose(0.0, 0.0), [0.0, 20.0], 3), Action::Stop);
    }

    #[test]
    fn planner_turns_toward_side_target() {
        // N is +y; a target due north needs a left turn from east.
        assert_eq!(plan_next_action(&pose(0.0, 0.0), [0.0, 80.0], 3), Action::TurnLeft);
        assert_eq!(plan_next_action(&pose(0.0, 0.0), [0.0, -80.0], 3), Action::TurnRight);
    }

    #[test]
    fn waypoints_spaced_and_capped() {
        let w = reference_waypoints(&pose(0.0, 0.0), [12.0, 0.0], 3);
        assert_eq!(w, vec![[5.0, 0.0], [10.0, 0.0], [12.0, 0.0]]);
    }

    #[test]
    fn immediate_stop_at_start() {
        let inst = instance();
        let start = [inst.initial_pose.x, inst.initial_pose.y];
        let log = run_episode_with_prediction(&inst, start, &EvalConfig::default()).unwrap();
        assert_eq!(log.steps, 1);
        assert!(log.stopped);
        assert_eq!(log.path_length, 0.0);
    }

    #[test]
    fn straight_run_to_target_ahead() {
        let mut inst = instance();
        inst.initial_pose = Pose::new(50.0, 100.0, 10.0, Heading::E);
        inst.target_position = [100.0, 100.0];
        let cfg = EvalConfig::default();
        let log = run_episode_with_prediction(&inst, inst.target_position, &cfg).unwrap();
        assert!(log.stopped);
        assert!(log.final_distance() <= SUCCESS_THRESHOLD_M);
        // The stop radius is reached after six moves, 20 m short of the target.
        assert_eq!(log.path_length, 30.0);
        assert_eq!(log.steps, 7);
        assert!(log.trajectory.iter().all(|p| p.heading == Heading::E));
        let dists: Vec<f64> = log.trajectory.iter().map(|p| p.horizontal_distance(inst.target_position)).collect();
        assert!(dists.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn step_cap_without_stop() {
        let mut inst = instance();
        inst.initial_pose = Pose::new(5.0, 5.0, 10.0, Heading::E);
        inst.target_position = [300.0, 300.0];
        let cfg = EvalConfig { max_steps: 1, ..Default::default() };
        let log = run_episode_with_prediction(&inst, inst.target_position, &cfg).unwrap();
        assert!(!log.stopped);
        assert_eq!(log.steps, 1);
    }

    #[test]
    fn diagonal_targets_are_reached() {
        let mut inst = instance();
        for (start, target, heading) in [
            ((5.0, 5.0), [300.0, 250.0], Heading::W),
            ((300.0, 20.0), [40.0, 290.0], Heading::S),
            ((160.0, 160.0), [163.0, 90.0], Heading::N),
        ] {
            inst.initial_pose = Pose::new(start.0, start.1, 10.0, heading);
            inst.target_position = target;
            let log = run_episode_with_prediction(&inst, target, &EvalConfig::default()).unwrap();
            assert!(log.stopped && log.final_distance() <= SUCCESS_THRESHOLD_M, "{start:?} -> {target:?}");
            assert!(log.path_length <= 1.5 * log.shortest_length);
        }
    }

    #[test]
    fn run_episode_deterministic() {
        use rand::SeedableRng;
        use rand_chacha::ChaCha8Rng;
        let inst = instance();
        let map = crate::navsim::render_semantic_map(&inst, &reset(&inst));
        let f = crate::trainer::featurize(&inst, &map).unwrap();
        let params = PolicyParams { weights: vec![-2.0, 3.0, 1.0, 0.0, 0.0], ..PolicyParams::initial(5) };
        let cfg = EvalConfig::default();
        let a = run_episode(&params, &inst, &f, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = run_episode(&params, &inst, &f, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        let re = EvalConfig { reinfer_each_step: true, max_steps: 30, ..Default::default() };
        let c = run_episode(&params, &inst, &f, &re, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert!(c.steps <= 30);
    }

    #[test]
    fn navigation_error_examples() {
        assert_eq!(navigation_error(&log_of(&[(0.0, 0.0)], [3.0, 4.0])), 5.0);
        assert_eq!(navigation_error(&log_of(&[(3.0, 4.0)], [3.0, 4.0])), 0.0);
        assert_eq!(navigation_error(&log_of(&[(10.0, 0.0)], [0.0, 0.0])), 10.0);
    }

    #[test]
    fn success_rate_examples() {
        let hit = log_of(&[(0.0, 0.0)], [5.0, 0.0]);
        let miss = log_of(&[(0.0, 0.0)], [500.0, 0.0]);
        assert_eq!(success_rate(&[hit.clone(), miss.clone()], 20.0).unwrap(), 50.0);
        assert_eq!(success_rate(&[miss.clone(), miss.clone()], 20.0).unwrap(), 0.0);
        assert_eq!(success_rate(&[hit.clone(), hit.clone(), hit, miss], 20.0).unwrap(), 75.0);
        assert!(success_rate(&[], 20.0).is_err());
        assert!(oracle_success_rate(&[], 20.0).is_err());
        assert!(spl(&[], 20.0).is_err());
    }

    #[test]
    fn oracle_success_on_waypoints() {
        let log = log_of(&[(0.0, 0.0), (100.0, 0.0)], [10.0, 0.0]);
        assert_eq!(oracle_success_rate(std::slice::from_ref(&log), 20.0).unwrap(), 100.0);
        assert_eq!(success_rate(&[log], 20.0).unwrap(), 0.0);
        let never = log_of(&[(0.0, 0.0), (0.0, 5.0)], [100.0, 0.0]);
        assert_eq!(oracle_success_rate(&[never], 20.0).unwrap(), 0.0);
    }

    #[test]
    fn spl_examples() {
        // shortest 50 (start (0,0) -> target (50,0)), flown straight.
        let exact = log_of(&[(0.0, 0.0), (25.0, 0.0), (50.0, 0.0)], [50.0, 0.0]);
        assert_eq!(spl(&[exact], 20.0).unwrap(), 100.0);
        // path 100 = 2 x shortest, success; plus a failure.
        let detour = log_of(&[(0.0, 0.0), (0.0, 25.0), (50.0, 25.0), (50.0, 0.0)], [50.0, 0.0]);
        assert_abs_diff_eq!(detour.path_length, 100.0);
        let miss = log_of(&[(0.0, 0.0)], [500.0, 0.0]);
        assert_eq!(spl(&[detour, miss.clone()], 20.0).unwrap(), 25.0);
        assert_eq!(spl(&[miss], 20.0).unwrap(), 0.0);
        let zero = log_of(&[(1.0, 1.0), (1.0, 1.0)], [1.0, 1.0]);
        assert_eq!(spl(&[zero], 20.0).unwrap(), 100.0);
    }

    #[test]
    fn episode_logs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        let logs = vec![log_of(&[(0.0, 0.0), (5.0, 0.0)], [9.0, 1.0]), log_of(&[(1.5, 2.25)], [0.1, 0.2])];
        write_episode_logs(&logs, &path).unwrap();
        assert_eq!(read_episode_logs(&path).unwrap(), logs);
    }

    fn arb_log() -> impl Strategy<Value = EpisodeLog> {
        (
            prop::collection::vec((0.0f64..300.0, 0.0f64..300.0), 1..12),
            (0.0f64..300.0, 0.0f64..300.0),
        )
            .prop_map(|(pts, (tx, ty))| log_of(&pts, [tx, ty]))
    }

    proptest! {
        #[test]
        fn metric_chain(logs in prop::collection::vec(arb_log(), 1..20)) {
            let m = metric_report(&logs, 20.0).unwrap();
            prop_assert!(m.ne >= 0.0);
            prop_assert!(0.0 <= m.spl && m.spl <= m.sr && m.sr <= m.osr && m.osr <= 100.0);
        }

        #[test]
        fn path_length_is_sum_of_hops(log in arb_log()) {
            let sum: f64 = log.trajectory.windows(2)
                .map(|w| w[0].horizontal_distance([w[1].x, w[1].y])).sum();
            prop_assert_eq!(log.path_length, sum);
            prop_assert_eq!(log.steps, log.trajectory.len() - 1);
        }
    }
}
