//! ADE/FDE metrics, the evaluation harness, and the inference-scaling
//! benchmark.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{center_window, synthetic_window, Window};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    build_rollout, rollout, sample_noise, ParamSet, TAG_HOST_EMBED, TAG_HUB_LSTM,
};
use crate::training::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MetricMode {
    /// Mean distance over every predicted step.
    AllSteps,
    /// Mean distance over 8 indices uniformly spaced over the horizon,
    /// final step included.
    Sample8,
}

impl MetricMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            MetricMode::AllSteps => "all_steps",
            MetricMode::Sample8 => "sample8",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all_steps" => Ok(MetricMode::AllSteps),
            "sample8" => Ok(MetricMode::Sample8),
            other => Err(Error::Config(format!("unknown metric mode {other:?}"))),
        }
    }
}

/// Step indices (0-based) evaluated under a mode for horizon `t_pred`.
fn selected_steps(mode: MetricMode, t_pred: usize) -> Vec<usize> {
    match mode {
        MetricMode::AllSteps => (0..t_pred).collect(),
        MetricMode::Sample8 => (1..=8)
            .map(|j| (j * t_pred).div_ceil(8) - 1)
            .collect(),
    }
}

/// Average displacement error between two [T x 2] trajectories.
pub fn ade(pred: &Tensor, truth: &Tensor, mode: MetricMode) -> Result<f64> {
    if pred.rows() != truth.rows() || pred.cols() != 2 || truth.cols() != 2 {
        return Err(Error::ShapeMismatch {
            op: "ade",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let steps = selected_steps(mode, pred.rows());
    let total: f64 = steps
        .iter()
        .map(|&t| {
            let dx = pred.at(t, 0) - truth.at(t, 0);
            let dy = pred.at(t, 1) - truth.at(t, 1);
            (dx * dx + dy * dy).sqrt()
        })
        .sum();
    Ok(total / steps.len() as f64)
}

/// Final displacement error: distance at the last step.
pub fn fde(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    if pred.rows() == 0 || pred.rows() != truth.rows() {
        return Err(Error::ShapeMismatch {
            op: "fde",
            left: pred.shape().to_vec(),
            right: truth.shape().to_vec(),
        });
    }
    let t = pred.rows() - 1;
    let dx = pred.at(t, 0) - truth.at(t, 0);
    let dy = pred.at(t, 1) - truth.at(t, 1);
    Ok((dx * dx + dy * dy).sqrt())
}

#[derive(Debug, Clone)]
pub struct PerPedestrian {
    pub window: String,
    pub ped_id: i64,
    pub ade: f64,
    pub fde: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub dataset: String,
    pub ade: f64,
    pub fde: f64,
    pub k: usize,
    pub metric_mode: MetricMode,
    pub window_count: usize,
    pub seed: u64,
    pub per_pedestrian: Vec<PerPedestrian>,
}

impl MetricsReport {
    /// Fixed-key-order JSON document (excluding per-pedestrian detail).
    pub fn to_json(&self) -> String {
        format!(
            "{{\n  \"dataset\": \"{}\",\n  \"ade\": {},\n  \"fde\": {},\n  \"k\": {},\n  \"metric_mode\": \"{}\",\n  \"window_count\": {},\n  \"seed\": {}\n}}\n",
            self.dataset,
            self.ade,
            self.fde,
            self.k,
            self.metric_mode.as_str(),
            self.window_count,
            self.seed
        )
    }

    pub fn per_window_csv(&self) -> String {
        let mut out = String::from("window_id,ped_id,ade,fde\n");
        for p in &self.per_pedestrian {
            writeln!(out, "{},{},{},{}", p.window, p.ped_id, p.ade, p.fde).unwrap();
        }
        out
    }
}

/// Truth trajectory of one pedestrian over the prediction horizon, in
/// the centered frame of `w`.
fn truth_track(w: &Window, ped: usize) -> Tensor {
    let mut data = Vec::with_capacity(w.t_pred * 2);
    for t in w.t_obs..w.horizon() {
        let (x, y) = w.pos(ped, t);
        data.push(x);
        data.push(y);
    }
    Tensor::unchecked(vec![w.t_pred, 2], data)
}

fn pred_track(predictions: &Tensor, ped: usize) -> Tensor {
    let t_pred = predictions.shape()[1];
    let mut data = Vec::with_capacity(t_pred * 2);
    for t in 0..t_pred {
        data.push(predictions.at3(ped, t, 0));
        data.push(predictions.at3(ped, t, 1));
    }
    Tensor::unchecked(vec![t_pred, 2], data)
}

fn eval_window(
    params: &ParamSet,
    window: &Window,
    k: usize,
    mode: MetricMode,
    seed: u64,
) -> Result<Vec<PerPedestrian>> {
    let w = center_window(window);
    let res = rollout(params, &w, k, seed)?;
    let mut out = Vec::with_capacity(w.n_peds());
    for ped in 0..w.n_peds() {
        let truth = truth_track(&w, ped);
        // best-of-K by ADE; FDE taken from the same best-ADE sample
        let mut best: Option<(f64, f64)> = None;
        for sample in &res.predictions {
            let p = pred_track(sample, ped);
            let a = ade(&p, &truth, mode)?;
            let f = fde(&p, &truth)?;
            if best.map(|(ba, _)| a < ba).unwrap_or(true) {
                best = Some((a, f));
            }
        }
        let (a, f) = best.unwrap();
        out.push(PerPedestrian {
            window: w.source.clone(),
            ped_id: w.ped_ids[ped],
            ade: a,
            fde: f,
        });
    }
    Ok(out)
}

/// Best-of-K evaluation over a test split, deterministic given `seed`.
/// `threads` > 1 parallelizes across windows without changing results.
pub fn evaluate(
    checkpoint: &Checkpoint,
    windows: &[Window],
    k: usize,
    mode: MetricMode,
    seed: u64,
    dataset: &str,
    threads: usize,
) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::Config("no evaluation windows".to_string()));
    }
    if let Some(w) = windows
        .iter()
        .find(|w| w.t_obs != checkpoint.t_obs || w.t_pred != checkpoint.t_pred)
    {
        return Err(Error::Config(format!(
            "window {} built with t_obs={}, t_pred={}, checkpoint expects {}/{}",
            w.source, w.t_obs, w.t_pred, checkpoint.t_obs, checkpoint.t_pred
        )));
    }
    // per-window seeds drawn up front so threading cannot reorder them
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let window_seeds: Vec<u64> = windows.iter().map(|_| rng.gen()).collect();

    let threads = threads.max(1).min(windows.len());
    let params = &checkpoint.params;
    let mut per_ped: Vec<PerPedestrian> = Vec::new();
    if threads == 1 {
        for (w, &s) in windows.iter().zip(&window_seeds) {
            per_ped.extend(eval_window(params, w, k, mode, s)?);
        }
    } else {
        let jobs: Vec<(usize, &Window, u64)> = windows
            .iter()
            .enumerate()
            .map(|(i, w)| (i, w, window_seeds[i]))
            .collect();
        let chunk = jobs.len().div_ceil(threads);
        let mut results: Vec<Result<Vec<(usize, Vec<PerPedestrian>)>>> = Vec::new();
        std::thread::scope(|scope| {
            let handles: Vec<_> = jobs
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter()
                            .map(|&(i, w, s)| Ok((i, eval_window(params, w, k, mode, s)?)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            for h in handles {
                results.push(h.join().expect("worker panicked"));
            }
        });
        let mut indexed: Vec<(usize, Vec<PerPedestrian>)> = Vec::new();
        for r in results {
            indexed.extend(r?);
        }
        indexed.sort_by_key(|(i, _)| *i);
        for (_, v) in indexed {
            per_ped.extend(v);
        }
    }

    let n = per_ped.len() as f64;
    let ade_mean = per_ped.iter().map(|p| p.ade).sum::<f64>() / n;
    let fde_mean = per_ped.iter().map(|p| p.fde).sum::<f64>() / n;
    Ok(MetricsReport {
        dataset: dataset.to_string(),
        ade: ade_mean,
        fde: fde_mean,
        k,
        metric_mode: mode,
        window_count: windows.len(),
        seed,
        per_pedestrian: per_ped,
    })
}

#[derive(Debug, Clone)]
pub struct ScalingEntry {
    pub n: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Structural count of hub/host cell evaluations in one rollout.
    pub op_count: usize,
}

#[derive(Debug, Clone)]
pub struct ScalingReport {
    pub entries: Vec<ScalingEntry>,
    /// Mean of time(2N)/time(N) over consecutive doubling pairs.
    pub growth_ratio: f64,
    pub repeats: usize,
    pub seed: u64,
}

impl ScalingReport {
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"entries\": [\n");
        for (i, e) in self.entries.iter().enumerate() {
            write!(
                out,
                "    {{\"n\": {}, \"mean_seconds\": {}, \"std_seconds\": {}, \"op_count\": {}}}{}\n",
                e.n,
                e.mean_seconds,
                e.std_seconds,
                e.op_count,
                if i + 1 < self.entries.len() { "," } else { "" }
            )
            .unwrap();
        }
        write!(
            out,
            "  ],\n  \"growth_ratio\": {},\n  \"repeats\": {},\n  \"seed\": {}\n}}\n",
            self.growth_ratio, self.repeats, self.seed
        )
        .unwrap();
        out
    }
}

/// Structural op census of one rollout with N pedestrians: host
/// embedding rows plus hub LSTM steps. Affine in N by construction;
/// the benchmark asserts it.
pub fn structural_op_count(
    params: &ParamSet,
    n: usize,
    t_obs: usize,
    t_pred: usize,
) -> Result<usize> {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let w = center_window(&synthetic_window(n, t_obs, t_pred, &mut rng));
    let noise = sample_noise(n, params.config.noise, 1, &mut rng);
    let mut tape = Tape::new();
    build_rollout(&mut tape, params, &w, &noise)?;
    Ok(tape.census_rows(TAG_HOST_EMBED) + tape.census_count(TAG_HUB_LSTM))
}

/// Single-thread timing of full rollouts at each crowd size N,
/// reporting the growth ratio across doubling pairs.
pub fn bench_scaling(
    params: &ParamSet,
    n_list: &[usize],
    repeats: usize,
    t_obs: usize,
    t_pred: usize,
    seed: u64,
) -> Result<ScalingReport> {
    if n_list.len() < 2 {
        return Err(Error::Config("bench needs at least 2 values of N".to_string()));
    }
    if n_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("N values must be strictly increasing".to_string()));
    }
    if repeats == 0 {
        return Err(Error::Config("repeats must be >= 1".to_string()));
    }
    let warmup = 5;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let w = center_window(&synthetic_window(n, t_obs, t_pred, &mut rng));
        for i in 0..warmup {
            rollout(params, &w, 1, seed ^ i as u64)?;
        }
        let mut times = Vec::with_capacity(repeats);
        for i in 0..repeats {
            let start = Instant::now();
            rollout(params, &w, 1, seed ^ i as u64)?;
            times.push(start.elapsed().as_secs_f64());
        }
        let mean = times.iter().sum::<f64>() / repeats as f64;
        let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>()
            / repeats as f64;
        entries.push(ScalingEntry {
            n,
            mean_seconds: mean,
            std_seconds: var.sqrt(),
            op_count: structural_op_count(params, n, t_obs, t_pred)?,
        });
    }
    let mut ratios = Vec::new();
    for pair in entries.windows(2) {
        if pair[1].n == 2 * pair[0].n {
            ratios.push(pair[1].mean_seconds / pair[0].mean_seconds);
        }
    }
    let growth_ratio = if ratios.is_empty() {
        f64::NAN
    } else {
        ratios.iter().sum::<f64>() / ratios.len() as f64
    };
    Ok(ScalingReport {
        entries,
        growth_ratio,
        repeats,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand_chacha::ChaCha8Rng;

    fn track(points: &[(f64, f64)]) -> Tensor {
        let data = points.iter().flat_map(|&(x, y)| [x, y]).collect();
        Tensor::unchecked(vec![points.len(), 2], data)
    }

    #[test]
    fn identical_trajectories_score_zero() {
        let t = track(&[(0.0, 0.0), (1.0, 1.0), (2.0, 0.5)]);
        assert_eq!(ade(&t, &t, MetricMode::AllSteps).unwrap(), 0.0);
        assert_eq!(fde(&t, &t).unwrap(), 0.0);
    }

    #[test]
    fn constant_offset_gives_that_distance() {
        let truth = track(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)]);
        let pred = track(&[(3.0, 4.0), (4.0, 4.0), (5.0, 4.0)]);
        assert!((ade(&pred, &truth, MetricMode::AllSteps).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn fde_of_unit_diagonal() {
        let truth = track(&[(0.0, 0.0), (0.0, 0.0)]);
        let pred = track(&[(0.0, 0.0), (1.0, 1.0)]);
        assert!((fde(&pred, &truth).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn all_steps_matches_per_step_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        use rand::Rng;
        let pts_a: Vec<(f64, f64)> = (0..7)
            .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let pts_b: Vec<(f64, f64)> = (0..7)
            .map(|_| (rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)))
            .collect();
        let a = track(&pts_a);
        let b = track(&pts_b);
        let oracle: f64 = pts_a
            .iter()
            .zip(&pts_b)
            .map(|(&(ax, ay), &(bx, by))| ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
            .sum::<f64>()
            / 7.0;
        assert!((ade(&a, &b, MetricMode::AllSteps).unwrap() - oracle).abs() < 1e-12);
        // fde bounded by horizon * max per-step distance
        let max_step = pts_a
            .iter()
            .zip(&pts_b)
            .map(|(&(ax, ay), &(bx, by))| ((ax - bx).powi(2) + (ay - by).powi(2)).sqrt())
            .fold(0.0, f64::max);
        assert!(fde(&a, &b).unwrap() <= 7.0 * max_step + 1e-12);
    }

    #[test]
    fn ade_is_translation_invariant() {
        let truth = track(&[(0.5, 1.0), (1.5, 2.0), (2.5, 3.0)]);
        let pred = track(&[(0.0, 0.0), (2.0, 2.0), (3.0, 3.0)]);
        let shift = |t: &Tensor, dx: f64, dy: f64| {
            let mut out = t.clone();
            for r in 0..t.rows() {
                out.set(r, 0, t.at(r, 0) + dx);
                out.set(r, 1, t.at(r, 1) + dy);
            }
            out
        };
        let a0 = ade(&pred, &truth, MetricMode::AllSteps).unwrap();
        let a1 = ade(
            &shift(&pred, 7.25, -2.5),
            &shift(&truth, 7.25, -2.5),
            MetricMode::AllSteps,
        )
        .unwrap();
        assert_eq!(a0, a1);
    }

    #[test]
    fn sample8_selects_uniform_indices_with_final_step() {
        let idx = selected_steps(MetricMode::Sample8, 12);
        assert_eq!(idx.len(), 8);
        assert_eq!(*idx.last().unwrap(), 11);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));

        // T_pred = 8 degenerates to all steps
        assert_eq!(selected_steps(MetricMode::Sample8, 8), (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        let a = track(&[(0.0, 0.0), (1.0, 1.0)]);
        let b = track(&[(0.0, 0.0)]);
        assert!(ade(&a, &b, MetricMode::AllSteps).is_err());
    }

    fn tiny_checkpoint(seed: u64, t_obs: usize, t_pred: usize) -> Checkpoint {
        let cfg = ModelConfig::tiny(4);
        use rand::SeedableRng;
        let params = ParamSet::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        Checkpoint {
            t_obs,
            t_pred,
            seed,
            epochs_run: 0,
            final_loss: 0.0,
            params,
        }
    }

    #[test]
    fn evaluate_is_deterministic_and_k1_is_single_sample() {
        let ck = tiny_checkpoint(3, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let windows: Vec<Window> = (0..3).map(|_| synthetic_window(2, 4, 3, &mut rng)).collect();
        let a = evaluate(&ck, &windows, 1, MetricMode::AllSteps, 5, "synth", 1).unwrap();
        let b = evaluate(&ck, &windows, 1, MetricMode::AllSteps, 5, "synth", 1).unwrap();
        assert_eq!(a.ade, b.ade);
        assert_eq!(a.fde, b.fde);
        assert_eq!(a.window_count, 3);
    }

    #[test]
    fn threaded_evaluation_matches_sequential() {
        let ck = tiny_checkpoint(6, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let windows: Vec<Window> = (0..5).map(|_| synthetic_window(3, 4, 3, &mut rng)).collect();
        let seq = evaluate(&ck, &windows, 2, MetricMode::AllSteps, 9, "synth", 1).unwrap();
        let par = evaluate(&ck, &windows, 2, MetricMode::AllSteps, 9, "synth", 3).unwrap();
        assert_eq!(seq.ade, par.ade);
        assert_eq!(seq.fde, par.fde);
    }

    #[test]
    fn best_of_k_is_non_increasing_in_k() {
        let ck = tiny_checkpoint(8, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let windows: Vec<Window> = (0..4).map(|_| synthetic_window(2, 4, 3, &mut rng)).collect();
        // identical per-window seeds, so larger K evaluates a superset
        let scores: Vec<f64> = [1usize, 5, 20]
            .iter()
            .map(|&k| {
                evaluate(&ck, &windows, k, MetricMode::AllSteps, 11, "synth", 1)
                    .unwrap()
                    .ade
            })
            .collect();
        assert!(scores[1] <= scores[0] + 1e-12);
        assert!(scores[2] <= scores[1] + 1e-12);
    }

    #[test]
    fn config_mismatch_is_rejected() {
        let ck = tiny_checkpoint(1, 8, 12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let windows = vec![synthetic_window(2, 4, 3, &mut rng)];
        assert!(evaluate(&ck, &windows, 1, MetricMode::AllSteps, 0, "synth", 1).is_err());
    }

    #[test]
    fn op_count_doubles_with_n() {
        let ck = tiny_checkpoint(1, 4, 3);
        let c8 = structural_op_count(&ck.params, 8, 4, 3).unwrap();
        let c16 = structural_op_count(&ck.params, 16, 4, 3).unwrap();
        let c32 = structural_op_count(&ck.params, 32, 4, 3).unwrap();
        // affine in N: equal increments per doubling of the linear part
        assert_eq!(c16 - c8, 8 * (4 + 3));
        assert_eq!(c32 - c16, 16 * (4 + 3));
    }

    #[test]
    fn bench_rejects_bad_inputs() {
        let ck = tiny_checkpoint(1, 4, 3);
        assert!(bench_scaling(&ck.params, &[8], 3, 4, 3, 0).is_err());
        assert!(bench_scaling(&ck.params, &[8, 16], 0, 4, 3, 0).is_err());
        assert!(bench_scaling(&ck.params, &[16, 8], 3, 4, 3, 0).is_err());
    }
}
