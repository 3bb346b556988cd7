//! Variety-loss training with Adam, rotation augmentation, and text
//! checkpoints.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::data::{center_window, random_rotation_angle, rotate_window, Window};
use crate::diffcore::{adam_step, AdamState, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{build_rollout, sample_noise, ModelConfig, ModelKind, ParamSet};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Samples per window for the best-of-K loss.
    pub k: usize,
    pub lr: f64,
    pub seed: u64,
    pub rotate_augment: bool,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            k: 20,
            lr: 1e-4,
            seed: 0,
            rotate_augment: true,
            grad_clip: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub wall_seconds: f64,
}

/// A trained (or freshly initialized) model plus enough metadata to
/// reproduce and validate downstream runs.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t_obs: usize,
    pub t_pred: usize,
    pub seed: u64,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub params: ParamSet,
}

/// Best-of-K squared-error loss over a built rollout graph.
///
/// For every sample k, L_k = mean over pedestrians and steps of the
/// squared displacement to ground truth; the returned node is the
/// minimizing L_k (ties to the lowest k), so gradient flows only
/// through the winning sample.
pub fn variety_loss(
    tape: &mut Tape,
    preds: &[Vec<Var>],
    truth: &[Var],
) -> Result<(Var, usize)> {
    if preds.is_empty() {
        return Err(Error::Config("variety_loss needs K >= 1".to_string()));
    }
    let t_pred = truth.len();
    let n = tape.value(truth[0]).rows();
    let norm = 1.0 / (n * t_pred) as f64;
    let mut best: Option<(Var, usize, f64)> = None;
    for (k, steps) in preds.iter().enumerate() {
        if steps.len() != t_pred {
            return Err(Error::ShapeMismatch {
                op: "variety_loss",
                left: vec![steps.len()],
                right: vec![t_pred],
            });
        }
        let mut acc: Option<Var> = None;
        for (t, &p) in steps.iter().enumerate() {
            let d = tape.sub(p, truth[t])?;
            let sq = tape.mul(d, d)?;
            let s = tape.sum_all(sq);
            acc = Some(match acc {
                None => s,
                Some(a) => tape.add(a, s)?,
            });
        }
        let l_k = tape.scale(acc.unwrap(), norm);
        let v = tape.value(l_k).first();
        match best {
            None => best = Some((l_k, k, v)),
            Some((_, _, bv)) if v < bv => best = Some((l_k, k, v)),
            _ => {}
        }
    }
    let (node, k, _) = best.unwrap();
    Ok((node, k))
}

/// Ground-truth future steps of a centered window, as tape leaves.
pub fn truth_leaves(tape: &mut Tape, window: &Window) -> Vec<Var> {
    let n = window.n_peds();
    (window.t_obs..window.horizon())
        .map(|t| {
            let mut data = Vec::with_capacity(n * 2);
            for i in 0..n {
                let (x, y) = window.pos(i, t);
                data.push(x);
                data.push(y);
            }
            tape.leaf(Tensor::unchecked(vec![n, 2], data))
        })
        .collect()
}

fn clip_gradients(grads: &mut std::collections::HashMap<String, Tensor>, max_norm: f64) {
    let norm: f64 = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
}

/// One gradient step on a single centered window. Returns the loss.
pub fn train_step(
    params: &mut ParamSet,
    window: &Window,
    k: usize,
    grad_clip: Option<f64>,
    opt: &mut AdamState,
    rng: &mut impl Rng,
) -> Result<f64> {
    let noise = sample_noise(window.n_peds(), params.config.noise, k, rng);
    let mut tape = Tape::new();
    let graph = build_rollout(&mut tape, params, window, &noise)?;
    let truth = truth_leaves(&mut tape, window);
    let (loss, _) = variety_loss(&mut tape, &graph.preds, &truth)?;
    let loss_value = tape.value(loss).first();
    if !loss_value.is_finite() {
        return Err(Error::NonFinite {
            name: format!("loss on window {}", window.source),
        });
    }
    tape.backward(loss)?;
    let mut grads = tape.gradients(&graph.leaves);
    if let Some(c) = grad_clip {
        clip_gradients(&mut grads, c);
    }
    let mut named = params.named_mut();
    adam_step(&mut named, &grads, opt)?;
    Ok(loss_value)
}

/// Train on the given (uncentered) windows. Deterministic given the
/// config seed: fixed shuffle, one RNG stream for rotation and noise.
pub fn train(
    windows: &[Window],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    t_obs: usize,
    t_pred: usize,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    if windows.is_empty() {
        return Err(Error::Config("no training windows".to_string()));
    }
    if cfg.k == 0 || cfg.lr <= 0.0 {
        return Err(Error::Config("need K >= 1 and lr > 0".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut params = ParamSet::init(model_cfg, &mut rng);
    let mut opt = AdamState::new(cfg.lr);
    let mut logs = Vec::new();
    let mut final_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..windows.len()).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &wi in &order {
            let mut w = center_window(&windows[wi]);
            if cfg.rotate_augment {
                let theta = random_rotation_angle(&mut rng);
                w = rotate_window(&w, theta);
            }
            let loss = train_step(&mut params, &w, cfg.k, cfg.grad_clip, &mut opt, &mut rng)
                .map_err(|e| {
                    Error::Config(format!("epoch {epoch}, window {}: {e}", windows[wi].source))
                })?;
            total += loss;
        }
        let mean_loss = total / windows.len() as f64;
        final_loss = mean_loss;
        let log = EpochLog {
            epoch,
            mean_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&log);
        logs.push(log);
    }

    Ok((
        Checkpoint {
            t_obs,
            t_pred,
            seed: cfg.seed,
            epochs_run: cfg.epochs,
            final_loss,
            params,
        },
        logs,
    ))
}

// ── checkpoint persistence ───────────────────────────────────────────

const CHECKPOINT_HEADER: &str = "starnet-checkpoint v1";

/// Serialize to a self-describing text document. f64 values use Rust's
/// shortest round-trip decimal form, so save -> load -> save is
/// byte-identical.
pub fn checkpoint_to_string(ck: &Checkpoint) -> String {
    let mut out = String::new();
    let cfg = &ck.params.config;
    writeln!(out, "{CHECKPOINT_HEADER}").unwrap();
    writeln!(out, "model {}", cfg.kind.as_str()).unwrap();
    writeln!(out, "embed {}", cfg.embed).unwrap();
    writeln!(out, "hub_hidden {}", cfg.hub_hidden).unwrap();
    writeln!(out, "host_hidden {}", cfg.host_hidden).unwrap();
    writeln!(out, "noise {}", cfg.noise).unwrap();
    writeln!(out, "t_obs {}", ck.t_obs).unwrap();
    writeln!(out, "t_pred {}", ck.t_pred).unwrap();
    writeln!(out, "seed {}", ck.seed).unwrap();
    writeln!(out, "epochs {}", ck.epochs_run).unwrap();
    writeln!(out, "final_loss {}", ck.final_loss).unwrap();
    for (name, tensor) in ck.params.named() {
        write!(out, "tensor {name} {}", tensor.shape().len()).unwrap();
        for d in tensor.shape() {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
        let mut first = true;
        for v in tensor.data() {
            if !first {
                out.push(' ');
            }
            write!(out, "{v}").unwrap();
            first = false;
        }
        out.push('\n');
    }
    out
}

pub fn parse_checkpoint(text: &str) -> Result<Checkpoint> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty file"))?;
    if header != CHECKPOINT_HEADER {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint header {header:?}"
        )));
    }
    let mut kv = std::collections::HashMap::new();
    let mut tensor_lines = Vec::new();
    let mut in_tensors = false;
    for line in lines {
        if line.starts_with("tensor ") || in_tensors {
            in_tensors = true;
            tensor_lines.push(line);
        } else {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<&String> {
        kv.get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing field {k:?}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad numeric field {k:?}")))
    };
    let kind = ModelKind::parse(get("model")?)?;
    let config = ModelConfig {
        embed: num("embed")?,
        hub_hidden: num("hub_hidden")?,
        host_hidden: num("host_hidden")?,
        noise: num("noise")?,
        kind,
    };
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| bad("bad seed"))?;
    let final_loss: f64 = get("final_loss")?
        .parse()
        .map_err(|_| bad("bad final_loss"))?;

    // Build a zero-initialized ParamSet with the right shapes, then
    // fill each named tensor from the file.
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut params = ParamSet::init(config, &mut rng);
    let mut loaded = std::collections::HashMap::new();
    let mut it = tensor_lines.iter();
    while let Some(head) = it.next() {
        let mut parts = head.split_whitespace();
        if parts.next() != Some("tensor") {
            return Err(Error::Checkpoint(format!("expected tensor line, got {head:?}")));
        }
        let name = parts.next().ok_or_else(|| bad("tensor line missing name"))?;
        let rank: usize = parts
            .next()
            .ok_or_else(|| bad("tensor line missing rank"))?
            .parse()
            .map_err(|_| bad("bad tensor rank"))?;
        let shape: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| bad("bad tensor extent")))
            .collect::<Result<_>>()?;
        if shape.len() != rank {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: declared rank {rank}, found {} extents",
                shape.len()
            )));
        }
        let data_line = it
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: truncated file")))?;
        let data: Vec<f64> = data_line
            .split_whitespace()
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Checkpoint(format!("tensor {name}: bad value {p:?}")))
            })
            .collect::<Result<_>>()?;
        let t = Tensor::new(shape, data)
            .map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        loaded.insert(name.to_string(), t);
    }
    for (name, slot) in params.named_mut() {
        let t = loaded
            .remove(&name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name}: shape {:?} does not match config shape {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    if let Some(extra) = loaded.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
    }
    Ok(Checkpoint {
        t_obs: num("t_obs")?,
        t_pred: num("t_pred")?,
        seed,
        epochs_run: num("epochs")?,
        final_loss,
        params,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_string(ck))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path)?;
    parse_checkpoint(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic_window;
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(k: usize, seed: u64) -> (ParamSet, Window, Vec<Tensor>) {
        let cfg = ModelConfig::tiny(4);
        let params = ParamSet::init(cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let w = center_window(&synthetic_window(3, 4, 3, &mut rng));
        let noise = sample_noise(3, cfg.noise, k, &mut ChaCha8Rng::seed_from_u64(seed + 2));
        (params, w, noise)
    }

    #[test]
    fn k1_variety_loss_equals_mse_oracle() {
        let (params, w, noise) = tiny_setup(1, 1);
        let mut tape = Tape::new();
        let g = build_rollout(&mut tape, &params, &w, &noise).unwrap();
        let truth = truth_leaves(&mut tape, &w);
        let (loss, k) = variety_loss(&mut tape, &g.preds, &truth).unwrap();
        assert_eq!(k, 0);

        let mut oracle = 0.0;
        for (t, &p) in g.preds[0].iter().enumerate() {
            let pv = tape.value(p);
            let tv = tape.value(truth[t]);
            for i in 0..w.n_peds() {
                oracle += (pv.at(i, 0) - tv.at(i, 0)).powi(2);
                oracle += (pv.at(i, 1) - tv.at(i, 1)).powi(2);
            }
        }
        oracle /= (w.n_peds() * w.t_pred) as f64;
        assert!((tape.value(loss).first() - oracle).abs() < 1e-12);
    }

    #[test]
    fn perfect_sample_gives_zero_loss() {
        let (_, w, _) = tiny_setup(1, 2);
        let mut tape = Tape::new();
        let truth = truth_leaves(&mut tape, &w);
        // one "prediction" per step aliasing the truth leaf values
        let preds: Vec<Vec<Var>> = vec![truth
            .iter()
            .map(|&v| {
                let t = tape.value(v).clone();
                tape.leaf(t)
            })
            .collect()];
        let (loss, _) = variety_loss(&mut tape, &preds, &truth).unwrap();
        assert_eq!(tape.value(loss).first(), 0.0);
    }

    #[test]
    fn min_over_k_matches_per_sample_oracle() {
        let (params, w, noise) = tiny_setup(3, 3);
        let mut tape = Tape::new();
        let g = build_rollout(&mut tape, &params, &w, &noise).unwrap();
        let truth = truth_leaves(&mut tape, &w);
        let (loss, k_min) = variety_loss(&mut tape, &g.preds, &truth).unwrap();

        // recompute each L_k independently
        let norm = 1.0 / (w.n_peds() * w.t_pred) as f64;
        let per_k: Vec<f64> = g
            .preds
            .iter()
            .map(|steps| {
                let mut acc = 0.0;
                for (t, &p) in steps.iter().enumerate() {
                    let pv = tape.value(p);
                    let tv = tape.value(truth[t]);
                    for i in 0..w.n_peds() {
                        acc += (pv.at(i, 0) - tv.at(i, 0)).powi(2);
                        acc += (pv.at(i, 1) - tv.at(i, 1)).powi(2);
                    }
                }
                acc * norm
            })
            .collect();
        let oracle_min = per_k.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!((tape.value(loss).first() - oracle_min).abs() < 1e-12);
        assert_eq!(per_k[k_min], oracle_min);
        for v in &per_k {
            assert!(tape.value(loss).first() <= *v + 1e-15);
        }
    }

    #[test]
    fn gradient_of_non_minimizing_samples_is_zero() {
        let (params, w, noise) = tiny_setup(3, 4);
        let mut tape = Tape::new();
        let g = build_rollout(&mut tape, &params, &w, &noise).unwrap();
        let truth = truth_leaves(&mut tape, &w);
        let (loss, k_min) = variety_loss(&mut tape, &g.preds, &truth).unwrap();
        tape.backward(loss).unwrap();
        for (k, steps) in g.preds.iter().enumerate() {
            for &p in steps {
                let got_grad = tape.grad(p).is_some();
                if k == k_min {
                    assert!(got_grad, "minimizing sample must receive gradient");
                } else {
                    // prediction vars of losing samples never see gradient
                    assert!(
                        !got_grad || tape.grad(p).unwrap().data().iter().all(|&v| v == 0.0),
                        "sample {k} leaked gradient"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_epochs_returns_initial_weights() {
        let cfg = ModelConfig::tiny(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let windows = vec![synthetic_window(2, 4, 3, &mut rng)];
        let tc = TrainConfig {
            epochs: 0,
            k: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let (ck, logs) = train(&windows, cfg, &tc, 4, 3, |_| {}).unwrap();
        assert!(logs.is_empty());
        let expect = ParamSet::init(cfg, &mut ChaCha20Rng::seed_from_u64(11));
        assert_eq!(ck.params, expect);
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let cfg = ModelConfig::tiny(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let windows: Vec<Window> = (0..3).map(|_| synthetic_window(2, 4, 3, &mut rng)).collect();
        let tc = TrainConfig {
            epochs: 2,
            k: 2,
            lr: 1e-3,
            seed: 77,
            ..TrainConfig::default()
        };
        let (a, _) = train(&windows, cfg, &tc, 4, 3, |_| {}).unwrap();
        let (b, _) = train(&windows, cfg, &tc, 4, 3, |_| {}).unwrap();
        assert_eq!(checkpoint_to_string(&a), checkpoint_to_string(&b));
    }

    #[test]
    fn translated_dataset_yields_identical_loss_curve() {
        let cfg = ModelConfig::tiny(4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let windows: Vec<Window> = (0..2).map(|_| synthetic_window(2, 4, 3, &mut rng)).collect();
        let shifted: Vec<Window> = windows
            .iter()
            .map(|w| {
                let mut s = w.clone();
                for i in 0..w.n_peds() {
                    for t in 0..w.horizon() {
                        s.positions.set3(i, t, 0, w.positions.at3(i, t, 0) + 12.5);
                        s.positions.set3(i, t, 1, w.positions.at3(i, t, 1) - 3.75);
                    }
                }
                s
            })
            .collect();
        let tc = TrainConfig {
            epochs: 2,
            k: 2,
            lr: 1e-3,
            seed: 9,
            rotate_augment: false,
            ..TrainConfig::default()
        };
        let (_, la) = train(&windows, cfg, &tc, 4, 3, |_| {}).unwrap();
        let (_, lb) = train(&shifted, cfg, &tc, 4, 3, |_| {}).unwrap();
        for (a, b) in la.iter().zip(&lb) {
            let rel = (a.mean_loss - b.mean_loss).abs() / a.mean_loss.abs().max(1e-12);
            assert!(rel < 1e-9, "epoch {}: {} vs {}", a.epoch, a.mean_loss, b.mean_loss);
        }
    }

    #[test]
    fn loss_trends_down_on_fixed_tiny_dataset() {
        let cfg = ModelConfig::tiny(4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let windows = vec![synthetic_window(2, 4, 3, &mut rng)];
        let tc = TrainConfig {
            epochs: 200,
            k: 1,
            lr: 1e-3,
            seed: 1,
            rotate_augment: false,
            ..TrainConfig::default()
        };
        let (_, logs) = train(&windows, cfg, &tc, 4, 3, |_| {}).unwrap();
        let first: f64 = logs[..10].iter().map(|l| l.mean_loss).sum::<f64>() / 10.0;
        let last: f64 = logs[logs.len() - 10..].iter().map(|l| l.mean_loss).sum::<f64>() / 10.0;
        assert!(last < first, "first {first}, last {last}");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let cfg = ModelConfig::tiny(3);
        let params = ParamSet::init(cfg, &mut ChaCha8Rng::seed_from_u64(8));
        let ck = Checkpoint {
            t_obs: 8,
            t_pred: 12,
            seed: 3,
            epochs_run: 5,
            final_loss: 0.375,
            params,
        };
        let text = checkpoint_to_string(&ck);
        let loaded = parse_checkpoint(&text).unwrap();
        assert_eq!(loaded, ck);
        assert_eq!(checkpoint_to_string(&loaded), text);
    }

    #[test]
    fn truncated_checkpoint_is_a_structured_error() {
        let cfg = ModelConfig::tiny(3);
        let params = ParamSet::init(cfg, &mut ChaCha8Rng::seed_from_u64(9));
        let ck = Checkpoint {
            t_obs: 4,
            t_pred: 3,
            seed: 0,
            epochs_run: 0,
            final_loss: 0.0,
            params,
        };
        let text = checkpoint_to_string(&ck);
        let cut = &text[..text.len() * 2 / 3];
        let cut = &cut[..cut.rfind('\n').unwrap()];
        assert!(matches!(parse_checkpoint(cut), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_rejected() {
        assert!(parse_checkpoint("starnet-checkpoint v9\nmodel starnet\n").is_err());
    }
}
