//! Self-contained correctness checks: full-model gradient versus
//! finite differences, equivariance properties, and variety-loss
//! semantics. Shared by `starnet selftest` and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::{center_window, synthetic_window, Window};
use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::{
    build_rollout, collect_result, rollout, sample_noise, ModelConfig, ParamSet,
};
use crate::training::{truth_leaves, variety_loss};

/// Required analytic-vs-finite-difference agreement.
pub const GRAD_REL_TOL: f64 = 1e-5;
/// Required translation equivariance of de-centered output.
pub const TRANSLATION_TOL: f64 = 1e-9;

const FD_EPS: f64 = 1e-5;

fn loss_value(params: &ParamSet, window: &Window, noise: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let graph = build_rollout(&mut tape, params, window, noise)?;
    let truth = truth_leaves(&mut tape, window);
    let (loss, _) = variety_loss(&mut tape, &graph.preds, &truth)?;
    Ok(tape.value(loss).first())
}

/// Max relative error between the analytic full-model variety-loss
/// gradient and central finite differences, over every parameter of a
/// tiny StarNet (N=3, T_obs=4, T_pred=3, hidden 8, K=2).
pub fn full_model_gradient_check() -> Result<f64> {
    let cfg = ModelConfig::tiny(8);
    let mut rng = ChaCha20Rng::seed_from_u64(100);
    let mut params = ParamSet::init(cfg, &mut rng);
    let window = center_window(&synthetic_window(3, 4, 3, &mut rng));
    let noise = sample_noise(3, cfg.noise, 2, &mut rng);

    // analytic gradients
    let mut tape = Tape::new();
    let graph = build_rollout(&mut tape, &params, &window, &noise)?;
    let truth = truth_leaves(&mut tape, &window);
    let (loss, _) = variety_loss(&mut tape, &graph.preds, &truth)?;
    tape.backward(loss)?;
    let grads = tape.gradients(&graph.leaves);

    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut worst = 0.0f64;
    for name in names {
        let len = params
            .named()
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.len())
            .unwrap();
        for i in 0..len {
            let orig = {
                let mut named = params.named_mut();
                let slot = &mut named.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                let orig = slot.data()[i];
                slot.data_mut()[i] = orig + FD_EPS;
                orig
            };
            let plus = loss_value(&params, &window, &noise)?;
            {
                let mut named = params.named_mut();
                let slot = &mut named.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                slot.data_mut()[i] = orig - FD_EPS;
            }
            let minus = loss_value(&params, &window, &noise)?;
            {
                let mut named = params.named_mut();
                let slot = &mut named.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                slot.data_mut()[i] = orig;
            }
            let fd = (plus - minus) / (2.0 * FD_EPS);
            let an = grads[&name].data()[i];
            // denominator floored at 1e-3: below that the comparison is
            // an absolute check at 1e-8, still far above the central-
            // difference noise floor (~1e-10 for eps = 1e-5)
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

/// Max absolute deviation from exact translation equivariance:
/// shifting all inputs by delta must shift de-centered predictions by
/// exactly delta.
pub fn translation_equivariance_check(delta: (f64, f64)) -> Result<f64> {
    let cfg = ModelConfig::tiny(8);
    let mut rng = ChaCha20Rng::seed_from_u64(200);
    let params = ParamSet::init(cfg, &mut rng);
    let base = synthetic_window(4, 5, 4, &mut rng);
    let mut shifted = base.clone();
    for i in 0..base.n_peds() {
        for t in 0..base.horizon() {
            shifted.positions.set3(i, t, 0, base.positions.at3(i, t, 0) + delta.0);
            shifted.positions.set3(i, t, 1, base.positions.at3(i, t, 1) + delta.1);
        }
    }
    let a = rollout(&params, &center_window(&base), 2, 31)?;
    let b = rollout(&params, &center_window(&shifted), 2, 31)?;
    let da = a.decentered();
    let db = b.decentered();
    let mut worst = 0.0f64;
    for (ta, tb) in da.iter().zip(&db) {
        for (i, (&va, &vb)) in ta.data().iter().zip(tb.data()).enumerate() {
            let expect = if i % 2 == 0 { va + delta.0 } else { va + delta.1 };
            worst = worst.max((vb - expect).abs());
        }
    }
    Ok(worst)
}

/// Random pedestrian reordering must permute predictions identically
/// and leave every observation-phase r unchanged, exactly.
pub fn permutation_equivariance_check() -> Result<()> {
    let cfg = ModelConfig::tiny(6);
    let mut rng = ChaCha20Rng::seed_from_u64(300);
    let params = ParamSet::init(cfg, &mut rng);
    let w = center_window(&synthetic_window(5, 4, 3, &mut rng));

    let mut order: Vec<usize> = (0..w.n_peds()).collect();
    use rand::seq::SliceRandom;
    order.shuffle(&mut rng);
    let mut perm = w.clone();
    for (dst, &src) in order.iter().enumerate() {
        perm.ped_ids[dst] = w.ped_ids[src];
        for t in 0..w.horizon() {
            perm.positions.set3(dst, t, 0, w.positions.at3(src, t, 0));
            perm.positions.set3(dst, t, 1, w.positions.at3(src, t, 1));
        }
    }

    // identical per-pedestrian noise, reordered the same way
    let base_noise = sample_noise(w.n_peds(), cfg.noise, 1, &mut ChaCha20Rng::seed_from_u64(7));
    let mut perm_noise = base_noise.clone();
    for (dst, &src) in order.iter().enumerate() {
        for z in 0..cfg.noise {
            let v = base_noise[0].at(src, z);
            perm_noise[0].set(dst, z, v);
        }
    }

    let run = |win: &Window, noise: &[Tensor]| -> Result<(Vec<Tensor>, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let g = build_rollout(&mut tape, &params, win, noise)?;
        let res = collect_result(&tape, &g, win);
        Ok((res.predictions, res.r_series))
    };
    let (pred_a, r_a) = run(&w, &base_noise)?;
    let (pred_b, r_b) = run(&perm, &perm_noise)?;

    for (ra, rb) in r_a.iter().zip(&r_b) {
        if ra.data() != rb.data() {
            return Err(Error::Config(
                "hub representation changed under pedestrian permutation".to_string(),
            ));
        }
    }
    for (dst, &src) in order.iter().enumerate() {
        for t in 0..w.t_pred {
            for axis in 0..2 {
                if pred_b[0].at3(dst, t, axis) != pred_a[0].at3(src, t, axis) {
                    return Err(Error::Config(format!(
                        "prediction not permutation-equivariant at ped {src}->{dst}, step {t}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Variety-loss semantics: K=1 equals the MSE oracle, the min is a
/// lower bound on every per-sample loss, and losing samples receive
/// zero gradient.
pub fn variety_loss_check() -> Result<()> {
    let cfg = ModelConfig::tiny(4);
    let mut rng = ChaCha20Rng::seed_from_u64(400);
    let params = ParamSet::init(cfg, &mut rng);
    let w = center_window(&synthetic_window(3, 4, 3, &mut rng));
    let noise = sample_noise(3, cfg.noise, 3, &mut rng);

    let mut tape = Tape::new();
    let graph = build_rollout(&mut tape, &params, &w, &noise)?;
    let truth = truth_leaves(&mut tape, &w);
    let (loss, k_min) = variety_loss(&mut tape, &graph.preds, &truth)?;
    let loss_v = tape.value(loss).first();

    // per-sample oracle
    let norm = 1.0 / (w.n_peds() * w.t_pred) as f64;
    let per_k: Vec<f64> = graph
        .preds
        .iter()
        .map(|steps| {
            let mut acc = 0.0;
            for (t, &p) in steps.iter().enumerate() {
                let pv = tape.value(p);
                let tv = tape.value(truth[t]);
                for i in 0..w.n_peds() {
                    acc += (pv.at(i, 0) - tv.at(i, 0)).powi(2)
                        + (pv.at(i, 1) - tv.at(i, 1)).powi(2);
                }
            }
            acc * norm
        })
        .collect();
    for (k, &lk) in per_k.iter().enumerate() {
        if loss_v > lk + 1e-15 {
            return Err(Error::Config(format!(
                "variety loss {loss_v} exceeds sample {k} loss {lk}"
            )));
        }
    }
    if (loss_v - per_k[k_min]).abs() > 1e-12 {
        return Err(Error::Config("variety loss does not equal min L_k".to_string()));
    }

    // K = 1 equals MSE to 1e-12
    let mut tape1 = Tape::new();
    let g1 = build_rollout(&mut tape1, &params, &w, &noise[..1])?;
    let truth1 = truth_leaves(&mut tape1, &w);
    let (l1, _) = variety_loss(&mut tape1, &g1.preds, &truth1)?;
    if (tape1.value(l1).first() - per_k[0]).abs() > 1e-12 {
        return Err(Error::Config("K=1 variety loss differs from MSE".to_string()));
    }

    // zero gradient into losing samples
    tape.backward(loss)?;
    for (k, steps) in graph.preds.iter().enumerate() {
        if k == k_min {
            continue;
        }
        for &p in steps {
            if let Some(g) = tape.grad(p) {
                if g.data().iter().any(|&v| v != 0.0) {
                    return Err(Error::Config(format!(
                        "losing sample {k} received gradient"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Determinism: two rollouts with the same seed are bit-identical.
pub fn determinism_check() -> Result<()> {
    let cfg = ModelConfig::tiny(6);
    let mut rng = ChaCha20Rng::seed_from_u64(500);
    let params = ParamSet::init(cfg, &mut rng);
    let w = center_window(&synthetic_window(3, 5, 4, &mut rng));
    let a = rollout(&params, &w, 3, 77)?;
    let b = rollout(&params, &w, 3, 77)?;
    for (ta, tb) in a.predictions.iter().zip(&b.predictions) {
        if ta.data() != tb.data() {
            return Err(Error::Config("rollout not reproducible".to_string()));
        }
    }
    Ok(())
}

/// Run every check, returning (name, result) pairs.
pub fn run_all() -> Vec<(&'static str, Result<String>)> {
    let mut out: Vec<(&'static str, Result<String>)> = Vec::new();
    out.push((
        "gradient_finite_difference",
        full_model_gradient_check().and_then(|worst| {
            if worst < GRAD_REL_TOL {
                Ok(format!("max rel err {worst:.3e}"))
            } else {
                Err(Error::Config(format!(
                    "max rel err {worst:.3e} exceeds {GRAD_REL_TOL:.0e}"
                )))
            }
        }),
    ));
    out.push((
        "translation_equivariance",
        translation_equivariance_check((5.3, -2.7)).and_then(|worst| {
            if worst < TRANSLATION_TOL {
                Ok(format!("max deviation {worst:.3e}"))
            } else {
                Err(Error::Config(format!(
                    "max deviation {worst:.3e} exceeds {TRANSLATION_TOL:.0e}"
                )))
            }
        }),
    ));
    out.push((
        "permutation_equivariance",
        permutation_equivariance_check().map(|_| "exact".to_string()),
    ));
    out.push((
        "variety_loss_semantics",
        variety_loss_check().map(|_| "ok".to_string()),
    ));
    out.push((
        "rollout_determinism",
        determinism_check().map(|_| "bit-identical".to_string()),
    ));
    out
}
