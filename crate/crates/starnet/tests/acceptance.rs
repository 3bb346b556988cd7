//! End-to-end acceptance suite. Each test prints one PASS line when its
//! criterion holds; run with `cargo test --test acceptance -- --nocapture`
//! to see them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use starnet::data::{center_window, synthetic_window, Window};
use starnet::diffcore::Tensor;
use starnet::eval::{ade, bench_scaling, evaluate, structural_op_count, MetricMode};
use starnet::model::{rollout, ModelConfig, ModelKind, ParamSet};
use starnet::selftest;
use starnet::training::{checkpoint_to_string, train, TrainConfig};

// ── helpers ──────────────────────────────────────────────────────────

fn window_from_tracks(tracks: &[Vec<(f64, f64)>], t_obs: usize, t_pred: usize) -> Window {
    let horizon = t_obs + t_pred;
    assert!(tracks.iter().all(|t| t.len() == horizon));
    let mut coords = Vec::new();
    for track in tracks {
        for &(x, y) in track {
            coords.push(x);
            coords.push(y);
        }
    }
    Window {
        positions: Tensor::new(vec![tracks.len(), horizon, 2], coords).unwrap(),
        ped_ids: (0..tracks.len() as i64).collect(),
        centroid: Tensor::zeros(vec![2]),
        source: "acceptance".to_string(),
        t_obs,
        t_pred,
    }
}

/// Per-window best-of-K ADE (all steps), averaged over pedestrians.
fn window_ade(params: &ParamSet, w: &Window, k: usize, seed: u64) -> f64 {
    let c = center_window(w);
    let res = rollout(params, &c, k, seed).unwrap();
    let mut total = 0.0;
    for ped in 0..c.n_peds() {
        let mut truth = Vec::new();
        for t in c.t_obs..c.horizon() {
            let (x, y) = c.pos(ped, t);
            truth.push(x);
            truth.push(y);
        }
        let truth = Tensor::new(vec![c.t_pred, 2], truth).unwrap();
        let mut best = f64::INFINITY;
        for p in &res.predictions {
            let mut track = Vec::new();
            for t in 0..c.t_pred {
                track.push(p.at3(ped, t, 0));
                track.push(p.at3(ped, t, 1));
            }
            let track = Tensor::new(vec![c.t_pred, 2], track).unwrap();
            best = best.min(ade(&track, &truth, MetricMode::AllSteps).unwrap());
        }
        total += best;
    }
    total / c.n_peds() as f64
}

// ── criteria ─────────────────────────────────────────────────────────

#[test]
fn criterion_1_gradient_matches_finite_differences() {
    let worst = selftest::full_model_gradient_check().unwrap();
    assert!(
        worst < 1e-5,
        "max relative error {worst:e} exceeds 1e-5"
    );
    println!("PASS criterion 1: full-model gradient vs finite differences, max rel err {worst:.3e} < 1e-5");
}

#[test]
fn criterion_2_translation_equivariance() {
    let worst = selftest::translation_equivariance_check((5.3, -2.7)).unwrap();
    assert!(worst < 1e-9, "max deviation {worst:e} exceeds 1e-9");
    println!("PASS criterion 2: shifting inputs by (5.3, -2.7) shifts predictions exactly, max deviation {worst:.3e} < 1e-9");
}

#[test]
fn criterion_3_permutation_equivariance() {
    selftest::permutation_equivariance_check().unwrap();
    println!("PASS criterion 3: pedestrian reordering permutes predictions and leaves the crowd representation unchanged, exactly");
}

#[test]
fn criterion_4_variety_loss_properties() {
    selftest::variety_loss_check().unwrap();
    println!("PASS criterion 4: K=1 equals MSE (1e-12), min-over-K lower-bounds every sample, losing samples get zero gradient");
}

#[test]
fn criterion_5_overfit_synthetic_crossing_scene() {
    // four pedestrians on straight crossing tracks, normalized units
    let t_obs = 8;
    let t_pred = 12;
    let starts = [(-0.4, -0.4), (0.4, -0.4), (-0.4, 0.4), (0.4, 0.4)];
    let vels = [(0.04, 0.04), (-0.04, 0.04), (0.04, -0.04), (-0.04, -0.04)];
    let tracks: Vec<Vec<(f64, f64)>> = (0..4)
        .map(|i| {
            (0..t_obs + t_pred)
                .map(|t| {
                    (
                        starts[i].0 + vels[i].0 * t as f64,
                        starts[i].1 + vels[i].1 * t as f64,
                    )
                })
                .collect()
        })
        .collect();
    let w = window_from_tracks(&tracks, t_obs, t_pred);
    let cfg = ModelConfig {
        noise: 2,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs: 2000,
        k: 1,
        lr: 1e-3,
        seed: 42,
        rotate_augment: false,
        grad_clip: None,
    };
    let (ck, logs) = train(&[w.clone()], cfg, &tc, t_obs, t_pred, |_| {}).unwrap();
    let score = window_ade(&ck.params, &w, 20, 7);
    assert!(
        score < 0.01,
        "best-of-20 ADE {score} after 2000 iterations (final loss {})",
        logs.last().unwrap().mean_loss
    );
    println!("PASS criterion 5: 2000-iteration overfit of a 4-pedestrian crossing scene reaches ADE {score:.4} < 0.01");
}

#[test]
fn criterion_6_linear_scaling() {
    let t_obs = 8;
    let t_pred = 12;
    let params = ParamSet::init(
        ModelConfig::default(),
        &mut ChaCha20Rng::seed_from_u64(1),
    );
    // structural census exactly affine in N
    for &n in &[8usize, 16, 32, 64] {
        let count = structural_op_count(&params, n, t_obs, t_pred).unwrap();
        assert_eq!(count, (n + 1) * (t_obs + t_pred), "census not affine at N={n}");
    }
    // measured single-thread growth across doublings
    let report = bench_scaling(&params, &[8, 16, 32, 64], 15, t_obs, t_pred, 3).unwrap();
    assert!(
        report.growth_ratio < 2.5,
        "growth ratio {} not < 2.5",
        report.growth_ratio
    );
    println!(
        "PASS criterion 6: op census affine in N; mean time(2N)/time(N) = {:.2} < 2.5 over N 8->64",
        report.growth_ratio
    );
}

/// Two pedestrians on a collision course. Both walk straight through
/// the observed window; during the prediction horizon each swerves away
/// from the other's side. The swerve side and timing are determined by
/// the *other* pedestrian's lateral offset and approach speed, so a
/// model that cannot see the other pedestrian cannot predict them.
fn collision_scene(rng: &mut impl Rng, t_obs: usize, t_pred: usize) -> Window {
    let horizon = t_obs + t_pred;
    let side: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    let delta = side * rng.gen_range(0.15..0.3);
    let v = rng.gen_range(0.35..0.45);
    let gap0 = v * (t_obs as f64 + rng.gen_range(0.5..4.0));
    let (mut ay, mut by) = (0.0f64, delta);
    let mut a = Vec::new();
    let mut b = Vec::new();
    for t in 0..horizon {
        let ax = -gap0 / 2.0 + v * t as f64;
        let bx = gap0 / 2.0 - v * t as f64;
        if (ax - bx).abs() < 1.6 {
            ay += -side * 0.18;
            by += side * 0.18;
        }
        a.push((ax, ay));
        b.push((bx, by));
    }
    window_from_tracks(&[a, b], t_obs, t_pred)
}

#[test]
fn criterion_7_interaction_benefit() {
    let t_obs = 6;
    let t_pred = 6;
    let mut gen_rng = ChaCha20Rng::seed_from_u64(999);
    let train_scenes: Vec<Window> = (0..96)
        .map(|_| collision_scene(&mut gen_rng, t_obs, t_pred))
        .collect();
    let test_scenes: Vec<Window> = (0..32)
        .map(|_| collision_scene(&mut gen_rng, t_obs, t_pred))
        .collect();
    let mut wins = 0;
    let mut detail = String::new();
    for seed in [1u64, 2, 3] {
        let mut scores = Vec::new();
        for kind in [ModelKind::StarNet, ModelKind::Baseline] {
            let cfg = ModelConfig {
                embed: 32,
                hub_hidden: 16,
                host_hidden: 32,
                noise: 2,
                kind,
            };
            let tc = TrainConfig {
                epochs: 40,
                k: 1,
                lr: 1e-3,
                seed,
                rotate_augment: false,
                grad_clip: None,
            };
            let (ck, _) = train(&train_scenes, cfg, &tc, t_obs, t_pred, |_| {}).unwrap();
            let mean: f64 = test_scenes
                .iter()
                .map(|w| window_ade(&ck.params, w, 20, seed ^ 0xabc))
                .sum::<f64>()
                / test_scenes.len() as f64;
            scores.push(mean);
        }
        if scores[0] < scores[1] {
            wins += 1;
        }
        detail.push_str(&format!(
            " seed {seed}: {:.4} vs {:.4};",
            scores[0], scores[1]
        ));
    }
    assert!(wins >= 2, "StarNet won only {wins}/3 seeds:{detail}");
    println!("PASS criterion 7: best-of-20 ADE, StarNet beats the interaction-blind baseline on {wins}/3 seeds ({detail})");
}

#[test]
fn criterion_8_full_scale_reproduction_reported_only() {
    // Reported, not asserted: needs the full ETH/UCY trajectory files
    // (not shipped here) and hours of CPU time. Reproduce with:
    //   starnet train --data data/ --held-out ZARA-1 --epochs 50 \
    //     --k 20 --lr 1e-4 --seed 7 --out zara1.ck
    //   starnet eval --data data/ --held-out ZARA-1 --ckpt zara1.ck \
    //     --k 20 --seed 7 --out report.json
    // Target: ADE within 2x of the reference 0.25 on ZARA-1.
    println!("PASS criterion 8: reported, not asserted — leave-one-out ZARA-1 workflow documented (see test source); datasets and hours-long CPU budget are out of scope here");
}

#[test]
fn criterion_9_determinism() {
    let mut rng = ChaCha20Rng::seed_from_u64(31);
    let windows: Vec<Window> = (0..4).map(|_| synthetic_window(3, 5, 4, &mut rng)).collect();
    let cfg = ModelConfig::tiny(8);
    let tc = TrainConfig {
        epochs: 3,
        k: 2,
        lr: 1e-3,
        seed: 12345,
        rotate_augment: true,
        grad_clip: None,
    };
    let (ck_a, _) = train(&windows, cfg, &tc, 5, 4, |_| {}).unwrap();
    let (ck_b, _) = train(&windows, cfg, &tc, 5, 4, |_| {}).unwrap();
    let text_a = checkpoint_to_string(&ck_a);
    let text_b = checkpoint_to_string(&ck_b);
    assert_eq!(text_a.as_bytes(), text_b.as_bytes(), "checkpoints differ");

    let rep_a = evaluate(&ck_a, &windows, 5, MetricMode::AllSteps, 9, "synth", 2).unwrap();
    let rep_b = evaluate(&ck_b, &windows, 5, MetricMode::AllSteps, 9, "synth", 1).unwrap();
    assert_eq!(rep_a.to_json().as_bytes(), rep_b.to_json().as_bytes());
    assert_eq!(rep_a.per_window_csv(), rep_b.per_window_csv());
    println!("PASS criterion 9: identical seeds give byte-identical checkpoints and metric reports (threaded eval included)");
}
