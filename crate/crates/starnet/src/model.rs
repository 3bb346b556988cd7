//! The StarNet architecture: a hub network producing one crowd-level
//! representation r per time step, and weight-shared per-pedestrian
//! host networks (encoder-decoder) consuming it. A plain LSTM
//! encoder-decoder without the hub serves as the baseline.
//!
//! All positions entering the model are centered coordinates; the
//! window centroid is added back when predictions are emitted.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::Window;
use crate::diffcore::lstm::uniform_init;
use crate::diffcore::{lstm_step, LstmParams, LstmVars, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Census tags used by the structural op count.
pub const TAG_HUB_EMBED: &str = "hub_embed";
pub const TAG_HOST_EMBED: &str = "host_embed";
pub const TAG_HUB_LSTM: &str = "hub_lstm_step";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    StarNet,
    Baseline,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::StarNet => "starnet",
            ModelKind::Baseline => "baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "starnet" => Ok(ModelKind::StarNet),
            "baseline" => Ok(ModelKind::Baseline),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Architectural widths. Defaults follow the reference configuration:
/// 64-wide embeddings, hub LSTM hidden 32, host LSTMs hidden 64,
/// 8-dimensional trajectory noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Width of the embeddings e, s, r and q.
    pub embed: usize,
    pub hub_hidden: usize,
    pub host_hidden: usize,
    /// Dimension of the per-trajectory noise z.
    pub noise: usize,
    pub kind: ModelKind,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed: 64,
            hub_hidden: 32,
            host_hidden: 64,
            noise: 8,
            kind: ModelKind::StarNet,
        }
    }
}

impl ModelConfig {
    /// Small widths for gradient-check and oracle tests.
    pub fn tiny(hidden: usize) -> Self {
        Self {
            embed: hidden,
            hub_hidden: hidden,
            host_hidden: hidden,
            noise: 2,
            kind: ModelKind::StarNet,
        }
    }

    pub fn encoder_input(&self) -> usize {
        match self.kind {
            ModelKind::StarNet => self.embed + 2,
            ModelKind::Baseline => 2,
        }
    }

    pub fn decoder_input(&self) -> usize {
        match self.kind {
            ModelKind::StarNet => self.embed + 2 + self.noise,
            ModelKind::Baseline => 2 + self.noise,
        }
    }
}

/// Hub network weights (W1, W2, the hub LSTM, W4).
#[derive(Debug, Clone, PartialEq)]
pub struct HubParams {
    /// [E x 2]
    pub w1: Tensor,
    /// [E x E]
    pub w2: Tensor,
    /// input E, hidden Hc
    pub lstm_c: LstmParams,
    /// [E x Hc]
    pub w4: Tensor,
}

/// Host network weights, shared by every pedestrian.
#[derive(Debug, Clone, PartialEq)]
pub struct HostParams {
    /// [E x 2]
    pub w5: Tensor,
    pub lstm_e: LstmParams,
    pub lstm_d: LstmParams,
    /// [2 x Hh]
    pub w8: Tensor,
}

/// Baseline encoder-decoder weights (no hub, no position embedding).
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineParams {
    pub lstm_e: LstmParams,
    pub lstm_d: LstmParams,
    pub w8: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ModelWeights {
    StarNet { hub: HubParams, host: HostParams },
    Baseline(BaselineParams),
}

/// All learnable weights plus their architectural configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl ParamSet {
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Self {
        let e = config.embed;
        let weights = match config.kind {
            ModelKind::StarNet => ModelWeights::StarNet {
                hub: HubParams {
                    w1: uniform_init(e, 2, rng),
                    w2: uniform_init(e, e, rng),
                    lstm_c: LstmParams::init(e, config.hub_hidden, rng),
                    w4: uniform_init(e, config.hub_hidden, rng),
                },
                host: HostParams {
                    w5: uniform_init(e, 2, rng),
                    lstm_e: LstmParams::init(config.encoder_input(), config.host_hidden, rng),
                    lstm_d: LstmParams::init(config.decoder_input(), config.host_hidden, rng),
                    w8: uniform_init(2, config.host_hidden, rng),
                },
            },
            ModelKind::Baseline => ModelWeights::Baseline(BaselineParams {
                lstm_e: LstmParams::init(config.encoder_input(), config.host_hidden, rng),
                lstm_d: LstmParams::init(config.decoder_input(), config.host_hidden, rng),
                w8: uniform_init(2, config.host_hidden, rng),
            }),
        };
        Self { config, weights }
    }

    /// Named tensors in a fixed order (checkpoint and optimizer order).
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        match &self.weights {
            ModelWeights::StarNet { hub, host } => {
                out.push(("hub.w1".into(), &hub.w1));
                out.push(("hub.w2".into(), &hub.w2));
                out.push(("hub.lstm.w_in".into(), &hub.lstm_c.input_weights));
                out.push(("hub.lstm.w_rec".into(), &hub.lstm_c.recurrent_weights));
                out.push(("hub.lstm.bias".into(), &hub.lstm_c.bias));
                out.push(("hub.w4".into(), &hub.w4));
                out.push(("host.w5".into(), &host.w5));
                out.push(("host.lstm_e.w_in".into(), &host.lstm_e.input_weights));
                out.push(("host.lstm_e.w_rec".into(), &host.lstm_e.recurrent_weights));
                out.push(("host.lstm_e.bias".into(), &host.lstm_e.bias));
                out.push(("host.lstm_d.w_in".into(), &host.lstm_d.input_weights));
                out.push(("host.lstm_d.w_rec".into(), &host.lstm_d.recurrent_weights));
                out.push(("host.lstm_d.bias".into(), &host.lstm_d.bias));
                out.push(("host.w8".into(), &host.w8));
            }
            ModelWeights::Baseline(b) => {
                out.push(("base.lstm_e.w_in".into(), &b.lstm_e.input_weights));
                out.push(("base.lstm_e.w_rec".into(), &b.lstm_e.recurrent_weights));
                out.push(("base.lstm_e.bias".into(), &b.lstm_e.bias));
                out.push(("base.lstm_d.w_in".into(), &b.lstm_d.input_weights));
                out.push(("base.lstm_d.w_rec".into(), &b.lstm_d.recurrent_weights));
                out.push(("base.lstm_d.bias".into(), &b.lstm_d.bias));
                out.push(("base.w8".into(), &b.w8));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match &mut self.weights {
            ModelWeights::StarNet { hub, host } => vec![
                ("hub.w1".into(), &mut hub.w1),
                ("hub.w2".into(), &mut hub.w2),
                ("hub.lstm.w_in".into(), &mut hub.lstm_c.input_weights),
                ("hub.lstm.w_rec".into(), &mut hub.lstm_c.recurrent_weights),
                ("hub.lstm.bias".into(), &mut hub.lstm_c.bias),
                ("hub.w4".into(), &mut hub.w4),
                ("host.w5".into(), &mut host.w5),
                ("host.lstm_e.w_in".into(), &mut host.lstm_e.input_weights),
                ("host.lstm_e.w_rec".into(), &mut host.lstm_e.recurrent_weights),
                ("host.lstm_e.bias".into(), &mut host.lstm_e.bias),
                ("host.lstm_d.w_in".into(), &mut host.lstm_d.input_weights),
                ("host.lstm_d.w_rec".into(), &mut host.lstm_d.recurrent_weights),
                ("host.lstm_d.bias".into(), &mut host.lstm_d.bias),
                ("host.w8".into(), &mut host.w8),
            ],
            ModelWeights::Baseline(b) => vec![
                ("base.lstm_e.w_in".into(), &mut b.lstm_e.input_weights),
                ("base.lstm_e.w_rec".into(), &mut b.lstm_e.recurrent_weights),
                ("base.lstm_e.bias".into(), &mut b.lstm_e.bias),
                ("base.lstm_d.w_in".into(), &mut b.lstm_d.input_weights),
                ("base.lstm_d.w_rec".into(), &mut b.lstm_d.recurrent_weights),
                ("base.lstm_d.bias".into(), &mut b.lstm_d.bias),
                ("base.w8".into(), &mut b.w8),
            ],
        }
    }

    /// Total scalar count across all weight tensors.
    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Model weights placed as leaves on a tape, transposed once for the
/// row-vector convention, plus the (name, leaf) pairs for gradients.
pub struct PlacedParams {
    pub leaves: Vec<(String, Var)>,
    kind: ModelKind,
    w1_t: Option<Var>,
    w2_t: Option<Var>,
    lstm_c: Option<LstmVars>,
    w4_t: Option<Var>,
    w5_t: Option<Var>,
    lstm_e: LstmVars,
    lstm_d: LstmVars,
    w8_t: Var,
}

impl PlacedParams {
    pub fn place(tape: &mut Tape, params: &ParamSet) -> Self {
        match &params.weights {
            ModelWeights::StarNet { hub, host } => {
                let w1 = tape.leaf(hub.w1.clone());
                let w2 = tape.leaf(hub.w2.clone());
                let lstm_c = LstmVars::place(tape, &hub.lstm_c);
                let w4 = tape.leaf(hub.w4.clone());
                let w5 = tape.leaf(host.w5.clone());
                let lstm_e = LstmVars::place(tape, &host.lstm_e);
                let lstm_d = LstmVars::place(tape, &host.lstm_d);
                let w8 = tape.leaf(host.w8.clone());
                let leaves = vec![
                    ("hub.w1".into(), w1),
                    ("hub.w2".into(), w2),
                    ("hub.lstm.w_in".into(), lstm_c.input_weights),
                    ("hub.lstm.w_rec".into(), lstm_c.recurrent_weights),
                    ("hub.lstm.bias".into(), lstm_c.bias),
                    ("hub.w4".into(), w4),
                    ("host.w5".into(), w5),
                    ("host.lstm_e.w_in".into(), lstm_e.input_weights),
                    ("host.lstm_e.w_rec".into(), lstm_e.recurrent_weights),
                    ("host.lstm_e.bias".into(), lstm_e.bias),
                    ("host.lstm_d.w_in".into(), lstm_d.input_weights),
                    ("host.lstm_d.w_rec".into(), lstm_d.recurrent_weights),
                    ("host.lstm_d.bias".into(), lstm_d.bias),
                    ("host.w8".into(), w8),
                ];
                let w1_t = tape.transpose(w1);
                let w2_t = tape.transpose(w2);
                let w4_t = tape.transpose(w4);
                let w5_t = tape.transpose(w5);
                let w8_t = tape.transpose(w8);
                Self {
                    leaves,
                    kind: ModelKind::StarNet,
                    w1_t: Some(w1_t),
                    w2_t: Some(w2_t),
                    lstm_c: Some(lstm_c),
                    w4_t: Some(w4_t),
                    w5_t: Some(w5_t),
                    lstm_e,
                    lstm_d,
                    w8_t,
                }
            }
            ModelWeights::Baseline(b) => {
                let lstm_e = LstmVars::place(tape, &b.lstm_e);
                let lstm_d = LstmVars::place(tape, &b.lstm_d);
                let w8 = tape.leaf(b.w8.clone());
                let leaves = vec![
                    ("base.lstm_e.w_in".into(), lstm_e.input_weights),
                    ("base.lstm_e.w_rec".into(), lstm_e.recurrent_weights),
                    ("base.lstm_e.bias".into(), lstm_e.bias),
                    ("base.lstm_d.w_in".into(), lstm_d.input_weights),
                    ("base.lstm_d.w_rec".into(), lstm_d.recurrent_weights),
                    ("base.lstm_d.bias".into(), lstm_d.bias),
                    ("base.w8".into(), w8),
                ];
                let w8_t = tape.transpose(w8);
                Self {
                    leaves,
                    kind: ModelKind::Baseline,
                    w1_t: None,
                    w2_t: None,
                    lstm_c: None,
                    w4_t: None,
                    w5_t: None,
                    lstm_e,
                    lstm_d,
                    w8_t,
                }
            }
        }
    }
}

// ── named operations ─────────────────────────────────────────────────

/// Linear embedding: x -> W x (no bias, no nonlinearity). Row-vector
/// form: returns x W^T.
pub fn embed(tape: &mut Tape, x: Var, w: Var) -> Result<Var> {
    let wt = tape.transpose(w);
    tape.matmul(x, wt)
}

/// Spatial crowd representation: per-pedestrian embedding of centered
/// positions, max-pooled over pedestrians.
pub fn hub_spatial(tape: &mut Tape, positions: Var, w1_t: Var) -> Result<Var> {
    if tape.value(positions).rows() == 0 {
        return Err(Error::EmptySet {
            context: "hub_spatial needs at least one pedestrian",
        });
    }
    let rows = tape.matmul(positions, w1_t)?;
    tape.tag(rows, TAG_HUB_EMBED);
    tape.colwise_max(rows)
}

/// One hub time step: e = W2 s, LSTM advance, r = W4 o.
#[allow(clippy::too_many_arguments)]
pub fn hub_step(
    tape: &mut Tape,
    s: Var,
    h: Var,
    c: Var,
    w2_t: Var,
    lstm_c: &LstmVars,
    w4_t: Var,
) -> Result<(Var, Var, Var)> {
    let e = tape.matmul(s, w2_t)?;
    let (h2, c2) = lstm_step(tape, lstm_c, e, h, c)?;
    tape.tag(h2, TAG_HUB_LSTM);
    let r = tape.matmul(h2, w4_t)?;
    Ok((r, h2, c2))
}

/// Integrated representation q = r (elementwise) W5 p, batched over
/// pedestrians.
pub fn host_integrate(tape: &mut Tape, r: Var, positions: Var, w5_t: Var) -> Result<Var> {
    let n = tape.value(positions).rows();
    let emb = tape.matmul(positions, w5_t)?;
    tape.tag(emb, TAG_HOST_EMBED);
    let r_rows = tape.tile_rows(r, n)?;
    tape.mul(r_rows, emb)
}

/// Sampled predictions from one window, in the centered frame.
#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// K tensors of shape [N x T_pred x 2].
    pub predictions: Vec<Tensor>,
    pub centroid: Tensor,
    /// Hub representation per observed step (empty for the baseline).
    pub r_series: Vec<Tensor>,
}

impl RolloutResult {
    /// Predictions shifted back into the original world frame.
    pub fn decentered(&self) -> Vec<Tensor> {
        let (cx, cy) = (self.centroid.data()[0], self.centroid.data()[1]);
        self.predictions
            .iter()
            .map(|p| {
                let mut out = p.clone();
                let total = out.len();
                for i in (0..total).step_by(2) {
                    out.data_mut()[i] += cx;
                    out.data_mut()[i + 1] += cy;
                }
                out
            })
            .collect()
    }
}

/// The differentiable rollout graph: one prediction Var [N x 2] per
/// sample per step, still attached to the tape.
pub struct RolloutGraph {
    pub preds: Vec<Vec<Var>>,
    pub r_obs: Vec<Var>,
    pub leaves: Vec<(String, Var)>,
}

/// Trajectory-level noise: one [N x Z] draw per sample k, fixed across
/// decode steps. Draw order is (k, pedestrian, dimension).
pub fn sample_noise(n: usize, z_dim: usize, k: usize, rng: &mut impl Rng) -> Vec<Tensor> {
    (0..k)
        .map(|_| {
            let data = (0..n * z_dim)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            Tensor::unchecked(vec![n, z_dim], data)
        })
        .collect()
}

/// Build the full forward graph for one centered window: observation
/// phase once, then K prediction branches with per-sample noise and a
/// per-sample fork of hub and host states.
pub fn build_rollout(
    tape: &mut Tape,
    params: &ParamSet,
    window: &Window,
    noise: &[Tensor],
) -> Result<RolloutGraph> {
    let n = window.n_peds();
    if n == 0 {
        return Err(Error::EmptySet {
            context: "rollout needs at least one pedestrian",
        });
    }
    if window.t_obs < 2 {
        return Err(Error::Config(
            "rollout needs t_obs >= 2 for decoder initialization".to_string(),
        ));
    }
    if noise.is_empty() {
        return Err(Error::Config("rollout needs K >= 1 noise samples".to_string()));
    }
    let placed = PlacedParams::place(tape, params);
    let cfg = &params.config;
    let hh = cfg.host_hidden;

    // observed positions as leaves, one [N x 2] matrix per step
    let obs: Vec<Var> = (0..window.t_obs)
        .map(|t| {
            let mut data = Vec::with_capacity(n * 2);
            for i in 0..n {
                let (x, y) = window.pos(i, t);
                data.push(x);
                data.push(y);
            }
            tape.leaf(Tensor::unchecked(vec![n, 2], data))
        })
        .collect();

    // hub observation phase
    let mut r_obs: Vec<Var> = Vec::new();
    let mut hub_h = tape.leaf(Tensor::zeros(vec![1, cfg.hub_hidden]));
    let mut hub_c = tape.leaf(Tensor::zeros(vec![1, cfg.hub_hidden]));
    if placed.kind == ModelKind::StarNet {
        for &p_t in &obs {
            let s = hub_spatial(tape, p_t, placed.w1_t.unwrap())?;
            let (r, h2, c2) = hub_step(
                tape,
                s,
                hub_h,
                hub_c,
                placed.w2_t.unwrap(),
                placed.lstm_c.as_ref().unwrap(),
                placed.w4_t.unwrap(),
            )?;
            hub_h = h2;
            hub_c = c2;
            r_obs.push(r);
        }
    }

    // host encoding, one batched LSTM step per observed step
    let mut enc_h = tape.leaf(Tensor::zeros(vec![n, hh]));
    let mut enc_c = tape.leaf(Tensor::zeros(vec![n, hh]));
    let zero_dp = tape.leaf(Tensor::zeros(vec![n, 2]));
    for t in 0..window.t_obs {
        let dp = if t == 0 {
            zero_dp
        } else {
            tape.sub(obs[t], obs[t - 1])?
        };
        let input = match placed.kind {
            ModelKind::StarNet => {
                let q = host_integrate(tape, r_obs[t], obs[t], placed.w5_t.unwrap())?;
                tape.concat_cols(&[q, dp])?
            }
            ModelKind::Baseline => dp,
        };
        let (h2, c2) = lstm_step(tape, &placed.lstm_e, input, enc_h, enc_c)?;
        enc_h = h2;
        enc_c = c2;
    }

    // decoder initialization: state from encoder, position from the
    // last observed step, displacement from the last observed motion
    let last = obs[window.t_obs - 1];
    let init_dp = tape.sub(obs[window.t_obs - 1], obs[window.t_obs - 2])?;

    let mut preds: Vec<Vec<Var>> = Vec::with_capacity(noise.len());
    for z_sample in noise {
        let z = tape.leaf(z_sample.clone());
        let mut dec_h = enc_h;
        let mut dec_c = enc_c;
        let mut hub_h_k = hub_h;
        let mut hub_c_k = hub_c;
        let mut p_hat = last;
        let mut dp_hat = init_dp;
        let mut steps = Vec::with_capacity(window.t_pred);
        for _ in 0..window.t_pred {
            let input = match placed.kind {
                ModelKind::StarNet => {
                    // hub consumes the most recent (predicted) positions
                    let s = hub_spatial(tape, p_hat, placed.w1_t.unwrap())?;
                    let (r, h2, c2) = hub_step(
                        tape,
                        s,
                        hub_h_k,
                        hub_c_k,
                        placed.w2_t.unwrap(),
                        placed.lstm_c.as_ref().unwrap(),
                        placed.w4_t.unwrap(),
                    )?;
                    hub_h_k = h2;
                    hub_c_k = c2;
                    let q = host_integrate(tape, r, p_hat, placed.w5_t.unwrap())?;
                    tape.concat_cols(&[q, dp_hat, z])?
                }
                ModelKind::Baseline => tape.concat_cols(&[dp_hat, z])?,
            };
            let (h2, c2) = lstm_step(tape, &placed.lstm_d, input, dec_h, dec_c)?;
            dec_h = h2;
            dec_c = c2;
            dp_hat = tape.matmul(dec_h, placed.w8_t)?;
            p_hat = tape.add(p_hat, dp_hat)?;
            steps.push(p_hat);
        }
        preds.push(steps);
    }

    Ok(RolloutGraph {
        preds,
        r_obs,
        leaves: placed.leaves,
    })
}

/// Forward-only rollout: K sampled future trajectories for a centered
/// window, deterministic given the seed.
pub fn rollout(params: &ParamSet, window: &Window, k: usize, seed: u64) -> Result<RolloutResult> {
    if k == 0 {
        return Err(Error::Config("K must be >= 1".to_string()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let noise = sample_noise(window.n_peds(), params.config.noise, k, &mut rng);
    let mut tape = Tape::new();
    let graph = build_rollout(&mut tape, params, window, &noise)?;
    Ok(collect_result(&tape, &graph, window))
}

/// Copy predictions and hub representations out of a built graph.
pub fn collect_result(tape: &Tape, graph: &RolloutGraph, window: &Window) -> RolloutResult {
    let n = window.n_peds();
    let predictions = graph
        .preds
        .iter()
        .map(|steps| {
            let mut data = vec![0.0; n * steps.len() * 2];
            for (t, &v) in steps.iter().enumerate() {
                let m = tape.value(v);
                for i in 0..n {
                    data[(i * steps.len() + t) * 2] = m.at(i, 0);
                    data[(i * steps.len() + t) * 2 + 1] = m.at(i, 1);
                }
            }
            Tensor::unchecked(vec![n, steps.len(), 2], data)
        })
        .collect();
    RolloutResult {
        predictions,
        centroid: window.centroid.clone(),
        r_series: graph.r_obs.iter().map(|&r| tape.value(r).clone()).collect(),
    }
}
