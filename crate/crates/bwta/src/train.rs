//! Smooth multi-stage quantization training on the toy sequence task.
//!
//! The run walks a stage schedule from a wide levelwise grid down to pure
//! ternary. At each transition the activation scales are re-initialized by
//! the configured strategy — the projection rule (`ours`) rescales each
//! scale so the expected dequantized magnitude of a calibration batch is
//! preserved across the grid change — and the optimizer moments are reset,
//! since the loss surface has just changed under the optimizer's feet.
//!
//! Everything is single-threaded and seeded: two runs with the same config
//! produce byte-identical metrics.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::block::Tap;
use crate::error::{Error, Result};
use crate::model::{softmax_cross_entropy, ModelConfig, ModelGrads, ToyModel};
use crate::quant::{quantize, QuantMode, QuantState, SCALE_FLOOR};
use crate::schedule::{build_bitwise_schedule, build_schedule, Schedule, ScheduleKind};
use crate::tensor::{DenseMatrix, IntMatrix};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// How activation scales are re-initialized at a stage transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReinitStrategy {
    /// Projection: scale by `sum|q_old| / sum|q_new|` on a calibration batch,
    /// preserving expected dequantized magnitude across the grid change.
    Ours,
    /// Restart from the data statistic `2 * mean|A|`.
    Mean,
    /// Keep the learned scale unchanged.
    None,
    /// Ablation alias: keep scales and change only the grid.
    SearchOff,
}

impl ReinitStrategy {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ours" => Some(ReinitStrategy::Ours),
            "mean" => Some(ReinitStrategy::Mean),
            "none" => Some(ReinitStrategy::None),
            "search-off" => Some(ReinitStrategy::SearchOff),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ReinitStrategy::Ours => "ours",
            ReinitStrategy::Mean => "mean",
            ReinitStrategy::None => "none",
            ReinitStrategy::SearchOff => "search-off",
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub l0: u32,
    pub stride: u32,
    pub total_epochs: usize,
    pub schedule: ScheduleKind,
    pub strategy: ReinitStrategy,
    pub lr_scale: f32,
    pub lr_weight: f32,
    pub warmup_epochs: usize,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub seed: u64,
    pub early_stop: bool,
    pub margin: f32,
    pub t_len: usize,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            l0: 4,
            stride: 1,
            total_epochs: 12,
            schedule: ScheduleKind::Levelwise,
            strategy: ReinitStrategy::Ours,
            lr_scale: 1e-3,
            lr_weight: 2e-5,
            warmup_epochs: 1,
            weight_decay: 0.01,
            batch_size: 16,
            train_samples: 1600,
            eval_samples: 400,
            seed: 1,
            early_stop: false,
            margin: 1.0,
            t_len: 8,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0
            || self.total_epochs == 0
            || self.train_samples == 0
            || self.eval_samples == 0
            || self.t_len == 0
        {
            return Err(Error::Invalid {
                op: "TrainConfig::validate",
                detail: "batch size, epochs, sample counts and t_len must be positive"
                    .to_string(),
            });
        }
        if !(self.margin > 0.0) {
            return Err(Error::Invalid {
                op: "TrainConfig::validate",
                detail: format!("margin must be positive, got {}", self.margin),
            });
        }
        if self.warmup_epochs >= self.total_epochs {
            return Err(Error::Invalid {
                op: "TrainConfig::validate",
                detail: format!(
                    "warmup ({}) must be shorter than the run ({})",
                    self.warmup_epochs, self.total_epochs
                ),
            });
        }
        Ok(())
    }

    /// Parse `key=value` config text (the `train-demo` file format).
    /// `#` comments and blank lines are ignored; unknown keys are errors
    /// with their line number.
    pub fn from_kv(src: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let bad = |line: usize, key: &str, raw: &str| Error::Config {
            line,
            detail: format!("bad value for {key}: {raw}"),
        };
        for (line, key, raw) in crate::io::parse_kv_lines(src)? {
            macro_rules! num {
                ($ty:ty) => {
                    raw.parse::<$ty>().map_err(|_| bad(line, &key, &raw))?
                };
            }
            match key.as_str() {
                "L0" | "l0" => cfg.l0 = num!(u32),
                "levels0" => {
                    // Grid-size convention: a (2L+1)-level grid.
                    let levels: u32 = num!(u32);
                    if levels < 3 || levels % 2 == 0 {
                        return Err(Error::Config {
                            line,
                            detail: format!(
                                "levels0 must be an odd count >= 3, got {levels}"
                            ),
                        });
                    }
                    cfg.l0 = levels / 2;
                }
                "stride" => cfg.stride = num!(u32),
                "total_epochs" => cfg.total_epochs = num!(usize),
                "schedule" => {
                    cfg.schedule = match raw.as_str() {
                        "levelwise" => ScheduleKind::Levelwise,
                        "bitwise" => ScheduleKind::Bitwise,
                        _ => return Err(bad(line, &key, &raw)),
                    }
                }
                "strategy" => {
                    cfg.strategy =
                        ReinitStrategy::parse(&raw).ok_or_else(|| bad(line, &key, &raw))?
                }
                "lr_scale" => cfg.lr_scale = num!(f32),
                "lr_weight" => cfg.lr_weight = num!(f32),
                "warmup_epochs" => cfg.warmup_epochs = num!(usize),
                "weight_decay" => cfg.weight_decay = num!(f32),
                "batch_size" => cfg.batch_size = num!(usize),
                "train_samples" => cfg.train_samples = num!(usize),
                "eval_samples" => cfg.eval_samples = num!(usize),
                "seed" => cfg.seed = num!(u64),
                "early_stop" => {
                    cfg.early_stop = match raw.as_str() {
                        "true" | "on" | "1" => true,
                        "false" | "off" | "0" => false,
                        _ => return Err(bad(line, &key, &raw)),
                    }
                }
                "margin" => cfg.margin = num!(f32),
                "t_len" => cfg.t_len = num!(usize),
                "d_in" => cfg.model.d_in = num!(usize),
                "d_model" => cfg.model.d_model = num!(usize),
                "heads" => cfg.model.heads = num!(usize),
                "d_ff" => cfg.model.d_ff = num!(usize),
                "n_blocks" => cfg.model.n_blocks = num!(usize),
                other => {
                    return Err(Error::Config {
                        line,
                        detail: format!("unknown key: {other}"),
                    })
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build_stage_schedule(&self) -> Result<Schedule> {
        match self.schedule {
            ScheduleKind::Levelwise => build_schedule(self.l0, self.stride, self.total_epochs),
            ScheduleKind::Bitwise => build_bitwise_schedule(self.l0, self.total_epochs),
        }
    }
}

// ---------------------------------------------------------------------------
// Synthetic task
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seqs: Vec<DenseMatrix>,
    pub labels: Vec<usize>,
}

/// Binary sequence classification: every token is unit Gaussian noise plus
/// `+-margin` along a fixed unit direction, sign given by the label. The
/// direction depends only on `task_seed`, so train and eval splits drawn
/// with different `sample_seed`s share one task.
pub fn make_dataset(
    t_len: usize,
    d_in: usize,
    n: usize,
    margin: f32,
    task_seed: u64,
    sample_seed: u64,
) -> Result<Dataset> {
    if t_len == 0 || d_in == 0 || n == 0 {
        return Err(Error::ZeroDim { op: "make_dataset" });
    }
    let normal = Normal::new(0.0f32, 1.0).expect("valid std");
    let mut task_rng = ChaCha8Rng::seed_from_u64(task_seed ^ 0xd1c7);
    let mut dir: Vec<f32> = (0..d_in).map(|_| normal.sample(&mut task_rng)).collect();
    let norm = dir.iter().map(|&v| (v * v) as f64).sum::<f64>().sqrt() as f32;
    if norm == 0.0 {
        return Err(Error::EmptyInput {
            op: "make_dataset",
            detail: "degenerate task direction",
        });
    }
    for v in &mut dir {
        *v /= norm;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
    let mut seqs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.gen_bool(0.5) as usize;
        let sign = if label == 1 { 1.0f32 } else { -1.0 };
        let mut data = Vec::with_capacity(t_len * d_in);
        for _ in 0..t_len {
            for &d in &dir {
                data.push(normal.sample(&mut rng) + sign * margin * d);
            }
        }
        seqs.push(DenseMatrix::new(t_len, d_in, data)?);
        labels.push(label);
    }
    Ok(Dataset { seqs, labels })
}

// ---------------------------------------------------------------------------
// Stage transitions
// ---------------------------------------------------------------------------

/// Projection factor `sum|A_prev| / sum|A_cur|` over quantized integers of
/// the same calibration tensor under the old and new grids. Exact in i64.
pub fn projection_factor(prev: &IntMatrix, cur: &IntMatrix) -> Result<f32> {
    if prev.rows() != cur.rows() || prev.cols() != cur.cols() {
        return Err(Error::ShapeMismatch {
            op: "projection_factor",
            left: (prev.rows(), prev.cols()),
            right: (cur.rows(), cur.cols()),
        });
    }
    let num: i64 = prev.as_slice().iter().map(|&v| (v as i64).abs()).sum();
    let den: i64 = cur.as_slice().iter().map(|&v| (v as i64).abs()).sum();
    if den == 0 {
        return Err(Error::Invalid {
            op: "projection_factor",
            detail: "calibration batch quantizes to all zeros on the new grid".to_string(),
        });
    }
    Ok((num as f64 / den as f64) as f32)
}

/// Fraction of entries that quantize to zero under `state`.
pub fn zero_fraction(a: &DenseMatrix, state: &QuantState) -> Result<f32> {
    let q = quantize(a, state)?;
    let zeros = q.as_slice().iter().filter(|&&v| v == 0).count();
    Ok(zeros as f32 / q.len() as f32)
}

/// Move the model to stage level `new_l`, re-initializing every
/// ternary-family scale per `strategy` using the calibration batch.
/// Returns `(site, old_scale, new_scale)` for logging. Bool sites never
/// stage. When the projection is undefined for a site (denominator zero),
/// that site keeps its old scale.
pub fn stage_transition(
    model: &mut ToyModel,
    calib: &[DenseMatrix],
    new_l: u32,
    strategy: ReinitStrategy,
) -> Result<Vec<(String, f32, f32)>> {
    if calib.is_empty() {
        return Err(Error::EmptyInput {
            op: "stage_transition",
            detail: "calibration batch is empty",
        });
    }
    // Capture every quantizer input under the *current* scales and modes.
    let mut taps = Tap::new();
    for seq in calib {
        model.forward_train(seq, Some(&mut taps))?;
    }
    let states: HashMap<String, QuantState> = model
        .quant_states()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect();

    let mut log = Vec::new();
    let mut new_scales: HashMap<String, f32> = HashMap::new();
    for (site, st) in &states {
        if matches!(st.mode, QuantMode::Bool) {
            continue;
        }
        let old = st.scale;
        let new = match strategy {
            ReinitStrategy::None | ReinitStrategy::SearchOff => old,
            ReinitStrategy::Mean => {
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for (name, t) in &taps {
                    if name == site {
                        sum += t.as_slice().iter().map(|&v| v.abs() as f64).sum::<f64>();
                        count += t.len();
                    }
                }
                // Same range-sizing convention as calibration: the new
                // grid's per-step scale is the range statistic over the new
                // half level count.
                2.0 * (sum / count.max(1) as f64) as f32 / new_l as f32
            }
            ReinitStrategy::Ours => {
                let mut cur_state = st.clone();
                cur_state.mode = QuantMode::Levelwise(new_l);
                let mut num = 0i64;
                for (name, t) in &taps {
                    if name == site {
                        let qp = quantize(t, st)?;
                        num += qp.as_slice().iter().map(|&v| (v as i64).abs()).sum::<i64>();
                    }
                }
                if num == 0 {
                    old
                } else {
                    // Solve s' * sum|q_new(s')| = s * sum|q_old| by iterating
                    // the projection ratio; the first iterate is the plain
                    // ratio update, and a few more remove the re-quantization
                    // bias that tight grids suffer at clip-heavy sites. The
                    // product is a step function of s', so track the best
                    // iterate rather than assuming convergence.
                    let target = old as f64 * num as f64;
                    let mut s_cur = old;
                    let mut best = (f64::INFINITY, old);
                    for _ in 0..6 {
                        cur_state.set_scale(s_cur);
                        let mut den = 0i64;
                        for (name, t) in &taps {
                            if name == site {
                                let qc = quantize(t, &cur_state)?;
                                den += qc
                                    .as_slice()
                                    .iter()
                                    .map(|&v| (v as i64).abs())
                                    .sum::<i64>();
                            }
                        }
                        if den == 0 {
                            break;
                        }
                        let err = (s_cur as f64 * den as f64 - target).abs();
                        if err < best.0 {
                            best = (err, s_cur);
                        }
                        let next = (target / den as f64) as f32;
                        if (next - s_cur).abs() <= 1e-6 * s_cur.abs() {
                            break;
                        }
                        s_cur = next;
                    }
                    best.1
                }
            }
        };
        new_scales.insert(site.clone(), new);
        log.push((site.clone(), old, new));
    }
    for (name, st) in model.quant_states_mut() {
        if let Some(&s) = new_scales.get(&name) {
            st.set_scale(s);
        }
    }
    model.set_level(new_l)?;
    log.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(log)
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

#[derive(Debug, Clone)]
struct AdamSlot {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl AdamSlot {
    fn new(n: usize) -> Self {
        AdamSlot {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    fn zero(&mut self) {
        self.m.iter_mut().for_each(|v| *v = 0.0);
        self.v.iter_mut().for_each(|v| *v = 0.0);
    }

    /// AdamW: adaptive step plus decoupled weight decay.
    fn step(&mut self, t: u64, param: &mut [f32], grad: &[f32], lr: f32, wd: f32) {
        debug_assert_eq!(param.len(), grad.len());
        debug_assert_eq!(param.len(), self.m.len());
        let bc1 = 1.0 - BETA1.powi(t as i32);
        let bc2 = 1.0 - BETA2.powi(t as i32);
        for i in 0..param.len() {
            let g = grad[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            param[i] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + wd * param[i]);
        }
    }
}

/// Per-tensor AdamW slots in a fixed walking order over the model. Moments
/// reset at every stage transition.
#[derive(Debug, Clone)]
pub struct Optimizer {
    weights: Vec<AdamSlot>,
    scales: Vec<AdamSlot>,
    t: u64,
}

impl Optimizer {
    pub fn for_model(model: &ToyModel) -> Optimizer {
        let mut weights = Vec::new();
        weights.push(AdamSlot::new(model.embed.w.len()));
        weights.push(AdamSlot::new(model.embed.b.len()));
        weights.push(AdamSlot::new(model.head.w.len()));
        weights.push(AdamSlot::new(model.head.b.len()));
        for b in &model.blocks {
            for lin in [&b.q_proj, &b.k_proj, &b.v_proj, &b.o_proj, &b.ffn1, &b.ffn2] {
                weights.push(AdamSlot::new(lin.out_features() * lin.in_features()));
            }
            weights.push(AdamSlot::new(b.ln1.gain.len()));
            weights.push(AdamSlot::new(b.ln1.bias.len()));
            weights.push(AdamSlot::new(b.ln2.gain.len()));
            weights.push(AdamSlot::new(b.ln2.bias.len()));
        }
        let scales = model
            .quant_states()
            .iter()
            .map(|_| AdamSlot::new(1))
            .collect();
        Optimizer { weights, scales, t: 0 }
    }

    /// Drop all moment state (used at stage transitions: the loss surface
    /// just changed, stale momentum points the wrong way).
    pub fn reset(&mut self) {
        self.weights.iter_mut().for_each(AdamSlot::zero);
        self.scales.iter_mut().for_each(AdamSlot::zero);
        self.t = 0;
    }
}

/// One AdamW step over every parameter group. Weight decay applies to
/// weight matrices only — biases, LayerNorm parameters and quantizer scales
/// are exempt. Latent sign weights update like ordinary weights (naive STE).
pub fn apply_gradients(
    model: &mut ToyModel,
    grads: &ModelGrads,
    opt: &mut Optimizer,
    lr_weight: f32,
    lr_scale: f32,
    weight_decay: f32,
) -> Result<()> {
    opt.t += 1;
    let t = opt.t;
    let mut wi = 0usize;
    fn step(t: u64, slot: &mut AdamSlot, p: &mut [f32], g: &[f32], lr: f32, wd: f32) {
        slot.step(t, p, g, lr, wd);
    }
    step(t, &mut opt.weights[wi], model.embed.w.as_mut_slice(), grads.embed.w.as_slice(), lr_weight, weight_decay);
    wi += 1;
    step(t, &mut opt.weights[wi], &mut model.embed.b, &grads.embed.b, lr_weight, 0.0);
    wi += 1;
    step(t, &mut opt.weights[wi], model.head.w.as_mut_slice(), grads.head.w.as_slice(), lr_weight, weight_decay);
    wi += 1;
    step(t, &mut opt.weights[wi], &mut model.head.b, &grads.head.b, lr_weight, 0.0);
    wi += 1;
    let mut si = 0usize;
    for (bi, block) in model.blocks.iter_mut().enumerate() {
        let g = &grads.blocks[bi];
        let linears = [
            (&mut block.q_proj, &g.q),
            (&mut block.k_proj, &g.k),
            (&mut block.v_proj, &g.v),
            (&mut block.o_proj, &g.o),
            (&mut block.ffn1, &g.ffn1),
            (&mut block.ffn2, &g.ffn2),
        ];
        for (lin, lg) in linears {
            let latent = lin.latent_mut().ok_or(Error::Invalid {
                op: "apply_gradients",
                detail: "cannot train a checkpoint-loaded layer".to_string(),
            })?;
            step(t, &mut opt.weights[wi], latent.as_mut_slice(), lg.w.as_slice(), lr_weight, weight_decay);
            wi += 1;
        }
        step(t, &mut opt.weights[wi], &mut block.ln1.gain, &g.ln1.gain, lr_weight, 0.0);
        wi += 1;
        step(t, &mut opt.weights[wi], &mut block.ln1.bias, &g.ln1.bias, lr_weight, 0.0);
        wi += 1;
        step(t, &mut opt.weights[wi], &mut block.ln2.gain, &g.ln2.gain, lr_weight, 0.0);
        wi += 1;
        step(t, &mut opt.weights[wi], &mut block.ln2.bias, &g.ln2.bias, lr_weight, 0.0);
        wi += 1;
        let sites = [
            (&mut block.q_proj.act, g.q.s),
            (&mut block.k_proj.act, g.k.s),
            (&mut block.v_proj.act, g.v.s),
            (&mut block.attn.s_q, g.s_q),
            (&mut block.attn.s_k, g.s_k),
            (&mut block.attn.s_att, g.s_att),
            (&mut block.attn.s_v, g.s_v),
            (&mut block.o_proj.act, g.o.s),
            (&mut block.ffn1.act, g.ffn1.s),
            (&mut block.ffn2.act, g.ffn2.s),
        ];
        for (st, gs) in sites {
            let mut value = [st.scale];
            step(t, &mut opt.scales[si], &mut value, &[gs], lr_scale, 0.0);
            st.set_scale(value[0]);
            si += 1;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage_l: u32,
    pub train_loss: f32,
    pub eval_acc: f32,
    pub zero_frac: f32,
    pub scales: Vec<f32>,
}

/// Eval loss measured on the held-out set immediately before and after one
/// stage transition, with no training steps in between — the pure cost of
/// the grid change under the chosen scale-reinit strategy.
#[derive(Debug, Clone)]
pub struct SpikeRecord {
    /// Number of epochs completed when the transition happened.
    pub epoch: usize,
    pub from_l: u32,
    pub to_l: u32,
    pub loss_before: f32,
    pub loss_after: f32,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub scale_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    /// Indices into `epochs` of the first epoch after each transition.
    pub transitions: Vec<usize>,
    /// Before/after eval losses bracketing each transition.
    pub spikes: Vec<SpikeRecord>,
}

impl TrainState {
    /// Loss jump caused by each stage transition alone (after minus before,
    /// zero training steps in between).
    pub fn transition_spikes(&self) -> Vec<f32> {
        self.spikes
            .iter()
            .map(|s| s.loss_after - s.loss_before)
            .collect()
    }

    pub fn mean_spike(&self) -> f32 {
        let spikes = self.transition_spikes();
        if spikes.is_empty() {
            0.0
        } else {
            spikes.iter().sum::<f32>() / spikes.len() as f32
        }
    }

    /// Per-epoch metrics as CSV, one scale column per site.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,stage_l,train_loss,eval_acc,zero_frac");
        for name in &self.scale_names {
            out.push_str(&format!(",s_{name}"));
        }
        out.push('\n');
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{},{:.6},{:.4},{:.4}",
                r.epoch, r.stage_l, r.train_loss, r.eval_acc, r.zero_frac
            ));
            for s in &r.scales {
                out.push_str(&format!(",{s:.6}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub model: ToyModel,
    pub state: TrainState,
    pub schedule: Schedule,
    pub final_loss: f32,
    pub final_acc: f32,
}

/// Cosine learning-rate factor with linear warmup, over global steps.
fn lr_factor(step: usize, total_steps: usize, warmup_steps: usize) -> f32 {
    if warmup_steps > 0 && step < warmup_steps {
        return (step + 1) as f32 / warmup_steps as f32;
    }
    let span = (total_steps.saturating_sub(warmup_steps)).max(1);
    let pos = (step - warmup_steps) as f32 / span as f32;
    0.5 * (1.0 + (std::f32::consts::PI * pos.min(1.0)).cos())
}

/// Mean zero-fraction over all ternary-family sites on a diagnostic batch.
fn sparsity_diagnostic(model: &ToyModel, seqs: &[DenseMatrix]) -> Result<f32> {
    let states: HashMap<String, QuantState> = model
        .quant_states()
        .into_iter()
        .map(|(n, s)| (n, s.clone()))
        .collect();
    let mut zeros = 0usize;
    let mut total = 0usize;
    for seq in seqs {
        let mut tap = Tap::new();
        model.forward_train(seq, Some(&mut tap))?;
        for (name, tensor) in &tap {
            let st = &states[name];
            if matches!(st.mode, QuantMode::Bool) {
                continue;
            }
            let q = quantize(tensor, st)?;
            zeros += q.as_slice().iter().filter(|&&v| v == 0).count();
            total += q.len();
        }
    }
    Ok(zeros as f32 / total.max(1) as f32)
}

/// Run the full smooth multi-stage training loop.
pub fn train(cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    let schedule = cfg.build_stage_schedule()?;
    let mut model = ToyModel::new(
        cfg.model,
        QuantMode::Levelwise(schedule.stages[0].l),
        cfg.seed,
    )?;
    let train_set = make_dataset(
        cfg.t_len,
        cfg.model.d_in,
        cfg.train_samples,
        cfg.margin,
        cfg.seed,
        cfg.seed.wrapping_add(11),
    )?;
    let eval_set = make_dataset(
        cfg.t_len,
        cfg.model.d_in,
        cfg.eval_samples,
        cfg.margin,
        cfg.seed,
        cfg.seed.wrapping_add(12),
    )?;
    let calib: Vec<DenseMatrix> = train_set.seqs[..train_set.seqs.len().min(32)].to_vec();
    let diag: Vec<DenseMatrix> = calib[..calib.len().min(8)].to_vec();
    model.calibrate(&calib)?;

    let mut opt = Optimizer::for_model(&model);
    let steps_per_epoch = cfg.train_samples.div_ceil(cfg.batch_size);
    let total_steps = cfg.total_epochs * steps_per_epoch;
    let warmup_steps = cfg.warmup_epochs * steps_per_epoch;
    let mut state = TrainState {
        scale_names: model.site_names(),
        epochs: Vec::new(),
        transitions: Vec::new(),
        spikes: Vec::new(),
    };
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5e17);
    let mut global_step = 0usize;
    let mut epoch_no = 0usize;

    for (si, stage) in schedule.stages.iter().enumerate() {
        if si > 0 {
            let (loss_before, _) = model.evaluate(&eval_set.seqs, &eval_set.labels)?;
            stage_transition(&mut model, &calib, stage.l, cfg.strategy)?;
            let (loss_after, _) = model.evaluate(&eval_set.seqs, &eval_set.labels)?;
            opt.reset();
            state.transitions.push(state.epochs.len());
            state.spikes.push(SpikeRecord {
                epoch: state.epochs.len(),
                from_l: schedule.stages[si - 1].l,
                to_l: stage.l,
                loss_before,
                loss_after,
            });
        }
        let mut best_stage_loss = f32::INFINITY;
        let mut stale_epochs = 0usize;
        for _ in 0..stage.epochs {
            let mut order: Vec<usize> = (0..train_set.seqs.len()).collect();
            order.shuffle(&mut shuffle_rng);
            let mut loss_sum = 0.0f64;
            for batch in order.chunks(cfg.batch_size) {
                let mut grads = model.zero_grads()?;
                let inv = 1.0 / batch.len() as f32;
                for &i in batch {
                    let (logits, cache) = model.forward_train(&train_set.seqs[i], None)?;
                    let (loss, mut d_logits) =
                        softmax_cross_entropy(&logits, train_set.labels[i])?;
                    if !loss.is_finite() {
                        return Err(Error::Invalid {
                            op: "train",
                            detail: format!(
                                "diverged: non-finite loss at epoch {epoch_no} (stage L={})",
                                stage.l
                            ),
                        });
                    }
                    loss_sum += loss as f64;
                    for v in d_logits.as_mut_slice() {
                        *v *= inv;
                    }
                    model.backward(&cache, &d_logits, &mut grads)?;
                }
                let f = lr_factor(global_step, total_steps, warmup_steps);
                apply_gradients(
                    &mut model,
                    &grads,
                    &mut opt,
                    cfg.lr_weight * f,
                    cfg.lr_scale * f,
                    cfg.weight_decay,
                )?;
                model.refresh_weights()?;
                global_step += 1;
            }
            let train_loss = (loss_sum / train_set.seqs.len() as f64) as f32;
            let (_, eval_acc) = model.evaluate(&eval_set.seqs, &eval_set.labels)?;
            let zero_frac = sparsity_diagnostic(&model, &diag)?;
            state.epochs.push(EpochRecord {
                epoch: epoch_no,
                stage_l: stage.l,
                train_loss,
                eval_acc,
                zero_frac,
                scales: model.scale_snapshot().into_iter().map(|(_, s)| s).collect(),
            });
            epoch_no += 1;
            // Optional plateau skip for non-final stages.
            if cfg.early_stop && si + 1 < schedule.stages.len() {
                if train_loss < best_stage_loss * 0.995 {
                    best_stage_loss = train_loss;
                    stale_epochs = 0;
                } else {
                    stale_epochs += 1;
                    if stale_epochs >= 2 {
                        break;
                    }
                }
            } else {
                best_stage_loss = best_stage_loss.min(train_loss);
            }
        }
    }
    let last = state.epochs.last().expect("at least one epoch");
    let (final_loss, final_acc) = (last.train_loss, last.eval_acc);
    Ok(TrainResult {
        model,
        state,
        schedule,
        final_loss,
        final_acc,
    })
}

// ---------------------------------------------------------------------------
// Convergence report
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaleTag {
    Converged,
    /// Deltas keep one sign and do not decay: the scale is running away.
    Diverging,
    /// Deltas flip sign at least half the time: the scale is bouncing.
    Oscillating,
    /// Deltas keep one sign but decay hard: movement from stale momentum
    /// after the gradient went quiet.
    VanishedGradient,
}

impl ScaleTag {
    pub fn name(&self) -> &'static str {
        match self {
            ScaleTag::Converged => "converged",
            ScaleTag::Diverging => "diverging",
            ScaleTag::Oscillating => "oscillating",
            ScaleTag::VanishedGradient => "vanished-gradient",
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConvergenceRow {
    pub name: String,
    pub tag: ScaleTag,
    pub max_delta: f32,
    pub threshold: f32,
}

#[derive(Debug, Clone)]
pub struct ConvergenceReport {
    pub rows: Vec<ConvergenceRow>,
    pub window: usize,
    pub non_converged_fraction: f32,
}

/// Classify each learned scale by its trajectory over the trailing window
/// (`window_frac` of all epochs, at least two): converged when every step is
/// within `tol * |s_final|`, otherwise tagged by the step pattern.
pub fn convergence_report(
    state: &TrainState,
    window_frac: f32,
    tol: f32,
) -> Result<ConvergenceReport> {
    if state.epochs.len() < 2 {
        return Err(Error::Invalid {
            op: "convergence_report",
            detail: "need at least two epochs to assess convergence".to_string(),
        });
    }
    if !(0.0 < window_frac && window_frac <= 1.0) || !(tol > 0.0) {
        return Err(Error::Invalid {
            op: "convergence_report",
            detail: format!("bad window_frac {window_frac} or tol {tol}"),
        });
    }
    let n = state.epochs.len();
    let window = ((window_frac * n as f32).ceil() as usize).clamp(2, n);
    let mut rows = Vec::with_capacity(state.scale_names.len());
    let mut non_converged = 0usize;
    for (i, name) in state.scale_names.iter().enumerate() {
        let series: Vec<f32> = state.epochs[n - window..]
            .iter()
            .map(|r| r.scales[i])
            .collect();
        let deltas: Vec<f32> = series.windows(2).map(|w| w[1] - w[0]).collect();
        let s_final = *series.last().expect("window >= 2");
        let threshold = tol * s_final.abs().max(SCALE_FLOOR);
        let max_delta = deltas.iter().fold(0.0f32, |a, &d| a.max(d.abs()));
        let tag = if max_delta <= threshold {
            ScaleTag::Converged
        } else {
            let nonzero: Vec<f32> = deltas.iter().copied().filter(|&d| d != 0.0).collect();
            let pairs = nonzero.len().saturating_sub(1);
            let flips = nonzero
                .windows(2)
                .filter(|w| (w[0] > 0.0) != (w[1] > 0.0))
                .count();
            if pairs > 0 && 2 * flips >= pairs {
                ScaleTag::Oscillating
            } else {
                let first = nonzero.first().copied().unwrap_or(0.0).abs();
                let last = nonzero.last().copied().unwrap_or(0.0).abs();
                if first > 0.0 && last < 0.25 * first {
                    ScaleTag::VanishedGradient
                } else {
                    ScaleTag::Diverging
                }
            }
        };
        if tag != ScaleTag::Converged {
            non_converged += 1;
        }
        rows.push(ConvergenceRow {
            name: name.clone(),
            tag,
            max_delta,
            threshold,
        });
    }
    let non_converged_fraction = non_converged as f32 / rows.len().max(1) as f32;
    Ok(ConvergenceReport {
        rows,
        window,
        non_converged_fraction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::QuantMode;

    #[test]
    fn config_parses_and_rejects() {
        let cfg = TrainConfig::from_kv(
            "# demo\nL0=4\nstride=1\ntotal_epochs=20\nlr_scale=0.005\nstrategy=ours\nschedule=levelwise\nseed=7\n",
        )
        .unwrap();
        assert_eq!(cfg.l0, 4);
        assert_eq!(cfg.total_epochs, 20);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.strategy, ReinitStrategy::Ours);

        // levels0 is the (2L+1)-grid convention.
        let cfg = TrainConfig::from_kv("levels0=9\n").unwrap();
        assert_eq!(cfg.l0, 4);
        assert!(matches!(
            TrainConfig::from_kv("levels0=8\n"),
            Err(Error::Config { line: 1, .. })
        ));

        match TrainConfig::from_kv("L0=4\nnot_a_key=3\n") {
            Err(Error::Config { line, detail }) => {
                assert_eq!(line, 2);
                assert!(detail.contains("not_a_key"));
            }
            other => panic!("expected config error, got {other:?}"),
        }
        assert!(matches!(
            TrainConfig::from_kv("total_epochs=many\n"),
            Err(Error::Config { line: 1, .. })
        ));
        assert!(matches!(
            TrainConfig::from_kv("strategy=upward\n"),
            Err(Error::Config { line: 1, .. })
        ));
    }

    #[test]
    fn dataset_is_seeded_and_separable() {
        let a = make_dataset(8, 16, 64, 1.0, 5, 6).unwrap();
        let b = make_dataset(8, 16, 64, 1.0, 5, 6).unwrap();
        assert_eq!(a.seqs, b.seqs);
        assert_eq!(a.labels, b.labels);
        // Same task, different samples: the split differs but stays solvable
        // by the pooled projection onto the task direction.
        let c = make_dataset(8, 16, 64, 1.0, 5, 7).unwrap();
        assert_ne!(a.seqs, c.seqs);
        assert!(a.labels.iter().any(|&l| l == 0) && a.labels.iter().any(|&l| l == 1));
    }

    #[test]
    fn projection_factor_is_exact_on_identity_and_hand_case() {
        let a = IntMatrix::new(1, 4, vec![2, -1, 0, 3]).unwrap();
        assert_eq!(projection_factor(&a, &a).unwrap(), 1.0);
        let b = IntMatrix::new(1, 4, vec![1, -1, 0, 1]).unwrap();
        assert_eq!(projection_factor(&a, &b).unwrap(), 2.0);
        let z = IntMatrix::new(1, 4, vec![0, 0, 0, 0]).unwrap();
        assert!(projection_factor(&a, &z).is_err());
        assert_eq!(projection_factor(&z, &b).unwrap(), 0.0);
    }

    #[test]
    fn zero_fraction_counts_the_dead_zone() {
        let st = QuantState::new(QuantMode::Ternary, 1.0).unwrap();
        let a = DenseMatrix::from_rows(&[vec![0.2, -0.3, 0.7, -0.9]]).unwrap();
        assert_eq!(zero_fraction(&a, &st).unwrap(), 0.5);
    }

    #[test]
    fn lr_factor_warms_up_then_decays() {
        assert!((lr_factor(0, 100, 10) - 0.1).abs() < 1e-6);
        assert!((lr_factor(9, 100, 10) - 1.0).abs() < 1e-6);
        assert!(lr_factor(50, 100, 10) < 1.0);
        assert!(lr_factor(99, 100, 10) < lr_factor(50, 100, 10));
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            l0: 2,
            total_epochs: 4,
            train_samples: 96,
            eval_samples: 48,
            lr_weight: 5e-3,
            lr_scale: 5e-3,
            warmup_epochs: 1,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_config();
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.state.to_csv(), b.state.to_csv());
        assert_eq!(a.final_acc, b.final_acc);
        // And the trained models agree on fresh data.
        let probe = make_dataset(8, 16, 4, 1.0, 3, 99).unwrap();
        for seq in &probe.seqs {
            assert_eq!(
                a.model.forward(seq).unwrap(),
                b.model.forward(seq).unwrap()
            );
        }
    }

    #[test]
    fn stage_transitions_are_recorded_with_strategy_applied() {
        let cfg = tiny_config();
        let r = train(&cfg).unwrap();
        // L0=2, stride 1 -> stages [2, 1]: one transition.
        assert_eq!(r.schedule.levels(), vec![2, 1]);
        assert_eq!(r.state.transitions.len(), 1);
        let t = r.state.transitions[0];
        assert_eq!(r.state.epochs[t - 1].stage_l, 2);
        assert_eq!(r.state.epochs[t].stage_l, 1);
        assert_eq!(r.state.transition_spikes().len(), 1);
    }

    #[test]
    fn ours_projection_preserves_dequantized_magnitude() {
        // Walk the adjacent transitions 4 -> 3 -> 2 -> 1 and check the
        // invariant at each: mean |s*q| over the calibration tensors stays
        // within 10% across the grid change.
        let cfg = tiny_config();
        let data = make_dataset(8, 16, 16, 1.0, 3, 14).unwrap();
        let mut model = ToyModel::new(cfg.model, QuantMode::Levelwise(4), 9).unwrap();
        model.calibrate(&data.seqs).unwrap();
        let mean_abs_dequant = |model: &ToyModel, taps: &Tap| {
            let mut out: HashMap<String, f64> = HashMap::new();
            for (name, st) in model.quant_states() {
                if matches!(st.mode, QuantMode::Bool) {
                    continue;
                }
                let mut sum = 0.0f64;
                let mut count = 0usize;
                for (n, t) in taps {
                    if n == &name {
                        let q = quantize(t, st).unwrap();
                        sum += q
                            .as_slice()
                            .iter()
                            .map(|&v| (v as f64 * st.scale as f64).abs())
                            .sum::<f64>();
                        count += t.len();
                    }
                }
                out.insert(name, sum / count as f64);
            }
            out
        };
        for new_l in [3u32, 2, 1] {
            let mut taps = Tap::new();
            for seq in &data.seqs {
                model.forward_train(seq, Some(&mut taps)).unwrap();
            }
            let before = mean_abs_dequant(&model, &taps);
            let log = stage_transition(&mut model, &data.seqs, new_l, ReinitStrategy::Ours).unwrap();
            assert!(!log.is_empty());
            // Re-measure on the same tensors with the new scales and grid.
            let after = mean_abs_dequant(&model, &taps);
            for (name, &b) in &before {
                let a = after[name];
                assert!(
                    (a - b).abs() <= 0.10 * b.abs().max(1e-9),
                    "L->{new_l} {name}: {b} -> {a}"
                );
            }
        }
    }

    #[test]
    fn mean_strategy_resets_to_data_statistic() {
        let cfg = tiny_config();
        let data = make_dataset(8, 16, 8, 1.0, 3, 15).unwrap();
        let mut model = ToyModel::new(cfg.model, QuantMode::Levelwise(3), 10).unwrap();
        model.calibrate(&data.seqs).unwrap();
        // Nudge one scale away, then transition with `mean`.
        for (name, st) in model.quant_states_mut() {
            if name == "b0.q_in" {
                st.set_scale(17.0);
            }
        }
        let log = stage_transition(&mut model, &data.seqs, 2, ReinitStrategy::Mean).unwrap();
        let (_, _, new) = log.iter().find(|(n, _, _)| n == "b0.q_in").unwrap();
        // q_in sees the raw embedded input; its mean-abs statistic cannot be
        // anywhere near the planted 17.
        assert!(*new < 10.0, "mean reinit left scale at {new}");
        // And `none` keeps whatever is there.
        for (name, st) in model.quant_states_mut() {
            if name == "b0.q_in" {
                st.set_scale(17.0);
            }
        }
        let log = stage_transition(&mut model, &data.seqs, 1, ReinitStrategy::None).unwrap();
        let (_, old, new) = log.iter().find(|(n, _, _)| n == "b0.q_in").unwrap();
        assert_eq!(*old, 17.0);
        assert_eq!(*new, 17.0);
    }

    fn fake_state(series: Vec<Vec<f32>>) -> TrainState {
        let names: Vec<String> = (0..series.len()).map(|i| format!("s{i}")).collect();
        let epochs = (0..series[0].len())
            .map(|e| EpochRecord {
                epoch: e,
                stage_l: 1,
                train_loss: 0.5,
                eval_acc: 0.9,
                zero_frac: 0.5,
                scales: series.iter().map(|s| s[e]).collect(),
            })
            .collect();
        TrainState {
            scale_names: names,
            epochs,
            transitions: vec![],
            spikes: vec![],
        }
    }

    #[test]
    fn convergence_report_tags_trajectories() {
        let state = fake_state(vec![
            vec![1.0; 8],                                            // converged
            vec![1.0, 1.2, 1.4, 1.6, 1.8, 2.0, 2.2, 2.4],            // diverging
            vec![1.0, 1.5, 1.0, 1.5, 1.0, 1.5, 1.0, 1.5],            // oscillating
            vec![1.0, 1.8, 2.2, 2.4, 2.5, 2.52, 2.53, 2.535],        // vanished gradient
        ]);
        let report = convergence_report(&state, 1.0, 0.01).unwrap();
        assert_eq!(report.rows[0].tag, ScaleTag::Converged);
        assert_eq!(report.rows[1].tag, ScaleTag::Diverging);
        assert_eq!(report.rows[2].tag, ScaleTag::Oscillating);
        assert_eq!(report.rows[3].tag, ScaleTag::VanishedGradient);
        assert_eq!(report.non_converged_fraction, 0.75);
        // A loose tolerance converts slow drift into convergence.
        let report = convergence_report(&state, 0.25, 10.0).unwrap();
        assert!(report.rows.iter().all(|r| r.tag == ScaleTag::Converged));
    }

    #[test]
    fn csv_has_header_and_scale_columns() {
        let state = fake_state(vec![vec![1.0, 1.1], vec![0.5, 0.6]]);
        let csv = state.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,stage_l,train_loss,eval_acc,zero_frac,s_s0,s_s1");
        assert_eq!(csv.lines().count(), 3);
    }
}
