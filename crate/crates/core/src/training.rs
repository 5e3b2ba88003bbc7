//! The five-term training objective, its analytic gradients, the optimizer
//! loop, and checkpointing.
//!
//! Only the three projectors train; both encoders and the class table stay
//! frozen. Logits are temperature-scaled cosine similarities between a
//! sample's visual feature and the text features of its per-class prompts.
//! The objective rewards correct classification of authorized samples under
//! the authorized credential, pushes extended and unauthorized samples
//! (paired with that same credential, the token-misuse construction) into the
//! unauthorized class, penalizes authorized samples landing there, and
//! maximizes a capped KL divergence between authorized and extended textual
//! features. Softmax probabilities are clamped below before logs so the
//! maximized terms stay bounded.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

use crate::backbone::{Backbone, BackboneSpec, FeatureVector, TextForward};
use crate::domains::{self, DomainDataset};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokens::{class_table, Prompt, ProjectorParams, Token, TokenRole};

/// Softmax probability floor inside cross-entropy.
pub const SOFTMAX_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// The full five-term objective.
    AodIp,
    /// Authorized-domain cross-entropy only (the SL reference model).
    AuthorizedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub temperature: f64,
    pub kl_cap: f64,
    pub ema_momentum: f64,
    pub master_seed: u64,
    /// Adds a positive term for extended samples paired with their own
    /// batch credential, teaching credential/domain matching explicitly.
    pub train_matched_extended: bool,
    pub objective: Objective,
    /// Augmentation ops composed per extended sample.
    pub ops_per_sample: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.1,
            learning_rate: 1e-3,
            epochs: 200,
            batch_size: 64,
            temperature: 0.07,
            kl_cap: 5.0,
            ema_momentum: 0.9,
            master_seed: 42,
            train_matched_extended: false,
            objective: Objective::AodIp,
            ops_per_sample: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda1 <= 0.0 {
            return Err(Error::InvalidInput("lambda1 must be > 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(Error::InvalidInput("temperature must be > 0".into()));
        }
        if self.kl_cap <= 0.0 {
            return Err(Error::InvalidInput("kl_cap must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::InvalidInput("ema_momentum must be in [0, 1)".into()));
        }
        if self.ops_per_sample == 0 {
            return Err(Error::InvalidInput("ops_per_sample must be >= 1".into()));
        }
        Ok(())
    }
}

/// Per-term loss values for one batch (or one epoch's batch means).
/// `total` always recomposes from the parts; `ce_e_matched` is zero unless
/// the matched-extended term is enabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub lambda1: f64,
    pub ce_a: f64,
    pub ce_a_to_u: f64,
    pub ce_u: f64,
    pub ce_e: f64,
    pub ce_e_matched: f64,
    pub kl: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recomposition of the objective from its parts.
    pub fn composed_total(&self) -> f64 {
        self.ce_a - self.lambda1 * self.ce_a_to_u + self.ce_u + self.ce_e + self.ce_e_matched
            - self.kl
    }

    pub fn is_finite(&self) -> bool {
        [
            self.ce_a,
            self.ce_a_to_u,
            self.ce_u,
            self.ce_e,
            self.ce_e_matched,
            self.kl,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

/// One epoch-log line (JSON-lines on disk).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub ce_a: f64,
    pub ce_a_to_u: f64,
    pub ce_u: f64,
    pub ce_e: f64,
    pub ce_e_matched: f64,
    pub kl: f64,
    pub total: f64,
}

/// A labelled mini-batch view.
pub struct Batch<'a> {
    pub samples: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
}

/// Everything the loss reads; training owns mutation of the projectors and
/// the credential EMA outside of these borrows.
pub struct ModelState<'a> {
    pub backbone: &'a Backbone,
    pub projectors: &'a ProjectorParams,
    pub class_table: &'a [Token],
    /// Input to `P_enc` for the authorized credential (the feature-mean EMA
    /// during training, a reference mean at issuance).
    pub credential_input: &'a Array1<f64>,
}

fn log_softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted = logits.mapv(|v| v - max);
    let log_sum = shifted.mapv(f64::exp).sum().ln();
    shifted.mapv(|v| v - log_sum)
}

fn softmax(logits: ArrayView1<f64>) -> Array1<f64> {
    log_softmax(logits).mapv(f64::exp)
}

/// Temperature-scaled cosine logits of one sample against its prompt list.
/// `prompts` must be ordered by class index `0..=N`.
pub fn compute_logits(
    f_v: &FeatureVector,
    prompts: &[Prompt],
    backbone: &Backbone,
    temperature: f64,
) -> Result<Array1<f64>> {
    if temperature <= 0.0 {
        return Err(Error::InvalidInput("temperature must be > 0".into()));
    }
    for (k, p) in prompts.iter().enumerate() {
        if p.class_index() != k {
            return Err(Error::InvalidInput(format!(
                "prompt {k} carries class_index {}",
                p.class_index()
            )));
        }
    }
    let v_norm = f_v.values().dot(f_v.values()).sqrt();
    if v_norm == 0.0 {
        return Err(Error::DegenerateFeature);
    }
    let mut logits = Array1::zeros(prompts.len());
    for (k, prompt) in prompts.iter().enumerate() {
        let t = backbone.encode_text(prompt)?;
        let t_norm = t.values().dot(t.values()).sqrt();
        if t_norm == 0.0 {
            return Err(Error::DegenerateFeature);
        }
        logits[k] = f_v.values().dot(t.values()) / (v_norm * t_norm * temperature);
    }
    Ok(logits)
}

/// Cross-entropy with the ε-clamped softmax of the spec: `-ln max(s_y, ε)`.
pub fn cross_entropy(logits: ArrayView1<f64>, target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "target {target} out of range for {} logits",
            logits.len()
        )));
    }
    let probs = softmax(logits);
    Ok(-(probs[target].max(SOFTMAX_EPS)).ln())
}

fn cross_entropy_grad(logits: ArrayView1<f64>, target: usize) -> Array1<f64> {
    let probs = softmax(logits);
    if probs[target] <= SOFTMAX_EPS {
        // clamp active: the loss is locally constant
        return Array1::zeros(logits.len());
    }
    let mut grad = probs;
    grad[target] -= 1.0;
    grad
}

/// KL divergence between the softmax distributions of two feature vectors,
/// clamped at `cap`. Zero iff the distributions coincide.
pub fn kl_separation(f_a_t: &FeatureVector, f_e_t: &FeatureVector, cap: f64) -> Result<f64> {
    if f_a_t.len() != f_e_t.len() {
        return Err(Error::InvalidInput(format!(
            "length mismatch {} vs {}",
            f_a_t.len(),
            f_e_t.len()
        )));
    }
    Ok(kl_raw(f_a_t.values().view(), f_e_t.values().view()).min(cap))
}

fn kl_raw(a_logits: ArrayView1<f64>, b_logits: ArrayView1<f64>) -> f64 {
    let la = log_softmax(a_logits);
    let lb = log_softmax(b_logits);
    la.iter()
        .zip(lb.iter())
        .map(|(&la_i, &lb_i)| la_i.exp() * (la_i - lb_i))
        .sum::<f64>()
        .max(0.0)
}

/// Forward state for one role batch (one credential, one sample batch).
struct RoleForward {
    feats: Array2<f64>,
    ms: Array2<f64>,
    text: TextForward,
    logits: Array2<f64>,
    cred_input: Array1<f64>,
    n_classes: usize,
}

fn forward_role(
    state: &ModelState,
    samples: ArrayView2<f64>,
    cred_input: &Array1<f64>,
    temperature: f64,
) -> Result<RoleForward> {
    let p = state.projectors;
    let (feats, ms) = state.backbone.encode_image_batch(samples)?;
    let img_tokens = ms.dot(&p.img_w.t()) + &p.img_b;
    let dom_tokens = ms.dot(&p.dom_w.t()) + &p.dom_b;
    let cred = p.enc_w.dot(cred_input) + &p.enc_b;

    let batch = samples.nrows();
    let classes = state.class_table.len();
    let d_tok = cred.len();
    let text_in = state.backbone.spec().text_input_dim();
    let mut prompts = Array2::zeros((batch * classes, text_in));
    for i in 0..batch {
        for k in 0..classes {
            let mut row = prompts.row_mut(i * classes + k);
            row.slice_mut(ndarray::s![0..d_tok]).assign(&cred);
            row.slice_mut(ndarray::s![d_tok..2 * d_tok])
                .assign(&img_tokens.row(i));
            row.slice_mut(ndarray::s![2 * d_tok..3 * d_tok])
                .assign(&dom_tokens.row(i));
            row.slice_mut(ndarray::s![3 * d_tok..4 * d_tok])
                .assign(state.class_table[k].values());
        }
    }
    let text = state.backbone.encode_text_batch(prompts.view())?;

    let mut logits = Array2::zeros((batch, classes));
    for i in 0..batch {
        let f = feats.row(i);
        let f_norm = f.dot(&f).sqrt();
        if f_norm == 0.0 {
            return Err(Error::DegenerateFeature);
        }
        for k in 0..classes {
            let t = text.features.row(i * classes + k);
            let t_norm = t.dot(&t).sqrt();
            if t_norm == 0.0 {
                return Err(Error::DegenerateFeature);
            }
            logits[[i, k]] = f.dot(&t) / (f_norm * t_norm * temperature);
        }
    }
    Ok(RoleForward {
        feats,
        ms,
        text,
        logits,
        cred_input: cred_input.clone(),
        n_classes: classes - 1,
    })
}

/// Accumulates projector gradients for one role batch given upstream logit
/// gradients and (optionally) direct text-feature gradients from the KL term.
fn backward_role(
    state: &ModelState,
    fwd: &RoleForward,
    d_logits: &Array2<f64>,
    d_text_extra: Option<&Array2<f64>>,
    temperature: f64,
    grads: &mut ProjectorParams,
) {
    let batch = fwd.feats.nrows();
    let classes = fwd.n_classes + 1;
    let d_tok = state.projectors.img_b.len();

    let mut d_text = match d_text_extra {
        Some(extra) => extra.clone(),
        None => Array2::zeros(fwd.text.features.raw_dim()),
    };
    for i in 0..batch {
        let f = fwd.feats.row(i);
        let f_norm = f.dot(&f).sqrt();
        for k in 0..classes {
            let coeff = d_logits[[i, k]];
            if coeff == 0.0 {
                continue;
            }
            let t = fwd.text.features.row(i * classes + k);
            let t_norm = t.dot(&t).sqrt();
            let cos = f.dot(&t) / (f_norm * t_norm);
            // d cos / d t, scaled by 1/temperature
            let scale = coeff / temperature;
            let mut row = d_text.row_mut(i * classes + k);
            let update = (&f / (f_norm * t_norm) - &(cos / (t_norm * t_norm) * &t)) * scale;
            row += &update;
        }
    }

    let d_prompts = state.backbone.text_backward(&fwd.text, d_text.view());

    // split prompt gradient into token slots and fold class-count axis
    let mut d_cred = Array1::<f64>::zeros(d_tok);
    let mut d_img = Array2::<f64>::zeros((batch, d_tok));
    let mut d_dom = Array2::<f64>::zeros((batch, d_tok));
    for i in 0..batch {
        for k in 0..classes {
            let row = d_prompts.row(i * classes + k);
            d_cred += &row.slice(ndarray::s![0..d_tok]);
            let mut gi = d_img.row_mut(i);
            gi += &row.slice(ndarray::s![d_tok..2 * d_tok]);
            let mut di = d_dom.row_mut(i);
            di += &row.slice(ndarray::s![2 * d_tok..3 * d_tok]);
        }
    }

    grads.img_w += &d_img.t().dot(&fwd.ms);
    grads.img_b += &d_img.sum_axis(Axis(0));
    grads.dom_w += &d_dom.t().dot(&fwd.ms);
    grads.dom_b += &d_dom.sum_axis(Axis(0));
    for r in 0..d_tok {
        let g = d_cred[r];
        if g != 0.0 {
            let mut row = grads.enc_w.row_mut(r);
            row += &(g * &fwd.cred_input);
        }
    }
    grads.enc_b += &d_cred;
}

fn validate_batch(batch: &Batch, n_classes: usize, what: &str) -> Result<()> {
    if batch.samples.nrows() == 0 {
        return Err(Error::InvalidInput(format!("empty {what} batch")));
    }
    if batch.samples.nrows() != batch.labels.len() {
        return Err(Error::InvalidInput(format!(
            "{what} batch has {} samples but {} labels",
            batch.samples.nrows(),
            batch.labels.len()
        )));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidInput(format!(
            "{what} label {bad} out of range"
        )));
    }
    Ok(())
}

/// The Eq.-style objective over one batch triple. Pure with respect to the
/// model state; the training loop owns all mutation.
pub fn total_loss(
    batch_a: &Batch,
    batch_e: &Batch,
    batch_u: &Batch,
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    total_loss_impl(batch_a, batch_e, batch_u, state, cfg, None)
}

/// As [`total_loss`] but also accumulating projector gradients.
pub fn total_loss_with_grads(
    batch_a: &Batch,
    batch_e: &Batch,
    batch_u: &Batch,
    state: &ModelState,
    cfg: &TrainConfig,
) -> Result<(LossBreakdown, ProjectorParams)> {
    let mut grads = state.projectors.zeros_like();
    let breakdown = total_loss_impl(batch_a, batch_e, batch_u, state, cfg, Some(&mut grads))?;
    Ok((breakdown, grads))
}

fn total_loss_impl(
    batch_a: &Batch,
    batch_e: &Batch,
    batch_u: &Batch,
    state: &ModelState,
    cfg: &TrainConfig,
    mut grads: Option<&mut ProjectorParams>,
) -> Result<LossBreakdown> {
    let n_classes = state.class_table.len() - 1;
    validate_batch(batch_a, n_classes, "authorized")?;
    validate_batch(batch_e, n_classes, "extended")?;
    validate_batch(batch_u, n_classes, "unauthorized")?;
    if batch_a.samples.nrows() != batch_e.samples.nrows() {
        return Err(Error::InvalidInput(
            "authorized and extended batches must be aligned".into(),
        ));
    }

    let temp = cfg.temperature;
    let unauth_class = n_classes;

    if cfg.objective == Objective::AuthorizedOnly {
        let fwd_a = forward_role(state, batch_a.samples, state.credential_input, temp)?;
        let b = batch_a.samples.nrows() as f64;
        let mut ce = 0.0;
        let mut d_logits = Array2::zeros(fwd_a.logits.raw_dim());
        for (i, &y) in batch_a.labels.iter().enumerate() {
            ce += cross_entropy(fwd_a.logits.row(i), y)? / b;
            if grads.is_some() {
                let g = cross_entropy_grad(fwd_a.logits.row(i), y) / b;
                d_logits.row_mut(i).assign(&g);
            }
        }
        if let Some(g) = grads.as_deref_mut() {
            backward_role(state, &fwd_a, &d_logits, None, temp, g);
        }
        return Ok(LossBreakdown {
            lambda1: cfg.lambda1,
            ce_a: ce,
            ce_a_to_u: 0.0,
            ce_u: 0.0,
            ce_e: 0.0,
            ce_e_matched: 0.0,
            kl: 0.0,
            total: ce,
        });
    }

    let fwd_a = forward_role(state, batch_a.samples, state.credential_input, temp)?;
    let fwd_e = forward_role(state, batch_e.samples, state.credential_input, temp)?;
    let fwd_u = forward_role(state, batch_u.samples, state.credential_input, temp)?;

    let b_a = batch_a.samples.nrows() as f64;
    let b_u = batch_u.samples.nrows() as f64;

    // authorized: lambda1 * CE(p_a, y) - lambda1 * CE(p_a, N)
    let mut ce_a_mean = 0.0;
    let mut ce_a_to_u = 0.0;
    let mut d_logits_a = Array2::zeros(fwd_a.logits.raw_dim());
    for (i, &y) in batch_a.labels.iter().enumerate() {
        let row = fwd_a.logits.row(i);
        ce_a_mean += cross_entropy(row, y)? / b_a;
        ce_a_to_u += cross_entropy(row, unauth_class)? / b_a;
        if grads.is_some() {
            let g = (cross_entropy_grad(row, y) * cfg.lambda1
                - cross_entropy_grad(row, unauth_class) * cfg.lambda1)
                / b_a;
            d_logits_a.row_mut(i).assign(&g);
        }
    }
    let ce_a = cfg.lambda1 * ce_a_mean;

    // extended and unauthorized pushed to the unauthorized class
    let mut ce_e = 0.0;
    let mut d_logits_e = Array2::zeros(fwd_e.logits.raw_dim());
    for i in 0..batch_e.samples.nrows() {
        let row = fwd_e.logits.row(i);
        ce_e += cross_entropy(row, unauth_class)? / b_a;
        if grads.is_some() {
            let g = cross_entropy_grad(row, unauth_class) / b_a;
            d_logits_e.row_mut(i).assign(&g);
        }
    }
    let mut ce_u = 0.0;
    let mut d_logits_u = Array2::zeros(fwd_u.logits.raw_dim());
    for i in 0..batch_u.samples.nrows() {
        let row = fwd_u.logits.row(i);
        ce_u += cross_entropy(row, unauth_class)? / b_u;
        if grads.is_some() {
            let g = cross_entropy_grad(row, unauth_class) / b_u;
            d_logits_u.row_mut(i).assign(&g);
        }
    }

    // KL separation between authorized and extended text features, paired
    // per class index over aligned samples; clamped per pair, then averaged.
    // Enters the total negatively (it is maximized up to the cap).
    let classes = n_classes + 1;
    let n_pairs = (batch_a.samples.nrows() * classes) as f64;
    let mut kl_sum = 0.0;
    let mut d_text_a = Array2::zeros(fwd_a.text.features.raw_dim());
    let mut d_text_e = Array2::zeros(fwd_e.text.features.raw_dim());
    for i in 0..batch_a.samples.nrows() {
        for k in 0..classes {
            let row = i * classes + k;
            let ta = fwd_a.text.features.row(row);
            let te = fwd_e.text.features.row(row);
            let kl = kl_raw(ta, te);
            kl_sum += kl.min(cfg.kl_cap);
            if grads.is_some() && kl < cfg.kl_cap {
                let pa = softmax(ta);
                let pe = softmax(te);
                let la = log_softmax(ta);
                let le = log_softmax(te);
                // d(-KL/n)/dta_j = -(pa_j * ((la_j - le_j) - KL)) / n
                for j in 0..pa.len() {
                    d_text_a[[row, j]] -= pa[j] * ((la[j] - le[j]) - kl) / n_pairs;
                    d_text_e[[row, j]] -= (pe[j] - pa[j]) / n_pairs;
                }
            }
        }
    }
    let kl = kl_sum / n_pairs;

    // optional positive term: extended samples with their own batch credential
    let mut ce_e_matched = 0.0;
    let mut matched: Option<(RoleForward, Array2<f64>)> = None;
    if cfg.train_matched_extended {
        let mean_e = fwd_e
            .feats
            .mean_axis(Axis(0))
            .expect("non-empty extended batch");
        let fwd_m = forward_role(state, batch_e.samples, &mean_e, temp)?;
        let mut d_logits_m = Array2::zeros(fwd_m.logits.raw_dim());
        for (i, &y) in batch_e.labels.iter().enumerate() {
            let row = fwd_m.logits.row(i);
            ce_e_matched += cross_entropy(row, y)? / b_a;
            if grads.is_some() {
                let g = cross_entropy_grad(row, y) / b_a;
                d_logits_m.row_mut(i).assign(&g);
            }
        }
        matched = Some((fwd_m, d_logits_m));
    }

    if let Some(g) = grads.as_deref_mut() {
        backward_role(state, &fwd_a, &d_logits_a, Some(&d_text_a), temp, g);
        backward_role(state, &fwd_e, &d_logits_e, Some(&d_text_e), temp, g);
        backward_role(state, &fwd_u, &d_logits_u, None, temp, g);
        if let Some((fwd_m, d_logits_m)) = &matched {
            backward_role(state, fwd_m, d_logits_m, None, temp, g);
        }
    }

    let total = ce_a - cfg.lambda1 * ce_a_to_u + ce_u + ce_e + ce_e_matched - kl;
    Ok(LossBreakdown {
        lambda1: cfg.lambda1,
        ce_a,
        ce_a_to_u,
        ce_u,
        ce_e,
        ce_e_matched,
        kl,
        total,
    })
}

struct Adam {
    m: ProjectorParams,
    v: ProjectorParams,
    step: usize,
    lr: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ProjectorParams, lr: f64) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
            lr,
        }
    }

    fn update(&mut self, params: &mut ProjectorParams, grads: &ProjectorParams) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let lr = self.lr;

        fn tensor_step<D: ndarray::Dimension>(
            p: &mut ndarray::Array<f64, D>,
            m: &mut ndarray::Array<f64, D>,
            v: &mut ndarray::Array<f64, D>,
            g: &ndarray::Array<f64, D>,
            lr: f64,
            bc1: f64,
            bc2: f64,
        ) {
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            });
        }

        tensor_step(&mut params.img_w, &mut self.m.img_w, &mut self.v.img_w, &grads.img_w, lr, bc1, bc2);
        tensor_step(&mut params.img_b, &mut self.m.img_b, &mut self.v.img_b, &grads.img_b, lr, bc1, bc2);
        tensor_step(&mut params.dom_w, &mut self.m.dom_w, &mut self.v.dom_w, &grads.dom_w, lr, bc1, bc2);
        tensor_step(&mut params.dom_b, &mut self.m.dom_b, &mut self.v.dom_b, &grads.dom_b, lr, bc1, bc2);
        tensor_step(&mut params.enc_w, &mut self.m.enc_w, &mut self.v.enc_w, &grads.enc_w, lr, bc1, bc2);
        tensor_step(&mut params.enc_b, &mut self.m.enc_b, &mut self.v.enc_b, &grads.enc_b, lr, bc1, bc2);
    }
}

/// Trained state: frozen backbone spec, trained projectors, frozen class
/// table, the training-time credential, and the config that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub backbone_spec: BackboneSpec,
    pub projectors: ProjectorParams,
    pub class_table: Vec<Token>,
    pub training_credential: Token,
    pub config: TrainConfig,
    pub digest: String,
}

impl Checkpoint {
    pub fn backbone(&self) -> Backbone {
        Backbone::new(&self.backbone_spec)
    }

    pub fn n_classes(&self) -> usize {
        self.class_table.len() - 1
    }

    /// Digest over backbone spec, projectors, and class table.
    pub fn compute_digest(
        spec: &BackboneSpec,
        projectors: &ProjectorParams,
        class_table: &[Token],
    ) -> String {
        let mut hasher = Sha256::new();
        for dim in [
            spec.master_seed,
            spec.input_dim as u64,
            spec.hidden_dim as u64,
            spec.feature_dim as u64,
            spec.token_dim as u64,
            spec.prompt_token_count as u64,
        ] {
            hasher.update(dim.to_le_bytes());
        }
        for (name, values) in projectors.tensors() {
            hasher.update(name.as_bytes());
            for v in values {
                hasher.update(v.to_le_bytes());
            }
        }
        for token in class_table {
            for v in token.values() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Storage(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    /// Loads and re-verifies the stored digest.
    pub fn load(path: &Path) -> Result<Checkpoint> {
        let data = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint =
            serde_json::from_str(&data).map_err(|e| Error::Storage(e.to_string()))?;
        let recomputed =
            Self::compute_digest(&ckpt.backbone_spec, &ckpt.projectors, &ckpt.class_table);
        if recomputed != ckpt.digest {
            return Err(Error::Storage(format!(
                "checkpoint digest mismatch: stored {}, recomputed {}",
                ckpt.digest, recomputed
            )));
        }
        Ok(ckpt)
    }
}

/// Training result: the checkpoint plus per-epoch loss means.
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub epoch_logs: Vec<EpochLog>,
}

/// Runs mini-batch optimization of the projectors over the authorized and
/// unauthorized datasets; extended batches are regenerated from each
/// authorized batch by random style perturbations. The backbone digest is
/// identical before and after.
pub fn train(cfg: &TrainConfig, d_a: &DomainDataset, d_u: &DomainDataset) -> Result<TrainOutput> {
    cfg.validate()?;
    if d_a.n_classes() != d_u.n_classes() {
        return Err(Error::InvalidInput(format!(
            "label spaces differ: {} vs {}",
            d_a.n_classes(),
            d_u.n_classes()
        )));
    }
    if d_a.is_empty() || d_u.is_empty() {
        return Err(Error::InvalidInput("empty training dataset".into()));
    }
    if d_a.input_dim() != d_u.input_dim() {
        return Err(Error::InvalidInput("input dimensions differ".into()));
    }

    let spec = BackboneSpec::with_input_dim(cfg.master_seed, d_a.input_dim());
    let backbone = Backbone::new(&spec);
    let digest_before = backbone.digest().to_string();

    let mut projectors = ProjectorParams::init(&spec);
    let table = class_table(&spec, d_a.n_classes());
    let mut adam = Adam::new(&projectors, cfg.learning_rate);

    let mut ema = Array1::<f64>::zeros(spec.feature_dim);
    let mut ema_started = false;

    let n_a = d_a.len();
    let n_u = d_u.len();
    let batches_per_epoch = n_a.div_ceil(cfg.batch_size);
    let mut epoch_logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let mut order_a = rng::stream(cfg.master_seed, &format!("shuffle_a.{epoch}"));
        let order_a = rng::permutation(&mut order_a, n_a);
        let mut order_u = rng::stream(cfg.master_seed, &format!("shuffle_u.{epoch}"));
        let order_u = rng::permutation(&mut order_u, n_u);

        let mut sums = [0.0f64; 7];
        for batch_idx in 0..batches_per_epoch {
            let start = batch_idx * cfg.batch_size;
            let end = (start + cfg.batch_size).min(n_a);
            let idx_a: Vec<usize> = order_a[start..end].to_vec();
            let idx_u: Vec<usize> = (start..end).map(|i| order_u[i % n_u]).collect();

            let x_a = d_a.samples().select(Axis(0), &idx_a);
            let y_a: Vec<usize> = idx_a.iter().map(|&i| d_a.labels()[i]).collect();
            let x_u = d_u.samples().select(Axis(0), &idx_u);
            let y_u: Vec<usize> = idx_u.iter().map(|&i| d_u.labels()[i]).collect();

            let mut aug_rng =
                rng::stream(cfg.master_seed, &format!("augment.{epoch}.{batch_idx}"));
            let x_e = domains::augment_rows(x_a.view(), &mut aug_rng, cfg.ops_per_sample);

            // credential EMA over per-batch authorized feature means
            let (feats_a, _) = backbone.encode_image_batch(x_a.view())?;
            let batch_mean = feats_a.mean_axis(Axis(0)).expect("non-empty batch");
            if ema_started {
                ema = cfg.ema_momentum * &ema + (1.0 - cfg.ema_momentum) * &batch_mean;
            } else {
                ema = batch_mean;
                ema_started = true;
            }

            let state = ModelState {
                backbone: &backbone,
                projectors: &projectors,
                class_table: &table,
                credential_input: &ema,
            };
            let batch_a = Batch {
                samples: x_a.view(),
                labels: &y_a,
            };
            let batch_e = Batch {
                samples: x_e.view(),
                labels: &y_a,
            };
            let batch_u = Batch {
                samples: x_u.view(),
                labels: &y_u,
            };
            let (breakdown, grads) =
                total_loss_with_grads(&batch_a, &batch_e, &batch_u, &state, cfg)?;
            if !breakdown.is_finite() {
                return Err(Error::TrainingDiverged { epoch });
            }
            adam.update(&mut projectors, &grads);

            for (slot, value) in [
                breakdown.ce_a,
                breakdown.ce_a_to_u,
                breakdown.ce_u,
                breakdown.ce_e,
                breakdown.ce_e_matched,
                breakdown.kl,
                breakdown.total,
            ]
            .iter()
            .enumerate()
            {
                sums[slot] += value;
            }
        }

        let n = batches_per_epoch as f64;
        epoch_logs.push(EpochLog {
            epoch,
            ce_a: sums[0] / n,
            ce_a_to_u: sums[1] / n,
            ce_u: sums[2] / n,
            ce_e: sums[3] / n,
            ce_e_matched: sums[4] / n,
            kl: sums[5] / n,
            total: sums[6] / n,
        });
    }

    // the frozen encoders must be bit-identical to their pre-training state
    debug_assert_eq!(Backbone::new(&spec).digest(), digest_before);

    let training_credential = Token::new(
        TokenRole::Credential,
        projectors.enc_w.dot(&ema) + &projectors.enc_b,
    )?;
    let digest = Checkpoint::compute_digest(&spec, &projectors, &table);
    Ok(TrainOutput {
        checkpoint: Checkpoint {
            backbone_spec: spec,
            projectors,
            class_table: table,
            training_credential,
            config: cfg.clone(),
            digest,
        },
        epoch_logs,
    })
}

/// Writes the epoch log as JSON lines.
pub fn write_epoch_log(path: &Path, logs: &[EpochLog]) -> Result<()> {
    let mut out = String::new();
    for log in logs {
        out.push_str(&serde_json::to_string(log).map_err(|e| Error::Storage(e.to_string()))?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Dimensions of the gradient-check instance; deliberately tiny so central
/// differences over every parameter stay fast.
#[derive(Debug, Clone)]
pub struct TinyInstance {
    pub n_classes: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TinyInstance {
    fn default() -> Self {
        Self {
            n_classes: 3,
            batch: 4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub params_checked: usize,
}

/// Compares analytic gradients of [`total_loss`] against central finite
/// differences (step 1e-5) for every projector parameter. No optimizer step
/// is taken; parameters are bit-identical afterwards.
pub fn gradient_check(cfg: &TrainConfig, instance: &TinyInstance) -> Result<GradCheckReport> {
    if instance.n_classes > 3 || instance.batch > 4 || instance.n_classes < 2 || instance.batch == 0
    {
        return Err(Error::InvalidInput(
            "gradient check wants 2 <= n_classes <= 3 and 1 <= batch <= 4".into(),
        ));
    }
    let spec = BackboneSpec {
        master_seed: instance.seed,
        input_dim: 6,
        hidden_dim: 12,
        feature_dim: 10,
        token_dim: 8,
        prompt_token_count: 4,
    };
    let backbone = Backbone::new(&spec);
    let projectors = ProjectorParams::init(&spec);
    let table = class_table(&spec, instance.n_classes);

    let mut r = rng::stream(instance.seed, "gradcheck.data");
    let x_a = rng::gaussian_mat(&mut r, instance.batch, spec.input_dim, 1.0);
    let x_e = &x_a + &rng::gaussian_mat(&mut r, instance.batch, spec.input_dim, 0.3);
    let x_u = rng::gaussian_mat(&mut r, instance.batch, spec.input_dim, 1.0) + 0.8;
    let labels: Vec<usize> = (0..instance.batch).map(|i| i % instance.n_classes).collect();
    let cred_input = rng::gaussian_vec(&mut r, spec.feature_dim, 1.0);

    let before = projectors.clone();
    let batch_a = Batch {
        samples: x_a.view(),
        labels: &labels,
    };
    let batch_e = Batch {
        samples: x_e.view(),
        labels: &labels,
    };
    let batch_u = Batch {
        samples: x_u.view(),
        labels: &labels,
    };

    let eval = |p: &ProjectorParams| -> Result<f64> {
        let state = ModelState {
            backbone: &backbone,
            projectors: p,
            class_table: &table,
            credential_input: &cred_input,
        };
        Ok(total_loss(&batch_a, &batch_e, &batch_u, &state, cfg)?.total)
    };

    let state = ModelState {
        backbone: &backbone,
        projectors: &projectors,
        class_table: &table,
        credential_input: &cred_input,
    };
    let (_, analytic) = total_loss_with_grads(&batch_a, &batch_e, &batch_u, &state, cfg)?;

    let h = 1e-5;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        params_checked: 0,
    };

    let tensors: [(&str, Vec<f64>); 6] = [
        ("img_w", analytic.img_w.iter().copied().collect()),
        ("img_b", analytic.img_b.iter().copied().collect()),
        ("dom_w", analytic.dom_w.iter().copied().collect()),
        ("dom_b", analytic.dom_b.iter().copied().collect()),
        ("enc_w", analytic.enc_w.iter().copied().collect()),
        ("enc_b", analytic.enc_b.iter().copied().collect()),
    ];
    for (name, grad_flat) in tensors {
        for (idx, &g_analytic) in grad_flat.iter().enumerate() {
            let mut plus = projectors.clone();
            let mut minus = projectors.clone();
            perturb(&mut plus, name, idx, h);
            perturb(&mut minus, name, idx, -h);
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * h);
            let denom = g_analytic.abs().max(fd.abs()).max(1e-6);
            let rel = (g_analytic - fd).abs() / denom;
            report.params_checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_tensor = name.to_string();
                report.worst_index = idx;
            }
        }
    }
    assert_eq!(before, projectors, "gradient check must not alter parameters");
    Ok(report)
}

fn perturb(params: &mut ProjectorParams, tensor: &str, flat_index: usize, delta: f64) {
    match tensor {
        "img_w" => *params.img_w.iter_mut().nth(flat_index).unwrap() += delta,
        "img_b" => params.img_b[flat_index] += delta,
        "dom_w" => *params.dom_w.iter_mut().nth(flat_index).unwrap() += delta,
        "dom_b" => params.dom_b[flat_index] += delta,
        "enc_w" => *params.enc_w.iter_mut().nth(flat_index).unwrap() += delta,
        "enc_b" => params.enc_b[flat_index] += delta,
        _ => unreachable!("unknown tensor {tensor}"),
    }
}
