//! Credential-gated dual-path inference.
//!
//! Every inference request carries a data sample and (optionally) a
//! credential token; without a credential the token set is incomplete and
//! inference halts before any prediction is formed. With one, the sample's
//! multi-scale features are projected into image and domain tokens, the
//! per-class prompts are assembled around the supplied credential, and the
//! output is both the (N+1)-way prediction and a legality bit that flips off
//! whenever the unauthorized class wins the argmax.

use ndarray::{Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::tokens::{
    assemble_prompts, project_domain_token, project_image_token, CredentialRecord,
    CredentialStore, Token, TokenRole,
};
use crate::training::{compute_logits, Checkpoint};

/// Joint task prediction and legality verdict.
#[derive(Debug, Clone, PartialEq)]
pub struct DualOutput {
    /// Prediction vector over the N task classes plus the unauthorized slot.
    pub p: Vec<f64>,
    /// Argmax of `p` (ties resolve to the lowest index).
    pub predicted_class: usize,
    /// 1 iff the argmax is a task class; exactly `predicted_class != N`.
    pub legal: bool,
}

/// A sample plus its (optional) credential. `declared_domain` is logging
/// metadata only; the model never reads it.
#[derive(Debug, Clone)]
pub struct InferenceRequest {
    pub sample: Array1<f64>,
    pub credential: Option<Token>,
    pub declared_domain: Option<String>,
}

/// Lowest-index argmax; a tie between a task class and the unauthorized
/// class therefore resolves to the task class.
pub fn argmax_lowest(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// Legality bit: 1 iff the argmax is not the unauthorized class (last entry).
pub fn legality(p: &[f64]) -> bool {
    argmax_lowest(p) != p.len() - 1
}

/// A checkpoint with its backbone instantiated once for repeated use.
pub struct LoadedModel {
    checkpoint: Checkpoint,
    backbone: Backbone,
}

impl LoadedModel {
    pub fn new(checkpoint: Checkpoint) -> Self {
        let backbone = checkpoint.backbone();
        Self {
            checkpoint,
            backbone,
        }
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn n_classes(&self) -> usize {
        self.checkpoint.n_classes()
    }
}

fn validate_credential(model: &LoadedModel, credential: &Token) -> Result<()> {
    if credential.role() != TokenRole::Credential {
        return Err(Error::InvalidToken(format!(
            "expected a credential token, got {}",
            credential.role()
        )));
    }
    if credential.len() != model.checkpoint.backbone_spec.token_dim {
        return Err(Error::InvalidToken(format!(
            "credential length {} != token_dim {}",
            credential.len(),
            model.checkpoint.backbone_spec.token_dim
        )));
    }
    Ok(())
}

/// Single-sample dual-path inference. Halts with `CredentialMissing` when no
/// credential is supplied; read-only with respect to the checkpoint.
pub fn infer(req: &InferenceRequest, model: &LoadedModel) -> Result<DualOutput> {
    let credential = req.credential.as_ref().ok_or(Error::CredentialMissing)?;
    validate_credential(model, credential)?;

    let (f_v, ms) = model.backbone.encode_image(req.sample.view())?;
    let projectors = &model.checkpoint.projectors;
    let image_tok = project_image_token(&ms, projectors)?;
    let domain_tok = project_domain_token(&ms, projectors)?;
    let prompts = assemble_prompts(credential, &image_tok, &domain_tok, &model.checkpoint.class_table)?;
    let logits = compute_logits(
        &f_v,
        &prompts,
        &model.backbone,
        model.checkpoint.config.temperature,
    )?;
    let p = logits.to_vec();
    let predicted_class = argmax_lowest(&p);
    Ok(DualOutput {
        legal: predicted_class != p.len() - 1,
        predicted_class,
        p,
    })
}

/// Batched inference with a shared credential. Same math as [`infer`], one
/// GEMM per layer instead of per sample.
pub fn infer_batch(
    samples: ArrayView2<f64>,
    credential: &Token,
    model: &LoadedModel,
) -> Result<Vec<DualOutput>> {
    validate_credential(model, credential)?;
    let ckpt = &model.checkpoint;
    let (feats, ms) = model.backbone.encode_image_batch(samples)?;
    let projectors = &ckpt.projectors;
    let img_tokens = ms.dot(&projectors.img_w.t()) + &projectors.img_b;
    let dom_tokens = ms.dot(&projectors.dom_w.t()) + &projectors.dom_b;

    let batch = samples.nrows();
    let classes = ckpt.class_table.len();
    let d_tok = ckpt.backbone_spec.token_dim;
    let mut prompts = Array2::zeros((batch * classes, ckpt.backbone_spec.text_input_dim()));
    for i in 0..batch {
        for k in 0..classes {
            let mut row = prompts.row_mut(i * classes + k);
            row.slice_mut(ndarray::s![0..d_tok]).assign(credential.values());
            row.slice_mut(ndarray::s![d_tok..2 * d_tok]).assign(&img_tokens.row(i));
            row.slice_mut(ndarray::s![2 * d_tok..3 * d_tok]).assign(&dom_tokens.row(i));
            row.slice_mut(ndarray::s![3 * d_tok..4 * d_tok])
                .assign(ckpt.class_table[k].values());
        }
    }
    let text = model.backbone.encode_text_batch(prompts.view())?;

    let temp = ckpt.config.temperature;
    let mut outputs = Vec::with_capacity(batch);
    for i in 0..batch {
        let f = feats.row(i);
        let f_norm = f.dot(&f).sqrt();
        if f_norm == 0.0 {
            return Err(Error::DegenerateFeature);
        }
        let mut p = vec![0.0; classes];
        for (k, slot) in p.iter_mut().enumerate() {
            let t = text.features.row(i * classes + k);
            let t_norm = t.dot(&t).sqrt();
            if t_norm == 0.0 {
                return Err(Error::DegenerateFeature);
            }
            *slot = f.dot(&t) / (f_norm * t_norm * temp);
        }
        let predicted_class = argmax_lowest(&p);
        outputs.push(DualOutput {
            legal: predicted_class != classes - 1,
            predicted_class,
            p,
        });
    }
    Ok(outputs)
}

/// Task accuracy and legality rate (both in percent) of a dataset under one
/// credential. Samples predicted as the unauthorized class count as task
/// errors; the legality rate counts samples whose bit matches `expectation`.
pub fn evaluate_domain(
    ds: &crate::domains::DomainDataset,
    credential: &Token,
    model: &LoadedModel,
    legality_expectation: bool,
) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::InvalidInput("empty evaluation dataset".into()));
    }
    let outputs = infer_batch(ds.samples().view(), credential, model)?;
    let mut correct = 0usize;
    let mut legality_hits = 0usize;
    for (out, &label) in outputs.iter().zip(ds.labels().iter()) {
        if out.predicted_class == label {
            correct += 1;
        }
        if out.legal == legality_expectation {
            legality_hits += 1;
        }
    }
    let n = outputs.len() as f64;
    Ok((100.0 * correct as f64 / n, 100.0 * legality_hits as f64 / n))
}

/// Session state for user-controlled domain switching: holds the active
/// credential; switching reads the store and never touches the model.
pub struct InferenceSession<'a> {
    model: &'a LoadedModel,
    active: CredentialRecord,
}

impl<'a> InferenceSession<'a> {
    pub fn new(model: &'a LoadedModel, active: CredentialRecord) -> Self {
        Self { model, active }
    }

    pub fn active(&self) -> &CredentialRecord {
        &self.active
    }

    /// Activates the most recent credential issued for `domain_id`.
    pub fn switch_domain(&mut self, store: &CredentialStore, domain_id: &str) -> Result<&CredentialRecord> {
        let record = store
            .latest_for_domain(domain_id)
            .ok_or_else(|| Error::CredentialNotFound(domain_id.to_string()))?;
        self.active = record.clone();
        Ok(&self.active)
    }

    pub fn infer(&self, sample: Array1<f64>) -> Result<DualOutput> {
        let req = InferenceRequest {
            sample,
            credential: Some(self.active.credential_token()),
            declared_domain: Some(self.active.domain_id.clone()),
        };
        infer(&req, self.model)
    }
}

/// One line of the evaluation result log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub task: String,
    pub domain: String,
    pub credential_id: String,
    pub label: usize,
    pub pred: usize,
    pub legal: bool,
}

pub fn write_result_log(path: &Path, records: &[ResultRecord]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    for rec in records {
        serde_json::to_writer(&mut writer, rec).map_err(|e| Error::Storage(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_result_log(path: &Path) -> Result<Vec<ResultRecord>> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(records)
}
