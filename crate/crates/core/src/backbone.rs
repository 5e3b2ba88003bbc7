//! Frozen visual and text encoders.
//!
//! Both encoders are seeded two-layer perceptrons (tanh hidden layer) that
//! stand in for a large pretrained vision-language backbone: only the joint
//! similarity geometry matters here, not the capacity. Parameters are drawn
//! once from named streams of the master seed and never change afterwards;
//! [`backbone_digest`] pins that frozen state so training and credential
//! issuance can prove they left it untouched.

use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use crate::tokens::Prompt;

pub const DEFAULT_INPUT_DIM: usize = 32;
pub const DEFAULT_HIDDEN_DIM: usize = 128;
pub const DEFAULT_FEATURE_DIM: usize = 64;
pub const DEFAULT_TOKEN_DIM: usize = 64;
/// Prompt layout is [credential, image, domain, class].
pub const PROMPT_TOKEN_COUNT: usize = 4;

/// Everything needed to re-instantiate the frozen encoders bit-for-bit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub master_seed: u64,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Joint feature dimension `d` shared by visual and textual features.
    pub feature_dim: usize,
    /// Token dimension `d_tok` of every prompt slot.
    pub token_dim: usize,
    pub prompt_token_count: usize,
}

impl BackboneSpec {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            input_dim: DEFAULT_INPUT_DIM,
            hidden_dim: DEFAULT_HIDDEN_DIM,
            feature_dim: DEFAULT_FEATURE_DIM,
            token_dim: DEFAULT_TOKEN_DIM,
            prompt_token_count: PROMPT_TOKEN_COUNT,
        }
    }

    pub fn with_input_dim(master_seed: u64, input_dim: usize) -> Self {
        Self {
            input_dim,
            ..Self::new(master_seed)
        }
    }

    /// Width of the multi-scale feature: hidden activation + final feature.
    pub fn multiscale_dim(&self) -> usize {
        self.hidden_dim + self.feature_dim
    }

    /// Flattened prompt length fed to the text encoder.
    pub fn text_input_dim(&self) -> usize {
        self.prompt_token_count * self.token_dim
    }
}

/// A finite real vector in the joint feature space (length `d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    values: Array1<f64>,
}

impl FeatureVector {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature entry".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Concatenation of the exposed encoder scales: `[hidden activation, f_v]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFeature {
    values: Array1<f64>,
}

impl MultiScaleFeature {
    pub fn new(values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite multi-scale entry".into()));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }
}

/// Hidden activations kept around for the text-encoder backward pass.
pub struct TextForward {
    pub hidden: Array2<f64>,
    pub features: Array2<f64>,
}

/// The instantiated frozen encoders. Immutable after construction; encode
/// calls never mutate state, so shared references are safe across workers.
#[derive(Debug, Clone)]
pub struct Backbone {
    spec: BackboneSpec,
    vis_w1: Array2<f64>,
    vis_b1: Array1<f64>,
    vis_w2: Array2<f64>,
    vis_b2: Array1<f64>,
    txt_w1: Array2<f64>,
    txt_b1: Array1<f64>,
    txt_w2: Array2<f64>,
    txt_b2: Array1<f64>,
    digest: String,
}

fn layer_init(seed: u64, name: &str, rows: usize, cols: usize) -> (Array2<f64>, Array1<f64>) {
    let std = 1.0 / (cols as f64).sqrt();
    let mut wr = rng::stream(seed, &format!("{name}.w"));
    let w = rng::gaussian_mat(&mut wr, rows, cols, std);
    let mut br = rng::stream(seed, &format!("{name}.b"));
    let b = rng::gaussian_vec(&mut br, rows, std);
    (w, b)
}

impl Backbone {
    pub fn new(spec: &BackboneSpec) -> Self {
        let (vis_w1, vis_b1) = layer_init(spec.master_seed, "backbone.vis1", spec.hidden_dim, spec.input_dim);
        let (vis_w2, vis_b2) = layer_init(spec.master_seed, "backbone.vis2", spec.feature_dim, spec.hidden_dim);
        let (txt_w1, txt_b1) = layer_init(spec.master_seed, "backbone.txt1", spec.hidden_dim, spec.text_input_dim());
        let (txt_w2, txt_b2) = layer_init(spec.master_seed, "backbone.txt2", spec.feature_dim, spec.hidden_dim);
        let mut backbone = Self {
            spec: spec.clone(),
            vis_w1,
            vis_b1,
            vis_w2,
            vis_b2,
            txt_w1,
            txt_b1,
            txt_w2,
            txt_b2,
            digest: String::new(),
        };
        backbone.digest = backbone.compute_digest();
        backbone
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    /// Digest over all frozen parameters in canonical order.
    pub fn digest(&self) -> &str {
        &self.digest
    }

    fn compute_digest(&self) -> String {
        let mut hasher = Sha256::new();
        for dim in [
            self.spec.master_seed,
            self.spec.input_dim as u64,
            self.spec.hidden_dim as u64,
            self.spec.feature_dim as u64,
            self.spec.token_dim as u64,
            self.spec.prompt_token_count as u64,
        ] {
            hasher.update(dim.to_le_bytes());
        }
        for tensor in [&self.vis_w1, &self.vis_w2, &self.txt_w1, &self.txt_w2] {
            for v in tensor.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        for bias in [&self.vis_b1, &self.vis_b2, &self.txt_b1, &self.txt_b2] {
            for v in bias.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Visual encoding: final feature `f_v` plus the two-scale concatenation.
    pub fn encode_image(&self, x: ArrayView1<f64>) -> Result<(FeatureVector, MultiScaleFeature)> {
        if x.len() != self.spec.input_dim {
            return Err(Error::InvalidInput(format!(
                "sample length {} != input_dim {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample entry".into()));
        }
        let hidden = (self.vis_w1.dot(&x) + &self.vis_b1).mapv(f64::tanh);
        let feat = self.vis_w2.dot(&hidden) + &self.vis_b2;
        let ms = concatenate![Axis(0), hidden, feat];
        Ok((FeatureVector::new(feat)?, MultiScaleFeature::new(ms)?))
    }

    /// Batched visual encoding; rows are samples. Returns `(F, MS)`.
    pub fn encode_image_batch(&self, xs: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        if xs.ncols() != self.spec.input_dim {
            return Err(Error::InvalidInput(format!(
                "sample width {} != input_dim {}",
                xs.ncols(),
                self.spec.input_dim
            )));
        }
        let hidden = (xs.dot(&self.vis_w1.t()) + &self.vis_b1).mapv(f64::tanh);
        let feats = hidden.dot(&self.vis_w2.t()) + &self.vis_b2;
        let ms = concatenate![Axis(1), hidden, feats];
        Ok((feats, ms))
    }

    /// Textual encoding of one assembled prompt.
    pub fn encode_text(&self, prompt: &Prompt) -> Result<FeatureVector> {
        let flat = self.validated_flat_prompt(prompt)?;
        let hidden = (self.txt_w1.dot(&flat) + &self.txt_b1).mapv(f64::tanh);
        let feat = self.txt_w2.dot(&hidden) + &self.txt_b2;
        FeatureVector::new(feat)
    }

    fn validated_flat_prompt(&self, prompt: &Prompt) -> Result<Array1<f64>> {
        if prompt.tokens().len() != self.spec.prompt_token_count {
            return Err(Error::InvalidPrompt(format!(
                "prompt has {} tokens, expected {}",
                prompt.tokens().len(),
                self.spec.prompt_token_count
            )));
        }
        for (slot, token) in prompt.tokens().iter().enumerate() {
            if token.len() != self.spec.token_dim {
                return Err(Error::InvalidPrompt(format!(
                    "token in slot {slot} has length {}, expected {}",
                    token.len(),
                    self.spec.token_dim
                )));
            }
        }
        Ok(prompt.flatten())
    }

    /// Batched text encoding over pre-flattened prompt rows.
    pub fn encode_text_batch(&self, prompts: ArrayView2<f64>) -> Result<TextForward> {
        if prompts.ncols() != self.spec.text_input_dim() {
            return Err(Error::InvalidPrompt(format!(
                "flattened prompt width {} != {}",
                prompts.ncols(),
                self.spec.text_input_dim()
            )));
        }
        let hidden = (prompts.dot(&self.txt_w1.t()) + &self.txt_b1).mapv(f64::tanh);
        let features = hidden.dot(&self.txt_w2.t()) + &self.txt_b2;
        Ok(TextForward { hidden, features })
    }

    /// Backward pass through the frozen text encoder: maps feature-space
    /// gradients to flattened-prompt gradients, row for row.
    pub fn text_backward(&self, fwd: &TextForward, d_features: ArrayView2<f64>) -> Array2<f64> {
        let d_hidden = d_features.dot(&self.txt_w2);
        let d_pre = d_hidden * fwd.hidden.mapv(|h| 1.0 - h * h);
        d_pre.dot(&self.txt_w1)
    }

    /// Gradient of one text feature w.r.t. the flattened prompt, contracted
    /// against `d_feature` (single row convenience over [`Self::text_backward`]).
    pub fn text_vjp(&self, prompt: &Prompt, d_feature: ArrayView1<f64>) -> Result<Array1<f64>> {
        let flat = self.validated_flat_prompt(prompt)?;
        let rows = flat.insert_axis(ndarray::Axis(0));
        let fwd = self.encode_text_batch(rows.view())?;
        let grad = self.text_backward(&fwd, d_feature.insert_axis(ndarray::Axis(0)));
        Ok(grad.row(0).to_owned())
    }
}

/// Stable digest of the frozen parameters induced by `spec`.
pub fn backbone_digest(spec: &BackboneSpec) -> String {
    Backbone::new(spec).digest().to_string()
}

/// One record of an externally computed feature file.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub domain_id: String,
    pub label: usize,
    pub feature: FeatureVector,
}

#[derive(Serialize, Deserialize)]
struct FeatureLine {
    domain: String,
    label: i64,
    feature: Vec<f64>,
}

/// Reads a JSON-lines feature file (`{"domain", "label", "feature"}`),
/// checking every record against the spec's feature dimension.
pub fn ingest_precomputed_features(path: &Path, spec: &BackboneSpec) -> Result<Vec<FeatureRecord>> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: FeatureLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        if parsed.label < 0 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("negative label {}", parsed.label),
            });
        }
        if parsed.feature.len() != spec.feature_dim {
            return Err(Error::InvalidInput(format!(
                "record {} has feature length {}, expected {}",
                idx + 1,
                parsed.feature.len(),
                spec.feature_dim
            )));
        }
        records.push(FeatureRecord {
            domain_id: parsed.domain,
            label: parsed.label as usize,
            feature: FeatureVector::new(Array1::from_vec(parsed.feature))?,
        });
    }
    Ok(records)
}

/// Writes records in the same JSON-lines layout `ingest` reads.
pub fn write_feature_file(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let file = File::create(path)?;
    let mut writer = BufWriter::new(file);
    for rec in records {
        let line = FeatureLine {
            domain: rec.domain_id.clone(),
            label: rec.label as i64,
            feature: rec.feature.values().to_vec(),
        };
        serde_json::to_writer(&mut writer, &line).map_err(|e| Error::Storage(e.to_string()))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::{Token, TokenRole};
    use approx::assert_relative_eq;
    use ndarray::Array1;

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            master_seed: 11,
            input_dim: 6,
            hidden_dim: 10,
            feature_dim: 8,
            token_dim: 5,
            prompt_token_count: 4,
        }
    }

    fn random_prompt(spec: &BackboneSpec, seed: u64) -> Prompt {
        let mut r = rng::stream(seed, "prompt");
        let tok = |role, r: &mut rand_chacha::ChaCha12Rng| {
            Token::new(role, rng::gaussian_vec(r, spec.token_dim, 1.0)).unwrap()
        };
        Prompt::new(
            tok(TokenRole::Credential, &mut r),
            tok(TokenRole::Image, &mut r),
            tok(TokenRole::Domain, &mut r),
            tok(TokenRole::Class, &mut r),
            0,
        )
        .unwrap()
    }

    #[test]
    fn encode_image_is_pure_and_deterministic() {
        let spec = BackboneSpec::new(3);
        let bb = Backbone::new(&spec);
        let x = Array1::zeros(spec.input_dim);
        let (f1, ms1) = bb.encode_image(x.view()).unwrap();
        let (f2, ms2) = bb.encode_image(x.view()).unwrap();
        assert_eq!(f1, f2);
        assert_eq!(ms1, ms2);
        // zero input follows the bias path exactly
        let hidden = bb.vis_b1.mapv(f64::tanh);
        let bias_path = bb.vis_w2.dot(&hidden) + &bb.vis_b2;
        assert_eq!(f1.values(), &bias_path);
    }

    #[test]
    fn multiscale_is_hidden_then_final() {
        let spec = tiny_spec();
        let bb = Backbone::new(&spec);
        let x = Array1::from_iter((0..spec.input_dim).map(|i| i as f64 * 0.1));
        let (f, ms) = bb.encode_image(x.view()).unwrap();
        assert_eq!(ms.len(), spec.multiscale_dim());
        let tail = ms.values().slice(ndarray::s![spec.hidden_dim..]).to_owned();
        assert_eq!(&tail, f.values());
    }

    /// Independent straight-line re-evaluation of the two-layer map.
    fn straight_line_encode(bb: &Backbone, x: &[f64]) -> Vec<f64> {
        let spec = bb.spec();
        let mut hidden = vec![0.0; spec.hidden_dim];
        for (i, h) in hidden.iter_mut().enumerate() {
            let mut acc = bb.vis_b1[i];
            for (j, xv) in x.iter().enumerate() {
                acc += bb.vis_w1[[i, j]] * xv;
            }
            *h = acc.tanh();
        }
        let mut out = vec![0.0; spec.feature_dim];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = bb.vis_b2[i];
            for (j, hv) in hidden.iter().enumerate() {
                acc += bb.vis_w2[[i, j]] * hv;
            }
            *o = acc;
        }
        out
    }

    #[test]
    fn encode_image_matches_straight_line_oracle() {
        let spec = BackboneSpec::new(21);
        let bb = Backbone::new(&spec);
        let mut r = rng::stream(100, "oracle-inputs");
        for _ in 0..10 {
            let x = rng::gaussian_vec(&mut r, spec.input_dim, 1.0);
            let (f, _) = bb.encode_image(x.view()).unwrap();
            let oracle = straight_line_encode(&bb, x.as_slice().unwrap());
            for (a, b) in f.values().iter().zip(oracle.iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn encode_image_batch_matches_single() {
        let spec = tiny_spec();
        let bb = Backbone::new(&spec);
        let mut r = rng::stream(5, "batch");
        let xs = rng::gaussian_mat(&mut r, 7, spec.input_dim, 1.0);
        let (fb, msb) = bb.encode_image_batch(xs.view()).unwrap();
        for i in 0..7 {
            let (f, ms) = bb.encode_image(xs.row(i)).unwrap();
            for (a, b) in fb.row(i).iter().zip(f.values().iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
            }
            for (a, b) in msb.row(i).iter().zip(ms.values().iter()) {
                assert_relative_eq!(a, b, max_relative = 1e-12, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let spec = tiny_spec();
        let bb = Backbone::new(&spec);
        let x = Array1::zeros(spec.input_dim + 1);
        assert!(matches!(bb.encode_image(x.view()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn identical_prompts_encode_identically_and_zero_prompt_is_finite() {
        let spec = tiny_spec();
        let bb = Backbone::new(&spec);
        let p = random_prompt(&spec, 8);
        let f1 = bb.encode_text(&p).unwrap();
        let f2 = bb.encode_text(&p).unwrap();
        assert_eq!(f1, f2);

        let zero = Token::new(TokenRole::Credential, Array1::zeros(spec.token_dim)).unwrap();
        let zp = Prompt::new(
            zero.clone(),
            Token::new(TokenRole::Image, Array1::zeros(spec.token_dim)).unwrap(),
            Token::new(TokenRole::Domain, Array1::zeros(spec.token_dim)).unwrap(),
            Token::new(TokenRole::Class, Array1::zeros(spec.token_dim)).unwrap(),
            0,
        )
        .unwrap();
        let fz = bb.encode_text(&zp).unwrap();
        let hidden = bb.txt_b1.mapv(f64::tanh);
        let bias_path = bb.txt_w2.dot(&hidden) + &bb.txt_b2;
        assert_eq!(fz.values(), &bias_path);
    }

    #[test]
    fn wrong_token_length_is_invalid_prompt() {
        let spec = tiny_spec();
        let bb = Backbone::new(&spec);
        let bad = Prompt::new(
            Token::new(TokenRole::Credential, Array1::zeros(spec.token_dim + 1)).unwrap(),
            Token::new(TokenRole::Image, Array1::zeros(spec.token_dim)).unwrap(),
            Token::new(TokenRole::Domain, Array1::zeros(spec.token_dim)).unwrap(),
            Token::new(TokenRole::Class, Array1::zeros(spec.token_dim)).unwrap(),
            0,
        )
        .unwrap();
        assert!(matches!(bb.encode_text(&bad), Err(Error::InvalidPrompt(_))));
    }

    #[test]
    fn text_gradient_matches_central_differences() {
        let spec = tiny_spec();
        let bb = Backbone::new(&spec);
        let p = random_prompt(&spec, 77);
        // scalar function: v . encode_text(prompt)
        let mut r = rng::stream(78, "probe");
        let v = rng::gaussian_vec(&mut r, spec.feature_dim, 1.0);
        let analytic = bb.text_vjp(&p, v.view()).unwrap();

        let flat = p.flatten();
        let h = 1e-5;
        let mut max_rel: f64 = 0.0;
        for j in 0..flat.len() {
            let eval = |delta: f64| {
                let mut pf = flat.clone();
                pf[j] += delta;
                let rows = pf.insert_axis(ndarray::Axis(0));
                let fwd = bb.encode_text_batch(rows.view()).unwrap();
                fwd.features.row(0).dot(&v)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = analytic[j].abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max((analytic[j] - fd).abs() / denom);
        }
        assert!(max_rel <= 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn digest_depends_on_seed_only() {
        let a = backbone_digest(&BackboneSpec::new(1));
        let a2 = backbone_digest(&BackboneSpec::new(1));
        let b = backbone_digest(&BackboneSpec::new(2));
        assert_eq!(a, a2);
        assert_ne!(a, b);
    }

    #[test]
    fn feature_file_round_trip_and_errors() {
        let spec = tiny_spec();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("feats.jsonl");

        // empty file -> empty collection
        std::fs::write(&path, "").unwrap();
        assert!(ingest_precomputed_features(&path, &spec).unwrap().is_empty());

        let records: Vec<FeatureRecord> = (0..3)
            .map(|i| FeatureRecord {
                domain_id: format!("dom{i}"),
                label: i,
                feature: FeatureVector::new(Array1::from_elem(spec.feature_dim, i as f64)).unwrap(),
            })
            .collect();
        write_feature_file(&path, &records).unwrap();
        let back = ingest_precomputed_features(&path, &spec).unwrap();
        assert_eq!(back, records);

        // wrong dimension fails at that record's index
        let mut lines: Vec<String> = std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .map(String::from)
            .collect();
        lines[1] = r#"{"domain":"dom1","label":1,"feature":[0.0,1.0]}"#.into();
        std::fs::write(&path, lines.join("\n")).unwrap();
        match ingest_precomputed_features(&path, &spec) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("record 2"), "{msg}"),
            other => panic!("expected InvalidInput, got {other:?}"),
        }

        // malformed JSON reports the line number
        std::fs::write(&path, "not json\n").unwrap();
        match ingest_precomputed_features(&path, &spec) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected Parse, got {other:?}"),
        }
    }
}
