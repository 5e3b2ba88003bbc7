//! Dynamic authorization module: trainable projectors, prompt assembly, and
//! credential issuance.
//!
//! Three affine projectors turn frozen visual features into prompt tokens:
//! the image and domain projectors read the multi-scale feature, while the
//! encryption projector maps a domain's mean feature to its credential token
//! (the "domain key"). Prompts are fixed-order token sequences
//! `[credential, image, domain, class]`, one per class plus the unauthorized
//! slot. Credentials are held in an append-only store so issuance history is
//! auditable; re-issuing never overwrites.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{BackboneSpec, FeatureVector, MultiScaleFeature};
use crate::domains::DomainDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::training::Checkpoint;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Credential,
    Image,
    Domain,
    Class,
}

impl std::fmt::Display for TokenRole {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TokenRole::Credential => "credential",
            TokenRole::Image => "image",
            TokenRole::Domain => "domain",
            TokenRole::Class => "class",
        };
        f.write_str(s)
    }
}

/// A role-tagged prompt token of length `d_tok`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Token {
    role: TokenRole,
    values: Array1<f64>,
}

impl Token {
    pub fn new(role: TokenRole, values: Array1<f64>) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidToken(format!("non-finite {role} token")));
        }
        Ok(Self { role, values })
    }

    pub fn role(&self) -> TokenRole {
        self.role
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

/// Ordered token sequence `[credential, image, domain, class]` with the class
/// slot's index; index `N` denotes the unauthorized class.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    tokens: Vec<Token>,
    class_index: usize,
}

impl Prompt {
    pub fn new(
        credential: Token,
        image: Token,
        domain: Token,
        class: Token,
        class_index: usize,
    ) -> Result<Self> {
        let expected = [
            (TokenRole::Credential, &credential),
            (TokenRole::Image, &image),
            (TokenRole::Domain, &domain),
            (TokenRole::Class, &class),
        ];
        for (slot, (want, token)) in expected.iter().enumerate() {
            if token.role() != *want {
                return Err(Error::InvalidToken(format!(
                    "slot {slot} expects a {want} token, got {}",
                    token.role()
                )));
            }
        }
        Ok(Self {
            tokens: vec![credential, image, domain, class],
            class_index,
        })
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn class_index(&self) -> usize {
        self.class_index
    }

    /// Concatenates the tokens into the text encoder's input layout.
    pub fn flatten(&self) -> Array1<f64> {
        let total: usize = self.tokens.iter().map(Token::len).sum();
        let mut flat = Array1::zeros(total);
        let mut offset = 0;
        for token in &self.tokens {
            flat.slice_mut(ndarray::s![offset..offset + token.len()])
                .assign(token.values());
            offset += token.len();
        }
        flat
    }
}

/// Weights and biases of the three projectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectorParams {
    pub img_w: Array2<f64>,
    pub img_b: Array1<f64>,
    pub dom_w: Array2<f64>,
    pub dom_b: Array1<f64>,
    pub enc_w: Array2<f64>,
    pub enc_b: Array1<f64>,
}

impl ProjectorParams {
    /// Seeded Gaussian initialization (std 1/sqrt(fan-in) per tensor).
    pub fn init(spec: &BackboneSpec) -> Self {
        let d_ms = spec.multiscale_dim();
        let (img_w, img_b) = proj_init(spec.master_seed, "proj.img", spec.token_dim, d_ms);
        let (dom_w, dom_b) = proj_init(spec.master_seed, "proj.dom", spec.token_dim, d_ms);
        let (enc_w, enc_b) = proj_init(spec.master_seed, "proj.enc", spec.token_dim, spec.feature_dim);
        Self {
            img_w,
            img_b,
            dom_w,
            dom_b,
            enc_w,
            enc_b,
        }
    }

    /// Zero tensors with the same shapes; used as gradient accumulators.
    pub fn zeros_like(&self) -> Self {
        Self {
            img_w: Array2::zeros(self.img_w.raw_dim()),
            img_b: Array1::zeros(self.img_b.raw_dim()),
            dom_w: Array2::zeros(self.dom_w.raw_dim()),
            dom_b: Array1::zeros(self.dom_b.raw_dim()),
            enc_w: Array2::zeros(self.enc_w.raw_dim()),
            enc_b: Array1::zeros(self.enc_b.raw_dim()),
        }
    }

    /// Tensor views in a fixed order, for digests and generic iteration.
    pub fn tensors(&self) -> Vec<(&'static str, Vec<f64>)> {
        vec![
            ("img_w", self.img_w.iter().copied().collect()),
            ("img_b", self.img_b.iter().copied().collect()),
            ("dom_w", self.dom_w.iter().copied().collect()),
            ("dom_b", self.dom_b.iter().copied().collect()),
            ("enc_w", self.enc_w.iter().copied().collect()),
            ("enc_b", self.enc_b.iter().copied().collect()),
        ]
    }
}

fn proj_init(seed: u64, name: &str, rows: usize, cols: usize) -> (Array2<f64>, Array1<f64>) {
    let std = 1.0 / (cols as f64).sqrt();
    let mut wr = rng::stream(seed, &format!("{name}.w"));
    let w = rng::gaussian_mat(&mut wr, rows, cols, std);
    let mut br = rng::stream(seed, &format!("{name}.b"));
    let b = rng::gaussian_vec(&mut br, rows, std);
    (w, b)
}

fn affine(w: &Array2<f64>, b: &Array1<f64>, x: ArrayView1<f64>, what: &str) -> Result<Array1<f64>> {
    if x.len() != w.ncols() {
        return Err(Error::InvalidInput(format!(
            "{what}: input length {} != {}",
            x.len(),
            w.ncols()
        )));
    }
    Ok(w.dot(&x) + b)
}

/// `P_img`: multi-scale feature -> image token.
pub fn project_image_token(ms: &MultiScaleFeature, params: &ProjectorParams) -> Result<Token> {
    let out = affine(&params.img_w, &params.img_b, ms.values().view(), "image projector")?;
    Token::new(TokenRole::Image, out)
}

/// `P_dom`: multi-scale feature -> domain token.
pub fn project_domain_token(ms: &MultiScaleFeature, params: &ProjectorParams) -> Result<Token> {
    let out = affine(&params.dom_w, &params.dom_b, ms.values().view(), "domain projector")?;
    Token::new(TokenRole::Domain, out)
}

/// `P_enc`: a domain's mean feature -> its credential token.
pub fn derive_credential(domain_mean: &FeatureVector, params: &ProjectorParams) -> Result<Token> {
    let out = affine(
        &params.enc_w,
        &params.enc_b,
        domain_mean.values().view(),
        "encryption projector",
    )?;
    Token::new(TokenRole::Credential, out)
}

/// Frozen per-class embedding tokens (`N` task classes + the unauthorized
/// class), drawn once from the master seed.
pub fn class_table(spec: &BackboneSpec, n_classes: usize) -> Vec<Token> {
    let mut r = rng::stream(spec.master_seed, "class_table");
    (0..=n_classes)
        .map(|_| {
            Token::new(TokenRole::Class, rng::gaussian_vec(&mut r, spec.token_dim, 1.0))
                .expect("finite draw")
        })
        .collect()
}

/// Builds the per-class prompt list: prompt `k` is
/// `[credential, image, domain, class_table[k]]` with `class_index = k`.
pub fn assemble_prompts(
    credential: &Token,
    image_tok: &Token,
    domain_tok: &Token,
    class_table: &[Token],
) -> Result<Vec<Prompt>> {
    class_table
        .iter()
        .enumerate()
        .map(|(k, class)| {
            Prompt::new(
                credential.clone(),
                image_tok.clone(),
                domain_tok.clone(),
                class.clone(),
                k,
            )
        })
        .collect()
}

/// A persisted credential issuance. Immutable once stored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredentialRecord {
    pub domain_id: String,
    pub token: Vec<f64>,
    pub issued_at: String,
    pub reference_digest: String,
    pub checkpoint_digest: String,
}

impl CredentialRecord {
    pub fn credential_token(&self) -> Token {
        Token::new(TokenRole::Credential, Array1::from_vec(self.token.clone()))
            .expect("stored token is finite")
    }
}

/// Append-only credential store backed by a JSON array file.
/// Reads may happen concurrently; writes go through a single owner.
#[derive(Debug)]
pub struct CredentialStore {
    path: PathBuf,
    records: Vec<CredentialRecord>,
}

impl CredentialStore {
    /// Opens the store, creating an empty one if the file does not exist.
    pub fn open(path: &Path) -> Result<Self> {
        let records = if path.exists() {
            let data = fs::read_to_string(path).map_err(|e| Error::Storage(e.to_string()))?;
            if data.trim().is_empty() {
                Vec::new()
            } else {
                serde_json::from_str(&data).map_err(|e| Error::Storage(e.to_string()))?
            }
        } else {
            Vec::new()
        };
        Ok(Self {
            path: path.to_path_buf(),
            records,
        })
    }

    pub fn records(&self) -> &[CredentialRecord] {
        &self.records
    }

    /// Most recent record for a domain, if any.
    pub fn latest_for_domain(&self, domain_id: &str) -> Option<&CredentialRecord> {
        self.records.iter().rev().find(|r| r.domain_id == domain_id)
    }

    /// Appends a record and persists the full array.
    pub fn append(&mut self, record: CredentialRecord) -> Result<()> {
        self.records.push(record);
        let json = serde_json::to_string_pretty(&self.records)
            .map_err(|e| Error::Storage(e.to_string()))?;
        let tmp = self.path.with_extension("tmp");
        fs::write(&tmp, json).map_err(|e| Error::Storage(e.to_string()))?;
        fs::rename(&tmp, &self.path).map_err(|e| Error::Storage(e.to_string()))?;
        Ok(())
    }
}

/// Owner-side issuance: encodes the reference set, applies `P_enc` to its
/// feature mean, and appends the record. Never touches model parameters;
/// the stored checkpoint digest witnesses that.
pub fn issue_credential(
    reference: &DomainDataset,
    checkpoint: &Checkpoint,
    store: &mut CredentialStore,
) -> Result<CredentialRecord> {
    if reference.len() == 0 {
        return Err(Error::InvalidInput("empty reference set".into()));
    }
    let backbone = checkpoint.backbone();
    let (feats, _) = backbone.encode_image_batch(reference.samples().view())?;
    let mean = feats.mean_axis(ndarray::Axis(0)).expect("non-empty");

    let mut hasher = Sha256::new();
    for v in feats.iter() {
        hasher.update(v.to_le_bytes());
    }
    let reference_digest = hex::encode(hasher.finalize());

    let token = derive_credential(&FeatureVector::new(mean)?, &checkpoint.projectors)?;
    let record = CredentialRecord {
        domain_id: reference.domain_id().to_string(),
        token: token.values().to_vec(),
        issued_at: chrono::Utc::now().to_rfc3339(),
        reference_digest,
        checkpoint_digest: checkpoint.digest.clone(),
    };
    store.append(record.clone())?;
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use ndarray::Array1;
    use proptest::prelude::*;

    fn tiny_spec() -> BackboneSpec {
        BackboneSpec {
            master_seed: 9,
            input_dim: 6,
            hidden_dim: 10,
            feature_dim: 8,
            token_dim: 5,
            prompt_token_count: 4,
        }
    }

    fn ms_of(spec: &BackboneSpec, seed: u64) -> MultiScaleFeature {
        let mut r = rng::stream(seed, "ms");
        MultiScaleFeature::new(rng::gaussian_vec(&mut r, spec.multiscale_dim(), 1.0)).unwrap()
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_token() {
        let spec = tiny_spec();
        let mut params = ProjectorParams::init(&spec);
        params.img_b.fill(0.0);
        params.enc_b.fill(0.0);
        let ms = MultiScaleFeature::new(Array1::zeros(spec.multiscale_dim())).unwrap();
        let tok = project_image_token(&ms, &params).unwrap();
        assert!(tok.values().iter().all(|v| *v == 0.0));

        let zero_mean = FeatureVector::new(Array1::zeros(spec.feature_dim)).unwrap();
        let cred = derive_credential(&zero_mean, &params).unwrap();
        assert!(cred.values().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_block_copies_a_subvector() {
        let spec = tiny_spec();
        let mut params = ProjectorParams::init(&spec);
        params.dom_w.fill(0.0);
        params.dom_b.fill(0.0);
        for i in 0..spec.token_dim {
            params.dom_w[[i, i]] = 1.0;
        }
        let ms = ms_of(&spec, 3);
        let tok = project_domain_token(&ms, &params).unwrap();
        for i in 0..spec.token_dim {
            assert_eq!(tok.values()[i], ms.values()[i]);
        }
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        // d(sum of token)/dW[i][j] == ms[j]; checked against central differences.
        let spec = tiny_spec();
        let params = ProjectorParams::init(&spec);
        let ms = ms_of(&spec, 4);
        let h = 1e-5;
        for i in 0..2 {
            for j in 0..3 {
                let mut plus = params.clone();
                plus.img_w[[i, j]] += h;
                let mut minus = params.clone();
                minus.img_w[[i, j]] -= h;
                let f = |p: &ProjectorParams| {
                    project_image_token(&ms, p).unwrap().values().sum()
                };
                let fd = (f(&plus) - f(&minus)) / (2.0 * h);
                let analytic = ms.values()[j];
                let denom = analytic.abs().max(fd.abs()).max(1e-6);
                assert!(((analytic - fd).abs() / denom) <= 1e-4);
            }
        }
    }

    #[test]
    fn credentials_separate_distinct_domain_means() {
        let spec = tiny_spec();
        let params = ProjectorParams::init(&spec);
        let mut r = rng::stream(12, "means");
        let m1 = FeatureVector::new(rng::gaussian_vec(&mut r, spec.feature_dim, 1.0)).unwrap();
        let m2 = FeatureVector::new(m1.values() + 3.0).unwrap();
        let c1 = derive_credential(&m1, &params).unwrap();
        let c1_again = derive_credential(&m1, &params).unwrap();
        let c2 = derive_credential(&m2, &params).unwrap();
        assert_eq!(c1, c1_again);
        let max_gap = c1
            .values()
            .iter()
            .zip(c2.values().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_gap > 1e-6);
    }

    #[test]
    fn credential_ignores_other_projectors() {
        let spec = tiny_spec();
        let params = ProjectorParams::init(&spec);
        let mut tweaked = params.clone();
        tweaked.img_w += 0.5;
        tweaked.dom_b += 1.0;
        let mean = FeatureVector::new(Array1::from_elem(spec.feature_dim, 0.3)).unwrap();
        assert_eq!(
            derive_credential(&mean, &params).unwrap(),
            derive_credential(&mean, &tweaked).unwrap()
        );
    }

    #[test]
    fn assemble_prompts_structure() {
        let spec = tiny_spec();
        let params = ProjectorParams::init(&spec);
        let ms = ms_of(&spec, 6);
        let img = project_image_token(&ms, &params).unwrap();
        let dom = project_domain_token(&ms, &params).unwrap();
        let mean = FeatureVector::new(Array1::from_elem(spec.feature_dim, 0.1)).unwrap();
        let cred = derive_credential(&mean, &params).unwrap();
        let table = class_table(&spec, 2);
        assert_eq!(table.len(), 3);

        let prompts = assemble_prompts(&cred, &img, &dom, &table).unwrap();
        assert_eq!(prompts.len(), 3);
        for (k, p) in prompts.iter().enumerate() {
            assert_eq!(p.class_index(), k);
            assert_eq!(p.tokens()[0], cred);
            assert_eq!(p.tokens()[1], img);
            assert_eq!(p.tokens()[2], dom);
            assert_eq!(p.tokens()[3], table[k]);
        }

        // swapping the credential changes only slot 0
        let other_mean = FeatureVector::new(Array1::from_elem(spec.feature_dim, -0.4)).unwrap();
        let other_cred = derive_credential(&other_mean, &params).unwrap();
        let swapped = assemble_prompts(&other_cred, &img, &dom, &table).unwrap();
        for (p, q) in prompts.iter().zip(swapped.iter()) {
            assert_ne!(p.tokens()[0], q.tokens()[0]);
            assert_eq!(p.tokens()[1..], q.tokens()[1..]);
        }
    }

    #[test]
    fn store_is_append_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("creds.json");
        let mut store = CredentialStore::open(&path).unwrap();
        for i in 0..2 {
            store
                .append(CredentialRecord {
                    domain_id: "d".into(),
                    token: vec![i as f64],
                    issued_at: "2026-01-01T00:00:00Z".into(),
                    reference_digest: "ab".into(),
                    checkpoint_digest: "cd".into(),
                })
                .unwrap();
        }
        let reopened = CredentialStore::open(&path).unwrap();
        assert_eq!(reopened.records().len(), 2);
        assert_eq!(reopened.latest_for_domain("d").unwrap().token, vec![1.0]);
        assert!(reopened.latest_for_domain("missing").is_none());
    }

    proptest! {
        /// Role safety: any role mismatch in any slot is rejected.
        #[test]
        fn prompt_rejects_role_mismatch(
            roles in proptest::array::uniform4(0usize..4),
        ) {
            let want = [TokenRole::Credential, TokenRole::Image, TokenRole::Domain, TokenRole::Class];
            let all = [TokenRole::Credential, TokenRole::Image, TokenRole::Domain, TokenRole::Class];
            let mk = |role: TokenRole| Token::new(role, Array1::zeros(4)).unwrap();
            let picked: Vec<TokenRole> = roles.iter().map(|&i| all[i]).collect();
            let result = Prompt::new(mk(picked[0]), mk(picked[1]), mk(picked[2]), mk(picked[3]), 0);
            let matches = picked.iter().zip(want.iter()).all(|(a, b)| a == b);
            prop_assert_eq!(result.is_ok(), matches);
        }

        /// Affine linearity: project(ax) - project(0) == a * (project(x) - project(0)).
        #[test]
        fn projector_linearity(alpha in -3.0f64..3.0, seed in 0u64..50) {
            let spec = tiny_spec();
            let params = ProjectorParams::init(&spec);
            let ms = ms_of(&spec, seed);
            let zero = MultiScaleFeature::new(Array1::zeros(spec.multiscale_dim())).unwrap();
            let scaled = MultiScaleFeature::new(ms.values() * alpha).unwrap();
            let p0 = project_image_token(&zero, &params).unwrap();
            let px = project_image_token(&ms, &params).unwrap();
            let pax = project_image_token(&scaled, &params).unwrap();
            for i in 0..spec.token_dim {
                let lhs = pax.values()[i] - p0.values()[i];
                let rhs = alpha * (px.values()[i] - p0.values()[i]);
                assert_relative_eq!(lhs, rhs, epsilon = 1e-9, max_relative = 1e-9);
            }
        }
    }
}
