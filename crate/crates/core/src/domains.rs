//! Synthetic multi-domain data, style-perturbation augmentations, and
//! watermark embedding.
//!
//! Domains share a label space: class prototypes are drawn once per
//! experiment seed, and each domain applies its own affine style transform
//! (per-coordinate scale and shift) plus Gaussian noise. Extended domains are
//! produced by composing randomly drawn augmentation operators over the
//! authorized data, which keeps the perturbations close to the style-shift
//! family the domains themselves use.
//!
//! The fourteen image operators are reinterpreted for feature vectors:
//! photometric ops become per-coordinate affine rescalings, geometric ops
//! become linear maps on fixed coordinate pairs, and the remaining ops are
//! rank or range remappings. Internal structure (coordinate pairings,
//! direction patterns) is derived from fixed op-name streams, so every
//! operator is a pure function of `(name, magnitude, input)`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;

/// Standard deviation of class prototypes in input space.
const PROTOTYPE_STD: f64 = 0.55;
/// Per-coordinate Gaussian sample noise.
const SAMPLE_NOISE_STD: f64 = 0.1;
/// Domain style scale range.
const STYLE_SCALE: (f64, f64) = (0.5, 1.5);
/// Domain style shift range.
const STYLE_SHIFT: (f64, f64) = (-0.5, 0.5);
/// Seed namespace for augmentation-internal structure constants.
const AUG_STRUCTURE_SEED: u64 = 0xA0D1_F0FF;

/// Samples and labels for one domain over a shared label space.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDataset {
    domain_id: String,
    samples: Array2<f64>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl DomainDataset {
    pub fn new(
        domain_id: impl Into<String>,
        samples: Array2<f64>,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        if samples.nrows() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} samples but {} labels",
                samples.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::InvalidInput(format!(
                "label {bad} out of range for {n_classes} classes"
            )));
        }
        if !samples.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite sample entry".into()));
        }
        Ok(Self {
            domain_id: domain_id.into(),
            samples,
            labels,
            n_classes,
        })
    }

    pub fn domain_id(&self) -> &str {
        &self.domain_id
    }

    pub fn samples(&self) -> &Array2<f64> {
        &self.samples
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.samples.ncols()
    }

    /// Label-stratified split: the first `train_per_class` samples of each
    /// class go to the first set, the rest to the second. Order-preserving.
    pub fn split_per_class(&self, train_per_class: usize) -> (DomainDataset, DomainDataset) {
        let mut counts = vec![0usize; self.n_classes];
        let mut train_rows = Vec::new();
        let mut eval_rows = Vec::new();
        for (i, &label) in self.labels.iter().enumerate() {
            if counts[label] < train_per_class {
                train_rows.push(i);
            } else {
                eval_rows.push(i);
            }
            counts[label] += 1;
        }
        (self.subset(&train_rows), self.subset(&eval_rows))
    }

    fn subset(&self, rows: &[usize]) -> DomainDataset {
        let samples = self.samples.select(Axis(0), rows);
        let labels = rows.iter().map(|&i| self.labels[i]).collect();
        DomainDataset {
            domain_id: self.domain_id.clone(),
            samples,
            labels,
            n_classes: self.n_classes,
        }
    }

    /// Writes the JSON-lines dataset format `{"domain", "label", "x"}`.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path)?;
        let mut writer = BufWriter::new(file);
        for (i, &label) in self.labels.iter().enumerate() {
            let line = SampleLine {
                domain: self.domain_id.clone(),
                label: label as i64,
                x: self.samples.row(i).to_vec(),
            };
            serde_json::to_writer(&mut writer, &line).map_err(|e| Error::Storage(e.to_string()))?;
            writer.write_all(b"\n")?;
        }
        writer.flush()?;
        Ok(())
    }

    /// Reads a JSON-lines dataset. When `n_classes` is `None` it is inferred
    /// as `max label + 1`.
    pub fn read_jsonl(path: &Path, n_classes: Option<usize>) -> Result<DomainDataset> {
        let file = File::open(path)?;
        let reader = BufReader::new(file);
        let mut domain_id: Option<String> = None;
        let mut labels = Vec::new();
        let mut rows: Vec<f64> = Vec::new();
        let mut width = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let parsed: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
            if parsed.label < 0 {
                return Err(Error::Parse {
                    line: idx + 1,
                    message: format!("negative label {}", parsed.label),
                });
            }
            match &domain_id {
                None => {
                    domain_id = Some(parsed.domain.clone());
                    width = parsed.x.len();
                }
                Some(d) => {
                    if *d != parsed.domain {
                        return Err(Error::Parse {
                            line: idx + 1,
                            message: format!("mixed domains {d:?} and {:?}", parsed.domain),
                        });
                    }
                    if parsed.x.len() != width {
                        return Err(Error::Parse {
                            line: idx + 1,
                            message: format!("sample width {} != {}", parsed.x.len(), width),
                        });
                    }
                }
            }
            labels.push(parsed.label as usize);
            rows.extend_from_slice(&parsed.x);
        }
        let domain_id =
            domain_id.ok_or_else(|| Error::InvalidInput("empty dataset file".into()))?;
        let n = labels.len();
        let samples = Array2::from_shape_vec((n, width), rows)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let n_classes = n_classes.unwrap_or_else(|| labels.iter().copied().max().unwrap_or(0) + 1);
        DomainDataset::new(domain_id, samples, labels, n_classes)
    }
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    domain: String,
    label: i64,
    x: Vec<f64>,
}

/// Generates `n_domains` datasets over a shared label space. Class prototypes
/// are common; each domain applies its own seeded affine style transform and
/// adds Gaussian noise.
pub fn generate_synthetic_domains(
    n_domains: usize,
    n_classes: usize,
    per_class: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    generate_synthetic_domains_dim(n_domains, n_classes, per_class, seed, 32)
}

/// As [`generate_synthetic_domains`] with an explicit input dimension.
pub fn generate_synthetic_domains_dim(
    n_domains: usize,
    n_classes: usize,
    per_class: usize,
    seed: u64,
    input_dim: usize,
) -> Result<Vec<DomainDataset>> {
    if n_domains < 2 || n_classes < 2 || per_class < 1 {
        return Err(Error::InvalidInput(format!(
            "need n_domains >= 2, classes >= 2, per_class >= 1; got ({n_domains}, {n_classes}, {per_class})"
        )));
    }
    let mut proto_rng = rng::stream(seed, "prototypes");
    let prototypes = rng::gaussian_mat(&mut proto_rng, n_classes, input_dim, PROTOTYPE_STD);

    let mut domains = Vec::with_capacity(n_domains);
    for j in 0..n_domains {
        let mut style_rng = rng::stream(seed, &format!("style.{j}"));
        let scale = rng::uniform_vec(&mut style_rng, input_dim, STYLE_SCALE.0, STYLE_SCALE.1);
        let shift = rng::uniform_vec(&mut style_rng, input_dim, STYLE_SHIFT.0, STYLE_SHIFT.1);
        let mut noise_rng = rng::stream(seed, &format!("noise.{j}"));

        let count = n_classes * per_class;
        let mut samples = Array2::zeros((count, input_dim));
        let mut labels = Vec::with_capacity(count);
        let mut row = 0;
        for k in 0..n_classes {
            let styled = &prototypes.row(k).to_owned() * &scale + &shift;
            for _ in 0..per_class {
                let noise = rng::gaussian_vec(&mut noise_rng, input_dim, SAMPLE_NOISE_STD);
                samples.row_mut(row).assign(&(&styled + &noise));
                labels.push(k);
                row += 1;
            }
        }
        domains.push(DomainDataset::new(format!("syn{j}"), samples, labels, n_classes)?);
    }
    Ok(domains)
}

/// The fourteen augmentation operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AugKind {
    AutoContrast,
    Brightness,
    Color,
    Contrast,
    Equalize,
    Identity,
    Posterize,
    Rotate,
    Sharpness,
    ShearX,
    ShearY,
    Solarize,
    TranslateX,
    TranslateY,
}

pub const ALL_AUG_KINDS: [AugKind; 14] = [
    AugKind::AutoContrast,
    AugKind::Brightness,
    AugKind::Color,
    AugKind::Contrast,
    AugKind::Equalize,
    AugKind::Identity,
    AugKind::Posterize,
    AugKind::Rotate,
    AugKind::Sharpness,
    AugKind::ShearX,
    AugKind::ShearY,
    AugKind::Solarize,
    AugKind::TranslateX,
    AugKind::TranslateY,
];

impl AugKind {
    pub fn name(&self) -> &'static str {
        match self {
            AugKind::AutoContrast => "AutoContrast",
            AugKind::Brightness => "Brightness",
            AugKind::Color => "Color",
            AugKind::Contrast => "Contrast",
            AugKind::Equalize => "Equalize",
            AugKind::Identity => "Identity",
            AugKind::Posterize => "Posterize",
            AugKind::Rotate => "Rotate",
            AugKind::Sharpness => "Sharpness",
            AugKind::ShearX => "ShearX",
            AugKind::ShearY => "ShearY",
            AugKind::Solarize => "Solarize",
            AugKind::TranslateX => "TranslateX",
            AugKind::TranslateY => "TranslateY",
        }
    }

    pub fn from_name(name: &str) -> Result<AugKind> {
        ALL_AUG_KINDS
            .iter()
            .copied()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::InvalidInput(format!("unknown augmentation op {name:?}")))
    }

    /// Geometric ops admit signed magnitudes (their inverses); the rest are
    /// defined on [0, 1] only.
    fn signed(&self) -> bool {
        matches!(
            self,
            AugKind::Rotate
                | AugKind::ShearX
                | AugKind::ShearY
                | AugKind::TranslateX
                | AugKind::TranslateY
        )
    }
}

/// An operator with its strength.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationOp {
    pub kind: AugKind,
    pub magnitude: f64,
}

impl AugmentationOp {
    pub fn new(kind: AugKind, magnitude: f64) -> Result<Self> {
        let lo = if kind.signed() { -1.0 } else { 0.0 };
        if !magnitude.is_finite() || !(lo..=1.0).contains(&magnitude) {
            return Err(Error::InvalidInput(format!(
                "magnitude {magnitude} out of [{lo}, 1] for {}",
                kind.name()
            )));
        }
        Ok(Self { kind, magnitude })
    }
}

fn fixed_pairs(op: &str, dim: usize) -> Vec<(usize, usize)> {
    let mut r = rng::stream(AUG_STRUCTURE_SEED, op);
    let perm = rng::permutation(&mut r, dim);
    perm.chunks_exact(2).map(|c| (c[0], c[1])).collect()
}

fn fixed_signs(op: &str, dim: usize) -> Vec<f64> {
    let mut r = rng::stream(AUG_STRUCTURE_SEED, op);
    (0..dim)
        .map(|_| if rng::uniform_vec(&mut r, 1, 0.0, 1.0)[0] < 0.5 { -1.0 } else { 1.0 })
        .collect()
}

fn range_of(x: ArrayView1<f64>) -> Option<(f64, f64)> {
    let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        None
    } else {
        Some((lo, hi))
    }
}

/// Applies one operator. Pure in `(op, x)`; finite inputs map to finite
/// outputs, and magnitude 0 is the identity for every operator.
pub fn apply_augmentation(op: &AugmentationOp, x: ArrayView1<f64>) -> Array1<f64> {
    let m = op.magnitude;
    let d = x.len();
    match op.kind {
        AugKind::Identity => x.to_owned(),
        AugKind::Brightness => &x + m,
        AugKind::Contrast => {
            let mu = x.mean().unwrap_or(0.0);
            x.mapv(|v| mu + (1.0 + m) * (v - mu))
        }
        AugKind::Color => {
            let mut r = rng::stream(AUG_STRUCTURE_SEED, "color");
            let g = rng::uniform_vec(&mut r, d, -1.0, 1.0);
            ndarray::Zip::from(&x).and(&g).map_collect(|&v, &gv| v * (1.0 + m * gv))
        }
        AugKind::Sharpness => {
            let mut out = x.to_owned();
            for j in 0..d {
                let prev = x[(j + d - 1) % d];
                let next = x[(j + 1) % d];
                let smooth = (prev + x[j] + next) / 3.0;
                out[j] = x[j] + m * (x[j] - smooth);
            }
            out
        }
        AugKind::AutoContrast => match range_of(x) {
            None => x.to_owned(),
            Some((lo, hi)) => {
                x.mapv(|v| (1.0 - m) * v + m * (-1.0 + 2.0 * (v - lo) / (hi - lo)))
            }
        },
        AugKind::Equalize => match range_of(x) {
            None => x.to_owned(),
            Some((lo, hi)) => {
                let mut order: Vec<usize> = (0..d).collect();
                order.sort_by(|&a, &b| x[a].partial_cmp(&x[b]).unwrap().then(a.cmp(&b)));
                let mut out = x.to_owned();
                for (rank, &idx) in order.iter().enumerate() {
                    let target = lo + (hi - lo) * rank as f64 / (d - 1) as f64;
                    out[idx] = (1.0 - m) * x[idx] + m * target;
                }
                out
            }
        },
        AugKind::Posterize => {
            let levels = 1u32 << (8 - (4.0 * m.clamp(0.0, 1.0)).floor() as u32);
            if levels >= 256 {
                return x.to_owned();
            }
            match range_of(x) {
                None => x.to_owned(),
                Some((lo, hi)) => {
                    let steps = (levels - 1) as f64;
                    x.mapv(|v| lo + ((v - lo) / (hi - lo) * steps).round() * (hi - lo) / steps)
                }
            }
        }
        AugKind::Solarize => match range_of(x) {
            None => x.to_owned(),
            Some((lo, hi)) => {
                let threshold = 1.0 - m;
                x.mapv(|v| {
                    let u = (v - lo) / (hi - lo);
                    if u > threshold {
                        lo + (1.0 - u) * (hi - lo)
                    } else {
                        v
                    }
                })
            }
        },
        AugKind::Rotate => {
            let theta = m * std::f64::consts::FRAC_PI_2;
            let (c, s) = (theta.cos(), theta.sin());
            let mut out = x.to_owned();
            for (i, j) in fixed_pairs("rotate", d) {
                let (a, b) = (out[i], out[j]);
                out[i] = c * a - s * b;
                out[j] = s * a + c * b;
            }
            out
        }
        AugKind::ShearX => {
            let mut out = x.to_owned();
            for (i, j) in fixed_pairs("shear", d) {
                out[i] += m * out[j];
            }
            out
        }
        AugKind::ShearY => {
            let mut out = x.to_owned();
            for (i, j) in fixed_pairs("shear", d) {
                out[j] += m * out[i];
            }
            out
        }
        AugKind::TranslateX => {
            let e = fixed_signs("translatex", d);
            let mut out = x.to_owned();
            for j in 0..d {
                out[j] += m * e[j];
            }
            out
        }
        AugKind::TranslateY => {
            let e = fixed_signs("translatey", d);
            let mut out = x.to_owned();
            for j in 0..d {
                out[j] += m * e[j];
            }
            out
        }
    }
}

/// Applies `ops_per_sample` randomly drawn operators (uniform kind, uniform
/// magnitude in [0, 1]) to every row, drawing from the supplied stream.
pub fn augment_rows(
    rows: ndarray::ArrayView2<f64>,
    rng: &mut rand_chacha::ChaCha12Rng,
    ops_per_sample: usize,
) -> Array2<f64> {
    let mut out = rows.to_owned();
    for i in 0..rows.nrows() {
        let mut x = out.row(i).to_owned();
        for _ in 0..ops_per_sample {
            let kind = ALL_AUG_KINDS[rng::uniform_vec(rng, 1, 0.0, 14.0)[0] as usize % 14];
            let magnitude = rng::uniform_vec(rng, 1, 0.0, 1.0)[0];
            let op = AugmentationOp { kind, magnitude };
            x = apply_augmentation(&op, x.view());
        }
        out.row_mut(i).assign(&x);
    }
    out
}

/// Draws `ops_per_sample` random operators per sample and applies them in
/// sequence. Labels and counts are preserved; the id gains an `-ext` suffix.
pub fn generate_extended(
    authorized: &DomainDataset,
    seed: u64,
    ops_per_sample: usize,
) -> Result<DomainDataset> {
    if authorized.is_empty() {
        return Err(Error::InvalidInput("empty authorized dataset".into()));
    }
    if ops_per_sample < 1 {
        return Err(Error::InvalidInput("ops_per_sample must be >= 1".into()));
    }
    let mut r = rng::stream(seed, "extended");
    let samples = augment_rows(authorized.samples().view(), &mut r, ops_per_sample);
    DomainDataset::new(
        format!("{}-ext", authorized.domain_id()),
        samples,
        authorized.labels().to_vec(),
        authorized.n_classes(),
    )
}

/// Secret for the applicability-authorization watermark.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WatermarkKey {
    pub secret_seed: u64,
    pub strength: f64,
}

impl WatermarkKey {
    pub fn new(secret_seed: u64, strength: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(Error::InvalidInput(format!(
                "watermark strength {strength} out of [0, 1]"
            )));
        }
        Ok(Self {
            secret_seed,
            strength,
        })
    }
}

/// The fixed unit-norm pattern a key induces.
pub fn watermark_pattern(key: &WatermarkKey, dim: usize) -> Array1<f64> {
    let mut r = rng::stream(key.secret_seed, "watermark");
    let raw = rng::gaussian_vec(&mut r, dim, 1.0);
    let norm = raw.dot(&raw).sqrt();
    if norm == 0.0 {
        raw
    } else {
        raw / norm
    }
}

/// Adds the key's pattern scaled by its strength to every sample.
/// Labels are unchanged; the id gains a dagger suffix.
pub fn embed_watermark(ds: &DomainDataset, key: &WatermarkKey) -> DomainDataset {
    let pattern = watermark_pattern(key, ds.input_dim());
    let mut samples = ds.samples().clone();
    for mut row in samples.rows_mut() {
        let moved = &row + &(key.strength * &pattern);
        row.assign(&moved);
    }
    DomainDataset {
        domain_id: format!("{}\u{2020}", ds.domain_id()),
        samples,
        labels: ds.labels().to_vec(),
        n_classes: ds.n_classes(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn cardinality_and_determinism() {
        let domains = generate_synthetic_domains(4, 10, 50, 7).unwrap();
        assert_eq!(domains.len(), 4);
        for d in &domains {
            assert_eq!(d.len(), 500);
            assert_eq!(d.n_classes(), 10);
            let mut sorted: Vec<usize> = d.labels().to_vec();
            sorted.sort_unstable();
            assert_eq!(*sorted.first().unwrap(), 0);
            assert_eq!(*sorted.last().unwrap(), 9);
        }
        let again = generate_synthetic_domains(4, 10, 50, 7).unwrap();
        assert_eq!(domains, again);
    }

    #[test]
    fn invalid_sizes_rejected() {
        assert!(generate_synthetic_domains(1, 10, 50, 0).is_err());
        assert!(generate_synthetic_domains(2, 1, 50, 0).is_err());
        assert!(generate_synthetic_domains(2, 2, 0, 0).is_err());
    }

    /// Nearest-prototype classifier fit on one domain, scored on another.
    fn prototype_transfer(fit: &DomainDataset, score: &DomainDataset) -> f64 {
        let n = fit.n_classes();
        let dim = fit.input_dim();
        let mut means = Array2::<f64>::zeros((n, dim));
        let mut counts = vec![0.0; n];
        for (i, &label) in fit.labels().iter().enumerate() {
            let updated = &means.row(label) + &fit.samples().row(i);
            means.row_mut(label).assign(&updated);
            counts[label] += 1.0;
        }
        for k in 0..n {
            let scaled = &means.row(k) / counts[k];
            means.row_mut(k).assign(&scaled);
        }
        let mut hits = 0usize;
        for (i, &label) in score.labels().iter().enumerate() {
            let x = score.samples().row(i);
            let best = (0..n)
                .min_by(|&a, &b| {
                    let da = (&x - &means.row(a)).mapv(|v| v * v).sum();
                    let db = (&x - &means.row(b)).mapv(|v| v * v).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if best == label {
                hits += 1;
            }
        }
        100.0 * hits as f64 / score.len() as f64
    }

    #[test]
    fn domains_are_separable_but_shifted() {
        let mut self_acc = 0.0;
        let mut transfer_acc = 0.0;
        for seed in 0..5 {
            let domains = generate_synthetic_domains(4, 10, 50, seed).unwrap();
            self_acc += prototype_transfer(&domains[0], &domains[0]);
            transfer_acc += prototype_transfer(&domains[0], &domains[3]);
        }
        self_acc /= 5.0;
        transfer_acc /= 5.0;
        assert!(self_acc >= 95.0, "self accuracy {self_acc}");
        assert!(transfer_acc <= 80.0, "transfer accuracy {transfer_acc}");
    }

    #[test]
    fn extended_preserves_labels_and_moves_samples() {
        let domains = generate_synthetic_domains(2, 4, 10, 1).unwrap();
        let ext = generate_extended(&domains[0], 0, 2).unwrap();
        assert_eq!(ext.labels(), domains[0].labels());
        assert_eq!(ext.len(), domains[0].len());
        assert_eq!(ext.domain_id(), "syn0-ext");
        let displacement = (ext.samples() - domains[0].samples())
            .mapv(f64::abs)
            .mean()
            .unwrap();
        assert!(displacement > 0.0, "mean displacement {displacement}");
        // same seed reproduces exactly
        assert_eq!(ext, generate_extended(&domains[0], 0, 2).unwrap());
    }

    #[test]
    fn identity_op_leaves_samples_unchanged() {
        let domains = generate_synthetic_domains(2, 3, 5, 2).unwrap();
        let op = AugmentationOp::new(AugKind::Identity, 0.7).unwrap();
        for i in 0..domains[0].len() {
            let x = domains[0].samples().row(i);
            assert_eq!(apply_augmentation(&op, x), x.to_owned());
        }
    }

    #[test]
    fn rotate_inverts_with_negative_magnitude() {
        let mut r = rng::stream(5, "rot");
        let x = rng::gaussian_vec(&mut r, 32, 1.0);
        let fwd = apply_augmentation(&AugmentationOp::new(AugKind::Rotate, 0.6).unwrap(), x.view());
        let back =
            apply_augmentation(&AugmentationOp::new(AugKind::Rotate, -0.6).unwrap(), fwd.view());
        for (a, b) in x.iter().zip(back.iter()) {
            assert_relative_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn unknown_op_name_rejected() {
        assert!(AugKind::from_name("Blur").is_err());
        assert_eq!(AugKind::from_name("ShearX").unwrap(), AugKind::ShearX);
    }

    #[test]
    fn magnitude_validation() {
        assert!(AugmentationOp::new(AugKind::Brightness, -0.1).is_err());
        assert!(AugmentationOp::new(AugKind::Rotate, -0.9).is_ok());
        assert!(AugmentationOp::new(AugKind::Rotate, 1.2).is_err());
    }

    #[test]
    fn watermark_correlation_equals_strength() {
        let domains = generate_synthetic_domains(2, 3, 4, 3).unwrap();
        let key = WatermarkKey::new(99, 0.25).unwrap();
        let marked = embed_watermark(&domains[0], &key);
        assert_eq!(marked.labels(), domains[0].labels());
        assert_eq!(marked.domain_id(), "syn0\u{2020}");
        let pattern = watermark_pattern(&key, domains[0].input_dim());
        for i in 0..domains[0].len() {
            let delta = &marked.samples().row(i) - &domains[0].samples().row(i);
            let corr = delta.dot(&pattern);
            assert_relative_eq!(corr, key.strength, epsilon = 1e-9);
        }
        // alpha = 0 leaves samples unchanged; same key twice is identical
        let plain = embed_watermark(&domains[0], &WatermarkKey::new(99, 0.0).unwrap());
        assert_eq!(plain.samples(), domains[0].samples());
        assert_eq!(marked, embed_watermark(&domains[0], &key));
    }

    #[test]
    fn jsonl_round_trip() {
        let domains = generate_synthetic_domains(2, 3, 4, 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        domains[1].write_jsonl(&path).unwrap();
        let back = DomainDataset::read_jsonl(&path, Some(3)).unwrap();
        assert_eq!(back, domains[1]);
    }

    #[test]
    fn split_is_stratified_and_disjoint() {
        let domains = generate_synthetic_domains(2, 5, 10, 4).unwrap();
        let (train, eval) = domains[0].split_per_class(7);
        assert_eq!(train.len(), 35);
        assert_eq!(eval.len(), 15);
        for k in 0..5 {
            assert_eq!(train.labels().iter().filter(|&&l| l == k).count(), 7);
            assert_eq!(eval.labels().iter().filter(|&&l| l == k).count(), 3);
        }
    }

    proptest! {
        /// Magnitude 0 is the identity and outputs stay finite for all ops.
        #[test]
        fn closure_and_neutrality(kind_idx in 0usize..14, m in 0.0f64..=1.0, seed in 0u64..100) {
            let kind = ALL_AUG_KINDS[kind_idx];
            let mut r = rng::stream(seed, "aug-prop");
            let x = rng::gaussian_vec(&mut r, 16, 2.0);

            let zero = AugmentationOp::new(kind, 0.0).unwrap();
            let still = apply_augmentation(&zero, x.view());
            prop_assert_eq!(&still, &x);

            let op = AugmentationOp::new(kind, m).unwrap();
            let out = apply_augmentation(&op, x.view());
            prop_assert!(out.iter().all(|v| v.is_finite()));
            prop_assert_eq!(out.len(), x.len());
        }
    }
}
