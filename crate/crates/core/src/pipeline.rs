//! End-to-end experiment orchestration: dataset generation, protected and
//! reference training, credential issuance, the evaluation grid, and report
//! artifacts.
//!
//! Two scenarios are supported. In the target-specified scenario one domain
//! is authorized, one is unauthorized, and the remaining domains are held out
//! entirely during training and only activated afterwards by issuing their
//! credentials. In the authorization-application scenario the authorized
//! domain is a watermarked copy; the clean domains (including the clean copy
//! of the authorized one) are the unauthorized side, and the other
//! watermarked domains play the extended role.
//!
//! Every artifact except the credential store (whose records carry issuance
//! timestamps) is a deterministic function of the run configuration.

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backbone::FeatureVector;
use crate::domains::{embed_watermark, generate_synthetic_domains, DomainDataset, WatermarkKey};
use crate::error::{Error, Result};
use crate::inference::{infer_batch, LoadedModel, ResultRecord};
use crate::metrics::{compute_report, legality_rates, LegalityGroups, MetricsReport, TaskResult, UnauthPair};
use crate::tokens::{derive_credential, issue_credential, CredentialStore, Token};
use crate::training::{train, Checkpoint, Objective, TrainConfig, TrainOutput};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    TargetSpecified,
    AuthorizationApplication,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scenario::TargetSpecified => f.write_str("target-specified"),
            Scenario::AuthorizationApplication => f.write_str("authorization-application"),
        }
    }
}

fn default_n_domains() -> usize {
    4
}
fn default_n_classes() -> usize {
    10
}
fn default_per_class() -> usize {
    70
}
fn default_eval_per_class() -> usize {
    20
}
fn default_authorized() -> String {
    "syn0".into()
}
fn default_unauthorized() -> String {
    "syn3".into()
}
fn default_extended() -> Vec<String> {
    vec!["syn1".into(), "syn2".into()]
}
fn default_out_dir() -> PathBuf {
    "out".into()
}
fn default_watermark_seed() -> u64 {
    1234
}
fn default_watermark_strength() -> f64 {
    0.1
}
fn default_scenario() -> Scenario {
    Scenario::TargetSpecified
}

/// Full run configuration; JSON-serializable so the CLI can layer flag
/// overrides on top of a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_scenario")]
    pub scenario: Scenario,
    #[serde(default = "default_n_domains")]
    pub n_domains: usize,
    #[serde(default = "default_n_classes")]
    pub n_classes: usize,
    /// Samples generated per class per domain (train + eval).
    #[serde(default = "default_per_class")]
    pub per_class: usize,
    /// Held-out tail per class used for evaluation.
    #[serde(default = "default_eval_per_class")]
    pub eval_per_class: usize,
    #[serde(default = "default_authorized")]
    pub authorized: String,
    #[serde(default = "default_unauthorized")]
    pub unauthorized: String,
    #[serde(default = "default_extended")]
    pub extended: Vec<String>,
    #[serde(default = "default_watermark_seed")]
    pub watermark_seed: u64,
    #[serde(default = "default_watermark_strength")]
    pub watermark_strength: f64,
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            scenario: default_scenario(),
            n_domains: default_n_domains(),
            n_classes: default_n_classes(),
            per_class: default_per_class(),
            eval_per_class: default_eval_per_class(),
            authorized: default_authorized(),
            unauthorized: default_unauthorized(),
            extended: default_extended(),
            watermark_seed: default_watermark_seed(),
            watermark_strength: default_watermark_strength(),
            out_dir: default_out_dir(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.authorized == self.unauthorized {
            return Err(Error::InvalidInput(
                "authorized and unauthorized domains must differ".into(),
            ));
        }
        for ext in &self.extended {
            if *ext == self.authorized || *ext == self.unauthorized {
                return Err(Error::InvalidInput(format!(
                    "extended domain {ext:?} overlaps authorized/unauthorized assignment"
                )));
            }
        }
        if self.eval_per_class == 0 || self.eval_per_class >= self.per_class {
            return Err(Error::InvalidInput(format!(
                "eval_per_class {} must be in [1, per_class)",
                self.eval_per_class
            )));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::InvalidInput(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn data_dir(&self) -> PathBuf {
        self.out_dir.join("data")
    }
    pub fn dataset_path(&self, domain_id: &str) -> PathBuf {
        // the dagger marking watermarked domains is not filesystem-friendly
        let safe: String = domain_id.replace('\u{2020}', "+wm");
        self.data_dir().join(format!("{safe}.jsonl"))
    }
    pub fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("checkpoint.json")
    }
    pub fn baseline_path(&self) -> PathBuf {
        self.out_dir.join("baseline.json")
    }
    pub fn epoch_log_path(&self) -> PathBuf {
        self.out_dir.join("epochs.jsonl")
    }
    pub fn baseline_epoch_log_path(&self) -> PathBuf {
        self.out_dir.join("baseline_epochs.jsonl")
    }
    pub fn store_path(&self) -> PathBuf {
        self.out_dir.join("credentials.json")
    }
    pub fn results_path(&self) -> PathBuf {
        self.out_dir.join("results.jsonl")
    }
    pub fn report_csv_path(&self) -> PathBuf {
        self.out_dir.join("report.csv")
    }
    pub fn report_txt_path(&self) -> PathBuf {
        self.out_dir.join("report.txt")
    }

    fn watermark_key(&self) -> Result<WatermarkKey> {
        WatermarkKey::new(self.watermark_seed, self.watermark_strength)
    }
}

/// Generates the synthetic base domains for a config.
pub fn generate_data(cfg: &RunConfig) -> Result<Vec<DomainDataset>> {
    generate_synthetic_domains(cfg.n_domains, cfg.n_classes, cfg.per_class, cfg.train.master_seed)
}

/// Writes one JSON-lines file per domain under `out_dir/data`.
pub fn write_datasets(cfg: &RunConfig, datasets: &[DomainDataset]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(cfg.data_dir())?;
    let mut paths = Vec::new();
    for ds in datasets {
        let path = cfg.dataset_path(ds.domain_id());
        ds.write_jsonl(&path)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Loads the base domains back from `out_dir/data`.
pub fn load_datasets(cfg: &RunConfig) -> Result<Vec<DomainDataset>> {
    let mut datasets = Vec::new();
    for j in 0..cfg.n_domains {
        let path = cfg.dataset_path(&format!("syn{j}"));
        if !path.exists() {
            return Err(Error::InvalidInput(format!(
                "dataset file {} missing; run gen-data first",
                path.display()
            )));
        }
        datasets.push(DomainDataset::read_jsonl(&path, Some(cfg.n_classes))?);
    }
    Ok(datasets)
}

/// The domains a scenario trains on and evaluates, after role assignment.
pub struct ScenarioData {
    /// Training split of the authorized domain (watermarked in the
    /// authorization-application scenario).
    pub train_authorized: DomainDataset,
    /// Training split of the unauthorized side.
    pub train_unauthorized: DomainDataset,
    /// Active rows: `(domain id, train split, eval split)`; row 0 is the
    /// authorized domain, the rest are on-demand extended domains.
    pub rows: Vec<(String, DomainDataset, DomainDataset)>,
    /// Unauthorized eval sets: `(domain id, eval split)`.
    pub unauthorized_eval: Vec<(String, DomainDataset)>,
}

fn find_domain<'a>(datasets: &'a [DomainDataset], id: &str) -> Result<&'a DomainDataset> {
    datasets
        .iter()
        .find(|d| d.domain_id() == id)
        .ok_or_else(|| Error::InvalidInput(format!("unknown domain {id:?}")))
}

/// Assigns domain roles for a scenario and splits train/eval.
pub fn scenario_data(cfg: &RunConfig, datasets: &[DomainDataset]) -> Result<ScenarioData> {
    cfg.validate()?;
    let train_per_class = cfg.per_class - cfg.eval_per_class;
    let split = |ds: &DomainDataset| ds.split_per_class(train_per_class);

    match cfg.scenario {
        Scenario::TargetSpecified => {
            let authorized = find_domain(datasets, &cfg.authorized)?;
            let unauthorized = find_domain(datasets, &cfg.unauthorized)?;
            let (a_train, a_eval) = split(authorized);
            let (u_train, u_eval) = split(unauthorized);
            let mut rows = vec![(cfg.authorized.clone(), a_train.clone(), a_eval)];
            for ext in &cfg.extended {
                let ds = find_domain(datasets, ext)?;
                let (e_train, e_eval) = split(ds);
                rows.push((ext.clone(), e_train, e_eval));
            }
            Ok(ScenarioData {
                train_authorized: a_train,
                train_unauthorized: u_train,
                rows,
                unauthorized_eval: vec![(cfg.unauthorized.clone(), u_eval)],
            })
        }
        Scenario::AuthorizationApplication => {
            let key = cfg.watermark_key()?;
            let authorized_clean = find_domain(datasets, &cfg.authorized)?;
            let marked = embed_watermark(authorized_clean, &key);
            let (a_train, a_eval) = split(&marked);
            let (clean_train, _) = split(authorized_clean);

            let mut rows = vec![(marked.domain_id().to_string(), a_train.clone(), a_eval)];
            for ext in &cfg.extended {
                let ds = embed_watermark(find_domain(datasets, ext)?, &key);
                let (e_train, e_eval) = split(&ds);
                rows.push((ds.domain_id().to_string(), e_train, e_eval));
            }
            // every clean domain, including the clean authorized copy, is
            // unauthorized at evaluation time
            let mut unauthorized_eval = Vec::new();
            for ds in datasets {
                let (_, eval) = split(ds);
                unauthorized_eval.push((ds.domain_id().to_string(), eval));
            }
            Ok(ScenarioData {
                train_authorized: a_train,
                train_unauthorized: clean_train,
                rows,
                unauthorized_eval,
            })
        }
    }
}

/// Trains the protected model and the authorized-only reference model.
pub fn run_training(cfg: &RunConfig, data: &ScenarioData) -> Result<(TrainOutput, TrainOutput)> {
    let protected = train(&cfg.train, &data.train_authorized, &data.train_unauthorized)?;
    let baseline_cfg = TrainConfig {
        objective: Objective::AuthorizedOnly,
        ..cfg.train.clone()
    };
    let baseline = train(&baseline_cfg, &data.train_authorized, &data.train_unauthorized)?;
    Ok((protected, baseline))
}

/// Issues credentials for every active-row domain from its training split.
pub fn issue_row_credentials(
    data: &ScenarioData,
    checkpoint: &Checkpoint,
    store: &mut CredentialStore,
) -> Result<()> {
    for (_, train_split, _) in &data.rows {
        issue_credential(train_split, checkpoint, store)?;
    }
    Ok(())
}

/// A credential for the reference model, derived directly (not persisted:
/// the reference model is an evaluation yardstick, not a deployed artifact).
fn baseline_credential(reference: &DomainDataset, checkpoint: &Checkpoint) -> Result<Token> {
    let backbone = checkpoint.backbone();
    let (feats, _) = backbone.encode_image_batch(reference.samples().view())?;
    let mean = feats.mean_axis(ndarray::Axis(0)).expect("non-empty reference");
    derive_credential(&FeatureVector::new(mean)?, &checkpoint.projectors)
}

pub struct EvalOutput {
    pub records: Vec<ResultRecord>,
    pub task_results: Vec<TaskResult>,
    pub report: MetricsReport,
    /// Accuracy grid in the published tables' row layout.
    pub summary_text: String,
}

fn record_batch(
    records: &mut Vec<ResultRecord>,
    task: &str,
    domain: &str,
    credential_id: &str,
    ds: &DomainDataset,
    model: &LoadedModel,
    credential: &Token,
) -> Result<f64> {
    let outputs = infer_batch(ds.samples().view(), credential, model)?;
    let mut correct = 0usize;
    for (out, &label) in outputs.iter().zip(ds.labels().iter()) {
        if out.predicted_class == label {
            correct += 1;
        }
        records.push(ResultRecord {
            task: task.to_string(),
            domain: domain.to_string(),
            credential_id: credential_id.to_string(),
            label,
            pred: out.predicted_class,
            legal: out.legal,
        });
    }
    Ok(100.0 * correct as f64 / outputs.len() as f64)
}

/// Runs every (domain, credential) pairing the scenario demands, for both
/// the protected and the reference model, and derives the metrics report.
pub fn run_eval(
    cfg: &RunConfig,
    data: &ScenarioData,
    protected: &Checkpoint,
    baseline: &Checkpoint,
    store: &CredentialStore,
) -> Result<EvalOutput> {
    let model_ip = LoadedModel::new(protected.clone());
    let model_sl = LoadedModel::new(baseline.clone());

    let mut records = Vec::new();
    let mut task_results = Vec::new();
    let mut groups = LegalityGroups::default();
    let mut summary = String::new();
    summary.push_str(&format!("scenario: {}\n", cfg.scenario));

    for (row_idx, (row_domain, train_split, eval_split)) in data.rows.iter().enumerate() {
        let row_kind = if row_idx == 0 { "auth" } else { "ext" };
        let record = store.latest_for_domain(row_domain).ok_or_else(|| {
            Error::CredentialNotFound(format!(
                "{row_domain} (pairing {row_domain} -> {row_domain})"
            ))
        })?;
        let cred_ip = record.credential_token();
        let cred_sl = baseline_credential(train_split, baseline)?;

        let task_ip = format!("{row_kind}:{row_domain}:ip");
        let task_sl = format!("{row_kind}:{row_domain}:sl");

        let before = records.len();
        let a_ip = record_batch(&mut records, &task_ip, row_domain, row_domain, eval_split, &model_ip, &cred_ip)?;
        let own_legal: Vec<bool> = records[before..].iter().map(|r| r.legal).collect();
        if row_idx == 0 {
            groups.authorized.extend(own_legal);
        } else {
            groups.extended.extend(own_legal);
        }
        let a_sl = record_batch(&mut records, &task_sl, row_domain, row_domain, eval_split, &model_sl, &cred_sl)?;

        let mut pairs = Vec::new();
        let mut cells = Vec::new();
        for (u_domain, u_eval) in &data.unauthorized_eval {
            if u_domain == row_domain {
                continue;
            }
            let before = records.len();
            let u_ip = record_batch(&mut records, &task_ip, u_domain, row_domain, u_eval, &model_ip, &cred_ip)?;
            groups
                .unauthorized
                .extend(records[before..].iter().map(|r| r.legal));
            let u_sl = record_batch(&mut records, &task_sl, u_domain, row_domain, u_eval, &model_sl, &cred_sl)?;
            pairs.push(UnauthPair {
                domain_id: u_domain.clone(),
                a_u_sl: u_sl,
                a_u_ip: u_ip,
            });
            cells.push(format!("{u_domain} {u_sl:.1} => {u_ip:.1}"));
        }
        summary.push_str(&format!(
            "{row_domain:<12} A {a_sl:.1} => {a_ip:.1} | U: {}\n",
            cells.join(" | ")
        ));
        task_results.push(TaskResult {
            authorized_id: row_domain.clone(),
            a_a_sl: a_sl,
            a_a_ip: a_ip,
            unauthorized: pairs,
            r_a: 0.0,
            r_e: 0.0,
            r_u: 0.0,
        });
    }

    // run-level legality rates, shared across rows (one triple per task,
    // as in the published row layout)
    let (r_a, r_e, r_u) = legality_rates(&groups)?;
    for task in &mut task_results {
        task.r_a = r_a;
        task.r_e = r_e;
        task.r_u = r_u;
    }
    summary.push_str(&format!("R_a {r_a:.1}  R_e {r_e:.1}  R_u {r_u:.1}\n"));

    let report = compute_report(&task_results)?;
    Ok(EvalOutput {
        records,
        task_results,
        report,
        summary_text: summary,
    })
}

/// Rebuilds task results and the metrics report from a raw result log;
/// the independent recomputation path used to cross-check [`run_eval`].
pub fn report_from_log(records: &[ResultRecord]) -> Result<(Vec<TaskResult>, MetricsReport)> {
    #[derive(Default)]
    struct Acc {
        correct: usize,
        total: usize,
        legal: usize,
    }
    // (row_kind, row_domain, model, eval_domain) -> accuracy accumulator
    let mut cells: BTreeMap<(String, String, String, String), Acc> = BTreeMap::new();
    for rec in records {
        let mut parts = rec.task.split(':');
        let (kind, row, model) = (
            parts.next().unwrap_or_default().to_string(),
            parts.next().unwrap_or_default().to_string(),
            parts.next().unwrap_or_default().to_string(),
        );
        if kind.is_empty() || row.is_empty() || model.is_empty() {
            return Err(Error::InvalidInput(format!(
                "malformed task field {:?}",
                rec.task
            )));
        }
        let acc = cells
            .entry((kind, row, model, rec.domain.clone()))
            .or_default();
        acc.total += 1;
        if rec.pred == rec.label {
            acc.correct += 1;
        }
        if rec.legal {
            acc.legal += 1;
        }
    }

    let pct = |acc: &Acc| 100.0 * acc.correct as f64 / acc.total as f64;

    let mut rows: Vec<(String, String)> = cells
        .keys()
        .map(|(kind, row, _, _)| (kind.clone(), row.clone()))
        .collect();
    rows.sort();
    rows.dedup();

    let mut groups = LegalityGroups::default();
    let mut tasks = Vec::new();
    for (kind, row) in rows {
        let own_ip = cells
            .get(&(kind.clone(), row.clone(), "ip".into(), row.clone()))
            .ok_or_else(|| Error::InvalidInput(format!("log misses ip cell for {row}")))?;
        let own_sl = cells
            .get(&(kind.clone(), row.clone(), "sl".into(), row.clone()))
            .ok_or_else(|| Error::InvalidInput(format!("log misses sl cell for {row}")))?;
        if kind == "auth" {
            groups.authorized.extend((0..own_ip.total).map(|i| i < own_ip.legal));
        } else {
            groups.extended.extend((0..own_ip.total).map(|i| i < own_ip.legal));
        }

        let mut pairs = Vec::new();
        for ((k, r, model, domain), acc) in &cells {
            if *k == kind && *r == row && model == "ip" && *domain != row {
                let sl = cells
                    .get(&(k.clone(), r.clone(), "sl".into(), domain.clone()))
                    .ok_or_else(|| {
                        Error::InvalidInput(format!("log misses sl cell for {row}/{domain}"))
                    })?;
                pairs.push(UnauthPair {
                    domain_id: domain.clone(),
                    a_u_sl: pct(sl),
                    a_u_ip: pct(acc),
                });
                groups
                    .unauthorized
                    .extend((0..acc.total).map(|i| i < acc.legal));
            }
        }
        tasks.push(TaskResult {
            authorized_id: row,
            a_a_sl: pct(own_sl),
            a_a_ip: pct(own_ip),
            unauthorized: pairs,
            r_a: 0.0,
            r_e: 0.0,
            r_u: 0.0,
        });
    }
    let (r_a, r_e, r_u) = legality_rates(&groups)?;
    for task in &mut tasks {
        task.r_a = r_a;
        task.r_e = r_e;
        task.r_u = r_u;
    }
    let report = compute_report(&tasks)?;
    Ok((tasks, report))
}

/// Full artifacts of one experiment run.
pub struct ExperimentArtifacts {
    pub datasets: Vec<DomainDataset>,
    pub protected: TrainOutput,
    pub baseline: TrainOutput,
    pub eval: EvalOutput,
}

/// Generates data, trains both models, issues row credentials, evaluates,
/// and writes every artifact under `cfg.out_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentArtifacts> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;

    let datasets = generate_data(cfg)?;
    write_datasets(cfg, &datasets)?;
    let data = scenario_data(cfg, &datasets)?;

    let (protected, baseline) = run_training(cfg, &data)?;
    protected.checkpoint.save(&cfg.checkpoint_path())?;
    baseline.checkpoint.save(&cfg.baseline_path())?;
    crate::training::write_epoch_log(&cfg.epoch_log_path(), &protected.epoch_logs)?;
    crate::training::write_epoch_log(&cfg.baseline_epoch_log_path(), &baseline.epoch_logs)?;

    let mut store = CredentialStore::open(&cfg.store_path())?;
    issue_row_credentials(&data, &protected.checkpoint, &mut store)?;

    let eval = run_eval(cfg, &data, &protected.checkpoint, &baseline.checkpoint, &store)?;
    crate::inference::write_result_log(&cfg.results_path(), &eval.records)?;
    std::fs::write(&cfg.report_csv_path(), crate::metrics::render_csv(&eval.report))?;
    std::fs::write(
        &cfg.report_txt_path(),
        format!("{}\n{}", eval.summary_text, crate::metrics::render_text(&eval.report)),
    )?;

    Ok(ExperimentArtifacts {
        datasets,
        protected,
        baseline,
        eval,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// A configuration small enough for fast integration tests.
    pub fn small_config(out_dir: PathBuf) -> RunConfig {
        RunConfig {
            train: TrainConfig {
                epochs: 8,
                batch_size: 16,
                ..TrainConfig::default()
            },
            n_domains: 4,
            n_classes: 4,
            per_class: 12,
            eval_per_class: 4,
            out_dir,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small_config(dir.path().to_path_buf());
        cfg.unauthorized = cfg.authorized.clone();
        assert!(cfg.validate().is_err());

        let mut cfg = small_config(dir.path().to_path_buf());
        cfg.extended = vec![cfg.authorized.clone()];
        assert!(cfg.validate().is_err());

        let cfg = small_config(dir.path().to_path_buf());
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn config_json_round_trip_with_defaults() {
        let cfg = RunConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(cfg, back);

        // sparse config files fall back to defaults
        let sparse: RunConfig = serde_json::from_str(r#"{"n_classes": 5}"#).unwrap();
        assert_eq!(sparse.n_classes, 5);
        assert_eq!(sparse.n_domains, 4);
        assert_eq!(sparse.train.lambda1, 0.1);
    }

    #[test]
    fn missing_credential_names_the_pairing() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_config(dir.path().to_path_buf());
        let datasets = generate_data(&cfg).unwrap();
        let data = scenario_data(&cfg, &datasets).unwrap();
        let (protected, baseline) = {
            let quick = RunConfig {
                train: TrainConfig {
                    epochs: 0,
                    ..cfg.train.clone()
                },
                ..cfg.clone()
            };
            run_training(&quick, &data).unwrap()
        };
        let store = CredentialStore::open(&dir.path().join("creds.json")).unwrap();
        match run_eval(&cfg, &data, &protected.checkpoint, &baseline.checkpoint, &store) {
            Err(Error::CredentialNotFound(msg)) => assert!(msg.contains("syn0"), "{msg}"),
            Err(other) => panic!("expected CredentialNotFound, got {other:?}"),
            Ok(_) => panic!("eval must fail without credentials"),
        }
    }
}
