//! Protection metrics, report aggregation, and regression against the
//! published result tables.
//!
//! `Drop_a = A_a_sl - A_a_ip` measures the cost of protection on the
//! authorized domain; `Drop_u` averages the suppression over unauthorized
//! domains; `W_{u-a} = (A_a_ip/100) * (Drop_u - Drop_a)` and
//! `D_{u-a} = (A_a_ip/100) * (A_a_ip - A_u_ip)` combine both sides. The /100
//! convention is pinned by the published cells themselves (for example
//! 0.794 * 88.15 = 69.99 against a printed 69.98); the bundled fixture of
//! transcribed table rows re-derives every composite cell within 0.1, the
//! rounding radius of one-decimal published values.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};

/// Tolerance for recomputed vs published cells (tables print one decimal and
/// some cells were visibly computed from unrounded intermediates).
pub const PAPER_TOLERANCE: f64 = 0.1;

fn check_pct(name: &str, value: f64) -> Result<()> {
    if !(0.0..=100.0).contains(&value) {
        return Err(Error::InvalidInput(format!(
            "{name} = {value} outside [0, 100]"
        )));
    }
    Ok(())
}

/// Authorized-domain accuracy drop `A_a_sl - A_a_ip`.
pub fn drop_a(a_a_sl: f64, a_a_ip: f64) -> Result<f64> {
    check_pct("A_a_sl", a_a_sl)?;
    check_pct("A_a_ip", a_a_ip)?;
    Ok(a_a_sl - a_a_ip)
}

/// Mean unauthorized-domain accuracy drop over `(A_u_sl, A_u_ip)` pairs.
pub fn drop_u(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("no unauthorized pairs".into()));
    }
    let mut sum = 0.0;
    for &(sl, ip) in pairs {
        check_pct("A_u_sl", sl)?;
        check_pct("A_u_ip", ip)?;
        sum += sl - ip;
    }
    Ok(sum / pairs.len() as f64)
}

/// Weighted drop difference `(A_a_ip/100) * (Drop_u - Drop_a)`.
pub fn w_diff(a_a_ip: f64, d_u: f64, d_a: f64) -> f64 {
    (a_a_ip / 100.0) * (d_u - d_a)
}

/// Accuracy cross drop `(A_a_ip/100) * (A_a_ip - A_u_ip)`.
pub fn d_cross(a_a_ip: f64, a_u_ip: f64) -> f64 {
    (a_a_ip / 100.0) * (a_a_ip - a_u_ip)
}

/// Legality bits grouped by expectation: authorized and extended records are
/// expected legal, unauthorized records illegal.
#[derive(Debug, Clone, Default)]
pub struct LegalityGroups {
    pub authorized: Vec<bool>,
    pub extended: Vec<bool>,
    pub unauthorized: Vec<bool>,
}

/// `(R_a, R_e, R_u)` in percent.
pub fn legality_rates(groups: &LegalityGroups) -> Result<(f64, f64, f64)> {
    let rate = |bits: &[bool], want: bool, name: &str| -> Result<f64> {
        if bits.is_empty() {
            return Err(Error::InvalidInput(format!("empty {name} group")));
        }
        let hits = bits.iter().filter(|&&b| b == want).count();
        Ok(100.0 * hits as f64 / bits.len() as f64)
    };
    Ok((
        rate(&groups.authorized, true, "authorized")?,
        rate(&groups.extended, true, "extended")?,
        rate(&groups.unauthorized, false, "unauthorized")?,
    ))
}

/// Accuracy cells for one task: the authorized domain under protection and
/// its reference model, per-unauthorized-domain pairs, and legality rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub authorized_id: String,
    pub a_a_sl: f64,
    pub a_a_ip: f64,
    pub unauthorized: Vec<UnauthPair>,
    pub r_a: f64,
    pub r_e: f64,
    pub r_u: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnauthPair {
    pub domain_id: String,
    pub a_u_sl: f64,
    pub a_u_ip: f64,
}

impl TaskResult {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("A_a_sl", self.a_a_sl),
            ("A_a_ip", self.a_a_ip),
            ("R_a", self.r_a),
            ("R_e", self.r_e),
            ("R_u", self.r_u),
        ] {
            check_pct(name, v)?;
        }
        for pair in &self.unauthorized {
            check_pct("A_u_sl", pair.a_u_sl)?;
            check_pct("A_u_ip", pair.a_u_ip)?;
        }
        if self.unauthorized.is_empty() {
            return Err(Error::InvalidInput(format!(
                "task {} has no unauthorized pairs",
                self.authorized_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub task: String,
    pub drop_a: f64,
    pub drop_u: f64,
    pub w_u_a: f64,
    pub d_u_a: f64,
}

/// Per-task protection metrics plus their arithmetic means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
    pub mean_drop_a: f64,
    pub mean_drop_u: f64,
    pub mean_w_u_a: f64,
    pub mean_d_u_a: f64,
}

/// Derives the report from task results; rows are ordered by task id.
pub fn compute_report(tasks: &[TaskResult]) -> Result<MetricsReport> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput("no task results".into()));
    }
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        task.validate()?;
        let d_a = drop_a(task.a_a_sl, task.a_a_ip)?;
        let pairs: Vec<(f64, f64)> = task
            .unauthorized
            .iter()
            .map(|p| (p.a_u_sl, p.a_u_ip))
            .collect();
        let d_u = drop_u(&pairs)?;
        let mean_a_u_ip =
            task.unauthorized.iter().map(|p| p.a_u_ip).sum::<f64>() / task.unauthorized.len() as f64;
        rows.push(MetricsRow {
            task: task.authorized_id.clone(),
            drop_a: d_a,
            drop_u: d_u,
            w_u_a: w_diff(task.a_a_ip, d_u, d_a),
            d_u_a: d_cross(task.a_a_ip, mean_a_u_ip),
        });
    }
    rows.sort_by(|a, b| a.task.cmp(&b.task));
    let n = rows.len() as f64;
    Ok(MetricsReport {
        mean_drop_a: rows.iter().map(|r| r.drop_a).sum::<f64>() / n,
        mean_drop_u: rows.iter().map(|r| r.drop_u).sum::<f64>() / n,
        mean_w_u_a: rows.iter().map(|r| r.w_u_a).sum::<f64>() / n,
        mean_d_u_a: rows.iter().map(|r| r.d_u_a).sum::<f64>() / n,
        rows,
    })
}

/// Column-aligned text table.
pub fn render_text(report: &MetricsReport) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>8} {:>8} {:>8} {:>8}\n",
        "task", "Drop_a", "Drop_u", "W_u-a", "D_u-a"
    ));
    for row in &report.rows {
        out.push_str(&format!(
            "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
            row.task, row.drop_a, row.drop_u, row.w_u_a, row.d_u_a
        ));
    }
    out.push_str(&format!(
        "{:<12} {:>8.2} {:>8.2} {:>8.2} {:>8.2}\n",
        "mean", report.mean_drop_a, report.mean_drop_u, report.mean_w_u_a, report.mean_d_u_a
    ));
    out
}

/// CSV with full-precision floats; re-ingesting reproduces the report.
pub fn render_csv(report: &MetricsReport) -> String {
    let mut out = String::from("task,drop_a,drop_u,w_u_a,d_u_a\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.task, row.drop_a, row.drop_u, row.w_u_a, row.d_u_a
        ));
    }
    out.push_str(&format!(
        "mean,{},{},{},{}\n",
        report.mean_drop_a, report.mean_drop_u, report.mean_w_u_a, report.mean_d_u_a
    ));
    out
}

/// Parses [`render_csv`] output, verifying the mean row against the body.
pub fn parse_csv(text: &str) -> Result<MetricsReport> {
    let mut rows = Vec::new();
    let mut means: Option<[f64; 4]> = None;
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line != "task,drop_a,drop_u,w_u_a,d_u_a" {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unexpected header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        let parse = |s: &str| -> Result<f64> {
            s.parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("{s:?}: {e}"),
            })
        };
        let values = [
            parse(fields[1])?,
            parse(fields[2])?,
            parse(fields[3])?,
            parse(fields[4])?,
        ];
        if fields[0] == "mean" {
            means = Some(values);
        } else {
            rows.push(MetricsRow {
                task: fields[0].to_string(),
                drop_a: values[0],
                drop_u: values[1],
                w_u_a: values[2],
                d_u_a: values[3],
            });
        }
    }
    let means = means.ok_or_else(|| Error::InvalidInput("missing mean row".into()))?;
    if rows.is_empty() {
        return Err(Error::InvalidInput("report has no task rows".into()));
    }
    let n = rows.len() as f64;
    let recomputed = [
        rows.iter().map(|r| r.drop_a).sum::<f64>() / n,
        rows.iter().map(|r| r.drop_u).sum::<f64>() / n,
        rows.iter().map(|r| r.w_u_a).sum::<f64>() / n,
        rows.iter().map(|r| r.d_u_a).sum::<f64>() / n,
    ];
    for (a, b) in means.iter().zip(recomputed.iter()) {
        if (a - b).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "mean row {a} disagrees with recomputed {b}"
            )));
        }
    }
    Ok(MetricsReport {
        rows,
        mean_drop_a: means[0],
        mean_drop_u: means[1],
        mean_w_u_a: means[2],
        mean_d_u_a: means[3],
    })
}

/// One transcribed table row. Task rows carry the input cells next to the
/// published composite; `Mean*` rows close a block and carry the published
/// aggregates of the rows above them.
#[derive(Debug, Clone, PartialEq)]
pub struct PaperRow {
    pub dataset: String,
    pub task: String,
    pub a_a_ip: Option<f64>,
    pub drop_u: Option<f64>,
    pub drop_a: Option<f64>,
    pub published_w: Option<f64>,
    pub a_u_ip: Option<f64>,
    pub published_d: Option<f64>,
}

impl PaperRow {
    pub fn row_id(&self) -> String {
        format!("{}/{}", self.dataset, self.task)
    }

    pub fn is_mean(&self) -> bool {
        self.task.starts_with("Mean")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellCheck {
    pub metric: &'static str,
    pub computed: f64,
    pub published: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RowCheck {
    pub row_id: String,
    pub cells: Vec<CellCheck>,
    pub pass: bool,
}

const FIXTURE_HEADER: &str = "dataset,task,a_a_ip,drop_u,drop_a,published_w,a_u_ip,published_d";

/// The fixture transcribed from the published tables, bundled with the crate.
pub fn bundled_fixture() -> &'static str {
    include_str!("../data/paper_rows.csv")
}

pub fn parse_fixture(text: &str) -> Result<Vec<PaperRow>> {
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if idx == 0 {
            if line.trim() != FIXTURE_HEADER {
                return Err(Error::Parse {
                    line: 1,
                    message: format!("unexpected fixture header {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 8 {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let opt = |s: &str| -> Result<Option<f64>> {
            if s.trim().is_empty() {
                Ok(None)
            } else {
                s.trim()
                    .parse::<f64>()
                    .map(Some)
                    .map_err(|e| Error::Parse {
                        line: idx + 1,
                        message: format!("{s:?}: {e}"),
                    })
            }
        };
        let row = PaperRow {
            dataset: fields[0].to_string(),
            task: fields[1].to_string(),
            a_a_ip: opt(fields[2])?,
            drop_u: opt(fields[3])?,
            drop_a: opt(fields[4])?,
            published_w: opt(fields[5])?,
            a_u_ip: opt(fields[6])?,
            published_d: opt(fields[7])?,
        };
        if !row.is_mean() && row.published_w.is_none() && row.published_d.is_none() {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("row {} has no published value to verify", row.row_id()),
            });
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Loads a fixture file from disk.
pub fn load_fixture(path: &Path) -> Result<Vec<PaperRow>> {
    if !path.exists() {
        return Err(Error::FixtureNotFound(path.display().to_string()));
    }
    parse_fixture(&std::fs::read_to_string(path)?)
}

fn cell(metric: &'static str, computed: f64, published: f64) -> CellCheck {
    CellCheck {
        metric,
        computed,
        published,
        pass: (computed - published).abs() <= PAPER_TOLERANCE,
    }
}

fn mean_of(values: &[f64]) -> f64 {
    if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Recomputes every composite cell from its input cells and compares against
/// the published value. Mean rows are checked against the arithmetic means of
/// the recomputed (for composites) or transcribed (for inputs) values of the
/// rows in their block.
pub fn verify_paper_rows(rows: &[PaperRow]) -> Vec<RowCheck> {
    let mut checks = Vec::with_capacity(rows.len());
    // per-block accumulators of the rows since the last mean row
    let mut ws: Vec<f64> = Vec::new();
    let mut ds: Vec<f64> = Vec::new();
    let mut drop_us: Vec<f64> = Vec::new();
    let mut drop_as: Vec<f64> = Vec::new();
    let mut a_as: Vec<f64> = Vec::new();
    let mut a_us: Vec<f64> = Vec::new();

    for row in rows {
        let mut cells = Vec::new();
        if row.is_mean() {
            if let Some(published) = row.published_w {
                cells.push(cell("W_u-a", mean_of(&ws), published));
            }
            if let Some(published) = row.published_d {
                cells.push(cell("D_u-a", mean_of(&ds), published));
            }
            if let Some(published) = row.drop_u {
                cells.push(cell("Drop_u", mean_of(&drop_us), published));
            }
            if let Some(published) = row.drop_a {
                cells.push(cell("Drop_a", mean_of(&drop_as), published));
            }
            if let Some(published) = row.a_a_ip {
                cells.push(cell("A_a_ip", mean_of(&a_as), published));
            }
            if let Some(published) = row.a_u_ip {
                cells.push(cell("A_u_ip", mean_of(&a_us), published));
            }
            ws.clear();
            ds.clear();
            drop_us.clear();
            drop_as.clear();
            a_as.clear();
            a_us.clear();
        } else {
            if let (Some(a_ip), Some(d_u), Some(d_a), Some(published)) =
                (row.a_a_ip, row.drop_u, row.drop_a, row.published_w)
            {
                let computed = w_diff(a_ip, d_u, d_a);
                cells.push(cell("W_u-a", computed, published));
                ws.push(computed);
            }
            if let (Some(a_ip), Some(a_u), Some(published)) =
                (row.a_a_ip, row.a_u_ip, row.published_d)
            {
                let computed = d_cross(a_ip, a_u);
                cells.push(cell("D_u-a", computed, published));
                ds.push(computed);
            }
            if let Some(v) = row.drop_u {
                drop_us.push(v);
            }
            if let Some(v) = row.drop_a {
                drop_as.push(v);
            }
            if let Some(v) = row.a_a_ip {
                a_as.push(v);
            }
            if let Some(v) = row.a_u_ip {
                a_us.push(v);
            }
        }
        let pass = !cells.is_empty() && cells.iter().all(|c| c.pass);
        checks.push(RowCheck {
            row_id: row.row_id(),
            cells,
            pass,
        });
    }
    checks
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn drop_a_examples() {
        assert_relative_eq!(drop_a(85.5, 85.4).unwrap(), 0.1, epsilon = 1e-12);
        assert_eq!(drop_a(42.0, 42.0).unwrap(), 0.0);
        assert!(drop_a(101.0, 2.0).is_err());
        for (sl, ip) in [(90.1, 3.2), (55.0, 54.9), (0.0, 0.0), (100.0, 12.5)] {
            assert_relative_eq!(drop_a(sl, ip).unwrap(), sl - ip, epsilon = 1e-12);
        }
    }

    #[test]
    fn drop_u_examples() {
        let v = drop_u(&[(87.5, 0.0), (88.8, 0.0)]).unwrap();
        assert_relative_eq!(v, 88.15, epsilon = 1e-12);
        assert_eq!(drop_u(&[(50.0, 50.0), (12.0, 12.0)]).unwrap(), 0.0);
        assert!(drop_u(&[]).is_err());

        let pairs = [(90.0, 10.0), (80.0, 5.0), (70.0, 7.0), (60.5, 0.5), (99.9, 9.9)];
        let brute: f64 = pairs.iter().map(|(a, b)| a - b).sum::<f64>() / pairs.len() as f64;
        assert_relative_eq!(drop_u(&pairs).unwrap(), brute, epsilon = 1e-12);
    }

    #[test]
    fn w_diff_reproduces_published_cells() {
        assert!((w_diff(79.4, 88.15, 0.00) - 69.98).abs() <= 0.1);
        assert!((w_diff(94.4, 86.25, 0.00) - 81.40).abs() <= 0.1);
        assert_eq!(w_diff(55.0, 12.5, 12.5), 0.0);
    }

    #[test]
    fn d_cross_reproduces_published_cells() {
        assert!((d_cross(68.13, 2.61) - 44.64).abs() <= 0.1);
        assert!((d_cross(81.75, 3.11) - 64.29).abs() <= 0.1);
        assert_eq!(d_cross(33.3, 33.3), 0.0);
    }

    #[test]
    fn legality_rate_examples() {
        let groups = LegalityGroups {
            authorized: vec![true; 8],
            extended: vec![true, true, false, true],
            unauthorized: vec![true; 5],
        };
        let (r_a, r_e, r_u) = legality_rates(&groups).unwrap();
        assert_eq!(r_a, 100.0);
        assert_eq!(r_e, 75.0);
        assert_eq!(r_u, 0.0);

        let empty = LegalityGroups {
            authorized: vec![],
            ..groups
        };
        assert!(legality_rates(&empty).is_err());
    }

    #[test]
    fn report_round_trips_through_csv() {
        let tasks = vec![
            TaskResult {
                authorized_id: "syn0".into(),
                a_a_sl: 96.0,
                a_a_ip: 95.0,
                unauthorized: vec![UnauthPair {
                    domain_id: "syn3".into(),
                    a_u_sl: 70.0,
                    a_u_ip: 5.0,
                }],
                r_a: 98.0,
                r_e: 95.0,
                r_u: 97.0,
            },
            TaskResult {
                authorized_id: "syn1".into(),
                a_a_sl: 88.0,
                a_a_ip: 87.5,
                unauthorized: vec![UnauthPair {
                    domain_id: "syn3".into(),
                    a_u_sl: 65.0,
                    a_u_ip: 8.0,
                }],
                r_a: 97.0,
                r_e: 94.0,
                r_u: 96.0,
            },
        ];
        let report = compute_report(&tasks).unwrap();
        let csv = render_csv(&report);
        let parsed = parse_csv(&csv).unwrap();
        assert_eq!(parsed, report);
        // fixed point
        assert_eq!(render_csv(&parsed), csv);
        // cell count: tasks x metric columns (+1 mean row)
        assert_eq!(csv.lines().count(), 1 + tasks.len() + 1);
        for line in csv.lines().skip(1) {
            assert_eq!(line.split(',').count(), 5);
        }
        // text render is deterministic and header-led
        let text = render_text(&report);
        assert!(text.starts_with("task"));
        assert_eq!(text.lines().count(), 1 + tasks.len() + 1);
    }

    #[test]
    fn bundled_fixture_passes_and_counts() {
        let rows = parse_fixture(bundled_fixture()).unwrap();
        assert!(rows.len() >= 12, "only {} fixture rows", rows.len());
        let checks = verify_paper_rows(&rows);
        for check in &checks {
            assert!(check.pass, "row {} failed: {:?}", check.row_id, check.cells);
        }
        // the named cells are all present
        for id in ["office31/Am", "office31/Ds", "office31/We", "office31/Am†", "officehome/Ar†"] {
            assert!(checks.iter().any(|c| c.row_id == id), "{id} missing");
        }
    }

    #[test]
    fn corrupted_fixture_row_fails_with_its_id() {
        let mut rows = parse_fixture(bundled_fixture()).unwrap();
        let idx = rows.iter().position(|r| r.task == "Ds").unwrap();
        rows[idx].drop_u = Some(50.0);
        let checks = verify_paper_rows(&rows);
        let failed: Vec<&RowCheck> = checks.iter().filter(|c| !c.pass).collect();
        assert!(failed.iter().any(|c| c.row_id == "office31/Ds"));
    }

    #[test]
    fn missing_fixture_file() {
        let err = load_fixture(Path::new("/nonexistent/fixture.csv")).unwrap_err();
        assert!(matches!(err, Error::FixtureNotFound(_)));
    }

    proptest! {
        /// Formula identities over random percentage inputs.
        #[test]
        fn metric_identities(
            a_sl in 0.0f64..100.0,
            a_ip in 0.0f64..100.0,
            u_sl in 0.0f64..100.0,
            u_ip in 0.0f64..100.0,
        ) {
            let da = drop_a(a_sl, a_ip).unwrap();
            prop_assert!((da - (a_sl - a_ip)).abs() < 1e-12);
            let du = drop_u(&[(u_sl, u_ip)]).unwrap();
            prop_assert!((du - (u_sl - u_ip)).abs() < 1e-12);
            let w = w_diff(a_ip, du, da);
            prop_assert!((w - a_ip / 100.0 * (du - da)).abs() < 1e-9);
            let d = d_cross(a_ip, u_ip);
            prop_assert!((d - a_ip / 100.0 * (a_ip - u_ip)).abs() < 1e-9);
        }

        /// Legality rate plus its complement is always 100.
        #[test]
        fn legality_complement(bits in proptest::collection::vec(any::<bool>(), 1..50)) {
            let groups = LegalityGroups {
                authorized: bits.clone(),
                extended: bits.clone(),
                unauthorized: bits.clone(),
            };
            let (r_a, _r_e, r_u) = legality_rates(&groups).unwrap();
            // within one group, "legal" rate and "illegal" rate partition 100
            prop_assert!((r_a + r_u - 100.0).abs() < 1e-9);
        }
    }
}
