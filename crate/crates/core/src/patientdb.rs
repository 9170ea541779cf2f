//! Patient-grouped datasets.
//!
//! The unit of privacy is the patient: two databases are adjacent when they
//! differ by all records of exactly one patient. Everything here keeps
//! patients intact: splits are patient-level and sampling includes or
//! excludes whole patients.
//!
//! Per-round sampling is Bernoulli: each patient joins the batch
//! independently with probability `p`, so batch sizes vary and a batch may be
//! empty. This is the sampling model the subsampled-Gaussian and selection
//! moment bounds assume.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Example;
use crate::numkit::RandomSource;

#[derive(Debug, Clone, PartialEq)]
pub struct PatientRecord {
    pub id: String,
    pub examples: Vec<Example>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientDatabase {
    patients: Vec<PatientRecord>,
    feature_dim: usize,
}

impl PatientDatabase {
    pub fn new(patients: Vec<PatientRecord>) -> Result<Self> {
        let first = patients.first().ok_or(Error::Empty("patient database"))?;
        let feature_dim = first
            .examples
            .first()
            .map(|e| e.x.len())
            .ok_or_else(|| Error::invalid("patients", format!("patient `{}` has no examples", first.id)))?;
        if feature_dim == 0 {
            return Err(Error::invalid("feature_dim", "must be at least 1"));
        }
        let mut seen = HashSet::new();
        for p in &patients {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::invalid("patients", format!("duplicate patient id `{}`", p.id)));
            }
            if p.examples.is_empty() {
                return Err(Error::invalid(
                    "patients",
                    format!("patient `{}` has no examples", p.id),
                ));
            }
            for ex in &p.examples {
                if ex.x.len() != feature_dim {
                    return Err(Error::DimensionMismatch {
                        expected: feature_dim,
                        actual: ex.x.len(),
                    });
                }
                if ex.y > 1 {
                    return Err(Error::invalid("y", format!("label {} is not 0 or 1", ex.y)));
                }
                if let Some(index) = ex.x.iter().position(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { index });
                }
            }
        }
        Ok(Self { patients, feature_dim })
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn num_patients(&self) -> usize {
        self.patients.len()
    }

    pub fn num_examples(&self) -> usize {
        self.patients.iter().map(|p| p.examples.len()).sum()
    }

    /// All examples, patient by patient, in storage order.
    pub fn examples(&self) -> impl Iterator<Item = &Example> + Clone {
        self.patients.iter().flat_map(|p| p.examples.iter())
    }
}

/// Parameters for [`generate_synthetic`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParams {
    pub n_patients: usize,
    pub per_patient: usize,
    pub dim: usize,
    /// Distance between the two class means, in units of the within-class
    /// standard deviation.
    pub class_sep: f64,
    /// Standard deviation of the per-patient mean offset.
    #[serde(default = "default_patient_offset")]
    pub patient_offset: f64,
    /// Spread of per-patient label prevalence around 1/2, in `[0, 1]`. Zero
    /// gives every patient balanced labels in expectation.
    #[serde(default)]
    pub prevalence_spread: f64,
}

fn default_patient_offset() -> f64 {
    0.5
}

impl SynthParams {
    pub fn new(n_patients: usize, per_patient: usize, dim: usize, class_sep: f64) -> Self {
        Self {
            n_patients,
            per_patient,
            dim,
            class_sep,
            patient_offset: default_patient_offset(),
            prevalence_spread: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_patients == 0 || self.per_patient == 0 || self.dim == 0 {
            return Err(Error::invalid(
                "synthetic",
                "patient, example and feature counts must be positive",
            ));
        }
        if !self.class_sep.is_finite() || self.class_sep < 0.0 {
            return Err(Error::invalid("class_sep", "must be a non-negative number"));
        }
        if !self.patient_offset.is_finite() || self.patient_offset < 0.0 {
            return Err(Error::invalid("patient_offset", "must be a non-negative number"));
        }
        if !(0.0..=1.0).contains(&self.prevalence_spread) {
            return Err(Error::invalid("prevalence_spread", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Latent coordinates are divided by this before the logistic squash into
/// `(0, 1)`.
const SQUASH_SCALE: f64 = 1.0;

/// Two Gaussian class clusters at `±class_sep/2` along a random unit
/// direction, with a per-patient mean offset, squashed into `(0, 1)`.
pub fn generate_synthetic(params: &SynthParams, seed: u64) -> Result<PatientDatabase> {
    params.validate()?;
    let root = RandomSource::new(seed).child("synthetic");
    let d = params.dim;

    let mut dir_rng = root.child("direction");
    let mut direction: Vec<f64> = (0..d).map(|_| dir_rng.standard_normal()).collect();
    let norm = crate::numkit::slice_norm(&direction);
    if norm == 0.0 {
        direction = vec![0.0; d];
        direction[0] = 1.0;
    } else {
        direction.iter_mut().for_each(|v| *v /= norm);
    }

    let width = params.n_patients.to_string().len().max(5);
    let patients = (0..params.n_patients)
        .map(|i| {
            let mut rng = root.child("patient").child_u64(i as u64);
            let offset: Vec<f64> = (0..d).map(|_| params.patient_offset * rng.standard_normal()).collect();
            let prevalence = 0.5 + params.prevalence_spread * (rng.uniform() - 0.5);
            let examples = (0..params.per_patient)
                .map(|_| {
                    let y = u8::from(rng.bernoulli(prevalence));
                    let sign = if y == 1 { 0.5 } else { -0.5 };
                    let x = (0..d)
                        .map(|k| {
                            let latent = offset[k] + sign * params.class_sep * direction[k] + rng.standard_normal();
                            1.0 / (1.0 + (-latent / SQUASH_SCALE).exp())
                        })
                        .collect();
                    Example::new(x, y)
                })
                .collect();
            PatientRecord {
                id: format!("p{i:0width$}"),
                examples,
            }
        })
        .collect();
    PatientDatabase::new(patients)
}

/// Patient-level random split into `(floor(N * train_fraction), rest)`.
/// Both sides keep the original patient order.
pub fn split(db: &PatientDatabase, train_fraction: f64, seed: u64) -> Result<(PatientDatabase, PatientDatabase)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::invalid(
            "train_fraction",
            format!("must lie in (0, 1), got {train_fraction}"),
        ));
    }
    let n = db.num_patients();
    // The small slack absorbs representation error in fractions like 1000/1216.
    let n_train = ((n as f64) * train_fraction + 1e-9).floor() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::invalid(
            "train_fraction",
            format!("splitting {n} patients at {train_fraction} leaves one side empty"),
        ));
    }
    let mut order: Vec<usize> = (0..n).collect();
    RandomSource::new(seed).child("split").shuffle(&mut order);
    let mut is_train = vec![false; n];
    order[..n_train].iter().for_each(|&i| is_train[i] = true);

    let (train, test): (Vec<_>, Vec<_>) = db.patients.iter().cloned().zip(is_train).partition(|(_, t)| *t);
    Ok((
        PatientDatabase::new(train.into_iter().map(|(p, _)| p).collect())?,
        PatientDatabase::new(test.into_iter().map(|(p, _)| p).collect())?,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    ratio: f64,
}

impl SamplingPlan {
    pub fn new(ratio: f64) -> Result<Self> {
        if !(ratio > 0.0 && ratio <= 1.0) {
            return Err(Error::invalid(
                "sampling_ratio",
                format!("must lie in (0, 1], got {ratio}"),
            ));
        }
        Ok(Self { ratio })
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }
}

/// Bernoulli subsampling: each patient is kept independently with
/// probability `plan.ratio()`. The result may be empty.
pub fn sample_patients<'a>(
    db: &'a PatientDatabase,
    plan: &SamplingPlan,
    rng: &mut RandomSource,
) -> Vec<&'a PatientRecord> {
    db.patients.iter().filter(|_| rng.bernoulli(plan.ratio)).collect()
}

fn csv_header(dim: usize) -> Vec<String> {
    let mut header = vec!["patient_id".to_string(), "y".to_string()];
    header.extend((1..=dim).map(|k| format!("x_{k}")));
    header
}

/// Reads `patient_id,y,x_1,...,x_d` rows. Rows are grouped by patient id in
/// order of first appearance; within a patient, row order is kept.
pub fn load_csv(path: impl AsRef<Path>) -> Result<PatientDatabase> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, &path.display().to_string())
}

pub fn read_csv<R: std::io::Read>(reader: R, origin: &str) -> Result<PatientDatabase> {
    let err = |line: u64, message: String| Error::Parse {
        path: origin.to_string(),
        line,
        message,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut records = rdr.records();

    let header = match records.next() {
        None => return Err(err(1, "empty file".to_string())),
        Some(r) => r.map_err(|e| err(1, e.to_string()))?,
    };
    if header.len() < 3 {
        return Err(err(
            1,
            "header needs patient_id, y and at least one feature column".to_string(),
        ));
    }
    let dim = header.len() - 2;
    let expected = csv_header(dim);
    for (i, (got, want)) in header.iter().zip(&expected).enumerate() {
        if got != want {
            return Err(err(1, format!("column {} is `{got}`, expected `{want}`", i + 1)));
        }
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<Example>> = HashMap::new();
    for record in records {
        let record = record.map_err(|e| err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record.get(0) == Some("") {
            continue;
        }
        if record.len() != dim + 2 {
            return Err(err(
                line,
                format!("expected {} fields ({dim} features), found {}", dim + 2, record.len()),
            ));
        }
        let id = record[0].to_string();
        if id.is_empty() {
            return Err(err(line, "empty patient_id".to_string()));
        }
        let y = match &record[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(err(line, format!("label `{other}` is not 0 or 1"))),
        };
        let x = record
            .iter()
            .skip(2)
            .enumerate()
            .map(|(k, cell)| match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(err(line, format!("x_{} = `{cell}` is not a finite number", k + 1))),
            })
            .collect::<Result<Vec<f64>>>()?;
        if !groups.contains_key(&id) {
            order.push(id.clone());
        }
        groups.entry(id).or_default().push(Example::new(x, y));
    }
    if order.is_empty() {
        return Err(err(1, "no data rows".to_string()));
    }
    let patients = order
        .into_iter()
        .map(|id| {
            let examples = groups.remove(&id).unwrap_or_default();
            PatientRecord { id, examples }
        })
        .collect();
    PatientDatabase::new(patients)
}

pub fn write_csv(db: &PatientDatabase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    write_csv_to(db, &mut out).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn write_csv_to<W: Write>(db: &PatientDatabase, out: &mut W) -> std::io::Result<()> {
    writeln!(out, "{}", csv_header(db.feature_dim).join(","))?;
    for p in &db.patients {
        for ex in &p.examples {
            write!(out, "{},{}", p.id, ex.y)?;
            for v in &ex.x {
                write!(out, ",{v:?}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_db(n: usize) -> PatientDatabase {
        generate_synthetic(&SynthParams::new(n, 3, 2, 1.0), 1).unwrap()
    }

    #[test]
    fn synthetic_shape() {
        let db = generate_synthetic(&SynthParams::new(40, 7, 5, 2.0), 3).unwrap();
        assert_eq!(db.num_patients(), 40);
        assert_eq!(db.num_examples(), 280);
        assert_eq!(db.feature_dim(), 5);
        assert!(db.examples().all(|e| e.x.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(db, generate_synthetic(&SynthParams::new(40, 7, 5, 2.0), 3).unwrap());
    }

    #[test]
    fn synthetic_rejects_bad_counts() {
        assert!(generate_synthetic(&SynthParams::new(0, 7, 5, 2.0), 3).is_err());
        assert!(generate_synthetic(&SynthParams::new(1, 0, 5, 2.0), 3).is_err());
        assert!(generate_synthetic(&SynthParams::new(1, 1, 0, 2.0), 3).is_err());
        assert!(generate_synthetic(&SynthParams::new(1, 1, 1, -2.0), 3).is_err());
    }

    #[test]
    fn database_invariants() {
        let ex = || Example::new(vec![0.5], 0);
        let rec = |id: &str| PatientRecord {
            id: id.into(),
            examples: vec![ex()],
        };
        assert!(PatientDatabase::new(vec![]).is_err());
        assert!(PatientDatabase::new(vec![rec("a"), rec("a")]).is_err());
        assert!(PatientDatabase::new(vec![
            rec("a"),
            PatientRecord {
                id: "b".into(),
                examples: vec![]
            }
        ])
        .is_err());
        let wide = PatientRecord {
            id: "c".into(),
            examples: vec![Example::new(vec![0.1, 0.2], 1)],
        };
        assert!(PatientDatabase::new(vec![rec("a"), wide]).is_err());
        let bad_label = PatientRecord {
            id: "d".into(),
            examples: vec![Example::new(vec![0.1], 2)],
        };
        assert!(PatientDatabase::new(vec![bad_label]).is_err());
    }

    #[test]
    fn split_sizes() {
        let db = tiny_db(1216);
        let (train, test) = split(&db, 1000.0 / 1216.0, 5).unwrap();
        assert_eq!((train.num_patients(), test.num_patients()), (1000, 216));

        let two = tiny_db(2);
        let (a, b) = split(&two, 0.99, 5).unwrap();
        assert_eq!((a.num_patients(), b.num_patients()), (1, 1));

        assert!(split(&two, 0.2, 5).is_err());
        assert!(split(&two, 1.0, 5).is_err());
        assert!(split(&two, 0.0, 5).is_err());
    }

    #[test]
    fn split_is_disjoint_and_deterministic() {
        let db = tiny_db(100);
        let (a, b) = split(&db, 0.7, 9).unwrap();
        let ids_a: HashSet<_> = a.patients().iter().map(|p| p.id.clone()).collect();
        assert!(b.patients().iter().all(|p| !ids_a.contains(&p.id)));
        assert_eq!(ids_a.len() + b.num_patients(), 100);
        assert_eq!(split(&db, 0.7, 9).unwrap(), (a, b));
        let (c, _) = split(&db, 0.7, 10).unwrap();
        assert_ne!(c, split(&db, 0.7, 9).unwrap().0);
    }

    #[test]
    fn sampling_plan_bounds() {
        assert!(SamplingPlan::new(0.0).is_err());
        assert!(SamplingPlan::new(1.5).is_err());
        assert!(SamplingPlan::new(1.0).is_ok());
    }

    #[test]
    fn full_sampling_takes_everyone() {
        let db = tiny_db(30);
        let mut rng = RandomSource::new(1);
        assert_eq!(
            sample_patients(&db, &SamplingPlan::new(1.0).unwrap(), &mut rng).len(),
            30
        );
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let db = tiny_db(200);
        let plan = SamplingPlan::new(0.1).unwrap();
        let root = RandomSource::new(77);
        let a: Vec<_> = sample_patients(&db, &plan, &mut root.child_u64(4))
            .iter()
            .map(|p| &p.id)
            .cloned()
            .collect();
        let b: Vec<_> = sample_patients(&db, &plan, &mut root.child_u64(4))
            .iter()
            .map(|p| &p.id)
            .cloned()
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn bernoulli_batch_size_statistics() {
        // 10,000 rounds, N_p = 100, p = 0.1: mean within 3 standard errors.
        let db = tiny_db(100);
        let plan = SamplingPlan::new(0.1).unwrap();
        let root = RandomSource::new(2);
        let rounds = 10_000;
        let total: usize = (0..rounds)
            .map(|t| sample_patients(&db, &plan, &mut root.child_u64(t)).len())
            .sum();
        let mean = total as f64 / rounds as f64;
        let tol = 3.0 * (100.0 * 0.1 * 0.9 / rounds as f64).sqrt();
        assert!((mean - 10.0).abs() < tol, "mean {mean}");
    }

    #[test]
    fn csv_groups_rows_by_patient() {
        let text = "patient_id,y,x_1,x_2\na,1,0.1,0.2\nb,0,0.3,0.4\na,0,0.5,0.6\n";
        let db = read_csv(text.as_bytes(), "mem").unwrap();
        assert_eq!(db.num_patients(), 2);
        assert_eq!(db.patients()[0].id, "a");
        assert_eq!(
            db.patients()[0].examples,
            vec![Example::new(vec![0.1, 0.2], 1), Example::new(vec![0.5, 0.6], 0)]
        );
        assert_eq!(db.feature_dim(), 2);
    }

    fn parse_error_line(text: &str) -> (u64, String) {
        match read_csv(text.as_bytes(), "data.csv") {
            Err(Error::Parse { line, message, path }) => {
                assert_eq!(path, "data.csv");
                (line, message)
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_errors_name_the_line() {
        let (line, msg) = parse_error_line("patient_id,y,x_1,x_2\na,1,0.1,0.2\nb,0,0.3\n");
        assert_eq!(line, 3);
        assert!(msg.contains("expected 4 fields"), "{msg}");

        let (line, _) = parse_error_line("patient_id,y,x_1\na,1,0.1\na,1,zz\n");
        assert_eq!(line, 3);
        let (line, _) = parse_error_line("patient_id,y,x_1\na,7,0.1\n");
        assert_eq!(line, 2);
        let (line, _) = parse_error_line("patient,y,x_1\na,1,0.1\n");
        assert_eq!(line, 1);
        let (line, msg) = parse_error_line("");
        assert_eq!(line, 1);
        assert!(msg.contains("empty"));
        let (_, msg) = parse_error_line("patient_id,y,x_1\n");
        assert!(msg.contains("no data rows"));
        let (_, msg) = parse_error_line("patient_id,y\na,1\n");
        assert!(msg.contains("feature"));
    }

    #[test]
    fn csv_round_trip() {
        let db = generate_synthetic(&SynthParams::new(12, 4, 3, 1.5), 8).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.csv");
        write_csv(&db, &path).unwrap();
        assert_eq!(load_csv(&path).unwrap(), db);
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_csv("/nonexistent/db.csv"), Err(Error::Io { .. })));
    }
}
