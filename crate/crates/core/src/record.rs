//! Patient record schema, line-delimited ingestion and exclusion filtering.
//!
//! A record file holds one JSON object per line. Keys match the
//! [`PatientRecord`] field names; unknown keys (and values that fail to parse
//! for a known key) are preserved verbatim in [`PatientRecord::extra`], so a
//! record survives ingest -> serialize -> ingest unchanged.
//!
//! All timestamps are hours from admission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize, Serializer};
use serde_json::Value;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sex {
    Male,
    Female,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoking {
    Yes,
    No,
    Unknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pathology {
    Adenocarcinoma,
    Squamous,
    Neuroendocrine,
    SoftTissueSarcoma,
    Other,
}

impl Pathology {
    /// Ordinal code used by the feature matrix.
    pub fn ordinal(self) -> f64 {
        match self {
            Pathology::Adenocarcinoma => 0.0,
            Pathology::Squamous => 1.0,
            Pathology::Neuroendocrine => 2.0,
            Pathology::SoftTissueSarcoma => 3.0,
            Pathology::Other => 4.0,
        }
    }
}

/// An ordinal staging value where "unknown" is an explicit state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Staging {
    Known(u8),
    Unknown,
}

impl Staging {
    pub fn value(self) -> Option<u8> {
        match self {
            Staging::Known(v) => Some(v),
            Staging::Unknown => None,
        }
    }
}

impl Serialize for Staging {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Staging::Known(v) => s.serialize_u8(*v),
            Staging::Unknown => s.serialize_str("unknown"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedicationEntry {
    pub time_h: f64,
    pub drug_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dose_mg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<String>,
}

impl MedicationEntry {
    pub fn new(time_h: f64, drug_text: impl Into<String>, dose_mg: Option<f64>) -> Self {
        Self {
            time_h,
            drug_text: drug_text.into(),
            dose_mg,
            route: None,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.time_h.is_finite() && self.time_h >= 0.0) {
            return Err(format!("medication time_h {} is not >= 0", self.time_h));
        }
        if let Some(d) = self.dose_mg {
            if !(d.is_finite() && d > 0.0) {
                return Err(format!("medication dose_mg {d} is not > 0"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClinicalNote {
    pub time_h: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PainReading {
    Text(String),
    Nrs(u8),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PainObservation {
    pub time_h: f64,
    #[serde(flatten)]
    pub reading: PainReading,
}

impl PainObservation {
    pub fn text(time_h: f64, text: impl Into<String>) -> Self {
        Self {
            time_h,
            reading: PainReading::Text(text.into()),
        }
    }

    pub fn nrs(time_h: f64, score: u8) -> Self {
        Self {
            time_h,
            reading: PainReading::Nrs(score),
        }
    }
}

/// One admission.
#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct PatientRecord {
    pub patient_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub age: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sex: Option<Sex>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub smoking: Option<Smoking>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pathology: Option<Pathology>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tnm_stage: Option<Staging>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_class: Option<Staging>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub labs: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub medication_log: Vec<MedicationEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub chief_complaint: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub clinical_notes: Vec<ClinicalNote>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub pain_observations: Vec<PainObservation>,
    /// Unknown keys and unparseable values, kept verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl PatientRecord {
    pub fn new(patient_id: impl Into<String>) -> Self {
        Self {
            patient_id: patient_id.into(),
            ..Default::default()
        }
    }

    /// Parses one record line. Scalar fields that fail to parse are kept in
    /// `extra` and count as missing; structural violations reject the line.
    pub fn from_json_line(line: &str) -> std::result::Result<Self, String> {
        let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
        Self::from_value(value)
    }

    pub fn from_value(value: Value) -> std::result::Result<Self, String> {
        let Value::Object(map) = value else {
            return Err("record is not a JSON object".into());
        };
        let mut rec = PatientRecord::default();
        let mut id = None;
        for (key, v) in map {
            if v.is_null() {
                continue;
            }
            match key.as_str() {
                "patient_id" => match v.as_str().map(str::trim) {
                    Some(s) if !s.is_empty() => id = Some(s.to_string()),
                    _ => return Err("patient_id is empty or not a string".into()),
                },
                "age" => match v.as_u64().and_then(|a| u32::try_from(a).ok()) {
                    Some(a) => rec.age = Some(a),
                    None => keep(&mut rec.extra, key, v),
                },
                "sex" => match parse_enum::<Sex>(&v) {
                    Some(s) => rec.sex = Some(s),
                    None => keep(&mut rec.extra, key, v),
                },
                "smoking" => match parse_enum::<Smoking>(&v) {
                    Some(s) => rec.smoking = Some(s),
                    None => keep(&mut rec.extra, key, v),
                },
                "pathology" => match parse_enum::<Pathology>(&v) {
                    Some(p) => rec.pathology = Some(p),
                    None => keep(&mut rec.extra, key, v),
                },
                "tnm_stage" => match parse_staging(&v, 1, 4) {
                    Some(s) => rec.tnm_stage = Some(s),
                    None => keep(&mut rec.extra, key, v),
                },
                "n_class" => match parse_staging(&v, 0, 3) {
                    Some(s) => rec.n_class = Some(s),
                    None => keep(&mut rec.extra, key, v),
                },
                "labs" => {
                    let Value::Object(labs) = v else {
                        return Err("labs is not an object".into());
                    };
                    for (code, lv) in labs {
                        match lv.as_f64() {
                            Some(x) if x.is_finite() => {
                                rec.labs.insert(code, x);
                            }
                            _ if lv.is_null() => {}
                            _ => {
                                rec.extra.insert(format!("labs.{code}"), lv);
                            }
                        }
                    }
                }
                "medication_log" => {
                    let entries: Vec<MedicationEntry> = serde_json::from_value(v)
                        .map_err(|e| format!("medication_log: {e}"))?;
                    for e in &entries {
                        e.validate()?;
                    }
                    rec.medication_log = entries;
                }
                "chief_complaint" => match v.as_str() {
                    Some(s) if !s.trim().is_empty() => rec.chief_complaint = Some(s.to_string()),
                    Some(_) => {}
                    None => keep(&mut rec.extra, key, v),
                },
                "clinical_notes" => {
                    let notes: Vec<ClinicalNote> = serde_json::from_value(v)
                        .map_err(|e| format!("clinical_notes: {e}"))?;
                    for n in &notes {
                        check_time(n.time_h, "clinical note")?;
                    }
                    rec.clinical_notes = notes;
                }
                "pain_observations" => {
                    let obs: Vec<PainObservation> = serde_json::from_value(v)
                        .map_err(|e| format!("pain_observations: {e}"))?;
                    for o in &obs {
                        check_time(o.time_h, "pain observation")?;
                        if let PainReading::Nrs(s) = o.reading {
                            if s > 10 {
                                return Err(format!("pain observation NRS {s} outside 0-10"));
                            }
                        }
                    }
                    rec.pain_observations = obs;
                }
                _ => keep(&mut rec.extra, key, v),
            }
        }
        rec.patient_id = id.ok_or_else(|| "missing patient_id".to_string())?;
        Ok(rec)
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("record serialization is infallible")
    }

    pub fn is_present(&self, field: &RecordField) -> bool {
        match field {
            RecordField::Age => self.age.is_some(),
            RecordField::Sex => self.sex.is_some(),
            RecordField::Smoking => self.smoking.is_some(),
            RecordField::Pathology => self.pathology.is_some(),
            RecordField::TnmStage => self.tnm_stage.is_some(),
            RecordField::NClass => self.n_class.is_some(),
            RecordField::Lab(code) => self.labs.contains_key(code),
            RecordField::MedicationLog => !self.medication_log.is_empty(),
            RecordField::ChiefComplaint => self.chief_complaint.is_some(),
            RecordField::ClinicalNotes => !self.clinical_notes.is_empty(),
            RecordField::PainObservations => !self.pain_observations.is_empty(),
        }
    }
}

fn keep(extra: &mut BTreeMap<String, Value>, key: String, v: Value) {
    extra.insert(key, v);
}

fn check_time(t: f64, what: &str) -> std::result::Result<(), String> {
    if t.is_finite() && t >= 0.0 {
        Ok(())
    } else {
        Err(format!("{what} time_h {t} is not >= 0"))
    }
}

fn parse_enum<T: for<'de> Deserialize<'de>>(v: &Value) -> Option<T> {
    let s = v.as_str()?.trim().to_ascii_lowercase();
    serde_json::from_value(Value::String(s)).ok()
}

fn parse_staging(v: &Value, lo: u8, hi: u8) -> Option<Staging> {
    match v {
        Value::String(s) if s.trim().eq_ignore_ascii_case("unknown") => Some(Staging::Unknown),
        Value::Number(n) => n
            .as_u64()
            .and_then(|x| u8::try_from(x).ok())
            .filter(|x| (lo..=hi).contains(x))
            .map(Staging::Known),
        _ => None,
    }
}

/// A field whose presence is counted by [`missingness`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum RecordField {
    Age,
    Sex,
    Smoking,
    Pathology,
    TnmStage,
    NClass,
    Lab(String),
    MedicationLog,
    ChiefComplaint,
    ClinicalNotes,
    PainObservations,
}

impl RecordField {
    /// Demographics, staging, the seven reference labs, medication log and
    /// chief complaint.
    pub fn default_expected() -> Vec<RecordField> {
        let mut v = vec![
            RecordField::Age,
            RecordField::Sex,
            RecordField::Smoking,
            RecordField::Pathology,
            RecordField::TnmStage,
            RecordField::NClass,
        ];
        v.extend(
            ["AST", "ALT", "HCT", "MCV", "RBC", "MCH", "GGT"]
                .iter()
                .map(|c| RecordField::Lab((*c).to_string())),
        );
        v.push(RecordField::MedicationLog);
        v.push(RecordField::ChiefComplaint);
        v
    }
}

impl std::str::FromStr for RecordField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "age" => RecordField::Age,
            "sex" => RecordField::Sex,
            "smoking" => RecordField::Smoking,
            "pathology" => RecordField::Pathology,
            "tnm_stage" => RecordField::TnmStage,
            "n_class" => RecordField::NClass,
            "medication_log" => RecordField::MedicationLog,
            "chief_complaint" => RecordField::ChiefComplaint,
            "clinical_notes" => RecordField::ClinicalNotes,
            "pain_observations" => RecordField::PainObservations,
            other => match other.strip_prefix("lab:") {
                Some(code) if !code.is_empty() => RecordField::Lab(code.to_string()),
                _ => return Err(Error::Argument(format!("unknown record field `{other}`"))),
            },
        })
    }
}

impl fmt::Display for RecordField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RecordField::Age => f.write_str("age"),
            RecordField::Sex => f.write_str("sex"),
            RecordField::Smoking => f.write_str("smoking"),
            RecordField::Pathology => f.write_str("pathology"),
            RecordField::TnmStage => f.write_str("tnm_stage"),
            RecordField::NClass => f.write_str("n_class"),
            RecordField::Lab(c) => write!(f, "lab:{c}"),
            RecordField::MedicationLog => f.write_str("medication_log"),
            RecordField::ChiefComplaint => f.write_str("chief_complaint"),
            RecordField::ClinicalNotes => f.write_str("clinical_notes"),
            RecordField::PainObservations => f.write_str("pain_observations"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Provenance {
    pub source: PathBuf,
    /// Seconds since the Unix epoch. Never written into pipeline outputs.
    pub ingested_unix_s: u64,
}

/// An immutable set of records with unique patient ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    records: Vec<PatientRecord>,
    pub provenance: Provenance,
}

impl Cohort {
    pub fn new(records: Vec<PatientRecord>, source: impl Into<PathBuf>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for r in &records {
            if r.patient_id.trim().is_empty() {
                return Err(Error::Argument("empty patient_id".into()));
            }
            if !seen.insert(r.patient_id.as_str()) {
                return Err(Error::Argument(format!(
                    "duplicate patient_id `{}`",
                    r.patient_id
                )));
            }
        }
        Ok(Self {
            records,
            provenance: Provenance {
                source: source.into(),
                ingested_unix_s: now_unix(),
            },
        })
    }

    pub fn records(&self) -> &[PatientRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, patient_id: &str) -> Option<&PatientRecord> {
        self.records.iter().find(|r| r.patient_id == patient_id)
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        write_records(path, &self.records)
    }
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

pub fn write_records(path: &Path, records: &[PatientRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&r.to_json_line());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RejectedLine {
    /// 1-based line number.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub rejected: Vec<RejectedLine>,
}

/// Reads a line-delimited record file. Malformed lines are skipped and
/// listed in the report; only an unreadable file is an error.
pub fn ingest_cohort(path: &Path, schema_version: &str) -> Result<(Cohort, IngestReport)> {
    if schema_version != SCHEMA_VERSION {
        return Err(Error::Argument(format!(
            "unsupported schema version `{schema_version}` (expected {SCHEMA_VERSION})"
        )));
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    let mut seen = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match PatientRecord::from_json_line(line) {
            Ok(rec) => {
                if seen.insert(rec.patient_id.clone()) {
                    records.push(rec);
                } else {
                    report.rejected.push(RejectedLine {
                        line: i + 1,
                        reason: format!("duplicate patient_id `{}`", rec.patient_id),
                    });
                }
            }
            Err(reason) => {
                log::warn!("{}:{}: {reason}", path.display(), i + 1);
                report.rejected.push(RejectedLine {
                    line: i + 1,
                    reason,
                })
            }
        }
    }
    Ok((Cohort::new(records, path)?, report))
}

/// Fraction of `expected` fields absent (or unparseable) in `record`.
pub fn missingness(record: &PatientRecord, expected: &[RecordField]) -> Result<f64> {
    if expected.is_empty() {
        return Err(Error::Argument("expected field list is empty".into()));
    }
    let absent = expected.iter().filter(|f| !record.is_present(f)).count();
    Ok(absent as f64 / expected.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExclusionPolicy {
    pub max_missing: f64,
    pub min_pain_observations: usize,
    pub expected_fields: Vec<RecordField>,
}

impl Default for ExclusionPolicy {
    fn default() -> Self {
        Self {
            max_missing: 0.30,
            min_pain_observations: 3,
            expected_fields: RecordField::default_expected(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Exclusion {
    pub patient_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExclusionReport {
    pub excluded: Vec<Exclusion>,
}

impl ExclusionReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["patient_id", "reason"])?;
        for e in &self.excluded {
            w.write_record([&e.patient_id, &e.reason])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub const INSUFFICIENT_PAIN: &str = "insufficient pain assessments";

/// Keeps records with missingness <= `max_missing` and at least
/// `min_pain_observations` pain observations.
pub fn apply_exclusions(
    cohort: &Cohort,
    policy: &ExclusionPolicy,
) -> Result<(Cohort, ExclusionReport)> {
    if !(0.0..=1.0).contains(&policy.max_missing) {
        return Err(Error::Argument(format!(
            "max_missing {} outside [0, 1]",
            policy.max_missing
        )));
    }
    let mut kept = Vec::new();
    let mut report = ExclusionReport::default();
    for rec in cohort.records() {
        let mut reasons = Vec::new();
        if rec.pain_observations.len() < policy.min_pain_observations {
            reasons.push(INSUFFICIENT_PAIN.to_string());
        }
        let miss = missingness(rec, &policy.expected_fields)?;
        if miss > policy.max_missing {
            reasons.push(format!(
                "missing data {miss:.2} exceeds {:.2}",
                policy.max_missing
            ));
        }
        if reasons.is_empty() {
            kept.push(rec.clone());
        } else {
            report.excluded.push(Exclusion {
                patient_id: rec.patient_id.clone(),
                reason: reasons.join("; "),
            });
        }
    }
    let mut out = Cohort::new(kept, cohort.provenance.source.clone())?;
    out.provenance = cohort.provenance.clone();
    Ok((out, report))
}

/// Writes the rejected-line report as CSV (`line,reason`).
pub fn write_ingest_report(path: &Path, report: &IngestReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["line", "reason"])?;
    for r in &report.rejected {
        w.write_record([r.line.to_string(), r.reason.clone()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
