//! Dataset index: case records, split assignments and CSV persistence.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::Data(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Augmented,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Original => "original",
            Provenance::Augmented => "augmented",
        })
    }
}

impl std::str::FromStr for Provenance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "original" => Ok(Provenance::Original),
            "augmented" => Ok(Provenance::Augmented),
            other => Err(Error::Data(format!("unknown provenance '{other}'"))),
        }
    }
}

/// One scan: identity, file location, label and bookkeeping state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseRecord {
    pub case_id: String,
    pub patient_id: String,
    pub path: PathBuf,
    /// 0 = normal, 1 = PAS.
    pub label: u8,
    pub split: Split,
    pub provenance: Provenance,
}

impl CaseRecord {
    pub fn new(
        case_id: impl Into<String>,
        patient_id: impl Into<String>,
        path: impl Into<PathBuf>,
        label: u8,
    ) -> Result<CaseRecord> {
        if label > 1 {
            return Err(Error::Data(format!("label must be 0 or 1, got {label}")));
        }
        Ok(CaseRecord {
            case_id: case_id.into(),
            patient_id: patient_id.into(),
            path: path.into(),
            label,
            split: Split::Unassigned,
            provenance: Provenance::Original,
        })
    }
}

/// Ordered list of case records plus the seed used for any randomized
/// construction step.
#[derive(Debug, Clone, Default)]
pub struct Manifest {
    records: Vec<CaseRecord>,
    pub seed: u64,
}

impl Manifest {
    /// Build a manifest, enforcing unique case ids, patient-disjoint splits
    /// and train-only augmented records.
    pub fn new(records: Vec<CaseRecord>, seed: u64) -> Result<Manifest> {
        let m = Manifest { records, seed };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut patient_splits: HashMap<&str, Split> = HashMap::new();
        for r in &self.records {
            if r.label > 1 {
                return Err(Error::Data(format!("case {}: label {} out of range", r.case_id, r.label)));
            }
            if !ids.insert(r.case_id.as_str()) {
                return Err(Error::Data(format!("duplicate case_id '{}'", r.case_id)));
            }
            if r.provenance == Provenance::Augmented && r.split != Split::Train {
                return Err(Error::Data(format!(
                    "augmented case {} must be in the train split, found {}",
                    r.case_id, r.split
                )));
            }
            if r.split != Split::Unassigned {
                match patient_splits.get(r.patient_id.as_str()) {
                    Some(&s) if s != r.split => {
                        return Err(Error::Data(format!(
                            "patient {} appears in both {s} and {}",
                            r.patient_id, r.split
                        )));
                    }
                    _ => {
                        patient_splits.insert(r.patient_id.as_str(), r.split);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn records(&self) -> &[CaseRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn push(&mut self, record: CaseRecord) -> Result<()> {
        self.records.push(record);
        if let Err(e) = self.validate() {
            self.records.pop();
            return Err(e);
        }
        Ok(())
    }

    /// Apply an edit to every record, then re-validate the invariants.
    pub fn update<F: FnMut(&mut CaseRecord)>(&mut self, mut f: F) -> Result<()> {
        let backup = self.records.clone();
        for r in &mut self.records {
            f(r);
        }
        if let Err(e) = self.validate() {
            self.records = backup;
            return Err(e);
        }
        Ok(())
    }

    pub fn split_records(&self, split: Split) -> Vec<&CaseRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    /// Count records per (split, label) bucket.
    pub fn counts(&self, split: Split) -> [usize; 2] {
        let mut c = [0usize; 2];
        for r in &self.records {
            if r.split == split {
                c[r.label as usize] += 1;
            }
        }
        c
    }

    /// Persist as CSV with a leading `# format_version` comment line.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(file, "# format_version={MANIFEST_FORMAT_VERSION}").map_err(|e| Error::io(path, e))?;
        writeln!(file, "# seed={}", self.seed).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        w.write_record(["case_id", "patient_id", "path", "label", "split", "provenance"])?;
        for r in &self.records {
            w.write_record([
                r.case_id.as_str(),
                r.patient_id.as_str(),
                &r.path.to_string_lossy(),
                &r.label.to_string(),
                &r.split.to_string(),
                &r.provenance.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Manifest> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut seed = 0u64;
        let mut body = String::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.trim().strip_prefix("seed=") {
                    seed = v.trim().parse().unwrap_or(0);
                }
                continue;
            }
            body.push_str(&line);
            body.push('\n');
        }
        let mut rdr = csv::Reader::from_reader(body.as_bytes());
        let mut records = Vec::new();
        for row in rdr.records() {
            let row = row?;
            if row.len() < 6 {
                return Err(Error::Data(format!("{}: short manifest row {row:?}", path.display())));
            }
            let label: u8 = row[3]
                .parse()
                .map_err(|_| Error::Data(format!("bad label '{}' for case {}", &row[3], &row[0])))?;
            let mut rec = CaseRecord::new(&row[0], &row[1], &row[2], label)?;
            rec.split = row[4].parse()?;
            rec.provenance = row[5].parse()?;
            records.push(rec);
        }
        Manifest::new(records, seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn rec(case: &str, patient: &str, label: u8, split: Split) -> CaseRecord {
        let mut r = CaseRecord::new(case, patient, format!("{case}.nii"), label).unwrap();
        r.split = split;
        r
    }

    #[test]
    fn duplicate_case_ids_are_rejected() {
        let r = rec("c1", "p1", 0, Split::Train);
        assert!(Manifest::new(vec![r.clone(), r], 0).is_err());
    }

    #[test]
    fn patient_spanning_two_splits_is_rejected() {
        let a = rec("c1", "p1", 0, Split::Train);
        let b = rec("c2", "p1", 0, Split::Val);
        match Manifest::new(vec![a, b], 0) {
            Err(Error::Data(msg)) => assert!(msg.contains("patient"), "{msg}"),
            other => panic!("expected DataError, got {other:?}"),
        }
    }

    #[test]
    fn augmented_records_outside_train_are_rejected() {
        let mut r = rec("c1", "p1", 1, Split::Test);
        r.provenance = Provenance::Augmented;
        assert!(Manifest::new(vec![r], 0).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let mut records = vec![rec("c1", "p1", 0, Split::Train), rec("c2", "p2", 1, Split::Test)];
        records[0].provenance = Provenance::Original;
        let m = Manifest::new(records, 42).unwrap();
        let tmp = tempdir().unwrap();
        let p = tmp.path().join("manifest.csv");
        m.save(&p).unwrap();
        let loaded = Manifest::load(&p).unwrap();
        assert_eq!(loaded.seed, 42);
        assert_eq!(loaded.records(), m.records());
        // first line is the format_version marker
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("# format_version=1"));
    }

    #[test]
    fn bad_label_is_rejected() {
        assert!(CaseRecord::new("c", "p", "x.nii", 2).is_err());
    }
}
