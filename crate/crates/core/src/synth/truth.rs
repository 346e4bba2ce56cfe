use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SynthDataset;
use crate::error::Result;
use crate::graph::{write_fkg, FkgPaths, LabelRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub company_key: String,
    pub year: i32,
    pub clean_label: u8,
    pub noisy_label: u8,
    /// Probability that the company-year would be hidden were it a fraud.
    pub flip_prob: f64,
    pub violation_year: Option<i32>,
    pub declared_year: Option<i32>,
}

/// Per company-year truth in company-index order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    pub records: Vec<TruthRecord>,
}

impl GroundTruth {
    pub fn clean_labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.clean_label).collect()
    }

    pub fn noisy_labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.noisy_label).collect()
    }

    /// Records whose observed label is fraud while the clean one is not; always zero by construction.
    pub fn false_alarms(&self) -> usize {
        self.records
            .iter()
            .filter(|r| r.clean_label == 0 && r.noisy_label == 1)
            .count()
    }

    pub fn label_records(&self) -> Vec<Option<LabelRecord>> {
        self.records
            .iter()
            .map(|r| {
                Some(LabelRecord {
                    fraud: r.noisy_label == 1,
                    violation_year: r.violation_year,
                    declared_year: r.declared_year,
                    record_year: r.year,
                })
            })
            .collect()
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let records = r.deserialize().collect::<std::result::Result<Vec<TruthRecord>, _>>()?;
        Ok(Self { records })
    }
}

pub fn write_ground_truth(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &truth.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// The three graph files plus `ground_truth.csv` in `dir`.
pub fn write_dataset(dir: &Path, data: &SynthDataset) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_fkg(&data.fkg, &FkgPaths::in_dir(dir))?;
    write_ground_truth(&dir.join("ground_truth.csv"), &data.truth)
}
