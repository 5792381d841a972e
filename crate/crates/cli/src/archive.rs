//! Crop archives.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "NSCROP1"  u32 version  u64 count  u32 S
//! count × S³ f32 voxels
//! count × (u64 patient id, u32 rank, u8 nodule label, u8 patient label)
//! 32-byte SHA-256 of everything above
//! ```
//!
//! Labels use 255 for "unknown".

use std::path::Path;

use nodule_core::aggregate::PatientCase;
use nodule_core::preprocess::NoduleCrop;
use nodule_core::selftrain::TrainingSet;
use nodule_core::synth::{Cohort, LabeledDataset};
use sha2::{Digest, Sha256};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 7] = b"NSCROP1";
pub const VERSION: u32 = 1;
const UNKNOWN: u8 = 255;

#[derive(Clone, Debug, PartialEq)]
pub struct CropRecord {
    pub crop: NoduleCrop,
    pub label: Option<u8>,
    pub patient_label: Option<u8>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CropArchive {
    pub records: Vec<CropRecord>,
}

impl CropArchive {
    pub fn from_labeled(data: &LabeledDataset) -> Self {
        let records = data
            .crops
            .iter()
            .zip(&data.labels)
            .map(|(crop, &label)| CropRecord {
                crop: crop.clone(),
                label: Some(label),
                patient_label: None,
            })
            .collect();
        CropArchive { records }
    }

    /// Nodule labels are withheld; patient labels kept when `with_labels`.
    pub fn from_cohort(cohort: &Cohort, with_labels: bool) -> Self {
        let records = cohort
            .patients
            .iter()
            .flat_map(|p| {
                p.case.crops.iter().map(move |crop| CropRecord {
                    crop: crop.clone(),
                    label: None,
                    patient_label: if with_labels { p.case.label } else { None },
                })
            })
            .collect();
        CropArchive { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn crops(&self) -> Vec<NoduleCrop> {
        self.records.iter().map(|r| r.crop.clone()).collect()
    }

    pub fn training_set(&self) -> CliResult<TrainingSet> {
        let mut crops = Vec::with_capacity(self.len());
        let mut labels = Vec::with_capacity(self.len());
        for (i, r) in self.records.iter().enumerate() {
            let label = r.label.ok_or_else(|| CliError::Data(format!("crop {i} has no nodule label")))?;
            crops.push(r.crop.clone());
            labels.push(label);
        }
        Ok(TrainingSet::from_labels(crops, &labels)?)
    }

    /// Groups consecutive crops of one patient into cases.
    pub fn cases(&self) -> CliResult<(Vec<PatientCase>, Vec<u8>)> {
        let mut cases = Vec::new();
        let mut labels = Vec::new();
        let mut i = 0;
        while i < self.records.len() {
            let id = self.records[i].crop.patient_id;
            let end = i + self.records[i..].iter().take_while(|r| r.crop.patient_id == id).count();
            let label = self.records[i]
                .patient_label
                .ok_or_else(|| CliError::Data(format!("patient {id} has no label")))?;
            let crops = self.records[i..end].iter().map(|r| r.crop.clone()).collect();
            cases.push(PatientCase::new(id, crops, Some(label))?);
            labels.push(label);
            i = end;
        }
        Ok((cases, labels))
    }

    pub fn encode(&self) -> CliResult<Vec<u8>> {
        let size = self.records.first().map_or(0, |r| r.crop.size);
        if self.records.iter().any(|r| r.crop.size != size) {
            return Err(CliError::Data("archive crops must share one size".into()));
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(size as u32).to_le_bytes());
        for r in &self.records {
            for &v in &r.crop.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for r in &self.records {
            out.extend_from_slice(&r.crop.patient_id.to_le_bytes());
            out.extend_from_slice(&(r.crop.rank as u32).to_le_bytes());
            out.push(r.label.unwrap_or(UNKNOWN));
            out.push(r.patient_label.unwrap_or(UNKNOWN));
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> CliResult<Self> {
        let bad = |m: &str| CliError::Data(format!("crop archive: {m}"));
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("bad magic"));
        }
        let header = MAGIC.len() + 4 + 8 + 4;
        if bytes.len() < header + 32 {
            return Err(bad("checksum mismatch"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        let version = u32::from_le_bytes(body[7..11].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(&format!("version {version}, expected {VERSION}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch"));
        }
        let count = u64::from_le_bytes(body[11..19].try_into().expect("8 bytes")) as usize;
        let size = u32::from_le_bytes(body[19..23].try_into().expect("4 bytes")) as usize;
        let meta = 8 + 4 + 2;
        let voxels = size.checked_mul(size).and_then(|n| n.checked_mul(size)).filter(|&v| v > 0);
        let expected = voxels
            .and_then(|v| v.checked_mul(4)?.checked_add(meta)?.checked_mul(count)?.checked_add(header));
        if count == 0 && body.len() == header {
            return Ok(CropArchive::default());
        }
        let Some(voxels) = voxels.filter(|_| expected == Some(body.len())) else {
            return Err(bad("length does not match header"));
        };
        let (cubes, tail) = body[header..].split_at(count * voxels * 4);
        let mut records = Vec::with_capacity(count);
        for (cube, m) in cubes.chunks_exact(voxels * 4).zip(tail.chunks_exact(meta)) {
            let data = cube
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let patient_id = u64::from_le_bytes(m[..8].try_into().expect("8 bytes"));
            let rank = u32::from_le_bytes(m[8..12].try_into().expect("4 bytes")) as usize;
            let label = |b: u8| match b {
                UNKNOWN => Ok(None),
                0 | 1 => Ok(Some(b)),
                _ => Err(bad("label byte out of range")),
            };
            let crop = NoduleCrop::new(size, data, patient_id, rank)?;
            crop.check_normalized()?;
            records.push(CropRecord {
                crop,
                label: label(m[12])?,
                patient_label: label(m[13])?,
            });
        }
        Ok(CropArchive { records })
    }

    /// The archive as it reads back from disk, with 32-bit voxels.
    pub fn quantized(&self) -> CliResult<Self> {
        Self::decode(&self.encode()?)
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        std::fs::write(path, self.encode()?).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nodule_core::synth::{gen_labeled_dataset, gen_patient_cohort, SynthConfig};

    fn small() -> SynthConfig {
        SynthConfig {
            n_labeled_nodules: 6,
            n_patients: 5,
            crop_size: 8,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn labeled_round_trip() {
        let data = gen_labeled_dataset(&small()).unwrap();
        let archive = CropArchive::from_labeled(&data).quantized().unwrap();
        assert_eq!(archive.quantized().unwrap(), archive);
        let set = archive.training_set().unwrap();
        assert_eq!(set.len(), data.labels.len());
        assert!(archive.cases().is_err());
    }

    #[test]
    fn cohort_groups_by_patient() {
        let cohort = gen_patient_cohort(&small()).unwrap();
        let archive = CropArchive::from_cohort(&cohort, true).quantized().unwrap();
        let (cases, labels) = archive.cases().unwrap();
        assert_eq!(labels, cohort.labels());
        assert_eq!(cases.len(), 5);
        assert!(archive.training_set().is_err());
        let mut bytes = archive.encode().unwrap();
        bytes.truncate(bytes.len() - 5);
        assert!(CropArchive::decode(&bytes).is_err());
    }
}
