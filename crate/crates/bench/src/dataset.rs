use tes_core::data::{load_idx, synth_dataset, Split};
use tes_core::fl::FlData;

use crate::config::{resolve_data_path, DatasetSpec};
use crate::error::{BenchError, Result};

/// Train, validation and test splits for one seed. Synthetic data is drawn
/// afresh per seed; IDX files are the same for every seed.
pub fn load_splits(spec: &DatasetSpec, seed: u64) -> Result<FlData> {
    match spec {
        DatasetSpec::Synth {
            n_train,
            n_validation,
            n_test,
        } => {
            let base = seed.wrapping_mul(1_000);
            let mut validation = synth_dataset((*n_validation).max(1), base + 2)?;
            validation.split = Split::Validation;
            let mut test = synth_dataset(*n_test, base + 3)?;
            test.split = Split::Test;
            Ok(FlData {
                train: synth_dataset(*n_train, base + 1)?,
                validation,
                test,
            })
        }
        DatasetSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            n_validation,
        } => {
            let full = load_idx(resolve_data_path(train_images), resolve_data_path(train_labels))?;
            let (train_pool, test) = match (test_images, test_labels) {
                (Some(i), Some(l)) => {
                    let mut t = load_idx(resolve_data_path(i), resolve_data_path(l))?;
                    t.split = Split::Test;
                    (full, t)
                }
                (None, None) => {
                    let cut = full.len() - full.len() / 6;
                    (full.slice(0, cut, Split::Train)?, full.slice(cut, full.len(), Split::Test)?)
                }
                _ => {
                    return Err(BenchError::Config(
                        "give both test_images and test_labels, or neither".into(),
                    ))
                }
            };
            let n_val = (*n_validation).max(1);
            if n_val >= train_pool.len() {
                return Err(BenchError::Config(format!(
                    "validation split of {n_val} leaves no training data ({} samples)",
                    train_pool.len()
                )));
            }
            let cut = train_pool.len() - n_val;
            Ok(FlData {
                train: train_pool.slice(0, cut, Split::Train)?,
                validation: train_pool.slice(cut, train_pool.len(), Split::Validation)?,
                test,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tes_core::data::write_idx;

    #[test]
    fn synth_splits_have_requested_sizes() {
        let spec = DatasetSpec::Synth {
            n_train: 300,
            n_validation: 50,
            n_test: 80,
        };
        let d = load_splits(&spec, 3).unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (300, 50, 80));
        assert_eq!(load_splits(&spec, 3).unwrap().train, d.train);
        assert_ne!(load_splits(&spec, 4).unwrap().train, d.train);
    }

    #[test]
    fn idx_files_hold_out_test_when_missing() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synth_dataset(120, 5).unwrap();
        let (img, lab) = (dir.path().join("img.idx"), dir.path().join("lab.idx"));
        write_idx(&ds, &img, &lab).unwrap();
        let spec = DatasetSpec::Idx {
            train_images: img,
            train_labels: lab,
            test_images: None,
            test_labels: None,
            n_validation: 10,
        };
        let d = load_splits(&spec, 1).unwrap();
        assert_eq!((d.train.len(), d.validation.len(), d.test.len()), (90, 10, 20));
    }
}
