//! Datasets: CSV ingestion, unit-norm scaling and seeded synthetic clusters.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng;

/// Samples as rows of `features` with one real label each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub features: DMatrix<f64>,
    pub labels: DVector<f64>,
    pub ids: Option<Vec<String>>,
    /// Feature column names, used when writing back to CSV.
    pub columns: Vec<String>,
}

/// How the label column of a CSV file is mapped to reals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelMapping {
    /// `positive` becomes +1, `negative` becomes -1, anything else is an error.
    Binary { positive: String, negative: String },
    /// The label cell is parsed as a real number.
    Real,
}

impl Dataset {
    pub fn new(features: DMatrix<f64>, labels: DVector<f64>) -> Result<Self> {
        let columns = (0..features.ncols())
            .map(|j| format!("x{}", j + 1))
            .collect();
        let ds = Dataset {
            features,
            labels,
            ids: None,
            columns,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (n, d) = self.features.shape();
        ensure!(
            n >= 1 && d >= 1,
            InvalidArgument,
            "dataset must have n >= 1 and d >= 1, got {n}x{d}"
        );
        ensure!(
            self.labels.len() == n,
            Shape,
            "{} labels for {} samples",
            self.labels.len(),
            n
        );
        ensure!(
            self.columns.len() == d,
            Shape,
            "{} column names for {} features",
            self.columns.len(),
            d
        );
        if let Some(ids) = &self.ids {
            ensure!(ids.len() == n, Shape, "{} ids for {} samples", ids.len(), n);
        }
        if let Some((idx, _)) = self
            .features
            .iter()
            .enumerate()
            .find(|(_, v)| !v.is_finite())
        {
            let (i, j) = (idx % n, idx / n);
            return Err(Error::InvalidArgument(format!(
                "non-finite feature at sample {i}, column {j}"
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn sample(&self, i: usize) -> DVector<f64> {
        self.features.row(i).transpose()
    }

    pub fn max_row_norm(&self) -> f64 {
        self.features
            .row_iter()
            .map(|r| r.norm())
            .fold(0.0, f64::max)
    }

    /// Rows `indices` in the given order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let features = self.features.select_rows(indices);
        let labels = DVector::from_iterator(indices.len(), indices.iter().map(|&i| self.labels[i]));
        let ids = self
            .ids
            .as_ref()
            .map(|ids| indices.iter().map(|&i| ids[i].clone()).collect());
        Dataset {
            features,
            labels,
            ids,
            columns: self.columns.clone(),
        }
    }

    /// Seeded shuffle, then the first `ceil(test_fraction * n)` rows go to the test part.
    pub fn shuffle_split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        ensure!(
            (0.0..1.0).contains(&test_fraction),
            InvalidArgument,
            "test fraction must lie in [0, 1), got {test_fraction}"
        );
        let n = self.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, "shuffle-split"));
        let n_test = (test_fraction * n as f64).ceil() as usize;
        ensure!(
            n_test < n,
            InvalidArgument,
            "test split leaves no training rows"
        );
        let (test, train) = order.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }
}

pub fn load_csv(
    path: impl AsRef<Path>,
    label_column: &str,
    labels: &LabelMapping,
) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let csv_err = |row: usize, message: String| Error::Csv {
        path: path.to_path_buf(),
        row,
        message,
    };
    let header = reader
        .headers()
        .map_err(|e| csv_err(1, format!("unreadable header: {e}")))?
        .clone();
    let label_idx = header
        .iter()
        .position(|h| h == label_column)
        .ok_or_else(|| csv_err(1, format!("label column `{label_column}` not in header")))?;
    let columns: Vec<String> = header
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != label_idx)
        .map(|(_, h)| h.to_string())
        .collect();
    ensure!(
        !columns.is_empty(),
        InvalidArgument,
        "{}: no feature columns",
        path.display()
    );

    let mut values = Vec::new();
    let mut ys = Vec::new();
    for (r, record) in reader.records().enumerate() {
        // header is line 1
        let line = r + 2;
        let record = record.map_err(|e| csv_err(line, format!("unparseable row: {e}")))?;
        if record.len() != header.len() {
            return Err(csv_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                continue;
            }
            let v: f64 = cell.trim().parse().map_err(|_| {
                csv_err(
                    line,
                    format!("column `{}`: non-numeric value `{cell}`", &header[j]),
                )
            })?;
            values.push(v);
        }
        let label = record[label_idx].trim();
        let y = match labels {
            LabelMapping::Binary { positive, negative } => {
                if label == positive {
                    1.0
                } else if label == negative {
                    -1.0
                } else {
                    return Err(csv_err(
                        line,
                        format!("label `{label}` is neither `{positive}` nor `{negative}`"),
                    ));
                }
            }
            LabelMapping::Real => label.parse().map_err(|_| {
                csv_err(
                    line,
                    format!("column `{label_column}`: non-numeric label `{label}`"),
                )
            })?,
        };
        ys.push(y);
    }
    let n = ys.len();
    ensure!(n >= 1, InvalidArgument, "{}: no data rows", path.display());
    let features = DMatrix::from_row_slice(n, columns.len(), &values);
    let ds = Dataset {
        features,
        labels: DVector::from_vec(ys),
        ids: None,
        columns,
    };
    ds.validate()?;
    Ok(ds)
}

/// Writes features in column order, then the label column. Reals use the
/// shortest representation that parses back to the same bits.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>, label_column: &str) -> Result<()> {
    let path = path.as_ref();
    crate::io::ensure_parent(path)?;
    let mut writer = csv::Writer::from_path(path).map_err(|e| Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    })?;
    let to_err = |e: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        row: 0,
        message: e.to_string(),
    };
    let mut header: Vec<&str> = ds.columns.iter().map(String::as_str).collect();
    header.push(label_column);
    writer.write_record(&header).map_err(to_err)?;
    for i in 0..ds.len() {
        let mut row: Vec<String> = ds
            .features
            .row(i)
            .iter()
            .map(|v| format!("{v:?}"))
            .collect();
        row.push(format!("{}", ds.labels[i]));
        writer.write_record(&row).map_err(to_err)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Scales every row to Euclidean norm one.
pub fn normalize_unit_norm(ds: &Dataset) -> Result<Dataset> {
    let mut out = ds.clone();
    for (i, mut row) in out.features.row_iter_mut().enumerate() {
        let norm = row.norm();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has norm {norm} and cannot be normalized"
            )));
        }
        row /= norm;
    }
    Ok(out)
}

/// Two isotropic unit-variance Gaussian clusters whose means sit at
/// `±separation/2` along a seeded random direction. Classes alternate
/// (+1, -1, +1, ...). Not normalized.
pub fn synth_two_class_raw(n: usize, d: usize, seed: u64, separation: f64) -> Result<Dataset> {
    ensure!(
        n >= 2 && d >= 2,
        InvalidArgument,
        "need n >= 2 and d >= 2, got n={n}, d={d}"
    );
    ensure!(
        n.is_multiple_of(2),
        InvalidArgument,
        "n must be even to split into two classes, got {n}"
    );
    ensure!(
        separation >= 0.0 && separation.is_finite(),
        InvalidArgument,
        "separation must be finite and nonnegative, got {separation}"
    );
    let mut rng = rng::stream(seed, "synth-two-class");
    let mut direction: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
    let dnorm = direction.norm();
    direction /= dnorm;
    let half = 0.5 * separation;
    let mut features = DMatrix::zeros(n, d);
    let mut labels = DVector::zeros(n);
    for i in 0..n {
        let y = if i % 2 == 0 { 1.0 } else { -1.0 };
        labels[i] = y;
        for j in 0..d {
            let noise: f64 = StandardNormal.sample(&mut rng);
            features[(i, j)] = y * half * direction[j] + noise;
        }
    }
    Dataset::new(features, labels)
}

pub fn synth_two_class(n: usize, d: usize, seed: u64, separation: f64) -> Result<Dataset> {
    normalize_unit_norm(&synth_two_class_raw(n, d, seed, separation)?)
}

/// Points drawn uniformly on the unit sphere with seeded random ±1 labels.
/// Any n ≥ 1 is allowed, unlike the two-cluster generator.
pub fn synth_sphere(n: usize, d: usize, seed: u64) -> Result<Dataset> {
    ensure!(
        n >= 1 && d >= 1,
        InvalidArgument,
        "need n >= 1 and d >= 1, got n={n}, d={d}"
    );
    let mut rng = rng::stream(seed, "synth-sphere");
    let features = DMatrix::from_fn(n, d, |_, _| StandardNormal.sample(&mut rng));
    let labels = DVector::from_fn(n, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 });
    normalize_unit_norm(&Dataset::new(features, labels)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    fn cat_dog() -> LabelMapping {
        LabelMapping::Binary {
            positive: "cat".into(),
            negative: "dog".into(),
        }
    }

    #[test]
    fn binary_labels_map_to_signs() {
        let f = write_tmp("a,b,label\n1,2,cat\n3,4,dog\n5,6,cat\n");
        let ds = load_csv(f.path(), "label", &cat_dog()).unwrap();
        assert_eq!(ds.labels.as_slice(), &[1.0, -1.0, 1.0]);
        assert_eq!(ds.columns, vec!["a", "b"]);
        assert_eq!(ds.features[(2, 1)], 6.0);
    }

    #[test]
    fn label_column_may_be_anywhere() {
        let f = write_tmp("label,a,b\ncat,1,2\n");
        let ds = load_csv(f.path(), "label", &cat_dog()).unwrap();
        assert_eq!(
            ds.features.row(0).iter().copied().collect::<Vec<_>>(),
            vec![1.0, 2.0]
        );
    }

    #[test]
    fn unknown_label_names_row() {
        let f = write_tmp("a,label\n1,cat\n2,bird\n");
        let err = load_csv(f.path(), "label", &cat_dog()).unwrap_err();
        match err {
            Error::Csv { row, message, .. } => {
                assert_eq!(row, 3);
                assert!(message.contains("bird"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn non_numeric_feature_names_column() {
        let f = write_tmp("a,b,label\n1,x,cat\n");
        let err = load_csv(f.path(), "label", &cat_dog())
            .unwrap_err()
            .to_string();
        assert!(err.contains("row 2") && err.contains("`b`"), "{err}");
    }

    #[test]
    fn missing_file_and_column() {
        assert!(matches!(
            load_csv("/nonexistent/data.csv", "label", &cat_dog()),
            Err(Error::Io { .. })
        ));
        let f = write_tmp("a,b\n1,2\n");
        assert!(load_csv(f.path(), "label", &cat_dog()).is_err());
    }

    #[test]
    fn ragged_row_rejected() {
        let f = write_tmp("a,b,label\n1,2,cat\n1,cat\n");
        assert!(load_csv(f.path(), "label", &cat_dog()).is_err());
    }

    #[test]
    fn three_four_five() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(1, 2, &[3.0, 4.0]),
            DVector::from_element(1, 1.0),
        )
        .unwrap();
        let out = normalize_unit_norm(&ds).unwrap();
        assert!((out.features[(0, 0)] - 0.6).abs() < 1e-15);
        assert!((out.features[(0, 1)] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn zero_row_is_an_error() {
        let ds = Dataset::new(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]),
            DVector::zeros(2),
        )
        .unwrap();
        let err = normalize_unit_norm(&ds).unwrap_err().to_string();
        assert!(err.contains("sample 1"), "{err}");
    }

    #[test]
    fn synth_rejects_odd_n() {
        assert!(synth_two_class(5, 3, 1, 1.0).is_err());
        assert!(synth_two_class(4, 1, 1, 1.0).is_err());
        assert!(synth_two_class(4, 2, 1, -1.0).is_err());
    }

    #[test]
    fn synth_is_deterministic() {
        let a = synth_two_class(4, 2, 7, 1.0).unwrap();
        let b = synth_two_class(4, 2, 7, 1.0).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, synth_two_class(4, 2, 8, 1.0).unwrap());
    }

    #[test]
    fn shuffle_split_partitions() {
        let ds = synth_two_class(10, 3, 1, 1.0).unwrap();
        let (train, test) = ds.shuffle_split(0.3, 5).unwrap();
        assert_eq!(train.len() + test.len(), 10);
        assert_eq!(test.len(), 3);
    }
}
