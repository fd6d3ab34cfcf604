//! File formats: dataset CSV, model JSON, experiment config TOML and report
//! JSON.
//!
//! Floats are written with Rust's shortest round-trip formatting, so writing
//! then reading reproduces every value bit for bit.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cover::{CoverNorm, Partition};
use crate::error::{Error, Result};
use crate::harness::ExperimentConfig;
use crate::model::{
    Dataset, KernelMetric, KernelSpec, LabeledExample, MetricForm, MetricKind, MetricModel,
    Regularizer,
};

/// Writes `f0,...,f{d-1},label` rows.
pub fn write_dataset<W: Write>(ds: &Dataset, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..ds.dim()).map(|j| format!("f{j}")).collect();
    header.push("label".into());
    out.write_record(&header)?;
    for e in ds.examples() {
        let mut row: Vec<String> = e.x.iter().map(|v| format!("{v}")).collect();
        row.push(e.y.clone());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads examples from CSV; the header must be `f0,...,label`.
pub fn read_examples<R: Read>(r: R) -> Result<Vec<LabeledExample>> {
    let mut rdr = csv::Reader::from_reader(r);
    let header = rdr.headers()?.clone();
    let d = header.len().saturating_sub(1);
    let expected: Vec<String> = (0..d).map(|j| format!("f{j}")).chain(["label".to_string()]).collect();
    if d == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(Error::InvalidInput(format!(
            "dataset header must be f0,...,f{{d-1}},label; got {:?}",
            header.iter().collect::<Vec<_>>()
        )));
    }
    let mut out = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let x = (0..d)
            .map(|j| {
                rec[j].trim().parse::<f64>().map_err(|e| {
                    Error::InvalidInput(format!("row {}: column f{j}: {e}", line + 1))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        out.push(LabeledExample::new(x, rec[d].to_string()));
    }
    Ok(out)
}

/// Reads a dataset, using `radius` or else the largest example norm.
pub fn read_dataset<R: Read>(r: R, radius: Option<f64>) -> Result<Dataset> {
    let ex = read_examples(r)?;
    match radius {
        Some(rad) => Dataset::new(ex, rad),
        None => Dataset::with_tight_radius(ex),
    }
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    write_dataset(ds, fs::File::create(path)?)
}

pub fn load_dataset(path: &Path, radius: Option<f64>) -> Result<Dataset> {
    read_dataset(fs::File::open(path)?, radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixData {
    pub rows: usize,
    pub cols: usize,
    /// Row-major entries.
    pub data: Vec<f64>,
}

impl MatrixData {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().iter().copied().collect(),
        }
    }

    pub fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::InvalidInput(format!(
                "matrix has {} entries, expected {}x{}",
                self.data.len(),
                self.rows,
                self.cols
            )));
        }
        Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
    }
}

/// Serialized form of a [`MetricModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub kind: MetricKind,
    pub d: usize,
    pub regularizer: Regularizer,
    pub c: f64,
    /// `M` for linear models, `A` for kernelized ones (row-major).
    pub matrix: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchors_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_points: Option<MatrixData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub factor: Option<MatrixData>,
}

fn anchors_hash(anchors: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    h.update((anchors.nrows() as u64).to_le_bytes());
    h.update((anchors.ncols() as u64).to_le_bytes());
    for v in anchors.transpose().iter() {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

impl ModelFile {
    pub fn from_model(m: &MetricModel) -> Self {
        let mut f = Self {
            kind: m.kind(),
            d: m.dim(),
            regularizer: m.regularizer,
            c: m.c,
            matrix: MatrixData::from_matrix(m.matrix()).data,
            kernel: None,
            anchors_hash: None,
            anchor_points: None,
            factor: None,
        };
        if let MetricForm::Kernelized(k) = &m.form {
            f.kernel = Some(k.kernel);
            f.anchors_hash = Some(anchors_hash(&k.anchors));
            f.anchor_points = Some(MatrixData::from_matrix(&k.anchors));
            f.factor = Some(MatrixData::from_matrix(&k.factor));
        }
        f
    }

    pub fn to_model(&self) -> Result<MetricModel> {
        match self.kind {
            MetricKind::Mahalanobis | MetricKind::Bilinear => {
                let m = MatrixData {
                    rows: self.d,
                    cols: self.d,
                    data: self.matrix.clone(),
                }
                .to_matrix()?;
                if self.kind == MetricKind::Mahalanobis {
                    MetricModel::mahalanobis(m, self.regularizer, self.c)
                } else {
                    MetricModel::bilinear(m, self.regularizer, self.c)
                }
            }
            MetricKind::Kernelized => {
                let missing = |what: &str| Error::InvalidInput(format!("kernelized model needs {what}"));
                let kernel = self.kernel.ok_or_else(|| missing("kernel"))?;
                let anchors = self.anchor_points.as_ref().ok_or_else(|| missing("anchor_points"))?.to_matrix()?;
                if anchors.ncols() != self.d {
                    return Err(Error::DimensionMismatch {
                        expected: self.d,
                        got: anchors.ncols(),
                    });
                }
                if let Some(h) = &self.anchors_hash {
                    if *h != anchors_hash(&anchors) {
                        return Err(Error::InvalidInput("anchors_hash does not match anchor_points".into()));
                    }
                }
                let km = match &self.factor {
                    Some(f) => KernelMetric::from_factor(kernel, anchors, f.to_matrix()?)?,
                    None => {
                        let n = anchors.nrows();
                        let a = MatrixData {
                            rows: n,
                            cols: n,
                            data: self.matrix.clone(),
                        }
                        .to_matrix()?;
                        KernelMetric::from_coeffs(kernel, anchors, a)?
                    }
                };
                Ok(MetricModel::kernelized(km, self.c))
            }
        }
    }
}

pub fn model_to_json(m: &MetricModel) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ModelFile::from_model(m))?)
}

pub fn model_from_json(s: &str) -> Result<MetricModel> {
    serde_json::from_str::<ModelFile>(s)?.to_model()
}

pub fn save_model(m: &MetricModel, path: &Path) -> Result<()> {
    fs::write(path, model_to_json(m)? + "\n")?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MetricModel> {
    model_from_json(&fs::read_to_string(path)?)
}

/// Serialized form of a [`Partition`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionFile {
    pub gamma: f64,
    pub norm: CoverNorm,
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<String>,
    #[serde(rename = "K")]
    pub k: usize,
}

impl PartitionFile {
    pub fn from_partition(p: &Partition) -> Self {
        Self {
            gamma: p.gamma,
            norm: p.norm,
            centers: p.centers.iter().map(|c| c.iter().copied().collect()).collect(),
            labels: p.labels.clone(),
            k: p.k(),
        }
    }

    pub fn to_partition(&self) -> Result<Partition> {
        let mut labels = self.labels.clone();
        labels.sort();
        labels.dedup();
        let p = Partition {
            gamma: self.gamma,
            norm: self.norm,
            centers: self.centers.iter().map(|c| DVector::from_vec(c.clone())).collect(),
            labels,
        };
        if p.k() != self.k {
            return Err(Error::InvalidInput(format!("K = {} does not match {} cells", self.k, p.k())));
        }
        Ok(p)
    }
}

pub fn config_from_toml(s: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string(cfg).map_err(|e| Error::Config(e.to_string()))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    config_from_toml(&fs::read_to_string(path)?)
}

/// Pretty JSON with a trailing newline.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_synthetic, SyntheticSpec};

    #[test]
    fn dataset_round_trip_is_exact() {
        let ds = gen_synthetic(&SyntheticSpec::default_task(40, 2)).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Some(ds.radius())).unwrap();
        assert_eq!(back.examples(), ds.examples());
        assert_eq!(back.content_hash(), ds.content_hash());
    }

    #[test]
    fn awkward_floats_survive() {
        let vals = [0.1, -0.0, 1e-300, 5e-324, 1.0 / 3.0, -2.5e10];
        let ex: Vec<LabeledExample> = vals.iter().map(|&v| LabeledExample::new(vec![v], "x")).collect();
        let ds = Dataset::new(ex, 3e10).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let back = read_dataset(buf.as_slice(), Some(3e10)).unwrap();
        for (a, b) in back.examples().iter().zip(ds.examples()) {
            assert_eq!(a.x[0].to_bits(), b.x[0].to_bits());
        }
    }

    #[test]
    fn bad_header_is_rejected() {
        assert!(read_examples("x,y,label\n1,2,a\n".as_bytes()).is_err());
        assert!(read_examples("f0,label\nnope,a\n".as_bytes()).is_err());
        assert!(read_examples("label\na\n".as_bytes()).is_err());
    }

    #[test]
    fn linear_model_round_trip() {
        let m = MetricModel::mahalanobis(
            DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.7]),
            Regularizer::L21,
            0.25,
        )
        .unwrap();
        assert_eq!(model_from_json(&model_to_json(&m).unwrap()).unwrap(), m);
        let b = MetricModel::bilinear(DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.2, 0.7]), Regularizer::L1, 2.0).unwrap();
        assert_eq!(model_from_json(&model_to_json(&b).unwrap()).unwrap(), b);
    }

    #[test]
    fn kernel_model_round_trip() {
        let anchors = DMatrix::from_row_slice(3, 2, &[0.0, 0.1, 0.5, -0.2, 0.3, 0.3]);
        let factor = DMatrix::from_row_slice(2, 3, &[0.2, -0.1, 0.4, 0.0, 0.3, 0.1]);
        let km = KernelMetric::from_factor(KernelSpec::rbf(0.7).unwrap(), anchors, factor).unwrap();
        let m = MetricModel::kernelized(km, 1.5);
        let back = model_from_json(&model_to_json(&m).unwrap()).unwrap();
        assert_eq!(back, m);

        let mut file = ModelFile::from_model(&m);
        file.anchors_hash = Some("00".into());
        assert!(file.to_model().is_err());
    }

    #[test]
    fn partition_round_trip() {
        let ds = gen_synthetic(&SyntheticSpec::default_task(30, 4)).unwrap();
        let cfg = crate::cover::CoverConfig {
            gamma: 1.0,
            norm: CoverNorm::L2,
        };
        let p = crate::cover::build_partition(&ds, &cfg, None).unwrap();
        let text = to_json(&PartitionFile::from_partition(&p)).unwrap();
        let back: PartitionFile = serde_json::from_str(&text).unwrap();
        assert_eq!(back.to_partition().unwrap(), p);
        assert!(PartitionFile { k: 0, ..back }.to_partition().is_err());
    }

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::default_task();
        let text = config_to_toml(&cfg).unwrap();
        assert_eq!(config_from_toml(&text).unwrap(), cfg);
        let bad = text.replace("schema_version = 1", "schema_version = 1\nbogus = 3");
        assert!(matches!(config_from_toml(&bad), Err(Error::Config(_))));
    }
}
