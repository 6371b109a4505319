use std::collections::BTreeMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::{EmbedError, EmbeddingVector, FusionModel, Modality, EMBEDDING_DIM};

/// Little-endian f64 values, base64 encoded.
pub(crate) fn encode_f64(values: &[f64]) -> String {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    STANDARD.encode(bytes)
}

pub(crate) fn decode_f64(text: &str) -> Result<Vec<f64>, EmbedError> {
    let bytes = STANDARD
        .decode(text)
        .map_err(|e| EmbedError::Format(format!("base64: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(EmbedError::Format("blob length is not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Blob {
    rows: usize,
    cols: usize,
    data: String,
}

impl Blob {
    fn matrix(m: &Array2<f64>) -> Self {
        Blob {
            rows: m.nrows(),
            cols: m.ncols(),
            data: encode_f64(&m.iter().copied().collect::<Vec<_>>()),
        }
    }

    fn vector(v: &[f64]) -> Self {
        Blob {
            rows: v.len(),
            cols: 1,
            data: encode_f64(v),
        }
    }

    fn values(&self, name: &str) -> Result<Vec<f64>, EmbedError> {
        let v = decode_f64(&self.data)?;
        if v.len() != self.rows * self.cols {
            return Err(EmbedError::Format(format!(
                "{name}: {} values for a {}×{} blob",
                v.len(),
                self.rows,
                self.cols
            )));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(EmbedError::Format(format!("{name}: non-finite value")));
        }
        Ok(v)
    }

    fn to_matrix(&self, name: &str) -> Result<Array2<f64>, EmbedError> {
        Array2::from_shape_vec((self.rows, self.cols), self.values(name)?)
            .map_err(|e| EmbedError::Format(format!("{name}: {e}")))
    }
}

/// On-disk form of a [`FusionModel`].
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub(crate) struct ModelRecord {
    modality: Modality,
    input_dim: usize,
    hidden: usize,
    output_dim: usize,
    leaky_slope: f64,
    dropout_p: f64,
    norm_mean: Blob,
    norm_std: Blob,
    w1: Blob,
    b1: Blob,
    w2: Blob,
    b2: Blob,
}

impl From<&FusionModel> for ModelRecord {
    fn from(m: &FusionModel) -> Self {
        ModelRecord {
            modality: m.modality,
            input_dim: m.input_dim(),
            hidden: m.hidden_dim(),
            output_dim: m.output_dim(),
            leaky_slope: m.leaky_slope,
            dropout_p: m.dropout_p,
            norm_mean: Blob::vector(&m.norm_mean),
            norm_std: Blob::vector(&m.norm_std),
            w1: Blob::matrix(&m.w1),
            b1: Blob::vector(m.b1.as_slice().unwrap()),
            w2: Blob::matrix(&m.w2),
            b2: Blob::vector(m.b2.as_slice().unwrap()),
        }
    }
}

impl TryFrom<ModelRecord> for FusionModel {
    type Error = EmbedError;

    fn try_from(r: ModelRecord) -> Result<Self, EmbedError> {
        let model = FusionModel {
            modality: r.modality,
            w1: r.w1.to_matrix("w1")?,
            b1: Array1::from(r.b1.values("b1")?),
            w2: r.w2.to_matrix("w2")?,
            b2: Array1::from(r.b2.values("b2")?),
            leaky_slope: r.leaky_slope,
            dropout_p: r.dropout_p,
            norm_mean: r.norm_mean.values("norm_mean")?,
            norm_std: r.norm_std.values("norm_std")?,
        };
        let shapes_ok = model.w1.dim() == (r.hidden, r.input_dim)
            && model.b1.len() == r.hidden
            && model.w2.dim() == (r.output_dim, r.hidden)
            && model.b2.len() == r.output_dim
            && model.norm_mean.len() == r.input_dim
            && model.norm_std.len() == r.input_dim;
        if !shapes_ok {
            return Err(EmbedError::Format("weight shapes disagree with declared dimensions".into()));
        }
        if model.norm_std.iter().any(|&s| s <= 0.0) {
            return Err(EmbedError::Format("norm_std must be positive".into()));
        }
        Ok(model)
    }
}

impl Serialize for FusionModel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        ModelRecord::from(self).serialize(s)
    }
}

impl<'de> Deserialize<'de> for FusionModel {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let record = ModelRecord::deserialize(d)?;
        FusionModel::try_from(record).map_err(serde::de::Error::custom)
    }
}

/// Reads `session_id,e0,...,e319` rows.
pub fn load_external_embeddings(path: &Path) -> Result<BTreeMap<String, EmbeddingVector>, EmbedError> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_path(path)?;
    let mut out = BTreeMap::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        // data rows are numbered from 1, after the header
        let row = i + 1;
        let got = record.len().saturating_sub(1);
        if got != EMBEDDING_DIM {
            return Err(EmbedError::RowDimension {
                row,
                got,
                expected: EMBEDDING_DIM,
            });
        }
        let id = record[0].to_string();
        let mut values = Vec::with_capacity(EMBEDDING_DIM);
        for field in record.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| EmbedError::Format(format!("row {row}: '{field}' is not a number")))?;
            if !v.is_finite() {
                return Err(EmbedError::Format(format!("row {row}: non-finite value")));
            }
            values.push(v);
        }
        if out.insert(id.clone(), EmbeddingVector(values)).is_some() {
            return Err(EmbedError::DuplicateId(id));
        }
    }
    Ok(out)
}

pub fn write_embeddings_csv<'a, I>(path: &Path, rows: I) -> Result<(), EmbedError>
where
    I: IntoIterator<Item = (&'a str, &'a EmbeddingVector)>,
{
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["session_id".to_string()];
    header.extend((0..EMBEDDING_DIM).map(|k| format!("e{k}")));
    w.write_record(&header)?;
    for (id, e) in rows {
        if e.0.len() != EMBEDDING_DIM {
            return Err(EmbedError::Dimension {
                expected: EMBEDDING_DIM,
                got: e.0.len(),
            });
        }
        let mut rec = Vec::with_capacity(EMBEDDING_DIM + 1);
        rec.push(id.to_string());
        rec.extend(e.0.iter().map(|v| format!("{v:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
