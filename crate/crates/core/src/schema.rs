//! Attribute schemas, dataset ingestion and the discrimination check.
//!
//! All attributes are integer-coded categories; a schema records each
//! attribute's inclusive domain and whether it is protected.

use std::collections::HashSet;
use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{label_of, ModelHandle};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    #[serde(rename = "min")]
    pub domain_min: i64,
    #[serde(rename = "max")]
    pub domain_max: i64,
    pub protected: bool,
}

impl AttributeSpec {
    pub fn new(name: impl Into<String>, domain_min: i64, domain_max: i64, protected: bool) -> Self {
        AttributeSpec {
            name: name.into(),
            domain_min,
            domain_max,
            protected,
        }
    }

    pub fn domain_size(&self) -> usize {
        (self.domain_max - self.domain_min + 1) as usize
    }

    pub fn contains(&self, v: i64) -> bool {
        (self.domain_min..=self.domain_max).contains(&v)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSchema", into = "RawSchema")]
pub struct DatasetSchema {
    attributes: Vec<AttributeSpec>,
    protected: Vec<usize>,
    unprotected: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSchema {
    attributes: Vec<AttributeSpec>,
}

impl TryFrom<RawSchema> for DatasetSchema {
    type Error = Error;

    fn try_from(raw: RawSchema) -> Result<Self> {
        DatasetSchema::new(raw.attributes)
    }
}

impl From<DatasetSchema> for RawSchema {
    fn from(s: DatasetSchema) -> Self {
        RawSchema {
            attributes: s.attributes,
        }
    }
}

impl DatasetSchema {
    pub fn new(attributes: Vec<AttributeSpec>) -> Result<Self> {
        let mut seen = HashSet::new();
        for a in &attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(Error::Schema(format!("duplicate attribute name `{}`", a.name)));
            }
            if a.domain_min > a.domain_max {
                return Err(Error::Schema(format!(
                    "attribute `{}`: min {} exceeds max {}",
                    a.name, a.domain_min, a.domain_max
                )));
            }
        }
        let protected: Vec<usize> = (0..attributes.len()).filter(|&i| attributes[i].protected).collect();
        let unprotected: Vec<usize> = (0..attributes.len()).filter(|&i| !attributes[i].protected).collect();
        if protected.is_empty() {
            return Err(Error::Schema("no protected attribute".into()));
        }
        if unprotected.is_empty() {
            return Err(Error::Schema("no non-protected attribute".into()));
        }
        Ok(DatasetSchema {
            attributes,
            protected,
            unprotected,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawSchema = serde_json::from_str(text)?;
        DatasetSchema::try_from(raw)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serialisation cannot fail")
    }

    pub fn attributes(&self) -> &[AttributeSpec] {
        &self.attributes
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.attributes.iter().map(|a| a.name.clone()).collect()
    }

    /// Indices of protected attributes, ascending.
    pub fn protected(&self) -> &[usize] {
        &self.protected
    }

    /// Indices of non-protected attributes, ascending.
    pub fn unprotected(&self) -> &[usize] {
        &self.unprotected
    }

    pub fn is_protected(&self, index: usize) -> bool {
        self.attributes[index].protected
    }

    /// Checks length and domain membership.
    pub fn validate(&self, x: &Instance) -> Result<()> {
        if x.len() != self.len() {
            return Err(Error::Dimension {
                expected: self.len(),
                actual: x.len(),
            });
        }
        for (a, &v) in self.attributes.iter().zip(x.values()) {
            if !a.contains(v) {
                return Err(Error::Schema(format!(
                    "attribute `{}` value {v} outside [{}, {}]",
                    a.name, a.domain_min, a.domain_max
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, x: &Instance) -> bool {
        self.validate(x).is_ok()
    }
}

/// An integer-coded input, ordered lexicographically.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Instance(Vec<i64>);

impl Instance {
    pub fn new(values: Vec<i64>) -> Self {
        Instance(values)
    }

    pub fn values(&self) -> &[i64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [i64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_real(&self) -> Vec<f64> {
        self.0.iter().map(|&v| v as f64).collect()
    }
}

impl From<Vec<i64>> for Instance {
    fn from(v: Vec<i64>) -> Self {
        Instance(v)
    }
}

impl std::ops::Index<usize> for Instance {
    type Output = i64;

    fn index(&self, i: usize) -> &i64 {
        &self.0[i]
    }
}

/// A pair of inputs differing only in protected attributes whose labels
/// differ.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminationWitness {
    pub instance: Instance,
    pub counterpart: Instance,
    pub labels: (u8, u8),
}

impl DiscriminationWitness {
    /// Structural conditions: same non-protected values, some protected
    /// value differs, labels differ.
    pub fn is_well_formed(&self, schema: &DatasetSchema) -> bool {
        let same_np = schema
            .unprotected()
            .iter()
            .all(|&i| self.instance[i] == self.counterpart[i]);
        let diff_p = schema
            .protected()
            .iter()
            .any(|&i| self.instance[i] != self.counterpart[i]);
        same_np && diff_p && self.labels.0 != self.labels.1
    }
}

/// Reads a CSV dataset whose header matches the schema's attribute names.
pub fn load_dataset(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<Vec<Instance>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(file, schema)
}

pub fn read_dataset(reader: impl Read, schema: &DatasetSchema) -> Result<Vec<Instance>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header != schema.names() {
        return Err(Error::Header {
            expected: schema.names(),
            actual: header,
        });
    }
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // 1-based data row numbers, header excluded.
        let row = i + 1;
        let record = record?;
        let mut values = Vec::with_capacity(schema.len());
        for (cell, attr) in record.iter().zip(schema.attributes()) {
            let v: i64 = cell.trim().parse().map_err(|_| Error::Dataset {
                row,
                column: attr.name.clone(),
                message: format!("`{cell}` is not an integer"),
            })?;
            if !attr.contains(v) {
                return Err(Error::Dataset {
                    row,
                    column: attr.name.clone(),
                    message: format!("{v} outside [{}, {}]", attr.domain_min, attr.domain_max),
                });
            }
            values.push(v);
        }
        out.push(Instance(values));
    }
    Ok(out)
}

/// Writes instances as CSV with the schema's header.
pub fn write_dataset(
    writer: impl std::io::Write,
    schema: &DatasetSchema,
    rows: &[Instance],
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(schema.names())?;
    for row in rows {
        w.write_record(row.values().iter().map(i64::to_string))?;
    }
    w.flush()?;
    Ok(())
}

/// Every protected-value combination other than `x`'s own, with the
/// non-protected attributes copied from `x`, in lexicographic order of the
/// protected values.
pub fn similar_set(x: &Instance, schema: &DatasetSchema) -> Vec<Instance> {
    let protected = schema.protected();
    let attrs = schema.attributes();
    let total: usize = protected.iter().map(|&i| attrs[i].domain_size()).product();
    let mut out = Vec::with_capacity(total.saturating_sub(1));
    let mut current = x.clone();
    for &i in protected {
        current.0[i] = attrs[i].domain_min;
    }
    loop {
        if current != *x {
            out.push(current.clone());
        }
        // Odometer: last protected attribute varies fastest.
        let mut advanced = false;
        for &i in protected.iter().rev() {
            if current.0[i] < attrs[i].domain_max {
                current.0[i] += 1;
                advanced = true;
                break;
            }
            current.0[i] = attrs[i].domain_min;
        }
        if !advanced {
            break;
        }
    }
    out
}

/// Rounds every component to the nearest integer and clamps it into its
/// attribute's domain.
pub fn clip(x: &[f64], schema: &DatasetSchema) -> Instance {
    debug_assert_eq!(x.len(), schema.len());
    Instance(
        x.iter()
            .zip(schema.attributes())
            .map(|(&v, a)| {
                let r = v.round();
                if r.is_nan() {
                    a.domain_min
                } else {
                    (r.clamp(a.domain_min as f64, a.domain_max as f64)) as i64
                }
            })
            .collect(),
    )
}

/// Confidences of `x` and of its similar set from one batch call.
#[derive(Clone, Debug)]
pub(crate) struct PairEvaluation {
    pub confidence: f64,
    pub variants: Vec<Instance>,
    pub variant_confidences: Vec<f64>,
}

impl PairEvaluation {
    pub fn label(&self) -> u8 {
        label_of(self.confidence)
    }

    /// First variant (in order) whose label differs from `x`'s.
    pub fn first_flip(&self) -> Option<usize> {
        let own = self.label();
        self.variant_confidences.iter().position(|&c| label_of(c) != own)
    }

    /// Index of the variant maximising `|F(x) − F(x')|` among those accepted
    /// by `filter`; the earliest wins ties.
    pub fn farthest(&self, filter: impl Fn(f64) -> bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &c) in self.variant_confidences.iter().enumerate() {
            if !filter(c) {
                continue;
            }
            let d = (self.confidence - c).abs();
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        best.map(|(i, _)| i)
    }

    pub fn witness(&self, x: &Instance, idx: usize) -> DiscriminationWitness {
        DiscriminationWitness {
            instance: x.clone(),
            counterpart: self.variants[idx].clone(),
            labels: (self.label(), label_of(self.variant_confidences[idx])),
        }
    }
}

pub(crate) fn evaluate_pairs(
    handle: &ModelHandle,
    x: &Instance,
    schema: &DatasetSchema,
) -> Result<PairEvaluation> {
    let variants = similar_set(x, schema);
    let mut batch = Vec::with_capacity(variants.len() + 1);
    batch.push(x.to_real());
    batch.extend(variants.iter().map(Instance::to_real));
    let mut confs = handle.forward(&batch)?;
    let confidence = confs.remove(0);
    Ok(PairEvaluation {
        confidence,
        variants,
        variant_confidences: confs,
    })
}

/// Returns a witness if some protected-attribute variant of `x` receives a
/// different label. One batch invocation covers `x` and all variants.
pub fn is_discriminatory(
    handle: &ModelHandle,
    x: &Instance,
    schema: &DatasetSchema,
) -> Result<Option<DiscriminationWitness>> {
    let eval = evaluate_pairs(handle, x, schema)?;
    Ok(eval.first_flip().map(|i| eval.witness(x, i)))
}
