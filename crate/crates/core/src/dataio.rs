//! Datasets: loading (CSV, IDX), synthesis, and deliberate corruption with a
//! ground-truth mask.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numkit::{choose_without_replacement, BoxMuller, RngState};

/// Labelled feature matrix with stable ids and a corruption mask.
///
/// Rows are addressed by position; training batches carry positions and the
/// `ids` column maps them back to external identifiers on export.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Vec<f64>,
    n_features: usize,
    n_classes: usize,
    labels: Vec<usize>,
    ids: Vec<u64>,
    mask: Vec<bool>,
}

impl Dataset {
    /// Builds a dataset with ids `0..N` and an all-false mask.
    pub fn new(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let n = labels.len();
        let ids = (0..n as u64).collect();
        Self::from_parts(features, n_features, labels, n_classes, ids, vec![false; n])
    }

    pub fn from_parts(
        features: Vec<f64>,
        n_features: usize,
        labels: Vec<usize>,
        n_classes: usize,
        ids: Vec<u64>,
        mask: Vec<bool>,
    ) -> Result<Self> {
        let n = labels.len();
        if n_features == 0 {
            return Err(Error::Parameter("dataset needs at least one feature".into()));
        }
        if features.len() != n * n_features {
            return Err(Error::Consistency(format!(
                "{} feature values for {n} rows of width {n_features}",
                features.len()
            )));
        }
        if ids.len() != n || mask.len() != n {
            return Err(Error::Consistency(format!(
                "{n} labels but {} ids and {} mask bits",
                ids.len(),
                mask.len()
            )));
        }
        if let Some(bad) = labels.iter().position(|&y| y >= n_classes) {
            return Err(Error::Parameter(format!(
                "label {} at row {bad} outside [0, {n_classes})",
                labels[bad]
            )));
        }
        let mut seen = HashSet::with_capacity(n);
        if let Some(dup) = ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::Consistency(format!("duplicate sample id {dup}")));
        }
        Ok(Self {
            features,
            n_features,
            n_classes,
            labels,
            ids,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.n_features
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn corrupted_count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }

    /// New dataset holding the given rows, in the given order.
    pub fn select(&self, rows: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Dataset {
            features,
            n_features: self.n_features,
            n_classes: self.n_classes,
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            ids: rows.iter().map(|&r| self.ids[r]).collect(),
            mask: rows.iter().map(|&r| self.mask[r]).collect(),
        }
    }

    /// SHA-256 over features, labels, ids and mask.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_features as u64).to_le_bytes());
        h.update((self.n_classes as u64).to_le_bytes());
        for v in &self.features {
            h.update(v.to_bits().to_le_bytes());
        }
        for (i, y) in self.labels.iter().enumerate() {
            h.update((*y as u64).to_le_bytes());
            h.update(self.ids[i].to_le_bytes());
            h.update([self.mask[i] as u8]);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-column affine standardization fitted on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Columns with zero variance get std 1 so they map to all-zeros.
    pub fn fit(features: &[f64], n_features: usize) -> Self {
        let n = (features.len() / n_features).max(1) as f64;
        let mut mean = vec![0.0; n_features];
        for row in features.chunks(n_features) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; n_features];
        for row in features.chunks(n_features) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, features: &mut [f64]) {
        let f = self.mean.len();
        for row in features.chunks_mut(f) {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
    }
}

/// How to interpret the columns of a CSV file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CsvSchema {
    pub label_column: String,
    /// Columns one-hot encoded, one indicator per distinct value (sorted).
    pub categorical: Vec<String>,
    pub id_column: Option<String>,
    pub mask_column: Option<String>,
    /// Columns ignored entirely.
    pub drop: Vec<String>,
    pub standardize: bool,
}

impl Default for CsvSchema {
    fn default() -> Self {
        Self {
            label_column: "label".into(),
            categorical: Vec::new(),
            id_column: None,
            mask_column: None,
            drop: Vec::new(),
            standardize: true,
        }
    }
}

impl CsvSchema {
    /// Layout written by [`save_csv`]: `id,label,corrupted,f0,f1,...`.
    pub fn native() -> Self {
        Self {
            label_column: "label".into(),
            categorical: Vec::new(),
            id_column: Some("id".into()),
            mask_column: Some("corrupted".into()),
            drop: Vec::new(),
            standardize: false,
        }
    }
}

enum ColumnRole {
    Numeric,
    Categorical(Vec<String>),
}

pub fn load_csv(path: impl AsRef<Path>, schema: &CsvSchema) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text, schema)
}

pub fn parse_csv(text: &str, schema: &CsvSchema) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(str::to_string)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(Error::Parse {
            row: 0,
            message: "missing header row".into(),
        });
    }
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column `{name}` not found")))
    };
    let label_col = find(&schema.label_column)?;
    let id_col = schema.id_column.as_deref().map(find).transpose()?;
    let mask_col = schema.mask_column.as_deref().map(find).transpose()?;
    for c in schema.categorical.iter().chain(&schema.drop) {
        find(c)?;
    }

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: i + 1,
            message: e.to_string(),
        })?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            row: 0,
            message: "file has no data rows".into(),
        });
    }

    let feature_cols: Vec<usize> = (0..headers.len())
        .filter(|&c| {
            c != label_col
                && Some(c) != id_col
                && Some(c) != mask_col
                && !schema.drop.contains(&headers[c])
        })
        .collect();
    let roles: Vec<ColumnRole> = feature_cols
        .iter()
        .map(|&c| {
            if schema.categorical.contains(&headers[c]) {
                let levels: BTreeSet<&str> = rows.iter().map(|r| r[c].as_str()).collect();
                ColumnRole::Categorical(levels.into_iter().map(str::to_string).collect())
            } else {
                ColumnRole::Numeric
            }
        })
        .collect();
    let n_features: usize = roles
        .iter()
        .map(|r| match r {
            ColumnRole::Numeric => 1,
            ColumnRole::Categorical(levels) => levels.len(),
        })
        .sum();
    if n_features == 0 {
        return Err(Error::Schema("no feature columns".into()));
    }

    // Integer labels are used as-is; anything else is mapped by sorted level.
    let numeric_labels: Option<Vec<usize>> = rows
        .iter()
        .map(|r| r[label_col].parse::<usize>().ok())
        .collect();
    let (labels, n_classes) = match numeric_labels {
        Some(ls) => {
            let c = ls.iter().max().map_or(1, |m| m + 1);
            (ls, c)
        }
        None => {
            let levels: BTreeMap<&str, usize> = rows
                .iter()
                .map(|r| r[label_col].as_str())
                .collect::<BTreeSet<_>>()
                .into_iter()
                .enumerate()
                .map(|(i, s)| (s, i))
                .collect();
            let ls = rows.iter().map(|r| levels[r[label_col].as_str()]).collect();
            (ls, levels.len())
        }
    };

    let mut features = Vec::with_capacity(rows.len() * n_features);
    let mut ids = Vec::with_capacity(rows.len());
    let mut mask = Vec::with_capacity(rows.len());
    for (i, r) in rows.iter().enumerate() {
        let row_no = i + 1;
        for (&c, role) in feature_cols.iter().zip(&roles) {
            match role {
                ColumnRole::Numeric => {
                    let v: f64 = r[c].parse().map_err(|_| Error::Parse {
                        row: row_no,
                        message: format!("non-numeric value `{}` in column `{}`", r[c], headers[c]),
                    })?;
                    features.push(v);
                }
                ColumnRole::Categorical(levels) => {
                    features.extend(levels.iter().map(|l| if *l == r[c] { 1.0 } else { 0.0 }));
                }
            }
        }
        ids.push(match id_col {
            Some(c) => r[c].parse().map_err(|_| Error::Parse {
                row: row_no,
                message: format!("invalid id `{}`", r[c]),
            })?,
            None => i as u64,
        });
        mask.push(match mask_col {
            Some(c) => match r[c].as_str() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => {
                    return Err(Error::Parse {
                        row: row_no,
                        message: format!("invalid mask value `{other}`"),
                    })
                }
            },
            None => false,
        });
    }
    if schema.standardize {
        Standardizer::fit(&features, n_features).apply(&mut features);
    }
    Dataset::from_parts(features, n_features, labels, n_classes, ids, mask)
}

/// Writes the native CSV layout (see [`CsvSchema::native`]).
pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_csv_string(dataset)).map_err(|e| Error::io(path, e))
}

pub fn to_csv_string(dataset: &Dataset) -> String {
    let mut out = String::from("id,label,corrupted");
    for j in 0..dataset.n_features {
        out.push_str(&format!(",f{j}"));
    }
    out.push('\n');
    for i in 0..dataset.len() {
        out.push_str(&format!(
            "{},{},{}",
            dataset.ids[i], dataset.labels[i], dataset.mask[i] as u8
        ));
        for v in dataset.row(i) {
            // `{:?}` prints the shortest string that parses back to the same bits.
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    out
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("{what}: truncated header")))
}

/// Parses an IDX payload, returning `(dims, data)`.
fn parse_idx(bytes: &[u8], magic: u32, what: &str) -> Result<(Vec<usize>, Vec<u8>)> {
    let found = read_be_u32(bytes, 0, what)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what}: magic {found:#010x}, expected {magic:#010x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let dims = (0..ndim)
        .map(|k| read_be_u32(bytes, 4 + 4 * k, what).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let header = 4 + 4 * ndim;
    let expected: usize = dims.iter().product();
    let body = &bytes[header.min(bytes.len())..];
    if body.len() < expected {
        return Err(Error::Format(format!(
            "{what}: truncated body ({} of {expected} bytes)",
            body.len()
        )));
    }
    Ok((dims, body[..expected].to_vec()))
}

/// Loads an IDX image/label pair (MNIST layout). Pixels are scaled to [0, 1].
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let images = fs::read(ip).map_err(|e| Error::io(ip, e))?;
    let labels = fs::read(lp).map_err(|e| Error::io(lp, e))?;
    parse_idx_pair(&images, &labels)
}

pub fn parse_idx_pair(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let (idims, pixels) = parse_idx(images, IDX_IMAGES_MAGIC, "images")?;
    let (ldims, label_bytes) = parse_idx(labels, IDX_LABELS_MAGIC, "labels")?;
    if idims[0] != ldims[0] {
        return Err(Error::Consistency(format!(
            "{} images but {} labels",
            idims[0], ldims[0]
        )));
    }
    let n_features = idims[1] * idims[2];
    let features = pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let n_classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(features, n_features, labels, n_classes)
}

/// Encodes images and labels as an IDX pair. Pixel values are clamped to [0, 255].
pub fn encode_idx(rows: usize, height: usize, width: usize, pixels: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
    for d in [rows, height, width] {
        img.extend_from_slice(&(d as u32).to_be_bytes());
    }
    img.extend_from_slice(pixels);
    let mut lab = IDX_LABELS_MAGIC.to_be_bytes().to_vec();
    lab.extend_from_slice(&(rows as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

/// Isotropic Gaussian blobs: class `c` is centred at `separation * e_c` with
/// unit covariance. Rows interleave the classes.
pub fn synth_gaussian_blobs(
    rng: &RngState,
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_per_class == 0 || n_classes == 0 || dim == 0 {
        return Err(Error::Parameter("blob counts must be positive".into()));
    }
    if !(separation > 0.0) {
        return Err(Error::Parameter(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if dim < n_classes {
        return Err(Error::Parameter(format!(
            "dim {dim} < n_classes {n_classes}: cannot centre classes on unit axes"
        )));
    }
    let mut gen = BoxMuller::new(rng.generator());
    let n = n_per_class * n_classes;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n_per_class {
        for c in 0..n_classes {
            for j in 0..dim {
                let centre = if j == c { separation } else { 0.0 };
                features.push(centre + gen.next_standard());
            }
            labels.push(c);
        }
    }
    Dataset::new(features, dim, labels, n_classes)
}

/// High-dimensional sparse features standing in for bag-of-words text: each
/// row activates `active` random coordinates with |N(0,1)| weights, and rows
/// of class `c` additionally fire the class's own block of `active`
/// coordinates with weight `separation`.
pub fn synth_sparse_blobs(
    rng: &RngState,
    n_per_class: usize,
    n_classes: usize,
    dim: usize,
    active: usize,
    separation: f64,
) -> Result<Dataset> {
    if n_per_class == 0 || n_classes == 0 || active == 0 {
        return Err(Error::Parameter("sparse blob counts must be positive".into()));
    }
    if dim < n_classes * active * 2 {
        return Err(Error::Parameter(format!(
            "dim {dim} too small for {n_classes} class blocks of {active}"
        )));
    }
    let coords: Vec<usize> = (0..dim).collect();
    let mut gen = BoxMuller::new(rng.split(1).generator());
    let n = n_per_class * n_classes;
    let mut features = vec![0.0; n * dim];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_per_class {
        for c in 0..n_classes {
            let row = i * n_classes + c;
            let cells = &mut features[row * dim..(row + 1) * dim];
            for j in c * active..(c + 1) * active {
                cells[j] += separation;
            }
            let noise = choose_without_replacement(&rng.split(2 + row as u64), &coords, active);
            for j in noise {
                cells[j] += gen.next_standard().abs();
            }
            labels.push(c);
        }
    }
    Dataset::new(features, dim, labels, n_classes)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorruptionKind {
    LabelFlip { source: usize, target: usize },
    FeatureNoise { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    pub count: usize,
    pub rng: RngState,
}

/// One altered sample, as written to the corruption manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorruptionRecord {
    pub id: u64,
    pub kind: String,
    pub original_label: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorruptionManifest {
    pub records: Vec<CorruptionRecord>,
}

impl CorruptionManifest {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Serde(e.to_string()))
    }

    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).unwrap_or_default();
        hex(&Sha256::digest(json.as_bytes()))
    }
}

/// Returns a corrupted copy of `dataset` plus the manifest of altered rows.
///
/// Rows are drawn uniformly without replacement from the eligible rows that
/// are not already corrupted, using only `spec.rng`.
pub fn corrupt(dataset: &Dataset, spec: &CorruptionSpec) -> Result<(Dataset, CorruptionManifest)> {
    let eligible: Vec<usize> = match spec.kind {
        CorruptionKind::LabelFlip { source, target } => {
            if source == target {
                return Err(Error::Parameter("label flip needs source != target".into()));
            }
            if source >= dataset.n_classes || target >= dataset.n_classes {
                return Err(Error::Parameter(format!(
                    "flip {source}->{target} outside [0, {})",
                    dataset.n_classes
                )));
            }
            (0..dataset.len())
                .filter(|&i| dataset.labels[i] == source && !dataset.mask[i])
                .collect()
        }
        CorruptionKind::FeatureNoise { sigma } => {
            if !(sigma >= 0.0) {
                return Err(Error::Parameter(format!("sigma must be >= 0, got {sigma}")));
            }
            (0..dataset.len()).filter(|&i| !dataset.mask[i]).collect()
        }
    };
    if eligible.len() < spec.count {
        return Err(Error::Parameter(format!(
            "need {} eligible rows, only {} available",
            spec.count,
            eligible.len()
        )));
    }
    let mut chosen = choose_without_replacement(&spec.rng, &eligible, spec.count);
    chosen.sort_unstable();

    let mut out = dataset.clone();
    let mut manifest = CorruptionManifest::default();
    let mut noise = BoxMuller::new(spec.rng.split(1).generator());
    for &i in &chosen {
        let original_label = out.labels[i];
        let kind = match spec.kind {
            CorruptionKind::LabelFlip { target, .. } => {
                out.labels[i] = target;
                "label-flip"
            }
            CorruptionKind::FeatureNoise { sigma } => {
                let f = out.n_features;
                for v in &mut out.features[i * f..(i + 1) * f] {
                    *v += sigma * noise.next_standard();
                }
                "feature-noise"
            }
        };
        out.mask[i] = true;
        manifest.records.push(CorruptionRecord {
            id: out.ids[i],
            kind: kind.into(),
            original_label,
        });
    }
    Ok((out, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> Dataset {
        synth_gaussian_blobs(&RngState::new(seed), 50, 2, 4, 3.0).unwrap()
    }

    #[test]
    fn three_row_csv() {
        let ds = parse_csv("a,b,label\n1,2,0\n3,5,1\n4,1,0\n", &CsvSchema::default()).unwrap();
        assert_eq!((ds.len(), ds.n_features(), ds.n_classes()), (3, 2, 2));
        // standardized columns have zero mean
        let col0: f64 = (0..3).map(|i| ds.row(i)[0]).sum();
        assert!(col0.abs() < 1e-12);
    }

    #[test]
    fn empty_csv_is_parse_error() {
        assert!(matches!(
            parse_csv("", &CsvSchema::default()),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            parse_csv("a,label\n", &CsvSchema::default()),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn constant_column_standardizes_to_zero() {
        let ds = parse_csv("a,c,label\n1,7,0\n3,7,1\n5,7,0\n", &CsvSchema::default()).unwrap();
        assert!((0..3).all(|i| ds.row(i)[1] == 0.0));
    }

    #[test]
    fn missing_column_and_bad_cell() {
        let schema = CsvSchema {
            label_column: "y".into(),
            ..CsvSchema::default()
        };
        assert!(matches!(parse_csv("a,label\n1,0\n", &schema), Err(Error::Schema(_))));
        match parse_csv("a,label\n1,0\nx,1\n", &CsvSchema::default()) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn categorical_one_hot_and_string_labels() {
        let schema = CsvSchema {
            categorical: vec!["work".into()],
            standardize: false,
            ..CsvSchema::default()
        };
        let ds = parse_csv(
            "age,work,label\n30,gov,>50K\n40,private,<=50K\n50,gov,<=50K\n",
            &schema,
        )
        .unwrap();
        assert_eq!(ds.n_features(), 3);
        assert_eq!(ds.row(1), &[40.0, 0.0, 1.0]);
        assert_eq!(ds.labels(), &[1, 0, 0]);
    }

    #[test]
    fn native_csv_round_trips_bit_exactly() {
        let ds = blobs(11);
        let (ds, _) = corrupt(
            &ds,
            &CorruptionSpec {
                kind: CorruptionKind::LabelFlip { source: 0, target: 1 },
                count: 5,
                rng: RngState::new(2),
            },
        )
        .unwrap();
        let back = parse_csv(&to_csv_string(&ds), &CsvSchema::native()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.digest(), ds.digest());
    }

    #[test]
    fn idx_parsing() {
        let pixels: Vec<u8> = (0..2 * 28 * 28).map(|i| (i % 256) as u8).collect();
        let (img, lab) = encode_idx(2, 28, 28, &pixels, &[9, 3]);
        let ds = parse_idx_pair(&img, &lab).unwrap();
        assert_eq!(ds.n_features(), 784);
        assert_eq!(ds.label(0), 9);
        assert!(ds.features().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(ds.row(0)[255], 1.0);

        assert!(matches!(
            parse_idx_pair(&img[..img.len() - 1], &lab),
            Err(Error::Format(_))
        ));
        assert!(matches!(parse_idx_pair(&img[..6], &lab), Err(Error::Format(_))));
        assert!(matches!(parse_idx_pair(&lab, &lab), Err(Error::Format(_))));
        let (_, lab3) = encode_idx(3, 28, 28, &[], &[1, 2, 3]);
        assert!(matches!(
            parse_idx_pair(&img, &lab3),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn blobs_shape_and_determinism() {
        let ds = blobs(5);
        assert_eq!(ds.len(), 100);
        assert_eq!(ds, blobs(5));
        assert_ne!(ds, blobs(6));
        assert!(synth_gaussian_blobs(&RngState::new(1), 5, 3, 2, 1.0).is_err());
        assert!(synth_gaussian_blobs(&RngState::new(1), 5, 2, 2, 0.0).is_err());
    }

    #[test]
    fn label_flip_accounting() {
        let ds = synth_gaussian_blobs(&RngState::new(1), 100, 8, 8, 2.0).unwrap();
        let spec = CorruptionSpec {
            kind: CorruptionKind::LabelFlip { source: 1, target: 7 },
            count: 40,
            rng: RngState::new(4),
        };
        let (bad, manifest) = corrupt(&ds, &spec).unwrap();
        assert_eq!(bad.corrupted_count(), 40);
        assert_eq!(manifest.records.len(), 40);
        for i in 0..ds.len() {
            if bad.mask()[i] {
                assert_eq!((ds.label(i), bad.label(i)), (1, 7));
            } else {
                assert_eq!(ds.label(i), bad.label(i));
            }
        }
        assert_eq!(bad.ids(), ds.ids());
        assert_eq!(ds.corrupted_count(), 0);
    }

    #[test]
    fn zero_count_is_identity() {
        let ds = blobs(3);
        let (same, manifest) = corrupt(
            &ds,
            &CorruptionSpec {
                kind: CorruptionKind::FeatureNoise { sigma: 2.0 },
                count: 0,
                rng: RngState::new(1),
            },
        )
        .unwrap();
        assert_eq!(same, ds);
        assert!(manifest.records.is_empty());
    }

    #[test]
    fn insufficient_source_rows() {
        let ds = blobs(3);
        let spec = CorruptionSpec {
            kind: CorruptionKind::LabelFlip { source: 0, target: 1 },
            count: 51,
            rng: RngState::new(1),
        };
        assert!(matches!(corrupt(&ds, &spec), Err(Error::Parameter(_))));
    }

    #[test]
    fn feature_noise_magnitude() {
        let ds = synth_gaussian_blobs(&RngState::new(8), 50, 2, 400, 1.0).unwrap();
        let spec = CorruptionSpec {
            kind: CorruptionKind::FeatureNoise { sigma: 5.0 },
            count: 30,
            rng: RngState::new(12),
        };
        let (noisy, _) = corrupt(&ds, &spec).unwrap();
        let mut changed = 0;
        for i in 0..ds.len() {
            let diff: Vec<f64> = ds.row(i).iter().zip(noisy.row(i)).map(|(a, b)| b - a).collect();
            if diff.iter().any(|d| *d != 0.0) {
                changed += 1;
                let n = diff.len() as f64;
                let mean = diff.iter().sum::<f64>() / n;
                let sd = (diff.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
                // 400 draws: standard error of the std is ~5/sqrt(800) ~= 0.18.
                assert!((sd - 5.0).abs() < 0.9, "row {i}: sd {sd}");
            }
        }
        assert_eq!(changed, 30);
    }

    #[test]
    fn disjoint_specs_add_up() {
        let ds = synth_gaussian_blobs(&RngState::new(1), 60, 3, 3, 2.0).unwrap();
        let (a, _) = corrupt(
            &ds,
            &CorruptionSpec {
                kind: CorruptionKind::LabelFlip { source: 0, target: 1 },
                count: 20,
                rng: RngState::new(1),
            },
        )
        .unwrap();
        let (b, _) = corrupt(
            &a,
            &CorruptionSpec {
                kind: CorruptionKind::FeatureNoise { sigma: 1.0 },
                count: 15,
                rng: RngState::new(2),
            },
        )
        .unwrap();
        assert_eq!(b.corrupted_count(), 35);
        assert_eq!((b.len(), b.n_features(), b.n_classes()), (ds.len(), 3, 3));
    }

    #[test]
    fn sparse_blobs_are_sparse() {
        let ds = synth_sparse_blobs(&RngState::new(2), 10, 4, 1000, 10, 3.0).unwrap();
        let nnz = ds.row(0).iter().filter(|v| **v != 0.0).count();
        assert!(nnz <= 20 && nnz >= 10, "nnz = {nnz}");
    }
}
