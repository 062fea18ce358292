//! Plain-text dataset files, the dataset manifest and ingestion.
//!
//! * features: first line `<rows> <cols>`, then one space-separated row per line
//! * labels: one integer per line
//! * patches: per instance a line `<instance_id> <patch_count>` followed by
//!   that many feature rows
//! * splits: lines `<instance_id> train|val|test`
//! * manifest and configs: `key = value` lines, `#` starts a comment

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::dataset::{CrossModalDataset, Modality, Split};
use crate::error::{Error, Result};
use crate::fusion::{patch_cap, PatchGroup};
use crate::numeric::FeatureMatrix;

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

pub fn write_text(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)
                .map_err(|e| Error::io(format!("creating {}", parent.display()), e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn format_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

/// One `key = value` entry with its 1-based line number.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyValue {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// Parses `key = value` lines. Blank lines and `#` comments are skipped;
/// a repeated key is an error.
pub fn parse_key_values(text: &str, path: &Path) -> Result<Vec<KeyValue>> {
    let mut out: Vec<KeyValue> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format_err(
                path,
                i + 1,
                format!("expected `key = value`, got {line:?}"),
            ));
        };
        let key = key.trim().to_string();
        if key.is_empty() {
            return Err(format_err(path, i + 1, "empty key"));
        }
        if out.iter().any(|kv| kv.key == key) {
            return Err(format_err(path, i + 1, format!("duplicate key `{key}`")));
        }
        out.push(KeyValue {
            key,
            value: value.trim().to_string(),
            line: i + 1,
        });
    }
    Ok(out)
}

/// Non-blank lines as `(line_number, trimmed)`.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_row(line: &str, cols: usize, path: &Path, line_no: usize) -> Result<Vec<f64>> {
    let values = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, line_no, format!("bad number {tok:?}")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if values.len() != cols {
        return Err(format_err(
            path,
            line_no,
            format!("expected {cols} values, found {}", values.len()),
        ));
    }
    Ok(values)
}

fn parse_usize(tok: Option<&str>, what: &str, path: &Path, line_no: usize) -> Result<usize> {
    tok.and_then(|t| t.parse().ok())
        .ok_or_else(|| format_err(path, line_no, format!("expected {what}")))
}

pub fn parse_features(text: &str, path: &Path) -> Result<FeatureMatrix> {
    let mut lines = content_lines(text);
    let Some((hl, header)) = lines.next() else {
        return Err(format_err(path, 1, "missing `<rows> <cols>` header"));
    };
    let mut parts = header.split_whitespace();
    let rows = parse_usize(parts.next(), "row count in header", path, hl)?;
    let cols = parse_usize(parts.next(), "column count in header", path, hl)?;
    if parts.next().is_some() {
        return Err(format_err(path, hl, "header must be `<rows> <cols>`"));
    }
    let mut data = Vec::with_capacity(rows * cols);
    let mut last_line = hl;
    for r in 0..rows {
        let Some((ln, line)) = lines.next() else {
            return Err(format_err(
                path,
                last_line + 1,
                format!("header declares {rows} rows but the file ends after {r}"),
            ));
        };
        data.extend(parse_row(line, cols, path, ln)?);
        last_line = ln;
    }
    if let Some((ln, _)) = lines.next() {
        return Err(format_err(
            path,
            ln,
            format!("more than the declared {rows} rows"),
        ));
    }
    FeatureMatrix::new(rows, cols, data)
}

pub fn format_features(m: &FeatureMatrix) -> String {
    let mut out = format!("{} {}\n", m.rows(), m.cols());
    for row in m.row_iter() {
        push_row(&mut out, row);
    }
    out
}

fn push_row(out: &mut String, row: &[f64]) {
    for (j, v) in row.iter().enumerate() {
        if j > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub fn parse_labels(text: &str, path: &Path) -> Result<Vec<usize>> {
    content_lines(text)
        .map(|(ln, l)| {
            l.parse::<usize>().map_err(|_| {
                format_err(
                    path,
                    ln,
                    format!("expected a nonnegative integer label, got {l:?}"),
                )
            })
        })
        .collect()
}

pub fn format_labels(labels: &[usize]) -> String {
    labels.iter().map(|l| format!("{l}\n")).collect()
}

/// Parses a patch file for `instances` instances of width `cols`. Every
/// instance must have exactly one group of at most the modality's cap.
pub fn parse_patches(
    text: &str,
    path: &Path,
    instances: usize,
    cols: usize,
    modality: Modality,
) -> Result<Vec<PatchGroup>> {
    let cap = patch_cap(modality);
    let mut groups: Vec<Option<PatchGroup>> = vec![None; instances];
    let mut lines = content_lines(text).peekable();
    while let Some((ln, header)) = lines.next() {
        let mut parts = header.split_whitespace();
        let id = parse_usize(parts.next(), "`<instance_id> <patch_count>`", path, ln)?;
        let count = parse_usize(parts.next(), "`<instance_id> <patch_count>`", path, ln)?;
        if parts.next().is_some() {
            return Err(format_err(
                path,
                ln,
                "group header must be `<instance_id> <patch_count>`",
            ));
        }
        if id >= instances {
            return Err(format_err(
                path,
                ln,
                format!("instance id {id} out of range (0..{instances})"),
            ));
        }
        if groups[id].is_some() {
            return Err(format_err(path, ln, format!("instance {id} listed twice")));
        }
        let mut data = Vec::with_capacity(count * cols);
        let mut last = ln;
        for k in 0..count {
            let Some((rl, row)) = lines.next() else {
                return Err(format_err(
                    path,
                    last + 1,
                    format!("instance {id} declares {count} patches but the file ends after {k}"),
                ));
            };
            data.extend(parse_row(row, cols, path, rl)?);
            last = rl;
        }
        let group = PatchGroup {
            instance_id: id,
            features: FeatureMatrix::new(count, cols, data)?,
        };
        group.validate(modality, cap)?;
        groups[id] = Some(group);
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| {
            g.ok_or_else(|| {
                Error::Validation(format!(
                    "{}: instance {i} has no {modality} patches",
                    path.display()
                ))
            })
        })
        .collect()
}

pub fn format_patches(groups: &[PatchGroup]) -> String {
    let mut out = String::new();
    for g in groups {
        let _ = writeln!(out, "{} {}", g.instance_id, g.patch_count());
        for row in g.features.row_iter() {
            push_row(&mut out, row);
        }
    }
    out
}

/// Parses a split file that must tag each of `instances` ids exactly once.
pub fn parse_splits(text: &str, path: &Path, instances: usize) -> Result<Vec<Split>> {
    let mut splits: Vec<Option<Split>> = vec![None; instances];
    for (ln, line) in content_lines(text) {
        let mut parts = line.split_whitespace();
        let id = parse_usize(parts.next(), "`<instance_id> train|val|test`", path, ln)?;
        let split: Split = parts
            .next()
            .ok_or_else(|| format_err(path, ln, "missing split name"))?
            .parse()
            .map_err(|e: Error| format_err(path, ln, e.to_string()))?;
        if parts.next().is_some() {
            return Err(format_err(
                path,
                ln,
                "expected `<instance_id> train|val|test`",
            ));
        }
        if id >= instances {
            return Err(format_err(
                path,
                ln,
                format!("instance id {id} out of range (0..{instances})"),
            ));
        }
        if splits[id].replace(split).is_some() {
            return Err(format_err(
                path,
                ln,
                format!("instance {id} assigned twice"),
            ));
        }
    }
    splits
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| {
                Error::Validation(format!("{}: instance {i} has no split", path.display()))
            })
        })
        .collect()
}

pub fn format_splits(splits: &[Split]) -> String {
    splits
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{i} {}\n", s.as_str()))
        .collect()
}

/// Where a dataset's files live. Relative paths resolve against the
/// manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub image_features: PathBuf,
    pub text_features: PathBuf,
    pub labels: Option<PathBuf>,
    pub image_patches: Option<PathBuf>,
    pub text_patches: Option<PathBuf>,
    pub splits: PathBuf,
    pub image_dim: usize,
    pub text_dim: usize,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
        Self::parse(&text, path, &base)
    }

    pub fn parse(text: &str, path: &Path, base: &Path) -> Result<Self> {
        let mut name = None;
        let mut paths: [Option<PathBuf>; 6] = Default::default();
        let mut dims: [Option<usize>; 2] = [None, None];
        const PATH_KEYS: [&str; 6] = [
            "image_features",
            "text_features",
            "labels",
            "image_patches",
            "text_patches",
            "splits",
        ];
        for kv in parse_key_values(text, path)? {
            if kv.key == "name" {
                name = Some(kv.value);
            } else if let Some(i) = PATH_KEYS.iter().position(|k| *k == kv.key) {
                paths[i] = Some(base.join(&kv.value));
            } else if kv.key == "image_dim" || kv.key == "text_dim" {
                let v = kv.value.parse().map_err(|_| {
                    format_err(path, kv.line, format!("{} must be an integer", kv.key))
                })?;
                dims[(kv.key == "text_dim") as usize] = Some(v);
            } else {
                return Err(format_err(
                    path,
                    kv.line,
                    format!("unknown manifest key `{}`", kv.key),
                ));
            }
        }
        let need = |p: &mut Option<PathBuf>, key: &str| {
            p.take()
                .ok_or_else(|| Error::Config(format!("{}: missing `{key}`", path.display())))
        };
        let [image_features, text_features, labels, image_patches, text_patches, splits] = paths;
        let (mut a, mut b, mut s) = (image_features, text_features, splits);
        Ok(Self {
            name: name.unwrap_or_else(|| "dataset".into()),
            image_features: need(&mut a, "image_features")?,
            text_features: need(&mut b, "text_features")?,
            labels,
            image_patches,
            text_patches,
            splits: need(&mut s, "splits")?,
            image_dim: dims[0]
                .ok_or_else(|| Error::Config(format!("{}: missing `image_dim`", path.display())))?,
            text_dim: dims[1]
                .ok_or_else(|| Error::Config(format!("{}: missing `text_dim`", path.display())))?,
        })
    }

    /// Manifest text with paths relative to `base` where possible.
    pub fn to_text(&self, base: &Path) -> String {
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        let mut out = format!("name = {}\n", self.name);
        let _ = writeln!(out, "image_features = {}", rel(&self.image_features));
        let _ = writeln!(out, "text_features = {}", rel(&self.text_features));
        for (key, p) in [
            ("labels", &self.labels),
            ("image_patches", &self.image_patches),
            ("text_patches", &self.text_patches),
        ] {
            if let Some(p) = p {
                let _ = writeln!(out, "{key} = {}", rel(p));
            }
        }
        let _ = writeln!(out, "splits = {}", rel(&self.splits));
        let _ = writeln!(out, "image_dim = {}", self.image_dim);
        let _ = writeln!(out, "text_dim = {}", self.text_dim);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IngestOptions {
    /// Read the label file if the manifest names one.
    pub load_labels: bool,
}

impl Default for IngestOptions {
    fn default() -> Self {
        Self { load_labels: true }
    }
}

/// Per-feature mean and std over `rows`; a constant feature gets std 1.
pub fn column_stats(m: &FeatureMatrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len().max(1) as f64;
    let mut mean = vec![0.0; m.cols()];
    for &r in rows {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m.cols()];
    for &r in rows {
        for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var
        .iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-12 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}

pub fn standardize(m: &FeatureMatrix, mean: &[f64], std: &[f64]) -> FeatureMatrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        for ((v, mu), s) in out.row_mut(r).iter_mut().zip(mean).zip(std) {
            *v = (*v - mu) / s;
        }
    }
    out
}

/// Z-scores image features and image patches with statistics of the
/// training split. Text stays as raw counts.
pub fn standardize_dataset(data: &mut CrossModalDataset) {
    let train = data.indices(Split::Train);
    let (mean, std) = column_stats(&data.image, &train);
    data.image = standardize(&data.image, &mean, &std);
    if let Some(groups) = &mut data.image_patches {
        for g in groups {
            g.features = standardize(&g.features, &mean, &std);
        }
    }
}

/// Loads every file named by the manifest and standardizes image features.
pub fn ingest(manifest: &DatasetManifest, opts: IngestOptions) -> Result<CrossModalDataset> {
    let load_features = |p: &Path, dim: usize, modality: Modality| -> Result<FeatureMatrix> {
        let m = parse_features(&read_text(p)?, p)?;
        if m.cols() != dim {
            return Err(Error::Validation(format!(
                "{}: {modality} features have {} columns but the manifest declares {dim}",
                p.display(),
                m.cols()
            )));
        }
        Ok(m)
    };
    let image = load_features(
        &manifest.image_features,
        manifest.image_dim,
        Modality::Image,
    )?;
    let text = load_features(&manifest.text_features, manifest.text_dim, Modality::Text)?;
    if image.rows() != text.rows() {
        return Err(Error::Pairing {
            image_rows: image.rows(),
            text_rows: text.rows(),
        });
    }
    if text.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::Validation(format!(
            "{}: text features must be nonnegative word counts",
            manifest.text_features.display()
        )));
    }
    let n = image.rows();
    let splits = parse_splits(&read_text(&manifest.splits)?, &manifest.splits, n)?;
    let patches =
        |p: &Option<PathBuf>, dim: usize, m: Modality| -> Result<Option<Vec<PatchGroup>>> {
            p.as_ref()
                .map(|p| parse_patches(&read_text(p)?, p, n, dim, m))
                .transpose()
        };
    let image_patches = patches(&manifest.image_patches, manifest.image_dim, Modality::Image)?;
    let text_patches = patches(&manifest.text_patches, manifest.text_dim, Modality::Text)?;
    let labels = match (&manifest.labels, opts.load_labels) {
        (Some(p), true) => {
            let l = parse_labels(&read_text(p)?, p)?;
            if l.len() != n {
                return Err(Error::Validation(format!(
                    "{}: {} labels for {n} instances",
                    p.display(),
                    l.len()
                )));
            }
            Some(l)
        }
        _ => None,
    };
    let mut data = CrossModalDataset {
        name: manifest.name.clone(),
        image,
        text,
        image_patches,
        text_patches,
        labels,
        splits,
    };
    data.validate()?;
    standardize_dataset(&mut data);
    info!(
        "ingested {}: {n} instances, image {}d, text {}d, labels {}",
        data.name,
        manifest.image_dim,
        manifest.text_dim,
        if data.labels.is_some() { "yes" } else { "no" }
    );
    Ok(data)
}

/// Writes the dataset's files and a manifest into `dir`; returns the
/// manifest path.
pub fn write_dataset(data: &CrossModalDataset, dir: &Path) -> Result<PathBuf> {
    data.validate()?;
    let file = |name: &str| dir.join(name);
    write_text(&file("image.txt"), &format_features(&data.image))?;
    write_text(&file("text.txt"), &format_features(&data.text))?;
    write_text(&file("splits.txt"), &format_splits(&data.splits))?;
    if let Some(l) = &data.labels {
        write_text(&file("labels.txt"), &format_labels(l))?;
    }
    if let Some(g) = &data.image_patches {
        write_text(&file("image_patches.txt"), &format_patches(g))?;
    }
    if let Some(g) = &data.text_patches {
        write_text(&file("text_patches.txt"), &format_patches(g))?;
    }
    let manifest = DatasetManifest {
        name: data.name.clone(),
        image_features: file("image.txt"),
        text_features: file("text.txt"),
        labels: data.labels.as_ref().map(|_| file("labels.txt")),
        image_patches: data
            .image_patches
            .as_ref()
            .map(|_| file("image_patches.txt")),
        text_patches: data.text_patches.as_ref().map(|_| file("text_patches.txt")),
        splits: file("splits.txt"),
        image_dim: data.image.cols(),
        text_dim: data.text.cols(),
    };
    let path = file("manifest.txt");
    write_text(&path, &manifest.to_text(dir))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p() -> &'static Path {
        Path::new("mem.txt")
    }

    #[test]
    fn feature_file_examples() {
        let m = parse_features("2 3\n1 2 3\n4 5 6.5\n", p()).unwrap();
        assert_eq!(m.shape(), (2, 3));
        assert_eq!(m.get(1, 2), 6.5);
        match parse_features("2 3\n1 2 3\n", p()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected a format error, got {other:?}"),
        }
        match parse_features("2 3\n1 2 3\n4 5\n", p()) {
            Err(Error::Format { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_features("1 1\n1\n2\n", p()),
            Err(Error::Format { line: 3, .. })
        ));
        assert!(matches!(
            parse_features("x 1\n", p()),
            Err(Error::Format { line: 1, .. })
        ));
        assert!(matches!(
            parse_features("1 1\nnan\n", p()),
            Err(Error::Format { line: 2, .. })
        ));
    }

    #[test]
    fn features_round_trip_exactly() {
        let m = FeatureMatrix::from_rows(&[vec![0.1, -1e-300, 1.0 / 3.0], vec![2e10, 0.0, -7.25]])
            .unwrap();
        assert_eq!(parse_features(&format_features(&m), p()).unwrap(), m);
    }

    #[test]
    fn oversized_patch_group_cites_cap() {
        let mut text = String::from("0 11\n");
        for _ in 0..11 {
            text.push_str("1 2\n");
        }
        let err = parse_patches(&text, p(), 1, 2, Modality::Image).unwrap_err();
        assert!(matches!(err, Error::Validation(_)));
        assert!(err.to_string().contains("at most 10"));
        let text = "0 5\n1\n1\n1\n1\n1\n";
        let err = parse_patches(text, p(), 1, 1, Modality::Text).unwrap_err();
        assert!(err.to_string().contains("at most 4"));
    }

    #[test]
    fn patches_round_trip_and_require_every_instance() {
        let groups = vec![
            PatchGroup {
                instance_id: 0,
                features: FeatureMatrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap(),
            },
            PatchGroup {
                instance_id: 1,
                features: FeatureMatrix::from_rows(&[vec![5.0, 6.0]]).unwrap(),
            },
        ];
        let text = format_patches(&groups);
        assert_eq!(
            parse_patches(&text, p(), 2, 2, Modality::Image).unwrap(),
            groups
        );
        assert!(matches!(
            parse_patches(&text, p(), 3, 2, Modality::Image),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_patches("0 2\n1 2\n", p(), 1, 2, Modality::Image),
            Err(Error::Format { line: 3, .. })
        ));
    }

    #[test]
    fn split_file_must_partition_ids() {
        let s = parse_splits("0 train\n1 test\n2 val\n", p(), 3).unwrap();
        assert_eq!(s, vec![Split::Train, Split::Test, Split::Val]);
        assert!(matches!(
            parse_splits("0 train\n0 test\n", p(), 2),
            Err(Error::Format { line: 2, .. })
        ));
        assert!(matches!(
            parse_splits("0 train\n", p(), 2),
            Err(Error::Validation(_))
        ));
        assert!(matches!(
            parse_splits("0 dev\n", p(), 1),
            Err(Error::Format { line: 1, .. })
        ));
    }

    #[test]
    fn labels_parse() {
        assert_eq!(parse_labels("3\n0\n\n1\n", p()).unwrap(), vec![3, 0, 1]);
        assert!(matches!(
            parse_labels("1\n-2\n", p()),
            Err(Error::Format { line: 2, .. })
        ));
    }

    #[test]
    fn manifest_rejects_unknown_keys() {
        let text = "name = x\nimage_features = a\ntext_features = b\nsplits = s\nimage_dim = 2\ntext_dim = 3\ncolour = red\n";
        assert!(matches!(
            DatasetManifest::parse(text, p(), Path::new("/d")),
            Err(Error::Format { line: 7, .. })
        ));
        let ok = DatasetManifest::parse(&text.replace("colour = red\n", ""), p(), Path::new("/d"))
            .unwrap();
        assert_eq!(ok.image_features, PathBuf::from("/d/a"));
        assert_eq!(ok.labels, None);
        let again =
            DatasetManifest::parse(&ok.to_text(Path::new("/d")), p(), Path::new("/d")).unwrap();
        assert_eq!(again, ok);
    }

    #[test]
    fn standardization_uses_training_rows() {
        let m =
            FeatureMatrix::from_rows(&[vec![1.0, 5.0], vec![3.0, 5.0], vec![100.0, 0.0]]).unwrap();
        let (mean, std) = column_stats(&m, &[0, 1]);
        assert_eq!(mean, vec![2.0, 5.0]);
        assert_eq!(std, vec![1.0, 1.0]);
        let z = standardize(&m, &mean, &std);
        assert_eq!(z.row(0), &[-1.0, 0.0]);
        assert_eq!(z.row(2), &[98.0, -5.0]);
    }
}
