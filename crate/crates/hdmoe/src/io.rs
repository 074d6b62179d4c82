//! Dataset manifest, feature files and the synthetic ground-truth sidecar.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use hdmoe_core::data::make_folds;
use hdmoe_core::synthetic::SyntheticCohort;
use hdmoe_core::{Matrix, SampleRecord};

use crate::error::{CliError, Result};

pub const MANIFEST_HEADER: [&str; 6] = [
    "sample_id",
    "time_months",
    "censored",
    "modality_a_file",
    "modality_b_file",
    "fold",
];

/// One manifest line; file paths are as written (relative to the manifest).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub sample_id: String,
    pub time_months: f64,
    pub censored: bool,
    pub modality_a_file: PathBuf,
    pub modality_b_file: PathBuf,
    pub fold: Option<usize>,
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

pub fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::parse(path, format!("{other:?}")),
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = read_file(path)?;
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header: Vec<String> = rdr
        .headers()
        .map_err(|e| csv_err(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let has_fold = match header.len() {
        5 => false,
        6 => true,
        _ => return Err(CliError::parse(path, format!("unexpected header {header:?}"))),
    };
    if header.iter().zip(MANIFEST_HEADER).any(|(h, e)| h != e) {
        return Err(CliError::parse(
            path,
            format!("header must be {}", MANIFEST_HEADER[..header.len()].join(",")),
        ));
    }

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |msg: String| CliError::parse(path, format!("line {line}: {msg}"));
        let field = |j: usize| rec.get(j).unwrap_or("");
        let sample_id = field(0).to_owned();
        if sample_id.is_empty() {
            return Err(bad("empty sample_id".into()));
        }
        if !seen.insert(sample_id.clone()) {
            return Err(bad(format!("duplicate sample_id `{sample_id}`")));
        }
        let time_months: f64 = field(1)
            .parse()
            .map_err(|_| bad(format!("time_months `{}` is not a number", field(1))))?;
        let censored = match field(2) {
            "0" => false,
            "1" => true,
            v => return Err(bad(format!("censored must be 0 or 1, got `{v}`"))),
        };
        let fold = if has_fold {
            Some(
                field(5)
                    .parse()
                    .map_err(|_| bad(format!("fold `{}` is not a non-negative integer", field(5))))?,
            )
        } else {
            None
        };
        rows.push(ManifestRow {
            sample_id,
            time_months,
            censored,
            modality_a_file: field(3).into(),
            modality_b_file: field(4).into(),
            fold,
        });
    }
    Ok(rows)
}

/// Numeric matrix without header, one instance per row.
pub fn read_features(path: &Path) -> Result<Matrix> {
    let text = read_file(path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let row = rec
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| CliError::parse(path, format!("line {}: `{v}` is not a finite number", i + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(CliError::parse(path, "feature file has no instances"));
    }
    Matrix::from_rows(&rows).map_err(|e| CliError::parse(path, e.to_string()))
}

pub fn format_features(m: &Matrix) -> String {
    let mut out = String::new();
    for r in 0..m.rows() {
        let line: Vec<String> = m.row(r).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

/// Load every record of a manifest. Records without a fold column get a
/// seeded random fold assignment.
pub fn load_dataset(manifest: &Path, k_folds: usize, seed: u64, d_in: usize) -> Result<Vec<SampleRecord>> {
    let rows = read_manifest(manifest)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let folds = if rows.iter().all(|r| r.fold.is_some()) {
        rows.iter().map(|r| r.fold.unwrap_or_default()).collect()
    } else {
        make_folds(rows.len(), k_folds, seed)?
    };
    let mut records = Vec::with_capacity(rows.len());
    for (row, fold) in rows.into_iter().zip(folds) {
        if fold >= k_folds {
            return Err(CliError::config(format!(
                "sample {}: fold {fold} outside 0..{k_folds}",
                row.sample_id
            )));
        }
        let pa = base.join(&row.modality_a_file);
        let pb = base.join(&row.modality_b_file);
        let (a, b) = (read_features(&pa)?, read_features(&pb)?);
        for (p, m) in [(&pa, &a), (&pb, &b)] {
            if m.cols() != d_in {
                return Err(CliError::parse(p, format!("{} columns, config d_in = {d_in}", m.cols())));
            }
        }
        records.push(SampleRecord::new(row.sample_id, a, b, row.time_months, row.censored, fold)?);
    }
    Ok(records)
}

/// Write `manifest.csv`, `features/<id>_{a,b}.csv` and `truth.csv` under `dir`.
pub fn write_dataset(dir: &Path, cohort: &SyntheticCohort, k_folds: usize, seed: u64) -> Result<()> {
    let feat_dir = dir.join("features");
    create_dir(&feat_dir)?;
    let n = cohort.records.len();
    let folds = if n >= k_folds {
        make_folds(n, k_folds, seed)?
    } else {
        (0..n).collect()
    };

    let mut manifest = csv::Writer::from_writer(Vec::new());
    let path = dir.join("manifest.csv");
    manifest.write_record(MANIFEST_HEADER).map_err(|e| csv_err(&path, e))?;
    for (r, fold) in cohort.records.iter().zip(folds) {
        let fa = format!("features/{}_a.csv", r.sample_id);
        let fb = format!("features/{}_b.csv", r.sample_id);
        write_file(&dir.join(&fa), format_features(&r.modality_a))?;
        write_file(&dir.join(&fb), format_features(&r.modality_b))?;
        let rec = [
            r.sample_id.clone(),
            r.time_months.to_string(),
            u8::from(r.censored).to_string(),
            fa,
            fb,
            fold.to_string(),
        ];
        manifest.write_record(&rec).map_err(|e| csv_err(&path, e))?;
    }
    write_file(&path, manifest.into_inner().expect("in-memory writer"))?;

    let mut truth = String::from("sample_id");
    if let Some(t) = cohort.truth.first() {
        for (name, len) in [
            ("z_shared", t.z_shared.len()),
            ("z_spec_a", t.z_spec_a.len()),
            ("z_spec_b", t.z_spec_b.len()),
        ] {
            for j in 0..len {
                truth.push_str(&format!(",{name}_{j}"));
            }
        }
    }
    truth.push_str(",true_score\n");
    for t in &cohort.truth {
        truth.push_str(&t.sample_id);
        for v in t.z_shared.iter().chain(&t.z_spec_a).chain(&t.z_spec_b) {
            truth.push_str(&format!(",{v}"));
        }
        truth.push_str(&format!(",{}\n", t.true_score));
    }
    write_file(&dir.join("truth.csv"), truth)
}
