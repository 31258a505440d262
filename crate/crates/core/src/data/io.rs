//! Dataset directories: `features_<j>.csv` per client block, `response.csv`
//! and `meta.json` (offsets, levels, column names, ground truth).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GeneratorSpec, GroundTruth};
use crate::error::{check_len, Error, Result};
use crate::math::Mat;
use crate::models::{Dataset, Family};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetMeta {
    pub n: usize,
    pub block_sizes: Vec<usize>,
    pub columns: Vec<Vec<String>>,
    pub family: Option<Family>,
    pub offset: Option<Vec<f64>>,
    pub group: Option<Vec<usize>>,
    pub levels: Option<usize>,
    pub truth: Option<GroundTruth>,
    pub generator: Option<GeneratorSpec>,
}

impl DatasetMeta {
    /// Metadata for `data` with default column names `x<j>_<k>`.
    pub fn describe(data: &Dataset) -> Self {
        Self {
            n: data.n(),
            block_sizes: data.block_sizes(),
            columns: data
                .blocks
                .iter()
                .enumerate()
                .map(|(j, b)| (0..b.cols()).map(|k| format!("x{j}_{k}")).collect())
                .collect(),
            offset: data.offset.clone(),
            group: data.group.clone(),
            levels: data.levels,
            ..Default::default()
        }
    }
}

fn write_matrix(path: &Path, header: &[String], m: &Mat) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for i in 0..m.rows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_matrix(path: &Path) -> Result<(Vec<String>, Mat)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in r.records() {
        let rec = rec?;
        check_len(&format!("columns in {}", path.display()), header.len(), rec.len())?;
        for cell in rec.iter() {
            data.push(cell.trim().parse::<f64>().map_err(|_| {
                Error::Data(format!("{}: {cell:?} is not a number", path.display()))
            })?);
        }
        rows += 1;
    }
    let m = Mat::from_vec(rows, header.len(), data)?;
    Ok((header, m))
}

/// Writes `data` under `dir`, creating it. Offsets and groups always come
/// from `data`; the rest of `meta` is stored as given.
pub fn write_dataset(dir: &Path, data: &Dataset, meta: &DatasetMeta) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut meta = meta.clone();
    meta.n = data.n();
    meta.block_sizes = data.block_sizes();
    meta.offset = data.offset.clone();
    meta.group = data.group.clone();
    meta.levels = data.levels;
    if meta.columns.len() != data.num_clients() {
        meta.columns = DatasetMeta::describe(data).columns;
    }
    for (j, b) in data.blocks.iter().enumerate() {
        check_len(&format!("column names for client {j}"), b.cols(), meta.columns[j].len())?;
        write_matrix(&dir.join(format!("features_{j}.csv")), &meta.columns[j], b)?;
    }
    write_matrix(&dir.join("response.csv"), &["y".to_string()], &Mat::column(&data.y))?;
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetMeta)> {
    let meta: DatasetMeta = serde_json::from_str(&fs::read_to_string(dir.join("meta.json"))?)?;
    let mut blocks = Vec::new();
    let mut columns = Vec::new();
    for j in 0..meta.block_sizes.len() {
        let (h, m) = read_matrix(&dir.join(format!("features_{j}.csv")))?;
        check_len(&format!("columns of client {j}"), meta.block_sizes[j], m.cols())?;
        columns.push(h);
        blocks.push(m);
    }
    let (_, y) = read_matrix(&dir.join("response.csv"))?;
    if y.cols() != 1 {
        return Err(Error::Data("response.csv must have one column".into()));
    }
    let mut data = Dataset::new(y.into_vec(), blocks)?;
    check_len("rows", meta.n, data.n())?;
    data.offset = meta.offset.clone();
    data.group = meta.group.clone();
    data.levels = meta.levels;
    data.validate()?;
    let meta = DatasetMeta { columns, ..meta };
    Ok((data, meta))
}
