//! CSV ingestion and the z-score / one-hot preprocessing, fitted on training
//! rows only.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat, RngStream};
use crate::models::Dataset;

/// A CSV file as strings: header plus rows.
#[derive(Debug, Clone, PartialEq)]
pub struct RawTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl RawTable {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("missing column {name:?}")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Comma-separated, header row required.
pub fn read_table(path: &Path) -> Result<RawTable> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let header = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(|c| c.trim().to_string()).collect()))
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok(RawTable { header, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaConfig {
    pub continuous: Vec<String>,
    pub categorical: Vec<String>,
    pub response: String,
    /// Response value coded as 1; everything else is 0.
    pub positive_label: String,
    /// Covariates held by each client, in feature order.
    pub clients: Vec<Vec<String>>,
}

impl SchemaConfig {
    pub fn validate(&self) -> Result<()> {
        let cont: BTreeSet<&String> = self.continuous.iter().collect();
        let cat: BTreeSet<&String> = self.categorical.iter().collect();
        if cont.len() != self.continuous.len() || cat.len() != self.categorical.len() {
            return Err(Error::Config("duplicate column in schema".into()));
        }
        if let Some(c) = cont.intersection(&cat).next() {
            return Err(Error::Config(format!("{c:?} is both continuous and categorical")));
        }
        if cont.contains(&self.response) || cat.contains(&self.response) {
            return Err(Error::Config("the response cannot also be a feature".into()));
        }
        let assigned: Vec<&String> = self.clients.iter().flatten().collect();
        let unique: BTreeSet<&String> = assigned.iter().copied().collect();
        if self.clients.is_empty() || self.clients.iter().any(Vec::is_empty) {
            return Err(Error::Config("every client needs at least one column".into()));
        }
        if unique.len() != assigned.len() || unique.len() != cont.len() + cat.len() {
            return Err(Error::Config("each feature must go to exactly one client".into()));
        }
        if let Some(c) = unique.iter().find(|c| !cont.contains(*c) && !cat.contains(*c)) {
            return Err(Error::Config(format!("client column {c:?} has no type")));
        }
        Ok(())
    }
}

/// The heart-disease table: 11 covariates, the first five with client 1.
pub fn heart_schema() -> SchemaConfig {
    let s = |v: &[&str]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>();
    SchemaConfig {
        continuous: s(&["Age", "RestingBP", "Cholesterol", "MaxHR", "Oldpeak"]),
        categorical: s(&["Sex", "ChestPainType", "FastingBS", "RestingECG", "ExerciseAngina", "ST_Slope"]),
        response: "HeartDisease".into(),
        positive_label: "1".into(),
        clients: vec![
            s(&["Age", "Sex", "ChestPainType", "RestingBP", "Cholesterol"]),
            s(&["FastingBS", "RestingECG", "MaxHR", "ExerciseAngina", "Oldpeak", "ST_Slope"]),
        ],
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ColumnTransform {
    Scale { name: String, mean: f64, sd: f64 },
    /// Zero variance on the training rows.
    Dropped { name: String },
    OneHot { name: String, levels: Vec<String> },
}

/// Per-column transforms fitted on training rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Preprocessor {
    pub schema: SchemaConfig,
    /// Per client, in schema order.
    pub columns: Vec<Vec<ColumnTransform>>,
}

fn parse_num(table: &RawTable, row: usize, col: usize) -> Result<f64> {
    let cell = &table.rows[row][col];
    cell.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        Error::Data(format!(
            "row {row}, column {:?}: {cell:?} is not a number",
            table.header[col]
        ))
    })
}

impl Preprocessor {
    pub fn fit(table: &RawTable, schema: &SchemaConfig, rows: &[usize]) -> Result<Self> {
        schema.validate()?;
        if rows.is_empty() {
            return Err(Error::Data("no training rows".into()));
        }
        table.column(&schema.response)?;
        let mut columns = Vec::new();
        for names in &schema.clients {
            let mut client = Vec::new();
            for name in names {
                let c = table.column(name)?;
                if schema.continuous.contains(name) {
                    let vals = rows.iter().map(|&r| parse_num(table, r, c)).collect::<Result<Vec<_>>>()?;
                    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
                    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
                    let sd = var.sqrt();
                    if sd <= 1e-12 * (1.0 + mean.abs()) {
                        log::warn!("column {name:?} is constant on the training rows; dropped");
                        client.push(ColumnTransform::Dropped { name: name.clone() });
                    } else {
                        client.push(ColumnTransform::Scale {
                            name: name.clone(),
                            mean,
                            sd,
                        });
                    }
                } else {
                    let levels: BTreeSet<&String> = rows.iter().map(|&r| &table.rows[r][c]).collect();
                    client.push(ColumnTransform::OneHot {
                        name: name.clone(),
                        levels: levels.into_iter().cloned().collect(),
                    });
                }
            }
            columns.push(client);
        }
        let out = Self {
            schema: schema.clone(),
            columns,
        };
        if let Some(j) = out.feature_names().iter().position(Vec::is_empty) {
            return Err(Error::Data(format!("client {j} has no usable columns")));
        }
        Ok(out)
    }

    /// Output column names per client.
    pub fn feature_names(&self) -> Vec<Vec<String>> {
        self.columns
            .iter()
            .map(|client| {
                client
                    .iter()
                    .flat_map(|t| match t {
                        ColumnTransform::Scale { name, .. } => vec![name.clone()],
                        ColumnTransform::Dropped { .. } => vec![],
                        ColumnTransform::OneHot { name, levels } => {
                            levels.iter().map(|l| format!("{name}={l}")).collect()
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn transform(&self, table: &RawTable, rows: &[usize]) -> Result<Dataset> {
        let resp = table.column(&self.schema.response)?;
        let y = rows
            .iter()
            .map(|&r| f64::from(table.rows[r][resp] == self.schema.positive_label))
            .collect();
        let mut blocks = Vec::new();
        for client in &self.columns {
            let width: usize = client
                .iter()
                .map(|t| match t {
                    ColumnTransform::Scale { .. } => 1,
                    ColumnTransform::Dropped { .. } => 0,
                    ColumnTransform::OneHot { levels, .. } => levels.len(),
                })
                .sum();
            let mut m = Mat::zeros(rows.len(), width);
            let mut at = 0;
            for t in client {
                match t {
                    ColumnTransform::Scale { name, mean, sd } => {
                        let c = table.column(name)?;
                        for (i, &r) in rows.iter().enumerate() {
                            m[(i, at)] = (parse_num(table, r, c)? - mean) / sd;
                        }
                        at += 1;
                    }
                    ColumnTransform::Dropped { .. } => {}
                    ColumnTransform::OneHot { name, levels } => {
                        let c = table.column(name)?;
                        for (i, &r) in rows.iter().enumerate() {
                            let v = &table.rows[r][c];
                            match levels.iter().position(|l| l == v) {
                                Some(k) => m[(i, at + k)] = 1.0,
                                None => log::warn!("row {r}: unseen {name} category {v:?} encoded as all zeros"),
                            }
                        }
                        at += levels.len();
                    }
                }
            }
            blocks.push(m);
        }
        Dataset::new(y, blocks)
    }
}

/// Reads `path`, fits the preprocessing on every row and applies it.
pub fn load_and_preprocess(path: &Path, schema: &SchemaConfig) -> Result<(Dataset, Preprocessor)> {
    let table = read_table(path)?;
    let rows: Vec<usize> = (0..table.len()).collect();
    let pre = Preprocessor::fit(&table, schema, &rows)?;
    Ok((pre.transform(&table, &rows)?, pre))
}

/// A stand-in with the heart table's shape (918 rows, the same 11 columns
/// and categories) whose response follows a noisy linear score, so it is
/// close to separable. Used when the real file is not available.
pub fn synthetic_heart(seed: u64) -> RawTable {
    const N: usize = 918;
    let mut s = RngStream::new(seed, 0x200);
    let mut pick = |opts: &[(&str, f64)]| {
        let u = s.uniform();
        let mut acc = 0.0;
        for (o, w) in opts {
            acc += w;
            if u < acc {
                return o.to_string();
            }
        }
        opts[opts.len() - 1].0.to_string()
    };
    let mut cats = Vec::with_capacity(N);
    for _ in 0..N {
        cats.push([
            pick(&[("M", 0.79), ("F", 0.21)]),
            pick(&[("ASY", 0.54), ("NAP", 0.22), ("ATA", 0.19), ("TA", 0.05)]),
            pick(&[("0", 0.77), ("1", 0.23)]),
            pick(&[("Normal", 0.6), ("LVH", 0.2), ("ST", 0.2)]),
            pick(&[("N", 0.6), ("Y", 0.4)]),
            pick(&[("Flat", 0.5), ("Up", 0.43), ("Down", 0.07)]),
        ]);
    }
    let mut g = RngStream::new(seed, 0x201);
    let z = |g: &mut RngStream| g.standard_normal(N);
    let (age, bp, chol, hr, op, eps) = (z(&mut g), z(&mut g), z(&mut g), z(&mut g), z(&mut g), z(&mut g));
    let header = [
        "Age",
        "Sex",
        "ChestPainType",
        "RestingBP",
        "Cholesterol",
        "FastingBS",
        "RestingECG",
        "MaxHR",
        "ExerciseAngina",
        "Oldpeak",
        "ST_Slope",
        "HeartDisease",
    ]
    .iter()
    .map(|h| h.to_string())
    .collect();
    let rows = (0..N)
        .map(|i| {
            let [sex, cp, fbs, ecg, ang, slope] = &cats[i];
            let oldpeak = (0.9 + 1.07 * op[i]).max(0.0);
            let mut score = -1.0 + 0.3 * age[i] - 0.4 * hr[i] + 0.5 * (oldpeak - 0.9) / 1.07 + 0.1 * bp[i];
            score += match cp.as_str() {
                "ASY" => 1.2,
                "ATA" => -0.8,
                "NAP" => -0.5,
                _ => 0.0,
            };
            score += match slope.as_str() {
                "Flat" => 1.0,
                "Down" => 0.8,
                _ => -1.4,
            };
            score += if ang == "Y" { 0.9 } else { 0.0 } + if sex == "M" { 0.6 } else { 0.0 };
            score += if fbs == "1" { 0.4 } else { 0.0 };
            let y = u8::from(score + 0.35 * eps[i] > 0.0);
            vec![
                format!("{}", (54.0 + 9.4 * age[i]).round()),
                sex.clone(),
                cp.clone(),
                format!("{}", (132.0 + 18.0 * bp[i]).round()),
                format!("{}", (220.0 + 50.0 * chol[i]).round().max(85.0)),
                fbs.clone(),
                ecg.clone(),
                format!("{}", (137.0 + 25.0 * hr[i]).round()),
                ang.clone(),
                format!("{:.1}", oldpeak),
                slope.clone(),
                y.to_string(),
            ]
        })
        .collect();
    RawTable { header, rows }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> RawTable {
        let rows = [
            ["1.0", "a", "5", "x"],
            ["2.0", "b", "5", "y"],
            ["3.0", "c", "5", "x"],
            ["4.0", "a", "5", "y"],
        ];
        RawTable {
            header: ["u", "c", "k", "r"].iter().map(|s| s.to_string()).collect(),
            rows: rows.iter().map(|r| r.iter().map(|s| s.to_string()).collect()).collect(),
        }
    }

    fn schema() -> SchemaConfig {
        SchemaConfig {
            continuous: vec!["u".into(), "k".into()],
            categorical: vec!["c".into()],
            response: "r".into(),
            positive_label: "y".into(),
            clients: vec![vec!["u".into(), "k".into()], vec!["c".into()]],
        }
    }

    #[test]
    fn one_hot_rows_sum_to_one_and_constants_drop() {
        let t = table();
        let all = [0, 1, 2, 3];
        let p = Preprocessor::fit(&t, &schema(), &all).unwrap();
        let d = p.transform(&t, &all).unwrap();
        assert_eq!(d.block_sizes(), vec![1, 3]);
        assert_eq!(p.feature_names()[1], vec!["c=a", "c=b", "c=c"]);
        for i in 0..4 {
            assert_eq!(d.blocks[1].row(i).iter().sum::<f64>(), 1.0);
        }
        assert_eq!(d.y, vec![0.0, 1.0, 0.0, 1.0]);
        let col: Vec<f64> = (0..4).map(|i| d.blocks[0][(i, 0)]).collect();
        assert!(col.iter().sum::<f64>().abs() < 1e-12);
        assert!((col.iter().map(|v| v * v).sum::<f64>() / 4.0 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unseen_category_is_all_zeros() {
        let t = table();
        let p = Preprocessor::fit(&t, &schema(), &[0, 1, 3]).unwrap();
        let d = p.transform(&t, &[2]).unwrap();
        assert_eq!(d.blocks[1].row(0), &[0.0, 0.0]);
    }

    #[test]
    fn bad_schemas_and_cells_are_errors() {
        let t = table();
        let mut s = schema();
        s.categorical.push("u".into());
        assert!(s.validate().is_err());
        let mut s = schema();
        s.clients[1].push("r".into());
        assert!(s.validate().is_err());
        let mut s = schema();
        s.continuous.push("missing".into());
        s.clients[0].push("missing".into());
        assert!(Preprocessor::fit(&t, &s, &[0, 1]).is_err());
        let mut bad = t.clone();
        bad.rows[1][0] = "n/a".into();
        assert!(Preprocessor::fit(&bad, &schema(), &[0, 1]).is_err());
    }

    #[test]
    fn heart_fallback_has_the_real_shape() {
        let t = synthetic_heart(0);
        assert_eq!(t.len(), 918);
        assert_eq!(t.header.len(), 12);
        let s = heart_schema();
        s.validate().unwrap();
        assert_eq!(s.clients[0].len(), 5);
        assert_eq!(s.clients[1].len(), 6);
        let all: Vec<usize> = (0..918).collect();
        let d = Preprocessor::fit(&t, &s, &all).unwrap().transform(&t, &all).unwrap();
        // 3 continuous + 2 + 4 one-hot; 2 continuous + 2 + 3 + 2 + 3 one-hot
        assert_eq!(d.block_sizes(), vec![9, 12]);
        let pos = d.y.iter().sum::<f64>() / 918.0;
        assert!((0.45..0.65).contains(&pos), "{pos}");
    }
}
