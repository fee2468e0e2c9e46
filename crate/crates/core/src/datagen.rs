//! Synthetic multi-site data with known ground truth.
//!
//! Eight standard settings cross {2, 10} sites, {500, 30} rows per site,
//! and {small, large} random-effect spread. Each site draws a trivariate
//! random effect: the first component shifts the log-odds of the outcome,
//! the second and third perturb the sensitivity and specificity of a
//! simulated imperfect phenotype. The phenotype draws are recorded in the
//! truth sidecar for downstream confusion analysis but never alter the
//! outcome column itself.
//!
//! Generation is fully deterministic: (seed, setting, dataset index) key a
//! counter-based ChaCha stream with a pinned draw order, so the same
//! inputs reproduce byte-identical files on any platform.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{sigmoid, SiteData};

/// Coefficients every dataset is generated from (intercept first).
pub const TRUE_BETA: [f64; 10] =
    [-1.5, 0.1, -0.5, -0.3, 0.4, -0.2, -0.25, 0.35, -0.1, 0.5];

/// Base sensitivity of the simulated phenotype.
pub const SENSITIVITY: f64 = 0.6;
/// Base specificity of the simulated phenotype.
pub const SPECIFICITY: f64 = 0.9;

/// One of the eight standard generation settings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenSetting {
    pub setting_id: u8,
    pub num_sites: usize,
    pub site_size: usize,
    /// Standard deviation of each random-effect component: 1 for the
    /// "small" settings, 2 for "large".
    pub random_effect_sd: u8,
}

impl GenSetting {
    /// Standard setting by id (1..=8).
    pub fn standard(setting_id: u8) -> Result<GenSetting> {
        if !(1..=8).contains(&setting_id) {
            return Err(Error::invalid_argument(format!(
                "setting id must be 1..=8, got {setting_id}"
            )));
        }
        let idx = setting_id - 1;
        Ok(GenSetting {
            setting_id,
            num_sites: if idx & 0b010 != 0 { 10 } else { 2 },
            site_size: if idx & 0b100 != 0 { 30 } else { 500 },
            random_effect_sd: if idx & 0b001 != 0 { 2 } else { 1 },
        })
    }

    /// All eight settings in id order.
    pub fn all() -> Vec<GenSetting> {
        (1..=8).map(|id| GenSetting::standard(id).expect("ids in range")).collect()
    }

    pub fn variance_label(&self) -> &'static str {
        if self.random_effect_sd == 1 {
            "small"
        } else {
            "large"
        }
    }
}

/// Ground truth for one generated row.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowTruth {
    /// Linear predictor x·β + μ₁ behind the outcome draw.
    pub log_odds: f64,
    /// Outcome written to the data file.
    pub outcome: u8,
    /// Bernoulli(clamp(sen + μ₂, 0, 1)) draw: whether the simulated
    /// phenotype would flag this row if the outcome is 1.
    pub sen_draw: u8,
    /// Bernoulli(clamp(sp + μ₃, 0, 1)) draw: whether the simulated
    /// phenotype would clear this row if the outcome is 0.
    pub sp_draw: u8,
}

impl RowTruth {
    /// Label the simulated phenotype would report for this row.
    pub fn phenotype(&self) -> u8 {
        if self.outcome == 1 {
            self.sen_draw
        } else {
            1 - self.sp_draw
        }
    }
}

/// Ground truth for one generated site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteTruth {
    pub site_id: String,
    /// (log-odds shift, sensitivity shift, specificity shift).
    pub mu: [f64; 3],
    pub rows: Vec<RowTruth>,
}

/// Everything the evaluator needs to score a fit of generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    pub sites: Vec<SiteTruth>,
}

impl GroundTruth {
    /// Confusion of the simulated phenotype against the outcome, pooled
    /// over sites: (true positive, false negative, false positive, true
    /// negative).
    pub fn phenotype_confusion(&self) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for site in &self.sites {
            for row in &site.rows {
                match (row.outcome, row.phenotype()) {
                    (1, 1) => c.0 += 1,
                    (1, 0) => c.1 += 1,
                    (0, 1) => c.2 += 1,
                    (0, 0) => c.3 += 1,
                    _ => unreachable!("labels are binary"),
                }
            }
        }
        c
    }
}

/// One generated dataset: the observable site tables plus their truth.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedDataset {
    pub sites: Vec<SiteData>,
    pub truth: GroundTruth,
}

fn dataset_rng(seed: u64, setting_id: u8, dataset_index: u32) -> ChaCha12Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&u64::from(setting_id).to_le_bytes());
    key[16..24].copy_from_slice(&u64::from(dataset_index).to_le_bytes());
    key[24..32].copy_from_slice(b"fedglmm1");
    ChaCha12Rng::from_seed(key)
}

/// Generate one dataset.
///
/// Draw order is pinned per site: the three random-effect normals, then
/// per row three Bernoulli uniforms (x2..x4), three standard normals
/// (x5..x7), three uniforms (x8..x10), the outcome, the sensitivity draw,
/// and the specificity draw (the last two are always consumed, so the
/// stream position never depends on drawn values).
pub fn generate(setting: &GenSetting, seed: u64, dataset_index: u32) -> GeneratedDataset {
    let mut rng = dataset_rng(seed, setting.setting_id, dataset_index);
    let sd = f64::from(setting.random_effect_sd);
    let p = TRUE_BETA.len();

    let mut sites = Vec::with_capacity(setting.num_sites);
    let mut truth_sites = Vec::with_capacity(setting.num_sites);
    for site_no in 1..=setting.num_sites {
        let site_id = site_no.to_string();
        let mu = [
            sd * rng.sample::<f64, _>(StandardNormal),
            sd * rng.sample::<f64, _>(StandardNormal),
            sd * rng.sample::<f64, _>(StandardNormal),
        ];
        let sen_prob = (SENSITIVITY + mu[1]).clamp(0.0, 1.0);
        let sp_prob = (SPECIFICITY + mu[2]).clamp(0.0, 1.0);

        let mut rows = Vec::with_capacity(setting.site_size);
        let mut outcomes = Vec::with_capacity(setting.site_size);
        let mut row_truth = Vec::with_capacity(setting.site_size);
        for _ in 0..setting.site_size {
            let mut x = Vec::with_capacity(p);
            x.push(1.0);
            for prob in [0.1, 0.3, 0.5] {
                x.push(f64::from(rng.random::<f64>() < prob));
            }
            for scale in [0.5, 1.0, 1.5] {
                x.push(scale * rng.sample::<f64, _>(StandardNormal));
            }
            for half_width in [0.5, 0.7, 1.0] {
                x.push(half_width * (2.0 * rng.random::<f64>() - 1.0));
            }
            let log_odds: f64 =
                x.iter().zip(TRUE_BETA).map(|(xi, bi)| xi * bi).sum::<f64>() + mu[0];
            let outcome = u8::from(rng.random::<f64>() < sigmoid(log_odds));
            let sen_draw = u8::from(rng.random::<f64>() < sen_prob);
            let sp_draw = u8::from(rng.random::<f64>() < sp_prob);
            rows.push(x);
            outcomes.push(outcome);
            row_truth.push(RowTruth { log_odds, outcome, sen_draw, sp_draw });
        }
        sites.push(
            SiteData::new(&site_id, rows, outcomes)
                .expect("generated rows always satisfy the data invariants"),
        );
        truth_sites.push(SiteTruth { site_id, mu, rows: row_truth });
    }
    GeneratedDataset {
        sites,
        truth: GroundTruth { beta: TRUE_BETA.to_vec(), sites: truth_sites },
    }
}

fn push_float(out: &mut String, v: f64) {
    let _ = write!(out, "{v:.16e}");
}

/// Paths produced by [`write_dataset`] for one dataset stem.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetPaths {
    pub data: PathBuf,
    pub truth: PathBuf,
}

impl DatasetPaths {
    /// Conventional file pair for a dataset stem: `{stem}.csv` and
    /// `{stem}.truth.csv` in `dir`.
    pub fn new(dir: &Path, stem: &str) -> DatasetPaths {
        DatasetPaths {
            data: dir.join(format!("{stem}.csv")),
            truth: dir.join(format!("{stem}.truth.csv")),
        }
    }
}

/// Write a dataset as a comma-separated data table plus a truth sidecar.
///
/// Floats are rendered with 17 significant digits, so reading the files
/// back reproduces the dataset exactly.
pub fn write_dataset(dataset: &GeneratedDataset, paths: &DatasetPaths) -> Result<()> {
    let p = dataset.sites.first().map_or(0, SiteData::dim);
    let mut data = String::from("site_id,y");
    for j in 1..=p {
        let _ = write!(data, ",x{j}");
    }
    data.push('\n');
    for site in &dataset.sites {
        for j in 0..site.len() {
            let _ = write!(data, "{},{}", site.site_id(), site.outcome(j));
            for v in site.row(j) {
                data.push(',');
                push_float(&mut data, *v);
            }
            data.push('\n');
        }
    }
    fs::write(&paths.data, data)?;

    let mut truth = String::from("kind,key1,key2,v1,v2,v3,v4,v5\n");
    for (j, b) in dataset.truth.beta.iter().enumerate() {
        let _ = write!(truth, "beta,{},,", j + 1);
        push_float(&mut truth, *b);
        truth.push_str(",,,,\n");
    }
    for site in &dataset.truth.sites {
        let _ = write!(truth, "site_mu,{},,", site.site_id);
        push_float(&mut truth, site.mu[0]);
        truth.push(',');
        push_float(&mut truth, site.mu[1]);
        truth.push(',');
        push_float(&mut truth, site.mu[2]);
        truth.push_str(",,\n");
    }
    for site in &dataset.truth.sites {
        for (idx, row) in site.rows.iter().enumerate() {
            let _ = write!(truth, "row,{},{},", site.site_id, idx);
            push_float(&mut truth, row.log_odds);
            let _ = writeln!(
                truth,
                ",{},{},{},",
                row.outcome, row.sen_draw, row.sp_draw
            );
        }
    }
    fs::write(&paths.truth, truth)?;
    Ok(())
}

fn split_line(line: &str, path: &Path, lineno: usize) -> Result<Vec<String>> {
    if line.contains('"') {
        return Err(Error::invalid_data(format!(
            "{}:{}: quoted fields are not supported",
            path.display(),
            lineno
        )));
    }
    Ok(line.split(',').map(str::to_string).collect())
}

fn parse_f64(field: &str, path: &Path, lineno: usize) -> Result<f64> {
    field.parse::<f64>().map_err(|_| {
        Error::invalid_data(format!(
            "{}:{}: '{field}' is not a number",
            path.display(),
            lineno
        ))
    })
}

fn parse_label(field: &str, path: &Path, lineno: usize) -> Result<u8> {
    match field {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::invalid_data(format!(
            "{}:{}: outcome '{field}' must be 0 or 1",
            path.display(),
            lineno
        ))),
    }
}

/// Read a data table written by [`write_dataset`] (or any table with the
/// same header shape). Rows are grouped by site id in ascending order.
pub fn read_dataset(path: &Path) -> Result<Vec<SiteData>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::invalid_data(format!("{}: empty file", path.display())));
    };
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "site_id" || cols[1] != "y" {
        return Err(Error::invalid_data(format!(
            "{}: header must start with site_id,y,x1,…",
            path.display()
        )));
    }
    let p = cols.len() - 2;
    for (j, col) in cols[2..].iter().enumerate() {
        if *col != format!("x{}", j + 1) {
            return Err(Error::invalid_data(format!(
                "{}: column {} is '{col}', expected 'x{}'",
                path.display(),
                j + 3,
                j + 1
            )));
        }
    }

    // Group rows per site id; sites keep first-appearance order so a
    // write/read cycle preserves the original site sequence.
    let mut site_order: Vec<String> = Vec::new();
    let mut by_site: std::collections::HashMap<String, (Vec<Vec<f64>>, Vec<u8>)> =
        std::collections::HashMap::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields = split_line(line, path, lineno + 1)?;
        if fields.len() != p + 2 {
            return Err(Error::invalid_data(format!(
                "{}:{}: expected {} fields, got {}",
                path.display(),
                lineno + 1,
                p + 2,
                fields.len()
            )));
        }
        let y = parse_label(&fields[1], path, lineno + 1)?;
        let mut row = Vec::with_capacity(p);
        for f in &fields[2..] {
            row.push(parse_f64(f, path, lineno + 1)?);
        }
        if !by_site.contains_key(&fields[0]) {
            site_order.push(fields[0].clone());
        }
        let entry = by_site.entry(fields[0].clone()).or_default();
        entry.0.push(row);
        entry.1.push(y);
    }
    if site_order.is_empty() {
        return Err(Error::invalid_data(format!("{}: no data rows", path.display())));
    }
    site_order
        .into_iter()
        .map(|site_id| {
            let (rows, outcomes) = by_site.remove(&site_id).expect("ordered ids were inserted");
            SiteData::new(&site_id, rows, outcomes)
        })
        .collect()
}

/// Read a truth sidecar written by [`write_dataset`].
pub fn read_truth(path: &Path) -> Result<GroundTruth> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate();
    let Some((_, header)) = lines.next() else {
        return Err(Error::invalid_data(format!("{}: empty file", path.display())));
    };
    if header != "kind,key1,key2,v1,v2,v3,v4,v5" {
        return Err(Error::invalid_data(format!(
            "{}: unrecognized truth header '{header}'",
            path.display()
        )));
    }
    let mut beta: Vec<(usize, f64)> = Vec::new();
    let mut sites: Vec<SiteTruth> = Vec::new();
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        let lineno = lineno + 1;
        let fields = split_line(line, path, lineno)?;
        if fields.len() != 8 {
            return Err(Error::invalid_data(format!(
                "{}:{}: expected 8 fields, got {}",
                path.display(),
                lineno,
                fields.len()
            )));
        }
        match fields[0].as_str() {
            "beta" => {
                let j: usize = fields[1].parse().map_err(|_| {
                    Error::invalid_data(format!(
                        "{}:{}: bad coefficient index '{}'",
                        path.display(),
                        lineno,
                        fields[1]
                    ))
                })?;
                beta.push((j, parse_f64(&fields[3], path, lineno)?));
            }
            "site_mu" => {
                sites.push(SiteTruth {
                    site_id: fields[1].clone(),
                    mu: [
                        parse_f64(&fields[3], path, lineno)?,
                        parse_f64(&fields[4], path, lineno)?,
                        parse_f64(&fields[5], path, lineno)?,
                    ],
                    rows: Vec::new(),
                });
            }
            "row" => {
                let site = sites
                    .iter_mut()
                    .find(|s| s.site_id == fields[1])
                    .ok_or_else(|| {
                        Error::invalid_data(format!(
                            "{}:{}: row for unknown site '{}'",
                            path.display(),
                            lineno,
                            fields[1]
                        ))
                    })?;
                let idx: usize = fields[2].parse().map_err(|_| {
                    Error::invalid_data(format!(
                        "{}:{}: bad row index '{}'",
                        path.display(),
                        lineno,
                        fields[2]
                    ))
                })?;
                if idx != site.rows.len() {
                    return Err(Error::invalid_data(format!(
                        "{}:{}: row index {idx} out of order",
                        path.display(),
                        lineno
                    )));
                }
                site.rows.push(RowTruth {
                    log_odds: parse_f64(&fields[3], path, lineno)?,
                    outcome: parse_label(&fields[4], path, lineno)?,
                    sen_draw: parse_label(&fields[5], path, lineno)?,
                    sp_draw: parse_label(&fields[6], path, lineno)?,
                });
            }
            other => {
                return Err(Error::invalid_data(format!(
                    "{}:{}: unknown truth kind '{other}'",
                    path.display(),
                    lineno
                )));
            }
        }
    }
    beta.sort_by_key(|(j, _)| *j);
    if beta.is_empty() || beta.iter().enumerate().any(|(i, (j, _))| *j != i + 1) {
        return Err(Error::invalid_data(format!(
            "{}: coefficient rows must cover 1..=p exactly",
            path.display()
        )));
    }
    Ok(GroundTruth { beta: beta.into_iter().map(|(_, b)| b).collect(), sites })
}
