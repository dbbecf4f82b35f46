//! Two-view datasets: synthetic generation, missing-view simulation and the
//! on-disk directory format.
//!
//! A dataset directory holds `view1.csv`, `view2.csv`, `mask.csv`, an
//! optional `labels.csv` and `meta.json`. Entries of an unobserved view are
//! written as zeros; the mask is authoritative.

use std::fs::File;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::seeded_rng;

/// Which views an instance is observed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum InstanceKind {
    Complete,
    View1Only,
    View2Only,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewDataset {
    views: [Matrix; 2],
    mask: Vec<[bool; 2]>,
    labels: Option<Vec<usize>>,
}

impl MultiViewDataset {
    pub fn new(views: [Matrix; 2], mask: Vec<[bool; 2]>, labels: Option<Vec<usize>>) -> Result<Self> {
        let n = views[0].rows();
        if views[1].rows() != n {
            return Err(Error::Consistency(format!(
                "view 1 has {n} rows but view 2 has {}",
                views[1].rows()
            )));
        }
        if mask.len() != n {
            return Err(Error::Consistency(format!("mask has {} rows, expected {n}", mask.len())));
        }
        if let Some(i) = mask.iter().position(|m| !m[0] && !m[1]) {
            return Err(Error::Consistency(format!("instance {i} is observed in no view")));
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Consistency(format!("{} labels for {n} instances", l.len())));
            }
        }
        Ok(MultiViewDataset { views, mask, labels })
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// `view` is 0 or 1.
    pub fn view(&self, view: usize) -> &Matrix {
        &self.views[view]
    }

    pub fn views(&self) -> &[Matrix; 2] {
        &self.views
    }

    pub fn mask(&self) -> &[[bool; 2]] {
        &self.mask
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn kind(&self, i: usize) -> InstanceKind {
        match self.mask[i] {
            [true, true] => InstanceKind::Complete,
            [true, false] => InstanceKind::View1Only,
            _ => InstanceKind::View2Only,
        }
    }

    pub fn is_fully_observed(&self) -> bool {
        self.mask.iter().all(|m| m[0] && m[1])
    }

    pub fn complete_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i] == [true, true]).collect()
    }

    pub fn observed_indices(&self, view: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.mask[i][view]).collect()
    }

    /// Number of label classes, `max + 1`.
    pub fn class_count(&self) -> Option<usize> {
        self.labels.as_ref().and_then(|l| l.iter().max().map(|m| m + 1))
    }
}

/// Parameters of the synthetic two-view Gaussian mixture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub k: usize,
    pub latent_dim: usize,
    pub view_dims: [usize; 2],
    /// Minimum pairwise distance between mixture centres, in units of the
    /// unit within-cluster standard deviation.
    pub separation: f64,
    pub hidden: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 600,
            k: 3,
            latent_dim: 8,
            view_dims: [20, 30],
            separation: 8.0,
            hidden: 32,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k < 2 || self.n < self.k {
            return Err(Error::Config(format!(
                "need n >= k >= 2, got n = {}, k = {}",
                self.n, self.k
            )));
        }
        if !(self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Config("separation must be positive".into()));
        }
        if self.latent_dim == 0 || self.hidden == 0 || self.view_dims.contains(&0) {
            return Err(Error::Config("synthetic dimensions must be positive".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

fn gaussian_vec(len: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

/// Mixture centres with pairwise distance at least `separation`.
fn centroids(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let dim = spec.latent_dim;
    if spec.k <= dim {
        // scaled orthonormal frame: every pair sits exactly `separation` apart
        let radius = spec.separation / std::f64::consts::SQRT_2;
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(spec.k);
        while basis.len() < spec.k {
            let mut v = gaussian_vec(dim, rng);
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                basis.push(v.into_iter().map(|x| x / norm).collect());
            }
        }
        return basis
            .into_iter()
            .map(|b| b.into_iter().map(|x| x * radius).collect())
            .collect();
    }
    let mut spread = spec.separation;
    loop {
        for _ in 0..200 {
            let cs: Vec<Vec<f64>> = (0..spec.k)
                .map(|_| gaussian_vec(dim, rng).into_iter().map(|x| x * spread).collect())
                .collect();
            let ok = (0..spec.k).all(|i| {
                (i + 1..spec.k).all(|j| {
                    let d2: f64 = cs[i].iter().zip(&cs[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    d2.sqrt() >= spec.separation
                })
            });
            if ok {
                return cs;
            }
        }
        spread *= 1.25;
    }
}

/// Samples a fully observed two-view dataset with exactly balanced classes
/// (up to one instance when `k` does not divide `n`).
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<MultiViewDataset> {
    spec.validate()?;
    let mut rng = seeded_rng(spec.seed, crate::STREAM_SYNTHETIC);
    let centres = centroids(spec, &mut rng);

    let mut labels: Vec<usize> = (0..spec.n).map(|i| i % spec.k).collect();
    labels.shuffle(&mut rng);

    let latent: Vec<Vec<f64>> = labels
        .iter()
        .map(|&c| {
            centres[c]
                .iter()
                .map(|&m| m + Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect()
        })
        .collect();
    let latent = Matrix::from_rows(&latent)?;

    let views = [0, 1].map(|v| -> Result<Matrix> {
        let dim = spec.view_dims[v];
        let w1 = Matrix::from_parts(
            spec.latent_dim,
            spec.hidden,
            gaussian_vec(spec.latent_dim * spec.hidden, &mut rng),
        )
        .scale(1.0 / (spec.latent_dim as f64).sqrt());
        let b1 = gaussian_vec(spec.hidden, &mut rng);
        let w2 = Matrix::from_parts(spec.hidden, dim, gaussian_vec(spec.hidden * dim, &mut rng))
            .scale(1.0 / (spec.hidden as f64).sqrt());
        let mut h = latent.matmul(&w1)?;
        for r in 0..h.rows() {
            for (x, b) in h.row_mut(r).iter_mut().zip(&b1) {
                *x = (*x + 0.1 * b).tanh();
            }
        }
        let mut x = h.matmul(&w2)?;
        for v in x.as_mut_slice() {
            *v += spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng);
        }
        Ok(x)
    });
    let [v1, v2] = views;
    MultiViewDataset::new([v1?, v2?], vec![[true, true]; spec.n], Some(labels))
}

/// Number of instances that lose a view at `rate`, rounding half to even.
pub fn missing_count(n: usize, rate: f64) -> usize {
    (rate * n as f64).round_ties_even() as usize
}

/// Removes exactly one uniformly chosen view from `round(rate * n)`
/// uniformly chosen instances. Removed entries are zeroed.
pub fn apply_missing(ds: &MultiViewDataset, rate: f64, seed: u64) -> Result<MultiViewDataset> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("missing rate must lie in [0, 1), got {rate}")));
    }
    if !ds.is_fully_observed() {
        return Err(Error::Contract("missing views can only be applied to a fully observed dataset".into()));
    }
    let n = ds.len();
    let m = missing_count(n, rate);
    if m >= n {
        return Err(Error::Config(format!(
            "missing rate {rate} would leave no complete instance out of {n}"
        )));
    }
    let mut rng = seeded_rng(seed, crate::STREAM_MISSING);
    let mut views = ds.views.clone();
    let mut mask = ds.mask.clone();
    for i in index::sample(&mut rng, n, m) {
        let drop = usize::from(rng.gen_bool(0.5));
        mask[i][drop] = false;
        views[drop].row_mut(i).fill(0.0);
    }
    MultiViewDataset::new(views, mask, ds.labels.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub n: usize,
    pub d1: usize,
    pub d2: usize,
    pub k: usize,
    pub seed: u64,
    pub missing_rate: f64,
}

impl DatasetMeta {
    pub fn describe(ds: &MultiViewDataset, k: usize, seed: u64) -> Self {
        let incomplete = ds.len() - ds.complete_indices().len();
        DatasetMeta {
            n: ds.len(),
            d1: ds.view(0).cols(),
            d2: ds.view(1).cols(),
            k,
            seed,
            missing_rate: incomplete as f64 / ds.len() as f64,
        }
    }
}

const VIEW_FILES: [&str; 2] = ["view1.csv", "view2.csv"];

fn create(path: &Path) -> Result<csv::Writer<File>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("expected {expected_len} columns, found {len}"),
        },
        other => Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: format!("{other:?}"),
        },
    }
}

fn write_rows<I, R>(path: &Path, rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let mut w = create(path)?;
    for r in rows {
        w.write_record(r.into_iter().collect::<Vec<_>>()).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_matrix_csv(path: &Path, m: &Matrix) -> Result<()> {
    write_rows(path, m.row_iter().map(|r| r.iter().map(|v| v.to_string()).collect::<Vec<_>>()))
}

/// Reads a CSV file as rows of raw fields; every row must have the same
/// number of columns.
fn read_fields(path: &Path) -> Result<Vec<(u64, Vec<String>)>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        out.push((line, rec.iter().map(str::to_owned).collect()));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(path: &Path, line: u64, field: &str) -> Result<T> {
    field.parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("cannot parse `{field}`"),
    })
}

pub fn read_matrix_csv(path: &Path) -> Result<Matrix> {
    let rows = read_fields(path)?;
    if rows.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "file is empty".into(),
        });
    }
    let cols = rows[0].1.len();
    let mut data = Vec::with_capacity(rows.len() * cols);
    for (line, fields) in &rows {
        for f in fields {
            let v: f64 = parse_field(path, *line, f)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: *line,
                    msg: format!("non-finite value `{f}`"),
                });
            }
            data.push(v);
        }
    }
    Matrix::new(rows.len(), cols, data)
}

pub fn save_dataset(ds: &MultiViewDataset, dir: &Path, meta: &DatasetMeta) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (v, name) in VIEW_FILES.iter().enumerate() {
        write_matrix_csv(&dir.join(name), ds.view(v))?;
    }
    write_rows(
        &dir.join("mask.csv"),
        ds.mask
            .iter()
            .map(|m| m.iter().map(|&b| u8::from(b).to_string()).collect::<Vec<_>>()),
    )?;
    if let Some(labels) = &ds.labels {
        write_rows(&dir.join("labels.csv"), labels.iter().map(|l| [l.to_string()]))?;
    }
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(meta)?;
    std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<(MultiViewDataset, DatasetMeta)> {
    let views = [0, 1].map(|v| read_matrix_csv(&dir.join(VIEW_FILES[v])));
    let [v1, v2] = views;
    let (v1, v2) = (v1?, v2?);

    let mask_path = dir.join("mask.csv");
    let mut mask = Vec::new();
    for (line, fields) in read_fields(&mask_path)? {
        if fields.len() != 2 {
            return Err(Error::Parse {
                path: mask_path,
                line,
                msg: format!("mask rows need 2 columns, found {}", fields.len()),
            });
        }
        let mut m = [false; 2];
        for (slot, f) in m.iter_mut().zip(&fields) {
            *slot = match f.as_str() {
                "0" => false,
                "1" => true,
                _ => {
                    return Err(Error::Parse {
                        path: mask_path,
                        line,
                        msg: format!("mask entries must be 0 or 1, found `{f}`"),
                    })
                }
            };
        }
        mask.push(m);
    }

    let labels_path = dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let mut labels = Vec::new();
        for (line, fields) in read_fields(&labels_path)? {
            if fields.len() != 1 {
                return Err(Error::Parse {
                    path: labels_path,
                    line,
                    msg: "labels need exactly one column".into(),
                });
            }
            labels.push(parse_field::<usize>(&labels_path, line, &fields[0])?);
        }
        Some(labels)
    } else {
        None
    };

    let meta_path: PathBuf = dir.join("meta.json");
    let text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_str(&text)?;

    let ds = MultiViewDataset::new([v1, v2], mask, labels)?;
    if meta.n != ds.len() || meta.d1 != ds.view(0).cols() || meta.d2 != ds.view(1).cols() {
        return Err(Error::Consistency(format!(
            "meta.json describes n={}, d1={}, d2={} but the files hold n={}, d1={}, d2={}",
            meta.n,
            meta.d1,
            meta.d2,
            ds.len(),
            ds.view(0).cols(),
            ds.view(1).cols()
        )));
    }
    Ok((ds, meta))
}
