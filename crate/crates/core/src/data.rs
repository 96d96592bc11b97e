//! Synthetic sampling designs (two shores of an elliptical basin, clustered
//! day visits), dataset generation from a chosen model, and delimited-text
//! dataset I/O.

use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::config::{ModelConfig, SpatialLayout, TruthParams};
use crate::covariance::{cholesky_jittered, CorrelationSpec, PairwiseCache, SpatialPoint};
use crate::error::{Error, Result};
use crate::geometry::{Location, Shore};
use crate::model::Dataset;

/// Sampling design: how many locations, how they cluster into day visits,
/// and how the days spread over the season.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignSpec {
    pub n_locations: usize,
    pub n_days: usize,
    pub span_days: usize,
    /// Locations visited on each day, length `n_days`, summing to
    /// `n_locations`.
    pub cluster_sizes: Vec<usize>,
    /// Visit the two shores in alternation on consecutive days.
    pub alternate_shores: bool,
}

impl Default for DesignSpec {
    fn default() -> Self {
        // 36 days of four adjacent locations plus two days of eight,
        // one eight-day per shore, mid-season.
        let mut cluster_sizes = vec![4usize; 38];
        cluster_sizes[18] = 8;
        cluster_sizes[19] = 8;
        DesignSpec {
            n_locations: 160,
            n_days: 38,
            span_days: 70,
            cluster_sizes,
            alternate_shores: true,
        }
    }
}

impl DesignSpec {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_sizes.len() != self.n_days {
            return Err(Error::Config(format!(
                "cluster schedule has {} entries for {} days",
                self.cluster_sizes.len(),
                self.n_days
            )));
        }
        if self.cluster_sizes.iter().sum::<usize>() != self.n_locations {
            return Err(Error::Config("cluster sizes must sum to n_locations".into()));
        }
        if self.cluster_sizes.iter().any(|&c| c == 0) {
            return Err(Error::Config("every sampling day needs >= 1 location".into()));
        }
        if self.n_days > self.span_days {
            return Err(Error::Config("n_days cannot exceed span_days".into()));
        }
        Ok(())
    }
}

/// Semi-axes of the synthetic basin (arbitrary km-scale units).
const BASIN_MAJOR: f64 = 15.0;
const BASIN_MINOR: f64 = 5.0;

/// Place locations with jitter along two elliptical arcs, assign geodetic
/// depths smoothly along each arc, and draw the clustered day schedule.
pub fn generate_locations<R: Rng>(spec: &DesignSpec, rng: &mut R) -> Result<Vec<Location>> {
    spec.validate()?;
    // Julian days: a sorted distinct draw from the season span.
    let mut julian: Vec<u32> = rand::seq::index::sample(rng, spec.span_days, spec.n_days)
        .into_iter()
        .map(|i| i as u32 + 1)
        .collect();
    julian.sort_unstable();

    // Day -> shore: alternate (north first) or random.
    let shore_of_day: Vec<Shore> = (0..spec.n_days)
        .map(|t| {
            if spec.alternate_shores {
                if t % 2 == 0 {
                    Shore::North
                } else {
                    Shore::South
                }
            } else if rng.random::<bool>() {
                Shore::North
            } else {
                Shore::South
            }
        })
        .collect();

    let mut locations = Vec::with_capacity(spec.n_locations);
    let mut id = 0u32;
    for shore in [Shore::North, Shore::South] {
        let days: Vec<usize> = (0..spec.n_days)
            .filter(|&t| shore_of_day[t] == shore)
            .collect();
        let n_shore: usize = days.iter().map(|&t| spec.cluster_sizes[t]).sum();
        if n_shore == 0 {
            continue;
        }
        // Arc positions, ordered along the shoreline with a little jitter.
        let (lo, hi) = match shore {
            Shore::North => (0.10, 0.90),
            Shore::South => (1.10, 1.90),
        };
        let angles: Vec<f64> = (0..n_shore)
            .map(|k| {
                let frac = (k as f64 + 0.5) / n_shore as f64;
                let jitter = 0.3 * (rng.random::<f64>() - 0.5) / n_shore as f64;
                (lo + (hi - lo) * (frac + jitter)) * std::f64::consts::PI
            })
            .collect();
        // Clusters of adjacent locations share a day; which day each
        // adjacent chunk gets is shuffled within the shore.
        let mut chunk_days = days.clone();
        for k in (1..chunk_days.len()).rev() {
            let j = rng.random_range(0..=k);
            chunk_days.swap(k, j);
        }
        let mut pos = 0usize;
        for &t in &chunk_days {
            for _ in 0..spec.cluster_sizes[t] {
                let theta = angles[pos];
                pos += 1;
                let radial = 0.92 + 0.08 * rng.random::<f64>();
                let depth_noise: f64 = rng.sample::<f64, _>(StandardNormal);
                // Smooth along-shore depth profile; nearby sites share an isobath.
                let depth = 1.2
                    + 0.7 * (2.0 * theta + 0.8).sin()
                    + 0.25 * (5.0 * theta).sin()
                    + 0.05 * depth_noise;
                locations.push(Location {
                    id,
                    easting: BASIN_MAJOR * theta.cos() * radial,
                    northing: BASIN_MINOR * theta.sin() * radial,
                    shore,
                    geodetic_depth: depth,
                    day_index: t + 1,
                    julian_day: julian[t],
                });
                id += 1;
            }
        }
    }
    Ok(locations)
}

/// Synthetic covariates: each column mixes a smooth spatial field with
/// white noise according to its smoothness share in [0, 1], then is
/// standardized. Column 0's smooth component is the geodetic depth profile
/// itself; later columns use independent Gaussian-process draws.
pub fn generate_covariates<R: Rng>(
    locs: &[Location],
    smoothness: &[f64],
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    let n = locs.len();
    let k = smoothness.len();
    let pts: Vec<SpatialPoint> = locs.iter().map(SpatialPoint::from).collect();
    let cache = PairwiseCache::new(&pts);
    let phi = (cache.max_geo_distance() / 6.0).max(1e-9);
    let corr = cache.corr_matrix(&CorrelationSpec::Isotropic { phi })?;
    let chol = cholesky_jittered(&corr)?;
    let lower = chol.lower();
    let mut x = DMatrix::zeros(n, k);
    for (j, &share) in smoothness.iter().enumerate() {
        let share = share.clamp(0.0, 1.0);
        let smooth: DVector<f64> = if j == 0 {
            DVector::from_fn(n, |i, _| locs[i].geodetic_depth)
        } else {
            let xi = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            &lower * xi
        };
        let smooth = standardize_vec(&smooth);
        for i in 0..n {
            let noise: f64 = rng.sample::<f64, _>(StandardNormal);
            x[(i, j)] = share.sqrt() * smooth[i] + (1.0 - share).sqrt() * noise;
        }
    }
    let mut x = x;
    standardize_columns(&mut x);
    Ok(x)
}

fn standardize_vec(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let sd = var.sqrt().max(1e-12);
    v.map(|x| (x - mean) / sd)
}

fn standardize_columns(x: &mut DMatrix<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let var = col.iter().map(|v| v * v).sum::<f64>() / (n - 1.0).max(1.0);
        if var > 0.0 {
            col.scale_mut(1.0 / var.sqrt());
        }
    }
}

/// Latent draws behind a generated dataset.
#[derive(Debug, Clone)]
pub struct SimulatedLatents {
    pub gamma: DVector<f64>,
    pub z: DVector<f64>,
}

/// Draw the latent spatial effects of `model` at `truth` over `locs`.
pub fn draw_spatial_effects<R: Rng>(
    model: &ModelConfig,
    truth: &TruthParams,
    locs: &[Location],
    rng: &mut R,
) -> Result<DVector<f64>> {
    let layout = SpatialLayout::new(model, locs)?;
    let mut z = DVector::zeros(locs.len());
    for (b, block) in layout.blocks.iter().enumerate() {
        let bt = truth.blocks.get(b).ok_or_else(|| {
            Error::Config(format!("truth is missing spatial block {b}"))
        })?;
        if matches!(
            bt.corr,
            CorrelationSpec::None | CorrelationSpec::Independence
        ) {
            for &i in &block.indices {
                let e: f64 = rng.sample::<f64, _>(StandardNormal);
                z[i] = e * bt.sigma2.sqrt();
            }
            continue;
        }
        let corr = block.cache.corr_matrix(&bt.corr)?;
        let chol = cholesky_jittered(&corr)?;
        let xi = DVector::from_fn(block.indices.len(), |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        });
        let zb = chol.lower() * xi * bt.sigma2.sqrt();
        for (j, &i) in block.indices.iter().enumerate() {
            z[i] = zb[j];
        }
    }
    Ok(z)
}

/// Generate counts from the full hierarchy at `truth`, together with the
/// latent draws.
pub fn generate_dataset_full<R: Rng>(
    model: &ModelConfig,
    truth: &TruthParams,
    locs: &[Location],
    smoothness: &[f64],
    rng: &mut R,
) -> Result<(Dataset, SimulatedLatents)> {
    if truth.beta.len() != smoothness.len() {
        return Err(Error::Config(format!(
            "truth has {} covariate effects but {} smoothness shares",
            truth.beta.len(),
            smoothness.len()
        )));
    }
    let covariates = generate_covariates(locs, smoothness, rng)?;
    let n_days = locs.iter().map(|l| l.day_index).max().unwrap_or(0);
    let gamma = DVector::from_fn(n_days, |_, _| {
        let e: f64 = rng.sample::<f64, _>(StandardNormal);
        e * truth.tau2.max(0.0).sqrt()
    });
    let z = draw_spatial_effects(model, truth, locs, rng)?;
    let beta = DVector::from_vec(truth.beta.clone());
    let mut counts = Vec::with_capacity(locs.len());
    for (i, l) in locs.iter().enumerate() {
        let eta = truth.beta0
            + covariates.row(i).transpose().dot(&beta)
            + gamma[l.day_index - 1]
            + z[i];
        let lambda = eta.exp();
        if !lambda.is_finite() {
            return Err(Error::NonFiniteLinearPredictor(i));
        }
        let y = if lambda > 0.0 {
            Poisson::new(lambda)
                .map_err(|_| Error::NonFiniteLinearPredictor(i))?
                .sample(rng)
        } else {
            0.0
        };
        counts.push(y as u64);
    }
    let mut julian = vec![0u32; n_days];
    for l in locs {
        julian[l.day_index - 1] = l.julian_day;
    }
    let dataset = Dataset::new(counts, covariates, locs.to_vec(), julian, true)?;
    Ok((dataset, SimulatedLatents { gamma, z }))
}

/// Generate a synthetic dataset from `model` at `truth`.
pub fn generate_dataset<R: Rng>(
    model: &ModelConfig,
    truth: &TruthParams,
    locs: &[Location],
    smoothness: &[f64],
    rng: &mut R,
) -> Result<Dataset> {
    generate_dataset_full(model, truth, locs, smoothness, rng).map(|(d, _)| d)
}

/// 17-significant-digit scientific formatting: deterministic across
/// platforms and exact under parse-format round trips.
pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else {
        format!("{v:.16e}")
    }
}

const BASE_COLUMNS: [&str; 8] = [
    "id",
    "easting",
    "northing",
    "shore",
    "geodetic_depth",
    "day_index",
    "julian_day",
    "count",
];

/// Write a dataset as header-bearing comma-delimited text.
pub fn write_dataset(data: &Dataset, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut out = BufWriter::new(file);
    let k = data.n_covariates();
    let mut header: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    for j in 1..=k {
        header.push(format!("x{j}"));
    }
    writeln!(out, "{}", header.join(","))?;
    for (i, l) in data.locations.iter().enumerate() {
        let mut fields = vec![
            l.id.to_string(),
            fmt_f64(l.easting),
            fmt_f64(l.northing),
            l.shore.to_string(),
            fmt_f64(l.geodetic_depth),
            l.day_index.to_string(),
            l.julian_day.to_string(),
            data.counts[i].to_string(),
        ];
        for j in 0..k {
            fields.push(fmt_f64(data.covariates[(i, j)]));
        }
        writeln!(out, "{}", fields.join(","))?;
    }
    out.flush()?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`] (or any file with the same
/// schema). Reports missing columns as a schema error and malformed fields
/// with their line number.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path)?;
    let mut lines = std::io::BufReader::new(file).lines();
    let header_line = lines
        .next()
        .ok_or_else(|| Error::Parse {
            path: display.clone(),
            line: 1,
            msg: "empty file".into(),
        })??;
    let names: Vec<String> = header_line.split(',').map(|s| s.trim().to_string()).collect();
    let missing: Vec<String> = BASE_COLUMNS
        .iter()
        .filter(|c| !names.iter().any(|n| n == *c))
        .map(|c| c.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::Schema {
            path: display,
            missing,
        });
    }
    let col = |name: &str| names.iter().position(|n| n == name).unwrap();
    // Covariate columns x1..xk, required contiguous from 1.
    let mut xcols = Vec::new();
    for j in 1.. {
        match names.iter().position(|n| *n == format!("x{j}")) {
            Some(idx) => xcols.push(idx),
            None => break,
        }
    }

    let mut counts = Vec::new();
    let mut locations = Vec::new();
    let mut xrows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let lineno = lineno + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!("expected {} fields, found {}", names.len(), fields.len()),
            });
        }
        let parse_f64 = |name: &str| -> Result<f64> {
            let raw = fields[col(name)].trim();
            raw.parse::<f64>().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!("invalid number {raw:?} in column {name}"),
            })
        };
        let parse_usize = |name: &str| -> Result<usize> {
            let raw = fields[col(name)].trim();
            raw.parse::<usize>().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!("invalid integer {raw:?} in column {name}"),
            })
        };
        let shore_raw = fields[col("shore")].trim();
        let shore: Shore = shore_raw.parse().map_err(|e: String| Error::Parse {
            path: display.clone(),
            line: lineno,
            msg: e,
        })?;
        locations.push(Location {
            id: parse_usize("id")? as u32,
            easting: parse_f64("easting")?,
            northing: parse_f64("northing")?,
            shore,
            geodetic_depth: parse_f64("geodetic_depth")?,
            day_index: parse_usize("day_index")?,
            julian_day: parse_usize("julian_day")? as u32,
        });
        counts.push(parse_usize("count")? as u64);
        let mut row = Vec::with_capacity(xcols.len());
        for &xc in &xcols {
            let raw = fields[xc].trim();
            row.push(raw.parse::<f64>().map_err(|_| Error::Parse {
                path: display.clone(),
                line: lineno,
                msg: format!("invalid number {raw:?} in column {}", names[xc]),
            })?);
        }
        xrows.push(row);
    }
    if locations.is_empty() {
        return Err(Error::Parse {
            path: display,
            line: 2,
            msg: "no data rows".into(),
        });
    }
    let n = locations.len();
    let k = xcols.len();
    let covariates = DMatrix::from_fn(n, k, |i, j| xrows[i][j]);
    let n_days = locations.iter().map(|l| l.day_index).max().unwrap_or(0);
    let mut julian = vec![0u32; n_days];
    for l in &locations {
        if l.day_index >= 1 && l.day_index <= n_days {
            julian[l.day_index - 1] = l.julian_day;
        }
    }
    let standardized = covariates_look_standardized(&covariates);
    Dataset::new(counts, covariates, locations, julian, standardized)
}

/// Heuristic used on load: columns with zero mean and unit variance (to
/// tight tolerance) are flagged as standardized.
fn covariates_look_standardized(x: &DMatrix<f64>) -> bool {
    let n = x.nrows();
    if x.ncols() == 0 {
        return true;
    }
    for col in x.column_iter() {
        let mean = col.sum() / n as f64;
        if mean.abs() > 1e-8 {
            return false;
        }
        if n > 2 {
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
            if (var - 1.0).abs() > 1e-6 && var != 0.0 {
                return false;
            }
        }
    }
    true
}
