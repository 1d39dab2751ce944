//! Evaluation metrics (FID, generation diversity, perceptual hashing) and
//! the ablation harness.
//!
//! Features come from a pluggable [`FeatureExtractor`]. The bundled
//! [`ProjectionExtractor`] is a fixed random projection of a 16×16 grayscale
//! thumbnail: cheap, deterministic, and good enough to compare configurations
//! against each other, but its absolute FID values are not comparable with
//! Inception-based scores.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assembler::{AssemblyError, Prototype};
use crate::backends::Backends;
use crate::image::RasterImage;
use crate::orchestrator::{
    Ablation, DesignInput, Knowledge, ModuleId, OrchestratorError, Pipeline, PipelineConfig,
};
use crate::retrieval::IconIndex;

pub const EIGEN_CLAMP: f64 = 1e-10;
pub const FID_NEGATIVE_TOLERANCE: f64 = 1e-6;
pub const RASTER_SIZE: u32 = 512;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("feature vectors must be non-empty")]
    ZeroDimension,
    #[error("non-finite feature value in row {0}")]
    NonFinite(usize),
    #[error("fid came out at {0}, below the numerical tolerance")]
    Numerical(f64),
    #[error("svg rasterization failed: {0}")]
    Render(String),
    #[error(transparent)]
    UnknownFlag(#[from] crate::orchestrator::UnknownAblation),
    #[error("generation failed in config `{config}`: {source}")]
    Pipeline {
        config: String,
        #[source]
        source: OrchestratorError,
    },
    #[error("assembly failed in config `{config}`: {source}")]
    Assembly {
        config: String,
        #[source]
        source: AssemblyError,
    },
    #[error("feature file line {line}: {message}")]
    FeatureFile { line: usize, message: String },
    #[error("malformed ablation config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `N × d` matrix of feature vectors, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    rows: DMatrix<f64>,
}

impl FeatureSet {
    pub fn new(vectors: &[Vec<f64>]) -> Result<Self, EvalError> {
        let d = vectors.first().map(Vec::len).unwrap_or(0);
        Self::with_dim(d, vectors)
    }

    pub fn with_dim(d: usize, vectors: &[Vec<f64>]) -> Result<Self, EvalError> {
        if d == 0 {
            return Err(EvalError::ZeroDimension);
        }
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != d {
                return Err(EvalError::DimensionMismatch {
                    expected: d,
                    actual: v.len(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(EvalError::NonFinite(i));
            }
        }
        Ok(FeatureSet {
            rows: DMatrix::from_fn(vectors.len(), d, |i, j| vectors[i][j]),
        })
    }

    pub fn len(&self) -> usize {
        self.rows.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Sample mean and unbiased (N−1) covariance, symmetrized.
pub fn fit_gaussian(features: &FeatureSet) -> Result<GaussianStats, EvalError> {
    let n = features.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let x = features.matrix();
    let mean: DVector<f64> = x.row_mean().transpose();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let cov = (&cov + cov.transpose()) * 0.5;
    Ok(GaussianStats { mean, cov })
}

fn symmetric_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let roots = eig.eigenvalues.map(|l| if l < EIGEN_CLAMP { 0.0 } else { l.sqrt() });
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `‖μr−μg‖² + Tr(Σr + Σg − 2(ΣrΣg)^½)`.
///
/// `Tr((ΣrΣg)^½)` is evaluated as the trace of the square root of the
/// symmetric matrix `Σr^½ Σg Σr^½`, which has the same eigenvalues.
pub fn fid(real: &GaussianStats, gen: &GaussianStats) -> Result<f64, EvalError> {
    if real.dim() != gen.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: real.dim(),
            actual: gen.dim(),
        });
    }
    let diff = &real.mean - &gen.mean;
    let sr = symmetric_sqrt(&real.cov);
    let inner = &sr * &gen.cov * &sr;
    let eig = SymmetricEigen::new((&inner + inner.transpose()) * 0.5);
    let tr_sqrt: f64 = eig
        .eigenvalues
        .iter()
        .map(|&l| if l < EIGEN_CLAMP { 0.0 } else { l.sqrt() })
        .sum();
    let value = diff.norm_squared() + real.cov.trace() + gen.cov.trace() - 2.0 * tr_sqrt;
    if value >= 0.0 {
        Ok(value)
    } else if value >= -FID_NEGATIVE_TOLERANCE {
        Ok(0.0)
    } else {
        Err(EvalError::Numerical(value))
    }
}

pub fn fid_from_features(real: &FeatureSet, gen: &FeatureSet) -> Result<f64, EvalError> {
    fid(&fit_gaussian(real)?, &fit_gaussian(gen)?)
}

/// Mean Euclidean distance over ordered pairs `i ≠ j`.
pub fn gd(features: &FeatureSet) -> Result<f64, EvalError> {
    let n = features.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let x = features.matrix();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                total += (x.row(i) - x.row(j)).norm();
            }
        }
    }
    Ok(total / (n * (n - 1)) as f64)
}

/// Mean Hamming distance over ordered pairs of perceptual hashes.
pub fn gd_hamming(hashes: &[u64]) -> Result<f64, EvalError> {
    let n = hashes.len();
    if n < 2 {
        return Err(EvalError::TooFewSamples(n));
    }
    let mut total = 0u64;
    for (i, a) in hashes.iter().enumerate() {
        for (j, b) in hashes.iter().enumerate() {
            if i != j {
                total += (a ^ b).count_ones() as u64;
            }
        }
    }
    Ok(total as f64 / (n * (n - 1)) as f64)
}

/// Luma scaled by 1000, exact.
fn luma1000(p: [u8; 3]) -> u64 {
    299 * p[0] as u64 + 587 * p[1] as u64 + 114 * p[2] as u64
}

/// Area-weighted box downsample to `cells × cells`. Each output is the
/// weighted luma sum over a cell; all cells have the same total weight
/// `width × height`, so sums compare directly.
fn box_sums(image: &RasterImage, cells: u32) -> Vec<u128> {
    let (w, h) = (image.width() as u64, image.height() as u64);
    let c = cells as u64;
    let overlap = |p: u64, cell: u64, extent: u64| -> u64 {
        // pixel p spans [c·p, c·p + c); cell spans [cell·extent, (cell+1)·extent)
        let lo = (c * p).max(cell * extent);
        let hi = (c * p + c).min((cell + 1) * extent);
        hi.saturating_sub(lo)
    };
    let mut sums = vec![0u128; (c * c) as usize];
    for y in 0..h {
        let cy0 = c * y / h;
        let cy1 = ((c * y + c - 1) / h).min(c - 1);
        for x in 0..w {
            let g = luma1000(image.get(x as u32, y as u32)) as u128;
            let cx0 = c * x / w;
            let cx1 = ((c * x + c - 1) / w).min(c - 1);
            for cy in cy0..=cy1 {
                let wy = overlap(y, cy, h);
                if wy == 0 {
                    continue;
                }
                for cx in cx0..=cx1 {
                    let wx = overlap(x, cx, w);
                    sums[(cy * c + cx) as usize] += g * (wx * wy) as u128;
                }
            }
        }
    }
    sums
}

/// Average hash: bit `63 − i` is set iff cell `i` (row-major) is brighter
/// than the mean of all 64 cells.
pub fn perceptual_hash(image: &RasterImage) -> u64 {
    let sums = box_sums(image, 8);
    let total: u128 = sums.iter().sum();
    sums.iter().enumerate().fold(0u64, |hash, (i, &s)| {
        if s * 64 > total {
            hash | (1 << (63 - i))
        } else {
            hash
        }
    })
}

pub trait FeatureExtractor: Send + Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn extract(&self, image: &RasterImage) -> Vec<f64>;
}

pub const PROJECTION_GRID: u32 = 16;
pub const PROJECTION_DIM: usize = 64;
pub const PROJECTION_SEED: u64 = 0x5eed_f1d0;

/// 16×16 grayscale thumbnail followed by a fixed Gaussian random projection.
#[derive(Debug, Clone)]
pub struct ProjectionExtractor {
    seed: u64,
    projection: DMatrix<f64>,
}

impl ProjectionExtractor {
    pub fn new(seed: u64, dim: usize) -> Self {
        let inputs = (PROJECTION_GRID * PROJECTION_GRID) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (inputs as f64).sqrt();
        let projection = DMatrix::from_fn(dim, inputs, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            z * scale
        });
        ProjectionExtractor { seed, projection }
    }

    pub fn thumbnail(image: &RasterImage) -> DVector<f64> {
        let sums = box_sums(image, PROJECTION_GRID);
        let cell_weight = image.width() as f64 * image.height() as f64 * 1000.0 * 255.0;
        DVector::from_iterator(sums.len(), sums.iter().map(|&s| s as f64 / cell_weight))
    }
}

impl Default for ProjectionExtractor {
    fn default() -> Self {
        ProjectionExtractor::new(PROJECTION_SEED, PROJECTION_DIM)
    }
}

impl FeatureExtractor for ProjectionExtractor {
    fn id(&self) -> String {
        format!(
            "projection-{}x{}-d{}-seed{}",
            PROJECTION_GRID,
            PROJECTION_GRID,
            self.projection.nrows(),
            self.seed
        )
    }

    fn dim(&self) -> usize {
        self.projection.nrows()
    }

    fn extract(&self, image: &RasterImage) -> Vec<f64> {
        (&self.projection * Self::thumbnail(image)).iter().copied().collect()
    }
}

fn fontdb() -> Arc<resvg::usvg::fontdb::Database> {
    static DB: OnceLock<Arc<resvg::usvg::fontdb::Database>> = OnceLock::new();
    DB.get_or_init(|| {
        let mut db = resvg::usvg::fontdb::Database::new();
        db.load_system_fonts();
        Arc::new(db)
    })
    .clone()
}

/// Renders an SVG onto a white `size × size` canvas, stretching the viewBox.
pub fn rasterize_svg(svg: &str, size: u32) -> Result<RasterImage, EvalError> {
    use resvg::{tiny_skia, usvg};
    let options = usvg::Options {
        fontdb: fontdb(),
        ..usvg::Options::default()
    };
    let tree = usvg::Tree::from_str(svg, &options).map_err(|e| EvalError::Render(e.to_string()))?;
    let mut pixmap = tiny_skia::Pixmap::new(size, size)
        .ok_or_else(|| EvalError::Render(format!("cannot allocate {size}x{size} pixmap")))?;
    pixmap.fill(tiny_skia::Color::WHITE);
    let view = tree.size();
    let transform = tiny_skia::Transform::from_scale(
        size as f32 / view.width(),
        size as f32 / view.height(),
    );
    resvg::render(&tree, transform, &mut pixmap.as_mut());
    // opaque background, so premultiplied rgb is the color
    let pixels = pixmap
        .pixels()
        .iter()
        .map(|p| [p.red(), p.green(), p.blue()])
        .collect();
    RasterImage::new(size, size, pixels).map_err(|e| EvalError::Render(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureFileHeader {
    pub d: usize,
    pub extractor_id: String,
}

pub fn write_feature_file(
    mut out: impl Write,
    extractor_id: &str,
    features: &FeatureSet,
) -> Result<(), EvalError> {
    let header = FeatureFileHeader {
        d: features.dim(),
        extractor_id: extractor_id.to_string(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("header serializes"))?;
    for i in 0..features.len() {
        writeln!(
            out,
            "{}",
            serde_json::to_string(&features.row(i)).expect("row serializes")
        )?;
    }
    Ok(())
}

pub fn read_feature_file(input: impl BufRead) -> Result<(FeatureFileHeader, FeatureSet), EvalError> {
    let mut header = None;
    let mut rows = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| EvalError::FeatureFile {
            line: i + 1,
            message: e.to_string(),
        };
        match header {
            None => header = Some(serde_json::from_str::<FeatureFileHeader>(&line).map_err(bad)?),
            Some(_) => rows.push(serde_json::from_str::<Vec<f64>>(&line).map_err(bad)?),
        }
    }
    let header = header.ok_or(EvalError::FeatureFile {
        line: 1,
        message: "missing header".into(),
    })?;
    let features = FeatureSet::with_dim(header.d, &rows)?;
    Ok((header, features))
}

/// A named set of disabled pipeline stages.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AblationConfig {
    pub name: String,
    pub flags: Vec<Ablation>,
}

impl AblationConfig {
    pub fn full() -> Self {
        AblationConfig {
            name: "full".into(),
            flags: Vec::new(),
        }
    }

    pub fn parse(name: impl Into<String>, flags: &[impl AsRef<str>]) -> Result<Self, EvalError> {
        Ok(AblationConfig {
            name: name.into(),
            flags: flags
                .iter()
                .map(|f| f.as_ref().parse())
                .collect::<Result<_, _>>()?,
        })
    }

    /// Sort key placing the full system first and single-stage ablations in
    /// the order of [`Ablation::ALL`].
    fn rank(&self) -> usize {
        match self.flags.as_slice() {
            [] => 0,
            [one] => 1 + Ablation::ALL.iter().position(|a| a == one).unwrap_or(0),
            _ => 1 + Ablation::ALL.len(),
        }
    }
}

/// The full system plus each single-stage ablation.
pub fn standard_configs() -> Vec<AblationConfig> {
    std::iter::once(AblationConfig::full())
        .chain(Ablation::ALL.into_iter().map(|a| AblationConfig {
            name: a.as_str().into(),
            flags: vec![a],
        }))
        .collect()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    name: String,
    #[serde(default)]
    flags: Vec<String>,
}

/// Parses `[{"name": "...", "flags": ["no_text_module", ...]}, ...]`.
pub fn parse_ablation_configs(json: &str) -> Result<Vec<AblationConfig>, EvalError> {
    let raw: Vec<RawConfig> =
        serde_json::from_str(json).map_err(|e| EvalError::Config(e.to_string()))?;
    raw.into_iter()
        .map(|r| AblationConfig::parse(r.name, &r.flags))
        .collect()
}

/// Shared inputs for generating prototypes during evaluation.
pub struct EvalEnv<'a> {
    pub backends: &'a Backends,
    pub knowledge: &'a Knowledge,
    pub icons: &'a IconIndex,
    pub base: &'a PipelineConfig,
}

/// Prototypes and their features for one configuration.
pub struct Generated {
    pub prototypes: Vec<Prototype>,
    pub features: FeatureSet,
    pub hashes: Vec<u64>,
}

pub fn generate_features(
    env: &EvalEnv<'_>,
    config: &AblationConfig,
    seed: u64,
    inputs: &[DesignInput],
    extractor: &dyn FeatureExtractor,
) -> Result<Generated, EvalError> {
    let mut pipeline_config = env.base.clone();
    pipeline_config.ablations = config.flags.clone();
    pipeline_config.seed = seed;
    let pipeline = Pipeline::new(env.backends, env.knowledge, env.icons, &pipeline_config);
    let mut prototypes = Vec::with_capacity(inputs.len());
    let mut vectors = Vec::with_capacity(inputs.len());
    let mut hashes = Vec::with_capacity(inputs.len());
    for input in inputs {
        let trace = pipeline
            .generate_prototype(input)
            .map_err(|source| EvalError::Pipeline {
                config: config.name.clone(),
                source,
            })?;
        let prototype =
            Prototype::from_trace(input, &trace).map_err(|source| EvalError::Assembly {
                config: config.name.clone(),
                source,
            })?;
        let raster = rasterize_svg(&prototype.svg, RASTER_SIZE)?;
        vectors.push(extractor.extract(&raster));
        hashes.push(perceptual_hash(&raster));
        prototypes.push(prototype);
    }
    Ok(Generated {
        prototypes,
        features: FeatureSet::with_dim(extractor.dim(), &vectors)?,
        hashes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub flags: Vec<Ablation>,
    pub fid: f64,
    /// Mean pairwise Euclidean distance between feature vectors.
    pub gd: f64,
    /// Mean pairwise Hamming distance between perceptual hashes.
    pub gd_hash: f64,
    pub prototypes: usize,
    pub payload_counts: BTreeMap<ModuleId, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub extractor_id: String,
    pub seed: u64,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:<28} {:>12} {:>10} {:>10}\n",
            "config", "FID", "GD", "GD(hash)"
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{:<28} {:>12.4} {:>10.4} {:>10.4}\n",
                r.name, r.fid, r.gd, r.gd_hash
            ));
        }
        out
    }
}

/// Runs every configuration over `inputs` (configurations in parallel, each
/// sequential inside) and scores it against `reference`.
pub fn run_ablation(
    configs: &[AblationConfig],
    inputs: &[DesignInput],
    env: &EvalEnv<'_>,
    reference: &FeatureSet,
    extractor: &dyn FeatureExtractor,
) -> Result<AblationReport, EvalError> {
    if reference.dim() != extractor.dim() {
        return Err(EvalError::DimensionMismatch {
            expected: extractor.dim(),
            actual: reference.dim(),
        });
    }
    let real = fit_gaussian(reference)?;
    let seed = env.base.seed;
    let results: Vec<Result<AblationRow, EvalError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs
            .iter()
            .map(|config| {
                let real = &real;
                scope.spawn(move || {
                    let generated = generate_features(env, config, seed, inputs, extractor)?;
                    let mut payload_counts = BTreeMap::new();
                    for p in &generated.prototypes {
                        for c in &p.contents {
                            *payload_counts.entry(c.kind()).or_insert(0) += 1;
                        }
                    }
                    Ok(AblationRow {
                        name: config.name.clone(),
                        flags: config.flags.clone(),
                        fid: fid(real, &fit_gaussian(&generated.features)?)?,
                        gd: gd(&generated.features)?,
                        gd_hash: gd_hamming(&generated.hashes)?,
                        prototypes: generated.prototypes.len(),
                        payload_counts,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("ablation worker panicked"))
            .collect()
    });
    let mut rows: Vec<(usize, AblationRow)> = configs
        .iter()
        .map(AblationConfig::rank)
        .zip(results.into_iter().collect::<Result<Vec<_>, _>>()?)
        .collect();
    rows.sort_by_key(|(rank, _)| *rank);
    Ok(AblationReport {
        extractor_id: extractor.id(),
        seed,
        rows: rows.into_iter().map(|(_, r)| r).collect(),
    })
}
