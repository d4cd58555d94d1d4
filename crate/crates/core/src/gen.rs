//! Seeded synthetic clouds.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{seeded, SeededRng};
use crate::serialize::PointCloud;
use crate::tensor::FeatureMatrix;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CloudKind {
    /// i.i.d. points in the unit cube.
    Uniform,
    /// `clusters` Gaussian blobs with uniform means and shared `sigma`.
    Clusters { clusters: usize, sigma: f64 },
    /// Points on a random smooth height field `z = h(x, y)` plus Gaussian
    /// noise, a rough stand-in for a scanned surface.
    Surface { noise: f64 },
}

impl CloudKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CloudKind::Uniform => Ok(()),
            CloudKind::Clusters { clusters, sigma } => {
                if clusters == 0 {
                    return Err(Error::Usage("clusters needs at least one blob".into()));
                }
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(Error::Usage(format!("sigma must be finite and >= 0, got {sigma}")));
                }
                Ok(())
            }
            CloudKind::Surface { noise } => {
                if !(noise >= 0.0 && noise.is_finite()) {
                    return Err(Error::Usage(format!("noise must be finite and >= 0, got {noise}")));
                }
                Ok(())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub kind: CloudKind,
    pub points: usize,
    pub seed: u64,
    /// Feature channels, drawn uniformly from [0, 1).
    pub channels: usize,
    /// Points are split into this many contiguous batches.
    pub batches: usize,
}

impl GenOptions {
    pub fn new(kind: CloudKind, points: usize, seed: u64) -> Self {
        GenOptions {
            kind,
            points,
            seed,
            channels: 3,
            batches: 1,
        }
    }
}

/// Generates a cloud; identical options give identical clouds.
pub fn generate(opts: &GenOptions) -> Result<PointCloud> {
    opts.kind.validate()?;
    let n = opts.points;
    if n == 0 {
        return Err(Error::Usage("point count must be at least 1".into()));
    }
    if opts.batches == 0 || opts.batches > u16::MAX as usize + 1 {
        return Err(Error::Usage(format!("batches must be in 1..=65536, got {}", opts.batches)));
    }
    let mut rng = seeded(opts.seed);
    let positions = match opts.kind {
        CloudKind::Uniform => (0..n).map(|_| rng.gen::<[f64; 3]>()).collect(),
        CloudKind::Clusters { clusters, sigma } => clustered(&mut rng, n, clusters, sigma),
        CloudKind::Surface { noise } => surface(&mut rng, n, noise),
    };
    let feats = (0..n * opts.channels).map(|_| rng.gen::<f64>()).collect();
    let batch = (0..n).map(|i| (i * opts.batches / n) as u16).collect();
    PointCloud::new(positions, FeatureMatrix::from_vec(n, opts.channels, feats)?, batch)
}

fn clustered(rng: &mut SeededRng, n: usize, m: usize, sigma: f64) -> Vec<[f64; 3]> {
    let means: Vec<[f64; 3]> = (0..m).map(|_| rng.gen()).collect();
    let normal = Normal::new(0.0, sigma).expect("validated sigma");
    (0..n)
        .map(|i| {
            let c = means[i % m];
            [
                c[0] + normal.sample(rng),
                c[1] + normal.sample(rng),
                c[2] + normal.sample(rng),
            ]
        })
        .collect()
}

fn surface(rng: &mut SeededRng, n: usize, noise: f64) -> Vec<[f64; 3]> {
    const WAVES: usize = 4;
    let waves: Vec<[f64; 4]> = (0..WAVES)
        .map(|k| {
            let amp = 0.15 / (k + 1) as f64;
            let fx = rng.gen_range(0.5..3.0) * (k + 1) as f64;
            let fy = rng.gen_range(0.5..3.0) * (k + 1) as f64;
            [amp, fx, fy, rng.gen_range(0.0..std::f64::consts::TAU)]
        })
        .collect();
    let normal = Normal::new(0.0, noise).expect("validated noise");
    (0..n)
        .map(|_| {
            let (x, y) = (rng.gen::<f64>(), rng.gen::<f64>());
            let h: f64 = waves
                .iter()
                .map(|&[a, fx, fy, ph]| a * (std::f64::consts::TAU * (fx * x + fy * y) + ph).sin())
                .sum();
            [x, y, 0.5 + h + normal.sample(rng)]
        })
        .collect()
}
