use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Shape, Tensor};

/// Marker colours; a sample is positive when both markers share one.
pub const PALETTE: [[f32; 3]; 4] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0]];

fn default_grid() -> usize {
    32
}
fn default_d_min() -> usize {
    24
}

/// Two coloured markers on a black grid, at least `d_min` apart
/// (Chebyshev distance).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default = "default_grid")]
    pub grid: usize,
    #[serde(default = "default_d_min")]
    pub d_min: usize,
    /// Optional upper bound on the marker distance.
    #[serde(default)]
    pub d_max: Option<usize>,
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec {
            grid: default_grid(),
            d_min: default_d_min(),
            d_max: None,
        }
    }
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 2 || self.d_min >= self.grid {
            return Err(Error::Config(format!(
                "d_min {} is infeasible on a {}x{} grid",
                self.d_min, self.grid, self.grid
            )));
        }
        if let Some(d_max) = self.d_max {
            if d_max < self.d_min.max(1) {
                return Err(Error::Config(format!("d_max {d_max} is below d_min {}", self.d_min)));
            }
        }
        Ok(())
    }

    fn accepts(&self, d: usize) -> bool {
        d >= self.d_min.max(1) && self.d_max.is_none_or(|m| d <= m)
    }
}

pub type Marker = (usize, usize);

/// Chebyshev distance between two markers.
pub fn chebyshev(a: Marker, b: Marker) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

/// Generated samples with the spec and seed that reproduce them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub task: TaskSpec,
    pub samples: usize,
    pub seed: u64,
    /// Upsampling applied after generation.
    pub scale: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    /// `(n, grid, grid, 3)` images.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Marker positions in generation coordinates.
    pub markers: Vec<[Marker; 2]>,
}

/// `n` samples of `task`. Labels come in shuffled pairs, so any prefix of
/// even length is exactly balanced.
pub fn generate_task(task: &TaskSpec, n: usize, seed: u64) -> Result<Dataset> {
    task.validate()?;
    let g = task.grid;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = vec![0f32; n * g * g * 3];
    let mut labels = Vec::with_capacity(n);
    let mut markers = Vec::with_capacity(n);
    let shape = Shape::new(n, g, g, 3);
    let mut pending: Option<usize> = None;
    for s in 0..n {
        let (a, b) = loop {
            let a = (rng.random_range(0..g), rng.random_range(0..g));
            let b = (rng.random_range(0..g), rng.random_range(0..g));
            if task.accepts(chebyshev(a, b)) {
                break (a, b);
            }
        };
        let same = match pending.take() {
            Some(previous) => 1 - previous,
            None => {
                let label = rng.random_range(0..2);
                pending = Some(label);
                label
            }
        };
        let c1 = rng.random_range(0..PALETTE.len());
        let c2 = if same == 1 {
            c1
        } else {
            (c1 + rng.random_range(1..PALETTE.len())) % PALETTE.len()
        };
        for (pos, colour) in [(a, c1), (b, c2)] {
            let at = shape.offset(s, pos.0, pos.1, 0);
            data[at..at + 3].copy_from_slice(&PALETTE[colour]);
        }
        labels.push(same);
        markers.push([a, b]);
    }
    Ok(Dataset {
        meta: DatasetMeta {
            task: task.clone(),
            samples: n,
            seed,
            scale: 1,
        },
        images: Tensor::from_vec(shape, data)?,
        labels,
        markers,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn resolution(&self) -> usize {
        self.images.shape().height()
    }

    /// Images of `indices` in the requested precision.
    pub fn batch<T: Scalar>(&self, indices: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        let x = self.images.select_batch(indices)?.cast();
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// The same samples on a grid `factor` times larger, by nearest-neighbour
    /// upsampling; markers grow into `factor x factor` squares.
    pub fn upsampled(&self, factor: usize) -> Result<Dataset> {
        let mut meta = self.meta.clone();
        meta.scale *= factor;
        Ok(Dataset {
            meta,
            images: self.images.upsample_nearest(factor)?,
            labels: self.labels.clone(),
            markers: self.markers.clone(),
        })
    }

    /// Fraction of positive labels.
    pub fn balance(&self) -> f64 {
        self.labels.iter().sum::<usize>() as f64 / self.len().max(1) as f64
    }
}
