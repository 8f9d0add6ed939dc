//! Condition coordinates and their topology.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Topology of one coordinate of the condition space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AxisTopology {
    Periodic { period: f64 },
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub topology: AxisTopology,
}

/// The set of condition coordinates an experiment was sampled at.
///
/// Periodic coordinates are canonicalized into `[0, T)` on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConditionGridRaw", into = "ConditionGridRaw")]
pub struct ConditionGrid {
    axes: Vec<GridAxis>,
    points: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ConditionGridRaw {
    axes: Vec<GridAxis>,
    coordinates: Vec<Vec<f64>>,
}

impl TryFrom<ConditionGridRaw> for ConditionGrid {
    type Error = Error;
    fn try_from(raw: ConditionGridRaw) -> Result<Self> {
        ConditionGrid::new(raw.axes, raw.coordinates)
    }
}

impl From<ConditionGrid> for ConditionGridRaw {
    fn from(g: ConditionGrid) -> Self {
        ConditionGridRaw {
            axes: g.axes,
            coordinates: g.points,
        }
    }
}

impl ConditionGrid {
    pub fn new(axes: Vec<GridAxis>, coordinates: Vec<Vec<f64>>) -> Result<Self> {
        if axes.is_empty() {
            return Err(Error::invalid_parameter("grid needs at least one axis"));
        }
        for ax in &axes {
            if let AxisTopology::Periodic { period } = ax.topology {
                if !(period > 0.0) {
                    return Err(Error::invalid_parameter(format!(
                        "axis {:?} has non-positive period",
                        ax.name
                    )));
                }
            }
        }
        let dim = axes.len();
        let mut points = coordinates;
        for p in points.iter_mut() {
            if p.len() != dim {
                return Err(Error::dim(format!(
                    "grid point has {} coordinates, expected {dim}",
                    p.len()
                )));
            }
            for (x, ax) in p.iter_mut().zip(axes.iter()) {
                if !x.is_finite() {
                    return Err(Error::invalid_input("non-finite grid coordinate"));
                }
                if let AxisTopology::Periodic { period } = ax.topology {
                    *x = x.rem_euclid(period);
                }
            }
        }
        Ok(ConditionGrid { axes, points })
    }

    /// 1-D periodic grid of `c` equispaced angles on `[0, T)`.
    pub fn equispaced_angles(c: usize, period: f64) -> Result<Self> {
        let pts = (0..c)
            .map(|i| vec![i as f64 * period / c as f64])
            .collect();
        Self::new(
            vec![GridAxis {
                name: "angle".into(),
                topology: AxisTopology::Periodic { period },
            }],
            pts,
        )
    }

    pub fn axes(&self) -> &[GridAxis] {
        &self.axes
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    /// Topology-aware distance between two coordinate vectors.
    pub fn distance(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != self.dim() || b.len() != self.dim() {
            return Err(Error::dim("coordinate dimensionality mismatch"));
        }
        let mut sq = 0.0;
        for (i, ax) in self.axes.iter().enumerate() {
            let d = match ax.topology {
                AxisTopology::Linear => a[i] - b[i],
                AxisTopology::Periodic { period } => {
                    let raw = (a[i] - b[i]).rem_euclid(period);
                    raw.min(period - raw)
                }
            };
            sq += d * d;
        }
        Ok(sq.sqrt())
    }

    /// Index of the grid point closest to `x` (ties to the lowest index).
    pub fn nearest(&self, x: &[f64]) -> Result<usize> {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (i, p) in self.points.iter().enumerate() {
            let d = self.distance(p, x)?;
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        Ok(best)
    }

    /// Index of the grid point with exactly these coordinates, if any.
    pub fn exact_match(&self, x: &[f64]) -> Option<usize> {
        self.points.iter().position(|p| p.as_slice() == x)
    }

    /// Grid restricted to a subset of condition indices.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let mut pts = Vec::with_capacity(indices.len());
        for &i in indices {
            let p = self
                .points
                .get(i)
                .ok_or_else(|| Error::invalid_input(format!("condition index {i} out of range")))?;
            pts.push(p.clone());
        }
        ConditionGrid::new(self.axes.clone(), pts)
    }
}
