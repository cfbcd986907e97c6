//! Deployment geometry: jittered-grid AP placement and uniform UE drops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Planar position in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point<T> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    pub fn new(x: T, y: T) -> Self {
        Point { x, y }
    }

    pub fn planar_distance(&self, other: &Self) -> T {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn clamp_to(self, side: T) -> Self {
        Point {
            x: self.x.max(T::zero()).min(side),
            y: self.y.max(T::zero()).min(side),
        }
    }
}

/// AP deployment over a square area.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario<T> {
    pub ap_positions: Vec<Point<T>>,
    pub area_side: T,
    pub height_diff: T,
    /// Antennas per AP.
    pub antennas: usize,
    pub grid_side: usize,
    pub jitter_fraction: T,
    /// Scheduling order of the APs along the recurrent chain.
    pub ap_order: Vec<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl<T: Scalar> Scenario<T> {
    pub fn num_aps(&self) -> usize {
        self.ap_positions.len()
    }

    pub fn with_height(mut self, height_diff: T) -> Result<Self> {
        if !(height_diff >= T::zero()) {
            return Err(Error::param(format!("height difference {height_diff} < 0")));
        }
        self.height_diff = height_diff;
        Ok(self)
    }

    pub fn with_antennas(mut self, antennas: usize) -> Result<Self> {
        if antennas == 0 {
            return Err(Error::param("APs need at least one antenna"));
        }
        self.antennas = antennas;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// 3D distance from every AP (rows) to every UE (columns).
    pub fn distances(&self, drop: &UeDrop<T>) -> Vec<Vec<T>> {
        self.ap_positions
            .iter()
            .map(|ap| {
                drop.positions
                    .iter()
                    .map(|ue| distance_3d(ap, ue, self.height_diff))
                    .collect()
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let side = self.area_side;
        if let Some(p) = self
            .ap_positions
            .iter()
            .find(|p| p.x < T::zero() || p.y < T::zero() || p.x > side || p.y > side)
        {
            return Err(Error::param(format!("AP at ({}, {}) outside area", p.x, p.y)));
        }
        let mut seen = vec![false; self.num_aps()];
        for &i in &self.ap_order {
            if i >= seen.len() || std::mem::replace(&mut seen[i], true) {
                return Err(Error::param("ap_order is not a permutation of the APs"));
            }
        }
        if self.ap_order.len() != self.num_aps() {
            return Err(Error::param("ap_order is not a permutation of the APs"));
        }
        Ok(())
    }
}

/// One realization of UE positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UeDrop<T> {
    pub positions: Vec<Point<T>>,
}

impl<T> UeDrop<T> {
    pub fn num_ues(&self) -> usize {
        self.positions.len()
    }
}

/// Places `grid_side²` APs on a jittered grid.
///
/// AP `i` (row-major) starts at the center of its grid cell and is displaced
/// per axis by `Uniform(-j·s/2, j·s/2)` with `s = area_side / grid_side`,
/// then clamped into the area.
pub fn place_aps<T: Scalar, R: Rng + ?Sized>(
    grid_side: usize,
    area_side: T,
    jitter_fraction: T,
    rng: &mut R,
) -> Result<Scenario<T>> {
    if grid_side == 0 {
        return Err(Error::param("grid_side must be at least 1"));
    }
    if !(area_side > T::zero()) || !area_side.is_finite() {
        return Err(Error::param(format!("area side {area_side} must be positive")));
    }
    if !(jitter_fraction >= T::zero() && jitter_fraction <= T::one()) {
        return Err(Error::param(format!(
            "jitter fraction {jitter_fraction} outside [0, 1]"
        )));
    }
    let spacing = area_side / T::from_usize_lossy(grid_side);
    let half_span = jitter_fraction * spacing / T::lit(2.0);
    let half = T::lit(0.5);
    let mut ap_positions = Vec::with_capacity(grid_side * grid_side);
    for row in 0..grid_side {
        for col in 0..grid_side {
            let cx = (T::from_usize_lossy(col) + half) * spacing;
            let cy = (T::from_usize_lossy(row) + half) * spacing;
            let dx = (T::lit(2.0 * rng.random::<f64>()) - T::one()) * half_span;
            let dy = (T::lit(2.0 * rng.random::<f64>()) - T::one()) * half_span;
            ap_positions.push(Point::new(cx + dx, cy + dy).clamp_to(area_side));
        }
    }
    Ok(Scenario {
        ap_order: (0..ap_positions.len()).collect(),
        ap_positions,
        area_side,
        height_diff: T::zero(),
        antennas: 1,
        grid_side,
        jitter_fraction,
        seed: None,
    })
}

/// Drops `k` UEs uniformly over the square area.
pub fn sample_ue_drop<T: Scalar, R: Rng + ?Sized>(
    k: usize,
    area_side: T,
    rng: &mut R,
) -> Result<UeDrop<T>> {
    if k == 0 {
        return Err(Error::param("a drop needs at least one UE"));
    }
    if !(area_side > T::zero()) || !area_side.is_finite() {
        return Err(Error::param(format!("area side {area_side} must be positive")));
    }
    let positions = (0..k)
        .map(|_| {
            let x = T::lit(rng.random::<f64>()) * area_side;
            let y = T::lit(rng.random::<f64>()) * area_side;
            Point::new(x, y)
        })
        .collect();
    Ok(UeDrop { positions })
}

/// Euclidean AP-UE distance including the vertical offset.
pub fn distance_3d<T: Scalar>(ap: &Point<T>, ue: &Point<T>, height_diff: T) -> T {
    ap.planar_distance(ue).hypot(height_diff)
}
