use std::f64::consts::TAU;

use rand::Rng as _;

use super::{Milling, SurfaceSpec};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};

/// Center of the turning grooves relative to the specimen origin (µm). It lies
/// outside the specimen so the grooves appear as gently curved arcs.
pub const TURNING_CENTER_UM: (f64, f64) = (-20_000.0, -20_000.0);

/// Surface height over a specimen, evaluated procedurally.
///
/// Coordinates are µm; `x` runs along the specimen length (image rows) and
/// `y` along its width (image columns). Grooves are analytic and the noise is
/// smooth value noise with a cell of half the groove period, so the field is
/// band-limited and can be sampled exactly at any resolution.
#[derive(Debug, Clone)]
pub struct HeightField {
    pub spec: SurfaceSpec,
    pub extent_um: (f64, f64),
    pub lattice_pitch_um: f64,
    phase: f64,
    center: (f64, f64),
    noise_seed: u64,
    noise_cell: f64,
}

/// Builds the field for `spec` over `extent_um` (length, width).
pub fn make_height_field(
    spec: &SurfaceSpec,
    extent_um: (f64, f64),
    lattice_pitch_um: f64,
    rng: &mut Rng,
) -> Result<HeightField> {
    if !(spec.period_um > 0.0) || !(spec.amplitude_um >= 0.0) || !(spec.noise_level >= 0.0) {
        return Err(Error::Parameter(format!("invalid surface parameters {spec:?}")));
    }
    if !(lattice_pitch_um > 0.0 && lattice_pitch_um <= spec.period_um / 8.0) {
        return Err(Error::Parameter(format!(
            "lattice pitch {lattice_pitch_um} µm is coarser than period/8 = {} µm",
            spec.period_um / 8.0
        )));
    }
    if !(extent_um.0 > 0.0 && extent_um.1 > 0.0) {
        return Err(Error::Parameter(format!("empty extent {extent_um:?}")));
    }
    let phase = rng.random_range(0.0..TAU);
    let center = (
        TURNING_CENTER_UM.0 + rng.random_range(-1000.0..1000.0),
        TURNING_CENTER_UM.1 + rng.random_range(-1000.0..1000.0),
    );
    Ok(HeightField {
        spec: spec.clone(),
        extent_um,
        lattice_pitch_um,
        phase,
        center,
        noise_seed: rng.random(),
        noise_cell: spec.period_um / 2.0,
    })
}

fn smoothstep(t: f64) -> (f64, f64) {
    (t * t * (3.0 - 2.0 * t), 6.0 * t * (1.0 - t))
}

impl HeightField {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (0.0..=self.extent_um.0).contains(&x) && (0.0..=self.extent_um.1).contains(&y)
    }

    /// Groove coordinate and its gradient.
    fn groove_coordinate(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        match self.spec.milling {
            Milling::V => (x, (1.0, 0.0)),
            Milling::H => (y, (0.0, 1.0)),
            Milling::T => {
                let (dx, dy) = (x - self.center.0, y - self.center.1);
                let r = dx.hypot(dy);
                (r, (dx / r, dy / r))
            }
        }
    }

    /// Value noise in [-1, 1] and its gradient.
    fn noise(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let (gx, gy) = (x / self.noise_cell, y / self.noise_cell);
        let (ix, iy) = (gx.floor(), gy.floor());
        let (sx, dsx) = smoothstep(gx - ix);
        let (sy, dsy) = smoothstep(gy - iy);
        let (ix, iy) = (ix as i64, iy as i64);
        let v = |a: i64, b: i64| 2.0 * seed::lattice_uniform(self.noise_seed, ix + a, iy + b) - 1.0;
        let (v00, v10, v01, v11) = (v(0, 0), v(1, 0), v(0, 1), v(1, 1));
        let top = v00 + (v10 - v00) * sx;
        let bottom = v01 + (v11 - v01) * sx;
        let n = top + (bottom - top) * sy;
        let dx = ((v10 - v00) + (v11 - v01 - v10 + v00) * sy) * dsx / self.noise_cell;
        let dy = (bottom - top) * dsy / self.noise_cell;
        (n, (dx, dy))
    }

    /// Height (µm) at a point.
    pub fn height(&self, x: f64, y: f64) -> f64 {
        self.height_and_gradient(x, y).0
    }

    /// Height and its exact spatial gradient `(∂h/∂x, ∂h/∂y)`.
    pub fn height_and_gradient(&self, x: f64, y: f64) -> (f64, (f64, f64)) {
        let a = self.spec.amplitude_um;
        let k = TAU / self.spec.period_um;
        let (c, (cx, cy)) = self.groove_coordinate(x, y);
        let arg = k * c + self.phase;
        let mut h = a * arg.sin();
        let slope = a * k * arg.cos();
        let mut grad = (slope * cx, slope * cy);
        if self.spec.noise_level > 0.0 {
            let (n, (nx, ny)) = self.noise(x, y);
            let s = self.spec.noise_level * a;
            h += s * n;
            grad.0 += s * nx;
            grad.1 += s * ny;
        }
        (h, grad)
    }

    /// Materializes `rows × cols` lattice samples starting at `origin`, row-major.
    pub fn grid(&self, origin: (f64, f64), rows: usize, cols: usize) -> Vec<f64> {
        let p = self.lattice_pitch_um;
        (0..rows)
            .flat_map(|i| (0..cols).map(move |j| (origin.0 + i as f64 * p, origin.1 + j as f64 * p)))
            .map(|(x, y)| self.height(x, y))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::ClassTable;

    fn field(milling: Milling, noise: f64, amplitude: f64) -> HeightField {
        let mut spec = ClassTable::default().spec(milling as usize * 6 + 2, 5);
        spec.noise_level = noise;
        spec.amplitude_um = amplitude;
        make_height_field(&spec, (2000.0, 1000.0), 2.0, &mut seed::stream(1, "t", 0)).unwrap()
    }

    #[test]
    fn v_field_is_constant_along_width() {
        let f = field(Milling::V, 0.0, 3.0);
        for x in [0.0, 13.7, 500.0] {
            let h0 = f.height(x, 0.0);
            assert!((0..50).all(|j| (f.height(x, j as f64 * 17.0) - h0).abs() < 1e-12));
        }
        let h = field(Milling::H, 0.0, 3.0);
        assert!((h.height(0.0, 40.0) - h.height(999.0, 40.0)).abs() < 1e-12);
    }

    #[test]
    fn zero_amplitude_is_flat() {
        let f = field(Milling::T, 0.3, 0.0);
        assert!(f.grid((0.0, 0.0), 20, 20).iter().all(|&h| h == 0.0));
    }

    #[test]
    fn gradient_matches_central_differences() {
        for m in [Milling::H, Milling::V, Milling::T] {
            let f = field(m, 0.4, 2.0);
            for k in 0..50 {
                let (x, y) = (13.3 + 37.1 * k as f64, 7.9 + 19.3 * k as f64);
                let (_, (gx, gy)) = f.height_and_gradient(x, y);
                let d = 1e-4;
                let fx = (f.height(x + d, y) - f.height(x - d, y)) / (2.0 * d);
                let fy = (f.height(x, y + d) - f.height(x, y - d)) / (2.0 * d);
                assert!((gx - fx).abs() < 1e-5 && (gy - fy).abs() < 1e-5, "{m:?} {gx} {fx} {gy} {fy}");
            }
        }
    }

    #[test]
    fn coarse_lattice_is_rejected() {
        let spec = ClassTable::default().spec(5, 0);
        let err = make_height_field(&spec, (100.0, 100.0), spec.period_um / 4.0, &mut seed::stream(0, "t", 0));
        assert!(matches!(err, Err(Error::Parameter(_))));
    }

    #[test]
    fn deterministic_given_seed() {
        let a = field(Milling::T, 0.5, 1.0).grid((3.0, 4.0), 8, 8);
        let b = field(Milling::T, 0.5, 1.0).grid((3.0, 4.0), 8, 8);
        assert_eq!(a, b);
    }
}
