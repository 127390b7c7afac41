//! Thin plate spline warps over a fixed control grid in `[-1, 1]^2`.

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

/// Control points per side of the default grid.
pub const TPS_GRID: usize = 3;

/// The default `TPS_GRID x TPS_GRID` control points, row-major.
pub fn tps_control_points() -> Vec<[f64; 2]> {
    let n = TPS_GRID;
    let mut pts = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let at = |i: usize| -1.0 + 2.0 * i as f64 / (n - 1) as f64;
            pts.push([at(c), at(r)]);
        }
    }
    pts
}

fn radial(r2: f64) -> f64 {
    if r2 <= 0.0 {
        0.0
    } else {
        r2 * r2.ln()
    }
}

/// Backward sampling map of a TPS warp: `out(y) = in(map(y))`. Content at
/// control point `c_k` moves to `c_k + d_k`.
#[derive(Debug, Clone)]
pub struct TpsWarp {
    anchors: Vec<[f64; 2]>,
    weights: Vec<[f64; 2]>,
    affine: [[f64; 2]; 3],
}

impl TpsWarp {
    /// Warp over the default control grid.
    pub fn new(displacements: &[[f64; 2]]) -> Result<Self> {
        Self::with_points(&tps_control_points(), displacements)
    }

    pub fn with_points(controls: &[[f64; 2]], displacements: &[[f64; 2]]) -> Result<Self> {
        if controls.len() != displacements.len() {
            return Err(Error::invalid(format!(
                "{} control points but {} displacements",
                controls.len(),
                displacements.len()
            )));
        }
        let n = controls.len();
        if n < 3 {
            return Err(Error::SingularTps);
        }
        let anchors: Vec<[f64; 2]> = controls
            .iter()
            .zip(displacements)
            .map(|(c, d)| [c[0] + d[0], c[1] + d[1]])
            .collect();

        // affine part needs the anchors to span the plane
        let p = DMatrix::from_fn(n, 3, |i, j| match j {
            0 => 1.0,
            1 => anchors[i][0],
            _ => anchors[i][1],
        });
        let sv = p.singular_values();
        let (lo, hi) = (sv.min(), sv.max());
        if hi.is_nan() || hi <= 0.0 || lo / hi < 1e-9 {
            return Err(Error::SingularTps);
        }

        let m = n + 3;
        let mut l = DMatrix::<f64>::zeros(m, m);
        for i in 0..n {
            for j in 0..n {
                let dx = anchors[i][0] - anchors[j][0];
                let dy = anchors[i][1] - anchors[j][1];
                l[(i, j)] = radial(dx * dx + dy * dy);
            }
            for j in 0..3 {
                l[(i, n + j)] = p[(i, j)];
                l[(n + j, i)] = p[(i, j)];
            }
        }
        let lu = l.lu();
        let mut weights = vec![[0.0; 2]; n];
        let mut affine = [[0.0; 2]; 3];
        for axis in 0..2 {
            let mut rhs = DVector::<f64>::zeros(m);
            for i in 0..n {
                rhs[i] = controls[i][axis];
            }
            let sol = lu.solve(&rhs).ok_or(Error::SingularTps)?;
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(Error::SingularTps);
            }
            for i in 0..n {
                weights[i][axis] = sol[i];
            }
            for j in 0..3 {
                affine[j][axis] = sol[n + j];
            }
        }
        Ok(Self {
            anchors,
            weights,
            affine,
        })
    }

    pub fn map(&self, v: [f64; 2]) -> [f64; 2] {
        let mut out = [0.0; 2];
        for (axis, o) in out.iter_mut().enumerate() {
            *o = self.affine[0][axis] + self.affine[1][axis] * v[0] + self.affine[2][axis] * v[1];
        }
        for (a, w) in self.anchors.iter().zip(&self.weights) {
            let dx = v[0] - a[0];
            let dy = v[1] - a[1];
            let u = radial(dx * dx + dy * dy);
            out[0] += w[0] * u;
            out[1] += w[1] * u;
        }
        out
    }
}

/// Bilinear taps at continuous pixel coordinates `(y, x)` with edge clamping.
pub(crate) fn bilinear_taps(y: f64, x: f64, h: usize, w: usize) -> [(usize, f64); 4] {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let fy = y - y0 as f64;
    let fx = x - x0 as f64;
    [
        (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
        (y0 * w + x1, (1.0 - fy) * fx),
        (y1 * w + x0, fy * (1.0 - fx)),
        (y1 * w + x1, fy * fx),
    ]
}

/// Normalized coordinate in `[-1, 1]` of pixel centre `i` along an axis of
/// `n` pixels, and its inverse.
pub(crate) fn to_unit(i: f64, n: usize) -> f64 {
    2.0 * (i + 0.5) / n as f64 - 1.0
}

pub(crate) fn from_unit(v: f64, n: usize) -> f64 {
    (v + 1.0) * 0.5 * n as f64 - 0.5
}

/// Warps an image region with the TPS defined by `displacements` on the
/// default control grid.
pub fn tps_warp(region: &ImageTensor, displacements: &[[f64; 2]]) -> Result<ImageTensor> {
    let warp = TpsWarp::new(displacements)?;
    let (h, w) = region.dims();
    let src = region.as_array();
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let g = warp.map([to_unit(x as f64, w), to_unit(y as f64, h)]);
            let taps = bilinear_taps(from_unit(g[1], h), from_unit(g[0], w), h, w);
            for c in 0..3 {
                out[[y, x, c]] = taps.iter().map(|&(i, wt)| wt * src[[i / w, i % w, c]]).sum();
            }
        }
    }
    ImageTensor::from_array(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_displacement_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = ImageTensor::from_fn(20, 20, |_, _, _| rng.gen());
        let out = tps_warp(&img, &[[0.0; 2]; 9]).unwrap();
        let diff = (out.as_array() - img.as_array()).mapv(f64::abs);
        assert!(diff.iter().all(|&d| d < 1e-6));
    }

    #[test]
    fn uniform_displacement_translates_content() {
        // shift right by 2 px on a 20 px image: 0.2 in unit coordinates
        let img = ImageTensor::from_fn(20, 20, |y, x, c| ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
        let out = tps_warp(&img, &[[0.2, 0.0]; 9]).unwrap();
        for y in 0..20 {
            for x in 2..20 {
                for c in 0..3 {
                    assert!((out.get(y, x, c) - img.get(y, x - 2, c)).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn control_points_reach_their_targets() {
        let side = 32usize;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ctrl = tps_control_points();
        for _ in 0..20 {
            let disp: Vec<[f64; 2]> = (0..9).map(|_| [rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)]).collect();
            let warp = TpsWarp::new(&disp).unwrap();
            for (c, d) in ctrl.iter().zip(&disp) {
                // the output pixel at the displaced point samples the source control point
                let g = warp.map([c[0] + d[0], c[1] + d[1]]);
                let err_px = ((g[0] - c[0]).hypot(g[1] - c[1])) * side as f64 / 2.0;
                assert!(err_px < 0.5, "{err_px}");
            }
        }
    }

    #[test]
    fn collinear_controls_are_singular() {
        let pts = [[-1.0, 0.0], [0.0, 0.0], [1.0, 0.0], [0.5, 0.0]];
        assert!(matches!(TpsWarp::with_points(&pts, &[[0.0; 2]; 4]), Err(Error::SingularTps)));
        // displacements that collapse the default grid onto a line
        let flat: Vec<[f64; 2]> = tps_control_points().iter().map(|c| [0.0, -c[1]]).collect();
        assert!(matches!(TpsWarp::new(&flat), Err(Error::SingularTps)));
    }

    #[test]
    fn wrong_displacement_count_is_rejected() {
        assert!(TpsWarp::new(&[[0.0; 2]; 4]).is_err());
    }
}
