use ndarray::Array3;

use super::AdversarialPatch;
use crate::error::{Error, Result};

/// Smoothing constant inside the TV square root.
pub const TV_EPS: f64 = 1e-8;

const DEFAULT_PALETTE: &str = include_str!("../../assets/palette.txt");

/// Printable colours `c` for the non-printability score.
#[derive(Debug, Clone, PartialEq)]
pub struct PrintabilityPalette {
    colors: Vec<[f64; 3]>,
}

impl PrintabilityPalette {
    pub fn new(colors: Vec<[f64; 3]>) -> Result<Self> {
        if colors.is_empty() {
            return Err(Error::invalid("palette must contain at least one colour"));
        }
        if colors.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("palette colours must lie in [0, 1]"));
        }
        Ok(Self { colors })
    }

    /// Parses one `r g b` triple per line; blank lines and `#` comments are
    /// skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let mut colors = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::invalid(format!("palette line {}: {e}", i + 1)))?;
            if vals.len() != 3 {
                return Err(Error::invalid(format!("palette line {}: expected 3 values", i + 1)));
            }
            colors.push([vals[0], vals[1], vals[2]]);
        }
        Self::new(colors)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn colors(&self) -> &[[f64; 3]] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    fn nearest(&self, px: [f64; 3]) -> ([f64; 3], f64) {
        let mut best = (self.colors[0], f64::INFINITY);
        for c in &self.colors {
            let d = ((px[0] - c[0]).powi(2) + (px[1] - c[1]).powi(2) + (px[2] - c[2]).powi(2)).sqrt();
            if d < best.1 {
                best = (*c, d);
            }
        }
        best
    }
}

impl Default for PrintabilityPalette {
    fn default() -> Self {
        Self::parse(DEFAULT_PALETTE).expect("bundled palette parses")
    }
}

/// Total variation of the patch, summed over channels.
pub fn loss_tv(p: &AdversarialPatch) -> Result<f64> {
    Ok(loss_tv_grad(p)?.0)
}

/// TV value and its gradient. Each pixel contributes
/// `sqrt(dx^2 + dy^2 + eps) - sqrt(eps)`, with differences past the edge
/// taken as zero, so a constant patch scores exactly zero.
pub fn loss_tv_grad(p: &AdversarialPatch) -> Result<(f64, Array3<f64>)> {
    tv_with_eps(p, TV_EPS)
}

fn tv_with_eps(p: &AdversarialPatch, eps: f64) -> Result<(f64, Array3<f64>)> {
    let v = &p.values;
    let (n, _, ch) = v.dim();
    if n < 2 {
        return Err(Error::invalid(format!("total variation needs side >= 2, got {n}")));
    }
    let floor = eps.sqrt();
    let mut grad = Array3::zeros(v.dim());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            for c in 0..ch {
                let here = v[[i, j, c]];
                let dx = if i + 1 < n { here - v[[i + 1, j, c]] } else { 0.0 };
                let dy = if j + 1 < n { here - v[[i, j + 1, c]] } else { 0.0 };
                let r = (dx * dx + dy * dy + eps).sqrt();
                total += r - floor;
                if r == 0.0 {
                    continue;
                }
                grad[[i, j, c]] += (dx + dy) / r;
                if i + 1 < n {
                    grad[[i + 1, j, c]] -= dx / r;
                }
                if j + 1 < n {
                    grad[[i, j + 1, c]] -= dy / r;
                }
            }
        }
    }
    Ok((total, grad))
}

/// Sum over pixels of the Euclidean RGB distance to the nearest palette colour.
pub fn loss_nps(p: &AdversarialPatch, pal: &PrintabilityPalette) -> f64 {
    loss_nps_grad(p, pal).0
}

pub fn loss_nps_grad(p: &AdversarialPatch, pal: &PrintabilityPalette) -> (f64, Array3<f64>) {
    let v = &p.values;
    let (n, m, _) = v.dim();
    let mut grad = Array3::zeros(v.dim());
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..m {
            let px = [v[[i, j, 0]], v[[i, j, 1]], v[[i, j, 2]]];
            let (c, d) = pal.nearest(px);
            total += d;
            if d > 0.0 {
                for k in 0..3 {
                    grad[[i, j, k]] = (px[k] - c[k]) / d;
                }
            }
        }
    }
    (total, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_patch(side: usize, seed: u64) -> AdversarialPatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        AdversarialPatch::new(Array3::from_shape_fn((side, side, 3), |_| rng.gen_range(0.05..0.95))).unwrap()
    }

    fn fd_check(f: impl Fn(&AdversarialPatch) -> f64, grad: &Array3<f64>, p: &AdversarialPatch, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, _, _) = p.values.dim();
        let h = 1e-6;
        for _ in 0..20 {
            let idx = (rng.gen_range(0..n), rng.gen_range(0..n), rng.gen_range(0..3));
            let mut a = p.clone();
            a.values[idx] += h;
            let mut b = p.clone();
            b.values[idx] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            let an = grad[idx];
            let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
            assert!(rel < 1e-3, "{idx:?}: fd {fd} analytic {an}");
        }
    }

    #[test]
    fn bundled_palette_has_thirty_colours() {
        assert_eq!(PrintabilityPalette::default().len(), 30);
    }

    #[test]
    fn constant_patch_has_no_variation() {
        let p = AdversarialPatch::new(Array3::from_elem((16, 16, 3), 0.4)).unwrap();
        assert!(loss_tv(&p).unwrap() <= 1e-3);
    }

    #[test]
    fn tv_requires_two_pixels() {
        let p = AdversarialPatch::new(Array3::from_elem((1, 1, 3), 0.4)).unwrap();
        assert!(loss_tv(&p).is_err());
    }

    #[test]
    fn two_by_two_stripe_matches_scalar_loop() {
        // [[0,1],[0,1]] in every channel
        let vals = Array3::from_shape_fn((2, 2, 3), |(_, j, _)| j as f64);
        let p = AdversarialPatch::new(vals).unwrap();
        let got = loss_tv(&p).unwrap();
        // two pixels see a unit horizontal step, two see none
        let hand = 3.0 * 2.0 * ((1.0 + TV_EPS).sqrt() - TV_EPS.sqrt());
        assert!((got - hand).abs() < 1e-9);

        let mut oracle = 0.0;
        let q = [[0.0, 1.0], [0.0, 1.0]];
        for _c in 0..3 {
            for i in 0..2 {
                for j in 0..2 {
                    let dx = if i < 1 { q[i][j] - q[i + 1][j] } else { 0.0 };
                    let dy = if j < 1 { q[i][j] - q[i][j + 1] } else { 0.0 };
                    let v: f64 = dx * dx + dy * dy + TV_EPS;
                    oracle += v.sqrt() - TV_EPS.sqrt();
                }
            }
        }
        assert!((got - oracle).abs() < 1e-9);
    }

    #[test]
    fn tv_is_homogeneous_in_contrast() {
        let p = random_patch(12, 3);
        let mean = p.values.mean().unwrap();
        let half = AdversarialPatch::new(p.values.mapv(|v| mean + 0.5 * (v - mean))).unwrap();
        let ratio = tv_with_eps(&p, 0.0).unwrap().0 / tv_with_eps(&half, 0.0).unwrap().0;
        assert!((ratio - 2.0).abs() < 1e-6, "{ratio}");
        // the smoothed loss departs from this only at the sqrt(eps) scale
        let smoothed = loss_tv(&p).unwrap() / loss_tv(&half).unwrap();
        assert!((smoothed - 2.0).abs() < 1e-2, "{smoothed}");
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let p = random_patch(10, 5);
        let (_, g) = loss_tv_grad(&p).unwrap();
        fd_check(|q| loss_tv(q).unwrap(), &g, &p, 6);
    }

    #[test]
    fn nps_zero_on_palette_pixels() {
        let pal = PrintabilityPalette::default();
        let cols = pal.colors().to_vec();
        let p = AdversarialPatch::new(Array3::from_shape_fn((5, 6, 3), |(i, j, c)| cols[(i * 6 + j) % cols.len()][c]));
        // non-square shapes are rejected, so build a square one instead
        assert!(p.is_err());
        let p = AdversarialPatch::new(Array3::from_shape_fn((5, 5, 3), |(i, j, c)| cols[(i * 5 + j) % cols.len()][c])).unwrap();
        assert!(loss_nps(&p, &pal) < 1e-9);
    }

    #[test]
    fn nps_single_pixel_singleton_palette() {
        let pal = PrintabilityPalette::new(vec![[0.0, 0.0, 0.0]]).unwrap();
        let mut vals = Array3::zeros((2, 2, 3));
        vals[[1, 0, 0]] = 0.3;
        vals[[1, 0, 1]] = 0.4;
        let p = AdversarialPatch::new(vals).unwrap();
        assert!((loss_nps(&p, &pal) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn nps_matches_double_loop_oracle() {
        let pal = PrintabilityPalette::default();
        let p = random_patch(9, 8);
        let mut oracle = 0.0;
        for i in 0..9 {
            for j in 0..9 {
                let mut best = f64::INFINITY;
                for c in pal.colors() {
                    let d: f64 = (0..3).map(|k| (p.values[[i, j, k]] - c[k]).powi(2)).sum::<f64>().sqrt();
                    best = best.min(d);
                }
                oracle += best;
            }
        }
        assert!((loss_nps(&p, &pal) - oracle).abs() < 1e-6);
    }

    #[test]
    fn nps_gradient_matches_finite_differences() {
        let pal = PrintabilityPalette::default();
        let p = random_patch(10, 12);
        let (_, g) = loss_nps_grad(&p, &pal);
        fd_check(|q| loss_nps(q, &pal), &g, &p, 13);
    }

    #[test]
    fn palette_parse_errors() {
        assert!(PrintabilityPalette::parse("").is_err());
        assert!(PrintabilityPalette::parse("0.1 0.2").is_err());
        assert!(PrintabilityPalette::parse("0.1 0.2 1.5").is_err());
        assert_eq!(PrintabilityPalette::parse("# c\n0 0 0\n\n1 1 1\n").unwrap().len(), 2);
    }
}
