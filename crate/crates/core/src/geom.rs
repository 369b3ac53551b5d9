//! Planar geometry for glyph placement: affine maps, homographies, and
//! coverage warping.

/// Row-major 2x3 affine transform acting on column vectors `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Affine2 {
    pub m: [f64; 6],
}

impl Affine2 {
    pub fn identity() -> Self {
        Self { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0] }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { m: [1.0, 0.0, tx, 0.0, 1.0, ty] }
    }

    pub fn rotation_deg(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self { m: [c, -s, 0.0, s, c, 0.0] }
    }

    pub fn scale(sx: f64, sy: f64) -> Self {
        Self { m: [sx, 0.0, 0.0, 0.0, sy, 0.0] }
    }

    /// `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Affine2) -> Self {
        let a = &self.m;
        let b = &other.m;
        Self {
            m: [
                a[0] * b[0] + a[1] * b[3],
                a[0] * b[1] + a[1] * b[4],
                a[0] * b[2] + a[1] * b[5] + a[2],
                a[3] * b[0] + a[4] * b[3],
                a[3] * b[1] + a[4] * b[4],
                a[3] * b[2] + a[4] * b[5] + a[5],
            ],
        }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.m[0] * x + self.m[1] * y + self.m[2],
            self.m[3] * x + self.m[4] * y + self.m[5],
        )
    }

    pub fn inverse(&self) -> Option<Affine2> {
        let det = self.m[0] * self.m[4] - self.m[1] * self.m[3];
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = 1.0 / det;
        let a = self.m[4] * inv;
        let b = -self.m[1] * inv;
        let d = -self.m[3] * inv;
        let e = self.m[0] * inv;
        let c = -(a * self.m[2] + b * self.m[5]);
        let f = -(d * self.m[2] + e * self.m[5]);
        Some(Affine2 { m: [a, b, c, d, e, f] })
    }
}

/// Row-major 3x3 homography acting on `(x, y, 1)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    pub m: [f64; 9],
}

impl Homography {
    pub fn identity() -> Self {
        Self { m: [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0] }
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let w = self.m[6] * x + self.m[7] * y + self.m[8];
        (
            (self.m[0] * x + self.m[1] * y + self.m[2]) / w,
            (self.m[3] * x + self.m[4] * y + self.m[5]) / w,
        )
    }

    /// Local 2x2 Jacobian of the map at `(x, y)`.
    pub fn jacobian(&self, x: f64, y: f64) -> [f64; 4] {
        let m = &self.m;
        let w = m[6] * x + m[7] * y + m[8];
        let u = m[0] * x + m[1] * y + m[2];
        let v = m[3] * x + m[4] * y + m[5];
        let w2 = w * w;
        [
            (m[0] * w - u * m[6]) / w2,
            (m[1] * w - u * m[7]) / w2,
            (m[3] * w - v * m[6]) / w2,
            (m[4] * w - v * m[7]) / w2,
        ]
    }

    pub fn inverse(&self) -> Option<Homography> {
        let m = &self.m;
        let a = m[4] * m[8] - m[5] * m[7];
        let b = m[2] * m[7] - m[1] * m[8];
        let c = m[1] * m[5] - m[2] * m[4];
        let det = m[0] * a + m[3] * b + m[6] * c;
        if det.abs() < 1e-12 {
            return None;
        }
        let inv = 1.0 / det;
        Some(Homography {
            m: [
                a * inv,
                b * inv,
                c * inv,
                (m[5] * m[6] - m[3] * m[8]) * inv,
                (m[0] * m[8] - m[2] * m[6]) * inv,
                (m[2] * m[3] - m[0] * m[5]) * inv,
                (m[3] * m[7] - m[4] * m[6]) * inv,
                (m[1] * m[6] - m[0] * m[7]) * inv,
                (m[0] * m[4] - m[1] * m[3]) * inv,
            ],
        })
    }

    /// Homography mapping the four `src` points onto the four `dst` points.
    /// Points are `(x, y)`; returns `None` for degenerate configurations.
    pub fn from_quad(src: &[(f64, f64); 4], dst: &[(f64, f64); 4]) -> Option<Homography> {
        // Standard 8x8 DLT system solved by Gaussian elimination with
        // partial pivoting.
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -x * u, -y * u, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -x * v, -y * v, v];
        }
        for col in 0..8 {
            let mut pivot = col;
            for r in col + 1..8 {
                if a[r][col].abs() > a[pivot][col].abs() {
                    pivot = r;
                }
            }
            if a[pivot][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, pivot);
            let d = a[col][col];
            for k in col..9 {
                a[col][k] /= d;
            }
            for r in 0..8 {
                if r != col && a[r][col] != 0.0 {
                    let f = a[r][col];
                    for k in col..9 {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let mut m = [0.0f64; 9];
        for i in 0..8 {
            m[i] = a[i][8];
        }
        m[8] = 1.0;
        Some(Homography { m })
    }
}

/// Bilinear sample of a coverage plane with zero outside bounds.
#[inline]
pub fn sample_bilinear(data: &[f32], h: usize, w: usize, x: f64, y: f64) -> f32 {
    if x <= -1.0 || y <= -1.0 || x >= w as f64 || y >= h as f64 {
        return 0.0;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = (x - x0) as f32;
    let fy = (y - y0) as f32;
    let (x0, y0) = (x0 as isize, y0 as isize);
    let at = |yy: isize, xx: isize| -> f32 {
        if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
            0.0
        } else {
            data[yy as usize * w + xx as usize]
        }
    };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1);
    let v10 = at(y0 + 1, x0);
    let v11 = at(y0 + 1, x0 + 1);
    (v00 * (1.0 - fx) + v01 * fx) * (1.0 - fy) + (v10 * (1.0 - fx) + v11 * fx) * fy
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn affine_inverse_round_trips() {
        let t = Affine2::translation(3.0, -2.0)
            .compose(&Affine2::rotation_deg(30.0))
            .compose(&Affine2::scale(2.0, 0.5));
        let inv = t.inverse().unwrap();
        let (x, y) = t.apply(1.5, -4.0);
        let (bx, by) = inv.apply(x, y);
        assert!((bx - 1.5).abs() < 1e-9 && (by + 4.0).abs() < 1e-9);
    }

    #[test]
    fn homography_from_quad_identity() {
        let pts = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)];
        let h = Homography::from_quad(&pts, &pts).unwrap();
        let (x, y) = h.apply(0.3, 0.7);
        assert!((x - 0.3).abs() < 1e-9 && (y - 0.7).abs() < 1e-9);
    }

    #[test]
    fn homography_maps_corners() {
        let src = [(0.0, 0.0), (4.0, 0.0), (4.0, 2.0), (0.0, 2.0)];
        let dst = [(0.2, 0.1), (3.9, -0.2), (4.3, 2.2), (-0.1, 1.8)];
        let h = Homography::from_quad(&src, &dst).unwrap();
        for i in 0..4 {
            let (x, y) = h.apply(src[i].0, src[i].1);
            assert!((x - dst[i].0).abs() < 1e-8);
            assert!((y - dst[i].1).abs() < 1e-8);
        }
        let inv = h.inverse().unwrap();
        let (x, y) = inv.apply(dst[2].0, dst[2].1);
        assert!((x - 4.0).abs() < 1e-8 && (y - 2.0).abs() < 1e-8);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let src = [(0.0, 0.0), (4.0, 0.0), (4.0, 2.0), (0.0, 2.0)];
        let dst = [(0.2, 0.1), (3.9, -0.2), (4.3, 2.2), (-0.1, 1.8)];
        let h = Homography::from_quad(&src, &dst).unwrap();
        let (x, y) = (1.3, 0.9);
        let j = h.jacobian(x, y);
        let eps = 1e-6;
        let (ux1, vx1) = h.apply(x + eps, y);
        let (ux0, vx0) = h.apply(x - eps, y);
        let (uy1, vy1) = h.apply(x, y + eps);
        let (uy0, vy0) = h.apply(x, y - eps);
        assert!((j[0] - (ux1 - ux0) / (2.0 * eps)).abs() < 1e-6);
        assert!((j[2] - (vx1 - vx0) / (2.0 * eps)).abs() < 1e-6);
        assert!((j[1] - (uy1 - uy0) / (2.0 * eps)).abs() < 1e-6);
        assert!((j[3] - (vy1 - vy0) / (2.0 * eps)).abs() < 1e-6);
    }
}
