//! Natural cubic splines for example paths and global guidance.
//!
//! A [`SplinePath`] interpolates a list of 3D control points with a natural
//! cubic spline (zero second derivative at both ends). Knots are assigned by
//! cumulative chord length, so the path parameter `nu` is approximately arc
//! length and lives in `[0, length]`.

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub type Point3 = Vector3<f64>;

/// Samples per segment for the global closest-point scan.
const SCAN_SAMPLES: usize = 64;
/// Half-width of the search bracket around a closest-point hint (in `nu`).
const HINT_WINDOW: f64 = 2.0;
const DEGENERATE_TANGENT: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("a spline needs at least two control points, got {0}")]
    TooFewPoints(usize),
    #[error("control points {0} and {1} coincide")]
    DuplicatePoint(usize, usize),
    #[error("non-finite control point at index {0}")]
    NonFinite(usize),
    #[error("degenerate tangent at nu = {0}")]
    DegenerateTangent(f64),
}

#[derive(Debug, Clone)]
pub struct SplinePath {
    control_points: Vec<Point3>,
    knots: Vec<f64>,
    /// Per segment `[a, b, c, d]` with `s(nu) = a + b t + c t^2 + d t^3`, `t = nu - knot`.
    coeffs: Vec<[Point3; 4]>,
}

/// Point, unit tangent and planar heading of the path at one parameter value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathFrame {
    pub point: Point3,
    pub tangent: Point3,
    /// Yaw of the tangent projected onto the xy-plane.
    pub heading: f64,
    /// Set when the requested parameter was outside `[0, length]`.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub param: f64,
    /// Exact contouring error `|s(param) - p|`.
    pub distance: f64,
}

/// Tangent-projected lag/contour error approximation at a given parameter,
/// with analytic derivatives.
///
/// `lag` is the signed projection `r . t` with `r = s(nu) - p`; `contour` is
/// the residual vector `r - (r . t) t`. The scalar errors are `|lag|` and
/// `|contour|`.
#[derive(Debug, Clone, Copy)]
pub struct ContouringErrors {
    pub lag: f64,
    pub contour: Point3,
    pub d_lag_dp: Point3,
    pub d_lag_dnu: f64,
    pub d_contour_dp: Matrix3<f64>,
    pub d_contour_dnu: Point3,
}

impl ContouringErrors {
    pub fn lag_error(&self) -> f64 {
        self.lag.abs()
    }

    pub fn contour_error(&self) -> f64 {
        self.contour.norm()
    }

    /// Gradient of `|lag|` with respect to `(p, nu)`. Zero at `lag == 0`.
    pub fn lag_error_gradient(&self) -> (Point3, f64) {
        let sign = if self.lag > 0.0 {
            1.0
        } else if self.lag < 0.0 {
            -1.0
        } else {
            0.0
        };
        (self.d_lag_dp * sign, self.d_lag_dnu * sign)
    }

    /// Gradient of `|contour|` with respect to `(p, nu)`. Zero at a vanishing contour error.
    pub fn contour_error_gradient(&self) -> (Point3, f64) {
        let norm = self.contour.norm();
        if norm == 0.0 {
            return (Point3::zeros(), 0.0);
        }
        let unit = self.contour / norm;
        (self.d_contour_dp.transpose() * unit, unit.dot(&self.d_contour_dnu))
    }
}

impl SplinePath {
    /// Builds the interpolating natural cubic spline through `points`.
    pub fn new(points: &[Point3]) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        if let Some(i) = points.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        let mut knots = Vec::with_capacity(points.len());
        knots.push(0.0);
        for i in 1..points.len() {
            let h = (points[i] - points[i - 1]).norm();
            if h <= 1e-12 {
                return Err(GeometryError::DuplicatePoint(i - 1, i));
            }
            knots.push(knots[i - 1] + h);
        }
        let moments = natural_moments(points, &knots);
        let coeffs = (0..points.len() - 1)
            .map(|i| {
                let h = knots[i + 1] - knots[i];
                let (y0, y1) = (points[i], points[i + 1]);
                let (m0, m1) = (moments[i], moments[i + 1]);
                let b = (y1 - y0) / h - (m0 * 2.0 + m1) * (h / 6.0);
                [y0, b, m0 * 0.5, (m1 - m0) / (6.0 * h)]
            })
            .collect();
        Ok(Self {
            control_points: points.to_vec(),
            knots,
            coeffs,
        })
    }

    /// Straight segment from `a` to `b`.
    pub fn line(a: Point3, b: Point3) -> Result<Self, GeometryError> {
        Self::new(&[a, b])
    }

    pub fn control_points(&self) -> &[Point3] {
        &self.control_points
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Upper bound of the path parameter.
    pub fn length(&self) -> f64 {
        *self.knots.last().unwrap()
    }

    pub fn clamp_param(&self, nu: f64) -> f64 {
        nu.clamp(0.0, self.length())
    }

    fn segment(&self, nu: f64) -> (usize, f64) {
        let nu = self.clamp_param(nu);
        let last = self.coeffs.len() - 1;
        let i = self.knots.partition_point(|&k| k <= nu).saturating_sub(1).min(last);
        (i, nu - self.knots[i])
    }

    pub fn position(&self, nu: f64) -> Point3 {
        let (i, t) = self.segment(nu);
        let [a, b, c, d] = &self.coeffs[i];
        a + (b + (c + d * t) * t) * t
    }

    /// First derivative `s'(nu)`.
    pub fn derivative(&self, nu: f64) -> Point3 {
        let (i, t) = self.segment(nu);
        let [_, b, c, d] = &self.coeffs[i];
        b + (c * 2.0 + d * (3.0 * t)) * t
    }

    pub fn second_derivative(&self, nu: f64) -> Point3 {
        let (i, t) = self.segment(nu);
        let [_, _, c, d] = &self.coeffs[i];
        c * 2.0 + d * (6.0 * t)
    }

    pub fn eval(&self, nu: f64) -> Result<PathFrame, GeometryError> {
        let clamped = !(0.0..=self.length()).contains(&nu);
        let nu_c = self.clamp_param(nu);
        let tangent = self.unit_tangent(nu_c)?;
        Ok(PathFrame {
            point: self.position(nu_c),
            tangent,
            heading: tangent.y.atan2(tangent.x),
            clamped,
        })
    }

    fn unit_tangent(&self, nu: f64) -> Result<Point3, GeometryError> {
        let d = self.derivative(nu);
        let n = d.norm();
        if n < DEGENERATE_TANGENT {
            return Err(GeometryError::DegenerateTangent(nu));
        }
        Ok(d / n)
    }

    /// Parameter of the point on the path closest to `p`.
    ///
    /// Without a hint the whole path is scanned coarsely and every local
    /// minimum of the scan is refined; with a hint a safeguarded Newton search
    /// runs in a bracket around the hint, and the full scan is used only if
    /// that search ends on the bracket edge.
    pub fn closest_point(&self, p: &Point3, hint: Option<f64>) -> Projection {
        let len = self.length();
        let best = match hint {
            Some(h) if h.is_finite() => {
                let h = self.clamp_param(h);
                let lo = (h - HINT_WINDOW).max(0.0);
                let hi = (h + HINT_WINDOW).min(len);
                let nu = self.refine(p, lo, hi, h);
                // Pinned to an interior bracket end: the minimum lies outside.
                if (nu == lo && lo > 0.0) || (nu == hi && hi < len) {
                    self.global_scan(p)
                } else {
                    nu
                }
            }
            _ => self.global_scan(p),
        };
        Projection {
            param: best,
            distance: (self.position(best) - p).norm(),
        }
    }

    fn global_scan(&self, p: &Point3) -> f64 {
        let mut samples = Vec::with_capacity(self.coeffs.len() * SCAN_SAMPLES + 1);
        for i in 0..self.coeffs.len() {
            let (k0, k1) = (self.knots[i], self.knots[i + 1]);
            for j in 0..SCAN_SAMPLES {
                samples.push(k0 + (k1 - k0) * j as f64 / SCAN_SAMPLES as f64);
            }
        }
        samples.push(self.length());
        let dist: Vec<f64> = samples
            .iter()
            .map(|&nu| (self.position(nu) - p).norm_squared())
            .collect();

        let mut best = (f64::INFINITY, 0.0);
        for j in 0..samples.len() {
            let left = if j > 0 { dist[j - 1] } else { f64::INFINITY };
            let right = dist.get(j + 1).copied().unwrap_or(f64::INFINITY);
            if dist[j] > left || dist[j] > right {
                continue;
            }
            let lo = samples[j.saturating_sub(1)];
            let hi = samples[(j + 1).min(samples.len() - 1)];
            let nu = self.refine(p, lo, hi, samples[j]);
            let d = (self.position(nu) - p).norm_squared();
            if d < best.0 {
                best = (d, nu);
            }
        }
        best.1
    }

    /// Minimizes `|s(nu) - p|^2` over `[lo, hi]` with Newton steps on the
    /// stationarity condition, falling back to bisection.
    fn refine(&self, p: &Point3, mut lo: f64, mut hi: f64, start: f64) -> f64 {
        let dist2 = |nu: f64| (self.position(nu) - p).norm_squared();
        let stationarity = |nu: f64| {
            let r = self.position(nu) - p;
            let d1 = self.derivative(nu);
            (r.dot(&d1), d1.norm_squared() + r.dot(&self.second_derivative(nu)))
        };
        let (lo0, hi0) = (lo, hi);
        let mut nu = start.clamp(lo, hi);
        for _ in 0..60 {
            let (g, gp) = stationarity(nu);
            if g == 0.0 {
                break;
            }
            if g > 0.0 {
                hi = nu;
            } else {
                lo = nu;
            }
            let mut next = if gp > 0.0 { nu - g / gp } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - nu).abs() <= 1e-14 * (1.0 + nu.abs()) {
                nu = next;
                break;
            }
            nu = next;
        }
        // A boundary minimum of the bracket can beat the interior stationary point.
        [nu, lo0, hi0]
            .into_iter()
            .min_by(|a, b| dist2(*a).total_cmp(&dist2(*b)))
            .unwrap()
    }

    /// Lag/contour approximation of the position `p` relative to `s(nu)`.
    pub fn contouring_errors(&self, p: &Point3, nu: f64) -> Result<ContouringErrors, GeometryError> {
        let nu = self.clamp_param(nu);
        let d1 = self.derivative(nu);
        let speed = d1.norm();
        if speed < DEGENERATE_TANGENT {
            return Err(GeometryError::DegenerateTangent(nu));
        }
        let t = d1 / speed;
        let proj = Matrix3::identity() - t * t.transpose();
        let dt = proj * self.second_derivative(nu) / speed;

        let r = self.position(nu) - p;
        let lag = r.dot(&t);
        let contour = r - t * lag;
        let d_lag_dnu = d1.dot(&t) + r.dot(&dt);
        Ok(ContouringErrors {
            lag,
            contour,
            d_lag_dp: -t,
            d_lag_dnu,
            d_contour_dp: -proj,
            d_contour_dnu: d1 - t * d_lag_dnu - dt * lag,
        })
    }
}

/// Second derivatives at the knots of the natural spline (Thomas algorithm).
fn natural_moments(points: &[Point3], knots: &[f64]) -> Vec<Point3> {
    let n = points.len();
    let mut moments = vec![Point3::zeros(); n];
    if n < 3 {
        return moments;
    }
    let h: Vec<f64> = knots.windows(2).map(|w| w[1] - w[0]).collect();
    let m = n - 2;
    let mut diag = vec![0.0; m];
    let mut upper = vec![0.0; m];
    let mut rhs = vec![Point3::zeros(); m];
    for k in 0..m {
        let i = k + 1;
        diag[k] = 2.0 * (h[i - 1] + h[i]);
        upper[k] = h[i];
        rhs[k] = ((points[i + 1] - points[i]) / h[i] - (points[i] - points[i - 1]) / h[i - 1]) * 6.0;
    }
    for k in 1..m {
        let w = h[k] / diag[k - 1];
        diag[k] -= w * upper[k - 1];
        let prev = rhs[k - 1];
        rhs[k] -= prev * w;
    }
    moments[m] = rhs[m - 1] / diag[m - 1];
    for k in (0..m - 1).rev() {
        moments[k + 1] = (rhs[k] - moments[k + 2] * upper[k]) / diag[k];
    }
    moments
}
