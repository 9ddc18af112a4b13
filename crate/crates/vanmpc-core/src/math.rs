//! Small fixed-size numeric helpers shared across the crate.

use core::f64::consts::PI;

/// 3-vector (state dimension).
pub type Vec3 = [f64; 3];
/// 2-vector (input dimension).
pub type Vec2 = [f64; 2];
/// 3x2 matrix stored as three rows of two.
pub type Mat32 = [[f64; 2]; 3];
/// 3x3 matrix stored row-major.
pub type Mat3 = [[f64; 3]; 3];

/// Wrap an angle to the half-open interval (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    // rem_euclid-style reduction, then shift (pi, 2pi) down.
    let two_pi = 2.0 * PI;
    let mut r = a % two_pi;
    if r < 0.0 {
        r += two_pi;
    }
    if r > PI {
        r -= two_pi;
    }
    r
}

/// Wrapped difference a - b in (-pi, pi].
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

pub fn dot3(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn sub3(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn norm3(a: &Vec3) -> f64 {
    libm::sqrt(dot3(a, a))
}

/// y = M * v for a 3x2 matrix and 2-vector.
pub fn mat32_mul_vec2(m: &Mat32, v: &Vec2) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1],
        m[1][0] * v[0] + m[1][1] * v[1],
        m[2][0] * v[0] + m[2][1] * v[1],
    ]
}

/// y = Mᵀ * v for a 3x2 matrix and 3-vector (result is a 2-vector).
pub fn mat32_tr_mul_vec3(m: &Mat32, v: &Vec3) -> Vec2 {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
    ]
}

/// One classical fourth-order Runge-Kutta step of an autonomous ODE.
pub fn rk4_step<const D: usize, F>(f: F, x: &[f64; D], h: f64) -> [f64; D]
where
    F: Fn(&[f64; D]) -> [f64; D],
{
    let k1 = f(x);
    let mut xs = *x;
    for i in 0..D {
        xs[i] = x[i] + 0.5 * h * k1[i];
    }
    let k2 = f(&xs);
    for i in 0..D {
        xs[i] = x[i] + 0.5 * h * k2[i];
    }
    let k3 = f(&xs);
    for i in 0..D {
        xs[i] = x[i] + h * k3[i];
    }
    let k4 = f(&xs);
    let mut out = *x;
    for i in 0..D {
        out[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI / 2.0) - (-PI / 2.0)).abs() < 1e-12);
        assert!((wrap_angle(-3.0 * PI / 2.0) - (PI / 2.0)).abs() < 1e-12);
        assert_eq!(wrap_angle(0.0), 0.0);
        assert!((wrap_angle(7.0 * PI) - PI).abs() < 1e-9);
    }

    #[test]
    fn angle_diff_crosses_pi() {
        // pi - 0.1 vs -pi + 0.1 are 0.2 apart going through pi.
        let d = angle_diff(PI - 0.1, -PI + 0.1);
        assert!((d - (-0.2)).abs() < 1e-12);
    }

    #[test]
    fn rk4_exponential_decay() {
        // x' = -x over 1 s: error of RK4 at h=0.1 is ~1e-7.
        let mut x = [1.0];
        for _ in 0..10 {
            x = rk4_step(|s| [-s[0]], &x, 0.1);
        }
        assert!((x[0] - (-1.0f64).exp()).abs() < 1e-6);
    }
}
