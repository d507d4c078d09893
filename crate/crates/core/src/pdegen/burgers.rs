use std::f64::consts::PI;

fn minmod(a: f64, b: f64) -> f64 {
    if a * b <= 0.0 {
        0.0
    } else if a.abs() < b.abs() {
        a
    } else {
        b
    }
}

/// Exact Riemann flux of `u^2 / 2`.
fn godunov(ul: f64, ur: f64) -> f64 {
    let f = |u: f64| 0.5 * u * u;
    if ul <= ur {
        if ul > 0.0 {
            f(ul)
        } else if ur < 0.0 {
            f(ur)
        } else {
            0.0
        }
    } else {
        f(ul).max(f(ur))
    }
}

/// Semi-discrete right-hand side on a periodic grid: limited
/// piecewise-linear reconstruction for the flux, central differences for
/// the `(nu/pi) u_xx` term.
pub fn burgers_rhs(u: &[f64], nu: f64, dx: f64) -> Vec<f64> {
    let n = u.len();
    let at = |i: isize| u[i.rem_euclid(n as isize) as usize];
    let slope: Vec<f64> = (0..n as isize).map(|i| minmod(at(i) - at(i - 1), at(i + 1) - at(i))).collect();
    // flux[i] sits on the face between cells i and i+1
    let flux: Vec<f64> = (0..n)
        .map(|i| {
            let j = (i + 1) % n;
            godunov(u[i] + 0.5 * slope[i], u[j] - 0.5 * slope[j])
        })
        .collect();
    let visc = nu / PI / (dx * dx);
    (0..n)
        .map(|i| {
            let l = (i + n - 1) % n;
            let r = (i + 1) % n;
            -(flux[i] - flux[l]) / dx + visc * (u[r] - 2.0 * u[i] + u[l])
        })
        .collect()
}

/// One SSP-RK2 step.
pub fn burgers_step(u: &mut [f64], dt: f64, nu: f64, dx: f64) {
    let k1 = burgers_rhs(u, nu, dx);
    let u1: Vec<f64> = u.iter().zip(&k1).map(|(a, k)| a + dt * k).collect();
    let k2 = burgers_rhs(&u1, nu, dx);
    for ((a, b), k) in u.iter_mut().zip(&u1).zip(&k2) {
        *a = 0.5 * *a + 0.5 * (b + dt * k);
    }
}
