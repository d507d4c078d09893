/// Closed-form logistic update `u e^{r} / (1 - u + u e^{r})` with
/// `r = rho * dt`.
pub fn logistic_exact(u: f64, r: f64) -> f64 {
    let e = r.exp();
    u * e / (1.0 - u + u * e)
}

/// Explicit periodic diffusion step followed by the exact reaction step.
pub fn diffreact_step(u: &mut [f64], dt: f64, nu: f64, rho: f64, dx: f64) {
    let n = u.len();
    let c = nu * dt / (dx * dx);
    let old = u.to_vec();
    for i in 0..n {
        let l = old[(i + n - 1) % n];
        let r = old[(i + 1) % n];
        u[i] = logistic_exact(old[i] + c * (l - 2.0 * old[i] + r), rho * dt);
    }
}
