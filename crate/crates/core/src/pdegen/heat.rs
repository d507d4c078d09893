/// Forward-time centred-space step of `u_t = nu lap u` on the periodic unit
/// box. Singleton axes contribute nothing.
pub fn heat_step(u: &mut [f64], grid: [usize; 3], dt: f64, nu: f64) {
    let [d, h, w] = grid;
    let old = u.to_vec();
    let coef = grid.map(|n| if n > 1 { nu * dt * (n * n) as f64 } else { 0.0 });
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    for z in 0..d {
        let (zm, zp) = ((z + d - 1) % d, (z + 1) % d);
        for y in 0..h {
            let (ym, yp) = ((y + h - 1) % h, (y + 1) % h);
            for x in 0..w {
                let (xm, xp) = ((x + w - 1) % w, (x + 1) % w);
                let c = old[idx(z, y, x)];
                u[idx(z, y, x)] = c
                    + coef[0] * (old[idx(zm, y, x)] - 2.0 * c + old[idx(zp, y, x)])
                    + coef[1] * (old[idx(z, ym, x)] - 2.0 * c + old[idx(z, yp, x)])
                    + coef[2] * (old[idx(z, y, xm)] - 2.0 * c + old[idx(z, y, xp)]);
            }
        }
    }
}
