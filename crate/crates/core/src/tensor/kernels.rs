//! Dense numeric kernels shared by the forward and backward passes.
//!
//! Matrix products go through `matrixmultiply::dgemm`, which is single
//! threaded here and therefore reduces in a fixed order.

/// Row-major matrix view description: element (i, j) is at `i*rs + j*cs`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatLayout {
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl MatLayout {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self { rows, cols, rs: cols as isize, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` matrix, viewed as `cols x rows`.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self { rows: cols, cols: rows, rs: 1, cs: cols as isize }
    }
}

/// `c = beta*c + a·b`, `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: &[f64], la: MatLayout, b: &[f64], lb: MatLayout, c: &mut [f64], beta: f64) {
    assert_eq!(la.cols, lb.rows, "gemm inner dimension");
    let (m, k, n) = (la.rows, la.cols, lb.cols);
    assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    // SAFETY: the layouts above describe in-bounds views of `a`, `b` and `c`,
    // checked by the debug assertions below.
    debug_assert!(max_offset(la) < a.len());
    debug_assert!(max_offset(lb) < b.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn max_offset(l: MatLayout) -> usize {
    ((l.rows - 1) as isize * l.rs + (l.cols - 1) as isize * l.cs) as usize
}

/// Spatial geometry of a 3-D convolution with stride 1.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub d: usize,
    pub h: usize,
    pub w: usize,
    pub kd: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_dims(&self) -> (usize, usize, usize) {
        (
            self.d + 2 * self.pad + 1 - self.kd,
            self.h + 2 * self.pad + 1 - self.kh,
            self.w + 2 * self.pad + 1 - self.kw,
        )
    }

    /// Output index range along one axis for which `out + k - pad` lands inside `[0, n)`.
    fn valid(out_n: usize, n: usize, k: usize, pad: usize) -> (usize, usize) {
        let lo = pad.saturating_sub(k);
        let hi = (n + pad).saturating_sub(k).min(out_n);
        (lo, hi.max(lo))
    }
}

/// Cross-correlation with zero padding (no kernel flip).
pub(crate) fn conv3d_forward(x: &[f64], k: &[f64], bias: Option<&[f64]>, g: ConvGeom) -> Vec<f64> {
    let (od, oh, ow) = g.out_dims();
    let ovol = od * oh * ow;
    let ivol = g.d * g.h * g.w;
    let mut out = vec![0.0; g.batch * g.cout * ovol];
    for b in 0..g.batch {
        for co in 0..g.cout {
            let o = &mut out[(b * g.cout + co) * ovol..(b * g.cout + co + 1) * ovol];
            if let Some(bias) = bias {
                o.iter_mut().for_each(|v| *v = bias[co]);
            }
            for ci in 0..g.cin {
                let xin = &x[(b * g.cin + ci) * ivol..(b * g.cin + ci + 1) * ivol];
                let kbase = (co * g.cin + ci) * g.kd * g.kh * g.kw;
                for a in 0..g.kd {
                    let (zlo, zhi) = ConvGeom::valid(od, g.d, a, g.pad);
                    for bb in 0..g.kh {
                        let (ylo, yhi) = ConvGeom::valid(oh, g.h, bb, g.pad);
                        for c in 0..g.kw {
                            let (xlo, xhi) = ConvGeom::valid(ow, g.w, c, g.pad);
                            let wv = k[kbase + (a * g.kh + bb) * g.kw + c];
                            if wv == 0.0 {
                                continue;
                            }
                            for z in zlo..zhi {
                                let iz = z + a - g.pad;
                                for y in ylo..yhi {
                                    let iy = y + bb - g.pad;
                                    let orow = &mut o[(z * oh + y) * ow..(z * oh + y) * ow + ow];
                                    let irow = &xin[(iz * g.h + iy) * g.w..(iz * g.h + iy) * g.w + g.w];
                                    for xo in xlo..xhi {
                                        orow[xo] += wv * irow[xo + c - g.pad];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Accumulates input, kernel and bias gradients of [`conv3d_forward`].
pub(crate) fn conv3d_backward(
    x: &[f64],
    k: &[f64],
    dy: &[f64],
    g: ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let (od, oh, ow) = g.out_dims();
    let ovol = od * oh * ow;
    let ivol = g.d * g.h * g.w;
    for b in 0..g.batch {
        for co in 0..g.cout {
            let go = &dy[(b * g.cout + co) * ovol..(b * g.cout + co + 1) * ovol];
            if let Some(db) = db.as_deref_mut() {
                db[co] += go.iter().sum::<f64>();
            }
            for ci in 0..g.cin {
                let xoff = (b * g.cin + ci) * ivol;
                let kbase = (co * g.cin + ci) * g.kd * g.kh * g.kw;
                for a in 0..g.kd {
                    let (zlo, zhi) = ConvGeom::valid(od, g.d, a, g.pad);
                    for bb in 0..g.kh {
                        let (ylo, yhi) = ConvGeom::valid(oh, g.h, bb, g.pad);
                        for c in 0..g.kw {
                            let (xlo, xhi) = ConvGeom::valid(ow, g.w, c, g.pad);
                            let kidx = kbase + (a * g.kh + bb) * g.kw + c;
                            let wv = k[kidx];
                            let mut acc = 0.0;
                            for z in zlo..zhi {
                                let iz = z + a - g.pad;
                                for y in ylo..yhi {
                                    let iy = y + bb - g.pad;
                                    let grow = &go[(z * oh + y) * ow..(z * oh + y) * ow + ow];
                                    let rbase = xoff + (iz * g.h + iy) * g.w;
                                    if dk.is_some() {
                                        let irow = &x[rbase..rbase + g.w];
                                        for xo in xlo..xhi {
                                            acc += grow[xo] * irow[xo + c - g.pad];
                                        }
                                    }
                                    if let Some(dx) = dx.as_deref_mut() {
                                        let drow = &mut dx[rbase..rbase + g.w];
                                        for xo in xlo..xhi {
                                            drow[xo + c - g.pad] += wv * grow[xo];
                                        }
                                    }
                                }
                            }
                            if let Some(dk) = dk.as_deref_mut() {
                                dk[kidx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Linear interpolation weights for endpoint-aligned resampling of `src`
/// positions onto `dst` positions: target `j` sits at source coordinate
/// `j*(src-1)/(dst-1)`. A single target maps to the first source entry.
/// Returns `(lo, hi, frac)` per target.
pub(crate) fn linear_weights(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|j| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            if src == dst {
                return (j, j, 0.0);
            }
            let pos = j as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_hand_product() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(&a, MatLayout::row_major(2, 2), &b, MatLayout::row_major(2, 2), &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        // a · bᵀ
        gemm(&a, MatLayout::row_major(2, 2), &b, MatLayout::transposed(2, 2), &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn linear_weights_endpoints() {
        let w = linear_weights(2, 3);
        assert_eq!(w[0], (0, 1, 0.0));
        assert_eq!(w[1], (0, 1, 0.5));
        assert_eq!(w[2].0, 1);
        assert_eq!(w[2].2, 0.0);
        assert!(linear_weights(5, 5).iter().enumerate().all(|(j, &(l, _, f))| l == j && f == 0.0));
    }
}
