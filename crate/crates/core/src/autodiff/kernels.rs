//! Plain-loop numeric kernels.
//!
//! `gemm` walks `i, k, j` so every output element accumulates its products
//! in increasing `k` order. The compacted-subnetwork oracle relies on that
//! order to reproduce masked forwards bit for bit.

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn gemm_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
}

pub fn gemm(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    gemm_acc(&mut out, a, b, m, k, n);
    out
}

/// `out[k×n] += aᵀ · g` for `a[m×k]`, `g[m×n]`.
pub fn gemm_tn_acc(out: &mut [f32], a: &[f32], g: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (kk, &aik) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let orow = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aik * gv;
            }
        }
    }
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvDims {
    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds one `C×H×W` image into a `(C·kh·kw) × (oh·ow)` column matrix.
pub fn im2col(img: &[f32], d: &ConvDims, cols: &mut [f32]) {
    let np = d.out_pixels();
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let dst = &mut cols[row * np..(row + 1) * np];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        dst[oy * d.ow + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < d.h && (ix as usize) < d.w {
                            img[(c * d.h + iy as usize) * d.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im_acc(cols: &[f32], d: &ConvDims, img: &mut [f32]) {
    let np = d.out_pixels();
    for c in 0..d.c {
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let row = (c * d.kh + ki) * d.kw + kj;
                let src = &cols[row * np..(row + 1) * np];
                for oy in 0..d.oh {
                    let iy = (oy * d.stride + ki) as isize - d.pad as isize;
                    if iy < 0 || iy as usize >= d.h {
                        continue;
                    }
                    for ox in 0..d.ow {
                        let ix = (ox * d.stride + kj) as isize - d.pad as isize;
                        if ix < 0 || ix as usize >= d.w {
                            continue;
                        }
                        img[(c * d.h + iy as usize) * d.w + ix as usize] += src[oy * d.ow + ox];
                    }
                }
            }
        }
    }
}

/// Batched cross-correlation, `x[N×C×H×W]`, `w[F×C×kh×kw]`.
pub fn conv2d_forward(x: &[f32], w: &[f32], n: usize, f: usize, d: &ConvDims) -> Vec<f32> {
    let img = d.c * d.h * d.w;
    let np = d.out_pixels();
    let mut cols = vec![0.0; d.patch() * np];
    let mut out = vec![0.0; n * f * np];
    for i in 0..n {
        im2col(&x[i * img..(i + 1) * img], d, &mut cols);
        gemm_acc(&mut out[i * f * np..(i + 1) * f * np], w, &cols, f, d.patch(), np);
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input and kernel, accumulated into
/// `dx` / `dw` when provided.
pub fn conv2d_backward(
    x: &[f32],
    w: &[f32],
    g: &[f32],
    n: usize,
    f: usize,
    d: &ConvDims,
    mut dx: Option<&mut [f32]>,
    mut dw: Option<&mut [f32]>,
) {
    let img = d.c * d.h * d.w;
    let np = d.out_pixels();
    let p = d.patch();
    let mut cols = vec![0.0; p * np];
    let wt = if dx.is_some() { transpose(w, f, p) } else { Vec::new() };
    for i in 0..n {
        let gi = &g[i * f * np..(i + 1) * f * np];
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[i * img..(i + 1) * img], d, &mut cols);
            // dw[f×p] += g_i[f×np] · colsᵀ
            for ff in 0..f {
                let grow = &gi[ff * np..(ff + 1) * np];
                for (pp, slot) in dw[ff * p..(ff + 1) * p].iter_mut().enumerate() {
                    let crow = &cols[pp * np..(pp + 1) * np];
                    *slot += grow.iter().zip(crow).map(|(a, b)| a * b).sum::<f32>();
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            let dcols = gemm(&wt, gi, p, f, np);
            col2im_acc(&dcols, d, &mut dx[i * img..(i + 1) * img]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_small() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        assert_eq!(gemm(&a, &b, 2, 2, 2), vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect();
        let t = transpose(&a, 2, 3);
        assert_eq!(t, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
        assert_eq!(transpose(&t, 3, 2), a);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let d = ConvDims { c: 2, h: 4, w: 5, kh: 3, kw: 3, stride: 1, pad: 1, oh: 4, ow: 5 };
        let img: Vec<f32> = (0..40).map(|v| (v as f32 * 0.37).sin()).collect();
        let cols_probe: Vec<f32> = (0..d.patch() * d.out_pixels()).map(|v| (v as f32 * 0.11).cos()).collect();
        let mut cols = vec![0.0; cols_probe.len()];
        im2col(&img, &d, &mut cols);
        let lhs: f64 = cols.iter().zip(&cols_probe).map(|(a, b)| f64::from(a * b)).sum();
        let mut back = vec![0.0; img.len()];
        col2im_acc(&cols_probe, &d, &mut back);
        let rhs: f64 = img.iter().zip(&back).map(|(a, b)| f64::from(a * b)).sum();
        assert!((lhs - rhs).abs() < 1e-4);
    }
}
