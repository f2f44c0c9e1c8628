//! Dense kernels for the hot loops of the integrators (column-major data).

use nalgebra::{DMatrix, DVector};

/// `M x`
pub(crate) fn mat_vec(m: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let rows = m.nrows();
    let mut out = vec![0.0; rows];
    let data = m.as_slice();
    let mut cols = data.chunks_exact(rows).zip(x.iter());
    loop {
        let Some((c0, &x0)) = cols.next() else { break };
        match (cols.next(), cols.next(), cols.next()) {
            (Some((c1, &x1)), Some((c2, &x2)), Some((c3, &x3))) => {
                for i in 0..rows {
                    out[i] += x0 * c0[i] + x1 * c1[i] + x2 * c2[i] + x3 * c3[i];
                }
            }
            (a, b, _) => {
                for (o, v) in out.iter_mut().zip(c0) {
                    *o += x0 * v;
                }
                for (c, xc) in [a, b].into_iter().flatten() {
                    for (o, v) in out.iter_mut().zip(c) {
                        *o += xc * v;
                    }
                }
                break;
            }
        }
    }
    DVector::from_vec(out)
}

/// `Mᵀ x`
pub(crate) fn mat_t_vec(m: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    let rows = m.nrows();
    let xs = x.as_slice();
    let out: Vec<f64> = m
        .as_slice()
        .chunks_exact(rows)
        .map(|col| dot(col, xs))
        .collect();
    DVector::from_vec(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (p, q) in ca.zip(cb) {
        acc[0] += p[0] * q[0];
        acc[1] += p[1] * q[1];
        acc[2] += p[2] * q[2];
        acc[3] += p[3] * q[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(p, q)| p * q).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `A B A` for a symmetric `n × n` matrix `A` and column-major `B`.
pub(crate) fn sandwich(a: &DMatrix<f64>, b: &[f64], out: &mut [f64]) {
    let n = a.nrows();
    let ad = a.as_slice();
    let mut tmp = vec![0.0; n * n];
    mul_into(ad, b, n, &mut tmp);
    out.fill(0.0);
    mul_into(&tmp, ad, n, out);
}

fn mul_into(a: &[f64], b: &[f64], n: usize, out: &mut [f64]) {
    for j in 0..n {
        let oc = &mut out[j * n..(j + 1) * n];
        for k in 0..n {
            let bkj = b[k + j * n];
            let ac = &a[k * n..(k + 1) * n];
            for (o, v) in oc.iter_mut().zip(ac) {
                *o += bkj * v;
            }
        }
    }
}
