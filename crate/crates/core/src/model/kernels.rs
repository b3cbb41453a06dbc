//! Small dense kernels over flat parameter slices.
//!
//! Weight matrices live row-major inside the flat theta vector, so all
//! forward/backward passes work on `&[f64]` windows of it.

/// out = W x, W is rows x cols row-major.
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for (j, o) in out.iter_mut().enumerate() {
        let row = &w[j * cols..(j + 1) * cols];
        let mut acc = 0.0;
        for (a, b) in row.iter().zip(x.iter()) {
            acc = a.mul_add(*b, acc);
        }
        *o = acc;
    }
}

/// out = W^T y, W is rows x cols row-major.
pub fn matvec_t(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    out.fill(0.0);
    for (j, yj) in y.iter().enumerate() {
        if *yj == 0.0 {
            continue;
        }
        let row = &w[j * cols..(j + 1) * cols];
        for (o, a) in out.iter_mut().zip(row.iter()) {
            *o = a.mul_add(*yj, *o);
        }
    }
}

/// dw += dy x^T, dw is rows x cols row-major.
pub fn outer_acc(dw: &mut [f64], rows: usize, cols: usize, dy: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), rows * cols);
    debug_assert_eq!(dy.len(), rows);
    debug_assert_eq!(x.len(), cols);
    for (j, dyj) in dy.iter().enumerate() {
        if *dyj == 0.0 {
            continue;
        }
        let row = &mut dw[j * cols..(j + 1) * cols];
        for (o, xi) in row.iter_mut().zip(x.iter()) {
            *o = dyj.mul_add(*xi, *o);
        }
    }
}

/// out += a * v elementwise.
pub fn axpy(out: &mut [f64], a: f64, v: &[f64]) {
    debug_assert_eq!(out.len(), v.len());
    for (o, x) in out.iter_mut().zip(v.iter()) {
        *o = a.mul_add(*x, *o);
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc = x.mul_add(*y, acc);
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_hand_computation() {
        // W = [[1,2],[3,4],[5,6]], x = [1,-1]
        let w = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let mut out = [0.0; 3];
        matvec(&w, 3, 2, &[1.0, -1.0], &mut out);
        assert_eq!(out, [-1.0, -1.0, -1.0]);

        let mut tout = [0.0; 2];
        matvec_t(&w, 3, 2, &[1.0, 0.0, -1.0], &mut tout);
        assert_eq!(tout, [-4.0, -4.0]);
    }

    #[test]
    fn outer_acc_accumulates() {
        let mut dw = [1.0, 0.0, 0.0, 0.0];
        outer_acc(&mut dw, 2, 2, &[2.0, 3.0], &[1.0, -1.0]);
        assert_eq!(dw, [3.0, -2.0, 3.0, -3.0]);
    }
}
