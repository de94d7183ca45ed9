//! Structural similarity over a frames × dim matrix treated as a
//! single-channel image, with a uniform window and stride 1.
//!
//! Stabilizers are `C1 = (0.01 R)²` and `C2 = (0.03 R)²` with `R` the dynamic
//! range (max - min) of the *target*. A constant target has `R = 0`; `R = 1`
//! is used instead so the index stays defined.

use super::graph::{Graph, Tensor, Var};

pub const SSIM_WINDOW: usize = 8;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;

/// Window extent actually used for a `rows × cols` input.
pub fn window_for(rows: usize, cols: usize) -> (usize, usize) {
    (SSIM_WINDOW.min(rows), SSIM_WINDOW.min(cols))
}

pub fn dynamic_range(target: &Tensor) -> f64 {
    let (lo, hi) = target
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let r = hi - lo;
    if r > 0.0 { r } else { 1.0 }
}

/// Mean SSIM between `pred` (on the tape) and a constant `target`.
pub fn ssim_graph(g: &mut Graph, pred: Var, target: &Tensor) -> Var {
    let r = dynamic_range(target);
    let (c1, c2) = ((K1 * r).powi(2), (K2 * r).powi(2));
    let (wr, wc) = window_for(target.rows, target.cols);
    assert_eq!(g.value(pred).shape(), target.shape(), "ssim shape mismatch");

    let x = pred;
    let y = g.input(target.clone());
    let mu_x = g.window_mean(x, wr, wc);
    let mu_y = g.window_mean(y, wr, wc);
    let xx = g.mul(x, x);
    let yy = g.mul(y, y);
    let xy = g.mul(x, y);
    let e_xx = g.window_mean(xx, wr, wc);
    let e_yy = g.window_mean(yy, wr, wc);
    let e_xy = g.window_mean(xy, wr, wc);

    let mu_x2 = g.mul(mu_x, mu_x);
    let mu_y2 = g.mul(mu_y, mu_y);
    let mu_xy = g.mul(mu_x, mu_y);
    let var_x = g.sub(e_xx, mu_x2);
    let var_y = g.sub(e_yy, mu_y2);
    let cov = g.sub(e_xy, mu_xy);

    let a = g.scale(mu_xy, 2.0);
    let a = g.add_scalar(a, c1);
    let b = g.scale(cov, 2.0);
    let b = g.add_scalar(b, c2);
    let num = g.mul(a, b);

    let c = g.add(mu_x2, mu_y2);
    let c = g.add_scalar(c, c1);
    let d = g.add(var_x, var_y);
    let d = g.add_scalar(d, c2);
    let den = g.mul(c, d);

    let map = g.div(num, den);
    g.mean(map)
}

pub fn ssim(pred: &Tensor, target: &Tensor) -> f64 {
    let mut g = Graph::new();
    let x = g.input(pred.clone());
    let s = ssim_graph(&mut g, x, target);
    g.value(s).data[0]
}
