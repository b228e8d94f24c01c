use crate::error::{shape_err, Result};
use crate::tensor::{flops, BackwardCtx, Tensor};

/// Bilinear interpolation setup along one axis of length `n`.
///
/// Coordinates are clamped to `[0, n-1]`; a clamped coordinate has zero
/// derivative. The lower cell is `floor(x)` capped at `n-2`, so the last grid
/// line is reached with fraction 1 from the left cell.
#[derive(Clone, Copy)]
struct AxisTap {
    lo: usize,
    hi: usize,
    frac: f64,
    inside: bool,
}

fn axis_tap(x: f64, n: usize) -> AxisTap {
    let max = (n - 1) as f64;
    let inside = (0.0..=max).contains(&x);
    let xc = x.clamp(0.0, max);
    if n == 1 {
        return AxisTap {
            lo: 0,
            hi: 0,
            frac: 0.0,
            inside: false,
        };
    }
    let lo = (xc.floor() as usize).min(n - 2);
    AxisTap {
        lo,
        hi: lo + 1,
        frac: xc - lo as f64,
        inside,
    }
}

/// Samples `f[c,h,w]` at continuous pixel coordinates `points[J,2]` given as
/// `(x, y)`; returns `[J, c]`. Differentiable in both the map and the points.
pub fn grid_sample(f: &Tensor, points: &Tensor) -> Result<Tensor> {
    let fs = f.shape();
    let ps = points.shape();
    if fs.len() != 3 || ps.len() != 2 || ps[1] != 2 {
        return Err(shape_err("grid_sample", fs, ps));
    }
    let (c, h, w) = (fs[0], fs[1], fs[2]);
    let j = ps[0];
    let taps: Vec<(AxisTap, AxisTap)> = points
        .data()
        .chunks(2)
        .map(|p| (axis_tap(p[0], w), axis_tap(p[1], h)))
        .collect();
    let fd = f.data();
    let mut out = vec![0.0; j * c];
    for (pi, (tx, ty)) in taps.iter().enumerate() {
        let (fx, fy) = (tx.frac, ty.frac);
        for ch in 0..c {
            let at = |y: usize, x: usize| fd[(ch * h + y) * w + x];
            out[pi * c + ch] = (1.0 - fx) * (1.0 - fy) * at(ty.lo, tx.lo)
                + fx * (1.0 - fy) * at(ty.lo, tx.hi)
                + (1.0 - fx) * fy * at(ty.hi, tx.lo)
                + fx * fy * at(ty.hi, tx.hi);
        }
    }
    drop(fd);
    flops::record(flops::grid_sample(j, c));
    Ok(Tensor::from_op(
        "grid_sample",
        vec![j, c],
        out,
        vec![f.clone(), points.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let g = ctx.grad_out;
            let fd = ctx.inputs[0].data();
            let mut gf = ctx.needs(0).then(|| vec![0.0; c * h * w]);
            let mut gp = ctx.needs(1).then(|| vec![0.0; j * 2]);
            for (pi, (tx, ty)) in taps.iter().enumerate() {
                let (fx, fy) = (tx.frac, ty.frac);
                for ch in 0..c {
                    let go = g[pi * c + ch];
                    let idx = |y: usize, x: usize| (ch * h + y) * w + x;
                    if let Some(gf) = gf.as_mut() {
                        gf[idx(ty.lo, tx.lo)] += go * (1.0 - fx) * (1.0 - fy);
                        gf[idx(ty.lo, tx.hi)] += go * fx * (1.0 - fy);
                        gf[idx(ty.hi, tx.lo)] += go * (1.0 - fx) * fy;
                        gf[idx(ty.hi, tx.hi)] += go * fx * fy;
                    }
                    if let Some(gp) = gp.as_mut() {
                        let (v00, v01) = (fd[idx(ty.lo, tx.lo)], fd[idx(ty.lo, tx.hi)]);
                        let (v10, v11) = (fd[idx(ty.hi, tx.lo)], fd[idx(ty.hi, tx.hi)]);
                        if tx.inside {
                            gp[pi * 2] += go * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                        }
                        if ty.inside {
                            gp[pi * 2 + 1] += go * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
                        }
                    }
                }
            }
            vec![gf, gp]
        }),
    ))
}
