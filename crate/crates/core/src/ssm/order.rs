use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::tensor::{BackwardCtx, Tensor};

/// Order in which spatial positions of a `[c, h, w]` map become sequence steps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanOrder {
    RowMajor,
    ColumnMajor,
}

impl ScanOrder {
    pub const ALL: [ScanOrder; 2] = [ScanOrder::RowMajor, ScanOrder::ColumnMajor];

    /// Spatial `(y, x)` position visited at each step.
    pub fn positions(self, h: usize, w: usize) -> Vec<(usize, usize)> {
        match self {
            ScanOrder::RowMajor => (0..h).flat_map(|y| (0..w).map(move |x| (y, x))).collect(),
            ScanOrder::ColumnMajor => (0..w).flat_map(|x| (0..h).map(move |y| (y, x))).collect(),
        }
    }
}

/// Gathers rows of `[n, c]` data by `perm` (output step `i` reads source `perm[i]`).
fn permute_rows(src: &Tensor, perm: Vec<usize>, c: usize, op: &'static str, shape: Vec<usize>) -> Tensor {
    let data: Vec<f64> = {
        let d = src.data();
        perm.iter()
            .flat_map(|&p| d[p * c..(p + 1) * c].iter().copied())
            .collect()
    };
    Tensor::from_op(
        op,
        shape,
        data,
        vec![src.clone()],
        Box::new(move |ctx: &BackwardCtx| {
            let mut g = vec![0.0; ctx.grad_out.len()];
            for (i, &p) in perm.iter().enumerate() {
                g[p * c..(p + 1) * c].copy_from_slice(&ctx.grad_out[i * c..(i + 1) * c]);
            }
            vec![Some(g)]
        }),
    )
}

/// `[c, h, w]` → `[h·w, c]` with steps in `order`.
pub fn featuremap_to_sequence(f: &Tensor, order: ScanOrder) -> Result<Tensor> {
    if f.ndim() != 3 {
        return Err(shape_err("featuremap_to_sequence", f.shape(), &[]));
    }
    let (c, h, w) = (f.dim(0), f.dim(1), f.dim(2));
    let rows = f.reshape(&[c, h * w])?.t()?; // row-major positions
    if order == ScanOrder::RowMajor {
        return Ok(rows);
    }
    let perm = order.positions(h, w).into_iter().map(|(y, x)| y * w + x).collect();
    Ok(permute_rows(&rows, perm, c, "scan_order", vec![h * w, c]))
}

/// Inverse of [`featuremap_to_sequence`].
pub fn sequence_to_featuremap(seq: &Tensor, order: ScanOrder, h: usize, w: usize) -> Result<Tensor> {
    if seq.ndim() != 2 || seq.dim(0) != h * w {
        return Err(shape_err("sequence_to_featuremap", seq.shape(), &[h * w]));
    }
    let c = seq.dim(1);
    let rows = if order == ScanOrder::RowMajor {
        seq.clone()
    } else {
        let mut inv = vec![0; h * w];
        for (step, (y, x)) in order.positions(h, w).into_iter().enumerate() {
            inv[y * w + x] = step;
        }
        permute_rows(seq, inv, c, "scan_order_inverse", vec![h * w, c])
    };
    rows.t()?.reshape(&[c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn row_major_visits_rows_first() {
        assert_eq!(
            ScanOrder::RowMajor.positions(2, 2),
            vec![(0, 0), (0, 1), (1, 0), (1, 1)]
        );
        assert_eq!(
            ScanOrder::ColumnMajor.positions(2, 2),
            vec![(0, 0), (1, 0), (0, 1), (1, 1)]
        );
    }

    #[test]
    fn flattening_reads_channels_per_position() {
        // c=2, h=1, w=2: position (0,1) holds [f[0,0,1], f[1,0,1]]
        let f = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 1, 2]).unwrap();
        let s = featuremap_to_sequence(&f, ScanOrder::RowMajor).unwrap();
        assert_eq!(s.to_vec(), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn round_trips_bitwise_every_order() {
        let mut rng = SeededRng::new(6);
        for &(c, h, w) in &[(1, 1, 1), (3, 2, 5), (4, 3, 3)] {
            let f = Tensor::new(rng.uniform_vec(c * h * w, -1.0, 1.0), &[c, h, w]).unwrap();
            for order in ScanOrder::ALL {
                let s = featuremap_to_sequence(&f, order).unwrap();
                assert_eq!(s.shape(), &[h * w, c]);
                let back = sequence_to_featuremap(&s, order, h, w).unwrap();
                assert_eq!(back.to_vec(), f.to_vec());
            }
        }
    }
}
