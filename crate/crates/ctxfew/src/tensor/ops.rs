//! Graph operations: forward kernels and their backward closures.
//!
//! Forward math is f32 (GEMMs via `matrixmultiply::sgemm`); backward math is
//! f64 end to end (`dgemm`, f64 accumulators). Reductions use pairwise
//! summation. Every output is checked for non-finite values by `push_op`.

use super::graph::{BackwardArgs, Graph, Var};
use super::{numel, pairwise_sum, pairwise_sum_f32};
use crate::error::{Error, Result};

pub(crate) fn widen(xs: &[f32]) -> Vec<f64> {
    xs.iter().map(|&v| v as f64).collect()
}

impl Graph {
    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    // ----- elementwise -----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        self.push_op(
            "add",
            self.shape(a).to_vec(),
            data,
            vec![a.0, b.0],
            Box::new(|args: &BackwardArgs| {
                vec![
                    args.needs[0].then(|| args.out_grad.to_vec()),
                    args.needs[1].then(|| args.out_grad.to_vec()),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        self.push_op(
            "sub",
            self.shape(a).to_vec(),
            data,
            vec![a.0, b.0],
            Box::new(|args: &BackwardArgs| {
                vec![
                    args.needs[0].then(|| args.out_grad.to_vec()),
                    args.needs[1].then(|| args.out_grad.iter().map(|g| -g).collect()),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        self.push_op(
            "mul",
            self.shape(a).to_vec(),
            data,
            vec![a.0, b.0],
            Box::new(|args: &BackwardArgs| {
                let (_, a_data) = args.inputs[0];
                let (_, b_data) = args.inputs[1];
                vec![
                    args.needs[0].then(|| {
                        args.out_grad.iter().zip(b_data).map(|(g, &v)| g * v as f64).collect()
                    }),
                    args.needs[1].then(|| {
                        args.out_grad.iter().zip(a_data).map(|(g, &v)| g * v as f64).collect()
                    }),
                ]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x * c).collect();
        let c64 = c as f64;
        self.push_op(
            "scale",
            self.shape(a).to_vec(),
            data,
            vec![a.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| args.out_grad.iter().map(|g| g * c64).collect())]
            }),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Result<Var> {
        let data = self.data(a).iter().map(|x| x + c).collect();
        self.push_op(
            "add_scalar",
            self.shape(a).to_vec(),
            data,
            vec![a.0],
            Box::new(|args: &BackwardArgs| vec![args.needs[0].then(|| args.out_grad.to_vec())]),
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        self.push_op(
            "relu",
            self.shape(a).to_vec(),
            data,
            vec![a.0],
            Box::new(|args: &BackwardArgs| {
                let (_, x) = args.inputs[0];
                vec![args.needs[0].then(|| {
                    args.out_grad
                        .iter()
                        .zip(x)
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect()
                })]
            }),
        )
    }

    // ----- shape -----

    /// Numel-preserving reinterpretation of the data.
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.data(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?} changes element count", self.shape(a), shape),
            ));
        }
        self.push_op(
            "reshape",
            shape.to_vec(),
            self.data(a).to_vec(),
            vec![a.0],
            Box::new(|args: &BackwardArgs| vec![args.needs[0].then(|| args.out_grad.to_vec())]),
        )
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        self.check_rank("transpose2d", a, 2)?;
        let (r, c) = (self.shape(a)[0], self.shape(a)[1]);
        let src = self.data(a);
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push_op(
            "transpose2d",
            vec![c, r],
            data,
            vec![a.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let mut g = vec![0.0f64; r * c];
                    for j in 0..c {
                        for i in 0..r {
                            g[i * c + j] = args.out_grad[j * r + i];
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// Gathers rows of a 2D tensor (duplicates allowed); backward scatter-adds.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        self.check_rank("select_rows", a, 2)?;
        let (n, d) = (self.shape(a)[0], self.shape(a)[1]);
        if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::shape("select_rows", format!("row {bad} out of {n}")));
        }
        let src = self.data(a);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let rows = rows.to_vec();
        let (k, nd) = (rows.len(), n * d);
        self.push_op(
            "select_rows",
            vec![k, d],
            data,
            vec![a.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let mut g = vec![0.0f64; nd];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..d {
                            g[r * d + j] += args.out_grad[i * d + j];
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// One element per row: out[i] = a[i, cols[i]].
    pub fn pick_cols(&mut self, a: Var, cols: &[usize]) -> Result<Var> {
        self.check_rank("pick_cols", a, 2)?;
        let (n, c) = (self.shape(a)[0], self.shape(a)[1]);
        if cols.len() != n {
            return Err(Error::shape("pick_cols", format!("{} indices for {n} rows", cols.len())));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::shape("pick_cols", format!("column {bad} out of {c}")));
        }
        let src = self.data(a);
        let data: Vec<f32> = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let cols = cols.to_vec();
        self.push_op(
            "pick_cols",
            vec![n],
            data,
            vec![a.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let mut g = vec![0.0f64; n * c];
                    for (i, &j) in cols.iter().enumerate() {
                        g[i * c + j] = args.out_grad[i];
                    }
                    g
                })]
            }),
        )
    }

    /// Stacks 2D inputs with equal column counts along rows.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::shape("concat_rows", "no inputs".to_string()));
        }
        for &x in xs {
            self.check_rank("concat_rows", x, 2)?;
        }
        let d = self.shape(xs[0])[1];
        let mut data = Vec::new();
        let mut row_counts = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.shape(x)[1] != d {
                return Err(Error::shape(
                    "concat_rows",
                    format!("column mismatch: {} vs {}", self.shape(x)[1], d),
                ));
            }
            row_counts.push(self.shape(x)[0]);
            data.extend_from_slice(self.data(x));
        }
        let total: usize = row_counts.iter().sum();
        self.push_op(
            "concat_rows",
            vec![total, d],
            data,
            xs.iter().map(|v| v.0).collect(),
            Box::new(move |args: &BackwardArgs| {
                let mut out = Vec::with_capacity(row_counts.len());
                let mut off = 0;
                for (i, &r) in row_counts.iter().enumerate() {
                    let len = r * d;
                    out.push(args.needs[i].then(|| args.out_grad[off..off + len].to_vec()));
                    off += len;
                }
                out
            }),
        )
    }

    /// Assembles one-element nodes into an [rows, cols] matrix (row-major).
    pub fn stack_scalars(&mut self, xs: &[Var], rows: usize, cols: usize) -> Result<Var> {
        if xs.len() != rows * cols {
            return Err(Error::shape(
                "stack_scalars",
                format!("{} inputs for {rows}x{cols}", xs.len()),
            ));
        }
        let mut data = Vec::with_capacity(xs.len());
        for &x in xs {
            if self.data(x).len() != 1 {
                return Err(Error::shape(
                    "stack_scalars",
                    format!("input must be scalar, got {:?}", self.shape(x)),
                ));
            }
            data.push(self.data(x)[0]);
        }
        self.push_op(
            "stack_scalars",
            vec![rows, cols],
            data,
            xs.iter().map(|v| v.0).collect(),
            Box::new(|args: &BackwardArgs| {
                (0..args.needs.len())
                    .map(|i| args.needs[i].then(|| vec![args.out_grad[i]]))
                    .collect()
            }),
        )
    }

    /// Feature map of image `b` as position-major rows: out[(h*W + w), c].
    pub fn image_rows(&mut self, x: Var, b: usize) -> Result<Var> {
        self.check_rank("image_rows", x, 4)?;
        let s = self.shape(x).to_vec();
        let (bn, c, h, w) = (s[0], s[1], s[2], s[3]);
        if b >= bn {
            return Err(Error::shape("image_rows", format!("image {b} out of batch {bn}")));
        }
        let src = self.data(x);
        let hw = h * w;
        let mut data = vec![0.0f32; hw * c];
        let base = b * c * hw;
        for ci in 0..c {
            for p in 0..hw {
                data[p * c + ci] = src[base + ci * hw + p];
            }
        }
        let total = bn * c * hw;
        self.push_op(
            "image_rows",
            vec![hw, c],
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let mut g = vec![0.0f64; total];
                    for ci in 0..c {
                        for p in 0..hw {
                            g[base + ci * hw + p] = args.out_grad[p * c + ci];
                        }
                    }
                    g
                })]
            }),
        )
    }

    // ----- matmul -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_rank("matmul", a, 2)?;
        self.check_rank("matmul", b, 2)?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let (k2, n) = (self.shape(b)[0], self.shape(b)[1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        let mut data = vec![0.0f32; m * n];
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                self.data(a).as_ptr(),
                k as isize,
                1,
                self.data(b).as_ptr(),
                n as isize,
                1,
                0.0,
                data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        self.push_op(
            "matmul",
            vec![m, n],
            data,
            vec![a.0, b.0],
            Box::new(move |args: &BackwardArgs| {
                let a64 = widen(args.inputs[0].1);
                let b64 = widen(args.inputs[1].1);
                let g = args.out_grad;
                let da = args.needs[0].then(|| {
                    // dA = G . B^T
                    let mut da = vec![0.0f64; m * k];
                    unsafe {
                        matrixmultiply::dgemm(
                            m,
                            n,
                            k,
                            1.0,
                            g.as_ptr(),
                            n as isize,
                            1,
                            b64.as_ptr(),
                            1,
                            n as isize,
                            0.0,
                            da.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    da
                });
                let db = args.needs[1].then(|| {
                    // dB = A^T . G
                    let mut db = vec![0.0f64; k * n];
                    unsafe {
                        matrixmultiply::dgemm(
                            k,
                            m,
                            n,
                            1.0,
                            a64.as_ptr(),
                            1,
                            k as isize,
                            g.as_ptr(),
                            n as isize,
                            1,
                            0.0,
                            db.as_mut_ptr(),
                            n as isize,
                            1,
                        );
                    }
                    db
                });
                vec![da, db]
            }),
        )
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let s = pairwise_sum_f32(self.data(a)) as f32;
        self.push_op(
            "sum_all",
            vec![],
            vec![s],
            vec![a.0],
            Box::new(|args: &BackwardArgs| {
                let n = args.inputs[0].1.len();
                vec![args.needs[0].then(|| vec![args.out_grad[0]; n])]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.data(a).len();
        if n == 0 {
            return Err(Error::shape("mean_all", "empty tensor".to_string()));
        }
        let s = (pairwise_sum_f32(self.data(a)) / n as f64) as f32;
        self.push_op(
            "mean_all",
            vec![],
            vec![s],
            vec![a.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| vec![args.out_grad[0] / n as f64; n])]
            }),
        )
    }

    /// Sum of squares, reduced to a scalar.
    pub fn sq_l2(&mut self, a: Var) -> Result<Var> {
        let sq: Vec<f64> = self.data(a).iter().map(|&v| (v as f64) * (v as f64)).collect();
        let s = pairwise_sum(&sq) as f32;
        self.push_op(
            "sq_l2",
            vec![],
            vec![s],
            vec![a.0],
            Box::new(|args: &BackwardArgs| {
                let (_, x) = args.inputs[0];
                let g = args.out_grad[0];
                vec![args.needs[0].then(|| x.iter().map(|&v| 2.0 * v as f64 * g).collect())]
            }),
        )
    }

    /// Mean over spatial positions: [B, C, H, W] -> [B, C].
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        self.check_rank("spatial_mean", x, 4)?;
        let s = self.shape(x).to_vec();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let hw = h * w;
        if hw == 0 {
            return Err(Error::shape("spatial_mean", "empty spatial grid".to_string()));
        }
        let src = self.data(x);
        let mut data = vec![0.0f32; b * c];
        for i in 0..b * c {
            data[i] = (pairwise_sum_f32(&src[i * hw..(i + 1) * hw]) / hw as f64) as f32;
        }
        self.push_op(
            "spatial_mean",
            vec![b, c],
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let mut g = vec![0.0f64; b * c * hw];
                    for i in 0..b * c {
                        let gi = args.out_grad[i] / hw as f64;
                        for p in 0..hw {
                            g[i * hw + p] = gi;
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// Column means of a 2D tensor: [N, D] -> [D].
    pub fn mean_axis0(&mut self, x: Var) -> Result<Var> {
        self.check_rank("mean_axis0", x, 2)?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        if n == 0 {
            return Err(Error::shape("mean_axis0", "no rows".to_string()));
        }
        let src = self.data(x);
        let mut lane = vec![0.0f32; n];
        let mut data = vec![0.0f32; d];
        for j in 0..d {
            for i in 0..n {
                lane[i] = src[i * d + j];
            }
            data[j] = (pairwise_sum_f32(&lane) / n as f64) as f32;
        }
        self.push_op(
            "mean_axis0",
            vec![d],
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let mut g = vec![0.0f64; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            g[i * d + j] = args.out_grad[j] / n as f64;
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// Contiguous slice along axis 0: rows start..start+len of the outermost axis.
    pub fn narrow0(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() {
            return Err(Error::shape("narrow0", "scalar has no axis 0".to_string()));
        }
        if start + len > shape[0] || len == 0 {
            return Err(Error::shape(
                "narrow0",
                format!("slice {start}..{} out of {} rows", start + len, shape[0]),
            ));
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape.clone();
        out_shape[0] = len;
        self.push_op(
            "narrow0",
            out_shape,
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let (xs, _) = args.inputs[0];
                    let total: usize = xs.iter().product();
                    let mut g = vec![0.0f64; total];
                    g[start * inner..(start + len) * inner].copy_from_slice(args.out_grad);
                    g
                })]
            }),
        )
    }

    /// Sum of squares over consecutive row blocks: [R, D] with R = B·rows_per_block
    /// yields [B], entry b = sum of x[r,:]^2 over the b-th block of rows.
    pub fn block_row_sq_norm(&mut self, x: Var, rows_per_block: usize) -> Result<Var> {
        self.check_rank("block_row_sq_norm", x, 2)?;
        let (r, d) = (self.shape(x)[0], self.shape(x)[1]);
        if rows_per_block == 0 || r % rows_per_block != 0 {
            return Err(Error::shape(
                "block_row_sq_norm",
                format!("{r} rows not divisible into blocks of {rows_per_block}"),
            ));
        }
        let blocks = r / rows_per_block;
        let span = rows_per_block * d;
        let src = self.data(x);
        let mut data = vec![0.0f32; blocks];
        let mut sq = vec![0.0f64; span];
        for b in 0..blocks {
            for (i, &v) in src[b * span..(b + 1) * span].iter().enumerate() {
                sq[i] = (v as f64) * (v as f64);
            }
            data[b] = pairwise_sum(&sq) as f32;
        }
        self.push_op(
            "block_row_sq_norm",
            vec![blocks],
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let (_, x) = args.inputs[0];
                    let mut g = vec![0.0f64; x.len()];
                    for b in 0..blocks {
                        let gb = args.out_grad[b];
                        for i in b * span..(b + 1) * span {
                            g[i] = 2.0 * x[i] as f64 * gb;
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// All-pairs squared Euclidean distances between rows: [N, D] x [M, D] -> [N, M].
    pub fn pairwise_sq_dists(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_rank("pairwise_sq_dists", a, 2)?;
        self.check_rank("pairwise_sq_dists", b, 2)?;
        let (n, d) = (self.shape(a)[0], self.shape(a)[1]);
        let (m, d2) = (self.shape(b)[0], self.shape(b)[1]);
        if d != d2 {
            return Err(Error::shape("pairwise_sq_dists", format!("dims {d} vs {d2}")));
        }
        let (xa, xb) = (self.data(a), self.data(b));
        let mut data = vec![0.0f32; n * m];
        let mut sq = vec![0.0f64; d];
        for i in 0..n {
            for j in 0..m {
                for k in 0..d {
                    let diff = xa[i * d + k] as f64 - xb[j * d + k] as f64;
                    sq[k] = diff * diff;
                }
                data[i * m + j] = pairwise_sum(&sq) as f32;
            }
        }
        self.push_op(
            "pairwise_sq_dists",
            vec![n, m],
            data,
            vec![a.0, b.0],
            Box::new(move |args: &BackwardArgs| {
                let (_, xa) = args.inputs[0];
                let (_, xb) = args.inputs[1];
                let mut ga = args.needs[0].then(|| vec![0.0f64; xa.len()]);
                let mut gb = args.needs[1].then(|| vec![0.0f64; xb.len()]);
                for i in 0..n {
                    for j in 0..m {
                        let g = args.out_grad[i * m + j];
                        if g == 0.0 {
                            continue;
                        }
                        for k in 0..d {
                            let diff = xa[i * d + k] as f64 - xb[j * d + k] as f64;
                            if let Some(ga) = ga.as_mut() {
                                ga[i * d + k] += 2.0 * diff * g;
                            }
                            if let Some(gb) = gb.as_mut() {
                                gb[j * d + k] -= 2.0 * diff * g;
                            }
                        }
                    }
                }
                vec![ga, gb]
            }),
        )
    }

    // ----- softmax family -----

    /// Max-subtracted softmax along `axis` of a 1D or 2D tensor.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (data, _) = self.softmax_forward("softmax", x, axis, false)?;
        let lanes = lane_spec(self.shape(x), axis)?;
        self.push_op(
            "softmax",
            self.shape(x).to_vec(),
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let y = args.out_data;
                    let mut g = vec![0.0f64; y.len()];
                    let mut ybuf = vec![0.0f64; lanes.len];
                    let mut gbuf = vec![0.0f64; lanes.len];
                    for lane in 0..lanes.count {
                        let start = lanes.start(lane);
                        for i in 0..lanes.len {
                            let idx = start + i * lanes.stride;
                            ybuf[i] = y[idx] as f64;
                            gbuf[i] = args.out_grad[idx];
                        }
                        let dot: Vec<f64> =
                            ybuf.iter().zip(&gbuf).map(|(a, b)| a * b).collect();
                        let dot = pairwise_sum(&dot);
                        for i in 0..lanes.len {
                            g[start + i * lanes.stride] = ybuf[i] * (gbuf[i] - dot);
                        }
                    }
                    g
                })]
            }),
        )
    }

    /// Max-subtracted log-softmax along `axis` of a 1D or 2D tensor.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (data, _) = self.softmax_forward("log_softmax", x, axis, true)?;
        let lanes = lane_spec(self.shape(x), axis)?;
        self.push_op(
            "log_softmax",
            self.shape(x).to_vec(),
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let y = args.out_data; // log-probabilities
                    let mut g = vec![0.0f64; y.len()];
                    let mut gbuf = vec![0.0f64; lanes.len];
                    for lane in 0..lanes.count {
                        let start = lanes.start(lane);
                        for i in 0..lanes.len {
                            gbuf[i] = args.out_grad[start + i * lanes.stride];
                        }
                        let gsum = pairwise_sum(&gbuf);
                        for i in 0..lanes.len {
                            let idx = start + i * lanes.stride;
                            g[idx] = gbuf[i] - (y[idx] as f64).exp() * gsum;
                        }
                    }
                    g
                })]
            }),
        )
    }

    fn softmax_forward(
        &self,
        op: &'static str,
        x: Var,
        axis: usize,
        log: bool,
    ) -> Result<(Vec<f32>, LaneSpec)> {
        let lanes = lane_spec(self.shape(x), axis)
            .map_err(|_| Error::shape(op, format!("axis {axis} of {:?}", self.shape(x))))?;
        let src = self.data(x);
        let mut out = vec![0.0f32; src.len()];
        let mut buf = vec![0.0f64; lanes.len];
        for lane in 0..lanes.count {
            let start = lanes.start(lane);
            let mut max = f32::NEG_INFINITY;
            for i in 0..lanes.len {
                max = max.max(src[start + i * lanes.stride]);
            }
            for i in 0..lanes.len {
                buf[i] = ((src[start + i * lanes.stride] - max) as f64).exp();
            }
            let denom = pairwise_sum(&buf);
            for i in 0..lanes.len {
                let idx = start + i * lanes.stride;
                out[idx] = if log {
                    ((src[idx] - max) as f64 - denom.ln()) as f32
                } else {
                    (buf[i] / denom) as f32
                };
            }
        }
        Ok((out, lanes))
    }

    /// Row-normalizes a 2D tensor to unit L2 norm; errors on a zero-norm row.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        self.check_rank("l2_normalize_rows", x, 2)?;
        let (n, d) = (self.shape(x)[0], self.shape(x)[1]);
        let src = self.data(x);
        let mut norms = vec![0.0f64; n];
        let mut data = vec![0.0f32; n * d];
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let sq: Vec<f64> = row.iter().map(|&v| (v as f64) * (v as f64)).collect();
            let norm = pairwise_sum(&sq).sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(format!(
                    "l2_normalize_rows: row {i} has zero norm"
                )));
            }
            norms[i] = norm;
            for j in 0..d {
                data[i * d + j] = (row[j] as f64 / norm) as f32;
            }
        }
        self.push_op(
            "l2_normalize_rows",
            vec![n, d],
            data,
            vec![x.0],
            Box::new(move |args: &BackwardArgs| {
                vec![args.needs[0].then(|| {
                    let y = args.out_data;
                    let mut g = vec![0.0f64; n * d];
                    for i in 0..n {
                        let gy = &args.out_grad[i * d..(i + 1) * d];
                        let yy: Vec<f64> = y[i * d..(i + 1) * d].iter().map(|&v| v as f64).collect();
                        let prods: Vec<f64> = gy.iter().zip(&yy).map(|(a, b)| a * b).collect();
                        let dot = pairwise_sum(&prods);
                        for j in 0..d {
                            g[i * d + j] = (gy[j] - yy[j] * dot) / norms[i];
                        }
                    }
                    g
                })]
            }),
        )
    }
}

/// Lane addressing for 1D/2D axis reductions.
#[derive(Clone, Copy)]
struct LaneSpec {
    count: usize,
    len: usize,
    stride: usize,
    lane_step: usize,
}

impl LaneSpec {
    fn start(&self, lane: usize) -> usize {
        lane * self.lane_step
    }
}

fn lane_spec(shape: &[usize], axis: usize) -> Result<LaneSpec> {
    match (shape.len(), axis) {
        (1, 0) => Ok(LaneSpec { count: 1, len: shape[0], stride: 1, lane_step: 0 }),
        (2, 0) => Ok(LaneSpec { count: shape[1], len: shape[0], stride: shape[1], lane_step: 1 }),
        (2, 1) => Ok(LaneSpec { count: shape[0], len: shape[1], stride: 1, lane_step: shape[1] }),
        _ => Err(Error::shape("lane_spec", format!("axis {axis} of {shape:?}"))),
    }
}

// ----- batch norm -----

/// Per-channel batch statistics computed by `batch_norm_batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct BnBatchStats {
    pub mean: Vec<f32>,
    /// Biased (population) variance.
    pub var: Vec<f32>,
}

impl Graph {
    /// Batch-statistics normalization of [B, C, H, W] with per-channel affine
    /// params. Returns the batch stats so the caller can maintain EMA buffers.
    /// Output is symmetric under batch permutation: stats pool over (B, H, W).
    pub fn batch_norm_batch(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
    ) -> Result<(Var, BnBatchStats)> {
        let (b, c, h, w) = self.bn_check("batch_norm", x, gamma, beta)?;
        let hw = h * w;
        let n = b * hw;
        let src = self.data(x);
        let mut lane = vec![0.0f32; n];
        let mut mean64 = vec![0.0f64; c];
        let mut invstd64 = vec![0.0f64; c];
        let mut stats = BnBatchStats { mean: vec![0.0; c], var: vec![0.0; c] };
        for ci in 0..c {
            gather_channel(src, &mut lane, b, c, hw, ci);
            let mu = pairwise_sum_f32(&lane) / n as f64;
            let devs: Vec<f64> = lane.iter().map(|&v| (v as f64 - mu) * (v as f64 - mu)).collect();
            let var = pairwise_sum(&devs) / n as f64;
            mean64[ci] = mu;
            invstd64[ci] = 1.0 / (var + eps as f64).sqrt();
            stats.mean[ci] = mu as f32;
            stats.var[ci] = var as f32;
        }
        let gamma_v = self.data(gamma).to_vec();
        let beta_v = self.data(beta).to_vec();
        let mut data = vec![0.0f32; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let (mu, istd) = (mean64[ci], invstd64[ci]);
                let (ga, be) = (gamma_v[ci] as f64, beta_v[ci] as f64);
                for p in 0..hw {
                    let xh = (src[off + p] as f64 - mu) * istd;
                    data[off + p] = (ga * xh + be) as f32;
                }
            }
        }
        let out = self.push_op(
            "batch_norm",
            vec![b, c, h, w],
            data,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |args: &BackwardArgs| {
                let x = args.inputs[0].1;
                let gamma = args.inputs[1].1;
                let g = args.out_grad;
                let mut dx = args.needs[0].then(|| vec![0.0f64; x.len()]);
                let mut dgamma = args.needs[1].then(|| vec![0.0f64; c]);
                let mut dbeta = args.needs[2].then(|| vec![0.0f64; c]);
                let mut gbuf = vec![0.0f64; n];
                let mut xhbuf = vec![0.0f64; n];
                for ci in 0..c {
                    let (mu, istd) = (mean64[ci], invstd64[ci]);
                    let mut idx = 0;
                    for bi in 0..b {
                        let off = (bi * c + ci) * hw;
                        for p in 0..hw {
                            gbuf[idx] = g[off + p];
                            xhbuf[idx] = (x[off + p] as f64 - mu) * istd;
                            idx += 1;
                        }
                    }
                    let s1 = pairwise_sum(&gbuf);
                    let prods: Vec<f64> = gbuf.iter().zip(&xhbuf).map(|(a, b)| a * b).collect();
                    let s2 = pairwise_sum(&prods);
                    if let Some(dbeta) = dbeta.as_mut() {
                        dbeta[ci] = s1;
                    }
                    if let Some(dgamma) = dgamma.as_mut() {
                        dgamma[ci] = s2;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let ga = gamma[ci] as f64;
                        let coef = ga * istd;
                        let m1 = s1 / n as f64;
                        let m2 = s2 / n as f64;
                        let mut idx = 0;
                        for bi in 0..b {
                            let off = (bi * c + ci) * hw;
                            for p in 0..hw {
                                dx[off + p] = coef * (gbuf[idx] - m1 - xhbuf[idx] * m2);
                                idx += 1;
                            }
                        }
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        )?;
        Ok((out, stats))
    }

    /// Normalization with fixed (running or captured) statistics. Gradients
    /// treat the statistics as constants.
    pub fn batch_norm_running(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f32,
        mean: &[f32],
        var: &[f32],
    ) -> Result<Var> {
        let (b, c, h, w) = self.bn_check("batch_norm_running", x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batch_norm_running",
                format!("stats length {}/{} for {c} channels", mean.len(), var.len()),
            ));
        }
        if var.iter().any(|&v| !(v + eps).is_finite() || v + eps <= 0.0) {
            return Err(Error::Numeric("batch_norm_running: non-positive variance".into()));
        }
        let hw = h * w;
        let mean64: Vec<f64> = mean.iter().map(|&v| v as f64).collect();
        let invstd64: Vec<f64> =
            var.iter().map(|&v| 1.0 / ((v as f64) + eps as f64).sqrt()).collect();
        let gamma_v = self.data(gamma).to_vec();
        let beta_v = self.data(beta).to_vec();
        let src = self.data(x);
        let mut data = vec![0.0f32; src.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * hw;
                let (mu, istd) = (mean64[ci], invstd64[ci]);
                let (ga, be) = (gamma_v[ci] as f64, beta_v[ci] as f64);
                for p in 0..hw {
                    data[off + p] = (ga * (src[off + p] as f64 - mu) * istd + be) as f32;
                }
            }
        }
        self.push_op(
            "batch_norm_running",
            vec![b, c, h, w],
            data,
            vec![x.0, gamma.0, beta.0],
            Box::new(move |args: &BackwardArgs| {
                let x = args.inputs[0].1;
                let gamma = args.inputs[1].1;
                let g = args.out_grad;
                let mut dx = args.needs[0].then(|| vec![0.0f64; x.len()]);
                let mut dgamma = args.needs[1].then(|| vec![0.0f64; c]);
                let mut dbeta = args.needs[2].then(|| vec![0.0f64; c]);
                let n = b * hw;
                let mut buf = vec![0.0f64; n];
                for ci in 0..c {
                    let (mu, istd) = (mean64[ci], invstd64[ci]);
                    let ga = gamma[ci] as f64;
                    if let Some(dx) = dx.as_mut() {
                        for bi in 0..b {
                            let off = (bi * c + ci) * hw;
                            for p in 0..hw {
                                dx[off + p] = g[off + p] * ga * istd;
                            }
                        }
                    }
                    if let Some(dbeta) = dbeta.as_mut() {
                        let mut idx = 0;
                        for bi in 0..b {
                            let off = (bi * c + ci) * hw;
                            for p in 0..hw {
                                buf[idx] = g[off + p];
                                idx += 1;
                            }
                        }
                        dbeta[ci] = pairwise_sum(&buf);
                    }
                    if let Some(dgamma) = dgamma.as_mut() {
                        let mut idx = 0;
                        for bi in 0..b {
                            let off = (bi * c + ci) * hw;
                            for p in 0..hw {
                                buf[idx] = g[off + p] * (x[off + p] as f64 - mu) * istd;
                                idx += 1;
                            }
                        }
                        dgamma[ci] = pairwise_sum(&buf);
                    }
                }
                vec![dx, dgamma, dbeta]
            }),
        )
    }

    fn bn_check(
        &self,
        op: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
    ) -> Result<(usize, usize, usize, usize)> {
        self.check_rank(op, x, 4)?;
        let s = self.shape(x);
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                op,
                format!(
                    "gamma {:?} / beta {:?} for {c} channels",
                    self.shape(gamma),
                    self.shape(beta)
                ),
            ));
        }
        if b * h * w == 0 {
            return Err(Error::shape(op, "empty batch or spatial grid".to_string()));
        }
        Ok((b, c, h, w))
    }
}

fn gather_channel(src: &[f32], lane: &mut [f32], b: usize, c: usize, hw: usize, ci: usize) {
    let mut idx = 0;
    for bi in 0..b {
        let off = (bi * c + ci) * hw;
        lane[idx..idx + hw].copy_from_slice(&src[off..off + hw]);
        idx += hw;
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Graph, Tensor};

    fn leaf(g: &mut Graph, shape: &[usize], data: Vec<f32>) -> super::Var {
        g.leaf(&Tensor::from_vec(shape, data).unwrap().with_requires_grad(true))
    }

    fn assert_close(a: &[f32], b: &[f32], tol: f32) {
        assert_eq!(a.len(), b.len());
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            assert!((x - y).abs() <= tol, "element {i}: {x} vs {y}");
        }
    }

    #[test]
    fn matmul_matches_hand_computation() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = leaf(&mut g, &[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.data(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_rejects_inner_dim_mismatch() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 3], vec![0.0; 6]);
        let b = leaf(&mut g, &[2, 2], vec![0.0; 4]);
        assert!(g.matmul(a, b).is_err());
    }

    #[test]
    fn matmul_backward_matches_hand_computation() {
        // loss = sum(A.B) => dA = ones . B^T, dB = A^T . ones
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = leaf(&mut g, &[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = g.matmul(a, b).unwrap();
        let loss = g.sum_all(c).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[11.0, 15.0, 11.0, 15.0]);
        assert_eq!(g.grad(b).unwrap(), &[4.0, 4.0, 6.0, 6.0]);
    }

    #[test]
    fn softmax_of_zero_and_ln3_is_quarter_three_quarters() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2], vec![0.0, 3.0f32.ln()]);
        let y = g.softmax(x, 0).unwrap();
        assert_close(g.data(y), &[0.25, 0.75], 1e-6);
    }

    #[test]
    fn softmax_handles_large_logits_via_max_subtraction() {
        let mut g = Graph::new();
        // f32 ulp at 1000 is ~6e-5, so the shifted difference carries ~1e-5
        // of input error; the point is no overflow, not extra precision.
        let x = leaf(&mut g, &[2], vec![1000.0, 1000.0 + 3.0f32.ln()]);
        let y = g.softmax(x, 0).unwrap();
        assert_close(g.data(y), &[0.25, 0.75], 1e-4);
    }

    #[test]
    fn softmax_axis0_normalizes_columns() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], vec![0.0, 5.0, 0.0, 5.0]);
        let y = g.softmax(x, 0).unwrap();
        let d = g.data(y);
        assert_close(&[d[0] + d[2], d[1] + d[3]], &[1.0, 1.0], 1e-6);
        assert_close(&[d[0], d[2]], &[0.5, 0.5], 1e-6);
    }

    #[test]
    fn log_softmax_agrees_with_log_of_softmax() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3], vec![0.2, -1.4, 0.9]);
        let s = g.softmax(x, 0).unwrap();
        let ls = g.log_softmax(x, 0).unwrap();
        let expected: Vec<f32> = g.data(s).iter().map(|v| v.ln()).collect();
        assert_close(g.data(ls), &expected, 1e-6);
    }

    #[test]
    fn batch_norm_batch_normalizes_to_zero_mean_unit_var() {
        let mut g = Graph::new();
        // One channel, four values: mean 2.5, biased var 1.25.
        let x = leaf(&mut g, &[4, 1, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let ga = leaf(&mut g, &[1], vec![1.0]);
        let be = leaf(&mut g, &[1], vec![0.0]);
        let (y, stats) = g.batch_norm_batch(x, ga, be, 0.0).unwrap();
        assert_close(&stats.mean, &[2.5], 1e-6);
        assert_close(&stats.var, &[1.25], 1e-6);
        let istd = 1.0 / 1.25f32.sqrt();
        let expect: Vec<f32> = [-1.5, -0.5, 0.5, 1.5].iter().map(|d| d * istd).collect();
        assert_close(g.data(y), &expect, 1e-5);
    }

    #[test]
    fn batch_norm_running_is_pure_affine() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 1, 1, 2], vec![3.0, 5.0]);
        let ga = leaf(&mut g, &[1], vec![2.0]);
        let be = leaf(&mut g, &[1], vec![1.0]);
        let y = g.batch_norm_running(x, ga, be, 0.0, &[1.0], &[4.0]).unwrap();
        // y = 2*(x-1)/2 + 1 = x
        assert_close(g.data(y), &[3.0, 5.0], 1e-6);
    }

    #[test]
    fn batch_norm_batch_is_permutation_symmetric() {
        let vals = vec![0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        let perm = [4usize, 0, 5, 2, 1, 3];
        let run = |vals: &[f32]| -> Vec<f32> {
            let mut g = Graph::new();
            let x = leaf(&mut g, &[6, 1, 1, 1], vals.to_vec());
            let ga = leaf(&mut g, &[1], vec![1.3]);
            let be = leaf(&mut g, &[1], vec![-0.2]);
            let (y, _) = g.batch_norm_batch(x, ga, be, 1e-5).unwrap();
            g.data(y).to_vec()
        };
        let base = run(&vals);
        let permuted_vals: Vec<f32> = perm.iter().map(|&i| vals[i]).collect();
        let permuted_out = run(&permuted_vals);
        for (slot, &src) in perm.iter().enumerate() {
            assert_eq!(permuted_out[slot], base[src], "bitwise batch-stat symmetry");
        }
    }

    #[test]
    fn l2_normalize_rows_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        assert!(g.l2_normalize_rows(x).is_err());
    }

    #[test]
    fn l2_normalize_rows_gives_unit_rows() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2], vec![3.0, 4.0]);
        let y = g.l2_normalize_rows(x).unwrap();
        assert_close(g.data(y), &[0.6, 0.8], 1e-6);
    }

    #[test]
    fn select_rows_backward_scatter_adds_duplicates() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = g.select_rows(x, &[0, 0, 1]).unwrap();
        assert_eq!(g.data(y), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0, 2.0, 1.0, 1.0]);
    }

    #[test]
    fn pick_cols_selects_per_row_entries() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let y = g.pick_cols(x, &[2, 0]).unwrap();
        assert_eq!(g.data(y), &[3.0, 4.0]);
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn concat_rows_stacks_and_routes_gradients() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[1, 2], vec![1.0, 2.0]);
        let b = leaf(&mut g, &[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let y = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(y), &[3, 2]);
        let w = leaf(&mut g, &[3, 2], vec![1.0, 10.0, 100.0, 1000.0, 2.0, 3.0]);
        let p = g.mul(y, w).unwrap();
        let s = g.sum_all(p).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[1.0, 10.0]);
        assert_eq!(g.grad(b).unwrap(), &[100.0, 1000.0, 2.0, 3.0]);
    }

    #[test]
    fn image_rows_transposes_channel_major_to_position_major() {
        let mut g = Graph::new();
        // batch 2, channels 2, 1x2 grid; image 1 data: c0=[10,11], c1=[20,21]
        let x = leaf(
            &mut g,
            &[2, 2, 1, 2],
            vec![0.0, 1.0, 2.0, 3.0, 10.0, 11.0, 20.0, 21.0],
        );
        let r = g.image_rows(x, 1).unwrap();
        assert_eq!(g.shape(r), &[2, 2]);
        assert_eq!(g.data(r), &[10.0, 20.0, 11.0, 21.0]);
    }

    #[test]
    fn transpose_round_trips() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let t = g.transpose2d(x).unwrap();
        assert_eq!(g.shape(t), &[3, 2]);
        let tt = g.transpose2d(t).unwrap();
        assert_eq!(g.data(tt), g.data(x));
    }

    #[test]
    fn reductions_match_hand_values() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let s = g.sum_all(x).unwrap();
        let m = g.mean_all(x).unwrap();
        let q = g.sq_l2(x).unwrap();
        assert_eq!(g.value(s), 10.0);
        assert_eq!(g.value(m), 2.5);
        assert_eq!(g.value(q), 30.0);
        let c = g.mean_axis0(x).unwrap();
        assert_eq!(g.data(c), &[2.0, 3.0]);
    }

    #[test]
    fn spatial_mean_pools_over_grid() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[1, 2, 1, 2], vec![1.0, 3.0, 10.0, 30.0]);
        let y = g.spatial_mean(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2]);
        assert_eq!(g.data(y), &[2.0, 20.0]);
    }

    #[test]
    fn block_row_sq_norm_sums_per_block() {
        let mut g = Graph::new();
        // Two blocks of two rows each, D=2.
        let x = leaf(&mut g, &[4, 2], vec![1.0, 2.0, 3.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let y = g.block_row_sq_norm(x, 2).unwrap();
        assert_eq!(g.shape(y), &[2]);
        assert_eq!(g.data(y), &[14.0, 3.0]);
        // d/dx of sum(y) is 2x.
        let s = g.sum_all(y).unwrap();
        g.backward(s).unwrap();
        let grad = g.grad(x).unwrap();
        for (gv, xv) in grad.iter().zip(g.data(x)) {
            assert!((gv - 2.0 * *xv as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn narrow0_slices_and_routes_gradients() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let s = g.narrow0(x, 1, 2).unwrap();
        assert_eq!(g.shape(s), &[2, 2]);
        assert_eq!(g.data(s), &[3.0, 4.0, 5.0, 6.0]);
        let l = g.sum_all(s).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert!(g.narrow0(x, 2, 2).is_err());
    }

    #[test]
    fn block_row_sq_norm_rejects_ragged_blocks() {
        let mut g = Graph::new();
        let x = leaf(&mut g, &[3, 2], vec![0.0; 6]);
        assert!(g.block_row_sq_norm(x, 2).is_err());
    }

    #[test]
    fn pairwise_sq_dists_match_hand_values() {
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 2], vec![0.0, 0.0, 1.0, 1.0]);
        let b = leaf(&mut g, &[2, 2], vec![3.0, 4.0, 0.0, 0.0]);
        let d = g.pairwise_sq_dists(a, b).unwrap();
        assert_eq!(g.shape(d), &[2, 2]);
        assert_eq!(g.data(d), &[25.0, 0.0, 13.0, 2.0]);
    }

    #[test]
    fn pairwise_sq_dists_gradient_matches_expansion() {
        // sum of all pairwise distances: dA_i = 2 * sum_j (a_i - b_j).
        let mut g = Graph::new();
        let a = leaf(&mut g, &[2, 2], vec![1.0, 2.0, -1.0, 0.5]);
        let b = leaf(&mut g, &[3, 2], vec![0.0, 1.0, 2.0, -1.0, 0.25, 3.0]);
        let d = g.pairwise_sq_dists(a, b).unwrap();
        let s = g.sum_all(d).unwrap();
        g.backward(s).unwrap();
        let (ga, gb) = (g.grad(a).unwrap().to_vec(), g.grad(b).unwrap().to_vec());
        let (av, bv) = (g.data(a).to_vec(), g.data(b).to_vec());
        for i in 0..2 {
            for k in 0..2 {
                let want: f64 =
                    (0..3).map(|j| 2.0 * (av[i * 2 + k] as f64 - bv[j * 2 + k] as f64)).sum();
                assert!((ga[i * 2 + k] - want).abs() < 1e-9);
            }
        }
        for j in 0..3 {
            for k in 0..2 {
                let want: f64 =
                    (0..2).map(|i| -2.0 * (av[i * 2 + k] as f64 - bv[j * 2 + k] as f64)).sum();
                assert!((gb[j * 2 + k] - want).abs() < 1e-9);
            }
        }
    }
}
