//! Fully connected ReLU network with one input skip connection.
//!
//! Hidden layer `i` maps its input to `hidden` features followed by ReLU;
//! the layer at index `skip` receives `[previous activations, network
//! input]`. A linear head produces the raw outputs, which are mapped through
//! softplus to non-negative transfer values.

use rand::Rng;
use rayon::prelude::*;

use super::Real;
use crate::math::{sigmoid, softplus};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MlpShape {
    pub input: usize,
    pub hidden: usize,
    /// Number of hidden layers.
    pub depth: usize,
    pub skip: Option<usize>,
    pub output: usize,
}

impl MlpShape {
    /// 291 inputs, 8 hidden layers of 512, skip into layer 3, 3 outputs.
    pub const NRTF: MlpShape = MlpShape {
        input: 291,
        hidden: 512,
        depth: 8,
        skip: Some(3),
        output: 3,
    };

    /// `(fan_out, fan_in)` of every layer including the head.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.depth + 1);
        for i in 0..self.depth {
            let fan_in = if i == 0 {
                self.input
            } else if Some(i) == self.skip {
                self.hidden + self.input
            } else {
                self.hidden
            };
            dims.push((self.hidden, fan_in));
        }
        let head_in = if self.depth == 0 { self.input } else { self.hidden };
        dims.push((self.output, head_in));
        dims
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(o, i)| o * i + o).sum()
    }

    fn validate(&self) -> Result<()> {
        if let Some(s) = self.skip {
            if s == 0 || s >= self.depth {
                return Err(Error::ShapeMismatch(format!("skip layer {s} outside 1..{}", self.depth)));
            }
        }
        if self.input == 0 || self.output == 0 || (self.depth > 0 && self.hidden == 0) {
            return Err(Error::ShapeMismatch(format!("degenerate MLP shape {self:?}")));
        }
        Ok(())
    }
}

/// Row-major `fan_out x fan_in` weights and a bias per output.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer<T> {
    pub fan_out: usize,
    pub fan_in: usize,
    pub w: Vec<T>,
    pub b: Vec<T>,
}

impl<T: Real> Layer<T> {
    pub fn zeros(fan_out: usize, fan_in: usize) -> Self {
        Layer {
            fan_out,
            fan_in,
            w: vec![T::ZERO; fan_out * fan_in],
            b: vec![T::ZERO; fan_out],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub shape: MlpShape,
    /// Hidden layers followed by the head.
    pub layers: Vec<Layer<T>>,
}

/// Activations kept from a forward pass.
#[derive(Clone, Debug)]
pub struct MlpCache<T> {
    pub batch: usize,
    /// Post-ReLU output of every hidden layer, `batch x hidden` each.
    pub hidden: Vec<Vec<T>>,
    /// Head outputs before the softplus mapping, `batch x output`.
    pub raw: Vec<T>,
}

impl<T: Real> MlpCache<T> {
    /// Softplus-mapped outputs.
    pub fn output(&self) -> Vec<T> {
        self.raw.iter().map(|r| T::from_f64(softplus(r.to_f64()))).collect()
    }
}

/// Rows per parallel GEMM block. Fixed so results do not depend on the
/// number of threads; small blocks starve the packed kernel (64 rows run at
/// a third of the throughput of 2048).
const BLOCK: usize = 2048;

/// `c[m x n] = a[m x k] * op(b) + beta * c`, split over row blocks of `c`.
#[allow(clippy::too_many_arguments)]
fn gemm_rows<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_strides: (isize, isize),
    b: &[T],
    b_strides: (isize, isize),
    beta: T,
    c: &mut [T],
) {
    c[..m * n]
        .par_chunks_mut(BLOCK * n)
        .enumerate()
        .for_each(|(blk, cb)| {
            let rows = cb.len() / n;
            let a_off = (blk * BLOCK) as isize * a_strides.0;
            T::gemm(rows, k, n, T::ONE, &a[a_off as usize..], a_strides, b, b_strides, beta, cb, n);
        });
}

impl<T: Real> Mlp<T> {
    pub fn zeros(shape: MlpShape) -> Result<Self> {
        shape.validate()?;
        let layers = shape
            .layer_dims()
            .into_iter()
            .map(|(o, i)| Layer::zeros(o, i))
            .collect();
        Ok(Mlp { shape, layers })
    }

    /// Kaiming-uniform fan-in weights, zero biases, head scaled by 0.1.
    pub fn init(shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(shape)?;
        let last = mlp.layers.len() - 1;
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            let mut bound = (6.0 / layer.fan_in as f64).sqrt();
            if i == last {
                bound *= 0.1;
            }
            for w in &mut layer.w {
                *w = T::from_f64(rng.gen_range(-bound..bound));
            }
        }
        Ok(mlp)
    }

    pub fn param_count(&self) -> usize {
        self.shape.param_count()
    }

    pub fn convert<U: Real>(&self) -> Mlp<U> {
        Mlp {
            shape: self.shape,
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    fan_out: l.fan_out,
                    fan_in: l.fan_in,
                    w: l.w.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                    b: l.b.iter().map(|v| U::from_f64(v.to_f64())).collect(),
                })
                .collect(),
        }
    }

    /// Forward pass over `batch` rows of `x` (`batch x input`).
    pub fn forward(&self, x: &[T], batch: usize) -> Result<MlpCache<T>> {
        let s = self.shape;
        if x.len() != batch * s.input {
            return Err(Error::ShapeMismatch(format!(
                "input has {} values, expected {} x {}",
                x.len(),
                batch,
                s.input
            )));
        }
        let mut hidden: Vec<Vec<T>> = Vec::with_capacity(s.depth);
        for i in 0..s.depth {
            let layer = &self.layers[i];
            let mut z = bias_rows(&layer.b, batch);
            let (prev, prev_dim) = if i == 0 {
                (x, s.input)
            } else {
                (hidden[i - 1].as_slice(), s.hidden)
            };
            let fan_in = layer.fan_in as isize;
            gemm_rows(batch, prev_dim, s.hidden, prev, (prev_dim as isize, 1), &layer.w, (1, fan_in), T::ONE, &mut z);
            if Some(i) == s.skip {
                gemm_rows(batch, s.input, s.hidden, x, (s.input as isize, 1), &layer.w[s.hidden..], (1, fan_in), T::ONE, &mut z);
            }
            let mut finite = true;
            for v in &mut z {
                finite &= v.is_finite();
                if *v < T::ZERO {
                    *v = T::ZERO;
                }
            }
            if !finite {
                return Err(Error::NonFiniteActivation { layer: i });
            }
            hidden.push(z);
        }
        let head = &self.layers[s.depth];
        let (prev, prev_dim) = if s.depth == 0 {
            (x, s.input)
        } else {
            (hidden[s.depth - 1].as_slice(), s.hidden)
        };
        let mut raw = bias_rows(&head.b, batch);
        gemm_rows(batch, prev_dim, s.output, prev, (prev_dim as isize, 1), &head.w, (1, head.fan_in as isize), T::ONE, &mut raw);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: s.depth });
        }
        Ok(MlpCache { batch, hidden, raw })
    }

    /// Softplus-mapped outputs for every pair `(i, j)` of a row of `a`
    /// (`na x input`) and a row of `b` (`nb x input`) with network input
    /// `a_i + b_j`, ordered `i`-major. Layers reading the input apply their
    /// weights to each factor once instead of once per pair.
    pub fn eval_pairs(&self, a: &[T], na: usize, b: &[T], nb: usize) -> Result<Vec<T>> {
        let s = self.shape;
        if a.len() != na * s.input || b.len() != nb * s.input {
            return Err(Error::ShapeMismatch(format!(
                "pair factors have {} and {} values, expected {na} and {nb} rows of {}",
                a.len(),
                b.len(),
                s.input
            )));
        }
        let batch = na * nb;
        if s.depth == 0 {
            let mut x = Vec::with_capacity(batch * s.input);
            for ra in a.chunks(s.input) {
                for rb in b.chunks(s.input) {
                    x.extend(ra.iter().zip(rb).map(|(&u, &v)| u + v));
                }
            }
            return Ok(self.forward(&x, batch)?.output());
        }
        // `rows x hidden` products of one factor with the input columns of
        // `layer`, which start at `col`.
        let term = |src: &[T], rows: usize, layer: &Layer<T>, col: usize| {
            let mut out = vec![T::ZERO; rows * s.hidden];
            gemm_rows(rows, s.input, s.hidden, src, (s.input as isize, 1), &layer.w[col..], (1, layer.fan_in as isize), T::ONE, &mut out);
            out
        };
        let add_pairs = |z: &mut [T], ta: &[T], tb: &[T]| {
            for (i, zi) in z.chunks_mut(nb * s.hidden).enumerate() {
                let ra = &ta[i * s.hidden..(i + 1) * s.hidden];
                for (zij, rb) in zi.chunks_mut(s.hidden).zip(tb.chunks(s.hidden)) {
                    for ((v, &u), &w) in zij.iter_mut().zip(ra).zip(rb) {
                        *v += u + w;
                    }
                }
            }
        };
        let mut prev: Vec<T> = Vec::new();
        for i in 0..s.depth {
            let layer = &self.layers[i];
            let mut z = bias_rows(&layer.b, batch);
            if i == 0 {
                add_pairs(&mut z, &term(a, na, layer, 0), &term(b, nb, layer, 0));
            } else {
                gemm_rows(batch, s.hidden, s.hidden, &prev, (s.hidden as isize, 1), &layer.w, (1, layer.fan_in as isize), T::ONE, &mut z);
                if Some(i) == s.skip {
                    add_pairs(&mut z, &term(a, na, layer, s.hidden), &term(b, nb, layer, s.hidden));
                }
            }
            let mut finite = true;
            for v in &mut z {
                finite &= v.is_finite();
                if *v < T::ZERO {
                    *v = T::ZERO;
                }
            }
            if !finite {
                return Err(Error::NonFiniteActivation { layer: i });
            }
            prev = z;
        }
        let head = &self.layers[s.depth];
        let mut raw = bias_rows(&head.b, batch);
        gemm_rows(batch, s.hidden, s.output, &prev, (s.hidden as isize, 1), &head.w, (1, head.fan_in as isize), T::ONE, &mut raw);
        if raw.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteActivation { layer: s.depth });
        }
        Ok(raw.iter().map(|r| T::from_f64(softplus(r.to_f64()))).collect())
    }

    /// Accumulate parameter gradients into `grads` and return the input
    /// gradient (`batch x input`) for a cotangent on the raw head outputs.
    pub fn backward_raw(
        &self,
        x: &[T],
        cache: &MlpCache<T>,
        d_raw: &[T],
        grads: &mut Mlp<T>,
    ) -> Result<Vec<T>> {
        let s = self.shape;
        let batch = cache.batch;
        if x.len() != batch * s.input
            || d_raw.len() != batch * s.output
            || cache.raw.len() != batch * s.output
            || cache.hidden.len() != s.depth
            || cache.hidden.iter().any(|h| h.len() != batch * s.hidden)
            || grads.shape != s
        {
            return Err(Error::ShapeMismatch("MLP cache does not match parameters".into()));
        }
        let mut dx = vec![T::ZERO; batch * s.input];
        // Cotangent of the current layer's pre-activation output.
        let mut dz = d_raw.to_vec();
        let mut width = s.output;
        for i in (0..=s.depth).rev() {
            let layer = &self.layers[i];
            let g = &mut grads.layers[i];
            let fan_in = layer.fan_in;
            let (prev, prev_dim) = if i == 0 {
                (x, s.input)
            } else {
                (cache.hidden[i - 1].as_slice(), s.hidden)
            };
            // dW[:, :prev_dim] += dz^T prev
            gemm_into_cols(width, batch, prev_dim, &dz, width, prev, prev_dim, &mut g.w, fan_in, 0);
            if i < s.depth && Some(i) == s.skip {
                gemm_into_cols(width, batch, s.input, &dz, width, x, s.input, &mut g.w, fan_in, s.hidden);
            }
            for r in 0..batch {
                for (gb, &d) in g.b.iter_mut().zip(&dz[r * width..(r + 1) * width]) {
                    *gb += d;
                }
            }
            if i < s.depth && Some(i) == s.skip {
                // dx += dz W[:, hidden..]
                gemm_rows(batch, width, s.input, &dz, (width as isize, 1), &layer.w[s.hidden..], (fan_in as isize, 1), T::ONE, &mut dx);
            }
            if i == 0 {
                gemm_rows(batch, width, s.input, &dz, (width as isize, 1), &layer.w, (fan_in as isize, 1), T::ONE, &mut dx);
                break;
            }
            // Into the previous hidden layer, through its ReLU.
            let mut da = vec![T::ZERO; batch * s.hidden];
            gemm_rows(batch, width, s.hidden, &dz, (width as isize, 1), &layer.w, (fan_in as isize, 1), T::ZERO, &mut da);
            for (d, &a) in da.iter_mut().zip(&cache.hidden[i - 1]) {
                if a <= T::ZERO {
                    *d = T::ZERO;
                }
            }
            dz = da;
            width = s.hidden;
        }
        Ok(dx)
    }

    /// As [`Mlp::backward_raw`] with the cotangent given on the
    /// softplus-mapped outputs.
    pub fn backward(
        &self,
        x: &[T],
        cache: &MlpCache<T>,
        d_out: &[T],
        grads: &mut Mlp<T>,
    ) -> Result<Vec<T>> {
        if d_out.len() != cache.raw.len() {
            return Err(Error::ShapeMismatch("output cotangent length".into()));
        }
        let d_raw: Vec<T> = d_out
            .iter()
            .zip(&cache.raw)
            .map(|(&d, &r)| d * T::from_f64(sigmoid(r.to_f64())))
            .collect();
        self.backward_raw(x, cache, &d_raw, grads)
    }

    /// Flat views of every parameter tensor in declaration order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.as_slice(), l.b.as_slice()])
            .collect()
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(T::ZERO);
        }
    }
}

fn bias_rows<T: Real>(b: &[T], batch: usize) -> Vec<T> {
    let mut z = Vec::with_capacity(batch * b.len());
    for _ in 0..batch {
        z.extend_from_slice(b);
    }
    z
}

/// `g[:, col0..col0+n] += dz^T * a`, where `dz` is `batch x m` and `a` is
/// `batch x n`, split over output rows of `g` so each entry is reduced in
/// batch order regardless of threading.
#[allow(clippy::too_many_arguments)]
fn gemm_into_cols<T: Real>(
    m: usize,
    batch: usize,
    n: usize,
    dz: &[T],
    dz_row: usize,
    a: &[T],
    a_row: usize,
    g: &mut [T],
    g_row: usize,
    col0: usize,
) {
    const ROWS: usize = 16;
    g.par_chunks_mut(ROWS * g_row)
        .enumerate()
        .for_each(|(blk, gb)| {
            let r0 = blk * ROWS;
            let rows = (gb.len() / g_row).min(m.saturating_sub(r0));
            if rows == 0 {
                return;
            }
            T::gemm(
                rows,
                batch,
                n,
                T::ONE,
                &dz[r0..],
                (1, dz_row as isize),
                a,
                (a_row as isize, 1),
                T::ONE,
                &mut gb[col0..],
                g_row,
            );
        });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn small_shape() -> MlpShape {
        MlpShape {
            input: 7,
            hidden: 9,
            depth: 4,
            skip: Some(2),
            output: 3,
        }
    }

    fn random_input(n: usize, rng: &mut impl Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn nrtf_layer_shapes() {
        let dims = MlpShape::NRTF.layer_dims();
        assert_eq!(dims.len(), 9);
        assert_eq!(dims[0], (512, 291));
        assert_eq!(dims[3], (512, 803));
        assert_eq!(dims[8], (3, 512));
        assert!(dims.iter().enumerate().all(|(i, d)| i == 0 || i == 3 || i == 8 || *d == (512, 512)));
    }

    #[test]
    fn zero_network_outputs_softplus_of_zero() {
        let mlp = Mlp::<f64>::zeros(MlpShape::NRTF).unwrap();
        let x = vec![0.3; 2 * 291];
        let out = mlp.forward(&x, 2).unwrap().output();
        assert!(out.iter().all(|&v| (v - 2f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn relu_rescaling_symmetry() {
        let mut rng = seeded(4);
        let mlp = Mlp::<f64>::init(small_shape(), &mut rng).unwrap();
        let x = random_input(5 * 7, &mut rng);
        let base = mlp.forward(&x, 5).unwrap().raw;
        let mut scaled = mlp.clone();
        let c = 3.7;
        // Layer 0 feeds only layer 1, which has no skip input.
        let l0 = &mut scaled.layers[0];
        for v in l0.w.iter_mut().chain(l0.b.iter_mut()) {
            *v *= c;
        }
        for v in scaled.layers[1].w.iter_mut() {
            *v /= c;
        }
        let out = scaled.forward(&x, 5).unwrap().raw;
        for (a, b) in base.iter().zip(&out) {
            assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn linear_config_gradient_is_outer_product() {
        let shape = MlpShape {
            input: 4,
            hidden: 0,
            depth: 0,
            skip: None,
            output: 2,
        };
        let mut rng = seeded(9);
        let mlp = Mlp::<f64>::init(shape, &mut rng).unwrap();
        let x = random_input(4, &mut rng);
        let cache = mlp.forward(&x, 1).unwrap();
        let cot = [0.5, -2.0];
        let mut g = Mlp::zeros(shape).unwrap();
        mlp.backward_raw(&x, &cache, &cot, &mut g).unwrap();
        for o in 0..2 {
            for i in 0..4 {
                assert_eq!(g.layers[0].w[o * 4 + i], cot[o] * x[i]);
            }
            assert_eq!(g.layers[0].b[o], cot[o]);
        }
    }

    #[test]
    fn zero_cotangent_gives_zero_gradients() {
        let mut rng = seeded(1);
        let mlp = Mlp::<f64>::init(small_shape(), &mut rng).unwrap();
        let x = random_input(3 * 7, &mut rng);
        let cache = mlp.forward(&x, 3).unwrap();
        let mut g = Mlp::zeros(small_shape()).unwrap();
        let dx = mlp.backward(&x, &cache, &[0.0; 9], &mut g).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert!(g.tensors().iter().all(|t| t.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn mismatched_cache_is_rejected() {
        let mut rng = seeded(1);
        let mlp = Mlp::<f64>::init(small_shape(), &mut rng).unwrap();
        let x = random_input(2 * 7, &mut rng);
        let cache = mlp.forward(&x, 2).unwrap();
        let mut g = Mlp::zeros(small_shape()).unwrap();
        assert!(mlp.backward(&x[..7], &cache, &[0.0; 6], &mut g).is_err());
    }

    #[test]
    fn every_parameter_matches_finite_differences() {
        let shape = small_shape();
        let mut rng = seeded(21);
        let mut mlp = Mlp::<f64>::init(shape, &mut rng).unwrap();
        for l in &mut mlp.layers {
            for b in &mut l.b {
                *b = rng.gen_range(-0.2..0.2);
            }
        }
        let batch = 3;
        let x = random_input(batch * shape.input, &mut rng);
        let cot = random_input(batch * shape.output, &mut rng);
        let f = |m: &Mlp<f64>, x: &[f64]| -> f64 {
            let out = m.forward(x, batch).unwrap().output();
            out.iter().zip(&cot).map(|(a, b)| a * b).sum()
        };
        let cache = mlp.forward(&x, batch).unwrap();
        let mut g = Mlp::zeros(shape).unwrap();
        let dx = mlp.backward(&x, &cache, &cot, &mut g).unwrap();
        let h = 1e-6;
        let grads: Vec<Vec<f64>> = g.tensors().iter().map(|t| t.to_vec()).collect();
        for (ti, gt) in grads.iter().enumerate() {
            for (j, &analytic) in gt.iter().enumerate() {
                let mut p = mlp.clone();
                p.tensors_mut()[ti][j] += h;
                let mut m = mlp.clone();
                m.tensors_mut()[ti][j] -= h;
                let fd = (f(&p, &x) - f(&m, &x)) / (2.0 * h);
                let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
                assert!(err < 1e-4 || (fd - analytic).abs() < 1e-9, "tensor {ti}[{j}]: {analytic} vs {fd}");
            }
        }
        for j in 0..x.len() {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let fd = (f(&mlp, &xp) - f(&mlp, &xm)) / (2.0 * h);
            assert!((fd - dx[j]).abs() <= 1e-4 * fd.abs().max(1e-5), "dx[{j}]");
        }
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

        #[test]
        fn layer_dims_chain(input in 1usize..40, hidden in 1usize..40, depth in 0usize..6, skip in 1usize..6, output in 1usize..5) {
            let shape = MlpShape { input, hidden, depth, skip: (skip < depth).then_some(skip), output };
            let dims = shape.layer_dims();
            proptest::prop_assert_eq!(dims.len(), depth + 1);
            proptest::prop_assert_eq!(dims[0].1, input);
            proptest::prop_assert_eq!(dims[depth].0, output);
            for i in 1..dims.len() {
                let extra = if shape.skip == Some(i) { input } else { 0 };
                proptest::prop_assert_eq!(dims[i].1, dims[i - 1].0 + extra);
            }
            let mlp = Mlp::<f64>::zeros(shape).unwrap();
            proptest::prop_assert_eq!(mlp.param_count(), shape.param_count());
        }

        #[test]
        fn batch_rows_are_independent(seed in 0u64..u64::MAX, batch in 1usize..12) {
            let mut rng = seeded(seed);
            let mlp = Mlp::<f64>::init(small_shape(), &mut rng).unwrap();
            let x = random_input(batch * 7, &mut rng);
            let all = mlp.forward(&x, batch).unwrap().output();
            for r in 0..batch {
                let one = mlp.forward(&x[r * 7..(r + 1) * 7], 1).unwrap().output();
                for c in 0..3 {
                    proptest::prop_assert!((one[c] - all[r * 3 + c]).abs() <= 1e-12 * (1.0 + one[c].abs()));
                }
            }
        }
    }
}
