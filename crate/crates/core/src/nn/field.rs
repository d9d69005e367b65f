//! The radiance transfer field: hash encoding of position, raw normal and
//! spherical-harmonics encodings of both directions, fed to the MLP.

use rand::Rng;

use super::hash::{EncodePlan, HashConfig, HashGrid, CORNERS, ENCODED_DIM, FEATURES};
use super::mlp::{Mlp, MlpCache, MlpShape};
use super::sh::{sh_encode, SH_DIM};
use super::Real;
use crate::envmap::texel_center_direction;
use crate::math::{DVec3, Rgb};
use crate::mesh::TriangleMesh;
use crate::{Error, Result};

pub const INPUT_DIM: usize = ENCODED_DIM + 3 + 2 * SH_DIM;

#[derive(Clone, Debug, PartialEq)]
pub struct NrtfField<T> {
    pub grid: HashGrid,
    /// `total_rows x FEATURES`, row-major.
    pub tables: Vec<T>,
    pub mlp: Mlp<T>,
}

/// One field query with its encodings precomputed.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub plan: &'a EncodePlan,
    pub normal: DVec3,
    pub sh_in: &'a [f64; SH_DIM],
    pub sh_out: &'a [f64; SH_DIM],
}

pub struct FieldCache<'a, T> {
    pub samples: Vec<Sample<'a>>,
    pub input: Vec<T>,
    pub mlp: MlpCache<T>,
}

impl<T: Real> FieldCache<'_, T> {
    pub fn output(&self) -> Vec<T> {
        self.mlp.output()
    }
}

/// Gradient buffers; table rows are tracked so updates and clearing stay
/// proportional to the rows a batch touched.
#[derive(Clone, Debug)]
pub struct FieldGrads<T> {
    pub mlp: Mlp<T>,
    pub tables: Vec<T>,
    pub touched: Vec<u32>,
    marked: Vec<bool>,
}

impl<T: Real> FieldGrads<T> {
    pub fn new(field: &NrtfField<T>) -> Result<Self> {
        let rows = field.grid.total_rows();
        Ok(FieldGrads {
            mlp: Mlp::zeros(field.mlp.shape)?,
            tables: vec![T::ZERO; rows * FEATURES],
            touched: Vec::new(),
            marked: vec![false; rows],
        })
    }

    pub fn clear(&mut self) {
        self.mlp.fill_zero();
        for &r in &self.touched {
            let s = r as usize * FEATURES;
            self.tables[s..s + FEATURES].fill(T::ZERO);
            self.marked[r as usize] = false;
        }
        self.touched.clear();
    }

    /// Touched rows in ascending order.
    pub fn sorted_rows(&mut self) -> &[u32] {
        self.touched.sort_unstable();
        &self.touched
    }
}

impl<T: Real> NrtfField<T> {
    pub fn new(mesh: &TriangleMesh, hash: HashConfig, rng: &mut impl Rng) -> Result<Self> {
        let grid = HashGrid::build(mesh, hash)?;
        Self::with_grid(grid, MlpShape::NRTF, rng)
    }

    pub fn with_grid(grid: HashGrid, shape: MlpShape, rng: &mut impl Rng) -> Result<Self> {
        if shape.input != INPUT_DIM {
            return Err(Error::ShapeMismatch(format!(
                "field MLP input must be {INPUT_DIM}, got {}",
                shape.input
            )));
        }
        let tables = (0..grid.total_rows() * FEATURES)
            .map(|_| T::from_f64(rng.gen_range(-1e-4..1e-4)))
            .collect();
        let mlp = Mlp::init(shape, rng)?;
        Ok(NrtfField { grid, tables, mlp })
    }

    pub fn convert<U: Real>(&self) -> NrtfField<U> {
        NrtfField {
            grid: self.grid.clone(),
            tables: self.tables.iter().map(|v| U::from_f64(v.to_f64())).collect(),
            mlp: self.mlp.convert(),
        }
    }

    /// Trilinearly interpolated features of every level.
    pub fn encode(&self, plan: &EncodePlan, out: &mut [T]) {
        out[..ENCODED_DIM].fill(T::ZERO);
        for l in 0..CORNERS / 8 {
            let o = &mut out[l * FEATURES..(l + 1) * FEATURES];
            for c in 0..8 {
                let w = T::from_f64(plan.weights[l * 8 + c] as f64);
                if w == T::ZERO {
                    continue;
                }
                let r = plan.rows[l * 8 + c] as usize * FEATURES;
                for (v, &t) in o.iter_mut().zip(&self.tables[r..r + FEATURES]) {
                    *v += w * t;
                }
            }
        }
    }

    fn assemble(&self, samples: &[Sample]) -> Vec<T> {
        let mut x = vec![T::ZERO; samples.len() * INPUT_DIM];
        for (s, row) in samples.iter().zip(x.chunks_mut(INPUT_DIM)) {
            self.encode(s.plan, row);
            let n = [s.normal.x, s.normal.y, s.normal.z];
            for (i, v) in n.iter().chain(s.sh_in.iter()).chain(s.sh_out.iter()).enumerate() {
                row[ENCODED_DIM + i] = T::from_f64(*v);
            }
        }
        x
    }

    pub fn forward<'a>(&self, samples: &[Sample<'a>]) -> Result<FieldCache<'a, T>> {
        let input = self.assemble(samples);
        let mlp = self.mlp.forward(&input, samples.len())?;
        Ok(FieldCache {
            samples: samples.to_vec(),
            input,
            mlp,
        })
    }

    /// Softplus-mapped transfer values, `3` per sample.
    pub fn eval(&self, samples: &[Sample]) -> Result<Vec<T>> {
        Ok(self.forward(samples)?.output())
    }

    /// Transfer values for every pair of a query and an incoming-direction
    /// encoding, ordered query-major; the queries' own `sh_in` is ignored.
    /// Same values as [`Self::eval`] on the expanded pairs up to rounding,
    /// at a fraction of the first-layer cost.
    pub fn eval_pairs(&self, samples: &[Sample], sh_in: &[[f64; SH_DIM]]) -> Result<Vec<T>> {
        const SH_IN: usize = ENCODED_DIM + 3;
        let mut a = self.assemble(samples);
        for row in a.chunks_mut(INPUT_DIM) {
            row[SH_IN..SH_IN + SH_DIM].fill(T::ZERO);
        }
        let mut b = vec![T::ZERO; sh_in.len() * INPUT_DIM];
        for (row, sh) in b.chunks_mut(INPUT_DIM).zip(sh_in) {
            for (v, &c) in row[SH_IN..SH_IN + SH_DIM].iter_mut().zip(sh) {
                *v = T::from_f64(c);
            }
        }
        self.mlp.eval_pairs(&a, samples.len(), &b, sh_in.len())
    }

    /// Accumulate gradients for a cotangent on the mapped outputs.
    pub fn backward(&self, cache: &FieldCache<T>, d_out: &[T], grads: &mut FieldGrads<T>) -> Result<()> {
        let dx = self.mlp.backward(&cache.input, &cache.mlp, d_out, &mut grads.mlp)?;
        for (s, row) in cache.samples.iter().zip(dx.chunks(INPUT_DIM)) {
            for l in 0..CORNERS / 8 {
                let d = &row[l * FEATURES..(l + 1) * FEATURES];
                for c in 0..8 {
                    let w = s.plan.weights[l * 8 + c];
                    if w == 0.0 {
                        continue;
                    }
                    let w = T::from_f64(w as f64);
                    let r = s.plan.rows[l * 8 + c];
                    if !grads.marked[r as usize] {
                        grads.marked[r as usize] = true;
                        grads.touched.push(r);
                    }
                    let g = &mut grads.tables[r as usize * FEATURES..(r as usize + 1) * FEATURES];
                    for (gv, &dv) in g.iter_mut().zip(d) {
                        *gv += w * dv;
                    }
                }
            }
        }
        Ok(())
    }

    /// Transfer at surface point `x` with normal `n`, lit from texel `texel`
    /// of a `dims.0 x dims.1` envmap and seen from direction `wo`.
    pub fn nrtf_eval(&self, x: DVec3, n: DVec3, texel: usize, dims: (usize, usize), wo: DVec3) -> Result<Rgb> {
        if texel >= dims.0 * dims.1 {
            return Err(Error::TexelOutOfRange {
                index: texel,
                width: dims.0,
                height: dims.1,
            });
        }
        let (plan, _) = self.grid.plan(x);
        let sh_in = sh_encode(texel_center_direction(dims.0, dims.1, texel))?;
        let sh_out = sh_encode(wo)?;
        let out = self.eval(&[Sample {
            plan: &plan,
            normal: n,
            sh_in: &sh_in,
            sh_out: &sh_out,
        }])?;
        Ok(Rgb::new(out[0].to_f64(), out[1].to_f64(), out[2].to_f64()))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::bundled;
    use crate::rng::seeded;

    pub(crate) fn small_field<T: Real>(seed: u64) -> NrtfField<T> {
        let mesh = bundled::uv_sphere(DVec3::ZERO, 0.5, 12, 6, [0.0, 1.0]).unwrap();
        let cfg = HashConfig { n_min: 4, n_max: 24, ..Default::default() };
        let grid = HashGrid::build(&mesh, cfg).unwrap();
        let shape = MlpShape { input: INPUT_DIM, hidden: 16, depth: 4, skip: Some(2), output: 3 };
        NrtfField::with_grid(grid, shape, &mut seeded(seed)).unwrap()
    }

    #[test]
    fn pair_evaluation_matches_expanded_rows() {
        let field = small_field::<f64>(4);
        let mesh = bundled::uv_sphere(DVec3::ZERO, 0.5, 12, 6, [0.0, 1.0]).unwrap();
        let plans: Vec<_> = [3, 17, 40].iter().map(|&v| field.grid.plan(mesh.vertices[v]).0).collect();
        let sh_out = sh_encode(DVec3::new(0.3, -0.2, 0.9).normalize()).unwrap();
        let sh_in: Vec<_> = (0..5).map(|t| sh_encode(texel_center_direction(4, 2, t)).unwrap()).collect();
        let queries: Vec<Sample> = plans
            .iter()
            .map(|p| Sample { plan: p, normal: DVec3::Y, sh_in: &sh_in[0], sh_out: &sh_out })
            .collect();
        let pairs = field.eval_pairs(&queries, &sh_in).unwrap();
        let expanded: Vec<Sample> = queries
            .iter()
            .flat_map(|q| sh_in.iter().map(move |sh| Sample { sh_in: sh, ..*q }))
            .collect();
        let direct = field.eval(&expanded).unwrap();
        assert_eq!(pairs.len(), direct.len());
        for (a, b) in pairs.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn corner_point_returns_corner_features() {
        let mut field = small_field::<f64>(1);
        let mut rng = seeded(2);
        for v in &mut field.tables {
            *v = rng.gen_range(-1.0..1.0);
        }
        let mesh = bundled::uv_sphere(DVec3::ZERO, 0.5, 12, 6, [0.0, 1.0]).unwrap();
        for l in [0, 5, 15] {
            let v = field.grid.voxel_of(l, mesh.vertices[5]);
            let h = field.grid.voxel_size(l);
            let p = field.grid.origin + DVec3::new(v[0] as f64, v[1] as f64, v[2] as f64) * h;
            // Other levels may clamp this off-surface point; level `l` holds it.
            let (plan, _) = field.grid.plan(p);
            let level = &field.grid.levels[l];
            let row = level.row_offset as usize + level.corners.binary_search(&v).unwrap();
            let mut out = vec![0.0; ENCODED_DIM];
            field.encode(&plan, &mut out);
            for f in 0..FEATURES {
                assert!((out[l * FEATURES + f] - field.tables[row * FEATURES + f]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn zero_tables_encode_to_zero() {
        let mut field = small_field::<f64>(3);
        field.tables.fill(0.0);
        let (plan, _) = field.grid.plan(DVec3::new(0.5, 0.0, 0.0));
        let mut out = vec![1.0; ENCODED_DIM];
        field.encode(&plan, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batching_is_transparent() {
        let field = small_field::<f64>(5);
        let dims = (32, 16);
        let x = DVec3::new(0.0, 0.5, 0.0);
        let (plan, _) = field.grid.plan(x);
        let sh_out = sh_encode(DVec3::new(0.2, 0.9, 0.1)).unwrap();
        let sh_in: Vec<[f64; 16]> = (0..512)
            .map(|t| sh_encode(texel_center_direction(dims.0, dims.1, t)).unwrap())
            .collect();
        let samples: Vec<Sample> = sh_in
            .iter()
            .map(|s| Sample { plan: &plan, normal: DVec3::Y, sh_in: s, sh_out: &sh_out })
            .collect();
        let batched = field.eval(&samples).unwrap();
        for t in [0, 77, 300, 511] {
            let single = field.nrtf_eval(x, DVec3::Y, t, dims, DVec3::new(0.2, 0.9, 0.1)).unwrap();
            for c in 0..3 {
                assert_eq!(batched[t * 3 + c], single[c]);
            }
        }
    }
}
