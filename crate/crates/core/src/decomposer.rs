//! Reversible multilevel decomposition by hierarchical surpluses.
//!
//! The level-`s` grid (spacing `2^s`) contains every node whose coordinates
//! are all divisible by `2^s`. Level 0 of a [`LevelDecomposition`] is the
//! coarsest grid (spacing `2^L`) and holds raw values; every finer level holds
//! the nodes that first appear at its spacing, each storing its value minus
//! the multilinear interpolation from the next-coarser grid. Interpolation
//! weights are non-negative and sum to one, so a perturbation of at most `e_l`
//! on every level-`l` coefficient moves the reconstruction by at most
//! `sum(e_l)`.
//!
//! A node with an odd coordinate and no right neighbour at its spacing is
//! predicted from its left neighbour alone.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Decomposer id stored in stream headers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum DecomposerKind {
    Identity = 0,
    Hierarchical = 1,
}

impl DecomposerKind {
    pub fn from_id(id: u8) -> Option<Self> {
        match id {
            0 => Some(DecomposerKind::Identity),
            1 => Some(DecomposerKind::Hierarchical),
            _ => None,
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }
}

impl std::str::FromStr for DecomposerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "identity" => Ok(DecomposerKind::Identity),
            "hierarchical" | "hierarchical-multilinear" => Ok(DecomposerKind::Hierarchical),
            other => Err(format!("unknown decomposer '{other}'")),
        }
    }
}

/// Array extents, row-major with the last dimension fastest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Grid {
    dims: Vec<usize>,
}

impl Grid {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::ShapeMismatch("grid needs at least one dimension".into()));
        }
        if dims.contains(&0) {
            return Err(Error::ShapeMismatch(format!("zero extent in {dims:?}")));
        }
        dims.iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::ShapeMismatch(format!("element count of {dims:?} overflows")))?;
        Ok(Grid { dims })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndims(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn max_extent(&self) -> usize {
        self.dims.iter().copied().max().unwrap_or(1)
    }

    /// Number of refinement levels `L`; the decomposition has `L + 1` levels.
    pub fn refinement_levels(&self) -> u32 {
        refinement_levels(self.max_extent())
    }

    fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1usize; self.dims.len()];
        for d in (0..self.dims.len().saturating_sub(1)).rev() {
            strides[d] = strides[d + 1] * self.dims[d + 1];
        }
        strides
    }
}

/// `ceil(log2(max_extent - 1))` for extents of at least 2, otherwise 0.
pub fn refinement_levels(max_extent: usize) -> u32 {
    if max_extent <= 2 {
        return 0;
    }
    let span = (max_extent - 1) as u64;
    64 - (span - 1).leading_zeros()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LevelDecomposition<T> {
    grid: Grid,
    kind: DecomposerKind,
    /// Coarsest first. Coefficients are in ascending linear-index order of
    /// the nodes each level owns.
    levels: Vec<Vec<T>>,
}

impl<T: Real> LevelDecomposition<T> {
    /// Reassemble a decomposition from per-level coefficients, checking that
    /// the counts match the grid.
    pub fn from_levels(grid: Grid, kind: DecomposerKind, levels: Vec<Vec<T>>) -> Result<Self> {
        let expected = level_sizes(&grid, kind);
        if expected.len() != levels.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} levels, got {}",
                expected.len(),
                levels.len()
            )));
        }
        for (l, (want, got)) in expected.iter().zip(&levels).enumerate() {
            if *want != got.len() {
                return Err(Error::ShapeMismatch(format!(
                    "level {l} expects {want} coefficients, got {}",
                    got.len()
                )));
            }
        }
        Ok(LevelDecomposition { grid, kind, levels })
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn kind(&self) -> DecomposerKind {
        self.kind
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, l: usize) -> &[T] {
        &self.levels[l]
    }

    pub fn levels(&self) -> &[Vec<T>] {
        &self.levels
    }

    pub fn levels_mut(&mut self) -> &mut [Vec<T>] {
        &mut self.levels
    }

    pub fn into_levels(self) -> Vec<Vec<T>> {
        self.levels
    }

    /// Linear indices of the grid nodes owned by level `l`, ascending.
    pub fn nodes(&self, l: usize) -> Vec<usize> {
        level_nodes(&self.grid, self.kind, l)
    }
}

/// Level owning each linear index, for a grid and decomposer.
fn node_levels(grid: &Grid, kind: DecomposerKind) -> Vec<u32> {
    let n = grid.len();
    if kind == DecomposerKind::Identity {
        return vec![0; n];
    }
    let big_l = grid.refinement_levels();
    let dims = grid.dims();
    let mut out = Vec::with_capacity(n);
    let mut coord = vec![0usize; dims.len()];
    for _ in 0..n {
        out.push(big_l - spacing_exponent(&coord, big_l));
        advance(&mut coord, dims);
    }
    out
}

fn advance(coord: &mut [usize], dims: &[usize]) {
    for d in (0..dims.len()).rev() {
        coord[d] += 1;
        if coord[d] < dims[d] {
            return;
        }
        coord[d] = 0;
    }
}

/// Coefficient count of every level.
pub fn level_sizes(grid: &Grid, kind: DecomposerKind) -> Vec<usize> {
    let count = match kind {
        DecomposerKind::Identity => 1,
        DecomposerKind::Hierarchical => grid.refinement_levels() as usize + 1,
    };
    let mut sizes = vec![0usize; count];
    for l in node_levels(grid, kind) {
        sizes[l as usize] += 1;
    }
    sizes
}

/// Linear indices owned by level `l`.
pub fn level_nodes(grid: &Grid, kind: DecomposerKind, l: usize) -> Vec<usize> {
    node_levels(grid, kind)
        .into_iter()
        .enumerate()
        .filter(|&(_, lv)| lv as usize == l)
        .map(|(i, _)| i)
        .collect()
}

/// Per-node interpolation stencil: the coarse-grid corner indices whose mean
/// predicts the node.
struct Stencil {
    grid: Grid,
    strides: Vec<usize>,
    big_l: u32,
}

impl Stencil {
    fn new(grid: &Grid) -> Self {
        Stencil {
            grid: grid.clone(),
            strides: grid.strides(),
            big_l: grid.refinement_levels(),
        }
    }

    /// Fills `corners` with the linear indices to average. `coord` belongs to a node on spacing `2^t` but not `2^(t+1)`.
    fn corners(&self, coord: &[usize], t: u32, corners: &mut Vec<usize>) {
        let h = 1usize << t;
        corners.clear();
        let base: usize = coord
            .iter()
            .zip(&self.strides)
            .map(|(&c, &s)| c * s)
            .sum();
        corners.push(base);
        for (d, &c) in coord.iter().enumerate() {
            // odd multiple of h in this dimension
            if (c >> t) & 1 == 1 {
                let s = self.strides[d];
                let has_right = c + h < self.grid.dims()[d];
                let len = corners.len();
                for k in 0..len {
                    let at = corners[k];
                    corners[k] = at - h * s;
                    if has_right {
                        corners.push(at + h * s);
                    }
                }
            }
        }
    }
}

/// Split `data` into per-level coefficients.
pub fn decompose<T: Real>(
    data: &[T],
    grid: &Grid,
    kind: DecomposerKind,
) -> Result<LevelDecomposition<T>> {
    if data.len() != grid.len() {
        return Err(Error::ShapeMismatch(format!(
            "data has {} elements, grid {:?} has {}",
            data.len(),
            grid.dims(),
            grid.len()
        )));
    }
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteInput { index });
    }
    if kind == DecomposerKind::Identity {
        return Ok(LevelDecomposition {
            grid: grid.clone(),
            kind,
            levels: vec![data.to_vec()],
        });
    }

    let stencil = Stencil::new(grid);
    let big_l = stencil.big_l;
    let sizes = level_sizes(grid, kind);
    let mut levels: Vec<Vec<T>> = sizes.iter().map(|&s| Vec::with_capacity(s)).collect();
    let dims = grid.dims();
    let mut coord = vec![0usize; dims.len()];
    let mut corners = Vec::new();
    for &v in data {
        let t = spacing_exponent(&coord, big_l);
        let level = (big_l - t) as usize;
        if level == 0 {
            levels[0].push(v);
        } else {
            stencil.corners(&coord, t, &mut corners);
            levels[level].push(v - mean(data, &corners));
        }
        advance(&mut coord, dims);
    }
    Ok(LevelDecomposition {
        grid: grid.clone(),
        kind,
        levels,
    })
}

/// Largest `t <= big_l` with every coordinate divisible by `2^t`.
#[inline]
fn spacing_exponent(coord: &[usize], big_l: u32) -> u32 {
    coord
        .iter()
        .map(|&c| if c == 0 { big_l } else { c.trailing_zeros().min(big_l) })
        .min()
        .unwrap_or(big_l)
}

#[inline]
fn mean<T: Real>(values: &[T], at: &[usize]) -> T {
    let sum = at.iter().fold(T::zero(), |acc, &i| acc + values[i]);
    sum / T::from_usize(at.len()).unwrap()
}

/// Invert [`decompose`]. `per_level_error[l]` is the largest perturbation of
/// any level-`l` coefficient relative to the exact decomposition; the
/// returned bound is their sum.
pub fn recompose<T: Real>(
    decomp: &LevelDecomposition<T>,
    per_level_error: &[f64],
) -> Result<(Vec<T>, f64)> {
    if per_level_error.len() != decomp.num_levels() {
        return Err(Error::ShapeMismatch(format!(
            "{} per-level errors for {} levels",
            per_level_error.len(),
            decomp.num_levels()
        )));
    }
    if let Some(e) = per_level_error.iter().find(|e| !(**e >= 0.0)) {
        return Err(Error::ShapeMismatch(format!("negative level error {e}")));
    }
    let bound: f64 = per_level_error.iter().sum();
    let grid = decomp.grid();
    if decomp.kind == DecomposerKind::Identity {
        return Ok((decomp.levels[0].clone(), bound));
    }

    let n = grid.len();
    let stencil = Stencil::new(grid);
    let big_l = stencil.big_l;
    let node_level = node_levels(grid, decomp.kind);
    let mut out = vec![T::zero(); n];

    // Position of each node inside its level's coefficient vector.
    let mut cursor = vec![0usize; decomp.num_levels()];
    let mut slot = vec![0usize; n];
    for (i, &l) in node_level.iter().enumerate() {
        slot[i] = cursor[l as usize];
        cursor[l as usize] += 1;
    }

    let dims = grid.dims();
    let mut corners = Vec::new();
    for level in 0..decomp.num_levels() {
        let coeffs = &decomp.levels[level];
        let mut coord = vec![0usize; dims.len()];
        for i in 0..n {
            if node_level[i] as usize == level {
                let c = coeffs[slot[i]];
                out[i] = if level == 0 {
                    c
                } else {
                    let t = big_l - level as u32;
                    stencil.corners(&coord, t, &mut corners);
                    mean(&out, &corners) + c
                };
            }
            advance(&mut coord, dims);
        }
    }
    Ok((out, bound))
}

/// Uniform split of a total L-infinity tolerance across levels.
pub fn allocate_level_tolerances(tau: f64, num_levels: usize) -> Vec<f64> {
    let n = num_levels.max(1);
    vec![tau / n as f64; n]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: &[usize]) -> Grid {
        Grid::new(d.to_vec()).unwrap()
    }

    /// Scalar-loop 1D oracle, independent of the stencil machinery.
    fn surpluses_1d(x: &[f64]) -> Vec<(usize, usize, f64)> {
        let n = x.len();
        let big_l = refinement_levels(n);
        let mut out = Vec::new();
        for i in 0..n {
            let t = if i == 0 { big_l } else { i.trailing_zeros().min(big_l) };
            let level = (big_l - t) as usize;
            let value = if level == 0 {
                x[i]
            } else {
                let h = 1 << t;
                let pred = if i + h < n { (x[i - h] + x[i + h]) / 2.0 } else { x[i - h] };
                x[i] - pred
            };
            out.push((level, i, value));
        }
        out
    }

    #[test]
    fn refinement_level_formula() {
        assert_eq!(refinement_levels(1), 0);
        assert_eq!(refinement_levels(2), 0);
        assert_eq!(refinement_levels(3), 1);
        assert_eq!(refinement_levels(5), 2);
        assert_eq!(refinement_levels(6), 3);
        assert_eq!(refinement_levels(65), 6);
        assert_eq!(refinement_levels(66), 7);
    }

    #[test]
    fn tent_example_has_zero_finest_surpluses() {
        let x = [0.0, 2.0, 4.0, 2.0, 0.0];
        let d = decompose(&x, &grid(&[5]), DecomposerKind::Hierarchical).unwrap();
        assert_eq!(d.num_levels(), 3);
        let finest = d.num_levels() - 1;
        assert_eq!(d.nodes(finest), vec![1, 3]);
        // interpolation (0+4)/2 = 2 and (4+0)/2 = 2
        assert_eq!(d.level(finest), &[0.0, 0.0]);
        assert_eq!(d.nodes(0), vec![0, 4]);
        assert_eq!(d.level(0), &[0.0, 0.0]);
        assert_eq!(d.nodes(1), vec![2]);
        assert_eq!(d.level(1), &[4.0]);

        let oracle = surpluses_1d(&x);
        for l in 0..d.num_levels() {
            let want: Vec<f64> = oracle.iter().filter(|o| o.0 == l).map(|o| o.2).collect();
            assert_eq!(d.level(l), want.as_slice());
        }
    }

    #[test]
    fn matches_scalar_oracle_on_odd_lengths() {
        for n in [1usize, 2, 3, 4, 6, 7, 10, 17, 33, 40] {
            let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 - 6.0).collect();
            let d = decompose(&x, &grid(&[n]), DecomposerKind::Hierarchical).unwrap();
            let oracle = surpluses_1d(&x);
            for l in 0..d.num_levels() {
                let want: Vec<f64> = oracle.iter().filter(|o| o.0 == l).map(|o| o.2).collect();
                let nodes: Vec<usize> = oracle.iter().filter(|o| o.0 == l).map(|o| o.1).collect();
                assert_eq!(d.level(l), want.as_slice(), "n={n} level={l}");
                assert_eq!(d.nodes(l), nodes);
            }
        }
    }

    #[test]
    fn identity_is_bit_identical() {
        let x = [1.25f32, -3.5, 7.0, 0.1];
        let d = decompose(&x, &grid(&[2, 2]), DecomposerKind::Identity).unwrap();
        assert_eq!(d.num_levels(), 1);
        assert_eq!(d.level(0), &x);
        let (back, bound) = recompose(&d, &[0.0]).unwrap();
        assert_eq!(back, x);
        assert_eq!(bound, 0.0);
    }

    #[test]
    fn constant_field_has_zero_surpluses() {
        let g = grid(&[5]);
        let d = decompose(&[1.0; 5], &g, DecomposerKind::Hierarchical).unwrap();
        for l in 1..d.num_levels() {
            assert!(d.level(l).iter().all(|&c| c == 0.0));
        }
        let g = grid(&[7, 9, 4]);
        let d = decompose(&vec![3.25f64; g.len()], &g, DecomposerKind::Hierarchical).unwrap();
        for l in 1..d.num_levels() {
            assert!(d.level(l).iter().all(|&c| c == 0.0), "level {l}");
        }
    }

    #[test]
    fn nodes_partition_grid() {
        for dims in [vec![1], vec![2], vec![9], vec![5, 3], vec![6, 1, 11], vec![17, 17]] {
            let g = grid(&dims);
            let d = decompose(&vec![0.0f64; g.len()], &g, DecomposerKind::Hierarchical).unwrap();
            let mut seen = vec![0u8; g.len()];
            for l in 0..d.num_levels() {
                let nodes = d.nodes(l);
                assert_eq!(nodes.len(), d.level(l).len());
                for i in nodes {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&s| s == 1), "{dims:?}");
        }
    }

    #[test]
    fn two_dimensional_stencil_uses_four_corners() {
        // 3x3: centre (1,1) predicted by the four corners.
        let x = [1.0, 0.0, 3.0, 0.0, 10.0, 0.0, 5.0, 0.0, 7.0];
        let d = decompose(&x, &grid(&[3, 3]), DecomposerKind::Hierarchical).unwrap();
        assert_eq!(d.nodes(1), vec![1, 3, 4, 5, 7]);
        // (0,1): (1+3)/2 ; (1,0): (1+5)/2 ; (1,1): (1+3+5+7)/4
        assert_eq!(d.level(1), &[-2.0, -3.0, 6.0, -5.0, -6.0]);
    }

    #[test]
    fn recompose_bound_is_sum() {
        let g = grid(&[5]);
        let d = decompose(&[0.0, 2.0, 4.0, 2.0, 0.0], &g, DecomposerKind::Hierarchical).unwrap();
        let (_, bound) = recompose(&d, &[0.25, 0.5, 0.125]).unwrap();
        assert_eq!(bound, 0.875);
        assert!(matches!(recompose(&d, &[0.0, 0.0]), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn rejects_non_finite() {
        let err = decompose(&[1.0, f64::NAN], &grid(&[2]), DecomposerKind::Identity).unwrap_err();
        assert!(matches!(err, Error::NonFiniteInput { index: 1 }));
        let err =
            decompose(&[1.0, 2.0, f64::INFINITY], &grid(&[3]), DecomposerKind::Hierarchical)
                .unwrap_err();
        assert!(matches!(err, Error::NonFiniteInput { index: 2 }));
    }

    #[test]
    fn level_tolerances() {
        assert_eq!(allocate_level_tolerances(1.0, 4), vec![0.25; 4]);
        assert_eq!(allocate_level_tolerances(0.0, 3), vec![0.0; 3]);
        assert_eq!(allocate_level_tolerances(2f64.powi(-10), 1), vec![2f64.powi(-10)]);
        let parts = allocate_level_tolerances(0.3, 7);
        let sum: f64 = parts.iter().sum();
        assert!((sum - 0.3).abs() <= f64::EPSILON * 0.3);
    }
}
