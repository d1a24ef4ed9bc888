//! Token reordering along a space-filling curve.
//!
//! Grids are indexed row-major: for a 2D grid `[rows, cols]` the token at
//! `(r, c)` is `r * cols + c`; for 3D `[frames, rows, cols]` it is
//! `(f * rows + r) * cols + c`.
//!
//! 2D grids with power-of-two sides use the classic Hilbert curve (tiled
//! along the longer axis for non-square grids, so every step is still a unit
//! step). 3D grids of any size use a generalized Gilbert traversal; it is a
//! bijection for every shape and is unit-step for even-sided grids, but it is
//! only an approximation of a true Hilbert curve.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::SeqTensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Permutation {
    order: Vec<usize>,
    #[serde(skip)]
    inverse: Vec<usize>,
}

impl Permutation {
    /// Validates that `order` is a bijection on `0..order.len()`.
    pub fn new(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &o) in order.iter().enumerate() {
            if o >= n || inverse[o] != usize::MAX {
                return Err(Error::invalid(format!("not a permutation: entry {o} at position {i}")));
            }
            inverse[o] = i;
        }
        Ok(Self { order, inverse })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            inverse: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// `inverse()[order()[i]] == i`.
    pub fn inverse_map(&self) -> &[usize] {
        &self.inverse
    }

    pub fn inverse(&self) -> Permutation {
        Permutation {
            order: self.inverse.clone(),
            inverse: self.order.clone(),
        }
    }

    /// Output row `i` is input row `order[i]`.
    pub fn apply(&self, x: &SeqTensor) -> Result<SeqTensor> {
        if x.rows() != self.len() {
            return Err(Error::mismatch(
                "apply_permutation",
                format!("{} rows", self.len()),
                x.rows(),
            ));
        }
        let mut data = Vec::with_capacity(x.rows() * x.cols());
        for &src in &self.order {
            data.extend_from_slice(x.row(src));
        }
        Ok(SeqTensor::from_vec_unchecked(x.rows(), x.cols(), data))
    }
}

pub fn invert_permutation(p: &Permutation) -> Permutation {
    p.inverse()
}

pub fn apply_permutation(x: &SeqTensor, p: &Permutation) -> Result<SeqTensor> {
    p.apply(x)
}

/// Space-filling-curve order over a 2D or 3D grid.
pub fn hilbert_order(grid: &[usize]) -> Result<Permutation> {
    if grid.contains(&0) {
        return Err(Error::invalid(format!("grid axes must be positive, got {grid:?}")));
    }
    let order = match *grid {
        [rows, cols] => {
            if !rows.is_power_of_two() || !cols.is_power_of_two() {
                return Err(Error::invalid(format!(
                    "2D Hilbert order needs power-of-two axes, got {rows}x{cols}"
                )));
            }
            hilbert_2d(rows, cols).into_iter().map(|(r, c)| r * cols + c).collect()
        }
        [frames, rows, cols] => gilbert_3d(frames, rows, cols)
            .into_iter()
            .map(|(f, r, c)| (f * rows + r) * cols + c)
            .collect(),
        _ => {
            return Err(Error::invalid(format!(
                "grid must have 2 or 3 axes, got {}",
                grid.len()
            )));
        }
    };
    Permutation::new(order)
}

/// Classic Hilbert index → (x, y) for an `n × n` grid, `n` a power of two.
fn hilbert_d2xy(n: usize, d: usize) -> (usize, usize) {
    let (mut x, mut y) = (0, 0);
    let mut t = d;
    let mut s = 1;
    while s < n {
        let rx = 1 & (t / 2);
        let ry = 1 & (t ^ rx);
        if ry == 0 {
            if rx == 1 {
                x = s - 1 - x;
                y = s - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        x += s * rx;
        y += s * ry;
        t /= 4;
        s *= 2;
    }
    (x, y)
}

/// (row, col) visit order for a power-of-two grid. Each square tile of side
/// `min(rows, cols)` runs from its `(0, 0)` corner to the corner one step
/// before the next tile along the long axis.
fn hilbert_2d(rows: usize, cols: usize) -> Vec<(usize, usize)> {
    let side = rows.min(cols);
    let tiles = rows.max(cols) / side;
    let along_rows = rows >= cols;
    let mut out = Vec::with_capacity(rows * cols);
    for tile in 0..tiles {
        for d in 0..side * side {
            // x runs along the long axis, y along the short one.
            let (x, y) = hilbert_d2xy(side, d);
            let x = x + tile * side;
            out.push(if along_rows { (x, y) } else { (y, x) });
        }
    }
    out
}

type V3 = [i64; 3];

fn add(a: V3, b: V3) -> V3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}
fn sub(a: V3, b: V3) -> V3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}
fn neg(a: V3) -> V3 {
    [-a[0], -a[1], -a[2]]
}
fn half(a: V3) -> V3 {
    // Floor division to match the reference construction for negative axes.
    [a[0].div_euclid(2), a[1].div_euclid(2), a[2].div_euclid(2)]
}
fn sgn(a: V3) -> V3 {
    [a[0].signum(), a[1].signum(), a[2].signum()]
}
fn extent(a: V3) -> i64 {
    (a[0] + a[1] + a[2]).abs()
}

/// Generalized Hilbert ("Gilbert") traversal of a `frames × rows × cols`
/// box, returned as `(frame, row, col)`.
fn gilbert_3d(frames: usize, rows: usize, cols: usize) -> Vec<(usize, usize, usize)> {
    // Axis order inside the recursion is (x=col, y=row, z=frame).
    let (w, h, d) = (cols as i64, rows as i64, frames as i64);
    let mut out = Vec::with_capacity(frames * rows * cols);
    let o = [0, 0, 0];
    if w >= h && w >= d {
        gilbert_rec(o, [w, 0, 0], [0, h, 0], [0, 0, d], &mut out);
    } else if h >= w && h >= d {
        gilbert_rec(o, [0, h, 0], [w, 0, 0], [0, 0, d], &mut out);
    } else {
        gilbert_rec(o, [0, 0, d], [w, 0, 0], [0, h, 0], &mut out);
    }
    out.into_iter()
        .map(|p| (p[2] as usize, p[1] as usize, p[0] as usize))
        .collect()
}

fn gilbert_rec(p: V3, a: V3, b: V3, c: V3, out: &mut Vec<V3>) {
    let (w, h, d) = (extent(a), extent(b), extent(c));
    let (da, db, dc) = (sgn(a), sgn(b), sgn(c));

    let line = |mut p: V3, step: V3, n: i64, out: &mut Vec<V3>| {
        for _ in 0..n {
            out.push(p);
            p = add(p, step);
        }
    };
    if h == 1 && d == 1 {
        return line(p, da, w, out);
    }
    if w == 1 && d == 1 {
        return line(p, db, h, out);
    }
    if w == 1 && h == 1 {
        return line(p, dc, d, out);
    }

    let (mut a2, mut b2, mut c2) = (half(a), half(b), half(c));
    if extent(a2) % 2 == 1 && w > 2 {
        a2 = add(a2, da);
    }
    if extent(b2) % 2 == 1 && h > 2 {
        b2 = add(b2, db);
    }
    if extent(c2) % 2 == 1 && d > 2 {
        c2 = add(c2, dc);
    }

    if 2 * w > 3 * h && 2 * w > 3 * d {
        // Wide: split along a only.
        gilbert_rec(p, a2, b, c, out);
        gilbert_rec(add(p, a2), sub(a, a2), b, c, out);
    } else if 3 * h > 4 * d {
        // Do not split along c.
        gilbert_rec(p, b2, c, a2, out);
        gilbert_rec(add(p, b2), a, sub(b, b2), c, out);
        gilbert_rec(add(add(p, sub(a, da)), sub(b2, db)), neg(b2), c, neg(sub(a, a2)), out);
    } else if 3 * d > 4 * h {
        // Do not split along b.
        gilbert_rec(p, c2, a2, b, out);
        gilbert_rec(add(p, c2), a, b, sub(c, c2), out);
        gilbert_rec(add(add(p, sub(a, da)), sub(c2, dc)), neg(c2), neg(sub(a, a2)), b, out);
    } else {
        gilbert_rec(p, b2, c2, a2, out);
        gilbert_rec(add(p, b2), c, a2, sub(b, b2), out);
        gilbert_rec(add(add(p, sub(b2, db)), sub(c, dc)), a, neg(b2), neg(sub(c, c2)), out);
        gilbert_rec(
            add(add(add(p, sub(a, da)), b2), sub(c, dc)),
            neg(c),
            neg(sub(a, a2)),
            sub(b, b2),
            out,
        );
        gilbert_rec(add(add(p, sub(a, da)), sub(b2, db)), neg(b2), c2, neg(sub(a, a2)), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;
    use proptest::prelude::*;

    fn coords_2d(order: &[usize], cols: usize) -> Vec<(i64, i64)> {
        order.iter().map(|&t| ((t / cols) as i64, (t % cols) as i64)).collect()
    }

    fn max_step_3d(order: &[usize], rows: usize, cols: usize) -> i64 {
        let xyz = |t: usize| {
            let c = t % cols;
            let r = (t / cols) % rows;
            let f = t / (rows * cols);
            [f as i64, r as i64, c as i64]
        };
        order
            .windows(2)
            .map(|w| {
                let (a, b) = (xyz(w[0]), xyz(w[1]));
                (0..3).map(|i| (a[i] - b[i]).abs()).sum::<i64>()
            })
            .max()
            .unwrap_or(0)
    }

    #[test]
    fn degenerate_grids_are_identity() {
        assert_eq!(hilbert_order(&[1, 8]).unwrap(), Permutation::identity(8));
        assert_eq!(hilbert_order(&[8, 1]).unwrap(), Permutation::identity(8));
    }

    #[test]
    fn first_order_curve() {
        let p = hilbert_order(&[2, 2]).unwrap();
        assert_eq!(coords_2d(p.order(), 2), vec![(0, 0), (0, 1), (1, 1), (1, 0)]);
    }

    #[test]
    fn unit_steps_on_power_of_two_grids() {
        for (r, c) in [(4, 4), (2, 8), (8, 2), (16, 4), (32, 32), (1, 2)] {
            let p = hilbert_order(&[r, c]).unwrap();
            let xy = coords_2d(p.order(), c);
            for w in xy.windows(2) {
                assert_eq!((w[0].0 - w[1].0).abs() + (w[0].1 - w[1].1).abs(), 1, "{r}x{c}");
            }
        }
    }

    #[test]
    fn rejects_non_power_of_two_2d() {
        assert!(hilbert_order(&[3, 4]).is_err());
        assert!(hilbert_order(&[4]).is_err());
        assert!(hilbert_order(&[0, 4, 4]).is_err());
    }

    #[test]
    fn gilbert_3d_bijective_for_odd_and_even_shapes() {
        for shape in [
            [2, 2, 2],
            [4, 4, 4],
            [3, 5, 7],
            [1, 6, 10],
            [5, 1, 3],
            [8, 4, 2],
            [2, 6, 6],
            [7, 3, 2],
        ] {
            let p = hilbert_order(&shape).unwrap();
            assert_eq!(p.len(), shape.iter().product::<usize>());
        }
    }

    #[test]
    fn gilbert_3d_unit_steps_on_even_grids() {
        for [f, r, c] in [[2, 2, 2], [4, 4, 4], [8, 4, 2], [2, 8, 8], [4, 6, 8], [2, 2, 16]] {
            let p = hilbert_order(&[f, r, c]).unwrap();
            assert_eq!(max_step_3d(p.order(), r, c), 1, "{f}x{r}x{c}");
        }
    }

    #[test]
    fn apply_and_invert() {
        let x = Matrix::from_rows(&[[1.0], [2.0], [3.0]]).unwrap();
        assert_eq!(Permutation::identity(3).apply(&x).unwrap(), x);
        let rev = Permutation::new(vec![2, 1, 0]).unwrap();
        assert_eq!(rev.apply(&x).unwrap().as_slice(), &[3.0, 2.0, 1.0]);

        let p = Permutation::new(vec![2, 0, 1]).unwrap();
        assert_eq!(invert_permutation(&p).order(), &[1, 2, 0]);
        assert_eq!(invert_permutation(&Permutation::identity(4)), Permutation::identity(4));
        assert!(p.apply(&Matrix::zeros(4, 1)).is_err());
    }

    #[test]
    fn rejects_non_bijection() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3, 1]).is_err());
    }

    proptest! {
        #[test]
        fn inverse_is_an_involution_and_recovers_input(seed in any::<u64>(), n in 1usize..64) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng);
            let p = Permutation::new(order).unwrap();
            prop_assert_eq!(p.inverse().inverse(), p.clone());
            for i in 0..n {
                prop_assert_eq!(p.inverse_map()[p.order()[i]], i);
            }
            let x = Matrix::new(n, 2, (0..2 * n).map(|v| v as f64 * 0.37).collect()).unwrap();
            let back = p.inverse().apply(&p.apply(&x).unwrap()).unwrap();
            prop_assert_eq!(back, x);
        }

        #[test]
        fn gilbert_3d_is_bijection(f in 1usize..7, r in 1usize..7, c in 1usize..7) {
            prop_assert!(hilbert_order(&[f, r, c]).is_ok());
        }
    }
}
