//! Vector-valued reverse-mode tape for assembling losses.
//!
//! Leaves hold network output streams or constants; every operation checks
//! shapes when it is recorded. [`Tape::backward`] returns the adjoint of
//! every tracked node, which is then pulled back through the networks.

use std::rc::Rc;

use ndarray::Array2;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Const,
    Leaf,
    Param(usize),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<Vec<f64>>),
    MulScalar(Var, Var),
    Exp(Var),
    Repeat(Var, usize),
    GroupDot(Var, Rc<Vec<f64>>),
    GroupMatVec(Var, Rc<Array2<f64>>),
    Gather(Var, Rc<Vec<usize>>),
    SumSquares(Var, Option<Rc<Vec<f64>>>, f64),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Vec<f64>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    n_params: usize,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Adjoints {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<f64>,
}

impl Adjoints {
    /// `∂root/∂var`, or `None` if the root does not depend on `var`.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads[var.0].as_deref()
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<f64>> {
        self.grads[var.0].take()
    }

    pub fn param(&self, index: usize) -> f64 {
        self.params.get(index).copied().unwrap_or(0.0)
    }
}

/// Neumaier-compensated `scale · Σ w_k x_k²`.
fn compensated_sum_squares(x: &[f64], w: Option<&[f64]>, scale: f64) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for (k, &xk) in x.iter().enumerate() {
        let term = xk * xk * w.map_or(1.0, |w| w[k]);
        let t = sum + term;
        if sum.abs() >= term.abs() {
            comp += (sum - t) + term;
        } else {
            comp += (term - t) + sum;
        }
        sum = t;
    }
    scale * (sum + comp)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Vec<f64>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn len_of(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    /// Untracked data; receives no adjoint.
    pub fn constant(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Const, value, false)
    }

    /// Tracked input whose adjoint is reported.
    pub fn leaf(&mut self, value: Vec<f64>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Learnable scalar with index `index` in [`Adjoints::param`].
    pub fn param(&mut self, index: usize, value: f64) -> Var {
        self.n_params = self.n_params.max(index + 1);
        self.push(Op::Param(index), vec![value], true)
    }

    fn same_len(&self, a: Var, b: Var, what: &str) -> Result<usize> {
        let (la, lb) = (self.len_of(a), self.len_of(b));
        if la != lb {
            return Err(Error::Tape(format!("{what}: operand lengths {la} and {lb} differ")));
        }
        Ok(la)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "add")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), v, t))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "sub")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Sub(a, b), v, t))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_len(a, b, "mul")?;
        let v = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let t = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Mul(a, b), v, t))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).iter().map(|x| c * x).collect();
        let t = self.tracked(a);
        self.push(Op::Scale(a, c), v, t)
    }

    pub fn mul_const(&mut self, a: Var, c: Rc<Vec<f64>>) -> Result<Var> {
        if c.len() != self.len_of(a) {
            return Err(Error::Tape(format!("mul_const: {} factors for {} entries", c.len(), self.len_of(a))));
        }
        let v = self.value(a).iter().zip(c.iter()).map(|(x, y)| x * y).collect();
        let t = self.tracked(a);
        Ok(self.push(Op::MulConst(a, c), v, t))
    }

    /// Vector times a one-entry node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.len_of(s) != 1 {
            return Err(Error::Tape("mul_scalar: factor is not a scalar".into()));
        }
        let c = self.scalar(s);
        let v = self.value(a).iter().map(|x| c * x).collect();
        let t = self.tracked(a) || self.tracked(s);
        Ok(self.push(Op::MulScalar(a, s), v, t))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|x| x.exp()).collect();
        let t = self.tracked(a);
        self.push(Op::Exp(a), v, t)
    }

    /// Each entry repeated `n` times in place: `[a, b] → [a, a, b, b]` for `n = 2`.
    pub fn repeat(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::Tape("repeat: zero copies".into()));
        }
        let v = self.value(a).iter().flat_map(|&x| std::iter::repeat_n(x, n)).collect();
        let t = self.tracked(a);
        Ok(self.push(Op::Repeat(a, n), v, t))
    }

    /// `out[i] = Σ_j a[i g + j] w[j]` with `g = w.len()`.
    pub fn group_dot(&mut self, a: Var, w: Rc<Vec<f64>>) -> Result<Var> {
        let g = w.len();
        let n = self.len_of(a);
        if g == 0 || n % g != 0 {
            return Err(Error::Tape(format!("group_dot: length {n} is not a multiple of {g}")));
        }
        let v = self.value(a).chunks_exact(g).map(|c| c.iter().zip(w.iter()).map(|(x, y)| x * y).sum()).collect();
        let t = self.tracked(a);
        Ok(self.push(Op::GroupDot(a, w), v, t))
    }

    /// `out[i g + r] = Σ_j m[r, j] a[i g + j]` with `g = m.ncols()`.
    pub fn group_matvec(&mut self, a: Var, m: Rc<Array2<f64>>) -> Result<Var> {
        let g = m.ncols();
        let n = self.len_of(a);
        if m.nrows() != g || g == 0 || n % g != 0 {
            return Err(Error::Tape(format!("group_matvec: length {n} does not fit a {}x{g} block", m.nrows())));
        }
        let mut v = vec![0.0; n];
        for (src, dst) in self.value(a).chunks_exact(g).zip(v.chunks_exact_mut(g)) {
            for r in 0..g {
                dst[r] = (0..g).map(|j| m[[r, j]] * src[j]).sum();
            }
        }
        let t = self.tracked(a);
        Ok(self.push(Op::GroupMatVec(a, m), v, t))
    }

    pub fn gather(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let n = self.len_of(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Tape(format!("gather: index {bad} out of range for length {n}")));
        }
        let src = self.value(a);
        let v = idx.iter().map(|&i| src[i]).collect();
        let t = self.tracked(a);
        Ok(self.push(Op::Gather(a, idx), v, t))
    }

    /// Scalar `scale · Σ_k w_k a_k²` with compensated summation.
    pub fn sum_squares(&mut self, a: Var, w: Option<Rc<Vec<f64>>>, scale: f64) -> Result<Var> {
        if let Some(w) = &w {
            if w.len() != self.len_of(a) {
                return Err(Error::Tape(format!("sum_squares: {} weights for {} entries", w.len(), self.len_of(a))));
            }
        }
        let v = compensated_sum_squares(self.value(a), w.as_deref().map(|w| w.as_slice()), scale);
        let t = self.tracked(a);
        Ok(self.push(Op::SumSquares(a, w, scale), vec![v], t))
    }

    /// `mean(a²)`.
    pub fn mean_square(&mut self, a: Var) -> Result<Var> {
        let n = self.len_of(a);
        if n == 0 {
            return Err(Error::Tape("mean_square of an empty vector".into()));
        }
        self.sum_squares(a, None, 1.0 / n as f64)
    }

    /// Adjoints of every tracked node with respect to the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Adjoints> {
        if self.len_of(root) != 1 {
            return Err(Error::Tape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut params = vec![0.0; self.n_params];
        grads[root.0] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, f: impl Fn(usize) -> f64) {
            if !nodes[v.0].tracked {
                return;
            }
            let n = nodes[v.0].value.len();
            match &mut grads[v.0] {
                Some(g) => g.iter_mut().enumerate().for_each(|(k, gk)| *gk += f(k)),
                slot @ None => *slot = Some((0..n).map(f).collect()),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const | Op::Leaf => {}
                Op::Param(p) => params[*p] += g[0],
                Op::Add(a, b) => {
                    acc(&mut grads, &self.nodes, *a, |k| g[k]);
                    acc(&mut grads, &self.nodes, *b, |k| g[k]);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, &self.nodes, *a, |k| g[k]);
                    acc(&mut grads, &self.nodes, *b, |k| -g[k]);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    acc(&mut grads, &self.nodes, *a, |k| g[k] * vb[k]);
                    acc(&mut grads, &self.nodes, *b, |k| g[k] * va[k]);
                }
                Op::Scale(a, c) => acc(&mut grads, &self.nodes, *a, |k| c * g[k]),
                Op::MulConst(a, c) => acc(&mut grads, &self.nodes, *a, |k| c[k] * g[k]),
                Op::MulScalar(a, s) => {
                    let va = &self.nodes[a.0].value;
                    let c = self.nodes[s.0].value[0];
                    acc(&mut grads, &self.nodes, *a, |k| c * g[k]);
                    let ds: f64 = g.iter().zip(va).map(|(x, y)| x * y).sum();
                    acc(&mut grads, &self.nodes, *s, |_| ds);
                }
                Op::Exp(a) => acc(&mut grads, &self.nodes, *a, |k| g[k] * node.value[k]),
                Op::Repeat(a, n) => {
                    let n = *n;
                    acc(&mut grads, &self.nodes, *a, |k| g[k * n..(k + 1) * n].iter().sum());
                }
                Op::GroupDot(a, w) => {
                    let gs = w.len();
                    acc(&mut grads, &self.nodes, *a, |k| g[k / gs] * w[k % gs]);
                }
                Op::GroupMatVec(a, m) => {
                    let gs = m.ncols();
                    acc(&mut grads, &self.nodes, *a, |k| {
                        let (blk, j) = (k / gs, k % gs);
                        (0..gs).map(|r| m[[r, j]] * g[blk * gs + r]).sum()
                    });
                }
                Op::Gather(a, idx) => {
                    if self.nodes[a.0].tracked {
                        let mut scatter = vec![0.0; self.nodes[a.0].value.len()];
                        for (k, &i) in idx.iter().enumerate() {
                            scatter[i] += g[k];
                        }
                        acc(&mut grads, &self.nodes, *a, |k| scatter[k]);
                    }
                }
                Op::SumSquares(a, w, scale) => {
                    let va = &self.nodes[a.0].value;
                    let c = 2.0 * scale * g[0];
                    acc(&mut grads, &self.nodes, *a, |k| c * va[k] * w.as_ref().map_or(1.0, |w| w[k]));
                }
            }
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Adjoints { grads, params })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Builds `L(x, s)` exercising every op; returns (tape, root, x leaf).
    fn build(x: &[f64], s: f64) -> (Tape, Var, Var) {
        let mut t = Tape::new();
        let xv = t.leaf(x.to_vec());
        let sp = t.param(0, s);
        let w = Rc::new(vec![0.2, 0.3, 0.5]);
        let m = Rc::new(Array2::from_shape_vec((3, 3), vec![1.0, -0.5, 0.2, 0.3, 0.9, -1.1, 0.0, 0.4, 0.7]).unwrap());
        let e = t.exp(xv);
        let y = t.group_matvec(e, m).unwrap();
        let d = t.group_dot(y, w).unwrap();
        let r = t.repeat(d, 3).unwrap();
        let p = t.mul(r, xv).unwrap();
        let q = t.mul_scalar(p, sp).unwrap();
        let c = t.constant((0..x.len()).map(|k| k as f64 * 0.1).collect());
        let q2 = t.sub(q, c).unwrap();
        let q3 = t.add(q2, xv).unwrap();
        let mc = t.mul_const(q3, Rc::new((0..x.len()).map(|k| 1.0 + 0.05 * k as f64).collect())).unwrap();
        let g = t.gather(mc, Rc::new(vec![0, 2, 2, 5])).unwrap();
        let sc = t.scale(g, -1.5);
        let l1 = t.mean_square(sc).unwrap();
        let l2 = t.sum_squares(mc, Some(Rc::new(vec![0.5; x.len()])), 0.25).unwrap();
        let root = t.add(l1, l2).unwrap();
        (t, root, xv)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..10 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let s = rng.random_range(0.5..2.0);
            let (t, root, xv) = build(&x, s);
            let adj = t.backward(root).unwrap();
            let gx = adj.get(xv).unwrap().to_vec();
            let h = 1e-6;
            for k in 0..x.len() {
                let mut xp = x.clone();
                xp[k] += h;
                let mut xm = x.clone();
                xm[k] -= h;
                let (tp, rp, _) = build(&xp, s);
                let (tm, rm, _) = build(&xm, s);
                let fd = (tp.scalar(rp) - tm.scalar(rm)) / (2.0 * h);
                assert!((fd - gx[k]).abs() <= 1e-6 * fd.abs().max(1.0), "{k}: {fd} vs {}", gx[k]);
            }
            let (tp, rp, _) = build(&x, s + h);
            let (tm, rm, _) = build(&x, s - h);
            let fd = (tp.scalar(rp) - tm.scalar(rm)) / (2.0 * h);
            assert!((fd - adj.param(0)).abs() <= 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn shape_errors_at_assembly() {
        let mut t = Tape::new();
        let a = t.leaf(vec![1.0, 2.0]);
        let b = t.leaf(vec![1.0, 2.0, 3.0]);
        assert!(t.add(a, b).is_err());
        assert!(t.mul_scalar(a, b).is_err());
        assert!(t.group_dot(b, Rc::new(vec![1.0, 1.0])).is_err());
        assert!(t.gather(a, Rc::new(vec![2])).is_err());
        assert!(t.backward(a).is_err());
    }

    #[test]
    fn constants_receive_no_adjoint() {
        let mut t = Tape::new();
        let c = t.constant(vec![3.0]);
        let x = t.leaf(vec![2.0]);
        let p = t.mul(c, x).unwrap();
        let r = t.mean_square(p).unwrap();
        let adj = t.backward(r).unwrap();
        assert!(adj.get(c).is_none());
        assert_eq!(adj.get(x).unwrap(), &[36.0]);
    }

    #[test]
    fn compensated_sum_is_permutation_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut x: Vec<f64> = (0..5000).map(|_| rng.random_range(-1.0..1.0) * 10f64.powi(rng.random_range(-6..6))).collect();
        let a = compensated_sum_squares(&x, None, 1.0);
        for i in (1..x.len()).rev() {
            let j = rng.random_range(0..=i);
            x.swap(i, j);
        }
        let b = compensated_sum_squares(&x, None, 1.0);
        assert!((a - b).abs() <= 1e-14 * a);
    }
}
