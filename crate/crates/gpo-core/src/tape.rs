//! Minimal reverse-mode differentiation tape over dynamic-rank f64 arrays.
//!
//! Nodes are appended in evaluation order, so reverse index order is a
//! topological order for the backward sweep. Gradient accumulation is
//! sequential and index-ordered, keeping results bit-deterministic.

use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use std::cell::RefCell;
use std::rc::Rc;

type BackFn = Box<dyn Fn(&ArrayD<f64>) -> ArrayD<f64>>;

struct Node {
    value: Rc<ArrayD<f64>>,
    deps: Vec<(usize, BackFn)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

fn as2(x: &ArrayD<f64>) -> Array2<f64> {
    x.clone().into_dimensionality().expect("rank-2 value expected")
}

fn as1(x: &ArrayD<f64>) -> Array1<f64> {
    x.clone().into_dimensionality().expect("rank-1 value expected")
}

fn scalar_of(x: &ArrayD<f64>) -> f64 {
    *x.iter().next().expect("nonempty scalar")
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: ArrayD<f64>, deps: Vec<(usize, BackFn)>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            deps,
        });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Leaf node (parameter or constant input).
    pub fn var(&self, value: ArrayD<f64>) -> Var<'_> {
        self.push(value, Vec::new())
    }

    pub fn var2(&self, value: Array2<f64>) -> Var<'_> {
        self.var(value.into_dyn())
    }

    pub fn var1(&self, value: Array1<f64>) -> Var<'_> {
        self.var(value.into_dyn())
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.var(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn value(&self, v: Var) -> Rc<ArrayD<f64>> {
        self.nodes.borrow()[v.idx].value.clone()
    }

    /// Reverse sweep from a scalar loss; returns one gradient slot per node
    /// (interior slots are dropped once consumed, leaves retain theirs).
    pub fn backward(&self, loss: Var) -> Vec<Option<ArrayD<f64>>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.idx] = Some(ArrayD::from_elem(nodes[loss.idx].value.shape(), 1.0));
        for i in (0..nodes.len()).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            for (pidx, back) in &nodes[i].deps {
                let contrib = back(&g);
                match &mut grads[*pidx] {
                    Some(acc) => *acc += &contrib,
                    slot @ None => *slot = Some(contrib),
                }
            }
            if nodes[i].deps.is_empty() {
                grads[i] = Some(g);
            }
        }
        grads
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Rc<ArrayD<f64>> {
        self.tape.value(*self)
    }

    pub fn scalar_value(&self) -> f64 {
        scalar_of(&self.value())
    }

    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() + &*other.value();
        self.tape.push(
            v,
            vec![
                (self.idx, Box::new(|g| g.clone())),
                (other.idx, Box::new(|g| g.clone())),
            ],
        )
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        let v = &*self.value() - &*other.value();
        self.tape.push(
            v,
            vec![
                (self.idx, Box::new(|g| g.clone())),
                (other.idx, Box::new(|g| -g)),
            ],
        )
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        let a = self.value();
        let b = other.value();
        let v = &*a * &*b;
        let (ac, bc) = (a.clone(), b.clone());
        self.tape.push(
            v,
            vec![
                (self.idx, Box::new(move |g| g * &*bc)),
                (other.idx, Box::new(move |g| g * &*ac)),
            ],
        )
    }

    pub fn neg(self) -> Var<'t> {
        let v = -&*self.value();
        self.tape.push(v, vec![(self.idx, Box::new(|g| -g))])
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = &*self.value() * c;
        self.tape.push(v, vec![(self.idx, Box::new(move |g| g * c))])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = &*self.value() + c;
        self.tape.push(v, vec![(self.idx, Box::new(|g| g.clone()))])
    }

    pub fn relu(self) -> Var<'t> {
        let x = self.value();
        let v = x.mapv(|t| t.max(0.0));
        let xc = x.clone();
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let mut out = g.clone();
                    out.zip_mut_with(&xc, |gv, &xv| {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    });
                    out
                }),
            )],
        )
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        let vc = Rc::new(v.clone());
        self.tape.push(v, vec![(self.idx, Box::new(move |g| g * &*vc))])
    }

    pub fn recip(self) -> Var<'t> {
        let v = self.value().mapv(|t| 1.0 / t);
        let vc = Rc::new(v.clone());
        self.tape.push(
            v,
            vec![(self.idx, Box::new(move |g| -(g * &(&*vc * &*vc))))],
        )
    }

    /// Elementwise max with a constant (used for the scale floor).
    pub fn max_scalar(self, c: f64) -> Var<'t> {
        let x = self.value();
        let v = x.mapv(|t| t.max(c));
        let xc = x.clone();
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let mut out = g.clone();
                    out.zip_mut_with(&xc, |gv, &xv| {
                        if xv <= c {
                            *gv = 0.0;
                        }
                    });
                    out
                }),
            )],
        )
    }

    pub fn softplus(self) -> Var<'t> {
        let x = self.value();
        let v = x.mapv(crate::basis::softplus);
        let xc = x.clone();
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let mut out = g.clone();
                    out.zip_mut_with(&xc, |gv, &xv| {
                        *gv *= crate::operator::sigmoid(xv);
                    });
                    out
                }),
            )],
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(crate::operator::sigmoid);
        let vc = Rc::new(v.clone());
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let mut out = g.clone();
                    out.zip_mut_with(&vc, |gv, &yv| {
                        *gv *= yv * (1.0 - yv);
                    });
                    out
                }),
            )],
        )
    }

    /// Matrix product of rank-2 values.
    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        let a = as2(&self.value());
        let b = as2(&other.value());
        let v = a.dot(&b).into_dyn();
        let (ac, bc) = (a, b);
        self.tape.push(
            v,
            vec![
                (
                    self.idx,
                    Box::new(move |g| as2(g).dot(&bc.t()).into_dyn()),
                ),
                (
                    other.idx,
                    Box::new(move |g| ac.t().dot(&as2(g)).into_dyn()),
                ),
            ],
        )
    }

    /// Rank-2 transpose.
    pub fn t(self) -> Var<'t> {
        let v = as2(&self.value()).t().to_owned().into_dyn();
        self.tape.push(
            v,
            vec![(self.idx, Box::new(|g| as2(g).t().to_owned().into_dyn()))],
        )
    }

    /// `x (N,M) + b (M,)` broadcast over rows.
    pub fn add_row(self, bias: Var<'t>) -> Var<'t> {
        let x = as2(&self.value());
        let b = as1(&bias.value());
        let v = (&x + &b).into_dyn();
        self.tape.push(
            v,
            vec![
                (self.idx, Box::new(|g| g.clone())),
                (
                    bias.idx,
                    Box::new(|g| as2(g).sum_axis(Axis(0)).into_dyn()),
                ),
            ],
        )
    }

    /// Row sums of a rank-2 value, shape (N, 1).
    pub fn row_sum(self) -> Var<'t> {
        let x = as2(&self.value());
        let n = x.nrows();
        let m = x.ncols();
        let v = x
            .sum_axis(Axis(1))
            .into_shape_with_order((n, 1))
            .unwrap()
            .into_dyn();
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let g2 = as2(g);
                    Array2::from_shape_fn((n, m), |(j, _)| g2[[j, 0]]).into_dyn()
                }),
            )],
        )
    }

    /// `x (N,M) * c (N,1)` broadcast across columns.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        let x = as2(&self.value());
        let c = as2(&col.value());
        let (n, m) = x.dim();
        let v = Array2::from_shape_fn((n, m), |(j, i)| x[[j, i]] * c[[j, 0]]).into_dyn();
        let (xc, cc) = (x, c);
        self.tape.push(
            v,
            vec![
                (
                    self.idx,
                    Box::new(move |g| {
                        let g2 = as2(g);
                        Array2::from_shape_fn((n, m), |(j, i)| g2[[j, i]] * cc[[j, 0]]).into_dyn()
                    }),
                ),
                (
                    col.idx,
                    Box::new(move |g| {
                        let g2 = as2(g);
                        Array2::from_shape_fn((n, 1), |(j, _)| {
                            (0..m).map(|i| g2[[j, i]] * xc[[j, i]]).sum()
                        })
                        .into_dyn()
                    }),
                ),
            ],
        )
    }

    /// Row-wise softmax of a rank-2 value.
    pub fn softmax_rows(self) -> Var<'t> {
        let x = as2(&self.value());
        let y = crate::basis::softmax_rows(&x);
        let yc = y.clone();
        self.tape.push(
            y.into_dyn(),
            vec![(
                self.idx,
                Box::new(move |g| {
                    let g2 = as2(g);
                    let (n, m) = yc.dim();
                    let mut out = Array2::zeros((n, m));
                    for j in 0..n {
                        let dot: f64 = (0..m).map(|i| g2[[j, i]] * yc[[j, i]]).sum();
                        for i in 0..m {
                            out[[j, i]] = yc[[j, i]] * (g2[[j, i]] - dot);
                        }
                    }
                    out.into_dyn()
                }),
            )],
        )
    }

    /// Sum of all entries, rank-0 result.
    pub fn sum_all(self) -> Var<'t> {
        let x = self.value();
        let shape: Vec<usize> = x.shape().to_vec();
        let v = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| ArrayD::from_elem(IxDyn(&shape), scalar_of(g))),
            )],
        )
    }

    /// `(N, G*d) -> (N, G)`: sums each contiguous group of `d` columns.
    pub fn sum_groups(self, d: usize) -> Var<'t> {
        let x = as2(&self.value());
        let (n, gd) = x.dim();
        let g_modes = gd / d;
        let v = Array2::from_shape_fn((n, g_modes), |(j, i)| (0..d).map(|l| x[[j, i * d + l]]).sum()).into_dyn();
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let g2 = as2(g);
                    Array2::from_shape_fn((n, gd), |(j, c)| g2[[j, c / d]]).into_dyn()
                }),
            )],
        )
    }

    /// `(N, G*d) -> (N, d)`: sums columns with stride `d` (over components).
    pub fn sum_strided(self, d: usize) -> Var<'t> {
        let x = as2(&self.value());
        let (n, gd) = x.dim();
        let g_modes = gd / d;
        let v = Array2::from_shape_fn((n, d), |(j, l)| (0..g_modes).map(|i| x[[j, i * d + l]]).sum()).into_dyn();
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let g2 = as2(g);
                    Array2::from_shape_fn((n, gd), |(j, c)| g2[[j, c % d]]).into_dyn()
                }),
            )],
        )
    }

    /// `(N, G) -> (N, G*d)`: each column repeated `d` times contiguously.
    pub fn repeat_interleave_cols(self, d: usize) -> Var<'t> {
        let x = as2(&self.value());
        let (n, g_modes) = x.dim();
        let v = Array2::from_shape_fn((n, g_modes * d), |(j, c)| x[[j, c / d]]).into_dyn();
        self.tape.push(
            v,
            vec![(
                self.idx,
                Box::new(move |g| {
                    let g2 = as2(g);
                    Array2::from_shape_fn((n, g_modes), |(j, i)| (0..d).map(|l| g2[[j, i * d + l]]).sum())
                        .into_dyn()
                }),
            )],
        )
    }

    /// Multiply a tensor by a rank-0 variable.
    pub fn scale_var(self, s: Var<'t>) -> Var<'t> {
        let x = self.value();
        let sv = scalar_of(&s.value());
        let v = &*x * sv;
        let xc = x.clone();
        self.tape.push(
            v,
            vec![
                (self.idx, Box::new(move |g| g * sv)),
                (
                    s.idx,
                    Box::new(move |g| {
                        let dot: f64 = g.iter().zip(xc.iter()).map(|(a, b)| a * b).sum();
                        ArrayD::from_elem(IxDyn(&[]), dot)
                    }),
                ),
            ],
        )
    }
}

/// Column-wise concatenation of rank-2 variables.
pub fn concat_cols<'t>(tape: &'t Tape, vars: &[Var<'t>]) -> Var<'t> {
    let mats: Vec<Array2<f64>> = vars.iter().map(|v| as2(&v.value())).collect();
    let n = mats[0].nrows();
    let total: usize = mats.iter().map(|m| m.ncols()).sum();
    let mut out = Array2::zeros((n, total));
    let mut offsets = Vec::with_capacity(mats.len());
    let mut off = 0;
    for m in &mats {
        out.slice_mut(ndarray::s![.., off..off + m.ncols()]).assign(m);
        offsets.push((off, m.ncols()));
        off += m.ncols();
    }
    let deps = vars
        .iter()
        .zip(offsets)
        .map(|(v, (off, w))| {
            let f: BackFn = Box::new(move |g: &ArrayD<f64>| {
                as2(g).slice(ndarray::s![.., off..off + w]).to_owned().into_dyn()
            });
            (v.idx, f)
        })
        .collect();
    tape.push(out.into_dyn(), deps)
}
