use crate::error::{Result, TensorError};
use crate::{Float, Tensor};

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// Index of every output element into an operand of shape `src` broadcast to `out`.
fn broadcast_index(src: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        strides[i + offset] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut idx = Vec::with_capacity(total);
    let mut counter = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        idx.push(cur);
        for d in (0..rank).rev() {
            counter[d] += 1;
            cur += strides[d];
            if counter[d] < out[d] {
                break;
            }
            cur -= strides[d] * out[d];
            counter[d] = 0;
        }
    }
    idx
}

/// Sums `grad` (laid out as `out`) back onto an operand of `src_len` elements.
fn reduce_to<T: Float>(grad: &[T], index: &[usize], src_len: usize) -> Vec<T> {
    let mut g = vec![T::zero(); src_len];
    for (&i, &v) in index.iter().zip(grad) {
        g[i] += v;
    }
    g
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Float> Tensor<T> {
    fn binary(&self, rhs: &Tensor<T>, op: BinOp) -> Result<Tensor<T>> {
        let name = match op {
            BinOp::Add => "add",
            BinOp::Sub => "sub",
            BinOp::Mul => "mul",
            BinOp::Div => "div",
        };
        let apply = move |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        if self.shape() == rhs.shape() {
            let data: Vec<T> = self
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(&x, &y)| apply(x, y))
                .collect();
            let (a, b) = (self.clone(), rhs.clone());
            return Ok(Tensor::from_op(
                self.shape().to_vec(),
                data,
                vec![self.clone(), rhs.clone()],
                move |needs, _out, g| {
                    let ga = needs[0].then(|| match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().zip(b.data()).map(|(&g, &y)| g * y).collect(),
                        BinOp::Div => g.iter().zip(b.data()).map(|(&g, &y)| g / y).collect(),
                    });
                    let gb = needs[1].then(|| match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&g| -g).collect(),
                        BinOp::Mul => g.iter().zip(a.data()).map(|(&g, &x)| g * x).collect(),
                        BinOp::Div => g
                            .iter()
                            .zip(a.data())
                            .zip(b.data())
                            .map(|((&g, &x), &y)| -g * x / (y * y))
                            .collect(),
                    });
                    vec![ga, gb]
                },
            ));
        }
        let out_shape = broadcast_shape(name, self.shape(), rhs.shape())?;
        let ia = broadcast_index(self.shape(), &out_shape);
        let ib = broadcast_index(rhs.shape(), &out_shape);
        let (da, db) = (self.data(), rhs.data());
        let data: Vec<T> = ia
            .iter()
            .zip(&ib)
            .map(|(&i, &j)| apply(da[i], db[j]))
            .collect();
        let (a, b) = (self.clone(), rhs.clone());
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone(), rhs.clone()],
            move |needs, _out, g| {
                let (da, db) = (a.data(), b.data());
                let ga = needs[0].then(|| {
                    let local: Vec<T> = match op {
                        BinOp::Add | BinOp::Sub => g.to_vec(),
                        BinOp::Mul => g.iter().zip(&ib).map(|(&g, &j)| g * db[j]).collect(),
                        BinOp::Div => g.iter().zip(&ib).map(|(&g, &j)| g / db[j]).collect(),
                    };
                    reduce_to(&local, &ia, da.len())
                });
                let gb = needs[1].then(|| {
                    let local: Vec<T> = match op {
                        BinOp::Add => g.to_vec(),
                        BinOp::Sub => g.iter().map(|&g| -g).collect(),
                        BinOp::Mul => g.iter().zip(&ia).map(|(&g, &i)| g * da[i]).collect(),
                        BinOp::Div => g
                            .iter()
                            .zip(&ia)
                            .zip(&ib)
                            .map(|((&g, &i), &j)| -g * da[i] / (db[j] * db[j]))
                            .collect(),
                    };
                    reduce_to(&local, &ib, db.len())
                });
                vec![ga, gb]
            },
        ))
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinOp::Mul)
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(rhs, BinOp::Div)
    }

    /// `self * mul + add`, elementwise with scalar coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Tensor<T> {
        let (m, a) = (T::lit(mul), T::lit(add));
        let data = self.data().iter().map(|&x| x * m + a).collect();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |_, _, g| {
            vec![Some(g.iter().map(|&g| g * m).collect())]
        })
    }

    pub fn scale(&self, s: f64) -> Tensor<T> {
        self.affine(s, 0.0)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor<T> {
        self.affine(1.0, s)
    }

    pub fn neg(&self) -> Tensor<T> {
        self.affine(-1.0, 0.0)
    }

    /// Elementwise map whose derivative is expressed through input `x` and output `y`.
    fn unary<F, D>(&self, f: F, df: D) -> Tensor<T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let data = self.data().iter().map(|&x| f(x)).collect();
        let input = self.clone();
        Tensor::from_op(self.shape().to_vec(), data, vec![self.clone()], move |_, y, g| {
            let x = input.data();
            vec![Some(
                g.iter()
                    .zip(x)
                    .zip(y)
                    .map(|((&g, &x), &y)| g * df(x, y))
                    .collect(),
            )]
        })
    }

    pub fn relu(&self) -> Tensor<T> {
        self.unary(
            |x| if x > T::zero() { x } else { T::zero() },
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor<T> {
        let s = T::lit(slope);
        self.unary(
            move |x| if x > T::zero() { x } else { x * s },
            move |x, _| if x > T::zero() { T::one() } else { s },
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.unary(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&self) -> Tensor<T> {
        self.unary(
            |x| x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
            |x, _| T::one() / (T::one() + (-x).exp()),
        )
    }

    /// `|x|` with subgradient 0 at the origin.
    pub fn abs(&self) -> Tensor<T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sqr(&self) -> Tensor<T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Tensor<T> {
        self.unary(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn exp(&self) -> Tensor<T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }
}
