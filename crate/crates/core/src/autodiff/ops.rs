use super::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{
    conv2d_bias_grad, conv2d_forward, conv2d_grad_input, conv2d_grad_weight,
    conv2d_transposed_forward, ConvGeometry, Real, Shape, Tensor,
};

fn same_shape<T: Real>(g: &Graph<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa != sb {
        return Err(Error::ShapeMismatch { op, left: sa, right: sb });
    }
    Ok(())
}

struct Add;
impl<T: Real> Backward<T> for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        needs.iter().map(|&n| n.then(|| g.clone())).collect()
    }
}

struct Sub;
impl<T: Real> Backward<T> for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![needs[0].then(|| g.clone()), needs[1].then(|| g.map(|v| -v))]
    }
}

struct Mul;
impl<T: Real> Backward<T> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![
            needs[0].then(|| g.zip_map(x[1], |a, b| a * b).expect("mul shapes")),
            needs[1].then(|| g.zip_map(x[0], |a, b| a * b).expect("mul shapes")),
        ]
    }
}

struct Affine<T> {
    scale: T,
}
impl<T: Real> Backward<T> for Affine<T> {
    fn name(&self) -> &'static str {
        "affine"
    }
    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = self.scale;
        vec![Some(g.map(|v| v * s))]
    }
}

struct Relu;
impl<T: Real> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let out = g
            .zip_map(x[0], |gv, xv| if xv > T::zero() { gv } else { T::zero() })
            .expect("relu shapes");
        vec![Some(out)]
    }
}

struct Sigmoid;
impl<T: Real> Backward<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(&self, _: &[&Tensor<T>], y: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let out = g
            .zip_map(y, |gv, s| gv * s * (T::one() - s))
            .expect("sigmoid shapes");
        vec![Some(out)]
    }
}

/// Set of reduced axes for [`Graph::reduce_mean`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct MeanAxes([bool; 4]);

impl MeanAxes {
    pub fn new(axes: &[usize]) -> Result<Self> {
        let mut m = [false; 4];
        for &a in axes {
            if a >= 4 {
                return Err(Error::config(format!("reduction axis {a} out of range for a 4-axis tensor")));
            }
            m[a] = true;
        }
        Ok(MeanAxes(m))
    }

    pub fn all() -> Self {
        MeanAxes([true; 4])
    }

    fn reduced(&self, s: Shape) -> Shape {
        let d = s.dims();
        Shape::from_dims(std::array::from_fn(|i| if self.0[i] { 1 } else { d[i] }))
    }

    fn target_index(&self, s: Shape, out: Shape, idx: usize) -> usize {
        let st = s.strides();
        let d = s.dims();
        let os = out.strides();
        let mut t = 0;
        for a in 0..4 {
            let coord = (idx / st[a]) % d[a];
            if !self.0[a] {
                t += coord * os[a];
            }
        }
        t
    }
}

struct ReduceMean {
    axes: MeanAxes,
    count: usize,
}
impl<T: Real> Backward<T> for ReduceMean {
    fn name(&self) -> &'static str {
        "reduce_mean"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = x[0].shape();
        let inv = T::one() / T::lit(self.count as f64);
        let gs = g.shape();
        let mut out = Tensor::zeros(s);
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = g.data()[self.axes.target_index(s, gs, i)] * inv;
        }
        vec![Some(out)]
    }
}

struct Concat {
    channels: Vec<usize>,
}
impl<T: Real> Backward<T> for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let gs = g.shape();
        let plane = gs.plane();
        let mut offset = 0;
        let mut grads = Vec::with_capacity(x.len());
        for (k, &c) in self.channels.iter().enumerate() {
            if needs[k] {
                let mut t = Tensor::zeros(x[k].shape());
                for n in 0..gs.n {
                    let src = &g.item(n)[offset * plane..(offset + c) * plane];
                    t.item_mut(n).copy_from_slice(src);
                }
                grads.push(Some(t));
            } else {
                grads.push(None);
            }
            offset += c;
        }
        grads
    }
}

struct Conv {
    geom: ConvGeometry,
}
impl<T: Real> Backward<T> for Conv {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![
            needs[0].then(|| conv2d_grad_input(g, x[1], &self.geom, x[0].shape())),
            needs[1].then(|| conv2d_grad_weight(g, x[0], &self.geom, x[1].shape())),
        ];
        if x.len() == 3 {
            out.push(needs[2].then(|| conv2d_bias_grad(g)));
        }
        out
    }
}

struct ConvTransposed {
    geom: ConvGeometry,
}
impl<T: Real> Backward<T> for ConvTransposed {
    fn name(&self) -> &'static str {
        "conv2d_transposed"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let mut out = vec![
            needs[0].then(|| conv2d_forward(g, x[1], None, &self.geom).expect("transposed adjoint shapes")),
            needs[1].then(|| conv2d_grad_weight(x[0], g, &self.geom, x[1].shape())),
        ];
        if x.len() == 3 {
            out.push(needs[2].then(|| conv2d_bias_grad(g)));
        }
        out
    }
}

struct CropCenter {
    top: usize,
    left: usize,
}
impl<T: Real> Backward<T> for CropCenter {
    fn name(&self) -> &'static str {
        "crop_center"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        let s = x[0].shape();
        let gs = g.shape();
        let mut out = Tensor::zeros(s);
        for n in 0..gs.n {
            for c in 0..gs.c {
                for i in 0..gs.h {
                    for j in 0..gs.w {
                        out.set(n, c, i + self.top, j + self.left, g.at(n, c, i, j));
                    }
                }
            }
        }
        vec![Some(out)]
    }
}

struct Reshape;
impl<T: Real> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone().reshape(x[0].shape()).expect("reshape keeps the element count"))]
    }
}

struct L1 {
    count: usize,
}
impl<T: Real> Backward<T> for L1 {
    fn name(&self) -> &'static str {
        "l1_loss"
    }
    fn backward(&self, x: &[&Tensor<T>], _: &Tensor<T>, g: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let scale = g.data()[0] / T::lit(self.count as f64);
        let sign = x[0]
            .zip_map(x[1], |p, t| {
                let d = p - t;
                if d > T::zero() {
                    scale
                } else if d < T::zero() {
                    -scale
                } else {
                    T::zero()
                }
            })
            .expect("l1 shapes");
        vec![
            needs[0].then(|| sign.clone()),
            needs[1].then(|| sign.map(|v| -v)),
        ]
    }
}

impl<T: Real> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push_op(v, &[a, b], Box::new(Add)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push_op(v, &[a, b], Box::new(Sub)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(v, &[a, b], Box::new(Mul)))
    }

    /// `scale * a + shift`, elementwise with scalar coefficients.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).map(|x| scale * x + shift);
        self.push_op(v, &[a], Box::new(Affine { scale }))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.affine(a, s, T::zero())
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.affine(a, T::one(), s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        if self.tracks_kinks() {
            let signs: Vec<bool> = self.value(a).data().iter().map(|&x| x > T::zero()).collect();
            self.note_kink(signs);
        }
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(v, &[a], Box::new(Relu))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| T::one() / (T::one() + (-x).exp()));
        self.push_op(v, &[a], Box::new(Sigmoid))
    }

    /// Mean over the given axes, keeping them with extent one.
    pub fn reduce_mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let axes = MeanAxes::new(axes)?;
        let s = self.shape(a);
        let out_shape = axes.reduced(s);
        let count = s.numel() / out_shape.numel().max(1);
        let mut out = Tensor::zeros(out_shape);
        for (i, &x) in self.value(a).data().iter().enumerate() {
            out.data_mut()[axes.target_index(s, out_shape, i)] += x;
        }
        let inv = T::one() / T::lit(count as f64);
        out.data_mut().iter_mut().for_each(|v| *v *= inv);
        Ok(self.push_op(out, &[a], Box::new(ReduceMean { axes, count })))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        self.reduce_mean(a, &[0, 1, 2, 3]).expect("all axes are valid")
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| Error::config("concat of nothing"))?);
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::ShapeMismatch { op: "concat", left: first, right: s });
            }
            channels.push(s.c);
        }
        let total: usize = channels.iter().sum();
        let out_shape = Shape::new(first.n, total, first.h, first.w);
        let mut out = Tensor::zeros(out_shape);
        let plane = first.plane();
        for n in 0..first.n {
            let mut offset = 0;
            for (&p, &c) in parts.iter().zip(&channels) {
                let src = self.value(p).item(n);
                out.item_mut(n)[offset * plane..(offset + c) * plane].copy_from_slice(src);
                offset += c;
            }
        }
        Ok(self.push_op(out, parts, Box::new(Concat { channels })))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let ws = self.shape(w);
        let geom = ConvGeometry::new((ws.h, ws.w), stride, padding);
        let out = conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push_op(out, &inputs, Box::new(Conv { geom })))
    }

    pub fn conv2d_transposed(&mut self, x: Var, w: Var, b: Option<Var>, stride: (usize, usize), padding: (usize, usize)) -> Result<Var> {
        let ws = self.shape(w);
        let geom = ConvGeometry::new((ws.h, ws.w), stride, padding);
        let out = conv2d_transposed_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), &geom)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        Ok(self.push_op(out, &inputs, Box::new(ConvTransposed { geom })))
    }

    /// Centered `kh x kw` window of a kernel tensor; extents must share parity
    /// with the stored kernel.
    pub fn crop_center(&mut self, w: Var, kh: usize, kw: usize) -> Result<Var> {
        let s = self.shape(w);
        if kh > s.h || kw > s.w || (s.h - kh) % 2 != 0 || (s.w - kw) % 2 != 0 {
            return Err(Error::config(format!(
                "cannot take a centered {kh}x{kw} window of a {}x{} kernel",
                s.h, s.w
            )));
        }
        let (top, left) = ((s.h - kh) / 2, (s.w - kw) / 2);
        if (top, left) == (0, 0) {
            return Ok(w);
        }
        let src = self.value(w);
        let out = Tensor::from_fn(Shape::new(s.n, s.c, kh, kw), |n, c, i, j| src.at(n, c, i + top, j + left));
        Ok(self.push_op(out, &[w], Box::new(CropCenter { top, left })))
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(&mut self, a: Var, shape: Shape) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push_op(out, &[a], Box::new(Reshape)))
    }

    /// Mean absolute error; subgradient zero at ties.
    pub fn l1_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        same_shape(self, "l1_loss", pred, target)?;
        if self.tracks_kinks() {
            let signs: Vec<i8> = self
                .value(pred)
                .data()
                .iter()
                .zip(self.value(target).data())
                .map(|(&p, &t)| if p > t { 1 } else if p < t { -1 } else { 0 })
                .collect();
            self.note_kink(signs);
        }
        let p = self.value(pred);
        let count = p.numel();
        let total = p
            .data()
            .iter()
            .zip(self.value(target).data())
            .fold(T::zero(), |acc, (&a, &b)| acc + (a - b).abs());
        let out = Tensor::scalar(total / T::lit(count as f64));
        Ok(self.push_op(out, &[pred, target], Box::new(L1 { count })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_values_and_subgradient() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::from_vec(Shape::new(1, 1, 1, 3), vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = g.mean_all(y);
        let grads = g.backward(s).unwrap();
        let gx = grads.get(x).unwrap().data().to_vec();
        assert_eq!(gx, vec![0.0, 0.0, 1.0 / 3.0]);
    }

    #[test]
    fn sigmoid_center_and_symmetry() {
        let mut g = Graph::<f64>::new();
        let xs = vec![0.0, 0.3, -2.5, 7.0];
        let x = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 4), xs.clone()).unwrap());
        let y = g.sigmoid(x);
        let neg = g.constant(Tensor::from_vec(Shape::new(1, 1, 1, 4), xs.iter().map(|v| -v).collect()).unwrap());
        let yn = g.sigmoid(neg);
        assert_eq!(g.value(y).data()[0], 0.5);
        for (a, b) in g.value(y).data().iter().zip(g.value(yn).data()) {
            assert!((a - (1.0 - b)).abs() < 1e-12);
        }
    }

    #[test]
    fn reduce_mean_of_constant() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(Shape::new(2, 3, 4, 5), 1.75));
        let m = g.reduce_mean(x, &[0, 2, 3]).unwrap();
        assert_eq!(g.shape(m), Shape::new(1, 3, 1, 1));
        assert!(g.value(m).data().iter().all(|&v| v == 1.75));
        assert!(g.reduce_mean(x, &[4]).unwrap_err().is_config());
    }

    #[test]
    fn l1_loss_values() {
        let mut g = Graph::<f64>::new();
        let gt = Tensor::<f64>::from_fn(Shape::new(1, 2, 3, 3), |_, c, h, w| (c + h * w) as f64);
        let t = g.constant(gt.clone());
        let same = g.constant(gt.clone());
        let l = g.l1_loss(same, t).unwrap();
        assert_eq!(g.value(l).data(), &[0.0]);
        let shifted = g.constant(gt.map(|v| v + 1.0));
        let l = g.l1_loss(shifted, t).unwrap();
        assert_eq!(g.value(l).data(), &[1.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::zeros(Shape::new(1, 1, 2, 2)));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn crop_center_requires_parity() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(Tensor::zeros(Shape::new(1, 1, 7, 7)));
        assert!(g.crop_center(w, 4, 3).is_err());
        let c = g.crop_center(w, 3, 5).unwrap();
        assert_eq!(g.shape(c), Shape::new(1, 1, 3, 5));
    }
}
