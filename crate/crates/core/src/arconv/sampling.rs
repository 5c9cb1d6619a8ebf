//! Sampling-map construction: per-pixel rectangular offsets, bilinear reads
//! and the tile expansion that turns the adaptive kernel into one strided
//! convolution.
//!
//! Pixel `(u, v)` owns the tile of rows `[u*kh, (u+1)*kh)` and columns
//! `[v*kw, (v+1)*kw)` of the map. Tile entry `(i, j)` holds the input sampled
//! at `(u + r_i * h(u, v), v + c_j * w(u, v))` where
//! `r_i = (2i - kh - 1) / (2 kh)` for 1-based `i` (same for columns).
//! Reads outside the image are zero.

use super::{HWField, KernelSpec};
use crate::autodiff::{Backward, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Integer offsets of the standard `kh x kw` grid, row-major, as `(dy, dx)`.
pub fn offset_grid(spec: KernelSpec) -> Vec<(f64, f64)> {
    let mut g = Vec::with_capacity(spec.points());
    for i in 1..=spec.kh {
        for j in 1..=spec.kw {
            g.push((
                (2 * i as i64 - spec.kh as i64 - 1) as f64 / 2.0,
                (2 * j as i64 - spec.kw as i64 - 1) as f64 / 2.0,
            ));
        }
    }
    g
}

/// Offsets of the rectangular kernel with extent `h0 x w0`, row-major.
pub fn raw_offsets(h0: f64, w0: f64, spec: KernelSpec) -> Vec<(f64, f64)> {
    let mut r = Vec::with_capacity(spec.points());
    for i in 0..spec.kh {
        for j in 0..spec.kw {
            r.push((
                offset_along(i, spec.kh, h0),
                offset_along(j, spec.kw, w0),
            ));
        }
    }
    r
}

#[inline]
fn numerator(i: usize, k: usize) -> i64 {
    2 * i as i64 + 1 - k as i64
}

#[inline]
fn offset_along<T: Real>(i: usize, k: usize, extent: T) -> T {
    T::lit(numerator(i, k) as f64) * extent / T::lit(2.0 * k as f64)
}

/// Interpolation cell of one sample: top-left corner and fractional weights.
/// Samples exactly on a grid line belong to the cell below / to the right.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct Cell<T> {
    pub y0: i32,
    pub x0: i32,
    pub wy: T,
    pub wx: T,
}

impl<T: Real> Cell<T> {
    pub fn locate(y: T, x: T) -> Self {
        let fy = y.floor();
        let fx = x.floor();
        Cell {
            y0: fy.to_i32().unwrap_or(i32::MIN / 2),
            x0: fx.to_i32().unwrap_or(i32::MIN / 2),
            wy: y - fy,
            wx: x - fx,
        }
    }

    /// Corner weights in the order (y0,x0), (y0,x1), (y1,x0), (y1,x1).
    pub fn weights(&self) -> [T; 4] {
        let one = T::one();
        [
            (one - self.wy) * (one - self.wx),
            (one - self.wy) * self.wx,
            self.wy * (one - self.wx),
            self.wy * self.wx,
        ]
    }

    /// Corner values with zero outside the `h x w` plane.
    #[inline]
    fn corners(&self, plane: &[T], h: usize, w: usize) -> [T; 4] {
        let read = |y: i32, x: i32| -> T {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                plane[y as usize * w + x as usize]
            } else {
                T::zero()
            }
        };
        [
            read(self.y0, self.x0),
            read(self.y0, self.x0 + 1),
            read(self.y0 + 1, self.x0),
            read(self.y0 + 1, self.x0 + 1),
        ]
    }

    #[inline]
    fn interpolate(&self, plane: &[T], h: usize, w: usize) -> T {
        let t = self.corners(plane, h, w);
        let wt = self.weights();
        wt[0] * t[0] + wt[1] * t[1] + wt[2] * t[2] + wt[3] * t[3]
    }
}

/// Bilinear read of a single `h x w` plane at fractional `(y, x)`.
pub fn bilinear<T: Real>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    Cell::locate(y, x).interpolate(plane, h, w)
}

/// The expanded map `(N, C_in, kh*H, kw*W)` with the spec it was built for.
#[derive(Clone, Debug)]
pub struct SamplingMap<T> {
    pub map: Tensor<T>,
    pub spec: KernelSpec,
}

fn check_field(xs: Shape, hs: Shape, ws: Shape) -> Result<()> {
    let want = Shape::new(xs.n, 1, xs.h, xs.w);
    for s in [hs, ws] {
        if s != want {
            return Err(Error::ShapeMismatch {
                op: "sampling_map",
                left: s,
                right: want,
            });
        }
    }
    Ok(())
}

/// A located sample: corner indices into a plane followed by one zero slot
/// (which stands in for every read outside the image) and the cell fractions.
#[derive(Copy, Clone, Debug)]
struct Tap<T> {
    idx: [u32; 4],
    wy: T,
    wx: T,
}

impl<T: Real> Tap<T> {
    fn new(cell: Cell<T>, h: usize, w: usize) -> Self {
        let outside = (h * w) as u32;
        let at = |y: i32, x: i32| -> u32 {
            if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                (y as usize * w + x as usize) as u32
            } else {
                outside
            }
        };
        let (y0, x0) = (cell.y0, cell.x0);
        Tap {
            idx: [at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1)],
            wy: cell.wy,
            wx: cell.wx,
        }
    }

    #[inline]
    fn corners(&self, padded: &[T]) -> [T; 4] {
        self.idx.map(|i| padded[i as usize])
    }

    #[inline]
    fn interpolate(&self, padded: &[T]) -> T {
        let [a, b, c, d] = self.corners(padded);
        let top = a + self.wx * (b - a);
        let bottom = c + self.wx * (d - c);
        top + self.wy * (bottom - top)
    }
}

/// Samples in column order `(i, j, u, v)` for every batch item.
fn locate_taps<T: Real>(hs: &Tensor<T>, ws: &Tensor<T>, spec: KernelSpec) -> Vec<Tap<T>> {
    let s = hs.shape();
    let (kh, kw) = (spec.kh, spec.kw);
    let mut taps = Vec::with_capacity(s.n * s.plane() * kh * kw);
    for n in 0..s.n {
        let hp = hs.item(n);
        let wp = ws.item(n);
        for i in 0..kh {
            for j in 0..kw {
                for u in 0..s.h {
                    let uf = T::lit(u as f64);
                    for v in 0..s.w {
                        let p = u * s.w + v;
                        let y = uf + offset_along(i, kh, hp[p]);
                        let x = T::lit(v as f64) + offset_along(j, kw, wp[p]);
                        taps.push(Tap::new(Cell::locate(y, x), s.h, s.w));
                    }
                }
            }
        }
    }
    taps
}

fn pad_plane<T: Real>(buf: &mut Vec<T>, plane: &[T]) {
    buf.clear();
    buf.extend_from_slice(plane);
    buf.push(T::zero());
}

/// Sampled values laid out as convolution columns `(N, C*kh*kw, H, W)`,
/// row `(c*kh + i)*kw + j`.
fn expand_columns<T: Real>(x: &Tensor<T>, taps: &[Tap<T>], spec: KernelSpec) -> Tensor<T> {
    let xs = x.shape();
    let k = spec.points();
    let block = k * xs.plane();
    let mut out = Tensor::zeros(Shape::new(xs.n, xs.c * k, xs.h, xs.w));
    let mut padded = Vec::with_capacity(xs.plane() + 1);
    for n in 0..xs.n {
        let item_taps = &taps[n * block..(n + 1) * block];
        let xn = x.item(n);
        let on = out.item_mut(n);
        for c in 0..xs.c {
            pad_plane(&mut padded, &xn[c * xs.plane()..(c + 1) * xs.plane()]);
            let dst = &mut on[c * block..(c + 1) * block];
            for (d, tap) in dst.iter_mut().zip(item_taps) {
                *d = tap.interpolate(&padded);
            }
        }
    }
    out
}

/// Position of column entry `(i, j, u, v)` inside one channel of the map.
#[inline]
fn map_offset(spec: KernelSpec, w: usize, (i, j, u, v): (usize, usize, usize, usize)) -> usize {
    (u * spec.kh + i) * (w * spec.kw) + v * spec.kw + j
}

/// Rearrange columns into the tiled map, or back when `to_map` is false.
fn permute<T: Real>(src: &Tensor<T>, spec: KernelSpec, (n, c, h, w): (usize, usize, usize, usize), to_map: bool) -> Tensor<T> {
    let (kh, kw) = (spec.kh, spec.kw);
    let block = kh * kw * h * w;
    let out_shape = if to_map {
        Shape::new(n, c, h * kh, w * kw)
    } else {
        Shape::new(n, c * kh * kw, h, w)
    };
    let mut out = Tensor::zeros(out_shape);
    let (s, d) = (src.data(), out.data_mut());
    for base in (0..n * c).map(|nc| nc * block) {
        let mut col = base;
        for i in 0..kh {
            for j in 0..kw {
                for u in 0..h {
                    for v in 0..w {
                        let m = base + map_offset(spec, w, (i, j, u, v));
                        if to_map {
                            d[m] = s[col];
                        } else {
                            d[col] = s[m];
                        }
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

/// Build the sampling map of `x` for the given height/width field.
pub fn build_sampling_map<T: Real>(x: &Tensor<T>, hw: &HWField<T>, spec: KernelSpec) -> Result<SamplingMap<T>> {
    let xs = x.shape();
    check_field(xs, hw.h.shape(), hw.w.shape())?;
    let taps = locate_taps(&hw.h, &hw.w, spec);
    let cols = expand_columns(x, &taps, spec);
    Ok(SamplingMap {
        map: permute(&cols, spec, (xs.n, xs.c, xs.h, xs.w), true),
        spec,
    })
}

#[inline]
fn scatter<T: Real>(dpad: &mut [T], tap: &Tap<T>, g: T) {
    let one = T::one();
    let (wy, wx) = (tap.wy, tap.wx);
    let gy0 = g * (one - wy);
    let gy1 = g * wy;
    dpad[tap.idx[0] as usize] += gy0 * (one - wx);
    dpad[tap.idx[1] as usize] += gy0 * wx;
    dpad[tap.idx[2] as usize] += gy1 * (one - wx);
    dpad[tap.idx[3] as usize] += gy1 * wx;
}

struct SamplingColumnsOp<T> {
    spec: KernelSpec,
    taps: Vec<Tap<T>>,
}

impl<T: Real> Backward<T> for SamplingColumnsOp<T> {
    fn name(&self) -> &'static str {
        "sampling_map"
    }

    fn backward(&self, inputs: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, needs: &[bool]) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0];
        let xs = x.shape();
        let (kh, kw) = (self.spec.kh, self.spec.kw);
        let hw = xs.plane();
        let block = hw * kh * kw;
        let need_x = needs[0];
        let need_pos = needs[1] || needs[2];

        let mut dx = need_x.then(|| Tensor::zeros(xs));
        let field_shape = Shape::new(xs.n, 1, xs.h, xs.w);
        let mut dh = needs[1].then(|| Tensor::zeros(field_shape));
        let mut dw = needs[2].then(|| Tensor::zeros(field_shape));
        let mut dpy = vec![T::zero(); if need_pos { block } else { 0 }];
        let mut dpx = vec![T::zero(); if need_pos { block } else { 0 }];
        let mut padded = Vec::with_capacity(hw + 1);
        let mut dpad = vec![T::zero(); hw + 1];
        let one = T::one();

        for n in 0..xs.n {
            let taps = &self.taps[n * block..(n + 1) * block];
            let gn = grad.item(n);
            let xn = x.item(n);
            dpy.iter_mut().for_each(|v| *v = T::zero());
            dpx.iter_mut().for_each(|v| *v = T::zero());
            for c in 0..xs.c {
                pad_plane(&mut padded, &xn[c * hw..(c + 1) * hw]);
                let gc = &gn[c * block..(c + 1) * block];
                dpad.iter_mut().for_each(|v| *v = T::zero());
                if need_pos {
                    for ((tap, &g), (py, px)) in taps.iter().zip(gc).zip(dpy.iter_mut().zip(dpx.iter_mut())) {
                        let [a, b, cc, d] = tap.corners(&padded);
                        let (wy, wx) = (tap.wy, tap.wx);
                        *py += g * ((one - wx) * (cc - a) + wx * (d - b));
                        *px += g * ((one - wy) * (b - a) + wy * (d - cc));
                        if need_x {
                            scatter(&mut dpad, tap, g);
                        }
                    }
                } else if need_x {
                    for (tap, &g) in taps.iter().zip(gc) {
                        scatter(&mut dpad, tap, g);
                    }
                }
                if let Some(d) = dx.as_mut() {
                    d.item_mut(n)[c * hw..(c + 1) * hw].copy_from_slice(&dpad[..hw]);
                }
            }
            if need_pos {
                for i in 0..kh {
                    let fy = T::lit(numerator(i, kh) as f64 / (2.0 * kh as f64));
                    for j in 0..kw {
                        let fx = T::lit(numerator(j, kw) as f64 / (2.0 * kw as f64));
                        let r = (i * kw + j) * hw;
                        if let Some(dh) = dh.as_mut() {
                            for (o, &g) in dh.item_mut(n).iter_mut().zip(&dpy[r..r + hw]) {
                                *o += g * fy;
                            }
                        }
                        if let Some(dw) = dw.as_mut() {
                            for (o, &g) in dw.item_mut(n).iter_mut().zip(&dpx[r..r + hw]) {
                                *o += g * fx;
                            }
                        }
                    }
                }
            }
        }
        vec![dx, dh, dw]
    }
}

struct PermuteToMap {
    spec: KernelSpec,
    dims: (usize, usize, usize, usize),
}

impl<T: Real> Backward<T> for PermuteToMap {
    fn name(&self) -> &'static str {
        "sampling_layout"
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad: &Tensor<T>, _: &[bool]) -> Vec<Option<Tensor<T>>> {
        vec![Some(permute(grad, self.spec, self.dims, false))]
    }
}

impl<T: Real> Graph<T> {
    /// Differentiable samples of `x` as convolution columns `(N, C*kh*kw, H, W)`,
    /// with respect to `x` and both maps. A pointwise convolution of these
    /// columns equals the strided kernel over the sampling map.
    pub fn sampling_columns(&mut self, x: Var, h: Var, w: Var, spec: KernelSpec) -> Result<Var> {
        check_field(self.shape(x), self.shape(h), self.shape(w))?;
        let taps = locate_taps(self.value(h), self.value(w), spec);
        if self.tracks_kinks() {
            let ids: Vec<[u32; 4]> = taps.iter().map(|t| t.idx).collect();
            self.note_kink(ids);
        }
        let out = expand_columns(self.value(x), &taps, spec);
        Ok(self.push_op(out, &[x, h, w], Box::new(SamplingColumnsOp { spec, taps })))
    }

    /// Differentiable sampling map `(N, C, kh*H, kw*W)`.
    pub fn sampling_map(&mut self, x: Var, h: Var, w: Var, spec: KernelSpec) -> Result<Var> {
        let cols = self.sampling_columns(x, h, w, spec)?;
        let xs = self.shape(x);
        let dims = (xs.n, xs.c, xs.h, xs.w);
        let out = permute(self.value(cols), spec, dims, true);
        Ok(self.push_op(out, &[cols], Box::new(PermuteToMap { spec, dims })))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn grid_matches_standard_offsets() {
        let g = offset_grid(KernelSpec::new(3, 3));
        assert_eq!(g[0], (-1.0, -1.0));
        assert_eq!(g[4], (0.0, 0.0));
        assert_eq!(g[8], (1.0, 1.0));
        assert_eq!(offset_grid(KernelSpec::new(1, 1)), vec![(0.0, 0.0)]);
        assert_eq!(offset_grid(KernelSpec::new(5, 3))[0], (-2.0, -1.0));
    }

    #[test]
    fn unit_extent_offsets_are_the_grid() {
        for (kh, kw) in [(1, 1), (3, 5), (7, 3)] {
            let spec = KernelSpec::new(kh, kw);
            assert_eq!(raw_offsets(kh as f64, kw as f64, spec), offset_grid(spec));
        }
    }

    #[test]
    fn offsets_scale_linearly_with_extent() {
        let spec = KernelSpec::new(5, 3);
        let base = raw_offsets(6.3, 2.2, spec);
        let scaled = raw_offsets(6.3 * 2.7, 2.2, spec);
        for (a, b) in base.iter().zip(&scaled) {
            assert!((b.0 - 2.7 * a.0).abs() < 1e-12);
            assert_eq!(a.1, b.1);
        }
    }

    #[test]
    fn weights_partition_unity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..1000 {
            let c = Cell::locate(rng.random_range(-3.0..20.0f64), rng.random_range(-3.0..20.0f64));
            let s: f64 = c.weights().iter().sum();
            assert!((s - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn outside_reads_are_zero() {
        let plane = vec![1.0f64; 9];
        assert_eq!(bilinear(&plane, 3, 3, -1.5, 1.0), 0.0);
        assert_eq!(bilinear(&plane, 3, 3, -0.5, 1.0), 0.5);
        assert_eq!(bilinear(&plane, 3, 3, 1.0, 1.0), 1.0);
    }

    #[test]
    fn integer_field_reproduces_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Tensor::<f64>::uniform(Shape::new(1, 2, 5, 6), -1.0, 1.0, &mut rng);
        let spec = KernelSpec::new(3, 5);
        let field = Shape::new(1, 1, 5, 6);
        let hw = HWField {
            h: Tensor::full(field, 3.0),
            w: Tensor::full(field, 5.0),
        };
        let s = build_sampling_map(&x, &hw, spec).unwrap().map;
        assert_eq!(s.shape(), Shape::new(1, 2, 15, 30));
        for c in 0..2 {
            for u in 0..5 {
                for v in 0..6 {
                    for i in 0..3 {
                        for j in 0..5 {
                            let (y, xx) = (u as i64 + i as i64 - 1, v as i64 + j as i64 - 2);
                            let want = if y >= 0 && y < 5 && xx >= 0 && xx < 6 {
                                x.at(0, c, y as usize, xx as usize)
                            } else {
                                0.0
                            };
                            assert_eq!(s.at(0, c, u * 3 + i, v * 5 + j), want);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn field_shape_is_checked() {
        let x = Tensor::<f64>::zeros(Shape::new(1, 2, 4, 4));
        let hw = HWField {
            h: Tensor::zeros(Shape::new(1, 1, 4, 3)),
            w: Tensor::zeros(Shape::new(1, 1, 4, 4)),
        };
        assert!(build_sampling_map(&x, &hw, KernelSpec::new(3, 3)).is_err());
    }
}
