//! Dense row-major array values.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// An owned, row-major n-dimensional array of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                context: "Tensor::new".into(),
                expected: shape.to_vec(),
                actual: vec![data.len()],
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Internal constructor for callers that already know the sizes agree.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::from_parts(vec![data.len()], data)
    }

    pub fn from_f32(shape: &[usize], data: &[f32]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| v as f64).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.random_range(lo..hi))
            .collect();
        Self::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&v| v as f32).collect()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(
            self.data.len(),
            1,
            "item() on tensor of shape {:?}",
            self.shape
        );
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::Shape {
                context: "reshape".into(),
                expected: shape.to_vec(),
                actual: self.shape,
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Row `i` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[i * width..(i + 1) * width]
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `out_shape`, the flat index of the broadcast source in `in_shape`.
#[cfg(test)]
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let n = out_shape.len();
    let pad = n - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; n];
    for i in 0..in_shape.len() {
        if in_shape[i] != 1 {
            eff[i + pad] = in_strides[i];
        }
    }
    let total = numel(out_shape);
    let mut map = Vec::with_capacity(total);
    if total == 0 {
        return map;
    }
    let mut idx = vec![0usize; n];
    let mut offset = 0usize;
    for _ in 0..total {
        map.push(offset);
        for d in (0..n).rev() {
            idx[d] += 1;
            offset += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Contiguous-chunk description of how `in_shape` broadcasts onto `out_shape`.
///
/// The output splits into chunks of `inner` elements; each chunk either copies a
/// contiguous run of the input (`contiguous`) or repeats one input element.
struct BroadcastPlan {
    inner: usize,
    contiguous: bool,
    offsets: Vec<usize>,
}

impl BroadcastPlan {
    fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let n = out_shape.len();
        let pad = n - in_shape.len();
        let padded: Vec<usize> = (0..n)
            .map(|d| if d < pad { 1 } else { in_shape[d - pad] })
            .collect();
        let total = numel(out_shape);
        // Dimensions of extent 1 in the output are irrelevant to the layout.
        let dims: Vec<usize> = (0..n).filter(|&d| out_shape[d] != 1).collect();
        let mut inner = 1;
        let mut split = dims.len();
        let contiguous = dims.last().is_none_or(|&d| padded[d] == out_shape[d]);
        while split > 0 {
            let d = dims[split - 1];
            let matches = padded[d] == out_shape[d];
            if matches != contiguous {
                break;
            }
            inner *= out_shape[d];
            split -= 1;
        }
        let in_strides = strides(&padded);
        let outer_dims = &dims[..split];
        let outer = if inner == 0 { 0 } else { total / inner };
        let mut offsets = Vec::with_capacity(outer);
        let mut idx = vec![0usize; outer_dims.len()];
        let mut offset = 0usize;
        for _ in 0..outer {
            offsets.push(offset);
            for k in (0..outer_dims.len()).rev() {
                let d = outer_dims[k];
                let step = if padded[d] == 1 { 0 } else { in_strides[d] };
                idx[k] += 1;
                offset += step;
                if idx[k] < out_shape[d] {
                    break;
                }
                offset -= step * idx[k];
                idx[k] = 0;
            }
        }
        Self {
            inner,
            contiguous,
            offsets,
        }
    }
}

/// Materializes `data` (of `in_shape`) broadcast to `out_shape`.
pub(crate) fn broadcast_expand(data: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return data.to_vec();
    }
    let plan = BroadcastPlan::new(in_shape, out_shape);
    let mut out = Vec::with_capacity(numel(out_shape));
    for &o in &plan.offsets {
        if plan.contiguous {
            out.extend_from_slice(&data[o..o + plan.inner]);
        } else {
            out.extend(std::iter::repeat_n(data[o], plan.inner));
        }
    }
    out
}

/// Sums a gradient over `out_shape` back onto the broadcast source `in_shape`.
pub(crate) fn broadcast_reduce(grad: &[f64], out_shape: &[usize], in_shape: &[usize]) -> Vec<f64> {
    if in_shape == out_shape {
        return grad.to_vec();
    }
    let plan = BroadcastPlan::new(in_shape, out_shape);
    let mut acc = vec![0.0; numel(in_shape)];
    for (chunk, &o) in grad.chunks_exact(plan.inner.max(1)).zip(&plan.offsets) {
        if plan.contiguous {
            for (a, g) in acc[o..o + plan.inner].iter_mut().zip(chunk) {
                *a += g;
            }
        } else {
            acc[o] += chunk.iter().sum::<f64>();
        }
    }
    acc
}
