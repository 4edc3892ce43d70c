use super::Element;
use crate::error::{shape_err, Result};

/// NCHW tensor shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Shape {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    /// Elements in one batch item.
    pub fn item(&self) -> usize {
        self.channels * self.plane()
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.batch, self.channels, self.height, self.width]
    }

    pub fn with_channels(self, channels: usize) -> Self {
        Shape { channels, ..self }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.batch, self.channels, self.height, self.width)
    }
}

/// Dense 4-D array in batch, channel, height, width order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        if shape.dims().contains(&0) {
            return Err(shape_err!("tensor dimensions must be at least 1, got {shape}"));
        }
        if shape.numel() != data.len() {
            return Err(shape_err!("shape {shape} needs {} elements, got {}", shape.numel(), data.len()));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Tensor::full(shape, T::zero())
    }

    pub fn full(shape: Shape, v: T) -> Self {
        assert!(shape.dims().iter().all(|&d| d > 0), "zero-sized tensor {shape}");
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for y in 0..shape.height {
                    for x in 0..shape.width {
                        data.push(f([b, c, y, x]));
                    }
                }
            }
        }
        Tensor::new(shape, data).unwrap()
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn index(&self, b: usize, c: usize, y: usize, x: usize) -> usize {
        let s = self.shape;
        ((b * s.channels + c) * s.height + y) * s.width + x
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, y: usize, x: usize) -> T {
        self.data[self.index(b, c, y, x)]
    }

    /// Contiguous `(channels, height, width)` block of batch item `b`.
    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape.item();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.f64())).collect(),
        }
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    /// Stack along the channel axis.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        let (sa, sb) = (a.shape, b.shape);
        if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
            return Err(shape_err!("cannot concatenate {sa} and {sb} along channels"));
        }
        let shape = sa.with_channels(sa.channels + sb.channels);
        let mut data = Vec::with_capacity(shape.numel());
        for i in 0..sa.batch {
            data.extend_from_slice(a.item(i));
            data.extend_from_slice(b.item(i));
        }
        Tensor::new(shape, data)
    }

    /// Split into channels `[0, at)` and `[at, channels)`.
    pub fn split_channels(&self, at: usize) -> Result<(Tensor<T>, Tensor<T>)> {
        let s = self.shape;
        if at == 0 || at >= s.channels {
            return Err(shape_err!("split point {at} out of range for {s}"));
        }
        let split = at * s.plane();
        let mut first = Vec::with_capacity(s.batch * split);
        let mut second = Vec::with_capacity(s.numel() - s.batch * split);
        for i in 0..s.batch {
            let item = self.item(i);
            first.extend_from_slice(&item[..split]);
            second.extend_from_slice(&item[split..]);
        }
        Ok((
            Tensor::new(s.with_channels(at), first)?,
            Tensor::new(s.with_channels(s.channels - at), second)?,
        ))
    }

    /// Zero-pad at the bottom/right (`pad_h`, `pad_w`) or crop when the target is
    /// smaller.
    pub fn resize_spatial(&self, height: usize, width: usize) -> Tensor<T> {
        let s = self.shape;
        let out_shape = Shape::new(s.batch, s.channels, height, width);
        let mut out = Tensor::zeros(out_shape);
        let copy_h = s.height.min(height);
        let copy_w = s.width.min(width);
        for b in 0..s.batch {
            for c in 0..s.channels {
                for y in 0..copy_h {
                    let src = self.index(b, c, y, 0);
                    let dst = out.index(b, c, y, 0);
                    out.data[dst..dst + copy_w].copy_from_slice(&self.data[src..src + copy_w]);
                }
            }
        }
        out
    }
}
