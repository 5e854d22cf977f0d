use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A view's feature map cut into `a²` windows of `t = hw/a²` tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowGrid<T> {
    /// `[a², t, c]`; window `(r, s)` is row `r·a + s`.
    pub windows: Tensor<T>,
    pub a: usize,
    /// `(h, w, c)` of the map the windows came from.
    pub origin_shape: (usize, usize, usize),
}

const PERM: [usize; 6] = [0, 1, 3, 2, 4, 5];

fn check_divides(h: usize, w: usize, a: usize) -> Result<()> {
    if a == 0 || !h.is_multiple_of(a) || !w.is_multiple_of(a) {
        return Err(Error::Geometry(format!(
            "window grid a={a} must divide the {h}x{w} feature map"
        )));
    }
    Ok(())
}

/// Split `[.., h, w, c]` into the 6-axis view used by the window permutation.
fn split_shape(shape: &[usize], a: usize) -> Result<(usize, [usize; 6])> {
    if shape.len() < 3 {
        return Err(Error::Dimension(format!(
            "window partition needs [.., h, w, c], got {shape:?}"
        )));
    }
    let r = shape.len();
    let (h, w, c) = (shape[r - 3], shape[r - 2], shape[r - 1]);
    check_divides(h, w, a)?;
    let batch: usize = shape[..r - 3].iter().product();
    Ok((batch, [batch, a, h / a, a, w / a, c]))
}

impl<T: Scalar> WindowGrid<T> {
    pub fn partition(x: &Tensor<T>, a: usize) -> Result<Self> {
        if x.rank() != 3 {
            return Err(Error::Dimension(format!(
                "partition expects [h, w, c], got {:?}",
                x.shape()
            )));
        }
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (_, six) = split_shape(x.shape(), a)?;
        let windows = x
            .reshape(six.to_vec())?
            .permute(&PERM)?
            .into_reshape(vec![a * a, (h / a) * (w / a), c])?;
        Ok(WindowGrid {
            windows,
            a,
            origin_shape: (h, w, c),
        })
    }

    pub fn unpartition(&self) -> Result<Tensor<T>> {
        let (h, w, c) = self.origin_shape;
        let a = self.a;
        check_divides(h, w, a)?;
        if self.windows.shape() != [a * a, (h / a) * (w / a), c] {
            return Err(Error::Geometry(format!(
                "window tensor {:?} inconsistent with origin {:?} and a={}",
                self.windows.shape(),
                self.origin_shape,
                a
            )));
        }
        self.windows
            .reshape(vec![1, a, a, h / a, w / a, c])?
            .permute(&PERM)?
            .into_reshape(vec![h, w, c])
    }

    pub fn tokens_per_window(&self) -> usize {
        self.windows.shape()[1]
    }
}

/// Tape form of [`WindowGrid::partition`]: `[.., h, w, c] -> [.., a², t, c]`.
pub fn partition_var<T: Scalar>(tape: &mut Tape<T>, x: Var, a: usize) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    let (_, six) = split_shape(&shape, a)?;
    let r = shape.len();
    let t = (shape[r - 3] / a) * (shape[r - 2] / a);
    let y = tape.reshape(x, &six)?;
    let y = tape.permute(y, &PERM)?;
    let mut out = shape[..r - 3].to_vec();
    out.extend([a * a, t, shape[r - 1]]);
    tape.reshape(y, &out)
}

/// Tape form of [`WindowGrid::unpartition`]: `[.., a², t, c] -> [.., h, w, c]`.
pub fn unpartition_var<T: Scalar>(tape: &mut Tape<T>, x: Var, a: usize, h: usize, w: usize) -> Result<Var> {
    check_divides(h, w, a)?;
    let shape = tape.shape(x).to_vec();
    let r = shape.len();
    if r < 3 || shape[r - 3] != a * a || shape[r - 2] != (h / a) * (w / a) {
        return Err(Error::Geometry(format!(
            "window tensor {shape:?} inconsistent with {h}x{w} map and a={a}"
        )));
    }
    let c = shape[r - 1];
    let batch: usize = shape[..r - 3].iter().product();
    let y = tape.reshape(x, &[batch, a, a, h / a, w / a, c])?;
    let y = tape.permute(y, &PERM)?;
    let mut out = shape[..r - 3].to_vec();
    out.extend([h, w, c]);
    tape.reshape(y, &out)
}
