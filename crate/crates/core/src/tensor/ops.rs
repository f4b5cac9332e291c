use super::reduce::dot;
use super::{Param, Scalar, Shape, Tensor};
use crate::error::{Error, Result};

pub fn relu6_forward<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    let six = T::from_f64(6.0);
    let data = input.data().iter().map(|&x| x.max(T::zero()).min(six)).collect();
    Tensor { shape: input.shape(), data }
}

/// Passes the gradient only where `0 < x < 6`.
pub fn relu6_backward<T: Scalar>(grad_out: &Tensor<T>, saved_input: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.shape() != saved_input.shape() {
        return Err(Error::Config(format!(
            "relu6 grad {} vs input {}",
            grad_out.shape(),
            saved_input.shape()
        )));
    }
    let six = T::from_f64(6.0);
    let data = grad_out
        .data()
        .iter()
        .zip(saved_input.data())
        .map(|(&g, &x)| if x > T::zero() && x < six { g } else { T::zero() })
        .collect();
    Ok(Tensor { shape: grad_out.shape(), data })
}

/// `B×C×H×W → B×C×1×1` spatial mean.
pub fn global_avg_pool_forward<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let s = input.shape();
    if s.plane() == 0 {
        return Err(Error::Config("global average pool over an empty plane".into()));
    }
    let inv = T::from_usize(s.plane()).recip();
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, 1, 1));
    for b in 0..s.n {
        for c in 0..s.c {
            let sum = input.plane(b, c).iter().fold(T::zero(), |a, &v| a + v);
            out.data_mut()[b * s.c + c] = sum * inv;
        }
    }
    Ok(out)
}

pub fn global_avg_pool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: Shape) -> Result<Tensor<T>> {
    let s = input_shape;
    if grad_out.shape() != Shape::new(s.n, s.c, 1, 1) {
        return Err(Error::Config(format!(
            "pool grad {} does not match input {s}",
            grad_out.shape()
        )));
    }
    let inv = T::from_usize(s.plane()).recip();
    let mut out = Tensor::zeros(s);
    for b in 0..s.n {
        for c in 0..s.c {
            let g = grad_out.data()[b * s.c + c] * inv;
            out.plane_mut(b, c).iter_mut().for_each(|v| *v = g);
        }
    }
    Ok(out)
}

/// `B×C` input times `N×C` weight, transposed: `B×N`. There is no bias term.
pub fn linear_nobias_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c) = matrix_dims(input)?;
    let (n, wc) = matrix_dims(weight)?;
    if wc != c {
        return Err(Error::Config(format!("linear weight {n}x{wc} cannot take {c} features")));
    }
    let mut out = Vec::with_capacity(b * n);
    for i in 0..b {
        let row = input.item(i);
        for j in 0..n {
            out.push(dot(row, weight.item(j)));
        }
    }
    Tensor::matrix(b, n, out)
}

pub fn linear_nobias_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    saved_input: &Tensor<T>,
    weight: &mut Param<T>,
) -> Result<Tensor<T>> {
    let (b, c) = matrix_dims(saved_input)?;
    let (n, _) = matrix_dims(&weight.value)?;
    if grad_out.shape() != Shape::new(b, n, 1, 1) {
        return Err(Error::Config(format!(
            "linear grad {} does not match {b}x{n}",
            grad_out.shape()
        )));
    }
    let g = grad_out.data();
    let w = weight.value.data();
    let mut grad_in = vec![T::zero(); b * c];
    for i in 0..b {
        let gi = &mut grad_in[i * c..(i + 1) * c];
        for j in 0..n {
            let gv = g[i * n + j];
            for (d, &wv) in gi.iter_mut().zip(&w[j * c..(j + 1) * c]) {
                *d = *d + gv * wv;
            }
        }
    }
    let x = saved_input.data();
    let gw = weight.grad.data_mut();
    for j in 0..n {
        let row = &mut gw[j * c..(j + 1) * c];
        for i in 0..b {
            let gv = g[i * n + j];
            for (d, &xv) in row.iter_mut().zip(&x[i * c..(i + 1) * c]) {
                *d = *d + gv * xv;
            }
        }
    }
    Tensor::matrix(b, c, grad_in)
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.h != 1 || s.w != 1 {
        return Err(Error::Config(format!("expected a B×C×1×1 matrix, got {s}")));
    }
    Ok((s.n, s.c))
}
