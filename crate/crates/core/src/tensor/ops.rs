//! Elementwise and reduction primitives.
//!
//! No broadcasting: binary ops need identical shapes. The only mixed-shape
//! product is [`Var::scale_by`], a one-element tensor times a tensor.

use super::tape::{BackwardFn, Tape};
use super::{Tensor, Var};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Var, b: &Var) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

fn unary(x: &Var, op: &'static str, value: Tensor, backward: BackwardFn) -> Result<Var> {
    Tape::record(op, &[x], value, backward)
}

impl Var {
    pub fn add(&self, other: &Var) -> Result<Var> {
        same_shape("add", self, other)?;
        let value = self.value().zip_map(other.value(), |a, b| a + b);
        Tape::record(
            "add",
            &[self, other],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(&self, other: &Var) -> Result<Var> {
        same_shape("sub", self, other)?;
        let value = self.value().zip_map(other.value(), |a, b| a - b);
        Tape::record(
            "sub",
            &[self, other],
            value,
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|v| -v))]),
        )
    }

    pub fn mul(&self, other: &Var) -> Result<Var> {
        same_shape("mul", self, other)?;
        let value = self.value().zip_map(other.value(), |a, b| a * b);
        Tape::record(
            "mul",
            &[self, other],
            value,
            Box::new(|g, x, _| {
                vec![
                    Some(g.zip_map(x[1], |g, b| g * b)),
                    Some(g.zip_map(x[0], |g, a| g * a)),
                ]
            }),
        )
    }

    /// Sum of several same-shaped tensors.
    pub fn add_n(items: &[Var]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::shape("add_n", "empty input list"))?;
        for v in &items[1..] {
            same_shape("add_n", first, v)?;
        }
        let mut acc = first.value().clone();
        for v in &items[1..] {
            acc.add_assign(v.value());
        }
        let n = items.len();
        let refs: Vec<&Var> = items.iter().collect();
        Tape::record(
            "add_n",
            &refs,
            acc,
            Box::new(move |g, _, _| vec![Some(g.clone()); n]),
        )
    }

    pub fn neg(&self) -> Result<Var> {
        self.scale(-1.0)
    }

    pub fn scale(&self, factor: f64) -> Result<Var> {
        unary(
            self,
            "scale",
            self.value().map(|v| v * factor),
            Box::new(move |g, _, _| vec![Some(g.map(|v| v * factor))]),
        )
    }

    pub fn add_scalar(&self, offset: f64) -> Result<Var> {
        unary(
            self,
            "add_scalar",
            self.value().map(|v| v + offset),
            Box::new(|g, _, _| vec![Some(g.clone())]),
        )
    }

    pub fn square(&self) -> Result<Var> {
        unary(
            self,
            "square",
            self.value().map(|v| v * v),
            Box::new(|g, x, _| vec![Some(g.zip_map(x[0], |g, a| 2.0 * g * a))]),
        )
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&self) -> Result<Var> {
        let shape = self.shape().to_vec();
        unary(
            self,
            "sum",
            Tensor::scalar(self.value().sum()),
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Result<Var> {
        let n = self.value().len() as f64;
        self.sum()?.scale(1.0 / n)
    }

    /// Element `index` of a rank-1 tensor, as a one-element tensor.
    pub fn index(&self, index: usize) -> Result<Var> {
        if self.value().rank() != 1 || index >= self.value().len() {
            return Err(Error::shape(
                "index",
                format!("index {index} into shape {:?}", self.shape()),
            ));
        }
        let n = self.value().len();
        unary(
            self,
            "index",
            Tensor::scalar(self.value().data()[index]),
            Box::new(move |g, _, _| {
                let mut out = vec![0.0; n];
                out[index] = g.item();
                vec![Some(Tensor::from_vec(out))]
            }),
        )
    }

    /// `s * self` where `s` holds exactly one element.
    pub fn scale_by(&self, s: &Var) -> Result<Var> {
        if s.value().len() != 1 {
            return Err(Error::shape(
                "scale_by",
                format!("scale factor must have one element, got {:?}", s.shape()),
            ));
        }
        let factor = s.value().item();
        let s_shape = s.shape().to_vec();
        Tape::record(
            "scale_by",
            &[self, s],
            self.value().map(|v| v * factor),
            Box::new(move |g, x, _| {
                let factor = x[1].item();
                vec![
                    Some(g.map(|v| v * factor)),
                    Some(Tensor::full(&s_shape, g.dot(x[0]))),
                ]
            }),
        )
    }

    /// Sum of squares over several parameters.
    pub fn l2_penalty(params: &[Var]) -> Result<Var> {
        let terms = params
            .iter()
            .map(|p| p.square()?.sum())
            .collect::<Result<Vec<_>>>()?;
        Var::add_n(&terms)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var> {
        let value = self.value().reshape(shape)?;
        let original = self.shape().to_vec();
        unary(
            self,
            "reshape",
            value,
            Box::new(move |g, _, _| vec![Some(g.reshape(&original).expect("same length"))]),
        )
    }
}
