//! Named-parameter enumeration. Names double as checkpoint keys; the order
//! they are visited in is the optimizer's parameter order.

use crate::numerics::Tensor;
use crate::scalar::Scalar;

pub trait Params<T: Scalar> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>);
    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>);

    fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.named("", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        self.named_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    /// Same structure with every tensor zeroed; used as a gradient buffer.
    fn zeros_like(&self) -> Self
    where
        Self: Clone,
    {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }
}

macro_rules! impl_params {
    ($ty:ident { $($f:ident),* $(,)? } $(optional { $($o:ident),* $(,)? })?) => {
        impl<T: $crate::scalar::Scalar> $crate::params::Params<T> for $ty<T> {
            fn named<'a>(
                &'a self,
                prefix: &str,
                out: &mut Vec<(String, &'a $crate::numerics::Tensor<T>)>,
            ) {
                $( out.push((format!("{prefix}{}", stringify!($f)), &self.$f)); )*
                $($(
                    if let Some(t) = &self.$o {
                        out.push((format!("{prefix}{}", stringify!($o)), t));
                    }
                )*)?
            }

            fn named_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::numerics::Tensor<T>)>,
            ) {
                $( out.push((format!("{prefix}{}", stringify!($f)), &mut self.$f)); )*
                $($(
                    if let Some(t) = &mut self.$o {
                        out.push((format!("{prefix}{}", stringify!($o)), t));
                    }
                )*)?
            }
        }
    };
}

pub(crate) use impl_params;

/// A bare tensor is a one-parameter model named `value`.
impl<T: Scalar> Params<T> for Tensor<T> {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((format!("{prefix}value"), self));
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((format!("{prefix}value"), self));
    }
}
