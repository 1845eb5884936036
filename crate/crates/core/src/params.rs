//! Uniform traversal over parameter containers.
//!
//! Model structs are generic over their leaf type so that one layout holds
//! stored tensors (`T = Tensor`), tape handles (`T = Var`), gradients and
//! optimizer moments.

use crate::tensor::Tensor;

pub trait ParamTree<T> {
    /// Visits every leaf in a fixed order.
    fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T));

    /// Visits every leaf in the same order as [`ParamTree::visit`].
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T));

    fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(&mut |t| out.push(t));
        out
    }
}

/// Total number of scalar values in a tensor tree.
pub fn scalar_count<P: ParamTree<Tensor>>(p: &P) -> usize {
    let mut n = 0;
    p.visit(&mut |t| n += t.len());
    n
}

/// Implements `map` and [`ParamTree`] for a struct whose fields are all leaves.
macro_rules! leaf_params {
    ($name:ident { $($field:ident),+ $(,)? }) => {
        impl<T> $name<T> {
            pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> $name<U> {
                $name { $($field: f(&self.$field)),+ }
            }
        }

        impl<T> $crate::params::ParamTree<T> for $name<T> {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(&'a T)) {
                $(f(&self.$field);)+
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut T)) {
                $(f(&mut self.$field);)+
            }
        }
    };
}

pub(crate) use leaf_params;
