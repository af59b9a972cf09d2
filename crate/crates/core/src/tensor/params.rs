use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Tensor,
    trainable: bool,
}

/// Ordered collection of named trainable tensors.
///
/// Insertion order is the canonical order for checkpoints and optimizer
/// state.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.set_grad(None);
        }
    }

    /// Overwrites the value of `id`, keeping its shape.
    pub fn assign(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let current = &mut self.params[id.0].value;
        if current.shape() != value.shape() {
            return Err(Error::shape("assign", current.shape(), value.shape()));
        }
        *current = value;
        Ok(())
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }
}

/// A tree of parameter handles that can be re-labelled leaf by leaf, in a
/// fixed traversal order.
pub trait ParamTree<P> {
    type Out<Q>;

    fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Out<Q>;

    fn leaves(&self) -> Vec<&P>;
}

impl<P, T: ParamTree<P>> ParamTree<P> for Vec<T> {
    type Out<Q> = Vec<T::Out<Q>>;

    fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Out<Q> {
        self.iter().map(|t| t.map_tree(f)).collect()
    }

    fn leaves(&self) -> Vec<&P> {
        self.iter().flat_map(|t| t.leaves()).collect()
    }
}

impl<P, T: ParamTree<P>> ParamTree<P> for Option<T> {
    type Out<Q> = Option<T::Out<Q>>;

    fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Out<Q> {
        self.as_ref().map(|t| t.map_tree(f))
    }

    fn leaves(&self) -> Vec<&P> {
        self.as_ref().map_or_else(Vec::new, |t| t.leaves())
    }
}

/// Binds every handle of `tree` onto the tape.
pub fn bind_tree<T: ParamTree<ParamId>>(
    tree: &T,
    g: &mut super::Graph,
    store: &ParamStore,
) -> T::Out<super::Var> {
    tree.map_tree(&mut |id| g.param(store, *id))
}

/// Declares a struct of named parameter handles that can be mapped between
/// [`ParamId`], [`Var`](crate::tensor::Var) and [`Tensor`].
#[macro_export]
macro_rules! param_group {
    (
        $(#[$meta:meta])*
        $vis:vis struct $name:ident { $($(#[$fmeta:meta])* $field:ident),* $(,)? }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        $vis struct $name<P = $crate::tensor::ParamId> {
            $($(#[$fmeta])* pub $field: P,)*
        }

        impl<P> $name<P> {
            pub const FIELDS: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)* }
            }

            pub fn handles(&self) -> Vec<&P> {
                vec![$(&self.$field),*]
            }

            pub fn from_handles(handles: Vec<P>) -> Option<Self> {
                let mut it = handles.into_iter();
                let out = $name { $($field: it.next()?,)* };
                it.next().is_none().then_some(out)
            }
        }

        impl<P> $crate::tensor::ParamTree<P> for $name<P> {
            type Out<Q> = $name<Q>;

            fn map_tree<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: f(&self.$field),)* }
            }

            fn leaves(&self) -> Vec<&P> {
                self.handles()
            }
        }

        impl $name<$crate::tensor::ParamId> {
            pub fn bind(
                &self,
                g: &mut $crate::tensor::Graph,
                store: &$crate::tensor::ParamStore,
            ) -> $name<$crate::tensor::Var> {
                self.map(|id| g.param(store, *id))
            }

            pub fn tensors(&self, store: &$crate::tensor::ParamStore) -> $name<$crate::tensor::Tensor> {
                self.map(|id| store.get(*id).clone())
            }
        }
    };
}
