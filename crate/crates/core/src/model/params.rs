use crate::tensor::Tensor;

/// A structure owning named parameter tensors.
///
/// Names are `/`-joined paths; the visiting order is fixed and is the order
/// used for checkpoints and optimizer state.
pub trait ParamSet {
    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>);
    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>);

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for (_, t) in self.named_params_mut() {
            t.requires_grad = trainable;
            if !trainable {
                t.grad = None;
            }
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}/{name}")
    }
}

impl ParamSet for Tensor {
    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        out.push((prefix.to_string(), self));
    }
}

impl<T: ParamSet> ParamSet for Vec<T> {
    fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s Tensor)>) {
        for (i, item) in self.iter().enumerate() {
            item.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut Tensor)>) {
        for (i, item) in self.iter_mut().enumerate() {
            item.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

/// Implements [`ParamSet`] by visiting the listed fields in order.
macro_rules! impl_param_set {
    ($ty:ty { $($field:ident),+ $(,)? }) => {
        impl $crate::model::ParamSet for $ty {
            fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s $crate::tensor::Tensor)>) {
                $( self.$field.visit(&$crate::model::params::join(prefix, stringify!($field)), out); )+
            }
            fn visit_mut<'s>(
                &'s mut self,
                prefix: &str,
                out: &mut Vec<(String, &'s mut $crate::tensor::Tensor)>,
            ) {
                $( self.$field.visit_mut(&$crate::model::params::join(prefix, stringify!($field)), out); )+
            }
        }
    };
}
pub(crate) use impl_param_set;
