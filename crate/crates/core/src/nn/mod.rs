//! Small reverse-mode numerics: tensors, a tape, the layers a compact
//! residual network needs, the losses and the optimizer.

mod conv;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use layers::{BatchNorm, Binding, Conv2d, Linear, Mode, Module, TensorKind};
pub use optim::{Adam, PlateauSchedule};
pub use tape::{pearson_is_degenerate, Gradients, Tape, Var, PEARSON_EPS, PROB_FLOOR};
pub use tensor::{Scalar, Tensor};

#[allow(unused_imports)]
pub(crate) use layers::join;

/// Collects the gradients of `vars` in order.
pub fn collect_grads<T: Scalar>(grads: &mut Gradients<T>, vars: &[Var]) -> Vec<Tensor<T>> {
    vars.iter().map(|&v| grads.take(v)).collect()
}

/// Pearson loss of plain vectors, `1 - r` with the variance guard.
pub fn pearson_loss_value(pred: &[f64], target: &[f64]) -> crate::Result<f64> {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::new(&[pred.len()], pred.to_vec())?);
    let l = tape.pearson_loss(p, target)?;
    Ok(tape.value(l).data()[0])
}
