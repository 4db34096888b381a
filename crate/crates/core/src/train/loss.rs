use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::{Tape, Tensor, Var};

/// Mean absolute deviation over every element. The subgradient at zero is 0.
pub fn l1_loss<T: Real>(tape: &mut Tape<T>, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::dim("l1_loss", tape.shape(pred), tape.shape(target)));
    }
    let diff = tape.sub(pred, target)?;
    let abs = tape.abs(diff);
    Ok(tape.mean(abs))
}

fn affine_tensors<T: Real>(
    shape: &[usize],
    normalizer: &Normalizer,
) -> Result<(Tensor<T>, Tensor<T>)> {
    if shape.len() != 4 || shape[1] != normalizer.n_nodes() {
        return Err(Error::dim(
            "denormalize",
            shape,
            &[0, normalizer.n_nodes(), 0, 1],
        ));
    }
    let (std, mean) = normalizer.target_affine();
    let per_node = shape[2] * shape[3];
    let numel: usize = shape.iter().product();
    let node_of = |i: usize| (i / per_node) % shape[1];
    let scale = (0..numel).map(|i| T::lit(std[node_of(i)])).collect();
    let shift = (0..numel).map(|i| T::lit(mean[node_of(i)])).collect();
    Ok((
        Tensor::new(shape.to_vec(), scale)?,
        Tensor::new(shape.to_vec(), shift)?,
    ))
}

/// Maps normalised forecasts `[B,N,T,1]` back to flow units on the tape.
pub fn denormalize_output<T: Real>(
    tape: &mut Tape<T>,
    pred: Var,
    normalizer: &Normalizer,
) -> Result<Var> {
    let (scale, shift) = affine_tensors(tape.shape(pred), normalizer)?;
    let scale = tape.constant(scale);
    let shift = tape.constant(shift);
    let scaled = tape.mul(pred, scale)?;
    tape.add(scaled, shift)
}

/// [`denormalize_output`] on a plain tensor.
pub fn denormalize_tensor<T: Real>(pred: &Tensor<T>, normalizer: &Normalizer) -> Result<Tensor<T>> {
    let (scale, shift) = affine_tensors::<T>(pred.shape(), normalizer)?;
    let data = pred
        .data()
        .iter()
        .zip(scale.data().iter().zip(shift.data()))
        .map(|(&p, (&s, &m))| p * s + m)
        .collect();
    Tensor::new(pred.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use mstfgrn_oracle::{numeric_gradient, rel_error};

    fn loss_of(pred: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
        let mut tape = Tape::<f64>::new();
        let p = tape.param(Tensor::from_f64([pred.len()], pred).unwrap());
        let t = tape.constant(Tensor::from_f64([target.len()], target).unwrap());
        let l = l1_loss(&mut tape, p, t).unwrap();
        tape.backward(l).unwrap();
        (tape.value(l).item(), tape.grad(p).unwrap().into_data())
    }

    #[test]
    fn examples() {
        assert_eq!(loss_of(&[1.0, 2.0], &[1.0, 2.0]), (0.0, vec![0.0, 0.0]));
        assert_eq!(loss_of(&[1.0, 2.0], &[0.0, 4.0]).0, 1.5);
    }

    #[test]
    fn gradient_away_from_kinks() {
        let pred = [0.3, -1.2, 2.5, 0.9];
        let target = [1.0, 0.0, -0.5, 2.0];
        let (_, g) = loss_of(&pred, &target);
        let num = numeric_gradient(
            |x: &[f64]| {
                x.iter()
                    .zip(&target)
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>()
                    / 4.0
            },
            &pred,
            1e-6,
        );
        for (a, n) in g.iter().zip(&num) {
            assert!(rel_error(*a, *n, 1e-8) < 1e-6);
        }
    }

    #[test]
    fn shape_mismatch() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros([2]));
        let b = tape.constant(Tensor::zeros([3]));
        assert!(matches!(
            l1_loss(&mut tape, a, b),
            Err(Error::Dimension { .. })
        ));
    }
}
