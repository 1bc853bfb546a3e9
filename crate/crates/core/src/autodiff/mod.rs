//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every op as it runs. Parameters are bound into it
//! with [`Graph::param`]; [`Graph::backward`] then walks the recorded
//! nodes in reverse insertion order and returns [`Gradients`] for every
//! trainable leaf. The finite-difference routines in [`gradcheck`] are
//! the independent oracle the rest of the crate is tested against.

pub mod gradcheck;
mod graph;
mod kernels;
mod params;
mod tensor;

pub use gradcheck::{check_gradients, finite_difference_gradient, relative_error, GradCheck};
pub use graph::{inject_sign_flip, Gradients, Graph, Var, PRIMITIVES};
pub use params::{join, named_parameters, parameter_count, Parameters};
pub use tensor::Tensor;

#[cfg(test)]
use kernels::sigmoid;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_identity() {
        let g = Graph::new();
        let a = g.constant(Tensor::identity(2));
        let b = g.constant(Tensor::matrix(&[[3.0], [4.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(*g.value(c), Tensor::matrix(&[[3.0], [4.0]]));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = g.softmax(x);
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_last_axis() {
        let g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![3.0]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn shape_errors_name_the_op_and_both_shapes() {
        let g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let msg = g.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[4]));
        let msg = g.concat(&[a, c]).unwrap_err().to_string();
        assert!(msg.contains("concat"), "{msg}");
    }

    #[test]
    fn square_gradient() {
        let x = Tensor::vector(vec![3.0]);
        let g = Graph::new();
        let xv = g.param(&x);
        let sq = g.mul(xv, xv).unwrap();
        let loss = g.sum(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(&x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn linear_form_gradient() {
        let w = Tensor::matrix(&[[0.3, -1.0], [2.0, 0.5]]);
        let g = Graph::new();
        let wv = g.param(&w);
        let v = g.constant(Tensor::matrix(&[[1.0], [2.0]]));
        let y = g.matmul(wv, v).unwrap();
        let loss = g.sum(y);
        let grads = g.backward(loss).unwrap();
        assert_eq!(*grads.of(&w).unwrap(), Tensor::matrix(&[[1.0, 2.0], [1.0, 2.0]]));
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_p_minus_onehot() {
        let z = Tensor::matrix(&[[0.0, 0.0]]);
        let g = Graph::new();
        let zv = g.param(&z);
        let loss = g.cross_entropy(zv, &[0]).unwrap();
        assert!((g.value(loss).item() - 2f64.ln()).abs() < 1e-15);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.of(&z).unwrap().data(), &[-0.5, 0.5]);
    }

    #[test]
    fn repeated_use_accumulates() {
        let x = Tensor::vector(vec![0.7, -1.3]);
        let single = {
            let g = Graph::new();
            let xv = g.param(&x);
            let s = g.sigmoid(xv);
            let l = g.sum(s);
            g.backward(l).unwrap().of(&x).unwrap().clone()
        };
        let g = Graph::new();
        let a = g.sigmoid(g.param(&x));
        let b = g.sigmoid(g.param(&x));
        let s = g.add(a, b).unwrap();
        let l = g.sum(s);
        let double = g.backward(l).unwrap().of(&x).unwrap().clone();
        for (d, s) in double.data().iter().zip(single.data()) {
            assert_eq!(*d, 2.0 * s);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = Graph::new();
        let xv = g.param(&x);
        assert!(matches!(g.backward(xv), Err(crate::Error::NonScalarLoss(_))));
        let c = g.constant(Tensor::scalar(1.0));
        assert!(matches!(g.backward(c), Err(crate::Error::Detached)));

        let ng = Graph::no_grad();
        let xv = ng.param(&Tensor::scalar(2.0));
        let y = ng.mul(xv, xv).unwrap();
        assert!(matches!(ng.backward(y), Err(crate::Error::Detached)));
    }

    #[test]
    fn finite_difference_examples() {
        let d = finite_difference_gradient(|x| x[0] * x[0], &[3.0], 1e-5);
        assert!((d[0] - 6.0).abs() < 1e-7);
        let d = finite_difference_gradient(|x| sigmoid(x[0]), &[0.0], 1e-5);
        assert!((d[0] - 0.25).abs() < 1e-9);
    }

    #[test]
    fn broadcast_rules() {
        let g = Graph::new();
        let a = g.constant(Tensor::new(vec![2, 2, 3], (0..12).map(f64::from).collect()).unwrap());
        let row = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let col = g.constant(Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 2.0, 0.5]).unwrap());
        let s = g.constant(Tensor::scalar(10.0));
        let r = g.add(a, row).unwrap();
        assert_eq!(&g.value(r).data()[..6], &[1.0, 3.0, 5.0, 4.0, 6.0, 8.0]);
        let c = g.mul(a, col).unwrap();
        assert_eq!(&g.value(c).data()[..6], &[0.0, 1.0, 2.0, 0.0, 0.0, 0.0]);
        let k = g.sub(a, s).unwrap();
        assert_eq!(g.value(k).data()[0], -10.0);
        let bad = g.constant(Tensor::zeros(&[2]));
        assert!(g.add(a, bad).is_err());
    }
}
