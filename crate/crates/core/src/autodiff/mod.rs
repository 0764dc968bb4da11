//! Minimal reverse-mode automatic differentiation over `f64` tensors.
//!
//! Values are recorded on a [`Tape`] as they are computed; each recorded
//! value is addressed by a [`Var`]. Calling [`Tape::backward`] on a scalar
//! walks the tape in reverse and returns [`Gradients`] for every leaf that
//! was created with [`Tape::leaf`].
//!
//! ```
//! use wsol::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 3.0]).unwrap());
//! let loss = x.mul(x).unwrap().sum();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).data(), &[2.0, -4.0, 6.0]);
//! ```

mod kernels;
mod ops;
mod tape;
mod tensor;

pub use tape::{BranchLog, Gradients, Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests {
    use super::*;
    use super::kernels::sigmoid;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference gradient of `f` at `x`.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            assert!(rel < tol, "element {i}: analytic {a} numeric {n} rel {rel}");
        }
    }

    #[test]
    fn conv2d_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[2.0]));
        let b = tape.constant(t(&[1], &[0.0]));
        let y = x.conv2d(w, b, 1, 0).unwrap();
        assert_eq!(y.value().data(), &[2.0, 4.0, 6.0, 8.0]);

        let ones = tape.constant(Tensor::full([1, 1, 2, 2], 1.0));
        let y = x.conv2d(ones, b, 2, 0).unwrap();
        assert_eq!(y.shape(), vec![1, 1, 1, 1]);
        assert_eq!(y.value().data(), &[10.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = tape.constant(random(&[2, 1, 5, 4], &mut rng));
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let id = tape.constant(t(&[1, 1, 3, 3], &k));
        let y = img.conv2d(id, b, 1, 1).unwrap();
        assert_eq!(y.value().data(), img.value().data());
    }

    #[test]
    fn conv2d_output_size_and_errors() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::zeros([1, 2, 7, 9]));
        let w = tape.constant(Tensor::zeros([3, 2, 3, 3]));
        let b = tape.constant(Tensor::zeros([3]));
        let y = x.conv2d(w, b, 2, 1).unwrap();
        assert_eq!(y.shape(), vec![1, 3, 4, 5]);

        let wrong = tape.constant(Tensor::zeros([3, 1, 3, 3]));
        assert!(matches!(x.conv2d(wrong, b, 1, 0), Err(Error::Dimension(_))));
        assert!(x.conv2d(w, b, 0, 0).is_err());
    }

    #[test]
    fn relu_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = x.relu();
        assert_eq!(y.value().data(), &[0.0, 0.0, 2.0]);
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0, 1.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[-3.0]));
        let g = tape.backward(x.relu().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0]);

        let pos = t(&[4], &[0.1, 1.0, 2.0, 9.0]);
        assert_eq!(tape.constant(pos.clone()).relu().value().data(), pos.data());
    }

    #[test]
    fn sigmoid_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 1000.0, -1000.0]));
        let y = x.sigmoid().value();
        assert_eq!(y.data()[0], 0.5);
        assert!((y.data()[1] - 1.0).abs() < 1e-15);
        assert!(y.all_finite());

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let v: f64 = rng.random_range(-40.0..40.0);
            let s = sigmoid(v) + sigmoid(-v);
            assert!((s - 1.0).abs() < 1e-15, "{v}: {s}");
        }
    }

    #[test]
    fn avg_pool_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.avg_pool2d(2, 2).unwrap().value().data(), &[2.5]);

        let c = tape.constant(Tensor::full([1, 2, 4, 6], 0.7));
        let y = c.avg_pool2d(2, 2).unwrap().value();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = tape.constant(random(&[2, 3, 6, 8], &mut rng));
        let y = r.avg_pool2d(2, 2).unwrap();
        assert!((y.value().mean() - r.value().mean()).abs() < 1e-12);

        let odd = tape.constant(Tensor::zeros([1, 1, 3, 4]));
        assert!(matches!(odd.avg_pool2d(2, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn gap_examples_and_slice_commutation() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2, 2, 2], &[3.0, 3.0, 3.0, 3.0, 0.0, 0.0, 0.0, 4.0]));
        assert_eq!(x.global_avg_pool().unwrap().value().data(), &[3.0, 1.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = tape.constant(random(&[3, 5, 4, 4], &mut rng));
        let idx = [4, 0, 2];
        let a = r.select_channel(&idx).unwrap().global_avg_pool().unwrap().value();
        let full = r.global_avg_pool().unwrap().value();
        for (s, &c) in idx.iter().enumerate() {
            assert_eq!(a.data()[s], full.data()[s * 5 + c]);
        }
    }

    #[test]
    fn softmax_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert_eq!(x.softmax().unwrap().value().data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let y = x.softmax().unwrap().value();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && y.data()[1].abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = random(&[4, 6], &mut rng);
        let a = tape.constant(r.clone()).softmax().unwrap().value();
        let b = tape.constant(r.map(|v| v + 17.0)).softmax().unwrap().value();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((p - q).abs() < 1e-12);
        }
        for row in a.data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let tape = Tape::new();
        let ce = |s: &[f64], l: usize| {
            tape.constant(t(&[1, s.len()], s)).cross_entropy(&[l]).unwrap().item()
        };
        assert!((ce(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(ce(&[1000.0, 0.0], 0).abs() < 1e-12);
        // ln(1 + e^-1)
        assert!((ce(&[1.0, 0.0], 0) - 0.313_261_687_518_222_8).abs() < 1e-12);

        let s = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        assert!(matches!(s.cross_entropy(&[2]), Err(Error::Index(_))));
    }

    #[test]
    fn cross_entropy_matches_log_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let tape = Tape::new();
        let x = random(&[5, 4], &mut rng);
        let labels = [0, 3, 1, 1, 2];
        let ce = tape.constant(x.clone()).cross_entropy(&labels).unwrap().item();
        let p = tape.constant(x).softmax().unwrap().value();
        let direct: f64 = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p.data()[r * 4 + l].ln())
            .sum::<f64>()
            / 5.0;
        assert!((ce - direct).abs() < 1e-12);
        assert!(ce >= 0.0);
    }

    #[test]
    fn mul_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let a = tape.constant(random(&[2, 3, 4, 4], &mut rng));
        let ones = tape.constant(Tensor::full([2, 1, 4, 4], 1.0));
        let zeros = tape.constant(Tensor::zeros([2, 1, 4, 4]));
        assert_eq!(a.mul(ones).unwrap().value().data(), a.value().data());
        assert!(a.mul(zeros).unwrap().value().data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(Tensor::zeros([2, 2, 4, 4]));
        assert!(matches!(a.mul(bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn mul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a0 = random(&[2, 3, 3, 3], &mut rng);
        let b0 = random(&[2, 1, 3, 3], &mut rng);
        let weights = random(&[2, 3, 3, 3], &mut rng);
        let f = |a: &Tensor, b: &Tensor| {
            let tape = Tape::new();
            let y = tape.constant(a.clone()).mul(tape.constant(b.clone())).unwrap();
            y.mul(tape.constant(weights.clone())).unwrap().sum().item()
        };
        let tape = Tape::new();
        let a = tape.leaf(a0.clone());
        let b = tape.leaf(b0.clone());
        let loss = a.mul(b).unwrap().mul(tape.constant(weights.clone())).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_close(g.wrt(a).data(), &numeric_grad(&a0, |x| f(x, &b0)), 1e-6);
        assert_close(g.wrt(b).data(), &numeric_grad(&b0, |x| f(&a0, x)), 1e-6);
    }

    #[test]
    fn bilinear_examples() {
        let tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 1, 1], &[0.3]));
        let y = x.bilinear_upsample(5, 7).unwrap().value();
        assert!(y.data().iter().all(|&v| v == 0.3));

        let x = tape.constant(t(&[1, 1, 2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = x.bilinear_upsample(4, 4).unwrap().value();
        let expect = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
        for row in y.data().chunks(4) {
            for (v, e) in row.iter().zip(expect) {
                assert!((v - e).abs() < 1e-15);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let r = tape.constant(random(&[1, 2, 3, 5], &mut rng));
        let y = r.bilinear_upsample(11, 13).unwrap().value();
        let (lo, hi) = (r.value().min(), r.value().max());
        assert!(y.data().iter().all(|&v| v >= lo - 1e-15 && v <= hi + 1e-15));
        assert_eq!(r.bilinear_upsample(3, 5).unwrap().value().data(), r.value().data());
    }

    #[test]
    fn detach_examples() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.5, -2.0]));
        let w = tape.leaf(t(&[2], &[3.0, 4.0]));
        let d = x.detach();
        assert_eq!(d.value().data(), x.value().data());
        let g = tape.backward(d.mul(w).unwrap().sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(w).data(), &[1.5, -2.0]);

        let tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]));
        let loss = x.detach().mul(x.detach()).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_examples_and_errors() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[3], &[0.5, -1.0, 2.0]));
        let unused = tape.leaf(t(&[2], &[1.0, 1.0]));
        let loss = x.mul(x).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, -2.0, 4.0]);
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0]);
        assert!(matches!(tape.backward(loss), Err(Error::State(_))));

        // Recording again allows another pass.
        let loss2 = x.sum();
        assert!(tape.backward(loss2).is_ok());

        let tape = Tape::new();
        let v = tape.leaf(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn multiply_used_nodes_sum_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(t(&[1], &[3.0]));
        let y = x.add(x).unwrap().add(x).unwrap();
        let g = tape.backward(y.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[3.0]);
    }

    fn composite(x: &Tensor, w: &Tensor, b: &Tensor) -> f64 {
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(w.clone()), tape.constant(b.clone()), 1, 1)
            .unwrap()
            .relu()
            .global_avg_pool()
            .unwrap();
        y.cross_entropy(&[1]).unwrap().item()
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = random(&[1, 2, 6, 6], &mut rng);
        let w0 = random(&[3, 2, 3, 3], &mut rng);
        let b0 = random(&[3], &mut rng);
        let tape = Tape::new();
        let (x, w, b) = (tape.leaf(x0.clone()), tape.leaf(w0.clone()), tape.leaf(b0.clone()));
        let scores = x.conv2d(w, b, 1, 1).unwrap().relu().global_avg_pool().unwrap();
        // route through the explicit softmax too: -ln p[1]
        let p = scores.softmax().unwrap();
        let ce = scores.cross_entropy(&[1]).unwrap();
        assert!((ce.item() + p.value().data()[1].ln()).abs() < 1e-12);
        let g = tape.backward(ce).unwrap();
        assert_close(g.wrt(x).data(), &numeric_grad(&x0, |v| composite(v, &w0, &b0)), 1e-6);
        assert_close(g.wrt(w).data(), &numeric_grad(&w0, |v| composite(&x0, v, &b0)), 1e-6);
        assert_close(g.wrt(b).data(), &numeric_grad(&b0, |v| composite(&x0, &w0, v)), 1e-6);
    }

    #[test]
    fn every_op_gradient_matches_finite_differences() {
        type Build = for<'t> fn(Var<'t>) -> Var<'t>;
        let cases: Vec<(&str, Vec<usize>, Build)> = vec![
            ("sigmoid", vec![1, 2, 3, 3], |x| x.sigmoid().sum()),
            ("avg_pool", vec![1, 2, 4, 6], |x| x.avg_pool2d(2, 2).unwrap().mul(x.avg_pool2d(2, 2).unwrap()).unwrap().sum()),
            ("avg_pool_overlap", vec![1, 1, 5, 5], |x| x.avg_pool2d(3, 1).unwrap().sigmoid().sum()),
            ("softmax", vec![3, 4], |x| x.softmax().unwrap().mul(x).unwrap().sum()),
            ("upsample", vec![1, 2, 3, 4], |x| x.bilinear_upsample(7, 9).unwrap().sigmoid().sum()),
            ("select", vec![2, 3, 2, 2], |x| x.select_channel(&[2, 0]).unwrap().sigmoid().sum()),
            ("one_minus_div", vec![4], |x| x.one_minus().div(x.sigmoid().add_scalar(0.5)).unwrap().sum()),
            ("scale_mean", vec![2, 5], |x| x.mul(x).unwrap().scale(-1.7).mean()),
            ("conv_stride2", vec![1, 2, 7, 7], |x| {
                let tape = x.tape();
                let w = tape.constant(Tensor::from_fn([2, 2, 3, 3], |i| ((i * 37) % 11) as f64 / 11.0 - 0.4));
                let b = tape.constant(Tensor::new([2], vec![0.1, -0.2]).unwrap());
                x.conv2d(w, b, 2, 1).unwrap().sigmoid().sum()
            }),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for (name, shape, build) in cases {
            let x0 = random(&shape, &mut rng);
            let tape = Tape::new();
            let x = tape.leaf(x0.clone());
            let g = tape.backward(build(x)).unwrap();
            let num = numeric_grad(&x0, |v| {
                let tape = Tape::new();
                build(tape.constant(v.clone())).item()
            });
            for (i, (a, n)) in g.wrt(x).data().iter().zip(&num).enumerate() {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
                assert!(rel < 1e-6, "{name}[{i}]: {a} vs {n}");
            }
        }
    }

    #[test]
    fn forward_is_bit_identical_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x0 = random(&[2, 3, 8, 8], &mut rng);
        let w0 = random(&[4, 3, 3, 3], &mut rng);
        let b0 = random(&[4], &mut rng);
        let run = || {
            let tape = Tape::new();
            let y = tape
                .constant(x0.clone())
                .conv2d(tape.constant(w0.clone()), tape.constant(b0.clone()), 2, 1)
                .unwrap()
                .sigmoid();
            y.value().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constants_never_accumulate_gradient() {
        let tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.leaf(t(&[2], &[3.0, 4.0]));
        let g = tape.backward(c.mul(x).unwrap().sum()).unwrap();
        assert!(g.get(c).is_none());
        assert!(!c.requires_grad());
    }
}
