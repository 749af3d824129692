use crate::backward::backward;
use crate::dtype::DType;
use crate::tensor::Tensor;
use ndarray::ArrayD;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Evaluate a scalar program and return (value, gradient per input).
///
/// Inputs are promoted to differentiable `F64` leaves; the closure must build
/// its output from the provided tensors.
pub fn grad_of(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[ArrayD<f64>],
) -> (f64, Vec<ArrayD<f64>>) {
    let leaves: Vec<Tensor> = inputs
        .iter()
        .map(|x| Tensor::leaf(x.clone(), DType::F64))
        .collect();
    let out = f(&leaves);
    let store = backward(&out).expect("backward failed in grad_of");
    let grads = leaves.iter().map(|l| store.get_or_zeros(l)).collect();
    (out.scalar_value(), grads)
}

fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}

/// Comparison floor tied to the gradient scale so coordinates with an
/// exactly-zero derivative are judged against fd round-off, not against an
/// absolute constant.
fn grad_floor(grads: &[ArrayD<f64>]) -> f64 {
    let gmax = grads
        .iter()
        .flat_map(|g| g.iter())
        .fold(0.0f64, |a, &b| a.max(b.abs()));
    (1e-6 * gmax).max(1e-10)
}

/// Central-difference check of every coordinate of every input.
///
/// Returns the maximum relative error between the reverse-mode gradient and
/// the finite-difference estimate. Intended for small probe problems.
pub fn check_grad(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[ArrayD<f64>],
    eps: f64,
) -> f64 {
    let (_, grads) = grad_of(&f, inputs);
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let leaves: Vec<Tensor> = xs
            .iter()
            .map(|x| Tensor::constant(x.clone(), DType::F64))
            .collect();
        crate::tensor::no_grad(|| f(&leaves).scalar_value())
    };
    let floor = grad_floor(&grads);
    let mut worst = 0.0f64;
    for i in 0..inputs.len() {
        for idx in 0..inputs[i].len() {
            let mut plus = inputs.to_vec();
            let mut minus = inputs.to_vec();
            *plus[i].iter_mut().nth(idx).unwrap() += eps;
            *minus[i].iter_mut().nth(idx).unwrap() -= eps;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let ad = *grads[i].iter().nth(idx).unwrap();
            worst = worst.max(rel_err(fd, ad, floor));
        }
    }
    worst
}

/// Directional finite-difference probes for large inputs: compares d·∇f
/// against (f(x+εd) − f(x−εd)) / 2ε along `n_probes` random unit directions.
pub fn check_grad_directional(
    f: impl Fn(&[Tensor]) -> Tensor,
    inputs: &[ArrayD<f64>],
    eps: f64,
    n_probes: usize,
    seed: u64,
) -> f64 {
    let (_, grads) = grad_of(&f, inputs);
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let leaves: Vec<Tensor> = xs
            .iter()
            .map(|x| Tensor::constant(x.clone(), DType::F64))
            .collect();
        crate::tensor::no_grad(|| f(&leaves).scalar_value())
    };
    let floor = grad_floor(&grads);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let dirs: Vec<ArrayD<f64>> = inputs
            .iter()
            .map(|x| {
                let mut d = ArrayD::zeros(x.raw_dim());
                for v in d.iter_mut() {
                    *v = rng.random::<f64>() * 2.0 - 1.0;
                }
                d
            })
            .collect();
        let norm: f64 = dirs
            .iter()
            .map(|d| d.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        if norm == 0.0 {
            continue;
        }
        let mut plus = inputs.to_vec();
        let mut minus = inputs.to_vec();
        for ((p, m), d) in plus.iter_mut().zip(minus.iter_mut()).zip(dirs.iter()) {
            p.zip_mut_with(d, |x, &dv| *x += eps * dv / norm);
            m.zip_mut_with(d, |x, &dv| *x -= eps * dv / norm);
        }
        let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
        let ad: f64 = grads
            .iter()
            .zip(dirs.iter())
            .map(|(g, d)| g.iter().zip(d.iter()).map(|(gv, dv)| gv * dv).sum::<f64>())
            .sum::<f64>()
            / norm;
        worst = worst.max(rel_err(fd, ad, floor));
    }
    worst
}
