// Finite-difference checks for every graph op and every objective.
// Shared by the gradient integration test and the acceptance suite.

use eqrecal::gradcheck::{central_difference, relative_error};
use eqrecal::nn::{build_model, task_loss, Model, ModelDescriptor};
use eqrecal::objectives::{
    adaptive_objective, equivariance_loss, invariance_loss, ConstraintSample,
};
use eqrecal::transform::default_transform_set;
use eqrecal::{Graph, Result, Tensor, Var};
use rand::Rng;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

/// Uniform in ±[lo, hi]: keeps values off kinks at 0.
fn away_from_zero(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = eqrecal::seed::rng(seed);
    Tensor::from_fn(shape, |_| {
        let m: f64 = rng.random_range(lo..hi);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = eqrecal::seed::rng(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor>,
    build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

pub fn op_cases() -> Vec<OpCase> {
    let u = |s: &[usize], k| uniform(s, -1.0, 1.0, k);
    let grid = uniform(&[2, 4, 5, 2], -1.15, 1.15, 77);
    let labels: Vec<usize> = (0..2 * 3 * 3).map(|i| (i * 7 + 1) % 4).collect();
    let class_labels = vec![2usize, 0, 3];
    let factor = u(&[2, 3, 4, 4], 40);
    vec![
        case(
            "conv2d",
            vec![u(&[2, 3, 6, 6], 1), u(&[4, 3, 3, 3], 2), u(&[4], 3)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        ),
        case(
            "conv2d_stride2",
            vec![u(&[1, 2, 7, 7], 4), u(&[3, 2, 5, 5], 5)],
            |g, v| g.conv2d(v[0], v[1], None, 2, 2),
        ),
        case(
            "linear",
            vec![u(&[3, 5], 6), u(&[4, 5], 7), u(&[4], 8)],
            |g, v| g.linear(v[0], v[1], Some(v[2])),
        ),
        case("relu", vec![away_from_zero(&[2, 3, 4, 4], 0.05, 1.0, 9)], |g, v| {
            g.relu(v[0])
        }),
        case("max_pool2", vec![u(&[2, 2, 6, 6], 10)], |g, v| g.max_pool2(v[0])),
        case("avg_pool2", vec![u(&[2, 2, 6, 6], 11)], |g, v| g.avg_pool2(v[0])),
        case("avg_pool_global", vec![u(&[2, 3, 5, 5], 12)], |g, v| {
            g.avg_pool_global(v[0])
        }),
        case("add", vec![u(&[2, 3, 4, 4], 13), u(&[2, 3, 4, 4], 14)], |g, v| {
            g.add(v[0], v[1])
        }),
        case("sub", vec![u(&[2, 3, 4, 4], 15), u(&[2, 3, 4, 4], 16)], |g, v| {
            g.sub(v[0], v[1])
        }),
        case("mul", vec![u(&[2, 3, 4, 4], 17), u(&[2, 3, 4, 4], 18)], |g, v| {
            g.mul(v[0], v[1])
        }),
        case("mul_const", vec![u(&[2, 3, 4, 4], 19)], move |g, v| {
            g.mul_const(v[0], &factor)
        }),
        case("mul_scalar", vec![u(&[2, 3, 4, 4], 20)], |g, v| {
            g.mul_scalar(v[0], -1.7)
        }),
        case("add_scalar", vec![u(&[2, 3, 4, 4], 21)], |g, v| {
            g.add_scalar(v[0], 0.3)
        }),
        case(
            "clamp",
            // Keep every value at least 0.025 away from the clamp edges.
            vec![{
                let mut t = away_from_zero(&[2, 3, 4, 4], 0.05, 0.9, 22);
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = if v.abs() < 0.475 { *v } else { v.signum() * (v.abs() + 0.1) });
                t
            }],
            |g, v| g.clamp(v[0], -0.5, 0.5),
        ),
        case(
            "concat",
            vec![u(&[2, 2, 3, 3], 23), u(&[2, 3, 3, 3], 24)],
            |g, v| g.concat(&[v[0], v[1]]),
        ),
        case("softmax_channel", vec![u(&[2, 4, 3, 3], 25)], |g, v| {
            g.softmax_channel(v[0])
        }),
        case("bilinear_sample", vec![u(&[2, 3, 6, 7], 26)], move |g, v| {
            Ok(g.bilinear_sample(v[0], &grid)?.0)
        }),
        case("flip_w", vec![u(&[2, 3, 4, 5], 27)], |g, v| g.flip_w(v[0])),
        case(
            "cosine_similarity",
            vec![u(&[2, 5, 3, 3], 28), u(&[2, 5, 3, 3], 29)],
            |g, v| g.cosine_similarity(v[0], v[1]),
        ),
        case("reshape", vec![u(&[2, 3, 4, 4], 30)], |g, v| {
            g.reshape(v[0], &[6, 16])
        }),
        case("sum", vec![u(&[2, 3, 4, 4], 31)], |g, v| g.sum(v[0])),
        case("mean", vec![u(&[2, 3, 4, 4], 32)], |g, v| g.mean(v[0])),
        case("cross_entropy", vec![u(&[2, 4, 3, 3], 33)], move |g, v| {
            g.cross_entropy(v[0], &labels)
        }),
        case("cross_entropy_2d", vec![u(&[3, 4], 34)], move |g, v| {
            g.cross_entropy(v[0], &class_labels)
        }),
    ]
}

/// Scalar probe `Σ out ⊙ R` with a fixed random `R`, so every output
/// coordinate contributes.
fn probe(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let r = uniform(g.value(out).shape(), 0.5, 1.5, seed);
    let weighted = g.mul_const(out, &r)?;
    g.sum(weighted)
}

fn eval_case(c: &OpCase, inputs: &[Tensor]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (c.build)(&mut g, &vars).unwrap();
    let loss = probe(&mut g, out, 1234).unwrap();
    g.value(loss).item()
}

fn coords(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = eqrecal::seed::rng(seed);
    (0..count.min(n)).map(|_| rng.random_range(0..n)).collect()
}

/// Largest relative error over `count` random coordinates of every input.
pub fn check_op(c: &OpCase, count: usize) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = c.inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (c.build)(&mut g, &vars).unwrap();
    let loss = probe(&mut g, out, 1234).unwrap();
    g.backward(loss).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = g.grad(*v).expect("grad").clone();
        for i in coords(c.inputs[k].numel(), count, 500 + k as u64) {
            let mut f = |t: &Tensor| {
                let mut xs = c.inputs.clone();
                xs[k] = t.clone();
                eval_case(c, &xs)
            };
            let numeric = central_difference(&mut f, &c.inputs[k], i, 1e-6);
            worst = worst.max(relative_error(analytic.data()[i], numeric));
        }
    }
    worst
}

pub fn objective_model() -> Model {
    build_model(&ModelDescriptor::toy_seg(4, 4), 11).unwrap()
}

type Objective = Box<dyn Fn(&Model, &mut Graph, Var) -> Result<Var>>;

pub fn objective_cases() -> Vec<(&'static str, Objective)> {
    let specs = default_transform_set(3);
    let labels: Vec<usize> = (0..12 * 12).map(|i| ((i / 12) / 4 + (i % 12) / 6) % 4).collect();
    let (s1, s2, s3) = (specs.clone(), specs.clone(), specs);
    let l2 = labels.clone();
    vec![
        (
            "equivariance",
            Box::new(move |m: &Model, g: &mut Graph, x: Var| {
                Ok(equivariance_loss(m, g, x, &s1, &ConstraintSample::full())?.loss)
            }) as Objective,
        ),
        (
            "task",
            Box::new(move |m: &Model, g: &mut Graph, x: Var| task_loss(m, g, x, &labels)),
        ),
        (
            "adaptive",
            Box::new(move |m: &Model, g: &mut Graph, x: Var| {
                adaptive_objective(m, g, x, &l2, &s2, 10.0)
            }),
        ),
        (
            "invariance",
            Box::new(move |m: &Model, g: &mut Graph, x: Var| invariance_loss(m, g, x, &s3)),
        ),
    ]
}

pub fn objective_input() -> Tensor {
    uniform(&[1, 3, 12, 12], 0.2, 0.8, 90)
}

/// Largest relative error of the input gradient over `count` coordinates.
pub fn check_objective(net: &Model, f: &Objective, count: usize) -> f64 {
    let x = objective_input();
    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let loss = f(net, &mut g, xv).unwrap();
    g.backward(loss).unwrap();
    let analytic = g.grad(xv).unwrap().clone();
    let mut value = |t: &Tensor| {
        let mut g = Graph::new();
        let xv = g.constant(t.clone());
        let l = f(net, &mut g, xv).unwrap();
        g.value(l).item()
    };
    coords(x.numel(), count, 91)
        .into_iter()
        .map(|i| relative_error(analytic.data()[i], central_difference(&mut value, &x, i, 1e-6)))
        .fold(0.0, f64::max)
}
