//! Central finite differences against the reverse-mode gradients.

use fadekit::error::Result;
use fadekit::tensor::{Conv2dSpec, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    build: Build,
}

impl OpCase {
    fn new(
        name: &'static str,
        inputs: Vec<Tensor>,
        build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static,
    ) -> Self {
        Self {
            name,
            inputs,
            build: Box::new(build),
        }
    }
}

/// `|a − n| / max(|a|, |n|, 1e-3)`: relative where the gradient is
/// appreciable, absolute below that.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Scalarises the op output with fixed random weights so every output
/// element contributes to the checked gradient.
fn forward(case: &OpCase, inputs: &[Tensor], weights: Option<&Tensor>) -> Result<(Graph, Vec<Var>, Var, Tensor)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = (case.build)(&mut g, &vars)?;
    let w = match weights {
        Some(w) => w.clone(),
        None => Tensor::rand_uniform(
            g.value(out).shape().to_vec(),
            0.5,
            1.5,
            &mut ChaCha8Rng::seed_from_u64(99),
        ),
    };
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    let loss = g.sum(prod)?;
    Ok((g, vars, loss, w))
}

/// Largest relative error over every element of every input.
pub fn max_rel_error(case: &OpCase) -> Result<f64> {
    let (mut g, vars, loss, w) = forward(case, &case.inputs, None)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| g.grad(v).cloned().expect("every input requires grad"))
        .collect();
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let (g, _, loss, _) = forward(case, inputs, Some(&w))?;
        g.value(loss).item()
    };
    let mut worst = 0.0f64;
    for (i, input) in case.inputs.iter().enumerate() {
        for k in 0..input.len() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[k] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[k] -= STEP;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * STEP);
            worst = worst.max(rel_error(analytic[i].data()[k], numeric));
        }
    }
    Ok(worst)
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape.to_vec(), 1.0, rng)
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(shape: &[usize], kinks: &[f64], gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// One case per differentiable op, inputs drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let ab = |r: &mut ChaCha8Rng| vec![randn(&[2, 3], r), randn(&[2, 3], r)];
    let mask = Tensor::rand_uniform(vec![2, 3], 0.0, 1.0, r);
    // |a − b| kept away from zero for the L1 kink
    let a = randn(&[2, 3], r);
    let offset = away_from(&[2, 3], &[0.0], 0.05, r);
    let b = a.zip_map(&offset, |x, o| x + o).unwrap();
    let labels = vec![2usize, 0, 3];
    vec![
        OpCase::new("add", ab(r), |g, v| g.add(v[0], v[1])),
        OpCase::new("sub", ab(r), |g, v| g.sub(v[0], v[1])),
        OpCase::new("mul", ab(r), |g, v| g.mul(v[0], v[1])),
        OpCase::new("scale", vec![randn(&[2, 3], r)], |g, v| g.scale(v[0], -1.7)),
        OpCase::new("matmul", vec![randn(&[2, 3], r), randn(&[3, 4], r)], |g, v| {
            g.matmul(v[0], v[1])
        }),
        OpCase::new("add_bias", vec![randn(&[2, 2, 3], r), randn(&[3], r)], |g, v| {
            g.add_bias(v[0], v[1])
        }),
        OpCase::new(
            "conv2d",
            vec![randn(&[2, 2, 5, 4], r), randn(&[3, 2, 3, 3], r), randn(&[3], r)],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), Conv2dSpec { stride: 1, padding: 1 }),
        ),
        OpCase::new(
            "conv2d_strided",
            vec![randn(&[1, 2, 6, 5], r), randn(&[2, 2, 3, 2], r)],
            |g, v| g.conv2d(v[0], v[1], None, Conv2dSpec { stride: 2, padding: 0 }),
        ),
        OpCase::new("relu", vec![away_from(&[2, 5], &[0.0], 1e-3, r)], |g, v| g.relu(v[0])),
        OpCase::new("avg_pool2d", vec![randn(&[2, 2, 4, 6], r)], |g, v| {
            g.avg_pool2d(v[0], 2)
        }),
        OpCase::new("upsample_nearest2d", vec![randn(&[1, 2, 2, 3], r)], |g, v| {
            g.upsample_nearest2d(v[0], 2)
        }),
        OpCase::new("reshape", vec![randn(&[2, 6], r)], |g, v| g.reshape(v[0], vec![3, 4])),
        OpCase::new("flatten", vec![randn(&[2, 2, 3], r)], |g, v| g.flatten(v[0])),
        OpCase::new("sum", vec![randn(&[3, 2], r)], |g, v| g.sum(v[0])),
        OpCase::new("mean", vec![randn(&[3, 2], r)], |g, v| g.mean(v[0])),
        OpCase::new("l2_norm", vec![randn(&[3, 2], r)], |g, v| g.l2_norm(v[0])),
        OpCase::new("normalize_rows", vec![randn(&[3, 4], r)], |g, v| g.normalize_rows(v[0])),
        OpCase::new("sq_l2_distance", ab(r), |g, v| g.sq_l2_distance(v[0], v[1])),
        OpCase::new("l1_distance", vec![a, b], |g, v| g.l1_distance(v[0], v[1])),
        OpCase::new("cross_entropy", vec![randn(&[3, 4], r)], move |g, v| {
            g.cross_entropy(v[0], &labels)
        }),
        OpCase::new("elementwise_blend", ab(r), move |g, v| {
            g.elementwise_blend(v[0], v[1], &mask)
        }),
        OpCase::new("clamp", vec![away_from(&[2, 5], &[-0.5, 0.5], 1e-3, r)], |g, v| {
            g.clamp(v[0], -0.5, 0.5)
        }),
        OpCase::new(
            "conv_relu_pool_chain",
            vec![randn(&[1, 1, 4, 4], r), randn(&[2, 1, 3, 3], r)],
            |g, v| {
                let c = g.conv2d(v[0], v[1], None, Conv2dSpec { stride: 1, padding: 1 })?;
                let t = g.scale(c, 0.5)?;
                let p = g.avg_pool2d(t, 2)?;
                let f = g.flatten(p)?;
                g.normalize_rows(f)
            },
        ),
    ]
}
