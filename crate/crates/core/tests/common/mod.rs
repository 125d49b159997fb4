#![allow(dead_code)]

use nanoinv::geomrecover::LaplacianMisfit;
use nanoinv::graphrep::encode_with_norm;
use nanoinv::nn::{grad_eval, Conv2dOpts, RngStream, Tape, Tensor, Var};
use nanoinv::structgen::AtomCloud;
use nanoinv::Result;

const STEP: f64 = 1e-6;

/// Worst elementwise `|a - n| / max(|a|, |n|, 1e-3 max|n|)`; the floor keeps entries
/// whose true gradient is nearly zero from dominating through cancellation.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let top = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (1e-3 * top).max(1e-300);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor)).fold(0.0, f64::max)
}

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// Worst relative error between the tape gradient and central differences of
/// `sum(op(inputs) * w)` for a fixed random `w`.
pub fn check_op(inputs: &[Tensor<f64>], build: &Build, seed: u64) -> f64 {
    let eval = |xs: &[Tensor<f64>]| -> (f64, Vec<Tensor<f64>>) {
        let mut tape = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
        let out = build(&mut tape, &vars).expect("op");
        let w: Tensor<f64> = RngStream::new(seed).normal_tensor(tape.shape(out));
        let wv = tape.constant(w);
        let prod = tape.mul(out, wv).expect("mul");
        let loss = tape.sum(prod);
        let value = tape.value(loss).item().expect("scalar");
        let grads = grad_eval(&tape, loss, &vars).expect("backward");
        (value, grads)
    };
    let (_, analytic) = eval(inputs);
    let mut a = Vec::new();
    let mut n = Vec::new();
    for (i, x) in inputs.iter().enumerate() {
        for j in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= STEP;
            a.push(analytic[i].data()[j]);
            n.push((eval(&plus).0 - eval(&minus).0) / (2.0 * STEP));
        }
    }
    rel_err(&a, &n)
}

fn t(rng: &mut RngStream, shape: &[usize]) -> Tensor<f64> {
    rng.normal_tensor(shape)
}

/// Inputs bounded away from `lo` and zero for ops with kinks or poles.
fn away(rng: &mut RngStream, shape: &[usize], lo: f64) -> Tensor<f64> {
    let x: Tensor<f64> = rng.normal_tensor(shape);
    x.map(|v| if v >= 0.0 { lo + 0.2 + v } else { -(lo + 0.2) + v })
}

/// Every tape primitive with its worst gradient error.
pub fn primitive_errors() -> Vec<(&'static str, f64)> {
    let mut rng = RngStream::new(2024);
    let r = &mut rng;
    let conv = |stride, pad| Conv2dOpts { stride, pad };
    let cases: Vec<(&'static str, Vec<Tensor<f64>>, Box<Build>)> = vec![
        ("add", vec![t(r, &[3, 4]), t(r, &[3, 4])], Box::new(|tp, v| tp.add(v[0], v[1]))),
        ("sub", vec![t(r, &[3, 4]), t(r, &[3, 4])], Box::new(|tp, v| tp.sub(v[0], v[1]))),
        ("mul", vec![t(r, &[3, 4]), t(r, &[3, 4])], Box::new(|tp, v| tp.mul(v[0], v[1]))),
        ("div", vec![t(r, &[3, 4]), away(r, &[3, 4], 0.5)], Box::new(|tp, v| tp.div(v[0], v[1]))),
        ("scale", vec![t(r, &[5])], Box::new(|tp, v| Ok(tp.scale(v[0], -1.7)))),
        ("offset", vec![t(r, &[5])], Box::new(|tp, v| Ok(tp.offset(v[0], 0.3)))),
        ("tanh", vec![t(r, &[6])], Box::new(|tp, v| Ok(tp.tanh(v[0])))),
        ("sigmoid", vec![t(r, &[6])], Box::new(|tp, v| Ok(tp.sigmoid(v[0])))),
        ("silu", vec![t(r, &[6])], Box::new(|tp, v| Ok(tp.silu(v[0])))),
        ("exp", vec![t(r, &[6])], Box::new(|tp, v| Ok(tp.exp(v[0])))),
        ("log", vec![t(r, &[6]).map(|v| v.abs() + 0.5)], Box::new(|tp, v| Ok(tp.log(v[0])))),
        ("abs", vec![away(r, &[6], 0.0)], Box::new(|tp, v| Ok(tp.abs(v[0])))),
        ("square", vec![t(r, &[6])], Box::new(|tp, v| Ok(tp.square(v[0])))),
        (
            "clamp",
            vec![Tensor::new([6], vec![-2.0, -0.9, -0.2, 0.3, 0.8, 1.9]).unwrap()],
            Box::new(|tp, v| Ok(tp.clamp(v[0], -1.0, 1.0))),
        ),
        ("matmul", vec![t(r, &[3, 4]), t(r, &[4, 2])], Box::new(|tp, v| tp.matmul(v[0], v[1]))),
        ("add_bias", vec![t(r, &[2, 3, 2, 2]), t(r, &[3])], Box::new(|tp, v| tp.add_bias(v[0], v[1]))),
        (
            "affine",
            vec![t(r, &[2, 3]), t(r, &[3, 4]), t(r, &[4])],
            Box::new(|tp, v| tp.affine(v[0], v[1], v[2])),
        ),
        (
            "conv2d",
            vec![t(r, &[2, 2, 5, 5]), t(r, &[3, 2, 3, 3])],
            Box::new(move |tp, v| tp.conv2d(v[0], v[1], conv((1, 1), (1, 1)))),
        ),
        (
            "conv2d_strided",
            vec![t(r, &[1, 2, 6, 5]), t(r, &[2, 2, 3, 3])],
            Box::new(move |tp, v| tp.conv2d(v[0], v[1], conv((2, 2), (1, 1)))),
        ),
        (
            "conv2d_row",
            vec![t(r, &[2, 3, 1, 8]), t(r, &[2, 3, 1, 3])],
            Box::new(move |tp, v| tp.conv2d(v[0], v[1], conv((1, 2), (0, 1)))),
        ),
        ("upsample", vec![t(r, &[1, 2, 2, 3])], Box::new(|tp, v| tp.upsample(v[0], 2, 2))),
        ("broadcast2d", vec![t(r, &[2, 3])], Box::new(|tp, v| tp.broadcast2d(v[0], 2, 3))),
        ("reshape", vec![t(r, &[2, 6])], Box::new(|tp, v| tp.reshape(v[0], &[3, 4]))),
        ("concat", vec![t(r, &[2, 1, 3]), t(r, &[2, 2, 3])], Box::new(|tp, v| tp.concat(&[v[0], v[1]], 1))),
        ("slice", vec![t(r, &[2, 4, 3])], Box::new(|tp, v| tp.slice(v[0], 1, 1, 2))),
        (
            "sum",
            vec![t(r, &[3, 3])],
            Box::new(|tp, v| {
                let s = tp.sum(v[0]);
                Ok(s)
            }),
        ),
        ("mean", vec![t(r, &[3, 3])], Box::new(|tp, v| Ok(tp.mean(v[0])))),
        ("mse", vec![t(r, &[2, 5]), t(r, &[2, 5])], Box::new(|tp, v| tp.mse(v[0], v[1]))),
    ];
    cases.into_iter().enumerate().map(|(i, (name, xs, f))| (name, check_op(&xs, f.as_ref(), 77 + i as u64))).collect()
}

/// Worst relative error of the analytic Laplacian-misfit gradient against
/// central differences, at a perturbed copy of the true coordinates.
pub fn refine_gradient_error(cloud: &AtomCloud, seed: u64) -> f64 {
    let n = cloud.len();
    let img = encode_with_norm(cloud, 5.0, n, n as f64).unwrap();
    let obj = LaplacianMisfit::from_image(&img).unwrap();
    let mut rng = RngStream::new(seed);
    let z: Vec<f64> = cloud.coords().iter().flatten().map(|&v| v + 0.3 * rng.normal()).collect();
    let (_, grad) = obj.value_and_gradient(&z);
    let h = 1e-5;
    let numeric: Vec<f64> = (0..z.len())
        .map(|k| {
            let mut p = z.clone();
            p[k] += h;
            let mut m = z.clone();
            m[k] -= h;
            (obj.value(&p) - obj.value(&m)) / (2.0 * h)
        })
        .collect();
    rel_err(&grad, &numeric)
}
