//! Finite-difference verification of analytic gradients.
//!
//! Central differences in double precision against whatever the tape
//! computed. Vector-valued ops are reduced through a fixed random linear
//! functional so a single scalar probe exercises the whole Jacobian.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, VarId};

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<40} max_rel_err {:>12.3e}  tol {:>8.1e}  {}",
            self.op,
            self.max_rel_error,
            self.tolerance,
            if self.passed { "ok" } else { "FAIL" }
        )
    }
}

/// Compare the tape gradient of `build` against central finite differences.
///
/// `build` assembles the op under test from leaf variables and returns its
/// output node (any shape). The relative error denominator is
/// `max(|analytic|, |numeric|, 1e-8)` per element; the report passes iff the
/// worst element stays within `tolerance`.
pub fn grad_check<F>(
    op_name: &str,
    inputs: &[Tensor],
    epsilon: f64,
    tolerance: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    if !(epsilon > 0.0 && epsilon <= 1e-2) {
        return Err(Error::Input(format!(
            "grad_check epsilon must be in (0, 1e-2], got {epsilon}"
        )));
    }
    if tolerance <= 0.0 {
        return Err(Error::Input(format!(
            "grad_check tolerance must be positive, got {tolerance}"
        )));
    }

    // Probe once to learn the output size, then fix the reduction weights.
    let probe = run(&build, inputs, None)?;
    let weights = reduction_weights(probe.output_len);

    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    let scalar = scalarize(&mut tape, out, &weights)?;
    ensure_finite(tape.scalar(scalar), op_name)?;
    tape.backward(scalar)?;
    let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| tape.grad(v).to_vec()).collect();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for (j, &a) in analytic[ti].iter().enumerate().take(t.numel()) {
            let f_plus = perturbed_value(&build, inputs, &weights, ti, j, epsilon)?;
            let f_minus = perturbed_value(&build, inputs, &weights, ti, j, -epsilon)?;
            let numeric = (f_plus - f_minus) / (2.0 * epsilon);
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }

    Ok(GradCheckReport {
        op: op_name.to_string(),
        max_rel_error: max_rel,
        tolerance,
        passed: max_rel <= tolerance,
    })
}

struct Probe {
    output_len: usize,
}

fn run<F>(build: &F, inputs: &[Tensor], _: Option<()>) -> Result<Probe>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let vars: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    Ok(Probe {
        output_len: tape.value(out).len(),
    })
}

fn perturbed_value<F>(
    build: &F,
    inputs: &[Tensor],
    weights: &[f64],
    tensor_index: usize,
    element: usize,
    delta: f64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[VarId]) -> Result<VarId>,
{
    let mut shifted: Vec<Tensor> = inputs.to_vec();
    shifted[tensor_index].data_mut()[element] += delta;
    let mut tape = Tape::new();
    let vars: Vec<VarId> = shifted.iter().map(|t| tape.leaf(t)).collect();
    let out = build(&mut tape, &vars)?;
    let scalar = scalarize(&mut tape, out, weights)?;
    let v = tape.scalar(scalar);
    ensure_finite(v, "finite-difference probe")?;
    Ok(v)
}

fn scalarize(tape: &mut Tape, out: VarId, weights: &[f64]) -> Result<VarId> {
    if tape.value(out).len() == 1 {
        Ok(out)
    } else {
        tape.weighted_sum(out, weights)
    }
}

fn ensure_finite(v: f64, what: &str) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Numerical(format!("{what} produced {v}")))
    }
}

fn reduction_weights(len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0b5e);
    (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Gradient checks for every differentiable tensor op, one report per
/// (op, seed) pair. Used by the CLI `gradcheck` command and the acceptance
/// suite.
pub fn standard_op_suite(seeds: &[u64], epsilon: f64, tolerance: f64) -> Result<Vec<GradCheckReport>> {
    let mut reports = Vec::new();
    for &seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let a = random_tensor(&mut rng, vec![3, 4], -1.0, 1.0);
        let b = random_tensor(&mut rng, vec![4, 2], -1.0, 1.0);
        reports.push(grad_check(
            &format!("matmul[seed={seed}]"),
            &[a, b],
            1e-5,
            tolerance,
            |tape, vars| tape.matmul(vars[0], vars[1]),
        )?);

        let x = random_tensor(&mut rng, vec![5], -2.0, 2.0);
        reports.push(grad_check(
            &format!("softmax[seed={seed}]"),
            &[x],
            epsilon,
            tolerance,
            |tape, vars| tape.softmax(vars[0], 0),
        )?);

        let u = random_tensor(&mut rng, vec![8], -1.0, 1.0);
        let v = random_tensor(&mut rng, vec![8], -1.0, 1.0);
        reports.push(grad_check(
            &format!("cosine_similarity[seed={seed}]"),
            &[u, v],
            epsilon,
            tolerance,
            |tape, vars| tape.cosine(vars[0], vars[1]),
        )?);

        let x = random_tensor(&mut rng, vec![3, 6], -1.5, 1.5);
        let gamma = random_tensor(&mut rng, vec![6], 0.5, 1.5);
        let beta = random_tensor(&mut rng, vec![6], -0.5, 0.5);
        reports.push(grad_check(
            &format!("layer_norm[seed={seed}]"),
            &[x, gamma, beta],
            epsilon,
            tolerance,
            |tape, vars| Ok(tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)),
        )?);

        let x = random_tensor(&mut rng, vec![7], -3.0, 3.0);
        reports.push(grad_check(
            &format!("gelu[seed={seed}]"),
            &[x],
            epsilon,
            tolerance,
            |tape, vars| Ok(tape.gelu(vars[0])),
        )?);

        let table = random_tensor(&mut rng, vec![5, 3], -1.0, 1.0);
        reports.push(grad_check(
            &format!("embedding_gather[seed={seed}]"),
            &[table],
            epsilon,
            tolerance,
            |tape, vars| tape.gather(vars[0], &[4, 1, 1, 0]),
        )?);

        let x = random_tensor(&mut rng, vec![6], 0.2, 2.2);
        reports.push(grad_check(
            &format!("log[seed={seed}]"),
            &[x],
            epsilon,
            tolerance,
            |tape, vars| Ok(tape.log(vars[0])),
        )?);

        let x = random_tensor(&mut rng, vec![6], -2.0, 2.0);
        reports.push(grad_check(
            &format!("exp[seed={seed}]"),
            &[x],
            epsilon,
            tolerance,
            |tape, vars| Ok(tape.exp(vars[0])),
        )?);

        let q = random_tensor(&mut rng, vec![4, 4], -1.0, 1.0);
        reports.push(grad_check(
            &format!("causal_softmax[seed={seed}]"),
            &[q],
            epsilon,
            tolerance,
            |tape, vars| tape.causal_softmax(vars[0]),
        )?);

        let x = random_tensor(&mut rng, vec![5], -2.0, 2.0);
        reports.push(grad_check(
            &format!("log_softmax[seed={seed}]"),
            &[x],
            epsilon,
            tolerance,
            |tape, vars| tape.log_softmax(vars[0]),
        )?);
    }
    Ok(reports)
}
