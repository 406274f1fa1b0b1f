use super::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max |g_fd − g_ad| / max(|g_fd|, |g_ad|, 1e-8) over checked coordinates.
    pub max_rel_error: f64,
    /// (input index, element index) of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates excluded because the perturbation straddles a kink
    /// (relu at zero, hinge at its threshold).
    pub kinks: usize,
}

fn eval<F, E>(f: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Tape<f64>, Vec<Var>, Var), E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    Ok((tape.value(root).item(), tape, vars, root))
}

/// Compares the autodiff gradient of a scalar function with central finite
/// differences at every element of every input.
pub fn grad_check<F, E>(f: F, inputs: &[Tensor<f64>], eps: f64) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}

/// Like [`grad_check`], restricted to the listed (input, element) coordinates.
pub fn grad_check_coords<F, E>(
    f: F,
    inputs: &[Tensor<f64>],
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport, E>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
    E: From<TensorError>,
{
    let (f0, tape, vars, root) = eval(&f, inputs)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        kinks: 0,
    };
    let mut perturbed: Vec<Tensor<f64>> = inputs.to_vec();
    for &(i, j) in coords {
        let base = inputs[i].data()[j];
        let mut data = inputs[i].data().to_vec();
        data[j] = base + eps;
        perturbed[i] = Tensor::from_vec(inputs[i].shape().to_vec(), data.clone())?;
        let (plus, ..) = eval(&f, &perturbed)?;
        data[j] = base - eps;
        perturbed[i] = Tensor::from_vec(inputs[i].shape().to_vec(), data)?;
        let (minus, ..) = eval(&f, &perturbed)?;
        perturbed[i] = inputs[i].clone();

        let fd = (plus - minus) / (2.0 * eps);
        let ad = analytic[i].data()[j];
        let rel = (fd - ad).abs() / fd.abs().max(ad.abs()).max(1e-8);
        // A kink shows as one-sided slopes that disagree, with the analytic
        // gradient matching one side.
        let (right, left) = ((plus - f0) / eps, (f0 - minus) / eps);
        let scale = right.abs().max(left.abs()).max(1e-8);
        let near = |s: f64| (s - ad).abs() <= 1e-2 * scale;
        if rel > 1e-6 && (right - left).abs() > 1e-2 * scale && (near(right) || near(left)) {
            report.kinks += 1;
            continue;
        }
        report.checked += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
