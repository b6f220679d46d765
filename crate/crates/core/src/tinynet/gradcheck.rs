use rand::Rng;

use super::network::{softmax, Network, ReluBackward, Trace};
use super::tensor::Tensor3;
use crate::rng;

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub batch: usize,
    /// Coordinates compared per weight array.
    pub per_layer: usize,
    pub relu: ReluBackward,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 2,
            per_layer: 20,
            relu: ReluBackward::Exact,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Max relative error per weight array, with the number of coordinates
    /// actually compared.
    pub per_layer: Vec<(String, f64, usize)>,
}

/// Maximum relative error between analytic and central-difference gradients
/// of the mean cross-entropy on a random micro-batch.
pub fn grad_check(model: &Network, eps: f64) -> f64 {
    grad_check_with(model, eps, &GradCheckOptions::default()).max_rel_error
}

/// Like [`grad_check`] with explicit options and a per-layer breakdown.
///
/// Coordinates whose perturbation moves the network onto a different linear
/// piece (a ReLU sign or pooling choice flips) are skipped, since central
/// differences are meaningless across a kink.
pub fn grad_check_with(model: &Network, eps: f64, opts: &GradCheckOptions) -> GradCheckReport {
    assert!(eps > 0.0 && eps <= 0.1, "eps must lie in (0, 0.1]");
    let spec = model.spec();
    let mut r = rng::seeded(rng::derive(opts.seed, "gradcheck"));
    let batch: Vec<(Tensor3, usize)> = (0..opts.batch)
        .map(|_| {
            let data = (0..spec.input_len()).map(|_| r.random::<f64>()).collect();
            let x = Tensor3::from_vec(spec.input_channels, spec.input_height, spec.input_width, data);
            (x, r.random_range(0..spec.n_outputs))
        })
        .collect();

    let loss_and_traces = |net: &Network| -> (f64, Vec<Trace>) {
        let mut total = 0.0;
        let traces = batch
            .iter()
            .map(|(x, y)| {
                let t = net.trace(x).expect("input matches spec");
                total -= softmax(&t.logits)[*y].ln();
                t
            })
            .collect();
        (total / batch.len() as f64, traces)
    };

    let (_, base) = loss_and_traces(model);
    let mut analytic = vec![0.0; model.params().len()];
    for (t, (_, y)) in base.iter().zip(&batch) {
        let mut d = softmax(&t.logits);
        d[*y] -= 1.0;
        d.iter_mut().for_each(|v| *v /= batch.len() as f64);
        model.backward(t, &d, &mut analytic, opts.relu);
    }

    let mut probe = model.clone();
    let mut per_layer = Vec::new();
    let mut overall: f64 = 0.0;
    for e in model.layout().entries.clone() {
        let mut worst: f64 = 0.0;
        let mut compared = 0;
        let mut attempts = 0;
        let wanted = opts.per_layer.min(e.len);
        while compared < wanted && attempts < 10 * opts.per_layer.max(1) {
            attempts += 1;
            let j = if e.len <= opts.per_layer {
                e.offset + (attempts - 1) % e.len
            } else {
                e.offset + r.random_range(0..e.len)
            };
            let orig = probe.params()[j];
            probe.params_mut()[j] = orig + eps;
            let (lp, tp) = loss_and_traces(&probe);
            probe.params_mut()[j] = orig - eps;
            let (lm, tm) = loss_and_traces(&probe);
            probe.params_mut()[j] = orig;
            let smooth = tp.iter().zip(&tm).zip(&base).all(|((a, b), c)| a.same_pattern(c) && b.same_pattern(c));
            if !smooth {
                continue;
            }
            compared += 1;
            let numeric = (lp - lm) / (2.0 * eps);
            let a = analytic[j];
            let denom = a.abs().max(numeric.abs());
            let rel = if denom < 1e-10 { 0.0 } else { (a - numeric).abs() / denom };
            worst = worst.max(rel);
        }
        overall = overall.max(worst);
        per_layer.push((e.name.clone(), worst, compared));
    }
    GradCheckReport {
        max_rel_error: overall,
        per_layer,
    }
}
