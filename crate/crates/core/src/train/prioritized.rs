use rand::Rng;

/// Indices drawn with probability proportional to their priority, and the
/// matching importance weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PrioritizedDraw {
    pub indices: Vec<usize>,
    /// `(n p_i)^-1` for each drawn index, scaled so the largest is 1.
    pub weights: Vec<f64>,
    /// Sampling distribution over all `n` samples.
    pub probabilities: Vec<f64>,
}

/// Loss-proportional sampling with replacement: `p_i ∝ (loss_i + floor)^exponent`.
/// An exponent of zero is uniform sampling. If every priority is zero the
/// draw falls back to uniform.
pub fn prioritized_sample<R: Rng + ?Sized>(
    losses: &[f64],
    exponent: f64,
    count: usize,
    floor: f64,
    rng: &mut R,
) -> PrioritizedDraw {
    let n = losses.len();
    let mut priorities: Vec<f64> = losses.iter().map(|l| (l + floor).powf(exponent)).collect();
    let mut total: f64 = priorities.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        priorities.iter_mut().for_each(|p| *p = 1.0);
        total = n as f64;
    }
    let probabilities: Vec<f64> = priorities.iter().map(|p| p / total).collect();

    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for p in &priorities {
        acc += p;
        cumulative.push(acc);
    }

    let mut indices = Vec::with_capacity(count);
    if n > 0 {
        for _ in 0..count {
            let u = rng.random::<f64>() * acc;
            let i = cumulative.partition_point(|&c| c <= u).min(n - 1);
            // Skip zero-mass entries that the search can land on at the edges.
            let i = (i..n)
                .chain((0..i).rev())
                .find(|&j| priorities[j] > 0.0)
                .unwrap_or(i);
            indices.push(i);
        }
    }

    let mut weights: Vec<f64> = indices
        .iter()
        .map(|&i| 1.0 / (n as f64 * probabilities[i]))
        .collect();
    let max = weights.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        weights.iter_mut().for_each(|w| *w /= max);
    }
    PrioritizedDraw {
        indices,
        weights,
        probabilities,
    }
}
