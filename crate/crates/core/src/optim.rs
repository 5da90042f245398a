//! Box-constrained Nelder-Mead for derivative-free fitting.

/// Projects `x` onto the box `[lo, hi]` componentwise.
pub(crate) fn project(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for ((v, l), h) in x.iter_mut().zip(lo).zip(hi) {
        *v = v.clamp(*l, *h);
    }
}

/// Minimizes `f` starting from `x0`, keeping iterates inside `[lo, hi]`.
/// Returns (argmin, min). Standard reflection/expansion/contraction/shrink
/// coefficients; terminates on simplex collapse or `max_iters`.
pub(crate) fn nelder_mead<F>(
    f: F,
    x0: &[f64],
    lo: &[f64],
    hi: &[f64],
    max_iters: usize,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let n = x0.len();
    let eval = |x: &[f64]| -> f64 {
        let mut p = x.to_vec();
        project(&mut p, lo, hi);
        f(&p)
    };

    // Initial simplex: x0 plus a 5%-of-box step along each axis.
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut p = x0.to_vec();
        let step = 0.05 * (hi[i] - lo[i]).max(1e-12);
        p[i] = if p[i] + step <= hi[i] { p[i] + step } else { p[i] - step };
        let fp = eval(&p);
        simplex.push((p, fp));
    }

    let (alpha, gamma, rho, sigma) = (1.0, 2.0, 0.5, 0.5);
    for _ in 0..max_iters {
        simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite objective"));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread: f64 = simplex
            .iter()
            .flat_map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if (worst - best).abs() < 1e-12 && spread < 1e-9 {
            break;
        }

        let mut centroid = vec![0.0; n];
        for (p, _) in &simplex[..n] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / n as f64;
            }
        }
        let worst_p = simplex[n].0.clone();
        let reflect: Vec<f64> = centroid
            .iter()
            .zip(&worst_p)
            .map(|(c, w)| c + alpha * (c - w))
            .collect();
        let f_reflect = eval(&reflect);

        if f_reflect < simplex[0].1 {
            let expand: Vec<f64> = centroid
                .iter()
                .zip(&worst_p)
                .map(|(c, w)| c + gamma * (c - w))
                .collect();
            let f_expand = eval(&expand);
            simplex[n] = if f_expand < f_reflect {
                (expand, f_expand)
            } else {
                (reflect, f_reflect)
            };
        } else if f_reflect < simplex[n - 1].1 {
            simplex[n] = (reflect, f_reflect);
        } else {
            let contract: Vec<f64> = centroid
                .iter()
                .zip(&worst_p)
                .map(|(c, w)| c + rho * (w - c))
                .collect();
            let f_contract = eval(&contract);
            if f_contract < simplex[n].1 {
                simplex[n] = (contract, f_contract);
            } else {
                let best_p = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    for (v, b) in item.0.iter_mut().zip(&best_p) {
                        *v = b + sigma * (*v - b);
                    }
                    item.1 = eval(&item.0);
                }
            }
        }
    }
    simplex.sort_by(|a, b| a.1.partial_cmp(&b.1).expect("finite objective"));
    let mut best = simplex.swap_remove(0);
    project(&mut best.0, lo, hi);
    (best.0, best.1)
}
