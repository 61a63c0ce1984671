//! Normalized probabilists' Hermite polynomials `He_k / √k!` and total-degree
//! multi-index sets.

/// Values `ψ_k(x) = He_k(x)/√k!` for `k = 0..=degree`.
pub(crate) fn hermite_values(x: f64, degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    if degree == 0 {
        return;
    }
    out.push(x);
    // He_{k+1} = x He_k − k He_{k−1}, rescaled by √(k+1)!
    for k in 1..degree {
        let next = (x * out[k] - (k as f64).sqrt() * out[k - 1]) / ((k + 1) as f64).sqrt();
        out.push(next);
    }
}

/// Values and first derivatives of `ψ_k`. Uses `ψ_k' = √k · ψ_{k−1}`.
pub(crate) fn hermite_values_and_derivs(
    x: f64,
    degree: usize,
    vals: &mut Vec<f64>,
    ders: &mut Vec<f64>,
) {
    hermite_values(x, degree, vals);
    ders.clear();
    ders.push(0.0);
    for k in 1..=degree {
        ders.push((k as f64).sqrt() * vals[k - 1]);
    }
}

/// All multi-indices over `nvars` variables with total degree `≤ degree`, in
/// graded lexicographic order: sorted by total degree, then lexicographically
/// descending with the first variable varying slowest. With `nvars == 0` the
/// set is `{()}`.
pub(crate) fn total_degree_set(nvars: usize, degree: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    for total in 0..=degree {
        let mut cur = vec![0; nvars];
        fill(&mut out, &mut cur, 0, total);
    }
    out
}

fn fill(out: &mut Vec<Vec<usize>>, cur: &mut Vec<usize>, pos: usize, remaining: usize) {
    let n = cur.len();
    if n == 0 {
        if remaining == 0 {
            out.push(Vec::new());
        }
        return;
    }
    if pos == n - 1 {
        cur[pos] = remaining;
        out.push(cur.clone());
        return;
    }
    for k in (0..=remaining).rev() {
        cur[pos] = k;
        fill(out, cur, pos + 1, remaining - k);
    }
    cur[pos] = 0;
}
