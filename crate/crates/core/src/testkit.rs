//! Finite-difference gradient checking, shared by unit, integration and
//! acceptance tests. It only ever evaluates the forward closure, so it stays
//! independent of the backward pass it checks.

use crate::numkit::{ParamId, ParamStore};

/// Worst observed mismatch over the checked coordinates.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Relative error with a small floor on the denominator so coordinates whose
/// true gradient is ~0 are judged on absolute error.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central differences `(f(p+h) − f(p−h)) / 2h` for the listed coordinates of
/// `id`, compared against `analytic`.
pub fn check_coords<F>(
    store: &mut ParamStore,
    id: ParamId,
    coords: &[usize],
    analytic: &[f64],
    h: f64,
    mut f: F,
) -> GradCheck
where
    F: FnMut(&ParamStore) -> f64,
{
    let mut out = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for &c in coords {
        let orig = store.get(id).data()[c];
        store.get_mut(id).data_mut()[c] = orig + h;
        let up = f(store);
        store.get_mut(id).data_mut()[c] = orig - h;
        let down = f(store);
        store.get_mut(id).data_mut()[c] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[c];
        out.max_rel_err = out.max_rel_err.max(rel_err(a, numeric));
        out.max_abs_err = out.max_abs_err.max((a - numeric).abs());
        out.checked += 1;
    }
    out
}

/// Checks every coordinate of every parameter.
pub fn check_all<F, G>(store: &mut ParamStore, h: f64, mut f: F, grad: G) -> GradCheck
where
    F: FnMut(&ParamStore) -> f64,
    G: Fn(&ParamStore) -> Vec<Vec<f64>>,
{
    let analytic = grad(store);
    let ids: Vec<_> = store.ids().collect();
    let mut worst = GradCheck {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    for id in ids {
        let coords: Vec<usize> = (0..store.get(id).len()).collect();
        let r = check_coords(store, id, &coords, &analytic[id.index()], h, &mut f);
        worst.max_rel_err = worst.max_rel_err.max(r.max_rel_err);
        worst.max_abs_err = worst.max_abs_err.max(r.max_abs_err);
        worst.checked += r.checked;
    }
    worst
}

/// Brute-force ranking metrics written from the textbook definitions, used
/// as oracles for the fast versions in `metrics`.
pub mod oracle {
    use std::collections::BTreeSet;

    fn rel(list: &[u32], targets: &[u32], k: usize) -> Vec<f64> {
        let t: BTreeSet<u32> = targets.iter().copied().collect();
        (0..k)
            .map(|i| match list.get(i) {
                Some(id) if t.contains(id) => 1.0,
                _ => 0.0,
            })
            .collect()
    }

    pub fn recall(list: &[u32], targets: &[u32], k: usize) -> f64 {
        let t: BTreeSet<u32> = targets.iter().copied().collect();
        let shown: BTreeSet<u32> = list.iter().take(k).copied().collect();
        t.intersection(&shown).count() as f64 / t.len() as f64
    }

    pub fn precision(list: &[u32], targets: &[u32], k: usize) -> f64 {
        rel(list, targets, k).iter().sum::<f64>() / k as f64
    }

    pub fn hitrate(list: &[u32], targets: &[u32], k: usize) -> f64 {
        if rel(list, targets, k).iter().any(|r| *r > 0.0) {
            1.0
        } else {
            0.0
        }
    }

    pub fn ndcg(list: &[u32], targets: &[u32], k: usize) -> f64 {
        let gains = rel(list, targets, k);
        let dcg: f64 = gains.iter().enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum();
        let mut ideal = vec![0.0; k];
        for g in ideal.iter_mut().take(targets.len()) {
            *g = 1.0;
        }
        let idcg: f64 = ideal.iter().enumerate().map(|(i, g)| g / ((i + 2) as f64).log2()).sum();
        dcg / idcg
    }

    pub fn map(list: &[u32], targets: &[u32], k: usize) -> f64 {
        let gains = rel(list, targets, k);
        let mut total = 0.0;
        for i in 0..k {
            if gains[i] > 0.0 {
                total += precision(list, targets, i + 1);
            }
        }
        total / targets.len().min(k) as f64
    }

    pub fn max_run(creators: &[Option<u32>], k: usize) -> usize {
        let c = &creators[..k.min(creators.len())];
        let mut best = 0;
        for i in 0..c.len() {
            for j in i..c.len() {
                let same = c[i].is_some() && c[i..=j].iter().all(|x| *x == c[i]);
                if same || i == j {
                    best = best.max(j - i + 1);
                }
            }
        }
        best
    }
}
