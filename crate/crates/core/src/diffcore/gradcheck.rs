use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Checks at most this many randomly chosen entries per parameter; `None`
    /// checks every entry.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, serde::Serialize)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn failing(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.passed)
    }
}

/// Compares reverse-mode gradients of `loss` against central differences.
///
/// `loss` builds the scalar on a fresh graph from the given store. Relative
/// error per entry is `|analytic − numeric| / max(1, |analytic|)`. Buffers
/// (running statistics) are skipped.
pub fn grad_check<F>(store: &ParamStore<f64>, loss: F, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let l = loss(&mut g, store)?;
    let grads = g.backward(l)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    grads.accumulate_into(&g, &mut analytic)?;
    drop(g);

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(&mut g, s)?;
        let v = g.value(l).item();
        if !v.is_finite() {
            return Err(Error::Numerical(format!("loss evaluated to {v}")));
        }
        Ok(v)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = store.clone();
    let names: Vec<String> = store
        .names()
        .filter(|n| !ParamStore::<f64>::is_buffer(n))
        .map(str::to_string)
        .collect();
    let mut params = Vec::with_capacity(names.len());
    for name in names {
        let n = store.get(&name).map_or(0, |t| t.numel());
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let ga = analytic.grad(&name).expect("slot exists").data().to_vec();
        let mut max_rel = 0.0f64;
        for &i in &coords {
            let orig = work.get(&name).expect("present").data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + opts.eps;
            let up = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - opts.eps;
            let down = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.eps);
            let rel = (ga[i] - numeric).abs() / ga[i].abs().max(1.0);
            max_rel = max_rel.max(rel);
        }
        params.push(ParamCheck {
            name,
            coords_checked: coords.len(),
            max_rel_err: max_rel,
            passed: max_rel < opts.tol,
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Tensor;

    fn store() -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(vec![3], &[0.7, -1.3, 0.2]).unwrap());
        s.insert("v", Tensor::from_f64(vec![2, 2], &[1.5, -0.4, 0.9, 0.1]).unwrap());
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let report = grad_check(
            &store(),
            |g, s| {
                let w = g.param(s, "w")?;
                let v = g.param(s, "v")?;
                let ww = g.mul(w, w)?;
                let a = g.sum(ww);
                let vv = g.matmul(v, v)?;
                let b = g.sum(vv);
                let l = g.add(a, b)?;
                Ok(g.scale(l, 3.0))
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.max_rel_err() < 1e-8, "{}", report.max_rel_err());
    }

    #[test]
    fn detached_branch_is_flagged() {
        // w² computed as w · stop_grad(w): the product rule loses one term.
        let report = grad_check(
            &store(),
            |g, s| {
                let w = g.param(s, "w")?;
                let frozen = g.constant(s.get("w").unwrap().clone());
                let ww = g.mul(w, frozen)?;
                let a = g.sum(ww);
                let v = g.param(s, "v")?;
                let vv = g.mul(v, v)?;
                let b = g.sum(vv);
                g.add(a, b)
            },
            &GradCheckOptions::default(),
        )
        .unwrap();
        let failing: Vec<_> = report.failing().map(|p| p.name.as_str()).collect();
        assert_eq!(failing, vec!["w"]);
    }
}
