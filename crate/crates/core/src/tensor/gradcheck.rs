//! Central-difference gradient checking.

use serde::Serialize;

use super::{Result, SeededRng, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub h: f64,
    pub tol: f64,
    /// Coordinates to test; all of them when the tensor is smaller.
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            max_coords: 64,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CoordCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub tol: f64,
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.coords.iter().all(|c| c.pass)
    }

    pub fn pass_fraction(&self) -> f64 {
        if self.coords.is_empty() {
            return 1.0;
        }
        self.coords.iter().filter(|c| c.pass).count() as f64 / self.coords.len() as f64
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Up to `max` distinct indices in `[0, n)`, sorted; every index when `n ≤ max`.
pub fn sample_coords(n: usize, max: usize, seed: u64) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = SeededRng::new(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..max {
        let j = i + rng.index(n - i);
        pool.swap(i, j);
    }
    let mut picked = pool[..max].to_vec();
    picked.sort_unstable();
    picked
}

/// Compares `analytic(i)` against `(f(+h) − f(−h)) / 2h` for each index,
/// where `eval(i, δ)` evaluates the objective with coordinate `i` shifted
/// by `δ`. `eval(_, 0.0)` must be reproducible bit for bit.
pub fn check_coordinates(
    name: &str,
    coords: &[usize],
    analytic: impl Fn(usize) -> f64,
    mut eval: impl FnMut(usize, f64) -> Result<f64>,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    if cfg.h <= 0.0 {
        return Err(TensorError::Contract("finite-difference step must be > 0".into()));
    }
    if let Some(&first) = coords.first() {
        let (a, b) = (eval(first, 0.0)?, eval(first, 0.0)?);
        if a.to_bits() != b.to_bits() {
            return Err(TensorError::Contract(format!(
                "{name}: objective is not deterministic ({a} vs {b})"
            )));
        }
    }
    let mut out = Vec::with_capacity(coords.len());
    for &i in coords {
        let plus = eval(i, cfg.h)?;
        let minus = eval(i, -cfg.h)?;
        let numeric = (plus - minus) / (2.0 * cfg.h);
        let a = analytic(i);
        let rel_error = relative_error(a, numeric);
        out.push(CoordCheck {
            index: i,
            analytic: a,
            numeric,
            rel_error,
            pass: rel_error < cfg.tol,
        });
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        tol: cfg.tol,
        coords: out,
    })
}

/// Checks the tape gradient of `f` at `x` against central differences.
pub fn finite_diff_check<F>(name: &str, f: F, x: &Tensor, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone().trainable());
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let coords = sample_coords(x.len(), cfg.max_coords, cfg.seed);
    check_coordinates(
        name,
        &coords,
        |i| analytic[i],
        |i, delta| {
            let mut xp = x.clone();
            xp.data_mut()[i] += delta;
            let mut tape = Tape::no_grad();
            let v = tape.constant(xp);
            let out = f(&mut tape, v)?;
            tape.check_finite()?;
            Ok(tape.scalar(out))
        },
        cfg,
    )
}

type Objective = Box<dyn for<'t> Fn(&mut Tape<'t>, Var) -> Result<Var>>;

fn readout(t: &mut Tape<'_>, out: Var, target: &Tensor) -> Result<Var> {
    let r = t.constant(target.clone());
    t.mse(out, r)
}

/// One gradient check per differentiable tape op (and per differentiable
/// operand where an op has several), each on small random tensors with an
/// MSE readout against a random target.
pub fn check_all_ops(cfg: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = SeededRng::new(cfg.seed ^ 0x6f70_7363);
    let mut r = |shape: &[usize]| Tensor::randn(shape, 1.0, &mut rng);
    let mut cases: Vec<(&str, Tensor, Objective)> = Vec::new();

    let (b, tgt) = (r(&[4, 3]), r(&[5, 3]));
    cases.push(("matmul.a", r(&[5, 4]), Box::new(move |t, x| {
        let b = t.constant(b.clone());
        let y = t.matmul(x, b)?;
        readout(t, y, &tgt)
    })));
    let (a, tgt) = (r(&[5, 4]), r(&[5, 3]));
    cases.push(("matmul.b", r(&[4, 3]), Box::new(move |t, x| {
        let a = t.constant(a.clone());
        let y = t.matmul(a, x)?;
        readout(t, y, &tgt)
    })));
    let (b, tgt) = (r(&[6, 4]), r(&[3, 6]));
    cases.push(("matmul_t.a", r(&[3, 4]), Box::new(move |t, x| {
        let b = t.constant(b.clone());
        let y = t.matmul_t(x, b)?;
        readout(t, y, &tgt)
    })));
    let (a, tgt) = (r(&[3, 4]), r(&[3, 6]));
    cases.push(("matmul_t.b", r(&[6, 4]), Box::new(move |t, x| {
        let a = t.constant(a.clone());
        let y = t.matmul_t(a, x)?;
        readout(t, y, &tgt)
    })));
    let (o, tgt) = (r(&[3, 4]), r(&[3, 4]));
    cases.push(("add", r(&[3, 4]), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.add(x, o)?;
        let y = t.add(y, x)?;
        readout(t, y, &tgt)
    })));
    let (bias, tgt) = (r(&[4]), r(&[3, 4]));
    cases.push(("add_row.x", r(&[3, 4]), Box::new(move |t, x| {
        let b = t.constant(bias.clone());
        let y = t.add_row(x, b)?;
        readout(t, y, &tgt)
    })));
    let (xin, tgt) = (r(&[3, 4]), r(&[3, 4]));
    cases.push(("add_row.bias", r(&[4]), Box::new(move |t, b| {
        let x = t.constant(xin.clone());
        let y = t.add_row(x, b)?;
        readout(t, y, &tgt)
    })));
    let tgt = r(&[2, 3]);
    cases.push(("scale", r(&[2, 3]), Box::new(move |t, x| {
        let y = t.scale(x, -1.7);
        readout(t, y, &tgt)
    })));
    let tgt = r(&[3, 3]);
    cases.push(("relu", r(&[3, 3]), Box::new(move |t, x| {
        let y = t.relu(x);
        readout(t, y, &tgt)
    })));
    let tgt = r(&[2, 5]);
    cases.push(("softmax", r(&[2, 5]), Box::new(move |t, x| {
        let y = t.softmax(x)?;
        readout(t, y, &tgt)
    })));
    let (g, b, tgt) = (r(&[6]), r(&[6]), r(&[3, 6]));
    cases.push(("layer_norm.x", r(&[3, 6]), Box::new(move |t, x| {
        let (g, b) = (t.constant(g.clone()), t.constant(b.clone()));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        readout(t, y, &tgt)
    })));
    let (xin, b, tgt) = (r(&[3, 6]), r(&[6]), r(&[3, 6]));
    cases.push(("layer_norm.gain", r(&[6]), Box::new(move |t, g| {
        let (x, b) = (t.constant(xin.clone()), t.constant(b.clone()));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        readout(t, y, &tgt)
    })));
    let (xin, g, tgt) = (r(&[3, 6]), r(&[6]), r(&[3, 6]));
    cases.push(("layer_norm.bias", r(&[6]), Box::new(move |t, b| {
        let (x, g) = (t.constant(xin.clone()), t.constant(g.clone()));
        let y = t.layer_norm(x, g, b, 1e-5)?;
        readout(t, y, &tgt)
    })));
    let tgt = r(&[4, 3]);
    cases.push(("embedding", r(&[5, 3]), Box::new(move |t, table| {
        let y = t.embedding(table, &[4, 0, 4, 2])?;
        readout(t, y, &tgt)
    })));
    let (o, tgt) = (r(&[1, 3]), r(&[3, 3]));
    cases.push(("concat_rows", r(&[2, 3]), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.concat_rows(&[o, x])?;
        readout(t, y, &tgt)
    })));
    let (o, tgt) = (r(&[2, 2]), r(&[2, 5]));
    cases.push(("concat_cols", r(&[2, 3]), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.concat_cols(&[x, o])?;
        readout(t, y, &tgt)
    })));
    let tgt = r(&[2, 2]);
    cases.push(("narrow", r(&[3, 3]), Box::new(move |t, x| {
        let y = t.narrow(x, 3, &[2, 2])?;
        readout(t, y, &tgt)
    })));
    let tgt = r(&[1, 4]);
    cases.push(("mean_rows", r(&[3, 4]), Box::new(move |t, x| {
        let y = t.mean_rows(x);
        readout(t, y, &tgt)
    })));
    for causal in [false, true] {
        let (k, v, tgt) = (r(&[4, 8]), r(&[4, 8]), r(&[4, 8]));
        let name = if causal { "attention.causal.q" } else { "attention.q" };
        cases.push((name, r(&[4, 8]), Box::new(move |t, q| {
            let (k, v) = (t.constant(k.clone()), t.constant(v.clone()));
            let y = t.attention(q, k, v, 2, causal)?;
            readout(t, y, &tgt)
        })));
        let (q, v, tgt) = (r(&[4, 8]), r(&[4, 8]), r(&[4, 8]));
        let name = if causal { "attention.causal.k" } else { "attention.k" };
        cases.push((name, r(&[4, 8]), Box::new(move |t, k| {
            let (q, v) = (t.constant(q.clone()), t.constant(v.clone()));
            let y = t.attention(q, k, v, 2, causal)?;
            readout(t, y, &tgt)
        })));
        let (q, k, tgt) = (r(&[4, 8]), r(&[4, 8]), r(&[4, 8]));
        let name = if causal { "attention.causal.v" } else { "attention.v" };
        cases.push((name, r(&[4, 8]), Box::new(move |t, v| {
            let (q, k) = (t.constant(q.clone()), t.constant(k.clone()));
            let y = t.attention(q, k, v, 2, causal)?;
            readout(t, y, &tgt)
        })));
    }
    let (k, v, tgt) = (r(&[5, 8]), r(&[5, 8]), r(&[2, 8]));
    cases.push(("attention.cross", r(&[2, 8]), Box::new(move |t, q| {
        let (k, v) = (t.constant(k.clone()), t.constant(v.clone()));
        let y = t.attention(q, k, v, 4, false)?;
        readout(t, y, &tgt)
    })));
    cases.push(("cross_entropy", r(&[4, 6]), Box::new(|t, x| t.cross_entropy(x, &[1, 0, 5, 2], Some(0)))));
    let p = r(&[3, 5]);
    cases.push(("kl_divergence.q", r(&[3, 5]), Box::new(move |t, q| {
        let p = t.constant(p.clone());
        t.kl_divergence(p, q, &[true, false, true])
    })));
    let o = r(&[7]);
    cases.push(("mse", r(&[7]), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        t.mse(o, x)
    })));
    let w = r(&[4]);
    cases.push(("sum", r(&[4]), Box::new(move |t, x| {
        let w = t.constant(w.clone());
        let s = t.add(x, w)?;
        let s = t.relu(s);
        Ok(t.sum(s))
    })));
    let o = r(&[3]);
    cases.push(("weighted_sum", r(&[3]), Box::new(move |t, x| {
        let z = t.constant(o.clone());
        let a = t.mse(x, z)?;
        let b = t.sum(x);
        t.weighted_sum(&[(a, 0.3), (b, -2.0)])
    })));

    cases
        .into_iter()
        .map(|(name, x, f)| finite_diff_check(name, f, &x, cfg))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_tight() {
        let mut rng = SeededRng::new(1);
        let x = Tensor::randn(&[6], 1.0, &mut rng);
        let report = finite_diff_check(
            "quadratic",
            |t, x| {
                let z = t.constant(Tensor::zeros(&[6]));
                t.mse(x, z)
            },
            &x,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.worst().unwrap().rel_error < 1e-7);
    }

    #[test]
    fn constant_objective_has_zero_grads() {
        let x = Tensor::filled(&[3], 2.0);
        let report = finite_diff_check(
            "constant",
            |t, _x| Ok(t.constant(Tensor::scalar(4.0))),
            &x,
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed());
        assert!(report.coords.iter().all(|c| c.analytic == 0.0 && c.numeric == 0.0));
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        let mut calls = 0.0;
        let err = check_coordinates(
            "flaky",
            &[0],
            |_| 0.0,
            |_, _| {
                calls += 1.0;
                Ok(calls)
            },
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }

    #[test]
    fn every_op_passes_at_default_tolerance() {
        let reports = check_all_ops(&GradCheckConfig::default()).unwrap();
        assert!(reports.len() >= 25);
        for r in &reports {
            assert!(r.passed(), "{}: worst {:?}", r.name, r.worst());
        }
    }

    #[test]
    fn sampled_coords_are_distinct_and_sorted() {
        let c = sample_coords(1000, 50, 3);
        assert_eq!(c.len(), 50);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_coords(5, 50, 3), vec![0, 1, 2, 3, 4]);
    }
}
