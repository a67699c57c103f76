//! The multilayer forward pass of a restricted LSA model read as
//! preconditioned gradient steps on two stacks of objectives.
//!
//! With restricted layers only the label row moves, so after `l` layers
//! every context label is `y_j + <theta_l, x_j>` and the query entry is
//! `<theta_l, x_query>`. In the weight form used here `w = -theta`, and
//!
//! `w_{l+1}^T = w_l^T - b_l^T (J1(w_l) Abar_l + J2(w_l) [0; a_l^T])`
//!
//! with `J1`, `J2` the Jacobians of `R1`, `R2`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{invalid, shape, Result};
use crate::lsa::{LayerParams, LsaModel, ParamForm};
use crate::markov_data::Prompt;
use crate::rng::{domain, substream};

pub type WeightVector = DVector<f64>;

/// Context covariates (`d x n`) and labels of an embedding.
fn context(z: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let d = z.nrows() - 1;
    let n = z.ncols() - 1;
    let x = z.view((0, 0), (d, n)).into_owned();
    let y = DVector::from_iterator(n, z.row(d).iter().take(n).copied());
    (x, y)
}

fn check_w(w: &WeightVector, prompt: &Prompt) -> Result<()> {
    if w.len() != prompt.d() {
        return Err(shape(format!(
            "weight has length {}, prompt has d = {}",
            w.len(),
            prompt.d()
        )));
    }
    Ok(())
}

/// Objective values at one weight vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveStack {
    pub r1: DVector<f64>,
    pub r2: DVector<f64>,
    /// Per context chain: true where the last covariate is zero.
    pub zero_branch: Vec<bool>,
}

impl ObjectiveStack {
    /// `(R1; R2)` as one vector of length `2(d+1)`.
    pub fn stacked(&self) -> DVector<f64> {
        let d1 = self.r1.len();
        DVector::from_iterator(2 * d1, self.r1.iter().chain(self.r2.iter()).copied())
    }
}

pub fn objectives(w: &WeightVector, prompt: &Prompt) -> Result<ObjectiveStack> {
    check_w(w, prompt)?;
    let (x, _) = context(prompt.z());
    let d = prompt.d();
    Ok(ObjectiveStack {
        r1: r1_eval(w, prompt)?,
        r2: r2_eval(w, prompt)?,
        zero_branch: (0..prompt.n()).map(|j| x[(d - 1, j)] == 0.0).collect(),
    })
}

/// `R1(w) = (1/n) sum_j [-<w, x_j> x_j ; 0.5 (y_j - <w, x_j>)^2]`.
pub fn r1_eval(w: &WeightVector, prompt: &Prompt) -> Result<DVector<f64>> {
    check_w(w, prompt)?;
    let (x, y) = context(prompt.z());
    let n = prompt.n() as f64;
    let pred = x.transpose() * w;
    let top = -(&x * &pred) / n;
    let last = 0.5 * (y - pred).norm_squared() / n;
    Ok(DVector::from_iterator(
        w.len() + 1,
        top.iter().copied().chain([last]),
    ))
}

/// `R2(w)`: top block `(-w_d (y_j - <w_{:d-1}, x_{j,:d-1}>) + w_d^2 x_{j,d} / 2) x_j`,
/// last entry `(y_j - <w, x_j>)^3 / (3 x_{j,d})` when `x_{j,d} != 0` and
/// `-(y_j - <w_{:d-1}, x_{j,:d-1}>)^2 w_d` otherwise, averaged over `j`.
pub fn r2_eval(w: &WeightVector, prompt: &Prompt) -> Result<DVector<f64>> {
    check_w(w, prompt)?;
    let (x, y) = context(prompt.z());
    let d = w.len();
    let n = prompt.n();
    let wd = w[d - 1];
    let mut out = DVector::zeros(d + 1);
    for j in 0..n {
        let xj = x.column(j);
        let xd = xj[d - 1];
        let partial = y[j] - (0..d - 1).map(|i| w[i] * xj[i]).sum::<f64>();
        let coef = -wd * partial + 0.5 * wd * wd * xd;
        for k in 0..d {
            out[k] += coef * xj[k];
        }
        out[d] += if xd != 0.0 {
            let r = partial - wd * xd;
            r * r * r / (3.0 * xd)
        } else {
            -partial * partial * wd
        };
    }
    Ok(out / n as f64)
}

/// Jacobians of `R1` and `R2` with respect to `w`, each `(d+1) x d`.
pub fn jacobians(w: &WeightVector, prompt: &Prompt) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_w(w, prompt)?;
    let (x, y) = context(prompt.z());
    let d = w.len();
    let n = prompt.n() as f64;
    let mut g1 = DMatrix::zeros(d + 1, d);
    let mut g2 = DMatrix::zeros(d + 1, d);
    let wd = w[d - 1];
    for j in 0..prompt.n() {
        let xj = x.column(j);
        let xd = xj[d - 1];
        let r = y[j] - w.dot(&xj);
        let partial = y[j] - (0..d - 1).map(|i| w[i] * xj[i]).sum::<f64>();
        for k in 0..d {
            for i in 0..d {
                g1[(k, i)] -= xj[k] * xj[i];
                g2[(k, i)] += if i + 1 < d {
                    wd * xj[i] * xj[k]
                } else {
                    -r * xj[k]
                };
            }
        }
        for i in 0..d {
            g1[(d, i)] -= r * xj[i];
            g2[(d, i)] += if xd != 0.0 {
                -r * r * xj[i] / xd
            } else if i + 1 < d {
                2.0 * partial * xj[i] * wd
            } else {
                -partial * partial
            };
        }
    }
    Ok((g1 / n, g2 / n))
}

fn restricted_parts(layer: &LayerParams) -> Result<(&DVector<f64>, &DMatrix<f64>, &DVector<f64>)> {
    match layer {
        LayerParams::Restricted { b, a_bar, a } => Ok((b, a_bar, a)),
        _ => Err(invalid("restricted layer expected")),
    }
}

/// One preconditioned step.
pub fn precond_update(
    w: &WeightVector,
    layer: &LayerParams,
    prompt: &Prompt,
) -> Result<WeightVector> {
    let (b, a_bar, a) = restricted_parts(layer)?;
    let d = w.len();
    if layer.d() != d {
        return Err(shape(format!(
            "layer has d = {}, weight has length {d}",
            layer.d()
        )));
    }
    let (g1, g2) = jacobians(w, prompt)?;
    let mut last_row = DMatrix::zeros(d, d);
    last_row.row_mut(d - 1).copy_from(&a.transpose());
    let step = b.transpose() * (g1 * a_bar + g2 * last_row);
    Ok(w - step.transpose())
}

fn check_restricted(model: &LsaModel) -> Result<()> {
    if model.form() != ParamForm::Restricted {
        return Err(invalid("model must be in restricted form"));
    }
    Ok(())
}

/// `w_0 = 0, w_1, ..., w_L`.
pub fn weight_trajectory(model: &LsaModel, prompt: &Prompt) -> Result<Vec<WeightVector>> {
    check_restricted(model)?;
    let mut out = vec![DVector::zeros(model.d())];
    for layer in model.layers() {
        let next = precond_update(out.last().unwrap(), layer, prompt)?;
        out.push(next);
    }
    Ok(out)
}

/// The same recursion written directly in `theta` through the label-augmented
/// second-moment matrix. Used as an independent witness.
pub fn theta_trajectory(model: &LsaModel, prompt: &Prompt) -> Result<Vec<DVector<f64>>> {
    check_restricted(model)?;
    let (x, y) = context(prompt.z());
    let d = model.d();
    let n = prompt.n() as f64;
    let mut out = vec![DVector::zeros(d)];
    for layer in model.layers() {
        let (b, a_bar, a) = restricted_parts(layer)?;
        let theta = out.last().unwrap();
        let u = &y + x.transpose() * theta;
        let mut aug = DMatrix::zeros(d + 1, x.ncols());
        aug.view_mut((0, 0), (d, x.ncols())).copy_from(&x);
        aug.row_mut(d).copy_from(&u.transpose());
        let g = &aug * aug.transpose() / n;
        let mut stacked = DMatrix::zeros(d + 1, d);
        stacked.view_mut((0, 0), (d, d)).copy_from(a_bar);
        stacked.row_mut(d).copy_from(&a.transpose());
        let next = theta - (b.transpose() * g * stacked).transpose();
        out.push(next);
    }
    Ok(out)
}

/// Deviation between the forward trace and the weight recursion.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EquivalenceReport {
    /// `max_l |y^(l) - (y_0 - <w_l, x_query>)|`.
    pub weight_form: f64,
    /// `max_l |y^(l) - (y_0 + <theta_l, x_query>)|`.
    pub theta_form: f64,
}

impl EquivalenceReport {
    pub fn max_deviation(&self) -> f64 {
        self.weight_form.max(self.theta_form)
    }
}

/// Compare the forward trace with both recursions; `z0` may carry a nonzero
/// query label.
pub fn forward_equiv_check_z(
    model: &LsaModel,
    prompt: &Prompt,
    z0: &DMatrix<f64>,
) -> Result<EquivalenceReport> {
    let trace = model.forward_trace(z0)?;
    let ws = weight_trajectory(model, prompt)?;
    let thetas = theta_trajectory(model, prompt)?;
    let (d, n) = (model.d(), model.n());
    let xq = prompt.query_x();
    let y0 = z0[(d, n)];
    let mut rep = EquivalenceReport {
        weight_form: 0.0,
        theta_form: 0.0,
    };
    for (l, z) in trace.iter().enumerate() {
        let y = z[(d, n)];
        rep.weight_form = rep.weight_form.max((y - (y0 - ws[l].dot(&xq))).abs());
        rep.theta_form = rep.theta_form.max((y - (y0 + thetas[l].dot(&xq))).abs());
    }
    Ok(rep)
}

pub fn forward_equiv_check(model: &LsaModel, prompt: &Prompt) -> Result<EquivalenceReport> {
    forward_equiv_check_z(model, prompt, prompt.z())
}

/// `max_l |g(x, y, l) - g(x, 0, l) - y|` for a label `y` injected into the
/// query slot.
pub fn claim1_deviation(model: &LsaModel, prompt: &Prompt, y: f64) -> Result<f64> {
    let (d, n) = (model.d(), model.n());
    let with = model.forward_trace(&prompt.with_query_label(y))?;
    let without = model.forward_trace(&prompt.with_query_label(0.0))?;
    Ok(with
        .iter()
        .zip(&without)
        .map(|(a, b)| (a[(d, n)] - b[(d, n)] - y).abs())
        .fold(0.0, f64::max))
}

/// Superposition probe: the prediction at query `x` against
/// `sum_i x_i * prediction(e_i)`.
pub fn claim2_deviation(model: &LsaModel, prompt: &Prompt, x: &DVector<f64>) -> Result<f64> {
    let (d, n) = (model.d(), model.n());
    let at = |q: &DVector<f64>| {
        let mut z = prompt.with_query_label(0.0);
        z.view_mut((0, n), (d, 1)).copy_from(q);
        model.predict_z(&z)
    };
    let direct = at(x)?;
    let mut sum = 0.0;
    for i in 0..d {
        sum += x[i] * at(&DVector::from_fn(d, |k, _| f64::from(u8::from(k == i))))?;
    }
    Ok((direct - sum).abs())
}

/// Mean over `points` of the Euclidean distance to the nearest front member.
pub fn generational_distance(points: &[DVector<f64>], front: &[DVector<f64>]) -> Result<f64> {
    if front.is_empty() {
        return Err(invalid("empty front"));
    }
    if points.is_empty() {
        return Err(invalid("no points"));
    }
    let total: f64 = points
        .iter()
        .map(|p| {
            front
                .iter()
                .map(|f| (p - f).norm())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// `a` dominates `b`: no worse anywhere and better somewhere.
pub fn dominates(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b.iter()) {
        if x > y {
            return false;
        }
        strict |= x < y;
    }
    strict
}

/// Non-dominated subset, duplicates collapsed, in input order.
pub fn pareto_filter(points: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let Some(first) = points.first() else {
        return vec![];
    };
    let k = first.len();
    let flat: Vec<f64> = points.iter().flat_map(|p| p.iter().copied()).collect();
    let row = |i: usize| &flat[i * k..(i + 1) * k];
    // A dominator has a strictly smaller coordinate sum, so only earlier
    // entries in sum order need checking.
    let mut order: Vec<usize> = (0..points.len()).collect();
    let sums: Vec<f64> = points.iter().map(|p| p.sum()).collect();
    order.sort_by(|&a, &b| sums[a].total_cmp(&sums[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().flat_map(|&i| row(i).iter().copied()).collect();
    let keep: Vec<bool> = (0..order.len())
        .into_par_iter()
        .map(|pos| {
            let p = &sorted[pos * k..(pos + 1) * k];
            !sorted[..pos * k]
                .chunks_exact(k)
                .any(|q| q.iter().zip(p).all(|(a, b)| a <= b))
        })
        .collect();
    let mut kept: Vec<usize> = order
        .iter()
        .zip(&keep)
        .filter(|(_, &keep)| keep)
        .map(|(&i, _)| i)
        .collect();
    kept.sort_unstable();
    kept.into_iter().map(|i| points[i].clone()).collect()
}

/// Non-dominated `(R1; R2)` vectors over `samples` uniform draws of `w` in
/// `[-bound, bound]^d`.
pub fn pareto_front_approx(
    prompt: &Prompt,
    samples: usize,
    bound: f64,
    seed: u64,
) -> Result<Vec<DVector<f64>>> {
    if samples == 0 || !(bound.is_finite() && bound > 0.0) {
        return Err(invalid("need samples >= 1 and a positive finite bound"));
    }
    let d = prompt.d();
    let mut rng = substream(seed, domain::PARETO, 0);
    let ws: Vec<WeightVector> = (0..samples)
        .map(|_| DVector::from_fn(d, |_, _| rng.random_range(-bound..=bound)))
        .collect();
    let values: Vec<DVector<f64>> = ws
        .par_iter()
        .map(|w| objectives(w, prompt).map(|o| o.stacked()))
        .collect::<Result<_>>()?;
    Ok(pareto_filter(&values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov_data::PromptSampler;

    fn prompt(d: usize, n: usize, seed: u64) -> Prompt {
        PromptSampler::binary(0.5, d, n, seed).unwrap().prompt(0)
    }

    fn naive_r1(w: &DVector<f64>, p: &Prompt) -> DVector<f64> {
        let z = p.z();
        let (d, n) = (p.d(), p.n());
        let mut out = DVector::zeros(d + 1);
        for j in 0..n {
            let mut dot = 0.0;
            for i in 0..d {
                dot += w[i] * z[(i, j)];
            }
            for k in 0..d {
                out[k] -= dot * z[(k, j)] / n as f64;
            }
            out[d] += 0.5 * (z[(d, j)] - dot).powi(2) / n as f64;
        }
        out
    }

    #[test]
    fn r1_examples() {
        let p = prompt(3, 7, 1);
        let r = r1_eval(&DVector::zeros(3), &p).unwrap();
        assert!(r.rows(0, 3).iter().all(|v| *v == 0.0));
        let ys: f64 = (0..7).map(|j| p.z()[(3, j)].powi(2)).sum();
        assert!((r[3] - 0.5 * ys / 7.0).abs() < 1e-15);
        let single = Prompt::new(
            DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]),
            0.0,
            2,
        )
        .unwrap();
        let r = r1_eval(&DVector::from_vec(vec![1.0, 0.0]), &single).unwrap();
        assert_eq!(r[2], 0.0);
        let w = DVector::from_vec(vec![0.3, -1.2, 0.7]);
        assert!((r1_eval(&w, &p).unwrap() - naive_r1(&w, &p)).amax() < 1e-13);
    }

    #[test]
    fn r2_zero_weight_and_all_zero_branch() {
        let p = prompt(2, 9, 2);
        let r = r2_eval(&DVector::zeros(2), &p).unwrap();
        let z = p.z();
        let expected: f64 = (0..9)
            .filter(|&j| z[(1, j)] != 0.0)
            .map(|j| z[(2, j)].powi(3) / (3.0 * z[(1, j)]))
            .sum::<f64>()
            / 9.0;
        assert!(r.rows(0, 2).iter().all(|v| *v == 0.0));
        assert!((r[2] - expected).abs() < 1e-15);

        // Every chain ends its covariates in state 0.
        let chains: Vec<Vec<usize>> =
            vec![vec![1, 0, 1], vec![0, 0, 0], vec![1, 0, 0], vec![0, 0, 1]];
        let p = Prompt::from_chains(&chains, 2).unwrap();
        let w = DVector::from_vec(vec![0.4, -0.8]);
        let r = r2_eval(&w, &p).unwrap();
        let sq: f64 = (0..3)
            .map(|j| (p.z()[(2, j)] - 0.4 * p.z()[(0, j)]).powi(2))
            .sum::<f64>()
            / 3.0;
        assert!((r[2] - 0.8 * sq).abs() < 1e-15);
        assert!(objectives(&w, &p).unwrap().zero_branch.iter().all(|&b| b));
    }

    fn fd_check(w: &DVector<f64>, p: &Prompt) -> f64 {
        let (g1, g2) = jacobians(w, p).unwrap();
        let h = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..w.len() {
            let mut wp = w.clone();
            wp[i] += h;
            let mut wm = w.clone();
            wm[i] -= h;
            let f1 = (r1_eval(&wp, p).unwrap() - r1_eval(&wm, p).unwrap()) / (2.0 * h);
            let f2 = (r2_eval(&wp, p).unwrap() - r2_eval(&wm, p).unwrap()) / (2.0 * h);
            for k in 0..=w.len() {
                for (fd, an) in [(f1[k], g1[(k, i)]), (f2[k], g2[(k, i)])] {
                    worst = worst.max((fd - an).abs() / (1.0 + an.abs()));
                }
            }
        }
        worst
    }

    #[test]
    fn jacobians_match_finite_differences() {
        for seed in 0..20 {
            let d = 1 + (seed as usize % 4);
            let p = prompt(d, 5 + seed as usize, seed);
            let mut rng = substream(seed, domain::CASES, 0);
            let w = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
            assert!(fd_check(&w, &p) < 1e-6, "seed {seed}");
        }
    }

    #[test]
    fn squared_loss_row() {
        let p = prompt(3, 11, 4);
        let w = DVector::from_vec(vec![0.2, 0.5, -0.3]);
        let (g1, _) = jacobians(&w, &p).unwrap();
        let (x, y) = context(p.z());
        let expected = (&x * (x.transpose() * &w - y)) / 11.0;
        assert!((g1.row(3).transpose() - expected).amax() < 1e-14);
    }

    #[test]
    fn degenerate_updates_leave_w_unchanged() {
        let p = prompt(3, 6, 5);
        let w = DVector::from_vec(vec![0.1, -0.2, 0.3]);
        let mut rng = substream(9, domain::CASES, 0);
        let layer = LayerParams::Restricted {
            b: DVector::zeros(4),
            a_bar: DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0)),
            a: DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)),
        };
        assert_eq!(precond_update(&w, &layer, &p).unwrap(), w);
        let layer = LayerParams::Restricted {
            b: DVector::from_fn(4, |_, _| rng.random_range(-1.0..1.0)),
            a_bar: DMatrix::zeros(3, 3),
            a: DVector::zeros(3),
        };
        assert_eq!(precond_update(&w, &layer, &p).unwrap(), w);
    }

    #[test]
    fn forward_pass_equals_weight_recursion() {
        let p = prompt(1, 1, 0);
        let zero = LsaModel::zeros(ParamForm::Restricted, 1, 1, 1).unwrap();
        assert_eq!(forward_equiv_check(&zero, &p).unwrap().max_deviation(), 0.0);
        let model = LsaModel::random(ParamForm::Restricted, 4, 100, 10, 0.1, 3).unwrap();
        let sampler = PromptSampler::binary(0.5, 4, 100, 8).unwrap();
        for i in 0..50 {
            let p = sampler.prompt(i);
            assert!(forward_equiv_check(&model, &p).unwrap().max_deviation() <= 1e-9);
            assert!(claim1_deviation(&model, &p, 0.7).unwrap() <= 1e-12);
            let x = DVector::from_vec(vec![0.3, -1.0, 2.0, 0.5]);
            assert!(claim2_deviation(&model, &p, &x).unwrap() <= 1e-10);
        }
        let nonzero_query = p.with_query_label(1.5);
        let small = LsaModel::random(ParamForm::Restricted, 1, 1, 3, 0.1, 1).unwrap();
        assert!(
            forward_equiv_check_z(&small, &p, &nonzero_query)
                .unwrap()
                .max_deviation()
                <= 1e-12
        );
    }

    #[test]
    fn dense_models_are_rejected() {
        let p = prompt(2, 3, 0);
        let model = LsaModel::zeros(ParamForm::Dense, 2, 3, 1).unwrap();
        assert!(weight_trajectory(&model, &p).is_err());
    }

    #[test]
    fn generational_distance_examples() {
        let a = DVector::from_vec(vec![0.0, 0.0]);
        let b = DVector::from_vec(vec![1.0, 0.0]);
        assert_eq!(
            generational_distance(std::slice::from_ref(&a), std::slice::from_ref(&a)).unwrap(),
            0.0
        );
        assert_eq!(
            generational_distance(std::slice::from_ref(&b), std::slice::from_ref(&a)).unwrap(),
            1.0
        );
        assert!(generational_distance(&[a], &[]).is_err());
        let mut rng = substream(1, domain::CASES, 0);
        let pts: Vec<DVector<f64>> = (0..20)
            .map(|_| DVector::from_fn(3, |_, _| rng.random::<f64>()))
            .collect();
        let front: Vec<DVector<f64>> = (0..15)
            .map(|_| DVector::from_fn(3, |_, _| rng.random::<f64>()))
            .collect();
        let mut naive = 0.0;
        for p in &pts {
            let mut best = f64::INFINITY;
            for f in &front {
                let mut s = 0.0;
                for k in 0..3 {
                    s += (p[k] - f[k]).powi(2);
                }
                best = best.min(s.sqrt());
            }
            naive += best;
        }
        assert!((generational_distance(&pts, &front).unwrap() - naive / 20.0).abs() < 1e-12);
    }

    #[test]
    fn pareto_filter_properties() {
        let one = vec![DVector::from_vec(vec![1.0, 2.0])];
        assert_eq!(pareto_filter(&one), one);
        let pts = vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![2.0, 3.0]),
            DVector::from_vec(vec![0.0, 5.0]),
        ];
        assert_eq!(pareto_filter(&pts).len(), 2);
        let p = prompt(2, 10, 3);
        let front = pareto_front_approx(&p, 2000, 2.0, 1).unwrap();
        for a in &front {
            for b in &front {
                assert!(!dominates(a, b));
            }
        }
    }
}
