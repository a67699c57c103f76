//! Multi-layer linear self-attention.
//!
//! Each layer maps `Z -> Z + P G Q Z` with `G = (1/n) Z M Z^T` and
//! `M = diag(I_n, 0)`, so the query column never enters the attention
//! statistics. The prediction is the bottom-right entry of the last layer.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::markov_data::{Prompt, PromptSampler};
use crate::rng::{domain, substream};

/// Parameterization of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamForm {
    Dense,
    Sparse,
    Restricted,
}

impl ParamForm {
    pub fn name(self) -> &'static str {
        match self {
            ParamForm::Dense => "dense",
            ParamForm::Sparse => "sparse",
            ParamForm::Restricted => "restricted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(ParamForm::Dense),
            "sparse" => Ok(ParamForm::Sparse),
            "restricted" => Ok(ParamForm::Restricted),
            _ => Err(Error::Parse(format!("unknown parameter form '{s}'"))),
        }
    }
}

/// Parameters of one layer.
///
/// `Sparse` embeds as `P = [0; b^T]`, `Q = [A | 0]`. `Restricted` embeds as
/// `P = [0; b^T]`, `Q = -[[A_bar, 0]; [a^T, 0]]`.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerParams {
    Dense {
        p: DMatrix<f64>,
        q: DMatrix<f64>,
    },
    Sparse {
        b: DVector<f64>,
        a: DMatrix<f64>,
    },
    Restricted {
        b: DVector<f64>,
        a_bar: DMatrix<f64>,
        a: DVector<f64>,
    },
}

impl LayerParams {
    pub fn zeros(form: ParamForm, d: usize) -> Self {
        match form {
            ParamForm::Dense => LayerParams::Dense {
                p: DMatrix::zeros(d + 1, d + 1),
                q: DMatrix::zeros(d + 1, d + 1),
            },
            ParamForm::Sparse => LayerParams::Sparse {
                b: DVector::zeros(d + 1),
                a: DMatrix::zeros(d + 1, d),
            },
            ParamForm::Restricted => LayerParams::Restricted {
                b: DVector::zeros(d + 1),
                a_bar: DMatrix::zeros(d, d),
                a: DVector::zeros(d),
            },
        }
    }

    pub fn form(&self) -> ParamForm {
        match self {
            LayerParams::Dense { .. } => ParamForm::Dense,
            LayerParams::Sparse { .. } => ParamForm::Sparse,
            LayerParams::Restricted { .. } => ParamForm::Restricted,
        }
    }

    /// The covariate dimension `d`.
    pub fn d(&self) -> usize {
        match self {
            LayerParams::Dense { p, .. } => p.nrows() - 1,
            LayerParams::Sparse { b, .. } | LayerParams::Restricted { b, .. } => b.len() - 1,
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match self {
            LayerParams::Dense { p, q } => {
                p.nrows() >= 2 && p.is_square() && q.shape() == p.shape()
            }
            LayerParams::Sparse { b, a } => b.len() >= 2 && a.shape() == (b.len(), b.len() - 1),
            LayerParams::Restricted { b, a_bar, a } => {
                let d = b.len().saturating_sub(1);
                d >= 1 && a_bar.shape() == (d, d) && a.len() == d
            }
        };
        if ok {
            Ok(())
        } else {
            Err(shape(format!(
                "inconsistent {} layer blocks",
                self.form().name()
            )))
        }
    }

    /// `(b, A)` of the sparse embedding; `None` for dense layers.
    pub fn sparse_parts(&self) -> Option<(DVector<f64>, DMatrix<f64>)> {
        match self {
            LayerParams::Dense { .. } => None,
            LayerParams::Sparse { b, a } => Some((b.clone(), a.clone())),
            LayerParams::Restricted { b, a_bar, a } => {
                Some((b.clone(), restricted_to_sparse_a(a_bar, a)))
            }
        }
    }

    /// Full `(P, Q)`.
    pub fn embed(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        match self {
            LayerParams::Dense { p, q } => (p.clone(), q.clone()),
            _ => {
                let (b, a) = self.sparse_parts().expect("non-dense layer");
                let k = b.len();
                let mut p = DMatrix::zeros(k, k);
                p.row_mut(k - 1).copy_from(&b.transpose());
                let mut q = DMatrix::zeros(k, k);
                q.view_mut((0, 0), (k, k - 1)).copy_from(&a);
                (p, q)
            }
        }
    }

    /// Read the entries of `form` out of a dense `(P, Q)` pair.
    pub fn extract(form: ParamForm, p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<Self> {
        if !p.is_square() || p.shape() != q.shape() || p.nrows() < 2 {
            return Err(shape("P and Q must be equal-sized square matrices"));
        }
        let k = p.nrows();
        let d = k - 1;
        Ok(match form {
            ParamForm::Dense => LayerParams::Dense {
                p: p.clone(),
                q: q.clone(),
            },
            ParamForm::Sparse => LayerParams::Sparse {
                b: p.row(d).transpose(),
                a: q.columns(0, d).into_owned(),
            },
            ParamForm::Restricted => LayerParams::Restricted {
                b: p.row(d).transpose(),
                a_bar: -q.view((0, 0), (d, d)),
                a: DVector::from_iterator(d, (0..d).map(|j| -q[(d, j)])),
            },
        })
    }

    /// Map a dense `(dP, dQ)` gradient onto this layer's free entries.
    pub fn project_gradient(form: ParamForm, dp: &DMatrix<f64>, dq: &DMatrix<f64>) -> Self {
        Self::extract(form, dp, dq).expect("gradient blocks share the layer shape")
    }

    pub fn num_params(&self) -> usize {
        let d = self.d();
        match self {
            LayerParams::Dense { .. } => 2 * (d + 1) * (d + 1),
            LayerParams::Sparse { .. } => (d + 1) + (d + 1) * d,
            LayerParams::Restricted { .. } => (d + 1) + d * d + d,
        }
    }

    /// Free entries, blocks concatenated, each block column-major.
    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            LayerParams::Dense { p, q } => p.iter().chain(q.iter()).copied().collect(),
            LayerParams::Sparse { b, a } => b.iter().chain(a.iter()).copied().collect(),
            LayerParams::Restricted { b, a_bar, a } => b
                .iter()
                .chain(a_bar.iter())
                .chain(a.iter())
                .copied()
                .collect(),
        }
    }

    /// Inverse of [`LayerParams::to_vec`].
    pub fn from_slice(form: ParamForm, d: usize, v: &[f64]) -> Result<Self> {
        let mut layer = Self::zeros(form, d);
        if v.len() != layer.num_params() {
            return Err(shape(format!(
                "expected {} parameters, got {}",
                layer.num_params(),
                v.len()
            )));
        }
        layer
            .values_mut()
            .into_iter()
            .zip(v)
            .for_each(|(dst, &src)| *dst = src);
        Ok(layer)
    }

    fn values_mut(&mut self) -> Vec<&mut f64> {
        match self {
            LayerParams::Dense { p, q } => p.iter_mut().chain(q.iter_mut()).collect(),
            LayerParams::Sparse { b, a } => b.iter_mut().chain(a.iter_mut()).collect(),
            LayerParams::Restricted { b, a_bar, a } => b
                .iter_mut()
                .chain(a_bar.iter_mut())
                .chain(a.iter_mut())
                .collect(),
        }
    }

    /// Named blocks for serialization.
    fn blocks(&self) -> Vec<(&'static str, DMatrix<f64>)> {
        match self {
            LayerParams::Dense { p, q } => vec![("P", p.clone()), ("Q", q.clone())],
            LayerParams::Sparse { b, a } => vec![("b", row_matrix(b)), ("A", a.clone())],
            LayerParams::Restricted { b, a_bar, a } => {
                vec![
                    ("b", row_matrix(b)),
                    ("A_bar", a_bar.clone()),
                    ("a", row_matrix(a)),
                ]
            }
        }
    }
}

fn row_matrix(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_row_slice(1, v.len(), v.as_slice())
}

/// Sparse `A = -[A_bar; a^T]` of a restricted layer.
pub fn restricted_to_sparse_a(a_bar: &DMatrix<f64>, a: &DVector<f64>) -> DMatrix<f64> {
    let d = a.len();
    let mut out = DMatrix::zeros(d + 1, d);
    out.view_mut((0, 0), (d, d)).copy_from(&(-a_bar));
    out.row_mut(d).copy_from(&(-a.transpose()));
    out
}

/// `(1/n) Z M Z^T`.
pub fn attention_gram(z: &DMatrix<f64>) -> DMatrix<f64> {
    let n = z.ncols() - 1;
    let ctx = z.columns(0, n);
    (ctx * ctx.transpose()) / n as f64
}

/// One layer: `Z + P G Q Z`.
pub fn forward_layer(z: &DMatrix<f64>, layer: &LayerParams) -> Result<DMatrix<f64>> {
    layer.check()?;
    let k = layer.d() + 1;
    if z.nrows() != k || z.ncols() < 2 {
        return Err(shape(format!(
            "embedding is {}x{}, layer expects {} rows and n >= 1",
            z.nrows(),
            z.ncols(),
            k
        )));
    }
    let g = attention_gram(z);
    Ok(apply_layer(z, &g, layer))
}

fn apply_layer(z: &DMatrix<f64>, g: &DMatrix<f64>, layer: &LayerParams) -> DMatrix<f64> {
    let k = z.nrows();
    match layer.sparse_parts() {
        Some((b, a)) => {
            // Only the last row moves: b^T G A X with X the covariate rows.
            let coeff = (b.transpose() * g) * &a;
            let update = coeff * z.rows(0, k - 1);
            let mut out = z.clone();
            let mut last = out.row_mut(k - 1);
            last += update;
            out
        }
        None => {
            let (p, q) = layer.embed();
            z + &p * (g * (&q * z))
        }
    }
}

/// A stack of layers over fixed `d` and `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct LsaModel {
    d: usize,
    n: usize,
    layers: Vec<LayerParams>,
}

impl LsaModel {
    pub fn new(d: usize, n: usize, layers: Vec<LayerParams>) -> Result<Self> {
        if layers.is_empty() {
            return Err(invalid("a model needs at least one layer"));
        }
        if n == 0 {
            return Err(invalid("n must be at least 1"));
        }
        for l in &layers {
            l.check()?;
            if l.d() != d {
                return Err(shape(format!("layer has d = {}, model has d = {d}", l.d())));
            }
        }
        Ok(Self { d, n, layers })
    }

    pub fn zeros(form: ParamForm, d: usize, n: usize, num_layers: usize) -> Result<Self> {
        Self::new(d, n, vec![LayerParams::zeros(form, d); num_layers])
    }

    /// Every free entry drawn from `U(-scale, scale)`.
    pub fn random(
        form: ParamForm,
        d: usize,
        n: usize,
        num_layers: usize,
        scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = substream(seed, domain::INIT, 0);
        let mut layers = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            let mut l = LayerParams::zeros(form, d);
            for v in l.values_mut() {
                *v = rng.random_range(-scale..=scale);
            }
            layers.push(l);
        }
        Self::new(d, n, layers)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn form(&self) -> ParamForm {
        self.layers[0].form()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(LayerParams::num_params).sum()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.layers.iter().flat_map(LayerParams::to_vec).collect()
    }

    /// Replace all parameters from a flat vector laid out as [`LsaModel::to_vec`].
    pub fn set_from_slice(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(shape(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                v.len()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            let k = l.num_params();
            *l = LayerParams::from_slice(l.form(), self.d, &v[off..off + k])?;
            off += k;
        }
        Ok(())
    }

    fn check_prompt(&self, z: &DMatrix<f64>) -> Result<()> {
        if z.shape() != (self.d + 1, self.n + 1) {
            return Err(shape(format!(
                "prompt is {}x{}, model expects {}x{}",
                z.nrows(),
                z.ncols(),
                self.d + 1,
                self.n + 1
            )));
        }
        Ok(())
    }

    /// `Z_0, Z_1, ..., Z_L`.
    pub fn forward_trace(&self, z0: &DMatrix<f64>) -> Result<Vec<DMatrix<f64>>> {
        self.check_prompt(z0)?;
        let mut out = Vec::with_capacity(self.layers.len() + 1);
        out.push(z0.clone());
        for l in &self.layers {
            let z = out.last().unwrap();
            let g = attention_gram(z);
            let next = apply_layer(z, &g, l);
            if next.iter().any(|v| !v.is_finite()) {
                return Err(Error::NumericalOverflow("forward pass".into()));
            }
            out.push(next);
        }
        Ok(out)
    }

    /// Bottom-right entry of `Z_L` for an arbitrary input matrix.
    pub fn predict_z(&self, z0: &DMatrix<f64>) -> Result<f64> {
        let trace = self.forward_trace(z0)?;
        Ok(trace[self.layers.len()][(self.d, self.n)])
    }

    pub fn predict(&self, prompt: &Prompt) -> Result<f64> {
        self.predict_z(prompt.z())
    }

    /// Mean squared error over the batch.
    pub fn loss(&self, prompts: &[Prompt]) -> Result<f64> {
        Ok(self.loss_and_grad_impl(&prepare_refs(prompts), false)?.0)
    }

    /// Loss and its exact gradient, shaped like the layers.
    pub fn loss_and_grad(&self, prompts: &[Prompt]) -> Result<(f64, Vec<LayerParams>)> {
        let (loss, g) = self.loss_and_grad_impl(&prepare_refs(prompts), true)?;
        Ok((loss, g.expect("gradient requested")))
    }

    pub fn grad(&self, prompts: &[Prompt]) -> Result<Vec<LayerParams>> {
        Ok(self.loss_and_grad(prompts)?.1)
    }

    fn loss_and_grad_impl(
        &self,
        batch: &[PromptRef<'_>],
        want_grad: bool,
    ) -> Result<(f64, Option<Vec<LayerParams>>)> {
        if batch.is_empty() {
            return Err(invalid("empty batch"));
        }
        for p in batch {
            self.check_prompt(p.prompt.z())?;
        }
        let dense: Vec<(DMatrix<f64>, DMatrix<f64>)> =
            self.layers.iter().map(LayerParams::embed).collect();
        let scale = 2.0 / batch.len() as f64;
        const CHUNK: usize = 32;
        let parts: Vec<Result<(f64, Option<DenseGrads>)>> = batch
            .par_chunks(CHUNK)
            .map(|chunk| {
                let mut sse = 0.0;
                let mut acc: Option<DenseGrads> = None;
                for p in chunk {
                    let (err, grads) = self.prompt_backprop(&dense, p, want_grad, scale)?;
                    sse += err * err;
                    if let Some(gs) = grads {
                        match acc.as_mut() {
                            None => acc = Some(gs),
                            Some(a) => {
                                for ((ap, aq), (gp, gq)) in a.iter_mut().zip(gs) {
                                    *ap += gp;
                                    *aq += gq;
                                }
                            }
                        }
                    }
                }
                Ok((sse, acc))
            })
            .collect();
        let mut sse = 0.0;
        let mut total: Option<DenseGrads> = None;
        for part in parts {
            let (s, g) = part?;
            sse += s;
            if let Some(gs) = g {
                match total.as_mut() {
                    None => total = Some(gs),
                    Some(t) => {
                        for ((tp, tq), (gp, gq)) in t.iter_mut().zip(gs) {
                            *tp += gp;
                            *tq += gq;
                        }
                    }
                }
            }
        }
        let loss = sse / batch.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NumericalOverflow("loss".into()));
        }
        let grads = total.map(|t| {
            t.iter()
                .zip(&self.layers)
                .map(|((dp, dq), l)| LayerParams::project_gradient(l.form(), dp, dq))
                .collect()
        });
        Ok((loss, grads))
    }

    /// Residual `y_hat - y` and, optionally, dense per-layer gradients of
    /// `scale/2 * residual^2`.
    fn prompt_backprop(
        &self,
        dense: &[(DMatrix<f64>, DMatrix<f64>)],
        p: &PromptRef<'_>,
        want_grad: bool,
        scale: f64,
    ) -> Result<(f64, Option<DenseGrads>)> {
        let (d, n) = (self.d, self.n);
        let num = self.layers.len();
        // Inputs and attention grams of every layer; the last layer is only
        // evaluated on the query column.
        let mut zs: Vec<DMatrix<f64>> = Vec::with_capacity(num);
        let mut gs: Vec<DMatrix<f64>> = Vec::with_capacity(num);
        zs.push(p.prompt.z().clone());
        gs.push(match p.gram {
            Some(g) => g.clone(),
            None => attention_gram(&zs[0]),
        });
        for l in 0..num - 1 {
            let next = apply_layer(&zs[l], &gs[l], &self.layers[l]);
            gs.push(attention_gram(&next));
            zs.push(next);
        }
        let last = num - 1;
        let (pl, ql) = &dense[last];
        let zq = zs[last].column(n).into_owned();
        let wq = ql * &zq;
        let kq = &gs[last] * &wq;
        let pred = zq[d] + pl.row(d).dot(&kq.transpose());
        if !pred.is_finite() {
            return Err(Error::NumericalOverflow("forward pass".into()));
        }
        let err = pred - p.prompt.label();
        if !want_grad {
            return Ok((err, None));
        }

        let mut grads = vec![(DMatrix::zeros(d + 1, d + 1), DMatrix::zeros(d + 1, d + 1)); num];
        // Last layer, upstream gradient supported on the query column.
        let mut dq_col = DVector::zeros(d + 1);
        dq_col[d] = scale * err;
        let dk = pl.transpose() * &dq_col;
        let dw = &gs[last] * &dk;
        grads[last].0 = &dq_col * kq.transpose();
        grads[last].1 = &dw * zq.transpose();
        if num == 1 {
            return Ok((err, Some(grads)));
        }
        let dg = &dk * wq.transpose();
        let mut dz = DMatrix::zeros(d + 1, n + 1);
        dz.column_mut(n).copy_from(&(dq_col + ql.transpose() * &dw));
        add_gram_backprop(&mut dz, &dg, &zs[last], n);

        for l in (0..last).rev() {
            let (pm, qm) = &dense[l];
            let z = &zs[l];
            let g = &gs[l];
            let w = qm * z;
            let k = g * &w;
            let dkm = pm.transpose() * &dz;
            let dwm = g * &dkm;
            grads[l].0 = &dz * k.transpose();
            grads[l].1 = &dwm * z.transpose();
            if l == 0 {
                break;
            }
            let dgm = &dkm * w.transpose();
            let mut dz_prev = &dz + qm.transpose() * &dwm;
            add_gram_backprop(&mut dz_prev, &dgm, z, n);
            dz = dz_prev;
        }
        Ok((err, Some(grads)))
    }
}

/// `dZ[:, :n] += (1/n) (dG + dG^T) Z[:, :n]`.
fn add_gram_backprop(dz: &mut DMatrix<f64>, dg: &DMatrix<f64>, z: &DMatrix<f64>, n: usize) {
    let sym = (dg + dg.transpose()) / n as f64;
    let contrib = sym * z.columns(0, n);
    let mut cols = dz.columns_mut(0, n);
    cols += contrib;
}

/// Per-layer `(dP, dQ)` in the dense embedding.
type DenseGrads = Vec<(DMatrix<f64>, DMatrix<f64>)>;

struct PromptRef<'a> {
    prompt: &'a Prompt,
    gram: Option<&'a DMatrix<f64>>,
}

fn prepare_refs(prompts: &[Prompt]) -> Vec<PromptRef<'_>> {
    prompts
        .iter()
        .map(|prompt| PromptRef { prompt, gram: None })
        .collect()
}

/// A fixed training set with cached first-layer attention grams.
#[derive(Clone, Debug)]
pub struct FixedBatch {
    prompts: Vec<Prompt>,
    grams: Vec<DMatrix<f64>>,
}

impl FixedBatch {
    pub fn new(prompts: Vec<Prompt>) -> Self {
        let grams = prompts.par_iter().map(|p| attention_gram(p.z())).collect();
        Self { prompts, grams }
    }

    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }

    fn refs(&self) -> Vec<PromptRef<'_>> {
        self.prompts
            .iter()
            .zip(&self.grams)
            .map(|(prompt, g)| PromptRef {
                prompt,
                gram: Some(g),
            })
            .collect()
    }
}

/// Where training batches come from.
#[derive(Clone, Debug)]
pub enum TrainData {
    /// Iteration `t` uses prompts `t*B .. (t+1)*B` of the sampler.
    Stream(PromptSampler),
    /// Every iteration uses the full fixed batch.
    Fixed(FixedBatch),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Optimizer {
    Gd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Prompts per iteration for streaming data; ignored for fixed batches.
    pub batch_size: usize,
    pub seed: u64,
    pub parameter_form: ParamForm,
    /// Training aborts once the batch loss exceeds this value.
    pub divergence_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::adam(),
            learning_rate: 0.01,
            iterations: 1000,
            batch_size: 256,
            seed: 0,
            parameter_form: ParamForm::Sparse,
            divergence_threshold: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(invalid(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.iterations == 0 {
            return Err(invalid("iterations must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch size must be at least 1"));
        }
        Ok(())
    }
}

/// Optimize `model` in place and return the per-iteration loss, measured
/// before each update.
pub fn train(model: &mut LsaModel, data: &TrainData, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.form() != cfg.parameter_form {
        return Err(invalid(format!(
            "model uses {} layers but the config asks for {}",
            model.form().name(),
            cfg.parameter_form.name()
        )));
    }
    let mut theta = model.to_vec();
    let mut m = vec![0.0; theta.len()];
    let mut v = vec![0.0; theta.len()];
    let mut trace = Vec::with_capacity(cfg.iterations);
    for t in 0..cfg.iterations {
        let (loss, grads) = match data {
            TrainData::Fixed(fb) => model.loss_and_grad_impl(&fb.refs(), true)?,
            TrainData::Stream(s) => {
                let batch = s.batch((t * cfg.batch_size) as u64, cfg.batch_size);
                model.loss_and_grad_impl(&prepare_refs(&batch), true)?
            }
        };
        if !(loss <= cfg.divergence_threshold) {
            return Err(Error::Diverged { iteration: t, loss });
        }
        trace.push(loss);
        let g: Vec<f64> = grads
            .expect("gradient requested")
            .iter()
            .flat_map(LayerParams::to_vec)
            .collect();
        match cfg.optimizer {
            Optimizer::Gd => {
                for (th, gi) in theta.iter_mut().zip(&g) {
                    *th -= cfg.learning_rate * gi;
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let step = (t + 1) as i32;
                let c1 = 1.0 - beta1.powi(step);
                let c2 = 1.0 - beta2.powi(step);
                for i in 0..theta.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    theta[i] -= cfg.learning_rate * mh / (vh.sqrt() + eps);
                }
            }
        }
        model.set_from_slice(&theta)?;
    }
    Ok(trace)
}

/// Nearest state to `x` among `0..states`, ties toward the smaller state.
pub fn round_to_state(x: f64, states: usize) -> f64 {
    let r = (x - 0.5).ceil();
    r.clamp(0.0, (states - 1) as f64)
}

/// Fraction of prompts whose rounded prediction equals the label.
pub fn accuracy_of(predictions: &[f64], prompts: &[Prompt]) -> f64 {
    if prompts.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(prompts)
        .filter(|(y, p)| round_to_state(**y, p.states()) == p.label())
        .count();
    hits as f64 / prompts.len() as f64
}

impl LsaModel {
    pub fn predictions(&self, prompts: &[Prompt]) -> Result<Vec<f64>> {
        prompts.par_iter().map(|p| self.predict(p)).collect()
    }

    pub fn accuracy(&self, prompts: &[Prompt]) -> Result<f64> {
        Ok(accuracy_of(&self.predictions(prompts)?, prompts))
    }
}

/// Write a checkpoint: a header line, then one `layer` line per layer followed
/// by its blocks as `block <name> <rows> <cols>` and row-major values.
pub fn write_checkpoint<W: Write>(mut w: W, model: &LsaModel) -> Result<()> {
    writeln!(
        w,
        "lsa-checkpoint v1 L={} d={} n={} form={}",
        model.num_layers(),
        model.d,
        model.n,
        model.form().name()
    )?;
    for (i, l) in model.layers.iter().enumerate() {
        writeln!(w, "layer {i} {}", l.form().name())?;
        for (name, m) in l.blocks() {
            writeln!(w, "block {name} {} {}", m.nrows(), m.ncols())?;
            for row in m.row_iter() {
                let vals: Vec<String> = row.iter().map(f64::to_string).collect();
                writeln!(w, "{}", vals.join(" "))?;
            }
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(r: R) -> Result<LsaModel> {
    let lines: Vec<String> = r.lines().collect::<std::io::Result<_>>()?;
    let mut it = lines.iter().map(|s| s.trim()).filter(|s| !s.is_empty());
    let header = it
        .next()
        .ok_or_else(|| Error::Parse("empty checkpoint".into()))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("lsa-checkpoint") || fields.next() != Some("v1") {
        return Err(Error::Parse("not a v1 checkpoint".into()));
    }
    let mut kv = std::collections::HashMap::new();
    for f in fields {
        let (k, v) = f
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("bad header field '{f}'")))?;
        kv.insert(k, v);
    }
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::Parse(format!("header lacks {k}")))
    };
    let parse_usize = |s: &str| s.parse::<usize>().map_err(|e| Error::Parse(e.to_string()));
    let num_layers = parse_usize(get("L")?)?;
    let d = parse_usize(get("d")?)?;
    let n = parse_usize(get("n")?)?;
    let mut layers = Vec::with_capacity(num_layers);
    for _ in 0..num_layers {
        let head = it
            .next()
            .ok_or_else(|| Error::Parse("missing layer".into()))?;
        let form_name = head
            .strip_prefix("layer ")
            .and_then(|s| s.split_whitespace().nth(1))
            .ok_or_else(|| Error::Parse(format!("bad layer line '{head}'")))?;
        let form = ParamForm::parse(form_name)?;
        let nblocks = LayerParams::zeros(form, d).blocks().len();
        let mut values = Vec::new();
        for _ in 0..nblocks {
            let bh = it
                .next()
                .ok_or_else(|| Error::Parse("missing block".into()))?;
            let parts: Vec<&str> = bh.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "block" {
                return Err(Error::Parse(format!("bad block line '{bh}'")));
            }
            let (rows, cols) = (parse_usize(parts[2])?, parse_usize(parts[3])?);
            let mut m = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                let line = it
                    .next()
                    .ok_or_else(|| Error::Parse("truncated block".into()))?;
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                    .collect::<Result<_>>()?;
                if vals.len() != cols {
                    return Err(Error::Parse(format!(
                        "row has {} values, expected {cols}",
                        vals.len()
                    )));
                }
                for (c, v) in vals.into_iter().enumerate() {
                    m[(r, c)] = v;
                }
            }
            values.extend(m.iter().copied());
        }
        layers.push(LayerParams::from_slice(form, d, &values)?);
    }
    LsaModel::new(d, n, layers)
}

/// Loss trace as CSV `(iteration, loss)`.
pub fn write_loss_trace<W: Write>(mut w: W, trace: &[f64]) -> Result<()> {
    writeln!(w, "iteration,loss")?;
    for (i, l) in trace.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::markov_data::PromptSampler;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = substream(seed, 99, 0);
        DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// `Z + (1/n) P Z M (Z^T Q Z)` evaluated literally.
    fn literal_layer(z: &DMatrix<f64>, p: &DMatrix<f64>, q: &DMatrix<f64>) -> DMatrix<f64> {
        let n = z.ncols() - 1;
        let mut m = DMatrix::identity(n + 1, n + 1);
        m[(n, n)] = 0.0;
        z + (p * z * m * (z.transpose() * q * z)) / n as f64
    }

    #[test]
    fn zero_blocks_are_identity() {
        let z = random_matrix(4, 6, 1);
        let q = random_matrix(4, 4, 2);
        let layer = LayerParams::Dense {
            p: DMatrix::zeros(4, 4),
            q: q.clone(),
        };
        assert_eq!(forward_layer(&z, &layer).unwrap(), z);
        let layer = LayerParams::Dense {
            p: q,
            q: DMatrix::zeros(4, 4),
        };
        assert_eq!(forward_layer(&z, &layer).unwrap(), z);
    }

    #[test]
    fn forms_agree_with_literal_formula() {
        for seed in 0..20 {
            let d = 1 + (seed as usize % 5);
            let z = random_matrix(d + 1, 7, seed);
            for form in [ParamForm::Dense, ParamForm::Sparse, ParamForm::Restricted] {
                let m = LsaModel::random(form, d, 6, 1, 1.0, seed).unwrap();
                let layer = &m.layers()[0];
                let (p, q) = layer.embed();
                let fast = forward_layer(&z, layer).unwrap();
                let dense = forward_layer(
                    &z,
                    &LayerParams::Dense {
                        p: p.clone(),
                        q: q.clone(),
                    },
                )
                .unwrap();
                let lit = literal_layer(&z, &p, &q);
                assert!((&fast - &dense).abs().max() < 1e-13);
                assert!((&fast - &lit).abs().max() < 1e-13);
                assert_eq!(LayerParams::extract(form, &p, &q).unwrap(), *layer);
                if form != ParamForm::Dense {
                    assert_eq!(fast.rows(0, d), z.rows(0, d));
                }
            }
        }
    }

    #[test]
    fn one_layer_sparse_matches_bilinear_form() {
        let s = PromptSampler::binary(0.5, 1, 8, 3).unwrap();
        let prompt = s.prompt(0);
        let b = DVector::from_vec(vec![0.3, -1.2]);
        let a = DMatrix::from_column_slice(2, 1, &[0.7, 0.4]);
        let m = LsaModel::new(
            1,
            8,
            vec![LayerParams::Sparse {
                b: b.clone(),
                a: a.clone(),
            }],
        )
        .unwrap();
        let g = crate::markov_data::gram_matrix(&prompt);
        let expected = (b.transpose() * g * a)[(0, 0)] * prompt.query_x()[0];
        assert!((m.predict(&prompt).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn zero_model_predicts_zero() {
        let s = PromptSampler::binary(0.5, 3, 5, 3).unwrap();
        let prompts = s.batch(0, 10);
        let m = LsaModel::zeros(ParamForm::Dense, 3, 5, 2).unwrap();
        for p in &prompts {
            assert_eq!(m.predict(p).unwrap(), 0.0);
        }
        let ones: Vec<Prompt> = prompts
            .iter()
            .map(|p| Prompt::new(p.z().clone(), 1.0, 2).unwrap())
            .collect();
        assert_eq!(m.loss(&ones).unwrap(), 1.0);
        for l in m.grad(&prompts).unwrap() {
            assert!(l.to_vec().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn loss_matches_naive_sum() {
        let s = PromptSampler::binary(0.3, 2, 6, 5).unwrap();
        let prompts = s.batch(0, 100);
        let m = LsaModel::random(ParamForm::Dense, 2, 6, 2, 0.5, 1).unwrap();
        let naive: f64 = prompts
            .iter()
            .map(|p| (m.predict(p).unwrap() - p.label()).powi(2))
            .sum::<f64>()
            / 100.0;
        assert!((m.loss(&prompts).unwrap() - naive).abs() < 1e-12);
    }

    fn fd_check(form: ParamForm, d: usize, layers: usize, seed: u64) {
        let n = 6;
        let s = PromptSampler::binary(0.5, d, n, seed).unwrap();
        let prompts = s.batch(0, 8);
        let m = LsaModel::random(form, d, n, layers, 0.5, seed).unwrap();
        let g: Vec<f64> = m
            .grad(&prompts)
            .unwrap()
            .iter()
            .flat_map(LayerParams::to_vec)
            .collect();
        let theta = m.to_vec();
        let h = 1e-5;
        let mut num = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let mut plus = m.clone();
            let mut minus = m.clone();
            let mut t = theta.clone();
            t[i] += h;
            plus.set_from_slice(&t).unwrap();
            t[i] -= 2.0 * h;
            minus.set_from_slice(&t).unwrap();
            num.push((plus.loss(&prompts).unwrap() - minus.loss(&prompts).unwrap()) / (2.0 * h));
        }
        let diff: f64 = g
            .iter()
            .zip(&num)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = num.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(
            diff / norm.max(1e-12) < 1e-5,
            "{form:?} d={d} L={layers}: rel err {}",
            diff / norm
        );
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(ParamForm::Sparse, 1, 1, 1);
        fd_check(ParamForm::Dense, 4, 3, 2);
        fd_check(ParamForm::Sparse, 4, 3, 3);
        fd_check(ParamForm::Restricted, 3, 4, 4);
        fd_check(ParamForm::Dense, 2, 1, 5);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters_and_runs_are_deterministic() {
        let s = PromptSampler::binary(0.5, 2, 5, 9).unwrap();
        let m0 = LsaModel::random(ParamForm::Sparse, 2, 5, 2, 0.1, 3).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            iterations: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let mut m = m0.clone();
        train(&mut m, &TrainData::Stream(s.clone()), &cfg).unwrap();
        assert_eq!(m, m0);
        let cfg = TrainConfig {
            iterations: 20,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let (mut a, mut b) = (m0.clone(), m0.clone());
        let ta = train(&mut a, &TrainData::Stream(s.clone()), &cfg).unwrap();
        let tb = train(&mut b, &TrainData::Stream(s), &cfg).unwrap();
        assert_eq!(ta, tb);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_to_state(0.5, 2), 0.0);
        assert_eq!(round_to_state(0.500001, 2), 1.0);
        assert_eq!(round_to_state(1.5, 3), 1.0);
        assert_eq!(round_to_state(-3.0, 3), 0.0);
        assert_eq!(round_to_state(7.0, 3), 2.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        for form in [ParamForm::Dense, ParamForm::Sparse, ParamForm::Restricted] {
            let m = LsaModel::random(form, 3, 9, 2, 1.0, 8).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&mut buf, &m).unwrap();
            let back = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back, m);
        }
    }

    #[test]
    fn rejects_mismatched_prompt() {
        let m = LsaModel::zeros(ParamForm::Sparse, 2, 5, 1).unwrap();
        let p = PromptSampler::binary(0.5, 2, 6, 1).unwrap().prompt(0);
        assert!(m.predict(&p).is_err());
        let z = random_matrix(3, 5, 1);
        assert!(forward_layer(&z, &LayerParams::zeros(ParamForm::Dense, 3)).is_err());
    }
}
