//! Reverse-mode differentiation over 2-D `f64` arrays.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the tape in reverse. Feature maps are stored as `(N, H*W*C)` rows in
//! HWC order so convolutions reduce to an im2col matrix product.
//!
//! Losses are fused ops with hand-written adjoints; all of them are checked
//! against central finite differences in the tests below.

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of an HWC feature map.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MapGeom {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl MapGeom {
    pub fn square(side: usize, channels: usize) -> Self {
        MapGeom { height: side, width: side, channels }
    }

    pub fn len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: MapGeom,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn output(&self) -> MapGeom {
        MapGeom {
            height: (self.input.height + 2 * self.pad - self.kernel) / self.stride + 1,
            width: (self.input.width + 2 * self.pad - self.kernel) / self.stride + 1,
            channels: self.out_channels,
        }
    }

    /// Rows of the weight matrix: `kernel * kernel * in_channels`.
    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.input.channels
    }
}

/// How normalization statistics are grouped.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormKind {
    /// Per sample, channels split into `groups` contiguous groups.
    Group { channels: usize, groups: usize },
    /// Per channel across the whole batch.
    Batch { channels: usize },
}

impl NormKind {
    fn group_count(&self, rows: usize) -> usize {
        match *self {
            NormKind::Group { groups, .. } => rows * groups,
            NormKind::Batch { channels } => channels,
        }
    }

    #[inline]
    fn group_of(&self, row: usize, col: usize) -> usize {
        match *self {
            NormKind::Group { channels, groups } => row * groups + (col % channels) / (channels / groups),
            NormKind::Batch { channels } => col % channels,
        }
    }
}

pub const NORM_EPS: f64 = 1e-5;
pub const COSINE_EPS: f64 = 1e-12;

enum Op {
    Input,
    Param(usize),
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Conv2d { input: Var, weight: Var, geom: ConvGeom, cols: Array2<f64> },
    AvgPool2 { input: Var, geom: MapGeom },
    GlobalAvgPool { input: Var, geom: MapGeom },
    Normalize { input: Var, kind: NormKind, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
    ChannelAffine { input: Var, gamma: Var, beta: Var, channels: usize },
    SelectRows { input: Var, rows: Vec<usize> },
    L2NormalizeRows { input: Var, norms: Vec<f64> },
    NegCosineSum { a: Var, b: Var },
    MaskedCrossEntropy { logits: Var, labels: Vec<usize>, mask: Vec<bool>, probs: Array2<f64> },
    SupCon { z: Var, dsim: Array2<f64>, tau: f64 },
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// The tape of one forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn scalar(v: f64) -> Array2<f64> {
    Array2::from_elem((1, 1), v)
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Trainable parameter identified by its index in a parameter store.
    pub fn param(&mut self, id: usize, value: &Array2<f64>) -> Var {
        self.push(value.clone(), Op::Param(id), true)
    }

    /// Free leaf that receives a gradient (used by tests and probes).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Stop-gradient: a constant copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.input(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(Error::Shape(format!("matmul {:?} x {:?}", va.dim(), vb.dim())));
        }
        let out = va.dot(vb);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `x + 1 b` with `b` a single row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(b));
        if vb.nrows() != 1 || vb.ncols() != vx.ncols() {
            return Err(Error::Shape(format!("bias {:?} for input {:?}", vb.dim(), vx.dim())));
        }
        let out = vx + &vb.row(0);
        let ng = self.needs(x) || self.needs(b);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::Shape(format!("add {:?} + {:?}", va.dim(), vb.dim())));
        }
        let out = va + vb;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x) * factor;
        let ng = self.needs(x);
        self.push(out, Op::Scale(x, factor), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(|v| v.max(0.0));
        let ng = self.needs(x);
        self.push(out, Op::Relu(x), ng)
    }

    /// Convolution of `(N, H*W*Cin)` maps with a `(k*k*Cin, Cout)` weight.
    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        let vx = self.value(input);
        if vx.ncols() != geom.input.len() {
            return Err(Error::Shape(format!(
                "conv input has {} columns, geometry expects {}",
                vx.ncols(),
                geom.input.len()
            )));
        }
        if self.value(weight).dim() != (geom.patch_len(), geom.out_channels) {
            return Err(Error::Shape(format!("conv weight {:?}", self.value(weight).dim())));
        }
        let cols = im2col(vx.view(), &geom);
        let prod = cols.dot(self.value(weight));
        let out_geom = geom.output();
        let n = vx.nrows();
        let out = prod
            .into_shape_with_order((n, out_geom.len()))
            .map_err(|e| Error::Shape(e.to_string()))?;
        let ng = self.needs(input) || self.needs(weight);
        Ok(self.push(out, Op::Conv2d { input, weight, geom, cols }, ng))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, input: Var, geom: MapGeom) -> Result<Var> {
        let vx = self.value(input);
        if vx.ncols() != geom.len() || !geom.height.is_multiple_of(2) || !geom.width.is_multiple_of(2) {
            return Err(Error::Shape(format!("avg_pool2 on {geom:?}")));
        }
        let (oh, ow, c) = (geom.height / 2, geom.width / 2, geom.channels);
        let mut out = Array2::zeros((vx.nrows(), oh * ow * c));
        for (mut orow, xrow) in out.rows_mut().into_iter().zip(vx.rows()) {
            for y in 0..oh {
                for x in 0..ow {
                    for ch in 0..c {
                        let at = |yy: usize, xx: usize| xrow[(yy * geom.width + xx) * c + ch];
                        orow[(y * ow + x) * c + ch] = 0.25
                            * (at(2 * y, 2 * x) + at(2 * y + 1, 2 * x) + at(2 * y, 2 * x + 1) + at(2 * y + 1, 2 * x + 1));
                    }
                }
            }
        }
        let ng = self.needs(input);
        Ok(self.push(out, Op::AvgPool2 { input, geom }, ng))
    }

    /// Mean over spatial positions: `(N, H*W*C) -> (N, C)`.
    pub fn global_avg_pool(&mut self, input: Var, geom: MapGeom) -> Result<Var> {
        let vx = self.value(input);
        if vx.ncols() != geom.len() {
            return Err(Error::Shape(format!("global pool on {geom:?}")));
        }
        let positions = geom.height * geom.width;
        let c = geom.channels;
        let mut out = Array2::zeros((vx.nrows(), c));
        for (mut orow, xrow) in out.rows_mut().into_iter().zip(vx.rows()) {
            for (i, v) in xrow.iter().enumerate() {
                orow[i % c] += v;
            }
            orow.mapv_inplace(|v| v / positions as f64);
        }
        let ng = self.needs(input);
        Ok(self.push(out, Op::GlobalAvgPool { input, geom }, ng))
    }

    /// Standardization with statistics grouped per `kind` (no affine part).
    pub fn normalize(&mut self, input: Var, kind: NormKind) -> Result<Var> {
        let vx = self.value(input);
        let channels = match kind {
            NormKind::Group { channels, groups } => {
                if groups == 0 || channels % groups != 0 {
                    return Err(Error::Shape(format!("{channels} channels into {groups} groups")));
                }
                channels
            }
            NormKind::Batch { channels } => channels,
        };
        if channels == 0 || !vx.ncols().is_multiple_of(channels) {
            return Err(Error::Shape(format!("{} columns for {channels} channels", vx.ncols())));
        }
        let groups = kind.group_count(vx.nrows());
        let mut sum = vec![0.0; groups];
        let mut count = vec![0usize; groups];
        for (r, row) in vx.rows().into_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let g = kind.group_of(r, c);
                sum[g] += v;
                count[g] += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; groups];
        for (r, row) in vx.rows().into_iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                let g = kind.group_of(r, c);
                sq[g] += (v - mean[g]).powi(2);
            }
        }
        let var: Vec<f64> = sq.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
        let mut out = vx.clone();
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                let g = kind.group_of(r, c);
                *v = (*v - mean[g]) * inv_std[g];
            }
        }
        let ng = self.needs(input);
        Ok(self.push(out, Op::Normalize { input, kind, inv_std, mean, var }, ng))
    }

    /// Batch statistics `(mean, biased variance)` recorded by a normalize node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Normalize { mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    /// Per-channel `x * gamma + beta` with `gamma`, `beta` of shape `(1, C)`.
    pub fn channel_affine(&mut self, input: Var, gamma: Var, beta: Var, channels: usize) -> Result<Var> {
        let (vx, vg, vb) = (self.value(input), self.value(gamma), self.value(beta));
        if vg.dim() != (1, channels) || vb.dim() != (1, channels) || vx.ncols() % channels != 0 {
            return Err(Error::Shape(format!("channel affine over {channels} channels")));
        }
        let mut out = vx.clone();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                let ch = c % channels;
                *v = *v * vg[[0, ch]] + vb[[0, ch]];
            }
        }
        let ng = self.needs(input) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(out, Op::ChannelAffine { input, gamma, beta, channels }, ng))
    }

    pub fn select_rows(&mut self, input: Var, rows: &[usize]) -> Result<Var> {
        let vx = self.value(input);
        if let Some(&bad) = rows.iter().find(|&&r| r >= vx.nrows()) {
            return Err(Error::Shape(format!("row {bad} of {}", vx.nrows())));
        }
        let out = vx.select(Axis(0), rows);
        let ng = self.needs(input);
        Ok(self.push(out, Op::SelectRows { input, rows: rows.to_vec() }, ng))
    }

    pub fn l2_normalize_rows(&mut self, input: Var) -> Var {
        let vx = self.value(input);
        let norms: Vec<f64> = vx.rows().into_iter().map(|r| r.dot(&r).sqrt().max(COSINE_EPS)).collect();
        let mut out = vx.clone();
        for (mut row, n) in out.rows_mut().into_iter().zip(&norms) {
            row.mapv_inplace(|v| v / n);
        }
        let ng = self.needs(input);
        self.push(out, Op::L2NormalizeRows { input, norms }, ng)
    }

    /// `-sum_r cos(a_r, b_r)`; both norms are floored at [`COSINE_EPS`].
    pub fn neg_cosine_sum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.dim() != vb.dim() {
            return Err(Error::Shape(format!("cosine {:?} vs {:?}", va.dim(), vb.dim())));
        }
        let total: f64 = va
            .rows()
            .into_iter()
            .zip(vb.rows())
            .map(|(ra, rb)| cosine_rows(ra.as_slice().unwrap_or(&ra.to_vec()), rb.as_slice().unwrap_or(&rb.to_vec())))
            .sum();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(scalar(-total), Op::NegCosineSum { a, b }, ng))
    }

    /// `sum_r mask_r * -log softmax(logits_r)[labels_r]` with 0-based labels.
    pub fn masked_cross_entropy(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let vl = self.value(logits);
        let (n, width) = vl.dim();
        if labels.len() != n || mask.len() != n {
            return Err(Error::Shape(format!("{n} logit rows, {} labels, {} mask", labels.len(), mask.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= width) {
            return Err(Error::LabelOutOfRange { label: bad + 1, width });
        }
        let mut probs = Array2::zeros((n, width));
        let mut total = 0.0;
        for (r, (row, mut prow)) in vl.rows().into_iter().zip(probs.rows_mut()).enumerate() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let denom: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + denom.ln();
            for (p, &v) in prow.iter_mut().zip(row.iter()) {
                *p = (v - lse).exp();
            }
            if mask[r] {
                total += lse - row[labels[r]];
            }
        }
        let ng = self.needs(logits);
        Ok(self.push(
            scalar(total),
            Op::MaskedCrossEntropy { logits, labels: labels.to_vec(), mask: mask.to_vec(), probs },
            ng,
        ))
    }

    /// Supervised contrastive loss over rows of `z` (expected unit-norm),
    /// averaged over anchors that have at least one positive.
    pub fn supcon(&mut self, z: Var, labels: &[usize], tau: f64) -> Result<Var> {
        let vz = self.value(z);
        let n = vz.nrows();
        if labels.len() != n {
            return Err(Error::Shape(format!("{n} rows, {} labels", labels.len())));
        }
        let sim = vz.dot(&vz.t()) / tau;
        let anchors: Vec<usize> = (0..n)
            .filter(|&i| (0..n).any(|j| j != i && labels[j] == labels[i]))
            .collect();
        if anchors.is_empty() {
            return Err(Error::Degenerate("no positive pair in the batch".into()));
        }
        let inv_anchors = 1.0 / anchors.len() as f64;
        let mut dsim = Array2::zeros((n, n));
        let mut total = 0.0;
        for &i in &anchors {
            let row = sim.row(i);
            let max = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
            let lse = max + denom.ln();
            let positives: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            let inv_pos = 1.0 / positives.len() as f64;
            total -= inv_anchors * inv_pos * positives.iter().map(|&p| row[p] - lse).sum::<f64>();
            for j in (0..n).filter(|&j| j != i) {
                dsim[[i, j]] += inv_anchors * (row[j] - lse).exp();
            }
            for &p in &positives {
                dsim[[i, p]] -= inv_anchors * inv_pos;
            }
        }
        let ng = self.needs(z);
        Ok(self.push(scalar(total), Op::SupCon { z, dsim, tau }, ng))
    }

    /// Gradients of the scalar node `output` with respect to every node.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Array2::ones(self.value(output).dim()));
        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, value: &Array2<f64>, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        match *op {
            Op::Input | Op::Param(_) | Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.dot(&self.value(b).t()));
                }
                if self.needs(b) {
                    self.accumulate(grads, b, self.value(a).t().dot(g));
                }
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, x, g.clone());
                if self.needs(b) {
                    self.accumulate(grads, b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Scale(x, f) => self.accumulate(grads, x, g * f),
            Op::Relu(x) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(value).for_each(|d, &v| {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, x, d);
            }
            Op::Conv2d { input, weight, geom, ref cols } => {
                let n = self.value(input).nrows();
                let out_geom = geom.output();
                let dprod = g
                    .view()
                    .into_shape_with_order((n * out_geom.height * out_geom.width, geom.out_channels))
                    .expect("conv gradient layout");
                if self.needs(weight) {
                    self.accumulate(grads, weight, cols.t().dot(&dprod));
                }
                if self.needs(input) {
                    let dcols = dprod.dot(&self.value(weight).t());
                    self.accumulate(grads, input, col2im(dcols.view(), n, &geom));
                }
            }
            Op::AvgPool2 { input, geom } => {
                let (ow, c) = (geom.width / 2, geom.channels);
                let mut d = Array2::zeros((g.nrows(), geom.len()));
                for (mut drow, grow) in d.rows_mut().into_iter().zip(g.rows()) {
                    for y in 0..geom.height {
                        for x in 0..geom.width {
                            for ch in 0..c {
                                drow[(y * geom.width + x) * c + ch] = 0.25 * grow[((y / 2) * ow + x / 2) * c + ch];
                            }
                        }
                    }
                }
                self.accumulate(grads, input, d);
            }
            Op::GlobalAvgPool { input, geom } => {
                let positions = (geom.height * geom.width) as f64;
                let c = geom.channels;
                let mut d = Array2::zeros((g.nrows(), geom.len()));
                for (mut drow, grow) in d.rows_mut().into_iter().zip(g.rows()) {
                    for (i, v) in drow.iter_mut().enumerate() {
                        *v = grow[i % c] / positions;
                    }
                }
                self.accumulate(grads, input, d);
            }
            Op::Normalize { input, kind, ref inv_std, .. } => {
                let rows = value.nrows();
                let groups = kind.group_count(rows);
                let mut mean_g = vec![0.0; groups];
                let mut mean_gx = vec![0.0; groups];
                let mut count = vec![0usize; groups];
                for (r, (grow, xrow)) in g.rows().into_iter().zip(value.rows()).enumerate() {
                    for (c, (dy, xh)) in grow.iter().zip(xrow.iter()).enumerate() {
                        let k = kind.group_of(r, c);
                        mean_g[k] += dy;
                        mean_gx[k] += dy * xh;
                        count[k] += 1;
                    }
                }
                for k in 0..groups {
                    mean_g[k] /= count[k] as f64;
                    mean_gx[k] /= count[k] as f64;
                }
                let mut d = g.clone();
                for (r, (mut drow, xrow)) in d.rows_mut().into_iter().zip(value.rows()).enumerate() {
                    for (c, (dv, xh)) in drow.iter_mut().zip(xrow.iter()).enumerate() {
                        let k = kind.group_of(r, c);
                        *dv = inv_std[k] * (*dv - mean_g[k] - xh * mean_gx[k]);
                    }
                }
                self.accumulate(grads, input, d);
            }
            Op::ChannelAffine { input, gamma, beta, channels } => {
                let vx = self.value(input);
                let vg = self.value(gamma);
                if self.needs(input) {
                    let mut d = g.clone();
                    for mut row in d.rows_mut() {
                        for (c, v) in row.iter_mut().enumerate() {
                            *v *= vg[[0, c % channels]];
                        }
                    }
                    self.accumulate(grads, input, d);
                }
                if self.needs(gamma) || self.needs(beta) {
                    let mut dg = Array2::zeros((1, channels));
                    let mut db = Array2::zeros((1, channels));
                    for (grow, xrow) in g.rows().into_iter().zip(vx.rows()) {
                        for (c, (dy, x)) in grow.iter().zip(xrow.iter()).enumerate() {
                            dg[[0, c % channels]] += dy * x;
                            db[[0, c % channels]] += dy;
                        }
                    }
                    self.accumulate(grads, gamma, dg);
                    self.accumulate(grads, beta, db);
                }
            }
            Op::SelectRows { input, ref rows } => {
                let mut d = Array2::zeros(self.value(input).dim());
                for (grow, &r) in g.rows().into_iter().zip(rows) {
                    let mut target = d.row_mut(r);
                    target += &grow;
                }
                self.accumulate(grads, input, d);
            }
            Op::L2NormalizeRows { input, ref norms } => {
                let mut d = g.clone();
                for ((mut drow, yrow), n) in d.rows_mut().into_iter().zip(value.rows()).zip(norms) {
                    let proj = drow.dot(&yrow);
                    Zip::from(&mut drow).and(&yrow).for_each(|dv, &y| *dv = (*dv - y * proj) / n);
                }
                self.accumulate(grads, input, d);
            }
            Op::NegCosineSum { a, b } => {
                let scale = g[[0, 0]];
                let (va, vb) = (self.value(a), self.value(b));
                let mut da = Array2::zeros(va.dim());
                let mut db = Array2::zeros(vb.dim());
                for r in 0..va.nrows() {
                    let (ra, rb) = (va.row(r), vb.row(r));
                    let na = ra.dot(&ra).sqrt().max(COSINE_EPS);
                    let nb = rb.dot(&rb).sqrt().max(COSINE_EPS);
                    let cos = ra.dot(&rb) / (na * nb);
                    for c in 0..va.ncols() {
                        da[[r, c]] = -scale * (rb[c] / (na * nb) - cos * ra[c] / (na * na));
                        db[[r, c]] = -scale * (ra[c] / (na * nb) - cos * rb[c] / (nb * nb));
                    }
                }
                self.accumulate(grads, a, da);
                self.accumulate(grads, b, db);
            }
            Op::MaskedCrossEntropy { logits, ref labels, ref mask, ref probs } => {
                let scale = g[[0, 0]];
                let mut d = probs.clone();
                for (r, mut row) in d.rows_mut().into_iter().enumerate() {
                    if mask[r] {
                        row[labels[r]] -= 1.0;
                        row.mapv_inplace(|v| v * scale);
                    } else {
                        row.fill(0.0);
                    }
                }
                self.accumulate(grads, logits, d);
            }
            Op::SupCon { z, ref dsim, tau } => {
                let scale = g[[0, 0]];
                let sym = dsim + &dsim.t();
                let d = sym.dot(self.value(z)) * (scale / tau);
                self.accumulate(grads, z, d);
            }
        }
    }

    /// Parameter nodes of the tape with their store ids.
    pub fn params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => Some((id, Var(i))),
            _ => None,
        })
    }
}

fn cosine_rows(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt().max(COSINE_EPS);
    dot / (na * nb)
}

/// Per-node gradients of one backward pass.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for each parameter id (summed over repeated uses).
    pub fn param_grads(&self, graph: &Graph, param_count: usize) -> Vec<Option<Array2<f64>>> {
        let mut out: Vec<Option<Array2<f64>>> = (0..param_count).map(|_| None).collect();
        for (id, var) in graph.params() {
            if let Some(g) = self.wrt(var) {
                match &mut out[id] {
                    Some(acc) => *acc += g,
                    slot => *slot = Some(g.clone()),
                }
            }
        }
        out
    }
}

fn im2col(x: ArrayView2<f64>, geom: &ConvGeom) -> Array2<f64> {
    let n = x.nrows();
    let out = geom.output();
    let (h, w, c) = (geom.input.height as isize, geom.input.width as isize, geom.input.channels);
    let k = geom.kernel;
    let patch = geom.patch_len();
    let mut cols = Array2::zeros((n * out.height * out.width, patch));
    let xs = x.as_standard_layout();
    let flat = xs.as_slice().expect("standard layout");
    let row_len = geom.input.len();
    let cols_slice = cols.as_slice_mut().expect("fresh array");
    for b in 0..n {
        let img = &flat[b * row_len..(b + 1) * row_len];
        for oy in 0..out.height {
            for ox in 0..out.width {
                let row = (b * out.height + oy) * out.width + ox;
                let dst = &mut cols_slice[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let src = ((iy * w + ix) as usize) * c;
                        let off = (ky * k + kx) * c;
                        dst[off..off + c].copy_from_slice(&img[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(dcols: ArrayView2<f64>, n: usize, geom: &ConvGeom) -> Array2<f64> {
    let out = geom.output();
    let (h, w, c) = (geom.input.height as isize, geom.input.width as isize, geom.input.channels);
    let k = geom.kernel;
    let patch = geom.patch_len();
    let row_len = geom.input.len();
    let mut dx = Array2::zeros((n, row_len));
    let dcols = dcols.as_standard_layout();
    let src_all = dcols.as_slice().expect("standard layout");
    let dst_all = dx.as_slice_mut().expect("fresh array");
    for b in 0..n {
        let img = &mut dst_all[b * row_len..(b + 1) * row_len];
        for oy in 0..out.height {
            for ox in 0..out.width {
                let row = (b * out.height + oy) * out.width + ox;
                let src = &src_all[row * patch..(row + 1) * patch];
                for ky in 0..k {
                    let iy = (oy * geom.stride + ky) as isize - geom.pad as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * geom.stride + kx) as isize - geom.pad as isize;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        let dst = ((iy * w + ix) as usize) * c;
                        let off = (ky * k + kx) * c;
                        for ch in 0..c {
                            img[dst + ch] += src[off + ch];
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Slice of `rows` consecutive rows, used by callers that batch evaluation.
pub fn row_block(m: &Array2<f64>, start: usize, len: usize) -> Array2<f64> {
    m.slice(s![start..start + len, ..]).to_owned()
}
