//! Dense-tensor engine with reverse-mode differentiation.
//!
//! Tensors live in a `Graph` (a tape): every operation appends a node that
//! records its inputs and enough context to replay its adjoint. `backward`
//! walks the tape in reverse, computes adjoints in a scratch table, and
//! accumulates (+=) the results into the `grad` buffer of every tensor with
//! `requires_grad` — so running backward twice without a grad reset doubles
//! every gradient exactly.
//!
//! All data is 32-bit; scalar reductions additionally carry a 64-bit copy of
//! their value (`value64`) so loss reporting and finite differences are not
//! limited by f32 resolution.

pub mod conv;

use crate::error::{Error, Result};
use crate::rng::RngStream;
use conv::ConvOp;

pub type TensorId = usize;

/// One node of the tape: a dense row-major array, its gradient buffer, and
/// the operation that produced it.
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
    pub requires_grad: bool,
    /// 64-bit value for scalar reduction results, if tracked.
    val64: Option<f64>,
    op: Op,
}

enum Op {
    Leaf,
    Relu { x: TensorId },
    Add { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Conv2d(Box<ConvOp>),
    AvgPool { x: TensorId, bh: usize, bw: usize },
    Upsample { x: TensorId },
    Concat { xs: Vec<TensorId> },
    Dropout { x: TensorId, mask: Vec<f32> },
    Scale { x: TensorId, c: f32 },
    CeMap { logits: TensorId, labels: Vec<u8>, probs: Vec<f32> },
    WeightedSum { x: TensorId, w: Vec<f32> },
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// The tape. Parameter leaves occupy a stable prefix; `truncate` drops the
/// activation suffix between optimizer steps.
pub struct Graph {
    nodes: Vec<Tensor>,
    /// When set, `relu` applies these fixed 0/1 masks (consumed in call
    /// order) instead of thresholding, so the graph computes the smooth
    /// carrier of a captured activation pattern. Used by gradient checks.
    relu_override: Option<Vec<Vec<f32>>>,
    relu_cursor: usize,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), relu_override: None, relu_cursor: 0 }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node with id >= `n`. Used to clear activations while
    /// keeping parameter leaves alive across steps.
    pub fn truncate(&mut self, n: usize) {
        self.nodes.truncate(n);
        self.relu_cursor = 0;
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id].data.len()
    }

    pub fn data(&self, id: TensorId) -> &[f32] {
        &self.nodes[id].data
    }

    pub fn data_mut(&mut self, id: TensorId) -> &mut [f32] {
        &mut self.nodes[id].data
    }

    pub fn grad(&self, id: TensorId) -> &[f32] {
        &self.nodes[id].grad
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id].requires_grad
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.nodes[id].grad.fill(0.0);
    }

    /// Mutable data alongside the read-only gradient of the same node.
    pub fn data_and_grad_mut(&mut self, id: TensorId) -> (&mut [f32], &[f32]) {
        let n = &mut self.nodes[id];
        (&mut n.data, &n.grad)
    }

    /// Scalar value at 64-bit precision when tracked, else the f32 value.
    pub fn value64(&self, id: TensorId) -> f64 {
        let n = &self.nodes[id];
        n.val64.unwrap_or(n.data[0] as f64)
    }

    /// 0/1 activation masks of every relu in node order, captured from the
    /// current forward pass. Installing them via [`Graph::set_relu_override`]
    /// makes subsequent forwards compute the smooth function that carries
    /// this activation pattern; it agrees with the real network at the
    /// capture point, value and gradient alike.
    pub fn relu_masks(&self) -> Vec<Vec<f32>> {
        let mut masks = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { x } = &node.op {
                masks.push(
                    self.nodes[*x]
                        .data
                        .iter()
                        .map(|&v| if v > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                );
            }
        }
        masks
    }

    /// Install or clear fixed relu masks; see [`Graph::relu_masks`]. Masks
    /// are consumed in relu call order, restarting at every `truncate`.
    pub fn set_relu_override(&mut self, masks: Option<Vec<Vec<f32>>>) {
        self.relu_override = masks;
        self.relu_cursor = 0;
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
        val64: Option<f64>,
        op: Op,
    ) -> TensorId {
        debug_assert_eq!(numel_of(&shape), data.len());
        let grad = vec![0.0; data.len()];
        self.nodes.push(Tensor { shape, data, grad, requires_grad, val64, op });
        self.nodes.len() - 1
    }

    pub fn leaf(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f32>,
        requires_grad: bool,
    ) -> Result<TensorId> {
        if numel_of(&shape) != data.len() {
            return Err(Error::Shape(format!(
                "leaf: shape {:?} wants {} elements, data has {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("leaf: zero extent in shape {shape:?}")));
        }
        Ok(self.push(shape, data, requires_grad, None, Op::Leaf))
    }

    /// Elementwise max(0, x); under an active pattern override, the next
    /// captured mask is applied instead (forward and backward alike).
    pub fn relu(&mut self, x: TensorId) -> TensorId {
        if self.relu_override.is_some() {
            let k = self.relu_cursor;
            self.relu_cursor += 1;
            let mask = self.relu_override.as_ref().unwrap()[k].clone();
            let xd = &self.nodes[x];
            assert_eq!(mask.len(), xd.data.len(), "relu pattern override shape mismatch");
            // select rather than multiply: v * 0.0 would turn negative
            // inputs into -0.0 where thresholding produces +0.0
            let data: Vec<f32> =
                xd.data.iter().zip(&mask).map(|(&v, &m)| if m != 0.0 { v } else { 0.0 }).collect();
            let shape = xd.shape.clone();
            let rg = xd.requires_grad;
            return self.push(shape, data, rg, None, Op::Dropout { x, mask });
        }
        let xd = &self.nodes[x];
        let data: Vec<f32> = xd.data.iter().map(|&v| v.max(0.0)).collect();
        let shape = xd.shape.clone();
        let rg = xd.requires_grad;
        self.push(shape, data, rg, None, Op::Relu { x })
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape(format!(
                "add: shape mismatch {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        let data: Vec<f32> =
            na.data.iter().zip(nb.data.iter()).map(|(&x, &y)| x + y).collect();
        let val64 = match (na.val64, nb.val64) {
            (Some(x), Some(y)) if data.len() == 1 => Some(x + y),
            _ => None,
        };
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, data, rg, val64, Op::Add { a, b }))
    }

    /// Elementwise product of two same-shape tensors.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape(format!(
                "mul: shape mismatch {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let (na, nb) = (&self.nodes[a], &self.nodes[b]);
        let data: Vec<f32> =
            na.data.iter().zip(nb.data.iter()).map(|(&x, &y)| x * y).collect();
        let shape = na.shape.clone();
        let rg = na.requires_grad || nb.requires_grad;
        Ok(self.push(shape, data, rg, None, Op::Mul { a, b }))
    }

    /// Multiply every element by a constant.
    pub fn scale(&mut self, x: TensorId, c: f32) -> TensorId {
        let nx = &self.nodes[x];
        let data: Vec<f32> = nx.data.iter().map(|&v| v * c).collect();
        let val64 = nx.val64.map(|v| v * c as f64);
        let shape = nx.shape.clone();
        let rg = nx.requires_grad;
        self.push(shape, data, rg, val64, Op::Scale { x, c })
    }

    /// Adaptive average pooling of a [N,C,H,W] tensor to a (bh, bw) grid.
    /// Output cell (i,j) averages input rows [floor(i*H/bh), floor((i+1)*H/bh))
    /// and the analogous columns.
    pub fn avg_pool(&mut self, x: TensorId, bh: usize, bw: usize) -> Result<TensorId> {
        let sh = self.nodes[x].shape.clone();
        let [n, c, h, w] = rank4(&sh, "adaptive_avg_pool2d")?;
        if bh == 0 || bw == 0 || bh > h || bw > w {
            return Err(Error::Shape(format!(
                "adaptive_avg_pool2d: bins ({bh},{bw}) invalid for input ({h},{w})"
            )));
        }
        let mut data = vec![0.0f32; n * c * bh * bw];
        let xd = &self.nodes[x].data;
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                let out_plane = (ni * c + ci) * bh * bw;
                for i in 0..bh {
                    let (r0, r1) = (i * h / bh, (i + 1) * h / bh);
                    for j in 0..bw {
                        let (c0, c1) = (j * w / bw, (j + 1) * w / bw);
                        let mut s = 0.0f64;
                        for r in r0..r1 {
                            for cc in c0..c1 {
                                s += xd[plane + r * w + cc] as f64;
                            }
                        }
                        let area = ((r1 - r0) * (c1 - c0)) as f64;
                        data[out_plane + i * bw + j] = (s / area) as f32;
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(vec![n, c, bh, bw], data, rg, None, Op::AvgPool { x, bh, bw }))
    }

    /// Corner-aligned bilinear upsampling of a [N,C,h,w] tensor to (th, tw).
    /// Source coordinate for output index i is i*(h-1)/(th-1); 1-extent
    /// inputs replicate. Interpolation uses the lerp form a + t*(b-a) so a
    /// constant field upsamples exactly.
    pub fn upsample_bilinear(&mut self, x: TensorId, th: usize, tw: usize) -> Result<TensorId> {
        let sh = self.nodes[x].shape.clone();
        let [n, c, h, w] = rank4(&sh, "upsample_bilinear")?;
        if th < h || tw < w {
            return Err(Error::Shape(format!(
                "upsample_bilinear: target ({th},{tw}) smaller than input ({h},{w})"
            )));
        }
        let ys = axis_taps(h, th);
        let xs = axis_taps(w, tw);
        let mut data = vec![0.0f32; n * c * th * tw];
        let xd = &self.nodes[x].data;
        for ni in 0..n {
            for ci in 0..c {
                let plane = (ni * c + ci) * h * w;
                let out_plane = (ni * c + ci) * th * tw;
                for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
                    let row0 = plane + y0 * w;
                    let row1 = plane + y1 * w;
                    let out_row = out_plane + i * tw;
                    for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                        let a = xd[row0 + x0];
                        let b = xd[row0 + x1];
                        let cv = xd[row1 + x0];
                        let d = xd[row1 + x1];
                        let top = a + tx * (b - a);
                        let bot = cv + tx * (d - cv);
                        data[out_row + j] = top + ty * (bot - top);
                    }
                }
            }
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(vec![n, c, th, tw], data, rg, None, Op::Upsample { x }))
    }

    /// Channel-axis concatenation of [N,Ci,H,W] tensors in argument order.
    pub fn concat_channels(&mut self, xs: &[TensorId]) -> Result<TensorId> {
        if xs.is_empty() {
            return Err(Error::Shape("concat_channels: empty input list".into()));
        }
        let first = rank4(&self.nodes[xs[0]].shape.clone(), "concat_channels")?;
        let [n, _, h, w] = first;
        let mut c_total = 0usize;
        for &x in xs {
            let [ni, ci, hi, wi] = rank4(&self.nodes[x].shape.clone(), "concat_channels")?;
            if ni != n || hi != h || wi != w {
                return Err(Error::Shape(format!(
                    "concat_channels: input shape [{ni},{ci},{hi},{wi}] disagrees with [{n},_,{h},{w}]"
                )));
            }
            c_total += ci;
        }
        let hw = h * w;
        let mut data = vec![0.0f32; n * c_total * hw];
        let mut rg = false;
        for ni in 0..n {
            let mut off = 0usize;
            for &x in xs {
                let nx = &self.nodes[x];
                let ci = nx.shape[1];
                let src = ni * ci * hw;
                let dst = (ni * c_total + off) * hw;
                data[dst..dst + ci * hw].copy_from_slice(&nx.data[src..src + ci * hw]);
                off += ci;
                rg |= nx.requires_grad;
            }
        }
        Ok(self.push(vec![n, c_total, h, w], data, rg, None, Op::Concat { xs: xs.to_vec() }))
    }

    /// Inverted dropout: in training each element is zeroed with probability
    /// `rate` and survivors are scaled by 1/(1-rate); in evaluation (or at
    /// rate 0) the input id is returned unchanged.
    pub fn dropout(
        &mut self,
        x: TensorId,
        rate: f32,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let scale = 1.0 / (1.0 - rate);
        let len = self.nodes[x].data.len();
        let mask: Vec<f32> =
            (0..len).map(|_| if rng.uniform() < rate { 0.0 } else { scale }).collect();
        let nx = &self.nodes[x];
        let data: Vec<f32> =
            nx.data.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
        let shape = nx.shape.clone();
        let rg = nx.requires_grad;
        Ok(self.push(shape, data, rg, None, Op::Dropout { x, mask }))
    }

    /// Per-voxel cross-entropy map. `logits` is [N,K,H,W]; `labels` holds
    /// N*H*W class indices < K. Output is the [N,H,W] map of
    /// -log softmax(logits)[label], computed stably via log-sum-exp.
    pub fn cross_entropy_map(&mut self, logits: TensorId, labels: &[u8]) -> Result<TensorId> {
        let sh = self.nodes[logits].shape.clone();
        let [n, k, h, w] = rank4(&sh, "cross_entropy_map")?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::Shape(format!(
                "cross_entropy_map: {} labels for {} voxels",
                labels.len(),
                n * hw
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= k) {
            return Err(Error::Shape(format!(
                "cross_entropy_map: label {bad} out of range for {k} classes"
            )));
        }
        let ld = &self.nodes[logits].data;
        let mut probs = vec![0.0f32; n * k * hw];
        let mut data = vec![0.0f32; n * hw];
        for ni in 0..n {
            for v in 0..hw {
                let mut mx = f64::NEG_INFINITY;
                for kc in 0..k {
                    mx = mx.max(ld[(ni * k + kc) * hw + v] as f64);
                }
                let mut se = 0.0f64;
                for kc in 0..k {
                    se += ((ld[(ni * k + kc) * hw + v] as f64) - mx).exp();
                }
                let lse = mx + se.ln();
                let lab = labels[ni * hw + v] as usize;
                data[ni * hw + v] = (lse - ld[(ni * k + lab) * hw + v] as f64) as f32;
                for kc in 0..k {
                    probs[(ni * k + kc) * hw + v] =
                        (((ld[(ni * k + kc) * hw + v] as f64) - lse).exp()) as f32;
                }
            }
        }
        let rg = self.nodes[logits].requires_grad;
        Ok(self.push(
            vec![n, h, w],
            data,
            rg,
            None,
            Op::CeMap { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Scalar sum of w[i]*x[i] with constant weights, accumulated in f64.
    pub fn weighted_sum(&mut self, x: TensorId, w: Vec<f32>) -> Result<TensorId> {
        if w.len() != self.nodes[x].data.len() {
            return Err(Error::Shape(format!(
                "weighted_sum: {} weights for {} elements",
                w.len(),
                self.nodes[x].data.len()
            )));
        }
        let mut s = 0.0f64;
        for (&v, &wi) in self.nodes[x].data.iter().zip(w.iter()) {
            s += v as f64 * wi as f64;
        }
        let rg = self.nodes[x].requires_grad;
        Ok(self.push(vec![1], vec![s as f32], rg, Some(s), Op::WeightedSum { x, w }))
    }

    /// Scalar sum of all elements.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let ones = vec![1.0f32; self.nodes[x].data.len()];
        self.weighted_sum(x, ones).expect("length matches by construction")
    }

    /// Reverse-mode pass from a scalar loss. Adjoints are computed in a
    /// fresh scratch table and then accumulated (+=) into the `grad` buffer
    /// of every reachable tensor with `requires_grad`.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss].data.len() != 1 {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.nodes[loss].shape
            )));
        }
        let mut adj: Vec<Option<Vec<f32>>> = Vec::with_capacity(loss + 1);
        adj.resize_with(loss + 1, || None);
        adj[loss] = Some(vec![1.0]);
        for id in (0..=loss).rev() {
            let Some(up) = adj[id].take() else { continue };
            self.route_adjoint(id, &up, &mut adj);
            adj[id] = Some(up);
        }
        for (id, a) in adj.iter().enumerate() {
            if let Some(a) = a {
                if self.nodes[id].requires_grad {
                    for (g, &ai) in self.nodes[id].grad.iter_mut().zip(a.iter()) {
                        *g += ai;
                    }
                }
            }
        }
        Ok(())
    }

    fn route_adjoint(&self, id: TensorId, up: &[f32], adj: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let req = |t: TensorId| nodes[t].requires_grad;
        match &nodes[id].op {
            Op::Leaf => {}
            Op::Relu { x } => {
                if req(*x) {
                    let a = acc(adj, *x, nodes[*x].data.len());
                    for (i, &u) in up.iter().enumerate() {
                        if nodes[*x].data[i] > 0.0 {
                            a[i] += u;
                        }
                    }
                }
            }
            Op::Add { a: ta, b: tb } => {
                for &t in &[*ta, *tb] {
                    if req(t) {
                        let a = acc(adj, t, nodes[t].data.len());
                        for (ai, &u) in a.iter_mut().zip(up.iter()) {
                            *ai += u;
                        }
                    }
                }
            }
            Op::Mul { a: ta, b: tb } => {
                if req(*ta) {
                    let a = acc(adj, *ta, nodes[*ta].data.len());
                    for i in 0..up.len() {
                        a[i] += up[i] * nodes[*tb].data[i];
                    }
                }
                if req(*tb) {
                    let a = acc(adj, *tb, nodes[*tb].data.len());
                    for i in 0..up.len() {
                        a[i] += up[i] * nodes[*ta].data[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if req(*x) {
                    let a = acc(adj, *x, nodes[*x].data.len());
                    for (ai, &u) in a.iter_mut().zip(up.iter()) {
                        *ai += *c * u;
                    }
                }
            }
            Op::Conv2d(op) => conv::conv_backward(nodes, op, up, adj),
            Op::AvgPool { x, bh, bw } => {
                if req(*x) {
                    let sh = &nodes[*x].shape;
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let a = acc(adj, *x, nodes[*x].data.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let plane = (ni * c + ci) * h * w;
                            let out_plane = (ni * c + ci) * bh * bw;
                            for i in 0..*bh {
                                let (r0, r1) = (i * h / bh, (i + 1) * h / bh);
                                for j in 0..*bw {
                                    let (c0, c1) = (j * w / bw, (j + 1) * w / bw);
                                    let area = ((r1 - r0) * (c1 - c0)) as f32;
                                    let g = up[out_plane + i * bw + j] / area;
                                    for r in r0..r1 {
                                        for cc in c0..c1 {
                                            a[plane + r * w + cc] += g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Upsample { x } => {
                if req(*x) {
                    let sh = &nodes[*x].shape;
                    let (n, c, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let osh = &nodes[id].shape;
                    let (th, tw) = (osh[2], osh[3]);
                    let ys = axis_taps(h, th);
                    let xs = axis_taps(w, tw);
                    let a = acc(adj, *x, nodes[*x].data.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let plane = (ni * c + ci) * h * w;
                            let out_plane = (ni * c + ci) * th * tw;
                            for (i, &(y0, y1, ty)) in ys.iter().enumerate() {
                                for (j, &(x0, x1, tx)) in xs.iter().enumerate() {
                                    let g = up[out_plane + i * tw + j];
                                    a[plane + y0 * w + x0] += (1.0 - ty) * (1.0 - tx) * g;
                                    a[plane + y0 * w + x1] += (1.0 - ty) * tx * g;
                                    a[plane + y1 * w + x0] += ty * (1.0 - tx) * g;
                                    a[plane + y1 * w + x1] += ty * tx * g;
                                }
                            }
                        }
                    }
                }
            }
            Op::Concat { xs } => {
                let osh = &nodes[id].shape;
                let (n, c_total, h, w) = (osh[0], osh[1], osh[2], osh[3]);
                let hw = h * w;
                for ni in 0..n {
                    let mut off = 0usize;
                    for &x in xs {
                        let ci = nodes[x].shape[1];
                        if req(x) {
                            let a = acc(adj, x, nodes[x].data.len());
                            let src = (ni * c_total + off) * hw;
                            let dst = ni * ci * hw;
                            for i in 0..ci * hw {
                                a[dst + i] += up[src + i];
                            }
                        }
                        off += ci;
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if req(*x) {
                    let a = acc(adj, *x, nodes[*x].data.len());
                    for i in 0..up.len() {
                        a[i] += mask[i] * up[i];
                    }
                }
            }
            Op::CeMap { logits, labels, probs } => {
                if req(*logits) {
                    let sh = &nodes[*logits].shape;
                    let (n, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
                    let hw = h * w;
                    let a = acc(adj, *logits, nodes[*logits].data.len());
                    for ni in 0..n {
                        for v in 0..hw {
                            let g = up[ni * hw + v];
                            if g == 0.0 {
                                continue;
                            }
                            let lab = labels[ni * hw + v] as usize;
                            for kc in 0..k {
                                let idx = (ni * k + kc) * hw + v;
                                let ind = if kc == lab { 1.0 } else { 0.0 };
                                a[idx] += g * (probs[idx] - ind);
                            }
                        }
                    }
                }
            }
            Op::WeightedSum { x, w } => {
                if req(*x) {
                    let g = up[0];
                    let a = acc(adj, *x, nodes[*x].data.len());
                    for (ai, &wi) in a.iter_mut().zip(w.iter()) {
                        *ai += wi * g;
                    }
                }
            }
        }
    }
}

fn acc(adj: &mut [Option<Vec<f32>>], id: TensorId, len: usize) -> &mut Vec<f32> {
    adj[id].get_or_insert_with(|| vec![0.0; len])
}

fn rank4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("{what}: expected rank-4 [N,C,H,W], got {shape:?}")));
    }
    Ok([shape[0], shape[1], shape[2], shape[3]])
}

/// Corner-aligned interpolation taps along one axis: maps each target index
/// to (floor source, ceil source, fraction). 1-extent sources replicate.
fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    (0..dst)
        .map(|i| {
            if src == 1 || dst == 1 {
                (0, 0, 0.0)
            } else {
                let s = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
                let i0 = s.floor() as usize;
                let i0 = i0.min(src - 1);
                let i1 = (i0 + 1).min(src - 1);
                (i0, i1, (s - i0 as f64) as f32)
            }
        })
        .collect()
}

/// Central-difference gradient check at selected leaf elements.
///
/// `graph` must contain only leaves; `rebuild` appends the computation and
/// returns the scalar loss id. The analytic gradient is taken from one
/// backward pass; then, for every (leaf, element) pick, the element is
/// perturbed by +-step and the loss is re-evaluated at 64-bit precision.
/// Returns max over picks of |analytic - central| / max(1, |analytic|).
pub fn finite_diff_check_at<F>(
    graph: &mut Graph,
    step: f64,
    picks: &[(TensorId, usize)],
    mut rebuild: F,
) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<TensorId>,
{
    let base = graph.len();
    let loss = rebuild(graph)?;
    if graph.numel(loss) != 1 {
        return Err(Error::Shape("finite_diff_check: loss is not scalar".into()));
    }
    for id in 0..base {
        graph.zero_grad(id);
    }
    graph.backward(loss)?;
    let analytic: Vec<f32> = picks
        .iter()
        .map(|&(id, i)| {
            assert!(graph.requires_grad(id), "picked leaf {id} does not require grad");
            graph.grad(id)[i]
        })
        .collect();
    let mut max_rel = 0.0f64;
    for (p, &(id, i)) in picks.iter().enumerate() {
        let orig = graph.data(id)[i];
        let xp = (orig as f64 + step) as f32;
        let xm = (orig as f64 - step) as f32;
        graph.truncate(base);
        graph.data_mut(id)[i] = xp;
        let lp = {
            let l = rebuild(graph)?;
            graph.value64(l)
        };
        graph.truncate(base);
        graph.data_mut(id)[i] = xm;
        let lm = {
            let l = rebuild(graph)?;
            graph.value64(l)
        };
        graph.data_mut(id)[i] = orig;
        let denom = xp as f64 - xm as f64;
        let fd = (lp - lm) / denom;
        let a = analytic[p] as f64;
        let rel = (a - fd).abs() / a.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    graph.truncate(base);
    Ok(max_rel)
}

/// Full check over every element of every grad-requiring leaf.
pub fn finite_diff_check<F>(graph: &mut Graph, step: f64, rebuild: F) -> Result<f64>
where
    F: FnMut(&mut Graph) -> Result<TensorId>,
{
    let picks: Vec<(TensorId, usize)> = (0..graph.len())
        .filter(|&id| graph.requires_grad(id))
        .flat_map(|id| (0..graph.numel(id)).map(move |i| (id, i)))
        .collect();
    finite_diff_check_at(graph, step, &picks, rebuild)
}
