//! Pyramid segmentation network: a dilated residual stem, multi-bin average
//! pyramid pooling, a fused classification head with dropout, and an
//! auxiliary head on the stem output.
//!
//! The stem downsamples by `output_stride` using stride-2 entry convolutions
//! until the factor is reached; residual blocks keep resolution and apply
//! their stage's dilation. Each pyramid branch pools the stem features to a
//! bin grid, reduces channels with a 1x1 convolution, and upsamples back;
//! the head fuses stem and branches and predicts per-class logits at input
//! resolution.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::{RngStream, STREAM_INIT};
use crate::tensor::conv::ConvSpec;
use crate::tensor::{Graph, TensorId};

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub stage_dilations: Vec<usize>,
    pub output_stride: usize,
    pub pyramid_bins: Vec<usize>,
    pub dropout_rate: f32,
    pub num_classes: usize,
    pub input_size: (usize, usize),
}

impl NetworkConfig {
    /// Desk-scale default: three stages at 4x downsampling, four pyramid
    /// bins, two classes, 64x64 inputs.
    pub fn mini() -> NetworkConfig {
        NetworkConfig {
            stage_channels: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            stage_dilations: vec![1, 2, 4],
            output_stride: 4,
            pyramid_bins: vec![1, 2, 3, 6],
            dropout_rate: 0.1,
            num_classes: 2,
            input_size: (64, 64),
        }
    }

    pub fn feature_size(&self) -> (usize, usize) {
        (self.input_size.0 / self.output_stride, self.input_size.1 / self.output_stride)
    }

    pub fn validate(&self) -> Result<()> {
        let ns = self.stage_channels.len();
        if ns == 0 {
            return Err(Error::Config("network: at least one stage required".into()));
        }
        if self.blocks_per_stage.len() != ns || self.stage_dilations.len() != ns {
            return Err(Error::Config(format!(
                "network: stage lists must have equal length, got channels {ns}, blocks {}, dilations {}",
                self.blocks_per_stage.len(),
                self.stage_dilations.len()
            )));
        }
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("network: stage_channels must be positive".into()));
        }
        if self.blocks_per_stage.iter().any(|&b| b == 0) {
            return Err(Error::Config("network: blocks_per_stage must be positive".into()));
        }
        if self.stage_dilations.iter().any(|&d| d == 0) {
            return Err(Error::Config("network: stage_dilations must be positive".into()));
        }
        if !self.output_stride.is_power_of_two() || self.output_stride > (1 << ns) {
            return Err(Error::Config(format!(
                "network: output_stride {} must be a power of two reachable by {ns} stride-2 stages",
                self.output_stride
            )));
        }
        let (h, w) = self.input_size;
        if h == 0 || w == 0 || h % self.output_stride != 0 || w % self.output_stride != 0 {
            return Err(Error::Config(format!(
                "network: input_size {h}x{w} must be divisible by output_stride {}",
                self.output_stride
            )));
        }
        if self.pyramid_bins.is_empty() {
            return Err(Error::Config("network: at least one pyramid bin required".into()));
        }
        if !self.pyramid_bins.windows(2).all(|p| p[0] < p[1]) {
            return Err(Error::Config(format!(
                "network: pyramid_bins {:?} must be strictly increasing",
                self.pyramid_bins
            )));
        }
        let (fh, fw) = self.feature_size();
        let max_bin = *self.pyramid_bins.last().unwrap();
        if max_bin > fh.min(fw) {
            return Err(Error::Config(format!(
                "network: pyramid bin {max_bin} exceeds feature map {fh}x{fw}"
            )));
        }
        let c_last = *self.stage_channels.last().unwrap();
        if c_last % self.pyramid_bins.len() != 0 {
            return Err(Error::Config(format!(
                "network: last stage channels {c_last} must divide evenly into {} pyramid branches",
                self.pyramid_bins.len()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "network: dropout_rate {} must be in [0, 1)",
                self.dropout_rate
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!(
                "network: num_classes {} must be at least 2",
                self.num_classes
            )));
        }
        Ok(())
    }

    /// FNV-1a hash over a canonical field encoding; stored in checkpoints
    /// so a file cannot be loaded under a different architecture.
    pub fn fingerprint(&self) -> u64 {
        let mut f = Fnv::new();
        let list = |f: &mut Fnv, v: &[usize]| {
            f.u64(v.len() as u64);
            for &x in v {
                f.u64(x as u64);
            }
        };
        list(&mut f, &self.stage_channels);
        list(&mut f, &self.blocks_per_stage);
        list(&mut f, &self.stage_dilations);
        f.u64(self.output_stride as u64);
        list(&mut f, &self.pyramid_bins);
        f.u64(self.dropout_rate.to_bits() as u64);
        f.u64(self.num_classes as u64);
        f.u64(self.input_size.0 as u64);
        f.u64(self.input_size.1 as u64);
        f.0
    }
}

pub struct Fnv(pub u64);

impl Fnv {
    pub fn new() -> Fnv {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub fn bytes(&mut self, b: &[u8]) {
        for &x in b {
            self.0 ^= x as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
}

impl Default for Fnv {
    fn default() -> Self {
        Fnv::new()
    }
}

#[derive(Clone, Copy)]
struct ConvLayer {
    w: TensorId,
    b: TensorId,
    spec_idx: usize,
}

struct Stage {
    entry: ConvLayer,
    blocks: Vec<(ConvLayer, ConvLayer)>,
}

struct Branch {
    bin: usize,
    reduce: ConvLayer,
}

pub struct Model {
    pub config: NetworkConfig,
    pub graph: Graph,
    names: Vec<String>,
    specs: Vec<ConvSpec>,
    stages: Vec<Stage>,
    branches: Vec<Branch>,
    head_fuse: ConvLayer,
    head_out: ConvLayer,
    aux_out: ConvLayer,
}

/// Handles returned by one forward pass; valid until the activations are
/// truncated away.
pub struct Forward {
    pub input: TensorId,
    pub main: TensorId,
    pub aux: TensorId,
}

impl Model {
    pub fn build(config: &NetworkConfig, rng: &mut RngStream) -> Result<Model> {
        config.validate()?;
        let mut b = Builder { graph: Graph::new(), names: Vec::new(), specs: Vec::new(), rng };
        let mut stages = Vec::new();
        let mut in_ch = 1usize;
        let mut downsample = 1usize;
        for (s, (&ch, (&blocks, &dil))) in config
            .stage_channels
            .iter()
            .zip(config.blocks_per_stage.iter().zip(config.stage_dilations.iter()))
            .enumerate()
        {
            let stride = if downsample < config.output_stride { 2 } else { 1 };
            downsample *= stride;
            let entry = b.conv(
                &format!("stage{s}.entry"),
                ConvSpec::new(ch, in_ch, 3, stride, 1, 1),
            )?;
            let mut blk = Vec::new();
            for k in 0..blocks {
                let c1 = b.conv(
                    &format!("stage{s}.block{k}.conv1"),
                    ConvSpec::new(ch, ch, 3, 1, dil, dil),
                )?;
                let c2 = b.conv(
                    &format!("stage{s}.block{k}.conv2"),
                    ConvSpec::new(ch, ch, 3, 1, dil, dil),
                )?;
                blk.push((c1, c2));
            }
            stages.push(Stage { entry, blocks: blk });
            in_ch = ch;
        }
        let c_last = *config.stage_channels.last().unwrap();
        let c_branch = c_last / config.pyramid_bins.len();
        let mut branches = Vec::new();
        for &bin in &config.pyramid_bins {
            let reduce = b.conv(
                &format!("pyramid{bin}.reduce"),
                ConvSpec::new(c_branch, c_last, 1, 1, 0, 1),
            )?;
            branches.push(Branch { bin, reduce });
        }
        let fused_ch = c_last + c_branch * config.pyramid_bins.len();
        let head_fuse = b.conv("head.fuse", ConvSpec::new(c_last, fused_ch, 3, 1, 1, 1))?;
        let head_out = b.conv("head.out", ConvSpec::new(config.num_classes, c_last, 1, 1, 0, 1))?;
        let aux_out = b.conv("aux.out", ConvSpec::new(config.num_classes, c_last, 1, 1, 0, 1))?;
        let Builder { graph, names, specs, .. } = b;
        Ok(Model {
            config: config.clone(),
            graph,
            names,
            specs,
            stages,
            branches,
            head_fuse,
            head_out,
            aux_out,
        })
    }

    /// Number of parameter tensors; they occupy graph ids 0..n.
    pub fn num_param_tensors(&self) -> usize {
        self.names.len()
    }

    /// Total scalar parameter count.
    pub fn num_weights(&self) -> usize {
        (0..self.names.len()).map(|p| self.graph.numel(p)).sum()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_id(&self, name: &str) -> Option<TensorId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn branch_bins(&self) -> Vec<usize> {
        self.branches.iter().map(|b| b.bin).collect()
    }

    /// Drop all activation nodes, keeping only parameters.
    pub fn reset(&mut self) {
        self.graph.truncate(self.names.len());
    }

    /// FNV-1a over the bit patterns of every parameter scalar, in order.
    pub fn param_hash(&self) -> u64 {
        let mut f = Fnv::new();
        for p in 0..self.names.len() {
            for v in self.graph.data(p) {
                f.bytes(&v.to_bits().to_le_bytes());
            }
        }
        f.0
    }

    /// Overwrite this model's parameters with another's (same architecture).
    pub fn copy_params_from(&mut self, other: &Model) {
        assert_eq!(self.names, other.names, "parameter layout mismatch");
        for p in 0..self.names.len() {
            self.graph.data_mut(p).copy_from_slice(other.graph.data(p));
        }
    }

    fn apply(&mut self, layer: ConvLayer, x: TensorId) -> Result<TensorId> {
        let spec = self.specs[layer.spec_idx].clone();
        self.graph.conv2d(x, layer.w, layer.b, &spec)
    }

    fn run_stem(&mut self, x: TensorId) -> Result<TensorId> {
        let mut cur = x;
        for s in 0..self.stages.len() {
            let entry = self.stages[s].entry;
            cur = self.apply(entry, cur)?;
            cur = self.graph.relu(cur);
            for k in 0..self.stages[s].blocks.len() {
                let (c1, c2) = self.stages[s].blocks[k];
                let y = self.apply(c1, cur)?;
                let y = self.graph.relu(y);
                let y = self.apply(c2, y)?;
                let y = self.graph.add(y, cur)?;
                cur = self.graph.relu(y);
            }
        }
        Ok(cur)
    }

    /// Full forward pass over a [N,1,H,W] batch given as a flat slice.
    /// `rng` drives dropout masks and is consumed only when training.
    pub fn forward(
        &mut self,
        batch: &[f32],
        n: usize,
        training: bool,
        rng: &mut RngStream,
    ) -> Result<Forward> {
        let (h, w) = self.config.input_size;
        if batch.len() != n * h * w {
            return Err(Error::Shape(format!(
                "forward: batch of {} values is not {n} slices of {h}x{w}",
                batch.len()
            )));
        }
        let input = self.graph.leaf(vec![n, 1, h, w], batch.to_vec(), false)?;
        let stem = self.run_stem(input)?;
        let (fh, fw) = self.config.feature_size();
        debug_assert_eq!(self.graph.shape(stem), &[n, *self.config.stage_channels.last().unwrap(), fh, fw]);

        let mut parts = vec![stem];
        for i in 0..self.branches.len() {
            let Branch { bin, reduce } = self.branches[i];
            let pooled = self.graph.avg_pool(stem, bin, bin)?;
            debug_assert_eq!(self.graph.shape(pooled)[2..], [bin, bin]);
            let red = self.apply(reduce, pooled)?;
            let act = self.graph.relu(red);
            parts.push(self.graph.upsample_bilinear(act, fh, fw)?);
        }
        let fused = self.graph.concat_channels(&parts)?;
        let f = self.apply(self.head_fuse, fused)?;
        let f = self.graph.relu(f);
        let f = self.graph.dropout(f, self.config.dropout_rate, training, rng)?;
        let logits = self.apply(self.head_out, f)?;
        let main = self.graph.upsample_bilinear(logits, h, w)?;

        let aux_logits = self.apply(self.aux_out, stem)?;
        let aux = self.graph.upsample_bilinear(aux_logits, h, w)?;
        Ok(Forward { input, main, aux })
    }
}

struct Builder<'a> {
    graph: Graph,
    names: Vec<String>,
    specs: Vec<ConvSpec>,
    rng: &'a mut RngStream,
}

impl Builder<'_> {
    fn conv(&mut self, name: &str, spec: ConvSpec) -> Result<ConvLayer> {
        let fan_in = spec.in_channels * spec.kh * spec.kw;
        let bound = (6.0 / fan_in as f64).sqrt() as f32;
        let wlen = spec.out_channels * fan_in;
        let wdata: Vec<f32> = (0..wlen).map(|_| self.rng.uniform_in(-bound, bound)).collect();
        let w = self.graph.leaf(vec![spec.out_channels, spec.in_channels, spec.kh, spec.kw], wdata, true)?;
        self.names.push(format!("{name}.w"));
        let b = self.graph.leaf(vec![spec.out_channels], vec![0.0; spec.out_channels], true)?;
        self.names.push(format!("{name}.b"));
        self.specs.push(spec);
        Ok(ConvLayer { w, b, spec_idx: self.specs.len() - 1 })
    }
}

/// A model's parameters lifted out of the graph, with selection metadata.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub epoch: u64,
    pub val_loss: f32,
    pub fingerprint: u64,
    pub names: Vec<String>,
    pub tensors: Vec<(Vec<usize>, Vec<f32>)>,
}

const MAGIC: &[u8; 4] = b"SEGC";
const VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_model(model: &Model, epoch: u64, val_loss: f32) -> Checkpoint {
        let tensors = (0..model.num_param_tensors())
            .map(|p| (model.graph.shape(p).to_vec(), model.graph.data(p).to_vec()))
            .collect();
        Checkpoint {
            epoch,
            val_loss,
            fingerprint: model.config.fingerprint(),
            names: model.names.clone(),
            tensors,
        }
    }

    /// Write the model's parameters back; architecture must match.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if self.fingerprint != model.config.fingerprint() {
            return Err(Error::Config(
                "checkpoint: config fingerprint mismatch when applying".into(),
            ));
        }
        for (p, (shape, data)) in self.tensors.iter().enumerate() {
            if model.graph.shape(p) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "checkpoint: tensor {} shape {:?} does not match model {:?}",
                    self.names[p],
                    shape,
                    model.graph.shape(p)
                )));
            }
            model.graph.data_mut(p).copy_from_slice(data);
        }
        Ok(())
    }

    /// Build a fresh model carrying this checkpoint's parameters.
    pub fn into_model(&self, config: &NetworkConfig) -> Result<Model> {
        if self.fingerprint != config.fingerprint() {
            return Err(Error::Config(
                "checkpoint: config fingerprint mismatch".into(),
            ));
        }
        let mut model = Model::build(config, &mut RngStream::new(0, STREAM_INIT))?;
        if self.names != model.names {
            return Err(Error::Config(
                "checkpoint: parameter names do not match the architecture".into(),
            ));
        }
        self.apply_to(&mut model)?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        buf.extend_from_slice(&self.epoch.to_le_bytes());
        buf.extend_from_slice(&self.val_loss.to_le_bytes());
        buf.extend_from_slice(&self.fingerprint.to_le_bytes());
        buf.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, (shape, data)) in self.names.iter().zip(self.tensors.iter()) {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for &d in shape {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, &buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut rd = Rd { buf: &buf, pos: 0, path };
        let magic = rd.take(4)?;
        if magic != MAGIC {
            return Err(Error::format(path, "bad magic"));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::format(path, format!("unsupported version {version}")));
        }
        let epoch = rd.u64()?;
        let val_loss = f32::from_bits(rd.u32()?);
        let fingerprint = rd.u64()?;
        let count = rd.u32()? as usize;
        let mut names = Vec::with_capacity(count);
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = rd.u32()? as usize;
            let name = std::str::from_utf8(rd.take(name_len)?)
                .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?
                .to_string();
            let rank = rd.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(rd.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = rd.take(numel * 4)?;
            let data: Vec<f32> = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            names.push(name);
            tensors.push((shape, data));
        }
        if rd.pos != buf.len() {
            return Err(Error::format(path, "unexpected trailing data"));
        }
        Ok(Checkpoint { epoch, val_loss, fingerprint, names, tensors })
    }

    /// Human-readable one-line summary for CLI output.
    pub fn describe(&self) -> String {
        let total: usize = self.tensors.iter().map(|(_, d)| d.len()).sum();
        let mut s = String::new();
        let _ = write!(
            s,
            "epoch {} val_loss {:.6} tensors {} weights {total}",
            self.epoch,
            self.val_loss,
            self.tensors.len()
        );
        s
    }
}

pub fn save_checkpoint(model: &Model, epoch: u64, val_loss: f32, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, epoch, val_loss).save(path)
}

pub fn load_checkpoint(path: &Path, config: &NetworkConfig) -> Result<(Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let model = ckpt.into_model(config)?;
    Ok((model, ckpt))
}

struct Rd<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Rd<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(self.path, "truncated checkpoint"));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp_path(tag: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("pyraseg-net-{}-{tag}.segc", std::process::id()))
    }

    #[test]
    fn mini_parameter_count_is_pinned() {
        let mut rng = RngStream::new(1, STREAM_INIT);
        let model = Model::build(&NetworkConfig::mini(), &mut rng).unwrap();
        // closed-form sum over declared layers, computed once by hand
        assert_eq!(model.num_weights(), 295_492);
        assert_eq!(model.num_param_tensors(), 44);
        assert_eq!(model.graph.len(), 44);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = NetworkConfig::mini();
        let a = Model::build(&cfg, &mut RngStream::new(7, STREAM_INIT)).unwrap();
        let b = Model::build(&cfg, &mut RngStream::new(7, STREAM_INIT)).unwrap();
        let c = Model::build(&cfg, &mut RngStream::new(8, STREAM_INIT)).unwrap();
        assert_eq!(a.param_hash(), b.param_hash());
        assert_ne!(a.param_hash(), c.param_hash());
    }

    #[test]
    fn branch_bins_and_feature_size() {
        let cfg = NetworkConfig::mini();
        assert_eq!(cfg.feature_size(), (16, 16));
        let model = Model::build(&cfg, &mut RngStream::new(1, STREAM_INIT)).unwrap();
        assert_eq!(model.branch_bins(), vec![1, 2, 3, 6]);
    }

    #[test]
    fn forward_output_shapes() {
        let cfg = NetworkConfig::mini();
        let mut model = Model::build(&cfg, &mut RngStream::new(2, STREAM_INIT)).unwrap();
        let batch = vec![0.1f32; 2 * 64 * 64];
        let mut drop = RngStream::new(2, crate::rng::STREAM_DROPOUT);
        let f = model.forward(&batch, 2, false, &mut drop).unwrap();
        assert_eq!(model.graph.shape(f.main), &[2, 2, 64, 64]);
        assert_eq!(model.graph.shape(f.aux), &[2, 2, 64, 64]);
    }

    #[test]
    fn zero_input_zero_final_conv_gives_bias() {
        let cfg = NetworkConfig::mini();
        let mut model = Model::build(&cfg, &mut RngStream::new(3, STREAM_INIT)).unwrap();
        let wid = model.param_id("head.out.w").unwrap();
        model.graph.data_mut(wid).fill(0.0);
        let bid = model.param_id("head.out.b").unwrap();
        model.graph.data_mut(bid).copy_from_slice(&[0.3, -0.2]);
        let batch = vec![0.0f32; 64 * 64];
        let mut drop = RngStream::new(3, crate::rng::STREAM_DROPOUT);
        let f = model.forward(&batch, 1, false, &mut drop).unwrap();
        let d = model.graph.data(f.main);
        for v in 0..64 * 64 {
            assert_eq!(d[v], 0.3);
            assert_eq!(d[64 * 64 + v], -0.2);
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let cfg = NetworkConfig::mini();
        let mut model = Model::build(&cfg, &mut RngStream::new(4, STREAM_INIT)).unwrap();
        let batch: Vec<f32> = (0..64 * 64).map(|i| (i % 13) as f32 * 0.07 - 0.4).collect();
        let mut drop = RngStream::new(4, crate::rng::STREAM_DROPOUT);
        let f1 = model.forward(&batch, 1, false, &mut drop).unwrap();
        let out1 = model.graph.data(f1.main).to_vec();
        model.reset();
        let f2 = model.forward(&batch, 1, false, &mut drop).unwrap();
        let out2 = model.graph.data(f2.main).to_vec();
        assert_eq!(
            out1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            out2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn wrong_input_size_rejected() {
        let cfg = NetworkConfig::mini();
        let mut model = Model::build(&cfg, &mut RngStream::new(5, STREAM_INIT)).unwrap();
        let mut drop = RngStream::new(5, crate::rng::STREAM_DROPOUT);
        let err = model.forward(&vec![0.0; 32 * 32], 1, false, &mut drop).err().unwrap();
        assert!(err.to_string().contains("64x64"), "{err}");
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = NetworkConfig::mini();
        let mut c = base.clone();
        c.pyramid_bins = vec![1, 3, 2];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.pyramid_bins = vec![1, 2, 3, 17];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.num_classes = 1;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.blocks_per_stage = vec![2, 2];
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.stage_channels = vec![16, 32, 62]; // not divisible by 4 branches
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.output_stride = 3;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.output_stride = 16; // only 3 stages available
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.input_size = (62, 64);
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
        assert!(base.validate().is_ok());
    }

    #[test]
    fn fingerprint_separates_configs() {
        let a = NetworkConfig::mini();
        let mut b = a.clone();
        b.stage_channels = vec![16, 32, 128];
        let mut c = a.clone();
        c.dropout_rate = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.fingerprint(), NetworkConfig::mini().fingerprint());
    }

    #[test]
    fn checkpoint_roundtrip_bit_exact() {
        let cfg = NetworkConfig::mini();
        let mut model = Model::build(&cfg, &mut RngStream::new(11, STREAM_INIT)).unwrap();
        let path = tmp_path("roundtrip");
        save_checkpoint(&model, 17, 0.25, &path).unwrap();
        let (mut loaded, meta) = load_checkpoint(&path, &cfg).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(meta.epoch, 17);
        assert_eq!(meta.val_loss, 0.25);
        assert_eq!(model.param_hash(), loaded.param_hash());

        let batch: Vec<f32> = (0..64 * 64).map(|i| ((i * 31) % 97) as f32 * 0.01).collect();
        let mut d1 = RngStream::new(11, crate::rng::STREAM_DROPOUT);
        let mut d2 = RngStream::new(11, crate::rng::STREAM_DROPOUT);
        let f1 = model.forward(&batch, 1, false, &mut d1).unwrap();
        let f2 = loaded.forward(&batch, 1, false, &mut d2).unwrap();
        assert_eq!(
            model.graph.data(f1.main).iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            loaded.graph.data(f2.main).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn checkpoint_corruption_diagnostics() {
        let cfg = NetworkConfig::mini();
        let model = Model::build(&cfg, &mut RngStream::new(12, STREAM_INIT)).unwrap();
        let path = tmp_path("corrupt");
        save_checkpoint(&model, 1, 1.0, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("truncated checkpoint"), "{err}");

        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("bad magic"), "{err}");

        let mut bad = bytes.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        let err = Checkpoint::load(&path).unwrap_err().to_string();
        assert!(err.contains("unsupported version"), "{err}");

        std::fs::write(&path, &bytes).unwrap();
        let mut other = cfg.clone();
        other.stage_channels = vec![16, 32, 128];
        let err = load_checkpoint(&path, &other).err().unwrap().to_string();
        assert!(err.contains("fingerprint mismatch"), "{err}");
        std::fs::remove_file(&path).unwrap();
    }

    /// Stem-only config whose theoretical receptive field (55 pixels) fits
    /// inside the 64-pixel input: zeroing pixels outside the box around an
    /// output's center must leave that output bit-identical.
    #[test]
    fn stem_receptive_field_is_local() {
        let cfg = NetworkConfig {
            stage_channels: vec![4, 8, 8],
            blocks_per_stage: vec![1, 1, 1],
            stage_dilations: vec![1, 1, 1],
            output_stride: 4,
            pyramid_bins: vec![1, 2],
            dropout_rate: 0.0,
            num_classes: 2,
            input_size: (64, 64),
        };
        let mut model = Model::build(&cfg, &mut RngStream::new(21, STREAM_INIT)).unwrap();
        let base: Vec<f32> = (0..64 * 64).map(|i| ((i * 37) % 101) as f32 * 0.01 - 0.3).collect();

        let stem_at = |model: &mut Model, batch: &[f32]| -> Vec<u32> {
            model.reset();
            let x = model.graph.leaf(vec![1, 1, 64, 64], batch.to_vec(), false).unwrap();
            let stem = model.run_stem(x).unwrap();
            let d = model.graph.data(stem);
            // all channels at feature position (8,8)
            (0..8).map(|c| d[c * 256 + 8 * 16 + 8].to_bits()).collect()
        };
        let reference = stem_at(&mut model, &base);

        // center maps to input (32,32); half-width (55-1)/2 = 27 gives the
        // closed box [5,59] x [5,59]
        for &(y, x) in &[(0usize, 0usize), (63, 63), (4, 32), (32, 60), (63, 5), (2, 40)] {
            let mut batch = base.clone();
            batch[y * 64 + x] = 0.0;
            assert_eq!(
                stem_at(&mut model, &batch),
                reference,
                "pixel ({y},{x}) is outside the receptive field"
            );
        }
        // a pixel at the center must influence the output
        let mut batch = base.clone();
        batch[32 * 64 + 32] += 10.0;
        assert_ne!(stem_at(&mut model, &batch), reference);
    }

    /// The bin-1 pyramid branch pools globally, so every input pixel can
    /// reach every output logit even far outside the stem receptive field.
    #[test]
    fn pyramid_gives_global_sensitivity() {
        let cfg = NetworkConfig::mini();
        let mut model = Model::build(&cfg, &mut RngStream::new(22, STREAM_INIT)).unwrap();
        let base: Vec<f32> = (0..64 * 64).map(|i| ((i * 53) % 89) as f32 * 0.011 - 0.4).collect();
        let mut drop = RngStream::new(22, crate::rng::STREAM_DROPOUT);
        let f = model.forward(&base, 1, false, &mut drop).unwrap();
        let reference = model.graph.data(f.main).to_vec();

        let mut r = RngStream::new(23, 90);
        let mut pixels = vec![(0usize, 0usize), (0, 63), (63, 0), (63, 63)];
        for _ in 0..28 {
            pixels.push((r.index(64), r.index(64)));
        }
        for (y, x) in pixels {
            let mut batch = base.clone();
            batch[y * 64 + x] += 10.0;
            model.reset();
            let f = model.forward(&batch, 1, false, &mut drop).unwrap();
            let out = model.graph.data(f.main);
            let max_change = out
                .iter()
                .zip(reference.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max_change > 0.0, "pixel ({y},{x}) left all logits unchanged");
        }
    }

    #[test]
    fn checkpoint_apply_roundtrip_in_memory() {
        let cfg = NetworkConfig::mini();
        let model = Model::build(&cfg, &mut RngStream::new(31, STREAM_INIT)).unwrap();
        let ckpt = Checkpoint::from_model(&model, 5, 0.5);
        let restored = ckpt.into_model(&cfg).unwrap();
        assert_eq!(model.param_hash(), restored.param_hash());
        assert!(ckpt.describe().contains("epoch 5"));
    }
}
