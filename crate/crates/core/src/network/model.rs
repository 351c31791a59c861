use std::collections::BTreeMap;

use super::config::{FusionBlockConfig, FusionMethod, NetConfig};
use crate::autodiff::{softmax_vec, Graph, NodeId};
use crate::error::{Error, Result};
use crate::norm::{batch_stats, BatchStats, ModalityNorm, NormMode};
use crate::rng::Lcg64;
use crate::tensor::Tensor;

/// Separate stream so fusion-method parameters never perturb the
/// initialization of the shared layers.
const FUSION_STREAM: u64 = 0xf0_5e;

/// Address of one learnable tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKey {
    ConvWeight { conv: usize, copy: usize },
    ConvBias { conv: usize, copy: usize },
    Gamma { norm: usize, set: usize },
    Beta { norm: usize, set: usize },
    Ensemble,
}

impl ParamKey {
    /// Weight decay applies to convolution weights only.
    pub fn decays(self) -> bool {
        matches!(self, ParamKey::ConvWeight { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BufferKey {
    RunningMean { norm: usize, set: usize },
    RunningVar { norm: usize, set: usize },
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub name: String,
    pub weights: Vec<Tensor>,
    pub biases: Option<Vec<Tensor>>,
    pub stride: usize,
    pub pad: usize,
    /// Modality owning each copy; `None` for a single shared copy.
    pub owners: Option<Vec<usize>>,
}

impl ConvLayer {
    pub fn copy_for(&self, s: usize) -> usize {
        match &self.owners {
            Some(o) => o.iter().position(|&m| m == s).unwrap_or(0),
            None => 0,
        }
    }

    pub fn param_count(&self) -> usize {
        let w: usize = self.weights.iter().map(Tensor::len).sum();
        let b: usize = self.biases.iter().flatten().map(Tensor::len).sum();
        w + b
    }

    fn suffix(&self, copy: usize) -> String {
        match &self.owners {
            Some(o) => format!(".m{}", o[copy]),
            None => String::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormSite {
    pub name: String,
    pub encoder: bool,
    pub norm: ModalityNorm,
}

impl NormSite {
    fn suffix(&self, set: usize) -> String {
        if self.norm.sets() > 1 {
            format!(".m{set}")
        } else {
            String::new()
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum FuseParams {
    None,
    Concat(usize),
    Attention { squeeze: usize, gate: usize },
}

#[derive(Debug, Clone)]
struct BlockLayout {
    cfg: FusionBlockConfig,
    conv1: usize,
    bn1: usize,
    conv2: usize,
    bn2: usize,
    conv3: usize,
    bn3: usize,
    proj: Option<(usize, usize)>,
    fuse: FuseParams,
}

#[derive(Debug, Clone)]
struct UpStage {
    stage: usize,
    lateral: usize,
    conv: usize,
    bn: usize,
}

#[derive(Debug, Clone)]
struct Decoder {
    top_conv: usize,
    top_bn: usize,
    ups: Vec<UpStage>,
    classifier: usize,
}

/// Multi-branch encoder with shared convolutions and per-modality norms,
/// fusion at the last block of every stage, a shared decoder and an
/// ensemble head.
#[derive(Debug, Clone)]
pub struct AsymFusionNet {
    cfg: NetConfig,
    convs: Vec<ConvLayer>,
    norms: Vec<NormSite>,
    ensemble: Tensor,
    stem: (usize, usize),
    blocks: Vec<Vec<BlockLayout>>,
    decoder: Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub norm: usize,
    pub set: usize,
    pub stats: BatchStats,
}

/// Node handles produced by [`AsymFusionNet::forward_graph`].
#[derive(Debug, Clone)]
pub struct GraphForward {
    pub logits: Vec<NodeId>,
    pub probs: Vec<NodeId>,
    pub ensemble: NodeId,
    /// Per branch: stem output, then every block output in order.
    pub activations: Vec<Vec<NodeId>>,
    pub leaves: BTreeMap<ParamKey, NodeId>,
    pub stat_updates: Vec<StatUpdate>,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    pub logits: Vec<Tensor>,
    pub probs: Vec<Tensor>,
    pub ensemble: Tensor,
    pub alpha: Vec<f64>,
    pub activations: Vec<Vec<Tensor>>,
}

struct Ctx<'g> {
    g: &'g mut Graph,
    leaves: BTreeMap<ParamKey, NodeId>,
    mode: Mode,
    updates: Vec<StatUpdate>,
}

struct Builder<'c> {
    cfg: &'c NetConfig,
    convs: Vec<ConvLayer>,
    norms: Vec<NormSite>,
}

impl Builder<'_> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        rng: &mut Lcg64,
        name: String,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        bias: bool,
        owners: Option<Vec<usize>>,
    ) -> usize {
        let fan_in = (cin * k * k) as f64;
        let w = Tensor::randn([cout, cin, k, k], (2.0 / fan_in).sqrt(), rng);
        let copies = owners.as_ref().map_or(1, Vec::len);
        self.convs.push(ConvLayer {
            name,
            weights: vec![w; copies],
            biases: bias.then(|| vec![Tensor::zeros([1, cout, 1, 1]); copies]),
            stride,
            pad: (k - 1) / 2,
            owners,
        });
        self.convs.len() - 1
    }

    fn shared_conv(&mut self, rng: &mut Lcg64, name: String, cin: usize, cout: usize, k: usize, stride: usize, bias: bool) -> usize {
        let copies = self.cfg.sharing.conv_copies(self.cfg.modalities);
        let owners = (copies > 1).then(|| (0..copies).collect());
        self.conv(rng, name, cin, cout, k, stride, bias, owners)
    }

    fn norm(&mut self, name: String, channels: usize, encoder: bool) -> Result<usize> {
        let mode = if encoder {
            self.cfg.sharing.encoder_norm_mode()
        } else {
            self.cfg.sharing.decoder_norm_mode()
        };
        let norm = ModalityNorm::with_hyper(
            channels,
            self.cfg.modalities,
            mode,
            self.cfg.norm_eps,
            self.cfg.norm_momentum,
        )?;
        self.norms.push(NormSite { name, encoder, norm });
        Ok(self.norms.len() - 1)
    }
}

impl AsymFusionNet {
    pub fn build(cfg: &NetConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Lcg64::new(cfg.seed);
        let mut fuse_rng = Lcg64::derived(cfg.seed, FUSION_STREAM);
        let mut b = Builder {
            cfg,
            convs: Vec::new(),
            norms: Vec::new(),
        };

        let stem_conv = b.shared_conv(&mut rng, "enc.stem.conv".into(), cfg.in_channels, cfg.stem_width, 1, 1, false);
        let stem_bn = b.norm("enc.stem.bn".into(), cfg.stem_width, true)?;

        let mut blocks = Vec::new();
        for (si, st) in cfg.stages.iter().enumerate() {
            let mut stage = Vec::new();
            for bi in 0..st.blocks {
                let bc = cfg.block_config(si, bi);
                let p = format!("enc.stage{}.block{}", si + 1, bi + 1);
                let conv1 = b.shared_conv(&mut rng, format!("{p}.conv1"), bc.in_channels, bc.mid, 1, bc.stride, false);
                let bn1 = b.norm(format!("{p}.bn1"), bc.mid, true)?;
                let conv2 = b.shared_conv(&mut rng, format!("{p}.conv2"), bc.mid, bc.mid, 3, 1, false);
                let bn2 = b.norm(format!("{p}.bn2"), bc.mid, true)?;
                let conv3 = b.shared_conv(&mut rng, format!("{p}.conv3"), bc.mid, bc.out, 1, 1, false);
                let bn3 = b.norm(format!("{p}.bn3"), bc.out, true)?;
                let proj = if bi == 0 {
                    let c = b.shared_conv(&mut rng, format!("{p}.proj.conv"), bc.in_channels, bc.out, 1, bc.stride, false);
                    Some((c, b.norm(format!("{p}.proj.bn"), bc.out, true)?))
                } else {
                    None
                };
                let receivers: Vec<usize> = bc.direction.pairs(cfg.modalities).iter().map(|p| p.0).collect();
                let fuse = match (bc.is_fusion_site(), bc.method) {
                    (true, FusionMethod::Concat) => FuseParams::Concat(b.conv(
                        &mut fuse_rng,
                        format!("enc.stage{}.fuse.concat", si + 1),
                        2 * bc.out,
                        bc.out,
                        1,
                        1,
                        true,
                        Some(receivers),
                    )),
                    (true, FusionMethod::Attention) => {
                        let r = if cfg.fusion.attention_bottleneck > 0 {
                            cfg.fusion.attention_bottleneck
                        } else {
                            (bc.out / 2).max(1)
                        };
                        let squeeze = b.conv(
                            &mut fuse_rng,
                            format!("enc.stage{}.fuse.attn.squeeze", si + 1),
                            2 * bc.out,
                            r,
                            1,
                            1,
                            true,
                            Some(receivers.clone()),
                        );
                        let gate = b.conv(
                            &mut fuse_rng,
                            format!("enc.stage{}.fuse.attn.gate", si + 1),
                            r,
                            2 * bc.out,
                            1,
                            1,
                            true,
                            Some(receivers),
                        );
                        FuseParams::Attention { squeeze, gate }
                    }
                    _ => FuseParams::None,
                };
                stage.push(BlockLayout {
                    cfg: bc,
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    conv3,
                    bn3,
                    proj,
                    fuse,
                });
            }
            blocks.push(stage);
        }

        let dw = cfg.decoder_width;
        let last = cfg.stages.last().expect("validated").out;
        let top_conv = b.shared_conv(&mut rng, "dec.top.conv".into(), last, dw, 1, 1, false);
        let top_bn = b.norm("dec.top.bn".into(), dw, false)?;
        let mut ups = Vec::new();
        for si in (0..cfg.stages.len()).rev() {
            if cfg.stages[si].stride != 2 {
                continue;
            }
            let k = ups.len() + 1;
            let in_w = if si == 0 { cfg.stem_width } else { cfg.stages[si - 1].out };
            let lateral = b.shared_conv(&mut rng, format!("dec.up{k}.lateral"), in_w, dw, 1, 1, false);
            let conv = b.shared_conv(&mut rng, format!("dec.up{k}.conv"), dw, dw, 3, 1, false);
            let bn = b.norm(format!("dec.up{k}.bn"), dw, false)?;
            ups.push(UpStage {
                stage: si,
                lateral,
                conv,
                bn,
            });
        }
        let classifier = b.shared_conv(&mut rng, "dec.classifier".into(), dw, cfg.classes, 1, 1, true);
        Ok(Self {
            cfg: cfg.clone(),
            convs: b.convs,
            norms: b.norms,
            ensemble: Tensor::zeros([1, cfg.modalities, 1, 1]),
            stem: (stem_conv, stem_bn),
            blocks,
            decoder: Decoder {
                top_conv,
                top_bn,
                ups,
                classifier,
            },
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn modalities(&self) -> usize {
        self.cfg.modalities
    }

    pub fn convs(&self) -> &[ConvLayer] {
        &self.convs
    }

    pub fn norms(&self) -> &[NormSite] {
        &self.norms
    }

    pub fn norms_mut(&mut self) -> &mut [NormSite] {
        &mut self.norms
    }

    pub fn block_configs(&self) -> Vec<FusionBlockConfig> {
        self.blocks.iter().flatten().map(|b| b.cfg).collect()
    }

    /// Ensemble importance scores `softmax(w)`.
    pub fn alpha(&self) -> Vec<f64> {
        softmax_vec(self.ensemble.data())
    }

    /// Every learnable tensor in a fixed order.
    pub fn param_keys(&self) -> Vec<ParamKey> {
        let mut keys = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            for copy in 0..c.weights.len() {
                keys.push(ParamKey::ConvWeight { conv: i, copy });
            }
            if let Some(b) = &c.biases {
                for copy in 0..b.len() {
                    keys.push(ParamKey::ConvBias { conv: i, copy });
                }
            }
        }
        for (i, n) in self.norms.iter().enumerate() {
            for set in 0..n.norm.sets() {
                keys.push(ParamKey::Gamma { norm: i, set });
                keys.push(ParamKey::Beta { norm: i, set });
            }
        }
        keys.push(ParamKey::Ensemble);
        keys
    }

    pub fn buffer_keys(&self) -> Vec<BufferKey> {
        let mut keys = Vec::new();
        for (i, n) in self.norms.iter().enumerate() {
            for set in 0..n.norm.sets() {
                keys.push(BufferKey::RunningMean { norm: i, set });
                keys.push(BufferKey::RunningVar { norm: i, set });
            }
        }
        keys
    }

    pub fn param(&self, key: ParamKey) -> &Tensor {
        match key {
            ParamKey::ConvWeight { conv, copy } => &self.convs[conv].weights[copy],
            ParamKey::ConvBias { conv, copy } => &self.convs[conv].biases.as_ref().expect("conv has bias")[copy],
            ParamKey::Gamma { norm, set } => self.norms[norm].norm.gamma(set),
            ParamKey::Beta { norm, set } => self.norms[norm].norm.beta(set),
            ParamKey::Ensemble => &self.ensemble,
        }
    }

    pub fn param_mut(&mut self, key: ParamKey) -> &mut Tensor {
        match key {
            ParamKey::ConvWeight { conv, copy } => &mut self.convs[conv].weights[copy],
            ParamKey::ConvBias { conv, copy } => &mut self.convs[conv].biases.as_mut().expect("conv has bias")[copy],
            ParamKey::Gamma { norm, set } => self.norms[norm].norm.gamma_mut(set),
            ParamKey::Beta { norm, set } => self.norms[norm].norm.beta_mut(set),
            ParamKey::Ensemble => &mut self.ensemble,
        }
    }

    pub fn param_name(&self, key: ParamKey) -> String {
        match key {
            ParamKey::ConvWeight { conv, copy } => {
                let c = &self.convs[conv];
                format!("{}.weight{}", c.name, c.suffix(copy))
            }
            ParamKey::ConvBias { conv, copy } => {
                let c = &self.convs[conv];
                format!("{}.bias{}", c.name, c.suffix(copy))
            }
            ParamKey::Gamma { norm, set } => {
                let n = &self.norms[norm];
                format!("{}.gamma{}", n.name, n.suffix(set))
            }
            ParamKey::Beta { norm, set } => {
                let n = &self.norms[norm];
                format!("{}.beta{}", n.name, n.suffix(set))
            }
            ParamKey::Ensemble => "ensemble.logits".into(),
        }
    }

    pub fn buffer(&self, key: BufferKey) -> &[f64] {
        match key {
            BufferKey::RunningMean { norm, set } => self.norms[norm].norm.running_mean(set),
            BufferKey::RunningVar { norm, set } => self.norms[norm].norm.running_var(set),
        }
    }

    pub fn buffer_mut(&mut self, key: BufferKey) -> &mut [f64] {
        match key {
            BufferKey::RunningMean { norm, set } => self.norms[norm].norm.running_mean_mut(set),
            BufferKey::RunningVar { norm, set } => self.norms[norm].norm.running_var_mut(set),
        }
    }

    pub fn buffer_name(&self, key: BufferKey) -> String {
        match key {
            BufferKey::RunningMean { norm, set } => {
                let n = &self.norms[norm];
                format!("{}.running_mean{}", n.name, n.suffix(set))
            }
            BufferKey::RunningVar { norm, set } => {
                let n = &self.norms[norm];
                format!("{}.running_var{}", n.name, n.suffix(set))
            }
        }
    }

    /// Number of scalar learnable parameters actually held by the net.
    pub fn learnable_count(&self) -> usize {
        self.param_keys().iter().map(|&k| self.param(k).len()).sum()
    }

    pub fn commit_stats(&mut self, updates: &[StatUpdate]) {
        for u in updates {
            self.norms[u.norm].norm.update_running(u.set, &u.stats);
        }
    }

    /// Records the full forward pass on `g`. Parameters already present in
    /// `leaves` are used as given; the rest become fresh leaves. In train
    /// mode the batch statistics are returned, not applied.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        inputs: &[NodeId],
        mode: Mode,
        leaves: BTreeMap<ParamKey, NodeId>,
    ) -> Result<GraphForward> {
        self.check_inputs(inputs.iter().map(|&i| g.value(i)).collect())?;
        let s_count = self.cfg.modalities;
        let mut ctx = Ctx {
            g,
            leaves,
            mode,
            updates: Vec::new(),
        };
        let mut activations = vec![Vec::new(); s_count];

        let (sc, sb) = self.stem;
        let ys = self.conv_norm_all(&mut ctx, sc, sb, inputs)?;
        let mut xs: Vec<NodeId> = ys.into_iter().map(|y| ctx.g.relu(y)).collect();
        let mut stage_inputs = Vec::new();
        for stage in &self.blocks {
            stage_inputs.push(xs.clone());
            for block in stage {
                xs = self.block(&mut ctx, block, &xs)?;
                for (s, &x) in xs.iter().enumerate() {
                    activations[s].push(x);
                }
            }
        }
        for s in 0..s_count {
            activations[s].insert(0, stage_inputs[0][s]);
        }

        let dec = &self.decoder;
        let ys = self.conv_norm_all(&mut ctx, dec.top_conv, dec.top_bn, &xs)?;
        let mut ds: Vec<NodeId> = ys.into_iter().map(|y| ctx.g.relu(y)).collect();
        for up in &dec.ups {
            let mut sums = Vec::with_capacity(s_count);
            for (s, &d) in ds.iter().enumerate() {
                let u = ctx.g.upsample2x(d);
                let lat = self.conv(&mut ctx, up.lateral, s, stage_inputs[up.stage][s])?;
                sums.push(ctx.g.add(u, lat)?);
            }
            let ys = self.conv_norm_all(&mut ctx, up.conv, up.bn, &sums)?;
            ds = ys.into_iter().map(|y| ctx.g.relu(y)).collect();
        }
        let mut logits = Vec::with_capacity(s_count);
        let mut probs = Vec::with_capacity(s_count);
        for (s, &d) in ds.iter().enumerate() {
            let l = self.conv(&mut ctx, dec.classifier, s, d)?;
            logits.push(l);
            probs.push(ctx.g.softmax(l));
        }
        let w = self.leaf(&mut ctx, ParamKey::Ensemble);
        let ensemble = ctx.g.mixture(w, &probs)?;
        Ok(GraphForward {
            logits,
            probs,
            ensemble,
            activations,
            leaves: ctx.leaves,
            stat_updates: ctx.updates,
        })
    }

    /// Runs the network on one tensor per modality. Train mode normalizes
    /// with batch statistics and updates the running statistics.
    pub fn forward_multimodal(&mut self, inputs: &[Tensor], mode: Mode) -> Result<Prediction> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let fwd = self.forward_graph(&mut g, &ids, mode, BTreeMap::new())?;
        if mode == Mode::Train {
            self.commit_stats(&fwd.stat_updates);
        }
        Ok(self.collect(&g, &fwd))
    }

    /// Eval-mode forward; never mutates the network.
    pub fn predict(&self, inputs: &[Tensor]) -> Result<Prediction> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let fwd = self.forward_graph(&mut g, &ids, Mode::Eval, BTreeMap::new())?;
        Ok(self.collect(&g, &fwd))
    }

    fn collect(&self, g: &Graph, fwd: &GraphForward) -> Prediction {
        let vals = |ids: &[NodeId]| ids.iter().map(|&i| g.value(i).clone()).collect::<Vec<_>>();
        Prediction {
            logits: vals(&fwd.logits),
            probs: vals(&fwd.probs),
            ensemble: g.value(fwd.ensemble).clone(),
            alpha: self.alpha(),
            activations: fwd.activations.iter().map(|a| vals(a)).collect(),
        }
    }

    fn check_inputs(&self, inputs: Vec<&Tensor>) -> Result<()> {
        let op = "forward_multimodal";
        if inputs.len() != self.cfg.modalities {
            return Err(Error::dim(op, "modalities", self.cfg.modalities, inputs.len()));
        }
        let first = inputs[0];
        if first.c() != self.cfg.in_channels {
            return Err(Error::dim(op, "C", self.cfg.in_channels, first.c()));
        }
        for x in &inputs[1..] {
            crate::tensor::expect_same_shape(op, first, x)?;
        }
        let f = self.cfg.downsampling_factor();
        for (axis, v) in [("H", first.h()), ("W", first.w())] {
            if v % f != 0 {
                return Err(Error::dim(op, axis, v.div_ceil(f) * f, v));
            }
        }
        Ok(())
    }

    fn leaf(&self, ctx: &mut Ctx<'_>, key: ParamKey) -> NodeId {
        if let Some(&id) = ctx.leaves.get(&key) {
            return id;
        }
        let id = ctx.g.param(self.param(key).clone());
        ctx.leaves.insert(key, id);
        id
    }

    fn conv(&self, ctx: &mut Ctx<'_>, conv: usize, s: usize, x: NodeId) -> Result<NodeId> {
        let layer = &self.convs[conv];
        let copy = layer.copy_for(s);
        let w = self.leaf(ctx, ParamKey::ConvWeight { conv, copy });
        let b = layer
            .biases
            .is_some()
            .then(|| self.leaf(ctx, ParamKey::ConvBias { conv, copy }));
        ctx.g.conv2d(x, w, b, layer.stride, layer.pad)
    }

    fn norm(&self, ctx: &mut Ctx<'_>, norm: usize, s: usize, x: NodeId) -> Result<NodeId> {
        let site = &self.norms[norm].norm;
        let set = site.set_of(s)?;
        if ctx.g.value(x).c() != site.channels() {
            return Err(Error::dim("modality_norm", "C", site.channels(), ctx.g.value(x).c()));
        }
        let gamma = self.leaf(ctx, ParamKey::Gamma { norm, set });
        let beta = self.leaf(ctx, ParamKey::Beta { norm, set });
        match ctx.mode {
            Mode::Train => {
                let stats = batch_stats(ctx.g.value(x));
                let y = ctx.g.norm(x, gamma, beta, &stats.mean, &stats.var, site.eps(), true)?;
                ctx.updates.push(StatUpdate { norm, set, stats });
                Ok(y)
            }
            Mode::Eval => ctx.g.norm(
                x,
                gamma,
                beta,
                site.running_mean(set),
                site.running_var(set),
                site.eps(),
                false,
            ),
        }
    }

    /// One normalization per branch. A shared set normalizes all branches
    /// as a single batch in train mode, so the statistics it trains with
    /// are the ones its running averages estimate.
    fn norm_all(&self, ctx: &mut Ctx<'_>, norm: usize, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let site = &self.norms[norm].norm;
        if site.mode() == NormMode::Private || xs.len() == 1 || ctx.mode == Mode::Eval {
            return xs.iter().enumerate().map(|(s, &x)| self.norm(ctx, norm, s, x)).collect();
        }
        let sizes: Vec<usize> = xs.iter().map(|&x| ctx.g.value(x).n()).collect();
        let stacked = ctx.g.batch_concat(xs)?;
        let y = self.norm(ctx, norm, 0, stacked)?;
        let mut out = Vec::with_capacity(xs.len());
        let mut lo = 0;
        for n in sizes {
            out.push(ctx.g.batch_slice(y, lo, lo + n)?);
            lo += n;
        }
        Ok(out)
    }

    fn conv_norm_all(&self, ctx: &mut Ctx<'_>, conv: usize, norm: usize, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let ys = xs
            .iter()
            .enumerate()
            .map(|(s, &x)| self.conv(ctx, conv, s, x))
            .collect::<Result<Vec<_>>>()?;
        self.norm_all(ctx, norm, &ys)
    }

    fn shuffle(ctx: &mut Ctx<'_>, h: &[NodeId], pairs: &[(usize, usize)], t: usize) -> Result<Vec<NodeId>> {
        let mut out = h.to_vec();
        for &(r, d) in pairs {
            out[r] = ctx.g.mix_channels(h[r], h[d], t)?;
        }
        Ok(out)
    }

    fn block(&self, ctx: &mut Ctx<'_>, b: &BlockLayout, xs: &[NodeId]) -> Result<Vec<NodeId>> {
        let s_count = xs.len();
        let pairs = b.cfg.direction.pairs(s_count);
        let split = b.cfg.split_point()?;

        let ys = self.conv_norm_all(ctx, b.conv1, b.bn1, xs)?;
        let mut h: Vec<NodeId> = ys.into_iter().map(|y| ctx.g.relu(y)).collect();
        if let Some(t) = split {
            h = Self::shuffle(ctx, &h, &pairs, t)?;
        }
        let mut donated: Vec<Option<NodeId>> = vec![None; s_count];
        if b.cfg.cross_add() {
            for &(_, d) in &pairs {
                if donated[d].is_none() {
                    donated[d] = Some(match &b.cfg.shift {
                        Some(spec) => ctx.g.pixel_shift(h[d], spec)?,
                        None => h[d],
                    });
                }
            }
        }
        let ys = self.conv_norm_all(ctx, b.conv2, b.bn2, &h)?;
        let mut gs: Vec<NodeId> = ys.into_iter().map(|y| ctx.g.relu(y)).collect();
        if b.cfg.cross_add() {
            for &(r, d) in &pairs {
                gs[r] = ctx.g.add(gs[r], donated[d].expect("computed above"))?;
            }
        }
        if let Some(t) = split {
            gs = Self::shuffle(ctx, &gs, &pairs, t)?;
        }
        let ys = self.conv_norm_all(ctx, b.conv3, b.bn3, &gs)?;
        let shortcuts = match b.proj {
            Some((pc, pb)) => self.conv_norm_all(ctx, pc, pb, xs)?,
            None => xs.to_vec(),
        };
        let mut outs = Vec::with_capacity(s_count);
        for (&y, &sc) in ys.iter().zip(&shortcuts) {
            let sum = ctx.g.add(y, sc)?;
            outs.push(ctx.g.relu(sum));
        }
        if b.cfg.is_fusion_site() && b.cfg.method != FusionMethod::AsymFusion {
            outs = self.symmetric_fuse(ctx, b, &outs, &pairs)?;
        }
        Ok(outs)
    }

    fn symmetric_fuse(
        &self,
        ctx: &mut Ctx<'_>,
        b: &BlockLayout,
        outs: &[NodeId],
        pairs: &[(usize, usize)],
    ) -> Result<Vec<NodeId>> {
        let mut fused = outs.to_vec();
        for &(r, d) in pairs {
            let (a, o) = (outs[r], outs[d]);
            fused[r] = match (b.cfg.method, b.fuse) {
                (FusionMethod::Average, _) => {
                    let sum = ctx.g.add(a, o)?;
                    ctx.g.scale(sum, 0.5)
                }
                (FusionMethod::Add, _) => ctx.g.add(a, o)?,
                (FusionMethod::Concat, FuseParams::Concat(conv)) => {
                    let z = ctx.g.channel_concat(a, o)?;
                    self.conv(ctx, conv, r, z)?
                }
                (FusionMethod::Attention, FuseParams::Attention { squeeze, gate }) => {
                    let c = ctx.g.value(a).c();
                    let z = ctx.g.channel_concat(a, o)?;
                    let hid = self.conv(ctx, squeeze, r, z)?;
                    let hid = ctx.g.relu(hid);
                    let gl = self.conv(ctx, gate, r, hid)?;
                    let gates = ctx.g.sigmoid(gl);
                    let g1 = ctx.g.channel_slice(gates, 1, c)?;
                    let g2 = ctx.g.channel_slice(gates, c + 1, 2 * c)?;
                    let ma = ctx.g.mul(g1, a)?;
                    let mo = ctx.g.mul(g2, o)?;
                    ctx.g.add(ma, mo)?
                }
                _ => unreachable!("fusion parameters match the method"),
            };
        }
        Ok(fused)
    }
}
