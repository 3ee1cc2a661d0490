//! Transform building blocks.
//!
//! STB (spatial transform block) wraps a self-conditioned spatial transform
//! (SCST): a depthwise convolution with a large kernel (9 or 11) whose
//! per-sample weights are generated from a 3x3 average-pooled summary of
//! the block's own input. CTB (channel transform block) has the same
//! skeleton with the spatial transform replaced by per-channel scaling
//! factors (SCCT). Both use a depthwise residual bottleneck (DepthRB) for
//! non-linear embedding and a split-and-multiply Gate for cheap point-wise
//! interactions. All residual blocks are exact identities at zero init.

use crate::nn::{
    adaptive_avg_pool, broadcast_batch, channel_split, conv2d, conv2d_dynamic_depthwise,
    channel_concat, gelu_tanh, layer_norm, leaky_relu, mul_channel_factors, pixel_shuffle,
    ConvSpec,
};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Per-block architectural switches. `cond_hidden == 0` means "same as the
/// block's channel count".
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockConfig {
    pub channels: usize,
    pub kernel: usize,
    pub cond_hidden: usize,
    pub static_weights: bool,
    pub use_ffn: bool,
    pub linear_embedding: bool,
    pub disable_stb: bool,
    pub disable_ctb: bool,
    pub swap_stb_ctb: bool,
}

impl BlockConfig {
    pub fn new(channels: usize, kernel: usize) -> Self {
        assert!(kernel % 2 == 1, "block kernel size must be odd, got {kernel}");
        BlockConfig {
            channels,
            kernel,
            cond_hidden: 0,
            static_weights: false,
            use_ffn: false,
            linear_embedding: false,
            disable_stb: false,
            disable_ctb: false,
            swap_stb_ctb: false,
        }
    }

    pub fn cond_hidden_width(&self) -> usize {
        if self.cond_hidden == 0 {
            self.channels
        } else {
            self.cond_hidden
        }
    }
}

/// Convolution layer: spec plus parameter handles.
pub struct Conv2dLayer {
    pub spec: ConvSpec,
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Conv2dLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, spec: ConvSpec, bias: bool) -> Self {
        let fan_in = (spec.in_channels / spec.groups) * spec.kernel * spec.kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w = pb.uniform(&format!("{name}.w"), spec.weight_shape(), bound);
        let b = bias.then(|| pb.uniform(&format!("{name}.b"), vec![spec.out_channels], bound));
        Conv2dLayer { spec, w, b }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let w = ps.lift(self.w, x.tape());
        let b = self.b.map(|id| ps.lift(id, x.tape()));
        conv2d(x, &w, b.as_ref(), &self.spec)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.w);
        if let Some(b) = self.b {
            out.push(b);
        }
    }
}

pub struct LayerNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormLayer {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        LayerNormLayer {
            gamma: pb.constant(&format!("{name}.gamma"), vec![channels], 1.0),
            beta: pb.constant(&format!("{name}.beta"), vec![channels], 0.0),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let g = ps.lift(self.gamma, x.tape());
        let b = ps.lift(self.beta, x.tape());
        layer_norm(x, &g, &b)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        out.push(self.gamma);
        out.push(self.beta);
    }
}

/// Depth-wise residual bottleneck: Conv1x1 -> act -> DWConv3x3 -> act ->
/// Conv1x1, plus the skip from the input.
pub struct DepthRb {
    conv1: Conv2dLayer,
    dw: Conv2dLayer,
    conv2: Conv2dLayer,
}

impl DepthRb {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        DepthRb {
            conv1: Conv2dLayer::new(pb, &format!("{name}.conv1"), ConvSpec::same(channels, channels, 1), true),
            dw: Conv2dLayer::new(pb, &format!("{name}.dw"), ConvSpec::depthwise(channels, 3), true),
            conv2: Conv2dLayer::new(pb, &format!("{name}.conv2"), ConvSpec::same(channels, channels, 1), true),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let t = leaky_relu(&self.conv1.forward(ps, x));
        let t = leaky_relu(&self.dw.forward(ps, &t));
        let t = self.conv2.forward(ps, &t);
        t.add(x)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv1.collect_params(out);
        self.dw.collect_params(out);
        self.conv2.collect_params(out);
    }
}

/// Split-and-multiply gate: Conv1x1 to 2c, split, Hadamard product,
/// Conv1x1 back to c, residual add.
pub struct GateBlock {
    expand: Conv2dLayer,
    proj: Conv2dLayer,
}

impl GateBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        GateBlock {
            expand: Conv2dLayer::new(pb, &format!("{name}.expand"), ConvSpec::same(channels, 2 * channels, 1), true),
            proj: Conv2dLayer::new(pb, &format!("{name}.proj"), ConvSpec::same(channels, channels, 1), true),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let wide = self.expand.forward(ps, x);
        let (a, b) = channel_split(&wide);
        let act = a.mul(&b);
        self.proj.forward(ps, &act).add(x)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.expand.collect_params(out);
        self.proj.collect_params(out);
    }
}

/// GELU feed-forward block (ablation baseline for the gate).
pub struct FfnBlock {
    expand: Conv2dLayer,
    proj: Conv2dLayer,
}

impl FfnBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, channels: usize) -> Self {
        FfnBlock {
            expand: Conv2dLayer::new(pb, &format!("{name}.expand"), ConvSpec::same(channels, 2 * channels, 1), true),
            proj: Conv2dLayer::new(pb, &format!("{name}.proj"), ConvSpec::same(2 * channels, channels, 1), true),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let wide = gelu_tanh(&self.expand.forward(ps, x));
        self.proj.forward(ps, &wide).add(x)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.expand.collect_params(out);
        self.proj.collect_params(out);
    }
}

enum PointwiseMixer {
    Gate(GateBlock),
    Ffn(FfnBlock),
}

impl PointwiseMixer {
    fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig) -> Self {
        if cfg.use_ffn {
            PointwiseMixer::Ffn(FfnBlock::new(pb, name, cfg.channels))
        } else {
            PointwiseMixer::Gate(GateBlock::new(pb, name, cfg.channels))
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        match self {
            PointwiseMixer::Gate(g) => g.forward(ps, x),
            PointwiseMixer::Ffn(f) => f.forward(ps, x),
        }
    }

    fn collect_params(&self, out: &mut Vec<ParamId>) {
        match self {
            PointwiseMixer::Gate(g) => g.collect_params(out),
            PointwiseMixer::Ffn(f) => f.collect_params(out),
        }
    }
}

enum Embedding {
    DepthRb(DepthRb),
    Linear(Conv2dLayer),
}

impl Embedding {
    fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig) -> Self {
        if cfg.linear_embedding {
            Embedding::Linear(Conv2dLayer::new(
                pb,
                &format!("{name}.linear"),
                ConvSpec::same(cfg.channels, cfg.channels, 1),
                true,
            ))
        } else {
            Embedding::DepthRb(DepthRb::new(pb, name, cfg.channels))
        }
    }

    fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        match self {
            Embedding::DepthRb(d) => d.forward(ps, x),
            Embedding::Linear(c) => c.forward(ps, x),
        }
    }

    fn collect_params(&self, out: &mut Vec<ParamId>) {
        match self {
            Embedding::DepthRb(d) => d.collect_params(out),
            Embedding::Linear(c) => c.collect_params(out),
        }
    }
}

/// Self-conditioned spatial transform. The condition branch pools the
/// input to 3x3, applies a valid Conv3x3 down to 1x1 and a Conv1x1 up to
/// c*K^2 channels, and reshapes the result into one K x K depthwise kernel
/// per sample and channel. With `static_weights` the kernels are a learned
/// parameter shared across the batch and the condition branch is absent.
pub struct Scst {
    channels: usize,
    kernel: usize,
    main: Conv2dLayer,
    cond: Option<(Conv2dLayer, Conv2dLayer)>,
    static_kernels: Option<ParamId>,
}

impl Scst {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        let k = cfg.kernel;
        let main = Conv2dLayer::new(pb, &format!("{name}.main"), ConvSpec::same(c, c, 1), true);
        if cfg.static_weights {
            let bound = 1.0 / k as f64;
            let kernels = pb.uniform(&format!("{name}.kernels"), vec![c, k, k], bound);
            Scst {
                channels: c,
                kernel: k,
                main,
                cond: None,
                static_kernels: Some(kernels),
            }
        } else {
            let hidden = cfg.cond_hidden_width();
            let conv3 = Conv2dLayer::new(
                pb,
                &format!("{name}.cond3"),
                ConvSpec::new(c, hidden, 3, 1, 0, 1),
                true,
            );
            let conv1 = Conv2dLayer::new(
                pb,
                &format!("{name}.cond1"),
                ConvSpec::same(hidden, c * k * k, 1),
                true,
            );
            Scst {
                channels: c,
                kernel: k,
                main,
                cond: Some((conv3, conv1)),
                static_kernels: None,
            }
        }
    }

    /// The per-sample kernels (n, c, K, K).
    pub fn kernels(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let (n, _, _, _) = x.dims4();
        match (&self.cond, self.static_kernels) {
            (Some((conv3, conv1)), None) => {
                let pooled = adaptive_avg_pool(x, 3, 3);
                let hidden = conv3.forward(ps, &pooled); // (n, hidden, 1, 1)
                let flat = conv1.forward(ps, &hidden); // (n, c*K*K, 1, 1)
                flat.reshape(vec![n, self.channels, self.kernel, self.kernel])
            }
            (None, Some(pid)) => {
                let w = ps.lift(pid, x.tape());
                broadcast_batch(&w, n)
            }
            _ => unreachable!(),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let (_, _, h, w) = x.dims4();
        assert!(h >= 3 && w >= 3, "scst requires input of at least 3x3, got {h}x{w}");
        let kernels = self.kernels(ps, x);
        let main = self.main.forward(ps, x);
        conv2d_dynamic_depthwise(&main, &kernels)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.main.collect_params(out);
        if let Some((c3, c1)) = &self.cond {
            c3.collect_params(out);
            c1.collect_params(out);
        }
        if let Some(k) = self.static_kernels {
            out.push(k);
        }
    }

    pub fn condition_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        if let Some((c3, c1)) = &self.cond {
            c3.collect_params(&mut out);
            c1.collect_params(&mut out);
        }
        out
    }
}

/// Self-conditioned channel transform: per-sample per-channel scaling
/// factors generated from the pooled input.
pub struct Scct {
    main: Conv2dLayer,
    cond3: Conv2dLayer,
    cond1: Conv2dLayer,
    channels: usize,
}

impl Scct {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        let hidden = cfg.cond_hidden_width();
        Scct {
            main: Conv2dLayer::new(pb, &format!("{name}.main"), ConvSpec::same(c, c, 1), true),
            cond3: Conv2dLayer::new(pb, &format!("{name}.cond3"), ConvSpec::new(c, hidden, 3, 1, 0, 1), true),
            cond1: Conv2dLayer::new(pb, &format!("{name}.cond1"), ConvSpec::same(hidden, c, 1), true),
            channels: c,
        }
    }

    pub fn factors(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let (n, _, _, _) = x.dims4();
        let pooled = adaptive_avg_pool(x, 3, 3);
        let hidden = self.cond3.forward(ps, &pooled);
        let f = self.cond1.forward(ps, &hidden);
        debug_assert_eq!(f.shape(), &[n, self.channels, 1, 1]);
        f
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let (_, _, h, w) = x.dims4();
        assert!(h >= 3 && w >= 3, "scct requires input of at least 3x3, got {h}x{w}");
        let factors = self.factors(ps, x);
        let main = self.main.forward(ps, x);
        mul_channel_factors(&main, &factors)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.main.collect_params(out);
        self.cond3.collect_params(out);
        self.cond1.collect_params(out);
    }

    pub fn condition_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        self.cond3.collect_params(&mut out);
        self.cond1.collect_params(&mut out);
        out
    }
}

/// Spatial transform block:
///   u   = Embed(Norm(x))
///   v   = Conv1x1(SCST(u)) + x
///   out = Mix(Norm(v)) + v
pub struct Stb {
    norm1: LayerNormLayer,
    embed: Embedding,
    scst: Scst,
    proj: Conv2dLayer,
    norm2: LayerNormLayer,
    mixer: PointwiseMixer,
}

impl Stb {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        Stb {
            norm1: LayerNormLayer::new(pb, &format!("{name}.norm1"), c),
            embed: Embedding::new(pb, &format!("{name}.embed"), cfg),
            scst: Scst::new(pb, &format!("{name}.scst"), cfg),
            proj: Conv2dLayer::new(pb, &format!("{name}.proj"), ConvSpec::same(c, c, 1), true),
            norm2: LayerNormLayer::new(pb, &format!("{name}.norm2"), c),
            mixer: PointwiseMixer::new(pb, &format!("{name}.mix"), cfg),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let u = self.embed.forward(ps, &self.norm1.forward(ps, x));
        let v = self.proj.forward(ps, &self.scst.forward(ps, &u)).add(x);
        self.mixer.forward(ps, &self.norm2.forward(ps, &v)).add(&v)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.norm1.collect_params(out);
        self.embed.collect_params(out);
        self.scst.collect_params(out);
        self.proj.collect_params(out);
        self.norm2.collect_params(out);
        self.mixer.collect_params(out);
    }

    pub fn scst(&self) -> &Scst {
        &self.scst
    }
}

/// Channel transform block: the STB skeleton with SCCT in place of SCST.
pub struct Ctb {
    norm1: LayerNormLayer,
    embed: Embedding,
    scct: Scct,
    proj: Conv2dLayer,
    norm2: LayerNormLayer,
    mixer: PointwiseMixer,
}

impl Ctb {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig) -> Self {
        let c = cfg.channels;
        Ctb {
            norm1: LayerNormLayer::new(pb, &format!("{name}.norm1"), c),
            embed: Embedding::new(pb, &format!("{name}.embed"), cfg),
            scct: Scct::new(pb, &format!("{name}.scct"), cfg),
            proj: Conv2dLayer::new(pb, &format!("{name}.proj"), ConvSpec::same(c, c, 1), true),
            norm2: LayerNormLayer::new(pb, &format!("{name}.norm2"), c),
            mixer: PointwiseMixer::new(pb, &format!("{name}.mix"), cfg),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let u = self.embed.forward(ps, &self.norm1.forward(ps, x));
        let v = self.proj.forward(ps, &self.scct.forward(ps, &u)).add(x);
        self.mixer.forward(ps, &self.norm2.forward(ps, &v)).add(&v)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.norm1.collect_params(out);
        self.embed.collect_params(out);
        self.scct.collect_params(out);
        self.proj.collect_params(out);
        self.norm2.collect_params(out);
        self.mixer.collect_params(out);
    }

    pub fn scct(&self) -> &Scct {
        &self.scct
    }
}

/// STB followed by CTB in the forward (analysis) direction; the inverse
/// (synthesis) direction switches their positions. Ablation switches can
/// drop either block or swap them globally.
pub struct BasicBlock {
    stb: Option<Stb>,
    ctb: Option<Ctb>,
    stb_first: bool,
}

impl BasicBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cfg: &BlockConfig, inverse: bool) -> Self {
        assert!(
            !(cfg.disable_stb && cfg.disable_ctb),
            "basic block cannot disable both STB and CTB"
        );
        let stb = (!cfg.disable_stb).then(|| Stb::new(pb, &format!("{name}.stb"), cfg));
        let ctb = (!cfg.disable_ctb).then(|| Ctb::new(pb, &format!("{name}.ctb"), cfg));
        let mut stb_first = !inverse;
        if cfg.swap_stb_ctb {
            stb_first = !stb_first;
        }
        BasicBlock { stb, ctb, stb_first }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let apply_stb = |t: &Tensor| self.stb.as_ref().map_or_else(|| t.clone(), |s| s.forward(ps, t));
        let apply_ctb = |t: &Tensor| self.ctb.as_ref().map_or_else(|| t.clone(), |c| c.forward(ps, t));
        if self.stb_first {
            apply_ctb(&apply_stb(x))
        } else {
            apply_stb(&apply_ctb(x))
        }
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        if let Some(s) = &self.stb {
            s.collect_params(out);
        }
        if let Some(c) = &self.ctb {
            c.collect_params(out);
        }
    }

    pub fn stb(&self) -> Option<&Stb> {
        self.stb.as_ref()
    }
}

/// Stride-2 Conv5x5 followed by a DepthRB; halves the resolution.
pub struct DownsampleBlock {
    conv: Conv2dLayer,
    drb: DepthRb,
}

impl DownsampleBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        DownsampleBlock {
            conv: Conv2dLayer::new(pb, &format!("{name}.conv"), ConvSpec::new(cin, cout, 5, 2, 2, 1), true),
            drb: DepthRb::new(pb, &format!("{name}.drb"), cout),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let (_, _, h, w) = x.dims4();
        assert!(h % 2 == 0 && w % 2 == 0, "downsample requires even extents, got {h}x{w}");
        self.drb.forward(ps, &self.conv.forward(ps, x))
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv.collect_params(out);
        self.drb.collect_params(out);
    }
}

/// Conv3x3 to 4*cout channels, pixel shuffle by 2, then a DepthRB; doubles
/// the resolution.
pub struct UpsampleBlock {
    conv: Conv2dLayer,
    drb: DepthRb,
}

impl UpsampleBlock {
    pub fn new(pb: &mut ParamBuilder, name: &str, cin: usize, cout: usize) -> Self {
        UpsampleBlock {
            conv: Conv2dLayer::new(pb, &format!("{name}.conv"), ConvSpec::same(cin, 4 * cout, 3), true),
            drb: DepthRb::new(pb, &format!("{name}.drb"), cout),
        }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let up = pixel_shuffle(&self.conv.forward(ps, x), 2);
        self.drb.forward(ps, &up)
    }

    pub fn collect_params(&self, out: &mut Vec<ParamId>) {
        self.conv.collect_params(out);
        self.drb.collect_params(out);
    }
}

/// Concatenate helper re-exported for the hyper-synthesis head.
pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
    channel_concat(a, b)
}
