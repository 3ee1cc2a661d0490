//! The full compression model: four-stage analysis/synthesis transforms
//! built from basic blocks, hyper-transforms, quantization and the
//! mean-scale entropy model.
//!
//! Layout conventions:
//!   - g_a stages: downsample then basic blocks; channels 3 -> N -> N -> N -> M.
//!   - g_s mirrors g_a exactly: inverse basic blocks then upsample per
//!     stage; channels M -> N -> N -> N -> 3; kernel schedule reversed.
//!   - h_a: Conv3x3, two stride-2 Conv5x5 (M -> hyper width, spatial /4).
//!   - h_s: two (Conv3x3 + pixel shuffle) upsamplings and a Conv3x3 head
//!     to 2M channels, split into (mu, sigma_raw);
//!     sigma = clamp(softplus(sigma_raw), 0.11, 256).
//!   - z quantizes around zero; y quantizes around its predicted mean.

use std::rc::Rc;

use crate::blocks::{BasicBlock, BlockConfig, Conv2dLayer, DownsampleBlock, UpsampleBlock};
use crate::math::{fnv1a64, gaussian_bin_mass, normal_pdf, Rng};
use crate::nn::{channel_split, leaky_relu, pixel_shuffle, ConvSpec};
use crate::params::{ParamBuilder, ParamId, ParamStore};
use crate::tensor::{record, Tape, Tensor};

pub const SIGMA_MIN: f64 = 0.11;
pub const SIGMA_MAX: f64 = 256.0;
pub const LIKELIHOOD_FLOOR: f64 = 1e-9;
/// Bias init of the sigma half of the hyper-synthesis head:
/// softplus(SIGMA_RAW_INIT) = 4.
pub const SIGMA_RAW_INIT: f64 = 3.981498624632489;
const LN2: f64 = std::f64::consts::LN_2;

/// Full architectural description. The digest of the canonical string ties
/// checkpoints and bitstreams to one architecture.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Transform width N.
    pub n: usize,
    /// Latent channel count M.
    pub m: usize,
    /// Hyper-latent channel count.
    pub hyper: usize,
    /// Per-stage kernel schedule of the analysis transform.
    pub kernels_ga: [usize; 4],
    /// Per-stage kernel schedule of the synthesis transform.
    pub kernels_gs: [usize; 4],
    pub blocks_per_stage: usize,
    /// Condition-branch hidden width; 0 means "same as block channels".
    pub cond_hidden: usize,
    pub static_weights: bool,
    pub use_ffn: bool,
    pub linear_embedding: bool,
    pub disable_stb: bool,
    pub disable_ctb: bool,
    pub swap_stb_ctb: bool,
}

impl ModelConfig {
    /// Full-size configuration (N = 192, M = 320, hyper = 192,
    /// K = {11, 11, 9, 9}).
    pub fn full() -> Self {
        ModelConfig {
            n: 192,
            m: 320,
            hyper: 192,
            kernels_ga: [11, 11, 9, 9],
            kernels_gs: [9, 9, 11, 11],
            blocks_per_stage: 1,
            cond_hidden: 0,
            static_weights: false,
            use_ffn: false,
            linear_embedding: false,
            disable_stb: false,
            disable_ctb: false,
            swap_stb_ctb: false,
        }
    }

    /// Desk-scale preset: same topology, narrow widths (N = 32, M = 48).
    pub fn desk() -> Self {
        ModelConfig {
            n: 32,
            m: 48,
            hyper: 32,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.n == 0 || self.m == 0 || self.hyper == 0 {
            return Err("channel widths must be positive".into());
        }
        for k in self.kernels_ga.iter().chain(self.kernels_gs.iter()) {
            if k % 2 == 0 {
                return Err(format!("kernel sizes must be odd, got {k}"));
            }
        }
        if self.blocks_per_stage == 0 {
            return Err("blocks_per_stage must be at least 1".into());
        }
        if self.disable_stb && self.disable_ctb {
            return Err("cannot disable both STB and CTB".into());
        }
        Ok(())
    }

    pub fn canonical_string(&self) -> String {
        fn ks(k: &[usize; 4]) -> String {
            k.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }
        format!(
            "v1;n={};m={};hyper={};kga={};kgs={};bps={};ch={};static={};ffn={};lin={};nostb={};noctb={};swap={}",
            self.n,
            self.m,
            self.hyper,
            ks(&self.kernels_ga),
            ks(&self.kernels_gs),
            self.blocks_per_stage,
            self.cond_hidden,
            self.static_weights as u8,
            self.use_ffn as u8,
            self.linear_embedding as u8,
            self.disable_stb as u8,
            self.disable_ctb as u8,
            self.swap_stb_ctb as u8,
        )
    }

    pub fn digest(&self) -> u64 {
        fnv1a64(self.canonical_string().as_bytes())
    }

    /// Numeric field vector for embedding the config in checkpoints.
    pub fn to_values(&self) -> Vec<f64> {
        let mut v = vec![self.n as f64, self.m as f64, self.hyper as f64];
        v.extend(self.kernels_ga.iter().map(|&k| k as f64));
        v.extend(self.kernels_gs.iter().map(|&k| k as f64));
        v.push(self.blocks_per_stage as f64);
        v.push(self.cond_hidden as f64);
        for b in [
            self.static_weights,
            self.use_ffn,
            self.linear_embedding,
            self.disable_stb,
            self.disable_ctb,
            self.swap_stb_ctb,
        ] {
            v.push(b as u8 as f64);
        }
        v
    }

    pub fn from_values(v: &[f64]) -> Result<Self, String> {
        if v.len() != 19 {
            return Err(format!("config vector must have 19 entries, got {}", v.len()));
        }
        let u = |x: f64| x as usize;
        let b = |x: f64| x != 0.0;
        let cfg = ModelConfig {
            n: u(v[0]),
            m: u(v[1]),
            hyper: u(v[2]),
            kernels_ga: [u(v[3]), u(v[4]), u(v[5]), u(v[6])],
            kernels_gs: [u(v[7]), u(v[8]), u(v[9]), u(v[10])],
            blocks_per_stage: u(v[11]),
            cond_hidden: u(v[12]),
            static_weights: b(v[13]),
            use_ffn: b(v[14]),
            linear_embedding: b(v[15]),
            disable_stb: b(v[16]),
            disable_ctb: b(v[17]),
            swap_stb_ctb: b(v[18]),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn block_config(&self, channels: usize, kernel: usize) -> BlockConfig {
        BlockConfig {
            channels,
            kernel,
            cond_hidden: self.cond_hidden,
            static_weights: self.static_weights,
            use_ffn: self.use_ffn,
            linear_embedding: self.linear_embedding,
            disable_stb: self.disable_stb,
            disable_ctb: self.disable_ctb,
            swap_stb_ctb: self.swap_stb_ctb,
        }
    }

    /// Output channels of each analysis stage.
    pub fn stage_channels(&self) -> [usize; 4] {
        [self.n, self.n, self.n, self.m]
    }
}

struct GaStage {
    down: DownsampleBlock,
    blocks: Vec<BasicBlock>,
}

struct GsStage {
    blocks: Vec<BasicBlock>,
    up: UpsampleBlock,
}

struct HyperAnalysis {
    conv1: Conv2dLayer,
    conv2: Conv2dLayer,
    conv3: Conv2dLayer,
}

struct HyperSynthesis {
    up1: Conv2dLayer,
    up2: Conv2dLayer,
    head: Conv2dLayer,
}

/// Per-element Gaussian parameters predicted by the hyper-synthesis.
pub struct GaussianParams {
    pub mu: Tensor,
    pub sigma: Tensor,
}

pub struct Model {
    pub config: ModelConfig,
    ga: Vec<GaStage>,
    gs: Vec<GsStage>,
    ha: HyperAnalysis,
    hs: HyperSynthesis,
    pub prior_loc: ParamId,
    pub prior_log_scale: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct ForwardOutput {
    pub xhat: Tensor,
    /// Total bits for y and z under the entropy model (scalar tensors,
    /// differentiable in train mode).
    pub bits_y: Tensor,
    pub bits_z: Tensor,
    /// Noise-quantized latents in train mode; rounded in eval mode.
    pub y_coded: Tensor,
    pub z_hat: Tensor,
    pub gauss: GaussianParams,
}

impl Model {
    pub fn build(config: ModelConfig, seed: u64) -> (Model, ParamStore) {
        config.validate().expect("invalid model config");
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut pb = ParamBuilder::new(&mut store, &mut rng);
        let (n, m, h) = (config.n, config.m, config.hyper);
        let stage_ch = config.stage_channels();

        let mut ga = Vec::new();
        let mut cin = 3;
        for s in 0..4 {
            let cout = stage_ch[s];
            let down = DownsampleBlock::new(&mut pb, &format!("ga.s{s}.down"), cin, cout);
            let bcfg = config.block_config(cout, config.kernels_ga[s]);
            let blocks = (0..config.blocks_per_stage)
                .map(|j| BasicBlock::new(&mut pb, &format!("ga.s{s}.b{j}"), &bcfg, false))
                .collect();
            ga.push(GaStage { down, blocks });
            cin = cout;
        }

        let mut gs = Vec::new();
        for s in 0..4 {
            let ch = if s == 0 { m } else { n };
            let cout = if s == 3 { 3 } else { n };
            let bcfg = config.block_config(ch, config.kernels_gs[s]);
            let blocks = (0..config.blocks_per_stage)
                .map(|j| BasicBlock::new(&mut pb, &format!("gs.s{s}.b{j}"), &bcfg, true))
                .collect();
            let up = UpsampleBlock::new(&mut pb, &format!("gs.s{s}.up"), ch, cout);
            gs.push(GsStage { blocks, up });
        }

        let ha = HyperAnalysis {
            conv1: Conv2dLayer::new(&mut pb, "ha.conv1", ConvSpec::same(m, h, 3), true),
            conv2: Conv2dLayer::new(&mut pb, "ha.conv2", ConvSpec::new(h, h, 5, 2, 2, 1), true),
            conv3: Conv2dLayer::new(&mut pb, "ha.conv3", ConvSpec::new(h, h, 5, 2, 2, 1), true),
        };
        let hs = HyperSynthesis {
            up1: Conv2dLayer::new(&mut pb, "hs.up1", ConvSpec::same(h, 4 * h, 3), true),
            up2: Conv2dLayer::new(&mut pb, "hs.up2", ConvSpec::same(h, 4 * m, 3), true),
            head: Conv2dLayer::new(&mut pb, "hs.head", ConvSpec::same(m, 2 * m, 3), true),
        };
        let prior_loc = pb.constant("prior.loc", vec![h], 0.0);
        let prior_log_scale = pb.constant("prior.log_scale", vec![h], 0.0);

        // Start the scale prediction wide enough to span the latent's init
        // spread; a small initial sigma floors most likelihoods and makes
        // the coder escape constantly on untrained weights.
        let sigma_bias = hs.head.b.expect("hyper head has a bias");
        let mut bias = store.value(sigma_bias).to_vec();
        for v in bias[m..].iter_mut() {
            *v = SIGMA_RAW_INIT;
        }
        store.set_value(sigma_bias, bias);

        (
            Model {
                config,
                ga,
                gs,
                ha,
                hs,
                prior_loc,
                prior_log_scale,
            },
            store,
        )
    }

    /// g_a: image (n, 3, h, w) with h, w multiples of 16 -> latent
    /// (n, M, h/16, w/16).
    pub fn analysis(&self, ps: &ParamStore, x: &Tensor) -> Tensor {
        let (_, c, h, w) = x.dims4();
        assert_eq!(c, 3, "analysis transform expects RGB input");
        assert!(
            h % 16 == 0 && w % 16 == 0,
            "analysis input must be padded to multiples of 16, got {h}x{w}"
        );
        assert!(
            h >= 48 && w >= 48,
            "analysis input must be at least 48x48 (latent >= 3x3), got {h}x{w}"
        );
        let mut t = x.clone();
        for stage in &self.ga {
            t = stage.down.forward(ps, &t);
            for b in &stage.blocks {
                t = b.forward(ps, &t);
            }
        }
        t
    }

    /// g_s: latent (n, M, h/16, w/16) -> image (n, 3, h, w). Output clamped
    /// to [0, 1] only when `clamp_output` (inference).
    pub fn synthesis(&self, ps: &ParamStore, y: &Tensor, clamp_output: bool) -> Tensor {
        let mut t = y.clone();
        for stage in &self.gs {
            for b in &stage.blocks {
                t = b.forward(ps, &t);
            }
            t = stage.up.forward(ps, &t);
        }
        if clamp_output {
            t.clamp(0.0, 1.0)
        } else {
            t
        }
    }

    /// h_a: latent y -> hyper-latent z (spatial /4). Latent extents that
    /// are not multiples of 4 are replicate-padded first (inference only;
    /// training resolutions keep the latent divisible by 4).
    pub fn hyper_analysis(&self, ps: &ParamStore, y: &Tensor) -> Tensor {
        let (_, _, h, w) = y.dims4();
        let th = h.div_ceil(4) * 4;
        let tw = w.div_ceil(4) * 4;
        let y = if th != h || tw != w {
            crate::nn::replicate_pad(y, th, tw)
        } else {
            y.clone()
        };
        let t = leaky_relu(&self.ha.conv1.forward(ps, &y));
        let t = leaky_relu(&self.ha.conv2.forward(ps, &t));
        self.ha.conv3.forward(ps, &t)
    }

    /// h_s: quantized hyper-latent -> per-element (mu, sigma) for y at the
    /// given latent resolution (crops away the /4 alignment padding).
    pub fn hyper_synthesis_at(
        &self,
        ps: &ParamStore,
        z_hat: &Tensor,
        latent_h: usize,
        latent_w: usize,
    ) -> GaussianParams {
        let t = leaky_relu(&pixel_shuffle(&self.hs.up1.forward(ps, z_hat), 2));
        let t = leaky_relu(&pixel_shuffle(&self.hs.up2.forward(ps, &t), 2));
        let both = self.hs.head.forward(ps, &t);
        let (_, _, h, w) = both.dims4();
        let both = if h != latent_h || w != latent_w {
            crate::nn::crop(&both, latent_h, latent_w)
        } else {
            both
        };
        let (mu, sigma_raw) = channel_split(&both);
        let sigma = sigma_raw.softplus().clamp(SIGMA_MIN, SIGMA_MAX);
        GaussianParams { mu, sigma }
    }

    /// h_s at the natural (uncropped) resolution 4x the hyper-latent.
    pub fn hyper_synthesis(&self, ps: &ParamStore, z_hat: &Tensor) -> GaussianParams {
        let (_, _, zh, zw) = z_hat.dims4();
        self.hyper_synthesis_at(ps, z_hat, 4 * zh, 4 * zw)
    }

    /// Per-channel prior for z with positive scale.
    pub fn prior(&self, ps: &ParamStore, tape: Option<&Tape>) -> (Tensor, Tensor) {
        let loc = ps.lift(self.prior_loc, tape);
        let scale = ps
            .lift(self.prior_log_scale, tape)
            .exp()
            .clamp(SIGMA_MIN, SIGMA_MAX);
        (loc, scale)
    }

    /// Full rate-distortion forward pass.
    ///
    /// Train mode: bits come from noise-quantized latents, the distortion
    /// path uses straight-through rounding, and the hyper-synthesis runs on
    /// the straight-through z. Eval mode rounds everywhere and clamps the
    /// reconstruction.
    pub fn forward(
        &self,
        ps: &ParamStore,
        x: &Tensor,
        mode: Mode,
        rng: Option<&mut Rng>,
    ) -> ForwardOutput {
        let y = self.analysis(ps, x);
        let (_, _, ly, lx) = y.dims4();
        let z = self.hyper_analysis(ps, &y);
        match mode {
            Mode::Train => {
                let rng = rng.expect("train mode needs an RNG for noise quantization");
                let u_y = uniform_noise(y.shape().to_vec(), rng);
                let u_z = uniform_noise(z.shape().to_vec(), rng);

                let z_hat = quantize_ste(&z, None);
                let gauss = self.hyper_synthesis_at(ps, &z_hat, ly, lx);

                let z_noisy = z.add(&u_z);
                let (loc, scale) = self.prior(ps, x.tape());
                let p_z = factorized_likelihood(&z_noisy, &loc, &scale);
                let bits_z = bits_from_pmf(&p_z);

                let y_noisy = y.add(&u_y);
                let delta = y_noisy.sub(&gauss.mu);
                let p_y = gaussian_likelihood(&delta, &gauss.sigma);
                let bits_y = bits_from_pmf(&p_y);

                let y_hat = quantize_ste(&y, Some(&gauss.mu));
                let xhat = self.synthesis(ps, &y_hat, false);
                ForwardOutput {
                    xhat,
                    bits_y,
                    bits_z,
                    y_coded: y_noisy,
                    z_hat,
                    gauss,
                }
            }
            Mode::Eval => {
                let z_hat = quantize_round(&z, None);
                let gauss = self.hyper_synthesis_at(ps, &z_hat, ly, lx);
                let (loc, scale) = self.prior(ps, None);
                let p_z = factorized_likelihood(&z_hat, &loc, &scale);
                let bits_z = bits_from_pmf(&p_z);

                let y_hat = quantize_round(&y, Some(&gauss.mu));
                let delta = y_hat.sub(&gauss.mu);
                let p_y = gaussian_likelihood(&delta, &gauss.sigma);
                let bits_y = bits_from_pmf(&p_y);

                let xhat = self.synthesis(ps, &y_hat, true);
                ForwardOutput {
                    xhat,
                    bits_y,
                    bits_z,
                    y_coded: y_hat,
                    z_hat,
                    gauss,
                }
            }
        }
    }

    pub fn collect_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for s in &self.ga {
            s.down.collect_params(&mut out);
            for b in &s.blocks {
                b.collect_params(&mut out);
            }
        }
        for s in &self.gs {
            for b in &s.blocks {
                b.collect_params(&mut out);
            }
            s.up.collect_params(&mut out);
        }
        self.ha.conv1.collect_params(&mut out);
        self.ha.conv2.collect_params(&mut out);
        self.ha.conv3.collect_params(&mut out);
        self.hs.up1.collect_params(&mut out);
        self.hs.up2.collect_params(&mut out);
        self.hs.head.collect_params(&mut out);
        out.push(self.prior_loc);
        out.push(self.prior_log_scale);
        out
    }
}

/// I.i.d. uniform noise in (-1/2, 1/2) as a constant tensor.
pub fn uniform_noise(shape: Vec<usize>, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.next_f64() - 0.5).collect())
}

/// Straight-through quantization: forward round(y - mu) + mu, backward
/// identity to y and zero to mu (the mean cancels under the identity
/// surrogate).
pub fn quantize_ste(y: &Tensor, mu: Option<&Tensor>) -> Tensor {
    let out: Vec<f64> = match mu {
        Some(m) => {
            assert_eq!(y.shape(), m.shape(), "quantize: shape mismatch");
            y.data()
                .iter()
                .zip(m.data().iter())
                .map(|(&yv, &mv)| (yv - mv).round() + mv)
                .collect()
        }
        None => y.data().iter().map(|&yv| yv.round()).collect(),
    };
    let back = move |g: &[f64], needs: &[bool]| {
        let gy = needs[0].then(|| g.to_vec());
        vec![gy, None]
    };
    match mu {
        Some(m) => record(&[y, m], y.shape().to_vec(), out, back),
        None => {
            let dummy = Tensor::scalar(0.0);
            record(&[y, &dummy], y.shape().to_vec(), out, back)
        }
    }
}

/// Hard rounding for inference; the result is detached from any tape.
pub fn quantize_round(y: &Tensor, mu: Option<&Tensor>) -> Tensor {
    let out: Vec<f64> = match mu {
        Some(m) => {
            assert_eq!(y.shape(), m.shape(), "quantize: shape mismatch");
            y.data()
                .iter()
                .zip(m.data().iter())
                .map(|(&yv, &mv)| (yv - mv).round() + mv)
                .collect()
        }
        None => y.data().iter().map(|&yv| yv.round()).collect(),
    };
    Tensor::from_vec(y.shape().to_vec(), out)
}

/// Additive-uniform-noise quantization (training rate path).
pub fn quantize_noise(y: &Tensor, rng: &mut Rng) -> Tensor {
    let u = uniform_noise(y.shape().to_vec(), rng);
    y.add(&u)
}

/// P(round residual = delta) under N(0, sigma^2):
/// Phi((delta + 1/2) / sigma) - Phi((delta - 1/2) / sigma), floored at
/// 1e-9. Differentiable wrt both delta and sigma (zero gradient where the
/// floor is active).
pub fn gaussian_likelihood(delta: &Tensor, sigma: &Tensor) -> Tensor {
    assert_eq!(
        delta.shape(),
        sigma.shape(),
        "gaussian_likelihood: shape mismatch"
    );
    let out: Vec<f64> = delta
        .data()
        .iter()
        .zip(sigma.data().iter())
        .map(|(&d, &s)| gaussian_bin_mass(d, s).max(LIKELIHOOD_FLOOR))
        .collect();
    let d_rc: Rc<Vec<f64>> = delta.share();
    let s_rc: Rc<Vec<f64>> = sigma.share();
    let back = move |g: &[f64], needs: &[bool]| {
        let n = g.len();
        let mut gd = needs[0].then(|| vec![0.0; n]);
        let mut gs = needs[1].then(|| vec![0.0; n]);
        for i in 0..n {
            let (d, s) = (d_rc[i], s_rc[i]);
            if gaussian_bin_mass(d, s) <= LIKELIHOOD_FLOOR {
                continue;
            }
            let t1 = (d + 0.5) / s;
            let t0 = (d - 0.5) / s;
            let (p1, p0) = (normal_pdf(t1), normal_pdf(t0));
            if let Some(gd) = gd.as_mut() {
                gd[i] = g[i] * (p1 - p0) / s;
            }
            if let Some(gs) = gs.as_mut() {
                gs[i] = g[i] * (p0 * t0 - p1 * t1) / s;
            }
        }
        vec![gd, gs]
    };
    record(&[delta, sigma], delta.shape().to_vec(), out, back)
}

/// Likelihood of z under the per-channel factorized prior with learned
/// location and scale (scale already positive and clamped by the caller).
pub fn factorized_likelihood(z: &Tensor, loc: &Tensor, scale: &Tensor) -> Tensor {
    let (n, c, h, w) = z.dims4();
    assert_eq!(loc.shape(), &[c], "factorized prior loc channel mismatch");
    assert_eq!(scale.shape(), &[c], "factorized prior scale channel mismatch");
    let loc_b = crate::nn::broadcast_channel_vec(loc, n, h, w);
    let scale_b = crate::nn::broadcast_channel_vec(scale, n, h, w);
    let delta = z.sub(&loc_b);
    gaussian_likelihood(&delta, &scale_b)
}

/// Total bits implied by a PMF tensor: sum of -log2 p.
pub fn bits_from_pmf(p: &Tensor) -> Tensor {
    p.ln().sum_all().scale(-1.0 / LN2)
}
