//! Analysis instruments: effective-receptive-field maps (absolute input
//! gradients of a center-latent probe) and exact MACs profiling of the
//! transform stack.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::nn::ConvSpec;
use crate::params::ParamStore;
use crate::tensor::{Tape, Tensor};

// ---------------------------------------------------------------------------
// Effective receptive field
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErfNormalization {
    /// Average raw gradient maps over images, normalize only for emission.
    AverageThenNormalize,
    /// Normalize each image's map to unit max before averaging.
    NormalizePerImage,
}

#[derive(Clone, Debug)]
pub struct ErfMap {
    pub grid: Vec<f64>,
    pub h: usize,
    pub w: usize,
    pub image_count: usize,
    pub normalization: ErfNormalization,
    pub model_digest: u64,
}

impl ErfMap {
    pub fn max_value(&self) -> f64 {
        self.grid.iter().cloned().fold(0.0, f64::max)
    }

    /// Largest Chebyshev distance from the center pixel over cells whose
    /// value exceeds the threshold.
    pub fn support_radius(&self, threshold: f64) -> usize {
        let (cy, cx) = (self.h / 2, self.w / 2);
        let mut radius = 0usize;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.grid[y * self.w + x] > threshold {
                    let d = (y as i64 - cy as i64)
                        .abs()
                        .max((x as i64 - cx as i64).abs()) as usize;
                    radius = radius.max(d);
                }
            }
        }
        radius
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for y in 0..self.h {
            let row: Vec<String> = (0..self.w)
                .map(|x| format!("{:.6e}", self.grid[y * self.w + x]))
                .collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    /// 8-bit view: log1p-scaled and max-normalized.
    pub fn to_gray8(&self) -> Vec<f64> {
        let max = self.max_value();
        if max <= 0.0 {
            return vec![0.0; self.grid.len()];
        }
        let denom = max.ln_1p();
        self.grid
            .iter()
            .map(|&v| 255.0 * v.ln_1p() / denom)
            .collect()
    }
}

/// ERF of an arbitrary image -> feature map function: the probe is the
/// channel sum of the output at its center spatial position, and the map
/// accumulates |d probe / d input| summed over the 3 input channels.
pub fn erf_map_with(
    f: impl Fn(&Tensor) -> Tensor,
    images: &[Tensor],
    normalization: ErfNormalization,
    model_digest: u64,
) -> Result<ErfMap> {
    if images.is_empty() {
        return Err(Error::Usage("erf_map needs at least one image".into()));
    }
    let (_, _, h, w) = images[0].dims4();
    let mut acc = vec![0.0; h * w];
    for img in images {
        let (n, c, ih, iw) = img.dims4();
        if n != 1 || c != 3 || ih != h || iw != w {
            return Err(Error::Usage(
                "erf_map images must share one (1,3,h,w) shape".into(),
            ));
        }
        let tape = Tape::new();
        let x = tape.leaf(img);
        let y = f(&x);
        let (_, yc, yh, yw) = y.dims4();
        // Probe: channel-summed center latent.
        let (cy, cx) = (yh / 2, yw / 2);
        let mut mask = vec![0.0; y.len()];
        for ch in 0..yc {
            mask[(ch * yh + cy) * yw + cx] = 1.0;
        }
        let probe = y
            .mul(&Tensor::from_vec(y.shape().to_vec(), mask))
            .sum_all();
        let grads = tape.backward(&probe);
        let g = grads
            .wrt(&x)
            .ok_or_else(|| Error::Numeric("probe has no input gradient".into()))?;
        let mut per_image = vec![0.0; h * w];
        for ch in 0..3 {
            for (i, cell) in per_image.iter_mut().enumerate() {
                *cell += g[ch * h * w + i].abs();
            }
        }
        match normalization {
            ErfNormalization::AverageThenNormalize => {
                for (a, v) in acc.iter_mut().zip(per_image.iter()) {
                    *a += v;
                }
            }
            ErfNormalization::NormalizePerImage => {
                let max = per_image.iter().cloned().fold(0.0, f64::max).max(1e-300);
                for (a, v) in acc.iter_mut().zip(per_image.iter()) {
                    *a += v / max;
                }
            }
        }
    }
    let scale = 1.0 / images.len() as f64;
    for v in acc.iter_mut() {
        *v *= scale;
    }
    Ok(ErfMap {
        grid: acc,
        h,
        w,
        image_count: images.len(),
        normalization,
        model_digest,
    })
}

/// ERF of a model's analysis transform on square inputs (side a multiple
/// of 16, at least 64 at desk scale).
pub fn erf_map(
    model: &Model,
    ps: &ParamStore,
    images: &[Tensor],
    normalization: ErfNormalization,
) -> Result<ErfMap> {
    for img in images {
        let (_, _, h, w) = img.dims4();
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Usage(format!(
                "erf_map image extents must be multiples of 16, got {h}x{w}"
            )));
        }
    }
    erf_map_with(
        |x| model.analysis(ps, x),
        images,
        normalization,
        model.config.digest(),
    )
}

// ---------------------------------------------------------------------------
// Theoretical receptive field (interval arithmetic per layer)
// ---------------------------------------------------------------------------

/// One spatial layer of the analysis transform, as seen by interval
/// arithmetic.
#[derive(Clone, Copy, Debug)]
enum SpatialLayer {
    Conv { k: i64, s: i64, p: i64 },
    /// Condition branches pool the whole feature map: global influence.
    Global,
}

fn ga_spatial_layers(config: &ModelConfig) -> Vec<SpatialLayer> {
    let mut layers = Vec::new();
    for stage in 0..4 {
        let k = config.kernels_ga[stage] as i64;
        layers.push(SpatialLayer::Conv { k: 5, s: 2, p: 2 }); // downsample conv
        layers.push(SpatialLayer::Conv { k: 3, s: 1, p: 1 }); // its DepthRB dw
        for _ in 0..config.blocks_per_stage {
            if !config.disable_stb {
                if !config.linear_embedding {
                    layers.push(SpatialLayer::Conv { k: 3, s: 1, p: 1 }); // STB DepthRB dw
                }
                if config.static_weights {
                    layers.push(SpatialLayer::Conv { k, s: 1, p: k / 2 }); // static SCST
                } else {
                    layers.push(SpatialLayer::Global); // SCST condition pool
                }
            }
            if !config.disable_ctb {
                if !config.linear_embedding {
                    layers.push(SpatialLayer::Conv { k: 3, s: 1, p: 1 }); // CTB DepthRB dw
                }
                layers.push(SpatialLayer::Global); // SCCT condition pool
            }
        }
    }
    layers
}

/// Input-pixel footprint of one latent cell along one axis, or None when a
/// condition branch makes the influence global.
pub fn analysis_footprint(config: &ModelConfig, latent_cell: i64) -> Option<(i64, i64)> {
    let mut lo = latent_cell;
    let mut hi = latent_cell;
    for layer in ga_spatial_layers(config).iter().rev() {
        match *layer {
            SpatialLayer::Global => return None,
            SpatialLayer::Conv { k, s, p } => {
                lo = lo * s - p;
                hi = hi * s - p + k - 1;
            }
        }
    }
    Some((lo, hi))
}

// ---------------------------------------------------------------------------
// MACs profiling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerMacs {
    pub path: String,
    pub macs: u64,
    pub out_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct MacsReport {
    pub input_h: usize,
    pub input_w: usize,
    pub layers: Vec<LayerMacs>,
}

impl MacsReport {
    pub fn total(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }

    pub fn module_total(&self, prefix: &str) -> u64 {
        self.layers
            .iter()
            .filter(|l| l.path.starts_with(prefix))
            .map(|l| l.macs)
            .sum()
    }

    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "MACs report for {}x{} input\n",
            self.input_h, self.input_w
        ));
        for l in &self.layers {
            out.push_str(&format!(
                "{:<34} {:>14}  out {:?}\n",
                l.path, l.macs, l.out_shape
            ));
        }
        for module in ["ga", "gs", "ha", "hs"] {
            out.push_str(&format!(
                "total {:<28} {:>14}\n",
                module,
                self.module_total(&format!("{module}."))
            ));
        }
        out.push_str(&format!("total {:<28} {:>14}\n", "all", self.total()));
        out
    }
}

// Per-pixel costs of the primitive interactions (multiplies only; bias
// adds and normalizations are free under the MAC convention).

pub fn per_pixel_depthwise_macs(k: usize, c: usize) -> u64 {
    (k * k * c) as u64
}

pub fn per_pixel_dense1x1_macs(c: usize) -> u64 {
    (c * c) as u64
}

/// Gate block: Conv1x1 to 2c (2c^2) + Hadamard (c) + Conv1x1 (c^2).
pub fn gate_per_pixel_macs(c: usize) -> u64 {
    (3 * c * c + c) as u64
}

/// FFN block: Conv1x1 to 2c (2c^2) + GELU on 2c (2c) + Conv1x1 back (2c^2).
pub fn ffn_per_pixel_macs(c: usize) -> u64 {
    (4 * c * c + 2 * c) as u64
}

struct MacsWalker {
    layers: Vec<LayerMacs>,
}

impl MacsWalker {
    fn conv(&mut self, path: &str, spec: &ConvSpec, h: usize, w: usize) -> (usize, usize) {
        let (oh, ow) = spec.out_hw(h, w);
        self.layers.push(LayerMacs {
            path: path.to_string(),
            macs: spec.macs(h, w),
            out_shape: vec![spec.out_channels, oh, ow],
        });
        (oh, ow)
    }

    fn raw(&mut self, path: &str, macs: u64, shape: Vec<usize>) {
        self.layers.push(LayerMacs {
            path: path.to_string(),
            macs,
            out_shape: shape,
        });
    }

    fn depth_rb(&mut self, path: &str, c: usize, h: usize, w: usize) {
        self.conv(&format!("{path}.conv1"), &ConvSpec::same(c, c, 1), h, w);
        self.conv(&format!("{path}.dw"), &ConvSpec::depthwise(c, 3), h, w);
        self.conv(&format!("{path}.conv2"), &ConvSpec::same(c, c, 1), h, w);
    }

    fn mixer(&mut self, path: &str, cfg: &ModelConfig, c: usize, h: usize, w: usize) {
        if cfg.use_ffn {
            self.conv(&format!("{path}.expand"), &ConvSpec::same(c, 2 * c, 1), h, w);
            self.raw(&format!("{path}.gelu"), (2 * c * h * w) as u64, vec![2 * c, h, w]);
            self.conv(&format!("{path}.proj"), &ConvSpec::same(2 * c, c, 1), h, w);
        } else {
            self.conv(&format!("{path}.expand"), &ConvSpec::same(c, 2 * c, 1), h, w);
            self.raw(&format!("{path}.hadamard"), (c * h * w) as u64, vec![c, h, w]);
            self.conv(&format!("{path}.proj"), &ConvSpec::same(c, c, 1), h, w);
        }
    }

    fn embedding(&mut self, path: &str, cfg: &ModelConfig, c: usize, h: usize, w: usize) {
        if cfg.linear_embedding {
            self.conv(&format!("{path}.linear"), &ConvSpec::same(c, c, 1), h, w);
        } else {
            self.depth_rb(path, c, h, w);
        }
    }

    fn stb(&mut self, path: &str, cfg: &ModelConfig, c: usize, k: usize, h: usize, w: usize) {
        let hidden = if cfg.cond_hidden == 0 { c } else { cfg.cond_hidden };
        self.embedding(&format!("{path}.embed"), cfg, c, h, w);
        self.conv(&format!("{path}.scst.main"), &ConvSpec::same(c, c, 1), h, w);
        if !cfg.static_weights {
            self.raw(
                &format!("{path}.scst.cond3"),
                (9 * c * hidden) as u64,
                vec![hidden, 1, 1],
            );
            self.raw(
                &format!("{path}.scst.cond1"),
                (hidden * c * k * k) as u64,
                vec![c * k * k, 1, 1],
            );
        }
        self.raw(
            &format!("{path}.scst.dynamic_dw"),
            (k * k * c * h * w) as u64,
            vec![c, h, w],
        );
        self.conv(&format!("{path}.proj"), &ConvSpec::same(c, c, 1), h, w);
        self.mixer(&format!("{path}.mix"), cfg, c, h, w);
    }

    fn ctb(&mut self, path: &str, cfg: &ModelConfig, c: usize, h: usize, w: usize) {
        let hidden = if cfg.cond_hidden == 0 { c } else { cfg.cond_hidden };
        self.embedding(&format!("{path}.embed"), cfg, c, h, w);
        self.conv(&format!("{path}.scct.main"), &ConvSpec::same(c, c, 1), h, w);
        self.raw(
            &format!("{path}.scct.cond3"),
            (9 * c * hidden) as u64,
            vec![hidden, 1, 1],
        );
        self.raw(&format!("{path}.scct.cond1"), (hidden * c) as u64, vec![c, 1, 1]);
        self.raw(
            &format!("{path}.scct.hadamard"),
            (c * h * w) as u64,
            vec![c, h, w],
        );
        self.conv(&format!("{path}.proj"), &ConvSpec::same(c, c, 1), h, w);
        self.mixer(&format!("{path}.mix"), cfg, c, h, w);
    }

    fn basic_block(
        &mut self,
        path: &str,
        cfg: &ModelConfig,
        c: usize,
        k: usize,
        h: usize,
        w: usize,
    ) {
        if !cfg.disable_stb {
            self.stb(&format!("{path}.stb"), cfg, c, k, h, w);
        }
        if !cfg.disable_ctb {
            self.ctb(&format!("{path}.ctb"), cfg, c, h, w);
        }
    }
}

/// Exact forward-inference MACs of g_a + g_s + h_a + h_s at the given
/// input resolution (multiples of 16). Counts depend only on the config.
pub fn count_macs(config: &ModelConfig, h: usize, w: usize) -> Result<MacsReport> {
    if h % 16 != 0 || w % 16 != 0 || h < 48 || w < 48 {
        return Err(Error::Usage(format!(
            "count_macs expects padded extents (multiples of 16, >= 48), got {h}x{w}"
        )));
    }
    config.validate().map_err(Error::Usage)?;
    let mut walker = MacsWalker { layers: Vec::new() };
    let stage_ch = config.stage_channels();

    // Analysis transform.
    let (mut ch, mut cw) = (h, w);
    let mut cin = 3;
    for s in 0..4 {
        let cout = stage_ch[s];
        let (oh, ow) = walker.conv(
            &format!("ga.s{s}.down.conv"),
            &ConvSpec::new(cin, cout, 5, 2, 2, 1),
            ch,
            cw,
        );
        walker.depth_rb(&format!("ga.s{s}.down.drb"), cout, oh, ow);
        for j in 0..config.blocks_per_stage {
            walker.basic_block(
                &format!("ga.s{s}.b{j}"),
                config,
                cout,
                config.kernels_ga[s],
                oh,
                ow,
            );
        }
        (ch, cw) = (oh, ow);
        cin = cout;
    }
    let (ly, lx) = (ch, cw);

    // Synthesis transform (mirror).
    let (mut ch, mut cw) = (ly, lx);
    for s in 0..4 {
        let c = if s == 0 { config.m } else { config.n };
        let cout = if s == 3 { 3 } else { config.n };
        for j in 0..config.blocks_per_stage {
            walker.basic_block(
                &format!("gs.s{s}.b{j}"),
                config,
                c,
                config.kernels_gs[s],
                ch,
                cw,
            );
        }
        walker.conv(
            &format!("gs.s{s}.up.conv"),
            &ConvSpec::same(c, 4 * cout, 3),
            ch,
            cw,
        );
        (ch, cw) = (2 * ch, 2 * cw);
        walker.depth_rb(&format!("gs.s{s}.up.drb"), cout, ch, cw);
    }

    // Hyper transforms at the /4-aligned latent resolution.
    let (ay, ax) = (ly.div_ceil(4) * 4, lx.div_ceil(4) * 4);
    let (m, hy) = (config.m, config.hyper);
    let (h1, w1) = walker.conv("ha.conv1", &ConvSpec::same(m, hy, 3), ay, ax);
    let (h2, w2) = walker.conv("ha.conv2", &ConvSpec::new(hy, hy, 5, 2, 2, 1), h1, w1);
    let (zh, zw) = walker.conv("ha.conv3", &ConvSpec::new(hy, hy, 5, 2, 2, 1), h2, w2);

    walker.conv("hs.up1", &ConvSpec::same(hy, 4 * hy, 3), zh, zw);
    walker.conv("hs.up2", &ConvSpec::same(hy, 4 * m, 3), 2 * zh, 2 * zw);
    walker.conv("hs.head", &ConvSpec::same(m, 2 * m, 3), 4 * zh, 4 * zw);

    Ok(MacsReport {
        input_h: h,
        input_w: w,
        layers: walker.layers,
    })
}
