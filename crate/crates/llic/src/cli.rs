//! Command-line interface: train / encode / decode / eval / bdrate /
//! ratesave / erf / macs / selftest behind one dispatcher.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O, 3 format/digest, 4 numeric.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::analysis::{self, ErfNormalization};
use crate::checkpoint;
use crate::coder::{self, CodecTables};
use crate::config;
use crate::error::{Error, Result};
use crate::math::Rng;
use crate::metrics::{self, QualityField, RdCurve, RdPoint};
use crate::model::{Model, ModelConfig};
use crate::nn;
use crate::params::ParamStore;
use crate::ppm;
use crate::tensor::Tensor;
use crate::train::{self, Trainer};

const USAGE: &str = "\
llic — large receptive field learned image codec

USAGE:
  llic <subcommand> [flags]

SUBCOMMANDS:
  train     --data <dir> --out <ckpt> [--config <file>] [--resume <ckpt>]
            [--set key=value ...] [--log-every <n>]
  encode    --ckpt <ckpt> --in <ppm> --out <llic> [--lambda-index <n>]
  decode    --ckpt <ckpt> --in <llic> --out <ppm>
  eval      --ckpt <ckpt> --images <dir> --out <csv> [--lambda-index <n>]
  bdrate    --anchor <csv> --test <csv> [--field psnr|msssim]
  ratesave  --anchor <csv> --test <csv> --grid <lo:hi:step>
  erf       --ckpt <ckpt> --images <dir> --size <px> --out <pgm,csv>
            [--per-image-norm]
  macs      [--config <file>] [--set key=value ...] --res <WxH>
  selftest

Config files are flat key=value text; `--set key=value` overrides them.
Run `llic <subcommand> --help` for the flag list of one subcommand.
";

/// Entry point used by the binary; returns the process exit code.
pub fn dispatch<S: AsRef<str>>(args: &[S]) -> i32 {
    let args: Vec<String> = args.iter().map(|s| s.as_ref().to_string()).collect();
    match run(&args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn run(args: &[String]) -> Result<()> {
    let Some(cmd) = args.first() else {
        print!("{USAGE}");
        return Err(Error::Usage("missing subcommand".into()));
    };
    let rest = &args[1..];
    match cmd.as_str() {
        "train" => cmd_train(rest),
        "encode" => cmd_encode(rest),
        "decode" => cmd_decode(rest),
        "eval" => cmd_eval(rest),
        "bdrate" => cmd_bdrate(rest),
        "ratesave" => cmd_ratesave(rest),
        "erf" => cmd_erf(rest),
        "macs" => cmd_macs(rest),
        "selftest" => cmd_selftest(rest),
        "help" | "--help" | "-h" => {
            print!("{USAGE}");
            Ok(())
        }
        other => Err(Error::Usage(format!(
            "unknown subcommand '{other}' (run `llic help`)"
        ))),
    }
}

// ---------------------------------------------------------------------------
// Flag parsing
// ---------------------------------------------------------------------------

struct Flags {
    values: BTreeMap<String, Vec<String>>,
}

impl Flags {
    fn parse(args: &[String], allowed: &[&str], bools: &[&str], usage: &str) -> Result<Self> {
        let mut values: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut i = 0;
        while i < args.len() {
            let arg = &args[i];
            if arg == "--help" || arg == "-h" {
                println!("{usage}");
                values.insert("help".into(), vec![]);
                return Ok(Flags { values });
            }
            let Some(name) = arg.strip_prefix("--") else {
                return Err(Error::Usage(format!("unexpected argument '{arg}'")));
            };
            if bools.contains(&name) {
                values.entry(name.to_string()).or_default().push("1".into());
                i += 1;
                continue;
            }
            if !allowed.contains(&name) {
                return Err(Error::Usage(format!("unknown flag '--{name}'")));
            }
            let Some(value) = args.get(i + 1) else {
                return Err(Error::Usage(format!("flag '--{name}' needs a value")));
            };
            values
                .entry(name.to_string())
                .or_default()
                .push(value.clone());
            i += 2;
        }
        Ok(Flags { values })
    }

    fn wants_help(&self) -> bool {
        self.values.contains_key("help")
    }

    fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).and_then(|v| v.last()).map(String::as_str)
    }

    fn require(&self, name: &str) -> Result<&str> {
        self.get(name)
            .ok_or_else(|| Error::Usage(format!("missing required flag '--{name}'")))
    }

    fn all(&self, name: &str) -> Vec<String> {
        self.values.get(name).cloned().unwrap_or_default()
    }

    fn has(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }
}

fn load_key_values(flags: &Flags) -> Result<config::KeyValues> {
    let mut map = match flags.get("config") {
        Some(path) => config::load_config_file(Path::new(path))?,
        None => config::KeyValues::new(),
    };
    config::apply_overrides(&mut map, &flags.all("set"))?;
    config::reject_unknown_keys(&map)?;
    Ok(map)
}

fn list_ppm_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io_path("reading dir", dir, e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some("ppm"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::Io(format!("no .ppm files in {}", dir.display())));
    }
    Ok(files)
}

fn load_model_from_ckpt(path: &str) -> Result<(Model, ParamStore)> {
    checkpoint::load_model(Path::new(path))
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_train(args: &[String]) -> Result<()> {
    let usage = "llic train --data <dir> --out <ckpt> [--config <file>] \
                 [--resume <ckpt>] [--set key=value ...] [--log-every <n>]";
    let flags = Flags::parse(
        args,
        &["data", "out", "config", "resume", "set", "log-every"],
        &[],
        usage,
    )?;
    if flags.wants_help() {
        return Ok(());
    }
    let map = load_key_values(&flags)?;
    let model_cfg = config::model_config_from(&map)?;
    let train_cfg = config::train_config_from(&map)?;
    let data_dir = PathBuf::from(flags.require("data")?);
    let out = PathBuf::from(flags.require("out")?);
    let log_every: u64 = flags
        .get("log-every")
        .map(|v| v.parse().map_err(|_| Error::Usage("bad --log-every".into())))
        .transpose()?
        .unwrap_or(100)
        .max(1);

    let images: Vec<Tensor> = list_ppm_files(&data_dir)?
        .iter()
        .map(|p| ppm::load_ppm(p))
        .collect::<Result<_>>()?;
    println!(
        "training: {} images, lambda {}, {} steps, batch {}, seed {}",
        images.len(),
        train_cfg.lambda,
        train_cfg.total_steps,
        train_cfg.batch_size,
        train_cfg.seed
    );

    let mut trainer = match flags.get("resume") {
        Some(ckpt) => Trainer::resume(model_cfg, train_cfg, images, Path::new(ckpt))?,
        None => Trainer::new(model_cfg, train_cfg, images)?,
    };
    let total = trainer.cfg.total_steps;
    while trainer.state.step < total {
        let loss = trainer.step()?;
        let step = trainer.state.step;
        if step % log_every == 0 || step == total {
            println!(
                "step {step:>8}  loss {loss:.6}  lr {:.1e}",
                train::lr_schedule(step - 1, &trainer.cfg)
            );
        }
    }
    trainer.save(&out)?;
    println!("saved checkpoint to {}", out.display());
    Ok(())
}

fn cmd_encode(args: &[String]) -> Result<()> {
    let usage = "llic encode --ckpt <ckpt> --in <ppm> --out <llic> [--lambda-index <n>]";
    let flags = Flags::parse(args, &["ckpt", "in", "out", "lambda-index"], &[], usage)?;
    if flags.wants_help() {
        return Ok(());
    }
    let (model, store) = load_model_from_ckpt(flags.require("ckpt")?)?;
    let image = ppm::load_ppm(Path::new(flags.require("in")?))?;
    let lambda_index: u8 = flags
        .get("lambda-index")
        .map(|v| v.parse().map_err(|_| Error::Usage("bad --lambda-index".into())))
        .transpose()?
        .unwrap_or(0);

    let start = Instant::now();
    let tables = CodecTables::new(&model, &store);
    let result = coder::encode_image(&model, &store, &tables, &image, lambda_index)?;
    let elapsed = start.elapsed();
    let bytes = result.bitstream.to_bytes();
    let out = PathBuf::from(flags.require("out")?);
    std::fs::write(&out, &bytes).map_err(|e| Error::io_path("writing", &out, e))?;
    println!(
        "encoded {}x{} -> {} bytes ({:.4} bpp) in {:.3}s",
        result.bitstream.orig_h,
        result.bitstream.orig_w,
        bytes.len(),
        result.bitstream.bpp(),
        elapsed.as_secs_f64()
    );
    Ok(())
}

fn cmd_decode(args: &[String]) -> Result<()> {
    let usage = "llic decode --ckpt <ckpt> --in <llic> --out <ppm>";
    let flags = Flags::parse(args, &["ckpt", "in", "out"], &[], usage)?;
    if flags.wants_help() {
        return Ok(());
    }
    let (model, store) = load_model_from_ckpt(flags.require("ckpt")?)?;
    let input = PathBuf::from(flags.require("in")?);
    let bytes = std::fs::read(&input).map_err(|e| Error::io_path("reading", &input, e))?;
    let bs = coder::Bitstream::from_bytes(&bytes)?;

    let start = Instant::now();
    let tables = CodecTables::new(&model, &store);
    let decoded = coder::decode_image(&model, &store, &tables, &bs)?;
    let elapsed = start.elapsed();
    let out = PathBuf::from(flags.require("out")?);
    ppm::save_ppm(&decoded.image, &out)?;
    println!(
        "decoded {}x{} in {:.3}s -> {}",
        bs.orig_h,
        bs.orig_w,
        elapsed.as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn cmd_eval(args: &[String]) -> Result<()> {
    let usage = "llic eval --ckpt <ckpt> --images <dir> --out <csv> [--lambda-index <n>]";
    let flags = Flags::parse(args, &["ckpt", "images", "out", "lambda-index"], &[], usage)?;
    if flags.wants_help() {
        return Ok(());
    }
    let (model, store) = load_model_from_ckpt(flags.require("ckpt")?)?;
    let lambda_index: u32 = flags
        .get("lambda-index")
        .map(|v| v.parse().map_err(|_| Error::Usage("bad --lambda-index".into())))
        .transpose()?
        .unwrap_or(0);
    let files = list_ppm_files(Path::new(flags.require("images")?))?;
    let tables = CodecTables::new(&model, &store);

    let mut sum_bpp = 0.0;
    let mut sum_psnr = 0.0;
    let mut msssim_vals: Vec<f64> = Vec::new();
    let mut msssim_ok = true;
    for f in &files {
        let image = ppm::load_ppm(f)?;
        let enc = coder::encode_image(&model, &store, &tables, &image, lambda_index as u8)?;
        let dec = coder::decode_image(&model, &store, &tables, &enc.bitstream)?;
        let bpp = enc.bitstream.bpp();
        let p = metrics::psnr(&image, &dec.image)?;
        match metrics::ms_ssim_value(&image, &dec.image) {
            Ok(v) => msssim_vals.push(v),
            Err(_) => msssim_ok = false,
        }
        sum_bpp += bpp;
        sum_psnr += p;
        println!(
            "{}: {:.4} bpp, {:.3} dB",
            f.file_name().unwrap().to_string_lossy(),
            bpp,
            p
        );
    }
    let n = files.len() as f64;
    let point = RdPoint {
        lambda_index,
        bpp: sum_bpp / n,
        psnr: sum_psnr / n,
        msssim: (msssim_ok && !msssim_vals.is_empty())
            .then(|| msssim_vals.iter().sum::<f64>() / msssim_vals.len() as f64),
    };
    let out = PathBuf::from(flags.require("out")?);
    let mut text = match std::fs::read_to_string(&out) {
        Ok(t) => t,
        Err(_) => String::from("lambda_index,bpp,psnr,msssim\n"),
    };
    let ms = point.msssim.map(|v| format!("{v:.8}")).unwrap_or_default();
    text.push_str(&format!(
        "{},{:.8},{:.5},{}\n",
        point.lambda_index, point.bpp, point.psnr, ms
    ));
    std::fs::write(&out, text).map_err(|e| Error::io_path("writing", &out, e))?;
    println!(
        "mean: {:.4} bpp, {:.3} dB -> appended to {}",
        point.bpp,
        point.psnr,
        out.display()
    );
    Ok(())
}

fn parse_field(flags: &Flags) -> Result<QualityField> {
    match flags.get("field").unwrap_or("psnr") {
        "psnr" => Ok(QualityField::Psnr),
        "msssim" => Ok(QualityField::MsSsim),
        other => Err(Error::Usage(format!(
            "unknown quality field '{other}' (psnr or msssim)"
        ))),
    }
}

fn read_curve(path: &str) -> Result<RdCurve> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io_path("reading", Path::new(path), e))?;
    let (curve, warning) = RdCurve::from_csv_warn(&text)?;
    if let Some(w) = warning {
        eprintln!("warning: {path}: {w}");
    }
    Ok(curve)
}

fn cmd_bdrate(args: &[String]) -> Result<()> {
    let usage = "llic bdrate --anchor <csv> --test <csv> [--field psnr|msssim]";
    let flags = Flags::parse(args, &["anchor", "test", "field"], &[], usage)?;
    if flags.wants_help() {
        return Ok(());
    }
    let anchor = read_curve(flags.require("anchor")?)?;
    let test = read_curve(flags.require("test")?)?;
    let bd = metrics::bd_rate(&anchor, &test, parse_field(&flags)?)?;
    println!("BD-rate: {bd:+.4}%");
    Ok(())
}

fn cmd_ratesave(args: &[String]) -> Result<()> {
    let usage = "llic ratesave --anchor <csv> --test <csv> --grid <lo:hi:step>";
    let flags = Flags::parse(args, &["anchor", "test", "grid"], &[], usage)?;
    if flags.wants_help() {
        return Ok(());
    }
    let anchor = read_curve(flags.require("anchor")?)?;
    let test = read_curve(flags.require("test")?)?;
    let grid_spec = flags.require("grid")?;
    let parts: Vec<&str> = grid_spec.split(':').collect();
    if parts.len() != 3 {
        return Err(Error::Usage("--grid expects lo:hi:step".into()));
    }
    let parse = |s: &str| -> Result<f64> {
        s.parse()
            .map_err(|_| Error::Usage(format!("bad grid number '{s}'")))
    };
    let (lo, hi, step) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
    if !(step > 0.0 && hi >= lo) {
        return Err(Error::Usage("grid must satisfy lo <= hi, step > 0".into()));
    }
    let mut grid = Vec::new();
    let mut p = lo;
    while p <= hi + 1e-9 {
        grid.push(p);
        p += step;
    }
    let curve = metrics::rate_saving_curve(&anchor, &test, &grid)?;
    println!("psnr_db,rate_saving_percent");
    for (p, s) in curve {
        println!("{p:.3},{s:+.4}");
    }
    Ok(())
}

fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let (_, _, h, w) = image.dims4();
    if h < size || w < size {
        return Err(Error::Usage(format!(
            "image {h}x{w} smaller than requested ERF crop {size}"
        )));
    }
    let data = image.data();
    let (oy, ox) = ((h - size) / 2, (w - size) / 2);
    let mut out = vec![0.0; 3 * size * size];
    for c in 0..3 {
        for y in 0..size {
            let src = (c * h + oy + y) * w + ox;
            out[(c * size + y) * size..(c * size + y + 1) * size]
                .copy_from_slice(&data[src..src + size]);
        }
    }
    Ok(Tensor::from_vec(vec![1, 3, size, size], out))
}

fn cmd_erf(args: &[String]) -> Result<()> {
    let usage = "llic erf --ckpt <ckpt> --images <dir> --size <px> --out <pgm,csv> \
                 [--per-image-norm]";
    let flags = Flags::parse(
        args,
        &["ckpt", "images", "size", "out"],
        &["per-image-norm"],
        usage,
    )?;
    if flags.wants_help() {
        return Ok(());
    }
    let (model, store) = load_model_from_ckpt(flags.require("ckpt")?)?;
    let size: usize = flags
        .require("size")?
        .parse()
        .map_err(|_| Error::Usage("bad --size".into()))?;
    if size % 16 != 0 || size < 64 {
        return Err(Error::Usage(format!(
            "--size must be a multiple of 16 and at least 64, got {size}"
        )));
    }
    let outs = flags.require("out")?;
    let Some((pgm_path, csv_path)) = outs.split_once(',') else {
        return Err(Error::Usage("--out expects <pgm>,<csv>".into()));
    };
    let files = list_ppm_files(Path::new(flags.require("images")?))?;
    let images: Vec<Tensor> = files
        .iter()
        .map(|f| center_crop(&ppm::load_ppm(f)?, size))
        .collect::<Result<_>>()?;
    let norm = if flags.has("per-image-norm") {
        ErfNormalization::NormalizePerImage
    } else {
        ErfNormalization::AverageThenNormalize
    };
    let map = analysis::erf_map(&model, &store, &images, norm)?;
    ppm::save_pgm(&map.to_gray8(), map.h, map.w, Path::new(pgm_path))?;
    std::fs::write(csv_path, map.to_csv())
        .map_err(|e| Error::io_path("writing", Path::new(csv_path), e))?;
    println!(
        "erf over {} images: support radius {} at 1e-12 -> {pgm_path}, {csv_path}",
        map.image_count,
        map.support_radius(1e-12)
    );
    Ok(())
}

fn cmd_macs(args: &[String]) -> Result<()> {
    let usage = "llic macs [--config <file>] [--set key=value ...] --res <WxH>";
    let flags = Flags::parse(args, &["config", "set", "res"], &[], usage)?;
    if flags.wants_help() {
        return Ok(());
    }
    let map = load_key_values(&flags)?;
    let model_cfg = config::model_config_from(&map)?;
    let res = flags.require("res")?;
    let Some((ws, hs)) = res.split_once('x') else {
        return Err(Error::Usage("--res expects WxH, e.g. 768x512".into()));
    };
    let w: usize = ws.parse().map_err(|_| Error::Usage("bad width".into()))?;
    let h: usize = hs.parse().map_err(|_| Error::Usage("bad height".into()))?;
    let (ph, pw) = (coder::padded_extent(h), coder::padded_extent(w));
    if (ph, pw) != (h, w) {
        println!("resolution padded to {pw}x{ph} for coding alignment");
    }
    let report = analysis::count_macs(&model_cfg, ph, pw)?;
    print!("{}", report.render_text());
    Ok(())
}

// ---------------------------------------------------------------------------
// Self test
// ---------------------------------------------------------------------------

type Check = (&'static str, fn() -> std::result::Result<(), String>);

fn approx(a: f64, b: f64, tol: f64) -> std::result::Result<(), String> {
    if (a - b).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{a} != {b} (tol {tol})"))
    }
}

fn check_gradients() -> std::result::Result<(), String> {
    use crate::blocks::DepthRb;
    use crate::params::{ParamBuilder, ParamStore};
    use crate::tensor::grad_check;
    let mut rng = Rng::new(1);
    let x = Tensor::from_vec(
        vec![1, 4, 6, 6],
        (0..144).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    );
    let err = grad_check(|t| t.tanh().mul(&t.exp()), &x, 1e-5);
    if err >= 1e-5 {
        return Err(format!("elementwise grad err {err}"));
    }
    let mut ps = ParamStore::new();
    let mut prng = Rng::new(2);
    let mut pb = ParamBuilder::new(&mut ps, &mut prng);
    let drb = DepthRb::new(&mut pb, "drb", 4);
    let err = grad_check(|t| drb.forward(&ps, t), &x, 1e-5);
    if err >= 1e-5 {
        return Err(format!("depth_rb grad err {err}"));
    }
    Ok(())
}

fn check_zero_init_identities() -> std::result::Result<(), String> {
    use crate::blocks::{BasicBlock, BlockConfig};
    use crate::params::{ParamBuilder, ParamStore};
    let mut rng = Rng::new(3);
    let x = Tensor::from_vec(
        vec![1, 6, 8, 8],
        (0..384).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    );
    let mut ps = ParamStore::new();
    let mut prng = Rng::new(4);
    let mut pb = ParamBuilder::new(&mut ps, &mut prng);
    let bb = BasicBlock::new(&mut pb, "bb", &BlockConfig::new(6, 3), false);
    ps.set_all_zero();
    if bb.forward(&ps, &x).data() != x.data() {
        return Err("zero-init basic block is not the identity".into());
    }
    Ok(())
}

fn check_coder_roundtrips() -> std::result::Result<(), String> {
    let mut rng = Rng::new(5);
    let scales = coder::build_scale_table();
    for _ in 0..1000 {
        let table = coder::build_gaussian_cdf(scales[rng.below(64)]);
        let syms: Vec<i64> = (0..64)
            .map(|_| {
                if rng.below(10) == 0 {
                    table.l + 1 + rng.below(1000) as i64
                } else {
                    rng.below(table.num_symbols() - 1) as i64 - table.l
                }
            })
            .collect();
        let bytes = coder::encode_stream(&syms, |_| 0, std::slice::from_ref(&table));
        let back = coder::decode_stream(&bytes, syms.len(), |_| 0, std::slice::from_ref(&table))
            .map_err(|e| e.to_string())?;
        if back != syms {
            return Err("roundtrip mismatch".into());
        }
    }
    Ok(())
}

fn check_macs_numbers() -> std::result::Result<(), String> {
    if analysis::per_pixel_depthwise_macs(11, 192) != 23_232 {
        return Err("depthwise 11x11 at 192 != 23232".into());
    }
    if analysis::per_pixel_dense1x1_macs(192) != 36_864 {
        return Err("dense 1x1 at 192 != 36864".into());
    }
    if analysis::gate_per_pixel_macs(192) != 110_784 || analysis::ffn_per_pixel_macs(192) != 147_840
    {
        return Err("gate/ffn per-pixel MACs wrong".into());
    }
    Ok(())
}

fn check_bd_rate_identities() -> std::result::Result<(), String> {
    let mk = |scale: f64| {
        RdCurve::new(
            [(0.25, 30.0), (0.5, 33.0), (1.0, 36.5), (2.0, 40.0)]
                .iter()
                .map(|&(b, q)| RdPoint {
                    lambda_index: 0,
                    bpp: b * scale,
                    psnr: q,
                    msssim: None,
                })
                .collect(),
        )
        .unwrap()
        .0
    };
    let a = mk(1.0);
    let bd0 = metrics::bd_rate(&a, &mk(1.0), QualityField::Psnr).map_err(|e| e.to_string())?;
    approx(bd0, 0.0, 1e-12)?;
    let bd2 = metrics::bd_rate(&a, &mk(2.0), QualityField::Psnr).map_err(|e| e.to_string())?;
    approx(bd2, 100.0, 1e-6)
}

fn check_metric_sanity() -> std::result::Result<(), String> {
    let mut rng = Rng::new(6);
    let x = Tensor::from_vec(vec![1, 3, 8, 8], (0..192).map(|_| rng.next_f64()).collect());
    let off = Tensor::from_vec(
        x.shape().to_vec(),
        x.data().iter().map(|v| v + 1.0 / 255.0).collect(),
    );
    approx(metrics::psnr(&x, &off).map_err(|e| e.to_string())?, 48.1308, 1e-3)?;
    let big = Tensor::from_vec(
        vec![1, 3, 176, 176],
        (0..3 * 176 * 176).map(|_| rng.next_f64()).collect(),
    );
    if metrics::ms_ssim_value(&big, &big).map_err(|e| e.to_string())? != 1.0 {
        return Err("ms_ssim(x,x) != 1".into());
    }
    Ok(())
}

fn check_codec_roundtrip() -> std::result::Result<(), String> {
    let (model, store) = Model::build(ModelConfig::desk(), 99);
    let mut rng = Rng::new(7);
    let image = Tensor::from_vec(
        vec![1, 3, 64, 64],
        (0..3 * 64 * 64).map(|_| rng.next_f64()).collect(),
    );
    let tables = CodecTables::new(&model, &store);
    let enc = coder::encode_image(&model, &store, &tables, &image, 0).map_err(|e| e.to_string())?;
    let bytes = enc.bitstream.to_bytes();
    let bs = coder::Bitstream::from_bytes(&bytes).map_err(|e| e.to_string())?;
    let dec = coder::decode_image(&model, &store, &tables, &bs).map_err(|e| e.to_string())?;
    if dec.y_hat.data() != enc.y_hat.data() {
        return Err("decoder latent differs from encoder latent".into());
    }
    if dec.image.shape() != image.shape() {
        return Err("decoded dims differ".into());
    }
    Ok(())
}

fn check_lr_schedule() -> std::result::Result<(), String> {
    let cfg = train::TrainConfig::with_total_steps(2_000_000);
    approx(train::lr_schedule(0, &cfg), 1e-4, 0.0)?;
    approx(train::lr_schedule(1_750_000, &cfg), 3e-5, 0.0)?;
    approx(train::lr_schedule(1_850_000, &cfg), 1e-5, 0.0)
}

fn check_erf_locality() -> std::result::Result<(), String> {
    let mut rng = Rng::new(8);
    let k = 11;
    let w = Tensor::from_vec(
        vec![3, 1, k, k],
        (0..3 * k * k).map(|_| rng.uniform(-1.0, 1.0)).collect(),
    );
    let spec = nn::ConvSpec::depthwise(3, k);
    let img = Tensor::from_vec(
        vec![1, 3, 32, 32],
        (0..3 * 32 * 32).map(|_| rng.next_f64()).collect(),
    );
    let map = analysis::erf_map_with(
        |x| nn::conv2d(x, &w, None, &spec),
        &[img],
        ErfNormalization::AverageThenNormalize,
        0,
    )
    .map_err(|e| e.to_string())?;
    if map.support_radius(1e-12) > k / 2 {
        return Err("depthwise ERF exceeds kernel radius".into());
    }
    Ok(())
}

fn cmd_selftest(args: &[String]) -> Result<()> {
    let flags = Flags::parse(args, &[], &[], "llic selftest")?;
    if flags.wants_help() {
        return Ok(());
    }
    let checks: Vec<Check> = vec![
        ("gradient spot checks", check_gradients),
        ("zero-init identities", check_zero_init_identities),
        ("range coder roundtrips", check_coder_roundtrips),
        ("MACs cost model", check_macs_numbers),
        ("BD-rate identities", check_bd_rate_identities),
        ("metric sanity", check_metric_sanity),
        ("codec roundtrip", check_codec_roundtrip),
        ("LR schedule", check_lr_schedule),
        ("ERF locality", check_erf_locality),
    ];
    let mut failures = 0;
    for (name, f) in checks {
        match f() {
            Ok(()) => println!("[ ok ] {name}"),
            Err(msg) => {
                failures += 1;
                println!("[FAIL] {name}: {msg}");
            }
        }
    }
    if failures > 0 {
        return Err(Error::Numeric(format!("{failures} selftest check(s) failed")));
    }
    println!("all selftest checks passed");
    Ok(())
}
