//! End-to-end acceptance suite. Every criterion runs even if an earlier one
//! fails; each prints one `PASS`/`FAIL` line straight to stderr so the lines
//! show up without `--nocapture`.

use bsonet_core::baselines::{
    bilateral_filter, gaussian_blur, gaussian_filter, nlm_denoise, BaselineConfig,
};
use bsonet_core::image::{decode_raw16, denormalize, normalize, quantize, write_image};
use bsonet_core::metrics::{charbonnier_loss, cpbd, local_contrast, psnr_mse, LossConfig, Reduction};
use bsonet_core::n2v::{build_pair, mask_pixels, N2VConfig};
use bsonet_core::noise::{apply_noise, NoiseConfig};
use bsonet_core::phantom::{generate_phantom, random_scene, Primitive, SceneSpec};
use bsonet_core::resize::resize_bicubic;
use bsonet_core::Image;
use bsonet_model::bsformer::{window_partition, window_reverse, BSformer, BSformerConfig, InitMode, WindowAttention};
use bsonet_model::checkpoint::Checkpoint;
use bsonet_model::eval::{evaluate, EvalSample, Method};
use bsonet_model::nn::{Init, NamedParam, Params};
use bsonet_model::optim::cosine_lr;
use bsonet_model::ranet::{RANet, RANetConfig};
use bsonet_model::train::{charbonnier_tensor, select_best, train, TrainConfig, TrainOutcome};
use bsonet_model::{BSoNet, ModelConfig, Precision};
use bsonet_service::protocol::{
    decode_frame, encode_frame, ErrorReply, Message, OptimizeRequest, OptimizeResponse,
};
use bsonet_service::{serve, Client, ServerConfig};
use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

fn report(line: &str) {
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn values(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1().unwrap()
}

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng(seed);
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn down_up_oracle(img: &Image, working: (usize, usize)) -> Vec<u16> {
    let norm = img.map(normalize);
    let small = resize_bicubic(&norm, working.0, working.1).unwrap();
    let back = resize_bicubic(&small, img.height(), img.width()).unwrap();
    back.pixels().iter().map(|&v| quantize(denormalize(v))).collect()
}

// ---------------------------------------------------------------- 1

fn local_contrast_oracle(img: &Image) -> f64 {
    let (m, n) = img.dims();
    let mut num = 0.0;
    for i in 0..m as isize {
        for j in 0..n as isize {
            for k in i - 1..=i + 1 {
                for l in j - 1..=j + 1 {
                    if (k, l) == (i, j) || k < 0 || l < 0 || k >= m as isize || l >= n as isize {
                        continue;
                    }
                    let d = img.get(i as usize, j as usize) - img.get(k as usize, l as usize);
                    num += d * d;
                }
            }
        }
    }
    let (mf, nf) = (m as f64, n as f64);
    let den = 8.0 * (mf - 2.0) * (nf - 2.0) + 5.0 * (2.0 * (mf - 2.0) + 2.0 * (nf - 2.0)) + 12.0;
    (num / den).sqrt()
}

fn criterion_1() -> Result<String, String> {
    let start = Instant::now();
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let img = Image::from_fn(16, 16, |_, _| r.random_range(0.0..65535.0)).unwrap();
        let d = (local_contrast(&img).unwrap() - local_contrast_oracle(&img)).abs();
        worst = worst.max(d);
    }
    if worst > 1e-9 {
        return Err(format!("max deviation {worst:e}"));
    }
    if local_contrast(&Image::filled(16, 16, 4321.0).unwrap()).unwrap() != 0.0 {
        return Err("constant image has nonzero contrast".into());
    }
    let diag = Image::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let center = Image::from_fn(3, 3, |r, c| if (r, c) == (1, 1) { 1.0 } else { 0.0 }).unwrap();
    let a = local_contrast(&diag).unwrap();
    let b = local_contrast(&center).unwrap();
    if !close(a, (8.0f64 / 12.0).sqrt(), 1e-9) || !close(b, (16.0f64 / 40.0).sqrt(), 1e-9) {
        return Err(format!("hand values {a} {b}"));
    }
    let t = start.elapsed();
    if t > Duration::from_secs(10) {
        return Err(format!("took {t:?}"));
    }
    Ok(format!("max deviation {worst:.1e}, {t:.2?}"))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Result<String, String> {
    let cfg = LossConfig::default();
    let mut r = rng(2);
    let x: Vec<f64> = (0..500).map(|_| r.random_range(-3.0..3.0)).collect();
    if charbonnier_loss(&x, &x, None, &cfg).unwrap() != 1e-3 {
        return Err("loss(x, x) != 1e-3".into());
    }
    for _ in 0..100 {
        let (p, t) = (r.random_range(-2.0..2.0), r.random_range(-2.0..2.0));
        let got = charbonnier_loss(&[p], &[t], None, &cfg).unwrap();
        let want = ((p - t) * (p - t) + 1e-6f64).sqrt();
        if !close(got, want, 1e-12) {
            return Err(format!("single pixel {got} vs {want}"));
        }
    }
    for _ in 0..1000 {
        let n = r.random_range(1..40);
        let a: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let ab = charbonnier_loss(&a, &b, None, &cfg).unwrap();
        let ba = charbonnier_loss(&b, &a, None, &cfg).unwrap();
        if ab != ba {
            return Err(format!("asymmetric: {ab} vs {ba}"));
        }
    }
    Ok("exact at zero, closed form to 1e-12, symmetric on 1000 pairs".into())
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Result<String, String> {
    let mut r = rng(3);
    for i in 0..50u64 {
        let (w, h) = (r.random_range(3..120), r.random_range(3..120));
        // Pixel value encodes its own position.
        let img = Image::from_fn(w, h, |y, x| (y * w + x) as f64).unwrap();
        let cfg = N2VConfig::default().with_seed(i);
        let (masked, mask) = mask_pixels(&img, &cfg).unwrap();
        let want = (0.1 * (w * h) as f64).round() as usize;
        if mask.count() != want {
            return Err(format!("{w}x{h}: {} masked, expected {want}", mask.count()));
        }
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    let src = masked.get(y, x) as usize;
                    let (sy, sx) = (src / w, src % w);
                    if sy.abs_diff(y) > 2 || sx.abs_diff(x) > 2 || (sy, sx) == (y, x) {
                        return Err(format!("({y},{x}) took value from ({sy},{sx})"));
                    }
                }
            }
        }
        if mask_pixels(&img, &cfg).unwrap() != (masked, mask) {
            return Err("masking not deterministic".into());
        }
    }
    let raw = generate_phantom(&random_scene(64, 64, 3), 3).unwrap();
    let cfg = N2VConfig::default().with_seed(33);
    if build_pair(&raw, &cfg).unwrap() != build_pair(&raw, &cfg).unwrap() {
        return Err("pairs not deterministic".into());
    }
    Ok("50 sizes, counts exact, sources within 5x5".into())
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Result<String, String> {
    let level = 30000.0;
    let flat = Image::filled(2000, 2000, level).unwrap();
    let noisy = apply_noise(&flat, &NoiseConfig::gaussian(400.0, 4)).unwrap();
    let n = noisy.len() as f64;
    let mean = noisy.pixels().iter().sum::<f64>() / n;
    let var = noisy.pixels().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let std = var.sqrt();
    if (std - 400.0).abs() > 8.0 {
        return Err(format!("sample std {std:.3}"));
    }
    Ok(format!("sample std {std:.2} over {n:.0} pixels"))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Result<String, String> {
    for precision in [Precision::F32, Precision::F64] {
        let net = BSformer::init(&BSformerConfig::toy(), precision, InitMode::Identity).unwrap();
        let x = random_tensor(&[2, 1, 64, 64], 5).to_dtype(precision.dtype()).unwrap();
        if values(&net.forward(&x).unwrap()) != values(&x) {
            return Err(format!("identity BSformer not exact in {precision:?}"));
        }
    }
    let ranet = RANet::init(&RANetConfig::default(), Precision::F64).unwrap();
    let mut r = rng(5);
    let img = Image::from_fn(45, 61, |_, _| r.random_range(0.0..1.0)).unwrap();
    let x = Tensor::from_vec(img.pixels().to_vec(), (1, 1, 61, 45), &Device::Cpu).unwrap();
    let y = ranet.forward(&x, (96, 80)).unwrap();
    if values(&y) != resize_bicubic(&img, 96, 80).unwrap().pixels() {
        return Err("fresh RANet differs from bicubic".into());
    }
    let t = random_tensor(&[2, 24, 16, 3], 6);
    let w = window_partition(&t, 8).unwrap();
    if w.dims() != [12, 64, 3] || values(&window_reverse(&w, 8, 2, 24, 16).unwrap()) != values(&t) {
        return Err("window partition is not a bijection".into());
    }
    let mut init = Init::new(7, Precision::F64);
    let attn = WindowAttention::new(&mut init, 16, 4, 8).unwrap();
    let p = values(&attn.probabilities(&random_tensor(&[3, 64, 16], 8)).unwrap());
    let worst = p.chunks(64).map(|row| (row.iter().sum::<f64>() - 1.0).abs()).fold(0.0, f64::max);
    if worst > 1e-6 || p.iter().any(|&v| v < 0.0) {
        return Err(format!("attention row sum off by {worst:e}"));
    }
    Ok(format!("identities exact, attention row error {worst:.1e}"))
}

// ---------------------------------------------------------------- 6

fn tiny_pipeline() -> ModelConfig {
    ModelConfig {
        ranet: RANetConfig {
            channels: 4,
            num_layers: 1,
            ca_reduction: 2,
            working_size: (32, 32),
            ..RANetConfig::default()
        },
        bsformer: BSformerConfig {
            embed_dim: 8,
            encoder_depths: vec![1],
            bottleneck_depth: 1,
            heads: vec![1, 2],
            fln_subsets: 4,
            fln_dcr_blocks: 1,
            dcr_growth: 4,
            ..BSformerConfig::toy()
        },
    }
}

fn set_entry(p: &NamedParam, index: usize, value: f64) {
    let t = p.var.as_tensor();
    let mut v = values(t);
    v[index] = value;
    p.var.set(&Tensor::from_vec(v, t.shape(), &Device::Cpu).unwrap()).unwrap();
}

fn criterion_6() -> Result<String, String> {
    const H: f64 = 1e-6;
    let start = Instant::now();
    let model = BSoNet::init(&tiny_pipeline(), Precision::F64, InitMode::Standard).unwrap();
    let params = model.named_params();
    // Move off the zero-initialized projections so every path carries gradient.
    let mut r = rng(6);
    for p in &params {
        let t = p.var.as_tensor();
        let noise: Vec<f64> = (0..t.elem_count()).map(|_| r.random_range(-0.05..0.05)).collect();
        p.var.set(&(t + Tensor::from_vec(noise, t.shape(), &Device::Cpu).unwrap()).unwrap()).unwrap();
    }
    let raw = generate_phantom(&random_scene(32, 32, 6), 6).unwrap();
    let pair = build_pair(&raw, &N2VConfig::default().with_seed(6)).unwrap();
    let tensor = |v: Vec<f64>| Tensor::from_vec(v, (1, 1, 32, 32), &Device::Cpu).unwrap();
    let input = tensor(pair.input.pixels().iter().map(|&v| normalize(v)).collect());
    let target = tensor(pair.target.pixels().iter().map(|&v| normalize(v)).collect());
    let mask = tensor(pair.mask.bits().iter().map(|&b| b as u8 as f64).collect());
    let loss = || {
        let pred = model.forward(&input).unwrap();
        let l = charbonnier_tensor(&pred, &target, Some(&mask), 1e-3, Reduction::MaskedMean).unwrap();
        l.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    };
    let l = charbonnier_tensor(&model.forward(&input).unwrap(), &target, Some(&mask), 1e-3, Reduction::MaskedMean)
        .unwrap();
    let grads = l.backward().unwrap();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| grads.get(p.var.as_tensor()).map(values).unwrap_or_else(|| vec![0.0; p.var.elem_count()]))
        .collect();

    let mut checked = std::collections::HashSet::new();
    let mut worst: f64 = 0.0;
    let mut tries = 0;
    while checked.len() < 24 {
        tries += 1;
        if tries > 5000 {
            return Err("too few parameters with usable gradients".into());
        }
        let pi = r.random_range(0..params.len());
        let ei = r.random_range(0..params[pi].var.elem_count());
        let a = analytic[pi][ei];
        if a.abs() < 1e-7 || !checked.insert((pi, ei)) {
            continue;
        }
        let p = &params[pi];
        let orig = values(p.var.as_tensor())[ei];
        set_entry(p, ei, orig + H);
        let up = loss();
        set_entry(p, ei, orig - H);
        let down = loss();
        set_entry(p, ei, orig);
        let numeric = (up - down) / (2.0 * H);
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs());
        worst = worst.max(rel);
        if rel >= 1e-4 {
            return Err(format!("{}[{ei}]: analytic {a:e} numeric {numeric:e}", p.name));
        }
    }
    let t = start.elapsed();
    if t > Duration::from_secs(120) {
        return Err(format!("took {t:?}"));
    }
    Ok(format!("24 parameters, worst relative error {worst:.1e}, {t:.1?}"))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Result<String, String> {
    let (a, b) = (cosine_lr(0, 250, 1e-4, 1e-6).unwrap(), cosine_lr(250, 250, 1e-4, 1e-6).unwrap());
    if a != 1e-4 || b != 1e-6 {
        return Err(format!("endpoints {a} {b}"));
    }
    let mid = cosine_lr(125, 250, 1e-4, 1e-6).unwrap();
    if !close(mid, 5.05e-5, 1e-15) {
        return Err(format!("midpoint {mid}"));
    }
    let mut r = rng(7);
    for _ in 0..200 {
        let n = r.random_range(1..60);
        let h: Vec<f64> = (0..n).map(|_| r.random_range(0.0..1.0)).collect();
        let mut argmin = 0;
        for i in 1..n {
            if h[i] < h[argmin] {
                argmin = i;
            }
        }
        if select_best(&h) != Some(argmin + 1) {
            return Err(format!("best epoch mismatch on {h:?}"));
        }
    }
    Ok("endpoints exact, midpoint 5.05e-5, argmin on 200 histories".into())
}

// ---------------------------------------------------------------- 8

struct Efficacy {
    outcome: TrainOutcome,
    clean: Vec<Image>,
    noisy: Vec<Image>,
    seconds: f64,
}

fn efficacy_run() -> &'static Efficacy {
    static RUN: OnceLock<Efficacy> = OnceLock::new();
    RUN.get_or_init(|| {
        let (mut clean, mut noisy) = (Vec::new(), Vec::new());
        for i in 0..40u64 {
            let c = generate_phantom(&random_scene(64, 64, i), i).unwrap();
            noisy.push(apply_noise(&c, &NoiseConfig::gaussian(400.0, 1000 + i)).unwrap());
            clean.push(c);
        }
        let cfg = TrainConfig { seed: 7, ..TrainConfig::toy() };
        let start = Instant::now();
        let outcome = train(&noisy[..32], &N2VConfig::default(), &ModelConfig::toy(), &cfg).unwrap();
        Efficacy { outcome, clean, noisy, seconds: start.elapsed().as_secs_f64() }
    })
}

fn criterion_8() -> Result<String, String> {
    let run = efficacy_run();
    let epochs = run.outcome.history.len();
    if epochs > 200 {
        return Err(format!("{epochs} epochs"));
    }
    let model = run.outcome.checkpoint.to_model().unwrap();
    let samples: Vec<EvalSample> = (32..40)
        .map(|i| EvalSample {
            id: format!("held_out_{i}"),
            input: run.noisy[i].clone(),
            clean: Some(run.clean[i].clone()),
        })
        .collect();
    let psnr = |m: Method| {
        evaluate(m, &samples, Some(&model), &BaselineConfig::default()).unwrap().summary.mean_psnr.unwrap()
    };
    let (noisy, gauss, ours) = (psnr(Method::Identity), psnr(Method::Gaussian), psnr(Method::Bsonet));
    let summary = format!(
        "BSoNet {ours:.2} dB, noisy {noisy:.2} dB, gaussian {gauss:.2} dB; {epochs} epochs in {:.0} s",
        run.seconds
    );
    if ours < noisy + 2.0 || ours < gauss || run.seconds > 7200.0 {
        return Err(summary);
    }
    Ok(summary)
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Result<String, String> {
    let cfg = BaselineConfig::default();
    for v in [0.0, 1234.5, 65535.0] {
        let img = Image::filled(40, 33, v).unwrap();
        let outs = [
            gaussian_filter(&img, &cfg.gaussian),
            bilateral_filter(&img, &cfg.bilateral),
            nlm_denoise(&img, &cfg.nlm).unwrap(),
        ];
        if outs.iter().any(|o| o.pixels().iter().any(|&p| (p - v).abs() > 1e-9)) {
            return Err(format!("constant {v} not preserved"));
        }
    }
    let mut img = Image::filled(21, 21, 0.0).unwrap();
    img.set(10, 10, 1.0);
    let out = gaussian_filter(&img, &cfg.gaussian);
    let (s, rad) = (cfg.gaussian.sigma, (cfg.gaussian.kernel_size / 2) as i32);
    let g = |d: i32| (-((d * d) as f64) / (2.0 * s * s)).exp();
    let norm: f64 = (-rad..=rad).map(g).sum();
    for r in 0..21 {
        for c in 0..21 {
            let (dy, dx) = (r as i32 - 10, c as i32 - 10);
            let want = if dy.abs() <= rad && dx.abs() <= rad { g(dy) * g(dx) / (norm * norm) } else { 0.0 };
            if (out.get(r, c) - want).abs() > 1e-9 {
                return Err(format!("impulse response at ({r},{c})"));
            }
        }
    }
    let (mut before, mut bil, mut nlm) = (0.0, 0.0, 0.0);
    for seed in 0..8u64 {
        let clean = generate_phantom(&random_scene(64, 64, 900 + seed), seed).unwrap();
        let noisy = apply_noise(&clean, &NoiseConfig::gaussian(400.0, 950 + seed)).unwrap();
        let b = psnr_mse(&noisy, &clean).unwrap().1;
        let bl = psnr_mse(&bilateral_filter(&noisy, &cfg.bilateral), &clean).unwrap().1;
        let nl = psnr_mse(&nlm_denoise(&noisy, &cfg.nlm).unwrap(), &clean).unwrap().1;
        if bl >= b || nl >= b {
            return Err(format!("phantom {seed}: mse noisy {b:.0}, bilateral {bl:.0}, nlm {nl:.0}"));
        }
        before += b;
        bil += bl;
        nlm += nl;
    }
    Ok(format!("mean mse noisy {:.0}, bilateral {:.0}, nlm {:.0}", before / 8.0, bil / 8.0, nlm / 8.0))
}

// ---------------------------------------------------------------- 10

fn bar_phantom(seed: u64) -> Image {
    let mut r = rng(seed);
    let bar_width = r.random_range(3..6);
    let gap = r.random_range(3..7);
    let count = r.random_range(3..6);
    let span = count * bar_width + (count - 1) * gap;
    let background = r.random_range(2000.0..10000.0);
    let spec = SceneSpec::new(64, 64, background).with(Primitive::BarGroup {
        x: r.random_range(4..64 - span - 4),
        y: r.random_range(4..20),
        bar_width,
        gap,
        count,
        bar_height: r.random_range(24..40),
        intensity: background + r.random_range(8000.0..40000.0),
    });
    generate_phantom(&spec, seed).unwrap()
}

fn criterion_10() -> Result<String, String> {
    let mut wins = 0;
    for seed in 0..40u64 {
        let sharp = bar_phantom(seed);
        let blurred = gaussian_blur(&sharp, 2.0, 6);
        let (a, b) = (cpbd(&sharp).unwrap(), cpbd(&blurred).unwrap());
        for s in [a.score, b.score] {
            if !(0.0..=1.0).contains(&s) {
                return Err(format!("score {s} out of range"));
            }
        }
        if a.score > b.score {
            wins += 1;
        }
    }
    let mut r = rng(10);
    for seed in 0..40u64 {
        let noisy = apply_noise(&generate_phantom(&random_scene(64, 64, seed), seed).unwrap(), &NoiseConfig::gaussian(r.random_range(0.0..2000.0), seed))
            .unwrap();
        let s = cpbd(&noisy).unwrap().score;
        if !(0.0..=1.0).contains(&s) {
            return Err(format!("score {s} out of range"));
        }
    }
    let flat = cpbd(&Image::filled(64, 64, 777.0).unwrap()).unwrap();
    if !flat.no_edges || flat.score != 1.0 {
        return Err("edgeless image not scored 1.0 with the flag".into());
    }
    if wins * 100 < 95 * 40 {
        return Err(format!("sharp beats blurred on {wins}/40"));
    }
    Ok(format!("sharp beats blurred on {wins}/40, edgeless convention holds"))
}

// ---------------------------------------------------------------- 11

fn random_message(r: &mut ChaCha8Rng) -> Message {
    let image = |r: &mut ChaCha8Rng| {
        let (w, h) = (r.random_range(0..10u32), r.random_range(0..10u32));
        (w, h, (0..w * h).map(|_| r.random()).collect::<Vec<u16>>())
    };
    match r.random_range(0..5) {
        0 => Message::Ping,
        1 => Message::Pong,
        2 => {
            let (width, height, pixels) = image(r);
            Message::Request(OptimizeRequest { request_id: r.random(), width, height, pixels })
        }
        3 => {
            let (width, height, pixels) = image(r);
            Message::Response(OptimizeResponse {
                request_id: r.random(),
                status: r.random(),
                inference_micros: r.random(),
                width,
                height,
                pixels,
            })
        }
        _ => {
            let len = r.random_range(0..30);
            let message: String = (0..len).map(|_| r.random::<char>()).collect();
            Message::Error(ErrorReply { request_id: r.random(), status: r.random(), message })
        }
    }
}

fn criterion_11() -> Result<String, String> {
    let mut r = rng(11);
    for _ in 0..1000 {
        let m = random_message(&mut r);
        let bytes = encode_frame(&m);
        if decode_frame(&bytes).as_ref() != Ok(&m) {
            return Err(format!("round trip failed for {m:?}"));
        }
    }
    if encode_frame(&Message::Ping) != [0x42, 0x53, 0x4E, 0x31, 0x04, 0, 0, 0, 0] {
        return Err("ping frame".into());
    }
    let mut golden = vec![0x42, 0x53, 0x4E, 0x31, 0x01, 0, 0, 0, 22];
    golden.extend_from_slice(&[0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 1, 16, 0, 0, 0, 0, 0]);
    let one = Message::Request(OptimizeRequest { request_id: 1, width: 1, height: 1, pixels: vec![0] });
    if golden.len() != 31 || encode_frame(&one) != golden || decode_frame(&golden) != Ok(one) {
        return Err("1x1 request frame".into());
    }

    let storage = tempfile::tempdir().unwrap();
    let model = BSoNet::init(&ModelConfig::toy(), Precision::F64, InitMode::Identity).unwrap();
    let server = serve(
        model,
        ServerConfig { bind: "127.0.0.1:0".into(), storage_root: storage.path().into(), ..ServerConfig::default() },
    )
    .map_err(|e| e.to_string())?;
    let addr = server.local_addr();
    let img = Image::from_fn(64, 64, |y, x| 9000.0 + 40.0 * (y + x) as f64).unwrap();
    let valid = encode_frame(&Message::Request(OptimizeRequest {
        request_id: 5,
        width: 64,
        height: 64,
        pixels: img.to_u16(),
    }));
    for case in 0..100 {
        let bytes: Vec<u8> = if case % 2 == 0 {
            (0..64).map(|_| r.random()).collect()
        } else {
            let mut v = valid.clone();
            for _ in 0..r.random_range(1..8) {
                v[r.random_range(0..64)] = r.random();
            }
            v
        };
        let mut s = TcpStream::connect(addr).map_err(|e| format!("fuzz case {case}: {e}"))?;
        s.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
        let _ = s.write_all(&bytes);
        let _ = s.shutdown(Shutdown::Write);
        let _ = s.read_to_end(&mut Vec::new());
    }
    let mut client = Client::connect(addr, Duration::from_secs(30)).map_err(|e| e.to_string())?;
    let out = client.optimize_with_id(&img, 77).map_err(|e| format!("after fuzzing: {e}"))?;
    if out.request_id != 77 || out.image.to_u16() != down_up_oracle(&img, (64, 64)) {
        return Err("wrong answer after fuzzing".into());
    }

    let threads: Vec<_> = (0..2u64)
        .map(|c| {
            std::thread::spawn(move || -> Result<Vec<u64>, String> {
                let mut client = Client::connect(addr, Duration::from_secs(30)).map_err(|e| e.to_string())?;
                let mut ids = Vec::new();
                for k in 0..10u64 {
                    let id = (c + 1) * 100 + k;
                    let img = Image::from_fn(64, 64, |y, x| (id * 50 + (y * 64 + x) as u64) as f64).unwrap();
                    let out = client.optimize_with_id(&img, id).map_err(|e| e.to_string())?;
                    if out.image.to_u16() != down_up_oracle(&img, (64, 64)) {
                        return Err(format!("request {id} got someone else's image"));
                    }
                    ids.push(out.request_id);
                }
                Ok(ids)
            })
        })
        .collect();
    let mut ids = Vec::new();
    for t in threads {
        ids.extend(t.join().map_err(|_| "client thread panicked".to_string())??);
    }
    ids.sort();
    let expected: Vec<u64> = (1..=2).flat_map(|c| (0..10).map(move |k| c * 100 + k)).collect();
    if ids != expected {
        return Err(format!("responses {ids:?}"));
    }
    Ok("1000 round trips, golden frames exact, 100 fuzz cases survived, 2x10 concurrent exactly once".into())
}

// ---------------------------------------------------------------- 12

struct ServeProcess {
    child: Child,
    addr: String,
}

impl Drop for ServeProcess {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

fn bsonet() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_bsonet"));
    cmd.env_remove("BSONET_PORT").env("RUST_LOG", "warn");
    cmd
}

fn start_cli_server(checkpoint: &Path, storage: &Path) -> Result<ServeProcess, String> {
    let mut child = bsonet()
        .args(["serve", "--bind", "127.0.0.1:0", "--checkpoint"])
        .arg(checkpoint)
        .arg("--storage")
        .arg(storage)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| e.to_string())?;
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).map_err(|e| e.to_string())?;
    let addr = line
        .trim()
        .strip_prefix("listening on ")
        .ok_or_else(|| format!("unexpected serve output {line:?}"))?
        .to_string();
    Ok(ServeProcess { child, addr })
}

fn cli_send(addr: &str, input: &Path, out: &Path) -> Result<Image, String> {
    let output = bsonet()
        .args(["send", "--server", addr, "--out"])
        .arg(out)
        .arg(input)
        .output()
        .map_err(|e| e.to_string())?;
    if !output.status.success() {
        return Err(format!("send failed: {}", String::from_utf8_lossy(&output.stderr)));
    }
    let bytes = std::fs::read(out.join(input.file_name().unwrap())).map_err(|e| e.to_string())?;
    decode_raw16(&bytes).map_err(|e| e.to_string())
}

fn criterion_12() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let identity = BSoNet::init(&ModelConfig::toy(), Precision::F64, InitMode::Identity).unwrap();
    let ck_path = root.join("identity.ckpt");
    Checkpoint::from_model(&identity, 0, None).unwrap().save(&ck_path).unwrap();
    let mut r = rng(12);
    let img = Image::from_fn(97, 83, |y, x| {
        (6000.0 + 150.0 * y as f64 + 90.0 * x as f64 + r.random_range(0.0..2500.0)).round()
    })
    .unwrap();
    let input = root.join("probe.bsr");
    write_image(&img, &input).unwrap();
    let server = start_cli_server(&ck_path, &root.join("store_identity"))?;
    let out = cli_send(&server.addr, &input, &root.join("out_identity"))?;
    if out.to_u16() != down_up_oracle(&img, ModelConfig::toy().working_size()) {
        return Err("identity round trip differs from the bicubic down-up oracle".into());
    }
    drop(server);

    let trained = root.join("trained.ckpt");
    efficacy_run().outcome.checkpoint.save(&trained).unwrap();
    let big = Image::from_fn(256, 256, |y, x| {
        (12000.0 + 20.0 * y as f64 + 10.0 * x as f64 + r.random_range(0.0..1600.0)).round()
    })
    .unwrap();
    let big_path = root.join("big.bsr");
    write_image(&big, &big_path).unwrap();
    let server = start_cli_server(&trained, &root.join("store_trained"))?;
    let mut client = Client::connect(server.addr.as_str(), Duration::from_secs(30)).map_err(|e| e.to_string())?;
    let start = Instant::now();
    let result = client.optimize(&big).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    if result.image.dims() != (256, 256) {
        return Err("wrong output size".into());
    }
    // The CLI client path as well.
    cli_send(&server.addr, &big_path, &root.join("out_trained"))?;
    if elapsed > Duration::from_secs(5) {
        return Err(format!("256x256 round trip took {elapsed:?}"));
    }
    Ok(format!(
        "identity loopback bit-exact; trained 256x256 round trip {:.0} ms (inference {:.0} ms)",
        elapsed.as_secs_f64() * 1e3,
        result.inference_micros as f64 / 1e3
    ))
}

#[test]
fn acceptance_criteria() {
    let criteria: [(&str, fn() -> Result<String, String>); 12] = [
        ("local contrast oracle", criterion_1),
        ("charbonnier exactness", criterion_2),
        ("n2v masking contract", criterion_3),
        ("noise statistics", criterion_4),
        ("architecture identities", criterion_5),
        ("gradient check", criterion_6),
        ("schedule and best epoch", criterion_7),
        ("learning efficacy", criterion_8),
        ("baseline sanity", criterion_9),
        ("cpbd behavior", criterion_10),
        ("protocol", criterion_11),
        ("end to end", criterion_12),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => report(&format!("PASS criterion {n:2} {name}: {detail}")),
            Err(detail) => {
                report(&format!("FAIL criterion {n:2} {name}: {detail}"));
                failed.push(n);
            }
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
