//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fail.
//!
//! Run with `cargo test -p wbstudio-core --test acceptance --release` for
//! representative timings.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wbstudio_core::colormap::{apply_mapping_unclamped, fit_mapping, fit_rms, poly_kernel, POLY_TERMS};
use wbstudio_core::metrics::{aggregate, ciede2000, mae, Lab};
use wbstudio_core::model::{Architecture, DecoderId, NetConfig, WbNet};
use wbstudio_core::pipeline::{blend_temperature, edit_wb, evaluate, identity_baseline, interpolation_ratio, resize_for_net, EditRequest, WbTarget};
use wbstudio_core::synthdata::make_dataset;
use wbstudio_core::tensor::{grad_check, GradCheckConfig, Graph, Reduction, Tensor4, Var};
use wbstudio_core::training::{fit, smoothed_losses, TrainConfig};
use wbstudio_core::ImageRGB;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_tensor(dims: [usize; 4], seed: u64) -> Tensor4 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor4::from_fn(dims, |_| rng.random_range(0.0..1.0))
}

fn random_image(w: usize, h: usize, seed: u64) -> ImageRGB {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImageRGB::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()])
}

fn tiny(arch: Architecture, levels: usize) -> NetConfig {
    NetConfig {
        levels,
        base_channels: 4,
        architecture: arch,
        ..NetConfig::default()
    }
}

/// Summed L1 of every decoder against its target.
fn joint_loss(net: &WbNet, g: &mut Graph, pv: &[Var], x: Var, targets: &[Tensor4]) -> wbstudio_core::Result<Var> {
    let outs = net.forward_all_graph(g, pv, x)?;
    let losses = outs
        .iter()
        .zip(targets)
        .map(|((_, y), t)| {
            let t = g.constant(t.clone());
            g.l1_loss(*y, t, Reduction::Mean)
        })
        .collect::<wbstudio_core::Result<Vec<_>>>()?;
    g.sum_all(&losses)
}

/// Parameters as constants, except `params[probe.0]` which becomes `probe.1`.
fn bind_with(net: &WbNet, g: &mut Graph, probe: Option<(usize, Var)>) -> Vec<Var> {
    net.params()
        .iter()
        .enumerate()
        .map(|(i, p)| match probe {
            Some((j, v)) if j == i => v,
            _ => g.constant(p.tensor.clone()),
        })
        .collect()
}

fn gradient_check() -> Outcome {
    let start = Instant::now();
    let net = WbNet::build(tiny(Architecture::SharedEncoder, 2), 7).map_err(|e| e.to_string())?;
    let x = random_tensor([1, 3, 16, 16], 1);
    let targets: Vec<Tensor4> = (0..3).map(|i| random_tensor([1, 3, 16, 16], 10 + i)).collect();
    // ReLU, max-pool and |.| kinks make the difference quotient O(step).
    let cfg = GradCheckConfig {
        step: 1e-4,
        ..GradCheckConfig::default()
    };

    let input_report = grad_check(
        |g, v| {
            let pv = bind_with(&net, g, None);
            joint_loss(&net, g, &pv, v, &targets)
        },
        &x,
        cfg,
    )
    .map_err(|e| e.to_string())?;
    let mut worst = (input_report.max_rel_error, String::from("input"));

    let mut checked = x.len();
    for (i, p) in net.params().iter().enumerate() {
        let r = grad_check(
            |g, v| {
                let pv = bind_with(&net, g, Some((i, v)));
                let xv = g.constant(x.clone());
                joint_loss(&net, g, &pv, xv, &targets)
            },
            &p.tensor,
            cfg,
        )
        .map_err(|e| e.to_string())?;
        checked += p.tensor.len();
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, p.name.clone());
        }
    }
    let elapsed = start.elapsed();
    ensure(
        worst.0 < 1e-2 && elapsed < Duration::from_secs(60),
        format!(
            "{checked} gradient entries, max relative error {:.2e} (worst tensor {}) < 1e-2, {:.1} s < 60 s",
            worst.0,
            worst.1,
            elapsed.as_secs_f64()
        ),
    )
}

fn aggregation() -> Outcome {
    let net = WbNet::build(tiny(Architecture::SharedEncoder, 4), 11).map_err(|e| e.to_string())?;
    let x = random_tensor([1, 3, 32, 32], 12);
    let targets: Vec<Tensor4> = (0..3).map(|i| random_tensor([1, 3, 32, 32], 20 + i)).collect();

    let run = |which: Option<usize>| -> wbstudio_core::Result<Vec<Option<Tensor4>>> {
        let mut g = Graph::new();
        let pv = net.bind(&mut g, true);
        let xv = g.constant(x.clone());
        let outs = net.forward_all_graph(&mut g, &pv, xv)?;
        let mut losses = Vec::new();
        for (i, (_, y)) in outs.iter().enumerate() {
            if which.is_none_or(|w| w == i) {
                let t = g.constant(targets[i].clone());
                losses.push(g.l1_loss(*y, t, Reduction::Mean)?);
            }
        }
        let total = g.sum_all(&losses)?;
        let mut grads = g.backward(total)?;
        Ok(pv.iter().map(|&v| grads.take(v)).collect())
    };
    let joint = run(None).map_err(|e| e.to_string())?;
    let parts = (0..3).map(|i| run(Some(i))).collect::<wbstudio_core::Result<Vec<_>>>().map_err(|e| e.to_string())?;

    let mut worst_rel = 0.0f64;
    for &i in &net.encoder_param_indices() {
        let j = joint[i].as_ref().ok_or("missing encoder gradient")?.data();
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for (k, &jv) in j.iter().enumerate() {
            let s: f64 = parts.iter().map(|p| p[i].as_ref().map_or(0.0, |t| t.data()[k] as f64)).sum();
            diff += (jv as f64 - s).powi(2);
            norm += s * s;
        }
        worst_rel = worst_rel.max((diff / norm.max(f64::MIN_POSITIVE)).sqrt());
    }
    let mut leaked = 0usize;
    for (d, id) in DecoderId::ALL.into_iter().enumerate() {
        for other in DecoderId::ALL.into_iter().filter(|&o| o != id) {
            for i in net.decoder_param_indices(other).map_err(|e| e.to_string())? {
                if let Some(t) = &parts[d][i] {
                    leaked += t.data().iter().filter(|&&v| v != 0.0).count();
                }
            }
        }
    }
    ensure(
        worst_rel <= 1e-5 && leaked == 0,
        format!("encoder joint vs summed relative error {worst_rel:.2e} <= 1e-5, {leaked} non-zero cross-decoder entries"),
    )
}

fn shapes() -> Outcome {
    let cfg = NetConfig::default();
    let channels = cfg.level_channels();
    if channels != [24, 48, 96, 192] {
        return Err(format!("level channels {channels:?}"));
    }
    let net = WbNet::build(cfg, 3).map_err(|e| e.to_string())?;
    let sizes = [(16, 16), (48, 32), (32, 80)];
    for &(w, h) in &sizes {
        let outs = net.forward_all(&random_image(w, h, 5).to_tensor()).map_err(|e| e.to_string())?;
        for (id, t) in outs {
            if t.dims() != [1, 3, h, w] {
                return Err(format!("{id} output {:?} for {w}x{h} input", t.dims()));
            }
        }
    }
    let odd = random_image(40, 24, 6);
    if net.encode(&odd.to_tensor()).is_ok() {
        return Err("40x24 input accepted by encode".into());
    }
    let fixed = resize_for_net(&odd).map_err(|e| e.to_string())?;
    net.encode(&fixed.to_tensor()).map_err(|e| format!("resized input rejected: {e}"))?;
    Ok(format!(
        "channels {channels:?}, outputs match {sizes:?}, 40x24 rejected then accepted at {:?}",
        fixed.dims()
    ))
}

fn ablation() -> Outcome {
    let shared_cfg = NetConfig {
        base_channels: 8,
        ..NetConfig::default()
    };
    let multi_cfg = NetConfig {
        architecture: Architecture::MultiUNet,
        ..shared_cfg.clone()
    };
    let shared = WbNet::build(shared_cfg.clone(), 1).map_err(|e| e.to_string())?.param_count();
    let single = WbNet::build(
        NetConfig {
            decoder_ids: vec![DecoderId::Awb],
            ..shared_cfg.clone()
        },
        1,
    )
    .map_err(|e| e.to_string())?
    .param_count();
    let multi = WbNet::build(multi_cfg.clone(), 1).map_err(|e| e.to_string())?.param_count();
    if !(shared < multi && shared < 3 * single) {
        return Err(format!("shared {shared}, multi {multi}, 3 x single {}", 3 * single));
    }

    let data = make_dataset(3, 4, 32).map_err(|e| e.to_string())?;
    let mut finals = Vec::new();
    for net in [shared_cfg, multi_cfg] {
        let cfg = TrainConfig {
            iterations: 200,
            batch_size: 2,
            patch: 32,
            checkpoint_every: 0,
            net,
            ..TrainConfig::desk()
        };
        let state = fit(&data, &cfg).map_err(|e| e.to_string())?;
        finals.push(state.loss_history.last().map_or(f64::NAN, |r| r.total));
    }
    Ok(format!(
        "params shared {shared} < independent {multi}; 200 iterations each, final losses {:.3} / {:.3}",
        finals[0], finals[1]
    ))
}

const SMOOTHING_WINDOW: usize = 100;

fn overfit() -> Outcome {
    let start = Instant::now();
    let data = make_dataset(2024, 16, 128).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        checkpoint_every: 0,
        ..TrainConfig::desk()
    };
    if (cfg.net.base_channels, cfg.patch, cfg.batch_size) != (8, 64, 8) || cfg.iterations > 5000 {
        return Err(format!("desk profile drifted: {cfg:?}"));
    }
    let state = fit(&data, &cfg).map_err(|e| e.to_string())?;
    let smoothed = smoothed_losses(&state.loss_history, SMOOTHING_WINDOW);
    let initial = smoothed[0];
    let last = *smoothed.last().ok_or("no losses")?;
    // Trailing means at every window boundary must keep falling.
    let checkpoints: Vec<f64> = smoothed.iter().skip(SMOOTHING_WINDOW - 1).step_by(SMOOTHING_WINDOW).copied().collect();
    let monotone = checkpoints.windows(2).all(|w| w[1] < w[0]);

    let settings = [WbTarget::Awb];
    let net_de = evaluate(&state.net, &data, &settings).map_err(|e| e.to_string())?.aggregate.delta_e2000.mean;
    let id_de = identity_baseline(&data, &settings).map_err(|e| e.to_string())?.aggregate.delta_e2000.mean;
    let elapsed = start.elapsed();
    ensure(
        last < 0.1 * initial && monotone && net_de < id_de && elapsed <= Duration::from_secs(30 * 60),
        format!(
            "{} iterations: smoothed loss {initial:.3} -> {last:.4} ({:.1}% < 10%), window means decreasing: {monotone}, \
             held-in AWB dE2000 {net_de:.3} vs identity {id_de:.3}, {:.0} s <= 1800 s",
            cfg.iterations,
            100.0 * last / initial,
            elapsed.as_secs_f64()
        ),
    )
}

fn poly_target(src: &ImageRGB, f: impl Fn([f32; 3]) -> [f32; 3]) -> ImageRGB {
    ImageRGB::from_fn(src.width(), src.height(), |x, y| f(src.pixel(x, y)))
}

/// Minimum-RMS residual via the normal equations and Cholesky, in f64.
fn normal_equations_rms(src: &ImageRGB, tgt: &ImageRGB) -> Option<f64> {
    let n = src.pixel_count();
    let phi = DMatrix::<f64>::from_fn(n, POLY_TERMS, |i, k| {
        let p = src.pixel(i % src.width(), i / src.width());
        poly_kernel(p)[k] as f64
    });
    let y = DMatrix::<f64>::from_fn(n, 3, |i, c| tgt.pixel(i % src.width(), i / src.width())[c] as f64);
    let a: SMatrix<f64, POLY_TERMS, POLY_TERMS> = SMatrix::from_iterator((phi.transpose() * &phi).iter().copied());
    let b = phi.transpose() * &y;
    let chol = a.cholesky()?;
    let mut sse = 0.0;
    for c in 0..3 {
        let rhs = SVector::<f64, POLY_TERMS>::from_iterator(b.column(c).iter().copied());
        let m = chol.solve(&rhs);
        let pred = &phi * DMatrix::from_column_slice(POLY_TERMS, 1, m.as_slice());
        sse += (pred - y.column(c)).iter().map(|r| r * r).sum::<f64>();
    }
    Some((sse / (3 * n) as f64).sqrt())
}

fn color_mapping() -> Outcome {
    let src = random_image(48, 40, 9);
    let cases: [(&str, ImageRGB); 3] = [
        ("identity", src.clone()),
        ("gains", poly_target(&src, |[r, g, b]| [1.4 * r, 0.9 * g, 0.6 * b + 0.05])),
        (
            "quadratic curves",
            poly_target(&src, |[r, g, b]| [0.2 + 0.5 * r + 0.3 * r * r, g - 0.4 * g * g, 0.1 * b + 0.7 * b * b]),
        ),
    ];
    let mut details = Vec::new();
    for (name, tgt) in &cases {
        let m = fit_mapping(&src, tgt).map_err(|e| e.to_string())?;
        let out = apply_mapping_unclamped(&m, &src);
        let rms = (out.data().iter().zip(tgt.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / out.data().len() as f64).sqrt();
        if rms >= 1e-4 {
            return Err(format!("{name}: pre-clamp RMS {rms:.2e}"));
        }
        details.push(format!("{name} {rms:.1e}"));
    }
    // Residual against the oracle on targets outside the span.
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let tgt = random_image(48, 40, 100 + seed);
        let m = fit_mapping(&src, &tgt).map_err(|e| e.to_string())?;
        let ours = fit_rms(&m, &src, &tgt).map_err(|e| e.to_string())?;
        let oracle = normal_equations_rms(&src, &tgt).ok_or("normal equations not positive definite")?;
        worst = worst.max((ours - oracle).abs());
    }
    ensure(
        worst <= 1e-6,
        format!("RMS {} < 1e-4; residual vs normal equations |diff| {worst:.1e} <= 1e-6", details.join(", ")),
    )
}

fn interpolation() -> Outcome {
    let tungsten = random_image(24, 16, 1);
    let shade = random_image(24, 16, 2);
    let at_t = blend_temperature(&tungsten, &shade, 2850.0).map_err(|e| e.to_string())?;
    let at_s = blend_temperature(&tungsten, &shade, 7500.0).map_err(|e| e.to_string())?;
    let bits = |i: &ImageRGB| i.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    if bits(&at_t) != bits(&tungsten) || bits(&at_s) != bits(&shade) {
        return Err("endpoints differ from the inputs".into());
    }

    let direct = (1.0 / 3800.0 - 1.0 / 7500.0) / (1.0 / 2850.0 - 1.0 / 7500.0);
    let b = interpolation_ratio(3800.0).map_err(|e| e.to_string())?;
    let ones = ImageRGB::from_fn(2, 2, |_, _| [1.0; 3]);
    let zeros = ImageRGB::new(2, 2);
    let blended_b = blend_temperature(&ones, &zeros, 3800.0).map_err(|e| e.to_string())?.data()[0] as f64;
    if (b - direct).abs() > 1e-6 || (blended_b - direct).abs() > 1e-6 || (direct - 0.5968).abs() > 1e-4 {
        return Err(format!("b(3800) = {b}, via blend {blended_b}, direct {direct}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut violations = 0;
    for _ in 0..200 {
        let t = rng.random_range(2850.0..=7500.0);
        let out = blend_temperature(&tungsten, &shade, t).map_err(|e| e.to_string())?;
        for ((&o, &a), &s) in out.data().iter().zip(tungsten.data()).zip(shade.data()) {
            if o < a.min(s) || o > a.max(s) {
                violations += 1;
            }
        }
    }
    ensure(
        violations == 0,
        format!("endpoints bit-exact, b(3800) = {b:.6} (direct {direct:.6}), {violations} convexity violations over 200 temperatures"),
    )
}

/// Sharma, Wu and Dalal test pairs: (L1, a1, b1, L2, a2, b2, dE00).
const SHARMA: [[f64; 7]; 34] = [
    [50.0, 2.6772, -79.7751, 50.0, 0.0, -82.7485, 2.0425],
    [50.0, 3.1571, -77.2803, 50.0, 0.0, -82.7485, 2.8615],
    [50.0, 2.8361, -74.0200, 50.0, 0.0, -82.7485, 3.4412],
    [50.0, -1.3802, -84.2814, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, -1.1848, -84.8006, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, -0.9009, -85.5211, 50.0, 0.0, -82.7485, 1.0000],
    [50.0, 0.0, 0.0, 50.0, -1.0, 2.0, 2.3669],
    [50.0, -1.0, 2.0, 50.0, 0.0, 0.0, 2.3669],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0009, 7.1792],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0010, 7.1792],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0011, 7.2195],
    [50.0, 2.49, -0.001, 50.0, -2.49, 0.0012, 7.2195],
    [50.0, -0.001, 2.49, 50.0, 0.0009, -2.49, 4.8045],
    [50.0, -0.001, 2.49, 50.0, 0.0010, -2.49, 4.8045],
    [50.0, -0.001, 2.49, 50.0, 0.0011, -2.49, 4.7461],
    [50.0, 2.5, 0.0, 50.0, 0.0, -2.5, 4.3065],
    [50.0, 2.5, 0.0, 73.0, 25.0, -18.0, 27.1492],
    [50.0, 2.5, 0.0, 61.0, -5.0, 29.0, 22.8977],
    [50.0, 2.5, 0.0, 56.0, -27.0, -3.0, 31.9030],
    [50.0, 2.5, 0.0, 58.0, 24.0, 15.0, 19.4535],
    [50.0, 2.5, 0.0, 50.0, 3.1736, 0.5854, 1.0000],
    [50.0, 2.5, 0.0, 50.0, 3.2972, 0.0, 1.0000],
    [50.0, 2.5, 0.0, 50.0, 1.8634, 0.5757, 1.0000],
    [50.0, 2.5, 0.0, 50.0, 3.2592, 0.3350, 1.0000],
    [60.2574, -34.0099, 36.2677, 60.4626, -34.1751, 39.4387, 1.2644],
    [63.0109, -31.0961, -5.8663, 62.8187, -29.7946, -4.0864, 1.2630],
    [61.2901, 3.7196, -5.3901, 61.4292, 2.2480, -4.9620, 1.8731],
    [35.0831, -44.1164, 3.7933, 35.0232, -40.0716, 1.5901, 1.8645],
    [22.7233, 20.0904, -46.6940, 23.0331, 14.9730, -42.5619, 2.0373],
    [36.4612, 47.8580, 18.3852, 36.2715, 50.5065, 21.2231, 1.4146],
    [90.8027, -2.0831, 1.4410, 91.1528, -1.6435, 0.0447, 1.4441],
    [90.9257, -0.5406, -0.9208, 88.6381, -0.8985, -0.7239, 1.5381],
    [6.7747, -0.2908, -2.4247, 5.8714, -0.0985, -2.2286, 0.6377],
    [2.0776, 0.0795, -1.1350, 0.9033, -0.0636, -0.5514, 0.9082],
];

fn metrics() -> Outcome {
    let mut worst_de = 0.0f64;
    for (i, r) in SHARMA.iter().enumerate() {
        let d = ciede2000(Lab::new(r[0], r[1], r[2]), Lab::new(r[3], r[4], r[5]));
        let back = ciede2000(Lab::new(r[3], r[4], r[5]), Lab::new(r[0], r[1], r[2]));
        let err = (d - r[6]).abs().max((back - r[6]).abs());
        if err > 1e-4 {
            return Err(format!("pair {}: {d:.5} vs {}", i + 1, r[6]));
        }
        worst_de = worst_de.max(err);
    }

    let red = ImageRGB::from_fn(8, 8, |_, _| [0.8, 0.0, 0.0]);
    let green = ImageRGB::from_fn(8, 8, |_, _| [0.0, 0.5, 0.0]);
    let angle = mae(&red, &green).map_err(|e| e.to_string())?;
    if (angle - 90.0).abs() > 1e-6 {
        return Err(format!("orthogonal MAE {angle}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let samples: Vec<f64> = (0..1000).map(|_| rng.random_range(-5.0..50.0)).collect();
    let s = aggregate(&samples).map_err(|e| e.to_string())?;
    let mut sorted = samples.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // Inclusive definition: position q * (n - 1) between order statistics.
    let oracle = |q: f64| {
        let pos = q * 999.0;
        let (i, frac) = (pos as usize, pos.fract());
        sorted[i] * (1.0 - frac) + sorted[(i + 1).min(999)] * frac
    };
    let mean = samples.iter().sum::<f64>() / 1000.0;
    let qerr = [(s.q1, oracle(0.25)), (s.q2, oracle(0.5)), (s.q3, oracle(0.75)), (s.mean, mean)]
        .iter()
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    ensure(
        qerr <= 1e-9,
        format!("34 Sharma pairs max |err| {worst_de:.1e} <= 1e-4, orthogonal MAE {angle:.9} deg, quartile |err| {qerr:.1e} on 1000 samples"),
    )
}

fn runtime_12mp() -> Outcome {
    let net = WbNet::build(NetConfig::default(), 1).map_err(|e| e.to_string())?;
    let image = ImageRGB::from_fn(4000, 3000, |x, y| [(x % 256) as f32 / 255.0, (y % 256) as f32 / 255.0, ((x + y) % 97) as f32 / 96.0]);
    let start = Instant::now();
    let result = edit_wb(&net, &EditRequest { image, target: WbTarget::Awb }).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    ensure(
        result.output.dims() == (4000, 3000) && elapsed <= Duration::from_secs(5),
        format!("4000x3000 AWB edit in {:.2} s <= 5 s", elapsed.as_secs_f64()),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient correctness", gradient_check),
        ("shared-encoder aggregation", aggregation),
        ("architecture shapes", shapes),
        ("ablation inequality", ablation),
        ("overfit run", overfit),
        ("color-mapping exactness", color_mapping),
        ("interpolation", interpolation),
        ("metrics", metrics),
        ("12MP runtime", runtime_12mp),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(d) => println!("PASS {name}: {d}"),
            Err(d) => {
                failed += 1;
                println!("FAIL {name}: {d}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
