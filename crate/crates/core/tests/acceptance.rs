//! End-to-end acceptance checks, one line per criterion.
//!
//! Run all: `cargo test --release --test acceptance`
//! Run some: `cargo test --release --test acceptance -- 1 3 11`

use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use macgrad::attn_curvature::{
    attention_statistics, empirical_fim_attention, kron_vec, precondition_attn,
    projection_gradient, Projection,
};
use macgrad::cli::{
    prepare_data, run_training, DataConfig, OptimizerBlock, RunConfig, CHECKPOINT_FILE,
    METRICS_FILE,
};
use macgrad::convergence::{
    convergence_factor_compare, gram_closed_form, gram_sigma_inf, run_seed, HarnessConfig,
};
use macgrad::curvature::{
    build_mac_factor, precondition_mac, precondition_smac, Damping, Optimizer, OptimizerConfig,
    OptimizerKind,
};
use macgrad::data::{read_metrics, Checkpoint, DataSource, RecordKind};
use macgrad::nn::{
    flatten_gradients, numeric_gradient, relative_error, LayerSpec, LossKind, Model, ModelSpec,
    Targets,
};
use macgrad::spectra::layer_report;
use macgrad::tensor::dense_inverse;
use macgrad::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Result<Outcome>;

const CRITERIA: [(&str, Check); 13] = [
    ("sherman-morrison oracle", c01_sherman_morrison),
    ("finite-difference gradients", c02_gradients),
    ("kronecker-form equivalence", c03_kronecker_form),
    ("attention fim algebra", c04_attention_fim),
    ("two-layer convergence harness", c05_convergence_harness),
    ("limiting gram oracle", c06_gram_oracle),
    ("mean/eigenvector alignment", c07_alignment),
    ("mean norm vs top eigenvalue", c08_mean_vs_top),
    ("curvature memory scaling", c09_memory_scaling),
    ("desk-scale cnn training", c10_cnn_training),
    ("smac reduces to mac", c11_smac_reduction),
    ("cross-process determinism", c12_determinism),
    ("numerical failure exit", c13_failure_exit),
];

fn main() {
    let wanted: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = Vec::new();
    let mut ran = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        ran += 1;
        let t = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => Outcome::new(false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::new(false, format!("panicked: {msg}"))
            }
        };
        let verdict = if outcome.pass { "PASS" } else { "FAIL" };
        println!(
            "criterion {id:02} {name:<30} {verdict} [{:.1}s] {}",
            t.elapsed().as_secs_f64(),
            outcome.detail
        );
        if !outcome.pass {
            failed.push(id);
        }
    }
    println!("acceptance: {} of {ran} passed", ran - failed.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("repo root")
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn block_diag(blocks: &[Tensor]) -> Tensor {
    let n: usize = blocks.iter().map(|b| b.rows()).sum();
    let mut out = Tensor::zeros(&[n, n]);
    let mut off = 0;
    for b in blocks {
        for i in 0..b.rows() {
            for j in 0..b.cols() {
                out.set(off + i, off + j, b.at(i, j));
            }
        }
        off += b.rows();
    }
    out
}

fn damped_outer(a: &[f64], rho: f64) -> Tensor {
    Tensor::outer(a, a)
        .add(&Tensor::eye(a.len()).scale(rho))
        .unwrap()
}

fn attention_model(seed: u64) -> Model {
    let spec = ModelSpec {
        input: vec![4, 6],
        layers: vec![
            LayerSpec::Attention { heads: 2 },
            LayerSpec::TokenMean,
            LayerSpec::Linear { out: 3, bias: true },
        ],
        loss: LossKind::SoftmaxCrossEntropy,
        capture: true,
    };
    let mut m = Model::new(spec, seed).unwrap();
    // default init gives near-uniform scores; widen so softmax curvature is exercised
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xa77);
    for b in 0..2 {
        m.block_params_mut(b)
            .unwrap()
            .0
            .iter_mut()
            .for_each(|w| *w = rng.gen_range(-0.6..0.6));
    }
    m
}

fn data_file(name: &str) -> PathBuf {
    repo_root().join("data").join(name)
}

fn load_config(name: &str, out: &Path) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&repo_root().join("configs").join(name))?;
    if let DataSource::Idx { images, labels } = &mut cfg.data.source {
        *images = repo_root().join(&*images);
        *labels = repo_root().join(&*labels);
    }
    cfg.out = out.to_path_buf();
    Ok(cfg)
}

fn c01_sherman_morrison() -> Result<Outcome> {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0_f64;
    for _ in 0..200 {
        let k = rng.gen_range(2..=64);
        let rho = 10f64.powf(rng.gen_range(-4.0..=1.0));
        let a: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let g = random(&[rng.gen_range(1..=16), k], &mut rng);
        let fast = precondition_mac(&g, &build_mac_factor(&a, rho)?)?;
        let oracle = g
            .matmul(&dense_inverse(&damped_outer(&a, rho))?)?
            .scale(rho);
        worst = worst.max(fast.sub(&oracle)?.frobenius_norm() / g.frobenius_norm());
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst <= 1e-10 && secs < 5.0,
        format!("max rel err {worst:.2e} (tol 1e-10), {secs:.2}s (limit 5s)"),
    ))
}

fn c02_gradients() -> Result<Outcome> {
    let t = Instant::now();
    let conv = ModelSpec {
        input: vec![2, 5, 5],
        layers: vec![
            LayerSpec::Conv2d {
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
                bias: true,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                out_channels: 2,
                kernel: 3,
                stride: 2,
                padding: 0,
                bias: true,
            },
            LayerSpec::Flatten,
            LayerSpec::Linear { out: 3, bias: true },
        ],
        loss: LossKind::SoftmaxCrossEntropy,
        capture: true,
    };
    let squared = ModelSpec {
        loss: LossKind::Squared,
        ..ModelSpec::mlp(5, &[6], 2)
    };
    let cases: Vec<(&str, ModelSpec, Vec<usize>)> = vec![
        ("mlp+ce", ModelSpec::mlp(5, &[6, 4], 3), vec![4, 5]),
        ("mlp+squared", squared, vec![4, 5]),
        ("conv", conv, vec![2, 2, 5, 5]),
        (
            "attention",
            attention_model(0).spec().clone(),
            vec![3, 4, 6],
        ),
    ];
    let mut worst = 0.0_f64;
    let mut parts = Vec::new();
    for (name, spec, x_shape) in cases {
        let mut case_worst = 0.0_f64;
        for seed in 0..5 {
            let model = if name == "attention" {
                attention_model(seed)
            } else {
                Model::new(spec.clone(), seed)?
            };
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x = random(&x_shape, &mut rng);
            let y = match spec.loss {
                LossKind::SoftmaxCrossEntropy => {
                    Targets::Classes((0..x_shape[0]).map(|_| rng.gen_range(0..3)).collect())
                }
                LossKind::Squared => Targets::Values(random(&[x_shape[0], 2], &mut rng)),
            };
            let g = model.backward(&model.forward(&x)?, &y)?;
            let num = numeric_gradient(&model, &x, &y, 1e-6)?;
            case_worst = case_worst.max(relative_error(&flatten_gradients(&g), &num));
        }
        parts.push(format!("{name} {case_worst:.1e}"));
        worst = worst.max(case_worst);
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        worst <= 1e-5 && secs < 60.0,
        format!(
            "max rel err {} (tol 1e-5, 5 seeds each), {secs:.1}s (limit 60s)",
            parts.join(", ")
        ),
    ))
}

fn c03_kronecker_form() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (out, inp) = (4, 3);
    let mut mac_err = 0.0_f64;
    let mut smac_err = 0.0_f64;
    for _ in 0..20 {
        let rho = 10f64.powf(rng.gen_range(-2.0..=0.5));
        let a: Vec<f64> = (0..inp).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let g = random(&[out, inp], &mut rng);
        let m = build_mac_factor(&a, rho)?;
        let vg = g.vec_col_major()?;

        // vec(G A⁻¹) = (A⁻¹ ⊗ I) vec(G) for col-major vec of an [out, in] matrix
        let f_mac = damped_outer(&a, rho).kron(&Tensor::eye(out))?;
        let want = dense_inverse(&f_mac)?.matvec(&vg)?;
        let got = precondition_mac(&g, &m)?.scale(1.0 / rho).vec_col_major()?;
        mac_err = mac_err.max(max_abs_diff(&got, &want));

        let p_hat: Vec<f64> = (0..out).map(|_| rng.gen_range(0.0..2.0)).collect();
        let d: Vec<f64> = p_hat.iter().map(|p| p + rho).collect();
        let f_smac = damped_outer(&a, rho).kron(&Tensor::diag(&d))?;
        let want = dense_inverse(&f_smac)?.matvec(&vg)?;
        let got = precondition_smac(&g, &m, &p_hat, rho)?
            .scale(1.0 / rho)
            .vec_col_major()?;
        smac_err = smac_err.max(max_abs_diff(&got, &want));
    }

    // attention: block-diagonal over the q, k, v row blocks of the fused weight
    let mut attn_err = 0.0_f64;
    for seed in 0..3 {
        let model = attention_model(seed);
        let x = random(&[3, 4, 6], &mut ChaCha8Rng::seed_from_u64(seed));
        let y = Targets::Classes(vec![0, 1, 2]);
        let g = model.backward(&model.forward(&x)?, &y)?;
        let stats = g.blocks[0]
            .stats
            .as_ref()
            .and_then(|s| s.attention.clone())
            .expect("attention stats");
        let (x_mean, _, v_mean) = attention_statistics(&stats.x, &stats.t)?;
        let rho = 0.3;
        let g_qkv = &g.blocks[0].weight;
        let d = 6;
        let got = precondition_attn(
            g_qkv,
            &build_mac_factor(&x_mean, rho)?,
            &build_mac_factor(&v_mean, rho)?,
        )?;
        let f_qk = damped_outer(&x_mean, rho).kron(&Tensor::eye(d))?;
        let f_v = damped_outer(&v_mean, rho).kron(&Tensor::eye(d))?;
        let f = block_diag(&[f_qk.clone(), f_qk, f_v]);
        let mut vg = Vec::new();
        let mut vgot = Vec::new();
        for blk in 0..3 {
            let rows = |t: &Tensor| {
                Tensor::new(
                    vec![d, d],
                    t.data()[blk * d * d..(blk + 1) * d * d].to_vec(),
                )
            };
            vg.extend(rows(g_qkv)?.vec_col_major()?);
            vgot.extend(rows(&got)?.scale(1.0 / rho).vec_col_major()?);
        }
        let want = dense_inverse(&f)?.matvec(&vg)?;
        attn_err = attn_err.max(max_abs_diff(&vgot, &want));
    }
    let worst = mac_err.max(smac_err).max(attn_err);
    Ok(Outcome::new(
        worst <= 1e-10,
        format!("max abs err mac {mac_err:.1e}, smac {smac_err:.1e}, attention {attn_err:.1e} (tol 1e-10)"),
    ))
}

fn c04_attention_fim() -> Result<Outcome> {
    let mut kron_err = 0.0_f64;
    let mut fim_err = 0.0_f64;
    let d = 6;
    for seed in 0..3 {
        let model = attention_model(10 + seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let batch = 3;
        let x = random(&[batch, 4, 6], &mut rng);
        let y: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..3)).collect();
        let g = model.backward(&model.forward(&x)?, &Targets::Classes(y.clone()))?;
        let stats = g.blocks[0]
            .stats
            .as_ref()
            .and_then(|s| s.attention.clone())
            .expect("attention stats");

        for e in 0..batch {
            let xe = &stats.x[e];
            let k = &stats.k[e];
            let dr = &stats.delta_r[e][0];
            let k0 = Tensor::from_rows(
                &(0..k.rows())
                    .map(|i| k.row(i)[..d / 2].to_vec())
                    .collect::<Vec<_>>(),
            )?;
            let lhs = kron_vec(xe, dr, &k0)?;
            let rhs = xe.matmul_tn(dr)?.matmul(&k0)?.vec_col_major()?;
            kron_err = kron_err.max(max_abs_diff(&lhs, &rhs));
        }

        // direct per-example gradients from independent single-example backward passes
        let mut direct = [Vec::new(), Vec::new(), Vec::new()];
        for e in 0..batch {
            let xi = Tensor::new(vec![1, 4, 6], x.data()[e * 24..(e + 1) * 24].to_vec())?;
            let ge = model.backward(&model.forward(&xi)?, &Targets::Classes(vec![y[e]]))?;
            let fused = &ge.blocks[0].weight;
            for (blk, slot) in direct.iter_mut().enumerate() {
                slot.push(fused.data()[blk * d * d..(blk + 1) * d * d].to_vec());
            }
        }
        for (blk, which) in [Projection::Query, Projection::Key, Projection::Value]
            .into_iter()
            .enumerate()
        {
            let fim = empirical_fim_attention(&stats, which)?;
            let mut want = Tensor::zeros(&[d * d, d * d]);
            for v in &direct[blk] {
                want.axpy(1.0 / batch as f64, &Tensor::outer(v, v))?;
            }
            let scale = want.data().iter().fold(1.0_f64, |m, v| m.max(v.abs()));
            fim_err = fim_err.max(max_abs_diff(fim.data(), want.data()) / scale);
            // per-example vectors themselves
            for (e, v) in direct[blk].iter().enumerate() {
                fim_err = fim_err.max(max_abs_diff(&projection_gradient(&stats, e, which)?, v));
            }
        }
    }
    Ok(Outcome::new(
        kron_err <= 1e-9 && fim_err <= 1e-9,
        format!(
            "kron identity err {kron_err:.1e}, q/k/v fim err {fim_err:.1e} (tol 1e-9, N=4 d=6)"
        ),
    ))
}

fn c05_convergence_harness() -> Result<Outcome> {
    let t = Instant::now();
    let cfg = HarnessConfig::default();
    let mut pass = true;
    let mut min_ratio = 1.0_f64;
    let mut min_mono = 1.0_f64;
    let mut drift_all = true;
    let mut max_c = 0.0_f64;
    for seed in 0..cfg.seeds {
        let run = run_seed(&cfg, seed)?;
        let r = &run.report;
        min_ratio = min_ratio.min(r.ratio_ok_fraction);
        min_mono = min_mono.min(r.monotone_fraction);
        drift_all &= r.drift_ok;
        max_c = max_c.max(r.jacobian_c);
        pass &= r.ratio_ok_fraction >= 0.9 && r.monotone_fraction >= 0.95 && r.drift_ok;
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        pass && secs < 600.0,
        format!(
            "min bound-ok {:.0}%, min monotone {:.0}%, drift ok {drift_all}, 5 seeds, {secs:.0}s (limit 600s); \
             stable-Jacobian C up to {max_c:.2} (informational)",
            100.0 * min_ratio,
            100.0 * min_mono
        ),
    ))
}

fn unit_pair(rng: &mut impl Rng, d: usize) -> Result<Tensor> {
    let mut unit = || {
        let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.into_iter().map(|a| a / n).collect::<Vec<_>>()
    };
    Tensor::from_rows(&[unit(), unit()])
}

fn c06_gram_oracle() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut off_fail = 0;
    let mut diag_fail = 0;
    let mut worst_z = 0.0_f64;
    for pair in 0..50 {
        let x = unit_pair(&mut rng, 10)?;
        let mc = gram_sigma_inf(&x, 100_000, 1000 + pair)?;
        let exact = gram_closed_form(&x)?;
        let z = (mc.mean.at(0, 1) - exact.at(0, 1)).abs() / mc.se.at(0, 1).max(1e-300);
        worst_z = worst_z.max(z);
        off_fail += (z > 3.0) as usize;
        for i in 0..2 {
            diag_fail += ((mc.mean.at(i, i) - 0.5).abs() > 3.0 * mc.se.at(i, i)) as usize;
        }
    }
    // the reported SE must be honest: z-scores over fresh pairs should have unit variance
    let mut z = Vec::new();
    for pair in 0..400 {
        let x = unit_pair(&mut rng, 10)?;
        let mc = gram_sigma_inf(&x, 20_000, 10_000 + pair)?;
        z.push((mc.mean.at(0, 1) - gram_closed_form(&x)?.at(0, 1)) / mc.se.at(0, 1));
    }
    let z_var = z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
    Ok(Outcome::new(
        off_fail == 0 && diag_fail == 0 && (0.8..=1.2).contains(&z_var),
        format!(
            "off-diagonal outside 3 SE: {off_fail}/50 (max {worst_z:.2} SE), diagonal outside: {diag_fail}/100, \
             z variance over 400 fresh pairs {z_var:.3} (need 0.8..1.2)"
        ),
    ))
}

fn c07_alignment() -> Result<Outcome> {
    let t = Instant::now();
    let dir = tempfile::tempdir()?;
    let mut cfg = load_config("fashion_mlp.toml", dir.path())?;
    cfg.schedule.epochs = 5;
    let summary = run_training(&cfg)?;
    let model = Checkpoint::load(&dir.path().join(CHECKPOINT_FILE))?.restore_model()?;
    let (train, _) = prepare_data(&cfg.data, &cfg.model.input, cfg.seed)?;
    let idx: Vec<usize> = (0..1000.min(train.len())).collect();
    let (x, y) = train.gather(&idx)?;
    let g = model.backward(&model.forward(&x)?, &y)?;
    let mut cos = Vec::new();
    for b in 1..=3 {
        cos.push(layer_report(b, &g.blocks[b], 5)?.cos_align);
    }
    let secs = t.elapsed().as_secs_f64();
    let ok = cos.iter().all(|c| *c >= 0.9);
    Ok(Outcome::new(
        ok && secs < 300.0,
        format!(
            "cos(top eigvec, mean) hidden layers {} (need >= 0.9), train loss {:.3}, {secs:.0}s (limit 300s)",
            cos.iter().map(|c| format!("{c:.4}")).collect::<Vec<_>>().join("/"),
            summary.final_train_loss.unwrap_or(f64::NAN)
        ),
    ))
}

fn c08_mean_vs_top() -> Result<Outcome> {
    let idx = |name: &str| DataSource::Idx {
        images: data_file(&format!("{name}-10k-images-idx3-ubyte.gz")),
        labels: data_file(&format!("{name}-10k-labels-idx1-ubyte.gz")),
    };
    let sets = [
        ("mnist std", idx("mnist"), true, true),
        ("fashion std", idx("fashion"), true, true),
        ("mnist raw", idx("mnist"), false, false),
        ("fashion raw", idx("fashion"), false, false),
        (
            "blobs",
            DataSource::Blobs {
                n: 2000,
                d: 20,
                classes: 4,
                margin: 4.0,
            },
            false,
            false,
        ),
        (
            "moons",
            DataSource::TwoMoons {
                n: 2000,
                noise: 0.1,
            },
            false,
            false,
        ),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, source, standardize, must_be_below_one) in sets {
        let cfg = DataConfig {
            source,
            test_fraction: 0.0,
            standardize,
            shape: None,
            limit: None,
        };
        let features = cfg.source.load(0)?.features();
        let (train, _) = prepare_data(&cfg, &[features], 0)?;
        // errors out if the exact inequality is violated
        let fc = convergence_factor_compare(&train.design_matrix()?)?;
        let ratio = fc.ratio();
        pass &= fc.mean_norm_sq <= fc.lambda_max && (!must_be_below_one || ratio < 1.0);
        parts.push(format!("{name} {ratio:.3e}"));
    }
    Ok(Outcome::new(
        pass,
        format!("||x_bar||^2 / lambda_max: {}", parts.join(", ")),
    ))
}

fn c09_memory_scaling() -> Result<Outcome> {
    let widths = [64usize, 256, 1024];
    let mut pass = true;
    let mut parts = Vec::new();
    for (kind, nominal) in [
        (OptimizerKind::Mac, 1.0),
        (OptimizerKind::Smac, 1.0),
        (OptimizerKind::Kfac, 2.0),
    ] {
        let mut pts = Vec::new();
        for &w in &widths {
            // square layer: d_in = d_out = w
            let spec = ModelSpec::mlp(w, &[w], 2);
            let mut model = Model::new(spec, 0)?;
            let mut rng = ChaCha8Rng::seed_from_u64(w as u64);
            let x = random(&[32, w], &mut rng);
            let y = Targets::Classes((0..32).map(|_| rng.gen_range(0..2)).collect());
            let mut opt = Optimizer::new(OptimizerConfig::profile(kind), &model)?;
            let g = model.backward(&model.forward(&x)?, &y)?;
            opt.step(&mut model, &g, 0.01)?;
            pts.push(((w as f64).ln(), (opt.curvature_bytes()[0] as f64).ln()));
        }
        let (slope, r2) = fit(&pts);
        let ok = (slope - nominal).abs() <= 0.15 && r2 > 0.99;
        pass &= ok;
        parts.push(format!(
            "{} slope {slope:.3} (nominal {nominal}) r2 {r2:.4}",
            kind.name()
        ));
    }
    Ok(Outcome::new(pass, parts.join(", ")))
}

fn fit(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let syy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    (
        slope,
        if syy == 0.0 {
            1.0
        } else {
            sxy * sxy / (sxx * syy)
        },
    )
}

fn c10_cnn_training() -> Result<Outcome> {
    let lrs = [0.01, 0.03, 0.1];
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..3u64 {
        let mut best = Vec::new();
        for kind in [OptimizerKind::Sgd, OptimizerKind::Mac] {
            let mut runs = Vec::new();
            for lr in lrs {
                let dir = tempfile::tempdir()?;
                let mut cfg = load_config("mnist_cnn.toml", dir.path())?;
                cfg.seed = seed;
                cfg.optimizer = OptimizerBlock {
                    lr: Some(lr),
                    ..OptimizerBlock::named(kind)
                };
                cfg.schedule.log_every = 1000;
                match run_training(&cfg) {
                    Ok(s) => {
                        if let Some(loss) = s.final_train_loss.filter(|l| l.is_finite()) {
                            runs.push((loss, s.wall_ms, lr));
                        }
                    }
                    Err(e) => eprintln!("seed {seed} {} lr {lr}: {e}", kind.name()),
                }
            }
            let b = runs.into_iter().min_by(|a, b| a.0.total_cmp(&b.0));
            best.push(b);
        }
        let (Some(sgd), Some(mac)) = (best[0], best[1]) else {
            parts.push(format!("seed {seed}: a run diverged at every lr"));
            continue;
        };
        let time_ratio = mac.1 / sgd.1;
        let win = mac.0 <= sgd.0 && time_ratio <= 1.5;
        wins += win as usize;
        parts.push(format!(
            "seed {seed}: mac {:.4}@{} sgd {:.4}@{} time x{time_ratio:.2} {}",
            mac.0,
            mac.2,
            sgd.0,
            sgd.2,
            if win { "ok" } else { "lost" }
        ));
    }
    Ok(Outcome::new(
        wins >= 2,
        format!("{wins}/3 seeds; {}", parts.join("; ")),
    ))
}

fn c11_smac_reduction() -> Result<Outcome> {
    let mut steps_checked = 0;
    for rho in [1.0, 0.5] {
        let spec = ModelSpec::mlp(8, &[16, 12], 3);
        let mut mac_model = Model::new(spec.clone(), 11)?;
        let mut smac_model = Model::new(spec, 11)?;
        let cfg = |kind| OptimizerConfig {
            damping: Damping::Fixed(rho),
            tau_inv: 10,
            ..OptimizerConfig::profile(kind)
        };
        let mut mac = Optimizer::new(cfg(OptimizerKind::Mac), &mac_model)?;
        let mut smac = Optimizer::new(cfg(OptimizerKind::Smac), &smac_model)?;
        smac.force_p_hat(1.0 - rho);
        let mut rng = ChaCha8Rng::seed_from_u64(rho.to_bits());
        for step in 0..50 {
            let x = random(&[16, 8], &mut rng);
            let y = Targets::Classes((0..16).map(|_| rng.gen_range(0..3)).collect());
            let gm = mac_model.backward(&mac_model.forward(&x)?, &y)?;
            let gs = smac_model.backward(&smac_model.forward(&x)?, &y)?;
            mac.step(&mut mac_model, &gm, 0.05)?;
            smac.step(&mut smac_model, &gs, 0.05)?;
            for b in 0..mac_model.blocks().len() {
                let (wm, bm) = mac_model.block_params(b)?;
                let (ws, bs) = smac_model.block_params(b)?;
                let same =
                    |a: &[f64], c: &[f64]| a.iter().zip(c).all(|(p, q)| p.to_bits() == q.to_bits());
                if !same(wm, ws) || !same(bm.unwrap_or(&[]), bs.unwrap_or(&[])) {
                    return Ok(Outcome::new(
                        false,
                        format!("rho {rho}: block {b} diverged at step {step}"),
                    ));
                }
            }
            steps_checked += 1;
        }
    }
    Ok(Outcome::new(
        true,
        format!("parameters bit-identical after each of {steps_checked} steps (rho 1.0 and 0.5)"),
    ))
}

fn spawn_train(config: &Path, out: &Path) -> std::io::Result<std::process::Output> {
    Command::new(env!("CARGO_BIN_EXE_macgrad"))
        .args(["train", "--config"])
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "info")
        .output()
}

const BLOBS_RUN: &str = r#"
seed = 7
out = "unused"

[model]
input = [8]
layers = [{ kind = "linear", out = 16 }, { kind = "relu" }, { kind = "linear", out = 3 }]

[data]
source = { kind = "blobs", n = 600, d = 8, classes = 3 }

[optimizer]
name = "mac"
tau_inv = 5

[schedule]
epochs = 1
batch_size = 32
"#;

fn c12_determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, BLOBS_RUN)?;
    let mut records = Vec::new();
    for r in 0..2 {
        let out = dir.path().join(format!("run{r}"));
        let o = spawn_train(&config, &out)?;
        if !o.status.success() {
            return Ok(Outcome::new(
                false,
                format!("run {r} exited with {:?}", o.status.code()),
            ));
        }
        let steps: Vec<_> = read_metrics(&out.join(METRICS_FILE))?
            .into_iter()
            .filter(|m| m.kind == RecordKind::Step)
            .take(10)
            .collect();
        records.push(steps);
    }
    if records[0].len() < 10 {
        return Ok(Outcome::new(
            false,
            format!("only {} step records", records[0].len()),
        ));
    }
    let same = records[0].iter().zip(&records[1]).all(|(a, b)| {
        a.step == b.step
            && a.epoch == b.epoch
            && a.lr.to_bits() == b.lr.to_bits()
            && a.train_loss.to_bits() == b.train_loss.to_bits()
            && a.test_acc.map(f64::to_bits) == b.test_acc.map(f64::to_bits)
            && a.state_bytes == b.state_bytes
    });
    Ok(Outcome::new(
        same,
        format!(
            "10 step records from two processes {}",
            if same { "bit-identical" } else { "differ" }
        ),
    ))
}

const ILL_CONDITIONED_RUN: &str = r#"
seed = 3
out = "unused"

[model]
input = [40]
layers = [{ kind = "linear", out = 32 }, { kind = "relu" }, { kind = "linear", out = 3 }]

[data]
source = { kind = "blobs", n = 200, d = 40, classes = 3 }

[optimizer]
name = "kfac"
damping = 1e-12
tau_cov = 1
tau_inv = 1

[schedule]
epochs = 2
batch_size = 8
"#;

fn c13_failure_exit() -> Result<Outcome> {
    let dir = tempfile::tempdir()?;
    let config = dir.path().join("run.toml");
    std::fs::write(&config, ILL_CONDITIONED_RUN)?;
    let o = spawn_train(&config, &dir.path().join("run"))?;
    let stderr = String::from_utf8_lossy(&o.stderr);
    let code = o.status.code();
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.contains("step"))
        .unwrap_or("")
        .trim()
        .to_string();
    Ok(Outcome::new(
        code == Some(3) && !line.is_empty(),
        format!("exit code {code:?}, stderr: {line}"),
    ))
}
