//! Acceptance suite. Runs every criterion in order, prints one PASS/FAIL
//! line each, and exits non-zero if any fails.
//!
//! Run alone with `cargo test -p respir-hht-core --test acceptance`.

use std::f64::consts::TAU;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::Array2;
use respir_hht::audio::Label;
use respir_hht::dbn::{DbnModel, Loss, RbmLayer};
use respir_hht::emd::{self, SiftConfig};
use respir_hht::eval::{self, ConfusionMatrix};
use respir_hht::features;
use respir_hht::hilbert;
use respir_hht::pipeline::{self, PipelineConfig};
use respir_hht::rng::SplitMix64;
use respir_hht::synth::{self, SynthConfig};

type Check = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Check {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Strict sign changes of the first difference, and sign changes of the
/// series skipping exact zeros.
fn extrema_and_crossings(x: &[f64]) -> (usize, usize) {
    let ext = x
        .windows(3)
        .filter(|w| (w[1] - w[0]) * (w[2] - w[1]) < 0.0)
        .count();
    let mut zc = 0;
    let mut prev = 0.0;
    for &v in x {
        if v != 0.0 {
            if prev != 0.0 && (v > 0.0) != (prev > 0.0) {
                zc += 1;
            }
            prev = v;
        }
    }
    (ext, zc)
}

fn criterion_1() -> Check {
    let cm = ConfusionMatrix {
        tp: 509,
        fn_: 60,
        fp: 84,
        tn: 283,
    };
    let m = eval::compute_metrics(&cm);
    let p = eval::ppv_convention_metrics(&cm);
    let acc = m.accuracy.unwrap_or(f64::NAN);
    let sens = p.sensitivity.unwrap_or(f64::NAN);
    let spec = p.specificity.unwrap_or(f64::NAN);
    let ok = (acc - 0.8462).abs() <= 1e-4 && (sens - 0.8583).abs() <= 1e-4 && (spec - 0.7711).abs() <= 1e-4;
    ensure(ok, format!("accuracy {acc:.6}, ppv-convention sensitivity {sens:.6}, specificity {spec:.6}"))
}

fn random_signal(kind: usize, rng: &mut SplitMix64) -> Vec<f64> {
    let rate = 4000.0;
    let n = 2000 + rng.next_below(38_001) as usize;
    match kind {
        0 => (0..n).map(|_| rng.next_gaussian()).collect(),
        1 => {
            let tones: Vec<(f64, f64, f64)> = (0..1 + rng.next_below(3))
                .map(|_| (10.0 + 990.0 * rng.next_f64(), 0.1 + rng.next_f64(), TAU * rng.next_f64()))
                .collect();
            (0..n)
                .map(|i| {
                    let t = i as f64 / rate;
                    tones.iter().map(|(f, a, p)| a * (TAU * f * t + p).sin()).sum()
                })
                .collect()
        }
        2 => {
            let f0 = 20.0 + 200.0 * rng.next_f64();
            let f1 = 300.0 + 900.0 * rng.next_f64();
            let dur = n as f64 / rate;
            (0..n)
                .map(|i| {
                    let t = i as f64 / rate;
                    (TAU * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).cos()
                })
                .collect()
        }
        _ => {
            let cfg = SynthConfig {
                duration_s: 4.0 + 6.0 * rng.next_f64(),
                seed: rng.next_u64(),
                ..SynthConfig::default()
            };
            let label = if rng.bernoulli(0.5) { Label::Asthma } else { Label::Healthy };
            synth::gen_recording(&cfg, label).expect("synthetic recording").into_samples()
        }
    }
}

fn criterion_2() -> Check {
    let start = Instant::now();
    let mut rng = SplitMix64::new(0xACCE_0002);
    let cfg = SiftConfig::default();
    let mut worst = 0.0f64;
    let mut bad_imfs = 0;
    let mut total_imfs = 0;
    for i in 0..100 {
        let x = random_signal(i % 4, &mut rng);
        assert!(x.len() <= 40_000);
        let d = emd::decompose(&x, &cfg).map_err(|e| e.to_string())?;
        let rec = d.reconstruct();
        let err: Vec<f64> = x.iter().zip(&rec).map(|(a, b)| a - b).collect();
        worst = worst.max(norm(&err) / norm(&x));
        for imf in &d.imfs {
            let (e, z) = extrema_and_crossings(&imf.values);
            total_imfs += 1;
            if e.abs_diff(z) > 1 {
                bad_imfs += 1;
            }
        }
    }
    let elapsed = start.elapsed();
    ensure(
        worst < 1e-9 && bad_imfs == 0 && elapsed < Duration::from_secs(60),
        format!("worst relative error {worst:.2e}; {bad_imfs}/{total_imfs} IMFs break the count condition; {elapsed:.1?}"),
    )
}

fn criterion_3() -> Check {
    let start = Instant::now();
    let rate = 4000.0;
    let low: Vec<f64> = (0..4000).map(|i| (TAU * 25.0 * i as f64 / rate).sin()).collect();
    let high: Vec<f64> = (0..4000).map(|i| 0.5 * (TAU * 400.0 * i as f64 / rate).sin()).collect();
    let mix: Vec<f64> = low.iter().zip(&high).map(|(a, b)| a + b).collect();
    let d = emd::decompose(&mix, &SiftConfig::default()).map_err(|e| e.to_string())?;
    if d.len() < 2 {
        return Err(format!("only {} IMF(s)", d.len()));
    }
    let c1 = pearson(&d.imfs[0].values, &high);
    let c2 = pearson(&d.imfs[1].values, &low);
    let elapsed = start.elapsed();
    ensure(
        c1 > 0.95 && c2 > 0.95 && elapsed < Duration::from_secs(5),
        format!("corr(IMF1, 400 Hz) {c1:.4}, corr(IMF2, 25 Hz) {c2:.4}; {elapsed:.1?}"),
    )
}

fn criterion_4() -> Check {
    let start = Instant::now();
    let cfg = SiftConfig::default();
    let mut in_band = 0;
    let mut counts = Vec::new();
    for i in 0..50u64 {
        let synth_cfg = SynthConfig {
            seed: 4000 + i,
            ..SynthConfig::default()
        };
        let label = if i % 2 == 0 { Label::Asthma } else { Label::Healthy };
        let x = synth::gen_recording(&synth_cfg, label).map_err(|e| e.to_string())?;
        assert_eq!(x.len(), 40_000);
        let n = emd::decompose(x.samples(), &cfg).map_err(|e| e.to_string())?.len();
        if (4..=8).contains(&n) {
            in_band += 1;
        }
        counts.push(n);
    }
    let elapsed = start.elapsed();
    ensure(
        in_band * 10 >= 50 * 9 && elapsed < Duration::from_secs(120),
        format!("{in_band}/50 in [4, 8], range {}..={}; {elapsed:.1?}", counts.iter().min().unwrap(), counts.iter().max().unwrap()),
    )
}

fn criterion_5() -> Check {
    let rate = 4000u32;
    let n = 4000;
    let interior = n / 20..n - n / 20;

    let cos: Vec<f64> = (0..n).map(|i| (TAU * 50.0 * i as f64 / rate as f64).cos()).collect();
    let h = hilbert::hilbert_transform(&cos).map_err(|e| e.to_string())?;
    let sin_err = interior
        .clone()
        .map(|i| (h.imag_part[i] - (TAU * 50.0 * i as f64 / rate as f64).sin()).abs())
        .fold(0.0, f64::max);

    let mut rng = SplitMix64::new(55);
    let m = 4096;
    let mut x = vec![0.0; m];
    for _ in 0..20 {
        let k = 1 + rng.next_below(m as u64 / 2 - 1) as usize;
        let (a, p) = (rng.next_f64(), TAU * rng.next_f64());
        for (i, v) in x.iter_mut().enumerate() {
            *v += a * (TAU * k as f64 * i as f64 / m as f64 + p).cos();
        }
    }
    let hx = hilbert::hilbert_transform(&x).map_err(|e| e.to_string())?.imag_part;
    let hhx = hilbert::hilbert_transform(&hx).map_err(|e| e.to_string())?.imag_part;
    let sum: Vec<f64> = hhx.iter().zip(&x).map(|(a, b)| a + b).collect();
    let involution = norm(&sum) / norm(&x);

    let (f0, f1, dur) = (100.0, 400.0, 1.0);
    let chirp: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / rate as f64;
            (TAU * (f0 * t + 0.5 * (f1 - f0) / dur * t * t)).cos()
        })
        .collect();
    let at = hilbert::instant_attributes(&hilbert::hilbert_transform(&chirp).map_err(|e| e.to_string())?, rate);
    let chirp_err = interior
        .map(|i| {
            let t = (i as f64 + 0.5) / rate as f64;
            let expected = f0 + (f1 - f0) / dur * t;
            ((at.frequency_hz[i] - expected) / expected).abs()
        })
        .fold(0.0, f64::max);

    ensure(
        sin_err < 1e-6 && involution < 1e-6 && chirp_err < 0.02,
        format!("H(cos) vs sin {sin_err:.2e}; H(H(x)) + x relative {involution:.2e}; chirp frequency {:.3}%", 100.0 * chirp_err),
    )
}

fn criterion_6() -> Check {
    let x = [1.0, 2.0, 3.0, 4.0, 5.0];
    let v = features::compute_features(&x, &x).map_err(|e| e.to_string())?.vector;
    // Population moments of 1..5: var 2, m4 6.8, so kurtosis 1.7 and c4 -5.2.
    let expected = [3.0, 3.0, 2f64.sqrt(), 5.0, 1.0, 2.0, 1.02, 1.0, 1.7, 0.0, -5.2, 55.0];
    let hand = v
        .to_array()
        .iter()
        .zip(expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    let mut rng = SplitMix64::new(66);
    let g: Vec<f64> = (0..100_000).map(|_| rng.next_gaussian()).collect();
    let kurt = features::compute_features(&g, &g).map_err(|e| e.to_string())?.vector.kurtosis;

    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = 50 + rng.next_below(500) as usize;
        let s: Vec<f64> = (0..n).map(|_| rng.next_gaussian() * 3.0 + rng.next_f64()).collect();
        let c = 10.0 * rng.next_gaussian();
        let a = 0.1 + 5.0 * rng.next_f64();
        let base = features::compute_features(&s, &s).map_err(|e| e.to_string())?.vector;
        let shifted: Vec<f64> = s.iter().map(|v| v + c).collect();
        let scaled: Vec<f64> = s.iter().map(|v| v * a).collect();
        let sh = features::compute_features(&shifted, &s).map_err(|e| e.to_string())?.vector;
        let sc = features::compute_features(&scaled, &s).map_err(|e| e.to_string())?.vector;
        let rel = |got: f64, want: f64| (got - want).abs() / want.abs().max(1.0);
        for d in [
            rel(sh.mean, base.mean + c),
            rel(sh.median, base.median + c),
            rel(sh.variance, base.variance),
            rel(sh.kurtosis, base.kurtosis),
            rel(sh.third_central_moment, base.third_central_moment),
            rel(sh.corr_with_source, base.corr_with_source),
            rel(sc.mean, a * base.mean),
            rel(sc.std_dev, a * base.std_dev),
            rel(sc.variance, a * a * base.variance),
            rel(sc.kurtosis, base.kurtosis),
            rel(sc.third_central_moment, a.powi(3) * base.third_central_moment),
            rel(sc.fourth_cumulant, a.powi(4) * base.fourth_cumulant),
            rel(sc.energy, a * a * base.energy),
            rel(sc.corr_with_source, base.corr_with_source),
        ] {
            worst = worst.max(d);
        }
    }
    ensure(
        hand < 1e-12 && (kurt - 3.0).abs() <= 0.1 && worst < 1e-9,
        format!("[1..5] max deviation {hand:.1e}; Gaussian kurtosis {kurt:.4}; equivariance worst {worst:.1e}"),
    )
}

fn small_model(seed: u64) -> DbnModel {
    let mut rng = SplitMix64::new(seed);
    let mut m = DbnModel::zeros(4, &[3]);
    m.layers[0].weights.mapv_inplace(|_| 0.5 * rng.next_gaussian());
    m.layers[0].hidden_bias.mapv_inplace(|_| 0.5 * rng.next_gaussian());
    m.output.weights.mapv_inplace(|_| 0.5 * rng.next_gaussian());
    m.output.bias.mapv_inplace(|_| 0.5 * rng.next_gaussian());
    m.loss = Loss::MeanSquared;
    m
}

fn criterion_7() -> Check {
    let eps = 1e-5;
    let (mut checked, mut failed) = (0, 0);
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let m = small_model(seed);
        let mut rng = SplitMix64::new(1000 + seed);
        let x = Array2::from_shape_simple_fn((6, 4), || rng.next_f64());
        let t = Array2::from_shape_fn((6, 2), |(i, j)| if (i % 2) == j { 1.0 } else { 0.0 });
        let g = m.gradient(&x.view(), &t.view());

        let mut params: Vec<(f64, Box<dyn Fn(&mut DbnModel, f64)>)> = Vec::new();
        for ((i, j), &a) in g.layers[0].0.indexed_iter() {
            params.push((a, Box::new(move |mm: &mut DbnModel, e| mm.layers[0].weights[[i, j]] += e)));
        }
        for (j, &a) in g.layers[0].1.indexed_iter() {
            params.push((a, Box::new(move |mm: &mut DbnModel, e| mm.layers[0].hidden_bias[j] += e)));
        }
        for ((i, j), &a) in g.output_weights.indexed_iter() {
            params.push((a, Box::new(move |mm: &mut DbnModel, e| mm.output.weights[[i, j]] += e)));
        }
        for (j, &a) in g.output_bias.indexed_iter() {
            params.push((a, Box::new(move |mm: &mut DbnModel, e| mm.output.bias[j] += e)));
        }
        for (analytic, perturb) in params {
            let mut plus = m.clone();
            perturb(&mut plus, eps);
            let mut minus = m.clone();
            perturb(&mut minus, -eps);
            let numeric = (plus.loss_value(&x.view(), &t.view()) - minus.loss_value(&x.view(), &t.view())) / (2.0 * eps);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
            checked += 1;
            if rel >= 1e-5 {
                failed += 1;
            }
        }
    }
    ensure(failed == 0, format!("{checked} parameters over 20 seeds, {failed} outside 1e-5, worst {worst:.1e}"))
}

/// Exact mean log-likelihood gradient, ordered as weights (row-major),
/// visible biases, hidden biases.
fn exact_rbm_gradient(l: &RbmLayer, data: &Array2<f64>) -> Vec<f64> {
    let (nv, nh) = (l.weights.nrows(), l.weights.ncols());
    let bit = |code: usize, i: usize| ((code >> i) & 1) as f64;
    let mut z = 0.0;
    let mut ew = vec![0.0; nv * nh];
    let mut eb = vec![0.0; nv];
    let mut ec = vec![0.0; nh];
    for vc in 0..1usize << nv {
        for hc in 0..1usize << nh {
            let mut neg_energy = 0.0;
            for i in 0..nv {
                neg_energy += bit(vc, i) * l.visible_bias[i];
                for j in 0..nh {
                    neg_energy += bit(vc, i) * bit(hc, j) * l.weights[[i, j]];
                }
            }
            for j in 0..nh {
                neg_energy += bit(hc, j) * l.hidden_bias[j];
            }
            let p = neg_energy.exp();
            z += p;
            for i in 0..nv {
                eb[i] += p * bit(vc, i);
                for j in 0..nh {
                    ew[i * nh + j] += p * bit(vc, i) * bit(hc, j);
                }
            }
            for j in 0..nh {
                ec[j] += p * bit(hc, j);
            }
        }
    }
    let rows = data.nrows() as f64;
    let ph: Vec<Vec<f64>> = data
        .rows()
        .into_iter()
        .map(|v| {
            (0..nh)
                .map(|j| {
                    let a = l.hidden_bias[j] + (0..nv).map(|i| v[i] * l.weights[[i, j]]).sum::<f64>();
                    1.0 / (1.0 + (-a).exp())
                })
                .collect()
        })
        .collect();
    let mut g = Vec::with_capacity(nv * nh + nv + nh);
    for i in 0..nv {
        for j in 0..nh {
            let d: f64 = data.rows().into_iter().zip(&ph).map(|(v, h)| v[i] * h[j]).sum::<f64>() / rows;
            g.push(d - ew[i * nh + j] / z);
        }
    }
    for i in 0..nv {
        g.push(data.column(i).sum() / rows - eb[i] / z);
    }
    for j in 0..nh {
        g.push(ph.iter().map(|h| h[j]).sum::<f64>() / rows - ec[j] / z);
    }
    g
}

fn criterion_8() -> Check {
    let start = Instant::now();
    let mut positive = 0;
    for trial in 0..100u64 {
        let mut rng = SplitMix64::new(0xCD00 + trial);
        let nv = 2 + rng.next_below(5) as usize;
        let nh = 2 + rng.next_below(5) as usize;
        let mut l = RbmLayer::random(nv, nh, 0.5, &mut rng);
        l.visible_bias.mapv_inplace(|_| 0.5 * rng.next_gaussian());
        l.hidden_bias.mapv_inplace(|_| 0.5 * rng.next_gaussian());
        let p_on: Vec<f64> = (0..nv).map(|_| rng.next_f64()).collect();
        let data = Array2::from_shape_fn((200, nv), |(_, i)| if rng.bernoulli(p_on[i]) { 1.0 } else { 0.0 });
        let cd = l.contrastive_divergence(&data.view(), 1, &mut rng);
        let flat: Vec<f64> = cd
            .weights
            .iter()
            .chain(&cd.visible_bias)
            .chain(&cd.hidden_bias)
            .copied()
            .collect();
        let exact = exact_rbm_gradient(&l, &data);
        if flat.iter().zip(&exact).map(|(a, b)| a * b).sum::<f64>() > 0.0 {
            positive += 1;
        }
    }
    let elapsed = start.elapsed();
    ensure(
        positive >= 90 && elapsed < Duration::from_secs(30),
        format!("{positive}/100 trials uphill; {elapsed:.1?}"),
    )
}

struct EndToEnd {
    report_bytes: Vec<u8>,
    pooled: ConfusionMatrix,
    accuracy: f64,
    leakage_free: bool,
    instances: usize,
    elapsed: Duration,
}

fn end_to_end(root: &std::path::Path) -> Result<EndToEnd, String> {
    let start = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.set_seed(2024);
    cfg.train.batch_size = 1;
    cfg.arch = vec![160, 130];
    cfg.train.learning_rate = 0.2;
    cfg.train.fine_tune_epochs = 100;
    cfg.k = 5;
    let data = root.join("data");
    pipeline::synthesize(&cfg.synth, 10, &data).map_err(|e| e.to_string())?;
    cfg.manifest = Some(data.join("manifest.json"));
    cfg.workdir = root.join("out");
    let out = pipeline::run_pipeline(&cfg).map_err(|e| e.to_string())?;

    let mut leakage_free = true;
    let mut seen = std::collections::BTreeSet::new();
    for f in &out.report.folds {
        for s in &f.test_subjects {
            leakage_free &= seen.insert(s.clone());
        }
    }
    let manifest = pipeline::load_manifest(cfg.manifest.as_ref().unwrap()).map_err(|e| e.to_string())?;
    leakage_free &= seen.len() == manifest.subjects().len();
    let instances = features::read_csv(&out.features_path).map_err(|e| e.to_string())?.len();
    let report_bytes = std::fs::read(&out.report_path).map_err(|e| e.to_string())?;
    Ok(EndToEnd {
        report_bytes,
        pooled: out.report.pooled.cm,
        accuracy: out.report.pooled.metrics.accuracy.unwrap_or(0.0),
        leakage_free,
        instances,
        elapsed: start.elapsed(),
    })
}

fn run(id: u32, name: &str, f: impl FnOnce() -> Check) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    let (tag, detail) = match &outcome {
        Ok(d) => ("PASS", d),
        Err(d) => ("FAIL", d),
    };
    println!("[{tag}] criterion {id:>2}: {name} -- {detail} ({:.1?})", start.elapsed());
    outcome.is_ok()
}

fn main() -> ExitCode {
    let mut all = true;
    all &= run(1, "metric arithmetic", criterion_1);
    all &= run(2, "EMD reconstruction and IMF condition", criterion_2);
    all &= run(3, "EMD two-tone separation", criterion_3);
    all &= run(4, "IMF count band", criterion_4);
    all &= run(5, "Hilbert identities", criterion_5);
    all &= run(6, "feature correctness", criterion_6);
    all &= run(7, "gradient check", criterion_7);
    all &= run(8, "CD-1 direction", criterion_8);

    let dir = tempfile::tempdir().expect("temporary directory");
    // Both repetitions use the same root: the report echoes its paths.
    let root = dir.path().join("run");
    let first = panic::catch_unwind(AssertUnwindSafe(|| end_to_end(&root)))
        .unwrap_or_else(|_| Err("panicked".into()));
    all &= run(9, "end-to-end cross-validation", || {
        let r = first.as_ref().map_err(Clone::clone)?;
        ensure(
            r.accuracy >= 0.90 && r.leakage_free && r.elapsed < Duration::from_secs(600),
            format!(
                "pooled accuracy {:.4} over {} instances {:?}; subject-disjoint folds: {}; {:.1?}",
                r.accuracy, r.instances, r.pooled, r.leakage_free, r.elapsed
            ),
        )
    });
    all &= run(10, "determinism", || {
        let a = first.as_ref().map_err(Clone::clone)?;
        std::fs::remove_dir_all(&root).map_err(|e| e.to_string())?;
        let b = end_to_end(&root)?;
        ensure(
            a.pooled == b.pooled && a.report_bytes == b.report_bytes,
            format!(
                "pooled matrices {:?} vs {:?}; report bytes identical: {}",
                a.pooled,
                b.pooled,
                a.report_bytes == b.report_bytes
            ),
        )
    });

    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: at least one criterion failed");
        ExitCode::FAILURE
    }
}
