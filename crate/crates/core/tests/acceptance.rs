//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

mod common;

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use common::{brute_force_windows, synth_run};
use lca_core::autodiff::Tape;
use lca_core::checkpoint::{load_checkpoint, Checkpoint};
use lca_core::config::RunConfig;
use lca_core::data::{batches, Dataset, SampleKind};
use lca_core::gradcheck::run_suite;
use lca_core::lca::{concept_count, concept_embeddings, lca_forward, LcaConfig, LcaParams};
use lca_core::model::HeadKind;
use lca_core::objectives::{max_entropy_loss, LossConfig};
use lca_core::ops::avgpool2d;
use lca_core::rng::Rng;
use lca_core::tensor::Tensor;
use lca_core::train::{evaluate, load_dataset, run_training, FrozenClock, SystemClock};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};

type Outcome = Result<String, String>;

fn check(cond: bool, what: String) -> Outcome {
    if cond {
        Ok(what)
    } else {
        Err(what)
    }
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let results = run_suite(0, 10).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !(r.max_rel_err < 1e-5))
        .map(|r| r.name.as_str())
        .collect();
    let msg = format!("{} checks, worst rel err {worst:.2e}, {secs:.1}s", results.len());
    if !failed.is_empty() {
        return Err(format!("{msg}; failed: {}", failed.join(", ")));
    }
    check(secs < 60.0, msg)
}

fn counts() -> Outcome {
    for include in [true, false] {
        for h in 1..=8 {
            for w in 1..=8 {
                let cfg = LcaConfig {
                    in_channels: 1,
                    embed_dim: 1,
                    include_one_by_k: include,
                };
                let brute = brute_force_windows(h, w, include).len();
                let got = concept_count(h, w, &cfg).unwrap_or(0);
                if got != brute {
                    return Err(format!("{h}x{w} include={include}: {got} vs {brute}"));
                }
            }
        }
    }
    let cfg = LcaConfig::new(1).with_embed_dim(1);
    let spots: Vec<usize> = [(2, 2), (3, 3), (8, 8)]
        .iter()
        .map(|&(h, w)| concept_count(h, w, &cfg).unwrap_or(0))
        .collect();
    check(spots == [5, 27, 1232], format!("1..8 x 1..8 match brute force; spots {spots:?}"))
}

fn worked_example() -> Outcome {
    let x = Tensor::from_f64(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).map_err(|e| e.to_string())?;
    let p = LcaParams {
        fc_weight: Tensor::from_f64(&[1, 1], &[1.0]).unwrap(),
        fc_bias: Tensor::zeros(&[1]),
    };
    let out: Tensor<f64> = lca_forward(&x, &p, &LcaConfig::new(1).with_embed_dim(1)).map_err(|e| e.to_string())?;
    let v = out.data()[0];
    check((v - 2.5).abs() <= 1e-6, format!("output {v}"))
}

fn loss_identities() -> Outcome {
    let entropy_of = |logits: Tensor<f64>| -> (f64, f64) {
        let mut t = Tape::new();
        let x = t.input(logits);
        let lp = t.log_softmax(x).unwrap();
        let h = t.entropy(lp).unwrap();
        let g = t.gradients(h).unwrap().get(x).unwrap().clone();
        let norm = g.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        (t.value(h).item().unwrap(), norm)
    };
    let k = 7;
    let (h_uniform, grad_norm) = entropy_of(Tensor::new(&[2, k], vec![0.3; 2 * k]).unwrap());
    let ln_k_err = (h_uniform - (k as f64).ln()).abs();
    let mut peaked = vec![0.0; k];
    peaked[2] = 1000.0;
    let (h_onehot, _) = entropy_of(Tensor::new(&[1, k], peaked).unwrap());

    let mut rng = Rng::seed_from_u64(3);
    let logits = Tensor::new(&[4, 5], (0..20).map(|_| rng.uniform(-3.0, 3.0)).collect()).unwrap();
    let mut t = Tape::new();
    let x = t.input(logits);
    let terms = max_entropy_loss(&mut t, x, &[0, 1, 4, 2], &LossConfig { lambda_entropy: 0.0 }).unwrap();
    let gap = (t.value(terms.total).item().unwrap() - t.value(terms.nll).item().unwrap()).abs();

    let msg = format!(
        "|H-ln K|={ln_k_err:.1e}, H(one-hot)={h_onehot:.1e}, |L-NLL| at λ=0 {gap:.1e}, |∇H| uniform {grad_norm:.1e}"
    );
    check(ln_k_err <= 1e-9 && h_onehot.abs() <= 1e-12 && gap <= 1e-12 && grad_norm < 1e-10, msg)
}

fn desk_training() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg_path = synth_run(dir.path(), 8, 64, 16, "");
    let mut cfg = RunConfig::from_file(&cfg_path).map_err(|e| e.to_string())?;
    cfg.epochs = 30;
    cfg.batch_size = 32;
    cfg.lr = 0.01;
    cfg.momentum = 0.9;
    cfg.lambda_entropy = 0.1;
    cfg.channels = vec![32, 64];
    cfg.embed_dim = Some(32);
    cfg.lr_step_epoch = Some(30);

    let run = |head: HeadKind| -> Result<(f64, f64, f64), String> {
        let mut cfg = cfg.clone();
        cfg.head = head;
        cfg.ckpt_out = dir.path().join(format!("{head}.lcac"));
        cfg.log_csv = dir.path().join(format!("{head}.csv"));
        let start = Instant::now();
        let trainer = run_training(&cfg, None, &SystemClock::start()).map_err(|e| e.to_string())?;
        let secs = start.elapsed().as_secs_f64();
        let train = load_dataset(&cfg, &cfg.data_train).map_err(|e| e.to_string())?;
        let test = load_dataset(&cfg, &cfg.data_test).map_err(|e| e.to_string())?;
        let tr = evaluate(&trainer.model, &train, 64).map_err(|e| e.to_string())?.accuracy();
        let te = evaluate(&trainer.model, &test, 64).map_err(|e| e.to_string())?.accuracy();
        Ok((tr, te, secs))
    };
    let (tr, te, secs) = run(HeadKind::Lca)?;
    let gap = match run(HeadKind::Gap) {
        Ok((gtr, gte, _)) => format!("gap control {gtr:.1}%/{gte:.1}%"),
        Err(e) => format!("gap control failed: {e}"),
    };
    check(
        tr >= 95.0 && te >= 85.0 && secs < 300.0,
        format!("lca train {tr:.1}% test {te:.1}% in {secs:.0}s; {gap}"),
    )
}

fn determinism() -> Outcome {
    let err = |e: lca_core::Error| e.to_string();
    let io = |e: std::io::Error| e.to_string();
    let extra = |epochs: u32| format!("epochs={epochs}\nlr_step_epoch=3\naug.translate_px=1\naug.noise_sigma=0.02");

    let mut csvs = Vec::new();
    let mut ckpts = Vec::new();
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(io)?;
        let cfg = synth_run(dir.path(), 4, 8, 4, &extra(5));
        run_training(&RunConfig::from_file(&cfg).map_err(err)?, None, &FrozenClock).map_err(err)?;
        csvs.push(fs::read(dir.path().join("metrics.csv")).map_err(io)?);
        ckpts.push(fs::read(dir.path().join("checkpoint.lcac")).map_err(io)?);
        dirs.push(dir);
    }
    let csv_same = csvs[0] == csvs[1];

    let split = tempfile::tempdir().map_err(io)?;
    let cfg = synth_run(split.path(), 4, 8, 4, &extra(2));
    run_training(&RunConfig::from_file(&cfg).map_err(err)?, None, &FrozenClock).map_err(err)?;
    let mid = split.path().join("mid.lcac");
    fs::copy(split.path().join("checkpoint.lcac"), &mid).map_err(io)?;
    let cfg = synth_run(split.path(), 4, 8, 4, &extra(5));
    run_training(&RunConfig::from_file(&cfg).map_err(err)?, Some(&mid), &FrozenClock).map_err(err)?;
    let resumed_csv = fs::read(split.path().join("metrics.csv")).map_err(io)?;
    let resumed_ckpt = fs::read(split.path().join("checkpoint.lcac")).map_err(io)?;
    let resume_same = resumed_csv == csvs[0] && resumed_ckpt == ckpts[0];

    let decoded = load_checkpoint(&dirs[0].path().join("checkpoint.lcac")).map_err(err)?;
    let roundtrip_same = decoded.encode() == ckpts[0] && Checkpoint::decode(&ckpts[0]).map_err(err)?.encode() == ckpts[0];

    check(
        csv_same && resume_same && roundtrip_same,
        format!("csv identical {csv_same}, resume 2+3 == 5 {resume_same}, checkpoint round-trip {roundtrip_same}"),
    )
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(lo, hi)).collect()).unwrap()
}

fn properties() -> Outcome {
    let mut runner = TestRunner::new(PropConfig {
        cases: 128,
        failure_persistence: None,
        ..PropConfig::default()
    });
    let dims = (2usize..=6, 2usize..=6, 1usize..4, any::<bool>(), any::<u64>());

    runner
        .run(&dims, |(h, w, c, include, seed)| {
            let mut rng = Rng::seed_from_u64(seed);
            let cfg = LcaConfig {
                in_channels: c,
                embed_dim: 3,
                include_one_by_k: include,
            };
            let x = random(&[1, c, h, w], -1.0, 1.0, &mut rng);
            let p = LcaParams {
                fc_weight: random(&[3, c], -1.0, 1.0, &mut rng),
                fc_bias: random(&[3], -0.3, 0.3, &mut rng),
            };
            let out = lca_forward(&x, &p, &cfg).unwrap();
            let emb = concept_embeddings(&x, &p, &cfg).unwrap();
            let n = emb.shape()[1];
            let mut order: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut order);
            for o in 0..3 {
                let s: f64 = order.iter().map(|&i| emb.data()[i * 3 + o]).sum();
                prop_assert!((s / n as f64 - out.data()[o]).abs() <= 1e-12);
            }
            Ok(())
        })
        .map_err(|e| format!("permutation invariance: {e}"))?;

    runner
        .run(&(dims, 0.05f64..20.0), |((h, w, c, include, seed), alpha)| {
            let mut rng = Rng::seed_from_u64(seed);
            let cfg = LcaConfig {
                in_channels: c,
                embed_dim: 3,
                include_one_by_k: include,
            };
            let x = random(&[1, c, h, w], -1.0, 1.0, &mut rng);
            let p = LcaParams {
                fc_weight: random(&[3, c], -1.0, 1.0, &mut rng),
                fc_bias: Tensor::zeros(&[3]),
            };
            let base = lca_forward(&x, &p, &cfg).unwrap();
            let scaled = lca_forward(&x.map(|v| alpha * v), &p, &cfg).unwrap();
            for (s, b) in scaled.data().iter().zip(base.data()) {
                prop_assert!((s - alpha * b).abs() <= 1e-10);
            }
            Ok(())
        })
        .map_err(|e| format!("homogeneity: {e}"))?;

    runner
        .run(&(1usize..8, 1usize..8, any::<u64>()), |(h, w, seed)| {
            let x = random(&[2, 2, h, w], -5.0, 5.0, &mut Rng::seed_from_u64(seed));
            prop_assert_eq!(avgpool2d(&x, 1, 1, 1).unwrap(), x.clone());
            let x32: Tensor<f32> = x.cast();
            prop_assert_eq!(avgpool2d(&x32, 1, 1, 1).unwrap(), x32);
            Ok(())
        })
        .map_err(|e| format!("avgpool identity: {e}"))?;

    runner
        .run(&(1usize..100, 1usize..33, any::<u64>()), |(n, batch, seed)| {
            let mut rng = Rng::seed_from_u64(seed);
            let labels: Vec<usize> = (0..n).map(|_| rng.below(5) as usize).collect();
            let ds = Dataset {
                kind: SampleKind::Features,
                sample_shape: [1, 1, 1],
                data: vec![0.0; n],
                labels: labels.clone(),
                class_names: (0..5).map(|c| c.to_string()).collect(),
            };
            let mut seen: Vec<usize> = batches(&ds, batch, Some(seed))
                .unwrap()
                .flat_map(|b| b.labels)
                .collect();
            let mut want = labels;
            want.sort_unstable();
            seen.sort_unstable();
            prop_assert_eq!(seen, want);
            Ok(())
        })
        .map_err(|e| format!("label multiset: {e}"))?;

    Ok("permutation, homogeneity, 1x1 avgpool identity, epoch label multiset: 128 cases each".into())
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient checks below 1e-5 within 60s", gradients),
        ("concept counts", counts),
        ("2x2 worked example gives 2.5", worked_example),
        ("loss identities", loss_identities),
        ("desk-scale training", desk_training),
        ("determinism and persistence", determinism),
        ("property suite", properties),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let (verdict, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {} {verdict}: {name} ({detail})", i + 1);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
