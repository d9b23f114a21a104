//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::path::Path;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, TestRunner};
use rand::Rng;

use msac::apps::lm::{lm_forward, LmConfig, ToyLm};
use msac::apps::similarity::{AugmentMode, SimilarityConfig, SimilarityModel};
use msac::attention::{head_coefficients, sa2d_coefficients, sa2d_project, sa2d_scores, self_attention_1d};
use msac::autodiff::{grad_check, registered_ops};
use msac::conv::{conv2d_with, conv_bank_with, matmul_via_conv, ConvKernel};
use msac::init::{self, rng, SeededRng};
use msac::io::{decode, encode, load_params, read_tensor, save_params, write_tensor};
use msac::{AttentionParams, HeadShape, MSACParams, MsacConfig, MultiHeadParams, ParamTree, Tensor};
use msac_cli::bench::{self, BenchOp, Plan};
use msac_cli::train::{run_lm, run_similarity, LmRun, SimilarityRun};
use msac_cli::verify::{run_suite, Suite};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn uni(r: &mut SeededRng, shape: &[usize]) -> Tensor<f64> {
    init::uniform(r, shape, -1.0, 1.0).unwrap()
}

fn ms(d: Duration) -> String {
    format!("{:.1} ms", d.as_secs_f64() * 1e3)
}

// ---- independent oracles ------------------------------------------------

fn dense_matmul(w: &Tensor<f64>, x: &Tensor<f64>) -> Tensor<f64> {
    let (a, b, c) = (w.shape()[0], w.shape()[1], x.shape()[1]);
    Tensor::from_fn(&[a, c], |ix| {
        (0..b).map(|k| w.get(&[ix[0], k]) * x.get(&[k, ix[1]])).sum()
    })
    .unwrap()
}

/// 1-based double sum with `ceil(n/2)` offsets and zero padding.
fn oracle_conv2d(x: &Tensor<f64>, h: &Tensor<f64>) -> Tensor<f64> {
    let (rows, cols, d) = (x.shape()[0] as i64, x.shape()[1] as i64, x.shape()[2]);
    let (n, m) = (h.shape()[0] as i64, h.shape()[1] as i64);
    Tensor::from_fn(&[rows as usize, cols as usize], |ij| {
        let (i, j) = (ij[0] as i64 + 1, ij[1] as i64 + 1);
        let mut acc = 0.0;
        for k in 1..=n {
            for l in 1..=m {
                let (a, b) = (i - (n + 1) / 2 + k, j - (m + 1) / 2 + l);
                if (1..=rows).contains(&a) && (1..=cols).contains(&b) {
                    for c in 0..d {
                        acc +=
                            x.get(&[a as usize - 1, b as usize - 1, c]) * h.get(&[k as usize - 1, l as usize - 1, c]);
                    }
                }
            }
        }
        acc
    })
    .unwrap()
}

fn rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_rel_diff(b, 1e-300).unwrap()
}

// ---- criteria ------------------------------------------------------------

fn lemma1() -> Verdict {
    let start = Instant::now();
    let mut r = rng(7);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (dp, d, n) = (r.random_range(1..=8), r.random_range(1..=8), r.random_range(1..=8));
        let w = init::integers(&mut r, &[dp, d], -9, 9).unwrap();
        let x = init::integers(&mut r, &[d, n], -9, 9).unwrap();
        worst = worst.max(
            matmul_via_conv(&w, &x)
                .unwrap()
                .max_abs_diff(&dense_matmul(&w, &x))
                .unwrap(),
        );
    }
    let cli = run_suite(Suite::Lemma1, 100, 7, None).unwrap();
    let took = start.elapsed();
    verdict(
        worst == 0.0 && cli.max_abs_deviation == 0.0 && took < Duration::from_secs(1),
        format!("100 instances, max deviation {worst}, {}", ms(took)),
    )
}

fn conv_oracles() -> Verdict {
    let mut r = rng(2);
    let (mut vs_oracle, mut fast_vs_naive) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let (rows, cols) = (r.random_range(1..=5), r.random_range(1..=5));
        let (n, m) = (r.random_range(1..=rows.min(3)), r.random_range(1..=cols.min(3)));
        let (d, f) = (r.random_range(1..=3), r.random_range(1..=4));
        let x = uni(&mut r, &[rows, cols, d]);
        let bank = uni(&mut r, &[f, n, m, d]);
        let h = bank.narrow(0, 0, 1).unwrap().reshape(&[n, m, d]).unwrap();
        let want = oracle_conv2d(&x, &h);
        for k in [ConvKernel::Naive, ConvKernel::PatchMatrix] {
            vs_oracle = vs_oracle.max(rel(&conv2d_with(&x, &h, k).unwrap(), &want));
        }
        let naive = conv_bank_with(&x, &bank, ConvKernel::Naive).unwrap();
        let fast = conv_bank_with(&x, &bank, ConvKernel::PatchMatrix).unwrap();
        for fi in 0..f {
            let hf = bank.narrow(0, fi, 1).unwrap().reshape(&[n, m, d]).unwrap();
            let want = oracle_conv2d(&x, &hf);
            let got = Tensor::from_fn(&[rows, cols], |ix| naive.get(&[ix[0], ix[1], fi])).unwrap();
            vs_oracle = vs_oracle.max(rel(&got, &want));
        }
        fast_vs_naive = fast_vs_naive.max(rel(&fast, &naive));
    }
    verdict(
        vs_oracle <= 1e-12 && fast_vs_naive <= 1e-10,
        format!("100 instances, vs oracle {vs_oracle:.2e}, patch-matrix vs naive {fast_vs_naive:.2e}"),
    )
}

fn reduction_chain() -> Verdict {
    let reports: Vec<_> = [Suite::Sa2d1d, Suite::SacSa2d, Suite::MsacSac]
        .into_iter()
        .map(|s| run_suite(s, 100, 11, Some(1e-12)).unwrap())
        .collect();
    let detail = reports
        .iter()
        .map(|r| format!("{} {:.2e}", r.suite, r.max_rel_deviation))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(reports.iter().all(|r| r.pass), format!("100 trials each: {detail}"))
}

/// Every `(i, j)` slice of an `N×M×N×M` coefficient tensor.
fn slices_ok(a: &Tensor<f64>) -> Result<(), TestCaseError> {
    let (n, m) = (a.shape()[0], a.shape()[1]);
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for r in 0..n {
                for t in 0..m {
                    let v = a.get(&[r, t, i, j]);
                    prop_assert!(v > 0.0, "coefficient {v} at ({r},{t},{i},{j})");
                    s += v;
                }
            }
            prop_assert!((s - 1.0).abs() <= 1e-12, "slice ({i},{j}) sums to {s}");
        }
    }
    Ok(())
}

fn normalization() -> Verdict {
    let mut runner = TestRunner::new(Config {
        cases: 256,
        failure_persistence: None,
        ..Config::default()
    });
    let strategy = (
        1usize..=4,
        1usize..=4,
        1usize..=3,
        1usize..=3,
        1usize..=3,
        any::<u64>(),
        0.1f64..10.0,
    );
    let result = runner.run(&strategy, |(n, m, fh, fw, heads, seed, spread)| {
        let mut r = rng(seed);
        let (fh, fw) = (fh.min(n), fw.min(m));

        // 1D attention: with X = [I; 1] and W_V = I the output is Aᵀ
        let len = n * m;
        let x = Tensor::from_fn(
            &[len + 1, len],
            |ix| if ix[0] == ix[1] || ix[0] == len { 1.0 } else { 0.0 },
        )
        .unwrap();
        let wq = uni(&mut r, &[2, len + 1]).scale(spread);
        let wk = uni(&mut r, &[2, len + 1]);
        let wv = Tensor::from_fn(&[len, len + 1], |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 }).unwrap();
        let at = self_attention_1d(&x, &wq, &wk, &wv).unwrap();
        for i in 0..len {
            let row: Vec<f64> = (0..len).map(|j| at.get(&[j, i])).collect();
            prop_assert!(row.iter().all(|&v| v > 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        // single 2D head with bias
        let s = HeadShape {
            d: 2,
            d_a: 2,
            d_o: 2,
            n: fh,
            m: fw,
        };
        let mut head = AttentionParams::init(&mut r, s, Some((n, m))).unwrap();
        head.hq = head.hq.scale(spread);
        head.bias = Some(uni(&mut r, &[n, m]).scale(spread));
        let xi = uni(&mut r, &[n, m, 2]);
        let (q, k, _) = sa2d_project(&xi, &head).unwrap();
        slices_ok(&sa2d_coefficients(&sa2d_scores(&q, &k).unwrap(), 2, head.bias.as_ref()).unwrap())?;

        // multi-head / SAC / MSAC heads
        let mh = MultiHeadParams::init(&mut r, s, heads, Some((n, m))).unwrap();
        for a in head_coefficients(&xi, &mh).unwrap() {
            slices_ok(&a)?;
        }
        let cfg = MsacConfig {
            d: 2,
            d_a: 2,
            d_o: 2,
            heads,
            scales: vec![[1, 1], [fh, fw]],
            parallel_conv: true,
            bias: true,
            seed,
        };
        let p: MSACParams<Tensor<f64>> = cfg.init((n, m)).unwrap();
        for scale in &p.scales {
            for a in head_coefficients(&xi, &scale.mh).unwrap() {
                slices_ok(&a)?;
            }
        }

        // sentence mode
        let sentence = uni(&mut r, &[1, len, 2]);
        let cfg = MsacConfig {
            scales: vec![[1, 1], [1, fw.min(len)]],
            ..cfg
        };
        let p: MSACParams<Tensor<f64>> = cfg.init((1, len)).unwrap();
        for scale in &p.scales {
            for a in head_coefficients(&sentence, &scale.mh).unwrap() {
                prop_assert_eq!(a.shape(), &[1, len, 1, len]);
                slices_ok(&a)?;
            }
        }
        Ok(())
    });
    match result {
        Ok(()) => verdict(
            true,
            "256 random cases over 1D, 2D, multi-head, SAC, MSAC and sentence heads",
        ),
        Err(e) => verdict(false, format!("{e}")),
    }
}

fn gradients() -> Verdict {
    let start = Instant::now();
    let mut worst = ("", 0.0f64);
    let mut failures = Vec::new();
    for op in registered_ops() {
        match grad_check(op, 5, 42) {
            Ok(r) if r.max_rel_error < 1e-4 => {
                if r.max_rel_error > worst.1 {
                    worst = (op, r.max_rel_error);
                }
            }
            Ok(r) => failures.push(format!("{op} {:.2e}", r.max_rel_error)),
            Err(e) => failures.push(format!("{op}: {e}")),
        }
    }
    let took = start.elapsed();
    verdict(
        failures.is_empty() && took < Duration::from_secs(60),
        if failures.is_empty() {
            format!(
                "{} ops, worst {} {:.2e}, {}",
                registered_ops().len(),
                worst.0,
                worst.1,
                ms(took)
            )
        } else {
            format!("failed: {}", failures.join("; "))
        },
    )
}

fn read_json<C: for<'de> serde::Deserialize<'de>>(name: &str) -> C {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(name);
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn same_dirs(a: &Path, b: &Path) -> bool {
    let files = |d: &Path| {
        let mut v: Vec<_> = walk(d)
            .into_iter()
            .map(|p| (p.strip_prefix(d).unwrap().to_path_buf(), std::fs::read(&p).unwrap()))
            .collect();
        v.retain(|(p, _)| p != Path::new("summary.json"));
        v.sort();
        v
    };
    files(a) == files(b)
}

fn walk(d: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in std::fs::read_dir(d).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

fn trainability() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let lm: LmRun = read_json("lm.json");
    let a = run_lm(&lm, &tmp.path().join("lm_a"), None);
    let b = run_lm(&lm, &tmp.path().join("lm_b"), None);
    let (Ok(a), Ok(_)) = (a, b) else {
        return verdict(false, "language model run failed");
    };
    let lm_ok =
        a.final_loss < 0.1 && a.steps_run <= 2000 && same_dirs(&tmp.path().join("lm_a"), &tmp.path().join("lm_b"));

    let mut parts = vec![format!("lm CE {:.4} at step {}", a.final_loss, a.steps_run)];
    let mut sim_ok = true;
    for cfg in ["similarity.json", "similarity_channel.json"] {
        let run: SimilarityRun = read_json(cfg);
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs").join(cfg);
        let (da, db) = (tmp.path().join(format!("{cfg}_a")), tmp.path().join(format!("{cfg}_b")));
        match (
            run_similarity(&run, &path, &da, None),
            run_similarity(&run, &path, &db, None),
        ) {
            (Ok(s), Ok(_)) => {
                let acc = s.final_accuracy.unwrap_or(0.0);
                sim_ok &= acc == 1.0 && s.steps_run <= 3000 && same_dirs(&da, &db);
                parts.push(format!(
                    "{} accuracy {acc} at step {}",
                    cfg.trim_end_matches(".json"),
                    s.steps_run
                ));
            }
            _ => {
                sim_ok = false;
                parts.push(format!("{cfg} failed"));
            }
        }
    }
    parts.push("reruns bitwise identical".into());
    verdict(lm_ok && sim_ok, parts.join(", "))
}

fn scaling() -> Verdict {
    let plan = |op, sizes: Vec<usize>| Plan {
        op,
        sizes: Some(sizes),
        repeats: 7,
        mem_cap_mib: 1024,
        seed: 0,
    };
    let attn = bench::run(&plan(BenchOp::Sa2d, vec![4, 8, 16])).unwrap().records;
    let conv = bench::run(&plan(BenchOp::Conv2d, vec![3, 5, 8])).unwrap().records;
    let elems_ok = attn
        .iter()
        .all(|r| r.score_elements == ((r.big_n * r.big_m) as u64).pow(2))
        && attn.windows(2).all(|w| w[1].score_elements == 16 * w[0].score_elements);
    // N·M grows 4× per step; linear time would grow 4×
    let t = |i: usize| attn[i].wall_ns as f64;
    let growth = t(2) / t(1);
    let macs_ok = conv
        .iter()
        .all(|r| r.macs == (r.big_n * r.big_m * r.n * r.m * r.d) as u64);
    verdict(
        elems_ok && growth > 4.0 && macs_ok,
        format!(
            "score elements (N·M)² {}, sa2d time 8×8→16×16 grew {growth:.1}× for 4× pixels, conv2d MACs exact {}",
            if elems_ok { "exact" } else { "WRONG" },
            if macs_ok { "yes" } else { "no" }
        ),
    )
}

fn bits<P: ParamTree<Tensor<f64>>>(p: &P) -> Vec<Vec<u64>> {
    let mut out = Vec::new();
    p.visit_params(&mut |_, t| out.push(t.data().iter().map(|v| v.to_bits()).collect()));
    out
}

fn survives<P: ParamTree<Tensor<f64>>>(mut p: P, seed: u64, dir: &Path) -> bool {
    let mut r = rng(seed);
    p.visit_params_mut(&mut |_, t| *t = init::normal(&mut r, t.shape(), 2.0).unwrap());
    let before = bits(&p);
    save_params(dir, &p).unwrap();
    p.visit_params_mut(&mut |_, t| *t = Tensor::zeros(t.shape()).unwrap());
    load_params(dir, &mut p).unwrap();
    bits(&p) == before
}

fn serialization() -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let msac_cfg = MsacConfig {
        d: 3,
        d_a: 2,
        d_o: 2,
        heads: 2,
        scales: vec![[1, 1], [2, 3]],
        parallel_conv: true,
        bias: true,
        seed: 1,
    };
    let lm = LmConfig {
        vocab: 5,
        d: 3,
        d_a: 2,
        d_o: 3,
        heads: 2,
        scales: vec![[1, 1], [1, 2]],
        layers: 2,
        parallel_conv: true,
        bias: true,
        max_len: 6,
        seed: 2,
    };
    let sim = |augmentation| SimilarityConfig {
        rows: 2,
        cols: 2,
        d: 2,
        d_a: 2,
        d_o: 2,
        heads: 1,
        scales: vec![[1, 1], [2, 2]],
        layers: 2,
        parallel_conv: true,
        bias: true,
        augmentation,
        seed: 3,
    };
    let mut ok = vec![
        survives(msac_cfg.init::<f64>((4, 4)).unwrap(), 1, &tmp.path().join("msac")),
        survives(ToyLm::<Tensor<f64>>::init(&lm).unwrap(), 2, &tmp.path().join("lm")),
        survives(
            SimilarityModel::<Tensor<f64>>::init(&sim(AugmentMode::Additive)).unwrap(),
            3,
            &tmp.path().join("sa"),
        ),
        survives(
            SimilarityModel::<Tensor<f64>>::init(&sim(AugmentMode::Channel { d_seg: 1 })).unwrap(),
            4,
            &tmp.path().join("sc"),
        ),
    ];
    let mut r = rng(5);
    for i in 0..100 {
        let rank = r.random_range(1..=4);
        let shape: Vec<usize> = (0..rank).map(|_| r.random_range(1..=4)).collect();
        let vals: Vec<f64> = (0..shape.iter().product::<usize>())
            .map(|_| f64::from_bits(r.random::<u64>()))
            .map(|v| if v.is_nan() { -0.0 } else { v })
            .collect();
        let t = Tensor::new(shape, vals).unwrap();
        let path = tmp.path().join(format!("t{i}.mst"));
        write_tensor(&path, &t).unwrap();
        let back: Tensor<f64> = read_tensor(&path).unwrap();
        let same = |a: &Tensor<f64>| {
            a.shape() == t.shape() && a.data().iter().zip(t.data()).all(|(x, y)| x.to_bits() == y.to_bits())
        };
        ok.push(same(&back) && same(&decode(&encode(&t)).unwrap()));
    }
    // a reloaded model computes the same outputs
    let trained = ToyLm::<Tensor<f64>>::init(&LmConfig { seed: 9, ..lm.clone() }).unwrap();
    save_params(tmp.path().join("lm9"), &trained).unwrap();
    let mut fresh = ToyLm::<Tensor<f64>>::init(&lm).unwrap();
    load_params(tmp.path().join("lm9"), &mut fresh).unwrap();
    ok.push(lm_forward(&[0, 1, 2, 4], &fresh).unwrap() == lm_forward(&[0, 1, 2, 4], &trained).unwrap());
    let passed = ok.iter().filter(|&&b| b).count();
    verdict(
        passed == ok.len(),
        format!(
            "{passed}/{} checks (4 parameter sets, 100 random tensors, reloaded forward pass)",
            ok.len()
        ),
    )
}

type Criterion = (&'static str, fn() -> Verdict);

fn main() {
    let criteria: [Criterion; 8] = [
        ("matmul via convolution", lemma1),
        ("convolution oracles", conv_oracles),
        ("reduction chain", reduction_chain),
        ("attention normalization", normalization),
        ("gradient suite", gradients),
        ("trainability demos", trainability),
        ("scaling sanity", scaling),
        ("serialization round trip", serialization),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let v = check();
        println!(
            "criterion {} {name}: {} ({})",
            i + 1,
            if v.pass { "PASS" } else { "FAIL" },
            v.detail
        );
        if !v.pass {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} criteria passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
