//! Acceptance checks 1 to 12. Prints one line per criterion and exits
//! non-zero if a gated criterion fails.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use seqrot::io::{self, decode, encode, IoError, Tensor, TensorData};
use seqrot::lab::{median, r4_ablation, sign_test, AblationConfig, Precision};
use seqrot::quant::{
    gptq_quantize, gptq_quantize_unguarded, quant_error, rtn_quantize, CalibrationHessian, Clip,
    ErrorMetric, GroupSize, QuantSpec, QuantizedTensor,
};
use seqrot::rotation::{
    build_toy_block, fuse_rotations, observation1_locality, perturbation_delta, toy_input,
    Perturbation, R4Mode, RotationAssignment, RotationChoice, ToyBlockConfig,
};
use seqrot::transform::{
    gsr, hadamard_sylvester, randomize_signs, row_sequency, walsh, walsh_from_hadamard,
    walsh_permutation, BlockBase,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn powers(max: usize) -> impl Iterator<Item = usize> {
    (1..).map(|k| 1usize << k).take_while(move |&n| n <= max)
}

fn c1_sequency() -> Outcome {
    let start = Instant::now();
    let h = hadamard_sylvester(8).map_err(|e| e.to_string())?;
    let seqs: Vec<usize> = (0..8).map(|i| row_sequency(h.row(i)).unwrap()).collect();
    let took = start.elapsed();
    ensure(seqs == [0, 7, 3, 4, 1, 6, 2, 5], || format!("got {seqs:?}"))?;
    ensure(took < Duration::from_millis(1), || format!("took {took:?}"))?;
    Ok(format!("{seqs:?} in {took:?}"))
}

fn c2_walsh() -> Outcome {
    let start = Instant::now();
    for n in powers(4096) {
        let h = hadamard_sylvester(n).unwrap();
        let w = walsh_from_hadamard(&h).map_err(|e| e.to_string())?;
        for k in 0..n {
            let s = row_sequency(w.row(k)).unwrap();
            ensure(s == k, || format!("n={n}: walsh row {k} has sequency {s}"))?;
        }
        let natural: Vec<usize> = (0..n).map(|i| row_sequency(h.row(i)).unwrap()).collect();
        let mut sorted: Vec<usize> = (0..n).collect();
        sorted.sort_by_key(|&i| natural[i]);
        ensure(sorted == walsh_permutation(n), || format!("n={n}: permutation differs"))?;
    }
    let took = start.elapsed();
    ensure(took < Duration::from_secs(10), || format!("took {took:?}"))?;
    Ok(format!("n = 2..4096 in {took:.2?}"))
}

fn c3_orthogonality() -> Outcome {
    let mut worst = 0.0f64;
    let mut count = 0;
    for n in powers(4096) {
        for seed in 0..20u64 {
            let g = n.min(64);
            let shared = Some(seqrot::transform::SignRandomization { seed, per_block: false });
            let per_block = Some(seqrot::transform::SignRandomization { seed, per_block: true });
            let ms = [
                randomize_signs(&hadamard_sylvester(n).unwrap(), seed),
                randomize_signs(&walsh(n).unwrap(), seed),
                gsr(n, g, BlockBase::HadamardNatural, shared).unwrap(),
                gsr(n, g, BlockBase::Walsh, shared).unwrap(),
                gsr(n, (n / 2).max(2), BlockBase::HadamardNatural, per_block).unwrap(),
                gsr(n, (n / 2).max(2), BlockBase::Walsh, per_block).unwrap(),
            ];
            for m in &ms {
                let r = m.orthogonality_residual();
                worst = worst.max(r);
                count += 1;
                ensure(r < 1e-10, || format!("n={n} seed={seed} {:?}: {r:e}", m.kind()))?;
            }
        }
    }
    Ok(format!("{count} matrices, worst residual {worst:.2e}"))
}

fn c4_structure() -> Outcome {
    let mut pairs = 0;
    for c in powers(1024) {
        for g in powers(c) {
            let m = gsr(c, g, BlockBase::Walsh, None).map_err(|e| e.to_string())?;
            let base = walsh(g).unwrap();
            for i in 0..c {
                for j in 0..c {
                    let (bi, bj) = (i / g, j / g);
                    let want = if bi == bj { base.sign(i % g, j % g) } else { 0 };
                    ensure(m.sign(i, j) == want, || format!("C={c} G={g} at ({i},{j})"))?;
                }
            }
            pairs += 1;
        }
    }
    Ok(format!("{pairs} (C, G) pairs exact"))
}

fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    a.qr().q()
}

fn c5_locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..100u64 {
        let n = 1usize << rng.random_range(2..6);
        let g = 1usize << rng.random_range(1..=n.trailing_zeros());
        let m = rng.random_range(2..10);
        let w = DMatrix::from_fn(n, m, |_, _| rng.sample::<f64, _>(StandardNormal));
        let f = random_orthogonal(n, &mut rng);
        let r = random_orthogonal(m, &mut rng);
        let gi = rng.random_range(0..n / g);
        let ok = observation1_locality(&w, &f, &r, gi, g, case).map_err(|e| e.to_string())?;
        ensure(ok, || format!("case {case}: n={n} g={g} group {gi} moved"))?;

        let inside = perturbation_delta(
            &w,
            &f,
            &r,
            Perturbation::FrontInsideGroup { group_index: gi, group: g },
            case,
        )
        .unwrap();
        for i in 0..n {
            let moved = inside.row(i).amax();
            let in_group = i / g == gi;
            ensure(in_group == (moved > 1e-9) && (in_group || moved == 0.0), || {
                format!("case {case}: inside-group control, row {i} moved {moved:e}")
            })?;
        }

        let j = rng.random_range(0..m);
        let rear = perturbation_delta(&w, &f, &r, Perturbation::RearColumn(j), case).unwrap();
        for c in 0..m {
            let moved = rear.column(c).amax();
            ensure((c == j) == (moved > 1e-9) && (c == j || moved == 0.0), || {
                format!("case {case}: rear control, column {c} moved {moved:e}")
            })?;
        }
    }
    Ok("100 instances local; both controls move only their slices".into())
}

fn c6_invariance() -> Outcome {
    let choices = [
        RotationChoice::Identity,
        RotationChoice::GH,
        RotationChoice::GW,
        RotationChoice::LH,
        RotationChoice::GSR,
    ];
    let (mut worst64, mut worst32, mut runs) = (0.0f64, 0.0f32, 0usize);
    for seed in 0..20u64 {
        let cfg = ToyBlockConfig {
            seed,
            ..ToyBlockConfig::default()
        };
        let block = build_toy_block(cfg).map_err(|e| e.to_string())?;
        let x = toy_input(&cfg, seed);
        let x32 = x.map(|v| v as f32);
        let y64 = block.forward(&x, None).unwrap();
        let y32 = block.forward_in(&x32, None).unwrap();
        // every assignment of the five choices to R1..R4, both R4 modes
        for code in 0..choices.len().pow(4) * 2 {
            let pick = |k: u32| choices[code / 5usize.pow(k) % 5].clone();
            let assign = RotationAssignment {
                r1: pick(0),
                r2: pick(1),
                r3: pick(2),
                r4: pick(3),
                r4_mode: if code >= 625 { R4Mode::Local } else { R4Mode::Global },
                seed: seed * 7,
            };
            let fused = fuse_rotations(&block, &assign).map_err(|e| e.to_string())?;
            worst64 = worst64.max((fused.forward(&x, None).unwrap() - &y64).amax());
            worst32 = worst32.max((fused.forward_in(&x32, None).unwrap() - &y32).amax());
            runs += 1;
        }
    }
    ensure(worst64 < 1e-10, || format!("f64 max |dy| {worst64:e}"))?;
    ensure(worst32 < 1e-4, || format!("f32 max |dy| {worst32:e}"))?;
    Ok(format!(
        "{runs} fused blocks, max |dy| f64 {worst64:.2e}, f32 {worst32:.2e}"
    ))
}

fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, 2 * n, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() / (2 * n) as f64 + DMatrix::identity(n, n) * 1e-3
}

fn c7_gptq() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let spec = QuantSpec::new(2, GroupSize::Fixed(4), false, Clip::None).unwrap();
    let mut plain_losses = 0;
    for case in 0..100 {
        let w = DMatrix::from_fn(8, 8, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = random_spd(8, &mut rng);
        let ch = CalibrationHessian { h: h.clone(), sample_count: 16 };
        let proxy = |q: &QuantizedTensor| {
            quant_error(&w, &q.dequantize(), ErrorMetric::ProxyHessian(&h)).unwrap()
        };
        let rtn = proxy(&rtn_quantize(&w, &spec).unwrap());
        let gptq = proxy(&gptq_quantize(&w, &ch, &spec).map_err(|e| e.to_string())?);
        let plain = proxy(&gptq_quantize_unguarded(&w, &ch, &spec).unwrap());
        if plain > rtn + 1e-12 {
            plain_losses += 1;
        }
        ensure(gptq <= rtn + 1e-12, || format!("case {case}: gptq {gptq:e} > rtn {rtn:e}"))?;
    }

    // 2×2: exhaustive search over the same grid bounds GPTQ from below
    let spec2 = QuantSpec::new(2, GroupSize::PerChannel, false, Clip::None).unwrap();
    let (mut sums, mut n2) = ([0.0f64; 3], 0);
    for case in 0..100 {
        let w = DMatrix::from_fn(2, 2, |_, _| rng.sample::<f64, _>(StandardNormal));
        let h = random_spd(2, &mut rng);
        let ch = CalibrationHessian { h: h.clone(), sample_count: 4 };
        let proxy = |q: &QuantizedTensor| {
            quant_error(&w, &q.dequantize(), ErrorMetric::ProxyHessian(&h)).unwrap()
        };
        let rq = rtn_quantize(&w, &spec2).unwrap();
        let rtn = proxy(&rq);
        let gptq = proxy(&gptq_quantize(&w, &ch, &spec2).unwrap());
        let mut best = f64::INFINITY;
        for code in 0..256usize {
            let codes: Vec<i32> = (0..4).map(|k| (code >> (2 * k) & 3) as i32).collect();
            let cand = QuantizedTensor::from_parts(
                (2, 2),
                codes,
                rq.scales().to_vec(),
                rq.zero_points().map(<[i32]>::to_vec),
                spec2.clone(),
            )
            .unwrap();
            best = best.min(proxy(&cand));
        }
        ensure(gptq <= rtn + 1e-12 && gptq >= best * (1.0 - 1e-12) - 1e-15, || {
            format!("2x2 case {case}: optimum {best:e}, gptq {gptq:e}, rtn {rtn:e}")
        })?;
        sums[0] += best;
        sums[1] += gptq;
        sums[2] += rtn;
        n2 += 1;
    }
    let m = |s: f64| s / n2 as f64;
    Ok(format!(
        "8x8: gptq <= rtn in 100/100 (unguarded gptq lost {plain_losses}/100); 2x2 mean proxy optimum {:.4e}, gptq {:.4e}, rtn {:.4e}",
        m(sums[0]),
        m(sums[1]),
        m(sums[2])
    ))
}

/// Output of one `compare` invocation.
struct CompareRun {
    stdout: String,
    csv: Vec<u8>,
    took: Duration,
}

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_seqrot")
}

fn run_compare(args: &[String]) -> Result<CompareRun, String> {
    let start = Instant::now();
    let out = Command::new(bin()).args(args).output().map_err(|e| e.to_string())?;
    let took = start.elapsed();
    if !out.status.success() {
        return Err(format!(
            "exit {:?}: {}",
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    let path = args
        .iter()
        .position(|a| a == "--out")
        .map(|i| PathBuf::from(&args[i + 1]))
        .ok_or("no --out")?;
    let csv = std::fs::read(&path).map_err(|e| e.to_string())?;
    Ok(CompareRun { stdout, csv, took })
}

fn default_compare(dir: &Path) -> Result<CompareRun, String> {
    let out = dir.join("default.csv");
    run_compare(&[
        "--out".into(),
        out.display().to_string(),
        "compare".into(),
        "--variants".into(),
        "gh,gw,lh,gsr".into(),
        "--bits".into(),
        "2".into(),
        "--group".into(),
        "64".into(),
    ])
}

type Table = BTreeMap<(String, String), Vec<(usize, f64)>>;

fn parse_csv(bytes: &[u8]) -> Result<Table, String> {
    let rows = io::parse_report_csv(std::str::from_utf8(bytes).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let mut t = Table::new();
    for r in rows {
        t.entry((r.variant, r.metric)).or_default().push((r.tensor_id, r.value));
    }
    Ok(t)
}

fn mse_of(t: &Table, v: &str) -> Vec<f64> {
    let mut rows = t.get(&(v.to_string(), "mse".to_string())).cloned().unwrap_or_default();
    rows.sort_by_key(|r| r.0);
    rows.into_iter().map(|r| r.1).collect()
}

fn c8_directional(run: &Result<CompareRun, String>) -> (Outcome, Vec<String>) {
    let run = match run {
        Ok(r) => r,
        Err(e) => return (Err(format!("compare failed: {e}")), vec![]),
    };
    let table = match parse_csv(&run.csv) {
        Ok(t) => t,
        Err(e) => return (Err(e), vec![]),
    };
    let mut notes = Vec::new();
    let mut gated = Ok(());
    for (lo, hi, gate) in [("gw", "gh", false), ("gsr", "lh", false), ("gsr", "gh", true)] {
        let (a, b) = (mse_of(&table, lo), mse_of(&table, hi));
        let t = sign_test(&a, &b);
        let holds = median(&a) < median(&b) && t.p_value < 0.05;
        let line = format!(
            "median mse {lo} {:.4e} vs {hi} {:.4e}, sign test {}/{} p={:.2e}: {}{}",
            median(&a),
            median(&b),
            t.wins,
            t.wins + t.losses,
            t.p_value,
            if holds { "holds" } else { "DOES NOT HOLD" },
            if gate { " (gated)" } else { " (reported)" }
        );
        if gate && !holds {
            gated = Err(line.clone());
        }
        notes.push(line);
    }
    let fair = run.stdout.contains("fairness: identical inputs");
    let outcome = gated
        .and_then(|_| ensure(fair, || "fairness hashes differ".into()))
        .and_then(|_| {
            ensure(run.took < Duration::from_secs(300), || format!("took {:?}", run.took))
        })
        .map(|_| format!("pipeline ran in {:.1?}, fairness hashes identical", run.took));
    (outcome, notes)
}

fn c9_variance() -> Outcome {
    let w = seqrot::transform::sequency_profile(&walsh(128).unwrap(), 32).unwrap();
    let h = seqrot::transform::sequency_profile(&hadamard_sylvester(128).unwrap(), 32).unwrap();
    ensure(w.per_group_variance.iter().all(|&v| v == 85.25), || {
        format!("walsh variances {:?}", w.per_group_variance)
    })?;
    let min_h = h.per_group_variance.iter().cloned().fold(f64::INFINITY, f64::min);
    ensure(85.25 < min_h, || format!("hadamard minimum {min_h}"))?;
    let mut checked = 0;
    for n in powers(4096) {
        let hs: Vec<usize> = {
            let h = hadamard_sylvester(n).unwrap();
            (0..n).map(|i| row_sequency(h.row(i)).unwrap()).collect()
        };
        let ws: Vec<usize> = {
            let w = walsh(n).unwrap();
            (0..n).map(|i| row_sequency(w.row(i)).unwrap()).collect()
        };
        for g in powers(n / 2) {
            let mh = seqrot::transform::SequencyProfile::from_sequencies(hs.clone(), g)
                .unwrap()
                .mean_group_variance();
            let mw = seqrot::transform::SequencyProfile::from_sequencies(ws.clone(), g)
                .unwrap()
                .mean_group_variance();
            ensure(mw < mh, || format!("n={n} G={g}: walsh {mw} vs hadamard {mh}"))?;
            checked += 1;
        }
    }
    Ok(format!("n=128 G=32 walsh 85.25 < hadamard min {min_h}; {checked} (n, G) pairs with G in 2..n"))
}

fn c10_ablation() -> Outcome {
    let report = r4_ablation(&AblationConfig::default()).map_err(|e| e.to_string())?;
    let full = Precision { weight_bits: None, act_bits: None };
    for mode in [R4Mode::Global, R4Mode::Local] {
        let cell = report.cell(full, mode).ok_or("missing W16A16 cell")?;
        let worst = cell.output_mse.iter().cloned().fold(0.0, f64::max);
        ensure(worst < 1e-10, || format!("W16A16 {mode:?} output mse {worst:e}"))?;
    }
    let w2a4 = Precision { weight_bits: Some(2), act_bits: Some(4) };
    let c = report.comparison(w2a4).ok_or("missing W2A4 comparison")?;
    ensure(c.median_global.is_finite() && c.median_local.is_finite() && c.ci.0.is_finite(), || {
        "non-finite W2A4 summary".into()
    })?;
    let w2 = Precision { weight_bits: Some(2), act_bits: None };
    let c2 = report.comparison(w2).ok_or("missing W2 comparison")?;
    Ok(format!(
        "W16A16 = 0; W2A4 median global {:.4e} local {:.4e} CI [{:.3e}, {:.3e}] {}; W2 {}",
        c.median_global,
        c.median_local,
        c.ci.0,
        c.ci.1,
        if c.significant { "significant" } else { "not significant" },
        if c2.significant { "significant" } else { "not significant" },
    ))
}

fn c11_io(dir: &Path) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let path = dir.join("t.gsrt");
    for i in 0..1000 {
        let ndim = rng.random_range(1..4);
        let dims: Vec<usize> = (0..ndim).map(|_| rng.random_range(1..6)).collect();
        let len: usize = dims.iter().product();
        let data = match i % 3 {
            0 => TensorData::F64((0..len).map(|_| f64::from_bits(rng.random())).collect()),
            1 => TensorData::F32((0..len).map(|_| f32::from_bits(rng.random())).collect()),
            _ => TensorData::I8((0..len).map(|_| rng.random()).collect()),
        };
        let t = Tensor::new(dims, data).unwrap();
        let meta = serde_meta(i);
        io::write_tensor(&path, &t, &meta).map_err(|e| e.to_string())?;
        let (back, back_meta) = io::read_tensor(&path).map_err(|e| e.to_string())?;
        let same = encode(&back, &back_meta).unwrap() == encode(&t, &meta).unwrap();
        ensure(same, || format!("round trip {i} differs"))?;
    }
    let t = Tensor::from_matrix(&DMatrix::from_fn(3, 3, |r, c| (r * 3 + c) as f64));
    let bytes = encode(&t, &serde_meta(0)).unwrap();
    for cut in 0..bytes.len() {
        let err = decode(&bytes[..cut]).err();
        ensure(matches!(err, Some(IoError::TruncatedPayload | IoError::BadMagic)), || {
            format!("cut at {cut}: {err:?}")
        })?;
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    ensure(matches!(decode(&bad), Err(IoError::BadMagic)), || "bad magic accepted".into())?;
    let mut ver = bytes.clone();
    ver[4] = 9;
    ensure(matches!(decode(&ver), Err(IoError::VersionUnsupported(9))), || {
        "bad version accepted".into()
    })?;
    Ok("1000 round trips bit-exact; every truncation, bad magic and version rejected".into())
}

fn serde_meta(i: usize) -> serde_json::Value {
    serde_json::json!({"case": i, "future_key": {"nested": [1, 2, 3]}})
}

fn c12_cli(run: &Result<CompareRun, String>, dir: &Path) -> Outcome {
    let run = run.as_ref().map_err(|e| format!("compare failed: {e}"))?;
    let table = parse_csv(&run.csv)?;
    let rows: usize = table.values().map(Vec::len).sum();
    ensure(rows == 4 * 100 * 3, || format!("{rows} data rows"))?;
    let header = std::str::from_utf8(&run.csv).unwrap().lines().next().unwrap_or("");
    ensure(header == "variant,tensor_id,metric,value", || format!("header `{header}`"))?;

    // rerun from the echoed config line alone, into a new file
    let echo = run
        .stdout
        .lines()
        .find_map(|l| l.strip_prefix("config: seqrot "))
        .ok_or("no config echo")?;
    let mut args: Vec<String> = echo.split_whitespace().map(String::from).collect();
    let i = args.iter().position(|a| a == "--out").ok_or("echo lacks --out")?;
    args[i + 1] = dir.join("rerun.csv").display().to_string();
    let rerun = run_compare(&args)?;
    ensure(rerun.csv == run.csv, || "rerun CSV differs".into())?;
    Ok(format!("{rows} rows + header; echoed config reproduces the CSV byte for byte"))
}

fn guarded(f: &mut dyn FnMut() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    })
}

fn report(id: u32, name: &str, outcome: &Outcome, took: Duration) -> bool {
    match outcome {
        Ok(detail) => println!("criterion {id:>2} {name}: PASS ({detail}) [{took:.1?}]"),
        Err(why) => println!("criterion {id:>2} {name}: FAIL ({why}) [{took:.1?}]"),
    }
    outcome.is_ok()
}

fn main() {
    let dir = tempfile::tempdir().expect("temp dir");
    let mut passed = 0;
    let mut total = 0;
    let mut check = |id: u32, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let outcome = guarded(f);
        total += 1;
        if report(id, name, &outcome, start.elapsed()) {
            passed += 1;
        }
    };

    check(1, "sequency fidelity", &mut c1_sequency);
    check(2, "walsh correctness", &mut c2_walsh);
    check(3, "orthogonality", &mut c3_orthogonality);
    check(4, "block structure", &mut c4_structure);
    check(5, "locality", &mut c5_locality);
    check(6, "computational invariance", &mut c6_invariance);
    check(7, "gptq dominance", &mut c7_gptq);

    let compare = default_compare(dir.path());
    let mut notes = Vec::new();
    check(8, "directional ordering", &mut || {
        let (outcome, n) = c8_directional(&compare);
        notes = n;
        outcome
    });
    for note in &notes {
        println!("             {note}");
    }
    check(9, "sequency variance", &mut c9_variance);
    check(10, "r4 ablation harness", &mut c10_ablation);
    check(11, "tensor io", &mut || c11_io(dir.path()));
    check(12, "cli compare", &mut || c12_cli(&compare, dir.path()));

    println!("{passed} of {total} criteria passed");
    if passed < total {
        std::process::exit(1);
    }
}
