//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use masktrack::crf::{crf_refine, CrfParams, MeanField};
use masktrack::eval::{iou, score_masks, EmptyConvention};
use masktrack::flow::{fuse_scores, read_flo, write_flo, FlowField};
use masktrack::manifest::load_manifest;
use masktrack::pipeline::{annotations_from_gt, density_experiment, evaluate, load_sequences, RunConfig};
use masktrack::propagation::{copy_baseline, propagate, propagate_with, FusedPredictor, PropagationConfig};
use masktrack::refiner::Refiner;
use masktrack::synth::{apply_tps, rng_from_seed, synthesize_input_mask, DeformationParams, TpsSample};
use masktrack::synthetic::default_scenes;
use masktrack::tps::ThinPlateSpline;
use masktrack::{threshold, Annotation, BinaryMask, EvalProtocol, Image, ScoreMap};
use rand::Rng;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_masktrack"));
    c.env_remove("MASKTRACK_ENDPOINT").env_remove("MASKTRACK_OUT");
    c
}

fn cli(args: &[&str], paths: &[(&str, &Path)]) -> Result<String, String> {
    let mut c = bin();
    c.args(args);
    for (flag, p) in paths {
        c.arg(flag).arg(p);
    }
    let out = c.output().map_err(|e| format!("cannot start the binary: {e}"))?;
    if !out.status.success() {
        return Err(format!("{args:?} failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

struct Dataset {
    _dir: tempfile::TempDir,
    root: PathBuf,
    manifest: PathBuf,
}

fn dataset() -> Result<Dataset, String> {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = dir.path().to_path_buf();
    let stdout = cli(&["gen-synthetic"], &[("--out", &root.join("data"))])?;
    Ok(Dataset {
        manifest: PathBuf::from(stdout.trim()),
        root,
        _dir: dir,
    })
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn oracle_exactness(data: &Dataset) -> Check {
    let manifest = load_manifest(&data.manifest).map_err(|e| e.to_string())?;
    let seqs = load_sequences(&manifest, 1).map_err(|e| e.to_string())?;
    ensure!(seqs.len() >= 5, "only {} sequences", seqs.len());
    ensure!(seqs.iter().all(|s| s.len() >= 20), "a sequence has fewer than 20 frames");

    let out = data.root.join("oracle");
    let start = Instant::now();
    cli(&["run", "--refiner", "oracle"], &[("--manifest", &data.manifest), ("--out", &out)])?;
    let printed = cli(&["eval"], &[("--results", &out), ("--manifest", &data.manifest)])?;
    let elapsed = start.elapsed();
    ensure!(
        printed.lines().any(|l| l.starts_with("mean ") && l.ends_with("1.000000")),
        "eval printed {printed}"
    );
    let report = evaluate(&out, &manifest, None, 1).map_err(|e| e.to_string())?;
    ensure!(report.mean == Some(1.0), "mIoU {:?}", report.mean);
    ensure!(elapsed < Duration::from_secs(10), "took {:.2} s", secs(elapsed));
    Ok(format!("mIoU 1.0 over {} sequences in {:.2} s", seqs.len(), secs(elapsed)))
}

/// Disc dilation by scanning every foreground pixel.
fn brute_dilate(m: &BinaryMask, r: u32) -> BinaryMask {
    let (w, h) = m.dims();
    let r2 = (r * r) as i64;
    BinaryMask::from_fn(w, h, |x, y| {
        (0..h).any(|fy| {
            (0..w).any(|fx| {
                m.get(fx, fy) && (fx as i64 - x as i64).pow(2) + (fy as i64 - y as i64).pow(2) <= r2
            })
        })
    })
}

fn random_mask(rng: &mut impl Rng) -> BinaryMask {
    loop {
        let (w, h) = (rng.gen_range(1..=32), rng.gen_range(1..=32));
        let p = rng.gen_range(0.01..0.5);
        let m = BinaryMask::from_fn(w, h, |_, _| rng.gen_bool(p));
        if !m.is_empty() {
            return m;
        }
    }
}

fn deformation_identity() -> Check {
    let mut rng = rng_from_seed(1);
    let disabled = DeformationParams::disabled();
    for i in 0..1000 {
        let m = random_mask(&mut rng);
        let out = synthesize_input_mask(&m, &disabled, &mut rng_from_seed(i)).map_err(|e| e.to_string())?;
        ensure!(out == m, "disabled pipeline changed mask {i}");
        let r = rng.gen_range(0..8);
        let params = DeformationParams {
            enable_dilation: true,
            dilation_radius: r,
            ..DeformationParams::disabled()
        };
        let out = synthesize_input_mask(&m, &params, &mut rng_from_seed(i)).map_err(|e| e.to_string())?;
        ensure!(out == brute_dilate(&m, r), "dilation-only mask {i} (radius {r}) differs");
    }
    // Every nonempty 4×4 mask at radii 1 to 3.
    let mut exhaustive = 0;
    for bits in 1u32..1 << 16 {
        let m = BinaryMask::from_fn(4, 4, |x, y| bits >> (4 * y + x) & 1 == 1);
        for r in 1..=3 {
            let params = DeformationParams {
                enable_dilation: true,
                dilation_radius: r,
                ..DeformationParams::disabled()
            };
            let out = synthesize_input_mask(&m, &params, &mut rng_from_seed(0)).map_err(|e| e.to_string())?;
            ensure!(out == brute_dilate(&m, r), "4x4 mask {bits:#06x} radius {r} differs");
            exhaustive += 1;
        }
    }
    Ok(format!("1000 random masks identical and dilated exactly; {exhaustive} exhaustive 4x4 cases"))
}

fn tps_correctness() -> Check {
    let mut rng = rng_from_seed(99);
    let (mut fitted, mut worst) = (0, 0.0f64);
    while fitted < 200 {
        let n = rng.gen_range(3..=8);
        let src: Vec<[f64; 2]> = (0..n).map(|_| [rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0)]).collect();
        let dst: Vec<[f64; 2]> = src
            .iter()
            .map(|p| [p[0] + rng.gen_range(-6.0..6.0), p[1] + rng.gen_range(-6.0..6.0)])
            .collect();
        let Ok(tps) = ThinPlateSpline::fit(&src, &dst) else { continue };
        fitted += 1;
        for (s, d) in src.iter().zip(&dst) {
            let q = tps.eval(*s);
            worst = worst.max((q[0] - d[0]).abs().max((q[1] - d[1]).abs()));
        }
    }
    ensure!(worst <= 1e-8, "max residual {worst:e}");

    let square = BinaryMask::from_fn(40, 40, |x, y| (10..30).contains(&x) && (10..30).contains(&y));
    let points = vec![[10.0, 10.0], [29.0, 11.0], [12.0, 29.0], [20.0, 20.0], [27.0, 25.0]];
    for (dx, dy) in [(3i32, -2i32), (-5, 4), (0, 7), (1, 1)] {
        let sample = TpsSample {
            displaced: points.iter().map(|p| [p[0] + dx as f64, p[1] + dy as f64]).collect(),
            points: points.clone(),
        };
        let warped = apply_tps(&square, &sample).map_err(|e| e.to_string())?;
        let expected = BinaryMask::from_fn(40, 40, |x, y| square.get_signed(x as i64 - dx as i64, y as i64 - dy as i64));
        ensure!(warped == expected, "translation ({dx}, {dy}) not exact");
    }
    Ok(format!("max residual {worst:.2e} over 200 fits; 4 translations of a 20x20 square exact"))
}

fn crf_instance(rng: &mut impl Rng, w: u32, h: u32, frames: usize) -> (Vec<Image>, Vec<ScoreMap>) {
    let imgs = (0..frames)
        .map(|_| Image::from_rgb_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()]).unwrap())
        .collect();
    let un = (0..frames)
        .map(|_| ScoreMap::new(w, h, (0..w * h).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect();
    (imgs, un)
}

fn crf_agreement() -> Check {
    let mut rng = rng_from_seed(2024);
    let params = CrfParams {
        temporal_window: 1,
        ..Default::default()
    };
    let mut hits = 0;
    for _ in 0..200 {
        let (imgs, un) = crf_instance(&mut rng, 2, 2, 1);
        let field = MeanField::new(&imgs, &un, &params).map_err(|e| e.to_string())?;
        // Exhaustive MAP over the 16 labelings.
        let map = (0u32..16)
            .map(|bits| (0..4).map(|i| bits >> i & 1 == 1).collect::<Vec<bool>>())
            .min_by(|a, b| field.energy(a).total_cmp(&field.energy(b)))
            .unwrap();
        let mf = crf_refine(&imgs, &un, &params).map_err(|e| e.to_string())?;
        hits += usize::from(threshold(&mf[0], 0.5).data() == map.as_slice());
    }
    let rate = hits as f64 / 200.0;

    let mut sweeps = 0;
    for _ in 0..4 {
        let (imgs, un) = crf_instance(&mut rng, 16, 16, 3);
        let mut field = MeanField::new(&imgs, &un, &CrfParams::default()).map_err(|e| e.to_string())?;
        let mut prev = field.free_energy();
        for s in 0..10 {
            field.sweep();
            sweeps += 1;
            let worst = field.marginals().iter().map(|q| (q[0] + q[1] - 1.0).abs()).fold(0.0, f64::max);
            ensure!(worst <= 1e-6, "sweep {s}: normalization off by {worst:e}");
            let fe = field.free_energy();
            ensure!(fe <= prev + 1e-9 * prev.abs().max(1.0), "sweep {s}: free energy rose {prev} -> {fe}");
            prev = fe;
        }
    }
    ensure!(
        rate >= 0.95,
        "mean-field argmax matches exhaustive MAP in {hits}/200 = {rate:.3} of trials (need >= 0.95); normalization and free-energy checks passed over {sweeps} sweeps"
    );
    Ok(format!("agreement {rate:.3}; normalization and free energy held over {sweeps} sweeps"))
}

fn evaluation_protocol() -> Check {
    let gt = BinaryMask::from_fn(4, 2, |_, y| y == 0);
    let pred = |k: u32| BinaryMask::from_fn(4, 2, move |x, y| y == 0 && x < k);
    let preds: Vec<BinaryMask> = [0, 2, 4, 2, 0].into_iter().map(pred).collect();
    let gts = vec![gt.clone(); 5];
    let davis = score_masks("f", &preds, &gts, EvalProtocol::DAVIS, EmptyConvention::One).map_err(|e| e.to_string())?;
    let first =
        score_masks("f", &preds, &gts, EvalProtocol::FIRST_ONLY, EmptyConvention::One).map_err(|e| e.to_string())?;
    // Hand scores: frames 1..3 give 0.5, 1, 0.5; frame 4 adds 0.
    ensure!(davis.mean == 2.0 / 3.0, "DAVIS mean {}", davis.mean);
    ensure!(first.mean == 0.5, "first-only mean {}", first.mean);
    ensure!(
        first.frames.len() == davis.frames.len() + 1 && first.frames[..3] == davis.frames[..],
        "presets differ by more than the last frame"
    );
    ensure!(first.frames[3].frame == 4, "extra frame is {}", first.frames[3].frame);
    let sum_first: f64 = first.frames.iter().map(|f| f.iou).sum();
    let sum_davis: f64 = davis.frames.iter().map(|f| f.iou).sum();
    ensure!(sum_first - sum_davis == first.frames[3].iou, "contribution mismatch");

    let value = iou(&pred(2), &gt).map_err(|e| e.to_string())?;
    ensure!(value == 0.5, "iou {value}");
    Ok("DAVIS 2/3, first-only 1/2, differing by frame 4 only; enumerated overlap iou 0.5".into())
}

fn density(data: &Dataset) -> Check {
    let manifest = load_manifest(&data.manifest).map_err(|e| e.to_string())?;
    let seqs = load_sequences(&manifest, 1).map_err(|e| e.to_string())?;
    let strides = [1, 2, 5, 10, 23];
    let baseline = density_experiment(&seqs, &strides, &RunConfig::default(), true).map_err(|e| e.to_string())?;
    let b1 = &baseline[0];
    ensure!(b1.stride == 1 && b1.mean_iou == 1.0, "stride-1 baseline mean {}", b1.mean_iou);
    ensure!(b1.quantiles.len() == 8, "{} quantiles", b1.quantiles.len());
    ensure!(b1.quantiles.iter().all(|&q| q == 1.0), "stride-1 quantiles {:?}", b1.quantiles);

    let run = |name: &str| -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
        let out = data.root.join(name);
        cli(
            &["density", "--seed", "3", "--strides", "1,2,5,10,23"],
            &[("--manifest", &data.manifest), ("--out", &out)],
        )?;
        let mut t = tree(&out);
        t.remove(Path::new("config.json"));
        Ok(t)
    };
    let a = run("density-a")?;
    ensure!(a == run("density-b")?, "density outputs differ between runs");
    for (name, bytes) in &a {
        let text = String::from_utf8_lossy(bytes);
        for line in text.lines().skip(1) {
            let q: Vec<f64> = line.split(',').skip(3).map(|v| v.parse().unwrap()).collect();
            ensure!(q.windows(2).all(|w| w[0] <= w[1]), "{}: quantiles not monotone in {line}", name.display());
        }
    }
    Ok(format!("stride-1 baseline mean and 8 quantiles 1.0; {} files byte-identical across runs", a.len()))
}

fn synthetic_quality(data: &Dataset) -> Check {
    let manifest = load_manifest(&data.manifest).map_err(|e| e.to_string())?;
    let out = data.root.join("colormodel");
    let start = Instant::now();
    cli(&["run", "--refiner", "colormodel"], &[("--manifest", &data.manifest), ("--out", &out)])?;
    let elapsed = start.elapsed();
    let report = evaluate(&out, &manifest, None, 1).map_err(|e| e.to_string())?;

    let seqs = load_sequences(&manifest, 1).map_err(|e| e.to_string())?;
    let speeds: BTreeMap<String, f64> = default_scenes().iter().map(|s| (s.name.to_string(), s.speed())).collect();
    let mut fast = 0;
    let mut lines = Vec::new();
    for (seq, score) in seqs.iter().zip(&report.sequences) {
        let anns = annotations_from_gt(seq, &[0], false).map_err(|e| e.to_string())?;
        let copy = copy_baseline(seq, &anns).map_err(|e| e.to_string())?;
        let gt = seq.ground_truth.as_ref().unwrap();
        let copied = score_masks(&seq.name, &copy.masks, gt, seq.protocol, EmptyConvention::One)
            .map_err(|e| e.to_string())?
            .mean;
        ensure!(score.mean >= 0.85, "{} mIoU {:.4} < 0.85", seq.name, score.mean);
        if speeds.get(&seq.name).is_some_and(|&v| v >= 5.0) {
            fast += 1;
            ensure!(score.mean > copied, "{} mIoU {:.4} does not beat copy {:.4}", seq.name, score.mean, copied);
        }
        lines.push(format!("{} {:.4}/{:.4}", seq.name, score.mean, copied));
    }
    ensure!(fast > 0, "no sequence moves 5 px/frame or faster");
    ensure!(elapsed < Duration::from_secs(60), "took {:.2} s", secs(elapsed));
    Ok(format!("{} ({fast} fast) in {:.2} s", lines.join(", "), secs(elapsed)))
}

fn flow_fusion(data: &Dataset) -> Check {
    let mut rng = rng_from_seed(5);
    for _ in 0..100 {
        let s = ScoreMap::new(9, 7, (0..63).map(|_| rng.gen::<f32>()).collect()).unwrap();
        ensure!(fuse_scores(&s, &s).map_err(|e| e.to_string())? == s, "fusing identical scores changed them");
    }
    let manifest = load_manifest(&data.manifest).map_err(|e| e.to_string())?;
    let seqs = load_sequences(&manifest, 1).map_err(|e| e.to_string())?;
    for seq in &seqs {
        let gt = seq.ground_truth.as_ref().unwrap();
        let ann = [Annotation::segment(0, gt[0].clone())];
        let config = PropagationConfig::default();
        let plain = propagate(seq, &ann, &mut Refiner::Identity, &config).map_err(|e| e.to_string())?;
        let (mut a, mut b) = (Refiner::Identity, Refiner::Identity);
        let mut fused = FusedPredictor::new(seq, &mut a, &mut b).map_err(|e| e.to_string())?;
        let got = propagate_with(seq, &ann, &mut fused, &config).map_err(|e| e.to_string())?;
        ensure!(got == plain, "{}: fused identity run differs", seq.name);
    }

    // The bundled dataset's .flo files plus a few odd shapes.
    let mut files: Vec<PathBuf> = manifest
        .sequences
        .iter()
        .flat_map(|s| s.flow.clone().unwrap_or_default())
        .collect();
    let scratch = data.root.join("flo");
    fs::create_dir_all(&scratch).map_err(|e| e.to_string())?;
    for (i, (w, h)) in [(1u32, 1u32), (3, 5), (17, 2)].into_iter().enumerate() {
        let f = FlowField::from_fn(w, h, |x, y| (x as f32 * 0.25 - 1.5, y as f32 * -3.75 + 1e-3)).unwrap();
        let p = scratch.join(format!("fixture{i}.flo"));
        write_flo(&f, &p).map_err(|e| e.to_string())?;
        files.push(p);
    }
    for p in &files {
        let before = fs::read(p).map_err(|e| format!("{}: {e}", p.display()))?;
        let field = read_flo(p).map_err(|e| e.to_string())?;
        let copy = scratch.join("copy.flo");
        write_flo(&field, &copy).map_err(|e| e.to_string())?;
        ensure!(fs::read(&copy).unwrap() == before, "{} does not round-trip", p.display());
    }
    Ok(format!(
        "fused identity runs match on {} sequences; {} .flo files round-trip byte-exact",
        seqs.len(),
        files.len()
    ))
}

fn determinism(data: &Dataset) -> Check {
    let mut checked = 0;
    let runs: [&[&str]; 3] = [
        &["run", "--seed", "11"],
        &["run", "--seed", "11", "--flow", "--refiner", "identity"],
        &["density", "--seed", "11", "--strides", "1,4,12"],
    ];
    for args in runs {
        let out = data.root.join(format!("det-{checked}"));
        cli(args, &[("--manifest", &data.manifest), ("--out", &out)])?;
        let first = tree(&out);
        fs::remove_dir_all(&out).map_err(|e| e.to_string())?;
        cli(args, &[("--manifest", &data.manifest), ("--out", &out)])?;
        ensure!(first == tree(&out), "{args:?} output tree differs between runs");
        checked += first.len();
    }
    Ok(format!("3 configurations rerun with identical trees ({checked} files compared)"))
}

fn main() -> ExitCode {
    let data = match dataset() {
        Ok(d) => d,
        Err(e) => {
            println!("FAIL  synthetic dataset: {e}");
            return ExitCode::FAILURE;
        }
    };
    let criteria: Vec<Criterion> = vec![
        ("oracle exactness", Box::new(|| oracle_exactness(&data))),
        ("deformation identity", Box::new(deformation_identity)),
        ("tps correctness", Box::new(tps_correctness)),
        ("crf oracle agreement", Box::new(crf_agreement)),
        ("evaluation protocol", Box::new(evaluation_protocol)),
        ("density experiment", Box::new(|| density(&data))),
        ("synthetic quality", Box::new(|| synthetic_quality(&data))),
        ("flow fusion", Box::new(|| flow_fusion(&data))),
        ("determinism", Box::new(|| determinism(&data))),
    ];
    let mut failed = 0;
    let stdout = std::io::stdout();
    for (name, check) in criteria {
        let line = match check() {
            Ok(detail) => format!("PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                format!("FAIL  {name}: {detail}")
            }
        };
        writeln!(stdout.lock(), "{line}").unwrap();
    }
    println!("{failed} of 9 criteria failed");
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
