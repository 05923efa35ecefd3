//! Acceptance criteria. Each test writes one `PASS`/`FAIL` line straight to
//! stderr so the verdicts show up even when output capture is on.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;

use pfmg::ablate::{ablate, HoldOut, Variant};
use pfmg::attention::{agva_channel, agva_spatial, mgaa};
use pfmg::checkpoint;
use pfmg::cmra::{cmra_attend, interaction, relation_aware};
use pfmg::eval::evaluate;
use pfmg::features::synth::{generate, SynthConfig};
use pfmg::features::{format, load_bundle, Dataset, FeatureBundle, FeatureDims};
use pfmg::gradcheck::{run_all, GradCheckConfig, SUITES};
use pfmg::head::{classify, decode, EVENT_THRESHOLD};
use pfmg::model::{predict, HiddenDims, ModelConfig, ModelParams};
use pfmg::params::{group_rng, identity_kernel};
use pfmg::pfme::{channel_align, motion_feature, past_future_motion, MotionSource, PastMotionForm};
use pfmg::tensor::{Tape, Tensor};
use pfmg::train::{train, TrainConfig};
use pfmg::Error;

fn verdict(criterion: &str, failures: &[String], detail: &str) {
    let status = if failures.is_empty() { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "[{status}] {criterion}: {detail}");
    for f in failures {
        let _ = writeln!(err, "       {f}");
    }
    assert!(failures.is_empty(), "{criterion} failed: {failures:?}");
}

#[test]
fn gradient_suite() {
    let started = Instant::now();
    let config = GradCheckConfig::default();
    let suites = run_all(&config).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    let names: Vec<&str> = suites.iter().map(|s| s.suite.as_str()).collect();
    if names != SUITES {
        failures.push(format!("ran suites {names:?}"));
    }
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for s in &suites {
        for c in &s.cases {
            cases += 1;
            worst = worst.max(c.max_rel_error);
            if c.points != 10 {
                failures.push(format!("{}/{} ran {} points", s.suite, c.name, c.points));
            }
            if !(c.max_rel_error < 1e-4) {
                failures.push(format!("{}/{} rel error {:.3e} at {}", s.suite, c.name, c.max_rel_error, c.worst));
            }
        }
    }
    if secs >= 120.0 {
        failures.push(format!("took {secs:.1}s"));
    }
    verdict(
        "gradient suite",
        &failures,
        &format!("{cases} cases at 10 points, max rel error {worst:.2e}, {secs:.1}s"),
    );
}

struct Draw {
    dims: FeatureDims,
    config: ModelConfig,
    params: ModelParams<Tensor<f64>>,
    audio: Tensor<f64>,
    visual: Tensor<f64>,
}

fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn draw(seed: u64) -> Draw {
    let mut rng = group_rng(seed, 7_000);
    let dims = FeatureDims {
        t: rng.random_range(2..=6),
        d_a: rng.random_range(2..=5),
        d_v: rng.random_range(2..=5),
        h: rng.random_range(1..=3),
        w: rng.random_range(1..=3),
        classes: rng.random_range(2..=4),
    };
    let mut config = ModelConfig::new(dims);
    config.hidden = HiddenDims {
        d_h: rng.random_range(2..=5),
        d_m: rng.random_range(2..=5),
    };
    let params = ModelParams::init(&config, seed).unwrap().cast::<f64>();
    let audio = uniform(&mut rng, &dims.audio_shape());
    let visual = uniform(&mut rng, &dims.visual_shape());
    Draw {
        dims,
        config,
        params,
        audio,
        visual,
    }
}

fn row_sums(t: &Tensor<f64>) -> Vec<f64> {
    let cols = *t.shape().last().unwrap();
    t.data().chunks(cols).map(|r| r.iter().sum()).collect()
}

fn col_sums(t: &Tensor<f64>) -> Vec<f64> {
    let (rows, cols) = (t.shape()[0], t.shape()[1]);
    (0..cols).map(|c| (0..rows).map(|r| t.data()[r * cols + c]).sum()).collect()
}

/// Runs every closed-form check on one draw, returning what failed.
fn closed_form(seed: u64) -> Vec<String> {
    let d = draw(seed);
    let (t, d_a, d_v, d_m) = (d.dims.t, d.dims.d_a, d.dims.d_v, d.config.hidden.d_m);
    let mut bad = Vec::new();
    let mut tape = Tape::<f64>::new();
    let p = d.params.bind(&mut tape);
    let audio = tape.leaf(d.audio.clone());
    let visual = tape.leaf(d.visual.clone());

    // Boundary zeros, bit-exact, for both past-motion forms.
    let aligned = channel_align(&mut tape, visual, &p.pfme).unwrap();
    let row = d.dims.h * d.dims.w * d_a;
    for form in [PastMotionForm::ConvolveCurrent, PastMotionForm::ConvolveNeighbor] {
        let (mp, mf) = past_future_motion(&mut tape, aligned, &p.pfme, form).unwrap();
        if !tape.value(mp).data()[..row].iter().all(|x| x.to_bits() == 0) {
            bad.push(format!("{form:?}: M_p first row not +0"));
        }
        let n = tape.value(mf).numel();
        if !tape.value(mf).data()[n - row..].iter().all(|x| x.to_bits() == 0) {
            bad.push(format!("{form:?}: M_f last row not +0"));
        }
    }

    // Static scene with identity motion convolutions.
    let frame = uniform(&mut group_rng(seed, 7_001), &[d.dims.h, d.dims.w, d_v]);
    let still: Vec<f64> = (0..t).flat_map(|_| frame.data().to_vec()).collect();
    let still = tape.leaf(Tensor::new(&d.dims.visual_shape(), still).unwrap());
    let mut identity = p.pfme;
    identity.conv_p = tape.leaf(identity_kernel(3, d_a));
    identity.conv_f = tape.leaf(identity_kernel(3, d_a));
    let m = motion_feature(
        &mut tape,
        still,
        &identity,
        PastMotionForm::ConvolveCurrent,
        MotionSource::PastAndFuture,
    )
    .unwrap();
    let peak = tape.value(m).data().iter().fold(0.0f64, |a, x| a.max(x.abs()));
    if !(peak < 1e-6) {
        bad.push(format!("static scene motion {peak:.3e}"));
    }

    // MGAA with zero motion.
    let zero = tape.leaf(Tensor::zeros(&[t, d_a]));
    let out = mgaa(&mut tape, audio, zero, &p.mgaa, true).unwrap();
    let factor = 1.5 * (1.0 + 1.0 / t as f64);
    let expected = d.audio.map(|x| factor * x);
    let err = tape.value(out.output).max_abs_diff(&expected);
    if !(err < 1e-6) {
        bad.push(format!("zero-motion MGAA off by {err:.3e}"));
    }

    // Normalized attention rows.
    let motion = tape.leaf(uniform(&mut group_rng(seed, 7_002), &[t, d_a]));
    let traced = mgaa(&mut tape, audio, motion, &p.mgaa, true).unwrap();
    let mut sums = col_sums(tape.value(traced.temporal_weights.unwrap()));

    // AGVA shapes.
    let vc = agva_channel(&mut tape, audio, visual, &p.agva).unwrap();
    let vcs = agva_spatial(&mut tape, audio, vc, &p.agva).unwrap();
    if tape.shape(vcs) != [t, d_v] {
        bad.push(format!("AGVA output {:?}, want [{t}, {d_v}]", tape.shape(vcs)));
    }

    let scale = d.config.scale_mode;
    let a = tape.matmul(audio, p.proj.p_a).unwrap();
    let v = tape.matmul(vcs, p.proj.p_v).unwrap();
    let attended = cmra_attend(&mut tape, v, a, &p.cmra_v, scale).unwrap();
    if tape.shape(attended.weights) != [t, 2 * t] {
        bad.push(format!("CMRA weights {:?}", tape.shape(attended.weights)));
    }
    sums.extend(row_sums(tape.value(attended.weights)));

    let (a_r, v_r) = relation_aware(&mut tape, audio, vcs, &p.proj, &p.cmra_v, &p.cmra_a, scale).unwrap();
    let o_f = interaction(&mut tape, a_r, v_r, &p.proj, &p.cmra_i, scale).unwrap();
    if tape.shape(o_f) != [t, 2 * d_m] {
        bad.push(format!("O_f {:?}, want [{t}, {}]", tape.shape(o_f), 2 * d_m));
    }
    let scores = classify(&mut tape, o_f, &p.head).unwrap();
    sums.extend(row_sums(tape.value(scores.class_probs)));
    for s in sums {
        if !((s - 1.0).abs() < 1e-6) {
            bad.push(format!("attention row sums to {s}"));
        }
    }

    // Decoding: background exactly when S_e ≤ 0.5, otherwise the first argmax.
    let mut rng = group_rng(seed, 7_003);
    let s_e: Vec<f64> = (0..t)
        .map(|i| match i % 3 {
            0 => EVENT_THRESHOLD,
            1 => f64::from_bits(EVENT_THRESHOLD.to_bits() + 1),
            _ => rng.random_range(0.0..1.0),
        })
        .collect();
    let s_c: Vec<f64> = (0..d.dims.classes).map(|_| rng.random_range(0.0..1.0)).collect();
    let best = (0..s_c.len()).fold(0, |b, i| if s_c[i] > s_c[b] { i } else { b });
    let want: Vec<usize> = s_e.iter().map(|&s| if s > 0.5 { best } else { s_c.len() }).collect();
    if decode(&s_e, &s_c) != want {
        bad.push("decode disagrees with threshold semantics".into());
    }
    let bundle = FeatureBundle {
        video_id: "draw".into(),
        audio: d.audio.cast(),
        visual: d.visual.cast(),
    };
    let prediction = predict(&bundle, &d.params, &d.config).unwrap();
    let class = prediction.video_class();
    for (i, (&s, &label)) in prediction.s_e.iter().zip(&prediction.decoded).enumerate() {
        let background = label == d.dims.classes;
        if background != (s <= 0.5) || (!background && label != class) {
            bad.push(format!("segment {i}: S_e {s} decoded as {label}"));
        }
    }

    bad.into_iter().map(|b| format!("draw {seed}: {b}")).collect()
}

#[test]
fn closed_form_invariants() {
    let failures: Vec<String> = (0..20).flat_map(closed_form).collect();
    verdict(
        "closed-form invariants",
        &failures,
        "boundary zeros, static scene, zero-motion MGAA, row normalization, AGVA and O_f shapes, decoding; 20 draws",
    );
}

#[test]
fn learnability() {
    let data = generate(&SynthConfig::default()).unwrap().dataset;
    let mut config = TrainConfig::new(ModelConfig::new(data.dims()));
    config.target_accuracy = Some(0.95);
    let started = Instant::now();
    let out = train(&config, &data, None).unwrap();
    let secs = started.elapsed().as_secs_f64();

    let mut failures = Vec::new();
    if out.report.accuracy < 0.95 {
        failures.push(format!("training accuracy {:.4}", out.report.accuracy));
    }
    if out.report.epochs_run > 200 {
        failures.push(format!("{} epochs", out.report.epochs_run));
    }
    if secs >= 300.0 {
        failures.push(format!("took {secs:.1}s"));
    }
    verdict(
        "learnability",
        &failures,
        &format!(
            "training accuracy {:.4} after {} epochs in {secs:.1}s",
            out.report.accuracy, out.report.epochs_run
        ),
    );
}

#[test]
fn directional_ablation() {
    let data = generate(&SynthConfig {
        snr: 2.0,
        ..SynthConfig::default()
    })
    .unwrap()
    .dataset;
    let mut base = TrainConfig::new(ModelConfig::new(data.dims()));
    base.epochs = 60;
    let table = ablate(&base, &data, &[1, 2, 3, 4, 5], HoldOut::default()).unwrap();

    let mut failures = Vec::new();
    let variants: Vec<Variant> = table.rows.iter().map(|r| r.variant).collect();
    if variants != Variant::ALL || table.runs.len() != 20 {
        failures.push(format!("table has {variants:?} and {} runs", table.runs.len()));
    }
    let mean = |v| table.row(v).map(|r| r.mean).unwrap_or(f64::NAN);
    let (pfme, none) = (mean(Variant::PfmeTemporalAttention), mean(Variant::NoMotion));
    if !(pfme >= none - 0.005) {
        failures.push(format!("pfme-ta {pfme:.4} below no-motion {none:.4} − 0.005"));
    }
    let rows: Vec<String> = table
        .rows
        .iter()
        .map(|r| format!("{} {:.4}±{:.4}", r.variant, r.mean, r.sd))
        .collect();
    verdict("directional ablation", &failures, &rows.join(", "));
}

#[test]
fn determinism() {
    let data = generate(&SynthConfig::default()).unwrap().dataset;
    let mut config = TrainConfig::new(ModelConfig::new(data.dims()));
    config.epochs = 5;
    let a = train(&config, &data, None).unwrap();
    let b = train(&config, &data, None).unwrap();

    let mut failures = Vec::new();
    let bits = |c: &[f64]| c.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    if bits(&a.report.loss_curve) != bits(&b.report.loss_curve) {
        failures.push("loss curves differ".into());
    }
    if a.report.accuracy.to_bits() != b.report.accuracy.to_bits() {
        failures.push("accuracies differ".into());
    }

    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &a.params, &config.model, Some(config.epochs)).unwrap();
    let (params, model) = checkpoint::load(dir.path()).unwrap();
    let before = evaluate(&a.params, &config.model, &data).unwrap();
    let after = evaluate(&params, &model, &data).unwrap();
    if before != after {
        failures.push("evaluation changed across a checkpoint round trip".into());
    }
    verdict(
        "determinism",
        &failures,
        &format!("2 runs of {} epochs, accuracy {:.4}", config.epochs, a.report.accuracy),
    );
}

fn bits(t: &Tensor<f32>) -> Vec<u32> {
    t.data().iter().map(|x| x.to_bits()).collect()
}

/// Loads the file after `damage` and reports anything but a typed error.
fn expect_typed(
    failures: &mut Vec<String>,
    what: &str,
    load: impl Fn() -> pfmg::Result<()>,
    ok: impl Fn(&Error) -> bool,
) {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(load)) {
        Err(_) => failures.push(format!("{what}: panicked")),
        Ok(Ok(())) => failures.push(format!("{what}: loaded without error")),
        Ok(Err(e)) if !ok(&e) => failures.push(format!("{what}: unexpected {e}")),
        Ok(Err(_)) => {}
    }
}

fn copy_dir(from: &Path, to: &Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let entry = entry.unwrap();
        std::fs::copy(entry.path(), to.join(entry.file_name())).unwrap();
    }
}

#[test]
fn format_conformance() {
    let mut failures = Vec::new();
    let mut checks = 0;

    // Feature files.
    let dir = tempfile::tempdir().unwrap();
    let s = generate(&SynthConfig {
        videos: 6,
        ..SynthConfig::default()
    })
    .unwrap();
    let manifest_path = s.write(dir.path()).unwrap();
    let loaded = Dataset::load(&manifest_path).unwrap();
    for (x, y) in loaded.bundles.iter().zip(&s.dataset.bundles) {
        checks += 1;
        if bits(&x.audio) != bits(&y.audio) || bits(&x.visual) != bits(&y.visual) || x.visual.shape() != y.visual.shape() {
            failures.push(format!("{} changed on round trip", x.video_id));
        }
    }

    let manifest = &s.dataset.manifest;
    let entry = &manifest.entries[0];
    let path = dir.path().join(&entry.path);
    let original = std::fs::read(&path).unwrap();
    let load = || load_bundle(&path, &entry.video_id, manifest).map(|_| ());
    let is_format = |e: &Error| matches!(e, Error::Format { .. });
    for cut in [0, 3, 4, 11, original.len() / 3, original.len() - 1] {
        std::fs::write(&path, &original[..cut]).unwrap();
        checks += 1;
        expect_typed(&mut failures, &format!("feature file cut at {cut}"), load, is_format);
    }
    let mut bad_magic = original.clone();
    bad_magic[..4].copy_from_slice(b"JUNK");
    std::fs::write(&path, &bad_magic).unwrap();
    checks += 1;
    expect_typed(&mut failures, "feature file with bad magic", load, is_format);

    let mut trailing = original.clone();
    trailing.extend_from_slice(&[0; 5]);
    std::fs::write(&path, &trailing).unwrap();
    checks += 1;
    expect_typed(&mut failures, "feature file with trailing bytes", load, is_format);

    // Random single-byte corruption must never panic.
    let mut rng = group_rng(0, 7_100);
    for _ in 0..200 {
        let mut bytes = original.clone();
        let i = rng.random_range(0..bytes.len());
        bytes[i] ^= 1 << rng.random_range(0..8);
        std::fs::write(&path, &bytes).unwrap();
        checks += 1;
        if std::panic::catch_unwind(|| load_bundle(&path, &entry.video_id, manifest)).is_err() {
            failures.push(format!("flipping byte {i} panicked"));
        }
    }
    std::fs::write(&path, &original).unwrap();

    let mut wrong = manifest.clone();
    wrong.dims.d_a += 1;
    checks += 1;
    expect_typed(
        &mut failures,
        "manifest dims disagreeing with payload",
        || load_bundle(&path, &entry.video_id, &wrong).map(|_| ()),
        |e| matches!(e, Error::Consistency(_)),
    );
    std::fs::write(&manifest_path, "{ not json").unwrap();
    checks += 1;
    expect_typed(
        &mut failures,
        "malformed manifest",
        || Dataset::load(&manifest_path).map(|_| ()),
        |e| matches!(e, Error::Json { .. }),
    );

    // Checkpoints.
    let config = ModelConfig::new(FeatureDims::default());
    let params = ModelParams::init(&config, 9).unwrap();
    let ckpt = tempfile::tempdir().unwrap();
    checkpoint::save(ckpt.path(), &params, &config, None).unwrap();
    let (back, back_config) = checkpoint::load(ckpt.path()).unwrap();
    checks += 1;
    let all_bits = |p: &ModelParams| p.to_vec().into_iter().flat_map(bits).collect::<Vec<_>>();
    if back_config != config || all_bits(&back) != all_bits(&params) || back.names() != params.names() {
        failures.push("checkpoint changed on round trip".into());
    }

    let scratch = tempfile::tempdir().unwrap();
    let damaged = scratch.path().join("ckpt");
    let tensor = damaged.join("head.w_c.avf");
    copy_dir(ckpt.path(), &damaged);
    let bytes = std::fs::read(&tensor).unwrap();
    std::fs::write(&tensor, &bytes[..bytes.len() - 3]).unwrap();
    checks += 1;
    expect_typed(
        &mut failures,
        "truncated checkpoint tensor",
        || checkpoint::load(&damaged).map(|_| ()),
        is_format,
    );
    std::fs::write(&tensor, format::encode(&[&Tensor::zeros(&[2, 2])])).unwrap();
    checks += 1;
    expect_typed(
        &mut failures,
        "checkpoint tensor of the wrong shape",
        || checkpoint::load(&damaged).map(|_| ()),
        |e| matches!(e, Error::Consistency(_)),
    );
    std::fs::write(damaged.join(checkpoint::INDEX_FILE), "[").unwrap();
    checks += 1;
    expect_typed(
        &mut failures,
        "malformed checkpoint index",
        || checkpoint::load(&damaged).map(|_| ()),
        |e| matches!(e, Error::Json { .. }),
    );
    std::fs::remove_file(damaged.join(checkpoint::INDEX_FILE)).unwrap();
    checks += 1;
    expect_typed(
        &mut failures,
        "missing checkpoint index",
        || checkpoint::load(&damaged).map(|_| ()),
        |e| matches!(e, Error::Io { .. }),
    );

    verdict(
        "format conformance",
        &failures,
        &format!("{checks} round-trip and corruption checks"),
    );
}
