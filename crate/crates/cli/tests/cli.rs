use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use drwkv::model::{load_weights, DrwkvWeights, ModelConfig};
use drwkv::Tensor;
use drwkv_cli::{decode_ppm, encode_ppm, parse_size, read_image, synth_pair, synthetic_pairs, write_image, ImageError, SyntheticPairSpec};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn drwkv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drwkv"))
        .args(args)
        .output()
        .expect("spawn drwkv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

fn scene(h: usize, w: usize, seed: u64) -> Tensor<f32> {
    drwkv_cli::clean_scene(h, w, &mut ChaCha8Rng::seed_from_u64(seed))
}

// ---- image I/O ----

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ppm_round_trip_within_one_level(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
        let img = Tensor::<f32>::uniform(&[3, h, w], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let back = decode_ppm(&encode_ppm(&img).unwrap(), "mem").unwrap();
        prop_assert_eq!(back.shape(), img.shape());
        for (a, b) in img.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6, "{} vs {}", a, b);
        }
        // Quantized values are a fixed point.
        prop_assert_eq!(encode_ppm(&back).unwrap(), encode_ppm(&img).unwrap());
    }
}

#[test]
fn two_by_two_p6_decodes_to_known_values() {
    let mut bytes = b"P6\n# a comment\n2 2\n255\n".to_vec();
    // Row-major pixels: red, green / blue, white.
    bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0, 0, 0, 255, 255, 255, 255]);
    let img = decode_ppm(&bytes, "mem").unwrap();
    assert_eq!(img.shape(), [3, 2, 2]);
    assert_eq!(img.data(), &[1., 0., 0., 1., 0., 1., 0., 1., 0., 0., 1., 1.]);
    assert_eq!(encode_ppm(&img).unwrap()[11..], bytes[bytes.len() - 12..]);
}

#[test]
fn rounding_is_half_up() {
    let img = Tensor::new(&[3, 1, 2], vec![0.5 / 255.0, 1.49 / 255.0, -1.0, 2.0 / 255.0, 1.5, 0.999]).unwrap();
    let enc = encode_ppm(&img).unwrap();
    let px = &enc[enc.len() - 6..];
    // Interleaved: (c0,p0) (c1,p0) (c2,p0) (c0,p1) (c1,p1) (c2,p1).
    assert_eq!(px, &[1, 0, 255, 1, 2, 255]);
}

#[test]
fn malformed_files_give_distinct_errors() {
    let payload = [0u8; 12];
    let with = |header: &[u8], body: &[u8]| [header, body].concat();
    assert!(matches!(
        decode_ppm(&with(b"P3\n2 2\n255\n", &payload), "a"),
        Err(ImageError::BadMagic { found, .. }) if found == "P3"
    ));
    assert!(matches!(
        decode_ppm(&with(b"P6\n2 2\n65535\n", &payload), "b"),
        Err(ImageError::UnsupportedMaxval { maxval: 65535, .. })
    ));
    assert!(matches!(
        decode_ppm(&with(b"P6\n2 2\n255\n", &payload[..7]), "c"),
        Err(ImageError::Truncated { expected: 12, found: 7, .. })
    ));
    assert!(matches!(
        decode_ppm(b"P6\n2\n", "d"),
        Err(ImageError::MalformedHeader { .. })
    ));
    assert!(matches!(decode_ppm(b"", "e"), Err(ImageError::BadMagic { .. })));
}

#[test]
fn files_round_trip_and_missing_files_are_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    let img = scene(5, 7, 3);
    let p = dir.path().join("x.ppm");
    write_image(&img, &p).unwrap();
    let back = read_image(&p).unwrap();
    assert!(img.data().iter().zip(back.data()).all(|(a, b)| (a - b).abs() <= 1.0 / 255.0));
    assert!(matches!(read_image(dir.path().join("nope.ppm")), Err(ImageError::Io { .. })));
    assert!(matches!(write_image(&Tensor::zeros(&[1, 2, 2]), &p), Err(ImageError::Shape(_))));
}

#[cfg(not(feature = "png"))]
#[test]
fn png_without_feature_is_unsupported() {
    assert!(matches!(read_image("x.png"), Err(ImageError::Unsupported { .. })));
}

#[cfg(feature = "png")]
#[test]
fn png_round_trip_is_exact_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let img = decode_ppm(&encode_ppm(&scene(6, 9, 4)).unwrap(), "mem").unwrap();
    let p = dir.path().join("x.png");
    write_image(&img, &p).unwrap();
    assert_eq!(read_image(&p).unwrap(), img);
}

// ---- synthetic pairs ----

#[test]
fn identity_spec_leaves_the_image_unchanged() {
    let clean = scene(8, 8, 1);
    let spec = SyntheticPairSpec {
        gamma: 1.0,
        scale: 1.0,
        sigma: 0.0,
        seed: 0,
    };
    let (low, c) = synth_pair(&clean, &spec).unwrap();
    assert_eq!(low, clean);
    assert_eq!(c, clean);
}

#[test]
fn white_pixel_darkens_to_the_scale() {
    let clean = Tensor::full(&[3, 4, 4], 1.0f32);
    let spec = SyntheticPairSpec {
        gamma: 2.0,
        scale: 0.5,
        sigma: 0.0,
        seed: 0,
    };
    let (low, _) = synth_pair(&clean, &spec).unwrap();
    assert!(low.data().iter().all(|&v| v == 0.5));
    let half = Tensor::full(&[3, 1, 1], 0.5f32);
    let (low, _) = synth_pair(&half, &spec).unwrap();
    assert!(low.data().iter().all(|&v| (v - 0.125).abs() < 1e-7));
}

#[test]
fn synthetic_pairs_are_seeded_and_in_range() {
    let spec = SyntheticPairSpec::default();
    let a = synthetic_pairs(3, 16, 12, &spec).unwrap();
    let b = synthetic_pairs(3, 16, 12, &spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.shape(), [3, 3, 16, 12]);
    assert!(a.0.data().iter().chain(a.1.data()).all(|v| (0.0..=1.0).contains(v)));
    let mean = |t: &Tensor<f32>| t.data().iter().sum::<f32>() / t.numel() as f32;
    assert!(mean(&a.0) < 0.5 * mean(&a.1), "low-light image should be much darker");
    let c = synthetic_pairs(3, 16, 12, &SyntheticPairSpec { seed: 1, ..spec }).unwrap();
    assert_ne!(a.0, c.0);
}

#[test]
fn invalid_synthetic_specs_are_rejected() {
    let clean = scene(4, 4, 0);
    for spec in [
        SyntheticPairSpec { gamma: 0.5, ..Default::default() },
        SyntheticPairSpec { scale: 0.0, ..Default::default() },
        SyntheticPairSpec { scale: 1.5, ..Default::default() },
        SyntheticPairSpec { sigma: -0.1, ..Default::default() },
    ] {
        assert!(synth_pair(&clean, &spec).is_err(), "{spec:?}");
    }
    assert!(synthetic_pairs(0, 8, 8, &SyntheticPairSpec::default()).is_err());
}

#[test]
fn sizes_parse() {
    assert_eq!(parse_size("32x48"), Ok((32, 48)));
    assert_eq!(parse_size("7X5"), Ok((7, 5)));
    for bad in ["32", "0x4", "4x", "ax4", "-1x3", ""] {
        assert!(parse_size(bad).is_err(), "{bad}");
    }
}

// ---- end to end ----

#[test]
fn enhance_is_deterministic_and_reports_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let (input, reference) = (dir.path().join("in.ppm"), dir.path().join("ref.ppm"));
    let (low, clean) = synthetic_pairs(1, 20, 28, &SyntheticPairSpec::default()).unwrap();
    write_image(&low.index0(0).unwrap(), &input).unwrap();
    write_image(&clean.index0(0).unwrap(), &reference).unwrap();
    let mut outputs = Vec::new();
    for run in 0..2 {
        let out = dir.path().join(format!("out{run}.ppm"));
        let o = drwkv(&["enhance", "--input", path(&input), "--output", path(&out), "--reference", path(&reference)]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(stdout(&o).contains(" dB ssim "), "{}", stdout(&o));
        outputs.push(fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    // Non-multiple extents are padded internally and cropped back.
    let img = decode_ppm(&outputs[0], "out").unwrap();
    assert_eq!(img.shape(), [3, 20, 28]);
}

#[test]
fn decompose_writes_five_maps() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ppm");
    write_image(&scene(16, 16, 2), &input).unwrap();
    let maps = dir.path().join("maps");
    let o = drwkv(&["decompose", "--input", path(&input), "--output", path(&maps)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for name in drwkv_cli::commands::DECOMPOSE_FILES {
        let img = read_image(maps.join(name)).unwrap();
        assert_eq!(img.shape(), [3, 16, 16], "{name}");
    }
}

#[test]
fn scan_writes_sixteen_files() {
    let dir = tempfile::tempdir().unwrap();
    let o = drwkv(&["scan", "--size", "5x7", "--output", path(dir.path())]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut names: Vec<String> = fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.len(), 16);
    assert!(names.contains(&"tl-cw.csv".to_string()) && names.contains(&"br-ccw.pgm".to_string()));
    let csv = fs::read_to_string(dir.path().join("tl-cw.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,row,col"));
    assert_eq!(lines.next(), Some("0,0,0"));
    assert_eq!(lines.next(), Some("1,0,1"));
    assert_eq!(csv.lines().count(), 1 + 35);
    let pgm = fs::read(dir.path().join("tl-cw.pgm")).unwrap();
    assert!(pgm.starts_with(b"P5\n7 5\n255\n"));
    assert_eq!(pgm.len(), b"P5\n7 5\n255\n".len() + 35);
}

#[test]
fn metrics_over_directories_as_csv() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("pairs");
    let o = drwkv(&["synth", "--output", path(&data), "--synthetic", "3", "--size", "16x16"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = drwkv(&["metrics", "--input", path(&data.join("high")), "--reference", path(&data.join("high")), "--csv"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "path,psnr,ssim");
    assert_eq!(lines.len(), 4);
    for l in &lines[1..] {
        // Identical images: capped PSNR and unit SSIM.
        assert!(l.ends_with(",1.0000"), "{l}");
    }
    let o = drwkv(&["metrics", "--input", path(&data.join("low")), "--reference", path(&data.join("high"))]);
    assert!(o.status.success(), "{}", stderr(&o));
    let first = stdout(&o);
    let psnr: f64 = first.lines().next().unwrap().split_whitespace().nth(1).unwrap().parse().unwrap();
    assert!(psnr > 0.0 && psnr < 40.0, "{first}");
}

#[test]
fn zero_step_training_saves_the_initial_weights() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("w.bin");
    let o = drwkv(&["train", "--synthetic", "2", "--steps", "0", "--size", "16x16", "--seed", "9", "--output", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let saved = load_weights(&out).unwrap();
    let init = DrwkvWeights::init(ModelConfig { seed: 9, ..ModelConfig::default() }).unwrap();
    assert_eq!(saved.config, init.config);
    assert_eq!(saved.params, init.params);
}

#[test]
fn short_training_run_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("model.toml");
    fs::write(&cfg, "base_channels = 8\nn1 = 2\nn2 = 1\nn_heads = 2\n").unwrap();
    let out = dir.path().join("w.bin");
    let o = drwkv(&["train", "--config", path(&cfg), "--synthetic", "2", "--steps", "3", "--size", "16x16", "--output", path(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().filter(|l| l.starts_with("step ")).count(), 3, "{text}");
    assert!(text.contains("final/step-0 ratio"));
    assert_eq!(load_weights(&out).unwrap().config.base_channels, 8);
}

#[test]
fn exit_codes_distinguish_usage_and_data_errors() {
    assert_eq!(drwkv(&[]).status.code(), Some(1));
    assert_eq!(drwkv(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(drwkv(&["scan", "--size", "3by3", "--output", "x"]).status.code(), Some(1));
    assert_eq!(drwkv(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let o = drwkv(&["enhance", "--input", path(&dir.path().join("missing.ppm")), "--output", path(&dir.path().join("o.ppm"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let bad = dir.path().join("bad.ppm");
    fs::write(&bad, b"P3\n1 1\n255\n0 0 0\n").unwrap();
    let o = drwkv(&["metrics", "--input", path(&bad), "--reference", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not a binary PPM"), "{}", stderr(&o));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "base_channels = 6\n").unwrap();
    assert_eq!(drwkv(&["cost", "--config", path(&cfg)]).status.code(), Some(1));
}

#[test]
fn cost_reports_conventions() {
    let o = drwkv(&["cost", "--size", "64x64"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("64x64: "), "{text}");
    assert!(text.contains("conventions: FLOPs = 2 x MACs"));
}

#[test]
fn selftest_passes_and_a_corrupted_stencil_is_named() {
    let o = drwkv(&["selftest"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("8/8 suites passed"));
    let o = drwkv(&["selftest", "--inject-fault", "scharr"]);
    assert_eq!(o.status.code(), Some(3));
    let text = stdout(&o);
    assert!(text.contains("FAIL scharr-stencil"), "{text}");
    assert!(text.contains("7/8 suites passed"), "{text}");
    assert!(stderr(&o).contains("scharr-stencil"));
}
