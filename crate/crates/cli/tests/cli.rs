//! End-to-end exercises of the `dvco` binary: staged training, encode/decode
//! round trips, curve comparison, the ablation runner, sweeps, and the decode
//! benchmark, all on tiny synthetic inputs.

use std::path::Path;
use std::process::Command;

use dvco::dataset::{self, ClipSpec};
use dvco::video;

fn dvco_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dvco"))
}

fn run_ok(args: &[&str]) -> String {
    let out = dvco_bin().args(args).output().expect("spawn dvco");
    assert!(
        out.status.success(),
        "dvco {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn run_err(args: &[&str]) -> String {
    let out = dvco_bin().args(args).output().expect("spawn dvco");
    assert!(!out.status.success(), "dvco {args:?} unexpectedly succeeded");
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_png_clip(dir: &Path, frames: usize, size: usize) {
    let seq = dataset::heldout_clip(
        77,
        0,
        &ClipSpec { frames, height: size, width: size, intra_period: 32 },
    )
    .unwrap();
    video::write_frames(&seq, dir).unwrap();
}

#[test]
fn trains_encodes_decodes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).display().to_string();

    // Staged training, deliberately short.
    run_ok(&[
        "train", "--stage", "base", "--lambda-idx", "0", "--model-size", "tiny", "--iters", "2",
        "--output", &p("base.ckpt"), "--deterministic",
    ]);
    run_ok(&[
        "train", "--stage", "8", "--init", &p("base.ckpt"), "--iters", "2", "--output",
        &p("s8.ckpt"), "--deterministic",
    ]);
    run_ok(&[
        "train", "--stage", "9", "--init", &p("s8.ckpt"), "--iters", "1", "--output",
        &p("s9.ckpt"), "--deterministic",
    ]);

    // Encode a small PNG clip twice; fixed seed must give identical bytes.
    let src = dir.path().join("src");
    write_png_clip(&src, 3, 48);
    let src_s = src.display().to_string();
    run_ok(&[
        "encode", "--input", &src_s, "--model", &p("s9.ckpt"), "--output", &p("a.dvco"),
        "--intra-period", "32", "--seed", "7",
    ]);
    run_ok(&[
        "encode", "--input", &src_s, "--model", &p("s9.ckpt"), "--output", &p("b.dvco"),
        "--intra-period", "32", "--seed", "7",
    ]);
    let a = std::fs::read(dir.path().join("a.dvco")).unwrap();
    let b = std::fs::read(dir.path().join("b.dvco")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b, "same seed must encode byte-identically");

    // Decode and check the frame files come back at the original size.
    let rec = dir.path().join("rec");
    run_ok(&[
        "decode", "--input", &p("a.dvco"), "--model", &p("s9.ckpt"), "--output",
        &rec.display().to_string(), "--seed", "7",
    ]);
    let pngs: Vec<_> = std::fs::read_dir(&rec).unwrap().collect();
    assert_eq!(pngs.len(), 3);
    let img = image_size(&rec.join("frame_0000.png"));
    assert_eq!(img, (48, 48));

    // Decoding with the wrong model must fail and name the problem.
    let err = run_err(&[
        "decode", "--input", &p("a.dvco"), "--model", &p("base.ckpt"), "--output",
        &p("bad"), "--seed", "7",
    ]);
    assert!(err.contains("error:"), "stderr should carry the failure: {err}");

    // Curve comparison via CSV files.
    std::fs::write(
        dir.path().join("anchor.csv"),
        "bpp,psnr\n0.1,30\n0.2,33\n0.4,35\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join("test.csv"),
        "bpp,psnr\n0.05,30\n0.1,33\n0.2,35\n",
    )
    .unwrap();
    let report = run_ok(&["eval", "--anchor", &p("anchor.csv"), "--test", &p("test.csv")]);
    assert!(report.contains("metric,bd_rate_percent,bd_metric"));
    assert!(report.contains("psnr,-50."), "half-rate curve should report -50%: {report}");

    // Decode benchmark.
    let bench = run_ok(&[
        "bench-decode", "--model", &p("s9.ckpt"), "--runs", "20", "--frames", "2",
        "--deterministic",
    ]);
    assert!(bench.contains("1 denoiser calls"), "{bench}");

    // Ablation over two arms with the trained checkpoints.
    let abl = dir.path().join("abl");
    run_ok(&[
        "ablate", "--method", "A", "--method", "full", "--stage8", &p("s8.ckpt"), "--stage9",
        &p("s9.ckpt"), "--clips", "1", "--frames", "2", "--size", "64", "--output",
        &abl.display().to_string(), "--deterministic",
    ]);
    let table = std::fs::read_to_string(abl.join("ablation.csv")).unwrap();
    assert!(table.starts_with("method,bd_rate_"));
    assert!(table.contains("\nA,"), "{table}");
    assert!(abl.join("curve_A.csv").exists());
    assert!(abl.join("ablation_psnr.png").exists());

    // Timestep sweep on the stage-8 checkpoint.
    let sw = dir.path().join("sw");
    run_ok(&[
        "sweep", "--param", "timestep", "--values", "0,250", "--stage8", &p("s8.ckpt"),
        "--clips", "1", "--frames", "2", "--output", &sw.display().to_string(),
        "--deterministic",
    ]);
    let table = std::fs::read_to_string(sw.join("sweep_timestep.csv")).unwrap();
    assert!(table.starts_with("timestep,default,lora_params,bpp"));
    assert_eq!(table.lines().count(), 3);
    assert!(sw.join("sweep_timestep_lpips_proxy.png").exists());
}

#[test]
fn config_file_selects_stage_lambda_and_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let clip_root = dir.path().join("clips");
    let clip = clip_root.join("clip0");
    std::fs::create_dir_all(&clip).unwrap();
    write_png_clip(&clip, 3, 64);

    let cfg_path = dir.path().join("train.toml");
    std::fs::write(
        &cfg_path,
        format!(
            "stage = \"base\"\nlambda_idx = 2\nbase_iters = 1\ndataset_dir = {:?}\n",
            clip_root.display().to_string()
        ),
    )
    .unwrap();
    let out_ckpt = dir.path().join("cfg.ckpt").display().to_string();
    let out = run_ok(&[
        "train", "--config", &cfg_path.display().to_string(), "--output", &out_ckpt,
        "--deterministic",
    ]);
    assert!(out.contains("stage base done: 1 iters"), "{out}");

    // no stage anywhere -> configuration error, not a crash
    let err = run_err(&["train", "--output", &out_ckpt]);
    assert!(err.contains("no training stage selected"), "{err}");
}

#[test]
fn rejects_bad_arguments() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x.ckpt").display().to_string();
    let err = run_err(&["train", "--stage", "7", "--output", &out]);
    assert!(err.contains("unknown training stage"), "{err}");
    let err = run_err(&["train", "--stage", "8", "--output", &out]);
    assert!(err.contains("--init"), "{err}");
    // Unknown verbs and missing required flags are clap-level failures.
    run_err(&["transcode"]);
    run_err(&["eval", "--anchor", "only.csv"]);
}

fn image_size(path: &Path) -> (usize, usize) {
    // PNG IHDR: width and height as big-endian u32 at offsets 16 and 20.
    let bytes = std::fs::read(path).unwrap();
    let w = u32::from_be_bytes(bytes[16..20].try_into().unwrap());
    let h = u32::from_be_bytes(bytes[20..24].try_into().unwrap());
    (w as usize, h as usize)
}
