use std::path::Path;
use std::process::{Command, Output};

use mvd_core::dataio::{synthetic, ImageTensor};

fn mvd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvd"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

const TINY: &[&str] = &[
    "--set",
    "data=toy:3:32:5",
    "--set",
    "backbone.kind=conv_small",
    "--set",
    "backbone.depth=2",
    "--set",
    "backbone.channels=4",
    "--set",
    "patch=16",
    "--set",
    "batch=2",
    "--set",
    "lr=1e-3",
    "--set",
    "ckpt_every=3",
    "--log-every",
    "2",
];

fn train(dir: &Path, out: &str, iters: &str, extra: &[&str]) -> Output {
    let mut args = vec!["--deterministic", "train", "--out", out, "--iters", iters];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    mvd(dir, &args)
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    let o = mvd(d.path(), &["frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("Usage"));
    assert_eq!(code(&mvd(d.path(), &["verify", "--no-such-flag"])), 1);
    assert_eq!(code(&mvd(d.path(), &["--help"])), 0);
    let o = mvd(
        d.path(),
        &["train", "--out", "r", "--set", "data=toy:2:32:1", "--set", "bogus=1"],
    );
    assert_eq!(code(&o), 1);
    assert!(text(&o.stderr).contains("bogus"));
    let o = mvd(
        d.path(),
        &[
            "corrupt", "--in", "a.png", "--out", "b.png", "--family", "gaussian", "--param", "sigma=-1",
        ],
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn verify_reports_and_fails_with_code_three() {
    let d = tempfile::tempdir().unwrap();
    let o = mvd(d.path(), &["verify", "--lemma1"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let out = text(&o.stdout);
    assert!(out.contains("all checks passed"));
    assert_eq!(out.matches("[pass]").count(), 7);
    assert!(d.path().join("mvd-verify.replay.cfg").exists());
    let o = mvd(d.path(), &["verify", "--noise-stats", "--tolerance-scale", "0"]);
    assert_eq!(code(&o), 3);
    assert!(text(&o.stdout).contains("[FAIL]"));
}

#[test]
fn missing_and_damaged_inputs_exit_two() {
    let d = tempfile::tempdir().unwrap();
    std::fs::write(
        d.path().join("grid.cfg"),
        "dataset = toy:2:32:1\ngrid.gaussian = 25\ncheckpoints = missing.mvd\n",
    )
    .unwrap();
    let o = mvd(d.path(), &["eval", "--grid", "grid.cfg", "--out", "res"]);
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("missing.mvd"));
    std::fs::write(d.path().join("broken.png"), b"not an image").unwrap();
    let o = mvd(
        d.path(),
        &[
            "corrupt",
            "--in",
            "broken.png",
            "--out",
            "x.png",
            "--family",
            "gaussian",
            "--param",
            "sigma=5",
        ],
    );
    assert_eq!(code(&o), 2);
    assert!(text(&o.stderr).contains("broken.png"));
}

#[test]
fn corrupt_is_deterministic_and_replayable() {
    let d = tempfile::tempdir().unwrap();
    let src = d.path().join("src");
    std::fs::create_dir(&src).unwrap();
    for i in 0..2 {
        synthetic::toy_image(i, 24)
            .save_png(&src.join(format!("im{i}.png")))
            .unwrap();
    }
    let run = |out: &str, seed: &str| {
        let o = mvd(
            d.path(),
            &[
                "--seed",
                seed,
                "corrupt",
                "--in",
                "src",
                "--out",
                out,
                "--family",
                "drop_mask",
                "--param",
                "drop_ratio=0.5",
            ],
        );
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    };
    run("a", "3");
    run("b", "3");
    run("c", "4");
    for f in ["im0.png", "im1.png", "im0_mask.png"] {
        assert_eq!(read(d.path().join("a").join(f)), read(d.path().join("b").join(f)));
    }
    assert_ne!(read(d.path().join("a/im0.png")), read(d.path().join("c/im0.png")));
    let before = read(d.path().join("a/im1.png"));
    std::fs::remove_file(d.path().join("a/im1.png")).unwrap();
    let o = mvd(d.path(), &["replay", "a/replay.cfg"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(read(d.path().join("a/im1.png")), before);

    let o = mvd(
        d.path(),
        &["corrupt", "--in", "src/im0.png", "--out", "one.png", "--pool", "noise"],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(d.path().join("one.replay.cfg").exists());
}

#[test]
fn train_resume_replay_and_finetune() {
    let d = tempfile::tempdir().unwrap();
    let o = train(d.path(), "full", "6", &[]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("step 6/6"));
    let o2 = train(d.path(), "again", "6", &[]);
    assert_eq!(text(&o.stderr), text(&o2.stderr));
    let full = read(d.path().join("full/final.mvd"));
    assert_eq!(full, read(d.path().join("again/final.mvd")));
    assert_eq!(
        read(d.path().join("full/train_log.csv")),
        read(d.path().join("again/train_log.csv"))
    );

    let o = mvd(
        d.path(),
        &[
            "train",
            "--resume",
            "full/checkpoints/ckpt_00000003.mvd",
            "--out",
            "resumed",
            "--iters",
            "6",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("resuming from step 3"));
    assert_eq!(read(d.path().join("resumed/final.mvd")), full);

    std::fs::remove_file(d.path().join("again/final.mvd")).unwrap();
    let o = mvd(d.path(), &["replay", "again/replay.cfg"]);
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(read(d.path().join("again/final.mvd")), full);

    let o = train(
        d.path(),
        "ft",
        "2",
        &["--set", "schema=n2c", "--finetune-from", "full/final.mvd"],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert!(text(&o.stderr).contains("loaded pretrained groups: theta, psi"));
}

#[test]
fn denoise_and_evaluate() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&train(d.path(), "run", "2", &[])), 0);
    let noisy = synthetic::toy_image(9, 40);
    noisy.save_png(&d.path().join("in.png")).unwrap();
    let o = mvd(
        d.path(),
        &[
            "denoise",
            "--ckpt",
            "run/final.mvd",
            "--in",
            "in.png",
            "--out",
            "out/whole.png",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let o = mvd(
        d.path(),
        &[
            "denoise",
            "--ckpt",
            "run/final.mvd",
            "--in",
            "in.png",
            "--out",
            "out/tiled.png",
            "--tile",
            "24",
            "--overlap",
            "8",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let whole = ImageTensor::load_png(&d.path().join("out/whole.png")).unwrap();
    let tiled = ImageTensor::load_png(&d.path().join("out/tiled.png")).unwrap();
    assert_eq!(whole.shape(), (40, 40, 3));
    let diff = whole
        .data()
        .iter()
        .zip(tiled.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f32, f32::max);
    assert!(diff <= 1.0 / 255.0 + 1e-6, "{diff}");

    let grid = "dataset = toy:2:32:7\ngrid.gaussian = 15, 50\ngrid.poisson = 20\ncheckpoints = model=run/final.mvd, identity\n";
    std::fs::write(d.path().join("grid.cfg"), grid).unwrap();
    for out in ["e1", "e2"] {
        let o = mvd(d.path(), &["--seed", "11", "eval", "--grid", "grid.cfg", "--out", out]);
        assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    }
    let csv = text(&read(d.path().join("e1/results.csv")));
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(csv.starts_with("dataset,family,level,checkpoint,psnr,ssim,n_images\n"));
    for f in ["results.csv", "results.txt", "grid_gaussian.png", "grid_poisson.png"] {
        assert_eq!(
            read(d.path().join("e1").join(f)),
            read(d.path().join("e2").join(f)),
            "{f}"
        );
    }

    let o = mvd(
        d.path(),
        &["sr-eval", "--ckpt", "identity", "--data", "toy:2:48:1", "--out", "sr"],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    assert_eq!(text(&read(d.path().join("sr/results.csv"))).lines().count(), 4);
    let o = mvd(
        d.path(),
        &[
            "inpaint-eval",
            "--ckpt",
            "identity",
            "--data",
            "toy:2:32:1",
            "--ratios",
            "0,0.5",
            "--masked-only",
            "--out",
            "ip",
        ],
    );
    assert_eq!(code(&o), 0, "{}", text(&o.stderr));
    let csv = text(&read(d.path().join("ip/results.csv")));
    assert!(csv.lines().nth(1).unwrap().contains(",100.0000,"), "{csv}");
}
