use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vidcap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidcap"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = vidcap(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = "\
frames = 4
height = 8
width = 8
patch_s = 4
video_width = 8
hidden = 8
heads = 2
layers = 1
text_len = 8
shape_size = 3
steps = 6
batch_size = 2
log_every = 3
eval_every = 3
";

#[test]
fn usage_errors_exit_1() {
    let out = vidcap(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(vidcap(&["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(vidcap(&[]).status.code(), Some(1));
    assert_eq!(vidcap(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_2() {
    let out = vidcap(&[
        "eval",
        "--pred",
        "/nonexistent/p.txt",
        "--ref",
        "/nonexistent/r.txt",
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent"));
}

#[test]
fn gen_data_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen-data", "--seed", "7", "--out", p(d), "--clips", "20"]);
    }
    for f in ["clips.bin", "captions.txt", "vocab.txt"] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    assert_eq!(
        fs::read_to_string(a.join("captions.txt"))
            .unwrap()
            .lines()
            .count(),
        20
    );
    let c = dir.path().join("c");
    ok(&["gen-data", "--seed", "8", "--out", p(&c), "--clips", "20"]);
    assert_ne!(
        fs::read(a.join("clips.bin")).unwrap(),
        fs::read(c.join("clips.bin")).unwrap()
    );
}

#[test]
fn eval_identical_files() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("caps.txt");
    fs::write(&f, "a red square moves left\na blue circle moves up\n").unwrap();
    let out = ok(&["eval", "--pred", p(&f), "--ref", p(&f)]);
    assert!(out.contains("bleu4,1.0000"), "{out}");
    assert!(out.contains("rouge_l,1.0000"));
    assert!(out.contains("cider_d,10.0000"));
}

#[test]
fn train_decode_and_mask_tools() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let (train, val, out) = (d.join("train"), d.join("val"), d.join("run"));
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--seed",
        "1",
        "--out",
        p(&train),
        "--clips",
        "12",
    ]);
    ok(&[
        "gen-data",
        "--config",
        p(&cfg),
        "--seed",
        "1",
        "--stream",
        "1",
        "--out",
        p(&val),
        "--clips",
        "4",
    ]);
    let log = ok(&[
        "train",
        "--config",
        p(&cfg),
        "--seed",
        "3",
        "--data",
        p(&train),
        "--val",
        p(&val),
        "--out",
        p(&out),
    ]);
    assert!(
        log.starts_with("step,lr,l_mlm,l_sparse,mask_mean_activation,frac_below_0.01,val_cider")
    );
    let ck = out.join("model.bin");
    assert_eq!(
        fs::read_to_string(out.join("metrics.csv"))
            .unwrap()
            .lines()
            .count(),
        3
    );

    let preds = d.join("preds.txt");
    ok(&[
        "decode",
        "--checkpoint",
        p(&ck),
        "--data",
        p(&val),
        "--out",
        p(&preds),
    ]);
    assert_eq!(fs::read_to_string(&preds).unwrap().lines().count(), 4);

    let pgm = d.join("mask.pgm");
    ok(&["mask", "export", "--checkpoint", p(&ck), "--out", p(&pgm)]);
    let bytes = fs::read(&pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n8 8\n255\n"));
    assert_eq!(bytes.len(), 11 + 64);

    let csv = d.join("mask.csv");
    ok(&["mask", "export", "--in", p(&ck), "--out", p(&csv)]);
    assert!(fs::read_to_string(&csv)
        .unwrap()
        .starts_with("# grid 2,2,2"));

    let bin = d.join("bin.bin");
    ok(&["mask", "binarize", "--checkpoint", p(&ck), "--out", p(&bin)]);
    let stats = ok(&["mask", "stats", "--checkpoint", p(&bin)]);
    assert!(stats.contains("grid,2x2x2"), "{stats}");

    let wide = d.join("wide.bin");
    let msg = ok(&[
        "mask",
        "interp",
        "--in",
        p(&ck),
        "--t-new",
        "4",
        "--out",
        p(&wide),
    ]);
    assert!(msg.contains("t=4"), "{msg}");
    assert!(ok(&["mask", "stats", "--in", p(&wide)]).contains("grid,4x2x2"));

    let ft = d.join("ft");
    ok(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&train),
        "--out",
        p(&ft),
        "--mode",
        "binary-finetune",
        "--checkpoint",
        p(&ck),
        "--steps",
        "3",
    ]);
    let out = vidcap(&[
        "train",
        "--config",
        p(&cfg),
        "--data",
        p(&train),
        "--out",
        p(&ft),
        "--mode",
        "binary-finetune",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn gradcheck_reports_each_module() {
    let out = ok(&["gradcheck", "--max-coords", "2"]);
    for m in [
        "tensor-autodiff",
        "video-encoder",
        "multimodal-encoder",
        "training",
    ] {
        assert!(out.contains(&format!("{m}: max relative error")), "{out}");
    }
}
