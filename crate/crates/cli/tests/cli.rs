use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn paiconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paiconv"))
        .args(args)
        .env("PAICONV_THREADS", "1")
        .output()
        .expect("run paiconv")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: [&str; 10] = [
    "--points",
    "48",
    "--train-per-class",
    "6",
    "--test-per-class",
    "3",
    "--epochs",
    "2",
    "--batch-size",
    "4",
];

fn train(dir: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out-dir", dir.to_str().unwrap()];
    args.extend(SMALL);
    args.extend(extra);
    paiconv(&args)
}

#[test]
fn gen_kernel_matches_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("k.txt");
    let o = paiconv(&["gen-kernel", "--count", "32", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let golden = include_str!("data/fibonacci_32.txt");
    assert_eq!(fs::read_to_string(&out).unwrap(), golden);
    assert_eq!(golden.lines().count(), 32);
    assert_eq!(golden.lines().next().unwrap(), "0.0000000000000000e0 0.0000000000000000e0 0.0000000000000000e0");
}

#[test]
fn gen_kernel_random_mode_is_seeded() {
    let a = paiconv(&["gen-kernel", "--count", "8", "--mode", "random", "--seed", "3"]);
    let b = paiconv(&["gen-kernel", "--count", "8", "--mode", "random", "--seed", "3"]);
    let c = paiconv(&["gen-kernel", "--count", "8", "--mode", "random", "--seed", "4"]);
    assert!(a.status.success());
    assert_eq!(stdout(&a), stdout(&b));
    assert_ne!(stdout(&a), stdout(&c));
    assert_eq!(stdout(&a).lines().count(), 8);
}

#[test]
fn gen_kernel_count_one_is_a_usage_error() {
    let o = paiconv(&["gen-kernel", "--count", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--count"));
}

#[test]
fn bad_flags_exit_with_usage_code() {
    assert_eq!(paiconv(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(paiconv(&["train", "--variant", "bogus"]).status.code(), Some(1));
    assert_eq!(paiconv(&["--help"]).status.code(), Some(0));
}

#[test]
fn help_documents_every_flag() {
    for cmd in ["gen-kernel", "train", "eval", "ablate", "bench", "check"] {
        let help = stdout(&paiconv(&[cmd, "--help"]));
        let mut lines = help.lines().peekable();
        while let Some(line) = lines.next() {
            let t = line.trim_start();
            if !t.starts_with("--") && !t.starts_with('-') {
                continue;
            }
            let next = lines.peek().map(|l| l.trim()).unwrap_or("");
            let inline = t.split("  ").filter(|s| !s.trim().is_empty()).count() > 1;
            assert!(inline || !next.is_empty() && !next.starts_with('-'), "{cmd}: `{t}` has no help");
        }
    }
    assert!(!stdout(&paiconv(&["check", "--help"])).contains("inject-fault"));
}

#[test]
fn train_writes_metrics_and_checkpoint_then_eval_reproduces_train_oa() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &["--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = metrics.lines().collect();
    assert_eq!(rows[0], "epoch,lr,loss,OA,MA");
    assert_eq!(rows.len(), 3);
    let last: Vec<&str> = rows[2].split(',').collect();
    let ckpt = run.join("model.ckpt");
    assert!(fs::read_to_string(&ckpt).unwrap().starts_with("PAICONV-CHECKPOINT 1\n"));

    let mut args = vec!["eval", "--checkpoint", ckpt.to_str().unwrap()];
    args.extend(&SMALL[..6]);
    let o = paiconv(&args);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 1);
    let fields: Vec<&str> = out.trim().split(',').collect();
    assert_eq!(fields.len(), 4);
    assert_eq!(fields[0], "18");
    assert_eq!(fields[2], last[3], "OA");
    assert_eq!(fields[3], last[4], "MA");

    args.push("--header");
    let o = paiconv(&args);
    assert_eq!(stdout(&o).lines().next().unwrap(), "samples,loss,OA,MA");
    args.pop();
    args.extend(["--split", "test"]);
    let o = paiconv(&args);
    assert!(stdout(&o).starts_with("9,"));
}

#[test]
fn no_permutation_variant_is_accepted() {
    let dir = tempfile::tempdir().unwrap();
    let o = train(dir.path(), &["--variant", "no_permutation"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = fs::read_to_string(dir.path().join("model.ckpt")).unwrap();
    assert!(ck.contains("\nvariant no_permutation\n"));
}

#[test]
fn eval_of_missing_checkpoint_is_a_clear_error() {
    let o = paiconv(&["eval", "--checkpoint", "/nonexistent/model.ckpt"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("/nonexistent/model.ckpt"));
    assert!(stdout(&o).is_empty());
}

#[test]
fn config_file_is_read_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.ini");
    fs::write(
        &cfg,
        "[model]\nconv_channels = 4, 4\naggregate_width = 8\nfc_hidden = 4\nk = 4\nkernel_len = 4\n\
         [train]\nepochs = 3\n[data]\nclasses = sphere, cube\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &["--config", cfg.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    // --epochs 2 from the flags overrides the file's 3.
    assert_eq!(fs::read_to_string(run.join("metrics.csv")).unwrap().lines().count(), 3);
    let ck = fs::read_to_string(run.join("model.ckpt")).unwrap();
    assert!(ck.contains("\nconv_channels 4 4\n"));
    assert!(ck.contains("\nclasses 2\nsphere\ncube\n"));

    fs::write(&cfg, "[train]\nwarmup = 3\n").unwrap();
    let o = train(&run, &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warmup"));
}

#[test]
fn manifest_data_source() {
    let dir = tempfile::tempdir().unwrap();
    let off = "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n3 0 1 3\n3 0 2 3\n3 1 2 3\n";
    let mut manifest = String::new();
    for (i, class) in ["tet", "tet", "flat", "flat"].iter().enumerate() {
        let path = dir.path().join(format!("m{i}.off"));
        let text = if *class == "flat" {
            "OFF\n4 2 0\n0 0 0\n1 0 0\n1 1 0\n0 1 0\n3 0 1 2\n3 0 2 3\n"
        } else {
            off
        };
        fs::write(&path, text).unwrap();
        manifest.push_str(&format!("{}\t{class}\n", path.display()));
    }
    let list = dir.path().join("list.tsv");
    fs::write(&list, manifest).unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &["--data", list.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let ck = run.join("model.ckpt");
    let o = paiconv(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        list.to_str().unwrap(),
        "--points",
        "48",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("4,"));
}

fn ablate(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["ablate", "--out", out.to_str().unwrap(), "--epochs", "1"];
    args.extend(&SMALL[..6]);
    args.extend(extra);
    paiconv(&args)
}

#[test]
fn ablate_covers_all_variants_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.csv");
    let o = ablate(&a, &["--seeds", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&a).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "variant,seed,OA,MA");
    let names: Vec<&str> = rows[1..8].iter().map(|r| r.split(',').next().unwrap()).collect();
    let all: Vec<&str> = paiconv_core::Variant::ALL.iter().map(|v| v.name()).collect();
    assert_eq!(names, all);
    assert_eq!(names[0], "full");
    assert!(rows[8].starts_with("full,mean,"));

    let b = dir.path().join("b.csv");
    let c = dir.path().join("c.csv");
    let args = ["--seeds", "2", "--seed", "5", "--variants", "full,isotropic"];
    assert!(ablate(&b, &args).status.success());
    assert!(ablate(&c, &args).status.success());
    let tb = fs::read_to_string(&b).unwrap();
    assert_eq!(tb, fs::read_to_string(&c).unwrap());
    let seeds: Vec<String> = tb
        .lines()
        .skip(1)
        .take(4)
        .map(|r| r.split(',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(seeds, ["full,5", "full,6", "isotropic,5", "isotropic,6"]);
}

#[test]
fn bench_writes_one_row_per_method_and_size() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench.csv");
    let o = paiconv(&[
        "bench",
        "--n",
        "64,128",
        "--k",
        "8",
        "--l",
        "8",
        "--forward",
        "--budget-mib",
        "64",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&out).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().map(|l| l.split(',').collect()).collect();
    assert_eq!(rows[0].join(","), paiconv_bench::CSV_HEADER);
    let keys: Vec<String> = rows[1..].iter().map(|r| format!("{}/{}", r[0], r[1])).collect();
    assert_eq!(
        keys,
        ["dot_product/64", "kpconv_linear/64", "dot_product/128", "kpconv_linear/128", "classifier_forward/64"]
    );
    assert!(rows[1..].iter().all(|r| r[5].parse::<u64>().unwrap() > 0));
    assert!(stdout(&o).contains("max points within 64 MiB"));

    let o = paiconv(&["bench", "--repeats", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_passes_and_catches_an_injected_fault() {
    let o = paiconv(&["check"]);
    assert!(o.status.success(), "{}", stdout(&o));
    let out = stdout(&o);
    for name in paiconv_core::check::PROPERTIES {
        assert!(out.contains(&format!("PASS {name}:")), "{name}");
    }
    let o = paiconv(&["check", "--inject-fault", "backward-sign"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stdout(&o).contains("FAIL network_gradient"));
}
