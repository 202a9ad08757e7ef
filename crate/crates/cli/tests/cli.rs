//! End-to-end checks that drive the compiled `loram` binary the way a user
//! would: real files, real exit codes, real container round trips.

use std::path::Path;
use std::process::Command;

use loram_core::container::{model_from_container, Container};
use loram_core::corpus::task_line_ok;
use loram_core::eval::accounting;

/// Small-but-not-degenerate run shared by most tests: three layers so the
/// structured strategies have an unprotected middle layer to actually cut.
const TINY_CONFIG: &str = r#"
seed = 7
eval_seq_len = 32

[model]
n_layers = 3
d_model = 32
n_heads = 2
d_ff = 64
max_seq = 64
lora_rank = 4
lora_alpha = 8.0

[align]
steps = 4
batch_size = 4
micro_batch = 4
seq_len = 32

[sft]
steps = 4
batch_size = 4
micro_batch = 4
seq_len = 32

[prune]
strategy = "stru"
ratio = 0.5
calib_windows = 2
"#;

struct Run {
    code: i32,
    stdout: String,
    stderr: String,
}

fn loram(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Run {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_loram"));
    cmd.current_dir(dir).env_remove("LORAM_SEED").args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    let out = cmd.output().expect("spawn loram");
    Run {
        code: out.status.code().expect("exit code"),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

fn ok(dir: &Path, args: &[&str]) -> Run {
    let r = loram(dir, args, &[]);
    assert_eq!(r.code, 0, "loram {args:?} failed:\nstdout: {}\nstderr: {}", r.stdout, r.stderr);
    r
}

/// Pull `key=value` out of a summary line.
fn field<'a>(run: &'a Run, key: &str) -> &'a str {
    run.stdout
        .split_whitespace()
        .find_map(|tok| tok.strip_prefix(&format!("{key}=")[..]))
        .unwrap_or_else(|| panic!("no field {key} in: {}", run.stdout))
}

fn cfg_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut v = vec!["--config", "run.toml"];
    v.extend_from_slice(extra);
    v
}

/// Init alone leaves `lm_head` at zero, which starves the body of gradient
/// signal; a short pretraining pass makes the base usable for calibration.
fn setup(dir: &Path) {
    std::fs::write(dir.join("run.toml"), TINY_CONFIG).unwrap();
    ok(dir, &[
        "--config", "run.toml", "corpus", "make-synthetic",
        "--out-dir", "corpora", "--general-bytes", "8192", "--task-lines", "200",
    ]);
    ok(dir, &["--config", "run.toml", "init", "--out", "init.lmck"]);
    ok(dir, &[
        "--config", "run.toml", "align", "--model", "init.lmck",
        "--corpus", "corpora/general.txt", "--out", "base.lmck", "--steps", "6",
    ]);
}

#[test]
fn synthetic_corpus_is_deterministic_and_well_formed() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--seed", "11", "corpus", "make-synthetic", "--out-dir", "a", "--task-lines", "64"]);
    ok(dir, &["--seed", "11", "corpus", "make-synthetic", "--out-dir", "b", "--task-lines", "64"]);
    ok(dir, &["--seed", "12", "corpus", "make-synthetic", "--out-dir", "c", "--task-lines", "64"]);
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a/general.txt"), read("b/general.txt"));
    assert_eq!(read("a/task.txt"), read("b/task.txt"));
    assert_ne!(read("a/general.txt"), read("c/general.txt"));

    let task = String::from_utf8(read("a/task.txt")).unwrap();
    let mut lines = 0;
    for line in task.lines() {
        assert!(task_line_ok(line), "malformed task line: {line}");
        lines += 1;
    }
    assert_eq!(lines, 64);
}

#[test]
fn corpus_import_copies_bytes_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let payload: Vec<u8> = (0..=255u8).chain([0, 255, b'\n', 0]).collect();
    std::fs::write(dir.join("raw.bin"), &payload).unwrap();
    let r = ok(dir, &["corpus", "import", "--file", "raw.bin", "--out", "copy.bin"]);
    assert_eq!(field(&r, "bytes"), "260");
    assert_eq!(std::fs::read(dir.join("copy.bin")).unwrap(), payload);
}

#[test]
fn init_is_deterministic_and_seed_sensitive() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(dir, &["--seed", "5", "init", "--out", "a.lmck"]);
    ok(dir, &["--seed", "5", "init", "--out", "b.lmck"]);
    ok(dir, &["--seed", "6", "init", "--out", "c.lmck"]);
    let read = |p: &str| std::fs::read(dir.join(p)).unwrap();
    assert_eq!(read("a.lmck"), read("b.lmck"));
    assert_ne!(read("a.lmck"), read("c.lmck"));
}

#[test]
fn seed_flag_beats_env_beats_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("run.toml"), TINY_CONFIG).unwrap();

    let r = ok(dir, &["--config", "run.toml", "init", "--out", "file.lmck"]);
    assert_eq!(field(&r, "seed"), "7");

    let r = loram(dir, &["--config", "run.toml", "init", "--out", "env.lmck"], &[("LORAM_SEED", "99")]);
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(field(&r, "seed"), "99");

    let r = loram(
        dir,
        &["--config", "run.toml", "--seed", "123", "init", "--out", "flag.lmck"],
        &[("LORAM_SEED", "99")],
    );
    assert_eq!(r.code, 0, "{}", r.stderr);
    assert_eq!(field(&r, "seed"), "123");

    // The env seed must produce exactly what the same seed via flag produces.
    ok(dir, &["--config", "run.toml", "--seed", "99", "init", "--out", "flag99.lmck"]);
    assert_eq!(
        std::fs::read(dir.join("env.lmck")).unwrap(),
        std::fs::read(dir.join("flag99.lmck")).unwrap()
    );
}

#[test]
fn invalid_seed_env_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let r = loram(tmp.path(), &["init", "--out", "x.lmck"], &[("LORAM_SEED", "not-a-number")]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("LORAM_SEED"));
}

#[test]
fn structured_pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let r = ok(dir, &cfg_args(&[
        "prune", "--model", "base.lmck", "--out", "pruned.lmck", "--general", "corpora/general.txt",
    ]));
    let orig: u64 = field(&r, "orig_params").parse().unwrap();
    let pruned: u64 = field(&r, "pruned_params").parse().unwrap();
    assert!(pruned < orig, "structured prune must drop parameters ({pruned} !< {orig})");

    let r = ok(dir, &cfg_args(&[
        "align", "--model", "pruned.lmck", "--corpus", "corpora/general.txt",
        "--out", "aligned.lmck", "--trace-out", "align.csv",
    ]));
    let first: f64 = field(&r, "first_loss").parse().unwrap();
    let last: f64 = field(&r, "final_loss").parse().unwrap();
    assert!(first.is_finite() && last.is_finite());

    // trace: header plus one row per step
    let trace = std::fs::read_to_string(dir.join("align.csv")).unwrap();
    let rows: Vec<&str> = trace.lines().collect();
    assert_eq!(rows[0], "step,loss");
    assert_eq!(rows.len(), 1 + 4);

    ok(dir, &cfg_args(&[
        "finetune", "--base", "aligned.lmck", "--corpus", "corpora/task.txt", "--out", "adapters.lmck",
    ]));
    let r = ok(dir, &cfg_args(&["recover", "--adapters", "adapters.lmck", "--out", "recovered.lmck"]));
    assert_eq!(field(&r, "structured"), "true");
    ok(dir, &cfg_args(&[
        "merge", "--base", "base.lmck", "--adapters", "recovered.lmck", "--out", "merged.lmck",
    ]));

    let r = ok(dir, &cfg_args(&["eval", "--model", "merged.lmck", "--corpus", "corpora/task.txt"]));
    let ppl: f64 = field(&r, "ppl").parse().unwrap();
    assert!(ppl.is_finite() && ppl > 1.0, "nonsense perplexity {ppl}");
}

#[test]
fn masked_pipeline_with_quantization_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(dir, &cfg_args(&[
        "prune", "--model", "base.lmck", "--out", "semi.lmck", "--strategy", "semi",
        "--masks-out", "masks.lmck",
    ]));
    ok(dir, &cfg_args(&[
        "align", "--model", "semi.lmck", "--masks", "masks.lmck",
        "--corpus", "corpora/general.txt", "--out", "aligned.lmck",
    ]));
    let r = ok(dir, &cfg_args(&["quantize", "--model", "aligned.lmck", "--out", "quant.lmck"]));
    assert_eq!(field(&r, "codebook"), "nf4");
    ok(dir, &cfg_args(&[
        "finetune", "--base", "quant.lmck", "--masks", "masks.lmck",
        "--corpus", "corpora/task.txt", "--out", "adapters.lmck",
    ]));
    let r = ok(dir, &cfg_args(&["recover", "--adapters", "adapters.lmck", "--out", "recovered.lmck"]));
    assert_eq!(field(&r, "structured"), "false");
    ok(dir, &cfg_args(&[
        "merge", "--base", "base.lmck", "--adapters", "recovered.lmck", "--out", "merged.lmck",
    ]));

    // Serving the quantized base with adapters must also work directly.
    let r = ok(dir, &cfg_args(&[
        "eval", "--model", "quant.lmck", "--adapters", "adapters.lmck",
        "--corpus", "corpora/task.txt",
    ]));
    assert!(field(&r, "ppl").parse::<f64>().unwrap().is_finite());
}

#[test]
fn zero_step_finetune_merges_back_to_the_identical_model() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    // B starts at zero, so zero optimizer steps means a zero delta and merge
    // must leave every weight bit untouched.
    ok(dir, &cfg_args(&[
        "finetune", "--base", "base.lmck", "--corpus", "corpora/task.txt",
        "--out", "adapters.lmck", "--steps", "0",
    ]));
    ok(dir, &cfg_args(&["recover", "--adapters", "adapters.lmck", "--out", "recovered.lmck"]));
    ok(dir, &cfg_args(&[
        "merge", "--base", "base.lmck", "--adapters", "recovered.lmck", "--out", "merged.lmck",
    ]));

    let (_, base) = model_from_container(&Container::read_from(&dir.join("base.lmck")).unwrap()).unwrap();
    let (_, merged) =
        model_from_container(&Container::read_from(&dir.join("merged.lmck")).unwrap()).unwrap();
    for ((name, b), (_, m)) in base.named().into_iter().zip(merged.named()) {
        for (x, y) in b.data().iter().zip(m.data()) {
            assert_eq!(x.to_bits(), y.to_bits(), "bit drift in {name}");
        }
    }
}

#[test]
fn exit_codes_distinguish_failure_classes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    // Config errors: unknown strategy, semi without a mask output.
    let r = loram(dir, &cfg_args(&["prune", "--model", "base.lmck", "--out", "x.lmck", "--strategy", "bogus"]), &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    let r = loram(dir, &cfg_args(&["prune", "--model", "base.lmck", "--out", "x.lmck", "--strategy", "semi"]), &[]);
    assert_eq!(r.code, 2, "{}", r.stderr);
    assert!(r.stderr.contains("--masks-out"));

    // Missing artifact.
    let r = loram(dir, &cfg_args(&["eval", "--model", "missing.lmck", "--corpus", "corpora/task.txt"]), &[]);
    assert_eq!(r.code, 3, "{}", r.stderr);

    // Consistency: merging compact adapters that still carry their plan.
    ok(dir, &cfg_args(&[
        "prune", "--model", "base.lmck", "--out", "pruned.lmck", "--general", "corpora/general.txt",
    ]));
    ok(dir, &cfg_args(&[
        "finetune", "--base", "pruned.lmck", "--corpus", "corpora/task.txt",
        "--out", "compact_adapters.lmck", "--steps", "1",
    ]));
    let r = loram(
        dir,
        &cfg_args(&["merge", "--base", "base.lmck", "--adapters", "compact_adapters.lmck", "--out", "x.lmck"]),
        &[],
    );
    assert_eq!(r.code, 4, "{}", r.stderr);
    assert!(r.stderr.contains("recover"));

    // Consistency: evaluating a container of the wrong kind.
    ok(dir, &cfg_args(&[
        "prune", "--model", "base.lmck", "--out", "semi.lmck", "--strategy", "semi",
        "--masks-out", "masks.lmck",
    ]));
    let r = loram(dir, &cfg_args(&["eval", "--model", "masks.lmck", "--corpus", "corpora/task.txt"]), &[]);
    assert_eq!(r.code, 4, "{}", r.stderr);

    // Numerical: an absurd learning rate blows the loss up to NaN.
    let r = loram(
        dir,
        &cfg_args(&[
            "align", "--model", "base.lmck", "--corpus", "corpora/general.txt",
            "--out", "x.lmck", "--lr", "1e30", "--steps", "3",
        ]),
        &[],
    );
    assert_eq!(r.code, 5, "{}", r.stderr);
}

#[test]
fn account_agrees_with_the_library_arithmetic() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let r = ok(dir, &[
        "account", "--orig-params", "6738415616", "--pruned-params", "2008326144", "--bits", "4",
    ]);
    let row = accounting(6_738_415_616, 2_008_326_144, 4).unwrap();
    assert_eq!(field(&r, "effective_params"), row.effective_params.to_string());
    assert_eq!(field(&r, "reduction"), format!("{:.2}", row.reduction_ratio));
    assert_eq!(field(&r, "hbm_gib"), format!("{:.2}", row.hbm_gib));

    // CSV export carries the same row.
    let r2 = ok(dir, &[
        "account", "--orig-params", "6738415616", "--pruned-params", "2008326144", "--bits", "4",
        "--csv-out", "acct.csv",
    ]);
    assert_eq!(field(&r2, "reduction"), field(&r, "reduction"));
    let csv = std::fs::read_to_string(dir.join("acct.csv")).unwrap();
    assert!(csv.contains(&format!("{:.2}", row.reduction_ratio)), "csv: {csv}");
}

#[test]
fn account_on_pruned_containers_matches_the_prune_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let r = ok(dir, &cfg_args(&[
        "prune", "--model", "base.lmck", "--out", "pruned.lmck", "--general", "corpora/general.txt",
    ]));
    let orig: u64 = field(&r, "orig_params").parse().unwrap();
    let pruned: u64 = field(&r, "pruned_params").parse().unwrap();

    let r = ok(dir, &cfg_args(&["account", "--model", "base.lmck", "--pruned", "pruned.lmck"]));
    assert_eq!(field(&r, "orig_params"), orig.to_string());
    assert_eq!(field(&r, "pruned_params"), pruned.to_string());
    let row = accounting(orig, pruned, 16).unwrap();
    assert_eq!(field(&r, "reduction"), format!("{:.2}", row.reduction_ratio));
    assert_eq!(field(&r, "hbm_gib"), format!("{:.2}", row.hbm_gib));
}

#[test]
fn norms_csv_covers_every_head_and_mlp_target() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(dir, &cfg_args(&[
        "finetune", "--base", "base.lmck", "--corpus", "corpora/task.txt",
        "--out", "adapters.lmck", "--steps", "1",
    ]));
    ok(dir, &cfg_args(&["norms", "--adapters", "adapters.lmck", "--out", "norms.csv"]));
    let csv = std::fs::read_to_string(dir.join("norms.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "layer,target,head_or_na,norm");
    // 3 layers x 2 heads x {q,k,v,o} plus 3 layers x {up,gate,down}.
    assert_eq!(rows.len(), 1 + 3 * 2 * 4 + 3 * 3);
    assert_eq!(csv.matches(",na,").count(), 9);
}

#[test]
fn run_command_writes_a_deterministic_artifact_set() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let run_once = |out: &str| {
        ok(dir, &[
            "--config", "run.toml", "run", "--base", "base.lmck",
            "--general", "corpora/general.txt", "--task", "corpora/task.txt", "--out-dir", out,
        ])
    };
    let r = run_once("out1");
    assert_eq!(field(&r, "stages"), "PAQR");
    assert_eq!(field(&r, "merged"), "true");
    run_once("out2");

    for name in [
        "training_base.lmck",
        "quantized.lmck",
        "adapters.lmck",
        "recovered.lmck",
        "merged.lmck",
        "align_trace.csv",
        "sft_trace.csv",
    ] {
        let a = std::fs::read(dir.join("out1").join(name)).unwrap();
        let b = std::fs::read(dir.join("out2").join(name)).unwrap();
        assert_eq!(a, b, "{name} not reproducible");
    }
}

#[test]
fn ablate_reports_all_four_arms() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    ok(dir, &[
        "--config", "run.toml", "ablate", "--base", "base.lmck",
        "--general", "corpora/general.txt", "--task", "corpora/task.txt", "--out", "ablate.csv",
    ]);
    let csv = std::fs::read_to_string(dir.join("ablate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "label,ppl_0,final");
    assert!(rows.iter().any(|r| r.starts_with("loram,")));
    assert!(rows.iter().any(|r| r.starts_with("wo_recovery,")));
    assert!(rows.iter().any(|r| r.starts_with("wo_alignment,")));
    assert!(rows.iter().any(|r| r.starts_with("plain_lora,")));
    assert!(rows.iter().any(|r| r.starts_with("delta(plain_lora-loram),")));
}
