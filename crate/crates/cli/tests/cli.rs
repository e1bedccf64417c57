use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_dualintent-sr");

const TINY: &str = "\
run.seed = 3
run.data_dir = data
run.out_dir = out
world.users = 50
world.items = 120
world.terms = 12
world.days = 4
model.dim = 4
model.gen_hidden = 8, 4
model.head_hidden = 6, 3
train.lr = 0.02
train.batch_size = 128
train.max_epochs = 2
train.patience = 1
gradcheck.users = 5
gradcheck.items = 4
gradcheck.terms = 6
gradcheck.dim = 3
";

struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("run.conf"), format!("{TINY}{extra}")).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        let config = self.path("run.conf");
        Command::new(BIN)
            .arg(args[0])
            .arg("--config")
            .arg(&config)
            .args(&args[1..])
            .env("RUST_LOG", "warn")
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.run(args);
        assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    }
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_config_echo(dir: &Path) {
    let text = fs::read_to_string(dir.join("run.conf")).unwrap();
    let parsed = dualintent::config::RunConfig::parse(&text).unwrap();
    assert_eq!(parsed.to_text(), text);
    assert_eq!(parsed.seed, 3);
}

#[test]
fn synth_refuses_to_overwrite_without_force() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    let before = fs::read(ws.path("data/train.tsv")).unwrap();
    let again = ws.run(&["synth"]);
    assert_eq!(again.status.code(), Some(3));
    assert!(stderr(&again).contains("--force"));
    ws.ok(&["synth", "--force", "--seed", "9"]);
    assert_ne!(fs::read(ws.path("data/train.tsv")).unwrap(), before);
    for f in ["train.tsv", "valid.tsv", "test.tsv", "manifest.txt", "run.conf"] {
        assert!(ws.path("data").join(f).exists(), "{f}");
    }
}

#[test]
fn config_errors_exit_2() {
    let ws = Workspace::new("train.warp_speed = 9\n");
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("warp_speed"));

    let ws = Workspace::new("train.lr = fast\n");
    assert_eq!(ws.run(&["synth"]).status.code(), Some(2));

    let missing = Command::new(BIN)
        .args(["train", "--config", "/nonexistent/run.conf"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));

    let usage = Command::new(BIN).args(["fly", "--config", "x"]).output().unwrap();
    assert_ne!(usage.status.code(), Some(0));
}

#[test]
fn missing_data_exits_3() {
    let ws = Workspace::new("");
    let out = ws.run(&["train"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
}

#[test]
fn eval_names_the_expected_checkpoint() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    for cmd in ["eval", "export"] {
        let out = ws.run(&[cmd]);
        assert_ne!(out.status.code(), Some(0));
        let msg = stderr(&out);
        let expected = ws.path("out").join("model.ckpt");
        assert!(msg.contains(&expected.display().to_string()), "{msg}");
    }
}

#[test]
fn train_eval_export_round() {
    let ws = Workspace::new("");
    ws.ok(&["synth"]);
    ws.ok(&["train"]);
    let out = ws.path("out");
    for f in ["run.conf", "model.ckpt", "train.log", "epochs.tsv", "eval.txt", "eval.ranks.tsv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert_config_echo(&out);
    let log = fs::read_to_string(out.join("train.log")).unwrap();
    assert!(log.lines().next().unwrap().starts_with("epoch=1 step=1 L="));

    let train_report = fs::read_to_string(out.join("eval.txt")).unwrap();
    ws.ok(&["eval"]);
    assert_eq!(fs::read_to_string(out.join("eval.txt")).unwrap(), train_report);

    ws.ok(&["export"]);
    let tsv = fs::read_to_string(out.join("embeddings.tsv")).unwrap();
    let train_rows = fs::read_to_string(ws.path("data/train.tsv")).unwrap().lines().count();
    let mut counts = [0usize; 3];
    for line in tsv.lines() {
        let cols: Vec<&str> = line.split('\t').collect();
        assert_eq!(cols.len(), 2 + 4, "{line}");
        let kind = ["user", "item", "intent"].iter().position(|k| *k == cols[0]).expect(line);
        counts[kind] += 1;
        cols[1].parse::<usize>().unwrap();
        for v in &cols[2..] {
            let x: f32 = v.parse().unwrap();
            assert!(x.is_finite());
            let mantissa = v.trim_start_matches('-').split(['e', 'E']).next().unwrap();
            assert_eq!(mantissa.chars().filter(char::is_ascii_digit).count(), 9, "{v}");
        }
    }
    assert_eq!(counts[0], 50);
    assert_eq!(counts[1], 120);
    assert!(counts[2] > 0 && counts[2] <= train_rows);
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let a = Workspace::new("");
    let b = Workspace::new("");
    for ws in [&a, &b] {
        ws.ok(&["synth"]);
        ws.ok(&["train"]);
    }
    for f in ["data/train.tsv", "out/model.ckpt", "out/eval.txt", "out/eval.ranks.tsv", "out/train.log"] {
        assert_eq!(fs::read(a.path(f)).unwrap(), fs::read(b.path(f)).unwrap(), "{f}");
    }
}

#[test]
fn seed_flag_overrides_config() {
    let ws = Workspace::new("");
    ws.ok(&["synth", "--seed", "11"]);
    let text = fs::read_to_string(ws.path("data/run.conf")).unwrap();
    assert!(text.contains("run.seed = 11"));
}

#[test]
fn check_grads_passes_and_fails_on_tolerance() {
    let ws = Workspace::new("");
    let stdout = ws.ok(&["check-grads"]);
    for name in ["L_SG\t", "L_CL\t", "L_o\t", "\nL\t"] {
        assert!(stdout.contains(name), "{stdout}");
    }
    assert!(ws.path("out/gradcheck.txt").exists());

    let strict = Workspace::new("gradcheck.tolerance = 1e-300\n");
    let out = strict.run(&["check-grads"]);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
}

fn sweep_reports(extra: &str, key: &str, n: usize) {
    let ws = Workspace::new(extra);
    ws.ok(&["synth"]);
    ws.ok(&["sweep"]);
    let sweep = ws.path("out/sweep");
    let dirs: Vec<_> = fs::read_dir(&sweep).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), n);
    for d in &dirs {
        assert!(d.file_name().unwrap().to_str().unwrap().starts_with(&format!("{key}=")));
        assert!(d.join("eval.txt").exists());
        assert_config_echo(d);
    }
    let summary = fs::read_to_string(ws.path(&format!("out/sweep_{key}.tsv"))).unwrap();
    assert_eq!(summary.lines().count(), n + 1);
}

#[test]
fn lambda1_sweep_writes_five_reports() {
    sweep_reports("train.max_epochs = 1\nsweep.param = lambda1\n", "lambda1", 5);
}

#[test]
fn lambda2_sweep_writes_six_reports() {
    sweep_reports("train.max_epochs = 1\nsweep.param = lambda2\n", "lambda2", 6);
}
