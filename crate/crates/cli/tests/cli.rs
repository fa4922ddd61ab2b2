use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use ctxmatch::synthetic::{to_tsv, OverlapTask};
use ctxmatch::Domain;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODEL: &str = "\
embed_dim = 4
m = 6
n_max = 3
cnn1_window = 2
cnn1_channels = 3
pyramid_kernel = 2
pyramid_channels1 = 2
pyramid_channels2 = 3
turn_channels = 3
fc_hidden = 5
disc_hidden = 3
";

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new(kind: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let task = OverlapTask {
            groups: 4,
            group_size: 5,
            turn_len: 4,
            shared_vocab: 12,
            domain_vocab: 6,
            domain_mix: 0.3,
            ..OverlapTask::default()
        };
        let mut write = |name: &str, domain| fs::write(dir.path().join(name), to_tsv(&task.generate(domain, &mut rng))).unwrap();
        write("train.tsv", Domain::Target);
        write("source.tsv", Domain::Source);
        write("valid.tsv", Domain::Target);
        write("test.tsv", Domain::Target);
        let bank: String = (0..20)
            .map(|i| format!("q{i:02}\tw{} w{} t{}\ta{i}\n", i % 12, (i * 5) % 12, i % 6))
            .collect();
        fs::write(dir.path().join("bank.tsv"), bank).unwrap();
        let config = format!(
            "model = {kind}\n{MODEL}group_size = 5\nepochs = 2\nbatch_size = 4\n\
             train = train.tsv\nsource_train = source.tsv\nvalid = valid.tsv\ntest = test.tsv\n\
             vocab = vocab.txt\nbank = bank.tsv\nlog = train.log\n"
        );
        fs::write(dir.path().join("run.conf"), config).unwrap();
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn conf(&self) -> String {
        self.path("run.conf").display().to_string()
    }

    fn checkpoint(&self) -> String {
        self.path("model.ck").display().to_string()
    }

    fn train(&self) -> Output {
        run(&["train", "--config", &self.conf(), "--checkpoint", &self.checkpoint()], "")
    }
}

fn run(args: &[&str], stdin: &str) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_ctxmatch"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(stdin.as_bytes()).unwrap();
    child.wait_with_output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn assert_ok(o: &Output) {
    assert_eq!(code(o), 0, "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let o = run(&["eval", "--bogus"], "");
    assert_eq!(code(&o), 1);
    assert!(!o.stderr.is_empty());
    assert_eq!(code(&run(&["frobnicate"], "")), 1);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let f = Fixture::new("mt_hcnn");
    fs::write(f.path("bad.conf"), "colour = blue\n").unwrap();
    let o = run(&["train", "--config", &f.path("bad.conf").display().to_string(), "--checkpoint", "x"], "");
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_dataset_is_a_data_error() {
    let f = Fixture::new("mt_hcnn");
    fs::remove_file(f.path("train.tsv")).unwrap();
    assert_eq!(code(&f.train()), 2);
}

#[test]
fn train_then_eval_prints_metrics() {
    let f = Fixture::new("mt_hcnn");
    let o = run(&["build-vocab", "--config", &f.conf()], "");
    assert_ok(&o);
    assert!(f.path("vocab.txt").exists());
    let o = f.train();
    assert_ok(&o);
    assert_eq!(stdout(&o).lines().count(), 2);
    assert_eq!(fs::read_to_string(f.path("train.log")).unwrap().lines().count(), 2);
    let o = run(&["eval", "--config", &f.conf(), "--checkpoint", &f.checkpoint()], "");
    assert_ok(&o);
    let fields: Vec<f64> = stdout(&o).trim().split('\t').map(|v| v.parse().unwrap()).collect();
    assert_eq!(fields.len(), 4);
    assert!(fields.iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn same_seed_gives_identical_checkpoints_and_seed_flag_changes_them() {
    let f = Fixture::new("transfer");
    assert_ok(&f.train());
    let first = fs::read(f.path("model.ck")).unwrap();
    assert_ok(&f.train());
    assert_eq!(first, fs::read(f.path("model.ck")).unwrap());
    let o = run(&["train", "--config", &f.conf(), "--checkpoint", &f.checkpoint(), "--seed", "9"], "");
    assert_ok(&o);
    assert_ne!(first, fs::read(f.path("model.ck")).unwrap());
}

#[test]
fn bad_checkpoints_are_data_errors() {
    let f = Fixture::new("mt_hcnn");
    assert_ok(&f.train());
    let eval = |conf: &Path| run(&["eval", "--config", &conf.display().to_string(), "--checkpoint", &f.checkpoint()], "");

    let as_transfer = fs::read_to_string(f.path("run.conf")).unwrap().replace("mt_hcnn", "transfer");
    fs::write(f.path("transfer.conf"), as_transfer).unwrap();
    let o = eval(&f.path("transfer.conf"));
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("kind"));

    let mut bytes = fs::read(f.path("model.ck")).unwrap();
    bytes[0] = b'X';
    fs::write(f.path("model.ck"), &bytes).unwrap();
    assert_eq!(code(&eval(&f.path("run.conf"))), 2);
}

#[test]
fn group_size_flag_is_validated_against_the_data() {
    let f = Fixture::new("mt_hcnn");
    let o = run(&["train", "--config", &f.conf(), "--checkpoint", &f.checkpoint(), "--group-size", "3"], "");
    assert_eq!(code(&o), 2);
}

#[test]
fn build_index_reports_stats_and_rejects_duplicates() {
    let f = Fixture::new("mt_hcnn");
    let o = run(&["build-index", "--bank", &f.path("bank.tsv").display().to_string()], "");
    assert_ok(&o);
    assert!(stdout(&o).starts_with("documents\t20\nterms\t"));
    fs::write(f.path("dup.tsv"), "a\tx y\t1\na\ty z\t2\n").unwrap();
    let o = run(&["build-index", "--bank", &f.path("dup.tsv").display().to_string()], "");
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("\"a\""));
}

#[test]
fn rerank_and_serve_speak_json() {
    let f = Fixture::new("mt_hcnn");
    assert_ok(&f.train());
    let o = run(
        &["rerank", "--config", &f.conf(), "--checkpoint", &f.checkpoint(), "--k", "5", "w1 w2", "w3 t1"],
        "",
    );
    assert_ok(&o);
    let v: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
    let ranked = v["ranked"].as_array().unwrap();
    assert!(!ranked.is_empty() && ranked.len() <= 5);
    let scores: Vec<f64> = ranked.iter().map(|r| r["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));

    let input = "{\"turns\":[\"hi\"]}\nnot json\n{\"turns\":[\"w1 w5\"],\"k\":3}\n";
    let o = run(&["serve", "--config", &f.conf(), "--checkpoint", &f.checkpoint()], input);
    assert_ok(&o);
    let lines: Vec<serde_json::Value> = stdout(&o).lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0]["ranked"].is_array());
    assert!(lines[1]["error"].is_string());
    assert!(lines[2]["ranked"].as_array().unwrap().len() <= 3);
}

#[test]
fn gradcheck_passes_on_one_seed() {
    let o = run(&["gradcheck", "--seed", "1"], "");
    assert_ok(&o);
    assert!(stdout(&o).trim_end().ends_with("(tolerance 1e-5)"));
    assert!(stdout(&o).contains("pass"));
}
