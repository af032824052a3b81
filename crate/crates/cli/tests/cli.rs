use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn tabmtr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tabmtr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
kind = "unimodal"
data = ["blobs.csv"]
label_fraction = 0.2
seeds = [0, 1]
out_dir = "results"

[model]
token_dim = 8
n_layers = 1
n_heads = 2
projection_dims = [8, 8]

[train]
batch_size = 32
pretrain_epochs = 2
finetune_max_epochs = 3
patience = 2
"#;

fn synth_blobs(dir: &Path) {
    let o = tabmtr(
        &["synth", "--n", "120", "--features", "5", "--classes", "3", "--separation", "3", "--out", "."],
        dir,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn synth_writes_one_or_two_tables() {
    let dir = tempfile::tempdir().unwrap();
    synth_blobs(dir.path());
    let text = fs::read_to_string(dir.path().join("blobs.csv")).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.contains("label"));
    assert_eq!(lines.count(), 120);

    let o = tabmtr(
        &["synth", "--kind", "bimodal-blobs", "--n", "60", "--features", "4", "--classes", "2", "--out", "two"],
        dir.path(),
    );
    assert!(o.status.success());
    let a = fs::read_to_string(dir.path().join("two/view_a.csv")).unwrap();
    let b = fs::read_to_string(dir.path().join("two/view_b.csv")).unwrap();
    let ids = |t: &str| t.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(ids(&a), ids(&b));
}

#[test]
fn run_then_report() {
    let dir = tempfile::tempdir().unwrap();
    synth_blobs(dir.path());
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = tabmtr(&["run", "tiny.toml"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("ftt+mtr"));

    let results = fs::read_to_string(dir.path().join("results/results.csv")).unwrap();
    // header plus two models over two seeds
    assert_eq!(results.lines().count(), 5);
    assert!(dir.path().join("results/summary.csv").is_file());

    fs::remove_file(dir.path().join("results/summary.csv")).unwrap();
    let o = tabmtr(&["report", "results"], dir.path());
    assert!(o.status.success());
    assert!(dir.path().join("results/summary.csv").is_file());
    assert_eq!(stdout(&o).lines().count(), 2);
}

#[test]
fn seed_list_and_out_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    synth_blobs(dir.path());
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = tabmtr(&["run", "tiny.toml", "--seed-list", "7", "--out", "elsewhere", "--precision", "f64"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let results = fs::read_to_string(dir.path().join("elsewhere/results.csv")).unwrap();
    assert_eq!(results.lines().count(), 3);
    assert!(results.lines().skip(1).all(|l| l.split(',').nth(2) == Some("7")));
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    synth_blobs(dir.path());
    fs::write(dir.path().join("typo.toml"), format!("{TINY}\nlabel_fracton = 0.5\n")).unwrap();
    assert_eq!(tabmtr(&["run", "typo.toml"], dir.path()).status.code(), Some(2));

    fs::write(dir.path().join("nofile.toml"), TINY.replace("blobs.csv", "absent.csv")).unwrap();
    assert_eq!(tabmtr(&["run", "nofile.toml"], dir.path()).status.code(), Some(2));

    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    assert_eq!(tabmtr(&["run", "tiny.toml", "--threads", "0"], dir.path()).status.code(), Some(2));
    assert_eq!(tabmtr(&["report", "nowhere"], dir.path()).status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("blobs.csv"), "id,f0,label\na,1.0,x\nb,oops,y\n").unwrap();
    fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
    let o = tabmtr(&["run", "tiny.toml"], dir.path());
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}
