use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = "\
num_users = 30
num_websites = 120
num_campaigns = 60
avg_user_visits = 40.0
avg_ads_per_site = 6.0
favourite_sites = 10.0
epsilon = 0.01
delta = 0.01
capacity_hint = 2000
ad_space = 16384
oprf_key_bits = 256
";

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_adcensus"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

struct Dir(tempfile::TempDir);

impl Dir {
    fn new() -> Self {
        let d = Dir(tempfile::tempdir().unwrap());
        fs::write(d.path("small.toml"), SMALL).unwrap();
        d
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap()
}

#[test]
fn simulate_writes_csv_and_prints_config() {
    let d = Dir::new();
    let out = run(&["simulate", "--config", &d.s("small.toml"), "--out", &d.s("a.csv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("# resolved config"));
    assert!(stderr.contains("num_users = 30"));
    let csv = read(&d.path("a.csv"));
    let mut lines = csv.lines();
    assert_eq!(
        lines.next().unwrap(),
        "parameter,seed,fn_rate,fp_rate,insufficient_fraction,users_th_clear,users_th_cms"
    );
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 7);
    assert_eq!(row[1], "1");
    assert!(row[2].parse::<f64>().is_ok() && row[3].parse::<f64>().is_ok());
    assert_eq!(row[6], "");
}

#[test]
fn reruns_are_byte_identical() {
    let d = Dir::new();
    for name in ["a.csv", "b.csv"] {
        let out = run(&[
            "sweep", "--config", &d.s("small.toml"), "--param", "num_users", "--values", "10,20", "--seeds", "1..2",
            "--privacy", "on", "--out", &d.s(name),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let a = fs::read(d.path("a.csv")).unwrap();
    assert_eq!(a, fs::read(d.path("b.csv")).unwrap());
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().count(), 5);
    assert!(text.lines().nth(1).unwrap().split(',').nth(6).unwrap().parse::<f64>().is_ok());
}

#[test]
fn cap_sweep_row_count() {
    let d = Dir::new();
    let out = run(&[
        "sweep", "--config", &d.s("small.toml"), "--param", "frequency_cap", "--values", "1..15", "--seeds", "1,2,3",
        "--mode", "mean-median", "--out", &d.s("s.csv"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(&d.path("s.csv"));
    assert_eq!(csv.lines().count(), 1 + 15 * 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("frequency_cap=1,1,1.000000,"));
}

#[test]
fn config_errors_exit_2_with_position() {
    let d = Dir::new();
    fs::write(d.path("bad.toml"), "num_users = 5\nnum_websites = \"many\"\n").unwrap();
    let out = run(&["simulate", "--config", &d.s("bad.toml")]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 2, column"), "{err}");
    fs::write(d.path("bad.toml"), "num_users = 0\n").unwrap();
    assert_eq!(run(&["simulate", "--config", &d.s("bad.toml")]).status.code(), Some(2));
    let out = run(&["simulate", "--config", &d.s("small.toml"), "--drop", "31"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&["simulate", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["teleport"]).status.code(), Some(1));
    assert_eq!(run(&["simulate", "--mode", "median"]).status.code(), Some(1));
    assert_eq!(run(&["sweep", "--param", "zipf", "--values", "1"]).status.code(), Some(1));
    assert_eq!(run(&["sweep", "--param", "frequency_cap", "--values", "9..2"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_3() {
    let out = run(&["simulate", "--config", "/nonexistent/c.toml"]);
    assert_eq!(out.status.code(), Some(3));
    let d = Dir::new();
    let out = run(&["simulate", "--config", &d.s("small.toml"), "--out", "/nonexistent/dir/x.csv"]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn round_dumps_transcript_and_handles_drops() {
    let d = Dir::new();
    let out = run(&["round", "--config", &d.s("small.toml"), "--drop", "2,5", "--out", &d.s("t.tsv")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing [2, 5]"), "{err}");
    let dump = read(&d.path("t.tsv"));
    assert!(dump.lines().any(|l| l.contains("MissingList")));
    assert_eq!(dump.lines().filter(|l| l.contains("\tAdjustedReport\t")).count(), 28);
}

#[test]
fn classify_replay_fixture() {
    let d = Dir::new();
    fs::write(
        d.path("obs.txt"),
        "10 a.com https://ads.example/t\n20 b.com https://ads.example/t\n30 c.com https://ads.example/t\n\
         40 d.com https://ads.example/t\n50 e.com https://ads.example/t\n60 a.com https://ads.example/s\n",
    )
    .unwrap();
    fs::write(d.path("dist.txt"), "users_th 4\n1 https://ads.example/t\n9 https://ads.example/s\n").unwrap();
    let out = run(&["classify-replay", "--observations", &d.s("obs.txt"), "--distribution", &d.s("dist.txt")]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("https://ads.example/t\t5\t3\t1\t4\ttargeted\n"), "{text}");
    assert!(text.contains("https://ads.example/s\t1\t3\t9\t4\tnon-targeted\n"), "{text}");

    fs::write(d.path("dist.txt"), "users_th 4\noops https://ads.example/t\n").unwrap();
    let out = run(&["classify-replay", "--observations", &d.s("obs.txt"), "--distribution", &d.s("dist.txt")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn bench_reports_exact_sizes() {
    let out = run(&["bench", "--users", "3", "--oprf-bits", "512", "--oprf-exchanges", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("10000\t17\t2719\t184892"));
    assert!(text.contains("50000\t18\t2719\t195768"));
    assert!(text.contains("100000\t19\t2719\t206644"));
    assert!(text.contains("request_bytes\t64\nresponse_bytes\t64"));
}
