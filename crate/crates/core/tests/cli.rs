use std::fs;
use std::path::{Path, PathBuf};

use ractlab::cli::{self, ExperimentConfig, Kind};

const SMALL: &str = r#"
seeds = [1, 2]
eta = 0.3

[data]
d = 8
k = 8
num_classes = 4
n = 80
teacher_rank = 2
eval_fraction = 0.25

[train]
epochs = 3

[ract]
r_low = 1
r_high = 4

[ract.phase1]
epochs = 4

[ract.phase4_train]
epochs = 3

[sweep]
ranks = [1, 2, 4]
noise_rates = [0.0, 0.3]
taus = [0.1, 0.3]
pairs = [[1, 4], [2, 4]]
window = 2
"#;

fn mnist_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn small_mnist() -> String {
    let dir = mnist_dir();
    format!(
        "{SMALL}\n[mnist]\nimages = {:?}\nlabels = {:?}\nlimit = 200\n",
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
    )
}

fn config_for(kind: Kind) -> String {
    match kind {
        Kind::MnistRact => small_mnist(),
        _ => SMALL.to_string(),
    }
}

fn write_config(dir: &Path, text: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    fs::write(&path, text).unwrap();
    path
}

fn run_kind(kind: Kind, out: &Path) -> i32 {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &config_for(kind));
    cli::main_with_args([
        "ractlab".into(),
        kind.name().into(),
        "--config".into(),
        cfg.into_os_string(),
        "--out".into(),
        out.as_os_str().to_owned(),
    ])
}

fn header(path: &Path) -> String {
    fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
}

const ALL: [Kind; 7] = [
    Kind::Memorize,
    Kind::Temporal,
    Kind::Ranksweep,
    Kind::Ract,
    Kind::Threshold,
    Kind::Rankgap,
    Kind::MnistRact,
];

#[test]
fn every_kind_writes_its_schema() {
    let expected = [
        (Kind::Memorize, "memorization_grid.csv", "rank,noise_rate,seed,final_train_acc"),
        (Kind::Temporal, "temporal.csv", "epoch,seed,clean_loss,noisy_loss,train_acc,detect_f1"),
        (Kind::Ranksweep, "ranksweep.csv", "rank,noise_rate,seed,eval_err,bias_proxy"),
        (Kind::Ract, "ract_summary.csv", "seed,accuracy,precision,recall,f1,n_flagged,tau,r_low,r_high"),
        (Kind::Threshold, "threshold.csv", "tau,precision,recall,f1"),
        (Kind::Rankgap, "rankgap.csv", "r_low,r_high,seed,accuracy,f1"),
        (Kind::MnistRact, "ract_summary.csv", "seed,accuracy,precision,recall,f1,n_flagged,tau,r_low,r_high"),
    ];
    for (kind, file, head) in expected {
        let out = tempfile::tempdir().unwrap();
        assert_eq!(run_kind(kind, out.path()), 0, "{}", kind.name());
        assert_eq!(header(&out.path().join(file)), head, "{}", kind.name());
        assert_eq!(
            header(&out.path().join("summary.csv")),
            "metric,group,mean,std,count"
        );
        let manifest: toml::Table =
            toml::from_str(&fs::read_to_string(out.path().join("manifest.toml")).unwrap()).unwrap();
        assert_eq!(manifest["kind"].as_str(), Some(kind.name()));
        let echoed: ExperimentConfig = manifest["config"].clone().try_into().unwrap();
        assert_eq!(echoed.seeds, vec![1, 2]);
    }
}

#[test]
fn row_counts_follow_the_grid() {
    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_kind(Kind::Memorize, out.path()), 0);
    let text = fs::read_to_string(out.path().join("memorization_grid.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 2);

    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_kind(Kind::Threshold, out.path()), 0);
    let text = fs::read_to_string(out.path().join("threshold.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 2);

    let out = tempfile::tempdir().unwrap();
    assert_eq!(run_kind(Kind::Temporal, out.path()), 0);
    let mut rdr = csv::Reader::from_path(out.path().join("temporal.csv")).unwrap();
    let epochs: Vec<u64> = rdr
        .records()
        .map(|r| r.unwrap()[0].parse().unwrap())
        .collect();
    assert_eq!(epochs, [0, 1, 2, 3, 4, 0, 1, 2, 3, 4]);
}

#[test]
fn reruns_are_byte_identical() {
    for kind in ALL {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        assert_eq!(run_kind(kind, a.path()), 0);
        assert_eq!(run_kind(kind, b.path()), 0);
        for file in [cli::run::table_name(kind), "summary.csv"] {
            assert_eq!(
                fs::read(a.path().join(file)).unwrap(),
                fs::read(b.path().join(file)).unwrap(),
                "{} {file}",
                kind.name()
            );
        }
    }
}

#[test]
fn jobs_do_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let mut outputs = Vec::new();
    for jobs in ["1", "3"] {
        let out = tmp.path().join(format!("out{jobs}"));
        let code = cli::main_with_args([
            "ractlab".into(),
            "memorize".into(),
            "--config".into(),
            cfg.clone().into_os_string(),
            "--out".into(),
            out.clone().into_os_string(),
            "--jobs".into(),
            std::ffi::OsString::from(jobs),
        ]);
        assert_eq!(code, 0);
        outputs.push(fs::read(out.join("memorization_grid.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn seeds_flag_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = tmp.path().join("out");
    let code = cli::main_with_args([
        "ractlab".into(),
        "ract".into(),
        "--config".into(),
        cfg.into_os_string(),
        "--out".into(),
        out.clone().into_os_string(),
        "--seeds".into(),
        std::ffi::OsString::from("7,8,9"),
    ]);
    assert_eq!(code, 0);
    let mut rdr = csv::Reader::from_path(out.join("ract_summary.csv")).unwrap();
    let seeds: Vec<u64> = rdr.records().map(|r| r.unwrap()[0].parse().unwrap()).collect();
    assert_eq!(seeds, [7, 8, 9]);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let call = |cfg_text: &str, kind: &str| {
        let cfg = write_config(tmp.path(), cfg_text);
        cli::main_with_args([
            "ractlab".into(),
            kind.into(),
            "--config".into(),
            cfg.into_os_string(),
            "--out".into(),
            out.clone().into_os_string(),
        ])
    };
    // Unknown key, bad value, wrong kind.
    assert_eq!(call("[train]\nlearning_rte = 0.1\n", "ract"), 2);
    assert_eq!(call("eta = 1.5\n", "ract"), 2);
    assert_eq!(call("kind = \"memorize\"\n", "ract"), 2);
    assert_eq!(call(SMALL, "mnist-ract"), 2);
    // Unknown kind and missing config are argument errors.
    assert_eq!(cli::main_with_args(["ractlab", "nope", "--config", "x.toml"]), 2);
    assert_eq!(cli::main_with_args(["ractlab", "ract"]), 2);
    // Unreadable config and bad data files are I/O or format errors.
    assert_eq!(
        cli::main_with_args(["ractlab", "ract", "--config", "/nonexistent/exp.toml"]),
        3
    );
    let bad = format!(
        "{SMALL}\n[mnist]\nimages = {:?}\nlabels = {:?}\n",
        tmp.path().join("exp.toml"),
        tmp.path().join("exp.toml")
    );
    assert_eq!(call(&bad, "mnist-ract"), 3);
    // Diverging training is a numeric error.
    let diverge = SMALL.replace("[train]\nepochs = 3", "[train]\nepochs = 3\nlearning_rate = 1e300\nclip_norm = 1e300");
    assert_eq!(call(&diverge, "memorize"), 4);
}

#[test]
fn csv_round_trips_through_a_reader() {
    use ractlab::cli::table::{emit_csv, Table};
    let mut t = Table::new(&["i", "x", "y", "label"]);
    let mut rng = ractlab::numerics::Rng::new(5);
    let mut expected = Vec::new();
    for i in 0..1000u64 {
        let x = rng.standard_normal() * 10f64.powi((i % 13) as i32 - 6);
        let y = if i % 7 == 0 { None } else { Some(rng.next_f64()) };
        t.push(vec![i.into(), x.into(), y.into(), "ok".into()]).unwrap();
        expected.push((i, x, y));
    }
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("t.csv");
    emit_csv(&t, &path).unwrap();
    let mut rdr = csv::Reader::from_path(&path).unwrap();
    assert_eq!(rdr.headers().unwrap(), vec!["i", "x", "y", "label"]);
    for (rec, (i, x, y)) in rdr.records().zip(&expected) {
        let rec = rec.unwrap();
        assert_eq!(rec[0].parse::<u64>().unwrap(), *i);
        assert_eq!(rec[1].parse::<f64>().unwrap().to_bits(), x.to_bits());
        match y {
            Some(v) => assert_eq!(rec[2].parse::<f64>().unwrap().to_bits(), v.to_bits()),
            None => assert_eq!(&rec[2], ""),
        }
    }
    assert_eq!(rdr.records().count(), 0);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap();
            let kind = cfg.kind.expect("shipped configs name their kind");
            cfg.validate_for(kind).unwrap();
            seen += 1;
        }
    }
    assert!(seen >= 6);
}
