use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
corpus.n_train = 24
corpus.n_val = 8
corpus.n_test = 6
model.d_model = 16
model.heads = 2
model.policy_layers = 1
model.value_layers = 1
model.max_len = 96
model.ffn_mult = 2
pretrain.epochs = 2
ppo.iterations = 2
ppo.group = 2
ppo.batch_studies = 1
ppo.grad_accum = 2
ppo.val_studies = 4
decode.k = 3
decode.n = 2
decode.max_len = 96
";

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reportgen"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn gen_data_contract() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    ok(&["gen-data", "--out", s(&a)]);
    for f in [
        "train.jsonl",
        "val.jsonl",
        "test.jsonl",
        "vocab.txt",
        "config.txt",
    ] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert_eq!(
        std::fs::read_to_string(a.join("train.jsonl"))
            .unwrap()
            .lines()
            .count(),
        2000
    );
    ok(&["gen-data", "--out", s(&b)]);
    ok(&["gen-data", "--out", s(&c), "--seed", "99"]);
    assert_eq!(read(&a.join("train.jsonl")), read(&b.join("train.jsonl")));
    assert_eq!(read(&a.join("vocab.txt")), read(&b.join("vocab.txt")));
    assert_ne!(read(&a.join("train.jsonl")), read(&c.join("train.jsonl")));

    let again = run(&["gen-data", "--out", s(&a)]);
    assert!(!again.status.success());
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    ok(&["gen-data", "--out", s(&a), "--force"]);
}

#[test]
fn ppo_train_without_init_names_the_stage_order() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["ppo-train", "--out", s(&dir.path().join("rl"))]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("gen-data") && err.contains("pretrain") && err.contains("ppo-train"),
        "{err}"
    );
    let o = run(&[
        "ppo-train",
        "--init",
        s(dir.path()),
        "--out",
        s(&dir.path().join("rl")),
    ]);
    assert!(!o.status.success());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.txt");
    std::fs::write(&cfg, "decode.colour = 3\n").unwrap();
    let o = run(&[
        "gen-data",
        "--config",
        s(&cfg),
        "--out",
        s(&dir.path().join("d")),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("decode.colour"));
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.txt");
    std::fs::write(&cfg, TINY).unwrap();
    let (data, sl, rl) = (root.join("data"), root.join("sl"), root.join("rl"));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    ok(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&sl),
    ]);
    let log = std::fs::read_to_string(sl.join("pretrain_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3, "{log}");
    assert!(std::fs::read_to_string(sl.join("config.txt"))
        .unwrap()
        .contains("data = "));

    // rerun is byte-identical
    let sl2 = root.join("sl2");
    ok(&[
        "pretrain",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--out",
        s(&sl2),
    ]);
    assert_eq!(
        read(&sl.join("pretrain_log.csv")),
        read(&sl2.join("pretrain_log.csv"))
    );
    assert_eq!(read(&sl.join("model.ckpt")), read(&sl2.join("model.ckpt")));

    // data path travels with the init checkpoint
    ok(&["ppo-train", "--init", s(&sl), "--out", s(&rl)]);
    let plog = std::fs::read_to_string(rl.join("ppo_log.csv")).unwrap();
    assert_eq!(plog.lines().count(), 3, "{plog}");

    let one = ok(&[
        "generate",
        "--checkpoint",
        s(&rl),
        "--study",
        "test-00000",
        "--n",
        "1",
    ]);
    assert!(
        one.contains("impression:") && one.contains("candidate 0: score -"),
        "{one}"
    );
    assert!(!one.contains("candidate 1"));
    let bon = ok(&[
        "generate",
        "--checkpoint",
        s(&rl),
        "--study",
        "test-00000",
        "--n",
        "3",
        "--k",
        "2",
        "--t-find",
        "1.1",
        "--t-imp",
        "0.7",
        "--p",
        "0.95",
    ]);
    assert!(bon.contains("candidate 2: score "), "{bon}");
    assert!(
        !run(&["generate", "--checkpoint", s(&rl), "--study", "nope"])
            .status
            .success()
    );

    let ev = root.join("ev");
    let csv = ok(&["evaluate", "--checkpoint", s(&rl), "--out", s(&ev)]);
    assert!(csv.starts_with("section,metric,value\n"));
    assert_eq!(read(&ev.join("metrics.csv")), csv.as_bytes());
    let pc = std::fs::read_to_string(ev.join("per_class_impression.csv")).unwrap();
    assert_eq!(pc.lines().count(), 15);
    assert!(pc.starts_with("condition,P,R,F1\nEnlarged Cardiomediastinum,"));
    let ev2 = root.join("ev2");
    ok(&[
        "evaluate",
        "--checkpoint",
        s(&rl),
        "--data",
        s(&data),
        "--config",
        s(&cfg),
        "--out",
        s(&ev2),
    ]);
    assert_eq!(
        read(&ev.join("metrics.csv")),
        read(&ev2.join("metrics.csv"))
    );

    let k = ok(&[
        "sweep",
        "--checkpoint",
        s(&rl),
        "--axis",
        "k",
        "--values",
        "2,6,10",
    ]);
    assert_eq!(k.lines().count(), 4, "{k}");
    assert!(k.starts_with("k,findings_f1,impression_f1\n2,"));
    let t = ok(&["sweep", "--checkpoint", s(&rl), "--axis", "temperature"]);
    let rows: Vec<String> = t
        .lines()
        .skip(1)
        .map(|l| l.splitn(3, ',').take(2).collect::<Vec<_>>().join(","))
        .collect();
    assert_eq!(rows, vec!["1.2,0.8", "1,1", "1,0.8", "1,0.5"]);
    let bad = run(&[
        "sweep",
        "--checkpoint",
        s(&rl),
        "--axis",
        "beam",
        "--values",
        "1",
    ]);
    assert!(!bad.status.success());

    let ab = ok(&["ablate", "--sl", s(&sl), "--rl", s(&rl)]);
    let names: Vec<&str> = ab
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(names, vec!["SL", "+RL", "+FG", "+BoN"]);
}
