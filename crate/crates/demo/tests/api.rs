use reportgen_demo::{conditions, label_impression, nucleus, Demo};
use serde_json::Value;

fn parse(s: &str) -> Value {
    serde_json::from_str(s).unwrap()
}

#[test]
fn nucleus_keeps_the_top_mass() {
    let logits: Vec<String> = [0.5f64, 0.3, 0.15, 0.05]
        .iter()
        .map(|p| p.ln().to_string())
        .collect();
    let v = parse(&nucleus(&logits.join(","), 1.0, 0.75).unwrap());
    let kept = v.as_array().unwrap();
    assert_eq!(kept.len(), 2);
    assert_eq!(kept[0]["token"], 0);
    assert!((kept[0]["prob"].as_f64().unwrap() - 0.625).abs() < 1e-12);
    assert!(nucleus("1, x", 1.0, 0.9).is_err());
    assert!(nucleus("1 2", 0.0, 0.9).is_err());
    assert!(nucleus("", 1.0, 0.9).is_err());
}

#[test]
fn labeler_scores_against_gold() {
    let v = parse(&label_impression("moderate cardiomegaly. no edema.", "Cardiomegaly").unwrap());
    assert_eq!(v["labels"], serde_json::json!(["Cardiomegaly"]));
    assert_eq!(v["reward"], 1.0);
    let v = parse(&label_impression("no acute process.", "").unwrap());
    assert_eq!(v["gold"], serde_json::json!(["No Finding"]));
    assert_eq!(v["reward"], 1.0);
    let v = parse(&label_impression("edema.", "no finding").unwrap());
    assert_eq!(v["reward"], 0.0);
    assert!(label_impression("x", "Headache").is_err());
    assert_eq!(parse(&conditions()).as_array().unwrap().len(), 14);
}

#[test]
fn forced_generation_has_the_requested_structure() {
    let demo = Demo::new(5, 0).unwrap();
    assert!(demo.studies() > 0);
    let s = parse(&demo.study(0).unwrap());
    assert!(s["id"].as_str().unwrap().starts_with("test-"));
    for seed in 0..20 {
        let g = parse(
            &demo
                .generate(seed as usize % demo.studies(), 3, true, 1.0, 0.8, 0.9, seed)
                .unwrap(),
        );
        assert!(g["structure"].is_null(), "{g}");
        let nexts = g["tokens"]
            .as_array()
            .unwrap()
            .iter()
            .filter(|t| *t == "<next>")
            .count();
        assert!(nexts >= 3, "{g}");
        let r = g["reward"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&r));
    }
    let a = demo.generate(1, 2, true, 1.0, 0.8, 0.9, 9).unwrap();
    assert_eq!(a, demo.generate(1, 2, true, 1.0, 0.8, 0.9, 9).unwrap());
    assert!(demo.generate(99, 2, true, 1.0, 0.8, 0.9, 9).is_err());
}
