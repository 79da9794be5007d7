// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;
use std::path::PathBuf;

use svtrace::ioi::{generate_dataset, write_jsonl, IoiAssets, IoiPrompt, Pattern, ReferenceHeads, Role};
use svtrace::model::HeadId;
use svtrace::tokenizer::BpeVocab;

fn vocab() -> BpeVocab {
    let d = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data");
    BpeVocab::load(d.join("vocab.json"), d.join("merges.txt")).unwrap()
}

#[test]
fn example_sentence_and_roles() {
    let v = vocab();
    let assets = IoiAssets::bundled().unwrap();
    let t = &assets.templates[0];
    let (text, ids, roles) = t
        .instantiate(&v, Pattern::Abba, "Mary", "John", "store", "drink")
        .unwrap();
    assert_eq!(text, "When Mary and John went to the store, John gave a drink to");
    assert_eq!(ids.len(), 14);
    assert_eq!((roles.io, roles.s1, roles.s2, roles.end), (1, 3, 9, 13));
    assert_eq!(roles.role_of(10), Role::Verb);
    assert_eq!(roles.role_of(13), Role::End);
    assert_eq!(roles.role_of(4), Role::S1Next);
    assert_eq!(ids[roles.io], v.single_token(" Mary").unwrap());
    assert_eq!(ids[roles.s2], v.single_token(" John").unwrap());
    let (text, _, roles) = t
        .instantiate(&v, Pattern::Baba, "Mary", "John", "store", "drink")
        .unwrap();
    assert_eq!(text, "When John and Mary went to the store, John gave a drink to");
    assert!(roles.s1 < roles.io && roles.io < roles.s2);
}

fn check(p: &IoiPrompt, v: &BpeVocab) {
    let n = p.ids.len();
    assert!((14..=20).contains(&n), "{} has {n} tokens", p.text);
    let r = p.roles;
    assert_eq!(r.end, n - 1);
    assert!(r.io < n && r.s1 < n && r.s2 < n && r.verb < n && r.prep < n);
    assert_ne!(p.io_name, p.s_name);
    assert_eq!(p.ids[r.io], p.io_id);
    assert_eq!(p.ids[r.s1], p.s_id);
    assert_eq!(p.ids[r.s2], p.s_id);
    assert_eq!(v.encode(&format!(" {}", p.io_name)), vec![p.io_id]);
    assert_eq!(v.encode(&format!(" {}", p.s_name)), vec![p.s_id]);
    match p.pattern {
        Pattern::Abba => assert!(r.io < r.s1),
        Pattern::Baba => assert!(r.s1 < r.io),
    }
    assert!(r.s1 < r.s2 && r.s2 < r.end);
}

#[test]
fn dataset_invariants() {
    let v = vocab();
    let assets = IoiAssets::bundled().unwrap();
    assert_eq!(assets.templates.len(), 15);
    assert!(assets.names.len() >= 106);
    let ds = generate_dataset(&v, &assets, 0, 256).unwrap();
    assert_eq!(ds.len(), 256);
    for p in &ds {
        check(p, &v);
    }
    let names: BTreeSet<&str> = ds
        .iter()
        .flat_map(|p| [p.io_name.as_str(), p.s_name.as_str()])
        .collect();
    assert!(names.len() >= 100, "{} names", names.len());
    assert!(ds.iter().any(|p| p.pattern == Pattern::Abba));
    assert!(ds.iter().any(|p| p.pattern == Pattern::Baba));
    let templates: BTreeSet<usize> = ds.iter().map(|p| p.template_id).collect();
    assert_eq!(templates.len(), 15);
}

#[test]
fn dataset_is_deterministic() {
    let v = vocab();
    let assets = IoiAssets::bundled().unwrap();
    let a = generate_dataset(&v, &assets, 42, 64).unwrap();
    let b = generate_dataset(&v, &assets, 42, 64).unwrap();
    let c = generate_dataset(&v, &assets, 43, 64).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    // a shorter run is a prefix of a longer one
    assert_eq!(&generate_dataset(&v, &assets, 42, 10).unwrap()[..], &a[..10]);
}

#[test]
fn jsonl_export_round_trips() {
    let v = vocab();
    let ds = generate_dataset(&v, &IoiAssets::bundled().unwrap(), 1, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ioi.jsonl");
    write_jsonl(&ds, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let back: Vec<IoiPrompt> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, ds);
    assert!(text.contains("\"pattern\":\"ABBA\"") || text.contains("\"pattern\":\"BABA\""));
}

#[test]
fn multi_token_name_is_rejected() {
    let v = vocab();
    let b = IoiAssets::bundled().unwrap();
    let names = "Mary\nJohn\nAnastasiaWellington\n";
    let a = IoiAssets::from_strs(
        svtrace::ioi::TEMPLATES,
        names,
        svtrace::ioi::PLACES,
        svtrace::ioi::OBJECTS,
    )
    .unwrap();
    assert!(generate_dataset(&v, &a, 0, 4).is_err());
    assert!(b.validate(&v).is_ok());
}

#[test]
fn reference_heads_are_the_sixteen_reachable() {
    let r = ReferenceHeads::bundled().all();
    assert_eq!(r.len(), 16);
    for h in [
        HeadId::new(9, 9),
        HeadId::new(9, 6),
        HeadId::new(10, 0),
        HeadId::new(8, 6),
    ] {
        assert!(r.contains(&h));
    }
}
