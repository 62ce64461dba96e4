use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use concept_atlas::hierarchy::{extract_hierarchy, import_hierarchy, ExtractionConfig};
use concept_atlas::knn::{exact_knn, NeighborGraph};
use concept_atlas::metrics::{alignment_scores, case_variant_cohesion, precision_report, LabelSet};
use concept_atlas::store::{load_embeddings, save_embeddings, save_embeddings_as, shared_vocab, EmbeddingFormat};
use concept_atlas::{EmbeddingSpace, TokenNormalization};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_concept-atlas"));
    c.env_remove("CONCEPT_ATLAS_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Three tight groups on orthogonal axes with case-variant token names.
fn blobs(n_per: usize) -> EmbeddingSpace {
    let words = ["alpha", "beta", "gamma"];
    let mut tokens = Vec::new();
    let mut rows = Vec::new();
    for (g, w) in words.iter().enumerate() {
        for i in 0..n_per {
            tokens.push(if i % 2 == 0 { format!("{w}{}", i / 2) } else { format!("{}{}", w.to_uppercase(), i / 2) });
            let mut r = vec![0.05f32; 6];
            r[g] = 1.0;
            r[3 + (i % 3)] += 0.01 * i as f32;
            rows.push(r);
        }
    }
    EmbeddingSpace::from_rows(tokens, 6, &rows).unwrap()
}

fn write_space(dir: &Path, name: &str, space: &EmbeddingSpace) -> PathBuf {
    let p = dir.join(name);
    save_embeddings(space, &p).unwrap();
    p
}

#[test]
fn extract_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let space = blobs(20);
    let input = write_space(dir.path(), "a.emb1", &space);
    let out = dir.path().join("h.json");
    let o = run(&["extract", "--in", s(&input), "--k", "6", "--knn", "exact", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let from_cli = import_hierarchy(&out).unwrap();
    let direct = extract_hierarchy(&space, &ExtractionConfig::exact(vec![6])).unwrap();
    assert_eq!(from_cli, direct);
    assert!(from_cli.root.children.len() >= 3);
    for child in &from_cli.root.children {
        let group = child.members[0] / 20;
        assert!(child.members.iter().all(|m| m / 20 == group), "{} spans groups", child.name);
    }
}

#[test]
fn extract_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let input = write_space(dir.path(), "a.emb1", &blobs(30));
    let mut outputs = Vec::new();
    for threads in ["1", "4"] {
        let out = dir.path().join(format!("h{threads}.json"));
        let o = bin()
            .args(["extract", "--in", s(&input), "--k", "12,6", "--seed", "3", "--out", s(&out)])
            .env("CONCEPT_ATLAS_THREADS", threads)
            .output()
            .unwrap();
        assert!(o.status.success());
        outputs.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["frobnicate"][..], &["extract", "--bogus"], &["extract"], &["align", "--a", "x"]] {
        let o = run(args);
        assert_eq!(o.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"), "{args:?}");
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.emb1");
    std::fs::write(&bad, b"NOPE").unwrap();
    let out = dir.path().join("h.json");
    let o = run(&["extract", "--in", s(&bad), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists());
    let o = run(&["extract", "--in", s(&dir.path().join("missing.emb1")), "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let input = write_space(dir.path(), "a.emb1", &blobs(5));
    let o = run(&["knn-cache", "--in", s(&input), "--k", "15", "--out", s(&dir.path().join("g.knn"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn align_csv_has_one_row_per_k() {
    let dir = tempfile::tempdir().unwrap();
    let a = blobs(10);
    let b = a.with_rows_replaced(&[(0, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0])]).unwrap();
    let pa = write_space(dir.path(), "t5.emb1", &a);
    let pb = write_space(dir.path(), "llama.emb1", &b);
    let o = run(&["align", "--a", s(&pa), "--b", s(&pb), "--k", "3,5,10", "--norm", "strip-markers"]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "model_a,model_b,k,score,support");
    assert_eq!(lines.len(), 4);
    let pairs = shared_vocab(&a, &b, &TokenNormalization::strip_markers());
    let direct = alignment_scores(&a, &b, &pairs, &[3, 5, 10]).unwrap();
    for (line, r) in lines[1..].iter().zip(direct) {
        assert_eq!(*line, format!("t5,llama,{},{:.6},{}", r.k, r.score, r.support));
    }
}

#[test]
fn edit_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let space = blobs(20);
    let input = write_space(dir.path(), "a.emb1", &space);
    let h = dir.path().join("h.json");
    assert!(run(&["extract", "--in", s(&input), "--k", "6", "--knn", "exact", "--out", s(&h)]).status.success());
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, r#"{"communities": ["0_0"], "extra_rows": [59], "mode": "gaussian-resample", "scale": 0.7, "seed": 42}"#).unwrap();
    let mut bytes = Vec::new();
    for name in ["b1.emb1", "b2.emb1"] {
        let out = dir.path().join(name);
        let o = run(&["edit", "--in", s(&input), "--spec", s(&spec), "--hierarchy", s(&h), "--out", s(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        bytes.push(std::fs::read(&out).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let edited = load_embeddings(dir.path().join("b1.emb1"), EmbeddingFormat::Emb1).unwrap();
    let hier = import_hierarchy(&h).unwrap();
    let targets = &hier.find("0_0").unwrap().members;
    let changed = (0..space.len()).filter(|&r| edited.row(r) != space.row(r)).count();
    assert!(changed > 0);
    for r in 0..space.len() {
        if !targets.contains(&r) && r != 59 {
            assert_eq!(edited.row(r), space.row(r));
        }
    }
    let o = run(&["edit", "--in", s(&input), "--spec", s(&spec), "--out", s(&dir.path().join("b3.emb1"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn convert_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let space = blobs(4);
    let txt = dir.path().join("a.txt");
    save_embeddings_as(&space, &txt, EmbeddingFormat::Word2VecText).unwrap();
    let bin_path = dir.path().join("a.emb1");
    let o = run(&["convert", "--in", s(&txt), "--from", "word2vec", "--to", "emb1", "--out", s(&bin_path)]);
    assert!(o.status.success());
    assert_eq!(load_embeddings(&bin_path, EmbeddingFormat::Emb1).unwrap(), space);
}

#[test]
fn knn_cache_matches_exact() {
    let dir = tempfile::tempdir().unwrap();
    let space = blobs(10);
    let input = write_space(dir.path(), "a.emb1", &space);
    let out = dir.path().join("g.knn");
    let o = run(&["knn-cache", "--in", s(&input), "--k", "4", "--knn", "exact", "--out", s(&out)]);
    assert!(o.status.success());
    assert_eq!(NeighborGraph::load(&out).unwrap(), exact_knn(&space, 4).unwrap());
}

#[test]
fn topo_precision_cohesion() {
    let dir = tempfile::tempdir().unwrap();
    let rows: Vec<Vec<f32>> = (0..12).map(|i| vec![(0.1 * i as f32).cos(), (0.1 * i as f32).sin()]).collect();
    let names: Vec<String> = (0..12).map(|i| format!("\u{2581}{i}")).collect();
    let numbers = EmbeddingSpace::from_rows(names, 2, &rows).unwrap();
    let input = write_space(dir.path(), "n.emb1", &numbers);
    let o = run(&["topo", "--in", s(&input), "--k", "3", "--max-value", "9"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(String::from_utf8(o.stdout).unwrap(), "model,k,score,evaluated,support\nn,3,1.000000,8,10\n");

    let space = blobs(20);
    let input = write_space(dir.path(), "a.emb1", &space);
    let h = dir.path().join("h.json");
    assert!(run(&["extract", "--in", s(&input), "--k", "6", "--knn", "exact", "--out", s(&h)]).status.success());
    let o = run(&["cohesion", "--in", s(&input), "--hierarchy", s(&h)]);
    assert!(o.status.success());
    let r = case_variant_cohesion(&import_hierarchy(&h).unwrap(), &space).unwrap();
    assert_eq!(r.pairs, 30);
    assert_eq!(
        String::from_utf8(o.stdout).unwrap(),
        format!("fraction,pairs,cohesive,tokens\n{:.6},30,{},60\n", r.fraction, r.cohesive)
    );

    let labels = dir.path().join("labels.csv");
    std::fs::write(&labels, "token,category,attribute,value,rank\nalpha0,greek,,,\nalpha1,greek,,,\n").unwrap();
    let o = run(&["precision", "--in", s(&input), "--hierarchy", s(&h), "--labels", s(&labels), "--min-support", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(o.stdout.starts_with(b"community,support,category,matched,precision"));
    let set = LabelSet::load(&labels, TokenNormalization::strip_markers()).unwrap();
    let report = precision_report(&import_hierarchy(&h).unwrap(), &set, &space, 5).unwrap();
    let mut direct = Vec::new();
    report.write_csv(&mut direct).unwrap();
    assert_eq!(o.stdout, direct);
    let root = &report.communities[0];
    assert_eq!((root.community.as_str(), root.matched, root.support), ("0", 2, 60));
}
