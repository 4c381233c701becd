//! End-to-end pipeline contract at toy scale: determinism, caching, schema
//! stability, and the CLI-visible stage surface.

mod support;

use pvlab::harness::{write_synthetic_corpus, Pipeline, RunConfig};
use std::path::PathBuf;

fn root(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("pipeline").join(name);
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn toy_config_text() -> String {
    "[model]\n\
     layers = 2\nheads = 2\nmodel_dim = 16\nffn_dim = 32\nvocab = 256\ncontext_window = 16\n\n\
     [variant.nope]\npe = nope\nattention = full\n\n\
     [variant.window]\npe = nope\nattention = window:4\n\n\
     [training]\nsteps = 30\nbatch_size = 4\nlr = 1e-3\nmin_lr = 1e-4\nwarmup_steps = 5\nseed = 3\n\n\
     [data]\ncorpus = corpus\nsampler_seed = 5\nbank_samples = 12\nbank_len = 64\neval_samples = 8\n\n\
     [experiments]\n\
     analysis = pca model=nope layer=1\n\
     analysis = distinct-count model=window\n\
     analysis = ablation model=nope bank_n=6\n\
     analysis = attention-maps model=nope layer=1 bank_n=6 first_n=16\n\
     analysis = extrapolation model=nope eval_n=2\n\
     analysis = ood-logits model=nope\n\
     analysis = synthetic n_seqs=200\n\
     extend = pvr model=nope layer=1 r=2 alpha=1.1 eval_n=2\n\
     extend = awe model=window r=2 lambda=1.1 eval_n=2\n\
     extend = attn-scale model=nope lambda=1.2 eval_n=2\n\n\
     [output]\ndir = out\n"
        .to_string()
}

fn build_pipeline(dir: &PathBuf) -> Pipeline {
    write_synthetic_corpus(&dir.join("corpus"), 21, 96 * 1024).unwrap();
    let config = RunConfig::parse(&toy_config_text(), dir).unwrap();
    Pipeline::new(config).unwrap()
}

#[test]
fn full_toy_pipeline_emits_all_artifacts_and_caches() {
    let dir = root("full");
    let pipeline = build_pipeline(&dir);
    let report = pipeline.run().unwrap();
    assert!(
        report.failures.is_empty(),
        "stages failed: {:?}",
        report.failures
    );
    // every analysis emitted at least a CSV; pca/distinct/extrapolation/
    // ood/synthetic and the maps also emit SVGs
    let names: Vec<String> = report
        .artifacts
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for want in [
        "pca_nope_layer1.csv",
        "pca_nope_layer1.svg",
        "distinct_count_window.csv",
        "distinct_count_window.svg",
        "ablation_nope.csv",
        "attention_maps_nope_layer1.csv",
        "extrapolation_nope.csv",
        "ood_logits_nope.csv",
        "synthetic_preference.csv",
    ] {
        assert!(names.iter().any(|n| n == want), "missing artifact {want}: {names:?}");
    }
    assert!(names.iter().any(|n| n.starts_with("extend_nope-pvr")));
    assert!(names.iter().any(|n| n.starts_with("extend_nope-w4-awe")));
    assert!(dir.join("out/manifest.txt").exists());

    // documented CSV headers are stable
    let header = |name: &str| -> String {
        let path = report.artifacts.iter().find(|p| p.ends_with(name)).unwrap();
        std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
    };
    assert_eq!(header("pca_nope_layer1.csv"), "position,pc1,pc2");
    assert_eq!(header("distinct_count_window.csv"), "layer,distinct_count,trf,saturated");
    assert_eq!(header("ablation_nope.csv"), "variant,group_start,group_end,sim,ppl");
    assert_eq!(
        header("attention_maps_nope_layer1.csv"),
        "setting,layer,heads,sink_strength,decay_slope"
    );
    assert_eq!(header("extrapolation_nope.csv"), "position,ppl,max_sim");
    assert_eq!(header("ood_logits_nope.csv"), "block,mean_cosine");
    assert_eq!(
        header("synthetic_preference.csv"),
        "position,mean_nope,se_nope,mean_rope,se_rope"
    );

    // rerunning with the identical config is a cache hit and reproduces every
    // artifact byte for byte
    let before: Vec<(PathBuf, Vec<u8>)> = report
        .artifacts
        .iter()
        .map(|p| (p.clone(), std::fs::read(p).unwrap()))
        .collect();
    let t0 = std::time::Instant::now();
    let pipeline2 = build_pipeline(&dir);
    let report2 = pipeline2.run().unwrap();
    assert!(report2.failures.is_empty());
    eprintln!("[pipeline] cached rerun took {:?}", t0.elapsed());
    for (path, bytes) in before {
        assert_eq!(std::fs::read(&path).unwrap(), bytes, "{} changed", path.display());
    }
}

#[test]
fn mutating_the_corpus_invalidates_downstream_caches() {
    let dir = root("invalidate");
    let pipeline = build_pipeline(&dir);
    let key_before = pipeline.train_key("nope").unwrap().digest();
    let model_before = pipeline.train_variant("nope").unwrap();

    // touch the corpus: one extra sentence
    let path = dir.join("corpus/synthetic_00.txt");
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str(" extra tail sentence.");
    std::fs::write(&path, text).unwrap();

    let pipeline2 = build_pipeline_no_reset(&dir);
    let key_after = pipeline2.train_key("nope").unwrap().digest();
    assert_ne!(key_before, key_after, "corpus change must invalidate the train key");
    let model_after = pipeline2.train_variant("nope").unwrap();
    assert_ne!(model_before.params(), model_after.params());
}

fn build_pipeline_no_reset(dir: &PathBuf) -> Pipeline {
    let config = RunConfig::parse(&toy_config_text(), dir).unwrap();
    Pipeline::new(config).unwrap()
}

#[test]
fn trained_checkpoints_are_deterministic_across_pipelines() {
    let dir_a = root("det-a");
    let dir_b = root("det-b");
    let a = build_pipeline(&dir_a).train_variant("nope").unwrap();
    let b = build_pipeline(&dir_b).train_variant("nope").unwrap();
    assert_eq!(a.params(), b.params(), "same config + seeds must train identically");
}

#[test]
fn empty_experiment_list_yields_manifest_only() {
    let dir = root("empty");
    write_synthetic_corpus(&dir.join("corpus"), 21, 32 * 1024).unwrap();
    let text = toy_config_text();
    let stripped: String = text
        .lines()
        .filter(|l| !l.starts_with("analysis =") && !l.starts_with("extend ="))
        .collect::<Vec<_>>()
        .join("\n");
    let config = RunConfig::parse(&stripped, &dir).unwrap();
    let pipeline = Pipeline::new(config).unwrap();
    let report = pipeline.run().unwrap();
    assert!(report.artifacts.is_empty());
    assert!(report.failures.is_empty());
    assert!(dir.join("out/manifest.txt").exists());
}
