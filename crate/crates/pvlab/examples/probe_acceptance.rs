//! Scratch probe against the acceptance cache: reports the directional
//! quantities the acceptance criteria assert, at configurable bank sizes.

use pvlab::analysis::*;
use pvlab::decompose::*;
use pvlab::extend::*;
use pvlab::harness::{Pipeline, RunConfig, WindowSampler};
use pvlab::model::*;
use std::path::PathBuf;
use std::sync::Arc;

const LAYERS: usize = 6;
const HEADS: usize = 4;
const C: usize = 64;
const W: usize = 16;

fn main() {
    let root = PathBuf::from(std::env::args().nth(1).expect("usage: probe <acceptance root> <bank_n>"));
    let bank_n: usize = std::env::args().nth(2).unwrap_or("512".into()).parse().unwrap();
    let steps: usize = std::env::args().nth(4).unwrap_or("6000".into()).parse().unwrap();
    let config_text = format!(
        "[model]\nlayers = {LAYERS}\nheads = {HEADS}\nmodel_dim = 64\nffn_dim = 256\nvocab = 256\ncontext_window = {C}\n\n\
         [variant.nope]\npe = nope\nattention = full\n\n\
         [variant.window]\npe = nope\nattention = window:{W}\n\n\
         [variant.window-small]\npe = nope\nattention = window:3\n\n\
         [training]\nsteps = {steps}\nbatch_size = 12\nlr = 1e-3\nmin_lr = 1e-4\nwarmup_steps = 100\nweight_decay = 0.1\nseed = 7\n\n\
         [data]\ncorpus = corpus\nsampler_seed = 13\nbank_samples = {bank_n}\nbank_len = 256\neval_samples = 64\n\n\
         [output]\ndir = out\n"
    );
    if !root.join("corpus/synthetic_00.txt").exists() {
        pvlab::harness::write_synthetic_corpus(&root.join("corpus"), 11, 4 << 20).unwrap();
    }
    let config = RunConfig::parse(&config_text, &root).unwrap();
    let pipeline = Pipeline::new(config).unwrap();

    let which: String = std::env::args().nth(3).unwrap_or("all".into());

    if which == "train" {
        for v in ["nope", "window", "window-small"] {
            let t0 = std::time::Instant::now();
            pipeline.train_variant(v).unwrap();
            println!("{v} trained/loaded in {:.0?}", t0.elapsed());
        }
        return;
    }

    if which == "all" || which == "distinct" {
        let window = pipeline.train_variant("window").unwrap();
        let streams: Vec<StreamId> =
            (1..=LAYERS).map(|l| StreamId::LayerOutput { layer: l }).collect();
        let t0 = std::time::Instant::now();
        let set = pipeline
            .decomposition(window.as_ref(), &pipeline.train_key("window").unwrap().short(),
                           &streams, 256, bank_n, C)
            .unwrap();
        println!("window bank n={bank_n} took {:.0?}", t0.elapsed());
        for l in 1..=LAYERS {
            let row = distinct_count(set.get(&StreamId::LayerOutput { layer: l }).unwrap(), W, LAYERS, 0.99).unwrap();
            println!("  layer {l}: distinct {} trf {} ref {}", row.distinct_count, row.trf, row.reference_position);
        }
        // similarity profile along positions for layer 3
        let dec = set.get(&StreamId::LayerOutput { layer: 3 }).unwrap();
        let p_ref = dec.p().row(103);
        for t in [0usize, 3, 7, 15, 31, 47, 48, 49, 55, 63, 79, 95, 127, 191, 255] {
            let sim = pvlab::numerics::cosine(dec.p().row(t), p_ref).unwrap();
            println!("  layer3 cos(p[{}], ref) = {:.5}", t + 1, sim);
        }
    }

    if which == "all" || which == "pca" {
        let nope = pipeline.train_variant("nope").unwrap();
        let streams: Vec<StreamId> =
            (1..=LAYERS).map(|l| StreamId::LayerOutput { layer: l }).collect();
        let set = pipeline
            .decomposition(nope.as_ref(), &pipeline.train_key("nope").unwrap().short(),
                           &streams, C, bank_n, C)
            .unwrap();
        for l in [1usize, 2, 3] {
            let pca = pca_positions(set.get(&StreamId::LayerOutput { layer: l }).unwrap(), 2).unwrap();
            println!(
                "nope layer {l}: init min {:.4} late p90 {:.4} cv {:.3} ev {:?}",
                pca.min_pairwise_distance(1..=4),
                pca.percentile_pairwise_distance(C / 4 + 1..=C, 90.0),
                pca.nn_distance_cv(),
                &pca.explained_variance
            );
        }
    }

    if which == "all" || which == "sink" {
        let nope = pipeline.train_variant("nope").unwrap();
        let sampler = WindowSampler::new(pipeline.train_tokens(), 13);
        for layer in [2usize, 3, 4, 5] {
            let heads: Vec<usize> = (1..=HEADS).collect();
            let mut requests = Vec::new();
            for &h in &heads {
                requests.push(StreamRequest::retained(StreamId::Query { layer, head: h }));
                requests.push(StreamRequest::retained(StreamId::Key { layer, head: h }));
            }
            let banks = collect_bank(nope.as_ref(), &sampler, bank_n.min(192), C, &requests, &[]).unwrap();
            let mut set = DecompositionSet::new();
            for b in &banks {
                set.insert(decompose(b, C).unwrap());
            }
            let q: Vec<&HiddenStateBank> = banks.iter().step_by(2).collect();
            let k: Vec<&HiddenStateBank> = banks.iter().skip(1).step_by(2).collect();
            let orig = attention_component_maps(nope.config(), layer, &heads, &q, &k, &set, MapSetting::Original, C, 4).unwrap();
            let strip = attention_component_maps(nope.config(), layer, &heads, &q, &k, &set, MapSetting::WoPositionalBasis, C, 4).unwrap();
            println!(
                "layer {layer}: sink {:.4} (baseline {:.4}) decay {:.5} | stripped sink {:.4} decay {:.5}",
                orig.sink_strength, 4.0 / C as f64, orig.decay_slope,
                strip.sink_strength, strip.decay_slope
            );
        }
    }

    if which == "all" || which == "extrap" {
        for v in ["nope", "window", "window-small"] {
            let model = pipeline.train_variant(v).unwrap();
            let streams: Vec<StreamId> =
                (1..=LAYERS).map(|l| StreamId::LayerOutput { layer: l }).collect();
            let set = pipeline
                .decomposition(model.as_ref(), &pipeline.train_key(v).unwrap().short(),
                               &streams, 256, bank_n, C)
                .unwrap();
            let eval = pipeline.eval_windows(16, 256).unwrap();
            let layers: Vec<usize> = (2..=LAYERS).collect();
            let curves = extrapolation_curves(model.as_ref(), &set, &layers, &eval, C, C / 8).unwrap();
            let sims: Vec<f64> = curves.max_sim_by_position.iter().filter(|(p, _)| *p > C).map(|(_, s)| *s).collect();
            let min_sim = sims.iter().cloned().fold(f64::INFINITY, f64::min);
            let far: Vec<f64> = curves.max_sim_by_position.iter().filter(|(p, _)| *p > 2 * C).map(|(_, s)| *s).collect();
            let mean_far = far.iter().sum::<f64>() / far.len() as f64;
            println!(
                "{v}: within {:.2} beyond {:.2} | min sim beyond C {:.4} mean sim beyond 2C {:.4}",
                curves.within_ppl, curves.beyond_ppl, min_sim, mean_far
            );
        }
    }

    if which == "all" || which == "ablation" {
        let nope = pipeline.train_variant("nope").unwrap();
        let streams: Vec<StreamId> = (1..=LAYERS)
            .flat_map(|l| (1..=HEADS).map(move |h| StreamId::Value { layer: l, head: h }))
            .collect();
        let values = pipeline
            .decomposition(nope.as_ref(), &pipeline.train_key("nope").unwrap().short(),
                           &streams, C, bank_n, C)
            .unwrap();
        let acfg = AblationConfig::for_context(C, (bank_n / 2).min(256));
        let eval = pipeline.eval_windows(64, C).unwrap();
        let sampler = WindowSampler::new(pipeline.train_tokens(), 13);
        let rows = ablation_study(
            nope.as_ref(), values, &sampler, &eval,
            &[AblationVariant::Original, AblationVariant::WoValue,
              AblationVariant::WoPositionalVector, AblationVariant::WoPositionalBasis,
              AblationVariant::WoSemanticVector],
            &acfg,
        ).unwrap();
        for r in &rows {
            println!("{:24} {:?}: sim {:.4} ppl {:.2}", r.variant.label(), r.group, r.sim, r.ppl);
        }
    }

    if which == "all" || which == "ratio" {
        let nope = pipeline.train_variant("nope").unwrap();
        let t_len = 2 * C;
        let streams: Vec<StreamId> =
            (1..=LAYERS).map(|l| StreamId::LayerOutput { layer: l }).collect();
        let key = pipeline.train_key("nope").unwrap().short();
        let orig = pipeline.decomposition(nope.as_ref(), &key, &streams, t_len, bank_n, C).unwrap();
        for lambda in [1.0f32, 1.1, 1.2, 1.3, 1.4] {
            let wrapped = attention_scaling(nope.clone(), lambda).unwrap();
            let wkey = format!("{key}-{}", wrapped.describe());
            let ext = pipeline.decomposition(&wrapped, &wkey, &streams, t_len, bank_n, C).unwrap();
            let mut ratios = Vec::new();
            for l in 2..=LAYERS {
                let id = StreamId::LayerOutput { layer: l };
                let r = effective_interpolation_ratio(orig.get(&id).unwrap().p(), ext.get(&id).unwrap().p(), C).unwrap();
                ratios.push((l, r.ratio, format!("{:?}", r.flag)));
            }
            println!("attn-scale lambda {lambda}: {ratios:?}");
        }
        let init = initial_scaling(nope.clone(), 1.2, 4).unwrap();
        let wkey = format!("{key}-{}", init.describe());
        let ext = pipeline.decomposition(&init, &wkey, &streams, t_len, bank_n, C).unwrap();
        let mut ratios = Vec::new();
        for l in 2..=LAYERS {
            let id = StreamId::LayerOutput { layer: l };
            let r = effective_interpolation_ratio(orig.get(&id).unwrap().p(), ext.get(&id).unwrap().p(), C).unwrap();
            ratios.push((l, r.ratio));
        }
        println!("init-scale lambda 1.2: {ratios:?}");
    }

    if which == "all" || which == "extend" {
        let nope = pipeline.train_variant("nope").unwrap();
        let window = pipeline.train_variant("window").unwrap();
        let eval_2c = pipeline.eval_windows(24, 2 * C).unwrap();
        let within = pipeline.eval_windows(64, C).unwrap();
        let streams: Vec<StreamId> =
            (1..=LAYERS).map(|l| StreamId::LayerOutput { layer: l }).collect();
        let key = pipeline.train_key("nope").unwrap().short();
        let decs = pipeline.decomposition(nope.as_ref(), &key, &streams, 256, bank_n, C).unwrap();

        let nope_within = perplexity_over_samples(nope.as_ref(), &within, &[]).unwrap().ppl;
        let nope_2c = perplexity_over_samples(nope.as_ref(), &eval_2c, &[]).unwrap().ppl;
        println!("nope within {nope_within:.2} at2C {nope_2c:.2}");

        let eval_sweep = pipeline.eval_windows(12, 4 * (C - 4)).unwrap();
        let (rows, best) = replacement_layer_sweep(&nope, &decs, &[1, 2, 3, 4, 5, 6], 4.0, 1.0, 4, &eval_sweep).unwrap();
        println!("sweep r=4 a=1.0: {rows:?} best {best}");
        let (rows2, best2) = replacement_layer_sweep(&nope, &decs, &[1, 2, 3, 4, 5, 6], 2.0, 1.1, 4, &pipeline.eval_windows(12, 2 * C).unwrap()).unwrap();
        println!("sweep r=2 a=1.1: {rows2:?} best {best2}");

        for layer in [best, best2, 2, 3] {
            let pvr = ExtensionSpec::PositionalVectorReplacement { layer, r: 2.0, alpha: 1.1, initial_k: 4 }
                .build(nope.clone(), Some(&decs)).unwrap();
            let ppl = perplexity_over_samples(&pvr, &eval_2c, &[]).unwrap().ppl;
            println!("pvr l{layer} r2 a1.1 at 2C: {ppl:.2}");
        }

        let win_within = perplexity_over_samples(window.as_ref(), &within, &[]).unwrap().ppl;
        let win_2c = perplexity_over_samples(window.as_ref(), &eval_2c, &[]).unwrap().ppl;
        let awe = attention_window_extension(window.clone(), 2.0, 1.1).unwrap();
        let awe_ppl = perplexity_over_samples(&awe, &eval_2c, &[]).unwrap().ppl;
        println!("window within {win_within:.2} at2C {win_2c:.2} awe(r2,l1.1) {awe_ppl:.2}");
        let awe4 = attention_window_extension(window.clone(), 4.0, 1.2).unwrap();
        for len in [2 * C, 3 * C, 4 * C] {
            let ppl = perplexity_over_samples(&awe4, &pipeline.eval_windows(12, len).unwrap(), &[]).unwrap().ppl;
            println!("awe r4 l1.2 at {len}: {ppl:.2}");
        }
        let _ = Arc::strong_count(&nope);
    }
}
