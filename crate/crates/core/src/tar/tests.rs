use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data::{generate_synthetic, sample_episode, BaseQueries, EpisodeSpec, Phase, SynthConfig};
use crate::networks::{BackboneConfig, ModelConfig};
use crate::numerics::{dot, norm};

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn eval_graph(build: impl FnOnce(&mut Graph) -> Result<Var>) -> RealArray {
    let p = ParamStore::new();
    let mut g = Graph::new(&p);
    let v = build(&mut g).unwrap();
    g.value(v).clone()
}

fn row(v: &[f64]) -> RealArray {
    RealArray::row(v)
}

#[test]
fn combined_feature_examples() {
    let run = |wp: &[f64], wm: &[f64]| {
        eval_graph(|g| {
            let f = g.constant(row(&[1.0, 2.0]))?;
            let gf = g.constant(row(&[3.0, 4.0]))?;
            let a = g.constant(row(wp))?;
            let b = g.constant(row(wm))?;
            combined_on(g, f, gf, a, b)
        })
    };
    assert_eq!(run(&[0.5, 0.5], &[1.0, 0.0]).data(), &[3.5, 1.0]);
    assert_eq!(run(&[1.0, 1.0], &[0.0, 0.0]).data(), &[1.0, 2.0]);
    assert_eq!(run(&[0.0, 0.0], &[1.0, 1.0]).data(), &[3.0, 4.0]);
}

fn prototypes(z: &[Vec<f64>], labels: &[usize], n: usize) -> RealArray {
    eval_graph(|g| {
        let a = g.constant(averaging_matrix(labels, n)?)?;
        let zv = g.constant(RealArray::from_rows(z)?)?;
        g.tape.matmul(a, zv)
    })
}

#[test]
fn prototype_examples() {
    let p = prototypes(&[vec![0.0, 0.0], vec![2.0, 4.0]], &[0, 0], 1);
    assert_eq!(p.data(), &[1.0, 2.0]);
    let p = prototypes(&[vec![5.0, -1.0]], &[0], 1);
    assert_eq!(p.data(), &[5.0, -1.0]);
    let a = prototypes(&[vec![1.0, 0.0], vec![0.0, 3.0], vec![2.0, 2.0], vec![7.0, 1.0]], &[0, 1, 0, 1], 2);
    let b = prototypes(&[vec![7.0, 1.0], vec![2.0, 2.0], vec![0.0, 3.0], vec![1.0, 0.0]], &[1, 0, 1, 0], 2);
    close(a.data(), b.data(), 1e-15);
    assert!(averaging_matrix(&[0, 0], 2).is_err());
}

fn condition(w: &[f64], gamma: &[f64], beta: &[f64]) -> RealArray {
    eval_graph(|g| {
        let w = g.constant(RealArray::from_rows(&[w.to_vec(), vec![-2.0, 3.0]])?)?;
        let ga = g.constant(row(gamma))?;
        let be = g.constant(row(beta))?;
        condition_on(g, w, ga, be)
    })
}

#[test]
fn condition_base_examples() {
    let out = condition(&[1.0, 1.0], &[0.5, -0.5], &[0.1, 0.2]);
    close(out.row_slice(0), &[1.6, 0.7], 1e-15);
    let out = condition(&[1.0, 1.0], &[0.0, 0.0], &[0.0, 0.0]);
    assert_eq!(out.data(), &[1.0, 1.0, -2.0, 3.0]);
    let out = condition(&[1.0, 1.0], &[-1.0, -1.0], &[0.3, 0.4]);
    assert_eq!(out.data(), &[0.3, 0.4, 0.3, 0.4]);
}

fn adapt(lambda: &[f64]) -> RealArray {
    eval_graph(|g| {
        let w = g.constant(row(&[1.0, 1.0]))?;
        let l = g.constant(row(lambda))?;
        let base = g.constant(RealArray::from_rows(&[vec![4.0, 0.0], vec![0.0, 8.0]])?)?;
        adapt_on(g, w, l, base)
    })
}

#[test]
fn adapt_novel_examples() {
    close(adapt(&[0.0, 0.0]).data(), &[1.0 - 2.0, 1.0 - 4.0], 1e-15);
    close(adapt(&[3f64.ln(), 0.0]).data(), &[1.0 - 0.75 * 4.0, 1.0 - 0.25 * 8.0], 1e-14);
    close(adapt(&[800.0, 0.0]).data(), &[1.0 - 4.0, 1.0], 1e-12);
}

#[test]
fn projection_of_aligned_rows() {
    let c = RealArray::from_rows(&[vec![1.0, 2.0, 0.0, 1.0], vec![0.0, -1.0, 3.0, 1.0]]).unwrap();
    let mut w = c.clone();
    for x in w.data_mut().iter_mut() {
        *x *= 2.5;
    }
    let m = alignment_projection(&w, &c).unwrap();
    assert_eq!(m.shape(), &[4, 2]);
    let mtm = m.transpose().matmul(&m).unwrap();
    close(mtm.data(), &[1.0, 0.0, 0.0, 1.0], 1e-12);
}

#[test]
fn projection_annihilates_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = RealArray::randn(&[3, 16], 1.0, &mut rng);
    let c = RealArray::randn(&[3, 16], 1.0, &mut rng);
    let m = alignment_projection(&w, &c).unwrap();
    for k in 0..3 {
        let (wk, ck) = (w.row_slice(k), c.row_slice(k));
        let err: Vec<f64> = wk.iter().zip(ck).map(|(a, b)| a / norm(wk) - b / norm(ck)).collect();
        let proj = RealArray::row(&err).matmul(&m).unwrap();
        assert!(norm(proj.data()) <= 1e-8);
    }
}

#[test]
fn projection_guards() {
    let c = RealArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    assert!(alignment_projection(&c, &c).is_err());
    let z = RealArray::zeros(&[1, 3]);
    let one = RealArray::row(&[1.0, 0.0, 0.0]);
    assert!(matches!(alignment_projection(&z, &one), Err(Error::ZeroNorm(_))));
}

#[test]
fn euclidean_posterior_hand_example() {
    let posterior = |far: f64| {
        let scores = eval_graph(|g| {
            let z = g.constant(row(&[0.0, 0.0]))?;
            let w = g.constant(RealArray::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, far]])?)?;
            let m = g.constant(RealArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?)?;
            scores_on(g, z, w, Some(m), None)
        });
        softmax(scores.data())
    };
    // squared distances (0, 1, 4)
    let p = posterior(2.0);
    let s = 1.0 + (-1f64).exp() + (-4f64).exp();
    close(&p, &[1.0 / s, (-1f64).exp() / s, (-4f64).exp() / s], 1e-12);
    close(&p, &[0.7214, 0.2654, 0.0132], 5e-5);
    assert_eq!(crate::numerics::argmax(&p), 0);
    // squared distances (0, 1, 3)
    close(&posterior(3f64.sqrt()), &[0.705, 0.259, 0.035], 5e-4);
}

#[test]
fn equal_distances_give_uniform_posterior() {
    let scores = eval_graph(|g| {
        let z = g.constant(row(&[0.0, 0.0]))?;
        let w = g.constant(RealArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]])?)?;
        let m = g.constant(RealArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])?)?;
        scores_on(g, z, w, Some(m), None)
    });
    close(&softmax(scores.data()), &[1.0 / 3.0; 3], 1e-12);
}

// ---- pipeline on a small synthetic problem ----

struct Fixture {
    net: Networks,
    params: ParamStore,
    splits: DatasetSplits,
}

fn fixture(variant: Variant, metric: MetricMode) -> Fixture {
    let synth = SynthConfig {
        base_classes: 4,
        novel_train_classes: 4,
        novel_val_classes: 2,
        novel_test_classes: 3,
        base_per_class: 20,
        novel_per_class: 8,
        input_shape: vec![6],
        subspace_rank: 2,
        ..SynthConfig::default()
    };
    let splits = generate_synthetic(&synth, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut cfg = ModelConfig::dense(6, 4, 2);
    cfg.backbone = BackboneConfig::Dense {
        widths: vec![8, 8, 8, 8],
        tap_after: 3,
    };
    cfg.variant = variant;
    cfg.metric = metric;
    let net = Networks::new(cfg).unwrap();
    let params = net.init_params(&mut ChaCha8Rng::seed_from_u64(2));
    Fixture { net, params, splits }
}

fn spec(k: usize) -> EpisodeSpec {
    EpisodeSpec {
        n_way: 2,
        k_shot: k,
        q_per_class: 3,
        fake_novel: false,
        base_queries: BaseQueries::Uniform,
        feature_dim: Some(8),
    }
}

fn randomize_meta(params: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = params
        .names()
        .filter(|n| n.starts_with("metacnn.") || n.starts_with("mergenet.") || n.starts_with("tconnet."))
        .cloned()
        .collect();
    for n in names {
        let p = params.get_mut(&n).unwrap();
        *p = RealArray::randn(p.shape(), 0.3, &mut rng);
    }
}

#[test]
fn c_star_is_mean_of_prototypes() {
    let fx = fixture(Variant::Imprint, MetricMode::Cosine);
    let mut params = fx.params.clone();
    randomize_meta(&mut params, 3);
    let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
    let ep = sample_episode(&fx.splits, Phase::Test, &spec(3), 9).unwrap();
    let st = pipe.process_support(&params, &fx.splits, &ep).unwrap();
    let n = st.prototypes.rows() as f64;
    for j in 0..8 {
        let mean: f64 = (0..st.prototypes.rows()).map(|k| st.prototypes.get2(k, j)).sum::<f64>() / n;
        assert!((mean - st.c_star.data()[j]).abs() <= 1e-10);
    }
    assert_eq!(st.w_star.shape(), &[6, 8]);
}

#[test]
fn support_order_does_not_matter() {
    let fx = fixture(Variant::Imprint, MetricMode::EuclideanProjected);
    let mut params = fx.params.clone();
    randomize_meta(&mut params, 4);
    let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
    let ep = sample_episode(&fx.splits, Phase::Test, &spec(3), 10).unwrap();
    let mut shuffled = ep.clone();
    shuffled.support.reverse();
    shuffled.support.swap(0, 2);
    let a = pipe.process_support(&params, &fx.splits, &ep).unwrap();
    let b = pipe.process_support(&params, &fx.splits, &shuffled).unwrap();
    assert!(a.w_star.max_abs_diff(&b.w_star) <= 1e-9);
    assert!(a.c.max_abs_diff(&b.c) <= 1e-9);
    // the basis is unique only up to rotation; the projector is not
    let projector = |m: &RealArray| m.matmul(&m.transpose()).unwrap();
    assert!(projector(a.m.as_ref().unwrap()).max_abs_diff(&projector(b.m.as_ref().unwrap())) <= 1e-9);
}

#[test]
fn initial_state_keeps_pretrained_base_rows() {
    let fx = fixture(Variant::Imprint, MetricMode::Cosine);
    let ep = sample_episode(&fx.splits, Phase::Test, &spec(2), 11).unwrap();
    let base = fx.params.get("classifier.base").unwrap();

    let full = Pipeline::new(&fx.net, Stages::full()).unwrap();
    let st = full.process_support(&fx.params, &fx.splits, &ep).unwrap();
    assert_eq!(st.omega_pre, RealArray::ones(&[1, 8]));
    assert_eq!(st.omega_meta, RealArray::ones(&[1, 8]));
    assert_eq!(&st.w_star.select(&[0, 1, 2, 3]), base);

    // without conditioning the novel rows are the plain-feature prototypes
    let plain = Pipeline::new(&fx.net, Stages::prefix(2).unwrap()).unwrap();
    let st = plain.process_support(&fx.params, &fx.splits, &ep).unwrap();
    for k in 0..2 {
        let members: Vec<&RealArray> = ep
            .support
            .iter()
            .filter(|r| r.label == 5 + k)
            .map(|r| &fx.splits.sample(r.split, r.index).input)
            .collect();
        let mut mean = vec![0.0; 8];
        for x in &members {
            let (_, f) = fx.net.backbone_forward(&fx.params, x).unwrap();
            for (m, v) in mean.iter_mut().zip(f.data()) {
                *m += v / members.len() as f64;
            }
        }
        close(st.w_star.row_slice(4 + k), &mean, 1e-12);
    }
}

#[test]
fn base_posteriors_match_pretrained_head_at_init() {
    let fx = fixture(Variant::Imprint, MetricMode::Cosine);
    let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
    let ep = sample_episode(&fx.splits, Phase::Test, &spec(2), 12).unwrap();
    let st = pipe.process_support(&fx.params, &fx.splits, &ep).unwrap();
    let base = fx.params.get("classifier.base").unwrap();
    let tau = fx.params.get("classifier.tau").unwrap().item();
    for q in &ep.query_base {
        let x = &fx.splits.sample(q.split, q.index).input;
        let p = pipe.classify(&fx.params, &st, &[x]).unwrap().remove(0);
        let mass: f64 = p[..4].iter().sum();
        let restricted: Vec<f64> = p[..4].iter().map(|v| v / mass).collect();
        let (_, f) = fx.net.backbone_forward(&fx.params, x).unwrap();
        let scores: Vec<f64> = (0..4)
            .map(|i| tau * dot(base.row_slice(i), f.data()) / (norm(base.row_slice(i)) * norm(f.data())))
            .collect();
        close(&restricted, &softmax(&scores), 1e-9);
    }
}

#[test]
fn euclidean_state_satisfies_alignment() {
    for variant in [Variant::Imprint, Variant::Tapnet, Variant::Lwof] {
        let fx = fixture(variant, MetricMode::EuclideanProjected);
        let mut params = fx.params.clone();
        randomize_meta(&mut params, 5);
        let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
        let ep = sample_episode(&fx.splits, Phase::Test, &spec(2), 13).unwrap();
        let st = pipe.process_support(&params, &fx.splits, &ep).unwrap();
        let m = st.m.as_ref().unwrap();
        assert_eq!(m.shape(), &[8, 6]);
        for k in 0..2 {
            let (w, c) = (st.w_star.row_slice(4 + k), st.prototypes.row_slice(k));
            let err: Vec<f64> = w.iter().zip(c).map(|(a, b)| a / norm(w) - b / norm(c)).collect();
            assert!(norm(RealArray::row(&err).matmul(m).unwrap().data()) <= 1e-6);
        }
    }
}

#[test]
fn posteriors_normalize_and_mask() {
    let fx = fixture(Variant::Imprint, MetricMode::Cosine);
    let mut params = fx.params.clone();
    randomize_meta(&mut params, 6);
    let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
    let mut sp = spec(2);
    sp.fake_novel = true;
    let ep = sample_episode(&fx.splits, Phase::MetaTrain, &sp, 14).unwrap();
    assert_eq!(ep.masked_base.len(), 2);
    let st = pipe.process_support(&params, &fx.splits, &ep).unwrap();
    assert_eq!(st.w_star.rows(), 4);
    let inputs: Vec<&RealArray> = ep.queries().map(|q| &fx.splits.sample(q.split, q.index).input).collect();
    for p in pipe.classify(&params, &st, &inputs).unwrap() {
        assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        for &b in &ep.masked_base {
            assert_eq!(p[b - 1], 0.0);
        }
    }
    for &b in &ep.masked_base {
        assert_eq!(st.column(b), None);
    }
}

#[test]
fn tapnet_initial_weights_ignore_support() {
    let fx = fixture(Variant::Tapnet, MetricMode::EuclideanProjected);
    let pipe = Pipeline::new(&fx.net, Stages::prefix(2).unwrap()).unwrap();
    let phi = fx.params.get("tapnet.phi").unwrap();
    for seed in [15, 16] {
        let ep = sample_episode(&fx.splits, Phase::Test, &spec(2), seed).unwrap();
        let st = pipe.process_support(&fx.params, &fx.splits, &ep).unwrap();
        assert_eq!(&st.w_star.select(&[4, 5]), phi);
    }
}

#[test]
fn lwof_without_attention_gain_is_scaled_imprinting() {
    let fx = fixture(Variant::Lwof, MetricMode::Cosine);
    let mut params = fx.params.clone();
    *params.get_mut("lwof.phi_att").unwrap() = RealArray::zeros(&[1, 8]);
    let pipe = Pipeline::new(&fx.net, Stages::prefix(2).unwrap()).unwrap();
    let ep = sample_episode(&fx.splits, Phase::Test, &spec(2), 17).unwrap();
    let st = pipe.process_support(&params, &fx.splits, &ep).unwrap();
    let base = params.get("classifier.base").unwrap();
    let direct = fx.net.lwof_forward(&params, &st.prototypes, base).unwrap();
    close(st.w_star.select(&[4, 5]).data(), direct.data(), 1e-14);
    for k in 0..2 {
        let c = st.prototypes.row_slice(k);
        let unit: Vec<f64> = c.iter().map(|x| x / norm(c)).collect();
        close(direct.row_slice(k), &unit, 1e-14);
    }
}

#[test]
fn scale_changes_posteriors_not_predictions() {
    let fx = fixture(Variant::Imprint, MetricMode::Cosine);
    let mut params = fx.params.clone();
    randomize_meta(&mut params, 7);
    let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
    let ep = sample_episode(&fx.splits, Phase::Test, &spec(2), 18).unwrap();
    let st = pipe.process_support(&params, &fx.splits, &ep).unwrap();
    let inputs: Vec<&RealArray> = ep.queries().map(|q| &fx.splits.sample(q.split, q.index).input).collect();
    let a = pipe.classify(&params, &st, &inputs).unwrap();
    *params.get_mut("classifier.tau").unwrap() = RealArray::scalar(3.0);
    let b = pipe.classify(&params, &st, &inputs).unwrap();
    for (pa, pb) in a.iter().zip(&b) {
        assert_eq!(crate::numerics::argmax(pa), crate::numerics::argmax(pb));
    }
    assert_ne!(a, b);
}

#[test]
fn graph_logits_agree_with_value_path() {
    let fx = fixture(Variant::Imprint, MetricMode::EuclideanProjected);
    let mut params = fx.params.clone();
    randomize_meta(&mut params, 8);
    let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
    let ep = sample_episode(&fx.splits, Phase::Test, &spec(2), 19).unwrap();
    let mut g = Graph::new(&params);
    let eg = pipe.episode(&mut g, &fx.splits, &ep).unwrap();
    let st = pipe.process_support(&params, &fx.splits, &ep).unwrap();
    let inputs: Vec<&RealArray> = ep.queries().map(|q| &fx.splits.sample(q.split, q.index).input).collect();
    let z = pipe.combined_features(&params, &st, &inputs).unwrap().z;
    let s = pipe.scores(&params, &st, &z).unwrap();
    assert!(g.value(eg.logits).max_abs_diff(&s) <= 1e-12);
    assert_eq!(eg.targets.len(), 12);
}

#[test]
fn episode_loss_gradients_match_finite_differences() {
    for (variant, metric) in [(Variant::Imprint, MetricMode::Cosine), (Variant::Lwof, MetricMode::Cosine), (Variant::Tapnet, MetricMode::EuclideanProjected)] {
        let fx = fixture(variant, metric);
        let mut params = fx.params.clone();
        randomize_meta(&mut params, 9);
        let pipe = Pipeline::new(&fx.net, Stages::full()).unwrap();
        let ep = sample_episode(&fx.splits, Phase::Test, &spec(1), 20).unwrap();
        let mut names = vec!["metacnn.0.w", "mergenet.pre.3.w", "mergenet.meta.0.b", "tconnet.gamma.2.w", "tconnet.beta.0.w", "tconnet.lambda.1.w"];
        match variant {
            Variant::Imprint => names.push("classifier.tau"),
            Variant::Lwof => names.extend(["lwof.keys", "lwof.gamma", "lwof.phi_att"]),
            Variant::Tapnet => names.push("tapnet.phi"),
        }
        // the projection is a constant of the graph, so hold it fixed
        let m = pipe.process_support(&params, &fx.splits, &ep).unwrap().m;
        let pipe = Pipeline {
            fixed_projection: m.as_ref(),
            ..pipe
        };
        crate::networks::tests::grad_check(&params, &names, |g| pipe.episode_loss(g, &fx.splits, &ep));
    }
}
