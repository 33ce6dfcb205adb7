mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use common::{max_diff, oracle, randomize_meta, rows_of};
use xtar::data::{generate_synthetic, sample_episode, Phase, SynthConfig};
use xtar::networks::{MetricMode, ModelConfig, Networks, Stages};
use xtar::tar::Pipeline;
use xtar::train::EvalConfig;

fn check(metric: MetricMode, seed: u64) {
    let splits = generate_synthetic(&SynthConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
    let mut cfg = ModelConfig::dense(64, 20, 5);
    cfg.metric = metric;
    let net = Networks::new(cfg).unwrap();
    let mut params = net.init_params(&mut ChaCha8Rng::seed_from_u64(seed + 1));
    randomize_meta(&mut params, seed + 2, 0.1);
    let ep = sample_episode(&splits, Phase::Test, &EvalConfig::default().episode_spec(64), seed + 3).unwrap();

    let pipe = Pipeline::new(&net, Stages::full()).unwrap();
    let state = pipe.process_support(&params, &splits, &ep).unwrap();
    let queries: Vec<&[f64]> = ep.queries().map(|q| splits.sample(q.split, q.index).input.data()).collect();
    let query_arrays: Vec<_> = ep.queries().map(|q| &splits.sample(q.split, q.index).input).collect();
    let posteriors = pipe.classify(&params, &state, &query_arrays).unwrap();

    let support: Vec<(&[f64], usize)> = ep
        .support
        .iter()
        .map(|s| (splits.sample(s.split, s.index).input.data(), s.label - ep.n_base - 1))
        .collect();
    let expected = oracle(&net, &params, &support, &queries);

    assert!(max_diff(&rows_of(&state.prototypes), &expected.prototypes) <= 1e-10);
    assert!(max_diff(&rows_of(&state.w_star), &expected.classifier) <= 1e-10);
    let err = max_diff(&posteriors, &expected.posteriors);
    assert!(err <= 1e-10, "{metric:?}: posterior error {err:e}");
    // the oracle is not vacuous: the meta modules change the outcome
    let plain = Pipeline::new(&net, Stages::none()).unwrap();
    let plain_state = plain.process_support(&params, &splits, &ep).unwrap();
    let plain_post = plain.classify(&params, &plain_state, &query_arrays).unwrap();
    assert!(max_diff(&plain_post, &expected.posteriors) > 1e-6);
}

#[test]
fn cosine_pipeline_matches_straight_line_oracle() {
    check(MetricMode::Cosine, 10);
}

#[test]
fn euclidean_pipeline_matches_straight_line_oracle() {
    check(MetricMode::EuclideanProjected, 20);
}
