#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "cortex/pipeline.hpp"
#include "gradcheck.hpp"

using namespace cortex;

#define CHECK_NEAR(a, b, tol) CHECK(std::abs((a) - (b)) <= (tol))

namespace {

// Smallest geometry the renderer supports: 2x2 cells at 8 px each, so the
// patch grid is 2x2 as well.
ModelConfig tiny_model(int channels = 16) {
    ModelConfig m;
    m.backbone.resolution = 16;
    m.backbone.patch_stride = 8;
    m.backbone.channels = channels;
    m.decoder.layers = 1;
    m.decoder.heads = 2;
    m.decoder.channels = channels;
    m.decoder.max_len = 14;
    m.decoder.dropout = 0.0;
    m.encoder.c = channels;
    m.detector_heads = 2;
    return m;
}

PreparedDataset tiny_data(int n_pairs, std::uint64_t seed, const ModelConfig& model,
                          int n_val = 0, int n_test = 0) {
    GenConfig gc;
    gc.n_pairs = n_pairs;
    gc.seed = seed;
    gc.grid_size = 2;
    gc.min_objects = 2;
    gc.max_objects = 3;
    PrepareOptions opts;
    opts.single_split_train = true;
    PreparedDataset data = prepare_dataset(generate_dataset(gc), nullptr, model, opts);
    REQUIRE(static_cast<int>(data.train.size()) > n_val + n_test);
    for (int i = 0; i < n_val; ++i) {
        data.val.push_back(data.train.back());
        data.train.pop_back();
    }
    for (int i = 0; i < n_test; ++i) {
        data.test.push_back(data.train.back());
        data.train.pop_back();
    }
    return data;
}

TrainConfig quick_cfg(int iters, std::uint64_t seed = 7) {
    TrainConfig cfg;
    cfg.max_iters = iters;
    cfg.seed = seed;
    cfg.batch = 2;
    cfg.val_every = 0;
    return cfg;
}

std::filesystem::path fresh_dir(const std::string& name) {
    std::filesystem::path p = std::filesystem::path("train_test_out") / name;
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("total_loss honors lambda and the ablation flags") {
    TrainConfig cfg;

    cfg.lambda = 0.0;
    CHECK(total_loss(1.5, 0.3, 0.4, cfg) == 1.5);

    cfg.lambda = 1e-4;
    CHECK_NEAR(total_loss(2.0, 0.3, 0.5, cfg), 2.00008, 1e-12);

    cfg.use_l_sa = false;
    CHECK_NEAR(total_loss(2.0, 0.3, 0.5, cfg), 2.0 + 1e-4 * 0.5, 1e-12);
    cfg.use_l_sa = true;
    cfg.use_l_da = false;
    CHECK_NEAR(total_loss(2.0, 0.3, 0.5, cfg), 2.0 + 1e-4 * 0.3, 1e-12);
    cfg.use_l_da = true;

    cfg.use_itda = false;
    CHECK(total_loss(2.0, 0.3, 0.5, cfg) == 2.0);
    cfg.use_itda = true;

    cfg.lambda = -1e-6;
    CHECK_THROWS_AS(total_loss(1.0, 0.0, 0.0, cfg), ConfigError);

    cfg.lambda = 0.5;
    cfg.use_rte = false;
    CHECK_THROWS_AS(total_loss(1.0, 0.1, 0.1, cfg), ConfigError);
}

TEST_CASE("total_loss is linear in lambda") {
    TrainConfig cfg;
    const double l_cap = 1.25, l_sa = 0.4, l_da = 0.7;
    cfg.lambda = 0.0;
    const double base = total_loss(l_cap, l_sa, l_da, cfg);
    cfg.lambda = 0.03;
    const double a = total_loss(l_cap, l_sa, l_da, cfg) - base;
    cfg.lambda = 0.06;
    const double b = total_loss(l_cap, l_sa, l_da, cfg) - base;
    CHECK_NEAR(b, 2.0 * a, 1e-15);
    cfg.lambda = 0.09;
    CHECK_NEAR(total_loss(l_cap, l_sa, l_da, cfg) - base, 3.0 * a, 1e-15);
}

TEST_CASE("run config parsing, canonical form, and digest") {
    RunConfig cfg = parse_run_config(
        "# training knobs\n"
        "channels = 16\n"
        "decoder_heads = 2\n"
        "detector_heads = 2\n"
        "\n"
        "lambda = 0.01  # inline comment\n"
        "use_itda = false\n"
        "lambda_sweep = 0.1, 0.01\n"
        "seed = 42\n");
    CHECK(cfg.model.backbone.channels == 16);
    CHECK(cfg.model.decoder.channels == 16);
    CHECK(cfg.model.encoder.c == 16);
    CHECK(cfg.train.lambda == 0.01);
    CHECK_FALSE(cfg.train.use_itda);
    CHECK(cfg.train.use_rte);
    CHECK(cfg.train.seed == 42);
    REQUIRE(cfg.train.lambda_sweep.size() == 2);
    CHECK(cfg.train.lambda_sweep[1] == 0.01);

    const std::string canon = canonical_config(cfg);
    RunConfig back = parse_run_config(canon);
    CHECK(canonical_config(back) == canon);
    CHECK(config_digest(back) == config_digest(cfg));

    RunConfig other = cfg;
    other.train.lambda = 0.02;
    CHECK(config_digest(other) != config_digest(cfg));

    CHECK_THROWS_AS(parse_run_config("bogus_key = 3\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("lambda\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("lambda = \n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("lambda = abc\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("use_rte = maybe\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("batch = 2.5\n"), ConfigError);
    // use_itda stays at its default (on), so disabling the sentences alone is
    // an inconsistent flag set.
    CHECK_THROWS_AS(parse_run_config("use_rte = false\n"), ConfigError);
    CHECK_THROWS_AS(parse_run_config("lambda = -0.1\n"), ConfigError);
}

TEST_CASE("model json round trip") {
    ModelConfig m = tiny_model();
    m.encoder.seed = 99;
    ModelConfig back = model_from_json(model_to_json(m));
    CHECK(back.backbone.resolution == m.backbone.resolution);
    CHECK(back.backbone.patch_stride == m.backbone.patch_stride);
    CHECK(back.backbone.channels == m.backbone.channels);
    CHECK(back.decoder.layers == m.decoder.layers);
    CHECK(back.decoder.heads == m.decoder.heads);
    CHECK(back.decoder.max_len == m.decoder.max_len);
    CHECK(back.decoder.dropout == m.decoder.dropout);
    CHECK(back.detector_heads == m.detector_heads);
    CHECK(back.encoder.kind == m.encoder.kind);
    CHECK(back.encoder.c == m.encoder.c);
    CHECK(back.encoder.seed == 99);
}

TEST_CASE("adam step matches a hand-computed update") {
    ParamStore<double> store;
    store.declare("w", 1, 2);
    ParamEntry<double>& e = store.at("w");
    e.value << 1.0, -2.0;
    e.grad = Eigen::MatrixXd(1, 2);
    e.grad << 0.5, -2.0;

    const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    adam_step(store, lr, 1);

    // After one step the bias-corrected moments reduce to g and g^2.
    double m0 = 0.1 * 0.5, v0 = 0.001 * 0.25;
    CHECK_NEAR(e.m(0, 0), m0, 1e-15);
    CHECK_NEAR(e.v(0, 0), v0, 1e-18);
    CHECK_NEAR(e.value(0, 0), 1.0 - lr * 0.5 / (0.5 + eps), 1e-12);
    CHECK_NEAR(e.value(0, 1), -2.0 + lr * 2.0 / (2.0 + eps), 1e-12);

    // Second step with a fresh gradient, fully hand-rolled.
    const double w0 = e.value(0, 0);
    double m_prev = e.m(0, 0), v_prev = e.v(0, 0);
    e.grad(0, 0) = -1.5;
    e.grad(0, 1) = 0.0;
    const double w1 = e.value(0, 1);
    double m1 = e.m(0, 1), v1 = e.v(0, 1);
    adam_step(store, lr, 2);

    double m = b1 * m_prev + (1 - b1) * (-1.5);
    double v = b2 * v_prev + (1 - b2) * 2.25;
    double mhat = m / (1 - b1 * b1), vhat = v / (1 - b2 * b2);
    CHECK_NEAR(e.value(0, 0), w0 - lr * mhat / (std::sqrt(vhat) + eps), 1e-12);

    // Zero gradient still decays the moments.
    double m1n = b1 * m1, v1n = b2 * v1;
    double mhat1 = m1n / (1 - b1 * b1), vhat1 = v1n / (1 - b2 * b2);
    CHECK_NEAR(e.value(0, 1), w1 - lr * mhat1 / (std::sqrt(vhat1) + eps), 1e-12);

    CHECK_THROWS_AS(adam_step(store, lr, 0), ContractError);
}

TEST_CASE("gradient clipping rescales only above the threshold") {
    ParamStore<float> store;
    store.declare("a", 1, 2);
    store.declare("b", 1, 1);
    store.at("a").grad = Eigen::MatrixXf(1, 2);
    store.at("b").grad = Eigen::MatrixXf(1, 1);

    store.at("a").grad << 3.0f, 0.0f;
    store.at("b").grad << 4.0f;
    CHECK_NEAR(global_grad_norm(store), 5.0, 1e-6);
    CHECK_NEAR(clip_gradients(store, 5.0), 5.0, 1e-6);
    CHECK(store.at("a").grad(0, 0) == 3.0f);  // at the threshold: untouched

    store.at("a").grad << 6.0f, 0.0f;
    store.at("b").grad << 8.0f;
    CHECK_NEAR(clip_gradients(store, 5.0), 10.0, 1e-5);
    CHECK_NEAR(store.at("a").grad(0, 0), 3.0f, 1e-5);
    CHECK_NEAR(store.at("b").grad(0, 0), 4.0f, 1e-5);
    CHECK_NEAR(global_grad_norm(store), 5.0, 1e-5);
}

TEST_CASE("prepare_dataset routes splits and validates its inputs") {
    ModelConfig model = tiny_model();
    GenConfig gc;
    gc.n_pairs = 12;
    gc.seed = 3;
    gc.grid_size = 2;
    gc.max_objects = 3;
    std::vector<ScenePair> pairs = generate_dataset(gc);

    PreparedDataset data = prepare_dataset(pairs, nullptr, model);
    CHECK(data.train.size() + data.val.size() + data.test.size() == pairs.size());
    CHECK(data.train.size() > 0);
    CHECK(data.vocab.size() > 4);

    for (const TrainPair& tp : data.train) {
        CHECK(tp.before.width == 16);
        CHECK(tp.sent_bef.size() >= 1);
        CHECK(tp.sent_feat_bef.rows() == static_cast<Eigen::Index>(tp.sent_bef.size()));
        CHECK(tp.sent_feat_bef.cols() == model.encoder.c);
        CHECK(tp.gt_ids.size() >= 2);
        CHECK(tp.gt_ids.front() == Vocab::bos);
        CHECK(tp.gt_ids.back() == Vocab::eos);
    }

    PrepareOptions single;
    single.single_split_train = true;
    PreparedDataset all = prepare_dataset(pairs, nullptr, model, single);
    CHECK(all.train.size() == pairs.size());
    CHECK(all.val.empty());

    // A provided extraction set must cover every (pair, side).
    std::vector<RteRecord> partial;
    RteRecord rec;
    rec.pair_id = pairs[0].pair_id;
    rec.scene = SceneSide::before;
    rec.sentences = {"a lone cube sits somewhere"};
    rec.n_sentences = 1;
    partial.push_back(rec);
    CHECK_THROWS_AS(prepare_dataset(pairs, &partial, model, single), InputError);

    // Captions must fit the decoder length budget.
    ModelConfig cramped = model;
    cramped.decoder.max_len = 2;
    CHECK_THROWS_AS(prepare_dataset(pairs, nullptr, cramped, single), InputError);

    CHECK_THROWS_AS(prepare_dataset({}, nullptr, model, single), InputError);
}

TEST_CASE("memory composition follows the ablation flags") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(3, 11, model);
    const TrainPair& p = data.train[0];
    const int L = model.backbone.grid_side() * model.backbone.grid_side();
    const int N = static_cast<int>(p.sent_bef.size());
    const int M = static_cast<int>(p.sent_aft.size());

    ParamStore<float> store;
    std::mt19937_64 rng(5);
    init_model_params(store, model, data.vocab.size(), rng);

    auto count = [](const std::vector<int>& seg, int v) {
        return static_cast<int>(std::count(seg.begin(), seg.end(), v));
    };

    {
        ad::Graph<float> g;
        PairGraphOut<float> pg = build_pair_graph(g, store, p, model, false, false);
        CHECK(pg.memory.tokens.rows() == L);
        CHECK(count(pg.memory.segments, 0) == L);
        CHECK_FALSE(pg.has_align);
    }
    {
        ad::Graph<float> g;
        PairGraphOut<float> pg = build_pair_graph(g, store, p, model, true, false);
        CHECK(pg.memory.tokens.rows() == L + N + M);
        CHECK(count(pg.memory.segments, 0) == L);
        CHECK(count(pg.memory.segments, 1) == 0);
        CHECK(count(pg.memory.segments, 2) == N + M);
    }
    {
        ad::Graph<float> g;
        PairGraphOut<float> pg = build_pair_graph(g, store, p, model, true, true);
        CHECK(pg.memory.tokens.rows() == L + 4 + N + M);
        CHECK(count(pg.memory.segments, 0) == L);
        CHECK(count(pg.memory.segments, 1) == 4);
        CHECK(count(pg.memory.segments, 2) == N + M);
        CHECK(pg.has_align);
        CHECK(pg.memory.tokens.cols() == model.backbone.channels);
    }
    {
        ad::Graph<float> g;
        CHECK_THROWS_AS(build_pair_graph(g, store, p, model, false, true), ConfigError);
    }
}

TEST_CASE("training is deterministic given the seed") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(6, 21, model);
    TrainConfig cfg = quick_cfg(5);

    TrainRun a = train(data, model, cfg, "");
    TrainRun b = train(data, model, cfg, "");
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].at("l_total").get<double>() == b.log[i].at("l_total").get<double>());
        CHECK(a.log[i].at("l_cap").get<double>() == b.log[i].at("l_cap").get<double>());
    }
    for (const nlohmann::json& line : a.log) {
        CHECK(line.contains("l_cap"));
        CHECK(line.contains("l_sa"));
        CHECK(line.contains("l_da"));
        CHECK(line.contains("l_total"));
    }

    TrainConfig other = cfg;
    other.seed = 8;
    TrainRun c = train(data, model, other, "");
    bool any_diff = false;
    for (std::size_t i = 0; i < a.log.size(); ++i)
        if (a.log[i].at("l_total").get<double>() != c.log[i].at("l_total").get<double>())
            any_diff = true;
    CHECK(any_diff);
}

TEST_CASE("validation entries appear in the log") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(6, 31, model, /*n_val=*/2);
    TrainConfig cfg = quick_cfg(4);
    cfg.val_every = 2;

    TrainRun run = train(data, model, cfg, "");
    int val_entries = 0;
    for (const nlohmann::json& line : run.log)
        if (line.contains("split") && line.at("split") == "val") {
            ++val_entries;
            CHECK(std::isfinite(line.at("l_cap").get<double>()));
        }
    CHECK(val_entries == 2);  // iterations 2 and 4
}

TEST_CASE("lambda 0 with alignment routed off leaves its segment row untouched") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(4, 17, model);

    ParamStore<float> store;
    std::mt19937_64 rng(9);
    init_model_params(store, model, data.vocab.size(), rng);

    TrainConfig cfg;
    cfg.lambda = 0.0;
    cfg.use_itda = false;  // no alignment rows reach the decoder memory

    ad::Graph<float> g;
    PairLossOut<float> out = pair_training_loss(g, store, data.train[0], model, cfg);
    CHECK_FALSE(out.has_align);
    store.zero_grads();
    g.backward(out.total);

    const ParamEntry<float>& seg = store.at("decoder.seg_emb");
    REQUIRE(seg.grad.size() != 0);
    CHECK(seg.grad.row(1).cwiseAbs().maxCoeff() == 0.0f);
    CHECK(seg.grad.row(0).cwiseAbs().maxCoeff() > 0.0f);
    CHECK(seg.grad.row(2).cwiseAbs().maxCoeff() > 0.0f);  // sentences still routed

    const Eigen::MatrixXf before_step = seg.value;
    clip_gradients(store, 5.0);
    adam_step(store, 1e-2, 1);
    CHECK(store.at("decoder.seg_emb").value.row(1) == before_step.row(1));
    CHECK(store.at("decoder.seg_emb").value.row(0) != before_step.row(0));
}

TEST_CASE("checkpoint round trip reproduces the forward pass") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(5, 13, model, 0, /*n_test=*/1);
    TrainConfig cfg = quick_cfg(3);
    const std::filesystem::path dir = fresh_dir("ckpt_roundtrip");

    TrainRun run = train(data, model, cfg, dir.string());
    CHECK(std::filesystem::exists(run.checkpoint_path));
    CHECK(std::filesystem::exists(run.metrics_path));
    CHECK(std::filesystem::exists(dir / "vocab.txt"));

    LoadedModel lm = load_model(run.checkpoint_path);
    CHECK(lm.iteration == 3);
    CHECK(lm.use_rte);
    CHECK(lm.use_itda);
    CHECK(lm.vocab.size() == data.vocab.size());
    CHECK(lm.model.backbone.channels == model.backbone.channels);
    CHECK(lm.meta.at("config_digest") == config_digest({model, cfg}));

    const TrainPair& p = data.test[0];
    auto [mem_a, seg_a] = pair_memory_matrix(run.store, p, model, true, true);
    auto [mem_b, seg_b] = pair_memory_matrix(lm.store, p, lm.model, lm.use_rte, lm.use_itda);
    REQUIRE(mem_a.rows() == mem_b.rows());
    CHECK((mem_a - mem_b).cwiseAbs().maxCoeff() <= 1e-6f);
    CHECK((mem_a - mem_b).cwiseAbs().maxCoeff() == 0.0f);  // same bits, in fact
    CHECK(seg_a == seg_b);

    GenResult gen_a = decode_generate(run.store, mem_a, seg_a, model.decoder,
                                      data.vocab, DecodeStrategy::greedy);
    GenResult gen_b = decode_generate(lm.store, mem_b, seg_b, lm.model.decoder,
                                      lm.vocab, DecodeStrategy::greedy);
    CHECK(gen_a.caption == gen_b.caption);

    CHECK_THROWS_AS(load_model((dir / "missing.bin").string()), IoError);
}

TEST_CASE("training aborts on a non-finite loss with a diagnostic dump") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(4, 23, model);
    TrainConfig cfg = quick_cfg(30);
    cfg.lr = 1e12;  // guarantees numeric blow-up within a few steps
    const std::filesystem::path dir = fresh_dir("nan_abort");

    CHECK_THROWS_AS(train(data, model, cfg, dir.string()), TrainingError);
    CHECK(std::filesystem::exists(dir / "nan_dump.json"));
    nlohmann::json dump = nlohmann::json::parse(read_text_file((dir / "nan_dump.json").string()));
    CHECK(dump.contains("iter"));
    CHECK(dump.at("pair_ids").size() == 2);
}

TEST_CASE("full training objective passes a finite-difference check") {
    ModelConfig model = tiny_model(8);
    model.decoder.heads = 2;
    PreparedDataset data = tiny_data(2, 41, model);
    TrainConfig cfg;
    cfg.lambda = 0.05;

    ParamStore<double> store;
    std::mt19937_64 rng(77);
    init_model_params(store, model, data.vocab.size(), rng);
    const TrainPair& pair = data.train[0];

    auto f = [&]() {
        ad::Graph<double> g;
        return pair_training_loss(g, store, pair, model, cfg).total.scalar();
    };

    double l_cap = 0.0, l_sa = 0.0, l_da = 0.0, l_tot = 0.0;
    {
        ad::Graph<double> g;
        PairLossOut<double> out = pair_training_loss(g, store, pair, model, cfg);
        l_cap = out.l_cap.scalar();
        REQUIRE(out.has_align);
        l_sa = out.align.l_sa.scalar();
        l_da = out.align.l_da.scalar();
        l_tot = out.total.scalar();
        store.zero_grads();
        g.backward(out.total);
    }
    CHECK_NEAR(l_tot, total_loss(l_cap, l_sa, l_da, cfg), 1e-12);

    std::vector<gradcheck::Mat*> inputs;
    std::vector<gradcheck::Mat> grads;
    for (const std::string& name : store.names()) {
        ParamEntry<double>& e = store.at(name);
        REQUIRE(e.grad.size() != 0);
        inputs.push_back(&e.value);
        grads.push_back(e.grad);
    }
    gradcheck::Result res = gradcheck::check(f, inputs, grads);
    INFO(res.where);
    CHECK(res.ok);
    CHECK(res.worst_rel_err < 1e-4);
}

TEST_CASE("a tiny corpus overfits") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(8, 19, model);
    TrainConfig cfg;
    cfg.batch = 8;
    cfg.lr = 1e-3;
    cfg.max_iters = 150;
    cfg.seed = 4;
    cfg.val_every = 0;

    TrainRun run = train(data, model, cfg, "");
    const double first = run.log.front().at("l_cap").get<double>();
    CHECK(run.final_l_cap < 0.5 * first);
    CHECK(run.final_l_cap < 1.0);
}

TEST_CASE("train rejects degenerate inputs") {
    ModelConfig model = tiny_model();
    PreparedDataset data = tiny_data(3, 29, model);
    TrainConfig cfg = quick_cfg(1);

    PreparedDataset empty = data;
    empty.train.clear();
    CHECK_THROWS_AS(train(empty, model, cfg, ""), InputError);

    TrainConfig bad = cfg;
    bad.lr = 0.0;
    CHECK_THROWS_AS(train(data, model, bad, ""), ConfigError);
    bad = cfg;
    bad.use_rte = false;
    CHECK_THROWS_AS(train(data, model, bad, ""), ConfigError);
}
