#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

#include "cortex/metrics.hpp"

#define CHECK_NEAR(a, b, tol) CHECK(std::abs((a) - (b)) <= (tol))

using namespace cortex;

#ifndef FIXTURE_DIR
#define FIXTURE_DIR "fixtures"
#endif

namespace {

struct Fixture {
    std::vector<EvalRecord> corpus;
    double bleu_total, rouge_total, cider_total;
    double bleu_sem, rouge_sem, cider_sem;
    double bleu_perfect, rouge_perfect, cider_perfect;
    double bleu_truncated;
    int n_semantic;
};

Fixture load_fixture() {
    std::ifstream f(std::string(FIXTURE_DIR) + "/metrics_golden.json");
    REQUIRE(f.good());
    nlohmann::json j = nlohmann::json::parse(f);
    Fixture fx;
    for (const auto& r : j.at("corpus")) {
        EvalRecord rec;
        rec.pair_id = r.at("pair_id").get<std::string>();
        rec.hypothesis = tokenize_caption(r.at("hyp").get<std::string>());
        for (const auto& ref : r.at("refs"))
            rec.references.push_back(tokenize_caption(ref.get<std::string>()));
        rec.is_semantic_change = r.at("semantic").get<bool>();
        fx.corpus.push_back(std::move(rec));
    }
    const auto& e = j.at("expected");
    fx.bleu_total = e.at("total").at("bleu4").get<double>();
    fx.rouge_total = e.at("total").at("rouge_l").get<double>();
    fx.cider_total = e.at("total").at("cider").get<double>();
    fx.bleu_sem = e.at("semantic").at("bleu4").get<double>();
    fx.rouge_sem = e.at("semantic").at("rouge_l").get<double>();
    fx.cider_sem = e.at("semantic").at("cider").get<double>();
    fx.bleu_perfect = e.at("perfect").at("bleu4").get<double>();
    fx.rouge_perfect = e.at("perfect").at("rouge_l").get<double>();
    fx.cider_perfect = e.at("perfect").at("cider").get<double>();
    fx.bleu_truncated = e.at("truncated_bleu4").get<double>();
    fx.n_semantic = j.at("n_semantic").get<int>();
    return fx;
}

EvalRecord rec_of(const std::string& hyp, std::vector<std::string> refs,
                  bool semantic = true) {
    EvalRecord r;
    r.pair_id = "t";
    r.hypothesis = tokenize_caption(hyp);
    for (const auto& s : refs) r.references.push_back(tokenize_caption(s));
    r.is_semantic_change = semantic;
    return r;
}

}  // namespace

TEST_CASE("fixture corpus matches the frozen goldens") {
    Fixture fx = load_fixture();
    REQUIRE(fx.corpus.size() == 50);
    CHECK_NEAR(bleu4(fx.corpus), fx.bleu_total, 1e-6);
    CHECK_NEAR(rouge_l(fx.corpus), fx.rouge_total, 1e-5);
    CHECK_NEAR(cider(fx.corpus), fx.cider_total, 1e-5);

    std::vector<EvalRecord> sem;
    for (const auto& r : fx.corpus)
        if (r.is_semantic_change) sem.push_back(r);
    CHECK(static_cast<int>(sem.size()) == fx.n_semantic);
    CHECK_NEAR(bleu4(sem), fx.bleu_sem, 1e-6);
    CHECK_NEAR(rouge_l(sem), fx.rouge_sem, 1e-5);
    CHECK_NEAR(cider(sem), fx.cider_sem, 1e-5);
}

TEST_CASE("perfect-match corpus hits the maxima; cider stays corpus-dependent") {
    Fixture fx = load_fixture();
    std::vector<EvalRecord> perfect = fx.corpus;
    for (auto& r : perfect) r.hypothesis = r.references[0];
    CHECK_NEAR(bleu4(perfect), 1.0, 1e-12);
    CHECK_NEAR(rouge_l(perfect), 1.0, 1e-12);
    CHECK_NEAR(bleu4(perfect), fx.bleu_perfect, 1e-6);
    CHECK_NEAR(rouge_l(perfect), fx.rouge_perfect, 1e-5);
    CHECK_NEAR(cider(perfect), fx.cider_perfect, 1e-5);
    CHECK(cider(perfect) < 10.0);
}

TEST_CASE("truncating hypotheses to one token never raises corpus bleu") {
    Fixture fx = load_fixture();
    std::vector<EvalRecord> truncated = fx.corpus;
    for (auto& r : truncated)
        if (r.hypothesis.size() > 1) r.hypothesis.resize(1);
    double full = bleu4(fx.corpus);
    double cut = bleu4(truncated);
    CHECK(cut <= full);
    CHECK_NEAR(cut, fx.bleu_truncated, 1e-6);
}

TEST_CASE("metrics ignore record order") {
    Fixture fx = load_fixture();
    std::vector<EvalRecord> shuffled = fx.corpus;
    std::mt19937_64 rng(5);
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    CHECK_NEAR(bleu4(shuffled), bleu4(fx.corpus), 1e-12);
    CHECK_NEAR(rouge_l(shuffled), rouge_l(fx.corpus), 1e-12);
    CHECK_NEAR(cider(shuffled), cider(fx.corpus), 1e-12);
}

TEST_CASE("clipped repetition zeroes bleu") {
    std::vector<EvalRecord> corpus = {rec_of("the the the the the", {"the cat sat"})};
    // clipped unigram precision 1/5; all higher orders empty -> score 0
    CHECK(bleu4(corpus) == 0.0);
}

TEST_CASE("hand-derived rouge cases") {
    CHECK_NEAR(rouge_l({rec_of("a b c d", {"a c d"})}), 0.8798076923076923, 1e-12);
    CHECK_NEAR(rouge_l({rec_of("the small red cube is missing",
                               {"the small red cube is missing"})}),
               1.0, 1e-12);
    CHECK(rouge_l({rec_of("x y z", {"a b c"})}) == 0.0);
}

TEST_CASE("disjoint vocabularies zero out cider") {
    std::vector<EvalRecord> corpus = {
        rec_of("x y z w", {"a b c d"}),
        rec_of("u v q t", {"e f g h"}),
    };
    CHECK(cider(corpus) == 0.0);
}

TEST_CASE("metric preconditions") {
    CHECK_THROWS_AS(bleu4({}), InputError);
    CHECK_THROWS_AS(rouge_l({}), InputError);
    CHECK_THROWS_AS(cider({rec_of("a b c", {"a b c"})}), ConfigError);
    EvalRecord no_refs;
    no_refs.pair_id = "x";
    no_refs.hypothesis = {"a"};
    CHECK_THROWS_AS(bleu4({no_refs}), InputError);
}

TEST_CASE("empty hypotheses contribute zeros without crashing") {
    std::vector<EvalRecord> corpus = {
        rec_of("", {"the small red cube is missing"}),
        rec_of("the large blue sphere changed to green",
               {"the large blue sphere changed to green"}),
    };
    CHECK(bleu4(corpus) > 0.0);   // second record supplies all counts
    CHECK(bleu4(corpus) < 1.0);   // brevity penalty bites
    CHECK_NEAR(rouge_l(corpus), 0.5, 1e-12);
    CHECK_NEAR(cider(corpus), 5.0, 1e-9);
}

TEST_CASE("no-change subset scores bleu 1 when the model nails it") {
    std::vector<EvalRecord> corpus = {
        rec_of("there is no change", {"there is no change"}, false),
        rec_of("there is no change", {"there is no change"}, false),
    };
    CHECK_NEAR(bleu4(corpus), 1.0, 1e-12);
}

TEST_CASE("scores stay inside their documented ranges") {
    Fixture fx = load_fixture();
    double b = bleu4(fx.corpus), r = rouge_l(fx.corpus), c = cider(fx.corpus);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
    CHECK(r >= 0.0);
    CHECK(r <= 1.0);
    CHECK(c >= 0.0);
    CHECK(c <= 10.0);
}

TEST_CASE("score_corpus fills both blocks and serializes n/a hooks") {
    Fixture fx = load_fixture();
    MetricReport rep = score_corpus(fx.corpus);
    CHECK(rep.total.n_records == 50);
    CHECK(rep.semantic_change.n_records == fx.n_semantic);
    CHECK_NEAR(rep.total.bleu4, fx.bleu_total, 1e-6);
    CHECK_NEAR(rep.semantic_change.cider, fx.cider_sem, 1e-5);

    std::string table = format_report(rep);
    CHECK(table.find("BLEU-4") != std::string::npos);
    CHECK(table.find("METEOR") != std::string::npos);
    CHECK(table.find("SPICE") != std::string::npos);
    CHECK(table.find("n/a") != std::string::npos);
    CHECK(table.find("semantic_change") != std::string::npos);

    nlohmann::json j = report_json(rep);
    CHECK(j.at("total").at("meteor").is_null());
    CHECK(j.at("total").at("spice").is_null());
    CHECK_NEAR(j.at("total").at("bleu4").get<double>(), fx.bleu_total, 1e-6);
    CHECK(j.at("semantic_change").at("n_records").get<int>() == fx.n_semantic);
}

TEST_CASE("tokenizer lowercases and collapses whitespace") {
    auto t = tokenize_caption("  The Small\tRED cube\n");
    REQUIRE(t.size() == 4);
    CHECK(t[0] == "the");
    CHECK(t[2] == "red");
    CHECK(join_tokens(t) == "the small red cube");
    CHECK(tokenize_caption("").empty());
}
