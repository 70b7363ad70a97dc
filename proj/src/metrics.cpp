#include "cortex/metrics.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <limits>
#include <sstream>
#include <unordered_map>

namespace cortex {

namespace {

constexpr int kMaxOrder = 4;
constexpr double kRougeBeta = 1.2;

using Counts = std::unordered_map<std::string, double>;

// n-gram key: tokens joined on a separator that cannot occur in a token.
Counts ngram_counts(const std::vector<std::string>& tokens, int n) {
    Counts out;
    if (static_cast<int>(tokens.size()) < n) return out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= tokens.size(); ++i) {
        std::string key = tokens[i];
        for (int k = 1; k < n; ++k) {
            key += '\x1f';
            key += tokens[i + static_cast<std::size_t>(k)];
        }
        out[key] += 1.0;
    }
    return out;
}

void require_scored(const std::vector<EvalRecord>& corpus) {
    if (corpus.empty()) throw InputError("metrics: empty corpus");
    for (const EvalRecord& r : corpus)
        if (r.references.empty())
            throw InputError("metrics: record '" + r.pair_id + "' has no references");
}

std::size_t lcs_length(const std::vector<std::string>& a,
                       const std::vector<std::string>& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1])
                cur[j] = prev[j - 1] + 1;
            else
                cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

double cosine(const Counts& a, const Counts& b) {
    double dot = 0, na = 0, nb = 0;
    for (const auto& [k, v] : a) {
        na += v * v;
        auto it = b.find(k);
        if (it != b.end()) dot += v * it->second;
    }
    for (const auto& [k, v] : b) nb += v * v;
    if (na <= 0 || nb <= 0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

std::string fmt_cell(double v) {
    if (std::isnan(v)) return "   n/a";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%6.4f", v);
    return buf;
}

}  // namespace

std::vector<std::string> tokenize_caption(const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : text) {
        if (std::isspace(static_cast<unsigned char>(c))) {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

std::string join_tokens(const std::vector<std::string>& tokens) {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i) out += ' ';
        out += tokens[i];
    }
    return out;
}

double bleu4(const std::vector<EvalRecord>& corpus) {
    require_scored(corpus);
    double num[kMaxOrder] = {0, 0, 0, 0};
    double den[kMaxOrder] = {0, 0, 0, 0};
    std::size_t hyp_len = 0, ref_len = 0;
    for (const EvalRecord& rec : corpus) {
        const auto& hyp = rec.hypothesis;
        hyp_len += hyp.size();
        // closest reference length; ties go to the shorter reference
        std::size_t best = rec.references[0].size();
        for (const auto& ref : rec.references) {
            auto gap = [&](std::size_t L) {
                return L > hyp.size() ? L - hyp.size() : hyp.size() - L;
            };
            if (gap(ref.size()) < gap(best) ||
                (gap(ref.size()) == gap(best) && ref.size() < best))
                best = ref.size();
        }
        ref_len += best;
        for (int n = 1; n <= kMaxOrder; ++n) {
            Counts hc = ngram_counts(hyp, n);
            Counts max_ref;
            for (const auto& ref : rec.references)
                for (const auto& [k, v] : ngram_counts(ref, n))
                    max_ref[k] = std::max(max_ref[k], v);
            for (const auto& [k, v] : hc) {
                auto it = max_ref.find(k);
                num[n - 1] += std::min(v, it == max_ref.end() ? 0.0 : it->second);
            }
            if (hyp.size() >= static_cast<std::size_t>(n))
                den[n - 1] += static_cast<double>(hyp.size() - n + 1);
        }
    }
    double log_p = 0;
    for (int n = 0; n < kMaxOrder; ++n) {
        if (num[n] <= 0) return 0.0;
        log_p += 0.25 * std::log(num[n] / den[n]);
    }
    double bp = hyp_len >= ref_len
                    ? 1.0
                    : std::exp(1.0 - static_cast<double>(ref_len) /
                                         static_cast<double>(hyp_len));
    return bp * std::exp(log_p);
}

double rouge_l(const std::vector<EvalRecord>& corpus) {
    require_scored(corpus);
    const double b2 = kRougeBeta * kRougeBeta;
    double sum = 0;
    for (const EvalRecord& rec : corpus) {
        double best = 0;
        for (const auto& ref : rec.references) {
            std::size_t lcs = lcs_length(rec.hypothesis, ref);
            if (lcs == 0 || rec.hypothesis.empty() || ref.empty()) continue;
            double p = static_cast<double>(lcs) / static_cast<double>(rec.hypothesis.size());
            double r = static_cast<double>(lcs) / static_cast<double>(ref.size());
            best = std::max(best, (1 + b2) * p * r / (r + b2 * p));
        }
        sum += best;
    }
    return sum / static_cast<double>(corpus.size());
}

double cider(const std::vector<EvalRecord>& corpus) {
    require_scored(corpus);
    if (corpus.size() < 2)
        throw ConfigError("cider: needs at least 2 records for document frequency");
    const double logN = std::log(static_cast<double>(corpus.size()));
    std::array<Counts, kMaxOrder> df;
    for (const EvalRecord& rec : corpus) {
        for (int n = 1; n <= kMaxOrder; ++n) {
            Counts seen;
            for (const auto& ref : rec.references)
                for (const auto& [k, v] : ngram_counts(ref, n)) seen[k] = 1.0;
            for (const auto& [k, v] : seen) df[static_cast<std::size_t>(n - 1)][k] += 1.0;
        }
    }
    auto tfidf = [&](const std::vector<std::string>& tokens, int n) {
        Counts vec = ngram_counts(tokens, n);
        const Counts& dfn = df[static_cast<std::size_t>(n - 1)];
        for (auto& [k, v] : vec) {
            auto it = dfn.find(k);
            double d = it == dfn.end() ? 0.0 : it->second;
            v *= logN - std::log(std::max(1.0, d));
        }
        return vec;
    };
    double total = 0;
    for (const EvalRecord& rec : corpus) {
        double rec_score = 0;
        for (int n = 1; n <= kMaxOrder; ++n) {
            Counts hv = tfidf(rec.hypothesis, n);
            double ref_mean = 0;
            for (const auto& ref : rec.references)
                ref_mean += cosine(hv, tfidf(ref, n));
            rec_score += ref_mean / static_cast<double>(rec.references.size());
        }
        total += rec_score / kMaxOrder;
    }
    return 10.0 * total / static_cast<double>(corpus.size());
}

MetricReport score_corpus(const std::vector<EvalRecord>& corpus) {
    MetricReport rep;
    auto fill = [](MetricBlock& block, const std::vector<EvalRecord>& recs) {
        block.n_records = static_cast<int>(recs.size());
        if (recs.empty()) return;
        block.bleu4 = bleu4(recs);
        block.rouge_l = rouge_l(recs);
        if (recs.size() >= 2) block.cider = cider(recs);
    };
    fill(rep.total, corpus);
    std::vector<EvalRecord> sem;
    for (const EvalRecord& r : corpus)
        if (r.is_semantic_change) sem.push_back(r);
    fill(rep.semantic_change, sem);
    return rep;
}

std::string format_report(const MetricReport& report) {
    std::ostringstream os;
    os << "metric      total    semantic_change\n";
    auto row = [&](const char* name, double t, double s) {
        os << name << "  " << fmt_cell(t) << "   " << fmt_cell(s) << "\n";
    };
    row("BLEU-4  ", report.total.bleu4, report.semantic_change.bleu4);
    row("METEOR  ", std::numeric_limits<double>::quiet_NaN(),
        std::numeric_limits<double>::quiet_NaN());
    row("ROUGE-L ", report.total.rouge_l, report.semantic_change.rouge_l);
    row("CIDEr   ", report.total.cider, report.semantic_change.cider);
    row("SPICE   ", std::numeric_limits<double>::quiet_NaN(),
        std::numeric_limits<double>::quiet_NaN());
    os << "records     " << report.total.n_records << "        "
       << report.semantic_change.n_records << "\n";
    return os.str();
}

nlohmann::json report_json(const MetricReport& report) {
    auto block = [](const MetricBlock& b) {
        nlohmann::json j;
        j["n_records"] = b.n_records;
        auto put = [&](const char* key, double v) {
            if (std::isnan(v))
                j[key] = nullptr;
            else
                j[key] = v;
        };
        put("bleu4", b.bleu4);
        put("rouge_l", b.rouge_l);
        put("cider", b.cider);
        j["meteor"] = nullptr;
        j["spice"] = nullptr;
        return j;
    };
    return nlohmann::json{{"total", block(report.total)},
                          {"semantic_change", block(report.semantic_change)}};
}

}  // namespace cortex
