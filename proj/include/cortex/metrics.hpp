#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "cortex/common.hpp"

namespace cortex {

struct EvalRecord {
    std::string pair_id;
    std::vector<std::string> hypothesis;
    std::vector<std::vector<std::string>> references;  // at least one
    bool is_semantic_change = false;
};

// Lowercases and splits on whitespace; collapses runs of spaces.
std::vector<std::string> tokenize_caption(const std::string& text);
std::string join_tokens(const std::vector<std::string>& tokens);

// Corpus-level BLEU-4: clipped n-gram precisions n=1..4, geometric mean,
// closest-reference-length brevity penalty, no smoothing.
double bleu4(const std::vector<EvalRecord>& corpus);

// Mean over records of the best-per-reference LCS F-measure, beta = 1.2.
double rouge_l(const std::vector<EvalRecord>& corpus);

// Plain CIDEr: TF-IDF n-gram cosine averaged over n=1..4 and references,
// scaled by 10. Document frequency counted once per record over the
// reference side; needs at least two records.
double cider(const std::vector<EvalRecord>& corpus);

struct MetricBlock {
    int n_records = 0;
    double bleu4 = std::numeric_limits<double>::quiet_NaN();
    double rouge_l = std::numeric_limits<double>::quiet_NaN();
    double cider = std::numeric_limits<double>::quiet_NaN();
};

struct MetricReport {
    MetricBlock total;
    MetricBlock semantic_change;
};

MetricReport score_corpus(const std::vector<EvalRecord>& corpus);
std::string format_report(const MetricReport& report);
nlohmann::json report_json(const MetricReport& report);

}  // namespace cortex
