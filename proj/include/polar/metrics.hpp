#pragma once

#include <map>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "polar/delta.hpp"
#include "polar/retrieval.hpp"

namespace polar {

enum class QueryKind { ContextSingle, ContextMulti, ConceptOnly, GeneralCaption };

const char* query_kind_name(QueryKind k);
QueryKind parse_query_kind(std::string_view name);

struct QueryRecord {
    std::string text;
    QueryKind kind = QueryKind::ContextSingle;
    std::vector<std::string> ground_truth;  // at least one id
    std::vector<std::string> concepts;      // referenced concept ids
};

nlohmann::json query_record_to_json(const QueryRecord& q);
QueryRecord query_record_from_json(const nlohmann::json& j);
void save_eval_suite(const std::string& path, std::span<const QueryRecord> queries);
std::vector<QueryRecord> load_eval_suite(const std::string& path);

// 1/(1-based rank of the first ground-truth hit); 0 when no hit appears in
// the ranking. Throws on an empty ground-truth set.
double reciprocal_rank(std::span<const std::string> ranked_ids,
                       const std::set<std::string>& ground_truth);

// 1 when any ground-truth id appears in the top k, else 0 (per query;
// averaging is the caller's job). Throws on k < 1 or empty ground truth.
double recall_at_k(std::span<const std::string> ranked_ids,
                   const std::set<std::string>& ground_truth, int k);

// Non-interpolated average precision: (1/|gt|) * sum over hits of
// precision@rank(hit); ground truth missing from the ranking contributes 0.
double average_precision(std::span<const std::string> ranked_ids,
                         const std::set<std::string>& ground_truth);

// ---------------------------------------------------------------------------

struct CaptionProbePair {
    std::string caption;          // references no personal concept
    std::string source_image_id;  // the image the caption was written for
};

// Fraction of captions whose source image lands in the top k with `delta`
// active (nullptr probes the base encoder). A drop versus the base value
// measures forgetting. Throws on an empty pair list.
double caption_recall_probe(const FrozenEncoder& enc, const ConceptDelta* delta,
                            std::span<const CaptionProbePair> pairs, const RetrievalIndex& index,
                            int k = 10);

// ---------------------------------------------------------------------------

struct KindAggregate {
    int n = 0;
    double mrr = 0.0;
    double map = 0.0;
    std::map<int, double> recall;  // k -> mean recall@k
};

struct PerQueryResult {
    std::string text;
    QueryKind kind = QueryKind::ContextSingle;
    double rr = 0.0;
    double ap = 0.0;
    std::map<int, double> recall;
    std::string error;  // non-empty when the query failed
};

struct EvalReport {
    std::map<std::string, KindAggregate> by_kind;  // keyed by kind name
    double caption_recall10 = 0.0;
    std::vector<PerQueryResult> per_query;
    nlohmann::json metadata;
};

struct EvalOptions {
    std::vector<int> recall_ks = {1, 5, 10};
    // Concept-only queries run against `concept_only_index` when it is given.
    bool restrict_concept_only = true;
    MergeKind multi_merge = MergeKind::Add;
    int caption_k = 10;
};

// Runs every query with the referenced deltas applied (multi-concept queries
// merge them, add by default), and aggregates all metrics per query kind.
// Queries with a missing delta are recorded as per-query errors and skipped
// from the aggregates. Throws on an empty query set.
EvalReport evaluate(const FrozenEncoder& enc, const RetrievalIndex& index,
                    std::span<const QueryRecord> queries,
                    const std::map<std::string, ConceptDelta>& deltas,
                    const EvalOptions& options = {},
                    const RetrievalIndex* concept_only_index = nullptr);

nlohmann::json eval_report_to_json(const EvalReport& report);
// Aligned table, values x100 (mRR | mAP | r@1 | r@5 | r@10).
std::string eval_report_table(const EvalReport& report);

}  // namespace polar
