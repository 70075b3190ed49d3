#include "polar/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>
#include <stdexcept>

#include "polar/binfile.hpp"

namespace polar {

const char* query_kind_name(QueryKind k) {
    switch (k) {
        case QueryKind::ContextSingle: return "context-single";
        case QueryKind::ContextMulti: return "context-multi";
        case QueryKind::ConceptOnly: return "concept-only";
        case QueryKind::GeneralCaption: return "general-caption";
    }
    return "?";
}

QueryKind parse_query_kind(std::string_view name) {
    if (name == "context-single") return QueryKind::ContextSingle;
    if (name == "context-multi") return QueryKind::ContextMulti;
    if (name == "concept-only") return QueryKind::ConceptOnly;
    if (name == "general-caption") return QueryKind::GeneralCaption;
    throw std::invalid_argument("unknown query kind: " + std::string(name));
}

nlohmann::json query_record_to_json(const QueryRecord& q) {
    return {{"text", q.text},
            {"kind", query_kind_name(q.kind)},
            {"ground_truth", q.ground_truth},
            {"concepts", q.concepts}};
}

QueryRecord query_record_from_json(const nlohmann::json& j) {
    QueryRecord q;
    q.text = j.at("text").get<std::string>();
    q.kind = parse_query_kind(j.at("kind").get<std::string>());
    q.ground_truth = j.at("ground_truth").get<std::vector<std::string>>();
    q.concepts = j.at("concepts").get<std::vector<std::string>>();
    return q;
}

void save_eval_suite(const std::string& path, std::span<const QueryRecord> queries) {
    nlohmann::json j;
    j["format_version"] = 1;
    j["kind"] = "eval_suite";
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& q : queries) arr.push_back(query_record_to_json(q));
    j["queries"] = std::move(arr);
    write_json_file(path, j);
}

std::vector<QueryRecord> load_eval_suite(const std::string& path) {
    const nlohmann::json j = read_json_file(path);
    try {
        if (j.at("kind").get<std::string>() != "eval_suite") {
            throw std::runtime_error("not an eval suite file");
        }
        std::vector<QueryRecord> out;
        for (const auto& q : j.at("queries")) out.push_back(query_record_from_json(q));
        return out;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt eval suite " + path + ": " + e.what());
    }
}

double reciprocal_rank(std::span<const std::string> ranked_ids,
                       const std::set<std::string>& ground_truth) {
    if (ground_truth.empty()) throw std::invalid_argument("reciprocal_rank: empty ground truth");
    for (size_t i = 0; i < ranked_ids.size(); ++i) {
        if (ground_truth.count(ranked_ids[i])) return 1.0 / static_cast<double>(i + 1);
    }
    return 0.0;
}

double recall_at_k(std::span<const std::string> ranked_ids,
                   const std::set<std::string>& ground_truth, int k) {
    if (k < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
    if (ground_truth.empty()) throw std::invalid_argument("recall_at_k: empty ground truth");
    const size_t top = std::min(static_cast<size_t>(k), ranked_ids.size());
    for (size_t i = 0; i < top; ++i) {
        if (ground_truth.count(ranked_ids[i])) return 1.0;
    }
    return 0.0;
}

double average_precision(std::span<const std::string> ranked_ids,
                         const std::set<std::string>& ground_truth) {
    if (ground_truth.empty()) throw std::invalid_argument("average_precision: empty ground truth");
    double sum = 0.0;
    int hits = 0;
    for (size_t i = 0; i < ranked_ids.size(); ++i) {
        if (ground_truth.count(ranked_ids[i])) {
            ++hits;
            sum += static_cast<double>(hits) / static_cast<double>(i + 1);
        }
    }
    return sum / static_cast<double>(ground_truth.size());
}

double caption_recall_probe(const FrozenEncoder& enc, const ConceptDelta* delta,
                            std::span<const CaptionProbePair> pairs, const RetrievalIndex& index,
                            int k) {
    if (pairs.empty()) throw std::invalid_argument("caption_recall_probe: empty pair list");
    std::vector<EncoderUpdate> updates;
    if (delta) updates.push_back(delta->to_update());
    double hits = 0.0;
    for (const auto& p : pairs) {
        const RankedResult r = query(enc, index, p.caption, updates, k);
        for (const auto& [id, score] : r.hits) {
            if (id == p.source_image_id) {
                hits += 1.0;
                break;
            }
        }
    }
    return hits / static_cast<double>(pairs.size());
}

namespace {

std::vector<std::string> ranked_ids_of(const RankedResult& r) {
    std::vector<std::string> ids;
    ids.reserve(r.hits.size());
    for (const auto& [id, score] : r.hits) ids.push_back(id);
    return ids;
}

}  // namespace

EvalReport evaluate(const FrozenEncoder& enc, const RetrievalIndex& index,
                    std::span<const QueryRecord> queries,
                    const std::map<std::string, ConceptDelta>& deltas, const EvalOptions& options,
                    const RetrievalIndex* concept_only_index) {
    if (queries.empty()) throw std::invalid_argument("evaluate: empty query set");

    EvalReport report;
    report.metadata = {{"ap_variant", "non-interpolated"},
                       {"multi_merge", merge_kind_name(options.multi_merge)},
                       {"recall_ks", options.recall_ks},
                       {"caption_k", options.caption_k},
                       {"concept_only_restricted",
                        options.restrict_concept_only && concept_only_index != nullptr}};

    struct Accum {
        int n = 0;
        double rr = 0.0, ap = 0.0;
        std::map<int, double> recall;
    };
    std::map<std::string, Accum> accum;

    for (const auto& q : queries) {
        PerQueryResult pr;
        pr.text = q.text;
        pr.kind = q.kind;
        try {
            if (q.ground_truth.empty()) throw std::invalid_argument("query has no ground truth");

            std::vector<EncoderUpdate> updates;
            if (q.kind == QueryKind::ContextMulti && q.concepts.size() > 1) {
                std::vector<ConceptDelta> parts;
                for (const auto& cid : q.concepts) {
                    const auto it = deltas.find(cid);
                    if (it == deltas.end()) throw std::runtime_error("missing delta for " + cid);
                    parts.push_back(it->second);
                }
                switch (options.multi_merge) {
                    case MergeKind::Add: updates.push_back(merge_add(parts).to_update()); break;
                    case MergeKind::Avg: updates.push_back(merge_avg(parts).to_update()); break;
                    case MergeKind::Max: updates.push_back(merge_max(parts).to_update()); break;
                }
            } else {
                for (const auto& cid : q.concepts) {
                    const auto it = deltas.find(cid);
                    if (it == deltas.end()) throw std::runtime_error("missing delta for " + cid);
                    updates.push_back(it->second.to_update());
                }
            }

            const RetrievalIndex& idx =
                (q.kind == QueryKind::ConceptOnly && options.restrict_concept_only &&
                 concept_only_index != nullptr)
                    ? *concept_only_index
                    : index;
            const RankedResult ranked =
                query(enc, idx, q.text, updates, static_cast<int>(idx.size()));
            const auto ids = ranked_ids_of(ranked);
            const std::set<std::string> gt(q.ground_truth.begin(), q.ground_truth.end());

            pr.rr = reciprocal_rank(ids, gt);
            pr.ap = average_precision(ids, gt);
            for (int k : options.recall_ks) pr.recall[k] = recall_at_k(ids, gt, k);
            if (q.kind == QueryKind::GeneralCaption) {
                pr.recall[options.caption_k] = recall_at_k(ids, gt, options.caption_k);
            }

            Accum& a = accum[query_kind_name(q.kind)];
            ++a.n;
            a.rr += pr.rr;
            a.ap += pr.ap;
            for (const auto& [k, v] : pr.recall) a.recall[k] += v;
        } catch (const std::exception& e) {
            pr.error = e.what();
        }
        report.per_query.push_back(std::move(pr));
    }

    for (const auto& [kind, a] : accum) {
        KindAggregate agg;
        agg.n = a.n;
        agg.mrr = a.rr / a.n;
        agg.map = a.ap / a.n;
        for (const auto& [k, v] : a.recall) agg.recall[k] = v / a.n;
        report.by_kind[kind] = agg;
    }
    const auto gc = report.by_kind.find(query_kind_name(QueryKind::GeneralCaption));
    if (gc != report.by_kind.end()) {
        const auto it = gc->second.recall.find(options.caption_k);
        if (it != gc->second.recall.end()) report.caption_recall10 = it->second;
    }
    return report;
}

nlohmann::json eval_report_to_json(const EvalReport& report) {
    nlohmann::json j;
    j["metadata"] = report.metadata;
    nlohmann::json kinds;
    for (const auto& [kind, agg] : report.by_kind) {
        nlohmann::json a;
        a["n"] = agg.n;
        a["mRR"] = agg.mrr;
        a["mAP"] = agg.map;
        for (const auto& [k, v] : agg.recall) a["r@" + std::to_string(k)] = v;
        kinds[kind] = std::move(a);
    }
    j["by_kind"] = std::move(kinds);
    j["caption_recall10"] = report.caption_recall10;
    nlohmann::json per = nlohmann::json::array();
    for (const auto& p : report.per_query) {
        nlohmann::json row;
        row["text"] = p.text;
        row["kind"] = query_kind_name(p.kind);
        if (!p.error.empty()) {
            row["error"] = p.error;
        } else {
            row["rr"] = p.rr;
            row["ap"] = p.ap;
            for (const auto& [k, v] : p.recall) row["r@" + std::to_string(k)] = v;
        }
        per.push_back(std::move(row));
    }
    j["per_query"] = std::move(per);
    return j;
}

std::string eval_report_table(const EvalReport& report) {
    std::ostringstream out;
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-16s %5s %7s %7s %7s %7s %7s\n", "kind", "n", "mRR", "mAP",
                  "r@1", "r@5", "r@10");
    out << buf;
    auto cell = [](const std::map<int, double>& m, int k) {
        const auto it = m.find(k);
        return it == m.end() ? -1.0 : it->second * 100.0;
    };
    for (const auto& [kind, agg] : report.by_kind) {
        std::snprintf(buf, sizeof(buf), "%-16s %5d %7.2f %7.2f %7.2f %7.2f %7.2f\n", kind.c_str(),
                      agg.n, agg.mrr * 100.0, agg.map * 100.0, cell(agg.recall, 1),
                      cell(agg.recall, 5), cell(agg.recall, 10));
        out << buf;
    }
    std::snprintf(buf, sizeof(buf), "caption r@10: %.2f\n", report.caption_recall10 * 100.0);
    out << buf;
    return out.str();
}

}  // namespace polar
