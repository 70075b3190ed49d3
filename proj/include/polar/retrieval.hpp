#pragma once

#include <span>
#include <string>
#include <vector>

#include "polar/encoder.hpp"

namespace polar {

// Brute-force cosine retrieval database: unique ids with unit-normalized
// embeddings, scored exhaustively (no approximate structures).
class RetrievalIndex {
public:
    RetrievalIndex() = default;

    // Builds from store records; `only_ids` restricts to a subset when given.
    static RetrievalIndex from_store(const ImageStore& store,
                                     std::span<const std::string> only_ids = {});

    void add(const std::string& id, std::span<const float> embedding);

    size_t size() const { return ids_.size(); }
    int dim() const { return dim_; }
    const std::vector<std::string>& ids() const { return ids_; }
    std::span<const float> embedding(size_t i) const;

    void save(const std::string& path) const;
    static RetrievalIndex load(const std::string& path);

private:
    std::vector<std::string> ids_;
    std::vector<float> embeddings_;  // row-major, size() x dim
    int dim_ = 0;
};

struct RankedResult {
    std::vector<std::pair<std::string, float>> hits;  // scores non-increasing,
                                                      // ties by ascending id
    std::string query_text;
    std::vector<std::string> active_concepts;
};

// Ranks ids by score descending, ascending id on ties; returns the top k
// (clamped to the index size).
RankedResult rank_embedding(const RetrievalIndex& index, std::span<const float> query_embedding,
                            int k);

// Encodes text with the updates applied, normalizes, scores every image.
// Throws on k < 1, an empty index, or tokenization failure.
RankedResult query(const FrozenEncoder& enc, const RetrievalIndex& index, const std::string& text,
                   std::span<const EncoderUpdate> updates, int k);

struct BatchQueryItem {
    std::string text;
    std::vector<EncoderUpdate> updates;
};

struct BatchQueryOutcome {
    bool ok = false;
    RankedResult result;
    std::string error;
};

// Runs query per item; a single failure is recorded per item and the batch
// continues.
std::vector<BatchQueryOutcome> batch_query(const FrozenEncoder& enc, const RetrievalIndex& index,
                                           std::span<const BatchQueryItem> items, int k);

}  // namespace polar
