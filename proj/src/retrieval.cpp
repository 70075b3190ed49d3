#include "polar/retrieval.hpp"

#include <algorithm>
#include <stdexcept>

#include "polar/binfile.hpp"

namespace polar {

RetrievalIndex RetrievalIndex::from_store(const ImageStore& store,
                                          std::span<const std::string> only_ids) {
    RetrievalIndex idx;
    if (only_ids.empty()) {
        for (const auto& rec : store.records()) idx.add(rec.id, rec.embedding);
    } else {
        for (const auto& id : only_ids) {
            const auto& rec = store.get(id);
            idx.add(rec.id, rec.embedding);
        }
    }
    return idx;
}

void RetrievalIndex::add(const std::string& id, std::span<const float> embedding) {
    if (dim_ == 0) {
        dim_ = static_cast<int>(embedding.size());
    } else if (dim_ != static_cast<int>(embedding.size())) {
        throw std::invalid_argument("index: embedding width mismatch for " + id);
    }
    for (const auto& existing : ids_) {
        if (existing == id) throw std::invalid_argument("index: duplicate id " + id);
    }
    ids_.push_back(id);
    embeddings_.insert(embeddings_.end(), embedding.begin(), embedding.end());
}

std::span<const float> RetrievalIndex::embedding(size_t i) const {
    return {embeddings_.data() + i * dim_, static_cast<size_t>(dim_)};
}

void RetrievalIndex::save(const std::string& path) const {
    nlohmann::json header;
    header["format_version"] = 1;
    header["kind"] = "index";
    header["ids"] = ids_;
    header["dim"] = dim_;
    write_container(path, header, embeddings_);
}

RetrievalIndex RetrievalIndex::load(const std::string& path) {
    const BinContainer c = read_container(path);
    if (c.header.value("kind", "") != "index") throw std::runtime_error("not an index file: " + path);
    if (c.header.value("format_version", -1) != 1) {
        throw std::runtime_error("unsupported index format version in " + path);
    }
    RetrievalIndex idx;
    idx.ids_ = c.header.at("ids").get<std::vector<std::string>>();
    idx.dim_ = c.header.at("dim").get<int>();
    if (c.blob.size() != idx.ids_.size() * static_cast<size_t>(idx.dim_)) {
        throw std::runtime_error("index blob size mismatch in " + path);
    }
    idx.embeddings_ = c.blob;
    return idx;
}

RankedResult rank_embedding(const RetrievalIndex& index, std::span<const float> query_embedding,
                            int k) {
    if (k < 1) throw std::invalid_argument("query: k must be >= 1");
    if (index.size() == 0) throw std::invalid_argument("query: empty index");
    const auto q = l2_normalize(query_embedding);

    std::vector<std::pair<std::string, float>> scored;
    scored.reserve(index.size());
    for (size_t i = 0; i < index.size(); ++i) {
        const auto e = index.embedding(i);
        float s = 0.0f;
        for (size_t j = 0; j < e.size(); ++j) s += q[j] * e[j];
        scored.emplace_back(index.ids()[i], s);
    }
    std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (static_cast<size_t>(k) < scored.size()) scored.resize(static_cast<size_t>(k));

    RankedResult r;
    r.hits = std::move(scored);
    return r;
}

RankedResult query(const FrozenEncoder& enc, const RetrievalIndex& index, const std::string& text,
                   std::span<const EncoderUpdate> updates, int k) {
    if (k < 1) throw std::invalid_argument("query: k must be >= 1");
    if (index.size() == 0) throw std::invalid_argument("query: empty index");
    const auto tokens = tokenize(enc.config(), text);
    const auto embedding = encode_text(enc, tokens, updates);
    RankedResult r = rank_embedding(index, embedding, k);
    r.query_text = text;
    return r;
}

std::vector<BatchQueryOutcome> batch_query(const FrozenEncoder& enc, const RetrievalIndex& index,
                                           std::span<const BatchQueryItem> items, int k) {
    std::vector<BatchQueryOutcome> out;
    out.reserve(items.size());
    for (const auto& item : items) {
        BatchQueryOutcome o;
        try {
            o.result = query(enc, index, item.text, item.updates, k);
            o.ok = true;
        } catch (const std::exception& e) {
            o.error = e.what();
        }
        out.push_back(std::move(o));
    }
    return out;
}

}  // namespace polar
