#include "polar/delta.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include "polar/binfile.hpp"

namespace polar {

namespace {
constexpr int kDeltaFormatVersion = 1;
}

std::string ConceptSpec::concept_phrase() const {
    return class_name.empty() ? v_star : v_star + " " + class_name;
}

void ConceptSpec::validate(const EncoderConfig& cfg) const {
    if (concept_id.empty()) throw std::invalid_argument("concept spec: empty concept id");
    if (cfg.token_id(v_star) < 0) {
        throw std::invalid_argument("concept spec: placeholder token \"" + v_star +
                                    "\" not in vocab");
    }
    if (!class_name.empty() && cfg.token_id(class_name) < 0) {
        throw std::invalid_argument("concept spec: class name \"" + class_name + "\" not in vocab");
    }
    if (train_image_ids.empty()) {
        throw std::invalid_argument("concept spec: no training images for " + concept_id);
    }
}

const SiteFactors* ConceptDelta::find_site(const SiteAddress& addr) const {
    for (const auto& s : sites) {
        if (s.addr == addr) return &s;
    }
    return nullptr;
}

void ConceptDelta::validate() const {
    if (rank < 1) throw std::invalid_argument("delta: rank must be >= 1");
    for (const auto& s : sites) {
        if (s.a.rows != rank || s.b.cols != rank) {
            throw std::invalid_argument("delta: factor rank mismatch at site " + to_string(s.addr));
        }
        if (s.b.rows < 1 || s.a.cols < 1) {
            throw std::invalid_argument("delta: degenerate factor shape at " + to_string(s.addr));
        }
        if (hyper.constrain_a) {
            for (int r = 0; r < s.a.rows; ++r) {
                const double n = l2_norm(s.a.row(r));
                if (std::abs(n - 1.0) > 1e-6) {
                    throw std::invalid_argument("delta: constrained a row is not unit norm at " +
                                                to_string(s.addr));
                }
            }
        }
    }
}

EncoderUpdate ConceptDelta::to_update() const {
    EncoderUpdate up;
    up.encoder_fingerprint = encoder_fingerprint;
    for (const auto& s : sites) {
        up.sites.push_back({s.addr, matmul(s.b, s.a)});
    }
    return up;
}

ConceptDelta ConceptDelta::init(const std::string& concept_id, const FrozenEncoder& enc,
                                std::span<const SiteAddress> sites, int rank, Rng& rng,
                                const Matrix* frozen_a) {
    ConceptDelta d;
    d.concept_id = concept_id;
    d.encoder_fingerprint = enc.fingerprint();
    d.rank = rank;
    for (const SiteAddress& addr : sites) {
        const Matrix& w = enc.site_weight(addr);
        SiteFactors f;
        f.addr = addr;
        f.b = Matrix(w.rows, rank);
        if (frozen_a) {
            if (frozen_a->rows != rank || frozen_a->cols != w.cols) {
                throw std::invalid_argument("frozen a factor shape does not fit site " +
                                            to_string(addr));
            }
            f.a = *frozen_a;
        } else {
            f.a = Matrix(rank, w.cols);
            for (int r = 0; r < rank; ++r) {
                const auto row = rng.unit_vector(w.cols);
                std::copy(row.begin(), row.end(), f.a.row_ptr(r));
            }
        }
        d.sites.push_back(std::move(f));
    }
    return d;
}

Matrix materialize(const ConceptDelta& delta, const SiteAddress& addr) {
    const SiteFactors* s = delta.find_site(addr);
    if (!s) {
        throw std::invalid_argument("delta " + delta.concept_id + " has no site " + to_string(addr));
    }
    return matmul(s->b, s->a);
}

const char* merge_kind_name(MergeKind k) {
    switch (k) {
        case MergeKind::Add: return "add";
        case MergeKind::Avg: return "avg";
        case MergeKind::Max: return "max";
    }
    return "?";
}

MergeKind parse_merge_kind(std::string_view name) {
    if (name == "add") return MergeKind::Add;
    if (name == "avg") return MergeKind::Avg;
    if (name == "max") return MergeKind::Max;
    throw std::invalid_argument("unknown merge kind: " + std::string(name));
}

namespace {

// Shared preconditions for all merges: non-empty, one fingerprint, one site set.
std::vector<SiteAddress> check_merge_inputs(std::span<const ConceptDelta> deltas) {
    if (deltas.empty()) throw std::invalid_argument("merge: empty delta list");
    std::vector<SiteAddress> addrs;
    for (const auto& s : deltas.front().sites) addrs.push_back(s.addr);
    std::sort(addrs.begin(), addrs.end());
    for (const auto& d : deltas) {
        if (d.encoder_fingerprint != deltas.front().encoder_fingerprint) {
            throw std::invalid_argument("merge: deltas trained against different encoders (" +
                                        d.concept_id + ")");
        }
        std::vector<SiteAddress> da;
        for (const auto& s : d.sites) da.push_back(s.addr);
        std::sort(da.begin(), da.end());
        if (da != addrs) {
            throw std::invalid_argument("merge: site sets differ (" + d.concept_id + ")");
        }
    }
    return addrs;
}

MergedDelta merged_shell(std::span<const ConceptDelta> deltas, MergeKind kind) {
    MergedDelta m;
    m.kind = kind;
    m.encoder_fingerprint = deltas.front().encoder_fingerprint;
    for (const auto& d : deltas) m.concept_ids.push_back(d.concept_id);
    return m;
}

}  // namespace

MergedDelta merge_add(std::span<const ConceptDelta> deltas) {
    const auto addrs = check_merge_inputs(deltas);
    MergedDelta m = merged_shell(deltas, MergeKind::Add);
    for (const SiteAddress& addr : addrs) {
        int total_rank = 0;
        for (const auto& d : deltas) total_rank += d.rank;
        const SiteFactors* first = deltas.front().find_site(addr);
        MergedSite ms;
        ms.addr = addr;
        ms.a = Matrix(total_rank, first->a.cols);
        ms.b = Matrix(first->b.rows, total_rank);
        int off = 0;
        for (const auto& d : deltas) {
            const SiteFactors* s = d.find_site(addr);
            if (s->a.cols != first->a.cols || s->b.rows != first->b.rows) {
                throw std::invalid_argument("merge: factor shapes differ at " + to_string(addr));
            }
            for (int r = 0; r < s->a.rows; ++r) {
                std::copy(s->a.row_ptr(r), s->a.row_ptr(r) + s->a.cols, ms.a.row_ptr(off + r));
            }
            for (int i = 0; i < s->b.rows; ++i) {
                for (int r = 0; r < s->b.cols; ++r) ms.b.at(i, off + r) = s->b.at(i, r);
            }
            ms.source_ranks.push_back(d.rank);
            off += d.rank;
        }
        m.sites.push_back(std::move(ms));
    }
    return m;
}

MergedDelta merge_avg(std::span<const ConceptDelta> deltas) {
    const auto addrs = check_merge_inputs(deltas);
    MergedDelta m = merged_shell(deltas, MergeKind::Avg);
    for (const SiteAddress& addr : addrs) {
        MergedSite ms;
        ms.addr = addr;
        ms.dense = materialize(deltas.front(), addr);
        for (size_t i = 1; i < deltas.size(); ++i) add_inplace(ms.dense, materialize(deltas[i], addr));
        scale_inplace(ms.dense, 1.0f / static_cast<float>(deltas.size()));
        m.sites.push_back(std::move(ms));
    }
    return m;
}

MergedDelta merge_max(std::span<const ConceptDelta> deltas) {
    const auto addrs = check_merge_inputs(deltas);
    MergedDelta m = merged_shell(deltas, MergeKind::Max);
    for (const SiteAddress& addr : addrs) {
        MergedSite ms;
        ms.addr = addr;
        ms.dense = materialize(deltas.front(), addr);
        for (size_t i = 1; i < deltas.size(); ++i) {
            const Matrix dw = materialize(deltas[i], addr);
            for (size_t j = 0; j < ms.dense.data.size(); ++j) {
                ms.dense.data[j] = std::max(ms.dense.data[j], dw.data[j]);
            }
        }
        m.sites.push_back(std::move(ms));
    }
    return m;
}

Matrix materialize(const MergedDelta& merged, const SiteAddress& addr) {
    for (const auto& s : merged.sites) {
        if (!(s.addr == addr)) continue;
        if (merged.kind != MergeKind::Add) return s.dense;
        // Per-source-block products summed in input order, so the result is
        // exactly sum_i materialize(delta_i).
        Matrix out(s.b.rows, s.a.cols);
        int off = 0;
        for (int src_rank : s.source_ranks) {
            Matrix a_blk(src_rank, s.a.cols);
            Matrix b_blk(s.b.rows, src_rank);
            for (int r = 0; r < src_rank; ++r) {
                std::copy(s.a.row_ptr(off + r), s.a.row_ptr(off + r) + s.a.cols, a_blk.row_ptr(r));
            }
            for (int i = 0; i < s.b.rows; ++i) {
                for (int r = 0; r < src_rank; ++r) b_blk.at(i, r) = s.b.at(i, off + r);
            }
            add_inplace(out, matmul(b_blk, a_blk));
            off += src_rank;
        }
        return out;
    }
    throw std::invalid_argument("merged delta has no site " + to_string(addr));
}

EncoderUpdate MergedDelta::to_update() const {
    EncoderUpdate up;
    up.encoder_fingerprint = encoder_fingerprint;
    for (const auto& s : sites) {
        up.sites.push_back({s.addr, materialize(*this, s.addr)});
    }
    return up;
}

Matrix orthogonal_basis(uint64_t seed, int n_concepts, int n) {
    if (n_concepts < 1) throw std::invalid_argument("orthogonal_basis: n_concepts must be >= 1");
    if (n_concepts > n) {
        throw std::invalid_argument("orthogonal_basis: cannot fit " + std::to_string(n_concepts) +
                                    " orthonormal vectors in dimension " + std::to_string(n));
    }
    Rng rng(seed);
    std::vector<std::vector<double>> rows;
    int attempts = 0;
    while (static_cast<int>(rows.size()) < n_concepts) {
        if (++attempts > 100 * n_concepts) {
            throw std::runtime_error("orthogonal_basis: failed to build basis");
        }
        std::vector<double> v(n);
        for (int i = 0; i < n; ++i) v[i] = rng.next_gaussian();
        for (const auto& u : rows) {
            double proj = 0.0;
            for (int i = 0; i < n; ++i) proj += v[i] * u[i];
            for (int i = 0; i < n; ++i) v[i] -= proj * u[i];
        }
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm < 1e-6) continue;  // degenerate draw, retry
        for (double& x : v) x /= norm;
        rows.push_back(std::move(v));
    }
    Matrix basis(n_concepts, n);
    for (int r = 0; r < n_concepts; ++r) {
        for (int i = 0; i < n; ++i) basis.at(r, i) = static_cast<float>(rows[r][i]);
    }
    return basis;
}

namespace {

nlohmann::json matrix_to_json(const Matrix& m) {
    nlohmann::json rows = nlohmann::json::array();
    for (int i = 0; i < m.rows; ++i) {
        nlohmann::json row = nlohmann::json::array();
        for (int j = 0; j < m.cols; ++j) row.push_back(static_cast<double>(m.at(i, j)));
        rows.push_back(std::move(row));
    }
    return rows;
}

Matrix matrix_from_json(const nlohmann::json& j) {
    if (!j.is_array() || j.empty()) throw std::runtime_error("matrix: expected non-empty array");
    const int rows = static_cast<int>(j.size());
    const int cols = static_cast<int>(j.at(0).size());
    Matrix m(rows, cols);
    for (int i = 0; i < rows; ++i) {
        const auto& row = j.at(i);
        if (static_cast<int>(row.size()) != cols) throw std::runtime_error("matrix: ragged rows");
        for (int c = 0; c < cols; ++c) m.at(i, c) = static_cast<float>(row.at(c).get<double>());
    }
    return m;
}

nlohmann::json site_addr_to_json(const SiteAddress& a) {
    return {{"layer", a.layer}, {"site", site_name(a.site)}};
}

SiteAddress site_addr_from_json(const nlohmann::json& j) {
    return SiteAddress(j.at("layer").get<int>(), parse_site(j.at("site").get<std::string>()));
}

nlohmann::json hyper_to_json(const DeltaHyper& h) {
    return {{"lambda", h.lambda},
            {"iterations", h.iterations},
            {"learning_rate", h.learning_rate},
            {"seed", h.seed},
            {"constrain_a", h.constrain_a},
            {"use_negatives", h.use_negatives}};
}

DeltaHyper hyper_from_json(const nlohmann::json& j) {
    DeltaHyper h;
    h.lambda = j.at("lambda").get<double>();
    h.iterations = j.at("iterations").get<int>();
    h.learning_rate = j.at("learning_rate").get<double>();
    h.seed = j.at("seed").get<uint64_t>();
    h.constrain_a = j.at("constrain_a").get<bool>();
    h.use_negatives = j.at("use_negatives").get<bool>();
    return h;
}

}  // namespace

void save_delta(const std::string& path, const ConceptDelta& delta) {
    nlohmann::json j;
    j["format_version"] = kDeltaFormatVersion;
    j["kind"] = "concept_delta";
    j["concept_id"] = delta.concept_id;
    j["encoder_fingerprint"] = delta.encoder_fingerprint;
    j["rank"] = delta.rank;
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& s : delta.sites) {
        nlohmann::json js = site_addr_to_json(s.addr);
        js["A"] = matrix_to_json(s.a);
        js["B"] = matrix_to_json(s.b);
        sites.push_back(std::move(js));
    }
    j["sites"] = std::move(sites);
    j["hyper"] = hyper_to_json(delta.hyper);
    write_json_file(path, j);
}

ConceptDelta load_delta(const std::string& path, const FrozenEncoder* expected_encoder) {
    const nlohmann::json j = read_json_file(path);
    try {
        if (j.at("format_version").get<int>() != kDeltaFormatVersion) {
            throw std::runtime_error("unsupported delta format version");
        }
        if (j.at("kind").get<std::string>() != "concept_delta") {
            throw std::runtime_error("not a concept delta file");
        }
        ConceptDelta d;
        d.concept_id = j.at("concept_id").get<std::string>();
        d.encoder_fingerprint = j.at("encoder_fingerprint").get<std::string>();
        d.rank = j.at("rank").get<int>();
        for (const auto& js : j.at("sites")) {
            SiteFactors f;
            f.addr = site_addr_from_json(js);
            f.a = matrix_from_json(js.at("A"));
            f.b = matrix_from_json(js.at("B"));
            d.sites.push_back(std::move(f));
        }
        d.hyper = hyper_from_json(j.at("hyper"));
        d.validate();
        if (expected_encoder && d.encoder_fingerprint != expected_encoder->fingerprint()) {
            throw std::runtime_error("delta fingerprint " + d.encoder_fingerprint +
                                     " does not match encoder " + expected_encoder->fingerprint());
        }
        return d;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt delta file " + path + ": " + e.what());
    }
}

void save_merged_delta(const std::string& path, const MergedDelta& merged) {
    nlohmann::json j;
    j["format_version"] = kDeltaFormatVersion;
    j["kind"] = "merged_delta";
    j["merge"] = merge_kind_name(merged.kind);
    j["concept_ids"] = merged.concept_ids;
    j["encoder_fingerprint"] = merged.encoder_fingerprint;
    nlohmann::json sites = nlohmann::json::array();
    for (const auto& s : merged.sites) {
        nlohmann::json js = site_addr_to_json(s.addr);
        if (merged.kind == MergeKind::Add) {
            js["A"] = matrix_to_json(s.a);
            js["B"] = matrix_to_json(s.b);
            js["source_ranks"] = s.source_ranks;
        } else {
            js["dW"] = matrix_to_json(s.dense);
        }
        sites.push_back(std::move(js));
    }
    j["sites"] = std::move(sites);
    write_json_file(path, j);
}

MergedDelta load_merged_delta(const std::string& path, const FrozenEncoder* expected_encoder) {
    const nlohmann::json j = read_json_file(path);
    try {
        if (j.at("format_version").get<int>() != kDeltaFormatVersion) {
            throw std::runtime_error("unsupported delta format version");
        }
        if (j.at("kind").get<std::string>() != "merged_delta") {
            throw std::runtime_error("not a merged delta file");
        }
        MergedDelta m;
        m.kind = parse_merge_kind(j.at("merge").get<std::string>());
        m.concept_ids = j.at("concept_ids").get<std::vector<std::string>>();
        m.encoder_fingerprint = j.at("encoder_fingerprint").get<std::string>();
        for (const auto& js : j.at("sites")) {
            MergedSite s;
            s.addr = site_addr_from_json(js);
            if (m.kind == MergeKind::Add) {
                s.a = matrix_from_json(js.at("A"));
                s.b = matrix_from_json(js.at("B"));
                s.source_ranks = js.at("source_ranks").get<std::vector<int>>();
            } else {
                s.dense = matrix_from_json(js.at("dW"));
            }
            m.sites.push_back(std::move(s));
        }
        if (expected_encoder && m.encoder_fingerprint != expected_encoder->fingerprint()) {
            throw std::runtime_error("merged delta fingerprint does not match encoder");
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt merged delta file " + path + ": " + e.what());
    }
}

}  // namespace polar
