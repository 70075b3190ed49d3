#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "polar/encoder.hpp"
#include "polar/linalg.hpp"

namespace polar {

// One personal concept: placeholder token, optional class-name suffix, and
// the ids of its training images.
struct ConceptSpec {
    std::string concept_id;
    std::string v_star = "sks";
    std::string class_name;  // optional; appended to the placeholder when set
    std::vector<std::string> train_image_ids;

    // "sks" or "sks <class_name>" as it appears in query text.
    std::string concept_phrase() const;
    void validate(const EncoderConfig& cfg) const;
};

// Low-rank factors for one site: delta_w = b * a with a (r x n), b (m x r).
struct SiteFactors {
    SiteAddress addr;
    Matrix a;
    Matrix b;
};

// Hyper-parameters recorded alongside a trained delta so evaluation reports
// are self-describing.
struct DeltaHyper {
    double lambda = 0.35;
    int iterations = 500;
    double learning_rate = 1e-3;
    uint64_t seed = 0;
    bool constrain_a = true;
    bool use_negatives = false;
};

struct ConceptDelta {
    std::string concept_id;
    std::string encoder_fingerprint;
    int rank = 1;
    std::vector<SiteFactors> sites;
    DeltaHyper hyper;

    // A site is present iff its address matches.
    const SiteFactors* find_site(const SiteAddress& addr) const;

    // Checks factor shapes against the rank and, when the norm constraint is
    // active, that every row of a is unit within 1e-6.
    void validate() const;

    // Dense patches for encoding (validated against the encoder fingerprint
    // at apply time).
    EncoderUpdate to_update() const;

    // Fresh delta: b = 0 everywhere, a rows drawn as random unit vectors from
    // rng (or copied from frozen_a when provided).
    static ConceptDelta init(const std::string& concept_id, const FrozenEncoder& enc,
                             std::span<const SiteAddress> sites, int rank, Rng& rng,
                             const Matrix* frozen_a = nullptr);
};

// Dense delta_w = b * a for the addressed site. Throws when absent.
Matrix materialize(const ConceptDelta& delta, const SiteAddress& addr);

enum class MergeKind { Add, Avg, Max };
const char* merge_kind_name(MergeKind k);
MergeKind parse_merge_kind(std::string_view name);

// Result of merging several concept deltas. Add keeps the stacked low-rank
// factors (rank sum(r_i)); avg/max store the dense delta_w since those
// results are not low-rank.
struct MergedSite {
    SiteAddress addr;
    Matrix a;                       // stacked (sum r) x n   (Add only)
    Matrix b;                       // stacked m x (sum r)   (Add only)
    std::vector<int> source_ranks;  // block boundaries      (Add only)
    Matrix dense;                   // m x n                 (Avg / Max only)
};

struct MergedDelta {
    MergeKind kind = MergeKind::Add;
    std::vector<std::string> concept_ids;
    std::string encoder_fingerprint;
    std::vector<MergedSite> sites;

    EncoderUpdate to_update() const;
};

// Concatenates b blocks column-wise and a blocks row-wise. The materialized
// delta_w equals the elementwise sum of the sources' delta_w exactly (the
// sum is evaluated per source block, in input order). Throws on fingerprint
// or site-set mismatch, or an empty list.
MergedDelta merge_add(std::span<const ConceptDelta> deltas);
// Dense mean of the materialized delta_w.
MergedDelta merge_avg(std::span<const ConceptDelta> deltas);
// Elementwise maximum by signed value of the materialized delta_w. (Max over
// magnitudes would be the other reading; signed max is what this build does,
// and the file format records it.)
MergedDelta merge_max(std::span<const ConceptDelta> deltas);

Matrix materialize(const MergedDelta& merged, const SiteAddress& addr);

// n_concepts mutually orthonormal n-vectors (rows) via seeded Gram-Schmidt
// over Gaussian draws. Throws when n_concepts > n.
Matrix orthogonal_basis(uint64_t seed, int n_concepts, int n);

// Delta files are JSON documents; floats round-trip bitwise. Loading
// validates format version and internal shape coherence; when an encoder is
// given, a fingerprint mismatch is rejected.
void save_delta(const std::string& path, const ConceptDelta& delta);
ConceptDelta load_delta(const std::string& path, const FrozenEncoder* expected_encoder = nullptr);

void save_merged_delta(const std::string& path, const MergedDelta& merged);
MergedDelta load_merged_delta(const std::string& path,
                              const FrozenEncoder* expected_encoder = nullptr);

}  // namespace polar
