#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "polar/delta.hpp"
#include "polar/encoder.hpp"

namespace polar {

// The fixed caption templates; each contains exactly one "{}" slot for the
// concept phrase.
std::vector<std::string> default_templates();
std::string instantiate_template(const std::string& tpl, const std::string& phrase);

struct TrainConfig {
    double lambda = 0.35;
    int iterations = 500;
    double learning_rate = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_epsilon = 1e-8;
    double weight_decay = 0.0;  // optional optimizer weight decay, off by default
    std::vector<std::string> templates = default_templates();
    int rank = 1;
    std::vector<SiteAddress> sites;  // empty selects {(last layer, V)}
    uint64_t seed = 0;
    bool constrain_a = true;
    bool use_negatives = false;

    // When set, the a factor is frozen to these rows (rank x n) and only b is
    // trained; used for orthogonal-adaptation merging, where each concept
    // gets a distinct row of a shared orthonormal basis.
    std::optional<Matrix> frozen_a;

    void validate() const;
    std::vector<SiteAddress> resolved_sites(const EncoderConfig& enc) const;
};

nlohmann::json train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct TrainReport {
    std::vector<double> loss_mse;    // per iteration
    std::vector<double> loss_reg;    // unweighted sum of b entries squared
    std::vector<double> loss_neg;    // zero when negatives are unused
    std::vector<double> loss_total;  // mse + neg + lambda * reg
    std::vector<double> final_a_row_norms;
    double final_b_sumsq = 0.0;
    double wall_seconds = 0.0;
    bool aborted = false;
    std::string abort_reason;
};

nlohmann::json train_report_to_json(const TrainReport& r);

// One supervised pair: tokenized query and the matching image embedding.
struct TrainPair {
    std::vector<int> tokens;
    std::vector<float> image_embedding;
};

struct SiteGradients {
    SiteAddress addr;
    GradBuf a;
    GradBuf b;
};

struct LossBreakdown {
    double total = 0.0;
    double mse = 0.0;
    double reg = 0.0;  // unweighted |b|^2
    double neg = 0.0;
    std::vector<SiteGradients> grads;  // aligned with delta.sites
};

// Full objective on the delta's current factors:
//   L = (1/N) sum_i ||normalize(text_i) - normalize(image_i)||^2
//       + neg term (when neg_pairs given)
//       + lambda * sum of b entries squared.
// Gradients flow only to the a and b factors. Throws when pairs is empty or
// a text embedding cannot be normalized.
LossBreakdown polar_loss(const FrozenEncoder& enc, const ConceptDelta& delta,
                         std::span<const TrainPair> pairs, double lambda,
                         std::span<const TrainPair> neg_pairs = {});

// The repulsion term alone: -(1/N) sum_i ||normalize(text_i) -
// normalize(neg_image_i)||^2. Throws on an empty list.
double negative_loss(const FrozenEncoder& enc, const ConceptDelta& delta,
                     std::span<const TrainPair> neg_pairs);

// Called after every optimizer step (post projection) with the current state.
using TrainObserver = std::function<void(int iteration, const ConceptDelta& state)>;

struct TrainResult {
    ConceptDelta delta;
    TrainReport report;
};

// Trains a concept delta: a rows start as seeded random unit vectors (or the
// frozen basis rows), b starts at zero; each iteration samples one template
// per training image, takes a full-batch Adam step on a and b only, then
// renormalizes a rows when the constraint is active. Deterministic given the
// seed. A non-finite loss aborts with the report so far. `negative_pool`
// lists image ids of other concepts' training images; required when
// cfg.use_negatives.
TrainResult train_polar(const FrozenEncoder& enc, const ConceptSpec& spec,
                        const ImageStore& images, const TrainConfig& cfg,
                        std::span<const std::string> negative_pool = {},
                        const TrainObserver& observer = {});

// ---------------------------------------------------------------------------
// Textual-inversion baseline: learned embedding vectors substituted at the
// placeholder position(s), all encoder weights frozen.

struct TextualInversion {
    std::string concept_id;
    std::string encoder_fingerprint;
    std::string v_star;
    Matrix tokens;  // n_tokens x d_model
};

struct InversionResult {
    TextualInversion inversion;
    TrainReport report;
};

// Same loss as the delta trainer minus the b penalty. Token vectors start at
// the class-name embedding when the spec has a class name, else the
// placeholder embedding.
InversionResult train_textual_inversion(const FrozenEncoder& enc, const ConceptSpec& spec,
                                        const ImageStore& images, const TrainConfig& cfg,
                                        int n_tokens = 1);

// Encodes text with each placeholder occurrence expanded to the learned
// vectors. Output is not normalized (same contract as encode_text).
std::vector<float> encode_text_with_inversion(const FrozenEncoder& enc,
                                              const TextualInversion& ti,
                                              const std::string& text);

}  // namespace polar
