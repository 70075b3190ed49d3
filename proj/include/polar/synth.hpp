#pragma once

#include <span>
#include <string>
#include <vector>

#include "polar/delta.hpp"
#include "polar/encoder.hpp"
#include "polar/metrics.hpp"

namespace polar {

struct WorldConfig {
    int n_concepts = 8;
    int n_contexts = 12;
    int d_out = 32;
    int images_per_concept_context = 2;  // eval images per (concept, context)
    int context_only_pretrain = 4;       // per context, pretraining targets
    int context_only_eval = 4;           // per context, held out for evaluation
    int multi_concept_pairs = 4;
    int multi_contexts_per_pair = 3;
    int multi_images_per_pair = 2;  // per (pair, context)
    int train_images_per_concept = 5;
    double noise_sigma = 0.05;
    double alpha = 1.0;  // concept mixing weight
    double beta = 1.0;   // context mixing weight
    // Concept latents are rejection-sampled to pairwise |cos| below this
    // (0.3 default keeps concepts separable; raise it to build a world with
    // confusable concepts).
    double concept_max_cos = 0.3;
    uint64_t seed = 42;
    bool use_class_names = false;  // append class names to the placeholder in queries

    void validate() const;
};

// Caption paired with the image whose embedding it supervises.
struct WorldCaptionPair {
    std::string caption;
    std::string image_id;
};

struct SyntheticWorld {
    WorldConfig config;
    std::vector<std::string> vocab;

    Matrix concept_latents;  // n_concepts x d_out, unit rows
    Matrix context_latents;  // n_contexts x d_out, unit rows
    std::vector<std::string> context_names;
    std::vector<ConceptSpec> concepts;  // concept_id == class word

    ImageStore images;  // every generated image (train + pretrain + eval)
    std::vector<std::string> eval_image_ids;            // the retrieval database
    std::vector<std::string> single_concept_eval_ids;   // concept-only database
    std::vector<WorldCaptionPair> pretrain_pairs;       // context captions only
    std::vector<CaptionProbePair> caption_probes;       // held-out context images

    EncoderConfig encoder_config() const;
    const ConceptSpec& concept_by_id(const std::string& id) const;
    // Training-image ids of every concept except `concept_id`.
    std::vector<std::string> negative_pool(const std::string& concept_id) const;
};

// Deterministic world from the config seed. Throws when concept separation
// cannot be met after bounded rejection attempts (larger d_out helps).
SyntheticWorld generate_world(const WorldConfig& cfg);

// Emits context-single, context-multi, concept-only, and general-caption
// query records with ground-truth sets drawn from the world labels.
std::vector<QueryRecord> build_eval_suite(const SyntheticWorld& world);

// Tokenized pretraining pairs for the world's own vocab.
std::vector<PretrainPair> make_pretrain_pairs(const SyntheticWorld& world,
                                              const EncoderConfig& cfg);

void save_world(const std::string& path, const SyntheticWorld& world);
SyntheticWorld load_world(const std::string& path);

}  // namespace polar
