#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "polar/linalg.hpp"
#include "polar/tape.hpp"

namespace polar {

// Adaptable parameter sites inside the text encoder.
enum class Site { Q, K, V, O, Mlp1, Mlp2, FinalProj };

const char* site_name(Site s);
Site parse_site(std::string_view name);

struct SiteAddress {
    int layer = 0;  // 1-based; FinalProj is layer-independent and canonicalizes to 0
    Site site = Site::V;

    SiteAddress() = default;
    SiteAddress(int l, Site s) : layer(s == Site::FinalProj ? 0 : l), site(s) {}

    bool operator==(const SiteAddress& o) const { return layer == o.layer && site == o.site; }
    bool operator<(const SiteAddress& o) const { return key() < o.key(); }
    int key() const { return layer * 16 + static_cast<int>(site); }
};

std::string to_string(const SiteAddress& a);
// Accepts "12:V", "3:MLP1", or "FinalProj".
SiteAddress parse_site_address(std::string_view text);

struct EncoderConfig {
    std::vector<std::string> vocab;
    int d_model = 64;
    int n_layers = 4;
    int n_heads = 4;
    int d_out = 32;
    int max_seq = 16;
    uint64_t seed = 1;
    std::string v_star_token = "sks";
    std::string eos_token = "<eos>";

    void validate() const;             // throws on violated invariants
    int token_id(std::string_view w) const;  // -1 when absent
    int head_dim() const { return d_model / n_heads; }
};

struct LayerWeights {
    Matrix ln1_gamma, ln1_beta;  // 1 x d
    Matrix wq, wk, wv, wo;       // d x d
    Matrix ln2_gamma, ln2_beta;  // 1 x d
    Matrix w_mlp1;               // 4d x d
    Matrix w_mlp2;               // d x 4d
};

struct EncoderWeights {
    Matrix tok_embed;  // vocab x d
    Matrix pos_embed;  // max_seq x d
    std::vector<LayerWeights> layers;
    Matrix lnf_gamma, lnf_beta;  // 1 x d
    Matrix w_proj;               // d_out x d
};

// Visits every weight tensor in the canonical order used by fingerprinting,
// checkpoints, and pretraining.
template <class Weights, class Fn>
void for_each_weight(Weights& w, Fn&& fn) {
    fn("tok_embed", w.tok_embed);
    fn("pos_embed", w.pos_embed);
    for (size_t l = 0; l < w.layers.size(); ++l) {
        auto& lw = w.layers[l];
        const std::string p = "layer" + std::to_string(l + 1) + ".";
        fn(p + "ln1_gamma", lw.ln1_gamma);
        fn(p + "ln1_beta", lw.ln1_beta);
        fn(p + "wq", lw.wq);
        fn(p + "wk", lw.wk);
        fn(p + "wv", lw.wv);
        fn(p + "wo", lw.wo);
        fn(p + "ln2_gamma", lw.ln2_gamma);
        fn(p + "ln2_beta", lw.ln2_beta);
        fn(p + "w_mlp1", lw.w_mlp1);
        fn(p + "w_mlp2", lw.w_mlp2);
    }
    fn("lnf_gamma", w.lnf_gamma);
    fn("lnf_beta", w.lnf_beta);
    fn("w_proj", w.w_proj);
}

// Dense weight patch for one site (encoder orientation, same shape as the
// frozen weight it augments).
struct SitePatch {
    SiteAddress addr;
    Matrix delta_w;
};

// Validated carrier for applying concept updates during encoding. Produced
// from ConceptDelta / MergedDelta (delta.hpp); the fingerprint must match
// the encoder the update is applied to.
struct EncoderUpdate {
    std::string encoder_fingerprint;
    std::vector<SitePatch> sites;
};

// The frozen text encoder. Weights are immutable after construction; the
// fingerprint is a content hash over all weight tensors in canonical order.
class FrozenEncoder {
public:
    FrozenEncoder(EncoderConfig cfg, EncoderWeights weights);

    static FrozenEncoder random_init(EncoderConfig cfg);

    const EncoderConfig& config() const { return cfg_; }
    const EncoderWeights& weights() const { return w_; }
    const std::string& fingerprint() const { return fingerprint_; }

    const Matrix& site_weight(const SiteAddress& addr) const;  // throws on bad address

private:
    EncoderConfig cfg_;
    EncoderWeights w_;
    std::string fingerprint_;
};

std::string weights_fingerprint(const EncoderWeights& w);

// Lowercased whitespace tokenization against the config vocab, EOS appended.
// Throws on empty text, out-of-vocabulary words (naming the word), and
// overlength sequences.
std::vector<int> tokenize(const EncoderConfig& cfg, std::string_view text);

// ---------------------------------------------------------------------------
// Tape forward construction. All encoder forwards (inference, personalization,
// pretraining) are built from these pieces, so every path computes values
// with the same kernels.

struct LayerNodes {
    NodeId ln1_gamma = -1, ln1_beta = -1, wq = -1, wk = -1, wv = -1, wo = -1;
    NodeId ln2_gamma = -1, ln2_beta = -1, w_mlp1 = -1, w_mlp2 = -1;
};

struct TapeWeights {
    NodeId tok_embed = -1, pos_embed = -1;
    std::vector<LayerNodes> layers;
    NodeId lnf_gamma = -1, lnf_beta = -1, w_proj = -1;

    NodeId site_node(const SiteAddress& addr) const;
    void set_site_node(const SiteAddress& addr, NodeId n);
};

// Creates one leaf per weight tensor (trainable or const). `dense_patches`
// replaces the leaf value of a site with W + dW before leaf creation.
TapeWeights make_weight_leaves(Tape& tape, const FrozenEncoder& enc, bool trainable,
                               const std::map<int, Matrix>* patched_site_values = nullptr);

// Const leaves for the layers a suffix forward actually touches (layers
// [start_layer..n] plus the output head); earlier slots stay unset.
TapeWeights make_suffix_weight_leaves(Tape& tape, const FrozenEncoder& enc, int start_layer);

// Token + positional embedding matrix (T x d). `row_overrides` substitutes
// learned rows at given positions (textual inversion).
NodeId build_embedding(Tape& tape, const EncoderConfig& cfg, const TapeWeights& w,
                       std::span<const int> tokens,
                       std::span<const std::pair<int, NodeId>> row_overrides = {});

// Transformer layers [start_layer .. n_layers] followed by the output head
// (final layer norm, EOS pooling, final projection). start_layer may be
// n_layers + 1 to run the head alone. Returns the 1 x d_out output node
// (not normalized).
NodeId build_suffix_forward(Tape& tape, const EncoderConfig& cfg, const TapeWeights& w,
                            NodeId x, int start_layer, int eos_pos);

// Full forward from token ids; returns the 1 x d_out output node.
NodeId build_text_forward(Tape& tape, const EncoderConfig& cfg, const TapeWeights& w,
                          std::span<const int> tokens,
                          std::span<const std::pair<int, NodeId>> row_overrides = {});

// Activation entering `start_layer` (1-based; n_layers + 1 gives the input
// of the output head), computed without gradient bookkeeping.
Matrix compute_prefix_activation(const FrozenEncoder& enc, std::span<const int> tokens,
                                 int start_layer);

// ---------------------------------------------------------------------------

// Encodes tokens with the given updates applied (effective weight W + dW at
// every patched site). Output is the final-projected EOS representation,
// NOT normalized. Throws if an update's fingerprint does not match.
std::vector<float> encode_text(const FrozenEncoder& enc, std::span<const int> tokens,
                               std::span<const EncoderUpdate> updates = {});

// Per-layer attention row sums from the most recent forward structure; probe
// used by tests to assert softmax rows sum to one.
std::vector<Matrix> attention_probe(const FrozenEncoder& enc, std::span<const int> tokens);

// ---------------------------------------------------------------------------
// Image embedding store (the frozen image-encoder side: precomputed
// unit-normalized d_out vectors with optional labels).

struct ImageRecord {
    std::string id;
    std::vector<float> embedding;       // unit norm within 1e-5
    std::vector<std::string> concepts;  // concept ids depicted (may be empty)
    std::string context;                // context label (may be empty)
};

class ImageStore {
public:
    void add(ImageRecord rec);  // validates unit norm and id uniqueness
    bool contains(const std::string& id) const;
    const ImageRecord& get(const std::string& id) const;
    const std::vector<ImageRecord>& records() const { return records_; }
    size_t size() const { return records_.size(); }

private:
    std::vector<ImageRecord> records_;
    std::map<std::string, size_t> index_;
};

// ---------------------------------------------------------------------------
// Pretraining (manufactures the frozen encoder's general knowledge).

struct PretrainPair {
    std::vector<int> tokens;
    std::vector<float> target;  // unit d_out embedding
};

struct PretrainConfig {
    int steps = 1600;
    int batch_size = 8;
    double learning_rate = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    // Decoupled weight decay; keeps the residual stream from ballooning so
    // the frozen geometry stays adapter-friendly.
    double weight_decay = 0.0;
    uint64_t seed = 7;
};

// Full-parameter MSE training of normalized text outputs against target
// image embeddings; returns a newly frozen encoder. Deterministic given the
// seed. Throws on an empty pair list or a non-finite loss.
FrozenEncoder pretrain(const FrozenEncoder& base, std::span<const PretrainPair> pairs,
                       const PretrainConfig& cfg);

// Encoder checkpoint: JSON header (config, fingerprint, format version) +
// little-endian f32 weight blob. The loader rejects version or fingerprint
// mismatches.
void save_encoder(const std::string& path, const FrozenEncoder& enc);
FrozenEncoder load_encoder(const std::string& path);

}  // namespace polar
