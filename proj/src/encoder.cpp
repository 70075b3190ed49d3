#include "polar/encoder.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "polar/binfile.hpp"
#include "polar/optim.hpp"

namespace polar {

namespace {
constexpr int kEncoderFormatVersion = 1;
}

const char* site_name(Site s) {
    switch (s) {
        case Site::Q: return "Q";
        case Site::K: return "K";
        case Site::V: return "V";
        case Site::O: return "O";
        case Site::Mlp1: return "MLP1";
        case Site::Mlp2: return "MLP2";
        case Site::FinalProj: return "FinalProj";
    }
    return "?";
}

Site parse_site(std::string_view name) {
    std::string up(name);
    std::transform(up.begin(), up.end(), up.begin(), [](unsigned char c) { return std::toupper(c); });
    if (up == "Q") return Site::Q;
    if (up == "K") return Site::K;
    if (up == "V") return Site::V;
    if (up == "O") return Site::O;
    if (up == "MLP1") return Site::Mlp1;
    if (up == "MLP2") return Site::Mlp2;
    if (up == "FINALPROJ" || up == "PROJ") return Site::FinalProj;
    throw std::invalid_argument("unknown site: " + std::string(name));
}

std::string to_string(const SiteAddress& a) {
    if (a.site == Site::FinalProj) return "FinalProj";
    return std::to_string(a.layer) + ":" + site_name(a.site);
}

SiteAddress parse_site_address(std::string_view text) {
    const auto colon = text.find(':');
    if (colon == std::string_view::npos) {
        const Site s = parse_site(text);
        if (s != Site::FinalProj) {
            throw std::invalid_argument("site address needs a layer, e.g. \"4:V\": " +
                                        std::string(text));
        }
        return SiteAddress(0, s);
    }
    const std::string layer_part(text.substr(0, colon));
    int layer = 0;
    try {
        layer = std::stoi(layer_part);
    } catch (const std::exception&) {
        throw std::invalid_argument("bad layer in site address: " + std::string(text));
    }
    if (layer < 1) throw std::invalid_argument("layer must be >= 1 in: " + std::string(text));
    return SiteAddress(layer, parse_site(text.substr(colon + 1)));
}

void EncoderConfig::validate() const {
    if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || d_out <= 0 || max_seq <= 0) {
        throw std::invalid_argument("encoder config: dimensions must be positive");
    }
    if (d_model % n_heads != 0) {
        throw std::invalid_argument("encoder config: d_model must be divisible by n_heads");
    }
    if (token_id(v_star_token) < 0) {
        throw std::invalid_argument("encoder config: vocab is missing the placeholder token \"" +
                                    v_star_token + "\"");
    }
    if (token_id(eos_token) < 0) {
        throw std::invalid_argument("encoder config: vocab is missing the end-of-sequence token \"" +
                                    eos_token + "\"");
    }
}

int EncoderConfig::token_id(std::string_view w) const {
    for (size_t i = 0; i < vocab.size(); ++i) {
        if (vocab[i] == w) return static_cast<int>(i);
    }
    return -1;
}

std::string weights_fingerprint(const EncoderWeights& w) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for_each_weight(w, [&](const std::string&, const Matrix& m) {
        h = fnv1a64(m.data.data(), m.data.size() * sizeof(float), h);
    });
    return hash_hex(h);
}

FrozenEncoder::FrozenEncoder(EncoderConfig cfg, EncoderWeights weights)
    : cfg_(std::move(cfg)), w_(std::move(weights)) {
    cfg_.validate();
    if (static_cast<int>(w_.layers.size()) != cfg_.n_layers) {
        throw std::invalid_argument("encoder: layer count does not match config");
    }
    fingerprint_ = weights_fingerprint(w_);
}

FrozenEncoder FrozenEncoder::random_init(EncoderConfig cfg) {
    cfg.validate();
    Rng rng(cfg.seed);
    const int d = cfg.d_model;
    auto gauss = [&](int rows, int cols, double std_dev) {
        Matrix m(rows, cols);
        for (float& v : m.data) v = static_cast<float>(rng.next_gaussian() * std_dev);
        return m;
    };
    auto ones = [](int cols) {
        Matrix m(1, cols);
        std::fill(m.data.begin(), m.data.end(), 1.0f);
        return m;
    };

    EncoderWeights w;
    w.tok_embed = gauss(static_cast<int>(cfg.vocab.size()), d, 0.02);
    w.pos_embed = gauss(cfg.max_seq, d, 0.02);
    const double attn_std = 1.0 / std::sqrt(static_cast<double>(d));
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.ln1_gamma = ones(d);
        lw.ln1_beta = Matrix(1, d);
        lw.wq = gauss(d, d, attn_std);
        lw.wk = gauss(d, d, attn_std);
        lw.wv = gauss(d, d, attn_std);
        lw.wo = gauss(d, d, attn_std);
        lw.ln2_gamma = ones(d);
        lw.ln2_beta = Matrix(1, d);
        lw.w_mlp1 = gauss(4 * d, d, attn_std);
        lw.w_mlp2 = gauss(d, 4 * d, 1.0 / std::sqrt(4.0 * d));
        w.layers.push_back(std::move(lw));
    }
    w.lnf_gamma = ones(d);
    w.lnf_beta = Matrix(1, d);
    w.w_proj = gauss(cfg.d_out, d, attn_std);
    return FrozenEncoder(std::move(cfg), std::move(w));
}

const Matrix& FrozenEncoder::site_weight(const SiteAddress& addr) const {
    if (addr.site == Site::FinalProj) return w_.w_proj;
    if (addr.layer < 1 || addr.layer > cfg_.n_layers) {
        throw std::invalid_argument("site address layer out of range: " + to_string(addr));
    }
    const LayerWeights& lw = w_.layers[addr.layer - 1];
    switch (addr.site) {
        case Site::Q: return lw.wq;
        case Site::K: return lw.wk;
        case Site::V: return lw.wv;
        case Site::O: return lw.wo;
        case Site::Mlp1: return lw.w_mlp1;
        case Site::Mlp2: return lw.w_mlp2;
        case Site::FinalProj: break;
    }
    throw std::invalid_argument("bad site address");
}

std::vector<int> tokenize(const EncoderConfig& cfg, std::string_view text) {
    std::string lowered(text);
    std::transform(lowered.begin(), lowered.end(), lowered.begin(),
                   [](unsigned char c) { return std::tolower(c); });
    std::istringstream ss(lowered);
    std::vector<int> ids;
    std::string word;
    while (ss >> word) {
        const int id = cfg.token_id(word);
        if (id < 0) throw std::invalid_argument("tokenize: out-of-vocabulary word \"" + word + "\"");
        ids.push_back(id);
    }
    if (ids.empty()) throw std::invalid_argument("tokenize: empty text");
    ids.push_back(cfg.token_id(cfg.eos_token));
    if (static_cast<int>(ids.size()) > cfg.max_seq) {
        throw std::invalid_argument("tokenize: sequence length " + std::to_string(ids.size()) +
                                    " exceeds max_seq " + std::to_string(cfg.max_seq));
    }
    return ids;
}

NodeId TapeWeights::site_node(const SiteAddress& addr) const {
    if (addr.site == Site::FinalProj) return w_proj;
    const LayerNodes& ln = layers.at(static_cast<size_t>(addr.layer - 1));
    switch (addr.site) {
        case Site::Q: return ln.wq;
        case Site::K: return ln.wk;
        case Site::V: return ln.wv;
        case Site::O: return ln.wo;
        case Site::Mlp1: return ln.w_mlp1;
        case Site::Mlp2: return ln.w_mlp2;
        case Site::FinalProj: break;
    }
    throw std::invalid_argument("bad site address");
}

void TapeWeights::set_site_node(const SiteAddress& addr, NodeId n) {
    if (addr.site == Site::FinalProj) {
        w_proj = n;
        return;
    }
    LayerNodes& ln = layers.at(static_cast<size_t>(addr.layer - 1));
    switch (addr.site) {
        case Site::Q: ln.wq = n; return;
        case Site::K: ln.wk = n; return;
        case Site::V: ln.wv = n; return;
        case Site::O: ln.wo = n; return;
        case Site::Mlp1: ln.w_mlp1 = n; return;
        case Site::Mlp2: ln.w_mlp2 = n; return;
        case Site::FinalProj: break;
    }
    throw std::invalid_argument("bad site address");
}

TapeWeights make_weight_leaves(Tape& tape, const FrozenEncoder& enc, bool trainable,
                               const std::map<int, Matrix>* patched_site_values) {
    const EncoderWeights& w = enc.weights();
    TapeWeights tw;
    tw.tok_embed = tape.leaf(w.tok_embed, trainable);
    tw.pos_embed = tape.leaf(w.pos_embed, trainable);
    for (int l = 0; l < enc.config().n_layers; ++l) {
        const LayerWeights& lw = w.layers[l];
        auto site_leaf = [&](Site s, const Matrix& frozen) {
            if (patched_site_values) {
                const auto it = patched_site_values->find(SiteAddress(l + 1, s).key());
                if (it != patched_site_values->end()) return tape.leaf(it->second, trainable);
            }
            return tape.leaf(frozen, trainable);
        };
        LayerNodes ln;
        ln.ln1_gamma = tape.leaf(lw.ln1_gamma, trainable);
        ln.ln1_beta = tape.leaf(lw.ln1_beta, trainable);
        ln.wq = site_leaf(Site::Q, lw.wq);
        ln.wk = site_leaf(Site::K, lw.wk);
        ln.wv = site_leaf(Site::V, lw.wv);
        ln.wo = site_leaf(Site::O, lw.wo);
        ln.ln2_gamma = tape.leaf(lw.ln2_gamma, trainable);
        ln.ln2_beta = tape.leaf(lw.ln2_beta, trainable);
        ln.w_mlp1 = site_leaf(Site::Mlp1, lw.w_mlp1);
        ln.w_mlp2 = site_leaf(Site::Mlp2, lw.w_mlp2);
        tw.layers.push_back(ln);
    }
    tw.lnf_gamma = tape.leaf(w.lnf_gamma, trainable);
    tw.lnf_beta = tape.leaf(w.lnf_beta, trainable);
    if (patched_site_values) {
        const auto it = patched_site_values->find(SiteAddress(0, Site::FinalProj).key());
        tw.w_proj = (it != patched_site_values->end()) ? tape.leaf(it->second, trainable)
                                                       : tape.leaf(w.w_proj, trainable);
    } else {
        tw.w_proj = tape.leaf(w.w_proj, trainable);
    }
    return tw;
}

TapeWeights make_suffix_weight_leaves(Tape& tape, const FrozenEncoder& enc, int start_layer) {
    const EncoderWeights& w = enc.weights();
    TapeWeights tw;
    tw.layers.resize(enc.config().n_layers);
    for (int l = start_layer; l <= enc.config().n_layers; ++l) {
        const LayerWeights& lw = w.layers[l - 1];
        LayerNodes& ln = tw.layers[l - 1];
        ln.ln1_gamma = tape.leaf(lw.ln1_gamma);
        ln.ln1_beta = tape.leaf(lw.ln1_beta);
        ln.wq = tape.leaf(lw.wq);
        ln.wk = tape.leaf(lw.wk);
        ln.wv = tape.leaf(lw.wv);
        ln.wo = tape.leaf(lw.wo);
        ln.ln2_gamma = tape.leaf(lw.ln2_gamma);
        ln.ln2_beta = tape.leaf(lw.ln2_beta);
        ln.w_mlp1 = tape.leaf(lw.w_mlp1);
        ln.w_mlp2 = tape.leaf(lw.w_mlp2);
    }
    tw.lnf_gamma = tape.leaf(w.lnf_gamma);
    tw.lnf_beta = tape.leaf(w.lnf_beta);
    tw.w_proj = tape.leaf(w.w_proj);
    return tw;
}

NodeId build_embedding(Tape& tape, const EncoderConfig& cfg, const TapeWeights& w,
                       std::span<const int> tokens,
                       std::span<const std::pair<int, NodeId>> row_overrides) {
    const int t = static_cast<int>(tokens.size());
    if (t < 1 || t > cfg.max_seq) throw std::invalid_argument("build_embedding: bad sequence length");
    NodeId tok_rows;
    if (row_overrides.empty()) {
        tok_rows = tape.gather_rows(w.tok_embed, std::vector<int>(tokens.begin(), tokens.end()));
    } else {
        // Stitch gathered runs around the overridden positions.
        std::vector<NodeId> parts;
        int pos = 0;
        auto overridden = [&](int p) -> const std::pair<int, NodeId>* {
            for (const auto& ov : row_overrides) {
                if (ov.first == p) return &ov;
            }
            return nullptr;
        };
        while (pos < t) {
            if (const auto* ov = overridden(pos)) {
                if (tape.value(ov->second).rows != 1 || tape.value(ov->second).cols != cfg.d_model) {
                    throw std::invalid_argument("build_embedding: override row must be 1 x d_model");
                }
                parts.push_back(ov->second);
                ++pos;
                continue;
            }
            std::vector<int> run;
            while (pos < t && !overridden(pos)) run.push_back(tokens[pos++]);
            parts.push_back(tape.gather_rows(w.tok_embed, std::move(run)));
        }
        tok_rows = tape.row_concat(parts);
    }
    std::vector<int> positions(t);
    for (int i = 0; i < t; ++i) positions[i] = i;
    const NodeId pos_rows = tape.gather_rows(w.pos_embed, std::move(positions));
    return tape.add(tok_rows, pos_rows);
}

namespace {

NodeId build_layer(Tape& tape, const EncoderConfig& cfg, const LayerNodes& ln, NodeId x) {
    const int dh = cfg.head_dim();
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));

    const NodeId h = tape.layer_norm(x, ln.ln1_gamma, ln.ln1_beta);
    const NodeId q = tape.matmul(h, ln.wq, false, true);
    const NodeId k = tape.matmul(h, ln.wk, false, true);
    const NodeId v = tape.matmul(h, ln.wv, false, true);
    std::vector<NodeId> head_ctx;
    for (int hd = 0; hd < cfg.n_heads; ++hd) {
        const NodeId qh = tape.col_slice(q, hd * dh, dh);
        const NodeId kh = tape.col_slice(k, hd * dh, dh);
        const NodeId vh = tape.col_slice(v, hd * dh, dh);
        const NodeId scores = tape.scale(tape.matmul(qh, kh, false, true), inv_sqrt_dh);
        const NodeId probs = tape.row_softmax(scores);
        head_ctx.push_back(tape.matmul(probs, vh));
    }
    const NodeId ctx = tape.col_concat(head_ctx);
    const NodeId attn_out = tape.matmul(ctx, ln.wo, false, true);
    NodeId out = tape.add(x, attn_out);

    const NodeId h2 = tape.layer_norm(out, ln.ln2_gamma, ln.ln2_beta);
    const NodeId m1 = tape.gelu(tape.matmul(h2, ln.w_mlp1, false, true));
    const NodeId m2 = tape.matmul(m1, ln.w_mlp2, false, true);
    return tape.add(out, m2);
}

}  // namespace

NodeId build_suffix_forward(Tape& tape, const EncoderConfig& cfg, const TapeWeights& w,
                            NodeId x, int start_layer, int eos_pos) {
    if (start_layer < 1 || start_layer > cfg.n_layers + 1) {
        throw std::invalid_argument("build_suffix_forward: start_layer out of range");
    }
    for (int l = start_layer; l <= cfg.n_layers; ++l) {
        x = build_layer(tape, cfg, w.layers[l - 1], x);
    }
    const NodeId hf = tape.layer_norm(x, w.lnf_gamma, w.lnf_beta);
    const NodeId eos = tape.select_row(hf, eos_pos);
    return tape.matmul(eos, w.w_proj, false, true);
}

NodeId build_text_forward(Tape& tape, const EncoderConfig& cfg, const TapeWeights& w,
                          std::span<const int> tokens,
                          std::span<const std::pair<int, NodeId>> row_overrides) {
    const NodeId x = build_embedding(tape, cfg, w, tokens, row_overrides);
    return build_suffix_forward(tape, cfg, w, x, 1, static_cast<int>(tokens.size()) - 1);
}

Matrix compute_prefix_activation(const FrozenEncoder& enc, std::span<const int> tokens,
                                 int start_layer) {
    if (start_layer < 1 || start_layer > enc.config().n_layers + 1) {
        throw std::invalid_argument("compute_prefix_activation: start_layer out of range");
    }
    Tape tape(/*grad_enabled=*/false);
    const TapeWeights w = make_weight_leaves(tape, enc, /*trainable=*/false);
    NodeId x = build_embedding(tape, enc.config(), w, tokens);
    for (int l = 1; l < start_layer; ++l) {
        x = build_layer(tape, enc.config(), w.layers[l - 1], x);
    }
    return tape.value(x);
}

namespace {

// Validates updates and folds them into dense per-site effective weights.
std::map<int, Matrix> fold_updates(const FrozenEncoder& enc,
                                   std::span<const EncoderUpdate> updates) {
    std::map<int, Matrix> patched;
    for (const auto& up : updates) {
        if (up.encoder_fingerprint != enc.fingerprint()) {
            throw std::runtime_error(
                "update was trained against a different frozen encoder (fingerprint " +
                up.encoder_fingerprint + " vs " + enc.fingerprint() + ")");
        }
        for (const auto& patch : up.sites) {
            auto it = patched.find(patch.addr.key());
            if (it == patched.end()) {
                it = patched.emplace(patch.addr.key(), enc.site_weight(patch.addr)).first;
            }
            if (!it->second.same_shape(patch.delta_w)) {
                throw std::invalid_argument("update shape mismatch at site " + to_string(patch.addr));
            }
            add_inplace(it->second, patch.delta_w);
        }
    }
    return patched;
}

}  // namespace

std::vector<float> encode_text(const FrozenEncoder& enc, std::span<const int> tokens,
                               std::span<const EncoderUpdate> updates) {
    const std::map<int, Matrix> patched = fold_updates(enc, updates);
    Tape tape(/*grad_enabled=*/false);
    const TapeWeights w =
        make_weight_leaves(tape, enc, /*trainable=*/false, patched.empty() ? nullptr : &patched);
    const NodeId out = build_text_forward(tape, enc.config(), w, tokens);
    const Matrix& m = tape.value(out);
    return {m.data.begin(), m.data.end()};
}

std::vector<Matrix> attention_probe(const FrozenEncoder& enc, std::span<const int> tokens) {
    // Re-runs the layers, capturing each softmax output (n_layers * n_heads
    // matrices, layer-major).
    const EncoderConfig& cfg = enc.config();
    std::vector<Matrix> probes;
    Tape tape(false);
    const TapeWeights w = make_weight_leaves(tape, enc, false);
    NodeId x = build_embedding(tape, cfg, w, tokens);
    const int dh = cfg.head_dim();
    const float inv_sqrt_dh = 1.0f / std::sqrt(static_cast<float>(dh));
    for (int l = 1; l <= cfg.n_layers; ++l) {
        const LayerNodes& ln = w.layers[l - 1];
        const NodeId h = tape.layer_norm(x, ln.ln1_gamma, ln.ln1_beta);
        const NodeId q = tape.matmul(h, ln.wq, false, true);
        const NodeId k = tape.matmul(h, ln.wk, false, true);
        const NodeId v = tape.matmul(h, ln.wv, false, true);
        std::vector<NodeId> head_ctx;
        for (int hd = 0; hd < cfg.n_heads; ++hd) {
            const NodeId qh = tape.col_slice(q, hd * dh, dh);
            const NodeId kh = tape.col_slice(k, hd * dh, dh);
            const NodeId vh = tape.col_slice(v, hd * dh, dh);
            const NodeId probs =
                tape.row_softmax(tape.scale(tape.matmul(qh, kh, false, true), inv_sqrt_dh));
            probes.push_back(tape.value(probs));
            head_ctx.push_back(tape.matmul(probs, vh));
        }
        const NodeId ctx = tape.col_concat(head_ctx);
        NodeId out = tape.add(x, tape.matmul(ctx, ln.wo, false, true));
        const NodeId h2 = tape.layer_norm(out, ln.ln2_gamma, ln.ln2_beta);
        const NodeId m1 = tape.gelu(tape.matmul(h2, ln.w_mlp1, false, true));
        x = tape.add(out, tape.matmul(m1, ln.w_mlp2, false, true));
    }
    return probes;
}

void ImageStore::add(ImageRecord rec) {
    if (index_.count(rec.id)) throw std::invalid_argument("image store: duplicate id " + rec.id);
    const double n = l2_norm(rec.embedding);
    if (std::abs(n - 1.0) > 1e-5) {
        throw std::invalid_argument("image store: embedding for " + rec.id +
                                    " is not unit norm (|v| = " + std::to_string(n) + ")");
    }
    index_.emplace(rec.id, records_.size());
    records_.push_back(std::move(rec));
}

bool ImageStore::contains(const std::string& id) const { return index_.count(id) > 0; }

const ImageRecord& ImageStore::get(const std::string& id) const {
    const auto it = index_.find(id);
    if (it == index_.end()) throw std::invalid_argument("image store: unknown id " + id);
    return records_[it->second];
}

FrozenEncoder pretrain(const FrozenEncoder& base, std::span<const PretrainPair> pairs,
                       const PretrainConfig& cfg) {
    if (pairs.empty()) throw std::invalid_argument("pretrain: empty pair list");
    const EncoderConfig& ec = base.config();
    for (const auto& p : pairs) {
        if (static_cast<int>(p.target.size()) != ec.d_out) {
            throw std::invalid_argument("pretrain: target width does not match d_out");
        }
    }
    if (cfg.steps == 0) return FrozenEncoder(ec, base.weights());

    EncoderWeights weights = base.weights();
    std::vector<Matrix*> params;
    for_each_weight(weights, [&](const std::string&, Matrix& m) { params.push_back(&m); });

    Adam adam({cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epsilon, cfg.weight_decay});
    for (size_t i = 0; i < params.size(); ++i) adam.add_param(params[i]->size());

    Rng rng(cfg.seed);
    const auto n_pairs = static_cast<uint32_t>(pairs.size());
    const int batch = std::max(1, std::min<int>(cfg.batch_size, static_cast<int>(n_pairs)));

    for (int step = 0; step < cfg.steps; ++step) {
        Tape tape;
        // Leaves in the same canonical order as `params`; they are the first
        // nodes on the fresh tape, so their ids are 0..n_params-1.
        TapeWeights tw;
        tw.tok_embed = tape.leaf(weights.tok_embed, true);
        tw.pos_embed = tape.leaf(weights.pos_embed, true);
        for (int l = 0; l < ec.n_layers; ++l) {
            const LayerWeights& lw = weights.layers[l];
            LayerNodes ln;
            ln.ln1_gamma = tape.leaf(lw.ln1_gamma, true);
            ln.ln1_beta = tape.leaf(lw.ln1_beta, true);
            ln.wq = tape.leaf(lw.wq, true);
            ln.wk = tape.leaf(lw.wk, true);
            ln.wv = tape.leaf(lw.wv, true);
            ln.wo = tape.leaf(lw.wo, true);
            ln.ln2_gamma = tape.leaf(lw.ln2_gamma, true);
            ln.ln2_beta = tape.leaf(lw.ln2_beta, true);
            ln.w_mlp1 = tape.leaf(lw.w_mlp1, true);
            ln.w_mlp2 = tape.leaf(lw.w_mlp2, true);
            tw.layers.push_back(ln);
        }
        tw.lnf_gamma = tape.leaf(weights.lnf_gamma, true);
        tw.lnf_beta = tape.leaf(weights.lnf_beta, true);
        tw.w_proj = tape.leaf(weights.w_proj, true);
        std::vector<NodeId> leaf_order(params.size());
        for (size_t i = 0; i < params.size(); ++i) leaf_order[i] = static_cast<NodeId>(i);

        NodeId loss = -1;
        for (int b = 0; b < batch; ++b) {
            const PretrainPair& pair = pairs[rng.next_below(n_pairs)];
            const NodeId out = build_text_forward(tape, ec, tw, pair.tokens);
            const NodeId diff =
                tape.sub(tape.l2_normalize_rows(out), tape.leaf(Matrix::from_row(pair.target)));
            const NodeId mse = tape.sum_squares(diff);
            loss = (loss < 0) ? mse : tape.add(loss, mse);
        }
        loss = tape.scale(loss, 1.0f / batch);
        if (!std::isfinite(tape.value(loss).data[0])) {
            throw std::runtime_error("pretrain: non-finite loss at step " + std::to_string(step));
        }
        tape.backward(loss);

        std::vector<const GradBuf*> grads;
        grads.reserve(params.size());
        for (NodeId id : leaf_order) grads.push_back(&tape.grad(id));
        adam.step(params, grads);
    }
    return FrozenEncoder(ec, weights);
}

void save_encoder(const std::string& path, const FrozenEncoder& enc) {
    nlohmann::json header;
    header["format_version"] = kEncoderFormatVersion;
    header["kind"] = "encoder";
    const EncoderConfig& c = enc.config();
    header["config"] = {{"vocab", c.vocab},       {"d_model", c.d_model}, {"n_layers", c.n_layers},
                        {"n_heads", c.n_heads},   {"d_out", c.d_out},     {"max_seq", c.max_seq},
                        {"seed", c.seed},         {"v_star_token", c.v_star_token},
                        {"eos_token", c.eos_token}};
    header["fingerprint"] = enc.fingerprint();
    std::vector<float> blob;
    for_each_weight(enc.weights(), [&](const std::string&, const Matrix& m) {
        blob.insert(blob.end(), m.data.begin(), m.data.end());
    });
    write_container(path, header, blob);
}

FrozenEncoder load_encoder(const std::string& path) {
    const BinContainer c = read_container(path);
    if (c.header.value("kind", "") != "encoder") {
        throw std::runtime_error("not an encoder checkpoint: " + path);
    }
    if (c.header.value("format_version", -1) != kEncoderFormatVersion) {
        throw std::runtime_error("unsupported encoder format version in " + path);
    }
    const auto& jc = c.header.at("config");
    EncoderConfig cfg;
    cfg.vocab = jc.at("vocab").get<std::vector<std::string>>();
    cfg.d_model = jc.at("d_model").get<int>();
    cfg.n_layers = jc.at("n_layers").get<int>();
    cfg.n_heads = jc.at("n_heads").get<int>();
    cfg.d_out = jc.at("d_out").get<int>();
    cfg.max_seq = jc.at("max_seq").get<int>();
    cfg.seed = jc.at("seed").get<uint64_t>();
    cfg.v_star_token = jc.at("v_star_token").get<std::string>();
    cfg.eos_token = jc.at("eos_token").get<std::string>();
    cfg.validate();

    EncoderWeights w;
    const int d = cfg.d_model;
    w.tok_embed = Matrix(static_cast<int>(cfg.vocab.size()), d);
    w.pos_embed = Matrix(cfg.max_seq, d);
    for (int l = 0; l < cfg.n_layers; ++l) {
        LayerWeights lw;
        lw.ln1_gamma = Matrix(1, d);
        lw.ln1_beta = Matrix(1, d);
        lw.wq = Matrix(d, d);
        lw.wk = Matrix(d, d);
        lw.wv = Matrix(d, d);
        lw.wo = Matrix(d, d);
        lw.ln2_gamma = Matrix(1, d);
        lw.ln2_beta = Matrix(1, d);
        lw.w_mlp1 = Matrix(4 * d, d);
        lw.w_mlp2 = Matrix(d, 4 * d);
        w.layers.push_back(std::move(lw));
    }
    w.lnf_gamma = Matrix(1, d);
    w.lnf_beta = Matrix(1, d);
    w.w_proj = Matrix(cfg.d_out, d);

    size_t need = 0;
    for_each_weight(w, [&](const std::string&, Matrix& m) { need += m.size(); });
    if (c.blob.size() != need) {
        throw std::runtime_error("encoder blob size mismatch in " + path);
    }
    size_t off = 0;
    for_each_weight(w, [&](const std::string&, Matrix& m) {
        std::copy(c.blob.begin() + off, c.blob.begin() + off + m.size(), m.data.begin());
        off += m.size();
    });

    const std::string recorded = c.header.value("fingerprint", "");
    const std::string actual = weights_fingerprint(w);
    if (recorded != actual) {
        throw std::runtime_error("encoder fingerprint mismatch in " + path + " (recorded " +
                                 recorded + ", actual " + actual + ")");
    }
    return FrozenEncoder(std::move(cfg), std::move(w));
}

}  // namespace polar
