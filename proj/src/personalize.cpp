#include "polar/personalize.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include "polar/optim.hpp"

namespace polar {

std::vector<std::string> default_templates() {
    return {
        "an image of {}",         "a photo of {}",           "a picture of {}",
        "a photo of a {}",        "an image of a {}",        "a cropped photo of {}",
        "a close-up photo of {}", "a bright photo of {}",
    };
}

std::string instantiate_template(const std::string& tpl, const std::string& phrase) {
    const auto pos = tpl.find("{}");
    if (pos == std::string::npos) {
        throw std::invalid_argument("template has no {} slot: " + tpl);
    }
    if (tpl.find("{}", pos + 2) != std::string::npos) {
        throw std::invalid_argument("template has more than one {} slot: " + tpl);
    }
    return tpl.substr(0, pos) + phrase + tpl.substr(pos + 2);
}

void TrainConfig::validate() const {
    if (lambda < 0.0) throw std::invalid_argument("train config: lambda must be >= 0");
    if (iterations < 0) throw std::invalid_argument("train config: iterations must be >= 0");
    if (rank < 1) throw std::invalid_argument("train config: rank must be >= 1");
    if (templates.empty()) throw std::invalid_argument("train config: empty template list");
    for (const auto& t : templates) {
        instantiate_template(t, "x");  // throws unless exactly one slot
    }
}

std::vector<SiteAddress> TrainConfig::resolved_sites(const EncoderConfig& enc) const {
    if (!sites.empty()) return sites;
    return {SiteAddress(enc.n_layers, Site::V)};
}

nlohmann::json train_config_to_json(const TrainConfig& cfg) {
    nlohmann::json j;
    j["lambda"] = cfg.lambda;
    j["iterations"] = cfg.iterations;
    j["learning_rate"] = cfg.learning_rate;
    j["adam_beta1"] = cfg.adam_beta1;
    j["adam_beta2"] = cfg.adam_beta2;
    j["adam_epsilon"] = cfg.adam_epsilon;
    j["weight_decay"] = cfg.weight_decay;
    j["templates"] = cfg.templates;
    j["rank"] = cfg.rank;
    std::vector<std::string> site_strs;
    for (const auto& s : cfg.sites) site_strs.push_back(to_string(s));
    j["sites"] = site_strs;
    j["seed"] = cfg.seed;
    j["constrain_a"] = cfg.constrain_a;
    j["use_negatives"] = cfg.use_negatives;
    return j;
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig cfg;
    cfg.lambda = j.value("lambda", cfg.lambda);
    cfg.iterations = j.value("iterations", cfg.iterations);
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.adam_beta1 = j.value("adam_beta1", cfg.adam_beta1);
    cfg.adam_beta2 = j.value("adam_beta2", cfg.adam_beta2);
    cfg.adam_epsilon = j.value("adam_epsilon", cfg.adam_epsilon);
    cfg.weight_decay = j.value("weight_decay", cfg.weight_decay);
    if (j.contains("templates")) cfg.templates = j.at("templates").get<std::vector<std::string>>();
    cfg.rank = j.value("rank", cfg.rank);
    if (j.contains("sites")) {
        cfg.sites.clear();
        for (const auto& s : j.at("sites")) cfg.sites.push_back(parse_site_address(s.get<std::string>()));
    }
    cfg.seed = j.value("seed", cfg.seed);
    cfg.constrain_a = j.value("constrain_a", cfg.constrain_a);
    cfg.use_negatives = j.value("use_negatives", cfg.use_negatives);
    cfg.validate();
    return cfg;
}

nlohmann::json train_report_to_json(const TrainReport& r) {
    nlohmann::json j;
    j["loss_mse"] = r.loss_mse;
    j["loss_reg"] = r.loss_reg;
    j["loss_neg"] = r.loss_neg;
    j["loss_total"] = r.loss_total;
    j["final_a_row_norms"] = r.final_a_row_norms;
    j["final_b_sumsq"] = r.final_b_sumsq;
    j["wall_seconds"] = r.wall_seconds;
    j["aborted"] = r.aborted;
    if (r.aborted) j["abort_reason"] = r.abort_reason;
    return j;
}

namespace {

struct SiteLeaves {
    NodeId a = -1;
    NodeId b = -1;
};

// Installs per-site leaves and W + b*a effective-weight nodes into tw.
std::vector<SiteLeaves> install_lora_sites(Tape& tape, const FrozenEncoder& enc,
                                           const ConceptDelta& delta, TapeWeights& tw,
                                           bool a_trainable) {
    std::vector<SiteLeaves> leaves;
    for (const auto& s : delta.sites) {
        SiteLeaves sl;
        sl.a = tape.leaf(s.a, a_trainable);
        sl.b = tape.leaf(s.b, true);
        const NodeId w_const = tape.leaf(enc.site_weight(s.addr));
        tw.set_site_node(s.addr, tape.add(w_const, tape.matmul(sl.b, sl.a)));
        leaves.push_back(sl);
    }
    return leaves;
}

// Squared L2 distance between the normalized text output and the normalized
// image embedding (the per-pair fitting term).
NodeId mse_term(Tape& tape, NodeId text_out, std::span<const float> image_embedding) {
    const NodeId normed = tape.l2_normalize_rows(text_out);
    const NodeId target = tape.leaf(Matrix::from_row(l2_normalize(image_embedding)));
    const NodeId diff = tape.sub(normed, target);
    return tape.sum_squares(diff);
}

}  // namespace

LossBreakdown polar_loss(const FrozenEncoder& enc, const ConceptDelta& delta,
                         std::span<const TrainPair> pairs, double lambda,
                         std::span<const TrainPair> neg_pairs) {
    if (pairs.empty()) throw std::invalid_argument("polar_loss: empty pair list");
    const EncoderConfig& cfg = enc.config();

    Tape tape;
    TapeWeights tw = make_weight_leaves(tape, enc, /*trainable=*/false);
    const auto site_leaves = install_lora_sites(tape, enc, delta, tw, /*a_trainable=*/true);

    NodeId mse_sum = -1;
    for (const auto& p : pairs) {
        const NodeId out = build_text_forward(tape, cfg, tw, p.tokens);
        const NodeId term = mse_term(tape, out, p.image_embedding);
        mse_sum = (mse_sum < 0) ? term : tape.add(mse_sum, term);
    }
    const NodeId mse = tape.scale(mse_sum, 1.0f / static_cast<float>(pairs.size()));

    NodeId total = mse;
    NodeId neg = -1;
    if (!neg_pairs.empty()) {
        NodeId neg_sum = -1;
        for (const auto& p : neg_pairs) {
            const NodeId out = build_text_forward(tape, cfg, tw, p.tokens);
            const NodeId term = mse_term(tape, out, p.image_embedding);
            neg_sum = (neg_sum < 0) ? term : tape.add(neg_sum, term);
        }
        neg = tape.scale(neg_sum, -1.0f / static_cast<float>(neg_pairs.size()));
        total = tape.add(total, neg);
    }

    NodeId reg = -1;
    for (const auto& sl : site_leaves) {
        const NodeId ss = tape.sum_squares(sl.b);
        reg = (reg < 0) ? ss : tape.add(reg, ss);
    }
    total = tape.add(total, tape.scale(reg, static_cast<float>(lambda)));

    tape.backward(total);

    LossBreakdown out;
    out.total = tape.value(total).data[0];
    out.mse = tape.value(mse).data[0];
    out.reg = tape.value(reg).data[0];
    out.neg = (neg >= 0) ? tape.value(neg).data[0] : 0.0;
    for (size_t i = 0; i < delta.sites.size(); ++i) {
        SiteGradients g;
        g.addr = delta.sites[i].addr;
        g.a = tape.grad(site_leaves[i].a);
        g.b = tape.grad(site_leaves[i].b);
        if (g.a.empty()) g.a.assign(delta.sites[i].a.size(), 0.0);
        if (g.b.empty()) g.b.assign(delta.sites[i].b.size(), 0.0);
        out.grads.push_back(std::move(g));
    }
    return out;
}

double negative_loss(const FrozenEncoder& enc, const ConceptDelta& delta,
                     std::span<const TrainPair> neg_pairs) {
    if (neg_pairs.empty()) throw std::invalid_argument("negative_loss: empty negative set");
    const EncoderUpdate update = delta.to_update();
    const EncoderUpdate updates[] = {update};
    double sum = 0.0;
    for (const auto& p : neg_pairs) {
        const auto text = l2_normalize(encode_text(enc, p.tokens, updates));
        const auto img = l2_normalize(p.image_embedding);
        double d2 = 0.0;
        for (size_t i = 0; i < text.size(); ++i) {
            const double d = static_cast<double>(text[i]) - img[i];
            d2 += d * d;
        }
        sum += d2;
    }
    return -sum / static_cast<double>(neg_pairs.size());
}

TrainResult train_polar(const FrozenEncoder& enc, const ConceptSpec& spec,
                        const ImageStore& images, const TrainConfig& cfg,
                        std::span<const std::string> negative_pool,
                        const TrainObserver& observer) {
    const auto t_start = std::chrono::steady_clock::now();
    const EncoderConfig& ec = enc.config();
    cfg.validate();
    spec.validate(ec);
    for (const auto& id : spec.train_image_ids) {
        if (!images.contains(id)) {
            throw std::invalid_argument("train_polar: training image " + id + " not in store");
        }
    }
    if (cfg.use_negatives && negative_pool.empty()) {
        throw std::invalid_argument("train_polar: use_negatives set but the negative pool is empty");
    }

    const std::vector<SiteAddress> sites = cfg.resolved_sites(ec);

    // Earliest adapted layer; everything before it is constant per query, so
    // those activations are computed once per template and reused across
    // iterations. This is what keeps a 500-iteration run sub-second.
    int min_layer = ec.n_layers + 1;
    for (const auto& s : sites) {
        min_layer = std::min(min_layer, s.site == Site::FinalProj ? ec.n_layers + 1 : s.layer);
    }

    const std::string phrase = spec.concept_phrase();
    std::vector<Matrix> prefix;
    std::vector<int> eos_pos;
    for (const auto& tpl : cfg.templates) {
        const auto tokens = tokenize(ec, instantiate_template(tpl, phrase));
        prefix.push_back(compute_prefix_activation(enc, tokens, min_layer));
        eos_pos.push_back(static_cast<int>(tokens.size()) - 1);
    }

    std::vector<Matrix> targets;
    for (const auto& id : spec.train_image_ids) {
        targets.push_back(Matrix::from_row(l2_normalize(images.get(id).embedding)));
    }
    std::vector<Matrix> neg_embs;
    for (const auto& id : negative_pool) {
        neg_embs.push_back(Matrix::from_row(l2_normalize(images.get(id).embedding)));
    }

    Rng rng(cfg.seed);
    ConceptDelta delta = ConceptDelta::init(spec.concept_id, enc, sites, cfg.rank, rng,
                                            cfg.frozen_a ? &*cfg.frozen_a : nullptr);
    delta.hyper = {cfg.lambda, cfg.iterations, cfg.learning_rate,
                   cfg.seed,   cfg.constrain_a, cfg.use_negatives};
    const bool train_a = !cfg.frozen_a.has_value();

    Adam adam({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon,
               cfg.weight_decay});
    std::vector<Matrix*> params;
    for (auto& s : delta.sites) {
        if (train_a) {
            params.push_back(&s.a);
            adam.add_param(s.a.size());
        }
        params.push_back(&s.b);
        adam.add_param(s.b.size());
    }

    TrainResult result;
    TrainReport& report = result.report;
    const int n_images = static_cast<int>(targets.size());
    const auto n_templates = static_cast<uint32_t>(cfg.templates.size());

    // Constant tape prefix shared by every iteration: frozen suffix weights,
    // cached per-template activations, targets, negatives.
    Tape tape;
    const TapeWeights base_weights = make_suffix_weight_leaves(tape, enc, min_layer);
    std::vector<NodeId> prefix_leaves;
    for (const auto& p : prefix) prefix_leaves.push_back(tape.leaf(p));
    std::vector<NodeId> target_leaves;
    for (const auto& t : targets) target_leaves.push_back(tape.leaf(t));
    std::vector<NodeId> neg_leaves;
    for (const auto& n : neg_embs) neg_leaves.push_back(tape.leaf(n));
    std::vector<NodeId> frozen_site_leaves;
    for (const auto& s : delta.sites) frozen_site_leaves.push_back(tape.leaf(enc.site_weight(s.addr)));
    const int tape_base = tape.num_nodes();

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        try {
            tape.truncate(tape_base);
            TapeWeights tw = base_weights;
            std::vector<SiteLeaves> site_leaves;
            for (size_t s = 0; s < delta.sites.size(); ++s) {
                SiteLeaves sl;
                sl.a = tape.leaf(delta.sites[s].a, train_a);
                sl.b = tape.leaf(delta.sites[s].b, true);
                tw.set_site_node(delta.sites[s].addr,
                                 tape.add(frozen_site_leaves[s], tape.matmul(sl.b, sl.a)));
                site_leaves.push_back(sl);
            }

            std::vector<NodeId> text_nodes(n_images);
            NodeId mse_sum = -1;
            for (int i = 0; i < n_images; ++i) {
                const uint32_t tpl = rng.next_below(n_templates);
                const NodeId out =
                    build_suffix_forward(tape, ec, tw, prefix_leaves[tpl], min_layer, eos_pos[tpl]);
                text_nodes[i] = tape.l2_normalize_rows(out);
                const NodeId diff = tape.sub(text_nodes[i], target_leaves[i]);
                const NodeId term = tape.sum_squares(diff);
                mse_sum = (mse_sum < 0) ? term : tape.add(mse_sum, term);
            }
            const NodeId mse = tape.scale(mse_sum, 1.0f / n_images);

            NodeId total = mse;
            NodeId neg = -1;
            if (cfg.use_negatives) {
                NodeId neg_sum = -1;
                for (int i = 0; i < n_images; ++i) {
                    const uint32_t pick = rng.next_below(static_cast<uint32_t>(neg_leaves.size()));
                    const NodeId diff = tape.sub(text_nodes[i], neg_leaves[pick]);
                    const NodeId term = tape.sum_squares(diff);
                    neg_sum = (neg_sum < 0) ? term : tape.add(neg_sum, term);
                }
                neg = tape.scale(neg_sum, -1.0f / n_images);
                total = tape.add(total, neg);
            }

            NodeId reg = -1;
            for (const auto& sl : site_leaves) {
                const NodeId ss = tape.sum_squares(sl.b);
                reg = (reg < 0) ? ss : tape.add(reg, ss);
            }
            total = tape.add(total, tape.scale(reg, static_cast<float>(cfg.lambda)));

            if (!std::isfinite(tape.value(total).data[0])) {
                throw std::runtime_error("non-finite loss");
            }
            report.loss_mse.push_back(tape.value(mse).data[0]);
            report.loss_reg.push_back(tape.value(reg).data[0]);
            report.loss_neg.push_back(neg >= 0 ? tape.value(neg).data[0] : 0.0);
            report.loss_total.push_back(tape.value(total).data[0]);

            tape.backward(total);
            std::vector<const GradBuf*> grads;
            for (const auto& sl : site_leaves) {
                if (train_a) grads.push_back(&tape.grad(sl.a));
                grads.push_back(&tape.grad(sl.b));
            }
            adam.step(params, grads);

            if (cfg.constrain_a && train_a) {
                for (auto& s : delta.sites) {
                    for (int r = 0; r < s.a.rows; ++r) {
                        const double n = l2_norm(s.a.row(r));
                        if (n <= 0.0) throw std::runtime_error("a row collapsed to zero");
                        const float inv = static_cast<float>(1.0 / n);
                        float* row = s.a.row_ptr(r);
                        for (int c = 0; c < s.a.cols; ++c) row[c] *= inv;
                    }
                }
            }
            if (observer) observer(iter, delta);
        } catch (const std::exception& e) {
            report.aborted = true;
            report.abort_reason = "iteration " + std::to_string(iter) + ": " + e.what();
            break;
        }
    }

    for (const auto& s : delta.sites) {
        for (int r = 0; r < s.a.rows; ++r) report.final_a_row_norms.push_back(l2_norm(s.a.row(r)));
        for (float v : s.b.data) report.final_b_sumsq += static_cast<double>(v) * v;
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.delta = std::move(delta);
    return result;
}

namespace {

// Token ids with each placeholder occurrence expanded to n_tokens positions;
// returns the expanded positions.
std::vector<int> expand_placeholder(const EncoderConfig& ec, std::vector<int> tokens,
                                    const std::string& v_star, int n_tokens,
                                    std::vector<int>* positions) {
    const int vid = ec.token_id(v_star);
    std::vector<int> out;
    positions->clear();
    for (int id : tokens) {
        if (id == vid) {
            for (int t = 0; t < n_tokens; ++t) {
                positions->push_back(static_cast<int>(out.size()));
                out.push_back(vid);
            }
        } else {
            out.push_back(id);
        }
    }
    if (static_cast<int>(out.size()) > ec.max_seq) {
        throw std::invalid_argument("textual inversion: expanded sequence exceeds max_seq");
    }
    return out;
}

}  // namespace

InversionResult train_textual_inversion(const FrozenEncoder& enc, const ConceptSpec& spec,
                                        const ImageStore& images, const TrainConfig& cfg,
                                        int n_tokens) {
    const auto t_start = std::chrono::steady_clock::now();
    const EncoderConfig& ec = enc.config();
    cfg.validate();
    spec.validate(ec);
    if (n_tokens < 1 || n_tokens > 2) {
        throw std::invalid_argument("textual inversion: n_tokens must be 1 or 2");
    }
    for (const auto& id : spec.train_image_ids) {
        if (!images.contains(id)) {
            throw std::invalid_argument("textual inversion: training image " + id + " not in store");
        }
    }

    // The learned vectors stand in for the whole concept phrase, so queries
    // use the bare placeholder; the class name seeds the initialization.
    std::vector<std::vector<int>> query_tokens;
    std::vector<std::vector<int>> pseudo_positions;
    for (const auto& tpl : cfg.templates) {
        auto base = tokenize(ec, instantiate_template(tpl, spec.v_star));
        std::vector<int> pos;
        query_tokens.push_back(expand_placeholder(ec, std::move(base), spec.v_star, n_tokens, &pos));
        pseudo_positions.push_back(std::move(pos));
    }

    const int init_id =
        spec.class_name.empty() ? ec.token_id(spec.v_star) : ec.token_id(spec.class_name);
    Matrix learned(n_tokens, ec.d_model);
    for (int t = 0; t < n_tokens; ++t) {
        const float* src = enc.weights().tok_embed.row_ptr(init_id);
        std::copy(src, src + ec.d_model, learned.row_ptr(t));
    }

    std::vector<Matrix> targets;
    for (const auto& id : spec.train_image_ids) {
        targets.push_back(Matrix::from_row(l2_normalize(images.get(id).embedding)));
    }

    Adam adam({cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_epsilon, 0.0});
    std::vector<Matrix> token_rows(n_tokens);
    std::vector<Matrix*> params;
    for (int t = 0; t < n_tokens; ++t) {
        token_rows[t] = Matrix(1, ec.d_model);
        std::copy(learned.row_ptr(t), learned.row_ptr(t) + ec.d_model, token_rows[t].data.begin());
        params.push_back(&token_rows[t]);
        adam.add_param(token_rows[t].size());
    }

    Rng rng(cfg.seed);
    InversionResult result;
    TrainReport& report = result.report;
    const int n_images = static_cast<int>(targets.size());
    const auto n_templates = static_cast<uint32_t>(cfg.templates.size());

    for (int iter = 0; iter < cfg.iterations; ++iter) {
        try {
            Tape tape;
            TapeWeights tw = make_weight_leaves(tape, enc, /*trainable=*/false);
            std::vector<NodeId> row_leaves;
            for (int t = 0; t < n_tokens; ++t) row_leaves.push_back(tape.leaf(token_rows[t], true));

            NodeId mse_sum = -1;
            for (int i = 0; i < n_images; ++i) {
                const uint32_t tpl = rng.next_below(n_templates);
                std::vector<std::pair<int, NodeId>> overrides;
                for (int t = 0; t < n_tokens; ++t) {
                    overrides.emplace_back(pseudo_positions[tpl][t], row_leaves[t]);
                }
                const NodeId out = build_text_forward(tape, ec, tw, query_tokens[tpl], overrides);
                const NodeId diff = tape.sub(tape.l2_normalize_rows(out), tape.leaf(targets[i]));
                const NodeId term = tape.sum_squares(diff);
                mse_sum = (mse_sum < 0) ? term : tape.add(mse_sum, term);
            }
            const NodeId loss = tape.scale(mse_sum, 1.0f / n_images);
            if (!std::isfinite(tape.value(loss).data[0])) {
                throw std::runtime_error("non-finite loss");
            }
            report.loss_mse.push_back(tape.value(loss).data[0]);
            report.loss_reg.push_back(0.0);
            report.loss_neg.push_back(0.0);
            report.loss_total.push_back(tape.value(loss).data[0]);

            tape.backward(loss);
            std::vector<const GradBuf*> grads;
            for (NodeId id : row_leaves) grads.push_back(&tape.grad(id));
            adam.step(params, grads);
        } catch (const std::exception& e) {
            report.aborted = true;
            report.abort_reason = "iteration " + std::to_string(iter) + ": " + e.what();
            break;
        }
    }

    TextualInversion ti;
    ti.concept_id = spec.concept_id;
    ti.encoder_fingerprint = enc.fingerprint();
    ti.v_star = spec.v_star;
    ti.tokens = Matrix(n_tokens, ec.d_model);
    for (int t = 0; t < n_tokens; ++t) {
        std::copy(token_rows[t].data.begin(), token_rows[t].data.end(), ti.tokens.row_ptr(t));
    }
    report.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    result.inversion = std::move(ti);
    return result;
}

std::vector<float> encode_text_with_inversion(const FrozenEncoder& enc,
                                              const TextualInversion& ti,
                                              const std::string& text) {
    if (ti.encoder_fingerprint != enc.fingerprint()) {
        throw std::runtime_error("textual inversion was trained against a different encoder");
    }
    const EncoderConfig& ec = enc.config();
    std::vector<int> positions;
    const std::vector<int> tokens =
        expand_placeholder(ec, tokenize(ec, text), ti.v_star, ti.tokens.rows, &positions);

    Tape tape(/*grad_enabled=*/false);
    TapeWeights tw = make_weight_leaves(tape, enc, false);
    std::vector<std::pair<int, NodeId>> overrides;
    for (size_t i = 0; i < positions.size(); ++i) {
        Matrix row(1, ec.d_model);
        const int t = static_cast<int>(i % ti.tokens.rows);
        std::copy(ti.tokens.row_ptr(t), ti.tokens.row_ptr(t) + ec.d_model, row.data.begin());
        overrides.emplace_back(positions[i], tape.leaf(std::move(row)));
    }
    const NodeId out = build_text_forward(tape, ec, tw, tokens, overrides);
    const Matrix& m = tape.value(out);
    return {m.data.begin(), m.data.end()};
}

}  // namespace polar
