#include "polar/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>
#include <stdexcept>

#include "polar/binfile.hpp"

namespace polar {

namespace {

const std::vector<std::string> kContextWords = {
    "kitchen", "garden",  "beach",  "office",  "forest", "street",  "bedroom", "rooftop",
    "library", "garage",  "park",   "studio",  "balcony", "cellar", "attic",   "harbor",
    "museum",  "station", "bridge", "meadow",
};

const std::vector<std::string> kClassWords = {
    "mug",  "dog",  "lamp", "robot", "vase", "kite",  "drum",  "fern",
    "boot", "harp", "crab", "pylon", "bell", "torch", "wagon", "spool",
};

// Words every world vocab carries: template + query connectives.
const std::vector<std::string> kSupportWords = {
    "an", "image", "of", "a", "photo", "picture", "cropped", "close-up", "bright",
    "the", "in", "and",
};

// Padding so the vocab lands near 200 entries regardless of world size.
const std::vector<std::string> kFillerWords = {
    "table",  "chair",   "window",  "door",    "floor",  "wall",    "shelf",  "box",
    "cup",    "plate",   "spoon",   "fork",    "bottle", "glass",   "paper",  "pen",
    "book",   "bag",     "coat",    "hat",     "shoe",   "sock",    "chain",  "rope",
    "stone",  "brick",   "plant",   "leaf",    "branch", "root",    "cloud",  "rain",
    "snow",   "wind",    "sun",     "moon",    "star",   "river",   "lake",   "hill",
    "red",    "blue",    "green",   "yellow",  "purple", "orange",  "black",  "white",
    "gray",   "brown",   "small",   "large",   "tall",   "short",   "round",  "flat",
    "old",    "new",     "warm",    "cold",    "quiet",  "loud",    "soft",   "hard",
    "walks",  "sits",    "stands",  "rests",   "waits",  "turns",   "moves",  "stops",
    "near",   "under",   "over",    "beside",  "behind", "between", "above",  "below",
    "one",    "two",     "three",   "four",    "five",   "six",     "seven",  "eight",
    "morning", "evening", "night",  "day",     "spring", "summer",  "autumn", "winter",
    "corner", "center",  "edge",    "side",    "front",  "back",    "top",    "bottom",
    "light",  "shadow",  "color",   "shape",   "line",   "curve",   "dot",    "grid",
    "wood",   "metal",   "cloth",   "sand",    "grass",  "water",   "smoke",  "dust",
    "fast",   "slow",    "open",    "closed",  "full",   "empty",   "clean",  "rough",
};

const std::vector<std::string> kContextCaptionTemplates = {
    "a photo of the {}",
    "an image of the {}",
    "a picture of the {}",
    "a photo in the {}",
};

std::string fmt_id(const char* fmt, int a, int b = -1, int c = -1) {
    char buf[64];
    if (b < 0) {
        std::snprintf(buf, sizeof(buf), fmt, a);
    } else if (c < 0) {
        std::snprintf(buf, sizeof(buf), fmt, a, b);
    } else {
        std::snprintf(buf, sizeof(buf), fmt, a, b, c);
    }
    return buf;
}

std::string fill_template(const std::string& tpl, const std::string& word) {
    const auto pos = tpl.find("{}");
    return tpl.substr(0, pos) + word + tpl.substr(pos + 2);
}

}  // namespace

void WorldConfig::validate() const {
    if (n_concepts < 1 || n_contexts < 1) {
        throw std::invalid_argument("world config: need at least one concept and context");
    }
    if (n_concepts > static_cast<int>(kClassWords.size())) {
        throw std::invalid_argument("world config: at most " + std::to_string(kClassWords.size()) +
                                    " concepts supported");
    }
    if (n_contexts > static_cast<int>(kContextWords.size())) {
        throw std::invalid_argument("world config: at most " + std::to_string(kContextWords.size()) +
                                    " contexts supported");
    }
    if (d_out < 2) throw std::invalid_argument("world config: d_out too small");
    if (alpha <= 0.0 || beta <= 0.0) throw std::invalid_argument("world config: alpha, beta must be > 0");
    if (noise_sigma < 0.0) throw std::invalid_argument("world config: sigma must be >= 0");
    if (train_images_per_concept < 1) throw std::invalid_argument("world config: need N_c >= 1");
    if (multi_concept_pairs > 0 && n_concepts < 2) {
        throw std::invalid_argument("world config: multi-concept images need >= 2 concepts");
    }
}

EncoderConfig SyntheticWorld::encoder_config() const {
    EncoderConfig cfg;
    cfg.vocab = vocab;
    cfg.d_out = config.d_out;
    cfg.seed = config.seed;
    return cfg;
}

const ConceptSpec& SyntheticWorld::concept_by_id(const std::string& id) const {
    for (const auto& c : concepts) {
        if (c.concept_id == id) return c;
    }
    throw std::invalid_argument("world has no concept " + id);
}

std::vector<std::string> SyntheticWorld::negative_pool(const std::string& concept_id) const {
    std::vector<std::string> pool;
    for (const auto& c : concepts) {
        if (c.concept_id == concept_id) continue;
        pool.insert(pool.end(), c.train_image_ids.begin(), c.train_image_ids.end());
    }
    return pool;
}

namespace {

Matrix sample_separated_latents(Rng& rng, int count, int dim, double max_cos, const char* what) {
    Matrix latents(count, dim);
    int placed = 0;
    int attempts = 0;
    const int max_attempts = 2000 * count;
    while (placed < count) {
        if (++attempts > max_attempts) {
            throw std::runtime_error(std::string("generate_world: could not separate ") + what +
                                     " latents; a larger d_out would give more room");
        }
        const auto v = rng.unit_vector(dim);
        bool ok = true;
        for (int p = 0; p < placed && ok; ++p) {
            double cosv = 0.0;
            for (int i = 0; i < dim; ++i) cosv += static_cast<double>(v[i]) * latents.at(p, i);
            if (std::abs(cosv) >= max_cos) ok = false;
        }
        if (!ok) continue;
        std::copy(v.begin(), v.end(), latents.row_ptr(placed));
        ++placed;
    }
    return latents;
}

std::vector<float> mix_embedding(Rng& rng, const WorldConfig& cfg,
                                 std::span<const float> concept_a, std::span<const float> concept_b,
                                 std::span<const float> context, double concept_weight) {
    std::vector<double> v(cfg.d_out, 0.0);
    for (int i = 0; i < cfg.d_out; ++i) {
        if (!concept_a.empty()) v[i] += concept_weight * concept_a[i];
        if (!concept_b.empty()) v[i] += concept_weight * concept_b[i];
        if (!context.empty()) v[i] += cfg.beta * context[i];
    }
    for (int i = 0; i < cfg.d_out; ++i) v[i] += cfg.noise_sigma * rng.next_gaussian();
    double norm = 0.0;
    for (double x : v) norm += x * x;
    norm = std::sqrt(norm);
    if (norm <= 0.0) throw std::runtime_error("generate_world: degenerate zero embedding");
    std::vector<float> out(cfg.d_out);
    for (int i = 0; i < cfg.d_out; ++i) out[i] = static_cast<float>(v[i] / norm);
    return l2_normalize(out);
}

}  // namespace

SyntheticWorld generate_world(const WorldConfig& cfg) {
    cfg.validate();
    SyntheticWorld w;
    w.config = cfg;

    // Vocab: reserved tokens, support words, the world's context and class
    // words, then filler. Order is fixed so token ids reproduce.
    std::set<std::string> seen;
    auto push_word = [&](const std::string& word) {
        if (seen.insert(word).second) w.vocab.push_back(word);
    };
    push_word("<eos>");
    push_word("sks");
    for (const auto& word : kSupportWords) push_word(word);
    for (int x = 0; x < cfg.n_contexts; ++x) push_word(kContextWords[x]);
    for (int c = 0; c < cfg.n_concepts; ++c) push_word(kClassWords[c]);
    for (const auto& word : kFillerWords) push_word(word);

    Rng rng(cfg.seed);
    w.concept_latents =
        sample_separated_latents(rng, cfg.n_concepts, cfg.d_out, cfg.concept_max_cos, "concept");
    w.context_latents = sample_separated_latents(rng, cfg.n_contexts, cfg.d_out, 0.5, "context");
    w.context_names.assign(kContextWords.begin(), kContextWords.begin() + cfg.n_contexts);

    auto concept_row = [&](int c) { return w.concept_latents.row(c); };
    auto context_row = [&](int x) { return w.context_latents.row(x); };
    const std::span<const float> none;

    // Single-concept images: the evaluation database entries for (c, x).
    for (int c = 0; c < cfg.n_concepts; ++c) {
        for (int x = 0; x < cfg.n_contexts; ++x) {
            for (int i = 0; i < cfg.images_per_concept_context; ++i) {
                ImageRecord rec;
                rec.id = fmt_id("img_c%02d_x%02d_e%d", c, x, i);
                rec.embedding = mix_embedding(rng, cfg, concept_row(c), none, context_row(x), cfg.alpha);
                rec.concepts = {kClassWords[c]};
                rec.context = kContextWords[x];
                w.images.add(rec);
                w.eval_image_ids.push_back(rec.id);
                w.single_concept_eval_ids.push_back(rec.id);
            }
        }
    }

    // Training images: N_c per concept, disjoint from the evaluation set.
    for (int c = 0; c < cfg.n_concepts; ++c) {
        ConceptSpec spec;
        spec.concept_id = kClassWords[c];
        spec.v_star = "sks";
        if (cfg.use_class_names) spec.class_name = kClassWords[c];
        for (int i = 0; i < cfg.train_images_per_concept; ++i) {
            const int x = static_cast<int>(rng.next_below(static_cast<uint32_t>(cfg.n_contexts)));
            ImageRecord rec;
            rec.id = fmt_id("img_c%02d_tr_%d", c, i);
            rec.embedding = mix_embedding(rng, cfg, concept_row(c), none, context_row(x), cfg.alpha);
            rec.concepts = {kClassWords[c]};
            rec.context = kContextWords[x];
            w.images.add(rec);
            spec.train_image_ids.push_back(rec.id);
        }
        w.concepts.push_back(std::move(spec));
    }

    // Context-only images: pretraining targets plus held-out evaluation
    // images; these carry the general-knowledge captions.
    for (int x = 0; x < cfg.n_contexts; ++x) {
        for (int i = 0; i < cfg.context_only_pretrain; ++i) {
            ImageRecord rec;
            rec.id = fmt_id("img_x%02d_p%d", x, i);
            rec.embedding = mix_embedding(rng, cfg, none, none, context_row(x), 0.0);
            rec.context = kContextWords[x];
            w.images.add(rec);
            const auto& tpl = kContextCaptionTemplates[i % kContextCaptionTemplates.size()];
            w.pretrain_pairs.push_back({fill_template(tpl, kContextWords[x]), rec.id});
        }
        for (int i = 0; i < cfg.context_only_eval; ++i) {
            ImageRecord rec;
            rec.id = fmt_id("img_x%02d_e%d", x, i);
            rec.embedding = mix_embedding(rng, cfg, none, none, context_row(x), 0.0);
            rec.context = kContextWords[x];
            w.images.add(rec);
            w.eval_image_ids.push_back(rec.id);
            const auto& tpl = kContextCaptionTemplates[i % kContextCaptionTemplates.size()];
            w.caption_probes.push_back({fill_template(tpl, kContextWords[x]), rec.id});
        }
    }

    // Multi-concept images: pairs of concepts sharing a context.
    for (int p = 0; p < cfg.multi_concept_pairs; ++p) {
        const int c1 = (2 * p) % cfg.n_concepts;
        const int c2 = (2 * p + 1) % cfg.n_concepts;
        if (c1 == c2) break;
        for (int j = 0; j < cfg.multi_contexts_per_pair; ++j) {
            const int x = (p + j * 5) % cfg.n_contexts;
            for (int i = 0; i < cfg.multi_images_per_pair; ++i) {
                ImageRecord rec;
                rec.id = fmt_id("img_m%02d_x%02d_", p, x) + std::to_string(i);
                rec.embedding =
                    mix_embedding(rng, cfg, concept_row(c1), concept_row(c2), context_row(x), cfg.alpha);
                rec.concepts = {kClassWords[c1], kClassWords[c2]};
                rec.context = kContextWords[x];
                w.images.add(rec);
                w.eval_image_ids.push_back(rec.id);
            }
        }
    }

    std::sort(w.eval_image_ids.begin(), w.eval_image_ids.end());
    std::sort(w.single_concept_eval_ids.begin(), w.single_concept_eval_ids.end());
    return w;
}

std::vector<QueryRecord> build_eval_suite(const SyntheticWorld& w) {
    std::vector<QueryRecord> queries;
    const std::set<std::string> eval_set(w.eval_image_ids.begin(), w.eval_image_ids.end());

    auto eval_images_matching = [&](const std::vector<std::string>& concepts,
                                    const std::string& context) {
        std::vector<std::string> out;
        for (const auto& rec : w.images.records()) {
            if (!eval_set.count(rec.id)) continue;
            if (!context.empty() && rec.context != context) continue;
            if (rec.concepts.size() != concepts.size()) continue;
            bool all = true;
            for (const auto& c : concepts) {
                if (std::find(rec.concepts.begin(), rec.concepts.end(), c) == rec.concepts.end()) {
                    all = false;
                    break;
                }
            }
            if (all) out.push_back(rec.id);
        }
        return out;
    };

    // Context-single: one query per (concept, context) that has eval images.
    for (const auto& spec : w.concepts) {
        for (const auto& ctx : w.context_names) {
            auto gt = eval_images_matching({spec.concept_id}, ctx);
            if (gt.empty()) continue;
            QueryRecord q;
            q.text = "an image of " + spec.concept_phrase() + " in the " + ctx;
            q.kind = QueryKind::ContextSingle;
            q.ground_truth = std::move(gt);
            q.concepts = {spec.concept_id};
            queries.push_back(std::move(q));
        }
    }

    // Context-multi: one query per generated (pair, context) group.
    std::set<std::pair<std::string, std::string>> seen_multi;
    for (const auto& rec : w.images.records()) {
        if (!eval_set.count(rec.id) || rec.concepts.size() != 2) continue;
        const std::string key = rec.concepts[0] + "|" + rec.concepts[1];
        if (!seen_multi.insert({key, rec.context}).second) continue;
        QueryRecord q;
        const auto& p1 = w.concept_by_id(rec.concepts[0]);
        const auto& p2 = w.concept_by_id(rec.concepts[1]);
        q.text = "an image of " + p1.concept_phrase() + " and " + p2.concept_phrase() + " in the " +
                 rec.context;
        q.kind = QueryKind::ContextMulti;
        q.ground_truth = eval_images_matching(rec.concepts, rec.context);
        q.concepts = rec.concepts;
        queries.push_back(std::move(q));
    }

    // Concept-only: "an image of <placeholder>" with every single-concept
    // eval image of the concept as ground truth.
    for (const auto& spec : w.concepts) {
        QueryRecord q;
        q.text = "an image of " + spec.concept_phrase();
        q.kind = QueryKind::ConceptOnly;
        q.ground_truth = eval_images_matching({spec.concept_id}, "");
        q.concepts = {spec.concept_id};
        if (q.ground_truth.empty()) continue;
        queries.push_back(std::move(q));
    }

    // General captions: the held-out context images with their captions;
    // each query keeps one concept's delta active (round robin) so the probe
    // measures interference from personalization.
    for (size_t i = 0; i < w.caption_probes.size(); ++i) {
        QueryRecord q;
        q.text = w.caption_probes[i].caption;
        q.kind = QueryKind::GeneralCaption;
        q.ground_truth = {w.caption_probes[i].source_image_id};
        q.concepts = {w.concepts[i % w.concepts.size()].concept_id};
        queries.push_back(std::move(q));
    }
    return queries;
}

std::vector<PretrainPair> make_pretrain_pairs(const SyntheticWorld& world,
                                              const EncoderConfig& cfg) {
    std::vector<PretrainPair> pairs;
    for (const auto& wp : world.pretrain_pairs) {
        PretrainPair p;
        p.tokens = tokenize(cfg, wp.caption);
        p.target = l2_normalize(world.images.get(wp.image_id).embedding);
        pairs.push_back(std::move(p));
    }
    return pairs;
}

void save_world(const std::string& path, const SyntheticWorld& w) {
    nlohmann::json h;
    h["format_version"] = 1;
    h["kind"] = "world";
    h["config"] = {{"n_concepts", w.config.n_concepts},
                   {"n_contexts", w.config.n_contexts},
                   {"d_out", w.config.d_out},
                   {"images_per_concept_context", w.config.images_per_concept_context},
                   {"context_only_pretrain", w.config.context_only_pretrain},
                   {"context_only_eval", w.config.context_only_eval},
                   {"multi_concept_pairs", w.config.multi_concept_pairs},
                   {"multi_contexts_per_pair", w.config.multi_contexts_per_pair},
                   {"multi_images_per_pair", w.config.multi_images_per_pair},
                   {"train_images_per_concept", w.config.train_images_per_concept},
                   {"noise_sigma", w.config.noise_sigma},
                   {"alpha", w.config.alpha},
                   {"beta", w.config.beta},
                   {"concept_max_cos", w.config.concept_max_cos},
                   {"seed", w.config.seed},
                   {"use_class_names", w.config.use_class_names}};
    h["vocab"] = w.vocab;
    h["context_names"] = w.context_names;
    nlohmann::json jconcepts = nlohmann::json::array();
    for (const auto& c : w.concepts) {
        jconcepts.push_back({{"concept_id", c.concept_id},
                             {"v_star", c.v_star},
                             {"class_name", c.class_name},
                             {"train_image_ids", c.train_image_ids}});
    }
    h["concepts"] = std::move(jconcepts);
    nlohmann::json jimages = nlohmann::json::array();
    for (const auto& rec : w.images.records()) {
        jimages.push_back({{"id", rec.id}, {"concepts", rec.concepts}, {"context", rec.context}});
    }
    h["images"] = std::move(jimages);
    nlohmann::json jpre = nlohmann::json::array();
    for (const auto& p : w.pretrain_pairs) {
        jpre.push_back({{"caption", p.caption}, {"image_id", p.image_id}});
    }
    h["pretrain_pairs"] = std::move(jpre);
    nlohmann::json jprobe = nlohmann::json::array();
    for (const auto& p : w.caption_probes) {
        jprobe.push_back({{"caption", p.caption}, {"source_image_id", p.source_image_id}});
    }
    h["caption_probes"] = std::move(jprobe);
    h["eval_image_ids"] = w.eval_image_ids;
    h["single_concept_eval_ids"] = w.single_concept_eval_ids;

    std::vector<float> blob;
    for (const auto& rec : w.images.records()) {
        blob.insert(blob.end(), rec.embedding.begin(), rec.embedding.end());
    }
    blob.insert(blob.end(), w.concept_latents.data.begin(), w.concept_latents.data.end());
    blob.insert(blob.end(), w.context_latents.data.begin(), w.context_latents.data.end());
    write_container(path, h, blob);
}

SyntheticWorld load_world(const std::string& path) {
    const BinContainer c = read_container(path);
    if (c.header.value("kind", "") != "world") throw std::runtime_error("not a world file: " + path);
    if (c.header.value("format_version", -1) != 1) {
        throw std::runtime_error("unsupported world format version in " + path);
    }
    try {
        SyntheticWorld w;
        const auto& jc = c.header.at("config");
        w.config.n_concepts = jc.at("n_concepts").get<int>();
        w.config.n_contexts = jc.at("n_contexts").get<int>();
        w.config.d_out = jc.at("d_out").get<int>();
        w.config.images_per_concept_context = jc.at("images_per_concept_context").get<int>();
        w.config.context_only_pretrain = jc.at("context_only_pretrain").get<int>();
        w.config.context_only_eval = jc.at("context_only_eval").get<int>();
        w.config.multi_concept_pairs = jc.at("multi_concept_pairs").get<int>();
        w.config.multi_contexts_per_pair = jc.at("multi_contexts_per_pair").get<int>();
        w.config.multi_images_per_pair = jc.at("multi_images_per_pair").get<int>();
        w.config.train_images_per_concept = jc.at("train_images_per_concept").get<int>();
        w.config.noise_sigma = jc.at("noise_sigma").get<double>();
        w.config.alpha = jc.at("alpha").get<double>();
        w.config.beta = jc.at("beta").get<double>();
        w.config.concept_max_cos = jc.at("concept_max_cos").get<double>();
        w.config.seed = jc.at("seed").get<uint64_t>();
        w.config.use_class_names = jc.at("use_class_names").get<bool>();
        w.vocab = c.header.at("vocab").get<std::vector<std::string>>();
        w.context_names = c.header.at("context_names").get<std::vector<std::string>>();
        for (const auto& j : c.header.at("concepts")) {
            ConceptSpec spec;
            spec.concept_id = j.at("concept_id").get<std::string>();
            spec.v_star = j.at("v_star").get<std::string>();
            spec.class_name = j.at("class_name").get<std::string>();
            spec.train_image_ids = j.at("train_image_ids").get<std::vector<std::string>>();
            w.concepts.push_back(std::move(spec));
        }
        const auto& jimages = c.header.at("images");
        const size_t d_out = static_cast<size_t>(w.config.d_out);
        const size_t need = jimages.size() * d_out +
                            static_cast<size_t>(w.config.n_concepts + w.config.n_contexts) * d_out;
        if (c.blob.size() != need) throw std::runtime_error("world blob size mismatch");
        size_t off = 0;
        for (const auto& j : jimages) {
            ImageRecord rec;
            rec.id = j.at("id").get<std::string>();
            rec.concepts = j.at("concepts").get<std::vector<std::string>>();
            rec.context = j.at("context").get<std::string>();
            rec.embedding.assign(c.blob.begin() + off, c.blob.begin() + off + d_out);
            off += d_out;
            w.images.add(std::move(rec));
        }
        w.concept_latents = Matrix(w.config.n_concepts, w.config.d_out);
        std::copy(c.blob.begin() + off, c.blob.begin() + off + w.concept_latents.size(),
                  w.concept_latents.data.begin());
        off += w.concept_latents.size();
        w.context_latents = Matrix(w.config.n_contexts, w.config.d_out);
        std::copy(c.blob.begin() + off, c.blob.begin() + off + w.context_latents.size(),
                  w.context_latents.data.begin());
        for (const auto& j : c.header.at("pretrain_pairs")) {
            w.pretrain_pairs.push_back(
                {j.at("caption").get<std::string>(), j.at("image_id").get<std::string>()});
        }
        for (const auto& j : c.header.at("caption_probes")) {
            w.caption_probes.push_back(
                {j.at("caption").get<std::string>(), j.at("source_image_id").get<std::string>()});
        }
        w.eval_image_ids = c.header.at("eval_image_ids").get<std::vector<std::string>>();
        w.single_concept_eval_ids =
            c.header.at("single_concept_eval_ids").get<std::vector<std::string>>();
        return w;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("corrupt world file " + path + ": " + e.what());
    }
}

}  // namespace polar
