#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "helpers.hpp"
#include "polar/binfile.hpp"
#include "polar/delta.hpp"
#include "polar/encoder.hpp"

using namespace polar;
using polar::testing::tiny_config;
using polar::testing::tiny_encoder;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_SUITE_BEGIN("encoder");

TEST_CASE("tokenize maps words, folds case, appends eos") {
    const EncoderConfig cfg = tiny_config();
    const auto ids = tokenize(cfg, "an image of sks");
    REQUIRE(ids.size() == 5);
    CHECK(ids[0] == cfg.token_id("an"));
    CHECK(ids[1] == cfg.token_id("image"));
    CHECK(ids[2] == cfg.token_id("of"));
    CHECK(ids[3] == cfg.token_id("sks"));
    CHECK(ids[4] == cfg.token_id("<eos>"));

    CHECK(tokenize(cfg, "SKS") == tokenize(cfg, "sks"));
}

TEST_CASE("tokenize error paths name the problem") {
    const EncoderConfig cfg = tiny_config();
    CHECK_THROWS_AS((void)tokenize(cfg, ""), std::invalid_argument);
    CHECK_THROWS_AS((void)tokenize(cfg, "   "), std::invalid_argument);
    try {
        (void)tokenize(cfg, "an image of zzyzx");
        FAIL("expected out-of-vocabulary error");
    } catch (const std::invalid_argument& e) {
        CHECK(std::string(e.what()).find("zzyzx") != std::string::npos);
    }
    CHECK_THROWS_AS(
        (void)tokenize(cfg, "an image of a photo of a picture of the bright kitchen garden"),
        std::invalid_argument);
}

TEST_CASE("config validation enforces reserved tokens and head division") {
    EncoderConfig cfg = tiny_config();
    cfg.n_heads = 3;  // 16 % 3 != 0
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

    EncoderConfig cfg2 = tiny_config();
    cfg2.vocab.erase(cfg2.vocab.begin() + 1);  // drop "sks"
    CHECK_THROWS_AS(cfg2.validate(), std::invalid_argument);
}

TEST_CASE("site address parsing round trips") {
    const SiteAddress a = parse_site_address("2:V");
    CHECK(a.layer == 2);
    CHECK(a.site == Site::V);
    CHECK(to_string(a) == "2:V");
    const SiteAddress p = parse_site_address("FinalProj");
    CHECK(p.site == Site::FinalProj);
    CHECK_THROWS_AS((void)parse_site_address("V"), std::invalid_argument);
    CHECK_THROWS_AS((void)parse_site_address("2:XYZ"), std::invalid_argument);
}

TEST_CASE("encode with no deltas equals encode with an all-zero delta bitwise") {
    const FrozenEncoder enc = tiny_encoder();
    const auto tokens = tokenize(enc.config(), "an image of sks in the kitchen");
    const auto base = encode_text(enc, tokens);

    Rng rng(5);
    const SiteAddress sites[] = {SiteAddress(enc.config().n_layers, Site::V)};
    const ConceptDelta zero = ConceptDelta::init("c", enc, sites, 1, rng);  // b = 0
    const EncoderUpdate updates[] = {zero.to_update()};
    const auto with_zero = encode_text(enc, tokens, updates);
    CHECK(base == with_zero);
}

TEST_CASE("encode is a pure function of its inputs") {
    const FrozenEncoder enc = tiny_encoder();
    const auto tokens = tokenize(enc.config(), "a bright photo of the garden");
    CHECK(encode_text(enc, tokens) == encode_text(enc, tokens));
}

TEST_CASE("a nonzero value-site delta matches the dense substitution oracle") {
    const FrozenEncoder enc = tiny_encoder();
    const auto tokens = tokenize(enc.config(), "a photo of sks in the garden");
    const SiteAddress site(enc.config().n_layers, Site::V);

    Rng rng(8);
    const SiteAddress sites[] = {site};
    ConceptDelta delta = ConceptDelta::init("c", enc, sites, 1, rng);
    for (float& v : delta.sites[0].b.data) v = static_cast<float>(rng.next_gaussian() * 0.2);

    const EncoderUpdate updates[] = {delta.to_update()};
    const auto adapted = encode_text(enc, tokens, updates);

    // Oracle: bake w + delta_w densely into a fresh frozen encoder.
    EncoderWeights w = enc.weights();
    add_inplace(w.layers.back().wv, materialize(delta, site));
    const FrozenEncoder baked(enc.config(), std::move(w));
    const auto oracle = encode_text(baked, tokens);

    REQUIRE(adapted.size() == oracle.size());
    for (size_t i = 0; i < adapted.size(); ++i) {
        CHECK(adapted[i] == doctest::Approx(oracle[i]).epsilon(1e-6));
    }
    // And it must differ from the base output.
    const auto base = encode_text(enc, tokens);
    double diff = 0.0;
    for (size_t i = 0; i < base.size(); ++i) diff += std::abs(adapted[i] - base[i]);
    CHECK(diff > 1e-6);
}

TEST_CASE("updates against a different encoder are rejected") {
    const FrozenEncoder enc = tiny_encoder(3);
    const FrozenEncoder other = tiny_encoder(4);
    const auto tokens = tokenize(enc.config(), "an image of sks");
    Rng rng(5);
    const SiteAddress sites[] = {SiteAddress(other.config().n_layers, Site::V)};
    const ConceptDelta delta = ConceptDelta::init("c", other, sites, 1, rng);
    const EncoderUpdate updates[] = {delta.to_update()};
    CHECK_THROWS_AS((void)encode_text(enc, tokens, updates), std::runtime_error);
}

TEST_CASE("attention rows sum to one at every layer and head") {
    const FrozenEncoder enc = tiny_encoder();
    const auto tokens = tokenize(enc.config(), "a cropped photo of the kitchen");
    const auto probes = attention_probe(enc, tokens);
    REQUIRE(probes.size() == static_cast<size_t>(enc.config().n_layers) * enc.config().n_heads);
    for (const auto& p : probes) {
        for (int i = 0; i < p.rows; ++i) {
            double sum = 0.0;
            for (int j = 0; j < p.cols; ++j) {
                sum += p.at(i, j);
                CHECK(p.at(i, j) >= 0.0f);
            }
            CHECK(std::abs(sum - 1.0) < 1e-6);
        }
    }
}

TEST_CASE("fingerprint changes iff a weight changes") {
    const FrozenEncoder a = tiny_encoder(3);
    const FrozenEncoder b = tiny_encoder(3);
    CHECK(a.fingerprint() == b.fingerprint());

    EncoderWeights w = a.weights();
    w.layers[0].wq.data[5] += 1e-3f;
    const FrozenEncoder c(a.config(), std::move(w));
    CHECK(c.fingerprint() != a.fingerprint());

    const FrozenEncoder d = tiny_encoder(4);
    CHECK(d.fingerprint() != a.fingerprint());
}

TEST_CASE("checkpoint round trip preserves weights and fingerprint") {
    const FrozenEncoder enc = tiny_encoder(9);
    const std::string path = temp_path("enc_roundtrip.bin");
    save_encoder(path, enc);
    const FrozenEncoder loaded = load_encoder(path);
    CHECK(loaded.fingerprint() == enc.fingerprint());
    const auto tokens = tokenize(enc.config(), "a photo of the kitchen");
    CHECK(encode_text(enc, tokens) == encode_text(loaded, tokens));
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint loader rejects corruption") {
    const FrozenEncoder enc = tiny_encoder(9);
    const std::string path = temp_path("enc_corrupt.bin");
    save_encoder(path, enc);

    // Flip one blob byte; the recorded fingerprint no longer matches.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.seekg(-16, std::ios::end);
        char byte = 0;
        f.read(&byte, 1);
        byte = static_cast<char>(byte ^ 0x5a);
        f.seekp(-16, std::ios::end);
        f.write(&byte, 1);
    }
    CHECK_THROWS_AS((void)load_encoder(path), std::runtime_error);

    std::filesystem::resize_file(path, 64);
    CHECK_THROWS_AS((void)load_encoder(path), std::runtime_error);
    std::filesystem::remove(path);
    CHECK_THROWS_AS((void)load_encoder(path), std::runtime_error);
}

TEST_CASE("image store enforces unit embeddings and unique ids") {
    ImageStore store;
    store.add({"a", l2_normalize(std::vector<float>{1, 2, 3}), {}, ""});
    CHECK(store.contains("a"));
    CHECK_THROWS_AS(store.add({"a", l2_normalize(std::vector<float>{1, 0, 0}), {}, ""}),
                    std::invalid_argument);
    CHECK_THROWS_AS(store.add({"b", {0.5f, 0.5f, 0.5f}, {}, ""}), std::invalid_argument);
    CHECK_THROWS_AS((void)store.get("missing"), std::invalid_argument);
}

TEST_CASE("pretrain with zero steps is a no-op and seeds reproduce") {
    const FrozenEncoder enc = tiny_encoder(12);
    std::vector<PretrainPair> pairs;
    PretrainPair p;
    p.tokens = tokenize(enc.config(), "a photo of the kitchen");
    p.target = Rng(77).unit_vector(enc.config().d_out);
    pairs.push_back(p);

    PretrainConfig cfg;
    cfg.steps = 0;
    const FrozenEncoder same = pretrain(enc, pairs, cfg);
    CHECK(same.fingerprint() == enc.fingerprint());

    cfg.steps = 5;
    cfg.seed = 123;
    const FrozenEncoder a = pretrain(enc, pairs, cfg);
    const FrozenEncoder b = pretrain(enc, pairs, cfg);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != enc.fingerprint());
}

TEST_CASE("pretrain rejects an empty pair list") {
    const FrozenEncoder enc = tiny_encoder();
    CHECK_THROWS_AS((void)pretrain(enc, {}, PretrainConfig{}), std::invalid_argument);
}

TEST_CASE("pretrain reduces the fitting loss") {
    const FrozenEncoder enc = tiny_encoder(13);
    Rng rng(31);
    const auto kitchen_target = rng.unit_vector(enc.config().d_out);
    const auto garden_target = rng.unit_vector(enc.config().d_out);
    std::vector<PretrainPair> pairs;
    for (const char* text : {"a photo of the kitchen", "a photo of the garden",
                             "an image of the kitchen", "an image of the garden"}) {
        PretrainPair p;
        p.tokens = tokenize(enc.config(), text);
        p.target = std::string(text).find("kitchen") != std::string::npos ? kitchen_target
                                                                          : garden_target;
        pairs.push_back(p);
    }
    auto fit = [&](const FrozenEncoder& e) {
        double total = 0.0;
        for (const auto& p : pairs) {
            const auto out = l2_normalize(encode_text(e, p.tokens));
            for (size_t i = 0; i < out.size(); ++i) {
                const double d = out[i] - p.target[i];
                total += d * d;
            }
        }
        return total;
    };
    PretrainConfig cfg;
    cfg.steps = 150;
    cfg.batch_size = 4;
    cfg.seed = 999;
    const FrozenEncoder tuned = pretrain(enc, pairs, cfg);
    CHECK(fit(tuned) < 0.25 * fit(enc));
}

TEST_SUITE_END();
