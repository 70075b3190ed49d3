#pragma once

#include <string>
#include <vector>

#include "polar/encoder.hpp"

namespace polar::testing {

// Small encoder that tokenizes the fixed template set plus a couple of
// context words; big enough for nontrivial attention, small enough for
// finite differences.
inline EncoderConfig tiny_config(uint64_t seed = 3) {
    EncoderConfig cfg;
    cfg.vocab = {"<eos>", "sks",    "an",     "image", "of",    "a",      "photo",
                 "picture", "cropped", "close-up", "bright", "the",   "in",     "and",
                 "kitchen", "garden", "mug",   "dog"};
    cfg.d_model = 16;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_out = 8;
    cfg.max_seq = 12;
    cfg.seed = seed;
    return cfg;
}

inline FrozenEncoder tiny_encoder(uint64_t seed = 3) {
    return FrozenEncoder::random_init(tiny_config(seed));
}

}  // namespace polar::testing
