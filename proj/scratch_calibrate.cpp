// Scratch calibration harness (not part of the build).
#include <chrono>
#include <cstdio>
#include <map>
#include <set>

#include "polar/delta.hpp"
#include "polar/encoder.hpp"
#include "polar/metrics.hpp"
#include "polar/personalize.hpp"
#include "polar/retrieval.hpp"
#include "polar/synth.hpp"

using namespace polar;
using Clock = std::chrono::steady_clock;

static double secs(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double>(b - a).count();
}

// mRR of pure context captions against held-out context-only images.
static double context_caption_mrr(const FrozenEncoder& enc, const SyntheticWorld& w,
                                  const RetrievalIndex& index) {
    double total = 0.0;
    int n = 0;
    for (const auto& ctx : w.context_names) {
        std::set<std::string> gt;
        for (const auto& rec : w.images.records()) {
            if (rec.context == ctx && rec.concepts.empty() &&
                rec.id.find("_e") != std::string::npos) {
                gt.insert(rec.id);
            }
        }
        if (gt.empty()) continue;
        const auto r = query(enc, index, "a photo of the " + ctx, {}, (int)index.size());
        std::vector<std::string> ids;
        for (auto& [id, s] : r.hits) ids.push_back(id);
        total += reciprocal_rank(ids, gt);
        ++n;
    }
    return total / n;
}

int main(int argc, char** argv) {
    uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 1;
    int pretrain_steps = argc > 2 ? std::stoi(argv[2]) : 1600;
    double pretrain_lr = argc > 3 ? std::stod(argv[3]) : 3e-3;

    WorldConfig wc;
    wc.seed = seed;
    auto t0 = Clock::now();
    SyntheticWorld world = generate_world(wc);
    auto t1 = Clock::now();
    std::printf("world: %zu images, vocab %zu  (%.2fs)\n", world.images.size(),
                world.vocab.size(), secs(t0, t1));

    EncoderConfig ec = world.encoder_config();
    ec.seed = Rng::mix(seed ^ 0x1111);
    FrozenEncoder base = FrozenEncoder::random_init(ec);
    auto pairs = make_pretrain_pairs(world, ec);
    std::printf("pretrain pairs: %zu\n", pairs.size());

    PretrainConfig pc;
    pc.steps = pretrain_steps;
    pc.learning_rate = pretrain_lr;
    pc.seed = Rng::mix(seed ^ 0x2222);
    t0 = Clock::now();
    FrozenEncoder enc = pretrain(base, pairs, pc);
    t1 = Clock::now();
    std::printf("pretrain %d steps: %.2fs\n", pc.steps, secs(t0, t1));

    RetrievalIndex index = RetrievalIndex::from_store(world.images, world.eval_image_ids);
    RetrievalIndex concept_index =
        RetrievalIndex::from_store(world.images, world.single_concept_eval_ids);

    std::printf("context caption mRR (base-pretrained): %.3f\n",
                context_caption_mrr(enc, world, index));

    // Personalize every concept at defaults.
    std::map<std::string, ConceptDelta> deltas;
    TrainConfig tc;
    tc.seed = Rng::mix(seed ^ 0x3333);
    t0 = Clock::now();
    double b_norm = 0;
    for (const auto& spec : world.concepts) {
        auto res = train_polar(enc, spec, world.images, tc);
        if (res.report.aborted) {
            std::printf("ABORTED %s: %s\n", spec.concept_id.c_str(),
                        res.report.abort_reason.c_str());
            return 1;
        }
        b_norm += res.report.final_b_sumsq;
        deltas.emplace(spec.concept_id, std::move(res.delta));
    }
    t1 = Clock::now();
    std::printf("personalize x%zu: %.2fs total (%.3fs each), mean final |B|^2 %.4f\n",
                world.concepts.size(), secs(t0, t1), secs(t0, t1) / world.concepts.size(),
                b_norm / world.concepts.size());

    const auto suite = build_eval_suite(world);
    std::printf("suite: %zu queries\n", suite.size());
    t0 = Clock::now();
    EvalOptions opts;
    const auto report = evaluate(enc, index, suite, deltas, opts, &concept_index);
    t1 = Clock::now();
    std::printf("evaluate: %.2fs\n", secs(t0, t1));
    std::printf("%s", eval_report_table(report).c_str());

    // Base encoder reference (no deltas).
    std::map<std::string, ConceptDelta> none;
    std::vector<QueryRecord> no_concept;
    for (auto q : suite) {
        q.concepts.clear();
        no_concept.push_back(q);
    }
    const auto base_report = evaluate(enc, index, no_concept, none, opts, &concept_index);
    std::printf("--- base encoder ---\n%s", eval_report_table(base_report).c_str());
    return 0;
}
