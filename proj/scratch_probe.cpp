// Scratch diagnostics for personalization path gain (not part of the build).
#include <cstdio>
#include <set>

#include "polar/delta.hpp"
#include "polar/encoder.hpp"
#include "polar/metrics.hpp"
#include "polar/personalize.hpp"
#include "polar/retrieval.hpp"
#include "polar/synth.hpp"

using namespace polar;

int main(int argc, char** argv) {
    uint64_t seed = argc > 1 ? std::stoull(argv[1]) : 1;
    int steps = argc > 2 ? std::stoi(argv[2]) : 600;
    double lr = argc > 3 ? std::stod(argv[3]) : 5e-3;
    double lam = argc > 4 ? std::stod(argv[4]) : 0.35;
    double wd = argc > 5 ? std::stod(argv[5]) : 0.0;

    WorldConfig wc;
    wc.seed = seed;
    SyntheticWorld world = generate_world(wc);
    EncoderConfig ec = world.encoder_config();
    ec.seed = Rng::mix(seed ^ 0x1111);
    FrozenEncoder base = FrozenEncoder::random_init(ec);
    auto pairs = make_pretrain_pairs(world, ec);
    PretrainConfig pc;
    pc.steps = steps;
    pc.learning_rate = lr;
    pc.seed = Rng::mix(seed ^ 0x2222);
    pc.weight_decay = wd;

    FrozenEncoder enc = pretrain(base, pairs, pc);
    {
        RetrievalIndex index = RetrievalIndex::from_store(world.images, world.eval_image_ids);
        double total = 0; int n = 0;
        for (const auto& ctx : world.context_names) {
            std::set<std::string> gt;
            for (const auto& rec : world.images.records())
                if (rec.context == ctx && rec.concepts.empty() && rec.id.find("_e") != std::string::npos) gt.insert(rec.id);
            if (gt.empty()) continue;
            auto r = query(enc, index, "a photo of the " + ctx, {}, (int)index.size());
            std::vector<std::string> ids; for (auto& [id, s] : r.hits) ids.push_back(id);
            total += reciprocal_rank(ids, gt); ++n;
        }
        std::printf("context caption mRR: %.3f\n", total / n);
    }

    const auto tokens = tokenize(ec, "an image of sks");
    // Residual norm entering the last layer and EOS attention row there.
    const Matrix x_last = compute_prefix_activation(enc, tokens, ec.n_layers);
    double rmean = 0;
    for (int i = 0; i < x_last.rows; ++i) rmean += l2_norm(x_last.row(i));
    std::printf("|x| entering layer %d: mean %.2f (eos row %.2f)\n", ec.n_layers,
                rmean / x_last.rows, l2_norm(x_last.row(x_last.rows - 1)));
    const auto probes = attention_probe(enc, tokens);
    const Matrix& last_head0 = probes[(ec.n_layers - 1) * ec.n_heads];
    std::printf("layer-%d head-0 EOS attention row:", ec.n_layers);
    for (int j = 0; j < last_head0.cols; ++j) std::printf(" %.3f", last_head0.at(4, j));
    std::printf("  (tokens: an image of sks <eos>)\n");

    // Train one concept, watch the trace.
    TrainConfig tc;
    tc.lambda = lam;
    tc.seed = Rng::mix(seed ^ 0x3333);
    const auto& spec = world.concepts[0];
    auto res = train_polar(enc, spec, world.images, tc);
    const auto& rep = res.report;
    std::printf("concept %s: mse %.4f -> %.4f, |B|^2 %.4f, wall %.3fs%s\n",
                spec.concept_id.c_str(), rep.loss_mse.front(), rep.loss_mse.back(),
                rep.final_b_sumsq, rep.wall_seconds, rep.aborted ? " ABORTED" : "");

    // Output rotation on the concept-only query.
    const auto base_out = l2_normalize(encode_text(enc, tokens));
    const EncoderUpdate ups[] = {res.delta.to_update()};
    const auto pers_out = l2_normalize(encode_text(enc, tokens, ups));
    std::printf("cos(base, personalized) = %.4f\n", cosine_sim(base_out, pers_out));
    // Alignment with the concept latent.
    std::printf("cos(base, u_c) = %.4f   cos(personalized, u_c) = %.4f\n",
                cosine_sim(base_out, world.concept_latents.row(0)),
                cosine_sim(pers_out, world.concept_latents.row(0)));
    // Mean cos to the train targets.
    double cb = 0, cp = 0;
    for (const auto& id : spec.train_image_ids) {
        const auto& e = world.images.get(id).embedding;
        cb += cosine_sim(base_out, e);
        cp += cosine_sim(pers_out, e);
    }
    std::printf("mean cos to train targets: base %.4f personalized %.4f\n", cb / 5, cp / 5);
    return 0;
}
// note: context mRR check lives in scratch_calibrate
