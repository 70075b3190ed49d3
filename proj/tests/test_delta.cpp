#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "helpers.hpp"
#include "polar/delta.hpp"

using namespace polar;
using polar::testing::tiny_encoder;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

ConceptDelta random_delta(const FrozenEncoder& enc, const std::string& id, uint64_t seed,
                          int rank = 1) {
    Rng rng(seed);
    const SiteAddress sites[] = {SiteAddress(enc.config().n_layers, Site::V)};
    ConceptDelta d = ConceptDelta::init(id, enc, sites, rank, rng);
    for (float& v : d.sites[0].b.data) v = static_cast<float>(rng.next_gaussian() * 0.3);
    return d;
}

}  // namespace

TEST_SUITE_BEGIN("delta");

TEST_CASE("materialize of a zero delta is the zero matrix") {
    const FrozenEncoder enc = tiny_encoder();
    Rng rng(2);
    const SiteAddress site(enc.config().n_layers, Site::V);
    const SiteAddress sites[] = {site};
    const ConceptDelta d = ConceptDelta::init("c", enc, sites, 1, rng);
    const Matrix dw = materialize(d, site);
    for (float v : dw.data) CHECK(v == 0.0f);
}

TEST_CASE("materialize of a rank-1 outer product scales rows as expected") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    ConceptDelta d;
    d.concept_id = "c";
    d.encoder_fingerprint = enc.fingerprint();
    d.rank = 1;
    const int n = enc.config().d_model;
    SiteFactors f;
    f.addr = site;
    f.a = Matrix(1, n);
    f.a.at(0, 0) = 1.0f;  // e1 row
    f.b = Matrix(n, 1);
    f.b.at(0, 0) = 2.0f;
    f.b.at(1, 0) = -3.0f;
    d.sites.push_back(f);

    const Matrix dw = materialize(d, site);
    CHECK(dw.at(0, 0) == 2.0f);
    CHECK(dw.at(1, 0) == -3.0f);
    CHECK(dw.at(0, 1) == 0.0f);
    CHECK(dw.at(2, 0) == 0.0f);
}

TEST_CASE("rank-2 materialization equals the sum of rank-1 outer products") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d = random_delta(enc, "c", 7, /*rank=*/2);

    const Matrix dw = materialize(d, site);
    // Oracle: explicit sum of per-rank outer products in rank order.
    const auto& f = d.sites[0];
    Matrix oracle(f.b.rows, f.a.cols);
    for (int i = 0; i < f.b.rows; ++i) {
        for (int j = 0; j < f.a.cols; ++j) {
            float acc = 0.0f;
            for (int r = 0; r < 2; ++r) acc += f.b.at(i, r) * f.a.at(r, j);
            oracle.at(i, j) = acc;
        }
    }
    CHECK(dw == oracle);
}

TEST_CASE("materialize rejects an absent site") {
    const FrozenEncoder enc = tiny_encoder();
    const ConceptDelta d = random_delta(enc, "c", 7);
    CHECK_THROWS_AS((void)materialize(d, SiteAddress(1, Site::Q)), std::invalid_argument);
}

TEST_CASE("merge_add of a singleton reproduces the delta exactly") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d = random_delta(enc, "c", 11);
    const ConceptDelta list[] = {d};
    const MergedDelta m = merge_add(list);
    CHECK(materialize(m, site) == materialize(d, site));
}

TEST_CASE("merge_add with a zero delta is an additive identity") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d = random_delta(enc, "c", 13);
    Rng rng(14);
    const SiteAddress sites[] = {site};
    const ConceptDelta zero = ConceptDelta::init("z", enc, sites, 1, rng);
    const ConceptDelta list[] = {d, zero};
    const MergedDelta m = merge_add(list);
    CHECK(materialize(m, site) == materialize(d, site));
}

TEST_CASE("merge_add materialization equals the dense sum exactly") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    for (uint64_t seed = 0; seed < 20; ++seed) {
        const ConceptDelta d1 = random_delta(enc, "a", 100 + seed);
        const ConceptDelta d2 = random_delta(enc, "b", 200 + seed);
        const ConceptDelta list[] = {d1, d2};
        const MergedDelta m = merge_add(list);
        const Matrix sum = add(materialize(d1, site), materialize(d2, site));
        CHECK(materialize(m, site) == sum);  // zero tolerance
    }
}

TEST_CASE("merge_add stacks ranks and is associative up to the dense result") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d1 = random_delta(enc, "a", 1, 2);
    const ConceptDelta d2 = random_delta(enc, "b", 2, 2);
    const ConceptDelta d3 = random_delta(enc, "c", 3, 2);
    const ConceptDelta all[] = {d1, d2, d3};
    const MergedDelta m = merge_add(all);
    CHECK(m.sites[0].a.rows == 6);
    CHECK(m.sites[0].b.cols == 6);

    const Matrix left =
        add(add(materialize(d1, site), materialize(d2, site)), materialize(d3, site));
    const Matrix got = materialize(m, site);
    for (size_t i = 0; i < got.data.size(); ++i) {
        CHECK(got.data[i] == doctest::Approx(left.data[i]).epsilon(1e-7));
    }
}

TEST_CASE("merge preconditions reject mismatched inputs") {
    const FrozenEncoder enc1 = tiny_encoder(3);
    const FrozenEncoder enc2 = tiny_encoder(4);
    const ConceptDelta d1 = random_delta(enc1, "a", 5);
    const ConceptDelta d2 = random_delta(enc2, "b", 6);
    const ConceptDelta cross[] = {d1, d2};
    CHECK_THROWS_AS((void)merge_add(cross), std::invalid_argument);

    Rng rng(7);
    const SiteAddress other_sites[] = {SiteAddress(1, Site::Q)};
    const ConceptDelta d3 = ConceptDelta::init("c", enc1, other_sites, 1, rng);
    const ConceptDelta mismatched[] = {d1, d3};
    CHECK_THROWS_AS((void)merge_add(mismatched), std::invalid_argument);

    CHECK_THROWS_AS((void)merge_add({}), std::invalid_argument);
}

TEST_CASE("merge_avg of identical deltas reproduces the delta") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d = random_delta(enc, "a", 21);
    const ConceptDelta list[] = {d, d};
    const MergedDelta m = merge_avg(list);
    const Matrix dw = materialize(d, site);
    const Matrix got = materialize(m, site);
    for (size_t i = 0; i < dw.data.size(); ++i) {
        CHECK(got.data[i] == doctest::Approx(dw.data[i]).epsilon(1e-7));
    }
}

TEST_CASE("merge_avg of two deltas matches the dense mean oracle") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d1 = random_delta(enc, "a", 22);
    const ConceptDelta d2 = random_delta(enc, "b", 23);
    const ConceptDelta list[] = {d1, d2};
    const MergedDelta m = merge_avg(list);
    Matrix oracle = add(materialize(d1, site), materialize(d2, site));
    scale_inplace(oracle, 0.5f);
    CHECK(materialize(m, site) == oracle);
}

TEST_CASE("merge_max dominates a zero delta for nonnegative updates") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    ConceptDelta d = random_delta(enc, "a", 24);
    for (float& v : d.sites[0].b.data) v = std::abs(v);
    for (float& v : d.sites[0].a.data) v = std::abs(v);

    Rng rng(25);
    const SiteAddress sites[] = {site};
    const ConceptDelta zero = ConceptDelta::init("z", enc, sites, 1, rng);
    const ConceptDelta list[] = {d, zero};
    const MergedDelta m = merge_max(list);
    CHECK(materialize(m, site) == materialize(d, site));
}

TEST_CASE("merge_max takes the signed elementwise maximum") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d1 = random_delta(enc, "a", 26);
    const ConceptDelta d2 = random_delta(enc, "b", 27);
    const ConceptDelta list[] = {d1, d2};
    const MergedDelta m = merge_max(list);
    const Matrix w1 = materialize(d1, site);
    const Matrix w2 = materialize(d2, site);
    const Matrix got = materialize(m, site);
    for (size_t i = 0; i < got.data.size(); ++i) {
        CHECK(got.data[i] == std::max(w1.data[i], w2.data[i]));
    }
}

TEST_CASE("orthogonal basis rows are unit and mutually orthogonal") {
    const Matrix one = orthogonal_basis(5, 1, 8);
    CHECK(std::abs(l2_norm(one.row(0)) - 1.0) < 1e-6);

    const Matrix two = orthogonal_basis(6, 2, 4);
    CHECK(std::abs(dot(two.row(0), two.row(1))) < 1e-6);

    const Matrix basis = orthogonal_basis(7, 8, 64);
    // Gram matrix vs identity, Frobenius.
    double fro = 0.0;
    for (int i = 0; i < 8; ++i) {
        for (int j = 0; j < 8; ++j) {
            const double g = dot(basis.row(i), basis.row(j));
            const double want = (i == j) ? 1.0 : 0.0;
            fro += (g - want) * (g - want);
        }
    }
    CHECK(std::sqrt(fro) < 1e-5);

    CHECK_THROWS_AS((void)orthogonal_basis(8, 9, 8), std::invalid_argument);
}

TEST_CASE("delta save and load round trips bitwise") {
    const FrozenEncoder enc = tiny_encoder();
    ConceptDelta d = random_delta(enc, "cat7", 31, 2);
    d.hyper = {0.35, 500, 1e-3, 42, false, true};
    const std::string path = temp_path("delta_roundtrip.json");
    save_delta(path, d);
    const ConceptDelta r = load_delta(path, &enc);
    CHECK(r.concept_id == d.concept_id);
    CHECK(r.encoder_fingerprint == d.encoder_fingerprint);
    CHECK(r.rank == d.rank);
    REQUIRE(r.sites.size() == d.sites.size());
    CHECK(r.sites[0].a == d.sites[0].a);
    CHECK(r.sites[0].b == d.sites[0].b);
    CHECK(r.hyper.lambda == d.hyper.lambda);
    CHECK(r.hyper.iterations == d.hyper.iterations);
    CHECK(r.hyper.seed == d.hyper.seed);
    CHECK(r.hyper.use_negatives == d.hyper.use_negatives);
    std::filesystem::remove(path);
}

TEST_CASE("delta load rejects the wrong encoder and corrupt files") {
    const FrozenEncoder enc = tiny_encoder(3);
    const FrozenEncoder other = tiny_encoder(4);
    ConceptDelta d = random_delta(enc, "c", 33);
    d.hyper.constrain_a = false;
    const std::string path = temp_path("delta_guard.json");
    save_delta(path, d);
    CHECK_THROWS_AS((void)load_delta(path, &other), std::runtime_error);

    // Truncated file: parse error, no partial delta.
    {
        std::ofstream f(path, std::ios::trunc);
        f << "{\"format_version\": 1, \"kind\": \"concept_delta\", \"concept_id\": \"c\"";
    }
    CHECK_THROWS_AS((void)load_delta(path), std::runtime_error);
    std::filesystem::remove(path);
}

TEST_CASE("merged delta files round trip for stacked and dense kinds") {
    const FrozenEncoder enc = tiny_encoder();
    const SiteAddress site(enc.config().n_layers, Site::V);
    const ConceptDelta d1 = random_delta(enc, "a", 41);
    const ConceptDelta d2 = random_delta(enc, "b", 42);
    const ConceptDelta list[] = {d1, d2};

    const std::string path = temp_path("merged_roundtrip.json");
    for (const MergedDelta& m : {merge_add(list), merge_avg(list), merge_max(list)}) {
        save_merged_delta(path, m);
        const MergedDelta r = load_merged_delta(path, &enc);
        CHECK(r.kind == m.kind);
        CHECK(r.concept_ids == m.concept_ids);
        CHECK(materialize(r, site) == materialize(m, site));
    }
    std::filesystem::remove(path);
}

TEST_SUITE_END();
