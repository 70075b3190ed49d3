#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <functional>

#include "polar/linalg.hpp"
#include "polar/tape.hpp"

using namespace polar;

namespace {

Matrix random_matrix(Rng& rng, int rows, int cols, double scale = 1.0) {
    Matrix m(rows, cols);
    for (float& v : m.data) v = static_cast<float>(rng.next_gaussian() * scale);
    return m;
}

// Builds a scalar loss from leaves created for `inputs` (in order); leaf i is
// trainable iff i < n_trainable (default: all).
using LossBuilder = std::function<NodeId(Tape&, const std::vector<NodeId>&)>;

double eval_loss(const std::vector<Matrix>& inputs, const LossBuilder& build) {
    Tape tape(/*grad_enabled=*/false);
    std::vector<NodeId> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m));
    return tape.value(build(tape, leaves)).data[0];
}

// Central-difference oracle vs. the tape's reverse sweep; f32 forward, step
// 1e-3, relative error below 1e-3 (denominator floored for near-zero grads).
void check_gradients(std::vector<Matrix> inputs, const LossBuilder& build, double h = 1e-3,
                     double tol = 1e-3) {
    Tape tape;
    std::vector<NodeId> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m, true));
    const NodeId loss = build(tape, leaves);
    const double loss_scale = std::abs(tape.value(loss).data[0]);
    tape.backward(loss);
    std::vector<GradBuf> analytic;
    for (NodeId id : leaves) {
        GradBuf g = tape.grad(id);
        if (g.empty()) g.assign(tape.value(id).size(), 0.0);
        analytic.push_back(std::move(g));
    }

    for (size_t mi = 0; mi < inputs.size(); ++mi) {
        for (size_t e = 0; e < inputs[mi].data.size(); ++e) {
            const float orig = inputs[mi].data[e];
            inputs[mi].data[e] = static_cast<float>(orig + h);
            const double up = eval_loss(inputs, build);
            inputs[mi].data[e] = static_cast<float>(orig - h);
            const double down = eval_loss(inputs, build);
            inputs[mi].data[e] = orig;
            const double fd = (up - down) / (2.0 * h);
            const double a = analytic[mi][e];
            // The oracle's own noise floor: f32 rounding of the loss divided
            // by the step. Differences below it are indistinguishable from an
            // exact match.
            const double noise = std::max(1.0, loss_scale) * 1e-7 / h * 5.0;
            const double diff = std::abs(a - fd);
            const double rel = diff / std::max(std::abs(a) + std::abs(fd), 1e-12);
            INFO("input ", mi, " entry ", e, " analytic ", a, " fd ", fd);
            CHECK((diff < noise || rel < tol));
        }
    }
}

}  // namespace

TEST_SUITE_BEGIN("tape");

TEST_CASE("square loss gradient at x=3 is 6") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix(1, 1, {3.0f}), true);
    const NodeId loss = tape.sum_squares(x);
    CHECK(tape.value(loss).data[0] == 9.0f);
    tape.backward(loss);
    CHECK(tape.grad(x)[0] == doctest::Approx(6.0));
}

TEST_CASE("constant loss has zero gradients everywhere") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix(1, 1, {3.0f}), true);
    const NodeId c = tape.leaf(Matrix(1, 1, {5.0f}));
    const NodeId loss = tape.sum_squares(c);
    tape.backward(loss);
    CHECK(tape.grad(x).empty());
    const Matrix g = tape.grad_matrix(x);
    CHECK(g.data[0] == 0.0f);
}

TEST_CASE("backward rejects non-scalar losses") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix(2, 2), true);
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
}

TEST_CASE("backward on an inference tape is an error") {
    Tape tape(/*grad_enabled=*/false);
    const NodeId x = tape.leaf(Matrix(1, 1, {2.0f}), true);
    const NodeId loss = tape.sum_squares(x);
    CHECK_THROWS_AS(tape.backward(loss), std::runtime_error);
}

TEST_CASE("gradients accumulate additively at shared parents") {
    Tape tape;
    const NodeId x = tape.leaf(Matrix(1, 1, {1.5f}), true);
    const NodeId y = tape.add(x, x);  // y = 2x, loss = y^2 = 4x^2, dloss/dx = 8x
    const NodeId loss = tape.sum_squares(y);
    tape.backward(loss);
    CHECK(tape.grad(x)[0] == doctest::Approx(12.0));
}

TEST_CASE("matmul gradients pass finite differences for every flag combo") {
    Rng rng(21);
    for (const bool ta : {false, true}) {
        for (const bool tb : {false, true}) {
            const Matrix a = ta ? random_matrix(rng, 4, 3) : random_matrix(rng, 3, 4);
            const Matrix b = tb ? random_matrix(rng, 5, 4) : random_matrix(rng, 4, 5);
            check_gradients({a, b}, [=](Tape& t, const std::vector<NodeId>& in) {
                return t.sum_squares(t.matmul(in[0], in[1], ta, tb));
            });
        }
    }
}

TEST_CASE("add, sub, scale gradients pass finite differences") {
    Rng rng(22);
    const Matrix a = random_matrix(rng, 3, 4);
    const Matrix b = random_matrix(rng, 3, 4);
    check_gradients({a, b}, [](Tape& t, const std::vector<NodeId>& in) {
        return t.sum_squares(t.add(in[0], t.scale(t.sub(in[0], in[1]), 0.7f)));
    });
}

TEST_CASE("row_softmax gradients pass finite differences") {
    Rng rng(23);
    check_gradients({random_matrix(rng, 3, 5)}, [](Tape& t, const std::vector<NodeId>& in) {
        const NodeId probe = t.leaf(Matrix(3, 5, std::vector<float>(15, 0.3f)));
        return t.sum_squares(t.sub(t.row_softmax(in[0]), probe));
    });
}

TEST_CASE("gelu gradients pass finite differences") {
    Rng rng(24);
    check_gradients({random_matrix(rng, 3, 4)}, [](Tape& t, const std::vector<NodeId>& in) {
        return t.sum_squares(t.gelu(in[0]));
    });
}

TEST_CASE("layer_norm gradients pass finite differences") {
    Rng rng(25);
    const Matrix x = random_matrix(rng, 3, 6);
    Matrix gamma(1, 6);
    Matrix beta(1, 6);
    for (int j = 0; j < 6; ++j) {
        gamma.at(0, j) = 1.0f + 0.1f * j;
        beta.at(0, j) = 0.05f * j;
    }
    check_gradients({x, gamma, beta}, [](Tape& t, const std::vector<NodeId>& in) {
        const NodeId probe = t.leaf(Matrix(3, 6, std::vector<float>(18, 0.2f)));
        return t.sum_squares(t.sub(t.layer_norm(in[0], in[1], in[2]), probe));
    });
}

TEST_CASE("slice, concat, select gradients pass finite differences") {
    Rng rng(26);
    const Matrix a = random_matrix(rng, 3, 6);
    const Matrix b = random_matrix(rng, 3, 2);
    const Matrix c = random_matrix(rng, 2, 8);
    check_gradients({a, b, c}, [](Tape& t, const std::vector<NodeId>& in) {
        const NodeId sl = t.col_slice(in[0], 1, 4);       // 3x4
        const NodeId left = t.col_slice(sl, 0, 2);        // 3x2
        const std::vector<NodeId> cols = {left, in[1], t.col_slice(in[0], 0, 4)};
        const NodeId cat = t.col_concat(cols);            // 3x8
        const std::vector<NodeId> rows = {cat, in[2]};
        const NodeId stacked = t.row_concat(rows);        // 5x8
        return t.sum_squares(t.select_row(stacked, 3));
    });
}

TEST_CASE("gather_rows accumulates duplicate ids") {
    Rng rng(27);
    const Matrix table = random_matrix(rng, 4, 3);
    check_gradients({table}, [](Tape& t, const std::vector<NodeId>& in) {
        return t.sum_squares(t.gather_rows(in[0], {2, 0, 2, 2}));
    });
}

TEST_CASE("l2_normalize_rows gradients pass finite differences") {
    Rng rng(28);
    Matrix x = random_matrix(rng, 2, 5);
    for (float& v : x.data) v += (v >= 0 ? 0.5f : -0.5f);  // keep rows away from zero
    check_gradients({x}, [](Tape& t, const std::vector<NodeId>& in) {
        const NodeId probe = t.leaf(Matrix(2, 5, std::vector<float>(10, 0.1f)));
        return t.sum_squares(t.sub(t.l2_normalize_rows(in[0]), probe));
    });
}

TEST_CASE("a composed attention-like block passes finite differences") {
    Rng rng(29);
    const Matrix x = random_matrix(rng, 4, 6, 0.5);
    const Matrix wq = random_matrix(rng, 6, 6, 0.4);
    const Matrix wv = random_matrix(rng, 6, 6, 0.4);
    check_gradients({x, wq, wv}, [](Tape& t, const std::vector<NodeId>& in) {
        const NodeId q = t.matmul(in[0], in[1], false, true);
        const NodeId scores = t.scale(t.matmul(q, q, false, true), 0.408f);
        const NodeId probs = t.row_softmax(scores);
        const NodeId v = t.matmul(in[0], in[2], false, true);
        const NodeId ctx = t.matmul(probs, v);
        return t.sum_squares(t.l2_normalize_rows(t.select_row(ctx, 3)));
    });
}

TEST_CASE("ops reject non-finite values") {
    Tape tape;
    Matrix bad(1, 2, {1.0f, std::numeric_limits<float>::infinity()});
    CHECK_THROWS_AS((void)tape.leaf(bad), std::runtime_error);
}

TEST_SUITE_END();
