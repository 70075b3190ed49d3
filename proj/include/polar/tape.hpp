#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "polar/linalg.hpp"

namespace polar {

using NodeId = int32_t;

// Gradient buffer: row-major f64, same shape as the node value.
using GradBuf = std::vector<double>;

// Record-and-replay reverse-mode tape. Values are f32, gradients accumulate
// in f64. Nodes are created in topological order, so the backward pass is a
// single reverse sweep that visits each node once and adds into parents'
// buffers. Only nodes reachable from a trainable leaf carry gradients.
//
// A tape is confined to one thread. Construct with grad_enabled=false for
// pure inference; values are computed by the same kernels either way, so
// recorded and non-recorded forwards are bitwise identical.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    NodeId leaf(Matrix value, bool trainable = false);

    NodeId matmul(NodeId a, NodeId b, bool transpose_a = false, bool transpose_b = false);
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId scale(NodeId a, float s);
    NodeId row_softmax(NodeId a);
    NodeId gelu(NodeId a);
    // Row-wise layer norm with learnable gain/bias (both 1 x cols).
    NodeId layer_norm(NodeId x, NodeId gamma, NodeId beta, float eps = 1e-5f);
    NodeId col_slice(NodeId a, int start, int len);
    NodeId col_concat(std::span<const NodeId> parts);
    NodeId row_concat(std::span<const NodeId> parts);
    NodeId select_row(NodeId a, int row);
    // Gathers table rows by index; duplicate ids accumulate gradient.
    NodeId gather_rows(NodeId table, std::vector<int> ids);
    NodeId l2_normalize_rows(NodeId a);
    NodeId sum_squares(NodeId a);  // -> 1x1

    const Matrix& value(NodeId id) const { return nodes_[id].value; }
    int num_nodes() const { return static_cast<int>(nodes_.size()); }
    bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }

    // Drops every node past the first `keep_nodes`, so a constant prefix
    // (weight leaves, cached activations) can be rebuilt on cheaply inside a
    // training loop.
    void truncate(int keep_nodes);

    // Reverse sweep from a scalar (1x1) loss node. Gradients accumulate
    // additively at shared parents. Throws if the loss is not scalar or the
    // tape was built with grad_enabled=false.
    void backward(NodeId loss);

    // Gradient of the last backward() w.r.t. a node (empty if untouched).
    const GradBuf& grad(NodeId id) const { return nodes_[id].grad; }
    Matrix grad_matrix(NodeId id) const;

private:
    enum class Op : uint8_t {
        Leaf,
        MatMul,
        Add,
        Sub,
        Scale,
        RowSoftmax,
        Gelu,
        LayerNorm,
        ColSlice,
        ColConcat,
        RowConcat,
        SelectRow,
        GatherRows,
        L2NormalizeRows,
        SumSquares,
    };

    struct Node {
        Op op;
        bool requires_grad = false;
        bool flag_a = false;  // MatMul: transpose_a
        bool flag_b = false;  // MatMul: transpose_b
        float scalar = 0.0f;  // Scale factor / LayerNorm eps
        int arg0 = 0;         // ColSlice start / SelectRow row
        int arg1 = 0;         // ColSlice len
        std::vector<NodeId> parents;
        std::vector<int> ids;  // GatherRows indices
        Matrix value;
        GradBuf grad;
    };

    NodeId push(Node n);
    GradBuf& ensure_grad(NodeId id);
    void backward_node(NodeId id);

    std::vector<Node> nodes_;
    bool grad_enabled_;
};

}  // namespace polar
