#include "polar/tape.hpp"

#include <cmath>
#include <stdexcept>

namespace polar {

namespace {

constexpr double kGeluScale = 0.7978845608028654;  // sqrt(2/pi)

float gelu_scalar(float x) {
    const double xd = x;
    const double inner = kGeluScale * (xd + 0.044715 * xd * xd * xd);
    return static_cast<float>(0.5 * xd * (1.0 + std::tanh(inner)));
}

double gelu_derivative(float x) {
    const double xd = x;
    const double inner = kGeluScale * (xd + 0.044715 * xd * xd * xd);
    const double t = std::tanh(inner);
    const double sech2 = 1.0 - t * t;
    return 0.5 * (1.0 + t) + 0.5 * xd * sech2 * kGeluScale * (1.0 + 3.0 * 0.044715 * xd * xd);
}

}  // namespace

NodeId Tape::push(Node n) {
    if (!all_finite(n.value)) {
        throw std::runtime_error("tape: non-finite value produced by op");
    }
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Matrix value, bool trainable) {
    Node n;
    n.op = Op::Leaf;
    n.requires_grad = grad_enabled_ && trainable;
    n.value = std::move(value);
    return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b, bool transpose_a, bool transpose_b) {
    Node n;
    n.op = Op::MatMul;
    n.flag_a = transpose_a;
    n.flag_b = transpose_b;
    n.parents = {a, b};
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.value = polar::matmul(nodes_[a].value, nodes_[b].value, transpose_a, transpose_b);
    return push(std::move(n));
}

NodeId Tape::add(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Add;
    n.parents = {a, b};
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.value = polar::add(nodes_[a].value, nodes_[b].value);
    return push(std::move(n));
}

NodeId Tape::sub(NodeId a, NodeId b) {
    Node n;
    n.op = Op::Sub;
    n.parents = {a, b};
    n.requires_grad = nodes_[a].requires_grad || nodes_[b].requires_grad;
    n.value = polar::sub(nodes_[a].value, nodes_[b].value);
    return push(std::move(n));
}

NodeId Tape::scale(NodeId a, float s) {
    Node n;
    n.op = Op::Scale;
    n.scalar = s;
    n.parents = {a};
    n.requires_grad = nodes_[a].requires_grad;
    n.value = nodes_[a].value;
    scale_inplace(n.value, s);
    return push(std::move(n));
}

NodeId Tape::row_softmax(NodeId a) {
    const Matrix& x = nodes_[a].value;
    Node n;
    n.op = Op::RowSoftmax;
    n.parents = {a};
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Matrix(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const auto row = softmax_row(x.row(i));
        std::copy(row.begin(), row.end(), n.value.row_ptr(i));
    }
    return push(std::move(n));
}

NodeId Tape::gelu(NodeId a) {
    Node n;
    n.op = Op::Gelu;
    n.parents = {a};
    n.requires_grad = nodes_[a].requires_grad;
    n.value = nodes_[a].value;
    for (float& v : n.value.data) v = gelu_scalar(v);
    return push(std::move(n));
}

NodeId Tape::layer_norm(NodeId x, NodeId gamma, NodeId beta, float eps) {
    const Matrix& xv = nodes_[x].value;
    const Matrix& gv = nodes_[gamma].value;
    const Matrix& bv = nodes_[beta].value;
    if (gv.rows != 1 || bv.rows != 1 || gv.cols != xv.cols || bv.cols != xv.cols) {
        throw std::invalid_argument("layer_norm: gamma/beta must be 1 x cols");
    }
    Node n;
    n.op = Op::LayerNorm;
    n.scalar = eps;
    n.parents = {x, gamma, beta};
    n.requires_grad =
        nodes_[x].requires_grad || nodes_[gamma].requires_grad || nodes_[beta].requires_grad;
    n.value = Matrix(xv.rows, xv.cols);
    const int c = xv.cols;
    for (int i = 0; i < xv.rows; ++i) {
        const float* xr = xv.row_ptr(i);
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += xr[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = xr[j] - mean;
            var += d * d;
        }
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        float* yr = n.value.row_ptr(i);
        for (int j = 0; j < c; ++j) {
            const double xhat = (xr[j] - mean) * inv;
            yr[j] = static_cast<float>(xhat * gv.data[j] + bv.data[j]);
        }
    }
    return push(std::move(n));
}

NodeId Tape::col_slice(NodeId a, int start, int len) {
    const Matrix& x = nodes_[a].value;
    if (start < 0 || len <= 0 || start + len > x.cols) {
        throw std::invalid_argument("col_slice: range out of bounds");
    }
    Node n;
    n.op = Op::ColSlice;
    n.arg0 = start;
    n.arg1 = len;
    n.parents = {a};
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Matrix(x.rows, len);
    for (int i = 0; i < x.rows; ++i) {
        const float* src = x.row_ptr(i) + start;
        std::copy(src, src + len, n.value.row_ptr(i));
    }
    return push(std::move(n));
}

NodeId Tape::col_concat(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("col_concat: no parts");
    int cols = 0;
    const int rows = nodes_[parts[0]].value.rows;
    for (NodeId p : parts) {
        if (nodes_[p].value.rows != rows) throw std::invalid_argument("col_concat: row mismatch");
        cols += nodes_[p].value.cols;
    }
    Node n;
    n.op = Op::ColConcat;
    n.parents.assign(parts.begin(), parts.end());
    for (NodeId p : parts) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    n.value = Matrix(rows, cols);
    int off = 0;
    for (NodeId p : parts) {
        const Matrix& v = nodes_[p].value;
        for (int i = 0; i < rows; ++i) {
            std::copy(v.row_ptr(i), v.row_ptr(i) + v.cols, n.value.row_ptr(i) + off);
        }
        off += v.cols;
    }
    return push(std::move(n));
}

NodeId Tape::row_concat(std::span<const NodeId> parts) {
    if (parts.empty()) throw std::invalid_argument("row_concat: no parts");
    const int cols = nodes_[parts[0]].value.cols;
    int rows = 0;
    for (NodeId p : parts) {
        if (nodes_[p].value.cols != cols) throw std::invalid_argument("row_concat: col mismatch");
        rows += nodes_[p].value.rows;
    }
    Node n;
    n.op = Op::RowConcat;
    n.parents.assign(parts.begin(), parts.end());
    for (NodeId p : parts) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    n.value = Matrix(rows, cols);
    int off = 0;
    for (NodeId p : parts) {
        const Matrix& v = nodes_[p].value;
        std::copy(v.data.begin(), v.data.end(), n.value.data.begin() + static_cast<size_t>(off) * cols);
        off += v.rows;
    }
    return push(std::move(n));
}

NodeId Tape::select_row(NodeId a, int row) {
    const Matrix& x = nodes_[a].value;
    if (row < 0 || row >= x.rows) throw std::invalid_argument("select_row: out of range");
    Node n;
    n.op = Op::SelectRow;
    n.arg0 = row;
    n.parents = {a};
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Matrix(1, x.cols);
    std::copy(x.row_ptr(row), x.row_ptr(row) + x.cols, n.value.data.begin());
    return push(std::move(n));
}

NodeId Tape::gather_rows(NodeId table, std::vector<int> ids) {
    const Matrix& t = nodes_[table].value;
    Node n;
    n.op = Op::GatherRows;
    n.parents = {table};
    n.requires_grad = nodes_[table].requires_grad;
    n.value = Matrix(static_cast<int>(ids.size()), t.cols);
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= t.rows) throw std::invalid_argument("gather_rows: id out of range");
        std::copy(t.row_ptr(ids[i]), t.row_ptr(ids[i]) + t.cols, n.value.row_ptr(static_cast<int>(i)));
    }
    n.ids = std::move(ids);
    return push(std::move(n));
}

NodeId Tape::l2_normalize_rows(NodeId a) {
    const Matrix& x = nodes_[a].value;
    Node n;
    n.op = Op::L2NormalizeRows;
    n.parents = {a};
    n.requires_grad = nodes_[a].requires_grad;
    n.value = Matrix(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const auto row = l2_normalize(x.row(i));
        std::copy(row.begin(), row.end(), n.value.row_ptr(i));
    }
    return push(std::move(n));
}

NodeId Tape::sum_squares(NodeId a) {
    const Matrix& x = nodes_[a].value;
    Node n;
    n.op = Op::SumSquares;
    n.parents = {a};
    n.requires_grad = nodes_[a].requires_grad;
    double acc = 0.0;
    for (float v : x.data) acc += static_cast<double>(v) * v;
    n.value = Matrix(1, 1);
    n.value.data[0] = static_cast<float>(acc);
    return push(std::move(n));
}

void Tape::truncate(int keep_nodes) {
    if (keep_nodes < 0 || keep_nodes > static_cast<int>(nodes_.size())) {
        throw std::invalid_argument("tape: bad truncation point");
    }
    nodes_.resize(static_cast<size_t>(keep_nodes));
}

Matrix Tape::grad_matrix(NodeId id) const {
    const Node& n = nodes_[id];
    Matrix g(n.value.rows, n.value.cols);
    if (!n.grad.empty()) {
        for (size_t i = 0; i < n.grad.size(); ++i) g.data[i] = static_cast<float>(n.grad[i]);
    }
    return g;
}

GradBuf& Tape::ensure_grad(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
    return n.grad;
}

void Tape::backward(NodeId loss) {
    if (!grad_enabled_) throw std::runtime_error("backward: tape built with gradients disabled");
    const Node& ln = nodes_[loss];
    if (ln.value.rows != 1 || ln.value.cols != 1) {
        throw std::invalid_argument("backward: loss node must be scalar (1x1)");
    }
    for (Node& n : nodes_) n.grad.clear();
    if (!ln.requires_grad) return;  // constant loss: all gradients are zero
    ensure_grad(loss)[0] = 1.0;
    for (NodeId id = loss; id >= 0; --id) {
        Node& n = nodes_[id];
        if (n.grad.empty() || !n.requires_grad || n.op == Op::Leaf) continue;
        backward_node(id);
    }
}

void Tape::backward_node(NodeId id) {
    Node& n = nodes_[id];
    const GradBuf& g = n.grad;

    auto needs = [&](int pi) { return nodes_[n.parents[pi]].requires_grad; };

    switch (n.op) {
        case Op::Leaf:
            break;
        case Op::MatMul: {
            const Matrix& av = nodes_[n.parents[0]].value;
            const Matrix& bv = nodes_[n.parents[1]].value;
            const bool ta = n.flag_a, tb = n.flag_b;
            const int m = n.value.rows, on = n.value.cols;
            const int k = ta ? av.rows : av.cols;
            if (needs(0)) {
                // dAbar[i][p] = sum_j g[i][j] * Bbar[p][j]
                GradBuf& da = ensure_grad(n.parents[0]);
                for (int i = 0; i < m; ++i) {
                    const double* gr = g.data() + static_cast<size_t>(i) * on;
                    for (int p = 0; p < k; ++p) {
                        double acc = 0.0;
                        if (!tb) {
                            const float* br = bv.row_ptr(p);
                            for (int j = 0; j < on; ++j) acc += gr[j] * br[j];
                        } else {
                            for (int j = 0; j < on; ++j) acc += gr[j] * bv.at(j, p);
                        }
                        if (!ta) {
                            da[static_cast<size_t>(i) * k + p] += acc;
                        } else {
                            da[static_cast<size_t>(p) * m + i] += acc;
                        }
                    }
                }
            }
            if (needs(1)) {
                // dBbar[p][j] = sum_i Abar[i][p] * g[i][j]
                GradBuf& db = ensure_grad(n.parents[1]);
                for (int p = 0; p < k; ++p) {
                    for (int i = 0; i < m; ++i) {
                        const double a = ta ? av.at(p, i) : av.at(i, p);
                        if (a == 0.0) continue;
                        const double* gr = g.data() + static_cast<size_t>(i) * on;
                        if (!tb) {
                            double* dr = db.data() + static_cast<size_t>(p) * on;
                            for (int j = 0; j < on; ++j) dr[j] += a * gr[j];
                        } else {
                            for (int j = 0; j < on; ++j) db[static_cast<size_t>(j) * k + p] += a * gr[j];
                        }
                    }
                }
            }
            break;
        }
        case Op::Add: {
            for (int pi = 0; pi < 2; ++pi) {
                if (!needs(pi)) continue;
                GradBuf& d = ensure_grad(n.parents[pi]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            break;
        }
        case Op::Sub: {
            if (needs(0)) {
                GradBuf& d = ensure_grad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += g[i];
            }
            if (needs(1)) {
                GradBuf& d = ensure_grad(n.parents[1]);
                for (size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
            }
            break;
        }
        case Op::Scale: {
            if (needs(0)) {
                GradBuf& d = ensure_grad(n.parents[0]);
                for (size_t i = 0; i < g.size(); ++i) d[i] += n.scalar * g[i];
            }
            break;
        }
        case Op::RowSoftmax: {
            if (!needs(0)) break;
            GradBuf& d = ensure_grad(n.parents[0]);
            const Matrix& y = n.value;
            for (int i = 0; i < y.rows; ++i) {
                const float* yr = y.row_ptr(i);
                const double* gr = g.data() + static_cast<size_t>(i) * y.cols;
                double dotgy = 0.0;
                for (int j = 0; j < y.cols; ++j) dotgy += gr[j] * yr[j];
                double* dr = d.data() + static_cast<size_t>(i) * y.cols;
                for (int j = 0; j < y.cols; ++j) dr[j] += yr[j] * (gr[j] - dotgy);
            }
            break;
        }
        case Op::Gelu: {
            if (!needs(0)) break;
            GradBuf& d = ensure_grad(n.parents[0]);
            const Matrix& x = nodes_[n.parents[0]].value;
            for (size_t i = 0; i < g.size(); ++i) d[i] += g[i] * gelu_derivative(x.data[i]);
            break;
        }
        case Op::LayerNorm: {
            const Matrix& x = nodes_[n.parents[0]].value;
            const Matrix& gv = nodes_[n.parents[1]].value;
            const int c = x.cols;
            const double eps = n.scalar;
            GradBuf* dx = needs(0) ? &ensure_grad(n.parents[0]) : nullptr;
            GradBuf* dgamma = needs(1) ? &ensure_grad(n.parents[1]) : nullptr;
            GradBuf* dbeta = needs(2) ? &ensure_grad(n.parents[2]) : nullptr;
            std::vector<double> xhat(c), dxhat(c);
            for (int i = 0; i < x.rows; ++i) {
                const float* xr = x.row_ptr(i);
                const double* gr = g.data() + static_cast<size_t>(i) * c;
                double mean = 0.0;
                for (int j = 0; j < c; ++j) mean += xr[j];
                mean /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double dv = xr[j] - mean;
                    var += dv * dv;
                }
                var /= c;
                const double inv = 1.0 / std::sqrt(var + eps);
                double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
                for (int j = 0; j < c; ++j) {
                    xhat[j] = (xr[j] - mean) * inv;
                    dxhat[j] = gr[j] * gv.data[j];
                    mean_dxhat += dxhat[j];
                    mean_dxhat_xhat += dxhat[j] * xhat[j];
                }
                mean_dxhat /= c;
                mean_dxhat_xhat /= c;
                if (dbeta) {
                    for (int j = 0; j < c; ++j) (*dbeta)[j] += gr[j];
                }
                if (dgamma) {
                    for (int j = 0; j < c; ++j) (*dgamma)[j] += gr[j] * xhat[j];
                }
                if (dx) {
                    double* dr = dx->data() + static_cast<size_t>(i) * c;
                    for (int j = 0; j < c; ++j) {
                        dr[j] += inv * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                    }
                }
            }
            break;
        }
        case Op::ColSlice: {
            if (!needs(0)) break;
            GradBuf& d = ensure_grad(n.parents[0]);
            const int pcols = nodes_[n.parents[0]].value.cols;
            for (int i = 0; i < n.value.rows; ++i) {
                const double* gr = g.data() + static_cast<size_t>(i) * n.value.cols;
                double* dr = d.data() + static_cast<size_t>(i) * pcols + n.arg0;
                for (int j = 0; j < n.arg1; ++j) dr[j] += gr[j];
            }
            break;
        }
        case Op::ColConcat: {
            int off = 0;
            for (size_t pi = 0; pi < n.parents.size(); ++pi) {
                const Matrix& pv = nodes_[n.parents[pi]].value;
                if (nodes_[n.parents[pi]].requires_grad) {
                    GradBuf& d = ensure_grad(n.parents[pi]);
                    for (int i = 0; i < pv.rows; ++i) {
                        const double* gr = g.data() + static_cast<size_t>(i) * n.value.cols + off;
                        double* dr = d.data() + static_cast<size_t>(i) * pv.cols;
                        for (int j = 0; j < pv.cols; ++j) dr[j] += gr[j];
                    }
                }
                off += pv.cols;
            }
            break;
        }
        case Op::RowConcat: {
            int off = 0;
            for (size_t pi = 0; pi < n.parents.size(); ++pi) {
                const Matrix& pv = nodes_[n.parents[pi]].value;
                if (nodes_[n.parents[pi]].requires_grad) {
                    GradBuf& d = ensure_grad(n.parents[pi]);
                    const double* gr = g.data() + static_cast<size_t>(off) * n.value.cols;
                    for (size_t i = 0; i < pv.size(); ++i) d[i] += gr[i];
                }
                off += pv.rows;
            }
            break;
        }
        case Op::SelectRow: {
            if (!needs(0)) break;
            GradBuf& d = ensure_grad(n.parents[0]);
            double* dr = d.data() + static_cast<size_t>(n.arg0) * n.value.cols;
            for (int j = 0; j < n.value.cols; ++j) dr[j] += g[j];
            break;
        }
        case Op::GatherRows: {
            if (!needs(0)) break;
            GradBuf& d = ensure_grad(n.parents[0]);
            const int c = n.value.cols;
            for (size_t i = 0; i < n.ids.size(); ++i) {
                const double* gr = g.data() + i * c;
                double* dr = d.data() + static_cast<size_t>(n.ids[i]) * c;
                for (int j = 0; j < c; ++j) dr[j] += gr[j];
            }
            break;
        }
        case Op::L2NormalizeRows: {
            if (!needs(0)) break;
            GradBuf& d = ensure_grad(n.parents[0]);
            const Matrix& x = nodes_[n.parents[0]].value;
            const Matrix& y = n.value;
            const int c = x.cols;
            for (int i = 0; i < x.rows; ++i) {
                const float* xr = x.row_ptr(i);
                const float* yr = y.row_ptr(i);
                const double* gr = g.data() + static_cast<size_t>(i) * c;
                double norm = 0.0;
                for (int j = 0; j < c; ++j) norm += static_cast<double>(xr[j]) * xr[j];
                norm = std::sqrt(norm);
                double gy = 0.0;
                for (int j = 0; j < c; ++j) gy += gr[j] * yr[j];
                double* dr = d.data() + static_cast<size_t>(i) * c;
                for (int j = 0; j < c; ++j) dr[j] += (gr[j] - yr[j] * gy) / norm;
            }
            break;
        }
        case Op::SumSquares: {
            if (!needs(0)) break;
            GradBuf& d = ensure_grad(n.parents[0]);
            const Matrix& x = nodes_[n.parents[0]].value;
            const double g0 = g[0];
            for (size_t i = 0; i < x.size(); ++i) d[i] += 2.0 * g0 * x.data[i];
            break;
        }
    }
}

}  // namespace polar
