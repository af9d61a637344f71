#pragma once

// Reverse-mode autodiff over a flat tape. Primitives are recorded in
// application order, which is already a topological order, so the backward
// pass is a single reverse sweep that touches every node exactly once.
// Accumulation order is fixed by construction, making repeated backward
// passes bit-identical.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "meet/tensor.hpp"

namespace meet {

using GradMap = std::map<std::string, Tensor>;

class Tape {
public:
    using NodeId = std::int32_t;

    NodeId leaf(Tensor value, std::string name, bool trainable) {
        NodeId id = push(std::move(value), -1, -1, trainable);
        nodes_[id].leaf_name = std::move(name);
        nodes_[id].trainable_leaf = trainable;
        return id;
    }

    // Constant input; gradients never flow into it.
    NodeId input(Tensor value) { return push(std::move(value), -1, -1, false); }

    const Tensor& value(NodeId id) const { return nodes_[check(id)].value; }

    const Tensor& grad(NodeId id) const { return nodes_[check(id)].grad; }

    std::size_t size() const { return nodes_.size(); }

    // ---- primitives ---------------------------------------------------------

    NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        Tensor out = matmul_raw(av, bv, trans_a, trans_b);
        NodeId id = push(std::move(out), a, b, needs(a) || needs(b));
        nodes_[id].backward = [a, b, trans_a, trans_b](Tape& t, NodeId self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& av = t.value(a);
            const Tensor& bv = t.value(b);
            if (t.needs(a)) {
                // dA = g * B^T (untransposed case); transposed cases follow from
                // d(A^T B) etc. reusing the raw kernels.
                Tensor& ga = t.grad_buf(a);
                if (!trans_a) {
                    detail_matmul_acc(g, bv, ga, false, !trans_b);
                } else {
                    // A^T used: dA = B * g^T  (shapes: A is [K x M] stored)
                    detail_matmul_acc(bv, g, ga, trans_b, true);
                }
            }
            if (t.needs(b)) {
                Tensor& gb = t.grad_buf(b);
                if (!trans_b) {
                    detail_matmul_acc(av, g, gb, !trans_a, false);
                } else {
                    detail_matmul_acc(g, av, gb, true, trans_a);
                }
            }
        };
        return id;
    }

    // Elementwise add; also accepts a 1-D bias broadcast across rows of a 2-D lhs.
    NodeId add(NodeId a, NodeId b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        const bool broadcast = av.ndim() == 2 && bv.ndim() == 1 && bv.numel() == av.cols();
        if (!broadcast && !av.same_shape(bv)) {
            throw std::invalid_argument("add: shape mismatch " + av.shape_str() + " + " + bv.shape_str());
        }
        Tensor out = av;
        if (broadcast) {
            for (std::size_t i = 0; i < out.rows(); ++i)
                for (std::size_t j = 0; j < out.cols(); ++j) out.at(i, j) += bv[j];
        } else {
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
        }
        NodeId id = push(std::move(out), a, b, needs(a) || needs(b));
        nodes_[id].backward = [a, b, broadcast](Tape& t, NodeId self) {
            const Tensor& g = t.nodes_[self].grad;
            if (t.needs(a)) {
                Tensor& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i];
            }
            if (t.needs(b)) {
                Tensor& gb = t.grad_buf(b);
                if (broadcast) {
                    for (std::size_t i = 0; i < g.rows(); ++i)
                        for (std::size_t j = 0; j < g.cols(); ++j) gb[j] += g.at(i, j);
                } else {
                    for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i];
                }
            }
        };
        return id;
    }

    NodeId scale(NodeId a, double c) {
        Tensor out = value(a);
        for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= c;
        NodeId id = push(std::move(out), a, -1, needs(a));
        nodes_[id].backward = [a, c](Tape& t, NodeId self) {
            if (!t.needs(a)) return;
            const Tensor& g = t.nodes_[self].grad;
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
        };
        return id;
    }

    NodeId embedding(NodeId table, std::vector<int> ids) {
        const Tensor& tv = value(table);
        if (tv.ndim() != 2) throw std::invalid_argument("embedding: table must be 2-D, got " + tv.shape_str());
        if (ids.empty()) throw std::invalid_argument("embedding: empty id list");
        const std::size_t n = ids.size(), d = tv.cols();
        for (int id : ids) {
            if (id < 0 || static_cast<std::size_t>(id) >= tv.rows()) {
                throw std::invalid_argument("embedding: id " + std::to_string(id) + " out of range for table " +
                                            tv.shape_str());
            }
        }
        Tensor out({n, d});
        for (std::size_t i = 0; i < n; ++i) {
            const double* row = tv.data() + static_cast<std::size_t>(ids[i]) * d;
            std::copy(row, row + d, out.data() + i * d);
        }
        NodeId nid = push(std::move(out), table, -1, needs(table));
        nodes_[nid].backward = [table, ids = std::move(ids), d](Tape& t, NodeId self) {
            if (!t.needs(table)) return;
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gt = t.grad_buf(table);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                double* row = gt.data() + static_cast<std::size_t>(ids[i]) * d;
                const double* grow = g.data() + i * d;
                for (std::size_t j = 0; j < d; ++j) row[j] += grow[j];
            }
        };
        return nid;
    }

    // Row-wise layer normalization with learned gain/bias (both 1-D of width cols).
    NodeId layer_norm(NodeId x, NodeId gain, NodeId bias, double eps) {
        const Tensor& xv = value(x);
        const Tensor& gv = value(gain);
        const Tensor& bv = value(bias);
        const std::size_t rows = xv.rows(), cols = xv.cols();
        if (gv.numel() != cols || bv.numel() != cols) {
            throw std::invalid_argument("layer_norm: gain/bias width " + gv.shape_str() + "/" + bv.shape_str() +
                                        " does not match input " + xv.shape_str());
        }
        Tensor out(xv.shape());
        std::vector<double> inv_std(rows), mean(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            const double* row = xv.data() + i * cols;
            double mu = 0.0;
            for (std::size_t j = 0; j < cols; ++j) mu += row[j];
            mu /= static_cast<double>(cols);
            double var = 0.0;
            for (std::size_t j = 0; j < cols; ++j) var += (row[j] - mu) * (row[j] - mu);
            var /= static_cast<double>(cols);
            const double is = 1.0 / std::sqrt(var + eps);
            mean[i] = mu;
            inv_std[i] = is;
            double* orow = out.data() + i * cols;
            for (std::size_t j = 0; j < cols; ++j) orow[j] = gv[j] * (row[j] - mu) * is + bv[j];
        }
        NodeId id = push(std::move(out), x, gain, needs(x) || needs(gain) || needs(bias));
        nodes_[id].extra_parent = bias;
        nodes_[id].backward = [x, gain, bias, mean = std::move(mean), inv_std = std::move(inv_std)](Tape& t,
                                                                                                    NodeId self) {
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& xv = t.value(x);
            const Tensor& gv = t.value(gain);
            const std::size_t rows = xv.rows(), cols = xv.cols();
            const double n = static_cast<double>(cols);
            for (std::size_t i = 0; i < rows; ++i) {
                const double* xrow = xv.data() + i * cols;
                const double* grow = g.data() + i * cols;
                const double is = inv_std[i], mu = mean[i];
                if (t.needs(gain)) {
                    Tensor& gg = t.grad_buf(gain);
                    for (std::size_t j = 0; j < cols; ++j) gg[j] += grow[j] * (xrow[j] - mu) * is;
                }
                if (t.needs(bias)) {
                    Tensor& gb = t.grad_buf(bias);
                    for (std::size_t j = 0; j < cols; ++j) gb[j] += grow[j];
                }
                if (t.needs(x)) {
                    Tensor& gx = t.grad_buf(x);
                    double* gxrow = gx.data() + i * cols;
                    double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double xhat = (xrow[j] - mu) * is;
                        const double dxhat = grow[j] * gv[j];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for (std::size_t j = 0; j < cols; ++j) {
                        const double xhat = (xrow[j] - mu) * is;
                        const double dxhat = grow[j] * gv[j];
                        gxrow[j] += is * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                    }
                }
            }
        };
        return id;
    }

    // Exact (erf-based) GELU.
    NodeId gelu(NodeId a) {
        const Tensor& av = value(a);
        Tensor out(av.shape());
        for (std::size_t i = 0; i < av.numel(); ++i) {
            out[i] = 0.5 * av[i] * (1.0 + std::erf(av[i] * kInvSqrt2));
        }
        NodeId id = push(std::move(out), a, -1, needs(a));
        nodes_[id].backward = [a](Tape& t, NodeId self) {
            if (!t.needs(a)) return;
            const Tensor& g = t.nodes_[self].grad;
            const Tensor& av = t.value(a);
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < av.numel(); ++i) {
                const double x = av[i];
                const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
                const double pdf = std::exp(-0.5 * x * x) * kInvSqrt2Pi;
                ga[i] += g[i] * (cdf + x * pdf);
            }
        };
        return id;
    }

    NodeId softmax(NodeId a) { return softmax_impl(a, false); }

    NodeId log_softmax(NodeId a) { return softmax_impl(a, true); }

    // Per-row pick: for 2-D x ([T x V] with T indices) result[i] = x[i, idx[i]];
    // a 1-D input is treated as a single row indexed idx.size() times.
    NodeId gather(NodeId x, std::vector<int> idx) {
        const Tensor& xv = value(x);
        const bool flat = xv.ndim() == 1;
        if (!flat && xv.ndim() != 2) {
            throw std::invalid_argument("gather: input must be 1-D or 2-D, got " + xv.shape_str());
        }
        if (!flat && idx.size() != xv.rows()) {
            throw std::invalid_argument("gather: " + std::to_string(idx.size()) + " indices for " +
                                        std::to_string(xv.rows()) + " rows");
        }
        const std::size_t cols = xv.cols();
        for (int j : idx) {
            if (j < 0 || static_cast<std::size_t>(j) >= cols) {
                throw std::invalid_argument("gather: index " + std::to_string(j) + " out of range for " +
                                            xv.shape_str());
            }
        }
        Tensor out({idx.size()});
        for (std::size_t i = 0; i < idx.size(); ++i) {
            out[i] = flat ? xv[static_cast<std::size_t>(idx[i])] : xv.at(i, static_cast<std::size_t>(idx[i]));
        }
        NodeId id = push(std::move(out), x, -1, needs(x));
        nodes_[id].backward = [x, idx = std::move(idx), flat](Tape& t, NodeId self) {
            if (!t.needs(x)) return;
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gx = t.grad_buf(x);
            for (std::size_t i = 0; i < idx.size(); ++i) {
                if (flat) {
                    gx[static_cast<std::size_t>(idx[i])] += g[i];
                } else {
                    gx.at(i, static_cast<std::size_t>(idx[i])) += g[i];
                }
            }
        };
        return id;
    }

    // Concatenate along axis 0 (rows for 2-D, elements for 1-D).
    NodeId concat(NodeId a, NodeId b) {
        const Tensor& av = value(a);
        const Tensor& bv = value(b);
        Tensor out;
        if (av.ndim() == 2 && bv.ndim() == 2) {
            if (av.cols() != bv.cols()) {
                throw std::invalid_argument("concat: column mismatch " + av.shape_str() + " vs " + bv.shape_str());
            }
            out = Tensor({av.rows() + bv.rows(), av.cols()});
        } else if (av.ndim() == 1 && bv.ndim() == 1) {
            out = Tensor({av.numel() + bv.numel()});
        } else {
            throw std::invalid_argument("concat: rank mismatch " + av.shape_str() + " vs " + bv.shape_str());
        }
        std::copy(av.data(), av.data() + av.numel(), out.data());
        std::copy(bv.data(), bv.data() + bv.numel(), out.data() + av.numel());
        NodeId id = push(std::move(out), a, b, needs(a) || needs(b));
        nodes_[id].backward = [a, b](Tape& t, NodeId self) {
            const Tensor& g = t.nodes_[self].grad;
            const std::size_t na = t.value(a).numel();
            if (t.needs(a)) {
                Tensor& ga = t.grad_buf(a);
                for (std::size_t i = 0; i < na; ++i) ga[i] += g[i];
            }
            if (t.needs(b)) {
                Tensor& gb = t.grad_buf(b);
                for (std::size_t i = 0; i < gb.numel(); ++i) gb[i] += g[na + i];
            }
        };
        return id;
    }

    // Causal attention mask on a square score matrix: entries above the
    // diagonal are replaced by `fill` and receive no gradient.
    NodeId causal_mask_fill(NodeId scores, double fill = kMaskFill) {
        const Tensor& sv = value(scores);
        if (sv.ndim() != 2 || sv.rows() != sv.cols()) {
            throw std::invalid_argument("causal_mask_fill: square matrix required, got " + sv.shape_str());
        }
        Tensor out = sv;
        const std::size_t n = sv.rows();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) out.at(i, j) = fill;
        NodeId id = push(std::move(out), scores, -1, needs(scores));
        nodes_[id].backward = [scores, n](Tape& t, NodeId self) {
            if (!t.needs(scores)) return;
            const Tensor& g = t.nodes_[self].grad;
            Tensor& gs = t.grad_buf(scores);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j <= i; ++j) gs.at(i, j) += g.at(i, j);
        };
        return id;
    }

    // Full reduction to a scalar.
    NodeId sum(NodeId a) {
        const Tensor& av = value(a);
        double s = 0.0;
        for (std::size_t i = 0; i < av.numel(); ++i) s += av[i];
        NodeId id = push(Tensor::scalar(s), a, -1, needs(a));
        nodes_[id].backward = [a](Tape& t, NodeId self) {
            if (!t.needs(a)) return;
            const double g = t.nodes_[self].grad[0];
            Tensor& ga = t.grad_buf(a);
            for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += g;
        };
        return id;
    }

    // ---- backward ------------------------------------------------------------

    // Accumulates adjoints from a scalar loss node and returns gradients for
    // every trainable leaf recorded on this tape.
    GradMap backward(NodeId loss) {
        const Tensor& lv = value(loss);
        if (!lv.is_scalar()) {
            throw std::invalid_argument("backward: loss must be scalar, got shape " + lv.shape_str());
        }
        for (Node& n : nodes_) {
            if (n.grad.numel() != 0) n.grad = Tensor(n.value.shape());
        }
        grad_buf(loss)[0] = 1.0;
        for (NodeId id = loss; id >= 0; --id) {
            Node& n = nodes_[id];
            if (!n.needs_grad || !n.backward || n.grad.numel() == 0) continue;
            n.backward(*this, id);
        }
        GradMap grads;
        for (Node& n : nodes_) {
            if (!n.trainable_leaf) continue;
            if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
            auto [it, inserted] = grads.emplace(n.leaf_name, n.grad);
            if (!inserted) {
                // Same parameter registered twice: fold the contributions.
                Tensor& acc = it->second;
                for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += n.grad[i];
            }
        }
        return grads;
    }

    static constexpr double kMaskFill = -1e30;

private:
    static constexpr double kInvSqrt2 = 0.70710678118654752440;
    static constexpr double kInvSqrt2Pi = 0.39894228040143267794;

    struct Node {
        Tensor value;
        Tensor grad;  // empty until first touched in a backward pass
        NodeId parent_a = -1;
        NodeId parent_b = -1;
        NodeId extra_parent = -1;
        std::function<void(Tape&, NodeId)> backward;
        std::string leaf_name;
        bool needs_grad = false;
        bool trainable_leaf = false;
    };

    NodeId check(NodeId id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw std::invalid_argument("tape: invalid node id " + std::to_string(id));
        }
        return id;
    }

    bool needs(NodeId id) const { return nodes_[id].needs_grad; }

    Tensor& grad_buf(NodeId id) {
        Node& n = nodes_[id];
        if (n.grad.numel() == 0) n.grad = Tensor(n.value.shape());
        return n.grad;
    }

    NodeId push(Tensor value, NodeId pa, NodeId pb, bool needs_grad) {
        if (!value.all_finite()) {
            throw std::runtime_error("tape: non-finite values produced at node " + std::to_string(nodes_.size()));
        }
        Node n;
        n.value = std::move(value);
        n.parent_a = pa;
        n.parent_b = pb;
        n.needs_grad = needs_grad;
        nodes_.push_back(std::move(n));
        return static_cast<NodeId>(nodes_.size() - 1);
    }

    NodeId softmax_impl(NodeId a, bool log_form) {
        const Tensor& av = value(a);
        const std::size_t rows = av.rows(), cols = av.cols();
        if (cols == 0) throw std::invalid_argument("softmax: empty axis");
        Tensor out(av.shape());
        for (std::size_t i = 0; i < rows; ++i) {
            const double* row = av.data() + i * cols;
            double* orow = out.data() + i * cols;
            double mx = row[0];
            for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
            if (log_form) {
                const double lz = std::log(z);
                for (std::size_t j = 0; j < cols; ++j) orow[j] = row[j] - mx - lz;
            } else {
                for (std::size_t j = 0; j < cols; ++j) orow[j] = std::exp(row[j] - mx) / z;
            }
        }
        NodeId id = push(std::move(out), a, -1, needs(a));
        if (log_form) {
            nodes_[id].backward = [a](Tape& t, NodeId self) {
                if (!t.needs(a)) return;
                const Tensor& g = t.nodes_[self].grad;
                const Tensor& y = t.nodes_[self].value;  // log-probabilities
                Tensor& ga = t.grad_buf(a);
                const std::size_t rows = y.rows(), cols = y.cols();
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* grow = g.data() + i * cols;
                    const double* yrow = y.data() + i * cols;
                    double gsum = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) gsum += grow[j];
                    double* garow = ga.data() + i * cols;
                    for (std::size_t j = 0; j < cols; ++j) garow[j] += grow[j] - std::exp(yrow[j]) * gsum;
                }
            };
        } else {
            nodes_[id].backward = [a](Tape& t, NodeId self) {
                if (!t.needs(a)) return;
                const Tensor& g = t.nodes_[self].grad;
                const Tensor& y = t.nodes_[self].value;
                Tensor& ga = t.grad_buf(a);
                const std::size_t rows = y.rows(), cols = y.cols();
                for (std::size_t i = 0; i < rows; ++i) {
                    const double* grow = g.data() + i * cols;
                    const double* yrow = y.data() + i * cols;
                    double dot = 0.0;
                    for (std::size_t j = 0; j < cols; ++j) dot += grow[j] * yrow[j];
                    double* garow = ga.data() + i * cols;
                    for (std::size_t j = 0; j < cols; ++j) garow[j] += yrow[j] * (grow[j] - dot);
                }
            };
        }
        return id;
    }

    // dC routed through the raw kernels; `ta`/`tb` select the transposed form
    // of the two factors as they appear in the product being accumulated.
    static void detail_matmul_acc(const Tensor& lhs, const Tensor& rhs, Tensor& out, bool ta, bool tb) {
        const std::size_t m = ta ? lhs.cols() : lhs.rows();
        const std::size_t k = ta ? lhs.rows() : lhs.cols();
        const std::size_t n = tb ? rhs.rows() : rhs.cols();
        if (out.rows() != m || out.cols() != n) {
            throw std::runtime_error("matmul backward: accumulator shape mismatch");
        }
        if (!ta && !tb) {
            detail::mm_nn(lhs.data(), rhs.data(), out.data(), m, k, n, true);
        } else if (!ta && tb) {
            detail::mm_nt(lhs.data(), rhs.data(), out.data(), m, k, n, true);
        } else if (ta && !tb) {
            detail::mm_tn(lhs.data(), rhs.data(), out.data(), lhs.rows(), m, n, true);
        } else {
            Tensor tmp = matmul_raw(lhs, rhs, true, true);
            for (std::size_t i = 0; i < out.numel(); ++i) out[i] += tmp[i];
        }
    }

    std::vector<Node> nodes_;
};

} // namespace meet
