#include "geofuse/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace geofuse {

namespace {

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) {
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
    }
}

double stable_logsumexp(std::span<const double> xs) {
    double m = xs[0];
    for (double x : xs) m = std::max(m, x);
    double s = 0.0;
    for (double x : xs) s += std::exp(x - m);
    return m + std::log(s);
}

void softmax_span(std::span<const double> in, std::span<double> out) {
    double m = in[0];
    for (double x : in) m = std::max(m, x);
    double s = 0.0;
    for (size_t i = 0; i < in.size(); ++i) {
        out[i] = std::exp(in[i] - m);
        s += out[i];
    }
    for (double& v : out) v /= s;
}

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

double gelu_fwd(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

double gelu_grad(double x) {
    const double phi = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
    const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
    return phi + x * pdf;
}

double sigmoid_fwd(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

const Tensor& Value::tensor() const {
    if (!graph_) throw std::logic_error("Value::tensor on invalid handle");
    return graph_->value_of(id_);
}

const Graph::Node& Graph::node(Value v) const {
    if (v.graph_ != this) throw std::logic_error("Value belongs to a different graph");
    return nodes_[static_cast<size_t>(v.id_)];
}

Value Graph::push(Node n) {
    for (int in : n.inputs) {
        n.requires_grad = n.requires_grad || nodes_[static_cast<size_t>(in)].requires_grad;
    }
    std::vector<const Tensor*> ins;
    ins.reserve(n.inputs.size());
    for (int in : n.inputs) ins.push_back(&nodes_[static_cast<size_t>(in)].out);
    n.out = forward_of(n, ins, &n.saved);
    nodes_.push_back(std::move(n));
    grads_valid_ = false;
    return Value(this, static_cast<int>(nodes_.size()) - 1);
}

Value Graph::leaf(Tensor value, bool requires_grad) {
    Node n;
    n.kind = OpKind::Leaf;
    n.out = std::move(value);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    grads_valid_ = false;
    return Value(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Graph::forward_of(const Node& n, const std::vector<const Tensor*>& ins, Tensor* saved_out) {
    switch (n.kind) {
        case OpKind::Leaf:
            return n.out;
        case OpKind::Add:
        case OpKind::Sub:
        case OpKind::Mul: {
            const Tensor& a = *ins[0];
            const Tensor& b = *ins[1];
            Tensor out(a.shape());
            const double* pa = a.ptr();
            const double* pb = b.ptr();
            double* po = out.ptr();
            const int sz = a.size();
            if (n.kind == OpKind::Add) {
                for (int i = 0; i < sz; ++i) po[i] = pa[i] + pb[i];
            } else if (n.kind == OpKind::Sub) {
                for (int i = 0; i < sz; ++i) po[i] = pa[i] - pb[i];
            } else {
                for (int i = 0; i < sz; ++i) po[i] = pa[i] * pb[i];
            }
            return out;
        }
        case OpKind::Neg: {
            Tensor out(ins[0]->shape());
            for (int i = 0; i < out.size(); ++i) out.at(i) = -ins[0]->at(i);
            return out;
        }
        case OpKind::Scale: {
            Tensor out(ins[0]->shape());
            for (int i = 0; i < out.size(); ++i) out.at(i) = n.scalar * ins[0]->at(i);
            return out;
        }
        case OpKind::AddRowVec: {
            const Tensor& x = *ins[0];
            const Tensor& row = *ins[1];
            Tensor out(x.shape());
            const int r = x.rows(), c = x.cols();
            for (int i = 0; i < r; ++i) {
                for (int j = 0; j < c; ++j) out.at2(i, j) = x.at2(i, j) + row.at(j);
            }
            return out;
        }
        case OpKind::MatMul: {
            const Tensor& a = *ins[0];
            const Tensor& b = *ins[1];
            const int m = a.rows(), k = a.cols(), nn = b.cols();
            Tensor out({m, nn});
            for (int i = 0; i < m; ++i) {
                double* orow = out.ptr() + static_cast<size_t>(i) * nn;
                const double* arow = a.ptr() + static_cast<size_t>(i) * k;
                for (int p = 0; p < k; ++p) {
                    const double av = arow[p];
                    if (av == 0.0) continue;
                    const double* brow = b.ptr() + static_cast<size_t>(p) * nn;
                    for (int j = 0; j < nn; ++j) orow[j] += av * brow[j];
                }
            }
            return out;
        }
        case OpKind::Transpose: {
            const Tensor& a = *ins[0];
            Tensor out({a.cols(), a.rows()});
            for (int i = 0; i < a.rows(); ++i) {
                for (int j = 0; j < a.cols(); ++j) out.at2(j, i) = a.at2(i, j);
            }
            return out;
        }
        case OpKind::Softmax: {
            const Tensor& x = *ins[0];
            if (x.rank() == 1) {
                Tensor out(x.shape());
                softmax_span(x.data(), out.data());
                return out;
            }
            const int r = x.rows(), c = x.cols();
            Tensor out(x.shape());
            if (n.axis == 1) {
                for (int i = 0; i < r; ++i) {
                    softmax_span(std::span<const double>(x.ptr() + static_cast<size_t>(i) * c, c),
                                 std::span<double>(out.ptr() + static_cast<size_t>(i) * c, c));
                }
            } else {
                std::vector<double> col(r), sm(r);
                for (int j = 0; j < c; ++j) {
                    for (int i = 0; i < r; ++i) col[static_cast<size_t>(i)] = x.at2(i, j);
                    softmax_span(col, sm);
                    for (int i = 0; i < r; ++i) out.at2(i, j) = sm[static_cast<size_t>(i)];
                }
            }
            return out;
        }
        case OpKind::LayerNorm: {
            const Tensor& x = *ins[0];
            const Tensor& gain = *ins[1];
            const Tensor& bias = *ins[2];
            const int r = x.rows(), c = x.cols();
            Tensor out(x.shape());
            Tensor xhat(x.shape());
            for (int i = 0; i < r; ++i) {
                double mu = 0.0;
                for (int j = 0; j < c; ++j) mu += x.at2(i, j);
                mu /= c;
                double var = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double d = x.at2(i, j) - mu;
                    var += d * d;
                }
                var /= c;  // population variance
                const double inv = 1.0 / std::sqrt(var + n.eps);
                for (int j = 0; j < c; ++j) {
                    const double h = (x.at2(i, j) - mu) * inv;
                    xhat.at2(i, j) = h;
                    out.at2(i, j) = h * gain.at(j) + bias.at(j);
                }
            }
            if (saved_out) *saved_out = std::move(xhat);
            return out;
        }
        case OpKind::Gelu: {
            Tensor out(ins[0]->shape());
            for (int i = 0; i < out.size(); ++i) out.at(i) = gelu_fwd(ins[0]->at(i));
            return out;
        }
        case OpKind::Sigmoid: {
            Tensor out(ins[0]->shape());
            for (int i = 0; i < out.size(); ++i) out.at(i) = sigmoid_fwd(ins[0]->at(i));
            return out;
        }
        case OpKind::ConcatRows: {
            int total = 0;
            const int c = ins[0]->cols();
            for (const Tensor* t : ins) total += t->rows();
            Tensor out({total, c});
            int at = 0;
            for (const Tensor* t : ins) {
                std::copy(t->ptr(), t->ptr() + t->size(), out.ptr() + static_cast<size_t>(at) * c);
                at += t->rows();
            }
            return out;
        }
        case OpKind::ConcatCols: {
            const int r = ins[0]->rows();
            int total = 0;
            for (const Tensor* t : ins) total += t->cols();
            Tensor out({r, total});
            for (int i = 0; i < r; ++i) {
                int at = 0;
                for (const Tensor* t : ins) {
                    for (int j = 0; j < t->cols(); ++j) out.at2(i, at + j) = t->at2(i, j);
                    at += t->cols();
                }
            }
            return out;
        }
        case OpKind::MeanRows: {
            const Tensor& x = *ins[0];
            const int r = x.rows(), c = x.cols();
            Tensor out({1, c});
            for (int i = 0; i < r; ++i) {
                for (int j = 0; j < c; ++j) out.at(j) += x.at2(i, j);
            }
            for (int j = 0; j < c; ++j) out.at(j) /= r;
            return out;
        }
        case OpKind::SumAll: {
            double s = 0.0;
            for (int i = 0; i < ins[0]->size(); ++i) s += ins[0]->at(i);
            return Tensor::scalar(s);
        }
        case OpKind::CrossEntropyLogits: {
            const Tensor& logits = *ins[0];
            Tensor probs(std::vector<int>{logits.size()});
            softmax_span(logits.data(), probs.data());
            const double loss = stable_logsumexp(logits.data()) - logits.at(n.label);
            if (saved_out) *saved_out = std::move(probs);
            return Tensor::scalar(loss);
        }
        case OpKind::Interp2D: {
            const Tensor& x = *ins[0];
            const int c = x.cols();
            Tensor out({static_cast<int>(n.taps.size()), c});
            for (size_t r = 0; r < n.taps.size(); ++r) {
                double* orow = out.ptr() + r * c;
                for (int k = 0; k < 4; ++k) {
                    const double w = n.taps[r].w[k];
                    if (w == 0.0) continue;
                    const double* srow = x.ptr() + static_cast<size_t>(n.taps[r].src[k]) * c;
                    for (int j = 0; j < c; ++j) orow[j] += w * srow[j];
                }
            }
            return out;
        }
        case OpKind::ZeroRows: {
            Tensor out = *ins[0];
            const int c = out.cols();
            for (int r : n.rows) {
                double* row = out.ptr() + static_cast<size_t>(r) * c;
                std::fill(row, row + c, 0.0);
            }
            return out;
        }
    }
    throw std::logic_error("unreachable op kind");
}

Value Graph::add(Value a, Value b) {
    if (!node(a).out.same_shape(node(b).out)) throw_dim_error("add", node(a).out.shape(), node(b).out.shape());
    Node n;
    n.kind = OpKind::Add;
    n.inputs = {a.id_, b.id_};
    return push(std::move(n));
}

Value Graph::sub(Value a, Value b) {
    if (!node(a).out.same_shape(node(b).out)) throw_dim_error("sub", node(a).out.shape(), node(b).out.shape());
    Node n;
    n.kind = OpKind::Sub;
    n.inputs = {a.id_, b.id_};
    return push(std::move(n));
}

Value Graph::mul(Value a, Value b) {
    if (!node(a).out.same_shape(node(b).out)) throw_dim_error("mul", node(a).out.shape(), node(b).out.shape());
    Node n;
    n.kind = OpKind::Mul;
    n.inputs = {a.id_, b.id_};
    return push(std::move(n));
}

Value Graph::neg(Value a) {
    Node n;
    n.kind = OpKind::Neg;
    n.inputs = {a.id_};
    return push(std::move(n));
}

Value Graph::scale(Value a, double c) {
    Node n;
    n.kind = OpKind::Scale;
    n.inputs = {a.id_};
    n.scalar = c;
    return push(std::move(n));
}

Value Graph::add_rowvec(Value x, Value row) {
    require_rank2(node(x).out, "add_rowvec");
    const Tensor& r = node(row).out;
    if (r.rank() != 1 || r.size() != node(x).out.cols()) {
        throw_dim_error("add_rowvec", node(x).out.shape(), r.shape());
    }
    Node n;
    n.kind = OpKind::AddRowVec;
    n.inputs = {x.id_, row.id_};
    return push(std::move(n));
}

Value Graph::matmul(Value a, Value b) {
    require_rank2(node(a).out, "matmul");
    require_rank2(node(b).out, "matmul");
    if (node(a).out.cols() != node(b).out.rows()) {
        throw_dim_error("matmul", node(a).out.shape(), node(b).out.shape());
    }
    Node n;
    n.kind = OpKind::MatMul;
    n.inputs = {a.id_, b.id_};
    return push(std::move(n));
}

Value Graph::transpose(Value a) {
    require_rank2(node(a).out, "transpose");
    Node n;
    n.kind = OpKind::Transpose;
    n.inputs = {a.id_};
    return push(std::move(n));
}

Value Graph::softmax(Value x, int axis) {
    const Tensor& t = node(x).out;
    if (t.rank() == 1) {
        if (axis != 0) throw_contract_error("softmax: axis " + std::to_string(axis) + " invalid for rank-1 tensor");
    } else if (t.rank() == 2) {
        if (axis != 0 && axis != 1) {
            throw_contract_error("softmax: axis " + std::to_string(axis) + " invalid for shape " + shape_str(t.shape()));
        }
    } else {
        throw_contract_error("softmax: only rank-1 and rank-2 tensors supported, got " + shape_str(t.shape()));
    }
    Node n;
    n.kind = OpKind::Softmax;
    n.inputs = {x.id_};
    n.axis = axis;
    return push(std::move(n));
}

Value Graph::layer_norm(Value x, Value gain, Value bias, double eps) {
    require_rank2(node(x).out, "layer_norm");
    const int c = node(x).out.cols();
    if (node(gain).out.size() != c) throw_dim_error("layer_norm gain", node(x).out.shape(), node(gain).out.shape());
    if (node(bias).out.size() != c) throw_dim_error("layer_norm bias", node(x).out.shape(), node(bias).out.shape());
    Node n;
    n.kind = OpKind::LayerNorm;
    n.inputs = {x.id_, gain.id_, bias.id_};
    n.eps = eps;
    return push(std::move(n));
}

Value Graph::gelu(Value x) {
    Node n;
    n.kind = OpKind::Gelu;
    n.inputs = {x.id_};
    return push(std::move(n));
}

Value Graph::sigmoid(Value x) {
    Node n;
    n.kind = OpKind::Sigmoid;
    n.inputs = {x.id_};
    return push(std::move(n));
}

Value Graph::concat_rows(std::span<const Value> parts) {
    if (parts.empty()) throw_contract_error("concat_rows: no inputs");
    Node n;
    n.kind = OpKind::ConcatRows;
    const int c = node(parts[0]).out.cols();
    for (Value v : parts) {
        require_rank2(node(v).out, "concat_rows");
        if (node(v).out.cols() != c) throw_dim_error("concat_rows", node(parts[0]).out.shape(), node(v).out.shape());
        n.inputs.push_back(v.id_);
    }
    return push(std::move(n));
}

Value Graph::concat_cols(std::span<const Value> parts) {
    if (parts.empty()) throw_contract_error("concat_cols: no inputs");
    Node n;
    n.kind = OpKind::ConcatCols;
    const int r = node(parts[0]).out.rows();
    for (Value v : parts) {
        require_rank2(node(v).out, "concat_cols");
        if (node(v).out.rows() != r) throw_dim_error("concat_cols", node(parts[0]).out.shape(), node(v).out.shape());
        n.inputs.push_back(v.id_);
    }
    return push(std::move(n));
}

Value Graph::mean_rows(Value x) {
    require_rank2(node(x).out, "mean_rows");
    Node n;
    n.kind = OpKind::MeanRows;
    n.inputs = {x.id_};
    return push(std::move(n));
}

Value Graph::sum_all(Value x) {
    Node n;
    n.kind = OpKind::SumAll;
    n.inputs = {x.id_};
    return push(std::move(n));
}

Value Graph::cross_entropy_logits(Value logits, int label) {
    const int k = node(logits).out.size();
    if (label < 0 || label >= k) {
        throw_contract_error("cross_entropy_logits: label " + std::to_string(label) + " out of range for " +
                             std::to_string(k) + " classes");
    }
    Node n;
    n.kind = OpKind::CrossEntropyLogits;
    n.inputs = {logits.id_};
    n.label = label;
    return push(std::move(n));
}

Value Graph::interp2d(Value x, int frames, int src_h, int src_w, int dst_h, int dst_w) {
    require_rank2(node(x).out, "interp2d");
    if (node(x).out.rows() != frames * src_h * src_w) {
        throw_dim_error("interp2d", node(x).out.shape(), {frames * src_h * src_w, node(x).out.cols()});
    }
    Node n;
    n.kind = OpKind::Interp2D;
    n.inputs = {x.id_};
    n.taps.reserve(static_cast<size_t>(frames) * dst_h * dst_w);
    const double sy = dst_h > 1 ? static_cast<double>(src_h - 1) / (dst_h - 1) : 0.0;
    const double sx = dst_w > 1 ? static_cast<double>(src_w - 1) / (dst_w - 1) : 0.0;
    for (int t = 0; t < frames; ++t) {
        const int base = t * src_h * src_w;
        for (int oi = 0; oi < dst_h; ++oi) {
            const double y = oi * sy;
            const int y0 = static_cast<int>(std::floor(y));
            const int y1 = std::min(y0 + 1, src_h - 1);
            const double wy = y - y0;
            for (int oj = 0; oj < dst_w; ++oj) {
                const double x2 = oj * sx;
                const int x0 = static_cast<int>(std::floor(x2));
                const int x1 = std::min(x0 + 1, src_w - 1);
                const double wx = x2 - x0;
                InterpTap tap;
                tap.src[0] = base + y0 * src_w + x0;
                tap.src[1] = base + y0 * src_w + x1;
                tap.src[2] = base + y1 * src_w + x0;
                tap.src[3] = base + y1 * src_w + x1;
                tap.w[0] = (1.0 - wy) * (1.0 - wx);
                tap.w[1] = (1.0 - wy) * wx;
                tap.w[2] = wy * (1.0 - wx);
                tap.w[3] = wy * wx;
                n.taps.push_back(tap);
            }
        }
    }
    return push(std::move(n));
}

Value Graph::zero_rows(Value x, std::vector<int> rows) {
    require_rank2(node(x).out, "zero_rows");
    for (int r : rows) {
        if (r < 0 || r >= node(x).out.rows()) {
            throw_contract_error("zero_rows: row " + std::to_string(r) + " out of range for " +
                                 shape_str(node(x).out.shape()));
        }
    }
    Node n;
    n.kind = OpKind::ZeroRows;
    n.inputs = {x.id_};
    n.rows = std::move(rows);
    return push(std::move(n));
}

void Graph::mark_output(Value v) {
    node(v);  // ownership check
    outputs_.push_back(v.id_);
}

void Graph::accumulate(int id, const Tensor& delta) {
    Tensor& g = grads_[static_cast<size_t>(id)];
    if (g.size() == 0) {
        g = delta;
        return;
    }
    for (int i = 0; i < g.size(); ++i) g.at(i) += delta.at(i);
}

void Graph::backward(Value scalar_output) {
    const Node& seed = node(scalar_output);
    if (seed.out.size() != 1) {
        throw_contract_error("backward: output must be scalar, got shape " + shape_str(seed.out.shape()));
    }
    grads_.assign(nodes_.size(), Tensor());
    grads_valid_ = true;
    grads_[static_cast<size_t>(scalar_output.id_)] = Tensor::scalar(1.0);

    for (int id = scalar_output.id_; id >= 0; --id) {
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (!n.requires_grad || n.kind == OpKind::Leaf) continue;
        Tensor& up = grads_[static_cast<size_t>(id)];
        if (up.size() == 0) continue;  // not on a path to the output
        if (vjp_corruption_ && vjp_corruption_->first == n.kind) {
            for (int i = 0; i < up.size(); ++i) up.at(i) *= vjp_corruption_->second;
        }
        const auto in = [&](size_t k) -> const Tensor& { return nodes_[static_cast<size_t>(n.inputs[k])].out; };
        const auto rg = [&](size_t k) { return nodes_[static_cast<size_t>(n.inputs[k])].requires_grad; };

        switch (n.kind) {
            case OpKind::Leaf:
                break;
            case OpKind::Add: {
                if (rg(0)) accumulate(n.inputs[0], up);
                if (rg(1)) accumulate(n.inputs[1], up);
                break;
            }
            case OpKind::Sub: {
                if (rg(0)) accumulate(n.inputs[0], up);
                if (rg(1)) {
                    Tensor d(up.shape());
                    for (int i = 0; i < d.size(); ++i) d.at(i) = -up.at(i);
                    accumulate(n.inputs[1], d);
                }
                break;
            }
            case OpKind::Mul: {
                if (rg(0)) {
                    Tensor d(up.shape());
                    for (int i = 0; i < d.size(); ++i) d.at(i) = up.at(i) * in(1).at(i);
                    accumulate(n.inputs[0], d);
                }
                if (rg(1)) {
                    Tensor d(up.shape());
                    for (int i = 0; i < d.size(); ++i) d.at(i) = up.at(i) * in(0).at(i);
                    accumulate(n.inputs[1], d);
                }
                break;
            }
            case OpKind::Neg: {
                if (rg(0)) {
                    Tensor d(up.shape());
                    for (int i = 0; i < d.size(); ++i) d.at(i) = -up.at(i);
                    accumulate(n.inputs[0], d);
                }
                break;
            }
            case OpKind::Scale: {
                if (rg(0)) {
                    Tensor d(up.shape());
                    for (int i = 0; i < d.size(); ++i) d.at(i) = n.scalar * up.at(i);
                    accumulate(n.inputs[0], d);
                }
                break;
            }
            case OpKind::AddRowVec: {
                if (rg(0)) accumulate(n.inputs[0], up);
                if (rg(1)) {
                    Tensor d(in(1).shape());
                    for (int i = 0; i < up.rows(); ++i) {
                        for (int j = 0; j < up.cols(); ++j) d.at(j) += up.at2(i, j);
                    }
                    accumulate(n.inputs[1], d);
                }
                break;
            }
            case OpKind::MatMul: {
                const Tensor& a = in(0);
                const Tensor& b = in(1);
                if (rg(0)) {
                    // dA = dC * B^T
                    Tensor d(a.shape());
                    for (int i = 0; i < a.rows(); ++i) {
                        for (int p = 0; p < a.cols(); ++p) {
                            double s = 0.0;
                            for (int j = 0; j < b.cols(); ++j) s += up.at2(i, j) * b.at2(p, j);
                            d.at2(i, p) = s;
                        }
                    }
                    accumulate(n.inputs[0], d);
                }
                if (rg(1)) {
                    // dB = A^T * dC
                    Tensor d(b.shape());
                    for (int i = 0; i < a.rows(); ++i) {
                        for (int p = 0; p < a.cols(); ++p) {
                            const double av = a.at2(i, p);
                            if (av == 0.0) continue;
                            for (int j = 0; j < b.cols(); ++j) d.at2(p, j) += av * up.at2(i, j);
                        }
                    }
                    accumulate(n.inputs[1], d);
                }
                break;
            }
            case OpKind::Transpose: {
                if (rg(0)) {
                    Tensor d(in(0).shape());
                    for (int i = 0; i < up.rows(); ++i) {
                        for (int j = 0; j < up.cols(); ++j) d.at2(j, i) = up.at2(i, j);
                    }
                    accumulate(n.inputs[0], d);
                }
                break;
            }
            case OpKind::Softmax: {
                if (!rg(0)) break;
                const Tensor& y = n.out;
                Tensor d(y.shape());
                if (y.rank() == 1 || n.axis == 1) {
                    const int r = y.rank() == 1 ? 1 : y.rows();
                    const int c = y.rank() == 1 ? y.size() : y.cols();
                    for (int i = 0; i < r; ++i) {
                        const double* yr = y.ptr() + static_cast<size_t>(i) * c;
                        const double* ur = up.ptr() + static_cast<size_t>(i) * c;
                        double dot = 0.0;
                        for (int j = 0; j < c; ++j) dot += ur[j] * yr[j];
                        double* dr = d.ptr() + static_cast<size_t>(i) * c;
                        for (int j = 0; j < c; ++j) dr[j] = yr[j] * (ur[j] - dot);
                    }
                } else {
                    for (int j = 0; j < y.cols(); ++j) {
                        double dot = 0.0;
                        for (int i = 0; i < y.rows(); ++i) dot += up.at2(i, j) * y.at2(i, j);
                        for (int i = 0; i < y.rows(); ++i) d.at2(i, j) = y.at2(i, j) * (up.at2(i, j) - dot);
                    }
                }
                accumulate(n.inputs[0], d);
                break;
            }
            case OpKind::LayerNorm: {
                const Tensor& x = in(0);
                const Tensor& gain = in(1);
                const Tensor& xhat = n.saved;
                const int r = x.rows(), c = x.cols();
                if (rg(1)) {
                    Tensor dg(gain.shape());
                    for (int i = 0; i < r; ++i) {
                        for (int j = 0; j < c; ++j) dg.at(j) += up.at2(i, j) * xhat.at2(i, j);
                    }
                    accumulate(n.inputs[1], dg);
                }
                if (rg(2)) {
                    Tensor db(in(2).shape());
                    for (int i = 0; i < r; ++i) {
                        for (int j = 0; j < c; ++j) db.at(j) += up.at2(i, j);
                    }
                    accumulate(n.inputs[2], db);
                }
                if (rg(0)) {
                    Tensor d(x.shape());
                    for (int i = 0; i < r; ++i) {
                        double mu = 0.0;
                        for (int j = 0; j < c; ++j) mu += x.at2(i, j);
                        mu /= c;
                        double var = 0.0;
                        for (int j = 0; j < c; ++j) {
                            const double dv = x.at2(i, j) - mu;
                            var += dv * dv;
                        }
                        var /= c;
                        const double inv = 1.0 / std::sqrt(var + n.eps);
                        double mean_dh = 0.0, mean_dh_h = 0.0;
                        for (int j = 0; j < c; ++j) {
                            const double dh = up.at2(i, j) * gain.at(j);
                            mean_dh += dh;
                            mean_dh_h += dh * xhat.at2(i, j);
                        }
                        mean_dh /= c;
                        mean_dh_h /= c;
                        for (int j = 0; j < c; ++j) {
                            const double dh = up.at2(i, j) * gain.at(j);
                            d.at2(i, j) = inv * (dh - mean_dh - xhat.at2(i, j) * mean_dh_h);
                        }
                    }
                    accumulate(n.inputs[0], d);
                }
                break;
            }
            case OpKind::Gelu: {
                if (!rg(0)) break;
                Tensor d(up.shape());
                for (int i = 0; i < d.size(); ++i) d.at(i) = up.at(i) * gelu_grad(in(0).at(i));
                accumulate(n.inputs[0], d);
                break;
            }
            case OpKind::Sigmoid: {
                if (!rg(0)) break;
                Tensor d(up.shape());
                for (int i = 0; i < d.size(); ++i) {
                    const double y = n.out.at(i);
                    d.at(i) = up.at(i) * y * (1.0 - y);
                }
                accumulate(n.inputs[0], d);
                break;
            }
            case OpKind::ConcatRows: {
                int at = 0;
                for (size_t k = 0; k < n.inputs.size(); ++k) {
                    const Tensor& part = in(k);
                    if (rg(k)) {
                        Tensor d(part.shape());
                        std::copy(up.ptr() + static_cast<size_t>(at) * part.cols(),
                                  up.ptr() + static_cast<size_t>(at + part.rows()) * part.cols(), d.ptr());
                        accumulate(n.inputs[k], d);
                    }
                    at += part.rows();
                }
                break;
            }
            case OpKind::ConcatCols: {
                int at = 0;
                for (size_t k = 0; k < n.inputs.size(); ++k) {
                    const Tensor& part = in(k);
                    if (rg(k)) {
                        Tensor d(part.shape());
                        for (int i = 0; i < part.rows(); ++i) {
                            for (int j = 0; j < part.cols(); ++j) d.at2(i, j) = up.at2(i, at + j);
                        }
                        accumulate(n.inputs[k], d);
                    }
                    at += part.cols();
                }
                break;
            }
            case OpKind::MeanRows: {
                if (!rg(0)) break;
                const Tensor& x = in(0);
                Tensor d(x.shape());
                const double invr = 1.0 / x.rows();
                for (int i = 0; i < x.rows(); ++i) {
                    for (int j = 0; j < x.cols(); ++j) d.at2(i, j) = up.at(j) * invr;
                }
                accumulate(n.inputs[0], d);
                break;
            }
            case OpKind::SumAll: {
                if (!rg(0)) break;
                Tensor d(in(0).shape());
                const double u = up.at(0);
                for (int i = 0; i < d.size(); ++i) d.at(i) = u;
                accumulate(n.inputs[0], d);
                break;
            }
            case OpKind::CrossEntropyLogits: {
                if (!rg(0)) break;
                const Tensor& probs = n.saved;
                Tensor d(in(0).shape());
                const double u = up.at(0);
                for (int i = 0; i < d.size(); ++i) d.at(i) = u * (probs.at(i) - (i == n.label ? 1.0 : 0.0));
                accumulate(n.inputs[0], d);
                break;
            }
            case OpKind::Interp2D: {
                if (!rg(0)) break;
                const Tensor& x = in(0);
                const int c = x.cols();
                Tensor d(x.shape());
                for (size_t r = 0; r < n.taps.size(); ++r) {
                    const double* urow = up.ptr() + r * c;
                    for (int k = 0; k < 4; ++k) {
                        const double w = n.taps[r].w[k];
                        if (w == 0.0) continue;
                        double* drow = d.ptr() + static_cast<size_t>(n.taps[r].src[k]) * c;
                        for (int j = 0; j < c; ++j) drow[j] += w * urow[j];
                    }
                }
                accumulate(n.inputs[0], d);
                break;
            }
            case OpKind::ZeroRows: {
                if (!rg(0)) break;
                Tensor d = up;
                const int c = d.cols();
                for (int r : n.rows) {
                    double* row = d.ptr() + static_cast<size_t>(r) * c;
                    std::fill(row, row + c, 0.0);
                }
                accumulate(n.inputs[0], d);
                break;
            }
        }
    }
}

bool Graph::has_grad(Value v) const {
    if (!grads_valid_) return false;
    const Tensor& g = grads_[static_cast<size_t>(v.id_)];
    return g.size() > 0;
}

const Tensor& Graph::grad(Value v) const {
    if (!grads_valid_) throw std::logic_error("Graph::grad before backward");
    const Tensor& g = grads_[static_cast<size_t>(v.id_)];
    if (g.size() == 0) throw std::logic_error("Graph::grad: node has no gradient");
    return g;
}

bool Graph::replay_matches() const {
    for (const Node& n : nodes_) {
        if (n.kind == OpKind::Leaf) continue;
        std::vector<const Tensor*> ins;
        ins.reserve(n.inputs.size());
        for (int id : n.inputs) ins.push_back(&nodes_[static_cast<size_t>(id)].out);
        Tensor saved;
        Tensor redo = forward_of(n, ins, &saved);
        if (!redo.bit_equal(n.out)) return false;
    }
    return true;
}

void Graph::corrupt_vjp_for_test(OpKind kind, double factor) {
    vjp_corruption_ = {kind, factor};
}

}  // namespace geofuse
