#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "geofuse/tensor.hpp"

namespace geofuse {

enum class OpKind : uint8_t {
    Leaf,
    Add,
    Sub,
    Mul,
    Neg,
    Scale,
    AddRowVec,
    MatMul,
    Transpose,
    Softmax,
    LayerNorm,
    Gelu,
    Sigmoid,
    ConcatRows,
    ConcatCols,
    MeanRows,
    SumAll,
    CrossEntropyLogits,
    Interp2D,
    ZeroRows,
};

class Graph;

/// Handle to one node of a Graph. Cheap to copy; invalid when default
/// constructed.
class Value {
public:
    Value() = default;
    const Tensor& tensor() const;
    int id() const { return id_; }
    bool valid() const { return graph_ != nullptr; }

private:
    friend class Graph;
    Value(Graph* g, int id) : graph_(g), id_(id) {}
    Graph* graph_ = nullptr;
    int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in topological order (operands must
/// already live on the tape), so replay and backward are single passes.
/// A graph is confined to one thread; independent graphs may run in parallel.
class Graph {
public:
    Value leaf(Tensor value, bool requires_grad = false);

    Value add(Value a, Value b);
    Value sub(Value a, Value b);
    Value mul(Value a, Value b);
    Value neg(Value a);
    Value scale(Value a, double c);
    Value add_rowvec(Value x, Value row);  // x: N x C, row: {C}
    Value matmul(Value a, Value b);
    Value transpose(Value a);
    Value softmax(Value x, int axis);
    Value layer_norm(Value x, Value gain, Value bias, double eps);
    Value gelu(Value x);
    Value sigmoid(Value x);
    Value concat_rows(std::span<const Value> parts);
    Value concat_cols(std::span<const Value> parts);
    Value mean_rows(Value x);  // N x C -> 1 x C
    Value sum_all(Value x);    // -> {1}
    Value cross_entropy_logits(Value logits, int label);
    /// Per-frame bilinear resample of a (frames*src_h*src_w) x C sequence to
    /// (frames*dst_h*dst_w) x C, align-corners convention.
    Value interp2d(Value x, int frames, int src_h, int src_w, int dst_h, int dst_w);
    Value zero_rows(Value x, std::vector<int> rows);

    /// Accumulates gradients for every requires_grad node reachable from the
    /// scalar output. Clears gradients of any previous backward pass first.
    void backward(Value scalar_output);

    bool has_grad(Value v) const;
    const Tensor& grad(Value v) const;

    void mark_output(Value v);
    const std::vector<int>& outputs() const { return outputs_; }

    /// Recomputes every non-leaf node from its inputs and reports whether all
    /// recomputed tensors match the stored ones bit for bit.
    bool replay_matches() const;

    size_t size() const { return nodes_.size(); }
    const Tensor& value_of(int id) const { return nodes_[static_cast<size_t>(id)].out; }

    // Test fixture: scales the VJP of one op kind so gradcheck's negative
    // control has a broken rule to detect.
    void corrupt_vjp_for_test(OpKind kind, double factor);

private:
    struct InterpTap {
        int src[4];
        double w[4];
    };
    struct Node {
        OpKind kind = OpKind::Leaf;
        std::vector<int> inputs;
        Tensor out;
        bool requires_grad = false;
        // op attributes
        double scalar = 0.0;
        int axis = 0;
        double eps = 0.0;
        int label = 0;
        std::vector<int> rows;
        std::vector<InterpTap> taps;
        Tensor saved;  // op-specific cached forward intermediate
    };

    Value push(Node node);
    void accumulate(int id, const Tensor& delta);
    const Node& node(Value v) const;
    static Tensor forward_of(const Node& node, const std::vector<const Tensor*>& ins,
                             Tensor* saved_out);

    std::deque<Node> nodes_;
    std::vector<int> outputs_;
    std::vector<Tensor> grads_;
    bool grads_valid_ = false;
    std::optional<std::pair<OpKind, double>> vjp_corruption_;
};

}  // namespace geofuse
