#pragma once

#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "geofuse/graph.hpp"
#include "geofuse/tensor.hpp"

namespace geofuse {

/// Binds named parameter tensors into a graph as requires_grad leaves.
/// Repeated binds of the same tensor return the same node, so a parameter
/// used in several places accumulates one gradient.
class ParamBinder {
public:
    explicit ParamBinder(Graph& g) : graph_(&g) {}

    Value operator()(const std::string& path, const Tensor& t) {
        auto it = cache_.find(&t);
        if (it != cache_.end()) return it->second;
        Value v = graph_->leaf(t, true);
        cache_.emplace(&t, v);
        bound_.emplace_back(path, v);
        return v;
    }

    /// Constant input, not a trainable parameter.
    Value constant(Tensor t) { return graph_->leaf(std::move(t), false); }

    const std::vector<std::pair<std::string, Value>>& bound() const { return bound_; }
    Graph& graph() { return *graph_; }

private:
    Graph* graph_;
    std::unordered_map<const Tensor*, Value> cache_;
    std::vector<std::pair<std::string, Value>> bound_;
};

/// Flat view over a parameter struct: (path, tensor) pairs in a fixed order.
using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

}  // namespace geofuse
