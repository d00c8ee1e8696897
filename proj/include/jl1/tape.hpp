#pragma once

#include <atomic>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "jl1/tensor.hpp"

namespace jl1 {

// Reverse-mode autodiff tape. Nodes are appended in execution order, so
// the tape itself is the topological order; backward() walks it once in
// reverse. Gradient buffers are allocated lazily and only for nodes that
// require gradients.
template <typename T>
class TapeT {
 public:
  // Adjoint of one node: receives the tape and the node id, reads the
  // accumulated output gradient, adds into parent gradients.
  using BackwardFn = std::function<void(TapeT&, int)>;

  TapeT() : stamp_(next_stamp()) {}
  TapeT(const TapeT&) = delete;
  TapeT& operator=(const TapeT&) = delete;

  // Identity of this tape instance; tensors carry the stamp of the tape
  // their node id refers to.
  std::uint64_t stamp() const { return stamp_; }

  // Registers `t` as a leaf. Sets t.node and stores a copy of the value.
  int watch(TensorT<T>& t, bool requires_grad = true) {
    int id = add_node({}, nullptr, requires_grad);
    values_.push_back(t);
    t.node = id;
    t.stamp = stamp_;
    values_.back().stamp = stamp_;
    return id;
  }

  // Records an op result. `parents` must already live on this tape; the
  // node requires grad iff any parent does (constants stay dead weight).
  int record(const TensorT<T>& out, std::vector<int> parents, BackwardFn back) {
    bool req = false;
    for (int p : parents) {
      check_node(p);
      req = req || nodes_[static_cast<std::size_t>(p)].requires_grad;
    }
    int id = add_node(std::move(parents), std::move(back), req);
    values_.push_back(out);
    values_.back().node = id;
    values_.back().stamp = stamp_;
    return id;
  }

  const TensorT<T>& value(int node) const {
    check_node(node);
    return values_[static_cast<std::size_t>(node)];
  }

  bool requires_grad(int node) const {
    check_node(node);
    return nodes_[static_cast<std::size_t>(node)].requires_grad;
  }

  // Mutable gradient accumulator for `node`, zero-initialized on first use.
  std::span<T> grad_accum(int node) {
    check_node(node);
    auto& g = grads_[static_cast<std::size_t>(node)];
    if (g.empty())
      g.assign(static_cast<std::size_t>(value(node).numel()), T(0));
    return std::span<T>(g);
  }

  // Empty span if no gradient ever flowed into `node`.
  std::span<const T> grad_view(int node) const {
    check_node(node);
    return std::span<const T>(grads_[static_cast<std::size_t>(node)]);
  }

  // Gradient of the last backward() root w.r.t. `node`, shaped like its
  // value; all zeros if the node was never touched.
  TensorT<T> grad(int node) const {
    auto gv = grad_view(node);
    TensorT<T> out = TensorT<T>::zeros(value(node).shape);
    if (!gv.empty())
      std::copy(gv.begin(), gv.end(), out.data.begin());
    return out;
  }

  // Reverse sweep from `root`, which must be scalar-shaped. Each node's
  // adjoint runs exactly once, in reverse insertion order, and only if
  // gradient actually reached it. The tape is consumed: recording or
  // running backward again afterwards is a contract violation.
  void backward(int root) {
    if (consumed_)
      throw contract_error("tape already consumed by backward()");
    check_node(root);
    if (value(root).numel() != 1)
      throw contract_error("backward root must be scalar-shaped, got " +
                           shape_str(value(root).shape));
    consumed_ = true;
    grad_accum(root)[0] = T(1);
    for (int id = root; id >= 0; --id) {
      auto& n = nodes_[static_cast<std::size_t>(id)];
      if (!n.requires_grad || !n.back) continue;
      if (grads_[static_cast<std::size_t>(id)].empty()) continue;
      n.back(*this, id);
    }
  }

  bool consumed() const { return consumed_; }
  std::size_t size() const { return nodes_.size(); }

  // Total bytes held in recorded values (diagnostics).
  std::size_t value_bytes() const {
    std::size_t b = 0;
    for (auto& v : values_) b += v.data.size() * sizeof(T);
    return b;
  }

 private:
  struct Node {
    std::vector<int> parents;
    BackwardFn back;
    bool requires_grad = false;
  };

  int add_node(std::vector<int> parents, BackwardFn back, bool req) {
    if (consumed_)
      throw contract_error("cannot record on a consumed tape");
    nodes_.push_back({std::move(parents), std::move(back), req});
    grads_.emplace_back();
    return static_cast<int>(nodes_.size()) - 1;
  }

  void check_node(int id) const {
    if (id < 0 || id >= static_cast<int>(nodes_.size()))
      throw contract_error("node id " + std::to_string(id) +
                           " is not on this tape");
  }

  static std::uint64_t next_stamp() {
    static std::atomic<std::uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  std::uint64_t stamp_;
  std::vector<Node> nodes_;
  std::vector<TensorT<T>> values_;
  std::vector<std::vector<T>> grads_;
  bool consumed_ = false;
};

using Tape = TapeT<float>;

}  // namespace jl1
