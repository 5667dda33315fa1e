#pragma once

#include <functional>
#include <unordered_set>
#include <utility>
#include <vector>

#include "usseg/tensor.hpp"

namespace usseg {

// Reverse-mode autodiff tape. Constructing a Tape makes it the active
// recording scope for the current thread; ops consult Tape::active() and
// append one node per call, so the node list is topological by
// construction. backward() replays the nodes in reverse exactly once.
//
// A tape is single-threaded; training uses one tape per step.
template <typename Scalar>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }

  ~Tape() { active_ = prev_; }

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  // True when gradients must reach t: either a trainable leaf or an
  // intermediate produced on this tape.
  bool wants(const Tensor<Scalar>& t) const {
    return t.requires_grad() || produced_.count(t.id()) > 0;
  }

  void record(const Tensor<Scalar>& output, std::function<void()> backward) {
    nodes_.push_back(Node{output, std::move(backward)});
    produced_.insert(output.id());
  }

  void backward(const Tensor<Scalar>& loss) {
    if (backward_done_) throw ConfigError("backward() may run only once per tape");
    backward_done_ = true;
    if (loss.size() != 1) {
      throw ShapeError("backward seed must be a scalar tensor, got " + shape_str(loss.shape()));
    }
    loss.ensure_grad()[0] = Scalar(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->backward();
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor<Scalar> output;  // keeps the output (and its grad buffer) alive
    std::function<void()> backward;
  };

  std::vector<Node> nodes_;
  std::unordered_set<const void*> produced_;
  Tape* prev_ = nullptr;
  bool backward_done_ = false;

  static thread_local Tape* active_;
};

template <typename Scalar>
thread_local Tape<Scalar>* Tape<Scalar>::active_ = nullptr;

}  // namespace usseg
