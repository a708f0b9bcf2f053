#pragma once

#include <cstddef>
#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "eqtrack/error.hpp"

namespace eqtrack::diff {

// Tensors come in two layouts:
//   Mat — (rows, features), row-major
//   P4  — (c, n, h, w): per-channel planes over the whole batch, so every
//         convolution reduces to one GEMM over n*h*w columns. h index 0 is
//         the top image row, matching imaging::GrayImage.
// Convolution kernels reuse P4 as (c_out, c_in, kh, kw).
struct Shape {
  enum class Kind { Mat, P4 };
  Kind kind = Kind::Mat;
  int d0 = 0, d1 = 0, d2 = 0, d3 = 0;

  static Shape mat(int rows, int cols) { return {Kind::Mat, rows, cols, 0, 0}; }
  static Shape p4(int c, int n, int h, int w) { return {Kind::P4, c, n, h, w}; }

  bool operator==(const Shape& o) const {
    return kind == o.kind && d0 == o.d0 && d1 == o.d1 && d2 == o.d2 && d3 == o.d3;
  }
  std::size_t size() const {
    if (kind == Kind::Mat) return static_cast<std::size_t>(d0) * d1;
    return static_cast<std::size_t>(d0) * d1 * d2 * d3;
  }
  bool scalar() const { return size() == 1; }
  std::string str() const {
    if (kind == Kind::Mat) return "mat(" + std::to_string(d0) + "," + std::to_string(d1) + ")";
    return "p4(" + std::to_string(d0) + "," + std::to_string(d1) + "," + std::to_string(d2) +
           "," + std::to_string(d3) + ")";
  }
};

// Size-bucketed buffer recycler. Training graphs have static shapes, so after
// the first iteration every request is served without touching the allocator.
template <class T>
class Pool {
 public:
  T* get(std::size_t n) {
    auto& bucket = free_[n];
    if (!bucket.empty()) {
      T* p = bucket.back();
      bucket.pop_back();
      in_use_.push_back({n, p});
      return p;
    }
    owned_.emplace_back(new T[n]);
    T* p = owned_.back().get();
    in_use_.push_back({n, p});
    return p;
  }
  void release_all() {
    for (auto& [n, p] : in_use_) free_[n].push_back(p);
    in_use_.clear();
  }

 private:
  std::vector<std::unique_ptr<T[]>> owned_;
  std::vector<std::pair<std::size_t, T*>> in_use_;
  std::unordered_map<std::size_t, std::vector<T*>> free_;
};

// Named, persistent tensor: network weights, biases, batch-norm state.
template <class T>
struct Param {
  std::string name;
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool trainable = true;

  Param(std::string n, const Shape& s, bool train = true)
      : name(std::move(n)), shape(s), value(s.size(), T(0)), grad(s.size(), T(0)),
        trainable(train) {}
};

template <class T>
class ParamStore {
 public:
  Param<T>& add(const std::string& name, const Shape& shape, bool trainable = true) {
    params_.emplace_back(name, shape, trainable);
    return params_.back();
  }
  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }
  void zero_grad() {
    for (auto& p : params_) std::fill(p.grad.begin(), p.grad.end(), T(0));
  }
  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  std::size_t size() const { return params_.size(); }
  Param<T>& operator[](std::size_t i) { return params_[i]; }
  const Param<T>& operator[](std::size_t i) const { return params_[i]; }

 private:
  std::deque<Param<T>> params_;  // deque: stable addresses for bound graph leaves
};

}  // namespace eqtrack::diff
