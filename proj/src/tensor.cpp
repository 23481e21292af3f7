#include "branchkit/tensor.hpp"

#include <atomic>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace branchkit::ad {

namespace {
bool g_verify_mode = false;
thread_local bool g_mac_counting = false;
thread_local std::int64_t g_mac_count = 0;
thread_local Tape* g_active_tape = nullptr;
}  // namespace

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto e : shape) {
    if (e < 0) throw std::invalid_argument("negative extent in shape " + shape_str(shape));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

void set_verify_mode(bool on) { g_verify_mode = on; }
bool verify_mode() { return g_verify_mode; }

void set_mac_counting(bool on) { g_mac_counting = on; }
bool mac_counting() { return g_mac_counting; }
void add_macs(std::int64_t n) {
  if (g_mac_counting) g_mac_count += n;
}
std::int64_t mac_count() { return g_mac_count; }
void reset_mac_count() { g_mac_count = 0; }

void Storage::ensure_grad() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  auto s = std::make_shared<Storage>();
  s->shape = shape;
  s->value.assign(static_cast<std::size_t>(numel_of(shape)), 0.0);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::full(const Shape& shape, double v, bool requires_grad) {
  auto s = std::make_shared<Storage>();
  s->shape = shape;
  s->value.assign(static_cast<std::size_t>(numel_of(shape)), v);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  if (static_cast<std::int64_t>(data.size()) != numel_of(shape)) {
    throw std::invalid_argument("from_data: " + std::to_string(data.size()) +
                                " values for shape " + shape_str(shape));
  }
  auto s = std::make_shared<Storage>();
  s->shape = shape;
  s->value = std::move(data);
  s->requires_grad = requires_grad;
  return Tensor(std::move(s));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

Tensor Tensor::wrap(std::shared_ptr<Storage> s) { return Tensor(std::move(s)); }

const Shape& Tensor::shape() const {
  if (!s_) throw std::runtime_error("use of undefined tensor");
  return s_->shape;
}

std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(data().size());
}

std::int64_t Tensor::extent(int axis) const {
  const auto& sh = shape();
  if (axis < 0 || axis >= static_cast<int>(sh.size())) {
    throw std::invalid_argument("axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(sh));
  }
  return sh[static_cast<std::size_t>(axis)];
}

std::vector<double>& Tensor::data() {
  if (!s_) throw std::runtime_error("use of undefined tensor");
  return s_->value;
}

const std::vector<double>& Tensor::data() const {
  if (!s_) throw std::runtime_error("use of undefined tensor");
  return s_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
  }
  return data()[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  const auto& sh = shape();
  if (index.size() != sh.size()) {
    throw std::invalid_argument("at(): rank mismatch for shape " + shape_str(sh));
  }
  std::int64_t flat = 0;
  std::size_t k = 0;
  for (auto i : index) {
    if (i < 0 || i >= sh[k]) throw std::out_of_range("at(): index out of range");
    flat = flat * sh[k] + i;
    ++k;
  }
  return data()[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return s_ && s_->requires_grad; }

void Tensor::set_requires_grad(bool rg) {
  if (!s_) throw std::runtime_error("use of undefined tensor");
  s_->requires_grad = rg;
}

bool Tensor::has_grad() const { return s_ && !s_->grad.empty(); }

std::vector<double>& Tensor::grad() {
  if (!s_) throw std::runtime_error("use of undefined tensor");
  s_->ensure_grad();
  return s_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw std::runtime_error("tensor has no materialized gradient");
  return s_->grad;
}

void Tensor::zero_grad() {
  if (s_ && !s_->grad.empty()) s_->grad.assign(s_->grad.size(), 0.0);
}

void Tape::record(std::shared_ptr<Storage> out, std::function<void()> backward_fn) {
  nodes_.push_back(Node{std::move(out), std::move(backward_fn)});
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw std::runtime_error("backward on a consumed tape; reset() first");
  if (!loss.defined()) throw std::invalid_argument("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw std::invalid_argument("backward requires a scalar loss, got shape " +
                                shape_str(loss.shape()));
  }
  auto ls = loss.storage();
  bool on_tape = false;
  for (const auto& n : nodes_) {
    if (n.out == ls) {
      on_tape = true;
      break;
    }
  }
  if (!on_tape) throw std::invalid_argument("backward on a tensor not recorded on this tape");

  ls->ensure_grad();
  ls->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->grad.empty()) continue;  // no gradient flowed here
    it->fn();
  }
  consumed_ = true;
}

void Tape::reset() {
  nodes_.clear();
  consumed_ = false;
}

Tape* Tape::active() { return g_active_tape; }

Tape::Scope::Scope(Tape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
Tape::Scope::~Scope() { g_active_tape = prev_; }

bool recording_for(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void check_finite(const Storage& s, const char* op) {
  for (double v : s.value) {
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string(op) + ": non-finite value in output of shape " +
                               shape_str(s.shape));
    }
  }
}

}  // namespace branchkit::ad
