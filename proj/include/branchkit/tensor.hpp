#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

namespace branchkit::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Verification mode makes every forward op assert that its output is finite
/// and enables domain checks (e.g. log of a non-positive value). Off by
/// default; tests and the `verify` command turn it on.
void set_verify_mode(bool on);
bool verify_mode();

// Multiply counter used by the MAC profiler. Only matmul- and convolution-like
// ops contribute, matching the counting convention of the analytic profiler.
void set_mac_counting(bool on);
bool mac_counting();
void add_macs(std::int64_t n);
std::int64_t mac_count();
void reset_mac_count();

struct Storage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;

  void ensure_grad();
};

/// Dense row-major tensor of doubles. Copying a Tensor copies the handle;
/// the underlying storage is shared. Values are treated as immutable once an
/// op has consumed the tensor; gradients accumulate in the shared storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double v, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);  // shape [1]
  static Tensor wrap(std::shared_ptr<Storage> s);

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const;
  std::int64_t numel() const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t extent(int axis) const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  double item() const;  // requires numel() == 1
  double at(std::initializer_list<std::int64_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool rg);
  bool has_grad() const;
  std::vector<double>& grad();            // allocates zeros on first use
  const std::vector<double>& grad() const;  // throws if never materialized
  void zero_grad();

  std::shared_ptr<Storage> storage() const { return s_; }

 private:
  explicit Tensor(std::shared_ptr<Storage> s) : s_(std::move(s)) {}
  std::shared_ptr<Storage> s_;
};

/// Reverse-mode tape. Nodes are appended in execution order, so the sequence
/// is topologically sorted by construction and one reverse sweep visits each
/// node exactly once. A tape belongs to a single execution stream.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a recorded op. `backward_fn` reads out->grad and accumulates
  // into the grads of the inputs it captured.
  void record(std::shared_ptr<Storage> out, std::function<void()> backward_fn);

  // Seeds d(loss)/d(loss) = 1 and runs one reverse sweep. The loss must be a
  // scalar recorded on this tape. A tape can run backward once; reset() makes
  // it reusable.
  void backward(const Tensor& loss);

  void reset();
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  static Tape* active();

  /// RAII activation for the current thread.
  class Scope {
   public:
    explicit Scope(Tape& tape);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Tape* prev_;
  };

 private:
  struct Node {
    std::shared_ptr<Storage> out;
    std::function<void()> fn;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// True when a tape is active and any input requires grad; op implementations
// use this to decide whether to record a node.
bool recording_for(std::initializer_list<const Tensor*> inputs);

// Verification-mode helper: throws if `s` contains NaN or Inf.
void check_finite(const Storage& s, const char* op);

}  // namespace branchkit::ad
