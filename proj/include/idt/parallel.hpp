#pragma once

#include <cstddef>
#include <exception>
#include <mutex>

namespace idt {

// Exceptions must not escape an OpenMP region. Workers park the first one
// here and the caller rethrows after the loop.
class ExceptionSlot {
 public:
  template <typename Fn>
  void run(Fn&& fn) noexcept {
    try {
      fn();
    } catch (...) {
      std::lock_guard lock(mutex_);
      if (!error_) error_ = std::current_exception();
    }
  }
  void rethrow() const {
    if (error_) std::rethrow_exception(error_);
  }

 private:
  std::mutex mutex_;
  std::exception_ptr error_;
};

template <typename Fn>
void parallel_for(std::ptrdiff_t n, Fn&& fn) {
  ExceptionSlot slot;
#pragma omp parallel for schedule(dynamic)
  for (std::ptrdiff_t i = 0; i < n; ++i) slot.run([&] { fn(i); });
  slot.rethrow();
}

}  // namespace idt
