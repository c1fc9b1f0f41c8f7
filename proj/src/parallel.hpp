#pragma once

#include <condition_variable>
#include <cstdint>
#include <exception>
#include <mutex>
#include <vector>

#include <omp.h>

namespace aoe::detail {

/// Caps the bytes held by concurrent workers. A request larger than the cap
/// is admitted once nothing else is resident.
class ResidencyBudget {
 public:
  explicit ResidencyBudget(std::uint64_t cap) : cap_(cap) {}

  void acquire(std::uint64_t bytes) {
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] { return in_use_ == 0 || in_use_ + bytes <= cap_; });
    in_use_ += bytes;
  }

  void release(std::uint64_t bytes) {
    {
      std::lock_guard lock(mu_);
      in_use_ -= bytes;
    }
    cv_.notify_all();
  }

 private:
  std::uint64_t cap_;
  std::uint64_t in_use_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
};

class Reservation {
 public:
  Reservation(ResidencyBudget& budget, std::uint64_t bytes) : budget_(budget), bytes_(bytes) { budget_.acquire(bytes_); }
  ~Reservation() { budget_.release(bytes_); }
  Reservation(const Reservation&) = delete;
  Reservation& operator=(const Reservation&) = delete;

 private:
  ResidencyBudget& budget_;
  std::uint64_t bytes_;
};

/// Runs fn(i) for i in [0, n) on a dynamic OpenMP schedule. If any calls
/// throw, the exception from the lowest index is rethrown afterwards.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(n);
  const auto count = static_cast<std::ptrdiff_t>(n);
  const int team = threads > 0 ? threads : omp_get_max_threads();
#pragma omp parallel for schedule(dynamic, 1) num_threads(team) if (n > 1 && team > 1)
  for (std::ptrdiff_t i = 0; i < count; ++i) {
    try {
      fn(static_cast<std::size_t>(i));
    } catch (...) {
      errors[static_cast<std::size_t>(i)] = std::current_exception();
    }
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace aoe::detail
