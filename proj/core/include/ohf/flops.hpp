#pragma once

#include <cstdint>

namespace ohf {

// Multiply-add counter hook. Kernels report their work to the active sink, if
// any; scopes are nested per thread, so profiled sections must run on the
// thread that installed the sink.
namespace detail {
inline std::int64_t*& madd_sink_slot() {
  thread_local std::int64_t* sink = nullptr;
  return sink;
}
}  // namespace detail

inline void count_madds(std::int64_t n) {
  if (auto* p = detail::madd_sink_slot()) *p += n;
}

// Routes kernel multiply-add counts into `target` for the scope's lifetime.
class MaddScope {
 public:
  explicit MaddScope(std::int64_t& target) : prev_(detail::madd_sink_slot()) {
    detail::madd_sink_slot() = &target;
  }
  ~MaddScope() { detail::madd_sink_slot() = prev_; }
  MaddScope(const MaddScope&) = delete;
  MaddScope& operator=(const MaddScope&) = delete;

 private:
  std::int64_t* prev_;
};

}  // namespace ohf
