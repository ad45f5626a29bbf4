#pragma once

#include <iostream>
#include <string>
#include <utility>
#include <vector>

namespace dsba {

namespace detail {
inline std::vector<std::vector<std::string>*>& warning_sinks() {
  thread_local std::vector<std::vector<std::string>*> sinks;
  return sinks;
}
inline bool& warnings_quiet() {
  thread_local bool quiet = false;
  return quiet;
}
}  // namespace detail

/// Reports a recoverable anomaly. Goes to stderr unless a capture is active.
inline void warn(std::string message) {
  auto& sinks = detail::warning_sinks();
  if (!sinks.empty()) {
    sinks.back()->push_back(std::move(message));
    return;
  }
  if (!detail::warnings_quiet()) std::cerr << "warning: " << message << '\n';
}

/// Collects warnings raised on this thread for its lifetime.
class WarningCapture {
 public:
  WarningCapture() { detail::warning_sinks().push_back(&messages_); }
  ~WarningCapture() { detail::warning_sinks().pop_back(); }
  WarningCapture(const WarningCapture&) = delete;
  WarningCapture& operator=(const WarningCapture&) = delete;

  const std::vector<std::string>& messages() const { return messages_; }
  bool contains(const std::string& needle) const {
    for (const auto& m : messages_)
      if (m.find(needle) != std::string::npos) return true;
    return false;
  }

 private:
  std::vector<std::string> messages_;
};

}  // namespace dsba
