#pragma once

#include <string>
#include <vector>

namespace mmfuse::trace {

// Lightweight module-call tracing so tests can assert which fusion blocks a
// forward pass actually exercised. Off unless a Capture is live.

inline std::vector<std::string>*& sink() {
  thread_local std::vector<std::string>* s = nullptr;
  return s;
}

inline void record(const char* name) {
  if (sink()) sink()->push_back(name);
}

struct Capture {
  std::vector<std::string> events;
  Capture() { sink() = &events; }
  ~Capture() { sink() = nullptr; }
  Capture(const Capture&) = delete;
  Capture& operator=(const Capture&) = delete;

  std::size_t count(const std::string& name) const {
    std::size_t n = 0;
    for (const auto& e : events) n += (e == name);
    return n;
  }
};

}  // namespace mmfuse::trace
