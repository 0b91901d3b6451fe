#include "vipa/log.hpp"

#include <iostream>
#include <mutex>

namespace vipa {

namespace {
std::mutex g_mutex;
WarningSink g_sink;
std::atomic<std::size_t> g_count{0};
}  // namespace

void set_warning_sink(WarningSink sink) {
  std::lock_guard lock(g_mutex);
  g_sink = std::move(sink);
}

void warn(const std::string& message) {
  ++g_count;
  std::lock_guard lock(g_mutex);
  if (g_sink) {
    g_sink(message);
  } else {
    std::cerr << "warning: " << message << '\n';
  }
}

std::size_t warning_count() { return g_count.load(); }

}  // namespace vipa
