#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <string>

namespace vipa {

/// Receives non-fatal diagnostics. Default writes "warning: ..." to stderr.
using WarningSink = std::function<void(const std::string&)>;

void set_warning_sink(WarningSink sink);
void warn(const std::string& message);
/// Total warnings emitted by this process.
std::size_t warning_count();

}  // namespace vipa
