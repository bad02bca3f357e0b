#pragma once

#include <spdlog/spdlog.h>

namespace gdream {

/// Shared logger writing to stderr. The level comes from GDREAM_LOG
/// (trace, debug, info, warn, error, off); default is warn.
spdlog::logger& log();

}  // namespace gdream
