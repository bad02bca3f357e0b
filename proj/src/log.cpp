#include "gdream/log.hpp"

#include <spdlog/sinks/stdout_color_sinks.h>

#include <cstdlib>
#include <memory>

namespace gdream {

spdlog::logger& log() {
  static std::shared_ptr<spdlog::logger> logger = [] {
    auto made = spdlog::stderr_color_mt("gdream");
    made->set_pattern("[%H:%M:%S] [%^%l%$] %v");
    const char* env = std::getenv("GDREAM_LOG");
    made->set_level(env ? spdlog::level::from_str(env) : spdlog::level::warn);
    return made;
  }();
  return *logger;
}

}  // namespace gdream
