#pragma once

#include <string>

#include "gdream/error.hpp"

namespace gdream::detail {

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& text);

}  // namespace gdream::detail
