#pragma once

#include <string>
#include <string_view>

namespace s2h {

// Write-temp-then-rename so readers never observe a partial file.
void write_file_atomic(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

}  // namespace s2h
