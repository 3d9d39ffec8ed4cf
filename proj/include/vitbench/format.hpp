#pragma once

#include <string>
#include <string_view>
#include <vector>

namespace vitbench {

// Shortest decimal text that parses back to exactly the same double.
std::string format_double(double v);

// Strict parse of the whole string; throws Error(Invalid) naming `what`.
double parse_double(std::string_view text, std::string_view what);
long long parse_int(std::string_view text, std::string_view what);

std::vector<std::string> split(std::string_view text, char sep);
std::string_view trim(std::string_view s);

}  // namespace vitbench
