// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace xkws {

// Decodes UTF-8 into Unicode scalar values. Throws InvalidArgument on
// malformed input.
std::u32string utf8_decode(std::string_view text);
std::string utf8_encode(std::u32string_view text);

// Lowercases ASCII letters; other scalars pass through unchanged.
std::u32string normalize_keyword(std::string_view text);
// Number of scalar values after normalisation, spaces included.
std::size_t character_count(std::string_view text);
// Whitespace-separated token count.
std::size_t word_count(std::string_view text);

std::vector<std::string> split(std::string_view line, char sep);

// splitmix64 finaliser; used to derive independent seeds from tuples.
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

}  // namespace xkws
