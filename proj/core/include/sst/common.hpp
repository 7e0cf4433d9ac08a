#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sst {

// A sentence is a list of whitespace-delimited surface tokens.
using Words = std::vector<std::string>;

enum class ErrorKind {
  io,         // missing/unreadable file
  format,     // malformed file contents
  config,     // invalid configuration or incompatible artifacts
  input,      // invalid argument to an operation
  alignment,  // line-count mismatch between aligned files
  size,       // requested size exceeds what is available
  range,      // index/id out of range
  domain,     // value outside the mathematical domain of an operation
  train,      // training failure (divergence, degenerate corpus)
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(message), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

const char* error_kind_name(ErrorKind kind);

// FNV-1a, used to fingerprint vocabularies, configs and checkpoints.
uint64_t fnv1a64(std::string_view data, uint64_t seed = 0xcbf29ce484222325ull);

std::vector<std::string> split_whitespace(std::string_view line);
std::string join(const Words& words, std::string_view sep = " ");

// Splits a UTF-8 string into codepoint-sized chunks. Invalid bytes come back
// as single-byte chunks rather than failing; the tokenizer maps them to unk.
std::vector<std::string> utf8_chunks(std::string_view word);

}  // namespace sst
