#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "sst/common.hpp"

namespace sst {

struct StyledSentence {
  Words tokens;  // non-empty, whitespace-tokenized exactly as released
  int style = 0;
};

// One of {train, dev, test}; every declared style has an entry (possibly empty).
struct DatasetSplit {
  std::string name;
  std::map<int, std::vector<StyledSentence>> by_style;

  size_t count(int style) const;
  size_t total() const;
};

struct Dataset {
  std::string domain;
  std::vector<int> styles;
  DatasetSplit train, dev, test;
};

// Human references grouped by (test line index, source style).
struct ReferenceSet {
  // refs_by_style[style][line] -> one reference sentence per reference source
  std::map<int, std::vector<std::vector<Words>>> refs_by_style;
  int refs_per_item = 0;
};

struct SplitCounts {
  std::map<int, size_t> train, dev, test;
};

// Loads `<domain>.<split>.<style>` files from `root`. One sentence per line,
// pre-tokenized by whitespace; blank lines are a format error.
Dataset load_dataset(const std::filesystem::path& root, const std::string& domain,
                     const std::vector<int>& declared_styles);

// Loads `reference.<source>.<style>` files, line-aligned with the test split.
ReferenceSet load_references(const std::filesystem::path& root,
                             const std::vector<std::string>& ref_sources,
                             const DatasetSplit& test);

// Deterministic per-style sampling without replacement; original relative
// order of the surviving sentences is preserved.
DatasetSplit subsample(const DatasetSplit& split, size_t n_per_style, uint64_t seed);

// Writes the split back in the release layout; loading well-formed files and
// re-serializing them is byte-identical.
void save_split(const DatasetSplit& split, const std::filesystem::path& root,
                const std::string& domain);

SplitCounts dataset_counts(const Dataset& ds);

// Published Table-1 statistics keyed by domain ("yelp", "amazon"); used to
// validate a real dataset tree when one is available.
const SplitCounts* published_counts(const std::string& domain);
void validate_counts(const Dataset& ds);

}  // namespace sst
