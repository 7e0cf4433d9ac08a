#include "sst/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

namespace sst {

namespace fs = std::filesystem;

size_t DatasetSplit::count(int style) const {
  auto it = by_style.find(style);
  return it == by_style.end() ? 0 : it->second.size();
}

size_t DatasetSplit::total() const {
  size_t n = 0;
  for (const auto& [style, sents] : by_style) n += sents.size();
  return n;
}

namespace {

std::vector<Words> read_lines_tokenized(const fs::path& path, bool reject_blank) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path.string());
  std::vector<Words> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    Words tokens = split_whitespace(line);
    if (tokens.empty()) {
      if (reject_blank)
        fail(ErrorKind::format, path.string() + ": blank line " + std::to_string(lineno));
      continue;
    }
    out.push_back(std::move(tokens));
  }
  return out;
}

DatasetSplit load_split(const fs::path& root, const std::string& domain,
                        const std::string& split, const std::vector<int>& styles) {
  DatasetSplit out;
  out.name = split;
  for (int s : styles) {
    fs::path p = root / (domain + "." + split + "." + std::to_string(s));
    std::vector<Words> lines = read_lines_tokenized(p, /*reject_blank=*/true);
    auto& dst = out.by_style[s];
    dst.reserve(lines.size());
    for (auto& tokens : lines) dst.push_back({std::move(tokens), s});
  }
  return out;
}

}  // namespace

Dataset load_dataset(const fs::path& root, const std::string& domain,
                     const std::vector<int>& declared_styles) {
  if (declared_styles.size() < 2)
    fail(ErrorKind::config, "declared style set must have size >= 2");
  Dataset ds;
  ds.domain = domain;
  ds.styles = declared_styles;
  ds.train = load_split(root, domain, "train", declared_styles);
  ds.dev = load_split(root, domain, "dev", declared_styles);
  ds.test = load_split(root, domain, "test", declared_styles);
  return ds;
}

ReferenceSet load_references(const fs::path& root,
                             const std::vector<std::string>& ref_sources,
                             const DatasetSplit& test) {
  if (ref_sources.empty()) fail(ErrorKind::config, "no reference sources given");
  ReferenceSet refs;
  refs.refs_per_item = static_cast<int>(ref_sources.size());
  for (const auto& [style, sents] : test.by_style) {
    auto& per_line = refs.refs_by_style[style];
    per_line.assign(sents.size(), {});
    for (const std::string& source : ref_sources) {
      fs::path p = root / ("reference." + source + "." + std::to_string(style));
      std::vector<Words> lines = read_lines_tokenized(p, /*reject_blank=*/true);
      if (lines.size() != sents.size()) {
        std::ostringstream msg;
        msg << p.string() << ": " << lines.size() << " reference lines vs "
            << sents.size() << " test lines";
        fail(ErrorKind::alignment, msg.str());
      }
      for (size_t i = 0; i < lines.size(); ++i) per_line[i].push_back(lines[i]);
    }
  }
  return refs;
}

DatasetSplit subsample(const DatasetSplit& split, size_t n_per_style, uint64_t seed) {
  DatasetSplit out;
  out.name = split.name;
  for (const auto& [style, sents] : split.by_style) {
    if (n_per_style > sents.size()) {
      std::ostringstream msg;
      msg << "subsample: requested " << n_per_style << " per style but style "
          << style << " has only " << sents.size();
      fail(ErrorKind::size, msg.str());
    }
    // Partial Fisher-Yates over indices; the stream depends only on
    // (seed, style), so the result is a function of (split, n, seed).
    std::mt19937_64 rng(seed ^ fnv1a64(std::to_string(style), 0x9e3779b97f4a7c15ull));
    std::vector<size_t> idx(sents.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (size_t i = 0; i < n_per_style; ++i) {
      std::uniform_int_distribution<size_t> pick(i, idx.size() - 1);
      std::swap(idx[i], idx[pick(rng)]);
    }
    idx.resize(n_per_style);
    std::sort(idx.begin(), idx.end());
    auto& dst = out.by_style[style];
    dst.reserve(n_per_style);
    for (size_t i : idx) dst.push_back(sents[i]);
  }
  return out;
}

void save_split(const DatasetSplit& split, const fs::path& root, const std::string& domain) {
  fs::create_directories(root);
  for (const auto& [style, sents] : split.by_style) {
    fs::path p = root / (domain + "." + split.name + "." + std::to_string(style));
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(ErrorKind::io, "cannot write " + p.string());
    for (const auto& s : sents) out << join(s.tokens) << '\n';
  }
}

SplitCounts dataset_counts(const Dataset& ds) {
  SplitCounts c;
  for (int s : ds.styles) {
    c.train[s] = ds.train.count(s);
    c.dev[s] = ds.dev.count(s);
    c.test[s] = ds.test.count(s);
  }
  return c;
}

const SplitCounts* published_counts(const std::string& domain) {
  // style 1 = positive, style 0 = negative in the released layout
  static const SplitCounts yelp{{{1, 270000}, {0, 180000}},
                                {{1, 2000}, {0, 2000}},
                                {{1, 500}, {0, 500}}};
  static const SplitCounts amazon{{{1, 277000}, {0, 278000}},
                                  {{1, 985}, {0, 1015}},
                                  {{1, 500}, {0, 500}}};
  if (domain == "yelp") return &yelp;
  if (domain == "amazon") return &amazon;
  return nullptr;
}

void validate_counts(const Dataset& ds) {
  const SplitCounts* want = published_counts(ds.domain);
  if (!want) fail(ErrorKind::config, "no published statistics for domain " + ds.domain);
  SplitCounts got = dataset_counts(ds);
  auto check = [&](const char* split, const std::map<int, size_t>& g,
                   const std::map<int, size_t>& w) {
    for (const auto& [style, n] : w) {
      auto it = g.find(style);
      size_t have = it == g.end() ? 0 : it->second;
      if (have != n) {
        std::ostringstream msg;
        msg << ds.domain << "." << split << "." << style << ": expected " << n
            << " sentences, found " << have;
        fail(ErrorKind::format, msg.str());
      }
    }
  };
  check("train", got.train, want->train);
  check("dev", got.dev, want->dev);
  check("test", got.test, want->test);
}

}  // namespace sst
