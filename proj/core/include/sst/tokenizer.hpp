#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "sst/common.hpp"
#include "sst/corpus.hpp"

namespace sst {

// Byte-pair-encoding subword vocabulary shared by the classifier, the
// generator and the evaluation language models. Words are split into UTF-8
// characters followed by a standalone end-of-word marker; merges never cross
// word boundaries and never touch the reserved special ids.
class Vocabulary {
 public:
  static constexpr const char* kWordEnd = "</w>";

  Vocabulary() = default;
  Vocabulary(Vocabulary&&) = default;
  Vocabulary& operator=(Vocabulary&&) = default;
  Vocabulary(const Vocabulary& o);
  Vocabulary& operator=(const Vocabulary& o);

  int pad_id() const { return pad_id_; }
  int unk_id() const { return unk_id_; }
  int start_id() const { return start_id_; }
  int end_id() const { return end_id_; }
  int style_id(int style) const;
  int n_styles() const { return static_cast<int>(style_ids_.size()); }
  int size() const { return static_cast<int>(id_to_token_.size()); }
  bool is_special(int id) const { return id < n_specials_; }

  const std::string& token(int id) const;
  int id_of(const std::string& token) const;  // -1 when absent
  const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

  std::vector<int> encode_word(const std::string& word) const;
  std::vector<int> encode(const Words& words) const;
  // Merges subwords back into whitespace words. Specials are dropped unless
  // `raw` is set, in which case they appear as their canonical surface forms.
  Words decode(const std::vector<int>& ids, bool raw = false) const;

  uint64_t hash() const;

  void save(const std::filesystem::path& merges_file,
            const std::filesystem::path& table_file) const;
  static Vocabulary load(const std::filesystem::path& merges_file,
                         const std::filesystem::path& table_file);

 private:
  friend Vocabulary train_bpe(const std::vector<const DatasetSplit*>&, int, int);

  int add_token(const std::string& tok);
  void finalize_specials(int n_styles);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, int> token_to_id_;
  std::vector<std::pair<std::string, std::string>> merges_;
  std::unordered_map<uint64_t, int> merge_rank_;  // hashed pair -> rank
  int n_specials_ = 0;
  int pad_id_ = 0, unk_id_ = 1, start_id_ = 2, end_id_ = 3;
  std::vector<int> style_ids_;

  // encode memoization; guarded so concurrent encode calls stay safe
  struct WordCache {
    std::shared_mutex mutex;
    std::unordered_map<std::string, std::vector<int>> map;
  };
  mutable std::unique_ptr<WordCache> cache_ = std::make_unique<WordCache>();

  static uint64_t pair_key(const std::string& a, const std::string& b);
};

// Learns merges from the corpus until the vocabulary reaches `vocab_size`
// (specials + alphabet + merges) or no pair occurs twice. Deterministic given
// corpus order: ties on pair frequency go to the pair seen first.
Vocabulary train_bpe(const std::vector<const DatasetSplit*>& corpus, int vocab_size,
                     int n_styles);

}  // namespace sst
