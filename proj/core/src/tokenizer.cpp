#include "sst/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <queue>
#include <sstream>

namespace sst {

namespace {

struct WordEntry {
  std::vector<int> symbols;  // indices into the symbol string table
  int64_t freq = 0;
};

struct PairStat {
  int64_t count = 0;
  uint64_t first_seen = 0;             // for deterministic tie-breaking
  std::unordered_map<int, int> words;  // word index -> occurrences in that word
};

struct HeapItem {
  int64_t count;
  uint64_t first_seen;
  uint64_t key;
  bool operator<(const HeapItem& o) const {
    if (count != o.count) return count < o.count;
    return first_seen > o.first_seen;  // smaller first_seen wins
  }
};

uint64_t sym_pair_key(int a, int b) {
  return (static_cast<uint64_t>(static_cast<uint32_t>(a)) << 32) |
         static_cast<uint32_t>(b);
}

}  // namespace

Vocabulary::Vocabulary(const Vocabulary& o)
    : id_to_token_(o.id_to_token_),
      token_to_id_(o.token_to_id_),
      merges_(o.merges_),
      merge_rank_(o.merge_rank_),
      n_specials_(o.n_specials_),
      pad_id_(o.pad_id_),
      unk_id_(o.unk_id_),
      start_id_(o.start_id_),
      end_id_(o.end_id_),
      style_ids_(o.style_ids_),
      cache_(std::make_unique<WordCache>()) {}

Vocabulary& Vocabulary::operator=(const Vocabulary& o) {
  if (this == &o) return *this;
  *this = Vocabulary(o);
  return *this;
}

uint64_t Vocabulary::pair_key(const std::string& a, const std::string& b) {
  uint64_t h = fnv1a64(a);
  h = fnv1a64("\x1f", h);
  return fnv1a64(b, h);
}

int Vocabulary::add_token(const std::string& tok) {
  auto it = token_to_id_.find(tok);
  if (it != token_to_id_.end()) return it->second;
  int id = static_cast<int>(id_to_token_.size());
  id_to_token_.push_back(tok);
  token_to_id_.emplace(tok, id);
  return id;
}

void Vocabulary::finalize_specials(int n_styles) {
  pad_id_ = add_token("<pad>");
  unk_id_ = add_token("<unk>");
  start_id_ = add_token("<s>");
  end_id_ = add_token("</s>");
  style_ids_.clear();
  for (int s = 0; s < n_styles; ++s)
    style_ids_.push_back(add_token("<style_" + std::to_string(s) + ">"));
  n_specials_ = static_cast<int>(id_to_token_.size());
}

int Vocabulary::style_id(int style) const {
  if (style < 0 || style >= static_cast<int>(style_ids_.size()))
    fail(ErrorKind::input, "unknown style id " + std::to_string(style));
  return style_ids_[style];
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || id >= size())
    fail(ErrorKind::range, "token id " + std::to_string(id) + " out of range (vocab size " +
                               std::to_string(size()) + ")");
  return id_to_token_[id];
}

int Vocabulary::id_of(const std::string& token) const {
  auto it = token_to_id_.find(token);
  return it == token_to_id_.end() ? -1 : it->second;
}

Vocabulary train_bpe(const std::vector<const DatasetSplit*>& corpus, int vocab_size,
                     int n_styles) {
  Vocabulary vocab;
  vocab.finalize_specials(n_styles);

  // Collect word-type frequencies and the character alphabet in corpus order.
  std::vector<std::string> symtab;
  std::unordered_map<std::string, int> sym_id;
  auto intern = [&](const std::string& s) {
    auto it = sym_id.find(s);
    if (it != sym_id.end()) return it->second;
    int id = static_cast<int>(symtab.size());
    symtab.push_back(s);
    sym_id.emplace(s, id);
    return id;
  };
  int marker = intern(Vocabulary::kWordEnd);

  std::vector<WordEntry> words;
  std::unordered_map<std::string, int> word_index;
  bool any_sentence = false;
  for (const DatasetSplit* split : corpus) {
    for (const auto& [style, sents] : split->by_style) {
      for (const StyledSentence& sent : sents) {
        any_sentence = true;
        for (const std::string& w : sent.tokens) {
          auto it = word_index.find(w);
          if (it != word_index.end()) {
            words[it->second].freq += 1;
            continue;
          }
          WordEntry entry;
          for (const std::string& ch : utf8_chunks(w)) entry.symbols.push_back(intern(ch));
          entry.symbols.push_back(marker);
          entry.freq = 1;
          word_index.emplace(w, static_cast<int>(words.size()));
          words.push_back(std::move(entry));
        }
      }
    }
  }
  if (!any_sentence) fail(ErrorKind::input, "train_bpe: empty corpus");

  int base = vocab.size() + static_cast<int>(symtab.size());
  if (vocab_size <= base) {
    std::ostringstream msg;
    msg << "vocab_size " << vocab_size << " must exceed specials + alphabet = " << base;
    fail(ErrorKind::config, msg.str());
  }
  for (const std::string& s : symtab) vocab.add_token(s);

  // Pair statistics with an occurrence index, plus a lazy max-heap keyed by
  // (count, first-seen order).
  std::unordered_map<uint64_t, PairStat> stats;
  std::priority_queue<HeapItem> heap;
  uint64_t seen_counter = 0;

  auto bump = [&](uint64_t key, int word, int delta) {
    PairStat& st = stats[key];
    if (st.count == 0 && delta > 0 && st.first_seen == 0) st.first_seen = ++seen_counter;
    st.count += delta;
    int& occ = st.words[word];
    occ += delta > 0 ? 1 : -1;
    if (occ <= 0) st.words.erase(word);
  };

  for (size_t wi = 0; wi < words.size(); ++wi) {
    const WordEntry& w = words[wi];
    for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
      uint64_t key = sym_pair_key(w.symbols[i], w.symbols[i + 1]);
      PairStat& st = stats[key];
      if (st.count == 0 && st.first_seen == 0) st.first_seen = ++seen_counter;
      st.count += w.freq;
      st.words[static_cast<int>(wi)] += 1;
    }
  }
  for (const auto& [key, st] : stats) heap.push({st.count, st.first_seen, key});

  int budget = vocab_size - vocab.size();
  while (budget > 0) {
    uint64_t key = 0;
    int64_t count = 0;
    while (!heap.empty()) {
      HeapItem top = heap.top();
      auto it = stats.find(top.key);
      if (it == stats.end() || it->second.count != top.count) {
        heap.pop();  // stale entry
        continue;
      }
      key = top.key;
      count = top.count;
      break;
    }
    if (heap.empty() || count < 2) break;

    int left = static_cast<int>(key >> 32);
    int right = static_cast<int>(key & 0xffffffffull);
    std::string merged_str = symtab[left] + symtab[right];
    int merged = intern(merged_str);
    vocab.merges_.emplace_back(symtab[left], symtab[right]);
    vocab.merge_rank_[Vocabulary::pair_key(symtab[left], symtab[right])] =
        static_cast<int>(vocab.merges_.size()) - 1;
    vocab.add_token(merged_str);
    --budget;

    // Rewrite every word containing the pair; update neighbour pair counts.
    std::vector<int> affected;
    affected.reserve(stats[key].words.size());
    for (const auto& [wi, n] : stats[key].words) affected.push_back(wi);
    std::sort(affected.begin(), affected.end());
    for (int wi : affected) {
      WordEntry& w = words[wi];
      const std::vector<int>& old = w.symbols;
      std::vector<int> fresh;
      fresh.reserve(old.size());
      for (size_t i = 0; i < old.size();) {
        if (i + 1 < old.size() && old[i] == left && old[i + 1] == right) {
          // retire old neighbour pairs, add new ones
          if (!fresh.empty()) {
            bump(sym_pair_key(fresh.back(), left), wi, -static_cast<int>(w.freq));
            bump(sym_pair_key(fresh.back(), merged), wi, static_cast<int>(w.freq));
          }
          bump(sym_pair_key(left, right), wi, -static_cast<int>(w.freq));
          if (i + 2 < old.size()) {
            bump(sym_pair_key(right, old[i + 2]), wi, -static_cast<int>(w.freq));
            bump(sym_pair_key(merged, old[i + 2]), wi, static_cast<int>(w.freq));
          }
          fresh.push_back(merged);
          i += 2;
        } else {
          fresh.push_back(old[i]);
          ++i;
        }
      }
      w.symbols = std::move(fresh);
    }
    stats.erase(key);

    // Push refreshed heap entries for pairs whose counts changed. Re-pushing
    // everything touched is wasteful but simple; stale items are skipped.
    for (int wi : affected) {
      const WordEntry& w = words[wi];
      for (size_t i = 0; i + 1 < w.symbols.size(); ++i) {
        uint64_t k = sym_pair_key(w.symbols[i], w.symbols[i + 1]);
        auto it = stats.find(k);
        if (it != stats.end() && it->second.count >= 2)
          heap.push({it->second.count, it->second.first_seen, k});
      }
    }
  }
  return vocab;
}

std::vector<int> Vocabulary::encode_word(const std::string& word) const {
  {
    std::shared_lock lock(cache_->mutex);
    auto cached = cache_->map.find(word);
    if (cached != cache_->map.end()) return cached->second;
  }

  std::vector<std::string> symbols = utf8_chunks(word);
  symbols.push_back(kWordEnd);
  // Apply merges in rank order: repeatedly merge the lowest-rank adjacent pair.
  while (symbols.size() > 1) {
    int best_rank = -1;
    size_t best_pos = 0;
    for (size_t i = 0; i + 1 < symbols.size(); ++i) {
      auto it = merge_rank_.find(pair_key(symbols[i], symbols[i + 1]));
      if (it == merge_rank_.end()) continue;
      if (best_rank < 0 || it->second < best_rank) {
        best_rank = it->second;
        best_pos = i;
      }
    }
    if (best_rank < 0) break;
    const auto& [a, b] = merges_[best_rank];
    std::vector<std::string> fresh;
    fresh.reserve(symbols.size());
    for (size_t i = 0; i < symbols.size();) {
      if (i + 1 < symbols.size() && symbols[i] == a && symbols[i + 1] == b) {
        fresh.push_back(a + b);
        i += 2;
      } else {
        fresh.push_back(symbols[i]);
        ++i;
      }
    }
    symbols = std::move(fresh);
  }

  std::vector<int> ids;
  ids.reserve(symbols.size());
  for (const std::string& s : symbols) {
    auto it = token_to_id_.find(s);
    ids.push_back(it == token_to_id_.end() ? unk_id_ : it->second);
  }
  {
    std::unique_lock lock(cache_->mutex);
    cache_->map.emplace(word, ids);
  }
  return ids;
}

std::vector<int> Vocabulary::encode(const Words& words) const {
  std::vector<int> ids;
  for (const std::string& w : words) {
    std::vector<int> piece = encode_word(w);
    ids.insert(ids.end(), piece.begin(), piece.end());
  }
  return ids;
}

Words Vocabulary::decode(const std::vector<int>& ids, bool raw) const {
  Words out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      out.push_back(word);
      word.clear();
    }
  };
  const std::string marker = kWordEnd;
  for (int id : ids) {
    const std::string& tok = token(id);  // throws range error for invalid ids
    if (is_special(id)) {
      if (raw) {
        flush();
        out.push_back(tok);
      }
      continue;
    }
    if (tok.size() >= marker.size() &&
        tok.compare(tok.size() - marker.size(), marker.size(), marker) == 0) {
      word += tok.substr(0, tok.size() - marker.size());
      flush();
    } else {
      word += tok;
    }
  }
  flush();
  return out;
}

uint64_t Vocabulary::hash() const {
  uint64_t h = fnv1a64("sst-vocab-v1");
  for (const auto& t : id_to_token_) {
    h = fnv1a64(t, h);
    h = fnv1a64("\n", h);
  }
  for (const auto& [a, b] : merges_) {
    h = fnv1a64(a, h);
    h = fnv1a64(" ", h);
    h = fnv1a64(b, h);
    h = fnv1a64("\n", h);
  }
  return h;
}

void Vocabulary::save(const std::filesystem::path& merges_file,
                      const std::filesystem::path& table_file) const {
  std::ofstream mf(merges_file, std::ios::binary);
  if (!mf) fail(ErrorKind::io, "cannot write " + merges_file.string());
  mf << "#sst-bpe-merges v1\n";
  for (const auto& [a, b] : merges_) mf << a << ' ' << b << '\n';

  std::ofstream tf(table_file, std::ios::binary);
  if (!tf) fail(ErrorKind::io, "cannot write " + table_file.string());
  tf << "#sst-bpe-table v1 specials=" << n_specials_ << " styles=" << style_ids_.size()
     << '\n';
  for (const auto& t : id_to_token_) tf << t << '\n';
}

Vocabulary Vocabulary::load(const std::filesystem::path& merges_file,
                            const std::filesystem::path& table_file) {
  std::ifstream tf(table_file);
  if (!tf) fail(ErrorKind::io, "cannot open " + table_file.string());
  std::string header;
  std::getline(tf, header);
  int n_specials = 0;
  size_t n_styles = 0;
  {
    std::istringstream hs(header);
    std::string magic, kv;
    hs >> magic >> kv;
    if (magic != "#sst-bpe-table") fail(ErrorKind::format, table_file.string() + ": bad header");
    while (hs >> kv) {
      auto eq = kv.find('=');
      if (eq == std::string::npos) continue;
      std::string k = kv.substr(0, eq), v = kv.substr(eq + 1);
      if (k == "specials") n_specials = std::stoi(v);
      if (k == "styles") n_styles = static_cast<size_t>(std::stoul(v));
    }
  }
  Vocabulary vocab;
  std::string line;
  while (std::getline(tf, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    vocab.add_token(line);
  }
  vocab.n_specials_ = n_specials;
  vocab.pad_id_ = vocab.id_of("<pad>");
  vocab.unk_id_ = vocab.id_of("<unk>");
  vocab.start_id_ = vocab.id_of("<s>");
  vocab.end_id_ = vocab.id_of("</s>");
  for (size_t s = 0; s < n_styles; ++s) {
    int id = vocab.id_of("<style_" + std::to_string(s) + ">");
    if (id < 0) fail(ErrorKind::format, table_file.string() + ": missing style token");
    vocab.style_ids_.push_back(id);
  }
  if (vocab.pad_id_ < 0 || vocab.unk_id_ < 0 || vocab.start_id_ < 0 || vocab.end_id_ < 0)
    fail(ErrorKind::format, table_file.string() + ": missing special tokens");

  std::ifstream mf(merges_file);
  if (!mf) fail(ErrorKind::io, "cannot open " + merges_file.string());
  std::getline(mf, header);
  if (header.rfind("#sst-bpe-merges", 0) != 0)
    fail(ErrorKind::format, merges_file.string() + ": bad header");
  while (std::getline(mf, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto sp = line.find(' ');
    if (sp == std::string::npos) fail(ErrorKind::format, merges_file.string() + ": bad merge line");
    std::string a = line.substr(0, sp), b = line.substr(sp + 1);
    vocab.merge_rank_[pair_key(a, b)] = static_cast<int>(vocab.merges_.size());
    vocab.merges_.emplace_back(std::move(a), std::move(b));
  }
  return vocab;
}

}  // namespace sst
