#include "stagelm/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "stagelm/error.hpp"

namespace stagelm::tok {
namespace {

constexpr std::string_view kModule = "tokenizer";
constexpr std::string_view kSpacesPrefix = "<|spaces:";
constexpr std::string_view kTabsPrefix = "<|tabs:";

[[noreturn]] void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(kModule), msg);
}

std::uint64_t pair_key(TokenId left, TokenId right) {
  return (static_cast<std::uint64_t>(left) << 32) | right;
}

std::optional<int> parse_run_name(std::string_view name, std::string_view prefix) {
  if (!name.starts_with(prefix) || !name.ends_with("|>")) return std::nullopt;
  std::string_view digits = name.substr(prefix.size(), name.size() - prefix.size() - 2);
  if (digits.empty() || digits.size() > 4) return std::nullopt;
  int n = 0;
  for (char c : digits) {
    if (c < '0' || c > '9') return std::nullopt;
    n = n * 10 + (c - '0');
  }
  return n;
}

enum class CharClass { kLetter, kDigit, kSpace, kOtherSpace, kPunct };

CharClass classify(unsigned char c) {
  if ((c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || c == '_' || c >= 0x80) {
    return CharClass::kLetter;
  }
  if (c >= '0' && c <= '9') return CharClass::kDigit;
  if (c == ' ') return CharClass::kSpace;
  if (c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f') return CharClass::kOtherSpace;
  return CharClass::kPunct;
}

bool is_ws(CharClass c) { return c == CharClass::kSpace || c == CharClass::kOtherSpace; }

// One unit of the special pre-pass: either a special id or a stretch of
// ordinary text.
struct Piece {
  std::optional<TokenId> special;
  std::string_view text;
};

std::size_t run_length(std::string_view text, std::size_t pos, char c) {
  std::size_t n = 0;
  while (pos + n < text.size() && text[pos + n] == c) ++n;
  return n;
}

// Splits a run of n identical characters into the fewest available run
// tokens covering the longest coverable prefix. Lengths are returned longest
// first; any uncovered remainder stays ordinary text.
std::vector<std::pair<std::size_t, TokenId>> plan_run(const std::vector<std::optional<TokenId>>& runs,
                                                      std::size_t n) {
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> cost(n + 1, kNone), choice(n + 1, 0);
  cost[0] = 0;
  for (std::size_t m = 2; m <= n; ++m) {
    for (std::size_t len = std::min(m, runs.empty() ? 0 : runs.size() - 1); len >= 2; --len) {
      if (!runs[len] || cost[m - len] == kNone) continue;
      if (cost[m - len] + 1 < cost[m]) {
        cost[m] = cost[m - len] + 1;
        choice[m] = len;
      }
    }
  }
  std::size_t m = n;
  while (m >= 2 && cost[m] == kNone) --m;
  std::vector<std::pair<std::size_t, TokenId>> out;
  while (m >= 2 && cost[m] != kNone) {
    out.emplace_back(choice[m], *runs[choice[m]]);
    m -= choice[m];
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  return out;
}

std::vector<Piece> split_specials(const detail::SpecialTable& table, std::string_view text,
                                  bool allow_special) {
  std::vector<Piece> pieces;
  std::size_t plain_start = 0;
  std::size_t i = 0;
  auto flush_plain = [&](std::size_t end) {
    if (end > plain_start) pieces.push_back({std::nullopt, text.substr(plain_start, end - plain_start)});
  };
  while (i < text.size()) {
    if (allow_special) {
      bool matched = false;
      for (const auto& [literal, id] : table.gated) {
        if (text.compare(i, literal.size(), literal) == 0) {
          flush_plain(i);
          pieces.push_back({id, text.substr(i, literal.size())});
          i += literal.size();
          plain_start = i;
          matched = true;
          break;
        }
      }
      if (matched) continue;
    }
    const char c = text[i];
    if (c == ' ' || c == '\t') {
      const auto& runs = c == ' ' ? table.space_runs : table.tab_runs;
      const std::size_t n = run_length(text, i, c);
      const auto plan = n >= 2 ? plan_run(runs, n) : decltype(plan_run(runs, n)){};
      if (!plan.empty()) {
        flush_plain(i);
        const std::size_t end = i + n;
        for (const auto& [len, id] : plan) {
          pieces.push_back({id, text.substr(i, len)});
          i += len;
        }
        plain_start = i;
        i = end;
        continue;
      }
      i += std::max<std::size_t>(n, 1);
      continue;
    }
    ++i;
  }
  flush_plain(text.size());
  return pieces;
}

std::vector<TokenId> bpe_chunk(const Vocab& v, std::string_view chunk) {
  std::vector<TokenId> ids;
  ids.reserve(chunk.size());
  for (unsigned char c : chunk) ids.push_back(c);
  while (ids.size() >= 2) {
    TokenId best = std::numeric_limits<TokenId>::max();
    for (std::size_t j = 0; j + 1 < ids.size(); ++j) {
      if (auto m = v.merged_id(ids[j], ids[j + 1]); m && *m < best) best = *m;
    }
    if (best == std::numeric_limits<TokenId>::max()) break;
    const Merge& rule = v.merges()[best - kByteAlphabet];
    std::vector<TokenId> next;
    next.reserve(ids.size());
    for (std::size_t j = 0; j < ids.size(); ++j) {
      if (j + 1 < ids.size() && ids[j] == rule.left && ids[j + 1] == rule.right) {
        next.push_back(best);
        ++j;
      } else {
        next.push_back(ids[j]);
      }
    }
    ids = std::move(next);
  }
  return ids;
}

}  // namespace

std::string space_run_name(int n) { return std::string(kSpacesPrefix) + std::to_string(n) + "|>"; }
std::string tab_run_name(int n) { return std::string(kTabsPrefix) + std::to_string(n) + "|>"; }

SpecialSpec special_from_name(std::string_view name) {
  if (name.empty()) fail(ErrorCode::kInvalidArgument, "special token name is empty");
  if (auto n = parse_run_name(name, kSpacesPrefix)) {
    if (*n < 2) fail(ErrorCode::kInvalidArgument, "space run shorter than 2: " + std::string(name));
    return {std::string(name), std::string(static_cast<std::size_t>(*n), ' '), false};
  }
  if (auto n = parse_run_name(name, kTabsPrefix)) {
    if (*n < 2) fail(ErrorCode::kInvalidArgument, "tab run shorter than 2: " + std::string(name));
    return {std::string(name), std::string(static_cast<std::size_t>(*n), '\t'), false};
  }
  return {std::string(name), std::string(name), true};
}

std::vector<SpecialSpec> default_specials(int max_run) {
  std::vector<SpecialSpec> out;
  out.push_back(special_from_name(kEndOfText));
  for (int n = 2; n <= max_run; ++n) out.push_back(special_from_name(space_run_name(n)));
  for (int n = 2; n <= max_run; ++n) out.push_back(special_from_name(tab_run_name(n)));
  return out;
}

detail::SpecialTable::SpecialTable(std::span<const SpecialSpec> specials, TokenId first_id) {
  TokenId id = first_id;
  for (const auto& s : specials) {
    const bool space_run = !s.gated && s.literal.find_first_not_of(' ') == std::string::npos;
    const bool tab_run = !s.gated && s.literal.find_first_not_of('\t') == std::string::npos;
    if (space_run || tab_run) {
      auto& runs = space_run ? space_runs : tab_runs;
      if (runs.size() <= s.literal.size()) runs.resize(s.literal.size() + 1);
      runs[s.literal.size()] = id;
    } else {
      gated.emplace_back(s.literal, id);
    }
    ++id;
  }
  std::stable_sort(gated.begin(), gated.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
}

Vocab::Vocab(std::vector<Merge> merges, std::vector<SpecialSpec> specials)
    : merges_(std::move(merges)), specials_(std::move(specials)) {
  tokens_.reserve(kByteAlphabet + merges_.size() + specials_.size());
  for (std::size_t b = 0; b < kByteAlphabet; ++b) tokens_.emplace_back(1, static_cast<char>(b));
  for (const auto& m : merges_) {
    const auto next = static_cast<TokenId>(tokens_.size());
    if (m.left >= next || m.right >= next) {
      fail(ErrorCode::kParse, "merge references id not yet defined: " + std::to_string(m.left) +
                                  " " + std::to_string(m.right));
    }
    tokens_.push_back(tokens_[m.left] + tokens_[m.right]);
    merge_lookup_.emplace(pair_key(m.left, m.right), next);
  }
  first_special_ = static_cast<TokenId>(tokens_.size());
  for (const auto& s : specials_) {
    const auto id = static_cast<TokenId>(tokens_.size());
    if (!special_by_name_.emplace(s.name, id).second) {
      fail(ErrorCode::kInvalidArgument, "duplicate special token " + s.name);
    }
    tokens_.push_back(s.literal);
  }
  for (TokenId id = 0; id < first_special_; ++id) token_to_id_.emplace(tokens_[id], id);
  table_ = detail::SpecialTable(specials_, first_special_);
}

std::optional<TokenId> Vocab::special_id(std::string_view name) const {
  auto it = special_by_name_.find(std::string(name));
  if (it == special_by_name_.end()) return std::nullopt;
  return it->second;
}

TokenId Vocab::eot_id() const {
  auto id = special_id(kEndOfText);
  if (!id) fail(ErrorCode::kInvalidArgument, "vocabulary has no <|endoftext|> token");
  return *id;
}

const std::string& Vocab::token_bytes(TokenId id) const {
  if (id >= tokens_.size()) fail(ErrorCode::kUnknownTokenId, "unknown token id " + std::to_string(id));
  return tokens_[id];
}

std::optional<TokenId> Vocab::id_of(std::string_view token_string) const {
  auto it = token_to_id_.find(std::string(token_string));
  if (it == token_to_id_.end()) return std::nullopt;
  return it->second;
}

std::optional<TokenId> Vocab::merged_id(TokenId left, TokenId right) const {
  auto it = merge_lookup_.find(pair_key(left, right));
  if (it == merge_lookup_.end()) return std::nullopt;
  return it->second;
}

void Vocab::save(std::ostream& out) const {
  out << "bpevocab v1 " << size() << '\n';
  for (const auto& m : merges_) out << m.left << ' ' << m.right << '\n';
  out << "#specials\n";
  for (const auto& s : specials_) out << s.name << '\t' << *special_id(s.name) << '\n';
}

Vocab Vocab::load(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::kParse, "empty vocabulary file");
  std::istringstream header(line);
  std::string magic, version;
  std::size_t declared = 0;
  if (!(header >> magic >> version >> declared) || magic != "bpevocab") {
    fail(ErrorCode::kBadMagic, "not a bpevocab file");
  }
  if (version != "v1") fail(ErrorCode::kVersionMismatch, "unsupported bpevocab version " + version);

  std::vector<Merge> merges;
  std::vector<SpecialSpec> specials;
  std::vector<TokenId> special_ids;
  bool in_specials = false;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!in_specials) {
      if (line == "#specials") {
        in_specials = true;
        continue;
      }
      std::istringstream ls(line);
      std::uint64_t l = 0, r = 0;
      if (!(ls >> l >> r)) fail(ErrorCode::kParse, "bad merge on line " + std::to_string(line_no));
      merges.push_back({static_cast<TokenId>(l), static_cast<TokenId>(r)});
    } else {
      auto tab = line.rfind('\t');
      if (tab == std::string::npos) fail(ErrorCode::kParse, "bad special on line " + std::to_string(line_no));
      specials.push_back(special_from_name(line.substr(0, tab)));
      special_ids.push_back(static_cast<TokenId>(std::stoul(line.substr(tab + 1))));
    }
  }
  Vocab v(std::move(merges), std::move(specials));
  for (std::size_t i = 0; i < special_ids.size(); ++i) {
    if (special_ids[i] != v.first_special_ + i) {
      fail(ErrorCode::kParse, "special ids are not dense above the merges");
    }
  }
  if (v.size() != declared) {
    fail(ErrorCode::kParse, "declared vocab size " + std::to_string(declared) + " but file defines " +
                                std::to_string(v.size()));
  }
  return v;
}

void Vocab::save_file(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  save(out);
}

Vocab Vocab::load_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path);
  return load(in);
}

std::vector<std::string_view> pretokenize(std::string_view text) {
  std::vector<std::string_view> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  auto cls = [&](std::size_t k) { return classify(static_cast<unsigned char>(text[k])); };
  while (i < n) {
    const std::size_t start = i;
    CharClass c = cls(i);
    if (c == CharClass::kSpace && i + 1 < n && !is_ws(cls(i + 1))) {
      ++i;
      c = cls(i);
      while (i < n && cls(i) == c) ++i;
    } else if (is_ws(c)) {
      while (i < n && is_ws(cls(i))) ++i;
      // Hand a trailing space to the following word.
      if (i < n && i - start > 1 && text[i - 1] == ' ') --i;
    } else {
      while (i < n && cls(i) == c) ++i;
    }
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

Vocab train_bpe(std::span<const std::string> corpus_sample, std::size_t target_size,
                std::vector<SpecialSpec> specials) {
  if (target_size <= kByteAlphabet + specials.size()) {
    fail(ErrorCode::kInvalidArgument, "target vocab size " + std::to_string(target_size) +
                                          " must exceed 256 + " + std::to_string(specials.size()) +
                                          " specials");
  }
  if (corpus_sample.empty()) fail(ErrorCode::kInvalidArgument, "corpus sample is empty");

  const detail::SpecialTable table(specials, 0);
  std::unordered_map<std::string_view, std::uint64_t> chunk_counts;
  for (const auto& doc : corpus_sample) {
    for (const auto& piece : split_specials(table, doc, true)) {
      if (piece.special) continue;
      for (auto chunk : pretokenize(piece.text)) ++chunk_counts[chunk];
    }
  }
  // Sorted so that word order (and therefore everything downstream) does not
  // depend on hash-map iteration order.
  std::vector<std::pair<std::string_view, std::uint64_t>> sorted(chunk_counts.begin(), chunk_counts.end());
  std::sort(sorted.begin(), sorted.end());
  std::vector<std::vector<TokenId>> words;
  std::vector<std::uint64_t> freq;
  words.reserve(sorted.size());
  for (const auto& [chunk, count] : sorted) {
    if (chunk.size() < 2) continue;
    words.emplace_back(chunk.begin(), chunk.end());
    for (auto& id : words.back()) id = static_cast<unsigned char>(id);
    freq.push_back(count);
  }

  const std::size_t wanted = target_size - kByteAlphabet - specials.size();
  std::vector<Merge> merges;
  merges.reserve(wanted);
  std::unordered_map<std::uint64_t, std::uint64_t> pair_counts;
  for (std::size_t m = 0; m < wanted; ++m) {
    pair_counts.clear();
    for (std::size_t w = 0; w < words.size(); ++w) {
      const auto& ids = words[w];
      for (std::size_t j = 0; j + 1 < ids.size(); ++j) pair_counts[pair_key(ids[j], ids[j + 1])] += freq[w];
    }
    std::uint64_t best_key = 0, best_count = 0;
    for (const auto& [key, count] : pair_counts) {
      if (count > best_count || (count == best_count && key < best_key)) {
        best_key = key;
        best_count = count;
      }
    }
    if (best_count == 0) {
      fail(ErrorCode::kInsufficientMerges,
           "insufficient merges: corpus sample yields vocab size " +
               std::to_string(kByteAlphabet + merges.size() + specials.size()) + " of target " +
               std::to_string(target_size));
    }
    const Merge rule{static_cast<TokenId>(best_key >> 32), static_cast<TokenId>(best_key & 0xffffffffu)};
    const auto new_id = static_cast<TokenId>(kByteAlphabet + merges.size());
    merges.push_back(rule);
    for (auto& ids : words) {
      if (ids.size() < 2) continue;
      std::size_t out = 0;
      for (std::size_t j = 0; j < ids.size(); ++j) {
        if (j + 1 < ids.size() && ids[j] == rule.left && ids[j + 1] == rule.right) {
          ids[out++] = new_id;
          ++j;
        } else {
          ids[out++] = ids[j];
        }
      }
      ids.resize(out);
    }
  }
  return Vocab(std::move(merges), std::move(specials));
}

std::vector<TokenId> encode(const Vocab& v, std::string_view text, bool allow_special) {
  std::vector<TokenId> out;
  for (const auto& piece : split_specials(v.special_table(), text, allow_special)) {
    if (piece.special) {
      out.push_back(*piece.special);
      continue;
    }
    for (auto chunk : pretokenize(piece.text)) {
      auto ids = bpe_chunk(v, chunk);
      out.insert(out.end(), ids.begin(), ids.end());
    }
  }
  return out;
}

std::string decode(const Vocab& v, std::span<const TokenId> ids) {
  std::string out;
  for (TokenId id : ids) out += v.token_bytes(id);
  return out;
}

}  // namespace stagelm::tok
