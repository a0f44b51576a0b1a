#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

namespace stagelm::tok {

using TokenId = std::uint32_t;

inline constexpr std::string_view kEndOfText = "<|endoftext|>";
inline constexpr std::size_t kByteAlphabet = 256;
inline constexpr int kDefaultMaxRun = 16;

// A special token is matched in the text before BPE runs. Gated specials
// (end-of-text and any custom literal) are only recognized when encoding with
// allow_special; whitespace/tab run tokens are always recognized.
struct SpecialSpec {
  std::string name;
  std::string literal;
  bool gated = true;
};

// Names of the form <|spaces:N|> and <|tabs:N|> denote runs of N spaces/tabs;
// every other name is its own literal.
SpecialSpec special_from_name(std::string_view name);
std::string space_run_name(int n);
std::string tab_run_name(int n);

// End-of-text plus space and tab runs of length 2..max_run.
std::vector<SpecialSpec> default_specials(int max_run = kDefaultMaxRun);

namespace detail {

// Lookup structure for the special-token pre-pass.
struct SpecialTable {
  std::vector<std::pair<std::string, TokenId>> gated;  // longest literal first
  std::vector<std::optional<TokenId>> space_runs;      // indexed by run length
  std::vector<std::optional<TokenId>> tab_runs;

  SpecialTable() = default;
  SpecialTable(std::span<const SpecialSpec> specials, TokenId first_id);
};

}  // namespace detail

struct Merge {
  TokenId left;
  TokenId right;
  friend bool operator==(const Merge&, const Merge&) = default;
};

// Byte-level BPE vocabulary. Ids [0,256) are raw bytes, then one id per merge
// in learned order, then the specials in registration order (highest ids).
// Immutable after construction.
class Vocab {
 public:
  Vocab(std::vector<Merge> merges, std::vector<SpecialSpec> specials);

  std::size_t size() const noexcept { return tokens_.size(); }
  const std::vector<Merge>& merges() const noexcept { return merges_; }
  const std::vector<SpecialSpec>& specials() const noexcept { return specials_; }

  std::optional<TokenId> special_id(std::string_view name) const;
  TokenId eot_id() const;
  bool is_special(TokenId id) const noexcept { return id >= first_special_; }
  const detail::SpecialTable& special_table() const noexcept { return table_; }

  // Byte string a token decodes to. Throws kUnknownTokenId when out of range.
  const std::string& token_bytes(TokenId id) const;
  std::optional<TokenId> id_of(std::string_view token_string) const;

  // Rank of a merge producing (left, right), if any.
  std::optional<TokenId> merged_id(TokenId left, TokenId right) const;

  void save(std::ostream& out) const;
  static Vocab load(std::istream& in);
  void save_file(const std::string& path) const;
  static Vocab load_file(const std::string& path);

 private:
  std::vector<Merge> merges_;
  std::vector<SpecialSpec> specials_;
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> token_to_id_;
  std::unordered_map<std::uint64_t, TokenId> merge_lookup_;
  std::unordered_map<std::string, TokenId> special_by_name_;
  detail::SpecialTable table_;
  TokenId first_special_ = 0;
};

// Learns target_size - 256 - |specials| merges, greedily taking the most
// frequent adjacent pair (ties broken by smallest (left, right) id pair).
Vocab train_bpe(std::span<const std::string> corpus_sample, std::size_t target_size,
                std::vector<SpecialSpec> specials);

std::vector<TokenId> encode(const Vocab& v, std::string_view text, bool allow_special = true);
std::string decode(const Vocab& v, std::span<const TokenId> ids);

// Splits ordinary (special-free) text into the chunks BPE merges within.
// Exposed for tests.
std::vector<std::string_view> pretokenize(std::string_view text);

}  // namespace stagelm::tok
