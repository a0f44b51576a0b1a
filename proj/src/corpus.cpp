#include "stagelm/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "stagelm/error.hpp"
#include "stagelm/rng.hpp"

namespace stagelm::corpus {
namespace {

constexpr std::string_view kModule = "corpus";
constexpr std::string_view kPackMagic = "packtok v1\n";

[[noreturn]] void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(kModule), msg);
}

std::size_t weight_of(const Document& d) {
  return d.token_count > 0 ? d.token_count : d.text.size();
}

const std::vector<TokenId>& tokens_of(const Document& d, const tok::Vocab* v,
                                      std::vector<TokenId>& scratch) {
  if (!d.tokens.empty() || d.text.empty() || v == nullptr) return d.tokens;
  scratch = tok::encode(*v, d.text, false);
  return scratch;
}

void put_u32(std::ostream& out, std::uint32_t x) {
  const char b[4] = {static_cast<char>(x & 0xff), static_cast<char>((x >> 8) & 0xff),
                     static_cast<char>((x >> 16) & 0xff), static_cast<char>((x >> 24) & 0xff)};
  out.write(b, 4);
}

void put_u16(std::ostream& out, std::uint16_t x) {
  const char b[2] = {static_cast<char>(x & 0xff), static_cast<char>((x >> 8) & 0xff)};
  out.write(b, 2);
}

std::uint32_t get_u32(std::istream& in, const std::string& path) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) fail(ErrorCode::kTruncated, "truncated packtok file " + path);
  return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

std::uint16_t get_u16(std::istream& in, const std::string& path) {
  unsigned char b[2];
  if (!in.read(reinterpret_cast<char*>(b), 2)) fail(ErrorCode::kTruncated, "truncated packtok file " + path);
  return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

PackedDataset pack_impl(std::span<const Document> docs, const tok::Vocab* v, TokenId eot,
                        std::uint32_t vocab_size, std::size_t seq_len, std::uint64_t seed,
                        std::uint32_t chunk_index) {
  if (seq_len < 2) fail(ErrorCode::kInvalidArgument, "seq_len must be at least 2");
  if (seq_len > std::numeric_limits<std::uint16_t>::max()) {
    fail(ErrorCode::kInvalidArgument, "seq_len exceeds the u16 boundary-offset range");
  }
  PackedDataset ds;
  ds.vocab_size = vocab_size;
  ds.seq_len = static_cast<std::uint32_t>(seq_len);
  auto& prov = ds.provenance;

  std::vector<TokenId> stream;
  std::vector<std::size_t> starts;
  std::vector<TokenId> scratch;
  for (const auto& d : docs) {
    const auto& toks = tokens_of(d, v, scratch);
    if (toks.empty()) {
      ++prov.documents_dropped;
      continue;
    }
    if (!starts.empty()) {
      stream.push_back(eot);
      ++prov.separator_count;
    }
    starts.push_back(stream.size());
    stream.insert(stream.end(), toks.begin(), toks.end());
    ++prov.documents_kept;
    prov.document_tokens += toks.size();
    prov.tokens_per_source[d.source] += toks.size();
  }

  const std::size_t n_windows = stream.size() / seq_len;
  prov.emitted_tokens = n_windows * seq_len;
  prov.dropped_tail_tokens = stream.size() - prov.emitted_tokens;
  ds.sequences.reserve(n_windows);
  auto next_start = starts.begin();
  for (std::size_t w = 0; w < n_windows; ++w) {
    PackedSequence seq;
    seq.chunk_index = chunk_index;
    const std::size_t lo = w * seq_len, hi = lo + seq_len;
    seq.ids.assign(stream.begin() + static_cast<std::ptrdiff_t>(lo),
                   stream.begin() + static_cast<std::ptrdiff_t>(hi));
    while (next_start != starts.end() && *next_start < hi) {
      seq.boundaries.push_back(static_cast<std::uint16_t>(*next_start - lo));
      ++next_start;
    }
    ds.sequences.push_back(std::move(seq));
  }
  Rng rng(seed);
  fisher_yates(ds.sequences, rng);
  return ds;
}

}  // namespace

IngestResult ingest(std::span<const ShardSpec> shards) {
  IngestResult result;
  for (const auto& shard : shards) {
    std::ifstream in(shard.path, std::ios::binary);
    if (!in) fail(ErrorCode::kIo, "cannot read corpus shard " + shard.path);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
      auto skip = [&](const std::string& why) {
        ++result.skipped;
        result.warnings.push_back(shard.path + ":" + std::to_string(line_no) + ": " + why);
      };
      auto rec = nlohmann::json::parse(line, nullptr, false);
      if (rec.is_discarded() || !rec.is_object()) {
        skip("malformed JSON record");
        continue;
      }
      auto text = rec.find("text");
      if (text == rec.end() || !text->is_string() || text->get_ref<const std::string&>().empty()) {
        skip("missing or empty \"text\"");
        continue;
      }
      Document doc;
      doc.text = text->get<std::string>();
      doc.source = shard.source;
      if (auto src = rec.find("source"); src != rec.end()) {
        if (!src->is_string()) {
          skip("\"source\" is not a string");
          continue;
        }
        doc.source = src->get<std::string>();
      }
      result.documents.push_back(std::move(doc));
    }
    if (in.bad()) fail(ErrorCode::kIo, "error while reading " + shard.path);
  }
  return result;
}

std::vector<Document> filter_short(std::vector<Document> docs, const tok::Vocab& v,
                                   std::size_t min_tokens, FilterStats* stats) {
  if (min_tokens < 1) fail(ErrorCode::kInvalidArgument, "min_tokens must be at least 1");
  std::vector<Document> kept;
  FilterStats local;
  for (auto& d : docs) {
    if (d.tokens.empty()) d.tokens = tok::encode(v, d.text, false);
    d.token_count = d.tokens.size();
    if (d.token_count >= min_tokens) {
      kept.push_back(std::move(d));
      ++local.kept;
    } else {
      ++local.dropped;
    }
  }
  if (stats) *stats = local;
  return kept;
}

void MixtureSpec::validate() const {
  if (entries.empty()) fail(ErrorCode::kInvalidArgument, "mixture has no entries");
  double sum = 0.0;
  for (const auto& e : entries) {
    if (!(e.proportion >= 0.0 && e.proportion <= 1.0)) {
      fail(ErrorCode::kInvalidArgument, "proportion for " + e.source + " outside [0,1]");
    }
    sum += e.proportion;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg.precision(17);
    msg << "mixture proportions sum to " << sum << ", expected 1";
    fail(ErrorCode::kInvalidArgument, msg.str());
  }
}

MixtureResult sample_mixture(const std::map<std::string, std::vector<Document>>& streams,
                             const MixtureSpec& spec, ExhaustionPolicy policy) {
  spec.validate();
  struct Source {
    const std::vector<Document>* docs;
    std::size_t cursor = 0;
    double weight = 0.0;
    std::string name;
  };
  std::vector<Source> sources;
  for (const auto& e : spec.entries) {
    auto it = streams.find(e.source);
    if (it == streams.end()) fail(ErrorCode::kInvalidArgument, "mixture source without stream: " + e.source);
    Source s{&it->second, 0, 0.0, e.source};
    if (e.proportion > 0.0 && !it->second.empty()) {
      double total = 0.0;
      for (const auto& d : it->second) total += static_cast<double>(weight_of(d));
      const double mean = std::max(1.0, total / static_cast<double>(it->second.size()));
      s.weight = e.proportion / mean;
    }
    sources.push_back(s);
  }

  MixtureResult out;
  Rng rng(spec.seed);
  while (true) {
    double total_weight = 0.0;
    for (const auto& s : sources) total_weight += s.weight;
    if (total_weight <= 0.0) break;
    double u = uniform_unit(rng) * total_weight;
    std::size_t pick = 0;
    for (; pick + 1 < sources.size(); ++pick) {
      if (sources[pick].weight <= 0.0) continue;
      if (u < sources[pick].weight) break;
      u -= sources[pick].weight;
    }
    while (sources[pick].weight <= 0.0) --pick;  // rounding at the upper end
    auto& s = sources[pick];
    if (s.cursor >= s.docs->size()) {
      if (policy == ExhaustionPolicy::kStopAll) {
        out.notes.push_back("source " + s.name + " exhausted after " + std::to_string(s.cursor) +
                            " documents; stopping all sources");
        break;
      }
      out.notes.push_back("source " + s.name + " exhausted after " + std::to_string(s.cursor) +
                          " documents; redistributing its share");
      s.weight = 0.0;
      continue;
    }
    const Document& d = (*s.docs)[s.cursor++];
    out.tokens_per_source[d.source] += weight_of(d);
    out.documents.push_back(d);
  }
  return out;
}

std::vector<std::vector<Document>> split_chunks(std::vector<Document> docs, std::size_t n_chunks,
                                                std::uint64_t seed) {
  if (n_chunks == 0) fail(ErrorCode::kInvalidArgument, "n_chunks must be positive");
  std::vector<std::size_t> order(docs.size());
  std::iota(order.begin(), order.end(), 0);
  shuffle_in_place(order, seed);

  std::vector<double> cumulative(docs.size() + 1, 0.0);
  for (std::size_t i = 0; i < order.size(); ++i) {
    cumulative[i + 1] = cumulative[i] + static_cast<double>(weight_of(docs[order[i]]));
  }
  const double total = cumulative.back();
  const std::size_t n = docs.size();
  std::vector<std::size_t> cuts{0};
  for (std::size_t c = 1; c < n_chunks; ++c) {
    const double target = total * static_cast<double>(c) / static_cast<double>(n_chunks);
    // Leave at least one document for every remaining chunk when possible.
    std::size_t lo = std::min(cuts.back() + 1, n);
    std::size_t hi = n >= n_chunks - c ? n - (n_chunks - c) : lo;
    hi = std::max(hi, lo);
    hi = std::min(hi, n);
    std::size_t best = lo;
    for (std::size_t k = lo; k <= hi; ++k) {
      if (std::abs(cumulative[k] - target) < std::abs(cumulative[best] - target)) best = k;
      if (cumulative[k] > target) break;
    }
    cuts.push_back(best);
  }
  cuts.push_back(n);

  std::vector<std::vector<Document>> chunks(n_chunks);
  for (std::size_t c = 0; c < n_chunks; ++c) {
    for (std::size_t i = cuts[c]; i < cuts[c + 1]; ++i) chunks[c].push_back(std::move(docs[order[i]]));
  }
  return chunks;
}

PackedDataset pack(std::span<const Document> docs, const tok::Vocab& v, std::size_t seq_len,
                   std::uint64_t seed, std::uint32_t chunk_index) {
  return pack_impl(docs, &v, v.eot_id(), static_cast<std::uint32_t>(v.size()), seq_len, seed, chunk_index);
}

PackedDataset pack_tokens(std::span<const Document> docs, TokenId eot, std::uint32_t vocab_size,
                          std::size_t seq_len, std::uint64_t seed, std::uint32_t chunk_index) {
  return pack_impl(docs, nullptr, eot, vocab_size, seq_len, seed, chunk_index);
}

PackedDataset pack_whole_documents(std::span<const Document> docs, std::uint32_t vocab_size,
                                   std::size_t seq_len) {
  PackedDataset ds;
  ds.vocab_size = vocab_size;
  ds.seq_len = static_cast<std::uint32_t>(seq_len);
  for (const auto& d : docs) {
    if (d.tokens.size() < seq_len) {
      ++ds.provenance.documents_dropped;
      continue;
    }
    PackedSequence seq;
    seq.ids.assign(d.tokens.begin(), d.tokens.begin() + static_cast<std::ptrdiff_t>(seq_len));
    seq.boundaries = {0};
    ds.sequences.push_back(std::move(seq));
    ++ds.provenance.documents_kept;
    ds.provenance.document_tokens += seq_len;
    ds.provenance.emitted_tokens += seq_len;
    ds.provenance.tokens_per_source[d.source] += seq_len;
  }
  return ds;
}

void write_packtok(const PackedDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  out.write(kPackMagic.data(), static_cast<std::streamsize>(kPackMagic.size()));
  put_u32(out, ds.vocab_size);
  put_u32(out, ds.seq_len);
  put_u32(out, static_cast<std::uint32_t>(ds.sequences.size()));
  for (const auto& seq : ds.sequences) {
    if (seq.ids.size() != ds.seq_len) fail(ErrorCode::kInvalidArgument, "sequence length mismatch");
    for (TokenId id : seq.ids) put_u32(out, id);
    put_u16(out, static_cast<std::uint16_t>(seq.boundaries.size()));
    for (auto b : seq.boundaries) put_u16(out, b);
  }
  if (!out) fail(ErrorCode::kIo, "error while writing " + path);
}

PackedDataset read_packtok(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::kIo, "cannot read " + path);
  std::string magic(kPackMagic.size(), '\0');
  if (!in.read(magic.data(), static_cast<std::streamsize>(magic.size())) || magic != kPackMagic) {
    if (magic.starts_with("packtok ")) fail(ErrorCode::kVersionMismatch, "unsupported packtok version in " + path);
    fail(ErrorCode::kBadMagic, "bad magic in " + path);
  }
  PackedDataset ds;
  ds.vocab_size = get_u32(in, path);
  ds.seq_len = get_u32(in, path);
  const std::uint32_t n = get_u32(in, path);
  ds.sequences.resize(n);
  for (auto& seq : ds.sequences) {
    seq.ids.resize(ds.seq_len);
    for (auto& id : seq.ids) {
      id = get_u32(in, path);
      if (id >= ds.vocab_size) fail(ErrorCode::kUnknownTokenId, "token id out of range in " + path);
    }
    seq.boundaries.resize(get_u16(in, path));
    for (auto& b : seq.boundaries) b = get_u16(in, path);
  }
  return ds;
}

void write_provenance(const PackProvenance& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  out << "documents_kept=" << p.documents_kept << '\n'
      << "documents_dropped=" << p.documents_dropped << '\n'
      << "document_tokens=" << p.document_tokens << '\n'
      << "separator_count=" << p.separator_count << '\n'
      << "emitted_tokens=" << p.emitted_tokens << '\n'
      << "dropped_tail_tokens=" << p.dropped_tail_tokens << '\n';
  for (const auto& [source, n] : p.tokens_per_source) out << "tokens." << source << '=' << n << '\n';
  if (!p.config_hash.empty()) out << "config_hash=" << p.config_hash << '\n';
  for (const auto& note : p.notes) out << "note=" << note << '\n';
}

void shuffle_in_place(std::vector<std::size_t>& order, std::uint64_t seed) {
  Rng rng(seed);
  fisher_yates(order, rng);
}

}  // namespace stagelm::corpus
