#include "stagelm/evalppl.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <numeric>
#include <thread>

#include "stagelm/error.hpp"

namespace stagelm::eval {
namespace {

constexpr std::string_view kModule = "evalppl";

[[noreturn]] void fail(ErrorCode code, const std::string& msg) {
  throw Error(code, std::string(kModule), msg);
}

std::vector<double> average_ranks(std::span<const double> v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

template <class T>
PerPositionReport per_position_perplexity(const model::ModelParams<T>& params, const model::ModelConfig& cfg,
                                          const corpus::PackedDataset& heldout, std::size_t bucket_size,
                                          std::string model_tag, int threads) {
  if (bucket_size == 0) fail(ErrorCode::kInvalidArgument, "bucket_size must be positive");
  if (heldout.seq_len < 2) fail(ErrorCode::kInvalidArgument, "held-out windows need at least 2 tokens");
  for (const auto& s : heldout.sequences) {
    if (s.boundaries != std::vector<std::uint16_t>{0}) {
      fail(ErrorCode::kEvalRequiresWholeDocuments, "eval requires whole documents");
    }
  }
  const std::size_t scored = heldout.seq_len - 1;
  const std::size_t n_buckets = (scored + bucket_size - 1) / bucket_size;
  const std::size_t n_docs = heldout.sequences.size();

  std::vector<std::vector<double>> per_doc(n_docs);
  auto score = [&](std::size_t d) {
    const auto& ids = heldout.sequences[d].ids;
    per_doc[d] = model::token_nll(params, cfg, std::span<const tok::TokenId>(ids.data(), scored),
                                  std::span<const tok::TokenId>(ids.data() + 1, scored));
  };
  const std::size_t workers = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(threads, 1)), 1,
                                                      std::max<std::size_t>(n_docs, 1));
  if (workers == 1) {
    for (std::size_t d = 0; d < n_docs; ++d) score(d);
  } else {
    std::vector<std::exception_ptr> errors(workers);
    {
      std::vector<std::jthread> pool;
      for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&, w] {
          try {
            for (std::size_t d = w; d < n_docs; d += workers) score(d);
          } catch (...) {
            errors[w] = std::current_exception();
          }
        });
      }
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
  }

  PerPositionReport r;
  r.model_tag = std::move(model_tag);
  r.n_docs = n_docs;
  r.eval_seq_len = scored;
  r.bucket_size = bucket_size;
  std::vector<double> sums(n_buckets, 0.0);
  std::vector<std::size_t> counts(n_buckets, 0);
  for (const auto& nll : per_doc) {
    for (std::size_t p = 0; p < scored; ++p) {
      sums[p / bucket_size] += nll[p];
      ++counts[p / bucket_size];
    }
  }
  for (std::size_t b = 0; b < n_buckets; ++b) {
    r.positions.push_back(b * bucket_size);
    const double mean = counts[b] ? sums[b] / static_cast<double>(counts[b]) : 0.0;
    r.mean_nll.push_back(mean);
    r.ppl.push_back(counts[b] ? std::exp(mean) : std::nan(""));
  }
  return r;
}

template PerPositionReport per_position_perplexity<float>(const model::ModelParams<float>&, const model::ModelConfig&,
                                                          const corpus::PackedDataset&, std::size_t, std::string, int);
template PerPositionReport per_position_perplexity<double>(const model::ModelParams<double>&,
                                                           const model::ModelConfig&, const corpus::PackedDataset&,
                                                           std::size_t, std::string, int);

double spearman(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size() || x.size() < 2) fail(ErrorCode::kInvalidArgument, "spearman needs two equal series of length >= 2");
  const auto rx = average_ranks(x), ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

ComparisonTable compare_stage_models(std::span<const PerPositionReport> reports) {
  ComparisonTable t;
  if (reports.empty()) return t;
  t.positions = reports[0].positions;
  for (const auto& r : reports) {
    if (r.positions != t.positions || r.bucket_size != reports[0].bucket_size) {
      fail(ErrorCode::kBucketMismatch, "report '" + r.model_tag + "' uses a different bucket geometry");
    }
  }
  std::vector<double> pos(t.positions.begin(), t.positions.end());
  for (const auto& r : reports) {
    t.tags.push_back(r.model_tag);
    t.ppl.push_back(r.ppl);
    std::vector<double> d(r.ppl.size());
    for (std::size_t b = 0; b < d.size(); ++b) d[b] = r.ppl[b] - reports[0].ppl[b];
    t.delta.push_back(std::move(d));
    t.spearman.push_back(pos.size() >= 2 ? spearman(r.ppl, pos) : 0.0);
  }
  return t;
}

void write_report_csv(std::span<const PerPositionReport> reports, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  out << "bucket_start,ppl,model_tag\n";
  for (const auto& r : reports) {
    for (std::size_t b = 0; b < r.positions.size(); ++b) out << r.positions[b] << "," << fmt(r.ppl[b]) << "," << r.model_tag << "\n";
  }
}

void write_comparison_csv(const ComparisonTable& table, const std::string& path) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + path);
  out << "model_tag,bucket_start,ppl,delta_vs_first,spearman\n";
  for (std::size_t m = 0; m < table.tags.size(); ++m) {
    for (std::size_t b = 0; b < table.positions.size(); ++b) {
      out << table.tags[m] << "," << table.positions[b] << "," << fmt(table.ppl[m][b]) << ","
          << fmt(table.delta[m][b]) << "," << fmt(table.spearman[m]) << "\n";
    }
  }
}

void write_ppl_plot_script(const std::string& csv_path, std::span<const std::string> tags,
                           const std::string& script_path, const std::string& image_path) {
  std::ofstream out(script_path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + script_path);
  out << "set datafile separator ','\n"
      << "set terminal pngcairo size 900,540\n"
      << "set output '" << image_path << "'\n"
      << "set xlabel 'token position'\n"
      << "set ylabel 'average perplexity'\n"
      << "set key top right\n"
      << "plot ";
  for (std::size_t i = 0; i < tags.size(); ++i) {
    out << (i ? ", \\\n     " : "") << "'" << csv_path << "' every ::1 using 1:(strcol(3) eq '" << tags[i]
        << "' ? $2 : 1/0) with linespoints title '" << tags[i] << "'";
  }
  out << "\n";
}

void write_loss_plot_script(const std::string& loss_csv_path, const std::string& script_path,
                            const std::string& image_path) {
  std::ofstream out(script_path);
  if (!out) fail(ErrorCode::kIo, "cannot write " + script_path);
  out << "set datafile separator ','\n"
      << "set terminal pngcairo size 900,540\n"
      << "set output '" << image_path << "'\n"
      << "set xlabel 'tokens seen'\n"
      << "set ylabel 'cross-entropy'\n"
      << "plot '" << loss_csv_path << "' every ::1 using 2:6:4 with lines lc variable title 'train loss'\n";
}

}  // namespace stagelm::eval
