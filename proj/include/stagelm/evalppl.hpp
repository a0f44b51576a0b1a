#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "stagelm/corpus.hpp"
#include "stagelm/model.hpp"

namespace stagelm::eval {

struct PerPositionReport {
  std::vector<std::size_t> positions;  // bucket start offsets
  std::vector<double> ppl;
  std::vector<double> mean_nll;
  std::size_t n_docs = 0;
  std::string model_tag;
  std::size_t eval_seq_len = 0;  // scored positions per document
  std::size_t bucket_size = 0;
};

// A held-out window of L tokens scores L-1 next-token predictions at
// positions 0..L-2. ppl[b] = exp(mean NLL over all documents and positions in
// bucket b). Windows must each hold a single document (boundaries == {0}).
template <class T>
PerPositionReport per_position_perplexity(const model::ModelParams<T>& params, const model::ModelConfig& cfg,
                                          const corpus::PackedDataset& heldout, std::size_t bucket_size,
                                          std::string model_tag = {}, int threads = 1);

struct ComparisonTable {
  std::vector<std::size_t> positions;
  std::vector<std::string> tags;
  std::vector<std::vector<double>> ppl;
  std::vector<std::vector<double>> delta;  // ppl[i] - ppl[0]
  std::vector<double> spearman;            // Spearman(ppl, position) per model
};

ComparisonTable compare_stage_models(std::span<const PerPositionReport> reports);

// Spearman rank correlation with average ranks for ties.
double spearman(std::span<const double> x, std::span<const double> y);

void write_report_csv(std::span<const PerPositionReport> reports, const std::string& path);
void write_comparison_csv(const ComparisonTable& table, const std::string& path);

// gnuplot scripts for the per-position perplexity and training-loss plots.
void write_ppl_plot_script(const std::string& csv_path, std::span<const std::string> tags,
                           const std::string& script_path, const std::string& image_path);
void write_loss_plot_script(const std::string& loss_csv_path, const std::string& script_path,
                            const std::string& image_path);

}  // namespace stagelm::eval
