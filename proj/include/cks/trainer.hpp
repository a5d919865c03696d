#pragma once

// Joint training of the principal and collaborator models, plus the fully
// supervised reference mode. One optimizer per model; the principal optimizer
// keeps backbone and head parameters in separate groups so the learning-rate
// schedule can treat them differently.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cks/collaborator.hpp"
#include "cks/config.hpp"
#include "cks/evaluation.hpp"
#include "cks/losses.hpp"
#include "cks/principal.hpp"

namespace cks {

enum class ParamGroup { Backbone, Heads };

/// Learning rate for `group` at step `step` (0-based).
double lr_at(const TrainConfig& config, long long step, ParamGroup group);

/// Models, optimizers and the step counter.
struct TrainState {
  explicit TrainState(const RunConfig& config);

  RunConfig config;
  PrincipalModel principal{nullptr};
  CollaboratorModel collaborator{nullptr};
  std::unique_ptr<torch::optim::Adam> principal_optimizer;
  std::unique_ptr<torch::optim::Adam> collaborator_optimizer;
  long long step = 0;
};

/// Loss tensors of one sample, before any backward pass.
struct CksLossTerms {
  torch::Tensor l_det, l_s, l_b, l_mc, l_m;
  torch::Tensor l_pr, l_co;
  LossBundle values;
  /// Mean window probability over instances; NaN when the sample has no points.
  double mean_window_probability = 0.0;
  int instances = 0;
  // Intermediate maps, exposed for tests.
  torch::Tensor Mp, Mc, Bp, Bc;
};

/// Forward pass of both models on one sample and every CKS loss term.
/// The principal terms see the collaborator outputs as constants and vice versa.
CksLossTerms compute_cks_losses(TrainState& state, const ImageSample& sample, long long step = -1);

struct StepMetrics {
  long long step = 0;
  LossBundle losses;
  double lr_backbone = 0.0;
  double lr_heads = 0.0;
  double mean_window_probability = 0.0;
  int instances = 0;
};

/// One optimizer step over `batch` (gradients averaged). Dispatches on
/// config.train.mode. Throws NonFiniteError if a loss or parameter becomes
/// non-finite.
StepMetrics train_step(TrainState& state, std::span<const ImageSample> batch);
StepMetrics cks_train_step(TrainState& state, const ImageSample& sample);
StepMetrics supervised_train_step(TrainState& state, const ImageSample& sample);

/// Index into the dataset of the k-th sample drawn (k = step * batch + b).
/// Each epoch is a fresh permutation seeded from (seed, epoch).
std::size_t sample_index(std::uint64_t seed, long long k, std::size_t dataset_size);

/// The training sample for draw k: augmented with an RNG seeded from (seed, k),
/// with points recomputed from masks in supervised mode.
ImageSample draw_sample(const RunConfig& config, const std::vector<ImageSample>& dataset, long long k);

/// Full training state (both models, optimizers, step, config).
void save_checkpoint(const std::filesystem::path& path, TrainState& state);
/// Restores into a state built from `config`; model configs must match.
void load_checkpoint(const std::filesystem::path& path, TrainState& state);

struct FitOptions {
  std::optional<std::filesystem::path> resume_from;
  /// Called after each step; return false to stop early.
  std::function<bool(const StepMetrics&)> on_step;
  std::function<void(const std::string&)> log;
  bool write_outputs = true;
};

struct FitResult {
  std::unique_ptr<TrainState> state;
  std::vector<StepMetrics> history;
  std::filesystem::path final_checkpoint;
  bool collapse_alarm = false;
};

/// Runs config.train.total_steps steps (from the resumed step if any), writing
/// config.json, metrics.csv and checkpoints under config.output_dir.
FitResult fit(const RunConfig& config, const std::vector<ImageSample>& dataset, FitOptions options = {});

std::string metrics_csv_header();
std::string metrics_csv_row(const StepMetrics& m);

/// Predicts every sample with the principal model and scores it against its masks.
EvalResult evaluate_model(PrincipalModel& model, const std::vector<ImageSample>& samples, const RunConfig& config);

}  // namespace cks
