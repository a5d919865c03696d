#include "cks/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include <opencv2/core.hpp>

#include "cks/checkpoint.hpp"
#include "cks/error.hpp"
#include "cks/inference.hpp"

namespace fs = std::filesystem;

namespace cks {

namespace {

torch::optim::AdamOptions adam_options(const TrainConfig& t, double lr) {
  return torch::optim::AdamOptions(lr).betas({t.adam_beta1, t.adam_beta2}).eps(t.adam_eps);
}

void set_lr(torch::optim::OptimizerParamGroup& group, double lr) {
  static_cast<torch::optim::AdamOptions&>(group.options()).lr(lr);
}

void check_finite_parameters(const torch::nn::Module& module, const std::string& component, long long step) {
  for (const auto& p : module.parameters()) {
    if (!torch::isfinite(p).all().item<bool>()) throw NonFiniteError(component + " parameters", step);
  }
}

void check_finite(const LossBundle& b, long long step) {
  const std::pair<const char*, double> items[] = {{"L_det", b.l_det}, {"L_S", b.l_s},   {"L_B", b.l_b},
                                                  {"L_MC", b.l_mc},   {"L_M", b.l_m},   {"L_pr", b.l_pr},
                                                  {"L_co", b.l_co}};
  for (const auto& [name, v] : items) {
    if (!std::isfinite(v)) throw NonFiniteError(name, step);
  }
}

torch::Tensor crop(const torch::Tensor& map, int h, int w) { return map.narrow(0, 0, h).narrow(1, 0, w); }

std::vector<cv::Mat> nonempty(const std::vector<cv::Mat>& masks) {
  std::vector<cv::Mat> out;
  for (const auto& m : masks) {
    if (cv::countNonZero(m) > 0) out.push_back(m);
  }
  return out;
}

void accumulate(LossBundle& into, const LossBundle& b, double scale) {
  into.l_det += scale * b.l_det;
  into.l_s += scale * b.l_s;
  into.l_b += scale * b.l_b;
  into.l_mc += scale * b.l_mc;
  into.l_m += scale * b.l_m;
  into.l_pr += scale * b.l_pr;
  into.l_co += scale * b.l_co;
}

void write_module(torch::serialize::OutputArchive& archive, const std::string& key, torch::nn::Module& module) {
  torch::serialize::OutputArchive sub;
  module.save(sub);
  archive.write(key, sub);
}

void read_module(torch::serialize::InputArchive& archive, const std::string& key, torch::nn::Module& module) {
  torch::serialize::InputArchive sub;
  if (!archive.try_read(key, sub)) throw LoadError("checkpoint is missing '" + key + "'");
  try {
    module.load(sub);
  } catch (const c10::Error& e) {
    throw ConfigError("checkpoint entry '" + key + "' does not fit the configured model: " + e.what_without_backtrace());
  }
}

void write_optimizer(torch::serialize::OutputArchive& archive, const std::string& key, torch::optim::Optimizer& opt) {
  torch::serialize::OutputArchive sub;
  opt.save(sub);
  archive.write(key, sub);
}

void read_optimizer(torch::serialize::InputArchive& archive, const std::string& key, torch::optim::Optimizer& opt) {
  torch::serialize::InputArchive sub;
  if (!archive.try_read(key, sub)) throw LoadError("checkpoint is missing '" + key + "'");
  opt.load(sub);
}

std::string checkpoint_name(long long step) {
  std::ostringstream s;
  s << "step_" << std::setw(8) << std::setfill('0') << step << ".pt";
  return s.str();
}

}  // namespace

double lr_at(const TrainConfig& config, long long step, ParamGroup group) {
  if (config.lr_schedule == LrSchedule::BackboneSplit) {
    return group == ParamGroup::Backbone ? config.lr_finetune : config.lr_initial;
  }
  const double boundary = config.initial_phase_fraction * static_cast<double>(config.total_steps);
  return static_cast<double>(step) < boundary ? config.lr_initial : config.lr_finetune;
}

TrainState::TrainState(const RunConfig& cfg) : config(cfg) {
  validate(config);
  torch::manual_seed(config.train.seed);
  principal = PrincipalModel(config.principal);
  collaborator = CollaboratorModel(config.collaborator);

  const auto& t = config.train;
  std::vector<torch::optim::OptimizerParamGroup> groups;
  groups.emplace_back(principal->backbone_parameters(),
                      std::make_unique<torch::optim::AdamOptions>(adam_options(t, lr_at(t, 0, ParamGroup::Backbone))));
  groups.emplace_back(principal->head_parameters(),
                      std::make_unique<torch::optim::AdamOptions>(adam_options(t, lr_at(t, 0, ParamGroup::Heads))));
  principal_optimizer = std::make_unique<torch::optim::Adam>(std::move(groups), adam_options(t, t.lr_initial));
  collaborator_optimizer =
      std::make_unique<torch::optim::Adam>(collaborator->parameters(), adam_options(t, lr_at(t, 0, ParamGroup::Heads)));
}

CksLossTerms compute_cks_losses(TrainState& state, const ImageSample& sample, long long step) {
  const auto& cfg = state.config;
  const auto& w = cfg.losses;
  auto& principal = state.principal;
  auto& collaborator = state.collaborator;

  const auto padded = pad_image(sample.image, cfg.principal);
  const int Hp = padded.padded_height, Wp = padded.padded_width;
  const int H = padded.height, W = padded.width;

  const auto features = principal->forward_features(padded.tensor);
  const auto grids = principal->detect(features);
  const auto targets = detection_targets(sample.points, Hp, Wp, cfg.principal.scales, w.smoothing_threshold);
  const auto windows = principal->encode_and_segment(features, padded.tensor, sample.points);
  const auto maps = collaborator->forward(padded.tensor);

  CksLossTerms out;
  out.instances = static_cast<int>(windows.count());
  out.Mc = maps.foreground;
  out.Bc = maps.border;

  // Principal side: collaborator outputs enter as constants.
  out.l_det = detection_loss(grids, targets, w.focal_gamma);
  out.l_s = principal_seg_loss(maps.foreground.detach(), windows, w.k_mode);
  out.Bp = boundary_from_instances(windows, Hp, Wp);
  const auto l_b_pr = boundary_loss(crop(out.Bp, H, W), crop(maps.border.detach(), H, W));
  out.l_mc = collapse_penalty(windows, w.delta, w.collapse_epsilon);

  // Collaborator side: principal outputs enter as constants.
  out.Mp = aggregate_Mp(windows, w.d_for(sample.group), w.pi, Hp, Wp);
  out.l_m = collaborator_seg_loss(crop(out.Mp, H, W), crop(maps.foreground, H, W));
  const auto l_b_co = boundary_loss(crop(out.Bp.detach(), H, W), crop(maps.border, H, W));
  out.l_b = l_b_pr;

  out.l_pr = w.lambda_det * out.l_det + w.lambda_s * out.l_s + w.lambda_b * l_b_pr + w.lambda_mc * out.l_mc;
  out.l_co = w.lambda_m * out.l_m + w.lambda_b * l_b_co;

  LossComponents c;
  c.det = out.l_det.item<double>();
  c.s = out.l_s.item<double>();
  c.b = l_b_pr.item<double>();
  c.mc = out.l_mc.item<double>();
  c.m = out.l_m.item<double>();
  out.values = total_losses(c, w, step);
  out.mean_window_probability = out.instances > 0
                                    ? mean_instance_probability(windows).mean().item<double>()
                                    : std::numeric_limits<double>::quiet_NaN();
  return out;
}

StepMetrics train_step(TrainState& state, std::span<const ImageSample> batch) {
  if (batch.empty()) throw InvalidArgument("train_step: empty batch");
  const auto& cfg = state.config;
  const bool cks = cfg.train.mode == TrainMode::Cks;
  const double scale = 1.0 / static_cast<double>(batch.size());

  StepMetrics m;
  m.step = state.step;
  m.lr_backbone = lr_at(cfg.train, state.step, ParamGroup::Backbone);
  m.lr_heads = lr_at(cfg.train, state.step, ParamGroup::Heads);

  state.principal->train();
  state.collaborator->train();
  state.principal_optimizer->zero_grad();
  state.collaborator_optimizer->zero_grad();

  double sbar_sum = 0.0;
  int sbar_count = 0;
  for (const auto& raw : batch) {
    if (cks) {
      auto terms = compute_cks_losses(state, raw, state.step);
      // Both gradients come from the same forward pass; the detach points in
      // compute_cks_losses keep them on their own model.
      ((terms.l_pr + terms.l_co) * scale).backward();
      accumulate(m.losses, terms.values, scale);
      m.instances += terms.instances;
      if (terms.instances > 0) {
        sbar_sum += terms.mean_window_probability;
        ++sbar_count;
      }
    } else {
      ImageSample sample = raw;
      sample.gt_masks = nonempty(sample.gt_masks);
      sample.points = centroids_from_masks(sample.gt_masks);
      const auto padded = pad_image(sample.image, cfg.principal);
      const int Hp = padded.padded_height, Wp = padded.padded_width;
      const auto features = state.principal->forward_features(padded.tensor);
      const auto grids = state.principal->detect(features);
      const auto targets =
          detection_targets(sample.points, Hp, Wp, cfg.principal.scales, cfg.losses.smoothing_threshold);
      const auto windows = state.principal->encode_and_segment(features, padded.tensor, sample.points);
      std::vector<int> assignment(sample.points.size());
      std::iota(assignment.begin(), assignment.end(), 0);
      const auto l_det = detection_loss(grids, targets, cfg.losses.focal_gamma);
      const auto l_seg = supervised_segmentation_loss(windows, sample.gt_masks, assignment, Hp, Wp);
      const auto total = cfg.losses.lambda_det * l_det + l_seg;
      (total * scale).backward();
      LossBundle b;
      b.l_det = l_det.item<double>();
      b.l_s = l_seg.item<double>();
      b.l_pr = total.item<double>();
      check_finite(b, state.step);
      accumulate(m.losses, b, scale);
      m.instances += static_cast<int>(windows.count());
      if (windows.count() > 0) {
        sbar_sum += mean_instance_probability(windows).mean().item<double>();
        ++sbar_count;
      }
    }
  }
  m.mean_window_probability = sbar_count > 0 ? sbar_sum / sbar_count : std::numeric_limits<double>::quiet_NaN();

  auto& groups = state.principal_optimizer->param_groups();
  set_lr(groups[0], m.lr_backbone);
  set_lr(groups[1], m.lr_heads);
  state.principal_optimizer->step();
  check_finite_parameters(*state.principal, "principal", state.step);

  const bool collaborator_learns = cks && (cfg.losses.lambda_m != 0.0 || cfg.losses.lambda_b != 0.0);
  if (collaborator_learns) {
    for (auto& g : state.collaborator_optimizer->param_groups()) set_lr(g, m.lr_heads);
    state.collaborator_optimizer->step();
    check_finite_parameters(*state.collaborator, "collaborator", state.step);
  }
  state.principal_optimizer->zero_grad();
  state.collaborator_optimizer->zero_grad();
  ++state.step;
  return m;
}

StepMetrics cks_train_step(TrainState& state, const ImageSample& sample) {
  if (state.config.train.mode != TrainMode::Cks) throw ConfigError("cks_train_step: state is in supervised mode");
  return train_step(state, std::span<const ImageSample>(&sample, 1));
}

StepMetrics supervised_train_step(TrainState& state, const ImageSample& sample) {
  if (state.config.train.mode != TrainMode::Supervised) {
    throw ConfigError("supervised_train_step: state is in cks mode");
  }
  return train_step(state, std::span<const ImageSample>(&sample, 1));
}

std::size_t sample_index(std::uint64_t seed, long long k, std::size_t n) {
  if (n == 0) throw InvalidArgument("sample_index: empty dataset");
  const auto epoch = static_cast<std::uint64_t>(k) / n;
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(epoch >> 32), 0x9e3779b9u};
  std::mt19937_64 rng(seq);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order[static_cast<std::uint64_t>(k) % n];
}

ImageSample draw_sample(const RunConfig& config, const std::vector<ImageSample>& dataset, long long k) {
  const auto& t = config.train;
  ImageSample s = dataset[sample_index(t.seed, k, dataset.size())];
  if (t.augment) {
    const auto kk = static_cast<std::uint64_t>(k);
    std::seed_seq seq{static_cast<std::uint32_t>(t.seed), static_cast<std::uint32_t>(t.seed >> 32),
                      static_cast<std::uint32_t>(t.augmentation.seed), static_cast<std::uint32_t>(kk),
                      static_cast<std::uint32_t>(kk >> 32)};
    std::mt19937_64 rng(seq);
    s = augment(s, t.augmentation, rng);
  }
  if (t.mode == TrainMode::Supervised) {
    s.gt_masks = nonempty(s.gt_masks);
    s.points = centroids_from_masks(s.gt_masks);
  }
  return s;
}

void save_checkpoint(const fs::path& path, TrainState& state) {
  torch::serialize::OutputArchive archive;
  checkpoint::write_int(archive, "schema_version", checkpoint::kSchemaVersion);
  checkpoint::write_principal(archive, state.principal);
  checkpoint::write_string(archive, "collaborator/config", to_json(state.collaborator->config()).dump());
  write_module(archive, "collaborator/params", *state.collaborator);
  write_optimizer(archive, "optim/principal", *state.principal_optimizer);
  write_optimizer(archive, "optim/collaborator", *state.collaborator_optimizer);
  checkpoint::write_int(archive, "step", state.step);
  checkpoint::write_string(archive, "run_config", to_json(state.config).dump());
  checkpoint::save_archive(archive, path);
}

void load_checkpoint(const fs::path& path, TrainState& state) {
  torch::serialize::InputArchive archive;
  checkpoint::load_archive(archive, path);
  checkpoint::check_schema(archive, path);
  if (checkpoint::read_string(archive, "principal/config") != to_json(state.config.principal).dump()) {
    throw ConfigError("checkpoint " + path.string() + ": principal config differs from the run config");
  }
  if (checkpoint::read_string(archive, "collaborator/config") != to_json(state.config.collaborator).dump()) {
    throw ConfigError("checkpoint " + path.string() + ": collaborator config differs from the run config");
  }
  torch::serialize::InputArchive params;
  if (!archive.try_read("principal/params", params)) throw LoadError("checkpoint is missing 'principal/params'");
  state.principal->load(params);
  read_module(archive, "collaborator/params", *state.collaborator);
  read_optimizer(archive, "optim/principal", *state.principal_optimizer);
  read_optimizer(archive, "optim/collaborator", *state.collaborator_optimizer);
  state.step = checkpoint::read_int(archive, "step");
}

std::string metrics_csv_header() {
  return "step,l_det,l_s,l_b,l_mc,l_m,l_pr,l_co,lr_backbone,lr_heads,mean_sbar,n";
}

std::string metrics_csv_row(const StepMetrics& m) {
  std::ostringstream s;
  s << std::setprecision(9) << m.step << ',' << m.losses.l_det << ',' << m.losses.l_s << ',' << m.losses.l_b << ','
    << m.losses.l_mc << ',' << m.losses.l_m << ',' << m.losses.l_pr << ',' << m.losses.l_co << ',' << m.lr_backbone
    << ',' << m.lr_heads << ',' << m.mean_window_probability << ',' << m.instances;
  return s.str();
}

FitResult fit(const RunConfig& config, const std::vector<ImageSample>& dataset, FitOptions options) {
  validate(config);
  check_dataset_for_mode(dataset, config.train.mode);
  auto log = options.log ? options.log : [](const std::string& msg) { std::cerr << msg << '\n'; };

  FitResult result;
  result.state = std::make_unique<TrainState>(config);
  auto& state = *result.state;
  if (options.resume_from) {
    load_checkpoint(*options.resume_from, state);
    if (state.step > config.train.total_steps) {
      throw ConfigError("checkpoint step " + std::to_string(state.step) + " is past total_steps");
    }
  }

  const fs::path out = config.output_dir;
  const fs::path metrics_path = out / "metrics.csv";
  std::ofstream metrics;
  if (options.write_outputs) {
    fs::create_directories(out);
    write_run_config(out / "config.json", config);
    std::vector<std::string> kept;
    if (options.resume_from && fs::exists(metrics_path)) {
      std::ifstream in(metrics_path);
      std::string line;
      std::getline(in, line);
      while (static_cast<long long>(kept.size()) < state.step && std::getline(in, line)) kept.push_back(line);
    }
    metrics.open(metrics_path, std::ios::trunc);
    if (!metrics) throw LoadError("cannot write " + metrics_path.string());
    metrics << metrics_csv_header() << '\n';
    for (const auto& line : kept) metrics << line << '\n';
    metrics.flush();
  }

  const int batch = config.train.batch;
  long long streak = 0;
  std::vector<ImageSample> samples(batch);
  while (state.step < config.train.total_steps) {
    for (int b = 0; b < batch; ++b) samples[b] = draw_sample(config, dataset, state.step * batch + b);
    const auto m = train_step(state, samples);
    result.history.push_back(m);
    if (metrics.is_open()) metrics << metrics_csv_row(m) << '\n' << std::flush;

    if (m.instances > 0 && m.mean_window_probability < config.train.collapse_threshold) {
      if (++streak == config.train.collapse_patience) {
        result.collapse_alarm = true;
        log("warning: mean window probability below " + std::to_string(config.train.collapse_threshold) + " for " +
            std::to_string(streak) + " consecutive steps (step " + std::to_string(m.step) + ")");
      }
    } else {
      streak = 0;
    }

    if (options.write_outputs && state.step % config.train.checkpoint_every == 0 &&
        state.step < config.train.total_steps) {
      save_checkpoint(out / "checkpoints" / checkpoint_name(state.step), state);
    }
    if (options.on_step && !options.on_step(m)) break;
  }

  if (options.write_outputs) {
    result.final_checkpoint = out / "final.pt";
    save_checkpoint(result.final_checkpoint, state);
  }
  return result;
}

EvalResult evaluate_model(PrincipalModel& model, const std::vector<ImageSample>& samples, const RunConfig& config) {
  std::vector<EvalImage> images;
  images.reserve(samples.size());
  for (const auto& s : samples) {
    EvalImage e;
    e.id = s.id;
    e.group = s.group;
    e.gt_masks = s.gt_masks;
    for (auto& p : predict(model, s.image, config.inference, config.losses.d_for(s.group))) {
      e.predictions.push_back({p.score, p.mask});
    }
    images.push_back(std::move(e));
  }
  return evaluate_dataset(images);
}

}  // namespace cks
