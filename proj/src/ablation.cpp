#include "cks/ablation.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cks/error.hpp"
#include "cks/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cks {

namespace {

std::string slug(const std::string& label) {
  std::string s;
  for (char c : label) s += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '_';
  return s;
}

}  // namespace

const SweepRow& SweepTable::row(const std::string& label) const {
  for (const auto& r : rows) {
    if (r.label == label) return r;
  }
  throw InvalidArgument("sweep '" + name + "' has no row '" + label + "'");
}

std::string SweepTable::to_text() const {
  std::ostringstream s;
  char line[160];
  std::snprintf(line, sizeof line, "%-14s %8s %8s %8s %14s %10s\n", name.c_str(), "AP50", "AP75", "mAP",
                "collab params", "mean s");
  s << line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-14s %8.3f %8.3f %8.3f %14lld %10.4f\n", r.label.c_str(), r.metrics.ap50(),
                  r.metrics.ap75(), r.metrics.map_score, r.collaborator_parameters, r.final_mean_window_probability);
    s << line;
  }
  return s.str();
}

json SweepTable::to_json() const {
  json rows_json = json::array();
  for (const auto& r : rows) {
    json ladder = json::object();
    for (const auto& [t, ap] : r.metrics.ap_by_threshold) {
      char key[16];
      std::snprintf(key, sizeof key, "%.2f", t);
      ladder[key] = ap;
    }
    rows_json.push_back({{"label", r.label},
                         {"changed_keys", r.changed_keys},
                         {"ap50", r.metrics.ap50()},
                         {"ap75", r.metrics.ap75()},
                         {"map", r.metrics.map_score},
                         {"ap_by_threshold", ladder},
                         {"collaborator_parameters", r.collaborator_parameters},
                         {"final_mean_window_probability", std::isfinite(r.final_mean_window_probability)
                                                               ? json(r.final_mean_window_probability)
                                                               : json(nullptr)}});
  }
  return {{"sweep", name}, {"rows", rows_json}};
}

RunConfig sweep_base(const RunConfig& config) {
  RunConfig base = config;
  base.train.total_steps = config.ablation.steps;
  return base;
}

std::vector<SweepVariant> prior_sweep_variants(const RunConfig& config) {
  const RunConfig base = sweep_base(config);

  RunConfig none = base;
  none.losses.pi = 0.0;

  RunConfig constant = base;
  double d = config.ablation.constant_d;
  if (d <= 0.0) {
    d = base.losses.d;
    if (!base.losses.d_by_group.empty()) {
      d = std::max_element(base.losses.d_by_group.begin(), base.losses.d_by_group.end(),
                           [](const auto& a, const auto& b) { return a.second < b.second; })
              ->second;
    }
  }
  constant.losses.d = d;
  constant.losses.d_by_group.clear();

  return {{"NOT USED", none}, {"CONSTANT d", constant}, {"PER-GROUP d", base}};
}

std::vector<SweepVariant> collaborator_sweep_variants(const RunConfig& config) {
  const RunConfig base = sweep_base(config);
  auto make = [&](ForegroundVariant a, BorderVariant b) {
    RunConfig c = base;
    c.collaborator.foreground_variant = a;
    c.collaborator.border_variant = b;
    return SweepVariant{to_string(a) + to_string(b), c};
  };
  return {make(ForegroundVariant::A1, BorderVariant::B1), make(ForegroundVariant::A2, BorderVariant::B1),
          make(ForegroundVariant::A3, BorderVariant::B1), make(ForegroundVariant::A1, BorderVariant::B2)};
}

SweepTable run_sweep(const std::string& name, const RunConfig& base, const std::vector<SweepVariant>& variants,
                     const std::vector<ImageSample>& train, const std::vector<ImageSample>& eval,
                     const SweepOptions& options) {
  if (variants.empty()) throw InvalidArgument("run_sweep: no variants");
  auto log = options.log ? options.log : [](const std::string& msg) { std::cerr << msg << '\n'; };
  SweepTable table;
  table.name = name;
  const fs::path root = fs::path(variants.front().config.output_dir) / name;

  for (const auto& v : variants) {
    RunConfig c = v.config;
    c.output_dir = (root / slug(v.label)).string();
    log(name + ": training '" + v.label + "' for " + std::to_string(c.train.total_steps) + " steps");
    FitOptions fo;
    fo.write_outputs = options.write_outputs;
    fo.log = log;
    auto fitted = fit(c, train, fo);

    SweepRow row;
    row.label = v.label;
    row.changed_keys = config_diff(base, v.config);
    row.metrics = evaluate_model(fitted.state->principal, eval, c).pooled;
    row.collaborator_parameters = parameter_count(c.collaborator);
    row.final_mean_window_probability =
        fitted.history.empty() ? std::nan("") : fitted.history.back().mean_window_probability;
    log(name + ": '" + v.label + "' AP50 " + std::to_string(row.metrics.ap50()));
    table.rows.push_back(std::move(row));
  }

  if (options.write_outputs) {
    fs::create_directories(root);
    std::ofstream(root / "summary.json") << table.to_json().dump(2) << '\n';
    std::ofstream(root / "summary.txt") << table.to_text();
  }
  return table;
}

SweepTable sweep_prior(const RunConfig& config, const std::vector<ImageSample>& train,
                       const std::vector<ImageSample>& eval, const SweepOptions& options) {
  return run_sweep("prior", sweep_base(config), prior_sweep_variants(config), train, eval, options);
}

SweepTable sweep_collaborator(const RunConfig& config, const std::vector<ImageSample>& train,
                              const std::vector<ImageSample>& eval, const SweepOptions& options) {
  return run_sweep("collaborator", sweep_base(config), collaborator_sweep_variants(config), train, eval, options);
}

}  // namespace cks
