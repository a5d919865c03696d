#pragma once

// Random differentiable fixtures for the loss gradient checks. Each case maps
// a logits tensor to a scalar loss with everything else held fixed.

#include <functional>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cks/losses.hpp"
#include "oracles.hpp"

namespace fd {

struct Case {
  std::string name;
  std::function<torch::Tensor(const torch::Tensor&)> f;
  torch::Tensor x;
};

inline std::vector<cks::Point> random_points(std::mt19937_64& rng, int n, int h, int w) {
  std::uniform_real_distribution<double> uy(0.0, h - 1.0), ux(0.0, w - 1.0);
  std::vector<cks::Point> p;
  for (int i = 0; i < n; ++i) p.push_back({uy(rng), ux(rng)});
  return p;
}

inline Case detection_case(std::mt19937_64& rng) {
  const int H = 32, W = 32;
  const auto targets = cks::detection_targets(random_points(rng, 4, H, W), H, W, {4, 8}, 1.0);
  const auto x = torch::randn({3 * (8 * 8 + 4 * 4)});
  auto f = [targets](const torch::Tensor& v) {
    cks::DetectionGrids g;
    const auto fine = v.narrow(0, 0, 3 * 64).view({3, 8, 8});
    const auto coarse = v.narrow(0, 3 * 64, 3 * 16).view({3, 4, 4});
    g.logits[4] = fine[0];
    g.offsets[4] = fine.slice(0, 1, 3);
    g.logits[8] = coarse[0];
    g.offsets[8] = coarse.slice(0, 1, 3);
    return cks::detection_loss(g, targets, 2.0);
  };
  return {"detection_loss", f, x};
}

inline cks::InstanceWindows random_windows(std::mt19937_64& rng, int n, int L, int H, int W) {
  return cks::make_windows(random_points(rng, n, H, W), torch::Tensor(), L, H, W);
}

inline Case principal_seg_case(std::mt19937_64& rng) {
  const int L = 8, H = 20, W = 20;
  const auto proto = random_windows(rng, 3, L, H, W);
  const auto Mc = torch::rand({H, W});
  auto f = [proto, Mc](const torch::Tensor& v) {
    auto w = proto;
    w.logits = v;
    return cks::principal_seg_loss(Mc, w, cks::KMode::PerInstanceWindow);
  };
  return {"principal_seg_loss", f, torch::randn({3, L, L})};
}

inline Case boundary_case(std::mt19937_64& rng) {
  const int L = 8, H = 20, W = 20;
  const auto proto = random_windows(rng, 3, L, H, W);
  const auto Bc = torch::rand({H, W});
  auto f = [proto, Bc](const torch::Tensor& v) {
    auto w = proto;
    w.logits = v;
    return cks::boundary_loss(cks::boundary_from_instances(w, 20, 20), Bc);
  };
  return {"boundary_loss", f, torch::randn({3, L, L}) * 2.0};
}

inline Case collapse_case(std::mt19937_64& rng) {
  const int L = 8;
  const auto proto = random_windows(rng, 3, L, 20, 20);
  auto f = [proto](const torch::Tensor& v) {
    auto w = proto;
    w.logits = v;
    return cks::collapse_penalty(w, 0.1);
  };
  return {"collapse_penalty", f, torch::randn({3, L, L}) - 1.0};
}

/// Runs `probes` random fixtures of every loss and returns the worst relative
/// error per loss name.
inline std::vector<std::pair<std::string, double>> run_suite(int probes, std::uint64_t seed, double h = 1e-3) {
  std::mt19937_64 rng(seed);
  torch::manual_seed(static_cast<std::int64_t>(seed));
  const std::vector<std::function<Case(std::mt19937_64&)>> makers{detection_case, principal_seg_case, boundary_case,
                                                                 collapse_case};
  std::vector<std::pair<std::string, double>> worst;
  for (const auto& make : makers) {
    double w = 0.0;
    std::string name;
    for (int k = 0; k < probes; ++k) {
      const auto c = make(rng);
      name = c.name;
      const auto v = oracle::probe_direction(c.f, c.x, rng);
      w = std::max(w, oracle::directional_check(c.f, c.x, v, h).relative_error());
    }
    worst.emplace_back(name, w);
  }
  return worst;
}

}  // namespace fd
