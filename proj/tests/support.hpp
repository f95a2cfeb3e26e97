#pragma once

#include <unistd.h>

#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "manipshield/decoders.hpp"

namespace support {

using manipshield::decoders::Heads;
using manipshield::decoders::HeadsGrad;
using manipshield::decoders::LayerGrad;
using manipshield::decoders::LoraLinear;

// Every trainable parameter of the heads in a fixed order:
// detection, cue, localization; per layer W, bias, A, B (column-major).
inline std::vector<double*> parameters(Heads& heads) {
  std::vector<double*> out;
  for (auto* head : {&heads.detection, &heads.cue, &heads.localization}) {
    for (auto& L : head->layers) {
      for (Eigen::Index i = 0; i < L.weight.size(); ++i) out.push_back(L.weight.data() + i);
      for (Eigen::Index i = 0; i < L.bias.size(); ++i) out.push_back(L.bias.data() + i);
      for (Eigen::Index i = 0; i < L.lora_a.size(); ++i) out.push_back(L.lora_a.data() + i);
      for (Eigen::Index i = 0; i < L.lora_b.size(); ++i) out.push_back(L.lora_b.data() + i);
    }
  }
  return out;
}

// Gradient in the same order as parameters(); heads without a gradient
// (zero loss weight) contribute zeros.
inline Eigen::VectorXd flatten(const Heads& heads, const HeadsGrad& grad) {
  std::vector<double> v;
  auto push = [&](const auto& head, const std::vector<LayerGrad>& g) {
    for (std::size_t l = 0; l < head.layers.size(); ++l) {
      const auto& L = head.layers[l];
      auto add = [&](const Eigen::MatrixXd* gm, Eigen::Index n) {
        for (Eigen::Index i = 0; i < n; ++i) v.push_back(gm ? gm->data()[i] : 0.0);
      };
      const bool have = l < g.size();
      add(have ? &g[l].weight : nullptr, L.weight.size());
      for (Eigen::Index i = 0; i < L.bias.size(); ++i) v.push_back(have ? g[l].bias[i] : 0.0);
      add(have ? &g[l].lora_a : nullptr, L.lora_a.size());
      add(have ? &g[l].lora_b : nullptr, L.lora_b.size());
    }
  };
  push(heads.detection, grad.detection);
  push(heads.cue, grad.cue);
  push(heads.localization, grad.localization);
  return Eigen::Map<Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("manipshield-" + tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  std::string file(const std::string& name) const { return (path_ / name).string(); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace support
