#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "casdiff/conditioning.hpp"
#include "casdiff/diffusion.hpp"
#include "casdiff/layers.hpp"

namespace casdiff {

struct StageSpec {
  int channels = 32;
  int res_blocks = 1;
  bool cross_attn = false;
  bool self_attn = false;
};

/// Resolved U-Net topology shared by both denoisers.
///
/// Stage 0 runs at full resolution; each later stage halves it. A middle
/// block (res, attention as in the last stage, res) sits at the bottom.
struct UNetSpec {
  int in_channels = 3;   // channels entering the first conv (after any low-res concat)
  int out_channels = 3;  // channels of x_hat
  std::vector<StageSpec> stages;
  int embed_dim = 64;  // text embedding width
  int norm_groups = 8;
  int heads = 4;
  bool lowres_concat = false;  // upsample the low-res image and concat to z
  int scale_factor = 1;        // HR size / LR size when lowres_concat
  bool aug_embedding = false;  // add an embedding of the augmentation level

  int time_embed_dim() const { return 4 * stages.front().channels; }
  void validate() const;
};

/// Base text-to-image U-Net. The defaults follow the reference topology:
/// 4 stages, 3 residual blocks each, text cross-attention at the 3
/// lowest-resolution stages.
struct BaseUNetConfig {
  int in_channels = 3;
  int base_width = 32;
  std::vector<int> channel_mult{1, 2, 2, 2};
  int num_stages = 4;
  int res_blocks_per_stage = 3;
  std::vector<int> cross_attn_stages{1, 2, 3};
  int embed_dim = 64;
  int norm_groups = 8;

  UNetSpec spec() const;
  void validate() const;
  bool reference_topology() const;
};

/// Super-resolution U-Net: residual blocks shifted toward low resolution,
/// self-attention only in the last stage, text cross-attention kept there.
struct SRUNetConfig {
  int in_channels = 6;  // image channels x 2
  int base_width = 16;
  std::vector<int> channel_mult{1, 2, 4};
  std::vector<int> res_blocks{1, 2, 2};
  int num_stages = 3;
  std::vector<int> self_attn_stages{2};
  bool keep_text_cross_attn = true;
  int embed_dim = 64;
  int scale_factor = 2;
  int norm_groups = 8;

  int image_channels() const { return in_channels / 2; }
  UNetSpec spec() const;
  void validate() const;
};

enum class ModelKind { base, sr };

/// Serializable description of one denoiser.
struct ModelConfig {
  ModelKind kind = ModelKind::base;
  BaseUNetConfig base;
  SRUNetConfig sr;

  UNetSpec spec() const { return kind == ModelKind::base ? base.spec() : sr.spec(); }
};

void to_json(nlohmann::json& j, const BaseUNetConfig& c);
void from_json(const nlohmann::json& j, BaseUNetConfig& c);
void to_json(nlohmann::json& j, const SRUNetConfig& c);
void from_json(const nlohmann::json& j, SRUNetConfig& c);
void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Presets. Desk presets back the tests; the full-scale SR preset
/// (128 -> 256) is only ever counted, never run.
BaseUNetConfig base_desk_preset(int embed_dim = 64);
SRUNetConfig sr_desk_preset(int embed_dim = 64);
BaseUNetConfig base_tiny_preset(int embed_dim = 16);
SRUNetConfig sr_tiny_preset(int embed_dim = 16);
SRUNetConfig sr_full_scale_preset(int embed_dim = 64);

/// Exact number of trainable scalars, without allocating the model.
std::size_t parameter_count(const UNetSpec& spec);

template <typename T>
class UNet {
 public:
  UNet(const UNetSpec& spec, std::uint64_t seed);
  ~UNet();
  UNet(UNet&&) noexcept;
  UNet& operator=(UNet&&) noexcept;

  /// x_hat for a batch. Throws InvalidArgument on shape problems.
  Var<T> forward(const ModelInput<T>& input) const;

  const UNetSpec& spec() const;
  ParameterStore<T>& params();
  const ParameterStore<T>& params() const;
  std::size_t parameter_count() const { return params().count(); }

  /// Wraps this model; the UNet must outlive the returned callable.
  DenoiserModel<T> denoiser() const;

 private:
  friend std::size_t parameter_count(const UNetSpec& spec);
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

/// Single-image convenience wrappers around UNet::forward.
template <typename T>
Tensor<T> base_denoise(const UNet<T>& model, const Tensor<T>& z, double t, const TextConditioning& cond);

template <typename T>
Tensor<T> sr_denoise(const UNet<T>& model, const Tensor<T>& z, double t, const TextConditioning& cond,
                     const AugmentedLowRes<T>& lr_cond);

}  // namespace casdiff
