#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "depthseq/landmarks.hpp"
#include "depthseq/tensor.hpp"
#include "depthseq/volume.hpp"

namespace depthseq {

enum class PaddingSide { Left, Right };
// Where [CLS] sits in a left-padded sequence.
enum class ClsPosition { AfterPads, Front };

struct ModelConfig {
  std::size_t in_channels = 1;
  std::vector<std::size_t> encoder_channels{8, 16, 16};
  std::size_t d_model = 32;
  std::size_t n_layers = 1;
  std::size_t n_heads = 4;
  std::size_t conv_kernel_depth = 3;
  std::size_t d_max = 32;
  std::size_t n_landmarks = kDefaultLandmarks;
  std::size_t n_classes = 3;
  double dropout = 0.0;
  // Kernel depth of the encoder convolutions. 1 keeps the encoder strictly slice-wise.
  std::size_t encoder_kernel_depth = 1;
  PaddingSide padding_side = PaddingSide::Left;
  ClsPosition cls_position = ClsPosition::AfterPads;
  bool attention_enabled = true;

  std::size_t seq_len() const { return d_max + 1; }
  // Throws ValidationError on the first violated invariant.
  void check() const;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig config_from_json(const nlohmann::json& j);

// Named parameters; std::map keeps a fixed iteration order for init and I/O.
using ParamStore = std::map<std::string, tc::Tensor>;

struct Model {
  ModelConfig config;
  ParamStore params;
  std::string init_scheme = "uniform_fan_in";

  const tc::Tensor& param(const std::string& name) const;
  std::vector<tc::Tensor> parameters() const;
  std::size_t parameter_count() const;
};

// Parameter names and shapes implied by a config.
std::map<std::string, tc::Shape> parameter_shapes(const ModelConfig& c);

// Weights uniform in +-sqrt(1/fan_in), biases and norm shifts zero, norm scales one,
// [CLS] and positional embeddings uniform in +-sqrt(1/d_model).
Model init_model(const ModelConfig& c, std::uint64_t seed);

// HU clipped to [-100, 1500] and mapped to [0, 1].
inline constexpr double kHuLow = -100.0;
inline constexpr double kHuHigh = 1500.0;

// [B, 1, H, W, D]. All volumes must share dims.
tc::Tensor volumes_to_input(const std::vector<const Volume*>& volumes);

// [B, 1, H, W, D] -> [B, d_model, D]
tc::Tensor encode_slices(const Model& m, const tc::Tensor& x);

struct PreparedSequence {
  tc::Tensor tokens;  // [B, d_max+1, d_model]
  tc::AttentionMask mask;
  std::size_t cls_index = 0;
  std::size_t first_valid = 0;  // token position of slice 0
  std::size_t depth = 0;
};

// Token position of each slice and of [CLS] for a sequence of `depth` slices.
struct SequenceLayout {
  std::size_t cls_index = 0;
  std::size_t first_valid = 0;
  std::size_t pad_begin = 0;
  std::size_t pad_count = 0;
};
SequenceLayout sequence_layout(const ModelConfig& c, std::size_t depth);

PreparedSequence prepare_sequence(const Model& m, const tc::Tensor& features);

// Mask true only at slice tokens (not [CLS]).
tc::AttentionMask slice_mask(const PreparedSequence& s);

// One residual block; `layer` selects the parameters.
tc::Tensor depth_attention_block(const Model& m, std::size_t layer, const tc::Tensor& tokens,
                                 const tc::AttentionMask& mask);

struct ModelOutput {
  tc::Tensor landmark_logits;  // [B, N, d_max+1], token positions
  tc::Tensor landmark_probs;   // [B, N, d_max+1], exactly zero off slice tokens
  tc::Tensor cls_logits;       // [B, n_classes]
  tc::AttentionMask slice_mask;
  std::size_t first_valid = 0;
  std::size_t cls_index = 0;
  std::size_t depth = 0;

  // Distributions of batch element b restricted to the valid slices.
  PredictionSet prediction(std::size_t b) const;
};

// Blocks and heads on an already prepared sequence.
ModelOutput forward_sequence(const Model& m, const PreparedSequence& seq, std::mt19937_64* rng = nullptr);
ModelOutput forward(const Model& m, const tc::Tensor& input, std::mt19937_64* rng = nullptr);

struct FlopBreakdown {
  double encoder_flops = 0.0;
  double attention_flops = 0.0;  // QK^T and attention-weighted values
  double sequence_flops = 0.0;   // per-token work in the blocks (projections, MLP, convs)
  double head_flops = 0.0;
  double total = 0.0;
};

// Multiply-accumulates counted as 2 FLOPs. Attention runs over d_max+1 tokens
// regardless of D.
FlopBreakdown estimate_flops(const ModelConfig& c, const Dims& dims);
nlohmann::json to_json(const FlopBreakdown& f);

inline constexpr const char* kCheckpointMagic = "DSTCKPT1";
inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
  Model model;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double val_metric = 0.0;
};

std::string encode_checkpoint(const Checkpoint& c);
Checkpoint decode_checkpoint(const std::string& bytes);
void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace depthseq
