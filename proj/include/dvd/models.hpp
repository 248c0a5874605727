#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dvd/data.hpp"
#include "dvd/random.hpp"
#include "dvd/tensor.hpp"

namespace dvd {

struct ModelConfig {
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t depth = 2;
  std::size_t mlp_ratio = 2;
  std::size_t embed_dim = 32;
  std::size_t grid = 4;          // patches per side
  std::size_t max_text_len = 24;  // text encoder positions
  std::size_t max_seq_len = 64;   // captioner prefix + text
  double init_logit_scale = 2.659260036932778;  // ln(1 / 0.07)
  double max_logit_scale = 4.605170185988092;   // ln(100)
};

struct Linear {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

struct LayerNormParams {
  Tensor gamma;
  Tensor beta;
};

struct Block {
  LayerNormParams ln1;
  Linear qkv;
  Linear out;
  LayerNormParams ln2;
  Linear fc1;
  Linear fc2;
};

struct VisionEncoder {
  std::size_t resolution = 32;
  Linear patch;     // [3 p p, W]
  Tensor position;  // [grid^2, W]
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  Tensor proj;  // [W, E]
};

struct TextEncoder {
  Tensor token;     // [V, W]
  Tensor position;  // [max_text_len, W]
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  Tensor proj;  // [W, E]
};

/// Vision encoder, text encoder and the log inverse temperature
/// (1 / tau = exp(logit_scale)).
struct DualEncoder {
  ModelConfig config;
  VisionEncoder vision;
  TextEncoder text;
  Tensor logit_scale;  // [1]
};

/// Image-prefix projector plus a decoder over [prefix][text].
struct Captioner {
  ModelConfig config;
  Linear projector;  // [W_vision, W]
  Tensor token;      // [V, W]
  Tensor position;   // [max_seq_len, W]
  std::vector<Block> blocks;
  LayerNormParams ln_final;
  Linear head;  // [W, V]
};

VisionEncoder init_vision(const ModelConfig& cfg, std::size_t resolution, Rng& rng);
TextEncoder init_text(const ModelConfig& cfg, Rng& rng);
DualEncoder init_dual_encoder(const ModelConfig& cfg, std::size_t resolution, std::uint64_t seed);
Captioner init_captioner(const ModelConfig& cfg, std::uint64_t seed);

/// Fresh patch embedding for a new input resolution; every other vision
/// weight, the position table included, is kept.
void reinit_patch_embedding(VisionEncoder& v, const ModelConfig& cfg, std::size_t resolution, Rng& rng);
/// Patch embedding carried to a new resolution by resampling each kernel;
/// under integer upscaling an image and its block average embed identically.
void resample_patch_embedding(VisionEncoder& v, const ModelConfig& cfg, std::size_t resolution);

ParamList params_of(const VisionEncoder& v, const std::string& prefix = "vision");
ParamList params_of(const TextEncoder& t, const std::string& prefix = "text");
ParamList params_of(const DualEncoder& m);
ParamList params_of(const Captioner& c, const std::string& prefix = "captioner");

void set_requires_grad(const ParamList& params, bool flag);
/// Parameters whose requires_grad flag is set.
ParamList trainable(const ParamList& params);

/// Token features after the final layer norm: [B, grid^2, W].
Tensor vision_features(const VisionEncoder& v, const ModelConfig& cfg, const Tensor& images);
/// [B, E] unit rows.
Tensor encode_image(const DualEncoder& m, const Tensor& images);
/// `ids` is [B, T] row-major; PAD positions are masked out of attention and
/// pooling. [B, E] unit rows.
Tensor encode_text(const DualEncoder& m, std::span<const int> ids, std::size_t seq_len);
/// exp(logit_scale) clamped to the configured maximum, differentiable.
Tensor inverse_temperature(const DualEncoder& m);
void clamp_logit_scale(DualEncoder& m);

/// Decoder input for a batch: text rows are [BOS][instruction][SEP][answer]
/// padded with PAD; `answer_mask` marks the answer positions (EOS included).
struct InstructionBatch {
  Tensor images;  // [B, 3, R, R]
  std::vector<int> text;
  std::size_t seq_len = 0;
  std::vector<double> answer_mask;

  std::size_t batch() const { return images.size(0); }
};

/// Builds the batch; an empty instruction gives [BOS][SEP][answer].
InstructionBatch make_instruction_batch(const Tensor& images, std::span<const TokenSeq> instructions,
                                        std::span<const TokenSeq> answers);
InstructionBatch make_instruction_batch(const Tensor& images, const TokenSeq& instruction,
                                        std::span<const TokenSeq> answers);

/// Row t of the result holds logits for text token t given the prefix and
/// text tokens before t: [B, T, V].
Tensor caption_logits(const Captioner& cap, const VisionEncoder& vision, const InstructionBatch& batch);
/// Same from precomputed prefix features [B, grid^2, W_vision].
Tensor caption_logits_from_features(const Captioner& cap, const Tensor& features, std::span<const int> text,
                                    std::size_t seq_len);

/// Greedy decoding of one answer per image, ties broken toward the lowest id.
/// Stops at EOS (not included in the result) or after max_new tokens.
std::vector<TokenSeq> generate(const Captioner& cap, const VisionEncoder& vision, const Tensor& images,
                               const TokenSeq& instruction, std::size_t max_new);

/// The instruction used for captioning, "describe the image".
const TokenSeq& describe_instruction();

}  // namespace dvd
