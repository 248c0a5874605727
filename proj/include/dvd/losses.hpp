#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dvd/models.hpp"
#include "dvd/tensor.hpp"

namespace dvd {

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct LossDiagnostics {
  double image_to_text = 0.0;  // contrastive directions
  double text_to_image = 0.0;
  double match_accuracy = 0.0;  // in-batch argmax hits, image side
  std::size_t count = 0;        // terms averaged into the value
};

/// A differentiable scalar plus detached diagnostics.
struct LossValue {
  Tensor value;
  LossDiagnostics diag;

  double item() const { return value.item(); }
};

/// Symmetric image/text cross-entropy over logits = inv_tau * cos, averaged
/// over both directions. Rows must be unit norm.
LossValue contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& inv_tau);
LossValue contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, double tau);

/// Per-sample mean negative log-likelihood over answer positions: [B].
Tensor answer_nll(const Tensor& logits, const InstructionBatch& batch);

/// Mean over samples of the per-sample answer NLL.
LossValue instruction_loss(const Captioner& cap, const VisionEncoder& vision, const InstructionBatch& batch);
/// Autoregressive caption loss, the instruction loss with an empty
/// instruction. `captions` is [B, T] row-major with PAD after EOS.
LossValue captioning_loss(const Captioner& cap, const VisionEncoder& vision, const Tensor& images,
                          std::span<const int> captions, std::size_t seq_len);
InstructionBatch caption_batch(const Tensor& images, std::span<const int> captions, std::size_t seq_len);

/// -log softmax(logits)[label] per row: [B].
Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);
LossValue cross_entropy(const Tensor& logits, std::span<const int> labels);

/// Difference-of-logits-ratio loss per row: [B]. Untargeted:
///   -(z_y - max_{i != y} z_i) / (z_pi1 - z_pi3)
/// targeted toward t:
///   -(z_y - z_t) / (z_pi1 - (z_pi3 + z_pi4) / 2)
/// with pi the descending order of z.
Tensor dlr_per_sample(const Tensor& logits, std::span<const int> labels,
                      std::optional<std::span<const int>> targets = std::nullopt);
LossValue dlr_loss(const Tensor& logits, std::span<const int> labels,
                   std::optional<std::span<const int>> targets = std::nullopt);

}  // namespace dvd
