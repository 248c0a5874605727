#include "dvd/losses.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "dvd/ops.hpp"

namespace dvd {

namespace {

void check_unit_rows(const Tensor& e, const char* who) {
  if (e.dim() != 2) throw ShapeError(std::string(who) + ": expected [B,D], got " + shape_str(e.shape()));
  const std::size_t b = e.size(0), d = e.size(1);
  auto v = e.data();
  for (std::size_t i = 0; i < b; ++i) {
    double s = 0.0;
    for (std::size_t k = 0; k < d; ++k) s += v[i * d + k] * v[i * d + k];
    if (std::abs(std::sqrt(s) - 1.0) > 1e-6) {
      throw LossError(std::string(who) + ": row " + std::to_string(i) + " is not unit norm");
    }
  }
}

std::vector<std::size_t> diagonal(std::size_t b) {
  std::vector<std::size_t> idx(b);
  std::iota(idx.begin(), idx.end(), 0);
  return idx;
}

void check_logits(const Tensor& logits, std::span<const int> labels, std::size_t min_k, const char* who) {
  if (logits.dim() != 2) throw ShapeError(std::string(who) + ": expected [B,K], got " + shape_str(logits.shape()));
  if (logits.size(1) < min_k) {
    throw LossError(std::string(who) + ": needs at least " + std::to_string(min_k) + " classes");
  }
  if (labels.size() != logits.size(0)) throw ShapeError(std::string(who) + ": label count does not match batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= logits.size(1)) {
      throw LossError(std::string(who) + ": label " + std::to_string(y) + " out of range");
    }
  }
}

}  // namespace

LossValue contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, const Tensor& inv_tau) {
  check_unit_rows(img_emb, "contrastive_loss");
  check_unit_rows(txt_emb, "contrastive_loss");
  if (img_emb.shape() != txt_emb.shape()) {
    throw ShapeError("contrastive_loss: " + shape_str(img_emb.shape()) + " vs " + shape_str(txt_emb.shape()));
  }
  const std::size_t b = img_emb.size(0);
  auto logits = mul(matmul(img_emb, transpose(txt_emb)), inv_tau);  // [B, B]
  auto diag = diagonal(b);
  auto i2t = scale(mean(pick(log_softmax(logits, 1), diag)), -1.0);
  auto t2i = scale(mean(pick(log_softmax(transpose(logits), 1), diag)), -1.0);

  LossValue out{scale(add(i2t, t2i), 0.5), {}};
  out.diag.image_to_text = i2t.item();
  out.diag.text_to_image = t2i.item();
  out.diag.count = b;
  auto lv = logits.data();
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = lv.data() + i * b;
    hits += static_cast<std::size_t>(std::max_element(row, row + b) - row) == i;
  }
  out.diag.match_accuracy = static_cast<double>(hits) / static_cast<double>(b);
  return out;
}

LossValue contrastive_loss(const Tensor& img_emb, const Tensor& txt_emb, double tau) {
  if (!(tau > 0.0)) throw LossError("contrastive_loss: temperature must be positive");
  return contrastive_loss(img_emb, txt_emb, Tensor::scalar(1.0 / tau));
}

Tensor answer_nll(const Tensor& logits, const InstructionBatch& batch) {
  const std::size_t b = batch.batch(), t = batch.seq_len;
  if (logits.dim() != 3 || logits.size(0) != b || logits.size(1) != t) {
    throw ShapeError("answer_nll: logits " + shape_str(logits.shape()) + " do not match batch [" +
                     std::to_string(b) + "," + std::to_string(t) + "]");
  }
  const std::size_t v = logits.size(2);
  std::vector<double> weights(b * t, 0.0);
  std::vector<std::size_t> targets(b * t);
  for (std::size_t i = 0; i < b; ++i) {
    double count = 0.0;
    for (std::size_t k = 0; k < t; ++k) count += batch.answer_mask[i * t + k];
    if (count == 0.0) throw LossError("answer_nll: sample " + std::to_string(i) + " has no answer tokens");
    for (std::size_t k = 0; k < t; ++k) {
      weights[i * t + k] = -batch.answer_mask[i * t + k] / count;
      targets[i * t + k] = static_cast<std::size_t>(batch.text[i * t + k]);
    }
  }
  auto lp = pick(log_softmax(reshape(logits, {b * t, v}), 1), targets);
  return sum(reshape(mul(lp, Tensor({b * t}, std::move(weights))), {b, t}), 1);
}

LossValue instruction_loss(const Captioner& cap, const VisionEncoder& vision, const InstructionBatch& batch) {
  auto per = answer_nll(caption_logits(cap, vision, batch), batch);
  LossValue out{mean(per), {}};
  for (double m : batch.answer_mask) out.diag.count += m > 0.0;
  return out;
}

InstructionBatch caption_batch(const Tensor& images, std::span<const int> captions, std::size_t seq_len) {
  const std::size_t b = images.size(0);
  if (seq_len == 0 || captions.size() != b * seq_len) throw ShapeError("captioning_loss: captions do not match batch");
  std::vector<TokenSeq> answers(b);
  for (std::size_t i = 0; i < b; ++i) {
    auto row = captions.subspan(i * seq_len, seq_len);
    const auto len = caption_length(row);
    if (len == 0 || row[0] == kPad || row[0] == kEos) throw LossError("captioning_loss: empty caption");
    answers[i].assign(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(len));
  }
  return make_instruction_batch(images, TokenSeq{}, answers);
}

LossValue captioning_loss(const Captioner& cap, const VisionEncoder& vision, const Tensor& images,
                          std::span<const int> captions, std::size_t seq_len) {
  return instruction_loss(cap, vision, caption_batch(images, captions, seq_len));
}

Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels) {
  check_logits(logits, labels, 2, "cross_entropy");
  std::vector<std::size_t> idx(labels.begin(), labels.end());
  return scale(pick(log_softmax(logits, 1), idx), -1.0);
}

LossValue cross_entropy(const Tensor& logits, std::span<const int> labels) {
  LossValue out{mean(cross_entropy_per_sample(logits, labels)), {}};
  out.diag.count = labels.size();
  return out;
}

Tensor dlr_per_sample(const Tensor& logits, std::span<const int> labels, std::optional<std::span<const int>> targets) {
  check_logits(logits, labels, targets ? 4 : 3, "dlr_loss");
  const std::size_t b = logits.size(0), k = logits.size(1);
  if (targets) {
    if (targets->size() != b) throw ShapeError("dlr_loss: target count does not match batch");
    for (int t : *targets) {
      if (t < 0 || static_cast<std::size_t>(t) >= k) throw LossError("dlr_loss: target out of range");
    }
  }
  auto z = logits.data();
  std::vector<std::size_t> y(b), other(b), p1(b), p3(b), p4(b);
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = z.data() + i * k;
    std::vector<std::size_t> order(k);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t c) { return row[a] > row[c]; });
    y[i] = static_cast<std::size_t>(labels[i]);
    p1[i] = order[0];
    p3[i] = order[2];
    p4[i] = targets ? order[3] : order[2];
    other[i] = targets ? static_cast<std::size_t>((*targets)[i]) : (order[0] == y[i] ? order[1] : order[0]);
    const double den = targets ? row[p1[i]] - 0.5 * (row[p3[i]] + row[p4[i]]) : row[p1[i]] - row[p3[i]];
    if (den == 0.0) throw LossError("dlr_loss: degenerate logits in row " + std::to_string(i));
  }
  auto num = sub(pick(logits, y), pick(logits, other));
  Tensor den = targets ? sub(pick(logits, p1), scale(add(pick(logits, p3), pick(logits, p4)), 0.5))
                       : sub(pick(logits, p1), pick(logits, p3));
  return scale(div(num, den), -1.0);
}

LossValue dlr_loss(const Tensor& logits, std::span<const int> labels, std::optional<std::span<const int>> targets) {
  LossValue out{mean(dlr_per_sample(logits, labels, targets)), {}};
  out.diag.count = labels.size();
  return out;
}

}  // namespace dvd
