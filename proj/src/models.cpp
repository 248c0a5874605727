#include "dvd/models.hpp"

#include <cmath>

#include "dvd/ops.hpp"

namespace dvd {

namespace {

constexpr double kMasked = -1e9;

Tensor xavier(Rng& rng, std::size_t fan_in, std::size_t fan_out) {
  const double s = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> v(fan_in * fan_out);
  for (auto& x : v) x = rng.uniform(-s, s);
  return Tensor({fan_in, fan_out}, std::move(v));
}

Linear init_linear(Rng& rng, std::size_t in, std::size_t out) { return {xavier(rng, in, out), Tensor({out}, 0.0)}; }

LayerNormParams init_ln(std::size_t width) { return {Tensor({width}, 1.0), Tensor({width}, 0.0)}; }

Block init_block(const ModelConfig& cfg, Rng& rng) {
  const std::size_t w = cfg.width;
  Block b;
  b.ln1 = init_ln(w);
  b.qkv = init_linear(rng, w, 3 * w);
  b.out = init_linear(rng, w, w);
  b.ln2 = init_ln(w);
  b.fc1 = init_linear(rng, w, cfg.mlp_ratio * w);
  b.fc2 = init_linear(rng, cfg.mlp_ratio * w, w);
  return b;
}

std::vector<Block> init_blocks(const ModelConfig& cfg, Rng& rng) {
  std::vector<Block> blocks;
  for (std::size_t i = 0; i < cfg.depth; ++i) blocks.push_back(init_block(cfg, rng));
  return blocks;
}

void push(ParamList& out, const std::string& name, const Tensor& t) { out.push_back({name, t}); }

void push(ParamList& out, const std::string& name, const Linear& l) {
  push(out, name + ".w", l.w);
  push(out, name + ".b", l.b);
}

void push(ParamList& out, const std::string& name, const LayerNormParams& ln) {
  push(out, name + ".gamma", ln.gamma);
  push(out, name + ".beta", ln.beta);
}

void push(ParamList& out, const std::string& name, const std::vector<Block>& blocks) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const std::string p = name + "." + std::to_string(i);
    const auto& b = blocks[i];
    push(out, p + ".ln1", b.ln1);
    push(out, p + ".qkv", b.qkv);
    push(out, p + ".out", b.out);
    push(out, p + ".ln2", b.ln2);
    push(out, p + ".fc1", b.fc1);
    push(out, p + ".fc2", b.fc2);
  }
}

Tensor linear(const Tensor& x, const Linear& l) { return add(matmul(x, l.w), l.b); }

Tensor norm(const Tensor& x, const LayerNormParams& ln) { return layer_norm(x, ln.gamma, ln.beta); }

// x: [B, S, W]. mask: additive, [S, S] or [B*H, S, S], or undefined.
Tensor attention(const Block& blk, const ModelConfig& cfg, const Tensor& x, const Tensor& mask) {
  const std::size_t b = x.size(0), s = x.size(1), w = x.size(2), h = cfg.heads, dh = w / h;
  auto qkv = linear(x, blk.qkv);  // [B, S, 3W]
  auto heads = [&](std::size_t part) {
    auto t = reshape(slice(qkv, 2, part * w, (part + 1) * w), {b, s, h, dh});
    return reshape(transpose(t, {0, 2, 1, 3}), {b * h, s, dh});
  };
  auto q = heads(0);
  auto k = heads(1);
  auto v = heads(2);
  auto scores = scale(matmul(q, transpose(k)), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = add(scores, mask);
  auto ctx = matmul(softmax(scores, 2), v);  // [B*H, S, dh]
  ctx = reshape(transpose(reshape(ctx, {b, h, s, dh}), {0, 2, 1, 3}), {b, s, w});
  return linear(ctx, blk.out);
}

Tensor run_blocks(const std::vector<Block>& blocks, const ModelConfig& cfg, Tensor x, const Tensor& mask) {
  for (const auto& blk : blocks) {
    x = add(x, attention(blk, cfg, norm(x, blk.ln1), mask));
    x = add(x, linear(gelu(linear(norm(x, blk.ln2), blk.fc1)), blk.fc2));
  }
  return x;
}

void check_ids(std::span<const int> ids) {
  const int v = Vocabulary::get().size();
  for (int id : ids) {
    if (id < 0 || id >= v) throw VocabError("token id out of range: " + std::to_string(id));
  }
}

}  // namespace

VisionEncoder init_vision(const ModelConfig& cfg, std::size_t resolution, Rng& rng) {
  VisionEncoder v;
  reinit_patch_embedding(v, cfg, resolution, rng);
  v.position = xavier(rng, cfg.grid * cfg.grid, cfg.width);
  v.blocks = init_blocks(cfg, rng);
  v.ln_final = init_ln(cfg.width);
  v.proj = xavier(rng, cfg.width, cfg.embed_dim);
  return v;
}

void reinit_patch_embedding(VisionEncoder& v, const ModelConfig& cfg, std::size_t resolution, Rng& rng) {
  if (resolution % cfg.grid != 0) {
    throw ShapeError("vision: resolution " + std::to_string(resolution) + " not divisible by the patch grid");
  }
  const std::size_t p = resolution / cfg.grid;
  v.resolution = resolution;
  v.patch = init_linear(rng, 3 * p * p, cfg.width);
}

void resample_patch_embedding(VisionEncoder& v, const ModelConfig& cfg, std::size_t resolution) {
  if (resolution % cfg.grid != 0) {
    throw ShapeError("vision: resolution " + std::to_string(resolution) + " not divisible by the patch grid");
  }
  const std::size_t p0 = v.resolution / cfg.grid;
  const std::size_t p1 = resolution / cfg.grid;
  const std::size_t width = v.patch.w.size(1);
  const auto w0 = v.patch.w.data();
  // Nearest-neighbour resampling of each kernel, rescaled so a patch of
  // constant colour keeps its response.
  const double gain = static_cast<double>(p0 * p0) / static_cast<double>(p1 * p1);
  std::vector<double> w1(3 * p1 * p1 * width);
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < p1; ++i) {
      for (std::size_t j = 0; j < p1; ++j) {
        const std::size_t src = c * p0 * p0 + (i * p0 / p1) * p0 + (j * p0 / p1);
        const std::size_t dst = c * p1 * p1 + i * p1 + j;
        for (std::size_t k = 0; k < width; ++k) w1[dst * width + k] = gain * w0[src * width + k];
      }
    }
  }
  v.resolution = resolution;
  v.patch.w = Tensor({3 * p1 * p1, width}, std::move(w1));
  v.patch.b = v.patch.b.detach().clone();
}

TextEncoder init_text(const ModelConfig& cfg, Rng& rng) {
  TextEncoder t;
  const auto vocab = static_cast<std::size_t>(Vocabulary::get().size());
  t.token = xavier(rng, vocab, cfg.width);
  t.position = xavier(rng, cfg.max_text_len, cfg.width);
  t.blocks = init_blocks(cfg, rng);
  t.ln_final = init_ln(cfg.width);
  t.proj = xavier(rng, cfg.width, cfg.embed_dim);
  return t;
}

DualEncoder init_dual_encoder(const ModelConfig& cfg, std::size_t resolution, std::uint64_t seed) {
  Rng vision_rng(Rng::derive(seed, 1));
  Rng text_rng(Rng::derive(seed, 2));
  DualEncoder m;
  m.config = cfg;
  m.vision = init_vision(cfg, resolution, vision_rng);
  m.text = init_text(cfg, text_rng);
  m.logit_scale = Tensor::scalar(cfg.init_logit_scale);
  return m;
}

Captioner init_captioner(const ModelConfig& cfg, std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 3));
  const auto vocab = static_cast<std::size_t>(Vocabulary::get().size());
  Captioner c;
  c.config = cfg;
  c.projector = init_linear(rng, cfg.width, cfg.width);
  c.token = xavier(rng, vocab, cfg.width);
  c.position = xavier(rng, cfg.max_seq_len, cfg.width);
  c.blocks = init_blocks(cfg, rng);
  c.ln_final = init_ln(cfg.width);
  c.head = init_linear(rng, cfg.width, vocab);
  return c;
}

ParamList params_of(const VisionEncoder& v, const std::string& prefix) {
  ParamList out;
  push(out, prefix + ".patch", v.patch);
  push(out, prefix + ".position", v.position);
  push(out, prefix + ".blocks", v.blocks);
  push(out, prefix + ".ln_final", v.ln_final);
  push(out, prefix + ".proj", v.proj);
  return out;
}

ParamList params_of(const TextEncoder& t, const std::string& prefix) {
  ParamList out;
  push(out, prefix + ".token", t.token);
  push(out, prefix + ".position", t.position);
  push(out, prefix + ".blocks", t.blocks);
  push(out, prefix + ".ln_final", t.ln_final);
  push(out, prefix + ".proj", t.proj);
  return out;
}

ParamList params_of(const DualEncoder& m) {
  auto out = params_of(m.vision);
  auto text = params_of(m.text);
  out.insert(out.end(), text.begin(), text.end());
  push(out, "logit_scale", m.logit_scale);
  return out;
}

ParamList params_of(const Captioner& c, const std::string& prefix) {
  ParamList out;
  push(out, prefix + ".projector", c.projector);
  push(out, prefix + ".token", c.token);
  push(out, prefix + ".position", c.position);
  push(out, prefix + ".blocks", c.blocks);
  push(out, prefix + ".ln_final", c.ln_final);
  push(out, prefix + ".head", c.head);
  return out;
}

void set_requires_grad(const ParamList& params, bool flag) {
  for (const auto& p : params) {
    Tensor t = p.value;
    t.set_requires_grad(flag);
  }
}

ParamList trainable(const ParamList& params) {
  ParamList out;
  for (const auto& p : params) {
    if (p.value.requires_grad()) out.push_back(p);
  }
  return out;
}

Tensor vision_features(const VisionEncoder& v, const ModelConfig& cfg, const Tensor& images) {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != v.resolution || s[3] != v.resolution) {
    throw ShapeError("encode_image: expected [B,3," + std::to_string(v.resolution) + "," +
                     std::to_string(v.resolution) + "], got " + shape_str(s));
  }
  const std::size_t b = s[0], g = cfg.grid, p = v.resolution / g;
  auto x = scale(add_scalar(images, -0.5), 4.0);
  x = reshape(x, {b, 3, g, p, g, p});
  x = reshape(transpose(x, {0, 2, 4, 1, 3, 5}), {b, g * g, 3 * p * p});
  x = add(linear(x, v.patch), v.position);
  x = run_blocks(v.blocks, cfg, x, Tensor());
  return norm(x, v.ln_final);
}

Tensor encode_image(const DualEncoder& m, const Tensor& images) {
  auto f = mean(vision_features(m.vision, m.config, images), 1);  // [B, W]
  return l2_normalize(matmul(f, m.vision.proj), 1);
}

Tensor encode_text(const DualEncoder& m, std::span<const int> ids, std::size_t seq_len) {
  const auto& cfg = m.config;
  if (seq_len == 0 || ids.size() % seq_len != 0) throw ShapeError("encode_text: ids not a multiple of seq_len");
  if (seq_len > cfg.max_text_len) {
    throw ShapeError("encode_text: length " + std::to_string(seq_len) + " exceeds " +
                     std::to_string(cfg.max_text_len));
  }
  check_ids(ids);
  const std::size_t b = ids.size() / seq_len, h = cfg.heads;
  auto x = embedding(m.text.token, ids, {b, seq_len});
  x = add(x, slice(m.text.position, 0, 0, seq_len));

  std::vector<double> mask(b * h * seq_len * seq_len, 0.0);
  std::vector<double> pool(b * seq_len, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t live = 0;
    for (std::size_t t = 0; t < seq_len; ++t) live += ids[i * seq_len + t] != kPad;
    if (live == 0) throw VocabError("encode_text: sequence of only PAD tokens");
    for (std::size_t t = 0; t < seq_len; ++t) {
      if (ids[i * seq_len + t] == kPad) {
        for (std::size_t r = 0; r < h * seq_len; ++r) mask[(i * h * seq_len + r) * seq_len + t] = kMasked;
      } else {
        pool[i * seq_len + t] = 1.0 / static_cast<double>(live);
      }
    }
  }
  x = run_blocks(m.text.blocks, cfg, x, Tensor({b * h, seq_len, seq_len}, std::move(mask)));
  x = norm(x, m.text.ln_final);
  auto pooled = reshape(matmul(Tensor({b, 1, seq_len}, std::move(pool)), x), {b, cfg.width});
  return l2_normalize(matmul(pooled, m.text.proj), 1);
}

Tensor inverse_temperature(const DualEncoder& m) {
  return exp(clamp(m.logit_scale, -m.config.max_logit_scale, m.config.max_logit_scale));
}

void clamp_logit_scale(DualEncoder& m) {
  auto v = m.logit_scale.data_mut();
  v[0] = std::clamp(v[0], -m.config.max_logit_scale, m.config.max_logit_scale);
}

// ---------------------------------------------------------------------------

InstructionBatch make_instruction_batch(const Tensor& images, std::span<const TokenSeq> instructions,
                                        std::span<const TokenSeq> answers) {
  const std::size_t b = images.size(0);
  if (instructions.size() != b || answers.size() != b) {
    throw ShapeError("make_instruction_batch: " + std::to_string(b) + " images but " +
                     std::to_string(instructions.size()) + " instructions and " + std::to_string(answers.size()) +
                     " answers");
  }
  InstructionBatch out;
  out.images = images;
  for (std::size_t i = 0; i < b; ++i) {
    if (answers[i].empty()) throw std::invalid_argument("make_instruction_batch: empty answer");
    out.seq_len = std::max(out.seq_len, instructions[i].size() + answers[i].size() + 2);
  }
  out.text.assign(b * out.seq_len, kPad);
  out.answer_mask.assign(b * out.seq_len, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    std::size_t t = i * out.seq_len;
    out.text[t++] = kBos;
    for (int id : instructions[i]) out.text[t++] = id;
    out.text[t++] = kSep;
    for (int id : answers[i]) {
      out.answer_mask[t] = 1.0;
      out.text[t++] = id;
    }
  }
  check_ids(out.text);
  return out;
}

InstructionBatch make_instruction_batch(const Tensor& images, const TokenSeq& instruction,
                                        std::span<const TokenSeq> answers) {
  std::vector<TokenSeq> inst(images.size(0), instruction);
  return make_instruction_batch(images, inst, answers);
}

Tensor caption_logits_from_features(const Captioner& cap, const Tensor& features, std::span<const int> text,
                                    std::size_t seq_len) {
  const auto& cfg = cap.config;
  const std::size_t b = features.size(0), p = features.size(1);
  if (seq_len == 0 || text.size() != b * seq_len) throw ShapeError("caption_logits: text does not match batch");
  const std::size_t s = p + seq_len - 1;
  if (s > cfg.max_seq_len) {
    throw ShapeError("caption_logits: sequence length " + std::to_string(s) + " exceeds " +
                     std::to_string(cfg.max_seq_len));
  }
  check_ids(text);
  // Decoder input drops the last text token; output row P-1+t predicts token t.
  std::vector<int> input;
  input.reserve(b * (seq_len - 1));
  for (std::size_t i = 0; i < b; ++i) {
    input.insert(input.end(), text.begin() + static_cast<std::ptrdiff_t>(i * seq_len),
                 text.begin() + static_cast<std::ptrdiff_t>((i + 1) * seq_len - 1));
  }
  Tensor x = linear(features, cap.projector);
  if (seq_len > 1) {
    std::vector<Tensor> parts{x, embedding(cap.token, input, {b, seq_len - 1})};
    x = concat(parts, 1);
  }
  x = add(x, slice(cap.position, 0, 0, s));

  // Prefix attends within the prefix; text attends to the prefix and its past.
  std::vector<double> mask(s * s, 0.0);
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      const bool visible = i < p ? j < p : j <= i;
      if (!visible) mask[i * s + j] = kMasked;
    }
  }
  x = run_blocks(cap.blocks, cfg, x, Tensor({s, s}, std::move(mask)));
  x = norm(slice(x, 1, p - 1, s), cap.ln_final);
  return linear(x, cap.head);
}

Tensor caption_logits(const Captioner& cap, const VisionEncoder& vision, const InstructionBatch& batch) {
  auto f = vision_features(vision, cap.config, batch.images);
  return caption_logits_from_features(cap, f, batch.text, batch.seq_len);
}

std::vector<TokenSeq> generate(const Captioner& cap, const VisionEncoder& vision, const Tensor& images,
                               const TokenSeq& instruction, std::size_t max_new) {
  if (max_new > 32) throw std::invalid_argument("generate: max_new exceeds 32");
  NoGradGuard guard;
  const std::size_t b = images.size(0);
  const auto vocab = static_cast<std::size_t>(Vocabulary::get().size());
  auto f = vision_features(vision, cap.config, images);

  std::vector<std::vector<int>> rows(b);
  for (auto& r : rows) {
    r.push_back(kBos);
    r.insert(r.end(), instruction.begin(), instruction.end());
    r.push_back(kSep);
  }
  std::vector<TokenSeq> out(b);
  std::vector<bool> done(b, max_new == 0);
  for (std::size_t step = 0; step < max_new; ++step) {
    // One placeholder slot so the last row predicts the next token.
    const std::size_t len = rows[0].size() + 1;
    std::vector<int> text;
    text.reserve(b * len);
    for (const auto& r : rows) {
      text.insert(text.end(), r.begin(), r.end());
      text.push_back(kPad);
    }
    auto logits = caption_logits_from_features(cap, f, text, len);
    auto lv = logits.data();
    bool all_done = true;
    for (std::size_t i = 0; i < b; ++i) {
      int next = kEos;
      if (!done[i]) {
        const double* row = lv.data() + (i * len + len - 1) * vocab;
        std::size_t best = 0;
        for (std::size_t k = 1; k < vocab; ++k) {
          if (row[k] > row[best]) best = k;
        }
        next = static_cast<int>(best);
        if (next == kEos) {
          done[i] = true;
        } else {
          out[i].push_back(next);
        }
      }
      rows[i].push_back(next);
      all_done = all_done && done[i];
    }
    if (all_done) break;
  }
  return out;
}

const TokenSeq& describe_instruction() {
  static const TokenSeq inst = tokenize("describe the image");
  return inst;
}

}  // namespace dvd
