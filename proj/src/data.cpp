#include "dvd/data.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <unordered_map>

#include "dvd/checkpoint.hpp"
#include "dvd/random.hpp"

namespace dvd {

namespace {

constexpr std::array<const char*, kNumShapes> kShapeNames{"circle", "square", "triangle", "cross"};
constexpr std::array<const char*, kNumColors> kColorNames{"red", "green", "blue", "yellow"};
constexpr std::array<const char*, kNumPositions> kPositionPhrases{"top left", "top right", "bottom left",
                                                                  "bottom right", "center"};

// clang-format off
constexpr std::array<const char*, 64> kWords{
    "<pad>", "<bos>", "<eos>", "<sep>",
    "a", "an", "photo", "image", "of", "in", "the", "there", "is", "at", "has",
    "red", "green", "blue", "yellow",
    "circle", "square", "triangle", "cross",
    "top", "bottom", "left", "right", "center",
    "describe", "what", "which", "where", "color", "shape", "object", "picture", "scene",
    "small", "large", "gray", "background", "yes", "no", "it", "this", "and", "with", "on",
    "one", "two", "shown", "see", "you", "kind", "located", "name", "tell", "me", "about",
    "please", "answer", "question", "word", "do",
};
// clang-format on

constexpr std::array<const char*, kNumTemplates> kTemplates{
    "a {color} {shape} in the {position}",
    "a photo of a {color} {shape} in the {position}",
    "there is a {color} {shape} at the {position}",
    "the {position} has a {color} {shape}",
};

constexpr std::array<std::array<double, 2>, kNumPositions> kCenters{{
    {0.3, 0.3}, {0.7, 0.3}, {0.3, 0.7}, {0.7, 0.7}, {0.5, 0.5},
}};

constexpr std::array<std::array<double, 3>, kNumColors> kColorDirs{{
    {1, -1, -1}, {-1, 1, -1}, {-1, -1, 1}, {1, 1, -1},
}};

void replace_all(std::string& s, std::string_view key, std::string_view value) {
  for (auto pos = s.find(key); pos != std::string::npos; pos = s.find(key, pos + value.size())) {
    s.replace(pos, key.size(), value);
  }
}

// Point (dx, dy) relative to the shape center, r = half extent.
bool inside(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::Circle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square:
      return std::abs(dx) <= 0.85 * r && std::abs(dy) <= 0.85 * r;
    case ShapeKind::Triangle:
      return dy >= -r && dy <= r && std::abs(dx) <= 0.5 * (dy + r);
    case ShapeKind::Cross: {
      const double t = r / 3.0;
      return (std::abs(dx) <= t && std::abs(dy) <= r) || (std::abs(dy) <= t && std::abs(dx) <= r);
    }
  }
  return false;
}

}  // namespace

const char* shape_name(ShapeKind s) { return kShapeNames.at(static_cast<std::size_t>(s)); }
const char* color_name(Color c) { return kColorNames.at(static_cast<std::size_t>(c)); }
const char* position_phrase(Position p) { return kPositionPhrases.at(static_cast<std::size_t>(p)); }

std::string class_name(int label) {
  if (label < 0 || label >= kNumClasses) throw std::out_of_range("class_name: label " + std::to_string(label));
  return std::string(kColorNames[static_cast<std::size_t>(label % kNumColors)]) + " " +
         kShapeNames[static_cast<std::size_t>(label / kNumColors)];
}

// ---------------------------------------------------------------------------

Vocabulary::Vocabulary() : words_(kWords.begin(), kWords.end()) {
  std::vector<std::uint8_t> raw;
  for (const auto& w : words_) {
    raw.insert(raw.end(), w.begin(), w.end());
    raw.push_back(0);
  }
  hash_ = bytes::fnv1a(raw);
}

const Vocabulary& Vocabulary::get() {
  static const Vocabulary v;
  return v;
}

int Vocabulary::id(std::string_view word) const {
  static const std::unordered_map<std::string_view, int> index = [this] {
    std::unordered_map<std::string_view, int> m;
    for (std::size_t i = 0; i < words_.size(); ++i) m.emplace(words_[i], static_cast<int>(i));
    return m;
  }();
  auto it = index.find(word);
  if (it == index.end()) throw VocabError("word not in vocabulary: '" + std::string(word) + "'");
  return it->second;
}

bool Vocabulary::contains(std::string_view word) const {
  return std::find(words_.begin(), words_.end(), word) != words_.end();
}

const std::string& Vocabulary::word(int id) const {
  if (id < 0 || id >= size()) throw VocabError("token id out of range: " + std::to_string(id));
  return words_[static_cast<std::size_t>(id)];
}

TokenSeq tokenize(std::string_view text) {
  const auto& vocab = Vocabulary::get();
  TokenSeq ids;
  std::istringstream in{std::string(text)};
  std::string w;
  while (in >> w) ids.push_back(vocab.id(w));
  return ids;
}

std::string detokenize(std::span<const int> ids) {
  const auto& vocab = Vocabulary::get();
  std::string out;
  for (int id : ids) {
    if (id == kEos) break;
    if (id < 4) {
      vocab.word(id);
      continue;
    }
    if (!out.empty()) out += ' ';
    out += vocab.word(id);
  }
  return out;
}

void validate_caption(std::span<const int> ids) {
  const int v = Vocabulary::get().size();
  std::size_t eos = 0;
  bool seen_eos = false;
  for (int id : ids) {
    if (id < 0 || id >= v) throw VocabError("token id out of range: " + std::to_string(id));
    if (id == kEos) {
      ++eos;
      seen_eos = true;
    } else if (id == kPad && !seen_eos) {
      throw VocabError("PAD before EOS");
    } else if (id != kPad && seen_eos) {
      throw VocabError("token after EOS");
    }
  }
  if (eos != 1) throw VocabError("caption must contain exactly one EOS");
}

std::size_t caption_length(std::span<const int> ids) {
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] == kEos) return i + 1;
  }
  return ids.size();
}

// ---------------------------------------------------------------------------

int template_of(const SceneSpec& spec) {
  std::uint64_t key = static_cast<std::uint64_t>(spec.label()) * 8 + static_cast<std::uint64_t>(spec.position);
  return static_cast<int>(Rng::derive(spec.noise_seed, key) % kNumTemplates);
}

std::string caption_text(const SceneSpec& spec, int template_index) {
  if (template_index < 0 || template_index >= kNumTemplates) {
    throw std::out_of_range("caption_text: template " + std::to_string(template_index));
  }
  std::string s = kTemplates[static_cast<std::size_t>(template_index)];
  replace_all(s, "{color}", color_name(spec.color));
  replace_all(s, "{shape}", shape_name(spec.shape));
  replace_all(s, "{position}", position_phrase(spec.position));
  return s;
}

TokenSeq caption_of(const SceneSpec& spec, int template_index) {
  auto ids = tokenize(caption_text(spec, template_index));
  ids.push_back(kEos);
  return ids;
}

TokenSeq caption_of(const SceneSpec& spec) { return caption_of(spec, template_of(spec)); }

bool supported_resolution(int resolution) { return resolution == 16 || resolution == 32 || resolution == 48; }

Tensor render_scene(const SceneSpec& spec, int resolution, const RenderStyle& style) {
  if (!supported_resolution(resolution)) {
    throw std::invalid_argument("render_scene: unsupported resolution " + std::to_string(resolution));
  }
  if (spec.size < 0.2 || spec.size > 0.5) throw std::invalid_argument("render_scene: size outside [0.2, 0.5]");
  const auto r = static_cast<std::size_t>(resolution);
  const auto [cx, cy] = kCenters[static_cast<std::size_t>(spec.position)];
  const auto& dir = kColorDirs[static_cast<std::size_t>(spec.color)];
  const double half = 0.5 * spec.size;
  constexpr int kSub = 4;

  std::vector<double> coverage(r * r, 0.0);
  for (std::size_t y = 0; y < r; ++y) {
    for (std::size_t x = 0; x < r; ++x) {
      int hits = 0;
      for (int sy = 0; sy < kSub; ++sy) {
        for (int sx = 0; sx < kSub; ++sx) {
          const double u = (static_cast<double>(x) + (sx + 0.5) / kSub) / resolution;
          const double v = (static_cast<double>(y) + (sy + 0.5) / kSub) / resolution;
          hits += inside(spec.shape, u - cx, v - cy, half);
        }
      }
      coverage[y * r + x] = static_cast<double>(hits) / (kSub * kSub);
    }
  }

  Rng rng(spec.noise_seed);
  std::vector<double> px(3 * r * r);
  for (std::size_t c = 0; c < 3; ++c) {
    const double ink = style.background + style.contrast * dir[c];
    for (std::size_t i = 0; i < r * r; ++i) {
      const double clean = style.background + coverage[i] * (ink - style.background);
      px[c * r * r + i] = std::clamp(clean + style.noise_sigma * rng.normal(), 0.0, 1.0);
    }
  }
  return Tensor({3, r, r}, std::move(px));
}

// ---------------------------------------------------------------------------

std::vector<std::size_t> Dataset::indices(Split which) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == which) out.push_back(i);
  }
  return out;
}

Tensor Dataset::image_batch(std::span<const std::size_t> idx) const {
  const std::size_t per = images.numel() / size();
  std::vector<double> out;
  out.reserve(idx.size() * per);
  auto src = images.data();
  for (auto i : idx) {
    if (i >= size()) throw std::out_of_range("image_batch: index " + std::to_string(i));
    out.insert(out.end(), src.begin() + static_cast<std::ptrdiff_t>(i * per),
               src.begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
  }
  const auto r = images.size(3);
  return Tensor({idx.size(), 3, r, r}, std::move(out));
}

std::vector<int> Dataset::caption_batch(std::span<const std::size_t> idx, std::size_t* out_len) const {
  std::size_t len = 1;
  for (auto i : idx) len = std::max(len, caption_length(caption(i)));
  std::vector<int> out(idx.size() * len, kPad);
  for (std::size_t b = 0; b < idx.size(); ++b) {
    auto c = caption(idx[b]);
    std::copy_n(c.begin(), std::min(len, c.size()), out.begin() + static_cast<std::ptrdiff_t>(b * len));
  }
  if (out_len) *out_len = len;
  return out;
}

std::vector<SceneSpec> dataset_specs(std::size_t count, std::uint64_t seed) {
  if (count < static_cast<std::size_t>(kNumClasses)) {
    throw std::invalid_argument("make_dataset: need at least 16 samples, got " + std::to_string(count));
  }
  std::vector<SceneSpec> specs(count);
  for (std::size_t i = 0; i < count; ++i) {
    Rng rng(Rng::derive(seed, i));
    const int label = static_cast<int>(i % kNumClasses);
    auto& s = specs[i];
    s.shape = static_cast<ShapeKind>(label / kNumColors);
    s.color = static_cast<Color>(label % kNumColors);
    s.position = static_cast<Position>(rng.below(kNumPositions));
    s.size = rng.uniform(0.3, 0.5);
    s.noise_seed = rng.next();
  }
  return specs;
}

Split split_of(std::size_t index) { return (index / kNumClasses) % 10 == 9 ? Split::Val : Split::Train; }

Dataset build_dataset(std::vector<SceneSpec> specs, int resolution, std::uint64_t seed, const RenderStyle& style) {
  if (specs.empty()) throw std::invalid_argument("build_dataset: no specs");
  if (!supported_resolution(resolution)) {
    throw std::invalid_argument("build_dataset: unsupported resolution " + std::to_string(resolution));
  }
  const std::size_t n = specs.size();
  const auto r = static_cast<std::size_t>(resolution);
  Dataset d;
  d.seed = seed;
  std::vector<TokenSeq> caps(n);
  for (std::size_t i = 0; i < n; ++i) {
    caps[i] = caption_of(specs[i]);
    d.seq_len = std::max(d.seq_len, caps[i].size());
  }
  d.tokens.assign(n * d.seq_len, kPad);
  std::vector<double> px;
  px.reserve(n * 3 * r * r);
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(caps[i].begin(), caps[i].end(), d.tokens.begin() + static_cast<std::ptrdiff_t>(i * d.seq_len));
    auto img = render_scene(specs[i], resolution, style);
    px.insert(px.end(), img.data().begin(), img.data().end());
    d.labels.push_back(specs[i].label());
    d.split.push_back(split_of(i));
  }
  d.images = Tensor({n, 3, r, r}, std::move(px));
  d.specs = std::move(specs);
  return d;
}

Dataset make_dataset(std::size_t count, int resolution, std::uint64_t seed, const RenderStyle& style) {
  return build_dataset(dataset_specs(count, seed), resolution, seed, style);
}

std::vector<SceneSpec> spec_grid(double size, std::uint64_t seed) {
  std::vector<SceneSpec> specs;
  for (int s = 0; s < kNumShapes; ++s) {
    for (int c = 0; c < kNumColors; ++c) {
      for (int p = 0; p < kNumPositions; ++p) {
        SceneSpec spec{static_cast<ShapeKind>(s), static_cast<Color>(c), static_cast<Position>(p), size, 0};
        spec.noise_seed = Rng::derive(seed, specs.size());
        specs.push_back(spec);
      }
    }
  }
  return specs;
}

// ---------------------------------------------------------------------------

std::vector<std::uint8_t> encode_dataset(const Dataset& d) {
  const std::size_t n = d.size();
  const auto& shape = d.images.shape();
  std::vector<std::uint8_t> out{'D', 'D', 'S', '1'};
  bytes::put_u32(out, static_cast<std::uint32_t>(n));
  for (std::size_t k = 1; k < 4; ++k) bytes::put_u32(out, static_cast<std::uint32_t>(shape[k]));
  bytes::put_u32(out, static_cast<std::uint32_t>(d.seq_len));
  bytes::put_u32(out, static_cast<std::uint32_t>(Vocabulary::get().size()));
  bytes::put_u64(out, Vocabulary::get().hash());
  bytes::put_u64(out, d.seed);
  out.reserve(out.size() + d.images.numel() * 8 + d.tokens.size() * 4 + n * 23);
  for (double v : d.images.data()) bytes::put_f64(out, v);
  for (int t : d.tokens) bytes::put_u32(out, static_cast<std::uint32_t>(t));
  for (int l : d.labels) bytes::put_u32(out, static_cast<std::uint32_t>(l));
  for (const auto& s : d.specs) {
    bytes::put_u8(out, static_cast<std::uint8_t>(s.shape));
    bytes::put_u8(out, static_cast<std::uint8_t>(s.color));
    bytes::put_u8(out, static_cast<std::uint8_t>(s.position));
    bytes::put_f64(out, s.size);
    bytes::put_u64(out, s.noise_seed);
  }
  for (auto s : d.split) bytes::put_u8(out, static_cast<std::uint8_t>(s));
  return out;
}

Dataset decode_dataset(const std::vector<std::uint8_t>& raw) {
  using K = FormatError::Kind;
  bytes::Reader in(raw);
  if (raw.size() < 4 || in.str(4) != "DDS1") throw FormatError(K::BadMagic, "bad magic: not a DDS1 dataset");
  const std::size_t n = in.u32();
  const std::size_t c = in.u32();
  const std::size_t h = in.u32();
  const std::size_t w = in.u32();
  Dataset d;
  d.seq_len = in.u32();
  const auto vocab_size = in.u32();
  const auto vocab_hash = in.u64();
  d.seed = in.u64();
  if (n == 0 || c != 3 || h != w || !supported_resolution(static_cast<int>(h)) || d.seq_len == 0) {
    throw FormatError(K::Mismatch, "dataset header describes an invalid shape");
  }
  if (vocab_size != static_cast<std::uint32_t>(Vocabulary::get().size()) || vocab_hash != Vocabulary::get().hash()) {
    throw FormatError(K::Mismatch, "dataset vocabulary does not match this tokenizer");
  }
  const std::size_t expected = n * c * h * w * 8 + n * d.seq_len * 4 + n * 4 + n * 19 + n;
  if (in.remaining() < expected) throw FormatError(K::Truncated, "truncated payload");
  if (in.remaining() > expected) throw FormatError(K::Mismatch, "trailing bytes after dataset payload");

  std::vector<double> px(n * c * h * w);
  for (auto& v : px) v = in.f64();
  d.tokens.resize(n * d.seq_len);
  for (auto& t : d.tokens) t = static_cast<int>(in.u32());
  d.labels.resize(n);
  for (auto& l : d.labels) {
    l = static_cast<int>(in.u32());
    if (l < 0 || l >= kNumClasses) throw FormatError(K::Mismatch, "label out of range");
  }
  d.specs.resize(n);
  for (auto& s : d.specs) {
    const auto shape = in.u8();
    const auto color = in.u8();
    const auto pos = in.u8();
    if (shape >= kNumShapes || color >= kNumColors || pos >= kNumPositions) {
      throw FormatError(K::Mismatch, "scene spec out of range");
    }
    s.shape = static_cast<ShapeKind>(shape);
    s.color = static_cast<Color>(color);
    s.position = static_cast<Position>(pos);
    s.size = in.f64();
    s.noise_seed = in.u64();
  }
  d.split.resize(n);
  for (auto& s : d.split) {
    const auto tag = in.u8();
    if (tag > 1) throw FormatError(K::Mismatch, "split tag out of range");
    s = static_cast<Split>(tag);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (d.labels[i] != d.specs[i].label()) throw FormatError(K::Mismatch, "label disagrees with scene spec");
    try {
      validate_caption(d.caption(i));
    } catch (const VocabError& e) {
      throw FormatError(K::Mismatch, std::string("caption ") + std::to_string(i) + ": " + e.what());
    }
  }
  for (double v : px) {
    if (!(v >= 0.0 && v <= 1.0)) throw FormatError(K::Mismatch, "pixel outside [0, 1]");
  }
  d.images = Tensor({n, c, h, w}, std::move(px));
  return d;
}

void save_dataset(const std::filesystem::path& path, const Dataset& d) { bytes::write_file(path, encode_dataset(d)); }

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(bytes::read_file(path)); }

std::uint64_t dataset_checksum(const Dataset& d) { return bytes::fnv1a(encode_dataset(d)); }

}  // namespace dvd
