#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dvd/tensor.hpp"

namespace dvd {

enum class ShapeKind : std::uint8_t { Circle, Square, Triangle, Cross };
enum class Color : std::uint8_t { Red, Green, Blue, Yellow };
enum class Position : std::uint8_t { TopLeft, TopRight, BottomLeft, BottomRight, Center };

inline constexpr int kNumShapes = 4;
inline constexpr int kNumColors = 4;
inline constexpr int kNumPositions = 5;
inline constexpr int kNumClasses = kNumShapes * kNumColors;

const char* shape_name(ShapeKind s);
const char* color_name(Color c);
/// Words of the position phrase, e.g. "top left".
const char* position_phrase(Position p);
/// "{color} {shape}" for class index k = shape * 4 + color.
std::string class_name(int label);

struct SceneSpec {
  ShapeKind shape = ShapeKind::Circle;
  Color color = Color::Red;
  Position position = Position::Center;
  double size = 0.3;  // shape extent as a fraction of the image side, in [0.2, 0.5]
  std::uint64_t noise_seed = 0;

  int label() const { return static_cast<int>(shape) * kNumColors + static_cast<int>(color); }
  bool operator==(const SceneSpec&) const = default;
};

// ---------------------------------------------------------------------------
// Tokenizer

class VocabError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kSep = 3;

using TokenSeq = std::vector<int>;

/// Fixed whitespace-word vocabulary: four specials followed by every word of
/// the caption and prompt grammar.
class Vocabulary {
 public:
  static const Vocabulary& get();

  int size() const { return static_cast<int>(words_.size()); }
  int id(std::string_view word) const;  // throws VocabError
  bool contains(std::string_view word) const;
  const std::string& word(int id) const;
  std::uint64_t hash() const { return hash_; }

 private:
  Vocabulary();
  std::vector<std::string> words_;
  std::uint64_t hash_ = 0;
};

/// Word ids of a whitespace-separated string; no specials are added.
TokenSeq tokenize(std::string_view text);
/// Words joined by single spaces. Specials are skipped; decoding stops at EOS.
std::string detokenize(std::span<const int> ids);

/// Ids in range, exactly one EOS, PAD only after EOS.
void validate_caption(std::span<const int> ids);
/// Number of tokens up to and including EOS.
std::size_t caption_length(std::span<const int> ids);

// ---------------------------------------------------------------------------
// Scenes and captions

inline constexpr int kNumTemplates = 4;

/// Template chosen by a seeded hash of the scene.
int template_of(const SceneSpec& spec);
std::string caption_text(const SceneSpec& spec, int template_index);
/// Caption words followed by EOS.
TokenSeq caption_of(const SceneSpec& spec, int template_index);
TokenSeq caption_of(const SceneSpec& spec);

struct RenderStyle {
  double background = 0.5;
  double noise_sigma = 0.02;
  double contrast = 0.4;  // colors sit at background ± contrast per channel
};

bool supported_resolution(int resolution);

/// [3, R, R] image in [0, 1]. Same spec and style give identical pixels.
Tensor render_scene(const SceneSpec& spec, int resolution, const RenderStyle& style = {});

// ---------------------------------------------------------------------------
// Datasets

enum class Split : std::uint8_t { Train = 0, Val = 1 };

struct Dataset {
  Tensor images;                 // [N, 3, R, R]
  std::vector<int> tokens;       // [N, T] row-major, PAD after EOS
  std::size_t seq_len = 0;       // T
  std::vector<int> labels;       // [N]
  std::vector<Split> split;      // [N]
  std::vector<SceneSpec> specs;  // [N]
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  int resolution() const { return static_cast<int>(images.size(3)); }
  std::vector<std::size_t> indices(Split which) const;
  std::span<const int> caption(std::size_t i) const { return {tokens.data() + i * seq_len, seq_len}; }

  /// [B, 3, R, R] copy of the selected images.
  Tensor image_batch(std::span<const std::size_t> idx) const;
  /// Captions of the selected samples padded to their longest length.
  std::vector<int> caption_batch(std::span<const std::size_t> idx, std::size_t* out_len) const;
};

/// The scene specs drawn for make_dataset: sample i has class i mod 16,
/// position, size and noise seed from a stream derived from (seed, i).
std::vector<SceneSpec> dataset_specs(std::size_t count, std::uint64_t seed);

/// Sample i belongs to the validation split iff (i / 16) mod 10 == 9.
Split split_of(std::size_t index);

/// Renders the scenes and builds captions; splits follow split_of.
Dataset build_dataset(std::vector<SceneSpec> specs, int resolution, std::uint64_t seed,
                      const RenderStyle& style = {});

Dataset make_dataset(std::size_t count, int resolution, std::uint64_t seed, const RenderStyle& style = {});

/// The 4 x 4 x 5 grid of (shape, color, position) at a fixed size, noise
/// seeds derived from `seed`.
std::vector<SceneSpec> spec_grid(double size, std::uint64_t seed);

// DDS1 layout, little-endian:
//   "DDS1", u32 N, u32 C, u32 H, u32 W, u32 T, u32 vocab_size, u64 vocab_hash, u64 seed
//   f64 images[N*C*H*W], u32 tokens[N*T], u32 labels[N],
//   per sample: u8 shape, u8 color, u8 position, f64 size, u64 noise_seed
//   u8 split[N]
std::vector<std::uint8_t> encode_dataset(const Dataset& d);
Dataset decode_dataset(const std::vector<std::uint8_t>& bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& d);
Dataset load_dataset(const std::filesystem::path& path);

/// FNV-1a of the DDS1 encoding.
std::uint64_t dataset_checksum(const Dataset& d);

}  // namespace dvd
