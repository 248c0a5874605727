#include <gtest/gtest.h>

#include <filesystem>
#include <map>

#include "dvd/checkpoint.hpp"
#include "dvd/data.hpp"

using namespace dvd;

namespace {

SceneSpec red_circle(Position p = Position::Center) { return {ShapeKind::Circle, Color::Red, p, 0.4, 5}; }

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

}  // namespace

TEST(Vocabulary, HasSixtyFourEntriesWithSpecialsFirst) {
  const auto& v = Vocabulary::get();
  EXPECT_EQ(v.size(), 64);
  EXPECT_EQ(v.id("<pad>"), kPad);
  EXPECT_EQ(v.id("<bos>"), kBos);
  EXPECT_EQ(v.id("<eos>"), kEos);
  EXPECT_EQ(v.id("<sep>"), kSep);
  EXPECT_THROW(v.id("dog"), VocabError);
  EXPECT_THROW(tokenize("a purple circle"), VocabError);
}

TEST(Render, DeterministicAndInRange) {
  auto a = render_scene(red_circle(), 32);
  auto b = render_scene(red_circle(), 32);
  EXPECT_EQ(values(a), values(b));
  EXPECT_EQ(a.shape(), (Shape{3, 32, 32}));
  for (double v : a.data()) {
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
  }
}

TEST(Render, RedCircleCenterPixelIsRed) {
  for (int res : {16, 32, 48}) {
    auto img = render_scene(red_circle(), res);
    const std::size_t r = static_cast<std::size_t>(res);
    const std::size_t mid = (r / 2) * r + r / 2;
    EXPECT_GT(img[mid], img[r * r + mid]);
    EXPECT_GT(img[mid], img[2 * r * r + mid]);
  }
}

TEST(Render, UnsupportedResolutionThrows) {
  EXPECT_THROW(render_scene(red_circle(), 20), std::invalid_argument);
  EXPECT_THROW(make_dataset(16, 64, 0), std::invalid_argument);
}

TEST(Render, NoiseSeedChangesPixelsOnly) {
  auto a = red_circle();
  auto b = a;
  b.noise_seed = 6;
  EXPECT_NE(values(render_scene(a, 16)), values(render_scene(b, 16)));
  RenderStyle quiet;
  quiet.noise_sigma = 0.0;
  EXPECT_EQ(values(render_scene(a, 16, quiet)), values(render_scene(b, 16, quiet)));
}

TEST(Caption, TemplateZeroFill) {
  auto spec = red_circle(Position::TopLeft);
  EXPECT_EQ(caption_text(spec, 0), "a red circle in the top left");
  auto ids = caption_of(spec, 0);
  auto expected = tokenize("a red circle in the top left");
  expected.push_back(kEos);
  EXPECT_EQ(ids, expected);
  validate_caption(ids);
}

TEST(Caption, ColorChangeTouchesOnlyColorToken) {
  auto a = red_circle(Position::BottomRight);
  auto b = a;
  b.color = Color::Blue;
  for (int t = 0; t < kNumTemplates; ++t) {
    auto ca = caption_of(a, t);
    auto cb = caption_of(b, t);
    ASSERT_EQ(ca.size(), cb.size());
    int diffs = 0;
    for (std::size_t i = 0; i < ca.size(); ++i) {
      if (ca[i] != cb[i]) {
        ++diffs;
        EXPECT_EQ(ca[i], Vocabulary::get().id("red"));
        EXPECT_EQ(cb[i], Vocabulary::get().id("blue"));
      }
    }
    EXPECT_EQ(diffs, 1);
  }
}

TEST(Caption, TokenizeRoundTripsEveryInstantiation) {
  for (const auto& spec : spec_grid(0.3, 0)) {
    for (int t = 0; t < kNumTemplates; ++t) {
      auto s = caption_text(spec, t);
      EXPECT_EQ(detokenize(tokenize(s)), s);
      EXPECT_EQ(detokenize(caption_of(spec, t)), s);
    }
  }
}

TEST(Caption, MentionsExactlyTheSpecAttributes) {
  for (const auto& spec : spec_grid(0.3, 1)) {
    auto s = " " + detokenize(caption_of(spec)) + " ";
    for (int c = 0; c < kNumColors; ++c) {
      bool want = c == static_cast<int>(spec.color);
      EXPECT_EQ(s.find(std::string(" ") + color_name(static_cast<Color>(c)) + " ") != std::string::npos, want);
    }
    for (int k = 0; k < kNumShapes; ++k) {
      bool want = k == static_cast<int>(spec.shape);
      EXPECT_EQ(s.find(std::string(" ") + shape_name(static_cast<ShapeKind>(k)) + " ") != std::string::npos, want);
    }
    EXPECT_NE(s.find(position_phrase(spec.position)), std::string::npos);
  }
}

TEST(Caption, ValidateRejectsMalformed) {
  EXPECT_THROW(validate_caption(std::vector<int>{4, 5}), VocabError);          // no EOS
  EXPECT_THROW(validate_caption(std::vector<int>{4, kPad, kEos}), VocabError);  // PAD before EOS
  EXPECT_THROW(validate_caption(std::vector<int>{4, kEos, 5}), VocabError);     // token after EOS
  EXPECT_THROW(validate_caption(std::vector<int>{4, 99, kEos}), VocabError);
  validate_caption(std::vector<int>{4, kEos, kPad, kPad});
}

TEST(Dataset, BalancedClasses) {
  auto d = make_dataset(160, 16, 7);
  std::map<int, int> counts;
  for (int l : d.labels) ++counts[l];
  ASSERT_EQ(counts.size(), 16u);
  for (auto [label, n] : counts) EXPECT_EQ(n, 10) << label;
  EXPECT_EQ(d.indices(Split::Val).size(), 16u);
  EXPECT_EQ(d.indices(Split::Train).size(), 144u);
}

TEST(Dataset, RemainderRule) {
  auto d = make_dataset(17, 16, 7);
  std::map<int, int> counts;
  for (int l : d.labels) ++counts[l];
  int twos = 0;
  for (auto [label, n] : counts) {
    EXPECT_TRUE(n == 1 || n == 2);
    twos += n == 2;
  }
  EXPECT_EQ(counts.size(), 16u);
  EXPECT_EQ(twos, 1);
}

TEST(Dataset, TooSmallThrows) { EXPECT_THROW(make_dataset(15, 16, 0), std::invalid_argument); }

TEST(Dataset, DeterministicUnderSeed) {
  auto a = make_dataset(48, 16, 3);
  auto b = make_dataset(48, 16, 3);
  auto c = make_dataset(48, 16, 4);
  EXPECT_EQ(encode_dataset(a), encode_dataset(b));
  EXPECT_NE(encode_dataset(a), encode_dataset(c));
}

TEST(Dataset, SplitsDisjointAndComplete) {
  for (std::uint64_t seed : {0u, 1u, 2u}) {
    auto d = make_dataset(320, 16, seed);
    auto tr = d.indices(Split::Train);
    auto va = d.indices(Split::Val);
    EXPECT_EQ(tr.size() + va.size(), d.size());
    for (auto i : va) EXPECT_EQ(std::count(tr.begin(), tr.end(), i), 0);
  }
}

TEST(Dataset, PixelsAndCaptionsValid) {
  auto d = make_dataset(64, 32, 9);
  for (double v : d.images.data()) {
    ASSERT_GE(v, 0.0);
    ASSERT_LE(v, 1.0);
  }
  for (std::size_t i = 0; i < d.size(); ++i) {
    validate_caption(d.caption(i));
    EXPECT_EQ(d.labels[i], d.specs[i].label());
  }
}

TEST(Dataset, ReRenderAtNewResolutionKeepsSpecs) {
  auto a = make_dataset(32, 16, 5);
  auto b = make_dataset(32, 32, 5);
  EXPECT_EQ(a.specs, b.specs);
  EXPECT_EQ(a.tokens, b.tokens);
}

TEST(Dataset, GridChecksumIsStable) {
  RenderStyle style;
  style.background = 0.5;
  style.noise_sigma = 0.02;
  style.contrast = 0.4;
  auto d = build_dataset(spec_grid(0.3, 0), 32, 0, style);
  ASSERT_EQ(d.size(), 80u);
  // Recorded from the first run; any change to rendering, captions or the
  // file layout moves it.
  EXPECT_EQ(dataset_checksum(d), 4179803108401960322ULL);
}

TEST(DatasetFile, RoundTripIsBitwise) {
  auto d = make_dataset(16, 16, 2);
  auto path = std::filesystem::temp_directory_path() / "dvd_dataset_test.dds";
  save_dataset(path, d);
  auto back = load_dataset(path);
  EXPECT_EQ(encode_dataset(back), encode_dataset(d));
  EXPECT_EQ(values(back.images), values(d.images));
  EXPECT_EQ(back.tokens, d.tokens);
  EXPECT_EQ(back.labels, d.labels);
  EXPECT_EQ(back.split, d.split);
  EXPECT_EQ(back.specs, d.specs);
  std::filesystem::remove(path);
}

TEST(DatasetFile, DistinctErrors) {
  auto raw = encode_dataset(make_dataset(16, 16, 2));
  auto kind_of = [](const std::vector<std::uint8_t>& b) {
    try {
      decode_dataset(b);
    } catch (const FormatError& e) {
      return e.kind();
    }
    return FormatError::Kind::Io;
  };
  auto bad = raw;
  bad[1] ^= 0xFF;
  EXPECT_EQ(kind_of(bad), FormatError::Kind::BadMagic);
  auto cut = raw;
  cut.pop_back();
  EXPECT_EQ(kind_of(cut), FormatError::Kind::Truncated);
  auto extra = raw;
  extra.push_back(0);
  EXPECT_EQ(kind_of(extra), FormatError::Kind::Mismatch);
  auto wrong_vocab = raw;
  wrong_vocab[28] ^= 1;  // vocab size field
  EXPECT_EQ(kind_of(wrong_vocab), FormatError::Kind::Mismatch);
}
