#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "exray/error.hpp"
#include "exray/model_io.hpp"
#include "test_models.hpp"

using namespace exray;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / ("exray_model_io_" + name);
  fs::remove_all(dir);
  return dir;
}

std::string file_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

SampleSet tiny_samples(std::size_t classes, std::size_t per_class, std::uint64_t seed) {
  Rng rng(seed);
  SampleSet set;
  set.image_shape = {3, 16, 16};
  for (std::size_t k = 0; k < classes; ++k) set.class_names.push_back("class" + std::to_string(k));
  for (std::size_t k = 0; k < classes; ++k) {
    for (std::size_t i = 0; i < per_class; ++i) {
      set.images.push_back(exray::testing::random_tensor({3, 16, 16}, rng));
      set.labels.push_back(k);
    }
  }
  return set;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::io;
}

}  // namespace

TEST(ModelBundle, RoundTripIsBitIdenticalAndByteStable) {
  const ModelGraph model = exray::testing::small_cnn(7);
  const fs::path dir = scratch_dir("roundtrip");
  save_model(model, dir);
  const ModelGraph loaded = load_model(dir);
  EXPECT_EQ(loaded.layers, model.layers);
  EXPECT_EQ(loaded.input_shape, model.input_shape);
  EXPECT_EQ(loaded.class_count, model.class_count);

  const fs::path again = scratch_dir("roundtrip2");
  save_model(loaded, again);
  EXPECT_EQ(file_text(dir / "model.json"), file_text(again / "model.json"));
  EXPECT_EQ(file_text(dir / "weights.bin"), file_text(again / "weights.bin"));
}

TEST(ModelBundle, TruncatedBlobIsChecksumError) {
  const fs::path dir = scratch_dir("truncated");
  save_model(exray::testing::small_cnn(7), dir);
  fs::resize_file(dir / "weights.bin", fs::file_size(dir / "weights.bin") - 10);
  EXPECT_EQ(code_of([&] { (void)load_model(dir); }), ErrorCode::checksum_mismatch);
}

TEST(ModelBundle, FlippedByteIsChecksumError) {
  const fs::path dir = scratch_dir("flipped");
  save_model(exray::testing::small_cnn(7), dir);
  {
    std::fstream f(dir / "weights.bin", std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x7f');
  }
  EXPECT_EQ(code_of([&] { (void)load_model(dir); }), ErrorCode::checksum_mismatch);
}

TEST(ModelBundle, WrongFormatIsBadMagic) {
  const fs::path dir = scratch_dir("magic");
  save_model(exray::testing::small_cnn(7), dir);
  std::string text = file_text(dir / "model.json");
  text.replace(text.find("exray-model/1"), 13, "other-model/9");
  std::ofstream(dir / "model.json", std::ios::trunc) << text;
  EXPECT_EQ(code_of([&] { (void)load_model(dir); }), ErrorCode::bad_magic);
}

TEST(ModelBundle, ClassCountMismatchIsShapeInferenceError) {
  ModelGraph model = exray::testing::small_cnn(7);
  model.class_count = 4;
  EXPECT_EQ(code_of([&] { validate_model(model); }), ErrorCode::shape_inference);
}

TEST(ModelBundle, MissingDirectoryIsIoError) {
  EXPECT_EQ(code_of([] { (void)load_model("/nonexistent/exray/model"); }), ErrorCode::io);
}

TEST(SplitModel, CompositionIsExactForEveryCandidate) {
  const ModelGraph model = exray::testing::small_cnn(17);
  Rng rng(18);
  const Tensor batch = exray::testing::random_tensor({100, 3, 16, 16}, rng);
  const Tensor full = model_logits(model, batch);
  for (std::size_t boundary : model.split_candidates()) {
    const SplitModel split = split_model(model, boundary);
    EXPECT_EQ(head_logits(split, features_of(split, batch)), full) << "boundary " << boundary;
  }
}

TEST(SplitModel, SecondLastConvIsAfterFirstPooledBlock) {
  const ModelGraph model = exray::testing::small_cnn(1);
  const SplitModel split = split_model(model);
  EXPECT_EQ(split.boundary, 3u);
  EXPECT_EQ(split.n, 8u);
  EXPECT_EQ(split.feature_shape, (Shape{8, 8, 8}));
  EXPECT_TRUE(split.warning.empty());
  const SplitModel last = split_model(model, SplitPreset::last_conv);
  EXPECT_EQ(last.boundary, 6u);
  EXPECT_EQ(last.n, 16u);
  EXPECT_EQ(split_model(model, SplitPreset::middle).boundary, 3u);
}

TEST(SplitModel, SingleConvFallsBackWithWarning) {
  ModelGraph model;
  model.input_shape = {3, 8, 8};
  model.class_count = 2;
  model.layers = {LayerSpec::conv2d(3, 4, 3), LayerSpec::relu(), LayerSpec::maxpool2d(2, 2), LayerSpec::flatten(),
                  LayerSpec::dense(36, 2)};
  const SplitModel second = split_model(model, SplitPreset::second_last_conv);
  const SplitModel last = split_model(model, SplitPreset::last_conv);
  EXPECT_EQ(second.boundary, last.boundary);
  EXPECT_FALSE(second.warning.empty());
  EXPECT_EQ(second.n, 4u);
}

TEST(SplitModel, InvalidBoundaryRejected) {
  const ModelGraph model = exray::testing::small_cnn(1);
  EXPECT_EQ(code_of([&] { (void)split_model(model, std::size_t{1}); }), ErrorCode::precondition);
  EXPECT_EQ(parse_split_selector("5").index(), 1u);
  EXPECT_THROW((void)parse_split_selector("penultimate"), Error);
}

TEST(SampleBundle, RoundTripIsBitIdentical) {
  const SampleSet set = tiny_samples(3, 4, 2);
  const fs::path dir = scratch_dir("samples");
  save_samples(set, dir);
  const SampleSet loaded = load_samples(dir);
  EXPECT_EQ(loaded.images, set.images);
  EXPECT_EQ(loaded.labels, set.labels);
  EXPECT_EQ(loaded.class_names, set.class_names);
  EXPECT_EQ(loaded.counts(), (std::vector<std::size_t>{4, 4, 4}));
}

TEST(SampleBundle, OutOfRangePixelRejected) {
  SampleSet set = tiny_samples(2, 2, 3);
  set.images[1][5] = 1.5f;
  EXPECT_EQ(code_of([&] { save_samples(set, scratch_dir("badpixel")); }), ErrorCode::validation);
}

TEST(FilterCorrect, MatchesArgmaxSweepAndRejectsStarvedClasses) {
  const ModelGraph model = exray::testing::small_cnn(5, 2);
  const SampleSet set = tiny_samples(2, 40, 6);
  const auto predicted = predict(model_logits(model, stack(set.images)));
  std::vector<std::size_t> expected(2, 0);
  for (std::size_t i = 0; i < set.images.size(); ++i) expected[set.labels[i]] += predicted[i] == set.labels[i];
  if (expected[0] >= 2 && expected[1] >= 2) {
    EXPECT_EQ(filter_correct(model, set).counts(), expected);
  } else {
    EXPECT_EQ(code_of([&] { (void)filter_correct(model, set); }), ErrorCode::insufficient_samples);
  }
}

TEST(FilterCorrect, ConstantPredictorStarvesOtherClasses) {
  ModelGraph model = exray::testing::small_cnn(5, 3);
  LayerSpec& head = model.layers.back();
  head.weight.fill(0.0f);
  head.bias = Tensor({3}, {0.0f, 5.0f, 0.0f});
  try {
    (void)filter_correct(model, tiny_samples(3, 5, 1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::insufficient_samples);
    EXPECT_NE(std::string(e.what()).find("class 0"), std::string::npos);
  }
}

TEST(FilterCorrect, PerfectModelIsIdentity) {
  ModelGraph model = exray::testing::small_cnn(5, 2);
  LayerSpec& head = model.layers.back();
  head.weight.fill(0.0f);
  head.bias = Tensor({2}, {1.0f, 0.0f});
  SampleSet set = tiny_samples(2, 3, 1);
  set.labels.assign(set.labels.size(), 0);
  set.class_names = {"a", "b"};
  set.images.push_back(set.images[0]);
  set.labels.push_back(0);
  EXPECT_THROW((void)filter_correct(model, set), Error);  // class b has no samples
  SampleSet only_a = set;
  only_a.class_names = {"a"};
  model.class_count = 2;
  const SampleSet kept = filter_correct(model, only_a);
  EXPECT_EQ(kept.images, only_a.images);
}
