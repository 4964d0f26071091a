#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "amess/encoders.hpp"
#include "amess/error.hpp"
#include "support.hpp"

using namespace amess;
using testing_support::random_matrix;

namespace {

EncoderSpec mock(int dim, int max_len, std::uint64_t seed) { return {EncoderKind::Mock, dim, max_len, seed}; }

ModalityEmbedding embedding(const Matrix& data) {
  ModalityEmbedding e;
  e.data = data;
  e.mask.assign(static_cast<std::size_t>(data.rows()), true);
  e.modality = Modality::Video;
  return e;
}

bool bitwise_equal(const Matrix& a, const Matrix& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

TEST(Encoders, MockTextIsDeterministicWithClsAtRowZero) {
  const std::vector<std::int64_t> tokens{5, 9};
  const auto a = encode_text(tokens, mock(8, 50, 7));
  const auto b = encode_text(tokens, mock(8, 50, 7));
  EXPECT_EQ(a.length(), 3);
  EXPECT_EQ(a.dim(), 8);
  EXPECT_TRUE(bitwise_equal(a.data, b.data));
  EXPECT_EQ(a.modality, Modality::Text);
  EXPECT_FALSE(a.truncated);
  // The CLS row does not depend on the tokens.
  const auto c = encode_text(std::vector<std::int64_t>{42}, mock(8, 50, 7));
  EXPECT_TRUE(bitwise_equal(a.data.topRows(1), c.data.topRows(1)));
  // Same token id at different positions embeds the same way.
  const auto d = encode_text(std::vector<std::int64_t>{9, 5}, mock(8, 50, 7));
  EXPECT_TRUE(bitwise_equal(a.data.row(1), d.data.row(2)));
}

TEST(Encoders, MockTextSeedsDiffer) {
  const std::vector<std::int64_t> tokens{5, 9};
  const auto a = encode_text(tokens, mock(8, 50, 7));
  const auto b = encode_text(tokens, mock(8, 50, 8));
  EXPECT_GT((a.data - b.data).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Encoders, TextTruncatesAtMaxLength) {
  std::vector<std::int64_t> tokens(80);
  for (std::size_t i = 0; i < tokens.size(); ++i) tokens[i] = static_cast<std::int64_t>(i);
  const auto e = encode_text(tokens, mock(4, 50, 1));
  EXPECT_EQ(e.length(), 50);
  EXPECT_TRUE(e.truncated);
  EXPECT_THROW(encode_text(std::vector<std::int64_t>{}, mock(4, 50, 1)), Error);
}

TEST(Encoders, VideoShapesAndTruncation) {
  Rng rng(1);
  const auto v = encode_video(random_matrix(rng, 3, 6), mock(5, 180, 2));
  EXPECT_EQ(v.length(), 3);
  EXPECT_EQ(v.dim(), 5);
  EXPECT_EQ(v.valid_count(), 3u);
  EXPECT_FALSE(v.truncated);

  const auto t = encode_video(random_matrix(rng, 200, 6), mock(5, 180, 2));
  EXPECT_EQ(t.length(), 180);
  EXPECT_TRUE(t.truncated);

  // Identical frames map to identical rows.
  Matrix frames(2, 6);
  frames.row(0) = random_matrix(rng, 1, 6);
  frames.row(1) = frames.row(0);
  const auto same = encode_video(frames, mock(5, 180, 2));
  EXPECT_TRUE(bitwise_equal(same.data.row(0), same.data.row(1)));
  EXPECT_TRUE(same.data.allFinite());
}

TEST(Encoders, AudioShapesAndErrors) {
  Rng rng(2);
  EXPECT_THROW(encode_audio(Matrix(0, 3), mock(4, 400, 3)), Error);
  const auto a = encode_audio(random_matrix(rng, 450, 3), mock(4, 400, 3));
  EXPECT_EQ(a.length(), 400);
  EXPECT_EQ(a.dim(), 4);
  const Matrix w1 = random_matrix(rng, 10, 3);
  const Matrix w2 = random_matrix(rng, 10, 3);
  EXPECT_FALSE(bitwise_equal(encode_audio(w1, mock(4, 400, 3)).data, encode_audio(w2, mock(4, 400, 3)).data));
  Matrix bad = w1;
  bad(0, 0) = std::nan("");
  EXPECT_THROW(encode_audio(bad, mock(4, 400, 3)), Error);
}

TEST(Encoders, ExternalKindPassesFeaturesThroughWithDimCheck) {
  Rng rng(3);
  const Matrix f = random_matrix(rng, 4, 6);
  const EncoderSpec ext{EncoderKind::External, 6, 180, 0};
  EXPECT_TRUE(bitwise_equal(encode_video(f, ext).data, f));
  EXPECT_THROW(encode_video(f, EncoderSpec{EncoderKind::External, 5, 180, 0}), Error);
  EXPECT_THROW(encode_text(std::vector<std::int64_t>{1}, ext), Error);
}

TEST(Encoders, AlignIdentityIsExact) {
  Rng rng(4);
  ParameterStore store;
  Linear proj(store, "p", 4, 4, rng);
  proj.set_identity();
  const Matrix x = random_matrix(rng, 5, 4);
  const auto out = align(embedding(x), 5, 4, proj);
  EXPECT_TRUE(bitwise_equal(out.data.value(), x));
  EXPECT_EQ(out.mask, Mask(5, true));
}

TEST(Encoders, AlignPadsWithZeroRows) {
  Rng rng(5);
  ParameterStore store;
  Linear proj(store, "p", 4, 4, rng);
  proj.set_identity();
  const Matrix x = random_matrix(rng, 3, 4);
  const auto out = align(embedding(x), 5, 4, proj);
  EXPECT_TRUE(bitwise_equal(out.data.value().topRows(3), x));
  EXPECT_TRUE(out.data.value().bottomRows(2).isZero(0.0));
  EXPECT_EQ(out.mask, (Mask{true, true, true, false, false}));
}

TEST(Encoders, AlignSubsamplesWithUniformStride) {
  Rng rng(6);
  ParameterStore store;
  Linear proj(store, "p", 2, 2, rng);
  proj.set_identity();
  const Matrix x = random_matrix(rng, 6, 2);
  const auto out = align(embedding(x), 3, 2, proj);
  for (int i = 0; i < 3; ++i) {
    const int src = (i * 6) / 3;
    EXPECT_TRUE(bitwise_equal(out.data.value().row(i), x.row(src)));
  }
  // Oracle for arbitrary lengths.
  for (int s = 1; s <= 20; ++s)
    for (int t = 1; t <= 20; ++t) {
      const auto rows = alignment_rows(s, t);
      // Padding keeps every source row; subsampling picks floor(i*s/t).
      ASSERT_EQ(rows.size(), static_cast<std::size_t>(std::min(s, t)));
      for (int i = 0; i < std::min(s, t); ++i) EXPECT_EQ(rows[i], s > t ? (i * s) / t : i);
    }
}

TEST(Encoders, AlignOutputDimFollowsTarget) {
  Rng rng(7);
  ParameterStore store;
  Linear proj(store, "p", 7, 3, rng);
  const auto out = align(embedding(random_matrix(rng, 4, 7)), 6, 3, proj);
  EXPECT_EQ(out.data.rows(), 6);
  EXPECT_EQ(out.data.cols(), 3);
  // Padded rows stay zero even with a bias in the projection.
  proj.bias().mutable_value().setConstant(1.0);
  EXPECT_TRUE(align(embedding(random_matrix(rng, 4, 7)), 6, 3, proj).data.value().bottomRows(2).isZero(0.0));
  Linear wrong(store, "q", 5, 3, rng);
  EXPECT_THROW(align(embedding(random_matrix(rng, 4, 7)), 6, 3, wrong), Error);
}

TEST(Encoders, FeatureRecordRoundTripsThroughFloat32) {
  Rng rng(8);
  FeatureRecord r{"s-1", Modality::Audio, random_matrix(rng, 3, 2)};
  const FeatureRecord back = parse_feature_record(serialize_feature_record(r));
  EXPECT_EQ(back.id, "s-1");
  EXPECT_EQ(back.modality, Modality::Audio);
  ASSERT_EQ(back.data.rows(), 3);
  for (Eigen::Index i = 0; i < r.data.size(); ++i) {
    EXPECT_EQ(back.data.data()[i], static_cast<double>(static_cast<float>(r.data.data()[i])));
  }
  EXPECT_THROW(parse_feature_record(R"({"id":"x","modality":"video","shape":[2,2],"data":[1,2,3]})"), Error);
  EXPECT_THROW(parse_feature_record("not json"), Error);
}

TEST(Encoders, FeatureRefsResolveFilesAndIds) {
  const auto dir = std::filesystem::temp_directory_path() / "amess_feature_refs";
  std::filesystem::create_directories(dir);
  Rng rng(9);
  const std::vector<FeatureRecord> recs{{"a", Modality::Video, random_matrix(rng, 2, 2)},
                                        {"b", Modality::Video, random_matrix(rng, 1, 2)}};
  write_feature_file(dir / "f.jsonl", recs);
  EXPECT_EQ(read_feature_ref(dir, "f.jsonl").id, "a");
  EXPECT_EQ(read_feature_ref(dir, "f.jsonl#b").data.rows(), 1);
  EXPECT_THROW(read_feature_ref(dir, "f.jsonl#zzz"), Error);
  EXPECT_THROW(read_feature_ref(dir, "missing.jsonl"), Error);
  EXPECT_TRUE(feature_ref_exists(dir, "f.jsonl#b"));
  EXPECT_FALSE(feature_ref_exists(dir, "missing.jsonl"));
}

TEST(Encoders, ReadmeFixtureParses) {
  const auto r = read_feature_ref(std::filesystem::path(AMESS_SOURCE_DIR) / "tests/fixtures", "features/tiny.jsonl#clip-1");
  EXPECT_EQ(r.modality, Modality::Video);
  EXPECT_EQ(r.data.rows(), 2);
  EXPECT_EQ(r.data.cols(), 3);
}

}  // namespace
