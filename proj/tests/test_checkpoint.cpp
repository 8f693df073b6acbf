#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <sstream>

#include "gabornet/checkpoint.hpp"
#include "gabornet/train.hpp"

using namespace gabornet;
namespace fs = std::filesystem;

namespace {

Model<float> sample_model(bool gabor = true) {
  Rng rng(3);
  auto m = make_toy<float>(ToySpec{}, rng);
  if (gabor) {
    std::vector<GaborParams> ps(24);
    for (auto& p : ps) {
      p.a = uniform(rng, -1, 1);
      p.lambda = uniform(rng, 2, 5);
      p.theta = uniform(rng, 0, 3);
      p.sigma = uniform(rng, 1, 3);
      p.x0 = uniform(rng, 1, 7);
      p.y0 = uniform(rng, 1, 7);
    }
    m.conv(0).make_gabor(ps);
  }
  m.conv(1).set_kernel_mask(2, 3, true);
  m.conv(0).set_channel_mask(6, true);
  m.meta["data.seed"] = "17";
  return m;
}

std::string with_checksum(std::string body) {
  body.resize(body.size() - 8);
  const std::uint64_t h = fnv1a64(body);
  char b[8];
  std::memcpy(b, &h, 8);
  body.append(b, 8);
  return body;
}

fs::path temp_path(const std::string& name) {
  return fs::temp_directory_path() / ("gabornet_ckpt_" + name);
}

}  // namespace

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto m = sample_model();
  Rng rng(9);
  rng();
  const std::map<std::string, std::vector<double>> opt = {{"conv1.gabor", {0.5, -1e-300, 3.0}}};
  const std::string bytes = encode_checkpoint(m, rng_state(rng), &opt);
  const auto ck = decode_checkpoint<float>(bytes);
  EXPECT_EQ(ck.model.describe(), m.describe());
  const auto a = m.state(), b = ck.model.state();
  for (const auto& [k, v] : a.tensors) EXPECT_EQ(v.data, b.tensors.at(k).data) << k;
  for (const auto& [k, v] : a.gabor) EXPECT_EQ(v.data, b.gabor.at(k).data) << k;
  EXPECT_EQ(a.masks, b.masks);
  ASSERT_TRUE(ck.optimizer.has_value());
  EXPECT_EQ(*ck.optimizer, opt);
  EXPECT_EQ(ck.rng_state, rng_state(rng));
  EXPECT_EQ(encode_checkpoint(ck.model, ck.rng_state, &*ck.optimizer), bytes);
}

TEST(Checkpoint, StartsWithMagicAndVersion) {
  const std::string bytes = encode_checkpoint(sample_model(false));
  EXPECT_EQ(bytes.substr(0, 8), "GCNNCKPT");
  std::uint32_t v;
  std::memcpy(&v, bytes.data() + 8, 4);
  EXPECT_EQ(v, 1u);
}

TEST(Checkpoint, DoubleModelStoresFloat32) {
  Rng rng(4);
  auto m = make_toy<double>(ToySpec{}, rng);
  m.conv(0).weights()[0] = 0.1;  // not representable in float
  const auto ck = decode_checkpoint<double>(encode_checkpoint(m));
  EXPECT_EQ(ck.model.conv(0).weights()[0], static_cast<double>(0.1f));
}

TEST(Checkpoint, ForwardIdenticalAfterReload) {
  auto m = sample_model();
  auto ck = decode_checkpoint<float>(encode_checkpoint(m));
  TextureSpec s;
  s.n_per_class = 4;
  const Dataset d = synth_textures(s);
  std::vector<std::size_t> idx(16);
  for (std::size_t j = 0; j < 16; ++j) idx[j] = j;
  std::vector<int> labels;
  const auto x = make_batch<float>(d, idx, nullptr, labels);
  EXPECT_EQ(m.forward(x, Phase::Eval), ck.model.forward(x, Phase::Eval));
}

TEST(Checkpoint, EveryFlippedByteIsDetected) {
  const std::string bytes = encode_checkpoint(sample_model(), "");
  for (std::size_t pos = 0; pos < bytes.size(); pos += 7) {
    std::string bad = bytes;
    bad[pos] = static_cast<char>(bad[pos] ^ 0x10);
    EXPECT_THROW(decode_checkpoint<float>(bad), Error) << "byte " << pos;
  }
}

TEST(Checkpoint, PayloadFlipIsIntegrityError) {
  const std::string bytes = encode_checkpoint(sample_model());
  std::string bad = bytes;
  bad[bytes.size() / 2] ^= 0x01;
  EXPECT_THROW(decode_checkpoint<float>(bad), IntegrityError);
}

TEST(Checkpoint, BadMagicAndVersion) {
  std::string bytes = encode_checkpoint(sample_model(false));
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_checkpoint<float>(magic), FormatError);
  std::string version = bytes;
  version[8] = 2;
  EXPECT_THROW(decode_checkpoint<float>(with_checksum(version)), FormatError);
  EXPECT_THROW(decode_checkpoint<float>(""), FormatError);
}

TEST(Checkpoint, TruncationRejected) {
  const std::string bytes = encode_checkpoint(sample_model());
  for (std::size_t len : {std::size_t{0}, std::size_t{5}, std::size_t{12}, std::size_t{40}, bytes.size() / 2,
                          bytes.size() - 1}) {
    EXPECT_THROW(decode_checkpoint<float>(bytes.substr(0, len)), Error) << len;
  }
}

TEST(Checkpoint, TamperedDescriptorWithValidChecksum) {
  const auto m = sample_model(false);
  std::string bytes = encode_checkpoint(m);
  const auto pos = bytes.find("out=8 k=5");
  ASSERT_NE(pos, std::string::npos);
  bytes[pos + 4] = '9';  // conv2 now claims 9 outputs; tensors say 8
  EXPECT_THROW(decode_checkpoint<float>(with_checksum(bytes)), IntegrityError);
}

TEST(Checkpoint, TrailingBytesRejected) {
  std::string bytes = encode_checkpoint(sample_model(false));
  bytes.insert(bytes.size() - 8, "zz");
  EXPECT_THROW(decode_checkpoint<float>(with_checksum(bytes)), FormatError);
}

TEST(Checkpoint, MalformedRngTextRejected) {
  std::string bytes = encode_checkpoint(sample_model(false), "not a state");
  EXPECT_THROW(decode_checkpoint<float>(bytes), FormatError);
}

TEST(Checkpoint, RngContinuesAfterReload) {
  Rng a(123);
  for (int j = 0; j < 10; ++j) a();
  const auto path = temp_path("rng.ckpt");
  save_checkpoint(path, sample_model(false), rng_state(a));
  const auto ck = load_checkpoint<float>(path);
  Rng b;
  set_rng_state(b, ck.rng_state);
  for (int j = 0; j < 100; ++j) EXPECT_EQ(a(), b());
  fs::remove(path);
}

TEST(Checkpoint, FileSaveIsByteIdenticalOnResave) {
  const auto p1 = temp_path("a.ckpt"), p2 = temp_path("b.ckpt");
  save_checkpoint(p1, sample_model(), "");
  const auto ck = load_checkpoint<float>(p1);
  save_checkpoint(p2, ck.model, ck.rng_state);
  EXPECT_EQ(read_file_bytes(p1), read_file_bytes(p2));
  EXPECT_FALSE(fs::exists(fs::path(p1.string() + ".tmp")));
  fs::remove(p1);
  fs::remove(p2);
}

TEST(Checkpoint, MissingFileAndUnwritableDirectory) {
  EXPECT_THROW(load_checkpoint<float>(temp_path("does_not_exist.ckpt")), IoError);
  const auto blocker = temp_path("blocker");
  { std::ofstream(blocker) << "x"; }
  EXPECT_THROW(save_checkpoint(blocker / "inner.ckpt", sample_model(false)), IoError);
  fs::remove(blocker);
}

TEST(Checkpoint, ResNetWithBlocksRoundTrips) {
  Rng rng(6);
  ResNetSpec rs;
  rs.width = 4;
  rs.blocks_per_stage = 2;
  auto m = make_resnet<float>(rs, rng);
  auto* bn = dynamic_cast<BatchNorm2d<float>*>(m.layers[1].get());
  bn->running_mean()[0] = 0.25f;
  const auto bytes = encode_checkpoint(m);
  const auto ck = decode_checkpoint<float>(bytes);
  EXPECT_EQ(encode_checkpoint(ck.model), bytes);
}
