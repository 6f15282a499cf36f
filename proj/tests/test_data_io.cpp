#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

#include "ganshot/data_io.hpp"

using namespace ganshot;

namespace {

std::string temp_path(const std::string& name) {
  return (std::filesystem::temp_directory_path() / name).string();
}

struct TempFile {
  std::string path;
  explicit TempFile(const std::string& name) : path(temp_path(name)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

std::vector<uint8_t> sample_cifar_bytes(size_t records) {
  std::vector<uint8_t> bytes;
  bytes.reserve(records * 3073);
  for (size_t r = 0; r < records; ++r) {
    bytes.push_back(static_cast<uint8_t>(r % 10));
    for (size_t i = 0; i < 3072; ++i)
      bytes.push_back(static_cast<uint8_t>((r * 31 + i * 7) % 256));
  }
  return bytes;
}

}  // namespace

TEST_CASE("cifar parse maps bytes to unit-range planes") {
  std::vector<uint8_t> bytes(3073, 255);
  bytes[0] = 7;
  auto records = parse_cifar(bytes);
  REQUIRE(records.size() == 1);
  CHECK(records[0].label == 7);
  CHECK(records[0].image.shape() == Shape{3, 32, 32});
  for (long long i = 0; i < records[0].image.size(); ++i)
    CHECK(records[0].image[i] == 1.0f);

  bytes[1] = 0;
  bytes[2] = 51;
  auto again = parse_cifar(bytes);
  CHECK(again[0].image[0] == 0.0f);
  CHECK(again[0].image[1] == doctest::Approx(51.0 / 255.0));
}

TEST_CASE("cifar serialize(parse(f)) round-trips bytewise") {
  auto bytes = sample_cifar_bytes(4);
  auto round = serialize_cifar(parse_cifar(bytes));
  CHECK(round == bytes);
}

TEST_CASE("cifar rejects bad lengths and labels with diagnostics") {
  CHECK_THROWS_AS(parse_cifar(std::vector<uint8_t>(3072)), FormatError);
  try {
    parse_cifar(std::vector<uint8_t>(5000));
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("3073") != std::string::npos);
    CHECK(msg.find("5000") != std::string::npos);
  }

  auto bytes = sample_cifar_bytes(3);
  bytes[2 * 3073] = 12;
  try {
    parse_cifar(bytes);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("record 2") != std::string::npos);
    CHECK(msg.find("12") != std::string::npos);
  }
}

TEST_CASE("cifar batch reader accepts only the canonical file length") {
  TempFile good("ganshot_cifar_good.bin");
  TempFile bad("ganshot_cifar_bad.bin");

  auto bytes = sample_cifar_bytes(10000);
  REQUIRE(bytes.size() == 30730000);
  write_file(good.path, bytes.data(), bytes.size());
  auto records = read_cifar_batch(good.path);
  CHECK(records.size() == 10000);
  CHECK(records[3].label == 3);

  auto two = sample_cifar_bytes(2);
  write_file(bad.path, two.data(), two.size());
  CHECK_THROWS_AS(read_cifar_batch(bad.path), FormatError);
  CHECK(parse_cifar(two).size() == 2);  // record-level parsing has no batch constraint
}

TEST_CASE("scenes are deterministic in the seed") {
  auto a = synth_scene(42);
  auto b = synth_scene(42);
  auto c = synth_scene(43);
  REQUIRE(a.gts.size() == b.gts.size());
  for (size_t i = 0; i < a.gts.size(); ++i) {
    CHECK(a.gts[i].second == b.gts[i].second);
    CHECK(a.gts[i].first.cx == b.gts[i].first.cx);
    CHECK(a.gts[i].first.w == b.gts[i].first.w);
  }
  bool identical = a.image.size() == b.image.size();
  bool differs_from_c = false;
  for (long long i = 0; i < a.image.size(); ++i) {
    identical = identical && a.image[i] == b.image[i];
    differs_from_c = differs_from_c || a.image[i] != c.image[i];
  }
  CHECK(identical);
  CHECK(differs_from_c);
}

TEST_CASE("empty object range yields pure background") {
  SceneParams params;
  params.min_objects = params.max_objects = 0;
  auto scene = synth_scene(5, params);
  CHECK(scene.gts.empty());
  CHECK(scene.image.shape() == Shape{3, 32, 32});
  for (long long i = 0; i < scene.image.size(); ++i) {
    CHECK(scene.image[i] >= 0.0f);
    CHECK(scene.image[i] <= 1.0f);
  }
}

TEST_CASE("generator self-audit over 1000 scenes") {
  SceneParams params;
  params.min_size_px = 4;
  params.max_size_px = 16;
  const int s = params.image_size;
  std::set<int> seen_counts;
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    auto scene = synth_scene(seed, params);
    seen_counts.insert(static_cast<int>(scene.gts.size()));
    for (const auto& [box, cls] : scene.gts) {
      CHECK(box.x0() >= -1e-6f);
      CHECK(box.y0() >= -1e-6f);
      CHECK(box.x1() <= 1.0f + 1e-6f);
      CHECK(box.y1() <= 1.0f + 1e-6f);

      const int wpx = static_cast<int>(std::lround(box.w * s));
      const int hpx = static_cast<int>(std::lround(box.h * s));
      const int major = std::max(wpx, hpx);
      CHECK(major >= params.min_size_px);
      CHECK(major <= params.max_size_px);
      if (cls == 0) {
        CHECK(hpx >= 2 * wpx);
        CHECK(hpx <= 3 * wpx);
      } else {
        CHECK(2 * wpx >= 3 * hpx);  // w/h >= 1.5
        CHECK(2 * wpx <= 5 * hpx);  // w/h <= 2.5
      }
    }
  }
  CHECK(seen_counts.count(1));
  CHECK(seen_counts.count(3));
}

TEST_CASE("gt boxes are tight to the rendered object") {
  SceneParams params;
  params.min_objects = params.max_objects = 1;
  params.noise_level = 0.0f;
  const int s = params.image_size;
  for (uint64_t seed = 100; seed < 150; ++seed) {
    auto scene = synth_scene(seed, params);
    REQUIRE(scene.gts.size() == 1);
    // background stays inside [0.25,0.75]; object fill is outside [0.15,0.85]
    int min_i = s, max_i = -1, min_j = s, max_j = -1;
    for (int i = 0; i < s; ++i)
      for (int j = 0; j < s; ++j) {
        bool object = false;
        for (int c = 0; c < 3; ++c) {
          const float v = scene.image[(static_cast<long long>(c) * s + i) * s + j];
          object = object || v < 0.2f || v > 0.8f;
        }
        if (object) {
          min_i = std::min(min_i, i);
          max_i = std::max(max_i, i);
          min_j = std::min(min_j, j);
          max_j = std::max(max_j, j);
        }
      }
    REQUIRE(max_i >= 0);
    const auto& box = scene.gts[0].first;
    CHECK(std::abs(box.x0() * s - min_j) <= 1.0f + 1e-4f);
    CHECK(std::abs(box.y0() * s - min_i) <= 1.0f + 1e-4f);
    CHECK(std::abs(box.x1() * s - (max_j + 1)) <= 1.0f + 1e-4f);
    CHECK(std::abs(box.y1() * s - (max_i + 1)) <= 1.0f + 1e-4f);
  }
}

TEST_CASE("box downsample averages blocks exactly") {
  Tensor img({1, 2, 2}, {0.25f, 0.5f, 0.75f, 1.0f});
  Tensor down = box_downsample(img, 2);
  CHECK(down.shape() == Shape{1, 1, 1});
  CHECK(down[0] == 0.625f);

  Tensor wide({1, 2, 4}, {1, 2, 3, 4, 5, 6, 7, 8});
  Tensor half = box_downsample(wide, 2);
  CHECK(half.shape() == Shape{1, 1, 2});
  CHECK(half[0] == 3.5f);
  CHECK(half[1] == 5.5f);

  Tensor batched({2, 1, 2, 2}, {1, 1, 1, 1, 2, 2, 2, 2});
  Tensor db = box_downsample(batched, 2);
  CHECK(db.shape() == Shape{2, 1, 1, 1});
  CHECK(db[0] == 1.0f);
  CHECK(db[1] == 2.0f);
}

TEST_CASE("pair construction keeps high res and normalized gts intact") {
  auto scene = synth_scene(9);
  auto pair = make_pairs(scene, 4);
  CHECK(pair.low_res.shape() == Shape{3, 8, 8});
  CHECK(pair.high_res.shape() == Shape{3, 32, 32});
  for (long long i = 0; i < scene.image.size(); ++i)
    CHECK(pair.high_res[i] == scene.image[i]);

  auto identity = make_pairs(scene, 1);
  for (long long i = 0; i < scene.image.size(); ++i)
    CHECK(identity.low_res[i] == scene.image[i]);

  Tensor constant = Tensor::full({3, 32, 32}, 0.3f);
  Tensor down = box_downsample(constant, 4);
  for (long long i = 0; i < down.size(); ++i) CHECK(down[i] == 0.3f);

  CHECK_THROWS_AS(make_pairs(scene, 5), InputError);
  CHECK_THROWS_AS(box_downsample(constant, 0), InputError);
}

TEST_CASE("p6 writes the exact expected bytes") {
  TempFile f("ganshot_p6_fixture.ppm");
  // channel-planar [3,2,2]: R plane, G plane, B plane
  Tensor img({3, 2, 2}, {1.0f, 0.0f, 0.0f, 0.2f,    // R
                         0.0f, 1.0f, 0.0f, 0.4f,    // G
                         0.0f, 0.0f, 1.0f, 0.6f});  // B
  write_image(f.path, img);
  auto bytes = read_file(f.path);
  const std::string header = "P6\n2 2\n255\n";
  REQUIRE(bytes.size() == header.size() + 12);
  CHECK(std::string(bytes.begin(), bytes.begin() + header.size()) == header);
  const std::vector<uint8_t> payload = {255, 0, 0, 0, 255, 0, 0, 0, 255, 51, 102, 153};
  for (size_t i = 0; i < payload.size(); ++i) CHECK(bytes[header.size() + i] == payload[i]);

  Tensor zero({3, 2, 2});
  write_image(f.path, zero);
  bytes = read_file(f.path);
  for (size_t i = header.size(); i < bytes.size(); ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("p6 round-trip stays within one quantization step") {
  TempFile f("ganshot_p6_roundtrip.ppm");
  Rng rng(11);
  std::vector<float> pix(3 * 5 * 7);
  for (auto& v : pix) v = static_cast<float>(rng.uniform());
  Tensor img({3, 5, 7}, pix);
  write_image(f.path, img);
  Tensor back = read_image(f.path);
  REQUIRE(back.shape() == img.shape());
  for (long long i = 0; i < img.size(); ++i)
    CHECK(std::abs(back[i] - img[i]) <= 1.0f / 255.0f);

  // a quantized image round-trips exactly
  write_image(f.path, back);
  Tensor twice = read_image(f.path);
  for (long long i = 0; i < back.size(); ++i) CHECK(twice[i] == back[i]);
}

TEST_CASE("p6 reader rejects malformed files with byte positions") {
  TempFile f("ganshot_p6_bad.ppm");

  const std::string not_p6 = "P5\n2 2\n255\napayloadgoo";
  write_file(f.path, not_p6.data(), not_p6.size());
  CHECK_THROWS_AS(read_image(f.path), FormatError);

  const std::string truncated = "P6\n4 4\n255\nshort";
  write_file(f.path, truncated.data(), truncated.size());
  try {
    read_image(f.path);
    FAIL("expected FormatError");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("byte") != std::string::npos);
  }

  const std::string bad_maxval = "P6\n2 2\n65535\n";
  write_file(f.path, bad_maxval.data(), bad_maxval.size());
  CHECK_THROWS_AS(read_image(f.path), FormatError);

  const std::string no_header = "P6\n2";
  write_file(f.path, no_header.data(), no_header.size());
  CHECK_THROWS_AS(read_image(f.path), FormatError);
}

TEST_CASE("checkpoint round-trip is bitwise lossless") {
  TempFile f("ganshot_ckpt.bin");
  Rng rng(3);
  std::map<std::string, Tensor> tensors;
  std::vector<float> a(24);
  for (auto& v : a) v = static_cast<float>(rng.normal());
  a[0] = -0.0f;
  a[1] = 1e-38f;
  a[2] = -3.4e38f;
  tensors.emplace("gen.L0.weight", Tensor({2, 3, 4}, a));
  tensors.emplace("gen.L0.bias", Tensor({3}, {0.1f, -0.2f, 0.3f}));
  tensors.emplace("disc.L2.gamma", Tensor::full({5}, 1.0f));

  save_checkpoint(f.path, tensors);
  auto back = load_checkpoint(f.path);
  REQUIRE(back.size() == tensors.size());
  for (const auto& [name, t] : tensors) {
    REQUIRE(back.count(name) == 1);
    const Tensor& r = back.at(name);
    REQUIRE(r.shape() == t.shape());
    for (long long i = 0; i < t.size(); ++i) {
      uint32_t lhs, rhs;
      std::memcpy(&lhs, &t.ptr()[i], 4);
      std::memcpy(&rhs, &r.ptr()[i], 4);
      CHECK(lhs == rhs);
    }
  }
}

TEST_CASE("checkpoint format details") {
  TempFile f("ganshot_ckpt_fmt.bin");
  std::map<std::string, Tensor> tensors;
  tensors.emplace("b", Tensor({2}, {1.0f, 2.0f}));
  tensors.emplace("a", Tensor({1, 2}, {3.0f, 4.0f}));
  save_checkpoint(f.path, tensors);

  auto bytes = read_file(f.path);
  const std::string manifest = "a 1,2 0\nb 2 8\n\n";
  REQUIRE(bytes.size() == manifest.size() + 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + manifest.size()) == manifest);

  std::map<std::string, Tensor> empty;
  save_checkpoint(f.path, empty);
  CHECK(read_file(f.path) == std::vector<uint8_t>{'\n'});
  CHECK(load_checkpoint(f.path).empty());

  std::map<std::string, Tensor> bad;
  bad.emplace("has space", Tensor({1}, {1.0f}));
  CHECK_THROWS_AS(save_checkpoint(f.path, bad), InputError);
}

TEST_CASE("checkpoint corruption is detected, nothing partial is returned") {
  TempFile f("ganshot_ckpt_bad.bin");
  std::map<std::string, Tensor> tensors;
  tensors.emplace("w", Tensor({4}, {1, 2, 3, 4}));
  save_checkpoint(f.path, tensors);

  auto bytes = read_file(f.path);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  write_file(f.path, truncated.data(), truncated.size());
  CHECK_THROWS_AS(load_checkpoint(f.path), CorruptionError);

  auto padded = bytes;
  padded.push_back(0);
  write_file(f.path, padded.data(), padded.size());
  CHECK_THROWS_AS(load_checkpoint(f.path), CorruptionError);

  const std::string bad_offset = "w 4 8\n\n0123456789abcdef01234567";
  write_file(f.path, bad_offset.data(), bad_offset.size());
  CHECK_THROWS_AS(load_checkpoint(f.path), CorruptionError);

  const std::string no_blank = "w 4 0\n";
  write_file(f.path, no_blank.data(), no_blank.size());
  CHECK_THROWS_AS(load_checkpoint(f.path), CorruptionError);
}

TEST_CASE("gt and detection csv round-trips") {
  TempFile gt("ganshot_gt.csv");
  TempFile det("ganshot_det.csv");

  std::vector<SyntheticScene> scenes;
  for (uint64_t seed = 0; seed < 5; ++seed) scenes.push_back(synth_scene(seed));
  write_gt_csv(gt.path, scenes);
  auto gts = read_gt_csv(gt.path);
  for (size_t i = 0; i < scenes.size(); ++i) {
    const auto& in = scenes[i].gts;
    if (in.empty()) {
      CHECK(gts.count(static_cast<int>(i)) == 0);
      continue;
    }
    REQUIRE(gts.at(static_cast<int>(i)).size() == in.size());
    for (size_t k = 0; k < in.size(); ++k) {
      const auto& [box, cls] = gts.at(static_cast<int>(i))[k];
      CHECK(cls == in[k].second);
      CHECK(box.cx == in[k].first.cx);
      CHECK(box.cy == in[k].first.cy);
      CHECK(box.w == in[k].first.w);
      CHECK(box.h == in[k].first.h);
    }
  }

  std::vector<std::vector<Detection>> per_image(2);
  per_image[0].push_back({{0.5f, 0.25f, 0.1f, 0.3f}, 1, 0.875f});
  per_image[1].push_back({{0.123456789f, 0.5f, 0.0625f, 0.2f}, 0, 0.333333343f});
  write_detections_csv(det.path, per_image);
  auto dets = read_detections_csv(det.path);
  REQUIRE(dets.at(1).size() == 1);
  CHECK(dets.at(0)[0].class_id == 1);
  CHECK(dets.at(0)[0].score == 0.875f);
  CHECK(dets.at(1)[0].box.cx == 0.123456789f);
  CHECK(dets.at(1)[0].score == 0.333333343f);

  const std::string mangled = "image_id,class_id,cx,cy,w,h\n0,1,0.5\n";
  write_file(gt.path, mangled.data(), mangled.size());
  CHECK_THROWS_AS(read_gt_csv(gt.path), FormatError);
}

TEST_CASE("nine-digit float formatting is stable") {
  CHECK(format_g9(0.5) == "0.5");
  CHECK(format_g9(1.0 / 3.0) == "0.333333333");
  CHECK(format_g9(-0.0625) == "-0.0625");
  CHECK(format_g9(static_cast<double>(0.1f)) == "0.100000001");
}
