#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "casdiff/data.hpp"
#include "casdiff/image_ops.hpp"
#include "casdiff/io.hpp"
#include "toy_oracle.hpp"

using namespace casdiff;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("casdiff_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST_CASE("manifest loading") {
  const auto dir = fresh_dir("manifest");
  write_png(dir / "a.png", render_toy_image(0, 0, 0, 8));

  SUBCASE("empty file gives no records and a warning") {
    write_text(dir / "m.jsonl", "");
    const auto m = load_manifest(dir / "m.jsonl");
    CHECK(m.records.empty());
    CHECK(m.warnings.size() == 1);
  }
  SUBCASE("missing captions names the line") {
    write_text(dir / "m.jsonl",
               "{\"image\":\"a.png\",\"captions\":[\"x\"],\"class\":\"red_square\",\"split\":\"train\"}\n"
               "{\"image\":\"a.png\",\"class\":\"red_square\",\"split\":\"train\"}\n");
    try {
      load_manifest(dir / "m.jsonl");
      FAIL("expected ParseError");
    } catch (const ParseError& e) {
      CHECK(std::string(e.what()).find(":2") != std::string::npos);
    }
  }
  SUBCASE("blank caption is rejected") {
    write_text(dir / "m.jsonl", "{\"image\":\"a.png\",\"captions\":[\"  \"],\"class\":\"c\",\"split\":\"train\"}\n");
    CHECK_THROWS_AS(load_manifest(dir / "m.jsonl"), ParseError);
  }
  SUBCASE("missing image is dropped with a warning") {
    write_text(dir / "m.jsonl",
               "{\"image\":\"a.png\",\"captions\":[\"x\"],\"class\":\"red_square\",\"split\":\"train\"}\n"
               "{\"image\":\"gone.png\",\"captions\":[\"y\"],\"class\":\"red_square\",\"split\":\"test\"}\n");
    const auto m = load_manifest(dir / "m.jsonl");
    CHECK(m.records.size() == 1);
    CHECK(m.dropped == 1);
    CHECK(m.warnings.size() == 1);
    CHECK(m.n_train == 1);
    CHECK(fs::path(m.records[0].image_path).is_absolute());
  }
  fs::remove_all(dir);
}

TEST_CASE("image loading and downsampling") {
  const auto dir = fresh_dir("images");
  Image8 white{4, 4, std::vector<std::uint8_t>(48, 255)};
  write_png(dir / "w.png", white);
  const auto loaded = load_image(dir / "w.png", 4);
  for (float v : loaded.values()) CHECK(v == 1.0f);

  write_text(dir / "bad.png", "not a png");
  CHECK_THROWS_AS(load_image(dir / "bad.png", 4), IoError);

  Tensor<float> hr({1, 4, 4}, std::vector<float>{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4});
  const auto lr = downsample_area(hr, 2);
  CHECK(lr == Tensor<float>({1, 2, 2}, std::vector<float>{1, 2, 3, 4}));
  fs::remove_all(dir);
}

TEST_CASE("png round trip keeps bytes and text chunks") {
  Rng rng(3);
  Image8 img{5, 3, std::vector<std::uint8_t>(45)};
  for (auto& b : img.rgb) b = static_cast<std::uint8_t>(rng.below(256));
  const auto bytes = encode_png(img, {{"config_hash", "abc"}});
  const auto back = decode_png(bytes);
  CHECK(back.width == 5);
  CHECK(back.rgb == img.rgb);
  CHECK(bytes.find("config_hash") != std::string::npos);
  CHECK(encode_png(img, {{"config_hash", "abc"}}) == bytes);
  CHECK(tensor_to_image(image_to_tensor(img)).rgb == img.rgb);
}

TEST_CASE("tensor_to_image clamps and rounds") {
  Tensor<float> t({3, 1, 1}, std::vector<float>{-5.0f, 0.0f, 5.0f});
  const auto img = tensor_to_image(t);
  CHECK(img.rgb == std::vector<std::uint8_t>{0, 128, 255});
}

TEST_CASE("epoch batches cover the set exactly once") {
  Rng rng(1);
  for (std::size_t n : {1u, 7u, 16u, 33u}) {
    const auto batches = epoch_batches(n, 8, rng);
    std::multiset<std::size_t> seen;
    for (const auto& b : batches) {
      CHECK(b.size() <= 8);
      seen.insert(b.begin(), b.end());
    }
    CHECK(seen.size() == n);
    for (std::size_t i = 0; i < n; ++i) CHECK(seen.count(i) == 1);
  }
}

TEST_CASE("toy renderer is read back by the pixel oracle") {
  for (int res : {32, 64}) {
    for (int c = 0; c < 3; ++c) {
      for (int s = 0; s < 3; ++s) {
        for (int p = 0; p < 4; ++p) {
          const auto r = testing::read_toy_image(image_to_tensor(render_toy_image(c, s, p, res)));
          INFO(res, " ", c, " ", s, " ", p);
          CHECK(r.color == c);
          CHECK(r.shape == s);
        }
      }
    }
  }
  CHECK(toy_caption(0, 0, 0) == "a red square at the top");
  CHECK(toy_class_index("blue_triangle") == 8);
  CHECK(toy_class_name(8) == "blue_triangle");
  CHECK(toy_class_index("purple_blob") == -1);
}

TEST_CASE("toy dataset generation") {
  const auto a = fresh_dir("toy_a"), b = fresh_dir("toy_b");
  Rng ra(1), rb(1);
  const auto ma = generate_toy_dataset(20, a, ra, 32);
  generate_toy_dataset(20, b, rb, 32);
  CHECK(slurp(ma) == slurp(b / "manifest.jsonl"));
  for (const auto& e : fs::directory_iterator(a / "images"))
    CHECK(slurp(e.path()) == slurp(b / "images" / e.path().filename()));

  const auto m = load_manifest(ma);
  CHECK(m.warnings.empty());
  CHECK(m.records.size() == 20);
  CHECK(m.n_test == 2);
  std::set<std::string> classes;
  for (std::size_t i = 0; i < 9; ++i) classes.insert(m.records[i].scene_class);
  CHECK(classes.size() == 9);
  for (const auto& r : m.records) {
    const auto reading = testing::read_toy_image(load_image(r.image_path, 32));
    CHECK(reading.color * 3 + reading.shape == toy_class_index(r.scene_class));
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("training examples") {
  const auto dir = fresh_dir("examples");
  Rng rng(2);
  const auto mpath = generate_toy_dataset(9, dir, rng, 64);
  const auto m = load_manifest(mpath);
  const EmbeddingCache cache(dir / "cache");
  const HashTextEncoder enc(8, 16);

  Rng r1(4);
  CHECK_THROWS_AS(make_example(m.records[0], CaptionPolicy::uniform, cache, 32, 64, r1), InvalidArgument);

  std::vector<std::string> caps;
  for (const auto& r : m.records) caps.insert(caps.end(), r.captions.begin(), r.captions.end());
  precompute_embeddings(enc, caps, cache);

  Rng r2(4), r3(4);
  const auto e1 = make_example(m.records[3], CaptionPolicy::uniform, cache, 32, 64, r2);
  const auto e2 = make_example(m.records[3], CaptionPolicy::uniform, cache, 32, 64, r3);
  CHECK(e1.cond == e2.cond);
  CHECK(e1.hr_image.shape() == std::vector<int>{3, 64, 64});
  const auto lr = downsample_area(e1.hr_image, 2);
  for (std::size_t i = 0; i < lr.size(); ++i) CHECK(std::abs(lr[i] - e1.lr_image[i]) < 1e-6f);

  const auto prepared = prepare_records(m.records, cache, 32, 64);
  CHECK(prepared.size() == 9);
  CHECK(prepared[3].hr_image == e1.hr_image);
  fs::remove_all(dir);
}
