#include "casdiff/data.hpp"

#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "casdiff/image_ops.hpp"
#include "casdiff/io.hpp"

namespace casdiff {

namespace fs = std::filesystem;

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

CaptionedImageRecord parse_record(const nlohmann::json& j, const std::string& where) {
  if (!j.is_object()) throw ParseError(where + ": expected a JSON object");
  for (const char* key : {"image", "captions", "class", "split"}) {
    if (!j.contains(key)) throw ParseError(where + ": missing \"" + std::string(key) + "\"");
  }
  CaptionedImageRecord r;
  if (!j["image"].is_string()) throw ParseError(where + ": \"image\" must be a string");
  r.image_path = j["image"].get<std::string>();
  if (!j["captions"].is_array() || j["captions"].empty() || j["captions"].size() > 5)
    throw ParseError(where + ": \"captions\" must be an array of 1-5 strings");
  for (const auto& c : j["captions"]) {
    if (!c.is_string() || trim(c.get<std::string>()).empty())
      throw ParseError(where + ": captions must be non-empty strings");
    r.captions.push_back(c.get<std::string>());
  }
  if (!j["class"].is_string()) throw ParseError(where + ": \"class\" must be a string");
  r.scene_class = j["class"].get<std::string>();
  const auto split = j["split"].is_string() ? j["split"].get<std::string>() : "";
  if (split == "train")
    r.split = Split::train;
  else if (split == "test")
    r.split = Split::test;
  else
    throw ParseError(where + ": \"split\" must be \"train\" or \"test\"");
  return r;
}

}  // namespace

ManifestLoad load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  ManifestLoad out;
  const fs::path base = path.parent_path();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno);
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(where + ": malformed JSON: " + e.what());
    }
    CaptionedImageRecord r = parse_record(j, where);
    fs::path image = r.image_path;
    if (image.is_relative()) image = base / image;
    if (!fs::exists(image)) {
      out.warnings.push_back(where + ": missing image " + image.string() + ", record dropped");
      ++out.dropped;
      continue;
    }
    r.image_path = image.string();
    (r.split == Split::train ? out.n_train : out.n_test)++;
    out.records.push_back(std::move(r));
  }
  if (lineno == 0) out.warnings.push_back(path.string() + ": empty manifest");
  return out;
}

std::vector<CaptionedImageRecord> filter_split(const std::vector<CaptionedImageRecord>& records, Split split) {
  std::vector<CaptionedImageRecord> out;
  for (const auto& r : records)
    if (r.split == split) out.push_back(r);
  return out;
}

Tensor<float> load_image(const fs::path& path, int resolution) {
  Tensor<float> t = image_to_tensor(read_png(path));
  if (t.dim(1) != resolution || t.dim(2) != resolution) t = resize_bilinear(t, resolution, resolution);
  return t;
}

namespace {

void check_resolutions(int base_resolution, int sr_resolution) {
  if (base_resolution < 1 || sr_resolution < base_resolution || sr_resolution % base_resolution != 0)
    throw InvalidArgument("sr resolution must be a positive multiple of the base resolution");
}

TextConditioning cached(const EmbeddingCache& cache, const std::string& caption) {
  auto cond = cache.get(caption);
  if (!cond) throw InvalidArgument("no cached embedding for caption \"" + caption + "\"; run the embed step first");
  return std::move(*cond);
}

}  // namespace

TrainingExample make_example(const CaptionedImageRecord& record, CaptionPolicy policy, const EmbeddingCache& cache,
                             int base_resolution, int sr_resolution, Rng& rng) {
  check_resolutions(base_resolution, sr_resolution);
  if (record.captions.empty()) throw InvalidArgument("record has no captions");
  const std::size_t pick = policy == CaptionPolicy::uniform ? rng.below(record.captions.size()) : 0;
  TrainingExample ex;
  ex.hr_image = load_image(record.image_path, sr_resolution);
  ex.lr_image = downsample_area(ex.hr_image, sr_resolution / base_resolution);
  ex.cond = cached(cache, record.captions[pick]);
  return ex;
}

std::vector<PreparedRecord> prepare_records(const std::vector<CaptionedImageRecord>& records,
                                            const EmbeddingCache& cache, int base_resolution, int sr_resolution) {
  check_resolutions(base_resolution, sr_resolution);
  std::vector<PreparedRecord> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    PreparedRecord p;
    p.hr_image = load_image(r.image_path, sr_resolution);
    p.lr_image = downsample_area(p.hr_image, sr_resolution / base_resolution);
    p.captions = r.captions;
    for (const auto& c : r.captions) p.conds.push_back(cached(cache, c));
    p.scene_class = r.scene_class;
    out.push_back(std::move(p));
  }
  return out;
}

std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, int batch_size, Rng& rng) {
  if (batch_size < 1) throw InvalidArgument("batch_size must be >= 1");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t first = 0; first < n; first += static_cast<std::size_t>(batch_size)) {
    const std::size_t last = std::min(n, first + static_cast<std::size_t>(batch_size));
    batches.emplace_back(order.begin() + static_cast<long>(first), order.begin() + static_cast<long>(last));
  }
  return batches;
}

int toy_class_index(const std::string& scene_class) {
  for (int c = 0; c < 3; ++c)
    for (int s = 0; s < 3; ++s)
      if (scene_class == std::string(kToyColors[c]) + "_" + kToyShapes[s]) return c * 3 + s;
  return -1;
}

std::string toy_class_name(int index) {
  if (index < 0 || index >= 9) throw InvalidArgument("toy class index out of range");
  return std::string(kToyColors[index / 3]) + "_" + kToyShapes[index % 3];
}

std::string toy_caption(int color, int shape, int position) {
  return std::string("a ") + kToyColors.at(color) + " " + kToyShapes.at(shape) + " at the " + kToyPositions.at(position);
}

Image8 render_toy_image(int color, int shape, int position, int resolution) {
  if (resolution < 8) throw InvalidArgument("toy resolution must be >= 8");
  static constexpr double centers[4][2] = {{32, 16}, {32, 48}, {16, 32}, {48, 32}};
  const double k = resolution / 64.0;
  const double cx = centers[position][0] * k, cy = centers[position][1] * k;
  Image8 img;
  img.width = img.height = resolution;
  img.rgb.assign(static_cast<std::size_t>(resolution) * resolution * 3, 0);
  for (int y = 0; y < resolution; ++y) {
    for (int x = 0; x < resolution; ++x) {
      const double px = x + 0.5 - cx, py = y + 0.5 - cy;
      bool inside = false;
      if (shape == 0) {
        inside = std::abs(px) <= 12 * k && std::abs(py) <= 12 * k;
      } else if (shape == 1) {
        inside = px * px + py * py <= 13 * 13 * k * k;
      } else {
        // Apex up, base 28 wide, height 24.
        const double v = (py + 12 * k) / (24 * k);
        inside = v >= 0 && v <= 1 && std::abs(px) <= 14 * k * v;
      }
      if (inside) img.rgb[(static_cast<std::size_t>(y) * resolution + x) * 3 + color] = 255;
    }
  }
  return img;
}

fs::path generate_toy_dataset(int n, const fs::path& out_dir, Rng& rng, int resolution) {
  if (n < 1) throw InvalidArgument("toy dataset size must be >= 1");
  std::error_code ec;
  fs::create_directories(out_dir / "images", ec);
  if (ec) throw IoError("cannot create " + (out_dir / "images").string() + ": " + ec.message());
  std::ostringstream manifest;
  for (int i = 0; i < n; ++i) {
    const int combo = i % 9;
    const int color = combo / 3, shape = combo % 3;
    const int position = static_cast<int>(rng.below(4));
    char name[32];
    std::snprintf(name, sizeof name, "%06d.png", i);
    const std::string rel = std::string("images/") + name;
    write_png(out_dir / rel, render_toy_image(color, shape, position, resolution));
    const nlohmann::json rec{{"image", rel},
                             {"captions", {toy_caption(color, shape, position)}},
                             {"class", toy_class_name(combo)},
                             {"split", i % 10 == 9 ? "test" : "train"}};
    manifest << rec.dump() << '\n';
  }
  const fs::path path = out_dir / "manifest.jsonl";
  write_file_atomic(path, manifest.str());
  return path;
}

}  // namespace casdiff
