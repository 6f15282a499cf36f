#include "ganshot/data_io.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace ganshot {

std::string format_g9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

std::vector<uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  in.seekg(0, std::ios::end);
  const std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<uint8_t> bytes(static_cast<size_t>(size));
  if (size > 0 && !in.read(reinterpret_cast<char*>(bytes.data()), size))
    throw InputError("cannot read " + path);
  return bytes;
}

void write_file(const std::string& path, const void* data, size_t size) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open " + path + " for writing");
  if (size > 0) out.write(static_cast<const char*>(data), static_cast<std::streamsize>(size));
  if (!out) throw InputError("short write to " + path);
}

// ---------------------------------------------------------------------------
// CIFAR
// ---------------------------------------------------------------------------

namespace {
constexpr size_t kCifarRecordBytes = 3073;
constexpr size_t kCifarBatchBytes = 30730000;
}  // namespace

std::vector<CifarRecord> parse_cifar(const std::vector<uint8_t>& bytes) {
  if (bytes.size() % kCifarRecordBytes != 0)
    throw FormatError("expected a multiple of " + std::to_string(kCifarRecordBytes) +
                      " bytes, got " + std::to_string(bytes.size()) + " (remainder " +
                      std::to_string(bytes.size() % kCifarRecordBytes) + ")");
  const size_t n = bytes.size() / kCifarRecordBytes;
  std::vector<CifarRecord> records;
  records.reserve(n);
  for (size_t r = 0; r < n; ++r) {
    const uint8_t* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] >= 10)
      throw FormatError("record " + std::to_string(r) + ": label byte " +
                        std::to_string(rec[0]) + " out of range");
    std::vector<float> pix(3072);
    for (size_t i = 0; i < 3072; ++i) pix[i] = rec[1 + i] / 255.0f;
    records.push_back({rec[0], Tensor({3, 32, 32}, std::move(pix))});
  }
  return records;
}

std::vector<uint8_t> serialize_cifar(const std::vector<CifarRecord>& records) {
  std::vector<uint8_t> bytes;
  bytes.reserve(records.size() * kCifarRecordBytes);
  for (const auto& rec : records) {
    if (rec.image.shape() != Shape{3, 32, 32})
      throw DimensionError("record image must be [3,32,32], got " + shape_str(rec.image.shape()));
    bytes.push_back(static_cast<uint8_t>(rec.label));
    for (long long i = 0; i < 3072; ++i)
      bytes.push_back(static_cast<uint8_t>(
          std::lround(std::clamp(rec.image[i], 0.0f, 1.0f) * 255.0f)));
  }
  return bytes;
}

std::vector<CifarRecord> read_cifar_batch(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  if (bytes.size() != kCifarBatchBytes)
    throw FormatError(path + ": expected exactly " + std::to_string(kCifarBatchBytes) +
                      " bytes, got " + std::to_string(bytes.size()));
  return parse_cifar(bytes);
}

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

namespace {

struct PlacedBox {
  int x0, y0, w, h;
};

float pixel_iou(const PlacedBox& a, const PlacedBox& b) {
  const int ix = std::max(0, std::min(a.x0 + a.w, b.x0 + b.w) - std::max(a.x0, b.x0));
  const int iy = std::max(0, std::min(a.y0 + a.h, b.y0 + b.h) - std::max(a.y0, b.y0));
  const float inter = static_cast<float>(ix) * iy;
  const float uni = static_cast<float>(a.w) * a.h + static_cast<float>(b.w) * b.h - inter;
  return uni > 0 ? inter / uni : 0.0f;
}

}  // namespace

SyntheticScene synth_scene(uint64_t seed, const SceneParams& params) {
  if (params.min_size_px < 2) throw InputError("object size range must start at >= 2 px");
  if (params.max_size_px < params.min_size_px || params.max_objects < params.min_objects)
    throw InputError("degenerate scene parameter range");
  if (params.classes.empty()) throw InputError("scene class set is empty");
  const int s = params.image_size;
  Rng rng(seed);

  // smooth two-color gradient background
  float c0[3], c1[3];
  for (int c = 0; c < 3; ++c) {
    c0[c] = static_cast<float>(rng.uniform(0.25, 0.75));
    c1[c] = static_cast<float>(rng.uniform(0.25, 0.75));
  }
  const int direction = rng.uniform_int(0, 2);  // 0 horizontal, 1 vertical, 2 diagonal
  std::vector<float> img(static_cast<size_t>(3) * s * s);
  for (int i = 0; i < s; ++i)
    for (int j = 0; j < s; ++j) {
      float t;
      if (direction == 0) t = static_cast<float>(j) / (s - 1);
      else if (direction == 1) t = static_cast<float>(i) / (s - 1);
      else t = static_cast<float>(i + j) / (2 * (s - 1));
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(c) * s + i) * s + j] = c0[c] + t * (c1[c] - c0[c]);
    }

  SyntheticScene scene;
  scene.seed = seed;
  const int count = rng.uniform_int(params.min_objects, params.max_objects);
  std::vector<PlacedBox> placed;
  for (int obj = 0; obj < count; ++obj) {
    const int cls = params.classes[rng.uniform_int(0, static_cast<int>(params.classes.size()) - 1)];
    int major = rng.uniform_int(params.min_size_px, params.max_size_px);
    bool done = false;
    for (int attempt = 0; attempt < 100 && !done; ++attempt) {
      int w, h;
      if (cls % 2 == 0) {  // tall: h is the major dimension, h/w in [2,3]
        h = major;
        const int lo = (h + 2) / 3, hi = h / 2;
        w = lo >= hi ? lo : rng.uniform_int(lo, hi);
      } else {  // wide: w major, w/h in [1.5,2.5]
        w = major;
        const int lo = (2 * w + 4) / 5, hi = (2 * w) / 3;
        h = lo >= hi ? lo : rng.uniform_int(lo, hi);
      }
      if (w < 1 || h < 1 || w > s || h > s) {
        major = std::max(params.min_size_px, major - 1);
        continue;
      }
      PlacedBox box{rng.uniform_int(0, s - w), rng.uniform_int(0, s - h), w, h};
      bool clash = false;
      for (const auto& other : placed) clash = clash || pixel_iou(box, other) > 0.2f;
      if (clash) {
        major = std::max(params.min_size_px, major - 1);
        continue;
      }

      // high-contrast fill against the local background
      float local = 0;
      for (int c = 0; c < 3; ++c)
        local += img[(static_cast<size_t>(c) * s + box.y0) * s + box.x0];
      const bool bright = local / 3 < 0.5f;
      float color[3];
      for (int c = 0; c < 3; ++c)
        color[c] = bright ? static_cast<float>(rng.uniform(0.85, 1.0))
                          : static_cast<float>(rng.uniform(0.0, 0.15));
      const bool ellipse = rng.uniform() < 0.5;
      const float ecx = box.x0 + box.w / 2.0f, ecy = box.y0 + box.h / 2.0f;
      for (int i = box.y0; i < box.y0 + box.h; ++i)
        for (int j = box.x0; j < box.x0 + box.w; ++j) {
          if (ellipse) {
            const float dx = (j + 0.5f - ecx) / (box.w / 2.0f);
            const float dy = (i + 0.5f - ecy) / (box.h / 2.0f);
            if (dx * dx + dy * dy > 1.0f) continue;
          }
          for (int c = 0; c < 3; ++c) img[(static_cast<size_t>(c) * s + i) * s + j] = color[c];
        }

      placed.push_back(box);
      BoundingBox gt{(box.x0 + box.w / 2.0f) / s, (box.y0 + box.h / 2.0f) / s,
                     static_cast<float>(box.w) / s, static_cast<float>(box.h) / s};
      scene.gts.emplace_back(gt, cls);
      done = true;
    }
    if (!done) throw InputError("could not place object after 100 attempts");
  }

  if (params.noise_level > 0)
    for (auto& v : img)
      v = std::clamp(v + params.noise_level * static_cast<float>(rng.normal()), 0.0f, 1.0f);
  scene.image = Tensor({3, s, s}, std::move(img));
  return scene;
}

// ---------------------------------------------------------------------------
// pairs
// ---------------------------------------------------------------------------

Tensor box_downsample(const Tensor& image, int factor) {
  if (factor < 1) throw InputError("downsample factor must be >= 1");
  const bool batched = image.rank() == 4;
  if (!batched && image.rank() != 3)
    throw DimensionError("box_downsample: expected [C,H,W] or [N,C,H,W], got " +
                         shape_str(image.shape()));
  const int n = batched ? image.dim(0) : 1;
  const int c = image.dim(batched ? 1 : 0);
  const int h = image.dim(batched ? 2 : 1);
  const int w = image.dim(batched ? 3 : 2);
  if (h % factor != 0 || w % factor != 0)
    throw InputError("factor " + std::to_string(factor) + " does not divide " +
                     shape_str(image.shape()));
  const int oh = h / factor, ow = w / factor;
  std::vector<float> out(static_cast<size_t>(n) * c * oh * ow);
  const float inv = 1.0f / (factor * factor);
  for (int ni = 0; ni < n; ++ni)
    for (int ci = 0; ci < c; ++ci) {
      const float* src = image.ptr() + (static_cast<long long>(ni) * c + ci) * h * w;
      float* dst = out.data() + (static_cast<long long>(ni) * c + ci) * oh * ow;
      for (int i = 0; i < oh; ++i)
        for (int j = 0; j < ow; ++j) {
          float acc = 0;
          for (int di = 0; di < factor; ++di)
            for (int dj = 0; dj < factor; ++dj)
              acc += src[(i * factor + di) * w + j * factor + dj];
          dst[i * ow + j] = acc * inv;
        }
    }
  Shape out_shape = batched ? Shape{n, c, oh, ow} : Shape{c, oh, ow};
  return Tensor(std::move(out_shape), std::move(out));
}

EnhancerPair make_pairs(const SyntheticScene& scene, int factor) {
  EnhancerPair pair;
  pair.high_res = scene.image.detached();
  pair.low_res = box_downsample(scene.image, factor);
  return pair;
}

// ---------------------------------------------------------------------------
// P6
// ---------------------------------------------------------------------------

Tensor read_image(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  size_t pos = 0;
  auto token = [&]() {
    while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
    const size_t start = pos;
    while (pos < bytes.size() && !std::isspace(bytes[pos])) ++pos;
    if (start == pos)
      throw FormatError(path + ": truncated header at byte " + std::to_string(start));
    return std::string(bytes.begin() + start, bytes.begin() + pos);
  };
  if (token() != "P6") throw FormatError(path + ": not a P6 pixmap (byte 0)");
  int w, h, maxval;
  try {
    w = std::stoi(token());
    h = std::stoi(token());
    maxval = std::stoi(token());
  } catch (const std::exception&) {
    throw FormatError(path + ": malformed header near byte " + std::to_string(pos));
  }
  if (w <= 0 || h <= 0 || maxval != 255)
    throw FormatError(path + ": unsupported header values near byte " + std::to_string(pos));
  ++pos;  // single whitespace after maxval
  const size_t need = static_cast<size_t>(3) * w * h;
  if (bytes.size() - pos < need)
    throw FormatError(path + ": truncated payload at byte " + std::to_string(bytes.size()) +
                      " (need " + std::to_string(pos + need) + ")");
  std::vector<float> img(need);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c)
        img[(static_cast<size_t>(c) * h + i) * w + j] =
            bytes[pos + (static_cast<size_t>(i) * w + j) * 3 + c] / 255.0f;
  return Tensor({3, h, w}, std::move(img));
}

void write_image(const std::string& path, const Tensor& image) {
  if (image.rank() != 3 || image.dim(0) != 3)
    throw DimensionError("write_image: expected [3,H,W], got " + shape_str(image.shape()));
  const int h = image.dim(1), w = image.dim(2);
  std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<uint8_t> bytes(header.begin(), header.end());
  bytes.reserve(bytes.size() + static_cast<size_t>(3) * h * w);
  for (int i = 0; i < h; ++i)
    for (int j = 0; j < w; ++j)
      for (int c = 0; c < 3; ++c) {
        const float v = std::clamp(image[(static_cast<long long>(c) * h + i) * w + j], 0.0f, 1.0f);
        bytes.push_back(static_cast<uint8_t>(std::lround(v * 255.0f)));
      }
  write_file(path, bytes.data(), bytes.size());
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors) {
  std::string manifest;
  long long offset = 0;
  for (const auto& [name, t] : tensors) {
    if (name.empty() || name.find_first_of(" \t\n") != std::string::npos)
      throw InputError("tensor name '" + name + "' is empty or contains whitespace");
    if (!t.defined()) throw InputError("tensor " + name + " is undefined");
    std::string dims;
    for (int i = 0; i < t.rank(); ++i) {
      if (i) dims += ",";
      dims += std::to_string(t.dim(i));
    }
    manifest += name + " " + dims + " " + std::to_string(offset) + "\n";
    offset += t.size() * static_cast<long long>(sizeof(float));
  }
  manifest += "\n";
  std::vector<uint8_t> bytes(manifest.begin(), manifest.end());
  const size_t payload_at = bytes.size();
  bytes.resize(payload_at + offset);
  size_t cursor = payload_at;
  for (const auto& [name, t] : tensors) {
    std::memcpy(bytes.data() + cursor, t.ptr(), t.size() * sizeof(float));
    cursor += t.size() * sizeof(float);
  }
  write_file(path, bytes.data(), bytes.size());
}

std::map<std::string, Tensor> load_checkpoint(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  size_t pos = 0;
  struct Entry {
    std::string name;
    Shape shape;
    long long offset;
  };
  std::vector<Entry> entries;
  while (true) {
    size_t eol = pos;
    while (eol < bytes.size() && bytes[eol] != '\n') ++eol;
    if (eol == bytes.size())
      throw CorruptionError(path + ": manifest is not terminated by a blank line");
    std::string line(bytes.begin() + pos, bytes.begin() + eol);
    pos = eol + 1;
    if (line.empty()) break;
    std::istringstream ls(line);
    Entry e;
    std::string dims;
    if (!(ls >> e.name >> dims >> e.offset))
      throw CorruptionError(path + ": malformed manifest line '" + line + "'");
    std::istringstream ds(dims);
    std::string d;
    while (std::getline(ds, d, ',')) {
      try {
        e.shape.push_back(std::stoi(d));
      } catch (const std::exception&) {
        throw CorruptionError(path + ": bad dimension '" + d + "' for " + e.name);
      }
    }
    if (e.shape.empty()) throw CorruptionError(path + ": no dimensions for " + e.name);
    entries.push_back(std::move(e));
  }
  long long expect_offset = 0;
  std::map<std::string, Tensor> out;
  for (const auto& e : entries) {
    if (e.offset != expect_offset)
      throw CorruptionError(path + ": offset of " + e.name + " is " + std::to_string(e.offset) +
                            ", expected " + std::to_string(expect_offset));
    const long long n = numel(e.shape);
    if (n <= 0) throw CorruptionError(path + ": non-positive shape for " + e.name);
    expect_offset += n * static_cast<long long>(sizeof(float));
  }
  if (static_cast<long long>(bytes.size() - pos) != expect_offset)
    throw CorruptionError(path + ": payload is " + std::to_string(bytes.size() - pos) +
                          " bytes, manifest requires " + std::to_string(expect_offset));
  for (const auto& e : entries) {
    const long long n = numel(e.shape);
    std::vector<float> data(static_cast<size_t>(n));
    std::memcpy(data.data(), bytes.data() + pos + e.offset, n * sizeof(float));
    if (out.count(e.name)) throw CorruptionError(path + ": duplicate tensor " + e.name);
    out.emplace(e.name, Tensor(e.shape, std::move(data)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> fields;
  std::istringstream ss(line);
  std::string f;
  while (std::getline(ss, f, ',')) fields.push_back(f);
  return fields;
}

}  // namespace

void write_gt_csv(const std::string& path, const std::vector<SyntheticScene>& scenes) {
  std::string out = "image_id,class_id,cx,cy,w,h\n";
  for (size_t i = 0; i < scenes.size(); ++i)
    for (const auto& [box, cls] : scenes[i].gts)
      out += std::to_string(i) + "," + std::to_string(cls) + "," + format_g9(box.cx) + "," +
             format_g9(box.cy) + "," + format_g9(box.w) + "," + format_g9(box.h) + "\n";
  write_file(path, out.data(), out.size());
}

std::map<int, std::vector<std::pair<BoundingBox, int>>> read_gt_csv(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::map<int, std::vector<std::pair<BoundingBox, int>>> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (lineno == 1 && line.rfind("image_id", 0) == 0)) continue;
    auto f = split_csv_line(line);
    if (f.size() != 6)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 6 fields");
    try {
      BoundingBox box{std::stof(f[2]), std::stof(f[3]), std::stof(f[4]), std::stof(f[5])};
      out[std::stoi(f[0])].emplace_back(box, std::stoi(f[1]));
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": malformed numeric field");
    }
  }
  return out;
}

void write_detections_csv(const std::string& path,
                          const std::vector<std::vector<Detection>>& per_image) {
  std::string out = "image_id,class_id,score,cx,cy,w,h\n";
  for (size_t i = 0; i < per_image.size(); ++i)
    for (const auto& det : per_image[i])
      out += std::to_string(i) + "," + std::to_string(det.class_id) + "," +
             format_g9(det.score) + "," + format_g9(det.box.cx) + "," + format_g9(det.box.cy) +
             "," + format_g9(det.box.w) + "," + format_g9(det.box.h) + "\n";
  write_file(path, out.data(), out.size());
}

std::map<int, std::vector<Detection>> read_detections_csv(const std::string& path) {
  std::vector<uint8_t> bytes = read_file(path);
  std::istringstream in(std::string(bytes.begin(), bytes.end()));
  std::map<int, std::vector<Detection>> out;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || (lineno == 1 && line.rfind("image_id", 0) == 0)) continue;
    auto f = split_csv_line(line);
    if (f.size() != 7)
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected 7 fields");
    try {
      Detection det{{std::stof(f[3]), std::stof(f[4]), std::stof(f[5]), std::stof(f[6])},
                    std::stoi(f[1]),
                    std::stof(f[2])};
      out[std::stoi(f[0])].push_back(det);
    } catch (const std::exception&) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": malformed numeric field");
    }
  }
  return out;
}

}  // namespace ganshot
