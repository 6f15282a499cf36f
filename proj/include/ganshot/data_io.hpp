#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "ganshot/boxes.hpp"
#include "ganshot/tensor.hpp"

// Dataset ingestion, synthetic scene generation, image files and checkpoints.

namespace ganshot {

std::string format_g9(double v);  // shortest 9-significant-digit decimal, locale-free

std::vector<uint8_t> read_file(const std::string& path);
void write_file(const std::string& path, const void* data, size_t size);

// ---------------------------------------------------------------------------
// CIFAR-10 binary records: 1 label byte + 3*1024 planar pixel bytes
// ---------------------------------------------------------------------------

struct CifarRecord {
  int label = 0;
  Tensor image;  // [3,32,32] in [0,1]
};

std::vector<CifarRecord> parse_cifar(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> serialize_cifar(const std::vector<CifarRecord>& records);

// Whole-batch file loader; accepts only the canonical 30,730,000-byte length.
std::vector<CifarRecord> read_cifar_batch(const std::string& path);

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

struct SceneParams {
  int image_size = 32;
  int min_objects = 1, max_objects = 3;
  int min_size_px = 4, max_size_px = 16;  // object max-dimension range
  float noise_level = 0.02f;
  std::vector<int> classes = {0, 1};  // 0: tall h/w in [2,3]; 1: wide w/h in [1.5,2.5]
};

struct SyntheticScene {
  Tensor image;  // [3,S,S] in [0,1]
  std::vector<std::pair<BoundingBox, int>> gts;
  uint64_t seed = 0;
};

SyntheticScene synth_scene(uint64_t seed, const SceneParams& params = {});

// ---------------------------------------------------------------------------
// low-res / high-res training pairs
// ---------------------------------------------------------------------------

struct EnhancerPair {
  Tensor low_res, high_res;  // both in [0,1]
};

Tensor box_downsample(const Tensor& image, int factor);  // [.,H,W] or [N,.,H,W]
EnhancerPair make_pairs(const SyntheticScene& scene, int factor);

// ---------------------------------------------------------------------------
// P6 portable pixmap
// ---------------------------------------------------------------------------

Tensor read_image(const std::string& path);                    // [3,H,W] in [0,1]
void write_image(const std::string& path, const Tensor& image);

// ---------------------------------------------------------------------------
// checkpoints: text manifest "name dims offset" per line, blank line, then
// raw little-endian float32 payload in manifest order
// ---------------------------------------------------------------------------

void save_checkpoint(const std::string& path, const std::map<std::string, Tensor>& tensors);
std::map<std::string, Tensor> load_checkpoint(const std::string& path);

// ---------------------------------------------------------------------------
// CSV sidecars
// ---------------------------------------------------------------------------

void write_gt_csv(const std::string& path, const std::vector<SyntheticScene>& scenes);
std::map<int, std::vector<std::pair<BoundingBox, int>>> read_gt_csv(const std::string& path);

void write_detections_csv(const std::string& path,
                          const std::vector<std::vector<Detection>>& per_image);
std::map<int, std::vector<Detection>> read_detections_csv(const std::string& path);

}  // namespace ganshot
