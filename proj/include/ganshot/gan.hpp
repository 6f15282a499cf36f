#pragma once

#include <string>
#include <utility>
#include <vector>

#include "ganshot/data_io.hpp"
#include "ganshot/nn.hpp"

// Adversarial image synthesis and enhancement: DCGAN construction, loss
// routing between the two players, the low-res conditional generator, and
// discriminator-feature probes.

namespace ganshot {

struct GanConfig {
  int noise_dim = 100;
  int image_size = 32;       // must be 4 * 2^k, k >= 1
  int channels = 3;
  int base_feature_maps = 64;
  int epochs = 25;
  int batch_size = 72;
  int upscale_factor = 4;    // 2 or 4
  bool gaussian_noise = false;
  float recon_weight = 10.0f;
  AdamConfig adam;
};

struct GanLossReport {
  float d_loss = 0;
  float g_loss = 0;
  float value_v = 0;        // mean log D(real) + mean log(1 - D(fake))
  float d_real_mean = 0;
  float d_fake_mean = 0;
};

// (generator, discriminator) layer stacks. The generator maps
// [N, noise_dim, 1, 1] to [N, channels, S, S] through stride-2 transposed
// convolutions and ends in tanh; the discriminator mirrors it downward to a
// sigmoid score [N, 1].
std::pair<ModelSpec, ModelSpec> build_dcgan(const GanConfig& cfg);

// Fully convolutional conditional generator. Input is the nearest-neighbor
// upsampled low-res image plus one noise channel, output is a same-size
// residual-free image in (-1, 1).
ModelSpec build_enhancer(const GanConfig& cfg);

enum class GanKind { dcgan = 1, enhancer = 2 };

struct GanModel {
  GanConfig cfg;
  GanKind kind = GanKind::dcgan;
  ModelSpec gen, disc;
  ParamSet params;  // "gen." and "disc." prefixes
};

GanModel make_gan(const GanConfig& cfg, uint64_t seed);
GanModel make_enhancer_gan(const GanConfig& cfg, uint64_t seed);

// Minimax value estimate from raw discriminator outputs (no gradients).
float gan_value(const Tensor& d_real, const Tensor& d_fake);

// Noise batch [n, noise_dim, 1, 1], uniform by default.
Tensor sample_noise(int n, const GanConfig& cfg, Rng& rng);

// Conditional generator input: upsampled low-res batch (mapped to [-1,1])
// with one uniform noise channel appended.
Tensor enhancer_input(const Tensor& low_res01, int factor, Rng& rng);

// One optimizer step on the discriminator against a real batch (in [-1,1])
// and fakes produced from gen_input; the generator stays bitwise untouched.
GanLossReport discriminator_step(GanModel& m, AdamState& opt, const Tensor& real,
                                 const Tensor& gen_input);

// One optimizer step on the generator toward an always-real target; the
// discriminator stays bitwise untouched. A reconstruction target in [0,1]
// adds recon_weight * bce((out+1)/2, target).
GanLossReport generator_step(GanModel& m, AdamState& opt, const Tensor& gen_input,
                             const Tensor* recon_target01 = nullptr);

struct GanTrainResult {
  GanModel model;
  std::vector<GanLossReport> epochs;
};

// Alternating optimization over shuffled minibatches; images are [C,S,S] in
// [0,1]. Deterministic in the seed.
GanTrainResult train_gan(const std::vector<Tensor>& images, const GanConfig& cfg, uint64_t seed);
GanTrainResult train_enhancer(const std::vector<EnhancerPair>& pairs, const GanConfig& cfg,
                              uint64_t seed);

// Runs the conditional generator on a low-res batch (or single [C,h,w]
// image) in [0,1]; output is upscaled by cfg.upscale_factor and mapped back
// to [0,1]. The noise channel is derived from noise_seed.
Tensor enhance(const GanModel& m, const Tensor& low_res01, uint64_t noise_seed = 0);

// Concatenated discriminator features: every LeakyReLU activation map,
// max-pooled to a 4x4 grid and flattened. [C,S,S] -> [F], [N,C,S,S] -> [N,F].
Tensor extract_features(const GanModel& m, const Tensor& images01);

struct ProbeResult {
  Tensor weights;  // [F+1, classes], bias row last
  float accuracy = 0;
};

// One-vs-rest ridge regression in closed form; every 5th sample is held out
// and scored, the rest train the weights.
ProbeResult linear_probe(const Tensor& features, const std::vector<int>& labels, float l2);

void save_gan_checkpoint(const std::string& path, const GanModel& m);
GanModel load_gan_checkpoint(const std::string& path);

// Columns: epoch,d_loss,g_loss,value_v,d_real_mean,d_fake_mean (epoch 1-based).
void write_gan_loss_csv(const std::string& path, const std::vector<GanLossReport>& epochs);

}  // namespace ganshot
