#pragma once

#include <map>
#include <string>
#include <vector>

#include "ganshot/ops.hpp"

// Model composition: layer specs, parameter storage, forward execution and
// the Adam optimizer.

namespace ganshot {

enum class LayerKind { conv, conv_transpose, batchnorm, activation, maxpool, flatten, dense };
enum class Act { leaky_relu, sigmoid, tanh };

struct LayerSpec {
  LayerKind kind;
  int in_ch = 0, out_ch = 0;     // conv/conv_transpose/dense (dense: features)
  int kernel = 0, stride = 1, pad = 0;
  bool bias = true;
  Act act = Act::leaky_relu;     // activation layers
  float negative_slope = 0.01f;
  int channels = 0;              // batchnorm
};

struct ModelSpec {
  Shape input;                   // per-sample shape, no batch dim
  std::vector<LayerSpec> layers;

  ModelSpec& conv(int in_ch, int out_ch, int k, int stride, int pad, bool bias = true);
  ModelSpec& conv_transpose(int in_ch, int out_ch, int k, int stride, int pad);
  ModelSpec& batchnorm(int channels);
  ModelSpec& activation(Act a, float negative_slope = 0.01f);
  ModelSpec& maxpool(int k, int stride);
  ModelSpec& flatten();
  ModelSpec& dense(int in_f, int out_f, bool bias = true);
};

// Per-sample output shape after each layer; index 0 is the input shape.
// Throws BuildError naming the first layer that fails to compose.
std::vector<Shape> propagate_shapes(const ModelSpec& spec);

enum class Mode { train, eval };

struct Param {
  Tensor value;
  bool trainable = true;  // running stats are stored but never optimizer-updated
  bool frozen = false;
};

class ParamSet {
 public:
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool has(const std::string& name) const { return entries_.count(name) != 0; }
  void insert(const std::string& name, Tensor value, bool trainable = true);

  void set_frozen(bool frozen);                            // every entry
  void set_frozen(const std::string& prefix, bool frozen); // entries under prefix

  // Rebinds all entries onto a fresh tape; trainable non-frozen entries become
  // gradient leaves, everything else stays off-tape (constants for this step).
  void watch_all(Tape& tape);

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  size_t size() const { return entries_.size(); }

  std::map<std::string, Tensor> tensors() const;           // snapshot of values

 private:
  std::map<std::string, Param> entries_;
};

// Restores the previous frozen flags on destruction.
class ScopedFreeze {
 public:
  explicit ScopedFreeze(ParamSet& params);
  ~ScopedFreeze();
  ScopedFreeze(const ScopedFreeze&) = delete;
  ScopedFreeze& operator=(const ScopedFreeze&) = delete;

 private:
  ParamSet& params_;
  std::vector<std::pair<std::string, bool>> saved_;
};

// Weights ~ Normal(0, 0.02), biases 0, batchnorm scale 1 / shift 0 / running
// stats (0, 1). Names are "<prefix>L<index>.<field>".
ParamSet init_params(const ModelSpec& spec, uint64_t seed);
void init_params_into(ParamSet& params, const ModelSpec& spec, Rng& rng,
                      const std::string& prefix);

// Runs the spec over a batch [N, ...input]. In train mode batch statistics
// normalize and running stats of non-frozen batchnorm entries are updated
// (momentum 0.1); eval mode uses running stats. If taps is non-null it
// receives the output of every layer, in order.
Tensor forward(const ModelSpec& spec, ParamSet& params, const Tensor& input, Mode mode,
               const std::string& prefix = "", std::vector<Tensor>* taps = nullptr);

struct AdamConfig {
  float lr = 2e-4f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
};

struct AdamState {
  AdamConfig cfg;
  long long t = 0;
  std::map<std::string, std::vector<float>> m, v;
};

using GradMap = std::map<std::string, std::vector<float>>;

// Gradients of trainable non-frozen entries present on the tape.
GradMap collect_gradients(const Tape& tape, const ParamSet& params);

// Standard bias-corrected Adam. Frozen and non-trainable entries are left
// untouched; a trainable non-frozen entry without a gradient is a contract
// violation. Updated values are fresh tensors (no aliasing with the tape).
void adam_step(ParamSet& params, const GradMap& grads, AdamState& state);

}  // namespace ganshot
