#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "gamblenet/autograd.hpp"
#include "gamblenet/rng.hpp"
#include "json.hpp"

namespace gamblenet::models {

enum class Role { kSegmenter, kGambler, kDiscriminator };
enum class Norm { kInstance, kNone };

const char* to_string(Role role);
Role role_from_string(const std::string& name);

struct ArchitectureSpec {
  Role role = Role::kSegmenter;
  int blocks = 3;
  int base_width = 8;
  Norm norm = Norm::kInstance;
  bool skip = true;
  int input_channels = 3;
  int output_channels = 1;
  /// Zero the output layer so the initial output is uniform (softmax) or 0.5 (sigmoid).
  bool zero_init_head = false;
  std::uint64_t seed = 0;
  /// Discriminator block whose activations form the embedding; -1 = last.
  int embedding_layer = -1;

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

nlohmann::json to_json(const ArchitectureSpec& spec);
ArchitectureSpec spec_from_json(const nlohmann::json& j);

/// Channel width of encoder block `i`: base * 2^min(i, 3).
int block_width(const ArchitectureSpec& spec, int block);

struct Forward {
  nn::Var output;
  std::vector<nn::Var> features;  // per-encoder-block activations
};

/// A differentiable network with named parameters.
///
/// Segmenter and gambler share an encoder-decoder layout: `blocks` strided
/// 4x4 convolutions (norm + LeakyReLU 0.2; no norm on the first and
/// innermost blocks), mirrored transposed convolutions (norm + ReLU) with
/// skip concatenation, and a 3x3 head over the full-resolution features
/// concatenated with the raw input. The segmenter head ends in a channel
/// softmax, the gambler head in a sigmoid.
///
/// The patch discriminator is the encoder alone followed by a 3x3
/// convolution to a single sigmoid score per patch.
class Model {
 public:
  explicit Model(ArchitectureSpec spec);

  const ArchitectureSpec& spec() const noexcept { return spec_; }
  std::vector<nn::Parameter>& parameters() noexcept { return params_; }
  const std::vector<nn::Parameter>& parameters() const noexcept { return params_; }

  Forward forward(nn::Graph& g, nn::Var input);
  /// Evaluation-mode forward on a plain tensor.
  Tensor predict(const Tensor& input);

  /// Throws unless the input shape is compatible with the architecture.
  void check_input(const Tensor& input) const;

  void set_trainable(bool trainable);
  void zero_grad();
  std::size_t parameter_count() const;
  /// FNV-1a over all parameter bytes in declaration order.
  std::uint64_t parameter_hash() const;

  nn::Parameter& parameter(const std::string& name);

 private:
  struct Layer {
    int weight = -1;
    int bias = -1;
    int gamma = -1;
    int beta = -1;
    int channels = 0;
  };

  int add_param(const std::string& name, int c, int h, int w, double init_std, Rng& rng);
  Layer add_conv(const std::string& name, int in, int out, int kernel, bool transposed, bool norm,
                 bool zero, Rng& rng);
  nn::Var param_var(nn::Graph& g, int index);
  nn::Var bias_var(nn::Graph& g, const Layer& layer);

  ArchitectureSpec spec_;
  std::vector<nn::Parameter> params_;
  std::vector<Layer> down_;
  std::vector<Layer> up_;
  Layer head_;
};

Model build_segmenter(ArchitectureSpec spec, int num_classes);
Model build_gambler(ArchitectureSpec spec, int num_classes);
Model build_patch_discriminator(ArchitectureSpec spec, int num_classes);

/// Closed-form parameter count used to cross-check the builders.
std::size_t expected_parameter_count(const ArchitectureSpec& spec);

/// Score-grid side length of a patch discriminator for a given input side.
int patch_grid_size(const ArchitectureSpec& spec, int input_size);

// Gradient checking ---------------------------------------------------------

/// Builds the scalar objective on the graph from the model's forward output.
using ScalarObjective = std::function<nn::Var(nn::Graph&, const Forward&)>;

struct GradientCheckResult {
  double max_param_error = 0.0;
  double max_input_error = 0.0;
  std::size_t checked = 0;
  double max_error() const { return std::max(max_param_error, max_input_error); }
};

inline constexpr double kFiniteDifferenceStep = 1e-5;

/// Relative error ||a - n|| / max(||a||, ||n||, floor) over a whole gradient
/// tensor; elementwise ratios blow up on entries near zero.
double relative_error(const Tensor& analytic, const Tensor& numeric, double floor = 1e-12);

/// Compares analytic parameter and input gradients against central finite
/// differences, one relative error per parameter tensor. Frozen parameters
/// are skipped; input gradients are always checked.
GradientCheckResult gradient_check(Model& model, const Tensor& input, const ScalarObjective& objective,
                                   double step = kFiniteDifferenceStep);

/// Objective built from an arbitrary differentiable input leaf.
using InputObjective = std::function<nn::Var(nn::Graph&, nn::Var input)>;

/// Max relative error between the graph gradient w.r.t. `input` and central
/// finite differences of the objective value.
double input_gradient_check(const Tensor& input, const InputObjective& objective,
                            double step = kFiniteDifferenceStep);

// Checkpoints ---------------------------------------------------------------

struct NamedTensor {
  std::string name;
  Tensor value;
};

/// Binary archive of named tensors (little-endian doubles).
void write_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors);
std::vector<NamedTensor> read_archive(const std::filesystem::path& path);

/// Writes `<path>` (parameters) and `<path>.json` (architecture + metadata).
void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata = nlohmann::json::object());
Model load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata = nullptr);

}  // namespace gamblenet::models
