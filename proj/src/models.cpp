#include "gamblenet/models.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace gamblenet::models {
namespace {

constexpr char kArchiveMagic[8] = {'G', 'N', 'E', 'T', 'A', 'R', 'C', '1'};
constexpr double kLeakySlope = 0.2;

bool down_has_norm(const ArchitectureSpec& spec, int block) {
  if (spec.norm == Norm::kNone || block == 0) return false;
  // The innermost encoder block of the encoder-decoder may be 1x1, where
  // per-instance statistics are degenerate.
  return spec.role == Role::kDiscriminator || block < spec.blocks - 1;
}

int up_input_width(const ArchitectureSpec& spec, int block) {
  const int w = block_width(spec, block);
  return (block == spec.blocks - 1 || !spec.skip) ? w : 2 * w;
}

int up_output_width(const ArchitectureSpec& spec, int block) {
  return block_width(spec, block > 0 ? block - 1 : 0);
}

std::string hex(std::uint64_t v) {
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << v;
  return out.str();
}

}  // namespace

const char* to_string(Role role) {
  switch (role) {
    case Role::kSegmenter: return "segmenter";
    case Role::kGambler: return "gambler";
    case Role::kDiscriminator: return "discriminator";
  }
  return "unknown";
}

Role role_from_string(const std::string& name) {
  if (name == "segmenter") return Role::kSegmenter;
  if (name == "gambler") return Role::kGambler;
  if (name == "discriminator") return Role::kDiscriminator;
  fail(ErrorCode::kConfig, "unknown model role '" + name + "'");
}

nlohmann::json to_json(const ArchitectureSpec& spec) {
  return {{"role", to_string(spec.role)},
          {"blocks", spec.blocks},
          {"base_width", spec.base_width},
          {"norm", spec.norm == Norm::kInstance ? "instance" : "none"},
          {"skip", spec.skip},
          {"input_channels", spec.input_channels},
          {"output_channels", spec.output_channels},
          {"zero_init_head", spec.zero_init_head},
          {"seed", spec.seed},
          {"embedding_layer", spec.embedding_layer}};
}

ArchitectureSpec spec_from_json(const nlohmann::json& j) {
  try {
    ArchitectureSpec spec;
    spec.role = role_from_string(j.at("role").get<std::string>());
    spec.blocks = j.at("blocks").get<int>();
    spec.base_width = j.at("base_width").get<int>();
    const std::string norm = j.value("norm", "instance");
    require(norm == "instance" || norm == "none", ErrorCode::kConfig, "unknown norm '" + norm + "'");
    spec.norm = norm == "instance" ? Norm::kInstance : Norm::kNone;
    spec.skip = j.value("skip", true);
    spec.input_channels = j.at("input_channels").get<int>();
    spec.output_channels = j.at("output_channels").get<int>();
    spec.zero_init_head = j.value("zero_init_head", false);
    spec.seed = j.value("seed", std::uint64_t{0});
    spec.embedding_layer = j.value("embedding_layer", -1);
    return spec;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kConfig, std::string("malformed architecture spec: ") + e.what());
  }
}

int block_width(const ArchitectureSpec& spec, int block) {
  return spec.base_width * (1 << std::min(block, 3));
}

Model::Model(ArchitectureSpec spec) : spec_(spec) {
  require(spec.blocks >= 1, ErrorCode::kConfig, "architecture needs at least one block");
  require(spec.base_width >= 1 && spec.input_channels >= 1 && spec.output_channels >= 1,
          ErrorCode::kConfig, "architecture widths must be positive");
  Rng rng({spec.seed, static_cast<std::uint64_t>(spec.role), 0x6d6f64656cULL});

  int in = spec.input_channels;
  for (int i = 0; i < spec.blocks; ++i) {
    const int out = block_width(spec, i);
    down_.push_back(add_conv("down" + std::to_string(i), in, out, 4, false, down_has_norm(spec, i),
                             false, rng));
    in = out;
  }
  if (spec.role == Role::kDiscriminator) {
    require(spec.embedding_layer < spec.blocks, ErrorCode::kConfig,
            "embedding layer beyond the last discriminator block");
    head_ = add_conv("head", in, spec.output_channels, 3, false, false, spec.zero_init_head, rng);
    return;
  }
  for (int i = spec.blocks - 1; i >= 0; --i) {
    up_.push_back(add_conv("up" + std::to_string(i), up_input_width(spec, i),
                           up_output_width(spec, i), 4, true, spec.norm == Norm::kInstance, false,
                           rng));
  }
  const int head_in = block_width(spec, 0) + (spec.skip ? spec.input_channels : 0);
  head_ = add_conv("head", head_in, spec.output_channels, 3, false, false, spec.zero_init_head, rng);
}

int Model::add_param(const std::string& name, int c, int h, int w, double init_std, Rng& rng) {
  nn::Parameter p;
  p.name = name;
  p.value = Tensor(c, h, w);
  if (init_std > 0.0) {
    for (double& v : p.value.values()) v = init_std * rng.normal();
  }
  p.grad = Tensor(c, h, w);
  params_.push_back(std::move(p));
  return static_cast<int>(params_.size()) - 1;
}

Model::Layer Model::add_conv(const std::string& name, int in, int out, int kernel, bool transposed,
                             bool norm, bool zero, Rng& rng) {
  Layer layer;
  layer.channels = out;
  const double fan_in = static_cast<double>(in) * kernel * kernel;
  const double std = zero ? 0.0 : std::sqrt((name == "head" ? 1.0 : 2.0) / fan_in);
  const int kk = kernel * kernel;
  layer.weight = transposed ? add_param(name + ".weight", in, out, kk, std, rng)
                            : add_param(name + ".weight", out, in, kk, std, rng);
  // Instance norm cancels a per-channel bias, so normalised layers carry none.
  if (!norm) layer.bias = add_param(name + ".bias", out, 1, 1, 0.0, rng);
  if (norm) {
    layer.gamma = add_param(name + ".gamma", out, 1, 1, 0.0, rng);
    params_[static_cast<std::size_t>(layer.gamma)].value.fill(1.0);
    layer.beta = add_param(name + ".beta", out, 1, 1, 0.0, rng);
  }
  return layer;
}

nn::Var Model::param_var(nn::Graph& g, int index) {
  return g.parameter(params_[static_cast<std::size_t>(index)]);
}

nn::Var Model::bias_var(nn::Graph& g, const Layer& layer) {
  if (layer.bias >= 0) return param_var(g, layer.bias);
  return g.constant(Tensor(layer.channels, 1, 1));
}

void Model::check_input(const Tensor& input) const {
  require(input.channels() == spec_.input_channels, ErrorCode::kShapeMismatch,
          std::string(to_string(spec_.role)) + " expects " + std::to_string(spec_.input_channels) +
              " input channels, got " + std::to_string(input.channels()));
  const int factor = 1 << spec_.blocks;
  require(input.height() % factor == 0 && input.width() % factor == 0 && input.height() > 0 &&
              input.width() > 0,
          ErrorCode::kShapeMismatch,
          "input " + input.shape_string() + " is not divisible by 2^" + std::to_string(spec_.blocks));
}

Forward Model::forward(nn::Graph& g, nn::Var input) {
  check_input(g.value(input));
  Forward out;
  nn::Var h = input;
  for (const Layer& layer : down_) {
    h = nn::conv2d(g, h, param_var(g, layer.weight), bias_var(g, layer), 4, 2, 1);
    if (layer.gamma >= 0) h = nn::instance_norm(g, h, param_var(g, layer.gamma), param_var(g, layer.beta));
    h = nn::leaky_relu(g, h, kLeakySlope);
    out.features.push_back(h);
  }
  if (spec_.role == Role::kDiscriminator) {
    h = nn::conv2d(g, h, param_var(g, head_.weight), bias_var(g, head_), 3, 1, 1);
    out.output = nn::sigmoid(g, h);
    return out;
  }
  for (std::size_t u = 0; u < up_.size(); ++u) {
    const int block = spec_.blocks - 1 - static_cast<int>(u);
    const Layer& layer = up_[u];
    h = nn::conv_transpose2d(g, h, param_var(g, layer.weight), bias_var(g, layer), 4, 2, 1);
    if (layer.gamma >= 0) h = nn::instance_norm(g, h, param_var(g, layer.gamma), param_var(g, layer.beta));
    h = nn::relu(g, h);
    if (spec_.skip && block > 0) h = nn::concat(g, h, out.features[static_cast<std::size_t>(block - 1)]);
  }
  if (spec_.skip) h = nn::concat(g, h, input);
  h = nn::conv2d(g, h, param_var(g, head_.weight), bias_var(g, head_), 3, 1, 1);
  out.output = spec_.role == Role::kSegmenter ? nn::softmax(g, h) : nn::sigmoid(g, h);
  return out;
}

Tensor Model::predict(const Tensor& input) {
  nn::Graph g;
  const Forward f = forward(g, g.constant(input));
  return g.value(f.output);
}

void Model::set_trainable(bool trainable) {
  for (auto& p : params_) p.trainable = trainable;
}

void Model::zero_grad() {
  for (auto& p : params_) {
    if (!p.grad.same_shape(p.value)) p.grad = Tensor(p.value.channels(), p.value.height(), p.value.width());
    p.grad.fill(0.0);
  }
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::uint64_t Model::parameter_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) h = fnv1a(p.value.data(), p.value.size() * sizeof(double), h);
  return h;
}

nn::Parameter& Model::parameter(const std::string& name) {
  for (auto& p : params_) {
    if (p.name == name) return p;
  }
  fail(ErrorCode::kInvalidArgument, "no parameter named '" + name + "'");
}

Model build_segmenter(ArchitectureSpec spec, int num_classes) {
  require(num_classes >= 2, ErrorCode::kConfig, "segmenter needs at least two classes");
  spec.role = Role::kSegmenter;
  spec.input_channels = 3;
  spec.output_channels = num_classes;
  return Model(spec);
}

Model build_gambler(ArchitectureSpec spec, int num_classes) {
  spec.role = Role::kGambler;
  spec.input_channels = 3 + num_classes;
  spec.output_channels = 1;
  return Model(spec);
}

Model build_patch_discriminator(ArchitectureSpec spec, int num_classes) {
  spec.role = Role::kDiscriminator;
  spec.input_channels = 3 + num_classes;
  spec.output_channels = 1;
  return Model(spec);
}

std::size_t expected_parameter_count(const ArchitectureSpec& spec) {
  auto conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + out; };
  auto normed_conv = [](std::size_t in, std::size_t out, std::size_t k) { return in * out * k * k + 2 * out; };
  const bool inorm = spec.norm == Norm::kInstance;
  std::size_t n = 0;
  std::size_t in = static_cast<std::size_t>(spec.input_channels);
  for (int i = 0; i < spec.blocks; ++i) {
    const auto out = static_cast<std::size_t>(block_width(spec, i));
    n += down_has_norm(spec, i) ? normed_conv(in, out, 4) : conv(in, out, 4);
    in = out;
  }
  if (spec.role == Role::kDiscriminator) return n + conv(in, static_cast<std::size_t>(spec.output_channels), 3);
  for (int i = spec.blocks - 1; i >= 0; --i) {
    const auto out = static_cast<std::size_t>(up_output_width(spec, i));
    const auto up_in = static_cast<std::size_t>(up_input_width(spec, i));
    n += inorm ? normed_conv(up_in, out, 4) : conv(up_in, out, 4);
  }
  const auto head_in = static_cast<std::size_t>(block_width(spec, 0)) +
                       (spec.skip ? static_cast<std::size_t>(spec.input_channels) : 0);
  return n + conv(head_in, static_cast<std::size_t>(spec.output_channels), 3);
}

int patch_grid_size(const ArchitectureSpec& spec, int input_size) {
  int s = input_size;
  for (int i = 0; i < spec.blocks; ++i) s = nn::conv_output_size(s, 4, 2, 1);
  return nn::conv_output_size(s, 3, 1, 1);
}

// Gradient checking --------------------------------------------------------

double relative_error(const Tensor& analytic, const Tensor& numeric, double floor) {
  require(analytic.size() == numeric.size(), ErrorCode::kShapeMismatch, "gradient sizes differ");
  double diff = 0.0, a = 0.0, n = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    a += analytic[i] * analytic[i];
    n += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(a), std::sqrt(n), floor});
}

namespace {

// Central differences of `f` with respect to every entry of `x`.
Tensor finite_difference(Tensor& x, const std::function<double()>& f, double step) {
  Tensor numeric(x.channels(), x.height(), x.width());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + step;
    const double plus = f();
    x[i] = saved - step;
    const double minus = f();
    x[i] = saved;
    numeric[i] = (plus - minus) / (2.0 * step);
  }
  return numeric;
}

double compare(const Tensor& analytic, const Tensor& numeric) {
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    if (!std::isfinite(analytic[i]) || !std::isfinite(numeric[i])) {
      fail(ErrorCode::kNumerical, "non-finite gradient during gradient check");
    }
  }
  return relative_error(analytic, numeric);
}

}  // namespace

GradientCheckResult gradient_check(Model& model, const Tensor& input, const ScalarObjective& objective,
                                   double step) {
  Tensor probe = input;
  auto evaluate = [&] {
    nn::Graph g;
    const Forward f = model.forward(g, g.constant(probe));
    return g.value(objective(g, f))[0];
  };

  model.zero_grad();
  nn::Graph g;
  const nn::Var in = g.input(input, true);
  const nn::Var loss = objective(g, model.forward(g, in));
  require(std::isfinite(g.value(loss)[0]), ErrorCode::kNumerical, "objective is not finite");
  g.backward(loss);
  const Tensor input_grad = g.grad(in);

  GradientCheckResult result;
  for (auto& p : model.parameters()) {
    if (!p.trainable) continue;
    result.max_param_error = std::max(result.max_param_error, compare(p.grad, finite_difference(p.value, evaluate, step)));
    result.checked += p.value.size();
  }
  result.max_input_error = compare(input_grad, finite_difference(probe, evaluate, step));
  result.checked += probe.size();
  return result;
}

double input_gradient_check(const Tensor& input, const InputObjective& objective, double step) {
  nn::Graph g;
  const nn::Var in = g.input(input, true);
  const nn::Var loss = objective(g, in);
  require(std::isfinite(g.value(loss)[0]), ErrorCode::kNumerical, "objective is not finite");
  g.backward(loss);
  Tensor probe = input;
  const Tensor numeric = finite_difference(
      probe,
      [&] {
        nn::Graph probe_graph;
        return probe_graph.value(objective(probe_graph, probe_graph.constant(probe)))[0];
      },
      step);
  return compare(g.grad(in), numeric);
}

// Checkpoints --------------------------------------------------------------

void write_archive(const std::filesystem::path& path, const std::vector<NamedTensor>& tensors) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot open '" + path.string() + "' for writing");
  auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  out.write(kArchiveMagic, sizeof kArchiveMagic);
  put_u32(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(static_cast<std::uint32_t>(t.name.size()));
    out.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    put_u32(static_cast<std::uint32_t>(t.value.channels()));
    put_u32(static_cast<std::uint32_t>(t.value.height()));
    put_u32(static_cast<std::uint32_t>(t.value.width()));
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(double)));
  }
  out.flush();
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing '" + path.string() + "'");
}

std::vector<NamedTensor> read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::kIo, "cannot open '" + path.string() + "'");
  char magic[sizeof kArchiveMagic];
  in.read(magic, sizeof magic);
  require(in && std::memcmp(magic, kArchiveMagic, sizeof magic) == 0, ErrorCode::kIo,
          "'" + path.string() + "' is not a parameter archive");
  auto get_u32 = [&]() {
    std::uint32_t v = 0;
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    require(static_cast<bool>(in), ErrorCode::kIo, "truncated archive '" + path.string() + "'");
    return v;
  };
  const std::uint32_t count = get_u32();
  std::vector<NamedTensor> out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name.resize(get_u32());
    in.read(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    const auto c = static_cast<int>(get_u32());
    const auto h = static_cast<int>(get_u32());
    const auto w = static_cast<int>(get_u32());
    t.value = Tensor(c, h, w);
    in.read(reinterpret_cast<char*>(t.value.data()),
            static_cast<std::streamsize>(t.value.size() * sizeof(double)));
    require(static_cast<bool>(in), ErrorCode::kIo, "truncated archive '" + path.string() + "'");
    out.push_back(std::move(t));
  }
  return out;
}

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const nlohmann::json& metadata) {
  std::vector<NamedTensor> tensors;
  for (const auto& p : model.parameters()) tensors.push_back({p.name, p.value});
  write_archive(path, tensors);
  nlohmann::json sidecar = {{"format_version", 1},
                            {"architecture", to_json(model.spec())},
                            {"parameter_hash", hex(model.parameter_hash())},
                            {"metadata", metadata}};
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::kIo, "cannot write checkpoint sidecar for '" + path.string() + "'");
  out << sidecar.dump(2) << '\n';
  require(static_cast<bool>(out), ErrorCode::kIo, "failed writing checkpoint sidecar");
}

Model load_checkpoint(const std::filesystem::path& path, nlohmann::json* metadata) {
  std::ifstream in(path.string() + ".json");
  require(static_cast<bool>(in), ErrorCode::kIo, "missing checkpoint sidecar for '" + path.string() + "'");
  nlohmann::json sidecar;
  try {
    in >> sidecar;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kIo, "corrupt checkpoint sidecar: " + std::string(e.what()));
  }
  Model model(spec_from_json(sidecar.at("architecture")));
  const auto tensors = read_archive(path);
  require(tensors.size() == model.parameters().size(), ErrorCode::kIo,
          "checkpoint parameter count does not match architecture");
  for (const auto& t : tensors) {
    nn::Parameter& p = model.parameter(t.name);
    require(p.value.same_shape(t.value), ErrorCode::kIo, "checkpoint tensor '" + t.name + "' has wrong shape");
    p.value = t.value;
  }
  if (metadata != nullptr) *metadata = sidecar.value("metadata", nlohmann::json::object());
  return model;
}

}  // namespace gamblenet::models
