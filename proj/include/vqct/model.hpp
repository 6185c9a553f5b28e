#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "vqct/codebook.hpp"
#include "vqct/graph.hpp"
#include "vqct/io.hpp"
#include "vqct/tensor.hpp"

namespace vqct {

enum class ParamGroup { Encoder, Decoder };

enum class Intensity { Unit01, Sym11 };

enum class Provenance { Pretrained, Scratch, Finetuned };

inline std::string to_string(ParamGroup g) { return g == ParamGroup::Encoder ? "encoder" : "decoder"; }
inline std::string to_string(Intensity i) { return i == Intensity::Unit01 ? "unit01" : "sym11"; }
inline std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::Pretrained: return "pretrained";
    case Provenance::Scratch: return "scratch";
    case Provenance::Finetuned: return "finetuned";
  }
  return "?";
}

inline Intensity intensity_from_string(const std::string& s) {
  if (s == "unit01") return Intensity::Unit01;
  if (s == "sym11") return Intensity::Sym11;
  throw FormatError("unknown intensity space '" + s + "'");
}

inline Provenance provenance_from_string(const std::string& s) {
  if (s == "pretrained") return Provenance::Pretrained;
  if (s == "scratch") return Provenance::Scratch;
  if (s == "finetuned") return Provenance::Finetuned;
  throw FormatError("unknown provenance '" + s + "'");
}

struct ModelConfig {
  int spatial_rank = 2;
  int depth = 2;
  int base_channels = 8;
  int codebook_size = 32;
  int codebook_dim = 8;
  int pyramid_levels = 1;
  std::uint64_t seed = 0;
  double leaky_slope = 0.1;
  double commitment_beta = 0.25;

  void validate() const {
    if (spatial_rank != 2 && spatial_rank != 3) throw DomainError("spatial_rank must be 2 or 3");
    if (depth < 1) throw DomainError("depth must be >= 1");
    if (base_channels < 1) throw DomainError("base_channels must be >= 1");
    if (codebook_size < 2) throw DomainError("codebook_size must be >= 2");
    if (codebook_dim < 1) throw DomainError("codebook_dim must be >= 1");
    if (pyramid_levels < 1) throw DomainError("pyramid_levels must be >= 1");
    if (!(leaky_slope >= 0.0 && leaky_slope < 1.0)) throw DomainError("leaky_slope must lie in [0, 1)");
  }

  // Input extents must be divisible by this.
  std::size_t granularity() const { return std::size_t{1} << (depth + pyramid_levels - 1); }

  // base * 2^stage, capped at 8 * base.
  int channels(int stage) const { return base_channels * std::min(1 << stage, 8); }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"spatial_rank", c.spatial_rank},   {"depth", c.depth},
       {"base_channels", c.base_channels}, {"codebook_size", c.codebook_size},
       {"codebook_dim", c.codebook_dim},   {"pyramid_levels", c.pyramid_levels},
       {"seed", c.seed},                   {"leaky_slope", c.leaky_slope},
       {"commitment_beta", c.commitment_beta}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.spatial_rank = j.value("spatial_rank", d.spatial_rank);
  c.depth = j.value("depth", d.depth);
  c.base_channels = j.value("base_channels", d.base_channels);
  c.codebook_size = j.value("codebook_size", d.codebook_size);
  c.codebook_dim = j.value("codebook_dim", d.codebook_dim);
  c.pyramid_levels = j.value("pyramid_levels", d.pyramid_levels);
  c.seed = j.value("seed", d.seed);
  c.leaky_slope = j.value("leaky_slope", d.leaky_slope);
  c.commitment_beta = j.value("commitment_beta", d.commitment_beta);
}

struct Parameter {
  std::string name;
  ParamGroup group;
  Tensor value;
};

struct FreezeMask {
  bool encoder_trainable = true;
  bool codebook_trainable = true;
  bool decoder_trainable = true;

  static FreezeMask no_frozen() { return {true, true, true}; }
  static FreezeMask scratch() { return {true, true, true}; }
  // Codebook follows the encoder by default.
  static FreezeMask enc_frozen(bool codebook_trainable = false) { return {false, codebook_trainable, true}; }
};

// Complete model state: architecture, parameters, codebooks and bookkeeping.
struct Checkpoint {
  ModelConfig config;
  std::vector<Parameter> params;
  std::vector<Codebook> codebooks;  // one per pyramid level, finest first
  std::uint64_t step = 0;
  Provenance provenance = Provenance::Scratch;
  Intensity intensity = Intensity::Unit01;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t i = 0; i < params.size(); ++i)
      if (params[i].name == name) return i;
    throw DomainError("no parameter named " + name);
  }
  const Tensor& param(const std::string& name) const { return params[index_of(name)].value; }
  Tensor& param(const std::string& name) { return params[index_of(name)].value; }

  void round_to_storage() {
    for (auto& p : params)
      for (auto& v : p.value.values()) v = static_cast<float>(v);
    for (auto& cb : codebooks) cb.round_to_storage();
  }
};

namespace detail {

inline Shape kernel_shape(const ModelConfig& c, int c_out, int c_in, std::size_t k) {
  Shape s{static_cast<std::size_t>(c_out), static_cast<std::size_t>(c_in)};
  for (int a = 0; a < c.spatial_rank; ++a) s.push_back(k);
  return s;
}

inline void add_conv(std::vector<Parameter>& ps, const std::string& name, ParamGroup group, Shape kshape) {
  const std::size_t c_out = kshape[0];
  ps.push_back({name + ".weight", group, Tensor(std::move(kshape))});
  ps.push_back({name + ".bias", group, Tensor(Shape{c_out})});
}

inline std::string enc_name(int s) { return "enc" + std::to_string(s); }
inline std::string dec_name(int s) { return "dec" + std::to_string(s); }
inline std::string coarse_name(int l) { return "coarse" + std::to_string(l); }
inline std::string preq_name(int l) { return "pre_quant" + std::to_string(l); }
inline std::string postq_name(int l) { return "post_quant" + std::to_string(l); }

// Uniform in +-sqrt(6 / fan_in); biases start at zero.
inline void initialize_parameters(std::vector<Parameter>& ps, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (auto& p : ps) {
    if (p.value.rank() == 1) {
      p.value.fill(0.0);
      continue;
    }
    std::size_t fan_in = 1;
    for (std::size_t a = 1; a < p.value.rank(); ++a) fan_in *= p.value.dim(a);
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : p.value.values()) v = static_cast<float>(dist(rng));
  }
}

}  // namespace detail

inline std::vector<Parameter> make_parameter_layout(const ModelConfig& c) {
  std::vector<Parameter> ps;
  const int bottleneck = c.channels(c.depth - 1);
  for (int s = 0; s < c.depth; ++s)
    detail::add_conv(ps, detail::enc_name(s), ParamGroup::Encoder,
                     detail::kernel_shape(c, c.channels(s), s == 0 ? 1 : c.channels(s - 1), 3));
  for (int l = 1; l < c.pyramid_levels; ++l)
    detail::add_conv(ps, detail::coarse_name(l), ParamGroup::Encoder, detail::kernel_shape(c, bottleneck, bottleneck, 3));
  for (int l = 0; l < c.pyramid_levels; ++l)
    detail::add_conv(ps, detail::preq_name(l), ParamGroup::Encoder, detail::kernel_shape(c, c.codebook_dim, bottleneck, 1));
  for (int l = 0; l < c.pyramid_levels; ++l)
    detail::add_conv(ps, detail::postq_name(l), ParamGroup::Decoder, detail::kernel_shape(c, bottleneck, c.codebook_dim, 1));
  for (int s = c.depth - 1; s >= 0; --s)
    detail::add_conv(ps, detail::dec_name(s), ParamGroup::Decoder,
                     detail::kernel_shape(c, s == 0 ? c.base_channels : c.channels(s - 1), c.channels(s), 3));
  detail::add_conv(ps, "out", ParamGroup::Decoder, detail::kernel_shape(c, 1, c.base_channels, 3));
  return ps;
}

// Fresh model with seeded parameters and uninitialized codebooks.
inline Checkpoint build_model(const ModelConfig& config) {
  config.validate();
  Checkpoint ck;
  ck.config = config;
  ck.params = make_parameter_layout(config);
  detail::initialize_parameters(ck.params, config.seed);
  for (int l = 0; l < config.pyramid_levels; ++l)
    ck.codebooks.emplace_back(static_cast<std::size_t>(config.codebook_size),
                              static_cast<std::size_t>(config.codebook_dim));
  ck.provenance = Provenance::Scratch;
  return ck;
}

// Re-draws all parameters from `seed` and clears the codebooks.
inline void reinitialize(Checkpoint& ck, std::uint64_t seed) {
  ck.config.seed = seed;
  detail::initialize_parameters(ck.params, seed);
  for (auto& cb : ck.codebooks) cb = Codebook(cb.size(), cb.dim());
  ck.step = 0;
  ck.provenance = Provenance::Scratch;
}

inline void check_input_shape(const ModelConfig& c, const Shape& shape) {
  if (shape.size() != static_cast<std::size_t>(c.spatial_rank) + 1 || shape[0] != 1)
    throw DomainError("model expects a single-channel rank-" + std::to_string(c.spatial_rank) + " input, got " +
                      shape_str(shape));
  const auto g = c.granularity();
  for (std::size_t a = 1; a < shape.size(); ++a)
    if (shape[a] % g != 0)
      throw DomainError("input extent " + std::to_string(shape[a]) + " is not divisible by " + std::to_string(g));
}

enum class QuantizerMode { Quantize, Bypass };

struct GraphTrace {
  std::vector<NodeId> param_nodes;        // parallel to Checkpoint::params
  NodeId input = 0;
  NodeId output = 0;
  std::optional<NodeId> commitment;       // summed over levels
  std::vector<NodeId> normalized_latents;  // per level, quantizer inputs
  std::vector<QuantizeResult> quantized;   // empty in Bypass mode
};

inline std::vector<NodeId> bind_parameters(Graph& g, const Checkpoint& ck) {
  std::vector<NodeId> ids;
  ids.reserve(ck.params.size());
  for (const auto& p : ck.params) ids.push_back(g.parameter(p.value));
  return ids;
}

// Records one sample's forward pass. `stop_after_latents` skips quantization
// and decoding (used to gather vectors for k-means init).
inline GraphTrace trace_forward(Graph& g, const Checkpoint& ck, const std::vector<NodeId>& params,
                                const Tensor& input, QuantizerMode mode, bool stop_after_latents = false) {
  const ModelConfig& c = ck.config;
  check_input_shape(c, input.shape());
  require_finite(input, "model input");
  auto conv = [&](NodeId x, const std::string& name, std::size_t stride, std::size_t pad) {
    return g.conv(x, params[ck.index_of(name + ".weight")], params[ck.index_of(name + ".bias")], stride, pad);
  };
  const double slope = c.leaky_slope;

  GraphTrace t;
  t.param_nodes = params;
  t.input = g.constant(input);
  NodeId h = t.input;
  for (int s = 0; s < c.depth; ++s) h = g.leaky_relu(conv(h, detail::enc_name(s), 2, 1), slope);

  NodeId level_features = h;
  std::optional<NodeId> decoder_in;
  for (int l = 0; l < c.pyramid_levels; ++l) {
    if (l > 0) level_features = g.leaky_relu(conv(level_features, detail::coarse_name(l), 2, 1), slope);
    const NodeId zn = g.l2_normalize(conv(level_features, detail::preq_name(l), 1, 0));
    t.normalized_latents.push_back(zn);
    if (stop_after_latents) continue;
    NodeId q = zn;
    if (mode == QuantizerMode::Quantize) {
      auto res = ck.codebooks[l].quantize(channels_to_rows(g.value(zn)), c.commitment_beta);
      q = straight_through(g, zn, res);
      const NodeId commit = g.commitment(zn, g.value(q), c.commitment_beta);
      t.commitment = t.commitment ? g.add(*t.commitment, commit) : commit;
      t.quantized.push_back(std::move(res));
    }
    NodeId p = conv(q, detail::postq_name(l), 1, 0);
    if (l > 0) p = g.upsample(p, std::size_t{1} << l);
    decoder_in = decoder_in ? g.add(*decoder_in, p) : p;
  }
  if (stop_after_latents) return t;

  h = *decoder_in;
  for (int s = c.depth - 1; s >= 0; --s)
    h = g.leaky_relu(conv(g.upsample(h, 2), detail::dec_name(s), 1, 1), slope);
  t.output = conv(h, "out", 1, 1);
  return t;
}

struct ForwardResult {
  Tensor output;
  double commitment_loss = 0.0;
  std::vector<std::vector<std::size_t>> code_indices;  // per level
};

inline ForwardResult forward(const Checkpoint& ck, const Tensor& input, QuantizerMode mode = QuantizerMode::Quantize) {
  Graph g;
  std::vector<NodeId> params;
  params.reserve(ck.params.size());
  for (const auto& p : ck.params) params.push_back(g.constant(p.value));
  auto t = trace_forward(g, ck, params, input, mode);
  ForwardResult r{g.value(t.output), t.commitment ? g.value(*t.commitment).item() : 0.0, {}};
  for (const auto& q : t.quantized) r.code_indices.push_back(q.indices);
  return r;
}

// Indices of parameters the optimizer may update under `mask`.
inline std::vector<std::size_t> apply_freeze(const Checkpoint& ck, const FreezeMask& mask) {
  std::vector<std::size_t> trainable;
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const bool on = ck.params[i].group == ParamGroup::Encoder ? mask.encoder_trainable : mask.decoder_trainable;
    if (on) trainable.push_back(i);
  }
  return trainable;
}

// ---------------------------------------------------------------------------
// VQCK checkpoint file: "VQCK0001", u32 LE header length, JSON header, then
// little-endian float32 blocks at the byte offsets listed in the header.

inline constexpr char kCheckpointMagic[] = "VQCK0001";

inline std::string serialize_checkpoint(const Checkpoint& ck) {
  using nlohmann::json;
  std::string payload;
  json manifest = json::array();
  for (const auto& p : ck.params) {
    manifest.push_back({{"name", p.name},
                        {"group", to_string(p.group)},
                        {"shape", p.value.shape()},
                        {"offset", payload.size()},
                        {"count", p.value.size()}});
    io::put_f32_block<double>(payload, p.value.values());
  }
  json books = json::array();
  for (std::size_t l = 0; l < ck.codebooks.size(); ++l) {
    const auto& cb = ck.codebooks[l];
    json b = {{"level", l}, {"size", cb.size()}, {"dim", cb.dim()}, {"initialized", cb.initialized()},
              {"usage_age", cb.usage_age()}};
    b["codes_offset"] = payload.size();
    io::put_f32_block<double>(payload, cb.codes().data);
    b["cluster_size_offset"] = payload.size();
    io::put_f32_block<double>(payload, cb.ema_cluster_size());
    b["embed_sum_offset"] = payload.size();
    io::put_f32_block<double>(payload, cb.ema_embed_sum().data);
    books.push_back(std::move(b));
  }
  json header = {{"config", ck.config},
                 {"step", ck.step},
                 {"provenance", to_string(ck.provenance)},
                 {"intensity", to_string(ck.intensity)},
                 {"parameters", std::move(manifest)},
                 {"codebooks", std::move(books)},
                 {"payload_bytes", payload.size()}};
  return io::frame(kCheckpointMagic, header.dump(), payload);
}

inline Checkpoint deserialize_checkpoint(const std::string& bytes) {
  using nlohmann::json;
  const auto framed = io::unframe(kCheckpointMagic, bytes, "VQCK checkpoint");
  const std::string& payload = framed.payload;
  json header;
  try {
    header = json::parse(framed.header);
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  }
  try {
    if (payload.size() != header.at("payload_bytes").get<std::size_t>())
      throw FormatError("checkpoint payload length does not match header");
    Checkpoint ck = build_model(header.at("config").get<ModelConfig>());
    ck.step = header.at("step").get<std::uint64_t>();
    ck.provenance = provenance_from_string(header.at("provenance").get<std::string>());
    ck.intensity = intensity_from_string(header.at("intensity").get<std::string>());
    const auto& manifest = header.at("parameters");
    if (manifest.size() != ck.params.size()) throw FormatError("parameter manifest does not match architecture");
    for (std::size_t i = 0; i < manifest.size(); ++i) {
      const auto& m = manifest[i];
      auto& p = ck.params[i];
      if (m.at("name").get<std::string>() != p.name || m.at("shape").get<Shape>() != p.value.shape())
        throw FormatError("parameter " + p.name + " does not match the manifest");
      p.value = Tensor(p.value.shape(), io::get_f32_block<double>(payload, m.at("offset"), p.value.size()));
    }
    const auto& books = header.at("codebooks");
    if (books.size() != ck.codebooks.size()) throw FormatError("codebook count does not match architecture");
    for (std::size_t l = 0; l < books.size(); ++l) {
      const auto& b = books[l];
      auto& cb = ck.codebooks[l];
      const auto n = cb.size(), d = cb.dim();
      Matrix codes(n, d), sums(n, d);
      codes.data = io::get_f32_block<double>(payload, b.at("codes_offset"), n * d);
      sums.data = io::get_f32_block<double>(payload, b.at("embed_sum_offset"), n * d);
      cb.restore(std::move(codes), b.at("usage_age").get<std::vector<std::uint32_t>>(),
                 io::get_f32_block<double>(payload, b.at("cluster_size_offset"), n), std::move(sums),
                 b.at("initialized").get<bool>());
    }
    return ck;
  } catch (const json::exception& e) {
    throw FormatError(std::string("bad checkpoint header: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(e.what());
  } catch (const DomainError& e) {
    throw FormatError(e.what());
  }
}

inline void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  io::write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint load_checkpoint(const std::string& path) { return deserialize_checkpoint(io::read_file(path)); }

}  // namespace vqct
