#include "depthseq/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "depthseq/errors.hpp"

namespace depthseq {

using tc::Shape;
using tc::Tensor;

void check_landmarks(const LandmarkSet& z, std::size_t depth) {
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (z[j] >= depth) {
      throw ValidationError("landmark " + std::to_string(j) + " index " + std::to_string(z[j]) +
                            " outside [0, " + std::to_string(depth) + ")");
    }
  }
  if (z.size() % kLandmarksPerSide != 0) return;
  for (std::size_t side = 0; side < z.size() / kLandmarksPerSide; ++side) {
    for (std::size_t t = 1; t < kLandmarksPerSide; ++t) {
      const std::size_t j = side * kLandmarksPerSide + t;
      if (z[j - 1] > z[j]) throw ValidationError("non-monotone landmarks");
    }
  }
}

void ModelConfig::check() const {
  if (in_channels == 0) throw ValidationError("in_channels must be >= 1");
  if (encoder_channels.empty()) throw ValidationError("encoder_channels must be nonempty");
  for (auto c : encoder_channels) {
    if (c == 0) throw ValidationError("encoder channel count must be >= 1");
  }
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0) {
    throw ValidationError("d_model must be a positive multiple of n_heads");
  }
  if (conv_kernel_depth % 2 == 0) throw ValidationError("conv_kernel_depth must be odd");
  if (encoder_kernel_depth % 2 == 0) throw ValidationError("encoder_kernel_depth must be odd");
  if (d_max < 1) throw ValidationError("d_max must be >= 1");
  if (n_landmarks < 1) throw ValidationError("n_landmarks must be >= 1");
  if (n_classes < 1) throw ValidationError("n_classes must be >= 1");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ValidationError("dropout must be in [0, 1)");
}

nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["in_channels"] = c.in_channels;
  j["encoder_channels"] = c.encoder_channels;
  j["d_model"] = c.d_model;
  j["n_layers"] = c.n_layers;
  j["n_heads"] = c.n_heads;
  j["conv_kernel_depth"] = c.conv_kernel_depth;
  j["d_max"] = c.d_max;
  j["n_landmarks"] = c.n_landmarks;
  j["n_classes"] = c.n_classes;
  j["dropout"] = c.dropout;
  j["encoder_kernel_depth"] = c.encoder_kernel_depth;
  j["padding_side"] = c.padding_side == PaddingSide::Left ? "left" : "right";
  j["cls_position"] = c.cls_position == ClsPosition::AfterPads ? "after_pads" : "front";
  j["attention_enabled"] = c.attention_enabled;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  if (!j.is_object()) throw ValidationError("model config must be a JSON object");
  try {
    c.in_channels = j.value("in_channels", c.in_channels);
    c.encoder_channels = j.value("encoder_channels", c.encoder_channels);
    c.d_model = j.value("d_model", c.d_model);
    c.n_layers = j.value("n_layers", c.n_layers);
    c.n_heads = j.value("n_heads", c.n_heads);
    c.conv_kernel_depth = j.value("conv_kernel_depth", c.conv_kernel_depth);
    c.d_max = j.value("d_max", c.d_max);
    c.n_landmarks = j.value("n_landmarks", c.n_landmarks);
    c.n_classes = j.value("n_classes", c.n_classes);
    c.dropout = j.value("dropout", c.dropout);
    c.encoder_kernel_depth = j.value("encoder_kernel_depth", c.encoder_kernel_depth);
    const std::string pad = j.value("padding_side", std::string("left"));
    if (pad == "left") {
      c.padding_side = PaddingSide::Left;
    } else if (pad == "right") {
      c.padding_side = PaddingSide::Right;
    } else {
      throw ValidationError("padding_side must be left or right");
    }
    const std::string cls = j.value("cls_position", std::string("after_pads"));
    if (cls == "after_pads") {
      c.cls_position = ClsPosition::AfterPads;
    } else if (cls == "front") {
      c.cls_position = ClsPosition::Front;
    } else {
      throw ValidationError("cls_position must be after_pads or front");
    }
    c.attention_enabled = j.value("attention_enabled", c.attention_enabled);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad model config: ") + e.what());
  }
  c.check();
  return c;
}

const Tensor& Model::param(const std::string& name) const {
  auto it = params.find(name);
  if (it == params.end()) throw ValidationError("missing parameter " + name);
  return it->second;
}

std::vector<Tensor> Model::parameters() const {
  std::vector<Tensor> out;
  for (const auto& [_, t] : params) out.push_back(t);
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [_, t] : params) n += t.size();
  return n;
}

namespace {

std::string block_name(std::size_t layer, const std::string& leaf) {
  return "block." + std::to_string(layer) + "." + leaf;
}

std::string enc_name(std::size_t i, const std::string& leaf) { return "enc." + std::to_string(i) + "." + leaf; }

bool is_weight(const std::string& name) {
  return name.size() >= 6 && (name.compare(name.size() - 6, 6, "weight") == 0 || name.ends_with(".wq") ||
                              name.ends_with(".wk") || name.ends_with(".wv") || name.ends_with(".wo"));
}

}  // namespace

std::map<std::string, Shape> parameter_shapes(const ModelConfig& c) {
  c.check();
  std::map<std::string, Shape> s;
  std::size_t cin = c.in_channels;
  for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) {
    const std::size_t cout = c.encoder_channels[i];
    s[enc_name(i, "weight")] = {cout, cin, 3, 3, c.encoder_kernel_depth};
    s[enc_name(i, "bias")] = {cout};
    s[enc_name(i, "norm.gamma")] = {cout};
    s[enc_name(i, "norm.beta")] = {cout};
    cin = cout;
  }
  const std::size_t C = c.d_model;
  s["enc.proj.weight"] = {C, cin};
  s["enc.proj.bias"] = {C};
  s["seq.cls"] = {1, 1, C};
  s["seq.pos"] = {c.seq_len(), C};
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    s[block_name(l, "conv.weight")] = {C, c.conv_kernel_depth};
    s[block_name(l, "conv.bias")] = {C};
    s[block_name(l, "ln1.gamma")] = {C};
    s[block_name(l, "ln1.beta")] = {C};
    if (c.attention_enabled) {
      for (const char* w : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"}) s[block_name(l, w)] = {C, C};
      for (const char* b : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"}) s[block_name(l, b)] = {C};
    } else {
      s[block_name(l, "mix.conv.weight")] = {C, c.conv_kernel_depth};
      s[block_name(l, "mix.conv.bias")] = {C};
      s[block_name(l, "mix.proj.weight")] = {C, C};
      s[block_name(l, "mix.proj.bias")] = {C};
    }
    s[block_name(l, "ln2.gamma")] = {C};
    s[block_name(l, "ln2.beta")] = {C};
    s[block_name(l, "mlp.fc1.weight")] = {4 * C, C};
    s[block_name(l, "mlp.fc1.bias")] = {4 * C};
    s[block_name(l, "mlp.fc2.weight")] = {C, 4 * C};
    s[block_name(l, "mlp.fc2.bias")] = {C};
  }
  s["final_norm.gamma"] = {C};
  s["final_norm.beta"] = {C};
  s["head.loc.weight"] = {c.n_landmarks, C};
  s["head.loc.bias"] = {c.n_landmarks};
  s["head.cls.weight"] = {c.n_classes, C};
  s["head.cls.bias"] = {c.n_classes};
  return s;
}

Model init_model(const ModelConfig& c, std::uint64_t seed) {
  Model m;
  m.config = c;
  std::mt19937_64 rng(seed);
  for (const auto& [name, shape] : parameter_shapes(c)) {
    std::vector<double> v(tc::numel(shape), 0.0);
    if (name.ends_with(".gamma")) {
      std::fill(v.begin(), v.end(), 1.0);
    } else if (name == "seq.cls" || name == "seq.pos") {
      const double a = std::sqrt(1.0 / static_cast<double>(c.d_model));
      std::uniform_real_distribution<double> u(-a, a);
      for (double& x : v) x = u(rng);
    } else if (is_weight(name)) {
      // fan_in: every axis but the first (conv kernels and depthwise kernels included).
      const std::size_t fan_in = tc::numel(shape) / shape[0];
      const double a = std::sqrt(1.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-a, a);
      for (double& x : v) x = u(rng);
    }
    m.params.emplace(name, Tensor::from(shape, std::move(v), true));
  }
  return m;
}

Tensor volumes_to_input(const std::vector<const Volume*>& volumes) {
  if (volumes.empty()) throw ValidationError("empty batch");
  const Dims d = volumes[0]->dims();
  const std::size_t H = d[0], W = d[1], D = d[2];
  std::vector<double> x(volumes.size() * H * W * D);
  const double span = kHuHigh - kHuLow;
  for (std::size_t b = 0; b < volumes.size(); ++b) {
    const Volume& v = *volumes[b];
    if (v.dims() != d) throw ValidationError("batch volumes differ in dims");
    double* dst = x.data() + b * H * W * D;
    for (std::size_t k = 0; k < D; ++k) {
      for (std::size_t j = 0; j < W; ++j) {
        for (std::size_t i = 0; i < H; ++i) {
          const double hu = std::clamp(static_cast<double>(v.at(i, j, k)), kHuLow, kHuHigh);
          dst[(i * W + j) * D + k] = (hu - kHuLow) / span;
        }
      }
    }
  }
  return Tensor::from({volumes.size(), 1, H, W, D}, std::move(x));
}

namespace {

// Normalizes each depth slice over (C, H, W), then applies a per-channel affine.
// Slices never mix, so the encoder stays depth-local.
Tensor slice_norm(const Tensor& h, const Tensor& gamma, const Tensor& beta) {
  const tc::Shape s = h.shape();  // [B, C, H, W, D]
  Tensor t = tc::permute(h, {0, 4, 1, 2, 3});
  t = tc::reshape(t, {s[0], s[4], s[1] * s[2] * s[3]});
  t = tc::layer_norm(t, Tensor(), Tensor(), 2);
  t = tc::reshape(t, {s[0], s[4], s[1], s[2], s[3]});
  t = tc::permute(t, {0, 1, 3, 4, 2});  // [B, D, H, W, C]
  t = tc::add(tc::mul(t, gamma), beta);
  return tc::permute(t, {0, 4, 2, 3, 1});
}

}  // namespace

Tensor encode_slices(const Model& m, const Tensor& x) {
  const ModelConfig& c = m.config;
  if (x.rank() != 5 || x.dim(1) != c.in_channels) {
    throw ValidationError("encoder input must be [B, " + std::to_string(c.in_channels) + ", H, W, D], got " +
                          tc::shape_str(x.shape()));
  }
  const std::size_t factor = std::size_t{1} << c.encoder_channels.size();
  if (x.dim(2) % factor != 0 || x.dim(3) % factor != 0) {
    throw ValidationError("indivisible spatial dims: H and W must be multiples of " + std::to_string(factor));
  }
  Tensor h = x;
  const tc::Triple stride{2, 2, 1};
  const tc::Triple pad{1, 1, c.encoder_kernel_depth / 2};
  for (std::size_t i = 0; i < c.encoder_channels.size(); ++i) {
    h = tc::conv3d(h, m.param(enc_name(i, "weight")), m.param(enc_name(i, "bias")), stride, pad);
    h = slice_norm(h, m.param(enc_name(i, "norm.gamma")), m.param(enc_name(i, "norm.beta")));
    h = tc::gelu(h);
  }
  h = tc::mean_pool(h, {2, 3});                 // [B, C_last, D]
  h = tc::permute(h, {0, 2, 1});                // [B, D, C_last]
  h = tc::linear(h, m.param("enc.proj.weight"), m.param("enc.proj.bias"));
  return tc::permute(h, {0, 2, 1});             // [B, d_model, D]
}

SequenceLayout sequence_layout(const ModelConfig& c, std::size_t depth) {
  if (depth == 0) throw ValidationError("sequence needs at least one slice");
  if (depth > c.d_max) {
    throw ValidationError("depth " + std::to_string(depth) + " exceeds d_max " + std::to_string(c.d_max));
  }
  SequenceLayout l;
  l.pad_count = c.d_max - depth;
  if (c.padding_side == PaddingSide::Right) {
    l.cls_index = 0;
    l.first_valid = 1;
    l.pad_begin = depth + 1;
  } else if (c.cls_position == ClsPosition::Front) {
    l.cls_index = 0;
    l.pad_begin = 1;
    l.first_valid = 1 + l.pad_count;
  } else {
    l.pad_begin = 0;
    l.cls_index = l.pad_count;
    l.first_valid = l.pad_count + 1;
  }
  return l;
}

PreparedSequence prepare_sequence(const Model& m, const Tensor& features) {
  const ModelConfig& c = m.config;
  if (features.rank() != 3 || features.dim(1) != c.d_model) {
    throw ValidationError("features must be [B, d_model, D], got " + tc::shape_str(features.shape()));
  }
  const std::size_t B = features.dim(0);
  const std::size_t D = features.dim(2);
  const SequenceLayout lay = sequence_layout(c, D);
  const Tensor slices = tc::permute(features, {0, 2, 1});
  const Tensor cls = tc::expand_batch(m.param("seq.cls"), B);
  std::vector<Tensor> parts;
  const Tensor pads = lay.pad_count ? Tensor::zeros({B, lay.pad_count, c.d_model}) : Tensor();
  if (c.padding_side == PaddingSide::Right) {
    parts = {cls, slices};
    if (pads.defined()) parts.push_back(pads);
  } else if (c.cls_position == ClsPosition::Front) {
    parts = {cls};
    if (pads.defined()) parts.push_back(pads);
    parts.push_back(slices);
  } else {
    if (pads.defined()) parts.push_back(pads);
    parts.push_back(cls);
    parts.push_back(slices);
  }
  PreparedSequence s;
  s.tokens = tc::add(tc::concat(parts, 1), m.param("seq.pos"));
  s.mask = tc::AttentionMask(B, c.seq_len(), true);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t p = 0; p < lay.pad_count; ++p) s.mask.set(b, lay.pad_begin + p, false);
  }
  s.cls_index = lay.cls_index;
  s.first_valid = lay.first_valid;
  s.depth = D;
  return s;
}

tc::AttentionMask slice_mask(const PreparedSequence& s) {
  tc::AttentionMask m(s.mask.batch, s.mask.length, false);
  for (std::size_t b = 0; b < m.batch; ++b) {
    for (std::size_t z = 0; z < s.depth; ++z) m.set(b, s.first_valid + z, true);
  }
  return m;
}

namespace {

// Depthwise conv along the token axis of [B, L, C], with invalid tokens zeroed
// on the way in and out.
Tensor token_conv(const Tensor& x, const Tensor& w, const Tensor& b, const tc::AttentionMask& mask) {
  Tensor h = tc::permute(tc::apply_mask(x, mask, 1), {0, 2, 1});
  h = tc::conv1d_depthwise(h, w, b);
  return tc::apply_mask(tc::permute(h, {0, 2, 1}), mask, 1);
}

Tensor maybe_dropout(const Tensor& x, double p, std::mt19937_64* rng) {
  return rng && p > 0.0 ? tc::dropout(x, p, *rng) : x;
}

}  // namespace

Tensor depth_attention_block(const Model& m, std::size_t layer, const Tensor& tokens,
                             const tc::AttentionMask& mask) {
  const ModelConfig& c = m.config;
  auto P = [&](const char* leaf) -> const Tensor& { return m.param(block_name(layer, leaf)); };
  Tensor x = tc::add(tokens, token_conv(tokens, P("conv.weight"), P("conv.bias"), mask));

  const Tensor n1 = tc::layer_norm(x, P("ln1.gamma"), P("ln1.beta"), 2);
  Tensor mixed;
  if (c.attention_enabled) {
    const tc::AttentionParams ap{P("attn.wq"), P("attn.bq"), P("attn.wk"), P("attn.bk"),
                                 P("attn.wv"), P("attn.bv"), P("attn.wo"), P("attn.bo")};
    mixed = tc::multihead_attention(n1, mask, c.n_heads, ap);
  } else {
    mixed = token_conv(n1, P("mix.conv.weight"), P("mix.conv.bias"), mask);
    mixed = tc::apply_mask(tc::linear(mixed, P("mix.proj.weight"), P("mix.proj.bias")), mask, 1);
  }
  x = tc::add(x, mixed);

  const Tensor n2 = tc::layer_norm(x, P("ln2.gamma"), P("ln2.beta"), 2);
  Tensor h = tc::gelu(tc::linear(n2, P("mlp.fc1.weight"), P("mlp.fc1.bias")));
  h = tc::linear(h, P("mlp.fc2.weight"), P("mlp.fc2.bias"));
  return tc::add(x, tc::apply_mask(h, mask, 1));
}

PredictionSet ModelOutput::prediction(std::size_t b) const {
  const std::size_t N = landmark_probs.dim(1);
  const std::size_t L = landmark_probs.dim(2);
  PredictionSet p(N, depth);
  const auto v = landmark_probs.values();
  for (std::size_t j = 0; j < N; ++j) {
    for (std::size_t z = 0; z < depth; ++z) p.at(j, z) = v[(b * N + j) * L + first_valid + z];
  }
  return p;
}

ModelOutput forward_sequence(const Model& m, const PreparedSequence& seq, std::mt19937_64* rng) {
  const ModelConfig& c = m.config;
  Tensor x = seq.tokens;
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    x = maybe_dropout(depth_attention_block(m, l, x, seq.mask), c.dropout, rng);
  }
  x = tc::layer_norm(x, m.param("final_norm.gamma"), m.param("final_norm.beta"), 2);

  ModelOutput out;
  out.slice_mask = slice_mask(seq);
  out.first_valid = seq.first_valid;
  out.cls_index = seq.cls_index;
  out.depth = seq.depth;
  const Tensor loc = tc::linear(x, m.param("head.loc.weight"), m.param("head.loc.bias"));  // [B, L, N]
  out.landmark_logits = tc::permute(loc, {0, 2, 1});
  out.landmark_probs = tc::masked_softmax(out.landmark_logits, out.slice_mask);
  const std::size_t B = x.dim(0);
  const Tensor cls_tok = tc::reshape(tc::slice(x, 1, seq.cls_index, 1), {B, c.d_model});
  out.cls_logits = tc::linear(cls_tok, m.param("head.cls.weight"), m.param("head.cls.bias"));
  return out;
}

ModelOutput forward(const Model& m, const Tensor& input, std::mt19937_64* rng) {
  return forward_sequence(m, prepare_sequence(m, encode_slices(m, input)), rng);
}

// ---------------------------------------------------------------------------

FlopBreakdown estimate_flops(const ModelConfig& c, const Dims& dims) {
  c.check();
  FlopBreakdown f;
  double h = static_cast<double>(dims[0]);
  double w = static_cast<double>(dims[1]);
  const double d = static_cast<double>(dims[2]);
  double cin = static_cast<double>(c.in_channels);
  const double kd = static_cast<double>(c.encoder_kernel_depth);
  for (auto co : c.encoder_channels) {
    h = std::floor((h + 2.0 - 3.0) / 2.0) + 1.0;
    w = std::floor((w + 2.0 - 3.0) / 2.0) + 1.0;
    f.encoder_flops += 2.0 * static_cast<double>(co) * cin * 9.0 * kd * h * w * d;
    cin = static_cast<double>(co);
  }
  const double C = static_cast<double>(c.d_model);
  f.encoder_flops += 2.0 * cin * C * d;

  const double L = static_cast<double>(c.seq_len());
  const double layers = static_cast<double>(c.n_layers);
  const double k = static_cast<double>(c.conv_kernel_depth);
  if (c.attention_enabled) {
    // scores: L x L per head over d_head channels, summed over heads = L^2 * C; same for the context.
    f.attention_flops = layers * 2.0 * (2.0 * L * L * C);
    f.sequence_flops = layers * (2.0 * L * C * k + 4.0 * 2.0 * L * C * C + 2.0 * 2.0 * L * C * 4.0 * C);
  } else {
    f.sequence_flops = layers * (2.0 * 2.0 * L * C * k + 2.0 * L * C * C + 2.0 * 2.0 * L * C * 4.0 * C);
  }
  f.head_flops = 2.0 * L * C * static_cast<double>(c.n_landmarks) + 2.0 * C * static_cast<double>(c.n_classes);
  f.total = f.encoder_flops + f.attention_flops + f.sequence_flops + f.head_flops;
  return f;
}

nlohmann::json to_json(const FlopBreakdown& f) {
  nlohmann::json j;
  j["encoder_flops"] = f.encoder_flops;
  j["attention_flops"] = f.attention_flops;
  j["sequence_flops"] = f.sequence_flops;
  j["head_flops"] = f.head_flops;
  j["total"] = f.total;
  return j;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

void append_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double read_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i) bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

std::string encode_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json h;
  h["magic"] = kCheckpointMagic;
  h["version"] = kCheckpointVersion;
  h["config"] = to_json(c.model.config);
  h["init"] = c.model.init_scheme;
  h["seed"] = c.seed;
  h["epoch"] = c.epoch;
  h["val_metric"] = c.val_metric;
  h["dtype"] = "f64le";
  auto table = nlohmann::ordered_json::array();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.model.params) {
    nlohmann::ordered_json e;
    e["name"] = name;
    e["shape"] = t.shape();
    e["offset"] = offset;
    table.push_back(e);
    offset += t.size();
  }
  h["tensors"] = table;
  std::string out = h.dump() + "\n";
  out.reserve(out.size() + offset * 8);
  for (const auto& [_, t] : c.model.params) {
    for (double v : t.values()) append_f64(out, v);
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  const auto eol = bytes.find('\n');
  if (eol == std::string::npos) throw ValidationError("corrupt checkpoint");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(bytes.substr(0, eol));
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("corrupt checkpoint");
  }
  if (!h.is_object() || h.value("magic", std::string()) != kCheckpointMagic) {
    throw ValidationError("corrupt checkpoint");
  }
  if (!h.contains("version") || !h["version"].is_number_integer()) throw ValidationError("corrupt checkpoint");
  if (h["version"].get<int>() != kCheckpointVersion) {
    throw ValidationError("version mismatch: checkpoint version " + h["version"].dump() + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  Checkpoint c;
  std::map<std::string, Shape> expected;
  try {
    c.model.config = config_from_json(h.at("config"));
    c.model.init_scheme = h.at("init").get<std::string>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.epoch = h.at("epoch").get<std::size_t>();
    c.val_metric = h.at("val_metric").get<double>();
    if (h.at("dtype").get<std::string>() != "f64le") throw ValidationError("corrupt checkpoint");
    expected = parameter_shapes(c.model.config);
    const auto& table = h.at("tensors");
    const char* payload = bytes.data() + eol + 1;
    const std::size_t payload_values = (bytes.size() - eol - 1) / 8;
    if ((bytes.size() - eol - 1) % 8 != 0) throw ValidationError("corrupt checkpoint");
    std::size_t total = 0;
    for (const auto& e : table) {
      const std::string name = e.at("name").get<std::string>();
      const Shape shape = e.at("shape").get<Shape>();
      const std::size_t offset = e.at("offset").get<std::size_t>();
      auto it = expected.find(name);
      if (it == expected.end()) throw ValidationError("shape mismatch: unexpected tensor " + name);
      if (it->second != shape) {
        throw ValidationError("shape mismatch: " + name + " stored " + tc::shape_str(shape) + ", config expects " +
                              tc::shape_str(it->second));
      }
      const std::size_t n = tc::numel(shape);
      if (offset + n > payload_values) throw ValidationError("corrupt checkpoint");
      std::vector<double> v(n);
      for (std::size_t i = 0; i < n; ++i) v[i] = read_f64(payload + 8 * (offset + i));
      c.model.params.emplace(name, Tensor::from(shape, std::move(v), true));
      total += n;
    }
    if (total != payload_values) throw ValidationError("corrupt checkpoint");
  } catch (const nlohmann::json::exception&) {
    throw ValidationError("corrupt checkpoint");
  }
  if (c.model.params.size() != expected.size()) throw ValidationError("shape mismatch: missing tensors");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::filesystem::path& path) {
  const std::string bytes = encode_checkpoint(c);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ValidationError("cannot write " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open " + path.string());
  return decode_checkpoint(std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()));
}

}  // namespace depthseq
