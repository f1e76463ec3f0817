#pragma once

// The full network: convolutional stem, class token, learnable position
// embedding, a configurable stack of attention layers (plain or
// omni-relational per the bracket notation), part-token pooling, and
// batch-norm-neck heads for the class token and each part token.

#include <cctype>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "ohf/attention.hpp"
#include "ohf/conv.hpp"
#include "ohf/errors.hpp"
#include "ohf/lrp.hpp"
#include "ohf/oh_layer.hpp"
#include "ohf/ops.hpp"
#include "ohf/rng.hpp"
#include "ohf/tensor.hpp"

namespace ohf {

// ---------------------------------------------------------------------------
// Stack notation
// ---------------------------------------------------------------------------

// Which order each layer runs at, plus the widths shared by every layer.
// Layers absent from the map are plain first-order attention.
struct StackSpec {
  int layers = 4;
  std::map<int, int> orders;  // layer index -> order in {2, 3, 4}
  ShareMode mode = ShareMode::Full;
  int heads = 4;
  int width = 64;
  int parts = 4;

  int order_at(int layer) const {
    auto it = orders.find(layer);
    return it == orders.end() ? 1 : it->second;
  }
  int max_order() const {
    int m = 1;
    for (const auto& [i, o] : orders) m = std::max(m, o);
    return m;
  }
  friend bool operator==(const StackSpec& a, const StackSpec& b) {
    return a.layers == b.layers && a.orders == b.orders && a.mode == b.mode && a.heads == b.heads &&
           a.width == b.width && a.parts == b.parts;
  }
};

namespace detail {

inline int parse_int_at(const std::string& text, std::size_t& pos, const char* what) {
  if (pos >= text.size() || !std::isdigit(static_cast<unsigned char>(text[pos])))
    fail_parse(std::string("expected ") + what + " at position " + std::to_string(pos) + " in '" + text + "'");
  int v = 0;
  while (pos < text.size() && std::isdigit(static_cast<unsigned char>(text[pos]))) {
    v = v * 10 + (text[pos] - '0');
    ++pos;
  }
  return v;
}

inline void expect_at(const std::string& text, std::size_t& pos, const std::string& token) {
  if (text.compare(pos, token.size(), token) != 0)
    fail_parse("expected '" + token + "' at position " + std::to_string(pos) + " in '" + text + "'");
  pos += token.size();
}

}  // namespace detail

// Parses the bracketed layer notation: "[H_2^{2,8},H_3^{4,6}]" places an
// order-2 layer at indices 2 and 8 and an order-3 layer at 4 and 6 (0-based);
// unlisted layers are plain attention; "[None]" lists nothing.
inline StackSpec parse_stack(const std::string& text, int layers) {
  if (layers < 1) fail_config("layer count must be positive, got " + std::to_string(layers));
  StackSpec spec;
  spec.layers = layers;

  std::size_t pos = 0;
  detail::expect_at(text, pos, "[");
  if (text.compare(pos, 4, "None") == 0) {
    pos += 4;
    detail::expect_at(text, pos, "]");
    if (pos != text.size()) fail_parse("trailing characters at position " + std::to_string(pos) + " in '" + text + "'");
    return spec;
  }

  while (true) {
    detail::expect_at(text, pos, "H_");
    const std::size_t order_pos = pos;
    const int order = detail::parse_int_at(text, pos, "an order");
    if (order < 2 || order > 4)
      fail_parse("unsupported order " + std::to_string(order) + " at position " + std::to_string(order_pos) +
                 " (orders 2-4 are supported)");
    detail::expect_at(text, pos, "^{");
    while (true) {
      const std::size_t index_pos = pos;
      const int index = detail::parse_int_at(text, pos, "a layer index");
      if (index >= layers)
        fail_parse("layer index " + std::to_string(index) + " at position " + std::to_string(index_pos) +
                   " is out of range for " + std::to_string(layers) + " layers");
      if (!spec.orders.emplace(index, order).second)
        fail_parse("layer index " + std::to_string(index) + " at position " + std::to_string(index_pos) +
                   " appears in more than one group");
      if (pos < text.size() && text[pos] == ',') {
        ++pos;
        continue;
      }
      break;
    }
    detail::expect_at(text, pos, "}");
    if (pos < text.size() && text[pos] == ',') {
      ++pos;
      continue;
    }
    break;
  }
  detail::expect_at(text, pos, "]");
  if (pos != text.size()) fail_parse("trailing characters at position " + std::to_string(pos) + " in '" + text + "'");
  return spec;
}

// Renders the order map back into the bracket notation (orders ascending,
// indices ascending); parse_stack(format_stack(s), s.layers) round-trips.
inline std::string format_stack(const StackSpec& spec) {
  if (spec.orders.empty()) return "[None]";
  std::map<int, std::vector<int>> by_order;
  for (const auto& [index, order] : spec.orders) by_order[order].push_back(index);
  std::string out = "[";
  bool first_group = true;
  for (const auto& [order, indices] : by_order) {
    if (!first_group) out += ",";
    first_group = false;
    out += "H_" + std::to_string(order) + "^{";
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (i) out += ",";
      out += std::to_string(indices[i]);
    }
    out += "}";
  }
  return out + "]";
}

// ---------------------------------------------------------------------------
// Model configuration
// ---------------------------------------------------------------------------

// Everything needed to rebuild the network structure: the stack plus input
// geometry, identity count, and the score-sharing/downsampler knobs.
struct ModelConfig {
  StackSpec stack;
  int input_h = 60, input_w = 30;
  int num_ids = 8;
  PriorAxis prior_axis = PriorAxis::Key;
  bool tie_vk = false;
  std::string lrp_branches = "dfc+dwc";
  int deform_groups = 1;
};

// Serializes a ModelConfig as one line of `key=value` pairs (the checkpoint
// header). The stack text goes last because it contains no ';'.
inline std::string model_spec_string(const ModelConfig& cfg) {
  std::ostringstream out;
  out << "layers=" << cfg.stack.layers << ";width=" << cfg.stack.width << ";heads=" << cfg.stack.heads
      << ";parts=" << cfg.stack.parts << ";input=" << cfg.input_h << "x" << cfg.input_w << ";ids=" << cfg.num_ids
      << ";mode=" << share_mode_name(cfg.stack.mode) << ";prior=" << (cfg.prior_axis == PriorAxis::Key ? "key" : "query")
      << ";tie_vk=" << (cfg.tie_vk ? 1 : 0) << ";branches=" << cfg.lrp_branches << ";groups=" << cfg.deform_groups
      << ";stack=" << format_stack(cfg.stack);
  return out.str();
}

inline ModelConfig parse_model_spec(const std::string& text) {
  ModelConfig cfg;
  std::map<std::string, std::string> kv;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t eq = text.find('=', pos);
    if (eq == std::string::npos) fail_parse("malformed model spec near position " + std::to_string(pos) + ": '" + text + "'");
    const std::string key = text.substr(pos, eq - pos);
    // The stack value is the final field and may not contain ';'.
    const std::size_t end = key == "stack" ? text.size() : std::min(text.find(';', eq + 1), text.size());
    kv[key] = text.substr(eq + 1, end - eq - 1);
    pos = end == text.size() ? end : end + 1;
  }
  auto take = [&](const char* key) {
    auto it = kv.find(key);
    if (it == kv.end()) fail_parse(std::string("model spec is missing '") + key + "': '" + text + "'");
    const std::string v = it->second;
    kv.erase(it);
    return v;
  };
  auto take_int = [&](const char* key) {
    const std::string v = take(key);
    try {
      return std::stoi(v);
    } catch (const std::exception&) {
      fail_parse(std::string("model spec field '") + key + "' is not a number: '" + v + "'");
    }
  };
  const int layers = take_int("layers");
  const int width = take_int("width");
  const int heads = take_int("heads");
  const int parts = take_int("parts");
  const std::string input = take("input");
  const std::size_t x = input.find('x');
  if (x == std::string::npos) fail_parse("model spec input size must be HxW, got '" + input + "'");
  try {
    cfg.input_h = std::stoi(input.substr(0, x));
    cfg.input_w = std::stoi(input.substr(x + 1));
  } catch (const std::exception&) {
    fail_parse("model spec input size must be HxW, got '" + input + "'");
  }
  cfg.num_ids = take_int("ids");
  const std::string mode = take("mode");
  if (mode != "full" && mode != "shared") fail_parse("model spec mode must be full|shared, got '" + mode + "'");
  const std::string prior = take("prior");
  if (prior != "key" && prior != "query") fail_parse("model spec prior must be key|query, got '" + prior + "'");
  cfg.prior_axis = prior == "key" ? PriorAxis::Key : PriorAxis::Query;
  cfg.tie_vk = take_int("tie_vk") != 0;
  cfg.lrp_branches = take("branches");
  parse_lrp_branches(cfg.lrp_branches);  // validate
  cfg.deform_groups = take_int("groups");
  cfg.stack = parse_stack(take("stack"), layers);
  cfg.stack.width = width;
  cfg.stack.heads = heads;
  cfg.stack.parts = parts;
  cfg.stack.mode = mode == "full" ? ShareMode::Full : ShareMode::Shared;
  if (!kv.empty()) fail_parse("model spec has unknown field '" + kv.begin()->first + "'");
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

// One batch-norm-neck head: the raw feature feeds the metric loss, the
// normalized feature feeds the bias-free classifier and the inference
// embedding.
template <typename T>
struct BnHead {
  Tensor<T> bn_g, bn_b;
  Tensor<T> bn_rm, bn_rv;  // running mean/variance (buffers, not optimized)
  Tensor<T> classifier;    // [d, num_ids]
};

template <typename T>
struct ModelParams {
  Tensor<T> stem1_w;  // [d, 3, 5, 5], stride 5
  Tensor<T> stem2_w;  // [d, d, 3, 3], stride 2
  Tensor<T> cls_token;  // [1, d]
  Tensor<T> pos_embed;  // [1 + h·w, d]
  std::vector<OhLayerParams<T>> layers;
  Tensor<T> final_ln_g, final_ln_b;
  BnHead<T> cls_head;
  std::vector<BnHead<T>> part_heads;
  int grid_h = 0, grid_w = 0;  // stem output for the configured input size
};

inline constexpr double kBnMomentum = 0.1;
inline constexpr double kBnEps = 1e-5;

// Spatial grid the stem produces for an input of the given size.
inline std::pair<int, int> stem_grid(int input_h, int input_w) {
  const int h1 = detail::conv_out_extent(input_h, 5, 5, 1);
  const int w1 = detail::conv_out_extent(input_w, 5, 5, 1);
  return {detail::conv_out_extent(h1, 3, 2, 1), detail::conv_out_extent(w1, 3, 2, 1)};
}

namespace detail {

template <typename T>
Tensor<T> init_trunc(std::vector<int> shape, double stddev, Rng& rng) {
  std::vector<T> v(static_cast<std::size_t>(shape_numel(shape)));
  for (auto& e : v) e = static_cast<T>(rng.trunc_normal(stddev));
  return Tensor<T>::from_values(std::move(shape), std::move(v), /*requires_grad=*/true);
}

template <typename T>
Tensor<T> identity_matrix(int n, bool requires_grad) {
  std::vector<T> v(static_cast<std::size_t>(n) * n, T(0));
  for (int i = 0; i < n; ++i) v[static_cast<std::size_t>(i) * n + i] = T(1);
  return Tensor<T>::from_values({n, n}, std::move(v), requires_grad);
}

inline bool branch_selected(const std::vector<LrpBranch>& branches, LrpBranch kind) {
  for (auto b : branches)
    if (b == kind) return true;
  return false;
}

}  // namespace detail

// Fresh parameters for the configured network. Weights draw from a truncated
// normal (σ = 0.02); the class token, offset predictors, and every bias start
// at zero; norm gains at one; priors at identity.
template <typename T>
ModelParams<T> init_model(const ModelConfig& cfg, Rng& rng) {
  const int d = cfg.stack.width;
  if (d % cfg.stack.heads != 0)
    fail_config("width " + std::to_string(d) + " not divisible by head count " + std::to_string(cfg.stack.heads));
  if (cfg.input_h < 10 || cfg.input_w < 10)
    fail_config("input " + std::to_string(cfg.input_h) + "x" + std::to_string(cfg.input_w) +
                " is too small for the stem (needs at least 10x10)");
  const auto branches = parse_lrp_branches(cfg.lrp_branches);
  const double sigma = 0.02;

  ModelParams<T> mp;
  std::tie(mp.grid_h, mp.grid_w) = stem_grid(cfg.input_h, cfg.input_w);
  const int tokens = 1 + mp.grid_h * mp.grid_w;

  mp.stem1_w = detail::init_trunc<T>({d, 3, 5, 5}, sigma, rng);
  mp.stem2_w = detail::init_trunc<T>({d, d, 3, 3}, sigma, rng);
  mp.cls_token = Tensor<T>::zeros({1, d}, /*requires_grad=*/true);
  mp.pos_embed = detail::init_trunc<T>({tokens, d}, sigma, rng);

  for (int i = 0; i < cfg.stack.layers; ++i) {
    OhLayerParams<T> lp;
    lp.first = {detail::init_trunc<T>({d, d}, sigma, rng), detail::init_trunc<T>({d, d}, sigma, rng),
                detail::init_trunc<T>({d, d}, sigma, rng), detail::init_trunc<T>({d, d}, sigma, rng),
                cfg.stack.heads};
    lp.ln1_g = Tensor<T>::full({d}, T(1), true);
    lp.ln1_b = Tensor<T>::zeros({d}, true);
    lp.ln2_g = Tensor<T>::full({d}, T(1), true);
    lp.ln2_b = Tensor<T>::zeros({d}, true);
    lp.ffn.w1 = detail::init_trunc<T>({d, 4 * d}, sigma, rng);
    lp.ffn.b1 = Tensor<T>::zeros({4 * d}, true);
    lp.ffn.w2 = detail::init_trunc<T>({4 * d, d}, sigma, rng);
    lp.ffn.b2 = Tensor<T>::zeros({d}, true);
    lp.mode = cfg.stack.mode;
    lp.prior_axis = cfg.prior_axis;
    lp.tie_vk = cfg.tie_vk;

    const bool downsamples = !(branches.size() == 1 && branches[0] == LrpBranch::None);
    int ch = mp.grid_h, cw = mp.grid_w;
    for (int order = 2; order <= cfg.stack.order_at(i); ++order) {
      if (downsamples) {
        ch = (ch + 1) / 2;
        cw = (cw + 1) / 2;
      }
      OrderParams<T> op;
      op.lrp.branches = branches;
      if (detail::branch_selected(branches, LrpBranch::Dfc)) {
        op.lrp.offset_w = Tensor<T>::zeros({18, d, 3, 3}, true);
        op.lrp.offset_b = Tensor<T>::zeros({18}, true);
        op.lrp.deform_w = detail::init_trunc<T>({d, d / cfg.deform_groups, 3, 3}, sigma, rng);
        op.lrp.deform_groups = cfg.deform_groups;
      }
      if (detail::branch_selected(branches, LrpBranch::Dwc))
        op.lrp.dw_w = detail::init_trunc<T>({d, 1, 3, 3}, sigma, rng);
      if (detail::branch_selected(branches, LrpBranch::Nc))
        op.lrp.nc_w = detail::init_trunc<T>({d, d, 3, 3}, sigma, rng);
      if (cfg.stack.mode == ShareMode::Full) {
        op.w_q = detail::init_trunc<T>({d, d}, sigma, rng);
        op.w_k = detail::init_trunc<T>({d, d}, sigma, rng);
        if (!cfg.tie_vk) op.w_v = detail::init_trunc<T>({d, d}, sigma, rng);
      } else {
        op.w_v = detail::init_trunc<T>({d, d}, sigma, rng);
        op.w_prior = detail::identity_matrix<T>(ch * cw, true);
      }
      lp.high.push_back(std::move(op));
    }
    mp.layers.push_back(std::move(lp));
  }

  mp.final_ln_g = Tensor<T>::full({d}, T(1), true);
  mp.final_ln_b = Tensor<T>::zeros({d}, true);

  auto make_head = [&]() {
    BnHead<T> head;
    head.bn_g = Tensor<T>::full({d}, T(1), true);
    head.bn_b = Tensor<T>::zeros({d}, true);
    head.bn_rm = Tensor<T>::zeros({d});
    head.bn_rv = Tensor<T>::full({d}, T(1));
    head.classifier = detail::init_trunc<T>({d, cfg.num_ids}, sigma, rng);
    return head;
  };
  mp.cls_head = make_head();
  for (int k = 0; k < cfg.stack.parts; ++k) mp.part_heads.push_back(make_head());
  return mp;
}

// ---------------------------------------------------------------------------
// Named parameter enumeration (checkpointing, optimization)
// ---------------------------------------------------------------------------

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  bool decay = true;  // weight decay applies (norm affines and the class token opt out)
};

// Every trainable tensor with a stable name, in a fixed order. Tensors that
// the configuration does not create (e.g. full-mode priors) are absent.
template <typename T>
std::vector<NamedParam<T>> named_params(const ModelParams<T>& mp) {
  std::vector<NamedParam<T>> out;
  auto add = [&out](const std::string& name, const Tensor<T>& t, bool decay = true) {
    if (t.defined()) out.push_back({name, t, decay});
  };
  add("stem.conv1.w", mp.stem1_w);
  add("stem.conv2.w", mp.stem2_w);
  add("cls_token", mp.cls_token, false);
  add("pos_embed", mp.pos_embed);
  for (std::size_t i = 0; i < mp.layers.size(); ++i) {
    const auto& lp = mp.layers[i];
    const std::string L = "layer" + std::to_string(i) + ".";
    add(L + "first.w_q", lp.first.w_q);
    add(L + "first.w_k", lp.first.w_k);
    add(L + "first.w_v", lp.first.w_v);
    add(L + "first.w_o", lp.first.w_o);
    add(L + "ln1.g", lp.ln1_g, false);
    add(L + "ln1.b", lp.ln1_b, false);
    add(L + "ln2.g", lp.ln2_g, false);
    add(L + "ln2.b", lp.ln2_b, false);
    add(L + "ffn.w1", lp.ffn.w1);
    add(L + "ffn.b1", lp.ffn.b1);
    add(L + "ffn.w2", lp.ffn.w2);
    add(L + "ffn.b2", lp.ffn.b2);
    for (std::size_t o = 0; o < lp.high.size(); ++o) {
      const auto& op = lp.high[o];
      const std::string O = L + "order" + std::to_string(o + 2) + ".";
      add(O + "offset.w", op.lrp.offset_w);
      add(O + "offset.b", op.lrp.offset_b);
      add(O + "deform.w", op.lrp.deform_w);
      add(O + "dw.w", op.lrp.dw_w);
      add(O + "nc.w", op.lrp.nc_w);
      add(O + "w_q", op.w_q);
      add(O + "w_k", op.w_k);
      add(O + "w_v", op.w_v);
      add(O + "w_prior", op.w_prior);
    }
  }
  add("final_ln.g", mp.final_ln_g, false);
  add("final_ln.b", mp.final_ln_b, false);
  auto add_head = [&](const std::string& prefix, const BnHead<T>& head) {
    add(prefix + ".bn.g", head.bn_g, false);
    add(prefix + ".bn.b", head.bn_b, false);
    add(prefix + ".classifier", head.classifier);
  };
  add_head("head.cls", mp.cls_head);
  for (std::size_t k = 0; k < mp.part_heads.size(); ++k)
    add_head("head.part" + std::to_string(k), mp.part_heads[k]);
  return out;
}

// Non-trainable state that still belongs in a checkpoint: the running
// batch-norm statistics of every head.
template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_buffers(const ModelParams<T>& mp) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  auto add_head = [&out](const std::string& prefix, const BnHead<T>& head) {
    out.emplace_back(prefix + ".bn.rm", head.bn_rm);
    out.emplace_back(prefix + ".bn.rv", head.bn_rv);
  };
  add_head("head.cls", mp.cls_head);
  for (std::size_t k = 0; k < mp.part_heads.size(); ++k)
    add_head("head.part" + std::to_string(k), mp.part_heads[k]);
  return out;
}

// ---------------------------------------------------------------------------
// Forward pieces
// ---------------------------------------------------------------------------

// 5×5 stride-5 convolution, smooth nonlinearity, 3×3 stride-2 convolution
// (both padded by 1), flattened row-major into tokens.
template <typename T>
Tensor<T> stem_tokens(const Tensor<T>& image, const ModelParams<T>& mp, int* h_out, int* w_out) {
  if (image.dim() != 4 || image.extent(1) != 3)
    fail_dim("stem expects an RGB batch [B, 3, H, W], got " + shape_str(image.shape()));
  if (image.extent(2) < 10 || image.extent(3) < 10)
    fail_config("image " + std::to_string(image.extent(2)) + "x" + std::to_string(image.extent(3)) +
                " is too small for the stem (needs at least 10x10)");
  auto g = conv2d(gelu(conv2d(image, mp.stem1_w, 5, 1)), mp.stem2_w, 2, 1);
  *h_out = g.extent(2);
  *w_out = g.extent(3);
  return grid_to_tokens(g);
}

// Mean over p contiguous horizontal stripes of the spatial grid; stripe k
// covers rows [floor(k·h/p), floor((k+1)·h/p)), which partitions the rows.
template <typename T>
Tensor<T> part_pool(const Tensor<T>& tokens, int h, int w, int p) {
  if (tokens.dim() != 3 || tokens.extent(1) != h * w)
    fail_dim("part_pool expects [B, h·w, d] without a class token, got " + shape_str(tokens.shape()));
  if (p < 1 || p > h)
    fail_config("part count " + std::to_string(p) + " must lie in [1, " + std::to_string(h) + "] (grid rows)");
  std::vector<Tensor<T>> parts;
  for (int k = 0; k < p; ++k) {
    const int r0 = k * h / p, r1 = (k + 1) * h / p;
    parts.push_back(mean_tokens(tokens, r0 * w, r1 * w));
  }
  return stack_axis1(parts);
}

template <typename T>
struct ForwardResult {
  Tensor<T> z_cls;  // [B, d]
  Tensor<T> parts;  // [B, p, d]
  int h = 0, w = 0;
};

// Stem, class token, position embedding, the layer stack, final norm, then
// the class-token / part-token split.
template <typename T>
ForwardResult<T> forward(const Tensor<T>& image, const ModelParams<T>& mp, const ModelConfig& cfg,
                         std::vector<AttentionRecord<T>>* capture = nullptr,
                         std::vector<OhLayerStats>* stats = nullptr) {
  int h = 0, w = 0;
  auto tok = stem_tokens(image, mp, &h, &w);
  if (mp.pos_embed.extent(0) != 1 + h * w)
    fail_dim("position embedding covers " + std::to_string(mp.pos_embed.extent(0)) + " tokens but the stem produced " +
             std::to_string(1 + h * w) + " (grid " + std::to_string(h) + "x" + std::to_string(w) + ")");
  const int B = image.extent(0), d = cfg.stack.width;

  auto x = concat_tokens(repeat_batch(reshape(mp.cls_token, {1, 1, d}), B), tok);
  x = add_broadcast(x, mp.pos_embed);
  for (std::size_t i = 0; i < mp.layers.size(); ++i) {
    OhLayerStats layer_stats;
    x = oh_layer(x, mp.layers[i], h, w, capture, stats ? &layer_stats : nullptr, static_cast<int>(i));
    if (stats) stats->push_back(layer_stats);
  }
  x = layer_norm(x, mp.final_ln_g, mp.final_ln_b, static_cast<T>(kNormEps));

  ForwardResult<T> out;
  out.z_cls = reshape(slice_tokens(x, 0, 1), {B, d});
  out.parts = part_pool(slice_tokens(x, 1, 1 + h * w), h, w, cfg.stack.parts);
  out.h = h;
  out.w = w;
  return out;
}

// ---------------------------------------------------------------------------
// Heads
// ---------------------------------------------------------------------------

template <typename T>
struct HeadOutput {
  Tensor<T> f_triplet;  // raw feature, feeds the metric loss
  Tensor<T> f_infer;    // batch-normalized, feeds the classifier and retrieval
  Tensor<T> logits;     // [B, num_ids], bias-free
};

template <typename T>
HeadOutput<T> bnneck(const Tensor<T>& feature, BnHead<T>& head, bool training) {
  auto f_infer = batch_norm_1d(feature, head.bn_g, head.bn_b, head.bn_rm, head.bn_rv, training,
                               static_cast<T>(kBnMomentum), static_cast<T>(kBnEps));
  return {feature, f_infer, matmul(f_infer, head.classifier)};
}

// Inference embedding: the batch-normalized class token and part tokens,
// concatenated in order [cls, part_0 .. part_{p-1}] into [B, (1+p)·d].
template <typename T>
Tensor<T> embed(const Tensor<T>& image, ModelParams<T>& mp, const ModelConfig& cfg) {
  auto fr = forward(image, mp, cfg);
  const int B = fr.z_cls.extent(0), d = cfg.stack.width, p = cfg.stack.parts;
  std::vector<Tensor<T>> feats;
  feats.push_back(bnneck(fr.z_cls, mp.cls_head, false).f_infer);
  for (int k = 0; k < p; ++k) {
    auto part = reshape(slice_tokens(fr.parts, k, k + 1), {B, d});
    feats.push_back(bnneck(part, mp.part_heads[static_cast<std::size_t>(k)], false).f_infer);
  }
  return reshape(stack_axis1(feats), {B, (1 + p) * d});
}

}  // namespace ohf
