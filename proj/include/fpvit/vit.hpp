#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "fpvit/dataset.hpp"
#include "fpvit/image.hpp"
#include "fpvit/rng.hpp"
#include "fpvit/tensor.hpp"

namespace fpvit {

struct ViTConfig {
  int image_size = 224;
  int patch_size = 16;
  int embed_dim = 512;
  int n_layers = 3;
  int n_heads = 4;
  int ffn_hidden = 1024;
  int n_classes = 2;

  int grid() const { return image_size / patch_size; }
  int n_patches() const { return grid() * grid(); }
  int seq_len() const { return n_patches() + 1; }
  int patch_dim() const { return patch_size * patch_size; }
  int head_dim() const { return embed_dim / n_heads; }

  /// Throws InvalidArgument on non-divisible sizes or non-positive fields.
  void validate() const;

  /// Control-vs-syndrome tasks use 512/1024, KS vs WSS uses 256/512.
  static ViTConfig for_task(Task task);

  bool operator==(const ViTConfig&) const = default;
};

nlohmann::json to_json(const ViTConfig& cfg);
ViTConfig vit_config_from_json(const nlohmann::json& j);

template <typename T>
struct EncoderLayer {
  Tensor<T> ln1_gain, ln1_bias;
  Tensor<T> wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor<T> ln2_gain, ln2_bias;
  Tensor<T> ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

/// Learnable weights. Linear weights are stored [in, out].
template <typename T>
struct ModelParams {
  Tensor<T> patch_weight, patch_bias;
  Tensor<T> class_token;
  std::vector<EncoderLayer<T>> layers;
  Tensor<T> norm_gain, norm_bias;
  Tensor<T> head_weight, head_bias;

  /// Canonical parameter order (also the checkpoint order).
  std::vector<std::pair<std::string, Tensor<T>>> named() const {
    std::vector<std::pair<std::string, Tensor<T>>> out{
        {"patch_weight", patch_weight}, {"patch_bias", patch_bias}, {"class_token", class_token}};
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      const std::string p = "layer" + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "ln1_gain", L.ln1_gain}, {p + "ln1_bias", L.ln1_bias}, {p + "wq", L.wq},
                             {p + "bq", L.bq}, {p + "wk", L.wk}, {p + "bk", L.bk}, {p + "wv", L.wv},
                             {p + "bv", L.bv}, {p + "wo", L.wo}, {p + "bo", L.bo}, {p + "ln2_gain", L.ln2_gain},
                             {p + "ln2_bias", L.ln2_bias}, {p + "ffn_w1", L.ffn_w1}, {p + "ffn_b1", L.ffn_b1},
                             {p + "ffn_w2", L.ffn_w2}, {p + "ffn_b2", L.ffn_b2}});
    }
    out.insert(out.end(), {{"norm_gain", norm_gain}, {"norm_bias", norm_bias}, {"head_weight", head_weight},
                           {"head_bias", head_bias}});
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named()) out.push_back(t);
    return out;
  }

  void zero_grad() const {
    for (auto& t : parameters()) t.clear_grad();
  }
};

/// Deep copy with fresh (graph-free) leaves.
template <typename To, typename From>
ModelParams<To> cast_params(const ModelParams<From>& src) {
  auto conv = [](const Tensor<From>& t) {
    return Tensor<To>::from_matrix(t.shape(), t.value().template cast<To>(), true);
  };
  ModelParams<To> dst;
  dst.patch_weight = conv(src.patch_weight);
  dst.patch_bias = conv(src.patch_bias);
  dst.class_token = conv(src.class_token);
  for (const auto& L : src.layers) {
    dst.layers.push_back({conv(L.ln1_gain), conv(L.ln1_bias), conv(L.wq), conv(L.bq), conv(L.wk), conv(L.bk),
                          conv(L.wv), conv(L.bv), conv(L.wo), conv(L.bo), conv(L.ln2_gain), conv(L.ln2_bias),
                          conv(L.ffn_w1), conv(L.ffn_b1), conv(L.ffn_w2), conv(L.ffn_b2)});
  }
  dst.norm_gain = conv(src.norm_gain);
  dst.norm_bias = conv(src.norm_bias);
  dst.head_weight = conv(src.head_weight);
  dst.head_bias = conv(src.head_bias);
  return dst;
}

/// Weights and biases uniform in +-1/sqrt(fan_in), drawn in canonical
/// order from one seeded stream; class token zero; layer-norm gains 1 and
/// biases 0.
template <typename T>
ModelParams<T> init_params(const ViTConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  auto uniform = [&](Shape shape, Index fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    Matrix<T> m(detail::outer_dim(shape), detail::inner_dim(shape));
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-bound, bound));
    return Tensor<T>::from_matrix(std::move(shape), std::move(m), true);
  };
  auto filled = [](Shape shape, T v) {
    return Tensor<T>::from_matrix(shape, Matrix<T>::Constant(detail::outer_dim(shape), detail::inner_dim(shape), v),
                                  true);
  };
  const Index d = cfg.embed_dim, f = cfg.ffn_hidden, p = cfg.patch_dim(), c = cfg.n_classes;

  ModelParams<T> m;
  m.patch_weight = uniform({p, d}, p);
  m.patch_bias = uniform({d}, p);
  m.class_token = filled({d}, T(0));
  for (int l = 0; l < cfg.n_layers; ++l) {
    EncoderLayer<T> L;
    L.ln1_gain = filled({d}, T(1));
    L.ln1_bias = filled({d}, T(0));
    L.wq = uniform({d, d}, d);
    L.bq = uniform({d}, d);
    L.wk = uniform({d, d}, d);
    L.bk = uniform({d}, d);
    L.wv = uniform({d, d}, d);
    L.bv = uniform({d}, d);
    L.wo = uniform({d, d}, d);
    L.bo = uniform({d}, d);
    L.ln2_gain = filled({d}, T(1));
    L.ln2_bias = filled({d}, T(0));
    L.ffn_w1 = uniform({d, f}, d);
    L.ffn_b1 = uniform({f}, d);
    L.ffn_w2 = uniform({f, d}, f);
    L.ffn_b2 = uniform({d}, f);
    m.layers.push_back(std::move(L));
  }
  m.norm_gain = filled({d}, T(1));
  m.norm_bias = filled({d}, T(0));
  m.head_weight = uniform({d, c}, d);
  m.head_bias = uniform({c}, d);
  return m;
}

/// Sinusoidal encoding: PE(pos, 2i) = sin(pos / 10000^(2i/d)),
/// PE(pos, 2i+1) = cos(pos / 10000^(2i/d)). Position 0 is the class token.
Matrix<double> positional_encoding(Index seq_len, Index dim);

/// Row k is the flattened (row-major) k-th patch in row-major patch order.
Matrix<double> patchify(const FloatImage& img, int patch_size);
FloatImage unpatchify(const Matrix<double>& patches, int image_size, int patch_size);

/// Stacks standardized images into a [B, n_patches, patch_dim] constant.
template <typename T>
Tensor<T> patch_batch(std::span<const FloatImage> images, const ViTConfig& cfg) {
  const Index b = static_cast<Index>(images.size()), n = cfg.n_patches(), p = cfg.patch_dim();
  Matrix<T> out(b * n, p);
  for (Index i = 0; i < b; ++i) {
    const FloatImage& img = images[static_cast<std::size_t>(i)];
    if (img.rows() != cfg.image_size || img.cols() != cfg.image_size)
      throw Error(ErrorKind::ShapeMismatch, "input image is " + std::to_string(img.cols()) + "x" +
                                                std::to_string(img.rows()) + ", model expects " +
                                                std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
    out.middleRows(i * n, n) = patchify(img, cfg.patch_size).cast<T>();
  }
  return Tensor<T>::from_matrix({b, n, p}, std::move(out));
}

/// Post-softmax attention of one image: n_layers x n_heads matrices of
/// seq_len x seq_len, stored layer-major.
struct AttentionRecord {
  int n_layers = 0;
  int n_heads = 0;
  int seq_len = 0;
  std::vector<Matrix<double>> maps;

  const Matrix<double>& at(int layer, int head) const {
    return maps[static_cast<std::size_t>(layer * n_heads + head)];
  }
};

template <typename T>
struct ForwardOutput {
  Tensor<T> logits;                        // [B, n_classes]
  std::vector<AttentionRecord> attention;  // one per image when captured
};

/// Token sequence entering the first encoder block: [class; patches W + b] + PE.
template <typename T>
Tensor<T> embed_tokens(const ModelParams<T>& m, const ViTConfig& cfg, const Tensor<T>& patches) {
  Tensor<T> x = linear(patches, m.patch_weight, m.patch_bias);
  x = prepend_token(x, m.class_token);
  const Index s = cfg.seq_len(), d = cfg.embed_dim;
  return add(x, Tensor<T>::from_matrix({s, d}, positional_encoding(s, d).cast<T>()));
}

/// Pre-norm encoder: x += MHSA(LN(x)); x += FFN(LN(x)); logits from the
/// final-normed class token.
template <typename T>
ForwardOutput<T> forward(const ModelParams<T>& m, const ViTConfig& cfg, const Tensor<T>& patches,
                         bool capture_attention = false) {
  if (patches.rank() != 3 || patches.dim(1) != cfg.n_patches() || patches.dim(2) != cfg.patch_dim())
    throw Error(ErrorKind::ShapeMismatch, "forward: patches " + shape_str(patches.shape()) + " do not match config");
  const Index b = patches.dim(0), s = cfg.seq_len(), d = cfg.embed_dim, h = cfg.n_heads, dh = cfg.head_dim();
  const T inv_sqrt_dh = T(1) / std::sqrt(static_cast<T>(dh));

  ForwardOutput<T> out;
  if (capture_attention) {
    out.attention.resize(static_cast<std::size_t>(b));
    for (auto& rec : out.attention) {
      rec.n_layers = cfg.n_layers;
      rec.n_heads = cfg.n_heads;
      rec.seq_len = static_cast<int>(s);
    }
  }

  auto split_heads = [&](const Tensor<T>& t) {
    return reshape(permute(reshape(t, {b, s, h, dh}), {0, 2, 1, 3}), {b * h, s, dh});
  };
  auto check_finite = [](const Tensor<T>& t, const std::string& where) {
    if (!t.value().allFinite()) throw Error(ErrorKind::NonFinite, "non-finite activation in " + where);
  };

  Tensor<T> x = embed_tokens(m, cfg, patches);
  check_finite(x, "patch embedding");
  for (std::size_t l = 0; l < m.layers.size(); ++l) {
    const EncoderLayer<T>& L = m.layers[l];
    const Tensor<T> hn = layer_norm(x, L.ln1_gain, L.ln1_bias);
    const Tensor<T> q = split_heads(linear(hn, L.wq, L.bq));
    const Tensor<T> k = split_heads(linear(hn, L.wk, L.bk));
    const Tensor<T> v = split_heads(linear(hn, L.wv, L.bv));
    const Tensor<T> attn = softmax(scale(matmul(q, transpose(k)), inv_sqrt_dh));  // [B*H, S, S]
    if (capture_attention) {
      for (Index i = 0; i < b; ++i)
        for (Index j = 0; j < h; ++j)
          out.attention[static_cast<std::size_t>(i)].maps.push_back(
              attn.value().middleRows((i * h + j) * s, s).template cast<double>());
    }
    Tensor<T> ctx = reshape(permute(reshape(matmul(attn, v), {b, h, s, dh}), {0, 2, 1, 3}), {b, s, d});
    x = add(x, linear(ctx, L.wo, L.bo));
    const Tensor<T> h2 = layer_norm(x, L.ln2_gain, L.ln2_bias);
    x = add(x, linear(gelu(linear(h2, L.ffn_w1, L.ffn_b1)), L.ffn_w2, L.ffn_b2));
    check_finite(x, "encoder layer " + std::to_string(l));
  }
  const Tensor<T> cls = layer_norm(select(x, 1, 0), m.norm_gain, m.norm_bias);
  out.logits = linear(cls, m.head_weight, m.head_bias);
  check_finite(out.logits, "classification head");
  return out;
}

struct CheckpointMeta {
  ViTConfig config;
  Task task = Task::ControlVsKS;
  std::uint64_t seed = 0;
  int fold = -1;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: 8-byte magic "FPVITCKP", u32 format version, u64 header length,
/// JSON header (config, task, seed, fold, dtype, parameter names/shapes),
/// then each parameter's values as little-endian IEEE floats in canonical
/// order.
template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params, const CheckpointMeta& meta);

template <typename T>
struct Checkpoint {
  ModelParams<T> params;
  CheckpointMeta meta;
};

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path);

/// As load_checkpoint, but throws ConfigMismatch unless the stored config
/// equals `expected`.
template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ViTConfig& expected);

}  // namespace fpvit
