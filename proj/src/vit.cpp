#include "fpvit/vit.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "fpvit/error.hpp"

namespace fpvit {

void ViTConfig::validate() const {
  auto positive = [](int v, const char* name) {
    if (v < 1) throw Error(ErrorKind::InvalidArgument, std::string("ViTConfig: ") + name + " must be >= 1");
  };
  positive(image_size, "image_size");
  positive(patch_size, "patch_size");
  positive(embed_dim, "embed_dim");
  positive(n_layers, "n_layers");
  positive(n_heads, "n_heads");
  positive(ffn_hidden, "ffn_hidden");
  if (n_classes < 2) throw Error(ErrorKind::InvalidArgument, "ViTConfig: n_classes must be >= 2");
  if (image_size % patch_size != 0)
    throw Error(ErrorKind::InvalidArgument, "ViTConfig: image_size " + std::to_string(image_size) +
                                                " not divisible by patch_size " + std::to_string(patch_size));
  if (embed_dim % n_heads != 0)
    throw Error(ErrorKind::InvalidArgument, "ViTConfig: embed_dim " + std::to_string(embed_dim) +
                                                " not divisible by n_heads " + std::to_string(n_heads));
}

ViTConfig ViTConfig::for_task(Task task) {
  ViTConfig cfg;
  if (task == Task::KSvsWSS) {
    cfg.embed_dim = 256;
    cfg.ffn_hidden = 512;
  }
  return cfg;
}

nlohmann::json to_json(const ViTConfig& cfg) {
  return {{"image_size", cfg.image_size}, {"patch_size", cfg.patch_size}, {"embed_dim", cfg.embed_dim},
          {"n_layers", cfg.n_layers},     {"n_heads", cfg.n_heads},       {"ffn_hidden", cfg.ffn_hidden},
          {"n_classes", cfg.n_classes}};
}

ViTConfig vit_config_from_json(const nlohmann::json& j) {
  try {
    ViTConfig cfg;
    cfg.image_size = j.at("image_size").get<int>();
    cfg.patch_size = j.at("patch_size").get<int>();
    cfg.embed_dim = j.at("embed_dim").get<int>();
    cfg.n_layers = j.at("n_layers").get<int>();
    cfg.n_heads = j.at("n_heads").get<int>();
    cfg.ffn_hidden = j.at("ffn_hidden").get<int>();
    cfg.n_classes = j.at("n_classes").get<int>();
    cfg.validate();
    return cfg;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("malformed model config: ") + e.what());
  }
}

Matrix<double> positional_encoding(Index seq_len, Index dim) {
  Matrix<double> pe(seq_len, dim);
  for (Index pos = 0; pos < seq_len; ++pos) {
    for (Index i = 0; i < dim; ++i) {
      const Index pair = i / 2;
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(pair) / static_cast<double>(dim));
      pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Matrix<double> patchify(const FloatImage& img, int patch_size) {
  if (patch_size < 1 || img.rows() % patch_size != 0 || img.cols() % patch_size != 0)
    throw Error(ErrorKind::ShapeMismatch, "patchify: " + std::to_string(img.cols()) + "x" + std::to_string(img.rows()) +
                                              " image does not tile into " + std::to_string(patch_size) + "px patches");
  const Index gy = img.rows() / patch_size, gx = img.cols() / patch_size;
  Matrix<double> out(gy * gx, static_cast<Index>(patch_size) * patch_size);
  for (Index py = 0; py < gy; ++py)
    for (Index px = 0; px < gx; ++px)
      for (Index y = 0; y < patch_size; ++y)
        for (Index x = 0; x < patch_size; ++x)
          out(py * gx + px, y * patch_size + x) = img(py * patch_size + y, px * patch_size + x);
  return out;
}

FloatImage unpatchify(const Matrix<double>& patches, int image_size, int patch_size) {
  const Index g = image_size / patch_size;
  if (image_size % patch_size != 0 || patches.rows() != g * g || patches.cols() != Index{patch_size} * patch_size)
    throw Error(ErrorKind::ShapeMismatch, "unpatchify: patch matrix does not match image geometry");
  FloatImage img(image_size, image_size);
  for (Index py = 0; py < g; ++py)
    for (Index px = 0; px < g; ++px)
      for (Index y = 0; y < patch_size; ++y)
        for (Index x = 0; x < patch_size; ++x)
          img(py * patch_size + y, px * patch_size + x) = patches(py * g + px, y * patch_size + x);
  return img;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'F', 'P', 'V', 'I', 'T', 'C', 'K', 'P'};

template <typename T>
constexpr const char* dtype_name() {
  return sizeof(T) == 4 ? "f32" : "f64";
}

template <typename U>
void put_le(std::ostream& out, U value) {
  unsigned char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<unsigned char>(value >> (8 * i));
  out.write(reinterpret_cast<const char*>(bytes), sizeof bytes);
}

template <typename U>
U get_le(std::istream& in, const std::filesystem::path& path) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof bytes))
    throw Error(ErrorKind::Decode, "truncated checkpoint '" + path.string() + "'");
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

template <typename T>
using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;

}  // namespace

template <typename T>
void save_checkpoint(const std::filesystem::path& path, const ModelParams<T>& params, const CheckpointMeta& meta) {
  nlohmann::json header{{"format_version", kCheckpointVersion},
                        {"config", to_json(meta.config)},
                        {"task", to_string(meta.task)},
                        {"seed", meta.seed},
                        {"fold", meta.fold},
                        {"dtype", dtype_name<T>()}};
  nlohmann::json shapes = nlohmann::json::array();
  const auto named = params.named();
  for (const auto& [name, t] : named) shapes.push_back({{"name", name}, {"shape", t.shape()}});
  header["params"] = shapes;
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::Io, "cannot write checkpoint '" + path.string() + "'");
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kCheckpointVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : named)
    for (T v : t.data()) put_le<Bits<T>>(out, std::bit_cast<Bits<T>>(v));
  if (!out) throw Error(ErrorKind::Io, "failed writing checkpoint '" + path.string() + "'");
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::Io, "cannot open checkpoint '" + path.string() + "'");
  char magic[sizeof kMagic];
  if (!in.read(magic, sizeof magic)) throw Error(ErrorKind::Decode, "truncated checkpoint '" + path.string() + "'");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0)
    throw Error(ErrorKind::Decode, "'" + path.string() + "' is not a checkpoint (bad magic)");
  const auto version = get_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion)
    throw Error(ErrorKind::VersionMismatch, "checkpoint '" + path.string() + "' has format version " +
                                                std::to_string(version) + ", expected " +
                                                std::to_string(kCheckpointVersion));
  const auto header_len = get_le<std::uint64_t>(in, path);
  if (header_len > (1u << 26)) throw Error(ErrorKind::Decode, "implausible header length in '" + path.string() + "'");
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len)))
    throw Error(ErrorKind::Decode, "truncated checkpoint '" + path.string() + "'");

  Checkpoint<T> ck;
  try {
    const auto header = nlohmann::json::parse(text);
    if (header.at("dtype").get<std::string>() != dtype_name<T>())
      throw Error(ErrorKind::ConfigMismatch, "checkpoint '" + path.string() + "' stores " +
                                                 header.at("dtype").get<std::string>() + " parameters");
    ck.meta.config = vit_config_from_json(header.at("config"));
    ck.meta.task = parse_task(header.at("task").get<std::string>());
    ck.meta.seed = header.at("seed").get<std::uint64_t>();
    ck.meta.fold = header.at("fold").get<int>();
    ck.params = init_params<T>(ck.meta.config, 0);
    const auto named = ck.params.named();
    const auto& listed = header.at("params");
    if (listed.size() != named.size())
      throw Error(ErrorKind::Decode, "checkpoint '" + path.string() + "' lists an unexpected parameter count");
    for (std::size_t i = 0; i < named.size(); ++i) {
      if (listed[i].at("name").get<std::string>() != named[i].first ||
          listed[i].at("shape").get<Shape>() != named[i].second.shape())
        throw Error(ErrorKind::Decode, "checkpoint '" + path.string() + "': parameter " + std::to_string(i) +
                                           " does not match the model layout");
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::Decode, "malformed checkpoint header in '" + path.string() + "': " + e.what());
  }

  for (auto& [name, t] : ck.params.named()) {
    Matrix<T>& m = t.mutable_value();
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = std::bit_cast<T>(get_le<Bits<T>>(in, path));
  }
  if (in.peek() != std::char_traits<char>::eof())
    throw Error(ErrorKind::Decode, "trailing bytes in checkpoint '" + path.string() + "'");
  return ck;
}

template <typename T>
Checkpoint<T> load_checkpoint(const std::filesystem::path& path, const ViTConfig& expected) {
  Checkpoint<T> ck = load_checkpoint<T>(path);
  if (!(ck.meta.config == expected))
    throw Error(ErrorKind::ConfigMismatch, "checkpoint '" + path.string() + "' has config " +
                                               to_json(ck.meta.config).dump() + ", expected " +
                                               to_json(expected).dump());
  return ck;
}

template void save_checkpoint<float>(const std::filesystem::path&, const ModelParams<float>&, const CheckpointMeta&);
template void save_checkpoint<double>(const std::filesystem::path&, const ModelParams<double>&, const CheckpointMeta&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&);
template Checkpoint<float> load_checkpoint<float>(const std::filesystem::path&, const ViTConfig&);
template Checkpoint<double> load_checkpoint<double>(const std::filesystem::path&, const ViTConfig&);

}  // namespace fpvit
