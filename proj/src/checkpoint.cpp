// SPDX-License-Identifier: Apache-2.0
#include "xkws/errors.hpp"
#include "xkws/model.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>

namespace xkws::model {
namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr char kMagic[8] = {'X', 'K', 'W', 'S', 'C', 'K', 'P', 'T'};

std::vector<std::pair<std::string, std::uint64_t>> architecture_constants(std::size_t text_width) {
  return {
      {"embed_dim", kEmbedDim},
      {"encoder_hidden", kEncoderHidden},
      {"discriminator_hidden", kDiscriminatorHidden},
      {"conv1_channels", kConv1Channels},
      {"conv2_channels", kConv2Channels},
      {"conv1_stride", kConv1Stride},
      {"n_mels", dsp::kNumMels},
      {"text_width", text_width},
  };
}

template <typename T>
void put(std::string& out, T v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_name(std::string& out, const std::string& name) {
  put(out, static_cast<std::uint32_t>(name.size()));
  out += name;
}

class Reader {
 public:
  Reader(std::string bytes, std::string origin) : bytes_(std::move(bytes)), origin_(std::move(origin)) {}

  template <typename T>
  T get(const std::string& field) {
    need(sizeof(T), field);
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::string name(const std::string& field) {
    const auto n = get<std::uint32_t>(field + " length");
    need(n, field);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  void doubles(double* dst, std::size_t n, const std::string& field) {
    if (n > (bytes_.size() - pos_) / sizeof(double)) need(n * sizeof(double), field);
    std::memcpy(dst, bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
  }

  bool done() const { return pos_ == bytes_.size(); }
  const std::string& origin() const { return origin_; }

 private:
  void need(std::size_t n, const std::string& field) const {
    if (bytes_.size() - pos_ < n) throw FormatError(origin_ + ": truncated while reading " + field);
  }

  std::string bytes_;
  std::string origin_;
  std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(KwsModel& m, const std::filesystem::path& path) {
  std::string out(kMagic, sizeof kMagic);
  put(out, kCheckpointVersion);
  const auto constants = architecture_constants(m.config().text_width);
  put(out, static_cast<std::uint32_t>(constants.size()));
  for (const auto& [name, value] : constants) {
    put_name(out, name);
    put(out, value);
  }
  put(out, m.config().seed);
  put(out, m.config().dropout);
  const auto state = m.state();
  put(out, static_cast<std::uint32_t>(state.size()));
  for (const auto& [name, tensor] : state) {
    put_name(out, name);
    put(out, static_cast<std::uint32_t>(tensor->rank()));
    for (std::size_t d : tensor->shape()) put(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(tensor->data()), tensor->size() * sizeof(double));
  }
  std::ofstream file(path, std::ios::binary | std::ios::trunc);
  if (!file) throw FormatError(path.string() + ": cannot open for writing");
  file.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!file) throw FormatError(path.string() + ": write failed");
}

KwsModel load_checkpoint(const std::filesystem::path& path) {
  std::ifstream file(path, std::ios::binary);
  if (!file) throw FormatError(path.string() + ": cannot open");
  Reader r(std::string(std::istreambuf_iterator<char>(file), std::istreambuf_iterator<char>()), path.string());

  char magic[sizeof kMagic];
  for (char& c : magic) c = r.get<char>("magic");
  if (std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw FormatError(path.string() + ": bad magic, not a checkpoint");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw FormatError(path.string() + ": checkpoint version " + std::to_string(version) + ", expected " +
                      std::to_string(kCheckpointVersion));
  }
  std::map<std::string, std::uint64_t> found;
  const auto n_constants = r.get<std::uint32_t>("constant count");
  for (std::uint32_t i = 0; i < n_constants; ++i) {
    std::string name = r.name("constant name");
    found[name] = r.get<std::uint64_t>("constant " + name);
  }
  if (!found.contains("text_width")) throw ValidationError(path.string() + ": constant text_width missing");
  for (const auto& [name, expected] : architecture_constants(found["text_width"])) {
    const auto it = found.find(name);
    if (it == found.end()) throw ValidationError(path.string() + ": constant " + name + " missing");
    if (it->second != expected) {
      throw ValidationError(path.string() + ": constant " + name + " is " + std::to_string(it->second) +
                            ", this build expects " + std::to_string(expected));
    }
  }
  ModelConfig config;
  config.text_width = found["text_width"];
  config.seed = r.get<std::uint64_t>("seed");
  config.dropout = r.get<double>("dropout");
  if (!(config.dropout >= 0.0 && config.dropout < 1.0)) throw FormatError(path.string() + ": dropout out of range");
  KwsModel model(config);

  std::map<std::string, Tensor*> slots;
  for (const auto& [name, tensor] : model.state()) slots[name] = tensor;
  const auto n_tensors = r.get<std::uint32_t>("tensor count");
  if (n_tensors != slots.size()) {
    throw ValidationError(path.string() + ": " + std::to_string(n_tensors) + " tensors, model has " +
                          std::to_string(slots.size()));
  }
  for (std::uint32_t i = 0; i < n_tensors; ++i) {
    const std::string name = r.name("tensor name");
    const auto it = slots.find(name);
    if (it == slots.end()) throw ValidationError(path.string() + ": unknown tensor " + name);
    const auto rank = r.get<std::uint32_t>(name + " rank");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>(name + " dims")));
    if (shape != it->second->shape()) {
      throw ValidationError(path.string() + ": tensor " + name + " has shape " + shape_str(shape) + ", expected " +
                            shape_str(it->second->shape()));
    }
    r.doubles(it->second->data(), it->second->size(), name + " data");
    slots.erase(it);
  }
  if (!r.done()) throw FormatError(path.string() + ": trailing bytes after last tensor");
  return model;
}

}  // namespace xkws::model
